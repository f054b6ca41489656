//! Seeded synthetic pen scenes: ellipse placement, gray feature images and
//! the label renderings, written out as a dataset directory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::FeatureImage;
use crate::error::{Error, Result};
use crate::geometry::{sorted_intersection_len, Ellipse, HeadSign, RasterGrid};
use crate::label::{LabelImage, LabelKind};
use crate::labelgen::{
    render_binary, render_bodypart, render_categorical, render_instance, Scene,
    DEFAULT_CORE_FACTOR, DEFAULT_HEAD_FRACTION,
};

/// Placement attempts per ellipse before generation gives up.
pub const ATTEMPT_BUDGET: usize = 1000;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_animals: usize,
    /// Semi-major axis range `[min, max]` in pixels.
    pub a_range: (f64, f64),
    /// Semi-minor axis range; must lie below the semi-major range.
    pub b_range: (f64, f64),
    /// Largest allowed `|A ∩ B| / min(|A|, |B|)` between any two animals.
    pub max_overlap: f64,
    pub seed: u64,
    /// Gray-level standard deviation of per-pixel noise.
    pub noise_sigma: f64,
    /// Peak amplitude of the background texture in gray levels.
    pub texture_amplitude: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            n_animals: 4,
            a_range: (14.0, 20.0),
            b_range: (6.0, 9.0),
            max_overlap: 0.15,
            seed: 0,
            noise_sigma: 4.0,
            texture_amplitude: 12.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.a_range;
        let (b0, b1) = self.b_range;
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene width and height must be positive"));
        }
        if !(b0 > 0.0 && b0 <= b1 && b1 <= a0 && a0 <= a1 && a1.is_finite()) {
            return Err(Error::invalid(format!(
                "axis ranges must satisfy 0 < b_min <= b_max <= a_min <= a_max, got a={:?} b={:?}",
                self.a_range, self.b_range
            )));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return Err(Error::invalid("max_overlap must lie in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite())
            || !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite())
        {
            return Err(Error::invalid("noise_sigma and texture_amplitude must be finite and >= 0"));
        }
        Ok(())
    }
}

/// 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_features(&self) -> FeatureImage {
        FeatureImage::from_gray8(self.width, self.height, &self.pixels).expect("sizes match")
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(
                &self.pixels,
                self.width as u32,
                self.height as u32,
                ExtendedColorType::L8,
            )
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let li = LabelImage::read_pgm(path.as_ref(), LabelKind::Instance)?;
        if li.max_label() > u8::MAX as u16 {
            return Err(Error::Dataset(format!(
                "{}: feature image must be 8-bit",
                path.as_ref().display()
            )));
        }
        Ok(GrayImage {
            width: li.width(),
            height: li.height(),
            pixels: li.pixels().iter().map(|&p| p as u8).collect(),
        })
    }
}

fn overlap_fraction(a: &[usize], b: &[usize]) -> f64 {
    let m = a.len().min(b.len());
    if m == 0 {
        return 0.0;
    }
    sorted_intersection_len(a, b) as f64 / m as f64
}

fn place_ellipses(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Ellipse>> {
    let grid = RasterGrid::pixels(spec.width, spec.height);
    let mut placed: Vec<(Ellipse, Vec<usize>)> = Vec::with_capacity(spec.n_animals);
    for k in 0..spec.n_animals {
        let mut ok = None;
        for _ in 0..ATTEMPT_BUDGET {
            let a = rng.gen_range(spec.a_range.0..=spec.a_range.1);
            let b = rng.gen_range(spec.b_range.0..=spec.b_range.1);
            let heading = rng.gen_range(0.0..2.0 * PI);
            let probe = Ellipse::from_heading(0.0, 0.0, a, b, heading)?;
            let (hx, hy) = probe.half_extents();
            let (xmax, ymax) = (spec.width as f64 - 1.0 - hx, spec.height as f64 - 1.0 - hy);
            if xmax < hx || ymax < hy {
                continue;
            }
            let cx = rng.gen_range(hx..=xmax);
            let cy = rng.gen_range(hy..=ymax);
            let e = Ellipse { cx, cy, ..probe };
            let raster = grid.rasterize(&e);
            if placed
                .iter()
                .all(|(_, r)| overlap_fraction(r, &raster) <= spec.max_overlap)
            {
                ok = Some((e, raster));
                break;
            }
        }
        match ok {
            Some(p) => placed.push(p),
            None => {
                return Err(Error::Generation(format!(
                    "could not place animal {} of {} in {}x{} within {ATTEMPT_BUDGET} attempts \
                     (max_overlap {}, a_range {:?}); reduce n_animals or axis sizes",
                    k + 1,
                    spec.n_animals,
                    spec.width,
                    spec.height,
                    spec.max_overlap,
                    spec.a_range
                )))
            }
        }
    }
    let mut depths: Vec<i32> = (1..=spec.n_animals as i32).collect();
    depths.shuffle(rng);
    Ok(placed
        .into_iter()
        .zip(depths)
        .map(|((e, _), d)| {
            let head = if rng.gen_bool(0.5) {
                HeadSign::Forward
            } else {
                HeadSign::Backward
            };
            // flipping the stored side keeps the ellipse but reverses the heading
            let e = if head == HeadSign::Backward { e.with_head(head) } else { e };
            e.with_depth(d)
        })
        .collect())
}

/// Draws a scene and its gray feature image. Outputs depend only on `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Scene, GrayImage)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ellipses = place_ellipses(spec, &mut rng)?;
    let scene = Scene::new(spec.width, spec.height, ellipses)?;

    // evenly spaced animal intensities in a random order, well above the background
    let n = scene.ellipses.len();
    let mut levels: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 180.0 } else { 110.0 + 130.0 * i as f64 / (n - 1) as f64 })
        .collect();
    levels.shuffle(&mut rng);
    let phases: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..2.0 * PI));
    let freq: [f64; 2] = [rng.gen_range(0.15..0.35), rng.gen_range(0.15..0.35)];
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let instances = render_instance(&scene);
    let (w, h) = (spec.width, spec.height);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let id = instances.get(x, y);
            let base = if id == 0 {
                let t = (freq[0] * x as f64 + phases[0]).sin() * (freq[1] * y as f64 + phases[1]).cos()
                    + 0.5 * ((freq[1] * x as f64 - freq[0] * y as f64) + phases[2]).sin();
                50.0 + spec.texture_amplitude * t / 1.5
            } else {
                levels[id as usize - 1]
                    + 0.25 * spec.texture_amplitude * (0.2 * (x + y) as f64 + phases[3]).sin()
            };
            let v = if spec.noise_sigma > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            };
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((
        scene,
        GrayImage {
            width: w,
            height: h,
            pixels,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Subdirectory name, `scene_<k>`.
    pub name: String,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub core_factor: f64,
    pub head_fraction: f64,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// One scene of a dataset directory, fully loaded.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub name: String,
    pub scene: Scene,
    pub features: GrayImage,
    pub binary: LabelImage,
    pub categorical: LabelImage,
    pub instance: LabelImage,
    pub bodypart: LabelImage,
}

impl SceneData {
    pub fn render(
        name: String,
        scene: Scene,
        features: GrayImage,
        core_factor: f64,
        head_fraction: f64,
    ) -> Result<Self> {
        Ok(SceneData {
            name,
            binary: render_binary(&scene),
            categorical: render_categorical(&scene, core_factor)?,
            instance: render_instance(&scene),
            bodypart: render_bodypart(&scene, head_fraction)?,
            scene,
            features,
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let d = dir.as_ref();
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        self.scene.write_annotations(d.join("annotations.json"))?;
        self.features.write_pgm(d.join("features.pgm"))?;
        self.binary.write_pgm(d.join("binary.pgm"))?;
        self.categorical.write_pgm(d.join("categorical.pgm"))?;
        self.instance.write_pgm(d.join("instance.pgm"))?;
        self.bodypart.write_pgm(d.join("bodypart.pgm"))
    }

    pub fn read(dir: impl AsRef<Path>, name: &str) -> Result<Self> {
        let d = dir.as_ref();
        let features = GrayImage::read_pgm(d.join("features.pgm"))?;
        let scene = Scene::read_annotations(d.join("annotations.json"), features.width, features.height)?;
        let load = |file: &str, kind| -> Result<LabelImage> {
            let li = LabelImage::read_pgm(d.join(file), kind)?;
            if li.dims() != (features.width, features.height) {
                return Err(Error::Dataset(format!(
                    "{}: {file} is {:?}, features are {}x{}",
                    d.display(),
                    li.dims(),
                    features.width,
                    features.height
                )));
            }
            Ok(li)
        };
        Ok(SceneData {
            name: name.to_string(),
            binary: load("binary.pgm", LabelKind::Binary)?,
            categorical: load("categorical.pgm", LabelKind::Categorical3)?,
            instance: load("instance.pgm", LabelKind::Instance)?,
            bodypart: load("bodypart.pgm", LabelKind::Bodypart3)?,
            scene,
            features,
        })
    }
}

/// Generates every scene and writes the dataset layout with default label
/// parameters.
pub fn generate_suite(specs: &[SceneSpec], dir: impl AsRef<Path>) -> Result<Manifest> {
    generate_suite_with(specs, dir, DEFAULT_CORE_FACTOR, DEFAULT_HEAD_FRACTION)
}

pub fn generate_suite_with(
    specs: &[SceneSpec],
    dir: impl AsRef<Path>,
    core_factor: f64,
    head_fraction: f64,
) -> Result<Manifest> {
    if specs.is_empty() {
        return Err(Error::invalid("a suite needs at least one scene spec"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<ManifestEntry> = specs
        .iter()
        .enumerate()
        .map(|(k, s)| ManifestEntry {
            name: format!("scene_{k}"),
            spec: s.clone(),
        })
        .collect();
    entries
        .par_iter()
        .map(|e| -> Result<()> {
            let (scene, features) = generate_scene(&e.spec).map_err(|err| match err {
                Error::Generation(m) => Error::Generation(format!("{}: {m}", e.name)),
                other => other,
            })?;
            SceneData::render(e.name.clone(), scene, features, core_factor, head_fraction)?
                .write(dir.join(&e.name))
        })
        .collect::<Result<Vec<()>>>()?;
    let manifest = Manifest {
        core_factor,
        head_fraction,
        scenes: entries,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Scene directory of a manifest entry.
pub fn scene_dir(dataset: impl AsRef<Path>, entry: &ManifestEntry) -> PathBuf {
    dataset.as_ref().join(&entry.name)
}

/// Input of `generate`: an explicit list of specs, or a template repeated
/// `count` times with consecutive seeds and an animal count drawn from
/// `n_animals`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SuiteSpec {
    List(Vec<SceneSpec>),
    Template {
        template: SceneSpec,
        count: usize,
        n_animals: (usize, usize),
    },
}

impl SuiteSpec {
    pub fn expand(&self) -> Result<Vec<SceneSpec>> {
        match self {
            SuiteSpec::List(v) => Ok(v.clone()),
            SuiteSpec::Template {
                template,
                count,
                n_animals: (lo, hi),
            } => {
                if lo > hi {
                    return Err(Error::invalid("n_animals range must satisfy min <= max"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(template.seed);
                Ok((0..*count as u64)
                    .map(|k| SceneSpec {
                        seed: template.seed.wrapping_add(k),
                        n_animals: rng.gen_range(*lo..=*hi),
                        ..template.clone()
                    })
                    .collect())
            }
        }
    }
}
