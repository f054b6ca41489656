//! Per-scene segmentation and evaluation, and their batch drivers over a
//! dataset directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::cluster_masked_embedding;
use crate::config::{Corruption, MaskSource, PipelineConfig};
use crate::embedding::{optimize_embedding, LogisticClassifier};
use crate::error::{Error, Result};
use crate::geometry::{Ellipse, HeadSign, RasterGrid};
use crate::label::{LabelImage, LabelKind, HEAD};
use crate::labelgen::{
    ellipses_from_categorical, extract_gt_ellipses, head_side, read_ellipses, write_ellipses,
};
use crate::metrics::{
    aggregate, ellipse_match, jaccard_accuracy, match_segments, orientation_counts, Averaging,
    EvalReport, MatchResult,
};
use crate::scenegen::{Manifest, SceneData};

pub const PREDICTIONS_FILE: &str = "predictions.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Core blobs of a categorical image, scaled up by `1 / core_factor`.
    Categorical,
    /// Embedding optimization, masked clustering and a fit per cluster.
    Combined,
    /// Combined, plus head side from a body-part image.
    Bodypart,
}

impl Mode {
    /// Kind of the semantic image the mode predicts alongside instances.
    pub fn semantic_kind(self) -> LabelKind {
        match self {
            Mode::Categorical => LabelKind::Categorical3,
            Mode::Combined => LabelKind::Binary,
            Mode::Bodypart => LabelKind::Bodypart3,
        }
    }

    fn semantic_file(self) -> &'static str {
        match self {
            Mode::Categorical => "categorical.pgm",
            Mode::Combined => "mask.pgm",
            Mode::Bodypart => "bodypart.pgm",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Categorical => "categorical",
            Mode::Combined => "combined",
            Mode::Bodypart => "bodypart",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(Mode::Categorical),
            "combined" => Ok(Mode::Combined),
            "bodypart" => Ok(Mode::Bodypart),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// Output of one scene's segmentation.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub ellipses: Vec<Ellipse>,
    pub instance: LabelImage,
    pub semantic: LabelImage,
    /// Discriminative loss after the last optimizer step, when one ran.
    pub final_loss: Option<f64>,
}

/// Per-scene seed derived from the configured seed and the scene index.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Erodes the foreground `erosion` times, then reassigns each pixel to a
/// different class with probability `flip_rate`.
pub fn corrupt(li: &LabelImage, c: &Corruption, seed: u64) -> LabelImage {
    if c.is_identity() {
        return li.clone();
    }
    let (w, h) = li.dims();
    let mut px = li.pixels().to_vec();
    for _ in 0..c.erosion {
        let prev = px.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if prev[i] == 0 {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == w
                    || y + 1 == h
                    || prev[i - 1] == 0
                    || prev[i + 1] == 0
                    || prev[i - w] == 0
                    || prev[i + w] == 0;
                if edge {
                    px[i] = 0;
                }
            }
        }
    }
    let classes = li.kind().max_class().unwrap_or_else(|| li.max_label().max(1)) + 1;
    if c.flip_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in px.iter_mut() {
            if rng.gen_bool(c.flip_rate) {
                let other = rng.gen_range(1..classes);
                *p = (*p + other) % classes;
            }
        }
    }
    LabelImage::from_pixels(w, h, li.kind(), px).expect("classes stay within the kind")
}

/// Instance image painted from ellipses in list order (later ones on top).
pub fn paint_ellipses(width: usize, height: usize, ellipses: &[Ellipse]) -> LabelImage {
    let mut li = LabelImage::new(width, height, LabelKind::Instance);
    for (i, e) in ellipses.iter().enumerate() {
        for (x, y) in e.raster_pixels(width, height) {
            li.set(x, y, (i + 1).min(u16::MAX as usize) as u16);
        }
    }
    li
}

/// Foreground mask for the combined pipeline.
pub fn foreground_mask(data: &SceneData, cfg: &PipelineConfig) -> Result<LabelImage> {
    match cfg.mask_source {
        MaskSource::GroundTruth => Ok(data.binary.clone()),
        MaskSource::Classifier => {
            let features = data.features.to_features();
            let clf = LogisticClassifier::train(
                &features,
                &data.binary,
                cfg.classifier_steps,
                cfg.classifier_learning_rate,
            )?;
            Ok(clf.predict_mask(&features, cfg.threshold))
        }
    }
}

/// Embedding optimization on the scene's own instance labels, clustering of
/// the masked pixels and a region fit per cluster. Returns the instance
/// image, the fitted ellipses with their cluster ids and the final loss.
pub fn combined_instances(
    data: &SceneData,
    mask: &LabelImage,
    cfg: &PipelineConfig,
) -> Result<(LabelImage, Vec<(u16, Ellipse)>, f64)> {
    let features = data.features.to_features();
    let res = optimize_embedding(&features, &data.instance, &cfg.discriminative(), &cfg.optimizer())?;
    let instance = cluster_masked_embedding(&res.field, mask, &cfg.clustering())?;
    let ext = extract_gt_ellipses(&instance, cfg.min_pixels)?;
    for s in &ext.skipped {
        log::debug!("{}: cluster {} not fitted: {:?}", data.name, s.id, s.reason);
    }
    let ellipses = ext.ellipses.into_iter().map(|r| (r.id, r.ellipse)).collect();
    let loss = res.losses.last().map_or(f64::NAN, |l| l.total);
    Ok((instance, ellipses, loss))
}

/// Segments one scene. `index` only seeds label corruption.
pub fn segment_scene(
    data: &SceneData,
    index: usize,
    cfg: &PipelineConfig,
    mode: Mode,
) -> Result<Prediction> {
    let seed = scene_seed(cfg.seed, index);
    let (w, h) = data.instance.dims();
    match mode {
        Mode::Categorical => {
            let cat = corrupt(&data.categorical, &cfg.corruption, seed);
            let ellipses = ellipses_from_categorical(&cat, cfg.core_factor, cfg.min_pixels)?.into_ellipses();
            Ok(Prediction {
                instance: paint_ellipses(w, h, &ellipses),
                ellipses,
                semantic: cat,
                final_loss: None,
            })
        }
        Mode::Combined => {
            let mask = foreground_mask(data, cfg)?;
            let (instance, fitted, loss) = combined_instances(data, &mask, cfg)?;
            Ok(Prediction {
                ellipses: fitted.into_iter().map(|(_, e)| e).collect(),
                instance,
                semantic: mask,
                final_loss: Some(loss),
            })
        }
        Mode::Bodypart => {
            let bodypart = corrupt(&data.bodypart, &cfg.corruption, seed);
            let mask = bodypart.to_binary();
            let (instance, fitted, loss) = combined_instances(data, &mask, cfg)?;
            let ellipses = fitted
                .into_iter()
                .map(|(id, e)| {
                    let head: Vec<(usize, usize)> = instance
                        .pixels()
                        .iter()
                        .zip(bodypart.pixels())
                        .enumerate()
                        .filter(|(_, (&i, &b))| i == id && b == HEAD)
                        .map(|(p, _)| (p % w, p / w))
                        .collect();
                    e.with_head(head_side(&e, &head))
                })
                .collect();
            Ok(Prediction {
                ellipses,
                instance,
                semantic: bodypart,
                final_loss: Some(loss),
            })
        }
    }
}

/// Ground-truth ellipses for evaluation: fits to the visible instance regions
/// (what a prediction can recover), each directed like its annotation.
pub fn gt_ellipses(data: &SceneData, min_pixels: usize) -> Result<Vec<Ellipse>> {
    let ext = extract_gt_ellipses(&data.instance, min_pixels)?;
    Ok(ext
        .ellipses
        .into_iter()
        .map(|r| {
            let ann = &data.scene.ellipses[r.id as usize - 1];
            let heading = ann.heading().unwrap_or(ann.theta);
            let e = r.ellipse;
            let forward = (e.theta - heading).cos() >= 0.0;
            e.with_head(if forward {
                HeadSign::Forward
            } else {
                HeadSign::Backward
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub name: String,
    /// Ellipse-level scores (the primary evaluation).
    pub ellipse: EvalReport,
    /// Pixel-level scores of the instance image.
    pub pixel: EvalReport,
    pub n_pred: usize,
    pub n_gt: usize,
    pub ellipse_matches: MatchResult,
}

/// Scores one scene's prediction against its ground truth.
pub fn evaluate_scene(
    data: &SceneData,
    pred: &Prediction,
    mode: Mode,
    cfg: &PipelineConfig,
) -> Result<SceneReport> {
    let (w, h) = data.instance.dims();
    let gt = gt_ellipses(data, cfg.min_pixels)?;
    let m = ellipse_match(&pred.ellipses, &gt, &RasterGrid::pixels(w, h))?;
    let gt_semantic = match mode.semantic_kind() {
        LabelKind::Binary => &data.binary,
        LabelKind::Categorical3 => &data.categorical,
        _ => &data.bodypart,
    };
    let jac = jaccard_accuracy(&pred.semantic, gt_semantic, cfg.jaccard_background)?.value;
    let mut ellipse = EvalReport::from_match(&m);
    if mode == Mode::Bodypart {
        let (c, t) = orientation_counts(&pred.ellipses, &gt, &m, true)?;
        ellipse = ellipse.with_orientation(c, t);
    }
    ellipse.jaccard_accuracy = jac;
    let mut pixel = EvalReport::from_match(&match_segments(&pred.instance, &data.instance)?);
    pixel.jaccard_accuracy = jac;
    Ok(SceneReport {
        name: data.name.clone(),
        ellipse,
        pixel,
        n_pred: pred.ellipses.len(),
        n_gt: gt.len(),
        ellipse_matches: m,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFailure {
    pub name: String,
    pub error: String,
    pub numerical: bool,
}

/// Index of a prediction directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub mode: Mode,
    pub scenes: Vec<String>,
    pub failures: Vec<SceneFailure>,
}

impl PredictionManifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(PREDICTIONS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_json(dir.as_ref().join(PREDICTIONS_FILE), self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

impl Prediction {
    pub fn write(&self, dir: impl AsRef<Path>, mode: Mode) -> Result<()> {
        let d = dir.as_ref();
        mkdir(d)?;
        write_ellipses(d.join("ellipses.json"), &self.ellipses)?;
        self.instance.write_pgm(d.join("instance.pgm"))?;
        self.semantic.write_pgm(d.join(mode.semantic_file()))
    }

    pub fn read(dir: impl AsRef<Path>, mode: Mode) -> Result<Self> {
        let d = dir.as_ref();
        Ok(Prediction {
            ellipses: read_ellipses(d.join("ellipses.json"))?,
            instance: LabelImage::read_pgm(d.join("instance.pgm"), LabelKind::Instance)?,
            semantic: LabelImage::read_pgm(d.join(mode.semantic_file()), mode.semantic_kind())?,
            final_loss: None,
        })
    }

    /// No ellipses, all-background images.
    pub fn empty(width: usize, height: usize, mode: Mode) -> Self {
        Prediction {
            ellipses: Vec::new(),
            instance: LabelImage::new(width, height, LabelKind::Instance),
            semantic: LabelImage::new(width, height, mode.semantic_kind()),
            final_loss: None,
        }
    }
}

/// Segments every scene of a dataset into `out/<scene>/`. Scene failures are
/// logged and recorded in the prediction manifest; the batch continues.
pub fn segment_dataset(
    dataset: impl AsRef<Path>,
    out: impl AsRef<Path>,
    cfg: &PipelineConfig,
    mode: Mode,
) -> Result<PredictionManifest> {
    cfg.validate()?;
    let (dataset, out) = (dataset.as_ref(), out.as_ref());
    let manifest = Manifest::read(dataset)?;
    mkdir(out)?;
    let results: Vec<Result<()>> = manifest
        .scenes
        .par_iter()
        .enumerate()
        .map(|(k, entry)| {
            let data = SceneData::read(dataset.join(&entry.name), &entry.name)?;
            segment_scene(&data, k, cfg, mode)?.write(out.join(&entry.name), mode)
        })
        .collect();
    let mut failures = Vec::new();
    for (entry, r) in manifest.scenes.iter().zip(results) {
        if let Err(e) = r {
            log::warn!("{}: {e}", entry.name);
            failures.push(SceneFailure {
                name: entry.name.clone(),
                error: e.to_string(),
                numerical: e.is_numerical(),
            });
        }
    }
    let pm = PredictionManifest {
        mode,
        scenes: manifest.scenes.iter().map(|e| e.name.clone()).collect(),
        failures,
    };
    pm.write(out)?;
    Ok(pm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mode: Mode,
    pub averaging: Averaging,
    pub n_scenes: usize,
    pub ellipse: EvalReport,
    pub pixel: EvalReport,
    /// Scenes without a prediction (segmentation failed); scored as empty.
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scenes: Vec<SceneReport>,
    pub aggregate: AggregateReport,
}

/// Combines scene reports in order.
pub fn aggregate_scenes(
    scenes: &[SceneReport],
    mode: Mode,
    averaging: Averaging,
    missing: Vec<String>,
) -> AggregateReport {
    let ell: Vec<EvalReport> = scenes.iter().map(|s| s.ellipse).collect();
    let pix: Vec<EvalReport> = scenes.iter().map(|s| s.pixel).collect();
    AggregateReport {
        mode,
        averaging,
        n_scenes: scenes.len(),
        ellipse: aggregate(&ell, averaging),
        pixel: aggregate(&pix, averaging),
        missing,
    }
}

/// Scores a prediction directory against its dataset. The two manifests must
/// list the same scenes in the same order.
pub fn evaluate_dataset(
    predictions: impl AsRef<Path>,
    dataset: impl AsRef<Path>,
    cfg: &PipelineConfig,
) -> Result<Evaluation> {
    let (pdir, ddir) = (predictions.as_ref(), dataset.as_ref());
    let manifest = Manifest::read(ddir)?;
    let pm = PredictionManifest::read(pdir)?;
    let names: Vec<&str> = manifest.scenes.iter().map(|e| e.name.as_str()).collect();
    if pm.scenes.iter().map(String::as_str).ne(names.iter().copied()) {
        return Err(Error::Dataset(format!(
            "prediction manifest lists {:?}, dataset lists {:?}",
            pm.scenes, names
        )));
    }
    let failed: Vec<String> = pm.failures.iter().map(|f| f.name.clone()).collect();
    let scenes: Vec<SceneReport> = names
        .par_iter()
        .map(|&name| {
            let data = SceneData::read(ddir.join(name), name)?;
            let (w, h) = data.instance.dims();
            let pred = if failed.iter().any(|f| f == name) {
                Prediction::empty(w, h, pm.mode)
            } else {
                Prediction::read(pdir.join(name), pm.mode)?
            };
            if pred.instance.dims() != (w, h) {
                return Err(Error::Dataset(format!(
                    "{name}: prediction is {:?}, ground truth {w}x{h}",
                    pred.instance.dims()
                )));
            }
            evaluate_scene(&data, &pred, pm.mode, cfg)
        })
        .collect::<Result<_>>()?;
    let aggregate = aggregate_scenes(&scenes, pm.mode, cfg.averaging, failed);
    Ok(Evaluation { scenes, aggregate })
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl Evaluation {
    /// One CSV row per scene; ratios rounded to 4 decimals.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "scene,pq,f1,precision,recall,jaccard,orientation,tp,fp,fn,pixel_pq,pixel_f1\n",
        );
        for s in &self.scenes {
            let e = &s.ellipse;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                s.name,
                fmt4(e.pq),
                fmt4(e.f1),
                fmt4(e.precision),
                fmt4(e.recall),
                fmt4(e.jaccard_accuracy),
                fmt4(e.orientation_accuracy),
                e.tp,
                e.fp,
                e.fn_,
                fmt4(s.pixel.pq),
                fmt4(s.pixel.f1),
            ));
        }
        out
    }

    /// Writes `reports/<scene>.json`, `aggregate.json` and `summary.csv`.
    pub fn write(&self, out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let out = out.as_ref();
        let reports = out.join("reports");
        mkdir(&reports)?;
        let mut written = Vec::new();
        for s in &self.scenes {
            let p = reports.join(format!("{}.json", s.name));
            write_json(&p, s)?;
            written.push(p);
        }
        let agg = out.join("aggregate.json");
        write_json(&agg, &self.aggregate)?;
        let csv = out.join("summary.csv");
        std::fs::write(&csv, self.summary_csv()).map_err(|e| Error::io(&csv, e))?;
        written.extend([agg, csv]);
        Ok(written)
    }
}

/// Runs `f` on a rayon pool of `jobs` threads (`None` = rayon's default).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
