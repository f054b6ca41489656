//! Embedding snapshots during optimization: scatter plots of the first two
//! embedding axes and the clusters found at each requested step.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::clustering::cluster_masked_embedding;
use crate::config::PipelineConfig;
use crate::embedding::{discriminative_loss, optimize_embedding_with, EmbeddingField};
use crate::error::{Error, Result};
use crate::label::LabelImage;
use crate::pipeline::write_json;
use crate::scenegen::SceneData;

pub const SCATTER_SIZE: u32 = 256;

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
];

fn color(label: u16) -> Rgb<u8> {
    if label == 0 {
        Rgb([40, 40, 40])
    } else {
        Rgb(PALETTE[(label as usize - 1) % PALETTE.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub loss: f64,
    /// Mean over instances of the mean L1 distance of a pixel to its
    /// instance mean (background excluded).
    pub spread: f64,
    pub n_clusters: usize,
}

/// Mean within-instance L1 spread of the foreground instances.
pub fn instance_spread(f: &EmbeddingField, inst: &LabelImage) -> f64 {
    let d = f.dim();
    let k = inst.max_label() as usize;
    let mut sums = vec![0.0; (k + 1) * d];
    let mut counts = vec![0usize; k + 1];
    for (i, &l) in inst.pixels().iter().enumerate() {
        counts[l as usize] += 1;
        for (s, v) in sums[l as usize * d..].iter_mut().zip(f.vector(i)) {
            *s += v;
        }
    }
    let mut spread = vec![0.0; k + 1];
    for (i, &l) in inst.pixels().iter().enumerate() {
        let l = l as usize;
        let mean = &sums[l * d..(l + 1) * d];
        spread[l] += f
            .vector(i)
            .iter()
            .zip(mean)
            .map(|(x, s)| (x - s / counts[l] as f64).abs())
            .sum::<f64>();
    }
    let present: Vec<usize> = (1..=k).filter(|&l| counts[l] > 0).collect();
    if present.is_empty() {
        return 0.0;
    }
    present
        .iter()
        .map(|&l| spread[l] / counts[l] as f64)
        .sum::<f64>()
        / present.len() as f64
}

/// Scatter plot of embedding axes 0 and 1, colored by ground-truth instance.
/// Higher dimensions are projected onto the first two axes.
pub fn scatter_image(f: &EmbeddingField, inst: &LabelImage) -> RgbImage {
    let mut img = RgbImage::from_pixel(SCATTER_SIZE, SCATTER_SIZE, Rgb([255, 255, 255]));
    let n = f.len();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..n {
        let v = f.vector(i);
        for a in 0..2 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let px = |v: f64, a: usize| {
        let t = (v - lo[a]) / span;
        ((4.0 + t * (SCATTER_SIZE as f64 - 9.0)).round() as u32).min(SCATTER_SIZE - 1)
    };
    // background first so animals stay visible on top
    for pass in [true, false] {
        for i in 0..n {
            let l = inst.pixels()[i];
            if (l == 0) != pass {
                continue;
            }
            let v = f.vector(i);
            img.put_pixel(px(v[0], 0), SCATTER_SIZE - 1 - px(v[1], 1), color(l));
        }
    }
    img
}

pub fn label_image_rgb(li: &LabelImage) -> RgbImage {
    let (w, h) = li.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| color(li.get(x as usize, y as usize)))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Optimizes the scene's embedding up to the largest requested step and
/// records a snapshot at every requested step (0 is the initialization).
/// With `out`, writes `step_<k>_embedding.png`, `step_<k>_clusters.png` and
/// `snapshots.json` there.
pub fn embed_demo(
    data: &SceneData,
    cfg: &PipelineConfig,
    steps: &[usize],
    out: Option<&Path>,
) -> Result<Vec<Snapshot>> {
    let mut wanted = steps.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let last = *wanted
        .last()
        .ok_or_else(|| Error::invalid("at least one snapshot step is required"))?;
    let opt = crate::embedding::OptimizerSettings {
        steps: last,
        ..cfg.optimizer()
    };
    let features = data.features.to_features();
    let mut fields = Vec::with_capacity(wanted.len());
    optimize_embedding_with(&features, &data.instance, &cfg.discriminative(), &opt, |k, f| {
        if wanted.binary_search(&k).is_ok() {
            fields.push((k, f.clone()));
        }
    })?;
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut snaps = Vec::with_capacity(fields.len());
    for (k, f) in &fields {
        let loss = discriminative_loss(f, &data.instance, &cfg.discriminative(), cfg.include_background)?;
        let clusters = cluster_masked_embedding(f, &data.binary, &cfg.clustering())?;
        snaps.push(Snapshot {
            step: *k,
            loss: loss.total,
            spread: instance_spread(f, &data.instance),
            n_clusters: clusters.max_label() as usize,
        });
        if let Some(d) = out {
            save_png(&scatter_image(f, &data.instance), &d.join(format!("step_{k}_embedding.png")))?;
            save_png(&label_image_rgb(&clusters), &d.join(format!("step_{k}_clusters.png")))?;
        }
    }
    if let Some(d) = out {
        write_json(d.join("snapshots.json"), &snaps)?;
    }
    Ok(snaps)
}
