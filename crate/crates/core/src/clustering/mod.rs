//! Density-based clustering of embedded pixels.

pub mod hdbscan;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingField;
use crate::error::{Error, Result};
use crate::label::{LabelImage, LabelKind};

pub use self::hdbscan::{hdbscan, hdbscan_flat};

pub const NOISE: i32 = -1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Manhattan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    /// Neighbourhood size for core distances, the point itself included.
    pub min_samples: usize,
    pub metric: DistanceMetric,
    /// Lets the root of the condensed tree be selected, so that a single dense
    /// group comes out as one cluster instead of noise.
    pub allow_single_cluster: bool,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            min_cluster_size: 100,
            min_samples: 10,
            metric: DistanceMetric::Euclidean,
            allow_single_cluster: true,
        }
    }
}

impl ClusterParams {
    pub fn new(min_cluster_size: usize, min_samples: usize) -> Self {
        ClusterParams {
            min_cluster_size,
            min_samples,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 {
            return Err(Error::invalid("min_cluster_size must be at least 2"));
        }
        if self.min_samples < 1 {
            return Err(Error::invalid("min_samples must be at least 1"));
        }
        Ok(())
    }
}

/// Per-point cluster labels (`NOISE` or `0..n_clusters`) and the pixel index
/// each point came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<i32>,
    pub n_clusters: usize,
    pub point_index: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub n_clusters: usize,
    pub n_noise: usize,
    pub min_cluster_size: usize,
}

impl ClusterAssignment {
    pub(crate) fn all_noise(n: usize) -> Self {
        ClusterAssignment {
            labels: vec![NOISE; n],
            n_clusters: 0,
            point_index: (0..n).collect(),
        }
    }

    pub(crate) fn from_labels(labels: Vec<i32>) -> Self {
        let n_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        let n = labels.len();
        ClusterAssignment {
            labels,
            n_clusters,
            point_index: (0..n).collect(),
        }
    }

    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    pub fn summary(&self, min_cluster_size: usize) -> ClusterSummary {
        ClusterSummary {
            n_clusters: self.n_clusters,
            n_noise: self.n_noise(),
            min_cluster_size,
        }
    }

    /// Writes `pixel_x,pixel_y,label` rows for an image of the given width.
    pub fn write_csv(&self, path: impl AsRef<Path>, width: usize) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("pixel_x,pixel_y,label\n");
        for (&p, &l) in self.point_index.iter().zip(&self.labels) {
            out.push_str(&format!("{},{},{}\n", p % width, p / width, l));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Clusters the embeddings of the mask's foreground pixels. Noise and
/// background become 0 in the returned instance image; cluster ids run from 1
/// in decreasing cluster size.
pub fn cluster_masked_embedding(
    f: &EmbeddingField,
    mask: &LabelImage,
    params: &ClusterParams,
) -> Result<LabelImage> {
    cluster_masked_embedding_full(f, mask, params).map(|(li, _)| li)
}

/// As [`cluster_masked_embedding`], also returning the point assignment with
/// labels renumbered to match the instance ids minus one.
pub fn cluster_masked_embedding_full(
    f: &EmbeddingField,
    mask: &LabelImage,
    params: &ClusterParams,
) -> Result<(LabelImage, ClusterAssignment)> {
    params.validate()?;
    if f.dims() != mask.dims() {
        return Err(Error::ShapeMismatch {
            expected: f.dims(),
            actual: mask.dims(),
        });
    }
    let (w, h) = f.dims();
    let fg: Vec<usize> = (0..w * h).filter(|&i| mask.pixels()[i] != 0).collect();
    let mut out = LabelImage::new(w, h, LabelKind::Instance);
    if fg.is_empty() {
        return Ok((
            out,
            ClusterAssignment {
                labels: Vec::new(),
                n_clusters: 0,
                point_index: Vec::new(),
            },
        ));
    }
    let mut data = Vec::with_capacity(fg.len() * f.dim());
    for &i in &fg {
        data.extend_from_slice(f.vector(i));
    }
    let raw = hdbscan_flat(&data, f.dim(), params)?;

    // order clusters by size, larger first; ties keep first-pixel order
    let sizes = raw.cluster_sizes();
    let mut order: Vec<usize> = (0..raw.n_clusters).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut rank = vec![0i32; raw.n_clusters];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r as i32;
    }
    if raw.n_clusters > u16::MAX as usize {
        return Err(Error::invalid("too many clusters for a 16-bit instance image"));
    }
    let labels: Vec<i32> = raw
        .labels
        .iter()
        .map(|&l| if l < 0 { NOISE } else { rank[l as usize] })
        .collect();
    for (&p, &l) in fg.iter().zip(&labels) {
        if l >= 0 {
            out.pixels_mut()[p] = (l + 1) as u16;
        }
    }
    Ok((
        out,
        ClusterAssignment {
            labels,
            n_clusters: raw.n_clusters,
            point_index: fg,
        },
    ))
}
