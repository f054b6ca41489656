//! Pipeline configuration, read from and written to JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterParams, DistanceMetric};
use crate::embedding::{DiscriminativeParams, OptimizerSettings};
use crate::error::{Error, Result};
use crate::labelgen::{DEFAULT_CORE_FACTOR, DEFAULT_HEAD_FRACTION, DEFAULT_MIN_PIXELS};
use crate::metrics::Averaging;

/// Where the combined pipeline takes its foreground mask from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    /// Logistic regression on the gray features, thresholded at `threshold`.
    #[default]
    Classifier,
    /// The dataset's binary label image.
    GroundTruth,
}

/// Label corruption applied to ground-truth semantic images when they stand
/// in for a network prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corruption {
    /// Probability that a pixel is reassigned to a different random class.
    pub flip_rate: f64,
    /// Foreground erosion passes (4-neighbourhood) before flipping.
    pub erosion: usize,
}

impl Corruption {
    pub fn is_identity(&self) -> bool {
        self.flip_rate == 0.0 && self.erosion == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dim: usize,
    pub delta_v: f64,
    pub delta_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Whether label 0 forms its own cluster in the discriminative loss.
    pub include_background: bool,

    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init_scale: f64,

    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub metric: DistanceMetric,
    pub allow_single_cluster: bool,

    pub core_factor: f64,
    pub head_fraction: f64,
    /// Probability threshold of the foreground classifier.
    pub threshold: f64,
    /// Regions smaller than this are not fitted.
    pub min_pixels: usize,

    pub mask_source: MaskSource,
    pub classifier_steps: usize,
    pub classifier_learning_rate: f64,
    pub corruption: Corruption,

    pub averaging: Averaging,
    /// Include the background class in the Jaccard mean.
    pub jaccard_background: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let d = DiscriminativeParams::default();
        let o = OptimizerSettings::default();
        let c = ClusterParams::default();
        PipelineConfig {
            dim: o.dim,
            delta_v: d.delta_v,
            delta_d: d.delta_d,
            alpha: d.alpha,
            beta: d.beta,
            gamma: d.gamma,
            include_background: o.include_background,
            steps: o.steps,
            learning_rate: o.learning_rate,
            seed: o.seed,
            init_scale: o.init_scale,
            min_cluster_size: c.min_cluster_size,
            min_samples: c.min_samples,
            metric: c.metric,
            allow_single_cluster: c.allow_single_cluster,
            core_factor: DEFAULT_CORE_FACTOR,
            head_fraction: DEFAULT_HEAD_FRACTION,
            threshold: 0.5,
            min_pixels: DEFAULT_MIN_PIXELS,
            mask_source: MaskSource::default(),
            classifier_steps: 1000,
            classifier_learning_rate: 0.1,
            corruption: Corruption::default(),
            averaging: Averaging::default(),
            jaccard_background: false,
        }
    }
}

impl PipelineConfig {
    pub fn discriminative(&self) -> DiscriminativeParams {
        DiscriminativeParams {
            delta_v: self.delta_v,
            delta_d: self.delta_d,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn optimizer(&self) -> OptimizerSettings {
        OptimizerSettings {
            dim: self.dim,
            steps: self.steps,
            learning_rate: self.learning_rate,
            seed: self.seed,
            init_scale: self.init_scale,
            include_background: self.include_background,
            ..Default::default()
        }
    }

    pub fn clustering(&self) -> ClusterParams {
        ClusterParams {
            min_cluster_size: self.min_cluster_size,
            min_samples: self.min_samples,
            metric: self.metric,
            allow_single_cluster: self.allow_single_cluster,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.discriminative().validate()?;
        self.optimizer().validate()?;
        self.clustering().validate()?;
        for (name, v) in [
            ("core_factor", self.core_factor),
            ("head_fraction", self.head_fraction),
            ("threshold", self.threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.corruption.flip_rate) {
            return Err(Error::invalid("corruption.flip_rate must lie in [0, 1]"));
        }
        if !(self.classifier_learning_rate > 0.0) {
            return Err(Error::invalid("classifier_learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
