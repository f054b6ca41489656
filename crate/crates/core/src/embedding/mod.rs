//! Pixel embeddings: loss functions with analytic gradients, a per-image
//! embedding optimizer and small per-pixel classifiers.

mod classifier;
mod loss;
mod optimize;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use classifier::{LogisticClassifier, SoftmaxClassifier};
pub use loss::{
    binary_ce, binary_ce_gradient, categorical_ce, discriminative_gradient, discriminative_loss,
    discriminative_loss_and_gradient, LossValue, PROB_EPS,
};
pub use optimize::{
    initial_embedding, optimize_embedding, optimize_embedding_with, OptimizationResult,
    OptimizerSettings,
};

/// Margins and weights of the discriminative loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeParams {
    pub delta_v: f64,
    pub delta_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for DiscriminativeParams {
    fn default() -> Self {
        DiscriminativeParams {
            delta_v: 0.1,
            delta_d: 1.5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.001,
        }
    }
}

impl DiscriminativeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v > 0.0 && self.delta_d > 0.0) {
            return Err(Error::invalid("delta_v and delta_d must be positive"));
        }
        if !(2.0 * self.delta_d > self.delta_v) {
            return Err(Error::invalid("2·delta_d must exceed delta_v"));
        }
        if ![self.alpha, self.beta, self.gamma]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Row-major per-pixel vectors (pixel-major, then channel).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingField {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    width: usize,
    height: usize,
    dim: usize,
}

impl EmbeddingField {
    pub fn from_vec(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("embedding dim must be >= 2, got {dim}")));
        }
        if data.len() != width * height * dim {
            return Err(Error::invalid(format!(
                "{} values for a {width}x{height}x{dim} field",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding values must be finite"));
        }
        Ok(EmbeddingField {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn vector(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.dim..(pixel + 1) * self.dim]
    }

    /// Writes `<stem>.bin` (little-endian f32) and `<stem>.json` ({width, height, dim}).
    pub fn write(&self, bin_path: impl AsRef<Path>) -> Result<()> {
        let bin_path = bin_path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        std::fs::write(bin_path, bytes).map_err(|e| Error::io(bin_path, e))?;
        let json_path = bin_path.with_extension("json");
        let header = FieldHeader {
            width: self.width,
            height: self.height,
            dim: self.dim,
        };
        let text = serde_json::to_string(&header).map_err(|e| Error::json(&json_path, e))?;
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
    }

    pub fn read(bin_path: impl AsRef<Path>) -> Result<Self> {
        let bin_path = bin_path.as_ref();
        let json_path = bin_path.with_extension("json");
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let header: FieldHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
        let bytes = std::fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Dataset(format!(
                "{}: length is not a multiple of 4",
                bin_path.display()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        EmbeddingField::from_vec(header.width, header.height, header.dim, data)
    }
}

/// Per-pixel input features (e.g. intensity) used to seed the embedding and
/// train the classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{} values for a {width}x{height}x{channels} feature image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        Ok(FeatureImage {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single channel in `[0, 1]` from 8-bit gray values.
    pub fn from_gray8(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        FeatureImage::new(
            width,
            height,
            1,
            gray.iter().map(|&g| g as f64 / 255.0).collect(),
        )
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Channels followed by the pixel position normalized to `[0, 1)`.
    pub fn with_coordinates(&self) -> FeatureImage {
        let c = self.channels + 2;
        let mut data = Vec::with_capacity(self.width * self.height * c);
        for i in 0..self.width * self.height {
            data.extend_from_slice(self.pixel(i));
            data.push((i % self.width) as f64 / self.width as f64);
            data.push((i / self.width) as f64 / self.height as f64);
        }
        FeatureImage {
            width: self.width,
            height: self.height,
            channels: c,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.25 - 1.0).collect();
        let f = EmbeddingField::from_vec(3, 2, 4, data).unwrap();
        let p = dir.path().join("emb.bin");
        f.write(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24 * 4);
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("emb.json")).unwrap())
                .unwrap();
        assert_eq!(header["dim"], 4);
        // quarter values are exact in f32
        assert_eq!(EmbeddingField::read(&p).unwrap(), f);
    }

    #[test]
    fn field_rejects_bad_input() {
        assert!(EmbeddingField::from_vec(1, 1, 1, vec![0.0]).is_err());
        assert!(EmbeddingField::from_vec(1, 1, 2, vec![0.0]).is_err());
        assert!(EmbeddingField::from_vec(1, 1, 2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(DiscriminativeParams::default().validate().is_ok());
        let bad = DiscriminativeParams {
            delta_v: 4.0,
            delta_d: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
