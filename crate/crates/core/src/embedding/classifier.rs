//! Per-pixel linear classifiers trained with the cross-entropy losses. They
//! produce the foreground mask for the combined pipeline when no label-derived
//! mask is used.

use super::{binary_ce, binary_ce_gradient, categorical_ce, FeatureImage};
use crate::error::{Error, Result};
use crate::label::{LabelImage, LabelKind};

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let lr = self.lr * (1.0 - B2.powi(self.t)).sqrt() / (1.0 - B1.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * self.m[i] / (self.v[i].sqrt() + 1e-8);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn check_dims(features: &FeatureImage, labels: &LabelImage) -> Result<()> {
    if (features.width, features.height) != labels.dims() {
        return Err(Error::ShapeMismatch {
            expected: labels.dims(),
            actual: (features.width, features.height),
        });
    }
    Ok(())
}

/// `p(foreground) = σ(w·f + b)` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Binary cross-entropy after each training step.
    pub history: Vec<f64>,
}

impl LogisticClassifier {
    pub fn train(
        features: &FeatureImage,
        labels: &LabelImage,
        steps: usize,
        learning_rate: f64,
    ) -> Result<Self> {
        check_dims(features, labels)?;
        let c = features.channels;
        let mut params = vec![0.0; c + 1];
        let mut adam = Adam::new(c + 1, learning_rate);
        let mut history = Vec::with_capacity(steps);
        let binary = labels.to_binary();
        let n = binary.pixels().len();
        for _ in 0..steps {
            let clf = LogisticClassifier {
                weights: params[..c].to_vec(),
                bias: params[c],
                history: Vec::new(),
            };
            let p = clf.predict(features);
            history.push(binary_ce(&p, &binary)?);
            let dz = binary_ce_gradient(&p, &binary)?;
            let mut grad = vec![0.0; c + 1];
            for i in 0..n {
                for (g, f) in grad[..c].iter_mut().zip(features.pixel(i)) {
                    *g += dz[i] * f;
                }
                grad[c] += dz[i];
            }
            adam.step(&mut params, &grad);
        }
        Ok(LogisticClassifier {
            weights: params[..c].to_vec(),
            bias: params[c],
            history,
        })
    }

    pub fn predict(&self, features: &FeatureImage) -> Vec<f64> {
        (0..features.width * features.height)
            .map(|i| {
                let z: f64 = self
                    .weights
                    .iter()
                    .zip(features.pixel(i))
                    .map(|(w, f)| w * f)
                    .sum();
                sigmoid(z + self.bias)
            })
            .collect()
    }

    /// Thresholded prediction (`p > threshold` is foreground).
    pub fn predict_mask(&self, features: &FeatureImage, threshold: f64) -> LabelImage {
        let pixels = self
            .predict(features)
            .into_iter()
            .map(|p| u16::from(p > threshold))
            .collect();
        LabelImage::from_pixels(features.width, features.height, LabelKind::Binary, pixels)
            .expect("dimensions match")
    }
}

/// Multinomial logistic regression: `softmax(W·f + b)` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    pub classes: usize,
    /// `classes × (channels + 1)`, bias last.
    pub params: Vec<f64>,
    pub history: Vec<f64>,
}

impl SoftmaxClassifier {
    pub fn train(
        features: &FeatureImage,
        labels: &LabelImage,
        classes: usize,
        steps: usize,
        learning_rate: f64,
    ) -> Result<Self> {
        check_dims(features, labels)?;
        if classes < 2 {
            return Err(Error::invalid("softmax classifier needs at least 2 classes"));
        }
        let stride = features.channels + 1;
        let mut clf = SoftmaxClassifier {
            classes,
            params: vec![0.0; classes * stride],
            history: Vec::with_capacity(steps),
        };
        let mut adam = Adam::new(clf.params.len(), learning_rate);
        let n = labels.pixels().len();
        for _ in 0..steps {
            let probs = clf.predict(features);
            clf.history.push(categorical_ce(&probs, classes, labels)?);
            let mut grad = vec![0.0; clf.params.len()];
            for i in 0..n {
                let target = labels.pixels()[i] as usize;
                let f = features.pixel(i);
                for k in 0..classes {
                    let dz = (probs[i * classes + k] - f64::from(u8::from(k == target))) / n as f64;
                    let row = &mut grad[k * stride..(k + 1) * stride];
                    for (g, v) in row.iter_mut().zip(f) {
                        *g += dz * v;
                    }
                    row[stride - 1] += dz;
                }
            }
            adam.step(&mut clf.params, &grad);
        }
        Ok(clf)
    }

    /// Probabilities, pixel-major.
    pub fn predict(&self, features: &FeatureImage) -> Vec<f64> {
        let stride = features.channels + 1;
        let n = features.width * features.height;
        let mut out = Vec::with_capacity(n * self.classes);
        let mut z = vec![0.0; self.classes];
        for i in 0..n {
            let f = features.pixel(i);
            for (k, zk) in z.iter_mut().enumerate() {
                let row = &self.params[k * stride..(k + 1) * stride];
                *zk = row[stride - 1] + row.iter().zip(f).map(|(w, v)| w * v).sum::<f64>();
            }
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / total));
        }
        out
    }

    pub fn predict_classes(&self, features: &FeatureImage, kind: LabelKind) -> Result<LabelImage> {
        let probs = self.predict(features);
        let pixels = probs
            .chunks_exact(self.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(k, _)| k as u16)
            })
            .collect();
        LabelImage::from_pixels(features.width, features.height, kind, pixels)
    }
}
