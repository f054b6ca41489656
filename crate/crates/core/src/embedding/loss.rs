use serde::{Deserialize, Serialize};

use super::{DiscriminativeParams, EmbeddingField};
use crate::error::{Error, Result};
use crate::label::LabelImage;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

fn check_len(expected: &LabelImage, len: usize) -> Result<()> {
    if expected.pixels().len() != len {
        return Err(Error::ShapeMismatch {
            expected: expected.dims(),
            actual: (len, 1),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy of foreground probabilities against a binary
/// label image.
pub fn binary_ce(p: &[f64], y: &LabelImage) -> Result<f64> {
    check_len(y, p.len())?;
    if p.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = p
        .iter()
        .zip(y.pixels())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y != 0 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-sum / p.len() as f64)
}

/// Gradient of [`binary_ce`] with respect to the logits `z` where `p = σ(z)`.
pub fn binary_ce_gradient(p: &[f64], y: &LabelImage) -> Result<Vec<f64>> {
    check_len(y, p.len())?;
    let n = p.len().max(1) as f64;
    Ok(p
        .iter()
        .zip(y.pixels())
        .map(|(&p, &y)| (p - f64::from(u8::from(y != 0))) / n)
        .collect())
}

/// Mean categorical cross-entropy. `x` holds `classes` probabilities per pixel,
/// pixel-major; `t` holds class indices.
pub fn categorical_ce(x: &[f64], classes: usize, t: &LabelImage) -> Result<f64> {
    if classes < 2 {
        return Err(Error::invalid("categorical cross-entropy needs at least 2 classes"));
    }
    if x.len() % classes != 0 {
        return Err(Error::invalid("probability buffer is not a multiple of the class count"));
    }
    check_len(t, x.len() / classes)?;
    let n = t.pixels().len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, (row, &class)) in x.chunks_exact(classes).zip(t.pixels()).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::NotNormalized { pixel: i, sum: total });
        }
        let class = class as usize;
        if class >= classes {
            return Err(Error::LabelKind(format!(
                "class {class} at pixel {i} exceeds {classes} classes"
            )));
        }
        sum += row[class].max(PROB_EPS).ln();
    }
    Ok(-sum / n as f64)
}

/// The three discriminative terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub variance_term: f64,
    pub distance_term: f64,
    pub regularization_term: f64,
}

impl LossValue {
    fn combine(params: &DiscriminativeParams, var: f64, dist: f64, reg: f64) -> Self {
        LossValue {
            total: params.alpha * var + params.beta * dist + params.gamma * reg,
            variance_term: var,
            distance_term: dist,
            regularization_term: reg,
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Clusters {
    /// cluster index per pixel, `None` for ignored background
    assignment: Vec<Option<usize>>,
    sizes: Vec<usize>,
    means: Vec<f64>,
}

impl Clusters {
    fn build(f: &EmbeddingField, inst: &LabelImage, include_background: bool) -> Result<Self> {
        if f.dims() != inst.dims() {
            return Err(Error::ShapeMismatch {
                expected: f.dims(),
                actual: inst.dims(),
            });
        }
        let max = inst.max_label() as usize;
        let mut slot = vec![usize::MAX; max + 1];
        let mut present = vec![false; max + 1];
        for &p in inst.pixels() {
            present[p as usize] = true;
        }
        let mut c = 0;
        for (label, &is_present) in present.iter().enumerate() {
            if is_present && (label != 0 || include_background) {
                slot[label] = c;
                c += 1;
            }
        }
        if c == 0 {
            return Err(Error::NoClusters);
        }
        let d = f.dim();
        let mut sizes = vec![0usize; c];
        let mut means = vec![0.0; c * d];
        let assignment: Vec<Option<usize>> = inst
            .pixels()
            .iter()
            .map(|&p| {
                let s = slot[p as usize];
                (s != usize::MAX).then_some(s)
            })
            .collect();
        for (i, a) in assignment.iter().enumerate() {
            if let Some(k) = *a {
                sizes[k] += 1;
                for (m, x) in means[k * d..(k + 1) * d].iter_mut().zip(f.vector(i)) {
                    *m += x;
                }
            }
        }
        for k in 0..c {
            let inv = 1.0 / sizes[k] as f64;
            means[k * d..(k + 1) * d].iter_mut().for_each(|m| *m *= inv);
        }
        Ok(Clusters {
            assignment,
            sizes,
            means,
        })
    }

    fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Discriminative loss over the clusters defined by `inst`. With
/// `include_background` the background label forms a cluster of its own;
/// otherwise background pixels are ignored.
pub fn discriminative_loss(
    f: &EmbeddingField,
    inst: &LabelImage,
    params: &DiscriminativeParams,
    include_background: bool,
) -> Result<LossValue> {
    evaluate(f, inst, params, include_background, false).map(|(l, _)| l)
}

/// Exact subgradient of the total discriminative loss with respect to every
/// embedding vector, including the dependence of the cluster means.
pub fn discriminative_gradient(
    f: &EmbeddingField,
    inst: &LabelImage,
    params: &DiscriminativeParams,
    include_background: bool,
) -> Result<Vec<f64>> {
    evaluate(f, inst, params, include_background, true).map(|(_, g)| g)
}

pub fn discriminative_loss_and_gradient(
    f: &EmbeddingField,
    inst: &LabelImage,
    params: &DiscriminativeParams,
    include_background: bool,
) -> Result<(LossValue, Vec<f64>)> {
    evaluate(f, inst, params, include_background, true)
}

fn evaluate(
    f: &EmbeddingField,
    inst: &LabelImage,
    params: &DiscriminativeParams,
    include_background: bool,
    with_grad: bool,
) -> Result<(LossValue, Vec<f64>)> {
    let cl = Clusters::build(f, inst, include_background)?;
    let d = f.dim();
    let c = cl.count();
    let cf = c as f64;
    let mean = |k: usize| &cl.means[k * d..(k + 1) * d];

    // variance: per-pixel hinge on the L1 distance to its mean
    let mut var_sums = vec![0.0; c];
    // Σ_j 2·h_j·sign(μ − x_j) per cluster, for the gradient through μ
    let mut var_pull = if with_grad { vec![0.0; c * d] } else { Vec::new() };
    let mut hinge = if with_grad { vec![0.0; f.len()] } else { Vec::new() };
    for (i, a) in cl.assignment.iter().enumerate() {
        let Some(k) = *a else { continue };
        let h = (l1_diff(mean(k), f.vector(i)) - params.delta_v).max(0.0);
        var_sums[k] += h * h;
        if with_grad && h > 0.0 {
            hinge[i] = h;
            for (j, (m, x)) in mean(k).iter().zip(f.vector(i)).enumerate() {
                var_pull[k * d + j] += 2.0 * h * sign(m - x);
            }
        }
    }
    let variance = var_sums
        .iter()
        .zip(&cl.sizes)
        .map(|(s, &n)| s / n as f64)
        .sum::<f64>()
        / cf;

    // distance: ordered pairs of distinct means
    let mut distance = 0.0;
    let mut mean_grad = if with_grad { vec![0.0; c * d] } else { Vec::new() };
    if c > 1 {
        let norm = 1.0 / (cf * (cf - 1.0));
        for ka in 0..c {
            for kb in 0..c {
                if ka == kb {
                    continue;
                }
                let k = (2.0 * params.delta_d - l1_diff(mean(ka), mean(kb))).max(0.0);
                distance += k * k;
                if with_grad && k > 0.0 {
                    let w = 2.0 * k * params.beta * norm;
                    for j in 0..d {
                        let s = sign(mean(ka)[j] - mean(kb)[j]);
                        mean_grad[ka * d + j] -= w * s;
                        mean_grad[kb * d + j] += w * s;
                    }
                }
            }
        }
        distance *= norm;
    }

    let regularization = (0..c)
        .map(|k| mean(k).iter().map(|v| v.abs()).sum::<f64>())
        .sum::<f64>()
        / cf;

    let loss = LossValue::combine(params, variance, distance, regularization);
    if !with_grad {
        return Ok((loss, Vec::new()));
    }

    // fold the per-mean terms (regularization, distance, variance-through-mean)
    for k in 0..c {
        let n = cl.sizes[k] as f64;
        for j in 0..d {
            let idx = k * d + j;
            mean_grad[idx] += params.gamma * sign(mean(k)[j]) / cf;
            mean_grad[idx] += params.alpha * var_pull[idx] / (cf * n);
        }
    }
    let mut grad = vec![0.0; f.len() * d];
    for (i, a) in cl.assignment.iter().enumerate() {
        let Some(k) = *a else { continue };
        let n = cl.sizes[k] as f64;
        let g = &mut grad[i * d..(i + 1) * d];
        for j in 0..d {
            g[j] = mean_grad[k * d + j] / n;
        }
        let h = hinge[i];
        if h > 0.0 {
            let scale = params.alpha * 2.0 * h / (cf * n);
            for (j, (m, x)) in mean(k).iter().zip(f.vector(i)).enumerate() {
                g[j] -= scale * sign(m - x);
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::LabelKind;

    fn field(w: usize, h: usize, d: usize, v: Vec<f64>) -> EmbeddingField {
        EmbeddingField::from_vec(w, h, d, v).unwrap()
    }

    #[test]
    fn binary_ce_examples() {
        let y = LabelImage::from_pixels(2, 2, LabelKind::Binary, vec![0, 1, 1, 0]).unwrap();
        let exact: Vec<f64> = vec![PROB_EPS, 1.0 - PROB_EPS, 1.0 - PROB_EPS, PROB_EPS];
        assert!(binary_ce(&exact, &y).unwrap() < 1e-6);
        let half = vec![0.5; 4];
        assert!((binary_ce(&half, &y).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(binary_ce(&half[..3], &y).is_err());
    }

    #[test]
    fn categorical_ce_examples() {
        let t = LabelImage::from_pixels(3, 1, LabelKind::Categorical3, vec![0, 2, 1]).unwrap();
        let onehot = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert!(categorical_ce(&onehot, 3, &t).unwrap() < 1e-12);
        let uniform = vec![1.0 / 3.0; 9];
        assert!((categorical_ce(&uniform, 3, &t).unwrap() - 3f64.ln()).abs() < 1e-12);
        let bad = vec![0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert!(matches!(
            categorical_ce(&bad, 3, &t),
            Err(Error::NotNormalized { pixel: 0, .. })
        ));
    }

    #[test]
    fn inactive_hinges_leave_only_regularization() {
        // two clusters, zero spread, means (1,1) and (−1,−1): L1 distance 4 > 3
        let inst = LabelImage::from_pixels(4, 1, LabelKind::Instance, vec![1, 1, 2, 2]).unwrap();
        let f = field(4, 1, 2, vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        let p = DiscriminativeParams::default();
        let l = discriminative_loss(&f, &inst, &p, false).unwrap();
        assert_eq!(l.variance_term, 0.0);
        assert_eq!(l.distance_term, 0.0);
        assert!((l.regularization_term - 2.0).abs() < 1e-15);
        assert!((l.total - p.gamma * 2.0).abs() < 1e-15);
    }

    #[test]
    fn identical_embeddings_two_clusters() {
        let inst = LabelImage::from_pixels(3, 1, LabelKind::Instance, vec![0, 1, 1]).unwrap();
        let f = field(3, 1, 2, vec![0.3, -0.2, 0.3, -0.2, 0.3, -0.2]);
        let p = DiscriminativeParams::default();
        let l = discriminative_loss(&f, &inst, &p, true).unwrap();
        assert_eq!(l.variance_term, 0.0);
        assert!((l.distance_term - (2.0 * p.delta_d).powi(2)).abs() < 1e-12);
        assert!((l.regularization_term - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_has_no_distance_term() {
        let inst = LabelImage::from_pixels(2, 1, LabelKind::Instance, vec![1, 1]).unwrap();
        let f = field(2, 1, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let l = discriminative_loss(&f, &inst, &Default::default(), false).unwrap();
        assert_eq!(l.distance_term, 0.0);
        assert!(l.variance_term > 0.0);
        let empty = LabelImage::from_pixels(2, 1, LabelKind::Instance, vec![0, 0]).unwrap();
        assert!(matches!(
            discriminative_loss(&f, &empty, &Default::default(), false),
            Err(Error::NoClusters)
        ));
    }

    #[test]
    fn gradient_zero_at_minimum() {
        let inst = LabelImage::from_pixels(4, 1, LabelKind::Instance, vec![1, 1, 2, 2]).unwrap();
        let f = field(4, 1, 2, vec![1.0, 1.0, 1.02, 1.0, -1.0, -1.0, -1.0, -1.01]);
        let p = DiscriminativeParams {
            gamma: 0.0,
            ..Default::default()
        };
        let g = discriminative_gradient(&f, &inst, &p, false).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn translation_only_changes_regularization_gradient() {
        let inst =
            LabelImage::from_pixels(3, 2, LabelKind::Instance, vec![1, 1, 2, 2, 0, 1]).unwrap();
        let base = vec![0.1, 0.5, 0.9, -0.3, 0.2, 0.4, 1.1, 0.0, -0.7, 0.6, 0.05, -0.2];
        let p = DiscriminativeParams {
            gamma: 0.0,
            ..Default::default()
        };
        let g0 = discriminative_gradient(&field(3, 2, 2, base.clone()), &inst, &p, true).unwrap();
        let shifted: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i % 2 == 0 { 3.25 } else { -1.5 })
            .collect();
        let g1 = discriminative_gradient(&field(3, 2, 2, shifted), &inst, &p, true).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let inst = LabelImage::new(3, 1, LabelKind::Instance);
        let f = field(2, 1, 2, vec![0.0; 4]);
        assert!(matches!(
            discriminative_loss(&f, &inst, &Default::default(), true),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
