//! Segment matching, panoptic quality, detection scores, Jaccard accuracy and
//! orientation accuracy.
//!
//! Undefined ratios (empty denominators) are `None` and serialize as `null`.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sorted_intersection_len, Ellipse, RasterGrid};
use crate::label::{LabelImage, LabelKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpPair {
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

/// True-positive pairs (IoU strictly above 0.5) and the unmatched ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp_pairs: Vec<TpPair>,
    pub fp_ids: Vec<u32>,
    pub fn_ids: Vec<u32>,
}

impl MatchResult {
    pub fn counts(&self) -> EvalCounts {
        EvalCounts {
            tp: self.tp_pairs.len(),
            fp: self.fp_ids.len(),
            fn_: self.fn_ids.len(),
            iou_sum: self.tp_pairs.iter().map(|p| p.iou).sum(),
        }
    }
}

#[inline]
fn iou_above_half(inter: usize, union: usize) -> bool {
    2 * inter > union
}

/// Matches the segments of two label images (label 0 is background). Each
/// image must assign one label per pixel, so at most one predicted segment can
/// exceed IoU 0.5 with a ground-truth segment; this is checked, not resolved.
pub fn match_segments(pred: &LabelImage, gt: &LabelImage) -> Result<MatchResult> {
    gt.check_same_dims(pred)?;
    let mut pred_area: BTreeMap<u16, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<u16, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let mut tp_pairs = Vec::new();
    let mut pred_used = BTreeMap::new();
    let mut gt_used = BTreeMap::new();
    for (&(p, g), &i) in &inter {
        let union = pred_area[&p] + gt_area[&g] - i;
        if iou_above_half(i, union) {
            assert!(
                pred_used.insert(p, g).is_none() && gt_used.insert(g, p).is_none(),
                "segments overlap: pixel-partition uniqueness violated"
            );
            tp_pairs.push(TpPair {
                pred: p as u32,
                gt: g as u32,
                iou: i as f64 / union as f64,
            });
        }
    }
    tp_pairs.sort_by_key(|t| t.gt);
    Ok(MatchResult {
        tp_pairs,
        fp_ids: pred_area
            .keys()
            .filter(|p| !pred_used.contains_key(*p))
            .map(|&p| p as u32)
            .collect(),
        fn_ids: gt_area
            .keys()
            .filter(|g| !gt_used.contains_key(*g))
            .map(|&g| g as u32)
            .collect(),
    })
}

/// Matches ellipse lists by raster IoU. Ellipses may overlap, so candidate
/// pairs above 0.5 are taken greedily in decreasing IoU order (ties by
/// predicted index, then ground-truth index), each ellipse at most once. Ids
/// are list indices.
pub fn ellipse_match(pred: &[Ellipse], gt: &[Ellipse], grid: &RasterGrid) -> Result<MatchResult> {
    let pr: Vec<Vec<usize>> = pred.iter().map(|e| grid.rasterize(e)).collect();
    let gr: Vec<Vec<usize>> = gt.iter().map(|e| grid.rasterize(e)).collect();
    let mut cands = Vec::new();
    for (i, a) in pr.iter().enumerate() {
        for (j, b) in gr.iter().enumerate() {
            let inter = sorted_intersection_len(a, b);
            let union = a.len() + b.len() - inter;
            if union > 0 && iou_above_half(inter, union) {
                cands.push((inter as f64 / union as f64, i, j));
            }
        }
    }
    cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut tp_pairs = Vec::new();
    for (iou, i, j) in cands {
        if pred_used[i] || gt_used[j] {
            continue;
        }
        pred_used[i] = true;
        gt_used[j] = true;
        tp_pairs.push(TpPair {
            pred: i as u32,
            gt: j as u32,
            iou,
        });
    }
    tp_pairs.sort_by_key(|t| t.gt);
    Ok(MatchResult {
        tp_pairs,
        fp_ids: (0..pred.len()).filter(|&i| !pred_used[i]).map(|i| i as u32).collect(),
        fn_ids: (0..gt.len()).filter(|&j| !gt_used[j]).map(|j| j as u32).collect(),
    })
}

/// Sufficient statistics for PQ and detection scores; summable across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl std::ops::Add for EvalCounts {
    type Output = EvalCounts;

    fn add(self, o: EvalCounts) -> EvalCounts {
        EvalCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            iou_sum: self.iou_sum + o.iou_sum,
        }
    }
}

impl EvalCounts {
    pub fn panoptic_quality(&self) -> Option<f64> {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        (denom > 0.0).then(|| self.iou_sum / denom)
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `2TP / (2TP + FP + FN)`, the harmonic mean of precision and recall
    /// wherever that is defined.
    pub fn f1(&self) -> Option<f64> {
        let d = 2 * self.tp + self.fp + self.fn_;
        (d > 0).then(|| 2.0 * self.tp as f64 / d as f64)
    }

    pub fn mean_iou(&self) -> Option<f64> {
        (self.tp > 0).then(|| self.iou_sum / self.tp as f64)
    }
}

/// `Σ IoU / (|TP| + ½|FP| + ½|FN|)`; `None` when there are no segments.
pub fn panoptic_quality(m: &MatchResult) -> Option<f64> {
    m.counts().panoptic_quality()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn detection_scores(m: &MatchResult) -> DetectionScores {
    let c = m.counts();
    DetectionScores {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardResult {
    /// Mean over the classes with a nonempty union.
    pub value: Option<f64>,
    pub per_class: Vec<(u16, f64)>,
    /// Classes absent from both images.
    pub skipped: Vec<u16>,
}

/// Per-class Jaccard index averaged over classes. Binary and instance images
/// are compared as foreground masks; three-class images average classes 1 and
/// 2, plus background when `include_background` is set.
pub fn jaccard_accuracy(
    pred: &LabelImage,
    gt: &LabelImage,
    include_background: bool,
) -> Result<JaccardResult> {
    gt.check_same_dims(pred)?;
    if pred.kind() != gt.kind() {
        return Err(Error::LabelKind(format!(
            "cannot compare {:?} with {:?}",
            pred.kind(),
            gt.kind()
        )));
    }
    let (p, g) = match gt.kind() {
        LabelKind::Instance => (pred.to_binary(), gt.to_binary()),
        _ => (pred.clone(), gt.clone()),
    };
    let top = g.kind().max_class().unwrap_or(1);
    let first = if include_background { 0 } else { 1 };
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for class in first..=top {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in p.pixels().iter().zip(g.pixels()) {
            let (ia, ib) = (a == class, b == class);
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
        if union == 0 {
            skipped.push(class);
        } else {
            per_class.push((class, inter as f64 / union as f64));
        }
    }
    let value = (!per_class.is_empty())
        .then(|| per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64);
    Ok(JaccardResult {
        value,
        per_class,
        skipped,
    })
}

/// Absolute angular difference of two directed headings, in `[0, π]`.
pub fn heading_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Correct and total counts of true positives whose directed headings differ
/// by less than 90°. With `unknown_is_wrong` a prediction without a head side
/// counts as incorrect; otherwise it is an error. Ground truth must always
/// carry a head side.
pub fn orientation_counts(
    pred: &[Ellipse],
    gt: &[Ellipse],
    m: &MatchResult,
    unknown_is_wrong: bool,
) -> Result<(usize, usize)> {
    let mut correct = 0;
    for t in &m.tp_pairs {
        let (p, g) = (pred[t.pred as usize], gt[t.gt as usize]);
        let gh = g.heading().ok_or(Error::UnknownHeadSide(t.gt as usize))?;
        match p.heading() {
            Some(ph) => correct += usize::from(heading_difference(ph, gh) < FRAC_PI_2),
            None if unknown_is_wrong => {}
            None => return Err(Error::UnknownHeadSide(t.pred as usize)),
        }
    }
    Ok((correct, m.tp_pairs.len()))
}

/// Fraction of true positives with the correct heading; `None` without TPs.
pub fn orientation_accuracy(pred: &[Ellipse], gt: &[Ellipse], m: &MatchResult) -> Result<Option<f64>> {
    let (correct, total) = orientation_counts(pred, gt, m, false)?;
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Scores for one image or a pooled set of images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pq: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub jaccard_accuracy: Option<f64>,
    pub orientation_accuracy: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
    /// Correct / total true positives entering the orientation accuracy.
    pub orientation_correct: usize,
    pub orientation_total: usize,
}

impl EvalReport {
    pub fn from_counts(c: EvalCounts) -> Self {
        EvalReport {
            pq: c.panoptic_quality(),
            f1: c.f1(),
            precision: c.precision(),
            recall: c.recall(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            iou_sum: c.iou_sum,
            ..Default::default()
        }
    }

    pub fn from_match(m: &MatchResult) -> Self {
        Self::from_counts(m.counts())
    }

    pub fn counts(&self) -> EvalCounts {
        EvalCounts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            iou_sum: self.iou_sum,
        }
    }

    pub fn with_orientation(mut self, correct: usize, total: usize) -> Self {
        self.orientation_correct = correct;
        self.orientation_total = total;
        self.orientation_accuracy = (total > 0).then(|| correct as f64 / total as f64);
        self
    }

    pub fn mean_iou(&self) -> Option<f64> {
        self.counts().mean_iou()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Pool counts and IoU sums over images, then compute the ratios.
    #[default]
    Micro,
    /// Average per-image ratios over the images where they are defined.
    PerImageMacro,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Combines per-image reports in order. Jaccard accuracy is always the mean
/// of the per-image values.
pub fn aggregate(reports: &[EvalReport], mode: Averaging) -> EvalReport {
    let counts = reports
        .iter()
        .map(EvalReport::counts)
        .fold(EvalCounts::default(), |a, b| a + b);
    let (oc, ot) = reports.iter().fold((0, 0), |(c, t), r| {
        (c + r.orientation_correct, t + r.orientation_total)
    });
    let mut out = EvalReport::from_counts(counts).with_orientation(oc, ot);
    out.jaccard_accuracy = mean_defined(reports.iter().map(|r| r.jaccard_accuracy));
    if mode == Averaging::PerImageMacro {
        out.pq = mean_defined(reports.iter().map(|r| r.pq));
        out.f1 = mean_defined(reports.iter().map(|r| r.f1));
        out.precision = mean_defined(reports.iter().map(|r| r.precision));
        out.recall = mean_defined(reports.iter().map(|r| r.recall));
        out.orientation_accuracy = mean_defined(reports.iter().map(|r| r.orientation_accuracy));
    }
    out
}
