//! Rendering of depth-ordered ellipse annotations into label images, and the
//! reverse direction: blob search and ellipse extraction from label images.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FitError, Result};
use crate::geometry::{fit_region, Ellipse, HeadSign};
use crate::label::{LabelImage, LabelKind, BODY, CORE, EDGE, HEAD};

pub const DEFAULT_CORE_FACTOR: f64 = 0.5;
pub const DEFAULT_HEAD_FRACTION: f64 = 0.3;
pub const DEFAULT_MIN_PIXELS: usize = 10;

/// An annotated image: its size and the ellipses in annotation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub ellipses: Vec<Ellipse>,
}

impl Scene {
    pub fn new(width: usize, height: usize, ellipses: Vec<Ellipse>) -> Result<Self> {
        let s = Scene {
            width,
            height,
            ellipses,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Scene {
            width,
            height,
            ellipses: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, e) in self.ellipses.iter().enumerate() {
            e.validate()?;
            if !(e.cx >= 0.0 && e.cx < w && e.cy >= 0.0 && e.cy < h) {
                return Err(Error::invalid(format!(
                    "ellipse {i} center ({}, {}) outside {}x{}",
                    e.cx, e.cy, self.width, self.height
                )));
            }
        }
        let mut depths: Vec<i32> = self.ellipses.iter().map(|e| e.depth).collect();
        depths.sort_unstable();
        if depths.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("ellipse depth ranks must be unique"));
        }
        Ok(())
    }

    /// Annotation indices from farthest to nearest.
    pub fn paint_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.ellipses.len()).collect();
        order.sort_by_key(|&i| (self.ellipses[i].depth, i));
        order
    }

    /// Reads an annotation file (JSON array of ellipses).
    pub fn read_annotations(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ellipses: Vec<Ellipse> =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Scene::new(width, height, ellipses)
    }

    pub fn write_annotations(&self, path: impl AsRef<Path>) -> Result<()> {
        write_ellipses(path, &self.ellipses)
    }
}

pub fn write_ellipses(path: impl AsRef<Path>, ellipses: &[Ellipse]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(ellipses).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_ellipses(path: impl AsRef<Path>) -> Result<Vec<Ellipse>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn render_binary(s: &Scene) -> LabelImage {
    let mut li = LabelImage::new(s.width, s.height, LabelKind::Binary);
    for e in &s.ellipses {
        e.for_each_pixel(s.width, s.height, |x, y| li.set(x, y, 1));
    }
    li
}

/// Instance ids are annotation index + 1; nearer ellipses overwrite farther ones.
pub fn render_instance(s: &Scene) -> LabelImage {
    assert!(
        s.ellipses.len() <= u16::MAX as usize,
        "at most 65535 instances per image"
    );
    let mut li = LabelImage::new(s.width, s.height, LabelKind::Instance);
    for i in s.paint_order() {
        let id = (i + 1) as u16;
        s.ellipses[i].for_each_pixel(s.width, s.height, |x, y| li.set(x, y, id));
    }
    li
}

pub fn render_categorical(s: &Scene, core_factor: f64) -> Result<LabelImage> {
    check_fraction("core_factor", core_factor)?;
    let mut li = LabelImage::new(s.width, s.height, LabelKind::Categorical3);
    for i in s.paint_order() {
        let e = &s.ellipses[i];
        let core = e.scale(core_factor)?;
        e.for_each_pixel(s.width, s.height, |x, y| {
            let class = if core.contains(x as f64, y as f64) {
                CORE
            } else {
                EDGE
            };
            li.set(x, y, class)
        });
    }
    Ok(li)
}

/// Head pixels are those whose coordinate along the directed major axis
/// exceeds `(1 − 2·head_fraction)·a`.
pub fn render_bodypart(s: &Scene, head_fraction: f64) -> Result<LabelImage> {
    check_fraction("head_fraction", head_fraction)?;
    if let Some(i) = s.ellipses.iter().position(|e| !e.head_sign.is_known()) {
        return Err(Error::UnknownHeadSide(i));
    }
    let mut li = LabelImage::new(s.width, s.height, LabelKind::Bodypart3);
    for i in s.paint_order() {
        let e = &s.ellipses[i];
        let cut = (1.0 - 2.0 * head_fraction) * e.a;
        let sign = e.head_sign.signum();
        e.for_each_pixel(s.width, s.height, |x, y| {
            let (u, _) = e.to_local(x as f64, y as f64);
            li.set(x, y, if u * sign > cut { HEAD } else { BODY })
        });
    }
    Ok(li)
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

fn to_points(pixels: &[(usize, usize)]) -> Vec<(f64, f64)> {
    pixels.iter().map(|&(x, y)| (x as f64, y as f64)).collect()
}

/// Ellipse fitted to one instance region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionEllipse {
    pub id: u16,
    pub pixel_count: usize,
    pub ellipse: Ellipse,
}

/// A region that produced no ellipse.
#[derive(Clone, Debug, PartialEq)]
pub struct SkippedRegion {
    pub id: u16,
    pub pixel_count: usize,
    pub reason: SkipReason,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SkipReason {
    TooSmall,
    Fit(FitError),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Extraction {
    pub ellipses: Vec<RegionEllipse>,
    pub skipped: Vec<SkippedRegion>,
}

impl Extraction {
    pub fn into_ellipses(self) -> Vec<Ellipse> {
        self.ellipses.into_iter().map(|r| r.ellipse).collect()
    }
}

/// Fits an ellipse to every instance region of at least `min_pixels` pixels.
/// Fully occluded instances have no pixels and do not appear at all.
pub fn extract_gt_ellipses(li: &LabelImage, min_pixels: usize) -> Result<Extraction> {
    if li.kind() != LabelKind::Instance {
        return Err(Error::LabelKind(format!(
            "expected an instance image, got {:?}",
            li.kind()
        )));
    }
    let max = li.max_label() as usize;
    let mut regions: Vec<Vec<(usize, usize)>> = vec![Vec::new(); max + 1];
    for (i, &p) in li.pixels().iter().enumerate() {
        if p != 0 {
            regions[p as usize].push((i % li.width(), i / li.width()));
        }
    }
    let mut out = Extraction::default();
    for (id, pixels) in regions.into_iter().enumerate().skip(1) {
        if pixels.is_empty() {
            continue;
        }
        fit_one(id as u16, &pixels, min_pixels, 1.0, &mut out);
    }
    Ok(out)
}

fn fit_one(
    id: u16,
    pixels: &[(usize, usize)],
    min_pixels: usize,
    upscale: f64,
    out: &mut Extraction,
) {
    let n = pixels.len();
    if n < min_pixels.max(6) {
        out.skipped.push(SkippedRegion {
            id,
            pixel_count: n,
            reason: SkipReason::TooSmall,
        });
        return;
    }
    let fitted = fit_region(&to_points(pixels)).map(|e| Ellipse {
        a: e.a * upscale,
        b: e.b * upscale,
        ..e
    });
    match fitted {
        Ok(ellipse) => out.ellipses.push(RegionEllipse {
            id,
            pixel_count: n,
            ellipse,
        }),
        Err(err) => out.skipped.push(SkippedRegion {
            id,
            pixel_count: n,
            reason: SkipReason::Fit(err),
        }),
    }
}

/// 4-connected components of the pixels equal to `target_class`, ordered by
/// their first pixel in row-major order. Pixels inside a component are
/// row-major sorted.
pub fn blob_search(li: &LabelImage, target_class: u16) -> Result<Vec<Vec<(usize, usize)>>> {
    if let Some(max) = li.kind().max_class() {
        if target_class > max {
            return Err(Error::LabelKind(format!(
                "class {target_class} does not exist in {:?} images",
                li.kind()
            )));
        }
    }
    let (w, h) = li.dims();
    let px = li.pixels();
    let mut seen = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || px[start] != target_class {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut blob = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            blob.push(i);
            let mut visit = |j: usize| {
                if !seen[j] && px[j] == target_class {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        blob.sort_unstable();
        blobs.push(blob.into_iter().map(|i| (i % w, i / w)).collect());
    }
    Ok(blobs)
}

/// Finds inner-core blobs, fits an ellipse to each blob of at least
/// `min_pixels` pixels and scales it up by `1 / core_factor`. Region ids are
/// blob indices + 1.
pub fn ellipses_from_categorical(
    li: &LabelImage,
    core_factor: f64,
    min_pixels: usize,
) -> Result<Extraction> {
    if li.kind() != LabelKind::Categorical3 {
        return Err(Error::LabelKind(format!(
            "expected a categorical image, got {:?}",
            li.kind()
        )));
    }
    check_fraction("core_factor", core_factor)?;
    let mut out = Extraction::default();
    for (k, blob) in blob_search(li, CORE)?.iter().enumerate() {
        let id = u16::try_from(k + 1).unwrap_or(u16::MAX);
        fit_one(id, blob, min_pixels, 1.0 / core_factor, &mut out);
    }
    Ok(out)
}

/// Decides which end of `e` the head is on from the head pixels of the
/// region: the side with the larger mean coordinate along the major axis.
pub fn head_side(e: &Ellipse, head_pixels: &[(usize, usize)]) -> HeadSign {
    if head_pixels.is_empty() {
        return HeadSign::Unknown;
    }
    let mean = head_pixels
        .iter()
        .map(|&(x, y)| e.to_local(x as f64, y as f64).0)
        .sum::<f64>()
        / head_pixels.len() as f64;
    if mean > 0.0 {
        HeadSign::Forward
    } else if mean < 0.0 {
        HeadSign::Backward
    } else {
        HeadSign::Unknown
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ell(cx: f64, cy: f64, a: f64, b: f64, t: f64, depth: i32) -> Ellipse {
        Ellipse::from_heading(cx, cy, a, b, t).unwrap().with_depth(depth)
    }

    #[test]
    fn empty_scene_renders_background() {
        let s = Scene::empty(10, 8);
        assert_eq!(render_binary(&s).foreground_count(), 0);
        assert_eq!(render_instance(&s).foreground_count(), 0);
    }

    #[test]
    fn circle_area_within_perimeter() {
        let r = 12.0;
        let s = Scene::new(64, 64, vec![ell(32.0, 31.5, r, r, 0.0, 0)]).unwrap();
        let n = render_binary(&s).foreground_count() as f64;
        assert!((n - PI * r * r).abs() <= 2.0 * PI * r, "{n}");
    }

    #[test]
    fn disjoint_counts_add() {
        let e1 = ell(15.0, 15.0, 10.0, 5.0, 0.3, 0);
        let e2 = ell(45.0, 45.0, 9.0, 6.0, 1.3, 1);
        let both = Scene::new(64, 64, vec![e1, e2]).unwrap();
        let c1 = render_binary(&Scene::new(64, 64, vec![e1]).unwrap()).foreground_count();
        let c2 = render_binary(&Scene::new(64, 64, vec![e2]).unwrap()).foreground_count();
        assert_eq!(render_binary(&both).foreground_count(), c1 + c2);
        let inst = render_instance(&both);
        assert_eq!(inst.count(1), c1);
        assert_eq!(inst.count(2), c2);
    }

    #[test]
    fn nearer_instance_owns_overlap() {
        let far = ell(20.0, 20.0, 10.0, 6.0, 0.0, 0);
        let near = ell(28.0, 20.0, 10.0, 6.0, 0.0, 5);
        // annotation order puts the nearer animal first
        let s = Scene::new(50, 40, vec![near, far]).unwrap();
        let inst = render_instance(&s);
        for y in 0..40 {
            for x in 0..50 {
                let (xf, yf) = (x as f64, y as f64);
                if near.contains(xf, yf) {
                    assert_eq!(inst.get(x, y), 1);
                } else if far.contains(xf, yf) {
                    assert_eq!(inst.get(x, y), 2);
                }
            }
        }
    }

    #[test]
    fn fully_occluded_instance_disappears() {
        let small = ell(20.0, 20.0, 4.0, 3.0, 0.0, 0);
        let big = ell(20.0, 20.0, 12.0, 10.0, 0.0, 1);
        let s = Scene::new(40, 40, vec![small, big]).unwrap();
        let inst = render_instance(&s);
        assert_eq!(inst.count(1), 0);
        let ex = extract_gt_ellipses(&inst, DEFAULT_MIN_PIXELS).unwrap();
        assert_eq!(ex.ellipses.len(), 1);
        assert_eq!(ex.ellipses[0].id, 2);
    }

    #[test]
    fn categorical_core_ratio() {
        let s = Scene::new(80, 80, vec![ell(40.0, 40.0, 30.0, 16.0, 0.7, 0)]).unwrap();
        let cat = render_categorical(&s, 0.5).unwrap();
        let core = cat.count(CORE) as f64;
        let all = cat.foreground_count() as f64;
        assert!((core / all - 0.25).abs() < 0.03, "{}", core / all);

        let thin = render_categorical(&s, 0.999).unwrap();
        assert!((thin.count(EDGE) as f64) < 0.01 * all);
        assert!(render_categorical(&s, 1.0).is_err());
        assert!(render_categorical(&s, 0.0).is_err());
    }

    #[test]
    fn crossing_ellipses_keep_separate_cores() {
        let e1 = ell(40.0, 40.0, 24.0, 7.0, 0.0, 0);
        let e2 = ell(40.0, 40.0, 24.0, 7.0, PI / 2.0, 1);
        let s = Scene::new(80, 80, vec![e1, e2]).unwrap();
        let cat = render_categorical(&s, 0.5).unwrap();
        // the far animal's core is cut in two by the near one, the near core is intact
        let blobs = blob_search(&cat, CORE).unwrap();
        assert_eq!(blobs.len(), 3);
        let shifted = Scene::new(
            80,
            80,
            vec![ell(30.0, 40.0, 24.0, 7.0, 0.0, 0), ell(55.0, 40.0, 24.0, 7.0, PI / 2.0, 1)],
        )
        .unwrap();
        let cat = render_categorical(&shifted, 0.5).unwrap();
        assert_eq!(blob_search(&cat, CORE).unwrap().len(), 2);
    }

    #[test]
    fn bodypart_head_on_heading_side() {
        let e = ell(40.0, 30.0, 20.0, 10.0, 0.4, 0);
        let s = Scene::new(80, 60, vec![e]).unwrap();
        let bp = render_bodypart(&s, 0.3).unwrap();
        let head = bp.coords_of(HEAD);
        assert!(!head.is_empty());
        assert!(head
            .iter()
            .all(|&(x, y)| e.to_local(x as f64, y as f64).0 > 0.0));

        let flipped = Scene::new(80, 60, vec![e.with_head(HeadSign::Backward)]).unwrap();
        let bp2 = render_bodypart(&flipped, 0.3).unwrap();
        let mut mirrored: Vec<(i64, i64)> = head
            .iter()
            .map(|&(x, y)| {
                let (u, v) = e.to_local(x as f64, y as f64);
                ((-u * 1000.0).round() as i64, (v * 1000.0).round() as i64)
            })
            .collect();
        let mut other: Vec<(i64, i64)> = bp2
            .coords_of(HEAD)
            .iter()
            .map(|&(x, y)| {
                let (u, v) = e.to_local(x as f64, y as f64);
                ((u * 1000.0).round() as i64, (v * 1000.0).round() as i64)
            })
            .collect();
        // same head area, on the opposite side
        assert!((mirrored.len() as i64 - other.len() as i64).abs() <= 2);
        mirrored.sort();
        other.sort();
        assert!(other.iter().all(|&(u, _)| u < 0));
    }

    #[test]
    fn bodypart_head_area_matches_segment() {
        let (a, b) = (40.0, 20.0);
        let e = ell(60.0, 50.0, a, b, 0.25, 0);
        let s = Scene::new(120, 100, vec![e]).unwrap();
        let bp = render_bodypart(&s, 0.3).unwrap();
        // area of the cap u > c of an ellipse: a·b·(acos(t) − t·√(1−t²)), t = c/a
        let t: f64 = 1.0 - 2.0 * 0.3;
        let cap = a * b * (t.acos() - t * (1.0 - t * t).sqrt());
        let n = bp.count(HEAD) as f64;
        assert!((n - cap).abs() / cap < 0.03, "{n} vs {cap}");
    }

    #[test]
    fn bodypart_requires_known_heads() {
        let e = Ellipse::new(10.0, 10.0, 5.0, 3.0, 0.0).unwrap();
        let s = Scene::new(20, 20, vec![e]).unwrap();
        assert!(matches!(render_bodypart(&s, 0.3), Err(Error::UnknownHeadSide(0))));
    }

    #[test]
    fn blob_search_connectivity() {
        // two pixels touching only diagonally form two components
        let mut li = LabelImage::new(4, 4, LabelKind::Categorical3);
        li.set(0, 0, CORE);
        li.set(1, 0, CORE);
        li.set(0, 1, CORE);
        li.set(2, 2, CORE);
        li.set(3, 3, CORE);
        li.set(3, 2, CORE);
        let blobs = blob_search(&li, CORE).unwrap();
        assert_eq!(blobs.len(), 2);
        let mut diag = LabelImage::new(3, 3, LabelKind::Categorical3);
        diag.set(0, 0, CORE);
        diag.set(1, 1, CORE);
        assert_eq!(blob_search(&diag, CORE).unwrap().len(), 2);
        assert!(blob_search(&diag, EDGE).unwrap().is_empty());
        assert!(blob_search(&diag, 3).is_err());
    }

    #[test]
    fn categorical_round_trip_single() {
        let e = ell(50.0, 40.0, 24.0, 12.0, 0.9, 0);
        let s = Scene::new(100, 80, vec![e]).unwrap();
        let cat = render_categorical(&s, 0.5).unwrap();
        let ex = ellipses_from_categorical(&cat, 0.5, DEFAULT_MIN_PIXELS).unwrap();
        assert_eq!(ex.ellipses.len(), 1);
        let f = ex.ellipses[0].ellipse;
        assert!((f.a - e.a).abs() / e.a < 0.05, "{f:?}");
        assert!((f.b - e.b).abs() / e.b < 0.05, "{f:?}");
    }

    #[test]
    fn small_blob_excluded() {
        let mut li = LabelImage::new(10, 10, LabelKind::Categorical3);
        li.set(2, 2, CORE);
        li.set(3, 2, CORE);
        li.set(2, 3, CORE);
        let ex = ellipses_from_categorical(&li, 0.5, 10).unwrap();
        assert!(ex.ellipses.is_empty());
        assert_eq!(ex.skipped.len(), 1);
        assert_eq!(ex.skipped[0].reason, SkipReason::TooSmall);
    }

    #[test]
    fn five_separated_ellipses_recovered() {
        let es: Vec<Ellipse> = (0..5)
            .map(|k| ell(20.0 + 40.0 * k as f64, 30.0, 14.0, 8.0, 0.3 * k as f64, k))
            .collect();
        let s = Scene::new(210, 60, es).unwrap();
        let cat = render_categorical(&s, 0.5).unwrap();
        let ex = ellipses_from_categorical(&cat, 0.5, DEFAULT_MIN_PIXELS).unwrap();
        assert_eq!(ex.ellipses.len(), 5);
    }

    #[test]
    fn head_side_from_pixels() {
        let e = Ellipse::new(10.0, 10.0, 6.0, 3.0, 0.0).unwrap();
        assert_eq!(head_side(&e, &[(15, 10), (14, 10)]), HeadSign::Forward);
        assert_eq!(head_side(&e, &[(5, 10)]), HeadSign::Backward);
        assert_eq!(head_side(&e, &[]), HeadSign::Unknown);
    }

    #[test]
    fn scene_validation() {
        let e = ell(5.0, 5.0, 3.0, 2.0, 0.0, 1);
        assert!(Scene::new(10, 10, vec![e, e]).is_err());
        assert!(Scene::new(4, 4, vec![e]).is_err());
    }
}
