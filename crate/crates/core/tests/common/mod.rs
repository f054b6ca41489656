//! Brute-force reference implementations and fixture generators shared by the
//! integration tests. Nothing here calls into the library's algorithms.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use penseg::embedding::{DiscriminativeParams, EmbeddingField};
use penseg::label::{LabelImage, LabelKind};

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

// ---------------------------------------------------------------- loss

#[derive(Clone, Debug)]
pub struct LossFixture {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub labels: Vec<u16>,
    pub include_background: bool,
    pub params: DiscriminativeParams,
}

impl LossFixture {
    pub fn field(&self) -> EmbeddingField {
        EmbeddingField::from_vec(self.width, self.height, self.dim, self.values.clone()).unwrap()
    }

    pub fn instance(&self) -> LabelImage {
        LabelImage::from_pixels(self.width, self.height, LabelKind::Instance, self.labels.clone())
            .unwrap()
    }

    pub fn with_values(&self, values: Vec<f64>) -> LossFixture {
        LossFixture {
            values,
            ..self.clone()
        }
    }
}

/// Up to 20 pixels, up to 4 clusters, dimension 2 to 4. Every cluster that
/// takes part in the loss has at least one pixel.
pub fn random_loss_fixture(r: &mut ChaCha8Rng) -> LossFixture {
    loop {
        let width = r.gen_range(1..=5);
        let height = r.gen_range(1..=20 / width);
        let n = width * height;
        let dim = r.gen_range(2..=4);
        let include_background = r.gen_bool(0.5);
        let max_label = r.gen_range(1..=4u16);
        let labels: Vec<u16> = (0..n).map(|_| r.gen_range(0..=max_label)).collect();
        let clusters = cluster_ids(&labels, include_background);
        if clusters.is_empty() || clusters.len() > 4 {
            continue;
        }
        let scale = r.gen_range(0.2..2.5);
        let values = (0..n * dim).map(|_| r.gen_range(-scale..scale)).collect();
        let delta_v = r.gen_range(0.05..0.6);
        let params = DiscriminativeParams {
            delta_v,
            delta_d: r.gen_range(delta_v..2.0),
            alpha: r.gen_range(0.1..2.0),
            beta: r.gen_range(0.1..2.0),
            gamma: r.gen_range(0.0..0.1),
        };
        return LossFixture {
            width,
            height,
            dim,
            values,
            labels,
            include_background,
            params,
        };
    }
}

pub fn cluster_ids(labels: &[u16], include_background: bool) -> Vec<u16> {
    let set: BTreeSet<u16> = labels
        .iter()
        .copied()
        .filter(|&l| l != 0 || include_background)
        .collect();
    set.into_iter().collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn cluster_means(fx: &LossFixture) -> Vec<(u16, Vec<f64>, usize)> {
    let d = fx.dim;
    cluster_ids(&fx.labels, fx.include_background)
        .into_iter()
        .map(|c| {
            let mut mean = vec![0.0; d];
            let mut n = 0;
            for (i, &l) in fx.labels.iter().enumerate() {
                if l == c {
                    n += 1;
                    for j in 0..d {
                        mean[j] += fx.values[i * d + j];
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            (c, mean, n)
        })
        .collect()
}

/// (variance, distance, regularization, total) by direct double loops.
pub fn reference_loss(fx: &LossFixture) -> [f64; 4] {
    let d = fx.dim;
    let p = &fx.params;
    let means = cluster_means(fx);
    let c = means.len() as f64;

    let mut var = 0.0;
    for (id, mean, n) in &means {
        let mut s = 0.0;
        for (i, &l) in fx.labels.iter().enumerate() {
            if l == *id {
                let h = (l1(mean, &fx.values[i * d..(i + 1) * d]) - p.delta_v).max(0.0);
                s += h * h;
            }
        }
        var += s / *n as f64;
    }
    var /= c;

    let mut dist = 0.0;
    if means.len() > 1 {
        for (a, ma) in means.iter().enumerate() {
            for (b, mb) in means.iter().enumerate() {
                if a != b {
                    let h = (2.0 * p.delta_d - l1(&ma.1, &mb.1)).max(0.0);
                    dist += h * h;
                }
            }
        }
        dist /= c * (c - 1.0);
    }

    let reg = means.iter().map(|m| m.1.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / c;
    [var, dist, reg, p.alpha * var + p.beta * dist + p.gamma * reg]
}

/// Smallest distance of the fixture to a point where the loss is not
/// differentiable: a hinge switching on, or an absolute value at zero inside
/// an active term.
pub fn kink_margin(fx: &LossFixture) -> f64 {
    let d = fx.dim;
    let p = &fx.params;
    let means = cluster_means(fx);
    let mut margin = f64::INFINITY;
    for (id, mean, _) in &means {
        for (i, &l) in fx.labels.iter().enumerate() {
            if l != *id {
                continue;
            }
            let x = &fx.values[i * d..(i + 1) * d];
            let arg = l1(mean, x) - p.delta_v;
            margin = margin.min(arg.abs());
            if arg > 0.0 {
                for j in 0..d {
                    margin = margin.min((mean[j] - x[j]).abs());
                }
            }
        }
    }
    for (a, ma) in means.iter().enumerate() {
        for mb in &means[a + 1..] {
            let arg = 2.0 * p.delta_d - l1(&ma.1, &mb.1);
            margin = margin.min(arg.abs());
            if arg > 0.0 {
                for j in 0..d {
                    margin = margin.min((ma.1[j] - mb.1[j]).abs());
                }
            }
        }
    }
    if p.gamma > 0.0 {
        for m in &means {
            for v in &m.1 {
                margin = margin.min(v.abs());
            }
        }
    }
    margin
}

/// Central finite differences of the reference loss.
pub fn finite_difference_gradient(fx: &LossFixture, h: f64) -> Vec<f64> {
    (0..fx.values.len())
        .map(|k| {
            let mut plus = fx.values.clone();
            let mut minus = fx.values.clone();
            plus[k] += h;
            minus[k] -= h;
            let lp = reference_loss(&fx.with_values(plus))[3];
            let lm = reference_loss(&fx.with_values(minus))[3];
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

// ---------------------------------------------------------------- clustering

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-th smallest distance from each point, the point itself included.
pub fn brute_core_distances(pts: &[Vec<f64>], k: usize) -> Vec<f64> {
    let k = k.clamp(1, pts.len());
    pts.iter()
        .map(|p| {
            let mut d: Vec<f64> = pts.iter().map(|q| euclid(p, q)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

pub fn mutual_reachability_matrix(pts: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let core = brute_core_distances(pts, k);
    (0..pts.len())
        .map(|i| {
            (0..pts.len())
                .map(|j| euclid(&pts[i], &pts[j]).max(core[i]).max(core[j]))
                .collect()
        })
        .collect()
}

/// Kruskal over every pair of points; returns the total weight.
pub fn brute_mst_weight(pts: &[Vec<f64>], k: usize) -> f64 {
    let n = pts.len();
    let mr = mutual_reachability_matrix(pts, k);
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((mr[i][j], i, j));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut comp: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for (w, i, j) in edges {
        let (ci, cj) = (comp[i], comp[j]);
        if ci != cj {
            total += w;
            for c in comp.iter_mut() {
                if *c == cj {
                    *c = ci;
                }
            }
        }
    }
    total
}

/// Merge heights of naive agglomerative single linkage on the full
/// mutual-reachability graph: repeatedly join the two groups connected by the
/// lightest edge.
pub fn brute_merge_heights(pts: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mr = mutual_reachability_matrix(pts, k);
    let mut groups: Vec<Vec<usize>> = (0..pts.len()).map(|i| vec![i]).collect();
    let mut heights = Vec::new();
    while groups.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for ga in 0..groups.len() {
            for gb in ga + 1..groups.len() {
                for &i in &groups[ga] {
                    for &j in &groups[gb] {
                        if mr[i][j] < best.0 {
                            best = (mr[i][j], ga, gb);
                        }
                    }
                }
            }
        }
        let (w, ga, gb) = best;
        heights.push(w);
        let moved = groups.remove(gb);
        groups[ga].extend(moved);
    }
    heights
}

#[derive(Debug, Default)]
struct Cluster {
    birth: f64,
    /// (point, λ at which it left)
    leaves: Vec<(usize, f64)>,
    /// (child, λ at which it was born)
    children: Vec<Cluster>,
}

fn lambda(d: f64) -> f64 {
    1.0 / d.max(1e-12)
}

/// Connected components of `set` using only edges lighter than `limit`
/// (or at most `limit` when `inclusive`).
fn components(set: &[usize], mr: &[Vec<f64>], limit: f64, inclusive: bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; set.len()];
    let mut out = Vec::new();
    for s in 0..set.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![set[s]];
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for v in 0..set.len() {
                let w = mr[set[u]][set[v]];
                if !seen[v] && (w < limit || (inclusive && w == limit)) {
                    seen[v] = true;
                    comp.push(set[v]);
                    stack.push(v);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Smallest threshold at which `set` is connected, and the pieces it falls
/// apart into just below that threshold.
fn level_split(set: &[usize], mr: &[Vec<f64>]) -> (f64, Vec<Vec<usize>>) {
    let mut weights: Vec<f64> = Vec::new();
    for (k, &i) in set.iter().enumerate() {
        for &j in &set[k + 1..] {
            weights.push(mr[i][j]);
        }
    }
    weights.sort_by(f64::total_cmp);
    weights.dedup();
    let (mut lo, mut hi) = (0, weights.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if components(set, mr, weights[mid], true).len() == 1 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let d = weights[lo];
    (d, components(set, mr, d, false))
}

fn grow(set: &[usize], mr: &[Vec<f64>], cluster: &mut Cluster, mcs: usize) {
    let (d, parts) = level_split(set, mr);
    let l = lambda(d);
    let n_big = parts.iter().filter(|p| p.len() >= mcs).count();
    for part in parts {
        if part.len() < mcs {
            cluster.leaves.extend(part.iter().map(|&p| (p, l)));
        } else if n_big == 1 {
            grow(&part, mr, cluster, mcs);
        } else {
            let mut child = Cluster {
                birth: l,
                ..Default::default()
            };
            grow(&part, mr, &mut child, mcs);
            cluster.children.push(child);
        }
    }
}

fn stability(c: &Cluster) -> f64 {
    let own: f64 = c.leaves.iter().map(|(_, l)| l - c.birth).sum();
    let kids: f64 = c
        .children
        .iter()
        .map(|k| (k.birth - c.birth) * count_points(k) as f64)
        .sum();
    own + kids
}

fn count_points(c: &Cluster) -> usize {
    c.leaves.len() + c.children.iter().map(count_points).sum::<usize>()
}

fn all_points(c: &Cluster, out: &mut Vec<usize>) {
    out.extend(c.leaves.iter().map(|(p, _)| *p));
    for k in &c.children {
        all_points(k, out);
    }
}

/// Excess of mass: returns (value, selected clusters as point lists).
fn select(c: &Cluster) -> (f64, Vec<Vec<usize>>) {
    let s = stability(c);
    let mut whole = Vec::new();
    all_points(c, &mut whole);
    if c.children.is_empty() {
        return (s, vec![whole]);
    }
    let mut sum = 0.0;
    let mut picked = Vec::new();
    for k in &c.children {
        let (v, p) = select(k);
        sum += v;
        picked.extend(p);
    }
    if sum > s {
        (sum, picked)
    } else {
        (s, vec![whole])
    }
}

/// HDBSCAN labels computed from the level sets of the mutual-reachability
/// graph: a cluster splits at the lowest threshold that keeps it connected,
/// into the components just below it. Labels are numbered by the smallest
/// point index of each cluster; -1 is noise.
pub fn reference_hdbscan(
    pts: &[Vec<f64>],
    min_cluster_size: usize,
    min_samples: usize,
    allow_single_cluster: bool,
) -> Vec<i32> {
    let n = pts.len();
    if n < min_cluster_size {
        return vec![-1; n];
    }
    let mr = mutual_reachability_matrix(pts, min_samples);
    let mut top = Cluster::default();
    if n >= 2 {
        let all: Vec<usize> = (0..n).collect();
        grow(&all, &mr, &mut top, min_cluster_size);
    }
    let selected = if allow_single_cluster {
        select(&top).1
    } else {
        top.children.iter().flat_map(|k| select(k).1).collect()
    };
    let mut labels = vec![-1; n];
    for (k, pts) in selected.iter().enumerate() {
        for &p in pts {
            labels[p] = k as i32;
        }
    }
    canonical_labels(&labels)
}

/// Renumbers labels by first appearance, keeping -1.
pub fn canonical_labels(labels: &[i32]) -> Vec<i32> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                -1
            } else {
                let next = map.len() as i32;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

pub fn gaussian_blobs(
    r: &mut ChaCha8Rng,
    centers: &[Vec<f64>],
    per: usize,
    sigma: f64,
) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut pts = Vec::new();
    for c in centers {
        for _ in 0..per {
            pts.push(c.iter().map(|v| v + noise.sample(r)).collect());
        }
    }
    pts
}

/// A handful of Gaussian groups with random sizes and spreads in 2-3 dims.
pub fn random_cluster_fixture(r: &mut ChaCha8Rng, max_points: usize) -> Vec<Vec<f64>> {
    let dim = r.gen_range(2..=3);
    let groups = r.gen_range(1..=4);
    let mut pts = Vec::new();
    while pts.len() < max_points {
        let g = r.gen_range(0..groups);
        let sigma = 0.3 + g as f64 * 0.2;
        let noise = Normal::new(0.0, sigma).unwrap();
        pts.push((0..dim).map(|a| (g * 4 + a) as f64 + noise.sample(r)).collect());
        if r.gen_bool(0.05) {
            break;
        }
    }
    pts.shuffle(r);
    pts
}

// ---------------------------------------------------------------- matching

/// IoU of every (pred, gt) segment pair computed from pixel sets.
pub fn all_pairs_iou(pred: &[u16], gt: &[u16]) -> BTreeMap<(u16, u16), (usize, usize)> {
    let ids = |v: &[u16]| -> BTreeSet<u16> { v.iter().copied().filter(|&l| l != 0).collect() };
    let mut out = BTreeMap::new();
    for p in ids(pred) {
        for g in ids(gt) {
            let mut inter = 0;
            let mut union = 0;
            for (&a, &b) in pred.iter().zip(gt) {
                let (ia, ib) = (a == p, b == g);
                inter += usize::from(ia && ib);
                union += usize::from(ia || ib);
            }
            out.insert((p, g), (inter, union));
        }
    }
    out
}

/// Random instance image built from overlapping rectangles.
pub fn random_partition(r: &mut ChaCha8Rng, w: usize, h: usize, max_segments: u16) -> Vec<u16> {
    let mut px = vec![0u16; w * h];
    let k = r.gen_range(0..=max_segments);
    for id in 1..=k {
        let (x0, y0) = (r.gen_range(0..w), r.gen_range(0..h));
        let (x1, y1) = (r.gen_range(x0..w), r.gen_range(y0..h));
        for y in y0..=y1 {
            for x in x0..=x1 {
                px[y * w + x] = id;
            }
        }
    }
    px
}

/// A prediction derived from `gt`: ids are permuted, some pixels are
/// reassigned and some rectangles are painted over.
pub fn perturbed_partition(r: &mut ChaCha8Rng, gt: &[u16], w: usize, h: usize) -> Vec<u16> {
    let max = gt.iter().copied().max().unwrap_or(0);
    let mut perm: Vec<u16> = (1..=max + 2).collect();
    perm.shuffle(r);
    let flip = r.gen_range(0.0..0.4);
    let mut px: Vec<u16> = gt
        .iter()
        .map(|&g| {
            if r.gen_bool(flip) {
                r.gen_range(0..=max + 2)
            } else if g == 0 {
                0
            } else {
                perm[g as usize - 1]
            }
        })
        .collect();
    let extra = random_partition(r, w, h, 2);
    for (p, e) in px.iter_mut().zip(extra) {
        if e != 0 {
            *p = max + 2 + e;
        }
    }
    px
}
