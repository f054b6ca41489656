//! HDBSCAN: core distances, mutual reachability, minimum spanning tree,
//! single-linkage hierarchy, condensation and excess-of-mass selection.
//!
//! Edges are totally ordered by `(weight, smaller index, larger index)`, which
//! makes the spanning tree and the merge order deterministic. Condensation
//! only looks at the distinct merge heights, so the resulting clusters do not
//! depend on the input order.

use std::cmp::Ordering;
use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClusterAssignment, ClusterParams, DistanceMetric, NOISE};
use crate::error::{Error, Result};

/// Distances below this are treated as this value when converted to λ = 1/d.
pub const MIN_DISTANCE: f64 = 1e-12;

const PARALLEL_THRESHOLD: usize = 2048;

/// Flat row-major point storage.
#[derive(Clone, Copy, Debug)]
pub struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} coordinates do not form {dim}-dimensional points",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        Ok(Points { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

impl DistanceMetric {
    #[inline]
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            DistanceMetric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

/// Distance to the `k`-th nearest neighbour, counting the point itself as the
/// first (so `k = 1` gives 0). `k` is capped at the number of points.
pub fn core_distances(points: Points<'_>, k: usize, metric: DistanceMetric) -> Vec<f64> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let one = |i: usize| {
        let p = points.get(i);
        let mut d: Vec<f64> = (0..n).map(|j| metric.distance(p, points.get(j))).collect();
        let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
        *kth
    };
    if n >= PARALLEL_THRESHOLD {
        (0..n).into_par_iter().map(one).collect()
    } else {
        (0..n).map(one).collect()
    }
}

#[inline]
pub fn mutual_reachability(core: &[f64], d: f64, i: usize, j: usize) -> f64 {
    d.max(core[i]).max(core[j])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

impl MstEdge {
    fn new(i: usize, j: usize, weight: f64) -> Self {
        MstEdge {
            a: i.min(j),
            b: i.max(j),
            weight,
        }
    }
}

/// Total order on edges: weight, then smaller endpoint, then larger endpoint.
pub fn edge_order(x: &MstEdge, y: &MstEdge) -> Ordering {
    x.weight
        .total_cmp(&y.weight)
        .then(x.a.cmp(&y.a))
        .then(x.b.cmp(&y.b))
}

/// Prim's algorithm on the implicit complete mutual-reachability graph.
pub fn minimum_spanning_tree(
    points: Points<'_>,
    core: &[f64],
    metric: DistanceMetric,
) -> Vec<MstEdge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best: Vec<Option<MstEdge>> = vec![None; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let u = current;
        let pu = points.get(u);
        let update = |(v, slot): (usize, &mut Option<MstEdge>)| {
            if in_tree[v] {
                return;
            }
            let w = mutual_reachability(core, metric.distance(pu, points.get(v)), u, v);
            let cand = MstEdge::new(u, v, w);
            if slot.map_or(true, |b| edge_order(&cand, &b) == Ordering::Less) {
                *slot = Some(cand);
            }
        };
        if n >= PARALLEL_THRESHOLD {
            best.par_iter_mut().enumerate().for_each(update);
        } else {
            best.iter_mut().enumerate().for_each(update);
        }
        let mut next: Option<(usize, MstEdge)> = None;
        for (v, slot) in best.iter().enumerate() {
            if in_tree[v] {
                continue;
            }
            if let Some(e) = slot {
                if next.map_or(true, |(_, b)| edge_order(e, &b) == Ordering::Less) {
                    next = Some((v, *e));
                }
            }
        }
        let (v, e) = next.expect("graph is complete");
        in_tree[v] = true;
        best[v] = None;
        edges.push(e);
        current = v;
    }
    edges
}

/// One agglomeration step. Nodes `0..n` are points, node `n + k` is the
/// cluster created by merge `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
    node: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
            node: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Single-linkage dendrogram from spanning-tree edges.
pub fn single_linkage(mst: &[MstEdge], n: usize) -> Vec<Merge> {
    let mut edges = mst.to_vec();
    edges.sort_by(edge_order);
    let mut uf = UnionFind::new(n);
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for e in edges {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        if ra == rb {
            continue;
        }
        let size = uf.size[ra] + uf.size[rb];
        merges.push(Merge {
            left: uf.node[ra],
            right: uf.node[rb],
            distance: e.weight,
            size,
        });
        // union by size, the new root represents the new dendrogram node
        let (big, small) = if uf.size[ra] >= uf.size[rb] { (ra, rb) } else { (rb, ra) };
        uf.parent[small] = big;
        uf.size[big] = size;
        uf.node[big] = n + merges.len() - 1;
    }
    merges
}

/// Edge of the condensed tree. Clusters are numbered from `n` (the root);
/// children below `n` are points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub child_size: usize,
}

pub fn lambda_of(distance: f64) -> f64 {
    1.0 / distance.max(MIN_DISTANCE)
}

/// Condenses the dendrogram: a split only creates new clusters when at least
/// two sides hold `min_cluster_size` points or more; the points of smaller
/// sides leave the parent cluster at that λ.
///
/// Consecutive merges at exactly the same distance form a single multiway
/// split, so ties in the mutual-reachability graph are resolved the same way
/// whatever the input order.
pub fn condense(merges: &[Merge], n: usize, min_cluster_size: usize) -> Vec<CondensedEdge> {
    let mut out = Vec::new();
    if merges.is_empty() {
        return out;
    }
    let node_size = |node: usize| if node < n { 1 } else { merges[node - n].size };
    let leaves = |node: usize| -> Vec<usize> {
        let mut stack = vec![node];
        let mut pts = Vec::new();
        while let Some(x) = stack.pop() {
            if x < n {
                pts.push(x);
            } else {
                let m = merges[x - n];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
        pts
    };
    // subtrees hanging below the chain of merges at the node's own height
    let parts = |node: usize| -> Vec<usize> {
        let d = merges[node - n].distance;
        let mut stack = vec![node];
        let mut out = Vec::new();
        while let Some(x) = stack.pop() {
            if x >= n && (x == node || merges[x - n].distance == d) {
                let m = merges[x - n];
                stack.push(m.right);
                stack.push(m.left);
            } else {
                out.push(x);
            }
        }
        out
    };
    let root = n + merges.len() - 1;
    let mut next_label = n + 1;
    let mut queue = VecDeque::from([(root, n)]);
    while let Some((node, label)) = queue.pop_front() {
        let lambda = lambda_of(merges[node - n].distance);
        let sides = parts(node);
        let n_big = sides
            .iter()
            .filter(|&&s| node_size(s) >= min_cluster_size)
            .count();
        for s in sides {
            let size = node_size(s);
            if size < min_cluster_size {
                for p in leaves(s) {
                    out.push(CondensedEdge {
                        parent: label,
                        child: p,
                        lambda,
                        child_size: 1,
                    });
                }
            } else if n_big == 1 {
                queue.push_back((s, label));
            } else {
                out.push(CondensedEdge {
                    parent: label,
                    child: next_label,
                    lambda,
                    child_size: size,
                });
                queue.push_back((s, next_label));
                next_label += 1;
            }
        }
    }
    out
}

fn cluster_count(condensed: &[CondensedEdge], n: usize) -> usize {
    condensed
        .iter()
        .flat_map(|e| [Some(e.parent), (e.child >= n).then_some(e.child)])
        .flatten()
        .max()
        .map_or(0, |id| id - n + 1)
}

/// Stability of every cluster (index `c - n`) in the condensed tree.
pub fn stabilities(condensed: &[CondensedEdge], n: usize) -> Vec<f64> {
    let n_clusters = cluster_count(condensed, n);
    let mut birth = vec![0.0; n_clusters];
    for e in condensed.iter().filter(|e| e.child >= n) {
        birth[e.child - n] = e.lambda;
    }
    let mut stab = vec![0.0; n_clusters];
    for e in condensed {
        let c = e.parent - n;
        stab[c] += (e.lambda - birth[c]) * e.child_size as f64;
    }
    stab
}

/// Excess-of-mass selection. Returns the selected cluster ids.
pub fn select_clusters(condensed: &[CondensedEdge], n: usize, allow_single_cluster: bool) -> Vec<usize> {
    let stab = stabilities(condensed, n);
    let m = stab.len();
    if m == 0 {
        return Vec::new();
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); m];
    for e in condensed.iter().filter(|e| e.child >= n) {
        children[e.parent - n].push(e.child - n);
    }
    let mut selected = vec![false; m];
    let mut value = stab.clone();
    // children always carry larger ids than their parent
    for c in (0..m).rev() {
        if c == 0 && !allow_single_cluster {
            break;
        }
        if children[c].is_empty() {
            selected[c] = true;
            continue;
        }
        let subtree: f64 = children[c].iter().map(|&k| value[k]).sum();
        if subtree > stab[c] {
            value[c] = subtree;
        } else {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend_from_slice(&children[k]);
            }
        }
    }
    (0..m).filter(|&c| selected[c]).map(|c| c + n).collect()
}

/// Labels every point by the selected cluster whose subtree contains it.
/// Cluster labels are ordered by the smallest point index they contain.
pub fn label_points(condensed: &[CondensedEdge], n: usize, selected: &[usize]) -> Vec<i32> {
    let m = cluster_count(condensed, n);
    let mut parent = vec![usize::MAX; m];
    for e in condensed.iter().filter(|e| e.child >= n) {
        parent[e.child - n] = e.parent - n;
    }
    let mut owner: Vec<Option<usize>> = vec![None; m];
    for &s in selected {
        owner[s - n] = Some(s - n);
    }
    for c in 0..m {
        if owner[c].is_none() && parent[c] != usize::MAX {
            owner[c] = owner[parent[c]];
        }
    }
    let mut raw = vec![None; n];
    for e in condensed.iter().filter(|e| e.child < n) {
        raw[e.child] = owner[e.parent - n];
    }
    // relabel by first appearance in point order
    let mut relabel = vec![NOISE; m];
    let mut next = 0;
    raw.iter()
        .map(|o| match o {
            None => NOISE,
            Some(c) => {
                if relabel[*c] == NOISE {
                    relabel[*c] = next;
                    next += 1;
                }
                relabel[*c]
            }
        })
        .collect()
}

/// Runs the full pipeline on flat row-major points.
pub fn hdbscan_flat(data: &[f64], dim: usize, params: &ClusterParams) -> Result<ClusterAssignment> {
    params.validate()?;
    let points = Points::new(data, dim)?;
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("hdbscan needs at least one point"));
    }
    if n < params.min_cluster_size {
        return Ok(ClusterAssignment::all_noise(n));
    }
    let core = core_distances(points, params.min_samples, params.metric);
    let mst = minimum_spanning_tree(points, &core, params.metric);
    let merges = single_linkage(&mst, n);
    let condensed = condense(&merges, n, params.min_cluster_size);
    let selected = select_clusters(&condensed, n, params.allow_single_cluster);
    let labels = label_points(&condensed, n, &selected);
    Ok(ClusterAssignment::from_labels(labels))
}

/// Clusters a list of equal-length vectors.
pub fn hdbscan<P: AsRef<[f64]>>(points: &[P], params: &ClusterParams) -> Result<ClusterAssignment> {
    let dim = points.first().map_or(1, |p| p.as_ref().len());
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::invalid("all points must have the same dimension"));
    }
    let flat: Vec<f64> = points.iter().flat_map(|p| p.as_ref().iter().copied()).collect();
    hdbscan_flat(&flat, dim.max(1), params)
}
