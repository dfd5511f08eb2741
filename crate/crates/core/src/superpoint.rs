//! Unsupervised oversegmentation of a scene into superpoints, feature
//! pooling, the dual linear projections, and mask movement between point
//! and superpoint granularity.
//!
//! The oversegmentation is greedy graph-based region merging on a k-NN
//! graph with edge weights mixing spatial and color distance, using a
//! size-adaptive merge threshold. It is fully deterministic: ties in edge
//! ordering break on (weight, lower point index), and superpoints are
//! relabeled canonically by their smallest member index.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{PointMask, Scene};
use crate::util::fnv1a64;

/// Dense feature matrix. Shapes are checked at operation boundaries:
/// point features are `N_p x c`, pooled features `N_s x c`, projected
/// visual/superpoint features `N_s x d`, token features `(L+2) x e`.
pub type FeatureMatrix = Array2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum SuperpointError {
    #[error("degenerate scene {scene_id}: all points coincide")]
    DegenerateScene { scene_id: String },
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("malformed partition file {path} at line {line}: {message}")]
    MalformedPartition {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
}

fn shape_mismatch(context: impl Into<String>) -> SuperpointError {
    SuperpointError::ShapeMismatch {
        context: context.into(),
    }
}

/// Surjective point-to-superpoint assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointPartition {
    scene_id: String,
    assignment: Vec<usize>,
    n_superpoints: usize,
}

impl SuperpointPartition {
    /// Build from raw assignments; indices must cover `[0, N_s)`.
    pub fn new(
        scene_id: impl Into<String>,
        assignment: Vec<usize>,
        n_superpoints: usize,
    ) -> Result<Self, SuperpointError> {
        let mut seen = vec![false; n_superpoints];
        for &s in &assignment {
            if s >= n_superpoints {
                return Err(shape_mismatch(format!(
                    "assignment index {s} out of range for {n_superpoints} superpoints"
                )));
            }
            seen[s] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(shape_mismatch("partition is not surjective"));
        }
        Ok(Self {
            scene_id: scene_id.into(),
            assignment,
            n_superpoints,
        })
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    /// Superpoint index of each point.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_superpoints(&self) -> usize {
        self.n_superpoints
    }

    /// Point count of each superpoint.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_superpoints];
        for &s in &self.assignment {
            sizes[s] += 1;
        }
        sizes
    }
}

/// Real-valued mask logits over superpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointLogits {
    pub scene_id: String,
    pub values: Vec<f64>,
}

impl SuperpointLogits {
    /// Binarize at the given threshold (strictly greater).
    pub fn binarize(&self, threshold: f64) -> SuperpointMask {
        SuperpointMask {
            scene_id: self.scene_id.clone(),
            bits: self.values.iter().map(|&v| v > threshold).collect(),
        }
    }
}

/// Boolean mask over superpoints; broadcastable to a `PointMask`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointMask {
    pub scene_id: String,
    pub bits: Vec<bool>,
}

/// Oversegmentation knobs. Defaults suit meter-scale desk scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpointConfig {
    /// Neighbors per point in the k-NN graph.
    pub knn: usize,
    /// Weight of RGB distance relative to spatial distance in edge weights.
    pub color_weight: f64,
    /// Scale of the size-adaptive merge threshold; larger merges more.
    pub threshold_scale: f64,
    /// Components smaller than this are merged into a neighbor.
    pub min_superpoint_size: usize,
    /// Hard upper bound on the superpoint count, enforced by merge passes.
    pub target_max_superpoints: Option<usize>,
}

impl Default for SuperpointConfig {
    fn default() -> Self {
        Self {
            knn: 8,
            color_weight: 0.25,
            threshold_scale: 0.5,
            min_superpoint_size: 1,
            target_max_superpoints: None,
        }
    }
}

impl SuperpointConfig {
    /// Stable fingerprint used to key oversegmentation caches.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialization is infallible");
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }
}

struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
    /// Largest intra-component edge weight admitted so far.
    internal: Vec<f64>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        // Attach to the lower root so canonical relabeling is stable.
        let (root, child) = if a < b { (a, b) } else { (b, a) };
        self.parent[child] = root;
        self.size[root] += self.size[child];
        self.internal[root] = self.internal[root].max(self.internal[child]).max(weight);
    }
}

struct Edge {
    a: usize,
    b: usize,
    weight: f64,
}

fn knn_edges(scene: &Scene, cfg: &SuperpointConfig) -> Vec<Edge> {
    let n = scene.len();
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for i in 0..n {
        let mut candidates: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2 = scene.points[i]
                    .position
                    .iter()
                    .zip(&scene.points[j].position)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
                (d2, j)
            })
            .collect();
        candidates.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
        for &(_, j) in candidates.iter().take(cfg.knn) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    pairs
        .into_iter()
        .map(|(a, b)| {
            let spatial = scene.points[a]
                .position
                .iter()
                .zip(&scene.points[b].position)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let color = scene.points[a]
                .color
                .iter()
                .zip(&scene.points[b].color)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            Edge {
                a,
                b,
                weight: spatial + cfg.color_weight * color,
            }
        })
        .collect()
}

/// Partition a scene into superpoints.
///
/// Deterministic for a given (scene, config). Superpoints are connected in
/// the k-NN graph except where `target_max_superpoints` forces merges
/// across disconnected graph components.
pub fn oversegment(
    scene: &Scene,
    cfg: &SuperpointConfig,
) -> Result<SuperpointPartition, SuperpointError> {
    let n = scene.len();
    if n == 0 {
        return Err(shape_mismatch("scene has no points"));
    }
    if n > 1 {
        let first = scene.points[0].position;
        if scene.points.iter().all(|p| p.position == first) {
            return Err(SuperpointError::DegenerateScene {
                scene_id: scene.scene_id.clone(),
            });
        }
    }

    let mut edges = knn_edges(scene, cfg);
    edges.sort_by(|x, y| {
        x.weight
            .total_cmp(&y.weight)
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });

    let mut sets = DisjointSets::new(n);
    let mut components = n;
    for edge in &edges {
        let (ra, rb) = (sets.find(edge.a), sets.find(edge.b));
        if ra == rb {
            continue;
        }
        let tau_a = sets.internal[ra] + cfg.threshold_scale / sets.size[ra] as f64;
        let tau_b = sets.internal[rb] + cfg.threshold_scale / sets.size[rb] as f64;
        if edge.weight <= tau_a.min(tau_b) {
            sets.union(ra, rb, edge.weight);
            components -= 1;
        }
    }

    // Absorb undersized fragments along the cheapest edges.
    if cfg.min_superpoint_size > 1 {
        for edge in &edges {
            let (ra, rb) = (sets.find(edge.a), sets.find(edge.b));
            if ra != rb
                && (sets.size[ra] < cfg.min_superpoint_size
                    || sets.size[rb] < cfg.min_superpoint_size)
            {
                sets.union(ra, rb, edge.weight);
                components -= 1;
            }
        }
    }

    // Enforce the superpoint budget: first along graph edges, then (for
    // disconnected graphs) by closest centroids.
    if let Some(max) = cfg.target_max_superpoints {
        let max = max.max(1);
        for edge in &edges {
            if components <= max {
                break;
            }
            let (ra, rb) = (sets.find(edge.a), sets.find(edge.b));
            if ra != rb {
                sets.union(ra, rb, edge.weight);
                components -= 1;
            }
        }
        while components > max {
            merge_closest_components(scene, &mut sets);
            components -= 1;
        }
    }

    // Canonical labels ordered by smallest member point index.
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0usize;
    let mut assignment = vec![0usize; n];
    for i in 0..n {
        let root = sets.find(i);
        if label_of_root[root] == usize::MAX {
            label_of_root[root] = next;
            next += 1;
        }
        assignment[i] = label_of_root[root];
    }
    SuperpointPartition::new(scene.scene_id.clone(), assignment, next)
}

fn merge_closest_components(scene: &Scene, sets: &mut DisjointSets) {
    let n = scene.len();
    let mut roots: Vec<usize> = Vec::new();
    let mut centroid: Vec<[f64; 3]> = Vec::new();
    let mut count: Vec<f64> = Vec::new();
    let mut index_of = vec![usize::MAX; n];
    for i in 0..n {
        let root = sets.find(i);
        let slot = if index_of[root] == usize::MAX {
            index_of[root] = roots.len();
            roots.push(root);
            centroid.push([0.0; 3]);
            count.push(0.0);
            roots.len() - 1
        } else {
            index_of[root]
        };
        for (c, p) in centroid[slot].iter_mut().zip(&scene.points[i].position) {
            *c += p;
        }
        count[slot] += 1.0;
    }
    for (c, &k) in centroid.iter_mut().zip(&count) {
        for v in c.iter_mut() {
            *v /= k;
        }
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..roots.len() {
        for j in (i + 1)..roots.len() {
            let d2 = centroid[i]
                .iter()
                .zip(&centroid[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
            let candidate = (d2, roots[i].min(roots[j]), roots[i].max(roots[j]));
            if best.is_none_or(|b| (candidate.0, candidate.1, candidate.2) < b) {
                best = Some(candidate);
            }
        }
    }
    let (_, a, b) = best.expect("at least two components when over budget");
    sets.union(a, b, 0.0);
}

/// Mean-pool per-point features into one row per superpoint.
pub fn sp_pool(
    point_features: &FeatureMatrix,
    part: &SuperpointPartition,
) -> Result<FeatureMatrix, SuperpointError> {
    if point_features.nrows() != part.num_points() {
        return Err(shape_mismatch(format!(
            "point features have {} rows, partition covers {} points",
            point_features.nrows(),
            part.num_points()
        )));
    }
    let cols = point_features.ncols();
    let mut pooled = Array2::<f64>::zeros((part.num_superpoints(), cols));
    let mut counts = vec![0.0f64; part.num_superpoints()];
    for (i, &s) in part.assignment().iter().enumerate() {
        counts[s] += 1.0;
        for c in 0..cols {
            pooled[(s, c)] += point_features[(i, c)];
        }
    }
    for (s, &k) in counts.iter().enumerate() {
        for c in 0..cols {
            pooled[(s, c)] /= k;
        }
    }
    Ok(pooled)
}

/// The two independently parameterized linear projections of the pooled
/// features: visual features for fusion and superpoint features for mask
/// prediction.
pub fn project_features(
    pooled: &FeatureMatrix,
    w1: &FeatureMatrix,
    w2: &FeatureMatrix,
) -> Result<(FeatureMatrix, FeatureMatrix), SuperpointError> {
    if w1.dim() != w2.dim() {
        return Err(shape_mismatch(format!(
            "projection shapes differ: {:?} vs {:?}",
            w1.dim(),
            w2.dim()
        )));
    }
    if pooled.ncols() != w1.nrows() {
        return Err(shape_mismatch(format!(
            "pooled width {} does not match projection input {}",
            pooled.ncols(),
            w1.nrows()
        )));
    }
    Ok((pooled.dot(w1), pooled.dot(w2)))
}

/// Broadcast a boolean superpoint mask to point level.
pub fn broadcast_mask(
    spmask: &SuperpointMask,
    part: &SuperpointPartition,
) -> Result<PointMask, SuperpointError> {
    if spmask.bits.len() != part.num_superpoints() {
        return Err(shape_mismatch(format!(
            "superpoint mask has {} entries, partition has {} superpoints",
            spmask.bits.len(),
            part.num_superpoints()
        )));
    }
    let mut mask = PointMask::new_false(part.scene_id().to_string(), part.num_points());
    for (i, &s) in part.assignment().iter().enumerate() {
        if spmask.bits[s] {
            mask.set(i, true);
        }
    }
    Ok(mask)
}

/// Pool a ground-truth point mask to superpoint level: a superpoint is
/// positive iff its positive-point fraction reaches the threshold.
pub fn pool_gt_mask(
    gt: &PointMask,
    part: &SuperpointPartition,
    threshold: f64,
) -> Result<SuperpointMask, SuperpointError> {
    if gt.len() != part.num_points() {
        return Err(shape_mismatch(format!(
            "ground-truth mask has {} bits, partition covers {} points",
            gt.len(),
            part.num_points()
        )));
    }
    let mut positives = vec![0usize; part.num_superpoints()];
    let sizes = part.sizes();
    for (i, &s) in part.assignment().iter().enumerate() {
        if gt.get(i) {
            positives[s] += 1;
        }
    }
    let bits = positives
        .iter()
        .zip(&sizes)
        .map(|(&p, &n)| p as f64 / n as f64 >= threshold)
        .collect();
    Ok(SuperpointMask {
        scene_id: part.scene_id().to_string(),
        bits,
    })
}

/// Write a partition dump: a header carrying scene ID, counts, and the
/// config fingerprint, then one `point_index superpoint_index` pair per line.
pub fn save_partition(
    part: &SuperpointPartition,
    config_fingerprint: &str,
    path: &Path,
) -> Result<(), SuperpointError> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# scene {} points={} superpoints={} config={config_fingerprint}",
        part.scene_id(),
        part.num_points(),
        part.num_superpoints(),
    );
    for (i, &s) in part.assignment().iter().enumerate() {
        let _ = writeln!(out, "{i} {s}");
    }
    fs::write(path, out).map_err(|e| SuperpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Read a partition dump; returns the partition and the stored config
/// fingerprint.
pub fn load_partition(path: &Path) -> Result<(SuperpointPartition, String), SuperpointError> {
    let raw = fs::read_to_string(path).map_err(|e| SuperpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let malformed = |line: usize, message: String| SuperpointError::MalformedPartition {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = raw.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| malformed(1, "empty file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (scene_id, n_points, n_superpoints, fingerprint) = match parts.as_slice() {
        ["#", "scene", id, points, superpoints, config] => {
            let parse = |text: &str, line: usize| -> Result<usize, SuperpointError> {
                text.split_once('=')
                    .map(|(_, v)| v)
                    .ok_or_else(|| malformed(line, format!("bad field {text:?}")))?
                    .parse()
                    .map_err(|e| malformed(line, format!("bad count in {text:?}: {e}")))
            };
            let fp = config
                .split_once('=')
                .map(|(_, v)| v.to_string())
                .ok_or_else(|| malformed(1, format!("bad field {config:?}")))?;
            ((*id).to_string(), parse(points, 1)?, parse(superpoints, 1)?, fp)
        }
        _ => return Err(malformed(1, format!("bad header {header:?}"))),
    };
    let mut assignment = vec![usize::MAX; n_points];
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (point, superpoint) = line
            .split_once(' ')
            .ok_or_else(|| malformed(line_no, "expected two fields".into()))?;
        let point: usize = point
            .parse()
            .map_err(|e| malformed(line_no, format!("bad point index: {e}")))?;
        let superpoint: usize = superpoint
            .parse()
            .map_err(|e| malformed(line_no, format!("bad superpoint index: {e}")))?;
        if point >= n_points {
            return Err(malformed(line_no, format!("point index {point} out of range")));
        }
        assignment[point] = superpoint;
    }
    if assignment.iter().any(|&s| s == usize::MAX) {
        return Err(malformed(0, "not every point is assigned".into()));
    }
    let partition = SuperpointPartition::new(scene_id, assignment, n_superpoints)?;
    Ok((partition, fingerprint))
}
