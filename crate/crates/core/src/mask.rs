//! Scene and mask value types plus the exact point-level mask algebra
//! everything downstream is built on.
//!
//! Masks are packed bit vectors; cardinalities are computed in integer
//! arithmetic so IoU values are bit-exact reproducible.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Instance label attached to a point: a dense non-negative ID scoped to the
/// scene, or unlabeled (clutter that can never be a phrase target).
pub type InstanceLabel = Option<u32>;

/// One point of a scene: position in meters, color channels in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    pub position: [f64; 3],
    pub color: [f64; 3],
}

impl ScenePoint {
    /// The six raw per-point features: XYZ followed by RGB.
    pub fn features(&self) -> [f64; 6] {
        [
            self.position[0],
            self.position[1],
            self.position[2],
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }
}

/// Raw per-point feature width (XYZ + RGB).
pub const POINT_FEATURE_WIDTH: usize = 6;

/// A point cloud scene with per-point instance labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub points: Vec<ScenePoint>,
    /// Per-point instance ID, `None` for unlabeled points. Same length as
    /// `points`.
    pub instance_labels: Vec<InstanceLabel>,
}

impl Scene {
    pub fn new(
        scene_id: impl Into<String>,
        points: Vec<ScenePoint>,
        instance_labels: Vec<InstanceLabel>,
    ) -> Self {
        Self {
            scene_id: scene_id.into(),
            points,
            instance_labels,
        }
    }

    /// Number of points in the scene.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distinct instance IDs present on at least one point, ascending.
    pub fn instance_ids(&self) -> BTreeSet<u32> {
        self.instance_labels.iter().flatten().copied().collect()
    }
}

/// A length-`N_p` boolean mask over the points of one scene, stored packed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointMask {
    scene_id: String,
    len: usize,
    blocks: Vec<u64>,
}

impl PointMask {
    pub fn new_false(scene_id: impl Into<String>, len: usize) -> Self {
        Self {
            scene_id: scene_id.into(),
            len,
            blocks: vec![0; len.div_ceil(64)],
        }
    }

    pub fn new_true(scene_id: impl Into<String>, len: usize) -> Self {
        let mut mask = Self::new_false(scene_id, len);
        for i in 0..len {
            mask.set(i, true);
        }
        mask
    }

    pub fn from_bits(scene_id: impl Into<String>, bits: &[bool]) -> Self {
        let mut mask = Self::new_false(scene_id, bits.len());
        for (i, &b) in bits.iter().enumerate() {
            mask.set(i, b);
        }
        mask
    }

    /// Mask with exactly the given point indices set.
    pub fn from_indices<I: IntoIterator<Item = usize>>(
        scene_id: impl Into<String>,
        len: usize,
        indices: I,
    ) -> Self {
        let mut mask = Self::new_false(scene_id, len);
        for i in indices {
            mask.set(i, true);
        }
        mask
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, index: usize) -> bool {
        assert!(index < self.len, "bit index {index} out of range {}", self.len);
        self.blocks[index / 64] >> (index % 64) & 1 == 1
    }

    pub fn set(&mut self, index: usize, value: bool) {
        assert!(index < self.len, "bit index {index} out of range {}", self.len);
        let (block, bit) = (index / 64, index % 64);
        if value {
            self.blocks[block] |= 1 << bit;
        } else {
            self.blocks[block] &= !(1 << bit);
        }
    }

    /// Number of set bits, exact.
    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Indices of set bits, ascending.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| self.get(i)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    /// Bitwise OR with another mask of the same scene and length.
    pub fn union(&self, other: &PointMask) -> Result<PointMask, MaskError> {
        check_compatible(self, other)?;
        let mut out = self.clone();
        for (b, o) in out.blocks.iter_mut().zip(&other.blocks) {
            *b |= o;
        }
        Ok(out)
    }

    fn intersection_count(&self, other: &PointMask) -> usize {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    fn union_count(&self, other: &PointMask) -> usize {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }
}

/// Masks for every phrase of one description, in phrase order, plus the
/// optional sentence-level mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseMaskSet {
    pub masks: Vec<PointMask>,
    pub sentence_mask: Option<PointMask>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("instance id {id} has no points in scene {scene_id}")]
    UnknownInstance { scene_id: String, id: u32 },
    #[error("mask length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("masks belong to different scenes: {left} vs {right}")]
    SceneMismatch { left: String, right: String },
}

fn check_compatible(a: &PointMask, b: &PointMask) -> Result<(), MaskError> {
    if a.scene_id != b.scene_id {
        return Err(MaskError::SceneMismatch {
            left: a.scene_id.clone(),
            right: b.scene_id.clone(),
        });
    }
    if a.len != b.len {
        return Err(MaskError::LengthMismatch {
            left: a.len,
            right: b.len,
        });
    }
    Ok(())
}

/// Mask of all points whose instance label is in `ids`.
///
/// An empty `ids` set yields the all-false mask. Every requested ID must
/// occur on at least one point of the scene.
pub fn union_instance_mask(scene: &Scene, ids: &BTreeSet<u32>) -> Result<PointMask, MaskError> {
    let present = scene.instance_ids();
    for &id in ids {
        if !present.contains(&id) {
            return Err(MaskError::UnknownInstance {
                scene_id: scene.scene_id.clone(),
                id,
            });
        }
    }
    let mut mask = PointMask::new_false(scene.scene_id.clone(), scene.len());
    for (i, label) in scene.instance_labels.iter().enumerate() {
        if let Some(id) = label {
            if ids.contains(id) {
                mask.set(i, true);
            }
        }
    }
    Ok(mask)
}

/// Intersection-over-union of two point masks.
///
/// Both masks empty counts as perfect agreement (1.0); empty against
/// non-empty is 0.0. This is the single place that convention lives.
pub fn point_iou(a: &PointMask, b: &PointMask) -> Result<f64, MaskError> {
    check_compatible(a, b)?;
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

/// One scene-invariant violation; data, not a fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneViolation {
    /// Index of the offending point, when the rule is per-point.
    pub point: Option<usize>,
    pub rule: String,
}

impl SceneViolation {
    fn at(point: usize, rule: impl Into<String>) -> Self {
        Self {
            point: Some(point),
            rule: rule.into(),
        }
    }

    fn global(rule: impl Into<String>) -> Self {
        Self {
            point: None,
            rule: rule.into(),
        }
    }
}

/// Check every scene invariant; returns an empty list iff the scene is
/// well-formed.
pub fn validate_scene(scene: &Scene) -> Vec<SceneViolation> {
    let mut violations = Vec::new();
    if scene.points.is_empty() {
        violations.push(SceneViolation::global("scene has no points"));
    }
    if scene.instance_labels.len() != scene.points.len() {
        violations.push(SceneViolation::global(format!(
            "instance label count {} does not match point count {}",
            scene.instance_labels.len(),
            scene.points.len()
        )));
    }
    for (i, point) in scene.points.iter().enumerate() {
        for (axis, &v) in ["x", "y", "z"].iter().zip(&point.position) {
            if !v.is_finite() {
                violations.push(SceneViolation::at(i, format!("non-finite {axis} coordinate")));
            }
        }
        for (channel, &v) in ["r", "g", "b"].iter().zip(&point.color) {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                violations.push(SceneViolation::at(
                    i,
                    format!("color channel {channel}={v} outside [0, 1]"),
                ));
            }
        }
    }
    violations
}
