//! Deterministic synthetic benchmark: box-cluster scenes with labeled
//! instances, template descriptions in the tagged interchange form, and
//! the feature providers that replace pretrained point and text backbones.
//!
//! Every output is a pure function of (config, seed, index). Categories
//! carry distinctive colors so that pooled features separate instances,
//! which is what makes overfit runs on this data meaningful.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{parse_tagged_text, AnnotatedDescription};
use crate::mask::{Scene, ScenePoint};
use crate::superpoint::FeatureMatrix;
use crate::util::fnv1a64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible config: {reason}")]
    ConfigInfeasible { reason: String },
    #[error("feature file missing for scene {scene_id} under {dir}")]
    FeatureFileMissing { scene_id: String, dir: String },
    #[error("provider {provider} does not support {requested}")]
    UnsupportedProvider {
        provider: &'static str,
        requested: &'static str,
    },
    #[error("malformed feature table {path}: {message}")]
    MalformedFeatureTable { path: String, message: String },
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
}

/// Knobs of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_scenes: usize,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
    /// Inclusive range of points per object.
    pub points_per_object: (usize, usize),
    /// Inclusive range of phrases per description.
    pub phrases_per_description: (usize, usize),
    pub descriptions_per_scene: usize,
    /// Share of descriptions padded past the long-text boundary.
    pub long_text_fraction: f64,
    /// Share of scenes that contain an adjacent same-category object pair;
    /// phrases over such pairs target both instances at once.
    pub same_category_pair_fraction: f64,
    /// Unlabeled clutter points added below the objects.
    pub floor_points: usize,
    /// Category nouns; each maps to a fixed distinctive color.
    pub categories: Vec<String>,
    /// Connective words between phrases.
    pub relations: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scenes: 8,
            objects_per_scene: (2, 4),
            points_per_object: (30, 50),
            phrases_per_description: (1, 4),
            descriptions_per_scene: 2,
            long_text_fraction: 0.0,
            same_category_pair_fraction: 0.5,
            floor_points: 0,
            categories: [
                "chair", "table", "lamp", "sofa", "shelf", "plant", "box", "screen",
            ]
            .map(String::from)
            .to_vec(),
            relations: ["beside", "behind", "near", "facing"].map(String::from).to_vec(),
        }
    }
}

const CELL_SIZE: f64 = 1.0;
const BOX_SIZE: f64 = 0.5;
const GRID_SIDE: usize = 4;

fn stream_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut key = Vec::new();
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(purpose.as_bytes());
    key.extend_from_slice(&index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&key))
}

/// Fixed distinctive color of a category, derived from its name.
fn category_color(category: &str) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(category.as_bytes()));
    [(); 3].map(|_| rng.gen_range(0.15..0.95))
}

fn inclusive_range(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

struct PlacedObject {
    category: String,
    cell: (usize, usize),
}

fn plan_objects(cfg: &SynthConfig, index: usize) -> Result<Vec<PlacedObject>, SynthError> {
    if cfg.categories.is_empty() {
        return Err(SynthError::ConfigInfeasible {
            reason: "no categories".into(),
        });
    }
    if cfg.objects_per_scene.0 > cfg.objects_per_scene.1 || cfg.objects_per_scene.0 == 0 {
        return Err(SynthError::ConfigInfeasible {
            reason: format!("bad objects_per_scene range {:?}", cfg.objects_per_scene),
        });
    }
    let cells = GRID_SIDE * GRID_SIDE;
    if cfg.objects_per_scene.1 > cells {
        return Err(SynthError::ConfigInfeasible {
            reason: format!(
                "up to {} objects requested but the arena has {cells} slots",
                cfg.objects_per_scene.1
            ),
        });
    }
    let mut rng = stream_rng(cfg.seed, "layout", index as u64);
    let count = inclusive_range(&mut rng, cfg.objects_per_scene);

    let mut free: Vec<(usize, usize)> = (0..GRID_SIDE)
        .flat_map(|x| (0..GRID_SIDE).map(move |y| (x, y)))
        .collect();
    free.shuffle(&mut rng);

    let mut objects: Vec<PlacedObject> = Vec::with_capacity(count);
    let wants_pair = count >= 2 && rng.gen_bool(cfg.same_category_pair_fraction.clamp(0.0, 1.0));
    if wants_pair {
        // Find two adjacent free cells for the same-category pair.
        let pair = free.iter().enumerate().find_map(|(i, &(x, y))| {
            free.iter()
                .position(|&other| other == (x + 1, y))
                .map(|j| (i, j))
        });
        if let Some((i, j)) = pair {
            let category = cfg.categories[rng.gen_range(0..cfg.categories.len())].clone();
            let (first, second) = (free[i], free[j]);
            objects.push(PlacedObject {
                category: category.clone(),
                cell: first,
            });
            objects.push(PlacedObject {
                category,
                cell: second,
            });
            free.retain(|&c| c != first && c != second);
        }
    }
    while objects.len() < count {
        let cell = free.pop().expect("capacity checked above");
        let category = cfg.categories[rng.gen_range(0..cfg.categories.len())].clone();
        objects.push(PlacedObject { category, cell });
    }
    Ok(objects)
}

/// Deterministically generate the scene at `index`.
pub fn gen_scene(cfg: &SynthConfig, index: usize) -> Result<Scene, SynthError> {
    if cfg.points_per_object.0 > cfg.points_per_object.1 || cfg.points_per_object.0 == 0 {
        return Err(SynthError::ConfigInfeasible {
            reason: format!("bad points_per_object range {:?}", cfg.points_per_object),
        });
    }
    let objects = plan_objects(cfg, index)?;
    let mut rng = stream_rng(cfg.seed, "points", index as u64);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (id, object) in objects.iter().enumerate() {
        let base = [
            object.cell.0 as f64 * CELL_SIZE + (CELL_SIZE - BOX_SIZE) / 2.0,
            object.cell.1 as f64 * CELL_SIZE + (CELL_SIZE - BOX_SIZE) / 2.0,
            0.0,
        ];
        let color = category_color(&object.category);
        let count = inclusive_range(&mut rng, cfg.points_per_object);
        for _ in 0..count {
            let position = [
                base[0] + rng.gen_range(0.0..BOX_SIZE),
                base[1] + rng.gen_range(0.0..BOX_SIZE),
                base[2] + rng.gen_range(0.0..BOX_SIZE),
            ];
            let jitter = |v: f64| (v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
            points.push(ScenePoint {
                position,
                color: color.map(jitter),
            });
            labels.push(Some(id as u32));
        }
    }
    for _ in 0..cfg.floor_points {
        let position = [
            rng.gen_range(0.0..GRID_SIDE as f64 * CELL_SIZE),
            rng.gen_range(0.0..GRID_SIDE as f64 * CELL_SIZE),
            -0.4 + rng.gen_range(-0.02..0.02),
        ];
        points.push(ScenePoint {
            position,
            color: [0.05; 3],
        });
        labels.push(None);
    }
    Ok(Scene::new(format!("synth-{index:04}"), points, labels))
}

/// Generate all scenes of the config.
pub fn gen_scenes(cfg: &SynthConfig) -> Result<Vec<Scene>, SynthError> {
    (0..cfg.num_scenes).map(|i| gen_scene(cfg, i)).collect()
}

/// Categories and instance IDs present in a generated scene, in instance
/// order. Reconstructed from the fixed category colors.
fn scene_inventory(cfg: &SynthConfig, scene_index: usize) -> Result<Vec<(String, u32)>, SynthError> {
    // Re-plan deterministically rather than reverse-engineering colors.
    Ok(plan_objects(cfg, scene_index)?
        .into_iter()
        .enumerate()
        .map(|(id, object)| (object.category, id as u32))
        .collect())
}

const LONG_PADDING: [&str; 4] = [
    "which sits in the corner of the wide room",
    "over by the far wall under the bright window",
    "a short walk from the open doorway on the left",
    "just past the middle of the floor towards the back",
];

/// Deterministically generate template descriptions for the given scenes.
///
/// Scenes must come from `gen_scene` with the same config, in order. Every
/// phrase is tagged with true instance IDs; a phrase over a same-category
/// pair targets both instances.
pub fn gen_dataset(
    cfg: &SynthConfig,
    scenes: &[Scene],
) -> Result<Vec<AnnotatedDescription>, SynthError> {
    if cfg.phrases_per_description.0 > cfg.phrases_per_description.1
        || cfg.phrases_per_description.0 == 0
    {
        return Err(SynthError::ConfigInfeasible {
            reason: format!(
                "bad phrases_per_description range {:?}",
                cfg.phrases_per_description
            ),
        });
    }
    let mut descriptions = Vec::new();
    for (scene_index, scene) in scenes.iter().enumerate() {
        let inventory = scene_inventory(cfg, scene_index)?;
        let mut by_category: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for (category, id) in &inventory {
            by_category.entry(category).or_default().push(*id);
        }

        for j in 0..cfg.descriptions_per_scene {
            let mut rng = stream_rng(
                cfg.seed,
                "text",
                (scene_index * cfg.descriptions_per_scene + j) as u64,
            );
            let phrase_count = inclusive_range(&mut rng, cfg.phrases_per_description);
            let mut text = String::from("find");
            for p in 0..phrase_count {
                if p > 0 {
                    let relation = &cfg.relations[rng.gen_range(0..cfg.relations.len())];
                    let _ = write!(text, " {relation}");
                }
                // Pick a category; a multi-instance category sometimes
                // yields a plural phrase over every instance.
                let categories: Vec<&str> = by_category.keys().copied().collect();
                let category = categories[rng.gen_range(0..categories.len())];
                let ids = &by_category[category];
                if ids.len() > 1 && rng.gen_bool(0.5) {
                    let id_list = ids
                        .iter()
                        .map(u32::to_string)
                        .collect::<Vec<_>>()
                        .join(",");
                    let _ = write!(text, " [the {category}s]({id_list})");
                } else {
                    let id = ids[rng.gen_range(0..ids.len())];
                    let _ = write!(text, " [the {category}]({id})");
                }
            }
            if rng.gen_bool(cfg.long_text_fraction.clamp(0.0, 1.0)) {
                let mut padding_index = 0usize;
                while text.split_whitespace().count() <= 50 + phrase_count {
                    let _ = write!(text, " {}", LONG_PADDING[padding_index % LONG_PADDING.len()]);
                    padding_index += 1;
                }
            }
            let (tokens, phrases) = parse_tagged_text(&text)
                .expect("generated tagged text is always well-formed");
            descriptions.push(AnnotatedDescription {
                description_id: format!("{}-d{j:02}", scene.scene_id),
                scene_id: scene.scene_id.clone(),
                tokens,
                phrases,
            });
        }
    }
    Ok(descriptions)
}

/// Pluggable stand-ins for the pretrained point and text backbones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureProvider {
    /// Per-point features from position, color, and local neighborhood
    /// statistics, randomly projected to `dims`.
    GeometricPointFeatures { dims: usize, seed: u64 },
    /// Per-token pseudo-random unit vectors from a stable hash of the
    /// token string.
    HashedTokenFeatures { dims: usize, seed: u64 },
    /// Feature tables read from disk, keyed by scene ID.
    FileLoaded { dir: PathBuf, dims: usize },
}

impl FeatureProvider {
    fn name(&self) -> &'static str {
        match self {
            Self::GeometricPointFeatures { .. } => "geometric-point-features",
            Self::HashedTokenFeatures { .. } => "hashed-token-features",
            Self::FileLoaded { .. } => "file-loaded",
        }
    }
}

const NEIGHBORHOOD_K: usize = 8;

fn geometric_base_features(scene: &Scene) -> Array2<f64> {
    let n = scene.len();
    let mut centroid = [0.0f64; 3];
    for p in &scene.points {
        for (c, v) in centroid.iter_mut().zip(&p.position) {
            *c += v;
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }

    // 10 base dims: centered xyz, rgb, mean offset to the k nearest
    // neighbors, mean neighbor distance.
    let mut base = Array2::zeros((n, 10));
    for i in 0..n {
        let mut distances: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2: f64 = scene.points[i]
                    .position
                    .iter()
                    .zip(&scene.points[j].position)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                (d2, j)
            })
            .collect();
        distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let neighbors = &distances[..NEIGHBORHOOD_K.min(distances.len())];

        let mut mean_offset = [0.0f64; 3];
        let mut mean_distance = 0.0;
        for &(d2, j) in neighbors {
            for (o, (a, b)) in mean_offset
                .iter_mut()
                .zip(scene.points[j].position.iter().zip(&scene.points[i].position))
            {
                *o += a - b;
            }
            mean_distance += d2.sqrt();
        }
        let k = neighbors.len().max(1) as f64;
        for axis in 0..3 {
            base[(i, axis)] = scene.points[i].position[axis] - centroid[axis];
            base[(i, 3 + axis)] = scene.points[i].color[axis];
            base[(i, 6 + axis)] = mean_offset[axis] / k;
        }
        base[(i, 9)] = mean_distance / k;
    }
    base
}

/// Per-point features of a scene, `N_p x dims`.
pub fn point_features(scene: &Scene, provider: &FeatureProvider) -> Result<FeatureMatrix, SynthError> {
    match provider {
        FeatureProvider::GeometricPointFeatures { dims, seed } => {
            let base = geometric_base_features(scene);
            let mut rng = stream_rng(*seed, "point-projection", 0);
            let projection = Array2::from_shape_fn((base.ncols(), *dims), |_| {
                rng.gen_range(-1.0..1.0) / (base.ncols() as f64).sqrt()
            });
            Ok(base.dot(&projection))
        }
        FeatureProvider::FileLoaded { dir, dims } => {
            let table = load_feature_table(dir, &scene.scene_id)?;
            if table.nrows() != scene.len() || table.ncols() != *dims {
                return Err(SynthError::MalformedFeatureTable {
                    path: feature_table_path(dir, &scene.scene_id).display().to_string(),
                    message: format!(
                        "table is {:?}, scene needs {} x {dims}",
                        table.dim(),
                        scene.len()
                    ),
                });
            }
            Ok(table)
        }
        FeatureProvider::HashedTokenFeatures { .. } => Err(SynthError::UnsupportedProvider {
            provider: provider.name(),
            requested: "point features",
        }),
    }
}

/// Stable pseudo-random unit vector for one token.
fn token_vector(token: &str, dims: usize, seed: u64) -> Vec<f64> {
    let mut key = Vec::new();
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(token.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&key));
    // Box-Muller keeps this independent of distribution-crate internals.
    let mut values: Vec<f64> = Vec::with_capacity(dims);
    while values.len() < dims {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        values.push(radius * angle.cos());
        if values.len() < dims {
            values.push(radius * angle.sin());
        }
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    values.iter().map(|v| v / norm).collect()
}

const CLS_TOKEN: &str = "<cls>";
const END_TOKEN: &str = "<end>";

/// Token features `(L+2) x dims`: a fixed [CLS] row, one row per token,
/// and a fixed end row. The same token always maps to the same row.
pub fn token_features(
    tokens: &[String],
    provider: &FeatureProvider,
) -> Result<FeatureMatrix, SynthError> {
    let FeatureProvider::HashedTokenFeatures { dims, seed } = provider else {
        return Err(SynthError::UnsupportedProvider {
            provider: provider.name(),
            requested: "token features",
        });
    };
    let mut out = Array2::zeros((tokens.len() + 2, *dims));
    let mut set_row = |row: usize, token: &str| {
        for (c, v) in token_vector(token, *dims, *seed).into_iter().enumerate() {
            out[(row, c)] = v;
        }
    };
    set_row(0, CLS_TOKEN);
    for (i, token) in tokens.iter().enumerate() {
        set_row(i + 1, token);
    }
    set_row(tokens.len() + 1, END_TOKEN);
    Ok(out)
}

fn feature_table_path(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join(format!("{scene_id}.features"))
}

/// Write a feature table: header `# features <scene_id> rows=<n> cols=<c>`
/// then one whitespace-separated row per line.
pub fn save_feature_table(
    features: &FeatureMatrix,
    scene_id: &str,
    dir: &Path,
) -> Result<(), SynthError> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# features {scene_id} rows={} cols={}",
        features.nrows(),
        features.ncols()
    );
    for row in features.rows() {
        let line = row
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(out, "{line}");
    }
    let path = feature_table_path(dir, scene_id);
    fs::write(&path, out).map_err(|e| SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Read a feature table previously written by [`save_feature_table`].
pub fn load_feature_table(dir: &Path, scene_id: &str) -> Result<FeatureMatrix, SynthError> {
    let path = feature_table_path(dir, scene_id);
    if !path.exists() {
        return Err(SynthError::FeatureFileMissing {
            scene_id: scene_id.to_string(),
            dir: dir.display().to_string(),
        });
    }
    let raw = fs::read_to_string(&path).map_err(|e| SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let malformed = |message: String| SynthError::MalformedFeatureTable {
        path: path.display().to_string(),
        message,
    };
    let mut lines = raw.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (rows, cols) = match parts.as_slice() {
        ["#", "features", _id, rows, cols] => {
            let parse = |text: &str| -> Result<usize, SynthError> {
                text.split_once('=')
                    .map(|(_, v)| v)
                    .ok_or_else(|| malformed(format!("bad field {text:?}")))?
                    .parse()
                    .map_err(|e| malformed(format!("bad count {text:?}: {e}")))
            };
            (parse(rows)?, parse(cols)?)
        }
        _ => return Err(malformed(format!("bad header {header:?}"))),
    };
    let mut values = Vec::with_capacity(rows * cols);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        for field in line.split_whitespace() {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| malformed(format!("bad value {field:?}: {e}")))?,
            );
        }
    }
    if values.len() != rows * cols {
        return Err(malformed(format!(
            "expected {} values, found {}",
            rows * cols,
            values.len()
        )));
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{union_instance_mask, validate_scene};

    #[test]
    fn single_object_scene_has_one_label() {
        let cfg = SynthConfig {
            objects_per_scene: (1, 1),
            ..SynthConfig::default()
        };
        let scene = gen_scene(&cfg, 0).unwrap();
        assert_eq!(scene.instance_ids().len(), 1);
        assert!(validate_scene(&scene).is_empty());
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(gen_scene(&cfg, 3).unwrap(), gen_scene(&cfg, 3).unwrap());
        // Different indices give different scenes.
        assert_ne!(gen_scene(&cfg, 3).unwrap(), gen_scene(&cfg, 4).unwrap());
    }

    #[test]
    fn point_and_label_counts_follow_config() {
        let cfg = SynthConfig {
            objects_per_scene: (3, 3),
            points_per_object: (50, 50),
            floor_points: 0,
            ..SynthConfig::default()
        };
        let scene = gen_scene(&cfg, 0).unwrap();
        assert_eq!(scene.len(), 150);
        assert_eq!(scene.instance_ids().len(), 3);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let cfg = SynthConfig {
            objects_per_scene: (20, 20),
            ..SynthConfig::default()
        };
        assert!(matches!(
            gen_scene(&cfg, 0).unwrap_err(),
            SynthError::ConfigInfeasible { .. }
        ));
    }

    #[test]
    fn floor_points_are_unlabeled() {
        let cfg = SynthConfig {
            floor_points: 10,
            ..SynthConfig::default()
        };
        let scene = gen_scene(&cfg, 0).unwrap();
        assert_eq!(scene.instance_labels.iter().filter(|l| l.is_none()).count(), 10);
    }

    #[test]
    fn phrase_range_four_makes_every_description_complex() {
        let cfg = SynthConfig {
            phrases_per_description: (4, 4),
            ..SynthConfig::default()
        };
        let scenes = gen_scenes(&cfg).unwrap();
        let descs = gen_dataset(&cfg, &scenes).unwrap();
        assert!(!descs.is_empty());
        assert!(descs.iter().all(crate::annotation::is_complex));
    }

    #[test]
    fn long_fraction_one_pads_every_description() {
        let cfg = SynthConfig {
            long_text_fraction: 1.0,
            ..SynthConfig::default()
        };
        let scenes = gen_scenes(&cfg).unwrap();
        let descs = gen_dataset(&cfg, &scenes).unwrap();
        assert!(descs.iter().all(crate::annotation::is_long));
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let scenes = gen_scenes(&cfg).unwrap();
        assert_eq!(
            gen_dataset(&cfg, &scenes).unwrap(),
            gen_dataset(&cfg, &scenes).unwrap()
        );
    }

    #[test]
    fn every_phrase_targets_present_instances() {
        let cfg = SynthConfig {
            num_scenes: 6,
            long_text_fraction: 0.4,
            ..SynthConfig::default()
        };
        let scenes = gen_scenes(&cfg).unwrap();
        let descs = gen_dataset(&cfg, &scenes).unwrap();
        let by_id: BTreeMap<&str, &Scene> =
            scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
        for desc in &descs {
            assert!(desc.validate().is_empty(), "{:?}", desc.validate());
            let scene = by_id[desc.scene_id.as_str()];
            for phrase in &desc.phrases {
                let mask = union_instance_mask(scene, &phrase.target_ids).unwrap();
                assert!(mask.count() > 0);
            }
        }
    }

    #[test]
    fn some_phrases_target_multiple_instances() {
        let cfg = SynthConfig {
            num_scenes: 12,
            same_category_pair_fraction: 1.0,
            descriptions_per_scene: 4,
            phrases_per_description: (2, 4),
            ..SynthConfig::default()
        };
        let scenes = gen_scenes(&cfg).unwrap();
        let descs = gen_dataset(&cfg, &scenes).unwrap();
        let multi = descs
            .iter()
            .flat_map(|d| &d.phrases)
            .filter(|p| p.target_ids.len() > 1)
            .count();
        assert!(multi > 0, "expected some multi-instance phrases");
    }

    #[test]
    fn identical_points_get_identical_geometric_features() {
        let mut scene = gen_scene(&SynthConfig::default(), 0).unwrap();
        // Duplicate point 0 exactly at the end.
        scene.points.push(scene.points[0]);
        scene.instance_labels.push(scene.instance_labels[0]);
        let provider = FeatureProvider::GeometricPointFeatures { dims: 16, seed: 1 };
        let features = point_features(&scene, &provider).unwrap();
        let last = features.nrows() - 1;
        for c in 0..features.ncols() {
            assert!((features[(0, c)] - features[(last, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn geometric_features_have_requested_width() {
        let scene = gen_scene(&SynthConfig::default(), 1).unwrap();
        let provider = FeatureProvider::GeometricPointFeatures { dims: 16, seed: 1 };
        let features = point_features(&scene, &provider).unwrap();
        assert_eq!(features.dim(), (scene.len(), 16));
        let again = point_features(&scene, &provider).unwrap();
        assert_eq!(features, again);
    }

    #[test]
    fn feature_tables_roundtrip_and_validate() {
        let dir = tempfile::TempDir::new().unwrap();
        let scene = gen_scene(&SynthConfig::default(), 2).unwrap();
        let provider = FeatureProvider::GeometricPointFeatures { dims: 8, seed: 3 };
        let features = point_features(&scene, &provider).unwrap();
        save_feature_table(&features, &scene.scene_id, dir.path()).unwrap();

        let loaded = FeatureProvider::FileLoaded {
            dir: dir.path().to_path_buf(),
            dims: 8,
        };
        let from_file = point_features(&scene, &loaded).unwrap();
        assert_eq!(features, from_file);

        let missing = FeatureProvider::FileLoaded {
            dir: dir.path().to_path_buf(),
            dims: 8,
        };
        let other = gen_scene(&SynthConfig::default(), 3).unwrap();
        assert!(matches!(
            point_features(&other, &missing).unwrap_err(),
            SynthError::FeatureFileMissing { .. }
        ));
    }

    #[test]
    fn repeated_tokens_share_feature_rows() {
        let provider = FeatureProvider::HashedTokenFeatures { dims: 12, seed: 5 };
        let tokens: Vec<String> = ["the", "chair", "near", "the", "table"]
            .map(String::from)
            .to_vec();
        let features = token_features(&tokens, &provider).unwrap();
        assert_eq!(features.dim(), (7, 12));
        // "the" at positions 0 and 3 -> rows 1 and 4.
        for c in 0..12 {
            assert_eq!(features[(1, c)], features[(4, c)]);
        }
        // Unit rows.
        for row in features.rows() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_token_list_yields_special_rows_only() {
        let provider = FeatureProvider::HashedTokenFeatures { dims: 6, seed: 5 };
        let features = token_features(&[], &provider).unwrap();
        assert_eq!(features.nrows(), 2);
        // The two specials differ.
        let distance: f64 = (0..6)
            .map(|c| (features[(0, c)] - features[(1, c)]).powi(2))
            .sum();
        assert!(distance > 1e-6);
    }

    #[test]
    fn providers_reject_wrong_domains() {
        let token_provider = FeatureProvider::HashedTokenFeatures { dims: 4, seed: 0 };
        let scene = gen_scene(&SynthConfig::default(), 0).unwrap();
        assert!(matches!(
            point_features(&scene, &token_provider).unwrap_err(),
            SynthError::UnsupportedProvider { .. }
        ));
        let point_provider = FeatureProvider::GeometricPointFeatures { dims: 4, seed: 0 };
        assert!(matches!(
            token_features(&[], &point_provider).unwrap_err(),
            SynthError::UnsupportedProvider { .. }
        ));
    }

    #[test]
    fn pooled_features_separate_objects() {
        // Different objects' pooled rows must differ by more than the
        // spread of pooled rows within one object.
        use crate::superpoint::{oversegment, sp_pool, SuperpointConfig};
        let cfg = SynthConfig {
            objects_per_scene: (3, 3),
            points_per_object: (40, 40),
            ..SynthConfig::default()
        };
        let scene = gen_scene(&cfg, 0).unwrap();
        let provider = FeatureProvider::GeometricPointFeatures { dims: 16, seed: 7 };
        let features = point_features(&scene, &provider).unwrap();
        let sp_cfg = SuperpointConfig {
            target_max_superpoints: Some(12),
            ..SuperpointConfig::default()
        };
        let part = oversegment(&scene, &sp_cfg).unwrap();
        let pooled = sp_pool(&features, &part).unwrap();

        // Majority object per superpoint.
        let mut owner = vec![BTreeMap::<u32, usize>::new(); part.num_superpoints()];
        for (i, &s) in part.assignment().iter().enumerate() {
            if let Some(label) = scene.instance_labels[i] {
                *owner[s].entry(label).or_insert(0) += 1;
            }
        }
        let owners: Vec<u32> = owner
            .iter()
            .map(|counts| *counts.iter().max_by_key(|(_, &n)| n).unwrap().0)
            .collect();

        let distance = |a: usize, b: usize| -> f64 {
            (0..pooled.ncols())
                .map(|c| (pooled[(a, c)] - pooled[(b, c)]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut max_within = 0.0f64;
        let mut min_between = f64::INFINITY;
        for a in 0..owners.len() {
            for b in (a + 1)..owners.len() {
                let d = distance(a, b);
                if owners[a] == owners[b] {
                    max_within = max_within.max(d);
                } else {
                    min_between = min_between.min(d);
                }
            }
        }
        assert!(
            min_between > max_within,
            "between {min_between} vs within {max_within}"
        );
    }
}
