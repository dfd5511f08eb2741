//! Glue from raw data (scenes + descriptions) to prepared training items
//! and evaluation records: oversegmentation (fresh or cached), feature
//! extraction, pooling, and scoring a trained model.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotatedDescription, SceneMap};
use crate::mask::{union_instance_mask, MaskError};
use crate::metrics::{evaluate, EvalRecord, MetricsError};
use crate::model::{forward, predict_masks, ModelConfig, ModelError, ModelState};
use crate::superpoint::{
    oversegment, project_features, sp_pool, SuperpointConfig, SuperpointError,
    SuperpointPartition,
};
use crate::synth::{point_features, token_features, FeatureProvider, SynthError};
use crate::training::{TrainError, TrainItem};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("description {description_id} names unknown scene {scene_id}")]
    UnknownScene {
        description_id: String,
        scene_id: String,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Superpoint(#[from] SuperpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Everything a training or evaluation run needs beyond the data files.
/// All fields have defaults, so a partial JSON config works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: crate::training::LossConfig,
    pub schedule: crate::training::TrainSchedule,
    pub superpoints: SuperpointConfig,
    pub optimizer: crate::training::OptimizerKind,
    pub point_provider: FeatureProvider,
    pub token_provider: FeatureProvider,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            point_provider: FeatureProvider::GeometricPointFeatures {
                dims: model.pooled_dim,
                seed: 0,
            },
            token_provider: FeatureProvider::HashedTokenFeatures {
                dims: model.token_dim,
                seed: 0,
            },
            loss: Default::default(),
            schedule: Default::default(),
            superpoints: SuperpointConfig {
                target_max_superpoints: Some(16),
                ..SuperpointConfig::default()
            },
            optimizer: crate::training::OptimizerKind::Adam,
            model,
        }
    }
}

/// Oversegment every scene (or take the cached partition), extract and
/// pool point features once per scene, then assemble one item per
/// description.
pub fn prepare_items(
    scenes: &SceneMap,
    descriptions: &[AnnotatedDescription],
    config: &RunConfig,
    cached_partitions: Option<&BTreeMap<String, SuperpointPartition>>,
) -> Result<Vec<TrainItem>, PipelineError> {
    struct PreparedScene {
        partition: SuperpointPartition,
        pooled: crate::superpoint::FeatureMatrix,
    }
    let mut prepared: BTreeMap<&str, PreparedScene> = BTreeMap::new();
    for desc in descriptions {
        if prepared.contains_key(desc.scene_id.as_str()) {
            continue;
        }
        let scene = scenes
            .get(&desc.scene_id)
            .ok_or_else(|| PipelineError::UnknownScene {
                description_id: desc.description_id.clone(),
                scene_id: desc.scene_id.clone(),
            })?;
        let partition = match cached_partitions.and_then(|c| c.get(&desc.scene_id)) {
            Some(partition) => partition.clone(),
            None => oversegment(scene, &config.superpoints)?,
        };
        let features = point_features(scene, &config.point_provider)?;
        let pooled = sp_pool(&features, &partition)?;
        prepared.insert(desc.scene_id.as_str(), PreparedScene { partition, pooled });
    }

    let mut items = Vec::with_capacity(descriptions.len());
    for desc in descriptions {
        let scene = &scenes[&desc.scene_id];
        let PreparedScene { partition, pooled } = &prepared[desc.scene_id.as_str()];
        let tokens = token_features(&desc.tokens, &config.token_provider)?;
        items.push(TrainItem::new(
            scene,
            desc.clone(),
            partition.clone(),
            pooled.clone(),
            tokens,
        )?);
    }
    Ok(items)
}

/// Score a model over prepared items: full forward, mask prediction, and
/// point-level IoU per phrase.
pub fn evaluate_items(
    items: &[TrainItem],
    model_config: &ModelConfig,
    state: &ModelState,
) -> Result<Vec<EvalRecord>, PipelineError> {
    let mut descriptions = Vec::with_capacity(items.len());
    let mut predictions = Vec::with_capacity(items.len());
    let mut ground_truth = Vec::with_capacity(items.len());
    for item in items {
        let (f_v, f_sp) =
            project_features(&item.pooled, &state.visual_proj, &state.superpoint_proj)?;
        let trace = forward(&f_v, &f_sp, &item.token_features, model_config, state)?;
        let masks = predict_masks(&trace, &item.description, &item.partition, model_config)?;
        descriptions.push(item.description.clone());
        predictions.push(Some(masks));
        ground_truth.push(item.gt_point_masks.clone());
    }
    Ok(evaluate(&descriptions, &predictions, &ground_truth)?)
}

/// Ground-truth point masks per description, in phrase order.
pub fn ground_truth_masks(
    scenes: &SceneMap,
    descriptions: &[AnnotatedDescription],
) -> Result<Vec<Vec<crate::mask::PointMask>>, PipelineError> {
    descriptions
        .iter()
        .map(|desc| {
            let scene = scenes
                .get(&desc.scene_id)
                .ok_or_else(|| PipelineError::UnknownScene {
                    description_id: desc.description_id.clone(),
                    scene_id: desc.scene_id.clone(),
                })?;
            desc.phrases
                .iter()
                .map(|phrase| Ok(union_instance_mask(scene, &phrase.target_ids)?))
                .collect()
        })
        .collect()
}

/// External prediction file: one JSON object per line, point indices per
/// phrase mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionLine {
    pub description_id: String,
    /// One list of positive point indices per phrase, in phrase order.
    pub masks: Vec<Vec<usize>>,
}

/// Resolve prediction lines into mask sets aligned with `descriptions`.
pub fn align_predictions(
    lines: &[PredictionLine],
    descriptions: &[AnnotatedDescription],
    scenes: &SceneMap,
) -> Result<Vec<Option<crate::mask::PhraseMaskSet>>, PipelineError> {
    let by_id: BTreeMap<&str, &PredictionLine> = lines
        .iter()
        .map(|line| (line.description_id.as_str(), line))
        .collect();
    descriptions
        .iter()
        .map(|desc| {
            let Some(line) = by_id.get(desc.description_id.as_str()) else {
                return Ok(None);
            };
            let scene = scenes
                .get(&desc.scene_id)
                .ok_or_else(|| PipelineError::UnknownScene {
                    description_id: desc.description_id.clone(),
                    scene_id: desc.scene_id.clone(),
                })?;
            let masks = line
                .masks
                .iter()
                .map(|indices| {
                    crate::mask::PointMask::from_indices(
                        scene.scene_id.clone(),
                        scene.len(),
                        indices.iter().copied(),
                    )
                })
                .collect();
            Ok(Some(crate::mask::PhraseMaskSet {
                masks,
                sentence_mask: None,
            }))
        })
        .collect()
}

/// `*.superpoints` cache files in a directory, keyed by scene ID.
pub fn load_partition_dir(
    dir: &std::path::Path,
) -> Result<BTreeMap<String, SuperpointPartition>, SuperpointError> {
    let entries = std::fs::read_dir(dir).map_err(|e| SuperpointError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "superpoints"))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for path in paths {
        let (partition, _) = crate::superpoint::load_partition(&path)?;
        out.insert(partition.scene_id().to_string(), partition);
    }
    Ok(out)
}
