//! Loss suite and trainer: BCE + Dice mask losses, the auxiliary score
//! regression, the per-layer supervised total, exact reverse-mode
//! gradients, and a seeded deterministic optimization loop with a stepped
//! learning-rate decay.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::AnnotatedDescription;
use crate::autodiff::Tape;
use crate::losses;
use crate::mask::{point_iou, union_instance_mask, MaskError, PointMask, Scene};
use crate::model::{
    build_decoder_graph, forward, predict_masks, register_state, ForwardTrace, ModelConfig,
    ModelError, ModelState,
};
use crate::superpoint::{pool_gt_mask, project_features, SuperpointError, SuperpointPartition};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("training diverged: loss is not finite at step {step}")]
    DivergedLoss { step: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Superpoint(#[from] SuperpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

fn shape_mismatch(context: impl Into<String>) -> TrainError {
    TrainError::ShapeMismatch {
        context: context.into(),
    }
}

/// Loss weights and supervision layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_score: f64,
    /// Supervise every layer's masks (true) or only the final layer.
    pub supervise_all_layers: bool,
    /// Positive-fraction threshold when pooling ground truth to superpoints.
    pub gt_pool_threshold: f64,
    /// Dice smoothing term.
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            lambda_score: 0.5,
            supervise_all_layers: true,
            gt_pool_threshold: 0.5,
            dice_eps: 1.0,
        }
    }
}

/// Per-layer loss components of one description or batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub bce: f64,
    pub dice: f64,
    pub score: f64,
}

/// Weighted per-layer components and their total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// One entry per supervised layer, in layer order.
    pub layers: Vec<LayerLoss>,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted_total(layers: &[LayerLoss], cfg: &LossConfig) -> f64 {
        layers
            .iter()
            .map(|l| cfg.lambda_bce * l.bce + cfg.lambda_dice * l.dice + cfg.lambda_score * l.score)
            .sum()
    }
}

/// Optimization schedule; the learning rate halves (by `decay_rate`) at
/// each epoch listed in `decay_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional hard cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            decay_epochs: vec![26, 34, 42],
            decay_rate: 0.5,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            max_steps: None,
        }
    }
}

/// Learning rate at an epoch: the base rate decayed once per listed epoch
/// that has been reached. A pure function of the epoch index.
pub fn learning_rate_at(schedule: &TrainSchedule, epoch: usize) -> f64 {
    let decays = schedule.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    schedule.base_lr * schedule.decay_rate.powi(decays as i32)
}

/// Mean binary cross-entropy of supervised logit rows against {0,1} rows.
pub fn bce_loss(logits: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, TrainError> {
    if logits.dim() != gt.dim() {
        return Err(shape_mismatch(format!(
            "bce shapes {:?} vs {:?}",
            logits.dim(),
            gt.dim()
        )));
    }
    Ok(losses::bce_with_logits(logits, gt))
}

/// Dice loss of supervised logit rows, averaged over rows.
pub fn dice_loss(logits: &Array2<f64>, gt: &Array2<f64>, eps: f64) -> Result<f64, TrainError> {
    if logits.dim() != gt.dim() {
        return Err(shape_mismatch(format!(
            "dice shapes {:?} vs {:?}",
            logits.dim(),
            gt.dim()
        )));
    }
    Ok(losses::dice_with_logits(logits, gt, eps))
}

/// IoU of each binarized logit row against its ground-truth row; the
/// score head regresses onto these.
fn row_ious(logits: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> Array2<f64> {
    let mut out = Array2::zeros((logits.nrows(), 1));
    for r in 0..logits.nrows() {
        let mut intersection = 0usize;
        let mut union = 0usize;
        for c in 0..logits.ncols() {
            let predicted = logits[(r, c)] > threshold;
            let actual = gt[(r, c)] > 0.5;
            union += usize::from(predicted || actual);
            intersection += usize::from(predicted && actual);
        }
        out[(r, 0)] = if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        };
    }
    out
}

/// Mean squared error between predicted quality scores and the achieved
/// IoU of each binarized logit row (computed without gradient flow).
pub fn score_loss(
    predicted: &Array2<f64>,
    logits: &Array2<f64>,
    gt: &Array2<f64>,
    binarize_threshold: f64,
) -> Result<f64, TrainError> {
    if predicted.nrows() != logits.nrows() || predicted.ncols() != 1 {
        return Err(shape_mismatch(format!(
            "scores {:?} must be one column aligned with {} logit rows",
            predicted.dim(),
            logits.nrows()
        )));
    }
    if logits.dim() != gt.dim() {
        return Err(shape_mismatch(format!(
            "score loss shapes {:?} vs {:?}",
            logits.dim(),
            gt.dim()
        )));
    }
    Ok(losses::mse(predicted, &row_ious(logits, gt, binarize_threshold)))
}

/// Which query rows a description supervises and their ground-truth
/// superpoint rows, in phrase order.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTarget {
    /// Query row per phrase: `head_index + 1`, or 0 for sentence sentinels.
    pub rows: Vec<usize>,
    /// `k x N_s` matrix of 0/1 ground-truth rows.
    pub gt_rows: Array2<f64>,
}

/// Pool each phrase's ground-truth point mask to superpoint level and pick
/// its supervised query row.
pub fn supervision_target(
    desc: &AnnotatedDescription,
    part: &SuperpointPartition,
    gt_point_masks: &[PointMask],
    gt_pool_threshold: f64,
) -> Result<SupervisionTarget, TrainError> {
    if gt_point_masks.len() != desc.phrases.len() {
        return Err(shape_mismatch(format!(
            "{} ground-truth masks for {} phrases",
            gt_point_masks.len(),
            desc.phrases.len()
        )));
    }
    let n_s = part.num_superpoints();
    let mut rows = Vec::with_capacity(desc.phrases.len());
    let mut gt_rows = Array2::zeros((desc.phrases.len(), n_s));
    for (i, (phrase, mask)) in desc.phrases.iter().zip(gt_point_masks).enumerate() {
        let row = if phrase.is_sentence_level {
            0
        } else {
            if phrase.head_index >= desc.token_len() {
                return Err(TrainError::Model(ModelError::IndexOutOfRange {
                    head: phrase.head_index,
                    tokens: desc.token_len(),
                }));
            }
            phrase.head_index + 1
        };
        rows.push(row);
        let pooled = pool_gt_mask(mask, part, gt_pool_threshold)?;
        for (s, &bit) in pooled.bits.iter().enumerate() {
            gt_rows[(i, s)] = f64::from(bit);
        }
    }
    Ok(SupervisionTarget { rows, gt_rows })
}

fn supervised_layer_indices(num_layers: usize, cfg: &LossConfig) -> Vec<usize> {
    if cfg.supervise_all_layers {
        (0..=num_layers).collect()
    } else {
        vec![num_layers]
    }
}

/// Per-layer supervised loss of a forward trace.
///
/// Sums `lambda_bce*BCE + lambda_dice*Dice + lambda_score*Score` over every
/// supervised layer (all of them including the initial queries, or only the
/// final layer).
pub fn total_loss(
    trace: &ForwardTrace,
    target: &SupervisionTarget,
    model_config: &ModelConfig,
    cfg: &LossConfig,
) -> Result<LossBreakdown, TrainError> {
    let mut layers = Vec::new();
    for layer in supervised_layer_indices(trace.logits.len() - 1, cfg) {
        let logits = trace.logits[layer].select(ndarray::Axis(0), &target.rows);
        let scores = trace.scores[layer].select(ndarray::Axis(0), &target.rows);
        layers.push(LayerLoss {
            bce: bce_loss(&logits, &target.gt_rows)?,
            dice: dice_loss(&logits, &target.gt_rows, cfg.dice_eps)?,
            score: score_loss(
                &scores,
                &logits,
                &target.gt_rows,
                model_config.binarize_threshold,
            )?,
        });
    }
    let total = LossBreakdown::weighted_total(&layers, cfg);
    Ok(LossBreakdown { layers, total })
}

/// One description prepared for training: pooled superpoint features,
/// token features, the partition, and per-phrase ground-truth point masks.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub description: AnnotatedDescription,
    pub partition: SuperpointPartition,
    /// `N_s x c` pooled features.
    pub pooled: Array2<f64>,
    /// `(L+2) x e` token features.
    pub token_features: Array2<f64>,
    /// Per-phrase ground-truth point masks, in phrase order.
    pub gt_point_masks: Vec<PointMask>,
}

impl TrainItem {
    /// Assemble an item, deriving the ground-truth masks from the scene's
    /// instance labels.
    pub fn new(
        scene: &Scene,
        description: AnnotatedDescription,
        partition: SuperpointPartition,
        pooled: Array2<f64>,
        token_features: Array2<f64>,
    ) -> Result<Self, TrainError> {
        if pooled.nrows() != partition.num_superpoints() {
            return Err(shape_mismatch(format!(
                "pooled features have {} rows, partition {} superpoints",
                pooled.nrows(),
                partition.num_superpoints()
            )));
        }
        if token_features.nrows() != description.token_len() + 2 {
            return Err(shape_mismatch(format!(
                "token features have {} rows for {} tokens",
                token_features.nrows(),
                description.token_len()
            )));
        }
        let gt_point_masks = description
            .phrases
            .iter()
            .map(|phrase| union_instance_mask(scene, &phrase.target_ids))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            description,
            partition,
            pooled,
            token_features,
            gt_point_masks,
        })
    }
}

/// Gradient tensors in `ModelState::named_params` order.
pub type Gradients = Vec<(String, Array2<f64>)>;

fn build_item_loss(
    tape: &mut Tape,
    state_vars: &crate::model::StateVars,
    item: &TrainItem,
    model_config: &ModelConfig,
    cfg: &LossConfig,
) -> Result<(crate::autodiff::Var, Vec<LayerLoss>), TrainError> {
    let target = supervision_target(
        &item.description,
        &item.partition,
        &item.gt_point_masks,
        cfg.gt_pool_threshold,
    )?;

    let pooled = tape.input(item.pooled.clone());
    let tokens = tape.input(item.token_features.clone());
    let f_v = tape.matmul(pooled, state_vars.visual_proj);
    let f_sp = tape.matmul(pooled, state_vars.superpoint_proj);
    let trace = build_decoder_graph(tape, model_config, state_vars, tokens, f_v, f_sp);

    let mut total: Option<crate::autodiff::Var> = None;
    let mut layers = Vec::new();
    for layer in supervised_layer_indices(trace.logits.len() - 1, cfg) {
        let logits = tape.select_rows(trace.logits[layer], &target.rows);
        let scores = tape.select_rows(trace.scores[layer], &target.rows);
        let bce = tape.bce_with_logits(logits, target.gt_rows.clone());
        let dice = tape.dice_with_logits(logits, target.gt_rows.clone(), cfg.dice_eps);
        // Score targets are detached: the achieved IoUs enter as constants.
        let iou_targets = row_ious(
            tape.value(logits),
            &target.gt_rows,
            model_config.binarize_threshold,
        );
        let score = tape.mse_against(scores, iou_targets);
        layers.push(LayerLoss {
            bce: tape.scalar(bce),
            dice: tape.scalar(dice),
            score: tape.scalar(score),
        });

        for (var, lambda) in [
            (bce, cfg.lambda_bce),
            (dice, cfg.lambda_dice),
            (score, cfg.lambda_score),
        ] {
            let weighted = tape.scale(var, lambda);
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted),
                None => weighted,
            });
        }
    }
    Ok((total.expect("at least one supervised layer"), layers))
}

/// Reverse-mode gradients of the total loss for one description, with the
/// loss breakdown. Gradients cover every parameter in the state.
pub fn gradients(
    model_config: &ModelConfig,
    state: &ModelState,
    item: &TrainItem,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients), TrainError> {
    let mut tape = Tape::new();
    let state_vars = register_state(&mut tape, state);
    let (total_var, layers) = build_item_loss(&mut tape, &state_vars, item, model_config, cfg)?;
    let grads = tape.backward(total_var);

    let mut out = Vec::with_capacity(state_vars.ordered.len());
    for ((name, var), (check_name, tensor)) in
        state_vars.ordered.iter().zip(state.named_params())
    {
        debug_assert_eq!(name, &check_name);
        let grad = grads.get(*var, tensor.dim());
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
        out.push((name.clone(), grad));
    }
    let total = tape.scalar(total_var);
    Ok((
        LossBreakdown {
            layers,
            total,
        },
        out,
    ))
}

/// Available parameter-update rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    GradientDescent,
}

/// Stateful optimizer over the model's named parameters.
pub struct Optimizer {
    kind: OptimizerKind,
    step: usize,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, state: &ModelState) -> Self {
        let shapes: Vec<_> = state
            .named_params()
            .iter()
            .map(|(_, p)| Array2::zeros(p.dim()))
            .collect();
        Self {
            kind,
            step: 0,
            first_moment: shapes.clone(),
            second_moment: shapes,
        }
    }

    /// Apply one update. Gradients must be in `named_params` order.
    pub fn step(&mut self, state: &mut ModelState, grads: &Gradients, lr: f64) {
        self.step += 1;
        let mut params = state.named_params_mut();
        match self.kind {
            OptimizerKind::GradientDescent => {
                for ((_, param), (_, grad)) in params.iter_mut().zip(grads) {
                    **param -= &(grad * lr);
                }
            }
            OptimizerKind::Adam => {
                let bias1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                let bias2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                for (i, ((_, param), (_, grad))) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    m.zip_mut_with(grad, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
                    v.zip_mut_with(grad, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
                    ndarray::Zip::from(&mut **param)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|p, &m, &v| {
                            let m_hat = m / bias1;
                            let v_hat = v / bias2;
                            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        });
                }
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub lr: f64,
    pub bce: f64,
    pub dice: f64,
    pub score: f64,
    pub total: f64,
    /// Flat mean IoU over all phrases of the training set.
    pub train_miou: f64,
}

/// Write the log as line-delimited JSON records.
pub fn save_training_log(log: &[TrainLogEntry], path: &Path) -> Result<(), TrainError> {
    let mut out = String::new();
    for entry in log {
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string(entry).expect("log serialization is infallible")
        );
    }
    fs::write(path, out).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Phrase-level mean IoU of the model on prepared items.
pub fn evaluate_train_miou(
    items: &[TrainItem],
    model_config: &ModelConfig,
    state: &ModelState,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for item in items {
        let (f_v, f_sp) =
            project_features(&item.pooled, &state.visual_proj, &state.superpoint_proj)?;
        let trace = forward(&f_v, &f_sp, &item.token_features, model_config, state)?;
        let masks = predict_masks(&trace, &item.description, &item.partition, model_config)?;
        for (mask, gt) in masks.masks.iter().zip(&item.gt_point_masks) {
            sum += point_iou(mask, gt)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok(sum / count as f64)
}

/// Train a fresh model on the prepared items.
///
/// Fully deterministic for a given (items, configs, schedule): items are
/// processed sorted by description ID, batch gradients accumulate in that
/// order, and initialization is seeded from the schedule.
pub fn train(
    items: &[TrainItem],
    model_config: &ModelConfig,
    cfg: &LossConfig,
    schedule: &TrainSchedule,
    optimizer_kind: OptimizerKind,
) -> Result<(ModelState, Vec<TrainLogEntry>), TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if schedule.batch_size == 0 {
        return Err(shape_mismatch("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[a]
            .description
            .description_id
            .cmp(&items[b].description.description_id)
    });

    let mut state = ModelState::init(model_config, schedule.seed)?;
    let mut optimizer = Optimizer::new(optimizer_kind, &state);
    let mut log = Vec::new();
    let mut steps_taken = 0usize;

    'epochs: for epoch in 0..schedule.epochs {
        let lr = learning_rate_at(schedule, epoch);
        let mut epoch_layers: Vec<LayerLoss> = Vec::new();
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;

        for chunk in order.chunks(schedule.batch_size) {
            if schedule.max_steps.is_some_and(|max| steps_taken >= max) {
                break 'epochs;
            }
            let mut accumulated: Option<Gradients> = None;
            let mut batch_total = 0.0;
            for &index in chunk {
                let (breakdown, grads) = gradients(model_config, &state, &items[index], cfg)?;
                batch_total += breakdown.total;
                if epoch_layers.is_empty() {
                    epoch_layers = breakdown.layers.clone();
                } else {
                    for (acc, layer) in epoch_layers.iter_mut().zip(&breakdown.layers) {
                        acc.bce += layer.bce;
                        acc.dice += layer.dice;
                        acc.score += layer.score;
                    }
                }
                accumulated = Some(match accumulated {
                    None => grads,
                    Some(mut acc) => {
                        for ((_, total), (_, grad)) in acc.iter_mut().zip(&grads) {
                            *total += grad;
                        }
                        acc
                    }
                });
            }
            let mut grads = accumulated.expect("chunks are non-empty");
            let scale = 1.0 / chunk.len() as f64;
            for (_, grad) in &mut grads {
                *grad *= scale;
            }
            batch_total *= scale;
            if !batch_total.is_finite() {
                return Err(TrainError::DivergedLoss { step: steps_taken });
            }
            optimizer.step(&mut state, &grads, lr);
            steps_taken += 1;
            epoch_steps += 1;
            epoch_total += batch_total;
        }

        if epoch_steps == 0 {
            break;
        }
        let samples = (epoch_steps * schedule.batch_size).min(order.len()) as f64;
        for layer in &mut epoch_layers {
            layer.bce /= samples;
            layer.dice /= samples;
            layer.score /= samples;
        }
        let train_miou = evaluate_train_miou(items, model_config, &state)?;
        let (bce, dice, score) = epoch_layers.iter().fold((0.0, 0.0, 0.0), |acc, l| {
            (acc.0 + l.bce, acc.1 + l.dice, acc.2 + l.score)
        });
        log.push(TrainLogEntry {
            epoch,
            lr,
            bce,
            dice,
            score,
            total: epoch_total / epoch_steps as f64,
            train_miou,
        });
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::PhraseTarget;
    use crate::mask::ScenePoint;
    use ndarray::array;

    fn toy_model_config() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            token_dim: 6,
            pooled_dim: 4,
            num_layers: 2,
            num_heads: 2,
            ffn_hidden: 16,
            binarize_threshold: 0.0,
        }
    }

    /// A 6-point scene with two 3-point instances and a matching
    /// single-phrase description.
    fn toy_item(model_config: &ModelConfig) -> TrainItem {
        let points = (0..6)
            .map(|i| ScenePoint {
                position: [i as f64 * 0.2, 0.0, 0.0],
                color: [0.5, 0.5, 0.5],
            })
            .collect();
        let labels = vec![Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)];
        let scene = Scene::new("s", points, labels);
        let partition = SuperpointPartition::new("s", vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let description = AnnotatedDescription {
            description_id: "d0".into(),
            scene_id: "s".into(),
            tokens: vec!["the".into(), "box".into()],
            phrases: vec![PhraseTarget::new((0, 1), [1].into())],
        };
        let pooled = Array2::from_shape_fn((2, model_config.pooled_dim), |(r, c)| {
            (r as f64 - 0.5) * (c as f64 + 1.0) * 0.3
        });
        let token_features = Array2::from_shape_fn((4, model_config.token_dim), |(r, c)| {
            ((r * 3 + c) % 5) as f64 * 0.2 - 0.4
        });
        TrainItem::new(&scene, description, partition, pooled, token_features).unwrap()
    }

    #[test]
    fn learning_rate_follows_decay_schedule() {
        let schedule = TrainSchedule::default();
        assert_eq!(learning_rate_at(&schedule, 0), 1e-4);
        assert_eq!(learning_rate_at(&schedule, 25), 1e-4);
        assert_eq!(learning_rate_at(&schedule, 26), 5e-5);
        assert_eq!(learning_rate_at(&schedule, 34), 2.5e-5);
        assert_eq!(learning_rate_at(&schedule, 42), 1.25e-5);
        assert_eq!(learning_rate_at(&schedule, 100), 1.25e-5);
    }

    #[test]
    fn bce_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(&Array2::zeros((2, 2)), &array![[1.0, 0.0], [0.0, 1.0]]).unwrap() - ln2).abs() < 1e-12);
        assert!(bce_loss(&array![[20.0, -20.0]], &array![[1.0, 0.0]]).unwrap() < 1e-8);
        assert!((bce_loss(&array![[1.0]], &array![[1.0]]).unwrap() - 0.3132616875182228).abs() < 1e-12);
        assert!(bce_loss(&Array2::zeros((1, 2)), &Array2::zeros((2, 1))).is_err());
    }

    #[test]
    fn dice_examples() {
        let logits = Array2::zeros((1, 4));
        let gt = array![[1.0, 1.0, 0.0, 0.0]];
        assert!((dice_loss(&logits, &gt, 1.0).unwrap() - 0.4).abs() < 1e-12);
        let empty_gt = Array2::zeros((1, 50));
        let confident = Array2::from_elem((1, 50), -20.0);
        assert!(dice_loss(&confident, &empty_gt, 1.0).unwrap() < 1e-6);
    }

    #[test]
    fn score_loss_examples() {
        // Binarized row [+, -] vs gt [1, 0]: IoU 1. Perfect score -> 0.
        let logits = array![[5.0, -5.0]];
        let gt = array![[1.0, 0.0]];
        assert_eq!(score_loss(&array![[1.0]], &logits, &gt, 0.0).unwrap(), 0.0);
        // Predicted 1.0 against achieved IoU 0 -> 1.0.
        let wrong = array![[-5.0, 5.0]];
        assert_eq!(score_loss(&array![[1.0]], &wrong, &gt, 0.0).unwrap(), 1.0);
        // Predicted 0.3 against achieved 0.7: not constructible from a
        // single row's IoU, so check the squared error directly on a
        // 10-superpoint row with IoU 0.7.
        let mut row = Array2::from_elem((1, 10), 5.0);
        for c in 7..10 {
            row[(0, c)] = -5.0;
        }
        let gt10 = Array2::from_elem((1, 10), 1.0);
        // predicted mask has 7 of 10, gt all 10 -> IoU 0.7
        assert!((score_loss(&array![[0.3]], &row, &gt10, 0.0).unwrap() - 0.16).abs() < 1e-12);
    }

    #[test]
    fn empty_and_empty_rows_score_iou_one() {
        let logits = array![[-5.0, -5.0]];
        let gt = array![[0.0, 0.0]];
        assert_eq!(score_loss(&array![[1.0]], &logits, &gt, 0.0).unwrap(), 0.0);
    }

    fn hand_trace(num_layers: usize) -> (ForwardTrace, SupervisionTarget) {
        // One supervised row (head 0 -> query row 1), 2 superpoints.
        let logits = array![[0.0, 0.0], [20.0, -20.0], [0.0, 0.0], [0.0, 0.0]];
        let scores = Array2::from_elem((4, 1), 0.5);
        let trace = ForwardTrace {
            queries: vec![Array2::zeros((4, 2)); num_layers + 1],
            logits: vec![logits; num_layers + 1],
            scores: vec![scores; num_layers + 1],
            attention: vec![],
        };
        let target = SupervisionTarget {
            rows: vec![1],
            gt_rows: array![[1.0, 0.0]],
        };
        (trace, target)
    }

    #[test]
    fn total_loss_matches_hand_computation() {
        let model_config = toy_model_config();
        let cfg = LossConfig::default();
        let (trace, target) = hand_trace(2);
        let breakdown = total_loss(&trace, &target, &model_config, &cfg).unwrap();
        assert_eq!(breakdown.layers.len(), 3);
        // Per layer: bce ~ 0 (saturated), dice = 1 - 3/3 = 0 up to the
        // sigmoid tail, score = (0.5 - 1)^2 = 0.25 weighted by 0.5.
        // Hand total: 3 * 0.125 = 0.375 plus saturated tails.
        assert!((breakdown.total - 0.375).abs() < 1e-6, "{}", breakdown.total);
    }

    #[test]
    fn zero_lambdas_zero_the_loss_and_gradients() {
        let model_config = toy_model_config();
        let state = ModelState::init(&model_config, 3).unwrap();
        let item = toy_item(&model_config);
        let cfg = LossConfig {
            lambda_bce: 0.0,
            lambda_dice: 0.0,
            lambda_score: 0.0,
            ..LossConfig::default()
        };
        let (breakdown, grads) = gradients(&model_config, &state, &item, &cfg).unwrap();
        assert_eq!(breakdown.total, 0.0);
        for (name, grad) in &grads {
            assert!(grad.iter().all(|&g| g == 0.0), "{name} has nonzero gradient");
        }
    }

    #[test]
    fn final_layer_only_supervision_has_one_layer() {
        let model_config = toy_model_config();
        let cfg = LossConfig {
            supervise_all_layers: false,
            ..LossConfig::default()
        };
        let (trace, target) = hand_trace(2);
        let breakdown = total_loss(&trace, &target, &model_config, &cfg).unwrap();
        assert_eq!(breakdown.layers.len(), 1);
    }

    #[test]
    fn score_head_gradients_die_without_score_loss() {
        let model_config = toy_model_config();
        let state = ModelState::init(&model_config, 4).unwrap();
        let item = toy_item(&model_config);
        let cfg = LossConfig {
            lambda_score: 0.0,
            ..LossConfig::default()
        };
        let (_, grads) = gradients(&model_config, &state, &item, &cfg).unwrap();
        for (name, grad) in &grads {
            let dead = name.starts_with("score_hidden") || name.starts_with("score_out");
            if dead {
                assert!(grad.iter().all(|&g| g == 0.0), "{name} should be dead");
            }
        }
        // The mask path must still be alive.
        let (_, w1_grad) = &grads[0];
        assert!(w1_grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn tape_loss_equals_plain_loss() {
        let model_config = toy_model_config();
        let state = ModelState::init(&model_config, 5).unwrap();
        let item = toy_item(&model_config);
        let cfg = LossConfig::default();

        let (breakdown, _) = gradients(&model_config, &state, &item, &cfg).unwrap();

        let (f_v, f_sp) =
            project_features(&item.pooled, &state.visual_proj, &state.superpoint_proj).unwrap();
        let trace = forward(&f_v, &f_sp, &item.token_features, &model_config, &state).unwrap();
        let target = supervision_target(
            &item.description,
            &item.partition,
            &item.gt_point_masks,
            cfg.gt_pool_threshold,
        )
        .unwrap();
        let plain = total_loss(&trace, &target, &model_config, &cfg).unwrap();
        assert!((breakdown.total - plain.total).abs() < 1e-12);
        for (a, b) in breakdown.layers.iter().zip(&plain.layers) {
            assert!((a.bce - b.bce).abs() < 1e-12);
            assert!((a.dice - b.dice).abs() < 1e-12);
            assert!((a.score - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_spot_check() {
        let model_config = toy_model_config();
        let mut state = ModelState::init(&model_config, 6).unwrap();
        let item = toy_item(&model_config);
        let cfg = LossConfig::default();
        let (_, grads) = gradients(&model_config, &state, &item, &cfg).unwrap();

        let h = 1e-5;
        // Spot-check a few parameters across groups; the acceptance suite
        // sweeps all of them.
        for &(param_index, flat) in &[(0usize, 0usize), (2, 3), (5, 1), (40, 0)] {
            let (name, analytic) = {
                let (name, grad) = &grads[param_index];
                (name.clone(), grad.iter().copied().nth(flat).unwrap())
            };
            let mut eval = |delta: f64| -> f64 {
                {
                    let mut params = state.named_params_mut();
                    let tensor = &mut params[param_index].1;
                    let cols = tensor.ncols();
                    tensor[(flat / cols, flat % cols)] += delta;
                }
                let (breakdown, _) = gradients(&model_config, &state, &item, &cfg).unwrap();
                {
                    let mut params = state.named_params_mut();
                    let tensor = &mut params[param_index].1;
                    let cols = tensor.ncols();
                    tensor[(flat / cols, flat % cols)] -= delta;
                }
                breakdown.total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-6 + 1e-4 * fd.abs().max(analytic.abs()),
                "{name}[{flat}]: fd={fd} analytic={analytic}"
            );
        }
    }

    #[test]
    fn zero_epochs_leave_state_at_init() {
        let model_config = toy_model_config();
        let item = toy_item(&model_config);
        let schedule = TrainSchedule {
            epochs: 0,
            seed: 9,
            ..TrainSchedule::default()
        };
        let (state, log) = train(
            &[item],
            &model_config,
            &LossConfig::default(),
            &schedule,
            OptimizerKind::Adam,
        )
        .unwrap();
        assert!(log.is_empty());
        assert_eq!(state, ModelState::init(&model_config, 9).unwrap());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let model_config = toy_model_config();
        let item = toy_item(&model_config);
        let schedule = TrainSchedule {
            epochs: 3,
            batch_size: 1,
            seed: 12,
            base_lr: 1e-3,
            ..TrainSchedule::default()
        };
        let run = || {
            train(
                &[item.clone()],
                &model_config,
                &LossConfig::default(),
                &schedule,
                OptimizerKind::Adam,
            )
            .unwrap()
        };
        let (state_a, log_a) = run();
        let (state_b, log_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(state_a, state_b);
        assert_eq!(log_a.len(), 3);
    }

    #[test]
    fn max_steps_caps_optimization() {
        let model_config = toy_model_config();
        let item = toy_item(&model_config);
        let schedule = TrainSchedule {
            epochs: 10,
            batch_size: 1,
            max_steps: Some(2),
            ..TrainSchedule::default()
        };
        let (_, log) = train(
            &[item.clone(), item],
            &model_config,
            &LossConfig::default(),
            &schedule,
            OptimizerKind::GradientDescent,
        )
        .unwrap();
        // Two items, batch 1 -> 2 steps per epoch; the cap stops after the
        // first epoch.
        assert_eq!(log.len(), 1);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn loss_components_are_nonnegative(
                seed in 0u64..500,
                lambda_bce in 0.0f64..2.0,
                lambda_dice in 0.0f64..2.0,
                lambda_score in 0.0f64..2.0,
            ) {
                let model_config = toy_model_config();
                let state = ModelState::init(&model_config, seed).unwrap();
                let item = toy_item(&model_config);
                let cfg = LossConfig {
                    lambda_bce,
                    lambda_dice,
                    lambda_score,
                    ..LossConfig::default()
                };
                let (breakdown, _) = gradients(&model_config, &state, &item, &cfg).unwrap();
                prop_assert!(breakdown.total >= 0.0);
                for layer in &breakdown.layers {
                    prop_assert!(layer.bce >= 0.0);
                    prop_assert!(layer.dice >= 0.0);
                    prop_assert!(layer.score >= 0.0);
                }
            }

            #[test]
            fn total_is_monotone_in_each_lambda(seed in 0u64..500) {
                let model_config = toy_model_config();
                let state = ModelState::init(&model_config, seed).unwrap();
                let item = toy_item(&model_config);
                let (f_v, f_sp) = project_features(
                    &item.pooled, &state.visual_proj, &state.superpoint_proj
                ).unwrap();
                let trace = forward(&f_v, &f_sp, &item.token_features, &model_config, &state).unwrap();
                let target = supervision_target(
                    &item.description, &item.partition, &item.gt_point_masks, 0.5,
                ).unwrap();
                let base = LossConfig::default();
                let total_with = |cfg: &LossConfig| {
                    total_loss(&trace, &target, &model_config, cfg).unwrap().total
                };
                let reference = total_with(&base);
                for bump in [
                    LossConfig { lambda_bce: base.lambda_bce + 1.0, ..base.clone() },
                    LossConfig { lambda_dice: base.lambda_dice + 1.0, ..base.clone() },
                    LossConfig { lambda_score: base.lambda_score + 1.0, ..base.clone() },
                ] {
                    prop_assert!(total_with(&bump) >= reference - 1e-12);
                }
            }

            #[test]
            fn lr_schedule_is_pure(epoch in 0usize..200) {
                let schedule = TrainSchedule::default();
                prop_assert_eq!(
                    learning_rate_at(&schedule, epoch),
                    learning_rate_at(&schedule, epoch)
                );
                let decays = schedule.decay_epochs.iter().filter(|&&e| e <= epoch).count();
                prop_assert_eq!(
                    learning_rate_at(&schedule, epoch),
                    schedule.base_lr * schedule.decay_rate.powi(decays as i32)
                );
            }
        }
    }
}
