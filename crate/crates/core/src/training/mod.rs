//! Staged training with protective freezing: single-frame pretraining of
//! each branch, fusion training, then temporal training with the encoders
//! frozen; plus the training-strategy ablation variants.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::GridConfig;
use crate::fusion::FusionOperator;
use crate::harness::{evaluate, generate_sequence, FrameSample, SceneConfig, ToyMetrics};
use crate::model::{
    Model, ModelConfig, ModelError, GROUP_ALIGN_ADAPTER, GROUP_ENHANCE, GROUP_FUSION, GROUP_HEAD,
    GROUP_IMAGE, GROUP_LIDAR, GROUP_TEMPORAL,
};
use crate::param::Param;
use crate::pipeline::{
    encode_window, prepare_window_maps, run_timestep, stages_from_features, stages_from_maps,
    FrameInput, GtObject, ModalityMode, PipelineError, RunOptions, StageForward, TimestepInput,
};
use crate::tensor::{Tape, Tensor, TensorError};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
/// Heatmap probabilities are clamped into (eps, 1-eps) before the logs.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("gradient for '{0}' is not finite")]
    NanGradient(String),
    #[error("schedule invalid: {0}")]
    Schedule(String),
    #[error("training data has no usable windows (need {need} frames per window)")]
    NoWindows { need: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Harness(#[from] crate::harness::HarnessError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub heatmap: f64,
    pub boxes: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            heatmap: 1.0,
            boxes: 0.25,
        }
    }
}

/// One optimizer step's loss terms; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub stage: usize,
    pub heatmap_loss: f64,
    pub box_loss: f64,
    pub total: f64,
}

/// Ground truth rendered as per-class center cells on the grid.
pub fn render_gt_heatmap(gt: &[GtObject], grid: &GridConfig, num_classes: usize) -> Vec<f64> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut target = vec![0.0; num_classes * rows * cols];
    for obj in gt {
        let [c, r] = grid.world_to_grid([obj.box_params.x, obj.box_params.y]);
        let (c, r) = (c.round(), r.round());
        if r >= 0.0 && r < rows as f64 && c >= 0.0 && c < cols as f64 {
            target[(obj.class_id * rows + r as usize) * cols + c as usize] = 1.0;
        }
    }
    target
}

pub struct DetectionLoss {
    pub total: Tensor,
    pub heatmap_loss: f64,
    pub box_loss: f64,
}

/// Focal heatmap penalty plus L1 box regression at the ground-truth cells.
///
/// The focal term is summed over all cells and classes and normalized by
/// the positive count; box targets are (x, y) in meters, (w, l) in meters,
/// and the yaw's sine/cosine pair, decoded from the fused features exactly
/// as the prediction head would.
pub fn detection_loss(
    tape: &mut Tape,
    pred_heatmap: &Tensor,
    fused: &Tensor,
    gt: &[GtObject],
    model: &Model,
    weights: &LossWeights,
) -> Result<DetectionLoss, TrainError> {
    let grid = &model.cfg.grid;
    let shape = pred_heatmap.shape().to_vec();
    let n = pred_heatmap.len();
    let target = render_gt_heatmap(gt, grid, model.cfg.num_classes);
    let positives = target.iter().filter(|&&v| v == 1.0).count();

    // focal term
    let pos_mask = Tensor::constant(target.clone(), &shape)?;
    let neg_mask = Tensor::constant(target.iter().map(|v| 1.0 - v).collect(), &shape)?;
    let ones = Tensor::constant(vec![1.0; n], &shape)?;
    let p = tape.clamp(pred_heatmap, PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_p = tape.sub(&ones, &p)?;
    let ln_p = tape.ln(&p)?;
    let ln_1mp = tape.ln(&one_minus_p)?;
    let omp_sq = tape.hadamard(&one_minus_p, &one_minus_p)?;
    let p_sq = tape.hadamard(&p, &p)?;
    let pos_term = tape.hadamard(&omp_sq, &ln_p)?;
    let pos_term = tape.hadamard(&pos_term, &pos_mask)?;
    let neg_term = tape.hadamard(&p_sq, &ln_1mp)?;
    let neg_term = tape.hadamard(&neg_term, &neg_mask)?;
    let pos_sum = tape.sum(&pos_term)?;
    let neg_sum = tape.sum(&neg_term)?;
    let pos_scaled = tape.scale(&pos_sum, -FOCAL_ALPHA)?;
    let neg_scaled = tape.scale(&neg_sum, -(1.0 - FOCAL_ALPHA))?;
    let focal = tape.add(&pos_scaled, &neg_scaled)?;
    let heatmap_term = tape.scale(&focal, 1.0 / positives.max(1) as f64)?;

    // L1 box regression at ground-truth cells
    let box_w = model.head.box_w.bind(tape)?;
    let box_b = model.head.box_b.bind(tape)?;
    let mut box_term = Tensor::scalar(0.0);
    let mut n_boxes = 0usize;
    for obj in gt {
        let [c, r] = grid.world_to_grid([obj.box_params.x, obj.box_params.y]);
        let (c, r) = (c.round(), r.round());
        if r < 0.0 || r >= grid.rows() as f64 || c < 0.0 || c >= grid.cols() as f64 {
            continue;
        }
        let (row, col) = (r as usize, c as usize);
        let feat = tape.gather_cell(fused, row, col)?;
        let raw = tape.fully_connected(&feat, &box_w, &box_b)?;

        let [cx, cy] = grid.grid_to_world([col as f64, row as f64]);
        let dxy = tape.slice(&raw, 0, 2)?;
        let dxy = tape.tanh(&dxy)?;
        let dxy = tape.scale(&dxy, grid.cell)?;
        let center = Tensor::constant(vec![cx, cy], &[2])?;
        let pos = tape.add(&dxy, &center)?;
        let pos_target = Tensor::constant(vec![obj.box_params.x, obj.box_params.y], &[2])?;

        let wl_raw = tape.slice(&raw, 2, 4)?;
        let wl = tape.exp(&wl_raw)?;
        let wl = tape.scale(&wl, model.cfg.base_box_size)?;
        let wl_target = Tensor::constant(vec![obj.box_params.w, obj.box_params.l], &[2])?;

        let sincos = tape.slice(&raw, 4, 6)?;
        let sincos_target = Tensor::constant(
            vec![obj.box_params.yaw.sin(), obj.box_params.yaw.cos()],
            &[2],
        )?;

        for (pred, want) in [(pos, pos_target), (wl, wl_target), (sincos, sincos_target)] {
            let diff = tape.sub(&pred, &want)?;
            let l1 = tape.abs(&diff)?;
            let l1 = tape.sum(&l1)?;
            box_term = tape.add(&box_term, &l1)?;
        }
        n_boxes += 1;
    }
    let box_term = tape.scale(&box_term, 1.0 / n_boxes.max(1) as f64)?;

    let weighted_hm = tape.scale(&heatmap_term, weights.heatmap)?;
    let weighted_box = tape.scale(&box_term, weights.boxes)?;
    let total = tape.add(&weighted_hm, &weighted_box)?;
    Ok(DetectionLoss {
        total,
        heatmap_loss: heatmap_term.item(),
        box_loss: box_term.item(),
    })
}

/// Mean detection loss across the pipeline stages.
pub fn multi_stage_loss(
    tape: &mut Tape,
    stages: &[StageForward],
    gt: &[GtObject],
    model: &Model,
    weights: &LossWeights,
) -> Result<DetectionLoss, TrainError> {
    let mut total: Option<Tensor> = None;
    let mut hm = 0.0;
    let mut bx = 0.0;
    for stage in stages {
        let loss = detection_loss(tape, &stage.heatmap, &stage.fused, gt, model, weights)?;
        hm += loss.heatmap_loss;
        bx += loss.box_loss;
        total = Some(match total {
            None => loss.total,
            Some(t) => tape.add(&t, &loss.total)?,
        });
    }
    let count = stages.len().max(1) as f64;
    let total = tape.scale(&total.expect("at least one stage"), 1.0 / count)?;
    Ok(DetectionLoss {
        total,
        heatmap_loss: hm / count,
        box_loss: bx / count,
    })
}

#[derive(Debug, Clone, Default)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: BTreeMap<String, AdamState>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t: 0,
            state: BTreeMap::new(),
        }
    }
}

impl AdamW {
    /// Applies one update. Frozen parameters and parameters without a
    /// gradient stay bitwise untouched (no decay either).
    pub fn step(
        &mut self,
        params: Vec<&mut Param>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for param in params {
            if !param.requires_grad {
                continue;
            }
            let Some(grad) = grads.get(&param.name) else {
                continue;
            };
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(TrainError::NanGradient(param.name.clone()));
            }
            let state = self.state.entry(param.name.clone()).or_insert_with(|| AdamState {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            for i in 0..grad.len() {
                state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * grad[i];
                state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                param.data[i] -=
                    lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * param.data[i]);
            }
        }
        Ok(())
    }
}

/// One stage of the plan: what trains, what stays frozen, and how the
/// forward pass is wired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub mode: ModalityMode,
    pub temporal: bool,
    pub align: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stages: Vec<StageSpec>,
}

/// Step counts and learning rates; the defaults are the desk-scale budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub steps_per_stage: usize,
    pub batch: usize,
    pub lr_pretrain: f64,
    pub lr_temporal: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        TrainBudget {
            steps_per_stage: 200,
            batch: 4,
            lr_pretrain: 1e-3,
            lr_temporal: 5e-4,
        }
    }
}

impl TrainBudget {
    /// Reduced budget for experiment sweeps and tests.
    pub fn quick() -> Self {
        TrainBudget {
            steps_per_stage: 60,
            batch: 2,
            lr_pretrain: 2e-3,
            lr_temporal: 1e-3,
        }
    }
}

fn all_group_names(model: &Model) -> Vec<String> {
    model.group_names().iter().map(|s| s.to_string()).collect()
}

fn others(model: &Model, trainable: &[&str]) -> Vec<String> {
    all_group_names(model)
        .into_iter()
        .filter(|g| !trainable.contains(&g.as_str()))
        .collect()
}

fn stage_spec(
    name: &str,
    model: &Model,
    trainable: &[&str],
    budget: &TrainBudget,
    lr: f64,
    mode: ModalityMode,
    temporal: bool,
    align: bool,
) -> StageSpec {
    StageSpec {
        name: name.into(),
        trainable: trainable.iter().map(|s| s.to_string()).collect(),
        frozen: others(model, trainable),
        steps: budget.steps_per_stage,
        batch: budget.batch,
        lr,
        weights: LossWeights::default(),
        mode,
        temporal,
        align,
    }
}

impl StageSchedule {
    /// The canonical four-stage plan: lidar pretraining, image pretraining
    /// against the frozen trunk, fusion training, then temporal training
    /// with both encoders frozen.
    pub fn four_stage(model: &Model, budget: &TrainBudget) -> Self {
        let temporal_groups: &[&str] = if model.align_adapter.is_some() {
            &[GROUP_TEMPORAL, GROUP_HEAD, GROUP_ALIGN_ADAPTER]
        } else {
            &[GROUP_TEMPORAL, GROUP_HEAD]
        };
        StageSchedule {
            stages: vec![
                stage_spec(
                    "lidar_pretrain",
                    model,
                    &[GROUP_LIDAR, GROUP_ENHANCE, GROUP_HEAD],
                    budget,
                    budget.lr_pretrain,
                    ModalityMode::LidarOnly,
                    false,
                    false,
                ),
                stage_spec(
                    "image_pretrain",
                    model,
                    &[GROUP_IMAGE],
                    budget,
                    budget.lr_pretrain,
                    ModalityMode::ImageOnly,
                    false,
                    false,
                ),
                stage_spec(
                    "fusion",
                    model,
                    &[GROUP_FUSION, GROUP_ENHANCE, GROUP_HEAD],
                    budget,
                    budget.lr_pretrain,
                    ModalityMode::Fused,
                    false,
                    false,
                ),
                stage_spec(
                    "temporal_frozen",
                    model,
                    temporal_groups,
                    budget,
                    budget.lr_temporal,
                    ModalityMode::Fused,
                    true,
                    true,
                ),
            ],
        }
    }

    pub fn validate(&self, model: &Model) -> Result<(), TrainError> {
        let all = all_group_names(model);
        for stage in &self.stages {
            for g in stage.trainable.iter().chain(&stage.frozen) {
                if !all.contains(g) {
                    return Err(TrainError::Schedule(format!(
                        "stage '{}' names unknown group '{g}'",
                        stage.name
                    )));
                }
            }
            for g in &stage.trainable {
                if stage.frozen.contains(g) {
                    return Err(TrainError::Schedule(format!(
                        "stage '{}' lists '{g}' as both trainable and frozen",
                        stage.name
                    )));
                }
            }
            for g in &all {
                if !stage.trainable.contains(g) && !stage.frozen.contains(g) {
                    return Err(TrainError::Schedule(format!(
                        "stage '{}' leaves group '{g}' unassigned",
                        stage.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Training corpus: full sequences; stages derive single-frame samples or
/// temporal windows from them as needed.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub sequences: Vec<Vec<FrameSample>>,
}

impl TrainData {
    pub fn generate(
        scene: &SceneConfig,
        grid: &GridConfig,
        num_sequences: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut sequences = Vec::with_capacity(num_sequences);
        for i in 0..num_sequences {
            let mut cfg = scene.clone();
            cfg.seed = seed ^ (0x5DEECE66D_u64.wrapping_mul(i as u64 + 1));
            sequences.push(generate_sequence(&cfg, grid)?);
        }
        Ok(TrainData { sequences })
    }
}

/// A window index: (sequence, current-frame index).
type WindowRef = (usize, usize);

fn windows_for(data: &TrainData, history: usize) -> Vec<WindowRef> {
    let mut out = Vec::new();
    for (s, seq) in data.sequences.iter().enumerate() {
        for t in history..seq.len() {
            out.push((s, t));
        }
    }
    out
}

fn window_input(data: &TrainData, (s, t): WindowRef, history: usize) -> TimestepInput {
    let seq = &data.sequences[s];
    let frames = (0..=history)
        .map(|back| {
            let f = &seq[t - back];
            FrameInput {
                cloud: f.cloud.clone(),
                semantic: f.semantic.clone(),
                ego: f.ego,
            }
        })
        .collect();
    TimestepInput { frames }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub name: String,
    pub reports: Vec<LossReport>,
    pub frozen_digests_ok: bool,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct ScheduleOutcome {
    pub stages: Vec<StageOutcome>,
}

/// Executes the stages in order, mutating the model in place. When
/// `out_dir` is given, writes `metrics.csv` (step, stage, heatmap_loss,
/// box_loss, total) and one checkpoint per stage.
pub fn run_schedule(
    model: &mut Model,
    schedule: &StageSchedule,
    data: &TrainData,
    out_dir: Option<&Path>,
    seed: u64,
) -> Result<ScheduleOutcome, TrainError> {
    schedule.validate(model)?;
    let mut outcome = ScheduleOutcome::default();
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
            writeln!(f, "step,stage,heatmap_loss,box_loss,total")?;
            Some(f)
        }
        None => None,
    };

    for (stage_idx, spec) in schedule.stages.iter().enumerate() {
        // fresh optimizer state per stage: each stage is its own
        // optimization problem over a different trainable set
        let mut optimizer = AdamW::default();
        for g in &spec.trainable {
            model.set_group_frozen(g, false)?;
        }
        for g in &spec.frozen {
            model.set_group_frozen(g, true)?;
        }
        let frozen_before: Vec<(String, u64)> = spec
            .frozen
            .iter()
            .map(|g| Ok((g.clone(), model.group_digest(g)?)))
            .collect::<Result<_, ModelError>>()?;

        let history = if spec.temporal { model.cfg.history } else { 0 };
        let windows = windows_for(data, history);
        if windows.is_empty() {
            return Err(TrainError::NoWindows { need: history + 1 });
        }

        let opts = RunOptions {
            mode: spec.mode,
            temporal: spec.temporal,
            align: spec.align,
        };
        let upstream_trainable = [GROUP_LIDAR, GROUP_IMAGE, GROUP_FUSION]
            .iter()
            .any(|g| spec.trainable.iter().any(|t| t == g));

        // with a frozen trunk the per-window maps never change; build them once
        let prepared: Option<Vec<Vec<crate::bev::FeatureMap>>> = if upstream_trainable {
            if opts.align {
                return Err(TrainError::Schedule(format!(
                    "stage '{}' trains the trunk with alignment on; the warp is not differentiable",
                    spec.name
                )));
            }
            None
        } else {
            let mut maps = Vec::with_capacity(windows.len());
            for &w in &windows {
                let input = window_input(data, w, history);
                maps.push(prepare_window_maps(model, &input, &opts)?);
            }
            Some(maps)
        };

        // keyed by stage name so the same stage draws the same batches
        // whether it runs alone or inside a longer schedule
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ fnv1a(spec.name.as_bytes()));
        let mut reports = Vec::with_capacity(spec.steps);
        for step in 0..spec.steps {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut hm_sum = 0.0;
            let mut box_sum = 0.0;
            let mut total_sum = 0.0;
            for _ in 0..spec.batch {
                let widx = rng.gen_range(0..windows.len());
                let wref = windows[widx];
                let gt = &data.sequences[wref.0][wref.1].gt;

                let mut tape = Tape::new();
                let stages = match &prepared {
                    Some(maps) => stages_from_maps(&mut tape, model, &maps[widx])?,
                    None => {
                        let input = window_input(data, wref, history);
                        let feats = encode_window(&mut tape, model, &input, &opts)?;
                        stages_from_features(&mut tape, model, &feats)?
                    }
                };
                let loss = multi_stage_loss(&mut tape, &stages, gt, model, &spec.weights)?;
                hm_sum += loss.heatmap_loss;
                box_sum += loss.box_loss;
                total_sum += loss.total.item();

                let grad_store = tape.backward(&loss.total)?;
                let scale = 1.0 / spec.batch as f64;
                for group in &spec.trainable {
                    for p in model.group_params(group)? {
                        if let Some(leaf) = tape.named(&p.name) {
                            if let Some(g) = grad_store.get(leaf) {
                                let entry = grads
                                    .entry(p.name.clone())
                                    .or_insert_with(|| vec![0.0; g.len()]);
                                for (a, b) in entry.iter_mut().zip(g) {
                                    *a += scale * b;
                                }
                            }
                        }
                    }
                }
            }

            let trainable_params = model.params_mut_for_groups(&spec.trainable)?;
            optimizer.step(trainable_params, &grads, spec.lr)?;

            let report = LossReport {
                step,
                stage: stage_idx,
                heatmap_loss: hm_sum / spec.batch as f64,
                box_loss: box_sum / spec.batch as f64,
                total: total_sum / spec.batch as f64,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(
                    f,
                    "{},{},{},{},{}",
                    report.step, report.stage, report.heatmap_loss, report.box_loss, report.total
                )?;
            }
            reports.push(report);
        }

        let frozen_digests_ok = frozen_before
            .iter()
            .map(|(g, d)| Ok(model.group_digest(g)? == *d))
            .collect::<Result<Vec<_>, ModelError>>()?
            .into_iter()
            .all(|ok| ok);
        if !frozen_digests_ok {
            return Err(TrainError::Schedule(format!(
                "stage '{}' modified a frozen group",
                spec.name
            )));
        }

        let checkpoint = match out_dir {
            Some(dir) => {
                let path = dir.join(format!("stage_{stage_idx}.ckpt"));
                model.save(&path)?;
                Some(path)
            }
            None => None,
        };
        outcome.stages.push(StageOutcome {
            name: spec.name.clone(),
            reports,
            frozen_digests_ok,
            checkpoint,
        });
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    Ok(outcome)
}

/// Runs inference over every temporal window of the sequences and scores
/// the detections.
pub fn evaluate_model(
    model: &Model,
    sequences: &[Vec<FrameSample>],
    radius: f64,
) -> Result<ToyMetrics, TrainError> {
    let opts = RunOptions::inference(model);
    let history = model.cfg.history;
    let mut dets_by_frame = Vec::new();
    let mut gt_by_frame = Vec::new();
    for seq in sequences {
        for t in history..seq.len() {
            let frames = (0..=history)
                .map(|back| {
                    let f = &seq[t - back];
                    FrameInput {
                        cloud: f.cloud.clone(),
                        semantic: f.semantic.clone(),
                        ego: f.ego,
                    }
                })
                .collect();
            let dets = run_timestep(&TimestepInput { frames }, model, &opts)?;
            dets_by_frame.push(dets);
            gt_by_frame.push(seq[t].gt.clone());
        }
    }
    Ok(evaluate(&dets_by_frame, &gt_by_frame, radius))
}

/// Training-strategy ablation rows: when multi-frame input enters, whether
/// fusion is symmetric (unaligned window, every frame equal) or asymmetric
/// (history aligned into the current frame), and whether the single-frame
/// trunk is frozen during temporal training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::F,
        Variant::G,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
            Variant::F => "f",
            Variant::G => "g",
        }
    }

    pub fn fusion_operator(&self) -> FusionOperator {
        match self {
            Variant::F | Variant::G => FusionOperator::Daf,
            _ => FusionOperator::Cat,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant '{s}' (expected a..g)"))
    }
}

/// The schedule realizing one ablation row.
pub fn variant_schedule(variant: Variant, model: &Model, budget: &TrainBudget) -> StageSchedule {
    let b = budget;
    let s1 = |temporal: bool| {
        stage_spec(
            "lidar_pretrain",
            model,
            &[GROUP_LIDAR, GROUP_ENHANCE, GROUP_HEAD],
            b,
            b.lr_pretrain,
            ModalityMode::LidarOnly,
            temporal,
            false,
        )
    };
    let s2 = |temporal: bool| {
        stage_spec(
            "image_pretrain",
            model,
            &[GROUP_IMAGE],
            b,
            b.lr_pretrain,
            ModalityMode::ImageOnly,
            temporal,
            false,
        )
    };
    let s3 = |temporal: bool| {
        stage_spec(
            "fusion",
            model,
            &[GROUP_FUSION, GROUP_ENHANCE, GROUP_HEAD],
            b,
            b.lr_pretrain,
            ModalityMode::Fused,
            temporal,
            false,
        )
    };
    // symmetric temporal: unaligned window, every group training
    let s4_symmetric = || {
        stage_spec(
            "temporal_symmetric",
            model,
            &model.group_names(),
            b,
            b.lr_temporal,
            ModalityMode::Fused,
            true,
            false,
        )
    };
    // asymmetric temporal: history aligned into the current frame, trunk frozen
    let s4_frozen = || {
        let groups: Vec<&str> = if model.align_adapter.is_some() {
            vec![GROUP_TEMPORAL, GROUP_HEAD, GROUP_ALIGN_ADAPTER]
        } else {
            vec![GROUP_TEMPORAL, GROUP_HEAD]
        };
        stage_spec(
            "temporal_frozen",
            model,
            &groups,
            b,
            b.lr_temporal,
            ModalityMode::Fused,
            true,
            true,
        )
    };

    let stages = match variant {
        Variant::A => vec![s1(true), s2(true), s3(true), s4_symmetric()],
        Variant::B => vec![s1(false), s2(true), s3(true), s4_symmetric()],
        Variant::C => vec![s1(false), s2(false), s3(true), s4_symmetric()],
        Variant::D => vec![s1(false), s3(false), s4_symmetric()],
        Variant::E | Variant::G => vec![s1(false), s2(false), s3(false), s4_frozen()],
        Variant::F => vec![s1(false), s2(false), s3(false), s4_symmetric()],
    };
    StageSchedule { stages }
}

/// Scene/model/budget bundle for the desk experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub budget: TrainBudget,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    /// Center-match radius for the toy metrics, meters.
    pub match_radius: f64,
}

impl ExperimentConfig {
    /// Small grid and short budget tuned to finish a full variant run in
    /// seconds on a CPU.
    pub fn toy() -> Self {
        let grid = GridConfig::new(-9.6, 9.6, -9.6, 9.6, -2.0, 2.0, 0.6, 8).unwrap();
        let mut model = ModelConfig::desk();
        model.channels = grid.channels;
        model.grid = grid;
        model.history = 2;
        model.stages = crate::pipeline::StageConfig {
            num_stages: 2,
            k_per_stage: 8,
            pool_radius: 1,
        };
        ExperimentConfig {
            model,
            scene: SceneConfig {
                num_static_landmarks: 2,
                num_movers: 4,
                mover_speed_range: [0.6, 1.6],
                ego_speed: 2.0,
                ego_yaw_rate: 0.1,
                frame_dt: 0.25,
                num_frames: 7,
                lidar_points_per_object: 6,
                noise_sigma: 0.08,
                seed: 0,
            },
            budget: TrainBudget::quick(),
            train_sequences: 6,
            eval_sequences: 4,
            match_radius: 0.6,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn derived_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(17) ^ tag
}

/// Trains one ablation variant from scratch and scores it on held-out
/// scenes. Deterministic in `seed`.
pub fn ablation_run(
    variant: Variant,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<ToyMetrics, TrainError> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.fusion = variant.fusion_operator();
    model_cfg.align = !matches!(
        variant,
        Variant::A | Variant::B | Variant::C | Variant::D | Variant::F
    );
    let mut model = Model::new(model_cfg, seed);
    let data = TrainData::generate(
        &cfg.scene,
        &model.cfg.grid,
        cfg.train_sequences,
        derived_seed(seed, 0xDA7A),
    )?;
    let schedule = variant_schedule(variant, &model, &cfg.budget);
    run_schedule(&mut model, &schedule, &data, None, derived_seed(seed, 0x7247))?;

    let eval = TrainData::generate(
        &cfg.scene,
        &model.cfg.grid,
        cfg.eval_sequences,
        derived_seed(seed, 0xE7A1),
    )?;
    evaluate_model(&model, &eval.sequences, cfg.match_radius)
}

/// Runs several stage-4 definitions from one shared single-frame
/// pretraining. For rows e, f, g the early stages coincide, so the result
/// is bit-identical to running each variant from scratch while paying for
/// the pretraining once.
pub fn ablation_compare(
    variants: &[Variant],
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<Vec<(Variant, ToyMetrics)>, TrainError> {
    let data = TrainData::generate(
        &cfg.scene,
        &cfg.model.grid,
        cfg.train_sequences,
        derived_seed(seed, 0xDA7A),
    )?;
    let eval = TrainData::generate(
        &cfg.scene,
        &cfg.model.grid,
        cfg.eval_sequences,
        derived_seed(seed, 0xE7A1),
    )?;

    // shared stages 1-3 (identical across e/f/g); run once on a Cat model
    let mut base_cfg = cfg.model.clone();
    base_cfg.fusion = FusionOperator::Cat;
    let mut base = Model::new(base_cfg, seed);
    let full = variant_schedule(Variant::E, &base, &cfg.budget);
    let pretrain = StageSchedule {
        stages: full.stages[..full.stages.len() - 1].to_vec(),
    };
    run_schedule(&mut base, &pretrain, &data, None, derived_seed(seed, 0x7247))?;

    let mut out = Vec::new();
    for &variant in variants {
        if !matches!(variant, Variant::E | Variant::F | Variant::G) {
            // rows a-d change the early stages; no sharing possible
            out.push((variant, ablation_run(variant, seed, cfg)?));
            continue;
        }
        let mut model = base.clone();
        model.cfg.fusion = variant.fusion_operator();
        model.cfg.align = !matches!(variant, Variant::F);
        model.reset_temporal(variant.fusion_operator(), model.cfg.history, seed);
        let schedule = variant_schedule(variant, &model, &cfg.budget);
        let stage4 = StageSchedule {
            stages: vec![schedule.stages.last().expect("variants end in stage 4").clone()],
        };
        // the optimizer restarts fresh for stage 4, as it would from scratch
        run_schedule(&mut model, &stage4, &data, None, derived_seed(seed, 0x7247))?;
        out.push((variant, evaluate_model(&model, &eval.sequences, cfg.match_radius)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
