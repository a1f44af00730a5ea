//! Per-timestep detection flow: voxelize and encode each frame, align
//! history into the current frame, then per stage enhance, fuse temporally,
//! score a heatmap, and pick queries through a monotone mask with box-level
//! pooling; a per-query affine head turns queries into detections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::{align_bev, voxelize, BevError, FeatureMap};
use crate::daf::DafError;
use crate::geometry::{relative_pose, GeometryError, PointCloud, Pose};
use crate::model::Model;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("top-k asked for {k} cells but only {remaining} remain unmasked")]
    Selection { k: usize, remaining: usize },
    #[error("stage configuration invalid: {0}")]
    Config(String),
    #[error("alignment is not differentiable; freeze the encoders or disable it")]
    AlignNeedsFrozenEncoders,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Fusion(#[from] DafError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Query-selection plan: stages, selections per stage, pooling radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub num_stages: usize,
    pub k_per_stage: usize,
    pub pool_radius: usize,
}

impl StageConfig {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<(), PipelineError> {
        if self.num_stages == 0 || self.k_per_stage == 0 {
            return Err(PipelineError::Config(
                "num_stages and k_per_stage must be positive".into(),
            ));
        }
        if self.num_stages * self.k_per_stage > rows * cols {
            return Err(PipelineError::Config(format!(
                "{} stages x {} queries exceed the {}x{} grid",
                self.num_stages, self.k_per_stage, rows, cols
            )));
        }
        Ok(())
    }
}

/// Binary occupancy mask over the grid; zeros only ever grow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMask {
    rows: usize,
    cols: usize,
    values: Vec<u8>,
}

impl StageMask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        StageMask {
            rows,
            cols,
            values: vec![1; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.cols + col]
    }

    fn clear(&mut self, row: usize, col: usize) {
        self.values[row * self.cols + col] = 0;
    }

    pub fn remaining(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn zero_cells(&self) -> Vec<(usize, usize)> {
        (0..self.rows * self.cols)
            .filter(|i| self.values[*i] == 0)
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }

    /// True when every zero of `earlier` is still zero here.
    pub fn is_superset_of_zeros(&self, earlier: &StageMask) -> bool {
        self.values
            .iter()
            .zip(&earlier.values)
            .all(|(now, before)| !(*before == 0 && *now == 1))
    }
}

/// One selected BEV cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub cell: (usize, usize),
    pub stage: usize,
    pub score: f64,
    pub feature: Vec<f64>,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxParams {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

/// Ground-truth object in a frame's ego coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub box_params: BoxParams,
    pub vel: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    /// Softmax over classes from the query head; sums to 1.
    pub class_scores: Vec<f64>,
    pub box_params: BoxParams,
    pub confidence: f64,
}

/// Picks the `k` best unmasked cells by score, ties broken by row-major
/// index; selected cells are zeroed in the returned mask.
pub fn topk_select(
    scores: &[f64],
    mask: &StageMask,
    k: usize,
    stage: usize,
) -> Result<(Vec<Query>, StageMask), PipelineError> {
    assert_eq!(scores.len(), mask.values.len());
    let remaining = mask.remaining();
    if k > remaining {
        return Err(PipelineError::Selection { k, remaining });
    }
    let mut candidates: Vec<(f64, usize)> = (0..scores.len())
        .filter(|&i| mask.values[i] == 1)
        .map(|i| (scores[i], i))
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.truncate(k);

    let mut out_mask = mask.clone();
    let queries = candidates
        .into_iter()
        .map(|(score, idx)| {
            let cell = (idx / mask.cols, idx % mask.cols);
            out_mask.clear(cell.0, cell.1);
            Query {
                cell,
                stage,
                score,
                feature: Vec::new(),
                class_id: 0,
            }
        })
        .collect();
    Ok((queries, out_mask))
}

/// Zeroes the (2r+1)^2 neighborhood around each selected cell, clipped at
/// the borders, spreading later stages away from chosen regions.
pub fn box_pool_mask(mask: &StageMask, selected: &[Query], radius: usize) -> StageMask {
    let mut out = mask.clone();
    let r = radius as i64;
    for q in selected {
        let (row, col) = (q.cell.0 as i64, q.cell.1 as i64);
        for dr in -r..=r {
            for dc in -r..=r {
                let (nr, nc) = (row + dr, col + dc);
                if nr >= 0 && nr < mask.rows as i64 && nc >= 0 && nc < mask.cols as i64 {
                    out.clear(nr as usize, nc as usize);
                }
            }
        }
    }
    out
}

/// Collapses per-class heatmaps to one spatial score grid plus the per-cell
/// best class.
pub fn class_max_scores(heatmap: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let [classes, rows, cols] = heatmap.shape()[..] else {
        panic!("heatmap must be [classes, rows, cols]");
    };
    let plane = rows * cols;
    let mut scores = vec![f64::MIN; plane];
    let mut best = vec![0usize; plane];
    for class in 0..classes {
        for i in 0..plane {
            let v = heatmap.data()[class * plane + i];
            if v > scores[i] {
                scores[i] = v;
                best[i] = class;
            }
        }
    }
    (scores, best)
}

/// Decodes queries through the class/box heads.
///
/// The box center stays within one cell of the query (tanh squashing), the
/// extents go through an exponential map, and yaw is recovered by atan2 of
/// the two regressed components. The detection's class label is the class
/// whose heatmap chose the query; the softmax head's scores ride along.
pub fn predict(queries: &[Query], model: &Model) -> Result<Vec<Detection>, PipelineError> {
    let grid = &model.cfg.grid;
    let mut out = Vec::with_capacity(queries.len());
    let mut tape = Tape::inference();
    for q in queries {
        let feat = Tensor::constant(q.feature.clone(), &[q.feature.len()])?;
        let cls_w = model.head.cls_w.bind(&mut tape)?;
        let cls_b = model.head.cls_b.bind(&mut tape)?;
        let box_w = model.head.box_w.bind(&mut tape)?;
        let box_b = model.head.box_b.bind(&mut tape)?;
        let logits = tape.fully_connected(&feat, &cls_w, &cls_b)?;
        let class_scores = tape.softmax_vec(&logits)?.data().to_vec();
        let raw = tape.fully_connected(&feat, &box_w, &box_b)?;
        let [cx, cy] = grid.grid_to_world([q.cell.1 as f64, q.cell.0 as f64]);
        let d = raw.data();
        let mut yaw = d[4].atan2(d[5]);
        if yaw <= -std::f64::consts::PI {
            yaw += 2.0 * std::f64::consts::PI;
        }
        out.push(Detection {
            class_id: q.class_id,
            class_scores,
            box_params: BoxParams {
                x: cx + grid.cell * d[0].tanh(),
                y: cy + grid.cell * d[1].tanh(),
                w: model.cfg.base_box_size * d[2].exp(),
                l: model.cfg.base_box_size * d[3].exp(),
                yaw,
            },
            confidence: q.score,
        })
    }
    Ok(out)
}

/// Which modality features feed the head; single-frame pretraining stages
/// run one branch at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    LidarOnly,
    ImageOnly,
    Fused,
}

/// Per-run switches; the model's own config supplies the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: ModalityMode,
    /// Use the historical frames (otherwise only the current one).
    pub temporal: bool,
    /// Warp historical maps into the current frame.
    pub align: bool,
}

impl RunOptions {
    pub fn inference(model: &Model) -> Self {
        RunOptions {
            mode: ModalityMode::Fused,
            temporal: model.cfg.history > 0,
            align: model.cfg.align,
        }
    }
}

/// One frame of raw inputs: its point cloud and semantic raster in that
/// frame's ego coordinates, plus the ego-to-world pose.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub cloud: PointCloud,
    pub semantic: FeatureMap,
    pub ego: Pose,
}

/// A current-first window of frames.
#[derive(Debug, Clone)]
pub struct TimestepInput {
    pub frames: Vec<FrameInput>,
}

/// Voxelizes and encodes each frame of the window on the given tape.
/// Returns per-frame feature tensors, current first, without alignment.
pub fn encode_window(
    tape: &mut Tape,
    model: &Model,
    input: &TimestepInput,
    opts: &RunOptions,
) -> Result<Vec<Tensor>, PipelineError> {
    let window = if opts.temporal {
        input.frames.len()
    } else {
        1
    };
    let mut feats = Vec::with_capacity(window);
    for frame in &input.frames[..window] {
        let vox = voxelize(&frame.cloud, &model.cfg.grid)?;
        let feat = match opts.mode {
            ModalityMode::LidarOnly => model.encode_lidar(tape, &vox.to_tensor())?,
            ModalityMode::ImageOnly => model.encode_image(tape, &frame.semantic.to_tensor())?,
            ModalityMode::Fused => {
                let lidar = model.encode_lidar(tape, &vox.to_tensor())?;
                let image = model.encode_image(tape, &frame.semantic.to_tensor())?;
                model.fuse_modalities(tape, &lidar, &image)?
            }
        };
        feats.push(feat);
    }
    Ok(feats)
}

/// Encoded per-frame maps with history warped into the current frame.
/// Runs entirely off-tape; encoder outputs must already be constants.
pub fn prepare_window_maps(
    model: &Model,
    input: &TimestepInput,
    opts: &RunOptions,
) -> Result<Vec<FeatureMap>, PipelineError> {
    let mut tape = Tape::inference();
    let feats = encode_window(&mut tape, model, input, opts)?;
    let mut maps = Vec::with_capacity(feats.len());
    for (i, feat) in feats.iter().enumerate() {
        if feat.tracked() {
            return Err(PipelineError::AlignNeedsFrozenEncoders);
        }
        let fm = FeatureMap::from_tensor(feat, &model.cfg.grid, i as u32)?;
        if i > 0 && opts.align {
            let rel = relative_pose(&input.frames[i].ego, &input.frames[0].ego);
            maps.push(align_bev(&fm, &rel, &model.cfg.grid)?);
        } else {
            maps.push(fm);
        }
    }
    Ok(maps)
}

/// Per-stage products of the multi-stage trunk.
pub struct StageForward {
    pub fused: Tensor,
    pub heatmap: Tensor,
}

/// Runs the staged trunk over per-frame feature tensors: per-stage shared
/// enhancement of every frame, temporal fusion, and heatmap scoring.
pub fn stages_from_features(
    tape: &mut Tape,
    model: &Model,
    feats: &[Tensor],
) -> Result<Vec<StageForward>, PipelineError> {
    let mut out = Vec::with_capacity(model.cfg.stages.num_stages);
    for stage in 0..model.cfg.stages.num_stages {
        let mut enhanced = Vec::with_capacity(feats.len());
        for f in feats {
            enhanced.push(model.enhance_one(tape, stage, f)?);
        }
        let refs: Vec<&Tensor> = enhanced.iter().collect();
        let fused = if refs.len() == 1 && model.cfg.history > 0 {
            // single-frame pretraining stages bypass the temporal block
            enhanced[0].clone()
        } else {
            model.temporal.forward(tape, &refs)?
        };
        let heatmap = model.heatmap(tape, &fused)?;
        out.push(StageForward { fused, heatmap });
    }
    Ok(out)
}

/// Prepared maps to tensors (applying the learnable adapter to history when
/// configured) and through the staged trunk.
pub fn stages_from_maps(
    tape: &mut Tape,
    model: &Model,
    maps: &[FeatureMap],
) -> Result<Vec<StageForward>, PipelineError> {
    let mut feats = Vec::with_capacity(maps.len());
    for (i, m) in maps.iter().enumerate() {
        let t = m.to_tensor();
        if i > 0 && model.align_adapter.is_some() {
            feats.push(model.adapt_aligned(tape, &t)?);
        } else {
            feats.push(t);
        }
    }
    stages_from_features(tape, model, &feats)
}

/// Full per-timestep evaluation: window preparation, staged selection under
/// a monotone mask with pooling between stages, and query decoding.
pub fn run_timestep(
    input: &TimestepInput,
    model: &Model,
    opts: &RunOptions,
) -> Result<Vec<Detection>, PipelineError> {
    let grid = &model.cfg.grid;
    model.cfg.stages.validate(grid.rows(), grid.cols())?;
    if input.frames.is_empty() {
        return Err(PipelineError::Config("empty frame window".into()));
    }

    let maps = prepare_window_maps(model, input, opts)?;
    let mut tape = Tape::inference();
    let stages = stages_from_maps(&mut tape, model, &maps)?;

    let (rows, cols) = (grid.rows(), grid.cols());
    let mut mask = StageMask::ones(rows, cols);
    let mut queries = Vec::new();
    for (stage_idx, stage) in stages.iter().enumerate() {
        let (scores, classes) = class_max_scores(&stage.heatmap);
        let (mut selected, selected_mask) =
            topk_select(&scores, &mask, model.cfg.stages.k_per_stage, stage_idx)?;
        let plane = rows * cols;
        for q in selected.iter_mut() {
            let idx = q.cell.0 * cols + q.cell.1;
            q.class_id = classes[idx];
            q.feature = (0..model.cfg.channels)
                .map(|c| stage.fused.data()[c * plane + idx])
                .collect();
        }
        mask = box_pool_mask(&selected_mask, &selected, model.cfg.stages.pool_radius);
        queries.extend(selected);
    }
    predict(&queries, model)
}

/// The detection wire format, one JSON object per line.
pub fn detection_json_line(frame: usize, det: &Detection) -> String {
    serde_json::json!({
        "frame": frame,
        "class": det.class_id,
        "conf": det.confidence,
        "box": [
            det.box_params.x,
            det.box_params.y,
            det.box_params.w,
            det.box_params.l,
            det.box_params.yaw,
        ],
    })
    .to_string()
}
