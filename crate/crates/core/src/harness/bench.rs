//! Desk-scale experiment drivers: alignment residual benches, the
//! frame-count sweep, and the fusion-operator comparison.

use serde::{Deserialize, Serialize};

use crate::bev::{align_bev, voxelize, FeatureMap, GridConfig};
use crate::fusion::FusionOperator;
use crate::geometry::{relative_pose, transform_points};
use crate::model::Model;
use crate::training::{
    run_schedule, variant_schedule, ExperimentConfig, StageSchedule, TrainData, TrainError,
    Variant,
};

use super::scene::{generate_sequence, SceneConfig};
use super::{HarnessError, ToyMetrics};

/// One residual measurement: which path (raw points re-voxelized vs BEV
/// features resampled), aligned or not, at which resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignBenchRow {
    pub seed: u64,
    pub cell: f64,
    pub path: String,
    pub mode: String,
    pub residual: f64,
}

fn mean_abs_diff_interior(a: &FeatureMap, b: &FeatureMap, margin: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ch in 0..a.channels() {
        for r in margin..a.rows() - margin {
            for c in margin..a.cols() - margin {
                sum += (a.get(ch, r, c) - b.get(ch, r, c)).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Residuals between the latest frame's BEV map and its predecessor's,
/// without alignment, with point-level alignment (re-voxelizing transformed
/// points), and with feature-level alignment (resampling the map).
///
/// Scenes are forced static so every residual is alignment error plus
/// sampling noise.
pub fn align_bench(
    scene: &SceneConfig,
    cells: &[f64],
    seeds: &[u64],
) -> Result<Vec<AlignBenchRow>, HarnessError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &cell in cells {
            let mut cfg = scene.clone();
            cfg.seed = seed;
            cfg.num_movers = 0;
            let extent = (scene_extent(scene) / cell).ceil() * cell;
            let grid = GridConfig::new(-extent, extent, -extent, extent, -2.0, 2.0, cell, 3)?;
            let frames = generate_sequence(&cfg, &grid)?;
            let (hist, cur) = (&frames[frames.len() - 2], &frames[frames.len() - 1]);
            let rel = relative_pose(&hist.ego, &cur.ego);

            let map_cur = voxelize(&cur.cloud, &grid)?;
            let map_hist = voxelize(&hist.cloud, &grid)?;
            let ptc = voxelize(&transform_points(&rel, &hist.cloud), &grid)?;
            let atc = align_bev(&map_hist, &rel, &grid)?;

            let shift = rel.translation().xy().norm();
            let margin = ((shift / cell).ceil() as usize) + 2;
            let margin = margin.min(grid.rows() / 3);
            for (path, mode, map) in [
                ("points", "none", &map_hist),
                ("points", "aligned", &ptc),
                ("features", "none", &map_hist),
                ("features", "aligned", &atc),
            ] {
                rows.push(AlignBenchRow {
                    seed,
                    cell,
                    path: path.into(),
                    mode: mode.into(),
                    residual: mean_abs_diff_interior(map, &map_cur, margin),
                });
            }
        }
    }
    Ok(rows)
}

fn scene_extent(scene: &SceneConfig) -> f64 {
    // wide enough to keep objects and both frames' content in range
    let travel = scene.ego_speed * scene.frame_dt * scene.num_frames as f64;
    9.6 + travel
}

/// One trained-and-scored configuration of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub seed: u64,
    pub metrics: ToyMetrics,
}

fn pretrained_base(seed: u64, cfg: &ExperimentConfig) -> Result<(Model, TrainData), TrainError> {
    let data = TrainData::generate(
        &cfg.scene,
        &cfg.model.grid,
        cfg.train_sequences,
        seed.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(17) ^ 0xDA7A,
    )?;
    let mut base_cfg = cfg.model.clone();
    base_cfg.fusion = FusionOperator::Cat;
    let mut base = Model::new(base_cfg, seed);
    let full = variant_schedule(Variant::E, &base, &cfg.budget);
    let pretrain = StageSchedule {
        stages: full.stages[..full.stages.len() - 1].to_vec(),
    };
    run_schedule(
        &mut base,
        &pretrain,
        &data,
        None,
        seed.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(17) ^ 0x7247,
    )?;
    Ok((base, data))
}

fn finish_stage4(
    mut model: Model,
    data: &TrainData,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<ToyMetrics, TrainError> {
    let schedule = variant_schedule(Variant::G, &model, &cfg.budget);
    let stage4 = StageSchedule {
        stages: vec![schedule.stages.last().expect("has stage 4").clone()],
    };
    run_schedule(
        &mut model,
        &stage4,
        data,
        None,
        seed.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(17) ^ 0x7247,
    )?;
    let eval = TrainData::generate(
        &cfg.scene,
        &model.cfg.grid,
        cfg.eval_sequences,
        seed.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(17) ^ 0xE7A1,
    )?;
    crate::training::evaluate_model(&model, &eval.sequences, cfg.match_radius)
}

/// Trains one model per frame count from a shared single-frame trunk and
/// scores each on held-out scenes.
pub fn frame_sweep(
    frame_counts: &[usize],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<Vec<SweepRow>, TrainError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let (base, data) = pretrained_base(seed, cfg)?;
        for &frames in frame_counts {
            if frames == 0 || frames > cfg.scene.num_frames {
                return Err(TrainError::Schedule(format!(
                    "frame count {frames} outside 1..={}",
                    cfg.scene.num_frames
                )));
            }
            let mut model = base.clone();
            model.reset_temporal(FusionOperator::Daf, frames - 1, seed);
            model.cfg.align = true;
            let metrics = finish_stage4(model, &data, seed, cfg)?;
            rows.push(SweepRow {
                label: frames.to_string(),
                seed,
                metrics,
            });
        }
    }
    Ok(rows)
}

/// Trains one model per fusion operator under the frozen-trunk stage-4
/// protocol and scores each on held-out scenes.
pub fn fusion_bench(
    operators: &[FusionOperator],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<Vec<SweepRow>, TrainError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let (base, data) = pretrained_base(seed, cfg)?;
        for &op in operators {
            let mut model = base.clone();
            model.reset_temporal(op, cfg.model.history, seed);
            model.cfg.align = true;
            let metrics = finish_stage4(model, &data, seed, cfg)?;
            rows.push(SweepRow {
                label: op.name().into(),
                seed,
                metrics,
            });
        }
    }
    Ok(rows)
}
