//! Temporal fusion operators over a current-first window of BEV tensors.
//!
//! One interface covers the fusion comparison axis: plain addition,
//! concatenation, concatenation with channel gates, current-as-query
//! cross-attention over history, and dual attention fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::daf::{daf_forward, DafError, DafParams};
use crate::param::Param;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOperator {
    Add,
    Cat,
    CatSe,
    CatEca,
    CrossAttn,
    Daf,
}

impl FusionOperator {
    pub const ALL: [FusionOperator; 6] = [
        FusionOperator::Add,
        FusionOperator::Cat,
        FusionOperator::CatSe,
        FusionOperator::CatEca,
        FusionOperator::CrossAttn,
        FusionOperator::Daf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionOperator::Add => "add",
            FusionOperator::Cat => "cat",
            FusionOperator::CatSe => "cat_se",
            FusionOperator::CatEca => "cat_eca",
            FusionOperator::CrossAttn => "cross_attn",
            FusionOperator::Daf => "daf",
        }
    }
}

impl std::str::FromStr for FusionOperator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionOperator::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| format!("unknown fusion operator '{s}'"))
    }
}

/// Parameters of the selected operator for a fixed window length.
#[derive(Debug, Clone, PartialEq)]
pub enum TemporalFusion {
    Add,
    Cat {
        out_w: Param,
        out_b: Param,
    },
    CatSe {
        se_w: Param,
        se_b: Param,
        out_w: Param,
        out_b: Param,
    },
    CatEca {
        kernel: Param,
        out_w: Param,
        out_b: Param,
    },
    CrossAttn {
        wq: Param,
        wk: Param,
        wo_w: Param,
        wo_b: Param,
    },
    Daf(DafParams),
}

impl TemporalFusion {
    pub fn new(
        kind: FusionOperator,
        channels: usize,
        history: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c_cat = channels * (history + 1);
        match kind {
            FusionOperator::Add => TemporalFusion::Add,
            FusionOperator::Cat => TemporalFusion::Cat {
                out_w: Param::fan_in_uniform("temporal.cat.out_w", &[channels, c_cat], c_cat, rng),
                out_b: Param::zeros("temporal.cat.out_b", &[channels]),
            },
            FusionOperator::CatSe => TemporalFusion::CatSe {
                se_w: Param::fan_in_uniform("temporal.se.gate_w", &[c_cat, c_cat], c_cat, rng),
                se_b: Param::zeros("temporal.se.gate_b", &[c_cat]),
                out_w: Param::fan_in_uniform("temporal.se.out_w", &[channels, c_cat], c_cat, rng),
                out_b: Param::zeros("temporal.se.out_b", &[channels]),
            },
            FusionOperator::CatEca => TemporalFusion::CatEca {
                kernel: Param::uniform("temporal.eca.kernel", &[3], -0.5, 0.5, rng),
                out_w: Param::fan_in_uniform("temporal.eca.out_w", &[channels, c_cat], c_cat, rng),
                out_b: Param::zeros("temporal.eca.out_b", &[channels]),
            },
            FusionOperator::CrossAttn => TemporalFusion::CrossAttn {
                wq: Param::fan_in_uniform("temporal.xattn.wq", &[channels, channels], channels, rng),
                wk: Param::fan_in_uniform("temporal.xattn.wk", &[channels, channels], channels, rng),
                wo_w: Param::fan_in_uniform(
                    "temporal.xattn.out_w",
                    &[channels, channels],
                    channels,
                    rng,
                ),
                wo_b: Param::zeros("temporal.xattn.out_b", &[channels]),
            },
            FusionOperator::Daf => TemporalFusion::Daf(DafParams::new(channels, history, rng)),
        }
    }

    pub fn kind(&self) -> FusionOperator {
        match self {
            TemporalFusion::Add => FusionOperator::Add,
            TemporalFusion::Cat { .. } => FusionOperator::Cat,
            TemporalFusion::CatSe { .. } => FusionOperator::CatSe,
            TemporalFusion::CatEca { .. } => FusionOperator::CatEca,
            TemporalFusion::CrossAttn { .. } => FusionOperator::CrossAttn,
            TemporalFusion::Daf(_) => FusionOperator::Daf,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            TemporalFusion::Add => vec![],
            TemporalFusion::Cat { out_w, out_b } => vec![out_w, out_b],
            TemporalFusion::CatSe {
                se_w,
                se_b,
                out_w,
                out_b,
            } => vec![se_w, se_b, out_w, out_b],
            TemporalFusion::CatEca {
                kernel,
                out_w,
                out_b,
            } => vec![kernel, out_w, out_b],
            TemporalFusion::CrossAttn { wq, wk, wo_w, wo_b } => vec![wq, wk, wo_w, wo_b],
            TemporalFusion::Daf(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            TemporalFusion::Add => vec![],
            TemporalFusion::Cat { out_w, out_b } => vec![out_w, out_b],
            TemporalFusion::CatSe {
                se_w,
                se_b,
                out_w,
                out_b,
            } => vec![se_w, se_b, out_w, out_b],
            TemporalFusion::CatEca {
                kernel,
                out_w,
                out_b,
            } => vec![kernel, out_w, out_b],
            TemporalFusion::CrossAttn { wq, wk, wo_w, wo_b } => vec![wq, wk, wo_w, wo_b],
            TemporalFusion::Daf(p) => p.params_mut(),
        }
    }

    /// Fuses a current-first window into one per-frame-width map.
    pub fn forward(&self, tape: &mut Tape, frames: &[&Tensor]) -> Result<Tensor, DafError> {
        if frames.is_empty() {
            return Err(DafError::EmptyWindow);
        }
        match self {
            TemporalFusion::Add => {
                // mean keeps the magnitude comparable across window lengths
                let mut acc = frames[0].clone();
                for f in &frames[1..] {
                    acc = tape.add(&acc, f)?;
                }
                Ok(tape.scale(&acc, 1.0 / frames.len() as f64)?)
            }
            TemporalFusion::Cat { out_w, out_b } => {
                let w = out_w.bind(tape)?;
                let b = out_b.bind(tape)?;
                let cat = tape.concat_channels(frames)?;
                Ok(tape.conv1x1(&cat, &w, &b)?)
            }
            TemporalFusion::CatSe {
                se_w,
                se_b,
                out_w,
                out_b,
            } => {
                let gw = se_w.bind(tape)?;
                let gb = se_b.bind(tape)?;
                let ow = out_w.bind(tape)?;
                let ob = out_b.bind(tape)?;
                let cat = tape.concat_channels(frames)?;
                let pooled = tape.global_avg_pool(&cat)?;
                let fc = tape.fully_connected(&pooled, &gw, &gb)?;
                let gate = tape.sigmoid(&fc)?;
                let gated = tape.broadcast_mul(&cat, &gate)?;
                Ok(tape.conv1x1(&gated, &ow, &ob)?)
            }
            TemporalFusion::CatEca {
                kernel,
                out_w,
                out_b,
            } => {
                let k = kernel.bind(tape)?;
                let ow = out_w.bind(tape)?;
                let ob = out_b.bind(tape)?;
                let cat = tape.concat_channels(frames)?;
                let pooled = tape.global_avg_pool(&cat)?;
                let mixed = tape.channel_conv1d(&pooled, &k)?;
                let gate = tape.sigmoid(&mixed)?;
                let gated = tape.broadcast_mul(&cat, &gate)?;
                Ok(tape.conv1x1(&gated, &ow, &ob)?)
            }
            TemporalFusion::CrossAttn { wq, wk, wo_w, wo_b } => {
                let cur = frames[0];
                if frames.len() == 1 {
                    return Ok(cur.clone());
                }
                let channels = cur.shape()[0];
                let qw = wq.bind(tape)?;
                let kw = wk.bind(tape)?;
                let ow = wo_w.bind(tape)?;
                let ob = wo_b.bind(tape)?;
                let zero_b = Tensor::constant(vec![0.0; channels], &[channels])?;
                let ones_row =
                    Tensor::constant(vec![1.0 / (channels as f64).sqrt(); channels], &[1, channels])?;
                let zero_one = Tensor::constant(vec![0.0], &[1])?;

                let q = tape.conv1x1(cur, &qw, &zero_b)?;
                let mut scores = Vec::new();
                for hist in &frames[1..] {
                    let key = tape.conv1x1(hist, &kw, &zero_b)?;
                    let qk = tape.hadamard(&q, &key)?;
                    // channel sum / sqrt(C) as a fixed 1x1 contraction
                    let s = tape.conv1x1(&qk, &ones_row, &zero_one)?;
                    scores.push(s);
                }
                let score_refs: Vec<&Tensor> = scores.iter().collect();
                let stacked = tape.concat_channels(&score_refs)?;
                let attn = tape.softmax_channels(&stacked)?;
                let mut context: Option<Tensor> = None;
                for (i, hist) in frames[1..].iter().enumerate() {
                    let a_i = tape.slice(&attn, i, i + 1)?;
                    let weighted = tape.mul_spatial_gate(hist, &a_i)?;
                    context = Some(match context {
                        None => weighted,
                        Some(c) => tape.add(&c, &weighted)?,
                    });
                }
                let ctx = context.expect("at least one history frame");
                let projected = tape.conv1x1(&ctx, &ow, &ob)?;
                Ok(tape.add(cur, &projected)?)
            }
            TemporalFusion::Daf(p) => Ok(daf_forward(tape, frames, p)?.output),
        }
    }
}
