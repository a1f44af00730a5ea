//! The detector's parameters: single-frame encoders, modality fusion,
//! per-stage enhancement blocks, the temporal fusion operator, and the
//! heatmap/box/class heads, organized into named groups for staged training.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::GridConfig;
use crate::fusion::{FusionOperator, TemporalFusion};
use crate::param::Param;
use crate::tensor::{load_checkpoint, save_checkpoint, Tape, Tensor, TensorError};

pub const GROUP_LIDAR: &str = "lidar_encoder";
pub const GROUP_IMAGE: &str = "image_encoder";
pub const GROUP_FUSION: &str = "fusion";
pub const GROUP_ENHANCE: &str = "enhance";
pub const GROUP_TEMPORAL: &str = "temporal";
pub const GROUP_HEAD: &str = "head";
pub const GROUP_ALIGN_ADAPTER: &str = "align_adapter";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown parameter group '{0}'")]
    UnknownGroup(String),
    #[error("checkpoint is missing parameter '{0}'")]
    MissingParam(String),
    #[error("checkpoint shape mismatch for '{name}': {got:?} vs {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Geometry, widths and head sizes shared by every model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: GridConfig,
    /// Per-frame BEV feature width.
    pub channels: usize,
    /// Channels of the synthetic semantic raster (one per class).
    pub semantic_channels: usize,
    pub num_classes: usize,
    /// Historical frames in the temporal window.
    pub history: usize,
    pub stages: crate::pipeline::StageConfig,
    pub fusion: FusionOperator,
    /// Warp historical maps into the current frame before fusing.
    pub align: bool,
    /// Learnable 1x1 adapter after alignment (off by default).
    pub align_adapter: bool,
    /// Box decode: width/length are `base_box_size * exp(raw)`.
    pub base_box_size: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        let grid = GridConfig::desk();
        ModelConfig {
            channels: grid.channels,
            grid,
            semantic_channels: 2,
            num_classes: 2,
            history: 2,
            stages: crate::pipeline::StageConfig {
                num_stages: 3,
                k_per_stage: 16,
                pool_radius: 1,
            },
            fusion: FusionOperator::Daf,
            align: true,
            align_adapter: false,
            base_box_size: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dw: Param,
    pub pw_w: Param,
    pub pw_b: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams {
    pub in_w: Param,
    pub in_b: Param,
    pub dw: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceParams {
    pub dw: Param,
    pub pw_w: Param,
    pub pw_b: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hm_w: Param,
    pub hm_b: Param,
    pub cls_w: Param,
    pub cls_b: Param,
    pub box_w: Param,
    pub box_b: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub lidar_enc: EncoderParams,
    pub image_enc: ImageEncoderParams,
    pub fuse_w: Param,
    pub fuse_b: Param,
    pub enhance: Vec<EnhanceParams>,
    pub temporal: TemporalFusion,
    pub align_adapter: Option<EnhanceParams>,
    pub head: HeadParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        // one rng stream per block, so changing the temporal operator (or
        // any block's width) leaves every other block's init untouched
        let block_rng = |tag: u64| {
            ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ tag)
        };
        let c = cfg.channels;
        let mut rng = block_rng(1);
        let lidar_enc = EncoderParams {
            dw: Param::center_delta("lidar.dw", c, 3, 0.05, &mut rng),
            pw_w: Param::fan_in_uniform("lidar.pw_w", &[c, c], c, &mut rng),
            pw_b: Param::zeros("lidar.pw_b", &[c]),
        };
        let mut rng = block_rng(2);
        let image_enc = ImageEncoderParams {
            in_w: Param::fan_in_uniform(
                "image.in_w",
                &[c, cfg.semantic_channels],
                cfg.semantic_channels,
                &mut rng,
            ),
            in_b: Param::zeros("image.in_b", &[c]),
            dw: Param::center_delta("image.dw", c, 3, 0.05, &mut rng),
        };
        let mut rng = block_rng(3);
        let fuse_w = Param::fan_in_uniform("fusion.w", &[c, 2 * c], 2 * c, &mut rng);
        let fuse_b = Param::zeros("fusion.b", &[c]);
        let mut rng = block_rng(4);
        let enhance = (0..cfg.stages.num_stages)
            .map(|s| EnhanceParams {
                dw: Param::center_delta(&format!("enhance.{s}.dw"), c, 3, 0.01, &mut rng),
                pw_w: Param::zeros(&format!("enhance.{s}.pw_w"), &[c, c]),
                pw_b: Param::zeros(&format!("enhance.{s}.pw_b"), &[c]),
            })
            .collect();
        let mut rng = block_rng(5);
        let temporal = TemporalFusion::new(cfg.fusion, c, cfg.history, &mut rng);
        let align_adapter = cfg.align_adapter.then(|| EnhanceParams {
            dw: Param::identity_kernel("adapter.dw", c, 3),
            pw_w: Param::zeros("adapter.pw_w", &[c, c]),
            pw_b: Param::zeros("adapter.pw_b", &[c]),
        });
        let mut rng = block_rng(6);
        let head = HeadParams {
            hm_w: Param::fan_in_uniform("head.hm_w", &[cfg.num_classes, c], c, &mut rng),
            hm_b: Param::zeros("head.hm_b", &[cfg.num_classes]),
            cls_w: Param::fan_in_uniform("head.cls_w", &[cfg.num_classes, c], c, &mut rng),
            cls_b: Param::zeros("head.cls_b", &[cfg.num_classes]),
            box_w: Param::fan_in_uniform("head.box_w", &[6, c], c, &mut rng),
            box_b: Param::zeros("head.box_b", &[6]),
        };
        Model {
            cfg,
            lidar_enc,
            image_enc,
            fuse_w,
            fuse_b,
            enhance,
            temporal,
            align_adapter,
            head,
        }
    }

    /// Swaps the temporal operator (and window length), re-deriving its
    /// parameters from the same per-block stream `Model::new` would use, so
    /// a pretrained single-frame trunk can branch into operator variants.
    pub fn reset_temporal(&mut self, kind: FusionOperator, history: usize, seed: u64) {
        self.cfg.fusion = kind;
        self.cfg.history = history;
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 5);
        self.temporal = TemporalFusion::new(kind, self.cfg.channels, history, &mut rng);
    }

    pub fn group_names(&self) -> Vec<&'static str> {
        let mut names = vec![
            GROUP_LIDAR,
            GROUP_IMAGE,
            GROUP_FUSION,
            GROUP_ENHANCE,
            GROUP_TEMPORAL,
            GROUP_HEAD,
        ];
        if self.align_adapter.is_some() {
            names.push(GROUP_ALIGN_ADAPTER);
        }
        names
    }

    pub fn group_params(&self, group: &str) -> Result<Vec<&Param>, ModelError> {
        Ok(match group {
            GROUP_LIDAR => vec![&self.lidar_enc.dw, &self.lidar_enc.pw_w, &self.lidar_enc.pw_b],
            GROUP_IMAGE => vec![&self.image_enc.in_w, &self.image_enc.in_b, &self.image_enc.dw],
            GROUP_FUSION => vec![&self.fuse_w, &self.fuse_b],
            GROUP_ENHANCE => self
                .enhance
                .iter()
                .flat_map(|e| [&e.dw, &e.pw_w, &e.pw_b])
                .collect(),
            GROUP_TEMPORAL => self.temporal.params(),
            GROUP_HEAD => vec![
                &self.head.hm_w,
                &self.head.hm_b,
                &self.head.cls_w,
                &self.head.cls_b,
                &self.head.box_w,
                &self.head.box_b,
            ],
            GROUP_ALIGN_ADAPTER => match &self.align_adapter {
                Some(a) => vec![&a.dw, &a.pw_w, &a.pw_b],
                None => return Err(ModelError::UnknownGroup(group.to_string())),
            },
            _ => return Err(ModelError::UnknownGroup(group.to_string())),
        })
    }

    pub fn group_params_mut(&mut self, group: &str) -> Result<Vec<&mut Param>, ModelError> {
        Ok(match group {
            GROUP_LIDAR => vec![
                &mut self.lidar_enc.dw,
                &mut self.lidar_enc.pw_w,
                &mut self.lidar_enc.pw_b,
            ],
            GROUP_IMAGE => vec![
                &mut self.image_enc.in_w,
                &mut self.image_enc.in_b,
                &mut self.image_enc.dw,
            ],
            GROUP_FUSION => vec![&mut self.fuse_w, &mut self.fuse_b],
            GROUP_ENHANCE => self
                .enhance
                .iter_mut()
                .flat_map(|e| [&mut e.dw, &mut e.pw_w, &mut e.pw_b])
                .collect(),
            GROUP_TEMPORAL => self.temporal.params_mut(),
            GROUP_HEAD => vec![
                &mut self.head.hm_w,
                &mut self.head.hm_b,
                &mut self.head.cls_w,
                &mut self.head.cls_b,
                &mut self.head.box_w,
                &mut self.head.box_b,
            ],
            GROUP_ALIGN_ADAPTER => match &mut self.align_adapter {
                Some(a) => vec![&mut a.dw, &mut a.pw_w, &mut a.pw_b],
                None => return Err(ModelError::UnknownGroup(group.to_string())),
            },
            _ => return Err(ModelError::UnknownGroup(group.to_string())),
        })
    }

    /// Mutable access to several groups at once (one borrow of the model).
    pub fn params_mut_for_groups(
        &mut self,
        groups: &[String],
    ) -> Result<Vec<&mut Param>, ModelError> {
        for g in groups {
            self.group_params(g)?; // name check
        }
        let want = |name: &str| groups.iter().any(|g| g == name);
        let Model {
            lidar_enc,
            image_enc,
            fuse_w,
            fuse_b,
            enhance,
            temporal,
            align_adapter,
            head,
            ..
        } = self;
        let mut out: Vec<&mut Param> = Vec::new();
        if want(GROUP_LIDAR) {
            out.extend([&mut lidar_enc.dw, &mut lidar_enc.pw_w, &mut lidar_enc.pw_b]);
        }
        if want(GROUP_IMAGE) {
            out.extend([&mut image_enc.in_w, &mut image_enc.in_b, &mut image_enc.dw]);
        }
        if want(GROUP_FUSION) {
            out.extend([fuse_w, fuse_b]);
        }
        if want(GROUP_ENHANCE) {
            out.extend(
                enhance
                    .iter_mut()
                    .flat_map(|e| [&mut e.dw, &mut e.pw_w, &mut e.pw_b]),
            );
        }
        if want(GROUP_TEMPORAL) {
            out.extend(temporal.params_mut());
        }
        if want(GROUP_ALIGN_ADAPTER) {
            if let Some(a) = align_adapter {
                out.extend([&mut a.dw, &mut a.pw_w, &mut a.pw_b]);
            }
        }
        if want(GROUP_HEAD) {
            out.extend([
                &mut head.hm_w,
                &mut head.hm_b,
                &mut head.cls_w,
                &mut head.cls_b,
                &mut head.box_w,
                &mut head.box_b,
            ]);
        }
        Ok(out)
    }

    pub fn all_params(&self) -> Vec<&Param> {
        self.group_names()
            .into_iter()
            .flat_map(|g| self.group_params(g).expect("known group"))
            .collect()
    }

    pub fn set_group_frozen(&mut self, group: &str, frozen: bool) -> Result<(), ModelError> {
        for p in self.group_params_mut(group)? {
            p.requires_grad = !frozen;
        }
        Ok(())
    }

    pub fn group_frozen(&self, group: &str) -> Result<bool, ModelError> {
        Ok(self.group_params(group)?.iter().all(|p| !p.requires_grad))
    }

    /// FNV digest over a group's exact parameter bits.
    pub fn group_digest(&self, group: &str) -> Result<u64, ModelError> {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.group_params(group)? {
            h ^= p.byte_digest();
            h = h.wrapping_mul(0x100000001b3);
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let params = self.all_params();
        let entries: Vec<_> = params
            .iter()
            .map(|p| (p.entry(), p.data.as_slice()))
            .collect();
        save_checkpoint(path, &entries)?;
        Ok(())
    }

    /// Loads values by name into the existing structure; every present
    /// parameter must exist in the file with a matching shape.
    pub fn load(&mut self, path: &Path) -> Result<(), ModelError> {
        let loaded = load_checkpoint(path)?;
        let by_name: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> = loaded
            .into_iter()
            .map(|(e, d)| (e.name, (e.shape, d)))
            .collect();
        for group in self.group_names() {
            for p in self.group_params_mut(group).expect("known group") {
                let Some((shape, data)) = by_name.get(&p.name) else {
                    return Err(ModelError::MissingParam(p.name.clone()));
                };
                if *shape != p.shape {
                    return Err(ModelError::ShapeMismatch {
                        name: p.name.clone(),
                        got: shape.clone(),
                        want: p.shape.clone(),
                    });
                }
                p.data = data.clone();
            }
        }
        Ok(())
    }

    // --- forward blocks -------------------------------------------------

    /// Depthwise + pointwise block with tanh, mapping voxel features to the
    /// per-frame width.
    pub fn encode_lidar(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        let dw_k = self.lidar_enc.dw.bind(tape)?;
        let pw_w = self.lidar_enc.pw_w.bind(tape)?;
        let pw_b = self.lidar_enc.pw_b.bind(tape)?;
        let local = tape.dw_conv2d(x, &dw_k, 1)?;
        let mixed = tape.conv1x1(&local, &pw_w, &pw_b)?;
        tape.tanh(&mixed)
    }

    /// Lifts the semantic raster to the per-frame width.
    pub fn encode_image(&self, tape: &mut Tape, sem: &Tensor) -> Result<Tensor, TensorError> {
        let in_w = self.image_enc.in_w.bind(tape)?;
        let in_b = self.image_enc.in_b.bind(tape)?;
        let dw_k = self.image_enc.dw.bind(tape)?;
        let lifted = tape.conv1x1(sem, &in_w, &in_b)?;
        let local = tape.dw_conv2d(&lifted, &dw_k, 1)?;
        tape.tanh(&local)
    }

    /// Concatenates the two modality maps and projects back to C channels.
    pub fn fuse_modalities(
        &self,
        tape: &mut Tape,
        lidar: &Tensor,
        image: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let w = self.fuse_w.bind(tape)?;
        let b = self.fuse_b.bind(tape)?;
        let cat = tape.concat_channels(&[lidar, image])?;
        tape.conv1x1(&cat, &w, &b)
    }

    /// Stage-specific residual enhancement, weights shared across frames.
    pub fn enhance_one(
        &self,
        tape: &mut Tape,
        stage: usize,
        frame: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let e = &self.enhance[stage];
        let dw_k = e.dw.bind(tape)?;
        let pw_w = e.pw_w.bind(tape)?;
        let pw_b = e.pw_b.bind(tape)?;
        let local = tape.dw_conv2d(frame, &dw_k, 1)?;
        let mixed = tape.conv1x1(&local, &pw_w, &pw_b)?;
        tape.add(frame, &mixed)
    }

    /// Optional learnable adapter applied to aligned historical maps.
    pub fn adapt_aligned(&self, tape: &mut Tape, frame: &Tensor) -> Result<Tensor, TensorError> {
        let Some(a) = &self.align_adapter else {
            return Ok(frame.clone());
        };
        let dw_k = a.dw.bind(tape)?;
        let pw_w = a.pw_w.bind(tape)?;
        let pw_b = a.pw_b.bind(tape)?;
        let local = tape.dw_conv2d(frame, &dw_k, 1)?;
        let mixed = tape.conv1x1(&local, &pw_w, &pw_b)?;
        tape.add(frame, &mixed)
    }

    /// Per-class score grid in (0, 1).
    pub fn heatmap(&self, tape: &mut Tape, b: &Tensor) -> Result<Tensor, TensorError> {
        let w = self.head.hm_w.bind(tape)?;
        let bias = self.head.hm_b.bind(tape)?;
        let logits = tape.conv1x1(b, &w, &bias)?;
        tape.sigmoid(&logits)
    }
}
