//! Dual attention fusion of a current-first window of BEV feature maps.
//!
//! Intra-frame static attention stacks a small depthwise convolution, a
//! dilated depthwise convolution and a 1x1 projection, standing in for a
//! large-kernel spatial operator. Inter-frame dynamic attention is a
//! squeeze-excitation gate over the concatenated channels. Their product
//! rescales the concatenated features, which a final 1x1 projects back to
//! per-frame width.

use rand::Rng;
use thiserror::Error;

use crate::bev::{BevError, FeatureMap};
use crate::param::Param;
use crate::tensor::{finite_diff_check, sample_coords, FdReport, Tape, Tensor, TensorError};

/// Small kernel size of the first depthwise stage.
pub const DEFAULT_DW_KERNEL: usize = 5;
/// Kernel size of the dilated depthwise stage.
pub const DEFAULT_DWD_KERNEL: usize = 7;
/// Dilation of the second stage.
pub const DEFAULT_DILATION: usize = 3;

#[derive(Debug, Error)]
pub enum DafError {
    #[error("fusion needs at least one frame")]
    EmptyWindow,
    #[error("frame {index} does not share the window's grid or channel count")]
    FrameMismatch { index: usize },
    #[error("window must be ordered current-first (frame 0 has offset {offset})")]
    NotCurrentFirst { offset: u32 },
    #[error("input channel count {got} does not match parameters ({want})")]
    ChannelMismatch { got: usize, want: usize },
    #[error("dynamic attention saturated out of (0, 1)")]
    SaturatedGate,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bev(#[from] BevError),
}

/// Parameters of the fusion block for a fixed window length.
///
/// `concat_channels = (history + 1) * per_frame_channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct DafParams {
    pub dw_kernel: Param,
    pub dwd_kernel: Param,
    pub dilation: usize,
    pub proj_weight: Param,
    pub proj_bias: Param,
    pub se_weight: Param,
    pub se_bias: Param,
    pub out_weight: Param,
    pub out_bias: Param,
    pub per_frame_channels: usize,
    pub history: usize,
}

impl DafParams {
    pub fn new(per_frame_channels: usize, history: usize, rng: &mut impl Rng) -> Self {
        Self::with_kernels(
            per_frame_channels,
            history,
            DEFAULT_DW_KERNEL,
            DEFAULT_DWD_KERNEL,
            DEFAULT_DILATION,
            rng,
        )
    }

    pub fn with_kernels(
        per_frame_channels: usize,
        history: usize,
        k_dw: usize,
        k_dwd: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c_cat = per_frame_channels * (history + 1);
        DafParams {
            dw_kernel: Param::center_delta("daf.dw_kernel", c_cat, k_dw, 0.01, rng),
            dwd_kernel: Param::center_delta("daf.dwd_kernel", c_cat, k_dwd, 0.01, rng),
            dilation,
            proj_weight: Param::fan_in_uniform("daf.proj_weight", &[c_cat, c_cat], c_cat, rng),
            proj_bias: Param::zeros("daf.proj_bias", &[c_cat]),
            se_weight: Param::fan_in_uniform("daf.se_weight", &[c_cat, c_cat], c_cat, rng),
            se_bias: Param::zeros("daf.se_bias", &[c_cat]),
            out_weight: Param::fan_in_uniform(
                "daf.out_weight",
                &[per_frame_channels, c_cat],
                c_cat,
                rng,
            ),
            out_bias: Param::zeros("daf.out_bias", &[per_frame_channels]),
            per_frame_channels,
            history,
        }
    }

    pub fn concat_channels(&self) -> usize {
        self.per_frame_channels * (self.history + 1)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.dw_kernel,
            &self.dwd_kernel,
            &self.proj_weight,
            &self.proj_bias,
            &self.se_weight,
            &self.se_bias,
            &self.out_weight,
            &self.out_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.dw_kernel,
            &mut self.dwd_kernel,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.se_weight,
            &mut self.se_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]
    }
}

/// The two attention factors over the concatenated window.
#[derive(Debug, Clone)]
pub struct AttentionPair {
    /// Static attention map, [concat_channels, H, W].
    pub sa: Tensor,
    /// Dynamic per-channel gate, entries strictly inside (0, 1).
    pub da: Tensor,
}

/// DW conv -> dilated DW conv -> 1x1 projection over the concatenated map.
pub fn static_attention(
    tape: &mut Tape,
    b_c: &Tensor,
    p: &DafParams,
) -> Result<Tensor, DafError> {
    check_width(b_c, p)?;
    let dw_k = p.dw_kernel.bind(tape)?;
    let dwd_k = p.dwd_kernel.bind(tape)?;
    let proj_w = p.proj_weight.bind(tape)?;
    let proj_b = p.proj_bias.bind(tape)?;
    let dw = tape.dw_conv2d(b_c, &dw_k, 1)?;
    let dwd = tape.dw_conv2d(&dw, &dwd_k, p.dilation)?;
    let sa = tape.conv1x1(&dwd, &proj_w, &proj_b)?;
    Ok(sa)
}

/// Average pool -> fully connected -> sigmoid gate per channel.
pub fn dynamic_attention(
    tape: &mut Tape,
    b_c: &Tensor,
    p: &DafParams,
) -> Result<Tensor, DafError> {
    check_width(b_c, p)?;
    let se_w = p.se_weight.bind(tape)?;
    let se_b = p.se_bias.bind(tape)?;
    let pooled = tape.global_avg_pool(b_c)?;
    let fc = tape.fully_connected(&pooled, &se_w, &se_b)?;
    let da = tape.sigmoid(&fc)?;
    if !da.data().iter().all(|&v| v > 0.0 && v < 1.0) {
        return Err(DafError::SaturatedGate);
    }
    Ok(da)
}

fn check_width(b_c: &Tensor, p: &DafParams) -> Result<(), DafError> {
    let got = b_c.shape().first().copied().unwrap_or(0);
    let want = p.concat_channels();
    if got != want {
        return Err(DafError::ChannelMismatch { got, want });
    }
    Ok(())
}

/// Every intermediate of one fusion pass, kept for inspection and tests.
#[derive(Debug, Clone)]
pub struct DafForward {
    pub b_c: Tensor,
    pub attention: AttentionPair,
    /// (SA  (x)  DA)  (.)  B_C, before the output projection.
    pub gated: Tensor,
    /// Final per-frame-width output, [C, H, W].
    pub output: Tensor,
}

/// Tape-level fusion of a current-first window of map tensors.
pub fn daf_forward(
    tape: &mut Tape,
    frames: &[&Tensor],
    p: &DafParams,
) -> Result<DafForward, DafError> {
    if frames.is_empty() {
        return Err(DafError::EmptyWindow);
    }
    let b_c = tape.concat_channels(frames)?;
    let sa = static_attention(tape, &b_c, p)?;
    let da = dynamic_attention(tape, &b_c, p)?;
    let out_w = p.out_weight.bind(tape)?;
    let out_b = p.out_bias.bind(tape)?;
    let a = tape.broadcast_mul(&sa, &da)?;
    let gated = tape.hadamard(&a, &b_c)?;
    let output = tape.conv1x1(&gated, &out_w, &out_b)?;
    Ok(DafForward {
        b_c,
        attention: AttentionPair { sa, da },
        gated,
        output,
    })
}

/// Fuses feature maps off-tape; the window must share one grid, one channel
/// width, and lead with the current frame.
pub fn daf_fuse(frames: &[FeatureMap], p: &DafParams) -> Result<FeatureMap, DafError> {
    if frames.is_empty() {
        return Err(DafError::EmptyWindow);
    }
    if frames[0].frame_offset != 0 {
        return Err(DafError::NotCurrentFirst {
            offset: frames[0].frame_offset,
        });
    }
    let first = &frames[0];
    for (index, f) in frames.iter().enumerate() {
        if f.grid != first.grid || f.channels() != first.channels() {
            return Err(DafError::FrameMismatch { index });
        }
    }
    let mut tape = Tape::new();
    let tensors: Vec<Tensor> = frames.iter().map(|f| f.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let fwd = daf_forward(&mut tape, &refs, p)?;
    Ok(FeatureMap::from_tensor(&fwd.output, &first.grid, 0)?)
}

/// Finite-difference checks of the full fusion forward against every
/// parameter tensor.
pub fn daf_gradient_reports(eps: f64, tol: f64) -> Result<Vec<(String, FdReport)>, DafError> {
    let (c, history, h, w) = (2usize, 2usize, 8usize, 8usize);
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0xda1);
    let p = DafParams::new(c, history, &mut rng);
    let frames: Vec<Tensor> = (0..=history)
        .map(|f| {
            let data: Vec<f64> = (0..c * h * w)
                .map(|i| 0.5 * ((i as f64 * 0.731 + f as f64).sin()))
                .collect();
            Tensor::constant(data, &[c, h, w]).unwrap()
        })
        .collect();

    let loss_of = |params: &DafParams, tape: &mut Tape| -> Result<(Tensor, DafForward), DafError> {
        let refs: Vec<&Tensor> = frames.iter().collect();
        let fwd = daf_forward(tape, &refs, params)?;
        let weights: Vec<f64> = (0..fwd.output.len())
            .map(|i| 0.3 + 0.7 * ((i as f64 * 0.173).sin()))
            .collect();
        let wt = Tensor::constant(weights, fwd.output.shape())?;
        let prod = tape.hadamard(&fwd.output, &wt)?;
        let loss = tape.sum(&prod)?;
        Ok((loss, fwd))
    };

    // one analytic backward covers every parameter tensor
    let mut tape = Tape::new();
    let (loss, _) = loss_of(&p, &mut tape)?;
    let grads = tape.backward(&loss)?;

    let mut reports = Vec::new();
    for (idx, q) in p.params().into_iter().enumerate() {
        let name = q.name.clone();
        let leaf = tape
            .named(&name)
            .ok_or_else(|| TensorError::Usage(format!("{name}: never bound")))?;
        let analytic = grads
            .get(leaf)
            .ok_or_else(|| TensorError::Usage(format!("{name}: gradient missing")))?
            .to_vec();
        let init = q.data.clone();
        let coords = sample_coords(init.len(), 50, 0xfeed ^ idx as u64);
        let mut loss_fn = |vals: &[f64]| -> Result<f64, TensorError> {
            let mut modified = p.clone();
            modified.params_mut()[idx].data = vals.to_vec();
            let mut t = Tape::new();
            match loss_of(&modified, &mut t) {
                Ok((l, _)) => Ok(l.item()),
                Err(DafError::Tensor(e)) => Err(e),
                Err(e) => Err(TensorError::Usage(e.to_string())),
            }
        };
        let report = finite_diff_check(&mut loss_fn, &init, &analytic, &coords, eps, tol)?;
        reports.push((name, report));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests;
