//! Named model parameters and the grouping used by staged training.

use rand::Rng;

use crate::tensor::{CheckpointEntry, Tape, Tensor, TensorError};

/// One learnable (or frozen) tensor with a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Param {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: true,
        }
    }

    pub fn uniform(name: &str, shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
            requires_grad: true,
        }
    }

    /// Uniform in +-1/sqrt(fan_in), the usual affine-layer initialization.
    pub fn fan_in_uniform(name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::uniform(name, shape, -bound, bound, rng)
    }

    /// Per-channel k x k kernels starting as the center delta plus uniform
    /// noise, so a stack of them begins near the identity map.
    pub fn center_delta(
        name: &str,
        channels: usize,
        k: usize,
        noise: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut data = vec![0.0; channels * k * k];
        for v in data.iter_mut() {
            if noise > 0.0 {
                *v = rng.gen_range(-noise..noise);
            }
        }
        let center = (k / 2) * k + k / 2;
        for c in 0..channels {
            data[c * k * k + center] += 1.0;
        }
        Param {
            name: name.to_string(),
            shape: vec![channels, k, k],
            data,
            requires_grad: true,
        }
    }

    /// Exact center-delta kernels (no noise), a true identity convolution.
    pub fn identity_kernel(name: &str, channels: usize, k: usize) -> Self {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
        use rand::SeedableRng;
        Self::center_delta(name, channels, k, 0.0, &mut rng)
    }

    /// Identity weight matrix (rows x cols, ones on the diagonal).
    pub fn identity_matrix(name: &str, rows: usize, cols: usize) -> Self {
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows.min(cols) {
            data[i * cols + i] = 1.0;
        }
        Param {
            name: name.to_string(),
            shape: vec![rows, cols],
            data,
            requires_grad: true,
        }
    }

    /// Puts the parameter on a tape under its name. Frozen parameters come
    /// back untracked, so backward can never allocate a gradient for them;
    /// repeat binds on one tape share a single leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Tensor, TensorError> {
        tape.bind_named(&self.name, &self.data, &self.shape, self.requires_grad)
    }

    pub fn entry(&self) -> CheckpointEntry {
        CheckpointEntry {
            name: self.name.clone(),
            shape: self.shape.clone(),
            requires_grad: self.requires_grad,
        }
    }

    /// FNV-1a over the exact bit patterns; used for freezing soundness.
    pub fn byte_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}
