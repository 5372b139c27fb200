//! Cross-channel interaction attention: an adaptive-width 1-D convolution
//! over globally pooled channel descriptors, squashed to per-channel gates.

use alloc::format;
use alloc::vec;

use crate::error::{invalid, Result};
use crate::math;
use crate::tensor::{Tape, Tensor, Var};

/// Default slope of the channel/kernel mapping.
pub const DEFAULT_GAMMA: u32 = 2;
/// Default offset of the channel/kernel mapping.
pub const DEFAULT_B: i32 = 1;

/// Kernel width for `channels` channels: the odd integer nearest to
/// `|(log2 C - b) / gamma|`, ties going up, never wider than the largest odd
/// number `<= C`.
pub fn kernel_size(channels: usize, gamma: u32, b: i32) -> Result<usize> {
    if channels < 2 {
        return Err(invalid(format!("kernel_size needs C >= 2, got {channels}")));
    }
    if gamma < 1 {
        return Err(invalid("gamma must be >= 1"));
    }
    let t = math::abs((math::log2(channels as f64) - b as f64) / gamma as f64);
    // Odd numbers sit at the centres of the intervals [2m, 2m + 2).
    let k = 2 * (math::floor(t / 2.0) as usize) + 1;
    let max_odd = if channels % 2 == 1 { channels } else { channels - 1 };
    Ok(k.min(max_odd))
}

/// Channel count whose kernel width is `k`: `2^(gamma*k + b)`.
pub fn channel_dim(k: usize, gamma: u32, b: i32) -> Result<u64> {
    if k.is_multiple_of(2) {
        return Err(invalid(format!("kernel width {k} must be odd")));
    }
    let exp = gamma as i64 * k as i64 + b as i64;
    if !(0..64).contains(&exp) {
        return Err(invalid(format!("2^{exp} does not fit in 64 bits")));
    }
    Ok(1u64 << exp)
}

/// Configuration and learnable kernel of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct CisConfig {
    pub gamma: u32,
    pub b: i32,
    pub channels: usize,
    pub kernel_weights: Tensor,
}

impl CisConfig {
    /// Adaptive width for `channels`, kernel initialised to a uniform average.
    pub fn adaptive(channels: usize, gamma: u32, b: i32) -> Result<Self> {
        let k = kernel_size(channels, gamma, b)?;
        Self::with_width(channels, k, gamma, b)
    }

    /// A fixed, caller-chosen odd kernel width.
    pub fn with_width(channels: usize, k: usize, gamma: u32, b: i32) -> Result<Self> {
        if k.is_multiple_of(2) || k == 0 {
            return Err(invalid(format!("kernel width {k} must be odd")));
        }
        Ok(Self {
            gamma,
            b,
            channels,
            kernel_weights: Tensor::vector(vec![1.0 / k as f64; k]).with_grad(),
        })
    }

    pub fn k(&self) -> usize {
        self.kernel_weights.len()
    }
}

/// Per-channel gates in `(0, 1)`, as tape values.
#[derive(Debug, Clone, Copy)]
pub struct ChannelWeights(pub Var);

/// Reweights an `H×W×C` map by `sigmoid(conv1d(gap(x), kernel))`.
pub fn cis_forward(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    channels: usize,
) -> Result<(Var, ChannelWeights)> {
    let shape = tape.shape(x);
    if shape.len() != 3 || shape[2] != channels {
        return Err(invalid(format!(
            "attention expects {channels} channels, got shape {shape:?}"
        )));
    }
    let pooled = tape.global_avg_pool(x)?;
    let mixed = tape.conv1d(pooled, kernel)?;
    let omega = tape.sigmoid(mixed);
    let out = tape.mul_channel(x, omega)?;
    Ok((out, ChannelWeights(omega)))
}
