//! Fusing the pre- and post-change feature streams.
//!
//! The channel-reweighting fusion pools both streams globally, squeezes
//! the pooled vector through a shared reduction, predicts one weight per
//! channel per stream, normalizes the two weights against each other,
//! and mixes the streams as a per-channel convex combination. The
//! subtract/add/concat difference modules are the baselines it is
//! compared against.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};

/// Squeeze-and-reweight parameters. `w1` reduces C -> C/r; `w2`/`w3`
/// expand back to C, one per stream. No biases: the weights alone decide
/// the balance, and copied w2 == w3 makes the fusion an exact mean.
#[derive(Clone, Copy)]
pub struct CeffParams {
    pub w1: TensorId,
    pub w2: TensorId,
    pub w3: TensorId,
}

/// Per-channel stream weights, each [B, C], summing to 1 per channel.
pub struct ChannelWeights {
    pub v1: TensorId,
    pub v2: TensorId,
}

/// Channel reduction inside the squeeze step.
pub const CEFF_REDUCTION: usize = 4;

/// Change-enhanced fusion of two equally-shaped [B, C, H, W] streams.
///
/// p = GAP(pre + post); pbar = relu(p W1); v1 = pbar W2, v2 = pbar W3;
/// (v1h, v2h) = two-way softmax per channel; out = v1h*pre + v2h*post.
///
/// The two-way softmax is computed as sigmoid of the weight difference,
/// which is algebraically identical and numerically stable at any
/// magnitude.
pub fn ceff<E: Element>(
    tape: &mut Tape<E>,
    f_pre: TensorId,
    f_post: TensorId,
    params: &CeffParams,
) -> Result<(TensorId, ChannelWeights)> {
    if tape.shape(f_pre) != tape.shape(f_post) {
        return Err(Error::shape("ceff", tape.shape(f_pre), tape.shape(f_post)));
    }
    let summed = tape.add(f_pre, f_post)?;
    let pooled = tape.global_avg_pool(summed)?; // [B, C]
    let squeezed = {
        let x = tape.matmul(pooled, params.w1)?; // [B, C/r]
        tape.relu(x)
    };
    let v1_raw = tape.matmul(squeezed, params.w2)?; // [B, C]
    let v2_raw = tape.matmul(squeezed, params.w3)?;

    // exp(a) / (exp(a) + exp(b)) == sigmoid(a - b)
    let d12 = tape.sub(v1_raw, v2_raw)?;
    let d21 = tape.sub(v2_raw, v1_raw)?;
    let v1 = tape.sigmoid(d12);
    let v2 = tape.sigmoid(d21);

    let pre_scaled = tape.mul_channel(f_pre, v1)?;
    let post_scaled = tape.mul_channel(f_post, v2)?;
    let enhanced = tape.add(pre_scaled, post_scaled)?;
    Ok((enhanced, ChannelWeights { v1, v2 }))
}

/// The baseline combine rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffMode {
    Subtract,
    Add,
    Concat,
}

impl DiffMode {
    pub fn parse(s: &str) -> Result<DiffMode> {
        match s {
            "subtract" => Ok(DiffMode::Subtract),
            "add" => Ok(DiffMode::Add),
            "concat" => Ok(DiffMode::Concat),
            other => Err(Error::Config(format!(
                "unknown difference mode '{}' (expected subtract|add|concat)",
                other
            ))),
        }
    }

    /// Input channel count of the first combiner convolution.
    pub fn combined_channels(self, c: usize) -> usize {
        match self {
            DiffMode::Concat => 2 * c,
            _ => c,
        }
    }
}

/// Combiner convolution stack: conv3x3 -> norm -> relu -> conv3x3,
/// output channels equal to the input stream width.
#[derive(Clone, Copy)]
pub struct DiffParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub norm_g: TensorId,
    pub norm_b: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Difference-module fusion: combine the streams by `mode` and push the
/// result through two convolutions with normalization and ReLU between.
pub fn diff_fuse<E: Element>(
    tape: &mut Tape<E>,
    f_pre: TensorId,
    f_post: TensorId,
    mode: DiffMode,
    params: &DiffParams,
) -> Result<TensorId> {
    if tape.shape(f_pre) != tape.shape(f_post) {
        return Err(Error::shape(
            "diff_fuse",
            tape.shape(f_pre),
            tape.shape(f_post),
        ));
    }
    let combined = diff_combine(tape, f_pre, f_post, mode)?;
    let (b, _, h, w) = tape.value(combined).dims4()?;
    let x = tape.conv2d(combined, params.w1, Some(params.b1), 1, 1)?;
    let c = tape.shape(x)[1];
    // Channel-wise norm applied per pixel.
    let x = {
        let t = crate::attention::im2tokens(tape, x)?;
        let flat = tape.reshape(t, &[b * h * w, c])?;
        let n = tape.layer_norm(
            flat,
            params.norm_g,
            params.norm_b,
            crate::attention::LAYER_NORM_EPS,
        )?;
        let t = tape.reshape(n, &[b, h * w, c])?;
        crate::attention::tokens2im(tape, t, h, w)?
    };
    let x = tape.relu(x);
    tape.conv2d(x, params.w2, Some(params.b2), 1, 1)
}

/// Just the mode combination, before the convolution stack.
pub fn diff_combine<E: Element>(
    tape: &mut Tape<E>,
    f_pre: TensorId,
    f_post: TensorId,
    mode: DiffMode,
) -> Result<TensorId> {
    match mode {
        DiffMode::Subtract => tape.sub(f_pre, f_post),
        DiffMode::Add => tape.add(f_pre, f_post),
        DiffMode::Concat => tape.concat(&[f_pre, f_post], 1),
    }
}
