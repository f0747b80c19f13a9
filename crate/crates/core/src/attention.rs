//! Attention: the dense multi-head baseline and the shuffled sparse layer.
//!
//! The sparse path samples the feature map on gamma^2 interleaved strided
//! lattices, bends each lattice by a learned per-pixel fractional offset
//! (resolved with bilinear interpolation so the offsets stay trainable),
//! runs dense attention independently per subset with shared projection
//! weights, and scatters the attended values back to their lattice slots.
//! Each attention call then sees H*W/gamma^2 tokens instead of H*W.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::flops;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// How predicted offsets are kept inside the clip bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    /// clip * tanh(raw / clip): saturates smoothly, keeps gradients alive
    /// at the bound.
    Smooth,
    /// Hard clamp to [-clip, clip]; zero gradient outside.
    Hard,
}

#[derive(Clone, Debug)]
pub struct SSAConfig {
    /// Sparsity factor; a power of two. 1 degenerates to dense attention
    /// and exists for the equivalence tests.
    pub gamma: usize,
    /// Maximum absolute offset in pixels at this stage's resolution.
    pub offset_clip: f64,
    pub heads: usize,
    /// Channel width of the stage.
    pub dim: usize,
    /// MLP expansion factor.
    pub mlp_ratio: usize,
    pub clip_mode: ClipMode,
}

impl SSAConfig {
    /// Defaults: offset clip of one sparse stride, 4x MLP, smooth clipping.
    pub fn new(dim: usize, heads: usize, gamma: usize) -> Self {
        SSAConfig {
            gamma,
            offset_clip: gamma as f64,
            heads,
            dim,
            mlp_ratio: 4,
            clip_mode: ClipMode::Smooth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 || !self.gamma.is_power_of_two() {
            return Err(Error::Config(format!(
                "gamma must be a power of two >= 1, got {}",
                self.gamma
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.offset_clip < 0.0 {
            return Err(Error::Config(format!(
                "offset_clip must be >= 0, got {}",
                self.offset_clip
            )));
        }
        Ok(())
    }
}

/// Per-pixel sampling offsets: [B, 2, H, W]; channel 0 displaces the
/// first spatial index, channel 1 the second. Every value is inside
/// [-clip, clip].
pub struct OffsetField {
    pub values: TensorId,
    pub clip: f64,
}

/// The gamma^2 sampled subsets, stacked along the batch axis as
/// [B*gamma^2, C, H/gamma, W/gamma] with subset index s = k*gamma + l.
/// The lattice positions needed to scatter the values back are implied
/// by (gamma, s) and recorded here with the geometry.
pub struct SparseSubsets {
    pub stacked: TensorId,
    pub gamma: usize,
    pub batch: usize,
    pub channels: usize,
    pub sub_h: usize,
    pub sub_w: usize,
}

/// Offset-prediction parameters: one zero-initialized 3x3 convolution.
#[derive(Clone, Copy)]
pub struct OffsetParams {
    pub w: TensorId,
    pub b: TensorId,
}

/// Q/K/V/output projection weights, shared across all subsets.
#[derive(Clone, Copy)]
pub struct AttnParams {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

#[derive(Clone, Copy)]
pub struct SsaParams {
    pub offset: OffsetParams,
    pub attn: AttnParams,
}

#[derive(Clone, Copy)]
pub struct MlpParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Full pre-norm transformer block: norm -> token mixing -> norm -> MLP.
#[derive(Clone, Copy)]
pub struct SsaLayerParams {
    pub norm1_g: TensorId,
    pub norm1_b: TensorId,
    pub ssa: SsaParams,
    pub norm2_g: TensorId,
    pub norm2_b: TensorId,
    pub mlp: MlpParams,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ── Token layout helpers ────────────────────────────────────────────

/// [B, C, H, W] -> [B, H*W, C]
pub fn im2tokens<E: Element>(tape: &mut Tape<E>, f: TensorId) -> Result<TensorId> {
    let (b, c, h, w) = tape.value(f).dims4()?;
    let t = tape.permute(f, &[0, 2, 3, 1])?;
    tape.reshape(t, &[b, h * w, c])
}

/// [B, T, C] -> [B, C, H, W] with T == H*W
pub fn tokens2im<E: Element>(
    tape: &mut Tape<E>,
    tokens: TensorId,
    h: usize,
    w: usize,
) -> Result<TensorId> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::Contract(format!(
            "tokens2im: shape {:?} does not cover {}x{}",
            s, h, w
        )));
    }
    let t = tape.reshape(tokens, &[s[0], h, w, s[2]])?;
    tape.permute(t, &[0, 3, 1, 2])
}

// ── Offset prediction ───────────────────────────────────────────────

/// 3x3 convolution C -> 2 followed by saturation at the clip bound.
pub fn predict_offsets<E: Element>(
    tape: &mut Tape<E>,
    f: TensorId,
    params: &OffsetParams,
    clip: f64,
    mode: ClipMode,
) -> Result<OffsetField> {
    let raw = tape.conv2d(f, params.w, Some(params.b), 1, 1)?;
    let values = if clip == 0.0 {
        tape.scale(raw, 0.0)
    } else {
        match mode {
            ClipMode::Smooth => {
                let scaled = tape.scale(raw, 1.0 / clip);
                let sat = tape.tanh_op(scaled);
                tape.scale(sat, clip)
            }
            ClipMode::Hard => tape.clamp(raw, -clip, clip),
        }
    };
    Ok(OffsetField { values, clip })
}

// ── Sparse shuffle / unshuffle ──────────────────────────────────────

/// Constant lattice coordinates for every subset, replicated per batch:
/// base[(b,s), 0, x, y] = gamma*x + k, base[(b,s), 1, x, y] = gamma*y + l.
fn lattice_base<E: Element>(batch: usize, gamma: usize, sub_h: usize, sub_w: usize) -> Tensor<E> {
    let g2 = gamma * gamma;
    let mut t = Tensor::zeros(&[batch * g2, 2, sub_h, sub_w]);
    let data = t.data_mut();
    let pts = sub_h * sub_w;
    for n in 0..batch * g2 {
        let s = n % g2;
        let (k, l) = (s / gamma, s % gamma);
        for x in 0..sub_h {
            for y in 0..sub_w {
                data[n * 2 * pts + x * sub_w + y] = E::from_f64((gamma * x + k) as f64);
                data[n * 2 * pts + pts + x * sub_w + y] = E::from_f64((gamma * y + l) as f64);
            }
        }
    }
    t
}

/// Sample subset (k,l) at (x,y) from f at (gamma*x+k+dr, gamma*y+l+dc),
/// where (dr, dc) is the offset field read at the undisplaced lattice
/// point. Fractional positions resolve by bilinear blend, border-clamped.
pub fn sparse_shuffle<E: Element>(
    tape: &mut Tape<E>,
    f: TensorId,
    offsets: &OffsetField,
    gamma: usize,
) -> Result<SparseSubsets> {
    let (batch, channels, h, w) = tape.value(f).dims4()?;
    if gamma == 0 || h % gamma != 0 || w % gamma != 0 {
        return Err(Error::Geometry(format!(
            "sparse_shuffle: spatial {}x{} not divisible by gamma {}",
            h, w, gamma
        )));
    }
    let (sub_h, sub_w) = (h / gamma, w / gamma);
    let offs_sub = tape.lattice_split(offsets.values, gamma)?;
    let base = tape.constant(lattice_base(batch, gamma, sub_h, sub_w));
    let coords = tape.add(base, offs_sub)?;
    let stacked = tape.bilinear_sample(f, coords)?;
    Ok(SparseSubsets {
        stacked,
        gamma,
        batch,
        channels,
        sub_h,
        sub_w,
    })
}

/// Scatter every attended subset value back to the lattice slot it was
/// sampled for, restoring the full-resolution map.
pub fn unshuffle<E: Element>(tape: &mut Tape<E>, subsets: &SparseSubsets) -> Result<TensorId> {
    tape.lattice_merge(subsets.stacked, subsets.gamma)
}

// ── Dense attention ─────────────────────────────────────────────────

/// Standard multi-head scaled dot-product self-attention over a token
/// matrix [B, T, C]. No positional encoding.
pub fn dense_attention_tokens<E: Element>(
    tape: &mut Tape<E>,
    tokens: TensorId,
    heads: usize,
    p: &AttnParams,
) -> Result<TensorId> {
    let (out, _) = attention_with_probs(tape, tokens, heads, p)?;
    Ok(out)
}

/// Same, returning the attention probability tensor [B*heads, T, T]
/// so tests can check row normalization.
pub(crate) fn attention_with_probs<E: Element>(
    tape: &mut Tape<E>,
    tokens: TensorId,
    heads: usize,
    p: &AttnParams,
) -> Result<(TensorId, TensorId)> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::Contract(format!(
            "attention expects [B, T, C] tokens, got {:?}",
            s
        )));
    }
    let (b, t, c) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape("attention heads", &[c], &[heads]));
    }
    let d = c / heads;

    let flat = tape.reshape(tokens, &[b * t, c])?;
    let q = {
        let x = tape.matmul(flat, p.wq)?;
        tape.add_row_bias(x, p.bq)?
    };
    let k = {
        let x = tape.matmul(flat, p.wk)?;
        tape.add_row_bias(x, p.bk)?
    };
    let v = {
        let x = tape.matmul(flat, p.wv)?;
        tape.add_row_bias(x, p.bv)?
    };

    let split = |tape: &mut Tape<E>, x: TensorId| -> Result<TensorId> {
        let x = tape.reshape(x, &[b, t, heads, d])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, t, d])
    };
    let qh = split(tape, q)?;
    let kh = split(tape, k)?;
    let vh = split(tape, v)?;

    let kt = tape.permute(kh, &[0, 2, 1])?;
    let scale = 1.0 / (d as f64).sqrt();
    let scores = tape.bmm_alpha(qh, kt, scale)?;
    flops::record_score_macs((b * heads * t * t * d) as u64);

    let probs = tape.softmax(scores, 2)?;
    let ctx = tape.bmm_alpha(probs, vh, 1.0)?;
    flops::record_value_macs((b * heads * t * t * d) as u64);

    let merged = {
        let x = tape.reshape(ctx, &[b, heads, t, d])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * t, c])?
    };
    let out = {
        let x = tape.matmul(merged, p.wo)?;
        tape.add_row_bias(x, p.bo)?
    };
    let out = tape.reshape(out, &[b, t, c])?;
    Ok((out, probs))
}

/// Dense attention applied to a feature map [B, C, H, W].
pub fn dense_attention<E: Element>(
    tape: &mut Tape<E>,
    f: TensorId,
    heads: usize,
    p: &AttnParams,
) -> Result<TensorId> {
    let (_, _, h, w) = tape.value(f).dims4()?;
    let tokens = im2tokens(tape, f)?;
    let out = dense_attention_tokens(tape, tokens, heads, p)?;
    tokens2im(tape, out, h, w)
}

// ── Shuffled sparse attention ───────────────────────────────────────

/// Offset prediction -> sparse shuffle -> per-subset dense attention
/// (projection weights shared across subsets) -> scatter back.
pub fn ssa_forward<E: Element>(
    tape: &mut Tape<E>,
    f: TensorId,
    cfg: &SSAConfig,
    params: &SsaParams,
) -> Result<TensorId> {
    cfg.validate()?;
    let offsets = predict_offsets(tape, f, &params.offset, cfg.offset_clip, cfg.clip_mode)?;
    let subsets = sparse_shuffle(tape, f, &offsets, cfg.gamma)?;
    // The stacked subsets are one map of batch B*gamma^2; a single dense
    // attention call runs all subsets independently with shared weights.
    let attended = dense_attention(tape, subsets.stacked, cfg.heads, &params.attn)?;
    let attended_subsets = SparseSubsets {
        stacked: attended,
        ..subsets
    };
    unshuffle(tape, &attended_subsets)
}

/// Pre-norm residual block: f + SSA(norm(f)), then + MLP(norm(.)).
pub fn ssa_layer<E: Element>(
    tape: &mut Tape<E>,
    f: TensorId,
    cfg: &SSAConfig,
    params: &SsaLayerParams,
) -> Result<TensorId> {
    let (b, c, h, w) = tape.value(f).dims4()?;
    let tokens = im2tokens(tape, f)?;
    let flat = tape.reshape(tokens, &[b * h * w, c])?;

    let n1 = tape.layer_norm(flat, params.norm1_g, params.norm1_b, LAYER_NORM_EPS)?;
    let n1_map = {
        let t = tape.reshape(n1, &[b, h * w, c])?;
        tokens2im(tape, t, h, w)?
    };
    let mixed = ssa_forward(tape, n1_map, cfg, &params.ssa)?;
    let mixed_flat = {
        let t = im2tokens(tape, mixed)?;
        tape.reshape(t, &[b * h * w, c])?
    };
    let res1 = tape.add(flat, mixed_flat)?;

    let n2 = tape.layer_norm(res1, params.norm2_g, params.norm2_b, LAYER_NORM_EPS)?;
    let hidden = {
        let x = tape.matmul(n2, params.mlp.w1)?;
        let x = tape.add_row_bias(x, params.mlp.b1)?;
        tape.gelu(x)
    };
    let proj = {
        let x = tape.matmul(hidden, params.mlp.w2)?;
        tape.add_row_bias(x, params.mlp.b2)?
    };
    let res2 = tape.add(res1, proj)?;

    let out_tokens = tape.reshape(res2, &[b, h * w, c])?;
    tokens2im(tape, out_tokens, h, w)
}

/// Dense transformer block with the same residual/MLP structure; the
/// baseline encoder variant.
pub fn dense_layer<E: Element>(
    tape: &mut Tape<E>,
    f: TensorId,
    heads: usize,
    attn: &AttnParams,
    params: &SsaLayerParams,
) -> Result<TensorId> {
    let (b, c, h, w) = tape.value(f).dims4()?;
    let tokens = im2tokens(tape, f)?;
    let flat = tape.reshape(tokens, &[b * h * w, c])?;

    let n1 = tape.layer_norm(flat, params.norm1_g, params.norm1_b, LAYER_NORM_EPS)?;
    let n1_tok = tape.reshape(n1, &[b, h * w, c])?;
    let mixed = dense_attention_tokens(tape, n1_tok, heads, attn)?;
    let mixed_flat = tape.reshape(mixed, &[b * h * w, c])?;
    let res1 = tape.add(flat, mixed_flat)?;

    let n2 = tape.layer_norm(res1, params.norm2_g, params.norm2_b, LAYER_NORM_EPS)?;
    let hidden = {
        let x = tape.matmul(n2, params.mlp.w1)?;
        let x = tape.add_row_bias(x, params.mlp.b1)?;
        tape.gelu(x)
    };
    let proj = {
        let x = tape.matmul(hidden, params.mlp.w2)?;
        tape.add_row_bias(x, params.mlp.b2)?
    };
    let res2 = tape.add(res1, proj)?;

    let out_tokens = tape.reshape(res2, &[b, h * w, c])?;
    tokens2im(tape, out_tokens, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rngs(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_t<E: Element>(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
        Tensor::from_fn(shape, |_| E::from_f64(r.gen::<f64>() * (hi - lo) + lo))
    }

    fn zero_offsets(tape: &mut Tape<f32>, b: usize, h: usize, w: usize) -> OffsetField {
        OffsetField {
            values: tape.constant(Tensor::zeros(&[b, 2, h, w])),
            clip: 1.0,
        }
    }

    fn rand_attn(tape: &mut Tape<f32>, r: &mut ChaCha8Rng, dim: usize) -> AttnParams {
        let mut mk = |shape: &[usize]| {
            let t = rand_t::<f32>(r, shape, -0.3, 0.3);
            tape.constant(t)
        };
        AttnParams {
            wq: mk(&[dim, dim]),
            bq: mk(&[dim]),
            wk: mk(&[dim, dim]),
            bk: mk(&[dim]),
            wv: mk(&[dim, dim]),
            bv: mk(&[dim]),
            wo: mk(&[dim, dim]),
            bo: mk(&[dim]),
        }
    }

    #[test]
    fn shuffle_places_strided_subsets() {
        // 4x4 map holding 0..15 row-major, gamma 2, zero offsets:
        // subset (0,0) = [[0,2],[8,10]], subset (1,1) = [[5,7],[13,15]].
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32));
        let offs = zero_offsets(&mut tape, 1, 4, 4);
        let subs = sparse_shuffle(&mut tape, f, &offs, 2).unwrap();
        let v = tape.value(subs.stacked).data();
        assert_eq!(&v[0..4], &[0.0, 2.0, 8.0, 10.0]); // s=0 -> (k,l)=(0,0)
        assert_eq!(&v[12..16], &[5.0, 7.0, 13.0, 15.0]); // s=3 -> (1,1)
    }

    #[test]
    fn gamma_one_shuffle_is_identity() {
        let mut r = rngs(1);
        let mut tape: Tape<f32> = Tape::new();
        let t = rand_t::<f32>(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
        let f = tape.constant(t.clone());
        let offs = zero_offsets(&mut tape, 2, 4, 4);
        let subs = sparse_shuffle(&mut tape, f, &offs, 1).unwrap();
        assert_eq!(tape.value(subs.stacked).data(), t.data());
    }

    #[test]
    fn two_by_two_degenerates_to_single_pixels() {
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32 + 1.0));
        let offs = zero_offsets(&mut tape, 1, 2, 2);
        let subs = sparse_shuffle(&mut tape, f, &offs, 2).unwrap();
        assert_eq!(tape.shape(subs.stacked), &[4, 1, 1, 1]);
        assert_eq!(tape.value(subs.stacked).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unshuffle_round_trip_is_bit_exact() {
        let mut r = rngs(2);
        for &gamma in &[2usize, 4] {
            for _ in 0..50 {
                let mut tape: Tape<f32> = Tape::new();
                let t = rand_t::<f32>(&mut r, &[1, 2, 8, 8], -10.0, 10.0);
                let f = tape.constant(t.clone());
                let offs = zero_offsets(&mut tape, 1, 8, 8);
                let subs = sparse_shuffle(&mut tape, f, &offs, gamma).unwrap();
                let back = unshuffle(&mut tape, &subs).unwrap();
                let got = tape.value(back).data();
                for (a, b) in got.iter().zip(t.data()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "gamma {gamma}");
                }
            }
        }
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 1, 6, 6]));
        let offs = zero_offsets(&mut tape, 1, 6, 6);
        assert!(sparse_shuffle(&mut tape, f, &offs, 4).is_err());
    }

    #[test]
    fn zero_initialized_offsets_are_exactly_zero() {
        let mut r = rngs(3);
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(rand_t::<f32>(&mut r, &[1, 4, 6, 6], -3.0, 3.0));
        let params = OffsetParams {
            w: tape.constant(Tensor::zeros(&[2, 4, 3, 3])),
            b: tape.constant(Tensor::zeros(&[2])),
        };
        let off = predict_offsets(&mut tape, f, &params, 4.0, ClipMode::Smooth).unwrap();
        assert!(tape.value(off.values).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clipping_saturates_large_offsets() {
        // Raw offset 10 with clip 4: the smooth saturation clip*tanh(raw/clip)
        // lands at 4*tanh(2.5) = 3.946, inside the bound; the hard clamp
        // lands exactly on it.
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        // 1x1 conv via 3x3 kernel with only the center tap set to 10.
        let mut w = Tensor::zeros(&[2, 1, 3, 3]);
        w.data_mut()[4] = 10.0;
        w.data_mut()[13] = 10.0;
        let params = OffsetParams {
            w: tape.constant(w),
            b: tape.constant(Tensor::zeros(&[2])),
        };
        let off = predict_offsets(&mut tape, f, &params, 4.0, ClipMode::Smooth).unwrap();
        for &v in tape.value(off.values).data() {
            assert!(
                (v - 4.0 * (2.5f32).tanh()).abs() < 1e-5 && v <= 4.0,
                "smooth {v}"
            );
        }
        let off = predict_offsets(&mut tape, f, &params, 4.0, ClipMode::Hard).unwrap();
        for &v in tape.value(off.values).data() {
            assert_eq!(v, 4.0);
        }
    }

    #[test]
    fn offsets_respect_clip_bound() {
        let mut r = rngs(4);
        for _ in 0..20 {
            let mut tape: Tape<f32> = Tape::new();
            let f = tape.constant(rand_t::<f32>(&mut r, &[1, 3, 8, 8], -5.0, 5.0));
            let params = OffsetParams {
                w: tape.constant(rand_t::<f32>(&mut r, &[2, 3, 3, 3], -2.0, 2.0)),
                b: tape.constant(rand_t::<f32>(&mut r, &[2], -1.0, 1.0)),
            };
            for mode in [ClipMode::Smooth, ClipMode::Hard] {
                let off = predict_offsets(&mut tape, f, &params, 2.0, mode).unwrap();
                for &v in tape.value(off.values).data() {
                    assert!((-2.0..=2.0).contains(&v), "{mode:?} produced {v}");
                }
            }
        }
    }

    #[test]
    fn gamma_one_zero_offsets_reduces_to_dense_attention() {
        let mut r = rngs(5);
        for seed in 0..50u64 {
            let mut rr = rngs(seed + 1000);
            let mut tape: Tape<f32> = Tape::new();
            let f = tape.constant(rand_t::<f32>(&mut rr, &[1, 32, 16, 16], -1.0, 1.0));
            let attn = rand_attn(&mut tape, &mut rr, 32);
            let cfg = SSAConfig {
                gamma: 1,
                offset_clip: 1.0,
                heads: 4,
                dim: 32,
                mlp_ratio: 4,
                clip_mode: ClipMode::Smooth,
            };
            let params = SsaParams {
                offset: OffsetParams {
                    w: tape.constant(Tensor::zeros(&[2, 32, 3, 3])),
                    b: tape.constant(Tensor::zeros(&[2])),
                },
                attn,
            };
            let sparse = ssa_forward(&mut tape, f, &cfg, &params).unwrap();
            let dense = dense_attention(&mut tape, f, 4, &attn).unwrap();
            let max_diff = crate::tensor::max_abs_diff(tape.value(sparse), tape.value(dense));
            assert!(max_diff < 1e-5, "seed {seed}: diff {max_diff}");
        }
        let _ = &mut r;
    }

    #[test]
    fn score_flops_scale_inverse_quadratically_with_gamma() {
        // At 32x32 the counter must report exactly 16x fewer score MACs
        // for gamma 4 than gamma 1, and 4x per single doubling.
        let mut r = rngs(6);
        let count = |gamma: usize, r: &mut ChaCha8Rng| -> (u64, u64) {
            let mut tape: Tape<f32> = Tape::new();
            let f = tape.constant(rand_t::<f32>(r, &[1, 8, 32, 32], -1.0, 1.0));
            let attn = rand_attn(&mut tape, r, 8);
            let cfg = SSAConfig {
                gamma,
                offset_clip: gamma as f64,
                heads: 2,
                dim: 8,
                mlp_ratio: 4,
                clip_mode: ClipMode::Smooth,
            };
            let params = SsaParams {
                offset: OffsetParams {
                    w: tape.constant(Tensor::zeros(&[2, 8, 3, 3])),
                    b: tape.constant(Tensor::zeros(&[2])),
                },
                attn,
            };
            crate::flops::reset();
            ssa_forward(&mut tape, f, &cfg, &params).unwrap();
            (crate::flops::score_macs(), crate::flops::value_macs())
        };
        let (s1, v1) = count(1, &mut r);
        let (s2, v2) = count(2, &mut r);
        let (s4, v4) = count(4, &mut r);
        assert_eq!(s1, 16 * s4);
        assert_eq!(v1, 16 * v4);
        assert_eq!(s1, 4 * s2);
        assert_eq!(v1, 4 * v2);
    }

    #[test]
    fn output_shape_matches_input_for_all_gammas() {
        let mut r = rngs(7);
        for &gamma in &[2usize, 4, 8] {
            let mut tape: Tape<f32> = Tape::new();
            let f = tape.constant(rand_t::<f32>(&mut r, &[1, 8, 64, 64], -1.0, 1.0));
            let attn = rand_attn(&mut tape, &mut r, 8);
            let cfg = SSAConfig {
                gamma,
                offset_clip: gamma as f64,
                heads: 1,
                dim: 8,
                mlp_ratio: 4,
                clip_mode: ClipMode::Smooth,
            };
            let params = SsaParams {
                offset: OffsetParams {
                    w: tape.constant(rand_t::<f32>(&mut r, &[2, 8, 3, 3], -0.1, 0.1)),
                    b: tape.constant(Tensor::zeros(&[2])),
                },
                attn,
            };
            let out = ssa_forward(&mut tape, f, &cfg, &params).unwrap();
            assert_eq!(tape.shape(out), &[1, 8, 64, 64]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rngs(8);
        let mut tape: Tape<f32> = Tape::new();
        let tokens = tape.constant(rand_t::<f32>(&mut r, &[2, 6, 8], -2.0, 2.0));
        let attn = rand_attn(&mut tape, &mut r, 8);
        let (_, probs) = attention_with_probs(&mut tape, tokens, 2, &attn).unwrap();
        let p = tape.value(probs);
        let (b, t, t2) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        for row in 0..b * t {
            let s: f32 = p.data()[row * t2..(row + 1) * t2].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_attention_is_value_times_output_projection() {
        let mut r = rngs(9);
        let dim = 4;
        let mut tape: Tape<f32> = Tape::new();
        let token = rand_t::<f32>(&mut r, &[1, 1, dim], -1.0, 1.0);
        let tid = tape.constant(token.clone());
        let mut attn = rand_attn(&mut tape, &mut r, dim);
        attn.bq = tape.constant(Tensor::zeros(&[dim]));
        attn.bk = tape.constant(Tensor::zeros(&[dim]));
        attn.bv = tape.constant(Tensor::zeros(&[dim]));
        attn.bo = tape.constant(Tensor::zeros(&[dim]));
        let out = dense_attention_tokens(&mut tape, tid, 1, &attn).unwrap();
        // softmax over one key is 1, so out = token @ Wv @ Wo.
        let flat = tape.reshape(tid, &[1, dim]).unwrap();
        let v = tape.matmul(flat, attn.wv).unwrap();
        let want = tape.matmul(v, attn.wo).unwrap();
        let diff = crate::tensor::max_abs_diff(
            &tape.value(out).clone().reshaped(&[1, dim]).unwrap(),
            tape.value(want),
        );
        assert!(diff < 1e-6, "diff {diff}");
    }

    #[test]
    fn token_permutation_permutes_output() {
        // No positional encoding: permuting tokens permutes the output.
        // Floating-point sums are not permutation-invariant bit-for-bit,
        // so equality is asserted at f32 epsilon scale.
        let mut r = rngs(10);
        for _ in 0..20 {
            let (b, t, c) = (1, 6, 8);
            let tokens = rand_t::<f32>(&mut r, &[b, t, c], -1.0, 1.0);
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..t).collect();
                for i in (1..t).rev() {
                    let j = r.gen_range(0..=i);
                    p.swap(i, j);
                }
                p
            };
            let permuted = Tensor::from_fn(&[b, t, c], |i| {
                let (tok, ch) = (i / c, i % c);
                tokens.data()[perm[tok] * c + ch]
            });
            let mut seeds = rngs(999);
            let mut tape: Tape<f32> = Tape::new();
            let attn = rand_attn(&mut tape, &mut seeds, c);
            let a = tape.constant(tokens.clone());
            let pa = tape.constant(permuted);
            let out = dense_attention_tokens(&mut tape, a, 2, &attn).unwrap();
            let out_p = dense_attention_tokens(&mut tape, pa, 2, &attn).unwrap();
            let ov = tape.value(out).data();
            let opv = tape.value(out_p).data();
            for tok in 0..t {
                for ch in 0..c {
                    let diff = (ov[perm[tok] * c + ch] - opv[tok * c + ch]).abs();
                    assert!(diff < 1e-6, "token {tok} ch {ch}: {diff}");
                }
            }
        }
    }

    #[test]
    fn zeroed_projections_make_layer_an_identity() {
        let mut r = rngs(11);
        let dim = 8;
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(rand_t::<f32>(&mut r, &[1, dim, 4, 4], -2.0, 2.0));
        let mut attn = rand_attn(&mut tape, &mut r, dim);
        attn.wo = tape.constant(Tensor::zeros(&[dim, dim]));
        attn.bo = tape.constant(Tensor::zeros(&[dim]));
        let params = SsaLayerParams {
            norm1_g: tape.constant(Tensor::full(&[dim], 1.0)),
            norm1_b: tape.constant(Tensor::zeros(&[dim])),
            ssa: SsaParams {
                offset: OffsetParams {
                    w: tape.constant(rand_t::<f32>(&mut r, &[2, dim, 3, 3], -0.5, 0.5)),
                    b: tape.constant(Tensor::zeros(&[2])),
                },
                attn,
            },
            norm2_g: tape.constant(Tensor::full(&[dim], 1.0)),
            norm2_b: tape.constant(Tensor::zeros(&[dim])),
            mlp: MlpParams {
                w1: tape.constant(rand_t::<f32>(&mut r, &[dim, 4 * dim], -0.5, 0.5)),
                b1: tape.constant(rand_t::<f32>(&mut r, &[4 * dim], -0.5, 0.5)),
                w2: tape.constant(Tensor::zeros(&[4 * dim, dim])),
                b2: tape.constant(Tensor::zeros(&[dim])),
            },
        };
        let cfg = SSAConfig {
            gamma: 2,
            offset_clip: 2.0,
            heads: 2,
            dim,
            mlp_ratio: 4,
            clip_mode: ClipMode::Smooth,
        };
        let out = ssa_layer(&mut tape, f, &cfg, &params).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(f).data());
    }

    #[test]
    fn layer_output_stays_finite_at_large_scale() {
        let mut r = rngs(12);
        let dim = 8;
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(rand_t::<f32>(&mut r, &[1, dim, 4, 4], -1000.0, 1000.0));
        let attn = rand_attn(&mut tape, &mut r, dim);
        let params = SsaLayerParams {
            norm1_g: tape.constant(Tensor::full(&[dim], 1.0)),
            norm1_b: tape.constant(Tensor::zeros(&[dim])),
            ssa: SsaParams {
                offset: OffsetParams {
                    w: tape.constant(rand_t::<f32>(&mut r, &[2, dim, 3, 3], -0.1, 0.1)),
                    b: tape.constant(Tensor::zeros(&[2])),
                },
                attn,
            },
            norm2_g: tape.constant(Tensor::full(&[dim], 1.0)),
            norm2_b: tape.constant(Tensor::zeros(&[dim])),
            mlp: MlpParams {
                w1: tape.constant(rand_t::<f32>(&mut r, &[dim, 4 * dim], -0.3, 0.3)),
                b1: tape.constant(Tensor::zeros(&[4 * dim])),
                w2: tape.constant(rand_t::<f32>(&mut r, &[4 * dim, dim], -0.3, 0.3)),
                b2: tape.constant(Tensor::zeros(&[dim])),
            },
        };
        let cfg = SSAConfig {
            gamma: 2,
            offset_clip: 2.0,
            heads: 2,
            dim,
            mlp_ratio: 4,
            clip_mode: ClipMode::Smooth,
        };
        let out = ssa_layer(&mut tape, f, &cfg, &params).unwrap();
        assert!(tape.value(out).is_all_finite());
    }

    #[test]
    fn offset_gradients_flow_from_upstream_loss() {
        // A non-lattice sample point must push nonzero gradient into the
        // offset predictor weights.
        let mut r = rngs(13);
        let dim = 4;
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(rand_t::<f32>(&mut r, &[1, dim, 4, 4], -1.0, 1.0));
        let off_w = tape.leaf(rand_t::<f32>(&mut r, &[2, dim, 3, 3], 0.05, 0.2), true);
        let off_b = tape.leaf(rand_t::<f32>(&mut r, &[2], 0.05, 0.1), true);
        let attn = rand_attn(&mut tape, &mut r, dim);
        let cfg = SSAConfig {
            gamma: 2,
            offset_clip: 2.0,
            heads: 1,
            dim,
            mlp_ratio: 4,
            clip_mode: ClipMode::Smooth,
        };
        let params = SsaParams {
            offset: OffsetParams { w: off_w, b: off_b },
            attn,
        };
        let out = ssa_forward(&mut tape, f, &cfg, &params).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let gw = tape.grad(off_w).unwrap();
        assert!(
            gw.iter().any(|&v| v != 0.0),
            "no gradient reached the offset weights"
        );
    }
}
