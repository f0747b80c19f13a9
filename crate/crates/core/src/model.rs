//! The full Siamese change-detection network: a 4-stage hierarchical
//! encoder of sparse-attention blocks shared between both image streams,
//! per-stage stream fusion, and a decoder that lifts the fused pyramid
//! back to a full-resolution 2-class logit map.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    self, AttnParams, ClipMode, MlpParams, OffsetParams, SSAConfig, SsaLayerParams, SsaParams,
};
use crate::dataset::{ChangeMask, ImagePair};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::fusion::{self, CeffParams, DiffMode, DiffParams, CEFF_REDUCTION};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Which token mixer the encoder blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    /// Shuffled sparse attention with learned offsets.
    Sparse,
    /// Plain dense attention; the baseline encoder.
    Dense,
}

/// Which stream-fusion module joins the two encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Ceff,
    Diff(DiffMode),
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub stage_depths: [usize; 4],
    pub stage_channels: [usize; 4],
    pub stage_heads: [usize; 4],
    pub gamma: usize,
    /// Square input side the encoder runs at; pairs of any other square
    /// size are resized in and the logits resized back.
    pub input_size: usize,
    pub num_classes: usize,
    pub decoder_dim: usize,
    pub attention: AttnKind,
    pub fusion: FusionKind,
    /// Hard-clamp the predicted offsets instead of the smooth saturation.
    pub hard_clip: bool,
}

impl ModelConfig {
    /// Full-scale configuration: stage depths 3/3/9/3, widths
    /// 64/128/320/512, gamma 4, 512x512 input.
    pub fn base() -> Self {
        ModelConfig {
            stage_depths: [3, 3, 9, 3],
            stage_channels: [64, 128, 320, 512],
            stage_heads: [1, 2, 5, 8],
            gamma: 4,
            input_size: 512,
            num_classes: 2,
            decoder_dim: 256,
            attention: AttnKind::Sparse,
            fusion: FusionKind::Ceff,
            hard_clip: false,
        }
    }

    /// Desk-scale configuration used by the toy training runs.
    pub fn toy() -> Self {
        ModelConfig {
            stage_depths: [1, 1, 1, 1],
            stage_channels: [8, 16, 32, 64],
            stage_heads: [1, 2, 4, 8],
            gamma: 2,
            input_size: 64,
            num_classes: 2,
            decoder_dim: 32,
            attention: AttnKind::Sparse,
            fusion: FusionKind::Ceff,
            hard_clip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 || !self.gamma.is_power_of_two() {
            return Err(Error::Config(format!(
                "gamma must be a power of two >= 1, got {}",
                self.gamma
            )));
        }
        if self.input_size == 0 || self.input_size % (32 * self.gamma) != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by 32*gamma = {}",
                self.input_size,
                32 * self.gamma
            )));
        }
        for i in 0..4 {
            if self.stage_depths[i] == 0 || self.stage_channels[i] == 0 || self.stage_heads[i] == 0
            {
                return Err(Error::Config(format!("stage {} has a zero extent", i)));
            }
            if self.stage_channels[i] % self.stage_heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {} not divisible by heads {}",
                    i, self.stage_channels[i], self.stage_heads[i]
                )));
            }
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if self.decoder_dim == 0 {
            return Err(Error::Config("decoder_dim must be positive".into()));
        }
        if matches!(self.fusion, FusionKind::Ceff)
            && self.stage_channels.iter().any(|&c| c < CEFF_REDUCTION)
        {
            return Err(Error::Config(format!(
                "stage channels {:?} too narrow for the {}x squeeze",
                self.stage_channels, CEFF_REDUCTION
            )));
        }
        Ok(())
    }

    /// Stage strides are 4, 2, 2, 2; spatial side at stage i.
    pub fn stage_size(&self, i: usize) -> usize {
        self.input_size >> (2 + i)
    }

    fn ssa_config(&self, stage: usize) -> SSAConfig {
        SSAConfig {
            gamma: self.gamma,
            offset_clip: self.gamma as f64,
            heads: self.stage_heads[stage],
            dim: self.stage_channels[stage],
            mlp_ratio: 4,
            clip_mode: if self.hard_clip {
                ClipMode::Hard
            } else {
                ClipMode::Smooth
            },
        }
    }

    /// The smallest input side this configuration accepts; parameter
    /// shapes do not depend on it, so it is used to materialize weights.
    pub fn min_input_size(&self) -> usize {
        32 * self.gamma
    }
}

// ── Parameter store and binder ──────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std)
    Normal(f64),
    /// Normal(0, sqrt(2 / fan_in)); for convolution kernels.
    HeConv,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<E: Element> {
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

/// Named parameter buffers. Creation order follows the first forward
/// walk; the map itself iterates sorted by name, which fixes the
/// checkpoint layout and the optimizer visit order.
pub struct ParamStore<E: Element> {
    entries: BTreeMap<String, ParamEntry<E>>,
    rng: ChaCha8Rng,
}

impl<E: Element> ParamStore<E> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn draw_normal(&mut self, std: f64) -> f64 {
        // Box-Muller; one draw per call keeps the stream simple.
        let u1: f64 = self.rng.gen::<f64>().max(1e-300);
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    }

    fn materialize(&mut self, shape: &[usize], init: Init) -> Tensor<E> {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, E::ONE),
            Init::Normal(std) => {
                let numel: usize = shape.iter().product();
                let data = (0..numel)
                    .map(|_| E::from_f64(self.draw_normal(std)))
                    .collect();
                Tensor::new(shape, data).expect("sized buffer")
            }
            Init::HeConv => {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                self.materialize(shape, Init::Normal(std))
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<E>> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: String, entry: ParamEntry<E>) {
        self.entries.insert(name, entry);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<E>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across trainable parameters.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }
}

/// Binds store parameters onto a tape as leaves, creating missing ones
/// with their declared initializer on first touch. Rebinding a name
/// returns the same leaf, so weight sharing is by construction: both
/// encoder streams read the very same tape node.
pub struct Vars<'a, E: Element> {
    pub store: &'a mut ParamStore<E>,
    pub tape: &'a mut Tape<E>,
    trainable_binding: bool,
    prefix: String,
    bound: BTreeMap<String, TensorId>,
}

impl<'a, E: Element> Vars<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, tape: &'a mut Tape<E>, trainable: bool) -> Self {
        Vars {
            store,
            tape,
            trainable_binding: trainable,
            prefix: String::new(),
            bound: BTreeMap::new(),
        }
    }

    pub fn scoped<R>(&mut self, seg: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let saved = self.prefix.len();
        self.prefix.push_str(seg);
        self.prefix.push('.');
        let r = f(self);
        self.prefix.truncate(saved);
        r
    }

    fn bind(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<TensorId> {
        let full = format!("{}{}", self.prefix, name);
        if let Some(&id) = self.bound.get(&full) {
            return Ok(id);
        }
        // An existing entry keeps its stored trainability.
        let (tensor, trainable) = match self.store.entries.get(&full) {
            Some(e) => {
                if e.tensor.shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{}' has shape {:?}, expected {:?}",
                        full,
                        e.tensor.shape(),
                        shape
                    )));
                }
                (e.tensor.clone(), e.trainable)
            }
            None => {
                let t = self.store.materialize(shape, init);
                self.store.entries.insert(
                    full.clone(),
                    ParamEntry {
                        tensor: t.clone(),
                        trainable,
                    },
                );
                (t, trainable)
            }
        };
        let id = self.tape.leaf(tensor, trainable && self.trainable_binding);
        self.bound.insert(full, id);
        Ok(id)
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<TensorId> {
        self.bind(name, shape, init, true)
    }

    /// Non-trainable named buffer (input normalizer statistics).
    pub fn get_frozen(&mut self, name: &str, shape: &[usize], init: Init) -> Result<TensorId> {
        self.bind(name, shape, init, false)
    }

    /// Every (name, leaf) bound during this forward, sorted by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&String, TensorId)> {
        self.bound.iter().map(|(n, &id)| (n, id))
    }
}

// ── Parameter groups ────────────────────────────────────────────────

const PROJ_STD: f64 = 0.02;

fn bind_attn<E: Element>(vars: &mut Vars<E>, dim: usize) -> Result<AttnParams> {
    Ok(AttnParams {
        wq: vars.get("wq", &[dim, dim], Init::Normal(PROJ_STD))?,
        bq: vars.get("bq", &[dim], Init::Zeros)?,
        wk: vars.get("wk", &[dim, dim], Init::Normal(PROJ_STD))?,
        bk: vars.get("bk", &[dim], Init::Zeros)?,
        wv: vars.get("wv", &[dim, dim], Init::Normal(PROJ_STD))?,
        bv: vars.get("bv", &[dim], Init::Zeros)?,
        wo: vars.get("wo", &[dim, dim], Init::Normal(PROJ_STD))?,
        bo: vars.get("bo", &[dim], Init::Zeros)?,
    })
}

fn bind_block<E: Element>(
    vars: &mut Vars<E>,
    dim: usize,
    mlp_ratio: usize,
) -> Result<SsaLayerParams> {
    let hidden = dim * mlp_ratio;
    let attn = vars.scoped("attn", |v| bind_attn(v, dim))?;
    // Zero-initialized offset head: the first steps sample the exact
    // strided grid, a stable start.
    let offset = OffsetParams {
        w: vars.get("off.w", &[2, dim, 3, 3], Init::Zeros)?,
        b: vars.get("off.b", &[2], Init::Zeros)?,
    };
    Ok(SsaLayerParams {
        norm1_g: vars.get("n1.g", &[dim], Init::Ones)?,
        norm1_b: vars.get("n1.b", &[dim], Init::Zeros)?,
        ssa: SsaParams { offset, attn },
        norm2_g: vars.get("n2.g", &[dim], Init::Ones)?,
        norm2_b: vars.get("n2.b", &[dim], Init::Zeros)?,
        mlp: MlpParams {
            w1: vars.get("mlp.w1", &[dim, hidden], Init::Normal(PROJ_STD))?,
            b1: vars.get("mlp.b1", &[hidden], Init::Zeros)?,
            w2: vars.get("mlp.w2", &[hidden, dim], Init::Normal(PROJ_STD))?,
            b2: vars.get("mlp.b2", &[dim], Init::Zeros)?,
        },
    })
}

// ── Encoder ─────────────────────────────────────────────────────────

/// Channel-wise layer norm applied to a feature map through its token view.
fn map_layer_norm<E: Element>(
    tape: &mut Tape<E>,
    f: TensorId,
    g: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let (bb, c, h, w) = tape.value(f).dims4()?;
    let t = attention::im2tokens(tape, f)?;
    let flat = tape.reshape(t, &[bb * h * w, c])?;
    let n = tape.layer_norm(flat, g, b, attention::LAYER_NORM_EPS)?;
    let t = tape.reshape(n, &[bb, h * w, c])?;
    attention::tokens2im(tape, t, h, w)
}

/// One encoder stream: four stages of strided embedding plus attention
/// blocks. Returns the per-stage feature maps at 1/4, 1/8, 1/16, 1/32
/// of the input side.
pub fn encoder_forward<E: Element>(
    vars: &mut Vars<E>,
    img: TensorId,
    cfg: &ModelConfig,
) -> Result<[TensorId; 4]> {
    let (_, c_img, h, w) = vars.tape.value(img).dims4()?;
    if c_img != 3 || h != w || h != cfg.input_size {
        return Err(Error::Geometry(format!(
            "encoder expects [B, 3, {0}, {0}] input, got [{1}, {2}, {3}]",
            cfg.input_size, c_img, h, w
        )));
    }
    let mut x = img;
    let mut feats = Vec::with_capacity(4);
    for stage in 0..4 {
        let dim = cfg.stage_channels[stage];
        let prev = if stage == 0 {
            3
        } else {
            cfg.stage_channels[stage - 1]
        };
        let (k, s, p) = if stage == 0 { (7, 4, 3) } else { (3, 2, 1) };
        x = vars.scoped(&format!("enc.s{stage}"), |v| {
            let w_id = v.get("patch.w", &[dim, prev, k, k], Init::HeConv)?;
            let b_id = v.get("patch.b", &[dim], Init::Zeros)?;
            let mut f = v.tape.conv2d(x, w_id, Some(b_id), s, p)?;
            let ng = v.get("patch.ng", &[dim], Init::Ones)?;
            let nb = v.get("patch.nb", &[dim], Init::Zeros)?;
            f = map_layer_norm(v.tape, f, ng, nb)?;
            let ssa_cfg = cfg.ssa_config(stage);
            for blk in 0..cfg.stage_depths[stage] {
                f = v.scoped(&format!("blk{blk}"), |v| {
                    let params = bind_block(v, dim, ssa_cfg.mlp_ratio)?;
                    match cfg.attention {
                        AttnKind::Sparse => attention::ssa_layer(v.tape, f, &ssa_cfg, &params),
                        AttnKind::Dense => attention::dense_layer(
                            v.tape,
                            f,
                            ssa_cfg.heads,
                            &params.ssa.attn,
                            &params,
                        ),
                    }
                })?;
            }
            Ok(f)
        })?;
        feats.push(x);
    }
    Ok([feats[0], feats[1], feats[2], feats[3]])
}

// ── Fusion and decoder ──────────────────────────────────────────────

fn fuse_stage<E: Element>(
    vars: &mut Vars<E>,
    stage: usize,
    f_pre: TensorId,
    f_post: TensorId,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    let dim = cfg.stage_channels[stage];
    vars.scoped(&format!("fuse.s{stage}"), |v| match cfg.fusion {
        FusionKind::Ceff => {
            let params = CeffParams {
                w1: v.get("w1", &[dim, dim / CEFF_REDUCTION], Init::Normal(PROJ_STD))?,
                w2: v.get("w2", &[dim / CEFF_REDUCTION, dim], Init::Normal(PROJ_STD))?,
                w3: v.get("w3", &[dim / CEFF_REDUCTION, dim], Init::Normal(PROJ_STD))?,
            };
            let (enh, _) = fusion::ceff(v.tape, f_pre, f_post, &params)?;
            Ok(enh)
        }
        FusionKind::Diff(mode) => {
            let c_in = mode.combined_channels(dim);
            let params = DiffParams {
                w1: v.get("w1", &[dim, c_in, 3, 3], Init::HeConv)?,
                b1: v.get("b1", &[dim], Init::Zeros)?,
                norm_g: v.get("ng", &[dim], Init::Ones)?,
                norm_b: v.get("nb", &[dim], Init::Zeros)?,
                w2: v.get("w2", &[dim, dim, 3, 3], Init::HeConv)?,
                b2: v.get("b2", &[dim], Init::Zeros)?,
            };
            fusion::diff_fuse(v.tape, f_pre, f_post, mode, &params)
        }
    })
}

/// Project each fused stage to the decoder width, upsample everything to
/// the stage-1 grid, fuse with a 3x3 convolution, then climb back to the
/// input resolution with a stride-2 transpose convolution, a bilinear
/// x2, and a 1x1 head.
fn decoder_forward<E: Element>(
    vars: &mut Vars<E>,
    fused: &[TensorId; 4],
    cfg: &ModelConfig,
) -> Result<TensorId> {
    let d = cfg.decoder_dim;
    let top = cfg.stage_size(0);
    let mut lifted = Vec::with_capacity(4);
    for (stage, &f) in fused.iter().enumerate() {
        let c = cfg.stage_channels[stage];
        let p = vars.scoped(&format!("dec.lat{stage}"), |v| {
            let w = v.get("w", &[d, c, 1, 1], Init::HeConv)?;
            let b = v.get("b", &[d], Init::Zeros)?;
            let x = v.tape.conv2d(f, w, Some(b), 1, 0)?;
            if stage == 0 {
                Ok(x)
            } else {
                v.tape.resize_bilinear(x, top, top)
            }
        })?;
        lifted.push(p);
    }
    let cat = vars.tape.concat(&lifted, 1)?;
    let x = vars.scoped("dec.fuse", |v| {
        let w = v.get("w", &[d, 4 * d, 3, 3], Init::HeConv)?;
        let b = v.get("b", &[d], Init::Zeros)?;
        let x = v.tape.conv2d(cat, w, Some(b), 1, 1)?;
        Ok(v.tape.relu(x))
    })?;
    let x = vars.scoped("dec.up", |v| {
        let w = v.get("w", &[d, d, 2, 2], Init::HeConv)?;
        let b = v.get("b", &[d], Init::Zeros)?;
        let x = v.tape.conv_transpose2d(x, w, Some(b), 2, 0)?;
        Ok(v.tape.relu(x))
    })?;
    let x = vars
        .tape
        .resize_bilinear(x, cfg.input_size, cfg.input_size)?;
    vars.scoped("dec.head", |v| {
        let w = v.get("w", &[cfg.num_classes, d, 1, 1], Init::HeConv)?;
        let b = v.get("b", &[cfg.num_classes], Init::Zeros)?;
        v.tape.conv2d(x, w, Some(b), 1, 0)
    })
}

/// Full forward pass over a normalized batch pair. Both streams run
/// through the same bound encoder leaves (Siamese sharing). If the
/// input side differs from the configured size, the pair is resized in
/// and the logits are resized back to the data resolution.
pub fn forward_pair<E: Element>(
    vars: &mut Vars<E>,
    pre: TensorId,
    post: TensorId,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    if vars.tape.shape(pre) != vars.tape.shape(post) {
        return Err(Error::shape(
            "forward_pair",
            vars.tape.shape(pre),
            vars.tape.shape(post),
        ));
    }
    let (_, _, h, w) = vars.tape.value(pre).dims4()?;
    if h != w {
        return Err(Error::Geometry(format!(
            "inputs must be square, got {}x{}",
            h, w
        )));
    }
    let data_size = h;
    let (pre, post) = if data_size == cfg.input_size {
        (pre, post)
    } else {
        (
            vars.tape
                .resize_bilinear(pre, cfg.input_size, cfg.input_size)?,
            vars.tape
                .resize_bilinear(post, cfg.input_size, cfg.input_size)?,
        )
    };
    let feats_pre = encoder_forward(vars, pre, cfg)?;
    let feats_post = encoder_forward(vars, post, cfg)?;
    let mut fused = Vec::with_capacity(4);
    for stage in 0..4 {
        fused.push(fuse_stage(
            vars,
            stage,
            feats_pre[stage],
            feats_post[stage],
            cfg,
        )?);
    }
    let fused = [fused[0], fused[1], fused[2], fused[3]];
    let logits = decoder_forward(vars, &fused, cfg)?;
    if data_size == cfg.input_size {
        Ok(logits)
    } else {
        vars.tape.resize_bilinear(logits, data_size, data_size)
    }
}

// ── Mask prediction and resizing ────────────────────────────────────

/// Per-pixel argmax over 2-class logits [B, 2, H, W]; an exact tie
/// resolves to class 0 (no change).
pub fn predict_mask(logits: &Tensor<f32>) -> Result<Vec<ChangeMask>> {
    let (b, classes, h, w) = logits.dims4()?;
    if classes != 2 {
        return Err(Error::Contract(format!(
            "predict_mask expects 2-class logits, got {} channels",
            classes
        )));
    }
    let d = logits.data();
    let mut masks = Vec::with_capacity(b);
    for bi in 0..b {
        let base = bi * 2 * h * w;
        let values = (0..h * w)
            .map(|i| u8::from(d[base + h * w + i] > d[base + i]))
            .collect();
        masks.push(ChangeMask { h, w, values });
    }
    Ok(masks)
}

/// Bilinear resize of a raw [C, H, W] or [B, C, H, W] tensor.
pub fn resize_raw(t: &Tensor<f32>, new_size: usize) -> Result<Tensor<f32>> {
    let s = t.shape().to_vec();
    let (planes, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 => (s[0] * s[1], s[2], s[3]),
        _ => {
            return Err(Error::Contract(format!(
                "resize expects [C,H,W] or [B,C,H,W], got {:?}",
                s
            )))
        }
    };
    if h != w {
        return Err(Error::Geometry(format!(
            "resize expects square input, got {}x{}",
            h, w
        )));
    }
    let mut out_shape = s.clone();
    let n = out_shape.len();
    out_shape[n - 2] = new_size;
    out_shape[n - 1] = new_size;
    let mut out = Tensor::zeros(&out_shape);
    crate::kernels::sample::resize_bilinear_fwd(
        t.data(),
        out.data_mut(),
        planes,
        h,
        w,
        new_size,
        new_size,
    );
    Ok(out)
}

/// Resize both images of a pair to a new square side.
pub fn resize_pair(pair: &ImagePair, new_size: usize) -> Result<ImagePair> {
    ImagePair::new(
        resize_raw(&pair.pre, new_size)?,
        resize_raw(&pair.post, new_size)?,
    )
}

/// Resize a logit map back to the evaluation resolution; masks are taken
/// from the resized logits.
pub fn resize_logits(logits: &Tensor<f32>, new_size: usize) -> Result<Tensor<f32>> {
    resize_raw(logits, new_size)
}

// ── Concrete f32 model ──────────────────────────────────────────────

/// Input normalizer: per-channel mean/std entries in the store.
pub const NORM_MEAN: &str = "norm.mean";
pub const NORM_STD: &str = "norm.std";

pub struct ChangeNet {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
}

impl ChangeNet {
    /// Build a model with freshly initialized weights. One throwaway
    /// forward at the smallest valid size materializes every parameter
    /// (their shapes do not depend on the input size).
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let mut tape: Tape<f32> = Tape::new();
        {
            let mut vars = Vars::new(&mut store, &mut tape, false);
            let size = cfg.min_input_size();
            let pre = vars.tape.constant(Tensor::zeros(&[1, 3, size, size]));
            let post = vars.tape.constant(Tensor::zeros(&[1, 3, size, size]));
            bind_normalizer(&mut vars)?;
            let probe_cfg = ModelConfig {
                input_size: size,
                ..cfg.clone()
            };
            forward_pair(&mut vars, pre, post, &probe_cfg)?;
        }
        Ok(ChangeNet { cfg, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Normalize a raw [B, 3, H, W] batch with the stored statistics.
    pub fn normalize(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mean = &self
            .store
            .get(NORM_MEAN)
            .ok_or_else(|| Error::Checkpoint("missing input normalizer".into()))?
            .tensor;
        let std = &self
            .store
            .get(NORM_STD)
            .ok_or_else(|| Error::Checkpoint("missing input normalizer".into()))?
            .tensor;
        let (b, c, h, w) = batch.dims4()?;
        let mut out = batch.clone();
        let d = out.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let m = mean.data()[ci];
                let s = std.data()[ci].max(1e-6);
                for v in &mut d[(bi * c + ci) * h * w..][..h * w] {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(out)
    }

    /// Forward a normalized batch, returning the tape, the logits node,
    /// and the bound trainable parameters.
    pub fn forward_batch(
        &mut self,
        pre: Tensor<f32>,
        post: Tensor<f32>,
        trainable: bool,
    ) -> Result<(Tape<f32>, TensorId, Vec<(String, TensorId)>)> {
        let mut tape = Tape::new();
        let mut vars = Vars::new(&mut self.store, &mut tape, trainable);
        let pre_id = vars.tape.constant(pre);
        let post_id = vars.tape.constant(post);
        let logits = forward_pair(&mut vars, pre_id, post_id, &self.cfg)?;
        let bound: Vec<(String, TensorId)> =
            vars.bound_params().map(|(n, id)| (n.clone(), id)).collect();
        Ok((tape, logits, bound))
    }

    /// Inference on one pair: normalize, forward, argmax.
    pub fn predict(&mut self, pair: &ImagePair) -> Result<ChangeMask> {
        let logits = self.infer_logits(pair)?;
        Ok(predict_mask(&logits)?.remove(0))
    }

    /// Raw logits for one pair at the pair's own resolution.
    pub fn infer_logits(&mut self, pair: &ImagePair) -> Result<Tensor<f32>> {
        let (h, w) = (pair.height(), pair.width());
        if h != w {
            return Err(Error::Geometry(format!(
                "pair must be square, got {}x{}",
                h, w
            )));
        }
        let to_batch =
            |t: &Tensor<f32>| Tensor::new(&[1, 3, h, w], t.data().to_vec()).expect("sized");
        let pre = self.normalize(&to_batch(&pair.pre))?;
        let post = self.normalize(&to_batch(&pair.post))?;
        let (tape, logits, _) = self.forward_batch(pre, post, false)?;
        Ok(tape.value(logits).clone())
    }
}

pub(crate) fn bind_normalizer<E: Element>(vars: &mut Vars<E>) -> Result<(TensorId, TensorId)> {
    let m = vars.get_frozen(NORM_MEAN, &[3], Init::Zeros)?;
    let s = vars.get_frozen(NORM_STD, &[3], Init::Ones)?;
    Ok((m, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_batch(seed: u64, b: usize, size: usize) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 3, size, size], |_| r.gen::<f32>())
    }

    #[test]
    fn toy_encoder_produces_the_documented_pyramid() {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new(0);
        let mut tape: Tape<f32> = Tape::new();
        let mut vars = Vars::new(&mut store, &mut tape, false);
        let img = vars.tape.constant(rand_batch(1, 2, 64));
        let feats = encoder_forward(&mut vars, img, &cfg).unwrap();
        let want = [(8, 16), (16, 8), (32, 4), (64, 2)];
        for (i, &(c, s)) in want.iter().enumerate() {
            assert_eq!(tape.shape(feats[i]), &[2, c, s, s], "stage {i}");
        }
    }

    #[test]
    fn stride_schedule_matches_the_full_scale_config() {
        // Spatial sides H/4, H/8, H/16, H/32 with the documented widths.
        let cfg = ModelConfig::base();
        assert_eq!(
            [
                cfg.stage_size(0),
                cfg.stage_size(1),
                cfg.stage_size(2),
                cfg.stage_size(3)
            ],
            [128, 64, 32, 16]
        );
        assert_eq!(cfg.stage_channels, [64, 128, 320, 512]);
        cfg.validate().unwrap();
    }

    #[test]
    fn logits_have_two_channels_at_input_resolution() {
        let mut model = ChangeNet::new(ModelConfig::toy(), 2).unwrap();
        let pre = rand_batch(3, 2, 64);
        let post = rand_batch(4, 2, 64);
        let (tape, logits, _) = model.forward_batch(pre, post, false).unwrap();
        assert_eq!(tape.shape(logits), &[2, 2, 64, 64]);
    }

    #[test]
    fn forward_replay_is_bit_identical_and_stream_order_matters_only_in_values() {
        let mut model = ChangeNet::new(ModelConfig::toy(), 5).unwrap();
        let pre = rand_batch(6, 1, 64);
        let post = rand_batch(7, 1, 64);
        let (t1, l1, _) = model
            .forward_batch(pre.clone(), post.clone(), false)
            .unwrap();
        let (t2, l2, _) = model
            .forward_batch(pre.clone(), post.clone(), false)
            .unwrap();
        let a = t1.value(l1).data();
        let b = t2.value(l2).data();
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Swapping the streams changes values (fusion is stream-aware)
        // but never shapes.
        let (t3, l3, _) = model.forward_batch(post, pre, false).unwrap();
        assert_eq!(t1.shape(l1), t3.shape(l3));
        assert_ne!(a, t3.value(l3).data());
    }

    #[test]
    fn siamese_encoder_binds_each_weight_once() {
        let mut model = ChangeNet::new(ModelConfig::toy(), 8).unwrap();
        let pre = rand_batch(9, 1, 64);
        let post = rand_batch(10, 1, 64);
        let (_, _, bound) = model.forward_batch(pre, post, true).unwrap();
        let mut names: Vec<&String> = bound.iter().map(|(n, _)| n).collect();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len(), "a parameter was bound twice");
        // Both streams went through the encoder, yet each encoder weight
        // appears exactly once: the streams share tape leaves.
        assert_eq!(
            bound.iter().filter(|(n, _)| n.starts_with("enc.")).count(),
            model
                .store
                .iter()
                .filter(|(n, _)| n.starts_with("enc."))
                .count()
        );
    }

    #[test]
    fn gradients_reach_every_offset_head() {
        let mut model = ChangeNet::new(ModelConfig::toy(), 11).unwrap();
        let pre = rand_batch(12, 1, 64);
        let post = rand_batch(13, 1, 64);
        let (mut tape, logits, bound) = model.forward_batch(pre, post, true).unwrap();
        let target: Vec<u8> = (0..64 * 64).map(|i| (i % 2) as u8).collect();
        let loss = tape.cross_entropy(logits, &target).unwrap();
        tape.backward(loss).unwrap();
        let mut offset_heads = 0;
        for (name, id) in &bound {
            if name.ends_with("off.w") {
                offset_heads += 1;
                let g = tape.grad(*id).expect("offset weights reached");
                assert!(g.iter().any(|&v| v != 0.0), "zero gradient into {name}");
            }
        }
        assert_eq!(offset_heads, 4, "one offset head per stage");
    }

    #[test]
    fn parameter_counts_are_frozen() {
        // Independent enumeration oracle: closed-form totals from the
        // configuration, computed without touching the model code.
        fn oracle(cfg: &ModelConfig) -> usize {
            let d = cfg.decoder_dim;
            let mut total = 0usize;
            for i in 0..4 {
                let c = cfg.stage_channels[i];
                let p = if i == 0 { 3 } else { cfg.stage_channels[i - 1] };
                let k = if i == 0 { 7 } else { 3 };
                total += c * p * k * k + c + 2 * c; // patch conv + its norm
                total += cfg.stage_depths[i]
                    * (4 * (c * c + c)      // q/k/v/o projections
                        + 2 * c * 9 + 2     // offset head
                        + 4 * c             // two layer norms
                        + 8 * c * c + 5 * c); // mlp
                total += 3 * c * c / 4; // ceff squeeze + two expands
                total += d * c + d; // decoder lateral
            }
            total += d * 4 * d * 9 + d; // decoder fuse conv
            total += d * d * 4 + d; // transpose conv
            total += 2 * d + 2; // head
            total
        }

        let toy = ChangeNet::new(ModelConfig::toy(), 0).unwrap();
        assert_eq!(toy.param_count(), oracle(&ModelConfig::toy()));
        assert_eq!(toy.param_count(), 143_874);
        assert_eq!(oracle(&ModelConfig::base()), 26_492_262);
    }

    #[test]
    fn predict_mask_argmax_and_tie_break() {
        let logits = Tensor::new(
            &[1, 2, 1, 3],
            vec![
                1.0, 0.0, 0.5, // class-0 logits
                0.0, 1.0, 0.5, // class-1 logits
            ],
        )
        .unwrap();
        let masks = predict_mask(&logits).unwrap();
        assert_eq!(masks[0].values, vec![0, 1, 0]);
    }

    #[test]
    fn predict_mask_matches_per_pixel_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let logits = Tensor::from_fn(&[2, 2, 5, 5], |_| r.gen::<f32>() * 4.0 - 2.0);
            let masks = predict_mask(&logits).unwrap();
            let d = logits.data();
            for b in 0..2 {
                for i in 0..25 {
                    let l0 = d[b * 50 + i];
                    let l1 = d[b * 50 + 25 + i];
                    let want = u8::from(l1 > l0);
                    assert_eq!(masks[b].values[i], want);
                }
            }
        }
    }

    #[test]
    fn resize_identity_and_constant_are_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(22);
        let t = Tensor::from_fn(&[3, 16, 16], |_| r.gen::<f32>());
        let same = resize_raw(&t, 16).unwrap();
        assert_eq!(same.data(), t.data());

        let c = Tensor::full(&[3, 8, 8], 0.375f32);
        let up = resize_raw(&c, 32).unwrap();
        for &v in up.data() {
            assert!((v - 0.375).abs() < 1e-6);
        }
    }

    #[test]
    fn up_down_resize_of_a_smooth_gradient_stays_close() {
        // 64 -> 128 -> 64 on a smooth ramp: max error under 2% of range.
        let t = Tensor::from_fn(&[1, 64, 64], |i| {
            let (y, x) = (i / 64, i % 64);
            ((x + y) as f32) / 126.0
        });
        let up = resize_raw(&t, 128).unwrap();
        let down = resize_raw(&up, 64).unwrap();
        let worst = t
            .data()
            .iter()
            .zip(down.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 0.02, "max error {worst}");
    }

    #[test]
    fn non_square_resize_is_rejected() {
        let t = Tensor::zeros(&[3, 8, 16]);
        assert!(resize_raw(&t, 32).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.gamma = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.input_size = 48; // not divisible by 32*gamma
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.stage_heads = [3, 2, 4, 8]; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        // gamma=4 demands input divisible by 128.
        let mut cfg = ModelConfig::toy();
        cfg.gamma = 4;
        assert!(cfg.validate().is_err());
        cfg.input_size = 128;
        cfg.validate().unwrap();
    }

    #[test]
    fn dense_attention_variant_runs() {
        let cfg = ModelConfig {
            attention: AttnKind::Dense,
            ..ModelConfig::toy()
        };
        let mut model = ChangeNet::new(cfg, 30).unwrap();
        let pre = rand_batch(31, 1, 64);
        let post = rand_batch(32, 1, 64);
        let (tape, logits, _) = model.forward_batch(pre, post, false).unwrap();
        assert_eq!(tape.shape(logits), &[1, 2, 64, 64]);
    }

    #[test]
    fn diff_fusion_variants_run() {
        for mode in [DiffMode::Subtract, DiffMode::Add, DiffMode::Concat] {
            let cfg = ModelConfig {
                fusion: FusionKind::Diff(mode),
                ..ModelConfig::toy()
            };
            let mut model = ChangeNet::new(cfg, 33).unwrap();
            let pre = rand_batch(34, 1, 64);
            let post = rand_batch(35, 1, 64);
            let (tape, logits, _) = model.forward_batch(pre, post, false).unwrap();
            assert_eq!(tape.shape(logits), &[1, 2, 64, 64]);
        }
    }

    #[test]
    fn resize_protocol_handles_other_data_sizes() {
        // gamma 4 model at 128 accepts 64-pixel pairs end to end.
        let cfg = ModelConfig {
            gamma: 4,
            input_size: 128,
            ..ModelConfig::toy()
        };
        let mut model = ChangeNet::new(cfg, 36).unwrap();
        let pre = rand_batch(37, 1, 64);
        let post = rand_batch(38, 1, 64);
        let (tape, logits, _) = model.forward_batch(pre, post, false).unwrap();
        assert_eq!(tape.shape(logits), &[1, 2, 64, 64]);
    }
}
