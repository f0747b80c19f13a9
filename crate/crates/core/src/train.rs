//! The training loop: shuffled mini-batches, pixel cross-entropy, AdamW
//! with linear learning-rate decay, per-epoch validation, checkpoints,
//! and a plain-text metric log.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, AugmentCfg};
use crate::checkpoint;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::metrics::{confusion, metrics, ConfusionCounts, MetricReport};
use crate::model::{ChangeNet, NORM_MEAN, NORM_STD};
use crate::optim::{linear_decay_lr, AdamW, AdamWConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub flip: bool,
    pub scale_crop: bool,
    pub blur: bool,
    pub color_jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 4.1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            flip: true,
            scale_crop: false,
            blur: false,
            color_jitter: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "{} must be in [0, 1), got {}",
                    name, b
                )));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn augment_cfg(&self) -> AugmentCfg {
        AugmentCfg {
            flip: self.flip,
            scale_crop: self.scale_crop,
            blur: self.blur,
            color_jitter: self.color_jitter,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
}

/// One metric-log line: `epoch,loss,f1,iou,oa` at 6 decimal places.
pub fn format_log_line(r: &EpochRecord) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6}",
        r.epoch, r.loss, r.f1, r.iou, r.oa
    )
}

/// Per-sample augmentation stream, independent of batch order.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mixed = seed
        ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Per-channel mean/std over every image of the split.
fn compute_normalizer(samples: &[Sample]) -> ([f32; 3], [f32; 3]) {
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0usize;
    for s in samples {
        for img in [&s.pair.pre, &s.pair.post] {
            let hw = img.numel() / 3;
            for c in 0..3 {
                for &v in &img.data()[c * hw..(c + 1) * hw] {
                    sum[c] += v as f64;
                    sum_sq[c] += (v as f64) * (v as f64);
                }
            }
            count += hw;
        }
    }
    let mut mean = [0.0f32; 3];
    let mut std = [1.0f32; 3];
    for c in 0..3 {
        let m = sum[c] / count as f64;
        let var = (sum_sq[c] / count as f64 - m * m).max(1e-8);
        mean[c] = m as f32;
        std[c] = var.sqrt() as f32;
    }
    (mean, std)
}

fn batch_tensors(samples: &[&Sample]) -> (Tensor<f32>, Tensor<f32>, Vec<u8>) {
    let (h, w) = (samples[0].pair.height(), samples[0].pair.width());
    let b = samples.len();
    let mut pre = Tensor::zeros(&[b, 3, h, w]);
    let mut post = Tensor::zeros(&[b, 3, h, w]);
    let mut target = Vec::with_capacity(b * h * w);
    for (i, s) in samples.iter().enumerate() {
        pre.data_mut()[i * 3 * h * w..(i + 1) * 3 * h * w].copy_from_slice(s.pair.pre.data());
        post.data_mut()[i * 3 * h * w..(i + 1) * 3 * h * w].copy_from_slice(s.pair.post.data());
        target.extend_from_slice(&s.mask.values);
    }
    (pre, post, target)
}

/// Micro-averaged change-class metrics over a sample set.
pub fn evaluate(model: &mut ChangeNet, samples: &[Sample]) -> Result<MetricReport> {
    let mut counts = ConfusionCounts::default();
    for s in samples {
        let pred = model.predict(&s.pair)?;
        counts.merge(&confusion(&pred, &s.mask)?);
    }
    metrics(&counts)
}

/// Train `model` in place. Writes `ckpt_epoch_{n}.sfck` and a
/// `metrics.log` under `out_dir` when given. Returns one record per
/// epoch (training loss, validation change-class F1/IoU/OA).
pub fn fit(
    model: &mut ChangeNet,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Train("empty training set".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    // Input statistics come from the training split and ship with the
    // checkpoint as frozen entries.
    let (mean, std) = compute_normalizer(train);
    for (name, vals) in [(NORM_MEAN, mean), (NORM_STD, std)] {
        let entry = model
            .store
            .get_mut(name)
            .ok_or_else(|| Error::Train("model missing input normalizer entries".into()))?;
        entry.tensor = Tensor::new(&[3], vals.to_vec())?;
    }

    let mut opt: AdamW<f32> = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    });
    let aug_cfg = cfg.augment_cfg();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut log_file = match out_dir {
        Some(dir) => Some(fs::File::create(dir.join("metrics.log"))?),
        None => None,
    };

    for epoch in 0..cfg.epochs {
        let lr = linear_decay_lr(epoch, cfg.epochs, cfg.lr0)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_0000 ^ (epoch as u64) << 1);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&idx| {
                    if aug_cfg.any() {
                        let mut r = sample_rng(cfg.seed, epoch, idx);
                        let s = &train[idx];
                        let (pair, mask) = augment(&s.pair, &s.mask, &aug_cfg, &mut r);
                        Sample { pair, mask }
                    } else {
                        train[idx].clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = augmented.iter().collect();
            let (pre_raw, post_raw, target) = batch_tensors(&refs);
            let pre = model.normalize(&pre_raw)?;
            let post = model.normalize(&post_raw)?;

            let (mut tape, logits, bound) = model.forward_batch(pre, post, true)?;
            let loss_id = tape.cross_entropy(logits, &target)?;
            let loss = tape.value(loss_id).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {} batch {}",
                    epoch, batch_idx
                )));
            }
            tape.backward(loss_id)?;
            for (name, id) in &bound {
                let trainable = model.store.get(name).map(|e| e.trainable).unwrap_or(false);
                if !trainable {
                    continue;
                }
                let grad = tape.grad_tensor(*id);
                let entry = model.store.get_mut(name).expect("bound param exists");
                opt.step(name, &mut entry.tensor, grad.data(), lr)?;
            }
            epoch_loss += loss;
            batches += 1;
        }

        let report = if val.is_empty() {
            MetricReport {
                f1: 0.0,
                iou: 0.0,
                oa: 0.0,
            }
        } else {
            evaluate(model, val)?
        };
        let record = EpochRecord {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            f1: report.f1,
            iou: report.iou,
            oa: report.oa,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", format_log_line(&record))?;
        }
        if let Some(dir) = out_dir {
            checkpoint::save(model, &dir.join(format!("ckpt_epoch_{}.sfck", epoch)))?;
        }
        log.push(record);
    }
    Ok(log)
}
