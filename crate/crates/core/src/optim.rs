//! AdamW with decoupled weight decay, plus the linear learning-rate
//! schedule.

use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<E> {
    m: Vec<E>,
    v: Vec<E>,
    step: u64,
}

/// Optimizer state keyed by parameter name; the map order fixes the
/// (irrelevant but deterministic) state iteration order.
pub struct AdamW<E: Element> {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Moments<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// One decoupled update:
    /// theta <- theta - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * theta ).
    /// A non-finite gradient aborts, naming the parameter.
    pub fn step(&mut self, name: &str, param: &mut Tensor<E>, grad: &[E], lr: f64) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(Error::shape("adamw_step", param.shape(), &[grad.len()]));
        }
        if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite gradient in parameter '{}' at element {}",
                name, bad
            )));
        }
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![E::ZERO; grad.len()],
                v: vec![E::ZERO; grad.len()],
                step: 0,
            });
        st.step += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::ONE - b1;
        let one_m_b2 = E::ONE - b2;
        let bc1 = E::from_f64(1.0 - self.cfg.beta1.powi(st.step as i32));
        let bc2 = E::from_f64(1.0 - self.cfg.beta2.powi(st.step as i32));
        let eps = E::from_f64(self.cfg.eps);
        let lr_e = E::from_f64(lr);
        let wd = E::from_f64(self.cfg.weight_decay);
        let p = param.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            st.m[i] = b1 * st.m[i] + one_m_b1 * g;
            st.v[i] = b2 * st.v[i] + one_m_b2 * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            p[i] = p[i] - lr_e * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
        Ok(())
    }
}

/// lr = lr0 * (1 - epoch / total): the initial rate at epoch 0, decaying
/// linearly towards (but never reaching) zero at the last epoch.
pub fn linear_decay_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::Contract(format!(
            "epoch {} out of range 0..{}",
            epoch, total_epochs
        )));
    }
    Ok(lr0 * (1.0 - epoch as f64 / total_epochs as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_update_is_pure_decoupled_decay() {
        // wd 0.01, lr 0.1, theta 1: theta' = 1 - 0.1*0.01*1 = 0.999.
        let mut opt: AdamW<f64> = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::full(&[1], 1.0);
        opt.step("w", &mut p, &[0.0], 0.1).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        // Bias-corrected m_hat/sqrt(v_hat) at step 1 equals g/|g| for any
        // magnitude, so the sized update is lr (up to eps), opposite the
        // gradient sign. Weight decay off to isolate the effect.
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for &g in &[1e-6f64, 0.5, 3.0, 4000.0, -2.5e-4, -7.0] {
            let mut opt: AdamW<f64> = AdamW::new(cfg);
            let mut p = Tensor::full(&[1], 0.3);
            opt.step("w", &mut p, &[g], 0.01).unwrap();
            let delta = p.data()[0] - 0.3;
            // Exact first step is -lr * g/(|g| + eps): magnitude lr up to
            // the eps/|g| correction.
            let want = 0.01 * g.abs() / (g.abs() + 1e-8);
            assert!((delta.abs() - want).abs() < 1e-12, "g {g}: delta {delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn identical_steps_are_bit_identical() {
        let run = || {
            let mut opt: AdamW<f32> = AdamW::new(AdamWConfig::default());
            let mut p = Tensor::from_fn(&[4], |i| i as f32 * 0.25 - 0.4);
            let g = [0.3f32, -0.7, 0.001, 2.0];
            opt.step("w", &mut p, &g, 0.01).unwrap();
            opt.step("w", &mut p, &g, 0.01).unwrap();
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_aborts_with_the_parameter_name() {
        let mut opt: AdamW<f32> = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::full(&[2], 1.0);
        let err = opt
            .step("enc.s0.patch.w", &mut p, &[0.0, f32::NAN], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("enc.s0.patch.w"), "{err}");
    }

    #[test]
    fn shrinkage_invariant_under_zero_grads() {
        // n zero-grad steps shrink theta by exactly (1 - lr*wd)^n.
        let mut opt: AdamW<f64> = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::full(&[1], 2.0);
        for _ in 0..5 {
            opt.step("w", &mut p, &[0.0], 0.05).unwrap();
        }
        let want = 2.0 * (1.0 - 0.05 * 0.01f64).powi(5);
        assert!((p.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn schedule_hits_the_documented_points() {
        let lr0 = 4.1e-4;
        assert_eq!(linear_decay_lr(0, 300, lr0).unwrap(), lr0);
        assert!((linear_decay_lr(150, 300, lr0).unwrap() - lr0 / 2.0).abs() < 1e-18);
        assert!((linear_decay_lr(299, 300, lr0).unwrap() - lr0 / 300.0).abs() < 1e-18);
        assert!(linear_decay_lr(300, 300, lr0).is_err());
    }

    #[test]
    fn schedule_is_non_increasing() {
        let lr0 = 1e-3;
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let lr = linear_decay_lr(e, 100, lr0).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
