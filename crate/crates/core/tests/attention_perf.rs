//! Measured-cost invariants that complement the exact counter checks:
//! at a 128x128 map, doubling the sparsity factor buys at least a 2.5x
//! wall-clock reduction (the counter predicts 4x).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscd_core::attention::{ssa_forward, AttnParams, ClipMode, OffsetParams, SSAConfig, SsaParams};
use sscd_core::parallel;
use sscd_core::tape::Tape;
use sscd_core::tensor::Tensor;

fn forward_secs(gamma: usize) -> f64 {
    parallel::run_single_threaded(|| {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut tape: Tape<f32> = Tape::new();
        let c = 64;
        let f = tape.constant(Tensor::from_fn(&[1, c, 128, 128], |_| r.gen::<f32>() - 0.5));
        let mut mk = |tape: &mut Tape<f32>, shape: &[usize]| {
            let t = Tensor::from_fn(shape, |_| (r.gen::<f32>() - 0.5) * 0.1);
            tape.constant(t)
        };
        let params = SsaParams {
            offset: OffsetParams {
                w: tape.constant(Tensor::zeros(&[2, c, 3, 3])),
                b: tape.constant(Tensor::zeros(&[2])),
            },
            attn: AttnParams {
                wq: mk(&mut tape, &[c, c]),
                bq: mk(&mut tape, &[c]),
                wk: mk(&mut tape, &[c, c]),
                bk: mk(&mut tape, &[c]),
                wv: mk(&mut tape, &[c, c]),
                bv: mk(&mut tape, &[c]),
                wo: mk(&mut tape, &[c, c]),
                bo: mk(&mut tape, &[c]),
            },
        };
        let cfg = SSAConfig {
            gamma,
            offset_clip: gamma as f64,
            heads: 1,
            dim: c,
            mlp_ratio: 4,
            clip_mode: ClipMode::Smooth,
        };
        let t0 = Instant::now();
        ssa_forward(&mut tape, f, &cfg, &params).unwrap();
        t0.elapsed().as_secs_f64()
    })
}

#[test]
fn doubling_gamma_cuts_wall_clock_by_at_least_2_5x() {
    let t2 = forward_secs(2);
    let t4 = forward_secs(4);
    let ratio = t2 / t4;
    assert!(ratio >= 2.5, "gamma 2 -> 4 wall ratio {ratio:.2} < 2.5");
}
