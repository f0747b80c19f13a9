//! Synthetic co-registered change pairs with exact ground truth.
//!
//! A pair shares a gradient background and a set of persistent shapes.
//! The semantic changes are bright rectangles inserted into only one of
//! the two images (appearing or disappearing); exactly their pixels make
//! up the mask. Nuisance factors (a global brightness shift and shadow
//! polygons on the post image, sensor noise on both) perturb the pixels
//! without ever touching the ground truth.
//!
//! Values are quantized to the 8-bit grid so a PNG round trip is
//! lossless and generation is byte-reproducible under a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ChangeMask, ImagePair, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub size: usize,
    /// Persistent shapes drawn identically into both images.
    pub background_shapes: usize,
    /// Appearing/disappearing rectangles; exactly these enter the mask.
    pub change_shapes: usize,
    /// Inclusive side-length range of a change rectangle.
    pub change_size: (usize, usize),
    /// Max magnitude of the global brightness shift on the post image.
    pub brightness_shift: f64,
    /// Additive Gaussian noise applied independently to both images.
    pub noise_sigma: f64,
    /// Darkened polygons drawn into the post image only.
    pub shadow_polygons: usize,
    /// Placement attempts before giving up on a change shape.
    pub max_retries: usize,
}

impl SyntheticSpec {
    pub fn new(size: usize) -> Self {
        SyntheticSpec {
            size,
            background_shapes: 6,
            change_shapes: 3,
            change_size: ((size / 10).max(4), size / 4),
            brightness_shift: 0.08,
            noise_sigma: 0.02,
            shadow_polygons: 2,
            max_retries: 100,
        }
    }

    /// Scale every nuisance magnitude by `level` (0 disables them all).
    pub fn with_nuisance_level(mut self, level: f64) -> Self {
        self.brightness_shift = 0.08 * level;
        self.noise_sigma = 0.02 * level;
        self.shadow_polygons = (2.0 * level).round() as usize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("image size {} too small", self.size)));
        }
        let (lo, hi) = self.change_size;
        if lo == 0 || lo > hi || hi >= self.size {
            return Err(Error::Config(format!(
                "change_size {:?} invalid for image size {}",
                self.change_size, self.size
            )));
        }
        if self.brightness_shift < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("nuisance magnitudes must be >= 0".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct Canvas {
    size: usize,
    /// [3, size, size]
    data: Vec<f64>,
}

impl Canvas {
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.size + y) * self.size + x
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, color: [f64; 3]) {
        for y in y0..(y0 + h).min(self.size) {
            for x in x0..(x0 + w).min(self.size) {
                for c in 0..3 {
                    let i = self.idx(c, y, x);
                    self.data[i] = color[c];
                }
            }
        }
    }

    fn fill_ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3]) {
        for y in 0..self.size {
            for x in 0..self.size {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    for c in 0..3 {
                        let i = self.idx(c, y, x);
                        self.data[i] = color[c];
                    }
                }
            }
        }
    }

    fn darken_triangle(&mut self, pts: [(f64, f64); 3], factor: f64) {
        let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
            (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
        };
        for y in 0..self.size {
            for x in 0..self.size {
                let p = (x as f64, y as f64);
                let d0 = edge(pts[0], pts[1], p);
                let d1 = edge(pts[1], pts[2], p);
                let d2 = edge(pts[2], pts[0], p);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                if !(neg && pos) {
                    for c in 0..3 {
                        let i = self.idx(c, y, x);
                        self.data[i] *= factor;
                    }
                }
            }
        }
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Deterministically generate one pair and its exact mask.
pub fn generate_pair(spec: &SyntheticSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.size;

    // Shared background: smooth two-color gradient.
    let c0: [f64; 3] = [0.25, 0.25, 0.25].map(|b| b + rng.gen::<f64>() * 0.3);
    let c1: [f64; 3] = [0.25, 0.25, 0.25].map(|b| b + rng.gen::<f64>() * 0.3);
    let mut shared = Canvas {
        size: s,
        data: vec![0.0; 3 * s * s],
    };
    for y in 0..s {
        for x in 0..s {
            let t = (x + y) as f64 / (2 * s - 2).max(1) as f64;
            for c in 0..3 {
                let i = shared.idx(c, y, x);
                shared.data[i] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // Persistent shapes, identical in both images.
    for i in 0..spec.background_shapes {
        let color: [f64; 3] = [0.0, 0.0, 0.0].map(|_| 0.2 + rng.gen::<f64>() * 0.4);
        if i % 2 == 0 {
            let w = 3 + rng.gen_range(0..s / 3);
            let h = 3 + rng.gen_range(0..s / 3);
            let x0 = rng.gen_range(0..s - 2);
            let y0 = rng.gen_range(0..s - 2);
            shared.fill_rect(x0, y0, w, h, color);
        } else {
            let cx = rng.gen::<f64>() * s as f64;
            let cy = rng.gen::<f64>() * s as f64;
            let rx = 2.0 + rng.gen::<f64>() * s as f64 / 5.0;
            let ry = 2.0 + rng.gen::<f64>() * s as f64 / 5.0;
            shared.fill_ellipse(cx, cy, rx, ry, color);
        }
    }

    let mut pre = Canvas {
        size: s,
        data: shared.data.clone(),
    };
    let mut post = Canvas {
        size: s,
        data: shared.data,
    };
    let mut mask = vec![0u8; s * s];

    // Semantic changes: bright rectangles present in exactly one image,
    // non-overlapping so the mask is the exact union.
    for _ in 0..spec.change_shapes {
        let (lo, hi) = spec.change_size;
        let mut placed = false;
        for _attempt in 0..spec.max_retries {
            let w = rng.gen_range(lo..=hi);
            let h = rng.gen_range(lo..=hi);
            if w >= s || h >= s {
                continue;
            }
            let x0 = rng.gen_range(0..=s - w);
            let y0 = rng.gen_range(0..=s - h);
            let overlaps = (y0..y0 + h).any(|y| (x0..x0 + w).any(|x| mask[y * s + x] == 1));
            if overlaps {
                continue;
            }
            let color: [f64; 3] = [0.0, 0.0, 0.0].map(|_| 0.72 + rng.gen::<f64>() * 0.26);
            let appearing = rng.gen::<bool>();
            if appearing {
                post.fill_rect(x0, y0, w, h, color);
            } else {
                pre.fill_rect(x0, y0, w, h, color);
            }
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    mask[y * s + x] = 1;
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place a change shape after {} attempts",
                spec.max_retries
            )));
        }
    }

    // Nuisance, never reflected in the mask.
    for _ in 0..spec.shadow_polygons {
        let pt = |rng: &mut ChaCha8Rng| (rng.gen::<f64>() * s as f64, rng.gen::<f64>() * s as f64);
        let tri = [pt(&mut rng), pt(&mut rng), pt(&mut rng)];
        let factor = 0.55 + rng.gen::<f64>() * 0.25;
        post.darken_triangle(tri, factor);
    }
    if spec.brightness_shift > 0.0 {
        let delta = (rng.gen::<f64>() * 2.0 - 1.0) * spec.brightness_shift;
        for v in post.data.iter_mut() {
            *v += delta;
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in pre.data.iter_mut() {
            *v += normal(&mut rng) * spec.noise_sigma;
        }
        for v in post.data.iter_mut() {
            *v += normal(&mut rng) * spec.noise_sigma;
        }
    }

    let to_tensor = |c: Canvas| {
        Tensor::new(&[3, s, s], c.data.iter().map(|&v| quantize(v)).collect()).expect("sized")
    };
    Ok(Sample {
        pair: ImagePair::new(to_tensor(pre), to_tensor(post))?,
        mask: ChangeMask::from_values(s, s, mask)?,
    })
}

/// A reproducible dataset: sample i uses seed `base_seed + i`.
pub fn generate_dataset(spec: &SyntheticSpec, n: usize, base_seed: u64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| generate_pair(spec, base_seed.wrapping_add(i as u64)))
        .collect()
}
