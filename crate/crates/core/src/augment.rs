//! Training-time augmentation.
//!
//! Geometric transforms (flips, scale-crop) are drawn once and applied
//! jointly to both images and the mask — bilinear for images, nearest
//! for the mask so it stays binary. Photometric transforms (blur, color
//! jitter) are drawn independently per image and never touch the mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ChangeMask, ImagePair};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AugmentCfg {
    pub flip: bool,
    pub scale_crop: bool,
    pub blur: bool,
    pub color_jitter: bool,
}

impl AugmentCfg {
    pub fn none() -> Self {
        AugmentCfg {
            flip: false,
            scale_crop: false,
            blur: false,
            color_jitter: false,
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.scale_crop || self.blur || self.color_jitter
    }
}

/// Scale range of the random scale-crop.
const SCALE_LO: f64 = 0.8;
const SCALE_HI: f64 = 1.2;
/// Crop-center jitter as a fraction of the image side.
const JITTER_FRAC: f64 = 0.1;
const BLUR_SIGMA_MAX: f64 = 1.5;
const BRIGHTNESS_MAX: f64 = 0.1;
const CONTRAST_SPAN: f64 = 0.1;

struct Geometric {
    flip_h: bool,
    flip_v: bool,
    /// None: flips only, applied as an exact index mirror.
    scale: Option<(f64, f64, f64)>, // (s, jitter_x, jitter_y) in pixels
}

/// Augment one sample. With every switch off the output equals the
/// input exactly.
pub fn augment(
    pair: &ImagePair,
    mask: &ChangeMask,
    cfg: &AugmentCfg,
    rng: &mut ChaCha8Rng,
) -> (ImagePair, ChangeMask) {
    let (h, w) = (pair.height(), pair.width());

    // One shared draw for everything geometric.
    let geo = Geometric {
        flip_h: cfg.flip && rng.gen::<bool>(),
        flip_v: cfg.flip && rng.gen::<bool>(),
        scale: if cfg.scale_crop {
            let s = SCALE_LO + rng.gen::<f64>() * (SCALE_HI - SCALE_LO);
            let jx = (rng.gen::<f64>() * 2.0 - 1.0) * JITTER_FRAC * w as f64;
            let jy = (rng.gen::<f64>() * 2.0 - 1.0) * JITTER_FRAC * h as f64;
            Some((s, jx, jy))
        } else {
            None
        },
    };

    let (mut pre, mut post, mask_out) = apply_geometric(pair, mask, &geo);

    // Independent photometric draws per image.
    apply_photometric(&mut pre, cfg, rng);
    apply_photometric(&mut post, cfg, rng);

    (
        ImagePair::new(pre, post).expect("shapes preserved"),
        mask_out,
    )
}

/// Map an output pixel to its source coordinate under the inverse of the
/// drawn transform.
fn source_coord(geo: &Geometric, h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
    let (mut fy, mut fx) = (y as f64, x as f64);
    if let Some((s, jx, jy)) = geo.scale {
        let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
        fy = cy + (fy - cy) / s + jy;
        fx = cx + (fx - cx) / s + jx;
    }
    if geo.flip_v {
        fy = (h - 1) as f64 - fy;
    }
    if geo.flip_h {
        fx = (w - 1) as f64 - fx;
    }
    (fy, fx)
}

fn apply_geometric(
    pair: &ImagePair,
    mask: &ChangeMask,
    geo: &Geometric,
) -> (Tensor<f32>, Tensor<f32>, ChangeMask) {
    let (h, w) = (pair.height(), pair.width());
    if geo.scale.is_none() {
        // Flips are exact index mirrors; no resampling.
        let mirror = |t: &Tensor<f32>| {
            Tensor::from_fn(t.shape(), |i| {
                let (c, rest) = (i / (h * w), i % (h * w));
                let (mut y, mut x) = (rest / w, rest % w);
                if geo.flip_v {
                    y = h - 1 - y;
                }
                if geo.flip_h {
                    x = w - 1 - x;
                }
                t.data()[(c * h + y) * w + x]
            })
        };
        let mask_vals: Vec<u8> = (0..h * w)
            .map(|i| {
                let (mut y, mut x) = (i / w, i % w);
                if geo.flip_v {
                    y = h - 1 - y;
                }
                if geo.flip_h {
                    x = w - 1 - x;
                }
                mask.values[y * w + x]
            })
            .collect();
        return (
            mirror(&pair.pre),
            mirror(&pair.post),
            ChangeMask {
                h,
                w,
                values: mask_vals,
            },
        );
    }

    let sample_img = |t: &Tensor<f32>| {
        Tensor::from_fn(t.shape(), |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            let (y, x) = (rest / w, rest % w);
            let (fy, fx) = source_coord(geo, h, w, y, x);
            let p = crate::kernels::sample::resolve_point(fy as f32, fx as f32, h, w);
            let plane = &t.data()[c * h * w..][..h * w];
            let one = 1.0f32;
            let v00 = plane[p.r0 * w + p.c0];
            let v01 = plane[p.r0 * w + p.c1];
            let v10 = plane[p.r1 * w + p.c0];
            let v11 = plane[p.r1 * w + p.c1];
            (one - p.fr) * ((one - p.fc) * v00 + p.fc * v01)
                + p.fr * ((one - p.fc) * v10 + p.fc * v11)
        })
    };
    let mask_vals: Vec<u8> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (fy, fx) = source_coord(geo, h, w, y, x);
            let sy = (fy.round().max(0.0) as usize).min(h - 1);
            let sx = (fx.round().max(0.0) as usize).min(w - 1);
            mask.values[sy * w + sx]
        })
        .collect();
    (
        sample_img(&pair.pre),
        sample_img(&pair.post),
        ChangeMask {
            h,
            w,
            values: mask_vals,
        },
    )
}

fn apply_photometric(img: &mut Tensor<f32>, cfg: &AugmentCfg, rng: &mut ChaCha8Rng) {
    if cfg.blur {
        let sigma = rng.gen::<f64>() * BLUR_SIGMA_MAX;
        if sigma > 0.05 {
            gaussian_blur(img, sigma as f32);
        }
    }
    if cfg.color_jitter {
        let delta = ((rng.gen::<f64>() * 2.0 - 1.0) * BRIGHTNESS_MAX) as f32;
        let contrast = (1.0 + (rng.gen::<f64>() * 2.0 - 1.0) * CONTRAST_SPAN) as f32;
        for v in img.data_mut() {
            *v = ((*v + delta - 0.5) * contrast + 0.5).clamp(0.0, 1.0);
        }
    }
}

/// Separable Gaussian blur with border clamp.
pub fn gaussian_blur(img: &mut Tensor<f32>, sigma: f32) {
    let s = img.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let radius = (2.0 * sigma).ceil() as isize;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for k in &mut kernel {
        *k /= sum;
    }
    let data = img.data_mut();
    let mut tmp = vec![0.0f32; h * w];
    for ci in 0..c {
        let plane = &mut data[ci * h * w..(ci + 1) * h * w];
        // Horizontal.
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // Vertical.
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[sy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}
