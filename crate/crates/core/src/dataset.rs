//! Image-pair and mask types plus directory-based dataset I/O.
//!
//! A dataset root holds `A/` (pre-change), `B/` (post-change), and
//! `label/` subdirectories with matching file names. Images are 8-bit
//! RGB; labels are 8-bit grayscale with 0 = unchanged and 255 = changed,
//! binarized at threshold 128 on load.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Co-registered image pair, each [3, H, W] with values in [0, 1].
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
}

impl ImagePair {
    pub fn new(pre: Tensor<f32>, post: Tensor<f32>) -> Result<Self> {
        if pre.shape() != post.shape() {
            return Err(Error::shape("image pair", pre.shape(), post.shape()));
        }
        if pre.shape().len() != 3 || pre.shape()[0] != 3 {
            return Err(Error::Contract(format!(
                "image pair expects [3, H, W], got {:?}",
                pre.shape()
            )));
        }
        Ok(ImagePair { pre, post })
    }

    pub fn height(&self) -> usize {
        self.pre.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pre.shape()[2]
    }
}

/// Binary change mask; 0 = no change, 1 = change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<u8>,
}

impl ChangeMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        ChangeMask {
            h,
            w,
            values: vec![0; h * w],
        }
    }

    pub fn from_values(h: usize, w: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Contract(format!(
                "mask data length {} does not match {}x{}",
                values.len(),
                h,
                w
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Label(format!("mask value {} outside {{0, 1}}", v)));
        }
        Ok(ChangeMask { h, w, values })
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// One training/evaluation sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub pair: ImagePair,
    pub mask: ChangeMask,
}

// ── Raster conversion ───────────────────────────────────────────────

/// [3, H, W] float in [0,1] -> 8-bit RGB rows.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!("expected [3, H, W], got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (d[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
                (d[h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
                (d[2 * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized buffer")
}

pub fn mask_to_gray(mask: &ChangeMask) -> GrayImage {
    let mut img = GrayImage::new(mask.w as u32, mask.h as u32);
    for y in 0..mask.h {
        for x in 0..mask.w {
            let v = if mask.values[y * mask.w + x] == 1 {
                255
            } else {
                0
            };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img
}

/// Binarize an 8-bit label at threshold 128.
pub fn gray_to_mask(img: &GrayImage) -> ChangeMask {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = (0..h * w)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)
        })
        .collect();
    ChangeMask { h, w, values }
}

// ── Directory layout ────────────────────────────────────────────────

/// Write one sample as `A/<name>`, `B/<name>`, `label/<name>` PNGs.
pub fn save_sample(root: &Path, name: &str, sample: &Sample) -> Result<()> {
    for sub in ["A", "B", "label"] {
        fs::create_dir_all(root.join(sub))?;
    }
    tensor_to_rgb(&sample.pair.pre)?.save(root.join("A").join(name))?;
    tensor_to_rgb(&sample.pair.post)?.save(root.join("B").join(name))?;
    mask_to_gray(&sample.mask).save(root.join("label").join(name))?;
    Ok(())
}

fn list_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Load every (pair, mask) triple under `root`, matched by file name and
/// sorted for a deterministic order. A root without any of the three
/// subdirectories is an empty dataset; a file present in one directory
/// but missing from another is an error naming the file.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let dir_a = root.join("A");
    let dir_b = root.join("B");
    let dir_l = root.join("label");
    if !dir_a.is_dir() && !dir_b.is_dir() && !dir_l.is_dir() {
        return Ok(Vec::new());
    }

    let names_a = list_names(&dir_a)?;
    let names_b = list_names(&dir_b)?;
    let names_l = list_names(&dir_l)?;
    let mut all: Vec<&String> = names_a.iter().chain(&names_b).chain(&names_l).collect();
    all.sort();
    all.dedup();

    let mut samples = Vec::new();
    for name in all {
        for (dir, label) in [(&dir_a, "A"), (&dir_b, "B"), (&dir_l, "label")] {
            if !dir.join(name).is_file() {
                return Err(Error::Data(format!("missing {}/{}", label, name)));
            }
        }
        samples.push(load_sample(root, name)?);
    }
    Ok(samples)
}

pub fn load_sample(root: &Path, name: &str) -> Result<Sample> {
    let pre = image::open(root.join("A").join(name))?.to_rgb8();
    let post = image::open(root.join("B").join(name))?.to_rgb8();
    let label = image::open(root.join("label").join(name))?.to_luma8();
    if pre.dimensions() != post.dimensions() || pre.dimensions() != label.dimensions() {
        return Err(Error::Data(format!(
            "size mismatch within triple '{}': A {:?}, B {:?}, label {:?}",
            name,
            pre.dimensions(),
            post.dimensions(),
            label.dimensions()
        )));
    }
    Ok(Sample {
        pair: ImagePair::new(rgb_to_tensor(&pre), rgb_to_tensor(&post))?,
        mask: gray_to_mask(&label),
    })
}

/// File names of the samples under `root/A`, sorted.
pub fn sample_names(root: &Path) -> Result<Vec<String>> {
    list_names(&root.join("A"))
}

/// Write a predicted mask as a 0/255 grayscale raster.
pub fn save_mask(path: &PathBuf, mask: &ChangeMask) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    mask_to_gray(mask).save(path)?;
    Ok(())
}
