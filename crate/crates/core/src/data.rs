//! Synthetic shape-classification data with pixel-exact foreground masks.
//!
//! Each image shows one shape (the class) at a random position, scale and
//! brightness over a textured noise background. The mask marks exactly the
//! pixels drawn as the shape.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{parse_kv, write_atomic, TensorContainer};
use crate::tensor::Tensor;

/// Shapes in class order; `n_classes` uses the first `n`.
pub const SHAPES: [&str; 8] = ["disk", "square", "triangle", "cross", "ring", "diamond", "x", "frame"];

/// Fraction of samples that go to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    /// `H × W` row-major, 1 on foreground pixels.
    pub mask: Vec<u8>,
}

impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label
            && self.mask == other.mask
            && self.image.shape() == other.image.shape()
            && self.image.data() == other.image.data()
    }
}

/// Ground-truth mask at token resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<u8>,
}

impl TokenMask {
    pub fn new(rows: usize, cols: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != rows * cols || cells.iter().any(|&c| c > 1) {
            return Err(Error::Shape(format!(
                "token mask needs {rows}×{cols} binary cells, got {} values",
                cells.len()
            )));
        }
        Ok(TokenMask { rows, cols, cells })
    }

    pub fn count(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub n_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// A cell is foreground iff at least half of its pixels are.
pub fn to_token_mask(mask: &[u8], height: usize, width: usize, patch_size: usize) -> Result<TokenMask> {
    if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::Shape(format!(
            "mask {height}×{width} is not divisible into {patch_size}-pixel patches"
        )));
    }
    if mask.len() != height * width {
        return Err(Error::Shape(format!("mask has {} pixels, expected {height}×{width}", mask.len())));
    }
    let (rows, cols) = (height / patch_size, width / patch_size);
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let on: usize = (0..patch_size)
                .map(|y| {
                    let start = (r * patch_size + y) * width + c * patch_size;
                    mask[start..start + patch_size].iter().filter(|&&v| v != 0).count()
                })
                .sum();
            cells.push((2 * on >= patch_size * patch_size) as u8);
        }
    }
    Ok(TokenMask { rows, cols, cells })
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= 0.9 * r && ay <= 0.9 * r,
        2 => dy <= 0.8 * r && dy >= -r && ax <= (dy + r) / 1.8,
        3 => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        5 => ax + ay <= r,
        6 => ((dx - dy).abs() <= 0.3 * r || (dx + dy).abs() <= 0.3 * r) && ax <= 0.8 * r && ay <= 0.8 * r,
        _ => {
            let m = ax.max(ay);
            m <= 0.9 * r && m >= 0.55 * r
        }
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Draws sample `index`; depends only on `(seed, index, n_classes, image_size)`.
fn draw_sample(seed: u64, index: usize, n_classes: usize, size: usize) -> Sample {
    let label = index % n_classes;
    let mut rng = sample_rng(seed, index);
    let s = size as f64;
    let mask = loop {
        let r = rng.random_range(0.22..0.34) * s;
        let cx = rng.random_range(r * 0.9..s - r * 0.9);
        let cy = rng.random_range(r * 0.9..s - r * 0.9);
        let mask: Vec<u8> = (0..size * size)
            .map(|p| {
                let (x, y) = ((p % size) as f64 + 0.5, (p / size) as f64 + 0.5);
                inside(label, x - cx, y - cy, r) as u8
            })
            .collect();
        let on = mask.iter().filter(|&&m| m == 1).count();
        if on > 0 && (on as f64) < 0.6 * (size * size) as f64 {
            break mask;
        }
    };

    let fg = rng.random_range(0.55..0.95);
    let bg = rng.random_range(0.05..0.3);
    let (fx, fy, phase) = (rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.0..6.3));
    let pixels = (0..size * size)
        .map(|p| {
            let (x, y) = ((p % size) as f64, (p / size) as f64);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let v = if mask[p] == 1 {
                fg + 0.04 * noise
            } else {
                bg + 0.08 * (fx * x + fy * y + phase).sin() + 0.06 * noise
            };
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Sample {
        image: Tensor::new(&[1, size, size], pixels).expect("size matches"),
        label,
        mask,
    }
}

/// Generates `n_samples` single-channel images, round-robin over classes,
/// split 80/20 into train and validation by index.
pub fn generate(seed: u64, n_samples: usize, n_classes: usize, image_size: usize) -> Result<Dataset> {
    if !(2..=SHAPES.len()).contains(&n_classes) {
        return Err(Error::Config(format!("n_classes must be in 2..={}, got {n_classes}", SHAPES.len())));
    }
    if image_size < 8 {
        return Err(Error::Config(format!("image_size must be at least 8, got {image_size}")));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let n_train = (n_samples as f64 * TRAIN_FRACTION).round() as usize;
    let mut all: Vec<Sample> = (0..n_samples).map(|i| draw_sample(seed, i, n_classes, image_size)).collect();
    let val = all.split_off(n_train);
    Ok(Dataset {
        seed,
        n_classes,
        image_size,
        channels: 1,
        train: all,
        val,
    })
}

/// Stacks sample images into `[B, C, H, W]`, optionally flipping some horizontally.
pub fn stack_images(samples: &[&Sample], flip: Option<&[bool]>) -> Result<Tensor<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let w = shape[2];
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("batch mixes image shapes {:?} and {:?}", shape, s.image.shape())));
        }
        if flip.is_some_and(|f| f[i]) {
            for row in s.image.data().chunks_exact(w) {
                data.extend(row.iter().rev());
            }
        } else {
            data.extend_from_slice(s.image.data());
        }
    }
    Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_mask(&self, sample: &Sample, patch_size: usize) -> Result<TokenMask> {
        to_token_mask(&sample.mask, self.image_size, self.image_size, patch_size)
    }

    /// Writes `train.fvtw`, `val.fvtw`, `dataset.cfg` and `index.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, split) in [("train", &self.train), ("val", &self.val)] {
            split_container(split, self.channels, self.image_size)?.save(&dir.join(format!("{name}.fvtw")))?;
        }
        let cfg = format!(
            "seed={}\nn_classes={}\nimage_size={}\nchannels={}\nn_train={}\nn_val={}\n",
            self.seed,
            self.n_classes,
            self.image_size,
            self.channels,
            self.train.len(),
            self.val.len()
        );
        write_atomic(&dir.join("dataset.cfg"), cfg.as_bytes())?;
        let mut index = String::from("id,split,label\n");
        for (i, s) in self.train.iter().enumerate() {
            writeln!(index, "{i},train,{}", s.label).expect("string write");
        }
        for (i, s) in self.val.iter().enumerate() {
            writeln!(index, "{},val,{}", self.train.len() + i, s.label).expect("string write");
        }
        write_atomic(&dir.join("index.txt"), index.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("dataset.cfg");
        let kv = parse_kv(&fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?)?;
        let get = |k: &str| -> Result<u64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: missing or invalid {k}", cfg_path.display())))
        };
        let (image_size, channels) = (get("image_size")? as usize, get("channels")? as usize);
        let train = read_split(&dir.join("train.fvtw"), channels, image_size)?;
        let val = read_split(&dir.join("val.fvtw"), channels, image_size)?;
        if train.len() as u64 != get("n_train")? || val.len() as u64 != get("n_val")? {
            return Err(Error::Format(format!("{}: split sizes disagree with containers", cfg_path.display())));
        }
        Ok(Dataset {
            seed: get("seed")?,
            n_classes: get("n_classes")? as usize,
            image_size,
            channels,
            train,
            val,
        })
    }
}

fn split_container(samples: &[Sample], channels: usize, size: usize) -> Result<TensorContainer> {
    let n = samples.len();
    let mut c = TensorContainer::new();
    c.push(
        "images",
        &[n, channels, size, size],
        samples.iter().flat_map(|s| s.image.data().iter().copied()).collect(),
    )?;
    c.push("masks", &[n, size, size], samples.iter().flat_map(|s| s.mask.iter().map(|&m| m as f32)).collect())?;
    c.push("labels", &[n], samples.iter().map(|s| s.label as f32).collect())?;
    Ok(c)
}

fn read_split(path: &Path, channels: usize, size: usize) -> Result<Vec<Sample>> {
    let c = TensorContainer::load(path)?;
    let entry = |name: &str| {
        c.get(name)
            .ok_or_else(|| Error::Format(format!("{}: missing entry {name:?}", path.display())))
    };
    let (images, masks, labels) = (entry("images")?, entry("masks")?, entry("labels")?);
    let n = labels.data.len();
    if images.dims != [n, channels, size, size] || masks.dims != [n, size, size] {
        return Err(Error::Format(format!("{}: entry dims disagree with dataset.cfg", path.display())));
    }
    let (img_len, mask_len) = (channels * size * size, size * size);
    (0..n)
        .map(|i| {
            Ok(Sample {
                image: Tensor::new(&[channels, size, size], images.data[i * img_len..(i + 1) * img_len].to_vec())?,
                label: labels.data[i] as usize,
                mask: masks.data[i * mask_len..(i + 1) * mask_len].iter().map(|&v| (v != 0.0) as u8).collect(),
            })
        })
        .collect()
}
