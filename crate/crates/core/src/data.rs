//! Seeded synthetic datasets and a flat binary import format.
//!
//! Every dataset owns a private sampler for the training stream and a
//! fixed held-out split drawn from an independent stream, so two datasets
//! built with the same seed produce the same batches.
//!
//! The flat binary format is little-endian throughout:
//!
//! ```text
//! u64 ndims, then ndims × u64 extents of one sample,
//! u64 count,
//! count × prod(extents) × f64, row-major
//! ```
//!
//! Imported data has a single class; the first 90% of rows train and the
//! rest form the held-out split.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RING_TEST_SIZE: usize = 2000;
pub const SHAPES_TEST_SIZE: usize = 600;
pub const SHAPE_CLASSES: [&str; 6] = ["hbar", "vbar", "disk", "cross", "square", "diagonal"];

const STREAM_TRAIN: u64 = 0;
const STREAM_TEST: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Ring { modes: usize, radius: f64, std: f64 },
    Shapes { size: usize, num_classes: usize },
    File { path: PathBuf },
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Ring { modes, radius, std } => ring_of_gaussians(*modes, *radius, *std, seed),
            DatasetSpec::Shapes { size, num_classes } => synthetic_shapes(*size, *num_classes, seed),
            DatasetSpec::File { path } => load_flat(path, seed),
        }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Ring { modes: usize, radius: f64, std: f64 },
    Shapes { size: usize },
    Rows { train: Tensor, order: Vec<usize>, cursor: usize },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    pub sample_shape: Vec<usize>,
    pub test_samples: Tensor,
    pub test_labels: Vec<usize>,
    source: Source,
    rng: ChaCha8Rng,
    label_queue: Vec<usize>,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl Dataset {
    fn new(num_classes: usize, sample_shape: Vec<usize>, source: Source, seed: u64) -> Result<Self> {
        let mut test_rng = stream(seed, STREAM_TEST);
        let mut ds = Self {
            num_classes,
            sample_shape,
            test_samples: Tensor::scalar(0.0),
            test_labels: Vec::new(),
            source,
            rng: stream(seed, STREAM_TRAIN),
            label_queue: Vec::new(),
        };
        let test_size = match ds.source {
            Source::Rows { .. } => 0,
            Source::Ring { .. } => RING_TEST_SIZE,
            Source::Shapes { .. } => SHAPES_TEST_SIZE,
        };
        if test_size > 0 {
            let (x, y) = ds.draw(test_size, &mut test_rng, &mut Vec::new())?;
            ds.test_samples = x;
            ds.test_labels = y;
        }
        Ok(ds)
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Next training batch `(batch × sample_shape, labels)`.
    pub fn sample(&mut self, batch: usize) -> Result<(Tensor, Vec<usize>)> {
        let mut rng = self.rng.clone();
        let mut queue = std::mem::take(&mut self.label_queue);
        let out = self.draw(batch, &mut rng, &mut queue);
        self.rng = rng;
        self.label_queue = queue;
        out
    }

    /// Labels are dealt from shuffled decks holding each class once, so
    /// any aligned run of `num_classes` draws covers every class.
    fn next_label(k: usize, rng: &mut ChaCha8Rng, queue: &mut Vec<usize>) -> usize {
        if queue.is_empty() {
            queue.extend(0..k);
            queue.shuffle(rng);
        }
        queue.pop().expect("refilled")
    }

    fn draw(&mut self, batch: usize, rng: &mut ChaCha8Rng, queue: &mut Vec<usize>) -> Result<(Tensor, Vec<usize>)> {
        if batch == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        let k = self.num_classes;
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.sample_shape);
        match &mut self.source {
            Source::Ring { modes, radius, std } => {
                let mut data = Vec::with_capacity(batch * 2);
                let mut labels = Vec::with_capacity(batch);
                for _ in 0..batch {
                    let y = Self::next_label(k, rng, queue);
                    let angle = 2.0 * PI * y as f64 / *modes as f64;
                    let nx: f64 = StandardNormal.sample(rng);
                    let ny: f64 = StandardNormal.sample(rng);
                    data.push(*radius * angle.cos() + *std * nx);
                    data.push(*radius * angle.sin() + *std * ny);
                    labels.push(y);
                }
                Ok((Tensor::new(shape, data)?, labels))
            }
            Source::Shapes { size } => {
                let size = *size;
                let mut data = Vec::with_capacity(batch * size * size);
                let mut labels = Vec::with_capacity(batch);
                for _ in 0..batch {
                    let y = Self::next_label(k, rng, queue);
                    data.extend(render_shape(y, size, rng));
                    labels.push(y);
                }
                Ok((Tensor::new(shape, data)?, labels))
            }
            Source::Rows { train, order, cursor } => {
                let n = train.shape()[0];
                let mut data = Vec::with_capacity(batch * train.len() / n);
                for _ in 0..batch {
                    if *cursor == 0 {
                        order.shuffle(rng);
                    }
                    data.extend_from_slice(train.row(order[*cursor]));
                    *cursor = (*cursor + 1) % n;
                }
                Ok((Tensor::new(shape, data)?, vec![0; batch]))
            }
        }
    }
}

/// 2-D mixture of `modes` isotropic Gaussians on a circle; the label is the
/// mode index.
pub fn ring_of_gaussians(modes: usize, radius: f64, std: f64, seed: u64) -> Result<Dataset> {
    if modes == 0 || !(std > 0.0) || !radius.is_finite() || !std.is_finite() {
        return Err(Error::Argument(format!(
            "ring needs modes ≥ 1 and std > 0, got modes={modes}, std={std}"
        )));
    }
    Dataset::new(modes, vec![2], Source::Ring { modes, radius, std }, seed)
}

/// `size×size×1` images of procedural shapes in `[−1, 1]` with jittered
/// position and scale.
pub fn synthetic_shapes(size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if ![8, 16, 32].contains(&size) {
        return Err(Error::Argument(format!("image size must be 8, 16 or 32, got {size}")));
    }
    if num_classes == 0 || num_classes > SHAPE_CLASSES.len() {
        return Err(Error::Argument(format!(
            "num_classes must be in 1..={}, got {num_classes}",
            SHAPE_CLASSES.len()
        )));
    }
    Dataset::new(num_classes, vec![size, size, 1], Source::Shapes { size }, seed)
}

fn render_shape(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-s / 8.0..=s / 8.0);
    let cy = s / 2.0 + rng.random_range(-s / 8.0..=s / 8.0);
    let r = rng.random_range(s / 5.0..=s / 3.0);
    let t = (s / 12.0).max(0.75);
    let mut img = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
            let on = match class {
                0 => dy.abs() <= t && dx.abs() <= r,
                1 => dx.abs() <= t && dy.abs() <= r,
                2 => dx * dx + dy * dy <= r * r,
                3 => (dy.abs() <= t && dx.abs() <= r) || (dx.abs() <= t && dy.abs() <= r),
                4 => {
                    let m = dx.abs().max(dy.abs());
                    m <= r && m >= r - 1.5 * t
                }
                _ => (dx - dy).abs() <= 1.5 * t && dx.abs() <= r && dy.abs() <= r,
            };
            let noise: f64 = StandardNormal.sample(rng);
            let v = if on { 1.0 } else { -1.0 };
            img.push((v + 0.05 * noise).clamp(-1.0, 1.0));
        }
    }
    img
}

/// Writes `samples` (leading axis = count) in the flat binary format.
pub fn write_flat(path: &Path, samples: &Tensor) -> Result<()> {
    let shape = samples.shape();
    if shape.len() < 2 {
        return Err(Error::Argument("need a batch of samples with a leading count axis".into()));
    }
    let mut buf = Vec::with_capacity(8 * (shape.len() + 2 + samples.len()));
    buf.extend_from_slice(&((shape.len() - 1) as u64).to_le_bytes());
    for &d in &shape[1..] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(shape[0] as u64).to_le_bytes());
    for &x in samples.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_flat(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut words = bytes.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("chunk of 8"));
    let bad = |m: &str| Error::Io(format!("{}: {m}", path.display()));
    if bytes.len() % 8 != 0 {
        return Err(bad("length is not a multiple of 8 bytes"));
    }
    let mut next_u64 = || words.next().map(u64::from_le_bytes).ok_or_else(|| bad("truncated header"));
    let ndims = next_u64()? as usize;
    if ndims == 0 || ndims > 8 {
        return Err(bad("implausible dimension count"));
    }
    let mut shape = Vec::with_capacity(ndims + 1);
    let dims: Vec<usize> = (0..ndims).map(|_| next_u64().map(|d| d as usize)).collect::<Result<_>>()?;
    let count = next_u64()? as usize;
    shape.push(count);
    shape.extend(dims);
    let header = 8 * (ndims + 2);
    let data: Vec<f64> = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(bad(&format!("expected {expected} values, found {}", data.len())));
    }
    Tensor::new(shape, data)
}

fn load_flat(path: &Path, seed: u64) -> Result<Dataset> {
    let all = read_flat(path)?;
    let n = all.shape()[0];
    let n_train = n * 9 / 10;
    if n_train == 0 || n_train == n {
        return Err(Error::Argument(format!("{}: need at least 2 samples to split, found {n}", path.display())));
    }
    let per = all.len() / n;
    let sample_shape = all.shape()[1..].to_vec();
    let mut train_shape = vec![n_train];
    train_shape.extend_from_slice(&sample_shape);
    let mut test_shape = vec![n - n_train];
    test_shape.extend_from_slice(&sample_shape);
    let data = all.into_data();
    let train = Tensor::new(train_shape, data[..n_train * per].to_vec())?;
    let test = Tensor::new(test_shape, data[n_train * per..].to_vec())?;
    let mut ds = Dataset::new(
        1,
        sample_shape,
        Source::Rows {
            train,
            order: (0..n_train).collect(),
            cursor: 0,
        },
        seed,
    )?;
    ds.test_labels = vec![0; n - n_train];
    ds.test_samples = test;
    Ok(ds)
}
