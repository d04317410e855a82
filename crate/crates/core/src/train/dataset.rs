//! Synthetic class-conditional image data and the `FBND` file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, read_json, write_bytes, write_json, ByteReader, ByteWriter};
use crate::rng::RngState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FBND";
const VERSION: u32 = 1;
pub const DATA_FILE: &str = "dataset.fbnd";
pub const SPLIT_FILE: &str = "splits.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// L2 norm of every class-mean pattern, in units of the per-pixel noise
    /// standard deviation (which is 1).
    pub separation: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 500,
            channels: 3,
            height: 16,
            width: 16,
            separation: 6.0,
            split: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(Error::invalid("dataset needs at least 2 classes"));
        }
        if self.samples_per_class == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("dataset dimensions must be positive"));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::invalid("separation must be finite and non-negative"));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// `[N, C, H, W]` row-major.
    pub images: Vec<f64>,
    pub labels: Vec<u16>,
    pub splits: Splits,
}

/// A Gaussian bump of random colour centred at a random pixel.
fn blob(c: usize, h: usize, w: usize, rng: &mut RngState) -> Vec<f64> {
    let colour: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
    let (cy, cx) = (rng.uniform() * (h - 1) as f64, rng.uniform() * (w - 1) as f64);
    let width = (h.max(w) as f64 / 4.0).max(0.5);
    let mut out = Vec::with_capacity(c * h * w);
    for col in &colour {
        for y in 0..h {
            for x in 0..w {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                out.push(col * (-r2 / (2.0 * width * width)).exp());
            }
        }
    }
    out
}

/// Gram-Schmidt in place; degenerate directions fall back to fresh noise.
fn orthonormalize(patterns: &mut [Vec<f64>], rng: &mut RngState) {
    for k in 0..patterns.len() {
        loop {
            for j in 0..k {
                let dot: f64 = patterns[k].iter().zip(&patterns[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = patterns.split_at_mut(k);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = patterns[k].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                patterns[k].iter_mut().for_each(|v| *v /= norm);
                break;
            }
            patterns[k].iter_mut().for_each(|v| *v = rng.normal());
        }
    }
}

impl Dataset {
    /// Per class: a coloured Gaussian blob at a random position. The class
    /// means are orthogonalized and scaled to norm `separation`, so any two
    /// are `separation·√2` apart; each sample adds unit Gaussian noise per
    /// pixel.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let (c, h, w) = (spec.channels, spec.height, spec.width);
        let d = c * h * w;
        let mut rng = RngState::derive(spec.seed, "dataset.patterns");
        if spec.num_classes > d {
            return Err(Error::invalid("more classes than pixels; class means cannot be orthogonal"));
        }
        let mut means: Vec<Vec<f64>> = (0..spec.num_classes).map(|_| blob(c, h, w, &mut rng)).collect();
        orthonormalize(&mut means, &mut rng);
        means.iter_mut().flatten().for_each(|v| *v *= spec.separation);
        let n = spec.num_classes * spec.samples_per_class;
        let mut noise = RngState::derive(spec.seed, "dataset.noise");
        let mut images = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for k in 0..spec.num_classes {
            for _ in 0..spec.samples_per_class {
                images.extend(means[k].iter().map(|m| m + noise.normal()));
                labels.push(k as u16);
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        RngState::derive(spec.seed, "dataset.split").shuffle(&mut order);
        let n_train = (spec.split[0] * n as f64).round() as usize;
        let n_val = ((spec.split[1] * n as f64).round() as usize).min(n - n_train);
        let mut splits = Splits {
            train: order[..n_train].to_vec(),
            val: order[n_train..n_train + n_val].to_vec(),
            test: order[n_train + n_val..].to_vec(),
        };
        splits.train.sort_unstable();
        splits.val.sort_unstable();
        splits.test.sort_unstable();
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            num_classes: spec.num_classes,
            images,
            labels,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_len();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Stack the given samples into `[n, C, H, W]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, labels))
    }

    /// Write `dataset.fbnd` and `splits.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.len() as u64);
        for v in [self.channels, self.height, self.width, self.num_classes] {
            w.u32(v as u32);
        }
        w.f64s(&self.images);
        for &l in &self.labels {
            w.u16(l);
        }
        write_bytes(&dir.join(DATA_FILE), &w.buf)?;
        write_json(&dir.join(SPLIT_FILE), &self.splits)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(DATA_FILE);
        let bytes = read_bytes(&path)?;
        let mut r = ByteReader::new(&bytes, &path);
        if r.take(4)? != MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let n = r.u64()? as usize;
        let (channels, height, width, num_classes) =
            (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let images = r.f64s(n * channels * height * width)?;
        let labels = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        if labels.iter().any(|&l| l as usize >= num_classes) {
            return Err(r.fail("label out of range"));
        }
        let splits: Splits = read_json(&dir.join(SPLIT_FILE))?;
        let mut seen = vec![false; n];
        for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(r.fail(format!("split index {i} out of range or repeated")));
            }
        }
        if seen.contains(&false) {
            return Err(r.fail("splits do not cover every sample"));
        }
        Ok(Self {
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
            splits,
        })
    }
}
