//! Labelled image sets in the `CTDS` binary layout and a seeded synthetic
//! generator.
//!
//! Layout, little-endian: `b"CTDS"`, u32 version (1), u32 count, u32 channels,
//! u32 height, u32 width, f32 mean[channels], f32 std[channels], u8 pixels
//! (count x channels x height x width), u16 labels[count].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::bytes::Reader;

pub const DATASET_MAGIC: &[u8; 4] = b"CTDS";
pub const DATASET_VERSION: u32 = 1;

/// Raw 8-bit images with labels and per-channel normalization statistics
/// (of `pixel / 255`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        [channels, height, width]: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<u16>,
        class_count: usize,
    ) -> Result<Self> {
        let (mean, std) = channel_stats(&pixels, channels, height * width);
        let d = Dataset {
            channels,
            height,
            width,
            mean,
            std,
            pixels,
            labels,
            class_count,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Format("image dimensions must be positive".into()));
        }
        if self.pixels.len() != self.len() * self.image_len() {
            return Err(Error::Format(format!(
                "{} pixels for {} images of {}",
                self.pixels.len(),
                self.len(),
                self.image_len()
            )));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(Error::Format(
                "normalization statistics do not match the channel count".into(),
            ));
        }
        if let Some(s) = self.std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Format(format!(
                "channel std must be positive, got {s}"
            )));
        }
        if let Some(&l) = self
            .labels
            .iter()
            .find(|&&l| l as usize >= self.class_count)
        {
            return Err(Error::Format(format!(
                "label {l} out of range for {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Normalized `[len, C, H, W]` batch of the given sample indices.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.image_len();
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            let img = &self.pixels[i * n..(i + 1) * n];
            data.extend(img.iter().enumerate().map(|(j, &px)| {
                let c = j / hw;
                T::of((f64::from(px) / 255.0 - f64::from(self.mean[c])) / f64::from(self.std[c]))
            }));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::from_vec(
            data,
            &[indices.len(), self.channels, self.height, self.width],
        )?;
        Ok((t, labels))
    }

    /// Every image, normalized.
    pub fn images<T: Element>(&self) -> Result<Tensor<T>> {
        Ok(self.batch(&(0..self.len()).collect::<Vec<_>>())?.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(24 + 8 * self.channels + self.pixels.len() + 2 * self.len());
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION as usize,
            self.len(),
            self.channels,
            self.height,
            self.width,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.mean.iter().chain(&self.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    /// Parses a `CTDS` buffer. Labels must be below `classes` when given;
    /// otherwise the class count is one past the largest label.
    pub fn from_bytes(bytes: &[u8], classes: Option<usize>) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let [count, channels, height, width] =
            [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
        let mean = (0..channels).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let std = (0..channels).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let n_px = [channels, height, width]
            .iter()
            .try_fold(count, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("dataset header overflows".into()))?;
        let pixels = r.take(n_px)?.to_vec();
        let labels = (0..count).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let class_count =
            classes.unwrap_or_else(|| labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
        let d = Dataset {
            channels,
            height,
            width,
            mean,
            std,
            pixels,
            labels,
            class_count,
        };
        d.validate()?;
        Ok(d)
    }
}

fn channel_stats(pixels: &[u8], channels: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut n = 0usize;
    for img in pixels.chunks(channels * hw.max(1)) {
        for (c, plane) in img.chunks(hw.max(1)).enumerate() {
            for &px in plane {
                let v = f64::from(px) / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += hw;
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt() as f32).max(1e-3))
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

pub fn load_dataset(path: impl AsRef<Path>, classes: Option<usize>) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?, classes)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, d.to_bytes())?;
    Ok(())
}

/// Parameters of a synthetic set: each class has a fixed random mean image;
/// samples add clipped Gaussian noise with std `noise` (in pixel units).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(classes: usize, count: usize, [height, width]: [usize; 2], seed: u64) -> Self {
        SynthSpec {
            classes,
            count,
            channels: 3,
            height,
            width,
            noise: 32.0,
            seed,
        }
    }
}

/// Deterministic per seed. Labels cycle through the classes so every class
/// is equally represented.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > usize::from(u16::MAX) + 1 {
        return Err(Error::Config(format!(
            "class count {} out of range",
            spec.classes
        )));
    }
    if spec.count == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one sample".into(),
        ));
    }
    let n = spec.channels * spec.height * spec.width;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..n).map(|_| rng.gen_range(48.0..208.0)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut pixels = Vec::with_capacity(spec.count * n);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let label = i % spec.classes;
        pixels.extend(
            prototypes[label]
                .iter()
                .map(|&m| (m + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8),
        );
        labels.push(label as u16);
    }
    Dataset::new(
        [spec.channels, spec.height, spec.width],
        pixels,
        labels,
        spec.classes,
    )
}
