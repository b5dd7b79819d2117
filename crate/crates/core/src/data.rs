//! Synthetic image classification data: class-dependent oriented gratings
//! plus Gaussian noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"FARD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[channels × size × size]`
    pub image: Tensor<f32>,
    pub label: usize,
}

impl Sample {
    pub fn image_as<F: Real>(&self) -> Tensor<F> {
        self.image.cast()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            channels: 3,
            noise: 0.3,
        }
    }
}

/// `n` images split evenly across `classes` (the first `n % classes`
/// classes get one extra), 80% of each class to train and the rest to val.
///
/// Class `k` is a sinusoidal grating with orientation `π·k/classes`, a
/// spatial frequency alternating between two values with `k`, a random
/// phase, and a class-specific channel tint.
pub fn synth_dataset(
    seed: u64,
    n: usize,
    classes: usize,
    image_size: usize,
    opts: SynthOptions,
) -> Result<Dataset> {
    if classes == 0 || n < classes || image_size == 0 || opts.channels == 0 {
        return Err(Error::invalid(
            "synth_dataset",
            format!("need n >= classes > 0 and a positive image size (n={n}, classes={classes}, size={image_size})"),
        ));
    }
    if opts.noise.is_nan() || opts.noise < 0.0 {
        return Err(Error::invalid("synth_dataset", "noise must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, opts.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let (c, s) = (opts.channels, image_size);
    let mut per_class = vec![0usize; classes];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        per_class[k] += 1;
        let theta = PI * k as f64 / classes as f64;
        let freq = if k.is_multiple_of(2) { 2.0 } else { 3.5 } * 2.0 * PI / s as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let mut data = Vec::with_capacity(c * s * s);
        for ch in 0..c {
            let tint = 0.6 + 0.4 * ((k + ch) % 3) as f64 / 2.0;
            for y in 0..s {
                for x in 0..s {
                    let u = ct * x as f64 + st * y as f64;
                    let mut v = tint * (freq * u + phase).sin();
                    if opts.noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v as f32);
                }
            }
        }
        samples.push(Sample {
            image: Tensor::new(vec![c, s, s], data)?,
            label: k,
        });
    }
    let cutoff: Vec<usize> = per_class.iter().map(|&m| m * 4 / 5).collect();
    let mut seen = vec![0usize; classes];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for smp in samples {
        let k = smp.label;
        if seen[k] < cutoff[k] {
            train.push(smp);
        } else {
            val.push(smp);
        }
        seen[k] += 1;
    }
    Ok(Dataset {
        classes,
        channels: c,
        image_size: s,
        train,
        val,
    })
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for v in [self.classes, self.channels, self.image_size] {
            w.u64(v as u64);
        }
        for split in [&self.train, &self.val] {
            w.u64(split.len() as u64);
            for smp in split {
                w.u64(smp.label as u64);
                for &v in smp.image.data() {
                    w.bytes(&v.to_le_bytes());
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a dataset file".into()));
        }
        let mut r = ByteReader::checked(bytes, "dataset")?;
        r.take(4)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported dataset version {version}")));
        }
        let classes = r.usize()?;
        let channels = r.usize()?;
        let image_size = r.usize()?;
        let numel = channels * image_size * image_size;
        let mut splits = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.usize()?;
            let mut split = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let label = r.usize()?;
                if label >= classes {
                    return Err(Error::Checkpoint(format!("label {label} out of range")));
                }
                let raw = r.take(numel * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                split.push(Sample {
                    image: Tensor::new(vec![channels, image_size, image_size], data)?,
                    label,
                });
            }
            splits.push(split);
        }
        if !r.is_done() {
            return Err(Error::Checkpoint("trailing bytes in dataset file".into()));
        }
        let val = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        Ok(Self {
            classes,
            channels,
            image_size,
            train,
            val,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_dataset(7, 50, 10, 16, SynthOptions::default()).unwrap();
        let b = synth_dataset(7, 50, 10, 16, SynthOptions::default()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = synth_dataset(8, 50, 10, 16, SynthOptions::default()).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn stratified_counts_and_split() {
        let d = synth_dataset(1, 100, 10, 8, SynthOptions::default()).unwrap();
        let mut counts = [0usize; 10];
        for s in d.train.iter().chain(&d.val) {
            counts[s.label] += 1;
        }
        assert_eq!(counts, [10; 10]);
        assert_eq!(d.train.len(), 80);
        assert_eq!(d.val.len(), 20);
        assert!(d.train.iter().all(|s| s.image.shape() == [3, 8, 8]));
    }

    #[test]
    fn class_means_differ() {
        let opts = SynthOptions {
            channels: 3,
            noise: 0.0,
        };
        let d = synth_dataset(2, 200, 10, 16, opts).unwrap();
        let numel = 3 * 16 * 16;
        let mut means = vec![vec![0.0f64; numel]; 10];
        let mut counts = [0usize; 10];
        for s in &d.train {
            counts[s.label] += 1;
            for (m, &v) in means[s.label].iter_mut().zip(s.image.data()) {
                *m += (v as f64).abs();
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
        for a in 0..10 {
            for b in a + 1..10 {
                let dist: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(dist > 0.0, "classes {a} and {b}");
            }
        }
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(synth_dataset(0, 5, 10, 8, SynthOptions::default()).is_err());
        assert!(synth_dataset(0, 10, 0, 8, SynthOptions::default()).is_err());
        assert!(synth_dataset(0, 10, 10, 0, SynthOptions::default()).is_err());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let d = synth_dataset(3, 30, 3, 8, SynthOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fard");
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[100] ^= 1;
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Crc { .. })));
    }
}
