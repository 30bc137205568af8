//! Image datasets: the CIFAR-10 binary format and a deterministic synthetic
//! class-pattern set.

use std::f64::consts::PI;
use std::path::Path;

use serde::Serialize;

use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Per-channel statistics of the CIFAR-10 training set.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub source: Source,
    pub split: Split,
    /// `[n, 3, H, W]`, normalized per channel.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    fn sample_len(&self) -> usize {
        self.images.numel() / self.len()
    }

    /// Gathers the samples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(n * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let images = Tensor::new(&shape, data).expect("batch shape matches data");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            ..self.clone()
        }
    }

    /// Bilinearly resizes every image to `size×size`.
    pub fn resized(&self, size: usize) -> Self {
        let s = self.images.shape();
        let (n, c, h) = (s[0], s[1], s[2]);
        if h == size {
            return self.clone();
        }
        let scale = h as f64 / size as f64;
        let taps = |o: usize| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (h - 1) as f64);
            let lo = pos.floor() as usize;
            (lo, (lo + 1).min(h - 1), pos - lo as f64)
        };
        let mut out = Vec::with_capacity(n * c * size * size);
        for plane in self.images.data().chunks(h * h) {
            for oy in 0..size {
                let (y0, y1, ty) = taps(oy);
                for ox in 0..size {
                    let (x0, x1, tx) = taps(ox);
                    let at = |y: usize, x: usize| plane[y * h + x].as_f64();
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    out.push(T::of(top * (1.0 - ty) + bottom * ty));
                }
            }
        }
        Dataset {
            images: Tensor::new(&[n, c, size, size], out).expect("resized shape"),
            ..self.clone()
        }
    }
}

/// Reads one or more CIFAR-10 binary batch files, preserving record order.
/// Pixels are scaled to `[0, 1]` and normalized with the canonical
/// per-channel statistics.
pub fn load_cifar10<T: Scalar>(paths: &[impl AsRef<Path>], split: Split) -> Result<Dataset<T>> {
    let mut bytes = Vec::new();
    for path in paths {
        let raw = std::fs::read(path.as_ref())?;
        parse_cifar10_into(&raw, &path.as_ref().display().to_string(), &mut bytes)?;
    }
    cifar_from_records(&bytes, split)
}

/// Decodes an in-memory CIFAR-10 binary file.
pub fn parse_cifar10<T: Scalar>(raw: &[u8], split: Split) -> Result<Dataset<T>> {
    let mut bytes = Vec::new();
    parse_cifar10_into(raw, "<memory>", &mut bytes)?;
    cifar_from_records(&bytes, split)
}

fn parse_cifar10_into(raw: &[u8], origin: &str, out: &mut Vec<u8>) -> Result<()> {
    if raw.is_empty() {
        return Err(Error::Format(format!("{origin}: empty file")));
    }
    if raw.len() % CIFAR_RECORD != 0 {
        let offset = raw.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format(format!(
            "{origin}: truncated record at byte offset {offset} ({} of {CIFAR_RECORD} bytes)",
            raw.len() - offset
        )));
    }
    for (i, record) in raw.chunks(CIFAR_RECORD).enumerate() {
        if record[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!(
                "{origin}: label {} at byte offset {} is not a CIFAR-10 class",
                record[0],
                i * CIFAR_RECORD
            )));
        }
    }
    out.extend_from_slice(raw);
    Ok(())
}

fn cifar_from_records<T: Scalar>(bytes: &[u8], split: Split) -> Result<Dataset<T>> {
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3 * plane);
    for record in bytes.chunks(CIFAR_RECORD) {
        labels.push(record[0] as usize);
        for (c, pixels) in record[1..].chunks(plane).enumerate() {
            data.extend(
                pixels
                    .iter()
                    .map(|&v| T::of((v as f64 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c])),
            );
        }
    }
    Ok(Dataset {
        source: Source::Cifar10,
        split,
        images: Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        num_classes: CIFAR_CLASSES,
    })
}

/// Noise level of the synthetic images relative to the unit-amplitude
/// class pattern.
pub const SYNTH_NOISE: f64 = 4.0;

/// Class `c`'s low-frequency pattern at pixel `(ch, y, x)` of a
/// `size×size` image.
pub fn class_pattern(c: usize, ch: usize, y: usize, x: usize, size: usize) -> f64 {
    let fx = 1.0 + (c % 4) as f64;
    let fy = 1.0 + (c / 4) as f64;
    let phase = 0.9 * c as f64 + 2.0 * PI * ch as f64 / 3.0;
    let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
    (2.0 * PI * (fx * u + fy * v) + phase).sin()
}

/// `n` images of `num_classes` balanced classes: Gaussian noise plus the
/// class pattern, channel-normalized with the set's own statistics, in a
/// seeded random order.
pub fn synth_dataset<T: Scalar>(seed: u64, n: usize, image_size: usize, num_classes: usize) -> Result<Dataset<T>> {
    if n == 0 || num_classes == 0 || image_size == 0 {
        return Err(config_err!("synthetic dataset needs n, classes and image size > 0"));
    }
    let mut rng = Rng::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    rng.shuffle(&mut labels);
    let plane = image_size * image_size;
    let mut data = vec![0.0f64; n * 3 * plane];
    for (i, &label) in labels.iter().enumerate() {
        for ch in 0..3 {
            for y in 0..image_size {
                for x in 0..image_size {
                    let idx = ((i * 3 + ch) * image_size + y) * image_size + x;
                    data[idx] = class_pattern(label, ch, y, x, image_size) + SYNTH_NOISE * rng.normal();
                }
            }
        }
    }
    for ch in 0..3 {
        let values = || (0..n).flat_map(move |i| ((i * 3 + ch) * plane)..((i * 3 + ch + 1) * plane));
        let count = (n * plane) as f64;
        let mean = values().map(|j| data[j]).sum::<f64>() / count;
        let var = values().map(|j| (data[j] - mean).powi(2)).sum::<f64>() / count;
        let inv = 1.0 / var.sqrt().max(1e-12);
        for j in values() {
            data[j] = (data[j] - mean) * inv;
        }
    }
    Ok(Dataset {
        source: Source::Synthetic,
        split: Split::Train,
        images: Tensor::new(&[n, 3, image_size, image_size], data.into_iter().map(T::of).collect())?,
        labels,
        num_classes,
    })
}

/// Synthetic train and test sets drawn from independent noise streams.
pub fn synth_split<T: Scalar>(
    seed: u64,
    n_train: usize,
    n_test: usize,
    image_size: usize,
    num_classes: usize,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let train = synth_dataset(Rng::stream(seed, 0).seed(), n_train, image_size, num_classes)?;
    let mut test = synth_dataset(Rng::stream(seed, 1).seed(), n_test, image_size, num_classes)?;
    test.split = Split::Test;
    Ok((train, test))
}

/// Checks a dataset against a model's expected input.
pub fn check_compatible<T: Scalar>(ds: &Dataset<T>, image_size: usize, num_classes: usize) -> Result<()> {
    if ds.image_size() != image_size {
        return Err(dim_err!(
            "dataset images are {}px but the model expects {image_size}px",
            ds.image_size()
        ));
    }
    if ds.num_classes > num_classes {
        return Err(config_err!(
            "dataset has {} classes but the model head has {num_classes}",
            ds.num_classes
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn cifar_records_decode() {
        let mut raw = record(7, 255);
        raw.extend(record(0, 0));
        let ds: Dataset<f64> = parse_cifar10(&raw, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![7, 0]);
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        let expect = (1.0 - CIFAR_MEAN[0]) / CIFAR_STD[0];
        assert!((ds.images.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn cifar_errors_name_the_offset() {
        let mut raw = record(1, 3);
        raw.extend(&record(2, 3)[..100]);
        let err = parse_cifar10::<f32>(&raw, Split::Train).unwrap_err().to_string();
        assert!(err.contains("offset 3073"), "{err}");
        let mut raw = record(1, 3);
        raw.extend(record(12, 3));
        let err = parse_cifar10::<f32>(&raw, Split::Train).unwrap_err().to_string();
        assert!(err.contains("label 12") && err.contains("offset 3073"), "{err}");
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a: Dataset<f32> = synth_dataset(9, 100, 16, 10).unwrap();
        let b: Dataset<f32> = synth_dataset(9, 100, 16, 10).unwrap();
        assert!(a.images.bitwise_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        let other: Dataset<f32> = synth_dataset(10, 100, 16, 10).unwrap();
        assert!(!a.images.bitwise_eq(&other.images));
    }

    #[test]
    fn resize_keeps_constants() {
        let ds = Dataset {
            source: Source::Synthetic,
            split: Split::Train,
            images: Tensor::<f64>::full(&[1, 3, 4, 4], 0.25),
            labels: vec![0],
            num_classes: 1,
        };
        let r = ds.resized(7);
        assert_eq!(r.images.shape(), &[1, 3, 7, 7]);
        assert!(r.images.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
