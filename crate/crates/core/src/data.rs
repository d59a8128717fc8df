//! CIFAR binary batches, synthetic class-blob datasets and seeded batching.
//!
//! Pixels are kept as the raw bytes they were read from; normalization is
//! metadata applied when a batch is materialized, so saving a dataset writes
//! back exactly the bytes that were loaded.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::LayerShape;
use crate::tensor::Tensor;

pub const CIFAR_SHAPE: LayerShape = LayerShape::new(3, 32, 32);
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Self {
            mean: CIFAR10_MEAN.to_vec(),
            std: CIFAR10_STD.to_vec(),
        }
    }

    /// Identity on `byte / 255`.
    pub fn none(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Baked CIFAR-10 channel statistics.
    #[default]
    Canonical,
    /// Statistics measured on the loaded data.
    Computed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub label: usize,
    /// Normalized `C×H×W` values.
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: LayerShape,
    pub num_classes: usize,
    labels: Vec<usize>,
    bytes: Vec<u8>,
    pub norm: Normalization,
}

impl Dataset {
    pub fn new(
        shape: LayerShape,
        num_classes: usize,
        labels: Vec<usize>,
        bytes: Vec<u8>,
        norm: Normalization,
    ) -> Result<Self> {
        if bytes.len() != labels.len() * shape.elements() {
            return Err(Error::Contract(format!(
                "{} pixel bytes for {} records of shape {shape}",
                bytes.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Contract(format!(
                "record {i} has label {l} >= {num_classes}"
            )));
        }
        Ok(Self {
            shape,
            num_classes,
            labels,
            bytes,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn raw_pixels(&self, i: usize) -> &[u8] {
        let n = self.shape.elements();
        &self.bytes[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize) -> LabeledImage {
        let plane = self.shape.height * self.shape.width;
        let pixels = self
            .raw_pixels(i)
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                let c = j / plane;
                (b as f32 / 255.0 - self.norm.mean[c]) / self.norm.std[c]
            })
            .collect();
        LabeledImage {
            label: self.labels[i],
            pixels,
        }
    }

    /// Per-channel mean and standard deviation of `byte / 255`.
    pub fn measure_normalization(&self) -> Normalization {
        let plane = self.shape.height * self.shape.width;
        let c = self.shape.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for rec in self.bytes.chunks(self.shape.elements()) {
            for (j, &b) in rec.iter().enumerate() {
                let v = b as f64 / 255.0;
                sum[j / plane] += v;
                sq[j / plane] += v * v;
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Normalization {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    /// A subset in the given record order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let bytes = indices
            .iter()
            .flat_map(|&i| self.raw_pixels(i).iter().copied())
            .collect();
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            labels,
            bytes,
            norm: self.norm.clone(),
        }
    }

    /// Materializes records as a `[B, C, H, W]` batch, optionally applying
    /// random crop (4-pixel zero pad) and horizontal flip drawn from `rng`.
    pub fn batch_tensor(&self, indices: &[usize], augment: Option<&mut ChaCha8Rng>) -> (Tensor, Vec<usize>) {
        let (c, h, w) = (self.shape.channels, self.shape.height, self.shape.width);
        let n = self.shape.elements();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut rng = augment;
        for &i in indices {
            let img = self.get(i).pixels;
            match rng.as_deref_mut() {
                None => data.extend_from_slice(&img),
                Some(r) => {
                    let dy = r.random_range(-4i32..=4) as isize;
                    let dx = r.random_range(-4i32..=4) as isize;
                    let flip = r.random_bool(0.5);
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let sx = if flip { w - 1 - x } else { x } as isize + dx;
                                let sy = y as isize + dy;
                                data.push(
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                        img[(ch * h + sy as usize) * w + sx as usize]
                                    } else {
                                        0.0
                                    },
                                );
                            }
                        }
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(self.shape.with_batch(indices.len()), data), labels)
    }

    /// Serializes to the CIFAR binary layout (label byte(s) then planar pixels).
    pub fn to_cifar_bytes(&self, label_bytes: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * (label_bytes + self.shape.elements()));
        for i in 0..self.len() {
            if label_bytes == 2 {
                out.push(0);
            }
            out.push(self.labels[i] as u8);
            out.extend_from_slice(self.raw_pixels(i));
        }
        out
    }

    pub fn save_cifar(&self, path: impl AsRef<Path>, label_bytes: usize) -> Result<()> {
        fs::write(path, self.to_cifar_bytes(label_bytes))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CifarOptions {
    pub num_classes: usize,
    /// 1 for CIFAR-10; 2 for CIFAR-100 (coarse label skipped, fine label used).
    pub label_bytes: usize,
    pub image_shape: LayerShape,
    pub norm: NormMode,
}

impl Default for CifarOptions {
    fn default() -> Self {
        Self::cifar10()
    }
}

impl CifarOptions {
    pub fn cifar10() -> Self {
        Self {
            num_classes: 10,
            label_bytes: 1,
            image_shape: CIFAR_SHAPE,
            norm: NormMode::Canonical,
        }
    }

    pub fn cifar100() -> Self {
        Self {
            num_classes: 100,
            label_bytes: 2,
            ..Self::cifar10()
        }
    }

    pub fn record_len(&self) -> usize {
        self.label_bytes + self.image_shape.elements()
    }
}

pub fn parse_cifar(bytes: &[u8], opts: &CifarOptions) -> Result<Dataset> {
    if opts.label_bytes == 0 || opts.label_bytes > 2 {
        return Err(Error::Config(format!("label_bytes must be 1 or 2, got {}", opts.label_bytes)));
    }
    let rec = opts.record_len();
    let whole = bytes.len() / rec * rec;
    if whole != bytes.len() {
        return Err(Error::Parse {
            offset: whole,
            detail: format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - whole
            ),
        });
    }
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    let mut pixels = Vec::with_capacity(bytes.len() / rec * opts.image_shape.elements());
    for (i, r) in bytes.chunks(rec).enumerate() {
        let label = r[opts.label_bytes - 1] as usize;
        if label >= opts.num_classes {
            return Err(Error::Parse {
                offset: i * rec + opts.label_bytes - 1,
                detail: format!("label {label} >= {} classes", opts.num_classes),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&r[opts.label_bytes..]);
    }
    let mut ds = Dataset::new(
        opts.image_shape,
        opts.num_classes,
        labels,
        pixels,
        Normalization::none(opts.image_shape.channels),
    )?;
    ds.norm = match opts.norm {
        NormMode::Canonical if opts.image_shape.channels == 3 => Normalization::cifar10(),
        NormMode::Canonical => Normalization::none(opts.image_shape.channels),
        NormMode::Computed => ds.measure_normalization(),
    };
    Ok(ds)
}

pub fn load_cifar_binary(path: impl AsRef<Path>, opts: &CifarOptions) -> Result<Dataset> {
    parse_cifar(&fs::read(path)?, opts)
}

/// Concatenates several batch files (e.g. `data_batch_1.bin` … `data_batch_5.bin`).
pub fn load_cifar_files(paths: &[impl AsRef<Path>], opts: &CifarOptions) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(fs::read(p)?);
    }
    parse_cifar(&bytes, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub blob_separation: f32,
}

impl SyntheticSpec {
    pub fn shape(&self) -> LayerShape {
        LayerShape::new(3, self.image_size, self.image_size)
    }
}

/// Gaussian class blobs: each class has a random per-channel offset and a
/// per-pixel pattern, both scaled by `blob_separation / 10`, plus unit noise.
/// Records are interleaved by class.
pub fn synthetic_generate(spec: &SyntheticSpec) -> Dataset {
    let shape = spec.shape();
    let n = shape.elements();
    let plane = spec.image_size * spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.blob_separation / 10.0;
    let protos: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|_| {
            let offsets: Vec<f32> = (0..shape.channels).map(|_| rng.sample(StandardNormal)).collect();
            (0..n)
                .map(|j| {
                    let p: f32 = rng.sample(StandardNormal);
                    scale * (offsets[j / plane] + 0.5 * p)
                })
                .collect()
        })
        .collect();
    let total = spec.num_classes * spec.samples_per_class;
    let mut labels = Vec::with_capacity(total);
    let mut bytes = Vec::with_capacity(total * n);
    for i in 0..total {
        let c = i % spec.num_classes;
        labels.push(c);
        for &p in &protos[c] {
            let noise: f32 = StandardNormal.sample(&mut rng);
            let z = p + noise;
            bytes.push((128.0 + 32.0 * z).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut ds = Dataset::new(shape, spec.num_classes, labels, bytes, Normalization::none(3))
        .expect("generator produces consistent records");
    ds.norm = ds.measure_normalization();
    ds
}

/// Record order for one epoch: a permutation that depends only on
/// `(seed, epoch)`, cut into batches with the short remainder kept last.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 0));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Independent stream per `(seed, epoch, purpose)`.
pub fn epoch_rng(seed: u64, epoch: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(4).wrapping_add(purpose));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut bytes = Vec::new();
        for (label, base) in [(3u8, 10u8), (7u8, 200u8)] {
            bytes.push(label);
            for j in 0..3072usize {
                bytes.push(base.wrapping_add((j % 7) as u8));
            }
        }
        bytes
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = parse_cifar(&[], &CifarOptions::cifar10()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn two_record_fixture() {
        let ds = parse_cifar(&fixture(), &CifarOptions::cifar10()).unwrap();
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.raw_pixels(0)[0], 10);
        assert_eq!(ds.raw_pixels(0)[1025], 10 + (1025 % 7) as u8);
        assert_eq!(ds.raw_pixels(1)[3071], 200 + (3071 % 7) as u8);
        let img = ds.get(1);
        let expected = (200.0 / 255.0 - CIFAR10_MEAN[0]) / CIFAR10_STD[0];
        assert!((img.pixels[0] - expected).abs() < 1e-6);
        assert_eq!(ds.to_cifar_bytes(1), fixture());
    }

    #[test]
    fn one_byte_short_is_truncation_at_zero() {
        let err = parse_cifar(&[0u8; 3072], &CifarOptions::cifar10()).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut bytes = fixture();
        bytes[3073] = 10;
        let err = parse_cifar(&bytes, &CifarOptions::cifar10()).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 3073, .. }), "{err}");
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![4u8, 42u8];
        rec.extend(std::iter::repeat_n(0u8, 3072));
        let ds = parse_cifar(&rec, &CifarOptions::cifar100()).unwrap();
        assert_eq!(ds.labels(), &[42]);
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec {
            num_classes: 2,
            samples_per_class: 10,
            image_size: 8,
            seed: 5,
            blob_separation: 10.0,
        };
        let a = synthetic_generate(&spec);
        assert_eq!(a.len(), 20);
        assert_eq!(a, synthetic_generate(&spec));
        let other = synthetic_generate(&SyntheticSpec { seed: 6, ..spec });
        assert_ne!(a, other);
    }

    #[test]
    fn synthetic_round_trips_through_cifar_bytes() {
        let spec = SyntheticSpec {
            num_classes: 3,
            samples_per_class: 4,
            image_size: 16,
            seed: 1,
            blob_separation: 10.0,
        };
        let a = synthetic_generate(&spec);
        let opts = CifarOptions {
            num_classes: 3,
            image_shape: spec.shape(),
            norm: NormMode::Computed,
            ..CifarOptions::cifar10()
        };
        let b = parse_cifar(&a.to_cifar_bytes(1), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_sizes_keep_short_tail() {
        let b = batches(10, 4, 0, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn batches_are_pure_in_seed_and_epoch() {
        assert_eq!(batches(100, 7, 3, 2), batches(100, 7, 3, 2));
        let a: Vec<usize> = batches(1000, 1000, 3, 0).concat();
        let b: Vec<usize> = batches(1000, 1000, 3, 1).concat();
        assert_ne!(a, b);
    }

    #[test]
    fn augmentation_preserves_shape() {
        let ds = parse_cifar(&fixture(), &CifarOptions::cifar10()).unwrap();
        let mut rng = epoch_rng(0, 0, 1);
        let (t, labels) = ds.batch_tensor(&[1, 0], Some(&mut rng));
        assert_eq!(t.shape(), &[2, 3, 32, 32]);
        assert_eq!(labels, vec![7, 3]);
    }

    proptest::proptest! {
        #[test]
        fn every_record_once_per_epoch(len in 0usize..300, bs in 1usize..40, seed in 0u64..1000, epoch in 0u64..50) {
            let mut all: Vec<usize> = batches(len, bs, seed, epoch).concat();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        }
    }
}
