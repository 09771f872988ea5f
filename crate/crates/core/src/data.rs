//! Datasets: CIFAR-10 binary records, a synthetic blob generator,
//! standardisation and pad-crop-flip augmentation.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::{keyed_rng, standard_normal, stream_for, streams, DrawId};
use crate::tensor::{Real, Shape, Tensor};

/// Bytes per CIFAR-10 record: one label byte and 3x32x32 pixels.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

/// Images `[N][C][H][W]` (kept in `f64`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Option<Tensor<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Image geometry `(C, H, W)`.
    pub geometry: (usize, usize, usize),
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.n != labels.len() {
            return Err(config_err!("{} images but {} labels", s.n, labels.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(config_err!("label {l} outside 0..{classes}"));
        }
        Ok(Self {
            images: Some(images),
            labels,
            classes,
            geometry: (s.c, s.h, s.w),
        })
    }

    pub fn empty(classes: usize, geometry: (usize, usize, usize)) -> Self {
        Self {
            images: None,
            labels: Vec::new(),
            classes,
            geometry,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.as_ref().expect("non-empty dataset").sample(i)
    }

    /// Gather a batch, cast to `T`.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.as_ref().ok_or_else(|| config_err!("batch from an empty dataset"))?;
        Ok((images.gather(idx)?.cast(), idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Ok(Self::empty(self.classes, self.geometry));
        }
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = self.batch::<f64>(&idx)?;
        Self::new(x, y, self.classes)
    }

    /// Per-channel population mean and standard deviation.
    pub fn channel_stats(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let images = self
            .images
            .as_ref()
            .ok_or_else(|| config_err!("cannot compute statistics of an empty dataset"))?;
        let (mean, var) = images.moments();
        let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        if let Some(c) = std.iter().position(|&s| s <= 1e-12) {
            return Err(config_err!("channel {c} has zero standard deviation"));
        }
        Ok((mean, std))
    }

    /// `(x - mean_c) / std_c` in place.
    pub fn apply_standardization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let Some(images) = self.images.as_mut() else {
            return Ok(());
        };
        let s = images.shape();
        if mean.len() != s.c || std.len() != s.c {
            return Err(config_err!("statistics for {} channels, images have {}", mean.len(), s.c));
        }
        for i in 0..s.n {
            for c in 0..s.c {
                for v in images.plane_mut(i, c) {
                    *v = (*v - mean[c]) / std[c];
                }
            }
        }
        Ok(())
    }
}

/// `standardize` normalises each channel with training-split statistics;
/// `scale_only` keeps the `/255` pixel scaling as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Standardize,
    ScaleOnly,
}

/// Standardise `train` with its own statistics and every other split with
/// the same statistics. Returns the `(mean, std)` used.
pub fn standardize(
    train: &mut Dataset,
    others: &mut [&mut Dataset],
    mode: Normalization,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = train.geometry.0;
    if mode == Normalization::ScaleOnly {
        return Ok((vec![0.0; c], vec![1.0; c]));
    }
    let (mean, std) = train.channel_stats()?;
    train.apply_standardization(&mean, &std)?;
    for o in others.iter_mut() {
        o.apply_standardization(&mean, &std)?;
    }
    Ok((mean, std))
}

/// Parse CIFAR-10 binary records; pixels are mapped to `[0, 1]` by `/255`.
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a multiple of the {CIFAR_RECORD}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    if n == 0 {
        return Ok(Dataset::empty(CIFAR_CLASSES, (3, 32, 32)));
    }
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i}: label {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::from_vec((n, 3, 32, 32), pixels)?, labels, CIFAR_CLASSES)
}

pub fn read_cifar_binary(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_cifar(&bytes)
}

/// Encode as CIFAR-10 records. Pixels must lie in `[0, 1]`; they are stored
/// as `round(255 x)`.
pub fn encode_cifar(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.geometry != (3, 32, 32) || ds.classes > CIFAR_CLASSES {
        return Err(Error::Format(format!(
            "CIFAR layout needs 3x32x32 images and at most 10 classes, got {:?} / {}",
            ds.geometry, ds.classes
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        for &v in ds.image(i) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format(format!("pixel {v} outside [0, 1] in image {i}")));
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_cifar_binary(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_cifar(ds)?)?;
    Ok(())
}

/// Parameters of the synthetic blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n: usize,
    #[serde(default = "ten")]
    pub classes: usize,
    #[serde(default = "thirty_two")]
    pub size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    /// Gaussian blobs per class prototype.
    #[serde(default = "three")]
    pub blobs: usize,
    /// Per-pixel noise standard deviation (pixel range is `[0, 1]`).
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Maximum random shift of the prototype, in pixels.
    #[serde(default)]
    pub jitter: usize,
    #[serde(default)]
    pub seed: u64,
}

fn ten() -> usize {
    10
}

fn thirty_two() -> usize {
    32
}

fn three() -> usize {
    3
}

fn default_noise() -> f64 {
    0.1
}

impl SynthParams {
    pub fn new(n: usize, classes: usize, seed: u64) -> Self {
        Self {
            n,
            classes,
            size: 32,
            channels: 3,
            blobs: 3,
            noise: 0.1,
            jitter: 0,
            seed,
        }
    }
}

/// Class prototype: a sum of coloured Gaussian blobs on a mid-grey field.
fn prototype(p: &SynthParams, class: usize) -> Vec<f64> {
    let stream = stream_for(p.seed, streams::SYNTH);
    let mut rng = keyed_rng(stream, DrawId::new(u64::MAX, class as u64, 0));
    let s = p.size as f64;
    let mut img = vec![0.5; p.channels * p.size * p.size];
    for _ in 0..p.blobs {
        let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let sigma = rng.gen_range(0.1..0.25) * s;
        let amp: Vec<f64> = (0..p.channels).map(|_| rng.gen_range(-0.4..0.4)).collect();
        for c in 0..p.channels {
            for y in 0..p.size {
                for x in 0..p.size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img[(c * p.size + y) * p.size + x] += amp[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    img
}

/// Class-conditional blob images, quantised to multiples of 1/255 in
/// `[0, 1]` so they serialise exactly. Labels cycle through the classes.
pub fn synth_dataset(p: &SynthParams) -> Result<Dataset> {
    if p.classes == 0 || p.size == 0 || p.channels == 0 || !(p.noise >= 0.0) {
        return Err(config_err!("synthetic data needs positive classes/size/channels and noise >= 0"));
    }
    if p.n == 0 {
        return Ok(Dataset::empty(p.classes, (p.channels, p.size, p.size)));
    }
    let protos: Vec<Vec<f64>> = (0..p.classes).map(|c| prototype(p, c)).collect();
    let stream = stream_for(p.seed, streams::SYNTH);
    let (sz, ch) = (p.size, p.channels);
    let mut pixels = Vec::with_capacity(p.n * ch * sz * sz);
    let mut labels = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let label = i % p.classes;
        let mut rng = keyed_rng(stream, DrawId::new(0, i as u64, 0));
        let j = p.jitter as i64;
        let (dy, dx) = if j > 0 {
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        } else {
            (0, 0)
        };
        let proto = &protos[label];
        for c in 0..ch {
            for y in 0..sz {
                for x in 0..sz {
                    let sy = (y as i64 - dy).clamp(0, sz as i64 - 1) as usize;
                    let sx = (x as i64 - dx).clamp(0, sz as i64 - 1) as usize;
                    let v = proto[(c * sz + sy) * sz + sx] + p.noise * standard_normal(&mut rng);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::from_vec((p.n, ch, sz, sz), pixels)?, labels, p.classes)
}

/// Symmetric label noise: each label is replaced, with probability
/// `fraction`, by a uniformly chosen *different* class. Keyed by `seed` and
/// the sample index, so the corruption is reproducible. Returns the number
/// of labels changed.
pub fn corrupt_labels(ds: &mut Dataset, fraction: f64, seed: u64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(config_err!("label noise fraction must lie in [0, 1], got {fraction}"));
    }
    if ds.classes < 2 || fraction == 0.0 {
        return Ok(0);
    }
    let stream = stream_for(seed, streams::SYNTH);
    let mut changed = 0;
    for (i, label) in ds.labels.iter_mut().enumerate() {
        let mut rng = keyed_rng(stream, DrawId::new(1, i as u64, 0));
        if rng.gen_bool(fraction) {
            let other = rng.gen_range(0..ds.classes - 1);
            *label = if other >= *label { other + 1 } else { other };
            changed += 1;
        }
    }
    Ok(changed)
}

fn four() -> usize {
    4
}

fn half() -> f64 {
    0.5
}

/// Zero-pad, random crop, random horizontal flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "four")]
    pub pad: usize,
    /// Output side length; defaults to the input size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<usize>,
    #[serde(default = "half")]
    pub hflip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: false,
            pad: 4,
            crop: None,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn standard() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(config_err!("hflip_prob {} outside [0, 1]", self.hflip_prob));
        }
        if self.crop.unwrap_or(size) > size + 2 * self.pad {
            return Err(config_err!("crop {:?} exceeds padded size {}", self.crop, size + 2 * self.pad));
        }
        Ok(())
    }
}

/// Pad by `pad`, crop `crop x crop` at `(top, left)`, optionally mirror.
pub fn crop_flip(image: &Tensor<f64>, pad: usize, crop: usize, top: usize, left: usize, flip: bool) -> Result<Tensor<f64>> {
    let mut out = image.pad2d(pad).crop2d(top, left, crop, crop)?;
    if flip {
        let s = out.shape();
        for i in 0..s.n {
            for c in 0..s.c {
                for row in out.plane_mut(i, c).chunks_exact_mut(s.w) {
                    row.reverse();
                }
            }
        }
    }
    Ok(out)
}

/// Augment a `[1][C][H][W]` image with offsets and flip drawn from
/// `(stream, draw)`.
pub fn augment(image: &Tensor<f64>, policy: &AugmentPolicy, stream: u64, draw: DrawId) -> Result<Tensor<f64>> {
    if !policy.enabled {
        return Ok(image.clone());
    }
    let h = image.shape().h;
    policy.validate(h)?;
    let crop = policy.crop.unwrap_or(h);
    let span = h + 2 * policy.pad - crop;
    let mut rng = keyed_rng(stream, draw);
    let top = rng.gen_range(0..=span);
    let left = rng.gen_range(0..=span);
    let flip = rng.gen::<f64>() < policy.hflip_prob;
    crop_flip(image, policy.pad, crop, top, left, flip)
}

/// Augment every image of a batch; image `k` uses draw `(epoch, index_k)`.
pub fn augment_batch(
    batch: &Tensor<f64>,
    indices: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
    epoch: u64,
) -> Result<Tensor<f64>> {
    if !policy.enabled {
        return Ok(batch.clone());
    }
    let stream = stream_for(seed, streams::AUGMENT);
    let s = batch.shape();
    let parts = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let img = Tensor::from_vec((1, s.c, s.h, s.w), batch.sample(k).to_vec())?;
            augment(&img, policy, stream, DrawId::new(epoch, i as u64, 0))
        })
        .collect::<Result<Vec<_>>>()?;
    let one = parts[0].shape();
    let mut data = Vec::with_capacity(parts.len() * one.sample());
    for p in parts {
        data.extend(p.into_vec());
    }
    Tensor::from_vec((indices.len(), one.c, one.h, one.w), data)
}

/// Epoch permutation of `0..n`, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut keyed_rng(stream_for(seed, streams::SHUFFLE), DrawId::new(epoch, 0, 0)));
    idx
}

/// Shape of a dataset as a batch of `n` images.
pub fn batch_shape(ds: &Dataset, n: usize) -> Shape {
    let (c, h, w) = ds.geometry;
    Shape::new(n, c, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn label_noise_changes_the_requested_fraction_to_other_classes() {
        let mut ds = synth_dataset(&SynthParams { size: 4, ..SynthParams::new(4000, 10, 1) }).unwrap();
        let clean = ds.labels.clone();
        let changed = corrupt_labels(&mut ds, 0.3, 9).unwrap();
        let diff = clean.iter().zip(&ds.labels).filter(|(a, b)| a != b).count();
        assert_eq!(diff, changed);
        // Binomial(4000, 0.3): sd ~ 29.
        assert!((changed as f64 - 1200.0).abs() < 150.0, "{changed}");
        assert!(ds.labels.iter().all(|&l| l < 10));
        let mut again = synth_dataset(&SynthParams { size: 4, ..SynthParams::new(4000, 10, 1) }).unwrap();
        corrupt_labels(&mut again, 0.3, 9).unwrap();
        assert_eq!(again.labels, ds.labels);
        assert_eq!(corrupt_labels(&mut again, 0.0, 9).unwrap(), 0);
        assert!(corrupt_labels(&mut again, 1.5, 9).is_err());
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_cifar(&[]).unwrap().is_empty());
    }

    #[test]
    fn all_white_record() {
        let mut rec = vec![255u8; CIFAR_RECORD];
        rec[0] = 3;
        let ds = parse_cifar(&rec).unwrap();
        assert_eq!(ds.labels, vec![3]);
        assert!(ds.image(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_size_and_label_are_format_errors() {
        assert!(matches!(parse_cifar(&vec![0u8; 3074]), Err(Error::Format(_))));
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(matches!(parse_cifar(&rec), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let ds = synth_dataset(&SynthParams::new(5, 10, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_cifar_binary(&ds, &path).unwrap();
        let back = read_cifar_binary(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(std::fs::read(&path).unwrap(), encode_cifar(&back).unwrap());
    }

    proptest! {
        #[test]
        fn byte_round_trip(n in 0usize..4, seed in any::<u64>()) {
            let mut rng = keyed_rng(seed, DrawId::default());
            let bytes: Vec<u8> = (0..n * CIFAR_RECORD)
                .enumerate()
                .map(|(i, _)| if i % CIFAR_RECORD == 0 { rng.gen_range(0..10) } else { rng.gen() })
                .collect();
            let ds = parse_cifar(&bytes).unwrap();
            prop_assert_eq!(encode_cifar(&ds).unwrap(), bytes);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let p = SynthParams::new(20, 4, 9);
        assert_eq!(synth_dataset(&p).unwrap(), synth_dataset(&p).unwrap());
        assert!(synth_dataset(&SynthParams::new(0, 4, 9)).unwrap().is_empty());
        assert_ne!(synth_dataset(&p).unwrap(), synth_dataset(&SynthParams::new(20, 4, 10)).unwrap());
    }

    #[test]
    fn synth_high_snr_is_linearly_separable() {
        let mut p = SynthParams::new(400, 10, 1);
        p.noise = 0.05;
        let ds = synth_dataset(&p).unwrap();
        let (train, test) = (ds.slice(0, 200).unwrap(), ds.slice(200, 400).unwrap());
        let dim = train.image(0).len();
        let mut centroid = vec![vec![0.0; dim]; 10];
        let mut count = [0usize; 10];
        for i in 0..train.len() {
            count[train.labels[i]] += 1;
            for (c, v) in centroid[train.labels[i]].iter_mut().zip(train.image(i)) {
                *c += v;
            }
        }
        for (c, k) in centroid.iter_mut().zip(count) {
            c.iter_mut().for_each(|v| *v /= k as f64);
        }
        // Nearest centroid is the linear rule argmax_k (mu_k . x - |mu_k|^2 / 2).
        let errors = (0..test.len())
            .filter(|&i| {
                let score = |mu: &Vec<f64>| -> f64 {
                    mu.iter().zip(test.image(i)).map(|(m, x)| m * x).sum::<f64>()
                        - 0.5 * mu.iter().map(|m| m * m).sum::<f64>()
                };
                let best = (0..10).max_by(|&a, &b| score(&centroid[a]).total_cmp(&score(&centroid[b]))).unwrap();
                best != test.labels[i]
            })
            .count();
        assert!((errors as f64) < 0.05 * test.len() as f64, "{errors} errors");
    }

    #[test]
    fn standardize_uses_train_stats() {
        let mut train = synth_dataset(&SynthParams::new(30, 3, 1)).unwrap();
        let mut p = SynthParams::new(30, 3, 2);
        p.noise = 0.3;
        let mut test = synth_dataset(&p).unwrap();
        let (mean, std) = standardize(&mut train, &mut [&mut test], Normalization::Standardize).unwrap();
        let (m2, v2) = train.images.as_ref().unwrap().moments();
        for c in 0..3 {
            assert!(m2[c].abs() <= 1e-6);
            assert!((v2[c].sqrt() - 1.0).abs() <= 1e-6);
        }
        let (tm, _) = test.images.as_ref().unwrap().moments();
        assert!(tm.iter().any(|m| m.abs() > 1e-3), "test split must not use its own stats");
        assert_eq!(mean.len(), 3);
        assert!(std.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn constant_channel_is_an_error() {
        let ds = Dataset::new(Tensor::full((2, 1, 2, 2), 0.5).unwrap(), vec![0, 1], 2).unwrap();
        assert!(ds.channel_stats().is_err());
        let mut ds2 = ds.clone();
        assert!(standardize(&mut ds2, &mut [], Normalization::Standardize).is_err());
        assert!(standardize(&mut ds2, &mut [], Normalization::ScaleOnly).is_ok());
        assert_eq!(ds, ds2);
    }

    #[test]
    fn augment_cases() {
        let img = Tensor::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(augment(&img, &AugmentPolicy::default(), 1, DrawId::default()).unwrap(), img);
        assert_eq!(crop_flip(&img, 4, 2, 4, 4, false).unwrap(), img);
        assert_eq!(crop_flip(&img, 0, 2, 0, 0, true).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    proptest! {
        #[test]
        fn augment_keeps_shape_and_is_keyed(seed in any::<u64>(), step in 0u64..100) {
            let ds = synth_dataset(&SynthParams { size: 8, ..SynthParams::new(1, 2, seed) }).unwrap();
            let (x, _) = ds.batch::<f64>(&[0]).unwrap();
            let pol = AugmentPolicy::standard();
            let a = augment(&x, &pol, seed, DrawId::new(0, step, 0)).unwrap();
            prop_assert_eq!(a.shape(), x.shape());
            prop_assert_eq!(&a, &augment(&x, &pol, seed, DrawId::new(0, step, 0)).unwrap());
        }
    }

    #[test]
    fn permutation_is_pure() {
        let a = epoch_permutation(50, 3, 1);
        assert_eq!(a, epoch_permutation(50, 3, 1));
        assert_ne!(a, epoch_permutation(50, 3, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
