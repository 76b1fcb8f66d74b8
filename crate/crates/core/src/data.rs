//! Labeled image datasets in the `[0, 255]` pixel domain: IDX and CIFAR-10
//! binary readers, stratified splits, class balancing, and alpha-mixing of
//! training images.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::tensor::Tensor;

pub const PIXEL_MIN: f32 = 0.0;
pub const PIXEL_MAX: f32 = 255.0;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be N x C x H x W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            }
            .into());
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                label,
                classes: num_classes,
            }
            .into());
        }
        if let Some(v) = images
            .data()
            .iter()
            .find(|v| !(PIXEL_MIN..=PIXEL_MAX).contains(*v))
        {
            return Err(DataError::PixelRange(v.to_string()).into());
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(LabeledDataset {
            images: self.images.select_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in self.images.data().iter().enumerate() {
            let ch = (i / plane) % c;
            sum[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}

// ---------------------------------------------------------------------------
// file formats

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            DataError::Truncated {
                expected: at + 4,
                found: bytes.len(),
            }
            .into()
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses IDX image (`0x00000803`) and label (`0x00000801`) files.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        }
        .into());
    }
    let lmagic = be_u32(labels, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            found: lmagic,
            expected: IDX_LABELS_MAGIC,
        }
        .into());
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let nl = be_u32(labels, 4)? as usize;
    if n != nl {
        return Err(DataError::CountMismatch {
            images: n,
            labels: nl,
        }
        .into());
    }
    let expected = 16 + n * rows * cols;
    if images.len() != expected {
        return Err(DataError::Truncated {
            expected,
            found: images.len(),
        }
        .into());
    }
    if labels.len() != 8 + n {
        return Err(DataError::Truncated {
            expected: 8 + n,
            found: labels.len(),
        }
        .into());
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Empty.into());
    }
    let pixels = images[16..].iter().map(|&b| b as f32).collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(
        Tensor::from_parts(vec![n, 1, rows, cols], pixels),
        labels,
        classes.max(2),
    )
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    parse_idx(
        &read_file(images_path.as_ref())?,
        &read_file(labels_path.as_ref())?,
    )
}

/// Encodes a single-channel dataset as IDX image and label files.
pub fn encode_idx(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Shape(format!(
            "IDX stores one channel, dataset has {c}"
        )));
    }
    let mut images = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(
        ds.images
            .data()
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn save_idx(
    ds: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    std::fs::write(images_path.as_ref(), img).map_err(|e| Error::io(images_path.as_ref(), e))?;
    std::fs::write(labels_path.as_ref(), lab).map_err(|e| Error::io(labels_path.as_ref(), e))
}

/// Parses CIFAR-10 binary records: one label byte, then 1024 bytes each of
/// the R, G and B planes.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() {
        return Err(DataError::Empty.into());
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::RecordLength {
            len: bytes.len(),
            record: CIFAR_RECORD,
        }
        .into());
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(DataError::LabelOutOfRange { label, classes: 10 }.into());
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32));
    }
    LabeledDataset::new(Tensor::from_parts(vec![n, 3, 32, 32], pixels), labels, 10)
}

pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut parts = Vec::new();
    for p in paths {
        parts.push(parse_cifar_binary(&read_file(p.as_ref())?)?);
    }
    concat(&parts)
}

fn concat(parts: &[LabeledDataset]) -> Result<LabeledDataset> {
    let first = parts.first().ok_or(Error::Data(DataError::Empty))?;
    let images = Tensor::concat_outer(&parts.iter().map(|p| p.images.clone()).collect::<Vec<_>>())?;
    let labels = parts
        .iter()
        .flat_map(|p| p.labels.iter().copied())
        .collect();
    LabeledDataset::new(images, labels, first.num_classes)
}

// ---------------------------------------------------------------------------
// splitting and balancing

/// Stratified holdout: each class contributes `floor(fraction * n_c)` images
/// to the training side, the rest to validation. Both sides keep the
/// original order.
pub fn holdout_split(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidSplit(format!(
            "train fraction {fraction} leaves one side empty"
        ))
        .into());
    }
    if ds.len() < ds.num_classes {
        return Err(DataError::InvalidSplit(format!(
            "{} images for {} classes",
            ds.len(),
            ds.num_classes
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        if idx.is_empty() {
            return Err(DataError::EmptyClass(class).into());
        }
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).floor() as usize;
        train.extend_from_slice(&idx[..k]);
        val.extend_from_slice(&idx[k..]);
    }
    if train.is_empty() || val.is_empty() {
        return Err(DataError::InvalidSplit("split leaves one side empty".into()).into());
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train)?, ds.subset(&val)?))
}

/// Keeps exactly `per_class` images of every class.
pub fn balance_classes(ds: &LabeledDataset, per_class: usize, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(per_class * ds.num_classes);
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        if idx.len() < per_class {
            return Err(DataError::InsufficientClass {
                class,
                available: idx.len(),
                required: per_class,
            }
            .into());
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..per_class]);
    }
    if keep.is_empty() {
        return Err(DataError::Empty.into());
    }
    keep.sort_unstable();
    ds.subset(&keep)
}

// ---------------------------------------------------------------------------
// alpha mixing

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AlphaSource {
    Fixed { alpha: f64 },
    Beta { p: f64, q: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    #[serde(flatten)]
    pub source: AlphaSource,
    pub kl_weight: f64,
}

/// Redraw limit for Beta samples that land outside `(0, 0.5)`.
pub const ALPHA_RETRY_CAP: usize = 1000;

impl MixConfig {
    pub fn fixed(alpha: f64, kl_weight: f64) -> Result<Self> {
        let cfg = MixConfig {
            source: AlphaSource::Fixed { alpha },
            kl_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn beta(p: f64, q: f64, kl_weight: f64) -> Result<Self> {
        let cfg = MixConfig {
            source: AlphaSource::Beta { p, q },
            kl_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(DataError::InvalidMix(format!("kl weight {}", self.kl_weight)).into());
        }
        match self.source {
            AlphaSource::Fixed { alpha } if !(alpha > 0.0 && alpha < 0.5) => {
                Err(DataError::InvalidMix(format!("alpha {alpha} outside (0, 0.5)")).into())
            }
            AlphaSource::Beta { p, q }
                if !(p > 0.0 && q > 0.0 && p.is_finite() && q.is_finite()) =>
            {
                Err(DataError::InvalidMix(format!("beta parameters p={p}, q={q}")).into())
            }
            _ => Ok(()),
        }
    }
}

/// The fixed alpha, or a `Beta(p, q)` draw redrawn until it lies in `(0, 0.5)`.
pub fn sample_alpha(cfg: &MixConfig, rng: &mut impl Rng) -> Result<f64> {
    cfg.validate()?;
    match cfg.source {
        AlphaSource::Fixed { alpha } => Ok(alpha),
        AlphaSource::Beta { p, q } => {
            let dist = Beta::new(p, q).map_err(|e| DataError::InvalidMix(e.to_string()))?;
            for _ in 0..ALPHA_RETRY_CAP {
                let a: f64 = dist.sample(rng);
                if a > 0.0 && a < 0.5 {
                    return Ok(a);
                }
            }
            Err(DataError::InvalidMix(format!(
                "no Beta({p}, {q}) draw below 0.5 in {ALPHA_RETRY_CAP} attempts"
            ))
            .into())
        }
    }
}

/// `(1 - alpha) * x + alpha * partner`; the result keeps the label of `x`.
pub fn mix_images(x: &Tensor, partner: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(DataError::InvalidMix(format!("alpha {alpha} outside (0, 0.5)")).into());
    }
    if x.shape() != partner.shape() {
        return Err(Error::Shape(format!(
            "cannot mix {:?} with {:?}",
            x.shape(),
            partner.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(partner.data())
        .map(|(&a, &b)| ((1.0 - alpha) * a as f64 + alpha * b as f64) as f32)
        .collect();
    Tensor::new(x.shape(), data)
}

/// Row-wise [`mix_images`] over a batch with one alpha per row.
pub fn mix_batch(x: &Tensor, partners: &Tensor, alphas: &[f64]) -> Result<Tensor> {
    if x.shape() != partners.shape() || alphas.len() != x.shape()[0] {
        return Err(Error::Shape(format!(
            "mix_batch of {:?} and {:?} with {} alphas",
            x.shape(),
            partners.shape(),
            alphas.len()
        )));
    }
    let row = x.len() / alphas.len();
    let mut out = Vec::with_capacity(x.len());
    for (i, &alpha) in alphas.iter().enumerate() {
        let xi = Tensor::from_parts(vec![row], x.data()[i * row..(i + 1) * row].to_vec());
        let ri = Tensor::from_parts(vec![row], partners.data()[i * row..(i + 1) * row].to_vec());
        out.extend(mix_images(&xi, &ri, alpha)?.into_data());
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(n: u32, rows: u32, cols: u32, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    fn toy(counts: &[usize]) -> LabeledDataset {
        let n: usize = counts.iter().sum();
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect();
        let images =
            Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| (i % 256) as f32).collect()).unwrap();
        LabeledDataset::new(images, labels, counts.len()).unwrap()
    }

    #[test]
    fn idx_parses() {
        let (img, lab) = idx_bytes(3, 28, 28, &[0, 9, 4]);
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape(), [1, 28, 28]);
        assert_eq!(ds.labels(), &[0, 9, 4]);
        assert_eq!(ds.num_classes(), 10);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (img, lab) = idx_bytes(3, 4, 4, &[0, 1]);
        assert!(matches!(
            parse_idx(&img, &lab),
            Err(Error::Data(DataError::CountMismatch {
                images: 3,
                labels: 2
            }))
        ));
        let (img, lab) = idx_bytes(3, 4, 4, &[0, 1, 2]);
        assert!(matches!(
            parse_idx(&img[..img.len() - 1], &lab),
            Err(Error::Data(DataError::Truncated { .. }))
        ));
        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx(&bad, &lab),
            Err(Error::Data(DataError::BadMagic { .. }))
        ));
    }

    #[test]
    fn idx_round_trip() {
        let (img, lab) = idx_bytes(5, 3, 2, &[1, 0, 1, 1, 0]);
        let ds = parse_idx(&img, &lab).unwrap();
        let (img2, lab2) = encode_idx(&ds).unwrap();
        assert_eq!(img, img2);
        assert_eq!(lab, lab2);
    }

    #[test]
    fn cifar_single_record() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        let ds = parse_cifar_binary(&rec).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[7]);
        assert_eq!(ds.image_shape(), [3, 32, 32]);
        assert!(ds.images().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cifar_errors() {
        assert!(matches!(
            parse_cifar_binary(&vec![0u8; CIFAR_RECORD + 1]),
            Err(Error::Data(DataError::RecordLength { .. }))
        ));
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(matches!(
            parse_cifar_binary(&rec),
            Err(Error::Data(DataError::LabelOutOfRange { label: 10, .. }))
        ));
    }

    #[test]
    fn holdout_arithmetic_and_determinism() {
        let ds = toy(&[100; 10]);
        let (tr, va) = holdout_split(&ds, 0.8, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (800, 200));
        assert!(tr.class_counts().iter().all(|&c| c == 80));
        let (tr2, va2) = holdout_split(&ds, 0.8, 3).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert!(holdout_split(&ds, 1.0, 3).is_err());
    }

    #[test]
    fn holdout_empty_class() {
        let ds = toy(&[5, 0, 5]);
        assert!(matches!(
            holdout_split(&ds, 0.8, 0),
            Err(Error::Data(DataError::EmptyClass(1)))
        ));
    }

    #[test]
    fn balancing() {
        let ds = toy(&[120, 100, 100]);
        let b = balance_classes(&ds, 100, 1).unwrap();
        assert_eq!(b.len(), 300);
        assert_eq!(b.class_counts(), vec![100, 100, 100]);
        assert_eq!(b, balance_classes(&ds, 100, 1).unwrap());
        match balance_classes(&ds, 150, 1) {
            Err(Error::Data(DataError::InsufficientClass { class, .. })) => assert_eq!(class, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fixed_alpha_is_returned() {
        let cfg = MixConfig::fixed(0.4, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_alpha(&cfg, &mut rng).unwrap(), 0.4);
    }

    #[test]
    fn mix_config_validation() {
        assert!(MixConfig::fixed(0.5, 0.0).is_err());
        assert!(MixConfig::fixed(0.0, 0.0).is_err());
        assert!(MixConfig::beta(0.0, 4.0, 10.0).is_err());
        assert!(MixConfig::beta(2.0, 4.0, -1.0).is_err());
        assert!(MixConfig::beta(2.0, 4.0, 10.0).is_ok());
    }

    #[test]
    fn beta_draws_respect_bound() {
        let cfg = MixConfig::beta(2.0, 4.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let a = sample_alpha(&cfg, &mut rng).unwrap();
            assert!(a > 0.0 && a < 0.5);
        }
    }

    #[test]
    fn mixing_examples() {
        let x = Tensor::full(&[1, 2, 2], 100.0);
        let r = Tensor::full(&[1, 2, 2], 200.0);
        let m = mix_images(&x, &r, 0.25).unwrap();
        assert!(m.data().iter().all(|&v| v == 125.0));
        let tiny = mix_images(&x, &r, 1e-9).unwrap();
        assert!(tiny.max_abs_diff(&x).unwrap() < 1e-6);
        assert!(mix_images(&x, &r, 0.5).is_err());
        assert!(mix_images(&x, &r, 0.0).is_err());
    }

    #[test]
    fn figure_weighting_at_point_three() {
        let x = Tensor::new(&[2], vec![0.0, 255.0]).unwrap();
        let r = Tensor::new(&[2], vec![255.0, 0.0]).unwrap();
        let m = mix_images(&x, &r, 0.3).unwrap();
        assert!((m.data()[0] - 76.5).abs() < 1e-4);
        assert!((m.data()[1] - 178.5).abs() < 1e-4);
    }

    #[test]
    fn channel_stats_of_constant_planes() {
        let mut data = vec![10.0f32; 4];
        data.extend(vec![30.0f32; 4]);
        let ds =
            LabeledDataset::new(Tensor::new(&[1, 2, 2, 2], data).unwrap(), vec![0], 2).unwrap();
        let (m, s) = ds.channel_stats();
        assert_eq!(m, vec![10.0, 30.0]);
        assert!(s.iter().all(|&v| v > 0.0));
    }
}
