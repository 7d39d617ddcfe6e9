//! Dataset loading and sequentialization.
//!
//! Images are read from IDX (MNIST) or CIFAR-10 binary files, flattened in
//! row-major pixel order into token sequences and normalized with dataset
//! statistics. The permuted variant reorders the 784 positions with a
//! Fisher-Yates shuffle driven by SplitMix64, which is easy to reproduce in
//! any language:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! return z ^ (z >> 31)
//! for i in n-1 down to 1: j = next() % (i + 1); swap(p[i], p[j])
//! ```
//!
//! Seed 0 is reserved for the identity permutation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 32 * 32 * 3;
/// Environment variable consulted for the data directory.
pub const DATA_DIR_ENV: &str = "NEUROSSM_DATA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Smnist,
    Psmnist,
    Scifar,
}

impl DatasetName {
    pub fn input_dim(self) -> usize {
        match self {
            DatasetName::Scifar => 3,
            _ => 1,
        }
    }

    pub fn seq_len(self) -> usize {
        match self {
            DatasetName::Scifar => 1024,
            _ => 784,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Scale01,
    Standardize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub permutation_seed: u64,
    pub subset_size: Option<usize>,
    pub test_subset_size: Option<usize>,
    pub normalization: Normalization,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            name: DatasetName::Smnist,
            permutation_seed: 0,
            subset_size: None,
            test_subset_size: None,
            normalization: Normalization::Scale01,
        }
    }
}

/// Decoded images, pixels stored `count × height × width × channels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * self.channels;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn format_err<T>(offset: u64, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset, msg: msg.into() })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4 bytes"))),
        None => format_err(at as u64, "truncated header"),
    }
}

/// Parse an IDX image file (magic 0x00000803): `count × rows × cols` bytes.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return format_err(0, format!("bad IDX image magic {magic:#010x}"));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return format_err(bytes.len() as u64, format!("truncated image data: need {need} bytes, have {}", body.len()));
    }
    Ok((count, rows, cols, body[..need].to_vec()))
}

/// Parse an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8], classes: u8) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return format_err(0, format!("bad IDX label magic {magic:#010x}"));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return format_err(bytes.len() as u64, format!("truncated labels: need {count}, have {}", body.len()));
    }
    if let Some(i) = body[..count].iter().position(|l| *l >= classes) {
        return format_err(8 + i as u64, format!("label {} out of range", body[i]));
    }
    Ok(body[..count].to_vec())
}

/// MNIST images and labels from a pair of IDX files.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<RawImages> {
    let (count, rows, cols, pixels) = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?, 10)?;
    if labels.len() != count {
        return Err(Error::Data(format!("{count} images but {} labels", labels.len())));
    }
    Ok(RawImages { height: rows, width: cols, channels: 1, pixels, labels })
}

/// Parse CIFAR-10 binary records (label byte, then planar 32×32 R, G, B).
pub fn parse_cifar10(bytes: &[u8]) -> Result<RawImages> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return format_err(whole as u64, "truncated CIFAR-10 record");
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return format_err((r * CIFAR_RECORD_BYTES) as u64, format!("label {} out of range", rec[0]));
        }
        labels.push(rec[0]);
        let planes = &rec[1..];
        for p in 0..1024 {
            pixels.extend([planes[p], planes[1024 + p], planes[2048 + p]]);
        }
    }
    Ok(RawImages { height: 32, width: 32, channels: 3, pixels, labels })
}

pub fn load_cifar10(paths: &[PathBuf]) -> Result<RawImages> {
    let mut all = RawImages { height: 32, width: 32, channels: 3, pixels: Vec::new(), labels: Vec::new() };
    for p in paths {
        let part = parse_cifar10(&fs::read(p)?)?;
        all.pixels.extend(part.pixels);
        all.labels.extend(part.labels);
    }
    Ok(all)
}

struct SplitMix64(u64);

impl SplitMix64 {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Seeded permutation of `0..n`; seed 0 gives the identity.
pub fn permutation(seed: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if seed == 0 {
        return p;
    }
    let mut rng = SplitMix64(seed);
    for i in (1..n).rev() {
        let j = (rng.next() % (i as u64 + 1)) as usize;
        p.swap(i, j);
    }
    p
}

pub fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, v) in p.iter().enumerate() {
        inv[*v] = i;
    }
    inv
}

/// Affine pixel normalization `(x - offset) / scale` shared by a whole dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub offset: f32,
    pub scale: f32,
}

impl PixelStats {
    /// Statistics of `images` for the given normalization.
    pub fn fit(images: &RawImages, norm: Normalization) -> Self {
        match norm {
            Normalization::Scale01 => {
                let min = images.pixels.iter().copied().min().unwrap_or(0) as f32;
                let max = images.pixels.iter().copied().max().unwrap_or(0) as f32;
                Self { offset: min, scale: if max > min { max - min } else { 1.0 } }
            }
            Normalization::Standardize => {
                let n = images.pixels.len().max(1) as f64;
                let mean = images.pixels.iter().map(|v| *v as f64).sum::<f64>() / n;
                let var = images.pixels.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
                Self { offset: mean as f32, scale: if var > 0.0 { var.sqrt() as f32 } else { 1.0 } }
            }
        }
    }

    pub fn apply(&self, v: u8) -> f32 {
        (v as f32 - self.offset) / self.scale
    }
}

/// One classification example: tokens stored channel-major (`input_dim × len`).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub tokens: Vec<f32>,
    pub label: usize,
}

/// Flatten an image (`height × width × channels`) in row-major pixel order,
/// optionally reordering positions with `perm` (`tokens[t] = pixel[perm[t]]`).
pub fn sequentialize(image: &[u8], channels: usize, label: u8, perm: Option<&[usize]>, stats: &PixelStats) -> SequenceSample {
    let len = image.len() / channels;
    let mut tokens = vec![0.0f32; image.len()];
    for t in 0..len {
        let pos = perm.map_or(t, |p| p[t]);
        for c in 0..channels {
            tokens[c * len + t] = stats.apply(image[pos * channels + c]);
        }
    }
    SequenceSample { tokens, label: label as usize }
}

/// Fixed-length labeled sequences ready for a model.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub input_dim: usize,
    pub seq_len: usize,
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl SequenceDataset {
    pub fn from_images(images: &RawImages, perm: Option<&[usize]>, stats: &PixelStats, limit: Option<usize>) -> Self {
        let n = limit.map_or(images.len(), |l| l.min(images.len()));
        let (mut inputs, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let s = sequentialize(images.image(i), images.channels, images.labels[i], perm, stats);
            inputs.push(s.tokens);
            labels.push(s.label);
        }
        Self { input_dim: images.channels, seq_len: images.height * images.width, inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            input_dim: self.input_dim,
            seq_len: self.seq_len,
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Vec<&[f32]>, Vec<usize>) {
        (idx.iter().map(|i| &self.inputs[*i][..]).collect(), idx.iter().map(|i| self.labels[*i]).collect())
    }
}

/// Resolve the data directory: explicit path, else `$NEUROSSM_DATA`, else `./data`.
pub fn data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Train and test splits for `spec` from `dir` (`dir/mnist/…` or `dir/cifar-10-batches-bin/…`).
/// Normalization statistics come from the training split.
pub fn load_dataset(spec: &DatasetSpec, dir: &Path) -> Result<(SequenceDataset, SequenceDataset)> {
    let (train, test) = match spec.name {
        DatasetName::Smnist | DatasetName::Psmnist => {
            let m = dir.join("mnist");
            let need = |f: &str| -> Result<PathBuf> {
                let p = m.join(f);
                if p.exists() {
                    Ok(p)
                } else {
                    Err(Error::Data(format!("missing {}", p.display())))
                }
            };
            (
                load_mnist(&need("train-images-idx3-ubyte")?, &need("train-labels-idx1-ubyte")?)?,
                load_mnist(&need("t10k-images-idx3-ubyte")?, &need("t10k-labels-idx1-ubyte")?)?,
            )
        }
        DatasetName::Scifar => {
            let c = dir.join("cifar-10-batches-bin");
            let train: Vec<PathBuf> = (1..=5).map(|i| c.join(format!("data_batch_{i}.bin"))).collect();
            for p in train.iter().chain([&c.join("test_batch.bin")]) {
                if !p.exists() {
                    return Err(Error::Data(format!("missing {}", p.display())));
                }
            }
            (load_cifar10(&train)?, load_cifar10(&[c.join("test_batch.bin")])?)
        }
    };
    let perm = match spec.name {
        DatasetName::Psmnist => Some(permutation(spec.permutation_seed, train.height * train.width)),
        _ => None,
    };
    let stats = PixelStats::fit(&train, spec.normalization);
    Ok((
        SequenceDataset::from_images(&train, perm.as_deref(), &stats, spec.subset_size),
        SequenceDataset::from_images(&test, perm.as_deref(), &stats, spec.test_subset_size),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABELS_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let (n, r, c, px) = parse_idx_images(&idx_images(3, 28, 28, 7)).unwrap();
        assert_eq!((n, r, c, px.len()), (3, 28, 28, 3 * 784));
        assert_eq!(parse_idx_labels(&idx_labels(&[1, 9, 0]), 10).unwrap(), vec![1, 9, 0]);

        let mut bad = idx_images(1, 28, 28, 0);
        bad[3] = 0x01;
        match parse_idx_images(&bad) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"));
            }
            other => panic!("{other:?}"),
        }
        let trunc = &idx_images(2, 28, 28, 0)[..100];
        assert!(matches!(parse_idx_images(trunc), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_labels(&idx_labels(&[3, 10]), 10), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![4u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8 * 10));
        let mut two = rec.clone();
        two.extend(&rec);
        let imgs = parse_cifar10(&two).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(&imgs.image(1)[..3], &[0, 10, 20]);
        assert!(parse_cifar10(&two[..5000]).is_err());
        rec[0] = 11;
        assert!(parse_cifar10(&rec).is_err());
    }

    #[test]
    fn permutation_properties() {
        assert_eq!(permutation(0, 784), (0..784).collect::<Vec<_>>());
        let p = permutation(42, 784);
        assert_eq!(p, permutation(42, 784));
        assert_ne!(p, permutation(43, 784));
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..784).collect::<Vec<_>>());
        assert_eq!(p.iter().sum::<usize>(), 783 * 784 / 2);
    }

    #[test]
    fn inverse_permutation_restores_sequence() {
        let img: Vec<u8> = (0..784).map(|i| (i % 251) as u8).collect();
        let stats = PixelStats { offset: 0.0, scale: 1.0 };
        let p = permutation(7, 784);
        let s = sequentialize(&img, 1, 3, Some(&p), &stats);
        let inv = inverse_permutation(&p);
        let back: Vec<f32> = (0..784).map(|t| s.tokens[inv[t]]).collect();
        let plain = sequentialize(&img, 1, 3, None, &stats);
        assert_eq!(back, plain.tokens);
        assert_eq!(sequentialize(&img, 1, 3, Some(&permutation(0, 784)), &stats), plain);
    }

    #[test]
    fn scale01_is_global() {
        let imgs = RawImages { height: 1, width: 2, channels: 1, pixels: vec![10, 20, 30, 110], labels: vec![0, 1] };
        let st = PixelStats::fit(&imgs, Normalization::Scale01);
        assert_eq!(st.apply(10), 0.0);
        assert_eq!(st.apply(110), 1.0);
        // the first image alone does not span [0, 1]
        let ds = SequenceDataset::from_images(&imgs, None, &st, None);
        assert_eq!(ds.inputs[0], vec![0.0, 0.1]);
        let sd = PixelStats::fit(&imgs, Normalization::Standardize);
        let mean: f32 = imgs.pixels.iter().map(|v| sd.apply(*v)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn cifar_tokens_are_rgb_channel_major() {
        let mut px = vec![0u8; 32 * 32 * 3];
        px[3] = 1; // pixel 1, red
        px[5] = 2; // pixel 1, blue
        let s = sequentialize(&px, 3, 0, None, &PixelStats { offset: 0.0, scale: 1.0 });
        assert_eq!(s.tokens.len(), 3 * 1024);
        assert_eq!(s.tokens[1], 1.0);
        assert_eq!(s.tokens[2 * 1024 + 1], 2.0);
    }

    proptest! {
        #[test]
        fn permutation_is_bijection(seed in any::<u64>(), n in 1usize..2000) {
            let p = permutation(seed, n);
            let inv = inverse_permutation(&p);
            for i in 0..n {
                prop_assert_eq!(inv[p[i]], i);
            }
        }
    }
}
