//! CIFAR binary format.
//!
//! A CIFAR-10 record is 1 label byte followed by 3072 pixel bytes: three
//! 32x32 planes (R, G, B), each row-major. CIFAR-100 records carry a coarse
//! and a fine label byte before the same pixel block; the fine label is the
//! training target.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabeledImages;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const CIFAR10_TRAIN: usize = 50_000;
pub const CIFAR10_TEST: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            CifarKind::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    /// `(train files, test files)` relative to the dataset directory.
    pub fn files(self) -> (Vec<&'static str>, Vec<&'static str>) {
        match self {
            CifarKind::Cifar10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                vec!["test_batch.bin"],
            ),
            CifarKind::Cifar100 => (vec!["train.bin"], vec!["test.bin"]),
        }
    }
}

/// One raw record, kept as bytes so it can be written back unchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    /// CIFAR-100 only.
    pub coarse: Option<u8>,
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Parses a whole file image. `origin` names the source in error messages.
pub fn parse_records(bytes: &[u8], kind: CifarKind, origin: &str) -> Result<Vec<CifarRecord>> {
    let len = kind.record_len();
    let whole = bytes.len() / len;
    if !bytes.len().is_multiple_of(len) {
        return Err(Error::Data(format!(
            "{origin}: truncated record {whole} at byte offset {}: {} of {len} bytes present",
            whole * len,
            bytes.len() % len
        )));
    }
    let coarse_limit = 20;
    bytes
        .chunks_exact(len)
        .enumerate()
        .map(|(i, rec)| {
            let (coarse, label) = match kind {
                CifarKind::Cifar10 => (None, rec[0]),
                CifarKind::Cifar100 => (Some(rec[0]), rec[1]),
            };
            if usize::from(label) >= kind.classes() {
                return Err(Error::Data(format!(
                    "{origin}: record {i}: label {label} outside 0..{}",
                    kind.classes()
                )));
            }
            if let Some(c) = coarse.filter(|&c| c >= coarse_limit) {
                return Err(Error::Data(format!(
                    "{origin}: record {i}: coarse label {c} outside 0..{coarse_limit}"
                )));
            }
            Ok(CifarRecord {
                coarse,
                label,
                pixels: rec[kind.label_bytes()..].to_vec(),
            })
        })
        .collect()
}

pub fn serialize_records(records: &[CifarRecord], kind: CifarKind) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * kind.record_len());
    for r in records {
        if kind == CifarKind::Cifar100 {
            out.push(r.coarse.unwrap_or(0));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

pub fn read_records(path: &Path, kind: CifarKind) -> Result<Vec<CifarRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, kind, &path.display().to_string())
}

/// Locates the batch files under `dir`, also looking one level down in the
/// directory names used by the official archives.
pub fn resolve_dir(dir: &Path, kind: CifarKind) -> Result<PathBuf> {
    let (train, _) = kind.files();
    let nested = match kind {
        CifarKind::Cifar10 => "cifar-10-batches-bin",
        CifarKind::Cifar100 => "cifar-100-binary",
    };
    for cand in [dir.to_path_buf(), dir.join(nested)] {
        if cand.join(train[0]).is_file() {
            return Ok(cand);
        }
    }
    Err(Error::Data(format!(
        "no {kind:?} batch files under {} (looked for {} and {nested}/{})",
        dir.display(),
        train[0],
        train[0]
    )))
}

/// Train and test records of a CIFAR directory.
pub fn load_split_records(dir: &Path, kind: CifarKind) -> Result<(Vec<CifarRecord>, Vec<CifarRecord>)> {
    let dir = resolve_dir(dir, kind)?;
    let (train_files, test_files) = kind.files();
    let read_all = |files: Vec<&str>| -> Result<Vec<CifarRecord>> {
        let mut all = Vec::new();
        for f in files {
            all.extend(read_records(&dir.join(f), kind)?);
        }
        Ok(all)
    };
    Ok((read_all(train_files)?, read_all(test_files)?))
}

/// Per-channel mean and standard deviation of pixels scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn from_records(records: &[CifarRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("normalization statistics need at least one record".into()));
        }
        let plane = SIDE * SIDE;
        let count = (records.len() * plane) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let sum: f64 = records
                .iter()
                .flat_map(|r| &r.pixels[c * plane..(c + 1) * plane])
                .map(|&p| f64::from(p) / 255.0)
                .sum();
            mean[c] = sum / count;
            let sq: f64 = records
                .iter()
                .flat_map(|r| &r.pixels[c * plane..(c + 1) * plane])
                .map(|&p| (f64::from(p) / 255.0 - mean[c]).powi(2))
                .sum();
            // a constant channel (up to rounding) keeps unit scale
            let sd = (sq / count).sqrt();
            std[c] = if sd > 1e-9 { sd } else { 1.0 };
        }
        Ok(ChannelStats { mean, std })
    }
}

/// Bilinear resize of one `h x w` plane with half-pixel centers and edge
/// clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let x = x.clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, h, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, w, out_w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Scales, resizes and normalizes records into a `[n, 3, side, side]` tensor.
pub fn to_images(records: &[CifarRecord], stats: &ChannelStats, side: usize, classes: usize) -> Result<LabeledImages> {
    if records.is_empty() {
        return Err(Error::Data("empty CIFAR split".into()));
    }
    let plane = SIDE * SIDE;
    let mut data = Vec::with_capacity(records.len() * 3 * side * side);
    for r in records {
        for c in 0..3 {
            let scaled: Vec<f64> = r.pixels[c * plane..(c + 1) * plane]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect();
            let resized = resize_bilinear(&scaled, SIDE, SIDE, side, side);
            data.extend(resized.into_iter().map(|v| (v - stats.mean[c]) / stats.std[c]));
        }
    }
    let images = Tensor::new(vec![records.len(), 3, side, side], data)?;
    let labels = records.iter().map(|r| usize::from(r.label)).collect();
    LabeledImages::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> CifarRecord {
        CifarRecord {
            coarse: None,
            label,
            pixels: (0..PIXELS).map(fill).collect(),
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(resize_bilinear(&src, 4, 4, 4, 4), src);
        let flat = vec![0.25; 32 * 32];
        assert!(resize_bilinear(&flat, 32, 32, 28, 28).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn resize_halving_averages_pairs() {
        // 4 -> 2 with half-pixel centers samples at 0.5 and 2.5
        let src = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(resize_bilinear(&src, 1, 4, 1, 2), vec![0.5, 2.5]);
    }

    #[test]
    fn label_out_of_range_names_record() {
        let mut bytes = serialize_records(&[record(3, |_| 0), record(3, |_| 0)], CifarKind::Cifar10);
        bytes[CifarKind::Cifar10.record_len()] = 10;
        let err = parse_records(&bytes, CifarKind::Cifar10, "t").unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = serialize_records(&[record(1, |i| i as u8)], CifarKind::Cifar10);
        let err = parse_records(&bytes[..100], CifarKind::Cifar10, "t")
            .unwrap_err()
            .to_string();
        assert!(err.contains("byte offset 0"), "{err}");
    }

    #[test]
    fn zero_pixels_normalize_to_a_constant_image() {
        let recs = vec![record(0, |_| 0)];
        let stats = ChannelStats {
            mean: [0.5, 0.4, 0.3],
            std: [0.25, 0.2, 0.1],
        };
        let imgs = to_images(&recs, &stats, 28, 10).unwrap();
        let d = imgs.images.data();
        let plane = 28 * 28;
        for c in 0..3 {
            let want = -stats.mean[c] / stats.std[c];
            assert!(d[c * plane..(c + 1) * plane].iter().all(|&v| v == want));
        }
    }

    #[test]
    fn constant_channel_keeps_unit_std() {
        let s = ChannelStats::from_records(&[record(0, |_| 51)]).unwrap();
        assert_eq!(s.std, [1.0; 3]);
        assert!((s.mean[0] - 0.2).abs() < 1e-12);
    }
}
