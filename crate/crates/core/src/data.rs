//! Dataset ingestion and preparation: MNIST in IDX format, row-sequencing of
//! images into RNN input sequences, noise corruption, and synthetic sequence
//! tasks for fast tests.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState, Vector};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Ground truth for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleLabel {
    Class(usize),
    Sequence(Vec<Vector>),
}

/// One input sequence with its target.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// u_1..u_T
    pub inputs: Vec<Vector>,
    pub label: SampleLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SequenceSample>,
    pub split: SplitTag,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.inputs.len())
    }

    pub fn input_dim(&self) -> usize {
        self.samples
            .first()
            .and_then(|s| s.inputs.first())
            .map_or(0, |u| u.dim())
    }

    /// New dataset holding the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            split: self.split,
            provenance: format!("{} (subset of {})", self.provenance, self.len()),
        }
    }

    /// Plain-text manifest of sample indices for reproducibility.
    pub fn write_index_manifest(indices: &[usize], path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in indices {
            writeln!(out, "{i}").unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxTruncated {
            path: path.into(),
            need: end,
            have: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX image/label pair into a dataset of row sequences.
///
/// Images carry magic 2051 with big-endian (count, rows, cols) headers,
/// labels magic 2049 with a big-endian count; counts must agree. Pixels are
/// scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();

    let img_magic = read_be_u32(&img_bytes, 0, &ipath)?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: ipath,
            expected: IDX_IMAGES_MAGIC,
            found: img_magic,
        });
    }
    let count = read_be_u32(&img_bytes, 4, &ipath)? as usize;
    let rows = read_be_u32(&img_bytes, 8, &ipath)? as usize;
    let cols = read_be_u32(&img_bytes, 12, &ipath)? as usize;
    let need = 16 + count * rows * cols;
    if img_bytes.len() < need {
        return Err(Error::IdxTruncated {
            path: ipath,
            need,
            have: img_bytes.len(),
        });
    }

    let lbl_magic = read_be_u32(&lbl_bytes, 0, &lpath)?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: lpath,
            expected: IDX_LABELS_MAGIC,
            found: lbl_magic,
        });
    }
    let lbl_count = read_be_u32(&lbl_bytes, 4, &lpath)? as usize;
    if lbl_count != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: lbl_count,
        });
    }
    let lbl_need = 8 + count;
    if lbl_bytes.len() < lbl_need {
        return Err(Error::IdxTruncated {
            path: lpath,
            need: lbl_need,
            have: lbl_bytes.len(),
        });
    }

    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let base = 16 + k * rows * cols;
        let inputs: Vec<Vector> = (0..rows)
            .map(|r| {
                Vector::from(
                    img_bytes[base + r * cols..base + (r + 1) * cols]
                        .iter()
                        .map(|&b| b as f64 / 255.0)
                        .collect(),
                )
            })
            .collect();
        samples.push(SequenceSample {
            inputs,
            label: SampleLabel::Class(lbl_bytes[8 + k] as usize),
        });
    }
    Ok(Dataset {
        samples,
        split: SplitTag::Train,
        provenance: format!("idx:{}", images_path.display()),
    })
}

/// Serialize a dataset of row sequences back to an IDX image/label byte pair.
/// Inverse of `load_idx` up to the 1/255 pixel scaling.
pub fn save_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("save_idx".into()));
    }
    let rows = dataset.seq_len();
    let cols = dataset.input_dim();
    let count = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&count.to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lbl = Vec::with_capacity(8 + dataset.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&count.to_be_bytes());
    for s in &dataset.samples {
        for u in &s.inputs {
            for &v in u.as_slice() {
                img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        match &s.label {
            SampleLabel::Class(c) => lbl.push(*c as u8),
            SampleLabel::Sequence(_) => {
                return Err(Error::DimMismatch("save_idx requires class labels".into()))
            }
        }
    }
    Ok((img, lbl))
}

/// Split an image into its rows, top row first: row r becomes input u_r.
pub fn sequence_rows(image: &Matrix) -> Vec<Vector> {
    (0..image.rows())
        .map(|r| Vector::from(image.row(r).to_vec()))
        .collect()
}

/// Inverse of `sequence_rows`.
pub fn stack_rows(rows: &[Vector]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>())
}

/// Two well-separated Gaussian sequence classes: class k has per-step mean
/// ±separation·μ₀ along a fixed unit direction, unit covariance.
pub fn synth_two_class(
    n_per_class: usize,
    seq_len: usize,
    input_dim: usize,
    separation: f64,
    rng: &mut RngState,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::EmptyDataset("synth_two_class: n_per_class = 0".into()));
    }
    assert!(separation > 0.0, "separation must be positive");
    let dir = 1.0 / (input_dim as f64).sqrt();
    let mut samples = Vec::with_capacity(2 * n_per_class);
    for k in 0..2 {
        let sign = if k == 0 { 1.0 } else { -1.0 };
        for _ in 0..n_per_class {
            let inputs: Vec<Vector> = (0..seq_len)
                .map(|_| {
                    Vector::from(
                        (0..input_dim)
                            .map(|_| sign * separation * dir + rng.standard_normal())
                            .collect(),
                    )
                })
                .collect();
            samples.push(SequenceSample {
                inputs,
                label: SampleLabel::Class(k),
            });
        }
    }
    rng.shuffle(&mut samples);
    Ok(Dataset {
        samples,
        split: SplitTag::Train,
        provenance: format!("synth_two_class(sep={separation})"),
    })
}

/// Add an independent N(0, ωI) draw to every input vector. The label is
/// untouched and the result is not re-clipped to [0, 1]: the noisy system
/// adds unbounded Gaussian noise to the network input.
pub fn corrupt(sample: &SequenceSample, omega: f64, rng: &mut RngState) -> SequenceSample {
    assert!(omega >= 0.0, "omega must be nonnegative");
    if omega == 0.0 {
        return sample.clone();
    }
    let std = omega.sqrt();
    let inputs = sample
        .inputs
        .iter()
        .map(|u| {
            Vector::from(
                u.as_slice()
                    .iter()
                    .map(|&v| v + std * rng.standard_normal())
                    .collect(),
            )
        })
        .collect();
    SequenceSample {
        inputs,
        label: sample.label.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx_pair() -> (Vec<u8>, Vec<u8>) {
        // Two 2x3 images.
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&[0, 255, 10, 20, 30, 40, 1, 2, 3, 4, 5, 6]);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        (img, lbl)
    }

    fn write_pair(img: &[u8], lbl: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let dir = std::env::temp_dir().join(format!("rnn_robust_idx_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn load_idx_parses_headers_and_scales() {
        let (img, lbl) = tiny_idx_pair();
        let (ip, lp) = write_pair(&img, &lbl);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.seq_len(), 2);
        assert_eq!(ds.input_dim(), 3);
        assert_eq!(ds.samples[0].label, SampleLabel::Class(7));
        assert_eq!(ds.samples[0].inputs[0].as_slice()[1], 1.0);
        assert!((ds.samples[0].inputs[0].as_slice()[2] - 10.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn load_idx_rejects_bad_magic() {
        let (mut img, lbl) = tiny_idx_pair();
        img[3] = 0x99;
        let (ip, lp) = write_pair(&img, &lbl);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::IdxMagic { .. })));
    }

    #[test]
    fn load_idx_rejects_count_mismatch() {
        let (img, mut lbl) = tiny_idx_pair();
        lbl[7] = 3; // claim 3 labels
        lbl.push(9);
        let (ip, lp) = write_pair(&img, &lbl);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::IdxCountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn load_idx_rejects_truncated() {
        let (img, lbl) = tiny_idx_pair();
        let (ip, lp) = write_pair(&img[..img.len() - 3], &lbl);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::IdxTruncated { .. })));
    }

    #[test]
    fn idx_roundtrip_is_lossless() {
        let (img, lbl) = tiny_idx_pair();
        let (ip, lp) = write_pair(&img, &lbl);
        let ds = load_idx(&ip, &lp).unwrap();
        let (img2, lbl2) = save_idx(&ds).unwrap();
        assert_eq!(img, img2);
        assert_eq!(lbl, lbl2);
    }

    #[test]
    fn sequence_rows_indexing() {
        let mut image = Matrix::zeros(28, 28);
        image.set(2, 4, 0.7); // row 3, col 5 in 1-based terms
        let seq = sequence_rows(&image);
        assert_eq!(seq.len(), 28);
        assert_eq!(seq[2].as_slice()[4], 0.7);
        assert_eq!(seq.iter().flat_map(|v| v.as_slice()).filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(stack_rows(&seq), image);
    }

    #[test]
    fn synth_two_class_deterministic_and_balanced() {
        let mut rng1 = RngState::new(3);
        let mut rng2 = RngState::new(3);
        let a = synth_two_class(5, 4, 3, 10.0, &mut rng1).unwrap();
        let b = synth_two_class(5, 4, 3, 10.0, &mut rng2).unwrap();
        assert_eq!(a.samples, b.samples);
        let zeros = a
            .samples
            .iter()
            .filter(|s| s.label == SampleLabel::Class(0))
            .count();
        assert_eq!(zeros, 5);
        assert!(synth_two_class(0, 4, 3, 1.0, &mut rng1).is_err());
    }

    #[test]
    fn corrupt_identity_at_zero() {
        let mut rng = RngState::new(8);
        let ds = synth_two_class(1, 3, 2, 1.0, &mut rng).unwrap();
        let s = &ds.samples[0];
        assert_eq!(corrupt(s, 0.0, &mut rng), *s);
    }

    #[test]
    fn corrupt_variance_and_label() {
        let sample = SequenceSample {
            inputs: vec![Vector::zeros(4); 2],
            label: SampleLabel::Class(9),
        };
        let omega = 2.0;
        let mut rng = RngState::new(123);
        let n = 10_000;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let c = corrupt(&sample, omega, &mut rng);
            assert_eq!(c.label, SampleLabel::Class(9));
            for u in &c.inputs {
                for &v in u.as_slice() {
                    sumsq += v * v;
                }
            }
        }
        let var = sumsq / (n as f64 * 8.0);
        assert!((var - omega).abs() < 0.05 * omega, "var {var}");
    }
}
