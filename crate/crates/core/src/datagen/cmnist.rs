//! Coloured digits: MNIST IDX parsing, the 2-channel coloured construction
//! and a fast synthetic surrogate with the same causal chain
//! shape → Ỹ → Y → C.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{block_of, check_probability, DataError, LabeledDataset, Oracle, Provenance};
use crate::autodiff::Tensor;
use crate::loss::Targets;
use crate::rng::{self, stream};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw digits: `n` images of `rows × cols` pixels scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct MnistRaw {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

impl MnistRaw {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> MnistRaw {
        let sz = self.rows * self.cols;
        MnistRaw {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[range.start * sz..range.end * sz].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

fn expect_magic(bytes: &[u8], magic: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(DataError::Format {
            offset: 0,
            message: format!("magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

fn expect_len(bytes: &[u8], needed: usize) -> Result<(), DataError> {
    if bytes.len() < needed {
        return Err(DataError::Format {
            offset: bytes.len() as u64,
            message: format!("file truncated: need {needed} bytes, have {}", bytes.len()),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>), DataError> {
    expect_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    expect_len(bytes, 16 + n * rows * cols)?;
    let pixels = bytes[16..16 + n * rows * cols].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    expect_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    expect_len(bytes, 8 + n)?;
    let labels = bytes[8..8 + n].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(DataError::Format {
            offset: (8 + pos) as u64,
            message: format!("label {} outside 0..=9", labels[pos]),
        });
    }
    Ok(labels)
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<MnistRaw, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != n {
        return Err(DataError::Input(format!("{n} images but {} labels", labels.len())));
    }
    Ok(MnistRaw {
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Label and colour draws shared by both coloured constructions, in a fixed
/// order: shape labels are given, then all label flips, then all colour
/// flips (block `b` of `color_noise.len()` equal blocks uses noise `e_b`).
fn draw_labels_and_colors(
    shape: &[usize],
    label_noise: f64,
    color_noise: &[f64],
    rng: &mut rng::Rng,
) -> (Vec<usize>, Vec<usize>) {
    let n = shape.len();
    let y: Vec<usize> = shape
        .iter()
        .map(|&s| if rng.random::<f64>() < label_noise { 1 - s } else { s })
        .collect();
    let c = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            let e = color_noise[block_of(i, n, color_noise.len())];
            if rng.random::<f64>() < e {
                1 - yi
            } else {
                yi
            }
        })
        .collect();
    (y, c)
}

fn check_noise(label_noise: f64, color_noise: &[f64]) -> Result<(), DataError> {
    check_probability("label noise", label_noise)?;
    if color_noise.is_empty() {
        return Err(DataError::Config("need at least one colour-noise value".into()));
    }
    color_noise.iter().try_for_each(|&e| check_probability("colour noise", e))
}

/// Coloured digits: `Ỹ = 1{digit < 5}`, `Y` = `Ỹ` flipped with
/// `label_noise`, `C` = `Y` flipped with the block's colour noise. Images are
/// 2×2 mean-pooled and written into channel `C` of a 2-channel image
/// (channel-major), the other channel left at zero.
pub fn make_cmnist(raw: &MnistRaw, label_noise: f64, color_noise: &[f64], seed: u64) -> Result<LabeledDataset, DataError> {
    check_noise(label_noise, color_noise)?;
    let n = raw.len();
    let shape: Vec<usize> = raw.labels.iter().map(|&d| usize::from(d < 5)).collect();
    let mut rng = rng::seeded(seed, stream::DATA);
    let (y, c) = draw_labels_and_colors(&shape, label_noise, color_noise, &mut rng);
    let (ph, pw) = (raw.rows / 2, raw.cols / 2);
    let plane = ph * pw;
    let d = 2 * plane;
    let mut x = vec![0.0; n * d];
    for i in 0..n {
        let img = raw.image(i);
        let base = i * d + c[i] * plane;
        for r in 0..ph {
            for q in 0..pw {
                let at = |dr: usize, dq: usize| img[(2 * r + dr) * raw.cols + 2 * q + dq];
                x[base + r * pw + q] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    let provenance = Provenance {
        generator: "cmnist".into(),
        params: serde_json::json!({ "label_noise": label_noise, "color_noise": color_noise, "n": n }),
        seed,
    };
    LabeledDataset::new(
        Tensor::matrix(n, d, x).map_err(|e| DataError::Input(e.to_string()))?,
        Targets::classes(y, 2),
        Some(Oracle::Color { shape, color: c }),
        provenance,
    )
}

/// Parameters of the synthetic coloured surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmnistBits {
    pub n: usize,
    pub label_noise: f64,
    /// One value per equal block of rows.
    pub color_noise: Vec<f64>,
    pub dim_c: usize,
    pub dim_v: usize,
    pub noise_sd: f64,
    /// Magnitude of the shape means.
    pub shape_mean: f64,
    /// Magnitude of the colour means.
    pub color_mean: f64,
}

impl Default for CmnistBits {
    fn default() -> Self {
        Self {
            n: 10_000,
            label_noise: 0.2,
            color_noise: vec![0.1, 0.2],
            dim_c: 4,
            dim_v: 4,
            noise_sd: 1.0,
            shape_mean: 0.75,
            color_mean: 3.0,
        }
    }
}

/// Synthetic coloured data: `X_c = ±shape_mean + noise` driven by Ỹ,
/// `X_v = ±1 + noise` driven by C, `X = [X_c, X_v]`.
///
/// The default colour signal is far stronger than the shape signal, so
/// colour is the easier feature to pick up, as with real digits.
pub fn make_cmnist_bits(p: &CmnistBits, seed: u64) -> Result<LabeledDataset, DataError> {
    check_noise(p.label_noise, &p.color_noise)?;
    if p.dim_c == 0 || p.dim_v == 0 {
        return Err(DataError::Config("dim_c and dim_v must be at least 1".into()));
    }
    if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite()) {
        return Err(DataError::Config(format!("noise_sd = {} must be >= 0", p.noise_sd)));
    }
    for (name, m) in [("shape_mean", p.shape_mean), ("color_mean", p.color_mean)] {
        if !(m > 0.0 && m.is_finite()) {
            return Err(DataError::Config(format!("{name} = {m} must be positive")));
        }
    }
    let mut rng = rng::seeded(seed, stream::DATA);
    let shape: Vec<usize> = (0..p.n).map(|_| usize::from(rng.random::<f64>() < 0.5)).collect();
    let (y, c) = draw_labels_and_colors(&shape, p.label_noise, &p.color_noise, &mut rng);
    let normal = Normal::new(0.0, p.noise_sd).map_err(|e| DataError::Config(e.to_string()))?;
    let d = p.dim_c + p.dim_v;
    let mut x = Vec::with_capacity(p.n * d);
    for i in 0..p.n {
        let mc = p.shape_mean * (2.0 * shape[i] as f64 - 1.0);
        let mv = p.color_mean * (2.0 * c[i] as f64 - 1.0);
        x.extend((0..p.dim_c).map(|_| mc + normal.sample(&mut rng)));
        x.extend((0..p.dim_v).map(|_| mv + normal.sample(&mut rng)));
    }
    let provenance = Provenance {
        generator: "cmnist-bits".into(),
        params: serde_json::to_value(p)?,
        seed,
    };
    LabeledDataset::new(
        Tensor::matrix(p.n, d, x).map_err(|e| DataError::Input(e.to_string()))?,
        Targets::classes(y, 2),
        Some(Oracle::Color { shape, color: c }),
        provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let (n, r, c, px) = parse_idx_images(&idx_images(3, 4, 4, 255)).unwrap();
        assert_eq!((n, r, c, px.len()), (3, 4, 4, 48));
        assert!(px.iter().all(|&v| v == 1.0));
        assert_eq!(parse_idx_labels(&idx_labels(&[0, 9, 4])).unwrap(), vec![0, 9, 4]);

        let mut bad = idx_images(1, 2, 2, 0);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(DataError::Format { offset: 0, .. })));
        let mut short = idx_images(2, 2, 2, 0);
        short.truncate(18);
        assert!(matches!(parse_idx_images(&short), Err(DataError::Format { offset: 18, .. })));
        assert!(matches!(
            parse_idx_labels(&idx_labels(&[1, 12])),
            Err(DataError::Format { offset: 9, .. })
        ));
    }

    fn raw(n: usize) -> MnistRaw {
        MnistRaw {
            rows: 4,
            cols: 4,
            pixels: (0..n * 16).map(|i| (i % 16) as f64 / 16.0).collect(),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
        }
    }

    #[test]
    fn cmnist_zero_color_noise_matches_labels() {
        let ds = make_cmnist(&raw(200), 0.2, &[0.0], 1).unwrap();
        let Some(Oracle::Color { color, .. }) = &ds.oracle else { panic!() };
        assert_eq!(color.as_slice(), ds.targets.labels().unwrap());
        assert_eq!(ds.d(), 8);
    }

    #[test]
    fn cmnist_pools_into_color_channel() {
        let ds = make_cmnist(&raw(5), 0.0, &[0.0], 1).unwrap();
        let Some(Oracle::Color { color, shape }) = &ds.oracle else { panic!() };
        for i in 0..5 {
            assert_eq!(shape[i], usize::from(i % 10 < 5));
            let row = ds.x.row(i);
            let (on, off) = if color[i] == 1 { (&row[4..], &row[..4]) } else { (&row[..4], &row[4..]) };
            assert!(off.iter().all(|&v| v == 0.0));
            // top-left 2×2 block of pixels 0,1,4,5 (/16)
            assert!((on[0] - 2.5 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bits_zero_noise_ceilings() {
        let p = CmnistBits {
            noise_sd: 0.0,
            color_noise: vec![0.9],
            ..CmnistBits::default()
        };
        let ds = make_cmnist_bits(&p, 4).unwrap();
        let y = ds.targets.labels().unwrap();
        let acc_c = (0..ds.n()).filter(|&i| usize::from(ds.x.get(i, 0) > 0.0) == y[i]).count() as f64 / ds.n() as f64;
        let acc_v = (0..ds.n()).filter(|&i| usize::from(ds.x.get(i, p.dim_c) > 0.0) == y[i]).count() as f64 / ds.n() as f64;
        assert!((acc_c - 0.8).abs() <= 0.01, "{acc_c}");
        assert!((acc_v - 0.1).abs() <= 0.01, "{acc_v}");
    }

    #[test]
    fn bits_deterministic() {
        let p = CmnistBits {
            n: 500,
            ..CmnistBits::default()
        };
        assert_eq!(make_cmnist_bits(&p, 9).unwrap(), make_cmnist_bits(&p, 9).unwrap());
        assert_ne!(make_cmnist_bits(&p, 9).unwrap().x, make_cmnist_bits(&p, 10).unwrap().x);
    }

    #[test]
    fn rejects_invalid_noise() {
        let p = CmnistBits {
            color_noise: vec![1.5],
            ..CmnistBits::default()
        };
        assert!(make_cmnist_bits(&p, 0).is_err());
    }
}
