//! Self-describing dataset files: magic, JSON header length (u64 LE), JSON
//! header, then little-endian f64 columns (features row-major, targets,
//! oracle columns).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{DataError, LabeledDataset, Oracle, Provenance};
use crate::autodiff::Tensor;
use crate::loss::Targets;

const MAGIC: &[u8; 8] = b"EDNILDS1";

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TargetHeader {
    Classes { n_classes: usize },
    Real,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OracleHeader {
    None,
    /// columns: shape, color
    Color,
    /// columns: black, male
    Subgroup,
    /// columns: x_c (d_c), x_v (d_v), r, env, signal
    Sem { d_c: usize, d_v: usize, n_envs: usize },
}

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    params: serde_json::Value,
    seed: u64,
    n: usize,
    d: usize,
    target: TargetHeader,
    oracle: OracleHeader,
}

pub fn write_dataset(ds: &LabeledDataset, mut w: impl Write) -> Result<(), DataError> {
    let (target, target_col): (TargetHeader, Vec<f64>) = match &ds.targets {
        Targets::Classes { labels, n_classes } => (
            TargetHeader::Classes { n_classes: *n_classes },
            labels.iter().map(|&y| y as f64).collect(),
        ),
        Targets::Real(t) => (TargetHeader::Real, t.data().to_vec()),
    };
    let as_f = |v: &[usize]| v.iter().map(|&u| u as f64).collect::<Vec<_>>();
    let as_b = |v: &[bool]| v.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>();
    let (oracle, cols): (OracleHeader, Vec<f64>) = match &ds.oracle {
        None => (OracleHeader::None, vec![]),
        Some(Oracle::Color { shape, color }) => (OracleHeader::Color, [as_f(shape), as_f(color)].concat()),
        Some(Oracle::Subgroup { black, male }) => (OracleHeader::Subgroup, [as_b(black), as_b(male)].concat()),
        Some(Oracle::Sem {
            x_c,
            x_v,
            r,
            env,
            n_envs,
            signal,
        }) => (
            OracleHeader::Sem {
                d_c: x_c.cols(),
                d_v: x_v.cols(),
                n_envs: *n_envs,
            },
            [x_c.data().to_vec(), x_v.data().to_vec(), r.clone(), as_f(env), signal.clone()].concat(),
        ),
    };
    let header = Header {
        name: ds.provenance.generator.clone(),
        params: ds.provenance.params.clone(),
        seed: ds.provenance.seed,
        n: ds.n(),
        d: ds.d(),
        target,
        oracle,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in ds.x.data().iter().chain(&target_col).chain(&cols) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, DataError> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| DataError::Format {
            offset: self.offset,
            message: format!("truncated: wanted {n} more bytes"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub fn read_dataset(r: impl Read) -> Result<LabeledDataset, DataError> {
    let mut cur = Cursor { inner: r, offset: 0 };
    if cur.bytes(8)? != MAGIC {
        return Err(DataError::Format {
            offset: 0,
            message: "not a dataset container".into(),
        });
    }
    let len = u64::from_le_bytes(cur.bytes(8)?.try_into().expect("8 bytes")) as usize;
    if len > 1 << 24 {
        return Err(DataError::Format {
            offset: 8,
            message: format!("implausible header length {len}"),
        });
    }
    let header_at = cur.offset;
    let header: Header = serde_json::from_slice(&cur.bytes(len)?).map_err(|e| DataError::Format {
        offset: header_at,
        message: format!("bad header: {e}"),
    })?;
    let (n, d) = (header.n, header.d);
    let tensor = |rows, cols, v| Tensor::matrix(rows, cols, v).map_err(|e| DataError::Input(e.to_string()));
    let x = tensor(n, d, cur.f64s(n * d)?)?;
    let ycol = cur.f64s(n)?;
    let targets = match header.target {
        TargetHeader::Classes { n_classes } => Targets::classes(ycol.iter().map(|&v| v as usize).collect(), n_classes),
        TargetHeader::Real => Targets::real(ycol),
    };
    let us = |v: Vec<f64>| v.into_iter().map(|x| x as usize).collect::<Vec<_>>();
    let bs = |v: Vec<f64>| v.into_iter().map(|x| x != 0.0).collect::<Vec<_>>();
    let oracle = match header.oracle {
        OracleHeader::None => None,
        OracleHeader::Color => Some(Oracle::Color {
            shape: us(cur.f64s(n)?),
            color: us(cur.f64s(n)?),
        }),
        OracleHeader::Subgroup => Some(Oracle::Subgroup {
            black: bs(cur.f64s(n)?),
            male: bs(cur.f64s(n)?),
        }),
        OracleHeader::Sem { d_c, d_v, n_envs } => Some(Oracle::Sem {
            x_c: tensor(n, d_c, cur.f64s(n * d_c)?)?,
            x_v: tensor(n, d_v, cur.f64s(n * d_v)?)?,
            r: cur.f64s(n)?,
            env: us(cur.f64s(n)?),
            n_envs,
            signal: cur.f64s(n)?,
        }),
    };
    let provenance = Provenance {
        generator: header.name,
        params: header.params,
        seed: header.seed,
    };
    LabeledDataset::new(x, targets, oracle, provenance)
}

/// Flat CSV: `x0..x{d-1}, y`, then oracle columns when present.
pub fn write_csv(ds: &LabeledDataset, w: impl Write) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..ds.d()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    match &ds.oracle {
        Some(Oracle::Color { .. }) => header.extend(["shape".into(), "color".into()]),
        Some(Oracle::Subgroup { .. }) => header.extend(["black".into(), "male".into()]),
        Some(Oracle::Sem { .. }) => header.extend(["r".into(), "env".into(), "signal".into()]),
        None => {}
    }
    out.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(f64::to_string).collect();
        rec.push(match &ds.targets {
            Targets::Classes { labels, .. } => labels[i].to_string(),
            Targets::Real(t) => t.data()[i].to_string(),
        });
        match &ds.oracle {
            Some(Oracle::Color { shape, color }) => rec.extend([shape[i].to_string(), color[i].to_string()]),
            Some(Oracle::Subgroup { black, male }) => {
                rec.extend([u8::from(black[i]).to_string(), u8::from(male[i]).to_string()])
            }
            Some(Oracle::Sem { r, env, signal, .. }) => {
                rec.extend([r[i].to_string(), env[i].to_string(), signal[i].to_string()])
            }
            None => {}
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
