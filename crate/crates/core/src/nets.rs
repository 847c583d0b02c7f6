//! Network definitions: plain MLPs, the multi-head environment-inference
//! network (shared encoder Ψ plus one head per environment) and the invariant
//! predictor Φ with its frozen scalar multiplier.

use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Param, Tape, Tensor, Var};
use crate::rng::{self, stream};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected} input features, got {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Multiplier on the fan-in uniform bound used at initialisation.
    #[serde(default = "default_scale")]
    pub init_scale: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Relu,
            init_scale: 1.0,
        }
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    /// Σ (fan_in + 1)·fan_out over layers.
    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(NetError::InvalidSpec(format!("all dimensions must be positive: {self:?}")));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(NetError::InvalidSpec("init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `fan_in × fan_out`
    pub weight: Param,
    /// `1 × fan_out`
    pub bias: Param,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

/// Tape handles for an [`Mlp`]'s parameters, in layer order (weight, bias).
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<Var>,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Fan-in scaled uniform initialisation: weights in ±scale·√(6/fan_in),
/// biases zero.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<Mlp, NetError> {
    init_params_with(spec, &mut rng::seeded(seed, stream::INIT_PHI))
}

pub(crate) fn init_params_with(spec: &MlpSpec, rng: &mut rng::Rng) -> Result<Mlp, NetError> {
    spec.validate()?;
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = spec.init_scale * (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
                .collect();
            Ok(Linear {
                weight: Param::new(Tensor::matrix(fan_in, fan_out, data)?),
                bias: Param::new(Tensor::zeros(&[1, fan_out])),
            })
        })
        .collect::<Result<_, NetError>>()?;
    Ok(Mlp {
        spec: spec.clone(),
        layers,
    })
}

impl Mlp {
    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Registers the parameters as tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            vars: self.params().into_iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Registers the parameters as constants; no gradient reaches them.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            vars: self.params().into_iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Affine → ReLU chain; the last layer stays affine.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var, NetError> {
        let cols = tape.value(x).cols();
        if !tape.value(x).is_matrix() || cols != self.spec.input_dim {
            return Err(NetError::Dim {
                expected: self.spec.input_dim,
                actual: cols,
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in bound.vars.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_row_broadcast(h, pair[1])?;
            if i < last {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn store_grads(&mut self, bound: &BoundMlp, grads: &Gradients) -> Result<(), NetError> {
        for (p, &v) in self.params_mut().into_iter().zip(&bound.vars) {
            p.accumulate_grad(grads.wrt(v))?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }

    const MAGIC: &'static [u8; 8] = b"EDNILMLP";

    /// Flat little-endian checkpoint: magic, layer count, then per layer
    /// `(fan_in, fan_out)` as u64 followed by the weights (row-major) and
    /// biases as f64.
    pub fn write_binary(&self, mut w: impl Write) -> Result<(), NetError> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.layers.len() as u64).to_le_bytes())?;
        for layer in &self.layers {
            let (fi, fo) = layer.weight.value.dims2();
            w.write_all(&(fi as u64).to_le_bytes())?;
            w.write_all(&(fo as u64).to_le_bytes())?;
            for v in layer.weight.value.data().iter().chain(layer.bias.value.data()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Mlp, NetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(NetError::Format("bad magic".into()));
        }
        let read_u64 = |r: &mut dyn Read| -> Result<u64, NetError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let n_layers = read_u64(&mut r)? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(NetError::Format(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let fi = read_u64(&mut r)? as usize;
            let fo = read_u64(&mut r)? as usize;
            if let Some(&(_, prev_out)) = dims.last() {
                if prev_out != fi {
                    return Err(NetError::Format("layer dimensions do not chain".into()));
                }
            }
            let mut vals = vec![0.0; fi * fo + fo];
            for v in vals.iter_mut() {
                *v = f64::from_bits(read_u64(&mut r)?);
            }
            let bias = vals.split_off(fi * fo);
            layers.push(Linear {
                weight: Param::new(Tensor::matrix(fi, fo, vals)?),
                bias: Param::new(Tensor::matrix(1, fo, bias)?),
            });
            dims.push((fi, fo));
        }
        let spec = MlpSpec::new(
            dims[0].0,
            dims[..dims.len() - 1].iter().map(|d| d.1).collect(),
            dims[dims.len() - 1].1,
        );
        Ok(Mlp { spec, layers })
    }
}

/// Shape of the environment-inference network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EiArch {
    /// Hidden widths of Ψ; its representation is the last width.
    pub psi_hidden: Vec<usize>,
    /// Hidden widths of each head; empty means one affine layer.
    #[serde(default)]
    pub head_hidden: Vec<usize>,
    /// Initial weight scale of the heads relative to fan-in uniform.
    #[serde(default = "unit_scale")]
    pub head_init_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

/// Multi-head environment-inference network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EIModel {
    /// Shared encoder; its output is passed through a ReLU.
    pub psi: Mlp,
    pub heads: Vec<Mlp>,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct BoundEi {
    pub psi: BoundMlp,
    pub heads: Vec<BoundMlp>,
}

impl EIModel {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        arch: &EiArch,
        k: usize,
        tau: f64,
        seed: u64,
    ) -> Result<Self, NetError> {
        if k < 2 {
            return Err(NetError::InvalidSpec(format!("need at least 2 environments, got {k}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(NetError::InvalidSpec(format!("temperature must be positive, got {tau}")));
        }
        let Some((&rep, inner)) = arch.psi_hidden.split_last() else {
            return Err(NetError::InvalidSpec("psi needs at least one hidden width".into()));
        };
        let psi_spec = MlpSpec::new(input_dim, inner.to_vec(), rep);
        let psi = init_params_with(&psi_spec, &mut rng::seeded(seed, stream::INIT_PSI))?;
        let mut head_spec = MlpSpec::new(rep, arch.head_hidden.clone(), output_dim);
        head_spec.init_scale = arch.head_init_scale;
        let mut head_rng = rng::seeded(seed, stream::INIT_HEADS);
        let heads = (0..k)
            .map(|_| init_params_with(&head_spec, &mut head_rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { psi, heads, tau })
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.psi.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.heads[0].output_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundEi {
        BoundEi {
            psi: self.psi.bind(tape),
            heads: self.heads.iter().map(|h| h.bind(tape)).collect(),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundEi {
        BoundEi {
            psi: self.psi.bind_frozen(tape),
            heads: self.heads.iter().map(|h| h.bind_frozen(tape)).collect(),
        }
    }

    /// Ψ(x), the shared representation.
    pub fn encode(&self, tape: &mut Tape, psi: &BoundMlp, x: Var) -> Result<Var, NetError> {
        let h = self.psi.forward(tape, psi, x)?;
        Ok(tape.relu(h))
    }

    /// `[f¹(Ψ(x)), …, f^K(Ψ(x))]` with Ψ evaluated once.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundEi, x: Var) -> Result<Vec<Var>, NetError> {
        let rep = self.encode(tape, &bound.psi, x)?;
        self.heads
            .iter()
            .zip(&bound.heads)
            .map(|(h, b)| h.forward(tape, b, rep))
            .collect()
    }

    pub fn store_grads(&mut self, bound: &BoundEi, grads: &Gradients) -> Result<(), NetError> {
        self.psi.store_grads(&bound.psi, grads)?;
        for (h, b) in self.heads.iter_mut().zip(&bound.heads) {
            h.store_grads(b, grads)?;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.psi.params_mut();
        for h in &mut self.heads {
            out.extend(h.params_mut());
        }
        out
    }
}

/// Invariant predictor `w ∘ Φ` with `w` frozen at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ILModel {
    pub phi: Mlp,
    #[serde(skip, default = "unit_multiplier")]
    w: f64,
}

fn unit_multiplier() -> f64 {
    1.0
}

#[derive(Clone, Debug)]
pub struct BoundIl {
    pub phi: BoundMlp,
    /// The dummy multiplier as a tracked scalar leaf.
    pub w: Var,
}

impl ILModel {
    pub fn new(spec: &MlpSpec, seed: u64) -> Result<Self, NetError> {
        Ok(Self::from_phi(init_params(spec, seed)?))
    }

    pub fn from_phi(phi: Mlp) -> Self {
        Self { phi, w: 1.0 }
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundIl {
        BoundIl {
            phi: self.phi.bind(tape),
            w: tape.leaf(Tensor::scalar(self.w)),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundIl {
        BoundIl {
            phi: self.phi.bind_frozen(tape),
            w: tape.constant(Tensor::scalar(self.w)),
        }
    }

    /// `w · Φ(x)`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundIl, x: Var) -> Result<Var, NetError> {
        let out = self.phi.forward(tape, &bound.phi, x)?;
        Ok(tape.scale_by(bound.w, out)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut out = self.phi.predict(x)?;
        out.data_mut().iter_mut().for_each(|v| *v *= self.w);
        Ok(out)
    }

    /// Stores Φ's gradients; the multiplier's gradient is discarded.
    pub fn store_grads(&mut self, bound: &BoundIl, grads: &Gradients) -> Result<(), NetError> {
        self.phi.store_grads(&bound.phi, grads)
    }
}
