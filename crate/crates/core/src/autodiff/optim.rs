use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// A trainable tensor together with its most recent gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { value, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Stores `grad`, adding to any gradient already present.
    pub fn accumulate_grad(&mut self, grad: Tensor) -> Result<(), AutodiffError> {
        if grad.shape() != self.value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "accumulate_grad",
                left: self.value.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        match &mut self.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(a, b)| *a += b),
            None => self.grad = Some(grad),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moments with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self, AutodiffError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(AutodiffError::InvalidInput(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            first: Vec::new(),
            second: Vec::new(),
            shapes: Vec::new(),
            step: 0,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self, AutodiffError> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self, AutodiffError> {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` and clears their gradients.
    ///
    /// The parameter list must be presented in the same order, with the same
    /// shapes, on every call.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), AutodiffError> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(AutodiffError::Usage(format!("parameter {i} has no gradient")));
        }
        if self.shapes.is_empty() {
            self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        } else if self.shapes.len() != params.len()
            || self.shapes.iter().zip(params.iter()).any(|(s, p)| s != p.shape())
        {
            return Err(AutodiffError::Usage(
                "parameter list changed between optimizer steps".into(),
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in value.iter_mut().zip(grad.data()) {
                        *v -= self.lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let (m, s) = (&mut self.first[i], &mut self.second[i]);
                    for (((v, &g), mi), si) in
                        value.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(s.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *si = beta2 * *si + (1.0 - beta2) * g * g;
                        let m_hat = *mi / bc1;
                        let s_hat = *si / bc2;
                        *v -= self.lr * m_hat / (s_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Param {
        Param {
            value: Tensor::scalar(v),
            grad: Some(Tensor::scalar(g)),
        }
    }

    #[test]
    fn sgd_hand_step() {
        let mut p = scalar_param(1.0, 2.0);
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_close!(p.value.item(), 0.8, 1e-15);
        assert!(p.grad.is_none());
    }

    #[test]
    fn zero_grad_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut p = scalar_param(1.5, 0.0);
            let mut opt = OptimizerState::new(kind, 0.01).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.value.item(), 1.5);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.01, 250.0] {
            let mut p = scalar_param(0.0, g);
            let mut opt = OptimizerState::adam(0.05).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
            assert_close!(p.value.item(), -0.05 * g.signum(), 1e-6);
        }
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut p = Param::new(Tensor::scalar(1.0));
        let mut opt = OptimizerState::adam(0.1).unwrap();
        assert!(matches!(opt.step(&mut [&mut p]), Err(AutodiffError::Usage(_))));
    }

    #[test]
    fn step_counter_increments() {
        let mut p = scalar_param(1.0, 1.0);
        let mut opt = OptimizerState::adam(0.1).unwrap();
        for k in 1..=3 {
            p.grad = Some(Tensor::scalar(1.0));
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(opt.steps_taken(), k);
        }
    }
}
