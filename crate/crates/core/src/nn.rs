//! Small building blocks shared by the models: parameter initialization,
//! affine layers and named-parameter bookkeeping.

use std::collections::BTreeMap;

use crate::error::{PalError, Result};
use crate::rng::{truncated_normal, Rng};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

pub fn init_weight<F: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(truncated_normal(rng, INIT_STD))).collect();
    Tensor::param(data, shape).expect("shape matches data")
}

pub fn init_zeros<F: Real>(shape: &[usize]) -> Tensor<F> {
    let t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}

pub fn init_ones<F: Real>(shape: &[usize]) -> Tensor<F> {
    let t = Tensor::full(shape, F::one());
    t.set_requires_grad(true);
    t
}

/// Anything owning learnable tensors under canonical dotted names.
pub trait Module<F: Real> {
    fn named_parameters(&self) -> Vec<(String, Tensor<F>)>;

    fn parameters(&self) -> Vec<Tensor<F>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    fn trainable_parameter_count(&self) -> usize {
        self.parameters()
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }
}

/// Affine map `x · W + b` with W stored in×out.
#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(rng: &mut Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: init_weight(rng, &[d_in, d_out]),
            bias: bias.then(|| init_zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.linear(&self.weight, self.bias.as_ref())
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        let mut out = vec![(format!("{prefix}.weight"), self.weight.clone())];
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
        out
    }
}

/// Name → values map used to move weights between models and checkpoints.
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Copies every named parameter into a plain map (values as `f32`).
pub fn export_parameters<F: Real>(named: &[(String, Tensor<F>)]) -> TensorMap {
    named
        .iter()
        .map(|(n, t)| {
            let vals = t.data().iter().map(|v| v.as_f64() as f32).collect();
            (n.clone(), (t.shape().to_vec(), vals))
        })
        .collect()
}

/// Overwrites parameters from `map`, looking each up as `source_prefix` +
/// the parameter name with `target_prefix` stripped. All names must be
/// present with matching shapes; missing ones are reported together.
pub fn import_parameters<F: Real>(
    named: &[(String, Tensor<F>)],
    map: &TensorMap,
    target_prefix: &str,
    source_prefix: &str,
) -> Result<()> {
    let mut missing = Vec::new();
    for (name, t) in named {
        let suffix = name.strip_prefix(target_prefix).unwrap_or(name);
        let key = format!("{source_prefix}{suffix}");
        match map.get(&key) {
            None => missing.push(key),
            Some((shape, vals)) => {
                if shape.as_slice() != t.shape() {
                    return Err(PalError::Checkpoint(format!(
                        "tensor {key} has shape {:?}, model expects {:?}",
                        shape,
                        t.shape()
                    )));
                }
                let mut d = t.data_mut();
                for (dst, &src) in d.iter_mut().zip(vals) {
                    *dst = F::of(src as f64);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(PalError::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
    }
    Ok(())
}
