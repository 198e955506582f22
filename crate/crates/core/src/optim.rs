use crate::error::{Error, Result};
use crate::tensor::{Parameter, ParameterSet};

pub const DEFAULT_ADAGRAD_EPS: f64 = 1e-6;

/// One AdaGrad update: `accum += g²; value −= lr·g / (√accum + eps)`.
/// The gradient is cleared afterwards. Entries with a zero gradient are left
/// untouched, so rows that took no part in the loss keep their value and
/// accumulator exactly.
pub fn adagrad_step(p: &mut Parameter, lr: f64, eps: f64) -> Result<()> {
    p.grad.ensure_finite("gradient")?;
    let Parameter { value, grad, accum } = p;
    for ((w, g), a) in value
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_mut_slice())
        .zip(accum.as_mut_slice())
    {
        if *g == 0.0 {
            continue;
        }
        *a += *g * *g;
        *w -= lr * *g / (a.sqrt() + eps);
        *g = 0.0;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
}

impl Adagrad {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            eps: DEFAULT_ADAGRAD_EPS,
        }
    }

    /// Steps every parameter of `params`. All gradients are validated first so
    /// that a non-finite gradient leaves every value untouched.
    pub fn step(&self, params: &mut dyn ParameterSet) -> Result<()> {
        let mut bad = None;
        params.visit_params(&mut |name, p| {
            if bad.is_none() && !p.grad.is_finite() {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let mut result = Ok(());
        params.visit_params_mut(&mut |_, p| {
            if result.is_ok() {
                result = adagrad_step(p, self.lr, self.eps);
            }
        });
        result
    }
}
