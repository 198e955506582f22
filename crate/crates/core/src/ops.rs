//! Forward and backward rules for the elementary operations.
//!
//! Each operation comes as a `*_forward` / `*_backward` pair (or a single
//! function returning what the backward pass needs). Backward functions take
//! the upstream gradient and return or accumulate input gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, RealArray};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn tanh_map(x: &RealArray) -> Result<RealArray> {
    x.ensure_finite("tanh input")?;
    let data = x.as_slice().iter().map(|v| v.tanh()).collect();
    RealArray::new(x.shape().to_vec(), data)
}

/// `upstream ⊙ (1 − y²)` where `y` is the forward output.
pub fn tanh_backward(y: &RealArray, upstream: &RealArray) -> Result<RealArray> {
    if y.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "tanh backward: output {:?} vs upstream {:?}",
            y.shape(),
            upstream.shape()
        )));
    }
    let data = y
        .as_slice()
        .iter()
        .zip(upstream.as_slice())
        .map(|(y, g)| g * (1.0 - y * y))
        .collect();
    RealArray::new(y.shape().to_vec(), data)
}

fn check_affine(w: &RealArray, x: &RealArray, b: &RealArray) -> Result<(usize, usize)> {
    let (m, n) = match w.shape() {
        [m, n] => (*m, *n),
        s => return Err(Error::Shape(format!("affine weight must be rank 2, got {s:?}"))),
    };
    if x.len() != n || b.len() != m {
        return Err(Error::Shape(format!(
            "affine: W {m}x{n}, x {:?}, b {:?}",
            x.shape(),
            b.shape()
        )));
    }
    Ok((m, n))
}

/// `W x + b`.
pub fn affine(w: &RealArray, x: &RealArray, b: &RealArray) -> Result<RealArray> {
    let (m, n) = check_affine(w, x, b)?;
    let mut out = b.as_slice().to_vec();
    affine_into(w.as_slice(), x.as_slice(), m, n, &mut out);
    Ok(RealArray::vector(out))
}

pub(crate) fn affine_into(w: &[f64], x: &[f64], m: usize, n: usize, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(m) {
        let row = &w[r * n..(r + 1) * n];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Gradients of `W x + b` with respect to `W`, `x` and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub w: RealArray,
    pub x: RealArray,
    pub b: RealArray,
}

pub fn affine_backward(
    w: &RealArray,
    x: &RealArray,
    b: &RealArray,
    upstream: &RealArray,
) -> Result<AffineGrads> {
    let (m, n) = check_affine(w, x, b)?;
    if upstream.len() != m {
        return Err(Error::Shape(format!(
            "affine backward: upstream {:?}, expected [{m}]",
            upstream.shape()
        )));
    }
    let mut gw = RealArray::zeros(&[m, n]);
    let mut gx = vec![0.0; n];
    affine_backward_into(
        w.as_slice(),
        x.as_slice(),
        upstream.as_slice(),
        m,
        n,
        gw.as_mut_slice(),
        &mut gx,
    );
    Ok(AffineGrads {
        w: gw,
        x: RealArray::vector(gx),
        b: upstream.clone(),
    })
}

/// Accumulates `g ⊗ x` into `gw` and `Wᵀ g` into `gx`.
pub(crate) fn affine_backward_into(
    w: &[f64],
    x: &[f64],
    g: &[f64],
    m: usize,
    n: usize,
    gw: &mut [f64],
    gx: &mut [f64],
) {
    for r in 0..m {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let wrow = &w[r * n..(r + 1) * n];
        let gwrow = &mut gw[r * n..(r + 1) * n];
        for c in 0..n {
            gwrow[c] += gr * x[c];
            gx[c] += gr * wrow[c];
        }
    }
}

/// Result of [`softmax_cross_entropy`]. The gradient with respect to the
/// logits is `probs − onehot(label)`, available via [`Self::logit_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub probs: RealArray,
    pub label: usize,
}

impl CrossEntropy {
    pub fn logit_grad(&self) -> RealArray {
        let mut g = self.probs.clone();
        g.as_mut_slice()[self.label] -= 1.0;
        g
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_cross_entropy(logits: &RealArray, label: usize) -> Result<CrossEntropy> {
    let k = logits.len();
    if label >= k {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    logits.ensure_finite("logits")?;
    let z = logits.as_slice();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = -(z[label] - max - log_total);
    Ok(CrossEntropy {
        loss,
        probs: RealArray::vector(softmax(z)),
        label,
    })
}

/// Inverted-dropout mask: entries are `1/keep_prob` with probability
/// `keep_prob`, else 0. In [`Mode::Eval`] the mask is all ones and the RNG is
/// not touched.
pub fn dropout_mask<R: Rng + ?Sized>(
    shape: &[usize],
    keep_prob: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<RealArray> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep_prob must be in (0, 1], got {keep_prob}"
        )));
    }
    let mut mask = RealArray::filled(shape, 1.0);
    if mode == Mode::Eval || keep_prob == 1.0 {
        return Ok(mask);
    }
    let scale = 1.0 / keep_prob;
    for m in mask.as_mut_slice() {
        *m = if rng.random::<f64>() < keep_prob { scale } else { 0.0 };
    }
    Ok(mask)
}

/// Adds `lambda·w` to each gradient and returns `(lambda/2)·Σ‖w‖²`.
pub fn l2_regularize<'a, I>(params: I, lambda: f64) -> Result<f64>
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "L2 weight must be a finite value >= 0, got {lambda}"
        )));
    }
    let mut term = 0.0;
    for p in params {
        if lambda == 0.0 {
            continue;
        }
        term += 0.5 * lambda * p.value.sum_of_squares();
        for (g, w) in p.grad.as_mut_slice().iter_mut().zip(p.value.as_slice()) {
            *g += lambda * w;
        }
    }
    Ok(term)
}
