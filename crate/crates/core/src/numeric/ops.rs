//! Forward kernels and their adjoints.
//!
//! Public functions validate shapes and return `Result`; the `pub(crate)`
//! slice kernels assume shapes were validated once at parameter construction
//! and are what the model code calls in its inner loops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{axpy, dot, norm, Matrix, Vector};
use crate::error::{Error, Result};

/// Below this norm a vector is treated as zero by the cosine kernels.
pub const NORM_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// linear

pub struct LinearGrads {
    pub dx: Vector,
    pub dw: Matrix,
    pub db: Vector,
}

/// `y = W x (+ b)`.
pub fn linear_forward(x: &Vector, w: &Matrix, b: Option<&Vector>) -> Result<Vector> {
    if x.len() != w.cols() {
        return Err(Error::shape("linear_forward", w.shape_str(), format!("x({})", x.len())));
    }
    let mut y = w.matvec(x);
    if let Some(b) = b {
        if b.len() != w.rows() {
            return Err(Error::shape("linear_forward", w.shape_str(), format!("b({})", b.len())));
        }
        axpy(1.0, b, &mut y);
    }
    Ok(Vector::from_raw(y))
}

/// Adjoints of [`linear_forward`] for an upstream gradient `dy`.
pub fn linear_backward(x: &Vector, w: &Matrix, dy: &Vector) -> Result<LinearGrads> {
    if x.len() != w.cols() || dy.len() != w.rows() {
        return Err(Error::shape(
            "linear_backward",
            w.shape_str(),
            format!("x({}), dy({})", x.len(), dy.len()),
        ));
    }
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    dw.add_outer(1.0, dy, x);
    Ok(LinearGrads {
        dx: Vector::from_raw(w.vecmat(dy)),
        dw,
        db: dy.clone(),
    })
}

// ---------------------------------------------------------------------------
// layer norm

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Vector,
    pub bias: Vector,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gain: Vector::filled(dim, 1.0),
            bias: Vector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

pub(crate) fn layer_norm_fwd(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(h, (g, b))| g * h + b)
        .collect();
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dgain`/`dbias`.
pub(crate) fn layer_norm_bwd(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dot(&dxhat, &cache.xhat) / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, h)| cache.inv_std * (d - mean_d - h * mean_dx))
        .collect()
}

fn check_layer_norm(x: &Vector, p: &LayerNormParams, eps: f64) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Empty("layer_norm"));
    }
    if x.len() != p.gain.len() || x.len() != p.bias.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x({})", x.len()),
            format!("gain({}), bias({})", p.gain.len(), p.bias.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::NonPositive { what: "layer_norm eps", value: eps });
    }
    Ok(())
}

/// `y_i = gain_i·(x_i − mean)/sqrt(var + eps) + bias_i` with population variance.
pub fn layer_norm(x: &Vector, p: &LayerNormParams, eps: f64) -> Result<Vector> {
    check_layer_norm(x, p, eps)?;
    Ok(Vector::from_raw(layer_norm_fwd(x, &p.gain, &p.bias, eps).0))
}

/// Adjoints `(dx, dgain, dbias)` of [`layer_norm`].
pub fn layer_norm_backward(
    x: &Vector,
    p: &LayerNormParams,
    eps: f64,
    dy: &Vector,
) -> Result<(Vector, Vector, Vector)> {
    check_layer_norm(x, p, eps)?;
    if dy.len() != x.len() {
        return Err(Error::shape("layer_norm_backward", format!("x({})", x.len()), format!("dy({})", dy.len())));
    }
    let (_, cache) = layer_norm_fwd(x, &p.gain, &p.bias, eps);
    let mut dg = vec![0.0; x.len()];
    let mut db = vec![0.0; x.len()];
    let dx = layer_norm_bwd(&cache, &p.gain, dy, &mut dg, &mut db);
    Ok((Vector::from_raw(dx), Vector::from_raw(dg), Vector::from_raw(db)))
}

// ---------------------------------------------------------------------------
// softmax

pub(crate) fn softmax_slice(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Gradient w.r.t. the scores given `p = softmax(s/τ)` and `dp`.
pub(crate) fn softmax_bwd(p: &[f64], dp: &[f64], tau: f64) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner) / tau).collect()
}

pub(crate) fn log_softmax_slice(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

/// `p_i = exp(s_i/τ) / Σ_j exp(s_j/τ)`, max-subtracted.
pub fn softmax_temp(scores: &Vector, tau: f64) -> Result<Vector> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::NonPositive { what: "softmax temperature", value: tau });
    }
    Ok(Vector::from_raw(softmax_slice(scores, tau)))
}

pub fn softmax_temp_backward(p: &Vector, dp: &Vector, tau: f64) -> Result<Vector> {
    if p.len() != dp.len() {
        return Err(Error::shape("softmax_temp_backward", format!("p({})", p.len()), format!("dp({})", dp.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::NonPositive { what: "softmax temperature", value: tau });
    }
    Ok(Vector::from_raw(softmax_bwd(p, dp, tau)))
}

// ---------------------------------------------------------------------------
// cosine similarity

/// Cosine similarity plus the norms, for reuse by the backward kernel.
pub(crate) fn cosine_fwd(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = norm(a);
    let nb = norm(b);
    ((dot(a, b) / (na * nb)).clamp(-1.0, 1.0), na, nb)
}

/// Accumulates `g · ∂cos/∂a` into `da` and `g · ∂cos/∂b` into `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cosine_bwd(
    a: &[f64],
    b: &[f64],
    cos: f64,
    na: f64,
    nb: f64,
    g: f64,
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let inv = 1.0 / (na * nb);
    if let Some(da) = da {
        let ca = cos / (na * na);
        for i in 0..a.len() {
            da[i] += g * (b[i] * inv - ca * a[i]);
        }
    }
    if let Some(db) = db {
        let cb = cos / (nb * nb);
        for i in 0..b.len() {
            db[i] += g * (a[i] * inv - cb * b[i]);
        }
    }
}

fn check_cosine(a: &Vector, b: &Vector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", format!("a({})", a.len()), format!("b({})", b.len())));
    }
    if a.norm() <= NORM_FLOOR {
        return Err(Error::ZeroNorm { op: "cosine_sim", which: "a" });
    }
    if b.norm() <= NORM_FLOOR {
        return Err(Error::ZeroNorm { op: "cosine_sim", which: "b" });
    }
    Ok(())
}

pub fn cosine_sim(a: &Vector, b: &Vector) -> Result<f64> {
    check_cosine(a, b)?;
    Ok(cosine_fwd(a, b).0)
}

/// `(cos, ∂cos/∂a, ∂cos/∂b)`.
pub fn cosine_sim_grad(a: &Vector, b: &Vector) -> Result<(f64, Vector, Vector)> {
    check_cosine(a, b)?;
    let (c, na, nb) = cosine_fwd(a, b);
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    cosine_bwd(a, b, c, na, nb, 1.0, Some(&mut da), Some(&mut db));
    Ok((c, Vector::from_raw(da), Vector::from_raw(db)))
}

// ---------------------------------------------------------------------------
// relu, dropout

pub fn relu(x: &Vector) -> Vector {
    Vector::from_raw(x.iter().map(|v| v.max(0.0)).collect())
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, else `1/(1-rate)`.
pub(crate) fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}
