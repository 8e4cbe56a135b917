//! Instruction-conditioned refinement of an image feature and re-ranking of
//! its top-k object concepts.
//!
//! `A(f) = ReLU(fᵀW1)W2`, `f̃ = α·f_B + (1−α)·A([f_B; f_cls])`,
//! `p̃ = softmax(cos(f̃, t_i) / T)` with `T = 1` unless overridden.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ops::{cosine_bwd, cosine_fwd, softmax_bwd, softmax_slice, NORM_FLOOR};
use crate::numeric::tensor::{axpy, norm};
use crate::numeric::{Matrix, ParamSet, Vector};
use crate::rng::Rng;

pub const ADAPTER_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_ADAPTER_LR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    /// `in_dim × hidden`
    pub w1: Matrix,
    /// `hidden × out_dim`
    pub w2: Matrix,
    pub alpha: f64,
}

impl ParamSet for AdapterParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("adapter.w1", self.w1.data());
        f("adapter.w2", self.w2.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("adapter.w1", self.w1.data_mut());
        f("adapter.w2", self.w2.data_mut());
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    alpha: f64,
    w1: Matrix,
    w2: Matrix,
}

impl AdapterParams {
    /// `W1, W2 ~ U(±1/√fan_in)`; `in_dim = 2·dim`, output `dim`.
    pub fn init(dim: usize, hidden: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("adapter dims must be positive"));
        }
        let w1 = Matrix::uniform_init(2 * dim, hidden, 2 * dim, rng);
        let w2 = Matrix::uniform_init(hidden, dim, hidden, rng);
        AdapterParams::new(w1, w2, alpha)
    }

    pub fn new(w1: Matrix, w2: Matrix, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("adapter alpha {alpha} outside [0, 1]")));
        }
        if w1.cols() != w2.rows() {
            return Err(Error::shape("adapter", w1.shape_str(), w2.shape_str()));
        }
        if w1.rows() != 2 * w2.cols() {
            return Err(Error::invalid(format!(
                "adapter input dim {} must be twice the output dim {}",
                w1.rows(),
                w2.cols()
            )));
        }
        Ok(AdapterParams { w1, w2, alpha })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn to_json_string(&self) -> String {
        let c = Checkpoint {
            format_version: ADAPTER_FORMAT_VERSION,
            alpha: self.alpha,
            w1: self.w1.clone(),
            w2: self.w2.clone(),
        };
        serde_json::to_string(&c).expect("adapter serializes")
    }

    pub fn from_json_str(s: &str, origin: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| Error::parse(origin, e))?;
        if c.format_version != ADAPTER_FORMAT_VERSION {
            return Err(Error::parse(
                origin,
                format!("adapter format_version {} (supported: {ADAPTER_FORMAT_VERSION})", c.format_version),
            ));
        }
        AdapterParams::new(c.w1, c.w2, c.alpha).map_err(|e| Error::parse(origin, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AdapterParams::from_json_str(&s, path)
    }
}

// ---------------------------------------------------------------------------
// forward / backward

#[derive(Clone, Debug)]
pub struct AdapterCache {
    input: Vec<f64>,
    act: Vec<f64>,
}

/// Slice kernel; caller guarantees `f.len() == in_dim`.
pub(crate) fn adapter_fwd(f: &[f64], p: &AdapterParams) -> (Vec<f64>, AdapterCache) {
    let mut act = p.w1.vecmat(f);
    act.iter_mut().for_each(|v| *v = v.max(0.0));
    let out = p.w2.vecmat(&act);
    (out, AdapterCache { input: f.to_vec(), act })
}

/// Returns `df`; accumulates weight gradients into `g`.
pub(crate) fn adapter_bwd(cache: &AdapterCache, p: &AdapterParams, dout: &[f64], g: &mut AdapterParams) -> Vec<f64> {
    let mut dact = p.w2.matvec(dout);
    g.w2.add_outer(1.0, &cache.act, dout);
    for (d, a) in dact.iter_mut().zip(&cache.act) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
    g.w1.add_outer(1.0, &cache.input, &dact);
    p.w1.matvec(&dact)
}

fn check_in(f: &Vector, p: &AdapterParams) -> Result<()> {
    if f.len() != p.in_dim() {
        return Err(Error::shape("adapter_forward", format!("f({})", f.len()), p.w1.shape_str()));
    }
    Ok(())
}

/// `A(f) = ReLU(fᵀW1)W2`.
pub fn adapter_forward(f: &Vector, p: &AdapterParams) -> Result<Vector> {
    check_in(f, p)?;
    Ok(Vector::from_raw(adapter_fwd(f, p).0))
}

/// Adjoints `(df, dParams)` of [`adapter_forward`] for upstream `dout`.
pub fn adapter_backward(f: &Vector, p: &AdapterParams, dout: &Vector) -> Result<(Vector, AdapterParams)> {
    check_in(f, p)?;
    if dout.len() != p.out_dim() {
        return Err(Error::shape("adapter_backward", format!("dout({})", dout.len()), p.w2.shape_str()));
    }
    let (_, cache) = adapter_fwd(f, p);
    let mut g = p.zeros_like();
    let df = adapter_bwd(&cache, p, dout, &mut g);
    Ok((Vector::from_raw(df), g))
}

#[derive(Clone, Debug)]
pub struct RefineCache {
    adapter: AdapterCache,
}

pub(crate) fn refine_fwd(fb: &[f64], cls: &[f64], p: &AdapterParams) -> (Vec<f64>, RefineCache) {
    let mut input = Vec::with_capacity(fb.len() + cls.len());
    input.extend_from_slice(fb);
    input.extend_from_slice(cls);
    let (a, adapter) = adapter_fwd(&input, p);
    let mut out: Vec<f64> = a.iter().map(|v| (1.0 - p.alpha) * v).collect();
    axpy(p.alpha, fb, &mut out);
    (out, RefineCache { adapter })
}

/// Returns `(d f_B, d f_cls)`; accumulates weight gradients into `g`.
pub(crate) fn refine_bwd(
    cache: &RefineCache,
    p: &AdapterParams,
    dout: &[f64],
    g: &mut AdapterParams,
) -> (Vec<f64>, Vec<f64>) {
    let da: Vec<f64> = dout.iter().map(|d| (1.0 - p.alpha) * d).collect();
    let dinput = adapter_bwd(&cache.adapter, p, &da, g);
    let dim = p.out_dim();
    let mut dfb = dinput[..dim].to_vec();
    axpy(p.alpha, dout, &mut dfb);
    (dfb, dinput[dim..].to_vec())
}

/// `f̃_B = α·f_B + (1−α)·A([f_B; f_cls])`.
pub fn refine_image_feature(fb: &Vector, cls: &Vector, p: &AdapterParams) -> Result<Vector> {
    if fb.len() != p.out_dim() || cls.len() != p.out_dim() {
        return Err(Error::shape(
            "refine_image_feature",
            format!("f_B({}), f_cls({})", fb.len(), cls.len()),
            format!("adapter out dim {}", p.out_dim()),
        ));
    }
    if p.alpha == 1.0 {
        return Ok(fb.clone());
    }
    Ok(Vector::from_raw(refine_fwd(fb, cls, p).0))
}

// ---------------------------------------------------------------------------
// re-ranking

#[derive(Clone, Debug)]
pub struct RerankCache {
    cos: Vec<(f64, f64, f64)>,
    probs: Vec<f64>,
    temperature: f64,
}

pub(crate) fn rerank_fwd(refined: &[f64], texts: &[&[f64]], temperature: f64) -> (Vec<f64>, RerankCache) {
    let cos: Vec<(f64, f64, f64)> = texts.iter().map(|t| cosine_fwd(refined, t)).collect();
    let sims: Vec<f64> = cos.iter().map(|c| c.0).collect();
    let probs = softmax_slice(&sims, temperature);
    (probs.clone(), RerankCache { cos, probs, temperature })
}

/// Accumulates `d refined` for an upstream gradient on the probabilities.
pub(crate) fn rerank_bwd(cache: &RerankCache, refined: &[f64], texts: &[&[f64]], dp: &[f64], drefined: &mut [f64]) {
    let ds = softmax_bwd(&cache.probs, dp, cache.temperature);
    for ((t, &(c, na, nb)), g) in texts.iter().zip(&cache.cos).zip(ds) {
        cosine_bwd(refined, t, c, na, nb, g, Some(&mut *drefined), None);
    }
}

fn check_rerank(refined: &Vector, texts: &[Vector], temperature: f64) -> Result<()> {
    if texts.is_empty() {
        return Err(Error::Empty("rerank_topk text features"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::NonPositive { what: "rerank temperature", value: temperature });
    }
    if norm(refined) <= NORM_FLOOR {
        return Err(Error::ZeroNorm { op: "rerank_topk", which: "refined feature" });
    }
    for t in texts {
        if t.len() != refined.len() {
            return Err(Error::shape("rerank_topk", format!("refined({})", refined.len()), format!("text({})", t.len())));
        }
        if norm(t) <= NORM_FLOOR {
            return Err(Error::ZeroNorm { op: "rerank_topk", which: "text feature" });
        }
    }
    Ok(())
}

/// `p̃_i = softmax_i(cos(f̃, t_i))`, in the order of `texts`.
pub fn rerank_topk(refined: &Vector, texts: &[Vector]) -> Result<Vector> {
    rerank_topk_temp(refined, texts, 1.0)
}

/// [`rerank_topk`] with an explicit softmax temperature.
pub fn rerank_topk_temp(refined: &Vector, texts: &[Vector], temperature: f64) -> Result<Vector> {
    check_rerank(refined, texts, temperature)?;
    let t: Vec<&[f64]> = texts.iter().map(|v| v.as_slice()).collect();
    Ok(Vector::from_raw(rerank_fwd(refined, &t, temperature).0))
}

// ---------------------------------------------------------------------------
// standalone objective

/// One re-ranking example: an image feature, the instruction's provider-dim
/// cls feature, the text features of its top-k concepts and the index of the
/// ground-truth concept among them.
#[derive(Clone, Debug)]
pub struct RerankExample {
    pub image: Vector,
    pub cls: Vector,
    pub texts: Vec<Vector>,
    pub target: usize,
}

/// Mean `−log p̃[target]` over a batch, with adapter gradients.
pub fn rerank_ce_loss(p: &AdapterParams, batch: &[RerankExample]) -> Result<(f64, AdapterParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("rerank batch"));
    }
    let mut g = p.zeros_like();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        if ex.target >= ex.texts.len() {
            return Err(Error::invalid(format!("target {} out of {} concepts", ex.target, ex.texts.len())));
        }
        let refined = refine_image_feature(&ex.image, &ex.cls, p)?;
        check_rerank(&refined, &ex.texts, 1.0)?;
        let (r, rc) = refine_fwd(&ex.image, &ex.cls, p);
        let texts: Vec<&[f64]> = ex.texts.iter().map(|v| v.as_slice()).collect();
        let (probs, cache) = rerank_fwd(&r, &texts, 1.0);
        loss -= scale * probs[ex.target].ln();
        let mut dp = vec![0.0; probs.len()];
        dp[ex.target] = -scale / probs[ex.target];
        let mut dr = vec![0.0; r.len()];
        rerank_bwd(&cache, &r, &texts, &dp, &mut dr);
        refine_bwd(&rc, p, &dr, &mut g);
    }
    Ok((loss, g))
}

/// Mean `p̃[target]` over a batch.
pub fn mean_target_prob(p: &AdapterParams, batch: &[RerankExample]) -> Result<f64> {
    let mut s = 0.0;
    for ex in batch {
        let r = refine_image_feature(&ex.image, &ex.cls, p)?;
        s += rerank_topk(&r, &ex.texts)?[ex.target];
    }
    Ok(s / batch.len() as f64)
}
