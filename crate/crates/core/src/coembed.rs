//! Observation embeddings and the per-panorama observation contrast loss.
//!
//! Separate branches: `o^x = Dr(LN(LN(W_x x) + e^N + e^T))` for the visual,
//! direction and concept inputs, `o^V = o^v + o^a`, `o′ = o^V + o^u`.
//! Fused baseline: `Dr(LN(LN(W_v v) + LN(W_a e_A) + e^N + e^T))`.

use serde::{Deserialize, Serialize};

use crate::concept::{Direction, RelativeDirection};
use crate::error::{Error, Result};
use crate::numeric::ops::{
    cosine_bwd, cosine_fwd, dropout_mask, layer_norm_bwd, layer_norm_fwd, softmax_slice, LayerNormCache, NORM_FLOOR,
};
use crate::numeric::params::{visit_ln, visit_ln_mut};
use crate::numeric::tensor::{add_into, norm};
use crate::numeric::{LayerNormParams, Matrix, ParamSet, Vector, LN_EPS};
use crate::rng::Rng;

pub const DIRECTION_DIM: usize = 4;

/// Rows of the navigable-embedding table.
pub const SLOT_NON_NAVIGABLE: usize = 0;
pub const SLOT_NAVIGABLE: usize = 1;
pub const SLOT_STOP: usize = 2;
pub const NUM_SLOTS: usize = 3;

/// Rows of the type-embedding table.
pub const TYPE_VISUAL: usize = 0;
pub const TYPE_HISTORY: usize = 1;

/// Views whose `o^V` is shorter than this are left out of the contrast sums.
pub const CONTRAST_NORM_FLOOR: f64 = 1e-8;

/// `(sin ψ, cos ψ, sin θ, cos θ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionFeature(pub [f64; DIRECTION_DIM]);

impl DirectionFeature {
    pub fn from_angles(heading: f64, elevation: f64) -> Self {
        DirectionFeature([heading.sin(), heading.cos(), elevation.sin(), elevation.cos()])
    }

    pub fn from_relative(r: RelativeDirection) -> Self {
        DirectionFeature::from_angles(r.d_heading, r.d_elevation)
    }

    /// All-zero feature, used for the stop candidate.
    pub fn zero() -> Self {
        DirectionFeature([0.0; DIRECTION_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn direction_feature(d: Direction) -> DirectionFeature {
    DirectionFeature::from_angles(d.heading(), d.elevation())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoEmbedParams {
    /// `d_m × dim_v`
    pub wv: Matrix,
    /// `d_m × 4`
    pub wa: Matrix,
    /// `d_m × dim_u`
    pub wu: Matrix,
    pub ln_v_in: LayerNormParams,
    pub ln_v_out: LayerNormParams,
    pub ln_a_in: LayerNormParams,
    pub ln_a_out: LayerNormParams,
    pub ln_u_in: LayerNormParams,
    pub ln_u_out: LayerNormParams,
    /// Outer norm of the fused baseline embedding.
    pub ln_fused_out: LayerNormParams,
    /// `NUM_SLOTS × d_m`
    pub nav_emb: Matrix,
    /// `2 × d_m`
    pub type_emb: Matrix,
    pub dropout_rate: f64,
}

impl ParamSet for CoEmbedParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("coembed.wv", self.wv.data());
        f("coembed.wa", self.wa.data());
        f("coembed.wu", self.wu.data());
        visit_ln("coembed.ln_v_in", &self.ln_v_in, f);
        visit_ln("coembed.ln_v_out", &self.ln_v_out, f);
        visit_ln("coembed.ln_a_in", &self.ln_a_in, f);
        visit_ln("coembed.ln_a_out", &self.ln_a_out, f);
        visit_ln("coembed.ln_u_in", &self.ln_u_in, f);
        visit_ln("coembed.ln_u_out", &self.ln_u_out, f);
        visit_ln("coembed.ln_fused_out", &self.ln_fused_out, f);
        f("coembed.nav_emb", self.nav_emb.data());
        f("coembed.type_emb", self.type_emb.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("coembed.wv", self.wv.data_mut());
        f("coembed.wa", self.wa.data_mut());
        f("coembed.wu", self.wu.data_mut());
        visit_ln_mut("coembed.ln_v_in", &mut self.ln_v_in, f);
        visit_ln_mut("coembed.ln_v_out", &mut self.ln_v_out, f);
        visit_ln_mut("coembed.ln_a_in", &mut self.ln_a_in, f);
        visit_ln_mut("coembed.ln_a_out", &mut self.ln_a_out, f);
        visit_ln_mut("coembed.ln_u_in", &mut self.ln_u_in, f);
        visit_ln_mut("coembed.ln_u_out", &mut self.ln_u_out, f);
        visit_ln_mut("coembed.ln_fused_out", &mut self.ln_fused_out, f);
        f("coembed.nav_emb", self.nav_emb.data_mut());
        f("coembed.type_emb", self.type_emb.data_mut());
    }
}

impl CoEmbedParams {
    pub fn init(dim_v: usize, dim_u: usize, d_model: usize, dropout_rate: f64, rng: &mut Rng) -> Result<Self> {
        if dim_v == 0 || dim_u == 0 || d_model < 2 {
            return Err(Error::invalid("co-embedding dims must be positive and d_model >= 2"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        let ln = || LayerNormParams::identity(d_model);
        Ok(CoEmbedParams {
            wv: Matrix::uniform_init(d_model, dim_v, dim_v, rng),
            wa: Matrix::uniform_init(d_model, DIRECTION_DIM, DIRECTION_DIM, rng),
            wu: Matrix::uniform_init(d_model, dim_u, dim_u, rng),
            ln_v_in: ln(),
            ln_v_out: ln(),
            ln_a_in: ln(),
            ln_a_out: ln(),
            ln_u_in: ln(),
            ln_u_out: ln(),
            ln_fused_out: ln(),
            nav_emb: Matrix::uniform_init(NUM_SLOTS, d_model, 100, rng),
            type_emb: Matrix::uniform_init(2, d_model, 100, rng),
            dropout_rate,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wv.rows()
    }

    pub fn dim_v(&self) -> usize {
        self.wv.cols()
    }

    pub fn dim_u(&self) -> usize {
        self.wu.cols()
    }
}

/// Dropout on (train) or off (eval).
pub enum EmbedMode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl EmbedMode<'_> {
    fn mask(&mut self, len: usize, rate: f64) -> Option<Vec<f64>> {
        match self {
            EmbedMode::Eval => None,
            EmbedMode::Train(_) if rate <= 0.0 => None,
            EmbedMode::Train(rng) => Some(dropout_mask(len, rate, *rng)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationEmbedding {
    pub o_v: Vector,
    pub o_a: Vector,
    pub o_u: Vector,
    pub o_vis: Vector,
    pub o_prime: Vector,
}

impl ObservationEmbedding {
    pub(crate) fn assemble(o_v: Vec<f64>, o_a: Vec<f64>, o_u: Vec<f64>) -> Self {
        let o_vis: Vec<f64> = o_v.iter().zip(&o_a).map(|(a, b)| a + b).collect();
        let o_prime: Vec<f64> = o_vis.iter().zip(&o_u).map(|(a, b)| a + b).collect();
        ObservationEmbedding {
            o_v: Vector::from_raw(o_v),
            o_a: Vector::from_raw(o_a),
            o_u: Vector::from_raw(o_u),
            o_vis: Vector::from_raw(o_vis),
            o_prime: Vector::from_raw(o_prime),
        }
    }
}

// ---------------------------------------------------------------------------
// one branch

#[derive(Clone, Debug)]
pub(crate) struct BranchCache {
    x: Vec<f64>,
    ln_in: LayerNormCache,
    ln_out: LayerNormCache,
    mask: Option<Vec<f64>>,
    slot: usize,
    kind: usize,
}

/// Which weight matrix and norms a branch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Branch {
    Visual,
    Direction,
    Concept,
}

impl CoEmbedParams {
    fn parts(&self, b: Branch) -> (&Matrix, &LayerNormParams, &LayerNormParams) {
        match b {
            Branch::Visual => (&self.wv, &self.ln_v_in, &self.ln_v_out),
            Branch::Direction => (&self.wa, &self.ln_a_in, &self.ln_a_out),
            Branch::Concept => (&self.wu, &self.ln_u_in, &self.ln_u_out),
        }
    }

    fn parts_mut(&mut self, b: Branch) -> (&mut Matrix, &mut LayerNormParams, &mut LayerNormParams) {
        match b {
            Branch::Visual => (&mut self.wv, &mut self.ln_v_in, &mut self.ln_v_out),
            Branch::Direction => (&mut self.wa, &mut self.ln_a_in, &mut self.ln_a_out),
            Branch::Concept => (&mut self.wu, &mut self.ln_u_in, &mut self.ln_u_out),
        }
    }
}

pub(crate) fn branch_fwd(
    p: &CoEmbedParams,
    b: Branch,
    x: &[f64],
    slot: usize,
    kind: usize,
    mode: &mut EmbedMode,
) -> (Vec<f64>, BranchCache) {
    let (w, ln_in, ln_out) = p.parts(b);
    let z = w.matvec(x);
    let (mut s, ln_in_c) = layer_norm_fwd(&z, &ln_in.gain, &ln_in.bias, LN_EPS);
    add_into(p.nav_emb.row(slot), &mut s);
    add_into(p.type_emb.row(kind), &mut s);
    let (mut o, ln_out_c) = layer_norm_fwd(&s, &ln_out.gain, &ln_out.bias, LN_EPS);
    let mask = mode.mask(o.len(), p.dropout_rate);
    if let Some(m) = &mask {
        o.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
    let cache = BranchCache {
        x: x.to_vec(),
        ln_in: ln_in_c,
        ln_out: ln_out_c,
        mask,
        slot,
        kind,
    };
    (o, cache)
}

/// Accumulates parameter gradients into `g`; returns `dx`.
pub(crate) fn branch_bwd(p: &CoEmbedParams, b: Branch, c: &BranchCache, dout: &[f64], g: &mut CoEmbedParams) -> Vec<f64> {
    let mut d = dout.to_vec();
    if let Some(m) = &c.mask {
        d.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
    let (w, ln_in, ln_out) = p.parts(b);
    let ds = {
        let (_, _, gout) = g.parts_mut(b);
        layer_norm_bwd(&c.ln_out, &ln_out.gain, &d, gout.gain.as_mut_slice(), gout.bias.as_mut_slice())
    };
    add_into(&ds, g.nav_emb.row_mut(c.slot));
    add_into(&ds, g.type_emb.row_mut(c.kind));
    let (gw, gin, _) = g.parts_mut(b);
    let dz = layer_norm_bwd(&c.ln_in, &ln_in.gain, &ds, gin.gain.as_mut_slice(), gin.bias.as_mut_slice());
    gw.add_outer(1.0, &dz, &c.x);
    w.vecmat(&dz)
}

// ---------------------------------------------------------------------------
// separate embedding

#[derive(Clone, Debug)]
pub struct SeparateCache {
    v: BranchCache,
    a: BranchCache,
    u: Option<BranchCache>,
}

fn check_inputs(p: &CoEmbedParams, v: &[f64], u: Option<&[f64]>, slot: usize) -> Result<()> {
    if v.len() != p.dim_v() {
        return Err(Error::shape("embed", format!("v({})", v.len()), p.wv.shape_str()));
    }
    if let Some(u) = u {
        if u.len() != p.dim_u() {
            return Err(Error::shape("embed", format!("u({})", u.len()), p.wu.shape_str()));
        }
    }
    if slot >= NUM_SLOTS {
        return Err(Error::invalid(format!("unknown navigable slot {slot} (table has {NUM_SLOTS} rows)")));
    }
    Ok(())
}

/// Separate branches with an explicit type row. `u = None` leaves the
/// concept branch out (`o^u = 0`).
pub(crate) fn separate_fwd(
    p: &CoEmbedParams,
    v: &[f64],
    e_a: &DirectionFeature,
    u: Option<&[f64]>,
    slot: usize,
    kind: usize,
    mode: &mut EmbedMode,
) -> (ObservationEmbedding, SeparateCache) {
    let (o_v, vc) = branch_fwd(p, Branch::Visual, v, slot, kind, mode);
    let (o_a, ac) = branch_fwd(p, Branch::Direction, e_a.as_slice(), slot, kind, mode);
    let (o_u, uc) = match u {
        Some(u) => {
            let (o, c) = branch_fwd(p, Branch::Concept, u, slot, kind, mode);
            (o, Some(c))
        }
        None => (vec![0.0; p.d_model()], None),
    };
    (ObservationEmbedding::assemble(o_v, o_a, o_u), SeparateCache { v: vc, a: ac, u: uc })
}

/// Gradients of the separate embedding. Returns `du` (zero if the concept
/// branch was off).
pub(crate) fn separate_bwd(
    p: &CoEmbedParams,
    c: &SeparateCache,
    d_o_v: &[f64],
    d_o_a: &[f64],
    d_o_u: &[f64],
    g: &mut CoEmbedParams,
) -> Vec<f64> {
    branch_bwd(p, Branch::Visual, &c.v, d_o_v, g);
    branch_bwd(p, Branch::Direction, &c.a, d_o_a, g);
    match &c.u {
        Some(uc) => branch_bwd(p, Branch::Concept, uc, d_o_u, g),
        None => vec![0.0; p.dim_u()],
    }
}

/// Separate embeddings of one view with the visual type row.
pub fn embed_separate(
    v: &Vector,
    e_a: &DirectionFeature,
    u: &Vector,
    slot: usize,
    p: &CoEmbedParams,
    mut mode: EmbedMode,
) -> Result<ObservationEmbedding> {
    check_inputs(p, v, Some(u), slot)?;
    Ok(separate_fwd(p, v, e_a, Some(u), slot, TYPE_VISUAL, &mut mode).0)
}

/// Parameter and concept-input gradients of [`embed_separate`] in eval mode,
/// for upstream gradients on `o^v`, `o^a`, `o^u`.
pub fn embed_separate_backward(
    v: &Vector,
    e_a: &DirectionFeature,
    u: &Vector,
    slot: usize,
    p: &CoEmbedParams,
    d_o_v: &Vector,
    d_o_a: &Vector,
    d_o_u: &Vector,
) -> Result<(CoEmbedParams, Vector)> {
    check_inputs(p, v, Some(u), slot)?;
    let (_, c) = separate_fwd(p, v, e_a, Some(u), slot, TYPE_VISUAL, &mut EmbedMode::Eval);
    let mut g = p.zeros_like();
    let du = separate_bwd(p, &c, d_o_v, d_o_a, d_o_u, &mut g);
    Ok((g, Vector::from_raw(du)))
}

// ---------------------------------------------------------------------------
// fused baseline embedding

#[derive(Clone, Debug)]
pub struct FusedCache {
    v: Vec<f64>,
    a: Vec<f64>,
    ln_v: LayerNormCache,
    ln_a: LayerNormCache,
    ln_out: LayerNormCache,
    mask: Option<Vec<f64>>,
    slot: usize,
    kind: usize,
}

pub(crate) fn fused_fwd(
    p: &CoEmbedParams,
    v: &[f64],
    e_a: &DirectionFeature,
    slot: usize,
    kind: usize,
    mode: &mut EmbedMode,
) -> (Vec<f64>, FusedCache) {
    let zv = p.wv.matvec(v);
    let za = p.wa.matvec(e_a.as_slice());
    let (mut s, ln_v) = layer_norm_fwd(&zv, &p.ln_v_in.gain, &p.ln_v_in.bias, LN_EPS);
    let (la, ln_a) = layer_norm_fwd(&za, &p.ln_a_in.gain, &p.ln_a_in.bias, LN_EPS);
    add_into(&la, &mut s);
    add_into(p.nav_emb.row(slot), &mut s);
    add_into(p.type_emb.row(kind), &mut s);
    let (mut o, ln_out) = layer_norm_fwd(&s, &p.ln_fused_out.gain, &p.ln_fused_out.bias, LN_EPS);
    let mask = mode.mask(o.len(), p.dropout_rate);
    if let Some(m) = &mask {
        o.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
    }
    let cache = FusedCache {
        v: v.to_vec(),
        a: e_a.0.to_vec(),
        ln_v,
        ln_a,
        ln_out,
        mask,
        slot,
        kind,
    };
    (o, cache)
}

pub(crate) fn fused_bwd(p: &CoEmbedParams, c: &FusedCache, dout: &[f64], g: &mut CoEmbedParams) {
    let mut d = dout.to_vec();
    if let Some(m) = &c.mask {
        d.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
    }
    let ds = layer_norm_bwd(
        &c.ln_out,
        &p.ln_fused_out.gain,
        &d,
        g.ln_fused_out.gain.as_mut_slice(),
        g.ln_fused_out.bias.as_mut_slice(),
    );
    add_into(&ds, g.nav_emb.row_mut(c.slot));
    add_into(&ds, g.type_emb.row_mut(c.kind));
    let dzv = layer_norm_bwd(&c.ln_v, &p.ln_v_in.gain, &ds, g.ln_v_in.gain.as_mut_slice(), g.ln_v_in.bias.as_mut_slice());
    let dza = layer_norm_bwd(&c.ln_a, &p.ln_a_in.gain, &ds, g.ln_a_in.gain.as_mut_slice(), g.ln_a_in.bias.as_mut_slice());
    g.wv.add_outer(1.0, &dzv, &c.v);
    g.wa.add_outer(1.0, &dza, &c.a);
}

/// Fused embedding of one view with the visual type row.
pub fn baseline_embed(
    v: &Vector,
    e_a: &DirectionFeature,
    slot: usize,
    p: &CoEmbedParams,
    mut mode: EmbedMode,
) -> Result<Vector> {
    check_inputs(p, v, None, slot)?;
    Ok(Vector::from_raw(fused_fwd(p, v, e_a, slot, TYPE_VISUAL, &mut mode).0))
}

/// Parameter gradients of [`baseline_embed`] in eval mode.
pub fn baseline_embed_backward(
    v: &Vector,
    e_a: &DirectionFeature,
    slot: usize,
    p: &CoEmbedParams,
    dout: &Vector,
) -> Result<CoEmbedParams> {
    check_inputs(p, v, None, slot)?;
    let (_, c) = fused_fwd(p, v, e_a, slot, TYPE_VISUAL, &mut EmbedMode::Eval);
    let mut g = p.zeros_like();
    fused_bwd(p, &c, dout, &mut g);
    Ok(g)
}

// ---------------------------------------------------------------------------
// contrast loss

/// Loss and adjoints w.r.t. each view's `o^V` and `o^u`.
#[derive(Clone, Debug)]
pub struct ContrastOutput {
    pub loss: f64,
    pub d_o_vis: Vec<Vec<f64>>,
    pub d_o_u: Vec<Vec<f64>>,
}

/// `Σ_n −log softmax_m(cos(o^V_n, o^u_m)/τ)[n]`, slice form.
pub(crate) fn contrast_fwd_bwd(o_vis: &[&[f64]], o_u: &[&[f64]], tau: f64) -> ContrastOutput {
    let n = o_vis.len();
    let dim = o_vis.first().map_or(0, |v| v.len());
    let mut d_o_vis = vec![vec![0.0; dim]; n];
    let mut d_o_u = vec![vec![0.0; dim]; n];
    let mut loss = 0.0;
    if n <= 1 {
        return ContrastOutput { loss, d_o_vis, d_o_u };
    }
    for a in 0..n {
        let cos: Vec<(f64, f64, f64)> = o_u.iter().map(|u| cosine_fwd(o_vis[a], u)).collect();
        let s: Vec<f64> = cos.iter().map(|c| c.0).collect();
        let p = softmax_slice(&s, tau);
        loss -= p[a].ln();
        for m in 0..n {
            // d(−log p_a)/d s_m = (p_m − [m = a]) / τ
            let g = (p[m] - if m == a { 1.0 } else { 0.0 }) / tau;
            let (c, na, nb) = cos[m];
            let (dv, du) = (&mut d_o_vis[a], &mut d_o_u[m]);
            cosine_bwd(o_vis[a], o_u[m], c, na, nb, g, Some(dv), Some(du));
        }
    }
    ContrastOutput { loss, d_o_vis, d_o_u }
}

/// Observation contrast over one panorama: each view's `o^V` against its own
/// `o^u`, with the other views' `o^u` as negatives.
pub fn observation_contrast_loss(views: &[ObservationEmbedding], tau: f64) -> Result<ContrastOutput> {
    if views.is_empty() {
        return Err(Error::Empty("observation_contrast_loss views"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::NonPositive { what: "contrast temperature", value: tau });
    }
    for v in views {
        if norm(&v.o_vis) <= NORM_FLOOR {
            return Err(Error::ZeroNorm { op: "observation_contrast_loss", which: "o_V" });
        }
        if norm(&v.o_u) <= NORM_FLOOR {
            return Err(Error::ZeroNorm { op: "observation_contrast_loss", which: "o_u" });
        }
    }
    let ov: Vec<&[f64]> = views.iter().map(|v| v.o_vis.as_slice()).collect();
    let ou: Vec<&[f64]> = views.iter().map(|v| v.o_u.as_slice()).collect();
    Ok(contrast_fwd_bwd(&ov, &ou, tau))
}
