//! Instruction encoding, step-wise cross-modal attention, candidate scoring
//! and the per-step losses.

use serde::{Deserialize, Serialize};

use super::params::PolicyParams;
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::numeric::ops::{log_softmax_slice, softmax_bwd, softmax_slice};
use crate::numeric::tensor::{add_into, axpy, dot};

/// Frozen step tokens plus everything derived from them once per episode.
#[derive(Clone, Debug)]
pub struct InstructionEncoding {
    pub tokens: Vec<Vec<f64>>,
    mean: Vec<f64>,
    /// Query-side sentence vector (`d_m`).
    pub cls_m: Vec<f64>,
    /// Adapter-side sentence vector (`dim`).
    pub cls_p: Vec<f64>,
    keys: Vec<Vec<f64>>,
}

/// Adjoints collected over an episode for the instruction encoder.
#[derive(Clone, Debug)]
pub(crate) struct InstrGrads {
    pub d_cls_m: Vec<f64>,
    pub d_cls_p: Vec<f64>,
    pub d_keys: Vec<Vec<f64>>,
}

impl InstrGrads {
    pub fn zeros(enc: &InstructionEncoding) -> Self {
        InstrGrads {
            d_cls_m: vec![0.0; enc.cls_m.len()],
            d_cls_p: vec![0.0; enc.cls_p.len()],
            d_keys: vec![vec![0.0; enc.cls_m.len()]; enc.tokens.len()],
        }
    }
}

pub(crate) fn encode_fwd(p: &PolicyParams, tokens: Vec<Vec<f64>>) -> InstructionEncoding {
    let dim = p.text_dim();
    let mut mean = vec![0.0; dim];
    for t in &tokens {
        axpy(1.0 / tokens.len() as f64, t, &mut mean);
    }
    let cls_m = p.wc.matvec(&mean);
    let cls_p = p.wcp.matvec(&mean);
    let keys = tokens
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let mut k = p.wk.matvec(t);
            add_into(p.pos_key.row(j), &mut k);
            k
        })
        .collect();
    InstructionEncoding { tokens, mean, cls_m, cls_p, keys }
}

pub(crate) fn encode_bwd(enc: &InstructionEncoding, ig: &InstrGrads, g: &mut PolicyParams) {
    g.wc.add_outer(1.0, &ig.d_cls_m, &enc.mean);
    g.wcp.add_outer(1.0, &ig.d_cls_p, &enc.mean);
    for (j, (dk, t)) in ig.d_keys.iter().zip(&enc.tokens).enumerate() {
        g.wk.add_outer(1.0, dk, t);
        add_into(dk, g.pos_key.row_mut(j));
    }
}

/// Embeds each instruction step as one token.
pub fn encode_instruction<S: AsRef<str>>(
    steps: &[S],
    provider: &dyn EmbeddingProvider,
    p: &PolicyParams,
) -> Result<InstructionEncoding> {
    if steps.is_empty() {
        return Err(Error::Empty("instruction"));
    }
    if steps.len() > p.max_tokens() {
        return Err(Error::invalid(format!(
            "instruction has {} steps, model supports at most {}",
            steps.len(),
            p.max_tokens()
        )));
    }
    if provider.dim() != p.text_dim() {
        return Err(Error::shape("encode_instruction", format!("provider dim {}", provider.dim()), p.wc.shape_str()));
    }
    let tokens = steps
        .iter()
        .map(|s| provider.text_embed(s.as_ref()).map(|v| v.into_inner()))
        .collect::<Result<Vec<_>>>()?;
    Ok(encode_fwd(p, tokens))
}

#[derive(Clone, Debug)]
pub(crate) struct StepCache {
    row: usize,
    qin: Vec<f64>,
    q: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    c: Vec<f64>,
    /// Per candidate: scorer input and hidden activation.
    xs: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
}

/// Scores, probabilities, attention and value at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepScores {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub value: f64,
}

pub(crate) fn step_fwd(
    p: &PolicyParams,
    enc: &InstructionEncoding,
    h: &[f64],
    t: usize,
    obs: &[&[f64]],
) -> (StepScores, StepCache) {
    let dm = p.d_model();
    let row = t.min(p.max_steps() - 1);
    let mut qin = enc.cls_m.clone();
    qin.extend_from_slice(h);
    let mut q = p.wq.matvec(&qin);
    add_into(p.step_query.row(row), &mut q);
    let scale = 1.0 / (dm as f64).sqrt();
    let scores: Vec<f64> = enc.keys.iter().map(|k| dot(&q, k) * scale).collect();
    let attn = softmax_slice(&scores, 1.0);
    let mut ctx = vec![0.0; p.text_dim()];
    for (a, tok) in attn.iter().zip(&enc.tokens) {
        axpy(*a, tok, &mut ctx);
    }
    let c = p.wo.matvec(&ctx);

    let mut xs = Vec::with_capacity(obs.len());
    let mut acts = Vec::with_capacity(obs.len());
    let mut logits = Vec::with_capacity(obs.len());
    for o in obs {
        let mut x = Vec::with_capacity(2 * dm);
        x.extend_from_slice(o);
        x.extend(c.iter().zip(o.iter()).map(|(a, b)| a * b));
        let mut z = p.s1.matvec(&x);
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        logits.push(dot(&p.s2, &z));
        xs.push(x);
        acts.push(z);
    }
    let probs = softmax_slice(&logits, 1.0);
    let value = dot(&p.value_w[..dm], &c) + dot(&p.value_w[dm..], h) + p.value_b[0];
    let scores = StepScores { logits, probs, attention: attn.clone(), value };
    (scores, StepCache { row, qin, q, attn, ctx, c, xs, acts })
}

/// Backward of one step. Returns `(d obs_j, d h)`; accumulates parameter
/// adjoints into `g` and instruction adjoints into `ig`.
pub(crate) fn step_bwd(
    p: &PolicyParams,
    enc: &InstructionEncoding,
    cache: &StepCache,
    dlogits: &[f64],
    dvalue: f64,
    g: &mut PolicyParams,
    ig: &mut InstrGrads,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dm = p.d_model();
    let mut dc = vec![0.0; dm];
    let mut dh = vec![0.0; dm];
    let h = &cache.qin[dm..];

    // value head
    if dvalue != 0.0 {
        axpy(dvalue, &p.value_w[..dm], &mut dc);
        axpy(dvalue, &p.value_w[dm..], &mut dh);
        let gw = g.value_w.as_mut_slice();
        axpy(dvalue, &cache.c, &mut gw[..dm]);
        axpy(dvalue, h, &mut gw[dm..]);
        g.value_b.as_mut_slice()[0] += dvalue;
    }

    // scorer
    let mut dobs = Vec::with_capacity(cache.xs.len());
    for ((x, act), &dl) in cache.xs.iter().zip(&cache.acts).zip(dlogits) {
        let mut dob = vec![0.0; dm];
        if dl != 0.0 {
            axpy(dl, act, g.s2.as_mut_slice());
            let dz: Vec<f64> = p.s2.iter().zip(act).map(|(w, a)| if *a > 0.0 { dl * w } else { 0.0 }).collect();
            g.s1.add_outer(1.0, &dz, x);
            let dx = p.s1.vecmat(&dz);
            let o = &x[..dm];
            for i in 0..dm {
                dc[i] += dx[dm + i] * o[i];
                dob[i] = dx[i] + dx[dm + i] * cache.c[i];
            }
        }
        dobs.push(dob);
    }

    // attention
    g.wo.add_outer(1.0, &dc, &cache.ctx);
    let dctx = p.wo.vecmat(&dc);
    let dattn: Vec<f64> = enc.tokens.iter().map(|t| dot(&dctx, t)).collect();
    let dscores = softmax_bwd(&cache.attn, &dattn, 1.0);
    let scale = 1.0 / (dm as f64).sqrt();
    let mut dq = vec![0.0; dm];
    for ((ds, k), dk) in dscores.iter().zip(&enc.keys).zip(ig.d_keys.iter_mut()) {
        axpy(ds * scale, k, &mut dq);
        axpy(ds * scale, &cache.q, dk);
    }
    add_into(&dq, g.step_query.row_mut(cache.row));
    g.wq.add_outer(1.0, &dq, &cache.qin);
    let dqin = p.wq.vecmat(&dq);
    add_into(&dqin[..dm], &mut ig.d_cls_m);
    add_into(&dqin[dm..], &mut dh);
    (dobs, dh)
}

/// Scores every candidate observation at step `t` given the history `h`.
pub fn score_candidates(
    p: &PolicyParams,
    enc: &InstructionEncoding,
    h: &[f64],
    t: usize,
    obs: &[&[f64]],
) -> Result<StepScores> {
    let dm = p.d_model();
    if h.len() != dm {
        return Err(Error::shape("score_candidates", format!("h({})", h.len()), format!("d_model {dm}")));
    }
    if obs.is_empty() {
        return Err(Error::Empty("candidates"));
    }
    if let Some(o) = obs.iter().find(|o| o.len() != dm) {
        return Err(Error::shape("score_candidates", format!("candidate({})", o.len()), format!("d_model {dm}")));
    }
    Ok(step_fwd(p, enc, h, t, obs).0)
}

/// `−log softmax(logits)[target]` and its gradient.
pub fn il_loss(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!("target {target} out of {} candidates", logits.len())));
    }
    let mut g = softmax_slice(logits, 1.0);
    g[target] -= 1.0;
    Ok((-log_softmax_slice(logits)[target], g))
}

/// Discounted returns `R_t = Σ_k γ^k r_{t+k}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Actor-critic terms over one sampled trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct RlLoss {
    pub policy: f64,
    pub value: f64,
    pub total: f64,
    pub dlogits: Vec<Vec<f64>>,
    pub dvalues: Vec<f64>,
}

/// `Σ_t −log π(a_t)·(R_t − V_t) + c·Σ_t (R_t − V_t)²`, with the advantage held
/// constant in the policy term.
pub fn rl_loss(
    logits: &[Vec<f64>],
    actions: &[usize],
    values: &[f64],
    rewards: &[f64],
    gamma: f64,
    value_coef: f64,
) -> Result<RlLoss> {
    if rewards.len() != values.len() {
        return Err(Error::invalid(format!("rl_loss: {} rewards for {} values", rewards.len(), values.len())));
    }
    let returns = discounted_returns(rewards, gamma);
    let adv: Vec<f64> = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    rl_loss_with_advantages(logits, actions, values, &returns, &adv, value_coef)
}

/// As [`rl_loss`] with given returns and advantages.
pub(crate) fn rl_loss_with_advantages(
    logits: &[Vec<f64>],
    actions: &[usize],
    values: &[f64],
    returns: &[f64],
    advantages: &[f64],
    value_coef: f64,
) -> Result<RlLoss> {
    let n = actions.len();
    if logits.len() != n || values.len() != n || returns.len() != n || advantages.len() != n {
        return Err(Error::invalid(format!(
            "rl_loss length mismatch: {} logits, {n} actions, {} values, {} returns",
            logits.len(),
            values.len(),
            returns.len()
        )));
    }
    let mut policy = 0.0;
    let mut value = 0.0;
    let mut dlogits = Vec::with_capacity(n);
    let mut dvalues = Vec::with_capacity(n);
    for t in 0..n {
        let adv = advantages[t];
        let err = returns[t] - values[t];
        let (nll, g) = il_loss(&logits[t], actions[t])?;
        policy += nll * adv;
        value += err * err;
        dlogits.push(g.iter().map(|x| x * adv).collect());
        dvalues.push(-2.0 * value_coef * err);
    }
    Ok(RlLoss { policy, value, total: policy + value_coef * value, dlogits, dvalues })
}

/// The weighted objective and its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rl: f64,
    pub il: f64,
    pub contrast: f64,
    pub total: f64,
}

/// `L = L_RL + λ1·L_IL + λ2·L_c`; a non-finite part is an error naming it.
pub fn total_loss(rl: f64, il: f64, contrast: f64, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    for (name, v) in [("rl", rl), ("il", il), ("contrast", contrast)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown { rl, il, contrast, total: rl + lambda1 * il + lambda2 * contrast })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad_check, ParamSet};
    use crate::rng;
    use rand::Rng as _;

    fn setup() -> (PolicyParams, Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
        let mut r = rng::stream(3, "policy-test");
        let mut p = PolicyParams::init(6, 4, 5, 3, 4, 1.0, &mut r);
        p.value_w = crate::numeric::Vector::from_raw((0..8).map(|_| r.gen_range(-0.5..0.5)).collect());
        let tokens: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let h: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let obs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        (p, tokens, h, obs)
    }

    fn loss(p: &PolicyParams, tokens: &[Vec<f64>], h: &[f64], obs: &[Vec<f64>]) -> (f64, StepScores) {
        let enc = encode_fwd(p, tokens.to_vec());
        let o: Vec<&[f64]> = obs.iter().map(|v| v.as_slice()).collect();
        let (s, _) = step_fwd(p, &enc, h, 1, &o);
        (il_loss(&s.logits, 1).unwrap().0 + 0.7 * s.value, s)
    }

    #[test]
    fn attention_sums_to_one() {
        let (p, tokens, h, obs) = setup();
        let (_, s) = loss(&p, &tokens, &h, &obs);
        assert!((s.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_gradients() {
        let (p, tokens, h, obs) = setup();
        let enc = encode_fwd(&p, tokens.clone());
        let o: Vec<&[f64]> = obs.iter().map(|v| v.as_slice()).collect();
        let (s, cache) = step_fwd(&p, &enc, &h, 1, &o);
        let (_, dl) = il_loss(&s.logits, 1).unwrap();
        let mut g = p.zeros_like();
        let mut ig = InstrGrads::zeros(&enc);
        let (dobs, dh) = step_bwd(&p, &enc, &cache, &dl, 0.7, &mut g, &mut ig);
        encode_bwd(&enc, &ig, &mut g);

        let flat = p.flatten();
        let rep = finite_diff_grad_check(
            |x| {
                let mut q = p.clone();
                q.assign_flat(x);
                Ok(loss(&q, &tokens, &h, &obs).0)
            },
            &flat,
            &g.flatten(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");

        let rep = finite_diff_grad_check(|x| Ok(loss(&p, &tokens, x, &obs).0), &h, &dh, 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
        let flat_obs: Vec<f64> = obs.concat();
        let rep = finite_diff_grad_check(
            |x| {
                let o: Vec<Vec<f64>> = x.chunks(4).map(|c| c.to_vec()).collect();
                Ok(loss(&p, &tokens, &h, &o).0)
            },
            &flat_obs,
            &dobs.concat(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn il_cases() {
        let (l, g) = il_loss(&[0.0, 0.0], 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g, vec![-0.5, 0.5]);
        assert!(il_loss(&[0.0], 1).is_err());
    }

    #[test]
    fn returns_and_rl() {
        assert_eq!(discounted_returns(&[1.0, 0.0, 2.0], 0.5), vec![1.5, 1.0, 2.0]);
        let r = rl_loss(&[vec![0.0, 0.0]], &[0], &[0.5], &[2.0], 0.9, 0.5).unwrap();
        assert!((r.policy - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((r.value - 2.25).abs() < 1e-12);
        assert!((r.total - (r.policy + 0.5 * 2.25)).abs() < 1e-12);
        assert_eq!(r.dvalues, vec![-1.5]);
        assert!(rl_loss(&[vec![0.0]], &[0, 0], &[0.0], &[0.0], 0.9, 0.5).is_err());
    }

    #[test]
    fn total_loss_weights_and_errors() {
        let b = total_loss(1.0, 2.0, 3.0, 0.2, 1.0).unwrap();
        assert!((b.total - 4.4).abs() < 1e-12);
        let e = total_loss(1.0, f64::NAN, 0.0, 0.2, 1.0).unwrap_err().to_string();
        assert!(e.contains("il"), "{e}");
        let e = total_loss(1.0, 0.0, f64::INFINITY, 0.2, 1.0).unwrap_err().to_string();
        assert!(e.contains("contrast"), "{e}");
    }
}
