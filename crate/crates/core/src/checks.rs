//! Self-checks shared by the CLI and the test suites: the finite-difference
//! gradient suite over every differentiable module, and the adapter learning
//! check on instruction-conditioned synthetic batches.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

use crate::adapter::{mean_target_prob, rerank_ce_loss, AdapterParams, RerankExample, DEFAULT_ALPHA, DEFAULT_HIDDEN};
use crate::agent::policy::{encode_bwd, encode_fwd, step_bwd, step_fwd, InstrGrads};
use crate::agent::{
    build_dataset, build_resources, full_model_grad_check, il_loss, rl_loss, AgentConfig, AgentParams, Mode, PolicyParams,
};
use crate::coembed::{
    baseline_embed, baseline_embed_backward, embed_separate, embed_separate_backward, observation_contrast_loss,
    CoEmbedParams, DirectionFeature, EmbedMode, ObservationEmbedding,
};
use crate::concept::{concept_distribution, ConceptRepository};
use crate::embedding::{default_lexicon, EmbeddingProvider, SyntheticProvider, SyntheticProviderConfig, ViewImage};
use crate::error::Result;
use crate::numeric::{
    cosine_sim, cosine_sim_grad, finite_diff_grad_check, grad_check_params, layer_norm, layer_norm_backward,
    linear_backward, linear_forward, softmax_temp, softmax_temp_backward, sgd_step, GradCheckReport, LayerNormParams,
    Matrix, ParamSet, Vector, LN_EPS,
};
use crate::rng::{self, Rng};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// One row of the gradient report.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub check: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

fn rand_vec(r: &mut Rng, n: usize) -> Vector {
    Vector::from_raw((0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
}

fn rand_matrix(r: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let worse = if b.max_rel_error > a.max_rel_error { &b } else { &a };
    GradCheckReport {
        max_rel_error: worse.max_rel_error,
        worst_param_index: worse.worst_param_index,
        worst_block: worse.worst_block.clone(),
        checked: a.checked + b.checked,
        passed: a.passed && b.passed,
    }
}

struct Suite {
    entries: Vec<SuiteEntry>,
}

impl Suite {
    fn run(&mut self, module: &'static str, check: impl Into<String>, f: impl FnOnce() -> Result<GradCheckReport>) -> Result<()> {
        let t = Instant::now();
        let report = f()?;
        self.entries.push(SuiteEntry { module, check: check.into(), report, seconds: t.elapsed().as_secs_f64() });
        Ok(())
    }
}

/// Runs every gradient check at `eps`, `tol`. Errors are reserved for checks
/// that could not run; a failed comparison is a report with `passed == false`.
pub fn gradient_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut s = Suite { entries: Vec::new() };
    let mut r = rng::stream(seed, "gradcheck");

    // numeric kernels
    let (x, w, b, dy) = (rand_vec(&mut r, 5), rand_matrix(&mut r, 3, 5), rand_vec(&mut r, 3), rand_vec(&mut r, 3));
    s.run("numeric", "linear x, W, b", || {
        let g = linear_backward(&x, &w, &dy)?;
        let obj = |x: &Vector, w: &Matrix, b: &Vector| -> Result<f64> { Ok(linear_forward(x, w, Some(b))?.dot(&dy)) };
        let a = finite_diff_grad_check(|v| obj(&Vector::new(v.to_vec())?, &w, &b), &x, &g.dx, eps, tol)?;
        let c = finite_diff_grad_check(
            |v| obj(&x, &Matrix::new(3, 5, v.to_vec())?, &b),
            w.data(),
            g.dw.data(),
            eps,
            tol,
        )?;
        let d = finite_diff_grad_check(|v| obj(&x, &w, &Vector::new(v.to_vec())?), &b, &g.db, eps, tol)?;
        Ok(merge(merge(a, c), d))
    })?;
    let ln = LayerNormParams { gain: rand_vec(&mut r, 6), bias: rand_vec(&mut r, 6) };
    let (xl, dyl) = (rand_vec(&mut r, 6), rand_vec(&mut r, 6));
    s.run("numeric", "layer norm x, gain, bias", || {
        let (dx, dg, db) = layer_norm_backward(&xl, &ln, LN_EPS, &dyl)?;
        let obj = |x: &Vector, p: &LayerNormParams| -> Result<f64> { Ok(layer_norm(x, p, LN_EPS)?.dot(&dyl)) };
        let a = finite_diff_grad_check(|v| obj(&Vector::new(v.to_vec())?, &ln), &xl, &dx, eps, tol)?;
        let mut flat = ln.gain.to_vec();
        flat.extend_from_slice(&ln.bias);
        let mut an = dg.to_vec();
        an.extend_from_slice(&db);
        let c = finite_diff_grad_check(
            |v| {
                let p = LayerNormParams { gain: Vector::new(v[..6].to_vec())?, bias: Vector::new(v[6..].to_vec())? };
                obj(&xl, &p)
            },
            &flat,
            &an,
            eps,
            tol,
        )?;
        Ok(merge(a, c))
    })?;
    let (sc, dp) = (rand_vec(&mut r, 5), rand_vec(&mut r, 5));
    s.run("numeric", "softmax at tau 0.5", || {
        let p = softmax_temp(&sc, 0.5)?;
        let ds = softmax_temp_backward(&p, &dp, 0.5)?;
        finite_diff_grad_check(|v| Ok(softmax_temp(&Vector::new(v.to_vec())?, 0.5)?.dot(&dp)), &sc, &ds, eps, tol)
    })?;
    let (ca, cb) = (rand_vec(&mut r, 4), rand_vec(&mut r, 4));
    s.run("numeric", "cosine a, b", || {
        let (_, da, db) = cosine_sim_grad(&ca, &cb)?;
        let a = finite_diff_grad_check(|v| cosine_sim(&Vector::new(v.to_vec())?, &cb), &ca, &da, eps, tol)?;
        let c = finite_diff_grad_check(|v| cosine_sim(&ca, &Vector::new(v.to_vec())?), &cb, &db, eps, tol)?;
        Ok(merge(a, c))
    })?;

    // refining adapter
    let ap = AdapterParams::init(6, 8, 0.8, &mut r)?;
    let batch: Vec<RerankExample> = (0..3)
        .map(|i| RerankExample {
            image: rand_vec(&mut r, 6),
            cls: rand_vec(&mut r, 6),
            texts: (0..4).map(|_| rand_vec(&mut r, 6)).collect(),
            target: i % 4,
        })
        .collect();
    s.run("adapter", "refine + re-rank loss W1, W2", || {
        let (_, g) = rerank_ce_loss(&ap, &batch)?;
        grad_check_params(
            &ap,
            &g,
            |flat| {
                let mut q = ap.clone();
                q.assign_flat(flat);
                Ok(rerank_ce_loss(&q, &batch)?.0)
            },
            eps,
            tol,
        )
    })?;

    // co-embedding
    let mut cp = CoEmbedParams::init(5, 6, 4, 0.0, &mut r)?;
    cp.visit_mut(&mut |name, data| {
        if name.contains(".ln_") {
            data.iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
        }
    });
    let (v, u) = (rand_vec(&mut r, 5), rand_vec(&mut r, 6));
    let ea = DirectionFeature::from_angles(r.gen_range(-3.0..3.0), 0.3);
    let (wv, wa, wu) = (rand_vec(&mut r, 4), rand_vec(&mut r, 4), rand_vec(&mut r, 4));
    s.run("coembed", "separate branches params, u", || {
        let obj = |q: &CoEmbedParams, u: &Vector| -> Result<f64> {
            let e = embed_separate(&v, &ea, u, 1, q, EmbedMode::Eval)?;
            Ok(e.o_v.dot(&wv) + e.o_a.dot(&wa) + e.o_u.dot(&wu))
        };
        let (g, du) = embed_separate_backward(&v, &ea, &u, 1, &cp, &wv, &wa, &wu)?;
        let a = grad_check_params(
            &cp,
            &g,
            |flat| {
                let mut q = cp.clone();
                q.assign_flat(flat);
                obj(&q, &u)
            },
            eps,
            tol,
        )?;
        let c = finite_diff_grad_check(|x| obj(&cp, &Vector::new(x.to_vec())?), &u, &du, eps, tol)?;
        Ok(merge(a, c))
    })?;
    s.run("coembed", "fused baseline params", || {
        let g = baseline_embed_backward(&v, &ea, 1, &cp, &wv)?;
        grad_check_params(
            &cp,
            &g,
            |flat| {
                let mut q = cp.clone();
                q.assign_flat(flat);
                Ok(baseline_embed(&v, &ea, 1, &q, EmbedMode::Eval)?.dot(&wv))
            },
            eps,
            tol,
        )
    })?;
    let n = 3;
    let flat: Vec<f64> = (0..2 * n * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
    s.run("coembed", "observation contrast o^V, o^u (N = 3)", || {
        let build = |x: &[f64]| -> Vec<ObservationEmbedding> {
            (0..n)
                .map(|i| ObservationEmbedding::assemble(x[8 * i..8 * i + 4].to_vec(), vec![0.0; 4], x[8 * i + 4..8 * i + 8].to_vec()))
                .collect()
        };
        let out = observation_contrast_loss(&build(&flat), 0.5)?;
        let mut analytic = Vec::new();
        for i in 0..n {
            analytic.extend_from_slice(&out.d_o_vis[i]);
            analytic.extend_from_slice(&out.d_o_u[i]);
        }
        finite_diff_grad_check(|x| Ok(observation_contrast_loss(&build(x), 0.5)?.loss), &flat, &analytic, eps, tol)
    })?;

    // policy
    let pp = PolicyParams::init(6, 4, 5, 3, 4, 1.0, &mut r);
    let tokens: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut r, 6).into_inner()).collect();
    let h = rand_vec(&mut r, 4).into_inner();
    let obs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut r, 4).into_inner()).collect();
    s.run("policy", "attention + scorer + value head", || {
        let loss = |p: &PolicyParams, h: &[f64], obs: &[Vec<f64>]| -> Result<f64> {
            let enc = encode_fwd(p, tokens.clone());
            let o: Vec<&[f64]> = obs.iter().map(|v| v.as_slice()).collect();
            let (sc, _) = step_fwd(p, &enc, h, 1, &o);
            Ok(il_loss(&sc.logits, 1)?.0 + 0.7 * sc.value)
        };
        let enc = encode_fwd(&pp, tokens.clone());
        let o: Vec<&[f64]> = obs.iter().map(|v| v.as_slice()).collect();
        let (sc, cache) = step_fwd(&pp, &enc, &h, 1, &o);
        let (_, dl) = il_loss(&sc.logits, 1)?;
        let mut g = pp.zeros_like();
        let mut ig = InstrGrads::zeros(&enc);
        let (dobs, dh) = step_bwd(&pp, &enc, &cache, &dl, 0.7, &mut g, &mut ig);
        encode_bwd(&enc, &ig, &mut g);
        let a = grad_check_params(
            &pp,
            &g,
            |x| {
                let mut q = pp.clone();
                q.assign_flat(x);
                loss(&q, &h, &obs)
            },
            eps,
            tol,
        )?;
        let b = finite_diff_grad_check(|x| loss(&pp, x, &obs), &h, &dh, eps, tol)?;
        let c = finite_diff_grad_check(
            |x| loss(&pp, &h, &x.chunks(4).map(|c| c.to_vec()).collect::<Vec<_>>()),
            &obs.concat(),
            &dobs.concat(),
            eps,
            tol,
        )?;
        Ok(merge(merge(a, b), c))
    })?;
    let logits: Vec<f64> = rand_vec(&mut r, 4).into_inner();
    s.run("policy", "imitation loss logits", || {
        let (_, g) = il_loss(&logits, 2)?;
        finite_diff_grad_check(|x| Ok(il_loss(x, 2)?.0), &logits, &g, eps, tol)
    })?;
    let rl_logits: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut r, 3).into_inner()).collect();
    let values: Vec<f64> = rand_vec(&mut r, 3).into_inner();
    let rewards = [0.5, -1.0, 2.0];
    s.run("policy", "actor-critic loss logits, values", || {
        let actions = [0, 2, 1];
        let base = rl_loss(&rl_logits, &actions, &values, &rewards, 0.9, 0.5)?;
        let adv: Vec<f64> = crate::agent::discounted_returns(&rewards, 0.9)
            .iter()
            .zip(&values)
            .map(|(r, v)| r - v)
            .collect();
        let mut flat = rl_logits.concat();
        flat.extend_from_slice(&values);
        let mut analytic = base.dlogits.concat();
        analytic.extend_from_slice(&base.dvalues);
        let returns = crate::agent::discounted_returns(&rewards, 0.9);
        finite_diff_grad_check(
            |x| {
                let lg: Vec<Vec<f64>> = x[..9].chunks(3).map(|c| c.to_vec()).collect();
                let out = crate::agent::policy::rl_loss_with_advantages(&lg, &actions, &x[9..], &returns, &adv, 0.5)?;
                Ok(out.total)
            },
            &flat,
            &analytic,
            eps,
            tol,
        )
    })?;

    // the whole agent, per ablation mode
    for mode in Mode::ALL {
        let c = AgentConfig::tiny(seed, mode);
        let data = build_dataset(&c)?;
        let res = build_resources(&c, &data)?;
        let params = AgentParams::init(&c)?;
        s.run("agent", format!("full objective, mode {mode}"), || {
            full_model_grad_check(&c, &data, &res, &params, 0, eps, tol)
        })?;
    }
    Ok(s.entries)
}

/// Mean re-ranked probability of the ground-truth label before and after
/// adapter training.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AdapterLearning {
    pub before: f64,
    pub after: f64,
    pub examples: usize,
}

struct CheckView(String, String);

impl ViewImage for CheckView {
    fn image_id(&self) -> &str {
        &self.0
    }
    fn planted_label(&self) -> Option<&str> {
        Some(&self.1)
    }
}

/// Batches where the instruction's cls feature is the text feature of the
/// ground-truth label and the image is a noisy view of it; trains the adapter
/// with plain SGD on the re-ranking cross-entropy.
pub fn adapter_learning_check(seed: u64, steps: usize, lr: f64, batch_size: usize) -> Result<AdapterLearning> {
    let provider = SyntheticProvider::new(SyntheticProviderConfig { seed, noise_sigma: 0.8, ..Default::default() })?;
    let lexicon = default_lexicon();
    let repo = ConceptRepository::from_labels(&lexicon, &provider)?;
    let mut r = rng::stream(seed, "adapter-check");
    let k = 5;
    let mut examples = Vec::new();
    let mut i = 0;
    while examples.len() < 64 {
        let label = lexicon.choose(&mut r).expect("lexicon").clone();
        let image = provider.image_embed(&CheckView(format!("check/{seed}/{i}"), label.clone()))?;
        i += 1;
        let probs = concept_distribution(&image, &repo, 0.5)?;
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        order.truncate(k);
        let Some(target) = order.iter().position(|&j| repo.concepts()[j].label == label) else {
            continue;
        };
        examples.push(RerankExample {
            image,
            cls: provider.text_embed(&label)?,
            texts: order.iter().map(|&j| repo.concepts()[j].text_feature.clone()).collect(),
            target,
        });
    }
    let mut p = AdapterParams::init(provider.dim(), DEFAULT_HIDDEN, DEFAULT_ALPHA, &mut rng::stream(seed, "init"))?;
    let before = mean_target_prob(&p, &examples)?;
    for step in 0..steps {
        let start = (step * batch_size) % examples.len();
        let batch: Vec<RerankExample> =
            (0..batch_size).map(|j| examples[(start + j) % examples.len()].clone()).collect();
        let (_, g) = rerank_ce_loss(&p, &batch)?;
        sgd_step(&mut p, &g, |_| lr, step)?;
    }
    let after = mean_target_prob(&p, &examples)?;
    Ok(AdapterLearning { before, after, examples: examples.len() })
}
