//! One episode through the model: observation features, per-step scoring,
//! history accumulation, and the matching backward pass.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{AgentConfig, Mode};
use super::params::AgentParams;
use super::policy::{encode_bwd, step_bwd, step_fwd, InstrGrads, InstructionEncoding, StepCache, StepScores};
use super::train::TraceObject;
use crate::adapter::{refine_bwd, refine_fwd, rerank_bwd, rerank_fwd, RefineCache, RerankCache};
use crate::coembed::{
    contrast_fwd_bwd, fused_bwd, fused_fwd, separate_bwd, separate_fwd, ContrastOutput, DirectionFeature, EmbedMode,
    FusedCache, ObservationEmbedding, SeparateCache, CONTRAST_NORM_FLOOR, SLOT_NAVIGABLE, SLOT_NON_NAVIGABLE, SLOT_STOP,
    TYPE_HISTORY, TYPE_VISUAL,
};
use crate::concept::{
    concept_distribution, map_action_concept, topk_indices, ActionConcept, ConceptRepository, Direction, PhraseCache,
};
use crate::embedding::{EmbeddingProvider, Provider};
use crate::error::{Error, Result};
use crate::numeric::tensor::{add_into, axpy, dot, norm};
use crate::rng::Rng;
use crate::world::{panorama_at, step, Episode, NavState, Panorama, World};

/// Frozen features of one view: navigator feature, image embedding and its
/// top-k concepts.
#[derive(Clone, Debug)]
struct ViewBase {
    v: Vec<f64>,
    f: Vec<f64>,
    /// Repository index and mapping probability, descending.
    topk: Vec<(usize, f64)>,
}

/// Provider, concept repository and memoised frozen features.
pub struct Resources {
    pub provider: Provider,
    pub repo: ConceptRepository,
    phrases: PhraseCache,
    views: RwLock<HashMap<(String, usize), Arc<Vec<ViewBase>>>>,
    stop_phrase: Vec<f64>,
    tau: f64,
    k: usize,
}

impl Resources {
    pub fn new(provider: Provider, repo: ConceptRepository, config: &AgentConfig) -> Result<Self> {
        if repo.concepts().iter().any(|c| c.text_feature.len() != provider.dim()) {
            return Err(Error::invalid("concept repository was built with a different provider dim"));
        }
        if config.top_k > repo.len() {
            return Err(Error::invalid(format!("top_k {} exceeds repository size {}", config.top_k, repo.len())));
        }
        let stop_phrase = provider.text_embed(ActionConcept::Stop.phrase())?.into_inner();
        Ok(Resources {
            provider,
            repo,
            phrases: PhraseCache::new(),
            views: RwLock::new(HashMap::new()),
            stop_phrase,
            tau: config.concept_tau,
            k: config.top_k,
        })
    }

    fn node_views(&self, pano: &Panorama, world: &World) -> Result<Arc<Vec<ViewBase>>> {
        let key = (world.id.clone(), pano.node);
        if let Some(v) = self.views.read().expect("view cache lock").get(&key) {
            return Ok(v.clone());
        }
        let labels: Vec<&str> = self.repo.labels().collect();
        let bases = pano
            .views
            .iter()
            .map(|view| {
                let f = self.provider.image_embed(view)?;
                let probs = concept_distribution(&f, &self.repo, self.tau)?;
                let topk = topk_indices(&probs, &labels, self.k).into_iter().map(|i| (i, probs[i])).collect();
                let v = self.provider.visual_feature(view)?;
                Ok(ViewBase { v: v.into_inner(), f: f.into_inner(), topk })
            })
            .collect::<Result<Vec<_>>>()?;
        let bases = Arc::new(bases);
        self.views.write().expect("view cache lock").insert(key, bases.clone());
        Ok(bases)
    }

    fn phrase(&self, action: ActionConcept, label: &str) -> Result<Vec<f64>> {
        Ok(self.phrases.get(action, label, &self.provider)?.into_inner())
    }
}

enum Embedded {
    Separate(ObservationEmbedding, SeparateCache),
    Fused(Vec<f64>, FusedCache),
}

impl Embedded {
    fn o_prime(&self) -> &[f64] {
        match self {
            Embedded::Separate(e, _) => &e.o_prime,
            Embedded::Fused(v, _) => v,
        }
    }
}

struct Refined {
    refined: Vec<f64>,
    refine: RefineCache,
    rerank: RerankCache,
}

/// One embedded view (or the stop candidate).
pub(crate) struct ObsRecord {
    view: Option<usize>,
    v: Vec<f64>,
    e_a: DirectionFeature,
    slot: usize,
    action: ActionConcept,
    /// Repository indices and unrefined probabilities.
    topk: Vec<(usize, f64)>,
    refined: Option<Refined>,
    /// Weights applied to the phrase features.
    weights: Vec<f64>,
    phrases: Vec<Vec<f64>>,
    /// Text features of the top-k concepts, kept for re-ranking backward.
    texts: Vec<Vec<f64>>,
    u: Option<Vec<f64>>,
    emb: Embedded,
}

impl ObsRecord {
    pub fn view(&self) -> Option<usize> {
        self.view
    }

    pub fn action(&self) -> ActionConcept {
        self.action
    }

    /// Weights applied to the top-k phrase features.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The actional concept feature `ũ`, if concepts are on.
    pub fn concept_feature(&self) -> Option<&[f64]> {
        self.u.as_deref()
    }

    /// `(repository index, p, p̃)` per top-k concept.
    pub fn objects(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.topk
            .iter()
            .enumerate()
            .map(|(j, &(i, p))| (i, p, self.refined.as_ref().map(|_| self.weights[j])))
            .collect()
    }
}

pub(crate) struct StepRecord {
    pub pano: Panorama,
    pub obs: Vec<ObsRecord>,
    /// Index into `obs` for each candidate, stop last.
    pub cand_obs: Vec<usize>,
    contrast: Option<(Vec<usize>, ContrastOutput)>,
    pub scores: StepScores,
    cache: StepCache,
    pub chosen: usize,
    hist: Option<Embedded>,
}

pub(crate) struct Trajectory {
    pub enc: InstructionEncoding,
    pub steps: Vec<StepRecord>,
    pub state: NavState,
}

impl Trajectory {
    pub fn contrast_loss(&self) -> f64 {
        self.steps.iter().filter_map(|s| s.contrast.as_ref().map(|c| c.1.loss)).sum()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.chosen).collect()
    }
}

/// How each step's candidate is picked.
pub(crate) enum Chooser<'a> {
    Teacher,
    Greedy,
    Sample(&'a mut Rng),
    Replay(&'a [usize]),
}

fn embed(
    params: &AgentParams,
    mode: Mode,
    v: &[f64],
    e_a: &DirectionFeature,
    u: Option<&[f64]>,
    slot: usize,
    kind: usize,
    em: &mut EmbedMode,
) -> Embedded {
    if mode == Mode::Baseline {
        let (o, c) = fused_fwd(&params.coembed, v, e_a, slot, kind, em);
        Embedded::Fused(o, c)
    } else {
        let (o, c) = separate_fwd(&params.coembed, v, e_a, u, slot, kind, em);
        Embedded::Separate(o, c)
    }
}

#[allow(clippy::too_many_arguments)]
fn observe_view(
    res: &Resources,
    config: &AgentConfig,
    params: &AgentParams,
    pano: &Panorama,
    base: &ViewBase,
    index: usize,
    cls_p: &[f64],
    em: &mut EmbedMode,
) -> Result<ObsRecord> {
    let view = &pano.views[index];
    let e_a = if config.relative_heading {
        DirectionFeature::from_relative(view.relative)
    } else {
        DirectionFeature::from_angles(view.direction.heading(), view.direction.elevation())
    };
    let slot = if view.target.is_some() { SLOT_NAVIGABLE } else { SLOT_NON_NAVIGABLE };
    let action = map_action_concept(view.relative)?;
    let mode = config.mode;
    let mut refined = None;
    let mut weights = Vec::new();
    let mut phrases = Vec::new();
    let mut texts = Vec::new();
    let mut u = None;
    if mode.uses_concepts() {
        let concepts = res.repo.concepts();
        for &(i, _) in &base.topk {
            phrases.push(res.phrase(action, &concepts[i].label)?);
        }
        if mode.uses_refine() {
            let (r, rc) = refine_fwd(&base.f, cls_p, &params.adapter);
            texts = base.topk.iter().map(|&(i, _)| concepts[i].text_feature.to_vec()).collect();
            let tr: Vec<&[f64]> = texts.iter().map(|v| v.as_slice()).collect();
            let (pt, rr) = rerank_fwd(&r, &tr, config.rerank_temperature);
            weights = pt;
            refined = Some(Refined { refined: r, refine: rc, rerank: rr });
        } else {
            weights = base.topk.iter().map(|&(_, p)| p).collect();
            if config.renormalize_topk {
                let z: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= z);
            }
        }
        let mut acc = vec![0.0; res.provider.dim()];
        for (w, e) in weights.iter().zip(&phrases) {
            axpy(*w, e, &mut acc);
        }
        u = Some(acc);
    }
    let emb = embed(params, mode, &base.v, &e_a, u.as_deref(), slot, TYPE_VISUAL, em);
    Ok(ObsRecord {
        view: Some(index),
        v: base.v.clone(),
        e_a,
        slot,
        action,
        topk: base.topk.clone(),
        refined,
        weights,
        phrases,
        texts,
        u,
        emb,
    })
}

fn observe_stop(res: &Resources, config: &AgentConfig, params: &AgentParams, em: &mut EmbedMode) -> ObsRecord {
    let dim = res.provider.dim();
    let v = vec![0.0; dim];
    let e_a = DirectionFeature::zero();
    let u = config.mode.uses_concepts().then(|| res.stop_phrase.clone());
    let emb = embed(params, config.mode, &v, &e_a, u.as_deref(), SLOT_STOP, TYPE_VISUAL, em);
    ObsRecord {
        view: None,
        v,
        e_a,
        slot: SLOT_STOP,
        action: ActionConcept::Stop,
        topk: Vec::new(),
        refined: None,
        weights: Vec::new(),
        phrases: Vec::new(),
        texts: Vec::new(),
        u,
        emb,
    }
}

fn choose(chooser: &mut Chooser, t: usize, probs: &[f64], pano: &Panorama, episode: &Episode) -> Result<usize> {
    Ok(match chooser {
        Chooser::Teacher => match episode.gt_path.get(t + 1) {
            Some(&next) => pano
                .candidate_to(next)
                .ok_or_else(|| Error::invalid(format!("episode {}: gt step {t} is not a candidate", episode.id)))?,
            None => pano.stop_index(),
        },
        Chooser::Greedy => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            best
        }
        Chooser::Sample(rng) => {
            let x: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if x < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
        Chooser::Replay(actions) => *actions
            .get(t)
            .ok_or_else(|| Error::invalid(format!("replay has no action for step {t}")))?,
    })
}

/// Runs one episode. `with_contrast` also embeds non-navigable views and
/// computes the observation contrast at every step.
pub(crate) fn rollout(
    res: &Resources,
    config: &AgentConfig,
    params: &AgentParams,
    world: &World,
    episode: &Episode,
    mut chooser: Chooser,
    with_contrast: bool,
    dropout: Option<&mut Rng>,
) -> Result<Trajectory> {
    if world.id != episode.world_id {
        return Err(Error::invalid(format!("episode {} is for world {:?}, got {:?}", episode.id, episode.world_id, world.id)));
    }
    let texts = episode.step_texts();
    let enc = super::policy::encode_instruction(&texts, &res.provider, &params.policy)?;
    let mut em = match dropout {
        Some(r) => EmbedMode::Train(r),
        None => EmbedMode::Eval,
    };
    let contrast_on = with_contrast && config.mode.uses_contrast();
    let max_steps = match chooser {
        Chooser::Teacher => episode.gt_path.len(),
        _ => config.max_steps,
    };
    let dm = config.d_model;
    let mut h = vec![0.0; dm];
    let mut steps = Vec::new();
    let mut state = NavState::new(episode.start, episode.start_heading);
    while !state.stopped && steps.len() < max_steps {
        let t = steps.len();
        let pano = panorama_at(world, state.node, state.prev_selected)?;
        let bases = res.node_views(&pano, world)?;
        let mut obs = Vec::new();
        let mut view_obs = vec![usize::MAX; pano.views.len()];
        for (i, view) in pano.views.iter().enumerate() {
            if view.target.is_some() || contrast_on {
                view_obs[i] = obs.len();
                obs.push(observe_view(res, config, params, &pano, &bases[i], i, &enc.cls_p, &mut em)?);
            }
        }
        let stop_obs = obs.len();
        obs.push(observe_stop(res, config, params, &mut em));
        let cand_obs: Vec<usize> = pano
            .candidates
            .iter()
            .map(|c| c.view.map_or(stop_obs, |v| view_obs[v]))
            .collect();

        let contrast = if contrast_on {
            let idx: Vec<usize> = (0..stop_obs)
                .filter(|&i| match &obs[i].emb {
                    Embedded::Separate(e, _) => norm(&e.o_vis) >= CONTRAST_NORM_FLOOR && norm(&e.o_u) >= CONTRAST_NORM_FLOOR,
                    Embedded::Fused(..) => false,
                })
                .collect();
            let ov: Vec<&[f64]> = idx.iter().map(|&i| sep(&obs[i]).o_vis.as_slice()).collect();
            let ou: Vec<&[f64]> = idx.iter().map(|&i| sep(&obs[i]).o_u.as_slice()).collect();
            let out = contrast_fwd_bwd(&ov, &ou, config.contrast_tau);
            Some((idx, out))
        } else {
            None
        };

        let cand_vecs: Vec<&[f64]> = cand_obs.iter().map(|&i| obs[i].emb.o_prime()).collect();
        let (scores, cache) = step_fwd(&params.policy, &enc, &h, t, &cand_vecs);
        let chosen = choose(&mut chooser, t, &scores.probs, &pano, episode)?;
        if chosen >= pano.candidates.len() {
            return Err(Error::invalid(format!("chosen candidate {chosen} out of {}", pano.candidates.len())));
        }
        let next = step(world, &state, &pano, chosen)?;
        let hist = if pano.candidates[chosen].is_stop() {
            None
        } else {
            let o = &obs[cand_obs[chosen]];
            let e = embed(params, config.mode, &o.v, &o.e_a, o.u.as_deref(), o.slot, TYPE_HISTORY, &mut em);
            let n = (t + 1) as f64;
            h.iter_mut().for_each(|x| *x *= t as f64 / n);
            axpy(1.0 / n, e.o_prime(), &mut h);
            Some(e)
        };
        steps.push(StepRecord { pano, obs, cand_obs, contrast, scores, cache, chosen, hist });
        state = next;
    }
    Ok(Trajectory { enc, steps, state })
}

fn sep(o: &ObsRecord) -> &ObservationEmbedding {
    match &o.emb {
        Embedded::Separate(e, _) => e,
        Embedded::Fused(..) => unreachable!("contrast only runs on separate embeddings"),
    }
}

/// Backward of an episode for upstream gradients on each step's logits and
/// value; the contrast terms enter with weight `contrast_scale`. Accumulates
/// into `g`.
pub(crate) fn backward(
    config: &AgentConfig,
    params: &AgentParams,
    traj: &Trajectory,
    dlogits: &[Vec<f64>],
    dvalues: &[f64],
    contrast_scale: f64,
    g: &mut AgentParams,
) -> Result<()> {
    let n = traj.steps.len();
    if dlogits.len() != n || dvalues.len() != n {
        return Err(Error::invalid(format!("backward: {n} steps, {} logit and {} value adjoints", dlogits.len(), dvalues.len())));
    }
    let dm = config.d_model;
    let dim = params.policy.text_dim();
    let mut ig = InstrGrads::zeros(&traj.enc);
    let mut dh_next = vec![0.0; dm];
    for t in (0..n).rev() {
        let s = &traj.steps[t];
        let (dcand, mut dh) = step_bwd(&params.policy, &traj.enc, &s.cache, &dlogits[t], dvalues[t], &mut g.policy, &mut ig);

        // h_{t+1} = (t·h_t + hist_t)/(t+1)
        let mut du_hist = None;
        let chosen_obs = s.cand_obs[s.chosen];
        if let Some(e) = &s.hist {
            let tf = t as f64;
            axpy(tf / (tf + 1.0), &dh_next, &mut dh);
            let dhist: Vec<f64> = dh_next.iter().map(|x| x / (tf + 1.0)).collect();
            if dhist.iter().any(|x| *x != 0.0) {
                du_hist = Some(embedded_bwd(params, e, &dhist, &dhist, &dhist, &mut g.coembed, dim));
            }
        }

        let mut d_prime = vec![vec![0.0; dm]; s.obs.len()];
        for (c, d) in s.cand_obs.iter().zip(&dcand) {
            add_into(d, &mut d_prime[*c]);
        }
        let mut d_vis = d_prime.clone();
        let mut d_u = d_prime;
        if let Some((idx, out)) = &s.contrast {
            if contrast_scale != 0.0 {
                for (k, &i) in idx.iter().enumerate() {
                    axpy(contrast_scale, &out.d_o_vis[k], &mut d_vis[i]);
                    axpy(contrast_scale, &out.d_o_u[k], &mut d_u[i]);
                }
            }
        }
        for (i, o) in s.obs.iter().enumerate() {
            let active = d_vis[i].iter().chain(&d_u[i]).any(|x| *x != 0.0);
            let extra = if i == chosen_obs { du_hist.as_ref() } else { None };
            if !active && extra.is_none() {
                continue;
            }
            let mut du = if active {
                embedded_bwd(params, &o.emb, &d_vis[i], &d_vis[i], &d_u[i], &mut g.coembed, dim)
            } else {
                vec![0.0; dim]
            };
            if let Some(x) = extra {
                add_into(x, &mut du);
            }
            if o.u.is_none() || o.weights.is_empty() {
                continue;
            }
            let dw: Vec<f64> = o.phrases.iter().map(|e| dot(&du, e)).collect();
            if let Some(r) = &o.refined {
                let texts: Vec<&[f64]> = o.texts.iter().map(|v| v.as_slice()).collect();
                let mut dr = vec![0.0; dim];
                rerank_bwd(&r.rerank, &r.refined, &texts, &dw, &mut dr);
                let (_, dcls) = refine_bwd(&r.refine, &params.adapter, &dr, &mut g.adapter);
                add_into(&dcls, &mut ig.d_cls_p);
            }
        }
        dh_next = dh;
    }
    encode_bwd(&traj.enc, &ig, &mut g.policy);
    Ok(())
}

fn embedded_bwd(
    params: &AgentParams,
    e: &Embedded,
    d_o_v: &[f64],
    d_o_a: &[f64],
    d_o_u: &[f64],
    g: &mut crate::coembed::CoEmbedParams,
    dim: usize,
) -> Vec<f64> {
    match e {
        Embedded::Separate(_, c) => separate_bwd(&params.coembed, c, d_o_v, d_o_a, d_o_u, g),
        Embedded::Fused(_, c) => {
            fused_bwd(&params.coembed, c, d_o_v, g);
            vec![0.0; dim]
        }
    }
}

/// Concept reading of one view: its action concept relative to the previous
/// heading and its top-k object concepts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReading {
    pub world_id: String,
    pub node: usize,
    pub view: usize,
    pub image_id: String,
    pub planted_label: String,
    pub action: ActionConcept,
    /// `p` from concept mapping; `p_tilde` from re-ranking when an
    /// instruction is given.
    pub objects: Vec<TraceObject>,
    /// The actional concept feature built from the weights in use.
    pub feature: Vec<f64>,
}

/// Reads view `view` at `node` the way the agent sees it. With an
/// instruction the adapter re-ranks the top-k and `ũ` uses `p̃`; without
/// one `ũ` uses `p`.
#[allow(clippy::too_many_arguments)]
pub fn read_view(
    res: &Resources,
    config: &AgentConfig,
    params: &AgentParams,
    world: &World,
    node: usize,
    prev: Direction,
    view: usize,
    instruction: Option<&[String]>,
) -> Result<ViewReading> {
    let pano = panorama_at(world, node, prev)?;
    if view >= pano.views.len() {
        return Err(Error::invalid(format!("node {node} has {} views, no view {view}", pano.views.len())));
    }
    let bases = res.node_views(&pano, world)?;
    let (mode, cls) = match instruction {
        Some(steps) => (Mode::Full, super::policy::encode_instruction(steps, &res.provider, &params.policy)?.cls_p),
        None => (Mode::WithoutRefine, vec![0.0; res.provider.dim()]),
    };
    let cfg = AgentConfig { mode, ..config.clone() };
    let o = observe_view(res, &cfg, params, &pano, &bases[view], view, &cls, &mut EmbedMode::Eval)?;
    let labels: Vec<&str> = res.repo.labels().collect();
    Ok(ViewReading {
        world_id: world.id.clone(),
        node,
        view,
        image_id: pano.views[view].image_id.clone(),
        planted_label: pano.views[view].label.clone(),
        action: o.action(),
        objects: o
            .objects()
            .into_iter()
            .map(|(i, p, p_tilde)| TraceObject { label: labels[i].to_string(), p, p_tilde })
            .collect(),
        feature: o.concept_feature().expect("concepts on").to_vec(),
    })
}
