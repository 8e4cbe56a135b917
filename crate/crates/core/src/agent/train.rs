use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::AgentConfig;
use super::params::AgentParams;
use super::policy::{discounted_returns, il_loss, rl_loss_with_advantages, total_loss, LossBreakdown, StepScores};
use super::rollout::{backward, rollout, Chooser, Resources, Trajectory};
use crate::concept::{build_repository, ActionConcept, ActionalAtomicConcept};
use crate::embedding::{make_synthetic, Provider};
use crate::error::{Error, Result};
use crate::numeric::{grad_check_params, sgd_step, GradCheckReport, ParamSet, Vector};
use crate::rng;
use crate::world::{
    aggregate_metrics, evaluate_trajectory, generate_episodes, generate_world_with, AggregateMetrics, Episode, NavMetrics,
    Split, TrajectoryRecord, TrajectoryStep, World, WorldSpec,
};

/// Generated worlds and episodes for one run.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_worlds: Vec<World>,
    pub unseen_worlds: Vec<World>,
    pub train: Vec<Episode>,
    pub val_seen: Vec<Episode>,
    pub val_unseen: Vec<Episode>,
}

impl Dataset {
    pub fn worlds(&self) -> impl Iterator<Item = &World> {
        self.train_worlds.iter().chain(&self.unseen_worlds)
    }

    pub fn split(&self, split: Split) -> &[Episode] {
        match split {
            Split::Train => &self.train,
            Split::ValSeenLike => &self.val_seen,
            Split::ValUnseenLike => &self.val_unseen,
        }
    }
}

fn spread(total: usize, parts: usize, i: usize) -> usize {
    total / parts + usize::from(i < total % parts)
}

/// Worlds and episodes from the config. Unseen-like worlds use fresh seeds
/// and put the held-out labels on their distractor views.
pub fn build_dataset(config: &AgentConfig) -> Result<Dataset> {
    let d = &config.data;
    let lexicon = &config.provider.lexicon;
    let split_at = lexicon.len() - d.heldout_labels;
    let rooms: Vec<String> = lexicon[..split_at].to_vec();
    let heldout: Vec<String> = lexicon[split_at..].to_vec();
    let world = |name: &str, i: usize, distractors: &[String]| {
        generate_world_with(&WorldSpec {
            id: format!("{name}{i}"),
            seed: rng::mix(rng::stream_seed(config.seed, name) ^ i as u64),
            n_nodes: d.nodes_per_world,
            n_levels: d.levels,
            room_lexicon: rooms.clone(),
            distractor_lexicon: distractors.to_vec(),
            palette: d.palette,
            target_degree: d.target_degree,
        })
    };
    let train_worlds = (0..d.train_worlds).map(|i| world("train", i, &rooms)).collect::<Result<Vec<_>>>()?;
    let unseen_distractors = if heldout.is_empty() { rooms.clone() } else { heldout };
    let unseen_worlds = (0..d.val_worlds)
        .map(|i| world("unseen", i, &unseen_distractors))
        .collect::<Result<Vec<_>>>()?;
    let episodes = |worlds: &[World], total: usize, split: Split| -> Result<Vec<Episode>> {
        let mut out = Vec::new();
        for (i, w) in worlds.iter().enumerate() {
            let n = spread(total, worlds.len(), i);
            out.extend(generate_episodes(w, rng::stream_seed(config.seed, split.name()), n, d.max_path_len, split)?);
        }
        Ok(out)
    };
    let train = episodes(&train_worlds, d.train_episodes, Split::Train)?;
    let val_seen = episodes(&train_worlds, d.val_episodes, Split::ValSeenLike)?;
    let val_unseen = if unseen_worlds.is_empty() {
        Vec::new()
    } else {
        episodes(&unseen_worlds, d.val_episodes, Split::ValUnseenLike)?
    };
    Ok(Dataset { train_worlds, unseen_worlds, train, val_seen, val_unseen })
}

/// Synthetic provider plus a concept repository built from the training
/// instructions.
pub fn build_resources(config: &AgentConfig, data: &Dataset) -> Result<Resources> {
    let provider = Provider::Synthetic(make_synthetic(config.provider.clone())?);
    let corpus: Vec<String> = data.train.iter().map(Episode::text).collect();
    let repo = build_repository(&corpus, &config.provider.lexicon, &provider)?;
    Resources::new(provider, repo, config)
}

fn world_index<'a>(worlds: &[&'a World]) -> HashMap<&'a str, usize> {
    worlds.iter().enumerate().map(|(i, w)| (w.id.as_str(), i)).collect()
}

fn find_world<'a>(index: &HashMap<&str, usize>, worlds: &[&'a World], ep: &Episode) -> Result<&'a World> {
    index
        .get(ep.world_id.as_str())
        .map(|&i| worlds[i])
        .ok_or_else(|| Error::invalid(format!("episode {} refers to unknown world {:?}", ep.id, ep.world_id)))
}

/// Per-step rewards of a trajectory: distance reduction for moves, a
/// terminal bonus or penalty for stopping. Running out of steps counts as
/// stopping where the agent ends up.
fn rewards(traj: &Trajectory, world: &World, episode: &Episode, config: &AgentConfig) -> Vec<f64> {
    let terminal = |node: usize| {
        if world.distance(node, episode.goal) <= config.success_radius {
            config.success_bonus
        } else {
            -config.success_bonus
        }
    };
    let mut r: Vec<f64> = traj
        .steps
        .iter()
        .map(|s| {
            let here = world.distance(s.pano.node, episode.goal);
            match s.pano.candidates[s.chosen].target {
                Some(next) => here - world.distance(next, episode.goal),
                None => terminal(s.pano.node),
            }
        })
        .collect();
    if let Some(last) = traj.steps.last() {
        if let Some(next) = last.pano.candidates[last.chosen].target {
            *r.last_mut().expect("nonempty") += terminal(next);
        }
    }
    r
}

struct EpisodeGrad {
    losses: LossBreakdown,
    grads: AgentParams,
}

/// Teacher-forced imitation and contrast, plus (optionally) a sampled
/// actor-critic pass. `replay` fixes the sampled actions and `fixed_adv` the
/// advantages; both exist for gradient checking.
#[allow(clippy::too_many_arguments)]
fn episode_grad(
    res: &Resources,
    config: &AgentConfig,
    params: &AgentParams,
    world: &World,
    episode: &Episode,
    mut dropout: Option<&mut rng::Rng>,
    sample_rng: Option<&mut rng::Rng>,
    replay: Option<(&[usize], &[f64])>,
) -> Result<EpisodeGrad> {
    let mut grads = params.zeros_like();
    let lambda2 = config.effective_lambda2();

    let teach = rollout(res, config, params, world, episode, Chooser::Teacher, true, dropout.as_deref_mut())?;
    let mut il = 0.0;
    let mut dl = Vec::with_capacity(teach.steps.len());
    for s in &teach.steps {
        let (l, g) = il_loss(&s.scores.logits, s.chosen)?;
        il += l;
        dl.push(g.into_iter().map(|x| x * config.lambda1).collect());
    }
    let contrast = teach.contrast_loss();
    backward(config, params, &teach, &dl, &vec![0.0; dl.len()], lambda2, &mut grads)?;

    let mut rl = 0.0;
    if config.use_rl {
        let chooser = match (replay, sample_rng) {
            (Some((actions, _)), _) => Chooser::Replay(actions),
            (None, Some(r)) => Chooser::Sample(r),
            (None, None) => Chooser::Greedy,
        };
        let traj = rollout(res, config, params, world, episode, chooser, false, dropout)?;
        let r = rewards(&traj, world, episode, config);
        let returns = discounted_returns(&r, config.gamma);
        let values: Vec<f64> = traj.steps.iter().map(|s| s.scores.value).collect();
        let adv: Vec<f64> = match replay {
            Some((_, a)) => a.to_vec(),
            None => returns.iter().zip(&values).map(|(r, v)| r - v).collect(),
        };
        let logits: Vec<Vec<f64>> = traj.steps.iter().map(|s| s.scores.logits.clone()).collect();
        let out = rl_loss_with_advantages(&logits, &traj.actions(), &values, &returns, &adv, config.value_coef)?;
        rl = out.total;
        backward(config, params, &traj, &out.dlogits, &out.dvalues, 0.0, &mut grads)?;
    }
    let losses = total_loss(rl, il, contrast, config.lambda1, lambda2)?;
    Ok(EpisodeGrad { losses, grads })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(rename = "NE")]
    pub ne: f64,
    #[serde(rename = "TL")]
    pub tl: f64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "SPL")]
    pub spl: f64,
    pub episodes: usize,
    /// Mean training losses of the epoch.
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: AgentParams,
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    /// Metrics of `split` after the last epoch.
    pub fn final_metrics(&self, split: Split) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split.name())
    }
}

/// Trains from freshly initialised parameters. Each epoch is followed by a
/// greedy evaluation of both validation splits; one record per split is
/// appended to `log` as JSON.
pub fn train(
    config: &AgentConfig,
    data: &Dataset,
    res: &Resources,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let params = AgentParams::init(config)?;
    train_from(config, data, res, params, log)
}

pub fn train_from(
    config: &AgentConfig,
    data: &Dataset,
    res: &Resources,
    mut params: AgentParams,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    config.validate()?;
    let worlds: Vec<&World> = data.worlds().collect();
    let index = world_index(&worlds);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::new();
    let mut step_no = 0;
    for epoch in 0..config.epochs {
        let mut shuffle = rng::substream(config.seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle);
        let mut sum = LossBreakdown::default();
        let warm;
        let cfg = if config.use_rl && epoch < config.rl_start_epoch {
            warm = AgentConfig { use_rl: false, ..config.clone() };
            &warm
        } else {
            config
        };
        for batch in order.chunks(config.batch_size) {
            let mut acc = params.zeros_like();
            for &i in batch {
                let ep = &data.train[i];
                let world = find_world(&index, &worlds, ep)?;
                let tag = (epoch * data.train.len() + i) as u64;
                let mut drop = rng::substream(config.seed, "dropout", tag);
                let mut sample = rng::substream(config.seed, "sample", tag);
                let eg = episode_grad(res, cfg, &params, world, ep, Some(&mut drop), Some(&mut sample), None)?;
                acc.add_scaled(&eg.grads, 1.0 / batch.len() as f64);
                sum.rl += eg.losses.rl;
                sum.il += eg.losses.il;
                sum.contrast += eg.losses.contrast;
                sum.total += eg.losses.total;
            }
            if config.grad_clip > 0.0 {
                let n = acc.sq_norm().sqrt();
                if n > config.grad_clip {
                    let mut scaled = acc.zeros_like();
                    scaled.add_scaled(&acc, config.grad_clip / n);
                    acc = scaled;
                }
            }
            sgd_step(&mut params, &acc, |name| config.lr.for_block(name), step_no)?;
            step_no += 1;
        }
        let n = data.train.len().max(1) as f64;
        let losses = LossBreakdown {
            rl: sum.rl / n,
            il: sum.il / n,
            contrast: sum.contrast / n,
            total: sum.total / n,
        };
        for split in [Split::ValSeenLike, Split::ValUnseenLike] {
            let eps = data.split(split);
            if eps.is_empty() {
                continue;
            }
            let out = evaluate_policy(res, config, &params, &worlds, eps, 1, false)?;
            let rec = EpochRecord {
                epoch,
                split: split.name().to_string(),
                ne: out.aggregate.ne,
                tl: out.aggregate.tl,
                sr: out.aggregate.sr,
                spl: out.aggregate.spl,
                episodes: out.aggregate.episodes,
                losses,
            };
            log::info!(
                "epoch {epoch} {}: SR {:.3} SPL {:.3} NE {:.3} loss {:.4}",
                rec.split,
                rec.sr,
                rec.spl,
                rec.ne,
                losses.total
            );
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
            }
            records.push(rec);
        }
    }
    Ok(TrainReport { params, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceObject {
    pub label: String,
    pub p: f64,
    /// Re-ranked probability, when refinement is on.
    pub p_tilde: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceCandidate {
    pub view: Option<usize>,
    pub target: Option<usize>,
    pub action: ActionConcept,
    pub score: f64,
    pub prob: f64,
    pub objects: Vec<TraceObject>,
}

/// One decision of a greedy rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub episode_id: String,
    pub step: usize,
    pub node: usize,
    pub chosen: usize,
    pub value: f64,
    pub attention: Vec<f64>,
    pub candidates: Vec<TraceCandidate>,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub aggregate: AggregateMetrics,
    pub per_episode: Vec<NavMetrics>,
    pub trajectories: Vec<TrajectoryRecord>,
    pub trace: Vec<TraceStep>,
}

fn trace_of(res: &Resources, episode: &Episode, traj: &Trajectory) -> Vec<TraceStep> {
    let labels: Vec<&str> = res.repo.labels().collect();
    traj.steps
        .iter()
        .enumerate()
        .map(|(t, s)| TraceStep {
            episode_id: episode.id.clone(),
            step: t,
            node: s.pano.node,
            chosen: s.chosen,
            value: s.scores.value,
            attention: s.scores.attention.clone(),
            candidates: candidates_of(&labels, s.pano.candidates.len(), &s.cand_obs, &s.obs, &s.scores, &s.pano),
        })
        .collect()
}

fn candidates_of(
    labels: &[&str],
    n: usize,
    cand_obs: &[usize],
    obs: &[super::rollout::ObsRecord],
    scores: &StepScores,
    pano: &crate::world::Panorama,
) -> Vec<TraceCandidate> {
    (0..n)
        .map(|c| {
            let o = &obs[cand_obs[c]];
            TraceCandidate {
                view: o.view(),
                target: pano.candidates[c].target,
                action: o.action(),
                score: scores.logits[c],
                prob: scores.probs[c],
                objects: o
                    .objects()
                    .into_iter()
                    .map(|(i, p, pt)| TraceObject { label: labels[i].to_string(), p, p_tilde: pt })
                    .collect(),
            }
        })
        .collect()
}

fn record_of(res: &Resources, episode: &Episode, traj: &Trajectory) -> TrajectoryRecord {
    let labels: Vec<&str> = res.repo.labels().collect();
    let steps = traj
        .steps
        .iter()
        .map(|s| {
            let o = &s.obs[s.cand_obs[s.chosen]];
            let concept = o.concept_feature().map(|f| ActionalAtomicConcept {
                action: o.action(),
                objects: o
                    .objects()
                    .into_iter()
                    .zip(o.weights())
                    .map(|((i, _, _), w)| (labels[i].to_string(), *w))
                    .collect(),
                feature: Vector::from_raw(f.to_vec()),
            });
            TrajectoryStep { node: s.pano.node, candidate: s.chosen, action: o.action(), concept }
        })
        .collect();
    TrajectoryRecord::from_state(&episode.id, &traj.state, steps)
}

/// Greedy rollouts of every episode, split over `workers` threads. Results
/// come back in episode order whatever the worker count.
pub fn evaluate_policy(
    res: &Resources,
    config: &AgentConfig,
    params: &AgentParams,
    worlds: &[&World],
    episodes: &[Episode],
    workers: usize,
    with_trace: bool,
) -> Result<EvalOutput> {
    let index = world_index(worlds);
    let run = |ep: &Episode| -> Result<(NavMetrics, TrajectoryRecord, Vec<TraceStep>)> {
        let world = find_world(&index, worlds, ep)?;
        let traj = rollout(res, config, params, world, ep, Chooser::Greedy, false, None)?;
        let record = record_of(res, ep, &traj);
        let m = evaluate_trajectory(&record, ep, world, config.success_radius);
        let trace = if with_trace { trace_of(res, ep, &traj) } else { Vec::new() };
        Ok((m, record, trace))
    };
    let workers = workers.max(1).min(episodes.len().max(1));
    let results: Vec<Result<_>> = if workers == 1 {
        episodes.iter().map(run).collect()
    } else {
        let chunk = episodes.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = episodes
                .chunks(chunk)
                .map(|part| {
                    let run = &run;
                    scope.spawn(move || part.iter().map(run).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut per_episode = Vec::with_capacity(episodes.len());
    let mut trajectories = Vec::with_capacity(episodes.len());
    let mut trace = Vec::new();
    for r in results {
        let (m, rec, t) = r?;
        per_episode.push(m);
        trajectories.push(rec);
        trace.extend(t);
    }
    Ok(EvalOutput { aggregate: aggregate_metrics(&per_episode), per_episode, trajectories, trace })
}

/// Finite-difference check of the whole objective on one episode, with
/// dropout off and the sampled actions and advantages held fixed.
pub fn full_model_grad_check(
    config: &AgentConfig,
    data: &Dataset,
    res: &Resources,
    params: &AgentParams,
    episode: usize,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let ep = data
        .train
        .get(episode)
        .ok_or_else(|| Error::invalid(format!("no training episode {episode}")))?;
    let worlds: Vec<&World> = data.worlds().collect();
    let index = world_index(&worlds);
    let world = find_world(&index, &worlds, ep)?;
    let mut cfg = config.clone();
    cfg.dropout = 0.0;
    let mut params = params.clone();
    params.coembed.dropout_rate = 0.0;

    let mut sample = rng::substream(cfg.seed, "gradcheck", episode as u64);
    let probe = rollout(res, &cfg, &params, world, ep, Chooser::Sample(&mut sample), false, None)?;
    let actions = probe.actions();
    let r = rewards(&probe, world, ep, &cfg);
    let returns = discounted_returns(&r, cfg.gamma);
    let adv: Vec<f64> = returns.iter().zip(&probe.steps).map(|(r, s)| r - s.scores.value).collect();

    let base = episode_grad(res, &cfg, &params, world, ep, None, None, Some((&actions, &adv)))?;
    grad_check_params(
        &params,
        &base.grads,
        |x| {
            let mut p = params.clone();
            p.assign_flat(x);
            episode_grad(res, &cfg, &p, world, ep, None, None, Some((&actions, &adv))).map(|g| g.losses.total)
        },
        eps,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Mode;

    #[test]
    fn full_model_gradients_every_mode() {
        for mode in Mode::ALL {
            let c = AgentConfig::tiny(0, mode);
            let data = build_dataset(&c).unwrap();
            let res = build_resources(&c, &data).unwrap();
            let params = AgentParams::init(&c).unwrap();
            assert_eq!(data.train[0].gt_path.len(), 2);
            let rep = full_model_grad_check(&c, &data, &res, &params, 0, 1e-5, 1e-4).unwrap();
            assert!(rep.passed, "{mode}: {rep:?}");
        }
    }

    #[test]
    fn rewards_and_teacher_rollout() {
        let c = AgentConfig::tiny(1, Mode::Full);
        let data = build_dataset(&c).unwrap();
        let res = build_resources(&c, &data).unwrap();
        let params = AgentParams::init(&c).unwrap();
        let ep = &data.train[0];
        let world = &data.train_worlds[0];
        let t = rollout(&res, &c, &params, world, ep, Chooser::Teacher, true, None).unwrap();
        assert_eq!(t.state.path, ep.gt_path);
        assert!(t.state.stopped);
        let r = rewards(&t, world, ep, &c);
        assert_eq!(r.len(), ep.gt_path.len());
        assert_eq!(*r.last().unwrap(), c.success_bonus);
        let gt = ep.gt_length(world);
        assert!((r[..r.len() - 1].iter().sum::<f64>() - gt).abs() < 1e-12);
    }

    #[test]
    fn running_out_of_steps_is_judged_where_the_agent_ends() {
        let c = AgentConfig::tiny(1, Mode::Full);
        let data = build_dataset(&c).unwrap();
        let res = build_resources(&c, &data).unwrap();
        let params = AgentParams::init(&c).unwrap();
        let ep = &data.train[0];
        let world = &data.train_worlds[0];
        let mut t = rollout(&res, &c, &params, world, ep, Chooser::Teacher, false, None).unwrap();
        t.steps.pop();
        let r = rewards(&t, world, ep, &c);
        let gt = ep.gt_length(world);
        assert!((r.iter().sum::<f64>() - (gt + c.success_bonus)).abs() < 1e-12, "{r:?}");

        let strict = AgentConfig { success_radius: -1.0, ..c.clone() };
        let r = rewards(&t, world, ep, &strict);
        assert!((r.iter().sum::<f64>() - (gt - c.success_bonus)).abs() < 1e-12, "{r:?}");
    }
}
