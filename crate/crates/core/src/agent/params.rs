use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{AgentConfig, Mode};
use crate::adapter::AdapterParams;
use crate::coembed::CoEmbedParams;
use crate::error::{Error, Result};
use crate::numeric::tensor::norm;
use crate::numeric::{Matrix, ParamSet, Vector};
use crate::rng::{self, Rng};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Instruction encoder, cross-modal attention, candidate scorer and value head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// `d_m × dim`: sentence vector for the attention query.
    pub wc: Matrix,
    /// `dim × dim`: sentence vector fed to the adapter.
    pub wcp: Matrix,
    /// `d_m × 2d_m` over `[cls; h]`.
    pub wq: Matrix,
    /// `steps × d_m`, added to the query at each step.
    pub step_query: Matrix,
    /// `d_m × dim`
    pub wk: Matrix,
    /// `tokens × d_m`, added to each key.
    pub pos_key: Matrix,
    /// `d_m × dim`: attended context to model space.
    pub wo: Matrix,
    /// `hidden × 2d_m` over `[o; c⊙o]`.
    pub s1: Matrix,
    pub s2: Vector,
    /// Over `[c; h]`.
    pub value_w: Vector,
    pub value_b: Vector,
}

impl ParamSet for PolicyParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("policy.wc", self.wc.data());
        f("policy.wcp", self.wcp.data());
        f("policy.wq", self.wq.data());
        f("policy.step_query", self.step_query.data());
        f("policy.wk", self.wk.data());
        f("policy.pos_key", self.pos_key.data());
        f("policy.wo", self.wo.data());
        f("policy.s1", self.s1.data());
        f("policy.s2", &self.s2);
        f("policy.value_w", &self.value_w);
        f("policy.value_b", &self.value_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("policy.wc", self.wc.data_mut());
        f("policy.wcp", self.wcp.data_mut());
        f("policy.wq", self.wq.data_mut());
        f("policy.step_query", self.step_query.data_mut());
        f("policy.wk", self.wk.data_mut());
        f("policy.pos_key", self.pos_key.data_mut());
        f("policy.wo", self.wo.data_mut());
        f("policy.s1", self.s1.data_mut());
        f("policy.s2", self.s2.as_mut_slice());
        f("policy.value_w", self.value_w.as_mut_slice());
        f("policy.value_b", self.value_b.as_mut_slice());
    }
}

impl PolicyParams {
    /// `align` is the initial attention logit of trajectory step `t` on
    /// instruction step `t`: the first rows of `step_query` and `pos_key`
    /// share a random direction scaled to give it. Zero keeps both uniform.
    pub fn init(dim: usize, d_model: usize, hidden: usize, steps: usize, tokens: usize, align: f64, rng: &mut Rng) -> Self {
        let s2 = Matrix::uniform_init(1, hidden, hidden, rng);
        let mut p = PolicyParams {
            wc: Matrix::uniform_init(d_model, dim, dim, rng),
            wcp: Matrix::identity(dim),
            wq: Matrix::uniform_init(d_model, 2 * d_model, d_model, rng),
            step_query: Matrix::uniform_init(steps, d_model, d_model, rng),
            wk: Matrix::uniform_init(d_model, dim, dim, rng),
            pos_key: Matrix::uniform_init(tokens, d_model, d_model, rng),
            wo: Matrix::uniform_init(d_model, dim, dim, rng),
            s1: Matrix::uniform_init(hidden, 2 * d_model, 2 * d_model, rng),
            s2: Vector::from_raw(s2.data().to_vec()),
            value_w: Vector::zeros(2 * d_model),
            value_b: Vector::zeros(1),
        };
        if align > 0.0 {
            let scale = (align * (d_model as f64).sqrt()).sqrt();
            for r in 0..steps.min(tokens) {
                let mut d: Vec<f64> = (0..d_model).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let n = norm(&d);
                d.iter_mut().for_each(|x| *x *= scale / n);
                p.step_query.row_mut(r).copy_from_slice(&d);
                p.pos_key.row_mut(r).copy_from_slice(&d);
            }
        }
        p
    }

    pub fn d_model(&self) -> usize {
        self.wc.rows()
    }

    pub fn text_dim(&self) -> usize {
        self.wc.cols()
    }

    pub fn hidden(&self) -> usize {
        self.s1.rows()
    }

    pub fn max_steps(&self) -> usize {
        self.step_query.rows()
    }

    pub fn max_tokens(&self) -> usize {
        self.pos_key.rows()
    }
}

/// Every trainable block of the agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub adapter: AdapterParams,
    pub coembed: CoEmbedParams,
    pub policy: PolicyParams,
}

impl ParamSet for AgentParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.adapter.visit(f);
        self.coembed.visit(f);
        self.policy.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.adapter.visit_mut(f);
        self.coembed.visit_mut(f);
        self.policy.visit_mut(f);
    }
}

/// Shapes a checkpoint must agree on with the config it is used under.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDims {
    pub dim: usize,
    pub d_model: usize,
    pub scorer_hidden: usize,
    pub adapter_hidden: usize,
    pub steps: usize,
    pub tokens: usize,
}

impl ParamDims {
    pub fn from_config(c: &AgentConfig) -> Self {
        ParamDims {
            dim: c.provider.dim,
            d_model: c.d_model,
            scorer_hidden: c.scorer_hidden,
            adapter_hidden: c.adapter_hidden,
            steps: c.max_steps.max(c.max_instruction_steps),
            tokens: c.max_instruction_steps,
        }
    }

    fn of(p: &AgentParams) -> Self {
        ParamDims {
            dim: p.policy.text_dim(),
            d_model: p.policy.d_model(),
            scorer_hidden: p.policy.hidden(),
            adapter_hidden: p.adapter.hidden(),
            steps: p.policy.max_steps(),
            tokens: p.policy.max_tokens(),
        }
    }

    fn mismatch(&self, other: &ParamDims) -> Option<String> {
        let pairs = [
            ("dim", self.dim, other.dim),
            ("d_model", self.d_model, other.d_model),
            ("scorer_hidden", self.scorer_hidden, other.scorer_hidden),
            ("adapter_hidden", self.adapter_hidden, other.adapter_hidden),
            ("steps", self.steps, other.steps),
            ("tokens", self.tokens, other.tokens),
        ];
        pairs
            .iter()
            .find(|(_, a, b)| a != b)
            .map(|(n, a, b)| format!("checkpoint has {n} = {a}, config expects {b}"))
    }
}

impl AgentParams {
    pub fn init(config: &AgentConfig) -> Result<Self> {
        let dims = ParamDims::from_config(config);
        let mut r = rng::stream(config.seed, "init");
        let adapter = AdapterParams::init(dims.dim, dims.adapter_hidden, config.alpha, &mut r)?;
        let coembed = CoEmbedParams::init(dims.dim, dims.dim, dims.d_model, config.dropout, &mut r)?;
        let policy = PolicyParams::init(dims.dim, dims.d_model, dims.scorer_hidden, dims.steps, dims.tokens, config.step_align, &mut r);
        Ok(AgentParams { adapter, coembed, policy })
    }

    pub fn dims(&self) -> ParamDims {
        ParamDims::of(self)
    }

    pub fn save(&self, path: impl AsRef<Path>, mode: Mode) -> Result<()> {
        let path = path.as_ref();
        let ck = CheckpointRef {
            format_version: CHECKPOINT_FORMAT_VERSION,
            mode,
            dims: self.dims(),
            params: self,
        };
        let s = serde_json::to_string(&ck).expect("checkpoint serializes");
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and checks it against `config`.
    pub fn load(path: impl AsRef<Path>, config: &AgentConfig) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&s).map_err(|e| Error::parse(path, e))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::parse(path, format!("checkpoint format_version {} unsupported", ck.format_version)));
        }
        let want = ParamDims::from_config(config);
        if let Some(m) = ck.dims.mismatch(&want) {
            return Err(Error::parse(path, format!("dimension mismatch: {m}")));
        }
        if let Some(m) = ParamDims::of(&ck.params).mismatch(&ck.dims) {
            return Err(Error::parse(path, format!("inconsistent checkpoint: {m}")));
        }
        if ck.mode != config.mode {
            log::warn!("checkpoint trained in mode {}, config says {}", ck.mode, config.mode);
        }
        let mut p = ck.params;
        p.adapter.alpha = config.alpha;
        p.coembed.dropout_rate = config.dropout;
        Ok(p)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    mode: Mode,
    dims: ParamDims,
    params: &'a AgentParams,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    mode: Mode,
    dims: ParamDims,
    params: AgentParams,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let c = AgentConfig { d_model: 8, scorer_hidden: 8, adapter_hidden: 8, ..Default::default() };
        let p = AgentParams::init(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        p.save(&path, c.mode).unwrap();
        assert_eq!(AgentParams::load(&path, &c).unwrap(), p);
        let other = AgentConfig { d_model: 16, ..c.clone() };
        let e = AgentParams::load(&path, &other).unwrap_err().to_string();
        assert!(e.contains("d_model"), "{e}");
    }

    #[test]
    fn block_names_are_grouped() {
        let c = AgentConfig { d_model: 4, scorer_hidden: 4, adapter_hidden: 4, ..Default::default() };
        let p = AgentParams::init(&c).unwrap();
        let names: Vec<String> = p.layout().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| n.starts_with("adapter.") || n.starts_with("coembed.") || n.starts_with("policy.")));
        assert_eq!(names.iter().filter(|n| n.starts_with("adapter.")).count(), 2);
    }
}
