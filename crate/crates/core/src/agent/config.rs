use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::SyntheticProviderConfig;
use crate::error::{Error, Result};

/// Which observation pipeline the agent uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    /// Separate embeddings with refined concepts and the contrast loss.
    Full,
    /// Concepts weighted by the unrefined mapping probabilities.
    WithoutRefine,
    /// No contrast loss.
    WithoutContrast,
    /// Separate visual and direction embeddings, no concepts.
    Separate,
    /// Fused single-norm embedding of visual and direction features.
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Full, Mode::WithoutRefine, Mode::WithoutContrast, Mode::Separate, Mode::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::WithoutRefine => "wo-refine",
            Mode::WithoutContrast => "wo-contrast",
            Mode::Separate => "separate",
            Mode::Baseline => "baseline",
        }
    }

    pub fn uses_concepts(self) -> bool {
        matches!(self, Mode::Full | Mode::WithoutRefine | Mode::WithoutContrast)
    }

    pub fn uses_refine(self) -> bool {
        matches!(self, Mode::Full | Mode::WithoutContrast)
    }

    pub fn uses_contrast(self) -> bool {
        matches!(self, Mode::Full | Mode::WithoutRefine)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase().replace(['_', ' '], "-").replace("w/o-", "wo-");
        Mode::ALL.into_iter().find(|m| m.name() == norm).ok_or_else(|| {
            let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(format!("unknown mode {s:?}; valid modes: {}", names.join(", ")))
        })
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.name().to_string()
    }
}

/// Learning rates by parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrTable {
    pub adapter: f64,
    pub coembed: f64,
    pub policy: f64,
}

impl Default for LrTable {
    fn default() -> Self {
        LrTable {
            adapter: crate::adapter::DEFAULT_ADAPTER_LR,
            coembed: 0.3,
            policy: 0.3,
        }
    }
}

impl LrTable {
    pub fn for_block(&self, name: &str) -> f64 {
        if name.starts_with("adapter.") {
            self.adapter
        } else if name.starts_with("coembed.") {
            self.coembed
        } else {
            self.policy
        }
    }
}

/// Toy-world data generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_worlds: usize,
    pub val_worlds: usize,
    pub nodes_per_world: usize,
    pub levels: usize,
    /// Distinct room labels per world; 0 uses the whole room lexicon.
    pub palette: usize,
    /// Labels from the end of the lexicon kept out of training worlds and
    /// used for distractor views of unseen-like worlds.
    pub heldout_labels: usize,
    pub train_episodes: usize,
    pub val_episodes: usize,
    /// Longest ground-truth path, in nodes.
    pub max_path_len: usize,
    pub target_degree: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_worlds: 10,
            val_worlds: 5,
            nodes_per_world: 20,
            levels: 1,
            palette: 6,
            heldout_labels: 4,
            train_episodes: 200,
            val_episodes: 100,
            max_path_len: 6,
            target_degree: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub provider: SyntheticProviderConfig,
    pub data: DataConfig,
    pub d_model: usize,
    pub scorer_hidden: usize,
    pub adapter_hidden: usize,
    pub top_k: usize,
    /// Temperature of the object-concept mapping.
    pub concept_tau: f64,
    /// Temperature of the observation contrast.
    pub contrast_tau: f64,
    /// Softmax temperature of re-ranking (1 means raw similarities).
    pub rerank_temperature: f64,
    pub alpha: f64,
    pub renormalize_topk: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub use_rl: bool,
    /// Epochs of imitation only before the sampled pass is switched on.
    pub rl_start_epoch: usize,
    pub value_coef: f64,
    pub gamma: f64,
    pub success_bonus: f64,
    pub dropout: f64,
    pub lr: LrTable,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub max_instruction_steps: usize,
    pub success_radius: f64,
    /// Use the relative heading in the direction feature (absolute otherwise).
    pub relative_heading: bool,
    /// Gradient norm cap per batch; 0 disables.
    pub grad_clip: f64,
    /// Initial attention logit of trajectory step `t` on instruction step `t`.
    pub step_align: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            seed: 0,
            mode: Mode::Full,
            provider: SyntheticProviderConfig::default(),
            data: DataConfig::default(),
            d_model: 64,
            scorer_hidden: 64,
            adapter_hidden: crate::adapter::DEFAULT_HIDDEN,
            top_k: 5,
            concept_tau: 0.5,
            contrast_tau: 0.5,
            rerank_temperature: 1.0,
            alpha: crate::adapter::DEFAULT_ALPHA,
            renormalize_topk: false,
            lambda1: 0.2,
            lambda2: 1.0,
            use_rl: true,
            rl_start_epoch: 5,
            value_coef: 0.5,
            gamma: 0.9,
            success_bonus: 2.0,
            dropout: 0.1,
            lr: LrTable::default(),
            epochs: 10,
            batch_size: 8,
            max_steps: 10,
            max_instruction_steps: 12,
            success_radius: 0.0,
            relative_heading: true,
            grad_clip: 2.0,
            step_align: 3.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |what: &'static str, v: f64| -> Result<()> {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositive { what, value: v });
            }
            Ok(())
        };
        pos("concept_tau", self.concept_tau)?;
        pos("contrast_tau", self.contrast_tau)?;
        pos("rerank_temperature", self.rerank_temperature)?;
        pos("lr.adapter", self.lr.adapter)?;
        pos("lr.coembed", self.lr.coembed)?;
        pos("lr.policy", self.lr.policy)?;
        for (what, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("value_coef", self.value_coef)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{what} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.grad_clip >= 0.0) || !(self.step_align >= 0.0) {
            return Err(Error::invalid("grad_clip and step_align must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for (what, v) in [
            ("d_model", self.d_model),
            ("scorer_hidden", self.scorer_hidden),
            ("adapter_hidden", self.adapter_hidden),
            ("top_k", self.top_k),
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("max_instruction_steps", self.max_instruction_steps),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{what} must be positive")));
            }
        }
        if self.d_model < 2 {
            return Err(Error::invalid("d_model must be at least 2"));
        }
        if self.data.train_worlds == 0 || self.data.train_episodes == 0 {
            return Err(Error::invalid("need at least one training world and episode"));
        }
        if self.data.heldout_labels + 4 > self.provider.lexicon.len() {
            return Err(Error::invalid(format!(
                "heldout_labels {} leaves fewer than 4 room labels in a lexicon of {}",
                self.data.heldout_labels,
                self.provider.lexicon.len()
            )));
        }
        if self.data.max_path_len + 1 > self.max_instruction_steps {
            return Err(Error::invalid("max_instruction_steps must exceed max_path_len"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str, origin: &Path) -> Result<Self> {
        let c: AgentConfig = toml::from_str(s).map_err(|e| Error::parse(origin, e))?;
        c.validate().map_err(|e| Error::parse(origin, e))?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AgentConfig::from_toml_str(&s, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// A very small model and dataset for gradient checks and smoke runs:
    /// eight-dimensional features, two-step episodes, dropout off.
    pub fn tiny(seed: u64, mode: Mode) -> Self {
        let lexicon: Vec<String> = crate::embedding::default_lexicon().into_iter().take(8).collect();
        AgentConfig {
            seed,
            mode,
            provider: SyntheticProviderConfig { dim: 8, seed, noise_sigma: 0.1, lexicon, ..Default::default() },
            data: DataConfig {
                train_worlds: 1,
                val_worlds: 1,
                nodes_per_world: 6,
                levels: 1,
                palette: 0,
                heldout_labels: 2,
                train_episodes: 4,
                val_episodes: 2,
                max_path_len: 2,
                target_degree: 3.0,
            },
            d_model: 4,
            scorer_hidden: 4,
            adapter_hidden: 4,
            top_k: 3,
            dropout: 0.0,
            max_steps: 3,
            max_instruction_steps: 3,
            epochs: 1,
            ..AgentConfig::default()
        }
    }

    /// Contrast weight in effect for the configured mode.
    pub fn effective_lambda2(&self) -> f64 {
        if self.mode.uses_contrast() {
            self.lambda2
        } else {
            0.0
        }
    }
}
