use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingProvider, ViewImage};
use crate::concept::ActionConcept;
use crate::error::{Error, Result};
use crate::numeric::tensor::{axpy, norm};
use crate::numeric::Vector;
use crate::rng::{self, fnv1a};

/// Words that carry no direction in the synthetic text encoder. This is what
/// makes "a photo of a {label}" land on the bare label's direction.
const STOPWORDS: &[&str] = &["a", "an", "the", "of", "to", "photo", "and", "then"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProviderConfig {
    pub dim: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    /// When set, the navigator's visual feature is the image embedding itself
    /// instead of a label code unrelated to the text space.
    pub aligned_visual: bool,
    /// Noise norm on the unaligned visual feature.
    pub visual_noise_sigma: f64,
    pub lexicon: Vec<String>,
}

impl Default for SyntheticProviderConfig {
    fn default() -> Self {
        SyntheticProviderConfig {
            dim: 32,
            seed: 0,
            noise_sigma: 0.05,
            aligned_visual: false,
            visual_noise_sigma: 2.0,
            lexicon: default_lexicon(),
        }
    }
}

/// Object labels of the toy world.
pub fn default_lexicon() -> Vec<String> {
    [
        "attic", "balcony", "bathroom", "bedroom", "cellar", "closet", "dining", "foyer", "garage", "gym",
        "hallway", "kitchen", "laundry", "library", "lounge", "nursery", "office", "pantry", "porch", "stairs",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Deterministic stand-in for a frozen vision-language encoder.
///
/// Every lexicon label and every action phrase owns a unit base direction.
/// Labels and actions are drawn jointly and orthonormalised while they fit in
/// `dim`; any overflow is plain normalised Gaussian. A phrase embeds to the
/// sum of the directions of the units it mentions; an image of a planted
/// label embeds to that label's direction plus noise of norm `noise_sigma`.
///
/// The navigator's own visual feature stands in for a classifier backbone:
/// each label gets a random unit code with no relation to the text
/// directions, plus image noise of norm `visual_noise_sigma`.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    config: SyntheticProviderConfig,
    labels: BTreeMap<String, Vec<f64>>,
    /// Multi-token labels and action phrases, longest first, for greedy matching.
    units: Vec<(Vec<String>, Vec<f64>)>,
}

fn gaussian_unit(rng: &mut rng::Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn orthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        let (done, rest) = vs.split_at_mut(i);
        let v = &mut rest[0];
        for u in done.iter() {
            let p = crate::numeric::tensor::dot(u, v);
            axpy(-p, u, v);
        }
        let n = norm(v);
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub(crate) fn tokenize(phrase: &str) -> Vec<String> {
    phrase
        .split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

impl SyntheticProvider {
    pub fn new(config: SyntheticProviderConfig) -> Result<Self> {
        if config.lexicon.is_empty() {
            return Err(Error::invalid("synthetic provider lexicon is empty"));
        }
        if config.dim < 8 {
            return Err(Error::invalid(format!("synthetic provider dim {} < 8", config.dim)));
        }
        if !(config.noise_sigma >= 0.0) || !config.noise_sigma.is_finite() {
            return Err(Error::invalid(format!("noise_sigma {} must be >= 0", config.noise_sigma)));
        }
        if !(config.visual_noise_sigma >= 0.0) || !config.visual_noise_sigma.is_finite() {
            return Err(Error::invalid(format!("visual_noise_sigma {} must be >= 0", config.visual_noise_sigma)));
        }
        let mut lexicon: Vec<String> = config.lexicon.iter().map(|l| tokenize(l).join(" ")).collect();
        lexicon.sort();
        lexicon.dedup();
        if lexicon.iter().any(String::is_empty) {
            return Err(Error::invalid("lexicon contains a label with no word characters"));
        }

        let actions: Vec<String> = ActionConcept::ALL.iter().map(|a| a.phrase().to_string()).collect();
        let n_units = lexicon.len() + actions.len();
        let mut rng = rng::stream(config.seed, "provider.base");
        let mut dirs: Vec<Vec<f64>> = (0..n_units).map(|_| gaussian_unit(&mut rng, config.dim)).collect();
        let k = n_units.min(config.dim);
        orthonormalize(&mut dirs[..k]);

        let (label_dirs, action_dirs) = dirs.split_at(lexicon.len());
        let labels: BTreeMap<String, Vec<f64>> = lexicon.iter().cloned().zip(label_dirs.iter().cloned()).collect();
        let mut units: Vec<(Vec<String>, Vec<f64>)> = lexicon
            .iter()
            .zip(label_dirs)
            .chain(actions.iter().zip(action_dirs))
            .map(|(name, d)| (tokenize(name), d.clone()))
            .collect();
        units.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(SyntheticProvider { config, labels, units })
    }

    pub fn config(&self) -> &SyntheticProviderConfig {
        &self.config
    }

    pub fn lexicon(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    /// Unit base direction of a label.
    pub fn label_base(&self, label: &str) -> Result<Vector> {
        let key = tokenize(label).join(" ");
        self.labels.get(&key).map(|v| Vector::from_raw(v.clone())).ok_or_else(|| Error::UnknownKey {
            kind: "label",
            nearest: super::store::nearest_keys(self.labels.keys().map(String::as_str), &key, 3),
            key,
        })
    }

    fn token_direction(&self, token: &str) -> Vec<f64> {
        let mut r = rng::substream(self.config.seed, "provider.token", fnv1a(token.as_bytes()));
        gaussian_unit(&mut r, self.config.dim)
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn text_embed(&self, phrase: &str) -> Result<Vector> {
        let tokens: Vec<String> = tokenize(phrase)
            .into_iter()
            .filter(|t| !STOPWORDS.contains(&t.as_str()))
            .collect();
        if phrase.trim().is_empty() {
            return Err(Error::Empty("text_embed phrase"));
        }
        if tokens.is_empty() {
            return Ok(Vector::from_raw(self.token_direction(&phrase.to_lowercase())));
        }
        let mut out = vec![0.0; self.config.dim];
        let mut i = 0;
        'outer: while i < tokens.len() {
            for (unit, dir) in &self.units {
                if tokens[i..].starts_with(unit) {
                    axpy(1.0, dir, &mut out);
                    i += unit.len();
                    continue 'outer;
                }
            }
            axpy(1.0, &self.token_direction(&tokens[i]), &mut out);
            i += 1;
        }
        if norm(&out) <= 1e-9 {
            // opposing units cancelled exactly; fall back to the phrase's own direction
            return Ok(Vector::from_raw(self.token_direction(&tokens.join(" "))));
        }
        Ok(Vector::from_raw(out))
    }

    fn image_embed(&self, view: &dyn ViewImage) -> Result<Vector> {
        let label = view
            .planted_label()
            .ok_or_else(|| Error::invalid(format!("view {:?} has no planted label", view.image_id())))?;
        let mut v = self.label_base(label)?.into_inner();
        if self.config.noise_sigma > 0.0 {
            let mut r = rng::substream(self.config.seed, "provider.image", fnv1a(view.image_id().as_bytes()));
            let noise = gaussian_unit(&mut r, self.config.dim);
            axpy(self.config.noise_sigma, &noise, &mut v);
        }
        Ok(Vector::from_raw(v))
    }

    fn visual_feature(&self, view: &dyn ViewImage) -> Result<Vector> {
        if self.config.aligned_visual {
            return self.image_embed(view);
        }
        let label = view
            .planted_label()
            .ok_or_else(|| Error::invalid(format!("view {:?} has no planted label", view.image_id())))?;
        let key = tokenize(label).join(" ");
        self.label_base(&key)?;
        let mut r = rng::substream(self.config.seed, "provider.visual", fnv1a(key.as_bytes()));
        let mut v = gaussian_unit(&mut r, self.config.dim);
        if self.config.visual_noise_sigma > 0.0 {
            let mut r = rng::substream(self.config.seed, "provider.visual_noise", fnv1a(view.image_id().as_bytes()));
            axpy(self.config.visual_noise_sigma, &gaussian_unit(&mut r, self.config.dim), &mut v);
        }
        Ok(Vector::from_raw(v))
    }
}
