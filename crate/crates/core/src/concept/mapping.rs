use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::action::ActionConcept;
use super::repository::ConceptRepository;
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::numeric::ops::{cosine_fwd, softmax_slice, NORM_FLOOR};
use crate::numeric::tensor::{axpy, norm};
use crate::numeric::Vector;

/// Slack allowed on probability sums.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Full softmax of the cosine similarities between a view feature and every
/// concept, at temperature `tau`, in repository order.
pub fn concept_distribution(view_feature: &Vector, repo: &ConceptRepository, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::NonPositive { what: "concept temperature", value: tau });
    }
    if repo.is_empty() {
        return Err(Error::Empty("concept repository"));
    }
    if norm(view_feature) <= NORM_FLOOR {
        return Err(Error::ZeroNorm { op: "map_object_concepts", which: "view_feature" });
    }
    let sims = repo
        .concepts()
        .iter()
        .map(|c| {
            if c.text_feature.len() != view_feature.len() {
                return Err(Error::shape(
                    "map_object_concepts",
                    format!("view({})", view_feature.len()),
                    format!("concept {:?}({})", c.label, c.text_feature.len()),
                ));
            }
            Ok(cosine_fwd(view_feature, &c.text_feature).0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax_slice(&sims, tau))
}

/// Indices of the `k` largest probabilities, descending; ties go to the
/// lexicographically smaller label.
pub(crate) fn topk_indices(probs: &[f64], labels: &[&str], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then_with(|| labels[a].cmp(labels[b])));
    idx.truncate(k);
    idx
}

/// Top-`k` object concepts of a view. The probabilities are the entries of
/// the full distribution over all concepts, not renormalised.
pub fn map_object_concepts(
    view_feature: &Vector,
    repo: &ConceptRepository,
    tau: f64,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::invalid("top-k size must be at least 1"));
    }
    if k > repo.len() {
        return Err(Error::invalid(format!("top-k size {k} exceeds repository size {}", repo.len())));
    }
    let probs = concept_distribution(view_feature, repo, tau)?;
    let labels: Vec<&str> = repo.labels().collect();
    Ok(topk_indices(&probs, &labels, k)
        .into_iter()
        .map(|i| (labels[i].to_string(), probs[i]))
        .collect())
}

/// Rescales top-k probabilities to sum to one.
pub fn renormalize_topk(topk: &[(String, f64)]) -> Vec<(String, f64)> {
    let z: f64 = topk.iter().map(|(_, p)| p).sum();
    topk.iter().map(|(l, p)| (l.clone(), p / z)).collect()
}

/// Text fed to the encoder for an action paired with an object label.
pub fn action_object_phrase(action: ActionConcept, label: &str) -> String {
    format!("{} {}", action.phrase(), label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionalAtomicConcept {
    pub action: ActionConcept,
    pub objects: Vec<(String, f64)>,
    pub feature: Vector,
}

fn check_probs(topk: &[(String, f64)]) -> Result<()> {
    let mut sum = 0.0;
    for (l, p) in topk {
        if !p.is_finite() || *p < 0.0 || *p > 1.0 + PROB_SUM_TOL {
            return Err(Error::invalid(format!("probability {p} for {l:?} outside [0, 1]")));
        }
        sum += p;
    }
    if sum > 1.0 + PROB_SUM_TOL {
        return Err(Error::invalid(format!("top-k probabilities sum to {sum} > 1")));
    }
    Ok(())
}

/// `ũ = Σ_i p_i · E(action ⊕ label_i)`; the stop candidate with no objects
/// embeds as `E("stop")`.
///
/// The probabilities may be a slice of a larger distribution, so they must sum
/// to at most one rather than exactly one.
pub fn encode_actional_concept(
    action: ActionConcept,
    topk: &[(String, f64)],
    provider: &dyn EmbeddingProvider,
) -> Result<ActionalAtomicConcept> {
    let feature = if topk.is_empty() {
        if action != ActionConcept::Stop {
            return Err(Error::Empty("object concepts for a non-stop action"));
        }
        provider.text_embed(action.phrase())?
    } else {
        check_probs(topk)?;
        let mut u = vec![0.0; provider.dim()];
        for (label, p) in topk {
            let e = provider.text_embed(&action_object_phrase(action, label))?;
            axpy(*p, &e, &mut u);
        }
        Vector::new(u)?
    };
    Ok(ActionalAtomicConcept {
        action,
        objects: topk.to_vec(),
        feature,
    })
}

/// Memoised `E(action ⊕ label)` lookups, shared by the training loop.
#[derive(Debug, Default)]
pub struct PhraseCache {
    map: RwLock<HashMap<(ActionConcept, String), Vector>>,
}

impl PhraseCache {
    pub fn new() -> Self {
        PhraseCache::default()
    }

    pub fn get(&self, action: ActionConcept, label: &str, provider: &dyn EmbeddingProvider) -> Result<Vector> {
        let key = (action, label.to_string());
        if let Some(v) = self.map.read().expect("phrase cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = if label.is_empty() {
            provider.text_embed(action.phrase())?
        } else {
            provider.text_embed(&action_object_phrase(action, label))?
        };
        self.map.write().expect("phrase cache lock").insert(key, v.clone());
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{SyntheticProvider, SyntheticProviderConfig, ViewImage};

    fn provider(sigma: f64) -> SyntheticProvider {
        SyntheticProvider::new(SyntheticProviderConfig { noise_sigma: sigma, ..Default::default() }).unwrap()
    }

    struct V(&'static str);
    impl ViewImage for V {
        fn image_id(&self) -> &str {
            "img"
        }
        fn planted_label(&self) -> Option<&str> {
            Some(self.0)
        }
    }

    #[test]
    fn planted_label_is_top1() {
        let p = provider(0.0);
        let repo = ConceptRepository::from_labels(&["stairs", "kitchen", "gym", "attic"], &p).unwrap();
        let f = p.image_embed(&V("stairs")).unwrap();
        let top = map_object_concepts(&f, &repo, 0.5, 1).unwrap();
        assert_eq!(top[0].0, "stairs");
        assert!(top[0].1 > 1.0 / 4.0);
    }

    #[test]
    fn hand_set_similarities_match_scalar_softmax() {
        // four orthonormal concept features; the view is built to hit [0.9, 0.1, 0.1, 0.1]
        let mut store = crate::embedding::EmbeddingStore::new(5).unwrap();
        for (i, l) in ["a1", "b2", "c3", "d4"].iter().enumerate() {
            let mut v = vec![0.0; 5];
            v[i] = 1.0;
            store.insert_text(&super::super::repository::concept_phrase(l), v).unwrap();
        }
        let repo = ConceptRepository::from_labels(&["a1", "b2", "c3", "d4"], &store).unwrap();
        let sims = [0.9, 0.1, 0.1, 0.1];
        let rest = (1.0f64 - sims.iter().map(|s| s * s).sum::<f64>()).sqrt();
        let view = Vector::new(vec![0.9, 0.1, 0.1, 0.1, rest]).unwrap();
        let top = map_object_concepts(&view, &repo, 0.5, 2).unwrap();

        let e: Vec<f64> = sims.iter().map(|s| (s / 0.5f64).exp()).collect();
        let z: f64 = e.iter().sum();
        assert_eq!(top[0].0, "a1");
        assert_eq!(top[1].0, "b2");
        assert!((top[0].1 - e[0] / z).abs() < 1e-12);
        assert!((top[1].1 - e[1] / z).abs() < 1e-12);
    }

    #[test]
    fn equal_similarity_tie_is_lexicographic() {
        let mut store = crate::embedding::EmbeddingStore::new(2).unwrap();
        store.insert_text("a photo of a zebra", vec![1.0, 0.0]).unwrap();
        store.insert_text("a photo of a apple", vec![0.0, 1.0]).unwrap();
        let repo = ConceptRepository::from_labels(&["zebra", "apple"], &store).unwrap();
        let top = map_object_concepts(&Vector::new(vec![1.0, 1.0]).unwrap(), &repo, 0.5, 2).unwrap();
        assert_eq!(top[0].0, "apple");
        assert_eq!(top[1].0, "zebra");
        assert_eq!(top[0].1, top[1].1);
        assert!((top[0].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn k_bounds() {
        let p = provider(0.0);
        let repo = ConceptRepository::from_labels(&["stairs", "gym"], &p).unwrap();
        let f = p.text_embed("gym").unwrap();
        assert!(map_object_concepts(&f, &repo, 0.5, 3).is_err());
        assert!(map_object_concepts(&f, &repo, 0.5, 0).is_err());
        assert!(map_object_concepts(&f, &repo, 0.0, 1).is_err());
    }

    #[test]
    fn single_object_is_phrase_vector() {
        let p = provider(0.0);
        let c = encode_actional_concept(ActionConcept::TurnRight, &[("bathroom".into(), 1.0)], &p).unwrap();
        assert_eq!(c.feature, p.text_embed("turn right bathroom").unwrap());
    }

    #[test]
    fn uniform_pair_is_mean() {
        let p = provider(0.0);
        let c = encode_actional_concept(
            ActionConcept::GoUp,
            &[("stairs".into(), 0.5), ("attic".into(), 0.5)],
            &p,
        )
        .unwrap();
        let a = p.text_embed("go up stairs").unwrap();
        let b = p.text_embed("go up attic").unwrap();
        for i in 0..c.feature.len() {
            assert!((c.feature[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_and_empty() {
        let p = provider(0.0);
        let c = encode_actional_concept(ActionConcept::Stop, &[], &p).unwrap();
        assert_eq!(c.feature, p.text_embed("stop").unwrap());
        assert!(encode_actional_concept(ActionConcept::GoBack, &[], &p).is_err());
        assert!(encode_actional_concept(ActionConcept::GoBack, &[("gym".into(), 0.7), ("attic".into(), 0.7)], &p).is_err());
    }

    #[test]
    fn renormalize_sums_to_one() {
        let r = renormalize_topk(&[("a".into(), 0.2), ("b".into(), 0.2)]);
        assert_eq!(r[0].1, 0.5);
    }

    #[test]
    fn cache_matches_provider() {
        let p = provider(0.0);
        let cache = PhraseCache::new();
        assert_eq!(cache.get(ActionConcept::GoBack, "gym", &p).unwrap(), p.text_embed("go back gym").unwrap());
        assert_eq!(cache.get(ActionConcept::Stop, "", &p).unwrap(), p.text_embed("stop").unwrap());
    }
}
