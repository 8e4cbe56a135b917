use std::f64::consts::{FRAC_PI_2, PI, TAU};

use aacl_core::concept::{
    concept_distribution, encode_actional_concept, map_action_concept, map_object_concepts, ActionConcept,
    ConceptRepository, RelativeDirection,
};
use aacl_core::embedding::{default_lexicon, EmbeddingProvider, SyntheticProvider, SyntheticProviderConfig};
use aacl_core::numeric::Vector;
use proptest::prelude::*;

fn provider() -> SyntheticProvider {
    SyntheticProvider::new(SyntheticProviderConfig { dim: 48, ..Default::default() }).unwrap()
}

fn repo(p: &SyntheticProvider) -> ConceptRepository {
    ConceptRepository::from_labels(&default_lexicon(), p).unwrap()
}

// Straight reading of the range table, one interval at a time.
fn table(dpsi: f64, dtheta: f64) -> ActionConcept {
    if dtheta > 0.0 {
        return ActionConcept::GoUp;
    }
    if dtheta < 0.0 {
        return ActionConcept::GoDown;
    }
    let intervals: [(f64, bool, f64, bool, ActionConcept); 6] = [
        (-TAU, false, -3.0 * FRAC_PI_2, true, ActionConcept::TurnRight),
        (-3.0 * FRAC_PI_2, false, -FRAC_PI_2, false, ActionConcept::GoBack),
        (-FRAC_PI_2, true, 0.0, false, ActionConcept::TurnLeft),
        (0.0, false, FRAC_PI_2, true, ActionConcept::TurnRight),
        (FRAC_PI_2, false, 3.0 * FRAC_PI_2, false, ActionConcept::GoBack),
        (3.0 * FRAC_PI_2, true, TAU, false, ActionConcept::TurnLeft),
    ];
    if dpsi == 0.0 {
        return ActionConcept::GoForward;
    }
    for (lo, lo_in, hi, hi_in, a) in intervals {
        let above = if lo_in { dpsi >= lo } else { dpsi > lo };
        let below = if hi_in { dpsi <= hi } else { dpsi < hi };
        if above && below {
            return a;
        }
    }
    panic!("{dpsi} outside the table");
}

#[test]
fn table_boundaries() {
    for (d, a) in [
        (0.0, ActionConcept::GoForward),
        (FRAC_PI_2, ActionConcept::TurnRight),
        (-FRAC_PI_2, ActionConcept::TurnLeft),
        (PI, ActionConcept::GoBack),
        (-PI, ActionConcept::GoBack),
        (3.0 * FRAC_PI_2, ActionConcept::TurnLeft),
        (-3.0 * FRAC_PI_2, ActionConcept::TurnRight),
    ] {
        assert_eq!(map_action_concept(RelativeDirection::new(d, 0.0)).unwrap(), a, "{d}");
        assert_eq!(table(d, 0.0), a, "{d}");
    }
}

proptest! {
    #[test]
    fn matches_table(dpsi in -TAU + 1e-9..TAU - 1e-9, dtheta in prop_oneof![Just(0.0), -PI..PI]) {
        prop_assert_eq!(map_action_concept(RelativeDirection::new(dpsi, dtheta)).unwrap(), table(dpsi, dtheta));
    }

    #[test]
    fn shifting_heading_by_a_turn_keeps_the_action(dpsi in -TAU + 1e-6..TAU - 1e-6) {
        let shifted = if dpsi < 0.0 { dpsi + TAU } else { dpsi - TAU };
        prop_assume!(dpsi != 0.0);
        let a = map_action_concept(RelativeDirection::new(dpsi, 0.0)).unwrap();
        let b = map_action_concept(RelativeDirection::new(shifted, 0.0)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn elevation_wins(dpsi in -TAU + 1e-9..TAU - 1e-9, dtheta in 1e-6..PI) {
        prop_assert_eq!(map_action_concept(RelativeDirection::new(dpsi, dtheta)).unwrap(), ActionConcept::GoUp);
        prop_assert_eq!(map_action_concept(RelativeDirection::new(dpsi, -dtheta)).unwrap(), ActionConcept::GoDown);
    }

    #[test]
    fn distribution_is_a_softmax(seed in 0u64..1000, tau in 0.05f64..5.0) {
        let p = provider();
        let r = repo(&p);
        let v: Vec<f64> = (0..48).map(|i| ((seed * 31 + i) as f64 * 0.7).sin()).collect();
        let probs = concept_distribution(&Vector::new(v.clone()).unwrap(), &r, tau).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().all(|&x| x > 0.0));
        // scale invariance of cosine
        let scaled: Vec<f64> = v.iter().map(|x| 3.5 * x).collect();
        let q = concept_distribution(&Vector::new(scaled).unwrap(), &r, tau).unwrap();
        for (a, b) in probs.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_is_a_sorted_prefix(seed in 0u64..1000, k in 1usize..8) {
        let p = provider();
        let r = repo(&p);
        let v: Vec<f64> = (0..48).map(|i| ((seed * 17 + i) as f64 * 1.3).cos()).collect();
        let v = Vector::new(v).unwrap();
        let top = map_object_concepts(&v, &r, 0.5, k).unwrap();
        let full = concept_distribution(&v, &r, 0.5).unwrap();
        prop_assert_eq!(top.len(), k);
        prop_assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        let mut sorted = full.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for (i, (_, pr)) in top.iter().enumerate() {
            prop_assert_eq!(*pr, sorted[i]);
        }
        prop_assert!(top.iter().map(|t| t.1).sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn concept_feature_is_linear_in_weights(a in 0.0f64..0.5, b in 0.0f64..0.5, c in 0.0f64..1.0) {
        let p = provider();
        let lex = default_lexicon();
        let w = vec![(lex[0].clone(), a), (lex[1].clone(), b)];
        let half: Vec<(String, f64)> = w.iter().map(|(l, x)| (l.clone(), c * x)).collect();
        let f = encode_actional_concept(ActionConcept::TurnLeft, &w, &p).unwrap().feature;
        let g = encode_actional_concept(ActionConcept::TurnLeft, &half, &p).unwrap().feature;
        for (x, y) in f.iter().zip(g.iter()) {
            prop_assert!((c * x - y).abs() < 1e-12);
        }
        let e0 = p.text_embed(&format!("turn left {}", lex[0])).unwrap();
        let e1 = p.text_embed(&format!("turn left {}", lex[1])).unwrap();
        for i in 0..f.len() {
            prop_assert!((f[i] - (a * e0[i] + b * e1[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn probabilities_over_one_are_rejected() {
    let p = provider();
    let lex = default_lexicon();
    let w = vec![(lex[0].clone(), 0.7), (lex[1].clone(), 0.6)];
    assert!(encode_actional_concept(ActionConcept::GoForward, &w, &p).is_err());
}
