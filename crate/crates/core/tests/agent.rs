use std::time::Instant;

use aacl_core::agent::{
    build_dataset, build_resources, evaluate_policy, total_loss, train, AgentConfig, AgentParams, Mode,
};
use aacl_core::world::{Split, World};

fn small(seed: u64, mode: Mode) -> AgentConfig {
    let mut c = AgentConfig { seed, mode, epochs: 2, d_model: 16, scorer_hidden: 16, adapter_hidden: 32, ..Default::default() };
    c.provider.dim = 24;
    c.data.train_worlds = 2;
    c.data.val_worlds = 1;
    c.data.nodes_per_world = 12;
    c.data.train_episodes = 12;
    c.data.val_episodes = 6;
    c.rl_start_epoch = 1;
    c
}

fn run_log(c: &AgentConfig) -> Vec<u8> {
    let data = build_dataset(c).unwrap();
    let res = build_resources(c, &data).unwrap();
    let mut log = Vec::new();
    train(c, &data, &res, Some(&mut log)).unwrap();
    log
}

#[test]
fn same_seed_same_log() {
    let c = small(7, Mode::Full);
    let a = run_log(&c);
    assert!(!a.is_empty());
    assert_eq!(a, run_log(&c));
    assert_ne!(a, run_log(&AgentConfig { seed: 8, ..small(8, Mode::Full) }));
}

#[test]
fn one_epoch_on_ten_episodes_is_quick() {
    let mut c = AgentConfig { epochs: 1, ..Default::default() };
    c.data.train_episodes = 10;
    c.data.val_episodes = 10;
    let t = Instant::now();
    let data = build_dataset(&c).unwrap();
    let res = build_resources(&c, &data).unwrap();
    let rep = train(&c, &data, &res, None).unwrap();
    assert_eq!(rep.records.len(), 2);
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 10.0, "{secs} s");
}

fn memorization_config() -> AgentConfig {
    let mut c = AgentConfig {
        use_rl: false,
        lambda1: 1.0,
        lambda2: 0.0,
        dropout: 0.0,
        epochs: 5,
        ..Default::default()
    };
    c.data.train_worlds = 2;
    c.data.val_worlds = 0;
    c.data.train_episodes = 20;
    c.data.val_episodes = 20;
    c
}

#[test]
fn imitation_only_memorizes() {
    let c = memorization_config();
    let data = build_dataset(&c).unwrap();
    let res = build_resources(&c, &data).unwrap();
    let rep = train(&c, &data, &res, None).unwrap();
    let il: Vec<f64> = rep.records.iter().map(|r| r.losses.il).collect();
    assert_eq!(il.len(), 5);
    assert!(il.windows(2).all(|w| w[1] <= w[0]), "{il:?}");

    let long = AgentConfig { epochs: 30, ..c };
    let rep = train(&long, &data, &res, None).unwrap();
    let worlds: Vec<&World> = data.worlds().collect();
    let out = evaluate_policy(&res, &long, &rep.params, &worlds, data.split(Split::Train), 1, false).unwrap();
    assert_eq!(out.aggregate.sr, 1.0, "{:?}", out.aggregate);
}

#[test]
fn doubling_lambda2_doubles_the_contrast_term() {
    for (rl, il, lc) in [(0.3, 1.7, 2.2), (-1.0, 0.5, 0.01), (0.0, 0.0, 9.5)] {
        let base = total_loss(rl, il, lc, 0.2, 0.0).unwrap().total;
        let one = total_loss(rl, il, lc, 0.2, 0.7).unwrap().total - base;
        let two = total_loss(rl, il, lc, 0.2, 1.4).unwrap().total - base;
        assert!((two - 2.0 * one).abs() < 1e-12);
        assert!((one - 0.7 * lc).abs() < 1e-12);
    }
    assert_eq!(total_loss(1.0, 2.0, 3.0, 0.2, 1.0).unwrap().total, 4.4);
    assert!(total_loss(f64::NAN, 0.0, 0.0, 0.2, 1.0).unwrap_err().to_string().contains("rl"));
}

#[test]
fn trace_has_one_line_per_step_and_workers_agree() {
    let c = small(3, Mode::Full);
    let data = build_dataset(&c).unwrap();
    let res = build_resources(&c, &data).unwrap();
    let params = AgentParams::init(&c).unwrap();
    let worlds: Vec<&World> = data.worlds().collect();
    let eps = data.split(Split::ValUnseenLike);
    let one = evaluate_policy(&res, &c, &params, &worlds, eps, 1, true).unwrap();
    let steps: usize = one.trajectories.iter().map(|t| t.steps.len()).sum();
    assert_eq!(one.trace.len(), steps);
    let many = evaluate_policy(&res, &c, &params, &worlds, eps, 3, true).unwrap();
    assert_eq!(one.per_episode, many.per_episode);
    assert_eq!(one.trace, many.trace);
}

#[test]
fn every_mode_trains() {
    for mode in Mode::ALL {
        let c = AgentConfig { epochs: 1, ..small(1, mode) };
        let data = build_dataset(&c).unwrap();
        let res = build_resources(&c, &data).unwrap();
        let rep = train(&c, &data, &res, None).unwrap();
        assert!(rep.records.iter().all(|r| r.losses.total.is_finite()), "{mode}");
        if !mode.uses_contrast() {
            assert!(rep.records.iter().all(|r| (r.losses.total - r.losses.rl - 0.2 * r.losses.il).abs() < 1e-9));
        }
    }
}

#[test]
fn unknown_mode_lists_the_valid_ones() {
    let e = "sideways".parse::<Mode>().unwrap_err().to_string();
    for m in Mode::ALL {
        assert!(e.contains(m.name()), "{e}");
    }
    assert_eq!("w/o refine".parse::<Mode>().unwrap(), Mode::WithoutRefine);
}
