//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the lines always show; exits nonzero if any criterion fails.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use aacl_core::adapter::{refine_image_feature, rerank_topk, AdapterParams};
use aacl_core::agent::{build_dataset, build_resources, train, AgentConfig, Mode};
use aacl_core::checks::{adapter_learning_check, gradient_suite, GRAD_EPS, GRAD_TOL};
use aacl_core::coembed::{observation_contrast_loss, ObservationEmbedding};
use aacl_core::concept::{map_action_concept, map_object_concepts, ActionConcept, ConceptRepository, Direction, RelativeDirection};
use aacl_core::embedding::{default_lexicon, EmbeddingStore, SyntheticProvider, SyntheticProviderConfig, EmbeddingProvider};
use aacl_core::numeric::Vector;
use aacl_core::rng;
use aacl_core::world::{evaluate_trajectory, panorama_at, Episode, Split, TrajectoryRecord, World};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// action table

/// Brute-force reading of the heading table: walk the six half-open ranges
/// and the single zero point.
fn table_oracle(dpsi: f64, dtheta: f64) -> ActionConcept {
    if dtheta > 0.0 {
        return ActionConcept::GoUp;
    }
    if dtheta < 0.0 {
        return ActionConcept::GoDown;
    }
    if dpsi == 0.0 {
        return ActionConcept::GoForward;
    }
    let q = FRAC_PI_2;
    if (dpsi > -TAU && dpsi <= -3.0 * q) || (dpsi > 0.0 && dpsi <= q) {
        ActionConcept::TurnRight
    } else if (dpsi > -3.0 * q && dpsi < -q) || (dpsi > q && dpsi < 3.0 * q) {
        ActionConcept::GoBack
    } else if (dpsi >= -q && dpsi < 0.0) || (dpsi >= 3.0 * q && dpsi < TAU) {
        ActionConcept::TurnLeft
    } else {
        unreachable!("{dpsi} outside (-2pi, 2pi)")
    }
}

fn table_grid() -> Outcome {
    let t = Instant::now();
    let mut psis: Vec<f64> = (-628..=628).map(|i| f64::from(i) * 0.01).collect();
    psis.extend([-3.0 * FRAC_PI_2, -PI, -FRAC_PI_2, FRAC_PI_2, PI, 3.0 * FRAC_PI_2]);
    let thetas: Vec<f64> = (-314..=314).map(|j| f64::from(j) * 0.01).collect();
    let mut n = 0usize;
    let mut bad = Vec::new();
    for &dpsi in &psis {
        for &dtheta in &thetas {
            n += 1;
            let got = map_action_concept(RelativeDirection::new(dpsi, dtheta));
            let want = table_oracle(dpsi, dtheta);
            if got.as_ref().ok() != Some(&want) {
                bad.push((dpsi, dtheta, got.map_err(|e| e.to_string()), want));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = bad.is_empty() && secs < 5.0;
    let mut d = format!("{} of {n} grid points agree, {secs:.2} s (limit 5 s)", n - bad.len());
    if let Some(b) = bad.first() {
        d += &format!("; first disagreement {b:?}");
    }
    outcome(pass, d)
}

fn table_invariants() -> Outcome {
    let mut r = rng::stream(0, "acceptance-invariants");
    let samples = 1_000_000;
    let (mut periodic, mut precedence) = (0usize, 0usize);
    for _ in 0..samples {
        // a heading difference and its 2pi partner, both inside (-2pi, 2pi)
        let dpsi: f64 = r.gen_range(1e-9..TAU - 1e-9);
        let dtheta = if r.gen_bool(0.5) { 0.0 } else { r.gen_range(-PI..PI) };
        let a = map_action_concept(RelativeDirection::new(dpsi, dtheta)).ok();
        let b = map_action_concept(RelativeDirection::new(dpsi - TAU, dtheta)).ok();
        if a.is_none() || a != b {
            periodic += 1;
        }
        let e: f64 = r.gen_range(1e-9..PI);
        let any = r.gen_range(-TAU + 1e-9..TAU - 1e-9);
        let up = map_action_concept(RelativeDirection::new(any, e)).ok();
        let down = map_action_concept(RelativeDirection::new(any, -e)).ok();
        if up != Some(ActionConcept::GoUp) || down != Some(ActionConcept::GoDown) {
            precedence += 1;
        }
    }
    outcome(
        periodic == 0 && precedence == 0,
        format!("{samples} samples each: {periodic} periodicity and {precedence} elevation-precedence violations"),
    )
}

// ---------------------------------------------------------------------------
// gradients and losses

fn gradients() -> Outcome {
    let t = Instant::now();
    match gradient_suite(0, GRAD_EPS, GRAD_TOL) {
        Ok(entries) => {
            let secs = t.elapsed().as_secs_f64();
            let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
            let failed: Vec<String> = entries.iter().filter(|e| !e.passed()).map(|e| format!("{} {}", e.module, e.check)).collect();
            outcome(
                failed.is_empty() && secs < 60.0,
                format!(
                    "{} checks at eps {GRAD_EPS:e}, tol {GRAD_TOL:e}; worst rel err {worst:.2e}; {secs:.2} s (limit 60 s){}",
                    entries.len(),
                    if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
                ),
            )
        }
        Err(e) => outcome(false, format!("suite did not run: {e}")),
    }
}

fn view(vis: &[f64], u: &[f64]) -> ObservationEmbedding {
    let vis = Vector::new(vis.to_vec()).unwrap();
    let u = Vector::new(u.to_vec()).unwrap();
    ObservationEmbedding {
        o_v: vis.clone(),
        o_a: Vector::zeros(vis.len()),
        o_prime: vis.add(&u).unwrap(),
        o_vis: vis,
        o_u: u,
    }
}

fn contrast_closed_forms() -> Outcome {
    let tau = 0.5;
    let n1 = observation_contrast_loss(&[view(&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.5])], tau).unwrap().loss;
    // all four similarities equal to 1
    let same = [view(&[1.0, 2.0], &[2.0, 4.0]), view(&[1.0, 2.0], &[0.5, 1.0])];
    let n2 = observation_contrast_loss(&same, tau).unwrap().loss;
    let e2 = (n2 - 2.0 * 2f64.ln()).abs();

    let mut r = rng::stream(0, "acceptance-contrast");
    let mut worst3: f64 = 0.0;
    for _ in 0..100 {
        let vs: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| ((0..5).map(|_| r.gen_range(-1.0..1.0)).collect(), (0..5).map(|_| r.gen_range(-1.0..1.0)).collect()))
            .collect();
        let got = observation_contrast_loss(&vs.iter().map(|(a, b)| view(a, b)).collect::<Vec<_>>(), tau).unwrap().loss;
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut want = 0.0;
        for n in 0..3 {
            let num = (cos(&vs[n].0, &vs[n].1) / tau).exp();
            let den: f64 = (0..3).map(|m| (cos(&vs[n].0, &vs[m].1) / tau).exp()).sum();
            want += -(num / den).ln();
        }
        worst3 = worst3.max((got - want).abs());
    }
    outcome(
        n1 == 0.0 && e2 < 1e-9 && worst3 < 1e-9,
        format!("N=1 loss {n1}; N=2 |loss - 2 log 2| = {e2:.1e}; N=3 max |loss - oracle| over 100 cases = {worst3:.1e} (tol 1e-9)"),
    )
}

// ---------------------------------------------------------------------------
// adapter and concept mapping

fn argsort_desc(v: &[f64]) -> Vec<usize> {
    let mut i: Vec<usize> = (0..v.len()).collect();
    i.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    i
}

fn degenerate_adapter() -> Outcome {
    let mut r = rng::stream(0, "acceptance-alpha");
    let (dim, labels, k) = (16, 10, 5);
    let mut mismatches = 0;
    let cases = 1000;
    for case in 0..cases {
        let mut store = EmbeddingStore::new(dim).unwrap();
        let names: Vec<String> = (0..labels).map(|i| format!("object{i}")).collect();
        for n in &names {
            let v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
            store.insert_text(&format!("a photo of a {n}"), v).unwrap();
        }
        let repo = ConceptRepository::from_labels(&names, &store).unwrap();
        let rand_vec = |r: &mut rng::Rng| Vector::new((0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let f = rand_vec(&mut r);
        let cls = rand_vec(&mut r);
        let adapter = AdapterParams::init(dim, 8, 1.0, &mut rng::substream(0, "acceptance-adapter", case)).unwrap();
        let top = map_object_concepts(&f, &repo, 0.5, k).unwrap();
        let texts: Vec<Vector> = top.iter().map(|(l, _)| repo.get(l).unwrap().text_feature.clone()).collect();
        let refined = refine_image_feature(&f, &cls, &adapter).unwrap();
        let pt = rerank_topk(&refined, &texts).unwrap();
        let p: Vec<f64> = top.iter().map(|t| t.1).collect();
        if argsort_desc(&pt) != argsort_desc(&p) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("alpha = 1: re-ranked order equals mapping order on {} of {cases} cases", cases - mismatches))
}

fn planted_recovery() -> Outcome {
    let provider = SyntheticProvider::new(SyntheticProviderConfig { noise_sigma: 0.0, ..Default::default() }).unwrap();
    let repo = ConceptRepository::from_labels(&default_lexicon(), &provider).unwrap();
    let data = build_dataset(&AgentConfig::default()).unwrap();
    let (mut views, mut hits) = (0usize, 0usize);
    for w in data.worlds() {
        for node in 0..w.len() {
            let pano = panorama_at(w, node, Direction::horizontal(0.0)).unwrap();
            for v in &pano.views {
                views += 1;
                let f = provider.image_embed(v).unwrap();
                let top = map_object_concepts(&f, &repo, 0.5, 1).unwrap();
                if top[0].0 == v.label {
                    hits += 1;
                }
            }
        }
    }
    outcome(hits == views && views > 0, format!("noise 0: top-1 concept is the planted label on {hits} of {views} views"))
}

fn adapter_learning() -> Outcome {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut ok = 0;
    for seed in 0..5 {
        match adapter_learning_check(seed, 200, 0.1, 8) {
            Ok(a) => {
                if a.after > a.before {
                    ok += 1;
                }
                lines.push(format!("{:.3}->{:.3}", a.before, a.after));
            }
            Err(e) => lines.push(format!("error {e}")),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        ok == 5 && secs < 30.0,
        format!("mean p~ of ground truth rose on {ok}/5 seeds [{}]; {secs:.2} s (limit 30 s)", lines.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// training

fn ablation() -> Outcome {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let base = AgentConfig::default();
    let mut means = Vec::new();
    let mut per = Vec::new();
    for mode in [Mode::Full, Mode::Separate, Mode::Baseline] {
        let mut srs = Vec::new();
        for &seed in &seeds {
            let c = AgentConfig { seed, mode, ..base.clone() };
            let sr = build_dataset(&c)
                .and_then(|d| build_resources(&c, &d).map(|r| (d, r)))
                .and_then(|(d, r)| train(&c, &d, &r, None))
                .map(|rep| rep.final_metrics(Split::ValUnseenLike).map_or(f64::NAN, |m| m.sr));
            match sr {
                Ok(v) => srs.push(v),
                Err(e) => return outcome(false, format!("{mode} seed {seed} failed: {e}")),
            }
        }
        let mean = srs.iter().sum::<f64>() / srs.len() as f64;
        per.push(format!("{mode} {mean:.3} [{}]", srs.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>().join(" ")));
        means.push(mean);
    }
    let (full, sep, base_sr) = (means[0], means[1], means[2]);
    let secs = t.elapsed().as_secs_f64();
    let gap = 100.0 * (full - sep);
    let pass = full > sep && full >= base_sr && gap >= 5.0 && secs < 600.0;
    outcome(
        pass,
        format!(
            "val-unseen-like SR over seeds 0-4, {} train episodes: {}; full - separate = {gap:.1} points (need >= 5), full >= baseline: {}; {secs:.0} s (limit 600 s)",
            base.data.train_episodes,
            per.join("; "),
            full >= base_sr
        ),
    )
}

/// Triangle of unit edges: going 0 -> 2 -> 1 is twice the direct 0 -> 1.
fn triangle() -> World {
    let node = |id: usize, x: i32, y: i32| serde_json::json!({"id": id, "level": 0, "x": x, "y": y, "room": "kitchen"});
    let links = [(0, 1, 0.0), (0, 2, 1.0), (1, 0, PI), (1, 2, 2.0), (2, 0, 3.0), (2, 1, 4.0)];
    let mut views = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut edges = Vec::new();
    for (from, to, heading) in links {
        let v = views[from].len();
        views[from].push(serde_json::json!({"heading": heading, "elevation": 0.0, "label": "kitchen", "target": to}));
        edges.push(serde_json::json!({"from": from, "to": to, "heading": heading, "elevation": 0.0, "length": 1.0, "view": v}));
    }
    let w = serde_json::json!({
        "format_version": 1, "id": "triangle", "seed": 0, "n_levels": 1,
        "nodes": [node(0, 0, 0), node(1, 1, 0), node(2, 0, 1)],
        "edges": edges, "views": views,
    });
    World::from_json_str(&w.to_string(), Path::new("triangle")).unwrap()
}

fn metrics_cases() -> Outcome {
    let w = triangle();
    let ep = Episode {
        id: "e".into(),
        world_id: w.id.clone(),
        split: Split::Train,
        start: 0,
        goal: 1,
        start_heading: Direction::horizontal(0.0),
        gt_path: vec![0, 1],
        instruction: Vec::new(),
    };
    let run = |nodes: Vec<usize>| {
        let rec = TrajectoryRecord { episode_id: "e".into(), nodes, steps: Vec::new(), stopped: true, length: 0.0 };
        evaluate_trajectory(&rec, &ep, &w, 0.0)
    };
    let perfect = run(vec![0, 1]);
    let double = run(vec![0, 2, 1]);
    let wrong = run(vec![0]);
    let pass = (perfect.sr, perfect.spl, perfect.ne, perfect.tl) == (1.0, 1.0, 0.0, 1.0)
        && (double.sr, double.spl, double.ne, double.tl) == (1.0, 0.5, 0.0, 2.0)
        && (wrong.sr, wrong.spl, wrong.ne, wrong.tl) == (0.0, 0.0, 1.0, 0.0);
    outcome(
        pass,
        format!(
            "perfect SPL {}, double-length SPL {}, immediate wrong stop SR {} SPL {} NE {}",
            perfect.spl, double.spl, wrong.sr, wrong.spl, wrong.ne
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_aacl"))
            .args(["train", "--seed", "0", "--out", out.to_str().unwrap()])
            .env("AACL_LOG", "error")
            .output()
            .unwrap();
        if !o.status.success() {
            return outcome(false, format!("train exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
        }
        logs.push(std::fs::read(out.join("metrics.jsonl")).unwrap());
    }
    let lines = String::from_utf8_lossy(&logs[0]).lines().count();
    outcome(
        logs[0] == logs[1] && lines > 0,
        format!("two `train --seed 0` runs: metrics logs of {lines} lines are {}", if logs[0] == logs[1] { "bit-identical" } else { "different" }),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("action table oracle on 0.01 rad grid", table_grid),
        ("2pi periodicity and elevation precedence", table_invariants),
        ("gradient suite", gradients),
        ("contrast loss closed forms", contrast_closed_forms),
        ("alpha = 1 keeps the mapping order", degenerate_adapter),
        ("planted-label recovery at zero noise", planted_recovery),
        ("adapter learning", adapter_learning),
        ("ablation ordering", ablation),
        ("navigation metrics cases", metrics_cases),
        ("training determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
