//! Trains every requested mode on the same seeds and prints final
//! val-unseen-like SR per run and the mean per mode.
//!
//! cargo run --release -p aacl-core --example ablation -- [config.toml] [modes] [seeds]
//! e.g. `-- "" full,separate,baseline 0,1,2,3,4`

use std::time::Instant;

use aacl_core::agent::{build_dataset, build_resources, evaluate_policy, train, AgentConfig, Mode};
use aacl_core::world::Split;

fn main() -> aacl_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base = match args.first().filter(|s| !s.is_empty()) {
        Some(p) => AgentConfig::load(p)?,
        None => AgentConfig::default(),
    };
    let modes: Vec<Mode> = match args.get(1) {
        Some(s) => s.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![Mode::Full, Mode::Separate, Mode::Baseline],
    };
    let seeds: Vec<u64> = match args.get(2) {
        Some(s) => s.split(',').map(|x| x.parse().expect("seed")).collect(),
        None => (0..5).collect(),
    };
    for mode in modes {
        let mut srs = Vec::new();
        for &seed in &seeds {
            let c = AgentConfig { seed, mode, ..base.clone() };
            let t = Instant::now();
            let data = build_dataset(&c)?;
            let res = build_resources(&c, &data)?;
            let report = train(&c, &data, &res, None)?;
            let curve: Vec<String> = report
                .records
                .iter()
                .filter(|r| r.split == Split::ValUnseenLike.name())
                .map(|r| format!("{:.2}", r.sr))
                .collect();
            let sr = report.final_metrics(Split::ValUnseenLike).map_or(0.0, |r| r.sr);
            let worlds: Vec<_> = data.worlds().collect();
            let tr = evaluate_policy(&res, &c, &report.params, &worlds, &data.train, 1, false)?.aggregate.sr;
            let seen = report.final_metrics(Split::ValSeenLike).map_or(0.0, |r| r.sr);
            println!("{mode} seed {seed}: unseen SR {sr:.3} seen SR {seen:.3} train SR {tr:.3} [{}] {:.1}s", curve.join(" "), t.elapsed().as_secs_f64());
            srs.push(sr);
        }
        println!("{mode} mean SR {:.3}", srs.iter().sum::<f64>() / srs.len() as f64);
    }
    Ok(())
}
