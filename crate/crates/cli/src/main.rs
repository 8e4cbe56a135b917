//! `aacl`: generate toy worlds, train and evaluate the navigator, and inspect
//! what it sees.

mod docs;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aacl_core::agent::{
    build_dataset, build_resources, evaluate_policy, read_view, train, AgentConfig, AgentParams, Dataset, Mode,
    Resources,
};
use aacl_core::checks::{gradient_suite, GRAD_EPS, GRAD_TOL};
use aacl_core::concept::{build_repository, Direction};
use aacl_core::embedding::{default_lexicon, load_store, make_synthetic, Provider, SyntheticProviderConfig};
use aacl_core::world::{generate_episodes, generate_world, Episode, EpisodeFile, Split, World};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aacl", version, about = "Concept-aware navigation agent on synthetic worlds")]
#[command(after_help = "Set AACL_LOG to error, info or debug to control log output (default info).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and write it as JSON.
    GenWorld(GenWorld),
    /// Generate episodes in a world.
    GenEpisodes(GenEpisodes),
    /// Build a concept repository from episode instructions.
    BuildRepo(BuildRepo),
    /// Train an agent; writes checkpoint.json, metrics.jsonl and config.toml.
    Train(TrainArgs),
    /// Evaluate a trained agent and print aggregate metrics as JSON.
    Eval(EvalArgs),
    /// Write a per-step trace of greedy rollouts as line-delimited JSON.
    Trace(TraceArgs),
    /// Print the actional concept of a single view.
    MapView(MapView),
    /// Run the finite-difference gradient suite and print a report.
    GradCheck(GradCheck),
    /// Print the documentation of the file formats.
    ExportFormatDocs(ExportFormatDocs),
}

#[derive(Args)]
struct Output {
    /// Output path.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenWorld {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    /// Label file, one per line; defaults to the built-in lexicon.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct GenEpisodes {
    #[arg(long)]
    world: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Longest ground-truth path, in nodes.
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct BuildRepo {
    /// Episode file whose instructions form the corpus.
    #[arg(long)]
    episodes: PathBuf,
    /// Embedding export to use instead of the synthetic provider.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Seed of the synthetic provider.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

/// Where a trained agent comes from.
#[derive(Args)]
struct RunSource {
    /// Directory written by `train`.
    #[arg(long, required_unless_present_all = ["config", "checkpoint"])]
    run: Option<PathBuf>,
    /// Config file; overrides the one in `--run`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint file; overrides the one in `--run`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (TOML); built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: RunSource,
    #[arg(long, default_value = "val_unseen_like", value_parser = parse_split)]
    split: Split,
    /// Evaluate only the first N episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Episode file to evaluate instead of a generated split; needs `--world`.
    #[arg(long, requires = "world")]
    episode_file: Option<PathBuf>,
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Also write the step trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    source: RunSource,
    #[arg(long, default_value = "val_unseen_like", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    episodes: Option<usize>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct MapView {
    /// Trained run to read the adapter and config from; a fresh model otherwise.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// World file; defaults to the first training world of the config.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    node: usize,
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Heading the agent arrived with, in radians.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    prev_heading: f64,
    /// Instruction steps, `;`-separated. Enables re-ranking.
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = GRAD_EPS)]
    eps: f64,
    #[arg(long, default_value_t = GRAD_TOL)]
    tol: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportFormatDocs {
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn parse_split(s: &str) -> Result<Split, String> {
    let s = s.replace('-', "_");
    let s = match s.as_str() {
        "val_seen" => "val_seen_like",
        "val_unseen" => "val_unseen_like",
        other => other,
    };
    Split::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: aacl_core::Error| e.to_string())
}

/// Exit status plus message.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
}

impl From<aacl_core::Error> for Failure {
    fn from(e: aacl_core::Error) -> Self {
        use aacl_core::Error as E;
        let code = match e {
            E::Io { .. } | E::NonFinite(_) => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

type Res<T> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn check_free(path: &Path, force: bool) -> Res<()> {
    if path.exists() && !force {
        return Err(Failure::invalid(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn create(path: &Path, force: bool) -> Res<BufWriter<File>> {
    check_free(path, force)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, force: bool, text: &str) -> Res<()> {
    let mut f = create(path, force)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| io_err(path, e))
}

fn read_lexicon(path: Option<&Path>) -> Res<Vec<String>> {
    let Some(p) = path else { return Ok(default_lexicon()) };
    let s = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
    let labels: Vec<String> = s.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if labels.is_empty() {
        return Err(Failure::invalid(format!("{}: no labels", p.display())));
    }
    Ok(labels)
}

fn gen_world(a: GenWorld) -> Res<()> {
    check_free(&a.output.out, a.output.force)?;
    let lexicon = read_lexicon(a.lexicon.as_deref())?;
    let w = generate_world(a.seed, a.nodes, a.levels, &lexicon)?;
    write_text(&a.output.out, a.output.force, &w.to_json_string())?;
    log::info!("world {} with {} nodes and {} edges", w.id, w.len(), w.edges.len() / 2);
    Ok(())
}

fn gen_episodes(a: GenEpisodes) -> Res<()> {
    check_free(&a.output.out, a.output.force)?;
    let w = World::load(&a.world)?;
    let eps = generate_episodes(&w, a.seed, a.count, a.max_len, a.split)?;
    let s = serde_json::to_string_pretty(&EpisodeFile::new(eps)).expect("episodes serialize");
    write_text(&a.output.out, a.output.force, &s)
}

fn build_repo(a: BuildRepo) -> Res<()> {
    check_free(&a.output.out, a.output.force)?;
    let eps = EpisodeFile::load(&a.episodes)?.episodes;
    let lexicon = read_lexicon(a.lexicon.as_deref())?;
    let provider = match &a.embeddings {
        Some(p) => Provider::Store(load_store(p)?),
        None => Provider::Synthetic(make_synthetic(SyntheticProviderConfig {
            seed: a.seed,
            lexicon: lexicon.clone(),
            ..Default::default()
        })?),
    };
    let corpus: Vec<String> = eps.iter().map(Episode::text).collect();
    let repo = build_repository(&corpus, &lexicon, &provider)?;
    write_text(&a.output.out, a.output.force, &repo.to_json_string())?;
    println!("{} concepts", repo.len());
    Ok(())
}

const CHECKPOINT: &str = "checkpoint.json";
const METRICS: &str = "metrics.jsonl";
const CONFIG: &str = "config.toml";

fn train_cmd(a: TrainArgs) -> Res<()> {
    let mut config = match &a.config {
        Some(p) => AgentConfig::load(p)?,
        None => AgentConfig::default(),
    };
    if let Some(m) = a.mode {
        config.mode = m;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.validate()?;
    for name in [CHECKPOINT, METRICS, CONFIG] {
        check_free(&a.out.join(name), a.force)?;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_text(&a.out.join(CONFIG), true, &config.to_toml_string())?;
    let data = build_dataset(&config)?;
    let res = build_resources(&config, &data)?;
    let metrics = a.out.join(METRICS);
    let mut log = create(&metrics, true)?;
    let report = train(&config, &data, &res, Some(&mut log))?;
    log.flush().map_err(|e| io_err(&metrics, e))?;
    report.params.save(a.out.join(CHECKPOINT), config.mode)?;
    if let Some(last) = report.records.last() {
        println!("{}", serde_json::to_string(last).expect("record serializes"));
    }
    Ok(())
}

struct Loaded {
    config: AgentConfig,
    data: Dataset,
    res: Resources,
    params: AgentParams,
}

fn load_run(src: &RunSource) -> Res<Loaded> {
    let pick = |explicit: &Option<PathBuf>, name: &str| -> Res<PathBuf> {
        match (explicit, &src.run) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => Err(Failure::invalid(format!("need --run or --{}", name.trim_end_matches(".json").trim_end_matches(".toml")))),
        }
    };
    let config = AgentConfig::load(pick(&src.config, CONFIG)?)?;
    let params = AgentParams::load(pick(&src.checkpoint, CHECKPOINT)?, &config)?;
    let data = build_dataset(&config)?;
    let res = build_resources(&config, &data)?;
    Ok(Loaded { config, data, res, params })
}

fn take(eps: &[Episode], n: Option<usize>) -> &[Episode] {
    &eps[..n.unwrap_or(eps.len()).min(eps.len())]
}

fn write_trace(path: &Path, force: bool, trace: &[aacl_core::agent::TraceStep]) -> Res<()> {
    let mut f = create(path, force)?;
    for t in trace {
        let line = serde_json::to_string(t).expect("trace serializes");
        writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
    }
    f.flush().map_err(|e| io_err(path, e))
}

fn eval_cmd(a: EvalArgs) -> Res<()> {
    if let Some(t) = &a.trace {
        check_free(t, a.force)?;
    }
    if a.workers == 0 {
        return Err(Failure::invalid("--workers must be at least 1"));
    }
    let l = load_run(&a.source)?;
    let external;
    let (worlds, eps, split): (Vec<&World>, &[Episode], String) = match (&a.episode_file, &a.world) {
        (Some(ef), Some(wf)) => {
            external = (World::load(wf)?, EpisodeFile::load(ef)?.episodes);
            (vec![&external.0], take(&external.1, a.episodes), ef.display().to_string())
        }
        _ => (l.data.worlds().collect(), take(l.data.split(a.split), a.episodes), a.split.name().to_string()),
    };
    if eps.is_empty() {
        return Err(Failure::invalid(format!("split {split} has no episodes")));
    }
    let out = evaluate_policy(&l.res, &l.config, &l.params, &worlds, eps, a.workers, a.trace.is_some())?;
    if let Some(t) = &a.trace {
        write_trace(t, a.force, &out.trace)?;
    }
    let m = out.aggregate;
    let json = serde_json::json!({
        "split": split,
        "mode": l.config.mode.name(),
        "episodes": m.episodes,
        "NE": m.ne,
        "TL": m.tl,
        "SR": m.sr,
        "SPL": m.spl,
    });
    println!("{json}");
    Ok(())
}

fn trace_cmd(a: TraceArgs) -> Res<()> {
    check_free(&a.output.out, a.output.force)?;
    let l = load_run(&a.source)?;
    let worlds: Vec<&World> = l.data.worlds().collect();
    let eps = take(l.data.split(a.split), a.episodes);
    let out = evaluate_policy(&l.res, &l.config, &l.params, &worlds, eps, 1, true)?;
    write_trace(&a.output.out, a.output.force, &out.trace)?;
    println!("{} steps over {} episodes", out.trace.len(), eps.len());
    Ok(())
}

fn map_view(a: MapView) -> Res<()> {
    let (config, params) = match &a.run {
        Some(dir) => {
            let c = AgentConfig::load(dir.join(CONFIG))?;
            let p = AgentParams::load(dir.join(CHECKPOINT), &c)?;
            (c, p)
        }
        None => {
            let c = AgentConfig { seed: a.seed, ..Default::default() };
            let p = AgentParams::init(&c)?;
            (c, p)
        }
    };
    let data = build_dataset(&config)?;
    let res = build_resources(&config, &data)?;
    let loaded;
    let world = match &a.world {
        Some(p) => {
            loaded = World::load(p)?;
            &loaded
        }
        None => data.train_worlds.first().ok_or_else(|| Failure::invalid("config generates no training worlds"))?,
    };
    let prev = Direction::new(a.prev_heading, 0.0)?;
    let steps: Option<Vec<String>> = a
        .instruction
        .as_ref()
        .map(|s| s.split(';').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect());
    let r = read_view(&res, &config, &params, world, a.node, prev, a.view, steps.as_deref())?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r).expect("reading serializes"));
        return Ok(());
    }
    println!("world {} node {} view {} ({}), planted label: {}", r.world_id, r.node, r.view, r.image_id, r.planted_label);
    println!("action: {}", r.action);
    println!("{:<12} {:>8} {:>8}", "object", "p", "p~");
    for o in &r.objects {
        let pt = o.p_tilde.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:<12} {:>8.4} {:>8}", o.label, o.p, pt);
    }
    Ok(())
}

fn grad_check(a: GradCheck) -> Res<()> {
    if !(a.eps > 0.0) || !(a.tol > 0.0) {
        return Err(Failure::invalid("--eps and --tol must be positive"));
    }
    let entries = gradient_suite(a.seed, a.eps, a.tol)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&entries).expect("report serializes"));
    } else {
        println!("{:<8} {:<44} {:>12} {:>8} {:>8}  result", "module", "check", "max rel err", "params", "seconds");
        for e in &entries {
            println!(
                "{:<8} {:<44} {:>12.3e} {:>8} {:>8.3}  {}",
                e.module,
                e.check,
                e.report.max_rel_error,
                e.report.checked,
                e.seconds,
                if e.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<String> = entries.iter().filter(|e| !e.passed()).map(|e| format!("{} {}", e.module, e.check)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!("gradient check failed: {}", failed.join("; "))))
    }
}

fn export_docs(a: ExportFormatDocs) -> Res<()> {
    match &a.out {
        Some(p) => write_text(p, a.force, docs::FORMATS),
        None => {
            print!("{}", docs::FORMATS);
            Ok(())
        }
    }
}

fn init_logging() -> Res<()> {
    let level = match std::env::var("AACL_LOG") {
        Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
            "" | "info" => log::LevelFilter::Info,
            "error" => log::LevelFilter::Error,
            "debug" => log::LevelFilter::Debug,
            other => return Err(Failure::invalid(format!("AACL_LOG={other:?}; expected error, info or debug"))),
        },
        Err(_) => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).target(env_logger::Target::Stderr).init();
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    init_logging()?;
    match cli.command {
        Command::GenWorld(a) => gen_world(a),
        Command::GenEpisodes(a) => gen_episodes(a),
        Command::BuildRepo(a) => build_repo(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Trace(a) => trace_cmd(a),
        Command::MapView(a) => map_view(a),
        Command::GradCheck(a) => grad_check(a),
        Command::ExportFormatDocs(a) => export_docs(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
