//! `dc3`: datasets, training, evaluation, proposals, simulated annotation
//! and the annotation service behind one binary.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running.

mod error;

use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dc3::dataset::{generate_synthetic, load_manifest, read_manifest_file, validate_manifest, Split, SplitCounts, SyntheticConfig, FUZZY_TOL};
use dc3::proposals::{
    build_report, generate_proposals_from_files, read_session_log, simulate_annotator, write_session_log,
    AnnotationSession, AnnotatorBehavior, ProposalMode, ProposalSet,
};
use dc3::ssl::SslName;
use dc3::trainer::{
    evaluate_checkpoint, export_embeddings, format_summary, run_suite, train, Method, RunConfig, TrainingData,
};
use dc3_service::ServiceConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "dc3", version, about = "Semi-supervised classification with overclustering for ambiguous labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or check dataset manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one run from a config file.
    Train(TrainArgs),
    /// Train several seeds and summarize them.
    Suite(SuiteArgs),
    /// Score a checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Write per-image embeddings, ambiguity and routing to CSV.
    ExportEmbeddings(ExportArgs),
    /// Turn a checkpoint's predictions into annotation proposals.
    Propose(ProposeArgs),
    /// Simulate annotators with or without proposals.
    Simulate(SimulateArgs),
    /// Consistency and speed-up report over session logs.
    Report(ReportArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Render a synthetic dataset with controllable ambiguity.
    Synth(SynthArgs),
    /// Check a manifest and the images it references.
    Validate {
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.2)]
    fuzzy_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    ambiguity_min: f64,
    #[arg(long, default_value_t = 0.8)]
    ambiguity_max: f64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    annotators: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    supervised_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value = "synthetic")]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override config-file keys.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// `dc3` or `vanilla`.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// `pseudo_label`, `pi_model` or `mean_teacher`.
    #[arg(long, value_parser = parse_ssl)]
    ssl: Option<SslName>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct SuiteArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// `validation`, `labeled`, `unlabeled` or `all`.
    #[arg(long, default_value = "validation", value_parser = parse_split)]
    split: SplitChoice,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// `dc3` or `ssl`.
    #[arg(long, value_parser = parse_proposal_mode)]
    mode: ProposalMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Proposal file; without it annotators work unassisted.
    #[arg(long)]
    proposals: Option<PathBuf>,
    /// JSON annotator behavior; defaults apply to missing keys.
    #[arg(long)]
    behavior: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    annotators: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Session logs, or directories holding `*.jsonl` logs.
    #[arg(long, num_args = 1.., required = true)]
    sessions: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Content root holding dataset directories.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Allowed UI origin; any origin when omitted.
    #[arg(long)]
    cors_origin: Option<String>,
    /// Session log directory; defaults to `<root>/sessions`.
    #[arg(long)]
    sessions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice(Option<Split>);

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "dc3" => Ok(Method::Dc3),
        "vanilla" => Ok(Method::Vanilla),
        _ => Err(format!("unknown method '{s}' (dc3, vanilla)")),
    }
}

fn parse_ssl(s: &str) -> Result<SslName, String> {
    s.parse().map_err(|e: dc3::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitChoice, String> {
    match s {
        "validation" => Ok(SplitChoice(Some(Split::Validation))),
        "labeled" => Ok(SplitChoice(Some(Split::Labeled))),
        "unlabeled" => Ok(SplitChoice(Some(Split::Unlabeled))),
        "all" => Ok(SplitChoice(None)),
        _ => Err(format!("unknown split '{s}'")),
    }
}

fn parse_proposal_mode(s: &str) -> Result<ProposalMode, String> {
    match s.parse() {
        Ok(ProposalMode::None) => Err("proposals need mode dc3 or ssl".into()),
        Ok(m) => Ok(m),
        Err(e) => Err(format!("{e}")),
    }
}

/// `outputs.json`: every file the command wrote under its run directory.
#[derive(Serialize)]
struct Outputs<'a> {
    command: &'a str,
    files: Vec<PathBuf>,
}

fn list_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(&p, base, out)?;
        } else if let Ok(rel) = p.strip_prefix(base) {
            out.push(rel.to_path_buf());
        }
    }
    Ok(())
}

fn write_outputs(command: &str, dir: &Path) -> Result<(), CliError> {
    let mut files = Vec::new();
    list_files(dir, dir, &mut files)?;
    files.retain(|f| f != Path::new("outputs.json"));
    write_json(&dir.join("outputs.json"), &Outputs { command, files })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Output files may name directories that do not exist yet.
fn create_parent(file: &Path) -> Result<(), CliError> {
    match file.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => create_dir(dir),
        _ => Ok(()),
    }
}

/// Config file, then flags; the result is validated before use.
fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path).map_err(CliError::Config)?;
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.method {
        cfg.method = v;
    }
    if let Some(v) = o.ssl {
        cfg.ssl.name = v;
    }
    if let Some(v) = &o.manifest {
        cfg.manifest = v.clone();
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn dataset_synth(a: SynthArgs) -> Result<(), CliError> {
    let cfg = SyntheticConfig {
        name: a.name,
        k: a.k,
        n_images: a.n,
        fuzzy_fraction: a.fuzzy_fraction,
        ambiguity_range: (a.ambiguity_min, a.ambiguity_max),
        image_size: a.size,
        annotators_per_image: a.annotators,
        seed: a.seed,
        supervised_fraction: a.supervised_fraction,
        val_fraction: a.val_fraction,
    };
    cfg.validate().map_err(CliError::Config)?;
    let m = generate_synthetic(&cfg, &a.out)?;
    let c = SplitCounts::of(&m);
    let fuzzy = m
        .items
        .iter()
        .filter(|i| i.gt_soft.as_ref().is_some_and(|g| g.is_fuzzy(FUZZY_TOL)))
        .count();
    write_outputs("dataset synth", &a.out)?;
    println!(
        "wrote {} images ({fuzzy} fuzzy), splits labeled/unlabeled/validation {}/{}/{} to {}",
        m.items.len(),
        c.labeled,
        c.unlabeled,
        c.validation,
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn dataset_validate(path: &Path) -> Result<(), CliError> {
    let file = read_manifest_file(path)?;
    let mut errors = validate_manifest(&file);
    let root = path.parent().unwrap_or(Path::new("."));
    for item in &file.items {
        if !root.join(&item.path).is_file() {
            errors.push(format!("item '{}': image {} not found", item.id, item.path.display()));
        }
    }
    if !errors.is_empty() {
        for e in &errors {
            eprintln!("{e}");
        }
        return Err(CliError::Invalid(format!("{} problem(s) in {}", errors.len(), path.display())));
    }
    let m = load_manifest(path)?;
    let c = SplitCounts::of(&m);
    println!(
        "ok: '{}', {} items, {} classes, splits labeled/unlabeled/validation {}/{}/{}",
        m.name,
        m.items.len(),
        m.num_classes,
        c.labeled,
        c.unlabeled,
        c.validation
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let data = TrainingData::load(&cfg)?;
    create_dir(&a.out)?;
    let run = train(&cfg, &data, Some(&a.out))?;
    write_outputs("train", &a.out)?;
    let m = &run.artifacts.final_metrics;
    if let Some(last) = run.artifacts.loss_history.last() {
        println!("step {}: {}", last.step, last.loss);
    }
    println!("{}", serde_json::to_string_pretty(m).unwrap_or_default());
    println!("artifacts in {}", a.out.display());
    Ok(())
}

fn cmd_suite(a: SuiteArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config, &a.overrides)?;
    if a.seeds == 0 {
        return Err(CliError::Config(dc3::Error::InvalidConfig("--seeds must be >= 1".into())));
    }
    let data = TrainingData::load(&cfg)?;
    create_dir(&a.out)?;
    let summary = run_suite(&cfg, &data, a.seeds, Some(&a.out))?;
    write_json(&a.out.join("summary.json"), &summary)?;
    write_outputs("suite", &a.out)?;
    print!("{}", format_summary(&summary));
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let m = evaluate_checkpoint(&a.checkpoint, &a.manifest, a.split.0)?;
    if let Some(out) = &a.out {
        write_json(out, &m)?;
    }
    println!("{}", serde_json::to_string_pretty(&m).unwrap_or_default());
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<(), CliError> {
    create_parent(&a.out)?;
    let n = export_embeddings(&a.checkpoint, &a.manifest, &a.out)?;
    println!("wrote {n} rows to {}", a.out.display());
    Ok(())
}

fn cmd_propose(a: ProposeArgs) -> Result<(), CliError> {
    let set = generate_proposals_from_files(&a.checkpoint, &a.manifest, a.mode)?;
    create_parent(&a.out)?;
    set.save(&a.out)?;
    let fuzzy: usize = set.clusters.iter().map(|c| c.members.len()).sum();
    println!(
        "{} proposals: {} certain, {fuzzy} fuzzy in {} clusters -> {}",
        set.mode,
        set.images.len() - fuzzy,
        set.clusters.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&a.manifest)?;
    let proposals = a.proposals.as_deref().map(ProposalSet::load).transpose()?;
    let behavior: AnnotatorBehavior = match &a.behavior {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(dc3::Error::InvalidConfig(format!("{}: {e}", p.display()))))?
        }
        None => AnnotatorBehavior::default(),
    };
    behavior.validate().map_err(CliError::Config)?;
    if a.annotators == 0 || a.repetitions == 0 {
        return Err(CliError::Config(dc3::Error::InvalidConfig(
            "--annotators and --repetitions must be >= 1".into(),
        )));
    }
    let images: Vec<_> = manifest
        .items
        .iter()
        .filter_map(|it| it.gt_soft.clone().map(|g| (it.image_id.clone(), g)))
        .collect();
    if images.is_empty() {
        return Err(CliError::Invalid("manifest has no annotated images".into()));
    }
    let mode = proposals.as_ref().map_or(ProposalMode::None, |p| p.mode);
    create_dir(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut sessions: Vec<AnnotationSession> = Vec::new();
    for i in 0..a.annotators {
        let annotator = format!("sim{i}");
        for rep in 1..=a.repetitions {
            let mut s = simulate_annotator(&annotator, rep, &images, proposals.as_ref(), &behavior, &mut rng)?;
            s.proposal_mode = mode;
            s.manifest = manifest.name.clone();
            write_session_log(&s, &a.out.join(format!("{annotator}_{mode}_r{rep}.jsonl")))?;
            sessions.push(s);
        }
    }
    write_outputs("simulate", &a.out)?;
    let report = build_report(&sessions);
    for s in &report.annotators {
        println!(
            "{} ({}): consistency {}, mean time {:.2}s",
            s.annotator,
            s.mode,
            s.consistency.map_or("-".into(), |c| format!("{c:.4}")),
            s.mean_time.unwrap_or(f64::NAN)
        );
    }
    println!("{} session logs in {}", sessions.len(), a.out.display());
    Ok(())
}

fn collect_logs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut logs: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            logs.sort();
            out.extend(logs);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let logs = collect_logs(&a.sessions)?;
    if logs.is_empty() {
        return Err(CliError::Invalid("no session logs found".into()));
    }
    let sessions = logs.iter().map(|p| read_session_log(p)).collect::<Result<Vec<_>, _>>()?;
    let report = build_report(&sessions);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let config = ServiceConfig {
        root: a.root,
        sessions_dir: a.sessions,
        cors_origin: a.cors_origin,
    };
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io("tokio runtime", e))?;
    println!("serving {} on http://{addr}", config.root.display());
    rt.block_on(dc3_service::serve(config, addr))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Dataset(DatasetCommand::Synth(a)) => dataset_synth(a),
        Command::Dataset(DatasetCommand::Validate { manifest }) => dataset_validate(&manifest),
        Command::Train(a) => cmd_train(a),
        Command::Suite(a) => cmd_suite(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::Propose(a) => cmd_propose(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
