//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, ErrorKind, Result};
use crate::evaluator::{self, LabeledCropSet, Split};
use crate::gradcheck;
use crate::jsonl;
use crate::miner::{self, dataset::FRAME_PAIRS_FILE, MiningMode, PairDataset};
use crate::model::{Checkpoint, Network, Profile, Tap};
use crate::synthgen::{self, CorpusSpec};
use crate::trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "slowregion", version, about = "Mine region pairs from video and train a triplet embedding")]
struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Proposal,
    Square,
    Frame,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TapArg {
    Pool,
    Fc,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic video corpus.
    Synth(SynthArgs),
    /// Mine region pairs from a corpus of frame directories.
    Mine(MineArgs),
    /// Train the embedding on a mined pair dataset.
    Train(TrainArgs),
    /// Nearest-neighbour retrieval on a labeled crop set.
    EvalRetrieval(EvalArgs),
    /// Write the first-layer filters as a PNG grid.
    ExportFilters(ExportArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Corpus spec (TOML); the built-in default when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write ground-truth labeled crops to this directory.
    #[arg(long)]
    labeled: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    crop_size: u32,
    #[arg(long, default_value_t = 1)]
    frame_stride: usize,
}

#[derive(Debug, Args)]
struct MineArgs {
    /// Corpus directory with one sub-directory of frames per video.
    #[arg(long, visible_alias = "corpus")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Write every frame's kept proposals to this JSON-lines file.
    #[arg(long)]
    dump_proposals: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; a randomly initialised network when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, value_enum, default_value = "pool")]
    tap: TapArg,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Io => EXIT_IO,
        ErrorKind::Runtime => EXIT_RUNTIME,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SLOWREGION_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        pool = pool.num_threads(n.max(1));
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let profile = cli.profile.map(Profile::from);
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, profile)?,
        None => RunConfig::for_profile(profile.unwrap_or_default()),
    };
    Ok(match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn required(flag: Option<&PathBuf>, file: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(file)
        .cloned()
        .ok_or_else(|| Error::Config(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Mine(a) => mine(cli, a),
        Command::Train(a) => train(cli, a),
        Command::EvalRetrieval(a) => eval_retrieval(cli, a),
        Command::ExportFilters(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            evaluator::export_filter_grid(&ck.network, &a.out)?;
            println!("wrote {}", a.out.display());
            Ok(EXIT_OK)
        }
        Command::Gradcheck => {
            let cfg = run_config(cli)?;
            let report = gradcheck::run(cfg.profile, cfg.seed)?;
            for r in &report.results {
                println!("{:<70} checked {:>5}  max rel err {:.3e}", r.name, r.checked, r.max_relative_error);
            }
            println!("max relative gradient error: {:.3e}", report.max_relative_error());
            Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<i32> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<CorpusSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
        }
        None => CorpusSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let truth = synthgen::generate_corpus(&spec.scenes()?, &a.out)?;
    println!("wrote {} videos to {}", spec.videos + spec.static_videos, a.out.display());
    if let Some(dir) = &a.labeled {
        let set = synthgen::labeled_crops_from_truth(&a.out, &truth, a.crop_size, a.frame_stride)?;
        set.save(dir)?;
        println!("wrote {} labeled crops to {}", set.len(), dir.display());
    }
    Ok(EXIT_OK)
}

fn mine(cli: &Cli, a: &MineArgs) -> Result<i32> {
    let mut cfg = run_config(cli)?;
    let corpus = required(a.input.as_ref(), cfg.paths.corpus.as_ref(), "input")?;
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
    if let Some(mode) = a.mode {
        cfg.mining.mode = match mode {
            ModeArg::Proposal => MiningMode::Proposal,
            ModeArg::Square => MiningMode::Square,
            ModeArg::Frame => MiningMode::Frame,
        };
    }
    let mined = miner::mine_corpus(&corpus, &cfg.mining)?;
    mined.dataset.save(&out)?;
    jsonl::write_records(&out.join(FRAME_PAIRS_FILE), &mined.frame_pairs)?;
    if let Some(path) = &a.dump_proposals {
        jsonl::write_records(path, &mined.proposal_dump)?;
    }
    for (video, message) in &mined.failures {
        eprintln!("warning: {video}: {message}");
    }
    println!(
        "mined {} pairs from {} videos into {}",
        mined.dataset.len(),
        mined.dataset.video_count(),
        out.display()
    );
    Ok(EXIT_OK)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let mut cfg = run_config(cli)?;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let data = required(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
    let ds = PairDataset::load(&data)?;
    let outcome = trainer::train(&ds, &cfg.train, &out, a.resume.as_deref())?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "iteration {}: mean hinge {:.4}, active fraction {:.3}",
            last.iteration, last.mean_hinge, last.active_fraction
        );
    }
    println!("checkpoints in {}", out.display());
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ReportNeighbor<'a> {
    crop_id: &'a str,
    label: u32,
    distance: f64,
}

#[derive(Serialize)]
struct ReportQuery<'a> {
    crop_id: &'a str,
    label: u32,
    neighbors: Vec<ReportNeighbor<'a>>,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    k: usize,
    tap: Tap,
    retrieval_rate: f64,
    queries: Vec<ReportQuery<'a>>,
}

fn load_network(ckpt: Option<&Path>, profile: Profile, seed: u64) -> Result<Network<f32>> {
    match ckpt {
        Some(path) => Ok(Checkpoint::load(path)?.network),
        None => Ok(trainer::initial_network(profile, seed)),
    }
}

fn eval_retrieval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let cfg = run_config(cli)?;
    let tap = match a.tap {
        TapArg::Pool => Tap::Pool,
        TapArg::Fc => Tap::Fc,
    };
    let net = load_network(a.ckpt.as_deref(), cfg.profile, cfg.seed)?;
    let set = LabeledCropSet::load(&a.data)?;
    let report = evaluator::retrieval_report(&net, &set, a.k, tap)?;
    let q_idx = set.indices(Split::Query);
    let d_idx = set.indices(Split::Database);
    let rate = report.retrieval_rate.unwrap_or(0.0);
    let file = ReportFile {
        k: a.k,
        tap,
        retrieval_rate: rate,
        queries: q_idx
            .iter()
            .zip(&report.neighbors)
            .map(|(&q, ns)| ReportQuery {
                crop_id: &set.records[q].crop_id,
                label: set.records[q].label,
                neighbors: ns
                    .iter()
                    .map(|n| ReportNeighbor {
                        crop_id: &set.records[d_idx[n.index]].crop_id,
                        label: set.records[d_idx[n.index]].label,
                        distance: n.distance,
                    })
                    .collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("report serialises");
    fs::write(&a.report, text).map_err(|e| Error::io(&a.report, e))?;
    println!("top-{} retrieval rate: {:.4}", a.k, rate);
    Ok(EXIT_OK)
}
