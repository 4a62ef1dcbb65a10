//! Command-line front end. Every command writes its artifacts and a single
//! `manifest.json` into `--out`.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{evaluate_knn, evaluate_plain, train_plain, BaselineConfig, BaselineKind};
use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_dataset, preset_split, read_csv, write_csv, Sample, SplitPools, DEFAULT_DATASET_SIZE, SPLIT_NAMES,
};
use crate::error::{Error, Result};
use crate::metatrain::{meta_evaluate, meta_train_with, EvalReport, MetaConfig, TaskMetrics};
use crate::net::{self, init_params, Ablation, ModelParams};
use crate::objective::Metrics;
use crate::oracle::{DesignVector, OracleConfig, Polarization};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "metafap", version, about = "Metasurface response surrogate with meta-learned frequency adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label random design points with the circuit oracle.
    Generate(GenerateArgs),
    /// Meta-train a model.
    Train(TrainArgs),
    /// Adapt a checkpoint on meta-test tasks and score it.
    Eval(EvalArgs),
    /// Train and score the complete model and both branch ablations.
    Ablate(TrainArgs),
    /// Train and score the comparison methods.
    Baseline(BaselineArgs),
    /// Measure single-sample prediction latency.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolArg {
    Te,
    Tm,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = DEFAULT_DATASET_SIZE)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file; only its `[oracle]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub polarization: Option<PolArg>,
    #[arg(long)]
    pub substrate_er: Option<f64>,
    #[arg(long)]
    pub substrate_tand: Option<f64>,
    #[arg(long)]
    pub substrate_thickness_mm: Option<f64>,
    /// Also write a frequency sweep of the first design at this GHz step.
    #[arg(long)]
    pub sweep_step_ghz: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset CSV; without it a default-size dataset is generated from the seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "primary")]
    pub split: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Print one line per epoch.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_n_support)]
    pub n_support: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineChoice {
    PlainDnn,
    Knn,
    All,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = BaselineChoice::All)]
    pub kind: BaselineChoice,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 10_000)]
    pub iterations: usize,
    /// Benchmark this checkpoint instead of a fresh default model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_n_support(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ (64 | 128 | 512 | 1024)) => Ok(n),
        _ => Err(format!("`{s}` is not one of 64, 128, 512, 1024")),
    }
}

/// Contents of a `--config` TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub meta: MetaConfig,
    pub oracle: OracleConfig,
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    pub timings: serde_json::Value,
    pub version: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

struct Run {
    command: &'static str,
    argv: Vec<String>,
    out: PathBuf,
    inputs: Vec<InputFile>,
    outputs: Vec<String>,
    start: Instant,
    phases: serde_json::Map<String, serde_json::Value>,
}

impl Run {
    fn new(command: &'static str, argv: &[String], out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Run {
            command,
            argv: argv.to_vec(),
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
            phases: serde_json::Map::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, contents)?;
        self.outputs.push(name.to_string());
        Ok(p)
    }

    fn phase(&mut self, name: &str, secs: f64) {
        self.phases.insert(format!("{name}_secs"), secs.into());
    }

    fn finish(mut self, seed: u64, config: serde_json::Value) -> Result<()> {
        self.phase("total", self.start.elapsed().as_secs_f64());
        let m = RunManifest {
            command: self.command.into(),
            argv: self.argv,
            seed,
            config,
            inputs: self.inputs,
            outputs: self.outputs,
            timings: serde_json::Value::Object(self.phases),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(self.out.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Resolved configuration and data shared by the training-style commands.
struct Setup {
    cfg: RunConfig,
    samples: Vec<Sample>,
}

fn setup(args: &DataArgs, run: &mut Run) -> Result<Setup> {
    let mut cfg = match &args.config {
        Some(p) => {
            run.input(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    cfg.meta.split = preset_split(&args.split)?;
    if let Some(seed) = args.seed {
        cfg.meta.seed = seed;
    }
    cfg.oracle.validate()?;
    let samples = match &args.data {
        Some(p) => {
            run.input(p)?;
            read_csv(p)?
        }
        None => {
            let t = Instant::now();
            let s = generate_dataset(DEFAULT_DATASET_SIZE, &cfg.oracle, cfg.meta.seed)?;
            run.phase("generate", t.elapsed().as_secs_f64());
            s
        }
    };
    Ok(Setup { cfg, samples })
}

fn say(line: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line.as_ref());
}

fn per_task_csv(rows: &[TaskMetrics]) -> String {
    let mut s = String::from("task,n_query,mse,mae,cc,support_mse\n");
    for t in rows {
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e}\n",
            t.task_id, t.n_query, t.query.mse, t.query.mae, t.query.cc, t.support_after.mse
        ));
    }
    s
}

fn print_metrics(label: &str, m: &Metrics) {
    say(format!("{label}: mse {:.6} mae {:.6} cc {:.2}%", m.mse, m.mae, m.cc * 100.0));
}

fn config_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

pub fn cmd_generate(args: &GenerateArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("generate", argv, &args.out)?;
    if args.samples == 0 {
        return Err(Error::Config("--samples must be >= 1".into()));
    }
    let mut cfg = match &args.config {
        Some(p) => {
            run.input(p)?;
            RunConfig::load(p)?.oracle
        }
        None => OracleConfig::default(),
    };
    if let Some(p) = args.polarization {
        cfg.polarization = match p {
            PolArg::Te => Polarization::Te,
            PolArg::Tm => Polarization::Tm,
        };
    }
    if let Some(v) = args.substrate_er {
        cfg.substrate_er = v;
    }
    if let Some(v) = args.substrate_tand {
        cfg.substrate_tand = v;
    }
    if let Some(v) = args.substrate_thickness_mm {
        cfg.substrate_thickness_mm = v;
    }
    cfg.validate()?;
    let t = Instant::now();
    let samples = generate_dataset(args.samples, &cfg, args.seed)?;
    run.phase("generate", t.elapsed().as_secs_f64());
    let path = args.out.join("dataset.csv");
    write_csv(&samples, &path)?;
    run.outputs.push("dataset.csv".into());
    if let Some(step) = args.sweep_step_ghz {
        if !(step > 0.0) {
            return Err(Error::Config("--sweep-step-ghz must be > 0".into()));
        }
        let grid = crate::data::frequency_grid(step);
        let sweep = crate::data::frequency_sweep(&samples[0].x, &grid, &cfg)?;
        let p = args.out.join("sweep.csv");
        write_csv(&sweep, &p)?;
        run.outputs.push("sweep.csv".into());
    }
    say(format!("wrote {} samples to {} (seed {})", samples.len(), path.display(), args.seed));
    run.finish(args.seed, serde_json::json!({ "samples": args.samples, "oracle": config_json(&cfg)? }))
}

fn train_one(cfg: &MetaConfig, pools: &SplitPools, verbose: bool) -> Result<(Checkpoint, crate::metatrain::TrainReport)> {
    meta_train_with(cfg, pools, |e| {
        if verbose {
            say(format!(
                "epoch {:>4} query_loss {:.6} val_mse {:.6} val_cc {:.4} lr {:.3e}",
                e.epoch, e.train_query_loss, e.val.mse, e.val.cc, e.outer_lr
            ));
        }
    })
}

pub fn cmd_train(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("train", argv, &args.data.out)?;
    let Setup { mut cfg, samples } = setup(&args.data, &mut run)?;
    if let Some(e) = args.epochs {
        cfg.meta.epochs = e;
    }
    cfg.meta.validate()?;
    let pools = SplitPools::build(&samples, &cfg.meta.split)?;
    say(format!("training on split {} with seed {}", cfg.meta.split.name.as_str(), cfg.meta.seed));
    let (ck, report) = train_one(&cfg.meta, &pools, args.verbose)?;
    run.phase("train", report.timings.train_secs);
    run.phase("test", report.timings.test_secs);
    run.write("checkpoint.json", &ck.to_text()?)?;
    run.write("report.json", &report.to_json()?)?;
    run.write("epochs.csv", &report.epoch_csv())?;
    run.write("metrics.txt", &report.test.to_kv_text())?;
    say(format!("best epoch {} (val mse {:.6})", report.best_epoch, report.best_val_loss));
    print_metrics("meta-test", &report.test);
    run.finish(cfg.meta.seed, config_json(&cfg.meta)?)
}

pub fn cmd_eval(args: &EvalArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("eval", argv, &args.data.out)?;
    let Setup { mut cfg, samples } = setup(&args.data, &mut run)?;
    if let Some(n) = args.n_support {
        cfg.meta.n_support = n;
    }
    run.input(&args.checkpoint)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    cfg.meta.architecture = ck.architecture().clone();
    cfg.meta.validate()?;
    let pools = SplitPools::build(&samples, &cfg.meta.split)?;
    let rep = if ck.meta.inner_steps == 0 {
        // plain checkpoints are scored zero-shot
        evaluate_plain(&ck, &pools, &cfg.meta)?
    } else {
        meta_evaluate(&ck, &pools.test, &cfg.meta)?
    };
    write_eval(&mut run, "", &rep)?;
    say(format!("n_support {}", cfg.meta.n_support));
    print_metrics("meta-test", &rep.metrics);
    run.finish(cfg.meta.seed, config_json(&cfg.meta)?)
}

fn write_eval(run: &mut Run, prefix: &str, rep: &EvalReport) -> Result<()> {
    run.write(&format!("{prefix}metrics.txt"), &rep.metrics.to_kv_text())?;
    run.write(&format!("{prefix}per_task.csv"), &per_task_csv(&rep.per_task))?;
    Ok(())
}

pub const ABLATIONS: [Ablation; 3] = [Ablation::Complete, Ablation::NoFreqBranch, Ablation::NoOtherBranch];

pub fn cmd_ablate(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("ablate", argv, &args.data.out)?;
    let Setup { mut cfg, samples } = setup(&args.data, &mut run)?;
    if let Some(e) = args.epochs {
        cfg.meta.epochs = e;
    }
    cfg.meta.validate()?;
    let pools = SplitPools::build(&samples, &cfg.meta.split)?;
    let mut summary = String::from("variant,param_count,mse,mae,cc\n");
    for ab in ABLATIONS {
        let mut c = cfg.meta.clone();
        c.architecture = c.architecture.with_ablation(ab);
        let (ck, report) = train_one(&c, &pools, args.verbose)?;
        run.phase(ab.name(), report.timings.total_secs);
        run.write(&format!("{}_checkpoint.json", ab.name()), &ck.to_text()?)?;
        run.write(&format!("{}_metrics.txt", ab.name()), &report.test.to_kv_text())?;
        let m = report.test;
        summary.push_str(&format!("{},{},{:e},{:e},{:e}\n", ab.name(), ck.params.len(), m.mse, m.mae, m.cc));
        print_metrics(ab.name(), &m);
    }
    run.write("summary.csv", &summary)?;
    run.finish(cfg.meta.seed, config_json(&cfg.meta)?)
}

pub fn cmd_baseline(args: &BaselineArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("baseline", argv, &args.data.out)?;
    let Setup { mut cfg, samples } = setup(&args.data, &mut run)?;
    if let Some(e) = args.epochs {
        cfg.baseline.epochs = e;
    }
    if let Some(k) = args.k {
        cfg.baseline.k = k;
    }
    cfg.baseline.validate()?;
    cfg.meta.validate()?;
    let pools = SplitPools::build(&samples, &cfg.meta.split)?;
    let kinds: &[BaselineKind] = match args.kind {
        BaselineChoice::PlainDnn => &[BaselineKind::PlainDnn],
        BaselineChoice::Knn => &[BaselineKind::Knn],
        BaselineChoice::All => &[BaselineKind::PlainDnn, BaselineKind::Knn],
    };
    for &kind in kinds {
        let t = Instant::now();
        let rep = match kind {
            BaselineKind::PlainDnn => {
                let (ck, report) = train_plain(&pools, &cfg.meta, &cfg.baseline)?;
                run.write("plain_dnn_checkpoint.json", &ck.to_text()?)?;
                run.write("plain_dnn_report.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
                if let Some(m) = report.in_distribution {
                    print_metrics("plain_dnn in-distribution", &m);
                }
                evaluate_plain(&ck, &pools, &cfg.meta)?
            }
            BaselineKind::Knn => evaluate_knn(&pools, &cfg.meta, cfg.baseline.k)?,
        };
        run.phase(kind.name(), t.elapsed().as_secs_f64());
        write_eval(&mut run, &format!("{}_", kind.name()), &rep)?;
        print_metrics(kind.name(), &rep.metrics);
    }
    run.finish(
        cfg.meta.seed,
        serde_json::json!({ "meta": config_json(&cfg.meta)?, "baseline": config_json(&cfg.baseline)? }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iterations: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        let n = ms.len();
        ms.sort_by(f64::total_cmp);
        let pct = |q: f64| if n == 0 { f64::NAN } else { ms[((n - 1) as f64 * q).round() as usize] };
        LatencyStats {
            iterations: n,
            mean_ms: ms.iter().sum::<f64>() / n.max(1) as f64,
            p50_ms: pct(0.5),
            p99_ms: pct(0.99),
        }
    }
}

/// Times single-sample eval-mode predictions of random designs.
pub fn bench_latency(p: &ModelParams, scaler: &crate::data::Scaler, iterations: usize, array_n: Option<u32>, seed: u64) -> Result<LatencyStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let designs: Vec<DesignVector> = (0..iterations.max(1))
        .map(|_| {
            let mut d = crate::data::random_design(&mut rng);
            if let Some(n) = array_n {
                d.array_n = n;
            }
            d
        })
        .collect();
    // warm-up
    for d in designs.iter().take(100) {
        std::hint::black_box(net::predict_batch(p, &[scaler.transform_design(d)])?);
    }
    let mut times = Vec::with_capacity(iterations);
    for d in designs.iter().take(iterations) {
        let t = Instant::now();
        let y = net::predict_batch(p, &[scaler.transform_design(d)])?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(y);
    }
    Ok(LatencyStats::from_samples(times))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub param_count: usize,
    pub all: LatencyStats,
    pub array_n2: LatencyStats,
    pub array_n6: LatencyStats,
}

pub fn cmd_bench(args: &BenchArgs, argv: &[String]) -> Result<()> {
    let mut run = match &args.out {
        Some(o) => Some(Run::new("bench", argv, o)?),
        None => None,
    };
    let (params, scaler) = match &args.checkpoint {
        Some(p) => {
            if let Some(r) = run.as_mut() {
                r.input(p)?;
            }
            let ck = Checkpoint::load(p)?;
            (ck.params, ck.scaler)
        }
        None => {
            let arch = crate::net::Architecture::default();
            let data = generate_dataset(2_000, &OracleConfig::default(), args.seed)?;
            (init_params(&arch, args.seed)?, crate::data::fit_scaler(&data)?)
        }
    };
    if args.iterations == 0 {
        return Err(Error::Config("--iterations must be >= 1".into()));
    }
    let rep = BenchReport {
        param_count: params.len(),
        all: bench_latency(&params, &scaler, args.iterations, None, args.seed)?,
        array_n2: bench_latency(&params, &scaler, args.iterations, Some(2), args.seed)?,
        array_n6: bench_latency(&params, &scaler, args.iterations, Some(6), args.seed)?,
    };
    say(format!("parameters: {}", rep.param_count));
    for (label, s) in [("all", &rep.all), ("array_n=2", &rep.array_n2), ("array_n=6", &rep.array_n6)] {
        say(format!(
            "{label:>10}: mean {:.4} ms  p50 {:.4} ms  p99 {:.4} ms  ({} runs)",
            s.mean_ms, s.p50_ms, s.p99_ms, s.iterations
        ));
    }
    if let Some(mut r) = run {
        r.write("bench.json", &(serde_json::to_string_pretty(&rep)? + "\n"))?;
        r.finish(args.seed, serde_json::json!({ "iterations": args.iterations }))?;
    }
    Ok(())
}

/// Sizes the global rayon pool from `METAFAP_THREADS` (0 or unset = automatic).
pub fn init_threads() -> Result<()> {
    let n = match std::env::var("METAFAP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("METAFAP_THREADS must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    if n > 0 {
        // a pool already built by an earlier call is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Ablate(a) => cmd_ablate(a, argv),
        Command::Baseline(a) => cmd_baseline(a, argv),
        Command::Bench(a) => cmd_bench(a, argv),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config(msg) = &e {
                if msg.contains("unknown split") {
                    eprintln!("valid splits: {}", SPLIT_NAMES.join(", "));
                }
            }
            exit_code(&e)
        }
    }
}
