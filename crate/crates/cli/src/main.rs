use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use far_core::attribution::{
    cls_saliency, export_heatmaps, token_dependency, DependencyOptions, Target,
};
use far_core::checkpoint::{save_checkpoint, Checkpoint};
use far_core::data::{synth_dataset, Dataset, SynthOptions};
use far_core::distill::{accuracy, run_phase, save_metrics_csv, EpochMetrics};
use far_core::par::Executor;
use far_core::profiler::{bench_latency, CostReport};
use far_core::prune::{three_stage_pipeline, write_retention_csv};
use far_core::runconfig::{RunConfig, ThresholdMode};
use far_core::{replace_attention, Error, Init, Model, Precision, Real, Result, Variant};

#[derive(Parser)]
#[command(name = "far", version, about = "BiLSTM attention replacement: train, distill, prune, profile")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every CPU. Overrides `train.threads` and FAR_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset file from `dataset-gen`; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Geometry {
    /// Checkpoint to profile; its geometry and masks are used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Model preset (desk, deit-tiny, deit-small, deit-base) instead of `[model]`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum, default_value_t = VariantArg::Far)]
    variant: VariantArg,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Attention,
    Far,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Attention => Variant::Attention,
            VariantArg::Far => Variant::Far,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Absolute,
    Relative,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic grating dataset.
    DatasetGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of samples; defaults to `train.dataset_size`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the attention teacher with cross-entropy.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Replace attention with BiLSTM blocks and distill block outputs.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Teacher checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Finetune all parameters with cross-entropy.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Regularize, threshold-prune and finetune a substitute model.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `prune.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum)]
        threshold_mode: Option<ModeArg>,
        /// Defaults to `prune.reg_coeff`.
        #[arg(long)]
        reg_coeff: Option<f64>,
        /// Retention CSV.
        #[arg(long)]
        retention: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print the parameter count.
    Params {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        geometry: Geometry,
    },
    /// Print the per-component cost report as CSV.
    Flops {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        geometry: Geometry,
        /// Also count normalization, softmax and pointwise ops.
        #[arg(long)]
        verbose: bool,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure single-image forward latency.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        geometry: Geometry,
        /// Defaults to `bench.runs`.
        #[arg(long)]
        runs: Option<usize>,
        /// Defaults to `bench.warmups`.
        #[arg(long)]
        warmups: Option<usize>,
    },
    /// Write saliency and token-dependency heatmaps for one validation image.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, value_enum, default_value_t = TargetArg::Norm)]
        target: TargetArg,
        /// Drop the reverse scans from the dependency map.
        #[arg(long)]
        forward_only: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Norm,
    Sum,
    Logit,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Norm => Target::Norm,
            TargetArg::Sum => Target::Sum,
            TargetArg::Logit => Target::Logit,
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.train.threads = t;
    }
    Ok(cfg)
}

fn executor(c: &Common, cfg: &RunConfig) -> Result<Executor> {
    match c.threads {
        Some(t) => Executor::with_threads(t),
        None => Executor::from_env(cfg.train.threads),
    }
}

fn dataset(arg: &DataArg, cfg: &RunConfig) -> Result<Dataset> {
    match &arg.data {
        Some(p) => Dataset::load(p),
        None => generate(cfg, cfg.train.dataset_size),
    }
}

fn generate(cfg: &RunConfig, n: usize) -> Result<Dataset> {
    let opts = SynthOptions {
        channels: cfg.model.channels,
        noise: cfg.train.noise,
    };
    synth_dataset(cfg.train.seed, n, cfg.model.num_classes, cfg.model.image_size, opts)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Calls `$f::<F>` with `F` chosen by `$prec`.
macro_rules! dispatch {
    ($prec:expr, $f:ident ( $($arg:expr),* )) => {
        match $prec {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn save_metrics(path: &Option<PathBuf>, rows: &[EpochMetrics], blocks: usize) -> Result<()> {
    match path {
        Some(p) => save_metrics_csv(p, rows, blocks),
        None => Ok(()),
    }
}

fn report_phase(name: &str, rows: &[EpochMetrics]) {
    if let Some(r) = rows.last() {
        println!(
            "{name}: {} epochs, final loss {:.4}, train acc {:.3}, val acc {:.3}",
            rows.len(),
            r.loss,
            r.acc,
            r.val_acc
        );
    }
}

fn train_teacher<F: Real>(cfg: &RunConfig, data: &Dataset, exec: &Executor, out: &Path, metrics: &Option<PathBuf>) -> Result<()> {
    let mut m = Model::<F>::new(cfg.model, Variant::Attention, Init::Seed(cfg.train.seed))?;
    let rep = run_phase(&mut m, None, data, &cfg.teacher_config(), exec)?;
    report_phase("teacher", &rep.rows);
    save_metrics(metrics, &rep.rows, 0)?;
    save_checkpoint(&m, out)
}

fn distill<F: Real>(cfg: &RunConfig, ck: Checkpoint, data: &Dataset, exec: &Executor, out: &Path, metrics: &Option<PathBuf>) -> Result<()> {
    let teacher = ck.into_model::<F>()?;
    if teacher.variant != Variant::Attention {
        return Err(Error::Config("distill needs an attention teacher checkpoint".into()));
    }
    let mut student = replace_attention(&teacher, cfg.train.seed.wrapping_add(1))?;
    let rep = run_phase(&mut student, Some(&teacher), data, &cfg.distill_config(), exec)?;
    report_phase("distill", &rep.rows);
    if let Some(c) = rep.rows.last().and_then(|r| r.cosine_mean()) {
        println!("distill: mean block cosine {c:.4}");
    }
    save_metrics(metrics, &rep.rows, teacher.config.layers)?;
    save_checkpoint(&student, out)
}

fn finetune<F: Real>(cfg: &RunConfig, ck: Checkpoint, data: &Dataset, exec: &Executor, out: &Path, metrics: &Option<PathBuf>) -> Result<()> {
    let mut m = ck.into_model::<F>()?;
    let rep = run_phase(&mut m, None, data, &cfg.finetune_config(), exec)?;
    report_phase("finetune", &rep.rows);
    save_metrics(metrics, &rep.rows, 0)?;
    save_checkpoint(&m, out)
}

struct PruneOut<'a> {
    out: &'a Path,
    retention: &'a Option<PathBuf>,
    metrics: &'a Option<PathBuf>,
}

fn prune<F: Real>(cfg: &RunConfig, ck: Checkpoint, data: &Dataset, exec: &Executor, paths: PruneOut<'_>) -> Result<()> {
    let mut m = ck.into_model::<F>()?;
    if m.variant != Variant::Far {
        return Err(Error::Config("prune needs a substitute checkpoint".into()));
    }
    let before = accuracy(&m, &data.val, exec)?;
    let rep = three_stage_pipeline(&mut m, data, &cfg.prune_config(), exec)?;
    let after = accuracy(&m, &data.val, exec)?;
    println!(
        "prune: {:?}, mean retention {:.3}, val acc {before:.3} -> {after:.3}",
        cfg.threshold(),
        rep.masks.mean_retention()
    );
    if let Some(p) = paths.retention {
        write_retention_csv(p, &rep.retention)?;
    }
    let mut rows = rep.regularize.rows.clone();
    rows.extend(rep.finetune.rows.iter().cloned());
    save_metrics(paths.metrics, &rows, 0)?;
    save_checkpoint(&m, paths.out)
}

/// Geometry, variant and masks for the profiling subcommands.
fn profile_target(cfg: &RunConfig, g: &Geometry) -> Result<(far_core::ModelConfig, Variant, Option<Checkpoint>)> {
    if let Some(p) = &g.checkpoint {
        let ck = read_checkpoint(p)?;
        return Ok((ck.config, ck.variant, Some(ck)));
    }
    let mut model = match &g.preset {
        Some(name) => far_core::ModelConfig::preset(name)?,
        None => cfg.model,
    };
    if let Some(s) = g.image_size {
        model = model.with_image_size(s);
    }
    model.validate()?;
    Ok((model, g.variant.into(), None))
}

fn cost_report(cfg: &RunConfig, g: &Geometry, verbose: bool) -> Result<(CostReport, Option<Checkpoint>)> {
    let (model, variant, ck) = profile_target(cfg, g)?;
    let masks = match &ck {
        Some(ck) => ck.clone().into_model::<f32>()?.masks().cloned(),
        None => None,
    };
    Ok((CostReport::new(&model, variant, masks.as_ref(), verbose)?, ck))
}

fn bench<F: Real>(model: Model<F>, warmups: usize, runs: usize, seed: u64) -> Result<far_core::profiler::LatencyStats> {
    bench_latency(&model, warmups, runs, seed)
}

fn attribute<F: Real>(ck: Checkpoint, data: &Dataset, args: &AttributeArgs) -> Result<()> {
    let m = ck.into_model::<F>()?;
    let sample = data
        .val
        .get(args.index)
        .or_else(|| data.train.get(args.index))
        .ok_or_else(|| Error::Config(format!("no sample at index {}", args.index)))?;
    let image = sample.image_as::<F>();
    let sal = cls_saliency(&m, &image, args.layer, args.head, args.target)?;
    let dep = token_dependency(&m, &image, args.layer, DependencyOptions { reverse: !args.forward_only })?;
    let files = export_heatmaps(
        &[
            (format!("saliency_l{}_h{}", args.layer, args.head), sal.map),
            (format!("dependency_l{}", args.layer), dep),
        ],
        &args.out,
    )?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

struct AttributeArgs {
    out: PathBuf,
    index: usize,
    layer: usize,
    head: usize,
    target: Target,
    forward_only: bool,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DatasetGen { common, out, n } => {
            let cfg = load_config(&common)?;
            let data = generate(&cfg, n.unwrap_or(cfg.train.dataset_size))?;
            data.save(&out)?;
            println!("wrote {} ({} train, {} val)", out.display(), data.train.len(), data.val.len());
        }
        Command::TrainTeacher { common, data, out, metrics } => {
            let cfg = load_config(&common)?;
            let exec = executor(&common, &cfg)?;
            let d = dataset(&data, &cfg)?;
            dispatch!(cfg.model.precision, train_teacher(&cfg, &d, &exec, &out, &metrics))?;
        }
        Command::Distill { common, data, checkpoint, out, metrics } => {
            let cfg = load_config(&common)?;
            let exec = executor(&common, &cfg)?;
            let d = dataset(&data, &cfg)?;
            let ck = read_checkpoint(&checkpoint)?;
            dispatch!(ck.config.precision, distill(&cfg, ck, &d, &exec, &out, &metrics))?;
        }
        Command::Finetune { common, data, checkpoint, out, metrics } => {
            let cfg = load_config(&common)?;
            let exec = executor(&common, &cfg)?;
            let d = dataset(&data, &cfg)?;
            let ck = read_checkpoint(&checkpoint)?;
            dispatch!(ck.config.precision, finetune(&cfg, ck, &d, &exec, &out, &metrics))?;
        }
        Command::Prune { common, data, checkpoint, out, threshold, threshold_mode, reg_coeff, retention, metrics } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = threshold {
                cfg.prune.threshold = t;
            }
            if let Some(m) = threshold_mode {
                cfg.prune.threshold_mode = match m {
                    ModeArg::Absolute => ThresholdMode::Absolute,
                    ModeArg::Relative => ThresholdMode::Relative,
                };
            }
            if let Some(a) = reg_coeff {
                cfg.prune.reg_coeff = a;
            }
            let exec = executor(&common, &cfg)?;
            let d = dataset(&data, &cfg)?;
            let ck = read_checkpoint(&checkpoint)?;
            let paths = PruneOut { out: &out, retention: &retention, metrics: &metrics };
            dispatch!(ck.config.precision, prune(&cfg, ck, &d, &exec, paths))?;
        }
        Command::Params { common, geometry } => {
            let cfg = load_config(&common)?;
            let (report, ck) = cost_report(&cfg, &geometry, false)?;
            println!("{}", report.params);
            if let Some(ck) = ck {
                let stored: usize = ck.tensors.iter().filter(|t| !t.name.starts_with("mask.")).map(|t| t.shape.iter().product::<usize>()).sum();
                eprintln!("stored tensors hold {stored} values");
            }
        }
        Command::Flops { common, geometry, verbose, out } => {
            let cfg = load_config(&common)?;
            let (report, _) = cost_report(&cfg, &geometry, verbose)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            std::io::stdout().write_all(&buf).map_err(|e| Error::io("<stdout>", e))?;
            if let Some(p) = out {
                std::fs::write(&p, &buf).map_err(|e| Error::io(&p, e))?;
            }
            eprintln!("{}", report.summary());
        }
        Command::Bench { common, geometry, runs, warmups } => {
            let cfg = load_config(&common)?;
            let runs = runs.unwrap_or(cfg.bench.runs);
            let warmups = warmups.unwrap_or(cfg.bench.warmups);
            let (model_cfg, variant, ck) = profile_target(&cfg, &geometry)?;
            let seed = cfg.train.seed;
            let stats = match ck {
                Some(ck) => {
                    let p = ck.config.precision;
                    match p {
                        Precision::F32 => bench(ck.into_model::<f32>()?, warmups, runs, seed),
                        Precision::F64 => bench(ck.into_model::<f64>()?, warmups, runs, seed),
                    }
                }
                None => match model_cfg.precision {
                    Precision::F32 => bench(Model::<f32>::new(model_cfg, variant, Init::Seed(seed))?, warmups, runs, seed),
                    Precision::F64 => bench(Model::<f64>::new(model_cfg, variant, Init::Seed(seed))?, warmups, runs, seed),
                },
            }?;
            let mut report = CostReport::new(&model_cfg, variant, None, false)?;
            report.latency = Some(stats.clone());
            println!("median_ms,mean_ms,p10_ms,p90_ms,runs,warmups,threads,precision");
            println!(
                "{},{},{},{},{},{},{},{}",
                stats.median_ms, stats.mean_ms, stats.p10_ms, stats.p90_ms, stats.runs, stats.warmups, stats.threads, stats.precision
            );
            eprintln!("{}", report.summary());
        }
        Command::Attribute { common, data, checkpoint, out, index, layer, head, target, forward_only } => {
            let cfg = load_config(&common)?;
            let d = dataset(&data, &cfg)?;
            let ck = read_checkpoint(&checkpoint)?;
            let args = AttributeArgs { out, index, layer, head, target: target.into(), forward_only };
            dispatch!(ck.config.precision, attribute(ck, &d, &args))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
