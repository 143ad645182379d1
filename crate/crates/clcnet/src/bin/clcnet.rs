//! Command-line harness: synthetic data generation, training, scoring,
//! cascade evaluation, threshold sweeps, the cross-validation protocol, and
//! gradient checking. All subcommands are thin wrappers over the library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clcnet::cascade::{
    evaluate_cascade, gem_baseline, oracle_upper_bound, sweep_thresholds, CascadeConfig,
    ConfidenceScorer, MaxProbScorer, PairedRunRecords, TieBreak,
};
use clcnet::io::{
    export_curve, load_curve, load_records, load_weights, save_records, save_weights, Provenance,
};
use clcnet::mapping::normalize_probs;
use clcnet::model::{ConfidenceModel, ModelConfig};
use clcnet::synth::{synth_generate, SynthConfig};
use clcnet::train::{
    build_training_set, gradient_check, run_fold_protocol, split_by_id, train, FoldPlan,
    LabeledSample, TrainConfig, TrainSource,
};
use clcnet::{Error, Result};

const FORMAT_HELP: &str = "\
File formats:
  Run records (JSONL): line 1 is a header
      {\"model\":\"name\",\"flops_per_image\":3.9e8}
    followed by one record per line, carrying class probabilities or logits:
      {\"id\":\"img000001\",\"label\":3,\"probs\":[0.7,0.2,0.1]}
      {\"id\":\"img000002\",\"label\":0,\"logits\":[2.0,0.5,-1.0]}
  Weights: versioned JSON written by `train`/`folds`, reloaded by `score`,
    `cascade` and `sweep`; floats round-trip bit-exactly.
  Curves (CSV): threshold,top1_accuracy,avg_flops_per_image,deep_fraction

Relative paths resolve under $CLCNET_DATA_DIR when it is set.";

#[derive(Parser)]
#[command(
    name = "clcnet",
    version,
    about = "Classification-confidence scoring and cascaded inference",
    after_help = FORMAT_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired synthetic classifier run records.
    Synth(SynthArgs),
    /// Train a confidence model on recorded classifier outputs.
    Train(TrainArgs),
    /// Score one classification result with a trained model.
    Score(ScoreArgs),
    /// Evaluate the cascade at one threshold.
    Cascade(CascadeArgs),
    /// Sweep thresholds and export the tradeoff curve plus a summary.
    Sweep(SweepArgs),
    /// Run the cross-validation fold protocol.
    Folds(FoldsArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output path for the shallow model's records.
    #[arg(long)]
    out_shallow: PathBuf,
    /// Output path for the deep model's records.
    #[arg(long)]
    out_deep: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 0.75)]
    shallow_skill: f64,
    #[arg(long, default_value_t = 0.85)]
    deep_skill: f64,
    /// Shared-difficulty weight in [0,1].
    #[arg(long, default_value_t = 0.5)]
    correlation: f64,
    /// Peakedness of generated probability vectors.
    #[arg(long, default_value_t = 2.0)]
    concentration: f64,
    /// Margin-correctness coupling strength.
    #[arg(long, default_value_t = 1.0)]
    margin_coupling: f64,
    /// Fraction of wrong predictions given a large runner-up mass.
    #[arg(long, default_value_t = 0.0)]
    confound_fraction: f64,
    #[arg(long, default_value_t = 1e9)]
    shallow_flops: f64,
    #[arg(long, default_value_t = 5e9)]
    deep_flops: f64,
    #[arg(long, default_value = "synth-shallow")]
    shallow_name: String,
    #[arg(long, default_value = "synth-deep")]
    deep_name: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Mapped dimension.
    #[arg(long, default_value_t = 100)]
    m: usize,
    /// Bell-shape width of the mapping columns.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    /// Decision steps.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    /// Decision width.
    #[arg(long, default_value_t = 16)]
    nd: usize,
    /// Attention-feature width.
    #[arg(long, default_value_t = 16)]
    na: usize,
    /// Prior relaxation.
    #[arg(long, default_value_t = 1.3)]
    gamma: f64,
    /// Width of the shared self-attention head.
    #[arg(long, default_value_t = 8)]
    attn_width: usize,
}

impl ModelFlags {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            m: self.m,
            sigma: self.sigma,
            n_steps: self.steps,
            n_d: self.nd,
            n_a: self.na,
            gamma: self.gamma,
            attn_width: self.attn_width,
            ..ModelConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    /// Early-stop patience in epochs without validation improvement.
    #[arg(long, default_value_t = 10)]
    patience: usize,
}

impl TrainFlags {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Record files; samples from all files are pooled.
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Output weights path.
    #[arg(long)]
    out: PathBuf,
    /// Optional training-log CSV (epoch,train_mse,val_mse).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Fraction of ids held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    training: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Comma-separated class probabilities (or logits with --logits).
    #[arg(long)]
    probs: String,
    /// Interpret --probs as logits and apply a softmax.
    #[arg(long)]
    logits: bool,
    /// Also print per-step masks and decision contributions.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct CascadeFlags {
    /// Shallow model's record file.
    #[arg(long)]
    shallow: PathBuf,
    /// Deep model's record file.
    #[arg(long)]
    deep: PathBuf,
    /// Trained weights (omit with --maxprob).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Use the max-probability baseline confidence instead of a model.
    #[arg(long)]
    maxprob: bool,
    /// Cost of one confidence evaluation.
    #[arg(long, default_value_t = 2.7e6)]
    clcnet_flops: f64,
    /// Exclude confidence-evaluation cost from average FLOPs.
    #[arg(long)]
    no_clcnet_flops: bool,
    #[arg(long, value_enum, default_value_t = TieBreakArg::PreferDeep)]
    tie_break: TieBreakArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum TieBreakArg {
    PreferDeep,
    PreferShallow,
}

impl From<TieBreakArg> for TieBreak {
    fn from(t: TieBreakArg) -> Self {
        match t {
            TieBreakArg::PreferDeep => TieBreak::PreferDeep,
            TieBreakArg::PreferShallow => TieBreak::PreferShallow,
        }
    }
}

impl CascadeFlags {
    fn config(&self, threshold: f64) -> CascadeConfig {
        CascadeConfig {
            threshold,
            clcnet_flops: self.clcnet_flops,
            include_clcnet_flops: !self.no_clcnet_flops,
            tie_break: self.tie_break.into(),
        }
    }

    fn scorer(&self) -> Result<Box<dyn ConfidenceScorer>> {
        if self.maxprob {
            return Ok(Box::new(MaxProbScorer));
        }
        match &self.weights {
            Some(path) => {
                let (model, _) = load_weights(&resolve(path))?;
                Ok(Box::new(model))
            }
            None => Err(Error::Config(
                "either --weights or --maxprob is required".into(),
            )),
        }
    }

    fn load_paired(&self) -> Result<PairedRunRecords> {
        let shallow = load_records(&resolve(&self.shallow))?;
        let deep = load_records(&resolve(&self.deep))?;
        PairedRunRecords::new(shallow, deep)
    }
}

#[derive(Args)]
struct CascadeArgs {
    #[command(flatten)]
    flags: CascadeFlags,
    #[arg(long)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: CascadeFlags,
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    /// Output curve CSV.
    #[arg(long)]
    out: PathBuf,
    /// Max-probability baseline curve CSV (default: <out>.baseline.csv).
    #[arg(long)]
    baseline_out: Option<PathBuf>,
    /// Summary report path (default: <out>.summary.txt).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Re-check the written curve's structural invariants.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FoldsArgs {
    #[arg(long)]
    shallow: PathBuf,
    #[arg(long)]
    deep: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0.8)]
    inner_train_fraction: f64,
    /// Which model's records provide training samples.
    #[arg(long, value_enum, default_value_t = TrainOnArg::Both)]
    train_on: TrainOnArg,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    /// Report directory (per-fold logs, aggregate curve, report.txt).
    #[arg(long)]
    out_dir: PathBuf,
    /// Also save each fold's weights into the report directory.
    #[arg(long)]
    save_models: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    training: TrainFlags,
    #[arg(long, default_value_t = 2.7e6)]
    clcnet_flops: f64,
    #[arg(long)]
    no_clcnet_flops: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainOnArg {
    Shallow,
    Deep,
    Both,
}

impl From<TrainOnArg> for TrainSource {
    fn from(t: TrainOnArg) -> Self {
        match t {
            TrainOnArg::Shallow => TrainSource::Shallow,
            TrainOnArg::Deep => TrainSource::Deep,
            TrainOnArg::Both => TrainSource::Both,
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeded model/sample configurations to check.
    #[arg(long, default_value_t = 20)]
    models: usize,
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    /// Fail when the max relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Relative paths resolve under $CLCNET_DATA_DIR when set.
fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("CLCNET_DATA_DIR") {
        Some(dir) if !dir.is_empty() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let result = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Score(args) => run_score(args),
        Command::Cascade(args) => run_cascade(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Folds(args) => run_folds(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => {
            eprintln!("info: done in {:.2?}", started.elapsed());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_classes: args.classes,
        n_samples: args.samples,
        shallow_skill: args.shallow_skill,
        deep_skill: args.deep_skill,
        correlation: args.correlation,
        concentration: args.concentration,
        margin_coupling: args.margin_coupling,
        confound_fraction: args.confound_fraction,
        seed: args.seed,
        shallow_name: args.shallow_name,
        shallow_flops: args.shallow_flops,
        deep_name: args.deep_name,
        deep_flops: args.deep_flops,
    };
    let (shallow, deep) = synth_generate(&cfg)?;
    let out_shallow = resolve(&args.out_shallow);
    let out_deep = resolve(&args.out_deep);
    save_records(&shallow, &out_shallow)?;
    save_records(&deep, &out_deep)?;
    println!(
        "shallow={} accuracy={} deep={} accuracy={}",
        out_shallow.display(),
        shallow.accuracy(),
        out_deep.display(),
        deep.accuracy()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    if !(args.val_fraction > 0.0 && args.val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "--val-fraction must be in (0, 1), got {}",
            args.val_fraction
        )));
    }
    let mut samples: Vec<LabeledSample> = Vec::new();
    let mut sources = Vec::new();
    for path in &args.records {
        let records = load_records(&resolve(path))?;
        sources.push(format!("{} ({})", path.display(), records.name));
        samples.extend(build_training_set(&records)?);
    }
    let (train_set, val_set) = split_by_id(&samples, 1.0 - args.val_fraction, args.seed)?;
    let init = ConfidenceModel::init(&args.model.config(), args.seed)?;
    let outcome = train(&train_set, &val_set, &args.training.config(args.seed), init)?;
    let out = resolve(&args.out);
    save_weights(
        &outcome.model,
        &Provenance {
            seed: args.seed,
            source_datasets: sources,
            fold: None,
        },
        &out,
    )?;
    if let Some(log) = &args.log {
        write_history(&resolve(log), &outcome.history)?;
    }
    println!(
        "weights={} epochs={} best_epoch={} best_val_mse={}",
        out.display(),
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_mse
    );
    Ok(())
}

fn write_history(path: &Path, history: &[clcnet::train::EpochStats]) -> Result<()> {
    use std::io::Write;
    let mut text = String::from("epoch,train_mse,val_mse\n");
    for e in history {
        text.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, e.val_mse));
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(text.as_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn run_score(args: ScoreArgs) -> Result<()> {
    let (model, _) = load_weights(&resolve(&args.weights))?;
    let raw: Vec<f64> = args
        .probs
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad probability {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let probs = normalize_probs(&raw, args.logits)?;
    if args.trace {
        let (score, traces) = model.confidence_with_trace(&probs)?;
        println!("{score}");
        for (t, step) in traces.iter().enumerate() {
            let support = step.mask.iter().filter(|&&v| v > 0.0).count();
            let decision: f64 = step.decision.iter().sum();
            eprintln!("info: step {t}: mask support {support}, decision mass {decision:.6}");
        }
    } else {
        println!("{}", model.confidence(&probs)?);
    }
    Ok(())
}

fn run_cascade(args: CascadeArgs) -> Result<()> {
    let paired = args.flags.load_paired()?;
    let scorer = args.flags.scorer()?;
    let cfg = args.flags.config(args.threshold);
    let point = evaluate_cascade(&paired, scorer.as_ref(), &cfg)?;
    println!(
        "threshold={} top1_accuracy={} avg_flops_per_image={} deep_fraction={}",
        point.threshold, point.top1_accuracy, point.avg_flops_per_image, point.deep_fraction
    );
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let paired = args.flags.load_paired()?;
    let scorer = args.flags.scorer()?;
    let cfg = args.flags.config(0.0);
    let curve = sweep_thresholds(&paired, scorer.as_ref(), args.grid_step, &cfg)?;
    let out = resolve(&args.out);
    export_curve(&curve, &out)?;

    let baseline_out = resolve(
        &args
            .baseline_out
            .unwrap_or_else(|| with_suffix(&args.out, ".baseline.csv")),
    );
    let baseline = sweep_thresholds(&paired, &MaxProbScorer, args.grid_step, &cfg)?;
    export_curve(&baseline, &baseline_out)?;

    let oracle = oracle_upper_bound(&paired);
    let gem = gem_baseline(&paired)?;
    let first = &curve.points()[0];
    let last = &curve.points()[curve.len() - 1];
    let summary_path = resolve(
        &args
            .summary
            .unwrap_or_else(|| with_suffix(&args.out, ".summary.txt")),
    );
    let summary = format!(
        "curve={}\nbaseline_curve={}\nshallow model={} accuracy={} flops_per_image={}\n\
         deep model={} accuracy={} flops_per_image={}\noracle_upper_bound={}\n\
         gem accuracy={} avg_flops={}\nendpoint threshold={} accuracy={} avg_flops={}\n\
         endpoint threshold={} accuracy={} avg_flops={}\n",
        out.display(),
        baseline_out.display(),
        paired.shallow.name,
        paired.shallow.accuracy(),
        paired.shallow.flops_per_image,
        paired.deep.name,
        paired.deep.accuracy(),
        paired.deep.flops_per_image,
        oracle,
        gem.accuracy,
        gem.avg_flops,
        first.threshold,
        first.top1_accuracy,
        first.avg_flops_per_image,
        last.threshold,
        last.top1_accuracy,
        last.avg_flops_per_image,
    );
    write_atomic(&summary_path, summary.as_bytes())?;

    if args.verify {
        for (name, path) in [("curve", &out), ("baseline", &baseline_out)] {
            let reloaded = load_curve(path)?;
            reloaded.verify(
                paired.shallow.flops_per_image,
                paired.deep.flops_per_image,
                &cfg,
            )?;
            for p in reloaded.points() {
                if p.top1_accuracy > oracle {
                    return Err(Error::Config(format!(
                        "{name}: accuracy {} above the oracle bound {oracle} at threshold {}",
                        p.top1_accuracy, p.threshold
                    )));
                }
            }
            if reloaded.points()[0].top1_accuracy != paired.shallow.accuracy() {
                return Err(Error::Config(format!(
                    "{name}: threshold-0 accuracy differs from shallow-only accuracy"
                )));
            }
        }
        eprintln!("info: verify ok");
    }
    println!(
        "curve={} baseline={} summary={}",
        out.display(),
        baseline_out.display(),
        summary_path.display()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn run_folds(args: FoldsArgs) -> Result<()> {
    let shallow = load_records(&resolve(&args.shallow))?;
    let deep = load_records(&resolve(&args.deep))?;
    let paired = PairedRunRecords::new(shallow, deep)?;
    let plan = FoldPlan::new(args.folds, args.inner_train_fraction, args.seed)?;
    let ccfg = CascadeConfig {
        threshold: args.threshold,
        clcnet_flops: args.clcnet_flops,
        include_clcnet_flops: !args.no_clcnet_flops,
        tie_break: TieBreak::PreferDeep,
    };
    let report = run_fold_protocol(
        &paired,
        &plan,
        &args.training.config(args.seed),
        &ccfg,
        args.train_on.into(),
        &args.model.config(),
        args.grid_step,
    )?;
    let out_dir = resolve(&args.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    export_curve(
        &report.aggregate_curve,
        &out_dir.join("aggregate_curve.csv"),
    )?;
    let mut text = String::new();
    for f in &report.folds {
        write_fold_line(&mut text, f);
        write_history(&out_dir.join(format!("fold{}_log.csv", f.fold)), &f.history)?;
    }
    text.push_str(&format!(
        "aggregate threshold={} top1_accuracy={} avg_flops_per_image={} deep_fraction={} auroc={}\n\
         shallow accuracy={} deep accuracy={} oracle_upper_bound={}\n",
        report.aggregate.threshold,
        report.aggregate.top1_accuracy,
        report.aggregate.avg_flops_per_image,
        report.aggregate.deep_fraction,
        report.aggregate_auroc.map_or(f64::NAN, |a| a),
        report.shallow_accuracy,
        report.deep_accuracy,
        report.oracle_upper_bound,
    ));
    write_atomic(&out_dir.join("report.txt"), text.as_bytes())?;
    if args.save_models {
        for (k, model) in report.models.iter().enumerate() {
            save_weights(
                model,
                &Provenance {
                    seed: args.seed,
                    source_datasets: vec![
                        args.shallow.display().to_string(),
                        args.deep.display().to_string(),
                    ],
                    fold: Some(k),
                },
                &out_dir.join(format!("fold{k}_weights.json")),
            )?;
        }
    }
    print!("{text}");
    Ok(())
}

fn write_fold_line(text: &mut String, f: &clcnet::train::FoldOutcome) {
    text.push_str(&format!(
        "fold={} n_eval={} train_samples={} val_samples={} top1_accuracy={} \
         avg_flops_per_image={} deep_fraction={} auroc={} best_val_mse={}\n",
        f.fold,
        f.n_eval,
        f.n_train_samples,
        f.n_val_samples,
        f.point.top1_accuracy,
        f.point.avg_flops_per_image,
        f.point.deep_fraction,
        f.auroc.map_or(f64::NAN, |a| a),
        f.best_val_mse,
    ));
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    let cfg = args.model.config();
    let mut worst: f64 = 0.0;
    for k in 0..args.models {
        let mut rng = StdRng::seed_from_u64(args.seed.wrapping_add(k as u64));
        let model = ConfidenceModel::init(&cfg, args.seed.wrapping_add(1000 + k as u64))?;
        let n = rng.gen_range(3..12);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..1.0)).collect();
        let sample = LabeledSample {
            id: format!("gc{k}"),
            probs: normalize_probs(&raw, false)?,
            label: if rng.gen_bool(0.5) { 1.0 } else { 0.0 },
            source_model: "gradcheck".into(),
        };
        let err = gradient_check(&model, &sample, args.fd_step)?;
        println!("model={k} max_rel_err={err}");
        worst = worst.max(err);
    }
    println!("max_rel_err={worst}");
    if worst > args.tol {
        return Err(Error::Config(format!(
            "gradient check failed: {worst} > {}",
            args.tol
        )));
    }
    Ok(())
}
