//! Command-line driver: dataset synthesis, training, evaluation,
//! experiment plans, and plotting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tandem::data::{
    generate_dataset, save_dataset, split_from_config, DatasetSplit, GeneratorConfig, ImageSample,
};
use tandem::error::{Error, Result};
use tandem::experiments::{
    ablation_plan, comparison_plan, execute_plan_observed, sweep_plan, ExperimentConfig,
    ExperimentPlan, PlanProgress, ResultsTable, RESULTS_FILE, TABLE_CSV_FILE,
};
use tandem::losses::hard_pseudo;
use tandem::metrics::MetricReport;
use tandem::models::{forward, load_checkpoint, Mode, TripletState};
use tandem::plot::{plot_loss_curves, plot_metric_bars, plot_overlay, plot_validation_curves};
use tandem::trainer::{
    evaluate_model, read_loss_csv, read_val_csv, run_observed, Progress, RunManifest, TrainConfig,
    LOSS_FILE, MANIFEST_FILE, VAL_FILE,
};

#[derive(Parser)]
#[command(
    name = "tandem",
    version,
    about = "Semi-supervised segmentation with a dual-student, single-teacher trio"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a phantom dataset and save it as PNG images and masks.
    GenerateData {
        /// Generator config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; receives images/, masks/, and dataset.toml.
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the student pair and teacher; artifacts land in --out.
    Train {
        /// Training config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Generator config (TOML); its seed is replaced by the training
        /// seed so one seed pins the whole run.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for logs, checkpoints, and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint's three members on one split of the dataset.
    Evaluate {
        /// Checkpoint file (.ckpt with its .json sidecar).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generator config (TOML) describing the dataset.
        #[arg(long)]
        data: PathBuf,
        /// Which split to score.
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Optional directory for metrics.json (metrics also print here).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset seed; defaults to the seed the checkpoint was trained
        /// with, so the split matches training.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the five-way baseline comparison plan.
    Compare(ExperimentArgs),
    /// Run the component-toggle and architecture ablation plan.
    Ablate(ExperimentArgs),
    /// Run the loss-weight sweep plan.
    Sweep(ExperimentArgs),
    /// Render plots from a finished run or experiment directory.
    Plot {
        /// Run directory (losses.csv, validation.csv) or experiment
        /// directory (table.csv).
        #[arg(long)]
        run: PathBuf,
        /// Output directory for PNGs.
        #[arg(long)]
        out: PathBuf,
        /// Generator config; enables prediction-contour overlays from the
        /// run's champion checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// How many test images to overlay.
        #[arg(long, default_value_t = 4)]
        overlays: usize,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (TOML): [generator], [train], and a seed list.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; one subdirectory per (variant, seed).
    #[arg(long)]
    out: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenerateData { config, out, seed } => generate_cmd(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
        } => train_cmd(&config, &data, &out, seed),
        Command::Evaluate {
            checkpoint,
            data,
            split,
            out,
            seed,
        } => evaluate_cmd(&checkpoint, &data, split, out.as_deref(), seed),
        Command::Compare(args) => experiment_cmd(Plan::Comparison, &args),
        Command::Ablate(args) => experiment_cmd(Plan::Ablation, &args),
        Command::Sweep(args) => experiment_cmd(Plan::Sweep, &args),
        Command::Plot {
            run,
            out,
            data,
            overlays,
        } => plot_cmd(&run, &out, data.as_deref(), overlays),
    }
}

fn generate_cmd(config: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut gen = GeneratorConfig::load(config)?;
    if let Some(s) = seed {
        gen.seed = s;
    }
    let samples = generate_dataset(&gen)?;
    save_dataset(out, &samples)?;
    gen.save(&out.join("dataset.toml"))?;
    println!(
        "wrote {} samples ({}x{}, seed {}) to {}",
        samples.len(),
        gen.height,
        gen.width,
        gen.seed,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut gen = GeneratorConfig::load(data)?;
    gen.seed = cfg.seed;
    let split = split_from_config(&gen)?;
    println!(
        "split: {} labeled / {} unlabeled / {} val / {} test (seed {})",
        split.labeled.len(),
        split.unlabeled.len(),
        split.val.len(),
        split.test.len(),
        cfg.seed
    );

    let print_every = if cfg.val_every > 0 {
        cfg.val_every
    } else {
        (cfg.iterations / 10).max(1)
    };
    let total = cfg.iterations;
    let art = run_observed(&cfg, &split, out, |p| match p {
        Progress::Step(rec) => {
            let done = rec.iteration + 1;
            if done % print_every == 0 || done == total {
                println!(
                    "iter {done:>6}/{total}  lr {:.5}  total {:.4} / {:.4}",
                    rec.lr, rec.students[0].total, rec.students[1].total
                );
            }
        }
        Progress::Validated { iteration, reports } => {
            println!(
                "  val @ {iteration}: DSC student1 {:.4}  student2 {:.4}  teacher {:.4}",
                reports[0].mean_foreground.dsc,
                reports[1].mean_foreground.dsc,
                reports[2].mean_foreground.dsc
            );
        }
    })?;

    if let Some(best) = art.manifest.best {
        println!(
            "best student1 DSC {:.4} at iteration {}",
            best.mean_dsc, best.iteration
        );
    }
    println!("artifacts in {}", art.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate_cmd(
    checkpoint: &Path,
    data: &Path,
    split: SplitName,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let (state, info) = load_checkpoint(checkpoint)?;
    let mut gen = GeneratorConfig::load(data)?;
    gen.seed = seed.unwrap_or(info.master_seed);
    let ds = split_from_config(&gen)?;
    let pool = select_split(&ds, split);
    if pool.is_empty() {
        return Err(Error::EmptyInput("selected split has no samples"));
    }
    println!(
        "checkpoint from iteration {} (seed {}), scoring {} samples",
        info.iteration,
        info.master_seed,
        pool.len()
    );
    let reports = score_members(&state, &pool)?;
    for (name, report) in MEMBER_NAMES.iter().zip(&reports) {
        print_report(name, report);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::json!({
            "checkpoint_iteration": info.iteration,
            "dataset_seed": gen.seed,
            "split": match split {
                SplitName::Train => "train",
                SplitName::Val => "val",
                SplitName::Test => "test",
            },
            "student1": reports[0],
            "student2": reports[1],
            "teacher": reports[2],
        });
        let path = dir.join("metrics.json");
        fs::write(&path, serde_json::to_string_pretty(&json)?)
            .map_err(|e| Error::io(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

const MEMBER_NAMES: [&str; 3] = ["student1", "student2", "teacher"];

fn select_split(ds: &DatasetSplit, split: SplitName) -> Vec<ImageSample> {
    match split {
        SplitName::Train => {
            let mut pool = ds.labeled.clone();
            pool.extend(ds.unlabeled.iter().cloned());
            pool
        }
        SplitName::Val => ds.val.clone(),
        SplitName::Test => ds.test.clone(),
    }
}

fn score_members(state: &TripletState, pool: &[ImageSample]) -> Result<[MetricReport; 3]> {
    Ok([
        evaluate_model(&state.spec_s1, &state.params_s1, pool)?,
        evaluate_model(&state.spec_s2, &state.params_s2, pool)?,
        evaluate_model(&state.spec_s2, &state.params_t, pool)?,
    ])
}

fn print_report(name: &str, report: &MetricReport) {
    let m = &report.mean_foreground;
    println!(
        "{name}: DSC {:.4}  ASD {:.3}  HD95 {:.3}",
        m.dsc, m.asd, m.hd95
    );
    for (cls, c) in report.per_class.iter().enumerate().skip(1) {
        println!(
            "  class {cls}: DSC {:.4}  ASD {:.3}  HD95 {:.3}  (surfaces defined in {}/{})",
            c.dsc,
            c.asd,
            c.hd95,
            c.n,
            c.n + c.n_excluded
        );
    }
}

enum Plan {
    Comparison,
    Ablation,
    Sweep,
}

fn experiment_cmd(kind: Plan, args: &ExperimentArgs) -> Result<ExitCode> {
    let mut exp = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        exp.seeds = vec![s];
    }
    if exp.seeds.is_empty() {
        return Err(Error::Config("the seed list is empty".into()));
    }
    let plan: ExperimentPlan = match kind {
        Plan::Comparison => comparison_plan(&exp.generator, &exp.train, &exp.seeds),
        Plan::Ablation => ablation_plan(&exp.generator, &exp.train, &exp.seeds),
        Plan::Sweep => sweep_plan(&exp.generator, &exp.train, &exp.seeds),
    };
    let total = plan.variants.len() * plan.seeds.len();
    println!(
        "{}: {} variants x {} seeds -> {}",
        plan.name,
        plan.variants.len(),
        plan.seeds.len(),
        args.out.display()
    );
    let mut done = 0usize;
    let outcome = execute_plan_observed(&plan, &args.out, |p| match p {
        PlanProgress::Started { variant, seed } => {
            done += 1;
            println!("[{done}/{total}] {variant} seed {seed} ...");
        }
        PlanProgress::Finished { result } => match &result.error {
            None => println!(
                "[{done}/{total}] {} seed {}: DSC {:.4} ({})",
                result.variant, result.seed, result.dsc, result.checkpoint
            ),
            Some(e) => println!(
                "[{done}/{total}] {} seed {}: FAILED: {e}",
                result.variant, result.seed
            ),
        },
    })?;
    print!("{}", outcome.table.to_text());
    let bars = args.out.join("table.png");
    plot_metric_bars(&outcome.table, &bars)?;
    println!("wrote {}", bars.display());
    if outcome.any_failed {
        eprintln!("some runs failed; see {RESULTS_FILE} for details");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn plot_cmd(run: &Path, out: &Path, data: Option<&Path>, overlays: usize) -> Result<ExitCode> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written: Vec<PathBuf> = Vec::new();

    let losses = run.join(LOSS_FILE);
    if losses.exists() {
        let rows = read_loss_csv(&losses)?;
        if !rows.is_empty() {
            for student in [1u8, 2u8] {
                let path = out.join(format!("loss_student{student}.png"));
                plot_loss_curves(&rows, student, &path)?;
                written.push(path);
            }
        }
    }

    let val = run.join(VAL_FILE);
    if val.exists() {
        let rows = read_val_csv(&val)?;
        if !rows.is_empty() {
            let path = out.join("validation.png");
            plot_validation_curves(&rows, &path)?;
            written.push(path);
        }
    }

    let table = run.join(TABLE_CSV_FILE);
    if table.exists() {
        let title = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "results".to_string());
        let parsed = ResultsTable::read_csv(&table, &title)?;
        if !parsed.rows.is_empty() {
            let path = out.join("table.png");
            plot_metric_bars(&parsed, &path)?;
            written.push(path);
        }
    }

    if let Some(gen_path) = data {
        written.extend(plot_overlays(run, out, gen_path, overlays)?);
    }

    if written.is_empty() {
        return Err(Error::Config(format!(
            "nothing to plot in {}: expected {LOSS_FILE}, {VAL_FILE}, or {TABLE_CSV_FILE}",
            run.display()
        )));
    }
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Champion-checkpoint contours over the first test images: ground truth
/// green, prediction red, agreement yellow.
fn plot_overlays(run: &Path, out: &Path, gen_path: &Path, overlays: usize) -> Result<Vec<PathBuf>> {
    let manifest_path = run.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let ckpt_name = manifest
        .best_checkpoint
        .as_deref()
        .unwrap_or(&manifest.final_checkpoint);
    let (state, _) = load_checkpoint(&run.join(ckpt_name))?;
    let mut gen = GeneratorConfig::load(gen_path)?;
    gen.seed = manifest.config.seed;
    let ds = split_from_config(&gen)?;
    let mut written = Vec::new();
    for sample in ds.test.iter().take(overlays) {
        let prob = forward(&state.spec_s1, &state.params_s1, &sample.pixels, Mode::Eval, None)?;
        let pred = hard_pseudo(&prob);
        let path = out.join(format!("overlay_{}.png", sample.id));
        plot_overlay(sample, &pred, &path)?;
        written.push(path);
    }
    Ok(written)
}
