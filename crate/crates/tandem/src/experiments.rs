//! Experiment harness: baseline comparisons, mechanism and architecture
//! ablations, and the loss-weight sweep.
//!
//! A plan is a list of named variants run over a shared list of seeds.
//! For seed s every variant trains on the same generated dataset and the
//! same split (seeded by s), so differences between rows reflect the
//! method and not the data. Each run's champion checkpoint (best
//! validation overlap if available, otherwise final) is scored on the
//! held-out test pool, and rows aggregate to mean and sample standard
//! deviation. A failed run is recorded and marked; the table is still
//! emitted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split_from_config, GeneratorConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{load_checkpoint, Family};
use crate::trainer::{
    csv_field, csv_records, evaluate_model, run, TrainConfig, BEST_CHECKPOINT, FINAL_CHECKPOINT,
};

pub const RESULTS_FILE: &str = "results.csv";
pub const TABLE_CSV_FILE: &str = "table.csv";
pub const TABLE_TEXT_FILE: &str = "table.txt";
pub const PLAN_FILE: &str = "plan.json";
pub const TEST_METRICS_FILE: &str = "test_metrics.json";

/// One named training setup inside a plan. The config's seed field is
/// overwritten per run; `labeled_fraction` optionally overrides the
/// generator's split fraction (used by the all-labels reference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub config: TrainConfig,
    pub labeled_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub generator: GeneratorConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSpec>,
}

/// On-disk experiment description: one generator, one base training
/// config, and the seeds to repeat over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize experiment config: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn with_toggles(base: &TrainConfig, ct: bool, det: bool, ema: bool) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.enable_cross_teaching = ct;
    cfg.enable_determinacy = det;
    cfg.enable_teacher = ema;
    cfg
}

/// The five-way baseline comparison:
/// - supervised: labeled data only, no unsupervised terms;
/// - mean-teacher: perturbed-teacher consistency only;
/// - cross-pseudo: hard cross-teaching only (soft term weight zero);
/// - tandem: the full method;
/// - all-labels: supervised reference with every training mask kept.
pub fn comparison_plan(
    generator: &GeneratorConfig,
    base: &TrainConfig,
    seeds: &[u64],
) -> ExperimentPlan {
    let mut cross_pseudo = with_toggles(base, true, false, false);
    cross_pseudo.beta = 0.0;
    let mut all_labels = with_toggles(base, false, false, false);
    all_labels.batch_unlabeled = 0;
    ExperimentPlan {
        name: "comparison".into(),
        generator: generator.clone(),
        seeds: seeds.to_vec(),
        variants: vec![
            VariantSpec {
                name: "supervised".into(),
                config: with_toggles(base, false, false, false),
                labeled_fraction: None,
            },
            VariantSpec {
                name: "mean-teacher".into(),
                config: with_toggles(base, false, false, true),
                labeled_fraction: None,
            },
            VariantSpec {
                name: "cross-pseudo".into(),
                config: cross_pseudo,
                labeled_fraction: None,
            },
            VariantSpec {
                name: "tandem".into(),
                config: with_toggles(base, true, true, true),
                labeled_fraction: None,
            },
            VariantSpec {
                name: "all-labels".into(),
                config: all_labels,
                labeled_fraction: Some(1.0),
            },
        ],
    }
}

fn with_weights(cfg: &TrainConfig, w: &LossWeights) -> TrainConfig {
    let mut out = cfg.clone();
    out.alpha = w.alpha;
    out.beta = w.beta;
    out.gamma = w.gamma;
    out.mu = w.mu;
    out.tau = w.tau;
    out
}

fn with_families(cfg: &TrainConfig, s1: Family, s2: Family) -> TrainConfig {
    let mut out = cfg.clone();
    out.s1_family = s1;
    out.s2_family = s2;
    out
}

/// Twelve ablation rows: the eight on/off combinations of the three
/// mechanisms (at the low-weight ablation operating point), then the
/// four student-family pairings with everything on. The teacher always
/// mirrors student2's family.
pub fn ablation_plan(
    generator: &GeneratorConfig,
    base: &TrainConfig,
    seeds: &[u64],
) -> ExperimentPlan {
    let low = with_weights(base, &LossWeights::ablation());
    let toggle_rows = [
        ("none", false, false, false),
        ("ct", true, false, false),
        ("det", false, true, false),
        ("ema", false, false, true),
        ("ct+det", true, true, false),
        ("ct+ema", true, false, true),
        ("det+ema", false, true, true),
        ("ct+det+ema", true, true, true),
    ];
    let mut variants: Vec<VariantSpec> = toggle_rows
        .iter()
        .map(|&(name, ct, det, ema)| VariantSpec {
            name: name.into(),
            config: with_toggles(&low, ct, det, ema),
            labeled_fraction: None,
        })
        .collect();
    let full = with_toggles(&low, true, true, true);
    let arch_rows = [
        ("arch-conv-trans", Family::ConvUnet, Family::WindowedTransformer),
        ("arch-trans-conv", Family::WindowedTransformer, Family::ConvUnet),
        ("arch-conv-conv", Family::ConvUnet, Family::ConvUnet),
        ("arch-trans-trans", Family::WindowedTransformer, Family::WindowedTransformer),
    ];
    variants.extend(arch_rows.iter().map(|&(name, s1, s2)| VariantSpec {
        name: name.into(),
        config: with_families(&full, s1, s2),
        labeled_fraction: None,
    }));
    ExperimentPlan {
        name: "ablation".into(),
        generator: generator.clone(),
        seeds: seeds.to_vec(),
        variants,
    }
}

/// The 4x3 weight sweep: (alpha, beta) pairs crossed with gamma, all
/// mechanisms on, everything else at the base operating point.
pub fn sweep_plan(
    generator: &GeneratorConfig,
    base: &TrainConfig,
    seeds: &[u64],
) -> ExperimentPlan {
    let full = with_toggles(base, true, true, true);
    let mut variants = Vec::with_capacity(12);
    for &(alpha, beta) in &[(0.5, 1.0), (1.0, 1.0), (2.0, 1.0), (0.5, 2.0)] {
        for &gamma in &[1.0, 2.0, 3.0] {
            let mut cfg = full.clone();
            cfg.alpha = alpha;
            cfg.beta = beta;
            cfg.gamma = gamma;
            variants.push(VariantSpec {
                name: format!("a{alpha}-b{beta}-g{gamma}"),
                config: cfg,
                labeled_fraction: None,
            });
        }
    }
    ExperimentPlan {
        name: "sweep".into(),
        generator: generator.clone(),
        seeds: seeds.to_vec(),
        variants,
    }
}

/// Outcome of one (variant, seed) run: student1's test metrics from the
/// champion checkpoint, or the error that stopped the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub dsc: f64,
    pub asd: f64,
    pub hd95: f64,
    /// Which checkpoint was scored ("best" or "final").
    pub checkpoint: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub n: usize,
    pub n_failed: usize,
    pub dsc: Aggregate,
    pub asd: Aggregate,
    pub hd95: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsTable {
    pub title: String,
    pub rows: Vec<TableRow>,
}

/// Mean and sample standard deviation over the finite entries.
pub fn mean_std(values: &[f64]) -> Aggregate {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Aggregate {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    if finite.len() < 2 {
        return Aggregate { mean, std: 0.0 };
    }
    let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Aggregate {
        mean,
        std: var.sqrt(),
    }
}

/// Fold per-run results into one row per variant, in `variant_order`.
pub fn aggregate_results(
    title: &str,
    results: &[RunResult],
    variant_order: &[String],
) -> ResultsTable {
    let rows = variant_order
        .iter()
        .map(|name| {
            let mine: Vec<&RunResult> = results.iter().filter(|r| &r.variant == name).collect();
            let ok: Vec<&&RunResult> = mine.iter().filter(|r| r.error.is_none()).collect();
            let collect = |f: fn(&RunResult) -> f64| -> Vec<f64> {
                ok.iter().map(|r| f(r)).collect()
            };
            TableRow {
                label: name.clone(),
                n: mine.len(),
                n_failed: mine.len() - ok.len(),
                dsc: mean_std(&collect(|r| r.dsc)),
                asd: mean_std(&collect(|r| r.asd)),
                hd95: mean_std(&collect(|r| r.hd95)),
            }
        })
        .collect();
    ResultsTable {
        title: title.to_string(),
        rows,
    }
}

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,n,n_failed,dsc_mean,dsc_std,asd_mean,asd_std,hd95_mean,hd95_std\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.n,
                r.n_failed,
                r.dsc.mean,
                r.dsc.std,
                r.asd.mean,
                r.asd.std,
                r.hd95.mean,
                r.hd95.std
            ));
        }
        out
    }

    /// Read back a table.csv written by `execute_plan`; the title is not
    /// stored in the file, so the caller supplies one.
    pub fn read_csv(path: &Path, title: &str) -> Result<ResultsTable> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header = "variant,n,n_failed,dsc_mean,dsc_std,asd_mean,asd_std,hd95_mean,hd95_std";
        let mut rows = Vec::new();
        for record in csv_records(&text, header, 9, path)? {
            let (line, f) = record?;
            let agg = |m: &str, s: &str| -> Result<Aggregate> {
                Ok(Aggregate {
                    mean: csv_field(m, line, path)?,
                    std: csv_field(s, line, path)?,
                })
            };
            rows.push(TableRow {
                label: f[0].to_string(),
                n: csv_field(f[1], line, path)?,
                n_failed: csv_field(f[2], line, path)?,
                dsc: agg(f[3], f[4])?,
                asd: agg(f[5], f[6])?,
                hd95: agg(f[7], f[8])?,
            });
        }
        Ok(ResultsTable {
            title: title.to_string(),
            rows,
        })
    }

    /// Aligned human-readable table; arrows mark the preferred direction.
    pub fn to_text(&self) -> String {
        let fmt = |a: &Aggregate| format!("{:.4} ± {:.4}", a.mean, a.std);
        let mut out = format!("{}\n", self.title);
        out.push_str(&format!(
            "{:<20} {:>18} {:>18} {:>18}  {}\n",
            "variant", "DSC ↑", "ASD ↓", "HD95 ↓", "runs"
        ));
        for r in &self.rows {
            let status = if r.n_failed > 0 {
                format!("{}/{} FAILED", r.n_failed, r.n)
            } else {
                format!("{}", r.n)
            };
            out.push_str(&format!(
                "{:<20} {:>18} {:>18} {:>18}  {}\n",
                r.label,
                fmt(&r.dsc),
                fmt(&r.asd),
                fmt(&r.hd95),
                status
            ));
        }
        out
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub results: Vec<RunResult>,
    pub table: ResultsTable,
    pub any_failed: bool,
}

fn results_csv(results: &[RunResult]) -> String {
    let mut out = String::from("variant,seed,dsc,asd,hd95,checkpoint,error\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant,
            r.seed,
            r.dsc,
            r.asd,
            r.hd95,
            r.checkpoint,
            r.error.as_deref().unwrap_or("")
        ));
    }
    out
}

fn run_one(
    variant: &VariantSpec,
    generator: &GeneratorConfig,
    seed: u64,
    dir: &Path,
) -> Result<(f64, f64, f64, String)> {
    let mut cfg = variant.config.clone();
    cfg.seed = seed;
    let mut gen = generator.clone();
    gen.seed = seed;
    if let Some(f) = variant.labeled_fraction {
        gen.labeled_fraction = f;
    }
    let split = split_from_config(&gen)?;
    let art = run(&cfg, &split, dir)?;
    let ckpt_name = art
        .manifest
        .best_checkpoint
        .as_deref()
        .unwrap_or(FINAL_CHECKPOINT)
        .to_string();
    debug_assert!(ckpt_name == BEST_CHECKPOINT || ckpt_name == FINAL_CHECKPOINT);
    let (state, _) = load_checkpoint(&dir.join(&ckpt_name))?;
    let s1 = evaluate_model(&cfg.spec_s1(), &state.params_s1, &split.test)?;
    let s2 = evaluate_model(&cfg.spec_s2(), &state.params_s2, &split.test)?;
    let teacher = evaluate_model(&cfg.spec_s2(), &state.params_t, &split.test)?;
    let report = serde_json::json!({
        "checkpoint": ckpt_name,
        "student1": s1,
        "student2": s2,
        "teacher": teacher,
    });
    fs::write(
        dir.join(TEST_METRICS_FILE),
        serde_json::to_string_pretty(&report)?,
    )
    .map_err(|e| Error::io(dir.join(TEST_METRICS_FILE), e))?;
    Ok((
        s1.mean_foreground.dsc,
        s1.mean_foreground.asd,
        s1.mean_foreground.hd95,
        ckpt_name,
    ))
}

/// Progress events emitted by `execute_plan_observed`.
pub enum PlanProgress<'a> {
    Started { variant: &'a str, seed: u64 },
    Finished { result: &'a RunResult },
}

/// Run every (variant, seed) pair, score champions on the test pool, and
/// leave results.csv, table.csv, and table.txt in `out_dir`. Individual
/// failures are recorded in their rows rather than aborting the plan.
pub fn execute_plan(plan: &ExperimentPlan, out_dir: &Path) -> Result<ExperimentOutcome> {
    execute_plan_observed(plan, out_dir, |_| {})
}

/// `execute_plan` with a progress callback, for drivers that report live
/// status.
pub fn execute_plan_observed(
    plan: &ExperimentPlan,
    out_dir: &Path,
    mut observe: impl FnMut(PlanProgress),
) -> Result<ExperimentOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fs::write(
        out_dir.join(PLAN_FILE),
        serde_json::to_string_pretty(plan)?,
    )
    .map_err(|e| Error::io(out_dir.join(PLAN_FILE), e))?;

    let mut results = Vec::with_capacity(plan.variants.len() * plan.seeds.len());
    for variant in &plan.variants {
        for &seed in &plan.seeds {
            observe(PlanProgress::Started {
                variant: &variant.name,
                seed,
            });
            let dir = out_dir.join(&variant.name).join(format!("seed-{seed}"));
            match run_one(variant, &plan.generator, seed, &dir) {
                Ok((dsc, asd, hd95, checkpoint)) => results.push(RunResult {
                    variant: variant.name.clone(),
                    seed,
                    dsc,
                    asd,
                    hd95,
                    checkpoint,
                    error: None,
                }),
                Err(e) => results.push(RunResult {
                    variant: variant.name.clone(),
                    seed,
                    dsc: f64::NAN,
                    asd: f64::NAN,
                    hd95: f64::NAN,
                    checkpoint: String::new(),
                    error: Some(e.to_string()),
                }),
            }
            observe(PlanProgress::Finished {
                result: results.last().expect("just pushed"),
            });
        }
    }

    let order: Vec<String> = plan.variants.iter().map(|v| v.name.clone()).collect();
    let table = aggregate_results(&plan.name, &results, &order);
    let any_failed = results.iter().any(|r| r.error.is_some());
    fs::write(out_dir.join(RESULTS_FILE), results_csv(&results))
        .map_err(|e| Error::io(out_dir.join(RESULTS_FILE), e))?;
    fs::write(out_dir.join(TABLE_CSV_FILE), table.to_csv())
        .map_err(|e| Error::io(out_dir.join(TABLE_CSV_FILE), e))?;
    fs::write(out_dir.join(TABLE_TEXT_FILE), table.to_text())
        .map_err(|e| Error::io(out_dir.join(TABLE_TEXT_FILE), e))?;
    Ok(ExperimentOutcome {
        results,
        table,
        any_failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_generator() -> GeneratorConfig {
        GeneratorConfig {
            height: 32,
            width: 32,
            count: 10,
            labeled_fraction: 0.5,
            seed: 0,
            noise_amplitude: 0.0,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            iterations: 1,
            batch_labeled: 2,
            batch_unlabeled: 2,
            val_every: 1,
            depth: 2,
            base_channels: 2,
            window_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn comparison_plan_has_the_five_reference_setups() {
        let plan = comparison_plan(&tiny_generator(), &tiny_train(), &[1, 2, 3]);
        let names: Vec<&str> = plan.variants.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(
            names,
            vec!["supervised", "mean-teacher", "cross-pseudo", "tandem", "all-labels"]
        );
        assert_eq!(plan.seeds, vec![1, 2, 3]);

        let sup = &plan.variants[0].config;
        assert!(!sup.enable_cross_teaching && !sup.enable_determinacy && !sup.enable_teacher);

        let mt = &plan.variants[1].config;
        assert!(!mt.enable_cross_teaching && !mt.enable_determinacy && mt.enable_teacher);

        let cps = &plan.variants[2].config;
        assert!(cps.enable_cross_teaching && !cps.enable_determinacy && !cps.enable_teacher);
        assert_eq!(cps.beta, 0.0);
        assert!(cps.alpha > 0.0);

        let full = &plan.variants[3].config;
        assert!(full.enable_cross_teaching && full.enable_determinacy && full.enable_teacher);

        let fl = &plan.variants[4];
        assert_eq!(fl.labeled_fraction, Some(1.0));
        assert_eq!(fl.config.batch_unlabeled, 0);
        assert!(!fl.config.enable_cross_teaching);
    }

    #[test]
    fn ablation_plan_covers_toggles_and_architectures() {
        let plan = ablation_plan(&tiny_generator(), &tiny_train(), &[7]);
        assert_eq!(plan.variants.len(), 12);
        let expected = [
            ("none", false, false, false),
            ("ct", true, false, false),
            ("det", false, true, false),
            ("ema", false, false, true),
            ("ct+det", true, true, false),
            ("ct+ema", true, false, true),
            ("det+ema", false, true, true),
            ("ct+det+ema", true, true, true),
        ];
        for (variant, &(name, ct, det, ema)) in plan.variants.iter().zip(&expected) {
            assert_eq!(variant.name, name);
            let c = &variant.config;
            assert_eq!(
                (c.enable_cross_teaching, c.enable_determinacy, c.enable_teacher),
                (ct, det, ema)
            );
            // Ablation rows run at the low-weight operating point.
            let w = LossWeights::ablation();
            assert_eq!((c.alpha, c.beta, c.gamma, c.mu), (w.alpha, w.beta, w.gamma, w.mu));
        }
        let arch: Vec<(&str, Family, Family)> = plan.variants[8..]
            .iter()
            .map(|v| (v.name.as_str(), v.config.s1_family, v.config.s2_family))
            .collect();
        assert_eq!(
            arch,
            vec![
                ("arch-conv-trans", Family::ConvUnet, Family::WindowedTransformer),
                ("arch-trans-conv", Family::WindowedTransformer, Family::ConvUnet),
                ("arch-conv-conv", Family::ConvUnet, Family::ConvUnet),
                ("arch-trans-trans", Family::WindowedTransformer, Family::WindowedTransformer),
            ]
        );
        for v in &plan.variants[8..] {
            let c = &v.config;
            assert!(c.enable_cross_teaching && c.enable_determinacy && c.enable_teacher);
        }
    }

    #[test]
    fn sweep_plan_is_the_exact_twelve_cell_grid() {
        let plan = sweep_plan(&tiny_generator(), &tiny_train(), &[7]);
        let cells: Vec<(f64, f64, f64)> = plan
            .variants
            .iter()
            .map(|v| (v.config.alpha, v.config.beta, v.config.gamma))
            .collect();
        let mut expected = Vec::new();
        for &(a, b) in &[(0.5, 1.0), (1.0, 1.0), (2.0, 1.0), (0.5, 2.0)] {
            for &g in &[1.0, 2.0, 3.0] {
                expected.push((a, b, g));
            }
        }
        assert_eq!(cells, expected);
        assert_eq!(plan.variants[0].name, "a0.5-b1-g1");
        for v in &plan.variants {
            assert_eq!(v.config.mu, 0.1);
            assert!(v.config.enable_cross_teaching);
        }
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let a = mean_std(&[0.8, 0.9]);
        assert_abs_diff_eq!(a.mean, 0.85, epsilon = 1e-15);
        assert_abs_diff_eq!(a.std, 0.07071067811865482, epsilon = 1e-12);
        let single = mean_std(&[1.5]);
        assert_eq!((single.mean, single.std), (1.5, 0.0));
        let filtered = mean_std(&[2.0, f64::NAN]);
        assert_eq!((filtered.mean, filtered.std), (2.0, 0.0));
        assert!(mean_std(&[]).mean.is_nan());
    }

    #[test]
    fn micro_plan_executes_and_writes_tables() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny_train();
        let plan = ExperimentPlan {
            name: "micro".into(),
            generator: tiny_generator(),
            seeds: vec![3],
            variants: vec![
                VariantSpec {
                    name: "supervised".into(),
                    config: with_toggles(&base, false, false, false),
                    labeled_fraction: None,
                },
                VariantSpec {
                    name: "tandem".into(),
                    config: base.clone(),
                    labeled_fraction: None,
                },
            ],
        };
        let outcome = execute_plan(&plan, dir.path()).unwrap();
        assert!(!outcome.any_failed);
        assert_eq!(outcome.results.len(), 2);
        assert_eq!(outcome.table.rows.len(), 2);
        assert_eq!(outcome.table.rows[0].label, "supervised");
        assert_eq!(outcome.table.rows[0].n_failed, 0);
        assert!(outcome.results.iter().all(|r| r.dsc.is_finite()));
        for file in [RESULTS_FILE, TABLE_CSV_FILE, TABLE_TEXT_FILE, PLAN_FILE] {
            assert!(dir.path().join(file).exists(), "{file} missing");
        }
        assert!(dir
            .path()
            .join("tandem")
            .join("seed-3")
            .join(TEST_METRICS_FILE)
            .exists());
        let text = fs::read_to_string(dir.path().join(TABLE_TEXT_FILE)).unwrap();
        assert!(text.contains("DSC ↑") && text.contains("tandem"));
    }

    #[test]
    fn failed_runs_are_marked_and_do_not_abort_the_plan() {
        let dir = tempfile::tempdir().unwrap();
        // labeled_fraction 1.0 empties the unlabeled pool while the
        // config still asks for unlabeled batches: Trainer::new fails.
        let broken = VariantSpec {
            name: "broken".into(),
            config: tiny_train(),
            labeled_fraction: Some(1.0),
        };
        let ok = VariantSpec {
            name: "supervised".into(),
            config: with_toggles(&tiny_train(), false, false, false),
            labeled_fraction: None,
        };
        let plan = ExperimentPlan {
            name: "partial".into(),
            generator: tiny_generator(),
            seeds: vec![4],
            variants: vec![broken, ok],
        };
        let outcome = execute_plan(&plan, dir.path()).unwrap();
        assert!(outcome.any_failed);
        assert_eq!(outcome.results.len(), 2);
        assert!(outcome.results[0].error.is_some());
        assert!(outcome.results[1].error.is_none());
        assert_eq!(outcome.table.rows[0].n_failed, 1);
        assert_eq!(outcome.table.rows[1].n_failed, 0);
        let text = fs::read_to_string(dir.path().join(TABLE_TEXT_FILE)).unwrap();
        assert!(text.contains("FAILED"));
        // The failed row aggregates to NaN but the table still renders.
        assert!(outcome.table.rows[0].dsc.mean.is_nan());
    }

    #[test]
    fn results_table_csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |variant: &str, seed: u64, dsc: f64| RunResult {
            variant: variant.into(),
            seed,
            dsc,
            asd: 1.0 + dsc,
            hd95: 2.0 + dsc,
            checkpoint: "final.ckpt".into(),
            error: None,
        };
        let results = vec![mk("a", 1, 0.8), mk("a", 2, 0.9), mk("b", 1, 0.5)];
        let table = aggregate_results("demo", &results, &["a".into(), "b".into()]);
        let path = dir.path().join("table.csv");
        fs::write(&path, table.to_csv()).unwrap();
        let back = ResultsTable::read_csv(&path, "demo").unwrap();
        assert_eq!(back, table);
    }
}
