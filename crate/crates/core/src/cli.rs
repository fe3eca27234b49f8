//! `gpgl` command line: train, compare, gp-selftest, gradcheck,
//! emit-plot-data.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
//! 3 numeric failure at run time.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::anchor::NeighborCount;
use crate::data::{read_metrics, write_metrics, ExperimentConfig, MetricsRecord, ModeSummary, RunSummary};
use crate::error::{Error, Result};
use crate::gp::selftest::{dump_case, dump_round_trip_matches, run_gp_selftest_with_noise};
use crate::gp::{GpSnapshot, KernelConfig, SnapshotDump};
use crate::model::{run_experiment, train_run, ExperimentResult, Mode, RunHistory, Threshold};
use crate::selfcheck::{triangle_gradcheck, GRADCHECK_TOLERANCE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gpgl", version, about = "GP-guided training of small classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one mode end to end and write its metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Train baseline and gpgl on the same seeds and compare them.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Cholesky GP posterior vs dense inversion, and exact interpolation.
    GpSelftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        oracle_cases: usize,
        #[arg(long, default_value_t = 50)]
        interpolation_cases: usize,
        /// Force σ² for every oracle instance.
        #[arg(long, allow_hyphen_values = true)]
        noise_variance: Option<f64>,
        /// Write a snapshot dump here and check that it reloads bit-exactly.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Finite-difference check of the full triangle-loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Turn a metrics file into `mode,epoch,train_error,val_error` CSV.
    EmitPlotData {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// blobs10, spiral2 or blobs3-fast (default blobs10).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    length_scale: Option<f64>,
    #[arg(long)]
    anchor_per_class: Option<usize>,
    #[arg(long)]
    c_cor: Option<NeighborCount>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    swap_norm_denominators: bool,
}

impl RunArgs {
    /// Config file or preset, then flag overrides.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::preset("blobs10")?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(epochs) = self.epochs {
            cfg.optimizer.epochs = epochs;
        }
        if let Some(b) = self.batch_size {
            cfg.optimizer.batch_size = b;
        }
        if let Some(l) = self.length_scale {
            cfg.kernel.length_scale = l;
        }
        if let Some(n) = self.anchor_per_class {
            cfg.anchors.per_class_count = n;
        }
        if let Some(c) = self.c_cor {
            cfg.anchors.c_cor = c;
        }
        if let Some(k) = self.top_k {
            cfg.anchors.top_k = k;
        }
        if self.swap_norm_denominators {
            cfg.gpgl.swap_norm_denominators = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit code for an error surfacing from a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Domain { .. } | Error::NotPositiveDefinite { .. } | Error::Shape { .. } | Error::Contract(_) => {
            EXIT_NUMERIC
        }
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Train { run, mode } => cmd_train(&run, mode),
        Command::Compare { run } => cmd_compare(&run),
        Command::GpSelftest {
            seed,
            oracle_cases,
            interpolation_cases,
            noise_variance,
            dump,
        } => cmd_gp_selftest(seed, oracle_cases, interpolation_cases, noise_variance, dump.as_deref()),
        Command::Gradcheck { seed, seeds } => cmd_gradcheck(seed, seeds),
        Command::EmitPlotData { metrics, out } => cmd_emit_plot_data(&metrics, &out),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(())
}

fn write_timing(dir: &Path, histories: &[&RunHistory]) -> Result<()> {
    let timing: serde_json::Map<String, serde_json::Value> = histories
        .iter()
        .map(|h| (h.mode.to_string(), serde_json::json!(h.wall_seconds)))
        .collect();
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    Ok(())
}

fn cmd_train(args: &RunArgs, mode: Option<Mode>) -> Result<i32> {
    let mut cfg = args.resolve()?;
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    let dir = cfg.out_dir.clone();
    write_config(&cfg, &dir)?;
    let splits = cfg.load_splits(cfg.seed)?;
    let history = train_run(cfg.mode, &cfg.train_config(), &splits, cfg.seed)?;
    let threshold = match cfg.threshold {
        Threshold::Fixed(t) => Some(t),
        Threshold::BaselinePlus(m) => (cfg.mode == Mode::Baseline).then(|| history.final_error() + m),
    };
    let summary = ModeSummary::from_history(&history, threshold);
    let record = RunSummary {
        seed: cfg.seed,
        threshold,
        baseline: (cfg.mode == Mode::Baseline).then(|| summary.clone()),
        gpgl: (cfg.mode == Mode::Gpgl).then(|| summary.clone()),
    };
    write_metrics(&dir.join("metrics.jsonl"), &[&history], &record)?;
    write_timing(&dir, &[&history])?;
    println!(
        "{} seed {}: final val error {:.4} after {} epochs ({})",
        cfg.mode,
        cfg.seed,
        summary.final_val_error,
        summary.epochs,
        dir.join("metrics.jsonl").display()
    );
    if let (Some(v), Some(m)) = (summary.mean_variance, summary.top_mass) {
        println!("mean g_v {v:.4}, top-5 context mass {m:.4}");
    }
    Ok(EXIT_OK)
}

/// Display form of an epochs-to-threshold value.
fn epochs_text(e: Option<usize>) -> String {
    e.map_or_else(|| "not reached".into(), |e| e.to_string())
}

/// Rows of the comparison table; unreached thresholds count as `τ + 1` in
/// the means.
pub fn comparison_table(results: &[ExperimentResult], epochs: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "seed\tbaseline_error\tgpgl_error\tdelta_error\tthreshold\tbaseline_epochs\tgpgl_epochs\tdelta_epochs"
    );
    let unreached = (epochs + 1) as f64;
    let n = results.len().max(1) as f64;
    let (mut sb, mut sg, mut eb, mut eg) = (0.0, 0.0, 0.0, 0.0);
    for r in results {
        let (b, g) = (r.baseline.final_error(), r.gpgl.final_error());
        let delta_epochs = match (r.baseline_epochs, r.gpgl_epochs) {
            (Some(b), Some(g)) => format!("{:+}", g as i64 - b as i64),
            _ => "not reached".into(),
        };
        let _ = writeln!(
            out,
            "{}\t{b:.4}\t{g:.4}\t{:+.4}\t{:.4}\t{}\t{}\t{delta_epochs}",
            r.seed,
            g - b,
            r.threshold,
            epochs_text(r.baseline_epochs),
            epochs_text(r.gpgl_epochs),
        );
        sb += b;
        sg += g;
        eb += r.baseline_epochs.map_or(unreached, |e| e as f64);
        eg += r.gpgl_epochs.map_or(unreached, |e| e as f64);
    }
    let _ = writeln!(
        out,
        "mean\t{:.4}\t{:.4}\t{:+.4}\t-\t{:.2}\t{:.2}\t{:+.2}",
        sb / n,
        sg / n,
        (sg - sb) / n,
        eb / n,
        eg / n,
        (eg - eb) / n
    );
    out
}

fn cmd_compare(args: &RunArgs) -> Result<i32> {
    let cfg = args.resolve()?;
    write_config(&cfg, &cfg.out_dir)?;
    let train_cfg = cfg.train_config();
    let mut results = Vec::with_capacity(cfg.seeds);
    for i in 0..cfg.seeds as u64 {
        let seed = cfg.seed + i;
        let dir = cfg.out_dir.join(format!("seed-{seed}"));
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = seed;
        seed_cfg.seeds = 1;
        seed_cfg.out_dir = dir.clone();
        write_config(&seed_cfg, &dir)?;
        let splits = cfg.load_splits(seed)?;
        let r = run_experiment(&train_cfg, &splits, seed, cfg.threshold)?;
        let summary = RunSummary {
            seed,
            threshold: Some(r.threshold),
            baseline: Some(ModeSummary::from_history(&r.baseline, Some(r.threshold))),
            gpgl: Some(ModeSummary::from_history(&r.gpgl, Some(r.threshold))),
        };
        write_metrics(&dir.join("metrics.jsonl"), &[&r.baseline, &r.gpgl], &summary)?;
        write_timing(&dir, &[&r.baseline, &r.gpgl])?;
        log::info!("seed {seed} done");
        results.push(r);
    }
    let table = comparison_table(&results, cfg.optimizer.epochs);
    fs::write(cfg.out_dir.join("compare.tsv"), &table)?;
    print!("{table}");
    Ok(EXIT_OK)
}

fn cmd_gp_selftest(
    seed: u64,
    oracle_cases: usize,
    interpolation_cases: usize,
    noise: Option<f64>,
    dump: Option<&Path>,
) -> Result<i32> {
    if let Some(noise) = noise {
        KernelConfig::default().with_noise(noise).validate()?;
    }
    let report = run_gp_selftest_with_noise(seed, oracle_cases, interpolation_cases, noise)?;
    print!("{report}");
    let mut passed = report.passed();
    if let Some(path) = dump {
        let snapshot = dump_case(seed)?;
        fs::write(path, serde_json::to_string(&snapshot.to_dump())?)?;
        let reloaded: SnapshotDump = serde_json::from_str(&fs::read_to_string(path)?)?;
        let ok = dump_round_trip_matches(&snapshot, &GpSnapshot::from_dump(&reloaded)?, seed)?;
        println!("dump           {} round_trip={}", path.display(), if ok { "exact" } else { "MISMATCH" });
        passed &= ok;
    }
    Ok(if passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_gradcheck(seed: u64, seeds: u64) -> Result<i32> {
    let mut failed = Vec::new();
    for s in seed..seed + seeds {
        let r = triangle_gradcheck(s)?;
        println!(
            "seed {s:<4} max_rel_error={:.3e} worst={} coords={}",
            r.worst.max_rel_error, r.worst_param, r.checked
        );
        if !r.passed() {
            failed.push(s);
        }
    }
    if failed.is_empty() {
        println!("all {seeds} seeds below {GRADCHECK_TOLERANCE:e}");
        Ok(EXIT_OK)
    } else {
        println!("failed seeds: {failed:?}");
        Ok(EXIT_CHECK_FAILED)
    }
}

fn cmd_emit_plot_data(metrics: &Path, out: &Path) -> Result<i32> {
    let records = read_metrics(metrics)?;
    let mut writer = csv::Writer::from_path(out).map_err(|e| Error::Config(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Config(e.to_string());
    writer
        .write_record(["mode", "epoch", "train_error", "val_error"])
        .map_err(csv_err)?;
    for record in &records {
        if let MetricsRecord::Epoch(e) = record {
            writer
                .write_record([
                    e.mode.to_string(),
                    e.epoch.to_string(),
                    format!("{:?}", e.train_error),
                    format!("{:?}", e.val_error),
                ])
                .map_err(csv_err)?;
        }
    }
    writer.flush()?;
    Ok(EXIT_OK)
}
