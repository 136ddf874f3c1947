//! Command-line surface: dataset generation, training, evaluation, the
//! prior-multiplier sweep, gradient verification, and config printing.
//!
//! Exit codes: 0 success, 1 verification or numeric failure (failed
//! gradient check, diverged training), 2 usage, IO, parse, or schema
//! errors. Every file write lands via a temp-file rename, and reruns with
//! identical inputs are byte-identical except for the `#`-prefixed
//! timestamp header of the human-readable tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

/// `println!` that ignores a closed stdout (e.g. piping into `head`)
/// instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

use crate::config::ExperimentConfig;
use crate::datagen::{generate, read_dataset, write_dataset};
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::priors::{build_prior_config, Variant};
use crate::train_eval::{evaluate, sweep_prior_multiplier, train, MetricsReport, SweepTable};

#[derive(Parser)]
#[command(
    name = "p3m",
    about = "Positive-unlabeled metric learning on synthetic multi-label data"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Experiment config document (JSON); built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's out_dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed override: the dataset seed for gen-data, the training seed
    /// everywhere else (grad-check draws its instances from it).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Loss variant: pm, p2m-all, p2m, p3m-ori, or p3m.
    #[arg(long, value_name = "VARIANT", value_parser = parse_variant)]
    variant: Option<Variant>,

    /// Prior multiplier override (>= 1).
    #[arg(long, value_name = "R")]
    multiplier: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as pretty JSON.
    PrintConfig(CommonOpts),

    /// Generate the training and held-out datasets into the output dir.
    GenData(CommonOpts),

    /// Train a model and write params, metrics, and the step log.
    Train {
        #[command(flatten)]
        opts: CommonOpts,
        /// Training dataset; defaults to <out>/train.jsonl.
        #[arg(value_name = "DATA")]
        data: Option<PathBuf>,
    },

    /// Evaluate saved parameters on a dataset that carries truth labels.
    Eval {
        #[command(flatten)]
        opts: CommonOpts,
        /// Parameter file; defaults to <out>/params.json.
        #[arg(value_name = "PARAMS")]
        params: Option<PathBuf>,
        /// Evaluation dataset; defaults to <out>/eval.jsonl.
        #[arg(value_name = "DATA")]
        data: Option<PathBuf>,
    },

    /// Train the full (multiplier, seed) grid and write the sweep table.
    Sweep {
        #[command(flatten)]
        opts: CommonOpts,
        /// Training dataset; defaults to <out>/train.jsonl.
        #[arg(value_name = "TRAIN_DATA")]
        train_data: Option<PathBuf>,
        /// Evaluation dataset; defaults to <out>/eval.jsonl.
        #[arg(value_name = "EVAL_DATA")]
        eval_data: Option<PathBuf>,
    },

    /// Verify reverse-mode gradients against finite differences.
    GradCheck(CommonOpts),
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::PUBLIC
        .iter()
        .copied()
        .find(|v| v.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = Variant::PUBLIC.iter().map(|v| v.name()).collect();
            format!("unknown variant `{s}`; expected one of {}", names.join(", "))
        })
}

/// Which seed `--seed` overrides for the current subcommand.
enum SeedRole {
    Dataset,
    Training,
}

/// Parses the command line and runs it, translating errors to exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } | Error::Numeric { .. } => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::PrintConfig(opts) => {
            let (config, _) = resolve(&opts, SeedRole::Training)?;
            say!("{}", config.to_json_pretty()?);
            Ok(0)
        }
        Command::GenData(opts) => {
            let (config, out) = resolve(&opts, SeedRole::Dataset)?;
            cmd_gen_data(&config, &out)
        }
        Command::Train { opts, data } => {
            let (config, out) = resolve(&opts, SeedRole::Training)?;
            let data = data.unwrap_or_else(|| out.join("train.jsonl"));
            cmd_train(&config, &out, &data)
        }
        Command::Eval { opts, params, data } => {
            let (config, out) = resolve(&opts, SeedRole::Training)?;
            let params = params.unwrap_or_else(|| out.join("params.json"));
            let data = data.unwrap_or_else(|| out.join("eval.jsonl"));
            cmd_eval(&config, &out, &params, &data)
        }
        Command::Sweep { opts, train_data, eval_data } => {
            let (config, out) = resolve(&opts, SeedRole::Training)?;
            let train_data = train_data.unwrap_or_else(|| out.join("train.jsonl"));
            let eval_data = eval_data.unwrap_or_else(|| out.join("eval.jsonl"));
            cmd_sweep(&config, &out, &train_data, &eval_data)
        }
        Command::GradCheck(opts) => {
            let (config, _) = resolve(&opts, SeedRole::Training)?;
            cmd_grad_check(&config)
        }
    }
}

/// Loads the config, applies the flag overrides, and re-validates.
fn resolve(opts: &CommonOpts, seed_role: SeedRole) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = match &opts.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(variant) = opts.variant {
        config.loss.variant = variant;
    }
    if let Some(multiplier) = opts.multiplier {
        config.prior_multiplier = multiplier;
    }
    if let Some(seed) = opts.seed {
        match seed_role {
            SeedRole::Dataset => config.gen.seed = seed,
            SeedRole::Training => config.train.seed = seed,
        }
    }
    if let Some(out) = &opts.out {
        config.out_dir = out.display().to_string();
    }
    config.validate()?;
    let out = PathBuf::from(&config.out_dir);
    Ok((config, out))
}

fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<i32> {
    fs::create_dir_all(out)?;
    let train_ds = generate(&config.gen)?;
    let eval_ds = generate(&config.eval_gen_spec())?;
    let train_path = out.join("train.jsonl");
    let eval_path = out.join("eval.jsonl");
    write_dataset(&train_ds, &train_path)?;
    write_dataset(&eval_ds, &eval_path)?;

    say!(
        "wrote {} ({} samples) and {} ({} samples)",
        train_path.display(),
        train_ds.n(),
        eval_path.display(),
        eval_ds.n()
    );
    say!("class  true-prior  observed-prior");
    let truth = train_ds.truth.as_ref().expect("generated data carries truth");
    let (n, k) = (train_ds.n(), train_ds.k());
    for i in 0..k {
        let true_frac =
            (0..n).filter(|&j| truth[j * k + i] == 1).count() as f64 / n as f64;
        let obs_frac =
            (0..n).filter(|&j| train_ds.observed[j * k + i] == 1).count() as f64 / n as f64;
        say!("{:>5}  {:>10.4}  {:>14.4}", i + 1, true_frac, obs_frac);
    }
    Ok(0)
}

fn cmd_train(config: &ExperimentConfig, out: &Path, data_path: &Path) -> Result<i32> {
    let dataset = read_dataset(data_path)?;
    let priors = build_prior_config(&dataset, config.prior_multiplier, &config.loss)?;
    let train_config = config.train_config(priors);
    let (params, report) = train(&train_config, &dataset)?;

    fs::create_dir_all(out)?;
    let params_path = out.join("params.json");
    write_atomic(&params_path, serde_json::to_string(&params)?.as_bytes())?;
    let steps_path = out.join("steps.jsonl");
    let mut steps = String::new();
    for record in &report.step_log {
        steps.push_str(&serde_json::to_string(record)?);
        steps.push('\n');
    }
    write_atomic(&steps_path, steps.as_bytes())?;
    let metrics_path = out.join("metrics.json");
    let table_path = out.join("metrics.txt");
    write_metrics(&report, &metrics_path, &table_path)?;

    say!(
        "trained {} for {} steps on {}",
        config.loss.variant.name(),
        report.step_log.len(),
        data_path.display()
    );
    if dataset.truth.is_some() {
        say!(
            "training-set micro: P={:.4} R={:.4} F1={:.4}",
            report.precision, report.recall, report.f1
        );
    } else {
        say!("training-set metrics unavailable (dataset has no truth labels)");
    }
    say!(
        "wrote {}, {}, {}, {}",
        params_path.display(),
        metrics_path.display(),
        table_path.display(),
        steps_path.display()
    );
    Ok(0)
}

fn cmd_eval(
    config: &ExperimentConfig,
    out: &Path,
    params_path: &Path,
    data_path: &Path,
) -> Result<i32> {
    let _ = config;
    let text = fs::read_to_string(params_path)?;
    let params: ModelParams = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", params_path.display())))?;
    let dataset = read_dataset(data_path)?;
    let report = evaluate(&params, &dataset)?;

    fs::create_dir_all(out)?;
    let metrics_path = out.join("eval_metrics.json");
    let table_path = out.join("eval_metrics.txt");
    write_metrics(&report, &metrics_path, &table_path)?;

    say!(
        "evaluated {} on {}: P={:.4} R={:.4} F1={:.4}",
        params_path.display(),
        data_path.display(),
        report.precision,
        report.recall,
        report.f1
    );
    say!("wrote {}, {}", metrics_path.display(), table_path.display());
    Ok(0)
}

fn cmd_sweep(
    config: &ExperimentConfig,
    out: &Path,
    train_path: &Path,
    eval_path: &Path,
) -> Result<i32> {
    let train_ds = read_dataset(train_path)?;
    let eval_ds = read_dataset(eval_path)?;
    let priors = build_prior_config(&train_ds, config.prior_multiplier, &config.loss)?;
    let base = config.train_config(priors);
    let threads = sweep_threads()?;
    let table = sweep_prior_multiplier(
        &base,
        &config.sweep.multipliers,
        &config.sweep.seeds,
        &train_ds,
        &eval_ds,
        threads,
    )?;

    fs::create_dir_all(out)?;
    let csv_path = out.join("sweep.csv");
    write_atomic(&csv_path, sweep_csv(&table).as_bytes())?;
    let priors_path = out.join("sweep_priors.jsonl");
    write_atomic(&priors_path, sweep_priors_jsonl(&table)?.as_bytes())?;

    say!(
        "swept {} multipliers x {} seeds ({} cells)",
        config.sweep.multipliers.len(),
        config.sweep.seeds.len(),
        table.cells.len()
    );
    say!("multiplier  mean-P   mean-R   mean-F1");
    for row in &table.summary {
        say!(
            "{:>10}  {:.4}  {:.4}  {:.4}",
            row.multiplier, row.precision, row.recall, row.f1
        );
    }
    say!("wrote {}, {}", csv_path.display(), priors_path.display());
    Ok(0)
}

fn cmd_grad_check(config: &ExperimentConfig) -> Result<i32> {
    // Test fixture: corrupt the analytic gradients to prove the check can
    // fail. Documented for tests only.
    let perturbation = match std::env::var("P3M_GRAD_CHECK_CORRUPT") {
        Ok(v) if v == "1" => 1e-3,
        _ => 0.0,
    };
    let started = Instant::now();
    let report = gradcheck::run_with_perturbation(config.train.seed, 20, perturbation)?;
    for check in &report.checks {
        say!(
            "{:<8} max rel err {:>12.3e} over {} instances  {}",
            check.variant.name(),
            check.max_rel_err,
            check.instances,
            if check.passed { "pass" } else { "FAIL" }
        );
    }
    say!(
        "gradient check {} (tolerance {:.0e}, {:.2}s)",
        if report.passed { "passed" } else { "FAILED" },
        report.tolerance,
        started.elapsed().as_secs_f64()
    );
    Ok(if report.passed { 0 } else { 1 })
}

fn sweep_threads() -> Result<Option<usize>> {
    match std::env::var("P3M_THREADS") {
        Ok(v) => {
            let parsed = v.parse::<usize>().map_err(|_| {
                Error::Usage(format!("P3M_THREADS must be a positive integer, got `{v}`"))
            })?;
            if parsed == 0 {
                return Err(Error::Usage("P3M_THREADS must be >= 1".into()));
            }
            Ok(Some(parsed))
        }
        Err(_) => Ok(None),
    }
}

fn sweep_csv(table: &SweepTable) -> String {
    let mut csv = String::from("multiplier,seed,precision,recall,f1\n");
    for cell in &table.cells {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            cell.multiplier,
            cell.seed,
            cell.report.precision,
            cell.report.recall,
            cell.report.f1
        ));
    }
    for row in &table.summary {
        csv.push_str(&format!(
            "{},mean,{},{},{}\n",
            row.multiplier, row.precision, row.recall, row.f1
        ));
    }
    csv
}

fn sweep_priors_jsonl(table: &SweepTable) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Row<'a> {
        multiplier: f64,
        seed: u64,
        priors: &'a crate::priors::PriorConfig,
    }
    let mut text = String::new();
    for cell in &table.cells {
        let row = Row {
            multiplier: cell.multiplier,
            seed: cell.seed,
            priors: &cell.priors,
        };
        text.push_str(&serde_json::to_string(&row)?);
        text.push('\n');
    }
    Ok(text)
}

/// Machine record without the step log, plus the aligned human table.
fn write_metrics(report: &MetricsReport, json_path: &Path, table_path: &Path) -> Result<()> {
    let mut trimmed = report.clone();
    trimmed.step_log.clear();
    write_atomic(json_path, serde_json::to_string(&trimmed)?.as_bytes())?;
    write_atomic(table_path, metrics_table(report).as_bytes())?;
    Ok(())
}

fn metrics_table(report: &MetricsReport) -> String {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut text = format!("# generated-at-unix {stamp}\n");
    text.push_str(&format!("micro-precision {:.6}\n", report.precision));
    text.push_str(&format!("micro-recall    {:.6}\n", report.recall));
    text.push_str(&format!("micro-f1        {:.6}\n", report.f1));
    text.push_str("\nclass      tp      fp      fn\n");
    for c in &report.per_class {
        text.push_str(&format!(
            "{:>5}  {:>6}  {:>6}  {:>6}\n",
            c.class, c.tp, c.fp, c.fn_count
        ));
    }
    text
}

/// Writes to a temp sibling and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a writable file path: {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train_eval::{ClassCounts, SweepCell, SweepSummary};

    fn report(p: f64, r: f64, f1: f64) -> MetricsReport {
        MetricsReport {
            precision: p,
            recall: r,
            f1,
            per_class: vec![ClassCounts { class: 1, tp: 3, fp: 1, fn_count: 2 }],
            step_log: Vec::new(),
        }
    }

    #[test]
    fn variant_parser_accepts_public_names_only() {
        assert_eq!(parse_variant("pm").unwrap(), Variant::Pm);
        assert_eq!(parse_variant("p2m-all").unwrap(), Variant::P2mAll);
        assert_eq!(parse_variant("p3m-ori").unwrap(), Variant::P3mOri);
        assert!(parse_variant("naive-pn").is_err());
        assert!(parse_variant("P3M").is_err());
    }

    #[test]
    fn sweep_csv_has_cell_rows_then_mean_rows() {
        let priors = build_prior_config(
            &generate(&crate::datagen::GenSpec {
                n: 50,
                d_in: 4,
                k: 2,
                pi_true: vec![0.4, 0.4],
                erasure: vec![0.3, 0.3],
                separation: 1.0,
                noise: 0.2,
                seed: 3,
            })
            .unwrap(),
            1.5,
            &crate::priors::PriorGlobals::default(),
        )
        .unwrap();
        let table = SweepTable {
            cells: vec![SweepCell {
                multiplier: 2.0,
                seed: 62,
                priors,
                report: report(0.5, 0.25, 1.0 / 3.0),
            }],
            summary: vec![SweepSummary {
                multiplier: 2.0,
                precision: 0.5,
                recall: 0.25,
                f1: 1.0 / 3.0,
            }],
        };
        let csv = sweep_csv(&table);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "multiplier,seed,precision,recall,f1");
        assert!(lines[1].starts_with("2,62,0.5,0.25,"));
        assert!(lines[2].starts_with("2,mean,0.5,0.25,"));
        assert_eq!(lines.len(), 3);

        let jsonl = sweep_priors_jsonl(&table).unwrap();
        let row: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(row["seed"], 62);
        assert_eq!(row["priors"]["prior_multiplier"], 1.5);
    }

    #[test]
    fn metrics_table_confines_the_timestamp_to_the_header() {
        let text = metrics_table(&report(0.75, 0.5, 0.6));
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# generated-at-unix "));
        let rest: Vec<&str> = lines.collect();
        assert!(rest.iter().all(|l| !l.contains('#')));
        assert!(rest[0].starts_with("micro-precision 0.750000"));
        assert!(rest.iter().any(|l| l.contains("class")));
    }

    #[test]
    fn write_atomic_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("file.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
