//! Command-line front end: verification suites, training, evaluation,
//! ablation grids, and checkpoint inspection.
//!
//! Exit codes: 0 all executed checks passed; 1 a check failed or a run
//! diverged; 2 configuration error (the offending key or path is named).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use interformer::ablate::{ablate, ablation_csv, fusion_grid, interaction_grid};
use interformer::checkpoint;
use interformer::config::{build_train_config, parse_override, ConfigError};
use interformer::data::gen_task;
use interformer::suites::{gradient_suite, identity_suite, oracle_suite};
use interformer::train::{
    evaluate, task_config_lines, task_from_checkpoint, train, Model, TrainError,
};

#[derive(Parser)]
#[command(
    name = "interformer",
    version,
    about = "Two-branch encoder with gated feature interaction: verification, training, ablation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Config file with `key = value` lines (dotted sections, e.g. block.d = 32)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable); wins over the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Root seed for all random streams
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for CSV reports and checkpoints
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    /// Fusion mode shorthand (same as --set block.fusion=...)
    #[arg(long, global = true, value_parser = ["add", "concat", "sfm"])]
    fusion: Option<String>,

    /// Local-to-global interaction shorthand
    #[arg(long, global = true, value_parser = ["on", "off"])]
    l2g: Option<String>,

    /// Global-to-local interaction shorthand
    #[arg(long, global = true, value_parser = ["on", "off"])]
    g2l: Option<String>,

    /// Dynamic-ReLU shorthand
    #[arg(long, global = true, value_parser = ["on", "off"])]
    dyrelu: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the finite-difference suite over every primitive, layer, and
    /// assembled block configuration
    CheckGradients {
        /// Cycle sequence lengths and dims across block configs instead of
        /// sweeping the full cross product
        #[arg(long)]
        quick: bool,
    },
    /// Run the brute-force equivalence oracles and reduction identities
    VerifyOracles {
        /// Random instances per oracle
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Train on the configured synthetic task; writes loss_curve.csv and
    /// model.ckpt
    Train,
    /// Evaluate a checkpoint on its stored task's validation split
    Evaluate {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
    },
    /// Run an ablation grid over shared seeds; writes one CSV per grid
    Ablate {
        #[arg(long, default_value = "both", value_parser = ["interactions", "fusion", "both"])]
        grid: String,
        /// Seeds per cell (seed, seed+1, ...)
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Run cells sequentially instead of across threads
        #[arg(long)]
        serial: bool,
    },
    /// Print a checkpoint's config, parameter statistics, and totals
    Inspect {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
    },
    /// Run every verification suite and write a consolidated CSV report
    ExportReport,
}

enum CliError {
    Config(String),
    Failed(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::ConfigMismatch(_) | TrainError::Checkpoint(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<interformer::TensorError> for CliError {
    fn from(e: interformer::TensorError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(format!("io: {e}"))
    }
}

fn gather_overrides(cli: &Cli) -> Result<Vec<(String, String)>, CliError> {
    let mut overrides = Vec::new();
    for s in &cli.sets {
        overrides.push(parse_override(s)?);
    }
    if let Some(f) = &cli.fusion {
        overrides.push(("block.fusion".to_string(), f.clone()));
    }
    if let Some(v) = &cli.l2g {
        overrides.push(("block.l2g".to_string(), v.clone()));
    }
    if let Some(v) = &cli.g2l {
        overrides.push(("block.g2l".to_string(), v.clone()));
    }
    if let Some(v) = &cli.dyrelu {
        overrides.push(("block.dyrelu".to_string(), v.clone()));
    }
    Ok(overrides)
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_check_gradients(cli: &Cli, quick: bool) -> Result<bool, CliError> {
    ensure_out(&cli.out)?;
    let seeds = [cli.seed, cli.seed + 1, cli.seed + 2];
    let reports = gradient_suite(&seeds, !quick)?;
    let mut csv = String::from("op_name,max_abs_err,max_rel_err,tolerance,passed,seed\n");
    let mut all_pass = true;
    for r in &reports {
        println!("{}", r.line());
        csv.push_str(&format!(
            "{},{:.6e},{:.6e},{:.1e},{},{}\n",
            r.op_name, r.max_abs_err, r.max_rel_err, r.tolerance, r.passed, r.seed
        ));
        all_pass &= r.passed;
    }
    fs::write(cli.out.join("gradient_checks.csv"), csv)?;
    println!(
        "gradient checks: {}/{} passed",
        reports.iter().filter(|r| r.passed).count(),
        reports.len()
    );
    Ok(all_pass)
}

fn cmd_verify_oracles(cli: &Cli, instances: usize) -> Result<bool, CliError> {
    ensure_out(&cli.out)?;
    let mut reports = oracle_suite(cli.seed, instances)?;
    reports.extend(identity_suite(cli.seed)?);
    let mut csv = String::from("name,instances,max_abs_err,threshold,passed\n");
    let mut all_pass = true;
    for r in &reports {
        println!("{}", r.line());
        csv.push_str(&format!(
            "{},{},{:.6e},{:.1e},{}\n",
            r.name, r.instances, r.max_abs_err, r.threshold, r.passed
        ));
        all_pass &= r.passed;
    }
    fs::write(cli.out.join("oracle_checks.csv"), csv)?;
    println!(
        "oracle checks: {}/{} passed",
        reports.iter().filter(|r| r.passed).count(),
        reports.len()
    );
    Ok(all_pass)
}

fn cmd_train(cli: &Cli) -> Result<bool, CliError> {
    ensure_out(&cli.out)?;
    let overrides = gather_overrides(cli)?;
    let cfg = build_train_config(cli.config.as_deref(), &overrides, cli.seed)?;
    match train(&cfg) {
        Ok(out) => {
            let mut csv = String::from("step,train_loss\n");
            for (i, l) in out.report.loss_curve.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", i, l));
            }
            fs::write(cli.out.join("loss_curve.csv"), csv)?;
            let ckpt_path = cli.out.join("model.ckpt");
            out.model.save(&ckpt_path, &task_config_lines(&cfg.task))?;
            println!(
                "trained {} steps  final_train_loss={:.6}  val_accuracy={:.4}  fingerprint={}  wall={:.1}s",
                out.report.steps_run,
                out.report.final_train_loss,
                out.report.final_val_accuracy,
                out.report.config_fingerprint,
                out.report.wall_time_secs
            );
            println!("wrote {}", ckpt_path.display());
            Ok(true)
        }
        Err(TrainError::Diverged { step, loss, report }) => {
            let mut csv = String::from("step,train_loss\n");
            for (i, l) in report.loss_curve.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", i, l));
            }
            fs::write(cli.out.join("loss_curve.csv"), csv)?;
            println!("training diverged at step {step} (loss {loss})");
            Ok(false)
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_evaluate(cli: &Cli, ckpt_path: &Path) -> Result<bool, CliError> {
    let overrides = gather_overrides(cli)?;
    let ckpt = checkpoint::load(ckpt_path).map_err(TrainError::from)?;
    let mut model = Model::from_checkpoint(&ckpt)?;
    let mut task = task_from_checkpoint(&ckpt)?;
    for (k, v) in &overrides {
        match k.as_str() {
            "task.seed" => {
                task.seed = v
                    .parse()
                    .map_err(|_| CliError::Config("bad value for task.seed".into()))?
            }
            "task.samples" => {
                task.samples = v
                    .parse()
                    .map_err(|_| CliError::Config("bad value for task.samples".into()))?
            }
            other => {
                return Err(CliError::Config(format!(
                    "evaluate supports task.seed and task.samples overrides, got '{other}'"
                )))
            }
        }
    }
    let dataset = gen_task(&task).map_err(TrainError::from)?;
    let result = evaluate(&mut model, &dataset, &dataset.val_idx)?;
    println!(
        "evaluated {} ({} val samples): accuracy={:.4} loss={:.6}",
        ckpt_path.display(),
        dataset.val_idx.len(),
        result.accuracy,
        result.loss
    );
    Ok(true)
}

fn cmd_ablate(cli: &Cli, grid: &str, n_seeds: usize, serial: bool) -> Result<bool, CliError> {
    ensure_out(&cli.out)?;
    let overrides = gather_overrides(cli)?;
    let base = build_train_config(cli.config.as_deref(), &overrides, cli.seed)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cli.seed + i).collect();
    let mut all_ok = true;
    let grids: Vec<(&str, Vec<interformer::ablate::CellSpec>)> = match grid {
        "interactions" => vec![("interactions", interaction_grid())],
        "fusion" => vec![("fusion", fusion_grid())],
        _ => vec![
            ("interactions", interaction_grid()),
            ("fusion", fusion_grid()),
        ],
    };
    for (name, cells) in grids {
        let results = ablate(&base, &cells, &seeds, !serial);
        let csv = ablation_csv(&results);
        let path = cli.out.join(format!("ablation_{name}.csv"));
        fs::write(&path, &csv)?;
        print!("{csv}");
        println!("wrote {}", path.display());
        all_ok &= results.iter().all(|r| r.status == "ok");
    }
    Ok(all_ok)
}

fn cmd_inspect(_cli: &Cli, ckpt_path: &Path) -> Result<bool, CliError> {
    let ckpt = checkpoint::load(ckpt_path).map_err(TrainError::from)?;
    let model = Model::from_checkpoint(&ckpt)?;
    println!("checkpoint: {}", ckpt_path.display());
    for (k, v) in &ckpt.config {
        println!("  {k} = {v}");
    }
    println!("records:");
    println!(
        "  {:<28} {:>12} {:>8} {:>11} {:>11} {:>11} {:>11}",
        "name", "shape", "numel", "mean", "std", "min", "max"
    );
    for r in &ckpt.records {
        let n = r.data.len() as f64;
        let mean = r.data.iter().sum::<f64>() / n;
        let var = r.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let min = r.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = r.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "  {:<28} {:>12} {:>8} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e}",
            r.name,
            format!("{:?}", r.shape),
            r.data.len(),
            mean,
            var.sqrt(),
            min,
            max
        );
    }
    let encoder_actual = model.encoder_param_count();
    let encoder_expected = model.expected_encoder_count();
    let total = model.store.scalar_count();
    println!("encoder parameters: {encoder_actual} (formula: {encoder_expected})");
    println!("total learnable parameters: {total}");
    if encoder_actual != encoder_expected {
        println!("FAIL parameter accounting mismatch");
        return Ok(false);
    }
    println!("PASS parameter accounting");
    Ok(true)
}

fn cmd_export_report(cli: &Cli) -> Result<bool, CliError> {
    ensure_out(&cli.out)?;
    let seeds = [cli.seed, cli.seed + 1, cli.seed + 2];
    let mut csv = String::from("suite,name,metric,threshold,passed\n");
    let mut all_pass = true;
    for r in gradient_suite(&seeds, false)? {
        csv.push_str(&format!(
            "gradient,{},{:.6e},{:.1e},{}\n",
            r.op_name, r.max_rel_err, r.tolerance, r.passed
        ));
        all_pass &= r.passed;
    }
    let mut oracle = oracle_suite(cli.seed, 50)?;
    oracle.extend(identity_suite(cli.seed)?);
    for r in oracle {
        csv.push_str(&format!(
            "oracle,{},{:.6e},{:.1e},{}\n",
            r.name, r.max_abs_err, r.threshold, r.passed
        ));
        all_pass &= r.passed;
    }
    let path = cli.out.join("verification_report.csv");
    fs::write(&path, csv)?;
    println!(
        "wrote {} ({})",
        path.display(),
        if all_pass { "all passed" } else { "FAILURES present" }
    );
    Ok(all_pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::CheckGradients { quick } => cmd_check_gradients(&cli, *quick),
        Cmd::VerifyOracles { instances } => cmd_verify_oracles(&cli, *instances),
        Cmd::Train => cmd_train(&cli),
        Cmd::Evaluate { ckpt } => cmd_evaluate(&cli, ckpt),
        Cmd::Ablate { grid, seeds, serial } => cmd_ablate(&cli, grid, *seeds, *serial),
        Cmd::Inspect { ckpt } => cmd_inspect(&cli, ckpt),
        Cmd::ExportReport => cmd_export_report(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}
