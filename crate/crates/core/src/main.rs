use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semcom::channel::ChannelKind;
use semcom::config::ExperimentConfig;
use semcom::train::{self, Experiment};
use semcom::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "semcom", version, about = "Task-oriented semantic communication simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration; defaults to `<out>/config.toml` when it exists.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overwrite existing outputs and retrain from scratch.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task set and its manifest.
    GenData,
    /// Run the configured training stages.
    Train,
    /// Accuracy, Σk and BCR per SNR.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Comma-separated SNRs in dB.
        #[arg(long, allow_hyphen_values = true)]
        snrs: Option<String>,
        /// Comma-separated channel kinds (awgn, rayleigh).
        #[arg(long)]
        channel: Option<String>,
        /// Rayleigh gain scale; defaults to the configured one.
        #[arg(long = "sigma-h")]
        sigma_h: Option<f64>,
    },
    /// Per-token allocation histograms per SNR.
    ReportAlloc {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Comma-separated SNRs in dB.
        #[arg(long, allow_hyphen_values = true)]
        snrs: Option<String>,
    },
    /// Run the invariant suite.
    Selftest,
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint to load; defaults to the latest stage in `<out>/checkpoints`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let echoed = g.out.join("config.toml");
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if echoed.exists() => ExperimentConfig::load(&echoed)?,
        None => ExperimentConfig::default().resolved(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Input(format!("bad {what} {s:?}"))))
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn echo_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    train::write_text(&out.join("config.toml"), &cfg.to_toml())
}

fn resolve_checkpoint(g: &Global, arg: &CheckpointArg) -> Result<PathBuf> {
    match &arg.checkpoint {
        Some(p) if p.exists() => Ok(p.clone()),
        Some(p) => Err(Error::Input(format!("checkpoint {} does not exist", p.display()))),
        None => train::latest_checkpoint(&g.out)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Input(format!("no checkpoint under {}", g.out.join("checkpoints").display()))),
    }
}

fn gen_data(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    let non_empty = fs::read_dir(&g.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !g.force {
        return Err(Error::Input(format!("{} is not empty; pass --force to overwrite", g.out.display())));
    }
    ensure_dir(&g.out)?;
    let exp = Experiment::new(cfg)?;
    let path = g.out.join("manifest.csv");
    exp.data.write_manifest(&path)?;
    echo_config(&g.out, &exp.cfg)?;
    println!("{} train + {} test tasks -> {}", exp.data.train.len(), exp.data.test.len(), path.display());
    Ok(())
}

fn train_cmd(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    ensure_dir(&g.out)?;
    echo_config(&g.out, &cfg)?;
    let mode = cfg.train.exec_mode();
    let exp = Experiment::new(cfg)?;
    let run = train::run_training(&exp, &g.out, g.force, mode)?;
    for s in &run.resumed {
        println!("stage {}: restored from checkpoint", s.number());
    }
    for r in run.metrics.iter().filter(|r| !run.resumed.iter().any(|s| s.number() == r.stage)) {
        println!(
            "stage {} epoch {:>2}  loss {:.4}  task {:.4}  acc {:.3}  Σk {}",
            r.stage,
            r.epoch,
            r.loss_total,
            r.loss_task,
            r.accuracy,
            r.loss_rate_bits.map_or("-".into(), |b| format!("{b:.1}"))
        );
    }
    println!("trained through stage {}; metrics in {}", run.stage.number(), g.out.join("metrics.csv").display());
    Ok(())
}

fn eval_cmd(g: &Global, ckpt: &CheckpointArg, snrs: Option<&str>, channel: Option<&str>, sigma_h: Option<f64>) -> Result<()> {
    let cfg = load_config(g)?;
    let path = resolve_checkpoint(g, ckpt)?;
    let (model, stage) = train::load_model(&cfg, &path)?;
    let snrs = match snrs {
        Some(s) => parse_list::<f64>(s, "SNR")?,
        None => cfg.eval.snrs.clone(),
    };
    let kinds = match channel {
        Some(s) => parse_list::<ChannelKind>(s, "channel kind")?,
        None => vec![cfg.channel.kind],
    };
    let sigma_h = sigma_h.unwrap_or(cfg.channel.sigma_h);
    let mode = cfg.train.exec_mode();
    let draws = cfg.eval.noise_draws;
    let exp = Experiment::new(cfg)?;
    let tasks = train::eval_tasks(&exp);
    let mut rows = Vec::new();
    for kind in kinds {
        rows.extend(train::evaluate_sweep(&model, &exp, stage, tasks, &snrs, kind, sigma_h, draws, mode)?);
    }
    ensure_dir(&g.out)?;
    let out = g.out.join("eval.csv");
    train::write_eval(&out, &rows)?;
    println!("{:<9} {:>7} {:>9} {:>8} {:>9}", "channel", "snr_db", "accuracy", "±95%", "mean Σk");
    for r in &rows {
        println!(
            "{:<9} {:>7} {:>9.4} {:>8.4} {:>9.1}",
            r.channel.label(),
            r.snr_db,
            r.accuracy,
            r.ci_half_width,
            r.mean_sum_k
        );
    }
    println!("-> {}", out.display());
    Ok(())
}

fn report_alloc(g: &Global, ckpt: &CheckpointArg, snrs: Option<&str>) -> Result<()> {
    let cfg = load_config(g)?;
    let path = resolve_checkpoint(g, ckpt)?;
    let (model, stage) = train::load_model(&cfg, &path)?;
    let snrs = match snrs {
        Some(s) => parse_list::<f64>(s, "SNR")?,
        None => cfg.eval.snrs.clone(),
    };
    let mode = cfg.train.exec_mode();
    let draws = cfg.eval.noise_draws;
    let exp = Experiment::new(cfg)?;
    let rows = train::allocation_report(&model, &exp, stage, train::eval_tasks(&exp), &snrs, draws, mode)?;
    ensure_dir(&g.out)?;
    let out = g.out.join("alloc.csv");
    train::write_alloc(&out, &rows, model.codec.rates.rates())?;
    println!("mean complex symbols per token");
    print!("{}", train::render_alloc_table(&rows, &snrs));
    println!("-> {}", out.display());
    Ok(())
}

/// 2 when any invariant fails.
fn selftest_cmd() -> ExitCode {
    let checks = selftest::run_all();
    for c in &checks {
        println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Config { .. } => 1,
        Error::Io { .. } | Error::Csv(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let g = &cli.global;
    let result = match &cli.command {
        Command::GenData => gen_data(g),
        Command::Train => train_cmd(g),
        Command::Eval { ckpt, snrs, channel, sigma_h } => eval_cmd(g, ckpt, snrs.as_deref(), channel.as_deref(), *sigma_h),
        Command::ReportAlloc { ckpt, snrs } => report_alloc(g, ckpt, snrs.as_deref()),
        Command::Selftest => return selftest_cmd(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
