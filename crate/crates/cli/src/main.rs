use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gcpool::gradcheck::GradcheckOptions;
use gcpool::optim::ScheduleSpec;
use gcpool_cli::commands::{self, CheckFailed};
use gcpool_cli::config::{ConfigError, RunConfig};
use gcpool_cli::exit_code;

#[derive(Parser)]
#[command(name = "gcpool", version, about = "Global covariance pooling experiments")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Override any config key, e.g. `--set probe.cadence=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct RunArgs {
    #[arg(long, value_parser = ["gap", "gcp"])]
    head: Option<String>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write convergence.csv plus a checkpoint.
    Train(RunArgs),
    /// Train with landscape probes and write probes.csv.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        cadence: Option<u64>,
        /// Step grid as `a,b,count`.
        #[arg(long)]
        grid: Option<String>,
        /// Step against the gradient instead of along it.
        #[arg(long)]
        descent: bool,
        /// Probe the quadratic oracle ½‖x‖² at this point instead of training,
        /// e.g. `--oracle 3,4`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        oracle: Option<Vec<f64>>,
    },
    /// Compare the GCP backward pass against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        /// Negate the K matrix (mutation check; every case should fail).
        #[arg(long, hide = true)]
        flip_k_sign: bool,
    },
    /// Tabulate a learning-rate schedule.
    Schedule {
        /// One of the named presets; defaults to the config's schedule.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 100)]
        horizon: u32,
    },
    /// Corruption and perturbation report of a model against a baseline.
    Robustness {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Matching epoch of run A against run B's final accuracy.
    Compare { run_a: PathBuf, run_b: PathBuf },
    /// Re-render the SVG charts of a run directory from its CSV files.
    Plot { dir: PathBuf },
    /// Write the configured dataset as train.bin / test.bin containers.
    GenData,
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut o = Vec::new();
    if let Some(s) = cli.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(p) = &cli.out {
        o.push(format!("out={}", toml::Value::String(p.display().to_string())));
    }
    if let Some(t) = cli.threads {
        o.push(format!("threads={t}"));
    }
    if cli.deterministic {
        o.push("deterministic=true".into());
    }
    let run = match &cli.command {
        Command::Train(r) | Command::Probe { run: r, .. } => Some(r),
        _ => None,
    };
    if let Some(r) = run {
        if let Some(h) = &r.head {
            o.push(format!("head=\"{h}\""));
        }
        if let Some(e) = r.epochs {
            o.push(format!("epochs={e}"));
        }
        if let Some(s) = r.max_steps {
            o.push(format!("max_steps={s}"));
        }
        if let Some(b) = r.batch_size {
            o.push(format!("batch_size={b}"));
        }
    }
    if let Command::Probe { cadence, grid, descent, .. } = &cli.command {
        if let Some(c) = cadence {
            o.push(format!("probe.cadence={c}"));
        }
        if let Some(g) = grid {
            let parts: Vec<&str> = g.split(',').collect();
            if let [a, b, n] = parts[..] {
                o.push(format!("probe.grid={{a={a}, b={b}, count={n}}}"));
            } else {
                o.push(format!("probe.grid=\"{g}\""));
            }
        }
        if *descent {
            o.push("probe.direction=\"descent\"".into());
        }
    }
    o.extend(cli.set.iter().cloned());
    o
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides(&cli))?;
    let threads = cfg.thread_count();
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Train(_) => {
            let s = commands::cmd_train(&cfg)?;
            println!(
                "trained {} steps; final test accuracy {}; outputs in {}",
                s.report.steps,
                s.report.final_accuracy().map_or("n/a".into(), |a| format!("{a:.4}")),
                s.dir.display()
            );
        }
        Command::Probe { oracle: Some(x), .. } => {
            let dir = cfg.out.clone();
            print!("{}", commands::cmd_probe_oracle(&x, &cfg.probe.grid, cfg.probe.direction, &dir)?);
        }
        Command::Probe { .. } => {
            let s = commands::cmd_probe(&cfg)?;
            let series = s.report.probes.as_ref().expect("probing enabled");
            println!(
                "{} probe records; median dl range {:?}; median dg range {:?}; outputs in {}",
                series.records.len(),
                series.median_dl_range(),
                series.median_dg_range(),
                s.dir.display()
            );
        }
        Command::Gradcheck { cases, flip_k_sign } => {
            let opts = GradcheckOptions { flip_k_sign, ..Default::default() };
            let summary = commands::cmd_gradcheck(cfg.seed, cases, &opts, Some(&cfg.out))?;
            print!("{}", summary.table());
            if !summary.all_passed() {
                let failed = summary.reports.iter().filter(|r| !r.passed).count();
                bail!(CheckFailed(format!(
                    "{failed} of {cases} cases exceed relative error {:e} (max {:e})",
                    summary.tolerance, summary.max_error
                )));
            }
            println!("all {cases} cases within {:e} (max {:e})", summary.tolerance, summary.max_error);
        }
        Command::Schedule { preset, horizon } => {
            let (spec, name) = match preset {
                Some(p) => (
                    ScheduleSpec::preset(&p).ok_or_else(|| {
                        ConfigError(vec![format!("unknown preset '{p}', expected one of {}", ScheduleSpec::PRESETS.join(", "))])
                    })?,
                    p,
                ),
                None => (cfg.schedule.resolve().map_err(|e| ConfigError(vec![e]))?, "config".to_string()),
            };
            print!("{}", commands::cmd_schedule(&spec, horizon, &name, &cfg.out, cfg.seed)?);
        }
        Command::Robustness { model, baseline } => {
            let r = commands::cmd_robustness(&model, &baseline, &cfg)?;
            println!("mCE {:.2}  relative mCE {:.2}  mFR {:.2}", r.scores.mce, r.scores.relative_mce, r.mfr);
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Compare { run_a, run_b } => {
            let c = commands::cmd_compare(&run_a, &run_b, &cfg.out, cfg.seed)?;
            match c.matching_epoch {
                Some(e) => println!("matching epoch: {e}"),
                None => println!("matching epoch: none"),
            }
        }
        Command::Plot { dir } => {
            let n = commands::render_run(&dir)?;
            println!("rendered {n} charts in {}", dir.display());
        }
        Command::GenData => {
            let (train, test) = commands::cmd_gen_data(&cfg)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { gcpool_cli::EXIT_VALIDATION } else { gcpool_cli::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
