//! Subcommand implementations. Each writes its artifacts into the run
//! directory and finishes by refreshing `manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gcpool::gradcheck::{run_gradcheck, CaseReport, GradcheckOptions};
use gcpool::net::Network;
use gcpool::optim::{emit_schedule, ScheduleSpec};
use gcpool::probes::{lipschitz_samples, predictiveness_samples, ProbeDirection, QuadraticOracle, StepGrid};
use gcpool::robustness::{evaluate_robustness, RobustnessOptions, RobustnessReport};
use gcpool::train::{matching_epoch, run_probed_training, TrainReport};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::svg::{line_chart, Series};

/// A numerical self-check failed; maps to exit status 2.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// SHA-256 of every file in `dir` except the manifest itself.
pub fn write_manifest(dir: &Path, seed: u64) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_FILE || !entry.file_type()?.is_file() {
            continue;
        }
        let digest = Sha256::digest(fs::read(entry.path())?);
        files.insert(name, digest.iter().map(|b| format!("{b:02x}")).collect());
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        seed: u64,
        files: &'a BTreeMap<String, String>,
    }
    write(dir, MANIFEST_FILE, serde_json::to_string_pretty(&Manifest { seed, files: &files })? + "\n")?;
    Ok(files)
}

pub struct TrainSummary {
    pub report: TrainReport,
    pub network: Network,
    pub dir: PathBuf,
}

fn train_run(cfg: &RunConfig, with_probes: bool) -> Result<TrainSummary> {
    let dir = cfg.out.clone();
    prepare(&dir)?;
    let (train, test) = cfg.load_data()?;
    let mut net = cfg.build_network(&train)?;
    write(&dir, CONFIG_FILE, cfg.resolved(&net)?.to_toml()?)?;
    let opts = cfg.train_options(with_probes)?;
    let started = Instant::now();
    let report = run_probed_training(&mut net, &train, &test, &opts)?;
    log::info!("trained {} steps in {:.1?}", report.steps, started.elapsed());

    write(&dir, "convergence.csv", report.convergence_csv())?;
    net.save(dir.join(CHECKPOINT_FILE))?;
    if let Some(series) = &report.probes {
        write(&dir, "probes.csv", series.to_csv())?;
    }
    render_run(&dir)?;
    write_manifest(&dir, cfg.seed)?;
    Ok(TrainSummary { report, network: net, dir })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    train_run(cfg, false)
}

pub fn cmd_probe(cfg: &RunConfig) -> Result<TrainSummary> {
    train_run(cfg, true)
}

/// Probe samples of `L(x) = ½‖x‖²`, one CSV row per grid point.
pub fn cmd_probe_oracle(x: &[f64], grid: &StepGrid, direction: ProbeDirection, dir: &Path) -> Result<String> {
    prepare(dir)?;
    let q = QuadraticOracle { x: x.to_vec() };
    let dl = lipschitz_samples(&q, grid, direction)?;
    let dg = predictiveness_samples(&q, grid, direction)?;
    let mut csv = String::from("eta,dl,dg\n");
    for ((eta, l), g) in grid.points().iter().zip(&dl.samples).zip(&dg.samples) {
        csv.push_str(&format!("{eta},{l},{g}\n"));
    }
    write(dir, "oracle.csv", &csv)?;
    Ok(csv)
}

pub struct GradcheckSummary {
    pub reports: Vec<CaseReport>,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradcheckSummary {
    pub fn all_passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("case,n,d,min_gap,rel_error,passed,failure\n");
        for r in &self.reports {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.index,
                r.n,
                r.d,
                r.min_gap,
                r.rel_error,
                r.passed,
                r.failure.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

pub fn cmd_gradcheck(seed: u64, cases: usize, opts: &GradcheckOptions, dir: Option<&Path>) -> Result<GradcheckSummary> {
    if cases == 0 {
        bail!(crate::config::ConfigError(vec!["cases: must be at least 1".into()]));
    }
    let reports = run_gradcheck(seed, cases, opts);
    let max_error = reports.iter().map(|r| r.rel_error).fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
    let summary = GradcheckSummary { reports, max_error, tolerance: opts.tolerance };
    if let Some(dir) = dir {
        prepare(dir)?;
        write(dir, "gradcheck.csv", summary.table())?;
        write_manifest(dir, seed)?;
    }
    Ok(summary)
}

pub fn cmd_schedule(spec: &ScheduleSpec, horizon: u32, name: &str, dir: &Path, seed: u64) -> Result<String> {
    if horizon == 0 {
        bail!(crate::config::ConfigError(vec!["horizon: must be at least 1".into()]));
    }
    prepare(dir)?;
    let csv = emit_schedule(spec, horizon)?;
    write(dir, "schedule.csv", &csv)?;
    let pts = read_columns(&dir.join("schedule.csv"), "epoch", "lr")?;
    write(dir, "schedule.svg", line_chart(&format!("learning rate: {name}"), "epoch", "lr", &[Series::new(name, pts)]))?;
    write_manifest(dir, seed)?;
    Ok(csv)
}

pub fn cmd_robustness(model: &Path, baseline: &Path, cfg: &RunConfig) -> Result<RobustnessReport> {
    let model_net = Network::load(model).with_context(|| format!("loading model {}", model.display()))?;
    let base_net = Network::load(baseline).with_context(|| format!("loading baseline {}", baseline.display()))?;
    let (_, test) = cfg.load_data()?;
    let opts = RobustnessOptions { seed: cfg.seed, ..Default::default() };
    let report = evaluate_robustness(&model_net, &base_net, &test, &opts)?;
    let dir = &cfg.out;
    prepare(dir)?;
    write(dir, "robustness.json", serde_json::to_string_pretty(&report)? + "\n")?;
    write(dir, "robustness.csv", report.to_csv())?;
    write_manifest(dir, cfg.seed)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    pub accuracy_a: Vec<f64>,
    pub accuracy_b: Vec<f64>,
    /// First epoch at which A reaches B's final accuracy.
    pub matching_epoch: Option<usize>,
}

/// `(epoch, eval_acc)` for every row that carries an accuracy.
pub fn read_epoch_accuracy(path: &Path) -> Result<Vec<(u32, f64)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let acc = rec.get(4).unwrap_or("");
        if !acc.is_empty() {
            out.push((rec[1].parse()?, acc.parse()?));
        }
    }
    Ok(out)
}

pub fn cmd_compare(run_a: &Path, run_b: &Path, dir: &Path, seed: u64) -> Result<Comparison> {
    let a = read_epoch_accuracy(&run_a.join("convergence.csv"))?;
    let b = read_epoch_accuracy(&run_b.join("convergence.csv"))?;
    let accuracy_a: Vec<f64> = a.iter().map(|p| p.1).collect();
    let accuracy_b: Vec<f64> = b.iter().map(|p| p.1).collect();
    let cmp = Comparison {
        run_a: run_a.to_path_buf(),
        run_b: run_b.to_path_buf(),
        matching_epoch: matching_epoch(&accuracy_a, &accuracy_b),
        accuracy_a,
        accuracy_b,
    };
    prepare(dir)?;
    write(dir, "compare.json", serde_json::to_string_pretty(&cmp)? + "\n")?;
    let pts = |v: &[(u32, f64)]| v.iter().map(|&(e, a)| (e as f64, a)).collect();
    write(
        dir,
        "compare.svg",
        line_chart(
            "eval accuracy",
            "epoch",
            "accuracy",
            &[Series::new(format!("A: {}", run_a.display()), pts(&a)), Series::new(format!("B: {}", run_b.display()), pts(&b))],
        ),
    )?;
    write_manifest(dir, seed)?;
    Ok(cmp)
}

/// Two numeric columns of a CSV file, skipping rows where either is blank.
pub fn read_columns(path: &Path, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).with_context(|| format!("{} has no column '{name}'", path.display()))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec[xi].is_empty() || rec[yi].is_empty() {
            continue;
        }
        out.push((rec[xi].parse()?, rec[yi].parse()?));
    }
    Ok(out)
}

/// Re-renders every chart of a run directory from its CSV files.
pub fn render_run(dir: &Path) -> Result<usize> {
    let mut written = 0;
    let conv = dir.join("convergence.csv");
    if conv.exists() {
        let loss = read_columns(&conv, "step", "train_loss")?;
        write(dir, "convergence.svg", line_chart("training loss", "step", "loss", &[Series::new("train_loss", loss)]))?;
        let acc = read_columns(&conv, "step", "eval_acc")?;
        write(dir, "accuracy.svg", line_chart("eval accuracy", "step", "accuracy", &[Series::new("eval_acc", acc)]))?;
        written += 2;
    }
    let probes = dir.join("probes.csv");
    if probes.exists() {
        let series = |cols: &[&str]| -> Result<Vec<Series>> {
            cols.iter().map(|c| Ok(Series::new(*c, read_columns(&probes, "step", c)?))).collect()
        };
        write(dir, "probes_dl.svg", line_chart("loss along the gradient", "step", "loss", &series(&["loss", "dl_min", "dl_max"])?))?;
        write(dir, "probes_dg.svg", line_chart("gradient predictiveness", "step", "distance", &series(&["dg_min", "dg_max"])?))?;
        written += 2;
    }
    let sched = dir.join("schedule.csv");
    if sched.exists() {
        let pts = read_columns(&sched, "epoch", "lr")?;
        write(dir, "schedule.svg", line_chart("learning rate", "epoch", "lr", &[Series::new("lr", pts)]))?;
        written += 1;
    }
    Ok(written)
}

/// Writes train/test containers for the configured dataset.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    prepare(&cfg.out)?;
    let (train, test) = cfg.load_data()?;
    let (tp, sp) = (cfg.out.join("train.bin"), cfg.out.join("test.bin"));
    train.save(&tp)?;
    test.save(&sp)?;
    write_manifest(&cfg.out, cfg.seed)?;
    Ok((tp, sp))
}
