//! Mini-batch SGD training with optional landscape probes.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::optim::{lr_at, ScheduleSpec, SgdState};
use crate::probes::{
    gradient_predictiveness_probe, loss_lipschitz_probe, ProbeDirection, ProbeRecord, ProbeResult, ProbeSeries,
    StepGrid,
};
use crate::rng::derived;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    /// Probe every `cadence` steps (steps counted from 1).
    pub cadence: u64,
    pub grid: StepGrid,
    /// Layer whose output is the probe point; defaults to the first conv.
    pub layer: Option<usize>,
    pub direction: ProbeDirection,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { cadence: 20, grid: StepGrid::default(), layer: None, direction: ProbeDirection::Ascent }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: u32,
    /// Stops early once this many steps have run.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub probe: Option<ProbeOptions>,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size: must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum: must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay: must be >= 0, got {}", self.weight_decay));
        }
        if let Err(e) = self.schedule.validate() {
            problems.push(format!("schedule: {e}"));
        }
        if let Some(p) = &self.probe {
            if p.cadence == 0 {
                problems.push("probe.cadence: must be at least 1".to_string());
            }
            if let Err(e) = p.grid.validate() {
                problems.push(format!("probe.grid: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Domain(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub step: u64,
    /// 1-based training epoch the step belongs to.
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    /// Test accuracy, present on the last step of each epoch.
    pub eval_acc: Option<f64>,
}

pub const CONVERGENCE_CSV_HEADER: &str = "step,epoch,lr,train_loss,eval_acc";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ConvergenceRow>,
    pub probes: Option<ProbeSeries>,
    /// Test accuracy at the end of each completed epoch.
    pub epoch_accuracy: Vec<f64>,
    pub steps: u64,
}

impl TrainReport {
    pub fn convergence_csv(&self) -> String {
        convergence_csv(&self.rows)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epoch_accuracy.last().copied()
    }
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from(CONVERGENCE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let acc = r.eval_acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.epoch, r.lr, r.train_loss, acc));
    }
    out
}

/// Everything one probe evaluation saw, handed to training observers.
pub struct ProbeEvent<'a> {
    pub step: u64,
    pub loss: f64,
    pub grid: &'a [f64],
    pub dl: &'a ProbeResult,
    pub dg: &'a ProbeResult,
}

/// Classification accuracy over `ds`, evaluated in chunks of 256 samples.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(256) {
        let batch = ds.batch(chunk)?;
        let pred = net.predict(&batch.images)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn check_compatible(net: &Network, ds: &Dataset, name: &str) -> Result<()> {
    if ds.shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "{name} samples are {}, network expects {}",
            ds.shape(),
            net.input_shape()
        )));
    }
    if ds.classes != net.classes() {
        return Err(Error::Shape(format!(
            "{name} has {} classes, network outputs {}",
            ds.classes,
            net.classes()
        )));
    }
    Ok(())
}

pub fn run_probed_training(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    run_probed_training_observed(net, train, test, opts, &mut |_| {})
}

/// Trains `net` in place. Probes run on the current mini-batch before the
/// parameter update of every `cadence`-th step.
pub fn run_probed_training_observed(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    opts: &TrainOptions,
    observer: &mut dyn FnMut(&ProbeEvent),
) -> Result<TrainReport> {
    opts.validate()?;
    check_compatible(net, train, "training set")?;
    check_compatible(net, test, "test set")?;
    if train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let probe_layer = match &opts.probe {
        Some(p) => Some(match p.layer.or_else(|| net.first_conv()) {
            Some(l) if l < net.layers().len() => l,
            Some(l) => return Err(Error::Domain(format!("probe.layer: {l} is out of range"))),
            None => return Err(Error::Domain("probe.layer: network has no convolution".into())),
        }),
        None => None,
    };
    let mut series = opts.probe.as_ref().zip(probe_layer).map(|(p, layer)| ProbeSeries {
        head: net.head_kind(),
        seed: opts.seed,
        grid: p.grid,
        layer,
        direction: p.direction,
        records: Vec::new(),
    });

    let mut sgd = SgdState::new(0.0, opts.momentum, opts.weight_decay);
    let mut shuffle = derived(opts.seed, 0x5_4FF1E);
    let mut rows = Vec::new();
    let mut epoch_accuracy = Vec::new();
    let mut step: u64 = 0;
    let limit = opts.max_steps.unwrap_or(u64::MAX);
    let first = opts.schedule.first_epoch();

    'epochs: for epoch in 0..opts.epochs {
        let batches = train.epoch_batches(opts.batch_size, &mut shuffle);
        let n_batches = batches.len();
        for (bi, indices) in batches.into_iter().enumerate() {
            if step >= limit {
                break 'epochs;
            }
            step += 1;
            let lr = lr_at(&opts.schedule, first + epoch, step - 1)?;
            let batch = train.batch(&indices)?;
            let out = net.forward(&batch)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }

            if let (Some(p), Some(layer), Some(series)) = (&opts.probe, probe_layer, series.as_mut()) {
                if step.is_multiple_of(p.cadence) {
                    let dl = loss_lipschitz_probe(net, &out.tape, layer, &p.grid, p.direction)?;
                    let dg = gradient_predictiveness_probe(net, &out.tape, layer, &p.grid, p.direction)?;
                    observer(&ProbeEvent { step, loss: out.loss, grid: &p.grid.points(), dl: &dl, dg: &dg });
                    series.push(ProbeRecord {
                        step,
                        loss: out.loss,
                        dl_min: dl.min,
                        dl_max: dl.max,
                        dg_min: dg.min,
                        dg_max: dg.max,
                    })?;
                }
            }

            let grads = net.backward(out.tape)?;
            sgd.lr = lr;
            sgd.step(net.params_mut(), &grads.params)?;

            let epoch_done = bi + 1 == n_batches || step >= limit;
            let eval_acc = if epoch_done {
                let acc = evaluate(net, test)?;
                epoch_accuracy.push(acc);
                log::info!("epoch {} step {step}: loss {:.4} test acc {acc:.4}", epoch + 1, out.loss);
                Some(acc)
            } else {
                None
            };
            rows.push(ConvergenceRow { step, epoch: epoch + 1, lr, train_loss: out.loss, eval_acc });
        }
    }
    Ok(TrainReport { rows, probes: series, epoch_accuracy, steps: step })
}

/// First 1-based epoch at which `a` reaches `b`'s final accuracy.
pub fn matching_epoch(a: &[f64], b: &[f64]) -> Option<usize> {
    let target = *b.last()?;
    a.iter().position(|&acc| acc >= target).map(|i| i + 1)
}
