//! SGD with momentum and weight decay, and the learning-rate schedules used
//! by the experiments.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Momentum SGD state.
///
/// The update is `v ← μ·v + g + λ·w; w ← w − lr·v`, with weight decay folded
/// into the velocity before the learning rate is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Default for SgdState {
    fn default() -> Self {
        Self::new(0.1, 0.9, 1e-4)
    }
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Domain(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if params.len() != grads.len() {
            return shape_err(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return shape_err(format!(
                    "parameter {i} has {} values but its gradient has {}",
                    p.len(),
                    g.len()
                ));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len())
        {
            return shape_err("velocity buffers do not match the parameters");
        }

        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gw), vw) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vw = self.momentum * *vw + gw + self.weight_decay * *w;
                *w -= self.lr * *vw;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`SgdState::step`].
pub fn sgd_step(state: &mut SgdState, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
    state.step(params, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearStage {
    /// Learning rate at the start of the stage.
    pub l_s: f64,
    /// Learning rate `span` epochs after the start.
    pub l_e: f64,
    /// First epoch of the stage.
    pub n: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    /// `l0 · (1 − (e − e_s)/(e_f − e_s))^ρ`, zero from `e_f` on.
    Polynomial { l0: f64, e_s: u32, e_f: u32, rho: f64 },
    /// `l0 · base^e`.
    Exponential { l0: f64, base: f64 },
    /// `factor^(⌊e / period⌋ + 1)`.
    #[serde(rename = "stepdecay")]
    StepDecay { factor: f64, period: u32 },
    /// Piecewise `l_s − (l_s − l_e)/span · (e − n)` with stages starting at `n`.
    StagewiseLinear { stages: Vec<LinearStage>, span: f64 },
    /// `l0 · (1 − step / t_step)`, driven by the global step counter.
    StepwiseLinear { l0: f64, t_step: u64, steps_per_epoch: u64 },
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        match self {
            ScheduleSpec::Polynomial { l0, e_s, e_f, rho } => {
                if e_f <= e_s {
                    return bad(format!("polynomial schedule needs e_f > e_s, got {e_s}..{e_f}"));
                }
                if !(*l0 >= 0.0) || !(*rho > 0.0) {
                    return bad("polynomial schedule needs l0 >= 0 and rho > 0".into());
                }
            }
            ScheduleSpec::Exponential { l0, base } => {
                if !(*l0 >= 0.0) || !(*base > 0.0 && *base <= 1.0) {
                    return bad("exponential schedule needs l0 >= 0 and 0 < base <= 1".into());
                }
            }
            ScheduleSpec::StepDecay { factor, period } => {
                if *period == 0 || !(*factor > 0.0 && *factor <= 1.0) {
                    return bad("stepdecay needs period >= 1 and 0 < factor <= 1".into());
                }
            }
            ScheduleSpec::StagewiseLinear { stages, span } => {
                if stages.is_empty() || !(*span > 0.0) {
                    return bad("stagewise-linear needs at least one stage and span > 0".into());
                }
                for w in stages.windows(2) {
                    if (w[1].n as f64) < w[0].n as f64 + span {
                        return bad(format!(
                            "stages starting at {} and {} overlap (span {span})",
                            w[0].n, w[1].n
                        ));
                    }
                }
            }
            ScheduleSpec::StepwiseLinear { l0, t_step, steps_per_epoch } => {
                if *t_step == 0 || *steps_per_epoch == 0 || !(*l0 >= 0.0) {
                    return bad("stepwise-linear needs t_step, steps_per_epoch >= 1 and l0 >= 0".into());
                }
            }
        }
        Ok(())
    }

    /// First epoch in the schedule's domain.
    pub fn first_epoch(&self) -> u32 {
        match self {
            ScheduleSpec::Polynomial { e_s, .. } => *e_s,
            ScheduleSpec::StagewiseLinear { stages, .. } => stages.first().map_or(0, |s| s.n),
            _ => 0,
        }
    }

    /// Named settings for the backbones the schedules were tuned on.
    pub fn preset(name: &str) -> Option<ScheduleSpec> {
        let spec = match name {
            "resnet-norm" => ScheduleSpec::StepDecay { factor: 0.1, period: 30 },
            "resnet-adju" => ScheduleSpec::Polynomial { l0: 0.1, e_s: 1, e_f: 50, rho: 2.0 },
            "resnet-fast" => ScheduleSpec::Polynomial { l0: 0.1, e_s: 1, e_f: 53, rho: 11.0 },
            "mobilenet-norm" => ScheduleSpec::Exponential { l0: 0.045, base: 0.98 },
            "mobilenet-fast" => ScheduleSpec::Exponential { l0: 0.06, base: 0.92 },
            "mobilenet-adju" => ScheduleSpec::StagewiseLinear {
                stages: vec![
                    LinearStage { l_s: 6e-2, l_e: 1e-3, n: 0 },
                    LinearStage { l_s: 1e-2, l_e: 1e-4, n: 50 },
                    LinearStage { l_s: 1e-3, l_e: 1e-5, n: 100 },
                ],
                span: 50.0,
            },
            "shufflenet" => ScheduleSpec::StepwiseLinear {
                l0: 0.5,
                t_step: 300_000,
                steps_per_epoch: 1250,
            },
            _ => return None,
        };
        Some(spec)
    }

    pub const PRESETS: [&'static str; 7] = [
        "resnet-norm",
        "resnet-adju",
        "resnet-fast",
        "mobilenet-norm",
        "mobilenet-fast",
        "mobilenet-adju",
        "shufflenet",
    ];
}

/// Learning rate at `epoch` (and global `step`, for step-driven schedules).
pub fn lr_at(spec: &ScheduleSpec, epoch: u32, step: u64) -> Result<f64> {
    let e = epoch as f64;
    let lr = match spec {
        ScheduleSpec::Polynomial { l0, e_s, e_f, rho } => {
            if epoch < *e_s {
                return Err(Error::Domain(format!(
                    "epoch {epoch} precedes the schedule start {e_s}"
                )));
            }
            if epoch >= *e_f {
                0.0
            } else {
                let frac = (e - *e_s as f64) / (*e_f as f64 - *e_s as f64);
                l0 * (1.0 - frac).powf(*rho)
            }
        }
        ScheduleSpec::Exponential { l0, base } => l0 * base.powf(e),
        ScheduleSpec::StepDecay { factor, period } => {
            let k = (epoch / period) as i32 + 1;
            // dividing by an exact power of 1/factor keeps decimal factors exact
            1.0 / (1.0 / factor).powi(k)
        }
        ScheduleSpec::StagewiseLinear { stages, span } => {
            let stage = stages
                .iter()
                .rev()
                .find(|s| s.n <= epoch)
                .ok_or_else(|| Error::Domain(format!("epoch {epoch} precedes the first stage")))?;
            let t = (e - stage.n as f64).min(*span);
            stage.l_s - (stage.l_s - stage.l_e) / span * t
        }
        ScheduleSpec::StepwiseLinear { l0, t_step, .. } => {
            if step >= *t_step {
                0.0
            } else {
                l0 * (1.0 - step as f64 / *t_step as f64)
            }
        }
    };
    Ok(lr)
}

/// CSV rows `epoch,lr` for `horizon` consecutive epochs starting at the
/// schedule's first epoch.
pub fn emit_schedule(spec: &ScheduleSpec, horizon: u32) -> Result<String> {
    if horizon == 0 {
        return Err(Error::Domain("horizon must be >= 1".into()));
    }
    spec.validate()?;
    let mut out = String::from("epoch,lr\n");
    let start = spec.first_epoch();
    for epoch in start..start + horizon {
        let step = match spec {
            ScheduleSpec::StepwiseLinear { steps_per_epoch, .. } => epoch as u64 * steps_per_epoch,
            _ => 0,
        };
        writeln!(out, "{epoch},{}", lr_at(spec, epoch, step)?).expect("writing to a String");
    }
    Ok(out)
}
