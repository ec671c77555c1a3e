//! Loss Lipschitzness and gradient predictiveness along the current
//! gradient direction.
//!
//! For a probe point `X` with gradient `g = ∇L(X)` the probes evaluate, for
//! each step `η` of a grid,
//!
//! ```text
//! Δ_l(η) = L(X + η g)
//! Δ_g(η) = ‖g − ∇L(X + η g)‖₂
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ActivationTape, HeadKind, Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepGrid {
    pub a: f64,
    pub b: f64,
    pub count: usize,
}

impl Default for StepGrid {
    fn default() -> Self {
        Self { a: 0.05, b: 2.0, count: 50 }
    }
}

impl StepGrid {
    pub fn new(a: f64, b: f64, count: usize) -> Result<Self> {
        let grid = Self { a, b, count };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.a < self.b && self.b.is_finite()) {
            return Err(Error::Domain(format!("step grid needs 0 <= a < b, got [{}, {}]", self.a, self.b)));
        }
        if self.count < 2 {
            return Err(Error::Domain(format!("step grid needs at least 2 points, got {}", self.count)));
        }
        Ok(())
    }

    /// Uniform points with both endpoints included exactly.
    pub fn points(&self) -> Vec<f64> {
        let last = self.count - 1;
        (0..self.count)
            .map(|i| {
                if i == last {
                    self.b
                } else {
                    self.a + (self.b - self.a) * i as f64 / last as f64
                }
            })
            .collect()
    }
}

/// Which way along the gradient the probes step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeDirection {
    /// `X + η∇L(X)`, as the probe is usually stated.
    #[default]
    Ascent,
    /// `X − η∇L(X)`.
    Descent,
}

impl ProbeDirection {
    fn sign(self) -> f64 {
        match self {
            ProbeDirection::Ascent => 1.0,
            ProbeDirection::Descent => -1.0,
        }
    }
}

/// A differentiable loss over a flat probe point.
pub trait ProbeTarget: Sync {
    fn point(&self) -> &[f64];
    fn loss_at(&self, x: &[f64]) -> Result<f64>;
    fn grad_at(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// `L(x) = ½‖x‖²`, whose probes have closed forms.
#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    pub x: Vec<f64>,
}

impl ProbeTarget for QuadraticOracle {
    fn point(&self) -> &[f64] {
        &self.x
    }

    fn loss_at(&self, x: &[f64]) -> Result<f64> {
        Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }

    fn grad_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
}

/// `L(x) = ⟨c, x⟩`, a suffix with constant gradient.
#[derive(Debug, Clone)]
pub struct LinearOracle {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
}

impl ProbeTarget for LinearOracle {
    fn point(&self) -> &[f64] {
        &self.x
    }

    fn loss_at(&self, x: &[f64]) -> Result<f64> {
        Ok(self.c.iter().zip(x).map(|(a, b)| a * b).sum())
    }

    fn grad_at(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.c.clone())
    }
}

/// The network after `layer`, evaluated on the batch bound to `tape`.
pub struct NetSuffix<'a> {
    net: &'a Network,
    tape: &'a ActivationTape,
    layer: usize,
    activation: &'a Tensor,
}

impl<'a> NetSuffix<'a> {
    pub fn new(net: &'a Network, tape: &'a ActivationTape, layer: usize) -> Result<Self> {
        let activation = net.activation(tape, layer)?;
        Ok(Self { net, tape, layer, activation })
    }

    fn tensor(&self, x: &[f64]) -> Result<Tensor> {
        Tensor::new(self.activation.batch, self.activation.shape, x.to_vec())
    }
}

impl ProbeTarget for NetSuffix<'_> {
    fn point(&self) -> &[f64] {
        &self.activation.data
    }

    fn loss_at(&self, x: &[f64]) -> Result<f64> {
        self.net.forward_from(self.tape, self.layer, &self.tensor(x)?)
    }

    fn grad_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let suffix = self.net.forward_from_tape(self.tape, self.layer, &self.tensor(x)?)?;
        Ok(self.net.grad_wrt_activation(&suffix, self.layer)?.data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub min: f64,
    pub max: f64,
    pub samples: Vec<f64>,
}

impl ProbeResult {
    fn from_samples(samples: Vec<f64>) -> Self {
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max, samples }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

fn displaced(x: &[f64], g: &[f64], step: f64) -> Vec<f64> {
    x.iter().zip(g).map(|(a, b)| a + step * b).collect()
}

fn grid_map<F>(grid: &StepGrid, f: F) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Result<f64> + Sync + Send,
{
    grid.validate()?;
    // ordered collect keeps the sample vector independent of thread count
    grid.points().into_par_iter().map(f).collect()
}

pub fn lipschitz_samples(target: &impl ProbeTarget, grid: &StepGrid, dir: ProbeDirection) -> Result<ProbeResult> {
    let x = target.point();
    let g = target.grad_at(x)?;
    let s = dir.sign();
    grid_map(grid, |eta| target.loss_at(&displaced(x, &g, s * eta))).map(ProbeResult::from_samples)
}

pub fn predictiveness_samples(
    target: &impl ProbeTarget,
    grid: &StepGrid,
    dir: ProbeDirection,
) -> Result<ProbeResult> {
    let x = target.point();
    let g = target.grad_at(x)?;
    let s = dir.sign();
    grid_map(grid, |eta| {
        let moved = target.grad_at(&displaced(x, &g, s * eta))?;
        Ok(g.iter().zip(&moved).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    })
    .map(ProbeResult::from_samples)
}

pub fn loss_lipschitz_probe(
    net: &Network,
    tape: &ActivationTape,
    layer: usize,
    grid: &StepGrid,
    dir: ProbeDirection,
) -> Result<ProbeResult> {
    lipschitz_samples(&NetSuffix::new(net, tape, layer)?, grid, dir)
}

pub fn gradient_predictiveness_probe(
    net: &Network,
    tape: &ActivationTape,
    layer: usize,
    grid: &StepGrid,
    dir: ProbeDirection,
) -> Result<ProbeResult> {
    predictiveness_samples(&NetSuffix::new(net, tape, layer)?, grid, dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: u64,
    pub loss: f64,
    pub dl_min: f64,
    pub dl_max: f64,
    pub dg_min: f64,
    pub dg_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSeries {
    pub head: HeadKind,
    pub seed: u64,
    pub grid: StepGrid,
    pub layer: usize,
    pub direction: ProbeDirection,
    pub records: Vec<ProbeRecord>,
}

pub const PROBE_CSV_HEADER: &str = "step,loss,dl_min,dl_max,dg_min,dg_max";

impl ProbeSeries {
    pub fn push(&mut self, record: ProbeRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::Domain(format!(
                    "probe steps must increase: {} after {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(PROBE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.loss, r.dl_min, r.dl_max, r.dg_min, r.dg_max
            ));
        }
        out
    }

    pub fn median_dl_range(&self) -> Option<f64> {
        median(self.records.iter().map(|r| r.dl_max - r.dl_min).collect())
    }

    pub fn median_dg_range(&self) -> Option<f64> {
        median(self.records.iter().map(|r| r.dg_max - r.dg_min).collect())
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points() {
        assert_eq!(StepGrid::new(0.0, 1.0, 3).unwrap().points(), vec![0.0, 0.5, 1.0]);
        let p = StepGrid::default().points();
        assert_eq!(p.len(), 50);
        assert_eq!((p[0], p[49]), (0.05, 2.0));
        assert!(StepGrid::new(1.0, 1.0, 3).is_err());
        assert!(StepGrid::new(-0.1, 1.0, 3).is_err());
        assert!(StepGrid::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn quadratic_closed_forms() {
        let q = QuadraticOracle { x: vec![1.0, 0.0] };
        let grid = StepGrid::new(0.0, 1.0, 3).unwrap();
        let dl = lipschitz_samples(&q, &grid, ProbeDirection::Ascent).unwrap();
        assert_eq!(dl.samples, vec![0.5, 1.125, 2.0]);
        assert_eq!((dl.min, dl.max), (0.5, 2.0));

        let q = QuadraticOracle { x: vec![3.0, 4.0] };
        let grid = StepGrid::new(0.0, 2.0, 2).unwrap();
        let dg = predictiveness_samples(&q, &grid, ProbeDirection::Ascent).unwrap();
        assert_eq!(dg.samples, vec![0.0, 10.0]);
    }

    #[test]
    fn descent_direction_shrinks_quadratic() {
        let q = QuadraticOracle { x: vec![1.0, 0.0] };
        let grid = StepGrid::new(0.0, 1.0, 3).unwrap();
        let dl = lipschitz_samples(&q, &grid, ProbeDirection::Descent).unwrap();
        assert_eq!(dl.samples, vec![0.5, 0.125, 0.0]);
    }

    #[test]
    fn constant_gradient_is_perfectly_predictive() {
        let lin = LinearOracle { x: vec![1.0, -2.0, 0.5], c: vec![0.3, 0.1, -4.0] };
        let dg = predictiveness_samples(&lin, &StepGrid::default(), ProbeDirection::Ascent).unwrap();
        assert!(dg.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn series_csv_and_medians() {
        let mut s = ProbeSeries {
            head: HeadKind::Gcp,
            seed: 1,
            grid: StepGrid::default(),
            layer: 0,
            direction: ProbeDirection::Ascent,
            records: vec![],
        };
        let rec = |step, r: f64| ProbeRecord { step, loss: 1.0, dl_min: 0.0, dl_max: r, dg_min: 0.0, dg_max: 2.0 * r };
        s.push(rec(20, 0.5)).unwrap();
        s.push(rec(40, 0.25)).unwrap();
        assert!(s.push(rec(40, 1.0)).is_err());
        assert_eq!(s.median_dl_range(), Some(0.375));
        assert_eq!(s.median_dg_range(), Some(0.75));
        assert_eq!(s.to_csv(), "step,loss,dl_min,dl_max,dg_min,dg_max\n20,1,0,0.5,0,1\n40,1,0,0.25,0,0.5\n");
        assert_eq!(median(vec![]), None);
    }
}
