//! Corruption and perturbation generators plus corruption-error and
//! flip-rate metrics.
//!
//! Severity tables (index = severity − 1):
//!
//! | kind           | parameter                 | 1    | 2    | 3    | 4    | 5    |
//! |----------------|---------------------------|------|------|------|------|------|
//! | gaussian-noise | noise std σ               | 0.04 | 0.08 | 0.12 | 0.18 | 0.26 |
//! | box-blur       | window radius (pixels)    | 1    | 2    | 3    | 4    | 5    |
//! | brightness     | additive offset           | 0.1  | 0.2  | 0.3  | 0.4  | 0.5  |
//! | contrast       | factor toward image mean  | 0.75 | 0.6  | 0.45 | 0.3  | 0.15 |

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Network, Tensor};
use crate::rng::{derived, normal};

pub const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const BLUR_RADIUS: [usize; 5] = [1, 2, 3, 4, 5];
pub const BRIGHTNESS_OFFSET: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    BoxBlur,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::BoxBlur => "box-blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Domain(format!("severity must be in 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }
}

fn check_pixels(images: &Tensor) -> Result<()> {
    if images.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Applies `spec` to every image; the result is clipped to `[0, 1]`.
pub fn corrupt(images: &Tensor, spec: CorruptionSpec, seed: u64) -> Result<Tensor> {
    let spec = CorruptionSpec::new(spec.kind, spec.severity)?;
    check_pixels(images)?;
    let s = spec.severity as usize - 1;
    let mut out = images.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = derived(seed, spec.severity as u64);
            for v in &mut out.data {
                *v += NOISE_SIGMA[s] * normal(&mut rng);
            }
        }
        CorruptionKind::BoxBlur => {
            let r = BLUR_RADIUS[s] as isize;
            let (h, w) = (images.shape.h as isize, images.shape.w as isize);
            let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
            for b in 0..images.batch {
                for c in 0..images.shape.c {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for dy in -r..=r {
                                for dx in -r..=r {
                                    let yy = (y + dy).clamp(0, h - 1) as usize;
                                    let xx = (x + dx).clamp(0, w - 1) as usize;
                                    acc += images.data[images.idx(b, c, yy, xx)];
                                }
                            }
                            let i = out.idx(b, c, y as usize, x as usize);
                            out.data[i] = acc / norm;
                        }
                    }
                }
            }
        }
        CorruptionKind::Brightness => {
            for v in &mut out.data {
                *v += BRIGHTNESS_OFFSET[s];
            }
        }
        CorruptionKind::Contrast => {
            let per = images.shape.len();
            for b in 0..images.batch {
                let sample = &mut out.data[b * per..(b + 1) * per];
                let mean = sample.iter().sum::<f64>() / per as f64;
                for v in sample.iter_mut() {
                    *v = mean + CONTRAST_FACTOR[s] * (*v - mean);
                }
            }
        }
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// Frame `t` shifts right by `t` pixels, replicating the left edge.
    Translate,
    /// Frame `t` rotates by `2t` degrees about the image center (bilinear,
    /// edge-clamped).
    Rotate,
    /// Cumulative Gaussian noise with per-frame std 0.01.
    NoiseWalk,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] =
        [PerturbationKind::Translate, PerturbationKind::Rotate, PerturbationKind::NoiseWalk];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Translate => "translate",
            PerturbationKind::Rotate => "rotate",
            PerturbationKind::NoiseWalk => "noise-walk",
        }
    }
}

pub const DEFAULT_SEQUENCE_LENGTH: usize = 31;
const ROTATE_DEGREES_PER_FRAME: f64 = 2.0;
const NOISE_WALK_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSequence {
    pub kind: PerturbationKind,
    /// All frames stacked as a batch; frame 0 is the input image.
    pub frames: Tensor,
}

impl PerturbationSequence {
    pub fn len(&self) -> usize {
        self.frames.batch
    }

    pub fn is_empty(&self) -> bool {
        self.frames.batch == 0
    }
}

fn clamped(img: &[f64], h: usize, w: usize, c: usize, y: isize, x: isize) -> f64 {
    let yy = y.clamp(0, h as isize - 1) as usize;
    let xx = x.clamp(0, w as isize - 1) as usize;
    img[(c * h + yy) * w + xx]
}

/// Builds a sequence of `length` frames from a single image (batch of 1).
pub fn perturb_sequence(image: &Tensor, kind: PerturbationKind, length: usize, seed: u64) -> Result<PerturbationSequence> {
    if image.batch != 1 {
        return Err(Error::Shape(format!("expected a single image, got a batch of {}", image.batch)));
    }
    let shape = image.shape;
    let (c, h, w) = (shape.c, shape.h, shape.w);
    let base = &image.data;
    let mut data = Vec::with_capacity(length * shape.len());
    let mut walk = base.clone();
    let mut rng = derived(seed, 0x7A1C);
    for t in 0..length {
        if t == 0 {
            data.extend_from_slice(base);
            continue;
        }
        match kind {
            PerturbationKind::Translate => {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            data.push(clamped(base, h, w, ch, y as isize, x as isize - t as isize));
                        }
                    }
                }
            }
            PerturbationKind::Rotate => {
                let theta = (ROTATE_DEGREES_PER_FRAME * t as f64).to_radians();
                let (sin, cos) = theta.sin_cos();
                let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            // inverse-map the output pixel into the source
                            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                            let sy = cy + cos * dy - sin * dx;
                            let sx = cx + sin * dy + cos * dx;
                            let (y0, x0) = (sy.floor(), sx.floor());
                            let (fy, fx) = (sy - y0, sx - x0);
                            let (y0, x0) = (y0 as isize, x0 as isize);
                            let v = (1.0 - fy) * ((1.0 - fx) * clamped(base, h, w, ch, y0, x0)
                                + fx * clamped(base, h, w, ch, y0, x0 + 1))
                                + fy * ((1.0 - fx) * clamped(base, h, w, ch, y0 + 1, x0)
                                    + fx * clamped(base, h, w, ch, y0 + 1, x0 + 1));
                            data.push(v);
                        }
                    }
                }
            }
            PerturbationKind::NoiseWalk => {
                for v in &mut walk {
                    *v = (*v + NOISE_WALK_STD * normal(&mut rng)).clamp(0.0, 1.0);
                }
                data.extend_from_slice(&walk);
            }
        }
    }
    Ok(PerturbationSequence { kind, frames: Tensor::new(length, shape, data)? })
}

/// Fraction of consecutive frames whose prediction changes.
pub fn flip_probability(predictions: &[usize]) -> Result<f64> {
    if predictions.len() < 2 {
        return Err(Error::Domain(format!(
            "flip probability needs at least 2 frames, got {}",
            predictions.len()
        )));
    }
    let flips = predictions.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(flips as f64 / (predictions.len() - 1) as f64)
}

/// Top-1 error of every (corruption, severity) cell plus the clean error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub clean: f64,
    /// Errors for severities 1..=5, keyed by corruption name.
    pub cells: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionScores {
    pub ce: BTreeMap<String, f64>,
    pub mce: f64,
    pub relative_ce: BTreeMap<String, f64>,
    pub relative_mce: f64,
    pub warnings: Vec<String>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// `CE_c = Σ_s E_{c,s} / Σ_s E^base_{c,s} × 100` and the relative variant
/// that subtracts each model's clean error first. Corruptions with a zero
/// baseline denominator are skipped with a warning.
pub fn corruption_error(model: &ErrorTable, baseline: &ErrorTable) -> Result<CorruptionScores> {
    let model_keys: Vec<_> = model.cells.keys().collect();
    let base_keys: Vec<_> = baseline.cells.keys().collect();
    if model_keys != base_keys {
        return Err(Error::Shape("model and baseline tables cover different corruptions".into()));
    }
    let mut ce = BTreeMap::new();
    let mut relative_ce = BTreeMap::new();
    let mut warnings = Vec::new();
    for (name, errs) in &model.cells {
        let base = &baseline.cells[name];
        if errs.len() != base.len() {
            return Err(Error::Shape(format!("{name}: severity counts differ")));
        }
        let denom: f64 = base.iter().sum();
        if denom == 0.0 {
            warnings.push(format!("{name}: baseline error is zero at every severity, CE skipped"));
        } else {
            ce.insert(name.clone(), errs.iter().sum::<f64>() / denom * 100.0);
        }
        let rel_denom: f64 = base.iter().map(|e| e - baseline.clean).sum();
        if rel_denom == 0.0 {
            warnings.push(format!("{name}: baseline shows no degradation over clean, relative CE skipped"));
        } else {
            let num: f64 = errs.iter().map(|e| e - model.clean).sum();
            relative_ce.insert(name.clone(), num / rel_denom * 100.0);
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CorruptionScores {
        mce: mean_of(ce.values().copied()),
        relative_mce: mean_of(relative_ce.values().copied()),
        ce,
        relative_ce,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRow {
    pub perturbation: String,
    /// Mean flip probability over sequences.
    pub fp_model: f64,
    pub fp_baseline: f64,
    /// `fp_model / fp_baseline × 100`; absent when the baseline never flips.
    pub flip_rate: Option<f64>,
}

/// Per-kind flip rates and their mean (mFR). Kinds whose baseline never
/// flips are excluded from the mean with a warning.
pub fn mean_flip_rate(rows: &mut [FlipRow], warnings: &mut Vec<String>) -> f64 {
    for row in rows.iter_mut() {
        if row.fp_baseline == 0.0 {
            let w = format!("{}: baseline never flips, flip rate skipped", row.perturbation);
            log::warn!("{w}");
            warnings.push(w);
            row.flip_rate = None;
        } else {
            row.flip_rate = Some(row.fp_model / row.fp_baseline * 100.0);
        }
    }
    mean_of(rows.iter().filter_map(|r| r.flip_rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub corruption: String,
    pub severity: u8,
    pub err_model: f64,
    pub err_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_model: f64,
    pub clean_baseline: f64,
    pub cells: Vec<CellRow>,
    pub scores: CorruptionScores,
    pub flips: Vec<FlipRow>,
    pub mfr: f64,
    pub warnings: Vec<String>,
}

pub const ROBUSTNESS_CSV_HEADER: &str = "corruption,severity,err_model,err_baseline";

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ROBUSTNESS_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{}\n", c.corruption, c.severity, c.err_model, c.err_baseline));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessOptions {
    pub seed: u64,
    /// Number of test images turned into perturbation sequences.
    pub sequences: usize,
    pub sequence_length: usize,
}

impl Default for RobustnessOptions {
    fn default() -> Self {
        Self { seed: 0, sequences: 32, sequence_length: DEFAULT_SEQUENCE_LENGTH }
    }
}

fn error_rate(net: &Network, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = net.predict(images)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p != l).count() as f64 / labels.len() as f64)
}

/// Evaluates `model` against `baseline` on corrupted and perturbed copies of
/// `ds`. Corruptions act in pixel space through the dataset normalization.
pub fn evaluate_robustness(
    model: &Network,
    baseline: &Network,
    ds: &Dataset,
    opts: &RobustnessOptions,
) -> Result<RobustnessReport> {
    for (name, net) in [("model", model), ("baseline", baseline)] {
        if net.input_shape() != ds.shape() || net.classes() != ds.classes {
            return Err(Error::Shape(format!(
                "{name} expects {} inputs and {} classes; dataset has {} and {}",
                net.input_shape(),
                net.classes(),
                ds.shape(),
                ds.classes
            )));
        }
    }
    if opts.sequence_length < 2 {
        return Err(Error::Domain("sequence_length must be at least 2".into()));
    }
    let norm = ds.normalization;
    let pixels = norm.to_pixels(&ds.images);
    let clean_model = error_rate(model, &ds.images, &ds.labels)?;
    let clean_baseline = error_rate(baseline, &ds.images, &ds.labels)?;

    let specs: Vec<CorruptionSpec> = CorruptionKind::ALL
        .iter()
        .flat_map(|&kind| (1..=5).map(move |severity| CorruptionSpec { kind, severity }))
        .collect();
    let cells = specs
        .par_iter()
        .map(|&spec| {
            let corrupted = norm.from_pixels(&corrupt(&pixels, spec, opts.seed)?);
            Ok(CellRow {
                corruption: spec.kind.name().to_string(),
                severity: spec.severity,
                err_model: error_rate(model, &corrupted, &ds.labels)?,
                err_baseline: error_rate(baseline, &corrupted, &ds.labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut model_table = ErrorTable { clean: clean_model, cells: BTreeMap::new() };
    let mut base_table = ErrorTable { clean: clean_baseline, cells: BTreeMap::new() };
    for c in &cells {
        model_table.cells.entry(c.corruption.clone()).or_default().push(c.err_model);
        base_table.cells.entry(c.corruption.clone()).or_default().push(c.err_baseline);
    }
    let scores = corruption_error(&model_table, &base_table)?;

    let count = opts.sequences.min(ds.len());
    let mut flips = PerturbationKind::ALL
        .par_iter()
        .map(|&kind| {
            let (mut fm, mut fb) = (0.0, 0.0);
            for i in 0..count {
                let image = Tensor::new(1, pixels.shape, pixels.sample(i).to_vec())?;
                let seq = perturb_sequence(&image, kind, opts.sequence_length, opts.seed.wrapping_add(i as u64))?;
                let frames = norm.from_pixels(&seq.frames);
                fm += flip_probability(&model.predict(&frames)?)?;
                fb += flip_probability(&baseline.predict(&frames)?)?;
            }
            let n = count.max(1) as f64;
            Ok(FlipRow { perturbation: kind.name().to_string(), fp_model: fm / n, fp_baseline: fb / n, flip_rate: None })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = scores.warnings.clone();
    let mfr = mean_flip_rate(&mut flips, &mut warnings);
    Ok(RobustnessReport { clean_model, clean_baseline, cells, scores, flips, mfr, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Shape;

    fn constant(v: f64, h: usize, w: usize) -> Tensor {
        Tensor::new(1, Shape::new(1, h, w), vec![v; h * w]).unwrap()
    }

    #[test]
    fn noise_std_matches_table() {
        // clipping to [0, 1] trims 4.85% off the std at σ = 0.26, so the
        // sample must be large enough to resolve that from the 5% bound
        let img = Tensor::new(1, Shape::new(1, 512, 512), vec![0.5; 512 * 512]).unwrap();
        for s in 1..=5u8 {
            let out = corrupt(&img, CorruptionSpec::new(CorruptionKind::GaussianNoise, s).unwrap(), 4).unwrap();
            let n = out.data.len() as f64;
            let mean = out.data.iter().sum::<f64>() / n;
            let std = (out.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let sigma = NOISE_SIGMA[s as usize - 1];
            assert!((std - sigma).abs() <= 0.05 * sigma, "severity {s}: {std} vs {sigma}");
        }
    }

    #[test]
    fn brightness_and_blur_fixed_points() {
        let out = corrupt(&constant(0.0, 4, 4), CorruptionSpec::new(CorruptionKind::Brightness, 1).unwrap(), 0).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.1));
        let img = constant(0.3, 5, 7);
        for s in 1..=5 {
            let out = corrupt(&img, CorruptionSpec::new(CorruptionKind::BoxBlur, s).unwrap(), 0).unwrap();
            for v in &out.data {
                assert!((v - 0.3).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn severity_increases_distortion() {
        let mut rng = derived(1, 1);
        let img = Tensor::new(1, Shape::new(1, 12, 12), (0..144).map(|_| 0.3 + 0.4 * rand::Rng::gen::<f64>(&mut rng)).collect()).unwrap();
        for kind in CorruptionKind::ALL {
            let dist: Vec<f64> = (1..=5)
                .map(|s| {
                    let out = corrupt(&img, CorruptionSpec { kind, severity: s }, 2).unwrap();
                    out.data.iter().zip(&img.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .collect();
            for w in dist.windows(2) {
                assert!(w[1] > w[0], "{kind:?}: {dist:?}");
            }
        }
    }

    #[test]
    fn corrupt_validates_inputs() {
        let img = constant(0.5, 2, 2);
        assert!(corrupt(&img, CorruptionSpec { kind: CorruptionKind::Contrast, severity: 6 }, 0).is_err());
        assert!(corrupt(&constant(1.5, 2, 2), CorruptionSpec { kind: CorruptionKind::Contrast, severity: 1 }, 0).is_err());
        let a = corrupt(&img, CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3 }, 9).unwrap();
        let b = corrupt(&img, CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3 }, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn translate_replicates_edge() {
        let img = Tensor::new(1, Shape::new(1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let seq = perturb_sequence(&img, PerturbationKind::Translate, 3, 0).unwrap();
        assert_eq!(seq.frames.sample(0), img.data.as_slice());
        assert_eq!(seq.frames.sample(1), &[1.0, 1.0, 2.0, 4.0, 4.0, 5.0, 7.0, 7.0, 8.0]);
        assert_eq!(seq.frames.sample(1)[0], seq.frames.sample(0)[0]);
        assert_eq!(seq.frames.sample(2), &[1.0, 1.0, 1.0, 4.0, 4.0, 4.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn sequences_are_deterministic() {
        let img = Tensor::new(1, Shape::new(2, 4, 4), (0..32).map(|i| i as f64 / 32.0).collect()).unwrap();
        for kind in PerturbationKind::ALL {
            let a = perturb_sequence(&img, kind, DEFAULT_SEQUENCE_LENGTH, 5).unwrap();
            assert_eq!(a, perturb_sequence(&img, kind, DEFAULT_SEQUENCE_LENGTH, 5).unwrap());
            assert_eq!(a.len(), 31);
            assert_eq!(perturb_sequence(&img, kind, 1, 5).unwrap().frames, img);
        }
    }

    #[test]
    fn flip_probability_examples() {
        assert_eq!(flip_probability(&[3, 3, 3, 3]).unwrap(), 0.0);
        assert_eq!(flip_probability(&[0, 1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(flip_probability(&[0, 0, 2, 2, 1]).unwrap(), 0.5);
        assert!(flip_probability(&[1]).is_err());
    }

    fn table(clean: f64, cells: &[(&str, &[f64])]) -> ErrorTable {
        ErrorTable { clean, cells: cells.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect() }
    }

    #[test]
    fn corruption_error_examples() {
        let base = table(0.1, &[("a", &[0.2, 0.4]), ("b", &[0.3, 0.5])]);
        let same = corruption_error(&base, &base).unwrap();
        assert_eq!(same.mce, 100.0);
        assert_eq!(same.relative_mce, 100.0);

        let half = table(0.05, &[("a", &[0.1, 0.2]), ("b", &[0.15, 0.25])]);
        assert_eq!(corruption_error(&half, &base).unwrap().mce, 50.0);

        let one = corruption_error(&table(0.0, &[("n", &[0.2])]), &table(0.0, &[("n", &[0.4])])).unwrap();
        assert_eq!(one.ce["n"], 50.0);
    }

    #[test]
    fn zero_denominators_are_skipped() {
        let base = table(0.1, &[("a", &[0.0, 0.0]), ("b", &[0.1, 0.1])]);
        let model = table(0.1, &[("a", &[0.1, 0.1]), ("b", &[0.2, 0.2])]);
        let s = corruption_error(&model, &base).unwrap();
        assert!(!s.ce.contains_key("a"));
        assert_eq!(s.ce["b"], 200.0);
        assert!(!s.relative_ce.contains_key("b"));
        assert_eq!(s.warnings.len(), 2);
    }

    #[test]
    fn flip_rate_normalization() {
        let mut rows = vec![
            FlipRow { perturbation: "t".into(), fp_model: 0.2, fp_baseline: 0.2, flip_rate: None },
            FlipRow { perturbation: "r".into(), fp_model: 0.1, fp_baseline: 0.0, flip_rate: None },
        ];
        let mut warnings = Vec::new();
        assert_eq!(mean_flip_rate(&mut rows, &mut warnings), 100.0);
        assert_eq!(warnings.len(), 1);
    }
}
