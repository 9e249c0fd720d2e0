//! Posterior predictions and the uncertainty maps built from them.
//!
//! Aleatoric maps lift the per-mode noise scales back to the grid, epistemic
//! maps do the same with the ensemble spread of the predicted coefficients.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{forward, InputScaling, NetArchitecture};
use crate::error::{Result, ShmError};
use crate::field::{median, PcaBasis, StrainField};
use crate::hmc::PosteriorEnsemble;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub z_mean: Vec<f64>,
    /// Population standard deviation across draws.
    pub z_std: Vec<f64>,
}

/// Mean and spread of the network output over every ensemble draw.
pub fn predict_ensemble(arch: &NetArchitecture, ensemble: &PosteriorEnsemble, input: &[f64]) -> Result<Prediction> {
    if ensemble.is_empty() {
        return Err(ShmError::State("ensemble holds no draws".into()));
    }
    if ensemble.dim() != arch.n_params() {
        return Err(ShmError::Data(format!(
            "ensemble draws have {} parameters, network expects {}",
            ensemble.dim(),
            arch.n_params()
        )));
    }
    let k = arch.output_dim;
    // Draws are evaluated in parallel; the reduction below runs in draw order
    // so results do not depend on the thread count.
    let outputs = (0..ensemble.len())
        .into_par_iter()
        .map(|i| {
            let theta: Vec<f64> = ensemble.draw(i).iter().map(|&d| d as f64).collect();
            forward(arch, &theta, input)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; k];
    let mut m2 = vec![0.0; k];
    for (i, out) in outputs.iter().enumerate() {
        let n = (i + 1) as f64;
        for j in 0..k {
            let delta = out[j] - mean[j];
            mean[j] += delta / n;
            m2[j] += delta * (out[j] - mean[j]);
        }
    }
    let m = ensemble.len() as f64;
    Ok(Prediction {
        z_mean: mean,
        z_std: m2.iter().map(|s| (s / m).max(0.0).sqrt()).collect(),
    })
}

/// Gauge readings in, coefficient distribution out.
pub struct Predictor<'a> {
    pub arch: &'a NetArchitecture,
    pub scaling: &'a InputScaling,
    pub ensemble: &'a PosteriorEnsemble,
}

impl Predictor<'_> {
    pub fn predict(&self, gauges: &[f64]) -> Result<Prediction> {
        if gauges.len() != self.arch.input_dim {
            return Err(ShmError::Parameter(format!(
                "expected {} gauge readings, got {}",
                self.arch.input_dim,
                gauges.len()
            )));
        }
        predict_ensemble(self.arch, self.ensemble, &self.scaling.apply(gauges))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionMode {
    /// `|Σ_j s_j v[cell, j]|`.
    #[default]
    AbsoluteSum,
    /// `√(Σ_j s_j² v[cell, j]²)`.
    VariancePropagated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FieldSpace {
    #[default]
    Normalized,
    /// Scaled cellwise by the normalization range.
    Physical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyKind {
    Aleatoric,
    Epistemic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyField {
    pub kind: UncertaintyKind,
    pub space: FieldSpace,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl UncertaintyField {
    pub fn median(&self) -> f64 {
        median(&self.values)
    }

    pub fn as_strain_field(&self) -> Result<StrainField> {
        StrainField::new(self.rows, self.cols, self.values.clone())
    }

    /// Cells sorted by decreasing value.
    pub fn hotspots(&self, count: usize) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]));
        idx.into_iter().take(count).map(|i| (i / self.cols, i % self.cols)).collect()
    }
}

fn modal_field(
    kind: UncertaintyKind,
    scales: &[f64],
    basis: &PcaBasis,
    mode: ReconstructionMode,
    space: FieldSpace,
) -> Result<UncertaintyField> {
    if scales.len() != basis.k() {
        return Err(ShmError::Parameter(format!(
            "got {} mode scales, basis has {} modes",
            scales.len(),
            basis.k()
        )));
    }
    if scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(ShmError::Parameter("mode scales must be finite and nonnegative".into()));
    }
    let v = basis.v_r();
    let norm = basis.normalization();
    let values = (0..basis.p())
        .map(|cell| {
            let row = v.row(cell);
            let value = match mode {
                ReconstructionMode::AbsoluteSum => scales.iter().zip(row).map(|(s, w)| s * w).sum::<f64>().abs(),
                ReconstructionMode::VariancePropagated => scales
                    .iter()
                    .zip(row)
                    .map(|(s, w)| (s * w).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            };
            match space {
                FieldSpace::Normalized => value,
                FieldSpace::Physical => value * norm.range(cell),
            }
        })
        .collect();
    Ok(UncertaintyField {
        kind,
        space,
        rows: basis.rows(),
        cols: basis.cols(),
        values,
    })
}

pub fn aleatoric_field(
    sigma_hat: &[f64],
    basis: &PcaBasis,
    mode: ReconstructionMode,
    space: FieldSpace,
) -> Result<UncertaintyField> {
    modal_field(UncertaintyKind::Aleatoric, sigma_hat, basis, mode, space)
}

pub fn epistemic_field(
    z_std: &[f64],
    basis: &PcaBasis,
    mode: ReconstructionMode,
    space: FieldSpace,
) -> Result<UncertaintyField> {
    modal_field(UncertaintyKind::Epistemic, z_std, basis, mode, space)
}

/// Keys cubic-convolution kernel with `a = −0.5`.
pub fn keys_kernel(s: f64) -> f64 {
    const A: f64 = -0.5;
    let x = s.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeMode {
    /// Ghost nodes continue the data polynomially (quadratic through the
    /// three outermost nodes), so linear fields are reproduced everywhere.
    #[default]
    Extrapolate,
    /// Ghost nodes copy the nearest edge node.
    Replicate,
}

/// Node values along one axis, padded with two ghost nodes on each side.
fn padded_line(line: &[f64], edge: EdgeMode) -> Vec<f64> {
    let n = line.len();
    let (l1, l2, r1, r2) = match edge {
        EdgeMode::Replicate => (line[0], line[0], line[n - 1], line[n - 1]),
        EdgeMode::Extrapolate if n >= 3 => {
            let quad = |a: f64, b: f64, c: f64| 3.0 * a - 3.0 * b + c;
            let l1 = quad(line[0], line[1], line[2]);
            let r1 = quad(line[n - 1], line[n - 2], line[n - 3]);
            (l1, quad(l1, line[0], line[1]), r1, quad(r1, line[n - 1], line[n - 2]))
        }
        EdgeMode::Extrapolate => {
            let step = line[1] - line[0];
            (line[0] - step, line[0] - 2.0 * step, line[1] + step, line[1] + 2.0 * step)
        }
    };
    let mut out = Vec::with_capacity(n + 4);
    out.extend([l2, l1]);
    out.extend_from_slice(line);
    out.extend([r1, r2]);
    out
}

/// Interpolates a padded line at source coordinate `x ∈ [0, n)`.
fn interp_line(padded: &[f64], x: f64) -> f64 {
    let base = x.floor();
    let frac = x - base;
    let i = base as usize + 2;
    let mut acc = 0.0;
    for (o, off) in [-1.0, 0.0, 1.0, 2.0].iter().enumerate() {
        acc += padded[i - 1 + o] * keys_kernel(frac - off);
    }
    acc
}

/// Upsamples by an integer factor; output pixel `i` samples source position `i / factor`.
pub fn bicubic_upsample(field: &StrainField, factor: usize) -> Result<StrainField> {
    bicubic_upsample_with(field, factor, EdgeMode::default())
}

/// A grid as exported to JSON, after upsampling by `factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldExport {
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    pub factor: usize,
    pub values: Vec<f64>,
}

impl FieldExport {
    pub fn upsampled(kind: &str, field: &StrainField, factor: usize, edge: EdgeMode) -> Result<Self> {
        let up = bicubic_upsample_with(field, factor, edge)?;
        Ok(Self {
            kind: kind.to_string(),
            rows: up.rows(),
            cols: up.cols(),
            factor,
            values: up.into_values(),
        })
    }
}

impl UncertaintyKind {
    pub fn label(self) -> &'static str {
        match self {
            UncertaintyKind::Aleatoric => "aleatoric",
            UncertaintyKind::Epistemic => "epistemic",
        }
    }
}

pub fn bicubic_upsample_with(field: &StrainField, factor: usize, edge: EdgeMode) -> Result<StrainField> {
    if factor == 0 {
        return Err(ShmError::Parameter("upsampling factor must be at least 1".into()));
    }
    let (rows, cols) = (field.rows(), field.cols());
    let (out_rows, out_cols) = (rows * factor, cols * factor);
    let f = factor as f64;

    // along columns first, then rows
    let mut stage = vec![0.0; rows * out_cols];
    for r in 0..rows {
        let padded = padded_line(&field.values()[r * cols..(r + 1) * cols], edge);
        for j in 0..out_cols {
            stage[r * out_cols + j] = if j % factor == 0 {
                field.get(r, j / factor)
            } else {
                interp_line(&padded, j as f64 / f)
            };
        }
    }
    let mut out = vec![0.0; out_rows * out_cols];
    let mut column = vec![0.0; rows];
    for j in 0..out_cols {
        for r in 0..rows {
            column[r] = stage[r * out_cols + j];
        }
        let padded = padded_line(&column, edge);
        for i in 0..out_rows {
            out[i * out_cols + j] = if i % factor == 0 {
                column[i / factor]
            } else {
                interp_line(&padded, i as f64 / f)
            };
        }
    }
    StrainField::new(out_rows, out_cols, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the true sequence is constant.
    pub r2: Option<f64>,
    /// Fraction of frames whose truth lies inside `mean ± 1.96·std`.
    pub coverage_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMetrics {
    pub n_frames: usize,
    pub modes: Vec<ModeMetrics>,
    /// Mean absolute error of the reconstructed mean field per cell (normalized units).
    pub field_mae: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl FieldMetrics {
    pub fn r2(&self) -> Vec<Option<f64>> {
        self.modes.iter().map(|m| m.r2).collect()
    }
}

/// Per-mode error statistics of a predicted coefficient sequence.
pub fn mode_metrics(truth: &[f64], mean: &[f64], std: &[f64]) -> Result<ModeMetrics> {
    let n = truth.len();
    if n == 0 || mean.len() != n || std.len() != n {
        return Err(ShmError::Parameter("metric sequences must be nonempty and of equal length".into()));
    }
    let nf = n as f64;
    let mae = truth.iter().zip(mean).map(|(t, p)| (t - p).abs()).sum::<f64>() / nf;
    let ss_res = truth.iter().zip(mean).map(|(t, p)| (t - p).powi(2)).sum::<f64>();
    let t_mean = truth.iter().sum::<f64>() / nf;
    let ss_tot = truth.iter().map(|t| (t - t_mean).powi(2)).sum::<f64>();
    let covered = truth
        .iter()
        .zip(mean)
        .zip(std)
        .filter(|((t, m), s)| (*t - *m).abs() <= 1.96 * **s)
        .count();
    Ok(ModeMetrics {
        mae,
        rmse: (ss_res / nf).sqrt(),
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
        coverage_95: covered as f64 / nf,
    })
}

/// Scores predictions against normalized true fields (one row per frame).
pub fn evaluate(predictions: &[Prediction], truth_fields: ArrayView2<'_, f64>, basis: &PcaBasis) -> Result<FieldMetrics> {
    let n = predictions.len();
    if n == 0 {
        return Err(ShmError::Parameter("test set is empty".into()));
    }
    if truth_fields.nrows() != n || truth_fields.ncols() != basis.p() {
        return Err(ShmError::Parameter("truth fields do not match predictions or basis".into()));
    }
    let k = basis.k();
    let truth_z: Array2<f64> = truth_fields.dot(basis.v_r());
    let mut modes = Vec::with_capacity(k);
    for j in 0..k {
        let truth: Vec<f64> = truth_z.column(j).to_vec();
        let mean: Vec<f64> = predictions.iter().map(|p| p.z_mean[j]).collect();
        let std: Vec<f64> = predictions.iter().map(|p| p.z_std[j]).collect();
        modes.push(mode_metrics(&truth, &mean, &std)?);
    }
    let mut field_mae = vec![0.0; basis.p()];
    for (pred, truth) in predictions.iter().zip(truth_fields.rows()) {
        let recon = basis.v_r().dot(&ArrayView1::from(pred.z_mean.as_slice()));
        for ((acc, r), t) in field_mae.iter_mut().zip(recon.iter()).zip(truth.iter()) {
            *acc += (r - t).abs() / n as f64;
        }
    }
    Ok(FieldMetrics {
        n_frames: n,
        modes,
        field_mae,
        rows: basis.rows(),
        cols: basis.cols(),
    })
}

/// Histogram over `[lo, hi)` with `bins` equal bins; values at `hi` fall in the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    if bins == 0 || !(hi > lo) {
        return counts;
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v >= lo && v <= hi {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    counts
}
