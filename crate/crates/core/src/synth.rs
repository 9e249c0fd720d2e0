//! Synthetic four-point-bending benchmark.
//!
//! A laminate coupon is loaded cyclically between two inner pins. The DIC
//! window covers the middle half of the span on a `rows × cols` grid whose
//! nodes sit at cell centres. Each frame is
//!
//! ```text
//! field = peak · phase · [moment(x) · (1 + K(x, y)) + drift(t, x, y)] + noise
//! ```
//!
//! where `K` is the edge-crack amplification, `drift` a small set of smooth
//! fixture modes driven by slow random processes, and `noise` Gaussian with a
//! standard deviation that grows with `K`. Some frames carry a suppressed
//! patch in the upper-left corner. Gauges read the noiseless field.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShmError};
use crate::field::StrainField;
use crate::io;

/// Strain gauge positions in fractional grid-index coordinates `(row, col)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeLayout {
    pub positions: Vec<(f64, f64)>,
}

pub const GAUGE_COUNT: usize = 12;

impl GaugeLayout {
    /// Tensor-product lattice of `rows × cols` positions.
    pub fn lattice(rows: &[f64], cols: &[f64]) -> Self {
        let positions = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Self { positions }
    }

    pub fn validate(&self, grid_rows: usize, grid_cols: usize) -> Result<()> {
        if self.positions.len() != GAUGE_COUNT {
            return Err(ShmError::Parameter(format!(
                "gauge layout needs {GAUGE_COUNT} positions, got {}",
                self.positions.len()
            )));
        }
        for (i, &(r, c)) in self.positions.iter().enumerate() {
            let inside = r >= 0.0
                && c >= 0.0
                && r <= (grid_rows - 1) as f64
                && c <= (grid_cols - 1) as f64;
            if !inside {
                return Err(ShmError::Parameter(format!(
                    "gauge {i} at ({r}, {c}) lies outside the {grid_rows}x{grid_cols} grid"
                )));
            }
            if self.positions[..i].contains(&(r, c)) {
                return Err(ShmError::Parameter(format!("gauge {i} duplicates an earlier position")));
            }
        }
        Ok(())
    }
}

impl Default for GaugeLayout {
    fn default() -> Self {
        Self::lattice(&[2.0, 6.0, 10.5], &[1.5, 4.5, 6.5, 9.5])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenSpec {
    /// Edge crack length in mm; 0 is a healthy coupon.
    pub crack_length: f64,
    /// Crack mouth position along the span, normalized to `[0, 1]`.
    pub crack_origin: f64,
    pub rows: usize,
    pub cols: usize,
    /// Specimen width in mm (the grid's row direction).
    pub width: f64,
    pub span: f64,
    /// Outer and inner pin positions along the span, normalized.
    pub outer_pins: (f64, f64),
    pub inner_pins: (f64, f64),
    /// Part of the span covered by the grid's columns, normalized.
    pub window: (f64, f64),
    pub max_displacement: f64,
    /// Surface strain (µε) per mm of displacement in the constant-moment zone.
    pub strain_per_mm: f64,
    /// Frames per loading cycle.
    pub cycle_frames: usize,
    pub gauges: GaugeLayout,
}

impl Default for SpecimenSpec {
    fn default() -> Self {
        Self {
            crack_length: 0.0,
            crack_origin: 0.5,
            rows: 14,
            cols: 12,
            width: 25.0,
            span: 120.0,
            outer_pins: (0.0, 1.0),
            inner_pins: (1.0 / 3.0, 2.0 / 3.0),
            window: (0.25, 0.75),
            max_displacement: 20.0,
            strain_per_mm: 150.0,
            cycle_frames: 50,
            gauges: GaugeLayout::default(),
        }
    }
}

impl SpecimenSpec {
    pub fn with_crack(crack_length: f64) -> Self {
        Self {
            crack_length,
            ..Self::default()
        }
    }

    pub fn peak_strain(&self) -> f64 {
        self.max_displacement * self.strain_per_mm
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ShmError::Parameter(msg));
        if self.rows < 2 || self.cols < 2 {
            return bad(format!("grid {}x{} is smaller than 2x2", self.rows, self.cols));
        }
        if !(self.crack_length >= 0.0 && self.crack_length < self.width) {
            return bad(format!(
                "crack length {} mm must lie in [0, width = {})",
                self.crack_length, self.width
            ));
        }
        let (o0, o1) = self.outer_pins;
        let (i0, i1) = self.inner_pins;
        if !(o0 < i0 && i0 < i1 && i1 < o1) {
            return bad("inner pins must lie strictly between the outer pins".into());
        }
        if !(self.window.0 >= o0 && self.window.0 < self.window.1 && self.window.1 <= o1) {
            return bad("grid window must lie within the outer pins".into());
        }
        if self.width <= 0.0 || self.span <= 0.0 || self.cycle_frames == 0 {
            return bad("width, span and cycle length must be positive".into());
        }
        self.gauges.validate(self.rows, self.cols)
    }

    /// Normalized span coordinate of grid column `c` (cell centre).
    pub fn column_x(&self, c: usize) -> f64 {
        let (a, b) = self.window;
        a + (c as f64 + 0.5) / self.cols as f64 * (b - a)
    }

    /// Distance from the top edge in mm of grid row `r` (cell centre).
    pub fn row_y(&self, r: usize) -> f64 {
        (r as f64 + 0.5) / self.rows as f64 * self.width
    }

    /// Loading fraction of frame `t`: one smooth 0 → 1 → 0 cycle per period.
    pub fn phase(&self, t: usize) -> f64 {
        0.5 * (1.0 - (2.0 * PI * t as f64 / self.cycle_frames as f64).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Field noise std as a fraction of peak strain.
    pub field_sigma: f64,
    /// Growth of the field noise with crack amplification.
    pub hetero_gain: f64,
    /// Gauge noise std as a fraction of peak strain.
    pub gauge_sigma: f64,
    pub crack_gain: f64,
    /// Crack-tip distance (mm) below which the singularity is capped.
    pub tip_radius: f64,
    pub outlier_prob: f64,
    pub outlier_scale: f64,
    pub outlier_patch: usize,
    /// Fixture drift amplitude as a fraction of the nominal moment field.
    pub drift_amplitude: f64,
    /// Correlation time (frames) of the drift processes.
    pub drift_correlation: f64,
    /// Width (cells) of the drift bump at the outlier corner.
    pub edge_width: f64,
    /// Height of that bump relative to the other drift shapes.
    pub edge_gain: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            field_sigma: 0.02,
            hetero_gain: 1.0,
            gauge_sigma: 0.0025,
            crack_gain: 1.0,
            tip_radius: 3.0,
            outlier_prob: 0.1,
            outlier_scale: 0.3,
            outlier_patch: 2,
            drift_amplitude: 0.5,
            drift_correlation: 30.0,
            edge_width: 1.5,
            edge_gain: 2.0,
        }
    }
}

impl NoiseConfig {
    /// Deterministic field: no noise, drift or outliers. The crack model is kept.
    pub fn off() -> Self {
        Self {
            field_sigma: 0.0,
            gauge_sigma: 0.0,
            outlier_prob: 0.0,
            drift_amplitude: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let nonneg = [
            self.field_sigma,
            self.hetero_gain,
            self.gauge_sigma,
            self.crack_gain,
            self.drift_amplitude,
            self.outlier_scale,
            self.edge_gain,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ShmError::Parameter("noise settings must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(ShmError::Parameter("outlier probability must lie in [0, 1]".into()));
        }
        if !(self.tip_radius > 0.0 && self.drift_correlation > 0.0 && self.edge_width > 0.0) {
            return Err(ShmError::Parameter(
                "tip radius, drift correlation and edge width must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub phase: f64,
    pub gauges: Vec<f64>,
    pub field: StrainField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub frames: Vec<Frame>,
    pub spec: SpecimenSpec,
    pub noise: NoiseConfig,
    pub seed: u64,
}

/// Normalized bending moment at span coordinate `x` (1 between the inner pins).
pub fn moment_profile(x: f64, spec: &SpecimenSpec) -> f64 {
    let (o0, o1) = spec.outer_pins;
    let (i0, i1) = spec.inner_pins;
    if x <= o0 || x >= o1 {
        0.0
    } else if x < i0 {
        (x - o0) / (i0 - o0)
    } else if x > i1 {
        (o1 - x) / (o1 - i1)
    } else {
        1.0
    }
}

/// Surface strain (µε) of the uncracked beam at span coordinate `x`.
pub fn bending_strain(x: f64, phase: f64, spec: &SpecimenSpec) -> f64 {
    phase * spec.peak_strain() * moment_profile(x, spec)
}

/// `1 + gain·√L / √max(r, r_min) · angular`, with `angular = cos(θ/2)` outside
/// the capped core and 1 inside it.
pub fn crack_factor(r: f64, theta: f64, crack_length: f64, gain: f64, tip_radius: f64) -> f64 {
    if crack_length <= 0.0 {
        return 1.0;
    }
    let angular = if r <= tip_radius { 1.0 } else { (0.5 * theta).cos() };
    1.0 + gain * crack_length.sqrt() / r.max(tip_radius).sqrt() * angular
}

/// Crack amplification at grid node `(row, col)`. The crack grows from the
/// bottom edge towards the top; `θ` is measured from its extension direction.
pub fn crack_amplification(row: usize, col: usize, spec: &SpecimenSpec, noise: &NoiseConfig) -> f64 {
    if spec.crack_length <= 0.0 {
        return 1.0;
    }
    let (dx, dy) = tip_offset(row, col, spec);
    crack_factor(dx.hypot(dy), dx.atan2(dy), spec.crack_length, noise.crack_gain, noise.tip_radius)
}

/// Offset (mm) of a node from the crack tip, `dy` positive ahead of the tip.
fn tip_offset(row: usize, col: usize, spec: &SpecimenSpec) -> (f64, f64) {
    let dx = (spec.column_x(col) - spec.crack_origin) * spec.span;
    let tip_y = spec.width - spec.crack_length;
    (dx, tip_y - spec.row_y(row))
}

/// Grid node closest to the crack tip.
pub fn crack_tip_cell(spec: &SpecimenSpec) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_d = f64::INFINITY;
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let (dx, dy) = tip_offset(r, c, spec);
            let d = dx.hypot(dy);
            if d < best_d {
                best_d = d;
                best = (r, c);
            }
        }
    }
    best
}

/// Bilinear sample at each gauge position.
pub fn sample_gauges(field: &StrainField, layout: &GaugeLayout) -> Result<Vec<f64>> {
    layout
        .positions
        .iter()
        .map(|&(r, c)| bilinear(field, r, c))
        .collect()
}

pub fn bilinear(field: &StrainField, r: f64, c: f64) -> Result<f64> {
    let (rows, cols) = (field.rows(), field.cols());
    if !(r >= 0.0 && c >= 0.0 && r <= (rows - 1) as f64 && c <= (cols - 1) as f64) {
        return Err(ShmError::Parameter(format!(
            "position ({r}, {c}) lies outside the {rows}x{cols} grid"
        )));
    }
    let r0 = (r.floor() as usize).min(rows - 2);
    let c0 = (c.floor() as usize).min(cols - 2);
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    Ok(field.get(r0, c0) * (1.0 - fr) * (1.0 - fc)
        + field.get(r0 + 1, c0) * fr * (1.0 - fc)
        + field.get(r0, c0 + 1) * (1.0 - fr) * fc
        + field.get(r0 + 1, c0 + 1) * fr * fc)
}

/// Fixture modes over the grid: a uniform offset, a width-wise tilt following
/// the moment, low-order polynomials in the window coordinates, plus a bump at
/// the outlier corner that the gauges barely see.
fn drift_shapes(spec: &SpecimenSpec, noise: &NoiseConfig) -> Vec<Vec<f64>> {
    let (rows, cols) = (spec.rows, spec.cols);
    let (w0, w1) = spec.window;
    let mid = 0.5 * (w0 + w1);
    let half = 0.5 * (w1 - w0);
    let spread = 2.0 * noise.edge_width * noise.edge_width;
    let mut shapes = vec![Vec::with_capacity(rows * cols); 8];
    for r in 0..rows {
        let yn = (spec.row_y(r) - 0.5 * spec.width) / (0.5 * spec.width);
        for c in 0..cols {
            let x = spec.column_x(c);
            let xn = (x - mid) / half;
            let vals = [
                1.0,
                yn * moment_profile(x, spec),
                xn,
                yn * yn - 1.0 / 3.0,
                xn * yn,
                xn * xn - 1.0 / 3.0,
                noise.edge_gain * (-((r * r + c * c) as f64) / spread).exp(),
                0.5 * xn * (5.0 * xn * xn - 3.0),
            ];
            for (s, v) in shapes.iter_mut().zip(vals) {
                s.push(v);
            }
        }
    }
    shapes
}

/// Unit-variance AR(1) path with the given correlation time.
fn ar1_path(rng: &mut ChaCha8Rng, n: usize, correlation: f64) -> Vec<f64> {
    let rho = (-1.0 / correlation).exp();
    let innov = (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut x: f64 = rng.sample(StandardNormal);
    out.push(x);
    for _ in 1..n {
        let e: f64 = rng.sample(StandardNormal);
        x = rho * x + innov * e;
        out.push(x);
    }
    out
}

/// Generates `n_frames` consecutive frames of one loading experiment.
///
/// The drift processes use stream 0 of the seeded generator; frame `t` draws
/// its noise from stream `t + 1`, so frames are independent of each other's
/// draw counts.
pub fn generate_dataset(
    spec: &SpecimenSpec,
    n_frames: usize,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n_frames == 0 {
        return Err(ShmError::Parameter("n_frames must be at least 1".into()));
    }
    spec.validate()?;
    noise.validate()?;

    let (rows, cols) = (spec.rows, spec.cols);
    let p = rows * cols;
    let peak = spec.peak_strain();
    let mut nominal = Vec::with_capacity(p);
    let mut amplification = Vec::with_capacity(p);
    for r in 0..rows {
        for c in 0..cols {
            let amp = crack_amplification(r, c, spec, noise);
            nominal.push(moment_profile(spec.column_x(c), spec) * amp);
            amplification.push(amp);
        }
    }

    let shapes = drift_shapes(spec, noise);
    let drivers: Vec<Vec<f64>> = if noise.drift_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut d = vec![(0..n_frames)
            .map(|t| (2.0 * PI * t as f64 / spec.cycle_frames as f64).sin())
            .collect::<Vec<_>>()];
        for _ in 1..shapes.len() {
            d.push(ar1_path(&mut rng, n_frames, noise.drift_correlation));
        }
        d
    } else {
        Vec::new()
    };

    let patch = noise.outlier_patch.min(rows).min(cols);
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let phase = spec.phase(t);
        let mut clean: Vec<f64> = nominal.iter().map(|v| phase * peak * v).collect();
        for (shape, driver) in shapes.iter().zip(&drivers) {
            let w = noise.drift_amplitude * phase * peak * driver[t];
            for (x, s) in clean.iter_mut().zip(shape) {
                *x += w * s;
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64 + 1);
        let mut noisy = clean.clone();
        for (x, amp) in noisy.iter_mut().zip(&amplification) {
            let e: f64 = rng.sample(StandardNormal);
            let std = noise.field_sigma * peak * (1.0 + noise.hetero_gain * (amp - 1.0));
            *x += std * e;
        }
        let u: f64 = rng.random();
        if u < noise.outlier_prob {
            for r in 0..patch {
                for c in 0..patch {
                    noisy[r * cols + c] *= noise.outlier_scale;
                }
            }
        }

        let clean_field = StrainField::new(rows, cols, clean)?;
        let mut gauges = sample_gauges(&clean_field, &spec.gauges)?;
        for g in gauges.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *g += noise.gauge_sigma * peak * e;
        }
        frames.push(Frame {
            phase,
            gauges,
            field: StrainField::new(rows, cols, noisy)?,
        });
    }

    Ok(SyntheticDataset {
        frames,
        spec: spec.clone(),
        noise: noise.clone(),
        seed,
    })
}

pub fn frames_header(n_cells: usize) -> Vec<String> {
    let mut h = vec!["phase".to_string()];
    h.extend((0..GAUGE_COUNT).map(|i| format!("g{i}")));
    h.extend((0..n_cells).map(|i| format!("f{i}")));
    h
}

pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    let n_cells = frames.first().map_or(0, |f| f.field.values().len());
    let rows = frames.iter().map(|f| {
        let mut row = Vec::with_capacity(1 + GAUGE_COUNT + n_cells);
        row.push(f.phase);
        row.extend_from_slice(&f.gauges);
        row.extend_from_slice(f.field.values());
        row
    });
    io::write_csv(path, &frames_header(n_cells), rows)
}

pub fn read_frames(path: &Path, rows: usize, cols: usize) -> Result<Vec<Frame>> {
    let (header, data) = io::read_csv(path)?;
    if header != frames_header(rows * cols) {
        return Err(ShmError::Data(format!(
            "{}: unexpected column layout",
            path.display()
        )));
    }
    data.into_iter()
        .map(|row| {
            Ok(Frame {
                phase: row[0],
                gauges: row[1..1 + GAUGE_COUNT].to_vec(),
                field: StrainField::new(rows, cols, row[1 + GAUGE_COUNT..].to_vec())
                    .map_err(|e| ShmError::Data(e.to_string()))?,
            })
        })
        .collect()
}
