//! Strain grids, min-max normalization and the PCA basis that maps full
//! fields onto a handful of modal coefficients.
//!
//! The basis follows the usual uncentered convention: the normalized data
//! matrix `X` (samples × cells) is decomposed as `X = U Σ Vᵀ`, coefficients are
//! `z = x · V_r` and a field is recovered as `x̂ = z · V_rᵀ`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShmError};
use crate::linalg::{canonicalize_signs, symmetric_eigen};

/// One frame of surface strain on a `rows × cols` grid, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrainField {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl StrainField {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(ShmError::Parameter(format!(
                "strain field must be at least 2x2, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(ShmError::Parameter(format!(
                "expected {} values for a {rows}x{cols} field, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ShmError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self::new(rows, cols, values)
    }

    pub fn constant(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn median(&self) -> f64 {
        median(&self.values)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Samples × features matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    data: Array2<f64>,
}

impl DataMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some((idx, _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(ShmError::NonFinite {
                row: idx.0,
                col: idx.1,
            });
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        let mut data = Array2::zeros((n, p));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(ShmError::Parameter(format!(
                    "row {i} has {} entries, expected {p}",
                    row.len()
                )));
            }
            data.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
        }
        Self::new(data)
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ndarray::ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn write_csv(&self, path: &Path, header: &[String]) -> Result<()> {
        crate::io::write_csv(path, header, self.data.rows().into_iter().map(|r| r.to_vec()))
    }

    pub fn read_csv(path: &Path) -> Result<(Vec<String>, Self)> {
        let (header, rows) = crate::io::read_csv(path)?;
        Ok((header, Self::from_rows(&rows)?))
    }
}

/// Per-cell min-max bounds. Constant columns carry `max = min + 1` so that the
/// inverse map is defined everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalization {
    pub fn identity(p: usize) -> Self {
        Self {
            min: vec![0.0; p],
            max: vec![1.0; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    #[inline]
    pub fn range(&self, j: usize) -> f64 {
        self.max[j] - self.min[j]
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(j, &x)| (x - self.min[j]) / self.range(j))
            .collect()
    }

    pub fn invert(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .enumerate()
            .map(|(j, &x)| x * self.range(j) + self.min[j])
            .collect()
    }

    pub fn apply_matrix(&self, raw: &DataMatrix) -> Result<DataMatrix> {
        if raw.n_features() != self.dim() {
            return Err(ShmError::Parameter(format!(
                "normalization has {} columns, matrix has {}",
                self.dim(),
                raw.n_features()
            )));
        }
        let mut out = raw.data.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, span) = (self.min[j], self.range(j));
            col.mapv_inplace(|x| (x - lo) / span);
        }
        DataMatrix::new(out)
    }

    pub fn invert_matrix(&self, normalized: &DataMatrix) -> Result<DataMatrix> {
        let mut out = normalized.data.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, span) = (self.min[j], self.range(j));
            col.mapv_inplace(|x| x * span + lo);
        }
        DataMatrix::new(out)
    }
}

/// Maps every column onto `[0, 1]` and returns the bounds used.
pub fn minmax_normalize(raw: &DataMatrix) -> Result<(DataMatrix, Normalization)> {
    if raw.n_samples() < 2 {
        return Err(ShmError::Parameter(format!(
            "normalization needs at least 2 samples, got {}",
            raw.n_samples()
        )));
    }
    let p = raw.n_features();
    let mut min = vec![f64::INFINITY; p];
    let mut max = vec![f64::NEG_INFINITY; p];
    for row in raw.data.rows() {
        for (j, &x) in row.iter().enumerate() {
            min[j] = min[j].min(x);
            max[j] = max[j].max(x);
        }
    }
    for j in 0..p {
        if max[j] - min[j] <= 0.0 {
            max[j] = min[j] + 1.0;
        }
    }
    let norm = Normalization { min, max };
    let x = norm.apply_matrix(raw)?;
    Ok((x, norm))
}

/// PCA coefficients of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalCoefficients(pub Vec<f64>);

impl ModalCoefficients {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    k: usize,
    rows: usize,
    cols: usize,
    /// p × k, orthonormal columns.
    v_r: Array2<f64>,
    singular_values: Vec<f64>,
    eigenvalues: Vec<f64>,
    norm: Normalization,
}

/// On-disk layout of a basis.
#[derive(Debug, Serialize, Deserialize)]
struct BasisFile {
    k: usize,
    p: usize,
    rows: usize,
    cols: usize,
    v_r: Vec<f64>,
    singular_values: Vec<f64>,
    norm_min: Vec<f64>,
    norm_max: Vec<f64>,
}

/// Truncated SVD of an (already normalized) data matrix.
///
/// The decomposition goes through the smaller of the two Gram matrices, `XᵀX`
/// when there are more samples than features and `XXᵀ` otherwise.
pub fn fit_pca(x: &DataMatrix, k: usize) -> Result<PcaBasis> {
    let (n, p) = (x.n_samples(), x.n_features());
    if n == 0 || p == 0 {
        return Err(ShmError::Parameter("cannot fit PCA on an empty matrix".into()));
    }
    let max_k = n.min(p);
    if k == 0 || k > max_k {
        return Err(ShmError::Parameter(format!(
            "k = {k} out of range 1..={max_k}"
        )));
    }
    let xm = &x.data;
    let r = n.min(p);

    let (singular_values, mut v_full) = if n > p {
        let gram = xm.t().dot(xm);
        let (lam, vecs) = symmetric_eigen(&gram);
        let sv: Vec<f64> = lam.iter().map(|&l| l.max(0.0).sqrt()).collect();
        (sv, vecs)
    } else {
        let gram = xm.dot(&xm.t());
        let (lam, u) = symmetric_eigen(&gram);
        let sv: Vec<f64> = lam.iter().map(|&l| l.max(0.0).sqrt()).collect();
        // v_i = Xᵀ u_i / σ_i for the nonzero part of the spectrum
        let mut v = Array2::zeros((p, r));
        let scale = sv[0].max(f64::MIN_POSITIVE);
        for i in 0..r {
            if sv[i] > scale * 1e-12 {
                let col = xm.t().dot(&u.column(i)) / sv[i];
                v.column_mut(i).assign(&col);
            }
        }
        complete_orthonormal(&mut v, &sv, scale * 1e-12);
        (sv, v)
    };

    let singular_values: Vec<f64> = singular_values.into_iter().take(r).collect();
    let mut v_r = v_full.slice_mut(ndarray::s![.., ..k]).to_owned();
    canonicalize_signs(&mut v_r);
    let eigenvalues = singular_values.iter().map(|s| s * s).collect();
    Ok(PcaBasis {
        k,
        rows: p,
        cols: 1,
        v_r,
        singular_values,
        eigenvalues,
        norm: Normalization::identity(p),
    })
}

/// Replaces columns belonging to vanishing singular values with unit vectors
/// orthogonal to everything before them (Gram-Schmidt on the canonical basis).
fn complete_orthonormal(v: &mut Array2<f64>, sv: &[f64], tol: f64) {
    let (p, r) = v.dim();
    let mut next_unit = 0;
    for i in 0..r {
        if sv[i] > tol {
            continue;
        }
        while next_unit < p {
            let mut cand = Array1::<f64>::zeros(p);
            cand[next_unit] = 1.0;
            next_unit += 1;
            for j in 0..i {
                let vj = v.column(j);
                let d = cand.dot(&vj);
                cand.scaled_add(-d, &vj);
            }
            let nrm = cand.dot(&cand).sqrt();
            if nrm > 1e-8 {
                v.column_mut(i).assign(&(cand / nrm));
                break;
            }
        }
    }
}

impl PcaBasis {
    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        if norm.dim() != self.p() {
            return Err(ShmError::Parameter(format!(
                "normalization has {} cells, basis has {}",
                norm.dim(),
                self.p()
            )));
        }
        self.norm = norm;
        Ok(self)
    }

    pub fn with_grid(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.p() {
            return Err(ShmError::Parameter(format!(
                "grid {rows}x{cols} does not match basis dimension {}",
                self.p()
            )));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.v_r.nrows()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn v_r(&self) -> &Array2<f64> {
        &self.v_r
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// `λ_i = σ_i²` over the full spectrum.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    /// Retained-mode weights `λ_j / Σ_all λ`, j < k.
    pub fn mode_weights(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues[..self.k].iter().map(|l| l / total).collect()
    }

    /// Drops trailing modes, keeping the spectrum and normalization.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(ShmError::Parameter(format!(
                "cannot truncate a {}-mode basis to {k}",
                self.k
            )));
        }
        let mut out = self.clone();
        out.k = k;
        out.v_r = self.v_r.slice(ndarray::s![.., ..k]).to_owned();
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BasisFile {
            k: self.k,
            p: self.p(),
            rows: self.rows,
            cols: self.cols,
            v_r: self.v_r.iter().copied().collect(),
            singular_values: self.singular_values.clone(),
            norm_min: self.norm.min.clone(),
            norm_max: self.norm.max.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: BasisFile = serde_json::from_str(text)?;
        if f.v_r.len() != f.p * f.k || f.rows * f.cols != f.p {
            return Err(ShmError::Data("basis file has inconsistent dimensions".into()));
        }
        if f.norm_min.len() != f.p || f.norm_max.len() != f.p {
            return Err(ShmError::Data("basis normalization length mismatch".into()));
        }
        let v_r = Array2::from_shape_vec((f.p, f.k), f.v_r)
            .map_err(|e| ShmError::Data(e.to_string()))?;
        let eigenvalues = f.singular_values.iter().map(|s| s * s).collect();
        Ok(Self {
            k: f.k,
            rows: f.rows,
            cols: f.cols,
            v_r,
            singular_values: f.singular_values,
            eigenvalues,
            norm: Normalization {
                min: f.norm_min,
                max: f.norm_max,
            },
        })
    }
}

/// Cumulative explained variance of the leading `k` modes.
pub fn cev(basis: &PcaBasis, k: usize) -> Result<f64> {
    cev_of_spectrum(basis.singular_values(), k)
}

pub fn cev_of_spectrum(singular_values: &[f64], k: usize) -> Result<f64> {
    if singular_values.is_empty() {
        return Err(ShmError::State("empty singular-value spectrum".into()));
    }
    if k == 0 || k > singular_values.len() {
        return Err(ShmError::Parameter(format!(
            "k = {k} out of range 1..={}",
            singular_values.len()
        )));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(ShmError::State("spectrum carries no variance".into()));
    }
    let head: f64 = singular_values[..k].iter().map(|s| s * s).sum();
    Ok((head / total).min(1.0))
}

pub fn cev_curve(basis: &PcaBasis) -> Result<Vec<f64>> {
    (1..=basis.singular_values().len())
        .map(|k| cev(basis, k))
        .collect()
}

/// Smallest number of modes whose CEV reaches `threshold`.
pub fn smallest_k_for_cev(singular_values: &[f64], threshold: f64) -> Result<usize> {
    for k in 1..=singular_values.len() {
        if cev_of_spectrum(singular_values, k)? >= threshold - 1e-12 {
            return Ok(k);
        }
    }
    Ok(singular_values.len())
}

pub fn project(row: &[f64], basis: &PcaBasis) -> Result<ModalCoefficients> {
    if row.len() != basis.p() {
        return Err(ShmError::Parameter(format!(
            "field has {} cells, basis expects {}",
            row.len(),
            basis.p()
        )));
    }
    let z = ArrayView1::from(row).dot(&basis.v_r);
    Ok(ModalCoefficients(z.to_vec()))
}

/// Projects every row of a normalized matrix; returns N × k.
pub fn project_matrix(x: &DataMatrix, basis: &PcaBasis) -> Result<Array2<f64>> {
    if x.n_features() != basis.p() {
        return Err(ShmError::Parameter(format!(
            "matrix has {} columns, basis expects {}",
            x.n_features(),
            basis.p()
        )));
    }
    Ok(x.data.dot(&basis.v_r))
}

/// Normalized-space field for the given coefficients.
pub fn reconstruct(z: &ModalCoefficients, basis: &PcaBasis) -> Result<Vec<f64>> {
    reconstruct_slice(&z.0, basis)
}

pub fn reconstruct_slice(z: &[f64], basis: &PcaBasis) -> Result<Vec<f64>> {
    if z.len() != basis.k() {
        return Err(ShmError::Parameter(format!(
            "got {} coefficients, basis has {} modes",
            z.len(),
            basis.k()
        )));
    }
    Ok(basis.v_r.dot(&ArrayView1::from(z)).to_vec())
}

/// Field in the original (physical) units.
pub fn reconstruct_physical(z: &ModalCoefficients, basis: &PcaBasis) -> Result<Vec<f64>> {
    Ok(basis.norm.invert(&reconstruct(z, basis)?))
}

/// Column-wise mean of a matrix, used for a few summaries.
pub fn column_means(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn normalizes_linear_column() {
        let raw = DataMatrix::new(array![[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]]).unwrap();
        let (x, norm) = minmax_normalize(&raw).unwrap();
        assert_eq!(x.view().column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!((norm.min[0], norm.max[0]), (2.0, 6.0));
        // constant column
        assert_eq!(x.view().column(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(norm.range(1), 1.0);
    }

    #[test]
    fn normalization_round_trip() {
        let raw = DataMatrix::new(random_matrix(20, 10, 11) * 250.0).unwrap();
        let (x, norm) = minmax_normalize(&raw).unwrap();
        let back = norm.invert_matrix(&x).unwrap();
        for (a, b) in back.view().iter().zip(raw.view().iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_non_finite_with_index() {
        let err = DataMatrix::new(array![[1.0, 2.0], [f64::NAN, 3.0]]).unwrap_err();
        assert!(matches!(err, ShmError::NonFinite { row: 1, col: 0 }));
    }

    #[test]
    fn single_sample_is_rejected() {
        let raw = DataMatrix::new(array![[1.0, 2.0]]).unwrap();
        assert!(minmax_normalize(&raw).is_err());
    }

    #[test]
    fn rank_one_has_unit_cev() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Array2::from_shape_fn((30, 6), |(i, j)| u[i] * v[j]);
        let basis = fit_pca(&DataMatrix::new(x).unwrap(), 2).unwrap();
        assert!((cev(&basis, 1).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn complete_basis_reconstructs_exactly() {
        let x = DataMatrix::new(random_matrix(40, 6, 5)).unwrap();
        let basis = fit_pca(&x, 6).unwrap();
        for i in 0..x.n_samples() {
            let row = x.row(i).to_vec();
            let z = project(&row, &basis).unwrap();
            let back = reconstruct(&z, &basis).unwrap();
            let err: f64 = row.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum();
            let nrm: f64 = row.iter().map(|a| a * a).sum();
            assert!(err.sqrt() <= 1e-10 * nrm.sqrt());
        }
    }

    #[test]
    fn wide_matrix_uses_outer_gram() {
        let x = DataMatrix::new(random_matrix(4, 9, 8)).unwrap();
        let basis = fit_pca(&x, 4).unwrap();
        assert_eq!(basis.singular_values().len(), 4);
        let vtv = basis.v_r().t().dot(basis.v_r());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[[i, j]] - want).abs() < 1e-10);
            }
        }
        let energy: f64 = basis.eigenvalues().iter().sum();
        assert!((energy - x.frobenius_sq()).abs() < 1e-8 * x.frobenius_sq());
    }

    #[test]
    fn k_out_of_range() {
        let x = DataMatrix::new(random_matrix(5, 3, 1)).unwrap();
        assert!(matches!(fit_pca(&x, 0), Err(ShmError::Parameter(_))));
        assert!(matches!(fit_pca(&x, 4), Err(ShmError::Parameter(_))));
    }

    #[test]
    fn uniform_spectrum_cev() {
        assert!((cev_of_spectrum(&[2.0; 4], 2).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(cev_of_spectrum(&[], 1), Err(ShmError::State(_))));
        assert_eq!(smallest_k_for_cev(&[2.0; 4], 1.0).unwrap(), 4);
    }

    #[test]
    fn project_first_column_and_zero() {
        let x = DataMatrix::new(random_matrix(30, 5, 2)).unwrap();
        let basis = fit_pca(&x, 3).unwrap();
        let first = basis.v_r().column(0).to_vec();
        let z = project(&first, &basis).unwrap();
        assert!((z.0[0] - 1.0).abs() < 1e-12);
        assert!(z.0[1].abs() < 1e-12 && z.0[2].abs() < 1e-12);
        let zero = project(&[0.0; 5], &basis).unwrap();
        assert!(zero.0.iter().all(|&v| v == 0.0));
        assert!(reconstruct(&ModalCoefficients(vec![0.0; 3]), &basis)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(project(&[0.0; 4], &basis).is_err());
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let x = DataMatrix::new(random_matrix(25, 7, 9)).unwrap();
        let basis = fit_pca(&x, 5).unwrap();
        for col in basis.v_r().columns() {
            let m = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(m > 0.0);
        }
    }

    #[test]
    fn basis_json_round_trip() {
        let raw = DataMatrix::new(random_matrix(30, 6, 4) * 3.0).unwrap();
        let (x, norm) = minmax_normalize(&raw).unwrap();
        let basis = fit_pca(&x, 3)
            .unwrap()
            .with_normalization(norm)
            .unwrap()
            .with_grid(2, 3)
            .unwrap();
        let back = PcaBasis::from_json(&basis.to_json().unwrap()).unwrap();
        assert_eq!(back, basis);
    }
}
