//! PCA checked against closed-form spectra and the Eckart–Young bound.

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shm_core::field::{
    cev_of_spectrum, fit_pca, minmax_normalize, project_matrix, reconstruct_slice, smallest_k_for_cev, DataMatrix,
};
use shm_core::linalg::symmetric_eigen;

/// Eigenvalues of a symmetric 3×3 matrix from its characteristic polynomial
/// (trigonometric solution), sorted descending.
fn eig3_closed_form(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

fn random_matrix(n: usize, p: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn jacobi_matches_characteristic_polynomial() {
    let a = [[4.0, 1.0, -2.0], [1.0, 2.0, 0.5], [-2.0, 0.5, 3.0]];
    let (vals, vecs) = symmetric_eigen(&Array2::from_shape_fn((3, 3), |(i, j)| a[i][j]));
    let oracle = eig3_closed_form(&a);
    for (v, o) in vals.iter().zip(oracle) {
        assert!((v - o).abs() < 1e-12, "{v} vs {o}");
    }
    // Residual ‖A v − λ v‖ for every pair.
    for (c, lambda) in vals.iter().enumerate() {
        for i in 0..3 {
            let av: f64 = (0..3).map(|j| a[i][j] * vecs[[j, c]]).sum();
            assert!((av - lambda * vecs[[i, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn singular_values_of_4x3_match_gram_polynomial() {
    let x = Array2::from_shape_vec(
        (4, 3),
        vec![1.0, 2.0, 0.0, 0.5, -1.0, 3.0, 2.0, 0.0, 1.0, -1.0, 1.0, 1.0],
    )
    .unwrap();
    let g = x.t().dot(&x);
    let oracle = eig3_closed_form(&[
        [g[[0, 0]], g[[0, 1]], g[[0, 2]]],
        [g[[1, 0]], g[[1, 1]], g[[1, 2]]],
        [g[[2, 0]], g[[2, 1]], g[[2, 2]]],
    ]);
    let basis = fit_pca(&DataMatrix::new(x.clone()).unwrap(), 3).unwrap();
    for (s, o) in basis.singular_values().iter().zip(oracle) {
        assert!((s - o.sqrt()).abs() < 1e-10, "{s} vs {}", o.sqrt());
    }
    // The wide orientation goes through the other Gram matrix and must agree.
    let wide = fit_pca(&DataMatrix::new(x.t().to_owned()).unwrap(), 3).unwrap();
    for (a, b) in basis.singular_values().iter().zip(wide.singular_values()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn eckart_young_truncation_error() {
    let x = random_matrix(60, 20, 5);
    let dm = DataMatrix::new(x.clone()).unwrap();
    let full = fit_pca(&dm, 20).unwrap();
    let total: f64 = x.iter().map(|v| v * v).sum();
    let energy: f64 = full.singular_values().iter().map(|s| s * s).sum();
    assert!((total - energy).abs() / total < 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in [1, 3, 8, 15] {
        let b = full.truncated(k).unwrap();
        let z = project_matrix(&dm, &b).unwrap();
        let err: f64 = (&x - &z.dot(&b.v_r().t())).iter().map(|v| v * v).sum();
        let tail: f64 = full.singular_values()[k..].iter().map(|s| s * s).sum();
        assert!((err - tail).abs() <= 1e-8 * total, "k = {k}: {err} vs {tail}");
        // Any other rank-k projection does no better.
        let q = orthonormal_columns(&Array2::from_shape_fn((20, k), |_| rng.random_range(-1.0..1.0)));
        let other: f64 = (&x - &x.dot(&q).dot(&q.t())).iter().map(|v| v * v).sum();
        assert!(other >= err - 1e-9);
    }
}

fn orthonormal_columns(a: &Array2<f64>) -> Array2<f64> {
    let mut q = a.clone();
    for c in 0..q.ncols() {
        for prev in 0..c {
            let d = q.column(c).dot(&q.column(prev));
            let pc = q.column(prev).to_owned();
            q.column_mut(c).scaled_add(-d, &pc);
        }
        let n = q.column(c).dot(&q.column(c)).sqrt();
        q.column_mut(c).mapv_inplace(|v| v / n);
    }
    q
}

#[test]
fn cev_threshold_selection_on_known_spectrum() {
    // Energies 50, 30, 15, 4, 1 out of 100.
    let s: Vec<f64> = [50.0f64, 30.0, 15.0, 4.0, 1.0].iter().map(|e| e.sqrt()).collect();
    assert!((cev_of_spectrum(&s, 3).unwrap() - 0.95).abs() < 1e-12);
    assert_eq!(smallest_k_for_cev(&s, 0.95).unwrap(), 3);
    assert_eq!(smallest_k_for_cev(&s, 0.96).unwrap(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn basis_is_orthonormal_and_round_trips(n in 3usize..30, p in 2usize..12, seed in any::<u64>()) {
        let x = random_matrix(n, p, seed);
        let (xn, _) = minmax_normalize(&DataMatrix::new(x).unwrap()).unwrap();
        let k = n.min(p);
        let basis = fit_pca(&xn, k).unwrap();
        let gram = basis.v_r().t().dot(basis.v_r());
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[[i, j]] - want).abs() < 1e-10);
            }
        }
        prop_assert!(basis.singular_values().windows(2).all(|w| w[0] >= w[1]));
        if k == p {
            let z = project_matrix(&xn, &basis).unwrap();
            for (i, row) in z.rows().into_iter().enumerate() {
                let back = reconstruct_slice(row.as_slice().unwrap(), &basis).unwrap();
                for (a, b) in back.iter().zip(xn.row(i)) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), k in 1usize..6) {
        let x = random_matrix(25, 10, seed);
        let dm = DataMatrix::new(x).unwrap();
        let basis = fit_pca(&dm, k).unwrap();
        let z = project_matrix(&dm, &basis).unwrap();
        let recon = DataMatrix::new(z.dot(&basis.v_r().t())).unwrap();
        let z2 = project_matrix(&recon, &basis).unwrap();
        for (a, b) in z.iter().zip(z2.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
