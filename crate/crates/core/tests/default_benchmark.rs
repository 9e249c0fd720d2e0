//! The default synthetic benchmark has the spectrum the pipeline relies on.
//! Captured energy is cross-checked with orthogonal iteration on the Gram
//! matrix, independent of the Jacobi eigensolver behind the PCA.

use ndarray::{Array2, Axis};

use shm_core::config::PipelineConfig;
use shm_core::field::{cev_of_spectrum, fit_pca, minmax_normalize, smallest_k_for_cev, DataMatrix};
use shm_core::pipeline::{gen_data, load_specimens, training_pool};

/// Regression pin: smallest mode count reaching 95% energy on the default data.
const K_FOR_95: usize = 3;

/// Fraction of ‖X‖²_F captured by the best rank-`k` subspace, by orthogonal
/// iteration with Gram-Schmidt on XᵀX.
fn captured_energy(x: &Array2<f64>, k: usize) -> f64 {
    let gram = x.t().dot(x);
    let p = gram.nrows();
    let mut q = Array2::from_shape_fn((p, k), |(i, j)| ((i * 31 + j * 17) % 13) as f64 - 6.0 + (i == j) as u8 as f64);
    for _ in 0..2000 {
        q = gram.dot(&q);
        for j in 0..k {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let prev = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &prev);
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
    let captured: f64 = q.t().dot(&gram).dot(&q).diag().sum();
    captured / x.iter().map(|v| v * v).sum::<f64>()
}

#[test]
fn default_benchmark_energy_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.output_dir = dir.path().join("run");
    gen_data(&cfg).unwrap();
    let pool = training_pool(&load_specimens(&cfg).unwrap(), None).unwrap();
    let (x, _) = minmax_normalize(&DataMatrix::new(pool.fields).unwrap()).unwrap();
    let x = x.into_inner();
    assert_eq!(x.len_of(Axis(1)), cfg.data.specimen.rows * cfg.data.specimen.cols);

    let basis = fit_pca(&DataMatrix::new(x.clone()).unwrap(), 8).unwrap();
    let sv = basis.singular_values();
    for k in [2, 3, 8] {
        let ours = cev_of_spectrum(sv, k).unwrap();
        let oracle = captured_energy(&x, k);
        assert!((ours - oracle).abs() < 1e-8, "k = {k}: {ours} vs {oracle}");
    }
    assert!(cev_of_spectrum(sv, 8).unwrap() >= 0.9);
    assert_eq!(smallest_k_for_cev(sv, 0.95).unwrap(), K_FOR_95);
}
