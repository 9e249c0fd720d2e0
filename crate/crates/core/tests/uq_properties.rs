//! Invariants of the uncertainty maps, upsampling and metrics.

use ndarray::Array2;
use proptest::prelude::*;

use shm_core::bnn::NetArchitecture;
use shm_core::field::{fit_pca, DataMatrix, PcaBasis, StrainField};
use shm_core::hmc::{PosteriorEnsemble, SamplerDiagnostics, StepSizeSummary};
use shm_core::uq::{
    aleatoric_field, bicubic_upsample, bicubic_upsample_with, epistemic_field, mode_metrics, predict_ensemble,
    EdgeMode, FieldSpace, ReconstructionMode,
};

fn basis(seed: u64) -> PcaBasis {
    let x = Array2::from_shape_fn((30, 12), |(i, j)| ((i * 7 + j * 3) as f64 + seed as f64).sin());
    fit_pca(&DataMatrix::new(x).unwrap(), 4).unwrap().with_grid(3, 4).unwrap()
}

fn diagnostics() -> SamplerDiagnostics {
    SamplerDiagnostics {
        acceptance_rate: 1.0,
        burn_in_acceptance_rate: None,
        mean_accept_prob: 1.0,
        step_size: StepSizeSummary {
            initial: 0.1,
            min: 0.1,
            max: 0.1,
            last_adapted: 0.1,
            frozen: 0.1,
        },
        divergences: 0,
        burn_in: 0,
        n_samples: 1,
        thinning: 1,
        leapfrog_steps: 1,
        seed: 0,
        energy_trace: vec![],
        energy_ess: 1.0,
        model_fingerprint: String::new(),
    }
}

#[test]
fn single_draw_ensemble_gives_zero_epistemic_field() {
    let arch = NetArchitecture {
        input_dim: 12,
        hidden: vec![6],
        output_dim: 4,
    };
    let theta = arch.init_params(1).theta;
    let ens = PosteriorEnsemble::repeated(&theta, 1, diagnostics()).unwrap();
    let pred = predict_ensemble(&arch, &ens, &[0.3; 12]).unwrap();
    let b = basis(0);
    for mode in [ReconstructionMode::AbsoluteSum, ReconstructionMode::VariancePropagated] {
        let f = epistemic_field(&pred.z_std, &b, mode, FieldSpace::Normalized).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fields_are_nonnegative(s in prop::collection::vec(0.0f64..2.0, 4), seed in 0u64..50) {
        let b = basis(seed);
        for mode in [ReconstructionMode::AbsoluteSum, ReconstructionMode::VariancePropagated] {
            for space in [FieldSpace::Normalized, FieldSpace::Physical] {
                let f = aleatoric_field(&s, &b, mode, space).unwrap();
                prop_assert!(f.values.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn variance_propagated_is_linear(s in prop::collection::vec(0.01f64..2.0, 4), c in 0.1f64..10.0) {
        let b = basis(3);
        let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
        let f1 = aleatoric_field(&s, &b, ReconstructionMode::VariancePropagated, FieldSpace::Normalized).unwrap();
        let f2 = aleatoric_field(&scaled, &b, ReconstructionMode::VariancePropagated, FieldSpace::Normalized).unwrap();
        for (a, b) in f1.values.iter().zip(&f2.values) {
            prop_assert!((b - c * a).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn shrinking_spread_shrinks_the_field(s in prop::collection::vec(0.01f64..2.0, 4), t in 0.0f64..1.0) {
        let b = basis(7);
        let shrunk: Vec<f64> = s.iter().map(|v| v * t).collect();
        let big = epistemic_field(&s, &b, ReconstructionMode::AbsoluteSum, FieldSpace::Normalized).unwrap();
        let small = epistemic_field(&shrunk, &b, ReconstructionMode::AbsoluteSum, FieldSpace::Normalized).unwrap();
        for (x, y) in big.values.iter().zip(&small.values) {
            prop_assert!(*y <= x + 1e-12);
        }
    }

    #[test]
    fn upsampling_keeps_nodes(rows in 2usize..7, cols in 2usize..7, factor in 1usize..6, seed in any::<u32>()) {
        let f = StrainField::from_fn(rows, cols, |r, c| ((r * 31 + c * 17) as f64 + seed as f64).sin()).unwrap();
        for edge in [EdgeMode::Extrapolate, EdgeMode::Replicate] {
            let up = bicubic_upsample_with(&f, factor, edge).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    prop_assert!((up.get(r * factor, c * factor) - f.get(r, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsampling_reproduces_planes(
        rows in 2usize..8, cols in 2usize..8, factor in 1usize..6,
        a in -5.0f64..5.0, bx in -5.0f64..5.0, by in -5.0f64..5.0,
    ) {
        let f = StrainField::from_fn(rows, cols, |r, c| a + bx * c as f64 + by * r as f64).unwrap();
        let up = bicubic_upsample(&f, factor).unwrap();
        for r in 0..up.rows() {
            for c in 0..up.cols() {
                let want = a + bx * c as f64 / factor as f64 + by * r as f64 / factor as f64;
                prop_assert!((up.get(r, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn metric_invariants(
        truth in prop::collection::vec(-3.0f64..3.0, 3..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
        shift in -10.0f64..10.0,
    ) {
        let pred: Vec<f64> = truth.iter().zip(&noise).map(|(t, e)| t + e).collect();
        let std = vec![0.5; truth.len()];
        let m = mode_metrics(&truth, &pred, &std).unwrap();
        prop_assert!(m.rmse >= m.mae - 1e-12);
        let ts: Vec<f64> = truth.iter().map(|t| t + shift).collect();
        let ps: Vec<f64> = pred.iter().map(|p| p + shift).collect();
        let ms = mode_metrics(&ts, &ps, &std).unwrap();
        match (m.r2, ms.r2) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs())),
            (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
        }
    }
}
