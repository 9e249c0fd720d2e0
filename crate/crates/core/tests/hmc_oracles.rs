//! Sampler checks on targets with known answers.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shm_core::bnn::{LikelihoodScales, NetArchitecture, PosteriorPotential, PriorSpec};
use shm_core::hmc::{
    effective_sample_size, leapfrog, read_ensemble, sample_posterior, split_rhat, write_ensemble, ChainState,
    FnPotential, HmcConfig, Potential,
};

fn gaussian(dim: usize) -> FnPotential<impl Fn(&[f64]) -> (f64, Vec<f64>)> {
    FnPotential::new(dim, |x: &[f64]| (0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec()))
}

fn config(burn_in: usize, n_samples: usize, steps: usize, eps: f64, seed: u64) -> HmcConfig {
    HmcConfig {
        step_size_init: eps,
        target_accept: 0.6,
        burn_in,
        n_samples,
        leapfrog_steps: steps,
        leapfrog_jitter: 0.2,
        thinning: 1,
        divergence_threshold: 1000.0,
        seed,
    }
}

/// Mean and standard deviation of a chain with ESS-based 3σ bounds on both.
fn check_moments(x: &[f64], mean: f64, std: f64, label: &str) {
    let n = x.len() as f64;
    let ess = effective_sample_size(x).min(n);
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let mean_tol = 3.0 * std / ess.sqrt();
    // Standard error of a Gaussian sample variance.
    let var_tol = 3.0 * std * std * (2.0 / (ess - 1.0)).sqrt();
    assert!((m - mean).abs() < mean_tol, "{label}: mean {m} vs {mean} (tol {mean_tol}, ess {ess})");
    assert!((var - std * std).abs() < var_tol, "{label}: var {var} vs {} (tol {var_tol})", std * std);
}

#[test]
fn leapfrog_is_reversible() {
    let pot = FnPotential::new(3, |x: &[f64]| {
        let u = 0.25 * x[0].powi(4) + 0.5 * x[1] * x[1] + (x[2] * x[0]).sin();
        (u, vec![x[0].powi(3) + x[2] * (x[2] * x[0]).cos(), x[1], x[0] * (x[2] * x[0]).cos()])
    });
    let q0 = vec![0.3, -1.2, 0.8];
    let p0 = vec![0.5, 0.1, -0.7];
    let (_, g0) = pot.energy_grad(&q0).unwrap();
    let fwd = leapfrog(&pot, &q0, &p0, &g0, 0.05, 40).unwrap();
    let flipped: Vec<f64> = fwd.momentum.iter().map(|p| -p).collect();
    let back = leapfrog(&pot, &fwd.theta, &flipped, &fwd.grad, 0.05, 40).unwrap();
    for (a, b) in back.theta.iter().zip(&q0) {
        assert!((a - b).abs() < 1e-8);
    }
    for (a, b) in back.momentum.iter().zip(&p0) {
        assert!((a + b).abs() < 1e-8);
    }
}

#[test]
fn energy_error_scales_with_step_squared() {
    let pot = FnPotential::new(2, |x: &[f64]| {
        (0.5 * (x[0] * x[0] + 4.0 * x[1] * x[1]), vec![x[0], 4.0 * x[1]])
    });
    let q = vec![1.0, 0.5];
    let p = vec![0.3, -0.8];
    let (u0, g0) = pot.energy_grad(&q).unwrap();
    let h0 = u0 + 0.5 * (p[0] * p[0] + p[1] * p[1]);
    // Fixed trajectory length so only the step size changes.
    let dh = |eps: f64| {
        let steps = (1.0 / eps).round() as usize;
        let t = leapfrog(&pot, &q, &p, &g0, eps, steps).unwrap();
        (t.energy + 0.5 * t.momentum.iter().map(|v| v * v).sum::<f64>() - h0).abs()
    };
    let ratio = dh(0.02) / dh(0.01);
    assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn standard_gaussian_moments_and_acceptance() {
    let pot = gaussian(2);
    let ens = sample_posterior(&pot, &[0.5, -0.5], &config(2000, 5000, 10, 0.1, 3)).unwrap();
    for j in 0..2 {
        check_moments(&ens.coordinate(j), 0.0, 1.0, &format!("coord {j}"));
    }
    let acc = ens.diagnostics.acceptance_rate;
    assert!((0.45..=0.75).contains(&acc), "acceptance {acc}");
}

#[test]
fn independent_chains_agree() {
    let pot = gaussian(3);
    let chains: Vec<Vec<f64>> = (0..4)
        .map(|c| {
            sample_posterior(&pot, &[1.0, 0.0, -1.0], &config(200, 600, 10, 0.1, 40 + c))
                .unwrap()
                .coordinate(0)
        })
        .collect();
    let rhat = split_rhat(&chains).unwrap();
    assert!(rhat < 1.05, "R-hat {rhat}");
}

#[test]
fn prior_only_posterior_matches_prior() {
    let arch = NetArchitecture {
        input_dim: 12,
        hidden: vec![8],
        output_dim: 8,
    };
    let anchor = arch.init_params(17).theta;
    let pot = PosteriorPotential::new(
        arch,
        Array2::zeros((0, 12)),
        Array2::zeros((0, 8)),
        LikelihoodScales::from_sigma(&[1.0; 8], 20.0).unwrap(),
        PriorSpec::new(anchor.clone(), 0.5).unwrap(),
    )
    .unwrap();
    let ens = sample_posterior(&pot, &anchor, &config(300, 3000, 10, 0.05, 9)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let j = rng.random_range(0..anchor.len());
        check_moments(&ens.coordinate(j), anchor[j], 0.5, &format!("theta[{j}]"));
    }
}

#[test]
fn ensemble_file_round_trip() {
    let pot = gaussian(4);
    let ens = sample_posterior(&pot, &[0.0; 4], &config(10, 25, 5, 0.1, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ens.bin");
    write_ensemble(&path, &ens).unwrap();
    assert_eq!(read_ensemble(&path).unwrap(), ens);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(read_ensemble(&path).is_err());
}

#[test]
fn sampler_is_deterministic_per_seed() {
    let pot = gaussian(2);
    let cfg = config(50, 100, 8, 0.1, 77);
    let a = sample_posterior(&pot, &[0.1, 0.2], &cfg).unwrap();
    let b = sample_posterior(&pot, &[0.1, 0.2], &cfg).unwrap();
    assert_eq!(a, b);
    let state = ChainState::new(&pot, vec![0.1, 0.2]).unwrap();
    assert!((state.energy - 0.025).abs() < 1e-15);
}
