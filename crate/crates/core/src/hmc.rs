//! Hamiltonian Monte Carlo with an identity mass matrix, dual-averaging
//! step-size adaptation during burn-in, and single-chain diagnostics.

use std::io::{Read, Write};
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bnn::PosteriorPotential;
use crate::error::{Result, ShmError};

/// Anything with a differentiable energy `U(θ)`.
pub trait Potential {
    fn dim(&self) -> usize;
    fn energy_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl Potential for PosteriorPotential {
    fn dim(&self) -> usize {
        PosteriorPotential::dim(self)
    }

    fn energy_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (u, _, g) = self.evaluate(theta)?;
        Ok((u, g))
    }
}

/// Closure-backed potential, mostly for analytic targets.
pub struct FnPotential<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> FnPotential<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> Potential for FnPotential<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.f)(theta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size_init: f64,
    pub target_accept: f64,
    pub burn_in: usize,
    pub n_samples: usize,
    pub leapfrog_steps: usize,
    /// Relative jitter of the path length per iteration.
    pub leapfrog_jitter: f64,
    pub thinning: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size_init > 0.0 && self.step_size_init.is_finite()) {
            return Err(ShmError::Config("initial step size must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(ShmError::Config("target acceptance must lie in (0, 1)".into()));
        }
        if self.n_samples == 0 || self.thinning == 0 || self.leapfrog_steps == 0 {
            return Err(ShmError::Config("sample count, thinning and path length must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.leapfrog_jitter) || !(self.divergence_threshold > 0.0) {
            return Err(ShmError::Config("jitter must lie in [0, 1) and the divergence threshold be positive".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.n_samples / self.thinning
    }
}

/// Position, energy and gradient at the current chain state.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub energy: f64,
    pub grad: Vec<f64>,
}

impl ChainState {
    pub fn new(potential: &impl Potential, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != potential.dim() {
            return Err(ShmError::Parameter(format!(
                "start point has {} coordinates, potential has {}",
                theta.len(),
                potential.dim()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(ShmError::Numeric("non-finite start point".into()));
        }
        let (energy, grad) = potential.energy_grad(&theta)?;
        if !energy.is_finite() {
            return Err(ShmError::Numeric("potential is not finite at the start point".into()));
        }
        Ok(Self { theta, energy, grad })
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub theta: Vec<f64>,
    pub momentum: Vec<f64>,
    pub energy: f64,
    pub grad: Vec<f64>,
}

/// `steps` leapfrog steps from `(theta, momentum)` with the gradient `grad` at
/// `theta`. Non-finite states are reported as numeric errors.
pub fn leapfrog(
    potential: &impl Potential,
    theta: &[f64],
    momentum: &[f64],
    grad: &[f64],
    eps: f64,
    steps: usize,
) -> Result<Trajectory> {
    if !(eps > 0.0) || steps == 0 {
        return Err(ShmError::Parameter(format!("leapfrog needs eps > 0 and at least one step, got {eps}, {steps}")));
    }
    let mut q = theta.to_vec();
    let mut p = momentum.to_vec();
    let mut g = grad.to_vec();
    let mut u = f64::NAN;
    for pi in p.iter_mut().zip(&g) {
        *pi.0 -= 0.5 * eps * pi.1;
    }
    for step in 0..steps {
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi += eps * pi;
        }
        let (energy, grad) = potential.energy_grad(&q)?;
        if !energy.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(ShmError::Numeric(format!("trajectory left the finite domain at step {step}")));
        }
        u = energy;
        g = grad;
        let kick = if step + 1 == steps { 0.5 * eps } else { eps };
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi -= kick * gi;
        }
    }
    Ok(Trajectory {
        theta: q,
        momentum: p,
        energy: u,
        grad: g,
    })
}

pub fn kinetic(momentum: &[f64]) -> f64 {
    0.5 * momentum.iter().map(|p| p * p).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub delta_h: f64,
    pub accept_prob: f64,
    pub divergent: bool,
}

/// One Metropolis-corrected HMC transition. On rejection `state` is left untouched.
pub fn hmc_step(
    potential: &impl Potential,
    state: &mut ChainState,
    eps: f64,
    steps: usize,
    divergence_threshold: f64,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    let momentum: Vec<f64> = (0..state.theta.len()).map(|_| rng.sample(StandardNormal)).collect();
    let h0 = state.energy + kinetic(&momentum);
    let proposal = match leapfrog(potential, &state.theta, &momentum, &state.grad, eps, steps) {
        Ok(t) => Some(t),
        Err(ShmError::Numeric(_)) | Err(ShmError::Layer { .. }) => None,
        Err(e) => return Err(e),
    };
    let u: f64 = rng.random();
    let Some(t) = proposal else {
        return Ok(StepOutcome {
            accepted: false,
            delta_h: f64::INFINITY,
            accept_prob: 0.0,
            divergent: true,
        });
    };
    let delta_h = t.energy + kinetic(&t.momentum) - h0;
    if !delta_h.is_finite() || delta_h.abs() > divergence_threshold {
        return Ok(StepOutcome {
            accepted: false,
            delta_h,
            accept_prob: 0.0,
            divergent: true,
        });
    }
    let accept_prob = (-delta_h).exp().min(1.0);
    let accepted = u < accept_prob;
    if accepted {
        state.theta = t.theta;
        state.energy = t.energy;
        state.grad = t.grad;
    }
    Ok(StepOutcome {
        accepted,
        delta_h,
        accept_prob,
        divergent: false,
    })
}

/// Nesterov dual averaging of `log ε` towards a target acceptance rate.
///
/// The shrinkage point is the initial step size itself, so a run of
/// all-accept (all-reject) statistics moves `ε` monotonically up (down).
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: u64,
}

impl DualAveraging {
    pub fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: eps0.ln(),
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            h_bar: 0.0,
            log_eps: eps0.ln(),
            log_eps_bar: eps0.ln(),
            t: 0,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Averaged step size used once adaptation stops.
    pub fn final_step_size(&self) -> f64 {
        self.log_eps_bar.exp()
    }

    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1;
        let t = self.t as f64;
        let w = 1.0 / (t + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - t.sqrt() / self.gamma * self.h_bar;
        let eta = t.powf(-self.kappa);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.step_size()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizeSummary {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    pub last_adapted: f64,
    #[serde(rename = "final")]
    pub frozen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    /// Accepted fraction of post-burn-in iterations.
    pub acceptance_rate: f64,
    pub burn_in_acceptance_rate: Option<f64>,
    pub mean_accept_prob: f64,
    pub step_size: StepSizeSummary,
    pub divergences: usize,
    pub burn_in: usize,
    pub n_samples: usize,
    pub thinning: usize,
    pub leapfrog_steps: usize,
    pub seed: u64,
    /// Potential energy at every retained draw.
    pub energy_trace: Vec<f64>,
    pub energy_ess: f64,
    /// Fingerprint of the model the chain was started from, when known.
    #[serde(default)]
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    n_draws: usize,
    dim: usize,
    /// Row-major `M × D` draws in single precision.
    samples: Vec<f32>,
    pub diagnostics: SamplerDiagnostics,
}

impl PosteriorEnsemble {
    pub fn from_samples(dim: usize, samples: Vec<f32>, diagnostics: SamplerDiagnostics) -> Result<Self> {
        if dim == 0 || samples.len() % dim != 0 {
            return Err(ShmError::Parameter("sample buffer is not a whole number of draws".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(ShmError::Numeric("ensemble contains non-finite values".into()));
        }
        Ok(Self {
            n_draws: samples.len() / dim,
            dim,
            samples,
            diagnostics,
        })
    }

    /// An ensemble holding `copies` identical draws.
    pub fn repeated(theta: &[f64], copies: usize, diagnostics: SamplerDiagnostics) -> Result<Self> {
        let row: Vec<f32> = theta.iter().map(|&v| v as f32).collect();
        let samples = row.iter().copied().cycle().take(row.len() * copies).collect();
        Self::from_samples(theta.len(), samples, diagnostics)
    }

    pub fn len(&self) -> usize {
        self.n_draws
    }

    pub fn is_empty(&self) -> bool {
        self.n_draws == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn draw(&self, i: usize) -> &[f32] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn draws(&self) -> impl Iterator<Item = &[f32]> {
        self.samples.chunks_exact(self.dim)
    }

    /// Keeps only the first `m` draws.
    pub fn truncated(&self, m: usize) -> Self {
        let m = m.min(self.n_draws);
        Self {
            n_draws: m,
            dim: self.dim,
            samples: self.samples[..m * self.dim].to_vec(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    /// Trace of one coordinate across draws.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.draws().map(|d| d[j] as f64).collect()
    }
}

/// Runs one chain from `start`: `burn_in` adaptive iterations, then
/// `n_samples` iterations at the frozen step size, keeping every
/// `thinning`-th state.
pub fn sample_posterior(potential: &impl Potential, start: &[f64], config: &HmcConfig) -> Result<PosteriorEnsemble> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = ChainState::new(potential, start.to_vec())?;
    let mut adapt = DualAveraging::new(config.step_size_init, config.target_accept);
    let mut eps = config.step_size_init;
    let (mut eps_min, mut eps_max) = (eps, eps);
    let mut divergences = 0;
    let mut burn_accepts = 0;

    let path_length = |rng: &mut ChaCha8Rng| -> usize {
        let j: f64 = rng.random_range(-config.leapfrog_jitter..=config.leapfrog_jitter);
        ((config.leapfrog_steps as f64 * (1.0 + j)).round() as usize).max(1)
    };

    for it in 0..config.burn_in {
        let steps = path_length(&mut rng);
        let out = hmc_step(potential, &mut state, eps, steps, config.divergence_threshold, &mut rng)?;
        divergences += usize::from(out.divergent);
        burn_accepts += usize::from(out.accepted);
        eps = adapt.update(out.accept_prob);
        eps_min = eps_min.min(eps);
        eps_max = eps_max.max(eps);
        debug!("burn-in {it}: eps {eps:.3e}, dH {:.3e}, accepted {}", out.delta_h, out.accepted);
    }
    let last_adapted = eps;
    if config.burn_in > 0 {
        eps = adapt.final_step_size();
    }
    info!("step size frozen at {eps:.4e} after {} burn-in iterations", config.burn_in);

    let dim = state.theta.len();
    let mut samples = Vec::with_capacity(config.retained() * dim);
    let mut energy_trace = Vec::with_capacity(config.retained());
    let mut accepts = 0;
    let mut prob_sum = 0.0;
    for it in 0..config.n_samples {
        let steps = path_length(&mut rng);
        let out = hmc_step(potential, &mut state, eps, steps, config.divergence_threshold, &mut rng)?;
        divergences += usize::from(out.divergent);
        accepts += usize::from(out.accepted);
        prob_sum += out.accept_prob;
        if (it + 1) % config.thinning == 0 {
            samples.extend(state.theta.iter().map(|&v| v as f32));
            energy_trace.push(state.energy);
        }
        if (it + 1) % 100 == 0 {
            info!("draw {}: acceptance {:.3}", it + 1, accepts as f64 / (it + 1) as f64);
        }
    }

    let acceptance_rate = accepts as f64 / config.n_samples as f64;
    let diagnostics = SamplerDiagnostics {
        acceptance_rate,
        burn_in_acceptance_rate: (config.burn_in > 0)
            .then(|| burn_accepts as f64 / config.burn_in as f64),
        mean_accept_prob: prob_sum / config.n_samples as f64,
        step_size: StepSizeSummary {
            initial: config.step_size_init,
            min: eps_min,
            max: eps_max,
            last_adapted,
            frozen: eps,
        },
        divergences,
        burn_in: config.burn_in,
        n_samples: config.n_samples,
        thinning: config.thinning,
        leapfrog_steps: config.leapfrog_steps,
        seed: config.seed,
        energy_ess: effective_sample_size(&energy_trace),
        energy_trace,
        model_fingerprint: String::new(),
    };
    if accepts == 0 {
        return Err(ShmError::Numeric(format!(
            "no proposal accepted after burn-in (step size {eps:.3e}, {divergences} divergences, burn-in acceptance {:?})",
            diagnostics.burn_in_acceptance_rate
        )));
    }
    PosteriorEnsemble::from_samples(dim, samples, diagnostics)
}

/// Runs independent chains with seeds `seed, seed + 1, …`.
pub fn sample_chains(
    potential: &impl Potential,
    start: &[f64],
    config: &HmcConfig,
    n_chains: usize,
) -> Result<Vec<PosteriorEnsemble>> {
    (0..n_chains as u64)
        .map(|c| {
            let cfg = HmcConfig {
                seed: config.seed.wrapping_add(c),
                ..config.clone()
            };
            sample_posterior(potential, start, &cfg)
        })
        .collect()
}

fn autocovariance(x: &[f64], mean: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum::<f64>() / n as f64
}

/// Effective sample size by Geyer's initial monotone positive sequence.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = autocovariance(x, mean, 0);
    if c0 <= 0.0 {
        return n as f64;
    }
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = (autocovariance(x, mean, 2 * k) + autocovariance(x, mean, 2 * k + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        k += 1;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

/// Split potential scale reduction over chains of equal length.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let n = chains.first().map_or(0, Vec::len);
    if chains.is_empty() || n < 4 || chains.iter().any(|c| c.len() != n) {
        return Err(ShmError::Parameter("R-hat needs chains of equal length of at least 4".into()));
    }
    let half = n / 2;
    let parts: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..]])
        .collect();
    let m = parts.len() as f64;
    let len = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / len).collect();
    let grand = means.iter().sum::<f64>() / m;
    let between = len / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let within = parts
        .iter()
        .zip(&means)
        .map(|(p, mu)| p.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (len - 1.0))
        .sum::<f64>()
        / m;
    if within == 0.0 {
        return Ok(1.0);
    }
    let var_plus = (len - 1.0) / len * within + between / len;
    Ok((var_plus / within).sqrt())
}

const ENSEMBLE_MAGIC: [u8; 8] = *b"SHMENSv1";
const ENSEMBLE_VERSION: u32 = 1;

/// Writes `<path>` (binary draws) and `<path>.json` (diagnostics).
pub fn write_ensemble(path: &Path, ensemble: &PosteriorEnsemble) -> Result<()> {
    let mut buf = Vec::with_capacity(28 + ensemble.samples.len() * 4);
    buf.extend_from_slice(&ENSEMBLE_MAGIC);
    buf.extend_from_slice(&ENSEMBLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ensemble.n_draws as u64).to_le_bytes());
    buf.extend_from_slice(&(ensemble.dim as u64).to_le_bytes());
    for v in &ensemble.samples {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| ShmError::io(path, e))?;
    f.write_all(&buf).map_err(|e| ShmError::io(path, e))?;
    crate::io::write_json(&sidecar_path(path), &ensemble.diagnostics)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

pub fn read_ensemble(path: &Path) -> Result<PosteriorEnsemble> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ShmError::io(path, e))?;
    let bad = |msg: &str| ShmError::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 28 || bytes[..8] != ENSEMBLE_MAGIC {
        return Err(bad("not an ensemble file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != ENSEMBLE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let m = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let body = &bytes[28..];
    if d == 0 || body.len() != m * d * 4 {
        return Err(bad("payload length does not match header"));
    }
    let samples = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let diagnostics: SamplerDiagnostics = crate::io::read_json(&sidecar_path(path))?;
    PosteriorEnsemble::from_samples(d, samples, diagnostics).map_err(|e| bad(&e.to_string()))
}
