//! End-to-end stages: data generation, PCA, pre-training, posterior sampling,
//! evaluation and streaming monitoring.
//!
//! Each stage reads its inputs from and writes its artifacts to the configured
//! output directory. Artifacts are chained by SHA-256 fingerprints so a stage
//! refuses upstream files that were regenerated behind its back.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bnn::{self, InputScaling, LikelihoodScales, ModelFile, PosteriorPotential, PriorSpec};
use crate::config::PipelineConfig;
use crate::error::{Result, ShmError};
use crate::field::{self, cev_of_spectrum, minmax_normalize, project_matrix, smallest_k_for_cev, DataMatrix, PcaBasis};
use crate::hmc::{read_ensemble, sample_posterior, write_ensemble, PosteriorEnsemble, SamplerDiagnostics};
use crate::io;
use crate::synth::{generate_dataset, read_frames, write_frames, Frame, NoiseConfig, SpecimenSpec};
use crate::uq::{
    aleatoric_field, epistemic_field, evaluate, FieldExport, FieldMetrics, Prediction, Predictor,
    UncertaintyField,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: String,
    pub seed: u64,
    pub n_frames: usize,
    pub split: Split,
    pub outliers: bool,
}

/// Contents of a specimen's `dataset.json`; its `frames.csv` holds the
/// experiments back to back in this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenRecord {
    pub id: String,
    pub spec: SpecimenSpec,
    pub noise: NoiseConfig,
    pub experiments: Vec<ExperimentRecord>,
}

#[derive(Debug, Clone)]
pub struct LoadedSpecimen {
    pub record: SpecimenRecord,
    pub frames: Vec<Frame>,
}

impl LoadedSpecimen {
    /// Frames of every experiment in `split`, in file order.
    pub fn split_frames(&self, split: Split) -> Vec<&Frame> {
        let mut out = Vec::new();
        let mut start = 0;
        for e in &self.record.experiments {
            if e.split == split {
                out.extend(&self.frames[start..start + e.n_frames]);
            }
            start += e.n_frames;
        }
        out
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.record
            .experiments
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.clone())
            .collect()
    }
}

pub fn specimen_id(crack_length: f64) -> String {
    format!("crack{crack_length}mm")
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn experiment_seed(base: u64, specimen: usize, experiment: usize) -> u64 {
    splitmix64(splitmix64(base ^ ((specimen as u64) << 32)) ^ experiment as u64)
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub specimens: Vec<String>,
    pub frames_per_specimen: usize,
}

/// Writes `data/<specimen>/{dataset.json, frames.csv}` for every specimen.
pub fn gen_data(cfg: &PipelineConfig) -> Result<GenSummary> {
    cfg.validate()?;
    let d = &cfg.data;
    let mut ids = Vec::new();
    for (i, &length) in d.crack_lengths.iter().enumerate() {
        let spec = SpecimenSpec {
            crack_length: length,
            ..d.specimen.clone()
        };
        spec.validate().map_err(|e| ShmError::Config(e.to_string()))?;
        let id = specimen_id(length);
        let outlier_prone = d.outlier_specimens.iter().any(|&l| l == length);
        let mut experiments = Vec::new();
        let mut frames = Vec::new();
        for e in 0..d.experiments_per_specimen {
            let split = if e + d.test_experiments >= d.experiments_per_specimen {
                Split::Test
            } else {
                Split::Train
            };
            let outliers = outlier_prone && (split == Split::Train || d.outliers_in_test);
            let noise = NoiseConfig {
                outlier_prob: if outliers { d.noise.outlier_prob } else { 0.0 },
                ..d.noise.clone()
            };
            let seed = experiment_seed(d.seed, i, e);
            let ds = generate_dataset(&spec, d.frames_per_experiment, &noise, seed)?;
            experiments.push(ExperimentRecord {
                id: format!("{id}-exp{e}"),
                seed,
                n_frames: ds.frames.len(),
                split,
                outliers,
            });
            frames.extend(ds.frames);
        }
        let dir = cfg.data_dir().join(&id);
        io::ensure_dir(&dir)?;
        let record = SpecimenRecord {
            id: id.clone(),
            spec,
            noise: d.noise.clone(),
            experiments,
        };
        io::write_json(&dir.join("dataset.json"), &record)?;
        write_frames(&dir.join("frames.csv"), &frames)?;
        info!("wrote {} frames for {id}", frames.len());
        ids.push(id);
    }
    Ok(GenSummary {
        specimens: ids,
        frames_per_specimen: d.experiments_per_specimen * d.frames_per_experiment,
    })
}

pub fn load_specimens(cfg: &PipelineConfig) -> Result<Vec<LoadedSpecimen>> {
    cfg.data
        .crack_lengths
        .iter()
        .map(|&l| {
            let dir = cfg.data_dir().join(specimen_id(l));
            let record: SpecimenRecord = io::read_json(&dir.join("dataset.json"))?;
            let frames = read_frames(&dir.join("frames.csv"), record.spec.rows, record.spec.cols)?;
            let expected: usize = record.experiments.iter().map(|e| e.n_frames).sum();
            if frames.len() != expected {
                return Err(ShmError::Data(format!(
                    "{}: {} frames on disk, dataset.json lists {expected}",
                    dir.display(),
                    frames.len()
                )));
            }
            Ok(LoadedSpecimen { record, frames })
        })
        .collect()
}

/// Hash over every specimen's `dataset.json` and `frames.csv`.
pub fn data_fingerprint(cfg: &PipelineConfig) -> Result<String> {
    let mut all = Vec::new();
    for &l in &cfg.data.crack_lengths {
        let dir = cfg.data_dir().join(specimen_id(l));
        for name in ["dataset.json", "frames.csv"] {
            let path = dir.join(name);
            all.extend(std::fs::read(&path).map_err(|e| ShmError::io(&path, e))?);
        }
    }
    Ok(io::sha256_hex(&all))
}

/// Stacked gauges and raw fields.
#[derive(Debug, Clone)]
pub struct Pool {
    pub ids: Vec<String>,
    pub gauges: Array2<f64>,
    pub fields: Array2<f64>,
}

impl Pool {
    pub fn from_frames(ids: Vec<String>, frames: &[&Frame]) -> Result<Self> {
        let n = frames.len();
        if n == 0 {
            return Err(ShmError::Data("no frames selected".into()));
        }
        let g = frames[0].gauges.len();
        let p = frames[0].field.values().len();
        let mut gauges = Array2::zeros((n, g));
        let mut fields = Array2::zeros((n, p));
        for (i, f) in frames.iter().enumerate() {
            gauges.row_mut(i).assign(&ndarray::ArrayView1::from(f.gauges.as_slice()));
            fields.row_mut(i).assign(&ndarray::ArrayView1::from(f.field.values()));
        }
        Ok(Self { ids, gauges, fields })
    }

    pub fn len(&self) -> usize {
        self.gauges.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training frames of all specimens, optionally capped per specimen.
pub fn training_pool(specimens: &[LoadedSpecimen], cap: Option<usize>) -> Result<Pool> {
    let mut frames = Vec::new();
    let mut ids = Vec::new();
    for s in specimens {
        let train = s.split_frames(Split::Train);
        let take = cap.unwrap_or(train.len());
        if take > train.len() {
            return Err(ShmError::Data(format!(
                "{} has {} training frames, {take} requested",
                s.record.id,
                train.len()
            )));
        }
        frames.extend(&train[..take]);
        ids.extend(s.split_ids(Split::Train));
    }
    Pool::from_frames(ids, &frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub n_samples: usize,
    pub k: usize,
    pub cev_threshold: f64,
    pub k_for_threshold: usize,
    pub cev: Vec<f64>,
    pub dataset_fingerprint: String,
    pub basis_fingerprint: String,
}

/// Normalizes a pool's fields and fits a basis with `k` modes (or the
/// threshold-selected count when `k` is `None`).
pub fn fit_basis(pool: &Pool, k: Option<usize>, threshold: f64, grid: (usize, usize)) -> Result<(PcaBasis, usize)> {
    let raw = DataMatrix::new(pool.fields.clone())?;
    let (x, norm) = minmax_normalize(&raw)?;
    let rank = x.n_samples().min(x.n_features());
    let k_used = k.unwrap_or(1);
    if k_used > rank {
        return Err(ShmError::Parameter(format!(
            "k = {k_used} exceeds the {rank} available samples/features"
        )));
    }
    let probe = field::fit_pca(&x, k_used)?;
    let k_thr = smallest_k_for_cev(probe.singular_values(), threshold)?;
    let basis = match k {
        Some(_) => probe,
        None => field::fit_pca(&x, k_thr)?,
    };
    let basis = basis.with_normalization(norm)?.with_grid(grid.0, grid.1)?;
    Ok((basis, k_thr))
}

pub fn fit_pca(cfg: &PipelineConfig) -> Result<PcaReport> {
    cfg.validate()?;
    let specimens = load_specimens(cfg)?;
    let pool = training_pool(&specimens, None)?;
    let grid = (cfg.data.specimen.rows, cfg.data.specimen.cols);
    let (basis, k_thr) = fit_basis(&pool, cfg.pca.k, cfg.pca.cev_threshold, grid)?;
    let cev = (1..=basis.singular_values().len())
        .map(|k| cev_of_spectrum(basis.singular_values(), k))
        .collect::<Result<Vec<_>>>()?;

    io::ensure_dir(&cfg.output_dir)?;
    let text = basis.to_json()?;
    io::write_text(&cfg.basis_path(), &text)?;
    io::write_csv(
        &cfg.output_dir.join("cev.csv"),
        &["k".to_string(), "cev".to_string()],
        cev.iter().enumerate().map(|(i, c)| vec![(i + 1) as f64, *c]),
    )?;
    if cfg.pca.per_specimen {
        for s in &specimens {
            let own = Pool::from_frames(s.split_ids(Split::Train), &s.split_frames(Split::Train))?;
            let (b, _) = fit_basis(&own, Some(basis.k()), cfg.pca.cev_threshold, grid)?;
            io::write_text(&cfg.output_dir.join(format!("basis_{}.json", s.record.id)), &b.to_json()?)?;
        }
    }
    let report = PcaReport {
        n_samples: pool.len(),
        k: basis.k(),
        cev_threshold: cfg.pca.cev_threshold,
        k_for_threshold: k_thr,
        cev,
        dataset_fingerprint: data_fingerprint(cfg)?,
        basis_fingerprint: io::sha256_hex(text.as_bytes()),
    };
    io::write_json(&cfg.pca_report_path(), &report)?;
    info!("basis with {} modes; {} modes reach CEV {}", report.k, k_thr, cfg.pca.cev_threshold);
    Ok(report)
}

/// Loads the basis and checks it against its report and the current data.
pub fn load_basis(cfg: &PipelineConfig, check_data: bool) -> Result<(PcaBasis, String)> {
    let text = io::read_text(&cfg.basis_path())?;
    let fp = io::sha256_hex(text.as_bytes());
    let report: PcaReport = io::read_json(&cfg.pca_report_path())?;
    if report.basis_fingerprint != fp {
        return Err(ShmError::Data("basis.json does not match its PCA report".into()));
    }
    if check_data && report.dataset_fingerprint != data_fingerprint(cfg)? {
        return Err(ShmError::Data("datasets changed since the basis was fitted".into()));
    }
    Ok((PcaBasis::from_json(&text)?, fp))
}

/// Normalized network inputs and PCA targets for a pool.
pub fn network_data(pool: &Pool, basis: &PcaBasis, scaling: &InputScaling) -> Result<(Array2<f64>, Array2<f64>)> {
    let x = basis
        .normalization()
        .apply_matrix(&DataMatrix::new(pool.fields.clone())?)?;
    let z = project_matrix(&x, basis)?;
    Ok((scaling.apply_matrix(pool.gauges.view()), z))
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub sigma_hat: Vec<f64>,
    pub final_train_loss: Option<f64>,
    pub final_validation_loss: Option<f64>,
    pub clamp_events: usize,
}

/// Fits a network on a pool against a basis.
pub fn pretrain_on(cfg: &PipelineConfig, pool: &Pool, basis: &PcaBasis, basis_fp: &str) -> Result<(ModelFile, Vec<bnn::EpochLoss>)> {
    let scaling = InputScaling::fit(pool.gauges.view());
    let (inputs, targets) = network_data(pool, basis, &scaling)?;
    let arch = cfg.architecture(basis.k());
    let outcome = bnn::pretrain(&arch, inputs.view(), targets.view(), &basis.mode_weights(), &cfg.pretrain)?;
    let model = ModelFile {
        architecture: arch,
        theta: outcome.params.theta,
        log_var: outcome.params.log_var,
        input_scaling: scaling,
        seed: cfg.pretrain.seed,
        training: cfg.pretrain.clone(),
        basis_fingerprint: basis_fp.to_string(),
        clamp_events: outcome.clamp_events,
        training_datasets: pool.ids.clone(),
    };
    Ok((model, outcome.history))
}

pub fn pretrain(cfg: &PipelineConfig) -> Result<PretrainSummary> {
    cfg.validate()?;
    let (basis, fp) = load_basis(cfg, true)?;
    let specimens = load_specimens(cfg)?;
    let pool = training_pool(&specimens, None)?;
    let (model, history) = pretrain_on(cfg, &pool, &basis, &fp)?;
    io::write_json(&cfg.model_path(), &model)?;
    io::write_csv(
        &cfg.output_dir.join("loss.csv"),
        &["epoch".to_string(), "train".into(), "validation".into()],
        history.iter().map(|h| vec![h.epoch as f64, h.train, h.validation]),
    )?;
    Ok(PretrainSummary {
        sigma_hat: model.params().sigma_hat(),
        final_train_loss: history.last().map(|h| h.train),
        final_validation_loss: history.last().map(|h| h.validation),
        clamp_events: model.clamp_events,
    })
}

pub fn load_model(cfg: &PipelineConfig, basis_fp: &str) -> Result<(ModelFile, String)> {
    let text = io::read_text(&cfg.model_path())?;
    let model: ModelFile =
        serde_json::from_str(&text).map_err(|e| ShmError::Data(format!("model.json: {e}")))?;
    model.validate()?;
    if model.basis_fingerprint != basis_fp {
        return Err(ShmError::Data("model was trained against a different basis".into()));
    }
    Ok((model, io::sha256_hex(text.as_bytes())))
}

/// Posterior sampling for a pre-trained model on a pool.
pub fn sample_on(cfg: &PipelineConfig, pool: &Pool, basis: &PcaBasis, model: &ModelFile, hmc: &crate::hmc::HmcConfig) -> Result<PosteriorEnsemble> {
    let (inputs, targets) = network_data(pool, basis, &model.input_scaling)?;
    let scales = LikelihoodScales::from_sigma(&model.params().sigma_hat(), cfg.posterior.calibration_d)?;
    let prior = PriorSpec::new(model.theta.clone(), cfg.posterior.prior_std)?;
    let potential = PosteriorPotential::new(model.architecture.clone(), inputs, targets, scales, prior)?;
    sample_posterior(&potential, &model.theta, hmc)
}

pub fn sample(cfg: &PipelineConfig) -> Result<SamplerDiagnostics> {
    cfg.validate()?;
    let (basis, basis_fp) = load_basis(cfg, true)?;
    let (model, model_fp) = load_model(cfg, &basis_fp)?;
    let specimens = load_specimens(cfg)?;
    let pool = training_pool(&specimens, None)?;
    let mut ensemble = sample_on(cfg, &pool, &basis, &model, &cfg.hmc)?;
    ensemble.diagnostics.model_fingerprint = model_fp;
    write_ensemble(&cfg.ensemble_path(), &ensemble)?;
    let mut diag = ensemble.diagnostics.clone();
    diag.energy_trace.clear();
    Ok(diag)
}

/// Basis, model and ensemble with a verified fingerprint chain.
pub struct Artifacts {
    pub basis: PcaBasis,
    pub model: ModelFile,
    pub ensemble: PosteriorEnsemble,
}

impl Artifacts {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let (basis, basis_fp) = load_basis(cfg, false)?;
        let (model, model_fp) = load_model(cfg, &basis_fp)?;
        let ensemble = read_ensemble(&cfg.ensemble_path())?;
        if ensemble.diagnostics.model_fingerprint != model_fp {
            return Err(ShmError::Data("ensemble was sampled from a different model".into()));
        }
        if ensemble.dim() != model.theta.len() {
            return Err(ShmError::Data("ensemble dimension does not match the model".into()));
        }
        Ok(Self { basis, model, ensemble })
    }

    pub fn predictor(&self) -> Predictor<'_> {
        Predictor {
            arch: &self.model.architecture,
            scaling: &self.model.input_scaling,
            ensemble: &self.ensemble,
        }
    }

    pub fn aleatoric(&self, cfg: &PipelineConfig) -> Result<UncertaintyField> {
        aleatoric_field(&self.model.params().sigma_hat(), &self.basis, cfg.uq.mode, cfg.uq.space)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecimenMetrics {
    pub id: String,
    pub crack_length: f64,
    pub metrics: FieldMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub specimens: Vec<SpecimenMetrics>,
    pub sigma_hat: Vec<f64>,
}

fn grid_csv(path: &Path, values: &[f64], cols: usize) -> Result<()> {
    let header: Vec<String> = (0..cols).map(|c| format!("c{c}")).collect();
    io::write_csv(path, &header, values.chunks(cols).map(<[f64]>::to_vec))
}

/// Scores the ensemble on every specimen's `split` experiments.
pub fn eval(cfg: &PipelineConfig, split: Split) -> Result<EvalReport> {
    cfg.validate()?;
    let art = Artifacts::load(cfg)?;
    let specimens = load_specimens(cfg)?;
    let trained: BTreeSet<&str> = art.model.training_datasets.iter().map(String::as_str).collect();
    let predictor = art.predictor();
    let fields_dir = cfg.fields_dir();
    let pred_dir = cfg.output_dir.join("predictions");
    io::ensure_dir(&fields_dir)?;
    io::ensure_dir(&pred_dir)?;
    let k = art.basis.k();

    let mut out = Vec::new();
    for s in &specimens {
        let ids = s.split_ids(split);
        if split == Split::Test {
            if let Some(id) = ids.iter().find(|id| trained.contains(id.as_str())) {
                return Err(ShmError::Data(format!("test experiment {id} was used for training")));
            }
        }
        let frames = s.split_frames(split);
        if frames.is_empty() {
            return Err(ShmError::Data(format!("{} has no {split:?} frames", s.record.id)));
        }
        let predictions = frames
            .iter()
            .map(|f| predictor.predict(&f.gauges))
            .collect::<Result<Vec<Prediction>>>()?;
        let pool = Pool::from_frames(ids, &frames)?;
        let truth = art
            .basis
            .normalization()
            .apply_matrix(&DataMatrix::new(pool.fields)?)?;
        let metrics = evaluate(&predictions, truth.view(), &art.basis)?;
        let tag = format!("{}_{}", s.record.id, split_name(split));
        grid_csv(&fields_dir.join(format!("abs_error_{tag}.csv")), &metrics.field_mae, metrics.cols)?;
        let mut header: Vec<String> = (0..k).map(|j| format!("z{j}")).collect();
        header.extend((0..k).map(|j| format!("s{j}")));
        io::write_csv(
            &pred_dir.join(format!("{tag}.csv")),
            &header,
            predictions.iter().map(|p| p.z_mean.iter().chain(&p.z_std).copied().collect()),
        )?;
        out.push(SpecimenMetrics {
            id: s.record.id.clone(),
            crack_length: s.record.spec.crack_length,
            metrics,
        });
    }

    write_aleatoric(cfg, &art.aleatoric(cfg)?)?;
    let report = EvalReport {
        split,
        specimens: out,
        sigma_hat: art.model.params().sigma_hat(),
    };
    let name = match split {
        Split::Test => "metrics.json".to_string(),
        Split::Train => "metrics_train.json".to_string(),
    };
    io::write_json(&cfg.output_dir.join(name), &report)?;
    Ok(report)
}

/// Aleatoric map as a node-grid CSV, an upsampled CSV and an upsampled JSON.
fn write_aleatoric(cfg: &PipelineConfig, ale: &UncertaintyField) -> Result<()> {
    let dir = cfg.fields_dir();
    io::ensure_dir(&dir)?;
    grid_csv(&dir.join("aleatoric.csv"), &ale.values, ale.cols)?;
    let export = FieldExport::upsampled(ale.kind.label(), &ale.as_strain_field()?, cfg.uq.upsample_factor, cfg.uq.edge)?;
    grid_csv(&dir.join("aleatoric_upsampled.csv"), &export.values, export.cols)?;
    io::write_json(&dir.join("aleatoric.json"), &export)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

#[derive(Debug, Deserialize)]
struct MonitorInput {
    t: f64,
    gauges: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct MonitorOutput {
    t: f64,
    z_mean: Vec<f64>,
    z_std: Vec<f64>,
    epistemic_median: f64,
    latency_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_field: Option<FieldExport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epistemic_field: Option<FieldExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSummary {
    pub frames: usize,
    pub skipped: usize,
    pub mean_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub max_latency_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Reads `{t, gauges}` lines and writes one prediction line per valid frame.
pub fn monitor(cfg: &PipelineConfig, art: &Artifacts, input: impl BufRead, mut output: impl Write) -> Result<MonitorSummary> {
    let ale = art.aleatoric(cfg)?;
    write_aleatoric(cfg, &ale)?;
    let predictor = art.predictor();
    let n_gauges = art.model.architecture.input_dim;
    let mut latencies = Vec::new();
    let mut skipped = 0;

    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| ShmError::io("<input>", e))?;
        let start = Instant::now();
        if line.trim().is_empty() {
            continue;
        }
        let frame: MonitorInput = match serde_json::from_str(&line) {
            Ok(f) => f,
            Err(e) => {
                warn!("line {}: skipped malformed frame: {e}", lineno + 1);
                skipped += 1;
                continue;
            }
        };
        if frame.gauges.len() != n_gauges || frame.gauges.iter().any(|g| !g.is_finite()) {
            warn!("line {}: skipped frame with {} gauge values", lineno + 1, frame.gauges.len());
            skipped += 1;
            continue;
        }
        let pred = predictor.predict(&frame.gauges)?;
        let epi = epistemic_field(&pred.z_std, &art.basis, cfg.uq.mode, cfg.uq.space)?;
        let (mean_field, epistemic_field) = if cfg.monitor.inline_fields {
            let mean = field::reconstruct_physical(&field::ModalCoefficients(pred.z_mean.clone()), &art.basis)?;
            let grid = |v: Vec<f64>| field::StrainField::new(art.basis.rows(), art.basis.cols(), v);
            (
                Some(FieldExport::upsampled("mean", &grid(mean)?, cfg.uq.upsample_factor, cfg.uq.edge)?),
                Some(FieldExport::upsampled("epistemic", &epi.as_strain_field()?, cfg.uq.upsample_factor, cfg.uq.edge)?),
            )
        } else {
            (None, None)
        };
        let mut record = MonitorOutput {
            t: frame.t,
            z_mean: pred.z_mean,
            z_std: pred.z_std,
            epistemic_median: epi.median(),
            latency_ms: 0.0,
            mean_field,
            epistemic_field,
        };
        record.latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let text = serde_json::to_string(&record)?;
        writeln!(output, "{text}").and_then(|_| output.flush()).map_err(|e| ShmError::io("<output>", e))?;
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
    }

    let mut sorted = latencies.clone();
    sorted.sort_by(f64::total_cmp);
    let summary = MonitorSummary {
        frames: latencies.len(),
        skipped,
        mean_latency_ms: if latencies.is_empty() {
            f64::NAN
        } else {
            latencies.iter().sum::<f64>() / latencies.len() as f64
        },
        p95_latency_ms: percentile(&sorted, 0.95),
        max_latency_ms: sorted.last().copied().unwrap_or(f64::NAN),
    };
    info!(
        "monitor: {} frames, {} skipped, mean {:.2} ms, p95 {:.2} ms",
        summary.frames, summary.skipped, summary.mean_latency_ms, summary.p95_latency_ms
    );
    Ok(summary)
}
