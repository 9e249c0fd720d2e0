//! Training-size study: how the learned noise scales and the uncertainty maps
//! change as the number of training frames per specimen grows.
//!
//! The study generates its own dataset under `study/`, fits one basis on the
//! largest pool so every size predicts the same coefficients, then runs
//! pre-training and posterior sampling per size and evaluates one fixed test
//! frame.

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Result, ShmError};
use crate::io;
use crate::pipeline::{self, specimen_id, Split};
use crate::uq::{aleatoric_field, epistemic_field, histogram, Predictor, UncertaintyField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRun {
    pub size: usize,
    pub n_training_frames: usize,
    pub sigma_hat: Vec<f64>,
    pub aleatoric_median: f64,
    pub epistemic_median: f64,
    pub aleatoric_histogram: Histogram,
    pub epistemic_histogram: Histogram,
    pub acceptance_rate: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub probe: String,
    pub probe_frame: usize,
    pub hmc_samples: usize,
    pub runs: Vec<StudyRun>,
}

impl StudyReport {
    pub fn run(&self, size: usize) -> Option<&StudyRun> {
        self.runs.iter().find(|r| r.size == size)
    }

    /// Largest per-mode relative change of the noise scales between two sizes.
    pub fn max_sigma_change(&self, from: usize, to: usize) -> Option<f64> {
        let (a, b) = (self.run(from)?, self.run(to)?);
        a.sigma_hat
            .iter()
            .zip(&b.sigma_hat)
            .map(|(x, y)| (y - x).abs() / x)
            .reduce(f64::max)
    }

    /// Adjacent pairs (in size order) where the epistemic median increased.
    pub fn epistemic_inversions(&self) -> usize {
        self.runs
            .windows(2)
            .filter(|w| w[1].epistemic_median > w[0].epistemic_median)
            .count()
    }
}

/// Configuration the study uses for its own data and artifacts.
pub fn study_config(cfg: &PipelineConfig) -> PipelineConfig {
    let mut sub = cfg.clone();
    sub.output_dir = cfg.study_dir();
    sub.data.frames_per_experiment = cfg.study.frames_per_experiment;
    if let Some(n) = cfg.study.hmc_samples {
        sub.hmc.n_samples = n;
    }
    sub
}

struct FieldPair {
    aleatoric: UncertaintyField,
    epistemic: UncertaintyField,
}

pub fn datasize_study(cfg: &PipelineConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let sub = study_config(cfg);
    let study = &cfg.study;
    let mut sizes = study.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let largest = *sizes.last().expect("validated nonempty");
    let per_specimen = (sub.data.experiments_per_specimen - sub.data.test_experiments) * sub.data.frames_per_experiment;
    if largest > per_specimen {
        return Err(ShmError::Config(format!(
            "study size {largest} exceeds the {per_specimen} training frames per specimen"
        )));
    }

    pipeline::gen_data(&sub)?;
    let specimens = pipeline::load_specimens(&sub)?;
    let probe_id = specimen_id(study.probe_specimen);
    let probe_specimen = specimens
        .iter()
        .find(|s| s.record.id == probe_id)
        .ok_or_else(|| ShmError::Config(format!("probe specimen {probe_id} is not generated")))?;
    let probe = *probe_specimen
        .split_frames(Split::Test)
        .get(study.probe_frame)
        .ok_or_else(|| ShmError::Config(format!("probe frame {} is out of range", study.probe_frame)))?;

    let grid = (sub.data.specimen.rows, sub.data.specimen.cols);
    let full = pipeline::training_pool(&specimens, Some(largest))?;
    let (basis, _) = pipeline::fit_basis(&full, sub.pca.k, sub.pca.cev_threshold, grid)?;
    let basis_text = basis.to_json()?;
    let basis_fp = io::sha256_hex(basis_text.as_bytes());
    io::write_text(&sub.output_dir.join("basis.json"), &basis_text)?;

    let mut partial = Vec::new();
    for &size in &sizes {
        let label = format!("study size {size}");
        let pool = pipeline::training_pool(&specimens, Some(size)).map_err(|e| e.context(&label))?;
        let (model, _) = pipeline::pretrain_on(&sub, &pool, &basis, &basis_fp).map_err(|e| e.context(&label))?;
        let ensemble = pipeline::sample_on(&sub, &pool, &basis, &model, &sub.hmc).map_err(|e| e.context(&label))?;
        let predictor = Predictor {
            arch: &model.architecture,
            scaling: &model.input_scaling,
            ensemble: &ensemble,
        };
        let pred = predictor.predict(&probe.gauges).map_err(|e| e.context(&label))?;
        let sigma_hat = model.params().sigma_hat();
        let fields = FieldPair {
            aleatoric: aleatoric_field(&sigma_hat, &basis, sub.uq.mode, sub.uq.space)?,
            epistemic: epistemic_field(&pred.z_std, &basis, sub.uq.mode, sub.uq.space)?,
        };
        info!(
            "{label}: epistemic median {:.3e}, acceptance {:.3}",
            fields.epistemic.median(),
            ensemble.diagnostics.acceptance_rate
        );
        partial.push((size, pool.len(), sigma_hat, fields, ensemble.diagnostics));
    }

    // Shared bin edges so histograms are comparable across sizes.
    let upper = |pick: fn(&FieldPair) -> &UncertaintyField| {
        partial
            .iter()
            .flat_map(|p| pick(&p.3).values.iter().copied())
            .fold(0.0_f64, f64::max)
            .max(f64::MIN_POSITIVE)
    };
    let ale_hi = upper(|f| &f.aleatoric);
    let epi_hi = upper(|f| &f.epistemic);
    let bins = study.histogram_bins;

    let mut runs = Vec::new();
    for (size, n, sigma_hat, fields, diag) in partial {
        let hist = |f: &UncertaintyField, hi: f64| Histogram {
            lo: 0.0,
            hi,
            counts: histogram(&f.values, 0.0, hi, bins),
        };
        let header: Vec<String> = vec!["row".into(), "col".into(), "aleatoric".into(), "epistemic".into()];
        io::write_csv(
            &sub.output_dir.join(format!("fields_{size}.csv")),
            &header,
            (0..fields.aleatoric.values.len()).map(|i| {
                let cols = fields.aleatoric.cols;
                vec![
                    (i / cols) as f64,
                    (i % cols) as f64,
                    fields.aleatoric.values[i],
                    fields.epistemic.values[i],
                ]
            }),
        )?;
        runs.push(StudyRun {
            size,
            n_training_frames: n,
            aleatoric_median: fields.aleatoric.median(),
            epistemic_median: fields.epistemic.median(),
            aleatoric_histogram: hist(&fields.aleatoric, ale_hi),
            epistemic_histogram: hist(&fields.epistemic, epi_hi),
            acceptance_rate: diag.acceptance_rate,
            step_size: diag.step_size.frozen,
            sigma_hat,
        });
    }

    let k = basis.k();
    let mut header = vec!["size".to_string()];
    header.extend((1..=k).map(|j| format!("sigma{j}")));
    io::write_csv(
        &sub.output_dir.join("sigma_hat.csv"),
        &header,
        runs.iter()
            .map(|r| std::iter::once(r.size as f64).chain(r.sigma_hat.iter().copied()).collect()),
    )?;
    for (which, hi) in [("aleatoric", ale_hi), ("epistemic", epi_hi)] {
        let width = hi / bins as f64;
        io::write_csv(
            &sub.output_dir.join(format!("histogram_{which}.csv")),
            &std::iter::once("bin_lo".to_string())
                .chain(std::iter::once("bin_hi".to_string()))
                .chain(runs.iter().map(|r| format!("size_{}", r.size)))
                .collect::<Vec<_>>(),
            (0..bins).map(|b| {
                let mut row = vec![b as f64 * width, (b + 1) as f64 * width];
                for r in &runs {
                    let h = if which == "aleatoric" {
                        &r.aleatoric_histogram
                    } else {
                        &r.epistemic_histogram
                    };
                    row.push(h.counts[b] as f64);
                }
                row
            }),
        )?;
    }

    let report = StudyReport {
        probe: probe_id,
        probe_frame: study.probe_frame,
        hmc_samples: sub.hmc.n_samples,
        runs,
    };
    io::write_json(&sub.output_dir.join("report.json"), &report)?;
    Ok(report)
}
