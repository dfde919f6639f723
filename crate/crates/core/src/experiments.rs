//! Multi-run experiments: seeded training fan-out, noise robustness sweeps,
//! learning-rate × λ sensitivity sweeps and five-run accuracy summaries.
//!
//! Runs are independent and may execute concurrently; every run is itself
//! single-threaded. Output rows are always assembled in a fixed order, so
//! CSVs do not depend on scheduling.

use sha2::{Digest, Sha256};

use crate::data::noise::{GaussianScale, NoiseKind, NoiseSpec};
use crate::data::{Dataset, Sample};
use crate::exec::Exec;
use crate::model::{EncoderConfig, ModelParams, Variant};
use crate::rng;
use crate::train::{self, Evaluation, TrainConfig, TrainRecord};
use crate::{Error, Result};

/// Seeds of the five-run protocol.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const RUNS_PER_REPORT: usize = 5;
pub const DEFAULT_LEARNING_RATES: [f64; 2] = [1e-4, 1e-3];
pub const DEFAULT_LAMBDAS: [f64; 4] = [0.0, 0.01, 0.1, 1.0];

/// Short hex digest of a training configuration (seed excluded).
pub fn config_digest(config: &TrainConfig, model: &EncoderConfig) -> String {
    let unseeded = TrainConfig {
        seed: 0,
        ..config.clone()
    };
    let text = serde_json::to_string(&(unseeded, model)).expect("plain data serializes");
    let hash = Sha256::digest(text.as_bytes());
    hash[..6].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub variant: Variant,
    pub config_digest: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
}

impl RunReport {
    /// `mean ± std | min`, e.g. `0.900 ± 7.5e-4 | 0.900`.
    pub fn format_row(&self) -> String {
        format!("{:.3} ± {:.1e} | {:.3}", self.mean, self.std, self.min)
    }
}

pub fn aggregate_report(
    variant: Variant,
    config_digest: &str,
    accuracies: &[f64],
) -> Result<RunReport> {
    if accuracies.len() != RUNS_PER_REPORT {
        return Err(Error::input(format!(
            "a report needs exactly {RUNS_PER_REPORT} accuracies, got {}",
            accuracies.len()
        )));
    }
    if accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::input("accuracies must lie in [0, 1]"));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n;
    let min = accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(RunReport {
        variant,
        config_digest: config_digest.to_string(),
        accuracies: accuracies.to_vec(),
        mean,
        std: var.sqrt(),
        min,
    })
}

/// Trains one model per config, concurrently under `exec`.
pub fn train_many(
    configs: &[TrainConfig],
    model: &EncoderConfig,
    data: &Dataset,
    exec: Exec,
) -> Vec<Result<(ModelParams, TrainRecord)>> {
    exec.map(configs, |c| train::train(c, model, &data.train, &data.val))
}

#[derive(Debug, Clone)]
pub struct NamedModel {
    pub name: String,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub model: String,
    pub variant: Variant,
    pub kind: NoiseKind,
    pub level: f64,
    pub seed: u64,
    pub accuracy: f64,
}

pub const ROBUSTNESS_HEADER: &str = "model,variant,noise_kind,level,seed,accuracy";

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = format!("{ROBUSTNESS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model, r.variant, r.kind, r.level, r.seed, r.accuracy
        ));
    }
    out
}

/// Corrupts every test image at every `(level, seed)` and scores every model.
///
/// Image `i` under noise seed `s` uses stream `derive_seed(s, i)` at every
/// level, so levels differ only in strength, not in the random draw. Rows are
/// ordered by model, then level, then seed.
pub fn robustness_sweep(
    models: &[NamedModel],
    kind: NoiseKind,
    levels: &[f64],
    seeds: &[u64],
    scale: GaussianScale,
    test: &[Sample],
    exec: Exec,
) -> Result<Vec<RobustnessRow>> {
    if test.is_empty() {
        return Err(Error::config(
            "robustness sweep needs a nonempty test split",
        ));
    }
    for &level in levels {
        NoiseSpec {
            kind,
            level,
            seed: 0,
            scale,
        }
        .validate()?;
    }
    let cells: Vec<(usize, usize)> = (0..levels.len())
        .flat_map(|l| (0..seeds.len()).map(move |s| (l, s)))
        .collect();
    let scored: Vec<Result<Vec<Evaluation>>> = exec.map(&cells, |&(l, s)| {
        let noisy: Vec<Sample> = test
            .iter()
            .enumerate()
            .map(|(i, sample)| {
                let spec = NoiseSpec {
                    kind,
                    level: levels[l],
                    seed: rng::derive_seed(seeds[s], i as u64),
                    scale,
                };
                let raw = spec.apply(&sample.raw)?;
                Ok(Sample::new(
                    sample.path.clone(),
                    sample.label,
                    raw,
                    sample.cue,
                ))
            })
            .collect::<Result<_>>()?;
        models
            .iter()
            .map(|m| train::evaluate(&m.params, &noisy, Exec::Sequential))
            .collect()
    });
    let scored = scored.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(models.len() * cells.len());
    for (mi, m) in models.iter().enumerate() {
        for (ci, &(l, s)) in cells.iter().enumerate() {
            rows.push(RobustnessRow {
                model: m.name.clone(),
                variant: m.params.variant(),
                kind,
                level: levels[l],
                seed: seeds[s],
                accuracy: scored[ci][mi].accuracy,
            });
        }
    }
    Ok(rows)
}

/// Robustness sweep over per-seed model sets: the models of entry `(s, ms)`
/// are scored under noise seed `s` only. With one masked and one baseline
/// model per training seed this averages over training runs as well as noise
/// draws. Rows are ordered by model name, then level, then seed.
pub fn paired_robustness_sweep(
    runs: &[(u64, Vec<NamedModel>)],
    kind: NoiseKind,
    levels: &[f64],
    scale: GaussianScale,
    test: &[Sample],
    exec: Exec,
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::new();
    for (seed, models) in runs {
        rows.extend(robustness_sweep(
            models,
            kind,
            levels,
            &[*seed],
            scale,
            test,
            exec,
        )?);
    }
    let level_rank = |l: f64| levels.iter().position(|&x| x == l).unwrap_or(usize::MAX);
    let seed_rank = |s: u64| runs.iter().position(|r| r.0 == s).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then(level_rank(a.level).cmp(&level_rank(b.level)))
            .then(seed_rank(a.seed).cmp(&seed_rank(b.seed)))
    });
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    pub test_accuracy: f64,
}

pub const SENSITIVITY_HEADER: &str = "lr,lambda,seed,test_accuracy";

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut out = format!("{SENSITIVITY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.learning_rate, r.lambda, r.seed, r.test_accuracy
        ));
    }
    out
}

/// Trains one masked model per `(lr, λ, seed)` cell, using `base` for every
/// other hyperparameter. Rows follow grid order: lr, then λ, then seed.
pub fn sensitivity_sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    model: &EncoderConfig,
    data: &Dataset,
    exec: Exec,
) -> Result<Vec<SensitivityRow>> {
    if grid.learning_rates.is_empty() || grid.lambdas.is_empty() || grid.seeds.is_empty() {
        return Err(Error::config(
            "sensitivity grid must be nonempty on every axis",
        ));
    }
    let mut configs = Vec::new();
    for &learning_rate in &grid.learning_rates {
        for &lambda in &grid.lambdas {
            for &seed in &grid.seeds {
                configs.push(TrainConfig {
                    learning_rate,
                    lambda,
                    seed,
                    variant: Variant::Masked,
                    ..base.clone()
                });
            }
        }
    }
    let results = exec.map(&configs, |c| -> Result<f64> {
        let (params, _) = train::train(c, model, &data.train, &data.val)?;
        Ok(train::evaluate(&params, &data.test, Exec::Sequential)?.accuracy)
    });
    configs
        .iter()
        .zip(results)
        .map(|(c, acc)| {
            Ok(SensitivityRow {
                learning_rate: c.learning_rate,
                lambda: c.lambda,
                seed: c.seed,
                test_accuracy: acc?,
            })
        })
        .collect()
}
