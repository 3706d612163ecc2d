//! End-to-end identification: from a simulator (`identify_direct`) or from a
//! single measured record through a NARX surrogate (`identify_from_sequence`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::{identify_from_markov_with, OrderChoice, RealizationResult, DEFAULT_TOLERANCE};
use crate::io::Dataset;
use crate::narx::{
    augment_zero_response, denormalize_model, detrend, mpe, train_narx, NarxSpec, TrainConfig,
    TrainedNarx, TrendStats,
};
use crate::recovery::{
    generate_experiments, recover_markov, Excitation, IoSource, MarkovRecovery,
    RecoveryDiagnostics,
};
use crate::system::DiscreteBilinearSystem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Experiment length `L`, which is also the Markov depth.
    pub depth: usize,
    /// Experiment count `d`.
    pub experiments: usize,
    pub excitation_mean: f64,
    pub excitation_std: f64,
    pub tol: f64,
    /// Fixed realization order; overrides `tol`.
    pub order: Option<usize>,
    pub seed: u64,
    pub narx: NarxSpec,
    pub train: TrainConfig,
    /// Number of leading samples used for detrending and NARX training.
    pub train_prefix: usize,
    pub zero_response: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            depth: 10,
            experiments: 512,
            excitation_mean: 0.0,
            excitation_std: 1.0,
            tol: DEFAULT_TOLERANCE,
            order: None,
            seed: 0,
            narx: NarxSpec::default(),
            train: TrainConfig::default(),
            train_prefix: 1000,
            zero_response: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Contract(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.experiments == 0 {
            return Err(Error::Contract("need at least one experiment".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Contract(format!("tol must lie in (0, 1), got {}", self.tol)));
        }
        if !(self.excitation_std > 0.0) || !self.excitation_mean.is_finite() {
            return Err(Error::Contract("excitation needs finite mean and positive std".into()));
        }
        if self.order == Some(0) {
            return Err(Error::Contract("order override must be positive".into()));
        }
        Ok(())
    }

    pub fn excitation(&self) -> Excitation {
        Excitation::Gaussian {
            mean: self.excitation_mean,
            std: self.excitation_std,
        }
    }

    pub fn order_choice(&self) -> OrderChoice {
        match self.order {
            Some(r) => OrderChoice::Fixed(r),
            None => OrderChoice::Tolerance(self.tol),
        }
    }
}

/// Harmonic test input `u_k = 1/(k+1)`.
pub fn harmonic_input(len: usize) -> Vec<f64> {
    (0..len).map(|k| 1.0 / (k as f64 + 1.0)).collect()
}

/// Seeded Gaussian sequence, independent of the experiment streams.
pub fn gaussian_input(len: usize, mean: f64, std: f64, seed: u64) -> Result<Vec<f64>> {
    let normal = Normal::new(mean, std)
        .map_err(|e| Error::Contract(format!("invalid Gaussian input: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| normal.sample(&mut rng)).collect())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖y_model - y_ref‖₂ / ‖y_ref‖₂`.
pub fn relative_error(y_ref: &[f64], y_model: &[f64]) -> f64 {
    let num: f64 = y_ref.iter().zip(y_model).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = y_ref.iter().map(|a| a * a).sum();
    (num / den).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectReport {
    pub order: usize,
    pub singular_values: Vec<f64>,
    pub diagnostics: RecoveryDiagnostics,
    /// Max abs Markov error against the true system, when known.
    pub markov_error: Option<f64>,
    /// Max abs response deviation under `u_k = 1/(k+1)`, 50 steps.
    pub harmonic_error: Option<f64>,
    /// Relative output error on a fresh 200-sample Gaussian input.
    pub validation_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DirectOutcome {
    pub recovery: MarkovRecovery,
    pub realization: RealizationResult,
    pub report: DirectReport,
}

/// Experiments → Markov recovery → Hankel realization. Passing the true
/// system enables the error fields of the report.
pub fn identify_direct<S: IoSource + ?Sized>(
    source: &S,
    truth: Option<&DiscreteBilinearSystem>,
    cfg: &PipelineConfig,
) -> Result<DirectOutcome> {
    cfg.validate()?;
    let batch = generate_experiments(
        source,
        cfg.experiments,
        cfg.depth,
        &cfg.excitation(),
        cfg.seed,
    )?;
    let recovery = recover_markov(&batch)?;
    let realization = identify_from_markov_with(&recovery.markov, cfg.order_choice())?;
    log::info!(
        "recovered depth {} Markov sequence (rank {}/{}, residual {:.3e}); order {}",
        cfg.depth,
        recovery.diagnostics.rank,
        recovery.diagnostics.unknowns,
        recovery.diagnostics.residual,
        realization.order
    );

    let (mut markov_error, mut harmonic_error, mut validation_error) = (None, None, None);
    if let Some(truth) = truth {
        let model = &realization.system;
        markov_error = Some(
            model
                .markov_oracle(cfg.depth)
                .max_abs_diff(&truth.markov_oracle(cfg.depth)),
        );
        let u = harmonic_input(50);
        harmonic_error = Some(max_abs_diff(&truth.simulate(&u)?, &model.simulate(&u)?));
        let u = gaussian_input(200, cfg.excitation_mean, cfg.excitation_std, cfg.seed ^ 0x5eed)?;
        validation_error = Some(relative_error(&truth.simulate(&u)?, &model.simulate(&u)?));
    }
    let report = DirectReport {
        order: realization.order,
        singular_values: realization.singular_values.clone(),
        diagnostics: recovery.diagnostics.clone(),
        markov_error,
        harmonic_error,
        validation_error,
    };
    Ok(DirectOutcome {
        recovery,
        realization,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub order: usize,
    pub singular_values: Vec<f64>,
    pub diagnostics: RecoveryDiagnostics,
    pub trend: TrendStats,
    pub training_samples: usize,
    pub narx_validation_mse: f64,
    pub narx_closed_loop_rmse: f64,
    /// MPE of the physical-units model over the whole dataset.
    pub mpe: f64,
    /// MPE of the NARX surrogate itself over the whole dataset.
    pub narx_mpe: f64,
}

#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub narx: TrainedNarx,
    pub recovery: MarkovRecovery,
    /// Realization in normalized units.
    pub realization: RealizationResult,
    /// Affine model in physical units.
    pub model: DiscreteBilinearSystem,
    pub report: SequenceReport,
}

/// Detrend → zero-response augmentation → NARX training on the prefix →
/// closed-loop surrogate experiments → realization → de-normalization.
pub fn identify_from_sequence(dataset: &Dataset, cfg: &PipelineConfig) -> Result<SequenceOutcome> {
    identify_from_sequence_with::<NormalizedSource>(dataset, cfg, None)
}

/// As [`identify_from_sequence`], but experiments run against `oracle` instead
/// of the trained network when one is given. Substituting the true system
/// isolates the surrogate's share of the final error.
pub fn identify_from_sequence_with<O>(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    oracle: Option<O>,
) -> Result<SequenceOutcome>
where
    O: IoSource,
{
    cfg.validate()?;
    let prefix = cfg.train_prefix.min(dataset.len());
    let lag = cfg.narx.input_lags.max(cfg.narx.output_lags);
    if prefix <= lag + 1 {
        return Err(Error::Contract(format!(
            "{prefix} training samples cannot support {lag} lags"
        )));
    }
    let (u_n, y_n, trend) = detrend(&dataset.u[..prefix], &dataset.y[..prefix])?;
    let series = augment_zero_response(&u_n, &y_n, cfg.zero_response)?;
    let narx = train_narx(&series, &cfg.narx, trend, &cfg.train)?;
    log::info!(
        "NARX trained for {} epochs, validation MSE {:.3e}",
        narx.report.epochs_run,
        narx.report.validation_mse
    );

    let batch = match &oracle {
        Some(source) => generate_experiments(source, cfg.experiments, cfg.depth, &cfg.excitation(), cfg.seed)?,
        None => generate_experiments(&narx.model, cfg.experiments, cfg.depth, &cfg.excitation(), cfg.seed)?,
    };
    let recovery = recover_markov(&batch)?;
    let realization = identify_from_markov_with(&recovery.markov, cfg.order_choice())?;
    let model = denormalize_model(&realization.system, &trend)?;

    let y_model = model.simulate(&dataset.u)?;
    let model_mpe = mpe(&dataset.y, &y_model)?;
    let y_narx = trend.denormalize_output(&narx.model.closed_loop(&trend.normalize_input(&dataset.u))?);
    let narx_mpe = mpe(&dataset.y, &y_narx)?;
    log::info!("order {} model MPE {model_mpe:.4}%, NARX MPE {narx_mpe:.4}%", realization.order);

    let report = SequenceReport {
        order: realization.order,
        singular_values: realization.singular_values.clone(),
        diagnostics: recovery.diagnostics.clone(),
        trend,
        training_samples: prefix,
        narx_validation_mse: narx.report.validation_mse,
        narx_closed_loop_rmse: narx.report.closed_loop_rmse,
        mpe: model_mpe,
        narx_mpe,
    };
    Ok(SequenceOutcome {
        narx,
        recovery,
        realization,
        model,
        report,
    })
}

/// The true system viewed through the normalization: `u_n ↦ (y(σ_u u_n + ū) - ȳ)/σ_y`.
pub struct NormalizedSource<'a> {
    pub system: &'a DiscreteBilinearSystem,
    pub trend: TrendStats,
}

impl IoSource for NormalizedSource<'_> {
    fn respond(&self, u_n: &[f64]) -> Result<Vec<f64>> {
        let y = self.system.simulate(&self.trend.denormalize_input(u_n))?;
        Ok(self.trend.normalize_output(&y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub mpe: f64,
    pub max_abs: f64,
    pub rms: f64,
}

/// One metrics row per model trace, in the given order.
pub fn compare(y_ref: &[f64], traces: &[(&str, &[f64])]) -> Result<Vec<Metrics>> {
    traces
        .iter()
        .map(|(name, y)| {
            let mpe = mpe(y_ref, y)?;
            let rms = (y_ref.iter().zip(*y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / y_ref.len() as f64)
                .sqrt();
            Ok(Metrics {
                name: name.to_string(),
                mpe,
                max_abs: max_abs_diff(y_ref, y),
                rms,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::toy_system;

    #[test]
    fn toy_direct_identification() {
        let cfg = PipelineConfig {
            depth: 4,
            experiments: 8,
            ..PipelineConfig::default()
        };
        let out = identify_direct(&toy_system(), Some(&toy_system()), &cfg).unwrap();
        assert_eq!(out.report.order, 2);
        assert!(out.report.harmonic_error.unwrap() <= 1e-8);
        assert!(out.report.markov_error.unwrap() <= 1e-10);
    }

    #[test]
    fn too_few_experiments_are_rank_deficient() {
        let cfg = PipelineConfig {
            depth: 4,
            experiments: 1,
            ..PipelineConfig::default()
        };
        let err = identify_direct(&toy_system(), None, &cfg).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }), "{err:?}");
    }

    #[test]
    fn config_validation() {
        let bad = PipelineConfig {
            tol: 1.0,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            depth: 1,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn compare_metrics() {
        let y: Vec<f64> = (0..=10).map(f64::from).collect();
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.5).collect();
        let rows = compare(&y, &[("same", &y), ("shifted", &shifted)]).unwrap();
        assert_eq!(rows[0].name, "same");
        assert_eq!((rows[0].mpe, rows[0].max_abs, rows[0].rms), (0.0, 0.0, 0.0));
        assert!((rows[1].mpe - 5.0).abs() < 1e-12);
        assert!((rows[1].max_abs - 0.5).abs() < 1e-12);
        assert!(compare(&y, &[("short", &y[..3])]).is_err());
    }

    #[test]
    fn short_dataset_rejected() {
        let ds = Dataset::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 2.0], None, "tiny").unwrap();
        assert!(matches!(
            identify_from_sequence(&ds, &PipelineConfig::default()),
            Err(Error::Contract(_))
        ));
    }
}
