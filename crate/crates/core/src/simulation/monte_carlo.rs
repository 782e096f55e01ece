//! Repeated generate-estimate-score loop with Monte Carlo standard errors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{generate, oracle_moments, DgpSpec, SimulationError};
use crate::bootstrap::{bootstrap_fit_many, BootstrapConfig};
use crate::data::StudyDataset;
use crate::diagnostics::slope_test;
use crate::regression::{fit_model, target_effects, DesignSpec, EffectTarget, Effects, HcKind};
use crate::rng::{substream, substream_seed};
use crate::strata::{all_site_moments, MomentOptions, SiteMoments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// OLS on estimated site moments.
    Naive,
    /// Bootstrap-combined OLS on estimated site moments.
    Boot,
    /// OLS on the true site parameters.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjustment {
    Unadjusted,
    Adjusted,
    Interaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectName {
    IttLc,
    IttHc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    pub adjustments: Vec<Adjustment>,
    /// Bootstrap replicates per Monte Carlo replicate.
    pub bootstrap_replicates: usize,
    pub target: EffectTarget,
    pub hc: HcKind,
    pub level: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            reps: 500,
            seed: 0,
            estimators: vec![Estimator::Naive, Estimator::Boot, Estimator::Oracle],
            adjustments: vec![Adjustment::Unadjusted, Adjustment::Adjusted, Adjustment::Interaction],
            bootstrap_replicates: 100,
            target: EffectTarget::Population,
            hc: HcKind::Hc1,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub estimator: Estimator,
    pub adjustment: Adjustment,
    pub effect: EffectName,
    /// Replicates with an estimate.
    pub n: usize,
    pub failures: usize,
    pub bias: f64,
    pub bias_mcse: f64,
    /// Root mean squared deviation of the errors around their mean.
    pub empirical_se: f64,
    pub empirical_se_mcse: f64,
    pub mean_estimated_se: f64,
    pub mean_estimated_se_mcse: f64,
    pub rmse: f64,
    pub rmse_mcse: f64,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub se_ratio: f64,
    pub se_ratio_mcse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub dgp: DgpSpec,
    pub config: MonteCarloConfig,
    pub reps: usize,
    /// Mean of the per-replicate population truths.
    pub mean_truth_lc: f64,
    pub mean_truth_hc: f64,
    pub cells: Vec<CellMetrics>,
}

impl MonteCarloReport {
    pub fn cell(&self, e: Estimator, a: Adjustment, effect: EffectName) -> Option<&CellMetrics> {
        self.cells
            .iter()
            .find(|c| c.estimator == e && c.adjustment == a && c.effect == effect)
    }
}

/// One scored estimate.
#[derive(Debug, Clone, Copy)]
struct Score {
    error: f64,
    se: f64,
    covered: bool,
}

struct ReplicateScores {
    truth: (f64, f64),
    /// Indexed `[estimator][adjustment][effect]`, `None` on failure.
    scores: Vec<Vec<[Option<Score>; 2]>>,
}

fn specs(
    covariates: &[String],
    adjustments: &[Adjustment],
    cfg: &MonteCarloConfig,
) -> Result<Vec<DesignSpec>, SimulationError> {
    let cov = covariates
        .first()
        .ok_or_else(|| SimulationError::BadSpec("simulated data has no covariate".into()))?;
    adjustments
        .iter()
        .map(|a| {
            let s = match a {
                Adjustment::Unadjusted => Ok(DesignSpec::unadjusted()),
                Adjustment::Adjusted => DesignSpec::adjusted(covariates, &[cov.as_str()]),
                Adjustment::Interaction => DesignSpec::interaction(covariates, cov, &[]),
            };
            s.map(|s| s.with_hc(cfg.hc).with_target(cfg.target))
                .map_err(|e| SimulationError::BadSpec(e.to_string()))
        })
        .collect()
}

fn fit_all(moments: &[SiteMoments], specs: &[DesignSpec]) -> Vec<Option<Effects>> {
    specs
        .iter()
        .map(|s| fit_model(moments, s).and_then(|f| target_effects(&f, moments)).ok())
        .collect()
}

fn score(effects: Option<Effects>, truth: (f64, f64), z: f64) -> [Option<Score>; 2] {
    let one = |est: f64, se: f64, t: f64| {
        (est.is_finite() && se.is_finite()).then(|| Score {
            error: est - t,
            se,
            covered: (est - t).abs() <= z * se,
        })
    };
    match effects {
        None => [None, None],
        Some(e) => [
            one(e.itt_lc.estimate, e.itt_lc.se, truth.0),
            one(e.itt_hc.estimate, e.itt_hc.se, truth.1),
        ],
    }
}

fn run_replicate(
    spec: &DgpSpec,
    cfg: &MonteCarloConfig,
    template: Option<&StudyDataset>,
    r: usize,
    z: f64,
) -> Result<ReplicateScores, SimulationError> {
    let mut rng = substream(cfg.seed, &[r as u64, 0]);
    let sim = generate(spec, template, &mut rng)?;
    let truth = (sim.truth.itt_lc, sim.truth.itt_hc);
    let specs = specs(sim.dataset.covariate_names(), &cfg.adjustments, cfg)?;
    let opts = MomentOptions::default();
    let n_adj = specs.len();
    let scores = cfg
        .estimators
        .iter()
        .map(|est| {
            let effects: Vec<Option<Effects>> = match est {
                Estimator::Naive => match all_site_moments(&sim.dataset, true, &opts) {
                    Ok(set) => fit_all(&set.moments, &specs),
                    Err(_) => vec![None; n_adj],
                },
                Estimator::Oracle => fit_all(&oracle_moments(&sim.truth), &specs),
                Estimator::Boot => {
                    let bcfg = BootstrapConfig {
                        level: cfg.level,
                        ..BootstrapConfig::new(
                            cfg.bootstrap_replicates,
                            substream_seed(cfg.seed, &[r as u64, 1]),
                        )
                    };
                    match bootstrap_fit_many(&sim.dataset, &specs, &bcfg) {
                        Ok(results) => results.iter().map(|b| Some(combined_effects(b))).collect(),
                        Err(_) => vec![None; n_adj],
                    }
                }
            };
            effects.into_iter().map(|e| score(e, truth, z)).collect()
        })
        .collect();
    Ok(ReplicateScores { truth, scores })
}

fn combined_effects(b: &crate::bootstrap::BootstrapResult) -> Effects {
    use crate::regression::Effect;
    let e = |c: &crate::bootstrap::CombinedEstimate| Effect {
        estimate: c.point,
        se: c.total_se,
    };
    Effects {
        itt_lc: e(&b.itt_lc),
        itt_hc: e(&b.itt_hc),
        contrast: e(&b.contrast),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with `n - 1`.
fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn metrics(
    estimator: Estimator,
    adjustment: Adjustment,
    effect: EffectName,
    scores: &[Option<Score>],
) -> CellMetrics {
    let ok: Vec<Score> = scores.iter().flatten().copied().collect();
    let n = ok.len();
    let nf = n as f64;
    let errors: Vec<f64> = ok.iter().map(|s| s.error).collect();
    let ses: Vec<f64> = ok.iter().map(|s| s.se).collect();
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let bias = mean(&errors);
    let empirical_se = (errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / nf).sqrt();
    let rmse = mean(&sq).sqrt();
    let coverage = ok.iter().filter(|s| s.covered).count() as f64 / nf;
    let mean_estimated_se = mean(&ses);
    let bias_mcse = sd(&errors) / nf.sqrt();
    let empirical_se_mcse = empirical_se / (2.0 * (nf - 1.0)).sqrt();
    let mean_estimated_se_mcse = sd(&ses) / nf.sqrt();
    let se_ratio = mean_estimated_se / empirical_se;
    CellMetrics {
        estimator,
        adjustment,
        effect,
        n,
        failures: scores.len() - n,
        bias,
        bias_mcse,
        empirical_se,
        empirical_se_mcse,
        mean_estimated_se,
        mean_estimated_se_mcse,
        rmse,
        rmse_mcse: sd(&sq) / (2.0 * rmse * nf.sqrt()),
        coverage,
        coverage_mcse: (coverage * (1.0 - coverage) / nf).sqrt(),
        se_ratio,
        se_ratio_mcse: se_ratio
            * ((mean_estimated_se_mcse / mean_estimated_se).powi(2)
                + (empirical_se_mcse / empirical_se).powi(2))
            .sqrt(),
    }
}

/// Runs `cfg.reps` replicates of generate, estimate and score. Each
/// replicate draws from its own substream of `cfg.seed`, so the report does
/// not depend on thread scheduling. The calibrated process needs a template.
pub fn run_monte_carlo(
    spec: &DgpSpec,
    cfg: &MonteCarloConfig,
    template: Option<&StudyDataset>,
) -> Result<MonteCarloReport, SimulationError> {
    spec.validate()?;
    if cfg.reps < 2 {
        return Err(SimulationError::BadSpec("at least 2 Monte Carlo replicates".into()));
    }
    if cfg.estimators.contains(&Estimator::Boot) && cfg.bootstrap_replicates < 2 {
        return Err(SimulationError::BadSpec("at least 2 bootstrap replicates".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(SimulationError::BadSpec("level must lie in (0, 1)".into()));
    }
    let z = Normal::standard().inverse_cdf(0.5 + cfg.level / 2.0);
    let reps: Vec<ReplicateScores> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_replicate(spec, cfg, template, r, z))
        .collect::<Result<_, _>>()?;

    let mut cells = Vec::new();
    for (i, &est) in cfg.estimators.iter().enumerate() {
        for (j, &adj) in cfg.adjustments.iter().enumerate() {
            for (k, effect) in [EffectName::IttLc, EffectName::IttHc].into_iter().enumerate() {
                let scores: Vec<Option<Score>> = reps.iter().map(|r| r.scores[i][j][k]).collect();
                cells.push(metrics(est, adj, effect, &scores));
            }
        }
    }
    let nf = reps.len() as f64;
    Ok(MonteCarloReport {
        dgp: spec.clone(),
        config: cfg.clone(),
        reps: cfg.reps,
        mean_truth_lc: reps.iter().map(|r| r.truth.0).sum::<f64>() / nf,
        mean_truth_hc: reps.iter().map(|r| r.truth.1).sum::<f64>() / nf,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCheck {
    pub reps: usize,
    pub rejections: usize,
    pub rate: f64,
    /// Binomial standard error of `rate` at the nominal 5%.
    pub nominal_se: f64,
}

/// Rejection rate of the slope test applied to the structural site errors
/// `LATE_k - (1 - phi_k) ITT_lc - phi_k ITT_hc` against estimated `phi`.
/// Under a process whose effect noise is uncorrelated with `phi` the rate
/// should be near 5%.
pub fn slope_test_level(
    spec: &DgpSpec,
    reps: usize,
    seed: u64,
    template: Option<&StudyDataset>,
) -> Result<LevelCheck, SimulationError> {
    spec.validate()?;
    let opts = MomentOptions::default();
    let outcomes: Vec<Option<bool>> = (0..reps)
        .into_par_iter()
        .map(|r| -> Result<Option<bool>, SimulationError> {
            let mut rng = substream(seed, &[r as u64, 2]);
            let sim = generate(spec, template, &mut rng)?;
            let set = all_site_moments(&sim.dataset, true, &opts)?;
            let (mut eta, mut phi) = (Vec::new(), Vec::new());
            for m in &set.moments {
                let t = sim
                    .truth
                    .sites
                    .iter()
                    .find(|s| s.site_id == m.site_id)
                    .expect("moments come from simulated sites");
                eta.push(t.late - (1.0 - t.phi) * spec.itt_lc - t.phi * spec.itt_hc);
                phi.push(m.phi);
            }
            Ok(slope_test(&eta, &phi).ok().map(|t| t.violation))
        })
        .collect::<Result<_, _>>()?;
    let done: Vec<bool> = outcomes.into_iter().flatten().collect();
    let rejections = done.iter().filter(|&&v| v).count();
    let n = done.len();
    Ok(LevelCheck {
        reps: n,
        rejections,
        rate: rejections as f64 / n as f64,
        nominal_se: (0.05 * 0.95 / n as f64).sqrt(),
    })
}
