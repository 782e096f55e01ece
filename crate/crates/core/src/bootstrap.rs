//! Within-site case-resampling bootstrap of the full estimation pipeline,
//! combined across replicates with multiple-imputation rules.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{Arm, IndividualRecord, StudyDataset};
use crate::regression::{fit_model, target_effects, DesignSpec, Effects, RegressionError};
use crate::rng::substream;
use crate::strata::{
    all_site_moments, moment_set_from_sums, MomentOptions, SiteSums, StrataError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BootstrapError {
    #[error("all {0} bootstrap replicates failed")]
    AllReplicatesFailed(usize),
    #[error("{0} successful replicate(s); at least 2 are needed to combine")]
    TooFewReplicates(usize),
    #[error("confidence level must lie strictly between 0 and 1, got {0}")]
    BadLevel(f64),
    #[error("invalid bootstrap configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Strata(#[from] StrataError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DegeneratePolicy {
    /// Discard failed replicates and report how many.
    Drop,
    /// Redraw a failed replicate up to `max_attempts` times in total.
    Retry { max_attempts: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Preserve per-site arm counts.
    pub resample_within_arm: bool,
    pub degenerate_policy: DegeneratePolicy,
    pub moment_options: MomentOptions,
    /// Confidence level for the combined intervals.
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 500,
            seed: 0,
            resample_within_arm: true,
            degenerate_policy: DegeneratePolicy::Drop,
            moment_options: MomentOptions::default(),
            level: 0.95,
        }
    }
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BootstrapError> {
        if self.replicates < 2 {
            return Err(BootstrapError::BadConfig("at least 2 replicates".into()));
        }
        if let DegeneratePolicy::Retry { max_attempts } = self.degenerate_policy {
            if max_attempts < 1 {
                return Err(BootstrapError::BadConfig("max_attempts must be at least 1".into()));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(BootstrapError::BadLevel(self.level));
        }
        Ok(())
    }

    fn max_attempts(&self) -> u32 {
        match self.degenerate_policy {
            DegeneratePolicy::Drop => 1,
            DegeneratePolicy::Retry { max_attempts } => max_attempts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedEstimate {
    pub point: f64,
    pub within_var: f64,
    pub between_var: f64,
    pub total_se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_effective_replicates: usize,
}

impl CombinedEstimate {
    /// Rubin's rules over replicate estimates and their standard errors.
    pub fn from_replicates(
        estimates: &[f64],
        ses: &[f64],
        level: f64,
    ) -> Result<Self, BootstrapError> {
        let b = estimates.len();
        if b < 2 || ses.len() != b {
            return Err(BootstrapError::TooFewReplicates(b.min(ses.len())));
        }
        let bf = b as f64;
        let point = estimates.iter().sum::<f64>() / bf;
        let within_var = ses.iter().map(|s| s * s).sum::<f64>() / bf;
        let between_var = estimates.iter().map(|e| (e - point).powi(2)).sum::<f64>() / (bf - 1.0);
        let total_se = (within_var + (1.0 + 1.0 / bf) * between_var).sqrt();
        let mut out = Self {
            point,
            within_var,
            between_var,
            total_se,
            ci_low: point,
            ci_high: point,
            n_effective_replicates: b,
        };
        let (lo, hi) = confidence_interval(&out, level)?;
        out.ci_low = lo;
        out.ci_high = hi;
        Ok(out)
    }
}

/// `point -/+ z_{(1+level)/2} total_se`.
pub fn confidence_interval(c: &CombinedEstimate, level: f64) -> Result<(f64, f64), BootstrapError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(BootstrapError::BadLevel(level));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    if c.total_se == 0.0 {
        return Ok((c.point, c.point));
    }
    Ok((c.point - z * c.total_se, c.point + z * c.total_se))
}

/// Draws a site resample with replacement. With `within_arm` the treated and
/// control counts are preserved.
pub fn resample_site<R: Rng + ?Sized>(
    records: &[&IndividualRecord],
    within_arm: bool,
    rng: &mut R,
) -> Vec<IndividualRecord> {
    let mut out = Vec::with_capacity(records.len());
    if within_arm {
        for arm in Arm::ALL {
            let pool: Vec<&IndividualRecord> =
                records.iter().copied().filter(|r| r.arm == arm).collect();
            for _ in 0..pool.len() {
                out.push(pool[rng.random_range(0..pool.len())].clone());
            }
        }
    } else {
        for _ in 0..records.len() {
            out.push(records[rng.random_range(0..records.len())].clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEffects {
    pub replicate: usize,
    /// 1-based attempt that produced the estimate.
    pub attempt: u32,
    pub effects: Effects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub itt_lc: CombinedEstimate,
    pub itt_hc: CombinedEstimate,
    pub contrast: CombinedEstimate,
    /// Successful replicates in replicate order.
    pub replicates: Vec<ReplicateEffects>,
    /// Replicates that produced no estimate.
    pub failed_replicates: usize,
    /// Attempts that were redrawn under the retry policy.
    pub retried_attempts: usize,
    /// Attempts in which some originally usable site became degenerate.
    pub degenerate_attempts: usize,
}

impl BootstrapResult {
    pub fn combined(&self) -> [CombinedEstimate; 3] {
        [self.itt_lc, self.itt_hc, self.contrast]
    }
}

/// Per-site index pools, precomputed once for all replicates.
struct Pools<'a> {
    dataset: &'a StudyDataset,
    ids: Vec<&'a str>,
    /// `[site][arm]` record indices, or a single pooled list in slot 0.
    pools: Vec<[Vec<usize>; 2]>,
    within_arm: bool,
}

impl<'a> Pools<'a> {
    fn new(dataset: &'a StudyDataset, keep: &[&str], within_arm: bool) -> Self {
        let mut ids = Vec::new();
        let mut pools = Vec::new();
        for (id, idx) in dataset.site_index() {
            if !keep.contains(&id.as_str()) {
                continue;
            }
            let mut p: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
            for &i in idx {
                let slot = if within_arm {
                    dataset.records()[i].arm.index()
                } else {
                    0
                };
                p[slot].push(i);
            }
            ids.push(id.as_str());
            pools.push(p);
        }
        Self {
            dataset,
            ids,
            pools,
            within_arm,
        }
    }

    fn draw(&self, seed: u64, b: usize, attempt: u32, opts: &MomentOptions) -> Vec<SiteSums> {
        let n_cov = self.dataset.covariate_names().len();
        let recs = self.dataset.records();
        self.pools
            .iter()
            .enumerate()
            .map(|(s, p)| {
                let mut rng = substream(seed, &[b as u64, s as u64, attempt as u64]);
                let mut sums = SiteSums::new(n_cov);
                let slots = if self.within_arm { 2 } else { 1 };
                for pool in p.iter().take(slots) {
                    for _ in 0..pool.len() {
                        let i = pool[rng.random_range(0..pool.len())];
                        sums.add(&recs[i], opts.weighted);
                    }
                }
                sums
            })
            .collect()
    }
}

enum Attempt {
    Ok(Vec<Option<Effects>>),
    Failed { degenerate: bool },
}

fn run_attempt(
    pools: &Pools,
    specs: &[DesignSpec],
    cfg: &BootstrapConfig,
    b: usize,
    attempt: u32,
) -> Attempt {
    let sums = pools.draw(cfg.seed, b, attempt, &cfg.moment_options);
    let set = match moment_set_from_sums(&pools.ids, &sums, &cfg.moment_options, false) {
        Ok(s) => s,
        Err(_) => return Attempt::Failed { degenerate: false },
    };
    if !set.dropped.is_empty() {
        return Attempt::Failed { degenerate: false };
    }
    if set.moments.iter().any(|m| m.degenerate) {
        return Attempt::Failed { degenerate: true };
    }
    let fits: Vec<Option<Effects>> = specs
        .iter()
        .map(|spec| {
            fit_model(&set.moments, spec)
                .and_then(|f| target_effects(&f, &set.moments))
                .ok()
                .filter(|e| e.as_array().iter().all(|x| x.estimate.is_finite()))
        })
        .collect();
    if fits.iter().all(Option::is_some) || cfg.max_attempts() == 1 {
        Attempt::Ok(fits)
    } else {
        Attempt::Failed { degenerate: false }
    }
}

struct ReplicateOutcome {
    fits: Vec<Option<(u32, Effects)>>,
    retried: usize,
    degenerate: usize,
}

fn run_replicate(pools: &Pools, specs: &[DesignSpec], cfg: &BootstrapConfig, b: usize) -> ReplicateOutcome {
    let max = cfg.max_attempts();
    let mut degenerate = 0;
    for attempt in 1..=max {
        match run_attempt(pools, specs, cfg, b, attempt) {
            Attempt::Ok(fits) => {
                return ReplicateOutcome {
                    fits: fits.into_iter().map(|f| f.map(|e| (attempt, e))).collect(),
                    retried: (attempt - 1) as usize,
                    degenerate,
                }
            }
            Attempt::Failed { degenerate: d } => degenerate += d as usize,
        }
    }
    ReplicateOutcome {
        fits: vec![None; specs.len()],
        retried: max.saturating_sub(1) as usize,
        degenerate,
    }
}

/// Bootstraps several specifications on shared resamples. Sites that are
/// unusable in the original data are left out of every replicate. A
/// replicate fails when a site loses an arm or its compliers, or when a fit
/// fails; failures follow the configured policy.
pub fn bootstrap_fit_many(
    dataset: &StudyDataset,
    specs: &[DesignSpec],
    cfg: &BootstrapConfig,
) -> Result<Vec<BootstrapResult>, BootstrapError> {
    cfg.validate()?;
    for s in specs {
        s.validate()?;
    }
    let original = all_site_moments(dataset, true, &cfg.moment_options)?;
    let keep: Vec<&str> = original.moments.iter().map(|m| m.site_id.as_str()).collect();
    let pools = Pools::new(dataset, &keep, cfg.resample_within_arm);

    let outcomes: Vec<ReplicateOutcome> = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| run_replicate(&pools, specs, cfg, b))
        .collect();

    let retried: usize = outcomes.iter().map(|o| o.retried).sum();
    let degenerate: usize = outcomes.iter().map(|o| o.degenerate).sum();
    (0..specs.len())
        .map(|j| {
            let replicates: Vec<ReplicateEffects> = outcomes
                .iter()
                .enumerate()
                .filter_map(|(b, o)| {
                    o.fits[j].map(|(attempt, effects)| ReplicateEffects {
                        replicate: b,
                        attempt,
                        effects,
                    })
                })
                .collect();
            if replicates.is_empty() {
                return Err(BootstrapError::AllReplicatesFailed(cfg.replicates));
            }
            let combine = |pick: fn(&Effects) -> (f64, f64)| {
                let (est, se): (Vec<f64>, Vec<f64>) =
                    replicates.iter().map(|r| pick(&r.effects)).unzip();
                CombinedEstimate::from_replicates(&est, &se, cfg.level)
            };
            Ok(BootstrapResult {
                itt_lc: combine(|e| (e.itt_lc.estimate, e.itt_lc.se))?,
                itt_hc: combine(|e| (e.itt_hc.estimate, e.itt_hc.se))?,
                contrast: combine(|e| (e.contrast.estimate, e.contrast.se))?,
                failed_replicates: cfg.replicates - replicates.len(),
                replicates,
                retried_attempts: retried,
                degenerate_attempts: degenerate,
            })
        })
        .collect()
}

pub fn bootstrap_fit(
    dataset: &StudyDataset,
    spec: &DesignSpec,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult, BootstrapError> {
    Ok(bootstrap_fit_many(dataset, std::slice::from_ref(spec), cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Destination;
    use crate::rng::substream;

    fn rec(site: &str, arm: Arm, d: Destination, y: bool) -> IndividualRecord {
        IndividualRecord {
            site_id: site.into(),
            arm,
            destination: d,
            outcome: y,
            weight: 1.0,
            covariates: vec![],
        }
    }

    #[test]
    fn single_pair_resample_is_identity() {
        let a = rec("s", Arm::Control, Destination::Echs, false);
        let b = rec("s", Arm::Treatment, Destination::Echs, true);
        let out = resample_site(&[&a, &b], true, &mut substream(1, &[]));
        assert_eq!(out, vec![a, b]);
    }

    #[test]
    fn resample_preserves_arm_counts_and_is_deterministic() {
        let recs: Vec<_> = (0..9)
            .map(|i| rec("s", if i < 4 { Arm::Treatment } else { Arm::Control }, Destination::Echs, i % 2 == 0))
            .collect();
        let refs: Vec<_> = recs.iter().collect();
        let a = resample_site(&refs, true, &mut substream(3, &[1]));
        let b = resample_site(&refs, true, &mut substream(3, &[1]));
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|r| r.arm == Arm::Treatment).count(), 4);
    }

    #[test]
    fn resample_frequencies_match_binomial() {
        let recs: Vec<_> = (0..10)
            .map(|i| IndividualRecord {
                weight: i as f64,
                ..rec("s", Arm::Control, Destination::Echs, false)
            })
            .collect();
        let refs: Vec<_> = recs.iter().collect();
        let mut counts = [0usize; 10];
        let mut rng = substream(11, &[]);
        for _ in 0..1000 {
            for r in resample_site(&refs, true, &mut rng) {
                counts[r.weight as usize] += 1;
            }
        }
        // 10000 draws, p = 0.1: mean 1000, sd 30
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 90.0, "{c}");
        }
    }

    #[test]
    fn identical_replicates_combine_trivially() {
        let c = CombinedEstimate::from_replicates(&[0.1; 5], &[0.02; 5], 0.95).unwrap();
        assert!((c.point - 0.1).abs() < 1e-15);
        assert!((c.total_se - 0.02).abs() < 1e-15);
        assert_eq!(c.between_var, 0.0);
    }

    #[test]
    fn rubin_identity() {
        let est = [0.1, 0.3, 0.2, 0.5];
        let se = [0.1, 0.2, 0.1, 0.3];
        let c = CombinedEstimate::from_replicates(&est, &se, 0.9).unwrap();
        let mean = 0.275;
        let between = est.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / 3.0;
        let within = (0.01 + 0.04 + 0.01 + 0.09) / 4.0;
        assert!((c.total_se.powi(2) - (within + 1.25 * between)).abs() < 1e-12);
        assert!(c.ci_low < c.point && c.point < c.ci_high);
    }

    #[test]
    fn interval_cases() {
        let mut c = CombinedEstimate::from_replicates(&[-1.0, 1.0], &[0.0, 0.0], 0.95).unwrap();
        c.point = 0.0;
        c.total_se = 1.0;
        let (lo, hi) = confidence_interval(&c, 0.95).unwrap();
        assert!((hi - 1.959964).abs() < 1e-6 && (lo + 1.959964).abs() < 1e-6);
        c.total_se = 0.0;
        assert_eq!(confidence_interval(&c, 0.95).unwrap(), (0.0, 0.0));
        assert_eq!(confidence_interval(&c, 1.2), Err(BootstrapError::BadLevel(1.2)));
    }

    #[test]
    fn too_few_replicates() {
        assert!(CombinedEstimate::from_replicates(&[1.0], &[1.0], 0.95).is_err());
    }

    #[test]
    fn bootstrap_on_constant_sites_has_no_between_variance() {
        // Every cell is constant within site, so each resample reproduces
        // the original moments.
        let mut r = Vec::new();
        for (k, control_dest) in [
            Destination::HighQuality,
            Destination::LowQuality,
            Destination::HighQuality,
            Destination::LowQuality,
        ]
        .into_iter()
        .enumerate()
        {
            let s = format!("s{k}");
            for _ in 0..5 {
                r.push(rec(&s, Arm::Control, control_dest, false));
                r.push(rec(&s, Arm::Treatment, Destination::Echs, k % 2 == 0));
            }
        }
        let ds = StudyDataset::new(r, vec![]).unwrap();
        // phi is 1 at HQ sites and 0 at ECHS sites.
        let res = bootstrap_fit(&ds, &DesignSpec::unadjusted(), &BootstrapConfig::new(20, 5)).unwrap();
        assert_eq!(res.failed_replicates, 0);
        for c in res.combined() {
            assert!(c.between_var.abs() < 1e-24);
            assert!((c.total_se - c.within_var.sqrt()).abs() < 1e-12);
        }
        assert!((res.itt_hc.point - 1.0).abs() < 1e-12);
        assert!(res.itt_lc.point.abs() < 1e-12);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let mut r = Vec::new();
        for k in 0..6 {
            let s = format!("s{k}");
            for i in 0..40 {
                let arm = if i % 2 == 0 { Arm::Treatment } else { Arm::Control };
                let d = match (arm, (i * 7 + k) % 10) {
                    (Arm::Treatment, v) if v < 2 + k / 2 => Destination::HighQuality,
                    (Arm::Treatment, v) if v < 7 => Destination::Echs,
                    (_, v) if v < 1 => Destination::HighQuality,
                    _ => Destination::LowQuality,
                };
                r.push(rec(&s, arm, d, (i * 3 + k) % 4 == 0));
            }
        }
        let ds = StudyDataset::new(r, vec![]).unwrap();
        let cfg = BootstrapConfig {
            degenerate_policy: DegeneratePolicy::Retry { max_attempts: 3 },
            ..BootstrapConfig::new(30, 42)
        };
        let a = bootstrap_fit(&ds, &DesignSpec::unadjusted(), &cfg).unwrap();
        let b = bootstrap_fit(&ds, &DesignSpec::unadjusted(), &cfg).unwrap();
        assert_eq!(a, b);
        let est: Vec<f64> = a.replicates.iter().map(|r| r.effects.itt_lc.estimate).collect();
        let se: Vec<f64> = a.replicates.iter().map(|r| r.effects.itt_lc.se).collect();
        let again = CombinedEstimate::from_replicates(&est, &se, 0.95).unwrap();
        assert!((again.total_se - a.itt_lc.total_se).abs() < 1e-12);
    }
}
