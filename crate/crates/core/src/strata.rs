//! Take-up proportions, principal stratum proportions and site-level moments.
//!
//! Every estimator here is a Hájek ratio: weighted sums divided by the sum of
//! weights, so rescaling all weights by a positive constant changes nothing.
//! Effective sizes are reported on the record-count scale (site weight share
//! times the number of records in the dataset) for the same reason.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Arm, Destination, IndividualRecord, StudyDataset, Stratum};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrataError {
    #[error("no {0} records (or zero total weight) in subset")]
    EmptyArm(Arm),
    #[error("site `{site}`: no {arm} records (or zero total weight)")]
    SiteEmptyArm { site: String, arm: Arm },
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("only {0} usable site(s); at least 2 are required")]
    TooFewSites(usize),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("covariate `{0}` has zero pooled variance")]
    ZeroVariance(String),
}

/// Default complier-share threshold below which a site is degenerate.
pub const DEFAULT_DEGENERATE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentOptions {
    /// Use record weights. When false every record counts once.
    pub weighted: bool,
    /// Sites whose estimated complier share is at or below this are degenerate.
    pub degenerate_threshold: f64,
}

impl Default for MomentOptions {
    fn default() -> Self {
        Self {
            weighted: true,
            degenerate_threshold: DEFAULT_DEGENERATE_THRESHOLD,
        }
    }
}

/// `p[z][d]`: share of arm `z` observed at destination `d`; `n[z][d]` the
/// matching (weighted) counts. Indices follow [`Arm::index`] and
/// [`Destination::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TakeUpTable {
    pub p: [[f64; 3]; 2],
    pub n: [[f64; 3]; 2],
}

impl TakeUpTable {
    pub fn prob(&self, arm: Arm, dest: Destination) -> f64 {
        self.p[arm.index()][dest.index()]
    }

    pub fn count(&self, arm: Arm, dest: Destination) -> f64 {
        self.n[arm.index()][dest.index()]
    }
}

/// Stratum proportions indexed by [`Stratum::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumTable {
    /// Clipped at zero and renormalized to sum to one.
    pub pi: [f64; 5],
    /// Plug-in values before clipping. Complier entries may be negative.
    pub raw: [f64; 5],
    pub clipped: [bool; 5],
}

impl StratumTable {
    pub fn get(&self, s: Stratum) -> f64 {
        self.pi[s.index()]
    }

    pub fn complier_share(&self) -> f64 {
        self.get(Stratum::LowQualityComplier) + self.get(Stratum::HighQualityComplier)
    }

    /// Share of compliers with a high-quality alternative; `None` when there
    /// are no compliers.
    pub fn phi(&self) -> Option<f64> {
        let c = self.complier_share();
        (c > 0.0).then(|| self.get(Stratum::HighQualityComplier) / c)
    }

    pub fn any_clipped(&self) -> bool {
        self.clipped.iter().any(|&c| c)
    }
}

/// Running weighted sums for one arm.
#[derive(Debug, Clone, Default)]
pub(crate) struct ArmSums {
    pub weight: f64,
    pub count: usize,
    pub outcome: f64,
    pub dest: [f64; 3],
    pub covariates: Vec<f64>,
    pub covariates_sq: Vec<f64>,
}

/// Weighted sums per arm for a set of records. Both the dataset path and the
/// bootstrap path feed records through this.
#[derive(Debug, Clone)]
pub(crate) struct SiteSums {
    pub arms: [ArmSums; 2],
}

impl SiteSums {
    pub fn new(n_cov: usize) -> Self {
        let arm = ArmSums {
            covariates: vec![0.0; n_cov],
            covariates_sq: vec![0.0; n_cov],
            ..ArmSums::default()
        };
        Self {
            arms: [arm.clone(), arm],
        }
    }

    #[inline]
    pub fn add(&mut self, r: &IndividualRecord, weighted: bool) {
        let w = if weighted { r.weight } else { 1.0 };
        let a = &mut self.arms[r.arm.index()];
        a.weight += w;
        a.count += 1;
        if r.outcome {
            a.outcome += w;
        }
        a.dest[r.destination.index()] += w;
        for ((sum, sq), &x) in a
            .covariates
            .iter_mut()
            .zip(a.covariates_sq.iter_mut())
            .zip(&r.covariates)
        {
            *sum += w * x;
            *sq += w * x * x;
        }
    }

    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a IndividualRecord>,
        n_cov: usize,
        weighted: bool,
    ) -> Self {
        let mut s = Self::new(n_cov);
        for r in records {
            s.add(r, weighted);
        }
        s
    }

    pub fn total_weight(&self) -> f64 {
        self.arms[0].weight + self.arms[1].weight
    }

    pub fn take_up(&self) -> Result<TakeUpTable, StrataError> {
        let mut p = [[0.0; 3]; 2];
        let mut n = [[0.0; 3]; 2];
        for arm in Arm::ALL {
            let a = &self.arms[arm.index()];
            if a.count == 0 || a.weight <= 0.0 {
                return Err(StrataError::EmptyArm(arm));
            }
            for d in Destination::ALL {
                n[arm.index()][d.index()] = a.dest[d.index()];
                p[arm.index()][d.index()] = a.dest[d.index()] / a.weight;
            }
        }
        Ok(TakeUpTable { p, n })
    }

    pub fn arm_mean_outcome(&self, arm: Arm) -> f64 {
        let a = &self.arms[arm.index()];
        a.outcome / a.weight
    }

    pub fn covariate_means(&self) -> Vec<f64> {
        let w = self.total_weight();
        self.arms[0]
            .covariates
            .iter()
            .zip(&self.arms[1].covariates)
            .map(|(a, b)| if w > 0.0 { (a + b) / w } else { f64::NAN })
            .collect()
    }
}

pub fn take_up_proportions<'a>(
    records: impl IntoIterator<Item = &'a IndividualRecord>,
    weighted: bool,
) -> Result<TakeUpTable, StrataError> {
    SiteSums::from_records(records, 0, weighted).take_up()
}

/// Maps take-up proportions onto the five strata. Negative complier
/// estimates are clipped to zero and flagged, then the table is renormalized.
pub fn stratum_proportions(t: &TakeUpTable) -> StratumTable {
    use Destination::*;
    let p = |arm: Arm, d: Destination| t.prob(arm, d);
    let mut raw = [0.0; 5];
    raw[Stratum::EchsAlwaysTaker.index()] = p(Arm::Control, Echs);
    raw[Stratum::LowQualityAlwaysTaker.index()] = p(Arm::Treatment, LowQuality);
    raw[Stratum::HighQualityAlwaysTaker.index()] = p(Arm::Treatment, HighQuality);
    raw[Stratum::LowQualityComplier.index()] =
        p(Arm::Control, LowQuality) - p(Arm::Treatment, LowQuality);
    raw[Stratum::HighQualityComplier.index()] =
        p(Arm::Control, HighQuality) - p(Arm::Treatment, HighQuality);

    let mut clipped = [false; 5];
    let mut pi = raw;
    for (v, c) in pi.iter_mut().zip(clipped.iter_mut()) {
        if *v < 0.0 {
            *v = 0.0;
            *c = true;
        }
    }
    if clipped.iter().any(|&c| c) {
        let total: f64 = pi.iter().sum();
        for v in &mut pi {
            *v /= total;
        }
    }
    StratumTable { pi, raw, clipped }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMoments {
    pub site_id: String,
    /// Complier average effect, `NaN` when degenerate.
    pub late: f64,
    /// High-quality share of compliers, `NaN` when degenerate.
    pub phi: f64,
    /// Difference in arm means.
    pub itt: f64,
    pub pi_lc: f64,
    pub pi_hc: f64,
    pub complier_share: f64,
    /// Estimated number of compliers on the record-count scale.
    pub complier_mass: f64,
    /// Site means of the covariates, both arms pooled.
    pub w_site: Vec<f64>,
    /// `w_site` minus the individual-level grand mean.
    pub w_centered: Vec<f64>,
    pub n_treated: f64,
    pub n_control: f64,
    pub degenerate: bool,
    pub strata: StratumTable,
}

impl SiteMoments {
    pub fn effective_size(&self) -> f64 {
        self.n_treated + self.n_control
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Degenerate,
    EmptyArm(Arm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSite {
    pub site_id: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMomentSet {
    pub moments: Vec<SiteMoments>,
    pub dropped: Vec<DroppedSite>,
    /// Individual-level grand means used for centering.
    pub grand_means: Vec<f64>,
    /// Degenerate sites kept in `moments` (only when not dropping).
    pub degenerate_retained: usize,
}

impl SiteMomentSet {
    pub fn usable(&self) -> impl Iterator<Item = &SiteMoments> {
        self.moments.iter().filter(|m| !m.degenerate)
    }
}

/// Dataset-level quantities every site needs: grand covariate means and the
/// factor converting summed weights to the record-count scale.
#[derive(Debug, Clone)]
pub(crate) struct PooledScale {
    pub grand_means: Vec<f64>,
    pub size_scale: f64,
}

impl PooledScale {
    pub fn from_sums(sites: &[SiteSums]) -> Self {
        let n_cov = sites.first().map_or(0, |s| s.arms[0].covariates.len());
        let mut wsum = 0.0;
        let mut count = 0usize;
        let mut xs = vec![0.0; n_cov];
        for s in sites {
            for a in &s.arms {
                wsum += a.weight;
                count += a.count;
                for (acc, v) in xs.iter_mut().zip(&a.covariates) {
                    *acc += v;
                }
            }
        }
        let grand_means = xs
            .into_iter()
            .map(|v| if wsum > 0.0 { v / wsum } else { f64::NAN })
            .collect();
        let size_scale = if wsum > 0.0 { count as f64 / wsum } else { 0.0 };
        Self {
            grand_means,
            size_scale,
        }
    }
}

pub(crate) fn moments_from_sums(
    site_id: &str,
    sums: &SiteSums,
    scale: &PooledScale,
    threshold: f64,
) -> Result<SiteMoments, StrataError> {
    let take_up = sums.take_up().map_err(|e| match e {
        StrataError::EmptyArm(arm) => StrataError::SiteEmptyArm {
            site: site_id.to_string(),
            arm,
        },
        other => other,
    })?;
    let strata = stratum_proportions(&take_up);
    let itt = sums.arm_mean_outcome(Arm::Treatment) - sums.arm_mean_outcome(Arm::Control);
    let pi_lc = strata.get(Stratum::LowQualityComplier);
    let pi_hc = strata.get(Stratum::HighQualityComplier);
    let share = pi_lc + pi_hc;
    let degenerate = share <= threshold;
    let (late, phi) = if degenerate {
        (f64::NAN, f64::NAN)
    } else {
        (itt / share, pi_hc / share)
    };
    let n_treated = sums.arms[Arm::Treatment.index()].weight * scale.size_scale;
    let n_control = sums.arms[Arm::Control.index()].weight * scale.size_scale;
    let w_site = sums.covariate_means();
    let w_centered = w_site
        .iter()
        .zip(&scale.grand_means)
        .map(|(w, g)| w - g)
        .collect();
    Ok(SiteMoments {
        site_id: site_id.to_string(),
        late,
        phi,
        itt,
        pi_lc,
        pi_hc,
        complier_share: share,
        complier_mass: share * (n_treated + n_control),
        w_site,
        w_centered,
        n_treated,
        n_control,
        degenerate,
        strata,
    })
}

/// Shared by [`all_site_moments`] and the bootstrap.
pub(crate) fn moment_set_from_sums(
    ids: &[&str],
    sums: &[SiteSums],
    opts: &MomentOptions,
    drop_degenerate: bool,
) -> Result<SiteMomentSet, StrataError> {
    let scale = PooledScale::from_sums(sums);
    let mut moments = Vec::with_capacity(ids.len());
    let mut dropped = Vec::new();
    let mut degenerate_retained = 0;
    for (id, s) in ids.iter().zip(sums) {
        match moments_from_sums(id, s, &scale, opts.degenerate_threshold) {
            Ok(m) if m.degenerate && drop_degenerate => dropped.push(DroppedSite {
                site_id: id.to_string(),
                reason: DropReason::Degenerate,
            }),
            Ok(m) => {
                if m.degenerate {
                    degenerate_retained += 1;
                }
                moments.push(m)
            }
            Err(StrataError::SiteEmptyArm { arm, .. }) => dropped.push(DroppedSite {
                site_id: id.to_string(),
                reason: DropReason::EmptyArm(arm),
            }),
            Err(e) => return Err(e),
        }
    }
    let usable = moments.iter().filter(|m| !m.degenerate).count();
    if usable < 2 {
        return Err(StrataError::TooFewSites(usable));
    }
    Ok(SiteMomentSet {
        moments,
        dropped,
        grand_means: scale.grand_means,
        degenerate_retained,
    })
}

pub(crate) fn dataset_site_sums(dataset: &StudyDataset, weighted: bool) -> Vec<SiteSums> {
    let n_cov = dataset.covariate_names().len();
    dataset
        .site_index()
        .values()
        .map(|idx| {
            SiteSums::from_records(idx.iter().map(|&i| &dataset.records()[i]), n_cov, weighted)
        })
        .collect()
}

pub fn site_moments(
    dataset: &StudyDataset,
    site_id: &str,
    opts: &MomentOptions,
) -> Result<SiteMoments, StrataError> {
    let pos = dataset
        .site_index()
        .get_index_of(site_id)
        .ok_or_else(|| StrataError::UnknownSite(site_id.to_string()))?;
    let sums = dataset_site_sums(dataset, opts.weighted);
    let scale = PooledScale::from_sums(&sums);
    moments_from_sums(site_id, &sums[pos], &scale, opts.degenerate_threshold)
}

/// Moments for every site, in dataset order. Sites missing an arm are always
/// dropped; degenerate sites are dropped or kept according to
/// `drop_degenerate`. Fails when fewer than two non-degenerate sites remain.
pub fn all_site_moments(
    dataset: &StudyDataset,
    drop_degenerate: bool,
    opts: &MomentOptions,
) -> Result<SiteMomentSet, StrataError> {
    let ids: Vec<&str> = dataset.site_ids().collect();
    let sums = dataset_site_sums(dataset, opts.weighted);
    moment_set_from_sums(&ids, &sums, opts, drop_degenerate)
}

/// Treated-minus-control difference of a covariate in pooled standard
/// deviation units. Arm means are site-size-weighted averages of the
/// within-site arm means; the pooled SD is `sqrt((var_t + var_c) / 2)` over
/// individuals.
pub fn standardized_difference(
    dataset: &StudyDataset,
    covariate: &str,
    weighted: bool,
) -> Result<f64, StrataError> {
    let j = dataset
        .covariate_index(covariate)
        .ok_or_else(|| StrataError::UnknownCovariate(covariate.to_string()))?;
    let sums = dataset_site_sums(dataset, weighted);
    let mut arm_mean = [0.0; 2];
    let mut size_total = 0.0;
    for s in &sums {
        let (t, c) = (&s.arms[1], &s.arms[0]);
        if t.weight <= 0.0 || c.weight <= 0.0 {
            continue;
        }
        let size = s.total_weight();
        arm_mean[1] += size * t.covariates[j] / t.weight;
        arm_mean[0] += size * c.covariates[j] / c.weight;
        size_total += size;
    }
    if size_total <= 0.0 {
        return Err(StrataError::EmptyArm(Arm::Control));
    }
    let mut var = [0.0; 2];
    for arm in Arm::ALL {
        let (mut w, mut x, mut xx) = (0.0, 0.0, 0.0);
        for s in &sums {
            let a = &s.arms[arm.index()];
            w += a.weight;
            x += a.covariates[j];
            xx += a.covariates_sq[j];
        }
        if w <= 0.0 {
            return Err(StrataError::EmptyArm(arm));
        }
        let m = x / w;
        var[arm.index()] = (xx / w - m * m).max(0.0);
    }
    let sd = ((var[0] + var[1]) / 2.0).sqrt();
    if !(sd > 1e-12) {
        return Err(StrataError::ZeroVariance(covariate.to_string()));
    }
    Ok((arm_mean[1] - arm_mean[0]) / size_total / sd)
}
