use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use stratarc_core::data::{ColumnSchema, DestinationLabels};
use stratarc_core::regression::{EffectTarget, HcKind, Parameterization, SiteWeighting};
use stratarc_core::simulation::{Adjustment, DgpKind, Estimator};

#[derive(Debug, Parser)]
#[command(name = "stratarc", version, about = "Principal stratum effects in multisite trials")]
pub struct Cli {
    /// Worker threads for bootstrap and simulation (falls back to STRATARC_THREADS).
    #[arg(long, global = true, env = "STRATARC_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Take-up and stratum proportions, pooled and per site.
    Strata(StrataArgs),
    /// Fit the site-level regression, optionally with bootstrap uncertainty.
    Estimate(EstimateArgs),
    /// Residual checks of a fitted model.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo evaluation of the estimators.
    Simulate(SimulateArgs),
    /// Write a bundled fixture dataset as CSV.
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Individual-level CSV.
    pub input: PathBuf,
    #[arg(long, default_value = "site")]
    pub site_col: String,
    #[arg(long, default_value = "z")]
    pub arm_col: String,
    #[arg(long, default_value = "d")]
    pub dest_col: String,
    #[arg(long, default_value = "y")]
    pub outcome_col: String,
    /// Sampling weight column; all weights are 1 without it.
    #[arg(long)]
    pub weight_col: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub covariate_cols: Vec<String>,
    #[arg(long, default_value = "e")]
    pub label_echs: String,
    #[arg(long, default_value = "hq")]
    pub label_high: String,
    #[arg(long, default_value = "lq")]
    pub label_low: String,
    /// Ignore the weight column in all moment estimators.
    #[arg(long)]
    pub unweighted: bool,
    /// Complier share at or below which a site is degenerate.
    #[arg(long, default_value_t = 1e-6)]
    pub degenerate_threshold: f64,
}

impl InputArgs {
    /// Covariates named in the model are read even when not listed.
    pub fn schema(&self, extra: &[String]) -> ColumnSchema {
        let mut covariates = self.covariate_cols.clone();
        for c in extra {
            if !covariates.contains(c) {
                covariates.push(c.clone());
            }
        }
        ColumnSchema {
            site: self.site_col.clone(),
            arm: self.arm_col.clone(),
            destination: self.dest_col.clone(),
            outcome: self.outcome_col.clone(),
            weight: self.weight_col.clone(),
            covariates,
            labels: DestinationLabels {
                echs: self.label_echs.clone(),
                high_quality: self.label_high.clone(),
                low_quality: self.label_low.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Rendering on stdout.
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Also write the JSON report to this file. Not recorded in the report,
    /// so reruns to different paths stay byte-identical.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StrataArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Standardized treated-minus-control differences for these covariates.
    #[arg(long, value_delimiter = ',')]
    pub balance: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    Unadjusted,
    Adjusted,
    Interaction,
    Itt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum HcArg {
    Hc0,
    Hc1,
}

impl From<HcArg> for HcKind {
    fn from(h: HcArg) -> Self {
        match h {
            HcArg::Hc0 => HcKind::Hc0,
            HcArg::Hc1 => HcKind::Hc1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetArg {
    Site,
    Population,
}

impl From<TargetArg> for EffectTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Site => EffectTarget::Site,
            TargetArg::Population => EffectTarget::Population,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamArg {
    TwoSlope,
    InterceptPhi,
    InterceptPhiC,
}

impl From<ParamArg> for Parameterization {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::TwoSlope => Parameterization::TwoSlope,
            ParamArg::InterceptPhi => Parameterization::InterceptPhi,
            ParamArg::InterceptPhiC => Parameterization::InterceptPhiC,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingArg {
    Equal,
    ComplierMass,
}

impl From<WeightingArg> for SiteWeighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Equal => SiteWeighting::Equal,
            WeightingArg::ComplierMass => SiteWeighting::ComplierMass,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "unadjusted")]
    pub model: ModelArg,
    /// Site-aggregate covariates entering the regression.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Covariate interacted with both slopes (interaction model only).
    #[arg(long)]
    pub interaction: Option<String>,
    #[arg(long, value_enum, default_value = "hc1")]
    pub hc: HcArg,
    #[arg(long, value_enum, default_value = "population")]
    pub target: TargetArg,
    #[arg(long, value_enum, default_value = "two-slope")]
    pub parameterization: ParamArg,
    #[arg(long, value_enum, default_value = "equal")]
    pub site_weighting: WeightingArg,
    /// Leave covariates uncentered.
    #[arg(long)]
    pub no_center: bool,
}

impl ModelArgs {
    pub fn named_covariates(&self) -> Vec<String> {
        let mut v = self.covariates.clone();
        v.extend(self.interaction.iter().cloned());
        v
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Bootstrap replicates; 0 skips the bootstrap.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Redraw failed replicates up to this many attempts instead of dropping them.
    #[arg(long)]
    pub retry: Option<u32>,
    /// Resample sites without preserving arm counts.
    #[arg(long)]
    pub pooled_resampling: bool,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Write per-site plot data (phi, LATE, mass, studentized residual) here.
    #[arg(long)]
    pub plot_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpArg {
    Simple,
    Calibrated,
}

impl From<DgpArg> for DgpKind {
    fn from(d: DgpArg) -> Self {
        match d {
            DgpArg::Simple => DgpKind::Simple,
            DgpArg::Calibrated => DgpKind::Calibrated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorArg {
    Naive,
    Boot,
    Oracle,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Naive => Estimator::Naive,
            EstimatorArg::Boot => Estimator::Boot,
            EstimatorArg::Oracle => Estimator::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentArg {
    Unadjusted,
    Adjusted,
    Interaction,
}

impl From<AdjustmentArg> for Adjustment {
    fn from(a: AdjustmentArg) -> Self {
        match a {
            AdjustmentArg::Unadjusted => Adjustment::Unadjusted,
            AdjustmentArg::Adjusted => Adjustment::Adjusted,
            AdjustmentArg::Interaction => Adjustment::Interaction,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Data generating process; must agree with the scenario file when both are given.
    #[arg(long, value_enum)]
    pub dgp: Option<DgpArg>,
    /// TOML or JSON file holding a full process specification.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bootstrap replicates inside each Monte Carlo replicate.
    #[arg(long, default_value_t = 100)]
    pub bootstrap_reps: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["naive", "boot", "oracle"])]
    pub estimators: Vec<EstimatorArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["unadjusted", "adjusted", "interaction"])]
    pub adjustments: Vec<AdjustmentArg>,
    #[arg(long, value_enum, default_value = "population")]
    pub target: TargetArg,
    #[arg(long, value_enum, default_value = "hc1")]
    pub hc: HcArg,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Template CSV for the calibrated process (columns site,z,d,y,read);
    /// the bundled template is used otherwise.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Also run the slope-test level check with this many replicates.
    #[arg(long)]
    pub level_check: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureName {
    /// Twelve sites with the published pooled take-up margins.
    Table1,
    /// The 38-site calibration template.
    Template,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FixtureArgs {
    #[arg(value_enum)]
    pub name: FixtureName,
    #[arg(long)]
    pub out: PathBuf,
}
