//! One function per subcommand. Each builds a JSON envelope, prints it or a
//! rendering of it, and maps library errors onto exit codes.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};

use stratarc_core::bootstrap::{bootstrap_fit, BootstrapConfig, BootstrapError, DegeneratePolicy};
use stratarc_core::data::{
    ingest_csv, validate, write_csv, ColumnSchema, DataError, Destination, StudyDataset,
};
use stratarc_core::diagnostics::{
    plot_data, residual_diagnostics, write_plot_csv, DiagnosticsError, ResidualDiagnostics,
};
use stratarc_core::regression::{
    fit_model, overall_decomposition_check, target_effects, DesignSpec, Effects, FitResult,
    ModelKind, RegressionError,
};
use stratarc_core::simulation::{
    run_monte_carlo, slope_test_level, synthetic_template, table1_dataset, DgpKind, DgpSpec,
    MonteCarloConfig, SimulationError, TEMPLATE_SEED,
};
use stratarc_core::strata::{
    all_site_moments, site_moments, standardized_difference, stratum_proportions,
    take_up_proportions, MomentOptions, SiteMomentSet, StrataError,
};

use crate::args::{
    DiagnoseArgs, EstimateArgs, FixtureArgs, FixtureName, Format, InputArgs, ModelArg, ModelArgs,
    OutputArgs, SimulateArgs, StrataArgs,
};
use crate::render::{num, pp, Table};

pub const SCHEMA_VERSION: u32 = 1;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn validation(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    pub fn runtime(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

fn data_failure(e: DataError) -> Failure {
    Failure::validation(e.into())
}

fn strata_failure(e: StrataError) -> Failure {
    Failure::validation(e.into())
}

fn regression_failure(e: RegressionError) -> Failure {
    match e {
        RegressionError::IncompatibleSpec(_)
        | RegressionError::UnknownCovariate(_)
        | RegressionError::TooFewSites { .. } => Failure::validation(e.into()),
        _ => Failure::runtime(e.into()),
    }
}

fn bootstrap_failure(e: BootstrapError) -> Failure {
    match e {
        BootstrapError::BadConfig(_) | BootstrapError::BadLevel(_) => Failure::validation(e.into()),
        BootstrapError::Strata(s) => strata_failure(s),
        BootstrapError::Regression(r) => regression_failure(r),
        _ => Failure::runtime(e.into()),
    }
}

fn diagnostics_failure(e: DiagnosticsError) -> Failure {
    match e {
        DiagnosticsError::TooFewSites { .. } => Failure::validation(e.into()),
        DiagnosticsError::Regression(r) => regression_failure(r),
        _ => Failure::runtime(e.into()),
    }
}

fn simulation_failure(e: SimulationError) -> Failure {
    match e {
        SimulationError::BadSpec(_) | SimulationError::BadTemplate(_) | SimulationError::Data(_) => {
            Failure::validation(e.into())
        }
        SimulationError::Strata(_) => Failure::runtime(e.into()),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

struct Report {
    command: &'static str,
    config: Value,
    result: Value,
    warnings: Vec<String>,
}

impl Report {
    fn envelope(&self) -> Value {
        json!({
            "schema": SCHEMA_VERSION,
            "command": self.command,
            "config": self.config,
            "result": self.result,
            "warnings": self.warnings,
        })
    }

    /// Warnings go to stderr, the JSON report to `--out`, and the chosen
    /// rendering to stdout.
    fn emit(
        &self,
        output: &OutputArgs,
        table: impl FnOnce() -> String,
        csv: impl FnOnce() -> anyhow::Result<String>,
    ) -> Result<(), Failure> {
        for w in &self.warnings {
            eprintln!("warning: {w}");
        }
        let json = serde_json::to_string_pretty(&self.envelope()).expect("values serialize");
        if let Some(path) = &output.out {
            std::fs::write(path, format!("{json}\n"))
                .with_context(|| format!("writing {}", path.display()))
                .map_err(Failure::runtime)?;
        }
        let text = match output.format {
            Format::Json => format!("{json}\n"),
            Format::Table => table(),
            Format::Csv => csv().map_err(Failure::runtime)?,
        };
        std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::runtime(e.into()))
    }
}

fn load(input: &InputArgs, extra: &[String]) -> Result<(StudyDataset, Vec<String>), Failure> {
    if !(input.degenerate_threshold >= 0.0) {
        return Err(Failure::validation(anyhow!("--degenerate-threshold must be nonnegative")));
    }
    let schema = input.schema(extra);
    let ds = ingest_csv(&input.input, &schema).map_err(data_failure)?;
    let warnings = validate(&ds).into_iter().map(|d| d.message).collect();
    Ok((ds, warnings))
}

fn moment_options(input: &InputArgs) -> MomentOptions {
    MomentOptions {
        weighted: !input.unweighted,
        degenerate_threshold: input.degenerate_threshold,
    }
}

fn csv_string(f: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    f(&mut w)?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn strata(args: &StrataArgs) -> Result<(), Failure> {
    let (ds, mut warnings) = load(&args.input, &args.balance)?;
    let opts = moment_options(&args.input);
    let table = take_up_proportions(ds.records(), opts.weighted).map_err(strata_failure)?;
    let pooled = stratum_proportions(&table);
    if pooled.any_clipped() {
        warnings.push("pooled complier proportion clipped at zero".into());
    }
    let mut sites = Vec::new();
    for id in ds.site_ids() {
        match site_moments(&ds, id, &opts) {
            Ok(m) => {
                if m.strata.any_clipped() {
                    warnings.push(format!("site `{id}`: complier proportion clipped at zero"));
                }
                if m.degenerate {
                    warnings.push(format!("site `{id}`: no estimated compliers"));
                }
                sites.push(m);
            }
            Err(e) => warnings.push(e.to_string()),
        }
    }
    let decomposition =
        overall_decomposition_check(&ds, None, opts.weighted).map_err(strata_failure)?;
    let mut balance = Vec::new();
    for c in &args.balance {
        let d = standardized_difference(&ds, c, opts.weighted).map_err(strata_failure)?;
        balance.push((c.clone(), d));
    }

    let report = Report {
        command: "strata",
        config: json!({ "args": to_value(args), "moment_options": to_value(&opts) }),
        result: json!({
            "records": ds.len(),
            "sites": ds.num_sites(),
            "take_up": to_value(&table),
            "strata": to_value(&pooled),
            "decomposition": to_value(&decomposition),
            "site_moments": to_value(&sites),
            "balance": balance.iter().map(|(c, d)| json!({"covariate": c, "standardized_difference": d})).collect::<Vec<_>>(),
        }),
        warnings,
    };
    report.emit(
        &args.output,
        || {
            let dests = [Destination::Echs, Destination::HighQuality, Destination::LowQuality];
            let mut t = Table::new(
                format!("Take-up by arm (% of arm), {} records in {} sites", ds.len(), ds.num_sites()),
                &["arm", "e (%)", "hq (%)", "lq (%)"],
            );
            for (name, arm) in [("treated", 1), ("control", 0)] {
                let mut row = vec![name.to_string()];
                row.extend(dests.iter().map(|d| pp(table.p[arm][d.index()])));
                t.row(row);
            }
            let mut s = Table::new(
                "Stratum proportions (%)",
                &["", "eat", "lat", "hat", "lc", "hc"],
            );
            let mut row = vec!["pooled".to_string()];
            row.extend(pooled.pi.iter().map(|v| pp(*v)));
            s.row(row);
            let mut k = Table::new(
                "Sites (proportions and effects in percentage points)",
                &["site", "n_t", "n_c", "pi_lc", "pi_hc", "phi", "ITT", "LATE", "flags"],
            );
            for m in &sites {
                let mut flags = Vec::new();
                if m.degenerate {
                    flags.push("degenerate");
                }
                if m.strata.any_clipped() {
                    flags.push("clipped");
                }
                k.row(vec![
                    m.site_id.clone(),
                    num(m.n_treated, 1),
                    num(m.n_control, 1),
                    pp(m.pi_lc),
                    pp(m.pi_hc),
                    pp(m.phi),
                    pp(m.itt),
                    pp(m.late),
                    flags.join(","),
                ]);
            }
            let mut out = format!("{}\n{}\n", t.render(), s.render());
            out.push_str(&format!(
                "Pooled ITT {} pp, complier share {} %, LATE {} pp\n\n",
                pp(decomposition.overall_itt),
                pp(decomposition.complier_share),
                decomposition.overall_late.map_or("NA".into(), pp)
            ));
            if !balance.is_empty() {
                let mut b = Table::new("Balance (standardized differences)", &["covariate", "std. diff"]);
                for (c, d) in &balance {
                    b.row(vec![c.clone(), num(*d, 4)]);
                }
                out.push_str(&format!("{}\n", b.render()));
            }
            out.push_str(&k.render());
            out
        },
        || {
            csv_string(|w| {
                w.write_record([
                    "site", "n_treated", "n_control", "pi_eat", "pi_lat", "pi_hat", "pi_lc", "pi_hc",
                    "phi", "itt", "late", "complier_mass", "degenerate", "clipped",
                ])?;
                for m in &sites {
                    let mut rec = vec![m.site_id.clone(), m.n_treated.to_string(), m.n_control.to_string()];
                    rec.extend(m.strata.pi.iter().map(|v| v.to_string()));
                    rec.extend([m.phi, m.itt, m.late, m.complier_mass].iter().map(|v| v.to_string()));
                    rec.push(m.degenerate.to_string());
                    rec.push(m.strata.any_clipped().to_string());
                    w.write_record(rec)?;
                }
                Ok(())
            })
        },
    )
}

fn design(model: &ModelArgs, ds: &StudyDataset) -> Result<DesignSpec, Failure> {
    let names = ds.covariate_names();
    let covs: Vec<&str> = model.covariates.iter().map(String::as_str).collect();
    let base = match model.model {
        ModelArg::Unadjusted if covs.is_empty() && model.interaction.is_none() => {
            Ok(DesignSpec::unadjusted())
        }
        ModelArg::Itt if covs.is_empty() && model.interaction.is_none() => Ok(DesignSpec::itt()),
        ModelArg::Unadjusted | ModelArg::Itt => Err(RegressionError::IncompatibleSpec(
            "this model takes no --covariates or --interaction".into(),
        )),
        ModelArg::Adjusted if model.interaction.is_some() => Err(RegressionError::IncompatibleSpec(
            "--interaction needs --model interaction".into(),
        )),
        ModelArg::Adjusted => DesignSpec::adjusted(names, &covs),
        ModelArg::Interaction => match &model.interaction {
            Some(i) => DesignSpec::interaction(names, i, &covs),
            None => Err(RegressionError::IncompatibleSpec(
                "--model interaction needs --interaction".into(),
            )),
        },
    }
    .map_err(regression_failure)?;
    let spec = base
        .with_hc(model.hc.into())
        .with_target(model.target.into())
        .with_parameterization(model.parameterization.into())
        .with_site_weighting(model.site_weighting.into())
        .with_center(!model.no_center);
    spec.validate().map_err(regression_failure)?;
    Ok(spec)
}

fn moment_warnings(set: &SiteMomentSet, warnings: &mut Vec<String>) {
    for d in &set.dropped {
        warnings.push(format!("site `{}` dropped: {:?}", d.site_id, d.reason));
    }
    for m in &set.moments {
        if m.strata.any_clipped() {
            warnings.push(format!("site `{}`: complier proportion clipped at zero", m.site_id));
        }
    }
}

struct Fitted {
    set: SiteMomentSet,
    fit: FitResult,
    effects: Effects,
}

fn fit_dataset(ds: &StudyDataset, spec: &DesignSpec, opts: &MomentOptions, warnings: &mut Vec<String>) -> Result<Fitted, Failure> {
    let set = all_site_moments(ds, true, opts).map_err(strata_failure)?;
    moment_warnings(&set, warnings);
    let fit = fit_model(&set.moments, spec).map_err(regression_failure)?;
    let effects = target_effects(&fit, &set.moments).map_err(regression_failure)?;
    Ok(Fitted { set, fit, effects })
}

fn effects_table(title: &str, effects: &Effects) -> Table {
    let mut t = Table::new(title, &["effect", "estimate (pp)", "SE (pp)"]);
    for (name, e) in ["ITT_lc", "ITT_hc", "contrast"].iter().zip(effects.as_array()) {
        t.row(vec![name.to_string(), pp(e.estimate), pp(e.se)]);
    }
    t
}

pub fn estimate(args: &EstimateArgs) -> Result<(), Failure> {
    let (ds, mut warnings) = load(&args.input, &args.model.named_covariates())?;
    let opts = moment_options(&args.input);
    let spec = design(&args.model, &ds)?;
    let boot_cfg = (args.bootstrap > 0).then(|| BootstrapConfig {
        replicates: args.bootstrap,
        seed: args.seed,
        resample_within_arm: !args.pooled_resampling,
        degenerate_policy: match args.retry {
            Some(max_attempts) => DegeneratePolicy::Retry { max_attempts },
            None => DegeneratePolicy::Drop,
        },
        moment_options: opts,
        level: args.level,
    });
    if let Some(cfg) = &boot_cfg {
        cfg.validate().map_err(bootstrap_failure)?;
    }

    let fitted = fit_dataset(&ds, &spec, &opts, &mut warnings)?;
    let e = fitted.effects;
    let decomposition = overall_decomposition_check(
        &ds,
        spec.model.is_late().then_some((e.itt_lc.estimate, e.itt_hc.estimate)),
        opts.weighted,
    )
    .map_err(strata_failure)?;
    let boot = match &boot_cfg {
        Some(cfg) => {
            let b = bootstrap_fit(&ds, &spec, cfg).map_err(bootstrap_failure)?;
            if b.failed_replicates > 0 {
                warnings.push(format!(
                    "{} of {} bootstrap replicates failed",
                    b.failed_replicates, cfg.replicates
                ));
            }
            Some(b)
        }
        None => None,
    };

    let report = Report {
        command: "estimate",
        config: json!({
            "args": to_value(args),
            "design": to_value(&spec),
            "moment_options": to_value(&opts),
            "bootstrap": to_value(&boot_cfg),
        }),
        result: json!({
            "sites_used": fitted.fit.site_ids.len(),
            "dropped_sites": to_value(&fitted.set.dropped),
            "itt_lc": to_value(&e.itt_lc),
            "itt_hc": to_value(&e.itt_hc),
            "contrast": to_value(&e.contrast),
            "fit": to_value(&fitted.fit),
            "decomposition": to_value(&decomposition),
            "bootstrap": to_value(&boot),
        }),
        warnings,
    };
    report.emit(
        &args.output,
        || {
            let fit = &fitted.fit;
            let mut out = format!(
                "Model {:?}, {:?} parameterization, {:?}, {:?} target, {} sites\n\n",
                spec.model,
                spec.parameterization,
                spec.hc,
                spec.target,
                fit.site_ids.len()
            );
            out.push_str(&effects_table("Principal effects", &e).render());
            let mut c = Table::new("\nCoefficients (pp)", &["term", "estimate", "SE"]);
            for (i, name) in fit.coefficient_names.iter().enumerate() {
                c.row(vec![name.clone(), pp(fit.coefficients[i]), pp(fit.vcov[i][i].sqrt())]);
            }
            out.push_str(&c.render());
            if let Some(b) = &boot {
                let mut t = Table::new(
                    format!(
                        "\nBootstrap ({} usable replicates, {} failed; pp)",
                        b.replicates.len(),
                        b.failed_replicates
                    ),
                    &["effect", "mean", "total SE", "CI low", "CI high"],
                );
                for (name, c) in ["ITT_lc", "ITT_hc", "contrast"].iter().zip([&b.itt_lc, &b.itt_hc, &b.contrast]) {
                    t.row(vec![name.to_string(), pp(c.point), pp(c.total_se), pp(c.ci_low), pp(c.ci_high)]);
                }
                out.push_str(&t.render());
            }
            if let (Some(r), Some(l)) = (decomposition.reconstruction, decomposition.overall_late) {
                out.push_str(&format!(
                    "\nPooled LATE {} pp; reconstructed from principal effects {} pp\n",
                    pp(l),
                    pp(r)
                ));
            }
            out
        },
        || {
            csv_string(|w| {
                w.write_record(["effect", "estimate", "se", "boot_mean", "boot_se", "ci_low", "ci_high"])?;
                let combined = boot.as_ref().map(|b| [b.itt_lc, b.itt_hc, b.contrast]);
                for (i, (name, eff)) in ["itt_lc", "itt_hc", "contrast"].iter().zip(e.as_array()).enumerate() {
                    let mut rec = vec![name.to_string(), eff.estimate.to_string(), eff.se.to_string()];
                    match &combined {
                        Some(c) => rec.extend(
                            [c[i].point, c[i].total_se, c[i].ci_low, c[i].ci_high].iter().map(|v| v.to_string()),
                        ),
                        None => rec.extend(std::iter::repeat_n(String::new(), 4)),
                    }
                    w.write_record(rec)?;
                }
                Ok(())
            })
        },
    )
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<(), Failure> {
    let (ds, mut warnings) = load(&args.input, &args.model.named_covariates())?;
    let opts = moment_options(&args.input);
    let spec = design(&args.model, &ds)?;
    if spec.model == ModelKind::IttModel {
        return Err(Failure::validation(anyhow!("diagnostics apply to LATE models only")));
    }
    let fitted = fit_dataset(&ds, &spec, &opts, &mut warnings)?;
    let diag: ResidualDiagnostics =
        residual_diagnostics(&fitted.fit, &fitted.set.moments).map_err(diagnostics_failure)?;
    let rows = plot_data(&diag, &fitted.set.moments).map_err(diagnostics_failure)?;
    if diag.slope.violation {
        warnings.push(format!(
            "studentized residuals trend with phi (t = {:.2}); the zero-correlation assumption is in doubt",
            diag.slope.t
        ));
    }
    if let Some(path) = &args.plot_csv {
        let f = File::create(path)
            .with_context(|| format!("creating {}", path.display()))
            .map_err(Failure::runtime)?;
        write_plot_csv(&rows, f).map_err(diagnostics_failure)?;
    }

    let report = Report {
        command: "diagnose",
        config: json!({ "args": to_value(args), "design": to_value(&spec), "moment_options": to_value(&opts) }),
        result: json!({
            "itt_lc": to_value(&fitted.effects.itt_lc),
            "itt_hc": to_value(&fitted.effects.itt_hc),
            "contrast": to_value(&fitted.effects.contrast),
            "diagnostics": to_value(&diag),
            "plot": to_value(&rows),
        }),
        warnings,
    };
    report.emit(
        &args.output,
        || {
            let s = &diag.slope;
            let mut out = format!(
                "Slope of studentized residuals on phi: {} (SE {}, t {}, critical {}) -> {}\n",
                num(s.slope, 4),
                num(s.slope_se, 4),
                num(s.t, 3),
                num(s.critical_value, 3),
                if s.violation { "violation" } else { "no violation" }
            );
            out.push_str(&format!("Mean residual {} pp\n\n", pp(diag.mean_residual)));
            let mut b = Table::new("Residual spread by phi", &["bin", "sites", "SD (pp)"]);
            for bin in &diag.bins {
                b.row(vec![bin.label.clone(), bin.sites.to_string(), bin.residual_sd.map_or("NA".into(), pp)]);
            }
            out.push_str(&b.render());
            out.push_str(&format!("{}\n\n", diag.heteroskedasticity_note));
            let mut t = Table::new(
                "Sites (LATE, fitted and residual in pp)",
                &["site", "phi", "LATE", "fitted", "residual", "studentized", "leverage"],
            );
            for i in 0..diag.site_ids.len() {
                t.row(vec![
                    diag.site_ids[i].clone(),
                    num(diag.phi[i], 3),
                    pp(diag.response[i]),
                    pp(diag.fitted[i]),
                    pp(diag.residuals[i]),
                    num(diag.studentized[i], 3),
                    num(diag.leverage[i], 3),
                ]);
            }
            out.push_str(&t.render());
            out
        },
        || {
            let mut buf = Vec::new();
            write_plot_csv(&rows, &mut buf)?;
            Ok(String::from_utf8(buf)?)
        },
    )
}

fn read_scenario(path: &Path) -> anyhow::Result<DgpSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    Ok(if is_toml {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    })
}

pub fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mut spec = match &args.scenario {
        Some(p) => read_scenario(p).map_err(Failure::validation)?,
        None => match args.dgp.map(DgpKind::from).unwrap_or(DgpKind::Simple) {
            DgpKind::Simple => DgpSpec::simple(38, 0.0, 0.0),
            DgpKind::Calibrated => DgpSpec::calibrated(0.0, 0.0),
        },
    };
    if let Some(d) = args.dgp {
        if DgpKind::from(d) != spec.kind {
            return Err(Failure::validation(anyhow!(
                "--dgp {:?} disagrees with the scenario's kind {:?}",
                d,
                spec.kind
            )));
        }
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(simulation_failure)?;
    let template = match spec.kind {
        DgpKind::Simple => None,
        DgpKind::Calibrated => Some(match &args.template {
            Some(path) => {
                let schema = ColumnSchema { covariates: vec!["read".into()], ..Default::default() };
                ingest_csv(path, &schema).map_err(data_failure)?
            }
            None => synthetic_template(TEMPLATE_SEED),
        }),
    };
    let cfg = MonteCarloConfig {
        reps: args.reps,
        seed: spec.seed,
        estimators: args.estimators.iter().map(|&e| e.into()).collect(),
        adjustments: args.adjustments.iter().map(|&a| a.into()).collect(),
        bootstrap_replicates: args.bootstrap_reps,
        target: args.target.into(),
        hc: args.hc.into(),
        level: args.level,
    };
    let report = run_monte_carlo(&spec, &cfg, template.as_ref()).map_err(simulation_failure)?;
    let level = match args.level_check {
        Some(reps) => Some(
            slope_test_level(&spec, reps, spec.seed, template.as_ref()).map_err(simulation_failure)?,
        ),
        None => None,
    };
    let mut warnings = Vec::new();
    for c in &report.cells {
        if c.failures > 0 {
            warnings.push(format!(
                "{:?}/{:?}/{:?}: {} of {} replicates produced no estimate",
                c.estimator, c.adjustment, c.effect, c.failures, report.reps
            ));
        }
    }

    let out = Report {
        command: "simulate",
        config: json!({ "args": to_value(args), "dgp": to_value(&spec), "monte_carlo": to_value(&cfg) }),
        result: json!({ "report": to_value(&report), "level_check": to_value(&level) }),
        warnings,
    };
    out.emit(
        &args.output,
        || {
            let mut t = Table::new(
                format!(
                    "{} replicates; mean truth ITT_lc {} pp, ITT_hc {} pp (bias, SEs and RMSE in pp; coverage in %)",
                    report.reps,
                    pp(report.mean_truth_lc),
                    pp(report.mean_truth_hc)
                ),
                &["estimator", "adjustment", "effect", "n", "bias", "MCSE", "emp SE", "est SE", "RMSE", "coverage", "SE ratio"],
            );
            for c in &report.cells {
                t.row(vec![
                    format!("{:?}", c.estimator),
                    format!("{:?}", c.adjustment),
                    format!("{:?}", c.effect),
                    c.n.to_string(),
                    pp(c.bias),
                    pp(c.bias_mcse),
                    pp(c.empirical_se),
                    pp(c.mean_estimated_se),
                    pp(c.rmse),
                    pp(c.coverage),
                    num(c.se_ratio, 3),
                ]);
            }
            let mut out = t.render();
            if let Some(l) = &level {
                out.push_str(&format!(
                    "\nSlope test rejection rate {} % over {} replicates\n",
                    pp(l.rate),
                    l.reps
                ));
            }
            out
        },
        || {
            csv_string(|w| {
                w.write_record([
                    "estimator", "adjustment", "effect", "n", "failures", "bias", "bias_mcse", "empirical_se",
                    "mean_estimated_se", "rmse", "coverage", "coverage_mcse", "se_ratio",
                ])?;
                for c in &report.cells {
                    let mut rec = vec![
                        to_value(&c.estimator).as_str().unwrap_or_default().to_string(),
                        to_value(&c.adjustment).as_str().unwrap_or_default().to_string(),
                        to_value(&c.effect).as_str().unwrap_or_default().to_string(),
                        c.n.to_string(),
                        c.failures.to_string(),
                    ];
                    rec.extend(
                        [
                            c.bias, c.bias_mcse, c.empirical_se, c.mean_estimated_se, c.rmse,
                            c.coverage, c.coverage_mcse, c.se_ratio,
                        ]
                        .iter()
                        .map(|v| v.to_string()),
                    );
                    w.write_record(rec)?;
                }
                Ok(())
            })
        },
    )
}

pub fn fixture(args: &FixtureArgs) -> Result<(), Failure> {
    let (ds, schema) = match args.name {
        FixtureName::Table1 => (table1_dataset(), ColumnSchema::default()),
        FixtureName::Template => (
            synthetic_template(TEMPLATE_SEED),
            ColumnSchema { covariates: vec!["read".into()], ..Default::default() },
        ),
    };
    let f = File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::runtime)?;
    write_csv(&ds, &schema, f).map_err(|e| Failure::runtime(e.into()))
}
