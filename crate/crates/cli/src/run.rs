use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use sace_core::data::{load_csv, TrialData};
use sace_core::estimators::{fit_models, EstimateReport, EstimationOptions, FittedModels};
use sace_core::glm::NuisanceFit;
use sace_core::inference::estimate;
use sace_core::sensitivity::{max_common_rho, mo_grid, pi_grid, GridAxis, GridRow, MoGridSpec, PiGridSpec};
use sace_core::simulation::{run_monte_carlo_with_truths, true_values, ScenarioConfig, ORACLE_SEED, SUPER_POPULATION};
use sace_core::strata::{balance_table, MarginalSource, StratumId};
use sace_core::{Error, Result};

use crate::config::{self, Command, Format, RunConfig};

/// Files written and notes collected by a successful run.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    pub details: Value,
}

/// Everything a command needs besides the parsed config.
pub struct Context<'a> {
    pub config: &'a RunConfig,
    /// Directory against which relative paths in the config resolve.
    pub base: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

impl Context<'_> {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

pub fn execute(command: Command, ctx: &Context) -> Result<Outcome> {
    fs::create_dir_all(&ctx.out)?;
    match command {
        Command::Estimate => run_estimate(ctx),
        Command::Diagnose => run_diagnose(ctx),
        Command::Sensitivity => run_sensitivity(ctx),
        Command::Simulate => run_simulate(ctx),
    }
}

fn load(ctx: &Context) -> Result<(TrialData, FittedModels)> {
    let cfg = ctx.config;
    let d = cfg.data.as_ref().ok_or_else(|| Error::Validation("this command needs a 'data' section".into()))?;
    let raw = load_csv(ctx.resolve(&d.path), &d.columns, d.arms, None)?;
    let data = raw.with_pi(cfg.pi(raw.arms()))?;
    let specs = cfg.models.resolve(&data, &cfg.design)?;
    let models = fit_models(&data, &specs)?;
    Ok((data, models))
}

fn options(cfg: &RunConfig) -> EstimationOptions {
    EstimationOptions { or_marginals: cfg.or_marginals.unwrap_or(MarginalSource::Nonparametric), level: cfg.ci_level }
}

fn stratum_label(s: StratumId) -> String {
    s.monotone_index().map(|g| g.to_string()).unwrap_or_else(|| s.to_string())
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct EstimateRow {
    stratum: String,
    z: usize,
    zprime: usize,
    method: String,
    estimate: f64,
    se: f64,
    ci_lo: f64,
    ci_hi: f64,
    level: f64,
    models: String,
    warnings: Vec<String>,
}

impl EstimateRow {
    fn new(r: &EstimateReport, models: &str) -> Self {
        Self {
            stratum: stratum_label(r.estimand.stratum),
            z: r.estimand.z,
            zprime: r.estimand.zprime.unwrap_or(r.estimand.z),
            method: r.method.clone(),
            estimate: r.point,
            se: r.se,
            ci_lo: r.ci.0,
            ci_hi: r.ci.1,
            level: r.level,
            models: models.to_string(),
            warnings: r.warnings.clone(),
        }
    }
}

fn run_estimate(ctx: &Context) -> Result<Outcome> {
    let cfg = ctx.config;
    let (data, models) = load(ctx)?;
    let estimands = cfg.estimands.resolve(data.arms())?;
    let methods = cfg.methods.iter().map(|m| config::method(m)).collect::<Result<Vec<_>>>()?;
    let provenance = cfg.models.describe(&cfg.design);
    let mut rows = Vec::new();
    let mut warnings = BTreeSet::new();
    for m in &methods {
        let est = estimate(&data, &models, m, &estimands, &options(cfg))?;
        warnings.extend(est.warnings.iter().map(|w| format!("{}: {w}", m.tag())));
        rows.extend(est.contrasts.iter().map(|r| EstimateRow::new(r, &provenance)));
    }
    let mut out = Outcome { warnings: warnings.into_iter().collect(), ..Default::default() };
    if cfg.wants(Format::Csv) {
        let path = ctx.out.join("estimates.csv");
        let mut w = writer(&path)?;
        w.write_record(["stratum", "z", "zprime", "method", "estimate", "se", "ci_lo", "ci_hi", "level", "models"])?;
        for r in &rows {
            w.write_record([
                r.stratum.clone(),
                r.z.to_string(),
                r.zprime.to_string(),
                r.method.clone(),
                r.estimate.to_string(),
                r.se.to_string(),
                r.ci_lo.to_string(),
                r.ci_hi.to_string(),
                r.level.to_string(),
                r.models.clone(),
            ])?;
        }
        w.flush()?;
        out.outputs.push("estimates.csv".into());
    }
    if cfg.wants(Format::Json) {
        write_json(&ctx.out.join("estimates.json"), &rows)?;
        out.outputs.push("estimates.json".into());
    }
    Ok(out)
}

fn fit_summary(name: String, f: &NuisanceFit) -> Value {
    json!({ "model": name, "converged": f.converged, "iterations": f.iterations })
}

fn run_diagnose(ctx: &Context) -> Result<Outcome> {
    let cfg = ctx.config;
    let (data, models) = load(ctx)?;
    let source = if data.pi().is_some() { MarginalSource::Nonparametric } else { MarginalSource::ModelBased };
    let ps = models.principal_scores(&data, source)?;
    let rows = balance_table(&data, &ps)?;
    let mut out = Outcome::default();
    let path = ctx.out.join("balance.csv");
    let mut w = writer(&path)?;
    w.write_record(["stratum", "z", "covariate", "smd"])?;
    for r in &rows {
        w.write_record([
            stratum_label(r.stratum),
            r.arm.to_string(),
            r.covariate.clone(),
            r.smd.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    out.outputs.push("balance.csv".into());

    let arms = data.arms();
    let mut fits: Vec<Value> =
        models.survival.iter().enumerate().map(|(k, f)| fit_summary(format!("survival arm {}", k + 1), f)).collect();
    fits.extend(models.outcome.iter().enumerate().map(|(k, f)| fit_summary(format!("outcome {k}"), f)));
    if let Some(p) = &models.propensity {
        fits.push(fit_summary("propensity".into(), p));
    }
    let marginals: Vec<f64> = (0..=arms).map(|g| ps.e_marginal(g)).collect();
    let mut details = json!({
        "n": data.n(),
        "arms": arms,
        "fits": fits,
        "stratum_shares": marginals,
        "clamped_probabilities": ps.clamped,
        "negative_scores": ps.negative_scores,
    });
    if ps.negative_scores > 0 {
        out.warnings.push(format!("{} fitted stratum scores were negative and clamped at 0", ps.negative_scores));
    }
    if let Some(mo) = cfg.sensitivity.as_ref().and_then(|s| s.mo.as_ref()) {
        let bound = max_common_rho(arms, mo.reference, &mo.harmed()?, &marginals);
        details["max_common_rho"] = if bound.is_finite() { json!(bound) } else { json!("unbounded") };
    }
    write_json(&ctx.out.join("diagnostics.json"), &details)?;
    out.outputs.push("diagnostics.json".into());
    out.details = details;
    Ok(out)
}

fn run_sensitivity(ctx: &Context) -> Result<Outcome> {
    let cfg = ctx.config;
    let sens = cfg.sensitivity.as_ref().ok_or_else(|| Error::Validation("this command needs a 'sensitivity' section".into()))?;
    if sens.pi.is_none() && sens.mo.is_none() {
        return Err(Error::Validation("sensitivity section lists neither a 'pi' nor an 'mo' grid".into()));
    }
    let (data, models) = load(ctx)?;
    let estimands = cfg.estimands.resolve(data.arms())?;
    let opts = options(cfg);
    let mut rows: Vec<GridRow> = Vec::new();
    if let Some(pi) = &sens.pi {
        let grid = PiGridSpec {
            form: pi.form.into(),
            fixed: pi.fixed.iter().map(|f| (f.stratum, f.value)).collect(),
            vary: pi.vary.iter().map(|a| (a.stratum, GridAxis { lo: a.lo, hi: a.hi, steps: a.steps })).collect(),
        };
        rows.extend(pi_grid(&data, &models, &grid, &estimands, &opts)?);
    }
    if let Some(mo) = &sens.mo {
        let grid = MoGridSpec { form: mo.form.into(), reference: mo.reference, harmed: mo.harmed()?, rho: mo.rho };
        rows.extend(mo_grid(&data, &models, &grid, &estimands, &opts)?);
    }
    if rows.is_empty() {
        return Err(Error::Validation("sensitivity grid has no points".into()));
    }
    if rows.iter().all(|r| !r.feasible) {
        let reason = rows[0].reason.clone().unwrap_or_default();
        return Err(Error::Infeasible(format!("no grid point is feasible ({reason})")));
    }

    let mut out = Outcome::default();
    let failed = rows.iter().filter(|r| r.report.is_none()).count();
    if failed > 0 {
        out.warnings.push(format!("{failed} of {} grid rows have no estimate", rows.len()));
    }
    let mut params: Vec<String> = Vec::new();
    for r in &rows {
        for (name, _) in &r.params {
            if !params.contains(name) {
                params.push(name.clone());
            }
        }
    }
    let provenance = cfg.models.describe(&cfg.design);
    let path = ctx.out.join("grid.csv");
    let mut w = writer(&path)?;
    let mut head = params.clone();
    head.extend(
        ["stratum", "z", "zprime", "method", "estimate", "se", "ci_lo", "ci_hi", "feasible", "reason", "models"]
            .map(String::from),
    );
    w.write_record(&head)?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        let mut rec: Vec<String> = params
            .iter()
            .map(|p| num(r.params.iter().find(|(n, _)| n == p).map(|(_, v)| *v)))
            .collect();
        let rep = r.report.as_ref();
        rec.extend([
            stratum_label(r.estimand.stratum),
            r.estimand.z.to_string(),
            r.estimand.zprime.to_string(),
            r.method.clone(),
            num(rep.map(|c| c.point)),
            num(rep.map(|c| c.se)),
            num(rep.map(|c| c.ci.0)),
            num(rep.map(|c| c.ci.1)),
            r.feasible.to_string(),
            r.reason.clone().unwrap_or_default(),
            provenance.clone(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    out.outputs.push("grid.csv".into());
    if cfg.wants(Format::Json) {
        write_json(&ctx.out.join("grid.json"), &rows)?;
        out.outputs.push("grid.json".into());
    }
    Ok(out)
}

fn run_simulate(ctx: &Context) -> Result<Outcome> {
    let cfg = ctx.config;
    let sim = cfg.simulation.as_ref().ok_or_else(|| Error::Validation("this command needs a 'simulation' section".into()))?;
    let methods = sim.methods.iter().map(|m| config::mc_method(m)).collect::<Result<Vec<_>>>()?;
    let scenario = ScenarioConfig {
        kind: sim.scenario,
        n: sim.n,
        reps: sim.reps,
        seed: ctx.seed,
        ps_correct: sim.ps_correct,
        om_correct: sim.om_correct,
    };
    scenario.validate()?;
    let cache = sim.truth_cache.as_ref().map(|p| ctx.resolve(p));
    let truths = true_values(&sim.scenario, sim.oracle_seed.unwrap_or(ORACLE_SEED), SUPER_POPULATION, cache.as_deref())?;
    let report = run_monte_carlo_with_truths(&scenario, &methods, &truths)?;

    let mut out = Outcome::default();
    for r in &report.rows {
        let rate = r.failures as f64 / sim.reps as f64;
        if rate >= 0.01 {
            out.warnings.push(format!("{} Delta_{}({},{}): {} of {} replicates failed", r.method, r.g, r.z, r.zprime, r.failures, sim.reps));
        }
    }
    if cfg.wants(Format::Csv) {
        report.write_csv(ctx.out.join("mc_report.csv"))?;
        out.outputs.push("mc_report.csv".into());
    }
    if cfg.wants(Format::Json) {
        report.write_json(ctx.out.join("mc_report.json"))?;
        out.outputs.push("mc_report.json".into());
    }
    Ok(out)
}
