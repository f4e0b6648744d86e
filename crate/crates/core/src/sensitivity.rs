//! Sensitivity analyses for departures from principal ignorability (ratios `delta_zg` of
//! stratum outcome means relative to the top stratum) and from monotonicity (ratios `rho`
//! of harmed-stratum prevalence relative to a reference stratum).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::TrialData;
use crate::error::{invalid, Error, Result};
use crate::estimators::{BcForm, EstimateReport, EstimationOptions, FittedModels, Method};
use crate::inference::estimate;
use crate::strata::{enumerate_strata, stratum_score, EstimandSpec, MarginalSource, PrincipalScores, StratumId};

/// Per-unit sensitivity function `(z, g, x) -> delta_zg(x)`.
pub type DeltaFn = Arc<dyn Fn(usize, usize, &[f64]) -> f64 + Send + Sync>;

/// Departure from principal ignorability, relative to the top stratum (`delta_zJ = 1`).
#[derive(Clone)]
pub struct PiSensitivitySpec {
    arms: usize,
    constants: BTreeMap<(usize, usize), f64>,
    function: Option<DeltaFn>,
}

impl fmt::Debug for PiSensitivitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PiSensitivitySpec")
            .field("arms", &self.arms)
            .field("constants", &self.constants)
            .field("covariate_dependent", &self.function.is_some())
            .finish()
    }
}

impl PiSensitivitySpec {
    /// Principal ignorability (`delta == 1`).
    pub fn identity(arms: usize) -> Self {
        Self { arms, constants: BTreeMap::new(), function: None }
    }

    /// Constant `delta_zg` entries keyed by `(z, g)`; omitted entries are 1.
    pub fn constant(arms: usize, entries: impl IntoIterator<Item = ((usize, usize), f64)>) -> Result<Self> {
        let mut constants = BTreeMap::new();
        for ((z, g), d) in entries {
            if z < 1 || z > arms || g > arms || g + z < arms + 1 {
                return invalid(format!("delta_({z},{g}) is not defined for J = {arms}"));
            }
            if !(d > 0.0 && d.is_finite()) {
                return invalid(format!("delta_({z},{g}) = {d} must be positive"));
            }
            if g == arms && d != 1.0 {
                return invalid(format!("delta_({z},{arms}) is the reference and must equal 1"));
            }
            constants.insert((z, g), d);
        }
        Ok(Self { arms, constants, function: None })
    }

    /// `delta_zg = delta_g` for every arm `z` where the stratum survives.
    pub fn treatment_invariant(arms: usize, by_stratum: &[(usize, f64)]) -> Result<Self> {
        let mut entries = Vec::new();
        for &(g, d) in by_stratum {
            if g == 0 || g > arms {
                return invalid(format!("stratum {g} has no defined outcome mean"));
            }
            for z in (arms + 1 - g)..=arms {
                entries.push(((z, g), d));
            }
        }
        Self::constant(arms, entries)
    }

    /// Normalizes ratios given against arbitrary scale: `delta_zg = raw_zg / raw_zJ`.
    pub fn from_reference(arms: usize, raw: &BTreeMap<(usize, usize), f64>) -> Result<Self> {
        let mut entries = Vec::new();
        for (&(z, g), &d) in raw {
            let top = raw.get(&(z, arms)).copied().unwrap_or(1.0);
            if !(top > 0.0) {
                return invalid(format!("reference value for arm {z} must be positive"));
            }
            if g != arms {
                entries.push(((z, g), d / top));
            }
        }
        Self::constant(arms, entries)
    }

    /// Covariate-dependent functions. Values at `g = J` are ignored (fixed at 1).
    pub fn function(arms: usize, f: DeltaFn) -> Self {
        Self { arms, constants: BTreeMap::new(), function: Some(f) }
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn constants(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.constants
    }

    pub fn value(&self, z: usize, g: usize, x: &[f64]) -> f64 {
        if g == self.arms {
            return 1.0;
        }
        match &self.function {
            Some(f) => f(z, g, x),
            None => self.constants.get(&(z, g)).copied().unwrap_or(1.0),
        }
    }

    /// Evaluates every defined `delta_zg` on the units of `data`.
    pub fn table(&self, data: &TrialData) -> Result<DeltaTable> {
        let arms = self.arms;
        if arms != data.arms() {
            return invalid("sensitivity specification and data have different arm counts");
        }
        let n = data.n();
        let mut cols = vec![DeltaColumn::Const(1.0); (arms + 1) * (arms + 1)];
        for z in 1..=arms {
            for g in (arms + 1 - z)..arms {
                let col = match &self.function {
                    None => DeltaColumn::Const(self.value(z, g, &[])),
                    Some(f) => {
                        let mut row = vec![0.0; data.x().ncols()];
                        let vals: Vec<f64> = (0..n)
                            .map(|i| {
                                for (c, r) in row.iter_mut().enumerate() {
                                    *r = data.x()[(i, c)];
                                }
                                f(z, g, &row)
                            })
                            .collect();
                        if let Some(bad) = vals.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                            return invalid(format!("delta_({z},{g}) evaluated to {bad}"));
                        }
                        DeltaColumn::Unit(vals)
                    }
                };
                cols[z * (arms + 1) + g] = col;
            }
        }
        Ok(DeltaTable { arms, cols })
    }
}

#[derive(Debug, Clone)]
enum DeltaColumn {
    Const(f64),
    Unit(Vec<f64>),
}

/// `delta_zg(X_i)` evaluated on one dataset.
#[derive(Debug, Clone)]
pub struct DeltaTable {
    arms: usize,
    cols: Vec<DeltaColumn>,
}

impl DeltaTable {
    /// Table from raw values `f(z, g, i)` without normalization against the top stratum.
    /// The estimators are invariant to a common rescaling of `delta_z.`, which this exposes.
    pub fn raw(arms: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut cols = vec![DeltaColumn::Const(1.0); (arms + 1) * (arms + 1)];
        for z in 1..=arms {
            for g in (arms + 1 - z)..=arms {
                cols[z * (arms + 1) + g] = DeltaColumn::Unit((0..n).map(|i| f(z, g, i)).collect());
            }
        }
        Self { arms, cols }
    }

    pub fn value(&self, z: usize, g: usize, i: usize) -> f64 {
        match &self.cols[z * (self.arms + 1) + g] {
            DeltaColumn::Const(c) => *c,
            DeltaColumn::Unit(v) => v[i],
        }
    }
}

/// Sensitivity weights `Omega_zg(X_i)` for the given principal scores.
pub fn omega_weights(ps: &PrincipalScores, table: &DeltaTable, g: usize, z: usize) -> Result<Vec<f64>> {
    let arms = ps.arms();
    crate::strata::check_mean(StratumId::monotone(arms, g), z)?;
    (0..ps.n())
        .map(|i| {
            let (mut weighted, mut total) = (0.0, 0.0);
            for h in (arms + 1 - z)..=arms {
                let e = ps.e(i, h);
                weighted += table.value(z, h, i) * e;
                total += e;
            }
            if !(weighted > 0.0) {
                return Err(Error::Numerical(format!("unit {i}: sensitivity weight denominator {weighted}")));
            }
            Ok(table.value(z, g, i) * total / weighted)
        })
        .collect()
}

/// Per-unit `rho` for a harmed stratum.
pub type RhoFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Rho {
    Constant(f64),
    Function(RhoFn),
}

impl fmt::Debug for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rho::Constant(c) => write!(f, "{c}"),
            Rho::Function(_) => f.write_str("<function>"),
        }
    }
}

/// Departure from monotonicity: prevalence of each harmed stratum relative to stratum `reference`.
#[derive(Debug, Clone)]
pub struct MoSensitivitySpec {
    arms: usize,
    reference: usize,
    rho: Vec<(StratumId, Rho)>,
}

impl MoSensitivitySpec {
    pub fn new(arms: usize, reference: usize, rho: Vec<(StratumId, Rho)>) -> Result<Self> {
        if reference > arms {
            return invalid(format!("reference stratum {reference} exceeds J = {arms}"));
        }
        let mut seen = Vec::new();
        for (s, r) in &rho {
            if s.arms() != arms {
                return invalid(format!("stratum {s} does not have {arms} arms"));
            }
            if s.is_monotone() {
                return invalid(format!("stratum {s} is monotone, not harmed"));
            }
            if seen.contains(s) {
                return invalid(format!("stratum {s} listed twice"));
            }
            seen.push(*s);
            if let Rho::Constant(c) = r {
                if !(*c >= 0.0 && c.is_finite()) {
                    return invalid(format!("rho for {s} must be nonnegative, got {c}"));
                }
            }
        }
        Ok(Self { arms, reference, rho })
    }

    /// Monotonicity holds.
    pub fn monotone(arms: usize) -> Self {
        Self { arms, reference: 0, rho: Vec::new() }
    }

    /// The same constant for each listed harmed stratum.
    pub fn equal(arms: usize, reference: usize, harmed: &[StratumId], rho: f64) -> Result<Self> {
        Self::new(arms, reference, harmed.iter().map(|&s| (s, Rho::Constant(rho))).collect())
    }

    /// The same constant for every non-monotone stratum.
    pub fn all_harmed(arms: usize, reference: usize, rho: f64) -> Result<Self> {
        let harmed: Vec<StratumId> = enumerate_strata(arms, false).into_iter().filter(|s| !s.is_monotone()).collect();
        Self::equal(arms, reference, &harmed, rho)
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn harmed(&self) -> Vec<StratumId> {
        self.rho.iter().map(|(s, _)| *s).collect()
    }

    pub fn is_harmed(&self, s: StratumId) -> bool {
        self.rho.iter().any(|(h, _)| *h == s)
    }

    /// Common constant when all harmed strata share one.
    pub fn common_constant(&self) -> Option<f64> {
        let mut vals = self.rho.iter().map(|(_, r)| match r {
            Rho::Constant(c) => Some(*c),
            Rho::Function(_) => None,
        });
        let first = vals.next()??;
        vals.all(|v| v == Some(first)).then_some(first)
    }

    /// Evaluates `rho` and the cumulative sums `q_z` on the units of `data`.
    pub fn weights(&self, data: &TrialData) -> Result<MoWeights> {
        if self.arms != data.arms() {
            return invalid("sensitivity specification and data have different arm counts");
        }
        let x = data.x();
        let rows: Vec<Vec<f64>> = (0..data.n()).map(|i| x.row(i).iter().copied().collect()).collect();
        self.weights_for_rows(&rows)
    }

    pub fn weights_for_rows(&self, rows: &[Vec<f64>]) -> Result<MoWeights> {
        let n = rows.len();
        let arms = self.arms;
        let mut rho = Vec::with_capacity(self.rho.len());
        for (s, r) in &self.rho {
            let vals: Vec<f64> = match r {
                Rho::Constant(c) => vec![*c; n],
                Rho::Function(f) => rows.iter().map(|x| f(x)).collect(),
            };
            if let Some(bad) = vals.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return invalid(format!("rho for {s} evaluated to {bad}"));
            }
            rho.push((*s, vals));
        }
        let mut q = DMatrix::zeros(n, arms + 2);
        for (s, vals) in &rho {
            for i in 0..n {
                for z in 1..=arms {
                    if s.survives(z) {
                        q[(i, z)] += vals[i];
                    }
                }
                q[(i, arms + 1)] += vals[i];
            }
        }
        let r = self.reference;
        for i in 0..n {
            let d = 1.0 + q[(i, arms - r + 1)] - q[(i, arms - r)];
            if !(d > 0.0) {
                return Err(Error::Infeasible(format!("unit {i}: 1 + q difference for the reference stratum is {d}")));
            }
        }
        Ok(MoWeights { arms, reference: r, q, rho })
    }
}

/// `rho` and `q` evaluated on one dataset.
#[derive(Debug, Clone)]
pub struct MoWeights {
    pub arms: usize,
    pub reference: usize,
    /// n x (J+2) cumulative prevalence ratios.
    pub q: DMatrix<f64>,
    pub rho: Vec<(StratumId, Vec<f64>)>,
}

impl MoWeights {
    /// Stratum score for `stratum` from per-stratum monotone differences `diff(g)` of any
    /// survival functional (fitted probabilities, influence terms or indicators).
    pub fn combine(&self, i: usize, stratum: StratumId, diff: impl Fn(usize) -> f64) -> f64 {
        let (j, r) = (self.arms, self.reference);
        let qd = |g: usize| self.q[(i, j - g + 1)] - self.q[(i, j - g)];
        let base = diff(r) / (1.0 + qd(r));
        match stratum.monotone_index() {
            Some(g) => diff(g) - qd(g) * base,
            None => self.rho.iter().find(|(s, _)| *s == stratum).map(|(_, v)| v[i] * base).unwrap_or(0.0),
        }
    }
}

/// Principal scores for monotone and harmed strata.
#[derive(Debug, Clone)]
pub struct MoScores {
    pub q: DMatrix<f64>,
    /// Monotone strata by `g`, followed by the harmed strata of the specification.
    pub strata: Vec<StratumId>,
    /// n x |strata|.
    pub e: DMatrix<f64>,
    /// Same shape as `e`, when influence terms were supplied.
    pub psi_star: Option<DMatrix<f64>>,
}

/// Stratum scores under a monotonicity departure. `psi_s` (n x (J+2)) adds the
/// influence-term analogue.
pub fn mo_scores(ps: &PrincipalScores, psi_s: Option<&DMatrix<f64>>, weights: &MoWeights) -> Result<MoScores> {
    let arms = ps.arms();
    let n = ps.n();
    let mut strata: Vec<StratumId> = enumerate_strata(arms, true);
    strata.extend(weights.rho.iter().map(|(s, _)| *s));
    let mut e = DMatrix::zeros(n, strata.len());
    let mut psi_star = psi_s.map(|_| DMatrix::zeros(n, strata.len()));
    for i in 0..n {
        for (c, &s) in strata.iter().enumerate() {
            let v = weights.combine(i, s, |g| stratum_score(&ps.p, i, arms, g));
            if v < -1e-9 {
                return Err(Error::Infeasible(format!("implied score for stratum {s} is {v} at unit {i}")));
            }
            e[(i, c)] = v.max(0.0);
            if let (Some(out), Some(psi)) = (psi_star.as_mut(), psi_s) {
                out[(i, c)] = weights.combine(i, s, |g| psi[(i, arms - g + 1)] - psi[(i, arms - g)]);
            }
        }
    }
    Ok(MoScores { q: weights.q.clone(), strata, e, psi_star })
}

/// Outcome of a feasibility check.
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Implied marginal stratum shares (monotone strata by g, then harmed strata).
    pub implied: Vec<(StratumId, f64)>,
    pub marginal_min: f64,
    /// Minimum over units and strata when principal scores were supplied.
    pub pointwise_min: Option<f64>,
    /// Largest common constant rho keeping all implied marginals nonnegative (when the
    /// specification is a common constant over its harmed strata).
    pub max_equal_rho: Option<f64>,
}

/// Checks that the implied stratum shares are nonnegative. `marginals` holds the monotone
/// shares `e_0..e_J` estimated without harmed strata. When `pointwise` is supplied the
/// implied scores are also checked unit by unit.
pub fn feasibility(
    pointwise: Option<(&PrincipalScores, &MoWeights)>,
    spec: &MoSensitivitySpec,
    marginals: &[f64],
) -> Result<FeasibilityReport> {
    let arms = spec.arms();
    if marginals.len() != arms + 1 {
        return invalid(format!("expected {} marginal shares", arms + 1));
    }
    let mut strata = enumerate_strata(arms, true);
    strata.extend(spec.harmed());
    // Covariate-dependent rho is checked pointwise only.
    let constant = spec.rho.iter().all(|(_, r)| matches!(r, Rho::Constant(_)));
    let (implied, marginal_min) = if constant {
        match spec.weights_for_rows(&[vec![]]) {
            Ok(w) => {
                let implied: Vec<(StratumId, f64)> =
                    strata.iter().map(|&s| (s, w.combine(0, s, |g| marginals[g]))).collect();
                let min = implied.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
                (implied, min)
            }
            Err(_) => (Vec::new(), f64::NEG_INFINITY),
        }
    } else {
        (Vec::new(), f64::NAN)
    };
    let pointwise_min = pointwise.map(|(ps, w)| {
        (0..ps.n())
            .flat_map(|i| strata.iter().map(move |&s| (i, s)))
            .map(|(i, s)| w.combine(i, s, |g| stratum_score(&ps.p, i, arms, g)))
            .fold(f64::INFINITY, f64::min)
    });
    let max_equal_rho = spec.common_constant().map(|_| max_common_rho(arms, spec.reference(), &spec.harmed(), marginals));
    let feasible = (marginal_min.is_nan() || marginal_min >= -1e-9) && pointwise_min.is_none_or(|m| m >= -1e-9);
    Ok(FeasibilityReport { feasible, implied, marginal_min, pointwise_min, max_equal_rho })
}

/// Supremum of a common constant rho over `harmed` keeping implied marginals nonnegative.
/// Returns infinity when unbounded and 0 when infeasible already at rho = 0.
pub fn max_common_rho(arms: usize, reference: usize, harmed: &[StratumId], marginals: &[f64]) -> f64 {
    let count = |k: usize| -> f64 {
        if k == arms + 1 {
            harmed.len() as f64
        } else {
            harmed.iter().filter(|s| s.survives(k)).count() as f64
        }
    };
    let slope = |g: usize| count(arms - g + 1) - count(arms - g);
    let d_ref = slope(reference);
    let e_ref = marginals[reference];
    if marginals.iter().any(|&e| e < 0.0) {
        return 0.0;
    }
    let mut bound = f64::INFINITY;
    if d_ref < 0.0 {
        bound = bound.min(-1.0 / d_ref);
    }
    for (g, &e_g) in marginals.iter().enumerate() {
        // e_g (1 + rho d_ref) - rho slope_g e_ref >= 0
        let k = d_ref * e_g - slope(g) * e_ref;
        if k < 0.0 {
            bound = bound.min(e_g / -k);
        }
    }
    bound
}

/// Range of one grid parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl GridAxis {
    pub fn points(&self) -> Vec<f64> {
        match self.steps {
            0 => Vec::new(),
            1 => vec![self.lo],
            k => (0..k).map(|t| self.lo + (self.hi - self.lo) * t as f64 / (k - 1) as f64).collect(),
        }
    }
}

/// Treatment-invariant delta grid: some `delta_g` fixed, others varied on a Cartesian grid.
#[derive(Debug, Clone)]
pub struct PiGridSpec {
    pub form: BcForm,
    pub fixed: Vec<(usize, f64)>,
    pub vary: Vec<(usize, GridAxis)>,
}

/// Common-rho line over a set of harmed strata.
#[derive(Debug, Clone)]
pub struct MoGridSpec {
    pub form: BcForm,
    pub reference: usize,
    pub harmed: Vec<StratumId>,
    pub rho: GridAxis,
}

/// One grid point for one estimand.
#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub params: Vec<(String, f64)>,
    pub estimand: EstimandSpec,
    pub method: String,
    pub report: Option<EstimateReport>,
    pub feasible: bool,
    pub reason: Option<String>,
}

fn grid_rows(
    params: Vec<(String, f64)>,
    method_tag: String,
    estimands: &[EstimandSpec],
    outcome: Result<Vec<EstimateReport>>,
    feasible: bool,
) -> Vec<GridRow> {
    match outcome {
        Ok(reports) => estimands
            .iter()
            .zip(reports)
            .map(|(e, r)| GridRow {
                params: params.clone(),
                estimand: *e,
                method: method_tag.clone(),
                report: Some(r),
                feasible,
                reason: None,
            })
            .collect(),
        Err(err) => estimands
            .iter()
            .map(|e| GridRow {
                params: params.clone(),
                estimand: *e,
                method: method_tag.clone(),
                report: None,
                feasible: feasible && !matches!(err, Error::Infeasible(_)),
                reason: Some(err.to_string()),
            })
            .collect(),
    }
}

fn contrasts_for(
    data: &TrialData,
    models: &FittedModels,
    method: &Method,
    estimands: &[EstimandSpec],
    opts: &EstimationOptions,
) -> Result<Vec<EstimateReport>> {
    let est = estimate(data, models, method, estimands, opts)?;
    Ok(est.contrasts)
}

/// Bias-corrected estimates over a delta grid (points evaluated in parallel, output in grid order).
pub fn pi_grid(
    data: &TrialData,
    models: &FittedModels,
    grid: &PiGridSpec,
    estimands: &[EstimandSpec],
    opts: &EstimationOptions,
) -> Result<Vec<GridRow>> {
    if grid.vary.iter().any(|(_, a)| a.steps == 0) {
        return invalid("grid axis with zero steps");
    }
    let mut points: Vec<Vec<(usize, f64)>> = vec![grid.fixed.clone()];
    for (g, axis) in &grid.vary {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.points().into_iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((*g, v));
                    q
                })
            })
            .collect();
    }
    let rows: Vec<Vec<GridRow>> = points
        .par_iter()
        .map(|point| {
            let params: Vec<(String, f64)> = point.iter().map(|(g, v)| (format!("delta_{g}"), *v)).collect();
            let outcome = PiSensitivitySpec::treatment_invariant(data.arms(), point).and_then(|spec| {
                let method = Method::BcPi { form: grid.form, spec: Arc::new(spec) };
                contrasts_for(data, models, &method, estimands, opts)
            });
            let tag = Method::BcPi { form: grid.form, spec: Arc::new(PiSensitivitySpec::identity(data.arms())) }.tag();
            grid_rows(params, tag, estimands, outcome, true)
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Bias-corrected estimates along a rho line; infeasible points are skipped with a reason.
pub fn mo_grid(
    data: &TrialData,
    models: &FittedModels,
    grid: &MoGridSpec,
    estimands: &[EstimandSpec],
    opts: &EstimationOptions,
) -> Result<Vec<GridRow>> {
    let arms = data.arms();
    let source = if data.pi().is_some() { MarginalSource::Nonparametric } else { MarginalSource::ModelBased };
    let ps = models.principal_scores(data, source)?;
    let marginals: Vec<f64> = (0..=arms).map(|g| ps.e_marginal(g)).collect();
    let tag = Method::BcMo { form: grid.form, spec: Arc::new(MoSensitivitySpec::monotone(arms)) }.tag();
    let rows: Vec<Vec<GridRow>> = grid
        .rho
        .points()
        .par_iter()
        .map(|&rho| {
            let params = vec![("rho".to_string(), rho)];
            let spec = match MoSensitivitySpec::equal(arms, grid.reference, &grid.harmed, rho) {
                Ok(s) => s,
                Err(e) => return grid_rows(params, tag.clone(), estimands, Err(e), false),
            };
            let weights = match spec.weights(data) {
                Ok(w) => w,
                Err(e) => return grid_rows(params, tag.clone(), estimands, Err(e), false),
            };
            match feasibility(Some((&ps, &weights)), &spec, &marginals) {
                Ok(rep) if rep.feasible => {
                    let method = Method::BcMo { form: grid.form, spec: Arc::new(spec) };
                    grid_rows(params, tag.clone(), estimands, contrasts_for(data, models, &method, estimands, opts), true)
                }
                Ok(rep) => {
                    let reason = Error::Infeasible(format!(
                        "implied stratum share {:.4} (pointwise {:.4}) is negative",
                        rep.marginal_min,
                        rep.pointwise_min.unwrap_or(f64::NAN)
                    ));
                    grid_rows(params, tag.clone(), estimands, Err(reason), false)
                }
                Err(e) => grid_rows(params, tag.clone(), estimands, Err(e), false),
            }
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Rows are tiled three times so every arm has units.
    fn scores_from(rows: &[[f64; 3]]) -> PrincipalScores {
        let n = 3 * rows.len();
        let d = TrialData::new(
            3,
            (0..n).map(|i| i % 3 + 1).collect(),
            vec![false; n],
            vec![None; n],
            DMatrix::zeros(n, 1),
            None,
        )
        .unwrap();
        let probs = DMatrix::from_fn(n, 3, |i, k| rows[i % rows.len()][k]);
        PrincipalScores::from_probabilities(&d, &probs, MarginalSource::ModelBased, None).unwrap()
    }

    fn data_like(ps: &PrincipalScores) -> TrialData {
        let n = ps.n();
        TrialData::new(3, (0..n).map(|i| i % 3 + 1).collect(), vec![false; n], vec![None; n], DMatrix::zeros(n, 1), None).unwrap()
    }

    #[test]
    fn omega_unit_for_identity_and_common_scale() {
        let ps = scores_from(&[[0.3, 0.5, 0.9], [0.2, 0.6, 0.7], [0.4, 0.45, 0.95]]);
        let d = data_like(&ps);
        let id = PiSensitivitySpec::identity(3).table(&d).unwrap();
        for (g, z) in [(2, 2), (3, 1), (2, 3), (1, 3)] {
            assert!(omega_weights(&ps, &id, g, z).unwrap().iter().all(|w| (*w - 1.0).abs() < 1e-15));
        }
        let common = DeltaTable::raw(3, ps.n(), |_, _, _| 1.7);
        for (g, z) in [(2, 2), (3, 1), (2, 3), (1, 3)] {
            assert!(omega_weights(&ps, &common, g, z).unwrap().iter().all(|w| (*w - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn omega_hand_value() {
        // (e0,e1,e2,e3) = (0.1,0.4,0.2,0.3) corresponds to (p1,p2,p3) = (0.3,0.5,0.9).
        let ps = scores_from(&[[0.3, 0.5, 0.9]]);
        let d = data_like(&ps);
        let t = PiSensitivitySpec::constant(3, [((3, 1), 1.0), ((3, 2), 2.0)]).unwrap().table(&d).unwrap();
        let w = omega_weights(&ps, &t, 2, 3).unwrap()[0];
        assert!((w - 2.0 * 0.9 / (0.4 + 2.0 * 0.2 + 0.3)).abs() < 1e-12);
        assert!((w - 1.636_363_636_363_636_4).abs() < 1e-12);
    }

    #[test]
    fn delta_validation() {
        assert!(PiSensitivitySpec::constant(3, [((3, 3), 2.0)]).is_err());
        assert!(PiSensitivitySpec::constant(3, [((1, 2), 2.0)]).is_err());
        assert!(PiSensitivitySpec::constant(3, [((3, 2), -1.0)]).is_err());
        let raw: BTreeMap<(usize, usize), f64> = [((3, 2), 4.0), ((3, 3), 2.0)].into_iter().collect();
        let spec = PiSensitivitySpec::from_reference(3, &raw).unwrap();
        assert_eq!(spec.value(3, 2, &[]), 2.0);
        assert_eq!(spec.value(3, 3, &[]), 1.0);
        let inv = PiSensitivitySpec::treatment_invariant(3, &[(2, 0.5)]).unwrap();
        assert_eq!(inv.value(2, 2, &[]), 0.5);
        assert_eq!(inv.value(3, 2, &[]), 0.5);
    }

    #[test]
    fn zero_rho_gives_monotone_scores() {
        let ps = scores_from(&[[0.3, 0.5, 0.9], [0.2, 0.6, 0.7]]);
        let spec = MoSensitivitySpec::all_harmed(3, 0, 0.0).unwrap();
        let w = spec.weights(&data_like(&ps)).unwrap();
        let mo = mo_scores(&ps, None, &w).unwrap();
        for i in 0..2 {
            for g in 0..=3 {
                assert!((mo.e[(i, g)] - ps.e(i, g)).abs() < 1e-15);
            }
            for c in 4..mo.strata.len() {
                assert_eq!(mo.e[(i, c)], 0.0);
            }
        }
    }

    #[test]
    fn four_harmed_strata_closed_form() {
        let rho = 0.35;
        let ps = scores_from(&[[0.4, 0.6, 0.8], [0.45, 0.5, 0.85]]);
        let harmed: Vec<StratumId> = ["010", "100", "101", "110"].iter().map(|s| s.parse().unwrap()).collect();
        let spec = MoSensitivitySpec::equal(3, 0, &harmed, rho).unwrap();
        let mo = mo_scores(&ps, None, &spec.weights(&data_like(&ps)).unwrap()).unwrap();
        for i in 0..2 {
            let p1 = ps.p[(i, 1)];
            let p3 = ps.p[(i, 3)];
            let c = (1.0 - p3) / (1.0 + 3.0 * rho);
            assert!((mo.e[(i, 0)] - c).abs() < 1e-12);
            assert!((mo.e[(i, 3)] - (p1 - 3.0 * rho * c)).abs() < 1e-12);
            for k in 4..8 {
                assert!((mo.e[(i, k)] - rho * c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partial_deviation_bound() {
        let harmed: Vec<StratumId> = ["1011", "0101", "0010"].iter().map(|s| s.parse().unwrap()).collect();
        let marg = [0.29, 0.07, 0.10, 0.20, 0.34];
        let bound = max_common_rho(4, 0, &harmed, &marg);
        assert!((bound - 0.10 / 0.19).abs() < 1e-12);
        let spec = MoSensitivitySpec::equal(4, 0, &harmed, 0.5).unwrap();
        let rep = feasibility(None, &spec, &marg).unwrap();
        assert!(rep.feasible);
        assert!((rep.max_equal_rho.unwrap() - 0.526).abs() < 1e-3);
        let spec = MoSensitivitySpec::equal(4, 0, &harmed, 0.55).unwrap();
        assert!(!feasibility(None, &spec, &marg).unwrap().feasible);
    }

    #[test]
    fn zero_rho_always_feasible() {
        let spec = MoSensitivitySpec::all_harmed(4, 2, 0.0).unwrap();
        assert!(feasibility(None, &spec, &[0.29, 0.07, 0.10, 0.20, 0.34]).unwrap().feasible);
    }

    #[test]
    fn grid_axis_points() {
        let a = GridAxis { lo: 0.5, hi: 2.0, steps: 7 };
        let p = a.points();
        assert_eq!(p.len(), 7);
        assert_eq!(p[0], 0.5);
        assert_eq!(p[6], 2.0);
        assert!(p.windows(2).all(|w| w[1] > w[0]));
    }

    proptest! {
        #[test]
        fn total_mass_is_one(
            rows in prop::collection::vec(prop::collection::vec(0.02f64..0.98, 3), 1..8),
            rho in prop::collection::vec(0.0f64..3.0, 5),
            reference in 0usize..4,
        ) {
            let sorted: Vec<[f64; 3]> = rows.iter().map(|r| {
                let mut s = [r[0], r[1], r[2]];
                s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                s
            }).collect();
            let ps = scores_from(&sorted);
            let harmed: Vec<StratumId> = enumerate_strata(3, false).into_iter().filter(|s| !s.is_monotone()).collect();
            let spec = MoSensitivitySpec::new(3, reference, harmed.iter().zip(&rho).map(|(s, r)| (*s, Rho::Constant(*r))).collect()).unwrap();
            if let Ok(w) = spec.weights(&data_like(&ps)) {
                for i in 0..ps.n() {
                    let mut strata = enumerate_strata(3, true);
                    strata.extend(spec.harmed());
                    let total: f64 = strata.iter().map(|&s| w.combine(i, s, |g| ps.e(i, g))).sum();
                    prop_assert!((total - 1.0).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn feasibility_matches_brute_force(
            rows in prop::collection::vec(prop::collection::vec(0.02f64..0.98, 3), 1..10),
            rho in 0.0f64..2.0,
        ) {
            let sorted: Vec<[f64; 3]> = rows.iter().map(|r| {
                let mut s = [r[0], r[1], r[2]];
                s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                s
            }).collect();
            let ps = scores_from(&sorted);
            let spec = MoSensitivitySpec::all_harmed(3, 0, rho).unwrap();
            let marg: Vec<f64> = (0..=3).map(|g| ps.e_marginal(g)).collect();
            let w = spec.weights(&data_like(&ps)).unwrap();
            let rep = feasibility(Some((&ps, &w)), &spec, &marg).unwrap();
            let mut strata = enumerate_strata(3, true);
            strata.extend(spec.harmed());
            let mut brute = f64::INFINITY;
            for i in 0..ps.n() {
                for &s in &strata {
                    let e = w.combine(i, s, |g| ps.e(i, g));
                    brute = brute.min(e);
                }
            }
            prop_assert!((rep.pointwise_min.unwrap() - brute).abs() < 1e-15);
            let marg_ok = rep.marginal_min >= -1e-9;
            prop_assert_eq!(rep.feasible, marg_ok && brute >= -1e-9);
        }
    }
}
