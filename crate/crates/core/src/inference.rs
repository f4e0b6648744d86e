//! Sandwich variance over stacked estimating equations.
//!
//! The stack holds the target means, the working-model parameters they depend on and any
//! auxiliary marginal survival parameters. The bread is a central finite-difference Jacobian
//! of the mean estimating function; the meat is the mean outer product with divisor `n`.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::TrialData;
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    check_target, components, marginal_row, ratio_estimate, survival_arms, Denominator, EstimandLabel,
    EstimateReport, EstimationOptions, FittedModels, MarginalKind, Method, NuisanceValues, OutcomeMode, PsiTerms,
    SensitivityInputs, Target,
};
use crate::glm::{expit, linear_scores, logistic_scores, multinomial_probabilities, multinomial_scores};
use crate::sensitivity::mo_scores;
use crate::strata::{enumerate_strata, EstimandSpec, MarginalSource, PrincipalScores, PROB_FLOOR};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

/// Per-unit estimating functions `Phi(V_i; theta)`.
pub trait EstimatingEquations: Sync {
    fn dim(&self) -> usize;
    /// n x dim matrix of rows at `theta`.
    fn eval(&self, theta: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
pub struct SandwichResult {
    /// Covariance of the estimator (already divided by n).
    pub cov: DMatrix<f64>,
    /// Mean Jacobian `A`.
    pub bread: DMatrix<f64>,
    /// Mean outer product `B`.
    pub meat: DMatrix<f64>,
    /// Ratio of extreme singular values of `A`.
    pub bread_cond: f64,
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_sum().transpose() / m.nrows() as f64
}

/// Mean Jacobian by central differences with step `cbrt(eps) * max(1, |theta_j|)`.
pub fn jacobian(eq: &dyn EstimatingEquations, theta: &DVector<f64>) -> DMatrix<f64> {
    let q = eq.dim();
    let cols: Vec<DVector<f64>> = (0..q)
        .into_par_iter()
        .map(|l| {
            let h = f64::EPSILON.cbrt() * theta[l].abs().max(1.0);
            let mut up = theta.clone();
            up[l] += h;
            let mut dn = theta.clone();
            dn[l] -= h;
            let hh = up[l] - dn[l];
            (column_means(&eq.eval(&up)) - column_means(&eq.eval(&dn))) / hh
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// `A^{-1} B A^{-T} / n` from pivoted LU solves.
pub fn sandwich(eq: &dyn EstimatingEquations, theta: &DVector<f64>) -> Result<SandwichResult> {
    let phi = eq.eval(theta);
    let n = phi.nrows() as f64;
    let a = jacobian(eq, theta);
    let meat = phi.transpose() * &phi / n;
    sandwich_from_parts(a, meat, n)
}

pub fn sandwich_from_parts(a: DMatrix<f64>, meat: DMatrix<f64>, n: f64) -> Result<SandwichResult> {
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let bread_cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let scale = a.amax();
    let lu = a.clone().lu();
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|j| u[(j, j)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-10 * scale) {
        return Err(Error::Singular {
            context: "sandwich bread".into(),
            detail: format!("pivot {min_pivot:.3e} against scale {scale:.3e}; condition {bread_cond:.3e}"),
        });
    }
    let x = lu.solve(&meat).ok_or_else(|| Error::Singular { context: "sandwich bread".into(), detail: "solve failed".into() })?;
    let y = lu
        .solve(&x.transpose())
        .ok_or_else(|| Error::Singular { context: "sandwich bread".into(), detail: "solve failed".into() })?;
    let mut cov = y / n;
    let sym = (&cov + cov.transpose()) * 0.5;
    cov.copy_from(&sym);
    Ok(SandwichResult { cov, bread: a, meat, bread_cond })
}

/// Normal quantile `Phi^{-1}(1 - (1 - level)/2)`, fixed at 1.959964 for 95%.
pub fn normal_quantile(level: f64) -> f64 {
    if (level - 0.95).abs() < 1e-12 {
        return Z_95;
    }
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Wald interval `point -/+ z * se`.
pub fn wald(point: f64, se: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile(level);
    (point - z * se, point + z * se)
}

/// `lambda' cov lambda`.
pub fn contrast_variance(cov: &DMatrix<f64>, lambda: &DVector<f64>) -> Result<f64> {
    if lambda.len() != cov.nrows() {
        return invalid(format!("selector length {} does not match {} parameters", lambda.len(), cov.nrows()));
    }
    Ok((lambda.transpose() * cov * lambda)[(0, 0)])
}

/// Parameter block in the stacked vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Block {
    Mean(Target),
    /// Survival logistic coefficients for one arm.
    Survival(usize),
    Propensity,
    /// Pooled outcome coefficients (`None`) or those of one arm.
    Outcome(Option<usize>),
    /// Auxiliary marginal survival parameter.
    Marginal(MarginalKind, usize),
}

/// Stacked estimating equations for one method and a set of target means.
pub struct ThetaStack<'a> {
    data: &'a TrialData,
    models: &'a FittedModels,
    method: Method,
    opts: EstimationOptions,
    sens: SensitivityInputs,
    pub targets: Vec<Target>,
    pub layout: Vec<(Block, Range<usize>)>,
    pub theta_hat: DVector<f64>,
    base: NuisanceValues,
    marginal_index: BTreeMap<(MarginalKind, usize), usize>,
    survival_response: Vec<f64>,
    survival_masks: Vec<Vec<bool>>,
    outcome_response: Vec<f64>,
    outcome_masks: Vec<Vec<bool>>,
    pub warnings: Vec<String>,
}

impl<'a> ThetaStack<'a> {
    pub fn new(
        data: &'a TrialData,
        models: &'a FittedModels,
        method: &Method,
        targets: &[Target],
        opts: &EstimationOptions,
    ) -> Result<Self> {
        let arms = data.arms();
        let n = data.n();
        if targets.is_empty() {
            return invalid("no targets requested");
        }
        if !(opts.level > 0.0 && opts.level < 1.0) {
            return invalid(format!("confidence level {} outside (0,1)", opts.level));
        }
        if matches!(opts.or_marginals, MarginalSource::ModelBased) {
            return invalid("OR marginals must be nonparametric or augmented");
        }
        method.check_design(data, models)?;
        let mut targets = targets.to_vec();
        targets.sort();
        targets.dedup();
        for &t in &targets {
            check_target(method, t, arms)?;
            if data.survivors_in_arm(t.arm) == 0 {
                return invalid(format!("arm {} has no survivors", t.arm));
            }
        }
        let sens = SensitivityInputs::for_method(method, data)?;

        let ps = PrincipalScores::from_probabilities(data, &models.survival_probabilities(), MarginalSource::ModelBased, None)?;
        let mut warnings = Vec::new();
        if ps.clamped > 0 {
            warnings.push(format!("{} fitted survival probabilities clamped to [1e-6, 1-1e-6]", ps.clamped));
        }
        if ps.negative_scores > 0 {
            warnings.push(format!("{} negative fitted stratum scores clamped at 0", ps.negative_scores));
        }
        let uses_prop = method.uses_propensity(data);
        let pi = if uses_prop {
            let p = models.propensity_probabilities().expect("checked above");
            if p.iter().any(|&v| !(v >= PROB_FLOOR)) {
                return Err(Error::Numerical(format!("fitted propensity below {PROB_FLOOR}")));
            }
            p
        } else if let Some(p) = data.known_assignment() {
            p
        } else if matches!(method, Method::PsOr) {
            // Never read by this method.
            DMatrix::from_element(data.n(), arms, 1.0 / arms as f64)
        } else {
            return Err(Error::Validation("known assignment probabilities required".into()));
        };
        let base = NuisanceValues { p: ps.p.clone(), m: models.outcome_predictions(), pi };
        let psi = PsiTerms::new(data, &base);

        if let (Method::BcMo { .. }, Some(w)) = (method, &sens.mo) {
            mo_scores(&ps, None, w)?;
        }

        // Layout.
        let mut layout: Vec<(Block, Range<usize>)> = Vec::new();
        let mut at = 0;
        let push = |layout: &mut Vec<(Block, Range<usize>)>, at: &mut usize, b: Block, w: usize| {
            layout.push((b, *at..*at + w));
            *at += w;
        };
        for &t in &targets {
            push(&mut layout, &mut at, Block::Mean(t), 1);
        }
        let mut s_arms: Vec<usize> = targets.iter().flat_map(|&t| survival_arms(method, t, opts, arms)).collect();
        s_arms.sort_unstable();
        s_arms.dedup();
        let qs = models.survival_design.ncols();
        for &k in &s_arms {
            push(&mut layout, &mut at, Block::Survival(k), qs);
        }
        if uses_prop {
            let qt = models.propensity_design.as_ref().expect("propensity design").ncols();
            push(&mut layout, &mut at, Block::Propensity, qt * (arms - 1));
        }
        if method.uses_outcome() {
            let qo = models.outcome_design.ncols();
            match models.specs.outcome_mode {
                OutcomeMode::Pooled => push(&mut layout, &mut at, Block::Outcome(None), qo),
                OutcomeMode::PerArm => {
                    let mut zs: Vec<usize> = targets.iter().map(|t| t.arm).collect();
                    zs.dedup();
                    for z in zs {
                        push(&mut layout, &mut at, Block::Outcome(Some(z)), qo);
                    }
                }
            }
        }
        let comps: Vec<(Vec<f64>, Denominator)> =
            targets.iter().map(|&t| components(method, t, data, &base, &psi, &sens, opts)).collect();
        let mut marg: Vec<(MarginalKind, usize)> = comps
            .iter()
            .filter_map(|(_, d)| match d {
                Denominator::Marginals { kind, plus, minus } => Some([(*kind, *plus), (*kind, *minus)]),
                _ => None,
            })
            .flatten()
            .filter(|(_, k)| (1..=arms).contains(k))
            .collect();
        marg.sort();
        marg.dedup();
        let mut marginal_index = BTreeMap::new();
        for &(kind, k) in &marg {
            marginal_index.insert((kind, k), at);
            push(&mut layout, &mut at, Block::Marginal(kind, k), 1);
        }

        // Point estimates.
        let mut theta = DVector::zeros(at);
        for (b, r) in &layout {
            match *b {
                Block::Mean(_) => {}
                Block::Survival(k) => theta.rows_mut(r.start, r.len()).copy_from(&models.survival[k - 1].coef),
                Block::Propensity => {
                    theta.rows_mut(r.start, r.len()).copy_from(&models.propensity.as_ref().expect("fit").coef)
                }
                Block::Outcome(None) => theta.rows_mut(r.start, r.len()).copy_from(&models.outcome[0].coef),
                Block::Outcome(Some(k)) => theta.rows_mut(r.start, r.len()).copy_from(&models.outcome[k - 1].coef),
                Block::Marginal(kind, k) => {
                    theta[r.start] = (0..n).map(|i| marginal_row(kind, k, i, data, &base, &psi)).sum::<f64>() / n as f64;
                }
            }
        }
        for (j, (num, den)) in comps.iter().enumerate() {
            theta[j] = ratio_estimate(num, den, data, &base, &psi)?;
        }

        let s = data.survival_indicator();
        let survival_masks = (1..=arms).map(|k| (0..n).map(|i| data.z(i) == k).collect()).collect();
        let outcome_response = (0..n).map(|i| data.ys(i)).collect();
        let outcome_masks = match models.specs.outcome_mode {
            OutcomeMode::Pooled => vec![(0..n).map(|i| data.s(i)).collect()],
            OutcomeMode::PerArm => (1..=arms).map(|k| (0..n).map(|i| data.z(i) == k && data.s(i)).collect()).collect(),
        };
        Ok(Self {
            data,
            models,
            method: method.clone(),
            opts: *opts,
            sens,
            targets,
            layout,
            theta_hat: theta,
            base,
            marginal_index,
            survival_response: s,
            survival_masks,
            outcome_response,
            outcome_masks,
            warnings,
        })
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    pub fn mean_index(&self, t: Target) -> Option<usize> {
        self.targets.iter().position(|&x| x == t)
    }

    /// Nuisance values with the working-model blocks taken from `theta`.
    pub fn values_at(&self, theta: &DVector<f64>) -> NuisanceValues {
        let mut v = self.base.clone();
        let arms = self.data.arms();
        for (b, r) in &self.layout {
            let coef = theta.rows(r.start, r.len()).into_owned();
            match *b {
                Block::Survival(k) => {
                    let eta = &self.models.survival_design * &coef;
                    for i in 0..eta.len() {
                        v.p[(i, k)] = expit(eta[i]).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    }
                }
                Block::Outcome(None) => {
                    for z in 1..=arms {
                        let col = &self.models.outcome_counterfactual[z - 1] * &coef;
                        v.m.set_column(z - 1, &col);
                    }
                }
                Block::Outcome(Some(k)) => {
                    let col = &self.models.outcome_counterfactual[0] * &coef;
                    v.m.set_column(k - 1, &col);
                }
                Block::Propensity => {
                    v.pi = multinomial_probabilities(self.models.propensity_design.as_ref().expect("design"), &coef, arms);
                }
                _ => {}
            }
        }
        v
    }

    fn marginal_param(&self, theta: &DVector<f64>, kind: MarginalKind, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            theta[self.marginal_index[&(kind, k)]]
        }
    }

    /// Sup-norm of the column means of the rows at `theta_hat`.
    pub fn residual(&self) -> f64 {
        column_means(&self.eval(&self.theta_hat)).amax()
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.targets.len()).map(|j| self.theta_hat[j]).collect()
    }
}

fn copy_block(phi: &mut DMatrix<f64>, start: usize, block: &DMatrix<f64>) {
    phi.columns_mut(start, block.ncols()).copy_from(block);
}

impl EstimatingEquations for ThetaStack<'_> {
    fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    fn eval(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let data = self.data;
        let n = data.n();
        let v = self.values_at(theta);
        let psi = PsiTerms::new(data, &v);
        let mut phi = DMatrix::zeros(n, theta.len());
        for (b, r) in &self.layout {
            let coef = theta.rows(r.start, r.len()).into_owned();
            match *b {
                Block::Mean(t) => {
                    let mu = theta[r.start];
                    let (num, den) = components(&self.method, t, data, &v, &psi, &self.sens, &self.opts);
                    match den {
                        Denominator::PerUnit(d) => {
                            for i in 0..n {
                                phi[(i, r.start)] = num[i] - d[i] * mu;
                            }
                        }
                        Denominator::Marginals { kind, plus, minus } => {
                            let share = self.marginal_param(theta, kind, plus) - self.marginal_param(theta, kind, minus);
                            for i in 0..n {
                                phi[(i, r.start)] = num[i] - share * mu;
                            }
                        }
                    }
                }
                Block::Survival(k) => {
                    let sc = logistic_scores(&self.models.survival_design, &self.survival_response, &self.survival_masks[k - 1], &coef);
                    copy_block(&mut phi, r.start, &sc);
                }
                Block::Outcome(arm) => {
                    let mask = &self.outcome_masks[arm.map_or(0, |k| k - 1)];
                    let sc = linear_scores(&self.models.outcome_design, &self.outcome_response, mask, &coef);
                    copy_block(&mut phi, r.start, &sc);
                }
                Block::Propensity => {
                    let x = self.models.propensity_design.as_ref().expect("design");
                    let sc = multinomial_scores(x, data.treatments(), data.arms(), &coef);
                    copy_block(&mut phi, r.start, &sc);
                }
                Block::Marginal(kind, k) => {
                    let p = theta[r.start];
                    for i in 0..n {
                        phi[(i, r.start)] = marginal_row(kind, k, i, data, &v, &psi) - p;
                    }
                }
            }
        }
        phi
    }
}

/// Alias of [`ThetaStack::new`].
pub fn stack<'a>(
    data: &'a TrialData,
    models: &'a FittedModels,
    method: &Method,
    targets: &[Target],
    opts: &EstimationOptions,
) -> Result<ThetaStack<'a>> {
    ThetaStack::new(data, models, method, targets, opts)
}

/// Means and contrasts for one method with their joint covariance.
#[derive(Debug, Clone)]
pub struct Estimates {
    pub method: String,
    pub targets: Vec<Target>,
    pub means: Vec<EstimateReport>,
    pub contrasts: Vec<EstimateReport>,
    /// Joint covariance of the target means.
    pub mean_cov: DMatrix<f64>,
    pub bread_cond: f64,
    pub residual: f64,
    pub warnings: Vec<String>,
    level: f64,
}

impl Estimates {
    pub fn mean(&self, t: Target) -> Option<&EstimateReport> {
        self.targets.iter().position(|&x| x == t).map(|j| &self.means[j])
    }

    /// Contrast of two estimated means using the joint covariance.
    pub fn contrast(&self, a: Target, b: Target) -> Result<EstimateReport> {
        let ia = self.targets.iter().position(|&x| x == a);
        let ib = self.targets.iter().position(|&x| x == b);
        match (ia, ib) {
            (Some(i), Some(j)) => crate::estimators::contrast(&self.means[i], &self.means[j], self.mean_cov[(i, j)]),
            _ => invalid("contrast arms were not estimated"),
        }
    }

    pub fn level(&self) -> f64 {
        self.level
    }
}

/// Point estimates, sandwich standard errors and Wald intervals for `estimands`.
pub fn estimate(
    data: &TrialData,
    models: &FittedModels,
    method: &Method,
    estimands: &[EstimandSpec],
    opts: &EstimationOptions,
) -> Result<Estimates> {
    for e in estimands {
        e.validate()?;
    }
    let targets: Vec<Target> = estimands
        .iter()
        .flat_map(|e| [Target { stratum: e.stratum, arm: e.z }, Target { stratum: e.stratum, arm: e.zprime }])
        .collect();
    let mut est = estimate_means(data, models, method, &targets, opts)?;
    est.contrasts = estimands
        .iter()
        .map(|e| est.contrast(Target { stratum: e.stratum, arm: e.z }, Target { stratum: e.stratum, arm: e.zprime }))
        .collect::<Result<_>>()?;
    Ok(est)
}

/// Estimates for a set of means only.
pub fn estimate_means(
    data: &TrialData,
    models: &FittedModels,
    method: &Method,
    targets: &[Target],
    opts: &EstimationOptions,
) -> Result<Estimates> {
    let st = ThetaStack::new(data, models, method, targets, opts)?;
    let sw = sandwich(&st, &st.theta_hat)?;
    let residual = st.residual();
    let k = st.targets.len();
    let mean_cov = sw.cov.view((0, 0), (k, k)).into_owned();
    let tag = method.tag();
    let means = st
        .targets
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let point = st.theta_hat[j];
            let se = mean_cov[(j, j)].max(0.0).sqrt();
            EstimateReport {
                estimand: EstimandLabel { stratum: t.stratum, z: t.arm, zprime: None },
                method: tag.clone(),
                point,
                se,
                ci: wald(point, se, opts.level),
                level: opts.level,
                warnings: st.warnings.clone(),
            }
        })
        .collect();
    Ok(Estimates {
        method: tag,
        targets: st.targets.clone(),
        means,
        contrasts: Vec::new(),
        mean_cov,
        bread_cond: sw.bread_cond,
        residual,
        warnings: st.warnings.clone(),
        level: opts.level,
    })
}

/// Every monotone target mean for `arms`.
pub fn all_targets(arms: usize) -> Vec<Target> {
    enumerate_strata(arms, true)
        .into_iter()
        .flat_map(|s| (1..=arms).filter(move |&z| s.survives(z)).map(move |z| Target { stratum: s, arm: z }))
        .collect()
}
