//! Point estimators of `mu_g(z)`.
//!
//! Every estimator is written as a ratio `P_n{N} / D`, where the numerator rows `N_i` are
//! built from fitted nuisance values and the denominator is either the mean of per-unit
//! rows or a difference of two marginal survival parameters. The same rows feed the
//! sandwich stacker in [`crate::inference`].

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{DesignSpec, TrialData};
use crate::error::{invalid, Error, Result};
use crate::glm::{expit, fit_linear, fit_logistic, fit_multinomial, multinomial_probabilities, NuisanceFit};
use crate::sensitivity::{DeltaTable, MoSensitivitySpec, MoWeights, PiSensitivitySpec};
use crate::strata::{check_mean, stratum_score, MarginalSource, PrincipalScores, StratumId, PROB_FLOOR};

/// How the outcome regression is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMode {
    /// One fit on survivors of all arms (use treatment interactions in the design).
    #[default]
    Pooled,
    /// A separate fit on the survivors of each arm.
    PerArm,
}

/// Working-model designs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpecs {
    pub survival: DesignSpec,
    pub outcome: DesignSpec,
    pub outcome_mode: OutcomeMode,
    /// Multinomial propensity design; required by the observational estimators.
    pub propensity: Option<DesignSpec>,
}

/// All working models fitted to one dataset.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub specs: ModelSpecs,
    pub survival_design: DMatrix<f64>,
    /// One logistic fit per arm, index `z - 1`.
    pub survival: Vec<NuisanceFit>,
    /// Design at each unit's own arm, used by the outcome score rows.
    pub outcome_design: DMatrix<f64>,
    /// Counterfactual designs: per arm when pooled, a single shared matrix per-arm mode.
    pub outcome_counterfactual: Vec<DMatrix<f64>>,
    /// One pooled fit, or one per arm.
    pub outcome: Vec<NuisanceFit>,
    pub propensity_design: Option<DMatrix<f64>>,
    pub propensity: Option<NuisanceFit>,
}

/// Fits survival, outcome and (if configured) propensity models.
pub fn fit_models(data: &TrialData, specs: &ModelSpecs) -> Result<FittedModels> {
    let (n, arms) = (data.n(), data.arms());
    specs.survival.validate(data)?;
    specs.outcome.validate(data)?;
    if specs.survival.treatment_interactions {
        return invalid("survival designs are fitted per arm and take no treatment interactions");
    }
    let survival_design = specs.survival.matrix(data, None);
    let s = data.survival_indicator();
    let survival = (1..=arms)
        .map(|k| {
            let mask: Vec<bool> = (0..n).map(|i| data.z(i) == k).collect();
            fit_logistic(&survival_design, &s, &mask)
                .map(|f| f.with_design(specs.survival.clone()))
                .map_err(|e| relabel(e, &format!("survival model for arm {k}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let ys: Vec<f64> = (0..n).map(|i| data.ys(i)).collect();
    let (outcome_design, outcome_counterfactual, outcome) = match specs.outcome_mode {
        OutcomeMode::Pooled => {
            let x = specs.outcome.matrix(data, None);
            let mask: Vec<bool> = (0..n).map(|i| data.s(i)).collect();
            let fit = fit_linear(&x, &ys, &mask).map_err(|e| relabel(e, "pooled outcome model"))?;
            let cf = (1..=arms).map(|k| specs.outcome.matrix(data, Some(k))).collect();
            (x, cf, vec![fit.with_design(specs.outcome.clone())])
        }
        OutcomeMode::PerArm => {
            if specs.outcome.treatment_interactions {
                return invalid("treatment interactions apply to pooled outcome models only");
            }
            let x = specs.outcome.matrix(data, None);
            let fits = (1..=arms)
                .map(|k| {
                    let mask: Vec<bool> = (0..n).map(|i| data.z(i) == k && data.s(i)).collect();
                    fit_linear(&x, &ys, &mask)
                        .map(|f| f.with_design(specs.outcome.clone()))
                        .map_err(|e| relabel(e, &format!("outcome model for arm {k}")))
                })
                .collect::<Result<Vec<_>>>()?;
            (x.clone(), vec![x], fits)
        }
    };

    let (propensity_design, propensity) = match &specs.propensity {
        Some(spec) => {
            spec.validate(data)?;
            let x = spec.matrix(data, None);
            let fit = fit_multinomial(&x, data.treatments(), arms).map_err(|e| relabel(e, "propensity model"))?;
            (Some(x), Some(fit.with_design(spec.clone())))
        }
        None => (None, None),
    };
    Ok(FittedModels {
        specs: specs.clone(),
        survival_design,
        survival,
        outcome_design,
        outcome_counterfactual,
        outcome,
        propensity_design,
        propensity,
    })
}

fn relabel(e: Error, model: &str) -> Error {
    match e {
        Error::NonConvergence { iterations, .. } => Error::NonConvergence { model: model.to_string(), iterations },
        Error::Singular { detail, .. } => Error::Singular { context: model.to_string(), detail },
        other => other,
    }
}

impl FittedModels {
    /// Fitted `p_z(X_i)`, n x J, unclamped.
    pub fn survival_probabilities(&self) -> DMatrix<f64> {
        let n = self.survival_design.nrows();
        let mut out = DMatrix::zeros(n, self.survival.len());
        for (k, fit) in self.survival.iter().enumerate() {
            let eta = &self.survival_design * &fit.coef;
            for i in 0..n {
                out[(i, k)] = expit(eta[i]);
            }
        }
        out
    }

    /// Counterfactual outcome means `m_z(X_i)`, n x J.
    pub fn outcome_predictions(&self) -> DMatrix<f64> {
        let arms = self.survival.len();
        let n = self.outcome_design.nrows();
        let mut out = DMatrix::zeros(n, arms);
        for k in 0..arms {
            let col = match self.specs.outcome_mode {
                OutcomeMode::Pooled => &self.outcome_counterfactual[k] * &self.outcome[0].coef,
                OutcomeMode::PerArm => &self.outcome_counterfactual[0] * &self.outcome[k].coef,
            };
            out.set_column(k, &col);
        }
        out
    }

    /// Fitted propensities `pi_z(X_i)`, n x J.
    pub fn propensity_probabilities(&self) -> Option<DMatrix<f64>> {
        match (&self.propensity_design, &self.propensity) {
            (Some(x), Some(f)) => Some(multinomial_probabilities(x, &f.coef, self.survival.len())),
            _ => None,
        }
    }

    pub fn principal_scores(&self, data: &TrialData, source: MarginalSource) -> Result<PrincipalScores> {
        PrincipalScores::from_fits(data, &self.survival_design, &self.survival, source, None)
    }
}

/// Per-unit nuisance values at some parameter point.
#[derive(Debug, Clone)]
pub struct NuisanceValues {
    /// Survival probabilities, n x (J+2), clamped, boundary columns 0 and 1.
    pub p: DMatrix<f64>,
    /// Outcome means `m_z(X_i)`, n x J.
    pub m: DMatrix<f64>,
    /// Assignment probabilities (known or fitted), n x J.
    pub pi: DMatrix<f64>,
}

impl NuisanceValues {
    pub fn arms(&self) -> usize {
        self.m.ncols()
    }
}

/// Uncentered influence terms for survival and for survival-times-outcome.
#[derive(Debug, Clone)]
pub struct PsiTerms {
    /// n x (J+2); column 0 is 0 and column J+1 is 1.
    pub psi_s: DMatrix<f64>,
    /// n x J, column `z - 1`.
    pub psi_ys: DMatrix<f64>,
}

impl PsiTerms {
    pub fn new(data: &TrialData, v: &NuisanceValues) -> Self {
        let (n, arms) = (data.n(), data.arms());
        let mut psi_s = DMatrix::zeros(n, arms + 2);
        let mut psi_ys = DMatrix::zeros(n, arms);
        for i in 0..n {
            psi_s[(i, arms + 1)] = 1.0;
            let zi = data.z(i);
            let s = f64::from(u8::from(data.s(i)));
            let ys = data.ys(i);
            for k in 1..=arms {
                let pk = v.p[(i, k)];
                let mk = v.m[(i, k - 1)];
                let w = if zi == k { 1.0 / v.pi[(i, k - 1)] } else { 0.0 };
                psi_s[(i, k)] = w * (s - pk) + pk;
                psi_ys[(i, k - 1)] = w * (ys - mk * pk) + mk * pk;
            }
        }
        Self { psi_s, psi_ys }
    }
}

/// Bias-corrected estimator form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcForm {
    Weighting,
    Regression,
    DoublyRobust,
}

/// Estimator family.
#[derive(Clone)]
pub enum Method {
    Psw,
    Or,
    Dr,
    TpPs,
    TpOr,
    PsOr,
    Tr,
    BcPi { form: BcForm, spec: Arc<PiSensitivitySpec> },
    BcMo { form: BcForm, spec: Arc<MoSensitivitySpec> },
}

impl Method {
    pub fn tag(&self) -> String {
        let bc = |base: &str, form: &BcForm| match form {
            BcForm::DoublyRobust => base.to_string(),
            BcForm::Weighting => format!("{base}-PSW"),
            BcForm::Regression => format!("{base}-OR"),
        };
        match self {
            Method::Psw => "PSW".into(),
            Method::Or => "OR".into(),
            Method::Dr => "DR".into(),
            Method::TpPs => "TP+PS".into(),
            Method::TpOr => "TP+OR".into(),
            Method::PsOr => "PS+OR".into(),
            Method::Tr => "TR".into(),
            Method::BcPi { form, .. } => bc("BC-PI", form),
            Method::BcMo { form, .. } => bc("BC-MO", form),
        }
    }

    /// Parses the non-sensitivity tags.
    pub fn parse_basic(tag: &str) -> Result<Self> {
        Ok(match tag.to_ascii_uppercase().as_str() {
            "PSW" => Method::Psw,
            "OR" => Method::Or,
            "DR" => Method::Dr,
            "TP+PS" => Method::TpPs,
            "TP+OR" => Method::TpOr,
            "PS+OR" => Method::PsOr,
            "TR" => Method::Tr,
            other => return invalid(format!("unknown method '{other}'")),
        })
    }

    /// Whether the method replaces known assignment probabilities by fitted propensities.
    pub fn uses_propensity(&self, data: &TrialData) -> bool {
        match self {
            Method::TpPs | Method::TpOr | Method::Tr => true,
            Method::BcPi { .. } | Method::BcMo { .. } => data.pi().is_none(),
            _ => false,
        }
    }

    pub fn uses_outcome(&self) -> bool {
        match self {
            Method::Psw | Method::TpPs => false,
            Method::BcPi { form, .. } | Method::BcMo { form, .. } => *form != BcForm::Weighting,
            _ => true,
        }
    }

    /// Checks that the design supplies what the method needs.
    pub fn check_design(&self, data: &TrialData, models: &FittedModels) -> Result<()> {
        match self {
            Method::Psw | Method::Or | Method::Dr if data.pi().is_none() => invalid(format!(
                "{} needs known assignment probabilities; use TP+PS, TP+OR, PS+OR or TR for observational data",
                self.tag()
            )),
            _ if self.uses_propensity(data) && models.propensity.is_none() => {
                invalid(format!("{} needs a fitted propensity model", self.tag()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Debug for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// A single mean `mu_stratum(arm)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Target {
    pub stratum: StratumId,
    pub arm: usize,
}

impl Target {
    pub fn monotone(arms: usize, g: usize, z: usize) -> Self {
        Self { stratum: StratumId::monotone(arms, g), arm: z }
    }
}

/// Source of the per-unit marginal survival rows `M_{k,i}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum MarginalKind {
    /// `1(Z=k) S / pi_k(X)`.
    Ipw,
    /// `p_k(X)`.
    Model,
    /// `psi_{S,k}`.
    Augmented,
}

impl MarginalKind {
    pub fn from_source(source: MarginalSource) -> Self {
        match source {
            MarginalSource::ModelBased => MarginalKind::Model,
            MarginalSource::Nonparametric => MarginalKind::Ipw,
            MarginalSource::Augmented => MarginalKind::Augmented,
        }
    }
}

/// Denominator of a ratio estimator.
#[derive(Debug, Clone)]
pub enum Denominator {
    PerUnit(Vec<f64>),
    /// `P_plus - P_minus` for marginal parameters of the given kind (arm 0 is identically 0).
    Marginals { kind: MarginalKind, plus: usize, minus: usize },
}

/// Precomputed sensitivity inputs that do not depend on the nuisance parameters.
#[derive(Debug, Clone, Default)]
pub struct SensitivityInputs {
    pub delta: Option<DeltaTable>,
    pub mo: Option<MoWeights>,
}

impl SensitivityInputs {
    pub fn for_method(method: &Method, data: &TrialData) -> Result<Self> {
        Ok(match method {
            Method::BcPi { spec, .. } => Self { delta: Some(spec.table(data)?), mo: None },
            Method::BcMo { spec, .. } => Self { delta: None, mo: Some(spec.weights(data)?) },
            _ => Self::default(),
        })
    }
}

/// Estimation options shared by all methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationOptions {
    /// Marginal source for the OR denominator (nonparametric or augmented).
    pub or_marginals: MarginalSource,
    pub level: f64,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self { or_marginals: MarginalSource::Nonparametric, level: 0.95 }
    }
}

/// Per-unit marginal survival row.
pub fn marginal_row(kind: MarginalKind, k: usize, i: usize, data: &TrialData, v: &NuisanceValues, psi: &PsiTerms) -> f64 {
    let arms = data.arms();
    if k == 0 {
        return 0.0;
    }
    if k == arms + 1 {
        return 1.0;
    }
    match kind {
        MarginalKind::Ipw => {
            if data.z(i) == k && data.s(i) {
                1.0 / v.pi[(i, k - 1)]
            } else {
                0.0
            }
        }
        MarginalKind::Model => v.p[(i, k)],
        MarginalKind::Augmented => psi.psi_s[(i, k)],
    }
}

/// Survival-model arms whose parameters enter the rows for `target`.
pub(crate) fn survival_arms(method: &Method, target: Target, opts: &EstimationOptions, arms: usize) -> Vec<usize> {
    let z = target.arm;
    let ab = |s: StratumId| -> Vec<usize> {
        s.monotone_index().map(|g| vec![arms - g + 1, arms - g]).unwrap_or_default()
    };
    let mut out: Vec<usize> = match method {
        Method::Psw | Method::TpPs | Method::Dr | Method::Tr => {
            let mut v = ab(target.stratum);
            v.push(z);
            v
        }
        Method::Or if opts.or_marginals == MarginalSource::Nonparametric => vec![],
        Method::Or | Method::PsOr => ab(target.stratum),
        Method::TpOr => vec![],
        Method::BcPi { .. } => (1..=z).collect(),
        Method::BcMo { form: BcForm::Regression, .. } => vec![],
        Method::BcMo { spec, .. } => {
            let r = spec.reference();
            let mut v = ab(target.stratum);
            v.extend([arms - r + 1, arms - r, z]);
            v
        }
    };
    out.retain(|&k| (1..=arms).contains(&k));
    out.sort_unstable();
    out.dedup();
    out
}

/// Checks a target for a method and returns its monotone index when it has one.
pub(crate) fn check_target(method: &Method, target: Target, arms: usize) -> Result<()> {
    if target.stratum.arms() != arms {
        return invalid(format!("stratum {} does not have {arms} arms", target.stratum));
    }
    if target.arm < 1 || target.arm > arms {
        return Err(Error::Estimand(format!("arm {} outside 1..{arms}", target.arm)));
    }
    check_mean(target.stratum, target.arm)?;
    match method {
        Method::BcMo { spec, .. } => {
            if !target.stratum.is_monotone() && !spec.is_harmed(target.stratum) {
                return Err(Error::Estimand(format!(
                    "stratum {} is neither monotone nor declared harmed",
                    target.stratum
                )));
            }
        }
        _ => {
            if !target.stratum.is_monotone() {
                return Err(Error::Estimand(format!(
                    "stratum {} is not monotone; use the monotonicity sensitivity estimator",
                    target.stratum
                )));
            }
        }
    }
    Ok(())
}

/// Numerator rows and denominator for `target`.
pub fn components(
    method: &Method,
    target: Target,
    data: &TrialData,
    v: &NuisanceValues,
    psi: &PsiTerms,
    sens: &SensitivityInputs,
    opts: &EstimationOptions,
) -> (Vec<f64>, Denominator) {
    let n = data.n();
    let arms = data.arms();
    let z = target.arm;
    let ipw_y = |i: usize| -> f64 {
        if data.z(i) == z && data.s(i) {
            data.ys(i) / v.pi[(i, z - 1)]
        } else {
            0.0
        }
    };
    let ipw = |i: usize, k: usize| marginal_row(MarginalKind::Ipw, k, i, data, v, psi);
    let m = |i: usize| v.m[(i, z - 1)];

    if let Method::BcMo { form, .. } = method {
        let mo = sens.mo.as_ref().expect("monotonicity inputs prepared");
        let stratum = target.stratum;
        let e_mo = |i: usize| mo.combine(i, stratum, |g| stratum_score(&v.p, i, arms, g));
        let psi_star = |i: usize| mo.combine(i, stratum, |g| psi.psi_s[(i, arms - g + 1)] - psi.psi_s[(i, arms - g)]);
        let e_tilde = |i: usize| mo.combine(i, stratum, |g| ipw(i, arms - g + 1) - ipw(i, arms - g));
        return match form {
            BcForm::DoublyRobust => {
                let num = (0..n)
                    .map(|i| {
                        let resid = if data.z(i) == z && data.s(i) {
                            (data.ys(i) - m(i)) / v.pi[(i, z - 1)]
                        } else {
                            0.0
                        };
                        e_mo(i) / v.p[(i, z)] * resid + m(i) * psi_star(i)
                    })
                    .collect();
                (num, Denominator::PerUnit((0..n).map(psi_star).collect()))
            }
            BcForm::Weighting => {
                let num = (0..n).map(|i| e_mo(i) / v.p[(i, z)] * ipw_y(i)).collect();
                (num, Denominator::PerUnit((0..n).map(e_tilde).collect()))
            }
            BcForm::Regression => {
                let den: Vec<f64> = (0..n).map(e_tilde).collect();
                let num = (0..n).map(|i| den[i] * m(i)).collect();
                (num, Denominator::PerUnit(den))
            }
        };
    }

    let g = target.stratum.monotone_index().expect("monotone stratum");
    let (a, b) = (arms - g + 1, arms - g);
    let e = |i: usize| stratum_score(&v.p, i, arms, g);
    let ratio = |i: usize| e(i) / v.p[(i, z)];
    let psi_diff = |i: usize| psi.psi_s[(i, a)] - psi.psi_s[(i, b)];
    let dr_num = |i: usize| ratio(i) * (psi.psi_ys[(i, z - 1)] - m(i) * psi.psi_s[(i, z)]) + m(i) * psi_diff(i);
    let marg = |kind| Denominator::Marginals { kind, plus: a, minus: b };
    let per_unit_psi = || Denominator::PerUnit((0..n).map(psi_diff).collect());

    match method {
        Method::Psw | Method::TpPs => {
            let num = (0..n).map(|i| ratio(i) * ipw_y(i)).collect();
            let kind = if matches!(method, Method::Psw) { MarginalKind::Ipw } else { MarginalKind::Model };
            (num, marg(kind))
        }
        Method::Or | Method::TpOr => {
            let num = (0..n).map(|i| (ipw(i, a) - ipw(i, b)) * m(i)).collect();
            let kind = match method {
                Method::Or => MarginalKind::from_source(opts.or_marginals),
                _ => MarginalKind::Ipw,
            };
            (num, marg(kind))
        }
        Method::PsOr => ((0..n).map(|i| e(i) * m(i)).collect(), marg(MarginalKind::Model)),
        Method::Dr | Method::Tr => ((0..n).map(dr_num).collect(), per_unit_psi()),
        Method::BcPi { form, .. } => {
            let delta = sens.delta.as_ref().expect("sensitivity inputs prepared");
            let members = (arms + 1 - z)..=arms;
            let omega = |i: usize| {
                let mut weighted = 0.0;
                let mut total = 0.0;
                for h in members.clone() {
                    let eh = stratum_score(&v.p, i, arms, h);
                    weighted += delta.value(z, h, i) * eh;
                    total += eh;
                }
                delta.value(z, g, i) * total / weighted
            };
            match form {
                BcForm::Weighting => {
                    let num = (0..n).map(|i| omega(i) * ratio(i) * ipw_y(i)).collect();
                    (num, marg(MarginalKind::Ipw))
                }
                BcForm::Regression => {
                    let num = (0..n).map(|i| (ipw(i, a) - ipw(i, b)) * omega(i) * m(i)).collect();
                    (num, marg(MarginalKind::Ipw))
                }
                BcForm::DoublyRobust => {
                    let num = (0..n)
                        .map(|i| {
                            let om = omega(i);
                            let corr: f64 = members
                                .clone()
                                .map(|h| {
                                    delta.value(z, h, i)
                                        * (psi.psi_s[(i, arms - h + 1)] - psi.psi_s[(i, arms - h)])
                                })
                                .sum();
                            let adj = psi.psi_ys[(i, z - 1)] - om / delta.value(z, g, i) * m(i) * corr;
                            om * ratio(i) * adj + om * m(i) * psi_diff(i)
                        })
                        .collect();
                    (num, per_unit_psi())
                }
            }
        }
        Method::BcMo { .. } => unreachable!("handled above"),
    }
}

/// Ratio estimate from components evaluated at `v`.
pub fn ratio_estimate(
    num: &[f64],
    den: &Denominator,
    data: &TrialData,
    v: &NuisanceValues,
    psi: &PsiTerms,
) -> Result<f64> {
    let n = num.len() as f64;
    let d = match den {
        Denominator::PerUnit(d) => d.iter().sum::<f64>() / n,
        Denominator::Marginals { kind, plus, minus } => {
            let mean = |k| (0..data.n()).map(|i| marginal_row(*kind, k, i, data, v, psi)).sum::<f64>() / n;
            mean(*plus) - mean(*minus)
        }
    };
    if !(d > 0.0) {
        return Err(Error::Numerical(format!("estimated stratum share {d} is not positive")));
    }
    let mu = num.iter().sum::<f64>() / n / d;
    if !mu.is_finite() {
        return Err(Error::Numerical("non-finite estimate".into()));
    }
    Ok(mu)
}

fn values_from(data: &TrialData, ps: &PrincipalScores, m: &DMatrix<f64>, pi: DMatrix<f64>) -> Result<NuisanceValues> {
    if ps.n() != data.n() || m.shape() != (data.n(), data.arms()) {
        return invalid("nuisance matrices do not match the data");
    }
    Ok(NuisanceValues { p: ps.p.clone(), m: m.clone(), pi })
}

fn known_pi(data: &TrialData) -> Result<DMatrix<f64>> {
    data.known_assignment()
        .ok_or_else(|| Error::Validation("estimator needs known assignment probabilities".into()))
}

fn single(method: &Method, data: &TrialData, v: &NuisanceValues, g: usize, z: usize, opts: &EstimationOptions) -> Result<f64> {
    let target = Target::monotone(data.arms(), g, z);
    check_target(method, target, data.arms())?;
    if data.survivors_in_arm(z) == 0 {
        return invalid(format!("arm {z} has no survivors"));
    }
    let psi = PsiTerms::new(data, v);
    let (num, den) = components(method, target, data, v, &psi, &SensitivityInputs::default(), opts);
    ratio_estimate(&num, &den, data, v, &psi)
}

/// Principal score weighting with nonparametric marginal normalization.
pub fn estimate_psw(data: &TrialData, ps: &PrincipalScores, g: usize, z: usize) -> Result<f64> {
    let v = values_from(data, ps, &DMatrix::zeros(data.n(), data.arms()), known_pi(data)?)?;
    single(&Method::Psw, data, &v, g, z, &EstimationOptions::default())
}

/// Outcome regression standardized over the stratum; denominators use `ps.source`
/// (nonparametric or augmented).
pub fn estimate_or(data: &TrialData, ps: &PrincipalScores, m: &DMatrix<f64>, g: usize, z: usize) -> Result<f64> {
    let v = values_from(data, ps, m, known_pi(data)?)?;
    let or_marginals = match ps.source {
        MarginalSource::Augmented => MarginalSource::Augmented,
        _ => MarginalSource::Nonparametric,
    };
    single(&Method::Or, data, &v, g, z, &EstimationOptions { or_marginals, ..Default::default() })
}

/// Doubly robust estimator.
pub fn estimate_dr(data: &TrialData, ps: &PrincipalScores, m: &DMatrix<f64>, g: usize, z: usize) -> Result<f64> {
    let v = values_from(data, ps, m, known_pi(data)?)?;
    single(&Method::Dr, data, &v, g, z, &EstimationOptions::default())
}

/// Observational variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationalVariant {
    TpPs,
    TpOr,
    PsOr,
    Tr,
}

/// Estimators that replace known assignment probabilities by fitted propensities `pi_hat` (n x J).
pub fn estimate_observational(
    data: &TrialData,
    pi_hat: &DMatrix<f64>,
    ps: &PrincipalScores,
    m: &DMatrix<f64>,
    g: usize,
    z: usize,
    variant: ObservationalVariant,
) -> Result<f64> {
    if pi_hat.iter().any(|&p| !(p >= PROB_FLOOR)) {
        return Err(Error::Numerical(format!("fitted propensity below {PROB_FLOOR}")));
    }
    let v = values_from(data, ps, m, pi_hat.clone())?;
    let method = match variant {
        ObservationalVariant::TpPs => Method::TpPs,
        ObservationalVariant::TpOr => Method::TpOr,
        ObservationalVariant::PsOr => Method::PsOr,
        ObservationalVariant::Tr => Method::Tr,
    };
    single(&method, data, &v, g, z, &EstimationOptions::default())
}

/// Label of a reported quantity: a mean (`zprime = None`) or a contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EstimandLabel {
    pub stratum: StratumId,
    pub z: usize,
    pub zprime: Option<usize>,
}

impl fmt::Display for EstimandLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.stratum.monotone_index() {
            Some(g) => g.to_string(),
            None => format!("[{}]", self.stratum),
        };
        match self.zprime {
            Some(zp) => write!(f, "Delta_{s}({},{zp})", self.z),
            None => write!(f, "mu_{s}({})", self.z),
        }
    }
}

/// One reported estimate with its Wald interval.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub estimand: EstimandLabel,
    pub method: String,
    pub point: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub level: f64,
    pub warnings: Vec<String>,
}

/// Difference of two mean reports of the same method and stratum. `covariance` is the
/// joint-sandwich covariance of the two means.
pub fn contrast(a: &EstimateReport, b: &EstimateReport, covariance: f64) -> Result<EstimateReport> {
    if a.method != b.method {
        return invalid(format!("cannot contrast {} with {}", a.method, b.method));
    }
    if a.estimand.stratum != b.estimand.stratum || a.estimand.zprime.is_some() || b.estimand.zprime.is_some() {
        return invalid("contrasts need two means of the same stratum");
    }
    let var = if a.estimand.z == b.estimand.z { 0.0 } else { a.se * a.se + b.se * b.se - 2.0 * covariance };
    let se = var.max(0.0).sqrt();
    let point = a.point - b.point;
    let mut warnings = a.warnings.clone();
    warnings.extend(b.warnings.iter().filter(|w| !a.warnings.contains(w)).cloned());
    Ok(EstimateReport {
        estimand: EstimandLabel { stratum: a.estimand.stratum, z: a.estimand.z, zprime: Some(b.estimand.z) },
        method: a.method.clone(),
        point,
        se,
        ci: crate::inference::wald(point, se, a.level),
        level: a.level,
        warnings,
    })
}
