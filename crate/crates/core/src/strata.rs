//! Principal strata, principal scores and estimand validity.
//!
//! Arms are labelled `1..=J`. A stratum is the vector of potential survival indicators
//! `(S(1), ..., S(J))`; under monotonicity the strata are `0^(J-g) 1^g` for `g in 0..=J`
//! and the stratum with index `g` survives exactly under arms `z >= J - g + 1`.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::TrialData;
use crate::error::{invalid, Error, Result};
use crate::glm::{expit, NuisanceFit};

/// Lower/upper clamp applied to fitted survival probabilities.
pub const PROB_FLOOR: f64 = 1e-6;

/// Stratum membership by potential survival pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StratumId {
    arms: u8,
    /// Bit `J - z` holds `S(z)`, so integer order equals lexicographic order of the pattern.
    code: u32,
}

impl StratumId {
    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        let arms = bits.len();
        if !(2..=16).contains(&arms) {
            return invalid(format!("stratum pattern length {arms} outside 2..16"));
        }
        let code = bits.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b));
        Ok(Self { arms: arms as u8, code })
    }

    /// Monotone stratum `0^(J-g) 1^g`.
    pub fn monotone(arms: usize, g: usize) -> Self {
        assert!(g <= arms, "stratum index {g} exceeds arm count {arms}");
        Self { arms: arms as u8, code: (1u32 << g) - 1 }
    }

    pub fn arms(&self) -> usize {
        usize::from(self.arms)
    }

    pub fn survives(&self, z: usize) -> bool {
        z >= 1 && z <= self.arms() && (self.code >> (self.arms() - z)) & 1 == 1
    }

    pub fn bits(&self) -> Vec<bool> {
        (1..=self.arms()).map(|z| self.survives(z)).collect()
    }

    /// `g` when the pattern is monotone.
    pub fn monotone_index(&self) -> Option<usize> {
        let g = self.code.count_ones();
        (self.code == (1u32 << g) - 1).then_some(g as usize)
    }

    pub fn is_monotone(&self) -> bool {
        self.monotone_index().is_some()
    }
}

impl fmt::Display for StratumId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for StratumId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Validation(format!("stratum pattern '{s}' must be 0/1 digits"))),
            })
            .collect::<Result<_>>()?;
        Self::from_bits(&bits)
    }
}

impl Serialize for StratumId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StratumId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Monotone strata ordered by `g`, or all `2^J` patterns in lexicographic order.
pub fn enumerate_strata(arms: usize, monotone: bool) -> Vec<StratumId> {
    assert!(arms >= 2, "need at least two arms");
    if monotone {
        (0..=arms).map(|g| StratumId::monotone(arms, g)).collect()
    } else {
        (0..1u32 << arms).map(|code| StratumId { arms: arms as u8, code }).collect()
    }
}

/// A contrast `mu_g(z) - mu_g(z')` within one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub stratum: StratumId,
    pub z: usize,
    pub zprime: usize,
    pub valid: bool,
}

impl EstimandSpec {
    pub fn new(arms: usize, g: usize, z: usize, zprime: usize) -> Result<Self> {
        if g > arms {
            return Err(Error::Estimand(format!("stratum index {g} exceeds J = {arms}")));
        }
        Ok(Self::for_stratum(StratumId::monotone(arms, g), z, zprime))
    }

    pub fn for_stratum(stratum: StratumId, z: usize, zprime: usize) -> Self {
        let valid = stratum.survives(z) && stratum.survives(zprime);
        Self { stratum, z, zprime, valid }
    }

    pub fn g(&self) -> Option<usize> {
        self.stratum.monotone_index()
    }

    /// Errors unless both arms are defined for the stratum.
    pub fn validate(&self) -> Result<()> {
        if self.valid {
            return Ok(());
        }
        Err(Error::Estimand(match self.g() {
            Some(g) => format!(
                "Delta_{g}({}, {}) is undefined: mu_g(z) requires g + z >= J + 1 (J = {})",
                self.z,
                self.zprime,
                self.stratum.arms()
            ),
            None => format!(
                "stratum {} does not survive under both arms {} and {}",
                self.stratum, self.z, self.zprime
            ),
        }))
    }
}

impl fmt::Display for EstimandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.g() {
            Some(g) => write!(f, "Delta_{g}({},{})", self.z, self.zprime),
            None => write!(f, "Delta_[{}]({},{})", self.stratum, self.z, self.zprime),
        }
    }
}

/// Checks that `mu_g(z)` is defined.
pub fn check_mean(stratum: StratumId, z: usize) -> Result<()> {
    EstimandSpec::for_stratum(stratum, z, z).validate()
}

/// Every `Delta_g(z, z')` with `z < z'` defined under monotonicity, ordered by g, z, z'.
pub fn valid_estimands(arms: usize) -> Vec<EstimandSpec> {
    let mut out = Vec::new();
    for g in 0..=arms {
        for z in 1..=arms {
            for zp in z + 1..=arms {
                let e = EstimandSpec::for_stratum(StratumId::monotone(arms, g), z, zp);
                if e.valid {
                    out.push(e);
                }
            }
        }
    }
    out
}

/// How the marginal survival probabilities `p_z` are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalSource {
    /// Mean of fitted `p_z(X)`.
    ModelBased,
    /// `P_n{1(Z=z)S} / pi_z`.
    Nonparametric,
    /// Mean of the uncentered influence term for survival.
    Augmented,
}

/// Fitted survival probabilities with boundary columns for arms 0 and J+1.
#[derive(Debug, Clone)]
pub struct PrincipalScores {
    /// n x (J+2); column 0 is 0 and column J+1 is 1.
    pub p: DMatrix<f64>,
    pub p_marg: Vec<f64>,
    pub source: MarginalSource,
    /// Number of fitted probabilities moved onto the clamp bounds.
    pub clamped: usize,
    /// Number of (unit, stratum) pairs whose raw stratum score was negative.
    pub negative_scores: usize,
}

/// Clamped stratum score `max(0, p_{J-g+1} - p_{J-g})` from a row of the extended matrix.
pub(crate) fn stratum_score(p: &DMatrix<f64>, i: usize, arms: usize, g: usize) -> f64 {
    (p[(i, arms - g + 1)] - p[(i, arms - g)]).max(0.0)
}

impl PrincipalScores {
    /// Builds scores from per-arm probabilities (n x J). `assignment` is the n x J matrix of
    /// assignment probabilities used by the nonparametric and augmented marginals.
    pub fn from_probabilities(
        data: &TrialData,
        probs: &DMatrix<f64>,
        source: MarginalSource,
        assignment: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        let (n, arms) = (data.n(), data.arms());
        if probs.shape() != (n, arms) {
            return invalid("probability matrix must be n x J");
        }
        let mut p = DMatrix::zeros(n, arms + 2);
        let mut clamped = 0;
        for i in 0..n {
            p[(i, arms + 1)] = 1.0;
            for k in 0..arms {
                let v = probs[(i, k)];
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(Error::Numerical(format!("unit {i}: survival probability {v} outside [0,1]")));
                }
                let c = v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                if c != v {
                    clamped += 1;
                }
                p[(i, k + 1)] = c;
            }
        }
        let negative_scores = (0..n)
            .map(|i| (0..=arms).filter(|&g| p[(i, arms - g + 1)] - p[(i, arms - g)] < 0.0).count())
            .sum();
        let known;
        let assignment = match (assignment, source) {
            (Some(a), _) => Some(a),
            (None, MarginalSource::ModelBased) => None,
            (None, _) => {
                known = data
                    .known_assignment()
                    .ok_or_else(|| Error::Validation("marginal source needs assignment probabilities".into()))?;
                Some(&known)
            }
        };
        let mut p_marg = vec![0.0; arms + 2];
        p_marg[arms + 1] = 1.0;
        for k in 1..=arms {
            p_marg[k] = match source {
                MarginalSource::ModelBased => p.column(k).mean(),
                MarginalSource::Nonparametric => {
                    let a = assignment.expect("assignment present");
                    (0..n)
                        .filter(|&i| data.z(i) == k && data.s(i))
                        .map(|i| 1.0 / a[(i, k - 1)])
                        .sum::<f64>()
                        / n as f64
                }
                MarginalSource::Augmented => {
                    let a = assignment.expect("assignment present");
                    (0..n)
                        .map(|i| {
                            let pk = p[(i, k)];
                            let ind = if data.z(i) == k { 1.0 / a[(i, k - 1)] } else { 0.0 };
                            ind * (f64::from(u8::from(data.s(i))) - pk) + pk
                        })
                        .sum::<f64>()
                        / n as f64
                }
            };
        }
        Ok(Self { p, p_marg, source, clamped, negative_scores })
    }

    /// Expit predictions of one logistic fit per arm on a shared design.
    pub fn from_fits(
        data: &TrialData,
        design: &DMatrix<f64>,
        fits: &[NuisanceFit],
        source: MarginalSource,
        assignment: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        if fits.len() != data.arms() {
            return invalid(format!("expected {} survival fits, got {}", data.arms(), fits.len()));
        }
        if let Some(k) = fits.iter().position(|f| !f.converged) {
            return Err(Error::NonConvergence { model: format!("survival model for arm {}", k + 1), iterations: 0 });
        }
        let mut probs = DMatrix::zeros(data.n(), data.arms());
        for (k, fit) in fits.iter().enumerate() {
            let eta = design * &fit.coef;
            for i in 0..data.n() {
                probs[(i, k)] = expit(eta[i]);
            }
        }
        Self::from_probabilities(data, &probs, source, assignment)
    }

    pub fn arms(&self) -> usize {
        self.p.ncols() - 2
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    /// Clamped `e_g(X_i)`.
    pub fn e(&self, i: usize, g: usize) -> f64 {
        stratum_score(&self.p, i, self.arms(), g)
    }

    /// Marginal stratum share implied by `p_marg`.
    pub fn e_marginal(&self, g: usize) -> f64 {
        let j = self.arms();
        self.p_marg[j - g + 1] - self.p_marg[j - g]
    }
}

/// Alias of [`PrincipalScores::from_fits`].
pub fn principal_scores(
    data: &TrialData,
    design: &DMatrix<f64>,
    fits: &[NuisanceFit],
    source: MarginalSource,
    assignment: Option<&DMatrix<f64>>,
) -> Result<PrincipalScores> {
    PrincipalScores::from_fits(data, design, fits, source, assignment)
}

/// Per-unit weights `[(p_a - p_b)/p_z]^{-1} (p_a(X) - p_b(X))/p_z(X)` with `a = J-g+1`, `b = J-g`.
pub fn psw_weights(ps: &PrincipalScores, g: usize, z: usize) -> Result<Vec<f64>> {
    let j = ps.arms();
    check_mean(StratumId::monotone(j, g), z)?;
    let share = ps.e_marginal(g);
    if share <= 0.0 {
        return Err(Error::Numerical(format!("stratum {g} has non-positive estimated share {share}")));
    }
    let norm = ps.p_marg[z] / share;
    (0..ps.n())
        .map(|i| {
            let pz = ps.p[(i, z)];
            if pz < PROB_FLOOR {
                return Err(Error::Numerical(format!("unit {i}: p_{z}(X) below {PROB_FLOOR}")));
            }
            Ok(norm * ps.e(i, g) / pz)
        })
        .collect()
}

/// Weighted standardized mean differences per covariate: weighted mean over arm-`z` survivors
/// minus the `e_g(X)`-weighted population mean, divided by the unweighted population SD.
/// `None` marks a zero-variance covariate whose means nonetheless differ.
pub fn balance_smd(data: &TrialData, ps: &PrincipalScores, g: usize, z: usize) -> Result<Vec<Option<f64>>> {
    let w = psw_weights(ps, g, z)?;
    let n = data.n();
    let survivors: Vec<usize> = (0..n).filter(|&i| data.z(i) == z && data.s(i)).collect();
    if survivors.is_empty() {
        return invalid(format!("arm {z} has no survivors"));
    }
    let wsum: f64 = survivors.iter().map(|&i| w[i]).sum();
    let esum: f64 = (0..n).map(|i| ps.e(i, g)).sum();
    if wsum <= 0.0 || esum <= 0.0 {
        return Err(Error::Numerical(format!("stratum {g} carries no weight in arm {z}")));
    }
    let x = data.x();
    Ok((0..x.ncols())
        .map(|c| {
            let col = x.column(c);
            let arm_mean = survivors.iter().map(|&i| w[i] * col[i]).sum::<f64>() / wsum;
            let target = (0..n).map(|i| ps.e(i, g) * col[i]).sum::<f64>() / esum;
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let diff = arm_mean - target;
            if sd > 0.0 {
                Some(diff / sd)
            } else if diff.abs() <= 1e-12 * mean.abs().max(1.0) {
                Some(0.0)
            } else {
                None
            }
        })
        .collect())
}

/// One line of the balance diagnostic table.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceRow {
    pub stratum: StratumId,
    pub arm: usize,
    pub covariate: String,
    pub smd: Option<f64>,
}

/// Balance metrics for every stratum/arm pair with a defined mean.
pub fn balance_table(data: &TrialData, ps: &PrincipalScores) -> Result<Vec<BalanceRow>> {
    let j = data.arms();
    let mut rows = Vec::new();
    for g in 1..=j {
        for z in (j - g + 1)..=j {
            let smd = balance_smd(data, ps, g, z)?;
            for (c, v) in smd.into_iter().enumerate() {
                rows.push(BalanceRow {
                    stratum: StratumId::monotone(j, g),
                    arm: z,
                    covariate: data.covariate_names()[c].clone(),
                    smd: v,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn const_data(n: usize) -> TrialData {
        let z: Vec<usize> = (0..n).map(|i| i % 3 + 1).collect();
        let s: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
        let y = s.iter().enumerate().map(|(i, &b)| b.then_some(i as f64 * 0.1)).collect();
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { (i % 7) as f64 } else { 1.0 });
        TrialData::new(3, z, s, y, x, Some(vec![1.0 / 3.0; 3])).unwrap()
    }

    #[test]
    fn monotone_enumeration() {
        let names: Vec<String> = enumerate_strata(4, true).iter().map(|s| s.to_string()).collect();
        assert_eq!(names, ["0000", "0001", "0011", "0111", "1111"]);
        let two: Vec<String> = enumerate_strata(2, true).iter().map(|s| s.to_string()).collect();
        assert_eq!(two, ["00", "01", "11"]);
        let all = enumerate_strata(3, false);
        assert_eq!(all.len(), 8);
        assert_eq!(all[1].to_string(), "001");
        assert_eq!(all[6].to_string(), "110");
    }

    #[test]
    fn arm_survivor_mixture_structure() {
        let j = 4;
        for z in 1..=j {
            let mix: Vec<usize> = enumerate_strata(j, true)
                .iter()
                .filter(|s| s.survives(z))
                .map(|s| s.monotone_index().unwrap())
                .collect();
            assert_eq!(mix, ((j - z + 1)..=j).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bits_round_trip() {
        for s in enumerate_strata(4, false) {
            assert_eq!(StratumId::from_bits(&s.bits()).unwrap(), s);
            assert_eq!(s.to_string().parse::<StratumId>().unwrap(), s);
            if let Some(g) = s.monotone_index() {
                assert_eq!(StratumId::monotone(4, g), s);
            }
        }
        assert!(!"0101".parse::<StratumId>().unwrap().is_monotone());
    }

    #[test]
    fn estimand_sets() {
        let three: Vec<String> = valid_estimands(3).iter().map(|e| e.to_string()).collect();
        assert_eq!(three, ["Delta_2(2,3)", "Delta_3(1,2)", "Delta_3(1,3)", "Delta_3(2,3)"]);
        assert_eq!(valid_estimands(2).len(), 1);
        let four = valid_estimands(4);
        assert_eq!(four.len(), 10);
        assert_eq!(four.iter().filter(|e| e.g() == Some(2)).count(), 1);
        assert_eq!(four.iter().filter(|e| e.g() == Some(3)).count(), 3);
        assert_eq!(four.iter().filter(|e| e.g() == Some(4)).count(), 6);
    }

    #[test]
    fn invalid_estimand_quotes_rule() {
        let e = EstimandSpec::new(3, 1, 1, 3).unwrap();
        let msg = e.validate().unwrap_err().to_string();
        assert!(msg.contains("g + z >= J + 1"), "{msg}");
    }

    #[test]
    fn marginal_shares_telescope() {
        let d = const_data(12);
        let probs = DMatrix::from_fn(12, 3, |_, k| [0.3, 0.5, 0.9][k]);
        let ps = PrincipalScores::from_probabilities(&d, &probs, MarginalSource::ModelBased, None).unwrap();
        let e: Vec<f64> = (0..=3).map(|g| ps.e_marginal(g)).collect();
        let want = [0.1, 0.4, 0.2, 0.3];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_scores_give_unit_weights() {
        let d = const_data(30);
        let probs = DMatrix::from_fn(30, 3, |_, k| [0.3, 0.5, 0.9][k]);
        let ps = PrincipalScores::from_probabilities(&d, &probs, MarginalSource::ModelBased, None).unwrap();
        for g in 1..=3 {
            for z in (4 - g)..=3 {
                assert!(psw_weights(&ps, g, z).unwrap().iter().all(|w| (w - 1.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn top_stratum_uses_first_arm_score() {
        let d = const_data(9);
        let probs = DMatrix::from_fn(9, 3, |i, k| 0.2 + 0.05 * (i % 3) as f64 + 0.2 * k as f64);
        let ps = PrincipalScores::from_probabilities(&d, &probs, MarginalSource::ModelBased, None).unwrap();
        for i in 0..9 {
            assert_eq!(ps.e(i, 3), ps.p[(i, 1)]);
        }
    }

    #[test]
    fn two_level_weight_table() {
        // Two covariate cells with known probabilities; weights evaluated by hand.
        let n = 6;
        let z = vec![1, 2, 3, 1, 2, 3];
        let s = vec![true; 6];
        let y = vec![Some(0.0); 6];
        let x = DMatrix::from_fn(n, 1, |i, _| (i / 3) as f64);
        let d = TrialData::new(3, z, s, y, x, Some(vec![1.0 / 3.0; 3])).unwrap();
        let cell = [[0.2, 0.5, 0.6], [0.4, 0.6, 0.9]];
        let probs = DMatrix::from_fn(n, 3, |i, k| cell[i / 3][k]);
        let ps = PrincipalScores::from_probabilities(&d, &probs, MarginalSource::ModelBased, None).unwrap();
        // g = 2, z = 3: numerator p2 - p1, normalization p3 / (p2 - p1) marginals.
        let marg_norm = ((0.6 + 0.9) / 2.0) / ((0.3 + 0.2) / 2.0);
        let w = psw_weights(&ps, 2, 3).unwrap();
        assert!((w[0] - marg_norm * 0.3 / 0.6).abs() < 1e-12);
        assert!((w[4] - marg_norm * 0.2 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn constant_covariate_balances_exactly() {
        let d = const_data(60);
        let probs = DMatrix::from_fn(60, 3, |i, k| 0.3 + 0.02 * (i % 7) as f64 + 0.2 * k as f64);
        let ps = PrincipalScores::from_probabilities(&d, &probs, MarginalSource::ModelBased, None).unwrap();
        let smd = balance_smd(&d, &ps, 2, 3).unwrap();
        assert_eq!(smd[1], Some(0.0));
        assert!(smd[0].is_some());
    }

    #[test]
    fn clamping_counts() {
        let d = const_data(6);
        let probs = DMatrix::from_fn(6, 3, |i, k| if i == 0 && k == 0 { 0.0 } else { 0.3 + 0.2 * k as f64 });
        let ps = PrincipalScores::from_probabilities(&d, &probs, MarginalSource::ModelBased, None).unwrap();
        assert_eq!(ps.clamped, 1);
        assert_eq!(ps.p[(0, 1)], PROB_FLOOR);
        let bad = DMatrix::from_element(6, 3, 1.5);
        assert!(PrincipalScores::from_probabilities(&d, &bad, MarginalSource::ModelBased, None).is_err());
    }

    proptest! {
        #[test]
        fn unit_scores_sum_to_one(rows in prop::collection::vec(prop::collection::vec(0.01f64..0.99, 3), 3..20)) {
            let n = rows.len();
            let mut sorted = rows.clone();
            for r in &mut sorted {
                r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
            let z: Vec<usize> = (0..n).map(|i| i % 3 + 1).collect();
            let d = TrialData::new(3, z, vec![false; n], vec![None; n], DMatrix::zeros(n, 1), None).unwrap();
            let probs = DMatrix::from_fn(n, 3, |i, k| sorted[i][k]);
            let ps = PrincipalScores::from_probabilities(&d, &probs, MarginalSource::ModelBased, None).unwrap();
            for i in 0..n {
                let total: f64 = (0..=3).map(|g| ps.e(i, g)).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
            prop_assert_eq!(ps.negative_scores, 0);
        }
    }
}
