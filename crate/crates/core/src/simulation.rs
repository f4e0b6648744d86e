//! Three-arm data-generating processes, super-population truths and a seeded Monte Carlo
//! runner.
//!
//! Random numbers come from ChaCha20 seeded with the configured 64-bit seed. Stream 0 is
//! used by the standalone generators; replicate `r` (zero-based) of a Monte Carlo study
//! uses stream `r + 1`. Each unit consumes, in order: three standard normals for the
//! half-normal covariates, one uniform for the binary covariate, one uniform for the arm,
//! one uniform for the stratum and three standard normals for the outcome errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DesignSpec, TrialData};
use crate::error::{invalid, Error, Result};
use crate::estimators::{fit_models, BcForm, EstimationOptions, Method, ModelSpecs, OutcomeMode};
use crate::glm::expit;
use crate::inference::estimate;
use crate::sensitivity::{MoSensitivitySpec, PiSensitivitySpec};
use crate::strata::{valid_estimands, EstimandSpec, StratumId};

pub const ARMS: usize = 3;
pub const SUPER_POPULATION: usize = 250_000;
/// Seed of the default super-population draw.
pub const ORACLE_SEED: u64 = 20_250_601;

/// Which data-generating process to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioKind {
    Main,
    PiViolated,
    PiConst { delta1: f64, delta2: f64 },
    Mo { rho: f64 },
}

impl ScenarioKind {
    pub fn label(&self) -> String {
        match self {
            ScenarioKind::Main => "main".into(),
            ScenarioKind::PiViolated => "pi_violated".into(),
            ScenarioKind::PiConst { delta1, delta2 } => format!("pi_const_{delta1}_{delta2}"),
            ScenarioKind::Mo { rho } => format!("mo_{rho}"),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ScenarioKind::PiConst { delta1, delta2 } if !(delta1 > 0.0 && delta2 > 0.0) => {
                invalid("scenario deltas must be positive")
            }
            ScenarioKind::Mo { rho } if !(rho >= 0.0 && rho.is_finite()) => invalid("scenario rho must be nonnegative"),
            _ => Ok(()),
        }
    }
}

/// One Monte Carlo study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub ps_correct: bool,
    pub om_correct: bool,
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind, n: usize, reps: usize, seed: u64) -> Self {
        Self { kind, n, reps, seed, ps_correct: true, om_correct: true }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if self.n < 10 {
            return invalid(format!("sample size {} is too small", self.n));
        }
        if self.reps == 0 {
            return invalid("reps must be at least 1");
        }
        Ok(())
    }

    /// Working models: all four covariates, or `cos(X1)` for a misspecified model.
    pub fn model_specs(&self) -> ModelSpecs {
        let pick = |correct: bool| if correct { DesignSpec::linear(4) } else { DesignSpec::cosine_first() };
        ModelSpecs {
            survival: pick(self.ps_correct),
            outcome: pick(self.om_correct).with_interactions(),
            outcome_mode: OutcomeMode::Pooled,
            propensity: None,
        }
    }
}

/// A draw with its latent quantities.
#[derive(Debug, Clone)]
pub struct SimDraw {
    pub data: TrialData,
    pub strata: Vec<StratumId>,
    /// n x 3 potential outcomes; NaN where the unit would not survive.
    pub potential: DMatrix<f64>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn monotone_strata() -> [StratumId; 4] {
    [0, 1, 2, 3].map(|g| StratumId::monotone(ARMS, g))
}

fn harmed_strata() -> [StratumId; 4] {
    ["010", "100", "101", "110"].map(|s| s.parse().expect("valid stratum"))
}

/// `X1 + 2 X2 + 2 X3 + 2 X4`.
fn arm2_linear(x: &[f64]) -> f64 {
    x[0] + 2.0 * (x[1] + x[2] + x[3])
}

fn total(x: &[f64]) -> f64 {
    x.iter().sum()
}

/// True `delta_22(X)`.
pub fn true_delta22(x: &[f64]) -> f64 {
    1.0 + 1.0 / (1.0 + arm2_linear(x))
}

/// True `delta_32(X)`.
pub fn true_delta32(x: &[f64]) -> f64 {
    1.0 + 1.0 / (3.0 + total(x))
}

fn main_survival(x: &[f64]) -> [f64; 3] {
    let slopes = [0.3, 0.4, 0.5, 0.4];
    [1.0, 2.0, 3.0].map(|z| expit((0..4).map(|j| (-0.8 + slopes[j] * z) * x[j]).sum()))
}

/// Stratum law of unit with covariates `x`.
fn stratum_law(kind: &ScenarioKind, x: &[f64]) -> Vec<(StratumId, f64)> {
    let mono = monotone_strata();
    match *kind {
        ScenarioKind::Main => {
            let p = main_survival(x);
            let e = [1.0 - p[2], p[2] - p[1], p[1] - p[0], p[0]];
            mono.into_iter().zip(e).collect()
        }
        ScenarioKind::PiViolated | ScenarioKind::PiConst { .. } => mono.into_iter().zip([0.1, 0.2, 0.3, 0.4]).collect(),
        ScenarioKind::Mo { rho } => {
            let c = 0.2 / (1.0 + 3.0 * rho);
            let e = [c, 0.2 + rho * c, 0.2 + rho * c, 0.4 - 3.0 * rho * c];
            let mut law: Vec<(StratumId, f64)> = mono.into_iter().zip(e).collect();
            law.extend(harmed_strata().into_iter().map(|s| (s, rho * c)));
            law
        }
    }
}

/// Mean of `Y(z)` for stratum `g` (which survives under `z`).
fn outcome_mean(kind: &ScenarioKind, stratum: StratumId, z: usize, x: &[f64]) -> f64 {
    let main = |z: usize| match z {
        1 => 2.0 + x[0] + 3.0 * (x[1] + x[2] + x[3]),
        2 => 2.0 + arm2_linear(x),
        _ => 3.0 + total(x),
    };
    let g = stratum.monotone_index();
    match *kind {
        ScenarioKind::Main | ScenarioKind::Mo { .. } => main(z),
        ScenarioKind::PiViolated => match (z, g) {
            (2, Some(3)) => 1.0 + arm2_linear(x),
            (3, Some(2)) => 4.0 + total(x),
            _ => main(z),
        },
        ScenarioKind::PiConst { delta1, delta2 } => match (z, g) {
            (2, Some(2)) => delta2 * (1.0 + arm2_linear(x)),
            (2, _) => 1.0 + arm2_linear(x),
            (3, Some(1)) => delta1 * (3.0 + total(x)),
            (3, Some(2)) => delta2 * (3.0 + total(x)),
            _ => main(z),
        },
    }
}

fn draw(kind: &ScenarioKind, n: usize, seed: u64, stream: u64) -> Result<SimDraw> {
    kind.validate()?;
    if n == 0 {
        return invalid("sample size must be positive");
    }
    let mut rng = rng_for(seed, stream);
    let mut x = DMatrix::zeros(n, 4);
    let mut z = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut strata = Vec::with_capacity(n);
    let mut potential = DMatrix::from_element(n, ARMS, f64::NAN);
    for i in 0..n {
        let mut row = [0.0; 4];
        for v in row.iter_mut().take(3) {
            *v = rng.sample::<f64, _>(StandardNormal).abs();
        }
        row[3] = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let arm = ((rng.random::<f64>() * ARMS as f64) as usize).min(ARMS - 1) + 1;
        let u: f64 = rng.random();
        let law = stratum_law(kind, &row);
        let mut acc = 0.0;
        let mut g = law[law.len() - 1].0;
        for &(st, w) in &law {
            acc += w;
            if u < acc {
                g = st;
                break;
            }
        }
        let errors: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        for k in 1..=ARMS {
            if g.survives(k) {
                potential[(i, k - 1)] = outcome_mean(kind, g, k, &row) + errors[k - 1];
            }
        }
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
        z.push(arm);
        s.push(g.survives(arm));
        y.push(g.survives(arm).then(|| potential[(i, arm - 1)]));
        strata.push(g);
    }
    if (1..=ARMS).any(|k| !z.contains(&k)) {
        return Err(Error::Numerical("a simulated arm received no units".into()));
    }
    let data = TrialData::new(ARMS, z, s, y, x, Some(vec![1.0 / 3.0; ARMS]))?;
    Ok(SimDraw { data, strata, potential })
}

/// Draw from the given scenario on an explicit RNG stream.
pub fn generate(kind: &ScenarioKind, n: usize, seed: u64, stream: u64) -> Result<SimDraw> {
    draw(kind, n, seed, stream)
}

pub fn generate_main(n: usize, seed: u64) -> Result<SimDraw> {
    draw(&ScenarioKind::Main, n, seed, 0)
}

pub fn generate_pi_violated(n: usize, seed: u64) -> Result<SimDraw> {
    draw(&ScenarioKind::PiViolated, n, seed, 0)
}

pub fn generate_pi_const(n: usize, seed: u64, delta1: f64, delta2: f64) -> Result<SimDraw> {
    draw(&ScenarioKind::PiConst { delta1, delta2 }, n, seed, 0)
}

pub fn generate_mo(n: usize, seed: u64, rho: f64) -> Result<SimDraw> {
    draw(&ScenarioKind::Mo { rho }, n, seed, 0)
}

/// One super-population stratum mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub stratum: StratumId,
    pub z: usize,
    pub mean: f64,
    pub count: usize,
}

/// Stratum means of the potential outcomes over a large draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truths {
    pub kind: ScenarioKind,
    pub oracle_seed: u64,
    pub size: usize,
    pub means: Vec<TruthEntry>,
    /// Super-population averages of the true `delta_22(X)` and `delta_32(X)`.
    pub delta_means: (f64, f64),
}

impl Truths {
    pub fn mean(&self, stratum: StratumId, z: usize) -> Option<f64> {
        self.means.iter().find(|e| e.stratum == stratum && e.z == z).map(|e| e.mean)
    }

    pub fn contrast(&self, e: &EstimandSpec) -> Option<f64> {
        Some(self.mean(e.stratum, e.z)? - self.mean(e.stratum, e.zprime)?)
    }
}

/// Super-population truths, read from or written to `cache_dir` when given.
pub fn true_values(kind: &ScenarioKind, oracle_seed: u64, size: usize, cache_dir: Option<&Path>) -> Result<Truths> {
    let cache = cache_dir.map(|d| d.join(format!("truth_{}_{oracle_seed}_{size}.json", kind.label())));
    if let Some(path) = &cache {
        if let Ok(text) = fs::read_to_string(path) {
            if let Ok(t) = serde_json::from_str::<Truths>(&text) {
                if t.kind == *kind {
                    return Ok(t);
                }
            }
        }
    }
    let pop = draw(kind, size, oracle_seed, 0)?;
    let mut acc: BTreeMap<(StratumId, usize), (f64, usize)> = BTreeMap::new();
    for (i, g) in pop.strata.iter().enumerate() {
        for z in 1..=ARMS {
            if g.survives(z) {
                let e = acc.entry((*g, z)).or_insert((0.0, 0));
                e.0 += pop.potential[(i, z - 1)];
                e.1 += 1;
            }
        }
    }
    let means = acc
        .into_iter()
        .map(|((stratum, z), (sum, count))| TruthEntry { stratum, z, mean: sum / count as f64, count })
        .collect();
    let x = pop.data.x();
    let rows: Vec<[f64; 4]> = (0..size).map(|i| [x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]]).collect();
    let d22 = rows.iter().map(|r| true_delta22(r)).sum::<f64>() / size as f64;
    let d32 = rows.iter().map(|r| true_delta32(r)).sum::<f64>() / size as f64;
    let truths = Truths { kind: *kind, oracle_seed, size, means, delta_means: (d22, d32) };
    if let Some(path) = &cache {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(&truths)?)?;
    }
    Ok(truths)
}

/// Estimator run inside a study. The sensitivity variants take the scenario's parameters.
#[derive(Clone)]
pub enum McMethod {
    Standard(Method),
    /// BC-PI with the scenario's true sensitivity functions.
    BcPiTrue(BcForm),
    /// BC-PI with each true function replaced by its super-population mean.
    BcPiMean(BcForm),
    /// BC-MO with the scenario's true rho.
    BcMoTrue(BcForm),
}

impl McMethod {
    pub fn label(&self) -> String {
        match self {
            McMethod::Standard(m) => m.tag(),
            McMethod::BcPiTrue(f) => bc_tag("BC-PI", *f),
            McMethod::BcPiMean(f) => format!("{}(mean-delta)", bc_tag("BC-PI", *f)),
            McMethod::BcMoTrue(f) => bc_tag("BC-MO", *f),
        }
    }

    /// The concrete estimator for `kind`.
    pub fn resolve(&self, kind: &ScenarioKind, truths: &Truths) -> Result<Method> {
        let pi = |spec: PiSensitivitySpec, form: BcForm| Method::BcPi { form, spec: Arc::new(spec) };
        Ok(match (self, *kind) {
            (McMethod::Standard(m), _) => m.clone(),
            (McMethod::BcPiTrue(f), ScenarioKind::PiViolated) => pi(
                PiSensitivitySpec::function(
                    ARMS,
                    Arc::new(|z, g, x: &[f64]| match (z, g) {
                        (2, 2) => true_delta22(x),
                        (3, 2) => true_delta32(x),
                        _ => 1.0,
                    }),
                ),
                *f,
            ),
            (McMethod::BcPiTrue(f) | McMethod::BcPiMean(f), ScenarioKind::PiConst { delta1, delta2 }) => {
                pi(PiSensitivitySpec::treatment_invariant(ARMS, &[(1, delta1), (2, delta2)])?, *f)
            }
            (McMethod::BcPiMean(f), ScenarioKind::PiViolated) => {
                let (d22, d32) = truths.delta_means;
                pi(PiSensitivitySpec::constant(ARMS, [((2, 2), d22), ((3, 2), d32), ((3, 1), 1.0)])?, *f)
            }
            (McMethod::BcPiTrue(f) | McMethod::BcPiMean(f), _) => pi(PiSensitivitySpec::identity(ARMS), *f),
            (McMethod::BcMoTrue(f), ScenarioKind::Mo { rho }) => {
                Method::BcMo { form: *f, spec: Arc::new(MoSensitivitySpec::equal(ARMS, 0, &harmed_strata(), rho)?) }
            }
            (McMethod::BcMoTrue(f), _) => Method::BcMo { form: *f, spec: Arc::new(MoSensitivitySpec::monotone(ARMS)) },
        })
    }
}

fn bc_tag(base: &str, form: BcForm) -> String {
    match form {
        BcForm::DoublyRobust => base.to_string(),
        BcForm::Weighting => format!("{base}-PSW"),
        BcForm::Regression => format!("{base}-OR"),
    }
}

/// Aggregated performance of one method on one contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub scenario: String,
    pub n: usize,
    pub g: usize,
    pub z: usize,
    pub zprime: usize,
    pub method: String,
    pub ps_spec: String,
    pub om_spec: String,
    pub truth: f64,
    pub bias: f64,
    pub mcsd: f64,
    pub aese: f64,
    /// Wald coverage as a fraction.
    pub cp: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub config: ScenarioConfig,
    pub rows: Vec<McRow>,
    pub truths: Truths,
}

impl MonteCarloReport {
    pub fn row(&self, method: &str, e: &EstimandSpec) -> Option<&McRow> {
        let g = e.g()?;
        self.rows.iter().find(|r| r.method == method && r.g == g && r.z == e.z && r.zprime == e.zprime)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-replicate outcome: for each method, either the (point, se) pairs of every contrast or a failure.
type Replicate = Vec<Option<Vec<(f64, f64)>>>;

fn replicate(config: &ScenarioConfig, methods: &[Method], estimands: &[EstimandSpec], rep: usize) -> Replicate {
    let opts = EstimationOptions::default();
    let fitted = generate(&config.kind, config.n, config.seed, rep as u64 + 1)
        .and_then(|d| fit_models(&d.data, &config.model_specs()).map(|m| (d, m)));
    let Ok((d, models)) = fitted else {
        return vec![None; methods.len()];
    };
    methods
        .iter()
        .map(|m| {
            estimate(&d.data, &models, m, estimands, &opts)
                .ok()
                .map(|est| est.contrasts.iter().map(|c| (c.point, c.se)).collect())
        })
        .collect()
}

/// Runs a study with truths from the default super-population.
pub fn run_monte_carlo(config: &ScenarioConfig, methods: &[McMethod]) -> Result<MonteCarloReport> {
    let truths = true_values(&config.kind, ORACLE_SEED, SUPER_POPULATION, None)?;
    run_monte_carlo_with_truths(config, methods, &truths)
}

/// Runs `config.reps` replicates in parallel and aggregates against `truths`.
pub fn run_monte_carlo_with_truths(
    config: &ScenarioConfig,
    methods: &[McMethod],
    truths: &Truths,
) -> Result<MonteCarloReport> {
    config.validate()?;
    if methods.is_empty() {
        return invalid("no methods requested");
    }
    let resolved: Vec<Method> = methods.iter().map(|m| m.resolve(&config.kind, truths)).collect::<Result<_>>()?;
    let estimands = valid_estimands(ARMS);
    let reps: Vec<Replicate> =
        (0..config.reps).into_par_iter().map(|r| replicate(config, &resolved, &estimands, r)).collect();
    let z = crate::inference::Z_95;
    let spec_label = |ok: bool| if ok { "correct" } else { "wrong" }.to_string();
    let mut rows = Vec::new();
    for (k, method) in methods.iter().enumerate() {
        for (j, e) in estimands.iter().enumerate() {
            let truth = truths
                .contrast(e)
                .ok_or_else(|| Error::Numerical(format!("no super-population units for {e}")))?;
            let draws: Vec<(f64, f64)> = reps.iter().filter_map(|r| r[k].as_ref().map(|v| v[j])).collect();
            let m = draws.len();
            let failures = config.reps - m;
            let (bias, mcsd, aese, cp) = if m == 0 {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mean = draws.iter().map(|d| d.0).sum::<f64>() / m as f64;
                let var = if m > 1 { draws.iter().map(|d| (d.0 - mean).powi(2)).sum::<f64>() / (m - 1) as f64 } else { 0.0 };
                let aese = draws.iter().map(|d| d.1).sum::<f64>() / m as f64;
                let covered = draws.iter().filter(|d| (d.0 - truth).abs() <= z * d.1).count();
                (mean - truth, var.sqrt(), aese, covered as f64 / m as f64)
            };
            rows.push(McRow {
                scenario: config.kind.label(),
                n: config.n,
                g: e.g().expect("monotone estimand"),
                z: e.z,
                zprime: e.zprime,
                method: method.label(),
                ps_spec: spec_label(config.ps_correct),
                om_spec: spec_label(config.om_correct),
                truth,
                bias,
                mcsd,
                aese,
                cp,
                successes: m,
                failures,
            });
        }
    }
    Ok(MonteCarloReport { config: *config, rows, truths: truths.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draw() {
        let a = generate_main(200, 7).unwrap();
        let b = generate_main(200, 7).unwrap();
        assert_eq!(a.data.x(), b.data.x());
        assert_eq!(a.data.treatments(), b.data.treatments());
        assert_eq!(a.strata, b.strata);
        let c = generate(&ScenarioKind::Main, 200, 7, 1).unwrap();
        assert_ne!(a.data.x(), c.data.x());
    }

    #[test]
    fn main_draw_is_monotone() {
        let d = generate_main(500, 3).unwrap();
        for (i, g) in d.strata.iter().enumerate() {
            assert!(g.is_monotone());
            let bits = g.bits();
            assert!(bits.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(d.data.s(i), g.survives(d.data.z(i)));
            assert_eq!(d.data.y(i).is_some(), d.data.s(i));
        }
    }

    #[test]
    fn stratum_laws_sum_to_one() {
        let x = [0.3, 1.2, 0.1, 1.0];
        for kind in [
            ScenarioKind::Main,
            ScenarioKind::PiViolated,
            ScenarioKind::Mo { rho: 0.0 },
            ScenarioKind::Mo { rho: 0.2 },
            ScenarioKind::Mo { rho: 5.0 },
            ScenarioKind::Mo { rho: 1e6 },
        ] {
            let law = stratum_law(&kind, &x);
            assert!((law.iter().map(|l| l.1).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(law.iter().all(|l| l.1 >= 0.0));
        }
    }

    #[test]
    fn zero_rho_has_no_harmed_units() {
        let d = generate_mo(2000, 11, 0.0).unwrap();
        assert!(d.strata.iter().all(|g| g.is_monotone()));
    }

    #[test]
    fn unit_deltas_match_ignorable_means() {
        let x = [0.5, 0.2, 0.9, 0.0];
        let kind = ScenarioKind::PiConst { delta1: 1.0, delta2: 1.0 };
        for g in 1..=3 {
            let s = StratumId::monotone(3, g);
            assert_eq!(outcome_mean(&kind, s, 3, &x), 3.0 + total(&x));
        }
    }

    #[test]
    fn implied_delta_functions() {
        let x = [0.5, 0.2, 0.9, 1.0];
        let k = ScenarioKind::PiViolated;
        let m = |g, z| outcome_mean(&k, StratumId::monotone(3, g), z, &x);
        assert!((m(2, 2) / m(3, 2) - true_delta22(&x)).abs() < 1e-14);
        assert!((m(2, 3) / m(3, 3) - true_delta32(&x)).abs() < 1e-14);
        assert_eq!(m(1, 3), m(3, 3));
    }

    #[test]
    fn config_validation() {
        assert!(ScenarioConfig::new(ScenarioKind::Main, 500, 0, 1).validate().is_err());
        assert!(ScenarioConfig::new(ScenarioKind::Mo { rho: -1.0 }, 500, 1, 1).validate().is_err());
        assert!(ScenarioConfig::new(ScenarioKind::Main, 500, 1, 1).validate().is_ok());
    }
}
