mod common;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sace_core::data::{DesignSpec, TrialData};
use sace_core::estimators::{
    estimate_dr, estimate_observational, estimate_or, estimate_psw, fit_models, EstimationOptions, Method,
    ObservationalVariant, Target,
};
use sace_core::inference::{estimate_means, stack};
use sace_core::simulation::generate_main;
use sace_core::strata::{MarginalSource, PrincipalScores};

fn binary_trial(n: usize, seed: u64) -> (TrialData, DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut z, mut s, mut y, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut probs = DMatrix::zeros(n, 2);
    let mut m = DMatrix::zeros(n, 2);
    for i in 0..n {
        let xi: f64 = rng.random();
        let arm = if rng.random::<f64>() < 0.4 { 1 } else { 2 };
        let (p1, p2) = (0.2 + 0.4 * xi, 0.5 + 0.4 * xi);
        let p = if arm == 1 { p1 } else { p2 };
        let alive = rng.random::<f64>() < p;
        probs[(i, 0)] = p1;
        probs[(i, 1)] = p2;
        m[(i, 0)] = 1.0 + 2.0 * xi;
        m[(i, 1)] = 1.5 + xi;
        z.push(arm);
        s.push(alive);
        y.push(alive.then(|| 1.0 + arm as f64 * xi + rng.random::<f64>()));
        x.push(xi);
    }
    let d = TrialData::new(2, z, s, y, DMatrix::from_vec(n, 1, x), Some(vec![0.4, 0.6])).unwrap();
    (d, probs, m)
}

/// Two-arm weighting, regression and influence-function estimators written out directly.
struct Binary<'a> {
    d: &'a TrialData,
    p: &'a DMatrix<f64>,
    m: &'a DMatrix<f64>,
    pi: [f64; 2],
}

impl Binary<'_> {
    fn ind(&self, i: usize, k: usize) -> f64 {
        if self.d.z(i) == k && self.d.s(i) {
            1.0 / self.pi[k - 1]
        } else {
            0.0
        }
    }

    fn mean(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.d.n()).map(f).sum::<f64>() / self.d.n() as f64
    }

    fn psi(&self, i: usize, k: usize) -> f64 {
        let p = self.p[(i, k - 1)];
        let a = if self.d.z(i) == k { 1.0 / self.pi[k - 1] } else { 0.0 };
        a * (f64::from(u8::from(self.d.s(i))) - p) + p
    }

    /// Always survivors (stratum 11) under arm `z`.
    fn always(&self, z: usize) -> [f64; 3] {
        let psw = self.mean(|i| self.p[(i, 0)] / self.p[(i, z - 1)] * self.ind(i, z) * self.d.ys(i)) / self.mean(|i| self.ind(i, 1));
        let or = self.mean(|i| self.ind(i, 1) * self.m[(i, z - 1)]) / self.mean(|i| self.ind(i, 1));
        let dr = self.mean(|i| {
            let r = self.p[(i, 0)] / self.p[(i, z - 1)];
            r * self.ind(i, z) * (self.d.ys(i) - self.m[(i, z - 1)]) + self.m[(i, z - 1)] * self.psi(i, 1)
        }) / self.mean(|i| self.psi(i, 1));
        [psw, or, dr]
    }

    /// Protected stratum (01) under arm 2.
    fn protected(&self) -> [f64; 3] {
        let diff = |i: usize| self.p[(i, 1)] - self.p[(i, 0)];
        let den = self.mean(|i| self.ind(i, 2)) - self.mean(|i| self.ind(i, 1));
        let psw = self.mean(|i| diff(i) / self.p[(i, 1)] * self.ind(i, 2) * self.d.ys(i)) / den;
        let or = self.mean(|i| (self.ind(i, 2) - self.ind(i, 1)) * self.m[(i, 1)]) / den;
        let dr = self.mean(|i| {
            diff(i) / self.p[(i, 1)] * self.ind(i, 2) * (self.d.ys(i) - self.m[(i, 1)])
                + self.m[(i, 1)] * (self.psi(i, 2) - self.psi(i, 1))
        }) / self.mean(|i| self.psi(i, 2) - self.psi(i, 1));
        [psw, or, dr]
    }
}

#[test]
fn two_arms_reproduce_binary_estimators() {
    let (d, probs, m) = binary_trial(500, 3);
    let np = PrincipalScores::from_probabilities(&d, &probs, MarginalSource::Nonparametric, None).unwrap();
    let aug = PrincipalScores::from_probabilities(&d, &probs, MarginalSource::Augmented, None).unwrap();
    let b = Binary { d: &d, p: &probs, m: &m, pi: [0.4, 0.6] };
    let ours = |g, z| {
        [
            estimate_psw(&d, &np, g, z).unwrap(),
            estimate_or(&d, &np, &m, g, z).unwrap(),
            estimate_dr(&d, &aug, &m, g, z).unwrap(),
        ]
    };
    for (got, want) in [(ours(2, 1), b.always(1)), (ours(2, 2), b.always(2)), (ours(1, 2), b.protected())] {
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() < 1e-10, "{got:?} vs {want:?}");
        }
    }
}

fn targets() -> Vec<Target> {
    [(1, 3), (2, 2), (2, 3), (3, 1), (3, 2), (3, 3)].iter().map(|&(g, z)| Target::monotone(3, g, z)).collect()
}

#[test]
fn stacking_keeps_standalone_points() {
    let draw = generate_main(700, 31).unwrap();
    let d = &draw.data;
    let models = fit_models(d, &common::sim_specs()).unwrap();
    let m = models.outcome_predictions();
    let np = models.principal_scores(d, MarginalSource::Nonparametric).unwrap();
    let aug = models.principal_scores(d, MarginalSource::Augmented).unwrap();
    let opts = EstimationOptions::default();
    for (method, f) in [
        (Method::Psw, Box::new(|g, z| estimate_psw(d, &np, g, z).unwrap()) as Box<dyn Fn(usize, usize) -> f64>),
        (Method::Or, Box::new(|g, z| estimate_or(d, &np, &m, g, z).unwrap())),
        (Method::Dr, Box::new(|g, z| estimate_dr(d, &aug, &m, g, z).unwrap())),
    ] {
        let st = stack(d, &models, &method, &targets(), &opts).unwrap();
        for t in targets() {
            let g = t.stratum.monotone_index().unwrap();
            assert!((st.theta_hat[st.mean_index(t).unwrap()] - f(g, t.arm)).abs() < 1e-10);
        }
    }
}

#[test]
fn observational_variants_on_saturated_cells() {
    let cells = &common::UNBALANCED;
    let d = cells.build(None, None);
    let models = fit_models(&d, &common::saturated_specs()).unwrap();
    let opts = EstimationOptions::default();
    for method in [Method::TpPs, Method::TpOr, Method::PsOr, Method::Tr] {
        let est = estimate_means(&d, &models, &method, &targets(), &opts).unwrap();
        for (t, r) in est.targets.iter().zip(&est.means) {
            let oracle = cells.oracle(t.stratum.monotone_index().unwrap(), t.arm);
            assert!((r.point - oracle).abs() < 1e-10, "{} {t:?}: {} vs {oracle}", method.tag(), r.point);
        }
    }
    assert!(estimate_means(&d, &models, &Method::Dr, &targets(), &opts).is_err());
}

#[test]
fn standalone_observational_matches_stack() {
    let d = common::UNBALANCED.build(None, None);
    let models = fit_models(&d, &common::saturated_specs()).unwrap();
    let pi_hat = models.propensity_probabilities().unwrap();
    let ps = PrincipalScores::from_probabilities(&d, &models.survival_probabilities(), MarginalSource::ModelBased, None).unwrap();
    let m = models.outcome_predictions();
    let v = estimate_observational(&d, &pi_hat, &ps, &m, 2, 3, ObservationalVariant::Tr).unwrap();
    assert!((v - common::UNBALANCED.oracle(2, 3)).abs() < 1e-10);
}

#[test]
fn tr_with_intercept_only_propensity_equals_dr() {
    let d = common::saturated();
    let mut specs = common::saturated_specs();
    specs.propensity = Some(DesignSpec::intercept_only());
    let models = fit_models(&d, &specs).unwrap();
    let opts = EstimationOptions::default();
    let dr = estimate_means(&d, &models, &Method::Dr, &targets(), &opts).unwrap();
    let tr = estimate_means(&d, &models, &Method::Tr, &targets(), &opts).unwrap();
    for (a, b) in dr.means.iter().zip(&tr.means) {
        assert!((a.point - b.point).abs() < 1e-10);
    }
}

#[test]
fn constant_outcome_every_method() {
    let specs = common::saturated_specs();
    let opts = EstimationOptions::default();
    for (d, methods) in [
        (common::BALANCED.build(Some(vec![1.0 / 3.0; 3]), Some(2.75)), vec![Method::Psw, Method::Or, Method::Dr, Method::Tr]),
        (common::UNBALANCED.build(None, Some(2.75)), vec![Method::TpPs, Method::TpOr, Method::PsOr, Method::Tr]),
    ] {
        let models = fit_models(&d, &specs).unwrap();
        for method in methods {
            let est = estimate_means(&d, &models, &method, &targets(), &opts).unwrap();
            assert!(est.means.iter().all(|r| (r.point - 2.75).abs() < 1e-10), "{}", method.tag());
        }
    }
}

#[test]
fn invalid_estimand_names_the_rule() {
    let d = common::saturated();
    let models = fit_models(&d, &common::saturated_specs()).unwrap();
    let err = estimate_means(&d, &models, &Method::Dr, &[Target::monotone(3, 1, 2)], &EstimationOptions::default())
        .unwrap_err();
    assert!(err.to_string().contains("g + z >= J + 1"), "{err}");
}
