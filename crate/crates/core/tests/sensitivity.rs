mod common;

use std::sync::Arc;

use sace_core::data::TrialData;
use sace_core::estimators::{fit_models, BcForm, EstimationOptions, Method, Target};
use sace_core::inference::{estimate, estimate_means};
use sace_core::sensitivity::{mo_grid, pi_grid, GridAxis, MoGridSpec, MoSensitivitySpec, PiGridSpec};
use sace_core::simulation::{generate_main, generate_mo};
use sace_core::strata::{valid_estimands, EstimandSpec, StratumId};

fn harmed() -> Vec<StratumId> {
    ["010", "100", "101", "110"].iter().map(|s| s.parse().unwrap()).collect()
}

fn point(v: f64) -> GridAxis {
    GridAxis { lo: v, hi: v, steps: 1 }
}

#[test]
fn unit_delta_grid_point_is_dr() {
    let d = generate_main(1500, 51).unwrap().data;
    let models = fit_models(&d, &common::sim_specs()).unwrap();
    let opts = EstimationOptions::default();
    let estimands = valid_estimands(3);
    let grid = PiGridSpec { form: BcForm::DoublyRobust, fixed: vec![], vary: vec![(2, point(1.0)), (3, point(1.0))] };
    let rows = pi_grid(&d, &models, &grid, &estimands, &opts).unwrap();
    let dr = estimate(&d, &models, &Method::Dr, &estimands, &opts).unwrap();
    assert_eq!(rows.len(), estimands.len());
    for (row, want) in rows.iter().zip(&dr.contrasts) {
        let got = row.report.as_ref().unwrap();
        assert!((got.point - want.point).abs() < 1e-10);
        assert!((got.se / want.se - 1.0).abs() < 1e-6, "{} vs {}", got.se, want.se);
    }
}

#[test]
fn cartesian_grid_size() {
    let d = generate_main(600, 52).unwrap().data;
    let models = fit_models(&d, &common::sim_specs()).unwrap();
    let axis = GridAxis { lo: 0.7, hi: 1.3, steps: 7 };
    let grid = PiGridSpec { form: BcForm::Regression, fixed: vec![], vary: vec![(1, axis), (2, axis)] };
    let estimands = [EstimandSpec::new(3, 3, 1, 2).unwrap(), EstimandSpec::new(3, 2, 2, 3).unwrap()];
    let rows = pi_grid(&d, &models, &grid, &estimands, &EstimationOptions::default()).unwrap();
    assert_eq!(rows.len(), 49 * 2);
    for e in &estimands {
        let mine: Vec<_> = rows.iter().filter(|r| r.estimand == *e).collect();
        assert_eq!(mine.len(), 49);
        for r in &mine { assert!(r.feasible && r.report.is_some(), "{:?} {:?}", r.params, r.reason); }
    }
    assert_eq!(rows[0].params, vec![("delta_1".to_string(), 0.7), ("delta_2".to_string(), 0.7)]);
}

#[test]
fn fixed_delta_shifts_only_affected_contrasts() {
    let d = generate_main(800, 53).unwrap().data;
    let models = fit_models(&d, &common::sim_specs()).unwrap();
    let opts = EstimationOptions::default();
    let top = EstimandSpec::new(3, 2, 2, 3).unwrap();
    let base = pi_grid(&d, &models, &PiGridSpec { form: BcForm::DoublyRobust, fixed: vec![(3, 1.0)], vary: vec![(2, point(1.0))] }, &[top], &opts)
        .unwrap();
    let moved = pi_grid(&d, &models, &PiGridSpec { form: BcForm::DoublyRobust, fixed: vec![(3, 1.0)], vary: vec![(2, point(1.4))] }, &[top], &opts)
        .unwrap();
    let (a, b) = (base[0].report.as_ref().unwrap().point, moved[0].report.as_ref().unwrap().point);
    assert!((a - b).abs() > 1e-3);
}

#[test]
fn rho_line_widens_and_flags_infeasible_points() {
    let d = generate_mo(3000, 54, 0.2).unwrap().data;
    let models = fit_models(&d, &common::sim_specs()).unwrap();
    let grid = MoGridSpec { form: BcForm::DoublyRobust, reference: 0, harmed: harmed(), rho: GridAxis { lo: 0.0, hi: 0.12, steps: 4 } };
    let e = EstimandSpec::new(3, 3, 1, 2).unwrap();
    let rows = mo_grid(&d, &models, &grid, &[e], &EstimationOptions::default()).unwrap();
    let widths: Vec<f64> = rows.iter().map(|r| {
        let c = r.report.as_ref().unwrap_or_else(|| panic!("{:?} {:?}", r.params, r.reason));
        c.ci.1 - c.ci.0
    }).collect();
    assert!(widths.windows(2).all(|w| w[1] > w[0]), "{widths:?}");

    let far = MoGridSpec { rho: GridAxis { lo: 50.0, hi: 50.0, steps: 1 }, ..grid };
    let rows = mo_grid(&d, &models, &far, &[e], &EstimationOptions::default()).unwrap();
    assert!(!rows[0].feasible && rows[0].report.is_none());
    assert!(rows[0].reason.as_deref().unwrap().contains("negative"));
}

#[test]
fn monotone_correction_recovers_constant_outcome() {
    let draw = generate_mo(100_000, 55, 0.2).unwrap().data;
    let n = draw.n();
    let y = (0..n).map(|i| draw.s(i).then_some(4.5)).collect();
    let d = TrialData::new(3, draw.treatments().to_vec(), (0..n).map(|i| draw.s(i)).collect(), y, draw.x().clone(), draw.pi().map(<[f64]>::to_vec))
        .unwrap();
    let models = fit_models(&d, &common::sim_specs()).unwrap();
    let spec = Arc::new(MoSensitivitySpec::equal(3, 0, &harmed(), 0.2).unwrap());
    let targets: Vec<Target> = [(1, 3), (2, 2), (2, 3), (3, 1), (3, 2), (3, 3)].iter().map(|&(g, z)| Target::monotone(3, g, z)).collect();
    for form in [BcForm::Weighting, BcForm::Regression, BcForm::DoublyRobust] {
        let method = Method::BcMo { form, spec: spec.clone() };
        let est = estimate_means(&d, &models, &method, &targets, &EstimationOptions::default()).unwrap();
        for r in &est.means {
            // The weighting form normalizes by noisy inverse-probability marginals.
            let tol = if form == BcForm::Weighting { 4.0 * r.se } else { 0.01 };
            assert!((r.point - 4.5).abs() < tol, "{}: {} (se {})", method.tag(), r.point, r.se);
        }
    }
}
