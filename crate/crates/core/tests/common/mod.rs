#![allow(dead_code)]

use nalgebra::DMatrix;
use sace_core::data::{DesignSpec, TrialData};
use sace_core::estimators::{ModelSpecs, OutcomeMode};

/// Counts for a single binary covariate: `units[cell][arm - 1]` assigned, the first
/// `survivors[cell][arm - 1]` of them survive.
pub struct Cells {
    pub units: [[usize; 3]; 2],
    pub survivors: [[usize; 3]; 2],
}

/// Every cell has the same number of units in each arm.
pub const BALANCED: Cells = Cells { units: [[10, 10, 10], [12, 12, 12]], survivors: [[3, 5, 8], [4, 7, 10]] };

/// Assignment depends on the covariate.
pub const UNBALANCED: Cells = Cells { units: [[8, 10, 14], [15, 12, 9]], survivors: [[2, 4, 9], [4, 6, 7]] };

fn outcome(cell: usize, arm: usize, j: usize) -> f64 {
    1.0 + 0.5 * arm as f64 + 1.3 * cell as f64 + 0.37 * j as f64 - 0.05 * (j * j) as f64
}

impl Cells {
    pub fn n(&self) -> usize {
        self.units.iter().flatten().sum()
    }

    pub fn build(&self, pi: Option<Vec<f64>>, constant: Option<f64>) -> TrialData {
        let (mut z, mut s, mut y, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for cell in 0..2 {
            for arm in 1..=3 {
                for j in 0..self.units[cell][arm - 1] {
                    let alive = j < self.survivors[cell][arm - 1];
                    z.push(arm);
                    s.push(alive);
                    y.push(alive.then(|| constant.unwrap_or_else(|| outcome(cell, arm, j))));
                    x.push(cell as f64);
                }
            }
        }
        let n = z.len();
        TrialData::new(3, z, s, y, DMatrix::from_vec(n, 1, x), pi).unwrap()
    }

    /// Stratified plug-in `sum_x P(x) e_g(x) ybar_zx / sum_x P(x) e_g(x)`.
    pub fn oracle(&self, g: usize, z: usize) -> f64 {
        let n = self.n() as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for cell in 0..2 {
            let share = self.units[cell].iter().sum::<usize>() as f64 / n;
            let p = |k: usize| {
                if k == 0 {
                    0.0
                } else {
                    self.survivors[cell][k - 1] as f64 / self.units[cell][k - 1] as f64
                }
            };
            let e = p(3 - g + 1) - p(3 - g);
            let k = self.survivors[cell][z - 1];
            let ybar = (0..k).map(|j| outcome(cell, z, j)).sum::<f64>() / k as f64;
            num += share * e * ybar;
            den += share * e;
        }
        num / den
    }
}

pub fn saturated() -> TrialData {
    BALANCED.build(Some(vec![1.0 / 3.0; 3]), None)
}

pub fn saturated_oracle(g: usize, z: usize) -> f64 {
    BALANCED.oracle(g, z)
}

pub fn saturated_specs() -> ModelSpecs {
    ModelSpecs {
        survival: DesignSpec::linear(1),
        outcome: DesignSpec::linear(1).with_interactions(),
        outcome_mode: OutcomeMode::Pooled,
        propensity: Some(DesignSpec::linear(1)),
    }
}

/// Correct working models for the simulated scenarios.
pub fn sim_specs() -> ModelSpecs {
    ModelSpecs {
        survival: DesignSpec::linear(4),
        outcome: DesignSpec::linear(4).with_interactions(),
        outcome_mode: OutcomeMode::Pooled,
        propensity: None,
    }
}
