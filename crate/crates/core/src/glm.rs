//! Maximum-likelihood fits of the working models: survival logistic, outcome linear and
//! treatment multinomial. Each fit carries its per-unit score contributions so the
//! variance stacker can reuse them.

use nalgebra::{DMatrix, DVector};

use crate::data::DesignSpec;
use crate::error::{invalid, Error, Result};

const MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;

/// Which likelihood produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitKind {
    Logistic,
    Linear,
    /// Baseline-category logit; the last category is the reference.
    Multinomial { categories: usize },
}

#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub kind: FitKind,
    pub coef: DVector<f64>,
    /// n x q score rows; zero for units outside the fitting subset.
    pub score: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub design: Option<DesignSpec>,
}

impl NuisanceFit {
    pub fn with_design(mut self, spec: DesignSpec) -> Self {
        self.design = Some(spec);
        self
    }

    /// Mean score over all units; zero at the solution.
    pub fn mean_score(&self) -> DVector<f64> {
        let n = self.score.nrows() as f64;
        self.score.row_sum().transpose() / n
    }
}

pub fn expit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn check_inputs(x: &DMatrix<f64>, len: usize, mask: &[bool]) -> Result<Vec<usize>> {
    if len != x.nrows() || mask.len() != x.nrows() {
        return invalid("design, response and subset lengths differ");
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return invalid("fitting subset is empty");
    }
    Ok(rows)
}

fn rel_change(step: &DVector<f64>, coef: &DVector<f64>) -> f64 {
    step.amax() / coef.amax().max(1.0)
}

fn newton_step(hess: DMatrix<f64>, grad: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    match hess.clone().cholesky() {
        Some(ch) => Ok(ch.solve(grad)),
        None => hess.lu().solve(grad).ok_or_else(|| Error::Singular {
            context: context.to_string(),
            detail: "Hessian is not invertible".into(),
        }),
    }
}

/// Linear predictor `x * coef` for every row.
pub fn linear_predictor(x: &DMatrix<f64>, coef: &DVector<f64>) -> DVector<f64> {
    x * coef
}

fn logistic_loglik(x: &DMatrix<f64>, y: &[f64], rows: &[usize], coef: &DVector<f64>) -> f64 {
    rows.iter()
        .map(|&i| {
            let eta = x.row(i).dot(&coef.transpose());
            y[i] * eta - softplus(eta)
        })
        .sum()
}

/// Score rows x_i (y_i - expit(x_i'coef)) on the subset, zero elsewhere.
pub fn logistic_scores(x: &DMatrix<f64>, y: &[f64], mask: &[bool], coef: &DVector<f64>) -> DMatrix<f64> {
    let eta = x * coef;
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        if mask[i] {
            let r = y[i] - expit(eta[i]);
            for c in 0..x.ncols() {
                out[(i, c)] = x[(i, c)] * r;
            }
        }
    }
    out
}

/// Bernoulli maximum likelihood by Newton iterations with step-halving.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64], mask: &[bool]) -> Result<NuisanceFit> {
    let rows = check_inputs(x, y.len(), mask)?;
    if rows.iter().any(|&i| y[i] != 0.0 && y[i] != 1.0) {
        return invalid("logistic response must be 0/1");
    }
    let q = x.ncols();
    let m = rows.len() as f64;
    let mut coef = DVector::zeros(q);
    let mut ll = logistic_loglik(x, y, &rows, &coef);
    let mut last_change = f64::INFINITY;
    for it in 0..=MAX_ITER {
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        let mut max_resid: f64 = 0.0;
        for &i in &rows {
            let xi = x.row(i);
            let p = expit(xi.dot(&coef.transpose()));
            let r = y[i] - p;
            max_resid = max_resid.max(r.abs());
            let w = p * (1.0 - p);
            for a in 0..q {
                grad[a] += xi[a] * r;
                for b in 0..=a {
                    hess[(a, b)] += w * xi[a] * xi[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        if grad.amax() / m < SCORE_TOL && last_change < STEP_TOL {
            let score = logistic_scores(x, y, mask, &coef);
            return Ok(NuisanceFit {
                kind: FitKind::Logistic,
                coef,
                score,
                converged: true,
                iterations: it,
                design: None,
            });
        }
        if it == MAX_ITER {
            break;
        }
        if max_resid < 1e-8 {
            // Fitted probabilities reproduce the response: the data are separated.
            break;
        }
        let step = newton_step(hess, &grad, "logistic Newton step")?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &coef + &step * t;
            let ll_new = logistic_loglik(x, y, &rows, &cand);
            if ll_new.is_finite() && ll_new >= ll - 1e-12 * ll.abs().max(1.0) {
                last_change = rel_change(&(&step * t), &coef);
                coef = cand;
                ll = ll_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            last_change = 0.0;
        }
    }
    Err(Error::NonConvergence { model: "logistic regression".into(), iterations: MAX_ITER })
}

/// Score rows x_i (y_i - x_i'coef) on the subset, zero elsewhere.
pub fn linear_scores(x: &DMatrix<f64>, y: &[f64], mask: &[bool], coef: &DVector<f64>) -> DMatrix<f64> {
    let fitted = x * coef;
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        if mask[i] {
            let r = y[i] - fitted[i];
            for c in 0..x.ncols() {
                out[(i, c)] = x[(i, c)] * r;
            }
        }
    }
    out
}

/// Least squares on the subset via Householder QR. Rank deficiency is an error.
pub fn fit_linear(x: &DMatrix<f64>, y: &[f64], mask: &[bool]) -> Result<NuisanceFit> {
    let rows = check_inputs(x, y.len(), mask)?;
    let q = x.ncols();
    if rows.len() < q {
        return Err(Error::Singular {
            context: "linear regression".into(),
            detail: format!("{} rows for {q} regressors", rows.len()),
        });
    }
    let xs = DMatrix::from_fn(rows.len(), q, |r, c| x[(rows[r], c)]);
    let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
    let qr = xs.qr();
    let r = qr.r();
    let scale = (0..q).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if let Some(j) = (0..q).find(|&j| r[(j, j)].abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular {
            context: "linear regression".into(),
            detail: format!("design is rank deficient at column {j}"),
        });
    }
    let qty = qr.q().transpose() * ys;
    let coef = r.solve_upper_triangular(&qty).ok_or_else(|| Error::Singular {
        context: "linear regression".into(),
        detail: "triangular solve failed".into(),
    })?;
    let score = linear_scores(x, y, mask, &coef);
    Ok(NuisanceFit { kind: FitKind::Linear, coef, score, converged: true, iterations: 1, design: None })
}

/// Row-wise category probabilities (n x J) under a baseline-category logit.
pub fn multinomial_probabilities(x: &DMatrix<f64>, coef: &DVector<f64>, categories: usize) -> DMatrix<f64> {
    let q = x.ncols();
    let mut out = DMatrix::zeros(x.nrows(), categories);
    let mut eta = vec![0.0; categories];
    for i in 0..x.nrows() {
        let xi = x.row(i);
        for k in 0..categories - 1 {
            eta[k] = (0..q).map(|c| xi[c] * coef[k * q + c]).sum();
        }
        eta[categories - 1] = 0.0;
        let mx = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = eta.iter().map(|e| (e - mx).exp()).sum();
        for k in 0..categories {
            out[(i, k)] = (eta[k] - mx).exp() / total;
        }
    }
    out
}

/// Score rows x_i (1(Z_i=k) - pi_k(x_i)) for k = 1..J-1, stacked category-major.
pub fn multinomial_scores(x: &DMatrix<f64>, arm: &[usize], categories: usize, coef: &DVector<f64>) -> DMatrix<f64> {
    let q = x.ncols();
    let probs = multinomial_probabilities(x, coef, categories);
    let mut out = DMatrix::zeros(x.nrows(), q * (categories - 1));
    for i in 0..x.nrows() {
        for k in 0..categories - 1 {
            let r = f64::from(u8::from(arm[i] == k + 1)) - probs[(i, k)];
            for c in 0..q {
                out[(i, k * q + c)] = x[(i, c)] * r;
            }
        }
    }
    out
}

fn multinomial_loglik(x: &DMatrix<f64>, arm: &[usize], categories: usize, coef: &DVector<f64>) -> f64 {
    let probs = multinomial_probabilities(x, coef, categories);
    (0..x.nrows()).map(|i| probs[(i, arm[i] - 1)].ln()).sum()
}

/// Baseline-category multinomial logit with arm `categories` as reference.
pub fn fit_multinomial(x: &DMatrix<f64>, arm: &[usize], categories: usize) -> Result<NuisanceFit> {
    if arm.len() != x.nrows() {
        return invalid("design and treatment lengths differ");
    }
    if categories < 2 {
        return invalid("multinomial model needs at least two categories");
    }
    for k in 1..=categories {
        if !arm.contains(&k) {
            return invalid(format!("arm {k} is empty"));
        }
    }
    if arm.iter().any(|&a| a < 1 || a > categories) {
        return invalid("treatment label outside 1..J");
    }
    let q = x.ncols();
    let dim = q * (categories - 1);
    let n = x.nrows() as f64;
    let mut coef = DVector::zeros(dim);
    let mut ll = multinomial_loglik(x, arm, categories, &coef);
    let mut last_change = f64::INFINITY;
    for it in 0..=MAX_ITER {
        let probs = multinomial_probabilities(x, &coef, categories);
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for i in 0..x.nrows() {
            let xi = x.row(i);
            for k in 0..categories - 1 {
                let r = f64::from(u8::from(arm[i] == k + 1)) - probs[(i, k)];
                for c in 0..q {
                    grad[k * q + c] += xi[c] * r;
                }
                for l in 0..categories - 1 {
                    let w = probs[(i, k)] * (f64::from(u8::from(k == l)) - probs[(i, l)]);
                    for a in 0..q {
                        for b in 0..q {
                            hess[(k * q + a, l * q + b)] += w * xi[a] * xi[b];
                        }
                    }
                }
            }
        }
        if grad.amax() / n < SCORE_TOL && last_change < STEP_TOL {
            let score = multinomial_scores(x, arm, categories, &coef);
            return Ok(NuisanceFit {
                kind: FitKind::Multinomial { categories },
                coef,
                score,
                converged: true,
                iterations: it,
                design: None,
            });
        }
        if it == MAX_ITER {
            break;
        }
        let step = newton_step(hess, &grad, "multinomial Newton step")?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &coef + &step * t;
            let ll_new = multinomial_loglik(x, arm, categories, &cand);
            if ll_new.is_finite() && ll_new >= ll - 1e-12 * ll.abs().max(1.0) {
                last_change = rel_change(&(&step * t), &coef);
                coef = cand;
                ll = ll_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            last_change = 0.0;
        }
    }
    Err(Error::NonConvergence { model: "multinomial logit".into(), iterations: MAX_ITER })
}
