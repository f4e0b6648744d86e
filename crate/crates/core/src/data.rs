//! Trial records, CSV ingestion and regressor-matrix assembly.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const PI_SUM_TOL: f64 = 1e-12;

/// Observed trial records. Immutable once constructed.
#[derive(Debug, Clone)]
pub struct TrialData {
    arms: usize,
    /// Treatment labels in `1..=arms`.
    z: Vec<usize>,
    s: Vec<bool>,
    /// Outcome, present exactly for survivors.
    y: Vec<Option<f64>>,
    /// n x p covariates.
    x: DMatrix<f64>,
    /// Known assignment probabilities (randomized design).
    pi: Option<Vec<f64>>,
    covariate_names: Vec<String>,
}

impl TrialData {
    pub fn new(
        arms: usize,
        z: Vec<usize>,
        s: Vec<bool>,
        y: Vec<Option<f64>>,
        x: DMatrix<f64>,
        pi: Option<Vec<f64>>,
    ) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("X{j}")).collect();
        Self::with_names(arms, z, s, y, x, pi, names)
    }

    pub fn with_names(
        arms: usize,
        z: Vec<usize>,
        s: Vec<bool>,
        y: Vec<Option<f64>>,
        x: DMatrix<f64>,
        pi: Option<Vec<f64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = z.len();
        if arms < 2 {
            return invalid(format!("need at least 2 arms, got {arms}"));
        }
        if n == 0 {
            return invalid("dataset has no units");
        }
        if s.len() != n || y.len() != n || x.nrows() != n {
            return invalid("treatment, survival, outcome and covariate lengths differ");
        }
        if covariate_names.len() != x.ncols() {
            return invalid("covariate name count does not match covariate columns");
        }
        let mut counts = vec![0usize; arms];
        for (i, &zi) in z.iter().enumerate() {
            if zi < 1 || zi > arms {
                return invalid(format!("unit {i}: treatment {zi} outside 1..{arms}"));
            }
            counts[zi - 1] += 1;
            match (s[i], y[i]) {
                (true, None) => return invalid(format!("unit {i}: outcome missing for survivor")),
                (true, Some(v)) if !v.is_finite() => {
                    return invalid(format!("unit {i}: non-finite outcome for survivor"))
                }
                (false, Some(_)) => {
                    return invalid(format!("unit {i}: outcome recorded for non-survivor"))
                }
                _ => {}
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return invalid(format!("arm {} has no units", k + 1));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite covariate value");
        }
        if let Some(p) = &pi {
            validate_pi(p, arms)?;
        }
        Ok(Self { arms, z, s, y, x, pi, covariate_names })
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn z(&self, i: usize) -> usize {
        self.z[i]
    }

    pub fn treatments(&self) -> &[usize] {
        &self.z
    }

    pub fn s(&self, i: usize) -> bool {
        self.s[i]
    }

    pub fn y(&self, i: usize) -> Option<f64> {
        self.y[i]
    }

    /// Y*S with the product taken as zero for non-survivors.
    pub fn ys(&self, i: usize) -> f64 {
        self.y[i].unwrap_or(0.0)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn pi(&self) -> Option<&[f64]> {
        self.pi.as_deref()
    }

    pub fn survival_indicator(&self) -> Vec<f64> {
        self.s.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect()
    }

    pub fn survivors_in_arm(&self, arm: usize) -> usize {
        (0..self.n()).filter(|&i| self.z[i] == arm && self.s[i]).count()
    }

    /// Known-probability matrix (n x J) for randomized designs.
    pub fn known_assignment(&self) -> Option<DMatrix<f64>> {
        self.pi.as_ref().map(|p| DMatrix::from_fn(self.n(), self.arms, |_, k| p[k]))
    }

    /// Copy with a different known assignment vector (or none).
    pub fn with_pi(&self, pi: Option<Vec<f64>>) -> Result<Self> {
        if let Some(p) = &pi {
            validate_pi(p, self.arms)?;
        }
        Ok(Self { pi, ..self.clone() })
    }

    /// Dataset made of the listed rows, in order (rows may repeat).
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let x = DMatrix::from_fn(rows.len(), self.x.ncols(), |r, c| self.x[(rows[r], c)]);
        Self::with_names(
            self.arms,
            rows.iter().map(|&i| self.z[i]).collect(),
            rows.iter().map(|&i| self.s[i]).collect(),
            rows.iter().map(|&i| self.y[i]).collect(),
            x,
            self.pi.clone(),
            self.covariate_names.clone(),
        )
    }
}

fn validate_pi(p: &[f64], arms: usize) -> Result<()> {
    if p.len() != arms {
        return invalid(format!("pi has {} entries for {arms} arms", p.len()));
    }
    if p.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return invalid("each assignment probability must lie in (0,1)");
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PI_SUM_TOL {
        return invalid(format!("assignment probabilities sum to {total}, not 1"));
    }
    Ok(())
}

/// Column-name mapping for CSV input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub z: String,
    pub s: String,
    pub y: String,
    pub x: Vec<String>,
}

/// Reads a comma-separated file. `arms`, when given, must equal the largest treatment label.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    arms: Option<usize>,
    pi: Option<Vec<f64>>,
) -> Result<TrialData> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let header: HashMap<String, usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .map(|(k, h)| (h.trim().to_string(), k))
        .collect();
    let col = |name: &str| -> Result<usize> {
        header
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing column '{name}'")))
    };
    let zc = col(&schema.z)?;
    let sc = col(&schema.s)?;
    let yc = col(&schema.y)?;
    let xc: Vec<usize> = schema.x.iter().map(|c| col(c)).collect::<Result<_>>()?;

    let (mut z, mut s, mut y, mut xs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let zi: usize = field(zc)
            .parse()
            .map_err(|_| Error::Validation(format!("line {line}: treatment '{}' is not a label", field(zc))))?;
        let si = match field(sc) {
            "1" | "1.0" => true,
            "0" | "0.0" => false,
            other => return invalid(format!("line {line}: survival '{other}' outside {{0,1}}")),
        };
        let raw_y = field(yc);
        let yi = if raw_y.is_empty() || raw_y.eq_ignore_ascii_case("nan") || raw_y.eq_ignore_ascii_case("na") {
            None
        } else {
            Some(raw_y.parse::<f64>().map_err(|_| {
                Error::Validation(format!("line {line}: outcome '{raw_y}' is not numeric"))
            })?)
        };
        let yi = match (si, yi) {
            (true, None) => return invalid(format!("line {line}: outcome missing for survivor")),
            (false, _) => None,
            (true, v) => v,
        };
        for (&k, name) in xc.iter().zip(&schema.x) {
            let v: f64 = field(k).parse().map_err(|_| {
                Error::Validation(format!("line {line}: covariate {name} value '{}' is not numeric", field(k)))
            })?;
            xs.push(v);
        }
        z.push(zi);
        s.push(si);
        y.push(yi);
    }
    if z.is_empty() {
        return invalid("file has no data rows");
    }
    let inferred = *z.iter().max().unwrap_or(&0);
    let arms = match arms {
        Some(j) if j != inferred => {
            return invalid(format!("largest treatment label {inferred} does not match configured arm count {j}"))
        }
        Some(j) => j,
        None => inferred,
    };
    let x = DMatrix::from_row_slice(z.len(), schema.x.len(), &xs);
    TrialData::with_names(arms, z, s, y, x, pi, schema.x.clone())
}

/// Writes records using the schema's column names; absent outcomes become empty cells.
pub fn write_csv(data: &TrialData, path: impl AsRef<Path>, schema: &CsvSchema) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut head = vec![schema.z.clone(), schema.s.clone(), schema.y.clone()];
    head.extend(schema.x.iter().cloned());
    w.write_record(&head)?;
    for i in 0..data.n() {
        let mut rec = vec![
            data.z(i).to_string(),
            if data.s(i) { "1" } else { "0" }.to_string(),
            data.y(i).map(|v| v.to_string()).unwrap_or_default(),
        ];
        rec.extend((0..data.x().ncols()).map(|j| data.x()[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column covariate transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    Cosine,
}

impl Transform {
    fn apply(self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Cosine => v.cos(),
        }
    }
}

/// A covariate column (zero-based) with its transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Regressor {
    pub column: usize,
    pub transform: Transform,
}

/// Recipe for a regressor matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignSpec {
    pub intercept: bool,
    pub columns: Vec<Regressor>,
    /// Adds arm dummies for arms 1..J-1 and their products with the covariate columns.
    pub treatment_interactions: bool,
}

impl DesignSpec {
    /// Intercept plus the first `p` covariates untransformed.
    pub fn linear(p: usize) -> Self {
        Self {
            intercept: true,
            columns: (0..p).map(|column| Regressor { column, transform: Transform::Identity }).collect(),
            treatment_interactions: false,
        }
    }

    /// Intercept plus cos of the first covariate.
    pub fn cosine_first() -> Self {
        Self {
            intercept: true,
            columns: vec![Regressor { column: 0, transform: Transform::Cosine }],
            treatment_interactions: false,
        }
    }

    pub fn intercept_only() -> Self {
        Self { intercept: true, columns: Vec::new(), treatment_interactions: false }
    }

    pub fn with_interactions(mut self) -> Self {
        self.treatment_interactions = true;
        self
    }

    pub fn width(&self, arms: usize) -> usize {
        let c = self.columns.len();
        let base = usize::from(self.intercept) + c;
        if self.treatment_interactions {
            base + (arms - 1) * (1 + c)
        } else {
            base
        }
    }

    pub fn validate(&self, data: &TrialData) -> Result<()> {
        if let Some(r) = self.columns.iter().find(|r| r.column >= data.x().ncols()) {
            return invalid(format!("design column {} does not exist", r.column));
        }
        if self.width(data.arms()) == 0 {
            return invalid("design has no regressors");
        }
        Ok(())
    }

    /// Writes the row for unit `i` as if assigned to `arm` into `out`.
    pub fn fill_row(&self, data: &TrialData, i: usize, arm: usize, out: &mut [f64]) {
        let mut k = 0;
        if self.intercept {
            out[k] = 1.0;
            k += 1;
        }
        let arms = data.arms();
        if self.treatment_interactions {
            for a in 1..arms {
                out[k] = if arm == a { 1.0 } else { 0.0 };
                k += 1;
            }
        }
        let x = data.x();
        for r in &self.columns {
            out[k] = r.transform.apply(x[(i, r.column)]);
            k += 1;
        }
        if self.treatment_interactions {
            for a in 1..arms {
                for r in &self.columns {
                    out[k] = if arm == a { r.transform.apply(x[(i, r.column)]) } else { 0.0 };
                    k += 1;
                }
            }
        }
    }

    /// All-unit matrix with each unit evaluated under `arm` (or its own arm when `None`).
    pub fn matrix(&self, data: &TrialData, arm: Option<usize>) -> DMatrix<f64> {
        let q = self.width(data.arms());
        let mut m = DMatrix::zeros(data.n(), q);
        let mut row = vec![0.0; q];
        for i in 0..data.n() {
            self.fill_row(data, i, arm.unwrap_or(data.z(i)), &mut row);
            for (c, v) in row.iter().enumerate() {
                m[(i, c)] = *v;
            }
        }
        m
    }
}

/// Assembled regressors together with the unit rows they came from.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub rows: Vec<usize>,
    /// Columns that are identically zero on the subset (reported, not fatal).
    pub zero_columns: Vec<usize>,
}

/// Regressor matrix restricted to units passing `subset`, each at its observed arm.
pub fn build_design(
    data: &TrialData,
    spec: &DesignSpec,
    subset: impl Fn(usize) -> bool,
) -> Result<DesignMatrix> {
    spec.validate(data)?;
    let rows: Vec<usize> = (0..data.n()).filter(|&i| subset(i)).collect();
    if rows.is_empty() {
        return invalid("design subset is empty");
    }
    let q = spec.width(data.arms());
    let mut matrix = DMatrix::zeros(rows.len(), q);
    let mut buf = vec![0.0; q];
    for (r, &i) in rows.iter().enumerate() {
        spec.fill_row(data, i, data.z(i), &mut buf);
        for (c, v) in buf.iter().enumerate() {
            matrix[(r, c)] = *v;
        }
    }
    let zero_columns = (0..q).filter(|&c| matrix.column(c).iter().all(|v| *v == 0.0)).collect();
    Ok(DesignMatrix { matrix, rows, zero_columns })
}
