use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use sace_core::data::{CsvSchema, DesignSpec, Regressor, TrialData, Transform};
use sace_core::estimators::{BcForm, Method, ModelSpecs, OutcomeMode};
use sace_core::sensitivity::GridAxis;
use sace_core::simulation::{McMethod, ScenarioKind};
use sace_core::strata::{valid_estimands, EstimandSpec, MarginalSource, StratumId};
use sace_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Estimate,
    Simulate,
    Sensitivity,
    Diagnose,
}

/// A complete run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<Command>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub design: Design,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub estimands: Estimands,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default)]
    pub or_marginals: Option<MarginalSource>,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub sensitivity: Option<SensitivityConfig>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_methods() -> Vec<String> {
    vec!["DR".into()]
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub columns: CsvSchema,
    #[serde(default)]
    pub arms: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Design {
    Randomized {
        /// Assignment probabilities; uniform when omitted.
        #[serde(default)]
        pi: Option<Vec<f64>>,
    },
    #[default]
    Observational,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariate {
    Name(String),
    Transformed { name: String, transform: Transform },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    #[serde(default = "yes")]
    pub intercept: bool,
    /// Covariate columns; every loaded covariate when omitted.
    #[serde(default)]
    pub covariates: Option<Vec<Covariate>>,
    #[serde(default)]
    pub treatment_interactions: bool,
}

fn yes() -> bool {
    true
}

impl DesignConfig {
    fn plain() -> Self {
        Self { intercept: true, covariates: None, treatment_interactions: false }
    }

    fn resolve(&self, data: &TrialData) -> Result<DesignSpec> {
        let columns = match &self.covariates {
            None => (0..data.x().ncols()).map(|column| Regressor { column, transform: Transform::Identity }).collect(),
            Some(list) => list
                .iter()
                .map(|c| {
                    let (name, transform) = match c {
                        Covariate::Name(n) => (n, Transform::Identity),
                        Covariate::Transformed { name, transform } => (name, *transform),
                    };
                    data.covariate_index(name)
                        .map(|column| Regressor { column, transform })
                        .ok_or_else(|| Error::Validation(format!("unknown covariate '{name}' in model design")))
                })
                .collect::<Result<_>>()?,
        };
        Ok(DesignSpec { intercept: self.intercept, columns, treatment_interactions: self.treatment_interactions })
    }

    pub fn describe(&self) -> String {
        let mut terms = Vec::new();
        if self.intercept {
            terms.push("1".to_string());
        }
        match &self.covariates {
            None => terms.push("all".into()),
            Some(list) => terms.extend(list.iter().map(|c| match c {
                Covariate::Name(n) => n.clone(),
                Covariate::Transformed { name, transform: Transform::Cosine } => format!("cos({name})"),
                Covariate::Transformed { name, .. } => name.clone(),
            })),
        }
        let mut s = terms.join("+");
        if self.treatment_interactions {
            s.push_str("|arm");
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    #[serde(default = "DesignConfig::plain")]
    pub survival: DesignConfig,
    #[serde(default = "interacted")]
    pub outcome: DesignConfig,
    #[serde(default)]
    pub outcome_mode: OutcomeMode,
    #[serde(default)]
    pub propensity: Option<DesignConfig>,
}

fn interacted() -> DesignConfig {
    DesignConfig { treatment_interactions: true, ..DesignConfig::plain() }
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self { survival: DesignConfig::plain(), outcome: interacted(), outcome_mode: OutcomeMode::Pooled, propensity: None }
    }
}

impl ModelsConfig {
    /// Observational designs get a main-effects propensity model unless one is given.
    pub fn resolve(&self, data: &TrialData, design: &Design) -> Result<ModelSpecs> {
        let propensity = match (&self.propensity, design) {
            (Some(p), _) => Some(p.resolve(data)?),
            (None, Design::Observational) => Some(DesignConfig::plain().resolve(data)?),
            (None, Design::Randomized { .. }) => None,
        };
        Ok(ModelSpecs {
            survival: self.survival.resolve(data)?,
            outcome: self.outcome.resolve(data)?,
            outcome_mode: self.outcome_mode,
            propensity,
        })
    }

    pub fn describe(&self, design: &Design) -> String {
        let mut s = format!("survival={};outcome={}", self.survival.describe(), self.outcome.describe());
        match (&self.propensity, design) {
            (Some(p), _) => s.push_str(&format!(";propensity={}", p.describe())),
            (None, Design::Observational) => s.push_str(&format!(";propensity={}", DesignConfig::plain().describe())),
            (None, Design::Randomized { .. }) => {}
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimandEntry {
    pub g: usize,
    pub z: usize,
    pub zprime: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Estimands {
    All(AllTag),
    List(Vec<EstimandEntry>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllTag {
    All,
}

impl Default for Estimands {
    fn default() -> Self {
        Estimands::All(AllTag::All)
    }
}

impl Estimands {
    pub fn resolve(&self, arms: usize) -> Result<Vec<EstimandSpec>> {
        match self {
            Estimands::All(_) => Ok(valid_estimands(arms)),
            Estimands::List(list) => {
                if list.is_empty() {
                    return Err(Error::Validation("estimand list is empty".into()));
                }
                list.iter()
                    .map(|e| {
                        let spec = EstimandSpec::new(arms, e.g, e.z, e.zprime)?;
                        spec.validate()?;
                        Ok(spec)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormTag {
    Psw,
    Or,
    Dr,
}

impl From<FormTag> for BcForm {
    fn from(f: FormTag) -> Self {
        match f {
            FormTag::Psw => BcForm::Weighting,
            FormTag::Or => BcForm::Regression,
            FormTag::Dr => BcForm::DoublyRobust,
        }
    }
}

fn dr() -> FormTag {
    FormTag::Dr
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    #[serde(default)]
    pub pi: Option<PiGridConfig>,
    #[serde(default)]
    pub mo: Option<MoGridConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedDelta {
    pub stratum: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaAxis {
    pub stratum: usize,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

/// Treatment-invariant `delta_g` relative to the top stratum.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiGridConfig {
    #[serde(default = "dr")]
    pub form: FormTag,
    #[serde(default)]
    pub fixed: Vec<FixedDelta>,
    #[serde(default)]
    pub vary: Vec<DeltaAxis>,
}

/// Common `rho` for the listed harmed strata.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoGridConfig {
    #[serde(default = "dr")]
    pub form: FormTag,
    #[serde(default)]
    pub reference: usize,
    pub harmed: Vec<String>,
    pub rho: GridAxis,
}

impl MoGridConfig {
    pub fn harmed(&self) -> Result<Vec<StratumId>> {
        self.harmed.iter().map(|s| s.parse()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenario: ScenarioKind,
    pub n: usize,
    pub reps: usize,
    #[serde(default = "yes")]
    pub ps_correct: bool,
    #[serde(default = "yes")]
    pub om_correct: bool,
    /// Method tags, plus `BC-PI[-PSW|-OR]`, `BC-PI[-PSW|-OR](mean-delta)` and `BC-MO[-PSW|-OR]`.
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default)]
    pub oracle_seed: Option<u64>,
    #[serde(default)]
    pub truth_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("sace-out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir(), formats: default_formats() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Validation(format!("ci_level {} outside (0, 1)", self.ci_level)));
        }
        if self.methods.is_empty() {
            return Err(Error::Validation("no methods requested".into()));
        }
        if self.output.formats.is_empty() {
            return Err(Error::Validation("no output formats requested".into()));
        }
        if let Some(s) = &self.sensitivity {
            if let Some(m) = &s.mo {
                m.harmed()?;
            }
        }
        Ok(())
    }

    /// Known assignment probabilities for randomized designs.
    pub fn pi(&self, arms: usize) -> Option<Vec<f64>> {
        match &self.design {
            Design::Randomized { pi: Some(p) } => Some(p.clone()),
            Design::Randomized { pi: None } => Some(vec![1.0 / arms as f64; arms]),
            Design::Observational => None,
        }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

/// Parses a basic method tag.
pub fn method(tag: &str) -> Result<Method> {
    Method::parse_basic(tag)
}

/// Parses a simulation method tag.
pub fn mc_method(tag: &str) -> Result<McMethod> {
    let upper = tag.trim().to_ascii_uppercase();
    let (base, mean) = match upper.strip_suffix("(MEAN-DELTA)") {
        Some(b) => (b.to_string(), true),
        None => (upper.clone(), false),
    };
    let form = |rest: &str| -> Option<BcForm> {
        match rest {
            "" => Some(BcForm::DoublyRobust),
            "-PSW" => Some(BcForm::Weighting),
            "-OR" => Some(BcForm::Regression),
            _ => None,
        }
    };
    if let Some(rest) = base.strip_prefix("BC-PI") {
        if let Some(f) = form(rest) {
            return Ok(if mean { McMethod::BcPiMean(f) } else { McMethod::BcPiTrue(f) });
        }
    } else if let Some(rest) = base.strip_prefix("BC-MO") {
        if let (Some(f), false) = (form(rest), mean) {
            return Ok(McMethod::BcMoTrue(f));
        }
    } else if !mean {
        return Method::parse_basic(&base).map(McMethod::Standard);
    }
    Err(Error::Validation(format!("unknown method '{tag}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_defaults() {
        let cfg = RunConfig::parse(r#"{"data": {"path": "d.csv", "columns": {"z": "Z", "s": "S", "y": "Y", "x": ["X1"]}}}"#).unwrap();
        assert_eq!(cfg.design, Design::Observational);
        assert_eq!(cfg.methods, vec!["DR"]);
        assert!(matches!(cfg.estimands, Estimands::All(_)));
        assert_eq!(cfg.ci_level, 0.95);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse(r#"{"methodz": ["DR"]}"#).unwrap_err();
        assert!(err.to_string().contains("methodz"), "{err}");
        assert!(RunConfig::parse(r#"{"design": {"type": "randomized", "p": [0.5, 0.5]}}"#).is_err());
    }

    #[test]
    fn estimand_list_checked() {
        let cfg = RunConfig::parse(r#"{"estimands": [{"g": 1, "z": 1, "zprime": 3}]}"#).unwrap();
        assert!(cfg.estimands.resolve(3).is_err());
        let cfg = RunConfig::parse(r#"{"estimands": "all"}"#).unwrap();
        assert_eq!(cfg.estimands.resolve(3).unwrap().len(), 4);
    }

    #[test]
    fn simulation_method_tags() {
        assert!(matches!(mc_method("dr").unwrap(), McMethod::Standard(Method::Dr)));
        assert!(matches!(mc_method("BC-PI(mean-delta)").unwrap(), McMethod::BcPiMean(BcForm::DoublyRobust)));
        assert!(matches!(mc_method("BC-MO-OR").unwrap(), McMethod::BcMoTrue(BcForm::Regression)));
        assert!(mc_method("BC-MO(mean-delta)").is_err());
        assert!(mc_method("XYZ").is_err());
    }

    #[test]
    fn bad_level_rejected() {
        assert!(RunConfig::parse(r#"{"ci_level": 1.5}"#).is_err());
    }
}
