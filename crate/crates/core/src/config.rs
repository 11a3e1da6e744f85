//! Analysis configuration read from TOML.

use serde::{Deserialize, Serialize};

use crate::design::FeatureMap;
use crate::error::{DsmError, Result};
use crate::models::CandidateModels;

/// Target estimand. Quantile estimands carry their probability levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Estimand {
    #[serde(rename = "ATE")]
    Ate,
    #[serde(rename = "QTE")]
    Qte { xi: Vec<f64> },
    #[serde(rename = "ATT")]
    Att,
    #[serde(rename = "QTT")]
    Qtt { xi: Vec<f64> },
}

impl Default for Estimand {
    fn default() -> Self {
        Estimand::Ate
    }
}

impl Estimand {
    pub fn xi(&self) -> &[f64] {
        match self {
            Estimand::Qte { xi } | Estimand::Qtt { xi } => xi,
            _ => &[],
        }
    }

    pub fn is_treated_only(&self) -> bool {
        matches!(self, Estimand::Att | Estimand::Qtt { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Multinomial,
    #[default]
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub weight_scheme: WeightScheme,
    #[serde(default)]
    pub seed: u64,
    /// Re-use the point-estimate sieve coefficients in every replicate
    /// instead of refitting them with the replicate weights.
    #[serde(default)]
    pub freeze_sieve: bool,
    /// Emit per-replicate values in reports.
    #[serde(default)]
    pub diagnostics: bool,
}

fn default_replicates() -> usize {
    1000
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: default_replicates(),
            weight_scheme: WeightScheme::default(),
            seed: 0,
            freeze_sieve: false,
            diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Propensity,
    Prognostic,
}

/// One candidate model entry as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecConfig {
    pub kind: ModelKind,
    /// Prognostic arm; omitted means the model is posited for both arms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<u8>,
    pub feature_map: FeatureMap,
}

/// Estimation method applied to the configured candidate models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Method {
    #[default]
    #[serde(rename = "dsm")]
    Dsm,
    #[serde(rename = "psm")]
    Psm,
    #[serde(rename = "pgm")]
    Pgm,
    #[serde(rename = "m.x", alias = "mx")]
    MatchX,
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "ipw")]
    Ipw,
    #[serde(rename = "aipw")]
    Aipw,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dsm => "dsm",
            Method::Psm => "psm",
            Method::Pgm => "pgm",
            Method::MatchX => "m.x",
            Method::Naive => "naive",
            Method::Ipw => "ipw",
            Method::Aipw => "aipw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub treatment_column: String,
    pub outcome_column: String,
    pub covariate_columns: Vec<String>,
    #[serde(default)]
    pub estimand: Estimand,
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(default = "default_degree")]
    pub sieve_degree: usize,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub models: Vec<ModelSpecConfig>,
    /// Fixed Box-Cox exponent applied to the outcome inside the conditional
    /// distribution model. Unset means no transform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxcox_lambda: Option<f64>,
}

fn default_m() -> usize {
    1
}

fn default_degree() -> usize {
    2
}

impl SchemaConfig {
    pub fn minimal(treatment: &str, outcome: &str, covariates: &[&str]) -> Self {
        SchemaConfig {
            treatment_column: treatment.to_string(),
            outcome_column: outcome.to_string(),
            covariate_columns: covariates.iter().map(|s| s.to_string()).collect(),
            estimand: Estimand::Ate,
            m: default_m(),
            sieve_degree: default_degree(),
            bootstrap: BootstrapConfig::default(),
            method: Method::Dsm,
            models: Vec::new(),
            boxcox_lambda: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SchemaConfig =
            toml::from_str(s).map_err(|e| DsmError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariate_columns.is_empty() {
            return Err(DsmError::Config("covariate_columns is empty".into()));
        }
        if self.m < 1 {
            return Err(DsmError::Config("M must be at least 1".into()));
        }
        if self.bootstrap.replicates < 2 {
            return Err(DsmError::Config(
                "bootstrap.replicates must be at least 2".into(),
            ));
        }
        for &xi in self.estimand.xi() {
            if !(xi > 0.0 && xi < 1.0) {
                return Err(DsmError::Config(format!(
                    "quantile level {xi} is not strictly inside (0, 1)"
                )));
            }
        }
        if matches!(self.estimand, Estimand::Qte { .. } | Estimand::Qtt { .. })
            && self.estimand.xi().is_empty()
        {
            return Err(DsmError::Config("quantile estimand without xi levels".into()));
        }
        if let Some(l) = self.boxcox_lambda {
            if !l.is_finite() {
                return Err(DsmError::Config("boxcox_lambda must be finite".into()));
            }
        }
        self.candidate_lists().map(|_| ())
    }

    /// Resolves `models` into propensity and prognostic lists, checking that
    /// every prognostic model is posited for both arms with one feature map.
    pub fn candidate_lists(&self) -> Result<CandidateModels> {
        let mut out = CandidateModels::default();
        let mut arm0 = Vec::new();
        let mut arm1 = Vec::new();
        for spec in &self.models {
            match (spec.kind, spec.arm) {
                (ModelKind::Propensity, None) => out.propensity.push(spec.feature_map),
                (ModelKind::Propensity, Some(_)) => {
                    return Err(DsmError::Config(
                        "propensity models do not take an arm".into(),
                    ))
                }
                (ModelKind::Prognostic, None) => out.prognostic.push(spec.feature_map),
                (ModelKind::Prognostic, Some(0)) => arm0.push(spec.feature_map),
                (ModelKind::Prognostic, Some(1)) => arm1.push(spec.feature_map),
                (ModelKind::Prognostic, Some(a)) => {
                    return Err(DsmError::Config(format!("invalid prognostic arm {a}")))
                }
            }
        }
        if arm0 != arm1 {
            return Err(DsmError::Config(
                "prognostic models must come in arm-0/arm-1 pairs with the same feature_map"
                    .into(),
            ));
        }
        out.prognostic.extend(arm0);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
treatment_column = "treat"
outcome_column = "re78"
covariate_columns = ["age", "educ", "re75"]
M = 2
sieve_degree = 1

[estimand]
kind = "QTT"
xi = [0.1, 0.3]

[bootstrap]
replicates = 200
weight_scheme = "multinomial"
seed = 7

[[models]]
kind = "propensity"
feature_map = "first-order-plus-squares-of-numeric"

[[models]]
kind = "prognostic"
arm = 0
feature_map = "raw"

[[models]]
kind = "prognostic"
arm = 1
feature_map = "raw"
"#;

    #[test]
    fn parses_full_example() {
        let cfg = SchemaConfig::from_toml_str(EXAMPLE).unwrap();
        assert_eq!(cfg.m, 2);
        assert_eq!(cfg.sieve_degree, 1);
        assert_eq!(cfg.estimand, Estimand::Qtt { xi: vec![0.1, 0.3] });
        assert_eq!(cfg.bootstrap.weight_scheme, WeightScheme::Multinomial);
        let lists = cfg.candidate_lists().unwrap();
        assert_eq!(lists.propensity, vec![FeatureMap::FirstOrderPlusSquares]);
        assert_eq!(lists.prognostic, vec![FeatureMap::Raw]);
        let again = SchemaConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn defaults_apply() {
        let cfg = SchemaConfig::from_toml_str(
            "treatment_column='a'\noutcome_column='y'\ncovariate_columns=['x']\n",
        )
        .unwrap();
        assert_eq!(cfg.m, 1);
        assert_eq!(cfg.sieve_degree, 2);
        assert_eq!(cfg.bootstrap.replicates, 1000);
        assert_eq!(cfg.bootstrap.weight_scheme, WeightScheme::Exponential);
        assert_eq!(cfg.estimand, Estimand::Ate);
    }

    #[test]
    fn rejects_bad_values() {
        let base = "treatment_column='a'\noutcome_column='y'\ncovariate_columns=['x']\n";
        let bad_xi = format!("{base}[estimand]\nkind='QTE'\nxi=[1.0]\n");
        assert!(SchemaConfig::from_toml_str(&bad_xi).is_err());
        let bad_b = format!("{base}[bootstrap]\nreplicates=1\n");
        assert!(SchemaConfig::from_toml_str(&bad_b).is_err());
        let bad_m = format!("M=0\n{base}");
        assert!(SchemaConfig::from_toml_str(&bad_m).is_err());
        let unpaired = format!(
            "{base}[[models]]\nkind='prognostic'\narm=0\nfeature_map='raw'\n"
        );
        assert!(SchemaConfig::from_toml_str(&unpaired).is_err());
        let unknown_map = format!("{base}[[models]]\nkind='propensity'\nfeature_map='cubic'\n");
        assert!(SchemaConfig::from_toml_str(&unknown_map).is_err());
    }
}
