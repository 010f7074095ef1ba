//! Versioned JSON files for scenarios and execution plans.
//!
//! Amounts are decimal strings that parse back to the same `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Cfmm, Configuration, Edge, EdgeSet, ModelError, Mode, TokenId, TradingFunction};
use crate::planner::ExecutionPlan;

pub const VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum FileError {
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported version {0:?}, expected \"v1\"")]
    Version(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    ConstantProduct,
    WeightedGeometricMean,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionEntry {
    pub kind: FunctionKind,
    #[serde(default, with = "decimal_list")]
    pub params: Vec<f64>,
}

impl FunctionEntry {
    fn to_function(&self) -> Result<TradingFunction, FileError> {
        let want = match self.kind {
            FunctionKind::ConstantProduct => 0,
            _ => 2,
        };
        if self.params.len() != want {
            return Err(FileError::Invalid(format!(
                "{:?} takes {want} params, got {}",
                self.kind,
                self.params.len()
            )));
        }
        Ok(match self.kind {
            FunctionKind::ConstantProduct => TradingFunction::ConstantProduct,
            FunctionKind::WeightedGeometricMean => TradingFunction::WeightedGeometricMean {
                w1: self.params[0],
                w2: self.params[1],
            },
            FunctionKind::Linear => TradingFunction::Linear { a: self.params[0], b: self.params[1] },
        })
    }

    fn from_function(f: &TradingFunction) -> Self {
        let (kind, params) = match *f {
            TradingFunction::ConstantProduct => (FunctionKind::ConstantProduct, vec![]),
            TradingFunction::WeightedGeometricMean { w1, w2 } => {
                (FunctionKind::WeightedGeometricMean, vec![w1, w2])
            }
            TradingFunction::Linear { a, b } => (FunctionKind::Linear, vec![a, b]),
        };
        FunctionEntry { kind, params }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfmmEntry {
    #[serde(with = "crate::decimal::pair")]
    pub pools: [f64; 2],
    pub tokens: [TokenId; 2],
    pub function: FunctionEntry,
    #[serde(with = "crate::decimal")]
    pub fee: f64,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: String,
    pub tokens: Vec<TokenId>,
    pub cfmms: Vec<CfmmEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<Edge>>,
}

/// A parsed and validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: Configuration,
    pub edges: Option<EdgeSet>,
}

impl ScenarioFile {
    pub fn from_config(config: &Configuration, edges: Option<&EdgeSet>) -> Self {
        ScenarioFile {
            version: VERSION.into(),
            tokens: config.tokens().to_vec(),
            cfmms: config
                .cfmms()
                .iter()
                .map(|c| CfmmEntry {
                    pools: c.pools,
                    tokens: c.tokens.clone(),
                    function: FunctionEntry::from_function(&c.function),
                    fee: c.fee,
                    mode: c.mode,
                })
                .collect(),
            edges: edges.map(|e| e.edges().to_vec()),
        }
    }

    pub fn to_scenario(&self) -> Result<Scenario, FileError> {
        check_version(&self.version)?;
        let cfmms = self
            .cfmms
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let function = e
                    .function
                    .to_function()
                    .map_err(|err| FileError::Invalid(format!("cfmm {i}: {err}")))?;
                Ok(Cfmm::new(e.tokens.clone(), e.pools, function).with_fee(e.fee).with_mode(e.mode))
            })
            .collect::<Result<Vec<_>, FileError>>()?;
        let config = Configuration::new(self.tokens.clone(), cfmms)?;
        let edges = match &self.edges {
            Some(list) => Some(EdgeSet::new(&config, list.clone())?),
            None => None,
        };
        Ok(Scenario { config, edges })
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, FileError> {
    serde_json::from_str::<ScenarioFile>(text)?.to_scenario()
}

pub fn write_scenario(config: &Configuration, edges: Option<&EdgeSet>) -> String {
    to_json(&ScenarioFile::from_config(config, edges))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub version: String,
    #[serde(flatten)]
    pub plan: ExecutionPlan,
}

pub fn parse_plan(text: &str) -> Result<ExecutionPlan, FileError> {
    let file: PlanFile = serde_json::from_str(text)?;
    check_version(&file.version)?;
    Ok(file.plan)
}

pub fn write_plan(plan: &ExecutionPlan) -> String {
    to_json(&PlanFile { version: VERSION.into(), plan: plan.clone() })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    text
}

fn check_version(version: &str) -> Result<(), FileError> {
    if version == VERSION {
        Ok(())
    } else {
        Err(FileError::Version(version.into()))
    }
}

mod decimal_list {
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(value: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
        value.iter().map(|&v| crate::decimal::to_string(v)).collect::<Vec<_>>().serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(deserializer)?
            .iter()
            .map(|s| crate::decimal::parse(s).map_err(D::Error::custom))
            .collect()
    }
}
