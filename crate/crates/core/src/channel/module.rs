use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datablock::{DataBlockSnapshot, Payload, SimTime};
use crate::decision_log::RequestRecord;
use crate::logic::EvaluationResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Source,
    Transform,
    LogicEngine,
    Publisher,
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModuleKind::Source => "source",
            ModuleKind::Transform => "transform",
            ModuleKind::LogicEngine => "logic_engine",
            ModuleKind::Publisher => "publisher",
        })
    }
}

/// Scalar parameter value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamScalar {
    Bool(bool),
    Integer(i64),
    Float(f64),
    Text(String),
}

/// Value allowed inside a nested parameter map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamLeaf {
    Scalar(ParamScalar),
    List(Vec<ParamScalar>),
}

/// Module parameter: a scalar, a list of scalars, or one level of map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(ParamScalar),
    List(Vec<ParamScalar>),
    Map(BTreeMap<String, ParamLeaf>),
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        ParamValue::Scalar(ParamScalar::Integer(v))
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Scalar(ParamScalar::Float(v))
    }
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        ParamValue::Scalar(ParamScalar::Text(v.to_string()))
    }
}

impl From<bool> for ParamValue {
    fn from(v: bool) -> Self {
        ParamValue::Scalar(ParamScalar::Bool(v))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params(pub BTreeMap<String, ParamValue>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl Into<ParamValue>) -> Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&ParamValue> {
        self.0.get(key)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>, String> {
        match self.0.get(key) {
            None => Ok(None),
            Some(ParamValue::Scalar(ParamScalar::Integer(n))) if *n >= 0 => Ok(Some(*n as u64)),
            Some(other) => Err(format!(
                "param `{key}` must be a non-negative integer, got {other:?}"
            )),
        }
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>, String> {
        match self.0.get(key) {
            None => Ok(None),
            Some(ParamValue::Scalar(ParamScalar::Integer(n))) => Ok(Some(*n as f64)),
            Some(ParamValue::Scalar(ParamScalar::Float(x))) => Ok(Some(*x)),
            Some(other) => Err(format!("param `{key}` must be a number, got {other:?}")),
        }
    }

    pub fn str(&self, key: &str) -> Result<Option<&str>, String> {
        match self.0.get(key) {
            None => Ok(None),
            Some(ParamValue::Scalar(ParamScalar::Text(s))) => Ok(Some(s)),
            Some(other) => Err(format!("param `{key}` must be a string, got {other:?}")),
        }
    }

    pub fn required_str(&self, key: &str) -> Result<&str, String> {
        self.str(key)?
            .ok_or_else(|| format!("missing required param `{key}`"))
    }
}

/// Declared contract of one module in a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleSpec {
    pub name: String,
    pub kind: ModuleKind,
    pub implementation: String,
    pub consumes: Vec<String>,
    pub produces: Vec<String>,
    pub params: Params,
    pub period_s: Option<u64>,
}

impl ModuleSpec {
    pub fn new(name: &str, kind: ModuleKind, implementation: &str) -> Self {
        Self {
            name: name.to_string(),
            kind,
            implementation: implementation.to_string(),
            consumes: Vec::new(),
            produces: Vec::new(),
            params: Params::new(),
            period_s: None,
        }
    }

    pub fn consumes(mut self, names: &[&str]) -> Self {
        self.consumes = names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn produces(mut self, names: &[&str]) -> Self {
        self.produces = names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn period(mut self, period_s: u64) -> Self {
        self.period_s = Some(period_s);
        self
    }

    pub fn params(mut self, params: Params) -> Self {
        self.params = params;
        self
    }
}

/// A product emitted by a source or transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Produced {
    pub name: String,
    pub payload: Payload,
    /// Overrides the module's configured validity for this product.
    pub validity_s: Option<u64>,
}

impl Produced {
    pub fn new(name: impl Into<String>, payload: Payload) -> Self {
        Self {
            name: name.into(),
            payload,
            validity_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ModuleError(pub String);

impl ModuleError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl From<String> for ModuleError {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Gathers data from an external system.
pub trait Source: Send {
    fn fetch(&mut self, now: SimTime) -> Result<Vec<Produced>, ModuleError>;
}

/// Converts consumed products into new products. `inputs` holds exactly the
/// declared consumes.
pub trait Transform: Send {
    fn transform(&mut self, inputs: &DataBlockSnapshot) -> Result<Vec<Produced>, ModuleError>;
}

pub struct PublishContext<'a> {
    pub channel_id: &'a str,
    pub cycle_id: u64,
    pub now: SimTime,
    pub inputs: &'a DataBlockSnapshot,
    pub evaluation: &'a EvaluationResult,
    /// Fired rules whose actions name this publisher, in firing order.
    pub triggered_by: &'a [String],
}

/// Delivers results to an external system when a fired rule names it.
/// Returns the requests the external system acknowledged.
pub trait Publisher: Send {
    fn publish(&mut self, ctx: &PublishContext<'_>) -> Result<Vec<RequestRecord>, ModuleError>;
}

/// A constructed module instance.
pub enum ModuleInstance {
    Source(Box<dyn Source>),
    Transform(Box<dyn Transform>),
    Publisher(Box<dyn Publisher>),
}

impl ModuleInstance {
    pub fn kind(&self) -> ModuleKind {
        match self {
            ModuleInstance::Source(_) => ModuleKind::Source,
            ModuleInstance::Transform(_) => ModuleKind::Transform,
            ModuleInstance::Publisher(_) => ModuleKind::Publisher,
        }
    }
}

impl fmt::Debug for ModuleInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModuleInstance({})", self.kind())
    }
}
