//! Generation-versioned store of named data products.
//!
//! Every `put` creates a new immutable generation of a product; older
//! generations stay in a bounded history for traceability. Channels read the
//! store through [`DataBlockSnapshot`]s, which hold the latest unexpired
//! generation of every key as of the time the snapshot was taken.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Simulated time in whole seconds.
pub type SimTime = u64;

/// Generations retained per key unless configured otherwise.
pub const DEFAULT_RETENTION: usize = 100;

/// Returns true when `name` matches `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A scalar stored in a product field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Number(_) => "number",
            Value::Text(_) => "string",
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Number(v)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Number(v as f64)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

/// Field name to scalar. Sorted, so serialization is canonical.
pub type Record = BTreeMap<String, Value>;

/// Payload of a data product: a single record or a table of records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "lowercase")]
pub enum Payload {
    Record(Record),
    Table(Vec<Record>),
}

impl Payload {
    pub fn record<I, K, V>(fields: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<Value>,
    {
        Payload::Record(
            fields
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        )
    }

    pub fn as_record(&self) -> Option<&Record> {
        match self {
            Payload::Record(r) => Some(r),
            Payload::Table(_) => None,
        }
    }

    pub fn as_table(&self) -> Option<&[Record]> {
        match self {
            Payload::Table(rows) => Some(rows),
            Payload::Record(_) => None,
        }
    }

    /// Checks field names, finite numbers and (for tables) identical field sets.
    pub fn validate(&self) -> Result<(), String> {
        fn check_record(rec: &Record) -> Result<(), String> {
            for (field, value) in rec {
                if !is_identifier(field) {
                    return Err(format!("field name `{field}` is not an identifier"));
                }
                if let Value::Number(n) = value {
                    if !n.is_finite() {
                        return Err(format!("field `{field}` holds a non-finite number"));
                    }
                }
            }
            Ok(())
        }
        match self {
            Payload::Record(rec) => check_record(rec),
            Payload::Table(rows) => {
                let mut first: Option<&Record> = None;
                for (i, row) in rows.iter().enumerate() {
                    check_record(row)?;
                    match first {
                        None => first = Some(row),
                        Some(head) => {
                            if !head.keys().eq(row.keys()) {
                                return Err(format!(
                                    "ragged table: row {i} field set differs from row 0"
                                ));
                            }
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Canonical serialization used for digests: JSON with sorted fields.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("payload serialization is infallible")
    }

    /// Hex SHA-256 over [`Payload::canonical_bytes`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProductKey {
    pub channel_id: String,
    pub name: String,
}

impl ProductKey {
    pub fn new(channel_id: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            channel_id: channel_id.into(),
            name: name.into(),
        }
    }
}

impl fmt::Display for ProductKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.channel_id, self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductHeader {
    pub generation: u64,
    pub created_at: SimTime,
    pub expiration_at: SimTime,
    pub producer: String,
}

/// One stored generation of a product. Cloning shares the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct DataProduct {
    pub key: ProductKey,
    pub header: ProductHeader,
    payload: Arc<Payload>,
    digest: Arc<str>,
}

impl DataProduct {
    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn dump(&self) -> ProductDump {
        ProductDump {
            channel: self.key.channel_id.clone(),
            name: self.key.name.clone(),
            generation: self.header.generation,
            created_at: self.header.created_at,
            expiration_at: self.header.expiration_at,
            producer: self.header.producer.clone(),
            payload: (*self.payload).clone(),
        }
    }
}

/// Exported form of a product, one document per product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductDump {
    pub channel: String,
    pub name: String,
    pub generation: u64,
    pub created_at: SimTime,
    pub expiration_at: SimTime,
    pub producer: String,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub header: ProductHeader,
    pub digest: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataBlockError {
    #[error("malformed payload for `{name}`: {reason}")]
    MalformedPayload { name: String, reason: String },
    #[error("validity for `{name}` must be positive")]
    InvalidValidity { name: String },
    #[error("unknown product `{0}`")]
    UnknownKey(ProductKey),
}

/// Consistent, immutable view of one channel's products at a point in time.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBlockSnapshot {
    pub channel_id: String,
    pub cycle_id: u64,
    pub taken_at: SimTime,
    entries: BTreeMap<String, DataProduct>,
}

impl DataBlockSnapshot {
    pub fn empty(channel_id: impl Into<String>, cycle_id: u64, taken_at: SimTime) -> Self {
        Self {
            channel_id: channel_id.into(),
            cycle_id,
            taken_at,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&DataProduct> {
        self.entries.get(name)
    }

    pub fn payload(&self, name: &str) -> Option<&Payload> {
        self.entries.get(name).map(DataProduct::payload)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Products in name order.
    pub fn products(&self) -> impl Iterator<Item = &DataProduct> {
        self.entries.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// View holding only `names`; returns the first missing name on failure.
    pub fn restrict<'a, I>(&self, names: I) -> Result<DataBlockSnapshot, String>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut entries = BTreeMap::new();
        for name in names {
            match self.entries.get(name) {
                Some(p) => {
                    entries.insert(name.clone(), p.clone());
                }
                None => return Err(name.clone()),
            }
        }
        Ok(DataBlockSnapshot {
            channel_id: self.channel_id.clone(),
            cycle_id: self.cycle_id,
            taken_at: self.taken_at,
            entries,
        })
    }

    /// Adds or replaces a product in this (owned) view. Used by the cycle
    /// driver to expose freshly written transform outputs to dependents.
    pub fn insert(&mut self, product: DataProduct) {
        self.entries.insert(product.key.name.clone(), product);
    }
}

#[derive(Debug, Default)]
struct KeyHistory {
    last_generation: u64,
    retained: VecDeque<DataProduct>,
}

/// Thread-safe product store shared by all channels.
#[derive(Debug)]
pub struct DataBlock {
    retention: usize,
    inner: RwLock<HashMap<ProductKey, KeyHistory>>,
}

impl Default for DataBlock {
    fn default() -> Self {
        Self::new()
    }
}

impl DataBlock {
    pub fn new() -> Self {
        Self::with_retention(DEFAULT_RETENTION)
    }

    pub fn with_retention(retention: usize) -> Self {
        Self {
            retention: retention.max(1),
            inner: RwLock::new(HashMap::new()),
        }
    }

    pub fn put(
        &self,
        channel_id: &str,
        name: &str,
        payload: Payload,
        validity_s: u64,
        producer: &str,
        now: SimTime,
    ) -> Result<ProductHeader, DataBlockError> {
        self.put_product(channel_id, name, payload, validity_s, producer, now)
            .map(|p| p.header)
    }

    /// Like [`DataBlock::put`] but returns the stored product.
    pub fn put_product(
        &self,
        channel_id: &str,
        name: &str,
        payload: Payload,
        validity_s: u64,
        producer: &str,
        now: SimTime,
    ) -> Result<DataProduct, DataBlockError> {
        if !is_identifier(name) {
            return Err(DataBlockError::MalformedPayload {
                name: name.to_string(),
                reason: "product name must be a non-empty identifier".into(),
            });
        }
        if validity_s == 0 {
            return Err(DataBlockError::InvalidValidity {
                name: name.to_string(),
            });
        }
        payload
            .validate()
            .map_err(|reason| DataBlockError::MalformedPayload {
                name: name.to_string(),
                reason,
            })?;

        let key = ProductKey::new(channel_id, name);
        let digest: Arc<str> = payload.digest().into();
        let mut inner = self.inner.write().expect("datablock lock poisoned");
        let hist = inner.entry(key.clone()).or_default();
        hist.last_generation += 1;
        let product = DataProduct {
            key,
            header: ProductHeader {
                generation: hist.last_generation,
                created_at: now,
                expiration_at: now.saturating_add(validity_s),
                producer: producer.to_string(),
            },
            payload: Arc::new(payload),
            digest,
        };
        hist.retained.push_back(product.clone());
        while hist.retained.len() > self.retention {
            hist.retained.pop_front();
        }
        Ok(product)
    }

    pub fn snapshot(&self, channel_id: &str, cycle_id: u64, now: SimTime) -> DataBlockSnapshot {
        let inner = self.inner.read().expect("datablock lock poisoned");
        let entries = inner
            .iter()
            .filter(|(k, _)| k.channel_id == channel_id)
            .filter_map(|(k, h)| {
                h.retained
                    .back()
                    .filter(|p| p.header.expiration_at >= now)
                    .map(|p| (k.name.clone(), p.clone()))
            })
            .collect();
        DataBlockSnapshot {
            channel_id: channel_id.to_string(),
            cycle_id,
            taken_at: now,
            entries,
        }
    }

    /// Retained generations for a key, oldest first.
    pub fn history(
        &self,
        channel_id: &str,
        name: &str,
    ) -> Result<Vec<HistoryEntry>, DataBlockError> {
        let key = ProductKey::new(channel_id, name);
        let inner = self.inner.read().expect("datablock lock poisoned");
        let hist = inner
            .get(&key)
            .ok_or_else(|| DataBlockError::UnknownKey(key.clone()))?;
        Ok(hist
            .retained
            .iter()
            .map(|p| HistoryEntry {
                header: p.header.clone(),
                digest: p.digest.to_string(),
            })
            .collect())
    }

    /// A specific retained generation, if still in history.
    pub fn generation(&self, channel_id: &str, name: &str, generation: u64) -> Option<DataProduct> {
        let inner = self.inner.read().expect("datablock lock poisoned");
        inner
            .get(&ProductKey::new(channel_id, name))?
            .retained
            .iter()
            .find(|p| p.header.generation == generation)
            .cloned()
    }

    pub fn channels(&self) -> BTreeSet<String> {
        let inner = self.inner.read().expect("datablock lock poisoned");
        inner.keys().map(|k| k.channel_id.clone()).collect()
    }
}
