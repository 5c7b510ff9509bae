//! Channel contract validation and transform ordering.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;
use thiserror::Error;

use super::module::{ModuleKind, ModuleSpec};
use crate::datablock::is_identifier;
use crate::logic::{Fact, Rule};

/// Declarative description of a decision channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpec {
    pub channel_id: String,
    pub channel_period_s: u64,
    pub source_retry_cap: u32,
    pub sources: Vec<ModuleSpec>,
    pub transforms: Vec<ModuleSpec>,
    pub publishers: Vec<ModuleSpec>,
    pub facts: Vec<Fact>,
    pub rules: Vec<Rule>,
}

pub const DEFAULT_SOURCE_RETRY_CAP: u32 = 3;

impl ChannelSpec {
    pub fn new(channel_id: &str, channel_period_s: u64) -> Self {
        Self {
            channel_id: channel_id.to_string(),
            channel_period_s,
            source_retry_cap: DEFAULT_SOURCE_RETRY_CAP,
            sources: Vec::new(),
            transforms: Vec::new(),
            publishers: Vec::new(),
            facts: Vec::new(),
            rules: Vec::new(),
        }
    }

    pub fn modules(&self) -> impl Iterator<Item = &ModuleSpec> {
        self.sources
            .iter()
            .chain(&self.transforms)
            .chain(&self.publishers)
    }

    /// Every product name a source or transform produces.
    pub fn produced_names(&self) -> BTreeSet<&str> {
        self.sources
            .iter()
            .chain(&self.transforms)
            .flat_map(|m| m.produces.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Contract {
    MinimumComplement,
    InvalidName,
    DuplicateName,
    WrongSection,
    SourceConsumes,
    ProducesForbidden,
    MissingProduces,
    MissingConsumes,
    DuplicateProducer,
    UnproducedInput,
    TransformCycle { members: Vec<String> },
    InvalidPeriod,
    UndeclaredProduct,
    UnknownFactReference,
    NewFactCollision,
    UnknownAction,
}

impl fmt::Display for Contract {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Contract::MinimumComplement => "minimum module complement",
            Contract::InvalidName => "invalid name",
            Contract::DuplicateName => "duplicate name",
            Contract::WrongSection => "module kind does not match its section",
            Contract::SourceConsumes => "sources consume nothing",
            Contract::ProducesForbidden => "publishers and the logic engine produce nothing",
            Contract::MissingProduces => "module must produce at least one product",
            Contract::MissingConsumes => "module must consume at least one product",
            Contract::DuplicateProducer => "product produced more than once",
            Contract::UnproducedInput => "consumed product is produced nowhere",
            Contract::TransformCycle { .. } => "transform dependency cycle",
            Contract::InvalidPeriod => "invalid period",
            Contract::UndeclaredProduct => "fact reads an undeclared product",
            Contract::UnknownFactReference => "rule references an unknown fact",
            Contract::NewFactCollision => "derived fact name collides",
            Contract::UnknownAction => "rule action is not a declared publisher",
        };
        f.write_str(s)
    }
}

/// One broken channel contract, attributed to a module, fact, rule or the channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub entity: String,
    pub product: Option<String>,
    pub contract: Contract,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.contract)?;
        if let Some(p) = &self.product {
            write!(f, " [product `{p}`]")?;
        }
        if !self.message.is_empty() {
            write!(f, ": {}", self.message)?;
        }
        Ok(())
    }
}

fn violation(
    entity: &str,
    product: Option<&str>,
    contract: Contract,
    message: impl Into<String>,
) -> Violation {
    Violation {
        entity: entity.to_string(),
        product: product.map(str::to_string),
        contract,
        message: message.into(),
    }
}

/// Transform dependency edges: `(producer index, consumer index)`.
fn transform_edges(transforms: &[ModuleSpec]) -> Vec<(usize, usize)> {
    let producer: HashMap<&str, usize> = transforms
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.produces.iter().map(move |p| (p.as_str(), i)))
        .collect();
    let mut edges = BTreeSet::new();
    for (j, t) in transforms.iter().enumerate() {
        for c in &t.consumes {
            if let Some(&i) = producer.get(c.as_str()) {
                edges.insert((i, j));
            }
        }
    }
    edges.into_iter().collect()
}

/// Groups of transforms that lie on a dependency cycle, each in declaration order.
pub fn transform_cycles(transforms: &[ModuleSpec]) -> Vec<Vec<String>> {
    let mut g: DiGraph<usize, ()> = DiGraph::new();
    let nodes: Vec<_> = (0..transforms.len()).map(|i| g.add_node(i)).collect();
    let edges = transform_edges(transforms);
    for &(a, b) in &edges {
        g.add_edge(nodes[a], nodes[b], ());
    }
    let mut groups: Vec<Vec<usize>> = tarjan_scc(&g)
        .into_iter()
        .map(|scc| scc.into_iter().map(|n| g[n]).collect::<Vec<_>>())
        .filter(|members| members.len() > 1 || edges.contains(&(members[0], members[0])))
        .map(|mut members| {
            members.sort_unstable();
            members
        })
        .collect();
    groups.sort();
    groups
        .into_iter()
        .map(|m| m.into_iter().map(|i| transforms[i].name.clone()).collect())
        .collect()
}

pub fn validate_channel(spec: &ChannelSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let ch = format!("channel `{}`", spec.channel_id);

    if !is_identifier(&spec.channel_id) {
        out.push(violation(
            &ch,
            None,
            Contract::InvalidName,
            "channel id must be an identifier",
        ));
    }
    if spec.channel_period_s == 0 {
        out.push(violation(
            &ch,
            None,
            Contract::InvalidPeriod,
            "channel period must be positive",
        ));
    }
    for (section, list) in [
        ("source", &spec.sources),
        ("transform", &spec.transforms),
        ("publisher", &spec.publishers),
    ] {
        if list.is_empty() {
            out.push(violation(
                &ch,
                None,
                Contract::MinimumComplement,
                format!("no {section} declared"),
            ));
        }
    }
    if spec.facts.is_empty() {
        out.push(violation(
            &ch,
            None,
            Contract::MinimumComplement,
            "no fact declared for the logic engine",
        ));
    }

    // module-level contracts
    let mut names = HashSet::new();
    for (expected, list) in [
        (ModuleKind::Source, &spec.sources),
        (ModuleKind::Transform, &spec.transforms),
        (ModuleKind::Publisher, &spec.publishers),
    ] {
        for m in list {
            if !is_identifier(&m.name) {
                out.push(violation(
                    &m.name,
                    None,
                    Contract::InvalidName,
                    "module name must be an identifier",
                ));
            }
            if !names.insert(m.name.as_str()) {
                out.push(violation(
                    &m.name,
                    None,
                    Contract::DuplicateName,
                    "module name used twice",
                ));
            }
            if m.kind != expected {
                out.push(violation(
                    &m.name,
                    None,
                    Contract::WrongSection,
                    format!("{} module listed under {expected}s", m.kind),
                ));
            }
            for p in m.consumes.iter().chain(&m.produces) {
                if !is_identifier(p) {
                    out.push(violation(
                        &m.name,
                        Some(p),
                        Contract::InvalidName,
                        "product name must be an identifier",
                    ));
                }
            }
            match expected {
                ModuleKind::Source => {
                    for c in &m.consumes {
                        out.push(violation(&m.name, Some(c), Contract::SourceConsumes, ""));
                    }
                    if m.produces.is_empty() {
                        out.push(violation(&m.name, None, Contract::MissingProduces, ""));
                    }
                    if m.period_s == Some(0) {
                        out.push(violation(
                            &m.name,
                            None,
                            Contract::InvalidPeriod,
                            "source period must be positive",
                        ));
                    }
                }
                ModuleKind::Transform => {
                    if m.consumes.is_empty() {
                        out.push(violation(&m.name, None, Contract::MissingConsumes, ""));
                    }
                    if m.produces.is_empty() {
                        out.push(violation(&m.name, None, Contract::MissingProduces, ""));
                    }
                }
                ModuleKind::Publisher | ModuleKind::LogicEngine => {
                    if expected == ModuleKind::Publisher && m.consumes.is_empty() {
                        out.push(violation(&m.name, None, Contract::MissingConsumes, ""));
                    }
                    for p in &m.produces {
                        out.push(violation(&m.name, Some(p), Contract::ProducesForbidden, ""));
                    }
                }
            }
            if expected != ModuleKind::Source && m.period_s.is_some() {
                out.push(violation(
                    &m.name,
                    None,
                    Contract::InvalidPeriod,
                    "only sources are scheduled with a period",
                ));
            }
        }
    }

    // producer uniqueness
    let mut producer_of: HashMap<&str, &str> = HashMap::new();
    for m in spec.sources.iter().chain(&spec.transforms) {
        for p in &m.produces {
            if let Some(prev) = producer_of.insert(p, &m.name) {
                out.push(violation(
                    &m.name,
                    Some(p),
                    Contract::DuplicateProducer,
                    format!("already produced by `{prev}`"),
                ));
            }
        }
    }

    // every consumed name has a producer
    for m in spec.transforms.iter().chain(&spec.publishers) {
        for c in &m.consumes {
            if !producer_of.contains_key(c.as_str()) {
                out.push(violation(&m.name, Some(c), Contract::UnproducedInput, ""));
            }
        }
    }

    for members in transform_cycles(&spec.transforms) {
        let message = members.join(" -> ");
        let first = members[0].clone();
        out.push(violation(
            &first,
            None,
            Contract::TransformCycle { members },
            message,
        ));
    }

    // logic engine: facts and rules
    let mut fact_names = HashSet::new();
    for f in &spec.facts {
        if !is_identifier(&f.name) {
            out.push(violation(
                &f.name,
                None,
                Contract::InvalidName,
                "fact name must be an identifier",
            ));
        }
        if !fact_names.insert(f.name.as_str()) {
            out.push(violation(
                &f.name,
                None,
                Contract::DuplicateName,
                "fact declared twice",
            ));
        }
        for path in f.expression.product_paths() {
            if !producer_of.contains_key(path.product.as_str()) {
                out.push(violation(
                    &f.name,
                    Some(&path.product),
                    Contract::UndeclaredProduct,
                    format!("path `{path}`"),
                ));
            }
        }
    }

    let mut derived: HashMap<&str, &str> = HashMap::new();
    let mut rule_names = HashSet::new();
    for r in &spec.rules {
        if !is_identifier(&r.name) {
            out.push(violation(
                &r.name,
                None,
                Contract::InvalidName,
                "rule name must be an identifier",
            ));
        }
        if !rule_names.insert(r.name.as_str()) {
            out.push(violation(
                &r.name,
                None,
                Contract::DuplicateName,
                "rule declared twice",
            ));
        }
        for nf in &r.new_facts {
            if !is_identifier(nf) {
                out.push(violation(
                    &r.name,
                    None,
                    Contract::InvalidName,
                    format!("new fact `{nf}` is not an identifier"),
                ));
            }
            if fact_names.contains(nf.as_str()) {
                out.push(violation(
                    &r.name,
                    None,
                    Contract::NewFactCollision,
                    format!("`{nf}` is a declared fact"),
                ));
            } else if let Some(prev) = derived.insert(nf, &r.name) {
                out.push(violation(
                    &r.name,
                    None,
                    Contract::NewFactCollision,
                    format!("`{nf}` is already derived by rule `{prev}`"),
                ));
            }
        }
    }
    let publishers: HashSet<&str> = spec.publishers.iter().map(|p| p.name.as_str()).collect();
    for r in &spec.rules {
        for name in r.condition.fact_refs() {
            if !fact_names.contains(name) && !derived.contains_key(name) {
                out.push(violation(
                    &r.name,
                    None,
                    Contract::UnknownFactReference,
                    format!("`{name}`"),
                ));
            }
        }
        for a in &r.actions {
            if !publishers.contains(a.as_str()) {
                out.push(violation(
                    &r.name,
                    None,
                    Contract::UnknownAction,
                    format!("`{a}`"),
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transform dependency cycle among: {}", .0.join(", "))]
pub struct CycleDetected(pub Vec<String>);

/// Topological order of transforms; ties go to the earlier declaration.
pub fn transform_order(spec: &ChannelSpec) -> Result<Vec<String>, CycleDetected> {
    let n = spec.transforms.len();
    let edges = transform_edges(&spec.transforms);
    let mut indegree = vec![0usize; n];
    let mut successors = vec![Vec::new(); n];
    for &(a, b) in &edges {
        indegree[b] += 1;
        successors[a].push(b);
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(spec.transforms[i].name.clone());
        for &j in &successors[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push(Reverse(j));
            }
        }
    }
    if order.len() < n {
        let stuck = (0..n)
            .filter(|&i| indegree[i] > 0)
            .map(|i| spec.transforms[i].name.clone())
            .collect();
        return Err(CycleDetected(stuck));
    }
    Ok(order)
}
