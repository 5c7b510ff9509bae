//! Helpers shared by the integration tests: config and scenario generators
//! plus independent oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use decision_engine::logic::FactValue;
use decision_engine::money::Money;
use decision_engine::provisioning::{EntryState, ProviderKind, ResourceEntry};
use decision_engine::sim::{
    JobBatch, Outage, PolicySpec, PriceProcess, ProviderSpec, Scenario, Window,
};
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn reference_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("reference")
}

pub fn reference_config_dir() -> PathBuf {
    reference_dir().join("config")
}

pub fn reference_scenario_path() -> PathBuf {
    reference_dir().join("scenario.toml")
}

pub fn reference_scenario() -> Scenario {
    Scenario::load(&reference_scenario_path()).expect("reference scenario loads")
}

/// A provisioning channel shaped like the reference one, with one entry
/// source per provider.
pub fn provisioning_config(channel_id: &str, providers: &[String]) -> String {
    let entries: Vec<String> = providers
        .iter()
        .map(|p| format!("\"entries_{p}\""))
        .collect();
    let entries = entries.join(", ");
    let mut s = String::new();
    writeln!(
        s,
        "[channel]\nid = \"{channel_id}\"\nperiod_s = 60\nsource_retry_cap = 3\n"
    )
    .unwrap();
    writeln!(
        s,
        "[[sources]]\nname = \"job_queue\"\nimplementation = \"sim_job_queue\"\nproduces = [\"jobs\"]\n"
    )
    .unwrap();
    for p in providers {
        writeln!(
            s,
            "[[sources]]\nname = \"{p}_entries\"\nimplementation = \"sim_provider\"\nproduces = [\"entries_{p}\"]\nparams = {{ provider = \"{p}\" }}\n"
        )
        .unwrap();
    }
    writeln!(
        s,
        "[[sources]]\nname = \"policy_source\"\nimplementation = \"sim_policy\"\nproduces = [\"policy\"]\n"
    )
    .unwrap();
    writeln!(
        s,
        "[[transforms]]\nname = \"match_jobs\"\nimplementation = \"eligibility\"\nconsumes = [\"jobs\", {entries}]\nproduces = [\"eligibility\"]\n"
    )
    .unwrap();
    writeln!(
        s,
        "[[transforms]]\nname = \"rank_entries\"\nimplementation = \"fom_ranking\"\nconsumes = [\"eligibility\", {entries}]\nproduces = [\"ranking\"]\n"
    )
    .unwrap();
    writeln!(
        s,
        "[[transforms]]\nname = \"make_requests\"\nimplementation = \"request_generation\"\nconsumes = [\"ranking\", \"eligibility\", \"jobs\", \"policy\", {entries}]\nproduces = [\"requests\"]\n"
    )
    .unwrap();
    writeln!(
        s,
        "[[publishers]]\nname = \"provisioner\"\nimplementation = \"sim_provisioner\"\nconsumes = [\"requests\"]\n"
    )
    .unwrap();
    s.push_str(
        r#"[[facts]]
name = "idle_demand"
expression = "count(eligibility.job_id) > 0"

[[facts]]
name = "budget_left"
expression = "policy.budget_remaining > 0"

[[facts]]
name = "has_requests"
expression = "count(requests.slots) > 0"

[[rules]]
name = "demand_within_budget"
condition = "idle_demand and budget_left"
actions = []
new_facts = ["provisioning_allowed"]

[[rules]]
name = "provision"
condition = "provisioning_allowed and has_requests"
actions = ["provisioner"]
"#,
    );
    s
}

/// Writes `files` into `dir` (created if needed).
pub fn write_config_dir(dir: &Path, files: &[(&str, &str)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, text) in files {
        std::fs::write(dir.join(name), text).unwrap();
    }
}

pub fn provider_names(s: &Scenario) -> Vec<String> {
    s.providers.iter().map(|p| p.name.clone()).collect()
}

/// A random scenario with up to `max_entries` providers and `max_jobs` jobs.
pub fn random_scenario(rng: &mut impl Rng, max_entries: usize, max_jobs: u64) -> Scenario {
    let n_prov = rng.random_range(1..=max_entries);
    let names: Vec<String> = (0..n_prov).map(|i| format!("p{i}")).collect();
    let mut providers = Vec::new();
    for name in &names {
        let kind = *[ProviderKind::Grid, ProviderKind::Cloud, ProviderKind::Hpc]
            .choose(rng)
            .unwrap();
        let base = match kind {
            ProviderKind::Grid if rng.random_bool(0.5) => 0.0,
            _ => rng.random_range(0.0..0.5),
        };
        let mut down = Vec::new();
        if rng.random_bool(0.2) {
            let from_s = rng.random_range(0..3000u64);
            down.push(Window {
                from_s,
                until_s: Some(from_s + rng.random_range(60..1200)),
            });
        }
        providers.push(ProviderSpec {
            name: name.clone(),
            kind,
            entry_id: None,
            slot_cores: rng.random_range(1..=4),
            slot_memory_mb: *[2000, 4000, 8000].choose(rng).unwrap(),
            performance_score: rng.random_range(1.0..20.0),
            max_slots: rng.random_range(1..=32),
            allocation_core_hours: (kind == ProviderKind::Hpc).then(|| rng.random_range(0.0..20.0)),
            price: PriceProcess {
                base_price: base,
                amplitude: rng.random_range(0.0..0.5),
                period_s: rng.random_range(600..7200),
                jitter: rng.random_range(0.0..0.2),
            },
            down,
        });
    }
    let n_jobs = rng.random_range(0..=max_jobs);
    let mut job_batches = Vec::new();
    let mut left = n_jobs;
    let mut b = 0;
    while left > 0 {
        let count = rng.random_range(1..=left);
        left -= count;
        let site_whitelist = rng.random_bool(0.3).then(|| {
            let k = rng.random_range(1..=names.len());
            names.choose_multiple(rng, k).cloned().collect()
        });
        job_batches.push(JobBatch {
            prefix: format!("b{b}"),
            count,
            cores: rng.random_range(1..=4),
            memory_mb: rng.random_range(500..=8000),
            max_walltime_s: rng.random_range(60..=3600),
            site_whitelist,
        });
        b += 1;
    }
    let mut outages = Vec::new();
    if rng.random_bool(0.2) {
        let from_s = rng.random_range(0..1800u64);
        outages.push(Outage {
            target: "sink".into(),
            from_s,
            until_s: Some(from_s + rng.random_range(60..600)),
            max_failures: None,
        });
    }
    if rng.random_bool(0.2) {
        outages.push(Outage {
            target: format!("provider:{}", names.choose(rng).unwrap()),
            from_s: rng.random_range(0..1800u64),
            until_s: None,
            max_failures: Some(rng.random_range(1..=2)),
        });
    }
    Scenario {
        policy: PolicySpec {
            budget: Money::from_f64(rng.random_range(0.0..20.0)),
            per_entry_max_request: rng.random_range(1..=32),
            expected_job_walltime_s: rng.random_range(60..=3600),
        },
        jobs: Vec::new(),
        job_batches,
        providers,
        outages,
    }
}

// ---------------------------------------------------------------------------
// chaining oracle

#[derive(Clone, Debug)]
pub enum Cond {
    Lit(bool),
    Name(String),
    Not(Box<Cond>),
    And(Box<Cond>, Box<Cond>),
    Or(Box<Cond>, Box<Cond>),
}

impl Cond {
    /// Fully parenthesized source text.
    pub fn render(&self) -> String {
        match self {
            Cond::Lit(b) => b.to_string(),
            Cond::Name(n) => n.clone(),
            Cond::Not(c) => format!("not ({})", c.render()),
            Cond::And(a, b) => format!("({}) and ({})", a.render(), b.render()),
            Cond::Or(a, b) => format!("({}) or ({})", a.render(), b.render()),
        }
    }

    fn names(&self, out: &mut BTreeSet<String>) {
        match self {
            Cond::Lit(_) => {}
            Cond::Name(n) => {
                out.insert(n.clone());
            }
            Cond::Not(c) => c.names(out),
            Cond::And(a, b) | Cond::Or(a, b) => {
                a.names(out);
                b.names(out);
            }
        }
    }

    fn holds(&self, env: &BTreeMap<String, bool>) -> bool {
        match self {
            Cond::Lit(b) => *b,
            Cond::Name(n) => env.get(n).copied().unwrap_or(false),
            Cond::Not(c) => !c.holds(env),
            Cond::And(a, b) => a.holds(env) && b.holds(env),
            Cond::Or(a, b) => a.holds(env) || b.holds(env),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RuleCase {
    pub name: String,
    pub cond: Cond,
    pub actions: Vec<String>,
    pub new_facts: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ChainCase {
    pub fact_values: BTreeMap<String, FactValue>,
    pub rules: Vec<RuleCase>,
}

pub const PUBLISHERS: [&str; 3] = ["pub_a", "pub_b", "pub_c"];

fn random_cond(rng: &mut impl Rng, names: &[String], depth: u32) -> Cond {
    if depth == 0 || rng.random_bool(0.35) {
        return if names.is_empty() || rng.random_bool(0.05) {
            Cond::Lit(rng.random_bool(0.5))
        } else {
            Cond::Name(names.choose(rng).unwrap().clone())
        };
    }
    match rng.random_range(0..3) {
        0 => Cond::Not(Box::new(random_cond(rng, names, depth - 1))),
        1 => Cond::And(
            Box::new(random_cond(rng, names, depth - 1)),
            Box::new(random_cond(rng, names, depth - 1)),
        ),
        _ => Cond::Or(
            Box::new(random_cond(rng, names, depth - 1)),
            Box::new(random_cond(rng, names, depth - 1)),
        ),
    }
}

/// At most 8 facts, 8 rules and 3 derived facts, each derived fact owned by
/// exactly one rule.
pub fn random_chain_case(rng: &mut impl Rng) -> ChainCase {
    let n_facts = rng.random_range(1..=8);
    let n_rules = rng.random_range(1..=8);
    let n_derived = rng.random_range(0..=3usize.min(n_rules));
    let facts: Vec<String> = (0..n_facts).map(|i| format!("f{i}")).collect();
    let derived: Vec<String> = (0..n_derived).map(|i| format!("d{i}")).collect();
    let fact_values = facts
        .iter()
        .map(|f| {
            let v = match rng.random_range(0..10) {
                0 => FactValue::Failed,
                1..=5 => FactValue::True,
                _ => FactValue::False,
            };
            (f.clone(), v)
        })
        .collect();
    let mut owners: Vec<Vec<String>> = vec![Vec::new(); n_rules];
    for d in &derived {
        owners[rng.random_range(0..n_rules)].push(d.clone());
    }
    let names: Vec<String> = facts.iter().chain(&derived).cloned().collect();
    let rules = (0..n_rules)
        .map(|i| {
            let n_actions = rng.random_range(0..=2);
            RuleCase {
                name: format!("r{i}"),
                cond: random_cond(rng, &names, 3),
                actions: (0..n_actions)
                    .map(|_| PUBLISHERS.choose(rng).unwrap().to_string())
                    .collect(),
                new_facts: owners[i].clone(),
            }
        })
        .collect();
    ChainCase { fact_values, rules }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainOutcome {
    pub fired: Vec<String>,
    pub derived: BTreeMap<String, bool>,
    pub actions: Vec<String>,
}

/// Naive fixpoint: repeat full passes until nothing changes.
pub fn chain_oracle(case: &ChainCase) -> ChainOutcome {
    // a rule is blocked if it can reach a failed fact through its condition
    // or the conditions of the rules deriving what it reads
    let owner: BTreeMap<&str, usize> = case
        .rules
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.new_facts.iter().map(move |f| (f.as_str(), i)))
        .collect();
    let reads: Vec<BTreeSet<String>> = case
        .rules
        .iter()
        .map(|r| {
            let mut s = BTreeSet::new();
            r.cond.names(&mut s);
            s
        })
        .collect();
    let blocked: Vec<bool> = (0..case.rules.len())
        .map(|start| {
            let mut seen = BTreeSet::from([start]);
            let mut stack = vec![start];
            while let Some(i) = stack.pop() {
                for n in &reads[i] {
                    if case.fact_values.get(n) == Some(&FactValue::Failed) {
                        return true;
                    }
                    if let Some(&j) = owner.get(n.as_str()) {
                        if seen.insert(j) {
                            stack.push(j);
                        }
                    }
                }
            }
            false
        })
        .collect();

    let mut env: BTreeMap<String, bool> = case
        .fact_values
        .iter()
        .map(|(k, v)| (k.clone(), *v == FactValue::True))
        .collect();
    let mut fired = Vec::new();
    let mut has_fired = vec![false; case.rules.len()];
    loop {
        let mut changed = false;
        for (i, r) in case.rules.iter().enumerate() {
            if has_fired[i] || blocked[i] || !r.cond.holds(&env) {
                continue;
            }
            has_fired[i] = true;
            fired.push(r.name.clone());
            for f in &r.new_facts {
                env.insert(f.clone(), true);
            }
            changed = true;
        }
        if !changed {
            break;
        }
    }
    let mut actions: Vec<String> = Vec::new();
    for name in &fired {
        let r = case.rules.iter().find(|r| &r.name == name).unwrap();
        for a in &r.actions {
            if !actions.contains(a) {
                actions.push(a.clone());
            }
        }
    }
    let derived = case
        .rules
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            let fired = has_fired[i];
            r.new_facts.iter().map(move |f| (f.clone(), fired))
        })
        .collect();
    ChainOutcome {
        fired,
        derived,
        actions,
    }
}

// ---------------------------------------------------------------------------
// ranking oracle

pub fn random_entries(rng: &mut impl Rng, max: usize) -> Vec<ResourceEntry> {
    let n = rng.random_range(1..=max);
    (0..n)
        .map(|i| {
            let max_slots = rng.random_range(1..=64);
            let used = rng.random_range(0..=max_slots);
            let kind = *[ProviderKind::Grid, ProviderKind::Cloud, ProviderKind::Hpc]
                .choose(rng)
                .unwrap();
            ResourceEntry {
                // shuffled ids so index order and id order differ
                entry_id: format!("e{:02}", (i * 7 + 3) % 97),
                provider: format!("prov{i}"),
                provider_kind: kind,
                slot_cores: rng.random_range(1..=8),
                slot_memory_mb: 4000,
                price_per_core_hour: if rng.random_bool(0.15) {
                    0.0
                } else {
                    rng.random_range(0.001..2.0)
                },
                performance_score: rng.random_range(0.5..50.0),
                occupancy: used as f64 / max_slots as f64,
                state: EntryState::Up,
                max_slots,
                allocation_core_hours_remaining: (kind == ProviderKind::Hpc).then_some(100.0),
            }
        })
        .collect()
}

/// Entry ids in rank order: repeatedly pick the minimum by (fom, id).
pub fn rank_oracle(entries: &[ResourceEntry]) -> Vec<(String, f64)> {
    let mut pool: Vec<(String, f64)> = entries
        .iter()
        .map(|e| {
            let fom = e.price_per_core_hour / e.performance_score * (1.0 + e.occupancy);
            (e.entry_id.clone(), fom)
        })
        .collect();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (ref id, v) = pool[i];
            let (ref bid, bv) = pool[best];
            if v < bv || (v == bv && id < bid) {
                best = i;
            }
        }
        out.push(pool.remove(best));
    }
    out
}
