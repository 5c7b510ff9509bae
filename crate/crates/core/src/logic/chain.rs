//! Forward chaining over fact values.
//!
//! Rules are scanned in declaration order, pass after pass. A rule fires at
//! most once; firing binds its new facts to true and queues its actions.
//! Chaining stops after the first pass that fires nothing. A rule whose
//! condition mentions a failed fact, or a derived fact whose deriving rule is
//! itself suppressed, never fires.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ast::{BinaryOp, Expr, Literal, UnaryOp};
use super::eval::FactValue;
use super::Rule;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub fact_values: BTreeMap<String, FactValue>,
    pub fired_rules: Vec<String>,
    pub triggered_actions: Vec<String>,
    /// Every rule-declared new fact; true once its rule fired.
    pub derived_facts: BTreeMap<String, bool>,
    pub suppressed_rules: Vec<String>,
}

impl EvaluationResult {
    pub fn fired(&self, rule: &str) -> bool {
        self.fired_rules.iter().any(|r| r == rule)
    }
}

fn condition_holds(
    expr: &Expr,
    facts: &BTreeMap<String, FactValue>,
    derived: &HashMap<&str, bool>,
) -> bool {
    match expr {
        Expr::Literal(Literal::Bool(b)) => *b,
        Expr::FactRef(name) => match facts.get(name) {
            Some(v) => v.as_bool().unwrap_or(false),
            None => derived.get(name.as_str()).copied().unwrap_or(false),
        },
        Expr::Unary {
            op: UnaryOp::Not,
            operand,
        } => !condition_holds(operand, facts, derived),
        Expr::Binary {
            op: BinaryOp::And,
            lhs,
            rhs,
        } => condition_holds(lhs, facts, derived) && condition_holds(rhs, facts, derived),
        Expr::Binary {
            op: BinaryOp::Or,
            lhs,
            rhs,
        } => condition_holds(lhs, facts, derived) || condition_holds(rhs, facts, derived),
        // rejected at load time
        _ => false,
    }
}

/// Rules that can never fire because they depend on a failed fact.
fn suppressed(rules: &[Rule], facts: &BTreeMap<String, FactValue>) -> HashSet<usize> {
    let deriver: HashMap<&str, usize> = rules
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.new_facts.iter().map(move |f| (f.as_str(), i)))
        .collect();
    let refs: Vec<Vec<&str>> = rules.iter().map(|r| r.condition.fact_refs()).collect();
    let mut out = HashSet::new();
    loop {
        let before = out.len();
        for (i, names) in refs.iter().enumerate() {
            if out.contains(&i) {
                continue;
            }
            let tainted = names.iter().any(|n| {
                facts.get(*n) == Some(&FactValue::Failed)
                    || deriver.get(n).is_some_and(|d| out.contains(d))
            });
            if tainted {
                out.insert(i);
            }
        }
        if out.len() == before {
            return out;
        }
    }
}

pub fn forward_chain(
    rules: &[Rule],
    fact_values: &BTreeMap<String, FactValue>,
) -> EvaluationResult {
    let blocked = suppressed(rules, fact_values);
    let mut derived: HashMap<&str, bool> = rules
        .iter()
        .flat_map(|r| r.new_facts.iter().map(|f| (f.as_str(), false)))
        .collect();
    let mut fired = vec![false; rules.len()];
    let mut result = EvaluationResult {
        fact_values: fact_values.clone(),
        ..Default::default()
    };

    loop {
        let mut progress = false;
        for (i, rule) in rules.iter().enumerate() {
            if fired[i] || blocked.contains(&i) {
                continue;
            }
            if condition_holds(&rule.condition, fact_values, &derived) {
                fired[i] = true;
                progress = true;
                result.fired_rules.push(rule.name.clone());
                for f in &rule.new_facts {
                    derived.insert(f, true);
                }
                for a in &rule.actions {
                    if !result.triggered_actions.contains(a) {
                        result.triggered_actions.push(a.clone());
                    }
                }
            }
        }
        if !progress {
            break;
        }
    }

    result.derived_facts = derived
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    result.suppressed_rules = rules
        .iter()
        .enumerate()
        .filter(|(i, _)| blocked.contains(i))
        .map(|(_, r)| r.name.clone())
        .collect();
    result
}
