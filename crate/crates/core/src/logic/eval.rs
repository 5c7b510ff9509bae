//! Fact evaluation over a datablock snapshot, plus the load-time checks that
//! keep fact and rule expressions in their own namespaces.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ast::{Aggregate, BinaryOp, Expr, Literal, ProductPath, UnaryOp};
use super::Fact;
use crate::datablock::{DataBlockSnapshot, Payload, Value};

/// Three-valued fact outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactValue {
    True,
    False,
    Failed,
}

impl FactValue {
    pub fn from_bool(b: bool) -> Self {
        if b {
            FactValue::True
        } else {
            FactValue::False
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            FactValue::True => Some(true),
            FactValue::False => Some(false),
            FactValue::Failed => None,
        }
    }
}

impl fmt::Display for FactValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FactValue::True => "true",
            FactValue::False => "false",
            FactValue::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("missing product `{0}`")]
    MissingProduct(String),
    #[error("product `{product}` has no field `{field}`")]
    MissingField { product: String, field: String },
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("division by zero")]
    DivideByZero,
    #[error("non-finite arithmetic result")]
    NonFinite,
    #[error("{0}() over an empty table")]
    EmptyAggregate(&'static str),
    #[error("fact reference `{0}` is not allowed in a fact expression")]
    UnexpectedFactRef(String),
}

/// Per-fact failure recorded during evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub fact: String,
    pub message: String,
}

impl fmt::Display for Incident {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fact `{}` failed: {}", self.fact, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactEvaluation {
    pub values: BTreeMap<String, FactValue>,
    pub incidents: Vec<Incident>,
}

/// Evaluates every fact; failures are isolated to the failing fact.
pub fn evaluate_facts(facts: &[Fact], snapshot: &DataBlockSnapshot) -> FactEvaluation {
    let mut out = FactEvaluation::default();
    for fact in facts {
        let value = match eval_expr(&fact.expression, snapshot) {
            Ok(Value::Bool(b)) => Ok(b),
            Ok(other) => Err(EvalError::TypeMismatch(format!(
                "fact evaluated to a {}, expected boolean",
                other.type_name()
            ))),
            Err(e) => Err(e),
        };
        let fv = match value {
            Ok(b) => FactValue::from_bool(b),
            Err(e) => {
                out.incidents.push(Incident {
                    fact: fact.name.clone(),
                    message: e.to_string(),
                });
                FactValue::Failed
            }
        };
        out.values.insert(fact.name.clone(), fv);
    }
    out
}

fn lookup_payload<'a>(
    snapshot: &'a DataBlockSnapshot,
    product: &str,
) -> Result<&'a Payload, EvalError> {
    snapshot
        .payload(product)
        .ok_or_else(|| EvalError::MissingProduct(product.to_string()))
}

fn number(v: Value, what: &str) -> Result<f64, EvalError> {
    match v {
        Value::Number(n) => Ok(n),
        other => Err(EvalError::TypeMismatch(format!(
            "{what} expects a number, found a {}",
            other.type_name()
        ))),
    }
}

fn boolean(v: Value, what: &str) -> Result<bool, EvalError> {
    match v {
        Value::Bool(b) => Ok(b),
        other => Err(EvalError::TypeMismatch(format!(
            "{what} expects a boolean, found a {}",
            other.type_name()
        ))),
    }
}

fn finite(n: f64) -> Result<Value, EvalError> {
    if n.is_finite() {
        Ok(Value::Number(n))
    } else {
        Err(EvalError::NonFinite)
    }
}

fn aggregate(
    func: Aggregate,
    path: &ProductPath,
    snapshot: &DataBlockSnapshot,
) -> Result<Value, EvalError> {
    let rows = lookup_payload(snapshot, &path.product)?
        .as_table()
        .ok_or_else(|| {
            EvalError::TypeMismatch(format!(
                "{}() needs a table, `{}` is a record",
                func.name(),
                path.product
            ))
        })?;
    if func == Aggregate::Count {
        return Ok(Value::Number(rows.len() as f64));
    }
    if rows.is_empty() {
        return Err(EvalError::EmptyAggregate(func.name()));
    }
    let mut values = Vec::with_capacity(rows.len());
    for row in rows {
        let v = row
            .get(&path.field)
            .ok_or_else(|| EvalError::MissingField {
                product: path.product.clone(),
                field: path.field.clone(),
            })?;
        values.push(number(v.clone(), func.name())?);
    }
    let result = match func {
        Aggregate::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregate::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregate::Sum => values.iter().sum(),
        Aggregate::Avg => values.iter().sum::<f64>() / values.len() as f64,
        Aggregate::Count => unreachable!(),
    };
    finite(result)
}

/// Evaluates a fact expression against a snapshot.
pub fn eval_expr(expr: &Expr, snapshot: &DataBlockSnapshot) -> Result<Value, EvalError> {
    match expr {
        Expr::Literal(Literal::Number(n)) => Ok(Value::Number(*n)),
        Expr::Literal(Literal::Text(s)) => Ok(Value::Text(s.clone())),
        Expr::Literal(Literal::Bool(b)) => Ok(Value::Bool(*b)),
        Expr::FactRef(name) => Err(EvalError::UnexpectedFactRef(name.clone())),
        Expr::Path(path) => {
            let rec = lookup_payload(snapshot, &path.product)?
                .as_record()
                .ok_or_else(|| {
                    EvalError::TypeMismatch(format!(
                        "`{}` is a table; read it through an aggregate",
                        path.product
                    ))
                })?;
            rec.get(&path.field)
                .cloned()
                .ok_or_else(|| EvalError::MissingField {
                    product: path.product.clone(),
                    field: path.field.clone(),
                })
        }
        Expr::Aggregate { func, path } => aggregate(*func, path, snapshot),
        Expr::Unary {
            op: UnaryOp::Not,
            operand,
        } => Ok(Value::Bool(!boolean(
            eval_expr(operand, snapshot)?,
            "`not`",
        )?)),
        Expr::Unary {
            op: UnaryOp::Negate,
            operand,
        } => Ok(Value::Number(-number(
            eval_expr(operand, snapshot)?,
            "unary `-`",
        )?)),
        Expr::Binary { op, lhs, rhs } => {
            let what = format!("`{}`", op.symbol());
            match op {
                BinaryOp::And | BinaryOp::Or => {
                    let l = boolean(eval_expr(lhs, snapshot)?, &what)?;
                    // short-circuit: the right operand is not evaluated when the left decides
                    if (*op == BinaryOp::And && !l) || (*op == BinaryOp::Or && l) {
                        return Ok(Value::Bool(l));
                    }
                    Ok(Value::Bool(boolean(eval_expr(rhs, snapshot)?, &what)?))
                }
                BinaryOp::Eq | BinaryOp::Ne => {
                    let l = eval_expr(lhs, snapshot)?;
                    let r = eval_expr(rhs, snapshot)?;
                    let equal = match (&l, &r) {
                        (Value::Number(a), Value::Number(b)) => a == b,
                        (Value::Text(a), Value::Text(b)) => a == b,
                        (Value::Bool(a), Value::Bool(b)) => a == b,
                        _ => {
                            return Err(EvalError::TypeMismatch(format!(
                                "{what} between a {} and a {}",
                                l.type_name(),
                                r.type_name()
                            )))
                        }
                    };
                    Ok(Value::Bool(if *op == BinaryOp::Eq {
                        equal
                    } else {
                        !equal
                    }))
                }
                _ => {
                    let l = number(eval_expr(lhs, snapshot)?, &what)?;
                    let r = number(eval_expr(rhs, snapshot)?, &what)?;
                    match op {
                        BinaryOp::Lt => Ok(Value::Bool(l < r)),
                        BinaryOp::Le => Ok(Value::Bool(l <= r)),
                        BinaryOp::Gt => Ok(Value::Bool(l > r)),
                        BinaryOp::Ge => Ok(Value::Bool(l >= r)),
                        BinaryOp::Add => finite(l + r),
                        BinaryOp::Sub => finite(l - r),
                        BinaryOp::Mul => finite(l * r),
                        BinaryOp::Div => {
                            if r == 0.0 {
                                Err(EvalError::DivideByZero)
                            } else {
                                finite(l / r)
                            }
                        }
                        _ => unreachable!("logical and equality handled above"),
                    }
                }
            }
        }
    }
}

/// Static type used by the load-time checker. `Dynamic` is a product field
/// whose type is only known at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ty {
    Bool,
    Number,
    Text,
    Dynamic,
}

impl Ty {
    fn name(self) -> &'static str {
        match self {
            Ty::Bool => "boolean",
            Ty::Number => "number",
            Ty::Text => "string",
            Ty::Dynamic => "dynamic",
        }
    }

    fn admits(self, want: Ty) -> bool {
        self == Ty::Dynamic || self == want
    }
}

fn infer(expr: &Expr) -> Result<Ty, String> {
    let expect = |e: &Expr, want: Ty, ctx: &str| -> Result<(), String> {
        let t = infer(e)?;
        if t.admits(want) {
            Ok(())
        } else {
            Err(format!(
                "{ctx} expects a {}, but `{e}` is a {}",
                want.name(),
                t.name()
            ))
        }
    };
    Ok(match expr {
        Expr::Literal(Literal::Number(_)) => Ty::Number,
        Expr::Literal(Literal::Text(_)) => Ty::Text,
        Expr::Literal(Literal::Bool(_)) | Expr::FactRef(_) => Ty::Bool,
        Expr::Path(_) => Ty::Dynamic,
        Expr::Aggregate { .. } => Ty::Number,
        Expr::Unary {
            op: UnaryOp::Not,
            operand,
        } => {
            expect(operand, Ty::Bool, "`not`")?;
            Ty::Bool
        }
        Expr::Unary {
            op: UnaryOp::Negate,
            operand,
        } => {
            expect(operand, Ty::Number, "unary `-`")?;
            Ty::Number
        }
        Expr::Binary { op, lhs, rhs } => {
            let ctx = format!("`{}`", op.symbol());
            if op.is_logical() {
                expect(lhs, Ty::Bool, &ctx)?;
                expect(rhs, Ty::Bool, &ctx)?;
                Ty::Bool
            } else if matches!(op, BinaryOp::Eq | BinaryOp::Ne) {
                let (l, r) = (infer(lhs)?, infer(rhs)?);
                if l != Ty::Dynamic && r != Ty::Dynamic && l != r {
                    return Err(format!(
                        "{ctx} compares a {} with a {} in `{expr}`",
                        l.name(),
                        r.name()
                    ));
                }
                Ty::Bool
            } else {
                expect(lhs, Ty::Number, &ctx)?;
                expect(rhs, Ty::Number, &ctx)?;
                if op.is_comparison() {
                    Ty::Bool
                } else {
                    Ty::Number
                }
            }
        }
    })
}

/// Load-time checks for a fact expression: no bare identifiers, and the
/// expression can produce a boolean.
pub fn check_fact_expression(expr: &Expr) -> Result<(), String> {
    if let Some(name) = expr.fact_refs().first() {
        return Err(format!(
            "bare identifier `{name}` in a fact expression; facts read `<product>.<field>` paths"
        ));
    }
    match infer(expr)? {
        Ty::Bool | Ty::Dynamic => Ok(()),
        t => Err(format!(
            "fact expression is a {}, expected boolean",
            t.name()
        )),
    }
}

/// Load-time checks for a rule condition: fact names, boolean literals and
/// `and`/`or`/`not` only.
pub fn check_rule_condition(expr: &Expr) -> Result<(), String> {
    let mut problem: Option<String> = None;
    expr.walk(&mut |e| {
        if problem.is_some() {
            return;
        }
        problem = match e {
            Expr::Path(p) | Expr::Aggregate { path: p, .. } => Some(format!(
                "product path `{p}` in a rule condition; rules read fact names only"
            )),
            Expr::Literal(Literal::Number(_) | Literal::Text(_)) => {
                Some(format!("literal `{e}` in a rule condition"))
            }
            Expr::Unary {
                op: UnaryOp::Negate,
                ..
            } => Some("arithmetic in a rule condition".into()),
            Expr::Binary { op, .. } if !op.is_logical() => {
                Some(format!("operator `{}` in a rule condition", op.symbol()))
            }
            _ => None,
        };
    });
    problem.map_or(Ok(()), Err)
}
