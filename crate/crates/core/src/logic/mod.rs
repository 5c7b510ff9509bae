//! Rule-based forward-chaining logic engine.
//!
//! Facts are named boolean expressions over product paths; rules are
//! conditions over fact names that trigger publisher actions and may derive
//! new facts for later rules.

mod ast;
mod chain;
mod eval;
mod parser;

use std::fmt;

use thiserror::Error;

pub use ast::{Aggregate, BinaryOp, Expr, Literal, ProductPath, UnaryOp, MAX_DEPTH};
pub use chain::{forward_chain, EvaluationResult};
pub use eval::{
    check_fact_expression, check_rule_condition, eval_expr, evaluate_facts, EvalError,
    FactEvaluation, FactValue, Incident,
};
pub use parser::{parse_expression, ParseError};

/// An expression that failed to load, attributed to its fact or rule.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ExpressionError {
    pub entity: String,
    pub text: String,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ExpressionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.entity, self.message)?;
        if let Some(col) = self.column {
            write!(f, " (column {col} of \"{}\")", self.text)?;
        }
        Ok(())
    }
}

impl ExpressionError {
    fn new(entity: &str, text: &str, column: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            entity: entity.to_string(),
            text: text.to_string(),
            column,
            message: message.into(),
        }
    }

    fn from_parse(entity: &str, text: &str, err: ParseError) -> Self {
        Self::new(entity, text, Some(err.column()), err.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fact {
    pub name: String,
    pub text: String,
    pub expression: Expr,
}

impl Fact {
    /// Parses and checks a fact expression.
    pub fn new(name: &str, text: &str) -> Result<Self, ExpressionError> {
        let expression =
            parse_expression(text).map_err(|e| ExpressionError::from_parse(name, text, e))?;
        check_fact_expression(&expression)
            .map_err(|m| ExpressionError::new(name, text, None, m))?;
        Ok(Self {
            name: name.to_string(),
            text: text.to_string(),
            expression,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub name: String,
    pub text: String,
    pub condition: Expr,
    pub actions: Vec<String>,
    pub new_facts: Vec<String>,
}

impl Rule {
    pub fn new(
        name: &str,
        text: &str,
        actions: Vec<String>,
        new_facts: Vec<String>,
    ) -> Result<Self, ExpressionError> {
        let condition =
            parse_expression(text).map_err(|e| ExpressionError::from_parse(name, text, e))?;
        check_rule_condition(&condition).map_err(|m| ExpressionError::new(name, text, None, m))?;
        Ok(Self {
            name: name.to_string(),
            text: text.to_string(),
            condition,
            actions,
            new_facts,
        })
    }
}
