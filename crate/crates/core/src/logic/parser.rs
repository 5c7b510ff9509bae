//! Recursive-descent parser for fact and rule expressions.
//!
//! ```text
//! expr    := or
//! or      := and ("or" and)*
//! and     := not ("and" not)*
//! not     := "not" not | cmp
//! cmp     := sum (("<"|"<="|">"|">="|"=="|"!=") sum)?
//! sum     := prod (("+"|"-") prod)*
//! prod    := unary (("*"|"/") unary)*
//! unary   := "-" unary | primary
//! primary := NUMBER | STRING | "true" | "false" | IDENT ("." IDENT)*
//!          | AGG "(" path ")" | "(" expr ")"
//! ```
//!
//! A bare identifier is a fact reference and `a.b` is a product path. Errors
//! carry a 1-based character column; errors at end of input point at the
//! last non-blank character.

use thiserror::Error;

use super::ast::{Aggregate, BinaryOp, Expr, Literal, ProductPath, UnaryOp, MAX_DEPTH};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },
    #[error("expression nesting exceeds {MAX_DEPTH} levels at column {column}")]
    DepthExceeded { column: usize },
}

impl ParseError {
    pub fn column(&self) -> usize {
        match self {
            ParseError::Syntax { column, .. } | ParseError::DepthExceeded { column } => *column,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number(f64),
    Text(String),
    Ident(String),
    And,
    Or,
    Not,
    True,
    False,
    Dot,
    LParen,
    RParen,
    Op(BinaryOp),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Number(n) => format!("number {n}"),
            Tok::Text(_) => "string literal".into(),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::And => "`and`".into(),
            Tok::Or => "`or`".into(),
            Tok::Not => "`not`".into(),
            Tok::True => "`true`".into(),
            Tok::False => "`false`".into(),
            Tok::Dot => "`.`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Op(op) => format!("`{}`", op.symbol()),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    column: usize,
}

fn syntax(column: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        column,
        message: message.into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let next = chars.get(i + 1).copied();
        let (tok, len) = match c {
            '(' => (Tok::LParen, 1),
            ')' => (Tok::RParen, 1),
            '.' if !next.is_some_and(|n| n.is_ascii_digit()) => (Tok::Dot, 1),
            '+' => (Tok::Op(BinaryOp::Add), 1),
            '-' => (Tok::Op(BinaryOp::Sub), 1),
            '*' => (Tok::Op(BinaryOp::Mul), 1),
            '/' => (Tok::Op(BinaryOp::Div), 1),
            '<' if next == Some('=') => (Tok::Op(BinaryOp::Le), 2),
            '<' => (Tok::Op(BinaryOp::Lt), 1),
            '>' if next == Some('=') => (Tok::Op(BinaryOp::Ge), 2),
            '>' => (Tok::Op(BinaryOp::Gt), 1),
            '=' if next == Some('=') => (Tok::Op(BinaryOp::Eq), 2),
            '!' if next == Some('=') => (Tok::Op(BinaryOp::Ne), 2),
            '"' => {
                let mut s = String::new();
                let mut j = i + 1;
                loop {
                    match chars.get(j) {
                        None => return Err(syntax(column, "unterminated string literal")),
                        Some('"') => break,
                        Some('\\') => {
                            let esc = match chars.get(j + 1) {
                                Some('"') => '"',
                                Some('\\') => '\\',
                                Some('n') => '\n',
                                Some('t') => '\t',
                                _ => return Err(syntax(j + 1, "invalid escape in string literal")),
                            };
                            s.push(esc);
                            j += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            j += 1;
                        }
                    }
                }
                (Tok::Text(s), j + 1 - i)
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut j = i;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
                if j < chars.len() && chars[j] == '.' {
                    j += 1;
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                }
                if j < chars.len() && (chars[j] == 'e' || chars[j] == 'E') {
                    let mut k = j + 1;
                    if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                        k += 1;
                    }
                    if k < chars.len() && chars[k].is_ascii_digit() {
                        while k < chars.len() && chars[k].is_ascii_digit() {
                            k += 1;
                        }
                        j = k;
                    }
                }
                let lexeme: String = chars[i..j].iter().collect();
                let n: f64 = lexeme
                    .parse()
                    .map_err(|_| syntax(column, format!("invalid number `{lexeme}`")))?;
                if !n.is_finite() {
                    return Err(syntax(column, format!("number `{lexeme}` is out of range")));
                }
                (Tok::Number(n), j - i)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                let word: String = chars[i..j].iter().collect();
                let tok = match word.as_str() {
                    "and" => Tok::And,
                    "or" => Tok::Or,
                    "not" => Tok::Not,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    _ => Tok::Ident(word),
                };
                (tok, j - i)
            }
            other => return Err(syntax(column, format!("unexpected character `{other}`"))),
        };
        out.push(Spanned { tok, column });
        i += len;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    end_column: usize,
    nesting: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn column(&self) -> usize {
        self.toks
            .get(self.pos)
            .map_or(self.end_column, |s| s.column)
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        match self.toks.get(self.pos) {
            Some(s) => syntax(
                s.column,
                format!("expected {expected}, found {}", s.tok.describe()),
            ),
            None => syntax(
                self.end_column,
                format!("expected {expected}, found end of input"),
            ),
        }
    }

    fn bump(&mut self) -> Option<Spanned> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn node(&self, column: usize, e: Expr) -> Result<Expr, ParseError> {
        if e.depth() > MAX_DEPTH {
            Err(ParseError::DepthExceeded { column })
        } else {
            Ok(e)
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.nesting += 1;
        if self.nesting > MAX_DEPTH {
            Err(ParseError::DepthExceeded {
                column: self.column(),
            })
        } else {
            Ok(())
        }
    }

    fn binary(
        &self,
        column: usize,
        op: BinaryOp,
        lhs: Expr,
        rhs: Expr,
    ) -> Result<Expr, ParseError> {
        self.node(
            column,
            Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            },
        )
    }

    fn parse_or(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_and()?;
        while self.peek() == Some(&Tok::Or) {
            let col = self.column();
            self.pos += 1;
            let rhs = self.parse_and()?;
            lhs = self.binary(col, BinaryOp::Or, lhs, rhs)?;
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_not()?;
        while self.peek() == Some(&Tok::And) {
            let col = self.column();
            self.pos += 1;
            let rhs = self.parse_not()?;
            lhs = self.binary(col, BinaryOp::And, lhs, rhs)?;
        }
        Ok(lhs)
    }

    fn parse_not(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(&Tok::Not) {
            let col = self.column();
            self.pos += 1;
            self.enter()?;
            let operand = self.parse_not()?;
            self.nesting -= 1;
            return self.node(
                col,
                Expr::Unary {
                    op: UnaryOp::Not,
                    operand: Box::new(operand),
                },
            );
        }
        self.parse_cmp()
    }

    fn parse_cmp(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.parse_sum()?;
        if let Some(Tok::Op(op)) = self.peek() {
            let op = *op;
            if op.is_comparison() {
                let col = self.column();
                self.pos += 1;
                let rhs = self.parse_sum()?;
                return self.binary(col, op, lhs, rhs);
            }
        }
        Ok(lhs)
    }

    fn parse_sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_prod()?;
        while let Some(Tok::Op(op @ (BinaryOp::Add | BinaryOp::Sub))) = self.peek() {
            let op = *op;
            let col = self.column();
            self.pos += 1;
            let rhs = self.parse_prod()?;
            lhs = self.binary(col, op, lhs, rhs)?;
        }
        Ok(lhs)
    }

    fn parse_prod(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_unary()?;
        while let Some(Tok::Op(op @ (BinaryOp::Mul | BinaryOp::Div))) = self.peek() {
            let op = *op;
            let col = self.column();
            self.pos += 1;
            let rhs = self.parse_unary()?;
            lhs = self.binary(col, op, lhs, rhs)?;
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(&Tok::Op(BinaryOp::Sub)) {
            let col = self.column();
            self.pos += 1;
            self.enter()?;
            let operand = self.parse_unary()?;
            self.nesting -= 1;
            return self.node(
                col,
                Expr::Unary {
                    op: UnaryOp::Negate,
                    operand: Box::new(operand),
                },
            );
        }
        self.parse_primary()
    }

    fn parse_path_tail(&mut self, head: String, column: usize) -> Result<Vec<String>, ParseError> {
        let mut segments = vec![head];
        while self.eat(&Tok::Dot) {
            match self.bump() {
                Some(Spanned {
                    tok: Tok::Ident(s), ..
                }) => segments.push(s),
                _ => {
                    self.pos -= 1;
                    return Err(self.unexpected("field name after `.`"));
                }
            }
        }
        if segments.len() > 2 {
            return Err(syntax(column, "paths have the form <product>.<field>"));
        }
        Ok(segments)
    }

    fn parse_primary(&mut self) -> Result<Expr, ParseError> {
        let Some(Spanned { tok, column }) = self.bump() else {
            return Err(self.unexpected("an operand"));
        };
        match tok {
            Tok::Number(n) => Ok(Expr::Literal(Literal::Number(n))),
            Tok::Text(s) => Ok(Expr::Literal(Literal::Text(s))),
            Tok::True => Ok(Expr::Literal(Literal::Bool(true))),
            Tok::False => Ok(Expr::Literal(Literal::Bool(false))),
            Tok::LParen => {
                self.enter()?;
                let inner = self.parse_or()?;
                self.nesting -= 1;
                if !self.eat(&Tok::RParen) {
                    return Err(self.unexpected("`)`"));
                }
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(func) = Aggregate::from_name(&name) {
                    if self.eat(&Tok::LParen) {
                        let path = match self.bump() {
                            Some(Spanned {
                                tok: Tok::Ident(head),
                                column,
                            }) => self.parse_path_tail(head, column)?,
                            _ => {
                                self.pos -= 1;
                                return Err(self.unexpected("a <product>.<field> path"));
                            }
                        };
                        if path.len() != 2 {
                            return Err(syntax(
                                column,
                                format!("{name}() takes a <product>.<field> path"),
                            ));
                        }
                        if !self.eat(&Tok::RParen) {
                            return Err(self.unexpected("`)`"));
                        }
                        let mut it = path.into_iter();
                        return Ok(Expr::Aggregate {
                            func,
                            path: ProductPath {
                                product: it.next().unwrap_or_default(),
                                field: it.next().unwrap_or_default(),
                            },
                        });
                    }
                }
                let mut segments = self.parse_path_tail(name, column)?.into_iter();
                let head = segments.next().unwrap_or_default();
                Ok(match segments.next() {
                    Some(field) => Expr::Path(ProductPath {
                        product: head,
                        field,
                    }),
                    None => Expr::FactRef(head),
                })
            }
            _ => {
                self.pos -= 1;
                Err(self.unexpected("an operand"))
            }
        }
    }
}

/// Parses expression text into an AST.
pub fn parse_expression(text: &str) -> Result<Expr, ParseError> {
    let toks = tokenize(text)?;
    let end_column = text
        .chars()
        .enumerate()
        .filter(|(_, c)| !c.is_whitespace())
        .last()
        .map_or(1, |(i, _)| i + 1);
    if toks.is_empty() {
        return Err(syntax(end_column, "empty expression"));
    }
    let mut p = Parser {
        toks,
        pos: 0,
        end_column,
        nesting: 0,
    };
    let expr = p.parse_or()?;
    if p.pos < p.toks.len() {
        return Err(p.unexpected("an operator or end of input"));
    }
    Ok(expr)
}
