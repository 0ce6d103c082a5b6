//! Arithmetic formulas over named operands, evaluated in exact decimal.
//!
//! Grammar: `+ - * /`, parentheses, unary minus, numeric literals
//! (optionally suffixed with `%`, meaning /100) and identifiers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rust_decimal::Decimal;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormulaError {
    #[error("unexpected character {0:?} at offset {1}")]
    BadChar(char, usize),
    #[error("malformed number {0:?}")]
    BadNumber(String),
    #[error("unexpected end of formula")]
    UnexpectedEnd,
    #[error("unexpected token {0}")]
    UnexpectedToken(String),
    #[error("empty formula")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("operand {0} has no value")]
    UnboundOperand(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("arithmetic overflow")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Num(Decimal),
    Ident(String),
    Op(char),
    Open,
    Close,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(d) => write!(f, "{d}"),
            Token::Ident(s) => f.write_str(s),
            Token::Op(c) => write!(f, "{c}"),
            Token::Open => f.write_str("("),
            Token::Close => f.write_str(")"),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<Token>, FormulaError> {
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '+' | '-' | '*' | '/' => {
                tokens.push(Token::Op(c));
                i += 1;
            }
            '×' => {
                tokens.push(Token::Op('*'));
                i += 1;
            }
            '÷' => {
                tokens.push(Token::Op('/'));
                i += 1;
            }
            '(' => {
                tokens.push(Token::Open);
                i += 1;
            }
            ')' => {
                tokens.push(Token::Close);
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().map(|(_, c)| c).collect();
                let mut value = Decimal::from_str(&text).map_err(|_| FormulaError::BadNumber(text.clone()))?;
                if i < chars.len() && chars[i].1 == '%' {
                    value /= Decimal::ONE_HUNDRED;
                    i += 1;
                }
                tokens.push(Token::Num(value));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_alphanumeric() || chars[i].1 == '_') {
                    i += 1;
                }
                tokens.push(Token::Ident(chars[start..i].iter().map(|(_, c)| c).collect()));
            }
            other => return Err(FormulaError::BadChar(other, pos)),
        }
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Expr {
    Num(Decimal),
    Var(String),
    Neg(Box<Expr>),
    Bin(char, Box<Expr>, Box<Expr>),
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr, FormulaError> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, FormulaError> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, FormulaError> {
        match self.peek() {
            Some(Token::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Token::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Expr, FormulaError> {
        match self.next() {
            Some(Token::Num(d)) => Ok(Expr::Num(d)),
            Some(Token::Ident(s)) => Ok(Expr::Var(s)),
            Some(Token::Open) => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Token::Close) => Ok(inner),
                    Some(t) => Err(FormulaError::UnexpectedToken(t.to_string())),
                    None => Err(FormulaError::UnexpectedEnd),
                }
            }
            Some(t) => Err(FormulaError::UnexpectedToken(t.to_string())),
            None => Err(FormulaError::UnexpectedEnd),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    source: String,
    expr: Expr,
}

impl Formula {
    pub fn parse(src: &str) -> Result<Self, FormulaError> {
        let tokens = tokenize(src)?;
        if tokens.is_empty() {
            return Err(FormulaError::Empty);
        }
        let mut p = Parser { tokens, pos: 0 };
        let expr = p.expr()?;
        if let Some(t) = p.peek() {
            return Err(FormulaError::UnexpectedToken(t.to_string()));
        }
        Ok(Self {
            source: src.trim().to_string(),
            expr,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn operands(&self) -> BTreeSet<String> {
        fn walk(e: &Expr, out: &mut BTreeSet<String>) {
            match e {
                Expr::Num(_) => {}
                Expr::Var(v) => {
                    out.insert(v.clone());
                }
                Expr::Neg(x) => walk(x, out),
                Expr::Bin(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.expr, &mut out);
        out
    }

    pub fn eval(&self, env: &BTreeMap<String, Decimal>) -> Result<Decimal, EvalError> {
        fn go(e: &Expr, env: &BTreeMap<String, Decimal>) -> Result<Decimal, EvalError> {
            match e {
                Expr::Num(d) => Ok(*d),
                Expr::Var(v) => env.get(v).copied().ok_or_else(|| EvalError::UnboundOperand(v.clone())),
                Expr::Neg(x) => Ok(-go(x, env)?),
                Expr::Bin(op, a, b) => {
                    let (a, b) = (go(a, env)?, go(b, env)?);
                    match op {
                        '+' => a.checked_add(b).ok_or(EvalError::Overflow),
                        '-' => a.checked_sub(b).ok_or(EvalError::Overflow),
                        '*' => a.checked_mul(b).ok_or(EvalError::Overflow),
                        _ => {
                            if b.is_zero() {
                                Err(EvalError::DivisionByZero)
                            } else {
                                a.checked_div(b).ok_or(EvalError::Overflow)
                            }
                        }
                    }
                }
            }
        }
        go(&self.expr, env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    fn env(pairs: &[(&str, &str)]) -> BTreeMap<String, Decimal> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), Decimal::from_str(v).unwrap()))
            .collect()
    }

    #[test]
    fn percentage_of_population() {
        let f = Formula::parse("0.12 * population").unwrap();
        assert_eq!(f.operands().into_iter().collect::<Vec<_>>(), vec!["population"]);
        assert_eq!(f.eval(&env(&[("population", "4000000")])).unwrap(), d("480000"));
        let f = Formula::parse("12% × population").unwrap();
        assert_eq!(f.eval(&env(&[("population", "4000000")])).unwrap(), d("480000"));
    }

    #[test]
    fn precedence_and_unary() {
        let f = Formula::parse("-(a + 2) * 3 - b / 4").unwrap();
        assert_eq!(f.eval(&env(&[("a", "1"), ("b", "8")])).unwrap(), d("-11"));
        assert_eq!(Formula::parse("2+3*4").unwrap().eval(&BTreeMap::new()).unwrap(), d("14"));
        assert_eq!(Formula::parse("(2+3)*4").unwrap().eval(&BTreeMap::new()).unwrap(), d("20"));
    }

    #[test]
    fn exact_decimal_arithmetic() {
        let f = Formula::parse("0.1 + 0.2").unwrap();
        assert_eq!(f.eval(&BTreeMap::new()).unwrap(), d("0.3"));
    }

    #[test]
    fn errors() {
        assert_eq!(Formula::parse(""), Err(FormulaError::Empty));
        assert!(matches!(Formula::parse("a +"), Err(FormulaError::UnexpectedEnd)));
        assert!(matches!(Formula::parse("(a"), Err(FormulaError::UnexpectedEnd)));
        assert!(matches!(Formula::parse("a b"), Err(FormulaError::UnexpectedToken(_))));
        assert!(matches!(Formula::parse("import os"), Err(FormulaError::UnexpectedToken(_))));
        assert!(matches!(Formula::parse("a; b"), Err(FormulaError::BadChar(';', 1))));
        assert!(matches!(Formula::parse("1.2.3"), Err(FormulaError::BadNumber(_))));
        let f = Formula::parse("a / (b - b)").unwrap();
        assert_eq!(f.eval(&env(&[("a", "1"), ("b", "2")])), Err(EvalError::DivisionByZero));
        assert_eq!(
            Formula::parse("x").unwrap().eval(&BTreeMap::new()),
            Err(EvalError::UnboundOperand("x".into()))
        );
    }
}
