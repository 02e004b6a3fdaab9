//! Study-set predicates.
//!
//! ```text
//! expr   := or
//! or     := and ("OR" and)*
//! and    := unary ("AND" unary)*
//! unary  := "NOT" unary | "(" expr ")" | cmp
//! cmp    := TAG ("=" | "!=" | ">=" | "<=") VALUE
//! ```
//!
//! `VALUE` is a bare word or a double-quoted string. `Age` compares as an
//! integer and `StudyDate` as a calendar date; every other tag compares as
//! text. A record lacking the tag, or whose value does not parse for a typed
//! tag, fails the comparison.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use thiserror::Error;

use super::ImageRecord;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PredicateError {
    #[error("predicate syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Ge,
    Le,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Ge => ">=",
            CmpOp::Le => "<=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Ge => ord != Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Predicate {
    Cmp {
        tag: String,
        op: CmpOp,
        value: String,
    },
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
    Not(Box<Predicate>),
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y%m%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%Y-%m-%d"))
        .ok()
}

/// Compares a header value against a predicate literal under the tag's type.
pub fn compare_tag(tag: &str, lhs: &str, rhs: &str) -> Option<Ordering> {
    match tag {
        "Age" => Some(
            lhs.trim()
                .parse::<i64>()
                .ok()?
                .cmp(&rhs.trim().parse::<i64>().ok()?),
        ),
        "StudyDate" => Some(parse_date(lhs)?.cmp(&parse_date(rhs)?)),
        _ => Some(lhs.cmp(rhs)),
    }
}

impl Predicate {
    pub fn cmp(tag: impl Into<String>, op: CmpOp, value: impl Into<String>) -> Self {
        Predicate::Cmp {
            tag: tag.into(),
            op,
            value: value.into(),
        }
    }

    pub fn and(self, other: Predicate) -> Self {
        Predicate::And(Box::new(self), Box::new(other))
    }

    pub fn or(self, other: Predicate) -> Self {
        Predicate::Or(Box::new(self), Box::new(other))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Predicate::Not(Box::new(self))
    }

    pub fn matches(&self, record: &ImageRecord) -> bool {
        match self {
            Predicate::Cmp { tag, op, value } => record
                .header
                .get(tag)
                .and_then(|v| compare_tag(tag, v, value))
                .is_some_and(|ord| op.holds(ord)),
            Predicate::And(a, b) => a.matches(record) && b.matches(record),
            Predicate::Or(a, b) => a.matches(record) || b.matches(record),
            Predicate::Not(a) => !a.matches(record),
        }
    }

    pub fn tags(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_tags(&mut out);
        out
    }

    fn collect_tags<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Predicate::Cmp { tag, .. } => {
                out.insert(tag);
            }
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                a.collect_tags(out);
                b.collect_tags(out);
            }
            Predicate::Not(a) => a.collect_tags(out),
        }
    }
}

fn needs_quotes(v: &str) -> bool {
    v.is_empty()
        || matches!(v, "AND" | "OR" | "NOT")
        || v.chars()
            .any(|c| c.is_whitespace() || "()=!<>\"\\".contains(c))
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Cmp { tag, op, value } => {
                if needs_quotes(value) {
                    let escaped = value.replace('\\', "\\\\").replace('"', "\\\"");
                    write!(f, "{tag} {} \"{escaped}\"", op.symbol())
                } else {
                    write!(f, "{tag} {} {value}", op.symbol())
                }
            }
            Predicate::And(a, b) => write!(f, "({a} AND {b})"),
            Predicate::Or(a, b) => write!(f, "({a} OR {b})"),
            Predicate::Not(a) => write!(f, "NOT {a}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Op(CmpOp),
    LParen,
    RParen,
}

fn tokenize(s: &str) -> Result<Vec<(usize, Tok)>, PredicateError> {
    let err = |offset, message: &str| PredicateError::Syntax {
        offset,
        message: message.to_string(),
    };
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                toks.push((pos, Tok::LParen));
                i += 1;
            }
            ')' => {
                toks.push((pos, Tok::RParen));
                i += 1;
            }
            '=' => {
                toks.push((pos, Tok::Op(CmpOp::Eq)));
                i += 1;
            }
            '!' | '>' | '<' => {
                if chars.get(i + 1).map(|x| x.1) != Some('=') {
                    return Err(err(pos, "expected `=` after comparison character"));
                }
                let op = match c {
                    '!' => CmpOp::Ne,
                    '>' => CmpOp::Ge,
                    _ => CmpOp::Le,
                };
                toks.push((pos, Tok::Op(op)));
                i += 2;
            }
            '"' => {
                let mut v = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(err(pos, "unterminated string")),
                        Some((_, '"')) => {
                            i += 1;
                            break;
                        }
                        Some((_, '\\')) => {
                            let Some((_, next)) = chars.get(i + 1) else {
                                return Err(err(pos, "unterminated string"));
                            };
                            v.push(*next);
                            i += 2;
                        }
                        Some((_, ch)) => {
                            v.push(*ch);
                            i += 1;
                        }
                    }
                }
                toks.push((pos, Tok::Quoted(v)));
            }
            _ => {
                let mut w = String::new();
                while let Some((_, ch)) = chars.get(i) {
                    if ch.is_whitespace() || "()=!<>\"".contains(*ch) {
                        break;
                    }
                    w.push(*ch);
                    i += 1;
                }
                toks.push((pos, Tok::Word(w)));
            }
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T, PredicateError> {
        Err(PredicateError::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Word(w)) if w == kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn or(&mut self) -> Result<Predicate, PredicateError> {
        let mut lhs = self.and()?;
        while self.keyword("OR") {
            lhs = lhs.or(self.and()?);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Predicate, PredicateError> {
        let mut lhs = self.unary()?;
        while self.keyword("AND") {
            lhs = lhs.and(self.unary()?);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Predicate, PredicateError> {
        if self.keyword("NOT") {
            return Ok(self.unary()?.not());
        }
        match self.peek().cloned() {
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.or()?;
                if self.peek() != Some(&Tok::RParen) {
                    return self.fail("expected `)`");
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(Tok::Word(tag)) if !matches!(tag.as_str(), "AND" | "OR") => {
                self.pos += 1;
                let Some(Tok::Op(op)) = self.peek().cloned() else {
                    return self.fail(format!("expected comparison operator after `{tag}`"));
                };
                self.pos += 1;
                let value = match self.peek().cloned() {
                    Some(Tok::Word(v)) if !matches!(v.as_str(), "AND" | "OR" | "NOT") => v,
                    Some(Tok::Quoted(v)) => v,
                    _ => return self.fail("expected a value"),
                };
                self.pos += 1;
                Ok(Predicate::cmp(tag, op, value))
            }
            Some(_) => self.fail("expected a comparison, `NOT` or `(`"),
            None => self.fail("unexpected end of predicate"),
        }
    }
}

impl FromStr for Predicate {
    type Err = PredicateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser {
            toks: tokenize(s)?,
            pos: 0,
            end: s.len(),
        };
        let pred = p.or()?;
        if p.pos != p.toks.len() {
            return p.fail("trailing input");
        }
        Ok(pred)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::tests::rec;

    #[test]
    fn precedence_not_and_or() {
        let p: Predicate = "NOT A = 1 AND B = 2 OR C = 3".parse().unwrap();
        let want = Predicate::cmp("A", CmpOp::Eq, "1")
            .not()
            .and(Predicate::cmp("B", CmpOp::Eq, "2"))
            .or(Predicate::cmp("C", CmpOp::Eq, "3"));
        assert_eq!(p, want);
    }

    #[test]
    fn quoted_values_and_display_round_trip() {
        let p: Predicate = r#"PatientName = "Doe, J" AND (Modality != CT)"#.parse().unwrap();
        let again: Predicate = p.to_string().parse().unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn syntax_errors() {
        for bad in [
            "",
            "Age >",
            "Age > 3",
            "(Age = 1",
            "Age = 1 Modality = MR",
            "AND = 3",
            "Age = \"x",
        ] {
            assert!(
                matches!(bad.parse::<Predicate>(), Err(PredicateError::Syntax { .. })),
                "{bad:?} should not parse"
            );
        }
    }

    #[test]
    fn typed_comparisons() {
        let r = rec(
            "i",
            &[("Age", "9"), ("StudyDate", "20210405"), ("Modality", "MR")],
        );
        // numeric: 9 < 10 although "9" > "10" lexically
        assert!("Age <= 10".parse::<Predicate>().unwrap().matches(&r));
        assert!("Age = 09".parse::<Predicate>().unwrap().matches(&r));
        assert!("StudyDate >= 2021-01-01"
            .parse::<Predicate>()
            .unwrap()
            .matches(&r));
        assert!(!"StudyDate <= 20201231"
            .parse::<Predicate>()
            .unwrap()
            .matches(&r));
        assert!("Modality >= MA".parse::<Predicate>().unwrap().matches(&r));
    }

    #[test]
    fn missing_tag_fails_every_comparison() {
        let r = rec("i", &[]);
        for q in ["Age = 1", "Age != 1", "Modality >= A"] {
            assert!(!q.parse::<Predicate>().unwrap().matches(&r));
        }
        assert!("NOT Age = 1".parse::<Predicate>().unwrap().matches(&r));
    }
}
