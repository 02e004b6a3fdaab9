//! Actor command templates.
//!
//! A template is a shell-style command line. Words may contain `{in:PORT}`,
//! `{out:PORT}` and `{param:NAME}` placeholders; `{{` and `}}` are literal
//! braces. Expansion happens per word after shell-style splitting, so a word
//! that is exactly one list-valued input placeholder becomes several
//! arguments.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Input(String),
    Output(String),
    Param(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unterminated placeholder in `{0}`")]
    Unterminated(String),
    #[error("unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
    #[error("stray `}}` in `{0}`")]
    StrayBrace(String),
    #[error("command is not valid shell syntax: {0}")]
    Split(String),
    #[error("command is empty")]
    Empty,
    #[error("no binding for {kind} `{name}`")]
    Unbound { kind: &'static str, name: String },
}

pub fn parse_word(word: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut out = Vec::new();
    let mut text = String::new();
    let mut chars = word.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                text.push('}');
            }
            '}' => return Err(TemplateError::StrayBrace(word.to_string())),
            '{' => {
                let mut inner = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) => inner.push(ch),
                        None => return Err(TemplateError::Unterminated(word.to_string())),
                    }
                }
                if !text.is_empty() {
                    out.push(Segment::Text(std::mem::take(&mut text)));
                }
                let seg = match inner.split_once(':') {
                    Some(("in", p)) if !p.is_empty() => Segment::Input(p.to_string()),
                    Some(("out", p)) if !p.is_empty() => Segment::Output(p.to_string()),
                    Some(("param", p)) if !p.is_empty() => Segment::Param(p.to_string()),
                    _ => return Err(TemplateError::UnknownPlaceholder(inner)),
                };
                out.push(seg);
            }
            _ => text.push(c),
        }
    }
    if !text.is_empty() {
        out.push(Segment::Text(text));
    }
    Ok(out)
}

/// Splits and parses a whole template.
pub fn parse(template: &str) -> Result<Vec<Vec<Segment>>, TemplateError> {
    let words = shell_words::split(template).map_err(|e| TemplateError::Split(e.to_string()))?;
    if words.is_empty() {
        return Err(TemplateError::Empty);
    }
    words.iter().map(|w| parse_word(w)).collect()
}

/// Values substituted during expansion.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    pub inputs: BTreeMap<String, Vec<String>>,
    pub outputs: BTreeMap<String, String>,
    pub params: BTreeMap<String, String>,
}

/// Expands a template into an argument vector (program first).
pub fn expand(template: &str, b: &Bindings) -> Result<Vec<String>, TemplateError> {
    let mut argv = Vec::new();
    for word in parse(template)? {
        if let [Segment::Input(port)] = word.as_slice() {
            let vals = b.inputs.get(port).ok_or_else(|| TemplateError::Unbound {
                kind: "input",
                name: port.clone(),
            })?;
            argv.extend(vals.iter().cloned());
            continue;
        }
        let mut s = String::new();
        for seg in &word {
            match seg {
                Segment::Text(t) => s.push_str(t),
                Segment::Input(p) => {
                    let vals = b.inputs.get(p).ok_or_else(|| TemplateError::Unbound {
                        kind: "input",
                        name: p.clone(),
                    })?;
                    s.push_str(&vals.join(" "));
                }
                Segment::Output(p) => {
                    s.push_str(b.outputs.get(p).ok_or_else(|| TemplateError::Unbound {
                        kind: "output",
                        name: p.clone(),
                    })?)
                }
                Segment::Param(p) => {
                    s.push_str(b.params.get(p).ok_or_else(|| TemplateError::Unbound {
                        kind: "param",
                        name: p.clone(),
                    })?)
                }
            }
        }
        argv.push(s);
    }
    Ok(argv)
}
