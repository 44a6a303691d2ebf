//! Line-oriented key/value table syntax shared by constraint specs and run
//! configuration files.
//!
//! ```text
//! # comment
//! [constraint]
//! id = "no-metrics"
//! directive = "Compare qualitatively.\nNever estimate."
//! weight = 3
//! ```
//!
//! A document is a sequence of tables. Each table starts with a `[name]`
//! header; the same name may repeat. Values are double-quoted strings (escapes
//! `\\`, `\"`, `\n`, `\r`, `\t`), integers, floats or `true`/`false`. A `#` starts a
//! comment when it is the first non-blank character of a line or follows a
//! complete value.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at line {line}, column {column}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl SyntaxError {
    fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            column,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Bool(_) => "boolean",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => f.write_str(&quote(s)),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x:?}"),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: Value,
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Table {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

pub fn parse(source: &str) -> Result<Vec<Table>, SyntaxError> {
    let mut tables: Vec<Table> = Vec::new();
    for (idx, raw_line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        let indent = line.len() - line.trim_start().len();
        let body = line.trim_start();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let close = rest.find(']').ok_or_else(|| {
                SyntaxError::new(line_no, indent + 1, "unterminated table header")
            })?;
            let name = rest[..close].trim();
            if !is_ident(name) {
                return Err(SyntaxError::new(
                    line_no,
                    indent + 2,
                    format!("invalid table name {name:?}"),
                ));
            }
            let tail = rest[close + 1..].trim_start();
            if !(tail.is_empty() || tail.starts_with('#')) {
                return Err(SyntaxError::new(
                    line_no,
                    indent + close + 3,
                    "unexpected text after table header",
                ));
            }
            tables.push(Table {
                name: name.to_string(),
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }

        let eq = body
            .find('=')
            .ok_or_else(|| SyntaxError::new(line_no, indent + 1, "expected `key = value`"))?;
        let key = body[..eq].trim();
        if !is_ident(key) {
            return Err(SyntaxError::new(
                line_no,
                indent + 1,
                format!("invalid key {key:?}"),
            ));
        }
        let table = tables.last_mut().ok_or_else(|| {
            SyntaxError::new(line_no, indent + 1, "key/value pair outside of any table")
        })?;
        if table.get(key).is_some() {
            return Err(SyntaxError::new(
                line_no,
                indent + 1,
                format!("duplicate key {key:?} in [{}]", table.name),
            ));
        }
        let after_eq = &body[eq + 1..];
        let value_offset = indent + eq + 1 + (after_eq.len() - after_eq.trim_start().len());
        let value = parse_value(after_eq.trim_start(), line_no, value_offset + 1)?;
        table.entries.push(Entry {
            key: key.to_string(),
            value,
            line: line_no,
            column: indent + 1,
        });
    }
    Ok(tables)
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn parse_value(text: &str, line: usize, column: usize) -> Result<Value, SyntaxError> {
    if let Some(rest) = text.strip_prefix('"') {
        let mut out = String::new();
        let mut chars = rest.char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    let tail = rest[i + 1..].trim_start();
                    if !(tail.is_empty() || tail.starts_with('#')) {
                        return Err(SyntaxError::new(
                            line,
                            column + i + 2,
                            "unexpected text after string",
                        ));
                    }
                    return Ok(Value::Str(out));
                }
                '\\' => match chars.next() {
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, 't')) => out.push('\t'),
                    Some((_, 'r')) => out.push('\r'),
                    Some((_, '\\')) => out.push('\\'),
                    Some((_, '"')) => out.push('"'),
                    Some((j, other)) => {
                        return Err(SyntaxError::new(
                            line,
                            column + j + 1,
                            format!("unknown escape `\\{other}`"),
                        ))
                    }
                    None => break,
                },
                c => out.push(c),
            }
        }
        return Err(SyntaxError::new(line, column, "unterminated string"));
    }

    let token = match text.find('#') {
        Some(i) => text[..i].trim_end(),
        None => text.trim_end(),
    };
    if token.is_empty() {
        return Err(SyntaxError::new(line, column, "missing value"));
    }
    match token {
        "true" => return Ok(Value::Bool(true)),
        "false" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if let Ok(i) = token.parse::<i64>() {
        return Ok(Value::Int(i));
    }
    let numeric = token
        .chars()
        .all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'));
    if numeric {
        if let Ok(x) = token.parse::<f64>() {
            return Ok(Value::Float(x));
        }
    }
    Err(SyntaxError::new(
        line,
        column,
        format!("invalid value {token:?} (strings must be double-quoted)"),
    ))
}

/// Quotes and escapes a string so that [`parse`] reads it back unchanged.
pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Renders tables back to text.
pub fn render(tables: &[Table]) -> String {
    let mut out = String::new();
    for (i, table) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("[{}]\n", table.name));
        for e in &table.entries {
            out.push_str(&format!("{} = {}\n", e.key, e.value));
        }
    }
    out
}
