//! Path-expression subset used in facet constraints.
//!
//! ```text
//! expr      := ('/' | '//') step ('/' step)* [cmp literal]
//! step      := name ['[' predicate ']']
//! predicate := '@' name '=' string
//!            | name '=' string
//!            | 'count(' name ')' cmp number
//! cmp       := '<' | '>' | '=' | '<=' | '>=' | '≤' | '≥'
//! literal   := number | string
//! string    := '...' | "..."
//! ```
//!
//! The trailing comparison sits outside the last step, as in
//! `/QoS/response[case='worst']/time[@format='ms'] < 100`.

use std::fmt;

use crate::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// `/a/b`: the first step names the document root.
    RootPath,
    /// `//a/b`: the first step may match any element, root included.
    AnyDescendant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Gt,
    Eq,
    Le,
    Ge,
}

impl CmpOp {
    pub fn apply<T: PartialOrd>(self, lhs: T, rhs: T) -> bool {
        match self {
            CmpOp::Lt => lhs < rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Eq => lhs == rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Ge => lhs >= rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Eq => "=",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Literal {
    Number(f64),
    Str(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    AttrEq { attr: String, value: String },
    ChildTextEq { child: String, value: String },
    Count { child: String, op: CmpOp, value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub name: String,
    pub predicate: Option<Predicate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub op: CmpOp,
    pub literal: Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathExpr {
    pub axis: Axis,
    pub steps: Vec<Step>,
    pub comparison: Option<Comparison>,
}

/// Parses a decimal number: optional sign, digits, optional fraction.
/// Surrounding whitespace is ignored; anything else is not a number.
pub fn parse_decimal(text: &str) -> Option<f64> {
    let t = text.trim();
    let body = t.strip_prefix(['-', '+']).unwrap_or(t);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    let ok = match frac {
        None => digits(int),
        Some(f) => (digits(int) || int.is_empty()) && digits(f),
    };
    if ok {
        t.parse().ok()
    } else {
        None
    }
}

pub fn parse_path(text: &str) -> Result<PathExpr, ModelError> {
    let mut p = Parser { src: text, pos: 0 };
    p.skip_ws();
    if p.rest().is_empty() {
        return Err(ModelError::EmptyExpression);
    }
    let axis = if p.eat("//") {
        Axis::AnyDescendant
    } else if p.eat("/") {
        Axis::RootPath
    } else {
        return Err(p.unsupported("expression must start with `/` or `//`"));
    };
    let mut steps = vec![p.step()?];
    while p.eat("/") {
        if p.rest().starts_with('/') {
            return Err(p.unsupported("descendant axis only allowed at the start"));
        }
        steps.push(p.step()?);
    }
    p.skip_ws();
    let comparison = if p.rest().is_empty() {
        None
    } else {
        let op = p.cmp()?;
        p.skip_ws();
        let literal = p.literal()?;
        Some(Comparison { op, literal })
    };
    p.skip_ws();
    if !p.rest().is_empty() {
        return Err(p.unsupported("unexpected trailing input"));
    }
    Ok(PathExpr { axis, steps, comparison })
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn rest(&self) -> &str {
        &self.src[self.pos..]
    }

    fn unsupported(&self, why: &str) -> ModelError {
        ModelError::UnsupportedSyntax(format!("{why} at offset {} in `{}`", self.pos, self.src))
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn name(&mut self) -> Result<String, ModelError> {
        let rest = self.rest();
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_alphabetic() || c == '_' => {}
            _ => return Err(self.unsupported("expected a name")),
        }
        let len = chars
            .find(|&(_, c)| !(c.is_alphanumeric() || matches!(c, '_' | '-' | '.')))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let name = rest[..len].to_owned();
        self.pos += len;
        Ok(name)
    }

    fn step(&mut self) -> Result<Step, ModelError> {
        let name = self.name()?;
        let predicate = if self.eat("[") {
            self.skip_ws();
            let pred = self.predicate()?;
            self.skip_ws();
            if !self.eat("]") {
                return Err(self.unsupported("expected `]`"));
            }
            if self.rest().starts_with('[') {
                return Err(self.unsupported("one predicate per step"));
            }
            Some(pred)
        } else {
            None
        };
        Ok(Step { name, predicate })
    }

    fn predicate(&mut self) -> Result<Predicate, ModelError> {
        if self.eat("@") {
            let attr = self.name()?;
            self.equals()?;
            let value = self.string()?;
            return Ok(Predicate::AttrEq { attr, value });
        }
        if self.eat("count(") {
            self.skip_ws();
            let child = self.name()?;
            self.skip_ws();
            if !self.eat(")") {
                return Err(self.unsupported("expected `)`"));
            }
            self.skip_ws();
            let op = self.cmp()?;
            self.skip_ws();
            let value = match self.literal()? {
                Literal::Number(n) => n,
                Literal::Str(_) => return Err(self.unsupported("count() compares with a number")),
            };
            return Ok(Predicate::Count { child, op, value });
        }
        let child = self.name()?;
        if self.rest().starts_with('(') {
            return Err(self.unsupported("only count() is supported"));
        }
        self.equals()?;
        let value = self.string()?;
        Ok(Predicate::ChildTextEq { child, value })
    }

    fn equals(&mut self) -> Result<(), ModelError> {
        self.skip_ws();
        if !self.eat("=") {
            return Err(self.unsupported("expected `=`"));
        }
        self.skip_ws();
        Ok(())
    }

    fn cmp(&mut self) -> Result<CmpOp, ModelError> {
        for (token, op) in [
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("≤", CmpOp::Le),
            ("≥", CmpOp::Ge),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
            ("=", CmpOp::Eq),
        ] {
            if self.eat(token) {
                return Ok(op);
            }
        }
        Err(self.unsupported("expected a comparison operator"))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let quote = match self.rest().chars().next() {
            Some(q @ ('\'' | '"')) => q,
            _ => return Err(self.unsupported("expected a quoted string")),
        };
        self.pos += 1;
        let end = self
            .rest()
            .find(quote)
            .ok_or_else(|| self.unsupported("unterminated string"))?;
        let value = self.rest()[..end].to_owned();
        self.pos += end + 1;
        Ok(value)
    }

    fn literal(&mut self) -> Result<Literal, ModelError> {
        if matches!(self.rest().chars().next(), Some('\'' | '"')) {
            return Ok(Literal::Str(self.string()?));
        }
        let len = self
            .rest()
            .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+')))
            .unwrap_or(self.rest().len());
        let token = &self.rest()[..len];
        let n = parse_decimal(token).ok_or_else(|| self.unsupported("expected a number or string"))?;
        self.pos += len;
        Ok(Literal::Number(n))
    }
}

fn write_string(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    if s.contains('\'') {
        write!(f, "\"{s}\"")
    } else {
        write!(f, "'{s}'")
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(n) => write!(f, "{n}"),
            Literal::Str(s) => write_string(f, s),
        }
    }
}

impl fmt::Display for PathExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.axis {
            Axis::RootPath => "/",
            Axis::AnyDescendant => "//",
        })?;
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            f.write_str(&step.name)?;
            match &step.predicate {
                None => {}
                Some(Predicate::AttrEq { attr, value }) => {
                    write!(f, "[@{attr}=")?;
                    write_string(f, value)?;
                    f.write_str("]")?;
                }
                Some(Predicate::ChildTextEq { child, value }) => {
                    write!(f, "[{child}=")?;
                    write_string(f, value)?;
                    f.write_str("]")?;
                }
                Some(Predicate::Count { child, op, value }) => {
                    write!(f, "[count({child}) {} {value}]", op.symbol())?;
                }
            }
        }
        if let Some(cmp) = &self.comparison {
            write!(f, " {} {}", cmp.op.symbol(), cmp.literal)?;
        }
        Ok(())
    }
}

impl std::str::FromStr for PathExpr {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_path(s)
    }
}
