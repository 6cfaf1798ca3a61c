//! Recursive-descent parser for the formula text syntax:
//!
//! ```text
//! formula := 'True' | 'False' | atom
//!          | '!' formula | 'X' formula | 'F' formula
//!          | '(' formula ')'
//!          | '(' formula ('|' | '&' | 'W' | 'S') formula ')'
//! atom    := 'P' digits | phase name
//! ```

use super::formula::{Formula, FormulaBuilder, NodeId};
use super::PhaseTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    LParen,
    RParen,
    Bang,
    Pipe,
    Amp,
    Ident(&'a str),
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    table: Option<&'a PhaseTable>,
    builder: FormulaBuilder,
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_'
}

fn is_ident(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_'
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Returns the next token and its start offset without consuming it.
    fn peek(&mut self) -> Result<(Tok<'a>, usize)> {
        self.skip_ws();
        let bytes = self.src.as_bytes();
        let start = self.pos;
        let Some(&c) = bytes.get(start) else {
            return Ok((Tok::End, start));
        };
        let tok = match c {
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'!' => Tok::Bang,
            b'|' => Tok::Pipe,
            b'&' => Tok::Amp,
            c if is_ident_start(c) => {
                let mut end = start;
                while end < bytes.len() && is_ident(bytes[end]) {
                    end += 1;
                }
                Tok::Ident(&self.src[start..end])
            }
            _ => {
                let ch = self.src[start..].chars().next().unwrap_or('?');
                return self.err(start, format!("unexpected character {ch:?}"));
            }
        };
        Ok((tok, start))
    }

    fn bump(&mut self, tok: &Tok<'_>) {
        self.pos += match tok {
            Tok::Ident(s) => s.len(),
            Tok::End => 0,
            _ => 1,
        };
    }

    fn next(&mut self) -> Result<(Tok<'a>, usize)> {
        let (tok, at) = self.peek()?;
        self.bump(&tok);
        Ok((tok, at))
    }

    fn atom(&mut self, name: &str, at: usize) -> Result<NodeId> {
        if let Some(table) = self.table {
            if let Some(idx) = table.index_of(name) {
                return Ok(self.builder.atom(idx));
            }
        }
        if let Some(digits) = name.strip_prefix('P') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                let k: usize = digits
                    .parse()
                    .or_else(|_| self.err(at, format!("atom index too large in {name:?}")))?;
                if k == 0 {
                    return self.err(at, "atoms are numbered from P1");
                }
                if let Some(table) = self.table {
                    if k > table.len() {
                        return self.err(at, format!("unknown atom {name:?}: phase table has {} phases", table.len()));
                    }
                }
                return Ok(self.builder.atom(k - 1));
            }
        }
        self.err(at, format!("unknown atom {name:?}"))
    }

    fn formula(&mut self) -> Result<NodeId> {
        let (tok, at) = self.next()?;
        match tok {
            Tok::Bang => {
                let a = self.formula()?;
                Ok(self.builder.not(a))
            }
            Tok::Ident("X") => {
                let a = self.formula()?;
                Ok(self.builder.next(a))
            }
            Tok::Ident("F") => {
                let a = self.formula()?;
                Ok(self.builder.eventually(a))
            }
            Tok::Ident("True") => Ok(self.builder.constant(true)),
            Tok::Ident("False") => Ok(self.builder.constant(false)),
            Tok::Ident(name @ ("W" | "S")) => self.err(at, format!("binary operator {name} outside parentheses")),
            Tok::Ident(name) => self.atom(name, at),
            Tok::LParen => {
                let lhs = self.formula()?;
                let (op, op_at) = self.next()?;
                if op == Tok::RParen {
                    return Ok(lhs);
                }
                let node = match op {
                    Tok::Pipe | Tok::Amp | Tok::Ident("W") | Tok::Ident("S") => op,
                    Tok::End => return self.err(op_at, "unbalanced parenthesis: expected ')'"),
                    other => return self.err(op_at, format!("expected binary operator or ')', found {other:?}")),
                };
                let rhs = self.formula()?;
                match self.next()? {
                    (Tok::RParen, _) => {}
                    (Tok::End, end) => return self.err(end, "unbalanced parenthesis: expected ')'"),
                    (other, pos) => return self.err(pos, format!("expected ')', found {other:?}")),
                }
                Ok(match node {
                    Tok::Pipe => self.builder.or(lhs, rhs),
                    Tok::Amp => self.builder.and(lhs, rhs),
                    Tok::Ident("W") => self.builder.weak_until(lhs, rhs),
                    _ => self.builder.since(lhs, rhs),
                })
            }
            Tok::RParen => self.err(at, "unbalanced parenthesis: unexpected ')'"),
            Tok::End => self.err(at, "unexpected end of input"),
            Tok::Pipe | Tok::Amp => self.err(at, "binary operator outside parentheses"),
        }
    }
}

/// Parses one formula. Atoms are `P1..PC` or, when `table` is given, phase
/// names from it.
pub fn parse_formula(text: &str, table: Option<&PhaseTable>) -> Result<Formula> {
    let mut p = Parser {
        src: text,
        pos: 0,
        table,
        builder: FormulaBuilder::new(),
    };
    let root = p.formula()?;
    let (tok, at) = p.peek()?;
    if tok != Tok::End {
        return p.err(at, format!("trailing tokens starting with {tok:?}"));
    }
    Ok(p.builder.finish(root))
}

/// Parses a formula file: one formula per line, `#` starts a comment.
/// Error offsets are relative to the whole file.
pub fn parse_formula_file(text: &str, table: Option<&PhaseTable>) -> Result<Vec<Formula>> {
    let mut out = Vec::new();
    let mut line_start = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("");
        if !body.trim().is_empty() {
            let f = parse_formula(body, table).map_err(|e| match e {
                Error::Parse { offset, msg } => Error::Parse {
                    offset: line_start + offset,
                    msg,
                },
                other => other,
            })?;
            out.push(f);
        }
        line_start += line.len();
    }
    Ok(out)
}
