//! Dimensional analysis for the unit strings carried by artifact fields.
//!
//! The grammar is deliberately small: SI prefixes `k`, `c`, `m`; bases `W`, `J`,
//! `g`, `m`, `s`, `K`, `Pa`, and the affine Celsius aliases. Products use `·`,
//! `.` or `*`; `^` takes a signed integer exponent; everything after a `/` up to
//! the next `/` is a denominator, so `W/m·K` reads as `W/(m·K)`. A leading
//! numeric factor (`1e-2 W/(m·K)`) models scaled table headers.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for comparing scales. All scales in the grammar are
/// products of powers of ten.
pub const SCALE_TOLERANCE: f64 = 1e-9;

const KELVIN_OFFSET: f64 = 273.15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnitError {
    #[error("unparseable unit {input:?} at position {position}")]
    UnparseableUnit { input: String, position: usize },
    #[error("affine unit cannot be composed in {input:?}")]
    AffineComposition { input: String },
    #[error("incompatible units: {from} vs {to}")]
    IncompatibleUnits { from: String, to: String },
}

/// Exponents over (mass, length, time, temperature, amount, current, luminosity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Dims(pub [i8; 7]);

impl Dims {
    pub const MASS: usize = 0;
    pub const LENGTH: usize = 1;
    pub const TIME: usize = 2;
    pub const TEMPERATURE: usize = 3;

    pub const fn dimensionless() -> Self {
        Dims([0; 7])
    }

    pub fn get(&self, axis: usize) -> i8 {
        self.0[axis]
    }

    fn with(mut self, axis: usize, exp: i8) -> Self {
        self.0[axis] = exp;
        self
    }

    fn add(self, other: Dims) -> Dims {
        let mut out = [0i8; 7];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = self.0[i] + other.0[i];
        }
        Dims(out)
    }

    fn scale_by(self, n: i8) -> Dims {
        let mut out = self.0;
        for slot in out.iter_mut() {
            *slot *= n;
        }
        Dims(out)
    }

    pub fn is_pure_temperature(&self) -> bool {
        *self == Dims::dimensionless().with(Self::TEMPERATURE, 1)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 7] = ["M", "L", "T", "Θ", "N", "I", "J"];
        let mut first = true;
        for (name, exp) in NAMES.iter().zip(self.0.iter()) {
            if *exp != 0 {
                if !first {
                    write!(f, "·")?;
                }
                write!(f, "{name}^{exp}")?;
                first = false;
            }
        }
        if first {
            write!(f, "1")?;
        }
        Ok(())
    }
}

/// A parsed unit: dimensions, multiplier to the coherent SI unit, and an
/// affine offset for Celsius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitExpr {
    pub dims: Dims,
    pub scale: f64,
    pub affine_offset: f64,
    pub affine: bool,
}

impl UnitExpr {
    fn coherent(dims: Dims, scale: f64) -> Self {
        UnitExpr { dims, scale, affine_offset: 0.0, affine: false }
    }

    /// Multiplicative composition. Callers must reject affine operands first.
    fn mul(&self, other: &UnitExpr) -> UnitExpr {
        UnitExpr::coherent(self.dims.add(other.dims), self.scale * other.scale)
    }

    fn powi(&self, n: i8) -> UnitExpr {
        UnitExpr::coherent(self.dims.scale_by(n), self.scale.powi(n as i32))
    }

    /// Value in coherent SI (absolute for affine units).
    pub fn to_si(&self, value: f64) -> f64 {
        value * self.scale + self.affine_offset
    }

    pub fn from_si(&self, si: f64) -> f64 {
        (si - self.affine_offset) / self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCheckResult {
    pub equivalent: bool,
    /// `a.scale / b.scale`; present only when `equivalent`.
    pub scale_ratio: Option<f64>,
    pub alias_matched: bool,
}

/// A number with its unit string, the JSON shape `{"value": .., "unit": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

impl Quantity {
    pub fn new(value: f64, unit: impl Into<String>) -> Self {
        Quantity { value, unit: unit.into() }
    }

    /// The value expressed in `target`.
    pub fn value_in(&self, target: &str) -> Result<f64, UnitError> {
        convert(self.value, &parse_unit(&self.unit)?, &parse_unit(target)?)
    }
}

pub fn scales_equal(a: f64, b: f64) -> bool {
    ((a - b) / b).abs() <= SCALE_TOLERANCE
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Atom(usize, usize),
    Number(usize, usize),
    Mul(usize),
    Div(usize),
    Pow(usize),
    LParen(usize),
    RParen(usize),
}

fn tokenize(s: &str) -> Result<Vec<Tok>, UnitError> {
    let mut toks = Vec::new();
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    let mut i = 0;
    let err = |pos: usize| UnitError::UnparseableUnit { input: s.to_string(), position: pos };
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            ' ' | '\t' => {
                i += 1;
            }
            '·' | '.' | '*' | '⋅' => {
                toks.push(Tok::Mul(pos));
                i += 1;
            }
            '/' => {
                toks.push(Tok::Div(pos));
                i += 1;
            }
            '^' => {
                toks.push(Tok::Pow(pos));
                i += 1;
            }
            '(' => {
                toks.push(Tok::LParen(pos));
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen(pos));
                i += 1;
            }
            '-' | '+' | '0'..='9' => {
                let start = i;
                i += 1;
                while i < chars.len() && chars[i].1.is_ascii_digit() {
                    i += 1;
                }
                let end = chars.get(i).map_or(s.len(), |(p, _)| *p);
                if end == pos + 1 && !c.is_ascii_digit() {
                    return Err(err(pos));
                }
                toks.push(Tok::Number(chars[start].0, end));
            }
            c if c.is_alphabetic() || c == '°' => {
                let start = pos;
                i += 1;
                while i < chars.len() && (chars[i].1.is_alphabetic()) {
                    i += 1;
                }
                let end = chars.get(i).map_or(s.len(), |(p, _)| *p);
                toks.push(Tok::Atom(start, end));
            }
            _ => return Err(err(pos)),
        }
    }
    Ok(toks)
}

fn base_unit(name: &str) -> Option<(UnitExpr, bool)> {
    let d = Dims::dimensionless();
    let (m, l, t, th) = (Dims::MASS, Dims::LENGTH, Dims::TIME, Dims::TEMPERATURE);
    // (unit, prefixable)
    let u = match name {
        "m" => (UnitExpr::coherent(d.with(l, 1), 1.0), true),
        "g" => (UnitExpr::coherent(d.with(m, 1), 1e-3), true),
        "s" => (UnitExpr::coherent(d.with(t, 1), 1.0), true),
        "K" => (UnitExpr::coherent(d.with(th, 1), 1.0), false),
        "W" => (UnitExpr::coherent(Dims([1, 2, -3, 0, 0, 0, 0]), 1.0), true),
        "J" => (UnitExpr::coherent(Dims([1, 2, -2, 0, 0, 0, 0]), 1.0), true),
        "Pa" => (UnitExpr::coherent(Dims([1, -1, -2, 0, 0, 0, 0]), 1.0), true),
        "degC" | "Celsius" | "°C" => (
            UnitExpr { dims: d.with(th, 1), scale: 1.0, affine_offset: KELVIN_OFFSET, affine: true },
            false,
        ),
        _ => return None,
    };
    Some(u)
}

fn atom(name: &str) -> Option<(UnitExpr, bool)> {
    if let Some((u, _)) = base_unit(name) {
        let alias = matches!(name, "Celsius" | "°C");
        return Some((u, alias));
    }
    let mut chars = name.chars();
    let prefix = chars.next()?;
    let factor = match prefix {
        'k' => 1e3,
        'c' => 1e-2,
        'm' => 1e-3,
        _ => return None,
    };
    let (base, prefixable) = base_unit(chars.as_str())?;
    if !prefixable {
        return None;
    }
    Some((UnitExpr::coherent(base.dims, base.scale * factor), false))
}

struct Parser<'a> {
    input: &'a str,
    toks: Vec<Tok>,
    pos: usize,
    alias: bool,
    saw_affine: bool,
    factors: usize,
}

impl<'a> Parser<'a> {
    fn err_at(&self, position: usize) -> UnitError {
        UnitError::UnparseableUnit { input: self.input.to_string(), position }
    }

    fn char_pos(&self, byte: usize) -> usize {
        self.input[..byte].chars().count()
    }

    fn tok_pos(&self, t: &Tok) -> usize {
        let b = match *t {
            Tok::Atom(s, _) | Tok::Number(s, _) => s,
            Tok::Mul(p) | Tok::Div(p) | Tok::Pow(p) | Tok::LParen(p) | Tok::RParen(p) => p,
        };
        self.char_pos(b)
    }

    fn end_pos(&self) -> usize {
        self.input.chars().count()
    }

    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<UnitExpr, UnitError> {
        let mut acc = self.term()?;
        while let Some(Tok::Div(_)) = self.peek() {
            self.pos += 1;
            let den = self.term()?;
            acc = acc.mul(&den.powi(-1));
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<UnitExpr, UnitError> {
        let mut acc = self.factor()?;
        while let Some(Tok::Mul(_)) = self.peek() {
            self.pos += 1;
            let f = self.factor()?;
            acc = acc.mul(&f);
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<UnitExpr, UnitError> {
        self.factors += 1;
        let base = match self.peek() {
            Some(Tok::LParen(_)) => {
                self.pos += 1;
                let inner = self.expr()?;
                match self.peek() {
                    Some(Tok::RParen(_)) => self.pos += 1,
                    Some(t) => return Err(self.err_at(self.tok_pos(&t))),
                    None => return Err(self.err_at(self.end_pos())),
                }
                inner
            }
            Some(Tok::Atom(s, e)) => {
                let name = &self.input[s..e];
                let (u, alias) = atom(name).ok_or_else(|| self.err_at(self.char_pos(s)))?;
                self.alias |= alias;
                self.saw_affine |= u.affine;
                self.pos += 1;
                u
            }
            Some(Tok::Number(s, e)) if &self.input[s..e] == "1" => {
                self.pos += 1;
                UnitExpr::coherent(Dims::dimensionless(), 1.0)
            }
            Some(t) => return Err(self.err_at(self.tok_pos(&t))),
            None => return Err(self.err_at(self.end_pos())),
        };
        if let Some(Tok::Pow(p)) = self.peek() {
            self.pos += 1;
            match self.peek() {
                Some(Tok::Number(s, e)) => {
                    let n: i8 = self.input[s..e]
                        .trim_start_matches('+')
                        .parse()
                        .map_err(|_| self.err_at(self.char_pos(s)))?;
                    self.pos += 1;
                    if base.affine && n != 1 {
                        return Err(UnitError::AffineComposition { input: self.input.to_string() });
                    }
                    return Ok(if n == 1 { base } else { base.powi(n) });
                }
                _ => return Err(self.err_at(self.char_pos(p) + 1)),
            }
        }
        Ok(base)
    }
}

/// Splits a leading numeric annotation (`1e-2 W/(m·K)`) from the unit body.
fn split_factor(s: &str) -> (Option<f64>, &str) {
    let trimmed = s.trim();
    if let Some((head, rest)) = trimmed.split_once(char::is_whitespace) {
        if let Ok(f) = head.parse::<f64>() {
            if f.is_finite() && f > 0.0 && !rest.trim().is_empty() {
                return (Some(f), rest.trim_start());
            }
        }
    }
    (None, trimmed)
}

pub fn parse_unit(s: &str) -> Result<UnitExpr, UnitError> {
    if s.trim().is_empty() {
        return Err(UnitError::UnparseableUnit { input: s.to_string(), position: 0 });
    }
    let (factor, body) = split_factor(s);
    let offset = s.find(body).unwrap_or(0);
    let toks = tokenize(body).map_err(|e| match e {
        UnitError::UnparseableUnit { position, .. } => UnitError::UnparseableUnit {
            input: s.to_string(),
            position: s[..offset].chars().count() + body[..position].chars().count(),
        },
        other => other,
    })?;
    let mut p = Parser { input: body, toks, pos: 0, alias: false, saw_affine: false, factors: 0 };
    let remap = |e: UnitError| match e {
        UnitError::UnparseableUnit { position, .. } => UnitError::UnparseableUnit {
            input: s.to_string(),
            position: s[..offset].chars().count() + position,
        },
        UnitError::AffineComposition { .. } => UnitError::AffineComposition { input: s.to_string() },
        other => other,
    };
    let mut unit = p.expr().map_err(remap)?;
    if let Some(t) = p.peek() {
        return Err(remap(p.err_at(p.tok_pos(&t))));
    }
    if p.saw_affine && (p.factors > 1 || factor.is_some() || !unit.affine) {
        return Err(UnitError::AffineComposition { input: s.to_string() });
    }
    if let Some(f) = factor {
        unit.scale *= f;
    }
    Ok(unit)
}

/// Whether a raw unit string uses an alias spelling (e.g. `Celsius`).
pub fn uses_alias(s: &str) -> bool {
    let (_, body) = split_factor(s);
    tokenize(body)
        .map(|toks| {
            toks.iter().any(|t| match *t {
                Tok::Atom(a, b) => matches!(&body[a..b], "Celsius" | "°C"),
                _ => false,
            })
        })
        .unwrap_or(false)
}

pub fn unit_equivalent(a: &UnitExpr, b: &UnitExpr) -> UnitCheckResult {
    let equivalent = a.dims == b.dims;
    UnitCheckResult {
        equivalent,
        scale_ratio: equivalent.then(|| a.scale / b.scale),
        alias_matched: equivalent && a.affine == b.affine && scales_equal(a.scale, b.scale),
    }
}

/// Equivalence check on raw strings; records whether an alias spelling was involved.
pub fn strings_equivalent(a: &str, b: &str) -> Result<UnitCheckResult, UnitError> {
    let (ua, ub) = (parse_unit(a)?, parse_unit(b)?);
    let mut r = unit_equivalent(&ua, &ub);
    r.alias_matched = r.alias_matched && (uses_alias(a) || uses_alias(b)) && a.trim() != b.trim();
    Ok(r)
}

pub fn convert(value: f64, from: &UnitExpr, to: &UnitExpr) -> Result<f64, UnitError> {
    if from.dims != to.dims {
        return Err(UnitError::IncompatibleUnits {
            from: from.dims.to_string(),
            to: to.dims.to_string(),
        });
    }
    Ok(to.from_si(from.to_si(value)))
}
