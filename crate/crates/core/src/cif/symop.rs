use std::fmt;

use super::CifError;
use crate::crystal::{Mat3, Vec3};

/// Affine symmetry operation on fractional coordinates, `p ↦ W·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymOp {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SymOp {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, frac: &Vec3) -> Vec3 {
        self.rotation * frac + self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Mat3::identity() && self.translation == Vec3::zeros()
    }
}

impl fmt::Display for SymOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axes = ['x', 'y', 'z'];
        for row in 0..3 {
            if row > 0 {
                f.write_str(",")?;
            }
            let mut first = true;
            for (col, axis) in axes.iter().enumerate() {
                let w = self.rotation[(row, col)];
                if w == 0.0 {
                    continue;
                }
                let sign = if w < 0.0 {
                    "-"
                } else if first {
                    ""
                } else {
                    "+"
                };
                if w.abs() == 1.0 {
                    write!(f, "{sign}{axis}")?;
                } else {
                    write!(f, "{sign}{}{axis}", w.abs())?;
                }
                first = false;
            }
            let t = self.translation[row];
            if t != 0.0 || first {
                let sign = if t < 0.0 {
                    "-"
                } else if first {
                    ""
                } else {
                    "+"
                };
                write!(f, "{sign}{}", t.abs())?;
            }
        }
        Ok(())
    }
}

/// Parses a coordinate triplet such as `x, -y+1/2, z+1/2`.
pub fn parse_symop(s: &str) -> Result<SymOp, CifError> {
    let err = |message: String| CifError::Symop {
        op: s.to_string(),
        message,
    };
    let parts: Vec<&str> = s
        .trim()
        .trim_matches(|c| c == '\'' || c == '"')
        .split(',')
        .collect();
    if parts.len() != 3 {
        return Err(err(format!("expected 3 components, found {}", parts.len())));
    }
    let mut rotation = Mat3::zeros();
    let mut translation = Vec3::zeros();
    for (row, part) in parts.iter().enumerate() {
        let (coeffs, shift) = parse_component(part).map_err(err)?;
        for col in 0..3 {
            rotation[(row, col)] = coeffs[col];
        }
        translation[row] = shift;
    }
    Ok(SymOp {
        rotation,
        translation,
    })
}

fn parse_component(part: &str) -> Result<([f64; 3], f64), String> {
    let chars: Vec<char> = part.chars().filter(|c| !c.is_whitespace()).collect();
    if chars.is_empty() {
        return Err("empty component".into());
    }
    let mut coeffs = [0.0; 3];
    let mut shift = 0.0;
    let mut i = 0;
    while i < chars.len() {
        let mut sign = 1.0;
        while i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
            if chars[i] == '-' {
                sign = -sign;
            }
            i += 1;
        }
        if i >= chars.len() {
            return Err("dangling sign".into());
        }
        // optional numeric factor: integer, decimal or fraction
        let start = i;
        while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
            i += 1;
        }
        let mut value = None;
        if i > start {
            let num: String = chars[start..i].iter().collect();
            let mut v: f64 = num.parse().map_err(|_| format!("bad number `{num}`"))?;
            if i < chars.len() && chars[i] == '/' {
                i += 1;
                let dstart = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let den: String = chars[dstart..i].iter().collect();
                let d: f64 = den
                    .parse()
                    .map_err(|_| format!("bad denominator `{den}`"))?;
                if d == 0.0 {
                    return Err("zero denominator".into());
                }
                v /= d;
            }
            value = Some(v);
        }
        if i < chars.len() && chars[i] == '*' {
            i += 1;
        }
        let axis = match chars.get(i).map(|c| c.to_ascii_lowercase()) {
            Some('x') => Some(0),
            Some('y') => Some(1),
            Some('z') => Some(2),
            Some('+') | Some('-') | None => None,
            Some(c) => return Err(format!("unexpected token `{c}`")),
        };
        match (axis, value) {
            (Some(ax), v) => {
                coeffs[ax] += sign * v.unwrap_or(1.0);
                i += 1;
            }
            (None, Some(v)) => shift += sign * v,
            (None, None) => return Err("empty term".into()),
        }
    }
    Ok((coeffs, shift))
}
