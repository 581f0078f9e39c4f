//! Cooperative optimization payloads attached to PSet operations.
//!
//! The raw payload is opaque and forwarded verbatim. The scheduler only ever
//! looks at the parsed [`ColAttributes`]. Attribute syntax is `key=value`
//! pairs separated by `;`, e.g.
//!
//! ```text
//! colv=1;num_delta=2;min_delta=1;max_delta=4;amdahl_serial_fraction=0.05
//! ```
//!
//! Unknown keys are kept in the raw bytes and otherwise ignored. A repeated
//! key overrides its earlier occurrence, which lets callers layer an action's
//! payload on top of a job's defaults by concatenation.

use std::fmt::Write as _;

use thiserror::Error;

use crate::pset::PSetName;

/// Schema version written by [`ColAttributes::to_col_string`].
pub const COL_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ColError {
    #[error("malformed COL payload: {0}")]
    ParseError(String),
    #[error("COL constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("COL attribute `{0}` is required")]
    MissingAttribute(&'static str),
    #[error("process count must be at least 1")]
    InvalidProcessCount,
}

/// Parsed attribute view of a COL payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ColAttributes {
    pub num_delta: u32,
    pub min_delta: Option<u32>,
    pub max_delta: Option<u32>,
    pub multiple_of: u32,
    pub priority: i64,
    pub amdahl_serial_fraction: Option<f64>,
    /// MiB per process.
    pub mem_per_process: Option<u64>,
    pub output_sizes: Option<Vec<u32>>,
}

impl Default for ColAttributes {
    fn default() -> Self {
        ColAttributes {
            num_delta: 0,
            min_delta: None,
            max_delta: None,
            multiple_of: 1,
            priority: 0,
            amdahl_serial_fraction: None,
            mem_per_process: None,
            output_sizes: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ColError> {
    value
        .parse()
        .map_err(|_| ColError::ParseError(format!("bad value `{value}` for `{key}`")))
}

impl ColAttributes {
    pub fn parse(text: &str) -> Result<Self, ColError> {
        let mut attrs = ColAttributes::default();
        for pair in text.split(';') {
            let pair = pair.trim();
            if pair.is_empty() {
                continue;
            }
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| ColError::ParseError(format!("expected key=value, got `{pair}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
            {
                return Err(ColError::ParseError(format!("bad key `{key}`")));
            }
            match key {
                "colv" => {
                    if value != COL_VERSION {
                        return Err(ColError::ParseError(format!(
                            "unsupported schema version `{value}`"
                        )));
                    }
                }
                "num_delta" => attrs.num_delta = parse_num(key, value)?,
                "min_delta" => attrs.min_delta = Some(parse_num(key, value)?),
                "max_delta" => attrs.max_delta = Some(parse_num(key, value)?),
                "multiple_of" => attrs.multiple_of = parse_num(key, value)?,
                "priority" => attrs.priority = parse_num(key, value)?,
                "amdahl_serial_fraction" => {
                    attrs.amdahl_serial_fraction = Some(parse_num(key, value)?)
                }
                "mem_per_process" => attrs.mem_per_process = Some(parse_num(key, value)?),
                "output_sizes" => {
                    let sizes = value
                        .split(',')
                        .map(|v| parse_num::<u32>(key, v.trim()))
                        .collect::<Result<Vec<_>, _>>()?;
                    attrs.output_sizes = Some(sizes);
                }
                _ => {}
            }
        }
        attrs.check()?;
        Ok(attrs)
    }

    fn check(&self) -> Result<(), ColError> {
        let violation = |m: String| Err(ColError::ConstraintViolation(m));
        if self.multiple_of == 0 {
            return violation("multiple_of must be >= 1".into());
        }
        if let (Some(lo), Some(hi)) = (self.min_delta, self.max_delta) {
            if lo > hi {
                return violation(format!("min_delta {lo} > max_delta {hi}"));
            }
        }
        if let Some(lo) = self.min_delta {
            if lo > self.num_delta {
                return violation(format!("min_delta {lo} > num_delta {}", self.num_delta));
            }
        }
        if let Some(hi) = self.max_delta {
            if self.num_delta > hi {
                return violation(format!("num_delta {} > max_delta {hi}", self.num_delta));
            }
        }
        if !self.num_delta.is_multiple_of(self.multiple_of) {
            return violation(format!(
                "num_delta {} is not a multiple of {}",
                self.num_delta, self.multiple_of
            ));
        }
        if let Some(s) = self.amdahl_serial_fraction {
            if !(0.0..=1.0).contains(&s) {
                return violation(format!("amdahl_serial_fraction {s} outside [0,1]"));
            }
        }
        if let Some(sizes) = &self.output_sizes {
            if sizes.is_empty() || sizes.contains(&0) {
                return violation("output_sizes entries must be positive".into());
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_col_string(a)) == a`.
    pub fn to_col_string(&self) -> String {
        let mut s = format!("colv={COL_VERSION};num_delta={}", self.num_delta);
        if let Some(v) = self.min_delta {
            let _ = write!(s, ";min_delta={v}");
        }
        if let Some(v) = self.max_delta {
            let _ = write!(s, ";max_delta={v}");
        }
        if self.multiple_of != 1 {
            let _ = write!(s, ";multiple_of={}", self.multiple_of);
        }
        if self.priority != 0 {
            let _ = write!(s, ";priority={}", self.priority);
        }
        if let Some(v) = self.amdahl_serial_fraction {
            let _ = write!(s, ";amdahl_serial_fraction={v}");
        }
        if let Some(v) = self.mem_per_process {
            let _ = write!(s, ";mem_per_process={v}");
        }
        if let Some(v) = &self.output_sizes {
            let joined: Vec<String> = v.iter().map(u32::to_string).collect();
            let _ = write!(s, ";output_sizes={}", joined.join(","));
        }
        s
    }

    /// Inclusive bounds on acceptable grants. Absent bounds collapse to `num_delta`.
    pub fn grant_bounds(&self) -> (u32, u32) {
        (
            self.min_delta.unwrap_or(self.num_delta),
            self.max_delta.unwrap_or(self.num_delta),
        )
    }

    pub fn is_valid_grant(&self, delta: u32) -> bool {
        let (lo, hi) = self.grant_bounds();
        lo <= delta && delta <= hi && delta.is_multiple_of(self.multiple_of)
    }

    /// Smallest strictly positive acceptable grant.
    pub fn smallest_positive_grant(&self) -> Option<u32> {
        let (lo, hi) = self.grant_bounds();
        let m = self.multiple_of;
        let d = lo.max(1).div_ceil(m) * m;
        (d <= hi).then_some(d)
    }

    /// Largest acceptable grant not exceeding `cap`.
    pub fn largest_grant_at_most(&self, cap: u32) -> Option<u32> {
        let (lo, hi) = self.grant_bounds();
        let m = self.multiple_of;
        let d = hi.min(cap) / m * m;
        (d >= lo).then_some(d)
    }

    pub fn mem(&self) -> u64 {
        self.mem_per_process.unwrap_or(0)
    }
}

/// Amdahl speedup of `n` processes with serial fraction `s`.
pub fn amdahl_speedup(s: f64, n: u32) -> f64 {
    1.0 / (s + (1.0 - s) / f64::from(n))
}

/// Speedup predicted by the payload's scalability hint.
pub fn col_speedup(attrs: &ColAttributes, n_procs: u32) -> Result<f64, ColError> {
    if n_procs == 0 {
        return Err(ColError::InvalidProcessCount);
    }
    let s = attrs
        .amdahl_serial_fraction
        .ok_or(ColError::MissingAttribute("amdahl_serial_fraction"))?;
    Ok(amdahl_speedup(s, n_procs))
}

/// Opaque payload plus its parsed attributes, local to one PSet.
#[derive(Debug, Clone, PartialEq)]
pub struct ColObject {
    raw: Vec<u8>,
    attrs: ColAttributes,
    source: PSetName,
}

impl ColObject {
    pub fn parse(raw: impl Into<Vec<u8>>, source: PSetName) -> Result<Self, ColError> {
        let raw = raw.into();
        let text = std::str::from_utf8(&raw)
            .map_err(|_| ColError::ParseError("payload is not UTF-8 text".into()))?;
        let attrs = ColAttributes::parse(text)?;
        Ok(ColObject { raw, attrs, source })
    }

    pub fn from_attrs(attrs: ColAttributes, source: PSetName) -> Self {
        ColObject {
            raw: attrs.to_col_string().into_bytes(),
            attrs,
            source,
        }
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    /// Raw payload as text; always valid since parsing requires UTF-8.
    pub fn raw_str(&self) -> &str {
        std::str::from_utf8(&self.raw).unwrap_or_default()
    }

    pub fn attrs(&self) -> &ColAttributes {
        &self.attrs
    }

    pub fn source(&self) -> &PSetName {
        &self.source
    }
}
