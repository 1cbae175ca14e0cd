//! Flat `key = value` configuration files.
//!
//! `#` starts a comment, blank lines are ignored, keys may contain dots.
//! Values are parsed on demand; every key must be consumed, so typos are
//! reported by name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;

use crate::attitude::Quaternion;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed key-value pairs plus the file they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    source: PathBuf,
    entries: BTreeMap<String, Entry>,
}

fn syntax(source: &Path, line: usize, what: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}:{line}: {what}", source.display()))
}

impl KeyValues {
    pub fn parse(source: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(source, i + 1, format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(syntax(source, i + 1, "empty key"));
            }
            let entry = Entry {
                value: value.trim().to_string(),
                line: i + 1,
            };
            if entries.insert(key.to_string(), entry).is_some() {
                return Err(syntax(source, i + 1, format!("duplicate key '{key}'")));
            }
        }
        Ok(Self {
            source: source.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(path, &crate::io::read_to_string(path)?)
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overlays `other`, its values winning. Keys are optionally prefixed.
    pub fn merge(&mut self, other: KeyValues, prefix: &str) {
        for (k, v) in other.entries {
            let key = if k.starts_with(prefix) { k } else { format!("{prefix}{k}") };
            self.entries.insert(key, v);
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.into(),
                line: 0,
            },
        );
    }

    fn bad(&self, key: &str, line: usize, what: impl std::fmt::Display) -> Error {
        Error::Config(format!(
            "{}:{line}: key '{key}': {what}",
            self.source.display()
        ))
    }

    /// Removes and returns the raw value of `key`.
    pub fn take_raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key).map(|e| (e.value, e.line))
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| self.bad(key, line, format!("{e} (value {v:?})"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_vec3(&mut self, key: &str) -> Result<Option<Vector3<f64>>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((v, line)) => parse_vec3(&v)
                .map(Some)
                .map_err(|e| self.bad(key, line, e)),
        }
    }

    pub fn take_quat(&mut self, key: &str) -> Result<Option<Quaternion>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((v, line)) => parse_quat(&v)
                .map(Some)
                .map_err(|e| self.bad(key, line, e)),
        }
    }

    /// `t: x, y, z; t: x, y, z; ...`, times strictly increasing.
    pub fn take_profile(&mut self, key: &str) -> Result<Option<Vec<(f64, Vector3<f64>)>>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((v, line)) => parse_profile(&v)
                .map(Some)
                .map_err(|e| self.bad(key, line, e)),
        }
    }

    /// `a: b; c: d; ...` closed intervals with `a ≤ b`.
    pub fn take_intervals(&mut self, key: &str) -> Result<Option<Vec<(f64, f64)>>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((v, line)) => parse_intervals(&v)
                .map(Some)
                .map_err(|e| self.bad(key, line, e)),
        }
    }

    /// Fails naming the first key that nothing consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, e)) => Err(Error::Config(format!(
                "{}:{}: unknown key '{k}'",
                self.source.display(),
                e.line
            ))),
        }
    }
}

fn numbers(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| format!("not a number: {t:?}"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite value {t:?}"))
            }
        })
        .collect()
}

pub fn parse_vec3(s: &str) -> std::result::Result<Vector3<f64>, String> {
    match numbers(s)?.as_slice() {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        other => Err(format!("expected 3 numbers, found {}", other.len())),
    }
}

/// `qx qy qz qw` as written; must be within 1e-6 of unit norm. Callers
/// renormalize at use so echoed values re-parse bit-identically.
pub fn parse_quat(s: &str) -> std::result::Result<Quaternion, String> {
    match numbers(s)?.as_slice() {
        [x, y, z, w] => {
            let q = Quaternion::new(Vector3::new(*x, *y, *z), *w);
            if !q.is_unit(1e-6) {
                return Err(format!("quaternion norm {} is not unit", q.norm()));
            }
            Ok(q)
        }
        other => Err(format!("expected 4 numbers (qx qy qz qw), found {}", other.len())),
    }
}

pub fn parse_profile(s: &str) -> std::result::Result<Vec<(f64, Vector3<f64>)>, String> {
    let mut out: Vec<(f64, Vector3<f64>)> = Vec::new();
    for item in s.split(';').map(str::trim).filter(|i| !i.is_empty()) {
        let (t, v) = item
            .split_once(':')
            .ok_or_else(|| format!("expected `t: x, y, z`, got {item:?}"))?;
        let t: f64 = t.trim().parse().map_err(|_| format!("bad time {t:?}"))?;
        if let Some((prev, _)) = out.last() {
            if t <= *prev {
                return Err(format!("profile times must increase ({t} after {prev})"));
            }
        }
        out.push((t, parse_vec3(v)?));
    }
    Ok(out)
}

pub fn parse_intervals(s: &str) -> std::result::Result<Vec<(f64, f64)>, String> {
    let mut out = Vec::new();
    for item in s.split(';').map(str::trim).filter(|i| !i.is_empty()) {
        let (a, b) = item
            .split_once(':')
            .ok_or_else(|| format!("expected `start: end`, got {item:?}"))?;
        let a: f64 = a.trim().parse().map_err(|_| format!("bad time {a:?}"))?;
        let b: f64 = b.trim().parse().map_err(|_| format!("bad time {b:?}"))?;
        if !(a <= b) {
            return Err(format!("interval start {a} after end {b}"));
        }
        out.push((a, b));
    }
    Ok(out)
}

pub fn format_vec3(v: &Vector3<f64>) -> String {
    format!("{}, {}, {}", v.x, v.y, v.z)
}

pub fn format_quat(q: &Quaternion) -> String {
    format!("{}, {}, {}, {}", q.v.x, q.v.y, q.v.z, q.w)
}

pub fn format_profile(p: &[(f64, Vector3<f64>)]) -> String {
    p.iter()
        .map(|(t, v)| format!("{t}: {}", format_vec3(v)))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn format_intervals(p: &[(f64, f64)]) -> String {
    p.iter()
        .map(|(a, b)| format!("{a}: {b}"))
        .collect::<Vec<_>>()
        .join("; ")
}
