//! `key = value` text blocks used by configuration files and checkpoints.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are rejected.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn render(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("invalid value `{v}` for `{key}`: {e}")))
}

/// `a..b` inclusive integer range written as `a-b` (or a single `a`).
pub fn range(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once('-') {
        Some((a, b)) => Ok((value(key, a.trim())?, value(key, b.trim())?)),
        None => {
            let a = value(key, v)?;
            Ok((a, a))
        }
    }
}

/// Types configurable from `key = value` pairs.
pub trait KvConfig {
    /// Applies one pair; `Ok(false)` when the key is not recognised.
    fn apply(&mut self, key: &str, value: &str) -> Result<bool>;

    fn to_pairs(&self) -> Vec<(String, String)>;
}

pub(crate) fn pair(k: &str, v: impl Display) -> (String, String) {
    (k.to_string(), v.to_string())
}
