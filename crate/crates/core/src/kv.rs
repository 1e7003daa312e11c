//! Flat `key = value` text used for configs, hyperparameter blocks and
//! file headers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
    }
    Ok(out)
}

/// Canonical rendering: one `key = value` line per entry, in key order.
pub fn render(entries: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// Shortest text that parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .remove(key)
        .ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
    parse_value(key, &raw)
}

pub fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`")))
}

pub fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected a boolean, got `{raw}`"))),
    }
}

/// Errors on any key left unconsumed.
pub fn reject_leftovers(map: &BTreeMap<String, String>, what: &str) -> Result<()> {
    match map.keys().next() {
        Some(k) => Err(Error::Config(format!("unknown {what} key `{k}`"))),
        None => Ok(()),
    }
}
