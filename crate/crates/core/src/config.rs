//! `key=value` text: one pair per line, `#` starts a comment line.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; duplicate keys are rejected.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", lineno + 1), format!("expected key=value, got `{line}`"))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}", lineno + 1), "empty key"));
        }
        if pairs.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::config(key, "given more than once"));
        }
    }
    Ok(pairs)
}

pub fn format_pairs<'a>(pairs: impl IntoIterator<Item = &'a (String, String)>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Removes `key` from `pairs` and parses it into `slot` if present.
pub fn take_parsed<V: FromStr>(
    pairs: &mut BTreeMap<String, String>,
    key: &str,
    slot: &mut V,
) -> Result<()> {
    if let Some(raw) = pairs.remove(key) {
        *slot = raw
            .parse()
            .map_err(|_| Error::config(key, format!("cannot parse `{raw}`")))?;
    }
    Ok(())
}

/// Fails naming the first key nobody consumed.
pub fn reject_unknown(pairs: &BTreeMap<String, String>) -> Result<()> {
    match pairs.keys().next() {
        Some(key) => Err(Error::config(key.clone(), "unknown key")),
        None => Ok(()),
    }
}
