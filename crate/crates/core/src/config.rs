// SPDX-License-Identifier: Apache-2.0

//! Flat `dotted.key = value` configuration layered over typed defaults.
//!
//! Every task config serialises to JSON; its leaves become the valid keys.
//! A value is parsed according to the type of the default it replaces, and
//! lists are written comma-separated. Lines starting with `#` are comments.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Sorted dotted keys of every leaf in `v`.
pub fn keys_of(v: &Value) -> Vec<String> {
    let mut out = Vec::new();
    collect_keys(v, "", &mut out);
    out.sort();
    out
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_keys(child, &key, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn leaf_mut<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part)?,
            _ => return None,
        };
    }
    (!cur.is_object()).then_some(cur)
}

fn parse_scalar(like: &Value, raw: &str, key: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {raw:?}"));
    let raw = raw.trim();
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad("an integer"))?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Null => {
            if let Ok(x) = raw.parse::<u64>() {
                Value::from(x)
            } else if let Some(n) = raw.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                Value::Number(n)
            } else if raw == "null" || raw.is_empty() {
                Value::Null
            } else {
                Value::String(raw.to_string())
            }
        }
        Value::Array(_) | Value::Object(_) => return Err(bad("a scalar")),
    })
}

fn parse_value(like: &Value, raw: &str, key: &str) -> Result<Value> {
    match like {
        Value::Array(items) => {
            let raw = raw.trim();
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            let elem = items.first().cloned().unwrap_or(Value::Null);
            let parsed = raw.split(',').map(|p| parse_scalar(&elem, p, key)).collect::<Result<Vec<_>>>()?;
            Ok(Value::Array(parsed))
        }
        _ => parse_scalar(like, raw, key),
    }
}

/// Applies `key=value` overrides to `base`, rejecting unknown keys.
pub fn apply_overrides(base: &mut Value, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let Some(slot) = leaf_mut(base, key) else {
            return Err(Error::Config(format!("unknown key {key:?}; valid keys: {}", keys_of(base).join(", "))));
        };
        *slot = parse_value(slot, raw, key)?;
    }
    Ok(())
}

/// Splits `key=value` (also accepts `key = value`).
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in {s:?}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Reads assignments from a config file.
pub fn read_assignments(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| parse_assignment(l).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Default config of type `T` with the overrides applied.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, overrides: &[(String, String)]) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    apply_overrides(&mut v, overrides)?;
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// The flattened `key = value` view of a config, one line per key.
pub fn render<T: Serialize>(cfg: &T) -> Result<String> {
    let v = serde_json::to_value(cfg)?;
    let mut out = String::new();
    for key in keys_of(&v) {
        let mut cur = &v;
        for part in key.split('.') {
            cur = &cur[part];
        }
        out.push_str(&format!("{key} = {}\n", scalar_text(cur)));
    }
    Ok(out)
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(scalar_text).collect::<Vec<_>>().join(","),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}
