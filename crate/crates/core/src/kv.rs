//! Sectioned TOML documents with strict key checking and typed access.

use crate::error::{Error, Result};
use toml::{Table, Value};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    pub table: Table,
}

impl KvDoc {
    /// Every top-level entry must be a `[section]` table.
    pub fn parse(text: &str) -> Result<KvDoc> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some((k, _)) = table.iter().find(|(_, v)| !v.is_table()) {
            return Err(Error::Config(format!("{k} must sit inside a [section]")));
        }
        Ok(KvDoc { table })
    }

    pub fn section(&self, name: &str) -> Option<&Table> {
        self.table.get(name).and_then(Value::as_table)
    }

    /// Rejects any section or key not listed in `allowed`.
    pub fn check_keys(&self, allowed: &[(&str, &[&str])]) -> Result<()> {
        for (name, keys) in &self.table {
            let Some((_, ok)) = allowed.iter().find(|(n, _)| n == name) else {
                return Err(Error::Config(format!("unknown section [{name}]")));
            };
            for k in keys.as_table().into_iter().flat_map(|t| t.keys()) {
                if !ok.contains(&k.as_str()) {
                    return Err(Error::Config(format!("unknown key {k} in [{name}]")));
                }
            }
        }
        Ok(())
    }
}

pub struct Section<'a> {
    pub name: &'a str,
    pub map: Option<&'a Table>,
}

fn number(v: &Value, key: &str) -> Result<f64> {
    let x = match v {
        Value::Float(x) => *x,
        Value::Integer(i) => *i as f64,
        other => return Err(Error::Config(format!("{key}: expected a number, got {other}"))),
    };
    if !x.is_finite() {
        return Err(Error::Config(format!("{key}: non-finite value")));
    }
    Ok(x)
}

impl<'a> Section<'a> {
    pub fn of(doc: &'a KvDoc, name: &'a str) -> Self {
        Section { name, map: doc.section(name) }
    }

    pub fn raw(&self, key: &str) -> Option<&'a Value> {
        self.map.and_then(|m| m.get(key))
    }

    pub fn has(&self, key: &str) -> bool {
        self.raw(key).is_some()
    }

    fn need(&self, key: &str) -> Result<&'a Value> {
        self.raw(key).ok_or_else(|| Error::Config(format!("missing {key} in [{}]", self.name)))
    }

    pub fn str_opt(&self, key: &str) -> Result<Option<&'a str>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(other) => Err(Error::Config(format!("{key}: expected a string, got {other}"))),
        }
    }

    pub fn str_or(&self, key: &str, default: &'a str) -> Result<&'a str> {
        Ok(self.str_opt(key)?.unwrap_or(default))
    }

    pub fn req(&self, key: &str) -> Result<&'a str> {
        self.need(key)?;
        Ok(self.str_opt(key)?.unwrap_or_default())
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        number(self.need(key)?, key)
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        self.raw(key).map(|v| number(v, key)).transpose()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    pub fn u64_opt(&self, key: &str) -> Result<Option<u64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(other) => Err(Error::Config(format!("{key}: expected a nonnegative integer, got {other}"))),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.need(key)?;
        Ok(self.u64_opt(key)?.unwrap_or_default() as usize)
    }

    pub fn usize_opt(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64_opt(key)?.map(|x| x as usize))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.usize_opt(key)?.unwrap_or(default))
    }

    /// An array of numbers; a bare number counts as a one-element list.
    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        match self.need(key)? {
            Value::Array(a) => a.iter().map(|v| number(v, key)).collect(),
            v => Ok(vec![number(v, key)?]),
        }
    }
}

pub fn parse_f64(s: &str, key: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::Config(format!("{key}: non-finite value")));
    }
    Ok(v)
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// TOML array literal.
pub fn fmt_list(xs: &[f64]) -> String {
    format!("[{}]", xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(", "))
}
