//! Flat `key = value` configuration text with `#` comments.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Split a configuration file into entries. Blank lines and everything after
/// `#` are ignored; keys must be unique.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Config {
            line: Some(line),
            msg: format!("expected `key = value`, found `{body}`"),
        })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config { line: Some(line), msg: "empty key".into() });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config {
                line: Some(line),
                msg: format!("duplicate key `{key}` (first set on line {})", prev.line),
            });
        }
        out.push(Entry { line, key, value: v.trim().to_string() });
    }
    Ok(out)
}

impl Entry {
    fn err(&self, what: &str) -> Error {
        Error::Config {
            line: Some(self.line),
            msg: format!("`{}`: cannot parse `{}` as {what}", self.key, self.value),
        }
    }

    pub fn f64(&self) -> Result<f64> {
        let x: f64 = self.value.parse().map_err(|_| self.err("a number"))?;
        if !x.is_finite() {
            return Err(self.err("a finite number"));
        }
        Ok(x)
    }

    pub fn usize(&self) -> Result<usize> {
        self.value.parse().map_err(|_| self.err("a non-negative integer"))
    }

    pub fn u64(&self) -> Result<u64> {
        self.value.parse().map_err(|_| self.err("a 64-bit unsigned integer"))
    }

    pub fn bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(self.err("a boolean")),
        }
    }

    fn items(&self) -> impl Iterator<Item = &str> {
        self.value.split(',').map(str::trim).filter(|s| !s.is_empty())
    }

    pub fn f64_list(&self) -> Result<Vec<f64>> {
        self.items()
            .map(|s| s.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| self.err("a list of numbers")))
            .collect()
    }

    pub fn usize_list(&self) -> Result<Vec<usize>> {
        self.items().map(|s| s.parse().map_err(|_| self.err("a list of integers"))).collect()
    }

    pub fn u64_list(&self) -> Result<Vec<u64>> {
        self.items().map(|s| s.parse().map_err(|_| self.err("a list of integers"))).collect()
    }
}

/// Shortest decimal text that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}
