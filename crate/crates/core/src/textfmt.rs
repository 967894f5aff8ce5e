//! Versioned `key value...` text records used for model files.

use std::fmt::Display;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub(crate) struct Record {
    entries: Vec<(String, String)>,
}

impl Record {
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_floats(&mut self, key: &str, values: &[f64]) {
        let joined: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
        self.push(key, joined.join(" "));
    }

    pub fn write<W: Write>(&self, header: &str, mut w: W) -> Result<()> {
        let io = |e| Error::io("model sink", e);
        writeln!(w, "{header}").map_err(io)?;
        for (k, v) in &self.entries {
            if v.is_empty() {
                writeln!(w, "{k}").map_err(io)?;
            } else {
                writeln!(w, "{k} {v}").map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(header: &str, r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Parse("empty model file".into()))?
            .map_err(|e| Error::io("model source", e))?;
        if first.trim() != header {
            return Err(Error::Parse(format!(
                "expected format line {header:?}, got {first:?}"
            )));
        }
        let mut entries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("model source", e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("missing {key} entry")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Parse(format!("bad value {v:?} for {key}")))
    }

    pub fn floats(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)?
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Parse(format!("bad number {s:?} in {key}")))
            })
            .collect()
    }

    pub fn floats_len(&self, key: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.floats(key)?;
        if v.len() != len {
            return Err(Error::Parse(format!(
                "{key} has {} values, expected {len}",
                v.len()
            )));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut r = Record::default();
        r.push("mode", "shared");
        r.push_floats("u", &[0.1, -1.0 / 3.0, 1e-300, 0.0]);
        r.push_floats("empty", &[]);
        let mut buf = Vec::new();
        r.write("fmt 1", &mut buf).unwrap();
        let back = Record::read("fmt 1", buf.as_slice()).unwrap();
        assert_eq!(back.get("mode").unwrap(), "shared");
        assert_eq!(back.floats("u").unwrap(), vec![0.1, -1.0 / 3.0, 1e-300, 0.0]);
        assert!(back.floats("empty").unwrap().is_empty());
        assert!(Record::read("fmt 2", buf.as_slice()).is_err());
        assert!(back.get("missing").is_err());
    }
}
