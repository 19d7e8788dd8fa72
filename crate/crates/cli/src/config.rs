//! `key = value` run configuration merged with command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

/// Values from a config file plus the resolved values of the current run.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    used: Vec<String>,
    resolved: Vec<(String, String)>,
}

pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got {line:?}", i + 1);
        };
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("line {}: duplicate key {key}", i + 1);
        }
    }
    Ok(map)
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse(&text).with_context(|| format!("in config {}", p.display()))?
            }
            None => BTreeMap::new(),
        };
        Ok(Resolver {
            file,
            ..Resolver::default()
        })
    }

    /// Flag, else config entry, else `default`. Absent everywhere → `None`.
    pub fn opt<T>(&mut self, key: &str, flag: Option<T>, default: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.used.push(key.to_string());
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => Some(v),
            (None, Some(text)) => Some(text.parse().map_err(|e| anyhow::anyhow!("config key {key}: {e}"))?),
            (None, None) => default,
        };
        if let Some(v) = &value {
            self.record(key, v);
        }
        Ok(value)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        Ok(self.opt(key, flag, Some(default))?.expect("default given"))
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.retain(|(k, _)| k != key);
        self.resolved.push((key.to_string(), value.to_string()));
    }

    /// Config keys no option of the command consumed.
    pub fn unused(&self) -> Vec<&str> {
        self.file.keys().filter(|k| !self.used.contains(k)).map(String::as_str).collect()
    }

    pub fn text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.text()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let m = parse("# header\nlr = 0.01  # fast\n\nlr-decay-step=5\n").unwrap();
        assert_eq!(m["lr"], "0.01");
        assert_eq!(m["lr_decay_step"], "5");
        assert!(parse("novalue\n").is_err());
        assert!(parse("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let mut r = Resolver {
            file: parse("seed = 4\nlr = 0.5\nstray = 1").unwrap(),
            ..Resolver::default()
        };
        assert_eq!(r.get("seed", Some(9u64), 0).unwrap(), 9);
        assert_eq!(r.get("lr", None, 1.0f32).unwrap(), 0.5);
        assert_eq!(r.get("batch", None, 8usize).unwrap(), 8);
        assert_eq!(r.opt::<f64>("level", None, None).unwrap(), None);
        assert_eq!(r.unused(), vec!["stray"]);
        assert_eq!(r.text(), "seed = 9\nlr = 0.5\nbatch = 8\n");
    }

    #[test]
    fn bad_values_are_reported() {
        let mut r = Resolver {
            file: parse("seed = many").unwrap(),
            ..Resolver::default()
        };
        assert!(r.get("seed", None, 0u64).is_err());
    }
}
