//! Config files, flag parsing helpers and seed resolution.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const SEED_ENV: &str = "NETCLUS_SEED";

/// A malformed config value or flag.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn bad(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// `--seed`, else `NETCLUS_SEED`, else `None` (the config's own seed stands).
pub fn resolve_seed(flag: Option<u64>) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| bad(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Reads a TOML file over `defaults`: keys present in the file replace the
/// corresponding defaults, nested tables merge key by key.
pub fn load_over<T: Serialize + DeserializeOwned>(defaults: T, path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(defaults);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let mut base = toml::Table::try_from(&defaults).context("serializing defaults")?;
    merge(&mut base, file);
    toml::Value::Table(base)
        .try_into()
        .with_context(|| format!("parsing config {}", path.display()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `"γ,η"`.
pub fn parse_delta(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `gamma,eta`")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

/// `"a:b:step"`, inclusive of `b` up to rounding.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, step] = parts.as_slice() else {
        return Err("expected `start:stop:step`".into());
    };
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    let (a, b, step) = (p(a)?, p(b)?, p(step)?);
    if !(step.is_finite() && step > 0.0) || b < a {
        return Err("need step > 0 and stop >= start".into());
    }
    let count = ((b - a) / step + 1e-9).floor() as usize + 1;
    // Rounded to 12 decimals so 0.1 steps print as 0.3, not 0.30000000000000004.
    Ok((0..count)
        .map(|i| ((a + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.trim().parse::<T>().map_err(|e| format!("`{v}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_inclusive() {
        assert_eq!(parse_grid("0.1:0.9:0.2").unwrap(), vec![0.1, 0.3, 0.5, 0.7, 0.9]);
        assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1").is_err());
    }

    #[test]
    fn file_values_override_nested_defaults() {
        #[derive(Debug, PartialEq, Serialize, serde::Deserialize)]
        struct Inner {
            a: u32,
            b: u32,
        }
        #[derive(Debug, PartialEq, Serialize, serde::Deserialize)]
        struct Outer {
            x: f64,
            inner: Inner,
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[inner]\nb = 7\n").unwrap();
        let got = load_over(
            Outer {
                x: 1.5,
                inner: Inner { a: 1, b: 2 },
            },
            Some(&p),
        )
        .unwrap();
        assert_eq!(got, Outer { x: 1.5, inner: Inner { a: 1, b: 7 } });
    }

    #[test]
    fn delta_and_lists() {
        assert_eq!(parse_delta("0.5, 0.7").unwrap(), (0.5, 0.7));
        assert!(parse_delta("0.5").is_err());
        assert_eq!(parse_list::<usize>("1000,4000").unwrap(), vec![1000, 4000]);
    }
}
