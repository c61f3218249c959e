//! Flat key-value run configuration: defaults, then the config file, then
//! command-line flags. Every flag has a config key of the same name (dashes
//! become underscores).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use gdgs::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: path.into(),
            message: e.message().to_string(),
        })?;
        let mut values = BTreeMap::new();
        for (k, v) in table {
            let s = match v {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(Error::Parse {
                        path: path.into(),
                        message: format!("key {k}: expected a scalar, found {}", other.type_str()),
                    })
                }
            };
            values.insert(k, s);
        }
        Ok(Self { values })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

/// Resolves settings for one command and records the effective values so
/// they can be printed back as a config file.
pub struct Resolver<'a> {
    file: &'a ConfigFile,
    effective: BTreeMap<String, String>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a ConfigFile) -> Self {
        Self {
            file,
            effective: BTreeMap::new(),
        }
    }

    /// Flag value if given, else the config file value, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.file.values.get(key) {
                Some(s) => s
                    .parse()
                    .map_err(|e| Error::Config(format!("config key {key}: cannot parse {s:?}: {e}")))?,
                None => default,
            },
        };
        self.effective.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`Resolver::get`] for settings without a default.
    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.values.get(key) {
                Some(s) => Some(
                    s.parse()
                        .map_err(|e| Error::Config(format!("config key {key}: cannot parse {s:?}: {e}")))?,
                ),
                None => None,
            },
        };
        let v: T = v.ok_or_else(|| Error::Config(format!("missing required setting --{}", key.replace('_', "-"))))?;
        self.effective.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Fails on config file keys the command never asked for.
    pub fn check_unknown(&self) -> Result<()> {
        let unknown: Vec<&str> = self.file.keys().filter(|k| !self.effective.contains_key(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    /// Effective settings as a flat TOML document.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.effective {
            let is_number = v.parse::<f64>().is_ok() && !v.contains("inf") && !v.contains("NaN");
            if is_number || v == "true" || v == "false" {
                out.push_str(&format!("{k} = {v}\n"));
            } else {
                out.push_str(&format!("{k} = {}\n", toml::Value::String(v.clone())));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_round_trip() {
        let f = ConfigFile::parse("steps = 20\nmode = \"3dgs\"\nlambda = 0.5\n", Path::new("c.toml")).unwrap();
        let mut r = Resolver::new(&f);
        assert_eq!(r.get("steps", Some(7usize), 1).unwrap(), 7);
        assert_eq!(r.get::<String>("mode", None, "gdgs".into()).unwrap(), "3dgs");
        assert_eq!(r.get("lambda", None, 0.2).unwrap(), 0.5);
        assert_eq!(r.get("beta", None, 0.2).unwrap(), 0.2);
        let text = r.to_toml();
        let g = ConfigFile::parse(&text, Path::new("d.toml")).unwrap();
        let mut r2 = Resolver::new(&g);
        assert_eq!(r2.get("steps", None, 1usize).unwrap(), 7);
        assert_eq!(r2.get::<String>("mode", None, "x".into()).unwrap(), "3dgs");
        assert_eq!(r2.get("beta", None, 9.0).unwrap(), 0.2);
    }

    #[test]
    fn bad_values() {
        let f = ConfigFile::parse("steps = \"many\"\n", Path::new("c.toml")).unwrap();
        let mut r = Resolver::new(&f);
        assert!(matches!(r.get("steps", None, 1usize), Err(Error::Config(_))));
        assert!(matches!(r.require::<String>("scene", None), Err(Error::Config(_))));
        assert!(ConfigFile::parse("a = [1]\n", Path::new("c.toml")).is_err());
        let f = ConfigFile::parse("stpes = 3\n", Path::new("c.toml")).unwrap();
        let mut r = Resolver::new(&f);
        r.get("steps", None, 1usize).unwrap();
        assert!(matches!(r.check_unknown(), Err(Error::Config(m)) if m.contains("stpes")));
        assert!(ConfigFile::parse("a = \n", Path::new("c.toml")).is_err());
    }
}
