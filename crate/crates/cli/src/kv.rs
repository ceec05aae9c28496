//! Key-value config files: one `key = value` per line, `#` comments.

use milr_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Default, Clone)]
pub struct Kv {
    map: BTreeMap<String, String>,
    used: std::cell::RefCell<Vec<String>>,
}

impl Kv {
    pub fn load(path: Option<&Path>) -> Result<Kv> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (ln, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("{}:{}: expected key = value", path.display(), ln + 1))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Kv {
            map,
            used: Default::default(),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key).map(|s| s.as_str());
        if v.is_some() {
            self.used.borrow_mut().push(key.to_string());
        }
        v
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: '{s}'"))),
        }
    }

    pub fn get_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value for {key}: '{s}'"))),
        }
    }

    pub fn get_list<T: std::str::FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad value for {key}: '{p}'")))
                })
                .collect(),
        }
    }

    pub fn get_string(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    /// Error on any key that no command consumed (catches typos).
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        for k in self.map.keys() {
            if !used.iter().any(|u| u == k) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
        }
        Ok(())
    }
}
