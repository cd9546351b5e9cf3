//! Output files stamped with the config hash and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Config;
use crate::error::{Error, Result};

/// Writes result files into one directory. JSON files carry `config_hash`
/// and `seed` fields, CSV files a leading `# config_hash=…, seed=…` line,
/// and NDJSON records a `config_hash` field.
#[derive(Clone, Debug)]
pub struct ReportWriter {
    dir: PathBuf,
    config_hash: String,
    seed: u64,
}

impl ReportWriter {
    /// Creates `dir` and writes the resolved config to `config.json`.
    pub fn new(dir: impl AsRef<Path>, config: &Config) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let w = Self {
            dir,
            config_hash: config.hash(),
            seed: config.seed,
        };
        fs::write(w.path("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
        Ok(w)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let doc = json!({
            "config_hash": self.config_hash,
            "seed": self.seed,
            "results": serde_json::to_value(value)?,
        });
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(p)
    }

    /// `body` must start with its header row.
    pub fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.path(name);
        let mut s = format!("# config_hash={}, seed={}\n", self.config_hash, self.seed);
        s += body;
        if !s.ends_with('\n') {
            s.push('\n');
        }
        fs::write(&p, s)?;
        Ok(p)
    }

    pub fn write_ndjson<T: Serialize>(&self, name: &str, records: &[T]) -> Result<PathBuf> {
        let mut s = String::new();
        for r in records {
            let mut v = serde_json::to_value(r)?;
            match &mut v {
                Value::Object(m) => {
                    m.insert("config_hash".into(), Value::String(self.config_hash.clone()));
                }
                _ => return Err(Error::Format("NDJSON records must be JSON objects".into())),
            }
            s += &serde_json::to_string(&v)?;
            s.push('\n');
        }
        let p = self.path(name);
        fs::write(&p, s)?;
        Ok(p)
    }
}

/// A named CSV table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

/// Writes `summary.json`, every table and the resolved config.
pub fn emit_report(dir: impl AsRef<Path>, config: &Config, summary: &Value, tables: &[Table]) -> Result<Vec<PathBuf>> {
    let w = ReportWriter::new(dir, config)?;
    let mut out = vec![w.path("config.json"), w.write_json("summary.json", summary)?];
    for t in tables {
        out.push(w.write_csv(&t.name, &t.csv)?);
    }
    Ok(out)
}

/// Strips the leading comment line of a CSV written by [`ReportWriter`].
pub fn csv_body(s: &str) -> &str {
    match s.strip_prefix('#') {
        Some(rest) => rest.split_once('\n').map_or("", |(_, b)| b),
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_results_are_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let c = Config::default();
        let files = emit_report(
            dir.path(),
            &c,
            &json!({}),
            &[Table { name: "curve.csv".into(), csv: "t,mean_logp,std_logp\n".into() }],
        )
        .unwrap();
        assert_eq!(files.len(), 3);
        let summary: Value = serde_json::from_str(&fs::read_to_string(&files[1]).unwrap()).unwrap();
        assert_eq!(summary["config_hash"], c.hash());
        assert_eq!(summary["seed"], 0);
        let csv = fs::read_to_string(&files[2]).unwrap();
        assert_eq!(csv_body(&csv), "t,mean_logp,std_logp\n");
        assert!(csv.starts_with(&format!("# config_hash={}, seed=0\n", c.hash())));
        let w = ReportWriter::new(dir.path(), &c).unwrap();
        let p = w.write_ndjson::<Value>("empty.ndjson", &[]).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "");
    }

    #[test]
    fn emitted_config_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Config::default();
        c.seed = 42;
        c.experiments.probe_grid = vec![1, 3];
        ReportWriter::new(dir.path(), &c).unwrap();
        let back = Config::load(dir.path().join("config.json")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn ndjson_records_carry_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let c = Config::default();
        let w = ReportWriter::new(dir.path(), &c).unwrap();
        let p = w.write_ndjson("r.ndjson", &[json!({"a": 1}), json!({"a": 2})]).unwrap();
        let text = fs::read_to_string(p).unwrap();
        for (i, line) in text.lines().enumerate() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["a"], i as u64 + 1);
            assert_eq!(v["config_hash"], c.hash());
        }
        assert!(w.write_ndjson("bad.ndjson", &[1]).is_err());
    }
}
