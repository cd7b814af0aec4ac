use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Everything a command produces besides its config echo.
#[derive(Debug, Clone)]
pub struct Outcome {
    /// Contents of `results.csv`.
    pub results_csv: Vec<u8>,
    pub metrics: serde_json::Value,
    /// Additional files written next to the results, by name.
    pub extra: Vec<(String, Vec<u8>)>,
    /// Internal checks that did not hold.
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Serializes rows with a header taken from the field names.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().context("flushing csv buffer")
}

/// `<out>/<command>/<timestamp>/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path, command: &str) -> Result<Self> {
        let base = out.join(command);
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let mut path = base.join(&stamp);
        let mut n = 1;
        while path.exists() {
            path = base.join(format!("{stamp}-{n}"));
            n += 1;
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir { path })
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        self.write_bytes(name, &serde_json::to_vec_pretty(value)?)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    /// Writes `config.json`, `results.csv`, `metrics.json`, the extra files
    /// and, when checks failed, `failures.json`.
    pub fn write_run<C: Serialize>(&self, config: &C, outcome: &Outcome) -> Result<()> {
        self.write_json("config.json", config)?;
        self.write_bytes("results.csv", &outcome.results_csv)?;
        self.write_json("metrics.json", &outcome.metrics)?;
        for (name, bytes) in &outcome.extra {
            self.write_bytes(name, bytes)?;
        }
        if !outcome.passed() {
            self.write_json(
                "failures.json",
                &serde_json::json!({ "failures": outcome.failures }),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: u32,
        b: f64,
    }

    #[test]
    fn csv_header_from_fields() {
        let bytes = rows_to_csv(&[Row { a: 1, b: 0.5 }]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "a,b\n1,0.5\n");
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunDir::create(tmp.path(), "x").unwrap();
        let b = RunDir::create(tmp.path(), "x").unwrap();
        assert_ne!(a.path, b.path);
        assert!(a.path.starts_with(tmp.path().join("x")));
        let outcome = Outcome {
            results_csv: b"k\n1\n".to_vec(),
            metrics: serde_json::json!({"k": 1}),
            extra: vec![("grid.csv".into(), b"x\n".to_vec())],
            failures: vec!["nope".into()],
        };
        a.write_run(&serde_json::json!({"seed": 3}), &outcome)
            .unwrap();
        for f in [
            "config.json",
            "results.csv",
            "metrics.json",
            "grid.csv",
            "failures.json",
        ] {
            assert!(a.path.join(f).exists(), "{f}");
        }
    }
}
