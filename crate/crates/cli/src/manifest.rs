//! Plain-text run manifests made of `[section]` headers and `key = value` lines.
//!
//! Timings live in their own `[timings]` section so runs can be compared with
//! [`without_timings`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use malaria_core::metrics::MetricsReport;

use crate::CliError;

pub const TIMINGS_SECTION: &str = "timings";

#[derive(Debug, Default, Clone)]
pub struct Manifest {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends to `section`, creating it at the end if absent.
    pub fn put(&mut self, section: &str, key: impl Into<String>, value: impl ToString) {
        let entry = match self.sections.iter().position(|(s, _)| s == section) {
            Some(i) => &mut self.sections[i].1,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                &mut self.sections.last_mut().expect("just pushed").1
            }
        };
        entry.push((key.into(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, (name, entries)) in self.sections.iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    /// Writes to a temporary sibling then renames over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, self.render().as_bytes())
    }

    pub fn put_metrics(&mut self, section: &str, r: &MetricsReport) {
        let c = &r.confusion;
        self.put(section, "n", r.n);
        self.put(
            section,
            "confusion",
            format!("tn={} fp={} fn={} tp={}", c.tn, c.fp, c.fn_, c.tp),
        );
        self.put(section, "accuracy", r.accuracy);
        for (label, p) in [
            ("uninfected", &r.prf.per_class[0]),
            ("parasitized", &r.prf.per_class[1]),
            ("macro", &r.prf.macro_avg),
            ("weighted", &r.prf.weighted),
        ] {
            self.put(section, format!("precision.{label}"), p.precision);
            self.put(section, format!("recall.{label}"), p.recall);
            self.put(section, format!("f1.{label}"), p.f1);
        }
        self.put(
            section,
            "auc_roc",
            r.auc_roc.map_or("undefined".to_string(), |a| a.to_string()),
        );
        self.put(section, "rmse", r.rmse);
        if !r.prf.degenerate.is_empty() {
            self.put(section, "zero_denominators", r.prf.degenerate.join(","));
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| malaria_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Manifest text with the `[timings]` section removed.
pub fn without_timings(text: &str) -> String {
    let mut out = String::new();
    let mut skipping = false;
    for line in text.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            skipping = name == TIMINGS_SECTION;
        }
        if !skipping {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Value of `key` in `section`, if present.
pub fn lookup(text: &str, section: &str, key: &str) -> Option<String> {
    let mut current = "";
    for line in text.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name;
        } else if current == section {
            if let Some((k, v)) = line.split_once(" = ") {
                if k == key {
                    return Some(v.to_string());
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_strip_and_lookup() {
        let mut m = Manifest::new();
        m.put("run", "command", "train");
        m.put(TIMINGS_SECTION, "total_seconds", 1.5);
        m.put("run", "architecture", "alexnet");
        m.put("test", "accuracy", 0.1 + 0.2);
        let text = m.render();
        assert_eq!(
            lookup(&text, "run", "architecture").as_deref(),
            Some("alexnet")
        );
        assert_eq!(
            lookup(&text, "test", "accuracy")
                .unwrap()
                .parse::<f64>()
                .unwrap(),
            0.1 + 0.2
        );
        let stripped = without_timings(&text);
        assert!(!stripped.contains("total_seconds"));
        assert!(stripped.contains("[test]"));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.txt");
        let mut m = Manifest::new();
        m.put("a", "b", 1);
        m.write_atomic(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "[a]\nb = 1\n");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
