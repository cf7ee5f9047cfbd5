//! Dataset manifests: one `split clean degraded` triple per line, paths
//! relative to the manifest. A `# degradation: ...` line records how the
//! degraded images were produced.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub clean: PathBuf,
    pub degraded: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub degradation: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("missing file {0}")]
    Missing(String),
    #[error("{0} appears in both the train and val splits")]
    Overlap(String),
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self, ManifestError> {
        let mut m = DatasetManifest::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(d) = line.strip_prefix("# degradation:") {
                m.degradation = Some(d.trim().to_string());
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [split, clean, degraded] = parts[..] else {
                return Err(ManifestError::Syntax {
                    line: i + 1,
                    reason: "expected: split clean_path degraded_path".into(),
                });
            };
            m.entries.push(ManifestEntry {
                split: split.parse().map_err(|reason| ManifestError::Syntax { line: i + 1, reason })?,
                clean: base.join(clean),
                degraded: base.join(degraded),
            });
        }
        Ok(m)
    }

    /// Reads and checks that every file exists and no file is shared by
    /// the train and val splits.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = DatasetManifest::parse(&text, base)?;
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<(), ManifestError> {
        let mut train = HashSet::new();
        for e in &self.entries {
            for p in [&e.clean, &e.degraded] {
                if !p.exists() {
                    return Err(ManifestError::Missing(p.display().to_string()));
                }
            }
            if e.split == Split::Train {
                train.insert(canonical(&e.clean));
                train.insert(canonical(&e.degraded));
            }
        }
        for e in self.entries.iter().filter(|e| e.split == Split::Val) {
            for p in [&e.clean, &e.degraded] {
                if train.contains(&canonical(p)) {
                    return Err(ManifestError::Overlap(p.display().to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Text form with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut s = String::new();
        if let Some(d) = &self.degradation {
            let _ = writeln!(s, "# degradation: {d}");
        }
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {}", e.split.as_str(), rel(&e.clean), rel(&e.degraded));
        }
        s
    }
}

fn canonical(p: &Path) -> PathBuf {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_write_back() {
        let base = Path::new("/data");
        let text = "# degradation: gaussian_noise:std=25,seed=0\ntrain a.ppm a_n.ppm\n\nval b.ppm b_n.ppm\n";
        let m = DatasetManifest::parse(text, base).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.split(Split::Val)[0].clean, PathBuf::from("/data/b.ppm"));
        assert_eq!(m.to_text(base), text.replace("\n\n", "\n"));
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(
            DatasetManifest::parse("train a.ppm", Path::new(".")),
            Err(ManifestError::Syntax { line: 1, .. })
        ));
        assert!(DatasetManifest::parse("holdout a b", Path::new(".")).is_err());
    }

    #[test]
    fn missing_and_overlapping_files() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.ppm", "b.ppm", "c.ppm"] {
            std::fs::write(dir.path().join(f), b"").unwrap();
        }
        let m = DatasetManifest::parse("train a.ppm b.ppm\nval c.ppm b.ppm\n", dir.path()).unwrap();
        assert!(matches!(m.check(), Err(ManifestError::Overlap(_))));
        let m = DatasetManifest::parse("train a.ppm zzz.ppm\n", dir.path()).unwrap();
        assert!(matches!(m.check(), Err(ManifestError::Missing(_))));
        let m = DatasetManifest::parse("train a.ppm b.ppm\nval c.ppm c.ppm\n", dir.path()).unwrap();
        assert!(m.check().is_ok());
    }
}
