use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Clean,
    Noisy,
    Simulated,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Clean => "clean",
            Domain::Noisy => "noisy",
            Domain::Simulated => "simulated",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Domain::Clean),
            "noisy" => Ok(Domain::Noisy),
            "simulated" => Ok(Domain::Simulated),
            other => Err(Error::Format(format!("unknown domain tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub domain: Domain,
    pub duration: f64,
    /// Per-STFT-frame class ids, when known.
    pub labels: Option<Vec<usize>>,
}

/// Tab-separated: `path<TAB>domain<TAB>duration[<TAB>comma-separated labels]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.path) {
                return Err(Error::Format(format!("duplicate manifest path {}", e.path.display())));
            }
            if !(e.duration > 0.0) {
                return Err(Error::Format(format!("non-positive duration for {}", e.path.display())));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 3 or 4 tab-separated fields",
                    lineno + 1
                )));
            }
            let duration = fields[2]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("manifest line {}: duration: {e}", lineno + 1)))?;
            let labels = match fields.get(3) {
                Some(l) if !l.is_empty() => Some(
                    l.split(',')
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::Format(format!("manifest line {}: labels: {e}", lineno + 1)))?,
                ),
                _ => None,
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                domain: fields[1].parse()?,
                duration,
                labels,
            });
        }
        Self::new(entries)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}", e.path.display(), e.domain, e.duration));
            if let Some(labels) = &e.labels {
                let joined: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
                out.push('\t');
                out.push_str(&joined.join(","));
            }
            out.push('\n');
        }
        out
    }

    /// Relative paths resolve against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            for e in &mut m.entries {
                if e.path.is_relative() {
                    e.path = dir.join(&e.path);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        let text = "a.wav\tclean\t2.5\nb.wav\tnoisy\t1\t0,1,1\n";
        let m = CorpusManifest::parse(text).unwrap();
        assert_eq!(m.entries[1].labels.as_deref(), Some(&[0, 1, 1][..]));
        assert_eq!(CorpusManifest::parse(&m.to_tsv()).unwrap(), m);
    }

    #[test]
    fn invariants() {
        assert!(CorpusManifest::parse("a.wav\tclean\t1\na.wav\tnoisy\t1\n").is_err());
        assert!(CorpusManifest::parse("a.wav\tclean\t0\n").is_err());
        assert!(CorpusManifest::parse("a.wav\tloud\t1\n").is_err());
        assert!(CorpusManifest::parse("a.wav\tclean\n").is_err());
    }
}
