use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split `{other}` (valid: train, val, test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub path: PathBuf,
    pub split: Split,
    pub fold: Option<usize>,
}

/// Tab-separated `video_id  path  split  fold` listing, fold `-` when
/// unassigned. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.video_id.as_str()) {
                return Err(Error::config(format!(
                    "duplicate video id `{}` in manifest",
                    e.video_id
                )));
            }
            if e.video_id.contains(['\t', '\n']) {
                return Err(Error::config(format!(
                    "video id `{}` contains a tab or newline",
                    e.video_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::config(format!(
                    "manifest line {}: expected 4 tab-separated columns, got {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let fold = match cols[3] {
                "-" => None,
                f => Some(f.parse::<usize>().map_err(|_| {
                    Error::config(format!("manifest line {}: bad fold `{f}`", lineno + 1))
                })?),
            };
            let path = PathBuf::from(cols[1]);
            entries.push(ManifestEntry {
                video_id: cols[0].to_string(),
                path: if path.is_relative() {
                    base.join(path)
                } else {
                    path
                },
                split: cols[2].parse()?,
                fold,
            });
        }
        Self::new(entries)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base)?;
        for e in &m.entries {
            if !e.path.is_file() {
                return Err(Error::io(
                    &e.path,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("feature file for video `{}` not found", e.video_id),
                    ),
                ));
            }
        }
        Ok(m)
    }

    /// Serializes with paths made relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            let fold = e.fold.map_or_else(|| "-".to_string(), |f| f.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.video_id,
                p.display(),
                e.split,
                fold
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, video_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.video_id == video_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_serialize() {
        let text = "a\ta.afb1\ttrain\t0\nb\tsub/b.afb1\tval\t-\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.entries[0].path, PathBuf::from("/data/a.afb1"));
        assert_eq!(m.entries[0].fold, Some(0));
        assert_eq!(m.entries[1].split, Split::Val);
        assert_eq!(m.entries[1].fold, None);
        assert_eq!(m.to_text(Path::new("/data")), text);
    }

    #[test]
    fn rejects_duplicates_and_bad_rows() {
        let base = Path::new(".");
        assert!(Manifest::parse("a\tx\ttrain\t-\na\ty\tval\t-\n", base).is_err());
        assert!(Manifest::parse("a\tx\ttrain\n", base).is_err());
        assert!(Manifest::parse("a\tx\tholdout\t-\n", base).is_err());
        assert!(Manifest::parse("a\tx\ttrain\tq\n", base).is_err());
    }

    #[test]
    fn load_requires_files() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("manifest.tsv");
        fs::write(&mpath, "a\tmissing.afb1\ttrain\t-\n").unwrap();
        assert!(Manifest::load(&mpath).unwrap_err().is_io());
    }
}
