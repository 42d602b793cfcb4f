//! CSV manifests: `path,label,split` for classification, `path,split` for
//! segmentation. Paths are relative to the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gft_core::pointops::PointCloud;

use crate::cloud::load_cloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    pub label: Option<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn is_classification(&self) -> bool {
        self.entries.first().is_some_and(|e| e.label.is_some())
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().filter_map(|e| e.label).max().map_or(0, |m| m + 1)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, entry: &Entry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(pcol), Some(scol)) = (col("path"), col("split")) else {
            return Err(Error::format(path, "manifest needs `path` and `split` columns"));
        };
        let lcol = col("label");
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let line = i + 2;
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            let label = match lcol {
                Some(c) => {
                    let raw = rec.get(c).unwrap_or("");
                    Some(raw.parse().map_err(|_| parse_err(format!("bad label {raw:?}")))?)
                }
                None => None,
            };
            let split = rec.get(scol).unwrap_or("").parse().map_err(parse_err)?;
            entries.push(Entry {
                path: PathBuf::from(rec.get(pcol).unwrap_or("")),
                label,
                split,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest { root, entries };
        m.check_labels(path)?;
        Ok(m)
    }

    fn check_labels(&self, path: &Path) -> Result<()> {
        let c = self.num_classes();
        let mut seen = vec![false; c];
        for e in &self.entries {
            if let Some(l) = e.label {
                seen[l] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::format(path, format!("labels are not dense: class {missing} has no entries")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let labelled = self.is_classification();
        if labelled {
            w.write_record(["path", "label", "split"]).map_err(csv_err)?;
        } else {
            w.write_record(["path", "split"]).map_err(csv_err)?;
        }
        for e in &self.entries {
            let p = e.path.to_string_lossy();
            let s = e.split.to_string();
            match e.label {
                Some(l) if labelled => w.write_record([p.as_ref(), &l.to_string(), &s]),
                _ => w.write_record([p.as_ref(), &s]),
            }
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads every cloud of one split, attaching the object label.
    pub fn load_split(&self, split: Split) -> Result<Vec<PointCloud>> {
        self.split(split)
            .map(|e| {
                let mut c = load_cloud(&self.resolve(e))?;
                c.object_label = e.label;
                Ok(c)
            })
            .collect()
    }
}
