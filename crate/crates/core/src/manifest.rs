//! JSON Lines dataset index binding sharp/blurry pairs, captions, tree
//! labels and splits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capparse::{prune_to_tree, CaptionTreeLabels, Tagger, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub sharp_path: PathBuf,
    pub blurry_path: PathBuf,
    pub severity: f64,
    pub captions: Vec<String>,
    /// One label set per caption, empty until vocabularies exist.
    #[serde(default)]
    pub tree_labels: Vec<CaptionTreeLabels>,
    pub split: Split,
}

/// Records plus the directory relative paths are resolved against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            records: Vec::new(),
            root: root.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Reads a manifest and checks that every record is well formed and
    /// its images exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut m = Manifest::new(root);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if rec.captions.is_empty() {
                return Err(Error::Manifest(format!("record {} has no caption", rec.id)));
            }
            if !rec.tree_labels.is_empty() && rec.tree_labels.len() != rec.captions.len() {
                return Err(Error::Manifest(format!(
                    "record {} has {} label sets for {} captions",
                    rec.id,
                    rec.tree_labels.len(),
                    rec.captions.len()
                )));
            }
            for p in [&rec.sharp_path, &rec.blurry_path] {
                if !m.resolve(p).exists() {
                    return Err(Error::Manifest(format!(
                        "record {}: {} does not exist",
                        rec.id,
                        p.display()
                    )));
                }
            }
            m.records.push(rec);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Fills every record's tree labels from its captions.
    pub fn label(&mut self, tagger: &dyn Tagger, entities: &Vocab, relations: &Vocab) {
        for r in &mut self.records {
            r.tree_labels = r
                .captions
                .iter()
                .map(|c| match tagger.tag(c) {
                    Ok(tokens) => prune_to_tree(&tokens, entities, relations),
                    Err(_) => CaptionTreeLabels([0; 7]),
                })
                .collect();
        }
    }

    /// Checks that all labels are inside the given vocabulary sizes.
    pub fn validate_labels(&self, entities: usize, relations: usize) -> Result<()> {
        for r in &self.records {
            if r.tree_labels.len() != r.captions.len() {
                return Err(Error::Manifest(format!("record {} is missing tree labels", r.id)));
            }
            for l in &r.tree_labels {
                l.validate(entities, relations)
                    .map_err(|e| Error::Manifest(format!("record {}: {e}", r.id)))?;
            }
        }
        Ok(())
    }
}
