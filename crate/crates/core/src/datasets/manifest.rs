use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::Waveform;
use crate::conditioning::{load_embedding_clip, EmbeddingClip};
use crate::error::{Error, Result};

use super::read_wav;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub wav: PathBuf,
    pub embedding: PathBuf,
    pub class_id: usize,
    pub duration: f64,
    /// For generated audio: index of the real entry whose condition was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub sample_rate: u32,
    pub split: Split,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(sample_rate: u32, split: Split, class_names: Vec<String>, entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Self {
        Self { schema_version: MANIFEST_SCHEMA_VERSION, sample_rate, split, class_names, entries, root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len().max(self.entries.iter().map(|e| e.class_id + 1).max().unwrap_or(0))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        self.entries.iter().for_each(|e| counts[e.class_id] += 1);
        counts
    }

    pub fn wav_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].wav)
    }

    pub fn embedding_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].embedding)
    }

    pub fn load_waveform(&self, i: usize) -> Result<Waveform> {
        read_wav(&self.wav_path(i), Some(self.sample_rate))
    }

    pub fn load_embedding(&self, i: usize) -> Result<EmbeddingClip> {
        load_embedding_clip(&self.embedding_path(i))
    }

    /// Every schema problem, each tagged with its entry index.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            out.push(format!("schema_version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})", self.schema_version));
        }
        if self.sample_rate == 0 {
            out.push("sample_rate must be positive".into());
        }
        for (i, e) in self.entries.iter().enumerate() {
            if !(e.duration > 0.0 && e.duration.is_finite()) {
                out.push(format!("entry {i}: duration {} is not positive", e.duration));
            }
            if !self.class_names.is_empty() && e.class_id >= self.class_names.len() {
                out.push(format!("entry {i}: class_id {} has no name", e.class_id));
            }
            if !self.wav_path(i).is_file() {
                out.push(format!("entry {i}: missing wav {}", e.wav.display()));
            }
            if !self.embedding_path(i).is_file() {
                out.push(format!("entry {i}: missing embedding {}", e.embedding.display()));
            }
        }
        out
    }
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(m)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json + "\n")?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parse and validate; all problems are reported together.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(vec![format!("{}: {e}", path.display())]))?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let problems = m.problems();
    if problems.is_empty() {
        Ok(m)
    } else {
        Err(Error::Manifest(problems))
    }
}
