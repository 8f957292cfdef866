//! JSON-Lines dataset manifests carrying phonemes, styles, and durations.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LsError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: String,
    pub phonemes: Vec<String>,
    pub styles: Vec<String>,
    /// Ground-truth durations in latent frames, aligned with `phonemes`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub durations: Option<Vec<usize>>,
    /// Reference transcript (tone-numbered pinyin) for WER scoring.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Synthesized audio path, filled in by the synth command.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub syn_path: Option<String>,
}

impl ManifestEntry {
    fn validate(&self) -> Result<()> {
        let fail = |message: String| LsError::Manifest {
            context: format!("entry {:?}", self.id),
            message,
        };
        if self.phonemes.is_empty() {
            return Err(fail("no phonemes".into()));
        }
        if self.phonemes.len() != self.styles.len() {
            return Err(fail(format!(
                "{} phonemes vs {} styles",
                self.phonemes.len(),
                self.styles.len()
            )));
        }
        if let Some(d) = &self.durations {
            if d.len() != self.phonemes.len() {
                return Err(fail(format!(
                    "{} durations vs {} phonemes",
                    d.len(),
                    self.phonemes.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| LsError::Manifest {
            context: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?;
        entry.validate()?;
        if !seen.insert(entry.id.clone()) {
            return Err(LsError::Manifest {
                context: format!("{}:{}", path.display(), lineno + 1),
                message: format!("duplicate id {:?}", entry.id),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        writeln!(f)?;
    }
    Ok(())
}
