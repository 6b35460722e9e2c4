use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
}

/// One multiple-choice question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: String,
    pub choices: Vec<String>,
    #[serde(rename = "answer")]
    pub answer_index: usize,
    pub subject: String,
    pub split: Split,
}

impl McqItem {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.choices.len() < 2 {
            return Err(format!("need at least 2 choices, got {}", self.choices.len()));
        }
        if self.choices.len() > 26 {
            return Err(format!("at most 26 choices are supported, got {}", self.choices.len()));
        }
        if self.answer_index >= self.choices.len() {
            return Err(format!(
                "answer index {} out of range for {} choices",
                self.answer_index,
                self.choices.len()
            ));
        }
        let distinct: HashSet<&str> = self.choices.iter().map(String::as_str).collect();
        if distinct.len() != self.choices.len() {
            return Err("choices are not distinct".into());
        }
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        Ok(())
    }

    /// Hash of the question and its choices, used to spot duplicates and to
    /// keep a target out of its own exemplars.
    pub fn question_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.question.len() as u64).to_le_bytes());
        h.update(self.question.as_bytes());
        for c in &self.choices {
            h.update((c.len() as u64).to_le_bytes());
            h.update(c.as_bytes());
        }
        h.finalize().into()
    }
}

/// Items read from a file plus what was left out.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct McqFile {
    pub items: Vec<McqItem>,
    /// Invalid records dropped in lenient mode.
    pub rejected: usize,
    /// Repeats of an earlier question, dropped.
    pub duplicates: usize,
}

/// Reads `{question, choices, answer, subject, split}` JSON lines. Invalid
/// records are errors in strict mode and skipped otherwise; later repeats
/// of a question are always dropped.
pub fn load_mcq(path: &Path, strict: bool) -> Result<McqFile> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = McqFile::default();
    let mut seen = HashSet::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<McqItem>(&line)
            .map_err(|e| e.to_string())
            .and_then(|item| item.validate().map(|_| item));
        match parsed {
            Ok(item) => {
                if seen.insert(item.question_hash()) {
                    out.items.push(item);
                } else {
                    log::warn!("{}:{}: duplicate question dropped", path.display(), i + 1);
                    out.duplicates += 1;
                }
            }
            Err(message) if strict => {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message,
                })
            }
            Err(message) => {
                log::warn!("{}:{}: rejecting record: {message}", path.display(), i + 1);
                out.rejected += 1;
            }
        }
    }
    Ok(out)
}
