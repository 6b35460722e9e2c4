use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One corpus document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(rename = "source", default = "unknown")]
    pub source_tag: String,
    #[serde(rename = "lang", default = "unknown")]
    pub language_tag: String,
}

fn unknown() -> String {
    "unknown".into()
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: &str, lang: &str) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            source_tag: source.into(),
            language_tag: lang.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    Jsonl,
    TxtDir,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(InputFormat::Jsonl),
            "txt-dir" => Ok(InputFormat::TxtDir),
            _ => Err(Error::Config(format!(
                "unknown input format {s:?} (expected jsonl or txt-dir)"
            ))),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    text: Option<String>,
    source: Option<String>,
    lang: Option<String>,
}

/// Streams documents from a JSONL source. Malformed records are skipped
/// and counted, or fail the stream in strict mode.
pub struct JsonlReader<R> {
    reader: R,
    path: PathBuf,
    line: usize,
    strict: bool,
    skipped: usize,
    seen: HashSet<String>,
    buf: String,
}

impl<R: BufRead> JsonlReader<R> {
    /// `name` labels the stream in errors and in ids synthesised for
    /// records without one.
    pub fn new(reader: R, name: impl Into<PathBuf>, strict: bool) -> Self {
        JsonlReader {
            reader,
            path: name.into(),
            line: 0,
            strict,
            skipped: 0,
            seen: HashSet::new(),
            buf: String::new(),
        }
    }

    /// Records dropped so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn parse(&mut self, line: &str) -> std::result::Result<Document, String> {
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let text = raw.text.ok_or("missing \"text\" field")?;
        if text.trim().is_empty() {
            return Err("empty text".into());
        }
        let id = match raw.id {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => return Err(format!("id must be a string or number, got {other}")),
            None => format!("{}:{}", self.path.display(), self.line),
        };
        if !self.seen.insert(id.clone()) {
            return Err(format!("duplicate id {id:?}"));
        }
        Ok(Document {
            id,
            text,
            source_tag: raw.source.unwrap_or_else(unknown),
            language_tag: raw.lang.unwrap_or_else(unknown),
        })
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            }
            self.line += 1;
            let line = std::mem::take(&mut self.buf);
            if line.trim().is_empty() {
                continue;
            }
            match self.parse(line.trim_end_matches(['\n', '\r'])) {
                Ok(doc) => return Some(Ok(doc)),
                Err(message) if self.strict => {
                    return Some(Err(Error::Record {
                        path: self.path.clone(),
                        line: self.line,
                        message,
                    }))
                }
                Err(message) => {
                    log::warn!("{}:{}: skipping record: {message}", self.path.display(), self.line);
                    self.skipped += 1;
                }
            }
        }
    }
}

/// Streams one document per `.txt` file of a directory, in file-name
/// order. The id is the file stem.
pub struct TxtDirReader {
    files: std::vec::IntoIter<PathBuf>,
    strict: bool,
    skipped: usize,
}

impl TxtDirReader {
    pub fn open(dir: &Path, strict: bool) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt") && p.is_file())
            .collect();
        files.sort();
        Ok(TxtDirReader {
            files: files.into_iter(),
            strict,
            skipped: 0,
        })
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl Iterator for TxtDirReader {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        for path in self.files.by_ref() {
            let problem = match std::fs::read(&path) {
                Ok(bytes) => match String::from_utf8(bytes) {
                    Ok(text) if !text.trim().is_empty() => {
                        let id = path
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default();
                        return Some(Ok(Document::new(id, text, "txt", "unknown")));
                    }
                    Ok(_) => "empty text".to_string(),
                    Err(_) => "not valid UTF-8".to_string(),
                },
                Err(e) => return Some(Err(Error::io(&path, e))),
            };
            if self.strict {
                return Some(Err(Error::Record {
                    path,
                    line: 0,
                    message: problem,
                }));
            }
            log::warn!("{}: skipping file: {problem}", path.display());
            self.skipped += 1;
        }
        None
    }
}

/// A document stream from either supported format.
pub enum DocumentReader {
    Jsonl(JsonlReader<BufReader<File>>),
    TxtDir(TxtDirReader),
}

impl DocumentReader {
    pub fn skipped(&self) -> usize {
        match self {
            DocumentReader::Jsonl(r) => r.skipped(),
            DocumentReader::TxtDir(r) => r.skipped(),
        }
    }
}

impl Iterator for DocumentReader {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            DocumentReader::Jsonl(r) => r.next(),
            DocumentReader::TxtDir(r) => r.next(),
        }
    }
}

/// Opens `path` as a streaming document source.
pub fn ingest(path: &Path, format: InputFormat, strict: bool) -> Result<DocumentReader> {
    match format {
        InputFormat::Jsonl => {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            Ok(DocumentReader::Jsonl(JsonlReader::new(BufReader::new(f), path, strict)))
        }
        InputFormat::TxtDir => Ok(DocumentReader::TxtDir(TxtDirReader::open(path, strict)?)),
    }
}

/// Reads every document of `path` into memory, returning them with the
/// number of skipped records.
pub fn ingest_all(path: &Path, format: InputFormat, strict: bool) -> Result<(Vec<Document>, usize)> {
    let mut r = ingest(path, format, strict)?;
    let docs = r.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((docs, r.skipped()))
}
