use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::dedup::{ExactDedup, NearDedup, DEFAULT_SHINGLE, DEFAULT_THRESHOLD};
use super::Document;
use crate::error::{Error, Result};

fn default_min_chars() -> usize {
    32
}

fn default_max_chars() -> usize {
    100_000
}

fn default_charset_min() -> f64 {
    0.6
}

fn default_shingle() -> usize {
    DEFAULT_SHINGLE
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

/// One filtering rule. Lengths count Unicode scalar values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rule {
    MinLength {
        #[serde(default = "default_min_chars")]
        chars: usize,
    },
    MaxLength {
        #[serde(default = "default_max_chars")]
        chars: usize,
    },
    /// Drops documents whose share of letters and whitespace is below
    /// `min`; catches markup, tables of numbers and encoding debris.
    CharsetRatio {
        #[serde(default = "default_charset_min")]
        min: f64,
    },
    ExactDedup,
    NgramDedup {
        #[serde(default = "default_shingle")]
        n: usize,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::MinLength { .. } => "min_length",
            Rule::MaxLength { .. } => "max_length",
            Rule::CharsetRatio { .. } => "charset_ratio",
            Rule::ExactDedup => "exact_dedup",
            Rule::NgramDedup { .. } => "ngram_dedup",
        }
    }

    /// A rule by name with default parameters.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "min_length" => Rule::MinLength {
                chars: default_min_chars(),
            },
            "max_length" => Rule::MaxLength {
                chars: default_max_chars(),
            },
            "charset_ratio" => Rule::CharsetRatio {
                min: default_charset_min(),
            },
            "exact_dedup" => Rule::ExactDedup,
            "ngram_dedup" => Rule::NgramDedup {
                n: default_shingle(),
                threshold: default_threshold(),
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown filter rule {name:?} (expected one of min_length, max_length, \
                     charset_ratio, exact_dedup, ngram_dedup)"
                )))
            }
        })
    }
}

pub fn charset_ratio(text: &str) -> f64 {
    let (mut good, mut total) = (0usize, 0usize);
    for c in text.chars() {
        total += 1;
        if c.is_alphabetic() || c.is_whitespace() {
            good += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        good as f64 / total as f64
    }
}

enum Stage {
    MinLength(usize),
    MaxLength(usize),
    Charset(f64),
    Exact(ExactDedup),
    Near(NearDedup),
}

/// A stateful, streaming rule chain. Each document is tested against the
/// rules in order and removed by the first that fires.
pub struct FilterChain {
    stages: Vec<(&'static str, Stage)>,
    report: FilterReport,
}

impl FilterChain {
    pub fn new(rules: &[Rule]) -> Result<Self> {
        let mut report = FilterReport::default();
        let stages = rules
            .iter()
            .map(|r| {
                report.removed_by.entry(r.name().to_string()).or_insert(0);
                let s = match *r {
                    Rule::MinLength { chars } => Stage::MinLength(chars),
                    Rule::MaxLength { chars } => Stage::MaxLength(chars),
                    Rule::CharsetRatio { min } => {
                        if !(0.0..=1.0).contains(&min) {
                            return Err(Error::Config(format!("charset_ratio min {min} outside [0, 1]")));
                        }
                        Stage::Charset(min)
                    }
                    Rule::ExactDedup => Stage::Exact(ExactDedup::new()),
                    Rule::NgramDedup { n, threshold } => {
                        if n == 0 || !(0.0..=1.0).contains(&threshold) {
                            return Err(Error::Config(format!(
                                "ngram_dedup needs n >= 1 and threshold in [0, 1], got {n}, {threshold}"
                            )));
                        }
                        Stage::Near(NearDedup::new(n, threshold))
                    }
                };
                Ok((r.name(), s))
            })
            .collect::<Result<_>>()?;
        Ok(FilterChain { stages, report })
    }

    /// Returns `None` if `doc` survives, else the name of the rule that
    /// removed it. Updates the running report either way.
    pub fn check(&mut self, doc: &Document) -> Option<&'static str> {
        let bytes = doc.text.len() as u64;
        self.report.samples_in += 1;
        self.report.bytes_in += bytes;
        let mut fired = None;
        for (name, stage) in &mut self.stages {
            let keep = match stage {
                Stage::MinLength(n) => doc.text.chars().count() >= *n,
                Stage::MaxLength(n) => doc.text.chars().count() <= *n,
                Stage::Charset(min) => charset_ratio(&doc.text) >= *min,
                Stage::Exact(d) => d.insert(&doc.text),
                Stage::Near(d) => d.insert(&doc.text),
            };
            if !keep {
                fired = Some(*name);
                break;
            }
        }
        match fired {
            Some(name) => *self.report.removed_by.entry(name.to_string()).or_insert(0) += 1,
            None => {
                self.report.samples_out += 1;
                self.report.bytes_out += bytes;
            }
        }
        self.report.refresh();
        fired
    }

    pub fn report(&self) -> &FilterReport {
        &self.report
    }

    pub fn into_report(self) -> FilterReport {
        self.report
    }
}

/// Counts and reductions of one filtering run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub samples_in: u64,
    pub samples_out: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub sample_reduction_pct: f64,
    pub volume_reduction_pct: f64,
    pub removed_by: BTreeMap<String, u64>,
    /// Malformed input records skipped before filtering.
    #[serde(default)]
    pub malformed_skipped: u64,
}

/// `100 · (1 − out / in)`, or 0 for empty input.
pub fn reduction_pct(input: u64, output: u64) -> f64 {
    if input == 0 {
        0.0
    } else {
        100.0 * (1.0 - output as f64 / input as f64)
    }
}

impl FilterReport {
    fn refresh(&mut self) {
        self.sample_reduction_pct = reduction_pct(self.samples_in, self.samples_out);
        self.volume_reduction_pct = reduction_pct(self.bytes_in, self.bytes_out);
    }

    pub fn removed(&self) -> u64 {
        self.samples_in - self.samples_out
    }
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "samples: {} -> {} ({:.2}% reduction)",
            self.samples_in, self.samples_out, self.sample_reduction_pct
        )?;
        writeln!(
            f,
            "volume:  {} -> {} bytes ({:.2}% reduction)",
            self.bytes_in, self.bytes_out, self.volume_reduction_pct
        )?;
        for (rule, n) in &self.removed_by {
            writeln!(f, "  {rule}: {n} removed")?;
        }
        if self.malformed_skipped > 0 {
            writeln!(f, "  malformed: {} skipped", self.malformed_skipped)?;
        }
        Ok(())
    }
}

/// Runs `rules` over `docs`, keeping survivors in input order.
pub fn filter_chain(
    docs: impl IntoIterator<Item = Document>,
    rules: &[Rule],
) -> Result<(Vec<Document>, FilterReport)> {
    let mut chain = FilterChain::new(rules)?;
    let kept = docs
        .into_iter()
        .filter(|d| chain.check(d).is_none())
        .collect();
    Ok((kept, chain.into_report()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(i: usize, t: &str) -> Document {
        Document::new(i.to_string(), t, "s", "en")
    }

    #[test]
    fn repeated_document_halves() {
        let docs = vec![doc(0, "same text"), doc(1, "same text")];
        let (kept, r) = filter_chain(docs, &[Rule::ExactDedup]).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(r.sample_reduction_pct, 50.0);
        assert_eq!(r.volume_reduction_pct, 50.0);
        assert_eq!(r.removed_by["exact_dedup"], 1);
    }

    #[test]
    fn empty_chain_is_identity() {
        let docs = vec![doc(0, "a"), doc(1, "b")];
        let (kept, r) = filter_chain(docs.clone(), &[]).unwrap();
        assert_eq!(kept, docs);
        assert_eq!(r.sample_reduction_pct, 0.0);
        assert_eq!(r.volume_reduction_pct, 0.0);
    }

    #[test]
    fn first_rule_gets_the_blame() {
        let rules = [
            Rule::MinLength { chars: 5 },
            Rule::ExactDedup,
            Rule::CharsetRatio { min: 0.5 },
        ];
        let docs = vec![doc(0, "abc"), doc(1, "abc"), doc(2, "12345678"), doc(3, "hello world")];
        let (kept, r) = filter_chain(docs, &rules).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(r.removed_by["min_length"], 2);
        assert_eq!(r.removed_by["exact_dedup"], 0);
        assert_eq!(r.removed_by["charset_ratio"], 1);
    }

    #[test]
    fn unknown_rule_name() {
        assert!(matches!(Rule::by_name("bogus"), Err(Error::Config(_))));
        assert_eq!(Rule::by_name("ngram_dedup").unwrap().name(), "ngram_dedup");
        let r: std::result::Result<Rule, _> = serde_json::from_str(r#"{"rule":"bogus"}"#);
        assert!(r.is_err());
        let r: Rule = serde_json::from_str(r#"{"rule":"min_length","chars":3}"#).unwrap();
        assert_eq!(r, Rule::MinLength { chars: 3 });
    }

    #[test]
    fn percent_format() {
        let mut r = FilterReport {
            samples_in: 1000,
            samples_out: 164,
            bytes_in: 10_000,
            bytes_out: 5_987,
            ..Default::default()
        };
        r.refresh();
        let s = r.to_string();
        assert!(s.contains("83.60% reduction"), "{s}");
        assert!(s.contains("40.13% reduction"), "{s}");
    }
}
