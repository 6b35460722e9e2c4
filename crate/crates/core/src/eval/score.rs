use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{build_kshot_prompt, choice_letter, McqItem, PromptTemplate};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::par::Execution;
use crate::tensor::kernels::log_softmax_row;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    /// Next-token log-prob of each choice letter after the answer cue.
    #[default]
    Letter,
    /// Mean per-token log-prob of each full choice text.
    Continuation,
}

impl std::str::FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "letter" => Ok(ScoringMode::Letter),
            "continuation" => Ok(ScoringMode::Continuation),
            other => Err(Error::Config(format!("unknown scoring mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScores {
    pub chosen: usize,
    pub scores: Vec<f64>,
}

/// Last `limit` tokens of `ids`.
fn tail(ids: &[usize], limit: usize) -> &[usize] {
    &ids[ids.len().saturating_sub(limit)..]
}

fn row_logps<M: LanguageModel + ?Sized>(model: &M, input: &[usize]) -> Result<Vec<Vec<f64>>> {
    let logits = model.logits(input)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row: Vec<f64> = logits.row(r).iter().map(|&v| v as f64).collect();
            log_softmax_row(&row)
        })
        .collect())
}

/// Scores each continuation after `prompt` and picks the best; ties go to
/// the lowest index.
///
/// In letter mode every continuation is a single token and its score is
/// the next-token log-prob after the prompt. In continuation mode the score
/// is the sum of the continuation's token log-probs divided by its length.
/// Inputs longer than the model's context lose their oldest tokens.
pub fn score_choices<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[usize],
    continuations: &[Vec<usize>],
    mode: ScoringMode,
) -> Result<ChoiceScores> {
    if continuations.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 choices, got {}", continuations.len())));
    }
    if prompt.is_empty() || continuations.iter().any(Vec::is_empty) {
        return Err(Error::Contract("prompt and continuations must be non-empty".into()));
    }
    let max = model.max_seq();
    let scores: Vec<f64> = match mode {
        ScoringMode::Letter => {
            if let Some(c) = continuations.iter().find(|c| c.len() != 1) {
                return Err(Error::Contract(format!("letter mode needs one-token choices, got {}", c.len())));
            }
            let rows = row_logps(model, tail(prompt, max))?;
            let last = rows.last().expect("non-empty prompt");
            continuations
                .iter()
                .map(|c| {
                    last.get(c[0]).copied().ok_or(Error::Index {
                        what: "vocabulary",
                        index: c[0],
                        bound: last.len(),
                    })
                })
                .collect::<Result<_>>()?
        }
        ScoringMode::Continuation => continuations
            .iter()
            .map(|c| -> Result<f64> {
                let seq = [prompt, c].concat();
                let input = tail(&seq[..seq.len() - 1], max);
                let rows = row_logps(model, input)?;
                // Row `rows.len() − c.len() + j` predicts c[j].
                let first = rows.len().checked_sub(c.len()).ok_or_else(|| {
                    Error::Contract(format!("choice of {} tokens does not fit the context", c.len()))
                })?;
                let mut total = 0.0;
                for (j, &t) in c.iter().enumerate() {
                    total += *rows[first + j].get(t).ok_or(Error::Index {
                        what: "vocabulary",
                        index: t,
                        bound: model.vocab_size(),
                    })?;
                }
                Ok(total / c.len() as f64)
            })
            .collect::<Result<_>>()?,
    };
    let mut chosen = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[chosen] {
            chosen = i;
        }
    }
    Ok(ChoiceScores { chosen, scores })
}

/// Settings of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "five")]
    pub k: usize,
    #[serde(default)]
    pub mode: ScoringMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub execution: Execution,
}

fn five() -> usize {
    5
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: five(),
            mode: ScoringMode::Letter,
            seed: 0,
            template: PromptTemplate::default(),
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subjects: BTreeMap<String, SubjectScore>,
    pub overall: f64,
    pub n_items: usize,
    pub k: usize,
    pub scoring_mode: ScoringMode,
    /// Chosen index per item, in input order.
    pub predictions: Vec<usize>,
}

impl EvalReport {
    /// Aggregates per-item predictions.
    pub fn from_predictions(items: &[McqItem], predictions: Vec<usize>, k: usize, mode: ScoringMode) -> Self {
        let mut subjects: BTreeMap<String, SubjectScore> = BTreeMap::new();
        let mut correct = 0;
        for (item, &p) in items.iter().zip(&predictions) {
            let s = subjects.entry(item.subject.clone()).or_insert(SubjectScore {
                n: 0,
                correct: 0,
                accuracy: 0.0,
            });
            s.n += 1;
            if p == item.answer_index {
                s.correct += 1;
                correct += 1;
            }
        }
        for s in subjects.values_mut() {
            s.accuracy = s.correct as f64 / s.n as f64;
        }
        EvalReport {
            subjects,
            overall: correct as f64 / items.len().max(1) as f64,
            n_items: items.len(),
            k,
            scoring_mode: mode,
            predictions,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .subjects
            .keys()
            .map(|s| s.chars().count())
            .max()
            .unwrap_or(0)
            .max("Average".len());
        let mode = match self.scoring_mode {
            ScoringMode::Letter => "direct",
            ScoringMode::Continuation => "continuation",
        };
        let head = format!("Score ({}-shot, {mode})", self.k);
        writeln!(f, "{:<width$}  {:>6}  {:>w2$}", "Subject", "Items", head, w2 = head.len())?;
        writeln!(f, "{}", "-".repeat(width + 10 + head.len()))?;
        for (name, s) in &self.subjects {
            writeln!(f, "{:<width$}  {:>6}  {:>w2$.2}", name, s.n, 100.0 * s.accuracy, w2 = head.len())?;
        }
        writeln!(f, "{}", "-".repeat(width + 10 + head.len()))?;
        write!(f, "{:<width$}  {:>6}  {:>w2$.2}", "Average", self.n_items, 100.0 * self.overall, w2 = head.len())
    }
}

/// Scores every item with a k-shot prompt built from `dev_pool`.
pub fn evaluate<M: LanguageModel + ?Sized>(
    model: &M,
    items: &[McqItem],
    dev_pool: &[McqItem],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let picks = cfg.execution.map(items, |item| -> Result<usize> {
        let prompt = build_kshot_prompt(item, dev_pool, cfg.k, cfg.seed, &cfg.template)?;
        let continuations: Vec<Vec<usize>> = match cfg.mode {
            ScoringMode::Letter => (0..item.choices.len()).map(|i| vec![choice_letter(i) as usize]).collect(),
            ScoringMode::Continuation => item.choices.iter().map(|c| c.bytes().map(usize::from).collect()).collect(),
        };
        Ok(score_choices(model, &prompt, &continuations, cfg.mode)?.chosen)
    });
    let predictions = picks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_predictions(items, predictions, cfg.k, cfg.mode))
}
