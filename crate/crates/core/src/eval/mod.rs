//! k-shot multiple-choice evaluation: record loading, prompt assembly,
//! per-choice log-likelihood scoring and subject-wise accuracy.

mod mcq;
mod prompt;
mod score;

pub use mcq::{load_mcq, McqFile, McqItem, Split};
pub use prompt::{build_kshot_prompt, choice_letter, select_exemplars, PromptTemplate};
pub use score::{evaluate, score_choices, ChoiceScores, EvalConfig, EvalReport, ScoringMode, SubjectScore};
