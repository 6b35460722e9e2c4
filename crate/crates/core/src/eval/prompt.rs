use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::McqItem;
use crate::data::tokenizer::BOS;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

fn default_header() -> String {
    "The following are multiple choice questions about {subject}.".into()
}

fn default_cue() -> String {
    "Answer:".into()
}

fn default_separator() -> String {
    "\n\n".into()
}

/// Text layout of a k-shot prompt.
///
/// ```text
/// {header}
///
/// {question}
/// A. {choice}
/// B. {choice}
/// Answer: B
///
/// {question}
/// A. {choice}
/// B. {choice}
/// Answer:
/// ```
///
/// The prompt ends with the cue and one space, so the next byte is the
/// answer letter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    /// First block; `{subject}` is substituted. Empty disables it.
    #[serde(default = "default_header")]
    pub header: String,
    #[serde(default = "default_cue")]
    pub answer_cue: String,
    #[serde(default = "default_separator")]
    pub separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            header: default_header(),
            answer_cue: default_cue(),
            separator: default_separator(),
        }
    }
}

/// Letter of choice `i`: `A`, `B`, ...
pub fn choice_letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

impl PromptTemplate {
    fn block(&self, item: &McqItem, answer: Option<usize>) -> String {
        let mut s = item.question.clone();
        for (i, c) in item.choices.iter().enumerate() {
            s.push('\n');
            s.push(choice_letter(i));
            s.push_str(". ");
            s.push_str(c);
        }
        s.push('\n');
        s.push_str(&self.answer_cue);
        s.push(' ');
        if let Some(a) = answer {
            s.push(choice_letter(a));
        }
        s
    }

    /// Full prompt text for `item` after `exemplars`.
    pub fn render(&self, item: &McqItem, exemplars: &[&McqItem]) -> String {
        let mut blocks = Vec::with_capacity(exemplars.len() + 2);
        if !self.header.is_empty() {
            blocks.push(self.header.replace("{subject}", &item.subject));
        }
        blocks.extend(exemplars.iter().map(|e| self.block(e, Some(e.answer_index))));
        blocks.push(self.block(item, None));
        blocks.join(&self.separator)
    }
}

/// `k` exemplars for `item` from the same-subject part of `dev_pool`.
///
/// The pool is shuffled once per `(seed, subject)` and the first `k`
/// entries that are not the target itself are taken, so every target of a
/// subject sees the same exemplars unless it is one of them.
pub fn select_exemplars<'a>(item: &McqItem, dev_pool: &'a [McqItem], k: usize, seed: u64) -> Result<Vec<&'a McqItem>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut pool: Vec<&McqItem> = dev_pool.iter().filter(|d| d.subject == item.subject).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("kshot/{}", item.subject)));
    pool.shuffle(&mut rng);
    let target = item.question_hash();
    let picked: Vec<&McqItem> = pool.into_iter().filter(|d| d.question_hash() != target).take(k).collect();
    if picked.len() < k {
        return Err(Error::Contract(format!(
            "subject {:?} has {} dev exemplars, {k}-shot needs {k}",
            item.subject,
            picked.len()
        )));
    }
    Ok(picked)
}

/// Token ids of the k-shot prompt for `item`, starting with BOS.
pub fn build_kshot_prompt(
    item: &McqItem,
    dev_pool: &[McqItem],
    k: usize,
    seed: u64,
    template: &PromptTemplate,
) -> Result<Vec<usize>> {
    let exemplars = select_exemplars(item, dev_pool, k, seed)?;
    let text = template.render(item, &exemplars);
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.bytes().map(usize::from));
    Ok(ids)
}
