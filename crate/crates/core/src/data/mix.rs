use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::tokenize;
use super::Document;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixUnit {
    #[default]
    Token,
    Document,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnExhausted {
    /// Restart the corpus and bump its epoch counter.
    #[default]
    Wrap,
    /// End the stream.
    Stop,
}

fn default_chunk() -> usize {
    512
}

/// Target composition of a mixed stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    /// Relative weight per language tag, e.g. `ko: 9, en: 1`.
    pub ratios: BTreeMap<String, f64>,
    #[serde(default)]
    pub unit: MixUnit,
    #[serde(default = "default_chunk")]
    pub chunk_tokens: usize,
    #[serde(default)]
    pub on_exhausted: OnExhausted,
}

impl MixSpec {
    pub fn new(ratios: &[(&str, f64)]) -> Self {
        MixSpec {
            ratios: ratios.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            unit: MixUnit::Token,
            chunk_tokens: default_chunk(),
            on_exhausted: OnExhausted::Wrap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::Config("mix spec needs at least one tag".into()));
        }
        if let Some((k, v)) = self.ratios.iter().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("ratio for {k} must be positive, got {v}")));
        }
        if self.chunk_tokens == 0 {
            return Err(Error::Config("chunk_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Normalised shares in tag order.
    pub fn shares(&self) -> Vec<(String, f64)> {
        let total: f64 = self.ratios.values().sum();
        self.ratios
            .iter()
            .map(|(k, &v)| (k.clone(), v / total))
            .collect()
    }
}

/// Splits `budget` units over `shares` by the largest-remainder method.
pub fn apportion(shares: &[f64], budget: u64) -> Vec<u64> {
    let exact: Vec<f64> = shares.iter().map(|s| s * budget as f64).collect();
    let mut out: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let mut left = budget - out.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// One emitted piece of the mixed stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixItem {
    pub tag: String,
    /// Passes completed over this tag's corpus before this item.
    pub epoch: u32,
    /// Documents this item draws from.
    pub doc_ids: Vec<String>,
    pub tokens: Vec<usize>,
}

impl MixItem {
    pub fn units(&self, unit: MixUnit) -> u64 {
        match unit {
            MixUnit::Token => self.tokens.len() as u64,
            MixUnit::Document => 1,
        }
    }
}

struct Cursor<'a> {
    docs: &'a [Document],
    doc: usize,
    offset: usize,
    current: Vec<usize>,
    epoch: u32,
}

impl<'a> Cursor<'a> {
    fn new(docs: &'a [Document]) -> Self {
        Cursor {
            docs,
            doc: 0,
            offset: 0,
            current: docs.first().map(|d| tokenize(&d.text, true)).unwrap_or_default(),
            epoch: 0,
        }
    }

    /// Advances to the next document; false when the corpus ended and
    /// wrapping is off.
    fn advance(&mut self, wrap: bool) -> bool {
        self.doc += 1;
        self.offset = 0;
        if self.doc == self.docs.len() {
            if !wrap {
                return false;
            }
            self.doc = 0;
            self.epoch += 1;
        }
        self.current = tokenize(&self.docs[self.doc].text, true);
        true
    }

    fn take_tokens(&mut self, want: usize, wrap: bool) -> Option<(u32, Vec<String>, Vec<usize>)> {
        if self.doc >= self.docs.len() {
            return None;
        }
        let epoch = self.epoch;
        let mut ids = Vec::new();
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.offset == self.current.len() && !self.advance(wrap) {
                self.doc = self.docs.len();
                break;
            }
            let n = (want - out.len()).min(self.current.len() - self.offset);
            out.extend_from_slice(&self.current[self.offset..self.offset + n]);
            self.offset += n;
            let id = &self.docs[self.doc].id;
            if ids.last() != Some(id) {
                ids.push(id.clone());
            }
        }
        (!out.is_empty()).then_some((epoch, ids, out))
    }

    fn take_document(&mut self, wrap: bool) -> Option<(u32, Vec<String>, Vec<usize>)> {
        if self.doc >= self.docs.len() {
            return None;
        }
        let item = (
            self.epoch,
            vec![self.docs[self.doc].id.clone()],
            std::mem::take(&mut self.current),
        );
        if !self.advance(wrap) {
            self.doc = self.docs.len();
        }
        Some(item)
    }
}

/// Interleaves per-tag corpora into a stream of `budget` units whose
/// composition follows `spec`.
///
/// Each tag's quota is fixed up front by largest remainder; at every step
/// the tag furthest behind its pro-rata share emits the next chunk (ties
/// broken by a seeded tag order). Chunks are cut at `chunk_tokens` tokens
/// and never overshoot a tag's quota, so the realised mix matches the
/// quota to the unit. Every tag keeps its corpus order.
pub fn mix_sampler(
    corpora: &BTreeMap<String, Vec<Document>>,
    spec: &MixSpec,
    seed: u64,
    budget: u64,
) -> Result<Vec<MixItem>> {
    spec.validate()?;
    let shares = spec.shares();
    for (tag, _) in &shares {
        match corpora.get(tag) {
            None => return Err(Error::Config(format!("no corpus for mix tag {tag:?}"))),
            Some(d) if d.is_empty() => {
                return Err(Error::Config(format!("corpus for mix tag {tag:?} is empty")))
            }
            _ => {}
        }
    }
    let quotas = apportion(&shares.iter().map(|(_, s)| *s).collect::<Vec<_>>(), budget);
    let mut priority: Vec<usize> = (0..shares.len()).collect();
    priority.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rank = vec![0; shares.len()];
    for (r, &t) in priority.iter().enumerate() {
        rank[t] = r;
    }
    let mut cursors: Vec<Cursor> = shares.iter().map(|(t, _)| Cursor::new(&corpora[t])).collect();
    let mut emitted = vec![0u64; shares.len()];
    let mut total = 0u64;
    let mut out = Vec::new();
    let wrap = spec.on_exhausted == OnExhausted::Wrap;
    loop {
        // Deficit against the pro-rata share of what has been emitted.
        let pick = (0..shares.len())
            .filter(|&t| emitted[t] < quotas[t])
            .max_by(|&a, &b| {
                let da = shares[a].1 * total as f64 - emitted[a] as f64;
                let db = shares[b].1 * total as f64 - emitted[b] as f64;
                da.total_cmp(&db).then(rank[b].cmp(&rank[a]))
            });
        let Some(t) = pick else { break };
        let remaining = quotas[t] - emitted[t];
        let taken = match spec.unit {
            MixUnit::Token => {
                let want = (spec.chunk_tokens as u64).min(remaining) as usize;
                cursors[t].take_tokens(want, wrap)
            }
            MixUnit::Document => cursors[t].take_document(wrap),
        };
        let Some((epoch, doc_ids, tokens)) = taken else {
            log::warn!("mix corpus {:?} exhausted; stopping the stream", shares[t].0);
            break;
        };
        let item = MixItem {
            tag: shares[t].0.clone(),
            epoch,
            doc_ids,
            tokens,
        };
        let n = item.units(spec.unit);
        emitted[t] += n;
        total += n;
        out.push(item);
    }
    Ok(out)
}

/// Realised share of each tag in `items`.
pub fn realized_shares(items: &[MixItem], unit: MixUnit) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for i in items {
        *counts.entry(i.tag.clone()).or_default() += i.units(unit);
    }
    let total: u64 = counts.values().sum();
    counts
        .into_iter()
        .map(|(k, v)| (k, v as f64 / total.max(1) as f64))
        .collect()
}
