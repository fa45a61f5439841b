//! Text-side attack: word importance ranking, substitute candidate
//! generation, and greedy caption rewriting against an image embedding.
//!
//! Candidates come from one of four sources: the word embedding table
//! filtered by a similarity threshold (optionally falling back to a filler
//! model for words without a vector), the table alone, the filler alone, or
//! a user-supplied synonym file. The greedy pass replaces at most `eps_t`
//! words per caption, each replacement gated on a strict increase of the
//! image-text separation loss.

use std::collections::BTreeSet;

use ndarray::Array1;

use crate::attack_math::pair_loss;
use crate::backend::{EmbeddingVector, ModelBackend};
use crate::error::{CmiError, Result};

/// Whitespace-tokenized caption. Always holds at least one word, and no
/// word contains whitespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    words: Vec<String>,
}

impl Caption {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(CmiError::InvalidInput("caption has no words".into()));
        }
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(CmiError::InvalidInput(format!(
                    "caption word '{w}' is empty or contains whitespace"
                )));
            }
        }
        Ok(Caption { words })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.split_whitespace().map(String::from).collect())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// Copy with the word at `position` replaced by `token`.
    pub fn with_word(&self, position: usize, token: &str) -> Result<Caption> {
        if position >= self.words.len() {
            return Err(CmiError::InvalidInput(format!(
                "position {position} out of range for a {}-word caption",
                self.words.len()
            )));
        }
        let mut words = self.words.clone();
        words[position] = token.to_string();
        Caption::new(words)
    }

    /// Copy with the word at `position` removed; `None` when that would
    /// leave the caption empty.
    fn without_word(&self, position: usize) -> Option<Caption> {
        if self.words.len() <= 1 {
            return None;
        }
        let mut words = self.words.clone();
        words.remove(position);
        Some(Caption { words })
    }

    /// Positions where this caption's words differ from `original`.
    pub fn diff_positions(&self, original: &Caption) -> Vec<usize> {
        self.words
            .iter()
            .zip(original.words.iter())
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Token-to-vector map with a fixed dimension. Tokens iterate in sorted
/// order, so every scan over the table is deterministic.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    entries: std::collections::BTreeMap<String, Array1<f64>>,
    dim: usize,
}

impl WordEmbeddingTable {
    pub fn new(entries: Vec<(String, Array1<f64>)>) -> Result<Self> {
        let Some((_, first)) = entries.first() else {
            return Err(CmiError::InvalidInput("embedding table is empty".into()));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(CmiError::InvalidInput("embedding table vectors are zero-length".into()));
        }
        let mut map = std::collections::BTreeMap::new();
        for (token, vec) in entries {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(CmiError::InvalidInput(format!(
                    "table token '{token}' is empty or contains whitespace"
                )));
            }
            if vec.len() != dim {
                return Err(CmiError::InvalidInput(format!(
                    "token '{token}' has dimension {} but the table uses {dim}",
                    vec.len()
                )));
            }
            if !vec.iter().all(|v| v.is_finite()) {
                return Err(CmiError::InvalidInput(format!(
                    "token '{token}' has non-finite vector entries"
                )));
            }
            if vec.iter().all(|v| *v == 0.0) {
                return Err(CmiError::InvalidInput(format!("token '{token}' has a zero vector")));
            }
            if map.insert(token.clone(), vec).is_some() {
                return Err(CmiError::InvalidInput(format!("duplicate table token '{token}'")));
            }
        }
        Ok(WordEmbeddingTable { entries: map, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Vector for a token: verbatim match first, lowercase on miss.
    pub fn lookup(&self, token: &str) -> Option<&Array1<f64>> {
        self.entries
            .get(token)
            .or_else(|| self.entries.get(&token.to_lowercase()))
    }

    /// Tokens whose vector cosine with `word`'s vector strictly exceeds
    /// `tau`, excluding the word itself, sorted by similarity descending
    /// (ties in token order), truncated to `k`. `None` when the word has
    /// no vector.
    pub fn neighbors(&self, word: &str, tau: f64, k: usize) -> Option<Vec<(String, f64)>> {
        let anchor = self.lookup(word)?;
        let anchor_norm = vec_norm(anchor);
        let word_lower = word.to_lowercase();
        let mut scored: Vec<(String, f64)> = self
            .entries
            .iter()
            .filter(|(token, _)| *token != word && **token != word_lower)
            .filter_map(|(token, vec)| {
                let cos = anchor.dot(vec) / (anchor_norm * vec_norm(vec));
                (cos > tau).then(|| (token.clone(), cos))
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("cosines are finite"));
        scored.truncate(k);
        Some(scored)
    }
}

fn vec_norm(v: &Array1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Deterministic stand-in for a masked language model: proposes tokens
/// from a fixed vocabulary regardless of context.
pub trait FillerModel: Send + Sync {
    /// Up to `k` replacement proposals for the word at `position`, never
    /// including the current word itself.
    fn propose(&self, caption: &Caption, position: usize, k: usize) -> Result<Vec<String>>;
}

/// Filler that proposes the first `k` vocabulary tokens in sorted order.
/// Deliberately similarity-blind: it is the weak word-level baseline the
/// guided sources are compared against.
pub struct UnigramFiller {
    vocab: Vec<String>,
}

impl UnigramFiller {
    pub fn new(mut vocab: Vec<String>) -> Result<Self> {
        if vocab.is_empty() {
            return Err(CmiError::InvalidInput("filler vocabulary is empty".into()));
        }
        vocab.sort();
        vocab.dedup();
        Ok(UnigramFiller { vocab })
    }

    pub fn from_table(table: &WordEmbeddingTable) -> Self {
        // Table tokens are already sorted, unique, and non-empty.
        UnigramFiller { vocab: table.tokens().map(String::from).collect() }
    }
}

impl FillerModel for UnigramFiller {
    fn propose(&self, caption: &Caption, position: usize, k: usize) -> Result<Vec<String>> {
        if position >= caption.len() {
            return Err(CmiError::InvalidInput(format!(
                "position {position} out of range for a {}-word caption",
                caption.len()
            )));
        }
        let current = &caption.words()[position];
        let current_lower = current.to_lowercase();
        Ok(self
            .vocab
            .iter()
            .filter(|t| *t != current && **t != current_lower)
            .take(k)
            .cloned()
            .collect())
    }
}

/// Token-to-synonym-list map. Lookup order within a list is preserved as
/// given in the source file.
#[derive(Debug, Clone, Default)]
pub struct SynonymMap {
    entries: std::collections::BTreeMap<String, Vec<String>>,
}

impl SynonymMap {
    pub fn new(entries: std::collections::BTreeMap<String, Vec<String>>) -> Self {
        SynonymMap { entries }
    }

    pub fn get(&self, token: &str) -> Option<&[String]> {
        self.entries
            .get(token)
            .or_else(|| self.entries.get(&token.to_lowercase()))
            .map(Vec::as_slice)
    }

    pub fn entries(&self) -> &std::collections::BTreeMap<String, Vec<String>> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Where a candidate list came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateOrigin {
    EmbeddingTable,
    FillerModel,
    SynonymFile,
}

/// Replacement candidates for one caption position.
#[derive(Debug, Clone)]
pub struct SubstituteCandidateSet {
    position: usize,
    original: String,
    origin: CandidateOrigin,
    candidates: Vec<String>,
}

impl SubstituteCandidateSet {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn original(&self) -> &str {
        &self.original
    }

    pub fn origin(&self) -> CandidateOrigin {
        self.origin
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Candidate generation strategy for the caption attack.
pub enum CandidateSource<'a> {
    /// Table neighbors under the similarity threshold; words without a
    /// table vector fall back to the filler model.
    EmbeddingGuidance { table: &'a WordEmbeddingTable, filler: &'a dyn FillerModel },
    /// Table neighbors only; words without a vector get no candidates.
    EmbeddingTableOnly { table: &'a WordEmbeddingTable },
    /// Filler proposals only.
    FillerOnly { filler: &'a dyn FillerModel },
    /// Synonym file lookups only.
    SynonymFile { synonyms: &'a SynonymMap },
}

/// Ranks caption positions by word importance, most important first.
///
/// Importance of position i is the pair-loss change from deleting word i:
/// `pair_loss(caption without i) - pair_loss(caption)`. Words whose removal
/// leaves an unencodable caption rank last. A single-word caption is `[0]`
/// without any encoder call.
pub fn rank_words(
    backend: &dyn ModelBackend,
    caption: &Caption,
    image_emb: &EmbeddingVector,
) -> Result<Vec<usize>> {
    if caption.len() == 1 {
        return Ok(vec![0]);
    }
    let base_loss = pair_loss(&backend.encode_text(caption)?, image_emb)?;
    let mut scored = Vec::with_capacity(caption.len());
    for i in 0..caption.len() {
        let masked = caption.without_word(i).expect("caption has more than one word");
        let importance = match backend.encode_text(&masked) {
            Ok(emb) => pair_loss(&emb, image_emb)? - base_loss,
            Err(CmiError::DegenerateEmbedding(_)) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        scored.push((i, importance));
    }
    // Stable sort keeps equal-importance positions in ascending order.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("importances never compare as NaN"));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

fn validate_tau_k(tau: f64, k: usize) -> Result<()> {
    if !tau.is_finite() || !(0.0..1.0).contains(&tau) {
        return Err(CmiError::InvalidInput(format!(
            "similarity threshold must satisfy 0 <= tau < 1, got {tau}"
        )));
    }
    if k == 0 {
        return Err(CmiError::InvalidInput("candidate count k must be at least 1".into()));
    }
    Ok(())
}

/// Builds the substitute candidate set for one caption position under the
/// given source. An empty candidate list is a valid outcome and means the
/// position cannot be attacked.
pub fn build_substitutes(
    source: &CandidateSource,
    caption: &Caption,
    position: usize,
    tau: f64,
    k: usize,
) -> Result<SubstituteCandidateSet> {
    validate_tau_k(tau, k)?;
    if position >= caption.len() {
        return Err(CmiError::InvalidInput(format!(
            "position {position} out of range for a {}-word caption",
            caption.len()
        )));
    }
    let word = caption.words()[position].clone();
    let (origin, candidates) = match source {
        CandidateSource::EmbeddingGuidance { table, filler } => match table.neighbors(&word, tau, k)
        {
            Some(neighbors) => (
                CandidateOrigin::EmbeddingTable,
                neighbors.into_iter().map(|(t, _)| t).collect(),
            ),
            None => (CandidateOrigin::FillerModel, filler.propose(caption, position, k)?),
        },
        CandidateSource::EmbeddingTableOnly { table } => (
            CandidateOrigin::EmbeddingTable,
            table
                .neighbors(&word, tau, k)
                .map(|ns| ns.into_iter().map(|(t, _)| t).collect())
                .unwrap_or_default(),
        ),
        CandidateSource::FillerOnly { filler } => {
            (CandidateOrigin::FillerModel, filler.propose(caption, position, k)?)
        }
        CandidateSource::SynonymFile { synonyms } => {
            let list = synonyms
                .get(&word)
                .map(|ts| {
                    let word_lower = word.to_lowercase();
                    ts.iter()
                        .filter(|t| **t != word && **t != word_lower)
                        .take(k)
                        .cloned()
                        .collect()
                })
                .unwrap_or_default();
            (CandidateOrigin::SynonymFile, list)
        }
    };
    Ok(SubstituteCandidateSet { position, original: word, origin, candidates })
}

/// Picks the candidate whose substitution maximizes the pair loss against
/// `image_emb`. Ties keep the earliest candidate. Candidates that make the
/// caption unencodable are skipped; if every candidate does, the first such
/// error is returned.
pub fn select_substitute(
    backend: &dyn ModelBackend,
    caption: &Caption,
    position: usize,
    candidates: &SubstituteCandidateSet,
    image_emb: &EmbeddingVector,
) -> Result<(String, f64)> {
    if candidates.is_empty() {
        return Err(CmiError::InvalidInput("candidate list is empty".into()));
    }
    let mut best: Option<(String, f64)> = None;
    let mut first_err: Option<CmiError> = None;
    for token in candidates.candidates() {
        let substituted = caption.with_word(position, token)?;
        let loss = match backend.encode_text(&substituted) {
            Ok(emb) => pair_loss(&emb, image_emb)?,
            Err(e @ CmiError::DegenerateEmbedding(_)) => {
                first_err.get_or_insert(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        match &best {
            Some((_, best_loss)) if loss <= *best_loss => {}
            _ => best = Some((token.clone(), loss)),
        }
    }
    match best {
        Some(found) => Ok(found),
        None => Err(first_err.expect("no best implies at least one candidate failed")),
    }
}

/// Result of one greedy caption-attack pass.
#[derive(Debug, Clone)]
pub struct TextAttackOutcome {
    pub caption: Caption,
    /// Positions ever substituted, relative to the original caption,
    /// including positions carried in from earlier passes.
    pub changed_positions: BTreeSet<usize>,
}

/// One greedy rewrite pass over a caption with a fresh replacement budget.
pub fn attack_caption(
    backend: &dyn ModelBackend,
    source: &CandidateSource,
    caption: &Caption,
    image_emb: &EmbeddingVector,
    eps_t: usize,
    tau: f64,
    k: usize,
) -> Result<TextAttackOutcome> {
    attack_caption_resume(backend, source, caption, &BTreeSet::new(), image_emb, eps_t, tau, k)
}

/// Greedy rewrite pass that continues an earlier attack on the same
/// caption: `changed` holds positions substituted by previous passes and
/// counts against the `eps_t` budget. Positions already in `changed` may
/// be re-substituted without consuming budget; new positions are only
/// touched while `|changed| < eps_t`. Each commit requires a strict pair
/// loss increase over the current caption.
pub fn attack_caption_resume(
    backend: &dyn ModelBackend,
    source: &CandidateSource,
    caption: &Caption,
    changed: &BTreeSet<usize>,
    image_emb: &EmbeddingVector,
    eps_t: usize,
    tau: f64,
    k: usize,
) -> Result<TextAttackOutcome> {
    validate_tau_k(tau, k)?;
    if changed.iter().any(|&p| p >= caption.len()) {
        return Err(CmiError::InvalidInput(
            "changed-position set references a position beyond the caption".into(),
        ));
    }
    let mut outcome =
        TextAttackOutcome { caption: caption.clone(), changed_positions: changed.clone() };
    if eps_t == 0 {
        return Ok(outcome);
    }

    let order = rank_words(backend, caption, image_emb)?;
    let mut current_loss = pair_loss(&backend.encode_text(caption)?, image_emb)?;
    let mut commits = 0usize;

    for position in order {
        if commits >= eps_t {
            break;
        }
        let is_new_position = !outcome.changed_positions.contains(&position);
        if is_new_position && outcome.changed_positions.len() >= eps_t {
            continue;
        }
        let candidates = build_substitutes(source, &outcome.caption, position, tau, k)?;
        if candidates.is_empty() {
            continue;
        }
        let (token, loss) =
            match select_substitute(backend, &outcome.caption, position, &candidates, image_emb) {
                Ok(found) => found,
                Err(CmiError::DegenerateEmbedding(_)) => continue,
                Err(e) => return Err(e),
            };
        if loss > current_loss {
            outcome.caption = outcome.caption.with_word(position, &token)?;
            outcome.changed_positions.insert(position);
            current_loss = loss;
            commits += 1;
        }
    }
    Ok(outcome)
}
