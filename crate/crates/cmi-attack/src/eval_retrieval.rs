//! Retrieval evaluation: gallery ranking, attack-rate metrics, corpus-wide
//! attack execution, and the ablation grid.
//!
//! Text retrieval (TR) queries the caption gallery with an image; image
//! retrieval (IR) queries the image gallery with a caption. A pair's rank
//! in either direction is the best rank any of its own captions achieves.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attack_math::cosine_similarity;
use crate::backend::{EmbeddingVector, ImageTensor, ModelBackend};
use crate::cmi_engine::{run_cmi_attack, AttackConfig, AttackResult, TextResources, TextStrategy};
use crate::embedding_guidance::Caption;
use crate::error::{CmiError, Result};

/// One image with its caption group.
#[derive(Debug, Clone)]
pub struct CorpusPair {
    pub pair_id: String,
    pub image: ImageTensor,
    pub captions: Vec<Caption>,
}

/// Image-caption pairs evaluated and attacked together.
#[derive(Debug, Clone)]
pub struct RetrievalCorpus {
    pairs: Vec<CorpusPair>,
}

impl RetrievalCorpus {
    pub fn new(pairs: Vec<CorpusPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CmiError::Validation("corpus has no pairs".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for pair in &pairs {
            if pair.pair_id.is_empty() {
                return Err(CmiError::Validation("corpus pair has an empty id".into()));
            }
            if !seen.insert(pair.pair_id.as_str()) {
                return Err(CmiError::Validation(format!(
                    "duplicate pair id '{}'",
                    pair.pair_id
                )));
            }
            if pair.captions.is_empty() {
                return Err(CmiError::Validation(format!(
                    "pair '{}' has no captions",
                    pair.pair_id
                )));
            }
        }
        Ok(RetrievalCorpus { pairs })
    }

    pub fn pairs(&self) -> &[CorpusPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Retrieval direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Image query against the caption gallery.
    TextRetrieval,
    /// Caption query against the image gallery.
    ImageRetrieval,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::TextRetrieval => write!(f, "tr"),
            Direction::ImageRetrieval => write!(f, "ir"),
        }
    }
}

/// Denominator convention for the attack success rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrBase {
    /// Only pairs correctly retrieved before the attack count (the usual
    /// reporting convention).
    Prefiltered,
    /// Every pair counts; unbroken and initially-wrong pairs dilute the rate.
    All,
}

/// Both-direction ranks of one pair in one corpus state. Ranks are 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankRecord {
    pub pair_id: String,
    pub tr_rank: usize,
    pub ir_rank: usize,
}

impl RankRecord {
    pub fn rank(&self, direction: Direction) -> usize {
        match direction {
            Direction::TextRetrieval => self.tr_rank,
            Direction::ImageRetrieval => self.ir_rank,
        }
    }
}

/// Clean and adversarial ranks of one pair, joined for reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub tr_rank_clean: usize,
    pub tr_rank_adv: usize,
    pub ir_rank_clean: usize,
    pub ir_rank_adv: usize,
    /// Pair was top-1 in TR before the attack and is not afterwards.
    pub succeeded_tr_r1: bool,
    pub succeeded_ir_r1: bool,
}

/// Gallery indices in decreasing cosine similarity to the query; equal
/// scores keep the lower index first.
pub fn rank_gallery(
    query_emb: &EmbeddingVector,
    gallery_embs: &[EmbeddingVector],
) -> Result<Vec<usize>> {
    if gallery_embs.is_empty() {
        return Err(CmiError::InvalidInput("gallery is empty".into()));
    }
    let mut scored = Vec::with_capacity(gallery_embs.len());
    for (i, emb) in gallery_embs.iter().enumerate() {
        scored.push((i, cosine_similarity(query_emb, emb)?));
    }
    // Stable sort: ties stay in ascending index order.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("cosines are finite"));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// 1-based rank of the best-placed wanted index in a ranked list.
fn best_rank_of(ranked: &[usize], wanted: &std::collections::BTreeSet<usize>) -> Result<usize> {
    ranked
        .iter()
        .position(|i| wanted.contains(i))
        .map(|p| p + 1)
        .ok_or_else(|| CmiError::Validation("ranked list is missing the pair's own entries".into()))
}

/// Ranks every pair in both directions against the full corpus galleries.
pub fn rank_records(
    backend: &dyn ModelBackend,
    corpus: &RetrievalCorpus,
) -> Result<Vec<RankRecord>> {
    let image_embs: Vec<EmbeddingVector> = corpus
        .pairs()
        .iter()
        .map(|p| backend.encode_image(&p.image))
        .collect::<Result<_>>()?;

    // Caption gallery flattened in corpus order; remember each pair's span.
    let mut caption_embs = Vec::new();
    let mut caption_owner = Vec::new();
    for (pair_idx, pair) in corpus.pairs().iter().enumerate() {
        for caption in &pair.captions {
            caption_embs.push(backend.encode_text(caption)?);
            caption_owner.push(pair_idx);
        }
    }

    let mut records = Vec::with_capacity(corpus.len());
    for (pair_idx, pair) in corpus.pairs().iter().enumerate() {
        let own_captions: std::collections::BTreeSet<usize> = caption_owner
            .iter()
            .enumerate()
            .filter(|(_, owner)| **owner == pair_idx)
            .map(|(i, _)| i)
            .collect();

        let ranked_captions = rank_gallery(&image_embs[pair_idx], &caption_embs)?;
        let tr_rank = best_rank_of(&ranked_captions, &own_captions)?;

        let own_image: std::collections::BTreeSet<usize> = [pair_idx].into_iter().collect();
        let mut ir_rank = usize::MAX;
        for caption_idx in &own_captions {
            let ranked_images = rank_gallery(&caption_embs[*caption_idx], &image_embs)?;
            ir_rank = ir_rank.min(best_rank_of(&ranked_images, &own_image)?);
        }

        records.push(RankRecord { pair_id: pair.pair_id.clone(), tr_rank, ir_rank });
    }
    Ok(records)
}

/// Fraction of records whose correct match is absent from the top `k`.
/// This is the attack-oriented reading of R@k: higher means more pairs
/// were pushed out of the top `k`.
pub fn recall_at_k(records: &[RankRecord], k: usize, direction: Direction) -> Result<f64> {
    if k == 0 {
        return Err(CmiError::InvalidInput("k must be at least 1".into()));
    }
    if records.is_empty() {
        return Err(CmiError::UndefinedMetric("recall over zero records".into()));
    }
    let misses = records.iter().filter(|r| r.rank(direction) > k).count();
    Ok(misses as f64 / records.len() as f64)
}

/// Attack success rate at `k`: among the eligible pairs, the fraction that
/// was in the top `k` before the attack and out of it afterwards. The
/// `base` picks the denominator.
pub fn attack_success_rate(
    clean_records: &[RankRecord],
    adv_records: &[RankRecord],
    direction: Direction,
    k: usize,
    base: AsrBase,
) -> Result<f64> {
    if k == 0 {
        return Err(CmiError::InvalidInput("k must be at least 1".into()));
    }
    if clean_records.len() != adv_records.len() {
        return Err(CmiError::Validation(format!(
            "clean and adversarial record counts differ: {} vs {}",
            clean_records.len(),
            adv_records.len()
        )));
    }
    if clean_records.is_empty() {
        return Err(CmiError::UndefinedMetric("attack success rate over zero records".into()));
    }
    let mut correct_before = 0usize;
    let mut broken = 0usize;
    for (clean, adv) in clean_records.iter().zip(adv_records.iter()) {
        if clean.pair_id != adv.pair_id {
            return Err(CmiError::Validation(format!(
                "record mismatch: clean pair '{}' joined with adversarial pair '{}'",
                clean.pair_id, adv.pair_id
            )));
        }
        if clean.rank(direction) <= k {
            correct_before += 1;
            if adv.rank(direction) > k {
                broken += 1;
            }
        }
    }
    match base {
        AsrBase::Prefiltered => {
            if correct_before == 0 {
                return Err(CmiError::UndefinedMetric(format!(
                    "no pair was inside the top {k} before the attack"
                )));
            }
            Ok(broken as f64 / correct_before as f64)
        }
        AsrBase::All => Ok(broken as f64 / clean_records.len() as f64),
    }
}

/// Joins clean and adversarial rank records into per-pair report rows.
pub fn eval_records(
    clean_records: &[RankRecord],
    adv_records: &[RankRecord],
) -> Result<Vec<EvalRecord>> {
    if clean_records.len() != adv_records.len() {
        return Err(CmiError::Validation(format!(
            "clean and adversarial record counts differ: {} vs {}",
            clean_records.len(),
            adv_records.len()
        )));
    }
    clean_records
        .iter()
        .zip(adv_records.iter())
        .map(|(clean, adv)| {
            if clean.pair_id != adv.pair_id {
                return Err(CmiError::Validation(format!(
                    "record mismatch: clean pair '{}' joined with adversarial pair '{}'",
                    clean.pair_id, adv.pair_id
                )));
            }
            Ok(EvalRecord {
                pair_id: clean.pair_id.clone(),
                tr_rank_clean: clean.tr_rank,
                tr_rank_adv: adv.tr_rank,
                ir_rank_clean: clean.ir_rank,
                ir_rank_adv: adv.ir_rank,
                succeeded_tr_r1: clean.tr_rank <= 1 && adv.tr_rank > 1,
                succeeded_ir_r1: clean.ir_rank <= 1 && adv.ir_rank > 1,
            })
        })
        .collect()
}

/// Runs the full attack on every pair. With more than one worker, pairs are
/// dealt round-robin to scoped threads and the results merged back in pair
/// order, so the output is identical for any worker count.
pub fn attack_corpus(
    backend: &dyn ModelBackend,
    resources: &TextResources,
    corpus: &RetrievalCorpus,
    cfg: &AttackConfig,
    workers: usize,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    let workers = workers.clamp(1, corpus.len());
    if workers == 1 {
        return corpus
            .pairs()
            .iter()
            .map(|p| run_cmi_attack(backend, resources, &p.image, &p.captions, cfg))
            .collect();
    }

    let chunks: Vec<Vec<(usize, Result<AttackResult>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    corpus
                        .pairs()
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % workers == w)
                        .map(|(i, p)| {
                            (i, run_cmi_attack(backend, resources, &p.image, &p.captions, cfg))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("attack worker panicked"))
            .collect()
    });

    let mut merged: Vec<Option<AttackResult>> = (0..corpus.len()).map(|_| None).collect();
    for chunk in chunks {
        for (i, result) in chunk {
            merged[i] = Some(result?);
        }
    }
    Ok(merged
        .into_iter()
        .map(|r| r.expect("every pair index was assigned to a worker"))
        .collect())
}

/// Corpus with each pair's image and captions replaced by the attack output.
pub fn apply_attacks(
    corpus: &RetrievalCorpus,
    results: &[AttackResult],
) -> Result<RetrievalCorpus> {
    if corpus.len() != results.len() {
        return Err(CmiError::Validation(format!(
            "corpus has {} pairs but {} attack results were given",
            corpus.len(),
            results.len()
        )));
    }
    RetrievalCorpus::new(
        corpus
            .pairs()
            .iter()
            .zip(results.iter())
            .map(|(pair, result)| CorpusPair {
                pair_id: pair.pair_id.clone(),
                image: result.adv_image.clone(),
                captions: result.adv_captions.clone(),
            })
            .collect(),
    )
}

/// R@1 and ASR summary of one attacked corpus state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub tr_r1_asr: f64,
    pub ir_r1_asr: f64,
    /// Mean of the two R@1 push-out rates on the attacked corpus.
    pub combined_avg: f64,
}

/// Metrics for one clean/adversarial record pairing.
pub fn cell_metrics(
    clean_records: &[RankRecord],
    adv_records: &[RankRecord],
) -> Result<CellMetrics> {
    let tr_r1_asr = attack_success_rate(
        clean_records,
        adv_records,
        Direction::TextRetrieval,
        1,
        AsrBase::Prefiltered,
    )?;
    let ir_r1_asr = attack_success_rate(
        clean_records,
        adv_records,
        Direction::ImageRetrieval,
        1,
        AsrBase::Prefiltered,
    )?;
    let combined_avg = (recall_at_k(adv_records, 1, Direction::TextRetrieval)?
        + recall_at_k(adv_records, 1, Direction::ImageRetrieval)?)
        / 2.0;
    Ok(CellMetrics { tr_r1_asr, ir_r1_asr, combined_avg })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellToggles {
    pub eg_enabled: bool,
    pub ie_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub toggles: CellToggles,
    #[serde(flatten)]
    pub metrics: CellMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub text_strategy: TextStrategy,
    #[serde(flatten)]
    pub metrics: CellMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepsRow {
    pub steps_interact: usize,
    #[serde(flatten)]
    pub metrics: CellMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSweeps {
    pub text_strategy: Vec<StrategyRow>,
    pub interaction_steps: Vec<StepsRow>,
}

/// Full ablation output: the toggle grid plus the two sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_digest: String,
    pub cells: Vec<AblationCell>,
    pub sweeps: AblationSweeps,
    pub timestamp: String,
}

/// Interaction-step counts exercised by the ablation sweep.
pub const INTERACTION_STEP_SWEEP: [usize; 4] = [0, 1, 2, 4];

/// All four text strategies, in sweep row order.
pub const TEXT_STRATEGY_SWEEP: [TextStrategy; 4] = [
    TextStrategy::FillerOnly,
    TextStrategy::SynonymFile,
    TextStrategy::EmbeddingTableOnly,
    TextStrategy::EmbeddingGuidance,
];

/// Runs the toggle grid and both sweeps against one corpus. Every variant
/// derives from `base_cfg`; the clean ranks are computed once and shared.
pub fn run_ablation(
    backend: &dyn ModelBackend,
    resources: &TextResources,
    corpus: &RetrievalCorpus,
    base_cfg: &AttackConfig,
    workers: usize,
    config_digest: String,
    timestamp: String,
) -> Result<AblationReport> {
    base_cfg.validate()?;
    let clean_records = rank_records(backend, corpus)?;

    let metrics_for = |cfg: &AttackConfig| -> Result<CellMetrics> {
        let results = attack_corpus(backend, resources, corpus, cfg, workers)?;
        let adv_corpus = apply_attacks(corpus, &results)?;
        let adv_records = rank_records(backend, &adv_corpus)?;
        cell_metrics(&clean_records, &adv_records)
    };

    let mut cells = Vec::with_capacity(4);
    for (eg, ie) in [(false, false), (false, true), (true, false), (true, true)] {
        let mut cfg = base_cfg.clone();
        cfg.eg_enabled = eg;
        cfg.ie_enabled = ie;
        cells.push(AblationCell {
            toggles: CellToggles { eg_enabled: eg, ie_enabled: ie },
            metrics: metrics_for(&cfg)?,
        });
    }

    let mut text_strategy = Vec::with_capacity(TEXT_STRATEGY_SWEEP.len());
    for strategy in TEXT_STRATEGY_SWEEP {
        let mut cfg = base_cfg.clone();
        cfg.eg_enabled = true;
        cfg.text_strategy = strategy;
        text_strategy.push(StrategyRow { text_strategy: strategy, metrics: metrics_for(&cfg)? });
    }

    let mut interaction_steps = Vec::with_capacity(INTERACTION_STEP_SWEEP.len());
    for steps in INTERACTION_STEP_SWEEP {
        let mut cfg = base_cfg.clone();
        cfg.steps_interact = steps;
        interaction_steps.push(StepsRow { steps_interact: steps, metrics: metrics_for(&cfg)? });
    }

    Ok(AblationReport {
        config_digest,
        cells,
        sweeps: AblationSweeps { text_strategy, interaction_steps },
        timestamp,
    })
}
