//! Two-phase collaborative attack driver.
//!
//! The interaction phase alternates caption rewriting against scaled views
//! of the evolving adversarial image with momentum accumulation of per-pair
//! image gradients, taking one sign step per iteration. The image phase
//! restarts from the clean image (the accumulated momentum and the rewritten
//! captions carry over) and runs a momentum sign attack against the set loss
//! over all scales and captions.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{Array3, Ix3};
use serde::{Deserialize, Serialize};

use crate::attack_math::{
    cosine_similarity, momentum_update, normalize_gradient, sign_step_project, validate_scales,
    MomentumState, SetLossSpec,
};
use crate::backend::{ImageTensor, ModelBackend};
use crate::embedding_guidance::{
    attack_caption_resume, CandidateSource, Caption, FillerModel, SynonymMap, WordEmbeddingTable,
};
use crate::error::{CmiError, Result};

/// Candidate-generation strategy for the caption attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextStrategy {
    /// Filler-model proposals only (the weak word-level baseline).
    FillerOnly,
    /// User-supplied synonym file.
    SynonymFile,
    /// Embedding-table neighbors only, no fallback for unknown words.
    EmbeddingTableOnly,
    /// Embedding-table neighbors with filler fallback for unknown words.
    EmbeddingGuidance,
}

/// Full attack configuration. Deserializes from JSON where every field is
/// optional and missing fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity image budget.
    pub eps_image: f64,
    /// Per-step image step size.
    pub alpha: f64,
    /// Image-phase iterations (M).
    pub steps_image: usize,
    /// Interaction-phase iterations (N).
    pub steps_interact: usize,
    /// Momentum decay.
    #[serde(rename = "lambda_")]
    pub lambda: f64,
    /// Per-caption word replacement budget.
    pub eps_text: usize,
    /// Similarity threshold for table neighbor candidates.
    pub tau: f64,
    /// Candidate list cap per position.
    pub k_substitutes: usize,
    /// Scale factors for the multi-scale image set.
    pub scales: Vec<f64>,
    pub seed: u64,
    /// Embedding-guidance toggle: off downgrades guided text strategies to
    /// the filler baseline.
    pub eg_enabled: bool,
    /// Interaction-enhancement toggle: off discards the interaction-phase
    /// momentum instead of seeding the image phase with it.
    pub ie_enabled: bool,
    pub text_strategy: TextStrategy,
    pub image_set_loss: SetLossSpec,
    /// When true the image phase continues from the interaction-phase
    /// image instead of restarting from the clean one.
    pub carry_interaction_image: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            eps_image: 2.0 / 255.0,
            alpha: 0.5 / 255.0,
            steps_image: 10,
            steps_interact: 1,
            lambda: 0.9,
            eps_text: 1,
            tau: 0.5,
            k_substitutes: 10,
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            seed: 0,
            eg_enabled: true,
            ie_enabled: true,
            text_strategy: TextStrategy::EmbeddingGuidance,
            image_set_loss: SetLossSpec::CrossProductMean,
            carry_interaction_image: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.eps_image.is_finite() || self.eps_image < 0.0 {
            return Err(CmiError::Config(format!(
                "eps_image must be finite and >= 0, got {}",
                self.eps_image
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(CmiError::Config(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if self.steps_image == 0 {
            return Err(CmiError::Config("steps_image must be at least 1".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(CmiError::Config(format!(
                "lambda_ must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !self.tau.is_finite() || !(0.0..1.0).contains(&self.tau) {
            return Err(CmiError::Config(format!(
                "tau must satisfy 0 <= tau < 1, got {}",
                self.tau
            )));
        }
        if self.k_substitutes == 0 {
            return Err(CmiError::Config("k_substitutes must be at least 1".into()));
        }
        validate_scales(&self.scales)
            .map_err(|e| CmiError::Config(format!("invalid scales: {e}")))?;
        Ok(())
    }

    /// Strategy actually used once the embedding-guidance toggle is
    /// applied: with `eg_enabled` off, table-guided strategies fall back to
    /// the filler baseline, while the word-level strategies are unaffected.
    pub fn effective_text_strategy(&self) -> TextStrategy {
        match (self.eg_enabled, self.text_strategy) {
            (false, TextStrategy::EmbeddingGuidance | TextStrategy::EmbeddingTableOnly) => {
                TextStrategy::FillerOnly
            }
            (_, strategy) => strategy,
        }
    }
}

/// Shared text-side inputs: the embedding table, the filler model, and the
/// synonym map. Which of them the attack consults is decided per config.
#[derive(Clone)]
pub struct TextResources {
    pub table: Arc<WordEmbeddingTable>,
    pub filler: Arc<dyn FillerModel>,
    pub synonyms: Arc<SynonymMap>,
}

impl TextResources {
    pub fn new(
        table: Arc<WordEmbeddingTable>,
        filler: Arc<dyn FillerModel>,
        synonyms: Arc<SynonymMap>,
    ) -> Self {
        TextResources { table, filler, synonyms }
    }

    fn candidate_source(&self, strategy: TextStrategy) -> CandidateSource<'_> {
        match strategy {
            TextStrategy::FillerOnly => CandidateSource::FillerOnly { filler: &*self.filler },
            TextStrategy::SynonymFile => CandidateSource::SynonymFile { synonyms: &self.synonyms },
            TextStrategy::EmbeddingTableOnly => {
                CandidateSource::EmbeddingTableOnly { table: &self.table }
            }
            TextStrategy::EmbeddingGuidance => {
                CandidateSource::EmbeddingGuidance { table: &self.table, filler: &*self.filler }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackPhase {
    Interaction,
    Image,
}

/// Per-iteration record of the attack: the loss evaluated at that
/// iteration, the normalized gradient fed into the momentum update, and the
/// momentum buffer after the update.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub phase: AttackPhase,
    /// 1-based iteration index within the phase.
    pub iteration: usize,
    pub loss: f64,
    pub grad: Array3<f64>,
    pub momentum: Array3<f64>,
}

impl TraceRecord {
    pub fn grad_l1(&self) -> f64 {
        self.grad.iter().map(|v| v.abs()).sum()
    }

    pub fn momentum_l1(&self) -> f64 {
        self.momentum.iter().map(|v| v.abs()).sum()
    }
}

/// One word replacement in a caption, final state versus the original.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordChange {
    pub position: usize,
    pub from: String,
    pub to: String,
}

/// Everything the interaction phase hands to the image phase.
pub struct InteractionOutcome {
    pub adv_captions: Vec<Caption>,
    /// Per caption, positions substituted so far (counted against eps_text).
    pub changed_positions: Vec<BTreeSet<usize>>,
    /// Image state after the interaction phase's sign steps.
    pub adv_image_partial: ImageTensor,
    pub momentum: MomentumState<Ix3>,
    pub trace: Vec<TraceRecord>,
}

/// Full attack output.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adv_image: ImageTensor,
    pub adv_captions: Vec<Caption>,
    /// Mean cosine between the original captions and the clean image.
    pub clean_sim: f64,
    /// Mean cosine between the adversarial captions and the adversarial image.
    pub adv_sim: f64,
    /// L-infinity distance between adversarial and clean image.
    pub linf: f64,
    pub words_changed: Vec<Vec<WordChange>>,
    pub trace: Vec<TraceRecord>,
}

/// Interaction-phase scale order: exact 1.0 entries first, everything else
/// in the given order. The first iteration and the first caption then work
/// at the encoder's native resolution.
fn interaction_scale_order(scales: &[f64]) -> Vec<f64> {
    let mut order: Vec<f64> = scales.iter().copied().filter(|s| *s == 1.0).collect();
    order.extend(scales.iter().copied().filter(|s| *s != 1.0));
    order
}

fn require_image_gradients(backend: &dyn ModelBackend) -> Result<()> {
    if !backend.supports_image_gradient() {
        return Err(CmiError::Capability(format!(
            "backend '{}' does not expose image gradients; the attack cannot run",
            backend.descriptor().name
        )));
    }
    Ok(())
}

/// Interaction phase: N iterations of caption rewriting against the scaled
/// view of the evolving image, per-pair gradient accumulation into
/// momentum, and a sign step on the image.
pub fn interaction_phase(
    backend: &dyn ModelBackend,
    resources: &TextResources,
    image: &ImageTensor,
    captions: &[Caption],
    cfg: &AttackConfig,
) -> Result<InteractionOutcome> {
    cfg.validate()?;
    if captions.is_empty() {
        return Err(CmiError::InvalidInput("attack needs at least one caption".into()));
    }
    require_image_gradients(backend)?;

    let source = resources.candidate_source(cfg.effective_text_strategy());
    let order = interaction_scale_order(&cfg.scales);
    let n_scales = order.len();
    let shape = image.data().raw_dim();

    let mut adv_captions: Vec<Caption> = captions.to_vec();
    let mut changed: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); captions.len()];
    let mut adv_image = image.clone();
    let mut momentum = MomentumState::zeros(shape.clone(), cfg.lambda)?;
    let mut trace = Vec::with_capacity(cfg.steps_interact);

    for k in 1..=cfg.steps_interact {
        // Caption rewriting scores against the current image as seen at
        // this iteration's scale.
        let scale_k = order[(k - 1) % n_scales];
        let image_emb_k = backend.encode_image_at_scale(&adv_image, scale_k)?;
        for (j, caption) in adv_captions.iter_mut().enumerate() {
            let outcome = attack_caption_resume(
                backend,
                &source,
                caption,
                &changed[j],
                &image_emb_k,
                cfg.eps_text,
                cfg.tau,
                cfg.k_substitutes,
            )?;
            *caption = outcome.caption;
            changed[j] = outcome.changed_positions;
        }

        // Each caption is paired with one scaled view; the normalized
        // per-pair gradients sum into the momentum increment.
        let mut ghat = Array3::<f64>::zeros(shape.clone());
        let mut loss_sum = 0.0;
        for (j, caption) in adv_captions.iter().enumerate() {
            let scale_j = order[j % n_scales];
            let lg = backend.image_loss_grad(
                SetLossSpec::PairNegcos,
                &adv_image,
                &[scale_j],
                std::slice::from_ref(caption),
            )?;
            ghat += &normalize_gradient(&lg.grad)?;
            loss_sum += lg.loss;
        }
        momentum = momentum_update(&momentum, &ghat)?;
        adv_image =
            sign_step_project(&adv_image, image, momentum.g(), cfg.alpha, cfg.eps_image)?;

        trace.push(TraceRecord {
            phase: AttackPhase::Interaction,
            iteration: k,
            loss: loss_sum,
            grad: ghat,
            momentum: momentum.g().clone(),
        });
    }

    Ok(InteractionOutcome {
        adv_captions,
        changed_positions: changed,
        adv_image_partial: adv_image,
        momentum,
        trace,
    })
}

/// Image phase: M momentum sign-attack iterations against the set loss
/// over all scales and the (already rewritten) captions.
pub fn image_phase(
    backend: &dyn ModelBackend,
    adv_image_start: &ImageTensor,
    clean_image: &ImageTensor,
    adv_captions: &[Caption],
    seed_momentum: MomentumState<Ix3>,
    cfg: &AttackConfig,
) -> Result<(ImageTensor, Vec<TraceRecord>)> {
    cfg.validate()?;
    if adv_captions.is_empty() {
        return Err(CmiError::InvalidInput("attack needs at least one caption".into()));
    }
    require_image_gradients(backend)?;

    let mut adv_image = adv_image_start.clone();
    let mut momentum = seed_momentum;
    let mut trace = Vec::with_capacity(cfg.steps_image);

    for k in 1..=cfg.steps_image {
        let lg =
            backend.image_loss_grad(cfg.image_set_loss, &adv_image, &cfg.scales, adv_captions)?;
        let ghat = normalize_gradient(&lg.grad)?;
        momentum = momentum_update(&momentum, &ghat)?;
        adv_image =
            sign_step_project(&adv_image, clean_image, momentum.g(), cfg.alpha, cfg.eps_image)?;

        trace.push(TraceRecord {
            phase: AttackPhase::Image,
            iteration: k,
            loss: lg.loss,
            grad: ghat,
            momentum: momentum.g().clone(),
        });
    }

    Ok((adv_image, trace))
}

/// Full two-phase attack on one image-caption group.
pub fn run_cmi_attack(
    backend: &dyn ModelBackend,
    resources: &TextResources,
    image: &ImageTensor,
    captions: &[Caption],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let interaction = interaction_phase(backend, resources, image, captions, cfg)?;

    let seed_momentum = if cfg.ie_enabled {
        MomentumState::seeded(interaction.momentum.g().clone(), cfg.lambda)?
    } else {
        MomentumState::zeros(image.data().raw_dim(), cfg.lambda)?
    };
    let start = if cfg.carry_interaction_image {
        interaction.adv_image_partial.clone()
    } else {
        image.clone()
    };

    let (adv_image, image_trace) = image_phase(
        backend,
        &start,
        image,
        &interaction.adv_captions,
        seed_momentum,
        cfg,
    )?;

    let clean_emb = backend.encode_image(image)?;
    let adv_emb = backend.encode_image(&adv_image)?;
    let mut clean_sim = 0.0;
    let mut adv_sim = 0.0;
    for (orig, adv) in captions.iter().zip(interaction.adv_captions.iter()) {
        clean_sim += cosine_similarity(&backend.encode_text(orig)?, &clean_emb)?;
        adv_sim += cosine_similarity(&backend.encode_text(adv)?, &adv_emb)?;
    }
    clean_sim /= captions.len() as f64;
    adv_sim /= captions.len() as f64;

    let words_changed = interaction
        .adv_captions
        .iter()
        .zip(captions.iter())
        .map(|(adv, orig)| {
            adv.diff_positions(orig)
                .into_iter()
                .map(|p| WordChange {
                    position: p,
                    from: orig.words()[p].clone(),
                    to: adv.words()[p].clone(),
                })
                .collect()
        })
        .collect();

    let linf = adv_image.linf_distance(image)?;
    let mut trace = interaction.trace;
    trace.extend(image_trace);

    Ok(AttackResult {
        adv_image,
        adv_captions: interaction.adv_captions,
        clean_sim,
        adv_sim,
        linf,
        words_changed,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendDescriptor, EmbeddingVector, ToyAlignedBackend};
    use crate::embedding_guidance::UnigramFiller;
    use ndarray::Array3;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (ToyAlignedBackend, TextResources) {
        let entries = vec![
            ("cat", vec![1.0, 0.0, 0.0, 0.1]),
            ("feline", vec![0.95, 0.05, 0.0, 0.1]),
            ("kitten", vec![0.9, 0.1, 0.0, 0.12]),
            ("dog", vec![0.0, 1.0, 0.0, -0.1]),
            ("puppy", vec![0.05, 0.95, 0.0, -0.1]),
            ("bird", vec![0.0, 0.0, 1.0, 0.2]),
            ("rock", vec![-0.4, -0.4, 0.7, 0.0]),
        ];
        let table = Arc::new(
            WordEmbeddingTable::new(
                entries
                    .into_iter()
                    .map(|(t, v)| (t.to_string(), Array1::from(v)))
                    .collect(),
            )
            .unwrap(),
        );
        let filler = Arc::new(UnigramFiller::from_table(&table));
        let resources = TextResources::new(table.clone(), filler, Arc::new(SynonymMap::default()));
        let backend = ToyAlignedBackend::new(17, (1, 6, 6), 4, table).unwrap();
        (backend, resources)
    }

    fn random_image(seed: u64, shape: (usize, usize, usize)) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn(shape, |_| rng.random_range(0.0..1.0))).unwrap()
    }

    fn captions(words: &[&[&str]]) -> Vec<Caption> {
        words
            .iter()
            .map(|ws| Caption::new(ws.iter().map(|w| w.to_string()).collect()).unwrap())
            .collect()
    }

    fn small_cfg() -> AttackConfig {
        AttackConfig {
            steps_image: 3,
            steps_interact: 2,
            scales: vec![1.0, 0.5],
            ..AttackConfig::default()
        }
    }

    // ---- config -------------------------------------------------------------

    #[test]
    fn test_config_defaults_match_documented_values() {
        let cfg = AttackConfig::default();
        assert_eq!(cfg.eps_image, 2.0 / 255.0);
        assert_eq!(cfg.alpha, 0.5 / 255.0);
        assert_eq!(cfg.steps_image, 10);
        assert_eq!(cfg.steps_interact, 1);
        assert_eq!(cfg.lambda, 0.9);
        assert_eq!(cfg.eps_text, 1);
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.k_substitutes, 10);
        assert_eq!(cfg.scales, vec![0.5, 0.75, 1.0, 1.25, 1.5]);
        assert!(cfg.eg_enabled && cfg.ie_enabled);
        assert_eq!(cfg.text_strategy, TextStrategy::EmbeddingGuidance);
        assert_eq!(cfg.image_set_loss, SetLossSpec::CrossProductMean);
        assert!(!cfg.carry_interaction_image);
        cfg.validate().unwrap();
    }

    #[test]
    fn test_config_json_round_trip_and_partial_overrides() {
        let empty: AttackConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(empty, AttackConfig::default());

        let partial: AttackConfig =
            serde_json::from_str(r#"{"steps_interact": 5, "lambda_": 0.5}"#).unwrap();
        assert_eq!(partial.steps_interact, 5);
        assert_eq!(partial.lambda, 0.5);
        assert_eq!(partial.steps_image, 10);

        let text = serde_json::to_string(&AttackConfig::default()).unwrap();
        assert!(text.contains("\"lambda_\""));
        let back: AttackConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, AttackConfig::default());

        assert!(serde_json::from_str::<AttackConfig>(r#"{"no_such_field": 1}"#).is_err());
    }

    #[test]
    fn test_config_validation_rejects_out_of_range_values() {
        let bad = |patch: fn(&mut AttackConfig)| {
            let mut cfg = AttackConfig::default();
            patch(&mut cfg);
            cfg.validate().unwrap_err()
        };
        assert!(matches!(bad(|c| c.lambda = -0.1), CmiError::Config(_)));
        assert!(matches!(bad(|c| c.eps_image = -1.0), CmiError::Config(_)));
        assert!(matches!(bad(|c| c.alpha = 0.0), CmiError::Config(_)));
        assert!(matches!(bad(|c| c.steps_image = 0), CmiError::Config(_)));
        assert!(matches!(bad(|c| c.tau = 1.0), CmiError::Config(_)));
        assert!(matches!(bad(|c| c.k_substitutes = 0), CmiError::Config(_)));
        assert!(matches!(bad(|c| c.scales = vec![0.0]), CmiError::Config(_)));
        assert!(matches!(bad(|c| c.scales = vec![]), CmiError::Config(_)));
    }

    #[test]
    fn test_effective_strategy_downgrades_guided_sources_when_eg_off() {
        let mut cfg = AttackConfig::default();
        cfg.eg_enabled = false;
        assert_eq!(cfg.effective_text_strategy(), TextStrategy::FillerOnly);
        cfg.text_strategy = TextStrategy::EmbeddingTableOnly;
        assert_eq!(cfg.effective_text_strategy(), TextStrategy::FillerOnly);
        cfg.text_strategy = TextStrategy::SynonymFile;
        assert_eq!(cfg.effective_text_strategy(), TextStrategy::SynonymFile);
        cfg.eg_enabled = true;
        cfg.text_strategy = TextStrategy::EmbeddingGuidance;
        assert_eq!(cfg.effective_text_strategy(), TextStrategy::EmbeddingGuidance);
    }

    #[test]
    fn test_interaction_scale_order_puts_native_resolution_first() {
        assert_eq!(
            interaction_scale_order(&[0.5, 0.75, 1.0, 1.25, 1.5]),
            vec![1.0, 0.5, 0.75, 1.25, 1.5]
        );
        assert_eq!(interaction_scale_order(&[0.5, 1.5]), vec![0.5, 1.5]);
    }

    // ---- attack invariants ------------------------------------------------------

    #[test]
    fn test_attack_respects_image_and_text_budgets() {
        let (backend, resources) = fixture();
        let image = random_image(100, (1, 6, 6));
        let caps = captions(&[&["cat", "dog"], &["bird", "rock", "cat"]]);
        let cfg = small_cfg();
        let result = run_cmi_attack(&backend, &resources, &image, &caps, &cfg).unwrap();

        assert!(result.linf <= cfg.eps_image + 1e-9);
        for &v in result.adv_image.data() {
            assert!((0.0..=1.0).contains(&v));
        }
        for changes in &result.words_changed {
            assert!(changes.len() <= cfg.eps_text);
        }
        assert_eq!(result.trace.len(), cfg.steps_interact + cfg.steps_image);
        for (i, rec) in result.trace.iter().enumerate() {
            let expected_phase =
                if i < cfg.steps_interact { AttackPhase::Interaction } else { AttackPhase::Image };
            assert_eq!(rec.phase, expected_phase);
        }
    }

    #[test]
    fn test_momentum_trace_follows_recurrence() {
        let (backend, resources) = fixture();
        let image = random_image(101, (1, 6, 6));
        let caps = captions(&[&["cat", "dog"]]);
        let cfg = small_cfg();
        let result = run_cmi_attack(&backend, &resources, &image, &caps, &cfg).unwrap();

        // Within each phase: g_k = lambda * g_{k-1} + ghat_k, with the image
        // phase seeded by the interaction phase's final momentum.
        let mut prev: Option<Array3<f64>> = None;
        for rec in &result.trace {
            if rec.phase == AttackPhase::Image && rec.iteration == 1 {
                // prev currently holds the interaction-phase handoff.
            }
            let base = prev.unwrap_or_else(|| Array3::zeros(rec.grad.raw_dim()));
            let expected = base.mapv(|v| v * cfg.lambda) + &rec.grad;
            for (a, b) in rec.momentum.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            prev = Some(rec.momentum.clone());
        }
    }

    #[test]
    fn test_ie_handoff_seeds_image_phase_momentum() {
        let (backend, resources) = fixture();
        let image = random_image(102, (1, 6, 6));
        let caps = captions(&[&["cat", "dog"]]);

        let mut cfg = small_cfg();
        cfg.ie_enabled = true;
        let on = run_cmi_attack(&backend, &resources, &image, &caps, &cfg).unwrap();
        let inter_final = &on.trace[cfg.steps_interact - 1].momentum;
        let image_first = &on.trace[cfg.steps_interact];
        assert_eq!(image_first.phase, AttackPhase::Image);
        let expected = inter_final.mapv(|v| v * cfg.lambda) + &image_first.grad;
        for (a, b) in image_first.momentum.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        cfg.ie_enabled = false;
        let off = run_cmi_attack(&backend, &resources, &image, &caps, &cfg).unwrap();
        let image_first = &off.trace[cfg.steps_interact];
        for (a, b) in image_first.momentum.iter().zip(image_first.grad.iter()) {
            assert!((a - b).abs() < 1e-12, "with IE off the first image momentum is ghat");
        }
    }

    #[test]
    fn test_image_phase_restarts_from_clean_image_by_default() {
        let (backend, resources) = fixture();
        let image = random_image(103, (1, 6, 6));
        let caps = captions(&[&["cat", "dog"]]);
        let mut cfg = small_cfg();
        cfg.steps_image = 1;

        let result = run_cmi_attack(&backend, &resources, &image, &caps, &cfg).unwrap();
        // One image-phase step from the clean image: the adversarial image
        // must sit exactly one alpha-step (or a clamp) from clean, not the
        // two-plus steps the interaction phase already took.
        let g = &result.trace[cfg.steps_interact].momentum;
        for ((a, c), gv) in result
            .adv_image
            .data()
            .iter()
            .zip(image.data().iter())
            .zip(g.iter())
        {
            let step = if *gv > 0.0 {
                cfg.alpha
            } else if *gv < 0.0 {
                -cfg.alpha
            } else {
                0.0
            };
            let expected = (c + step).clamp(c - cfg.eps_image, c + cfg.eps_image).clamp(0.0, 1.0);
            assert!((a - expected).abs() < 1e-12);
        }

        cfg.carry_interaction_image = true;
        let carried = run_cmi_attack(&backend, &resources, &image, &caps, &cfg).unwrap();
        // Carrying the interaction image forward generally lands elsewhere.
        let interaction = interaction_phase(&backend, &resources, &image, &caps, &cfg).unwrap();
        assert!(interaction.adv_image_partial.linf_distance(&image).unwrap() > 0.0);
        assert!(carried.adv_image.linf_distance(&image).unwrap() <= cfg.eps_image + 1e-9);
    }

    #[test]
    fn test_run_equals_phase_composition() {
        let (backend, resources) = fixture();
        let image = random_image(104, (1, 6, 6));
        let caps = captions(&[&["cat", "dog"], &["bird"]]);
        let cfg = small_cfg();

        let full = run_cmi_attack(&backend, &resources, &image, &caps, &cfg).unwrap();

        let inter = interaction_phase(&backend, &resources, &image, &caps, &cfg).unwrap();
        let seed = MomentumState::seeded(inter.momentum.g().clone(), cfg.lambda).unwrap();
        let (adv_image, _) =
            image_phase(&backend, &image, &image, &inter.adv_captions, seed, &cfg).unwrap();

        assert_eq!(full.adv_image.data(), adv_image.data());
        assert_eq!(full.adv_captions, inter.adv_captions);
    }

    #[test]
    fn test_zero_interaction_steps_leaves_captions_unchanged() {
        let (backend, resources) = fixture();
        let image = random_image(105, (1, 6, 6));
        let caps = captions(&[&["cat", "dog"]]);
        let mut cfg = small_cfg();
        cfg.steps_interact = 0;
        let result = run_cmi_attack(&backend, &resources, &image, &caps, &cfg).unwrap();
        assert_eq!(result.adv_captions, caps);
        assert!(result.words_changed.iter().all(Vec::is_empty));
        assert_eq!(result.trace.len(), cfg.steps_image);
    }

    #[test]
    fn test_single_pair_interaction_momentum_is_normalized_pair_gradient() {
        let (backend, resources) = fixture();
        let image = random_image(106, (1, 6, 6));
        let caps = captions(&[&["cat", "dog"]]);
        let mut cfg = small_cfg();
        cfg.steps_interact = 1;
        cfg.scales = vec![1.0];
        cfg.eps_text = 0;

        let inter = interaction_phase(&backend, &resources, &image, &caps, &cfg).unwrap();
        let lg = backend
            .image_loss_grad(SetLossSpec::PairNegcos, &image, &[1.0], &caps)
            .unwrap();
        let expected = normalize_gradient(&lg.grad).unwrap();
        for (a, b) in inter.momentum.g().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn test_eg_off_matches_explicit_filler_strategy() {
        let (backend, resources) = fixture();
        let image = random_image(107, (1, 6, 6));
        let caps = captions(&[&["cat", "dog"], &["bird", "rock"]]);

        let mut eg_off = small_cfg();
        eg_off.eg_enabled = false;
        let a = run_cmi_attack(&backend, &resources, &image, &caps, &eg_off).unwrap();

        let mut filler = small_cfg();
        filler.text_strategy = TextStrategy::FillerOnly;
        let b = run_cmi_attack(&backend, &resources, &image, &caps, &filler).unwrap();

        assert_eq!(a.adv_captions, b.adv_captions);
        assert_eq!(a.adv_image.data(), b.adv_image.data());
    }

    #[test]
    fn test_gradient_free_backend_is_a_capability_error() {
        struct TextOnly;
        impl ModelBackend for TextOnly {
            fn descriptor(&self) -> BackendDescriptor {
                BackendDescriptor {
                    name: "text-only".into(),
                    image_shape: (1, 2, 2),
                    embedding_dim: 2,
                    vocabulary: vec!["a".into()],
                    deterministic: true,
                    seed: None,
                }
            }
            fn encode_image(&self, _: &ImageTensor) -> Result<EmbeddingVector> {
                EmbeddingVector::new(Array1::from(vec![1.0, 0.0]))
            }
            fn encode_image_at_scale(&self, i: &ImageTensor, _: f64) -> Result<EmbeddingVector> {
                self.encode_image(i)
            }
            fn encode_text(&self, _: &Caption) -> Result<EmbeddingVector> {
                EmbeddingVector::new(Array1::from(vec![0.0, 1.0]))
            }
        }
        let (_, resources) = fixture();
        let image = random_image(108, (1, 2, 2));
        let caps = captions(&[&["a"]]);
        let err =
            run_cmi_attack(&TextOnly, &resources, &image, &caps, &AttackConfig::default())
                .unwrap_err();
        assert!(matches!(err, CmiError::Capability(_)));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn test_empty_caption_list_is_rejected() {
        let (backend, resources) = fixture();
        let image = random_image(109, (1, 6, 6));
        let err = run_cmi_attack(&backend, &resources, &image, &[], &AttackConfig::default())
            .unwrap_err();
        assert!(matches!(err, CmiError::InvalidInput(_)));
    }
}
