//! End-to-end acceptance checks for the attack pipeline. Each test prints
//! one PASS line when its criterion holds; every oracle here is written
//! from scratch against raw arrays so a pass means the library agrees with
//! an independent computation, not with itself.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmi_attack::attack_math::SetLossSpec;
use cmi_attack::backend::{EmbeddingVector, ImageTensor, ModelBackend, ToyAlignedBackend};
use cmi_attack::cli_config::{generate_toy_corpus, manifest_to_corpus, ToyCorpusParams};
use cmi_attack::cmi_engine::{run_cmi_attack, AttackConfig, AttackPhase, TextResources};
use cmi_attack::embedding_guidance::{
    build_substitutes, select_substitute, CandidateSource, Caption, SynonymMap, UnigramFiller,
    WordEmbeddingTable,
};
use cmi_attack::eval_retrieval::{
    apply_attacks, attack_corpus, attack_success_rate, cell_metrics, rank_gallery, rank_records,
    recall_at_k, run_ablation, AsrBase, Direction, RankRecord, RetrievalCorpus,
    INTERACTION_STEP_SWEEP, TEXT_STRATEGY_SWEEP,
};

// ---- shared fixtures ---------------------------------------------------------

fn random_table(rng: &mut ChaCha8Rng, n_tokens: usize, dim: usize) -> WordEmbeddingTable {
    let entries = (0..n_tokens)
        .map(|i| {
            let mut v: Array1<f64> =
                Array1::from_iter((0..dim).map(|_| rng.random_range(-1.0..1.0)));
            if v.iter().all(|x| *x == 0.0) {
                v[0] = 1.0;
            }
            (format!("w{i:03}"), v)
        })
        .collect();
    WordEmbeddingTable::new(entries).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> ImageTensor {
    let n = shape.0 * shape.1 * shape.2;
    let data = Array3::from_shape_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect())
        .unwrap();
    ImageTensor::new(data).unwrap()
}

fn random_caption(rng: &mut ChaCha8Rng, table: &WordEmbeddingTable, len: usize) -> Caption {
    let tokens: Vec<&str> = table.tokens().collect();
    let words = (0..len)
        .map(|_| tokens[rng.random_range(0..tokens.len())].to_string())
        .collect();
    Caption::new(words).unwrap()
}

fn resources_for(table: &Arc<WordEmbeddingTable>) -> TextResources {
    TextResources::new(
        Arc::clone(table),
        Arc::new(UnigramFiller::from_table(table)),
        Arc::new(SynonymMap::default()),
    )
}

/// Config with every collaborative mechanism disabled: no caption
/// rewriting, no interaction gradients, no momentum decay, native scale
/// only. What remains is a plain iterative sign attack.
fn reduction_config() -> AttackConfig {
    AttackConfig {
        eg_enabled: false,
        ie_enabled: false,
        steps_interact: 0,
        lambda: 0.0,
        scales: vec![1.0],
        ..AttackConfig::default()
    }
}

fn toy_corpus_fixture(
    seed: u64,
    n_pairs: usize,
    twin_overlap: f64,
) -> (RetrievalCorpus, Arc<WordEmbeddingTable>, ToyAlignedBackend) {
    let params = ToyCorpusParams {
        seed,
        n_pairs,
        image_shape: (1, 8, 8),
        vocab_size: n_pairs * 6,
        caption_len: 4,
        captions_per_pair: 2,
        embedding_dim: 16,
        word_dim: 16,
        twin_overlap,
    };
    let corpus = generate_toy_corpus(&params).unwrap();
    let retrieval = manifest_to_corpus(&corpus.manifest, Path::new(".")).unwrap();
    let table = Arc::new(corpus.table);
    let backend = ToyAlignedBackend::new(
        seed,
        params.image_shape,
        params.embedding_dim,
        Arc::clone(&table),
    )
    .unwrap();
    (retrieval, table, backend)
}

// ---- 01: analytic image gradients vs central finite differences ------------------

#[test]
fn acceptance_01_image_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let shape = (1, 5, 5);
    let table = Arc::new(random_table(&mut rng, 10, 6));
    let backend = ToyAlignedBackend::new(3, shape, 6, Arc::clone(&table)).unwrap();

    let step = 1e-5;
    let mut max_rel = 0.0f64;
    for point in 0..10 {
        let image = random_image(&mut rng, shape);
        let (spec, scales, captions): (SetLossSpec, Vec<f64>, Vec<Caption>) = match point % 3 {
            0 => (SetLossSpec::PairNegcos, vec![1.0], vec![random_caption(&mut rng, &table, 3)]),
            1 => (
                SetLossSpec::PairedSum,
                vec![0.75, 1.25],
                vec![
                    random_caption(&mut rng, &table, 2),
                    random_caption(&mut rng, &table, 4),
                ],
            ),
            _ => (
                SetLossSpec::CrossProductMean,
                vec![0.5, 1.0, 1.25],
                vec![
                    random_caption(&mut rng, &table, 3),
                    random_caption(&mut rng, &table, 3),
                ],
            ),
        };

        let analytic = backend.image_loss_grad(spec, &image, &scales, &captions).unwrap();
        let n = image.data().len();
        for idx in 0..n {
            let probe = |delta: f64| {
                let mut data = image.data().clone();
                data.as_slice_mut().unwrap()[idx] += delta;
                backend
                    .image_loss_grad(spec, &ImageTensor::new(data).unwrap(), &scales, &captions)
                    .unwrap()
                    .loss
            };
            let fd = (probe(step) - probe(-step)) / (2.0 * step);
            let a = analytic.grad.as_slice().unwrap()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }

    let elapsed = started.elapsed();
    assert!(max_rel <= 1e-4, "max relative error {max_rel:.3e} exceeds 1e-4");
    assert!(elapsed.as_secs_f64() < 5.0, "audit took {elapsed:?}, budget is 5s");
    println!(
        "01 image gradients vs central finite differences: PASS (max rel err {max_rel:.3e}, {:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ---- 02: perturbation budgets hold on full attacks ---------------------------------

#[test]
fn acceptance_02_attack_budgets_hold_on_full_runs() {
    let (corpus, table, backend) = toy_corpus_fixture(22, 50, 0.0);
    let resources = resources_for(&table);
    let cfg = AttackConfig::default();

    let results = attack_corpus(&backend, &resources, &corpus, &cfg, 1).unwrap();
    assert_eq!(results.len(), 50);

    for (pair, result) in corpus.pairs().iter().zip(results.iter()) {
        // Raw-loop distance and range checks on the tensors themselves.
        let mut linf = 0.0f64;
        for (a, c) in result.adv_image.data().iter().zip(pair.image.data().iter()) {
            linf = linf.max((a - c).abs());
            assert!((0.0..=1.0).contains(a), "pixel {a} outside [0, 1]");
        }
        assert!(
            linf <= cfg.eps_image + 1e-9,
            "pair {}: distance {linf} exceeds budget {}",
            pair.pair_id,
            cfg.eps_image
        );
        assert!((linf - result.linf).abs() <= 1e-12);

        assert_eq!(result.adv_captions.len(), pair.captions.len());
        for (adv, orig) in result.adv_captions.iter().zip(pair.captions.iter()) {
            let diffs = adv
                .words()
                .iter()
                .zip(orig.words().iter())
                .filter(|(a, o)| a != o)
                .count();
            assert!(
                diffs <= cfg.eps_text,
                "pair {}: caption changed {diffs} words, budget {}",
                pair.pair_id,
                cfg.eps_text
            );
        }
    }
    println!("02 image and caption budgets on 50 full attacks: PASS");
}

// ---- 03: momentum trace matches its closed form ------------------------------------

#[test]
fn acceptance_03_momentum_matches_closed_form() {
    let (corpus, table, backend) = toy_corpus_fixture(33, 6, 0.0);
    let resources = resources_for(&table);
    let mut rng = ChaCha8Rng::seed_from_u64(303);

    for run in 0..20 {
        let cfg = AttackConfig {
            steps_image: rng.random_range(1..=10),
            steps_interact: rng.random_range(0..=2),
            lambda: rng.random_range(0.0..1.2),
            ie_enabled: rng.random::<f64>() < 0.5,
            scales: vec![1.0, 0.75],
            ..AttackConfig::default()
        };
        let pair = &corpus.pairs()[run % corpus.len()];
        let result = run_cmi_attack(&backend, &resources, &pair.image, &pair.captions, &cfg)
            .unwrap();

        // Closed form: momentum after step k is sum_j lambda^(k-j) ghat_j,
        // plus lambda^k times the seed for the image phase.
        let shape = pair.image.data().raw_dim();
        let inter: Vec<_> =
            result.trace.iter().filter(|t| t.phase == AttackPhase::Interaction).collect();
        let image: Vec<_> =
            result.trace.iter().filter(|t| t.phase == AttackPhase::Image).collect();
        assert_eq!(inter.len(), cfg.steps_interact);
        assert_eq!(image.len(), cfg.steps_image);

        for (k, rec) in inter.iter().enumerate() {
            let mut expect = Array3::<f64>::zeros(shape.clone());
            for (j, prev) in inter[..=k].iter().enumerate() {
                let w = cfg.lambda.powi((k - j) as i32);
                expect = expect + prev.grad.mapv(|v| v * w);
            }
            let diff =
                (&rec.momentum - &expect).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            assert!(diff <= 1e-9, "run {run}: interaction step {} off by {diff}", k + 1);
        }

        let seed_g = if cfg.ie_enabled && !inter.is_empty() {
            inter.last().unwrap().momentum.clone()
        } else {
            Array3::zeros(shape.clone())
        };
        for (k, rec) in image.iter().enumerate() {
            let mut expect = seed_g.mapv(|v| v * cfg.lambda.powi((k + 1) as i32));
            for (j, prev) in image[..=k].iter().enumerate() {
                let w = cfg.lambda.powi((k - j) as i32);
                expect = expect + prev.grad.mapv(|v| v * w);
            }
            let diff =
                (&rec.momentum - &expect).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            assert!(diff <= 1e-9, "run {run}: image step {} off by {diff}", k + 1);
        }
    }
    println!("03 momentum trace vs closed-form accumulation (20 runs): PASS");
}

// ---- 04: all-off config reduces to a plain iterative sign attack -------------------

#[test]
fn acceptance_04_disabled_attack_reduces_to_plain_sign_attack() {
    let (corpus, table, backend) = toy_corpus_fixture(44, 10, 0.0);
    let resources = resources_for(&table);
    let cfg = reduction_config();

    for pair in corpus.pairs() {
        let result =
            run_cmi_attack(&backend, &resources, &pair.image, &pair.captions, &cfg).unwrap();

        // Captions must be untouched with rewriting off.
        for (adv, orig) in result.adv_captions.iter().zip(pair.captions.iter()) {
            assert_eq!(adv.words(), orig.words());
        }

        // Scratch attack: gradient from the backend, but sign, step, and
        // both clamps written out by hand.
        let clean = pair.image.data();
        let mut adv = clean.clone();
        for _ in 0..cfg.steps_image {
            let lg = backend
                .image_loss_grad(
                    cfg.image_set_loss,
                    &ImageTensor::new(adv.clone()).unwrap(),
                    &cfg.scales,
                    &pair.captions,
                )
                .unwrap();
            for (idx, g) in lg.grad.iter().enumerate() {
                let slot = adv.as_slice_mut().unwrap();
                let c = clean.as_slice().unwrap()[idx];
                let step = if *g > 0.0 {
                    cfg.alpha
                } else if *g < 0.0 {
                    -cfg.alpha
                } else {
                    0.0
                };
                let mut v = slot[idx] + step;
                if v > c + cfg.eps_image {
                    v = c + cfg.eps_image;
                }
                if v < c - cfg.eps_image {
                    v = c - cfg.eps_image;
                }
                slot[idx] = v.clamp(0.0, 1.0);
            }
        }

        let diff = result
            .adv_image
            .data()
            .iter()
            .zip(adv.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff <= 1e-9, "pair {}: reduction differs by {diff}", pair.pair_id);
    }
    println!("04 all-off config vs scratch iterative sign attack (10 pairs): PASS");
}

// ---- 05: substitute selection matches exhaustive search ----------------------------

#[test]
fn acceptance_05_substitute_selection_matches_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let shape = (1, 4, 4);
    let table = Arc::new(random_table(&mut rng, 50, 8));
    let backend = ToyAlignedBackend::new(55, shape, 8, Arc::clone(&table)).unwrap();
    let source = CandidateSource::EmbeddingTableOnly { table: &table };

    let mut checked = 0usize;
    for _ in 0..100 {
        let caption_len = rng.random_range(3..=6);
        let caption = random_caption(&mut rng, &table, caption_len);
        let position = rng.random_range(0..caption.len());
        let image_emb = backend.encode_image(&random_image(&mut rng, shape)).unwrap();

        let candidates = build_substitutes(&source, &caption, position, 0.0, 10).unwrap();
        if candidates.is_empty() {
            continue;
        }
        let (token, loss) =
            select_substitute(&backend, &caption, position, &candidates, &image_emb).unwrap();

        // Exhaustive scan with raw cosine arithmetic; first strict maximum
        // wins, matching the selector's tie rule.
        let mut best: Option<(&str, f64)> = None;
        for cand in candidates.candidates() {
            let mut words = caption.words().to_vec();
            words[position] = cand.clone();
            let emb = match backend.encode_text(&Caption::new(words).unwrap()) {
                Ok(e) => e,
                Err(_) => continue,
            };
            let dot: f64 =
                emb.values().iter().zip(image_emb.values()).map(|(a, b)| a * b).sum();
            let na: f64 = emb.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = image_emb.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            let cand_loss = -(dot / (na * nb)).clamp(-1.0, 1.0);
            if best.is_none() || cand_loss > best.unwrap().1 {
                best = Some((cand, cand_loss));
            }
        }
        let (oracle_token, oracle_loss) = best.expect("non-empty candidate list");
        assert_eq!(token, oracle_token, "selection disagrees with exhaustive search");
        assert!((loss - oracle_loss).abs() <= 1e-12);
        checked += 1;
    }

    let elapsed = started.elapsed();
    assert!(checked >= 95, "only {checked}/100 captions produced candidates");
    assert!(elapsed.as_secs_f64() < 10.0, "selection audit took {elapsed:?}, budget is 10s");
    println!(
        "05 substitute selection vs exhaustive search ({checked} captions): PASS ({:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ---- 06: the default attack reliably reduces similarity ----------------------------

#[test]
fn acceptance_06_default_attack_reduces_similarity() {
    let started = Instant::now();
    let params = ToyCorpusParams::default();
    let corpus = generate_toy_corpus(&params).unwrap();
    let retrieval = manifest_to_corpus(&corpus.manifest, Path::new(".")).unwrap();
    let table = Arc::new(corpus.table);
    let backend = ToyAlignedBackend::new(
        params.seed,
        params.image_shape,
        params.embedding_dim,
        Arc::clone(&table),
    )
    .unwrap();
    let resources = resources_for(&table);
    let cfg = AttackConfig::default();

    let results = attack_corpus(&backend, &resources, &retrieval, &cfg, 1).unwrap();
    let reduced = results.iter().filter(|r| r.adv_sim < r.clean_sim).count();

    let elapsed = started.elapsed();
    assert!(reduced >= 95, "similarity dropped on only {reduced}/100 pairs");
    assert!(elapsed.as_secs_f64() < 60.0, "attack run took {elapsed:?}, budget is 60s");
    println!(
        "06 default attack lowers similarity on {reduced}/100 pairs: PASS ({:.1}s)",
        elapsed.as_secs_f64()
    );
}

// ---- 07: retrieval ranking and success metrics vs brute force ----------------------

#[test]
fn acceptance_07_retrieval_metrics_match_brute_force() {
    let (corpus, _table, backend) = toy_corpus_fixture(77, 20, 0.9);

    // Brute-force every rank with quadratic scans over raw cosines.
    let image_embs: Vec<EmbeddingVector> = corpus
        .pairs()
        .iter()
        .map(|p| backend.encode_image(&p.image).unwrap())
        .collect();
    let mut caption_embs: Vec<(usize, EmbeddingVector)> = Vec::new();
    for (pi, pair) in corpus.pairs().iter().enumerate() {
        for caption in &pair.captions {
            caption_embs.push((pi, backend.encode_text(caption).unwrap()));
        }
    }
    let cos = |a: &EmbeddingVector, b: &EmbeddingVector| -> f64 {
        let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
        let na: f64 = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    };
    // Stable descending rank: better score wins, earlier index breaks ties.
    let brute_rank = |scores: &[f64], own: usize| -> usize {
        1 + scores
            .iter()
            .enumerate()
            .filter(|(j, s)| **s > scores[own] || (**s == scores[own] && *j < own))
            .count()
    };

    let records = rank_records(&backend, &corpus).unwrap();
    for (pi, record) in records.iter().enumerate() {
        // Text retrieval: image query over the caption gallery.
        let scores: Vec<f64> =
            caption_embs.iter().map(|(_, e)| cos(&image_embs[pi], e)).collect();
        let tr = caption_embs
            .iter()
            .enumerate()
            .filter(|(_, (owner, _))| *owner == pi)
            .map(|(ci, _)| brute_rank(&scores, ci))
            .min()
            .unwrap();
        assert_eq!(record.tr_rank, tr, "pair {pi} text-retrieval rank");

        // Image retrieval: each owned caption queries the image gallery.
        let ir = caption_embs
            .iter()
            .filter(|(owner, _)| *owner == pi)
            .map(|(_, ce)| {
                let scores: Vec<f64> = image_embs.iter().map(|ie| cos(ce, ie)).collect();
                brute_rank(&scores, pi)
            })
            .min()
            .unwrap();
        assert_eq!(record.ir_rank, ir, "pair {pi} image-retrieval rank");
    }

    // The gallery ordering itself: item i must sit at position
    // brute_rank(i) in the returned permutation.
    let query = &image_embs[0];
    let gallery: Vec<EmbeddingVector> = caption_embs.iter().map(|(_, e)| e.clone()).collect();
    let ordering = rank_gallery(query, &gallery).unwrap();
    let scores: Vec<f64> = gallery.iter().map(|e| cos(query, e)).collect();
    for i in 0..gallery.len() {
        let pos = ordering.iter().position(|&j| j == i).unwrap() + 1;
        assert_eq!(pos, brute_rank(&scores, i), "gallery item {i}");
    }

    // recall_at_k counts exactly the records ranked past k.
    for k in [1, 5, 10] {
        let expected = records.iter().filter(|r| r.tr_rank > k).count() as f64
            / records.len() as f64;
        assert_eq!(recall_at_k(&records, k, Direction::TextRetrieval).unwrap(), expected);
    }

    // Scripted push-out scenario: 10 pairs, 8 correct before the attack,
    // 3 of those pushed out, so the prefiltered rate is 3/8.
    let clean: Vec<RankRecord> = (0..10)
        .map(|i| RankRecord {
            pair_id: format!("p{i}"),
            tr_rank: if i < 8 { 1 } else { 4 },
            ir_rank: 1,
        })
        .collect();
    let adv: Vec<RankRecord> = (0..10)
        .map(|i| RankRecord {
            pair_id: format!("p{i}"),
            tr_rank: if i < 3 { 7 } else if i < 8 { 1 } else { 2 },
            ir_rank: 1,
        })
        .collect();
    let asr =
        attack_success_rate(&clean, &adv, Direction::TextRetrieval, 1, AsrBase::Prefiltered)
            .unwrap();
    assert_eq!(asr, 0.375);

    println!("07 retrieval ranks, recall, and scripted success rate vs brute force: PASS");
}

// ---- 08: ablation report structure and its all-off cell ----------------------------

#[test]
fn acceptance_08_ablation_grid_structure_and_baseline_cell() {
    let (corpus, table, backend) = toy_corpus_fixture(88, 12, 0.9);
    let resources = resources_for(&table);
    let base = reduction_config();

    let report = run_ablation(
        &backend,
        &resources,
        &corpus,
        &base,
        2,
        "digest".to_string(),
        "timestamp".to_string(),
    )
    .unwrap();

    // Toggle grid: four cells in fixed order.
    let toggles: Vec<(bool, bool)> = report
        .cells
        .iter()
        .map(|c| (c.toggles.eg_enabled, c.toggles.ie_enabled))
        .collect();
    assert_eq!(toggles, vec![(false, false), (false, true), (true, false), (true, true)]);

    // Sweeps: one row per text strategy, one per interaction step count.
    let strategies: Vec<_> =
        report.sweeps.text_strategy.iter().map(|r| r.text_strategy).collect();
    assert_eq!(strategies, TEXT_STRATEGY_SWEEP.to_vec());
    let steps: Vec<_> =
        report.sweeps.interaction_steps.iter().map(|r| r.steps_interact).collect();
    assert_eq!(steps, INTERACTION_STEP_SWEEP.to_vec());

    // The all-off cell must equal an independent run of the same reduced
    // config, including the combined average of both push-out rates.
    let clean_records = rank_records(&backend, &corpus).unwrap();
    let results = attack_corpus(&backend, &resources, &corpus, &base, 1).unwrap();
    let adv_corpus = apply_attacks(&corpus, &results).unwrap();
    let adv_records = rank_records(&backend, &adv_corpus).unwrap();
    let expected = cell_metrics(&clean_records, &adv_records).unwrap();

    let cell = &report.cells[0];
    assert_eq!(cell.metrics, expected);
    let tr_miss = recall_at_k(&adv_records, 1, Direction::TextRetrieval).unwrap();
    let ir_miss = recall_at_k(&adv_records, 1, Direction::ImageRetrieval).unwrap();
    assert_eq!(cell.metrics.combined_avg, (tr_miss + ir_miss) / 2.0);

    println!("08 ablation grid structure and all-off baseline cell: PASS");
}

// ---- 09: identical invocations produce identical artifacts -------------------------

#[test]
fn acceptance_09_cli_runs_are_deterministic() {
    let bin = env!("CARGO_BIN_EXE_cmi-attack");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "command {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    // Generation twice into separate directories: identical bytes.
    for name in ["a", "b"] {
        let data = dir.path().join(name);
        run(&[
            "gen-toy",
            "--out",
            data.to_str().unwrap(),
            "--pairs",
            "6",
            "--vocab",
            "36",
            "--image-shape",
            "1x6x6",
            "--embedding-dim",
            "8",
            "--word-dim",
            "8",
            "--seed",
            "9",
            "--twin-overlap",
            "0.9",
        ]);
    }
    for file in ["manifest.json", "embeddings.txt", "synonyms.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between generation runs");
    }

    // Attack twice from the same inputs: identical bytes after masking the
    // timestamp field.
    let data = dir.path().join("a");
    for name in ["r1.json", "r2.json"] {
        run(&[
            "attack",
            "--manifest",
            data.join("manifest.json").to_str().unwrap(),
            "--embeddings",
            data.join("embeddings.txt").to_str().unwrap(),
            "--synonyms",
            data.join("synonyms.json").to_str().unwrap(),
            "--out",
            dir.path().join(name).to_str().unwrap(),
            "--seed",
            "9",
            "--embedding-dim",
            "8",
        ]);
    }
    let mask_timestamp = |text: String| -> String {
        let key = "\"timestamp\":\"";
        let start = text.find(key).expect("artifact has a timestamp") + key.len();
        let end = start + text[start..].find('"').expect("timestamp is terminated");
        format!("{}{}", &text[..start], &text[end..])
    };
    let r1 = mask_timestamp(std::fs::read_to_string(dir.path().join("r1.json")).unwrap());
    let r2 = mask_timestamp(std::fs::read_to_string(dir.path().join("r2.json")).unwrap());
    assert_eq!(r1, r2, "attack artifacts differ beyond the timestamp");

    println!("09 byte-identical artifacts across repeated runs: PASS");
}

// ---- 10: full trace vs a from-scratch hand computation ------------------------------

/// Raw pair gradient of -cos(t, normalize(W x)) with respect to x, using
/// only the weight matrix and explicit loops.
fn scratch_pair_grad(
    w_img: &Array2<f64>,
    t_hat: &[f64],
    x: &Array3<f64>,
) -> (f64, Array3<f64>) {
    let flat: Vec<f64> = x.iter().copied().collect();
    let dim = w_img.nrows();
    let mut u = vec![0.0; dim];
    for (r, slot) in u.iter_mut().enumerate() {
        for (c, xv) in flat.iter().enumerate() {
            *slot += w_img[[r, c]] * xv;
        }
    }
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u_hat: Vec<f64> = u.iter().map(|v| v / norm).collect();
    let cos: f64 = u_hat.iter().zip(t_hat).map(|(a, b)| a * b).sum();

    let mut dl_du = vec![0.0; dim];
    for r in 0..dim {
        dl_du[r] = -(t_hat[r] - cos * u_hat[r]) / norm;
    }
    let mut grad = vec![0.0; flat.len()];
    for (c, slot) in grad.iter_mut().enumerate() {
        for r in 0..dim {
            *slot += w_img[[r, c]] * dl_du[r];
        }
    }
    (-cos, Array3::from_shape_vec(x.raw_dim(), grad).unwrap())
}

fn scratch_l1_normalize(g: &Array3<f64>) -> Array3<f64> {
    let l1: f64 = g.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        g.clone()
    } else {
        g.mapv(|v| v / l1)
    }
}

fn scratch_sign_step(
    x: &Array3<f64>,
    clean: &Array3<f64>,
    g: &Array3<f64>,
    alpha: f64,
    eps: f64,
) -> Array3<f64> {
    let mut out = x.clone();
    for (idx, gv) in g.iter().enumerate() {
        let slot = out.as_slice_mut().unwrap();
        let c = clean.as_slice().unwrap()[idx];
        let step = if *gv > 0.0 {
            alpha
        } else if *gv < 0.0 {
            -alpha
        } else {
            0.0
        };
        let mut v = slot[idx] + step;
        if v > c + eps {
            v = c + eps;
        }
        if v < c - eps {
            v = c - eps;
        }
        slot[idx] = v.clamp(0.0, 1.0);
    }
    out
}

#[test]
fn acceptance_10_full_trace_matches_hand_computation() {
    // Two-word vocabulary with cosine 0.6, a 2x2 single-channel image, and
    // seed 5, chosen so the caption rewrite strictly improves the loss and
    // commits.
    let table = Arc::new(
        WordEmbeddingTable::new(vec![
            ("aa".to_string(), ndarray::array![1.0, 0.0]),
            ("bb".to_string(), ndarray::array![0.6, 0.8]),
        ])
        .unwrap(),
    );
    let backend = ToyAlignedBackend::new(5, (1, 2, 2), 2, Arc::clone(&table)).unwrap();
    let resources = resources_for(&table);
    let image = ImageTensor::new(
        Array3::from_shape_vec((1, 2, 2), vec![0.2, 0.8, 0.5, 0.3]).unwrap(),
    )
    .unwrap();
    let caption = Caption::from_text("aa").unwrap();
    let cfg = AttackConfig {
        eps_image: 0.1,
        alpha: 0.03,
        steps_image: 2,
        steps_interact: 1,
        lambda: 0.9,
        tau: 0.0,
        k_substitutes: 2,
        scales: vec![1.0],
        ..AttackConfig::default()
    };

    let result = run_cmi_attack(
        &backend,
        &resources,
        &image,
        std::slice::from_ref(&caption),
        &cfg,
    )
    .unwrap();

    // Scratch computation, using only the weight accessors.
    let w_img = backend.image_weights().clone();
    let w_txt = backend.text_weights().clone();
    let text_embed = |word_vec: &[f64]| -> Vec<f64> {
        let dim = w_txt.nrows();
        let mut t = vec![0.0; dim];
        for (r, slot) in t.iter_mut().enumerate() {
            for (c, wv) in word_vec.iter().enumerate() {
                *slot += w_txt[[r, c]] * wv;
            }
        }
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        t.iter().map(|v| v / norm).collect()
    };
    let t_aa = text_embed(&[1.0, 0.0]);
    let t_bb = text_embed(&[0.6, 0.8]);

    let clean = image.data().clone();

    // Interaction, iteration 1: the caption is scored against the clean
    // image. Candidate "bb" passes tau = 0 (cosine 0.6 to "aa") and must
    // strictly raise the pair loss for the rewrite to commit.
    let (loss_aa, _) = scratch_pair_grad(&w_img, &t_aa, &clean);
    let (loss_bb, _) = scratch_pair_grad(&w_img, &t_bb, &clean);
    assert!(loss_bb > loss_aa, "seed 5 must make the replacement commit");
    assert_eq!(result.adv_captions[0].text(), "bb");
    assert_eq!(result.words_changed[0].len(), 1);
    assert_eq!(result.words_changed[0][0].from, "aa");
    assert_eq!(result.words_changed[0][0].to, "bb");

    // Gradient step on the clean image against the rewritten caption. The
    // stepped interaction image is discarded here because the image phase
    // restarts from the clean one; only the momentum survives.
    let (inter_loss, raw_grad) = scratch_pair_grad(&w_img, &t_bb, &clean);
    let ghat_1 = scratch_l1_normalize(&raw_grad);
    let g_1 = ghat_1.clone();

    // Image phase restarts from the clean image; momentum carries over.
    let (img_loss_1, raw_1) = scratch_pair_grad(&w_img, &t_bb, &clean);
    let ghat_i1 = scratch_l1_normalize(&raw_1);
    let g_i1 = g_1.mapv(|v| v * cfg.lambda) + &ghat_i1;
    let x_1 = scratch_sign_step(&clean, &clean, &g_i1, cfg.alpha, cfg.eps_image);

    let (img_loss_2, raw_2) = scratch_pair_grad(&w_img, &t_bb, &x_1);
    let ghat_i2 = scratch_l1_normalize(&raw_2);
    let g_i2 = g_i1.mapv(|v| v * cfg.lambda) + &ghat_i2;
    let x_2 = scratch_sign_step(&x_1, &clean, &g_i2, cfg.alpha, cfg.eps_image);

    // Every recorded quantity agrees with the scratch trace.
    assert_eq!(result.trace.len(), 3);
    let max_abs =
        |a: &Array3<f64>, b: &Array3<f64>| (a - b).iter().map(|v| v.abs()).fold(0.0, f64::max);

    let rec = &result.trace[0];
    assert_eq!((rec.phase, rec.iteration), (AttackPhase::Interaction, 1));
    assert!((rec.loss - inter_loss).abs() <= 1e-9);
    assert!(max_abs(&rec.grad, &ghat_1) <= 1e-9);
    assert!(max_abs(&rec.momentum, &g_1) <= 1e-9);

    let rec = &result.trace[1];
    assert_eq!((rec.phase, rec.iteration), (AttackPhase::Image, 1));
    assert!((rec.loss - img_loss_1).abs() <= 1e-9);
    assert!(max_abs(&rec.grad, &ghat_i1) <= 1e-9);
    assert!(max_abs(&rec.momentum, &g_i1) <= 1e-9);

    let rec = &result.trace[2];
    assert_eq!((rec.phase, rec.iteration), (AttackPhase::Image, 2));
    assert!((rec.loss - img_loss_2).abs() <= 1e-9);
    assert!(max_abs(&rec.grad, &ghat_i2) <= 1e-9);
    assert!(max_abs(&rec.momentum, &g_i2) <= 1e-9);

    assert!(max_abs(result.adv_image.data(), &x_2) <= 1e-9);

    // Reported similarities and distance match raw arithmetic.
    let (clean_loss, _) = scratch_pair_grad(&w_img, &t_aa, &clean);
    let (adv_loss, _) = scratch_pair_grad(&w_img, &t_bb, &x_2);
    assert!((result.clean_sim - (-clean_loss)).abs() <= 1e-9);
    assert!((result.adv_sim - (-adv_loss)).abs() <= 1e-9);
    let linf = clean
        .iter()
        .zip(x_2.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!((result.linf - linf).abs() <= 1e-12);

    println!("10 full two-phase trace vs hand computation: PASS");
}
