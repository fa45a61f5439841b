//! Command-line driver: attack a corpus, evaluate retrieval damage, run
//! ablations, generate toy datasets, and audit gradients.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use cmi_attack::attack_math::SetLossSpec;
use cmi_attack::backend::ModelBackend;
use cmi_attack::cli_config::{
    self, build_toy_backend, canonical_json, config_digest, fd_gradient_audit,
    generate_toy_corpus, load_config, load_embedding_table, load_manifest, load_synonyms,
    manifest_to_corpus, persist_json, synth_image, EvalReport, ToyCorpusParams,
};
use cmi_attack::cmi_engine::{AttackConfig, TextResources};
use cmi_attack::embedding_guidance::{Caption, SynonymMap, UnigramFiller};
use cmi_attack::error::{CmiError, Result};
use cmi_attack::eval_retrieval::{
    apply_attacks, attack_corpus, eval_records, rank_records, run_ablation, AsrBase,
    RetrievalCorpus,
};

#[derive(Parser)]
#[command(
    name = "cmi-attack",
    version,
    about = "Collaborative multimodal interaction attack on dual-encoder image-text models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attacks every pair in a manifest and writes a run artifact.
    Attack(RunArgs),
    /// Attacks a manifest and writes a retrieval evaluation report.
    Eval(RunArgs),
    /// Runs the toggle grid and sweep ablations and writes the report.
    Ablate(RunArgs),
    /// Generates an aligned toy corpus (manifest, embeddings, synonyms).
    GenToy(GenToyArgs),
    /// Audits analytic image gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Attack config JSON; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Word embedding table, one token and its components per line.
    #[arg(long)]
    embeddings: PathBuf,
    /// Synonym JSON object; empty map when omitted.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// Output artifact path.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed (and therefore the backend seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-pair attacks.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Model backend. Only "toy" ships in this build.
    #[arg(long, default_value = "toy")]
    backend: String,
    /// Embedding dimension for the toy backend.
    #[arg(long, default_value_t = 32)]
    embedding_dim: usize,
}

#[derive(Args)]
struct GenToyArgs {
    /// Directory for manifest.json, embeddings.txt, and synonyms.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value_t = 600)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    caption_len: usize,
    #[arg(long, default_value_t = 3)]
    captions_per_pair: usize,
    /// Image shape as CxHxW, for example 3x16x16.
    #[arg(long, default_value = "3x16x16", value_parser = parse_shape)]
    image_shape: (usize, usize, usize),
    #[arg(long, default_value_t = 32)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 32)]
    word_dim: usize,
    /// Pixel overlap for odd pairs with their even neighbor, in [0, 1).
    /// Zero disables twins; high values give near-duplicate gallery
    /// competitors that small attack budgets can exploit.
    #[arg(long, default_value_t = 0.0)]
    twin_overlap: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random (image, caption set) points to audit.
    #[arg(long, default_value_t = 10)]
    points: usize,
    /// Central-difference probe step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_shape(text: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = text.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected CxHxW, got '{text}'"));
    }
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|_| format!("'{p}' is not a positive integer")))
        .collect::<std::result::Result<_, _>>()?;
    if dims.iter().any(|d| *d == 0) {
        return Err(format!("shape dimensions must be positive, got '{text}'"));
    }
    Ok((dims[0], dims[1], dims[2]))
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Attack(args) => cmd_attack(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::GenToy(args) => cmd_gen_toy(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    }
}

/// Everything a run subcommand needs, loaded and validated.
struct Loaded {
    cfg: AttackConfig,
    corpus: RetrievalCorpus,
    resources: TextResources,
    backend: Box<dyn ModelBackend>,
}

fn load_run_inputs(args: &RunArgs) -> Result<Loaded> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => AttackConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let manifest = load_manifest(&args.manifest)?;
    let base_dir = args.manifest.parent().unwrap_or_else(|| Path::new("."));
    let corpus = manifest_to_corpus(&manifest, base_dir)?;

    let (table, warnings) = load_embedding_table(&args.embeddings)?;
    for warning in warnings {
        eprintln!("warning: {warning}");
    }
    let table = Arc::new(table);

    let synonyms = match &args.synonyms {
        Some(path) => Arc::new(load_synonyms(path)?),
        None => Arc::new(SynonymMap::default()),
    };
    let filler = Arc::new(UnigramFiller::from_table(&table));
    let resources = TextResources::new(Arc::clone(&table), filler, synonyms);

    let backend: Box<dyn ModelBackend> = match args.backend.as_str() {
        "toy" => Box::new(build_toy_backend(cfg.seed, args.embedding_dim, &corpus, table)?),
        other => {
            return Err(CmiError::Capability(format!(
                "backend '{other}' is not available; this build ships 'toy'"
            )))
        }
    };
    Ok(Loaded { cfg, corpus, resources, backend })
}

fn timestamp_now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn cmd_attack(args: &RunArgs) -> Result<()> {
    let loaded = load_run_inputs(args)?;
    let backend = loaded.backend.as_ref();

    let clean_records = rank_records(backend, &loaded.corpus)?;
    let results =
        attack_corpus(backend, &loaded.resources, &loaded.corpus, &loaded.cfg, args.workers)?;
    let adv_corpus = apply_attacks(&loaded.corpus, &results)?;
    let adv_records = rank_records(backend, &adv_corpus)?;

    let artifact = cli_config::build_run_artifact(
        &loaded.cfg,
        backend,
        &results,
        &clean_records,
        &adv_records,
        AsrBase::Prefiltered,
        timestamp_now(),
    )?;
    persist_json(&artifact, &args.out)?;
    println!(
        "attacked {} pairs: tr_asr_r1={:.4} ir_asr_r1={:.4} -> {}",
        artifact.pairs.len(),
        artifact.metrics.tr_asr_r1,
        artifact.metrics.ir_asr_r1,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &RunArgs) -> Result<()> {
    let loaded = load_run_inputs(args)?;
    let backend = loaded.backend.as_ref();

    let clean_records = rank_records(backend, &loaded.corpus)?;
    let results =
        attack_corpus(backend, &loaded.resources, &loaded.corpus, &loaded.cfg, args.workers)?;
    let adv_corpus = apply_attacks(&loaded.corpus, &results)?;
    let adv_records = rank_records(backend, &adv_corpus)?;

    let report = EvalReport {
        tool_version: cli_config::TOOL_VERSION.to_string(),
        seed: loaded.cfg.seed,
        timestamp: timestamp_now(),
        config_digest: config_digest(&loaded.cfg)?,
        backend: backend.descriptor(),
        records: eval_records(&clean_records, &adv_records)?,
        metrics: cli_config::aggregate_metrics(&clean_records, &adv_records, AsrBase::Prefiltered)?,
    };
    persist_json(&report, &args.out)?;
    println!(
        "evaluated {} pairs: tr_r1 {:.4} -> {:.4}, ir_r1 {:.4} -> {:.4} -> {}",
        report.records.len(),
        report.metrics.tr_r1_clean,
        report.metrics.tr_r1_adv,
        report.metrics.ir_r1_clean,
        report.metrics.ir_r1_adv,
        args.out.display()
    );
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let loaded = load_run_inputs(args)?;
    let report = run_ablation(
        loaded.backend.as_ref(),
        &loaded.resources,
        &loaded.corpus,
        &loaded.cfg,
        args.workers,
        config_digest(&loaded.cfg)?,
        timestamp_now(),
    )?;
    persist_json(&report, &args.out)?;
    println!(
        "ablation over {} pairs: {} cells, {} strategy rows, {} step rows -> {}",
        loaded.corpus.len(),
        report.cells.len(),
        report.sweeps.text_strategy.len(),
        report.sweeps.interaction_steps.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_gen_toy(args: &GenToyArgs) -> Result<()> {
    let params = ToyCorpusParams {
        seed: args.seed,
        n_pairs: args.pairs,
        image_shape: args.image_shape,
        vocab_size: args.vocab,
        caption_len: args.caption_len,
        captions_per_pair: args.captions_per_pair,
        embedding_dim: args.embedding_dim,
        word_dim: args.word_dim,
        twin_overlap: args.twin_overlap,
    };
    let corpus = generate_toy_corpus(&params)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CmiError::io(&args.out, e))?;

    let manifest_path = args.out.join("manifest.json");
    persist_json(&corpus.manifest, &manifest_path)?;
    let emb_path = args.out.join("embeddings.txt");
    cli_config::save_embedding_table(&corpus.table, &emb_path)?;
    let syn_path = args.out.join("synonyms.json");
    let mut syn_text = canonical_json(corpus.synonyms.entries())?;
    syn_text.push('\n');
    std::fs::write(&syn_path, syn_text).map_err(|e| CmiError::io(&syn_path, e))?;

    println!(
        "generated {} pairs, {} tokens -> {}",
        params.n_pairs,
        corpus.table.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.points == 0 {
        return Err(CmiError::Config("points must be at least 1".into()));
    }
    let params = ToyCorpusParams {
        seed: args.seed,
        n_pairs: 4,
        image_shape: (1, 6, 6),
        vocab_size: 24,
        caption_len: 3,
        captions_per_pair: 1,
        embedding_dim: 8,
        word_dim: 8,
        twin_overlap: 0.0,
    };
    let corpus = generate_toy_corpus(&params)?;
    let retrieval = manifest_to_corpus(&corpus.manifest, Path::new("."))?;
    let backend = build_toy_backend(
        params.seed,
        params.embedding_dim,
        &retrieval,
        Arc::new(corpus.table.clone()),
    )?;

    let tokens: Vec<&str> = corpus.table.tokens().collect();
    let mut worst = 0.0f64;
    for point in 0..args.points {
        let image = synth_image(args.seed.wrapping_add(1000 + point as u64), params.image_shape)?;
        let words: Vec<String> = (0..3)
            .map(|j| tokens[(point * 7 + j * 5) % tokens.len()].to_string())
            .collect();
        let captions = vec![Caption::new(words)?];
        let (spec, scales): (SetLossSpec, &[f64]) = if point % 2 == 0 {
            (SetLossSpec::PairNegcos, &[1.0])
        } else {
            (SetLossSpec::CrossProductMean, &[0.5, 1.0, 1.25])
        };
        let rel = fd_gradient_audit(&backend, spec, &image, scales, &captions, args.step)?;
        worst = worst.max(rel);
    }
    println!("gradcheck: {} points, max relative error {worst:.3e}", args.points);
    if worst > args.tolerance {
        return Err(CmiError::Validation(format!(
            "gradient audit failed: max relative error {worst:.3e} exceeds {:.1e}",
            args.tolerance
        )));
    }
    Ok(())
}
