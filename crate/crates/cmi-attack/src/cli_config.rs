//! Configuration, dataset, and artifact I/O.
//!
//! Everything persisted goes through one canonical JSON writer (sorted
//! keys, fixed float formatting, no nulls), so identical runs produce
//! byte-identical files and digests. The module also owns the
//! self-contained toy corpus generator: aligned image-caption pairs whose
//! word vectors cluster around each pair's image embedding under the same
//! seeded projection weights the toy backend will draw.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    projection_weights, BackendDescriptor, ImageTensor, ModelBackend, ToyAlignedBackend,
};
use crate::cmi_engine::{AttackConfig, AttackPhase, AttackResult, WordChange};
use crate::embedding_guidance::{Caption, SynonymMap, WordEmbeddingTable};
use crate::error::{CmiError, Result};
use crate::eval_retrieval::{
    attack_success_rate, recall_at_k, AsrBase, CorpusPair, Direction, EvalRecord, RankRecord,
    RetrievalCorpus,
};

// ---- canonical JSON ---------------------------------------------------------

/// Serializes a value to canonical JSON: object keys sorted, floats in
/// shortest round-trip scientific notation, and no nulls or non-finite
/// numbers anywhere. Two equal values always produce identical bytes.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)
        .map_err(|e| CmiError::Validation(format!("value is not serializable: {e}")))?;
    let mut out = String::new();
    write_canonical(&mut out, &v)?;
    Ok(out)
}

fn write_canonical(out: &mut String, value: &serde_json::Value) -> Result<()> {
    use serde_json::Value;
    match value {
        // serde_json turns non-finite floats into null instead of failing,
        // so a null here is either that or a None field; both are banned
        // from artifacts.
        Value::Null => {
            Err(CmiError::Validation("artifact contains a null or non-finite number".into()))
        }
        Value::Bool(b) => {
            out.push_str(if *b { "true" } else { "false" });
            Ok(())
        }
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                write!(out, "{i}").expect("writing to a string cannot fail");
            } else if let Some(u) = n.as_u64() {
                write!(out, "{u}").expect("writing to a string cannot fail");
            } else {
                let f = n.as_f64().ok_or_else(|| {
                    CmiError::Validation(format!("unrepresentable number {n}"))
                })?;
                if !f.is_finite() {
                    return Err(CmiError::Validation(format!("non-finite number {f}")));
                }
                write!(out, "{f:e}").expect("writing to a string cannot fail");
            }
            Ok(())
        }
        Value::String(s) => {
            out.push_str(
                &serde_json::to_string(s).expect("strings always serialize"),
            );
            Ok(())
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(out, item)?;
            }
            out.push(']');
            Ok(())
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("strings always serialize"));
                out.push(':');
                write_canonical(out, &map[*key])?;
            }
            out.push('}');
            Ok(())
        }
    }
}

/// SHA-256 hex digest of the canonical JSON form of a config.
pub fn config_digest(cfg: &AttackConfig) -> Result<String> {
    let canonical = canonical_json(cfg)?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(hasher.finalize().iter().fold(String::new(), |mut acc, b| {
        write!(acc, "{b:02x}").expect("writing to a string cannot fail");
        acc
    }))
}

/// Writes a value as canonical JSON with a trailing newline.
pub fn persist_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = canonical_json(value)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CmiError::io(path, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| CmiError::io(path, e))
}

// ---- config ----------------------------------------------------------------

/// Loads and validates an attack config. Every field is optional in the
/// file; an empty JSON object yields the full default config.
pub fn load_config(path: &Path) -> Result<AttackConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmiError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: AttackConfig = serde_json::from_str(&text)
        .map_err(|e| CmiError::Config(format!("invalid config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---- embedding table I/O -----------------------------------------------------

/// Loads a word embedding table: one record per line, token followed by the
/// vector components, space-separated. Duplicate tokens keep the first
/// occurrence and add a warning; malformed lines fail with their line
/// number. Returns the table plus any warnings.
pub fn load_embedding_table(path: &Path) -> Result<(WordEmbeddingTable, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CmiError::io(path, e))?;
    let mut entries: Vec<(String, Array1<f64>)> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut dim: Option<usize> = None;

    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-blank line has a first field").to_string();
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    CmiError::Data(format!(
                        "{}:{line_no}: '{f}' is not a number",
                        path.display()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(CmiError::Data(format!(
                "{}:{line_no}: token '{token}' has no vector components",
                path.display()
            )));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(CmiError::Data(format!(
                    "{}:{line_no}: token '{token}' has {} components but the table uses {d}",
                    path.display(),
                    values.len()
                )));
            }
            Some(_) => {}
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CmiError::Data(format!(
                "{}:{line_no}: token '{token}' has a non-finite component",
                path.display()
            )));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(CmiError::Data(format!(
                "{}:{line_no}: token '{token}' has a zero vector",
                path.display()
            )));
        }
        if let Some(first_line) = seen.get(&token) {
            warnings.push(format!(
                "{}:{line_no}: duplicate token '{token}' ignored (first defined on line {first_line})",
                path.display()
            ));
            continue;
        }
        seen.insert(token.clone(), line_no);
        entries.push((token, Array1::from(values)));
    }

    if entries.is_empty() {
        return Err(CmiError::Data(format!(
            "{}: embedding table has no records",
            path.display()
        )));
    }
    let table = WordEmbeddingTable::new(entries)
        .map_err(|e| CmiError::Data(format!("{}: {e}", path.display())))?;
    Ok((table, warnings))
}

/// Writes a table in the line format `load_embedding_table` reads. Float
/// components use the shortest decimal form that parses back bit-exactly.
pub fn save_embedding_table(table: &WordEmbeddingTable, path: &Path) -> Result<()> {
    let mut out = String::new();
    for token in table.tokens() {
        let vec = table.lookup(token).expect("iterated token is present");
        out.push_str(token);
        for v in vec {
            write!(out, " {v}").expect("writing to a string cannot fail");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CmiError::io(path, e))
}

/// Loads a synonym file: a JSON object mapping tokens to synonym lists.
pub fn load_synonyms(path: &Path) -> Result<SynonymMap> {
    let text = std::fs::read_to_string(path).map_err(|e| CmiError::io(path, e))?;
    let entries: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
        .map_err(|e| CmiError::Data(format!("invalid synonym file {}: {e}", path.display())))?;
    Ok(SynonymMap::new(entries))
}

// ---- dataset manifest ---------------------------------------------------------

/// Where a pair's image comes from: a PNG on disk (relative paths resolve
/// against the manifest's directory), a seeded synthetic image, or a
/// pixelwise blend of two seeded images. Blends give a corpus
/// near-duplicate images, which is what makes retrieval attackable at
/// small budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Path(String),
    Synthetic { seed: u64, shape: (usize, usize, usize) },
    Blend { seeds: (u64, u64), weight: f64, shape: (usize, usize, usize) },
}

impl ImageSource {
    fn materialize(&self, base_dir: &Path) -> Result<ImageTensor> {
        match self {
            ImageSource::Path(rel) => load_png_image(&base_dir.join(rel)),
            ImageSource::Synthetic { seed, shape } => synth_image(*seed, *shape),
            ImageSource::Blend { seeds, weight, shape } => {
                let a = synth_image(seeds.0, *shape)?;
                let b = synth_image(seeds.1, *shape)?;
                ImageTensor::new(a.data() * (1.0 - weight) + b.data() * *weight)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub image: ImageSource,
    pub captions: Vec<String>,
}

/// Dataset description: pair ids, image sources, and caption strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(CmiError::Validation("manifest has no entries".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.entries {
            if entry.pair_id.is_empty() {
                return Err(CmiError::Validation("manifest entry has an empty pair_id".into()));
            }
            if !seen.insert(entry.pair_id.as_str()) {
                return Err(CmiError::Validation(format!(
                    "duplicate pair_id '{}' in manifest",
                    entry.pair_id
                )));
            }
            if entry.captions.is_empty() {
                return Err(CmiError::Validation(format!(
                    "pair '{}' has no captions",
                    entry.pair_id
                )));
            }
            for caption in &entry.captions {
                if caption.split_whitespace().next().is_none() {
                    return Err(CmiError::Validation(format!(
                        "pair '{}' has a blank caption",
                        entry.pair_id
                    )));
                }
            }
            match entry.image {
                ImageSource::Synthetic { shape: (c, h, w), .. }
                | ImageSource::Blend { shape: (c, h, w), .. } => {
                    if c == 0 || h == 0 || w == 0 {
                        return Err(CmiError::Validation(format!(
                            "pair '{}' has a degenerate synthetic shape",
                            entry.pair_id
                        )));
                    }
                }
                ImageSource::Path(_) => {}
            }
            if let ImageSource::Blend { weight, .. } = entry.image {
                if !(0.0..=1.0).contains(&weight) || !weight.is_finite() {
                    return Err(CmiError::Validation(format!(
                        "pair '{}' has blend weight {weight}, outside [0, 1]",
                        entry.pair_id
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CmiError::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| CmiError::Data(format!("invalid manifest {}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Seeded uniform-[0,1) image, drawn in row-major pixel order.
pub fn synth_image(seed: u64, shape: (usize, usize, usize)) -> Result<ImageTensor> {
    let (c, h, w) = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(CmiError::InvalidInput(format!("degenerate image shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..c * h * w).map(|_| rng.random::<f64>()).collect();
    ImageTensor::new(
        Array3::from_shape_vec(shape, values).expect("value count matches the shape"),
    )
}

/// Loads an 8-bit PNG as a (3, height, width) tensor scaled to [0, 1].
pub fn load_png_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| CmiError::Data(format!("cannot load image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = pixel.0[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(data)
}

/// Materializes a manifest into an evaluable corpus. `base_dir` anchors
/// relative image paths (usually the manifest's directory).
pub fn manifest_to_corpus(manifest: &DatasetManifest, base_dir: &Path) -> Result<RetrievalCorpus> {
    manifest.validate()?;
    let pairs = manifest
        .entries
        .iter()
        .map(|entry| {
            let image = entry.image.materialize(base_dir)?;
            let captions = entry
                .captions
                .iter()
                .map(|c| Caption::from_text(c))
                .collect::<Result<Vec<_>>>()?;
            Ok(CorpusPair { pair_id: entry.pair_id.clone(), image, captions })
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalCorpus::new(pairs)
}

// ---- toy corpus generation -----------------------------------------------------

/// Shape of a generated toy corpus.
///
/// `twin_overlap` > 0 turns every odd pair into a near-duplicate of the
/// preceding even pair: its image blends that much of the neighbor's
/// pixels with fresh ones. Twins put a close competitor in every gallery,
/// which is what gives small-budget attacks room to flip ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusParams {
    pub seed: u64,
    pub n_pairs: usize,
    pub image_shape: (usize, usize, usize),
    pub vocab_size: usize,
    pub caption_len: usize,
    pub captions_per_pair: usize,
    pub embedding_dim: usize,
    pub word_dim: usize,
    pub twin_overlap: f64,
}

impl Default for ToyCorpusParams {
    fn default() -> Self {
        ToyCorpusParams {
            seed: 0,
            n_pairs: 100,
            image_shape: (3, 16, 16),
            vocab_size: 600,
            caption_len: 4,
            captions_per_pair: 3,
            embedding_dim: 32,
            word_dim: 32,
            twin_overlap: 0.0,
        }
    }
}

impl ToyCorpusParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(CmiError::Config("n_pairs must be at least 1".into()));
        }
        let (c, h, w) = self.image_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(CmiError::Config(format!(
                "image shape dimensions must be positive, got {:?}",
                self.image_shape
            )));
        }
        if self.caption_len == 0 || self.captions_per_pair == 0 {
            return Err(CmiError::Config(
                "caption_len and captions_per_pair must be at least 1".into(),
            ));
        }
        if self.embedding_dim < 2 {
            return Err(CmiError::Config("embedding_dim must be at least 2".into()));
        }
        if self.word_dim < self.embedding_dim {
            // Caption alignment solves W_txt c = f, which needs the text
            // projection to be onto.
            return Err(CmiError::Config(format!(
                "word_dim ({}) must be at least embedding_dim ({})",
                self.word_dim, self.embedding_dim
            )));
        }
        if !(0.0..1.0).contains(&self.twin_overlap) {
            return Err(CmiError::Config(format!(
                "twin_overlap must be in [0, 1), got {}",
                self.twin_overlap
            )));
        }
        let cluster_size = self.vocab_size / self.n_pairs;
        if cluster_size < self.caption_len {
            return Err(CmiError::Config(format!(
                "vocab_size/n_pairs gives cluster size {cluster_size}, which cannot fill \
                 {}-word captions; increase vocab_size or shrink caption_len",
                self.caption_len
            )));
        }
        Ok(())
    }

    pub fn cluster_size(&self) -> usize {
        self.vocab_size / self.n_pairs
    }
}

/// A generated corpus plus the resources needed to attack it.
#[derive(Debug)]
pub struct ToyCorpus {
    pub params: ToyCorpusParams,
    pub manifest: DatasetManifest,
    pub table: WordEmbeddingTable,
    pub synonyms: SynonymMap,
}

/// Solves the square system `a x = b` by Gauss elimination with partial
/// pivoting. The generator's Gram systems are tiny, so a dense solve is
/// plenty.
fn solve_linear(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    let mut m = Array2::<f64>::zeros((n, n + 1));
    m.slice_mut(s![.., ..n]).assign(a);
    m.slice_mut(s![.., n]).assign(b);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                m[[r1, col]].abs().partial_cmp(&m[[r2, col]].abs()).expect("finite pivots")
            })
            .expect("column range is non-empty");
        if m[[pivot_row, col]].abs() < 1e-12 {
            return Err(CmiError::Data(
                "text projection Gram matrix is numerically singular".into(),
            ));
        }
        if pivot_row != col {
            for j in 0..=n {
                m.swap([col, j], [pivot_row, j]);
            }
        }
        let pivot = m[[col, col]];
        for row in (col + 1)..n {
            let factor = m[[row, col]] / pivot;
            if factor != 0.0 {
                for j in col..=n {
                    let sub = factor * m[[col, j]];
                    m[[row, j]] -= sub;
                }
            }
        }
    }
    let mut x = Array1::<f64>::zeros(n);
    for row in (0..n).rev() {
        let mut acc = m[[row, n]];
        for j in (row + 1)..n {
            acc -= m[[row, j]] * x[j];
        }
        x[row] = acc / m[[row, row]];
    }
    Ok(x)
}

/// Generates an aligned toy corpus.
///
/// Pair p gets a seeded random image; the pair's word cluster sits at a
/// pre-image of the image's embedding under the text projection a toy
/// backend with the same seed will draw, so matched captions encode next
/// to their image. Cluster words are mutual synonyms; leftover vocabulary
/// becomes unaligned noise words. Generation fails if matched
/// image-caption cosine does not beat mismatched cosine on average.
pub fn generate_toy_corpus(params: &ToyCorpusParams) -> Result<ToyCorpus> {
    params.validate()?;
    let (c, h, w) = params.image_shape;
    let n_pixels = c * h * w;
    let (w_img, w_txt) =
        projection_weights(params.seed, params.embedding_dim, n_pixels, params.word_dim);

    // Corpus stream is offset from the weight stream so the two never alias.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(1));

    // Pair images and their embeddings under the shared weights. With
    // twins on, odd pairs blend the previous pair's pixels with their own.
    let mut image_sources = Vec::with_capacity(params.n_pairs);
    let mut image_embs: Vec<Array1<f64>> = Vec::with_capacity(params.n_pairs);
    let mut prev_seed = 0u64;
    for pair in 0..params.n_pairs {
        let image_seed: u64 = rng.random();
        let source = if params.twin_overlap > 0.0 && pair % 2 == 1 {
            ImageSource::Blend {
                seeds: (prev_seed, image_seed),
                weight: 1.0 - params.twin_overlap,
                shape: params.image_shape,
            }
        } else {
            ImageSource::Synthetic { seed: image_seed, shape: params.image_shape }
        };
        prev_seed = image_seed;
        let image = source.materialize(Path::new("."))?;
        let flat = Array1::from_iter(image.data().iter().copied());
        let u = w_img.dot(&flat);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(CmiError::Data("generated image embeds to the zero vector".into()));
        }
        image_sources.push(source);
        image_embs.push(u.mapv(|v| v / norm));
    }

    // Each cluster center is the minimum-norm pre-image of its pair's
    // image embedding: W_txt c = f exactly, so matched captions encode
    // onto their image up to word noise.
    let gram = w_txt.dot(&w_txt.t());
    let centers: Vec<Array1<f64>> = image_embs
        .iter()
        .map(|f| Ok(w_txt.t().dot(&solve_linear(&gram, f)?)))
        .collect::<Result<_>>()?;

    // Vocabulary: per-pair clusters, then noise words.
    let cluster_size = params.cluster_size();
    let noise_scale = 0.1 / (params.word_dim as f64).sqrt();
    let token_name = |idx: usize| format!("tok{idx:05}");
    let mut entries: Vec<(String, Array1<f64>)> = Vec::with_capacity(params.vocab_size);
    for idx in 0..params.vocab_size {
        let pair = idx / cluster_size;
        let vector = if pair < params.n_pairs {
            let noise =
                Array1::from_iter((0..params.word_dim).map(|_| rng.random_range(-1.0..1.0)));
            &centers[pair] + noise.mapv(|v| v * noise_scale)
        } else {
            let mut v = Array1::from_iter(
                (0..params.word_dim).map(|_| rng.random_range(-1.0..1.0)),
            );
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                v[0] = 1.0;
            } else {
                v.mapv_inplace(|x| x / norm);
            }
            v
        };
        entries.push((token_name(idx), vector));
    }
    let table = WordEmbeddingTable::new(entries)?;

    // Captions: distinct in-cluster tokens per caption.
    let mut manifest_entries = Vec::with_capacity(params.n_pairs);
    for pair in 0..params.n_pairs {
        let cluster_start = pair * cluster_size;
        let mut captions = Vec::with_capacity(params.captions_per_pair);
        for _ in 0..params.captions_per_pair {
            let picks = rand::seq::index::sample(&mut rng, cluster_size, params.caption_len);
            let words: Vec<String> =
                picks.iter().map(|offset| token_name(cluster_start + offset)).collect();
            captions.push(words.join(" "));
        }
        manifest_entries.push(ManifestEntry {
            pair_id: format!("pair{pair:04}"),
            image: image_sources[pair].clone(),
            captions,
        });
    }
    let manifest = DatasetManifest { entries: manifest_entries };

    // Synonyms: every cluster token maps to its cluster mates.
    let mut synonym_entries = BTreeMap::new();
    for pair in 0..params.n_pairs {
        let start = pair * cluster_size;
        for offset in 0..cluster_size {
            let token = token_name(start + offset);
            let mates: Vec<String> = (0..cluster_size)
                .filter(|o| *o != offset)
                .map(|o| token_name(start + o))
                .collect();
            synonym_entries.insert(token, mates);
        }
    }
    let synonyms = SynonymMap::new(synonym_entries);

    // Separation check: matched caption-image cosine must beat mismatched
    // on average, otherwise the corpus is useless for retrieval.
    let mut matched = 0.0;
    let mut mismatched = 0.0;
    for (pair, entry) in manifest.entries.iter().enumerate() {
        let caption = Caption::from_text(&entry.captions[0])?;
        let mut mean = Array1::<f64>::zeros(params.word_dim);
        for word in caption.words() {
            mean += table.lookup(word).expect("generated captions use table tokens");
        }
        mean /= caption.len() as f64;
        let t = w_txt.dot(&mean);
        let t_norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if t_norm == 0.0 {
            return Err(CmiError::Data("generated caption embeds to the zero vector".into()));
        }
        let t = t.mapv(|v| v / t_norm);
        matched += t.dot(&image_embs[pair]);
        mismatched += t.dot(&image_embs[(pair + 1) % params.n_pairs]);
    }
    matched /= params.n_pairs as f64;
    mismatched /= params.n_pairs as f64;
    if matched <= mismatched {
        return Err(CmiError::Data(format!(
            "toy corpus failed its separation check: matched cosine {matched:.4} <= \
             mismatched {mismatched:.4}"
        )));
    }

    Ok(ToyCorpus { params: params.clone(), manifest, table, synonyms })
}

/// Builds the deterministic toy backend for a corpus: image shape from the
/// first pair, table as given.
pub fn build_toy_backend(
    seed: u64,
    embedding_dim: usize,
    corpus: &RetrievalCorpus,
    table: Arc<WordEmbeddingTable>,
) -> Result<ToyAlignedBackend> {
    let shape = corpus.pairs()[0].image.shape();
    ToyAlignedBackend::new(seed, shape, embedding_dim, table)
}

// ---- artifacts -------------------------------------------------------------------

/// Scalar per-iteration trace stored in artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceScalars {
    pub phase: AttackPhase,
    pub iteration: usize,
    pub loss: f64,
    pub grad_l1: f64,
    pub momentum_l1: f64,
}

/// Per-pair attack summary stored in artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pair_id: String,
    pub clean_sim: f64,
    pub adv_sim: f64,
    pub linf: f64,
    pub adv_captions: Vec<String>,
    pub words_changed: Vec<Vec<WordChange>>,
    pub tr_rank_clean: usize,
    pub tr_rank_adv: usize,
    pub ir_rank_clean: usize,
    pub ir_rank_adv: usize,
    pub trace: Vec<TraceScalars>,
}

/// R@k push-out rates for both corpus states plus ASR, both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub tr_r1_clean: f64,
    pub tr_r5_clean: f64,
    pub tr_r10_clean: f64,
    pub tr_r1_adv: f64,
    pub tr_r5_adv: f64,
    pub tr_r10_adv: f64,
    pub ir_r1_clean: f64,
    pub ir_r5_clean: f64,
    pub ir_r10_clean: f64,
    pub ir_r1_adv: f64,
    pub ir_r5_adv: f64,
    pub ir_r10_adv: f64,
    pub tr_asr_r1: f64,
    pub ir_asr_r1: f64,
    pub asr_base: AsrBase,
}

/// Computes the aggregate table from clean and adversarial rank records.
pub fn aggregate_metrics(
    clean_records: &[RankRecord],
    adv_records: &[RankRecord],
    base: AsrBase,
) -> Result<AggregateMetrics> {
    let miss = |records: &[RankRecord], k: usize, d: Direction| recall_at_k(records, k, d);
    Ok(AggregateMetrics {
        tr_r1_clean: miss(clean_records, 1, Direction::TextRetrieval)?,
        tr_r5_clean: miss(clean_records, 5, Direction::TextRetrieval)?,
        tr_r10_clean: miss(clean_records, 10, Direction::TextRetrieval)?,
        tr_r1_adv: miss(adv_records, 1, Direction::TextRetrieval)?,
        tr_r5_adv: miss(adv_records, 5, Direction::TextRetrieval)?,
        tr_r10_adv: miss(adv_records, 10, Direction::TextRetrieval)?,
        ir_r1_clean: miss(clean_records, 1, Direction::ImageRetrieval)?,
        ir_r5_clean: miss(clean_records, 5, Direction::ImageRetrieval)?,
        ir_r10_clean: miss(clean_records, 10, Direction::ImageRetrieval)?,
        ir_r1_adv: miss(adv_records, 1, Direction::ImageRetrieval)?,
        ir_r5_adv: miss(adv_records, 5, Direction::ImageRetrieval)?,
        ir_r10_adv: miss(adv_records, 10, Direction::ImageRetrieval)?,
        tr_asr_r1: attack_success_rate(
            clean_records,
            adv_records,
            Direction::TextRetrieval,
            1,
            base,
        )?,
        ir_asr_r1: attack_success_rate(
            clean_records,
            adv_records,
            Direction::ImageRetrieval,
            1,
            base,
        )?,
        asr_base: base,
    })
}

/// Full attack-run artifact. Replaying the same config, manifest, and seed
/// reproduces every field except `timestamp` byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub tool_version: String,
    pub seed: u64,
    pub timestamp: String,
    pub config_snapshot: AttackConfig,
    pub config_digest: String,
    pub backend: BackendDescriptor,
    pub pairs: Vec<PairSummary>,
    pub metrics: AggregateMetrics,
}

/// Retrieval-focused artifact: the per-pair rank table plus aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub seed: u64,
    pub timestamp: String,
    pub config_digest: String,
    pub backend: BackendDescriptor,
    pub records: Vec<EvalRecord>,
    pub metrics: AggregateMetrics,
}

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Assembles the attack artifact from per-pair results and both rank
/// record sets (index-aligned with the corpus).
pub fn build_run_artifact(
    cfg: &AttackConfig,
    backend: &dyn ModelBackend,
    results: &[AttackResult],
    clean_records: &[RankRecord],
    adv_records: &[RankRecord],
    asr_base: AsrBase,
    timestamp: String,
) -> Result<RunArtifact> {
    if results.len() != clean_records.len() || results.len() != adv_records.len() {
        return Err(CmiError::Validation(format!(
            "artifact inputs disagree on pair count: {} results, {} clean records, {} \
             adversarial records",
            results.len(),
            clean_records.len(),
            adv_records.len()
        )));
    }
    let pairs = results
        .iter()
        .zip(clean_records.iter().zip(adv_records.iter()))
        .map(|(result, (clean, adv))| PairSummary {
            pair_id: clean.pair_id.clone(),
            clean_sim: result.clean_sim,
            adv_sim: result.adv_sim,
            linf: result.linf,
            adv_captions: result.adv_captions.iter().map(Caption::text).collect(),
            words_changed: result.words_changed.clone(),
            tr_rank_clean: clean.tr_rank,
            tr_rank_adv: adv.tr_rank,
            ir_rank_clean: clean.ir_rank,
            ir_rank_adv: adv.ir_rank,
            trace: result
                .trace
                .iter()
                .map(|t| TraceScalars {
                    phase: t.phase,
                    iteration: t.iteration,
                    loss: t.loss,
                    grad_l1: t.grad_l1(),
                    momentum_l1: t.momentum_l1(),
                })
                .collect(),
        })
        .collect();
    Ok(RunArtifact {
        tool_version: TOOL_VERSION.to_string(),
        seed: cfg.seed,
        timestamp,
        config_snapshot: cfg.clone(),
        config_digest: config_digest(cfg)?,
        backend: backend.descriptor(),
        pairs,
        metrics: aggregate_metrics(clean_records, adv_records, asr_base)?,
    })
}

/// Persists an artifact as canonical JSON.
pub fn persist_run<T: Serialize>(artifact: &T, out_path: &Path) -> Result<()> {
    persist_json(artifact, out_path)
}

// ---- gradient audit ----------------------------------------------------------------

/// Central-difference audit of `image_loss_grad` at one point: returns the
/// maximum relative error between the analytic gradient and finite
/// differences with the given probe step.
pub fn fd_gradient_audit(
    backend: &dyn ModelBackend,
    spec: crate::attack_math::SetLossSpec,
    image: &ImageTensor,
    scales: &[f64],
    captions: &[Caption],
    step: f64,
) -> Result<f64> {
    let lg = backend.image_loss_grad(spec, image, scales, captions)?;
    let mut max_rel = 0.0f64;
    let n = image.data().len();
    for idx in 0..n {
        let probe = |delta: f64| -> Result<f64> {
            let mut data = image.data().clone();
            data.as_slice_mut().expect("image tensors are contiguous")[idx] += delta;
            Ok(backend.image_loss_grad(spec, &ImageTensor::new(data)?, scales, captions)?.loss)
        };
        let fd = (probe(step)? - probe(-step)?) / (2.0 * step);
        let analytic = lg.grad.as_slice().expect("gradients are contiguous")[idx];
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
