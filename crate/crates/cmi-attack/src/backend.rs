//! Model backends: the encoder interface the attack drives, plus a small
//! deterministic dual encoder used for tests and self-contained runs.
//!
//! A backend exposes image and text encoders into a shared embedding space.
//! Backends that can differentiate the image encoder additionally expose
//! `image_loss_grad`, which evaluates a set loss over scaled copies of a
//! base image and returns the analytic gradient with respect to the base
//! pixels. Scaling happens inside the backend call chain: each scaled copy
//! is resized back to the encoder's fixed input resolution before encoding,
//! and gradients flow through both resizes.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack_math::{
    bilinear_resize, bilinear_resize_vjp, scaled_side, set_loss, validate_scales, SetLossSpec,
};
use crate::embedding_guidance::{Caption, WordEmbeddingTable};
use crate::error::{CmiError, Result};

/// Image in (channels, height, width) layout with finite f64 entries.
/// Attack code keeps pixel values in [0, 1]; the type itself only enforces
/// finiteness so that numerical probes near the range boundary stay legal.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(CmiError::InvalidInput("image tensor has no elements".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CmiError::InvalidInput("image tensor has non-finite entries".into()));
        }
        Ok(ImageTensor { data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Largest absolute per-pixel difference from `other`.
    pub fn linf_distance(&self, other: &ImageTensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(CmiError::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Dense embedding with finite f64 entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Array1<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CmiError::InvalidInput("embedding vector is empty".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CmiError::InvalidInput("embedding vector has non-finite entries".into()));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }
}

/// Identity and capability summary of a backend, recorded in run artifacts
/// so a replay can verify it is talking to the same model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    /// (channels, height, width) accepted by `encode_image`.
    pub image_shape: (usize, usize, usize),
    pub embedding_dim: usize,
    /// Tokens the text encoder resolves, sorted. Empty only for
    /// image-only backends.
    pub vocabulary: Vec<String>,
    pub deterministic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Loss value and its gradient with respect to the base image pixels.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array3<f64>,
}

/// Dual-encoder interface the attack drives.
pub trait ModelBackend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Embedding of an image at the backend's native resolution.
    fn encode_image(&self, image: &ImageTensor) -> Result<EmbeddingVector>;

    /// Embedding of a scaled copy of `image`: the image is bilinearly
    /// resized by `scale`, then resized back to the native resolution and
    /// encoded. Scale 1.0 is exactly `encode_image`.
    fn encode_image_at_scale(&self, image: &ImageTensor, scale: f64) -> Result<EmbeddingVector>;

    fn encode_text(&self, caption: &Caption) -> Result<EmbeddingVector>;

    /// Whether `image_loss_grad` is available. Backends without it can
    /// still be attacked on the text side and evaluated.
    fn supports_image_gradient(&self) -> bool {
        false
    }

    /// Set loss over the scaled copies of `image` against `captions`,
    /// with its analytic gradient with respect to the base pixels.
    ///
    /// The image embedding list holds one entry per scale, in order, and
    /// the reduction over (caption, image) pairs is chosen by `spec` with
    /// the same pairing rules as `set_loss`.
    fn image_loss_grad(
        &self,
        _spec: SetLossSpec,
        _image: &ImageTensor,
        _scales: &[f64],
        _captions: &[Caption],
    ) -> Result<LossGrad> {
        Err(CmiError::Capability(format!(
            "backend '{}' does not expose image gradients",
            self.descriptor().name
        )))
    }
}

fn l2_normalize(u: Array1<f64>, what: &str) -> Result<EmbeddingVector> {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(CmiError::DegenerateEmbedding(format!("{what} has zero norm")));
    }
    EmbeddingVector::new(u.mapv(|v| v / norm))
}

/// Deterministic linear dual encoder for tests and self-contained runs.
///
/// Images embed as `normalize(W_img . flatten(x))` and captions as
/// `normalize(W_txt . mean(word vectors))`, with both weight matrices drawn
/// once from a seeded generator. Word vectors come from the embedding
/// table; out-of-vocabulary words map to the zero vector, so they dilute
/// the mean without steering it.
pub struct ToyAlignedBackend {
    seed: u64,
    image_shape: (usize, usize, usize),
    w_img: Array2<f64>,
    w_txt: Array2<f64>,
    table: Arc<WordEmbeddingTable>,
}

impl ToyAlignedBackend {
    pub fn new(
        seed: u64,
        image_shape: (usize, usize, usize),
        embedding_dim: usize,
        table: Arc<WordEmbeddingTable>,
    ) -> Result<Self> {
        let (c, h, w) = image_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(CmiError::InvalidInput(format!(
                "image shape dimensions must be positive, got {image_shape:?}"
            )));
        }
        if embedding_dim < 2 {
            return Err(CmiError::InvalidInput(format!(
                "embedding dimension must be at least 2, got {embedding_dim}"
            )));
        }
        let n_pixels = c * h * w;
        let word_dim = table.dim();
        let (w_img, w_txt) = projection_weights(seed, embedding_dim, n_pixels, word_dim);
        Ok(ToyAlignedBackend { seed, image_shape, w_img, w_txt, table })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding_dim(&self) -> usize {
        self.w_img.nrows()
    }

    /// Image projection matrix, (embedding_dim, n_pixels). Exposed so
    /// external checks can recompute encodings from first principles.
    pub fn image_weights(&self) -> &Array2<f64> {
        &self.w_img
    }

    /// Text projection matrix, (embedding_dim, word_dim).
    pub fn text_weights(&self) -> &Array2<f64> {
        &self.w_txt
    }

    pub fn table(&self) -> &WordEmbeddingTable {
        &self.table
    }

    fn check_shape(&self, image: &ImageTensor) -> Result<()> {
        if image.shape() != self.image_shape {
            return Err(CmiError::ShapeMismatch {
                expected: format!("{:?}", self.image_shape),
                got: format!("{:?}", image.shape()),
            });
        }
        Ok(())
    }

    fn flatten(image: &ImageTensor) -> Array1<f64> {
        Array1::from_iter(image.data().iter().copied())
    }

    /// Mean word vector of a caption. Unknown words contribute the zero
    /// vector but still count toward the mean's denominator.
    fn caption_mean(&self, caption: &Caption) -> Result<Array1<f64>> {
        let words = caption.words();
        if words.is_empty() {
            return Err(CmiError::InvalidInput("cannot encode an empty caption".into()));
        }
        let mut mean = Array1::<f64>::zeros(self.table.dim());
        for word in words {
            if let Some(vec) = self.table.lookup(word) {
                mean += vec;
            }
        }
        Ok(mean / words.len() as f64)
    }

    /// Scaled copy of the base image resized back to native resolution.
    /// Both hops are linear, which keeps the whole encode chain smooth.
    fn rescaled_to_native(&self, image: &ImageTensor, scale: f64) -> Array3<f64> {
        let (_, h, w) = self.image_shape;
        if scale == 1.0 {
            return image.data().clone();
        }
        let member = bilinear_resize(image.data(), scaled_side(h, scale), scaled_side(w, scale));
        bilinear_resize(&member, h, w)
    }
}

/// The toy backend's projection matrices as a pure function of the seed
/// and the layer shapes: one generator stream, image weights drawn first,
/// entries i.i.d. normal with std 1/sqrt(fan-in). Exposed so corpus
/// generation can build word clusters aligned with the same weights a
/// later `ToyAlignedBackend::new(seed, ..)` will use.
pub fn projection_weights(
    seed: u64,
    embedding_dim: usize,
    n_pixels: usize,
    word_dim: usize,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_img = draw_matrix(&mut rng, embedding_dim, n_pixels);
    let w_txt = draw_matrix(&mut rng, embedding_dim, word_dim);
    (w_img, w_txt)
}

fn draw_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("std is finite and positive");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

impl ModelBackend for ToyAlignedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "toy-aligned".into(),
            image_shape: self.image_shape,
            embedding_dim: self.embedding_dim(),
            vocabulary: self.table.tokens().map(String::from).collect(),
            deterministic: true,
            seed: Some(self.seed),
        }
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<EmbeddingVector> {
        self.check_shape(image)?;
        l2_normalize(self.w_img.dot(&Self::flatten(image)), "image embedding")
    }

    fn encode_image_at_scale(&self, image: &ImageTensor, scale: f64) -> Result<EmbeddingVector> {
        self.check_shape(image)?;
        validate_scales(&[scale])?;
        if scale == 1.0 {
            return self.encode_image(image);
        }
        let native = ImageTensor::new(self.rescaled_to_native(image, scale))?;
        l2_normalize(self.w_img.dot(&Self::flatten(&native)), "image embedding")
    }

    fn encode_text(&self, caption: &Caption) -> Result<EmbeddingVector> {
        let mean = self.caption_mean(caption)?;
        if mean.iter().all(|v| *v == 0.0) {
            return Err(CmiError::DegenerateEmbedding(
                "caption reduces to the zero vector (all words unknown)".into(),
            ));
        }
        l2_normalize(self.w_txt.dot(&mean), "text embedding")
    }

    fn supports_image_gradient(&self) -> bool {
        true
    }

    fn image_loss_grad(
        &self,
        spec: SetLossSpec,
        image: &ImageTensor,
        scales: &[f64],
        captions: &[Caption],
    ) -> Result<LossGrad> {
        self.check_shape(image)?;
        validate_scales(scales)?;
        if captions.is_empty() {
            return Err(CmiError::InvalidInput("image_loss_grad needs at least one caption".into()));
        }

        let text_embs: Vec<EmbeddingVector> =
            captions.iter().map(|c| self.encode_text(c)).collect::<Result<_>>()?;

        // Forward pass per scale, keeping the pre-normalization vector and
        // its norm for the backward pass.
        let (channels, h, w) = self.image_shape;
        let mut natives = Vec::with_capacity(scales.len());
        let mut raw_norms = Vec::with_capacity(scales.len());
        let mut image_embs = Vec::with_capacity(scales.len());
        for &s in scales {
            let native = self.rescaled_to_native(image, s);
            let u = self.w_img.dot(&Array1::from_iter(native.iter().copied()));
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(CmiError::DegenerateEmbedding(format!(
                    "image embedding at scale {s} has zero norm"
                )));
            }
            image_embs.push(EmbeddingVector::new(u.mapv(|v| v / norm))?);
            raw_norms.push(norm);
            natives.push(native);
        }

        let loss = set_loss(spec, &text_embs, &image_embs)?;

        // d loss / d cos(t_j, e_s) for each participating pair.
        let pair_weights: Vec<(usize, usize, f64)> = match spec {
            SetLossSpec::PairNegcos => vec![(0, 0, -1.0)],
            SetLossSpec::PairedSum => (0..captions.len()).map(|j| (j, j, -1.0)).collect(),
            SetLossSpec::CrossProductMean => {
                let weight = -1.0 / (captions.len() * scales.len()) as f64;
                (0..captions.len())
                    .flat_map(|j| (0..scales.len()).map(move |s| (j, s, weight)))
                    .collect()
            }
        };

        let mut grad = Array3::<f64>::zeros((channels, h, w));
        for (s_idx, &scale) in scales.iter().enumerate() {
            // dl/du for the unnormalized embedding u at this scale:
            // d cos(t, u/|u|)/du = (t_hat - (t_hat . u_hat) u_hat) / |u|.
            let u_hat = image_embs[s_idx].values();
            let norm = raw_norms[s_idx];
            let mut dl_du = Array1::<f64>::zeros(self.embedding_dim());
            let mut touched = false;
            for &(j, s, weight) in &pair_weights {
                if s != s_idx {
                    continue;
                }
                touched = true;
                let t_hat = text_embs[j].values();
                let t_dot_u = t_hat.dot(u_hat);
                for d in 0..dl_du.len() {
                    dl_du[d] += weight * (t_hat[d] - t_dot_u * u_hat[d]) / norm;
                }
            }
            if !touched {
                continue;
            }
            // Chain through the projection and both resizes.
            let d_native = self.w_img.t().dot(&dl_du);
            let d_native = Array3::from_shape_vec((channels, h, w), d_native.to_vec())
                .expect("projection gradient matches the native image shape");
            let contribution = if scale == 1.0 {
                d_native
            } else {
                let (mh, mw) = (scaled_side(h, scale), scaled_side(w, scale));
                let d_member = bilinear_resize_vjp(&d_native, mh, mw);
                bilinear_resize_vjp(&d_member, h, w)
            };
            grad += &contribution;
        }

        Ok(LossGrad { loss, grad })
    }
}
