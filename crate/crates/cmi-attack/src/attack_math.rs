//! Pure numerical kernels shared by both attack phases.
//!
//! Everything here is a deterministic function of its inputs: cosine losses
//! over embedding pairs and sets, L1 gradient normalization, the momentum
//! recurrence, the projected sign step, and differentiable bilinear scaling.
//! No I/O, no RNG, no shared state.

use ndarray::{Array, Array3, Dimension};
use serde::{Deserialize, Serialize};

use crate::backend::{EmbeddingVector, ImageTensor};
use crate::error::{CmiError, Result};

/// Reduction applied when a loss is taken over caption and image embedding
/// lists.
///
/// `PairNegcos` is the single-pair loss and requires singleton lists.
/// `PairedSum` sums the pair loss over index-aligned lists (the text-phase
/// accumulation). `CrossProductMean` averages the pair loss over every
/// caption x image combination (the image-phase set loss).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetLossSpec {
    PairNegcos,
    PairedSum,
    CrossProductMean,
}

/// Cosine similarity, clamped to [-1, 1] against rounding drift.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CmiError::ShapeMismatch {
            expected: format!("embedding of length {}", a.len()),
            got: format!("embedding of length {}", b.len()),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.values().iter().zip(b.values().iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(CmiError::DegenerateEmbedding(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Pair loss between a text and an image embedding: the negative cosine.
/// Larger values mean greater image-text separation.
pub fn pair_loss(text_emb: &EmbeddingVector, image_emb: &EmbeddingVector) -> Result<f64> {
    Ok(-cosine_similarity(text_emb, image_emb)?)
}

/// Loss over embedding lists under the reduction named by `spec`.
pub fn set_loss(
    spec: SetLossSpec,
    caption_embs: &[EmbeddingVector],
    image_embs: &[EmbeddingVector],
) -> Result<f64> {
    if caption_embs.is_empty() || image_embs.is_empty() {
        return Err(CmiError::InvalidInput("set_loss over an empty embedding list".into()));
    }
    match spec {
        SetLossSpec::PairNegcos => {
            if caption_embs.len() != 1 || image_embs.len() != 1 {
                return Err(CmiError::Pairing(format!(
                    "pair_negcos needs singleton lists, got {} captions and {} images",
                    caption_embs.len(),
                    image_embs.len()
                )));
            }
            pair_loss(&caption_embs[0], &image_embs[0])
        }
        SetLossSpec::PairedSum => {
            if caption_embs.len() != image_embs.len() {
                return Err(CmiError::Pairing(format!(
                    "paired_sum needs equal list lengths, got {} captions and {} images",
                    caption_embs.len(),
                    image_embs.len()
                )));
            }
            let mut total = 0.0;
            for (t, i) in caption_embs.iter().zip(image_embs.iter()) {
                total += pair_loss(t, i)?;
            }
            Ok(total)
        }
        SetLossSpec::CrossProductMean => {
            let mut total = 0.0;
            for t in caption_embs {
                for i in image_embs {
                    total += pair_loss(t, i)?;
                }
            }
            Ok(total / (caption_embs.len() * image_embs.len()) as f64)
        }
    }
}

/// Gradient divided by its L1 norm; the zero gradient passes through
/// unchanged rather than dividing by zero. L1 matches the MI-FGSM
/// convention the momentum recurrence mirrors.
pub fn normalize_gradient<D: Dimension>(grad: &Array<f64, D>) -> Result<Array<f64, D>> {
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(CmiError::InvalidInput("gradient has non-finite entries".into()));
    }
    let l1: f64 = grad.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        Ok(Array::zeros(grad.raw_dim()))
    } else {
        Ok(grad.mapv(|v| v / l1))
    }
}

/// Accumulated, normalized gradient buffer with its decay coefficient.
///
/// Value-semantic: `momentum_update` returns a fresh state and leaves the
/// old one untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState<D: Dimension> {
    g: Array<f64, D>,
    lambda: f64,
    step_count: usize,
}

impl<D: Dimension> MomentumState<D> {
    /// Fresh state with `g = 0` and a zero step count.
    pub fn zeros(shape: D, lambda: f64) -> Result<Self> {
        Self::seeded(Array::zeros(shape), lambda)
    }

    /// State starting from an existing accumulation buffer (step count 0).
    pub fn seeded(g: Array<f64, D>, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(CmiError::InvalidInput(format!(
                "momentum lambda must be finite and >= 0, got {lambda}"
            )));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(CmiError::InvalidInput("momentum buffer has non-finite entries".into()));
        }
        Ok(MomentumState { g, lambda, step_count: 0 })
    }

    pub fn g(&self) -> &Array<f64, D> {
        &self.g
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }
}

/// One momentum step: `g' = lambda * g + normalized_grad`.
pub fn momentum_update<D: Dimension>(
    state: &MomentumState<D>,
    normalized_grad: &Array<f64, D>,
) -> Result<MomentumState<D>> {
    if state.g.raw_dim() != normalized_grad.raw_dim() {
        return Err(CmiError::ShapeMismatch {
            expected: format!("{:?}", state.g.shape()),
            got: format!("{:?}", normalized_grad.shape()),
        });
    }
    if !normalized_grad.iter().all(|v| v.is_finite()) {
        return Err(CmiError::InvalidInput("gradient has non-finite entries".into()));
    }
    let lambda = state.lambda;
    let mut g = state.g.mapv(|v| v * lambda);
    g += normalized_grad;
    Ok(MomentumState { g, lambda, step_count: state.step_count + 1 })
}

/// Signed step followed by projection: move `adv` by `alpha * sign(g)`,
/// clamp into the L-infinity ball of radius `eps` around `clean`, then into
/// the valid pixel range [0, 1]. `sign(0) = 0`, so zero-gradient pixels do
/// not move.
pub fn sign_step_project(
    adv: &ImageTensor,
    clean: &ImageTensor,
    g: &Array3<f64>,
    alpha: f64,
    eps: f64,
) -> Result<ImageTensor> {
    if adv.shape() != clean.shape() || adv.data().raw_dim() != g.raw_dim() {
        return Err(CmiError::ShapeMismatch {
            expected: format!("{:?}", adv.shape()),
            got: format!("clean {:?}, gradient {:?}", clean.shape(), g.shape()),
        });
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(CmiError::InvalidInput(format!("alpha must be finite and > 0, got {alpha}")));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(CmiError::InvalidInput(format!("eps must be finite and >= 0, got {eps}")));
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(CmiError::InvalidInput("gradient has non-finite entries".into()));
    }
    let mut out = adv.data().clone();
    ndarray::Zip::from(&mut out).and(clean.data()).and(g).for_each(|x, &c, &gv| {
        let step = if gv > 0.0 {
            alpha
        } else if gv < 0.0 {
            -alpha
        } else {
            0.0
        };
        *x = (*x + step).clamp(c - eps, c + eps).clamp(0.0, 1.0);
    });
    ImageTensor::new(out)
}

/// Output side length for a scale factor: `floor(side * scale + 0.5)`,
/// never below 1.
pub fn scaled_side(side: usize, scale: f64) -> usize {
    ((side as f64 * scale + 0.5).floor() as usize).max(1)
}

/// Per-output-index source interpolation stencil for one axis: the two
/// source indices and the fractional weight of the upper one. Half-pixel
/// centers; edge-clamped cells collapse to an exact copy (fraction 0).
fn axis_stencil(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of a (channels, height, width) array to the given output
/// size. Linear in the pixel values; a size-preserving call returns a
/// bit-identical copy.
pub fn bilinear_resize(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    if out_h == h && out_w == w {
        return src.clone();
    }
    let ys = axis_stencil(out_h, h);
    let xs = axis_stencil(out_w, w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = (1.0 - fx) * src[[ch, y0, x0]] + fx * src[[ch, y0, x1]];
                let bot = (1.0 - fx) * src[[ch, y1, x0]] + fx * src[[ch, y1, x1]];
                out[[ch, oy, ox]] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

/// Vector-Jacobian product of `bilinear_resize`: scatters an upstream
/// gradient over the output back onto a source of size
/// (channels, src_h, src_w). Exact transpose of the forward stencil.
pub fn bilinear_resize_vjp(upstream: &Array3<f64>, src_h: usize, src_w: usize) -> Array3<f64> {
    let (c, out_h, out_w) = upstream.dim();
    if out_h == src_h && out_w == src_w {
        return upstream.clone();
    }
    let ys = axis_stencil(out_h, src_h);
    let xs = axis_stencil(out_w, src_w);
    let mut grad = Array3::zeros((c, src_h, src_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let up = upstream[[ch, oy, ox]];
                grad[[ch, y0, x0]] += (1.0 - fy) * (1.0 - fx) * up;
                grad[[ch, y0, x1]] += (1.0 - fy) * fx * up;
                grad[[ch, y1, x0]] += fy * (1.0 - fx) * up;
                grad[[ch, y1, x1]] += fy * fx * up;
            }
        }
    }
    grad
}

/// A base image together with its bilinearly scaled variants, one per scale
/// factor, in the order the scales were given.
#[derive(Debug, Clone)]
pub struct ScaledImageSet {
    base: ImageTensor,
    scales: Vec<f64>,
    members: Vec<ImageTensor>,
}

impl ScaledImageSet {
    pub fn base(&self) -> &ImageTensor {
        &self.base
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn members(&self) -> &[ImageTensor] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Builds the multi-scale image set. The member for scale 1.0 is a
/// bit-identical copy of the base.
pub fn multi_scale_set(base: &ImageTensor, scales: &[f64]) -> Result<ScaledImageSet> {
    validate_scales(scales)?;
    let (_, h, w) = base.shape();
    let mut members = Vec::with_capacity(scales.len());
    for &s in scales {
        if s == 1.0 {
            members.push(base.clone());
            continue;
        }
        let resized = bilinear_resize(base.data(), scaled_side(h, s), scaled_side(w, s));
        // Interpolation of in-range values can overshoot [0,1] by an ulp.
        members.push(ImageTensor::new(resized.mapv(|v| v.clamp(0.0, 1.0)))?);
    }
    Ok(ScaledImageSet { base: base.clone(), scales: scales.to_vec(), members })
}

/// Shared precondition on scale lists: non-empty, finite, strictly positive.
pub fn validate_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(CmiError::InvalidInput("scale list is empty".into()));
    }
    for &s in scales {
        if !s.is_finite() || s <= 0.0 {
            return Err(CmiError::InvalidInput(format!("scale must be finite and > 0, got {s}")));
        }
    }
    Ok(())
}
