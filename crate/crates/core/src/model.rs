//! Classifier head, losses and the per-sample forward/backward pass.

use crate::aggregation::{compress_uniform, compress_with_indices, PoolStrategy, WindowSpec};
use crate::codebook::{quantization_loss, quantize, Codebook, FeatureSequence, LossNorm};
use crate::error::{Error, Result};
use crate::fusion::{fuse, fusion_backward, FusionStack, Mode};
use crate::numerics::{softmax_in_place, Matrix, Rng};

pub const NUM_CLASSES: usize = 4;

/// Linear head over the row-mean of the fused features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// `d × 4`
    pub w: Matrix,
    /// `1 × 4`
    pub b: Matrix,
}

impl ClassifierParams {
    pub fn init(input_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        Self {
            w: Matrix::uniform(input_dim, NUM_CLASSES, bound, rng),
            b: Matrix::zeros(1, NUM_CLASSES),
        }
    }

    pub fn new(w: Matrix, b: Matrix) -> Result<Self> {
        if w.cols() != NUM_CLASSES {
            return Err(Error::DimMismatch {
                expected: NUM_CLASSES,
                found: w.cols(),
            });
        }
        if b.shape() != (1, NUM_CLASSES) {
            return Err(Error::ShapeMismatch {
                expected: (1, NUM_CLASSES),
                found: b.shape(),
            });
        }
        Ok(Self { w, b })
    }

    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        let mut z = self.b.row(0).to_vec();
        for (k, &h) in pooled.iter().enumerate() {
            for (zj, wkj) in z.iter_mut().zip(self.w.row(k)) {
                *zj += h * wkj;
            }
        }
        z
    }
}

/// `−log softmax(logits)[label]` and its gradient `softmax(logits) − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(label < logits.len(), "label {label} out of range");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = logits.to_vec();
    softmax_in_place(&mut grad);
    grad[label] -= 1.0;
    (loss, grad)
}

/// Classification loss plus quantization loss, unit weights.
pub fn total_loss(ce: f64, quant: f64) -> f64 {
    ce + quant
}

/// How audio frames are shortened before fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Codebook-guided choice per window.
    #[default]
    Vq,
    /// Plain average pooling over every window.
    Avg,
    /// Plain max pooling over every window.
    Max,
}

/// Structural switches of the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub window: WindowSpec,
    pub pooling: PoolingMode,
    pub use_stage2: bool,
    pub loss_norm: LossNorm,
}

/// Every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Absent when pooling does not use a codebook.
    pub codebook: Option<Codebook>,
    pub fusion: FusionStack,
    pub classifier: ClassifierParams,
}

/// Gradients shaped like [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub codebook: Option<Matrix>,
    pub fusion: [Matrix; 6],
    pub classifier_w: Matrix,
    pub classifier_b: Matrix,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let [a, b, c, d, e, f] = params.fusion.projections();
        Self {
            codebook: params.codebook.as_ref().map(|cb| z(cb.centers())),
            fusion: [z(a), z(b), z(c), z(d), z(e), z(f)],
            classifier_w: z(&params.classifier.w),
            classifier_b: z(&params.classifier.b),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients, factor: f64) -> Result<()> {
        if let (Some(a), Some(b)) = (self.codebook.as_mut(), other.codebook.as_ref()) {
            a.add_scaled(b, factor)?;
        }
        for (a, b) in self.fusion.iter_mut().zip(&other.fusion) {
            a.add_scaled(b, factor)?;
        }
        self.classifier_w.add_scaled(&other.classifier_w, factor)?;
        self.classifier_b.add_scaled(&other.classifier_b, factor)?;
        Ok(())
    }

    /// Classifier-group gradients: six fusion projections, then head weights and bias.
    pub fn classifier_group(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.fusion.iter().collect();
        out.push(&self.classifier_w);
        out.push(&self.classifier_b);
        out
    }

    /// Flattened in the same order as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(cb) = &self.codebook {
            out.extend_from_slice(cb.as_slice());
        }
        for m in self.classifier_group() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }
}

impl ModelParams {
    /// Classifier-group tensors in the order used by [`Gradients::classifier_group`].
    pub fn classifier_group_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.fusion.projections_mut().into_iter().collect();
        out.push(&mut self.classifier.w);
        out.push(&mut self.classifier.b);
        out
    }

    pub fn classifier_group_shapes(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self.fusion.projections().iter().map(|m| m.shape()).collect();
        out.push(self.classifier.w.shape());
        out.push(self.classifier.b.shape());
        out
    }

    /// Codebook entries (if any) followed by the classifier group.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(cb) = &self.codebook {
            out.extend_from_slice(cb.centers().as_slice());
        }
        for m in self.fusion.projections() {
            out.extend_from_slice(m.as_slice());
        }
        out.extend_from_slice(self.classifier.w.as_slice());
        out.extend_from_slice(self.classifier.b.as_slice());
        out
    }

    /// Overwrites every tensor from a vector laid out like [`Self::to_flat`].
    /// Codebook norms are not re-validated here.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.to_flat().len();
        if flat.len() != total {
            return Err(Error::DimMismatch {
                expected: total,
                found: flat.len(),
            });
        }
        let mut offset = 0;
        let mut take = |m: &mut Matrix| {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        };
        if let Some(cb) = self.codebook.as_mut() {
            take(cb.centers_mut());
        }
        for m in self.classifier_group_mut() {
            take(m);
        }
        Ok(())
    }
}

/// Result of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub logits: Vec<f64>,
    pub ce: f64,
    pub quant: f64,
    pub total: f64,
}

impl SampleOutput {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

struct Compressed {
    features: Matrix,
    quant: Option<crate::codebook::QuantizationLoss>,
}

fn compress_audio(params: &ModelParams, arch: &Architecture, audio: &FeatureSequence) -> Result<Compressed> {
    match arch.pooling {
        PoolingMode::Vq => {
            let cb = params
                .codebook
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("codebook pooling requires a codebook".into()))?;
            let idx = quantize(audio, cb)?;
            let quant = quantization_loss(audio, cb, &idx, arch.loss_norm)?;
            let comp = compress_with_indices(audio, &idx, arch.window)?;
            Ok(Compressed {
                features: comp.features,
                quant: Some(quant),
            })
        }
        PoolingMode::Avg => Ok(Compressed {
            features: compress_uniform(audio, PoolStrategy::Avg, arch.window)?.features,
            quant: None,
        }),
        PoolingMode::Max => Ok(Compressed {
            features: compress_uniform(audio, PoolStrategy::Max, arch.window)?.features,
            quant: None,
        }),
    }
}

/// Forward pass for one sample, without gradients.
pub fn forward(params: &ModelParams, arch: &Architecture, audio: &FeatureSequence, midi: &FeatureSequence, label: usize) -> Result<SampleOutput> {
    let comp = compress_audio(params, arch, audio)?;
    let fused = fuse(&comp.features, midi, &params.fusion, Mode::Eval, arch.use_stage2)?;
    let logits = params.classifier.logits(&fused.features.mean_rows());
    let (ce, _) = cross_entropy(&logits, label);
    let quant = comp.quant.map_or(0.0, |q| q.loss);
    Ok(SampleOutput {
        logits,
        ce,
        quant,
        total: total_loss(ce, quant),
    })
}

/// Forward and backward pass for one sample.
///
/// The codebook gradient comes only from the codebook term of the
/// quantization loss; pooling itself passes no gradient.
pub fn forward_backward(
    params: &ModelParams,
    arch: &Architecture,
    audio: &FeatureSequence,
    midi: &FeatureSequence,
    label: usize,
) -> Result<(SampleOutput, Gradients)> {
    let comp = compress_audio(params, arch, audio)?;
    let fused = fuse(&comp.features, midi, &params.fusion, Mode::Train, arch.use_stage2)?;
    let pooled = fused.features.mean_rows();
    let logits = params.classifier.logits(&pooled);
    let (ce, dz) = cross_entropy(&logits, label);

    let mut grads = Gradients::zeros_like(params);
    for (k, &h) in pooled.iter().enumerate() {
        for (g, &d) in grads.classifier_w.row_mut(k).iter_mut().zip(&dz) {
            *g = h * d;
        }
    }
    grads.classifier_b.row_mut(0).copy_from_slice(&dz);

    let n = fused.features.rows() as f64;
    let mut d_pooled = vec![0.0; pooled.len()];
    for (k, dp) in d_pooled.iter_mut().enumerate() {
        *dp = params.classifier.w.row(k).iter().zip(&dz).map(|(w, d)| w * d).sum::<f64>() / n;
    }
    let mut d_features = Matrix::zeros(fused.features.rows(), fused.features.cols());
    for i in 0..d_features.rows() {
        d_features.row_mut(i).copy_from_slice(&d_pooled);
    }
    let fg = fusion_backward(&params.fusion, &fused, &d_features)?;
    grads.fusion = fg.projections(&params.fusion);

    let quant = match comp.quant {
        Some(q) => {
            grads.codebook = Some(q.grad_codebook);
            q.loss
        }
        None => 0.0,
    };
    let out = SampleOutput {
        logits,
        ce,
        quant,
        total: total_loss(ce, quant),
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite("sample loss".into()));
    }
    Ok((out, grads))
}

/// The scalar whose true gradient equals what [`forward_backward`] reports:
/// cross-entropy plus the codebook term of the quantization loss, with the
/// commitment term frozen at `commitment` and the codebook assignment and
/// pooled audio held fixed at `compressed_audio`.
///
/// Used to check the full composition against finite differences.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_objective(
    params: &ModelParams,
    arch: &Architecture,
    audio: &FeatureSequence,
    compressed_audio: &Matrix,
    indices: Option<&crate::codebook::IndexSequence>,
    midi: &FeatureSequence,
    label: usize,
    commitment: f64,
) -> Result<f64> {
    let fused = fuse(compressed_audio, midi, &params.fusion, Mode::Eval, arch.use_stage2)?;
    let logits = params.classifier.logits(&fused.features.mean_rows());
    let (ce, _) = cross_entropy(&logits, label);
    let codebook_term = match (params.codebook.as_ref(), indices) {
        (Some(cb), Some(idx)) => quantization_loss(audio, cb, idx, arch.loss_norm)?.codebook_term,
        _ => 0.0,
    };
    Ok(ce + codebook_term + commitment)
}
