//! Single-head co-attention and the two-stage audio/MIDI fusion built on it.
//!
//! Stage one lets the compressed audio frames query the MIDI frames. Stage
//! two reverses the roles: MIDI frames query the stage-one output. The
//! result has one row per MIDI frame.
//!
//! Gradients are derived by hand. With `S = QKᵀ/√d`, `A = softmax(S)` and
//! `O = AV`:
//!
//! ```text
//! dV = Aᵀ dO        dA = dO Vᵀ        dS = A ⊙ (dA − rowsum(dA ⊙ A))
//! dQ = dS K / √d    dK = dSᵀ Q / √d
//! ```

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Matrix, Rng};

/// Query, key and value projections of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionParams {
    /// Uniform init in `±1/√D_in` for each projection.
    pub fn init(query_dim: usize, kv_dim: usize, width: usize, rng: &mut Rng) -> Self {
        let qb = 1.0 / (query_dim as f64).sqrt();
        let kb = 1.0 / (kv_dim as f64).sqrt();
        Self {
            w_q: Matrix::uniform(query_dim, width, qb, rng),
            w_k: Matrix::uniform(kv_dim, width, kb, rng),
            w_v: Matrix::uniform(kv_dim, width, kb, rng),
        }
    }

    pub fn from_matrices(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        if w_k.rows() != w_v.rows() {
            return Err(Error::DimMismatch {
                expected: w_k.rows(),
                found: w_v.rows(),
            });
        }
        let d = w_q.cols();
        for w in [&w_k, &w_v] {
            if w.cols() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    found: w.cols(),
                });
            }
        }
        if d == 0 {
            return Err(Error::InvalidArgument("attention width must be at least 1".into()));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn width(&self) -> usize {
        self.w_q.cols()
    }

    pub fn query_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn kv_dim(&self) -> usize {
        self.w_k.rows()
    }
}

/// Whether a forward pass keeps the intermediates needed for backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub query_in: Matrix,
    pub kv_in: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Matrix,
    /// Row-stochastic `n_q × n_k` attention weights.
    pub weights: Matrix,
    pub cache: Option<AttentionCache>,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub query_in: Matrix,
    pub kv_in: Matrix,
}

/// `softmax((X_q W_q)(X_kv W_k)ᵀ / √d) · X_kv W_v`
pub fn co_attention(query_in: &Matrix, kv_in: &Matrix, params: &AttentionParams, mode: Mode) -> Result<AttentionOutput> {
    if query_in.rows() == 0 || kv_in.rows() == 0 {
        return Err(Error::InvalidArgument("co-attention needs at least one query and one key".into()));
    }
    if query_in.cols() != params.query_dim() {
        return Err(Error::DimMismatch {
            expected: params.query_dim(),
            found: query_in.cols(),
        });
    }
    if kv_in.cols() != params.kv_dim() {
        return Err(Error::DimMismatch {
            expected: params.kv_dim(),
            found: kv_in.cols(),
        });
    }
    let q = query_in.matmul(&params.w_q)?;
    let k = kv_in.matmul(&params.w_k)?;
    let v = kv_in.matmul(&params.w_v)?;
    let mut scores = q.matmul_t(&k)?;
    scores.scale(1.0 / (params.width() as f64).sqrt());
    let weights = softmax_rows(&scores);
    let output = weights.matmul(&v)?;
    let cache = (mode == Mode::Train).then(|| AttentionCache {
        query_in: query_in.clone(),
        kv_in: kv_in.clone(),
        q,
        k,
        v,
    });
    Ok(AttentionOutput { output, weights, cache })
}

pub fn co_attention_backward(params: &AttentionParams, fwd: &AttentionOutput, grad_out: &Matrix) -> Result<AttentionGrads> {
    let cache = fwd.cache.as_ref().ok_or(Error::MissingCache)?;
    if grad_out.shape() != fwd.output.shape() {
        return Err(Error::ShapeMismatch {
            expected: fwd.output.shape(),
            found: grad_out.shape(),
        });
    }
    let a = &fwd.weights;
    let scale = 1.0 / (params.width() as f64).sqrt();

    let d_v = a.t_matmul(grad_out)?;
    let d_a = grad_out.matmul_t(&cache.v)?;
    let mut d_s = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let ar = a.row(i);
        let dar = d_a.row(i);
        let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
        for (ds, (&aij, &daij)) in d_s.row_mut(i).iter_mut().zip(ar.iter().zip(dar)) {
            *ds = aij * (daij - inner) * scale;
        }
    }
    let d_q = d_s.matmul(&cache.k)?;
    let d_k = d_s.t_matmul(&cache.q)?;

    let w_q = cache.query_in.t_matmul(&d_q)?;
    let w_k = cache.kv_in.t_matmul(&d_k)?;
    let w_v = cache.kv_in.t_matmul(&d_v)?;
    let query_in = d_q.matmul_t(&params.w_q)?;
    let mut kv_in = d_k.matmul_t(&params.w_k)?;
    kv_in.add_scaled(&d_v.matmul_t(&params.w_v)?, 1.0)?;
    Ok(AttentionGrads {
        w_q,
        w_k,
        w_v,
        query_in,
        kv_in,
    })
}

/// Stage one attends from audio to MIDI, stage two from MIDI to the
/// stage-one output.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionStack {
    pub stage1: AttentionParams,
    pub stage2: AttentionParams,
}

impl FusionStack {
    pub fn init(audio_dim: usize, midi_dim: usize, width1: usize, width2: usize, rng: &mut Rng) -> Self {
        let stage1 = AttentionParams::init(audio_dim, midi_dim, width1, rng);
        let stage2 = AttentionParams::init(midi_dim, width1, width2, rng);
        Self { stage1, stage2 }
    }

    pub fn new(stage1: AttentionParams, stage2: AttentionParams) -> Result<Self> {
        let stack = Self { stage1, stage2 };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage2.kv_dim() != self.stage1.width() {
            return Err(Error::DimMismatch {
                expected: self.stage1.width(),
                found: self.stage2.kv_dim(),
            });
        }
        if self.stage2.query_dim() != self.stage1.kv_dim() {
            return Err(Error::DimMismatch {
                expected: self.stage1.kv_dim(),
                found: self.stage2.query_dim(),
            });
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.stage2.width()
    }

    /// The six projections in a fixed order: stage one q, k, v, then stage two.
    pub fn projections(&self) -> [&Matrix; 6] {
        [
            &self.stage1.w_q,
            &self.stage1.w_k,
            &self.stage1.w_v,
            &self.stage2.w_q,
            &self.stage2.w_k,
            &self.stage2.w_v,
        ]
    }

    pub fn projections_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.stage1.w_q,
            &mut self.stage1.w_k,
            &mut self.stage1.w_v,
            &mut self.stage2.w_q,
            &mut self.stage2.w_k,
            &mut self.stage2.w_v,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// `F_final`, one row per MIDI frame. Equal to `stage1.output` when
    /// stage two is bypassed.
    pub features: Matrix,
    pub stage1: AttentionOutput,
    pub stage2: Option<AttentionOutput>,
}

#[derive(Clone, Debug)]
pub struct FusionGrads {
    pub stage1: AttentionGrads,
    /// Absent when stage two was bypassed.
    pub stage2: Option<AttentionGrads>,
}

impl FusionGrads {
    /// Projection gradients in [`FusionStack::projections`] order. A bypassed
    /// stage two reports zero gradients shaped like `stack`.
    pub fn projections(&self, stack: &FusionStack) -> [Matrix; 6] {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let (q2, k2, v2) = match &self.stage2 {
            Some(g) => (g.w_q.clone(), g.w_k.clone(), g.w_v.clone()),
            None => (zeros(&stack.stage2.w_q), zeros(&stack.stage2.w_k), zeros(&stack.stage2.w_v)),
        };
        [
            self.stage1.w_q.clone(),
            self.stage1.w_k.clone(),
            self.stage1.w_v.clone(),
            q2,
            k2,
            v2,
        ]
    }
}

pub fn two_stage_fuse(audio: &Matrix, midi: &Matrix, stack: &FusionStack, mode: Mode) -> Result<FusionOutput> {
    fuse(audio, midi, stack, mode, true)
}

/// Like [`two_stage_fuse`], optionally skipping stage two so that the
/// stage-one output is returned unchanged.
pub fn fuse(audio: &Matrix, midi: &Matrix, stack: &FusionStack, mode: Mode, use_stage2: bool) -> Result<FusionOutput> {
    stack.validate()?;
    let stage1 = co_attention(audio, midi, &stack.stage1, mode)?;
    if !use_stage2 {
        return Ok(FusionOutput {
            features: stage1.output.clone(),
            stage1,
            stage2: None,
        });
    }
    let stage2 = co_attention(midi, &stage1.output, &stack.stage2, mode)?;
    Ok(FusionOutput {
        features: stage2.output.clone(),
        stage1,
        stage2: Some(stage2),
    })
}

/// Backpropagates `grad_out` (shaped like `fwd.features`) through both stages.
pub fn fusion_backward(stack: &FusionStack, fwd: &FusionOutput, grad_out: &Matrix) -> Result<FusionGrads> {
    match &fwd.stage2 {
        Some(stage2) => {
            let g2 = co_attention_backward(&stack.stage2, stage2, grad_out)?;
            let mut g1 = co_attention_backward(&stack.stage1, &fwd.stage1, &g2.kv_in)?;
            // MIDI feeds stage one as keys/values and stage two as queries.
            g1.kv_in.add_scaled(&g2.query_in, 1.0)?;
            Ok(FusionGrads {
                stage1: g1,
                stage2: Some(g2),
            })
        }
        None => Ok(FusionGrads {
            stage1: co_attention_backward(&stack.stage1, &fwd.stage1, grad_out)?,
            stage2: None,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(rng: &mut Rng, dq: usize, dkv: usize, d: usize) -> AttentionParams {
        AttentionParams {
            w_q: Matrix::gaussian(dq, d, 1.0, rng),
            w_k: Matrix::gaussian(dkv, d, 1.0, rng),
            w_v: Matrix::gaussian(dkv, d, 1.0, rng),
        }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut rng = Rng::new(1);
        let p = params(&mut rng, 3, 4, 2);
        let q = Matrix::gaussian(5, 3, 1.0, &mut rng);
        let kv = Matrix::gaussian(1, 4, 1.0, &mut rng);
        let out = co_attention(&q, &kv, &p, Mode::Eval).unwrap();
        let v = kv.matmul(&p.w_v).unwrap();
        for r in out.output.iter_rows() {
            for (a, b) in r.iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tied_scores_average_the_values() {
        let mut rng = Rng::new(2);
        let mut p = params(&mut rng, 2, 2, 2);
        // The key projection ignores the second input coordinate, so keys
        // differing only there score identically.
        p.w_k = Matrix::from_rows(&[[1.0, 0.5], [0.0, 0.0]]).unwrap();
        let kv = Matrix::from_rows(&[[1.0, 2.0], [1.0, -3.0]]).unwrap();
        let q = Matrix::from_rows(&[[0.4, 0.7]]).unwrap();
        let out = co_attention(&q, &kv, &p, Mode::Eval).unwrap();
        let v = kv.matmul(&p.w_v).unwrap();
        for j in 0..2 {
            let mean = 0.5 * (v[(0, j)] + v[(1, j)]);
            assert!((out.output[(0, j)] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_checks() {
        let mut rng = Rng::new(3);
        let p = params(&mut rng, 3, 4, 2);
        let q = Matrix::gaussian(2, 3, 1.0, &mut rng);
        let bad = Matrix::gaussian(2, 5, 1.0, &mut rng);
        assert!(matches!(co_attention(&q, &bad, &p, Mode::Eval), Err(Error::DimMismatch { .. })));
        assert!(matches!(co_attention(&bad, &q, &p, Mode::Eval), Err(Error::DimMismatch { .. })));
        let s1 = params(&mut rng, 3, 4, 2);
        let s2 = params(&mut rng, 4, 3, 2);
        assert!(FusionStack::new(s1, s2).is_err());
    }

    #[test]
    fn single_token_chain() {
        let mut rng = Rng::new(4);
        let stack = FusionStack::init(3, 4, 5, 2, &mut rng);
        let audio = Matrix::gaussian(1, 3, 1.0, &mut rng);
        let midi = Matrix::gaussian(1, 4, 1.0, &mut rng);
        let out = two_stage_fuse(&audio, &midi, &stack, Mode::Eval).unwrap();
        let f1 = midi.matmul(&stack.stage1.w_v).unwrap();
        let want = f1.matmul(&stack.stage2.w_v).unwrap();
        assert_eq!(out.features.shape(), (1, 2));
        for (a, b) in out.features.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_follows_midi_length() {
        let mut rng = Rng::new(5);
        let stack = FusionStack::init(6, 4, 8, 3, &mut rng);
        let audio = Matrix::gaussian(20, 6, 1.0, &mut rng);
        let midi = Matrix::gaussian(7, 4, 1.0, &mut rng);
        let out = two_stage_fuse(&audio, &midi, &stack, Mode::Eval).unwrap();
        assert_eq!(out.features.shape(), (7, 3));
    }

    #[test]
    fn zero_value_projection_annihilates() {
        let mut rng = Rng::new(6);
        let mut stack = FusionStack::init(3, 4, 5, 2, &mut rng);
        stack.stage1.w_v.fill(0.0);
        let audio = Matrix::gaussian(6, 3, 1.0, &mut rng);
        let midi = Matrix::gaussian(9, 4, 1.0, &mut rng);
        let out = two_stage_fuse(&audio, &midi, &stack, Mode::Eval).unwrap();
        assert_eq!(out.features.max_abs(), 0.0);
    }

    #[test]
    fn backward_needs_cache() {
        let mut rng = Rng::new(7);
        let stack = FusionStack::init(3, 4, 5, 2, &mut rng);
        let audio = Matrix::gaussian(2, 3, 1.0, &mut rng);
        let midi = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let out = two_stage_fuse(&audio, &midi, &stack, Mode::Eval).unwrap();
        let g = Matrix::zeros(3, 2);
        assert!(matches!(fusion_backward(&stack, &out, &g), Err(Error::MissingCache)));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(8);
        let stack = FusionStack::init(3, 4, 5, 2, &mut rng);
        let audio = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let midi = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let out = two_stage_fuse(&audio, &midi, &stack, Mode::Train).unwrap();
        let grads = fusion_backward(&stack, &out, &Matrix::zeros(3, 2)).unwrap();
        for g in grads.projections(&stack) {
            assert_eq!(g.max_abs(), 0.0);
        }
        assert_eq!(grads.stage1.query_in.max_abs(), 0.0);
        assert_eq!(grads.stage1.kv_in.max_abs(), 0.0);
    }

    #[test]
    fn single_key_gradient_is_linear_chain() {
        // With one key the attention weights are constant, so for loss =
        // sum(O) the value projection gets n_q · kvᵀ · 1 and the query/key
        // projections get nothing.
        let mut rng = Rng::new(9);
        let p = params(&mut rng, 3, 4, 2);
        let q = Matrix::gaussian(5, 3, 1.0, &mut rng);
        let kv = Matrix::gaussian(1, 4, 1.0, &mut rng);
        let out = co_attention(&q, &kv, &p, Mode::Train).unwrap();
        let mut ones = Matrix::zeros(5, 2);
        ones.fill(1.0);
        let g = co_attention_backward(&p, &out, &ones).unwrap();
        assert!(g.w_q.max_abs() < 1e-12);
        assert!(g.w_k.max_abs() < 1e-12);
        for i in 0..4 {
            for j in 0..2 {
                assert!((g.w_v[(i, j)] - 5.0 * kv[(0, i)]).abs() < 1e-12);
            }
        }
    }
}
