//! Vector-quantization codebook: buffered k-means initialization, cosine
//! argmax assignment and the two-term quantization loss.

use crate::error::{Error, Result};
use crate::numerics::{dot, euclidean_distance, norm, Matrix, Rng, ZERO_NORM};

/// A `T × D` sequence of frame features from one modality of one sample.
pub type FeatureSequence = Matrix;

/// Below this frame-to-center distance the unsquared loss routes no gradient.
pub const GRADIENT_GUARD: f64 = 1e-8;

/// `p` center vectors of width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centers: Matrix,
}

impl Codebook {
    pub fn new(centers: Matrix) -> Result<Self> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(Error::InvalidArgument(
                "codebook needs at least one center of nonzero width".into(),
            ));
        }
        if let Some(j) = centers.iter_rows().position(|c| norm(c) < ZERO_NORM) {
            return Err(Error::ZeroNorm { frame: Some(j) });
        }
        Ok(Self { centers })
    }

    pub fn size(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    /// Mutable access for optimizer updates. Norms are re-checked by
    /// [`quantize`] on every call.
    pub fn centers_mut(&mut self) -> &mut Matrix {
        &mut self.centers
    }

    pub fn into_centers(self) -> Matrix {
        self.centers
    }
}

/// Codebook index assigned to each frame of a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSequence(Vec<usize>);

impl IndexSequence {
    pub fn new(indices: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if let Some(&index) = indices.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::IndexOutOfRange {
                index,
                size: codebook_size,
            });
        }
        Ok(Self(indices))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Assigns every frame the index of its most cosine-similar center.
/// Exact ties go to the lowest index.
pub fn quantize(x: &FeatureSequence, cb: &Codebook) -> Result<IndexSequence> {
    if x.cols() != cb.dim() {
        return Err(Error::DimMismatch {
            expected: cb.dim(),
            found: x.cols(),
        });
    }
    let center_norms = cb
        .centers()
        .iter_rows()
        .enumerate()
        .map(|(j, c)| {
            let n = norm(c);
            if n < ZERO_NORM {
                Err(Error::ZeroNorm { frame: Some(j) })
            } else {
                Ok(n)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut indices = Vec::with_capacity(x.rows());
    for (i, frame) in x.iter_rows().enumerate() {
        let fnorm = norm(frame);
        if fnorm < ZERO_NORM {
            return Err(Error::ZeroNorm { frame: Some(i) });
        }
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, (center, cn)) in cb.centers().iter_rows().zip(&center_norms).enumerate() {
            let sim = (dot(frame, center) / (fnorm * cn)).clamp(-1.0, 1.0);
            if sim > best_sim {
                best_sim = sim;
                best = j;
            }
        }
        indices.push(best);
    }
    Ok(IndexSequence(indices))
}

/// How the frame-to-center distance enters the quantization loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// `‖x − P‖₂`
    #[default]
    L2,
    /// `‖x − P‖₂²`, the classic VQ-VAE form.
    Squared,
}

#[derive(Clone, Debug)]
pub struct QuantizationLoss {
    /// Sum of the codebook term and the commitment term, averaged over frames.
    pub loss: f64,
    /// The codebook term alone. Equal to the commitment term in value.
    pub codebook_term: f64,
    /// Gradient of the codebook term with respect to the centers.
    pub grad_codebook: Matrix,
}

/// Two-term VQ loss `‖sg(X) − P_c‖ + ‖X − sg(P_c)‖`, averaged over frames.
///
/// Only the first term sends gradient to the codebook. The inputs are fixed
/// features here, so the commitment term contributes to the value only.
pub fn quantization_loss(
    x: &FeatureSequence,
    cb: &Codebook,
    idx: &IndexSequence,
    norm_kind: LossNorm,
) -> Result<QuantizationLoss> {
    if x.cols() != cb.dim() {
        return Err(Error::DimMismatch {
            expected: cb.dim(),
            found: x.cols(),
        });
    }
    if idx.len() != x.rows() {
        return Err(Error::DimMismatch {
            expected: x.rows(),
            found: idx.len(),
        });
    }
    let t = x.rows().max(1) as f64;
    let mut grad = Matrix::zeros(cb.size(), cb.dim());
    let mut term = 0.0;
    for (frame, &c) in x.iter_rows().zip(idx.as_slice()) {
        if c >= cb.size() {
            return Err(Error::IndexOutOfRange {
                index: c,
                size: cb.size(),
            });
        }
        let center = cb.centers().row(c);
        let dist = euclidean_distance(frame, center);
        match norm_kind {
            LossNorm::L2 => {
                term += dist;
                if dist >= GRADIENT_GUARD {
                    for ((g, &pc), &xv) in grad.row_mut(c).iter_mut().zip(center).zip(frame) {
                        *g += (pc - xv) / dist / t;
                    }
                }
            }
            LossNorm::Squared => {
                term += dist * dist;
                for ((g, &pc), &xv) in grad.row_mut(c).iter_mut().zip(center).zip(frame) {
                    *g += 2.0 * (pc - xv) / t;
                }
            }
        }
    }
    let codebook_term = term / t;
    Ok(QuantizationLoss {
        loss: 2.0 * codebook_term,
        codebook_term,
        grad_codebook: grad,
    })
}

/// Frames cached for codebook initialization. Once full, new frames enter by
/// reservoir sampling so the contents stay a uniform sample of all frames seen.
#[derive(Clone, Debug)]
pub struct InitBuffer {
    dim: usize,
    capacity: usize,
    frames: Vec<f64>,
    seen: u64,
    rng: Rng,
}

impl InitBuffer {
    pub fn new(dim: usize, capacity: usize, seed: u64) -> Self {
        Self {
            dim,
            capacity,
            frames: Vec::with_capacity(capacity.min(1 << 20) * dim),
            seen: 0,
            rng: Rng::new(seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.capacity
    }

    /// Total frames offered so far, including those not retained.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn add(&mut self, x: &FeatureSequence) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: x.cols(),
            });
        }
        for frame in x.iter_rows() {
            self.seen += 1;
            if self.len() < self.capacity {
                self.frames.extend_from_slice(frame);
            } else if self.capacity > 0 {
                let slot = (self.rng.next_u64() % self.seen) as usize;
                if slot < self.capacity {
                    self.frames[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(frame);
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.dim, self.frames.clone())
            .expect("buffer frames are validated on entry")
    }
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Sum of squared distances from each point to its nearest center.
    pub inertia: f64,
    pub iterations: usize,
}

pub const DEFAULT_KMEANS_ITERS: usize = 50;

/// Builds the initial codebook from the buffered frames.
pub fn kmeans_init(buf: &InitBuffer, p: usize, max_iters: usize, rng: &mut Rng) -> Result<KMeansFit> {
    kmeans(&buf.frames(), p, max_iters, rng)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Empty clusters (and clusters whose mean collapses to the origin) are
/// reseeded with the point farthest from its currently assigned center.
pub fn kmeans(points: &Matrix, p: usize, max_iters: usize, rng: &mut Rng) -> Result<KMeansFit> {
    let n = points.rows();
    if p == 0 {
        return Err(Error::InvalidArgument("codebook size must be at least 1".into()));
    }
    if n < p {
        return Err(Error::TooFewPoints {
            required: p,
            available: n,
        });
    }
    let usable: Vec<usize> = (0..n).filter(|&i| norm(points.row(i)) >= ZERO_NORM).collect();
    if usable.len() < p {
        return Err(Error::TooFewPoints {
            required: p,
            available: usable.len(),
        });
    }

    let mut centers = seed_plus_plus(points, &usable, p, rng);
    let mut assign = vec![usize::MAX; n];
    let mut dist2 = vec![0.0; n];
    let mut iterations = 0;

    for iter in 0..max_iters {
        let changed = assign_nearest(points, &centers, &mut assign, &mut dist2);
        if changed == 0 && iter > 0 {
            break;
        }
        iterations = iter + 1;

        let d = points.cols();
        let mut sums = Matrix::zeros(p, d);
        let mut counts = vec![0usize; p];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..p {
            let count = counts[c];
            if count == 0 {
                continue;
            }
            let row = sums.row_mut(c);
            row.iter_mut().for_each(|v| *v /= count as f64);
            if norm(row) >= ZERO_NORM {
                centers.row_mut(c).copy_from_slice(row);
            } else {
                counts[c] = 0;
            }
        }
        for c in 0..p {
            if counts[c] > 0 {
                continue;
            }
            let far = usable
                .iter()
                .copied()
                .max_by(|&a, &b| dist2[a].total_cmp(&dist2[b]).then(b.cmp(&a)))
                .expect("usable is nonempty");
            centers.row_mut(c).copy_from_slice(points.row(far));
            dist2[far] = 0.0;
        }
    }

    assign_nearest(points, &centers, &mut assign, &mut dist2);
    let inertia = dist2.iter().sum();
    Ok(KMeansFit {
        codebook: Codebook::new(centers)?,
        inertia,
        iterations,
    })
}

fn seed_plus_plus(points: &Matrix, usable: &[usize], p: usize, rng: &mut Rng) -> Matrix {
    let d = points.cols();
    let mut centers = Matrix::zeros(p, d);
    let first = usable[rng.below(usable.len())];
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut closest: Vec<f64> = usable
        .iter()
        .map(|&i| squared_distance(points.row(i), points.row(first)))
        .collect();

    for c in 1..p {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.next_f64() * total;
            let mut chosen = closest.len() - 1;
            for (k, &w) in closest.iter().enumerate() {
                if target < w {
                    chosen = k;
                    break;
                }
                target -= w;
            }
            // Floating-point leftovers must not land on an existing center.
            while closest[chosen] == 0.0 && chosen > 0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.below(usable.len())
        };
        let idx = usable[pick];
        centers.row_mut(c).copy_from_slice(points.row(idx));
        for (k, &i) in usable.iter().enumerate() {
            let d2 = squared_distance(points.row(i), points.row(idx));
            if d2 < closest[k] {
                closest[k] = d2;
            }
        }
    }
    centers
}

fn assign_nearest(points: &Matrix, centers: &Matrix, assign: &mut [usize], dist2: &mut [f64]) -> usize {
    let mut changed = 0;
    for (i, point) in points.iter_rows().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter_rows().enumerate() {
            let d = squared_distance(point, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if assign[i] != best {
            assign[i] = best;
            changed += 1;
        }
        dist2[i] = best_d;
    }
    changed
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let cb = Codebook::new(m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(quantize(&m(&[&[1.0, 0.0]]), &cb).unwrap().as_slice(), &[0]);
        let x = m(&[&[0.9, 0.1], &[0.1, 0.9], &[0.8, 0.2]]);
        assert_eq!(quantize(&x, &cb).unwrap().as_slice(), &[0, 1, 0]);
        assert_eq!(quantize(&m(&[&[1.0, 1.0]]), &cb).unwrap().as_slice(), &[0]);
    }

    #[test]
    fn quantize_reports_zero_frame() {
        let cb = Codebook::new(m(&[&[1.0, 0.0]])).unwrap();
        let x = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(quantize(&x, &cb), Err(Error::ZeroNorm { frame: Some(1) })));
        assert!(matches!(
            quantize(&m(&[&[1.0, 0.0, 0.0]]), &cb),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn codebook_rejects_zero_center() {
        assert!(Codebook::new(m(&[&[1.0, 0.0], &[0.0, 0.0]])).is_err());
    }

    #[test]
    fn loss_examples() {
        let cb = Codebook::new(m(&[&[1.0, 0.0], &[0.5, 0.5]])).unwrap();
        let x = m(&[&[1.0, 0.0]]);
        let idx = IndexSequence::new(vec![0], 2).unwrap();
        let q = quantization_loss(&x, &cb, &idx, LossNorm::L2).unwrap();
        assert_eq!(q.loss, 0.0);
        assert_eq!(q.grad_codebook.max_abs(), 0.0);

        // The origin is not a valid center, so move the frame instead: the
        // frame-to-center offset is still a unit vector.
        let cb = Codebook::new(m(&[&[1.0, 1.0]])).unwrap();
        let x = m(&[&[2.0, 1.0]]);
        let idx = IndexSequence::new(vec![0], 1).unwrap();
        let q = quantization_loss(&x, &cb, &idx, LossNorm::L2).unwrap();
        assert!((q.loss - 2.0).abs() < 1e-15);
        assert_eq!(q.grad_codebook.row(0), &[-1.0, 0.0]);
    }

    #[test]
    fn loss_rejects_bad_indices() {
        let cb = Codebook::new(m(&[&[1.0, 0.0]])).unwrap();
        let x = m(&[&[1.0, 0.0]]);
        assert!(IndexSequence::new(vec![1], 1).is_err());
        let forged = IndexSequence(vec![3]);
        assert!(matches!(
            quantization_loss(&x, &cb, &forged, LossNorm::L2),
            Err(Error::IndexOutOfRange { index: 3, size: 1 })
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for norm_kind in [LossNorm::L2, LossNorm::Squared] {
            let mut rng = Rng::new(5);
            let x = Matrix::gaussian(6, 3, 1.0, &mut rng);
            let cb = Codebook::new(Matrix::gaussian(2, 3, 1.0, &mut rng)).unwrap();
            let idx = quantize(&x, &cb).unwrap();
            let q = quantization_loss(&x, &cb, &idx, norm_kind).unwrap();
            let f = |flat: &[f64]| {
                let cb = Codebook::new(Matrix::from_vec(2, 3, flat.to_vec()).unwrap()).unwrap();
                quantization_loss(&x, &cb, &idx, norm_kind).unwrap().codebook_term
            };
            let err = check_gradient(f, q.grad_codebook.as_slice(), cb.centers().as_slice(), 1e-4);
            assert!(err < 1e-4, "{norm_kind:?}: {err}");
        }
    }

    #[test]
    fn unused_center_rows_have_zero_gradient() {
        let cb = Codebook::new(m(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]])).unwrap();
        let x = m(&[&[2.0, 0.1], &[1.5, -0.2]]);
        let idx = quantize(&x, &cb).unwrap();
        let q = quantization_loss(&x, &cb, &idx, LossNorm::L2).unwrap();
        assert!(q.grad_codebook.row(1).iter().all(|&g| g == 0.0));
        assert!(q.grad_codebook.row(2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn buffer_respects_capacity() {
        let mut rng = Rng::new(1);
        let mut buf = InitBuffer::new(4, 100, 3);
        buf.add(&Matrix::gaussian(10, 4, 1.0, &mut rng)).unwrap();
        assert_eq!(buf.len(), 10);
        for _ in 0..20 {
            buf.add(&Matrix::gaussian(10, 4, 1.0, &mut rng)).unwrap();
        }
        assert_eq!(buf.len(), 100);
        assert_eq!(buf.seen(), 210);
        assert!(matches!(
            buf.add(&Matrix::zeros(1, 3)),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn buffer_is_deterministic() {
        let fill = || {
            let mut rng = Rng::new(8);
            let mut buf = InitBuffer::new(3, 50, 21);
            for _ in 0..30 {
                buf.add(&Matrix::gaussian(7, 3, 1.0, &mut rng)).unwrap();
            }
            buf.frames()
        };
        assert_eq!(fill(), fill());
    }

    #[test]
    fn reservoir_keeps_a_uniform_sample() {
        // Frame value encodes arrival order; a uniform sample over 0..10000
        // has mean near 5000.
        let mut buf = InitBuffer::new(1, 1000, 4);
        let all: Vec<f64> = (0..10_000).map(|i| i as f64 + 1.0).collect();
        buf.add(&Matrix::from_vec(10_000, 1, all).unwrap()).unwrap();
        let mean = buf.frames().mean_rows()[0];
        assert!((mean - 5000.5).abs() < 300.0, "{mean}");
    }

    #[test]
    fn kmeans_exact_cover() {
        let pts = m(&[&[1.0, 0.0], &[0.0, 2.0], &[-3.0, 1.0], &[2.0, 2.0]]);
        let fit = kmeans(&pts, 4, 50, &mut Rng::new(2)).unwrap();
        let mut got: Vec<Vec<f64>> = fit.codebook.centers().iter_rows().map(<[f64]>::to_vec).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f64>> = pts.iter_rows().map(<[f64]>::to_vec).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn kmeans_single_center_is_mean() {
        let mut rng = Rng::new(6);
        let pts = Matrix::gaussian(40, 3, 1.0, &mut rng);
        let mut shifted = pts.clone();
        shifted.as_mut_slice().iter_mut().for_each(|v| *v += 2.0);
        let fit = kmeans(&shifted, 1, 50, &mut rng).unwrap();
        for (c, mu) in fit.codebook.centers().row(0).iter().zip(shifted.mean_rows()) {
            assert!((c - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rng = Rng::new(13);
        let mut rows = Vec::new();
        for &(cx, cy) in &[(0.0, 0.0), (10.0, 10.0)] {
            for _ in 0..50 {
                rows.push(vec![cx + 0.1 * rng.normal(), cy + 0.1 * rng.normal()]);
            }
        }
        let pts = Matrix::from_rows(&rows).unwrap();
        let blob_means = [pts.slice_rows(0, 50).mean_rows(), pts.slice_rows(50, 100).mean_rows()];
        let fit = kmeans(&pts, 2, 50, &mut rng).unwrap();
        for mean in &blob_means {
            let nearest = fit
                .codebook
                .centers()
                .iter_rows()
                .map(|c| euclidean_distance(c, mean))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.2, "{nearest}");
        }
    }

    #[test]
    fn kmeans_needs_enough_points() {
        let pts = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            kmeans(&pts, 3, 10, &mut Rng::new(0)),
            Err(Error::TooFewPoints { required: 3, available: 2 })
        ));
    }

    #[test]
    fn kmeans_with_duplicates_still_returns_valid_centers() {
        let pts = m(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[5.0, 5.0]]);
        let fit = kmeans(&pts, 3, 50, &mut Rng::new(1)).unwrap();
        assert_eq!(fit.codebook.size(), 3);
        assert!(fit.codebook.centers().all_finite());
    }
}
