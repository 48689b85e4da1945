//! Codebook-guided local aggregation.
//!
//! A window slides over the frame sequence. The number of distinct codebook
//! indices inside each window picks the pooling operator:
//!
//! | distinct indices | operator                    |
//! |------------------|-----------------------------|
//! | 1                | average pooling             |
//! | 2 or 3           | frequency-weighted average  |
//! | more than 3      | coordinate-wise max         |
//!
//! With the default window (size 5, stride 3) the output has `ceil(T / 3)`
//! rows. Compression is forward-only; no gradient flows through it.

use std::fmt;
use std::str::FromStr;

use crate::codebook::{quantize, Codebook, FeatureSequence, IndexSequence};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub size: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        let spec = Self { size, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.size {
            return Err(Error::InvalidArgument(format!(
                "window needs 1 <= stride <= size, got size {} stride {}",
                self.size, self.stride
            )));
        }
        Ok(())
    }

    /// Number of windows over a sequence of `t` frames.
    pub fn output_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { size: 5, stride: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoolStrategy {
    Avg,
    WeightedAvg,
    Max,
}

impl PoolStrategy {
    pub const ALL: [PoolStrategy; 3] = [PoolStrategy::Avg, PoolStrategy::WeightedAvg, PoolStrategy::Max];

    pub fn name(self) -> &'static str {
        match self {
            PoolStrategy::Avg => "AvgP",
            PoolStrategy::WeightedAvg => "WtAvgP",
            PoolStrategy::Max => "MaxP",
        }
    }
}

impl fmt::Display for PoolStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AvgP" => Ok(PoolStrategy::Avg),
            "WtAvgP" => Ok(PoolStrategy::WeightedAvg),
            "MaxP" => Ok(PoolStrategy::Max),
            other => Err(Error::InvalidArgument(format!("unknown pooling strategy {other:?}"))),
        }
    }
}

/// One window of a [`PoolingPlan`], covering frames `start..end`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedWindow {
    pub start: usize,
    pub end: usize,
    pub strategy: PoolStrategy,
    pub distinct: usize,
    /// Per-frame weights, present only for weighted averaging.
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoolingPlan {
    pub windows: Vec<PlannedWindow>,
}

impl PoolingPlan {
    /// Window count per strategy, in [`PoolStrategy::ALL`] order.
    pub fn histogram(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for w in &self.windows {
            counts[w.strategy as usize] += 1;
        }
        counts
    }

    /// Tab-separated audit listing: start, end, strategy, distinct-index count.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for w in &self.windows {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", w.start, w.end, w.strategy, w.distinct));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct CompressedSequence {
    pub features: Matrix,
    pub plan: PoolingPlan,
    pub source_length: usize,
}

impl CompressedSequence {
    pub fn ratio(&self) -> f64 {
        self.source_length as f64 / self.features.rows() as f64
    }
}

/// Window bounds `[start, end)` for a sequence of `t` frames. Windows start
/// at every multiple of the stride below `t` and are clipped at `t`.
pub fn plan_windows(t: usize, spec: WindowSpec) -> Vec<(usize, usize)> {
    (0..t)
        .step_by(spec.stride.max(1))
        .map(|start| (start, (start + spec.size).min(t)))
        .collect()
}

fn distinct_count(indices: &[usize]) -> usize {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.len()
}

pub fn strategy_for_distinct(distinct: usize) -> PoolStrategy {
    match distinct {
        0 | 1 => PoolStrategy::Avg,
        2 | 3 => PoolStrategy::WeightedAvg,
        _ => PoolStrategy::Max,
    }
}

pub fn select_strategy(window_indices: &[usize]) -> PoolStrategy {
    strategy_for_distinct(distinct_count(window_indices))
}

/// Weight of each frame: the within-window frequency of its index,
/// normalized to sum to one.
pub fn frequency_weights(window_indices: &[usize]) -> Vec<f64> {
    let counts: Vec<usize> = window_indices
        .iter()
        .map(|c| window_indices.iter().filter(|&d| d == c).count())
        .collect();
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Pools the `k` frames of one window into a single `D`-vector.
pub fn pool_window(frames: &Matrix, strategy: PoolStrategy, window_indices: &[usize]) -> Result<Vec<f64>> {
    if frames.rows() == 0 {
        return Err(Error::InvalidArgument("cannot pool an empty window".into()));
    }
    if window_indices.len() != frames.rows() {
        return Err(Error::DimMismatch {
            expected: frames.rows(),
            found: window_indices.len(),
        });
    }
    Ok(match strategy {
        PoolStrategy::Avg => frames.mean_rows(),
        PoolStrategy::Max => {
            let mut out = frames.row(0).to_vec();
            for r in frames.iter_rows().skip(1) {
                for (o, v) in out.iter_mut().zip(r) {
                    *o = o.max(*v);
                }
            }
            out
        }
        PoolStrategy::WeightedAvg => weighted_sum(frames, &frequency_weights(window_indices)),
    })
}

fn weighted_sum(frames: &Matrix, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; frames.cols()];
    for (r, w) in frames.iter_rows().zip(weights) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += w * v;
        }
    }
    out
}

/// Pools `x` over the windows of `spec`, choosing each window's operator from
/// the already computed index sequence.
pub fn compress_with_indices(x: &FeatureSequence, indices: &IndexSequence, spec: WindowSpec) -> Result<CompressedSequence> {
    spec.validate()?;
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("cannot compress an empty sequence".into()));
    }
    if indices.len() != x.rows() {
        return Err(Error::DimMismatch {
            expected: x.rows(),
            found: indices.len(),
        });
    }
    let bounds = plan_windows(x.rows(), spec);
    let mut features = Matrix::zeros(bounds.len(), x.cols());
    let mut windows = Vec::with_capacity(bounds.len());
    for (row, &(start, end)) in bounds.iter().enumerate() {
        let idx = &indices.as_slice()[start..end];
        let distinct = distinct_count(idx);
        let strategy = strategy_for_distinct(distinct);
        let frames = x.slice_rows(start, end);
        let pooled = pool_window(&frames, strategy, idx)?;
        features.row_mut(row).copy_from_slice(&pooled);
        windows.push(PlannedWindow {
            start,
            end,
            strategy,
            distinct,
            weights: (strategy == PoolStrategy::WeightedAvg).then(|| frequency_weights(idx)),
        });
    }
    Ok(CompressedSequence {
        features,
        plan: PoolingPlan { windows },
        source_length: x.rows(),
    })
}

/// Quantizes `x` against the codebook, then pools it window by window.
pub fn compress(x: &FeatureSequence, cb: &Codebook, spec: WindowSpec) -> Result<CompressedSequence> {
    let indices = quantize(x, cb)?;
    compress_with_indices(x, &indices, spec)
}

/// Pools every window with one fixed operator, ignoring any codebook.
pub fn compress_uniform(x: &FeatureSequence, strategy: PoolStrategy, spec: WindowSpec) -> Result<CompressedSequence> {
    spec.validate()?;
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("cannot compress an empty sequence".into()));
    }
    let bounds = plan_windows(x.rows(), spec);
    let mut features = Matrix::zeros(bounds.len(), x.cols());
    let mut windows = Vec::with_capacity(bounds.len());
    for (row, &(start, end)) in bounds.iter().enumerate() {
        let frames = x.slice_rows(start, end);
        // All-distinct placeholder indices give uniform weights if asked.
        let idx: Vec<usize> = (start..end).collect();
        let weights = (strategy == PoolStrategy::WeightedAvg).then(|| frequency_weights(&idx));
        let pooled = pool_window(&frames, strategy, &idx)?;
        features.row_mut(row).copy_from_slice(&pooled);
        windows.push(PlannedWindow {
            start,
            end,
            strategy,
            distinct: end - start,
            weights,
        });
    }
    Ok(CompressedSequence {
        features,
        plan: PoolingPlan { windows },
        source_length: x.rows(),
    })
}
