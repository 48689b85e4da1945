//! Codebook-size sweep: one training run per (codebook size, seed) cell.

use std::fmt;
use std::str::FromStr;

use crate::aggregation::compress;
use crate::data::split;
use crate::error::{Error, Result};
use crate::model::PoolingMode;
use crate::train::{train_on, TrainingConfig};

/// Codebook size given directly or as a percentage of the mean audio length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SizeSpec {
    Absolute(usize),
    Percent(f64),
}

impl FromStr for SizeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(pct) = s.strip_suffix('%') {
            let v: f64 = pct
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad percentage {s:?}")))?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("percentage must be positive: {s:?}")));
            }
            Ok(SizeSpec::Percent(v))
        } else {
            let v: usize = s
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad codebook size {s:?}")))?;
            if v == 0 {
                return Err(Error::InvalidArgument("codebook size must be at least 1".into()));
            }
            Ok(SizeSpec::Absolute(v))
        }
    }
}

impl fmt::Display for SizeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeSpec::Absolute(p) => write!(f, "{p}"),
            SizeSpec::Percent(v) => write!(f, "{v}%"),
        }
    }
}

impl SizeSpec {
    pub fn resolve(self, mean_len: f64) -> usize {
        match self {
            SizeSpec::Absolute(p) => p,
            SizeSpec::Percent(v) => ((v / 100.0) * mean_len).round().max(1.0) as usize,
        }
    }
}

/// Endpoint labels for the two degenerate codebook sizes.
pub fn endpoint_label(p: usize, max_len: usize) -> &'static str {
    if p == 1 {
        "Only AvgP"
    } else if p >= max_len {
        "Only MaxP"
    } else {
        ""
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub p: usize,
    pub percent: f64,
    pub seed: u64,
    pub label: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: SweepCell,
    /// Best validation macro-F1 over all epochs.
    pub val_f1: f64,
    pub final_val_f1: f64,
    /// Share of validation windows pooled by AvgP, WtAvgP and MaxP under the
    /// trained codebook.
    pub strategy_share: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub base: TrainingConfig,
    pub cells: Vec<SweepCell>,
    pub mean_len: f64,
    pub max_len: usize,
}

/// Mean and max audio length over the training split of `config`'s dataset.
pub fn audio_length_stats(config: &TrainingConfig) -> Result<(f64, usize)> {
    let data = config.dataset()?;
    let s = split(&data, config.split)?;
    let lens: Vec<usize> = s.train.iter().map(|x| x.audio.rows()).collect();
    if lens.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
    Ok((mean, *lens.iter().max().unwrap()))
}

impl SweepPlan {
    /// Percentages resolve against the base config's training set. The sizes
    /// must include both endpoints: 1 and at least the longest audio sequence.
    pub fn new(base: TrainingConfig, sizes: &[SizeSpec], seeds: &[u64]) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::InvalidArgument("a sweep needs at least three codebook sizes".into()));
        }
        if seeds.is_empty() {
            return Err(Error::InvalidArgument("a sweep needs at least one seed".into()));
        }
        let (mean_len, max_len) = audio_length_stats(&base)?;
        let resolved: Vec<usize> = sizes.iter().map(|s| s.resolve(mean_len)).collect();
        if !resolved.contains(&1) {
            return Err(Error::InvalidArgument("sweep must include p = 1 (Only AvgP)".into()));
        }
        if !resolved.iter().any(|&p| p >= max_len) {
            return Err(Error::InvalidArgument(format!(
                "sweep must include a size of at least the longest sequence ({max_len} frames)"
            )));
        }
        let mut cells = Vec::with_capacity(resolved.len() * seeds.len());
        for &p in &resolved {
            for &seed in seeds {
                cells.push(SweepCell {
                    p,
                    percent: 100.0 * p as f64 / mean_len,
                    seed,
                    label: endpoint_label(p, max_len),
                });
            }
        }
        Ok(Self {
            base,
            cells,
            mean_len,
            max_len,
        })
    }

    pub fn config_for(&self, cell: &SweepCell) -> TrainingConfig {
        TrainingConfig {
            seed: cell.seed,
            codebook_size: cell.p,
            pooling: PoolingMode::Vq,
            ..self.base.clone()
        }
    }

    pub fn run_cell(&self, cell: &SweepCell) -> Result<CellResult> {
        let cfg = self.config_for(cell);
        let data = cfg.dataset()?;
        let s = split(&data, cfg.split)?;
        let out = train_on(s.train, s.val, &cfg)?;
        let val_f1 = out
            .metrics
            .iter()
            .map(|m| m.val_f1)
            .filter(|v| v.is_finite())
            .fold(f64::NAN, f64::max);
        let final_val_f1 = out.metrics.last().map_or(f64::NAN, |m| m.val_f1);

        let mut counts = [0usize; 3];
        if let Some(cb) = &out.model.params.codebook {
            for x in s.val {
                let c = compress(&x.audio, cb, cfg.window)?;
                for (acc, n) in counts.iter_mut().zip(c.plan.histogram()) {
                    *acc += n;
                }
            }
        }
        let total = counts.iter().sum::<usize>().max(1) as f64;
        Ok(CellResult {
            cell: cell.clone(),
            val_f1,
            final_val_f1,
            strategy_share: counts.map(|c| c as f64 / total),
        })
    }
}

pub const SWEEP_HEADER: &str = "p\tpercent\tseed\tval_f1\tlabel\tfinal_val_f1\tavgp_share\twtavgp_share\tmaxp_share";

pub fn format_row(cell: &SweepCell, result: &Result<CellResult>) -> String {
    match result {
        Ok(r) => format!(
            "{}\t{:.1}\t{}\t{:.6}\t{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}",
            cell.p,
            cell.percent,
            cell.seed,
            r.val_f1,
            cell.label,
            r.final_val_f1,
            r.strategy_share[0],
            r.strategy_share[1],
            r.strategy_share[2]
        ),
        Err(e) => format!(
            "{}\t{:.1}\t{}\tfailed\t{}\t{}\t\t\t",
            cell.p,
            cell.percent,
            cell.seed,
            cell.label,
            e.to_string().replace('\t', " ")
        ),
    }
}

/// Per-size mean F1 over successful cells, in first-appearance order.
pub fn mean_by_size(results: &[(SweepCell, Result<CellResult>)]) -> Vec<(usize, f64)> {
    let mut sizes: Vec<usize> = Vec::new();
    for (c, _) in results {
        if !sizes.contains(&c.p) {
            sizes.push(c.p);
        }
    }
    sizes
        .into_iter()
        .map(|p| {
            let vals: Vec<f64> = results
                .iter()
                .filter(|(c, _)| c.p == p)
                .filter_map(|(_, r)| r.as_ref().ok().map(|r| r.val_f1))
                .collect();
            let mean = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (p, mean)
        })
        .collect()
}
