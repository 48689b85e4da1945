//! Synthetic paired audio/MIDI feature sequences with four classes.
//!
//! Each class owns one audio prototype and one MIDI prototype. Audio is a
//! chain of segments; a segment is a run of frames around one prototype and
//! carries the label with probability `audio.label_fraction`, otherwise it
//! copies another class. MIDI frames are drawn the same way, frame by frame,
//! with `midi.label_fraction`. Prototype scales are set so that per-class
//! frame means sit exactly `margin` noise deviations apart.
//!
//! Two kinds of short events are laid over the audio segments:
//!
//! * bursts: a few frames whose value on one class axis flips sign every
//!   frame (mean zero) while a randomly chosen non-class axis lights up. The
//!   burst axis is the label with probability `burst_label_fraction`.
//! * outliers: isolated frames with a positive spike on a uniformly random
//!   class axis, carrying no label information.

use serde::{Deserialize, Serialize};

use crate::codebook::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub label_fraction: f64,
    pub min_segment: usize,
    pub max_segment: usize,
    /// Std of the offset shared by all frames of one segment.
    pub segment_jitter: f64,
    /// Per-frame probability that a burst starts.
    pub burst_rate: f64,
    pub min_burst: usize,
    pub max_burst: usize,
    /// Magnitude of the alternating class-axis component of a burst frame.
    pub burst_amplitude: f64,
    /// Magnitude of the random non-class-axis component of burst and outlier
    /// frames.
    pub burst_spread: f64,
    /// How many non-class axes (the first ones after the class axes) events
    /// may light up.
    pub spread_axes: usize,
    pub burst_label_fraction: f64,
    /// Per-frame probability of an outlier outside bursts.
    pub outlier_rate: f64,
    pub outlier_amplitude: f64,
    /// Number of non-class axes an outlier lights up with `burst_spread`.
    pub outlier_axes: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            min_len: 30,
            max_len: 120,
            noise: 0.05,
            label_fraction: 0.5,
            min_segment: 2,
            max_segment: 9,
            segment_jitter: 0.0,
            burst_rate: 0.05,
            min_burst: 4,
            max_burst: 6,
            burst_amplitude: 2.0,
            burst_spread: 1.0,
            spread_axes: 2,
            burst_label_fraction: 1.0,
            outlier_rate: 0.3,
            outlier_amplitude: 2.0,
            outlier_axes: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MidiConfig {
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub label_fraction: f64,
}

impl Default for MidiConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            min_len: 16,
            max_len: 64,
            noise: 0.05,
            label_fraction: 0.35,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub samples: usize,
    /// Distance between per-class frame means, in units of frame noise.
    pub margin: f64,
    pub audio: AudioConfig,
    pub midi: MidiConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 1600,
            margin: 4.0,
            audio: AudioConfig::default(),
            midi: MidiConfig::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.samples == 0 {
            return bad("data.samples must be positive");
        }
        if self.audio.dim < NUM_CLASSES + 1 || self.midi.dim < NUM_CLASSES + 1 {
            return bad("feature dims must exceed the class count");
        }
        if self.audio.min_len == 0 || self.audio.min_len > self.audio.max_len {
            return bad("audio length range is empty");
        }
        if self.midi.min_len == 0 || self.midi.min_len > self.midi.max_len {
            return bad("midi length range is empty");
        }
        if self.audio.min_segment == 0 || self.audio.min_segment > self.audio.max_segment {
            return bad("audio segment range is empty");
        }
        for f in [self.audio.label_fraction, self.midi.label_fraction] {
            if !(f > 0.25 && f <= 1.0) {
                return bad("label fractions must lie in (0.25, 1]");
            }
        }
        if !(self.margin > 0.0 && self.audio.noise > 0.0 && self.midi.noise > 0.0) {
            return bad("margin and noise levels must be positive");
        }
        let a = &self.audio;
        if !(0.0..=1.0).contains(&a.outlier_rate) || !(0.0..=1.0).contains(&a.burst_rate) {
            return bad("audio event rates must lie in [0, 1]");
        }
        if a.min_burst == 0 || a.min_burst > a.max_burst {
            return bad("audio burst length range is empty");
        }
        if !(0.0..=1.0).contains(&a.burst_label_fraction) {
            return bad("audio.burst_label_fraction must lie in [0, 1]");
        }
        if a.spread_axes == 0 || NUM_CLASSES + a.spread_axes > a.dim {
            return bad("audio.spread_axes must lie in [1, dim - 4]");
        }
        if !(a.burst_amplitude >= 0.0 && a.burst_spread >= 0.0 && a.outlier_amplitude >= 0.0) {
            return bad("audio event amplitudes must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub audio: FeatureSequence,
    pub midi: FeatureSequence,
    pub label: usize,
}

/// Class prototypes for one modality: a shared offset keeps every frame away
/// from the origin; class `c` adds `scale` along axis `c`.
#[derive(Clone, Debug)]
struct Prototypes {
    centers: Vec<Vec<f64>>,
}

impl Prototypes {
    /// `label_fraction` of the frames of class `c` come from prototype `c` and
    /// the rest uniformly from the others, so the class-mean gap along the
    /// class axes is `scale · (f − (1 − f)/3) · √2`.
    fn new(dim: usize, margin: f64, noise: f64, label_fraction: f64) -> Self {
        let effective = label_fraction - (1.0 - label_fraction) / (NUM_CLASSES - 1) as f64;
        let scale = margin * noise / (effective * std::f64::consts::SQRT_2);
        let offset = 0.5 * scale;
        let centers = (0..NUM_CLASSES)
            .map(|c| {
                let mut v = vec![offset; dim];
                v[c] += scale;
                v
            })
            .collect();
        Self { centers }
    }

    fn source(&self, label: usize, label_fraction: f64, rng: &mut Rng) -> usize {
        if rng.next_f64() < label_fraction {
            label
        } else {
            let other = rng.below(NUM_CLASSES - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        }
    }
}

/// Generates `config.samples` samples. Labels cycle `0, 1, 2, 3, …` so every
/// contiguous block of four is balanced.
pub fn gen_synthetic(config: &SyntheticConfig, rng: &mut Rng) -> Result<Vec<SyntheticSample>> {
    config.validate()?;
    let a = &config.audio;
    let m = &config.midi;
    let audio_protos = Prototypes::new(a.dim, config.margin, a.noise, a.label_fraction);
    let midi_protos = Prototypes::new(m.dim, config.margin, m.noise, m.label_fraction);

    let mut samples = Vec::with_capacity(config.samples);
    for i in 0..config.samples {
        let label = i % NUM_CLASSES;

        let t_audio = rng.range_inclusive(a.min_len, a.max_len);
        let mut audio = Matrix::zeros(t_audio, a.dim);
        let mut t = 0;
        while t < t_audio {
            let len = rng.range_inclusive(a.min_segment, a.max_segment).min(t_audio - t);
            let src = audio_protos.source(label, a.label_fraction, rng);
            let jitter: Vec<f64> = (0..a.dim).map(|_| a.segment_jitter * rng.normal()).collect();
            for row in t..t + len {
                for ((v, p), j) in audio.row_mut(row).iter_mut().zip(&audio_protos.centers[src]).zip(&jitter) {
                    *v = p + j + a.noise * rng.normal();
                }
            }
            t += len;
        }
        add_events(&mut audio, label, a, rng);
        let t_midi = rng.range_inclusive(m.min_len, m.max_len);
        let mut midi = Matrix::zeros(t_midi, m.dim);
        for row in 0..t_midi {
            let src = midi_protos.source(label, m.label_fraction, rng);
            for (v, p) in midi.row_mut(row).iter_mut().zip(&midi_protos.centers[src]) {
                *v = p + m.noise * rng.normal();
            }
        }
        samples.push(SyntheticSample { audio, midi, label });
    }
    Ok(samples)
}

fn spread_axis(a: &AudioConfig, rng: &mut Rng) -> usize {
    NUM_CLASSES + rng.below(a.spread_axes)
}

fn add_events(audio: &mut Matrix, label: usize, a: &AudioConfig, rng: &mut Rng) {
    if a.burst_rate == 0.0 && a.outlier_rate == 0.0 {
        return;
    }
    let t_audio = audio.rows();
    let mut t = 0;
    while t < t_audio {
        if rng.next_f64() < a.burst_rate {
            let len = rng.range_inclusive(a.min_burst, a.max_burst).min(t_audio - t);
            let axis = if rng.next_f64() < a.burst_label_fraction {
                label
            } else {
                rng.below(NUM_CLASSES)
            };
            let mut sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
            for row in t..t + len {
                let frame = audio.row_mut(row);
                frame[axis] += sign * a.burst_amplitude;
                frame[spread_axis(a, rng)] += a.burst_spread;
                sign = -sign;
            }
            t += len;
        } else {
            if rng.next_f64() < a.outlier_rate {
                let axis = rng.below(NUM_CLASSES);
                let frame = audio.row_mut(t);
                frame[axis] += a.outlier_amplitude;
                for _ in 0..a.outlier_axes {
                    frame[spread_axis(a, rng)] += a.burst_spread;
                }
            }
            t += 1;
        }
    }
}

/// Contiguous train/validation/test split by ratio.
#[derive(Clone, Debug)]
pub struct Splits<'a> {
    pub train: &'a [SyntheticSample],
    pub val: &'a [SyntheticSample],
    pub test: &'a [SyntheticSample],
}

pub fn split(samples: &[SyntheticSample], ratios: [f64; 3]) -> Result<Splits<'_>> {
    let total: f64 = ratios.iter().sum();
    if !(total > 0.0) || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config("split ratios must be nonnegative with a positive sum".into()));
    }
    let n = samples.len();
    let n_train = ((ratios[0] / total) * n as f64).round() as usize;
    let n_val = ((ratios[1] / total) * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    Ok(Splits {
        train: &samples[..n_train],
        val: &samples[n_train..n_train + n_val],
        test: &samples[n_train + n_val..],
    })
}
