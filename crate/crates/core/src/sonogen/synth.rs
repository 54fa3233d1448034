use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::stft::{StftParams, TimeSeries};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub multiple: u32,
    pub amplitude: f64,
}

/// A narrowband source: a fundamental with harmonics, optional sinusoidal
/// FM, gated to `[start_time, end_time)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TonalTrack {
    pub base_freq: f64,
    pub harmonics: Vec<Harmonic>,
    #[serde(default)]
    pub fm_depth: f64,
    #[serde(default)]
    pub fm_rate: f64,
    pub start_time: f64,
    pub end_time: f64,
}

impl TonalTrack {
    /// A single pure tone active over `[0, end_time)`.
    pub fn constant(freq: f64, amplitude: f64, end_time: f64) -> Self {
        Self {
            base_freq: freq,
            harmonics: vec![Harmonic {
                multiple: 1,
                amplitude,
            }],
            fm_depth: 0.0,
            fm_rate: 0.0,
            start_time: 0.0,
            end_time,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.base_freq > 0.0) {
            return Err(Error::InvalidParam(format!(
                "base frequency {} must be positive",
                self.base_freq
            )));
        }
        if !(self.start_time < self.end_time) {
            return Err(Error::InvalidParam(format!(
                "track interval [{}, {}) is empty",
                self.start_time, self.end_time
            )));
        }
        if self.fm_depth < 0.0 || self.fm_rate < 0.0 {
            return Err(Error::InvalidParam("FM depth and rate must be >= 0".into()));
        }
        for h in &self.harmonics {
            if h.multiple == 0 || !(0.0..=1.0).contains(&h.amplitude) {
                return Err(Error::InvalidParam(format!(
                    "harmonic {h:?} needs multiple >= 1 and amplitude in [0,1]"
                )));
            }
            let top = h.multiple as f64 * (self.base_freq + self.fm_depth);
            if top >= nyquist {
                return Err(Error::AboveNyquist { freq: top, nyquist });
            }
        }
        Ok(())
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.start_time && t < self.end_time
    }

    /// Instantaneous fundamental frequency at time `t`.
    pub fn frequency_at(&self, t: f64) -> f64 {
        self.base_freq + self.fm_depth * (2.0 * PI * self.fm_rate * t).sin()
    }

    /// Integrated fundamental phase at `t`, in radians.
    fn phase_at(&self, t: f64) -> f64 {
        let fm = if self.fm_rate > 0.0 && self.fm_depth > 0.0 {
            self.fm_depth / self.fm_rate * (1.0 - (2.0 * PI * self.fm_rate * t).cos())
        } else {
            0.0
        };
        2.0 * PI * self.base_freq * t + fm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub name: String,
    pub tracks: Vec<TonalTrack>,
}

impl ClassSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.tracks.is_empty() {
            return Err(Error::InvalidParam(format!(
                "class {} has no tracks",
                self.class_id
            )));
        }
        self.tracks.iter().try_for_each(|t| t.validate(sample_rate))
    }
}

/// Rendering controls for one signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub sample_rate: u32,
    pub duration: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_level: f64,
    /// Gain applied to interfering classes' tracks.
    pub interference_gain: f64,
    /// Per-track gain is drawn uniformly from `1 +- amplitude_jitter`.
    pub amplitude_jitter: f64,
}

/// Sum of the class's tracks, attenuated interfering tracks and white noise.
/// A pure function of its arguments and `seed`.
pub fn synth_signal(
    spec: &ClassSpec,
    params: &SynthParams,
    interference: &[ClassSpec],
    seed: u64,
) -> Result<TimeSeries> {
    if !(params.duration > 0.0) {
        return Err(Error::InvalidParam("duration must be positive".into()));
    }
    if !(0.0..=1.0).contains(&params.noise_level) {
        return Err(Error::InvalidParam("noise level must be in [0,1]".into()));
    }
    let sr = params.sample_rate;
    for t in spec.tracks.iter().chain(interference.iter().flat_map(|c| &c.tracks)) {
        t.validate(sr)?;
    }
    let len = (params.duration * sr as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0; len];

    let add_track = |track: &TonalTrack, gain: f64, rng: &mut ChaCha8Rng, out: &mut [f64]| {
        let jitter = if params.amplitude_jitter > 0.0 {
            rng.random_range(-params.amplitude_jitter..=params.amplitude_jitter)
        } else {
            0.0
        };
        let g = gain * (1.0 + jitter);
        let offsets: Vec<f64> = track
            .harmonics
            .iter()
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        for (n, s) in out.iter_mut().enumerate() {
            let t = n as f64 / sr as f64;
            if !track.is_active(t) {
                continue;
            }
            let phase = track.phase_at(t);
            for (h, off) in track.harmonics.iter().zip(&offsets) {
                *s += g * h.amplitude * (h.multiple as f64 * phase + off).sin();
            }
        }
    };

    for track in &spec.tracks {
        add_track(track, 1.0, &mut rng, &mut samples);
    }
    for other in interference {
        for track in &other.tracks {
            add_track(track, params.interference_gain, &mut rng, &mut samples);
        }
    }
    if params.noise_level > 0.0 {
        let normal = Normal::new(0.0, params.noise_level)
            .map_err(|e| Error::InvalidParam(e.to_string()))?;
        for s in samples.iter_mut() {
            *s += normal.sample(&mut rng);
        }
    }
    TimeSeries::new(samples, sr)
}

/// Marks every (bin, frame) within +-1 bin of an active track or harmonic.
/// `first_bin` is the FFT bin held by row 0 of the image.
pub fn ground_truth_mask(
    spec: &ClassSpec,
    rows: usize,
    cols: usize,
    params: &StftParams,
    first_bin: usize,
) -> Array2<f64> {
    let mut mask = Array2::zeros((rows, cols));
    let bin_width = params.bin_width();
    for j in 0..cols {
        let t = params.frame_time(j);
        for track in spec.tracks.iter().filter(|tr| tr.is_active(t)) {
            let f0 = track.frequency_at(t);
            for h in &track.harmonics {
                let centre = (h.multiple as f64 * f0 / bin_width).round() as i64;
                for bin in centre - 1..=centre + 1 {
                    let row = bin - first_bin as i64;
                    if row >= 0 && (row as usize) < rows {
                        mask[[row as usize, j]] = 1.0;
                    }
                }
            }
        }
    }
    mask
}
