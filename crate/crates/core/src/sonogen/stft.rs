use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::fft::dft_real;
use crate::error::{Error, Result};

/// Log floor applied before normalisation, in dB.
pub const DB_FLOOR: f64 = -80.0;
/// Added to magnitudes before taking the logarithm.
pub const LOG_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl TimeSeries {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParam("time series is empty".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidParam("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    /// Periodic taper of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / n as f64;
                match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

/// STFT geometry shared by every image of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    #[serde(default)]
    pub window: Window,
}

impl StftParams {
    pub fn bin_width(&self) -> f64 {
        self.sample_rate as f64 / self.fft_size as f64
    }

    /// Centre time of frame `j` in seconds.
    pub fn frame_time(&self, frame: usize) -> f64 {
        (frame * self.hop + self.fft_size / 2) as f64 / self.sample_rate as f64
    }

    /// Number of samples that yields exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.fft_size + frames.saturating_sub(1) * self.hop
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || !self.fft_size.is_power_of_two() {
            return Err(Error::NotPowerOfTwo { len: self.fft_size });
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::InvalidParam(format!(
                "hop {} must be in 1..={}",
                self.hop, self.fft_size
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidParam("sample rate must be positive".into()));
        }
        Ok(())
    }
}

/// Normalised log-magnitude image. Row `r` holds FFT bin `first_bin + r`,
/// column `j` holds frame `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub grid: Array2<f64>,
    pub params: StftParams,
    pub first_bin: usize,
}

impl Spectrogram {
    pub fn rows(&self) -> usize {
        self.grid.nrows()
    }

    pub fn cols(&self) -> usize {
        self.grid.ncols()
    }

    /// Keeps bins `first_bin..first_bin + rows` and the first `cols` frames.
    pub fn crop(&self, first_bin: usize, rows: usize, cols: usize) -> Result<Spectrogram> {
        let start = first_bin
            .checked_sub(self.first_bin)
            .ok_or_else(|| Error::InvalidParam(format!("bin {first_bin} precedes the grid")))?;
        if start + rows > self.rows() || cols > self.cols() {
            return Err(Error::shape(
                format!("at least {}x{}", start + rows, cols),
                format!("{}x{}", self.rows(), self.cols()),
            ));
        }
        Ok(Spectrogram {
            grid: self.grid.slice(s![start..start + rows, ..cols]).to_owned(),
            params: self.params,
            first_bin,
        })
    }
}

/// Windowed linear magnitudes, one column per frame, `fft_size/2 + 1` rows.
pub fn magnitudes(x: &TimeSeries, params: &StftParams) -> Result<Array2<f64>> {
    params.validate()?;
    let n = params.fft_size;
    if x.len() < n {
        return Err(Error::SignalTooShort {
            len: x.len(),
            required: n,
        });
    }
    let frames = (x.len() - n) / params.hop + 1;
    let bins = n / 2 + 1;
    let taper = params.window.coefficients(n);
    let mut out = Array2::zeros((bins, frames));
    let mut frame = vec![0.0; n];
    for j in 0..frames {
        let off = j * params.hop;
        for (i, f) in frame.iter_mut().enumerate() {
            *f = x.samples()[off + i] * taper[i];
        }
        let spec = dft_real(&frame)?;
        for k in 0..bins {
            out[[k, j]] = spec[k].norm();
        }
    }
    Ok(out)
}

/// `20 log10(mag + eps)` floored at [`DB_FLOOR`], then min-max normalised over
/// the whole image. A flat image maps to 0.5 everywhere.
pub fn log_normalize(mags: &Array2<f64>) -> Array2<f64> {
    let db = mags.mapv(|m| (20.0 * (m + LOG_EPS).log10()).max(DB_FLOOR));
    let lo = db.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Array2::from_elem(db.dim(), 0.5);
    }
    db.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

pub fn stft(x: &TimeSeries, params: &StftParams) -> Result<Spectrogram> {
    let mags = magnitudes(x, params)?;
    Ok(Spectrogram {
        grid: log_normalize(&mags),
        params: *params,
        first_bin: 0,
    })
}
