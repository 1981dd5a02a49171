//! Log-mel filterbank features: Hann window, 512-point FFT, power spectrum,
//! triangular HTK-mel filters from 0 Hz to Nyquist, floored log.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Waveform};
use crate::error::{PalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// Window length in samples (25 ms at 16 kHz).
    pub window: usize,
    /// Hop in samples (10 ms at 16 kHz).
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            floor: 1e-10,
        }
    }
}

impl MelConfig {
    /// Frame count for `n` samples; `None` when shorter than one window.
    pub fn frame_count(&self, n: usize) -> Option<usize> {
        (n >= self.window).then(|| (n - self.window) / self.hop + 1)
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` filters.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Filter weights, `n_mels` rows over `n_fft/2 + 1` FFT bins.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..cfg.bins())
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrum of every frame, T rows of `n_fft/2 + 1` bins.
pub fn power_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    let frames = cfg.frame_count(w.samples.len()).ok_or_else(|| {
        PalError::Input(format!(
            "waveform of {} samples shorter than one {}-sample window",
            w.samples.len(),
            cfg.window
        ))
    })?;
    let win = hann(cfg.window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < cfg.window {
                Complex::new(w.samples[start + i] as f64 * win[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.push(buf[..cfg.bins()].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<FeatureSequence> {
    w.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(PalError::Input(format!(
            "waveform at {} Hz, features configured for {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let spec = power_spectrogram(w, cfg)?;
    let bank = mel_filterbank(cfg);
    let mut frames = Vec::with_capacity(spec.len() * cfg.n_mels);
    for row in &spec {
        for filt in &bank {
            let e: f64 = filt.iter().zip(row).map(|(a, b)| a * b).sum();
            frames.push(e.max(cfg.floor).ln() as f32);
        }
    }
    FeatureSequence::new(frames, spec.len(), cfg.n_mels)
}
