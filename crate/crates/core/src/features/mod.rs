//! Acoustic features and the synthetic corpus.
//!
//! [`mel`] turns waveforms into log-mel frames; [`synth`] produces
//! speech-like feature sequences directly from per-symbol mel templates, with
//! label sequences drawn from the same bigram chain that generates the
//! language-model text; [`corpus`] reads and writes corpus archives.

pub mod corpus;
pub mod mel;
pub mod synth;

use std::path::Path;

use crate::error::{PalError, Result};

pub use mel::{log_mel, MelConfig};
pub use synth::{gen_bigram_text, gen_corpus, synth_utterance, SynthParams, SynthTaskSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let w = Self { samples, sample_rate };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(PalError::Input("sample rate must be positive".into()));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(PalError::Input("waveform contains non-finite samples".into()));
        }
        Ok(())
    }

    /// Reads a 16-bit PCM mono RIFF file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let reader = hound::WavReader::open(path.as_ref())
            .map_err(|e| PalError::Input(format!("{}: {e}", path.as_ref().display())))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(PalError::Input(format!(
                "expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| PalError::Input(format!("wav decode: {e}")))?;
        Self::new(samples, spec.sample_rate)
    }
}

/// T×D feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<f32>,
    pub dim: usize,
    pub frame_shift_ms: f32,
    pub window_ms: f32,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, n_frames: usize, dim: usize) -> Result<Self> {
        if n_frames == 0 || dim == 0 || frames.len() != n_frames * dim {
            return Err(PalError::Input(format!(
                "feature matrix of {} values is not a nonempty {n_frames}×{dim}",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(PalError::Input("features contain non-finite values".into()));
        }
        Ok(Self {
            frames,
            dim,
            frame_shift_ms: 10.0,
            window_ms: 25.0,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }
}

/// Target labels in `1..vocab`; index 0 is the CTC blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSequence {
    pub tokens: Vec<usize>,
    pub vocab: usize,
}

impl LabelSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t == 0 || t >= vocab) {
            return Err(PalError::Input(format!("label {bad} outside 1..{vocab}")));
        }
        Ok(Self { tokens, vocab })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub labels: LabelSequence,
}

/// ASR label of a text-vocabulary symbol (shifted past the blank).
pub fn label_of_symbol(symbol: usize) -> usize {
    symbol + 1
}

pub fn symbol_of_label(label: usize) -> usize {
    label - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_validation() {
        assert!(LabelSequence::new(vec![1, 20], 21).is_ok());
        assert!(LabelSequence::new(vec![0], 21).is_err());
        assert!(LabelSequence::new(vec![21], 21).is_err());
    }

    #[test]
    fn feature_validation() {
        assert!(FeatureSequence::new(vec![0.0; 6], 2, 3).is_ok());
        assert!(FeatureSequence::new(vec![], 0, 3).is_err());
        assert!(FeatureSequence::new(vec![f32::NAN; 3], 1, 3).is_err());
    }

    #[test]
    fn wav_round_trip_through_hound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..800 {
            w.write_sample(((i % 50) as i16 - 25) * 100).unwrap();
        }
        w.finalize().unwrap();
        let wave = Waveform::read_wav(&path).unwrap();
        assert_eq!(wave.samples.len(), 800);
        assert_eq!(wave.sample_rate, 16000);
        assert_eq!(wave.samples[0], -2500.0 / 32768.0);
        let f = log_mel(&wave, &MelConfig::default()).unwrap();
        assert_eq!(f.len(), 3);
    }
}
