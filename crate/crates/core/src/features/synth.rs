//! Synthetic speech-like task.
//!
//! Symbols follow a first-order Markov chain. Each symbol owns a mel-space
//! template; an utterance holds each symbol for 8–20 frames of its template
//! plus Gaussian noise. Homophone pairs share one template, so only the
//! context (which the chain makes informative) can tell them apart.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{label_of_symbol, symbol_of_label, FeatureSequence, LabelSequence, Utterance};
use crate::error::{PalError, Result};
use crate::rng::{standard_normal, Rng, Seed};

/// Generator knobs for [`SynthTaskSpec::from_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// CTC vocabulary including the blank.
    pub vocab: usize,
    pub dim: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise: f64,
    pub homophone_pairs: usize,
    /// Softmax temperature applied to N(0,1) transition logits; lower is
    /// sharper.
    pub temperature: f64,
    /// Whether a symbol may follow itself.
    pub allow_repeats: bool,
    /// Seed of the task itself (matrix, templates, homophone choice).
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            vocab: 21,
            dim: 80,
            min_duration: 8,
            max_duration: 20,
            noise: 1.0,
            homophone_pairs: 2,
            temperature: 0.5,
            allow_repeats: false,
            seed: 20240501,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub vocab: usize,
    pub dim: usize,
    /// Row-stochastic matrix over the `vocab − 1` symbols.
    pub transition: Vec<Vec<f64>>,
    /// One template per symbol; homophones hold identical copies.
    pub templates: Vec<Vec<f32>>,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise: f64,
    /// Disjoint symbol pairs sharing a template.
    pub homophones: Vec<(usize, usize)>,
}

/// Smooth random spectrum: a few Gaussian bumps over the mel axis, then
/// standardized to zero mean and unit variance.
fn random_template(rng: &mut Rng, dim: usize) -> Vec<f32> {
    let mut v = vec![0.0f64; dim];
    for _ in 0..3 {
        let center = rng.gen_range(0.0..dim as f64);
        let width = rng.gen_range(0.04..0.1) * dim as f64;
        let amp = rng.gen_range(1.0..3.0) * if rng.gen_bool(0.3) { -1.0 } else { 1.0 };
        for (d, x) in v.iter_mut().enumerate() {
            let z = (d as f64 - center) / width;
            *x += amp * (-0.5 * z * z).exp();
        }
    }
    let mean = v.iter().sum::<f64>() / dim as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / dim as f64;
    let sd = var.sqrt().max(1e-9);
    v.iter().map(|x| ((x - mean) / sd) as f32).collect()
}

impl SynthTaskSpec {
    /// Builds and validates a spec from explicit parts.
    pub fn new(
        vocab: usize,
        dim: usize,
        transition: Vec<Vec<f64>>,
        templates: Vec<Vec<f32>>,
        durations: (usize, usize),
        noise: f64,
        homophones: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let spec = Self {
            vocab,
            dim,
            transition,
            templates,
            min_duration: durations.0,
            max_duration: durations.1,
            noise,
            homophones,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Temperature-sharpened random chain with random templates.
    pub fn from_params(p: &SynthParams) -> Result<Self> {
        if p.vocab < 3 {
            return Err(PalError::Config("vocabulary needs the blank plus at least two symbols".into()));
        }
        let n = p.vocab - 1;
        if 2 * p.homophone_pairs > n {
            return Err(PalError::Config(format!("{} homophone pairs need more than {n} symbols", p.homophone_pairs)));
        }
        if p.temperature <= 0.0 {
            return Err(PalError::Config("temperature must be positive".into()));
        }
        let root = Seed(p.seed);
        let mut rng = root.split("transition").rng();
        let transition = (0..n)
            .map(|i| {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        let z = standard_normal(&mut rng) / p.temperature;
                        if i == j && !p.allow_repeats {
                            f64::NEG_INFINITY
                        } else {
                            z
                        }
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect();

        let mut rng = root.split("homophones").rng();
        let mut symbols: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            symbols.swap(i, rng.gen_range(0..=i));
        }
        let homophones: Vec<(usize, usize)> = (0..p.homophone_pairs)
            .map(|k| {
                let (a, b) = (symbols[2 * k], symbols[2 * k + 1]);
                (a.min(b), a.max(b))
            })
            .collect();

        let mut rng = root.split("templates").rng();
        let mut templates: Vec<Vec<f32>> = (0..n).map(|_| random_template(&mut rng, p.dim)).collect();
        for &(a, b) in &homophones {
            templates[b] = templates[a].clone();
        }
        Self::new(
            p.vocab,
            p.dim,
            transition,
            templates,
            (p.min_duration, p.max_duration),
            p.noise,
            homophones,
        )
    }

    pub fn symbols(&self) -> usize {
        self.vocab - 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.symbols();
        if self.transition.len() != n || self.transition.iter().any(|r| r.len() != n) {
            return Err(PalError::Config(format!("transition matrix must be {n}×{n}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (s - 1.0).abs() > 1e-9 {
                return Err(PalError::Config(format!("transition row {i} is not a distribution (sum {s})")));
            }
        }
        if self.templates.len() != n || self.templates.iter().any(|t| t.len() != self.dim) {
            return Err(PalError::Config(format!("need {n} templates of width {}", self.dim)));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(PalError::Config("duration range must satisfy 1 ≤ min ≤ max".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(PalError::Config("noise must be nonnegative".into()));
        }
        let mut seen = vec![false; n];
        for &(a, b) in &self.homophones {
            if a == b || a >= n || b >= n || seen[a] || seen[b] {
                return Err(PalError::Config("homophone pairs must be disjoint symbol pairs".into()));
            }
            seen[a] = true;
            seen[b] = true;
            if self.templates[a] != self.templates[b] {
                return Err(PalError::Config(format!("homophones {a} and {b} must share a template")));
            }
        }
        Ok(())
    }

    pub fn is_homophone(&self, symbol: usize) -> bool {
        self.homophones.iter().any(|&(a, b)| a == symbol || b == symbol)
    }

    /// Representative of a symbol's acoustic class (a homophone maps to the
    /// smaller member of its pair).
    pub fn acoustic_class(&self, symbol: usize) -> usize {
        self.homophones
            .iter()
            .find(|&&(_, b)| b == symbol)
            .map_or(symbol, |&(a, _)| a)
    }

    /// Stationary distribution of the chain by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.symbols();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..10_000 {
            let mut next = vec![0.0; n];
            for (i, row) in self.transition.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            // Lazy step keeps periodic chains (e.g. cycles) convergent.
            for (a, b) in next.iter_mut().zip(&pi) {
                *a = 0.5 * *a + 0.5 * b;
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate of the chain in nats: Σ π_i H(row_i).
    pub fn bigram_entropy(&self) -> f64 {
        let pi = self.stationary();
        self.transition
            .iter()
            .zip(&pi)
            .map(|(row, &w)| w * row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
            .sum()
    }

    /// Entropy of the stationary unigram distribution in nats.
    pub fn unigram_entropy(&self) -> f64 {
        self.stationary().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }

    /// Stable 64-bit digest of the whole spec.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

fn sample_index(rng: &mut Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum; take the last
    // symbol with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn sample_chain(spec: &SynthTaskSpec, pi: &[f64], n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let mut s = sample_index(rng, pi);
    out.push(s);
    for _ in 1..n {
        s = sample_index(rng, &spec.transition[s]);
        out.push(s);
    }
    out
}

/// `n` symbols (text ids `0..vocab−1`) from the chain, the first drawn from
/// its stationary distribution.
pub fn gen_bigram_text(spec: &SynthTaskSpec, n: usize, seed: Seed) -> Result<Vec<usize>> {
    spec.validate()?;
    if n == 0 {
        return Err(PalError::Config("text length must be at least 1".into()));
    }
    let pi = spec.stationary();
    Ok(sample_chain(spec, &pi, n, &mut seed.rng()))
}

/// Renders labels as frames: each holds its template for a uniform
/// 8–20-frame duration, plus i.i.d. N(0, noise²).
pub fn synth_utterance(spec: &SynthTaskSpec, labels: &LabelSequence, seed: Seed) -> Result<FeatureSequence> {
    if labels.vocab != spec.vocab {
        return Err(PalError::Input(format!(
            "labels over {} classes, task has {}",
            labels.vocab, spec.vocab
        )));
    }
    if labels.is_empty() {
        return Err(PalError::Input("cannot synthesize an empty label sequence".into()));
    }
    let mut rng = seed.rng();
    let mut frames = Vec::new();
    let mut t = 0;
    for &l in &labels.tokens {
        let template = &spec.templates[symbol_of_label(l)];
        let d = rng.gen_range(spec.min_duration..=spec.max_duration);
        for _ in 0..d {
            for &v in template {
                let noise = if spec.noise > 0.0 { spec.noise * standard_normal(&mut rng) } else { 0.0 };
                frames.push(v + noise as f32);
            }
        }
        t += d;
    }
    FeatureSequence::new(frames, t, spec.dim)
}

fn make_utterance(spec: &SynthTaskSpec, pi: &[f64], len_range: (usize, usize), seed: Seed) -> Result<Utterance> {
    let mut rng = seed.split("labels").rng();
    let len = rng.gen_range(len_range.0..=len_range.1);
    let symbols = sample_chain(spec, pi, len, &mut rng);
    let labels = LabelSequence::new(symbols.into_iter().map(label_of_symbol).collect(), spec.vocab)?;
    let features = synth_utterance(spec, &labels, seed.split("frames"))?;
    Ok(Utterance { features, labels })
}

fn check_range(len_range: (usize, usize)) -> Result<()> {
    if len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(PalError::Config(format!("label length range {len_range:?} invalid")));
    }
    Ok(())
}

/// `n_utts` utterances whose label sequences come from the same chain as
/// [`gen_bigram_text`]. A pure function of `(spec, seed)`.
pub fn gen_corpus(spec: &SynthTaskSpec, n_utts: usize, len_range: (usize, usize), seed: Seed) -> Result<Vec<Utterance>> {
    spec.validate()?;
    check_range(len_range)?;
    if n_utts == 0 {
        return Err(PalError::Config("corpus needs at least one utterance".into()));
    }
    let pi = spec.stationary();
    (0..n_utts)
        .map(|i| make_utterance(spec, &pi, len_range, seed.split_index("utt", i as u64)))
        .collect()
}

/// Like [`gen_corpus`], keeping only utterances whose homophone share is at
/// least `min_fraction` (rejection sampling preserves the chain's
/// conditional statistics).
pub fn gen_homophone_corpus(
    spec: &SynthTaskSpec,
    n_utts: usize,
    len_range: (usize, usize),
    min_fraction: f64,
    seed: Seed,
) -> Result<Vec<Utterance>> {
    spec.validate()?;
    check_range(len_range)?;
    if spec.homophones.is_empty() {
        return Err(PalError::Config("task has no homophones".into()));
    }
    let pi = spec.stationary();
    let mut out = Vec::with_capacity(n_utts);
    let mut attempt = 0u64;
    while out.len() < n_utts {
        if attempt > 1_000 * n_utts as u64 + 10_000 {
            return Err(PalError::Config(format!(
                "could not reach homophone share {min_fraction} by rejection sampling"
            )));
        }
        let s = seed.split_index("utt", attempt);
        attempt += 1;
        let mut rng = s.split("labels").rng();
        let len = rng.gen_range(len_range.0..=len_range.1);
        let symbols = sample_chain(spec, &pi, len, &mut rng);
        let share = symbols.iter().filter(|&&x| spec.is_homophone(x)).count() as f64 / len as f64;
        if share >= min_fraction {
            out.push(make_utterance(spec, &pi, len_range, s)?);
        }
    }
    Ok(out)
}

/// Fraction of label tokens that belong to a homophone pair.
pub fn homophone_share(spec: &SynthTaskSpec, utts: &[Utterance]) -> f64 {
    let (mut h, mut n) = (0usize, 0usize);
    for u in utts {
        for &l in &u.labels.tokens {
            n += 1;
            if spec.is_homophone(symbol_of_label(l)) {
                h += 1;
            }
        }
    }
    h as f64 / n.max(1) as f64
}
