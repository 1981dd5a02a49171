//! CTC training and evaluation of speech models.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::cer;
use crate::ctc::{ctc_loss, greedy_decode, required_min_length};
use crate::encoder::AsrModel;
use crate::error::{PalError, Result};
use crate::features::Utterance;
use crate::nn::Module;
use crate::rng::Seed;
use crate::tensor::{adam_step, clip_grad_norm, zero_grads, AdamConfig, AdamState, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch: 16,
            lr: 1e-3,
            warmup: 100,
            clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean CTC loss of every optimizer step.
    pub step_loss: Vec<f64>,
    pub epoch_dev_cer: Vec<f64>,
    /// Epoch (1-based) whose weights were kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub best_dev_cer: f64,
    /// Training utterances too short for their targets.
    pub skipped: usize,
}

impl TrainLog {
    /// Mean of the first and last `window` step losses.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.step_loss.len();
        if n == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.step_loss[..w]), mean(&self.step_loss[n - w..])))
    }
}

/// Whether `model` can align `u`'s labels at all.
pub fn feasible<F: Real>(model: &AsrModel<F>, u: &Utterance) -> bool {
    model
        .output_len(u.features.len())
        .is_some_and(|t| t >= required_min_length(&u.labels.tokens))
}

/// Greedy transcripts of every utterance (eval mode).
pub fn transcribe<F: Real>(model: &AsrModel<F>, utts: &[Utterance]) -> Result<Vec<Vec<usize>>> {
    let mut rng = Seed(0).rng();
    utts.iter()
        .map(|u| {
            let lp = model.forward(&u.features, false, &mut rng)?;
            let hyp = greedy_decode(&lp.data(), model.vocab());
            Ok(hyp)
        })
        .collect()
}

pub fn evaluate<F: Real>(model: &AsrModel<F>, utts: &[Utterance]) -> Result<f64> {
    if let Some(u) = utts.first() {
        if u.labels.vocab != model.vocab() || u.features.dim != model.feature_dim() {
            return Err(PalError::Input(format!(
                "corpus has {} classes of {}-dim features, model expects {} of {}",
                u.labels.vocab,
                u.features.dim,
                model.vocab(),
                model.feature_dim()
            )));
        }
    }
    let hyps = transcribe(model, utts)?;
    let refs: Vec<Vec<usize>> = utts.iter().map(|u| u.labels.tokens.clone()).collect();
    cer(&refs, &hyps)
}

fn training_error(step: usize) -> impl Fn(PalError) -> PalError {
    move |e| match e {
        PalError::Numeric(reason) => PalError::Training { step, reason },
        other => other,
    }
}

/// Adam on the CTC loss over shuffled minibatches. Dev CER is measured after
/// every epoch and the best weights are restored at the end. Utterances whose
/// targets cannot be aligned are skipped and counted.
pub fn train_asr<F: Real>(
    model: &AsrModel<F>,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    seed: Seed,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(PalError::Config("empty training corpus".into()));
    }
    if cfg.batch == 0 {
        return Err(PalError::Config("batch size must be positive".into()));
    }
    let usable: Vec<usize> = (0..train.len()).filter(|&i| feasible(model, &train[i])).collect();
    let mut log = TrainLog {
        skipped: train.len() - usable.len(),
        ..TrainLog::default()
    };
    let named = model.named_parameters();
    let params: Vec<_> = named.iter().map(|(_, t)| t.clone()).collect();
    let trainable = params.iter().any(|p| p.requires_grad());
    let mut opt = AdamState::new(&params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut shuffle_rng = seed.split("shuffle").rng();
    let mut drop_rng = seed.split("dropout").rng();

    log.best_dev_cer = if dev.is_empty() { f64::INFINITY } else { evaluate(model, dev)? };
    let snapshot = || params.iter().map(|p| p.to_vec()).collect::<Vec<_>>();
    let mut best = snapshot();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        if !trainable || usable.is_empty() {
            break;
        }
        let mut order = usable.clone();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch) {
            zero_grads(&params);
            let mut total = 0.0;
            for &i in batch {
                let u = &train[i];
                let lp = model.forward(&u.features, true, &mut drop_rng).map_err(training_error(step))?;
                let loss = ctc_loss(&lp, &u.labels.tokens)?;
                let v = loss.item().as_f64();
                if !v.is_finite() {
                    return Err(PalError::Training {
                        step,
                        reason: format!("ctc loss is {v}"),
                    });
                }
                total += v;
                loss.scale(1.0 / batch.len() as f64).backward()?;
            }
            clip_grad_norm(&params, cfg.clip);
            let lr = cfg.lr * ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
            adam_step(&params, &mut opt, lr)?;
            log.step_loss.push(total / batch.len() as f64);
            step += 1;
        }
        if !dev.is_empty() {
            let c = evaluate(model, dev)?;
            log.epoch_dev_cer.push(c);
            if c < log.best_dev_cer {
                log.best_dev_cer = c;
                log.best_epoch = epoch;
                best = snapshot();
            }
        }
    }
    if !dev.is_empty() {
        for (p, vals) in params.iter().zip(best) {
            *p.data_mut() = vals;
        }
    }
    Ok(log)
}
