//! Decoder-only character language model: token embedding, causal
//! transformer stack, vocabulary projection. Only the stack survives into
//! the speech encoder.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{PalError, Result};
use crate::nn::{export_parameters, import_parameters, init_weight, Linear, Module};
use crate::rng::{Rng, Seed};
use crate::tensor::{adam_step, clip_grad_norm, AdamConfig, AdamState, MaskMode, Real, Tensor};
use crate::transformer::{BlockConfig, TransformerStack};

#[derive(Debug, Clone)]
pub struct LmModel<F: Real> {
    pub vocab: usize,
    pub embed: Tensor<F>,
    pub stack: TransformerStack<F>,
    pub output: Linear<F>,
}

impl<F: Real> LmModel<F> {
    pub fn random(vocab: usize, mut block: BlockConfig, seed: Seed) -> Result<Self> {
        if vocab < 2 {
            return Err(PalError::Config("language model needs at least two tokens".into()));
        }
        block.mask_mode = MaskMode::Causal;
        let stack = TransformerStack::random(block.clone(), seed.split("stack"))?;
        let mut rng = seed.split("lm").rng();
        Ok(Self {
            vocab,
            embed: init_weight(&mut rng, &[vocab, block.d_model]),
            output: Linear::new(&mut rng, block.d_model, vocab, false),
            stack,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.stack.config
    }

    /// Logits T×V for a token sequence.
    pub fn forward(&self, tokens: &[usize], train: bool, rng: &mut Rng) -> Result<Tensor<F>> {
        if tokens.is_empty() {
            return Err(PalError::Input("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(PalError::Input(format!("token {bad} outside vocabulary of {}", self.vocab)));
        }
        let x = Tensor::embedding(&self.embed, tokens)?;
        let h = self.stack.forward(&x, train, rng)?;
        self.output.forward(&h)
    }

    /// Mean next-token cross-entropy of one window, as a graph node.
    pub fn window_loss(&self, window: &[usize], train: bool, rng: &mut Rng) -> Result<Tensor<F>> {
        if window.len() < 2 {
            return Err(PalError::Input("need at least two tokens to score".into()));
        }
        let logits = self.forward(&window[..window.len() - 1], train, rng)?;
        logits.log_softmax()?.nll_loss(&window[1..])
    }

    pub fn to_checkpoint(&self, info: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        let mut meta = CheckpointMeta::new("lm");
        meta.block_config = Some(self.stack.config.clone());
        meta.components = vec!["embed".into(), "stack".into(), "output".into()];
        meta.vocab = Some(self.vocab);
        meta.info = info;
        Checkpoint::new(meta, export_parameters(&self.named_parameters()))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != "lm" {
            return Err(PalError::Checkpoint(format!("expected an lm checkpoint, found {}", ckpt.meta.kind)));
        }
        let block = ckpt
            .meta
            .block_config
            .clone()
            .ok_or_else(|| PalError::Checkpoint("lm checkpoint lacks a block config".into()))?;
        let vocab = ckpt
            .meta
            .vocab
            .ok_or_else(|| PalError::Checkpoint("lm checkpoint lacks a vocabulary size".into()))?;
        let model = Self::random(vocab, block, Seed(0))?;
        import_parameters(&model.named_parameters(), &ckpt.tensors, "", "")?;
        Ok(model)
    }
}

impl<F: Real> Module<F> for LmModel<F> {
    fn named_parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = vec![("embed.weight".to_string(), self.embed.clone())];
        out.extend(self.stack.named_parameters());
        out.extend(self.output.named("output"));
        out
    }
}

/// Splits a stream into windows of `context + 1` tokens that overlap by one,
/// so every transition is scored exactly once.
fn eval_windows(tokens: &[usize], context: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + context + 1).min(tokens.len());
        out.push(&tokens[start..end]);
        start += context;
    }
    out
}

/// Mean next-token loss over `tokens` through the autograd path (eval mode).
pub fn eval_loss<F: Real>(model: &LmModel<F>, tokens: &[usize], context: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(PalError::Input("need at least two tokens to score".into()));
    }
    let mut rng = Seed(0).rng();
    let (mut total, mut count) = (0.0, 0usize);
    for w in eval_windows(tokens, context) {
        let n = w.len() - 1;
        total += model.window_loss(w, false, &mut rng)?.item().as_f64() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// exp(mean next-token negative log-likelihood), computed directly from
/// logits in f64.
pub fn perplexity<F: Real>(model: &LmModel<F>, tokens: &[usize], context: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(PalError::Input("need at least two tokens to score".into()));
    }
    let mut rng = Seed(0).rng();
    let (mut nll, mut count) = (0.0f64, 0usize);
    for w in eval_windows(tokens, context) {
        let logits = model.forward(&w[..w.len() - 1], false, &mut rng)?.to_f64_vec();
        for (row, &target) in logits.chunks(model.vocab).zip(&w[1..]) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            nll += lse - row[target];
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub block: BlockConfig,
    pub vocab: usize,
    /// Total training tokens (steps × batch × context).
    pub tokens: usize,
    pub batch: usize,
    pub context: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            block: BlockConfig::small(),
            vocab: 20,
            tokens: 2_000_000,
            batch: 32,
            context: 64,
            lr: 3e-4,
            warmup: 200,
            clip: 1.0,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl LmTrainConfig {
    pub fn steps(&self) -> usize {
        (self.tokens / (self.batch * self.context)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainLog {
    /// Mean batch loss per step.
    pub train_loss: Vec<f64>,
    /// `(step, held-out loss)` at each evaluation point.
    pub eval_loss: Vec<(usize, f64)>,
}

impl LmTrainLog {
    pub fn eval_perplexities(&self) -> Vec<f64> {
        self.eval_loss.iter().map(|&(_, l)| l.exp()).collect()
    }
}

pub struct LmRun<F: Real> {
    pub model: LmModel<F>,
    pub log: LmTrainLog,
    pub checkpoint: Checkpoint,
}

fn warmup_lr(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Next-token training with Adam on random windows of `train`. `heldout` is
/// scored every `eval_every` steps and at the end.
pub fn train_lm<F: Real>(train: &[usize], heldout: &[usize], cfg: &LmTrainConfig) -> Result<LmRun<F>> {
    if train.len() < cfg.context + 1 {
        return Err(PalError::Config(format!(
            "training text of {} tokens is shorter than one {}-token window",
            train.len(),
            cfg.context + 1
        )));
    }
    if cfg.batch == 0 || cfg.context == 0 {
        return Err(PalError::Config("batch and context must be positive".into()));
    }
    let seed = Seed(cfg.seed);
    let model = LmModel::<F>::random(cfg.vocab, cfg.block.clone(), seed.split("init"))?;
    let params = model.parameters();
    let mut opt = AdamState::new(&params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut batch_rng = seed.split("batches").rng();
    let mut drop_rng = seed.split("dropout").rng();
    let mut log = LmTrainLog {
        train_loss: Vec::new(),
        eval_loss: Vec::new(),
    };
    let steps = cfg.steps();
    let scale = 1.0 / cfg.batch as f64;
    for step in 0..steps {
        crate::tensor::zero_grads(&params);
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let start = batch_rng.gen_range(0..=train.len() - cfg.context - 1);
            let loss = model
                .window_loss(&train[start..start + cfg.context + 1], true, &mut drop_rng)
                .map_err(|e| match e {
                    PalError::Numeric(reason) => PalError::Training { step, reason },
                    other => other,
                })?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(PalError::Training {
                    step,
                    reason: format!("loss is {value}"),
                });
            }
            total += value;
            loss.scale(scale).backward()?;
        }
        clip_grad_norm(&params, cfg.clip);
        adam_step(&params, &mut opt, warmup_lr(cfg.lr, cfg.warmup, step))?;
        log.train_loss.push(total * scale);
        if !heldout.is_empty() && ((step + 1) % cfg.eval_every.max(1) == 0 || step + 1 == steps) {
            log.eval_loss.push((step + 1, eval_loss(&model, heldout, cfg.context)?));
        }
    }
    let mut info = BTreeMap::new();
    info.insert("train_config".into(), serde_json::to_value(cfg)?);
    info.insert("loss_curve".into(), serde_json::to_value(&log.train_loss)?);
    info.insert("eval_curve".into(), serde_json::to_value(&log.eval_loss)?);
    let checkpoint = model.to_checkpoint(info);
    Ok(LmRun { model, log, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{gen_bigram_text, SynthParams, SynthTaskSpec};

    fn tiny_block() -> BlockConfig {
        BlockConfig {
            d_model: 16,
            n_head: 2,
            d_ff: 32,
            n_layer: 2,
            dropout: 0.0,
            rope_base: 10000.0,
            mask_mode: MaskMode::Causal,
        }
    }

    #[test]
    fn causal_and_shaped() {
        let m = LmModel::<f64>::random(20, tiny_block(), Seed(1)).unwrap();
        let mut rng = Seed(0).rng();
        assert_eq!(m.forward(&[3], false, &mut rng).unwrap().shape(), &[1, 20]);
        let a = m.forward(&[1, 2, 3, 4, 5, 6], false, &mut rng).unwrap().to_vec();
        let b = m.forward(&[1, 2, 3, 9, 5, 6], false, &mut rng).unwrap().to_vec();
        assert_eq!(a[..3 * 20], b[..3 * 20]);
        assert_ne!(a[3 * 20..], b[3 * 20..]);
        assert!(matches!(m.forward(&[20], false, &mut rng), Err(PalError::Input(_))));
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let text: Vec<usize> = (0..400).map(|i| (i * 7 + 3) % 20).collect();
        let mut losses = Vec::new();
        for s in 0..5 {
            let m = LmModel::<f32>::random(20, tiny_block(), Seed(s)).unwrap();
            losses.push(eval_loss(&m, &text, 32).unwrap());
        }
        let mean = losses.iter().sum::<f64>() / 5.0;
        assert!((mean - 20f64.ln()).abs() < 0.2, "{mean}");
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let m = LmModel::<f64>::random(20, tiny_block(), Seed(2)).unwrap();
        m.output.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let text: Vec<usize> = (0..100).map(|i| i % 20).collect();
        let p = perplexity(&m, &text, 16).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn perplexity_agrees_with_eval_loss() {
        let m = LmModel::<f64>::random(20, tiny_block(), Seed(3)).unwrap();
        let text: Vec<usize> = (0..150).map(|i| (i * i + 1) % 20).collect();
        let p = perplexity(&m, &text, 16).unwrap();
        let l = eval_loss(&m, &text, 16).unwrap();
        assert!(p >= 1.0);
        assert!((p - l.exp()).abs() < 1e-6);
    }

    #[test]
    fn memorizes_a_constant_stream() {
        let text = vec![7usize; 200];
        let cfg = LmTrainConfig {
            block: tiny_block(),
            tokens: 60 * 4 * 16,
            batch: 4,
            context: 16,
            lr: 1e-2,
            warmup: 5,
            eval_every: 20,
            ..LmTrainConfig::default()
        };
        let run = train_lm::<f32>(&text, &text[..50], &cfg).unwrap();
        let p = perplexity(&run.model, &text[..50], 16).unwrap();
        assert!(p < 1.05, "{p}");
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let spec = SynthTaskSpec::from_params(&SynthParams::default()).unwrap();
        let text = gen_bigram_text(&spec, 2000, Seed(4)).unwrap();
        let cfg = LmTrainConfig {
            block: BlockConfig { dropout: 0.1, ..tiny_block() },
            tokens: 5 * 4 * 16,
            batch: 4,
            context: 16,
            lr: 1e-3,
            warmup: 2,
            eval_every: 2,
            ..LmTrainConfig::default()
        };
        let a = train_lm::<f32>(&text, &text[..100], &cfg).unwrap();
        let b = train_lm::<f32>(&text, &text[..100], &cfg).unwrap();
        let bytes = a.checkpoint.to_bytes();
        assert_eq!(bytes, b.checkpoint.to_bytes());
        assert_eq!(a.log.eval_loss.len(), 3);

        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let m = LmModel::<f32>::from_checkpoint(&back).unwrap();
        let mut rng = Seed(0).rng();
        assert_eq!(
            m.forward(&text[..10], false, &mut rng).unwrap().to_vec(),
            a.model.forward(&text[..10], false, &mut rng).unwrap().to_vec()
        );
    }

    #[test]
    fn nan_loss_is_a_training_error() {
        let text: Vec<usize> = (0..100).map(|i| i % 20).collect();
        let cfg = LmTrainConfig {
            block: tiny_block(),
            tokens: 10 * 2 * 8,
            batch: 2,
            context: 8,
            lr: f64::NAN,
            warmup: 0,
            ..LmTrainConfig::default()
        };
        let err = train_lm::<f32>(&text, &[], &cfg).err().unwrap();
        assert!(matches!(err, PalError::Training { step: 1, .. }), "{err}");
    }
}
