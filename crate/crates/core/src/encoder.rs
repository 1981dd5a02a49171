//! Speech encoders built around a transformer stack.
//!
//! Two assembled forms exist. The convolutional form runs strided
//! convolutions, one adapter, the stack and a CTC head. The stacked form
//! feeds frame-stacked features through a separately trained speech encoder
//! first, then the same adapter, stack and head. A stand-alone speech
//! encoder with its own head is the third model type and the baseline for
//! the stacked form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{PalError, Result};
use crate::features::FeatureSequence;
use crate::nn::{export_parameters, import_parameters, init_weight, init_zeros, Linear, Module};
use crate::rng::{Rng, Seed};
use crate::tensor::{conv_out_len, MaskMode, Real, Tensor};
use crate::transformer::{BlockConfig, TransformerStack};

/// Two stride-2 convolutions (k=3, padding 1), each followed by SiLU.
#[derive(Debug, Clone)]
pub struct ConvFrontend<F: Real> {
    pub conv1_weight: Tensor<F>,
    pub conv1_bias: Tensor<F>,
    pub conv2_weight: Tensor<F>,
    pub conv2_bias: Tensor<F>,
}

impl<F: Real> ConvFrontend<F> {
    pub fn new(rng: &mut Rng, d_in: usize, channels: usize) -> Self {
        Self {
            conv1_weight: init_weight(rng, &[3, d_in, channels]),
            conv1_bias: init_zeros(&[channels]),
            conv2_weight: init_weight(rng, &[3, channels, channels]),
            conv2_bias: init_zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1_weight.shape()[2]
    }

    pub fn output_len(t: usize) -> Option<usize> {
        conv_out_len(t, 3, 2, 1).and_then(|t| conv_out_len(t, 3, 2, 1))
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h = x.conv1d(&self.conv1_weight, Some(&self.conv1_bias), 2, 1)?.silu();
        Ok(h.conv1d(&self.conv2_weight, Some(&self.conv2_bias), 2, 1)?.silu())
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        vec![
            (format!("{prefix}.conv1.weight"), self.conv1_weight.clone()),
            (format!("{prefix}.conv1.bias"), self.conv1_bias.clone()),
            (format!("{prefix}.conv2.weight"), self.conv2_weight.clone()),
            (format!("{prefix}.conv2.bias"), self.conv2_bias.clone()),
        ]
    }
}

/// Concatenates `context` frames centred on every `rate`-th frame, with the
/// first and last frames repeated past the edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackFrontend {
    pub context: usize,
    pub rate: usize,
}

impl Default for StackFrontend {
    fn default() -> Self {
        Self { context: 7, rate: 6 }
    }
}

impl StackFrontend {
    pub fn output_len(&self, t: usize) -> usize {
        t.div_ceil(self.rate)
    }

    pub fn output_dim(&self, d: usize) -> usize {
        self.context * d
    }

    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.context % 2 == 0 || self.rate == 0 {
            return Err(PalError::Config(format!(
                "frame stacking needs an odd context and a positive rate, got {}/{}",
                self.context, self.rate
            )));
        }
        Ok(())
    }

    pub fn apply(&self, frames: &[f32], t: usize, d: usize) -> Vec<f32> {
        let half = (self.context / 2) as isize;
        let mut out = Vec::with_capacity(self.output_len(t) * self.context * d);
        for c in (0..t).step_by(self.rate) {
            for o in -half..=half {
                let src = (c as isize + o).clamp(0, t as isize - 1) as usize;
                out.extend_from_slice(&frames[src * d..(src + 1) * d]);
            }
        }
        out
    }

    pub fn forward<F: Real>(&self, x: &FeatureSequence) -> Result<Tensor<F>> {
        let stacked = self.apply(&x.frames, x.len(), x.dim);
        Tensor::new(
            stacked.into_iter().map(|v| F::of(v as f64)).collect(),
            &[self.output_len(x.len()), self.output_dim(x.dim)],
        )
    }
}

fn features_tensor<F: Real>(x: &FeatureSequence) -> Result<Tensor<F>> {
    Tensor::new(x.frames.iter().map(|&v| F::of(v as f64)).collect(), &[x.len(), x.dim])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrEncoderConfig {
    pub feature_dim: usize,
    pub vocab: usize,
    pub frontend: StackFrontend,
    pub block: BlockConfig,
}

/// Speech encoder trained on its own before being reused: frame stacking,
/// an input projection, a full-attention stack and a CTC head.
#[derive(Debug, Clone)]
pub struct PretrainedAsrEncoder<F: Real> {
    pub config: AsrEncoderConfig,
    pub input: Linear<F>,
    pub stack: TransformerStack<F>,
    pub head: Linear<F>,
    /// Fingerprint of the corpus the weights were trained on.
    pub fingerprint: Option<String>,
}

impl<F: Real> PretrainedAsrEncoder<F> {
    pub fn random(mut config: AsrEncoderConfig, seed: Seed) -> Result<Self> {
        config.frontend.validate()?;
        config.block.mask_mode = MaskMode::Full;
        let mut rng = seed.split("asr").rng();
        let d = config.block.d_model;
        Ok(Self {
            input: Linear::new(&mut rng, config.frontend.output_dim(config.feature_dim), d, true),
            head: Linear::new(&mut rng, d, config.vocab, true),
            stack: TransformerStack::random(config.block.clone(), seed.split("asr.stack"))?,
            config,
            fingerprint: None,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.block.d_model
    }

    /// Hidden sequence ceil(T/rate)×d_model, without the head.
    pub fn encode(&self, x: &FeatureSequence, train: bool, rng: &mut Rng) -> Result<Tensor<F>> {
        if x.dim != self.config.feature_dim {
            return Err(PalError::Dimension(format!(
                "speech encoder expects {}-dim features, got {}",
                self.config.feature_dim, x.dim
            )));
        }
        let stacked = self.config.frontend.forward::<F>(x)?;
        self.stack.forward(&self.input.forward(&stacked)?, train, rng)
    }

    pub fn encoder_parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = self.input.named("asr.input");
        out.extend(self.stack.named_parameters_with("asr.stack"));
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMeta::new("asr_encoder");
        meta.block_config = Some(self.config.block.clone());
        meta.components = vec!["asr.input".into(), "asr.stack".into(), "asr.head".into()];
        meta.vocab = Some(self.config.vocab);
        meta.info
            .insert("asr_config".into(), serde_json::to_value(&self.config).expect("config serializes"));
        if let Some(fp) = &self.fingerprint {
            meta.info.insert("corpus_fingerprint".into(), fp.clone().into());
        }
        Checkpoint::new(meta, export_parameters(&self.named_parameters()))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != "asr_encoder" {
            return Err(PalError::Checkpoint(format!(
                "expected a speech-encoder checkpoint, found {}",
                ckpt.meta.kind
            )));
        }
        let config: AsrEncoderConfig = serde_json::from_value(
            ckpt.meta
                .info
                .get("asr_config")
                .cloned()
                .ok_or_else(|| PalError::Checkpoint("speech-encoder checkpoint lacks its config".into()))?,
        )?;
        let mut enc = Self::random(config, Seed(0))?;
        import_parameters(&enc.named_parameters(), &ckpt.tensors, "", "")?;
        enc.fingerprint = ckpt.meta.info.get("corpus_fingerprint").and_then(|v| v.as_str()).map(String::from);
        Ok(enc)
    }
}

impl<F: Real> Module<F> for PretrainedAsrEncoder<F> {
    fn named_parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = self.encoder_parameters();
        out.extend(self.head.named("asr.head"));
        out
    }
}

/// Which of the two assembled pipelines to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderForm {
    /// conv → adapter → stack → head.
    Conv,
    /// pretrained speech encoder → adapter → stack → head.
    AsrStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackInit {
    /// No stack at all: the adapter feeds the head directly.
    None,
    Random,
    Transplant,
}

/// Freeze flags are cumulative; `custom` holds parameter names or component
/// prefixes (e.g. `stack.layer0`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezePolicy {
    pub freeze_stack: bool,
    pub freeze_asr_encoder: bool,
    pub custom: Vec<String>,
}

impl FreezePolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn freeze_stack() -> Self {
        Self {
            freeze_stack: true,
            ..Self::default()
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.freeze_stack {
            parts.push("stack".to_string());
        }
        if self.freeze_asr_encoder {
            parts.push("asr_encoder".to_string());
        }
        parts.extend(self.custom.iter().cloned());
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Everything needed to build an assembled encoder besides pretrained
/// weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub form: EncoderForm,
    pub stack_init: StackInit,
    pub feature_dim: usize,
    pub vocab: usize,
    pub conv_channels: usize,
    /// Stack shape for random init; a transplant takes the checkpoint's.
    pub block: Option<BlockConfig>,
    /// Overrides the stack's dropout rate when set.
    pub dropout: Option<f64>,
    pub freeze: FreezePolicy,
}

#[derive(Debug, Clone)]
pub struct AssembledEncoder<F: Real> {
    pub spec: EncoderSpec,
    pub conv: Option<ConvFrontend<F>>,
    pub asr: Option<PretrainedAsrEncoder<F>>,
    pub adapter: Linear<F>,
    pub stack: Option<TransformerStack<F>>,
    pub head: Linear<F>,
}

/// Installs the transformer layers of a language-model checkpoint into a
/// fresh stack running with a full attention mask. Embedding and output
/// tensors are ignored.
pub fn transplant<F: Real>(lm: &Checkpoint) -> Result<TransformerStack<F>> {
    let block = lm
        .meta
        .block_config
        .clone()
        .ok_or_else(|| PalError::Checkpoint("checkpoint declares no block config".into()))?;
    let mut stack = TransformerStack::random(block, Seed(0))?;
    import_parameters(&stack.named_parameters(), &lm.tensors, "stack", "stack")?;
    stack.set_mask_mode(MaskMode::Full);
    Ok(stack)
}

impl<F: Real> AssembledEncoder<F> {
    /// Output positions for `t` input frames, `None` when below one.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        match self.spec.form {
            EncoderForm::Conv => ConvFrontend::<F>::output_len(t),
            EncoderForm::AsrStack => {
                let fe = self.asr.as_ref().expect("stacked form owns a speech encoder").config.frontend;
                (t > 0).then(|| fe.output_len(t))
            }
        }
    }

    pub fn forward(&self, x: &FeatureSequence, train: bool, rng: &mut Rng) -> Result<Tensor<F>> {
        if x.dim != self.spec.feature_dim {
            return Err(PalError::Dimension(format!(
                "encoder expects {}-dim features, got {}",
                self.spec.feature_dim, x.dim
            )));
        }
        if self.output_len(x.len()).is_none() {
            return Err(PalError::Input(format!("{} frames is too short for the frontend", x.len())));
        }
        let h = match (&self.conv, &self.asr) {
            (Some(conv), _) => conv.forward(&features_tensor(x)?)?,
            (None, Some(asr)) => asr.encode(x, train, rng)?,
            (None, None) => unreachable!("assembled encoder has a frontend"),
        };
        let mut h = self.adapter.forward(&h)?;
        if let Some(stack) = &self.stack {
            h = stack.forward(&h, train, rng)?;
        }
        self.head.forward(&h)?.log_softmax()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMeta::new("encoder");
        meta.block_config = self.stack.as_ref().map(|s| s.config.clone());
        meta.components = self
            .named_parameters()
            .iter()
            .map(|(n, _)| n.split('.').next().unwrap_or_default().to_string())
            .fold(Vec::new(), |mut acc, c| {
                if !acc.contains(&c) {
                    acc.push(c);
                }
                acc
            });
        meta.vocab = Some(self.spec.vocab);
        let info = &mut meta.info;
        info.insert("encoder_spec".into(), serde_json::to_value(&self.spec).expect("spec serializes"));
        info.insert(
            "frontend".into(),
            match self.spec.form {
                EncoderForm::Conv => "conv".into(),
                EncoderForm::AsrStack => "asr_encoder+stacking".into(),
            },
        );
        info.insert("freeze".into(), self.spec.freeze.label().into());
        if let Some(asr) = &self.asr {
            info.insert("asr_config".into(), serde_json::to_value(&asr.config).expect("config serializes"));
            if let Some(fp) = &asr.fingerprint {
                info.insert("asr_corpus_fingerprint".into(), fp.clone().into());
            }
        }
        Checkpoint::new(meta, export_parameters(&self.named_parameters()))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != "encoder" {
            return Err(PalError::Checkpoint(format!("expected an encoder checkpoint, found {}", ckpt.meta.kind)));
        }
        let get = |k: &str| ckpt.meta.info.get(k).cloned();
        let mut spec: EncoderSpec = serde_json::from_value(
            get("encoder_spec").ok_or_else(|| PalError::Checkpoint("encoder checkpoint lacks its spec".into()))?,
        )?;
        if spec.stack_init == StackInit::Transplant {
            spec.block = ckpt.meta.block_config.clone();
            spec.stack_init = StackInit::Random;
        }
        let asr = match get("asr_config") {
            Some(v) => {
                let mut asr = PretrainedAsrEncoder::random(serde_json::from_value(v)?, Seed(0))?;
                asr.fingerprint = get("asr_corpus_fingerprint").and_then(|v| v.as_str().map(String::from));
                Some(asr)
            }
            None => None,
        };
        let original = serde_json::from_value(get("encoder_spec").expect("checked above"))?;
        let mut enc = assemble(spec, None, asr, Seed(0))?;
        import_parameters(&enc.named_parameters(), &ckpt.tensors, "", "")?;
        enc.spec = original;
        apply_freeze(&enc, &enc.spec.freeze)?;
        Ok(enc)
    }
}

impl<F: Real> Module<F> for AssembledEncoder<F> {
    fn named_parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        if let Some(c) = &self.conv {
            out.extend(c.named("frontend"));
        }
        if let Some(a) = &self.asr {
            out.extend(a.encoder_parameters());
        }
        out.extend(self.adapter.named("adapter"));
        if let Some(s) = &self.stack {
            out.extend(s.named_parameters());
        }
        out.extend(self.head.named("head"));
        out
    }
}

fn assemble<F: Real>(
    spec: EncoderSpec,
    transplanted: Option<TransformerStack<F>>,
    asr: Option<PretrainedAsrEncoder<F>>,
    seed: Seed,
) -> Result<AssembledEncoder<F>> {
    let mut rng = seed.split("assembly").rng();
    let stack = match (spec.stack_init, transplanted) {
        (StackInit::None, _) => None,
        (StackInit::Transplant, Some(s)) => Some(s),
        (StackInit::Transplant, None) => {
            return Err(PalError::Assembly("transplant requested without a language-model checkpoint".into()))
        }
        (StackInit::Random, _) => {
            let mut block = spec
                .block
                .clone()
                .ok_or_else(|| PalError::Assembly("random stack needs a block config".into()))?;
            block.mask_mode = MaskMode::Full;
            Some(TransformerStack::random(block, seed.split("stack"))?)
        }
    };
    let mut stack = stack;
    if let (Some(s), Some(rate)) = (stack.as_mut(), spec.dropout) {
        s.config.dropout = rate;
    }
    let (conv, frontend_dim) = match spec.form {
        EncoderForm::Conv => (Some(ConvFrontend::new(&mut rng, spec.feature_dim, spec.conv_channels)), spec.conv_channels),
        EncoderForm::AsrStack => {
            let a = asr
                .as_ref()
                .ok_or_else(|| PalError::Assembly("stacked form needs a pretrained speech encoder".into()))?;
            if a.config.feature_dim != spec.feature_dim || a.config.vocab != spec.vocab {
                return Err(PalError::Assembly(format!(
                    "speech encoder is {}-dim/{} classes, experiment wants {}/{}",
                    a.config.feature_dim, a.config.vocab, spec.feature_dim, spec.vocab
                )));
            }
            (None, a.d_model())
        }
    };
    let d_model = stack.as_ref().map_or(frontend_dim, |s| s.config.d_model);
    let adapter = Linear::new(&mut rng, frontend_dim, d_model, true);
    let head = Linear::new(&mut rng, d_model, spec.vocab, true);
    let enc = AssembledEncoder {
        conv,
        asr: if spec.form == EncoderForm::AsrStack { asr } else { None },
        adapter,
        stack,
        head,
        spec,
    };
    Ok(enc)
}

/// Builds the encoder described by `spec`. A transplant needs `lm`; the
/// stacked form needs `asr`. The freeze policy is applied before returning.
pub fn build_encoder<F: Real>(
    spec: &EncoderSpec,
    lm: Option<&Checkpoint>,
    asr: Option<&Checkpoint>,
    seed: Seed,
) -> Result<AssembledEncoder<F>> {
    let transplanted = match (spec.stack_init, lm) {
        (StackInit::Transplant, Some(ckpt)) => Some(transplant(ckpt)?),
        (StackInit::Transplant, None) => {
            return Err(PalError::Assembly("transplant requested without a language-model checkpoint".into()))
        }
        _ => None,
    };
    let asr = match (spec.form, asr) {
        (EncoderForm::AsrStack, Some(ckpt)) => Some(PretrainedAsrEncoder::from_checkpoint(ckpt)?),
        (EncoderForm::AsrStack, None) => {
            return Err(PalError::Assembly("stacked form needs a speech-encoder checkpoint".into()))
        }
        _ => None,
    };
    let enc = assemble(spec.clone(), transplanted, asr, seed)?;
    apply_freeze(&enc, &spec.freeze)?;
    Ok(enc)
}

/// Resets every parameter to trainable, then freezes what `policy` names.
pub fn apply_freeze<F: Real>(enc: &AssembledEncoder<F>, policy: &FreezePolicy) -> Result<()> {
    freeze_named(&enc.named_parameters(), enc.stack.is_some(), enc.asr.is_some(), policy)
}

fn freeze_named<F: Real>(
    named: &[(String, Tensor<F>)],
    has_stack: bool,
    has_asr: bool,
    policy: &FreezePolicy,
) -> Result<()> {
    if policy.freeze_stack && !has_stack {
        return Err(PalError::Policy("freeze_stack on an encoder without a stack".into()));
    }
    if policy.freeze_asr_encoder && !has_asr {
        return Err(PalError::Policy("freeze_asr_encoder on an encoder without a speech encoder".into()));
    }
    let under = |n: &str, c: &str| n == c || n.starts_with(&format!("{c}."));
    for name in &policy.custom {
        if !named.iter().any(|(n, _)| under(n, name)) {
            return Err(PalError::Policy(format!("no parameter named {name}")));
        }
    }
    for (n, t) in named {
        let frozen = (policy.freeze_stack && under(n, "stack"))
            || (policy.freeze_asr_encoder && under(n, "asr") && !under(n, "asr.head"))
            || policy.custom.iter().any(|c| under(n, c));
        t.set_requires_grad(!frozen);
    }
    Ok(())
}

/// Full pipeline on one utterance: log-probabilities T'×V.
pub fn encoder_forward<F: Real>(
    enc: &AssembledEncoder<F>,
    x: &FeatureSequence,
    train: bool,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    enc.forward(x, train, rng)
}

/// Either model type the trainer accepts.
#[derive(Debug, Clone)]
pub enum AsrModel<F: Real> {
    Assembled(AssembledEncoder<F>),
    Standalone(PretrainedAsrEncoder<F>),
}

impl<F: Real> AsrModel<F> {
    pub fn vocab(&self) -> usize {
        match self {
            Self::Assembled(e) => e.spec.vocab,
            Self::Standalone(e) => e.config.vocab,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::Assembled(e) => e.spec.feature_dim,
            Self::Standalone(e) => e.config.feature_dim,
        }
    }

    pub fn output_len(&self, t: usize) -> Option<usize> {
        match self {
            Self::Assembled(e) => e.output_len(t),
            Self::Standalone(e) => (t > 0).then(|| e.config.frontend.output_len(t)),
        }
    }

    pub fn forward(&self, x: &FeatureSequence, train: bool, rng: &mut Rng) -> Result<Tensor<F>> {
        match self {
            Self::Assembled(e) => e.forward(x, train, rng),
            Self::Standalone(e) => e.head.forward(&e.encode(x, train, rng)?)?.log_softmax(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Self::Assembled(e) => e.to_checkpoint(),
            Self::Standalone(e) => e.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.meta.kind.as_str() {
            "encoder" => Ok(Self::Assembled(AssembledEncoder::from_checkpoint(ckpt)?)),
            "asr_encoder" => Ok(Self::Standalone(PretrainedAsrEncoder::from_checkpoint(ckpt)?)),
            other => Err(PalError::Checkpoint(format!("{other} checkpoint is not a speech model"))),
        }
    }

    pub fn apply_freeze(&self, policy: &FreezePolicy) -> Result<()> {
        match self {
            Self::Assembled(e) => apply_freeze(e, policy),
            Self::Standalone(e) => freeze_named(&e.named_parameters(), false, true, policy),
        }
    }
}

impl<F: Real> Module<F> for AsrModel<F> {
    fn named_parameters(&self) -> Vec<(String, Tensor<F>)> {
        match self {
            Self::Assembled(e) => e.named_parameters(),
            Self::Standalone(e) => e.named_parameters(),
        }
    }
}

/// Counts parameters per top-level component, e.g. `stack` → 812k.
pub fn component_sizes<F: Real>(m: &impl Module<F>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (n, t) in m.named_parameters() {
        *out.entry(n.split('.').next().unwrap_or_default().to_string()).or_insert(0) += t.numel();
    }
    out
}
