//! Experiment orchestration: study files, corpus and checkpoint preparation,
//! per-seed training runs and the aggregated report.

pub mod metrics;
pub mod train;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use metrics::{cer, edit_distance, median};
pub use train::{evaluate, feasible, train_asr, transcribe, TrainConfig, TrainLog};

use crate::checkpoint::Checkpoint;
use crate::encoder::{
    build_encoder, AsrEncoderConfig, AsrModel, EncoderForm, EncoderSpec, FreezePolicy, PretrainedAsrEncoder,
    StackFrontend, StackInit,
};
use crate::error::{PalError, Result};
use crate::features::synth::gen_homophone_corpus;
use crate::features::{gen_bigram_text, gen_corpus, SynthParams, SynthTaskSpec, Utterance};
use crate::lm::{perplexity, train_lm, LmTrainConfig, LmTrainLog};
use crate::nn::Module;
use crate::rng::Seed;
use crate::tensor::Real;
use crate::transformer::BlockConfig;

fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub task: SynthParams,
    /// Replace the task's chain by a uniform one (no repeats), keeping its
    /// templates: acoustically the same task without the label statistics.
    pub uniform_chain: bool,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub homophone: usize,
    pub len_range: (usize, usize),
    pub homophone_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            task: SynthParams::default(),
            uniform_chain: false,
            train: 4000,
            dev: 200,
            test: 400,
            homophone: 400,
            len_range: (3, 12),
            homophone_fraction: 0.4,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: SynthTaskSpec,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub homophone: Vec<Utterance>,
    pub fingerprint: String,
}

impl CorpusConfig {
    pub fn task_spec(&self) -> Result<SynthTaskSpec> {
        let mut spec = SynthTaskSpec::from_params(&self.task)?;
        if self.uniform_chain {
            let n = spec.symbols();
            let off = if self.task.allow_repeats { n } else { n - 1 };
            spec.transition = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| if i == j && !self.task.allow_repeats { 0.0 } else { 1.0 / off as f64 })
                        .collect()
                })
                .collect();
            spec.validate()?;
        }
        Ok(spec)
    }

    pub fn fingerprint(&self) -> Result<String> {
        let spec = self.task_spec()?;
        let mut bytes = spec.fingerprint().into_bytes();
        bytes.extend(serde_json::to_vec(self)?);
        Ok(digest(&bytes))
    }

    pub fn generate(&self) -> Result<Corpus> {
        let spec = self.task_spec()?;
        let seed = Seed(self.seed);
        let split = |name: &str, n: usize| -> Result<Vec<Utterance>> {
            if n == 0 {
                Ok(Vec::new())
            } else {
                gen_corpus(&spec, n, self.len_range, seed.split(name))
            }
        };
        let homophone = if self.homophone == 0 {
            Vec::new()
        } else {
            gen_homophone_corpus(&spec, self.homophone, self.len_range, self.homophone_fraction, seed.split("homophone"))?
        };
        Ok(Corpus {
            train: split("train", self.train)?,
            dev: split("dev", self.dev)?,
            test: split("test", self.test)?,
            homophone,
            fingerprint: self.fingerprint()?,
            spec,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmEntry {
    /// Corpus whose chain supplies the text.
    #[serde(default = "main_corpus")]
    pub corpus: String,
    /// Length of the training text stream.
    #[serde(default = "default_text_tokens")]
    pub text_tokens: usize,
    #[serde(default = "default_heldout_tokens")]
    pub heldout_tokens: usize,
    pub train: LmTrainConfig,
}

fn main_corpus() -> String {
    "main".into()
}

fn default_text_tokens() -> usize {
    200_000
}

fn default_heldout_tokens() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrEncoderEntry {
    pub corpus: String,
    pub block: BlockConfig,
    #[serde(default)]
    pub frontend: StackFrontend,
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    /// Convolutional frontend, adapter, optional stack.
    Conv,
    /// Pretrained speech encoder, adapter, stack.
    AsrStack,
    /// Pretrained speech encoder with its own head.
    AsrOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    /// Encoder description for the report table.
    #[serde(default)]
    pub label: String,
    pub model: ModelForm,
    #[serde(default = "no_stack")]
    pub stack_init: StackInit,
    /// Language model to transplant, or whose shape a random stack copies.
    #[serde(default)]
    pub lm: Option<String>,
    #[serde(default)]
    pub asr_encoder: Option<String>,
    #[serde(default)]
    pub freeze: FreezePolicy,
    #[serde(default)]
    pub dropout: Option<f64>,
    #[serde(default = "default_channels")]
    pub conv_channels: usize,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "main_corpus")]
    pub corpus: String,
}

fn no_stack() -> StackInit {
    StackInit::None
}

fn default_channels() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub name: String,
    pub corpora: BTreeMap<String, CorpusConfig>,
    #[serde(default)]
    pub lms: BTreeMap<String, LmEntry>,
    #[serde(default)]
    pub asr_encoders: BTreeMap<String, AsrEncoderEntry>,
    pub experiments: Vec<ExperimentConfig>,
}

fn study_err(msg: impl Into<String>) -> PalError {
    PalError::Study(msg.into())
}

impl Study {
    pub fn from_json(text: &str) -> Result<Self> {
        let study: Study = serde_json::from_str(text).map_err(|e| study_err(format!("study file: {e}")))?;
        study.validate()?;
        Ok(study)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path.as_ref()).map_err(|e| {
            PalError::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?)
    }

    pub fn experiment(&self, id: &str) -> Result<&ExperimentConfig> {
        self.experiments
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| study_err(format!("no experiment {id}")))
    }

    /// Checks every reference and policy without training anything.
    pub fn validate(&self) -> Result<()> {
        if self.experiments.is_empty() {
            return Err(study_err("study defines no experiments"));
        }
        for (name, c) in &self.corpora {
            c.task_spec().map_err(|e| study_err(format!("corpus {name}: {e}")))?;
            if c.len_range.0 == 0 || c.len_range.0 > c.len_range.1 {
                return Err(study_err(format!("corpus {name}: bad length range {:?}", c.len_range)));
            }
            if c.train == 0 {
                return Err(study_err(format!("corpus {name}: empty training split")));
            }
        }
        for (name, lm) in &self.lms {
            if !self.corpora.contains_key(&lm.corpus) {
                return Err(study_err(format!("lm {name}: unknown corpus {}", lm.corpus)));
            }
            lm.train.block.validate().map_err(|e| study_err(format!("lm {name}: {e}")))?;
            let symbols = self.corpora[&lm.corpus].task.vocab - 1;
            if lm.train.vocab != symbols {
                return Err(study_err(format!(
                    "lm {name}: vocabulary {} but corpus has {symbols} symbols",
                    lm.train.vocab
                )));
            }
        }
        for (name, a) in &self.asr_encoders {
            if !self.corpora.contains_key(&a.corpus) {
                return Err(study_err(format!("speech encoder {name}: unknown corpus {}", a.corpus)));
            }
            a.block.validate().map_err(|e| study_err(format!("speech encoder {name}: {e}")))?;
            a.frontend.validate()?;
        }
        let mut ids = std::collections::HashSet::new();
        for e in &self.experiments {
            let ctx = |m: &str| study_err(format!("experiment {}: {m}", e.id));
            if e.id.is_empty() || !ids.insert(e.id.clone()) {
                return Err(ctx("id missing or duplicated"));
            }
            if e.seeds.is_empty() {
                return Err(ctx("no seeds"));
            }
            let corpus = self.corpora.get(&e.corpus).ok_or_else(|| ctx(&format!("unknown corpus {}", e.corpus)))?;
            if let Some(lm) = &e.lm {
                if !self.lms.contains_key(lm) {
                    return Err(ctx(&format!("unknown lm {lm}")));
                }
            }
            if e.stack_init != StackInit::None && e.lm.is_none() {
                return Err(ctx("a stack needs an lm entry (transplant source or shape)"));
            }
            if e.model == ModelForm::AsrOnly && e.stack_init != StackInit::None {
                return Err(ctx("stand-alone speech encoder takes no stack"));
            }
            if e.model == ModelForm::AsrStack && e.stack_init == StackInit::None {
                return Err(ctx("stacked form needs a stack"));
            }
            match (&e.model, &e.asr_encoder) {
                (ModelForm::Conv, Some(_)) => return Err(ctx("convolutional form takes no speech encoder")),
                (ModelForm::AsrStack | ModelForm::AsrOnly, None) => return Err(ctx("needs a speech encoder")),
                (_, Some(a)) => {
                    let entry = self.asr_encoders.get(a).ok_or_else(|| ctx(&format!("unknown speech encoder {a}")))?;
                    let src = &self.corpora[&entry.corpus].task;
                    if src.vocab != corpus.task.vocab || src.dim != corpus.task.dim {
                        return Err(ctx("speech encoder and corpus disagree on vocabulary or feature size"));
                    }
                }
                _ => {}
            }
            if e.freeze.freeze_stack && e.stack_init == StackInit::None {
                return Err(ctx("freeze_stack without a stack"));
            }
            if e.freeze.freeze_asr_encoder && e.model == ModelForm::Conv {
                return Err(ctx("freeze_asr_encoder without a speech encoder"));
            }
            if let Some(d) = e.dropout {
                if !(0.0..1.0).contains(&d) {
                    return Err(ctx("dropout outside [0, 1)"));
                }
            }
            if e.train.batch == 0 {
                return Err(ctx("batch size must be positive"));
            }
        }
        Ok(())
    }
}

/// Trained language model plus its held-out statistics.
#[derive(Debug, Clone)]
pub struct LmArtifact {
    pub checkpoint: Checkpoint,
    pub log: LmTrainLog,
    pub heldout_perplexity: f64,
    /// exp of the chain's entropy rate.
    pub bigram_floor: f64,
    /// exp of the stationary unigram entropy.
    pub unigram_baseline: f64,
}

#[derive(Debug, Clone)]
pub struct AsrArtifact {
    pub checkpoint: Checkpoint,
    pub dev_cer: f64,
}

/// Everything shared by the experiments of a study.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub corpora: BTreeMap<String, Corpus>,
    pub lms: BTreeMap<String, LmArtifact>,
    pub asr: BTreeMap<String, AsrArtifact>,
}

fn cached(path: &Option<PathBuf>, source: &serde_json::Value) -> Option<Checkpoint> {
    let p = path.as_ref()?;
    let ckpt = Checkpoint::load(p).ok()?;
    (ckpt.meta.info.get("source") == Some(source)).then_some(ckpt)
}

/// Generates corpora and trains (or reloads from `out`) the language models
/// and speech encoders the study references.
pub fn prepare<F: Real>(study: &Study, out: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<Artifacts> {
    let mut art = Artifacts::default();
    for (name, c) in &study.corpora {
        art.corpora.insert(name.clone(), c.generate()?);
        log(&format!("corpus {name}: {} train utterances", c.train));
    }
    for (name, entry) in &study.lms {
        art.lms.insert(name.clone(), prepare_lm::<F>(name, entry, &art.corpora[&entry.corpus], out, log)?);
    }
    for (name, entry) in &study.asr_encoders {
        art.asr.insert(name.clone(), prepare_asr::<F>(name, entry, &art.corpora[&entry.corpus], out, log)?);
    }
    Ok(art)
}

/// Training and held-out text for a language model.
pub fn lm_texts(entry: &LmEntry, spec: &SynthTaskSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let seed = Seed(entry.train.seed);
    Ok((
        gen_bigram_text(spec, entry.text_tokens, seed.split("text"))?,
        gen_bigram_text(spec, entry.heldout_tokens, seed.split("heldout"))?,
    ))
}

pub fn prepare_lm<F: Real>(
    name: &str,
    entry: &LmEntry,
    corpus: &Corpus,
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<LmArtifact> {
    let source = serde_json::json!({ "lm": entry, "task": corpus.spec.fingerprint() });
    let path = out.map(|o| o.join(format!("lm_{name}.ckpt")));
    let (text, heldout) = lm_texts(entry, &corpus.spec)?;
    let checkpoint = match cached(&path, &source) {
        Some(c) => {
            log(&format!("lm {name}: reusing {}", path.as_ref().expect("cached implies path").display()));
            c
        }
        None => {
            let started = Instant::now();
            let mut run = train_lm::<F>(&text, &heldout, &entry.train)?;
            run.checkpoint.meta.info.insert("source".into(), source);
            if let Some(p) = &path {
                run.checkpoint.save(p)?;
            }
            log(&format!("lm {name}: trained in {:.1}s", started.elapsed().as_secs_f64()));
            run.checkpoint
        }
    };
    let model = crate::lm::LmModel::<F>::from_checkpoint(&checkpoint)?;
    let log_entry: LmTrainLog = LmTrainLog {
        train_loss: serde_json::from_value(checkpoint.meta.info["loss_curve"].clone())?,
        eval_loss: serde_json::from_value(checkpoint.meta.info["eval_curve"].clone())?,
    };
    Ok(LmArtifact {
        heldout_perplexity: perplexity(&model, &heldout, entry.train.context)?,
        bigram_floor: corpus.spec.bigram_entropy().exp(),
        unigram_baseline: corpus.spec.unigram_entropy().exp(),
        log: log_entry,
        checkpoint,
    })
}

pub fn prepare_asr<F: Real>(
    name: &str,
    entry: &AsrEncoderEntry,
    corpus: &Corpus,
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<AsrArtifact> {
    let source = serde_json::json!({ "asr": entry, "corpus": corpus.fingerprint });
    let path = out.map(|o| o.join(format!("asr_{name}.ckpt")));
    let checkpoint = match cached(&path, &source) {
        Some(c) => {
            log(&format!("speech encoder {name}: reusing cached checkpoint"));
            c
        }
        None => {
            let started = Instant::now();
            let config = AsrEncoderConfig {
                feature_dim: corpus.spec.dim,
                vocab: corpus.spec.vocab,
                frontend: entry.frontend,
                block: entry.block.clone(),
            };
            let mut enc = PretrainedAsrEncoder::<F>::random(config, Seed(entry.seed).split("init"))?;
            enc.fingerprint = Some(corpus.fingerprint.clone());
            let model = AsrModel::Standalone(enc);
            train_asr(&model, &corpus.train, &corpus.dev, &entry.train, Seed(entry.seed))?;
            let mut c = model.to_checkpoint();
            c.meta.info.insert("source".into(), source);
            if let Some(p) = &path {
                c.save(p)?;
            }
            log(&format!("speech encoder {name}: trained in {:.1}s", started.elapsed().as_secs_f64()));
            c
        }
    };
    let model = AsrModel::<F>::from_checkpoint(&checkpoint)?;
    Ok(AsrArtifact {
        dev_cer: evaluate(&model, &corpus.dev)?,
        checkpoint,
    })
}

/// Builds the untrained model of one experiment.
pub fn build_model<F: Real>(exp: &ExperimentConfig, art: &Artifacts, seed: Seed) -> Result<AsrModel<F>> {
    let corpus = art
        .corpora
        .get(&exp.corpus)
        .ok_or_else(|| PalError::Config(format!("corpus {} not prepared", exp.corpus)))?;
    let lm = match &exp.lm {
        Some(name) => Some(
            art.lms
                .get(name)
                .ok_or_else(|| PalError::Config(format!("lm checkpoint {name} missing")))?,
        ),
        None => None,
    };
    let asr = match &exp.asr_encoder {
        Some(name) => Some(
            art.asr
                .get(name)
                .ok_or_else(|| PalError::Config(format!("speech-encoder checkpoint {name} missing")))?,
        ),
        None => None,
    };
    if exp.model == ModelForm::AsrOnly {
        let model = AsrModel::from_checkpoint(&asr.expect("validated").checkpoint)?;
        model.apply_freeze(&exp.freeze)?;
        return Ok(model);
    }
    let spec = EncoderSpec {
        form: match exp.model {
            ModelForm::Conv => EncoderForm::Conv,
            _ => EncoderForm::AsrStack,
        },
        stack_init: exp.stack_init,
        feature_dim: corpus.spec.dim,
        vocab: corpus.spec.vocab,
        conv_channels: exp.conv_channels,
        block: lm.and_then(|l| l.checkpoint.meta.block_config.clone()),
        dropout: exp.dropout,
        freeze: exp.freeze.clone(),
    };
    Ok(AsrModel::Assembled(build_encoder(
        &spec,
        lm.map(|l| &l.checkpoint),
        asr.map(|a| &a.checkpoint),
        seed.split("init"),
    )?))
}

/// One (experiment, seed) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub exp_id: String,
    pub seed: u64,
    pub dev_cer: f64,
    pub test_cer: f64,
    pub homophone_cer: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub skipped: usize,
    pub wall_s: f64,
}

impl RunRecord {
    /// Equality ignoring wall time.
    pub fn same_result(&self, other: &RunRecord) -> bool {
        RunRecord { wall_s: 0.0, ..self.clone() } == RunRecord { wall_s: 0.0, ..other.clone() }
    }
}

pub struct RunOutput<F: Real> {
    pub record: RunRecord,
    pub model: AsrModel<F>,
    pub log: TrainLog,
}

pub fn run_experiment<F: Real>(exp: &ExperimentConfig, seed: u64, art: &Artifacts) -> Result<RunOutput<F>> {
    let started = Instant::now();
    let corpus = &art.corpora[&exp.corpus];
    let model = build_model::<F>(exp, art, Seed(seed))?;
    let log = train_asr(&model, &corpus.train, &corpus.dev, &exp.train, Seed(seed))?;
    let record = RunRecord {
        exp_id: exp.id.clone(),
        seed,
        dev_cer: evaluate(&model, &corpus.dev)?,
        test_cer: evaluate(&model, &corpus.test)?,
        homophone_cer: if corpus.homophone.is_empty() {
            None
        } else {
            Some(evaluate(&model, &corpus.homophone)?)
        },
        trainable_params: model.trainable_parameter_count(),
        total_params: model.parameter_count(),
        skipped: log.skipped,
        wall_s: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { record, model, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub exp_id: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub name: String,
    pub rows: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub incomplete: bool,
}

impl StudyReport {
    pub fn rows_for(&self, exp_id: &str) -> Vec<&RunRecord> {
        self.rows.iter().filter(|r| r.exp_id == exp_id).collect()
    }

    /// Median of `metric` over the rows of `exp_id` whose seed is in `seeds`
    /// (all seeds when `None`).
    pub fn median_of(&self, exp_id: &str, seeds: Option<&[u64]>, metric: impl Fn(&RunRecord) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows_for(exp_id)
            .into_iter()
            .filter(|r| seeds.is_none_or(|s| s.contains(&r.seed)))
            .map(metric)
            .collect();
        (!vals.is_empty()).then(|| median(&vals))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("exp_id,seed,split,cer,trainable_params,total_params,skipped,wall_s\n");
        for r in &self.rows {
            let splits = [("dev", Some(r.dev_cer)), ("test", Some(r.test_cer)), ("homophone", r.homophone_cer)];
            for (split, c) in splits {
                if let Some(c) = c {
                    let _ = writeln!(
                        s,
                        "{},{},{},{:.4},{},{},{},{:.3}",
                        r.exp_id, r.seed, split, c, r.trainable_params, r.total_params, r.skipped, r.wall_s
                    );
                }
            }
        }
        s
    }

    pub fn to_markdown(&self, study: &Study) -> String {
        let mut s = format!("# {}\n\n", study.name);
        if self.incomplete {
            s.push_str("**Incomplete:** some runs failed (listed below).\n\n");
        }
        s.push_str("| Exp ID | Encoder | Freeze | Trainable/Total | Seed | Dev/Test CER | Homophone CER |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for exp in &study.experiments {
            let rows = self.rows_for(&exp.id);
            if rows.is_empty() {
                continue;
            }
            let freeze = exp.freeze.label();
            let params = format!("{} / {}", human(rows[0].trainable_params), human(rows[0].total_params));
            let hom = |v: Option<f64>| v.map_or("-".to_string(), |c| format!("{c:.2}"));
            for r in &rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {:.2} / {:.2} | {} |",
                    exp.id, exp.label, freeze, params, r.seed, r.dev_cer, r.test_cer, hom(r.homophone_cer)
                );
            }
            let med = |f: &dyn Fn(&RunRecord) -> f64| self.median_of(&exp.id, None, f).unwrap_or(f64::NAN);
            let hom_med = rows.iter().all(|r| r.homophone_cer.is_some()).then(|| med(&|r| r.homophone_cer.unwrap()));
            let _ = writeln!(
                s,
                "| **{}** | {} | {} | {} | median | **{:.2} / {:.2}** | {} |",
                exp.id,
                exp.label,
                freeze,
                params,
                med(&|r| r.dev_cer),
                med(&|r| r.test_cer),
                hom(hom_med)
            );
        }
        if !self.failures.is_empty() {
            s.push_str("\n## Failed runs\n\n");
            for f in &self.failures {
                let _ = writeln!(s, "- {} seed {}: {}", f.exp_id, f.seed, f.error);
            }
        }
        s
    }
}

fn human(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.2}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}k", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

/// Runs every (experiment, seed) pair. A failing run is recorded and the
/// report marked incomplete; the remaining runs still execute. Reports are
/// written to `out` as `report.md` and `report.csv`.
pub fn run_study<F: Real>(study: &Study, out: &Path, log: &mut dyn FnMut(&str)) -> Result<StudyReport> {
    study.validate()?;
    std::fs::create_dir_all(out)?;
    let art = prepare::<F>(study, Some(out), log)?;
    let mut report = StudyReport {
        name: study.name.clone(),
        rows: Vec::new(),
        failures: Vec::new(),
        incomplete: false,
    };
    for exp in &study.experiments {
        for &seed in &exp.seeds {
            match run_experiment::<F>(exp, seed, &art) {
                Ok(run) => {
                    log(&format!(
                        "{} seed {seed}: dev {:.2} test {:.2} ({:.0}s)",
                        exp.id, run.record.dev_cer, run.record.test_cer, run.record.wall_s
                    ));
                    report.rows.push(run.record);
                }
                Err(e) => {
                    log(&format!("{} seed {seed} failed: {e}", exp.id));
                    report.failures.push(RunFailure {
                        exp_id: exp.id.clone(),
                        seed,
                        error: e.to_string(),
                    });
                    report.incomplete = true;
                }
            }
        }
    }
    write_report(study, &report, out)?;
    Ok(report)
}

pub fn write_report(study: &Study, report: &StudyReport, out: &Path) -> Result<()> {
    std::fs::write(out.join("report.md"), report.to_markdown(study))?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::MaskMode;

    fn tiny_block() -> BlockConfig {
        BlockConfig {
            d_model: 16,
            n_head: 2,
            d_ff: 32,
            n_layer: 1,
            dropout: 0.0,
            rope_base: 10000.0,
            mask_mode: MaskMode::Causal,
        }
    }

    fn tiny_study() -> Study {
        let corpus = CorpusConfig {
            task: SynthParams {
                dim: 8,
                noise: 0.3,
                ..SynthParams::default()
            },
            train: 24,
            dev: 6,
            test: 6,
            homophone: 4,
            len_range: (2, 4),
            ..CorpusConfig::default()
        };
        let lm = LmEntry {
            corpus: "main".into(),
            text_tokens: 2000,
            heldout_tokens: 200,
            train: LmTrainConfig {
                block: tiny_block(),
                tokens: 4 * 4 * 16,
                batch: 4,
                context: 16,
                lr: 1e-3,
                warmup: 1,
                eval_every: 2,
                ..LmTrainConfig::default()
            },
        };
        let train = TrainConfig {
            epochs: 2,
            batch: 4,
            warmup: 2,
            ..TrainConfig::default()
        };
        Study {
            name: "tiny".into(),
            corpora: BTreeMap::from([("main".into(), corpus)]),
            lms: BTreeMap::from([("small".into(), lm)]),
            asr_encoders: BTreeMap::new(),
            experiments: vec![ExperimentConfig {
                id: "exp3".into(),
                label: "frozen transplant".into(),
                model: ModelForm::Conv,
                stack_init: StackInit::Transplant,
                lm: Some("small".into()),
                asr_encoder: None,
                freeze: FreezePolicy::freeze_stack(),
                dropout: None,
                conv_channels: 8,
                train,
                seeds: vec![1, 2, 3],
                corpus: "main".into(),
            }],
        }
    }

    #[test]
    fn empty_study_is_rejected() {
        let mut s = tiny_study();
        s.experiments.clear();
        assert!(matches!(s.validate(), Err(PalError::Study(_))));
        assert!(Study::from_json(&serde_json::to_string(&s).unwrap()).is_err());
    }

    #[test]
    fn bad_references_are_rejected() {
        let mut s = tiny_study();
        s.experiments[0].lm = Some("huge".into());
        assert!(s.validate().is_err());
        let mut s = tiny_study();
        s.experiments[0].stack_init = StackInit::None;
        assert!(s.validate().is_err(), "freeze_stack without a stack");
        let mut s = tiny_study();
        s.experiments.push(s.experiments[0].clone());
        assert!(s.validate().is_err(), "duplicate id");
    }

    #[test]
    fn study_json_round_trip() {
        let s = tiny_study();
        let text = serde_json::to_string_pretty(&s).unwrap();
        assert_eq!(Study::from_json(&text).unwrap(), s);
    }

    #[test]
    fn one_experiment_three_seeds() {
        let s = tiny_study();
        let dir = tempfile::tempdir().unwrap();
        let report = run_study::<f32>(&s, dir.path(), &mut |_| {}).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(!report.incomplete);
        let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert_eq!(md.lines().filter(|l| l.starts_with("| exp3 ")).count(), 3);
        assert_eq!(md.lines().filter(|l| l.starts_with("| **exp3**")).count(), 1);
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "exp_id,seed,split,cer,trainable_params,total_params,skipped,wall_s");
        assert_eq!(csv.lines().count(), 1 + 9);

        // Trainable counts follow the freeze policy.
        let r = &report.rows[0];
        assert!(r.trainable_params < r.total_params);
        let art = prepare::<f32>(&s, Some(dir.path()), &mut |_| {}).unwrap();
        let model = build_model::<f32>(&s.experiments[0], &art, Seed(1)).unwrap();
        let stack: usize = model
            .named_parameters()
            .iter()
            .filter(|(n, _)| n.starts_with("stack."))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(r.total_params - r.trainable_params, stack);
    }

    #[test]
    fn runs_are_reproducible() {
        let s = tiny_study();
        let art = prepare::<f32>(&s, None, &mut |_| {}).unwrap();
        let a = run_experiment::<f32>(&s.experiments[0], 2, &art).unwrap();
        let b = run_experiment::<f32>(&s.experiments[0], 2, &art).unwrap();
        assert!(a.record.same_result(&b.record));
        assert_eq!(a.model.to_checkpoint().to_bytes(), b.model.to_checkpoint().to_bytes());
    }

    #[test]
    fn failures_mark_the_report_incomplete() {
        let mut s = tiny_study();
        s.experiments[0].train.lr = f64::NAN;
        s.experiments[0].seeds = vec![1];
        s.experiments[0].freeze = FreezePolicy::none();
        let dir = tempfile::tempdir().unwrap();
        let report = run_study::<f32>(&s, dir.path(), &mut |_| {}).unwrap();
        assert!(report.incomplete);
        assert_eq!(report.failures.len(), 1);
        assert!(std::fs::read_to_string(dir.path().join("report.md")).unwrap().contains("Incomplete"));
    }

    #[test]
    fn skipped_counter_matches_infeasible_items() {
        let s = tiny_study();
        let mut art = prepare::<f32>(&s, None, &mut |_| {}).unwrap();
        // Squeeze some utterances below their alignment length.
        for u in art.corpora.get_mut("main").unwrap().train.iter_mut().take(5) {
            let keep = 4 * u.labels.len() - 7;
            u.features = crate::features::FeatureSequence::new(u.features.frames[..keep * 8].to_vec(), keep, 8).unwrap();
        }
        let model = build_model::<f32>(&s.experiments[0], &art, Seed(1)).unwrap();
        let corpus = &art.corpora["main"];
        let expected = corpus.train.iter().filter(|u| !feasible(&model, u)).count();
        assert!(expected > 0);
        let log = train_asr(&model, &corpus.train, &corpus.dev, &s.experiments[0].train, Seed(1)).unwrap();
        assert_eq!(log.skipped, expected);
    }
}
