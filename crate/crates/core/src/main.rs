use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pal_core::checkpoint::Checkpoint;
use pal_core::encoder::AsrModel;
use pal_core::features::corpus::{load_corpus, save_corpus};
use pal_core::study::{self, evaluate, run_experiment, Study};
use pal_core::{PalError, Precision, Real, Result};

#[derive(Parser)]
#[command(name = "pal", version, about = "Language-model layers as a CTC speech encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpora of a study and write them as archives.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every corpus seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the language models of a study.
    TrainLm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every language-model seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Train one experiment of a study for one seed and save the model.
    TrainAsr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        exp: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Greedy-decode a corpus archive and print its CER.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Run every experiment and seed of a study and write the report.
    RunStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate the study file only.
        #[arg(long)]
        dry_run: bool,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// List the tensors and metadata of a checkpoint.
    InspectCkpt { path: PathBuf },
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let study = Study::load(config)?;
    std::fs::create_dir_all(out)?;
    for (name, c) in &study.corpora {
        let mut c = c.clone();
        if let Some(s) = seed {
            c.seed = s;
        }
        let corpus = c.generate()?;
        let (v, d) = (corpus.spec.vocab, corpus.spec.dim);
        for (split, utts) in [
            ("train", &corpus.train),
            ("dev", &corpus.dev),
            ("test", &corpus.test),
            ("homophone", &corpus.homophone),
        ] {
            save_corpus(out.join(format!("{name}_{split}.corp")), v, d, utts)?;
        }
        std::fs::write(out.join(format!("{name}_task.json")), serde_json::to_string_pretty(&corpus.spec)?)?;
        println!("{name}: {} train, {} dev, {} test, {} homophone", corpus.train.len(), corpus.dev.len(), corpus.test.len(), corpus.homophone.len());
    }
    Ok(())
}

fn train_lms<F: Real>(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let study = Study::load(config)?;
    std::fs::create_dir_all(out)?;
    for (name, entry) in &study.lms {
        let mut entry = entry.clone();
        if let Some(s) = seed {
            entry.train.seed = s;
        }
        let corpus = study.corpora[&entry.corpus].generate()?;
        let lm = study::prepare_lm::<F>(name, &entry, &corpus, Some(out), &mut progress)?;
        println!(
            "{name}: held-out perplexity {:.3} (bigram floor {:.3}, unigram {:.3})",
            lm.heldout_perplexity, lm.bigram_floor, lm.unigram_baseline
        );
    }
    Ok(())
}

fn train_asr<F: Real>(config: &Path, exp: &str, seed: u64, out: &Path) -> Result<()> {
    let study = Study::load(config)?;
    let exp = study.experiment(exp)?;
    std::fs::create_dir_all(out)?;
    let art = study::prepare::<F>(&study, Some(out), &mut progress)?;
    let run = run_experiment::<F>(exp, seed, &art)?;
    let path = out.join(format!("{}_seed{seed}.ckpt", exp.id));
    run.model.to_checkpoint().save(&path)?;
    println!("{}", serde_json::to_string(&run.record)?);
    println!("saved {}", path.display());
    Ok(())
}

fn eval<F: Real>(ckpt: &Path, corpus: &Path) -> Result<()> {
    let model = AsrModel::<F>::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let (vocab, dim, utts) = load_corpus(corpus)?;
    if vocab != model.vocab() || dim != model.feature_dim() {
        return Err(PalError::Input(format!(
            "corpus has vocab {vocab} and {dim}-dim features, model expects vocab {} and {}-dim features",
            model.vocab(),
            model.feature_dim()
        )));
    }
    println!("cer {:.4} over {} utterances", evaluate(&model, &utts)?, utts.len());
    Ok(())
}

fn run_study<F: Real>(config: &Path, out: Option<&Path>, dry_run: bool) -> Result<()> {
    let study = Study::load(config)?;
    if dry_run {
        let runs: usize = study.experiments.iter().map(|e| e.seeds.len()).sum();
        println!("{}: valid, {} experiments, {runs} runs", study.name, study.experiments.len());
        return Ok(());
    }
    let out = out.ok_or_else(|| PalError::Config("--out is required unless --dry-run".into()))?;
    let report = study::run_study::<F>(&study, out, &mut progress)?;
    print!("{}", report.to_markdown(&study));
    if report.incomplete {
        return Err(PalError::Study(format!("{} runs failed", report.failures.len())));
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    macro_rules! by_precision {
        ($p:expr, $f:ident($($arg:expr),*)) => {
            match $p {
                Precision::F32 => $f::<f32>($($arg),*),
                Precision::F64 => $f::<f64>($($arg),*),
            }
        };
    }
    match cmd {
        Command::GenData { config, out, seed } => gen_data(&config, &out, seed),
        Command::TrainLm { config, out, seed, precision } => by_precision!(precision, train_lms(&config, &out, seed)),
        Command::TrainAsr { config, exp, seed, out, precision } => {
            by_precision!(precision, train_asr(&config, &exp, seed, &out))
        }
        Command::Eval { ckpt, corpus, precision } => by_precision!(precision, eval(&ckpt, &corpus)),
        Command::RunStudy { config, out, dry_run, precision } => {
            by_precision!(precision, run_study(&config, out.as_deref(), dry_run))
        }
        Command::InspectCkpt { path } => {
            print!("{}", Checkpoint::load(&path)?.describe());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
