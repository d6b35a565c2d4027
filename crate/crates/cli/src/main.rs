//! `mnmt`: command-line driver for the language-tag strategy experiments.
//!
//! Exit status: 0 success, 1 invalid input or configuration, 2 a stage failed.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mnmt_core::corpus::read_family;
use mnmt_core::decoding::translate_corpus;
use mnmt_core::model::{load_checkpoint, save_checkpoint, ModelState};
use mnmt_core::runner::{self, compare_strategies, stages, write_atomic, ExperimentConfig, RunError, RunManifest};
use mnmt_core::tokenizer::Tokenizer;
use mnmt_core::{Error, LangCode, LtStrategy};

#[derive(Parser)]
#[command(name = "mnmt", version, about = "Multilingual NMT language-tag strategy laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults to the built-in desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed for this step.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// T-ENC, T-DEC, S-ENC-T-ENC or S-ENC-T-DEC.
    #[arg(long)]
    strategy: LtStrategy,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or copy) the corpus family into a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn the shared subword model from the training corpora.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write tagged training and dev files for one strategy.
    Tag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        strategy: LtStrategy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a tagged directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tagged: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Checkpoint path; the training log goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate lines from a file (or stdin).
    Translate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        src: LangCode,
        #[arg(long)]
        tgt: LangCode,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output file (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Let the model predict the decoder-side target tag.
        #[arg(long)]
        free_tlt: bool,
    },
    /// Score every test direction and write a report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        free_tlt: bool,
    },
    /// Export similarity curves, 2-D point sets and an attention trace.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) the whole pipeline for every configured strategy.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Table of supervised BLEU, zero-shot BLEU and off-target rate across runs.
    Compare {
        /// Run directories or manifest files (at least two).
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.training.seed = s;
    }
    Ok(cfg)
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn io_err(path: &Path, e: io::Error) -> Error {
    RunError::io(path, e).into()
}

fn load_model(m: &ModelArgs) -> Result<(Tokenizer, ModelState<f32>), Error> {
    Ok((Tokenizer::load(&m.tokenizer)?, load_checkpoint(&m.checkpoint)?))
}

fn execute(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenData { common, out } => {
            let mut cfg = config(&common)?;
            if let (Some(s), runner::DataConfig::Synthetic { family }) = (common.seed, &mut cfg.data) {
                family.lexicon_seed = s;
            }
            let fam = stages::prepare_data(&cfg.data, &out)?;
            progress(&format!(
                "{} languages, {} test rows -> {}",
                fam.languages().len(),
                fam.test.rows.len(),
                out.display()
            ));
        }
        Cmd::TrainTokenizer { common, data, out } => {
            let cfg = config(&common)?;
            let tok = stages::train_tokenizer(&read_family(&data)?, &cfg.tokenizer)?;
            write_atomic(&out, tok.to_text().as_bytes())?;
            progress(&format!("vocabulary {} -> {}", tok.vocab_size(), out.display()));
        }
        Cmd::Tag { common, data, strategy, out } => {
            let cfg = config(&common)?;
            stages::tag_corpora(&read_family(&data)?, strategy, cfg.training.seed, &out)?;
        }
        Cmd::Train { common, tagged, tokenizer, out } => {
            let cfg = config(&common)?;
            let tok = Tokenizer::load(&tokenizer)?;
            let train = stages::read_tagged(&tok, &tagged, "train")?;
            let dev = stages::read_tagged(&tok, &tagged, "dev")?;
            let model = cfg.model.with_vocab(tok.vocab_size());
            let (state, log) = stages::train_model(model, &cfg.training, &train, &dev, &mut progress)?;
            save_checkpoint(&state, &out)?;
            write_atomic(&out.with_extension("log.json"), log.to_json().as_bytes())?;
        }
        Cmd::Translate { common, model, src, tgt, input, out, free_tlt } => {
            let cfg = config(&common)?;
            let (tok, state) = load_model(&model)?;
            let lines: Vec<String> = match &input {
                Some(p) => fs::read_to_string(p).map_err(|e| io_err(p, e))?.lines().map(str::to_string).collect(),
                None => {
                    io::stdin().lock().lines().collect::<Result<_, _>>().map_err(|e| io_err(Path::new("<stdin>"), e))?
                }
            };
            let mut decode = cfg.decoding.clone();
            decode.free_tlt |= free_tlt;
            let hyps = translate_corpus(&state, &tok, model.strategy, &src, &tgt, &lines, &decode)?;
            let text: String = hyps.iter().map(|h| h.text.clone() + "\n").collect();
            match out {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => io::stdout().write_all(text.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e))?,
            }
        }
        Cmd::Evaluate { common, model, data, out, free_tlt } => {
            let cfg = config(&common)?;
            let (tok, state) = load_model(&model)?;
            let family = read_family(&data)?;
            let langid = stages::train_langid_model(&family, &cfg.evaluation)?;
            let mut decode = cfg.decoding.clone();
            decode.free_tlt |= free_tlt;
            let rep = stages::evaluate(&state, &tok, model.strategy, &family, &langid, &decode, &cfg.evaluation)?;
            write_atomic(&out, rep.to_json().as_bytes())?;
            let a = &rep.aggregate;
            progress(&format!(
                "{}: supervised {:.2}  zero-shot {:.2}  off-target {:.2}%",
                model.strategy, a.supervised_bleu, a.zero_shot_bleu, a.off_target_pct
            ));
        }
        Cmd::Analyze { common, model, data, out } => {
            let mut cfg = config(&common)?;
            if let Some(s) = common.seed {
                cfg.analysis.reduce_seed = s;
            }
            let (tok, state) = load_model(&model)?;
            let family = read_family(&data)?;
            let outputs = stages::analyze(&state, &tok, model.strategy, &family, &cfg.decoding, &cfg.analysis)?;
            for p in mnmt_core::analysis::export_analysis(&outputs, &out)? {
                progress(&p.display().to_string());
            }
        }
        Cmd::Run { common, out } => {
            let mut cfg = config(&common)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let summary = runner::run(&cfg, &mut progress)?;
            progress(&format!("manifest content hash {}", summary.manifest.content_hash()));
            let table = fs::read_to_string(cfg.output_dir.join(runner::COMPARISON_FILE))
                .map_err(|e| io_err(&cfg.output_dir, e))?;
            print!("{table}");
        }
        Cmd::Compare { manifests, out } => {
            let mut runs = Vec::new();
            for p in manifests {
                let m = RunManifest::load(&p)?;
                let root = if p.is_dir() { p } else { p.parent().map(Path::to_path_buf).unwrap_or_default() };
                runs.push((root, m));
            }
            let table = compare_strategies(&runs)?;
            print!("{}", table.render());
            if let Some(o) = out {
                write_atomic(&o, table.to_tsv().as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
