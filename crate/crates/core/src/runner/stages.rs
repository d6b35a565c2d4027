//! Individual pipeline stages over explicit paths. `run` chains them; the CLI
//! subcommands call them one at a time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{AnalysisConfig, DataConfig, EvalConfig, TokenizerConfig, TrainingConfig};
use super::RunError;
use crate::analysis::{
    encoder_vectors, extract_tlt_attention, layerwise_similarity, reduce_2d, AnalysisOutputs, Setting,
};
use crate::corpus::{
    build_training_mixture, generate_synthetic_family, read_family, write_family, LangCode, SyntheticFamily,
};
use crate::decoding::DecodeConfig;
use crate::eval::{evaluate_all_directions, pivot_directions, train_langid, EvalReport, EvalSetup, LangIdModel};
use crate::model::{token_budget_batches, train_step, Batch, Example, ModelState, Optimizer, TransformerConfig};
use crate::tagging::{apply_strategy, is_tag_token, LtStrategy};
use crate::tokenizer::{train_subwords, Tokenizer};

/// Independent stream from one user seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.rotate_left(48) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_INIT: u64 = 1;
const SEED_BATCHES: u64 = 2;
const SEED_DROPOUT: u64 = 3;
const SEED_MIXTURE: u64 = 4;

/// Generates or reads the family.
pub fn load_data(cfg: &DataConfig) -> Result<SyntheticFamily, RunError> {
    Ok(match cfg {
        DataConfig::Synthetic { family } => generate_synthetic_family(family)?,
        DataConfig::Directory { path } => read_family(path)?,
    })
}

/// Writes the family into `dir` and returns it.
pub fn prepare_data(cfg: &DataConfig, dir: &Path) -> Result<SyntheticFamily, RunError> {
    let family = load_data(cfg)?;
    write_family(&family, dir)?;
    Ok(family)
}

/// Subword model over both sides of every training corpus, with all language
/// tags protected.
pub fn train_tokenizer(family: &SyntheticFamily, cfg: &TokenizerConfig) -> Result<Tokenizer, RunError> {
    let tags: Vec<String> = family.languages().iter().map(crate::tagging::tag_token).collect();
    let text =
        family.train.iter().flat_map(|c| c.pairs.iter().flat_map(|p| [p.src_text.as_str(), p.tgt_text.as_str()]));
    Ok(train_subwords(text, cfg.num_merges, cfg.vocab_cap, &tags)?)
}

pub fn train_langid_model(family: &SyntheticFamily, cfg: &EvalConfig) -> Result<LangIdModel, RunError> {
    Ok(train_langid(&family.monolingual, family.languages(), cfg.langid_smoothing)?)
}

pub const TAGGED_SPLITS: [&str; 2] = ["train", "dev"];

/// Writes `<split>.src` / `<split>.tgt` with the strategy's tags rendered in
/// front of each sentence. Both directions of every pivot corpus are included.
pub fn tag_corpora(
    family: &SyntheticFamily,
    strategy: LtStrategy,
    seed: u64,
    dir: &Path,
) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    let mut written = Vec::new();
    for (split, corpora) in [("train", &family.train), ("dev", &family.dev)] {
        let mixture = build_training_mixture(corpora, family.pivot(), derive_seed(seed, SEED_MIXTURE, 0))?;
        let (mut src, mut tgt) = (String::new(), String::new());
        for pair in &mixture {
            let t = apply_strategy(pair, strategy);
            src.push_str(&t.src_rendered());
            src.push('\n');
            tgt.push_str(&t.tgt_rendered());
            tgt.push('\n');
        }
        for (ext, body) in [("src", src), ("tgt", tgt)] {
            let path = dir.join(format!("{split}.{ext}"));
            fs::write(&path, body).map_err(|e| RunError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn encode_tagged(tok: &Tokenizer, line: &str) -> Vec<u32> {
    let mut tags = Vec::new();
    let mut rest = line;
    while let Some((head, tail)) = rest.split_once(' ') {
        if !is_tag_token(head) {
            break;
        }
        tags.push(head.to_string());
        rest = tail;
    }
    tok.encode(rest, &tags)
}

/// Reads one tagged split back as model examples.
pub fn read_tagged(tok: &Tokenizer, dir: &Path, split: &str) -> Result<Vec<Example>, RunError> {
    let read = |ext: &str| {
        let path = dir.join(format!("{split}.{ext}"));
        fs::read_to_string(&path).map_err(|e| RunError::io(&path, e))
    };
    let (src, tgt) = (read("src")?, read("tgt")?);
    let (src, tgt): (Vec<&str>, Vec<&str>) = (src.lines().collect(), tgt.lines().collect());
    if src.len() != tgt.len() {
        return Err(RunError::Invalid(format!(
            "{}: {} source lines but {} target lines",
            dir.join(split).display(),
            src.len(),
            tgt.len()
        )));
    }
    Ok(src.iter().zip(&tgt).map(|(s, t)| Example { src: encode_tagged(tok, s), tgt: encode_tagged(tok, t) }).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub examples: usize,
    /// Examples dropped for exceeding `max_positions`.
    pub skipped_too_long: usize,
    pub parameters: usize,
    /// `(step, mean training loss over the preceding window)`.
    pub train_loss: Vec<(u64, f64)>,
    /// `(step, token-weighted dev loss)`.
    pub dev_loss: Vec<(u64, f64)>,
    pub epochs_started: u64,
}

impl TrainLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes") + "\n"
    }
}

fn fits(e: &Example, max: usize) -> bool {
    e.src_len() <= max && e.tgt_len() <= max
}

/// Token-weighted mean loss without dropout.
pub fn dev_loss(state: &ModelState<f32>, batches: &[Batch], smoothing: f64) -> Result<f64, RunError> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for b in batches {
        let n = b.target_tokens();
        total += state.loss_at(state.params(), b, smoothing, None)? * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 { f64::NAN } else { total / tokens as f64 })
}

/// Trains from scratch for exactly `cfg.steps` updates, cycling reshuffled
/// epochs. Dev loss is only recorded; it never stops training early.
pub fn train_model(
    model: TransformerConfig,
    cfg: &TrainingConfig,
    train: &[Example],
    dev: &[Example],
    progress: &mut dyn FnMut(&str),
) -> Result<(ModelState<f32>, TrainLog), RunError> {
    let max = model.max_positions;
    let kept: Vec<Example> = train.iter().filter(|e| fits(e, max)).cloned().collect();
    if kept.is_empty() {
        return Err(RunError::Invalid("no training example fits within max_positions".into()));
    }
    let mut log = TrainLog { examples: kept.len(), skipped_too_long: train.len() - kept.len(), ..Default::default() };
    let dev: Vec<Example> = dev.iter().filter(|e| fits(e, max)).cloned().collect();
    let dev_batches: Vec<Batch> = token_budget_batches(&dev, cfg.token_budget, 0)
        .iter()
        .map(|idx| Batch::from_examples(&idx.iter().map(|&i| &dev[i]).collect::<Vec<_>>()))
        .collect::<Result<_, _>>()?;

    let mut state = ModelState::<f32>::init(model, derive_seed(cfg.seed, SEED_INIT, 0))?;
    log.parameters = state.parameter_count();
    let mut opt = Optimizer::new(&state, cfg.adam, cfg.schedule)?;
    let (mut window, mut window_n) = (0.0, 0u64);
    let mut step = 0u64;
    'outer: loop {
        let order =
            token_budget_batches(&kept, cfg.token_budget, derive_seed(cfg.seed, SEED_BATCHES, log.epochs_started));
        log.epochs_started += 1;
        for idx in order {
            if step == cfg.steps {
                break 'outer;
            }
            let refs: Vec<&Example> = idx.iter().map(|&i| &kept[i]).collect();
            let batch = Batch::from_examples(&refs)?;
            let loss = train_step(
                &mut state,
                &batch,
                &mut opt,
                cfg.label_smoothing,
                derive_seed(cfg.seed, SEED_DROPOUT, step),
            )?;
            step += 1;
            window += loss;
            window_n += 1;
            if step % cfg.log_every == 0 || step == cfg.steps {
                log.train_loss.push((step, window / window_n as f64));
                progress(&format!("step {step}/{} loss {:.4}", cfg.steps, window / window_n as f64));
                (window, window_n) = (0.0, 0);
            }
            if !dev_batches.is_empty() && cfg.dev_every > 0 && (step % cfg.dev_every == 0 || step == cfg.steps) {
                let d = dev_loss(&state, &dev_batches, cfg.label_smoothing)?;
                log.dev_loss.push((step, d));
                progress(&format!("step {step} dev loss {d:.4}"));
            }
        }
    }
    Ok((state, log))
}

/// Every ordered direction of the multi-way test set; pivot directions count
/// as supervised.
pub fn evaluate(
    state: &ModelState<f32>,
    tok: &Tokenizer,
    strategy: LtStrategy,
    family: &SyntheticFamily,
    langid: &LangIdModel,
    decode: &DecodeConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport, RunError> {
    let supervised = pivot_directions(family.pivot(), family.languages());
    let setup = EvalSetup { langid, supervised: &supervised, decode, smoothing: cfg.bleu_smoothing };
    Ok(evaluate_all_directions(state, tok, strategy, &family.test, &setup)?)
}

/// Similarity curves for both settings, 2-D point sets for each configured
/// method and one attention trace.
pub fn analyze(
    state: &ModelState<f32>,
    tok: &Tokenizer,
    strategy: LtStrategy,
    family: &SyntheticFamily,
    decode: &DecodeConfig,
    cfg: &AnalysisConfig,
) -> Result<AnalysisOutputs, RunError> {
    let anchor = cfg.anchor.clone().unwrap_or_else(|| family.pivot().clone());
    let test = &family.test;
    let mut curves = Vec::new();
    for setting in [Setting::ManyToOne, Setting::OneToMany] {
        curves.push(layerwise_similarity(state, tok, strategy, test, setting, &anchor, cfg.sentences, cfg.scope)?);
    }
    let mut points = Vec::new();
    if !cfg.methods.is_empty() {
        let vectors = encoder_vectors(state, tok, strategy, test, &anchor, cfg.sentences, cfg.scope)?;
        for &m in &cfg.methods {
            points.push(reduce_2d(&vectors, m, cfg.reduce_seed)?);
        }
    }
    let others: Vec<&LangCode> = test.languages.iter().filter(|l| **l != anchor).collect();
    let mut traces = Vec::new();
    if let ([src, tgt, ..], Some(row)) = (others.as_slice(), test.rows.get(cfg.trace_row)) {
        let col = test.column_index(src).expect("language comes from the test set");
        traces.push(extract_tlt_attention(state, tok, strategy, &row[col], src, tgt, decode, None)?);
    }
    Ok(AnalysisOutputs { curves, points, traces })
}
