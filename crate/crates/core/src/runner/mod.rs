//! Experiment orchestration: config file in, checkpoints, reports, analysis
//! exports and a manifest out.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json
//! config.toml              resolved config
//! data/                    family files (see corpus::write_family)
//! langid.json
//! tokenizer.bpe
//! tagged/<strategy>/{train,dev}.{src,tgt}
//! models/<strategy>.ckpt, models/<strategy>.log.json
//! reports/<strategy>.json
//! analysis/<strategy>/{curves.tsv, points.<method>.tsv, trace.0.json}
//! comparison.tsv
//! ```
//!
//! Each stage is skipped when its key (settings plus input hashes) matches
//! the manifest and its recorded outputs are still present and unchanged.

mod compare;
mod config;
mod manifest;
pub mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use compare::{compare_strategies, ComparisonRow, ComparisonTable, COMPARISON_HEADER};
pub use config::{
    AnalysisConfig, DataConfig, EvalConfig, ExperimentConfig, ModelConfig, TokenizerConfig, TrainingConfig,
};
pub use manifest::{sha256_bytes, sha256_file, write_atomic, RunManifest, StageRecord, StageStatus, MANIFEST_FILE};

use crate::analysis::{export_analysis, AnalysisError};
use crate::corpus::{read_family, CorpusError, SyntheticFamily};
use crate::decoding::DecodeError;
use crate::eval::{EvalError, EvalReport, LangIdModel};
use crate::model::{load_checkpoint, save_checkpoint, ModelError, ModelState};
use crate::tagging::LtStrategy;
use crate::tokenizer::{Tokenizer, TokenizerError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("cannot compare runs over different data ({a} vs {b})")]
    DataMismatch { a: String, b: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl RunError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io { path: path.display().to_string(), source }
    }

    /// 1 for validation problems, 2 for failures while doing work.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Invalid(_) | RunError::DataMismatch { .. } => 1,
            _ => 2,
        }
    }
}

/// What happened to each stage during one `run` call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

pub struct RunSummary {
    pub manifest: RunManifest,
    pub outcomes: Vec<(String, StageOutcome)>,
}

pub const TOKENIZER_FILE: &str = "tokenizer.bpe";
pub const LANGID_FILE: &str = "langid.json";
pub const COMPARISON_FILE: &str = "comparison.tsv";

pub fn checkpoint_path(s: LtStrategy) -> String {
    format!("models/{}.ckpt", s.slug())
}

pub fn report_path(s: LtStrategy) -> String {
    format!("reports/{}.json", s.slug())
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("settings serialize")
}

fn list_files(root: &Path, dir: &Path) -> Result<Vec<String>, RunError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| RunError::io(dir, e))? {
        let path = entry.map_err(|e| RunError::io(dir, e))?.path();
        if path.is_file() {
            out.push(rel(root, &path));
        }
    }
    out.sort();
    Ok(out)
}

struct Runner<'a> {
    root: PathBuf,
    manifest: RunManifest,
    outcomes: Vec<(String, StageOutcome)>,
    log: &'a mut dyn FnMut(&str),
}

impl Runner<'_> {
    fn hash_inputs(&self, inputs: &[String]) -> Result<BTreeMap<String, String>, RunError> {
        inputs.iter().map(|p| Ok((p.clone(), sha256_file(&self.root.join(p))?))).collect()
    }

    fn up_to_date(&self, name: &str, key: &str) -> bool {
        let Some(rec) = self.manifest.stage(name) else { return false };
        rec.status == StageStatus::Done
            && rec.key == key
            && rec.outputs.iter().all(|(p, h)| sha256_file(&self.root.join(p)).is_ok_and(|x| &x == h))
    }

    /// Runs `body` unless the stage is current. `body` returns the paths it
    /// wrote, relative to the run directory.
    fn stage(
        &mut self,
        name: &str,
        settings: String,
        inputs: &[String],
        body: impl FnOnce(&Path, &mut dyn FnMut(&str)) -> Result<Vec<String>, RunError>,
    ) -> Result<(), RunError> {
        let input_hashes = self.hash_inputs(inputs)?;
        let key = sha256_bytes(format!("{name}\n{settings}\n{}", json(&input_hashes)).as_bytes());
        if self.up_to_date(name, &key) {
            (self.log)(&format!("[{name}] up to date"));
            self.outcomes.push((name.to_string(), StageOutcome::Skipped));
            return Ok(());
        }
        (self.log)(&format!("[{name}] running"));
        let t0 = Instant::now();
        let log = &mut *self.log;
        let result = body(&self.root, &mut |m: &str| log(&format!("[{name}] {m}")));
        let seconds = t0.elapsed().as_secs_f64();
        let (status, outputs) = match result {
            Ok(paths) => {
                let mut outputs = BTreeMap::new();
                for p in paths {
                    let h = sha256_file(&self.root.join(&p))?;
                    outputs.insert(p, h);
                }
                (StageStatus::Done, outputs)
            }
            Err(e) => {
                let message = e.to_string();
                self.manifest.record(StageRecord {
                    name: name.to_string(),
                    status: StageStatus::Failed { error: message.clone() },
                    key,
                    inputs: input_hashes,
                    outputs: BTreeMap::new(),
                    seconds,
                });
                self.manifest.save(&self.root)?;
                return Err(RunError::Stage { stage: name.to_string(), message });
            }
        };
        self.manifest.record(StageRecord {
            name: name.to_string(),
            status,
            key,
            inputs: input_hashes,
            outputs,
            seconds,
        });
        self.manifest.save(&self.root)?;
        self.outcomes.push((name.to_string(), StageOutcome::Ran));
        Ok(())
    }

    fn outputs_of(&self, stage: &str) -> Vec<String> {
        self.manifest.stage(stage).map(|r| r.outputs.keys().cloned().collect()).unwrap_or_default()
    }
}

/// Executes (or resumes) every stage for every configured strategy.
pub fn run(config: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<RunSummary, RunError> {
    config.validate()?;
    let root = config.output_dir.clone();
    fs::create_dir_all(&root).map_err(|e| RunError::io(&root, e))?;
    let config_text = config.to_toml();
    let mut placeless = config.clone();
    placeless.output_dir = PathBuf::new();
    let config_hash = sha256_bytes(placeless.to_toml().as_bytes());
    let manifest = match RunManifest::load(&root.join(MANIFEST_FILE)) {
        Ok(mut m) => {
            m.config_hash = config_hash;
            m
        }
        Err(_) => RunManifest::new(config_hash),
    };
    let mut r = Runner { root: root.clone(), manifest, outcomes: Vec::new(), log };
    write_atomic(&root.join("config.toml"), config_text.as_bytes())?;

    r.stage("data", json(&config.data), &[], |root, _| {
        let dir = root.join("data");
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| RunError::io(&dir, e))?;
        }
        stages::prepare_data(&config.data, &dir)?;
        list_files(root, &dir)
    })?;
    let data_files = r.outputs_of("data");
    r.manifest.data_hash = Some(sha256_bytes(json(&r.hash_inputs(&data_files)?).as_bytes()));
    let family = read_family(&root.join("data"))?;

    r.stage("langid", json(&config.evaluation.langid_smoothing), &data_files, |root, _| {
        let model = stages::train_langid_model(&family, &config.evaluation)?;
        let text = serde_json::to_string(&model).expect("langid serializes");
        write_atomic(&root.join(LANGID_FILE), text.as_bytes())?;
        Ok(vec![LANGID_FILE.to_string()])
    })?;

    r.stage("tokenizer", json(&config.tokenizer), &data_files, |root, _| {
        let tok = stages::train_tokenizer(&family, &config.tokenizer)?;
        write_atomic(&root.join(TOKENIZER_FILE), tok.to_text().as_bytes())?;
        Ok(vec![TOKENIZER_FILE.to_string()])
    })?;

    for &s in &config.strategies {
        run_strategy(&mut r, config, &family, s)?;
    }

    let reports: Vec<String> = config.strategies.iter().map(|&s| report_path(s)).collect();
    r.stage("compare", String::new(), &reports, |root, _| {
        let table = compare::table_for(&[("run".to_string(), root.to_path_buf(), RunManifest::load(root)?)])?;
        write_atomic(&root.join(COMPARISON_FILE), table.to_tsv().as_bytes())?;
        Ok(vec![COMPARISON_FILE.to_string()])
    })?;
    Ok(RunSummary { manifest: r.manifest, outcomes: r.outcomes })
}

fn load_tokenizer(root: &Path) -> Result<Tokenizer, RunError> {
    Ok(Tokenizer::load(&root.join(TOKENIZER_FILE))?)
}

fn run_strategy(
    r: &mut Runner<'_>,
    config: &ExperimentConfig,
    family: &SyntheticFamily,
    s: LtStrategy,
) -> Result<(), RunError> {
    let slug = s.slug();
    let data_files = r.outputs_of("data");
    let tag_dir = format!("tagged/{slug}");
    r.stage(&format!("tag:{}", s.name()), json(&config.training.seed), &data_files, |root, _| {
        let written = stages::tag_corpora(family, s, config.training.seed, &root.join(&tag_dir))?;
        Ok(written.iter().map(|p| rel(root, p)).collect())
    })?;

    let ckpt = checkpoint_path(s);
    let train_log = format!("models/{slug}.log.json");
    let mut inputs = vec![TOKENIZER_FILE.to_string()];
    inputs.extend(r.outputs_of(&format!("tag:{}", s.name())));
    let settings = json(&(&config.model, &config.training));
    r.stage(&format!("train:{}", s.name()), settings, &inputs, |root, log| {
        let tok = load_tokenizer(root)?;
        let dir = root.join(&tag_dir);
        let train = stages::read_tagged(&tok, &dir, "train")?;
        let dev = stages::read_tagged(&tok, &dir, "dev")?;
        let model_cfg = config.model.with_vocab(tok.vocab_size());
        let (state, tlog) = stages::train_model(model_cfg, &config.training, &train, &dev, log)?;
        fs::create_dir_all(root.join("models")).map_err(|e| RunError::io(&root.join("models"), e))?;
        let tmp = root.join(format!("{ckpt}.tmp"));
        save_checkpoint(&state, &tmp)?;
        fs::rename(&tmp, root.join(&ckpt)).map_err(|e| RunError::io(&root.join(&ckpt), e))?;
        write_atomic(&root.join(&train_log), tlog.to_json().as_bytes())?;
        Ok(vec![ckpt.clone(), train_log.clone()])
    })?;

    let report = report_path(s);
    let inputs =
        vec![ckpt.clone(), TOKENIZER_FILE.to_string(), LANGID_FILE.to_string(), "data/multiway.tsv".to_string()];
    let settings = json(&(&config.decoding, &config.evaluation));
    r.stage(&format!("eval:{}", s.name()), settings, &inputs, |root, log| {
        let tok = load_tokenizer(root)?;
        let state: ModelState<f32> = load_checkpoint(&root.join(&ckpt))?;
        let langid = load_langid(&root.join(LANGID_FILE))?;
        let rep = stages::evaluate(&state, &tok, s, family, &langid, &config.decoding, &config.evaluation)?;
        log(&format!(
            "supervised {:.2} zero-shot {:.2} off-target {:.2}%",
            rep.aggregate.supervised_bleu, rep.aggregate.zero_shot_bleu, rep.aggregate.off_target_pct
        ));
        write_atomic(&root.join(&report), rep.to_json().as_bytes())?;
        Ok(vec![report.clone()])
    })?;

    if config.analysis.enabled {
        let inputs = vec![ckpt.clone(), TOKENIZER_FILE.to_string(), "data/multiway.tsv".to_string()];
        let settings = json(&(&config.analysis, &config.decoding));
        r.stage(&format!("analysis:{}", s.name()), settings, &inputs, |root, _| {
            let tok = load_tokenizer(root)?;
            let state: ModelState<f32> = load_checkpoint(&root.join(&ckpt))?;
            let out = stages::analyze(&state, &tok, s, family, &config.decoding, &config.analysis)?;
            let written = export_analysis(&out, &root.join("analysis").join(&slug))?;
            Ok(written.iter().map(|p| rel(root, p)).collect())
        })?;
    }
    Ok(())
}

pub fn load_langid(path: &Path) -> Result<LangIdModel, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RunError::Invalid(format!("{}: {e}", path.display())))
}

/// Reads the report a manifest lists for `strategy`, checking its hash.
pub fn load_report(root: &Path, manifest: &RunManifest, strategy: LtStrategy) -> Result<Option<EvalReport>, RunError> {
    let rel_path = report_path(strategy);
    let Some(expected) = manifest.artifacts.get(&rel_path) else { return Ok(None) };
    let path = root.join(&rel_path);
    let actual = sha256_file(&path)?;
    if &actual != expected {
        return Err(RunError::Manifest(format!("{} changed since the manifest was written", path.display())));
    }
    Ok(Some(EvalReport::load(&path)?))
}

#[cfg(test)]
mod tests;
