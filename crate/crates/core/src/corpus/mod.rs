//! Parallel text: loading, splitting, pivot-centric mixtures, and the
//! synthetic language family used for desk-scale experiments.

mod synthetic;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub use synthetic::{
    generate_synthetic_family, read_family, translate_oracle, write_family, CorpusSizes, FamilyLexicon, ReorderRule,
    SyntheticFamily, SyntheticFamilySpec,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid language code {0:?}: expected a lowercase letter followed by 1-7 lowercase letters or digits")]
    InvalidLangCode(String),
    #[error("line count mismatch between {src} and {tgt}: {src_lines} vs {tgt_lines}")]
    LineCountMismatch { src: PathBuf, tgt: PathBuf, src_lines: usize, tgt_lines: usize },
    #[error("{path}: line {line} is not valid UTF-8")]
    Utf8 { path: PathBuf, line: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid sentence pair: {0}")]
    InvalidPair(String),
    #[error("corpus {src}-{tgt} does not involve the pivot {pivot}")]
    NotPivotCentric { src: LangCode, tgt: LangCode, pivot: LangCode },
    #[error("split fractions {0:?} must be positive and sum to 1")]
    BadFractions((f64, f64, f64)),
    #[error("invalid family spec: {0}")]
    InvalidSpec(String),
    #[error("token {token:?} is not in the {lang} lexicon")]
    UnknownToken { token: String, lang: LangCode },
    #[error("language {0} is not part of this family")]
    UnknownLanguage(LangCode),
    #[error("malformed family directory: {0}")]
    Malformed(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

/// Lowercase language identifier such as `en`, `es` or `l1`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LangCode(String);

impl LangCode {
    pub fn new(code: &str) -> Result<Self, CorpusError> {
        let mut chars = code.chars();
        let valid = (2..=8).contains(&code.len())
            && chars.next().is_some_and(|c| c.is_ascii_lowercase())
            && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit());
        if valid {
            Ok(LangCode(code.to_string()))
        } else {
            Err(CorpusError::InvalidLangCode(code.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for LangCode {
    type Error = CorpusError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        LangCode::new(&s)
    }
}

impl From<LangCode> for String {
    fn from(c: LangCode) -> String {
        c.0
    }
}

impl fmt::Display for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for LangCode {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LangCode::new(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src_text: String,
    pub tgt_text: String,
    pub src_lang: LangCode,
    pub tgt_lang: LangCode,
}

impl SentencePair {
    pub fn new(src_text: &str, tgt_text: &str, src_lang: LangCode, tgt_lang: LangCode) -> Result<Self, CorpusError> {
        if src_text.trim().is_empty() || tgt_text.trim().is_empty() {
            return Err(CorpusError::InvalidPair("empty side".into()));
        }
        if src_lang == tgt_lang {
            return Err(CorpusError::InvalidPair(format!("source and target are both {src_lang}")));
        }
        Ok(SentencePair { src_text: src_text.to_string(), tgt_text: tgt_text.to_string(), src_lang, tgt_lang })
    }

    pub fn direction(&self) -> (&LangCode, &LangCode) {
        (&self.src_lang, &self.tgt_lang)
    }

    pub fn reversed(&self) -> SentencePair {
        SentencePair {
            src_text: self.tgt_text.clone(),
            tgt_text: self.src_text.clone(),
            src_lang: self.tgt_lang.clone(),
            tgt_lang: self.src_lang.clone(),
        }
    }
}

/// Sentence pairs sharing one direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src_lang: LangCode,
    pub tgt_lang: LangCode,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(src_lang: LangCode, tgt_lang: LangCode, pairs: Vec<SentencePair>) -> Result<Self, CorpusError> {
        if let Some(p) = pairs.iter().find(|p| p.src_lang != src_lang || p.tgt_lang != tgt_lang) {
            return Err(CorpusError::InvalidPair(format!(
                "pair {}-{} inside corpus {src_lang}-{tgt_lang}",
                p.src_lang, p.tgt_lang
            )));
        }
        Ok(ParallelCorpus { src_lang, tgt_lang, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Test rows with one aligned sentence per language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiWayTestSet {
    pub languages: Vec<LangCode>,
    pub rows: Vec<Vec<String>>,
}

impl MultiWayTestSet {
    pub fn new(languages: Vec<LangCode>, rows: Vec<Vec<String>>) -> Result<Self, CorpusError> {
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != languages.len()) {
            return Err(CorpusError::Malformed(format!("multi-way row {i} does not have {} columns", languages.len())));
        }
        Ok(MultiWayTestSet { languages, rows })
    }

    pub fn column_index(&self, lang: &LangCode) -> Option<usize> {
        self.languages.iter().position(|l| l == lang)
    }

    pub fn column(&self, lang: &LangCode) -> Option<Vec<&str>> {
        let c = self.column_index(lang)?;
        Some(self.rows.iter().map(|r| r[c].as_str()).collect())
    }

    pub fn truncated(&self, rows: usize) -> MultiWayTestSet {
        MultiWayTestSet { languages: self.languages.clone(), rows: self.rows.iter().take(rows).cloned().collect() }
    }

    /// Tab-separated rendering: a header of codes, then one row per line.
    pub fn to_tsv(&self) -> String {
        let mut out = self.languages.iter().map(LangCode::as_str).collect::<Vec<_>>().join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CorpusError::Malformed("empty multi-way file".into()))?;
        let languages = header.split('\t').map(LangCode::new).collect::<Result<Vec<_>, _>>()?;
        let rows = lines.map(|l| l.split('\t').map(str::to_string).collect()).collect();
        MultiWayTestSet::new(languages, rows)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Line indices where both sides were blank.
    pub dropped_blank: usize,
    /// Line indices where exactly one side was blank.
    pub dropped_one_sided: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    let mut lines = Vec::new();
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    if body.is_empty() && bytes.is_empty() {
        return Ok(lines);
    }
    for (i, raw) in body.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let text = std::str::from_utf8(raw).map_err(|_| CorpusError::Utf8 { path: path.to_path_buf(), line: i + 1 })?;
        lines.push(text.nfc().collect());
    }
    Ok(lines)
}

/// Reads two line-aligned UTF-8 files into a corpus (NFC-normalized).
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_lang: LangCode,
    tgt_lang: LangCode,
) -> Result<(ParallelCorpus, LoadReport), CorpusError> {
    if src_lang == tgt_lang {
        return Err(CorpusError::InvalidPair(format!("source and target are both {src_lang}")));
    }
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LineCountMismatch {
            src: src_path.to_path_buf(),
            tgt: tgt_path.to_path_buf(),
            src_lines: src.len(),
            tgt_lines: tgt.len(),
        });
    }
    let mut report = LoadReport::default();
    let mut pairs = Vec::with_capacity(src.len());
    for (s, t) in src.iter().zip(&tgt) {
        match (s.trim().is_empty(), t.trim().is_empty()) {
            (true, true) => report.dropped_blank += 1,
            (false, false) => pairs.push(SentencePair {
                src_text: s.clone(),
                tgt_text: t.clone(),
                src_lang: src_lang.clone(),
                tgt_lang: tgt_lang.clone(),
            }),
            _ => report.dropped_one_sided += 1,
        }
    }
    Ok((ParallelCorpus { src_lang, tgt_lang, pairs }, report))
}

/// Both directions of every pivot-centric corpus, shuffled deterministically.
pub fn build_training_mixture(
    corpora: &[ParallelCorpus],
    pivot: &LangCode,
    shuffle_seed: u64,
) -> Result<Vec<SentencePair>, CorpusError> {
    let mut mixture = Vec::new();
    for c in corpora {
        if (c.src_lang == *pivot) == (c.tgt_lang == *pivot) {
            return Err(CorpusError::NotPivotCentric {
                src: c.src_lang.clone(),
                tgt: c.tgt_lang.clone(),
                pivot: pivot.clone(),
            });
        }
        for p in &c.pairs {
            mixture.push(p.clone());
            mixture.push(p.reversed());
        }
    }
    mixture.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(mixture)
}

/// Random disjoint train/dev/test partition.
///
/// Dev and test sizes are `floor(n * fraction)`; the remainder goes to train.
/// Each part keeps the original relative order.
pub fn split(
    corpus: &ParallelCorpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus), CorpusError> {
    let (ft, fd, fe) = fractions;
    if ft <= 0.0 || fd <= 0.0 || fe <= 0.0 || (ft + fd + fe - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadFractions(fractions));
    }
    let n = corpus.len();
    let n_dev = (n as f64 * fd).floor() as usize;
    let n_test = (n as f64 * fe).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev: Vec<usize> = order[..n_dev].to_vec();
    let mut test: Vec<usize> = order[n_dev..n_dev + n_test].to_vec();
    let mut train: Vec<usize> = order[n_dev + n_test..].to_vec();
    let part = |idx: &mut Vec<usize>| {
        idx.sort_unstable();
        ParallelCorpus {
            src_lang: corpus.src_lang.clone(),
            tgt_lang: corpus.tgt_lang.clone(),
            pairs: idx.iter().map(|&i| corpus.pairs[i].clone()).collect(),
        }
    };
    Ok((part(&mut train), part(&mut dev), part(&mut test)))
}
