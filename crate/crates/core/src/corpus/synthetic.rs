//! Deterministic family of cipher languages over one base vocabulary.
//!
//! Every language renders a base sentence through its own bijective
//! lexicon (surface forms carry the language code, e.g. `l2w017`) and,
//! for non-pivot languages, a fixed word-order rule. Translation between
//! any two languages is therefore known exactly, which gives multi-way
//! references for zero-shot directions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_parallel, CorpusError, LangCode, MultiWayTestSet, ParallelCorpus, SentencePair};

const ZIPF_EXPONENT: f64 = 1.0;
const TRANSITION_TEMPERATURE: f64 = 1.0;
const FAMILY_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderRule {
    None,
    /// Swap positions (0,1), (2,3), ...; an odd tail stays put.
    SwapEvenAdjacent,
    /// Reverse each consecutive window of three, including a shorter tail.
    ReverseWindowsOf3,
}

impl ReorderRule {
    /// Every rule is an involution, so this also undoes itself.
    pub fn apply<T: Clone>(self, items: &[T]) -> Vec<T> {
        let mut out = items.to_vec();
        match self {
            ReorderRule::None => {}
            ReorderRule::SwapEvenAdjacent => {
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
            }
            ReorderRule::ReverseWindowsOf3 => {
                for window in out.chunks_mut(3) {
                    window.reverse();
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    /// Parallel training sentences per pivot-centric pair.
    pub train: usize,
    pub dev: usize,
    /// Multi-way test rows.
    pub test: usize,
    /// Monolingual sentences per language (language-identifier training).
    pub mono: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFamilySpec {
    pub base_vocab_size: usize,
    pub num_languages: usize,
    pub pivot: LangCode,
    pub lexicon_seed: u64,
    pub reorder_rule: ReorderRule,
    pub sentence_length_range: (usize, usize),
    pub corpus_sizes: CorpusSizes,
}

impl Default for SyntheticFamilySpec {
    fn default() -> Self {
        SyntheticFamilySpec {
            base_vocab_size: 100,
            num_languages: 5,
            pivot: LangCode::new("en").expect("valid code"),
            lexicon_seed: 1,
            reorder_rule: ReorderRule::SwapEvenAdjacent,
            sentence_length_range: (4, 10),
            corpus_sizes: CorpusSizes { train: 8000, dev: 200, test: 200, mono: 1000 },
        }
    }
}

impl SyntheticFamilySpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.num_languages < 3 {
            return bad(format!("num_languages must be >= 3, got {}", self.num_languages));
        }
        if self.base_vocab_size < 50 {
            return bad(format!("base_vocab_size must be >= 50, got {}", self.base_vocab_size));
        }
        let (lo, hi) = self.sentence_length_range;
        if lo < 3 || hi < lo {
            return bad(format!("sentence_length_range ({lo}, {hi}) needs 3 <= min <= max"));
        }
        if self.corpus_sizes.train == 0 || self.corpus_sizes.test == 0 {
            return bad("train and test sizes must be positive".into());
        }
        Ok(())
    }

    /// Pivot first, then `l1`, `l2`, ... skipping the pivot's own code.
    pub fn languages(&self) -> Vec<LangCode> {
        let mut langs = vec![self.pivot.clone()];
        let mut k = 1;
        while langs.len() < self.num_languages {
            let code = LangCode::new(&format!("l{k}")).expect("generated code is valid");
            if code != self.pivot {
                langs.push(code);
            }
            k += 1;
        }
        langs
    }

    pub fn lexicon(&self) -> Result<FamilyLexicon, CorpusError> {
        FamilyLexicon::new(self)
    }
}

fn stream_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    let mut z = seed ^ (purpose << 40) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_LEXICON: u64 = 1;
const STREAM_GRAMMAR: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_DEV: u64 = 4;
const STREAM_TEST: u64 = 5;
const STREAM_MONO: u64 = 6;

/// Lexicons, word-order rules and the base-language bigram sampler.
#[derive(Clone, Debug)]
pub struct FamilyLexicon {
    pub languages: Vec<LangCode>,
    pivot: usize,
    rule: ReorderRule,
    width: usize,
    /// `forward[lang][base] = surface index`
    forward: Vec<Vec<usize>>,
    /// surface form to base id, per language
    inverse: Vec<HashMap<String, usize>>,
    unigram_cdf: Vec<f64>,
    transition_cdf: Vec<Vec<f64>>,
    length_range: (usize, usize),
}

fn cdf(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl FamilyLexicon {
    fn new(spec: &SyntheticFamilySpec) -> Result<Self, CorpusError> {
        spec.validate()?;
        let languages = spec.languages();
        let v = spec.base_vocab_size;
        let width = (v - 1).to_string().len().max(3);
        let mut forward = Vec::with_capacity(languages.len());
        let mut inverse = Vec::with_capacity(languages.len());
        for (li, lang) in languages.iter().enumerate() {
            let mut perm: Vec<usize> = (0..v).collect();
            if li != 0 {
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(spec.lexicon_seed, STREAM_LEXICON, li as u64)));
            }
            let inv = (0..v).map(|base| (format!("{lang}w{:0width$}", perm[base]), base)).collect();
            forward.push(perm);
            inverse.push(inv);
        }

        let unigram: Vec<f64> = (0..v).map(|r| 1.0 / ((r + 1) as f64).powf(ZIPF_EXPONENT)).collect();
        let mut grammar = ChaCha8Rng::seed_from_u64(stream_seed(spec.lexicon_seed, STREAM_GRAMMAR, 0));
        let transition_cdf = (0..v)
            .map(|_| {
                let w: Vec<f64> = unigram
                    .iter()
                    .map(|u| u * (standard_normal(&mut grammar) / TRANSITION_TEMPERATURE).exp())
                    .collect();
                cdf(&w)
            })
            .collect();

        Ok(FamilyLexicon {
            languages,
            pivot: 0,
            rule: spec.reorder_rule,
            width,
            forward,
            inverse,
            unigram_cdf: cdf(&unigram),
            transition_cdf,
            length_range: spec.sentence_length_range,
        })
    }

    fn index_of(&self, lang: &LangCode) -> Result<usize, CorpusError> {
        self.languages.iter().position(|l| l == lang).ok_or_else(|| CorpusError::UnknownLanguage(lang.clone()))
    }

    fn rule_for(&self, li: usize) -> ReorderRule {
        if li == self.pivot {
            ReorderRule::None
        } else {
            self.rule
        }
    }

    pub fn surface(&self, base: usize, lang: &LangCode) -> Result<String, CorpusError> {
        let li = self.index_of(lang)?;
        Ok(format!("{lang}w{:0w$}", self.forward[li][base], w = self.width))
    }

    /// Realizes a base sentence in `lang`.
    pub fn render(&self, base: &[usize], lang: &LangCode) -> Result<String, CorpusError> {
        let li = self.index_of(lang)?;
        let ordered = self.rule_for(li).apply(base);
        Ok(ordered
            .iter()
            .map(|&b| format!("{lang}w{:0w$}", self.forward[li][b], w = self.width))
            .collect::<Vec<_>>()
            .join(" "))
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse(&self, sentence: &str, lang: &LangCode) -> Result<Vec<usize>, CorpusError> {
        let li = self.index_of(lang)?;
        let ids = sentence
            .split_whitespace()
            .map(|tok| {
                self.inverse[li]
                    .get(tok)
                    .copied()
                    .ok_or_else(|| CorpusError::UnknownToken { token: tok.to_string(), lang: lang.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.rule_for(li).apply(&ids))
    }

    pub fn translate(&self, sentence: &str, src: &LangCode, tgt: &LangCode) -> Result<String, CorpusError> {
        if src == tgt {
            self.index_of(src)?;
            return Ok(sentence.to_string());
        }
        let base = self.parse(sentence, src)?;
        self.render(&base, tgt)
    }

    /// Draws a base sentence from the seeded bigram sampler.
    pub fn sample_base(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let (lo, hi) = self.length_range;
        let len = rng.gen_range(lo..=hi);
        let mut out = Vec::with_capacity(len);
        let mut prev = sample_cdf(&self.unigram_cdf, rng);
        out.push(prev);
        while out.len() < len {
            prev = sample_cdf(&self.transition_cdf[prev], rng);
            out.push(prev);
        }
        out
    }
}

/// `sentence` in `src` rendered in `tgt` through the base language.
pub fn translate_oracle(
    sentence: &str,
    src: &LangCode,
    tgt: &LangCode,
    spec: &SyntheticFamilySpec,
) -> Result<String, CorpusError> {
    spec.lexicon()?.translate(sentence, src, tgt)
}

/// Everything generated from one [`SyntheticFamilySpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFamily {
    pub spec: SyntheticFamilySpec,
    pub monolingual: BTreeMap<LangCode, Vec<String>>,
    /// `pivot -> Li` training corpora.
    pub train: Vec<ParallelCorpus>,
    pub dev: Vec<ParallelCorpus>,
    pub test: MultiWayTestSet,
}

impl SyntheticFamily {
    pub fn languages(&self) -> &[LangCode] {
        &self.test.languages
    }

    pub fn pivot(&self) -> &LangCode {
        &self.spec.pivot
    }
}

fn pivot_corpus(lex: &FamilyLexicon, li: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<ParallelCorpus, CorpusError> {
    let pivot = &lex.languages[lex.pivot];
    let other = &lex.languages[li];
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let base = lex.sample_base(rng);
        pairs.push(SentencePair {
            src_text: lex.render(&base, pivot)?,
            tgt_text: lex.render(&base, other)?,
            src_lang: pivot.clone(),
            tgt_lang: other.clone(),
        });
    }
    Ok(ParallelCorpus { src_lang: pivot.clone(), tgt_lang: other.clone(), pairs })
}

pub fn generate_synthetic_family(spec: &SyntheticFamilySpec) -> Result<SyntheticFamily, CorpusError> {
    let lex = spec.lexicon()?;
    let seed = spec.lexicon_seed;
    let sizes = spec.corpus_sizes;

    let mut monolingual = BTreeMap::new();
    for (li, lang) in lex.languages.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_MONO, li as u64));
        let sents =
            (0..sizes.mono).map(|_| lex.render(&lex.sample_base(&mut rng), lang)).collect::<Result<Vec<_>, _>>()?;
        monolingual.insert(lang.clone(), sents);
    }

    let mut train = Vec::new();
    let mut dev = Vec::new();
    for li in (0..lex.languages.len()).filter(|&i| i != lex.pivot) {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_TRAIN, li as u64));
        train.push(pivot_corpus(&lex, li, sizes.train, &mut rng)?);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_DEV, li as u64));
        dev.push(pivot_corpus(&lex, li, sizes.dev, &mut rng)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_TEST, 0));
    let mut rows = Vec::with_capacity(sizes.test);
    for _ in 0..sizes.test {
        let base = lex.sample_base(&mut rng);
        rows.push(lex.languages.iter().map(|l| lex.render(&base, l)).collect::<Result<Vec<_>, _>>()?);
    }
    let test = MultiWayTestSet::new(lex.languages.clone(), rows)?;

    Ok(SyntheticFamily { spec: spec.clone(), monolingual, train, dev, test })
}

#[derive(Serialize, Deserialize)]
struct FamilyFile {
    version: u32,
    spec: SyntheticFamilySpec,
    languages: Vec<LangCode>,
}

fn write_lines(path: &Path, lines: impl Iterator<Item = impl AsRef<str>>) -> Result<(), CorpusError> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CorpusError::io(path, e))
}

/// Persists a family as `family.json`, `{train,dev}.<src>-<tgt>.{src,tgt}`,
/// `mono.<lang>.txt` and `multiway.tsv`.
pub fn write_family(family: &SyntheticFamily, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let meta = FamilyFile {
        version: FAMILY_FORMAT_VERSION,
        spec: family.spec.clone(),
        languages: family.test.languages.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("family metadata serializes");
    let path = dir.join("family.json");
    fs::write(&path, json + "\n").map_err(|e| CorpusError::io(&path, e))?;
    for (split, corpora) in [("train", &family.train), ("dev", &family.dev)] {
        for c in corpora {
            let stem = format!("{split}.{}-{}", c.src_lang, c.tgt_lang);
            write_lines(&dir.join(format!("{stem}.src")), c.pairs.iter().map(|p| &p.src_text))?;
            write_lines(&dir.join(format!("{stem}.tgt")), c.pairs.iter().map(|p| &p.tgt_text))?;
        }
    }
    for (lang, sents) in &family.monolingual {
        write_lines(&dir.join(format!("mono.{lang}.txt")), sents.iter())?;
    }
    let path = dir.join("multiway.tsv");
    fs::write(&path, family.test.to_tsv()).map_err(|e| CorpusError::io(&path, e))
}

pub fn read_family(dir: &Path) -> Result<SyntheticFamily, CorpusError> {
    let path = dir.join("family.json");
    let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
    let meta: FamilyFile = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed(e.to_string()))?;
    if meta.version != FAMILY_FORMAT_VERSION {
        return Err(CorpusError::Malformed(format!("unsupported family format version {}", meta.version)));
    }
    let pivot = meta.spec.pivot.clone();
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for lang in meta.languages.iter().filter(|l| **l != pivot) {
        for (split, out) in [("train", &mut train), ("dev", &mut dev)] {
            let stem = format!("{split}.{pivot}-{lang}");
            let (c, _) = load_parallel(
                &dir.join(format!("{stem}.src")),
                &dir.join(format!("{stem}.tgt")),
                pivot.clone(),
                lang.clone(),
            )?;
            out.push(c);
        }
    }
    let mut monolingual = BTreeMap::new();
    for lang in &meta.languages {
        let path = dir.join(format!("mono.{lang}.txt"));
        let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
        monolingual.insert(lang.clone(), text.lines().map(str::to_string).collect());
    }
    let path = dir.join("multiway.tsv");
    let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
    let test = MultiWayTestSet::from_tsv(&text)?;
    if test.languages != meta.languages {
        return Err(CorpusError::Malformed("multiway.tsv header disagrees with family.json".into()));
    }
    Ok(SyntheticFamily { spec: meta.spec, monolingual, train, dev, test })
}
