//! Corpus BLEU, a character n-gram language identifier, off-target rate
//! and per-direction evaluation reports.
//!
//! BLEU tokenization is fixed: case is kept, every character that is
//! neither alphanumeric nor whitespace becomes its own token, and the
//! result is split on whitespace.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LangCode, MultiWayTestSet};
use crate::decoding::{translate_corpus, DecodeConfig, DecodeError};
use crate::model::ModelState;
use crate::numerics::Real;
use crate::tagging::LtStrategy;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("language {0} has no training sentences")]
    MissingLanguage(LangCode),
    #[error("language {lang} has {count} training sentences, at least {min} required")]
    TooFewSentences { lang: LangCode, count: usize, min: usize },
    #[error("test set has no column for {0}")]
    MissingColumn(LangCode),
    #[error("direction {src}->{tgt}: {source}")]
    Direction { src: LangCode, tgt: LangCode, source: DecodeError },
    #[error("{path}: {msg}")]
    Report { path: String, msg: String },
}

/// Splits punctuation and symbols off word characters, then on whitespace.
pub fn bleu_tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars() {
        if c.is_alphanumeric() || c.is_whitespace() {
            spaced.push(c);
        } else {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuSmoothing {
    /// Any zero precision makes the score 0.
    #[default]
    None,
    /// Adds 1 to matches and totals for orders 2 to 4.
    Floor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Set when an unsmoothed zero precision forced the score to 0.
    pub zero_precision: bool,
    pub smoothing: BleuSmoothing,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Single-reference corpus BLEU with clipped 1- to 4-gram precisions.
///
/// Orders for which the hypotheses contain no n-grams at all are left out
/// of the geometric mean, so any corpus scores 100 against itself.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
    smoothing: BleuSmoothing,
) -> Result<BleuReport, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (ht, rt) = (bleu_tokenize(h.as_ref()), bleu_tokenize(r.as_ref()));
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=4 {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            totals[n - 1] += ht.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut report = BleuReport {
        score: 0.0,
        precisions: [0.0; 4],
        matches,
        totals,
        brevity_penalty: 0.0,
        hyp_len,
        ref_len,
        zero_precision: false,
        smoothing,
    };
    if hyp_len == 0 {
        if ref_len == 0 {
            report.score = 100.0;
            report.brevity_penalty = 1.0;
            report.precisions = [1.0; 4];
        } else {
            report.zero_precision = true;
        }
        return Ok(report);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        let (m, t) = match smoothing {
            BleuSmoothing::Floor if n > 0 => (matches[n] + 1, totals[n] + 1),
            _ => (matches[n], totals[n]),
        };
        if totals[n] == 0 && smoothing == BleuSmoothing::None {
            continue;
        }
        let p = m as f64 / t as f64;
        report.precisions[n] = p;
        if p == 0.0 {
            report.zero_precision = true;
        } else {
            log_sum += p.ln();
        }
        orders += 1;
    }
    report.brevity_penalty = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    if !report.zero_precision {
        report.score = (100.0 * report.brevity_penalty * (log_sum / orders as f64).exp()).min(100.0);
    }
    Ok(report)
}

const LANGID_ORDERS: usize = 3;

/// Per-order log-probability tables for one language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LangTables {
    log_prior: f64,
    /// `tables[n - 1][gram] = log P(gram)`
    tables: Vec<BTreeMap<String, f64>>,
    /// Log-probability of an unseen n-gram, per order.
    unseen: Vec<f64>,
}

/// Multinomial naive Bayes over character 1- to 3-grams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangIdModel {
    pub smoothing: f64,
    langs: BTreeMap<LangCode, LangTables>,
}

fn char_ngrams(sentence: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = format!(" {} ", sentence.split_whitespace().collect::<Vec<_>>().join(" ")).chars().collect();
    if chars.len() < n {
        return Vec::new();
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Minimum training sentences per language.
pub const LANGID_MIN_SENTENCES: usize = 100;

/// Fits additive-smoothed n-gram tables; the language set is `languages`.
pub fn train_langid(
    monolingual: &BTreeMap<LangCode, Vec<String>>,
    languages: &[LangCode],
    smoothing: f64,
) -> Result<LangIdModel, EvalError> {
    let mut counts: BTreeMap<&LangCode, Vec<HashMap<String, u64>>> = BTreeMap::new();
    let mut sizes: BTreeMap<&LangCode, usize> = BTreeMap::new();
    let mut inventory: Vec<BTreeSet<String>> = vec![BTreeSet::new(); LANGID_ORDERS];
    for lang in languages {
        let sents = monolingual.get(lang).ok_or_else(|| EvalError::MissingLanguage(lang.clone()))?;
        if sents.len() < LANGID_MIN_SENTENCES {
            return Err(EvalError::TooFewSentences {
                lang: lang.clone(),
                count: sents.len(),
                min: LANGID_MIN_SENTENCES,
            });
        }
        let mut tabs = vec![HashMap::new(); LANGID_ORDERS];
        for s in sents {
            for n in 1..=LANGID_ORDERS {
                for g in char_ngrams(s, n) {
                    inventory[n - 1].insert(g.clone());
                    *tabs[n - 1].entry(g).or_insert(0u64) += 1;
                }
            }
        }
        counts.insert(lang, tabs);
        sizes.insert(lang, sents.len());
    }
    let total: usize = sizes.values().sum();
    let mut langs = BTreeMap::new();
    for (lang, tabs) in counts {
        let mut tables = Vec::with_capacity(LANGID_ORDERS);
        let mut unseen = Vec::with_capacity(LANGID_ORDERS);
        for (n, tab) in tabs.iter().enumerate() {
            // One extra slot for n-grams never seen in any language.
            let v = (inventory[n].len() + 1) as f64;
            let denom = (tab.values().sum::<u64>() as f64 + smoothing * v).ln();
            tables.push(tab.iter().map(|(g, &c)| (g.clone(), (c as f64 + smoothing).ln() - denom)).collect());
            unseen.push(smoothing.ln() - denom);
        }
        let log_prior = (sizes[lang] as f64 / total as f64).ln();
        langs.insert(lang.clone(), LangTables { log_prior, tables, unseen });
    }
    Ok(LangIdModel { smoothing, langs })
}

impl LangIdModel {
    pub fn languages(&self) -> impl Iterator<Item = &LangCode> {
        self.langs.keys()
    }

    /// Log-likelihood plus log prior for every language, in code order.
    pub fn scores(&self, sentence: &str) -> Vec<(LangCode, f64)> {
        let grams: Vec<Vec<String>> = (1..=LANGID_ORDERS).map(|n| char_ngrams(sentence, n)).collect();
        self.langs
            .iter()
            .map(|(lang, t)| {
                let mut s = t.log_prior;
                for (n, gs) in grams.iter().enumerate() {
                    for g in gs {
                        s += t.tables[n].get(g).copied().unwrap_or(t.unseen[n]);
                    }
                }
                (lang.clone(), s)
            })
            .collect()
    }

    pub fn prior(&self, lang: &LangCode) -> Option<f64> {
        self.langs.get(lang).map(|t| t.log_prior.exp())
    }
}

/// Most likely language and its log-likelihood margin over the runner-up.
/// Returns `None` for blank input, which callers count as off-target.
/// Exact ties go to the smaller code.
pub fn detect_language(model: &LangIdModel, sentence: &str) -> Option<(LangCode, f64)> {
    if sentence.trim().is_empty() {
        return None;
    }
    let mut scores = model.scores(sentence);
    scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    let margin = if scores.len() > 1 { scores[0].1 - scores[1].1 } else { f64::INFINITY };
    scores.into_iter().next().map(|(l, _)| (l, margin))
}

/// Percentage of hypotheses not identified as `expected` (blank counts as wrong).
pub fn off_target_rate<S: AsRef<str>>(model: &LangIdModel, hyps: &[S], expected: &LangCode) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    let wrong = hyps.iter().filter(|h| detect_language(model, h.as_ref()).is_none_or(|(l, _)| &l != expected)).count();
    100.0 * wrong as f64 / hyps.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub src: LangCode,
    pub tgt: LangCode,
    pub supervised: bool,
    pub bleu: BleuReport,
    pub off_target_pct: f64,
    pub sentences: usize,
}

/// Unweighted means over each direction group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub supervised_bleu: f64,
    pub zero_shot_bleu: f64,
    /// Off-target rate over zero-shot directions.
    pub off_target_pct: f64,
    pub supervised_off_target_pct: f64,
    pub supervised_directions: usize,
    pub zero_shot_directions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: LtStrategy,
    pub beam: usize,
    pub alpha: f64,
    pub free_tlt: bool,
    pub smoothing: BleuSmoothing,
    pub directions: Vec<DirectionReport>,
    pub aggregate: Aggregate,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn aggregate(directions: &[DirectionReport]) -> Aggregate {
    let group = |sup: bool| directions.iter().filter(move |d| d.supervised == sup);
    Aggregate {
        supervised_bleu: mean(group(true).map(|d| d.bleu.score)),
        zero_shot_bleu: mean(group(false).map(|d| d.bleu.score)),
        off_target_pct: mean(group(false).map(|d| d.off_target_pct)),
        supervised_off_target_pct: mean(group(true).map(|d| d.off_target_pct)),
        supervised_directions: group(true).count(),
        zero_shot_directions: group(false).count(),
    }
}

/// Directions to and from the pivot.
pub fn pivot_directions(pivot: &LangCode, languages: &[LangCode]) -> BTreeSet<(LangCode, LangCode)> {
    languages
        .iter()
        .filter(|l| *l != pivot)
        .flat_map(|l| [(pivot.clone(), l.clone()), (l.clone(), pivot.clone())])
        .collect()
}

/// Every ordered pair of distinct test-set languages, row-major in column order.
pub fn all_directions(languages: &[LangCode]) -> Vec<(LangCode, LangCode)> {
    let mut out = Vec::new();
    for s in languages {
        for t in languages {
            if s != t {
                out.push((s.clone(), t.clone()));
            }
        }
    }
    out
}

pub struct EvalSetup<'a> {
    pub langid: &'a LangIdModel,
    pub supervised: &'a BTreeSet<(LangCode, LangCode)>,
    pub decode: &'a DecodeConfig,
    pub smoothing: BleuSmoothing,
}

/// Translates every ordered pair of test-set columns and scores it.
pub fn evaluate_all_directions<T: Real>(
    state: &ModelState<T>,
    tok: &Tokenizer,
    strategy: LtStrategy,
    test: &MultiWayTestSet,
    setup: &EvalSetup<'_>,
) -> Result<EvalReport, EvalError> {
    let mut directions = Vec::new();
    for (src, tgt) in all_directions(&test.languages) {
        let srcs = test.column(&src).ok_or_else(|| EvalError::MissingColumn(src.clone()))?;
        let refs = test.column(&tgt).ok_or_else(|| EvalError::MissingColumn(tgt.clone()))?;
        let out = translate_corpus(state, tok, strategy, &src, &tgt, &srcs, setup.decode)
            .map_err(|e| EvalError::Direction { src: src.clone(), tgt: tgt.clone(), source: e })?;
        let hyps: Vec<&str> = out.iter().map(|t| t.text.as_str()).collect();
        directions.push(DirectionReport {
            supervised: setup.supervised.contains(&(src.clone(), tgt.clone())),
            bleu: corpus_bleu(&hyps, &refs, setup.smoothing)?,
            off_target_pct: off_target_rate(setup.langid, &hyps, &tgt),
            sentences: hyps.len(),
            src,
            tgt,
        });
    }
    let aggregate = aggregate(&directions);
    Ok(EvalReport {
        strategy,
        beam: setup.decode.beam,
        alpha: setup.decode.alpha,
        free_tlt: setup.decode.free_tlt,
        smoothing: setup.smoothing,
        directions,
        aggregate,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_json())
            .map_err(|e| EvalError::Report { path: path.display().to_string(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path)
            .map_err(|e| EvalError::Report { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_json(&text).map_err(|e| EvalError::Report { path: path.display().to_string(), msg: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lc(s: &str) -> LangCode {
        LangCode::new(s).unwrap()
    }

    fn bleu(h: &[&str], r: &[&str]) -> f64 {
        corpus_bleu(h, r, BleuSmoothing::None).unwrap().score
    }

    #[test]
    fn worked_example() {
        let r = corpus_bleu(&["a b c d e"], &["a b c d f"], BleuSmoothing::None).unwrap();
        assert_eq!(r.matches, [4, 3, 2, 1]);
        assert_eq!(r.totals, [5, 4, 3, 2]);
        assert!((r.score - 100.0 * 0.2f64.powf(0.25)).abs() < 1e-9);
        assert!((r.score - 66.87).abs() < 0.01);
    }

    #[test]
    fn extremes() {
        assert_eq!(bleu(&["the cat sat on the mat", "x y"], &["the cat sat on the mat", "x y"]), 100.0);
        assert_eq!(bleu(&["a b c d"], &["e f g h"]), 0.0);
        assert!(corpus_bleu(&["a b c d"], &["e f g h"], BleuSmoothing::None).unwrap().zero_precision);
        assert!(corpus_bleu(&["a"], &["a", "b"], BleuSmoothing::None).is_err());
    }

    #[test]
    fn punctuation_is_split() {
        assert_eq!(bleu_tokenize("Hello, world!"), vec!["Hello", ",", "world", "!"]);
        assert_eq!(bleu(&["Hello, world!"], &["Hello , world !"]), 100.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_output() {
        // Hyp is a 4-token prefix of an 8-token reference: precisions 1, BP = e^(1-2).
        let r = corpus_bleu(&["a b c d"], &["a b c d e f g h"], BleuSmoothing::None).unwrap();
        assert!((r.brevity_penalty - (-1.0f64).exp()).abs() < 1e-12);
        assert!((r.score - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn floor_smoothing_rescues_missing_higher_orders() {
        // p1 = 2/4, p2..p4 = (0+1)/(3+1), (0+1)/(2+1), (0+1)/(1+1).
        let r = corpus_bleu(&["a x b y"], &["a b c d"], BleuSmoothing::Floor).unwrap();
        let expected = 100.0 * (0.5f64 * 0.25 * (1.0 / 3.0) * 0.5).powf(0.25);
        assert!((r.score - expected).abs() < 1e-9);
        assert_eq!(bleu(&["a x b y"], &["a b c d"]), 0.0);
    }

    #[test]
    fn clipping_limits_repeated_words() {
        // "the the the the" vs "the cat": p1 = 1/4 clipped; higher orders 0.
        let r = corpus_bleu(&["the the the the"], &["the cat"], BleuSmoothing::None).unwrap();
        assert_eq!(r.matches[0], 1);
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn permutation_invariant() {
        let h = ["a b c", "d e f g", "h i"];
        let r = ["a b d", "d e f", "h i j"];
        let a = bleu(&h, &r);
        let b = bleu(&[h[2], h[0], h[1]], &[r[2], r[0], r[1]]);
        assert_eq!(a, b);
    }

    fn mono() -> BTreeMap<LangCode, Vec<String>> {
        let mut m = BTreeMap::new();
        for (code, stem) in [("en", "enw"), ("l1", "l1w"), ("l2", "l2w")] {
            let sents = (0..120)
                .map(|i| (0..6).map(|k| format!("{stem}{:03}", (i * 7 + k * 13) % 50)).collect::<Vec<_>>().join(" "))
                .collect();
            m.insert(lc(code), sents);
        }
        m
    }

    #[test]
    fn langid_classifies_own_language() {
        let m = mono();
        let langs: Vec<LangCode> = m.keys().cloned().collect();
        let model = train_langid(&m, &langs, 0.5).unwrap();
        for (lang, sents) in &m {
            for s in sents {
                let (got, margin) = detect_language(&model, s).unwrap();
                assert_eq!(&got, lang);
                assert!(margin > 0.0);
            }
        }
        let p = model.prior(&lc("en")).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(detect_language(&model, "   "), None);
    }

    #[test]
    fn one_foreign_word_does_not_flip_the_label() {
        let m = mono();
        let langs: Vec<LangCode> = m.keys().cloned().collect();
        let model = train_langid(&m, &langs, 0.5).unwrap();
        let s = "l1w001 l1w002 l1w003 l1w004 l1w005 l2w006 l1w007 l1w008 l1w009 l1w010 l1w011";
        assert_eq!(detect_language(&model, s).unwrap().0, lc("l1"));
        let mixed = "l1w001 l2w002 l1w003 l2w004";
        let got = detect_language(&model, mixed).unwrap().0;
        assert!(got == lc("l1") || got == lc("l2"));
    }

    #[test]
    fn langid_requires_every_language() {
        let m = mono();
        assert!(matches!(train_langid(&m, &[lc("en"), lc("l9")], 0.5), Err(EvalError::MissingLanguage(_))));
        let mut few = m.clone();
        few.get_mut(&lc("en")).unwrap().truncate(10);
        assert!(matches!(train_langid(&few, &[lc("en")], 0.5), Err(EvalError::TooFewSentences { .. })));
    }

    #[test]
    fn off_target_counts() {
        let m = mono();
        let langs: Vec<LangCode> = m.keys().cloned().collect();
        let model = train_langid(&m, &langs, 0.5).unwrap();
        let mut hyps: Vec<String> = m[&lc("l1")][..7].to_vec();
        hyps.extend(m[&lc("l2")][..3].iter().cloned());
        assert!((off_target_rate(&model, &hyps, &lc("l1")) - 30.0).abs() < 1e-12);
        assert_eq!(off_target_rate(&model, &m[&lc("en")][..10], &lc("en")), 0.0);
        assert_eq!(off_target_rate(&model, &m[&lc("en")][..10], &lc("l2")), 100.0);
        assert_eq!(off_target_rate(&model, &["", "  "], &lc("en")), 100.0);
    }

    #[test]
    fn direction_partition() {
        let langs: Vec<LangCode> = ["en", "de", "it", "nl"].iter().map(|s| lc(s)).collect();
        let all = all_directions(&langs);
        assert_eq!(all.len(), 12);
        let sup = pivot_directions(&langs[0], &langs);
        assert_eq!(all.iter().filter(|d| sup.contains(d)).count(), 6);
        assert_eq!(all.iter().filter(|d| !sup.contains(d)).count(), 6);
    }

    #[test]
    fn aggregate_is_unweighted_mean() {
        let rep = |sup: bool, score: f64, off: f64| DirectionReport {
            src: lc("en"),
            tgt: lc("de"),
            supervised: sup,
            bleu: BleuReport {
                score,
                precisions: [0.0; 4],
                matches: [0; 4],
                totals: [0; 4],
                brevity_penalty: 1.0,
                hyp_len: 0,
                ref_len: 0,
                zero_precision: false,
                smoothing: BleuSmoothing::None,
            },
            off_target_pct: off,
            sentences: 1,
        };
        let a = aggregate(&[rep(true, 10.0, 0.0), rep(true, 20.0, 10.0), rep(false, 3.0, 50.0), rep(false, 5.0, 30.0)]);
        assert_eq!(a.supervised_bleu, 15.0);
        assert_eq!(a.zero_shot_bleu, 4.0);
        assert_eq!(a.off_target_pct, 40.0);
        assert_eq!(a.supervised_off_target_pct, 5.0);
    }
}
