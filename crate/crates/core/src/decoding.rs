//! Greedy and beam-search generation with forced decoder prefixes.
//!
//! A hypothesis is `BOS forced... generated...`. Lengths and `max_len`
//! count every token after BOS, including the forced prefix and EOS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LangCode;
use crate::model::{source_sequence, EncoderMemory, ModelError, ModelState};
use crate::numerics::Real;
use crate::tagging::{inference_prefix, strip_tags, LtStrategy};
use crate::tokenizer::{Tokenizer, BOS, EOS, PAD};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("max_len {max_len} leaves no room after a forced prefix of {prefix}")]
    MaxLenTooSmall { max_len: usize, prefix: usize },
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("tag {0} is not in the vocabulary")]
    UnknownTag(String),
    #[error("sentence {index}: {source}")]
    Sentence { index: usize, source: Box<DecodeError> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS.
    pub ids: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens after BOS.
    pub fn len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `((5 + len) / 6) ^ alpha`
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

pub fn rescore(h: &Hypothesis, alpha: f64) -> f64 {
    h.logprob / length_penalty(h.len(), alpha)
}

#[derive(Clone, Debug)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Finished hypotheses, best first, at most `beam` of them.
    pub beams: Vec<(Hypothesis, f64)>,
}

/// Default generation budget for a source of `src_len` tokens.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 10
}

fn check_len(max_len: usize, forced: &[u32]) -> Result<(), DecodeError> {
    if max_len < forced.len() + 1 {
        return Err(DecodeError::MaxLenTooSmall { max_len, prefix: forced.len() });
    }
    Ok(())
}

/// BOS followed by the forced ids, with their log-probabilities summed.
fn forced_start<T: Real>(
    state: &ModelState<T>,
    memory: &EncoderMemory<T>,
    forced: &[u32],
) -> Result<Hypothesis, DecodeError> {
    let mut h = Hypothesis { ids: vec![BOS], logprob: 0.0, finished: false };
    for &id in forced {
        let lp = state.next_token_logprobs(memory, std::slice::from_ref(&h.ids))?;
        h.logprob += lp[0][id as usize];
        h.ids.push(id);
    }
    Ok(h)
}

fn best_allowed(lp: &[f64], banned: &[u32]) -> u32 {
    let mut best = None::<(u32, f64)>;
    for (id, &v) in lp.iter().enumerate() {
        if banned.contains(&(id as u32)) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((id as u32, v));
        }
    }
    best.map(|b| b.0).unwrap_or(EOS)
}

/// Argmax decoding after the forced prefix; ties go to the lower id.
/// `src_ids` excludes the trailing EOS, which is appended here.
pub fn greedy<T: Real>(
    state: &ModelState<T>,
    src_ids: &[u32],
    forced: &[u32],
    max_len: usize,
    banned: &[u32],
) -> Result<Hypothesis, DecodeError> {
    check_len(max_len, forced)?;
    let memory = state.encode(&source_sequence(src_ids))?;
    let mut h = forced_start(state, &memory, forced)?;
    while h.len() < max_len {
        let lp = state.next_token_logprobs(&memory, std::slice::from_ref(&h.ids))?;
        let next = best_allowed(&lp[0], banned);
        h.logprob += lp[0][next as usize];
        h.ids.push(next);
        if next == EOS {
            break;
        }
    }
    h.finished = true;
    Ok(h)
}

fn by_score_then_ids(a: &(Hypothesis, f64), b: &(Hypothesis, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.ids.cmp(&b.0.ids))
}

/// Beam search over `beam` live hypotheses. Each step keeps the `beam`
/// best expansions by log-probability (ties by parent rank, then token id);
/// expansions ending in EOS or reaching `max_len` are set aside as finished.
/// The result maximizes `logprob / length_penalty(len, alpha)`.
pub fn beam_search<T: Real>(
    state: &ModelState<T>,
    src_ids: &[u32],
    forced: &[u32],
    beam: usize,
    max_len: usize,
    alpha: f64,
    banned: &[u32],
) -> Result<BeamOutput, DecodeError> {
    if beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    check_len(max_len, forced)?;
    let memory = state.encode(&source_sequence(src_ids))?;
    let start = forced_start(state, &memory, forced)?;
    let mut live = vec![start];
    let mut finished: Vec<(Hypothesis, f64)> = Vec::new();
    let horizon = length_penalty(max_len, alpha);
    while !live.is_empty() {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.ids.clone()).collect();
        let lps = state.next_token_logprobs(&memory, &prefixes)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * lps[0].len());
        for (pi, lp) in lps.iter().enumerate() {
            for (id, &v) in lp.iter().enumerate() {
                if !banned.contains(&(id as u32)) {
                    cands.push((live[pi].logprob + v, pi, id as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (score, pi, id) in cands {
            let mut ids = live[pi].ids.clone();
            ids.push(id);
            let done = id == EOS || ids.len() > max_len;
            let h = Hypothesis { ids, logprob: score, finished: done };
            if done {
                let s = rescore(&h, alpha);
                finished.push((h, s));
            } else {
                next.push(h);
            }
        }
        live = next;
        // Log-probabilities only fall, so no live hypothesis can beat the
        // best finished one once its optimistic final score is lower.
        if let Some(best) = finished.iter().map(|f| f.1).reduce(f64::max) {
            if live.iter().all(|h| h.logprob / horizon <= best && h.logprob <= best) {
                break;
            }
        }
    }
    finished.sort_by(by_score_then_ids);
    finished.truncate(beam);
    let best = finished[0].0.clone();
    Ok(BeamOutput { best, beams: finished })
}

/// Beam settings for the translation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Let the model predict decoder-side tags instead of forcing them.
    #[serde(default)]
    pub free_tlt: bool,
}

fn default_beam() -> usize {
    4
}

fn default_alpha() -> f64 {
    0.6
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: default_beam(), alpha: default_alpha(), free_tlt: false }
    }
}

/// Tokens never generated by the translation pipeline.
pub const BANNED: [u32; 2] = [PAD, BOS];

#[derive(Clone, Debug)]
pub struct Translation {
    pub text: String,
    pub hypothesis: Hypothesis,
    /// Number of forced ids after BOS.
    pub forced: usize,
}

fn tag_ids(tok: &Tokenizer, tags: &[String]) -> Result<Vec<u32>, DecodeError> {
    tags.iter().map(|t| tok.tag_id(t).ok_or_else(|| DecodeError::UnknownTag(t.clone()))).collect()
}

fn translate_one<T: Real>(
    state: &ModelState<T>,
    tok: &Tokenizer,
    enc_prefix: &[u32],
    forced: &[u32],
    sentence: &str,
    cfg: &DecodeConfig,
) -> Result<Translation, DecodeError> {
    let mut src = enc_prefix.to_vec();
    src.extend(tok.encode(sentence, &[]));
    let max_len = default_max_len(src.len()).max(forced.len() + 1);
    let out = beam_search(state, &src, forced, cfg.beam, max_len, cfg.alpha, &BANNED)?;
    let body: Vec<u32> = out.best.ids[1..]
        .iter()
        .copied()
        .filter(|&id| id != EOS && id != PAD && id != BOS && !tok.vocab().is_tag(id))
        .collect();
    let text = strip_tags(&tok.decode(&body)?).to_string();
    Ok(Translation { text, hypothesis: out.best, forced: forced.len() })
}

/// Translates `sentences` in order for one direction.
pub fn translate_corpus<T: Real, S: AsRef<str>>(
    state: &ModelState<T>,
    tok: &Tokenizer,
    strategy: LtStrategy,
    src_lang: &LangCode,
    tgt_lang: &LangCode,
    sentences: &[S],
    cfg: &DecodeConfig,
) -> Result<Vec<Translation>, DecodeError> {
    let (enc, dec) = inference_prefix(strategy, src_lang, tgt_lang);
    let enc = tag_ids(tok, &enc)?;
    let forced = if cfg.free_tlt { Vec::new() } else { tag_ids(tok, &dec)? };
    sentences
        .iter()
        .enumerate()
        .map(|(index, s)| {
            translate_one(state, tok, &enc, &forced, s.as_ref(), cfg)
                .map_err(|e| DecodeError::Sentence { index, source: Box::new(e) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerConfig;

    fn toy(seed: u64) -> ModelState<f64> {
        let cfg = TransformerConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            ffn_dim: 16,
            heads: 2,
            dropout: 0.0,
            max_positions: 16,
            vocab_size: 6,
            share_embeddings: true,
        };
        let mut m = ModelState::<f64>::init(cfg, seed).unwrap();
        for x in m.params_mut()[0].data_mut() {
            *x *= 4.0;
        }
        m
    }

    /// Every sequence of at most `max_len` tokens, scored token by token.
    fn exhaustive(m: &ModelState<f64>, src: &[u32], max_len: usize) -> (Vec<u32>, f64) {
        let mem = m.encode(&source_sequence(src)).unwrap();
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut stack = vec![(vec![BOS], 0.0)];
        while let Some((ids, lp)) = stack.pop() {
            let next = m.next_token_logprobs(&mem, std::slice::from_ref(&ids)).unwrap();
            for (id, &v) in next[0].iter().enumerate() {
                let mut ext = ids.clone();
                ext.push(id as u32);
                let total = lp + v;
                if id as u32 == EOS || ext.len() - 1 == max_len {
                    let better = match &best {
                        None => true,
                        Some((b, s)) => total > *s || (total == *s && ext < *b),
                    };
                    if better {
                        best = Some((ext, total));
                    }
                } else {
                    stack.push((ext, total));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        for seed in 0..4 {
            let m = toy(seed);
            let src = [3, 4, 5];
            let (ids, lp) = exhaustive(&m, &src, 3);
            let out = beam_search(&m, &src, &[], 6 * 6 * 6, 3, 0.0, &[]).unwrap();
            assert_eq!(out.best.ids, ids);
            assert!((out.best.logprob - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..4 {
            let m = toy(seed);
            let g = greedy(&m, &[4, 5], &[], 6, &[]).unwrap();
            let b = beam_search(&m, &[4, 5], &[], 1, 6, 0.0, &[]).unwrap();
            assert_eq!(g.ids, b.best.ids);
            assert!((g.logprob - b.best.logprob).abs() < 1e-12);
            let wide = beam_search(&m, &[4, 5], &[], 4, 6, 0.0, &[]).unwrap();
            assert!(wide.best.logprob >= g.logprob - 1e-12);
        }
    }

    #[test]
    fn forced_prefix_is_emitted_verbatim() {
        let m = toy(1);
        for forced in [vec![], vec![4], vec![5, 3]] {
            let g = greedy(&m, &[3], &forced, 8, &BANNED).unwrap();
            assert_eq!(&g.ids[1..1 + forced.len()], forced.as_slice());
            let b = beam_search(&m, &[3], &forced, 3, 8, 0.6, &BANNED).unwrap();
            for (h, _) in &b.beams {
                assert_eq!(h.ids[0], BOS);
                assert_eq!(&h.ids[1..1 + forced.len()], forced.as_slice());
                assert!(h.finished && h.logprob <= 0.0);
                assert!(!h.ids[1..].contains(&PAD) && !h.ids[1..].contains(&BOS));
            }
        }
    }

    #[test]
    fn best_has_top_rescored_score() {
        let m = toy(2);
        let out = beam_search(&m, &[3, 3, 4], &[], 4, 7, 0.6, &BANNED).unwrap();
        let top = out.beams.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rescore(&out.best, 0.6), top);
        assert!(out.beams.len() <= 4);
    }

    #[test]
    fn max_len_limits_and_validates() {
        let m = toy(3);
        let g = greedy(&m, &[3], &[], 2, &BANNED).unwrap();
        assert!(g.len() <= 2);
        assert!(matches!(greedy(&m, &[3], &[4, 4], 2, &[]), Err(DecodeError::MaxLenTooSmall { .. })));
        assert!(matches!(beam_search(&m, &[3], &[], 0, 4, 0.0, &[]), Err(DecodeError::ZeroBeam)));
    }

    #[test]
    fn length_penalty_values() {
        assert_eq!(length_penalty(1, 0.6), 1.0);
        assert!((length_penalty(7, 1.0) - 2.0).abs() < 1e-12);
        assert_eq!(length_penalty(30, 0.0), 1.0);
        assert_eq!(default_max_len(5), 20);
    }
}
