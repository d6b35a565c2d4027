//! Representation analyses: layer-wise cross-lingual similarity, 2-D
//! projections of pooled encoder states, and attention paid to the target
//! language tag.

mod export;
mod reduce;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LangCode, MultiWayTestSet};
use crate::decoding::{beam_search, default_max_len, DecodeConfig, DecodeError, BANNED};
use crate::model::{Batch, Example, ModelError, ModelState};
use crate::numerics::{Real, Tensor};
use crate::tagging::{inference_prefix, tag_token, LtStrategy};
use crate::tokenizer::{Tokenizer, EOS, PAD};

pub use export::{
    export_analysis, parse_curves, parse_points, read_trace, write_curves, write_points, AnalysisOutputs,
};
pub use reduce::{pca, tsne, Pca, TsneOptions};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("language {0} is missing")]
    MissingLanguage(LangCode),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown tag {0}")]
    UnknownTag(String),
    #[error("malformed export at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Which positions contribute to a mean-pooled vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    /// Every non-PAD position, tags included.
    #[default]
    AllTokens,
    /// Non-PAD positions that are not language tags.
    ExcludeTags,
}

/// Mean-pooled layer outputs, indexed `[layer][sentence][feature]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledStates {
    pub encoder: Vec<Vec<Vec<f64>>>,
    /// Empty when no references were given.
    pub decoder: Vec<Vec<Vec<f64>>>,
}

impl PooledStates {
    /// Encoder layers followed by decoder layers.
    pub fn all_layers(&self) -> Vec<&Vec<Vec<f64>>> {
        self.encoder.iter().chain(&self.decoder).collect()
    }
}

const POOL_CHUNK: usize = 32;

fn tag_ids(tok: &Tokenizer, tags: &[String]) -> Result<Vec<u32>, AnalysisError> {
    tags.iter().map(|t| tok.tag_id(t).ok_or_else(|| AnalysisError::UnknownTag(t.clone()))).collect()
}

fn pool<T: Real>(layer: &Tensor<T>, ids: &[u32], tok: &Tokenizer, scope: PoolScope) -> Vec<Vec<f64>> {
    let [b, len, d]: [usize; 3] = layer.shape().try_into().expect("rank-3 layer output");
    (0..b)
        .map(|r| {
            let keep: Vec<usize> = (0..len)
                .filter(|&j| {
                    let id = ids[r * len + j];
                    id != PAD && !(scope == PoolScope::ExcludeTags && tok.vocab().is_tag(id))
                })
                .collect();
            let mut v = vec![0.0; d];
            for &j in &keep {
                for (acc, x) in v.iter_mut().zip(&layer.data()[(r * len + j) * d..][..d]) {
                    *acc += x.as_f64();
                }
            }
            let n = keep.len().max(1) as f64;
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect()
}

/// Runs the model on `sources` for `src_lang -> tgt_lang` and mean-pools
/// every layer. Decoder layers are teacher-forced on `references`.
#[allow(clippy::too_many_arguments)]
pub fn mean_pooled_states<T: Real, S: AsRef<str>>(
    state: &ModelState<T>,
    tok: &Tokenizer,
    strategy: LtStrategy,
    src_lang: &LangCode,
    tgt_lang: &LangCode,
    sources: &[S],
    references: Option<&[S]>,
    scope: PoolScope,
) -> Result<PooledStates, AnalysisError> {
    if let Some(r) = references {
        if r.len() != sources.len() {
            return Err(AnalysisError::Invalid(format!("{} sources but {} references", sources.len(), r.len())));
        }
    }
    let (enc, dec) = inference_prefix(strategy, src_lang, tgt_lang);
    let (enc, dec) = (tag_ids(tok, &enc)?, tag_ids(tok, &dec)?);
    let examples: Vec<Example> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut src = enc.clone();
            src.extend(tok.encode(s.as_ref(), &[]));
            let mut tgt = dec.clone();
            if let Some(r) = references {
                tgt.extend(tok.encode(r[i].as_ref(), &[]));
            }
            Example { src, tgt }
        })
        .collect();
    let cfg = state.config();
    let mut out = PooledStates {
        encoder: vec![Vec::new(); cfg.enc_layers],
        decoder: if references.is_some() { vec![Vec::new(); cfg.dec_layers] } else { Vec::new() },
    };
    for chunk in examples.chunks(POOL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs)?;
        let (_, trace) = state.forward(&batch, true)?;
        let trace = trace.expect("trace requested");
        for (l, t) in trace.enc_layer_outputs.iter().enumerate() {
            out.encoder[l].extend(pool(t, &batch.src_ids, tok, scope));
        }
        if references.is_some() {
            for (l, t) in trace.dec_layer_outputs.iter().enumerate() {
                out.decoder[l].extend(pool(t, &batch.tgt_in_ids, tok, scope));
            }
        }
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// `groups[language][layer][row]` -> per-layer mean over unordered language
/// pairs of the mean row-wise cosine.
pub fn pairwise_layer_similarity(groups: &[Vec<&Vec<Vec<f64>>>]) -> Result<Vec<f64>, AnalysisError> {
    if groups.len() < 2 {
        return Err(AnalysisError::Invalid("similarity needs at least two languages".into()));
    }
    let layers = groups[0].len();
    if groups.iter().any(|g| g.len() != layers) {
        return Err(AnalysisError::Invalid("languages disagree on layer count".into()));
    }
    let mut values = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut total = 0.0;
        let mut pairs = 0;
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let (ra, rb) = (groups[a][l], groups[b][l]);
                if ra.len() != rb.len() || ra.is_empty() {
                    return Err(AnalysisError::Invalid("row counts differ between languages".into()));
                }
                total += ra.iter().zip(rb).map(|(x, y)| cosine(x, y)).sum::<f64>() / ra.len() as f64;
                pairs += 1;
            }
        }
        values.push(total / pairs as f64);
    }
    Ok(values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Every other language translated into the anchor.
    ManyToOne,
    /// The anchor translated into every other language.
    OneToMany,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::ManyToOne => "many_to_one",
            Setting::OneToMany => "one_to_many",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "many_to_one" => Some(Setting::ManyToOne),
            "one_to_many" => Some(Setting::OneToMany),
            _ => None,
        }
    }
}

/// Mean cosine similarity per layer; encoder layers first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarityCurve {
    pub setting: Setting,
    pub strategy: LtStrategy,
    pub values: Vec<f64>,
}

/// Pools every non-anchor language for one setting and compares them.
#[allow(clippy::too_many_arguments)]
pub fn layerwise_similarity<T: Real>(
    state: &ModelState<T>,
    tok: &Tokenizer,
    strategy: LtStrategy,
    test: &MultiWayTestSet,
    setting: Setting,
    anchor: &LangCode,
    rows: usize,
    scope: PoolScope,
) -> Result<LayerSimilarityCurve, AnalysisError> {
    let test = test.truncated(rows);
    let anchor_col = test.column(anchor).ok_or_else(|| AnalysisError::MissingLanguage(anchor.clone()))?;
    let others: Vec<&LangCode> = test.languages.iter().filter(|l| *l != anchor).collect();
    if others.len() < 2 {
        return Err(AnalysisError::Invalid("need at least two languages besides the anchor".into()));
    }
    let mut pooled = Vec::new();
    for lang in others {
        let col = test.column(lang).ok_or_else(|| AnalysisError::MissingLanguage(lang.clone()))?;
        let p = match setting {
            Setting::ManyToOne => {
                mean_pooled_states(state, tok, strategy, lang, anchor, &col, Some(&anchor_col), scope)?
            }
            Setting::OneToMany => {
                mean_pooled_states(state, tok, strategy, anchor, lang, &anchor_col, Some(&col), scope)?
            }
        };
        pooled.push(p);
    }
    let groups: Vec<Vec<&Vec<Vec<f64>>>> = pooled.iter().map(PooledStates::all_layers).collect();
    Ok(LayerSimilarityCurve { setting, strategy, values: pairwise_layer_similarity(&groups)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMethod {
    Pca,
    Tsne,
}

impl ReduceMethod {
    pub fn name(self) -> &'static str {
        match self {
            ReduceMethod::Pca => "pca",
            ReduceMethod::Tsne => "tsne",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pca" => Some(ReduceMethod::Pca),
            "tsne" => Some(ReduceMethod::Tsne),
            _ => None,
        }
    }
}

/// Per-language 2-D coordinates; point `i` of a language is sentence `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedPointSet {
    pub method: ReduceMethod,
    pub seed: u64,
    pub points: BTreeMap<LangCode, Vec<[f64; 2]>>,
}

/// Minimum points per language accepted by [`reduce_2d`].
pub const MIN_POINTS_PER_LANGUAGE: usize = 5;

/// Projects the stacked vectors of all languages jointly.
pub fn reduce_2d(
    vectors: &BTreeMap<LangCode, Vec<Vec<f64>>>,
    method: ReduceMethod,
    seed: u64,
) -> Result<ReducedPointSet, AnalysisError> {
    let count = vectors.values().next().map_or(0, Vec::len);
    for (lang, v) in vectors {
        if v.len() < MIN_POINTS_PER_LANGUAGE {
            return Err(AnalysisError::Degenerate(format!(
                "{lang} has {} points, at least {MIN_POINTS_PER_LANGUAGE} required",
                v.len()
            )));
        }
        if v.len() != count {
            return Err(AnalysisError::Invalid("languages must have equal point counts".into()));
        }
    }
    let stacked: Vec<Vec<f64>> = vectors.values().flatten().cloned().collect();
    let coords: Vec<[f64; 2]> = match method {
        ReduceMethod::Pca => {
            let p = pca(&stacked)?;
            stacked.iter().map(|x| p.project(x)).collect()
        }
        ReduceMethod::Tsne => tsne(&stacked, &TsneOptions { seed, ..Default::default() })?,
    };
    let mut points = BTreeMap::new();
    for (i, lang) in vectors.keys().enumerate() {
        points.insert(lang.clone(), coords[i * count..(i + 1) * count].to_vec());
    }
    Ok(ReducedPointSet { method, seed, points })
}

/// Top-encoder-layer pooled vectors of each non-anchor language translated
/// into `anchor`.
pub fn encoder_vectors<T: Real>(
    state: &ModelState<T>,
    tok: &Tokenizer,
    strategy: LtStrategy,
    test: &MultiWayTestSet,
    anchor: &LangCode,
    rows: usize,
    scope: PoolScope,
) -> Result<BTreeMap<LangCode, Vec<Vec<f64>>>, AnalysisError> {
    let test = test.truncated(rows);
    let mut out = BTreeMap::new();
    for lang in test.languages.iter().filter(|l| *l != anchor) {
        let col = test.column(lang).ok_or_else(|| AnalysisError::MissingLanguage(lang.clone()))?;
        let mut p = mean_pooled_states(state, tok, strategy, lang, anchor, &col, None, scope)?;
        out.insert(lang.clone(), p.encoder.pop().unwrap_or_default());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// Decoder-to-encoder attention; the tag is a source token.
    Cross,
    /// Decoder self-attention; the tag is a decoder input token.
    DecoderSelf,
}

/// Head-averaged attention of one decoder layer over a generated translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub strategy: LtStrategy,
    pub source: AttentionSource,
    pub layer: usize,
    /// `matrix[step][key]`
    pub matrix: Vec<Vec<f64>>,
    pub key_labels: Vec<String>,
    pub query_labels: Vec<String>,
    pub tlt_column_index: usize,
}

/// Translates `sentence`, replays the hypothesis with teacher forcing and
/// returns the attention each decoder step pays to the keys. `layer`
/// defaults to the top decoder layer.
#[allow(clippy::too_many_arguments)]
pub fn extract_tlt_attention<T: Real>(
    state: &ModelState<T>,
    tok: &Tokenizer,
    strategy: LtStrategy,
    sentence: &str,
    src_lang: &LangCode,
    tgt_lang: &LangCode,
    decode: &DecodeConfig,
    layer: Option<usize>,
) -> Result<AttentionTrace, AnalysisError> {
    let (enc, dec) = inference_prefix(strategy, src_lang, tgt_lang);
    let (enc, dec) = (tag_ids(tok, &enc)?, tag_ids(tok, &dec)?);
    let mut src = enc;
    src.extend(tok.encode(sentence, &[]));
    let max_len = default_max_len(src.len()).max(dec.len() + 1);
    let hyp = beam_search(state, &src, &dec, decode.beam, max_len, decode.alpha, &BANNED)?.best;
    let mut tgt_in = hyp.ids.clone();
    if tgt_in.last() == Some(&EOS) {
        tgt_in.pop();
    }
    let mut full_src = src.clone();
    full_src.push(EOS);
    let batch = Batch::from_sequences(&[(full_src.clone(), tgt_in.clone())])?;
    let (_, trace) = state.forward(&batch, true)?;
    let trace = trace.expect("trace requested");
    let top = state.config().dec_layers - 1;
    let layer = layer.unwrap_or(top).min(top);
    let on_decoder = strategy.target_tag_on_decoder();
    let maps = if on_decoder { &trace.dec_self_attn } else { &trace.dec_cross_attn };
    let a = &maps[layer];
    let [_, heads, q, k]: [usize; 4] = a.shape().try_into().expect("rank-4 attention");
    let matrix: Vec<Vec<f64>> = (0..q)
        .map(|i| {
            (0..k)
                .map(|j| (0..heads).map(|h| a.data()[(h * q + i) * k + j].as_f64()).sum::<f64>() / heads as f64)
                .collect()
        })
        .collect();
    let label = |id: &u32| tok.vocab().token(*id).unwrap_or("<?>").to_string();
    let keys: Vec<u32> = if on_decoder { tgt_in.clone() } else { full_src };
    let tlt = tok.tag_id(&tag_token(tgt_lang)).ok_or_else(|| AnalysisError::UnknownTag(tag_token(tgt_lang)))?;
    let tlt_column_index = keys
        .iter()
        .position(|&id| id == tlt)
        .ok_or_else(|| AnalysisError::Invalid("target tag absent from attention keys".into()))?;
    Ok(AttentionTrace {
        strategy,
        source: if on_decoder { AttentionSource::DecoderSelf } else { AttentionSource::Cross },
        layer,
        matrix,
        key_labels: keys.iter().map(label).collect(),
        query_labels: tgt_in.iter().map(label).collect(),
        tlt_column_index,
    })
}

#[cfg(test)]
mod tests;
