//! Language-tag strategies: where the source and target language tags go.
//!
//! | strategy      | encoder prefix | decoder prefix |
//! |---------------|----------------|----------------|
//! | `T-ENC`       | TLT            |                |
//! | `T-DEC`       |                | TLT            |
//! | `S-ENC-T-ENC` | SLT TLT        |                |
//! | `S-ENC-T-DEC` | SLT            | TLT            |
//!
//! Tags are kept as separate prefix lists until serialization so that the
//! underlying sentences are never touched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{LangCode, SentencePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LtStrategy {
    #[serde(rename = "T-ENC")]
    TEnc,
    #[serde(rename = "T-DEC")]
    TDec,
    #[serde(rename = "S-ENC-T-ENC")]
    SEncTEnc,
    #[serde(rename = "S-ENC-T-DEC")]
    SEncTDec,
}

impl LtStrategy {
    pub const ALL: [LtStrategy; 4] = [LtStrategy::TEnc, LtStrategy::TDec, LtStrategy::SEncTEnc, LtStrategy::SEncTDec];

    pub fn name(self) -> &'static str {
        match self {
            LtStrategy::TEnc => "T-ENC",
            LtStrategy::TDec => "T-DEC",
            LtStrategy::SEncTEnc => "S-ENC-T-ENC",
            LtStrategy::SEncTDec => "S-ENC-T-DEC",
        }
    }

    /// File-name friendly form, e.g. `s-enc-t-dec`.
    pub fn slug(self) -> String {
        self.name().to_ascii_lowercase()
    }

    pub fn has_source_tag(self) -> bool {
        matches!(self, LtStrategy::SEncTEnc | LtStrategy::SEncTDec)
    }

    /// Whether the target tag sits on the decoder side.
    pub fn target_tag_on_decoder(self) -> bool {
        matches!(self, LtStrategy::TDec | LtStrategy::SEncTDec)
    }
}

impl fmt::Display for LtStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown language-tag strategy {0:?} (expected T-ENC, T-DEC, S-ENC-T-ENC or S-ENC-T-DEC)")]
pub struct UnknownStrategy(pub String);

impl FromStr for LtStrategy {
    type Err = UnknownStrategy;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "tenc" => Ok(LtStrategy::TEnc),
            "tdec" => Ok(LtStrategy::TDec),
            "senctenc" => Ok(LtStrategy::SEncTEnc),
            "senctdec" => Ok(LtStrategy::SEncTDec),
            _ => Err(UnknownStrategy(s.to_string())),
        }
    }
}

/// `__<code>__`
pub fn tag_token(lang: &LangCode) -> String {
    format!("__{lang}__")
}

pub fn is_tag_token(token: &str) -> bool {
    token.strip_prefix("__").and_then(|t| t.strip_suffix("__")).is_some_and(|code| LangCode::new(code).is_ok())
}

/// A sentence pair with the tag prefixes chosen by a strategy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedPair {
    pub src_prefix: Vec<String>,
    pub src_text: String,
    pub tgt_prefix: Vec<String>,
    pub tgt_text: String,
    pub strategy: LtStrategy,
    pub src_lang: LangCode,
    pub tgt_lang: LangCode,
}

fn render(prefix: &[String], text: &str) -> String {
    if prefix.is_empty() {
        return text.to_string();
    }
    let mut out = prefix.join(" ");
    out.push(' ');
    out.push_str(text);
    out
}

impl TaggedPair {
    /// Serialized source side: space-joined prefix then the sentence.
    pub fn src_rendered(&self) -> String {
        render(&self.src_prefix, &self.src_text)
    }

    pub fn tgt_rendered(&self) -> String {
        render(&self.tgt_prefix, &self.tgt_text)
    }
}

/// `(encoder_prefix, decoder_prefix)` for a direction.
pub fn inference_prefix(strategy: LtStrategy, src: &LangCode, tgt: &LangCode) -> (Vec<String>, Vec<String>) {
    let (slt, tlt) = (tag_token(src), tag_token(tgt));
    match strategy {
        LtStrategy::TEnc => (vec![tlt], vec![]),
        LtStrategy::TDec => (vec![], vec![tlt]),
        LtStrategy::SEncTEnc => (vec![slt, tlt], vec![]),
        LtStrategy::SEncTDec => (vec![slt], vec![tlt]),
    }
}

pub fn apply_strategy(pair: &SentencePair, strategy: LtStrategy) -> TaggedPair {
    let (src_prefix, tgt_prefix) = inference_prefix(strategy, &pair.src_lang, &pair.tgt_lang);
    TaggedPair {
        src_prefix,
        src_text: pair.src_text.clone(),
        tgt_prefix,
        tgt_text: pair.tgt_text.clone(),
        strategy,
        src_lang: pair.src_lang.clone(),
        tgt_lang: pair.tgt_lang.clone(),
    }
}

/// Removes leading tag tokens (and the single space after each).
pub fn strip_tags(text: &str) -> &str {
    let mut rest = text;
    loop {
        let end = rest.find(' ').unwrap_or(rest.len());
        if end == 0 || !is_tag_token(&rest[..end]) {
            return rest;
        }
        rest = rest.get(end + 1..).unwrap_or("");
    }
}

/// Token-list form of [`strip_tags`].
pub fn strip_tag_tokens<S: AsRef<str>>(tokens: &[S]) -> &[S] {
    let n = tokens.iter().take_while(|t| is_tag_token(t.as_ref())).count();
    &tokens[n..]
}
