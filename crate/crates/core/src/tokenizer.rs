//! Joint byte-pair subword vocabulary with atomic language tags.
//!
//! Words are split on whitespace, spelled out as characters followed by an
//! end-of-word marker, and merged greedily by pair frequency. Registered
//! tag tokens (`__en__`, ...) bypass merging and own a dedicated id each.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const END_OF_WORD: &str = "</w>";

const FILE_MAGIC: &str = "mnmt-bpe";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot learn subwords from an empty corpus")]
    EmptyCorpus,
    #[error("malformed protected token {0:?}")]
    BadProtected(String),
    #[error("vocabulary cap {cap} is below the {needed} base symbols")]
    CapTooSmall { cap: usize, needed: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("unsupported tokenizer file version {0}")]
    Version(String),
    #[error("malformed tokenizer file, line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Ordered merge rules; earlier rules apply first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    pub merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }
}

/// Bijective token/id maps. Ids: specials, then tags, then the base
/// alphabet, then merged symbols in merge order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    num_tags: usize,
}

impl Vocabulary {
    fn push(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_tag(&self, id: u32) -> bool {
        let first = SPECIALS.len() as u32;
        (first..first + self.num_tags as u32).contains(&id)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn tag_ids(&self) -> impl Iterator<Item = u32> + '_ {
        let first = SPECIALS.len() as u32;
        first..first + self.num_tags as u32
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: MergeTable,
    /// `(left id, right id) -> (rank, merged id)`
    ranks: HashMap<(u32, u32), (usize, u32)>,
    end_of_word: u32,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.merges == other.merges
    }
}

fn spell(word: &str) -> Vec<String> {
    word.chars().map(String::from).chain(std::iter::once(END_OF_WORD.to_string())).collect()
}

/// Code points, with the end-of-word marker ordered after every character.
fn order_key(sym: &str) -> Vec<u32> {
    let (stem, marker) = match sym.strip_suffix(END_OF_WORD) {
        Some(stem) => (stem, true),
        None => (sym, false),
    };
    let mut key: Vec<u32> = stem.chars().map(u32::from).collect();
    if marker {
        key.push(u32::MAX);
    }
    key
}

/// Learns up to `num_merges` merges, stopping early when no adjacent pair
/// remains or the vocabulary would exceed `vocab_cap`.
pub fn train_subwords<'a, I>(
    corpus: I,
    num_merges: usize,
    vocab_cap: usize,
    protected: &[String],
) -> Result<Tokenizer, TokenizerError>
where
    I: IntoIterator<Item = &'a str>,
{
    for p in protected {
        if p.is_empty() || p.chars().any(char::is_whitespace) {
            return Err(TokenizerError::BadProtected(p.clone()));
        }
    }
    let protected_set: BTreeSet<&str> = protected.iter().map(String::as_str).collect();
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut saw_any = false;
    for line in corpus {
        for w in line.split_whitespace() {
            saw_any = true;
            if !protected_set.contains(w) {
                *word_counts.entry(w.to_string()).or_insert(0) += 1;
            }
        }
    }
    if !saw_any {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut vocab = Vocabulary { tokens: Vec::new(), ids: HashMap::new(), num_tags: 0 };
    for s in SPECIALS {
        vocab.push(s);
    }
    for p in &protected_set {
        vocab.push(p);
    }
    vocab.num_tags = vocab.len() - SPECIALS.len();
    let alphabet: BTreeSet<String> = word_counts.keys().flat_map(|w| spell(w)).collect();
    for a in &alphabet {
        vocab.push(a);
    }
    if vocab.len() > vocab_cap {
        return Err(TokenizerError::CapTooSmall { cap: vocab_cap, needed: vocab.len() });
    }

    let mut words: Vec<(Vec<String>, u64)> = word_counts.iter().map(|(w, &c)| (spell(w), c)).collect();
    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut freq: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, c) in &words {
            for pair in syms.windows(2) {
                *freq.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += c;
            }
        }
        // Highest count; ties go to the lexicographically smallest pair.
        let Some(((l, r), _)) = freq.into_iter().max_by(|((la, ra), ca), ((lb, rb), cb)| {
            ca.cmp(cb).then_with(|| (order_key(lb), order_key(rb)).cmp(&(order_key(la), order_key(ra))))
        }) else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        if vocab.id(&merged).is_none() && vocab.len() + 1 > vocab_cap {
            break;
        }
        vocab.push(&merged);
        for (syms, _) in &mut words {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == l && syms[i + 1] == r {
                    syms[i] = merged.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        merges.push((l, r));
    }
    Ok(Tokenizer::from_parts(vocab, MergeTable { merges }))
}

impl Tokenizer {
    fn from_parts(vocab: Vocabulary, merges: MergeTable) -> Self {
        let ranks = merges
            .merges
            .iter()
            .enumerate()
            .filter_map(|(rank, (l, r))| {
                let (li, ri) = (vocab.id(l)?, vocab.id(r)?);
                let mi = vocab.id(&format!("{l}{r}"))?;
                Some(((li, ri), (rank, mi)))
            })
            .collect();
        let end_of_word = vocab.id(END_OF_WORD).unwrap_or(UNK);
        Tokenizer { vocab, merges, ranks, end_of_word }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn tag_id(&self, tag: &str) -> Option<u32> {
        self.vocab.id(tag).filter(|&id| self.vocab.is_tag(id))
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.tag_id(word) {
            out.push(id);
            return;
        }
        let mut syms: Vec<u32> = word
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.vocab.id(c.encode_utf8(&mut buf)).unwrap_or(UNK)
            })
            .collect();
        syms.push(self.end_of_word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0], p[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((rank, _, merged)) = best else { break };
            let mut i = 0;
            while i + 1 < syms.len() {
                if self.ranks.get(&(syms[i], syms[i + 1])).is_some_and(|&(r, _)| r == rank) {
                    syms[i] = merged;
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        out.extend(syms);
    }

    /// Tag ids for `tags`, then subword ids for `text`. No BOS/EOS.
    pub fn encode(&self, text: &str, tags: &[String]) -> Vec<u32> {
        let mut out: Vec<u32> = tags.iter().map(|t| self.tag_id(t).unwrap_or(UNK)).collect();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Encodes many sentences, memoizing repeated words.
    pub fn encode_many<S: AsRef<str>>(&self, texts: &[S]) -> Vec<Vec<u32>> {
        let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
        texts
            .iter()
            .map(|t| {
                let mut out = Vec::new();
                for w in t.as_ref().split_whitespace() {
                    let ids = cache.entry(w).or_insert_with(|| {
                        let mut v = Vec::new();
                        self.encode_word(w, &mut v);
                        v
                    });
                    out.extend_from_slice(ids);
                }
                out
            })
            .collect()
    }

    /// Joins subwords back into text; specials render as nothing and tags
    /// as themselves.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.vocab.len() })?;
            if self.vocab.is_special(id) {
                continue;
            }
            if self.vocab.is_tag(id) {
                out.push_str(tok);
                out.push(' ');
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                out.push_str(stem);
                out.push(' ');
            } else {
                out.push_str(tok);
            }
        }
        Ok(out.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{FILE_MAGIC} {FILE_VERSION}\n");
        out.push_str(&format!("specials {}\n", SPECIALS.len()));
        for s in SPECIALS {
            out.push_str(s);
            out.push('\n');
        }
        let tags: Vec<&str> = self.vocab.tag_ids().filter_map(|id| self.vocab.token(id)).collect();
        out.push_str(&format!("tags {}\n", tags.len()));
        for t in tags {
            out.push_str(t);
            out.push('\n');
        }
        let base_start = SPECIALS.len() + self.vocab.num_tags;
        let merged: BTreeSet<String> = self.merges.merges.iter().map(|(l, r)| format!("{l}{r}")).collect();
        let alphabet: Vec<&String> =
            self.vocab.tokens[base_start..].iter().take_while(|t| !merged.contains(*t)).collect();
        out.push_str(&format!("alphabet {}\n", alphabet.len()));
        for a in alphabet {
            out.push_str(a);
            out.push('\n');
        }
        out.push_str(&format!("merges {}\n", self.merges.len()));
        for (l, r) in &self.merges.merges {
            out.push_str(&format!("{l} {r}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| TokenizerError::Malformed { line: 0, msg: format!("missing {what}") })
        };
        let (_, header) = next("header")?;
        match header.split_once(' ') {
            Some((FILE_MAGIC, v)) if v == FILE_VERSION.to_string() => {}
            Some((FILE_MAGIC, v)) => return Err(TokenizerError::Version(v.to_string())),
            _ => return Err(TokenizerError::Malformed { line: 1, msg: "bad header".into() }),
        }
        let mut block = |name: &str| -> Result<Vec<String>, TokenizerError> {
            let (ln, head) = next(name)?;
            let count = head
                .strip_prefix(name)
                .and_then(|c| c.trim().parse::<usize>().ok())
                .ok_or_else(|| TokenizerError::Malformed { line: ln + 1, msg: format!("expected `{name} <count>`") })?;
            (0..count).map(|_| next(name).map(|(_, l)| l.to_string())).collect()
        };
        let specials = block("specials")?;
        if specials != SPECIALS {
            return Err(TokenizerError::Malformed { line: 2, msg: "unexpected specials block".into() });
        }
        let tags = block("tags")?;
        let alphabet = block("alphabet")?;
        let merge_lines = block("merges")?;

        let mut vocab = Vocabulary { tokens: Vec::new(), ids: HashMap::new(), num_tags: tags.len() };
        for s in SPECIALS.iter().map(|s| s.to_string()).chain(tags).chain(alphabet) {
            vocab.push(&s);
        }
        let mut merges = Vec::with_capacity(merge_lines.len());
        for (i, l) in merge_lines.iter().enumerate() {
            let (a, b) = l.split_once(' ').ok_or_else(|| TokenizerError::Malformed {
                line: i + 1,
                msg: format!("merge line {l:?} is not `left right`"),
            })?;
            vocab.push(&format!("{a}{b}"));
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(Tokenizer::from_parts(vocab, MergeTable { merges }))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text()).map_err(|e| TokenizerError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text =
            fs::read_to_string(path).map_err(|e| TokenizerError::Io { path: path.display().to_string(), source: e })?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags() -> Vec<String> {
        vec!["__en__".into(), "__es__".into()]
    }

    const TEXT: &[&str] = &["low lower lowest", "newer newest wider", "low low new"];

    #[test]
    fn zero_merges_gives_alphabet_plus_specials_and_tags() {
        let tok = train_subwords(TEXT.iter().copied(), 0, 1000, &tags()).unwrap();
        let chars: BTreeSet<char> = TEXT.iter().flat_map(|t| t.chars()).filter(|c| !c.is_whitespace()).collect();
        assert_eq!(tok.vocab_size(), 4 + 2 + chars.len() + 1);
        assert!(tok.merges().is_empty());
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let tok = train_subwords(["aa aa aa"], 1, 100, &[]).unwrap();
        // (a, a) = 3 ties (a, </w>) = 3; the marker sorts after every character.
        assert_eq!(tok.merges().merges[0], ("a".to_string(), "a".to_string()));
        let tok = train_subwords(["ab ab ba"], 1, 100, &[]).unwrap();
        // (a, b) = 2 and (b, </w>) = 2; (a, b) is smaller.
        assert_eq!(tok.merges().merges[0], ("a".to_string(), "b".to_string()));
        let tok = train_subwords(["aaa aaa"], 1, 100, &[]).unwrap();
        // (a, a) = 4 beats (a, </w>) = 2.
        assert_eq!(tok.merges().merges[0], ("a".to_string(), "a".to_string()));
        let tok = train_subwords(["ab cb db"], 1, 100, &[]).unwrap();
        // (b, </w>) = 3 beats each of (a, b), (c, b), (d, b) = 1.
        assert_eq!(tok.merges().merges[0], ("b".to_string(), "</w>".to_string()));
    }

    #[test]
    fn protected_tags_stay_atomic() {
        let corpus = ["__es__ hola mundo", "__en__ hello world __es__"];
        let tok = train_subwords(corpus.iter().copied(), 200, 1000, &tags()).unwrap();
        let ids = tok.encode("hola", &["__es__".to_string()]);
        assert_eq!(ids[0], tok.tag_id("__es__").unwrap());
        assert_eq!(tok.encode("__es__ hola", &[]), ids);
        assert_eq!(tok.encode("", &["__es__".to_string()]), vec![tok.tag_id("__es__").unwrap()]);
    }

    #[test]
    fn seen_words_have_no_unk_and_roundtrip() {
        let tok = train_subwords(TEXT.iter().copied(), 20, 1000, &tags()).unwrap();
        for t in TEXT {
            let ids = tok.encode(t, &[]);
            assert!(!ids.contains(&UNK));
            assert_eq!(tok.decode(&ids).unwrap(), *t);
            assert_eq!(tok.encode(&tok.decode(&ids).unwrap(), &[]), ids);
        }
        assert_eq!(tok.encode_many(TEXT), TEXT.iter().map(|t| tok.encode(t, &[])).collect::<Vec<_>>());
    }

    #[test]
    fn decode_elides_specials_and_rejects_bad_ids() {
        let tok = train_subwords(TEXT.iter().copied(), 5, 1000, &tags()).unwrap();
        assert_eq!(tok.decode(&[PAD, PAD]).unwrap(), "");
        assert!(tok.decode(&[10_000]).is_err());
        let unk = tok.encode("zzz", &[]);
        assert!(unk.contains(&UNK));
    }

    #[test]
    fn cap_limits_vocabulary() {
        let base = train_subwords(TEXT.iter().copied(), 0, 1000, &tags()).unwrap().vocab_size();
        let tok = train_subwords(TEXT.iter().copied(), 100, base + 3, &tags()).unwrap();
        assert_eq!(tok.vocab_size(), base + 3);
        assert!(train_subwords(TEXT.iter().copied(), 1, 3, &[]).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(train_subwords(["", "  "], 3, 100, &[]), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_subwords(TEXT.iter().copied(), 15, 1000, &tags()).unwrap();
        let b = train_subwords(TEXT.iter().copied(), 15, 1000, &tags()).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn file_roundtrip() {
        let tok = train_subwords(TEXT.iter().copied(), 12, 1000, &tags()).unwrap();
        let text = tok.to_text();
        assert!(text.contains("merges 12\n"));
        let back = Tokenizer::from_text(&text).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.to_text(), text);
        assert!(matches!(
            Tokenizer::from_text(&text.replacen("mnmt-bpe 1", "mnmt-bpe 9", 1)),
            Err(TokenizerError::Version(_))
        ));
        assert!(Tokenizer::from_text("garbage").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_identity_on_training_alphabet(words in prop::collection::vec("[a-f]{1,6}", 1..8)) {
            let text = words.join(" ");
            let tok = train_subwords([text.as_str(), "abc def fed cba"], 10, 1000, &tags()).unwrap();
            let ids = tok.encode(&text, &[]);
            prop_assert!(!ids.contains(&UNK));
            prop_assert_eq!(tok.decode(&ids).unwrap(), text.clone());
            let back = Tokenizer::from_text(&tok.to_text()).unwrap();
            prop_assert_eq!(back.encode(&text, &tags()), tok.encode(&text, &tags()));
        }
    }
}
