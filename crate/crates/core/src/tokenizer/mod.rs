//! Byte-pair-encoding subword tokenizer.
//!
//! Text is lowercased and split on whitespace; every word becomes its
//! characters followed by an end-of-word marker, and learned merges are
//! applied in rank order. The words `yes` and `no` are reserved whole-word
//! tokens with fixed ids so the decoder's answer is always a single token.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const YES_ID: usize = 3;
pub const NO_ID: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<eos>", "<unk>", "yes", "no"];
const END_OF_WORD: &str = "</w>";
const MERGES_HEADER: &str = "[merges]";

/// Learned vocabulary. Special tokens occupy ids `0..5` and are kept out of
/// the piece table, so a subword piece spelled `no` never aliases the
/// reserved answer token.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
}

fn reserved_word(word: &str) -> Option<usize> {
    match word {
        "yes" => Some(YES_ID),
        "no" => Some(NO_ID),
        _ => None,
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .map(|c| c.to_string())
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect()
}

/// Learns a vocabulary of at most `vocab_size` tokens.
///
/// The most frequent adjacent pair is merged first; ties go to the pair seen
/// earliest in the corpus, so the result depends only on corpus content and
/// order.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: Vec<(Vec<String>, usize)> = Vec::new();
    let mut word_index: HashMap<String, usize> = HashMap::new();
    let mut saw_text = false;
    for line in corpus {
        let line = line.as_ref().to_lowercase();
        for word in line.split_whitespace() {
            saw_text = true;
            if reserved_word(word).is_some() {
                continue;
            }
            match word_index.get(word) {
                Some(&i) => word_counts[i].1 += 1,
                None => {
                    word_index.insert(word.to_string(), word_counts.len());
                    word_counts.push((word_symbols(word), 1));
                }
            }
        }
    }
    if !saw_text {
        return Err(Error::Data("cannot train a tokenizer on an empty corpus".into()));
    }

    let mut chars: Vec<char> = word_index
        .keys()
        .flat_map(|w| w.chars())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    chars.sort_unstable();
    let base = SPECIALS.len() + 1 + chars.len();
    if vocab_size < base {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is smaller than the {base} specials and base symbols"
        )));
    }

    let mut vocab = Vocab::empty();
    for s in SPECIALS {
        vocab.push_token(s.to_string());
    }
    vocab.push_token(END_OF_WORD.to_string());
    for c in chars {
        vocab.push_token(c.to_string());
    }

    while vocab.len() < vocab_size {
        let Some(pair) = best_pair(&word_counts) else { break };
        let merged = format!("{}{}", pair.0, pair.1);
        for (symbols, _) in &mut word_counts {
            merge_in_place(symbols, &pair.0, &pair.1, &merged);
        }
        vocab.push_merge(pair);
        if !vocab.token_to_id.contains_key(&merged) {
            vocab.push_token(merged);
        }
    }
    Ok(vocab)
}

fn best_pair(words: &[(Vec<String>, usize)]) -> Option<(String, String)> {
    // pair -> (count, first-seen order)
    let mut counts: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
    let mut order = 0;
    for (symbols, n) in words {
        for w in symbols.windows(2) {
            let e = counts.entry((&w[0], &w[1])).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += n;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|((l, r), _)| (l.to_string(), r.to_string()))
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            symbols[i] = merged.to_string();
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl Vocab {
    fn empty() -> Self {
        Vocab {
            tokens: Vec::new(),
            token_to_id: HashMap::new(),
            merges: Vec::new(),
            merge_rank: HashMap::new(),
        }
    }

    fn push_token(&mut self, t: String) {
        if self.tokens.len() >= SPECIALS.len() {
            self.token_to_id.insert(t.clone(), self.tokens.len());
        }
        self.tokens.push(t);
    }

    fn push_merge(&mut self, pair: (String, String)) {
        self.merge_rank.insert(pair.clone(), self.merges.len());
        self.merges.push(pair);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of a special token name or a subword piece.
    pub fn id(&self, token: &str) -> Option<usize> {
        SPECIALS
            .iter()
            .position(|s| *s == token)
            .or_else(|| self.token_to_id.get(token).copied())
    }

    fn encode_word(&self, word: &str, out: &mut Vec<usize>) {
        if let Some(id) = reserved_word(word) {
            out.push(id);
            return;
        }
        // `None` marks a character outside the training set.
        let mut symbols: Vec<Option<String>> = word
            .chars()
            .map(|c| Some(c.to_string()).filter(|s| self.token_to_id.contains_key(s)))
            .chain(std::iter::once(Some(END_OF_WORD.to_string())))
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| match (&w[0], &w[1]) {
                    (Some(l), Some(r)) => self
                        .merge_rank
                        .get(&(l.clone(), r.clone()))
                        .map(|&rank| (rank, i)),
                    _ => None,
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i].as_deref() == Some(l.as_str()) && symbols[i + 1].as_deref() == Some(r.as_str()) {
                    symbols[i] = Some(format!("{l}{r}"));
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        out.extend(symbols.iter().map(|s| {
            s.as_ref()
                .and_then(|s| self.token_to_id.get(s).copied())
                .unwrap_or(UNK_ID)
        }));
    }

    /// Lowercases and tokenizes `text`. Characters outside the training set map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        let mut out = Vec::new();
        for word in lower.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Inverse of [`Vocab::encode`] for single-space separated, in-charset text.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Index {
                what: "vocabulary",
                index: id,
                size: self.len(),
            })?;
            match id {
                PAD_ID | EOS_ID => {}
                YES_ID | NO_ID => {
                    text.push_str(tok);
                    text.push(' ');
                }
                _ => text.push_str(&tok.replace(END_OF_WORD, " ")),
            }
        }
        if text.ends_with(' ') {
            text.pop();
        }
        Ok(text)
    }

    /// Serialised form: `token<TAB>id` lines, a `[merges]` line, then `left<TAB>right` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{t}\t{i}\n"));
        }
        s.push_str(MERGES_HEADER);
        s.push('\n');
        for (l, r) in &self.merges {
            s.push_str(&format!("{l}\t{r}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            source_name: "vocab".into(),
            line,
            message,
        };
        let mut vocab = Vocab::empty();
        let mut in_merges = false;
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            if line == MERGES_HEADER {
                in_merges = true;
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(n, format!("expected two tab-separated fields: {line:?}")))?;
            if in_merges {
                vocab.push_merge((a.to_string(), b.to_string()));
            } else {
                let id: usize = b
                    .parse()
                    .map_err(|_| parse_err(n, format!("bad token id {b:?}")))?;
                if id != vocab.len() {
                    return Err(parse_err(n, format!("token ids must be dense; expected {}", vocab.len())));
                }
                if id >= SPECIALS.len() && vocab.token_to_id.contains_key(a) {
                    return Err(parse_err(n, format!("duplicate token {a:?}")));
                }
                vocab.push_token(a.to_string());
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if vocab.token(i) != Some(s) {
                return Err(parse_err(i + 1, format!("special token {s} must have id {i}")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialised vocabulary.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Vocab {
        train_bpe(
            ["user read sports news", "the user read finance news today", "sports sports"],
            80,
        )
        .unwrap()
    }

    #[test]
    fn repeated_pair_is_merged_first() {
        let v = train_bpe(["aa aa aa"], 10).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
        assert_eq!(v.encode("aa").len(), 1);
    }

    #[test]
    fn vocab_size_below_base_symbols_is_rejected() {
        // 5 specials + end marker + {a, b, c}
        assert!(train_bpe(["abc"], 8).is_err());
        assert!(train_bpe(["abc"], 9).is_ok());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(train_bpe(Vec::<String>::new(), 100).is_err());
        assert!(train_bpe(["   "], 100).is_err());
    }

    #[test]
    fn reserved_answers_are_single_tokens() {
        let v = small();
        assert_eq!(v.encode("yes"), vec![YES_ID]);
        assert_eq!(v.encode("no"), vec![NO_ID]);
        assert_eq!(v.encode("YES"), vec![YES_ID]);
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn reserved_words_never_take_part_in_merges() {
        let v = train_bpe(["yes yes yes no no", "yesterday note nothing"], 60).unwrap();
        assert_eq!(v.encode("yes no"), vec![YES_ID, NO_ID]);
        // "no" as a piece of "note" is a different token from the reserved answer.
        let note = v.encode("note");
        assert!(!note.contains(&NO_ID) && !note.contains(&YES_ID));
        assert_eq!(v.decode(&note).unwrap(), "note");
        assert_eq!(v.decode(&v.encode("yesterday no nothing")).unwrap(), "yesterday no nothing");
    }

    #[test]
    fn round_trip_and_unknown_characters() {
        let v = small();
        let t = "user read sports news";
        assert_eq!(v.decode(&v.encode(t)).unwrap(), t);
        let ids = v.encode("zebra");
        assert!(ids.contains(&UNK_ID));
        assert!(!v.encode("user read").contains(&PAD_ID));
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let v = small();
        assert!(matches!(v.decode(&[v.len()]), Err(Error::Index { .. })));
    }

    #[test]
    fn serialisation_round_trips_and_fingerprint_is_stable() {
        let v = small();
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(small().fingerprint(), v.fingerprint());
        let other = train_bpe(["different corpus"], 80).unwrap();
        assert_ne!(other.fingerprint(), v.fingerprint());
    }

    #[test]
    fn ids_are_dense() {
        let v = small();
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()), Some(i));
        }
    }

    proptest! {
        #[test]
        fn round_trip_over_training_charset(words in prop::collection::vec("[a-z;:?.]{1,8}", 1..12)) {
            let v = train_bpe(["abcdefghijklmnopqrstuvwxyz;:?. sample text"], 60).unwrap();
            let text = words.join(" ");
            prop_assert_eq!(v.decode(&v.encode(&text)).unwrap(), text);
        }
    }
}
