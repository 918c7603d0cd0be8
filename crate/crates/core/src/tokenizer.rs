//! Byte-pair encoding over Unicode codepoints, plus masked-LM corruption.
//!
//! Text is first cut into pieces: each run of non-space characters keeps the
//! single space that precedes it, and any other space is a piece by itself.
//! Merges never cross pieces, so decoding is plain concatenation.

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];
pub const MASK_LITERAL: &str = "<mask>";

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIALS.len()
}

/// Split text into merge domains; concatenating the pieces gives the text back.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        if bytes[i] == b' ' {
            i += 1;
            if i >= bytes.len() || bytes[i] == b' ' {
                out.push(&text[start..i]);
                continue;
            }
        }
        while i < bytes.len() && bytes[i] != b' ' {
            i += 1;
        }
        out.push(&text[start..i]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    lookup: HashMap<String, u32>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    specials: Vec<String>,
}

/// Ids of a tokenized text, possibly cut at a length bound.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

impl BpeVocab {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || tokens[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::format(
                "vocabulary",
                "special tokens must occupy the first ids",
            ));
        }
        let mut lookup = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(SPECIALS.len()) {
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format(
                    "vocabulary",
                    format!("duplicate token {t:?}"),
                ));
            }
        }
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let id = |s: &str| {
                lookup.get(s).copied().ok_or_else(|| {
                    Error::format("vocabulary", format!("merge uses unknown token {s:?}"))
                })
            };
            let merged = id(&format!("{l}{r}"))?;
            ranks.insert((id(l)?, id(r)?), (rank, merged));
        }
        Ok(Self {
            tokens,
            merges,
            lookup,
            ranks,
        })
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

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = piece
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK)
            })
            .collect();
        // Apply the highest-priority merge present until none applies.
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0], w[1]))
                        .map(|&(rank, merged)| (rank, i, merged))
                })
                .min();
            let Some((rank, _, merged)) = best else { break };
            let mut next = Vec::with_capacity(syms.len());
            let mut it = syms.iter().copied().peekable();
            while let Some(a) = it.next() {
                match it.peek() {
                    Some(&b) if self.ranks.get(&(a, b)).map(|x| x.0) == Some(rank) => {
                        next.push(merged);
                        it.next();
                    }
                    _ => next.push(a),
                }
            }
            syms = next;
        }
        out.extend(syms);
    }

    /// Plain text to ids; never yields special ids except `UNK` for unseen characters.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for p in pieces(text) {
            self.encode_piece(p, &mut out);
        }
        out
    }

    pub fn encode_truncated(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = self.encode(text);
        let truncated = ids.len() > max_len;
        ids.truncate(max_len);
        TokenSequence { ids, truncated }
    }

    /// Like [`encode`](Self::encode) but each literal `<mask>` becomes the mask
    /// id. A single space before the marker is absorbed, since word tokens
    /// carry their leading space.
    pub fn encode_with_masks(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let parts: Vec<&str> = text.split(MASK_LITERAL).collect();
        for (i, part) in parts.iter().enumerate() {
            let part = if i + 1 < parts.len() {
                part.strip_suffix(' ').unwrap_or(part)
            } else {
                part
            };
            out.extend(self.encode(part));
            if i + 1 < parts.len() {
                out.push(MASK);
            }
        }
        out
    }

    /// Concatenate token strings; padding and sequence markers are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK as usize]))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            merges: self.merges.clone(),
            specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.specials != SPECIALS {
            return Err(Error::format("vocabulary", "unexpected special tokens"));
        }
        Self::from_parts(file.tokens, file.merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the serialized vocabulary; ties checkpoints to a tokenizer.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            self.to_json().expect("vocabulary serializes").as_bytes(),
        ))
    }
}

/// Greedy BPE training.
///
/// The base alphabet is every codepoint in the corpus. Each round merges the
/// most frequent adjacent pair (ties to the lexicographically smallest
/// pair of strings) until `vocab_size` is reached or no adjacent pair is
/// left. Training is deterministic; `_seed` is accepted for interface
/// symmetry only.
pub fn train_bpe<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    vocab_size: usize,
    _seed: u64,
) -> Result<BpeVocab> {
    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for text in corpus {
        for p in pieces(text) {
            *word_counts.entry(p).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Config("tokenizer corpus is empty".into()));
    }
    let alphabet: std::collections::BTreeSet<char> =
        word_counts.keys().flat_map(|w| w.chars()).collect();
    let base = alphabet.len() + SPECIALS.len();
    if vocab_size <= base {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} must exceed base alphabet plus specials ({base})"
        )));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut lookup: HashMap<String, u32> = HashMap::new();
    for c in alphabet {
        lookup.insert(c.to_string(), tokens.len() as u32);
        tokens.push(c.to_string());
    }
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, &n)| (w.chars().map(|c| lookup[&c.to_string()]).collect(), n))
        .collect();
    let mut merges = Vec::new();

    while tokens.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += n;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let key =
                    |p: &(u32, u32)| (tokens[p.0 as usize].clone(), tokens[p.1 as usize].clone());
                key(pb).cmp(&key(pa))
            })
        });
        let Some(((l, r), _)) = best else { break };
        let merged_str = format!("{}{}", tokens[l as usize], tokens[r as usize]);
        let merged = match lookup.get(&merged_str) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                lookup.insert(merged_str.clone(), id);
                tokens.push(merged_str);
                id
            }
        };
        merges.push((tokens[l as usize].clone(), tokens[r as usize].clone()));
        for (syms, _) in &mut words {
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            *syms = next;
        }
    }
    BpeVocab::from_parts(tokens, merges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlmTarget {
    pub position: usize,
    pub original: u32,
    pub corruption: Corruption,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<u32>,
    pub targets: Vec<MlmTarget>,
}

/// Select `ceil(rate * n)` non-special positions uniformly and corrupt them
/// 80/10/10 into mask / random token / unchanged.
pub fn mask_for_mlm(
    seq: &[u32],
    mask_rate: f64,
    vocab_size: usize,
    rng: &mut Rng,
) -> MaskedSequence {
    let candidates: Vec<usize> = (0..seq.len()).filter(|&i| !is_special(seq[i])).collect();
    let n = ((mask_rate * candidates.len() as f64) - 1e-9)
        .ceil()
        .max(0.0) as usize;
    let n = n.min(candidates.len());
    let mut chosen: Vec<usize> = sample(rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();
    let mut ids = seq.to_vec();
    let targets = chosen
        .into_iter()
        .map(|position| {
            let u: f64 = rng.random();
            let corruption = if u < 0.8 {
                ids[position] = MASK;
                Corruption::Mask
            } else if u < 0.9 && vocab_size > SPECIALS.len() {
                ids[position] = rng.random_range(SPECIALS.len() as u32..vocab_size as u32);
                Corruption::Random
            } else {
                Corruption::Keep
            };
            MlmTarget {
                position,
                original: seq[position],
                corruption,
            }
        })
        .collect();
    MaskedSequence { ids, targets }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn pieces_reassemble() {
        for t in ["red shoes", " lead", "a  b ", "", "x", "  "] {
            assert_eq!(pieces(t).concat(), t);
        }
        assert_eq!(pieces("red  shoes"), vec!["red", " ", " shoes"]);
    }

    #[test]
    fn aaaa_merges() {
        let v = train_bpe(["aaaa"], SPECIALS.len() + 1 + 2, 0).unwrap();
        assert_eq!(
            v.merges(),
            &[
                ("a".to_string(), "a".to_string()),
                ("aa".to_string(), "aa".to_string())
            ]
        );
        assert_eq!(v.encode("aaaa"), vec![v.id("aaaa").unwrap()]);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            train_bpe(Vec::<&str>::new(), 100, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(train_bpe(["abc"], 8, 0), Err(Error::Config(_))));
    }

    #[test]
    fn encode_edge_cases() {
        let v = train_bpe(["red shoes for men", "blue shoes"], 60, 0).unwrap();
        assert!(v.encode("").is_empty());
        let ids = v.encode("red shoes");
        assert_eq!(v.decode(&ids), "red shoes");
        assert!(ids.iter().all(|&i| !is_special(i)));
        assert_eq!(v.encode("zz"), vec![UNK, UNK]);
        let t = v.encode_truncated("red shoes for men", 2);
        assert!(t.truncated && t.ids.len() == 2);
        assert_eq!(
            v.encode_with_masks("red <mask>"),
            vec![v.encode("red")[0], MASK]
        );
    }

    #[test]
    fn json_round_trip_and_hash() {
        let v = train_bpe(["red shoes", "blue shirts"], 40, 0).unwrap();
        let back = BpeVocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        let json: serde_json::Value = serde_json::from_str(&v.to_json().unwrap()).unwrap();
        assert!(
            json.get("tokens").is_some()
                && json.get("merges").is_some()
                && json.get("specials").is_some()
        );
    }

    #[test]
    fn masking_counts() {
        let mut r = rng::rng(1);
        let m = mask_for_mlm(&[9], 0.15, 20, &mut r);
        assert_eq!(m.targets.len(), 1);
        let seq = vec![BOS, 7, 8, 9, EOS, PAD];
        let m = mask_for_mlm(&seq, 0.0, 20, &mut r);
        assert!(m.targets.is_empty() && m.ids == seq);
        let m = mask_for_mlm(&seq, 0.5, 20, &mut r);
        assert_eq!(m.targets.len(), 2);
        assert!(m.targets.iter().all(|t| !is_special(seq[t.position])));
    }
}
