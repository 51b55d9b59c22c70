//! Word-level tokenizer with CLIP-style bracketing and a fixed 77-slot
//! context.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{contract, Error, Result};

pub const SOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const FIRST_WORD_ID: u32 = 5;
pub const CONTEXT_LEN: usize = 77;
/// Words kept after truncation so that both brackets fit.
pub const MAX_WORDS: usize = CONTEXT_LEN - 2;

pub const RESERVED: [&str; 5] = ["[SOS]", "[EOS]", "[PAD]", "[MASK]", "[UNK]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    word_to_id: HashMap<String, u32>,
    id_to_word: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            word_to_id: HashMap::new(),
            id_to_word: RESERVED.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Vocabulary {
    /// Admits every word seen at least `min_freq` times; ids follow
    /// lexicographic order.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            contract!("min_freq must be at least 1");
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut vocab = Self::default();
        for (w, n) in counts {
            if n >= min_freq {
                vocab.insert(w);
            }
        }
        Ok(vocab)
    }

    fn insert(&mut self, w: String) -> u32 {
        if let Some(id) = self.word_to_id.get(&w) {
            return *id;
        }
        let id = self.id_to_word.len() as u32;
        self.word_to_id.insert(w.clone(), id);
        self.id_to_word.push(w);
        id
    }

    /// Total id count including the reserved tokens.
    pub fn size(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.id_to_word.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, caption_id: &str, text: &str) -> TokenSequence {
        let ws = words(text);
        let kept = &ws[..ws.len().min(MAX_WORDS)];
        let mut ids = Vec::with_capacity(CONTEXT_LEN);
        ids.push(SOS);
        ids.extend(kept.iter().map(|w| self.id(w).unwrap_or(UNK)));
        ids.push(EOS);
        ids.resize(CONTEXT_LEN, PAD);
        TokenSequence::from_ids(caption_id, ids).expect("tokenize builds well-formed sequences")
    }

    /// Space-joined words of the non-special positions.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.word_ids()
            .iter()
            .map(|id| self.word(*id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, w) in self.id_to_word.iter().enumerate() {
            writeln!(f, "{w}\t{id}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut vocab = Self { word_to_id: HashMap::new(), id_to_word: Vec::new() };
        for (line_no, line) in f.lines().enumerate() {
            let line = line?;
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocabulary line {} lacks a tab", line_no + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("vocabulary line {} has a bad id", line_no + 1)))?;
            if id != line_no {
                return Err(Error::Format(format!("vocabulary ids must be dense, line {}", line_no + 1)));
            }
            if id < RESERVED.len() {
                if w != RESERVED[id] {
                    return Err(Error::Format(format!("reserved id {id} must be {}", RESERVED[id])));
                }
                vocab.id_to_word.push(w.to_string());
            } else {
                if vocab.word_to_id.contains_key(w) {
                    return Err(Error::Format(format!("duplicate vocabulary word {w:?}")));
                }
                vocab.insert(w.to_string());
            }
        }
        if vocab.id_to_word.len() < RESERVED.len() {
            return Err(Error::Format("vocabulary is missing reserved tokens".into()));
        }
        Ok(vocab)
    }
}

/// One bracketed, padded caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub caption_id: String,
    ids: Vec<u32>,
    special_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn from_ids(caption_id: &str, ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() || ids.len() > CONTEXT_LEN {
            contract!("token sequence length must be in 1..={CONTEXT_LEN}, got {}", ids.len());
        }
        if ids[0] != SOS {
            contract!("token sequence must start with [SOS]");
        }
        let eos: Vec<usize> = ids.iter().enumerate().filter(|(_, t)| **t == EOS).map(|(i, _)| i).collect();
        if eos.len() != 1 {
            contract!("token sequence needs exactly one [EOS], found {}", eos.len());
        }
        if ids[eos[0] + 1..].iter().any(|t| *t != PAD) {
            contract!("only [PAD] may follow [EOS]");
        }
        if ids[1..eos[0]].iter().any(|t| *t == SOS || *t == PAD) {
            contract!("[SOS]/[PAD] inside caption body");
        }
        let special_mask = ids.iter().enumerate().map(|(i, t)| i == 0 || i >= eos[0] || *t == PAD).collect();
        Ok(Self { caption_id: caption_id.to_string(), ids, special_mask })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn special_mask(&self) -> &[bool] {
        &self.special_mask
    }

    pub fn eos_position(&self) -> usize {
        self.ids.iter().position(|t| *t == EOS).unwrap()
    }

    /// Ids up to and including [EOS].
    pub fn unpadded(&self) -> &[u32] {
        &self.ids[..=self.eos_position()]
    }

    /// Positions that are neither brackets nor padding.
    pub fn word_positions(&self) -> Vec<usize> {
        (0..self.ids.len()).filter(|i| !self.special_mask[*i]).collect()
    }

    pub fn word_ids(&self) -> Vec<u32> {
        self.word_positions().into_iter().map(|i| self.ids[i]).collect()
    }

    pub fn word_count(&self) -> usize {
        self.eos_position() - 1
    }

    /// Replaces each word position by [MASK] with its own probability.
    /// `probs` lines up with `word_positions()`.
    pub fn apply_mask<R: Rng + ?Sized>(&self, probs: &[f64], rng: &mut R) -> Result<TokenSequence> {
        let positions = self.word_positions();
        if probs.len() != positions.len() {
            contract!("{} mask probabilities for {} words", probs.len(), positions.len());
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            contract!("mask probability {p} outside [0, 1]");
        }
        let mut out = self.clone();
        for (&pos, &p) in positions.iter().zip(probs) {
            // one draw per word keeps the stream aligned regardless of p
            let u: f64 = rng.gen();
            if u < p {
                out.ids[pos] = MASK;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lexicographic_ids() {
        let v = Vocabulary::build(&["a man", "a woman"], 1).unwrap();
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("man"), Some(6));
        assert_eq!(v.id("woman"), Some(7));
    }

    #[test]
    fn empty_corpus_only_reserved() {
        let v = Vocabulary::build::<&str>(&[], 1).unwrap();
        assert_eq!(v.size(), 5);
    }

    #[test]
    fn min_freq_filters() {
        let v = Vocabulary::build(&["a man", "a woman"], 2).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("man"), None);
    }

    #[test]
    fn zero_min_freq_rejected() {
        assert!(Vocabulary::build(&["x"], 0).is_err());
    }

    #[test]
    fn empty_text() {
        let v = Vocabulary::default();
        let s = v.tokenize("c", "");
        assert_eq!(s.ids()[0], SOS);
        assert_eq!(s.ids()[1], EOS);
        assert!(s.ids()[2..].iter().all(|t| *t == PAD));
        assert_eq!(s.ids().len(), 77);
    }

    #[test]
    fn punctuation_and_case() {
        let v = Vocabulary::build(&["a man"], 1).unwrap();
        let s = v.tokenize("c", "A man.");
        assert_eq!(&s.ids()[..5], &[SOS, 5, 6, EOS, PAD]);
    }

    #[test]
    fn long_caption_truncated() {
        let text = vec!["w"; 100].join(" ");
        let v = Vocabulary::build(&[text.as_str()], 1).unwrap();
        let s = v.tokenize("c", &text);
        assert_eq!(s.ids().len(), 77);
        assert_eq!(s.ids()[76], EOS);
        assert_eq!(s.word_count(), 75);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::build(&["a"], 1).unwrap();
        let s = v.tokenize("c", "a zebra");
        assert_eq!(s.ids()[2], UNK);
    }

    #[test]
    fn mask_extremes() {
        let v = Vocabulary::build(&["a b c"], 1).unwrap();
        let s = v.tokenize("c", "a b c");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(s.apply_mask(&[0.0; 3], &mut rng).unwrap(), s);
        let m = s.apply_mask(&[1.0; 3], &mut rng).unwrap();
        assert_eq!(m.word_ids(), vec![MASK; 3]);
        assert_eq!(m.ids()[0], SOS);
        assert_eq!(m.ids()[4], EOS);
    }

    #[test]
    fn mask_length_mismatch() {
        let v = Vocabulary::build(&["a b"], 1).unwrap();
        let s = v.tokenize("c", "a b");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(s.apply_mask(&[0.1], &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocabulary::build(&["the red coat", "a blue coat"], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("[SOS]\t0\n[EOS]\t1\n[PAD]\t2\n[MASK]\t3\n[UNK]\t4\n"));
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
