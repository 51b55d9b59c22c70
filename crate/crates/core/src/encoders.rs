//! Miniature pre-norm transformer encoders for patch blocks and token
//! sequences, with a tap on an intermediate layer.
//!
//! Both encoders work on row-stacked batches: the tokens of every item are
//! concatenated into one matrix so the dense projections run once per layer,
//! while attention stays within each item's segment. Text items are cut at
//! their [EOS], which is exactly equivalent to masking [PAD] out of
//! attention.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, CONTEXT_LEN};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Image tokens per item (M).
    pub patches: usize,
    /// Raw feature size of one patch.
    pub patch_dim: usize,
    pub max_text_len: usize,
    /// 1-based layer whose token embeddings feed NAM.
    pub tap_layer: usize,
    pub vocab_size: usize,
    /// One transformer trunk and output head serve both modalities; only the
    /// input stems differ.
    pub shared: bool,
    /// Learned positional embeddings. Off makes the image encoder
    /// permutation-equivariant over patches.
    pub positional: bool,
    /// Pass tap rows through the output head (final norm + projection) so
    /// image and text taps live in the joint embedding space.
    pub tap_projection: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 32,
            heads: 4,
            patches: 12,
            patch_dim: 32,
            max_text_len: CONTEXT_LEN,
            tap_layer: 3,
            vocab_size: 5,
            shared: true,
            positional: true,
            tap_projection: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 {
            contract!("encoder depth, width and heads must be positive");
        }
        if !self.width.is_multiple_of(self.heads) {
            contract!("width {} is not divisible by {} heads", self.width, self.heads);
        }
        if !(1..=self.depth).contains(&self.tap_layer) {
            contract!("tap layer {} outside 1..={}", self.tap_layer, self.depth);
        }
        if self.patches == 0 || self.patch_dim == 0 {
            contract!("patch count and patch dimension must be positive");
        }
        if self.max_text_len < 2 || self.max_text_len > CONTEXT_LEN {
            contract!("max_text_len must be in 2..={CONTEXT_LEN}");
        }
        if self.vocab_size < crate::tokenizer::FIRST_WORD_ID as usize {
            contract!("vocabulary of {} ids cannot hold the reserved tokens", self.vocab_size);
        }
        Ok(())
    }

    fn trunk_prefix(&self, text: bool) -> &'static str {
        match (self.shared, text) {
            (true, _) => "trunk.",
            (false, false) => "image.trunk.",
            (false, true) => "text.trunk.",
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update(t.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Registers every tensor on the tape, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable { tape.leaf(t.clone_value())? } else { tape.constant(t.clone_value())? };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Writes one blob per tensor into `dir`; returns `(file, checksum)`
    /// pairs in name order.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<(String, String)>> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = format!("{name}.bin");
            t.save(&dir.join(&file))?;
            files.push((file, t.checksum()));
        }
        Ok(files)
    }

    /// Inverse of [`Params::save_dir`]; every checksum must match.
    pub fn load_dir(dir: &Path, files: &[(String, String)]) -> Result<Self> {
        let mut p = Params::default();
        for (file, sum) in files {
            let name = file
                .strip_suffix(".bin")
                .ok_or_else(|| Error::Format(format!("parameter file {file} lacks .bin")))?;
            let t = Tensor::load(&dir.join(file))?;
            if &t.checksum() != sum {
                return Err(Error::Corruption(format!("checksum mismatch for {file}")));
            }
            p.insert(name, t);
        }
        Ok(p)
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(names: &[String], vars: &[Var]) -> Self {
        Self { vars: names.iter().cloned().zip(vars.iter().copied()).collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.width;
    let mut out = vec![
        ("image.patch.w".to_string(), vec![config.patch_dim, d], Init::Uniform(config.patch_dim)),
        ("image.patch.b".to_string(), vec![d], Init::Zero),
        ("image.cls".to_string(), vec![1, d], Init::Uniform(d)),
        ("text.embed".to_string(), vec![config.vocab_size, d], Init::Uniform(d)),
    ];
    if config.positional {
        out.push(("image.pos".to_string(), vec![config.patches + 1, d], Init::Uniform(d)));
        out.push(("text.pos".to_string(), vec![config.max_text_len, d], Init::Uniform(d)));
    }
    let mut prefixes = vec![config.trunk_prefix(false)];
    if !config.shared {
        prefixes.push(config.trunk_prefix(true));
    }
    for p in prefixes {
        for l in 0..config.depth {
            let b = format!("{p}block{l}.");
            for (n, s, i) in [
                ("ln1.g", vec![d], Init::One),
                ("ln1.b", vec![d], Init::Zero),
                ("attn.wq", vec![d, d], Init::Uniform(d)),
                ("attn.wk", vec![d, d], Init::Uniform(d)),
                ("attn.wv", vec![d, d], Init::Uniform(d)),
                ("attn.wo", vec![d, d], Init::Uniform(d)),
                ("attn.bq", vec![d], Init::Zero),
                ("attn.bv", vec![d], Init::Zero),
                ("attn.bo", vec![d], Init::Zero),
                ("ln2.g", vec![d], Init::One),
                ("ln2.b", vec![d], Init::Zero),
                ("mlp.w1", vec![d, 4 * d], Init::Uniform(d)),
                ("mlp.b1", vec![4 * d], Init::Zero),
                ("mlp.w2", vec![4 * d, d], Init::Uniform(4 * d)),
                ("mlp.b2", vec![d], Init::Zero),
            ] {
                out.push((format!("{b}{n}"), s, i));
            }
        }
        out.push((format!("{p}head.ln.g"), vec![d], Init::One));
        out.push((format!("{p}head.ln.b"), vec![d], Init::Zero));
        out.push((format!("{p}head.proj"), vec![d, d], Init::Uniform(d)));
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    One,
    /// U(−1/√fan, 1/√fan)
    Uniform(usize),
}

/// Deterministic initialization: norm gains 1, biases 0, every other tensor
/// uniform in ±1/√fan_in (±1/√d for embeddings).
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = shapes(config);
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut p = Params::default();
    for (name, shape, init) in specs {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::Uniform(fan) => {
                let s = 1.0 / (fan as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-s..s)).collect()
            }
        };
        p.insert(&name, Tensor::new(shape, data)?);
    }
    Ok(p)
}

/// Checks that `params` carries exactly the tensors `config` calls for.
pub fn check_params(config: &EncoderConfig, params: &Params) -> Result<()> {
    for (name, shape, _) in shapes(config) {
        let t = params
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Format(format!("parameter {name} missing for this encoder config")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!("parameter {name} has shape {:?}, config needs {shape:?}", t.shape())));
        }
    }
    Ok(())
}

/// Row-stacked encoder output for a batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// B×d global embeddings ([CLS] for images, [EOS] for text).
    pub global: Var,
    /// Tap rows of all items stacked, L2-normalized.
    pub tap: Var,
    /// `(first row, row count)` of each item inside `tap`.
    pub tap_segments: Vec<(usize, usize)>,
    /// Last-layer activations of every token, stacked.
    pub last: Var,
    /// `(first row, row count)` of each item inside `last`.
    pub token_segments: Vec<(usize, usize)>,
}

impl EncodedBatch {
    /// Per-row zero flags of the normalized tap.
    pub fn tap_zero_rows(&self, tape: &Tape) -> Vec<bool> {
        tape.zero_rows(self.tap).map(<[bool]>::to_vec).unwrap_or_default()
    }
}

struct Block {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bq: Var,
    bv: Var,
    bo: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Block {
    fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        let v = |n: &str| b.var(&format!("{prefix}{n}"));
        Ok(Self {
            ln1: (v("ln1.g")?, v("ln1.b")?),
            wq: v("attn.wq")?,
            wk: v("attn.wk")?,
            wv: v("attn.wv")?,
            wo: v("attn.wo")?,
            bq: v("attn.bq")?,
            bv: v("attn.bv")?,
            bo: v("attn.bo")?,
            ln2: (v("ln2.g")?, v("ln2.b")?),
            w1: v("mlp.w1")?,
            b1: v("mlp.b1")?,
            w2: v("mlp.w2")?,
            b2: v("mlp.b2")?,
        })
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn block_forward(
    tape: &mut Tape,
    blk: &Block,
    x: Var,
    segments: &[(usize, usize)],
    heads: usize,
    width: usize,
) -> Result<Var> {
    let h = tape.layer_norm(x, blk.ln1.0, blk.ln1.1)?;
    let q = linear(tape, h, blk.wq, blk.bq)?;
    // No key bias: it shifts every score of a query row by the same amount,
    // so softmax cancels it and its gradient is identically zero.
    let k = tape.matmul(h, blk.wk)?;
    let v = linear(tape, h, blk.wv, blk.bv)?;
    debug_assert_eq!(width % heads, 0);
    let o = tape.segment_attention(q, k, v, segments.to_vec(), heads)?;
    let o = linear(tape, o, blk.wo, blk.bo)?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, blk.ln2.0, blk.ln2.1)?;
    let h = linear(tape, h, blk.w1, blk.b1)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, blk.w2, blk.b2)?;
    tape.add(x, h)
}

fn head(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = b.var(&format!("{prefix}head.ln.g"))?;
    let bias = b.var(&format!("{prefix}head.ln.b"))?;
    let w = b.var(&format!("{prefix}head.proj"))?;
    let h = tape.layer_norm(x, g, bias)?;
    tape.matmul(h, w)
}

/// Runs the trunk; returns (tap-layer activations, last-layer activations).
fn trunk(
    tape: &mut Tape,
    b: &Bound,
    config: &EncoderConfig,
    text: bool,
    x: Var,
    segments: &[(usize, usize)],
) -> Result<(Var, Var)> {
    let prefix = config.trunk_prefix(text);
    let mut x = x;
    let mut tap = x;
    for l in 0..config.depth {
        let blk = Block::bind(b, &format!("{prefix}block{l}."))?;
        x = block_forward(tape, &blk, x, segments, config.heads, config.width)?;
        if l + 1 == config.tap_layer {
            tap = x;
        }
    }
    Ok((tap, x))
}

fn tap_rows(
    tape: &mut Tape,
    b: &Bound,
    config: &EncoderConfig,
    text: bool,
    tap: Var,
    rows: Vec<usize>,
) -> Result<Var> {
    let t = tape.select_rows(tap, rows)?;
    let t = if config.tap_projection { head(tape, b, config.trunk_prefix(text), t)? } else { t };
    tape.l2_normalize_rows(t)
}

/// Encodes a batch of M×patch_dim blocks.
pub fn encode_images(tape: &mut Tape, b: &Bound, config: &EncoderConfig, patches: &[&Tensor]) -> Result<EncodedBatch> {
    if patches.is_empty() {
        contract!("empty image batch");
    }
    let (m, d_in) = (config.patches, config.patch_dim);
    let mut stacked = Vec::with_capacity(patches.len() * m * d_in);
    for (i, p) in patches.iter().enumerate() {
        if p.dims2() != (m, d_in) {
            contract!("image {i}: patch block {:?} but config needs {m}×{d_in}", p.shape());
        }
        stacked.extend_from_slice(p.data());
    }
    let n = patches.len();
    let raw = tape.constant(Tensor::new(vec![n * m, d_in], stacked)?)?;
    let proj = linear(tape, raw, b.var("image.patch.w")?, b.var("image.patch.b")?)?;
    let with_cls = tape.concat_rows(&[b.var("image.cls")?, proj])?;
    let order: Vec<usize> = (0..n).flat_map(|s| std::iter::once(0).chain((0..m).map(move |j| 1 + s * m + j))).collect();
    let mut x = tape.select_rows(with_cls, order)?;
    if config.positional {
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..=m).collect();
        let pos = tape.run(crate::numerics::Kernel::Embedding { ids: pos_ids }, &[b.var("image.pos")?])?;
        x = tape.add(x, pos)?;
    }
    let segments: Vec<(usize, usize)> = (0..n).map(|s| (s * (m + 1), m + 1)).collect();
    let (tap_act, last) = trunk(tape, b, config, false, x, &segments)?;

    let cls_rows: Vec<usize> = segments.iter().map(|s| s.0).collect();
    let g = tape.select_rows(last, cls_rows)?;
    let global = head(tape, b, config.trunk_prefix(false), g)?;
    let patch_rows: Vec<usize> = segments.iter().flat_map(|&(s, len)| s + 1..s + len).collect();
    let tap = tap_rows(tape, b, config, false, tap_act, patch_rows)?;
    let tap_segments = (0..n).map(|s| (s * m, m)).collect();
    Ok(EncodedBatch { global, tap, tap_segments, last, token_segments: segments })
}

/// Encodes a batch of token sequences. Each sequence contributes its tokens
/// up to and including [EOS].
pub fn encode_texts(
    tape: &mut Tape,
    b: &Bound,
    config: &EncoderConfig,
    seqs: &[&TokenSequence],
) -> Result<EncodedBatch> {
    if seqs.is_empty() {
        contract!("empty text batch");
    }
    let mut ids = Vec::new();
    let mut pos_ids = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        let u = s.unpadded();
        if u.len() > config.max_text_len {
            contract!("sequence {} has {} tokens, more than {}", s.caption_id, u.len(), config.max_text_len);
        }
        if let Some(bad) = u.iter().find(|t| **t as usize >= config.vocab_size) {
            contract!("token id {bad} outside a vocabulary of {}", config.vocab_size);
        }
        segments.push((ids.len(), u.len()));
        ids.extend(u.iter().map(|t| *t as usize));
        pos_ids.extend(0..u.len());
    }
    let mut x = tape.run(crate::numerics::Kernel::Embedding { ids }, &[b.var("text.embed")?])?;
    if config.positional {
        let pos = tape.run(crate::numerics::Kernel::Embedding { ids: pos_ids }, &[b.var("text.pos")?])?;
        x = tape.add(x, pos)?;
    }
    let (tap_act, last) = trunk(tape, b, config, true, x, &segments)?;

    let eos_rows: Vec<usize> = segments.iter().map(|&(s, len)| s + len - 1).collect();
    let g = tape.select_rows(last, eos_rows)?;
    let global = head(tape, b, config.trunk_prefix(true), g)?;
    let word_rows: Vec<usize> = segments.iter().flat_map(|&(s, len)| s + 1..s + len - 1).collect();
    let mut tap_segments = Vec::with_capacity(seqs.len());
    let mut at = 0;
    for &(_, len) in &segments {
        tap_segments.push((at, len - 2));
        at += len - 2;
    }
    let tap = tap_rows(tape, b, config, true, tap_act, word_rows)?;
    Ok(EncodedBatch { global, tap, tap_segments, last, token_segments: segments })
}

/// Projects selected last-layer rows through the text output head.
pub fn text_head(tape: &mut Tape, b: &Bound, config: &EncoderConfig, last: Var, rows: Vec<usize>) -> Result<Var> {
    let x = tape.select_rows(last, rows)?;
    head(tape, b, config.trunk_prefix(true), x)
}

/// Value-level encoder output for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// 1×d
    pub global: Tensor,
    /// rows×d, L2-normalized
    pub tap: Tensor,
    pub tap_zero_rows: Vec<bool>,
}

fn single(tape: &mut Tape, enc: &EncodedBatch) -> EncoderOutput {
    let zero = enc.tap_zero_rows(tape);
    EncoderOutput { global: tape.take_value(enc.global), tap: tape.take_value(enc.tap), tap_zero_rows: zero }
}

pub fn encode_image(params: &Params, config: &EncoderConfig, patches: &Tensor) -> Result<EncoderOutput> {
    let mut tape = Tape::untracked();
    let b = params.bind(&mut tape, false)?;
    let enc = encode_images(&mut tape, &b, config, &[patches])?;
    Ok(single(&mut tape, &enc))
}

pub fn encode_text(params: &Params, config: &EncoderConfig, seq: &TokenSequence) -> Result<EncoderOutput> {
    let mut tape = Tape::untracked();
    let b = params.bind(&mut tape, false)?;
    let enc = encode_texts(&mut tape, &b, config, &[seq])?;
    Ok(single(&mut tape, &enc))
}

/// Split a stacked tensor into the row blocks named by `segments`.
pub fn split_rows(t: &Tensor, segments: &[(usize, usize)]) -> Vec<Tensor> {
    let c = t.cols();
    segments
        .iter()
        .map(|&(s, len)| Tensor::new(vec![len, c], t.data()[s * c..(s + len) * c].to_vec()).unwrap())
        .collect()
}
