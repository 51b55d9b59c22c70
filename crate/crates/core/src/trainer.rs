//! Training loop: one tracked text pass on the masked caption, and in NAM
//! mode one untracked pass on the full caption whose estimate is stored for
//! the next epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Dataset;
use crate::encoders::{check_params, encode_images, encode_texts, init_params, split_rows, text_head, EncoderConfig, Params};
use crate::error::{contract, Error, Result};
use crate::losses::{mlm_loss, sdm_loss, SdmConfig};
use crate::nam::{estimate, NamConfig, NoiseTable};
use crate::numerics::{Tape, Tensor};
use crate::tokenizer::{TokenSequence, Vocabulary, CONTEXT_LEN, MASK};

pub const CHECKPOINT_VERSION: u32 = 1;
const MLM_W: &str = "mlm.head.w";
const MLM_B: &str = "mlm.head.b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Nam,
    Em,
    None,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nam" => Ok(Self::Nam),
            "em" => Ok(Self::Em),
            "none" => Ok(Self::None),
            _ => Err(Error::Contract(format!("mask mode {s:?} is not one of nam, em, none"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nam => "nam",
            Self::Em => "em",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
}

/// Architecture knobs; sizes that follow from the data (patches, patch
/// width, vocabulary) are filled in when training starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub shared: bool,
    pub positional: bool,
    pub tap_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            depth: e.depth,
            width: e.width,
            heads: e.heads,
            shared: e.shared,
            positional: e.positional,
            tap_projection: e.tap_projection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// L2 coefficient added to the gradient; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub clip_norm: Option<f64>,
    pub mask_mode: MaskMode,
    pub mlm_enabled: bool,
    pub nam: NamConfig,
    pub sdm: SdmConfig,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk scale: randomly initialised encoders need a far larger step than
    /// the pretrained setting.
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            lr: 1e-3,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
            mask_mode: MaskMode::Nam,
            mlm_enabled: false,
            nam: NamConfig::default(),
            sdm: SdmConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Values of the original large-scale protocol, kept for reference.
    pub fn large_scale() -> Self {
        Self { epochs: 30, batch_size: 64, lr: 1e-5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            contract!("batch size must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            contract!("learning rate must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_epsilon > 0.0) {
            contract!("Adam needs β1, β2 in [0, 1) and ε > 0");
        }
        if !(self.weight_decay >= 0.0) {
            contract!("weight decay must be ≥ 0");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                contract!("clip norm must be positive");
            }
        }
        self.nam.validate()?;
        self.sdm.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Contract(format!("run config {}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn encoder(&self, dataset: &Dataset, vocab_size: usize) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            depth: m.depth,
            width: m.width,
            heads: m.heads,
            patches: dataset.spec.patches,
            patch_dim: dataset.spec.patch_dim,
            max_text_len: CONTEXT_LEN,
            tap_layer: self.nam.tap_layer,
            vocab_size,
            shared: m.shared,
            positional: m.positional,
            tap_projection: m.tap_projection,
        }
    }
}

/// `lr · ½(1 + cos(π t / (T−1)))`: exactly `lr` at the first step and 0 at
/// the last.
pub fn cosine_lr(lr: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let x = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * lr * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Serializable ChaCha position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Format(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Format("rng seed is not 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|e| Error::Format(format!("rng position: {e}")))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub captions: u64,
    pub image_passes: u64,
    /// Caption encodings on a gradient-tracking tape.
    pub tracked_text_passes: u64,
    /// Caption encodings on an untracked tape (the NAM estimate).
    pub untracked_text_passes: u64,
    pub words: u64,
    pub masked_words: u64,
    /// Steps whose fetched probabilities were all exactly `p`.
    pub constant_prob_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub loss_sdm: f64,
    pub loss_mlm: f64,
    pub mask_rate: f64,
}

pub const TRACE_HEADER: &str = "step,epoch,lr,loss_sdm,loss_mlm,mask_rate";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.epoch, r.lr, r.loss_sdm, r.loss_mlm, r.mask_rate);
    }
    s
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Format("loss trace header mismatch".into()));
    }
    let bad = |l: &str| Error::Format(format!("bad loss trace row {l:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            Ok(TraceRow {
                step: f[0].parse().map_err(|_| bad(l))?,
                epoch: f[1].parse().map_err(|_| bad(l))?,
                lr: f[2].parse().map_err(|_| bad(l))?,
                loss_sdm: f[3].parse().map_err(|_| bad(l))?,
                loss_mlm: f[4].parse().map_err(|_| bad(l))?,
                mask_rate: f[5].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Params,
    pub v: Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: EncoderConfig,
    pub vocab: Vocabulary,
    pub params: Params,
    pub adam: AdamState,
    pub table: NoiseTable,
    /// Completed epochs.
    pub epoch: u32,
    pub step: u64,
    /// Drives batch order; kept apart from masking so that every mask mode
    /// sees the same batches.
    pub sampler_rng: ChaCha8Rng,
    pub mask_rng: ChaCha8Rng,
    pub trace: Vec<TraceRow>,
    pub counters: Counters,
}

fn zeros_like(p: &Params) -> Params {
    let mut z = Params::default();
    for (n, t) in p.iter() {
        z.insert(n, Tensor::zeros(t.shape()));
    }
    z
}

/// Vocabulary over every caption of the dataset.
pub fn dataset_vocabulary(dataset: &Dataset) -> Result<Vocabulary> {
    let texts: Vec<&str> = dataset.captions.iter().map(|c| c.text.as_str()).collect();
    Vocabulary::build(&texts, 1)
}

impl TrainState {
    pub fn init(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let vocab = dataset_vocabulary(dataset)?;
        let encoder = config.encoder(dataset, vocab.size());
        let mut params = init_params(&encoder, config.seed)?;
        if config.mlm_enabled {
            let d = encoder.width;
            let v = encoder.vocab_size;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(3);
            let s = 1.0 / (d as f64).sqrt();
            params.insert(MLM_W, Tensor::new(vec![d, v], (0..d * v).map(|_| rng.gen_range(-s..s)).collect())?);
            params.insert(MLM_B, Tensor::zeros(&[v]));
        }
        let mut sampler_rng = ChaCha8Rng::seed_from_u64(config.seed);
        sampler_rng.set_stream(1);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
        mask_rng.set_stream(2);
        let table = NoiseTable::new();
        Ok(Self {
            config: config.clone(),
            encoder,
            vocab,
            adam: AdamState { t: 0, m: zeros_like(&params), v: zeros_like(&params) },
            params,
            table,
            epoch: 0,
            step: 0,
            sampler_rng,
            mask_rng,
            trace: Vec::new(),
            counters: Counters::default(),
        })
    }
}

/// Caption-level lookups shared by every step.
pub struct Prepared {
    pub seqs: Vec<TokenSequence>,
    /// Caption index → image index.
    pub image_of: Vec<usize>,
    /// Caption index → identity.
    pub identity_of: Vec<u64>,
    /// Train identity → its caption indices, sorted.
    pub train_captions: BTreeMap<u64, Vec<usize>>,
}

impl Prepared {
    pub fn new(dataset: &Dataset, vocab: &Vocabulary) -> Result<Self> {
        let index = dataset.image_index();
        let mut image_of = Vec::with_capacity(dataset.captions.len());
        let mut identity_of = Vec::with_capacity(dataset.captions.len());
        for c in &dataset.captions {
            let i = *index
                .get(c.image_id.as_str())
                .ok_or_else(|| Error::Contract(format!("caption {} has no image", c.caption_id)))?;
            image_of.push(i);
            identity_of.push(dataset.images[i].identity);
        }
        let seqs = dataset.captions.iter().map(|c| vocab.tokenize(&c.caption_id, &c.text)).collect();
        let mut train_captions: BTreeMap<u64, Vec<usize>> =
            dataset.splits.train.iter().map(|id| (*id, Vec::new())).collect();
        for (ci, id) in identity_of.iter().enumerate() {
            if let Some(v) = train_captions.get_mut(id) {
                v.push(ci);
            }
        }
        train_captions.retain(|_, v| !v.is_empty());
        Ok(Self { seqs, image_of, identity_of, train_captions })
    }

    fn rounds(&self) -> usize {
        self.train_captions.values().map(Vec::len).max().unwrap_or(0)
    }

    /// Steps per epoch; independent of the shuffle.
    pub fn steps_per_epoch(&self, batch: usize) -> u64 {
        (0..self.rounds())
            .map(|r| (self.train_captions.values().filter(|v| v.len() > r).count() / batch) as u64)
            .sum()
    }

    /// One epoch of batches. Every identity walks a shuffled copy of its
    /// captions, one per round; within a round the identities are shuffled
    /// and cut into batches of distinct identities, dropping the remainder.
    pub fn epoch_batches(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut walks: Vec<Vec<usize>> = self
            .train_captions
            .values()
            .map(|v| {
                let mut w = v.clone();
                w.shuffle(rng);
                w
            })
            .collect();
        let mut out = Vec::new();
        for r in 0..self.rounds() {
            let mut order: Vec<usize> = (0..walks.len()).filter(|i| walks[*i].len() > r).collect();
            order.shuffle(rng);
            for chunk in order.chunks_exact(batch) {
                out.push(chunk.iter().map(|i| walks[*i][r]).collect());
            }
        }
        walks.clear();
        out
    }
}

/// Scalars of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_sdm: f64,
    pub loss_mlm: f64,
    pub mask_rate: f64,
}

/// One optimisation step on the given caption indices.
pub fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    prep: &Prepared,
    batch: &[usize],
    lr: f64,
) -> Result<StepStats> {
    let config = state.config.clone();
    let enc = state.encoder.clone();
    let epoch = state.epoch + 1;
    let mut ids: Vec<u64> = batch.iter().map(|c| prep.identity_of[*c]).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        contract!("batch repeats an identity");
    }
    let labels: Vec<u64> = batch.iter().map(|c| prep.identity_of[*c]).collect();

    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, true)?;
    let images: Vec<&Tensor> = batch.iter().map(|c| &dataset.patches[prep.image_of[*c]]).collect();
    let img = encode_images(&mut tape, &bound, &enc, &images)?;
    state.counters.image_passes += batch.len() as u64;

    // T^nam
    let mut masked = Vec::with_capacity(batch.len());
    let (mut words, mut hits) = (0u64, 0u64);
    let mut all_constant = true;
    for &c in batch {
        let full = &prep.seqs[c];
        let n = full.word_count();
        let probs = match config.mask_mode {
            MaskMode::None => None,
            MaskMode::Em => Some(vec![config.nam.p; n]),
            MaskMode::Nam => Some(state.table.fetch(&full.caption_id, n, epoch, &config.nam)?),
        };
        let seq = match probs {
            Some(p) => {
                all_constant &= p.iter().all(|x| *x == config.nam.p);
                full.apply_mask(&p, &mut state.mask_rng)?
            }
            None => full.clone(),
        };
        words += n as u64;
        hits += seq.word_ids().iter().filter(|t| **t == MASK).count() as u64;
        masked.push(seq);
    }
    if config.mask_mode == MaskMode::Nam && all_constant {
        state.counters.constant_prob_steps += 1;
    }
    let masked_refs: Vec<&TokenSequence> = masked.iter().collect();
    let txt = encode_texts(&mut tape, &bound, &enc, &masked_refs)?;
    state.counters.tracked_text_passes += batch.len() as u64;

    // T^full, untracked, feeds next epoch's probabilities
    if config.mask_mode == MaskMode::Nam {
        let mut side = Tape::untracked();
        let b2 = state.params.bind(&mut side, false)?;
        let full_refs: Vec<&TokenSequence> = batch.iter().map(|c| &prep.seqs[*c]).collect();
        let t_full = encode_texts(&mut side, &b2, &enc, &full_refs)?;
        state.counters.untracked_text_passes += batch.len() as u64;
        let t_zero = t_full.tap_zero_rows(&side);
        let t_taps = split_rows(side.value(t_full.tap), &t_full.tap_segments);
        let i_taps = split_rows(tape.value(img.tap), &img.tap_segments);
        for (j, &c) in batch.iter().enumerate() {
            let (s, len) = t_full.tap_segments[j];
            let zero = if t_zero.is_empty() { None } else { Some(&t_zero[s..s + len]) };
            let est = estimate(&t_taps[j], &i_taps[j], zero, config.nam.p)?;
            state.table.update(&prep.seqs[c].caption_id, est.recentered.probs, epoch)?;
        }
    }

    let sdm = sdm_loss(&mut tape, img.global, txt.global, &labels, &config.sdm)?;
    let mut loss = sdm.total;
    let mut loss_mlm = 0.0;
    if config.mlm_enabled {
        let mut rows = Vec::new();
        let mut owners = Vec::new();
        let mut targets = Vec::new();
        for (j, seq) in masked.iter().enumerate() {
            let (start, _) = txt.token_segments[j];
            for (pos, id) in seq.unpadded().iter().enumerate() {
                if *id == MASK {
                    rows.push(start + pos);
                    owners.push(j);
                    targets.push(prep.seqs[batch[j]].ids()[pos]);
                }
            }
        }
        let feats = if rows.is_empty() { None } else { Some(text_head(&mut tape, &bound, &enc, txt.last, rows)?) };
        let out = mlm_loss(&mut tape, feats, img.global, &owners, &targets, bound.var(MLM_W)?, bound.var(MLM_B)?)?;
        loss_mlm = tape.value(out.loss).item();
        loss = tape.add(loss, out.loss)?;
    }
    let loss_sdm = tape.value(sdm.total).item();
    if !loss_sdm.is_finite() || !loss_mlm.is_finite() {
        return Err(Error::NumericInput(format!("non-finite loss at step {}", state.step)));
    }
    tape.backward(loss)?;

    let grads: Vec<(String, Vec<f64>)> = bound
        .iter()
        .map(|(n, v)| (n.clone(), tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();
    adam_update(state, grads, lr)?;

    state.counters.steps += 1;
    state.counters.captions += batch.len() as u64;
    state.counters.words += words;
    state.counters.masked_words += hits;
    let mask_rate = if words == 0 { 0.0 } else { hits as f64 / words as f64 };
    state.trace.push(TraceRow { step: state.step, epoch, lr, loss_sdm, loss_mlm, mask_rate });
    state.step += 1;
    Ok(StepStats { loss_sdm, loss_mlm, mask_rate })
}

fn adam_update(state: &mut TrainState, mut grads: Vec<(String, Vec<f64>)>, lr: f64) -> Result<()> {
    let c = &state.config;
    for (name, g) in grads.iter_mut() {
        let theta = state.params.get(name)?;
        if g.is_empty() {
            *g = vec![0.0; theta.len()];
        }
        if c.weight_decay > 0.0 {
            g.iter_mut().zip(theta.data()).for_each(|(gi, t)| *gi += c.weight_decay * t);
        }
    }
    if let Some(max) = c.clip_norm {
        let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|x| *x *= s));
        }
    }
    state.adam.t += 1;
    let t = state.adam.t as i32;
    let (b1, b2, eps) = (c.beta1, c.beta2, c.adam_epsilon);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (name, g) in &grads {
        let m = state.adam.m.get_mut(name).ok_or_else(|| Error::Contract(format!("no Adam moment for {name}")))?;
        m.data_mut().iter_mut().zip(g).for_each(|(m, g)| *m = b1 * *m + (1.0 - b1) * g);
        let v = state.adam.v.get_mut(name).ok_or_else(|| Error::Contract(format!("no Adam moment for {name}")))?;
        v.data_mut().iter_mut().zip(g).for_each(|(v, g)| *v = b2 * *v + (1.0 - b2) * g * g);
        let (m, v) = (state.adam.m.get(name)?.data().to_vec(), state.adam.v.get(name)?.data().to_vec());
        let p = state.params.get_mut(name).expect("moment names follow parameter names");
        for ((p, m), v) in p.data_mut().iter_mut().zip(&m).zip(&v) {
            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-epoch callback of a training run.
pub type EpochHook<'a> = Box<dyn FnMut(&TrainState) -> Result<()> + 'a>;

/// Where and how often to persist and report.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// A checkpoint is written to `dir/epoch-NNN` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Called after every epoch with the state.
    pub on_epoch: Option<EpochHook<'a>>,
    /// Stop after this many completed epochs (for tests of resumption).
    pub stop_after: Option<u32>,
}

pub fn total_steps(prep: &Prepared, config: &TrainConfig) -> u64 {
    prep.steps_per_epoch(config.batch_size) * config.epochs as u64
}

/// Trains from scratch.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    let state = TrainState::init(dataset, config)?;
    resume(dataset, state, TrainOptions::default())
}

/// Continues `state` until `state.config.epochs` epochs are complete.
pub fn resume(dataset: &Dataset, mut state: TrainState, mut opts: TrainOptions) -> Result<TrainState> {
    let config = state.config.clone();
    config.validate()?;
    let prep = Prepared::new(dataset, &state.vocab)?;
    if prep.train_captions.len() < config.batch_size && config.epochs > state.epoch {
        contract!(
            "{} train identities cannot fill a batch of {}",
            prep.train_captions.len(),
            config.batch_size
        );
    }
    let total = total_steps(&prep, &config);
    while state.epoch < config.epochs {
        if opts.stop_after.is_some_and(|s| state.epoch >= s) {
            break;
        }
        let batches = prep.epoch_batches(config.batch_size, &mut state.sampler_rng);
        for b in &batches {
            let lr = cosine_lr(config.lr, state.step, total);
            train_step(&mut state, dataset, &prep, b, lr)?;
        }
        state.table.quantize();
        state.table.seal_epoch();
        state.epoch += 1;
        log::info!(
            "epoch {} done: step {}, last sdm {:.4}",
            state.epoch,
            state.step,
            state.trace.last().map_or(f64::NAN, |r| r.loss_sdm)
        );
        if let Some(dir) = &opts.checkpoint_dir {
            checkpoint_save(&dir.join(format!("epoch-{:03}", state.epoch)), &state)?;
        }
        if let Some(hook) = opts.on_epoch.as_mut() {
            hook(&state)?;
        }
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    config: TrainConfig,
    encoder: EncoderConfig,
    epoch: u32,
    step: u64,
    adam_t: u64,
    sampler_rng: RngState,
    mask_rng: RngState,
    counters: Counters,
    params: Vec<(String, String)>,
    adam_m: Vec<(String, String)>,
    adam_v: Vec<(String, String)>,
    /// Checksums of the single-file artifacts.
    files: BTreeMap<String, String>,
}

const SINGLE_FILES: [&str; 3] = ["vocab.tsv", "noise_table.jsonl", "trace.csv"];

fn file_sha(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn checkpoint_save(dir: &Path, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = state.params.save_dir(&dir.join("params"))?;
    let adam_m = state.adam.m.save_dir(&dir.join("adam_m"))?;
    let adam_v = state.adam.v.save_dir(&dir.join("adam_v"))?;
    state.vocab.save(&dir.join("vocab.tsv"))?;
    state.table.save(&dir.join("noise_table.jsonl"))?;
    std::fs::write(dir.join("trace.csv"), trace_csv(&state.trace))?;
    let mut files = BTreeMap::new();
    for f in SINGLE_FILES {
        files.insert(f.to_string(), file_sha(&dir.join(f))?);
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        encoder: state.encoder.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.adam.t,
        sampler_rng: RngState::capture(&state.sampler_rng),
        mask_rng: RngState::capture(&state.mask_rng),
        counters: state.counters.clone(),
        params,
        adam_m,
        adam_v,
        files,
    };
    std::fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Loads a checkpoint directory. With `expect`, the stored encoder config
/// must equal it.
pub fn checkpoint_load(dir: &Path, expect: Option<&EncoderConfig>) -> Result<TrainState> {
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("checkpoint.json"))?)?;
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        other => return Err(Error::Format(format!("checkpoint version {other:?}, expected {CHECKPOINT_VERSION}"))),
    }
    let meta: CheckpointMeta = serde_json::from_value(raw)?;
    if let Some(e) = expect {
        if e != &meta.encoder {
            return Err(Error::Format(format!("checkpoint encoder {:?} differs from {e:?}", meta.encoder)));
        }
    }
    for f in SINGLE_FILES {
        let want = meta.files.get(f).ok_or_else(|| Error::Format(format!("checkpoint lists no checksum for {f}")))?;
        if &file_sha(&dir.join(f))? != want {
            return Err(Error::Corruption(format!("{f} checksum mismatch")));
        }
    }
    let params = Params::load_dir(&dir.join("params"), &meta.params)?;
    check_params(&meta.encoder, &params)?;
    let m = Params::load_dir(&dir.join("adam_m"), &meta.adam_m)?;
    let v = Params::load_dir(&dir.join("adam_v"), &meta.adam_v)?;
    let mut table = NoiseTable::load(&dir.join("noise_table.jsonl"))?;
    table.quantize();
    let trace = parse_trace_csv(&std::fs::read_to_string(dir.join("trace.csv"))?)?;
    Ok(TrainState {
        config: meta.config,
        encoder: meta.encoder,
        vocab: Vocabulary::load(&dir.join("vocab.tsv"))?,
        params,
        adam: AdamState { t: meta.adam_t, m, v },
        table,
        epoch: meta.epoch,
        step: meta.step,
        sampler_rng: meta.sampler_rng.restore()?,
        mask_rng: meta.mask_rng.restore()?,
        trace,
        counters: meta.counters,
    })
}
