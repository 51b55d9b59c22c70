//! Retrieval metrics, the noise-detection report and the ablation harness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::encoders::{encode_images, encode_texts, split_rows, EncoderConfig, Params};
use crate::error::{contract, Error, Result};
use crate::nam::estimate;
use crate::numerics::kernels::mm_nt;
use crate::numerics::{Tape, Tensor};
use crate::tokenizer::TokenSequence;
use crate::trainer::{train, MaskMode, TrainConfig, TrainState};

fn check_dims(sim: &Tensor, query_ids: &[u64], gallery_ids: &[u64]) -> Result<(usize, usize)> {
    if sim.shape().len() != 2 {
        contract!("similarity must be a matrix, got shape {:?}", sim.shape());
    }
    let (q, g) = sim.dims2();
    if q != query_ids.len() || g != gallery_ids.len() {
        contract!("similarity is {q}×{g} but there are {} queries and {} gallery items", query_ids.len(), gallery_ids.len());
    }
    if q == 0 || g == 0 {
        contract!("empty query or gallery set");
    }
    Ok((q, g))
}

/// Gallery indices by descending similarity; equal scores keep index order.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
    order
}

/// 1-based positions of the matching gallery items in each query's ranking.
fn match_positions(sim: &Tensor, query_ids: &[u64], gallery_ids: &[u64]) -> Result<Vec<Vec<usize>>> {
    let (q, _) = check_dims(sim, query_ids, gallery_ids)?;
    (0..q)
        .map(|i| {
            let hits: Vec<usize> = ranking(sim.row(i))
                .iter()
                .enumerate()
                .filter(|(_, g)| gallery_ids[**g] == query_ids[i])
                .map(|(r, _)| r + 1)
                .collect();
            if hits.is_empty() {
                contract!("query {i} (identity {}) has no match in the gallery", query_ids[i]);
            }
            Ok(hits)
        })
        .collect()
}

/// Fraction of queries with a match among the top `k` gallery items.
pub fn rank_k(sim: &Tensor, query_ids: &[u64], gallery_ids: &[u64], k: usize) -> Result<f64> {
    let pos = match_positions(sim, query_ids, gallery_ids)?;
    Ok(pos.iter().filter(|h| h[0] <= k).count() as f64 / pos.len() as f64)
}

/// Mean over queries of the average precision at each relevant item.
pub fn mean_ap(sim: &Tensor, query_ids: &[u64], gallery_ids: &[u64]) -> Result<f64> {
    let pos = match_positions(sim, query_ids, gallery_ids)?;
    Ok(pos.iter().map(|h| average_precision(h)).sum::<f64>() / pos.len() as f64)
}

fn average_precision(positions: &[usize]) -> f64 {
    positions.iter().enumerate().map(|(i, r)| (i + 1) as f64 / *r as f64).sum::<f64>() / positions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// Rank of the first match for each query.
    pub first_match: Vec<usize>,
}

pub fn retrieval(sim: &Tensor, query_ids: &[u64], gallery_ids: &[u64]) -> Result<RetrievalResult> {
    let pos = match_positions(sim, query_ids, gallery_ids)?;
    let n = pos.len() as f64;
    let within = |k: usize| pos.iter().filter(|h| h[0] <= k).count() as f64 / n;
    Ok(RetrievalResult {
        rank1: within(1),
        rank5: within(5),
        rank10: within(10),
        map: pos.iter().map(|h| average_precision(h)).sum::<f64>() / n,
        first_match: pos.iter().map(|h| h[0]).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySet {
    All,
    /// Only captions without any noisy word.
    Clean,
}

const EVAL_BATCH: usize = 64;

fn workers(n: usize) -> usize {
    std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.div_ceil(EVAL_BATCH)).max(1)
}

/// Runs `f` over `EVAL_BATCH`-sized chunks on scoped threads, keeping order.
fn chunked<T: Sync, R: Send>(items: &[T], f: impl Fn(&[T]) -> Result<Vec<R>> + Sync) -> Result<Vec<R>> {
    let chunks: Vec<&[T]> = items.chunks(EVAL_BATCH).collect();
    let w = workers(items.len());
    let per = chunks.len().div_ceil(w).max(1);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                let f = &f;
                s.spawn(move || {
                    let mut out = Vec::new();
                    for c in group {
                        out.extend(f(c)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn normalized_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
        })
        .collect()
}

/// Unit-norm global embeddings of the given images.
pub fn image_embeddings(params: &Params, enc: &EncoderConfig, dataset: &Dataset, images: &[usize]) -> Result<Vec<Vec<f64>>> {
    chunked(images, |c| {
        let mut tape = Tape::untracked();
        let b = params.bind(&mut tape, false)?;
        let refs: Vec<&Tensor> = c.iter().map(|i| &dataset.patches[*i]).collect();
        let out = encode_images(&mut tape, &b, enc, &refs)?;
        Ok(normalized_rows(tape.value(out.global)))
    })
}

/// Unit-norm global embeddings of the given token sequences.
pub fn text_embeddings(params: &Params, enc: &EncoderConfig, seqs: &[&TokenSequence]) -> Result<Vec<Vec<f64>>> {
    chunked(seqs, |c| {
        let mut tape = Tape::untracked();
        let b = params.bind(&mut tape, false)?;
        let out = encode_texts(&mut tape, &b, enc, c)?;
        Ok(normalized_rows(tape.value(out.global)))
    })
}

fn split_ids(dataset: &Dataset, split: Split) -> &[u64] {
    match split {
        Split::Train => &dataset.splits.train,
        Split::Test => &dataset.splits.test,
    }
}

/// Text-to-image retrieval over one split: every caption of the split's
/// identities queries the images of those identities.
pub fn evaluate(state: &TrainState, dataset: &Dataset, split: Split, queries: QuerySet) -> Result<RetrievalResult> {
    let ids = split_ids(dataset, split);
    if ids.is_empty() {
        contract!("the {split:?} split is empty");
    }
    let gallery = dataset.images_of(ids);
    let mut caps = dataset.captions_of(ids);
    if queries == QuerySet::Clean {
        if caps.iter().any(|c| c.noise_labels.is_none()) {
            contract!("clean-query evaluation needs noise labels");
        }
        caps.retain(|c| c.noise_labels.as_ref().is_some_and(|l| l.iter().all(|x| !x)));
    }
    if gallery.is_empty() || caps.is_empty() {
        contract!("the {split:?} split has no images or no captions");
    }
    let seqs: Vec<TokenSequence> = caps.iter().map(|c| state.vocab.tokenize(&c.caption_id, &c.text)).collect();
    let seq_refs: Vec<&TokenSequence> = seqs.iter().collect();
    let t = text_embeddings(&state.params, &state.encoder, &seq_refs)?;
    let v = image_embeddings(&state.params, &state.encoder, dataset, &gallery)?;
    let d = state.encoder.width;
    let tf: Vec<f64> = t.concat();
    let vf: Vec<f64> = v.concat();
    let sim = Tensor::new(vec![t.len(), v.len()], mm_nt(&tf, &vf, t.len(), d, v.len()))?;
    let owner = dataset.image_index();
    let query_ids: Vec<u64> = caps.iter().map(|c| dataset.images[owner[c.image_id.as_str()]].identity).collect();
    let gallery_ids: Vec<u64> = gallery.iter().map(|i| dataset.images[*i].identity).collect();
    retrieval(&sim, &query_ids, &gallery_ids)
}

/// Area under the ROC curve of `scores` for separating `labels == true`,
/// with ties counted half (Mann–Whitney).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        contract!("{} scores for {} labels", scores.len(), labels.len());
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        contract!("AUC needs both classes, have {pos} positive and {neg} negative");
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NumericInput("non-finite score in AUC input".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|k| labels[order[*k]]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDetectionReport {
    pub noisy_tokens: usize,
    pub clean_tokens: usize,
    pub mean_r_noisy: f64,
    pub mean_r_clean: f64,
    pub auc: f64,
}

/// Noise levels `r` for every word of the given captions, from the current
/// parameters at the configured tap layer.
pub fn caption_noise_levels(state: &TrainState, dataset: &Dataset, captions: &[usize]) -> Result<Vec<Vec<f64>>> {
    let owner = dataset.image_index();
    let enc = &state.encoder;
    chunked(captions, |c| {
        let mut tape = Tape::untracked();
        let b = state.params.bind(&mut tape, false)?;
        let seqs: Vec<TokenSequence> = c
            .iter()
            .map(|i| {
                let r = &dataset.captions[*i];
                state.vocab.tokenize(&r.caption_id, &r.text)
            })
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let imgs: Vec<&Tensor> =
            c.iter().map(|i| &dataset.patches[owner[dataset.captions[*i].image_id.as_str()]]).collect();
        let ti = encode_texts(&mut tape, &b, enc, &refs)?;
        let ii = encode_images(&mut tape, &b, enc, &imgs)?;
        let zero = ti.tap_zero_rows(&tape);
        let tt = split_rows(tape.value(ti.tap), &ti.tap_segments);
        let it = split_rows(tape.value(ii.tap), &ii.tap_segments);
        (0..c.len())
            .map(|j| {
                let (s, len) = ti.tap_segments[j];
                let z = if zero.is_empty() { None } else { Some(&zero[s..s + len]) };
                Ok(estimate(&tt[j], &it[j], z, state.config.nam.p)?.noise)
            })
            .collect()
    })
}

/// Scores every labelled word of the dataset by its noise level `r`.
pub fn noise_detection(state: &TrainState, dataset: &Dataset) -> Result<NoiseDetectionReport> {
    if dataset.captions.is_empty() {
        contract!("no captions to score");
    }
    if let Some(c) = dataset.captions.iter().find(|c| c.noise_labels.is_none()) {
        contract!("caption {} has no noise labels", c.caption_id);
    }
    let all: Vec<usize> = (0..dataset.captions.len()).collect();
    let levels = caption_noise_levels(state, dataset, &all)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (c, r) in dataset.captions.iter().zip(&levels) {
        let l = c.noise_labels.as_ref().expect("checked above");
        if l.len() != r.len() {
            contract!("caption {} has {} labels for {} tokens", c.caption_id, l.len(), r.len());
        }
        scores.extend_from_slice(r);
        labels.extend_from_slice(l);
    }
    let mean = |want: bool| {
        let v: Vec<f64> = scores.iter().zip(&labels).filter(|(_, l)| **l == want).map(|(s, _)| *s).collect();
        (v.len(), v.iter().sum::<f64>() / v.len().max(1) as f64)
    };
    let (noisy_tokens, mean_r_noisy) = mean(true);
    let (clean_tokens, mean_r_clean) = mean(false);
    Ok(NoiseDetectionReport { noisy_tokens, clean_tokens, mean_r_noisy, mean_r_clean, auc: roc_auc(&scores, &labels)? })
}

/// Which config field an ablation varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Tap layer of a NAM run; the value `none` adds an unmasked baseline.
    Layer,
    /// Masking ratio p of the base mask mode.
    Ratio,
    MaskMode,
    /// `on` or `off`.
    Mlm,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Self::Layer),
            "ratio" => Ok(Self::Ratio),
            "mask_mode" | "mask-mode" => Ok(Self::MaskMode),
            "mlm" => Ok(Self::Mlm),
            _ => Err(Error::Contract(format!("unknown sweep {s:?}; expected layer, ratio, mask_mode or mlm"))),
        }
    }
}

/// The config for one sweep value.
pub fn sweep_config(base: &TrainConfig, kind: SweepKind, value: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    match kind {
        SweepKind::Layer if value == "none" => c.mask_mode = MaskMode::None,
        SweepKind::Layer => {
            c.mask_mode = MaskMode::Nam;
            c.nam.tap_layer =
                value.parse().map_err(|_| Error::Contract(format!("layer sweep value {value:?} is not a layer")))?;
            if c.nam.tap_layer == 0 || c.nam.tap_layer > c.model.depth {
                contract!("tap layer {} outside 1..={}", c.nam.tap_layer, c.model.depth);
            }
        }
        SweepKind::Ratio => {
            c.nam.p = value.parse().map_err(|_| Error::Contract(format!("ratio sweep value {value:?} is not a number")))?;
        }
        SweepKind::MaskMode => c.mask_mode = value.parse()?,
        SweepKind::Mlm => {
            c.mlm_enabled = match value {
                "on" => true,
                "off" => false,
                _ => contract!("mlm sweep values are on and off, got {value:?}"),
            }
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep_value: String,
    pub seed: u64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// NaN when the corpus carries no noise labels.
    pub auc: f64,
}

pub const ABLATION_HEADER: &str = "sweep_value,seed,rank1,rank5,rank10,map,auc";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.sweep_value, r.seed, r.rank1, r.rank5, r.rank10, r.map, r.auc);
    }
    s
}

/// Trains and scores one run.
pub fn run_once(dataset: &Dataset, config: &TrainConfig, label: &str) -> Result<(AblationRow, TrainState)> {
    let state = train(dataset, config)?;
    let r = evaluate(&state, dataset, Split::Test, QuerySet::All)?;
    let auc = if dataset.captions.iter().all(|c| c.noise_labels.is_some()) {
        noise_detection(&state, dataset)?.auc
    } else {
        f64::NAN
    };
    let row = AblationRow {
        sweep_value: label.to_string(),
        seed: config.seed,
        rank1: r.rank1,
        rank5: r.rank5,
        rank10: r.rank10,
        map: r.map,
        auc,
    };
    Ok((row, state))
}

/// One training run per (value, seed), in value-major order. With
/// `parallel`, runs execute on scoped threads.
pub fn ablate(
    dataset: &Dataset,
    base: &TrainConfig,
    kind: SweepKind,
    values: &[String],
    seeds: &[u64],
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() || seeds.is_empty() {
        contract!("an ablation needs at least one value and one seed");
    }
    let mut jobs = Vec::new();
    for v in values {
        for s in seeds {
            let mut c = sweep_config(base, kind, v)?;
            c.seed = *s;
            jobs.push((v.clone(), c));
        }
    }
    let run = |(v, c): &(String, TrainConfig)| {
        log::info!("ablation run {v} seed {}", c.seed);
        run_once(dataset, c, v).map(|(row, _)| row)
    };
    if !parallel {
        return jobs.iter().map(run).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.iter().map(|j| s.spawn(move || run(j))).collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    })
}

/// Median of `xs`; the mean of the middle pair for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        (0..n).for_each(|i| d[i * n + i] = 1.0);
        Tensor::new(vec![n, n], d).unwrap()
    }

    #[test]
    fn diagonal_is_perfect() {
        let ids: Vec<u64> = (0..5).collect();
        assert_eq!(rank_k(&diag(5), &ids, &ids, 1).unwrap(), 1.0);
        assert_eq!(mean_ap(&diag(5), &ids, &ids).unwrap(), 1.0);
    }

    #[test]
    fn hand_ranking() {
        // correct items at ranks 1, 2, 4
        let sim = Tensor::from_rows(&[
            vec![0.9, 0.1, 0.2, 0.3],
            vec![0.8, 0.7, 0.1, 0.0],
            vec![0.9, 0.8, 0.7, 0.1],
        ])
        .unwrap();
        let q = [0, 1, 3];
        let g = [0, 1, 2, 3];
        assert!((rank_k(&sim, &q, &g, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(rank_k(&sim, &q, &g, 5).unwrap(), 1.0);
        assert_eq!(rank_k(&sim, &q, &g, 100).unwrap(), 1.0);
    }

    #[test]
    fn ap_closed_forms() {
        assert_eq!(average_precision(&[3]), 1.0 / 3.0);
        assert!((average_precision(&[1, 3]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_index() {
        let sim = Tensor::from_rows(&[vec![0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(rank_k(&sim, &[1], &[0, 1, 2], 1).unwrap(), 0.0);
        assert_eq!(rank_k(&sim, &[0], &[0, 1, 2], 1).unwrap(), 1.0);
    }

    #[test]
    fn missing_match_rejected() {
        assert!(matches!(rank_k(&diag(2), &[0, 9], &[0, 1], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(roc_auc(&[0.5], &[true]).is_err());
    }

    #[test]
    fn sweep_values() {
        let base = TrainConfig::default();
        assert_eq!(sweep_config(&base, SweepKind::Layer, "none").unwrap().mask_mode, MaskMode::None);
        assert_eq!(sweep_config(&base, SweepKind::Layer, "2").unwrap().nam.tap_layer, 2);
        assert!(sweep_config(&base, SweepKind::Layer, "9").is_err());
        assert_eq!(sweep_config(&base, SweepKind::Ratio, "0.3").unwrap().nam.p, 0.3);
        assert!(sweep_config(&base, SweepKind::Mlm, "on").unwrap().mlm_enabled);
        assert!(sweep_config(&base, SweepKind::MaskMode, "bogus").is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
