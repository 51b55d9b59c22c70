//! Noise-aware masking.
//!
//! Each caption word is compared with every image patch at a tapped encoder
//! layer. A word whose best patch similarity is low is likely describing
//! something that is not in the picture, so it receives a larger masking
//! probability in the next epoch. Probabilities are re-centred so that their
//! average stays at the configured ratio `p`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::kernels::mm_nt;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NamConfig {
    /// Average masking ratio.
    pub p: f64,
    /// 1-based encoder layer whose token embeddings are compared.
    pub tap_layer: usize,
}

impl Default for NamConfig {
    fn default() -> Self {
        Self { p: 0.15, tap_layer: 3 }
    }
}

impl NamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            contract!("masking ratio p must be in [0, 1], got {}", self.p);
        }
        if self.tap_layer == 0 {
            contract!("tap layer is 1-based");
        }
        Ok(())
    }
}

/// Token-to-patch cosine similarities, words × patches.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub words: usize,
    pub patches: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.patches..(i + 1) * self.patches]
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = Tensor::from_rows(rows)?;
        let (words, patches) = t.dims2();
        Ok(Self { words, patches, values: t.into_data() })
    }
}

const UNIT_TOL: f64 = 1e-9;

/// Cosine similarity of every text row against every image row. Both
/// blocks must already be row-normalized; rows flagged in `text_zero_rows`
/// score 0 against every patch.
pub fn token_similarity(text: &Tensor, image: &Tensor, text_zero_rows: Option<&[bool]>) -> Result<SimilarityMatrix> {
    let (n, d) = text.dims2();
    let (m, d2) = image.dims2();
    if d != d2 {
        contract!("token similarity: text width {d} vs image width {d2}");
    }
    let zero = |i: usize| text_zero_rows.is_some_and(|z| z.get(i).copied().unwrap_or(false));
    for i in 0..n {
        let norm = text.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !zero(i) && (norm - 1.0).abs() > UNIT_TOL {
            contract!("text row {i} is not unit-norm ({norm})");
        }
    }
    for j in 0..m {
        let norm = image.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL && norm != 0.0 {
            contract!("image row {j} is not unit-norm ({norm})");
        }
    }
    let mut values = mm_nt(text.data(), image.data(), n, d, m);
    for i in 0..n {
        if zero(i) {
            values[i * m..(i + 1) * m].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    // rounding can push a unit dot product a hair past ±1
    values.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(SimilarityMatrix { words: n, patches: m, values })
}

/// `r_i = 1 - max_j s_ij`.
pub fn noise_levels(s: &SimilarityMatrix) -> Vec<f64> {
    (0..s.words)
        .map(|i| 1.0 - s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recentered {
    /// Final masking probabilities, clamped to [0, 1].
    pub probs: Vec<f64>,
    /// `r_i - E[r] + p` before clamping.
    pub unclamped: Vec<f64>,
    pub mean_noise: f64,
}

impl Recentered {
    pub fn unclamped_mean(&self) -> f64 {
        self.unclamped.iter().sum::<f64>() / self.unclamped.len() as f64
    }

    pub fn clamped_mean(&self) -> f64 {
        self.probs.iter().sum::<f64>() / self.probs.len() as f64
    }
}

/// Shifts noise levels so their mean becomes `p`, then clamps.
pub fn recenter(r: &[f64], p: f64) -> Result<Recentered> {
    if r.is_empty() {
        contract!("cannot recenter an empty noise vector");
    }
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let unclamped: Vec<f64> = r.iter().map(|ri| ri - mean + p).collect();
    let probs = unclamped.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Recentered { probs, unclamped, mean_noise: mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub epoch: u32,
    pub probs: Vec<f64>,
}

/// Next-epoch masking probabilities per caption.
///
/// A value written during epoch `e` is only visible to reads in epochs
/// after `e`, so one text forward pass per step is enough: the pass that
/// produces the estimate never consumes it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseTable {
    entries: BTreeMap<String, NoiseEntry>,
    /// Previous visible value, kept while a same-epoch write shadows it.
    shadowed: BTreeMap<String, NoiseEntry>,
    audit: Option<Audit>,
}

/// Read/write log used to prove the epoch-delay rule.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    pub reads: u64,
    pub writes: u64,
    /// Reads that returned a value written in the same epoch.
    pub same_epoch_reads: u64,
}

impl NoiseTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_audit() -> Self {
        Self { audit: Some(Audit::default()), ..Self::default() }
    }

    pub fn audit(&self) -> Option<&Audit> {
        self.audit.as_ref()
    }

    pub fn enable_audit(&mut self) {
        self.audit.get_or_insert_with(Audit::default);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, caption_id: &str) -> Option<&NoiseEntry> {
        self.entries.get(caption_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NoiseEntry)> {
        self.entries.iter()
    }

    pub fn update(&mut self, caption_id: &str, probs: Vec<f64>, epoch: u32) -> Result<()> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            contract!("noise table probability {p} outside [0, 1]");
        }
        if let Some(old) = self.entries.get(caption_id) {
            if old.probs.len() != probs.len() {
                contract!(
                    "caption {caption_id} changed token count ({} -> {})",
                    old.probs.len(),
                    probs.len()
                );
            }
            if old.epoch < epoch {
                self.shadowed.insert(caption_id.to_string(), old.clone());
            }
        }
        self.entries.insert(caption_id.to_string(), NoiseEntry { epoch, probs });
        if let Some(a) = &mut self.audit {
            a.writes += 1;
        }
        Ok(())
    }

    /// Probabilities visible during `epoch`: the latest entry written in an
    /// earlier epoch, else the constant ratio.
    pub fn fetch(&mut self, caption_id: &str, token_count: usize, epoch: u32, config: &NamConfig) -> Result<Vec<f64>> {
        let visible = match self.entries.get(caption_id) {
            Some(e) if e.epoch < epoch => Some(e),
            Some(_) => self.shadowed.get(caption_id).filter(|e| e.epoch < epoch),
            None => None,
        };
        let out = match visible {
            Some(e) => {
                if e.probs.len() != token_count {
                    contract!(
                        "caption {caption_id} stored {} probabilities, asked for {token_count}",
                        e.probs.len()
                    );
                }
                if let Some(a) = &mut self.audit {
                    if e.epoch >= epoch {
                        a.same_epoch_reads += 1;
                    }
                }
                e.probs.clone()
            }
            None => vec![config.p; token_count],
        };
        if let Some(a) = &mut self.audit {
            a.reads += 1;
        }
        Ok(out)
    }

    /// JSON lines, one caption per line, probabilities to 6 decimals.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, e) in &self.entries {
            write_record(&mut w, id, e)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut t = Self::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SnapshotRecord = serde_json::from_str(&line)?;
            if rec.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Format(format!("caption {} has a probability outside [0,1]", rec.caption_id)));
            }
            t.entries.insert(rec.caption_id, NoiseEntry { epoch: rec.epoch, probs: rec.probs });
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Rounds stored probabilities to the snapshot precision, so an
    /// in-memory table matches what a reload would produce.
    pub fn quantize(&mut self) {
        for e in self.entries.values_mut().chain(self.shadowed.values_mut()) {
            e.probs.iter_mut().for_each(|p| *p = round6(*p));
        }
    }

    /// Drops same-epoch shadows; called once an epoch is complete.
    pub fn seal_epoch(&mut self) {
        self.shadowed.clear();
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotRecord {
    caption_id: String,
    epoch: u32,
    probs: Vec<f64>,
}

fn round6(p: f64) -> f64 {
    (p * 1e6).round() / 1e6
}

fn write_record<W: Write>(w: &mut W, id: &str, e: &NoiseEntry) -> Result<()> {
    let probs: Vec<String> = e.probs.iter().map(|p| format!("{:.6}", p)).collect();
    writeln!(
        w,
        "{{\"caption_id\":{},\"epoch\":{},\"probs\":[{}]}}",
        serde_json::to_string(id)?,
        e.epoch,
        probs.join(",")
    )?;
    Ok(())
}

/// Full NAM estimate for one caption/image pair: similarity, noise levels
/// and re-centred probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct NamEstimate {
    pub similarity: SimilarityMatrix,
    pub noise: Vec<f64>,
    pub recentered: Recentered,
}

pub fn estimate(text_tap: &Tensor, image_tap: &Tensor, text_zero_rows: Option<&[bool]>, p: f64) -> Result<NamEstimate> {
    let similarity = token_similarity(text_tap, image_tap, text_zero_rows)?;
    let noise = noise_levels(&similarity);
    let recentered = recenter(&noise, p)?;
    Ok(NamEstimate { similarity, noise, recentered })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_and_orthogonal() {
        let s = token_similarity(&m(&[vec![1.0, 0.0]]), &m(&[vec![1.0, 0.0]]), None).unwrap();
        assert_eq!(s.values, vec![1.0]);
        let s = token_similarity(&m(&[vec![1.0, 0.0]]), &m(&[vec![0.0, 1.0]]), None).unwrap();
        assert_eq!(s.values, vec![0.0]);
    }

    #[test]
    fn hand_dot_products() {
        let s = token_similarity(&m(&[vec![0.6, 0.8]]), &m(&[vec![1.0, 0.0], vec![0.0, 1.0]]), None).unwrap();
        assert_eq!(s.values, vec![0.6, 0.8]);
    }

    #[test]
    fn width_mismatch() {
        assert!(token_similarity(&m(&[vec![1.0, 0.0]]), &m(&[vec![1.0, 0.0, 0.0]]), None).is_err());
    }

    #[test]
    fn zero_rows_score_zero() {
        let s = token_similarity(
            &m(&[vec![0.0, 0.0], vec![1.0, 0.0]]),
            &m(&[vec![1.0, 0.0]]),
            Some(&[true, false]),
        )
        .unwrap();
        assert_eq!(s.values, vec![0.0, 1.0]);
        assert_eq!(noise_levels(&s), vec![1.0, 0.0]);
    }

    #[test]
    fn noise_level_cases() {
        let s = SimilarityMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(noise_levels(&s), vec![0.0]);
        let s = SimilarityMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(noise_levels(&s), vec![1.0]);
    }

    #[test]
    fn recenter_cases() {
        let r = recenter(&[0.7, 0.7, 0.7], 0.15).unwrap();
        assert!(r.probs.iter().all(|p| (p - 0.15).abs() < 1e-15));
        assert_eq!(recenter(&[0.3], 0.15).unwrap().probs, vec![0.15]);
        assert!(recenter(&[], 0.15).is_err());
    }

    #[test]
    fn table_lifecycle() {
        let cfg = NamConfig::default();
        let mut t = NoiseTable::with_audit();
        assert_eq!(t.fetch("c", 2, 1, &cfg).unwrap(), vec![0.15, 0.15]);
        t.update("c", vec![0.0, 0.55], 1).unwrap();
        assert_eq!(t.fetch("c", 2, 1, &cfg).unwrap(), vec![0.15, 0.15]);
        assert_eq!(t.fetch("c", 2, 2, &cfg).unwrap(), vec![0.0, 0.55]);
        t.update("c", vec![0.3, 0.3], 2).unwrap();
        assert_eq!(t.fetch("c", 2, 2, &cfg).unwrap(), vec![0.0, 0.55]);
        assert_eq!(t.fetch("c", 2, 3, &cfg).unwrap(), vec![0.3, 0.3]);
        assert_eq!(t.audit().unwrap().same_epoch_reads, 0);
    }

    #[test]
    fn table_token_count_change_rejected() {
        let mut t = NoiseTable::new();
        t.update("c", vec![0.1, 0.2], 1).unwrap();
        assert!(t.update("c", vec![0.1], 2).is_err());
        let cfg = NamConfig::default();
        assert!(t.fetch("c", 3, 2, &cfg).is_err());
    }

    #[test]
    fn snapshot_six_decimals() {
        let mut t = NoiseTable::new();
        t.update("c17", vec![0.123456789, 1.0], 4).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "{\"caption_id\":\"c17\",\"epoch\":4,\"probs\":[0.123457,1.000000]}\n");
        let back = NoiseTable::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.entry("c17").unwrap().probs, vec![0.123457, 1.0]);
    }
}
