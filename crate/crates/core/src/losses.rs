//! Similarity distribution matching (SDM) and the masked-language-model
//! ablation head.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdmConfig {
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for SdmConfig {
    fn default() -> Self {
        Self { tau: 0.02, epsilon: 1e-8 }
    }
}

impl SdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.epsilon > 0.0) {
            contract!("SDM needs tau > 0 and epsilon > 0");
        }
        Ok(())
    }
}

/// Ground-truth matching distribution: row `i` spreads its mass evenly over
/// the batch items that share item `i`'s identity.
pub fn build_q(labels: &[u64]) -> Tensor {
    let b = labels.len();
    let mut q = vec![0.0; b * b];
    for i in 0..b {
        let positives = labels.iter().filter(|l| **l == labels[i]).count() as f64;
        for j in 0..b {
            if labels[j] == labels[i] {
                q[i * b + j] = 1.0 / positives;
            }
        }
    }
    Tensor::new(vec![b, b], q).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct SdmParts {
    pub total: Var,
    pub image_to_text: Var,
    pub text_to_image: Var,
}

/// Bidirectional SDM on the tape. `image` and `text` are B×d global
/// embeddings; cosine similarity is taken inside, so they need not be
/// normalized.
pub fn sdm_loss(tape: &mut Tape, image: Var, text: Var, labels: &[u64], config: &SdmConfig) -> Result<SdmParts> {
    config.validate()?;
    let (bi, di) = tape.value(image).dims2();
    let (bt, dt) = tape.value(text).dims2();
    if bi != bt || di != dt {
        contract!("SDM: image batch {bi}×{di} vs text batch {bt}×{dt}");
    }
    if labels.len() != bi {
        contract!("SDM: {} labels for a batch of {bi}", labels.len());
    }
    for (what, v) in [("image", image), ("text", text)] {
        let t = tape.value(v);
        for i in 0..bi {
            if t.row(i).iter().all(|x| *x == 0.0) {
                return Err(Error::NumericInput(format!("zero-norm {what} embedding at batch row {i}")));
            }
        }
    }
    if bi == 1 {
        // p = q = [1]; the ε term would otherwise leave −2ε behind.
        let zero = tape.constant(Tensor::scalar(0.0))?;
        return Ok(SdmParts { total: zero, image_to_text: zero, text_to_image: zero });
    }
    let vn = tape.l2_normalize_rows(image)?;
    let tn = tape.l2_normalize_rows(text)?;
    let sim = tape.matmul_nt(vn, tn)?;
    let sim_t = tape.transpose(sim)?;

    let q = build_q(labels);
    let log_q = Tensor::new(
        q.shape().to_vec(),
        q.data().iter().map(|v| (v + config.epsilon).ln()).collect(),
    )?;
    let log_q = tape.constant(log_q)?;
    // q is symmetric for identity labels, so the same target serves both
    // directions.
    let i2t = kl_rows(tape, sim, log_q, config.tau, bi)?;
    let t2i = kl_rows(tape, sim_t, log_q, config.tau, bi)?;
    let total = tape.add(i2t, t2i)?;
    Ok(SdmParts { total, image_to_text: i2t, text_to_image: t2i })
}

/// `1/B Σ_i Σ_j p_ij (log p_ij − log(q_ij + ε))` with `p = softmax(sim/τ)`.
fn kl_rows(tape: &mut Tape, sim: Var, log_q: Var, tau: f64, b: usize) -> Result<Var> {
    let p = tape.softmax_rows(sim, tau)?;
    let log_p = tape.log_softmax_rows(sim, tau)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let s = tape.sum_all(terms)?;
    tape.scale(s, 1.0 / b as f64)
}

/// Plain-value SDM for evaluation and oracles.
pub fn sdm_value(image: &Tensor, text: &Tensor, labels: &[u64], config: &SdmConfig) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::untracked();
    let v = tape.leaf(image.clone_value())?;
    let t = tape.leaf(text.clone_value())?;
    let parts = sdm_loss(&mut tape, v, t, labels, config)?;
    Ok((
        tape.value(parts.total).item(),
        tape.value(parts.image_to_text).item(),
        tape.value(parts.text_to_image).item(),
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct MlmOutput {
    pub loss: Var,
    /// Set when there was nothing to predict; the loss is then a constant 0.
    pub no_masked_positions: bool,
}

/// Mean cross-entropy of a linear vocabulary head over masked positions.
///
/// `features` holds the last-layer text features at the masked positions
/// (k×d). Row `i` is conditioned by adding row `owners[i]` of
/// `image_global` (B×d), the paired image's global embedding.
pub fn mlm_loss(
    tape: &mut Tape,
    features: Option<Var>,
    image_global: Var,
    owners: &[usize],
    targets: &[u32],
    head_weight: Var,
    head_bias: Var,
) -> Result<MlmOutput> {
    let Some(features) = features.filter(|_| !targets.is_empty()) else {
        let zero = tape.constant(Tensor::scalar(0.0))?;
        return Ok(MlmOutput { loss: zero, no_masked_positions: true });
    };
    let (k, _) = tape.value(features).dims2();
    if k != targets.len() || k != owners.len() {
        contract!("MLM: {k} feature rows for {} targets and {} owners", targets.len(), owners.len());
    }
    let vocab = tape.value(head_weight).cols();
    if let Some(t) = targets.iter().find(|t| **t as usize >= vocab) {
        contract!("MLM target id {t} outside a vocabulary of {vocab}");
    }
    let img_rows = tape.select_rows(image_global, owners.to_vec())?;
    let h = tape.add(features, img_rows)?;
    let logits = tape.matmul(h, head_weight)?;
    let logits = tape.add_row(logits, head_bias)?;
    cross_entropy(tape, logits, targets).map(|loss| MlmOutput { loss, no_masked_positions: false })
}

/// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[u32]) -> Result<Var> {
    let (k, v) = tape.value(logits).dims2();
    let lp = tape.log_softmax_rows(logits, 1.0)?;
    let mut pick = vec![0.0; k * v];
    for (i, t) in targets.iter().enumerate() {
        pick[i * v + *t as usize] = -1.0 / k as f64;
    }
    let pick = tape.constant(Tensor::new(vec![k, v], pick)?)?;
    let terms = tape.mul(lp, pick)?;
    tape.sum_all(terms)
}
