//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use namreid::corpus::{gen_corpus, AttributeSpec, CorpusParams, Dataset};
use namreid::encoders::{encode_images, encode_texts, init_params, Bound, EncoderConfig};
use namreid::losses::{sdm_loss, SdmConfig};
use namreid::numerics::gradcheck::{check_fn, GradCheckReport, DEFAULT_STEP};
use namreid::numerics::{Kernel, Tensor};
use namreid::tde::TemplateBank;
use namreid::tokenizer::Vocabulary;
use namreid::trainer::{ModelConfig, TrainConfig};

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Every differentiable kernel with a random point of matching shapes.
pub fn kernel_cases(rng: &mut ChaCha8Rng) -> Vec<(Kernel, Vec<Tensor>)> {
    let mut t = |r: usize, c: usize| random_tensor(rng, r, c);
    let positive = {
        let x = t(3, 4);
        Tensor::new(vec![3, 4], x.data().iter().map(|v| v.abs() + 0.2).collect()).unwrap()
    };
    vec![
        (Kernel::Identity, vec![t(3, 4)]),
        (Kernel::MatMul, vec![t(3, 4), t(4, 2)]),
        (Kernel::MatMulNT, vec![t(3, 4), t(2, 4)]),
        (Kernel::Transpose, vec![t(3, 4)]),
        (Kernel::Add, vec![t(3, 4), t(3, 4)]),
        (Kernel::Sub, vec![t(3, 4), t(3, 4)]),
        (Kernel::Mul, vec![t(3, 4), t(3, 4)]),
        (Kernel::AddRow, vec![t(3, 4), t(1, 4)]),
        (Kernel::Scale(-0.7), vec![t(3, 4)]),
        (Kernel::AddScalar(0.3), vec![t(3, 4)]),
        (Kernel::Gelu, vec![t(3, 4)]),
        (Kernel::Log, vec![positive]),
        (Kernel::Exp, vec![t(3, 4)]),
        (Kernel::SoftmaxRows { temperature: 0.5 }, vec![t(3, 4)]),
        (Kernel::LogSoftmaxRows { temperature: 0.02 }, vec![t(3, 4)]),
        (Kernel::LayerNormRows { eps: 1e-5 }, vec![t(3, 8), t(1, 8), t(1, 8)]),
        (Kernel::L2NormalizeRows, vec![t(3, 4)]),
        (Kernel::Embedding { ids: vec![2, 0, 2, 1] }, vec![t(3, 4)]),
        (Kernel::SelectRows { rows: vec![1, 1, 0] }, vec![t(3, 4)]),
        (Kernel::SliceCols { start: 1, len: 2 }, vec![t(3, 4)]),
        (Kernel::ConcatRows, vec![t(2, 4), t(3, 4)]),
        (Kernel::ConcatCols, vec![t(3, 2), t(3, 3)]),
        (Kernel::SumAll, vec![t(3, 4)]),
        (Kernel::MeanAll, vec![t(3, 4)]),
        (Kernel::MaxAll, vec![t(3, 4)]),
        (Kernel::SumRows, vec![t(3, 4)]),
        (Kernel::MaxRows, vec![t(3, 4)]),
        (Kernel::SegmentAttention { segments: vec![(0, 2), (2, 3)], heads: 2 }, vec![t(5, 4), t(5, 4), t(5, 4)]),
    ]
}

/// Encoder sizes used by gradient checks of the full pipeline.
pub fn desk_encoder() -> EncoderConfig {
    EncoderConfig { depth: 2, width: 16, heads: 2, patches: 4, patch_dim: 6, tap_layer: 1, vocab_size: 12, ..Default::default() }
}

/// Central-difference check of image+text encoding followed by SDM, over
/// a random subset of `coords_per_tensor` entries of every parameter.
pub fn pipeline_grad_check(seed: u64, coords_per_tensor: usize) -> GradCheckReport {
    pipeline_grad_check_step(seed, coords_per_tensor, DEFAULT_STEP)
}

pub fn pipeline_grad_check_step(seed: u64, coords_per_tensor: usize, step: f64) -> GradCheckReport {
    let config = desk_encoder();
    let params = init_params(&config, seed).unwrap();
    let names = params.names();
    let point: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone_value()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let images: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, 4, 6)).collect();
    let vocab = Vocabulary::build(&["red blue green coat hat bag shoe"], 1).unwrap();
    let seqs = [
        vocab.tokenize("a", "red coat blue hat"),
        vocab.tokenize("b", "green bag"),
        vocab.tokenize("c", "shoe shoe red"),
        vocab.tokenize("d", "blue coat green hat bag"),
    ];
    let labels = [1u64, 2, 3, 1];

    let mut coords = Vec::new();
    for (i, t) in point.iter().enumerate() {
        for _ in 0..coords_per_tensor.min(t.len()) {
            coords.push((i, rng.gen_range(0..t.len())));
        }
    }
    check_fn(&point, Some(&coords), step, |tape, leaves| {
        let b = Bound::from_pairs(&names, leaves);
        let img_refs: Vec<&Tensor> = images.iter().collect();
        let seq_refs: Vec<_> = seqs.iter().collect();
        let v = encode_images(tape, &b, &config, &img_refs)?;
        let t = encode_texts(tape, &b, &config, &seq_refs)?;
        Ok(sdm_loss(tape, v.global, t.global, &labels, &SdmConfig::default())?.total)
    })
    .unwrap()
}

/// A small default-shaped corpus.
pub fn small_dataset(identities: usize, noise_rate: f64, seed: u64) -> Dataset {
    let params = CorpusParams { identities, noise_rate, seed, ..Default::default() };
    gen_corpus(&AttributeSpec::default(), &params, &TemplateBank::shipped()).unwrap()
}

/// A tiny model that trains in well under a second per epoch.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e-3,
        model: ModelConfig { depth: 2, width: 8, heads: 2, ..Default::default() },
        nam: namreid::nam::NamConfig { p: 0.15, tap_layer: 1 },
        seed,
        ..Default::default()
    }
}

/// Exhaustive oracle for retrieval metrics: for every query, every gallery
/// item's rank is counted directly from pairwise comparisons.
pub fn brute_force_metrics(sim: &[Vec<f64>], q_ids: &[u64], g_ids: &[u64], k: usize) -> (f64, f64) {
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    for (qi, row) in sim.iter().enumerate() {
        // rank of gallery j = 1 + #items strictly better or equal-with-lower-index
        let rank = |j: usize| -> usize {
            1 + (0..row.len()).filter(|&o| row[o] > row[j] || (row[o] == row[j] && o < j)).count()
        };
        let mut rel_ranks: Vec<usize> = (0..row.len()).filter(|&j| g_ids[j] == q_ids[qi]).map(rank).collect();
        rel_ranks.sort_unstable();
        if rel_ranks[0] <= k {
            hits += 1;
        }
        let ap: f64 =
            rel_ranks.iter().enumerate().map(|(n, &r)| (n + 1) as f64 / r as f64).sum::<f64>() / rel_ranks.len() as f64;
        ap_sum += ap;
    }
    (hits as f64 / sim.len() as f64, ap_sum / sim.len() as f64)
}

/// Random metric instance with Q ≤ 20, G ≤ 50, coarse scores so ties occur,
/// and at least one gallery match per query.
pub fn random_metric_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<u64>, Vec<u64>) {
    let q = rng.gen_range(1..=20);
    let g = rng.gen_range(1..=50);
    let ids = rng.gen_range(1..=g.min(8)) as u64;
    let g_ids: Vec<u64> = (0..g).map(|_| rng.gen_range(0..ids)).collect();
    let q_ids: Vec<u64> = (0..q).map(|_| g_ids[rng.gen_range(0..g)]).collect();
    let sim = (0..q).map(|_| (0..g).map(|_| (rng.gen_range(-10..=10) as f64) / 10.0).collect()).collect();
    (sim, q_ids, g_ids)
}

/// Mock captions of `n` random attribute sets, static and dynamic, from two
/// alternating captioners over the shipped bank; returns their diversity
/// reports.
pub fn static_vs_dynamic(
    n: usize,
    seed: u64,
) -> (namreid::tde::DiversityReport, namreid::tde::DiversityReport) {
    use namreid::tde::{diversity_report, MockCaptioner, SlotNoise};
    let spec = AttributeSpec::default();
    let pools: Vec<Vec<String>> = spec.categories.iter().map(|c| c.values.clone()).collect();
    let bank = TemplateBank::shipped();
    let caps = [MockCaptioner::new("mock-a", 0, bank.clone()), MockCaptioner::new("mock-b", 1, bank.clone())];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut stat, mut dynm) = (Vec::new(), Vec::new());
    for i in 0..n {
        let attrs: Vec<String> = pools.iter().map(|p| p[rng.gen_range(0..p.len())].clone()).collect();
        let cap = &caps[i % 2];
        let noise = SlotNoise::uniform(0.3);
        stat.push(cap.caption(&format!("s{i}"), "img", &attrs, &pools, None, noise, &mut rng).unwrap());
        let t = rng.gen_range(0..bank.len());
        dynm.push(cap.caption(&format!("d{i}"), "img", &attrs, &pools, Some(t), noise, &mut rng).unwrap());
    }
    let vocab: std::collections::HashSet<String> = spec.vocabulary().into_iter().collect();
    (diversity_report(&stat, &vocab).unwrap(), diversity_report(&dynm, &vocab).unwrap())
}
