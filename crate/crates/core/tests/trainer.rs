mod common;

use namreid::nam::NamConfig;
use namreid::trainer::{
    checkpoint_load, checkpoint_save, cosine_lr, parse_trace_csv, resume, total_steps, trace_csv, train, MaskMode, Prepared,
    TrainConfig, TrainOptions, TrainState,
};
use namreid::Error;

fn cfg(mode: MaskMode, seed: u64) -> TrainConfig {
    TrainConfig { mask_mode: mode, ..common::tiny_config(seed) }
}

#[test]
fn training_is_deterministic() {
    let ds = common::small_dataset(24, 0.3, 1);
    let a = train(&ds, &cfg(MaskMode::Nam, 3)).unwrap();
    let b = train(&ds, &cfg(MaskMode::Nam, 3)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.params.checksum(), b.params.checksum());
    assert_eq!(a, b);
    let c = train(&ds, &cfg(MaskMode::Nam, 4)).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn zero_epochs_changes_nothing() {
    let ds = common::small_dataset(16, 0.3, 1);
    let config = TrainConfig { epochs: 0, ..cfg(MaskMode::Nam, 0) };
    let init = TrainState::init(&ds, &config).unwrap();
    assert_eq!(train(&ds, &config).unwrap(), init);
}

#[test]
fn resume_reproduces_the_trace_suffix() {
    let ds = common::small_dataset(24, 0.3, 2);
    let config = TrainConfig { epochs: 3, ..cfg(MaskMode::Nam, 5) };
    let full = train(&ds, &config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { stop_after: Some(1), ..Default::default() };
    let half = resume(&ds, TrainState::init(&ds, &config).unwrap(), opts).unwrap();
    assert_eq!(half.epoch, 1);
    checkpoint_save(dir.path(), &half).unwrap();
    let back = checkpoint_load(dir.path(), Some(&half.encoder)).unwrap();
    let done = resume(&ds, back, TrainOptions::default()).unwrap();

    let k = half.trace.len();
    assert!(k > 0 && k < full.trace.len());
    assert_eq!(&done.trace[k..], &full.trace[k..]);
    assert_eq!(done.params.checksum(), full.params.checksum());
}

#[test]
fn checkpoint_roundtrip() {
    let ds = common::small_dataset(16, 0.3, 3);
    let config = TrainConfig { mlm_enabled: true, ..cfg(MaskMode::Nam, 1) };
    let state = train(&ds, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint_save(dir.path(), &state).unwrap();
    let back = checkpoint_load(dir.path(), None).unwrap();
    assert_eq!(back.params, state.params);
    assert_eq!(back.adam, state.adam);
    assert_eq!(back.trace, state.trace);
    assert_eq!(back.counters, state.counters);
    assert_eq!(back.vocab, state.vocab);
    assert_eq!((back.epoch, back.step), (state.epoch, state.step));
    assert_eq!(back.sampler_rng, state.sampler_rng);
    assert_eq!(back.mask_rng, state.mask_rng);
}

#[test]
fn checkpoint_rejects_other_encoders_and_tampering() {
    let ds = common::small_dataset(16, 0.3, 3);
    let state = TrainState::init(&ds, &cfg(MaskMode::Nam, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint_save(dir.path(), &state).unwrap();
    let mut other = state.encoder.clone();
    other.width = 16;
    assert!(matches!(checkpoint_load(dir.path(), Some(&other)), Err(Error::Format(_))));

    std::fs::write(dir.path().join("trace.csv"), "step,epoch,lr,loss_sdm,loss_mlm,mask_rate\n0,1,1,1,1,1\n").unwrap();
    assert!(matches!(checkpoint_load(dir.path(), None), Err(Error::Corruption(_))));
}

#[test]
fn pass_counts_per_mode() {
    let ds = common::small_dataset(24, 0.3, 4);
    let config = cfg(MaskMode::None, 0);
    let prep = Prepared::new(&ds, &namreid::trainer::dataset_vocabulary(&ds).unwrap()).unwrap();
    let steps = total_steps(&prep, &config);
    let none = train(&ds, &config).unwrap().counters;
    assert_eq!(none.steps, steps);
    assert_eq!(none.tracked_text_passes, none.captions);
    assert_eq!(none.untracked_text_passes, 0);
    assert_eq!(none.masked_words, 0);

    let nam = train(&ds, &cfg(MaskMode::Nam, 0)).unwrap().counters;
    assert_eq!(nam.tracked_text_passes, nam.captions);
    assert_eq!(nam.untracked_text_passes, nam.captions);
    let em = train(&ds, &cfg(MaskMode::Em, 0)).unwrap().counters;
    assert_eq!(em.untracked_text_passes, 0);
}

#[test]
fn first_epoch_uses_the_constant_rate() {
    let ds = common::small_dataset(24, 0.3, 4);
    let config = TrainConfig { epochs: 1, ..cfg(MaskMode::Nam, 2) };
    let s = train(&ds, &config).unwrap();
    assert_eq!(s.counters.constant_prob_steps, s.counters.steps);

    // from epoch 2 the probabilities come from the table and vary
    let two = train(&ds, &TrainConfig { epochs: 2, ..config }).unwrap();
    assert!(two.counters.constant_prob_steps < two.counters.steps);
}

#[test]
fn no_same_epoch_reads() {
    let ds = common::small_dataset(24, 0.3, 5);
    let config = TrainConfig { epochs: 3, ..cfg(MaskMode::Nam, 0) };
    let mut state = TrainState::init(&ds, &config).unwrap();
    state.table.enable_audit();
    let done = resume(&ds, state, TrainOptions::default()).unwrap();
    let audit = done.table.audit().unwrap();
    assert_eq!(audit.same_epoch_reads, 0);
    assert_eq!(audit.writes, done.counters.captions);
    assert_eq!(audit.reads, done.counters.captions);
}

/// At p = 0 in the first epoch nothing is masked in either mode, so any
/// difference between nam and em could only come from the untracked pass.
#[test]
fn no_gradient_through_the_full_text_pass() {
    let ds = common::small_dataset(24, 0.3, 6);
    let base = TrainConfig { epochs: 1, nam: NamConfig { p: 0.0, tap_layer: 1 }, ..common::tiny_config(9) };
    let nam = train(&ds, &TrainConfig { mask_mode: MaskMode::Nam, ..base.clone() }).unwrap();
    let em = train(&ds, &TrainConfig { mask_mode: MaskMode::Em, ..base }).unwrap();
    assert!(nam.counters.steps > 0);
    assert_eq!(nam.params, em.params);
    assert_eq!(nam.trace, em.trace);
}

#[test]
fn mask_rate_tracks_p() {
    let ds = common::small_dataset(60, 0.3, 7);
    for p in [0.05, 0.15, 0.30] {
        let config = TrainConfig { epochs: 1, batch_size: 8, nam: NamConfig { p, tap_layer: 1 }, ..cfg(MaskMode::Em, 0) };
        let c = train(&ds, &config).unwrap().counters;
        let rate = c.masked_words as f64 / c.words as f64;
        assert!((rate - p).abs() <= 0.01, "p {p}: {rate}");
    }
}

#[test]
fn cosine_schedule_endpoints() {
    for total in [2u64, 10, 1000] {
        assert_eq!(cosine_lr(1e-3, 0, total), 1e-3);
        assert!(cosine_lr(1e-3, total - 1, total) < 1e-6);
        for t in 1..total {
            assert!(cosine_lr(1e-3, t, total) <= cosine_lr(1e-3, t - 1, total));
        }
    }
}

#[test]
fn trace_csv_roundtrip_and_table_precision() {
    let ds = common::small_dataset(16, 0.3, 8);
    let s = train(&ds, &cfg(MaskMode::Nam, 0)).unwrap();
    assert_eq!(parse_trace_csv(&trace_csv(&s.trace)).unwrap(), s.trace);
    let entries: Vec<_> = ds.captions.iter().filter_map(|c| s.table.entry(&c.caption_id)).collect();
    assert!(!entries.is_empty());
    for e in entries {
        for p in &e.probs {
            assert_eq!((p * 1e6).round() / 1e6, *p);
        }
    }
}

#[test]
fn invalid_configs_rejected() {
    let ds = common::small_dataset(16, 0.3, 8);
    for c in [
        TrainConfig { batch_size: 0, ..common::tiny_config(0) },
        TrainConfig { lr: -1.0, ..common::tiny_config(0) },
        TrainConfig { nam: NamConfig { p: 1.5, tap_layer: 1 }, ..common::tiny_config(0) },
        TrainConfig { batch_size: 500, ..common::tiny_config(0) },
    ] {
        assert!(matches!(train(&ds, &c), Err(Error::Contract(_))));
    }
}
