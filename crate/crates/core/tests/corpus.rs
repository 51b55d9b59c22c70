mod common;

use std::collections::HashSet;

use namreid::corpus::{gen_corpus, split_corpus, AttributeSpec, CorpusParams, Dataset};
use namreid::nam::estimate;
use namreid::numerics::{run_kernel, Kernel, Tensor};
use namreid::tde::{InstructionKind, TemplateBank};
use namreid::tokenizer::words;
use namreid::Error;

fn gen(params: CorpusParams) -> Dataset {
    gen_corpus(&AttributeSpec::default(), &params, &TemplateBank::shipped()).unwrap()
}

/// Noise-labeled fraction over the attribute words actually shown.
fn label_fraction(ds: &Dataset) -> (usize, f64) {
    let vocab: HashSet<String> = ds.spec.vocabulary().into_iter().collect();
    let (mut slots, mut noisy) = (0, 0);
    for c in &ds.captions {
        for (w, l) in words(&c.text).iter().zip(c.noise_labels.as_ref().unwrap()) {
            if vocab.contains(w) {
                slots += 1;
                noisy += *l as usize;
            }
        }
    }
    (slots, noisy as f64 / slots as f64)
}

#[test]
fn counting() {
    let ds = gen(CorpusParams { identities: 100, ..Default::default() });
    assert_eq!(ds.images.len(), 200);
    assert_eq!(ds.patches.len(), 200);
    assert_eq!(ds.captions.len(), 200 * 4);
    for img in &ds.images {
        let mine: Vec<_> = ds.captions.iter().filter(|c| c.image_id == img.image_id).collect();
        let stat = mine.iter().filter(|c| c.source.kind == InstructionKind::Static).count();
        assert_eq!((mine.len(), stat), (4, 2));
    }
}

#[test]
fn noise_fractions() {
    let clean = gen(CorpusParams { identities: 100, noise_rate: 0.0, ..Default::default() });
    assert!(clean.captions.iter().all(|c| c.noise_labels.as_ref().unwrap().iter().all(|l| !l)));
    let noisy = gen(CorpusParams::default());
    let (slots, frac) = label_fraction(&noisy);
    assert!(slots >= 10_000);
    assert!((0.28..=0.32).contains(&frac), "{frac}");
}

#[test]
fn held_out_noise_rate() {
    let ds = gen(CorpusParams { identities: 200, test_noise_rate: Some(0.0), ..Default::default() });
    let test_caps = ds.captions_of(&ds.splits.test);
    assert!(test_caps.iter().all(|c| c.noise_labels.as_ref().unwrap().iter().all(|l| !l)));
    let train_noisy = ds.captions_of(&ds.splits.train).iter().filter(|c| c.noise_labels.as_ref().unwrap().contains(&true)).count();
    assert!(train_noisy > 0);
}

#[test]
fn every_attribute_reaches_a_patch() {
    let ds = gen(CorpusParams { identities: 50, ..Default::default() });
    let sigs = ds.spec.signatures(ds.params.seed).unwrap();
    for (i, img) in ds.images.iter().enumerate() {
        let attrs = &ds.identities[img.identity as usize].attributes;
        for a in attrs {
            let best = (0..ds.spec.patches)
                .map(|p| ds.patches[i].row(p).iter().zip(&sigs[a]).map(|(x, y)| x * y).sum::<f64>())
                .fold(f64::MIN, f64::max);
            assert!(best > 0.5, "{a} missing from {}", img.image_id);
        }
    }
}

#[test]
fn signatures_nearly_orthogonal() {
    let spec = AttributeSpec::default();
    let sigs: Vec<Vec<f64>> = spec.signatures(1).unwrap().into_values().collect();
    for i in 0..sigs.len() {
        for j in 0..i {
            let c: f64 = sigs[i].iter().zip(&sigs[j]).map(|(a, b)| a * b).sum();
            assert!(c.abs() < 0.2);
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let p = CorpusParams { identities: 40, ..Default::default() };
    assert_eq!(gen(p.clone()), gen(p.clone()));
    assert_ne!(gen(p.clone()).captions, gen(CorpusParams { seed: 2, ..p }).captions);
}

#[test]
fn split_rules() {
    let ds = gen(CorpusParams { identities: 100, test_fraction: 0.5, ..Default::default() });
    assert_eq!((ds.splits.train.len(), ds.splits.test.len()), (50, 50));
    assert_eq!(split_corpus(&ds, 0.5, 1).unwrap(), split_corpus(&ds, 0.5, 1).unwrap());
    let test: HashSet<u64> = ds.splits.test.iter().copied().collect();
    let train_images = ds.images_of(&ds.splits.train);
    for i in train_images {
        assert!(!test.contains(&ds.images[i].identity));
    }
    let mut all: Vec<u64> = ds.splits.train.iter().chain(&ds.splits.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
}

#[test]
fn bad_parameters() {
    let spec = AttributeSpec::default();
    let bank = TemplateBank::shipped();
    for p in [
        CorpusParams { identities: 0, ..Default::default() },
        CorpusParams { noise_rate: 1.5, ..Default::default() },
        CorpusParams { confusion: -0.1, ..Default::default() },
        CorpusParams { identities: 5000, ..Default::default() },
    ] {
        assert!(matches!(gen_corpus(&spec, &p, &bank), Err(Error::Contract(_))));
    }
    let leaky = TemplateBank::new("x", "test", vec!["A {0} and a spare jacket.".into()]).unwrap();
    assert!(gen_corpus(&spec, &CorpusParams { identities: 10, ..Default::default() }, &leaky).is_err());
}

#[test]
fn save_load_roundtrip() {
    let ds = gen(CorpusParams { identities: 30, ..Default::default() });
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
}

#[test]
fn truncated_blob_is_corruption() {
    let ds = gen(CorpusParams { identities: 30, ..Default::default() });
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let blob = dir.path().join("patches.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Corruption(_))));
    assert!(matches!(Tensor::load(&blob), Err(Error::Corruption(_))));
}

#[test]
fn foreign_version_is_format() {
    let ds = gen(CorpusParams { identities: 30, ..Default::default() });
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let mpath = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
    m["version"] = serde_json::json!(99);
    std::fs::write(&mpath, m.to_string()).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Format(_))));

    let blob = dir.path().join("patches.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[4] = 7;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(Tensor::load(&blob), Err(Error::Format(_))));
}

/// With words embedded as their own signatures and patches taken as-is,
/// every noisy attribute word is further from the image than every clean
/// attribute word of the same caption.
#[test]
fn oracle_alignment() {
    let ds = gen(CorpusParams { identities: 200, ..Default::default() });
    let sigs = ds.spec.signatures(ds.params.seed).unwrap();
    let index = ds.image_index();
    for c in &ds.captions {
        let labels = c.noise_labels.as_ref().unwrap();
        let ws = words(&c.text);
        let attr: Vec<usize> = (0..ws.len()).filter(|i| sigs.contains_key(&ws[*i])).collect();
        let rows: Vec<Vec<f64>> = attr.iter().map(|i| sigs[&ws[*i]].clone()).collect();
        let text = Tensor::from_rows(&rows).unwrap();
        let img = run_kernel(&Kernel::L2NormalizeRows, &[&ds.patches[index[c.image_id.as_str()]]]).unwrap();
        let r = estimate(&text, &img, None, 0.15).unwrap().noise;
        let noisy: Vec<f64> = attr.iter().zip(&r).filter(|(i, _)| labels[**i]).map(|(_, r)| *r).collect();
        let clean: Vec<f64> = attr.iter().zip(&r).filter(|(i, _)| !labels[**i]).map(|(_, r)| *r).collect();
        for n in &noisy {
            for k in &clean {
                assert!(n > k, "{}: noisy r {n} vs clean r {k}", c.caption_id);
            }
        }
    }
}

#[test]
fn reid_import() {
    let dir = tempfile::tempdir().unwrap();
    let ann = serde_json::json!([
        {"id": 4, "file_path": "cam1/0004_a.jpg", "captions": ["A man in a red coat.", "He carries a bag."]},
        {"id": 4, "file_path": "cam2/0004_b.jpg", "captions": ["Red coat, black shoes."]},
        {"id": 9, "file_path": "cam1/0009_a.jpg", "captions": ["A woman with an umbrella."]},
        {"id": 11, "file_path": "cam3/0011_a.jpg", "captions": ["Blue jeans and boots."]}
    ]);
    std::fs::write(dir.path().join("ann.json"), ann.to_string()).unwrap();
    let feats = Tensor::new(vec![4, 3, 5], (0..60).map(|i| i as f64 * 0.1).collect()).unwrap();
    feats.save(&dir.path().join("feats.bin")).unwrap();
    let ds = namreid::corpus::import_reid(&dir.path().join("ann.json"), &dir.path().join("feats.bin"), 0.34, 1).unwrap();
    assert_eq!((ds.identities.len(), ds.images.len(), ds.captions.len()), (3, 4, 5));
    assert_eq!((ds.spec.patches, ds.spec.patch_dim), (3, 5));
    assert_eq!(ds.splits.test.len(), 1);
    assert!(ds.captions.iter().all(|c| c.noise_labels.is_none()));

    let short = Tensor::new(vec![3, 3, 5], vec![0.0; 45]).unwrap();
    short.save(&dir.path().join("feats.bin")).unwrap();
    assert!(matches!(
        namreid::corpus::import_reid(&dir.path().join("ann.json"), &dir.path().join("feats.bin"), 0.34, 1),
        Err(Error::Format(_))
    ));
}
