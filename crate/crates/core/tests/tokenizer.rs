use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use namreid::tokenizer::{words, TokenSequence, Vocabulary, CONTEXT_LEN, EOS, FIRST_WORD_ID, MASK, PAD, SOS, UNK};
use namreid::Error;

#[test]
fn build_examples() {
    let v = Vocabulary::build(&["a man", "a woman"], 1).unwrap();
    assert_eq!((v.id("a"), v.id("man"), v.id("woman")), (Some(5), Some(6), Some(7)));
    let empty: [&str; 0] = [];
    assert_eq!(Vocabulary::build(&empty, 1).unwrap().size(), 5);
    let v2 = Vocabulary::build(&["a man", "a woman"], 2).unwrap();
    assert_eq!(v2.size(), 6);
    assert_eq!(v2.id("a"), Some(5));
    assert_eq!(v2.id("man"), None);
    assert!(matches!(Vocabulary::build(&["x"], 0), Err(Error::Contract(_))));
}

#[test]
fn reserved_ids_are_fixed() {
    let v = Vocabulary::build(&["zebra"], 1).unwrap();
    assert_eq!([SOS, EOS, PAD, MASK, UNK], [0, 1, 2, 3, 4]);
    assert_eq!(FIRST_WORD_ID, 5);
    for (i, w) in ["[SOS]", "[EOS]", "[PAD]", "[MASK]", "[UNK]"].iter().enumerate() {
        assert_eq!(v.word(i as u32), Some(*w));
    }
}

#[test]
fn tokenize_examples() {
    let v = Vocabulary::build(&["a man"], 1).unwrap();
    let e = v.tokenize("e", "");
    assert_eq!(&e.ids()[..2], &[SOS, EOS]);
    assert!(e.ids()[2..].iter().all(|t| *t == PAD));
    assert_eq!(e.ids().len(), CONTEXT_LEN);

    let s = v.tokenize("s", "A man.");
    assert_eq!(&s.ids()[..4], &[SOS, 5, 6, EOS]);

    let long = vec!["man"; 100].join(" ");
    let l = v.tokenize("l", &long);
    assert_eq!(l.ids().len(), 77);
    assert_eq!(l.eos_position(), 76);
    assert_eq!(v.tokenize("u", "a dog").ids()[2], UNK);
}

#[test]
fn malformed_sequences_rejected() {
    assert!(TokenSequence::from_ids("x", vec![5, EOS]).is_err());
    assert!(TokenSequence::from_ids("x", vec![SOS, 5]).is_err());
    assert!(TokenSequence::from_ids("x", vec![SOS, EOS, 5]).is_err());
    assert!(TokenSequence::from_ids("x", vec![SOS, EOS, EOS]).is_err());
    assert!(TokenSequence::from_ids("x", vec![SOS, 5, EOS, PAD]).is_ok());
}

#[test]
fn mask_examples() {
    let v = Vocabulary::build(&["a b c d"], 1).unwrap();
    let s = v.tokenize("s", "a b c d");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(s.apply_mask(&[0.0; 4], &mut rng).unwrap(), s);
    let all = s.apply_mask(&[1.0; 4], &mut rng).unwrap();
    assert_eq!(all.word_ids(), vec![MASK; 4]);
    assert_eq!(&all.ids()[..1], &[SOS]);
    assert_eq!(all.ids()[5], EOS);
    assert!(s.apply_mask(&[0.5; 3], &mut rng).is_err());
    assert!(s.apply_mask(&[1.5; 4], &mut rng).is_err());
}

#[test]
fn mask_rate_monte_carlo() {
    let text = vec!["w"; 50].join(" ");
    let v = Vocabulary::build(&[text.as_str()], 1).unwrap();
    let s = v.tokenize("s", &text);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut masked, mut total) = (0usize, 0usize);
    while total < 100_000 {
        let m = s.apply_mask(&[0.15; 50], &mut rng).unwrap();
        masked += m.word_ids().iter().filter(|t| **t == MASK).count();
        total += 50;
    }
    let rate = masked as f64 / total as f64;
    assert!((0.14..=0.16).contains(&rate), "{rate}");
}

#[test]
fn vocabulary_file_roundtrip() {
    let v = Vocabulary::build(&["the red coat", "a blue hat"], 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vocab.tsv");
    v.save(&p).unwrap();
    assert_eq!(Vocabulary::load(&p).unwrap(), v);
    std::fs::write(&p, "[SOS]\n").unwrap();
    assert!(matches!(Vocabulary::load(&p), Err(Error::Format(_))));
}

proptest! {
    #[test]
    fn detokenize_is_a_fixpoint(ws in prop::collection::vec("[a-z]{1,6}", 0..90), sep in "[ ,.!;]{1,3}") {
        let text = ws.join(&sep);
        let v = Vocabulary::build(&[text.as_str()], 1).unwrap();
        let once = v.detokenize(&v.tokenize("c", &text));
        let expected: Vec<String> = words(&text).into_iter().take(75).collect();
        prop_assert_eq!(&once, &expected.join(" "));
        prop_assert_eq!(v.detokenize(&v.tokenize("c", &once)), once);
    }

    #[test]
    fn masking_spares_special_positions(n in 0usize..80, p in 0.0..=1.0f64, seed in any::<u64>()) {
        let text = vec!["x"; n].join(" ");
        let v = Vocabulary::build(&[text.as_str()], 1).unwrap();
        let s = v.tokenize("c", &text);
        let probs = vec![p; s.word_count()];
        let m1 = s.apply_mask(&probs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let m2 = s.apply_mask(&probs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&m1, &m2);
        for (i, special) in s.special_mask().iter().enumerate() {
            if *special {
                prop_assert_eq!(m1.ids()[i], s.ids()[i]);
            }
        }
    }
}
