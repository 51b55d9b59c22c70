use proptest::prelude::*;

use namreid::nam::{noise_levels, recenter, token_similarity, NamConfig, NoiseTable, SimilarityMatrix};
use namreid::numerics::Tensor;
use namreid::Error;

fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
    let normed: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    Tensor::from_rows(&normed).unwrap()
}

#[test]
fn similarity_examples() {
    let e = unit_rows(&[vec![1.0, 0.0]]);
    assert_eq!(token_similarity(&e, &e, None).unwrap().values, vec![1.0]);
    let o = unit_rows(&[vec![0.0, 1.0]]);
    assert_eq!(token_similarity(&e, &o, None).unwrap().values, vec![0.0]);
    let t = Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap();
    let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(token_similarity(&t, &v, None).unwrap().values, vec![0.6, 0.8]);
}

#[test]
fn flagged_zero_rows_score_zero() {
    let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let v = unit_rows(&[vec![1.0, 1.0]]);
    let s = token_similarity(&t, &v, Some(&[true, false])).unwrap();
    assert_eq!(s.row(0), &[0.0]);
    assert_eq!(noise_levels(&s)[0], 1.0);
    assert!(matches!(token_similarity(&t, &v, None), Err(Error::Contract(_))));
}

#[test]
fn noise_level_examples() {
    let ones = SimilarityMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
    assert_eq!(noise_levels(&ones), vec![0.0]);
    let zeros = SimilarityMatrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
    assert_eq!(noise_levels(&zeros), vec![1.0]);
    let s = SimilarityMatrix::from_rows(&[vec![0.9, 0.5, 0.2], vec![0.1, 0.0, -0.2]]).unwrap();
    let r = noise_levels(&s);
    assert!((r[0] - 0.1).abs() < 1e-12 && (r[1] - 0.9).abs() < 1e-12, "{r:?}");
}

#[test]
fn recenter_examples() {
    assert_eq!(recenter(&[0.7; 5], 0.15).unwrap().probs, vec![0.15; 5]);
    assert_eq!(recenter(&[0.3], 0.15).unwrap().probs, vec![0.15]);
    let r = recenter(&[0.1, 0.9], 0.15).unwrap();
    assert!((r.unclamped[0] + 0.25).abs() < 1e-12 && (r.unclamped[1] - 0.55).abs() < 1e-12);
    assert_eq!(r.probs[0], 0.0);
    assert!((r.probs[1] - 0.55).abs() < 1e-12);
    assert!(recenter(&[], 0.15).is_err());
}

#[test]
fn table_lifecycle() {
    let cfg = NamConfig::default();
    let mut t = NoiseTable::with_audit();
    assert_eq!(t.fetch("c", 3, 1, &cfg).unwrap(), vec![0.15; 3]);
    assert_eq!(t.fetch("unknown", 2, 9, &cfg).unwrap(), vec![0.15; 2]);

    t.update("c", vec![0.0, 0.55, 0.1], 1).unwrap();
    assert_eq!(t.fetch("c", 3, 1, &cfg).unwrap(), vec![0.15; 3]);
    assert_eq!(t.fetch("c", 3, 2, &cfg).unwrap(), vec![0.0, 0.55, 0.1]);

    t.update("c", vec![0.3, 0.3, 0.3], 2).unwrap();
    assert_eq!(t.fetch("c", 3, 2, &cfg).unwrap(), vec![0.0, 0.55, 0.1]);
    t.seal_epoch();
    assert_eq!(t.fetch("c", 3, 3, &cfg).unwrap(), vec![0.3, 0.3, 0.3]);
    assert_eq!(t.fetch("c", 3, 5, &cfg).unwrap(), vec![0.3, 0.3, 0.3]);

    let a = t.audit().unwrap();
    assert_eq!(a.same_epoch_reads, 0);
    assert_eq!(a.writes, 2);
    assert_eq!(a.reads, 7);

    assert!(t.update("c", vec![0.1; 4], 3).is_err());
    assert!(t.update("d", vec![1.2], 3).is_err());
    assert!(t.fetch("c", 2, 4, &cfg).is_err());
}

#[test]
fn table_snapshot_keeps_six_decimals() {
    let mut t = NoiseTable::new();
    t.update("a", vec![0.123_456_789, 0.5], 3).unwrap();
    t.update("b\"q", vec![1.0], 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.jsonl");
    t.save(&p).unwrap();
    let back = NoiseTable::load(&p).unwrap();
    assert_eq!(back.entry("a").unwrap().probs, vec![0.123_457, 0.5]);
    assert_eq!(back.entry("a").unwrap().epoch, 3);
    assert_eq!(back.entry("b\"q").unwrap().probs, vec![1.0]);
}

fn sim_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..8, 1usize..8).prop_flat_map(|(n, m)| prop::collection::vec(prop::collection::vec(-1.0..=1.0f64, m), n))
}

proptest! {
    #[test]
    fn noise_levels_in_range(rows in sim_matrix()) {
        let s = SimilarityMatrix::from_rows(&rows).unwrap();
        for r in noise_levels(&s) {
            prop_assert!((0.0..=2.0).contains(&r));
        }
    }

    #[test]
    fn recentered_mean_is_p(r in prop::collection::vec(0.0..=2.0f64, 1..40), p in 0.0..=1.0f64) {
        let rc = recenter(&r, p).unwrap();
        prop_assert!((rc.unclamped_mean() - p).abs() < 1e-12);
        prop_assert!(rc.probs.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dominated_tokens_mask_more(
        rows in sim_matrix(),
        drops in prop::collection::vec(prop_oneof![Just(0.0), 0.001..0.5f64], 8),
        col in 0usize..8,
        p in 0.0..=1.0f64,
    ) {
        // the appended token is row-dominated by token 0: every entry <=, one <
        let a = rows[0].clone();
        let c = col % a.len();
        let mut b: Vec<f64> = a.iter().zip(&drops).map(|(v, d)| v - d).collect();
        b[c] = a[c] - drops[c].max(0.01);
        let b: Vec<f64> = b.into_iter().map(|v| v.max(-1.0)).collect();
        prop_assume!(b.iter().zip(&a).any(|(x, y)| x < y));
        let mut all = rows.clone();
        all.push(b);
        let s = SimilarityMatrix::from_rows(&all).unwrap();
        let rc = recenter(&noise_levels(&s), p).unwrap();
        prop_assert!(rc.unclamped[0] <= rc.unclamped[all.len() - 1]);
    }
}
