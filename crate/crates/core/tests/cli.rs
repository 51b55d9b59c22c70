mod common;

use std::path::{Path, PathBuf};

use namreid::cli::run;
use namreid::trainer::checkpoint_load;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str]) -> Out {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let argv = std::iter::once("namreid").chain(args.iter().copied());
    let code = run(argv, &mut o, &mut e);
    Out { code, stdout: String::from_utf8(o).unwrap(), stderr: String::from_utf8(e).unwrap() }
}

fn ok(args: &[&str]) -> String {
    let r = cli(args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.stderr);
    r.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config_file(dir: &Path) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, serde_json::to_string(&common::tiny_config(0)).unwrap()).unwrap();
    p
}

fn gen(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join(format!("data-{seed}"));
    ok(&["gen-corpus", "--out", s(&data), "--identities", "24", "--seed", seed]);
    data
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "1");
    let config = tiny_config_file(dir.path());
    let run_dir = dir.path().join("run");
    let msg = ok(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&run_dir)]);
    assert!(msg.starts_with("trained 2 epochs"), "{msg}");
    let ckpt = run_dir.join("final");
    assert!(run_dir.join("epoch-001").join("checkpoint.json").exists());
    assert!(run_dir.join("loss.csv").exists());

    let csv_path = dir.path().join("eval.csv");
    let csv = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&csv_path)]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("split,queries,rank1,rank5,rank10,map,auc,mean_r_noisy,mean_r_clean"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 9);
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), csv);

    let ds = namreid::corpus::Dataset::load(&data).unwrap();
    let id = &ds.captions[0].caption_id;
    let table = ok(&["inspect-noise", "--ckpt", s(&ckpt), "--data", s(&data), "--caption-id", id]);
    assert_eq!(table.lines().next(), Some("word|r|r'|noise_label"));
    let words = namreid::tokenizer::words(&ds.captions[0].text);
    assert_eq!(table.lines().count(), words.len() + 1);

    let caps = dir.path().join("caps.jsonl");
    let msg = ok(&["build-captions", "--data", s(&data), "--out", s(&caps), "--mock"]);
    assert!(msg.starts_with("wrote 192 captions"), "{msg}");

    let abl = dir.path().join("abl.csv");
    let out = ok(&[
        "ablate", "--data", s(&data), "--config", s(&config), "--sweep", "mask_mode", "--values", "none,nam", "--epochs", "1",
        "--out", s(&abl),
    ]);
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "7");
    let b_dir = tempfile::tempdir().unwrap();
    let b = gen(b_dir.path(), "7");
    assert_eq!(read_all(&a), read_all(&b));

    let config = tiny_config_file(dir.path());
    let (ra, rb) = (dir.path().join("ra"), dir.path().join("rb"));
    for r in [&ra, &rb] {
        ok(&["train", "--data", s(&a), "--config", s(&config), "--out", s(r), "--seed", "3"]);
    }
    assert_eq!(read_all(&ra), read_all(&rb));
    let c = gen(dir.path(), "8");
    assert_ne!(read_all(&a), read_all(&c));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "2");
    let config = tiny_config_file(dir.path());
    let out = dir.path().join("run");
    let msg = ok(&[
        "train", "--data", s(&data), "--config", s(&config), "--out", s(&out), "--epochs", "1", "--p", "0.3", "--mask-mode", "em",
        "--seed", "11",
    ]);
    assert!(msg.starts_with("trained 1 epochs"), "{msg}");
    let state = checkpoint_load(&out.join("final"), None).unwrap();
    assert_eq!(state.config.epochs, 1);
    assert_eq!(state.config.nam.p, 0.3);
    assert_eq!(state.config.mask_mode, namreid::trainer::MaskMode::Em);
    assert_eq!(state.config.seed, 11);
    assert_eq!(state.config.model, common::tiny_config(0).model);
}

#[test]
fn resume_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "3");
    let config = tiny_config_file(dir.path());
    let full = dir.path().join("full");
    ok(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&full)]);
    let part = dir.path().join("part");
    ok(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&part), "--epochs", "1"]);
    let rest = dir.path().join("rest");
    ok(&["train", "--data", s(&data), "--resume", s(&part.join("final")), "--out", s(&rest), "--epochs", "2"]);
    let a = checkpoint_load(&full.join("final"), None).unwrap();
    let b = checkpoint_load(&rest.join("final"), None).unwrap();
    // the cosine horizon differs between a 1-epoch and a 2-epoch run, so only
    // the bookkeeping must agree
    assert_eq!((a.epoch, a.step, a.trace.len()), (b.epoch, b.step, b.trace.len()));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["--help"]).code, 0);
    assert_eq!(cli(&["no-such-command"]).code, 1);
    assert_eq!(cli(&["gen-corpus", "--out", s(dir.path()), "--noise-rate", "2"]).code, 1);
    let missing = dir.path().join("missing");
    let r = cli(&["eval", "--ckpt", s(&missing), "--data", s(&missing)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.starts_with("error:"), "{}", r.stderr);

    let data = gen(dir.path(), "4");
    let r = cli(&["train", "--data", s(&data), "--out", s(&dir.path().join("x")), "--mask-mode", "half"]);
    assert_eq!(r.code, 1);
    let r = cli(&["build-captions", "--data", s(&data), "--out", s(&dir.path().join("c.jsonl")), "--endpoint", "http://127.0.0.1:9", "--retries", "0", "--timeout-ms", "200"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}
