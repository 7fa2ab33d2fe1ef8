use std::path::Path;
use std::process::{Command, Output};

fn avasd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avasd")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, n: usize, seed: u64) -> Output {
    let o = avasd(&["gen-synth", "--out", dir.to_str().unwrap(), "--n", &n.to_string(), "--seed", &seed.to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "video", "audio"] {
        let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        entries.sort();
        for p in entries {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn usage_errors_exit_one() {
    let o = avasd(&["train", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(code(&avasd(&["gen-synth", "--out", "x", "--confusers", "1.5"])), 1);
    assert_eq!(code(&avasd(&["train", "--data", "d", "--out", "o", "--variant", "m4"])), 1);
    assert_eq!(code(&avasd(&["train", "--data", "d", "--out", "o", "--bigru-layers", "3"])), 1);
    assert_eq!(code(&avasd(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let o = avasd(&["eval", "--ckpt", missing.to_str().unwrap(), "--data", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let junk = dir.path().join("junk.avck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = avasd(&["bench", "--ckpt", junk.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("magic"));
}

#[test]
fn gen_synth_is_deterministic_and_prints_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let o = gen(&a, 6, 3);
    let err = stderr(&o);
    assert!(err.contains("resolved config") && err.contains("seed = 3") && err.contains("n_sequences = 6"), "{err}");
    gen(&b, 6, 3);
    gen(&c, 6, 4);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    assert_ne!(tree_bytes(&a), tree_bytes(&c));
}

#[test]
fn flag_beats_file_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[synth]\nn_sequences = 4\nseed = 9\nsnr_db = 10.0\n").unwrap();
    let out = dir.path().join("d");
    let o = avasd(&["--config", cfg.to_str().unwrap(), "gen-synth", "--out", out.to_str().unwrap(), "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("n_sequences = 4") && err.contains("seed = 2") && err.contains("snr_db = 10.0"));
    assert!(err.contains("seq_len = 10"), "defaults fill the rest");
    std::fs::write(&cfg, "[synth]\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&avasd(&["--config", cfg.to_str().unwrap(), "gen-synth", "--out", "x"])), 1);
}

#[test]
fn train_eval_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 10, 5);
    let d = data.to_str().unwrap();
    let ck: Vec<String> = (0..2).map(|k| dir.path().join(format!("m{k}.avck")).display().to_string()).collect();
    for c in &ck {
        let o = avasd(&["train", "--data", d, "--variant", "m2", "--out", c, "--max-epochs", "2", "--batch", "4", "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&ck[0]).unwrap(), std::fs::read(&ck[1]).unwrap(), "same seed, same checkpoint");
    assert!(Path::new(&format!("{}.history.toml", ck[0])).exists());

    let o = avasd(&["eval", "--ckpt", &ck[0], "--data", d]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.contains("auc_av") && report.contains("noise_condition = \"clean\""));
    assert_eq!(std::fs::read_to_string(format!("{}.eval.toml", ck[0])).unwrap(), report);
    let o = avasd(&["eval", "--ckpt", &ck[0], "--data", d, "--noise"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("noise_condition = \"noisy\""));

    let o = avasd(&["bench", "--ckpt", &ck[0], "--reps", "10", "--warmup", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("reps = 10"));
    assert_eq!(code(&avasd(&["bench", "--ckpt", &ck[0], "--reps", "9"])), 1);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 10, 5);
    let ck = dir.path().join("m.avck");
    let o = avasd(&[
        "train", "--data", data.to_str().unwrap(), "--out", ck.to_str().unwrap(), "--lr", "1e150", "--batch", "4", "--max-epochs", "3",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn thread_cap_must_be_positive() {
    let o = Command::new(env!("CARGO_BIN_EXE_avasd"))
        .args(["train", "--data", "d", "--out", "o"])
        .env("AVASD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn extract_mfcc_writes_a_blob() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 1, 1);
    let out = dir.path().join("m.avtb");
    let o = avasd(&["extract-mfcc", "--wav", data.join("audio/seq00000.wav").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: avasd::tensor::Tensor = avasd::io::blob::load(&out).unwrap();
    assert_eq!(m.shape(), [498, 13]);
}

#[test]
fn ablate_emits_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 10, 2);
    let out = dir.path().join("abl");
    let o = avasd(&[
        "ablate", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--max-epochs", "1", "--batch", "4", "--reps", "10",
        "--warmup", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 6, "{table}");
    for (row, (v, l)) in rows.iter().zip([("M1", 2), ("M1", 1), ("M2", 2), ("M2", 1), ("M3", 2), ("M3", 1)]) {
        assert!(row.starts_with(&format!("| {v} |")) && row.contains(&format!("| VGG-M | {l} |")), "{row}");
    }
    let toml_text = std::fs::read_to_string(out.join("ablation.toml")).unwrap();
    assert_eq!(toml_text.matches("[[row]]").count(), 6);
}
