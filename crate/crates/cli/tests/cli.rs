use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn impute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_impute"))
        .args(args)
        .env_remove("MIST_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "arch": {"size": 16, "levels": 2, "base_ch": 4, "content_ch": 8, "style_dim": 6,
           "noise_dim": 5, "map_width": 12, "domain_emb": 3, "dsc_blocks": 2},
  "train": {"iterations": 10, "checkpoint_every": 5, "seed": 3}
}"#;

/// Dataset, trained tiny model and eval output shared by the read-only tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let cfg = dir.path().join("tiny.json");
        fs::write(&cfg, TINY).unwrap();
        assert_eq!(code(&impute(&["gen-data", "--out", p(&data), "--n", "10", "--size", "16", "--seed", "2"])), 0);
        let out = impute(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let ckpt = run.join("ckpt-0000010.mist");
        let out = impute(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&run)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Fixture {
            _dir: dir,
            data,
            run,
            ckpt,
        }
    })
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_splits_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = impute(&["gen-data", "--out", p(out), "--n", "100", "--size", "16", "--seed", "5"]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["splits"], serde_json::json!({"train": 60, "val": 20, "test": 20}));
    assert_eq!(read_tree(&a), read_tree(&b));
    assert!(a.join("test/0019/flair.pgm").is_file());
}

#[test]
fn gen_data_rejects_small_n() {
    let dir = tempfile::tempdir().unwrap();
    let res = impute(&["gen-data", "--out", p(dir.path()), "--n", "4"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("n must be ≥ 5"), "{}", stderr(&res));
}

#[test]
fn gen_data_seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let env = Command::new(env!("CARGO_BIN_EXE_impute"))
        .args(["gen-data", "--out", p(&a), "--n", "5", "--size", "16"])
        .env("MIST_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(code(&env), 0);
    assert_eq!(code(&impute(&["gen-data", "--out", p(&b), "--n", "5", "--size", "16", "--seed", "42"])), 0);
    assert_eq!(read_tree(&a), read_tree(&b));
}

#[test]
fn print_config_shows_defaults_and_round_trips() {
    let out = impute(&["train", "--print-config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["train"]["lr_main"], 1e-4);
    assert_eq!(v["train"]["lr_mapping"], 1e-6);
    assert_eq!(v["train"]["batch_size"], 2);
    assert_eq!(v["arch"]["size"], 64);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, &text).unwrap();
    let again = impute(&["train", "--config", p(&cfg), "--print-config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);

    let env = Command::new(env!("CARGO_BIN_EXE_impute"))
        .args(["train", "--print-config"])
        .env("MIST_SEED", "17")
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_slice(&env.stdout).unwrap();
    assert_eq!(v["train"]["seed"], 17);
    let flag = impute(&["train", "--print-config", "--seed", "8", "--iterations", "12"]);
    let v: serde_json::Value = serde_json::from_slice(&flag.stdout).unwrap();
    assert_eq!((v["train"]["seed"].as_u64(), v["train"]["iterations"].as_u64()), (Some(8), Some(12)));
}

#[test]
fn bad_config_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = impute(&["train", "--config", p(&cfg), "--print-config"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    fs::write(&cfg, r#"{"train": {"batch_size": 0}}"#).unwrap();
    assert_eq!(code(&impute(&["train", "--config", p(&cfg), "--print-config"])), 2);
    let missing = impute(&["train", "--data", p(&dir.path().join("nope")), "--out", p(dir.path())]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn training_writes_log_checkpoints_and_resumes() {
    let f = fixture();
    let log = fs::read_to_string(f.run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 11);
    assert!(f.run.join("ckpt-0000005.mist").is_file());
    assert!(f.run.join("config.json").is_file());

    // Interrupted copy: drop the final checkpoint, resume to 10.
    let dir = tempfile::tempdir().unwrap();
    let part = dir.path().join("run");
    fs::create_dir(&part).unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let res = impute(&["train", "--data", p(&f.data), "--config", p(&cfg), "--out", p(&part), "--iterations", "7"]);
    assert_eq!(code(&res), 0);
    fs::remove_file(part.join("ckpt-0000007.mist")).unwrap();
    let res = impute(&["train", "--data", p(&f.data), "--config", p(&cfg), "--out", p(&part), "--resume"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let status = String::from_utf8(res.stdout).unwrap();
    assert!(status.contains("iter 10/10"), "{status}");
    assert_eq!(fs::read_to_string(part.join("loss_log.csv")).unwrap(), log);
    assert_eq!(
        fs::read(part.join("ckpt-0000010.mist")).unwrap(),
        fs::read(&f.ckpt).unwrap()
    );
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["train"]["lr_main"] = 1e30.into();
    v["train"]["iterations"] = 50.into();
    fs::write(&cfg, v.to_string()).unwrap();
    let out_dir = dir.path().join("run");
    let res = impute(&["train", "--data", p(&f.data), "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    assert!(stderr(&res).contains("iteration"));
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("nan_dump.json")).unwrap()).unwrap();
    assert!(dump["iteration"].as_u64().is_some());
}

#[test]
fn eval_writes_three_artifacts_reproducibly() {
    let f = fixture();
    let metrics = fs::read_to_string(f.run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "cohort,modality,ssim_mean,ssim_std,psnr_mean,psnr_std");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.starts_with("PHANTOM,")));
    let embedding = fs::read_to_string(f.run.join("embedding.csv")).unwrap();
    // 10 subjects -> 2 test subjects -> 8 codes
    assert_eq!(embedding.lines().count(), 1 + 4 * 2);
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.run.join("style_table.json")).unwrap()).unwrap();
    assert_eq!(table["domains"].as_array().unwrap().len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let out = impute(&["eval", "--ckpt", p(&f.ckpt), "--data", p(&f.data), "--out", p(dir.path())]);
    assert_eq!(code(&out), 0);
    for name in ["metrics.csv", "embedding.csv", "style_table.json"] {
        assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(f.run.join(name)).unwrap(), "{name}");
    }
    let missing = impute(&["eval", "--ckpt", p(&dir.path().join("none.mist")), "--data", p(&f.data), "--out", p(dir.path())]);
    assert_eq!(code(&missing), 2);
}

fn subject(f: &Fixture) -> PathBuf {
    f.data.join("test/0000")
}

#[test]
fn impute_writes_model_sized_images_deterministically() {
    let f = fixture();
    let s = subject(f);
    let dir = tempfile::tempdir().unwrap();
    let inputs = [s.join("t1.pgm"), s.join("t1c.pgm"), s.join("t2.pgm")];
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("f{k}.pgm"));
        let res = impute(&[
            "impute", "--ckpt", p(&f.ckpt), "--inputs", p(&inputs[2]), p(&inputs[0]), p(&inputs[1]),
            "--target", "F", "--style", "latent:7", "--out", p(&out),
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].starts_with(b"P5\n16 16\n65535\n"));

    let ref_out = dir.path().join("ref.pgm");
    let res = impute(&[
        "impute", "--ckpt", p(&f.ckpt), "--inputs", &format!("T1={}", p(&inputs[0])), p(&inputs[1]), p(&inputs[2]),
        "--target", "flair", "--style", &format!("ref:{}", p(&s.join("flair.pgm"))), "--out", p(&ref_out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let mean_out = dir.path().join("mean.pgm");
    let res = impute(&[
        "impute", "--ckpt", p(&f.ckpt), "--inputs", p(&inputs[0]), p(&inputs[1]), p(&inputs[2]),
        "--target", "F", "--style", "mean", "--out", p(&mean_out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
}

#[test]
fn impute_rejects_wrong_modalities_and_missing_table() {
    let f = fixture();
    let s = subject(f);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.pgm");
    let res = impute(&[
        "impute", "--ckpt", p(&f.ckpt), "--inputs", p(&s.join("t1.pgm")), p(&s.join("t2.pgm")), p(&s.join("flair.pgm")),
        "--target", "F", "--style", "latent:1", "--out", p(&out),
    ]);
    assert_eq!(code(&res), 2);
    let msg = stderr(&res);
    assert!(msg.contains("T1, T1c, T2"), "{msg}");

    // A checkpoint copied away from its style table.
    let lone = dir.path().join("lone.mist");
    fs::copy(&f.ckpt, &lone).unwrap();
    let res = impute(&[
        "impute", "--ckpt", p(&lone), "--inputs", p(&s.join("t1.pgm")), p(&s.join("t1c.pgm")), p(&s.join("t2.pgm")),
        "--target", "F", "--style", "mean", "--out", p(&out),
    ]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("impute eval"), "{}", stderr(&res));
    assert!(!out.exists());
    let bad_style = impute(&[
        "impute", "--ckpt", p(&f.ckpt), "--inputs", p(&s.join("t1.pgm")), p(&s.join("t1c.pgm")), p(&s.join("t2.pgm")),
        "--target", "F", "--style", "fancy", "--out", p(&out),
    ]);
    assert_eq!(code(&bad_style), 2);
}

#[test]
fn interpolation_strip_matches_mean_style_endpoint() {
    let f = fixture();
    let s = subject(f);
    let dir = tempfile::tempdir().unwrap();
    let inputs = [p(&s.join("t1.pgm")).to_string(), p(&s.join("t1c.pgm")).to_string(), p(&s.join("t2.pgm")).to_string()];
    for (step, count) in [("0.1", 11), ("0.5", 3)] {
        let out = dir.path().join(format!("strip{step}"));
        let res = impute(&[
            "interpolate", "--ckpt", p(&f.ckpt), "--inputs", &inputs[0], &inputs[1], &inputs[2], "--target", "F",
            "--from-domain", "T1", "--to-domain", "F", "--step", step, "--out", p(&out),
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        let pgms = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
        assert_eq!(pgms, count);
        let alphas: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("alphas.json")).unwrap()).unwrap();
        assert_eq!(alphas["alphas"].as_array().unwrap().len(), count);
    }
    let first = dir.path().join("mean_t1.pgm");
    let res = impute(&[
        "impute", "--ckpt", p(&f.ckpt), "--inputs", &inputs[0], &inputs[1], &inputs[2], "--target", "F",
        "--style", "mean:T1", "--out", p(&first),
    ]);
    assert_eq!(code(&res), 0);
    assert_eq!(
        fs::read(&first).unwrap(),
        fs::read(dir.path().join("strip0.1/alpha_00.pgm")).unwrap()
    );
}
