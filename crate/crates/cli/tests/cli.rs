use std::path::Path;
use std::process::{Command, Output};

fn hat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hat"))
        .args(args)
        .env_remove("HAT_SEED")
        .output()
        .expect("spawn hat")
}

fn ok(args: &[&str]) -> String {
    let out = hat(args);
    assert!(
        out.status.success(),
        "hat {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_writes_files_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--n", "4", "--steps", "80", "--seed", "9", "--out", p(d)]);
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["annotations.csv", "synth_000.hatf", "synth_001.hatf", "synth_002.hatf", "synth_003.hatf"]
    );
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "2", "--steps", "100", "--seed", "1", "--out", p(&data)]);
    let ann = std::fs::read_to_string(data.join("annotations.csv")).unwrap();
    let mut files = Vec::new();
    for video in ["synth_000", "synth_001"] {
        let mut csv = String::from("emission_time,start,end,class_id,score\n");
        for row in ann.lines().skip(1).filter(|l| l.starts_with(&format!("{video},"))) {
            let f: Vec<&str> = row.split(',').collect();
            csv.push_str(&format!("{},{},{},{},0.9\n", f[2], f[1], f[2], f[3]));
        }
        let path = dir.path().join(format!("{video}.psi.csv"));
        std::fs::write(&path, csv).unwrap();
        files.push(path);
    }
    let json = dir.path().join("m.json");
    let out = ok(&[
        "eval",
        p(&files[0]),
        p(&files[1]),
        "--annotations",
        p(&data.join("annotations.csv")),
        "--json",
        p(&json),
    ]);
    assert!(out.contains("avg_map,100"), "{out}");
    let text = std::fs::read_to_string(&json).unwrap();
    assert!(text.contains("\"avg_map\": 100.0"), "{text}");
}

#[test]
fn train_infer_and_digest_guard() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = dir.path().join("out");
    ok(&["synth", "--n", "2", "--steps", "60", "--seed", "2", "--out", p(&data)]);
    let sets = ["--set", "train.epochs=2", "--set", "train.osn_epochs=2"];
    let mut args = vec!["train", "--preset", "toy", "--data", p(&data), "--out", p(&run)];
    args.extend(sets);
    ok(&args);
    for f in ["checkpoint.hatc", "train_log.csv", "focal_log.csv", "osn_log.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ck = run.join("checkpoint.hatc");
    let mut args = vec!["infer", "--checkpoint", p(&ck), p(&data), "--out", p(&out), "--audit", "--attn-out"];
    args.extend(["--preset", "toy"]);
    args.extend(sets);
    let stdout = ok(&args);
    assert_eq!(stdout.matches("audit passed").count(), 2, "{stdout}");
    for f in ["synth_000.psi.csv", "synth_000.proposals.csv", "synth_001.attention.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // The same overrides with the history module ablated hash differently.
    let mut args = vec!["infer", "--checkpoint", p(&ck), p(&data), "--out", p(&out), "--preset", "toy"];
    args.extend(sets);
    args.extend(["--ablate", "history=off"]);
    let refused = hat(&args);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("does not match"));
    args.push("--force");
    ok(&args);
}

#[test]
fn malformed_seed_env_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_hat"));
        c.args(["gradcheck", "--preset", "gradcheck", "--sample", "2"]);
        match seed {
            Some(s) => c.env("HAT_SEED", s),
            None => c.env_remove("HAT_SEED"),
        };
        c.current_dir(dir.path()).output().unwrap()
    };
    assert!(run(None).status.success());
    let bad = run(Some("not-a-number"));
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("HAT_SEED"));
}

#[test]
fn gradcheck_passes_on_the_small_config() {
    let out = ok(&["gradcheck", "--preset", "gradcheck"]);
    assert!(out.contains("full model loss"), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.d = 32\nwindow.l_s = 0\nno.such.key = 1\n").unwrap();
    let out = hat(&["gradcheck", "--config", p(&cfg)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:3"), "{err}");
}
