use std::fs;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclecap")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_exits_2_and_lists_valid_flags() {
    let o = run(&["train", "--epochz", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("--epochz"));
    assert!(err.contains("--part1") && err.contains("--squared-cycle"), "{err}");
}

#[test]
fn oracle_check_reports_toy_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["--out-dir", out.to_str().unwrap(), "oracle-check"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("= 0.75"), "{text}");
    assert!(text.contains("flagged = 100/100"));
    assert_eq!(fs::read_to_string(out.join("oracle.txt")).unwrap(), text);
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn bad_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "--out-dir", dir.path().join("o").to_str().unwrap(), "oracle-check"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rat"));

    let o = run(&["--beam-size", "0", "--out-dir", dir.path().join("o").to_str().unwrap(), "oracle-check"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_6_and_malformed_data_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["--out-dir", out.to_str().unwrap(), "pretrain", "--data", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));

    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("pairs.jsonl"), "{\"image_id\": 3}\n").unwrap();
    let o = run(&["--out-dir", out.to_str().unwrap(), "pretrain", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn pipeline_and_attention_export() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let o = run(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["--out-dir", &p("data"), "synth-data", "--images", "8", "--val-images", "2", "--regions", "4"]);
    ok(&["--min-freq", "1", "--out-dir", &p("p1"), "pretrain", "--data", &p("data"), "--epochs", "2"]);
    for variant in ["soft-attn", "cycle-attn"] {
        let model = p(variant);
        ok(&["--min-freq", "1", "--out-dir", &model, "train", "--data", &p("data"), "--part1", &p("p1"), "--epochs", "2", "--variant", variant]);
        let val = format!("{}/val.jsonl", p("data"));
        let o = ok(&["--out-dir", &p(&format!("eval-{variant}")), "eval", "--model", &model, "--manifest", &val]);
        let table = String::from_utf8_lossy(&o.stdout);
        assert!(table.contains("CIDEr-D") && table.contains("BLEU4"), "{table}");
        let captions = fs::read_to_string(format!("{}/captions.jsonl", p(&format!("eval-{variant}")))).unwrap();
        assert_eq!(captions.lines().count(), 2);

        let export = run(&["--out-dir", &p(&format!("attn-{variant}")), "attn-export", "--model", &model, "--manifest", &val, "--image-id", "img0006"]);
        if variant == "soft-attn" {
            assert_eq!(export.status.code(), Some(4), "{}", stderr(&export));
        } else {
            assert!(export.status.success(), "{}", stderr(&export));
            let attn = p("attn-cycle-attn");
            let text = fs::read_to_string(format!("{attn}/attention.txt")).unwrap();
            assert!(text.starts_with("# en:"));
            let pgm = fs::read_dir(&attn).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
            assert!(pgm >= 1);
        }
    }
}
