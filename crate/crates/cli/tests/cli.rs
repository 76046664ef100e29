use std::path::Path;
use std::process::{Command, Output};

fn ragaseq(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragaseq"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ragaseq")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = ragaseq(out, args);
    assert!(
        o.status.success(),
        "ragaseq {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

const TINY_MODEL: &[&str] = &["--embed-dim", "6", "--hidden", "6", "--dense", "6"];

fn synth_corpus(dir: &Path) -> String {
    ok(
        dir,
        &[
            "synth",
            "--ragas",
            "3",
            "--per-raga",
            "3",
            "--length",
            "400",
            "--noise",
            "0.05",
        ],
    );
    dir.join("manifest.csv").to_string_lossy().into_owned()
}

#[test]
fn synth_writes_manifest_tokens_and_run_record() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_corpus(tmp.path());
    let rows = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(rows.lines().count(), 1 + 9);
    assert_eq!(std::fs::read_dir(tmp.path().join("tokens")).unwrap().count(), 9);

    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["subcommand"], "synth");
    assert_eq!(run["seed"], 0);
    assert_eq!(run["config"]["command"]["ragas"], 3);
    assert!(!run["artifacts"].as_array().unwrap().is_empty());
}

#[test]
fn tokenize_maps_the_tonic_octave_to_sixty() {
    let tmp = tempfile::tempdir().unwrap();
    let contour = tmp.path().join("c.csv");
    std::fs::write(&contour, "t,f0\n0.00,200.0\n0.01,-1\n0.02,200.0\n0.03,100.0\n").unwrap();
    ok(
        tmp.path(),
        &["tokenize", "--in", contour.to_str().unwrap(), "--tonic", "100"],
    );
    let tokens = std::fs::read_to_string(tmp.path().join("c.tok")).unwrap();
    let values: Vec<&str> = tokens.split_whitespace().collect();
    assert_eq!(values, ["60", "60", "0"]);
}

#[test]
fn sample_is_reproducible_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_corpus(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(
            d,
            &[
                "sample",
                "--manifest",
                &manifest,
                "--subseq-len",
                "100",
                "--seed",
                "4",
            ],
        );
    }
    let sa = std::fs::read_to_string(a.join("samples.csv")).unwrap();
    assert_eq!(sa, std::fs::read_to_string(b.join("samples.csv")).unwrap());
    // ceil(2.2 * 400 / 100) per recording
    assert_eq!(sa.lines().count(), 1 + 9 * 9);
}

#[test]
fn train_infer_rank_index_query_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_corpus(&tmp.path().join("corpus"));
    let model_dir = tmp.path().join("model");
    let mut train = vec![
        "train",
        "--manifest",
        &manifest,
        "--subseq-len",
        "100",
        "--epochs",
        "2",
        "--lr",
        "0.005",
    ];
    train.extend_from_slice(TINY_MODEL);
    ok(&model_dir, &train);
    for f in ["model.ckpt", "final.ckpt", "train_report.csv", "classes.txt"] {
        assert!(model_dir.join(f).is_file(), "{f} missing");
    }
    let report = std::fs::read_to_string(model_dir.join("train_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);

    let model = model_dir.join("model.ckpt").to_string_lossy().into_owned();
    let infer = ok(
        &tmp.path().join("infer"),
        &["infer", "--model", &model, "--manifest", &manifest],
    );
    assert_eq!(infer.lines().count(), 9);
    for line in infer.lines() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert!(fields[1] == "ABSTAIN" || fields[1].starts_with("raga"), "{line}");
    }

    let rank_dir = tmp.path().join("rank");
    ok(
        &rank_dir,
        &[
            "rank-train",
            "--model",
            &model,
            "--manifest",
            &manifest,
            "--subseq-len",
            "100",
            "--embed-out-dim",
            "8",
            "--steps",
            "3",
            "--triplets-per-step",
            "4",
        ],
    );
    let ranker = rank_dir.join("ranker.ckpt").to_string_lossy().into_owned();
    let index_dir = tmp.path().join("index");
    let precision = ok(
        &index_dir,
        &[
            "index",
            "--model",
            &ranker,
            "--manifest",
            &manifest,
            "--precision-at",
            "1,3",
        ],
    );
    assert_eq!(precision.lines().count(), 2);
    // 400 tokens in windows of 100
    let sidecar = std::fs::read_to_string(index_dir.join("index.bin.csv")).unwrap();
    assert_eq!(sidecar.lines().count(), 1 + 9 * 4);

    let query_tokens = tmp.path().join("corpus/tokens/raga01_02.tok");
    let hits = ok(
        &tmp.path().join("query"),
        &[
            "query",
            "--index",
            index_dir.join("index.bin").to_str().unwrap(),
            "--model",
            &ranker,
            "--in",
            query_tokens.to_str().unwrap(),
            "--start",
            "200",
            "--k",
            "4",
        ],
    );
    let first: Vec<&str> = hits.lines().next().unwrap().split(',').collect();
    assert_eq!(hits.lines().count(), 4);
    assert_eq!(&first[1..4], ["raga01_02", "1", "200"]);
    assert_eq!(first[4].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn index_rejects_a_classifier_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_corpus(tmp.path());
    let mut train = vec![
        "train",
        "--manifest",
        &manifest,
        "--subseq-len",
        "100",
        "--epochs",
        "0",
    ];
    train.extend_from_slice(TINY_MODEL);
    ok(tmp.path(), &train);
    let o = ragaseq(
        &tmp.path().join("x"),
        &[
            "index",
            "--model",
            tmp.path().join("model.ckpt").to_str().unwrap(),
            "--manifest",
            &manifest,
        ],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("rank-train"));
}

#[test]
fn bad_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ragaseq(tmp.path(), &["train", "--manifest", "missing.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let o = ragaseq(tmp.path(), &["synth", "--no-such-flag"]);
    assert!(!o.status.success());

    let o = ragaseq(tmp.path(), &["tokenize", "--tonic", "100"]);
    assert!(!o.status.success());
}
