use std::path::{Path, PathBuf};
use std::process::Command;

use sketchhash_cli::*;
use sketchhash_core::data::{load_features, load_labels};
use sketchhash_core::eval::MetricsReport;
use sketchhash_core::hash::HashModelParams;
use sketchhash_core::{CodeMatrix, PackedCodeIndex};

fn small_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_json(
        r#"{
            "synthetic.n_images": 120,
            "synthetic.n_sketches": 60,
            "synthetic.image_dim": 16,
            "synthetic.sketch_dim": 12,
            "synthetic.holdout": 20,
            "model.hidden": 24,
            "optimizer.bits": 16,
            "optimizer.epochs": 4,
            "embedding.dim": 8
        }"#,
    )
    .unwrap();
    cfg.threads = 1;
    cfg.out_dir = Some(out.to_path_buf());
    cfg.finalize().unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sketchhash"))
}

fn generated(dir: &Path) -> RunConfig {
    let cfg = small_config(&dir.join("data"));
    cmd_generate(&cfg).unwrap();
    cfg
}

fn trained(dir: &Path) -> (RunConfig, PathBuf) {
    let gen = generated(dir);
    let mut cfg = gen.clone();
    cfg.data_dir = Some(dir.join("data"));
    cfg.out_dir = Some(dir.join("run"));
    cmd_train(&cfg).unwrap();
    (cfg, dir.join("run"))
}

#[test]
fn generate_defaults_match_the_documented_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.out_dir = Some(dir.path().to_path_buf());
    let summary = cmd_generate(&cfg.finalize().unwrap()).unwrap();
    assert_eq!(summary.image_class_counts.len(), 5);
    assert_eq!(summary.image_class_counts.iter().sum::<usize>(), 500);
    assert_eq!(summary.sketch_class_counts.iter().sum::<usize>(), 250);
    assert_eq!(summary.query_class_counts.iter().sum::<usize>(), 50);

    // recount from the written label file
    let labels = load_labels(&dir.path().join(SKETCH_LABELS)).unwrap();
    let mut counts = vec![0; 5];
    labels.iter().for_each(|&l| counts[l] += 1);
    assert_eq!(counts, summary.sketch_class_counts);
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = cmd_generate(&small_config(a.path())).unwrap();
    cmd_generate(&small_config(b.path())).unwrap();
    for f in &sa.files {
        let name = f.file_name().unwrap();
        assert_eq!(
            std::fs::read(f).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn train_writes_all_artifacts_without_temp_files() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path());
    for f in [MODEL_FILE, IMAGE_CODES, SKETCH_CODES, TRACE_FILE] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let leftovers: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
    let trace = std::fs::read_to_string(run.join(TRACE_FILE)).unwrap();
    assert!(trace.starts_with("epoch,step,pairwise,semantic,quantization,total\n0,init,"));
    let codes = PackedCodeIndex::load(&run.join(IMAGE_CODES)).unwrap();
    assert_eq!((codes.len(), codes.bits()), (120, 16));
}

#[test]
fn train_rejects_mixed_dataset_sources() {
    let cfg = RunConfig::from_json(r#"{"data.dir": "x", "synthetic.n_images": 10}"#).unwrap();
    let err = cfg.finalize().unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn encode_matches_the_library_call() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path());
    let data = dir.path().join("data");
    let model = HashModelParams::load(&run.join(MODEL_FILE)).unwrap();

    let out = run.join("enc_images.dshc");
    let input = EncodeInput::Images {
        images: data.join(IMAGE_FEATURES),
        tokens: data.join(TOKEN_FEATURES),
    };
    let via_cli = cmd_encode(&run.join(MODEL_FILE), &input, None, &out).unwrap();
    let direct = model
        .encode_images(
            &load_features(&data.join(IMAGE_FEATURES)).unwrap(),
            &load_features(&data.join(TOKEN_FEATURES)).unwrap(),
        )
        .unwrap();
    assert_eq!(
        std::fs::read(&out).unwrap(),
        PackedCodeIndex::pack_sequential(&direct)
            .unwrap()
            .to_bytes()
    );
    assert_eq!(via_cli.unpack(), direct);

    // sketch side only touches the shared path: sign of forward_sketch
    let sk = load_features(&data.join(QUERY_FEATURES)).unwrap();
    let input = EncodeInput::Sketches {
        sketches: data.join(QUERY_FEATURES),
    };
    let codes = cmd_encode(&run.join(MODEL_FILE), &input, None, &run.join("q.dshc")).unwrap();
    assert_eq!(
        codes.unpack(),
        CodeMatrix::sign_of(&model.forward_sketch(&sk).unwrap())
    );
}

#[test]
fn encode_reports_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path());
    let data = dir.path().join("data");
    // image features fed to the sketch encoder: 16 columns vs 12 expected
    let wrong = EncodeInput::Sketches {
        sketches: data.join(IMAGE_FEATURES),
    };
    let err = cmd_encode(&run.join(MODEL_FILE), &wrong, None, &run.join("x.dshc")).unwrap_err();
    assert!(err.to_string().contains("expects 12 features"), "{err}");

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let input = EncodeInput::Sketches { sketches: empty };
    assert!(cmd_encode(&run.join(MODEL_FILE), &input, None, &run.join("y.dshc")).is_err());
}

#[test]
fn search_finds_stored_codes_and_round_trips_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path());
    let ids = dir.path().join("ids.txt");
    std::fs::write(
        &ids,
        (0..120)
            .map(|i| format!("{}\n", 5000 + i))
            .collect::<String>(),
    )
    .unwrap();
    let index = cmd_index(&run.join(IMAGE_CODES), Some(&ids), &run.join("index.dshc")).unwrap();
    assert_eq!(index.ids()[3], 5003);

    // the gallery queried with its own codes
    let k1 = cmd_search(
        &run.join("index.dshc"),
        &run.join(IMAGE_CODES),
        SearchMode::TopK(1),
        1,
    )
    .unwrap();
    for (q, hits) in k1.results.iter().enumerate() {
        assert_eq!(hits[0].distance, 0);
        assert_eq!(index.code_words(hits[0].position), index.code_words(q));
    }

    let radius = cmd_search(
        &run.join("index.dshc"),
        &run.join(SKETCH_CODES),
        SearchMode::Radius(2),
        2,
    )
    .unwrap();
    assert!(radius.results.iter().flatten().all(|h| h.distance <= 2));

    let top = cmd_search(
        &run.join("index.dshc"),
        &run.join(SKETCH_CODES),
        SearchMode::TopK(7),
        3,
    )
    .unwrap();
    let parsed = parse_results_csv(&results_to_csv(&top.results)).unwrap();
    let expected: Vec<Vec<(u64, u32)>> = top
        .results
        .iter()
        .map(|h| h.iter().map(|x| (x.id, x.distance)).collect())
        .collect();
    assert_eq!(parsed, expected);
}

#[test]
fn search_rejects_mismatched_code_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.dshc");
    let b = dir.path().join("b.dshc");
    PackedCodeIndex::pack_sequential(&CodeMatrix::ones(16, 3))
        .unwrap()
        .save(&a)
        .unwrap();
    PackedCodeIndex::pack_sequential(&CodeMatrix::ones(32, 3))
        .unwrap()
        .save(&b)
        .unwrap();
    let err = cmd_search(&a, &b, SearchMode::TopK(1), 1).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn eval_writes_reports_and_checks_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run) = trained(dir.path());
    let data = dir.path().join("data");
    let out = dir.path().join("eval");
    let report = cmd_eval(
        &run.join(IMAGE_CODES),
        &run.join(SKETCH_CODES),
        &data.join(IMAGE_LABELS),
        &data.join(SKETCH_LABELS),
        &cfg.eval,
        2,
        &out,
    )
    .unwrap();
    assert_eq!(report.precision_at_k[0].0, 200);
    let json: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(out.join(METRICS_JSON)).unwrap()).unwrap();
    assert_eq!(json, report, "metrics.json must round-trip exactly");
    let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    for key in [
        "map",
        "precision_at_k",
        "pr_curve",
        "hd_precision",
        "per_query",
        "code_payload_bytes",
    ] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(
        std::fs::read_to_string(out.join(AP_CSV))
            .unwrap()
            .lines()
            .count(),
        61
    );

    let err = cmd_eval(
        &run.join(IMAGE_CODES),
        &run.join(SKETCH_CODES),
        &data.join(SKETCH_LABELS),
        &data.join(SKETCH_LABELS),
        &cfg.eval,
        1,
        &out,
    )
    .unwrap_err();
    assert!(err.to_string().contains("labels"), "{err}");
}

#[test]
fn noiseless_data_gives_perfect_retrieval_and_class_aligned_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg =
        RunConfig::from_json(r#"{"synthetic.noise_sigma": 0.0, "optimizer.bits": 32}"#).unwrap();
    cfg.threads = 1;
    cfg.out_dir = Some(dir.path().join("data"));
    let cfg = cfg.finalize().unwrap();
    cmd_generate(&cfg).unwrap();
    let mut train = cfg.clone();
    train.data_dir = Some(dir.path().join("data"));
    train.out_dir = Some(dir.path().join("run"));
    cmd_train(&train).unwrap();

    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let gallery = run.join("gallery.dshc");
    let queries = run.join("queries.dshc");
    let images = EncodeInput::Images {
        images: data.join(IMAGE_FEATURES),
        tokens: data.join(TOKEN_FEATURES),
    };
    let g = cmd_encode(&run.join(MODEL_FILE), &images, None, &gallery).unwrap();
    let sk = EncodeInput::Sketches {
        sketches: data.join(QUERY_FEATURES),
    };
    let q = cmd_encode(&run.join(MODEL_FILE), &sk, None, &queries).unwrap();
    let report = cmd_eval(
        &gallery,
        &queries,
        &data.join(IMAGE_LABELS),
        &data.join(QUERY_LABELS),
        &cfg.eval,
        1,
        &dir.path().join("eval"),
    )
    .unwrap();
    assert!(report.map >= 0.99, "{}", report.map);

    // Same-class image/sketch pairs share more bits than cross-class pairs.
    // Full agreement is not expected: with 5 classes the pairwise target has a
    // negative eigen-direction that only asymmetric image/sketch codes can follow.
    let gl = load_labels(&data.join(IMAGE_LABELS)).unwrap();
    let ql = load_labels(&data.join(QUERY_LABELS)).unwrap();
    let (same, cross) = agreement(&g.unpack(), &gl, &q.unpack(), &ql);
    eprintln!("encoded agreement same {same:.3} cross {cross:.3}");
    assert!(same > cross + 0.2, "{same} {cross}");

    let bi = PackedCodeIndex::load(&run.join(IMAGE_CODES))
        .unwrap()
        .unpack();
    let bs = PackedCodeIndex::load(&run.join(SKETCH_CODES))
        .unwrap()
        .unpack();
    let sl = load_labels(&data.join(SKETCH_LABELS)).unwrap();
    let (same, cross) = agreement(&bi, &gl, &bs, &sl);
    eprintln!("fitted agreement same {same:.3} cross {cross:.3}");
    assert!(same > cross + 0.2, "{same} {cross}");
}

fn agreement(a: &CodeMatrix, la: &[usize], b: &CodeMatrix, lb: &[usize]) -> (f64, f64) {
    let m = a.bits();
    let mut acc = [(0usize, 0usize); 2];
    for (j, &y) in lb.iter().enumerate() {
        for (i, &x) in la.iter().enumerate() {
            let slot = &mut acc[usize::from(x != y)];
            slot.0 += (0..m).filter(|&k| a.get(k, i) == b.get(k, j)).count();
            slot.1 += m;
        }
    }
    (
        acc[0].0 as f64 / acc[0].1 as f64,
        acc[1].0 as f64 / acc[1].1 as f64,
    )
}

#[test]
fn binary_and_library_train_agree() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generated(dir.path());
    let mut cfg = gen.clone();
    cfg.data_dir = Some(dir.path().join("data"));
    cfg.out_dir = Some(dir.path().join("lib"));
    cmd_train(&cfg).unwrap();

    let config = dir.path().join("cfg.json");
    std::fs::write(
        &config,
        r#"{"model.hidden": 24, "optimizer.bits": 16, "optimizer.epochs": 4, "embedding.dim": 8}"#,
    )
    .unwrap();
    let status = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(dir.path().join("data"))
        .arg("--out")
        .arg(dir.path().join("bin"))
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    for f in [MODEL_FILE, IMAGE_CODES, SKETCH_CODES, TRACE_FILE] {
        assert_eq!(
            std::fs::read(dir.path().join("lib").join(f)).unwrap(),
            std::fs::read(dir.path().join("bin").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn binary_exit_codes() {
    let ok = bin().arg("gradcheck").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("max relative error"));

    let fail = bin().args(["gradcheck", "--corrupt"]).output().unwrap();
    assert_eq!(fail.status.code(), Some(1));

    let missing = bin()
        .args(["train", "--data", "/nonexistent/dir", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let cfg = bin()
        .args(["generate", "--config"])
        .arg(&bad)
        .args(["--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(cfg.status.code(), Some(2));

    let invalid = bin()
        .args(["train", "--lambda", "-1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(invalid.status.code(), Some(1));

    let usage = bin().args(["search", "--bogus"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn binary_search_prints_csv() {
    let dir = tempfile::tempdir().unwrap();
    let codes = dir.path().join("c.dshc");
    let m = CodeMatrix::from_rows(&[&[1, -1, 1], &[1, 1, -1]]).unwrap();
    PackedCodeIndex::pack(&m, vec![7, 8, 9])
        .unwrap()
        .save(&codes)
        .unwrap();
    let out = bin()
        .args(["search", "--index"])
        .arg(&codes)
        .arg("--queries")
        .arg(&codes)
        .args(["--k", "1", "--threads", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let parsed = parse_results_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(parsed, vec![vec![(7, 0)], vec![(8, 0)], vec![(9, 0)]]);

    let ball = bin()
        .args(["search", "--index"])
        .arg(&codes)
        .arg("--queries")
        .arg(&codes)
        .args(["--radius", "0"])
        .output()
        .unwrap();
    let parsed = parse_results_csv(&String::from_utf8(ball.stdout).unwrap()).unwrap();
    assert_eq!(parsed[1], vec![(8, 0)]);
}
