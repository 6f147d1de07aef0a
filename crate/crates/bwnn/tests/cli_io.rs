use bwnn::cli_io::{
    config_from_report, emit, error_exit_code, load_csv, load_idx, parse_config, parse_flags, run_command, write_csv,
    IdxFile, RunConfig, IDX_IMAGES, IDX_LABELS,
};
use bwnn::Error;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn flags(args: &[&str]) -> Vec<(String, String)> {
    parse_flags(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
}

fn key_of(e: Error) -> String {
    match e {
        Error::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn empty_config_is_all_defaults() {
    let cfg = parse_config(Some("{}"), &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(parse_config(None, &[]).unwrap(), RunConfig::default());
}

#[test]
fn flags_override_file() {
    let cfg = parse_config(Some(r#"{"lr": 0.1, "epochs": 7}"#), &flags(&["--lr=0.01"])).unwrap();
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.epochs, 7);
    let cfg = parse_config(None, &flags(&["--dim", "3", "--batch-size", "5"])).unwrap();
    assert_eq!((cfg.d, cfg.batch_size), (3, 5));
}

#[test]
fn bad_values_name_their_key() {
    assert_eq!(key_of(parse_config(Some(r#"{"lr": -1}"#), &[]).unwrap_err()), "lr");
    assert_eq!(key_of(parse_config(None, &flags(&["--lr", "-1"])).unwrap_err()), "lr");
    assert_eq!(key_of(parse_config(Some(r#"{"learning_rate": 1}"#), &[]).unwrap_err()), "learning_rate");
    assert_eq!(key_of(parse_config(Some(r#"{"epochs": "many"}"#), &[]).unwrap_err()), "epochs");
    assert_eq!(key_of(parse_config(Some(r#"{"epochs": 2.5}"#), &[]).unwrap_err()), "epochs");
    assert_eq!(key_of(parse_config(None, &flags(&["--kernel", "sinc"])).unwrap_err()), "kernel");
    assert_eq!(key_of(parse_config(None, &flags(&["--widths", "1,x"])).unwrap_err()), "widths");
    let e = parse_config(Some(r#"{"lr": -1}"#), &[]).unwrap_err();
    assert_eq!(error_exit_code(&e), 2);
    assert!(parse_flags(&["lr".to_string()]).is_err());
    assert!(parse_flags(&["--lr".to_string()]).is_err());
}

#[test]
fn csv_rows_are_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "x,y,label\n3,4,a\n0,1,b\n").unwrap();
    let ds = load_csv(&p, "label").unwrap();
    assert!((ds.x[(0, 0)] - 0.6).abs() < 1e-15 && (ds.x[(1, 0)] - 0.8).abs() < 1e-15);
    assert_eq!((ds.x[(0, 1)], ds.x[(1, 1)]), (0.0, 1.0));
}

#[test]
fn csv_labels_in_first_seen_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "f,y\n1,a\n2,b\n3,a\n").unwrap();
    let ds = load_csv(&p, "y").unwrap();
    assert_eq!(ds.class_names, vec!["a", "b"]);
    assert_eq!(ds.labels, Some(vec![0, 1, 0]));
}

#[test]
fn csv_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "x,y,label\n3,4,a\n0,0,b\n").unwrap();
    // data rows are numbered from 1
    let e = load_csv(&p, "label").unwrap_err();
    assert!(e.to_string().contains("row 2"), "{e}");
    assert_eq!(error_exit_code(&e), 3);
    std::fs::write(&p, "x,y,label\n3,oops,a\n").unwrap();
    let e = load_csv(&p, "label").unwrap_err().to_string();
    assert!(e.contains("row 1") && e.contains("\"y\""), "{e}");
    std::fs::write(&p, "x,y\n3,4\n").unwrap();
    assert!(load_csv(&p, "label").is_err());
}

#[test]
fn csv_round_trip() {
    let mut ds = bwnn::harness::make_synthetic(bwnn::harness::SyntheticKind::TwoGaussians, 30, 4, 0.3, 1).unwrap();
    ds.labels = Some(ds.targets.iter().map(|&t| usize::from(t > 0.0)).collect());
    ds.class_names = vec!["neg".into(), "pos".into()];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rt.csv");
    std::fs::write(&p, write_csv(&ds).unwrap()).unwrap();
    let back = load_csv(&p, "label").unwrap();
    assert_eq!(back.labels.as_ref().unwrap().len(), 30);
    for (a, b) in ds.x.iter().zip(back.x.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
    // first-seen naming may reorder classes; the partition must survive
    let la = ds.labels.unwrap();
    let lb = back.labels.clone().unwrap();
    for i in 0..30 {
        for j in 0..30 {
            assert_eq!(la[i] == la[j], lb[i] == lb[j]);
        }
    }
    // a second pass is stable up to renormalization rounding
    let p2 = dir.path().join("rt2.csv");
    std::fs::write(&p2, write_csv(&back).unwrap()).unwrap();
    let again = load_csv(&p2, "label").unwrap();
    assert!((again.x - &back.x).amax() < 1e-15);
}

#[test]
fn idx_golden_fixture() {
    let img = std::fs::read(fixture("golden-images.idx")).unwrap();
    let lab = std::fs::read(fixture("golden-labels.idx")).unwrap();
    assert_eq!(
        format!("{:x}", Sha256::digest(&img)),
        "20dd51aba4961f5b8d3d32af775facbe910d44d91f475c4e4a4b03477bcd7a83"
    );
    let f = IdxFile::parse(&img, IDX_IMAGES).unwrap();
    assert_eq!(f.dims, vec![10, 28, 28]);
    assert_eq!(f.payload.len(), 7840);
    assert_eq!(f.to_bytes(), img);
    assert_eq!(IdxFile::parse(&lab, IDX_LABELS).unwrap().payload, (0..10).collect::<Vec<u8>>());
    let ds = load_idx(&fixture("golden-images.idx"), &fixture("golden-labels.idx"), 0, 0).unwrap();
    assert_eq!(ds.x.shape(), (784, 10));
    for c in ds.x.column_iter() {
        assert!((c.norm() - 1.0).abs() < 1e-12);
    }
    // pixel 5 of image 3, before normalization, is ((3*37 + 0*11 + 5*7) % 256) / 255
    let raw = |i: usize, k: usize| ((i * 37 + (k / 28) * 11 + (k % 28) * 7) % 256) as f64 / 255.0;
    let norm: f64 = (0..784).map(|k| raw(3, k).powi(2)).sum::<f64>().sqrt();
    assert!((ds.x[(5, 3)] - raw(3, 5) / norm).abs() < 1e-15);
    let mut h = Sha256::new();
    for v in ds.x.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    assert_eq!(format!("{:x}", h.finalize()), GOLDEN_DATASET_HASH);
}

const GOLDEN_DATASET_HASH: &str = "7c4c6d2f0d48f2897fa7b5ee66327e2eea80988fec7b56a824165a7c352414ce";

#[test]
fn idx_rejections() {
    let img = std::fs::read(fixture("golden-images.idx")).unwrap();
    assert!(IdxFile::parse(&img, IDX_LABELS).is_err());
    assert!(IdxFile::parse(&img[..img.len() - 1], IDX_IMAGES).unwrap_err().to_string().contains("truncated"));
    let mut extra = img.clone();
    extra.push(0);
    assert!(IdxFile::parse(&extra, IDX_IMAGES).is_err());
    assert!(IdxFile::parse(&img[..6], IDX_IMAGES).is_err());
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("labels.idx");
    std::fs::write(&short, IdxFile { magic: IDX_LABELS, dims: vec![9], payload: vec![0; 9] }.to_bytes()).unwrap();
    assert!(load_idx(&fixture("golden-images.idx"), &short, 0, 0).is_err());
}

#[test]
fn idx_subsample_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let n = 300u32;
    let img = IdxFile { magic: IDX_IMAGES, dims: vec![n, 2, 2], payload: (0..4 * n).map(|i| (i % 251) as u8 + 1).collect() };
    let lab = IdxFile { magic: IDX_LABELS, dims: vec![n], payload: (0..n).map(|i| (i % 10) as u8).collect() };
    let (pi, pl) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    std::fs::write(&pi, img.to_bytes()).unwrap();
    std::fs::write(&pl, lab.to_bytes()).unwrap();
    let a = load_idx(&pi, &pl, 100, 5).unwrap();
    let b = load_idx(&pi, &pl, 100, 5).unwrap();
    let c = load_idx(&pi, &pl, 100, 6).unwrap();
    assert_eq!(a.x.ncols(), 100);
    assert_eq!(a, b);
    assert_ne!(a.x, c.x);
}

fn run(args: &[&str]) -> bwnn::cli_io::RunOutcome {
    run_command(&parse_config(None, &flags(args)).unwrap()).unwrap()
}

#[test]
fn gradcheck_command_passes() {
    let o = run(&["--command", "gradcheck", "--d", "3", "--d1", "5", "--d2", "4", "--seed", "1"]);
    assert!(o.passed());
    assert_eq!(o.exit_code(), 0);
    assert!(o.report["results"]["max_rel_err"].as_f64().unwrap() < 1e-5);
}

#[test]
fn spectrum_command_emits_table() {
    let o = run(&["--command", "spectrum", "--kernel", "rgauss", "--dim", "3", "--xi", "2", "--kmax", "40"]);
    assert!(o.passed(), "{:?}", o.failures());
    let (_, csv) = o.artifacts.iter().find(|(n, _)| n.ends_with(".csv")).unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    assert_eq!(text.lines().count(), 42);
    assert!(text.starts_with("k,N_dk,u_k,parity"));
}

#[test]
fn verify_quasi_report_fields() {
    let o = run(&["--command", "verify-quasi", "--width", "400", "--samples", "600", "--probes", "8"]);
    let r = &o.report["results"];
    assert!(r["ks"].is_array() && r["pearson_r"].is_number());
}

#[test]
fn reports_embed_provenance_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = parse_config(
        None,
        &flags(&["--command", "train", "--d", "4", "--d1", "32", "--d2", "16", "--epochs", "3", "--m", "30", "--seed", "9"]),
    )
    .unwrap();
    let cfg = RunConfig { out: out.to_string_lossy().into_owned(), ..cfg };
    let o = run_command(&cfg).unwrap();
    emit(&cfg, &o).unwrap();
    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["config", "seed", "code_version", "rng_version", "checks", "pass"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let again = run_command(&config_from_report(&report).unwrap()).unwrap();
    assert_eq!(serde_json::to_string(&again.report).unwrap(), serde_json::to_string(&o.report).unwrap());
    assert_eq!(again.artifacts, o.artifacts);
}

#[test]
fn unknown_command_is_a_config_error() {
    let e = parse_config(None, &flags(&["--command", "dance"])).unwrap_err();
    assert_eq!(key_of(e), "command");
}
