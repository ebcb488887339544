use std::path::Path;
use std::process::{Command, Output};

fn freshnets(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freshnets")).args(args).output().unwrap()
}

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// 28×28 digits-shaped fixture: label `c` draws a vertical bar at column
/// `2 + 2c`, with a little deterministic texture.
fn write_fixture(dir: &Path, train: usize, test: usize) {
    let make = |n: usize, offset: usize| {
        let labels: Vec<u8> = (0..n).map(|i| ((i + offset) % 10) as u8).collect();
        let mut px = Vec::with_capacity(n * 784);
        for (i, &c) in labels.iter().enumerate() {
            for r in 0..28 {
                for col in 0..28 {
                    let bar = col == 2 + 2 * c as usize && (4..24).contains(&r);
                    px.push(if bar { 250 } else { ((i * 7 + r * 3 + col) % 40) as u8 });
                }
            }
        }
        (px, labels)
    };
    let (px, labels) = make(train, 0);
    std::fs::write(dir.join("train-images-idx3-ubyte"), idx(0x803, &[train as u32, 28, 28], &px)).unwrap();
    std::fs::write(dir.join("train-labels-idx1-ubyte"), idx(0x801, &[train as u32], &labels)).unwrap();
    let (px, labels) = make(test, 3);
    std::fs::write(dir.join("t10k-images-idx3-ubyte"), idx(0x803, &[test as u32, 28, 28], &px)).unwrap();
    std::fs::write(dir.join("t10k-labels-idx1-ubyte"), idx(0x801, &[test as u32], &labels)).unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_data_dir_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-dir");
    let out = freshnets(&[
        "train",
        "--data-dir",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("m.bin").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(missing.to_str().unwrap()), "{}", stderr(&out));
}

#[test]
fn bad_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"batch_size": 0}"#).unwrap();
    write_fixture(tmp.path(), 10, 5);
    let out = freshnets(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("m.bin").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("batch_size"));
}

#[test]
fn train_eval_inspect_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_fixture(&data, 100, 40);
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"max_epochs": 2, "batch_size": 16, "band_floor": true}"#).unwrap();

    let train = |out: &str| {
        let o = freshnets(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data-dir",
            data.to_str().unwrap(),
            "--out",
            tmp.path().join(out).to_str().unwrap(),
            "--seed",
            "7",
            "--deterministic",
            "--method",
            "fresh",
            "--rate",
            "0.015625",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (
            std::fs::read(tmp.path().join(out)).unwrap(),
            std::fs::read_to_string(tmp.path().join(format!("{out}.metrics.jsonl"))).unwrap(),
        )
    };
    let (model_a, log_a) = train("a.bin");
    let (model_b, log_b) = train("b.bin");
    assert_eq!(model_a, model_b);
    assert_eq!(log_a, log_b);
    assert!(model_a.starts_with(b"FRSH"));

    let lines: Vec<serde_json::Value> = log_a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for (rec, (epoch, split)) in lines.iter().zip([(1, "train"), (1, "val"), (2, "train"), (2, "val")]) {
        assert_eq!(rec["epoch"], epoch);
        assert_eq!(rec["split"], split);
        for key in ["loss", "error", "seconds"] {
            assert!(rec[key].is_number(), "{key} missing in {rec}");
        }
    }

    let model = tmp.path().join("a.bin");
    let eval = freshnets(&["eval", "--model", model.to_str().unwrap(), "--data-dir", data.to_str().unwrap()]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["samples"], 40);
    let err = report["test_error"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&err));
    assert!(report["test_loss"].as_f64().unwrap().is_finite());

    let out_dir = tmp.path().join("filters");
    let insp = freshnets(&[
        "inspect",
        "--model",
        model.to_str().unwrap(),
        "--layer",
        "0",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(insp.status.success(), "{}", stderr(&insp));
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("filters.json")).unwrap()).unwrap();
    let filters = sidecar["filters"].as_array().unwrap();
    assert_eq!(filters.len(), 16);
    for f in filters {
        let img = read_pgm(&std::fs::read(out_dir.join(f["file"].as_str().unwrap())).unwrap());
        assert_eq!((img.0, img.1, img.2), (5, 5, 255));
        assert_eq!(img.3.len(), 25);
        if f["max"].as_f64() > f["min"].as_f64() {
            assert!(img.3.contains(&0) && img.3.contains(&255));
        }
    }

    let fc = freshnets(&[
        "inspect",
        "--model",
        model.to_str().unwrap(),
        "--layer",
        "2",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(fc.status.code(), Some(2));
    assert!(stderr(&fc).contains("fully connected"));
}

/// Minimal independent PGM (P5) reader: whitespace-separated header tokens,
/// optional `#` comments, a single whitespace byte, then raw samples.
fn read_pgm(bytes: &[u8]) -> (usize, usize, usize, Vec<u8>) {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes[pos] == b'#' {
            while bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).unwrap().to_string());
    }
    assert_eq!(tokens[0], "P5");
    let (w, h, max): (usize, usize, usize) =
        (tokens[1].parse().unwrap(), tokens[2].parse().unwrap(), tokens[3].parse().unwrap());
    let data = bytes[pos + 1..].to_vec();
    assert_eq!(data.len(), w * h);
    (w, h, max, data)
}

#[test]
fn selftest_passes() {
    let out = freshnets(&["selftest"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("0 failed"));
    assert!(!text.contains("FAIL "));
}
