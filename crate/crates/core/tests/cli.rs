mod common;

use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use sparsemn::cli::{read_fit, read_table};
use sparsemn::model::posterior_probs;
use sparsemn::Dataset;

fn sparsemn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsemn"))
        .args(args)
        .env_remove("SPARSEMN_THREADS")
        .output()
        .expect("binary runs")
}

fn write_csv(path: &Path, data: &Dataset) {
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut head: Vec<String> = (0..data.p()).map(|m| format!("x{m}")).collect();
    head.push("y".into());
    w.write_record(&head).unwrap();
    for (i, row) in data.features().rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        rec.push(data.labels()[i].to_string());
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_output_round_trips_into_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::random_dataset(1, 10, 3, 2, 1.5);
    let input = dir.path().join("toy.csv");
    let model = dir.path().join("fit.jsonl");
    write_csv(&input, &data);
    let out = sparsemn(&["fit", "--input", s(&input), "--output", s(&model), "--folds", "2", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let fitted = read_fit(&model).unwrap();
    assert_eq!(fitted.feature_names, vec!["x0", "x1", "x2"]);
    let table = read_table(&input, "y", true).unwrap();
    assert_eq!(table.features, *data.features());

    let pred = dir.path().join("pred.csv");
    let out = sparsemn(&["predict", "--input", s(&input), "--coefficients", s(&model), "--output", s(&pred)]);
    assert!(out.status.success());
    let mut reader = csv::Reader::from_path(&pred).unwrap();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.unwrap();
        let probs = posterior_probs(data.features().row(i), &fitted.beta).unwrap();
        assert_eq!(rec[1].parse::<usize>().unwrap(), probs.argmax() + 1);
        for k in 0..2 {
            let written: f64 = rec[2 + k].parse().unwrap();
            assert_eq!(written, probs.probs[k]);
        }
    }
}

#[test]
fn fit_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("d.csv");
    write_csv(&input, &common::random_dataset(2, 60, 4, 3, 1.0));
    let a = sparsemn(&["fit", "--input", s(&input), "--seed", "5"]);
    let b = sparsemn(&["fit", "--input", s(&input), "--seed", "5"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn data_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("gap.csv", "a,y\n1,1\n2,3\n0.5,1\n", "missing class 2"),
        ("bad.csv", "a,y\n1,1\nx,2\n", "line 3"),
        ("nofeat.csv", "y\n1\n2\n", "no feature columns"),
        ("nonint.csv", "a,y\n1,1\n2,1.5\n", "not a positive integer"),
        ("nolabel.csv", "a,b\n1,1\n2,1\n", "no label column"),
        ("ragged.csv", "a,b,y\n1,2,1\n3,2\n", "line 3"),
    ];
    for (name, body, msg) in cases {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        let out = sparsemn(&["fit", "--input", s(&path)]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(msg), "{name}: {err}");
        assert!(out.stdout.is_empty());
    }
    let missing = sparsemn(&["fit", "--input", "/nonexistent/file.csv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(sparsemn(&["simulate", "--model", "9", "--n", "10"]).status.code(), Some(2));
    assert_eq!(sparsemn(&["simulate", "--model", "1", "--n", "10", "--method", "ridge"]).status.code(), Some(2));
    assert_eq!(sparsemn(&["frobnicate"]).status.code(), Some(2));
}

fn infer_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        sparsemn::cli::INFER_COLUMNS.to_vec()
    );
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn infer_writes_full_precision_rows_with_odds_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("d.csv");
    write_csv(&input, &common::random_dataset(3, 120, 4, 3, 1.0));
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    for out in [&out_a, &out_b] {
        let res = sparsemn(&["infer", "--input", s(&input), "--output", s(out), "--seed", "2", "--folds", "5"]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
    let rows = infer_rows(&out_a);
    assert_eq!(rows.len(), 8);
    for row in &rows {
        let b: f64 = row[3].parse().unwrap();
        let or: f64 = row[9].parse().unwrap();
        assert!((or - b.exp()).abs() <= 1e-15 * or);
        let (lo, hi): (f64, f64) = (row[5].parse().unwrap(), row[6].parse().unwrap());
        assert!(lo < b && b < hi);
        assert_eq!(&row[12], "NA");
    }
}

/// With no signal, about 5% of p-values fall below 0.05.
#[test]
fn null_data_p_values_are_roughly_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("null.csv");
    let mut r = common::rng(4);
    use rand::Rng;
    let n = 300;
    let p = 20;
    let x = Array2::from_shape_fn((n, p), |_| r.sample::<f64, _>(rand_distr::StandardNormal));
    let y: Vec<usize> = (0..n).map(|i| 1 + i % 3).collect();
    write_csv(&input, &Dataset::new(x, y, 3).unwrap());
    let out = dir.path().join("inf.csv");
    let res = sparsemn(&["infer", "--input", s(&input), "--output", s(&out), "--no-intercept"]);
    assert!(res.status.success());
    let rows = infer_rows(&out);
    let small = rows.iter().filter(|r| r[7].parse::<f64>().unwrap() < 0.05).count() as f64;
    let m = rows.len() as f64;
    let sd = (m * 0.05 * 0.95).sqrt();
    assert!((small - 0.05 * m).abs() <= 3.0 * sd, "{small} of {m}");
}

#[test]
fn simulate_reports_mean_and_sd_reproducibly() {
    let args = [
        "simulate", "--model", "1", "--n", "80", "--p", "10", "--reps", "1", "--folds", "5", "--seed", "11",
        "--threads", "2",
    ];
    let a = sparsemn(&args);
    let b = sparsemn(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["record"], "experiment");
    assert_eq!(lines[0]["reps"], 1);
    let metrics: Vec<&serde_json::Value> = lines.iter().filter(|v| v["record"] == "metric").collect();
    assert_eq!(metrics.len(), 10);
    assert!(metrics.iter().all(|m| m["sd"] == 0.0));
    let table = String::from_utf8(a.stderr).unwrap();
    assert!(table.contains("coverage_s") && table.contains("(0.000)"));
}
