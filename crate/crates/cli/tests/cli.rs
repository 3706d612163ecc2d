use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bilinid::pipeline::{gaussian_input, harmonic_input};
use bilinid::synthetic::{random_stable_continuous, toy_system};
use bilinid::{discretize_backward_euler, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn bilinid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilinid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), stderr(out));
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Columns of a csv table with a header row.
fn columns(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let mut cols = vec![Vec::new(); header.len()];
    for line in lines {
        for (c, v) in line.split(',').enumerate() {
            cols[c].push(v.parse::<f64>().unwrap());
        }
    }
    (header, cols)
}

fn write_dataset(p: &Path, u: &[f64], y: &[f64]) {
    let mut text = String::from("t,u,y\n");
    for k in 0..u.len() {
        text.push_str(&format!("{k},{:?},{:?}\n", u[k], y[k]));
    }
    fs::write(p, text).unwrap();
}

#[test]
fn simulate_matches_library_bitwise() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "toy.json");
    Model::Discrete(toy_system()).save(&model).unwrap();
    let out_file = path(&dir, "y.csv");
    ok(&bilinid(&["simulate", "--model", s(&model), "--harmonic", "50", "--out", s(&out_file)]));

    let (header, cols) = columns(&fs::read_to_string(&out_file).unwrap());
    assert_eq!(header, ["t", "u", "y"]);
    let u = harmonic_input(50);
    let y = toy_system().simulate(&u).unwrap();
    assert_eq!(cols[1], u);
    assert!(cols[2].iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn simulate_reads_an_input_file() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "toy.json");
    Model::Discrete(toy_system()).save(&model).unwrap();
    let input = path(&dir, "u.csv");
    fs::write(&input, "t,u\n0,0.5\n2,-1\n4,0.25\n").unwrap();
    let out = bilinid(&["simulate", "--model", s(&model), "--input", s(&input)]);
    ok(&out);
    let (_, cols) = columns(&stdout(&out));
    assert_eq!(cols[0], [0.0, 2.0, 4.0]);
    assert_eq!(cols[2], toy_system().simulate(&[0.5, -1.0, 0.25]).unwrap());
}

#[test]
fn continuous_model_needs_dt() {
    let dir = TempDir::new().unwrap();
    let csys = random_stable_continuous(&mut ChaCha8Rng::seed_from_u64(3), 3);
    let model = path(&dir, "c.json");
    Model::Continuous(csys.clone(), None).save(&model).unwrap();

    let out = bilinid(&["simulate", "--model", s(&model), "--harmonic", "5"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("--dt"));

    let out = bilinid(&["simulate", "--model", s(&model), "--harmonic", "5", "--dt", "0.1"]);
    ok(&out);
    let (_, cols) = columns(&stdout(&out));
    let expected = discretize_backward_euler(&csys, 0.1).unwrap().simulate(&harmonic_input(5)).unwrap();
    assert_eq!(cols[2], expected);
}

#[test]
fn exchanger_model_starts_at_its_offset() {
    let dir = TempDir::new().unwrap();
    let input = path(&dir, "u.csv");
    let u = gaussian_input(200, 0.5, 0.05, 1).unwrap();
    let mut text = String::from("u\n");
    for v in &u {
        text.push_str(&format!("{v:?}\n"));
    }
    fs::write(&input, text).unwrap();
    let out = bilinid(&["simulate", "--model", s(&fixture("exchanger_r3.json")), "--input", s(&input)]);
    ok(&out);
    let (_, cols) = columns(&stdout(&out));
    let y = &cols[2];
    assert!((y[0] - 96.9).abs() < 0.1, "first output {}", y[0]);
    assert!(y.iter().all(|v| (80.0..110.0).contains(v)), "output left the operating range");
}

#[test]
fn ingest_check_reads_csv() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "d.csv");
    fs::write(&data, "t,u,y\n0,1,2\n1,3,4\n").unwrap();
    let out = bilinid(&["ingest-check", "--data", s(&data)]);
    ok(&out);
    let text = stdout(&out);
    assert!(text.contains("samples 2"), "{text}");
    assert!(text.contains("dt 1"), "{text}");
    assert!(text.contains("u: mean 2"), "{text}");
}

#[test]
fn ingest_check_reads_whitespace_columns() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "d.dat");
    fs::write(&data, "% header\n0 0.5 90\n1 0.6 91\n2 0.7 92\n").unwrap();
    let out = bilinid(&[
        "ingest-check", "--data", s(&data), "--format", "daisy", "--u-col", "2", "--y-col", "3", "--t-col", "1",
    ]);
    ok(&out);
    assert!(stdout(&out).contains("samples 3"));

    let out = bilinid(&["ingest-check", "--data", s(&data), "--format", "daisy", "--y-col", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_token_is_a_data_error_naming_the_line() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "d.csv");
    fs::write(&data, "t,u,y\n0,1,2\n1,x,4\n").unwrap();
    let out = bilinid(&["ingest-check", "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    let out = bilinid(&["ingest-check", "--data", s(&path(&dir, "missing.csv"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn compare_prints_one_row_per_model() {
    let dir = TempDir::new().unwrap();
    let u: Vec<f64> = (0..11).map(|k| k as f64).collect();
    let y_ref = u.clone();
    let shifted: Vec<f64> = y_ref.iter().map(|v| v + 0.5).collect();
    let reference = path(&dir, "ref.csv");
    let same = path(&dir, "same.csv");
    let offset = path(&dir, "offset.csv");
    write_dataset(&reference, &u, &y_ref);
    write_dataset(&same, &u, &y_ref);
    write_dataset(&offset, &u, &shifted);
    let plot = path(&dir, "plot.csv");

    let out = bilinid(&[
        "compare",
        "--data",
        s(&reference),
        "--trace",
        &format!("same={}", s(&same)),
        "--trace",
        &format!("offset={}", s(&offset)),
        "--plot",
        s(&plot),
    ]);
    ok(&out);
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows, ["model,mpe,max_abs,rms", "same,0.0,0.0,0.0", "offset,5.0,0.5,0.5"]);
    let (header, cols) = columns(&fs::read_to_string(&plot).unwrap());
    assert_eq!(header, ["t", "u", "y_ref", "same", "offset"]);
    assert_eq!(cols[4], shifted);
}

#[test]
fn compare_simulates_model_files() {
    let dir = TempDir::new().unwrap();
    let u = gaussian_input(40, 0.0, 1.0, 5).unwrap();
    let y = toy_system().simulate(&u).unwrap();
    let reference = path(&dir, "ref.csv");
    write_dataset(&reference, &u, &y);
    let model = path(&dir, "toy.json");
    Model::Discrete(toy_system()).save(&model).unwrap();
    let out = bilinid(&["compare", "--data", s(&reference), "--model", &format!("toy={}", s(&model))]);
    ok(&out);
    let row = stdout(&out).lines().nth(1).unwrap().to_string();
    let fields: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(fields.iter().all(|v| *v <= 1e-12), "{row}");
}

#[test]
fn compare_rejects_misaligned_traces() {
    let dir = TempDir::new().unwrap();
    let reference = path(&dir, "ref.csv");
    let short = path(&dir, "short.csv");
    write_dataset(&reference, &[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]);
    write_dataset(&short, &[1.0, 2.0], &[1.0, 2.0]);
    let out = bilinid(&["compare", "--data", s(&reference), "--trace", s(&short)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn identify_direct_recovers_the_toy_system() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "model.json");
    let report = path(&dir, "report.json");
    let spectrum = path(&dir, "spectrum.csv");
    let out = bilinid(&[
        "identify-direct", "--toy", "--depth", "4", "--experiments", "8", "--tol", "1e-12",
        "--out", s(&model), "--report", s(&report), "--spectrum", s(&spectrum),
    ]);
    ok(&out);
    assert!(stdout(&out).contains("order 2"));

    let Model::Discrete(sys) = Model::load(&model).unwrap() else {
        panic!("identified model must be discrete");
    };
    let u = harmonic_input(50);
    let (a, b) = (sys.simulate(&u).unwrap(), toy_system().simulate(&u).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-8));

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["order"], 2);
    assert!(report["markov_error"].as_f64().unwrap() <= 1e-8);
    let (header, cols) = columns(&fs::read_to_string(&spectrum).unwrap());
    assert_eq!(header, ["index", "sigma", "sigma_ratio"]);
    assert_eq!(cols[0], [1.0, 2.0, 3.0]);
    assert!(cols[2][2] <= 1e-12);
}

#[test]
fn too_few_experiments_is_a_numerical_error() {
    let out = bilinid(&["identify-direct", "--toy", "--depth", "4", "--experiments", "1"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("increase the experiment count"));
}

#[test]
fn identify_direct_needs_exactly_one_source() {
    let out = bilinid(&["identify-direct", "--depth", "4"]);
    assert_eq!(out.status.code(), Some(2));
    let out = bilinid(&["identify-direct", "--toy", "--random", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let config = path(&dir, "cfg.toml");
    fs::write(&config, "depth = 4\nexperiments = 8\norder = 1\n\n[train]\nepochs = 5\n").unwrap();

    let out = bilinid(&["--config", s(&config), "identify-direct", "--toy"]);
    ok(&out);
    assert!(stdout(&out).contains("order 1"), "{}", stdout(&out));

    let out = bilinid(&["identify-direct", "--toy", "--config", s(&config), "--order", "2"]);
    ok(&out);
    assert!(stdout(&out).contains("order 2"), "{}", stdout(&out));

    fs::write(&config, "depth = \"four\"\n").unwrap();
    let out = bilinid(&["--config", s(&config), "identify-direct", "--toy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn markov_and_hankel_dumps() {
    let dir = TempDir::new().unwrap();
    let w = path(&dir, "w.json");
    let batch = path(&dir, "batch.txt");
    ok(&bilinid(&[
        "markov", "--toy", "--depth", "4", "--experiments", "8", "--out", s(&w), "--batch-out", s(&batch),
    ]));
    let recovered = bilinid::io::markov_from_json(&fs::read_to_string(&w).unwrap()).unwrap();
    assert!(recovered.max_abs_diff(&toy_system().markov_oracle(4)) <= 1e-10);

    let again = bilinid(&["markov", "--batch", s(&batch)]);
    ok(&again);
    let from_batch = bilinid::io::markov_from_json(&stdout(&again)).unwrap();
    assert_eq!(from_batch, recovered);

    let out = bilinid(&["hankel", "--markov", s(&w)]);
    ok(&out);
    let (_, cols) = columns(&stdout(&out));
    assert_eq!(cols[0].len(), 3);
    assert!(cols[2][1] > 1e-3 && cols[2][2] <= 1e-12);

    let out = bilinid(&["hankel", "--markov", s(&w), "--p", "2", "--q", "3"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn identify_sequence_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    let u = gaussian_input(1000, 0.0, 0.3, 21).unwrap();
    let y = toy_system().simulate(&u).unwrap();
    let data = path(&dir, "d.csv");
    write_dataset(&data, &u, &y);
    let (model, report, narx, trace) =
        (path(&dir, "m.json"), path(&dir, "r.json"), path(&dir, "n.json"), path(&dir, "t.csv"));
    let out = bilinid(&[
        "identify-sequence", "--data", s(&data), "--lags", "3", "--hidden", "16,16", "--epochs", "200",
        "--depth", "5", "--experiments", "256", "--order", "2", "--train-prefix", "800",
        "--out", s(&model), "--report", s(&report), "--narx-out", s(&narx), "--trace", s(&trace),
    ]);
    ok(&out);
    assert!(stdout(&out).contains("order 2"));

    let Model::Discrete(sys) = Model::load(&model).unwrap() else {
        panic!("identified model must be discrete");
    };
    assert_eq!(sys.dim(), 2);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["training_samples"], 800);
    // Loose sanity bound; the tuned accuracy is checked in the acceptance suite.
    assert!(report["mpe"].as_f64().unwrap() < 5.0, "{report}");
    let narx: serde_json::Value = serde_json::from_str(&fs::read_to_string(&narx).unwrap()).unwrap();
    assert_eq!(narx["format"], "bilinid-narx");
    assert_eq!(narx["layer_widths"], serde_json::json!([16, 16, 1]));
    let (header, cols) = columns(&fs::read_to_string(&trace).unwrap());
    assert_eq!(header, ["t", "u", "y_ref", "model", "narx"]);
    assert_eq!(cols[3], sys.simulate(&u).unwrap());
}

#[test]
fn short_sequence_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "d.csv");
    write_dataset(&data, &[0.1, 0.2, 0.3, 0.4], &[1.0, 2.0, 1.5, 0.5]);
    let out = bilinid(&["identify-sequence", "--data", s(&data), "--lags", "5", "--depth", "4"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
