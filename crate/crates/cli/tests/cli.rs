use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn psel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psel")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_input(dir: &Path) -> String {
    let path = dir.join("in.tsv");
    let mut text = String::new();
    for u in 0..3000 {
        text.push_str(&format!("u{u}\tcommon\n"));
        text.push_str(&format!("u{u}\tshared{}\n", u % 20));
        text.push_str(&format!("u{u}\tsolo{u}\n"));
    }
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn calibrate_prints_json() {
    let o = psel(&["calibrate"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["rho_argmax_t"], 100);
    assert!((v["sigma"].as_f64().unwrap() - 3.8841408046).abs() < 1e-9);
    assert!(
        (v["tau"].as_f64().unwrap() - v["rho"].as_f64().unwrap() - 2.0 * v["sigma"].as_f64().unwrap()).abs() < 1e-12
    );
}

#[test]
fn run_writes_selection_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_input(dir.path());
    let out = dir.path().join("sel.txt");
    let o = psel(&[
        "run",
        "--algo",
        "mad",
        "--input",
        &input,
        "--seed",
        "3",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let selected = fs::read_to_string(&out).unwrap();
    let names: Vec<&str> = selected.lines().collect();
    assert!(names.contains(&"common"));
    assert!(names.iter().all(|n| !n.starts_with("solo")));

    let sidecar = dir.path().join("sel.txt.metrics.json");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar).unwrap()).unwrap();
    assert_eq!(v["algo"], "mad");
    assert_eq!(v["seed_supplied"], true);
    assert!(v.get("seed").is_none());
    assert_eq!(v["input"]["entries"], 9000);
    assert_eq!(v["metrics"]["output_size"], names.len());
    assert!(v["coverage"]["buckets"].as_array().unwrap().len() == 5);
}

#[test]
fn dump_of_noisy_weights_warns() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_input(dir.path());
    let out = dir.path().join("sel.txt");
    let dump = dir.path().join("noisy.tsv");
    let o = psel(&[
        "run",
        "--algo",
        "basic",
        "--input",
        &input,
        "--seed",
        "1",
        "--output",
        out.to_str().unwrap(),
        "--dump-noisy-weights",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("NOT differentially private"));
    assert_eq!(fs::read_to_string(dump).unwrap().lines().count(), 3021);
}

#[test]
fn benchmark_mode_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_input(dir.path());
    let out = dir.path().join("sel.txt");
    let o = psel(&[
        "run",
        "--algo",
        "basic",
        "--input",
        &input,
        "--output",
        out.to_str().unwrap(),
        "--benchmark",
    ]);
    assert_eq!(code(&o), 1);
    let o = psel(&[
        "run",
        "--algo",
        "basic",
        "--input",
        &input,
        "--output",
        out.to_str().unwrap(),
        "--benchmark",
        "--seed",
        "2",
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("threshold"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_input(dir.path());
    let out = dir.path().join("sel.txt");
    let out = out.to_str().unwrap();
    // Missing input: I/O.
    assert_eq!(code(&psel(&["stats", "--input", "/nonexistent/x.tsv"])), 3);
    // Malformed input: I/O.
    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "only-one-field\n").unwrap();
    assert_eq!(code(&psel(&["stats", "--input", bad.to_str().unwrap()])), 3);
    // Usage errors.
    assert_eq!(
        code(&psel(&["run", "--algo", "nope", "--input", &input, "--output", out])),
        1
    );
    assert_eq!(
        code(&psel(&[
            "run", "--algo", "basic", "--input", &input, "--output", out, "--eps", "-1"
        ])),
        1
    );
    assert_eq!(
        code(&psel(&[
            "run", "--algo", "mad", "--input", &input, "--output", out, "--dmax", "3"
        ])),
        1
    );
    assert_eq!(code(&psel(&["stats", "--input", &input, "--format", "xml"])), 1);
    assert_eq!(
        code(&psel(&[
            "run",
            "--algo",
            "greedy",
            "--input",
            &input,
            "--output",
            out,
            "--max-sequential-entries",
            "10"
        ])),
        1
    );
    // The unsafe override lifts the d_max gate.
    assert_eq!(
        code(&psel(&[
            "run", "--algo", "mad", "--input", &input, "--output", out, "--dmax", "3", "--unsafe", "--seed", "1"
        ])),
        0
    );
}

#[test]
fn stats_and_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_input(dir.path());
    let o = psel(&["stats", "--input", &input, "--strict"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        (v["users"].as_u64(), v["items"].as_u64(), v["entries"].as_u64()),
        (Some(3000), Some(3021), Some(9000))
    );

    let sel = dir.path().join("sel.txt");
    fs::write(&sel, "common\n").unwrap();
    let o = psel(&["coverage", "--input", &input, "--selected", sel.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["user_coverage"], 1.0);
    assert!((v["entry_coverage"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);

    fs::write(&sel, "not-an-item\n").unwrap();
    assert_eq!(
        code(&psel(&[
            "coverage",
            "--input",
            &input,
            "--selected",
            sel.to_str().unwrap()
        ])),
        1
    );
}

#[test]
fn verify_calibration_exit_zero() {
    let o = psel(&["verify", "calibration", "--samples", "20000", "--ts", "1,100"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(code(&psel(&["verify", "calibration", "--ts", "0"])), 1);
}

#[test]
fn synth_commands_write_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let gap = dir.path().join("gap.tsv");
    assert_eq!(
        code(&psel(&[
            "synth-gap",
            "--n",
            "100",
            "--m",
            "10",
            "--output",
            gap.to_str().unwrap()
        ])),
        0
    );
    assert_eq!(fs::read_to_string(&gap).unwrap().lines().count(), 300);
    let z = dir.path().join("z.tsv");
    assert_eq!(
        code(&psel(&[
            "synth-zipf",
            "--entries",
            "5000",
            "--output",
            z.to_str().unwrap()
        ])),
        0
    );
    assert_eq!(code(&psel(&["synth-zipf", "--output", z.to_str().unwrap()])), 1);
    assert_eq!(
        code(&psel(&[
            "synth-zipf",
            "--preset",
            "huge",
            "--output",
            z.to_str().unwrap()
        ])),
        1
    );
}
