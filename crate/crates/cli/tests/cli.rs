use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn gqe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gqe"))
        .args(args)
        .output()
        .expect("spawn gqe")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| {
            l.strip_prefix(key)
                .map(|v| v.split_whitespace().next().unwrap().parse().unwrap())
        })
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
}

fn write_hamiltonian(dir: &Path, n_qubits: usize, word: &str) -> PathBuf {
    let path = dir.join(format!("h{n_qubits}.json"));
    let occupation = vec![0; n_qubits];
    let json = serde_json::json!({
        "name": "test",
        "n_qubits": n_qubits,
        "hf_occupation": occupation,
        "terms": [{"coeff": 1.0, "word": word}],
    });
    std::fs::write(&path, json.to_string()).unwrap();
    path
}

#[test]
fn exact_on_h2() {
    let o = gqe(&["exact", "--hamiltonian", data("h2.json").to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!((value(&text, "exact_ground_energy") + 1.137).abs() < 1e-3);
    assert!((value(&text, "hf_energy") + 1.117).abs() < 1e-3);
}

#[test]
fn exact_on_single_z_and_capability_limit() {
    let dir = tempfile::tempdir().unwrap();
    let z = write_hamiltonian(dir.path(), 1, "Z");
    let o = gqe(&["exact", "--hamiltonian", z.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(value(&stdout(&o), "exact_ground_energy"), -1.0);

    let big = write_hamiltonian(dir.path(), 17, &"Z".repeat(17));
    let o = gqe(&["exact", "--hamiltonian", big.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("capability"));
}

#[test]
fn pool_sizes_and_listing() {
    let o = gqe(&["pool", "--hamiltonian", data("beh2.json").to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(value(&stdout(&o), "pool_size"), 1633.0);

    let o = gqe(&["pool", "--hamiltonian", data("h2.json").to_str().unwrap(), "--list"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 25);
    assert_eq!(lines[0], "0 identity");
}

#[test]
fn train_writes_full_log_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run42.csv");
    let o = gqe(&[
        "train",
        "--hamiltonian",
        data("h2.json").to_str().unwrap(),
        "--loss",
        "pdpo",
        "--alpha",
        "0.5",
        "--beta",
        "0.1",
        "--seed",
        "42",
        "--steps",
        "300",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 301);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run42.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 42);
    assert_eq!(summary["best_sequence"].as_array().unwrap().len(), 12);

    let curve = dir.path().join("curve.csv");
    let o = gqe(&[
        "aggregate",
        out.to_str().unwrap(),
        "--out",
        curve.to_str().unwrap(),
        "--block",
        "10",
        "--block-out",
        dir.path().join("blocks.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let curve = std::fs::read_to_string(curve).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "step,mean,min,max");
    for row in curve.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert!(f[1] == f[2] && f[2] == f[3], "single run collapses: {row}");
    }
    let blocks = std::fs::read_to_string(dir.path().join("blocks.csv")).unwrap();
    assert_eq!(blocks.lines().count(), 31);
}

#[test]
fn hybrid_buffer_stays_within_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("hyb.csv");
    let o = gqe(&[
        "train",
        "--hamiltonian",
        data("h2.json").to_str().unwrap(),
        "--steps",
        "60",
        "--hybrid",
        "C=25,R=2,S=50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    let sizes: Vec<usize> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(sizes.iter().all(|&s| s <= 25));
    assert_eq!(*sizes.last().unwrap(), 25);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let o = gqe(&[
        "train",
        "--hamiltonian",
        data("h2.json").to_str().unwrap(),
        "--seed",
        "5",
        "--steps",
        "3",
        "--print-config",
    ]);
    assert!(o.status.success());
    let config = dir.path().join("run.toml");
    std::fs::write(&config, stdout(&o)).unwrap();

    let out = dir.path().join("c.csv");
    let o = gqe(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 4);
}

#[test]
fn error_exit_codes() {
    let missing = gqe(&[
        "train",
        "--hamiltonian",
        "/nonexistent/h2.json",
        "--out",
        "/tmp/never.csv",
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let bad_alpha = gqe(&[
        "train",
        "--hamiltonian",
        data("h2.json").to_str().unwrap(),
        "--alpha",
        "2",
    ]);
    assert_eq!(bad_alpha.status.code(), Some(2));

    let bad_hybrid = gqe(&[
        "train",
        "--hamiltonian",
        data("h2.json").to_str().unwrap(),
        "--hybrid",
        "C=1,R=2,S=0",
    ]);
    assert_eq!(bad_hybrid.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let not_a_log = dir.path().join("x.csv");
    std::fs::write(&not_a_log, "a,b\n1,2\n").unwrap();
    assert_eq!(gqe(&["aggregate", not_a_log.to_str().unwrap()]).status.code(), Some(2));

    let diverged = gqe(&[
        "train",
        "--hamiltonian",
        data("h2.json").to_str().unwrap(),
        "--steps",
        "5",
        "--lr",
        "1e300",
        "--out",
        dir.path().join("nan.csv").to_str().unwrap(),
    ]);
    assert_eq!(diverged.status.code(), Some(3));
}
