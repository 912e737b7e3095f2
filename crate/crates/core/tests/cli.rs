use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

/// Arguments of one run and the (artifact, schema) pairs it must satisfy.
type Run<'a> = (&'a [&'a str], &'a [(&'a str, &'a str)]);

fn isoflow(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isoflow"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("ISOFLOW_CAP_N")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir() && !p.file_name().unwrap().to_string_lossy().starts_with('.'))
        .collect();
    dirs.sort();
    dirs
}

fn schema(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs")
        .join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Checks the top-level required keys and the embedded stamp.
fn conforms(doc: &Value, schema_file: &str) {
    let s = schema(schema_file);
    for key in s["required"].as_array().unwrap() {
        let key = key.as_str().unwrap();
        assert!(doc.get(key).is_some(), "{schema_file}: missing {key}");
    }
    if let Some(stamp) = doc.get("manifest") {
        assert!(stamp["version"].is_string());
        assert_eq!(stamp["config_hash"].as_str().unwrap().len(), 64);
    }
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = isoflow(tmp.path(), &["catalog", "--values", "1,2,4", "--bogus"]);
    assert_eq!(code(&o), 64);
    let o = isoflow(tmp.path(), &["frobnicate"]);
    assert_eq!(code(&o), 64);
    assert_eq!(code(&isoflow(tmp.path(), &["--help"])), 0);
}

#[test]
fn a_spectrum_that_is_not_disjoint_is_rejected_with_a_witness() {
    let tmp = tempfile::tempdir().unwrap();
    let o = isoflow(tmp.path(), &["spectrum-check", "--values", "1,2,3"]);
    assert_eq!(code(&o), 1);
    let all = format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(all.contains("1") && all.contains("3"), "{all}");

    let o = isoflow(tmp.path(), &["spectrum-check", "--values", "1,2,4"]);
    assert_eq!(code(&o), 0);
    let dir = &run_dirs(tmp.path())[0];
    conforms(&read_json(dir.join("check.json")), "check.schema.json");
    conforms(
        &read_json(dir.join("manifest.json")),
        "manifest.schema.json",
    );
}

#[test]
fn missing_spectrum_files_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = isoflow(
        tmp.path(),
        &["catalog", "--spectrum", "/nonexistent/spectrum.json"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn the_dimension_cap_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_isoflow"))
        .arg("--out")
        .arg(tmp.path())
        .args(["catalog", "--values", "1,2,4"])
        .env("ISOFLOW_CAP_N", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    // The flag wins over the environment.
    let o = Command::new(env!("CARGO_BIN_EXE_isoflow"))
        .arg("--out")
        .arg(tmp.path())
        .args(["catalog", "--values", "1,2,4", "--cap", "3"])
        .env("ISOFLOW_CAP_N", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn reruns_reproduce_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["flow", "--values", "1,2,4", "--seed", "7", "--T", "5"];
    assert_eq!(code(&isoflow(tmp.path(), &args)), 0);
    let dirs = run_dirs(tmp.path());
    assert_eq!(dirs.len(), 1);
    let csv = fs::read_to_string(dirs[0].join("trajectory.csv")).unwrap();

    let again = isoflow(tmp.path(), &args);
    assert_eq!(code(&again), 0);
    assert!(String::from_utf8_lossy(&again.stdout).contains("reproduced"));
    assert_eq!(run_dirs(tmp.path()).len(), 1);

    // Thread count is not part of the result.
    let threaded: Vec<&str> = ["--threads", "3"].into_iter().chain(args).collect();
    assert_eq!(code(&isoflow(tmp.path(), &threaded)), 0);

    // Corrupt an artifact and the rerun reports a mismatch.
    fs::write(dirs[0].join("trajectory.csv"), csv.replace('e', "E")).unwrap();
    assert_eq!(code(&isoflow(tmp.path(), &args)), 2);
    assert_eq!(code(&isoflow(tmp.path(), &["report"])), 2);
}

#[test]
fn a_different_seed_gets_its_own_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&isoflow(
            tmp.path(),
            &["flow", "--values", "1,2,4", "--seed", "1", "--T", "3"]
        )),
        0
    );
    assert_eq!(
        code(&isoflow(
            tmp.path(),
            &["flow", "--values", "1,2,4", "--seed", "2", "--T", "3"]
        )),
        0
    );
    assert_eq!(run_dirs(tmp.path()).len(), 2);
    assert_eq!(code(&isoflow(tmp.path(), &["report"])), 0);
}

#[test]
fn artifacts_match_their_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: [Run; 4] = [
        (
            &["catalog", "--values", "1,2,4"],
            &[("catalog.json", "catalog.schema.json")],
        ),
        (
            &["flow", "--values", "1,2,4", "--T", "5"],
            &[("terminal.json", "terminal.schema.json")],
        ),
        (
            &["adjacency", "--values", "1,2,4", "--verify"],
            &[("adjacency.json", "adjacency.schema.json")],
        ),
        (
            &["emp", "--values", "1,2,4", "--eps", "0.5", "--T", "10"],
            &[("emp.json", "emp.schema.json")],
        ),
    ];
    for (args, files) in runs {
        let o = isoflow(tmp.path(), args);
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let dir = run_dirs(tmp.path())
            .into_iter()
            .find(|d| {
                d.file_name()
                    .unwrap()
                    .to_string_lossy()
                    .starts_with(&format!("{}-", args[0]))
            })
            .unwrap();
        for (file, schema_file) in files {
            conforms(&read_json(dir.join(file)), schema_file);
        }
        let manifest = read_json(dir.join("manifest.json"));
        conforms(&manifest, "manifest.schema.json");
        let hash = manifest["config_hash"].as_str().unwrap();
        assert!(dir
            .file_name()
            .unwrap()
            .to_string_lossy()
            .ends_with(&hash[..16]));
    }
}

#[test]
fn csv_floats_carry_seventeen_significant_digits() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&isoflow(
            tmp.path(),
            &["flow", "--values", "1,2,4", "--T", "2"]
        )),
        0
    );
    let dir = &run_dirs(tmp.path())[0];
    let csv = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# isoflow "));
    assert_eq!(lines.next().unwrap(), "t,psi,off_diagonal_mass");
    for line in lines.take(20) {
        for field in line.split(',') {
            let mantissa = field.trim_start_matches('-').split('e').next().unwrap();
            assert_eq!(mantissa.replace('.', "").len(), 17, "{field}");
            let x: f64 = field.parse().unwrap();
            assert_eq!(format!("{x:.16e}"), field);
        }
    }
}

#[test]
fn sde_and_markov_write_their_chains() {
    let tmp = tempfile::tempdir().unwrap();
    let o = isoflow(
        tmp.path(),
        &[
            "sde", "--values", "1,3", "--eps", "0.5", "--h", "0.01", "--T", "20", "--paths", "4",
            "--seed", "3",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = &run_dirs(tmp.path())[0];
    conforms(
        &read_json(dir.join("markov.json")),
        "sde-markov.schema.json",
    );
    conforms(
        &read_json(dir.join("stationarity.json")),
        "stationarity.schema.json",
    );
    let chains = fs::read_to_string(dir.join("chains.csv")).unwrap();
    assert_eq!(chains.lines().nth(1).unwrap(), "path,step,from,to,sojourn");
}
