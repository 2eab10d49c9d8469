use std::fs;
use std::path::Path;

use mfg_core::cli::{run, EXIT_CONFIG, EXIT_NON_CONTRACTION, EXIT_PASS, EXIT_VIOLATION};
use mfg_core::master::read_field_csv;

const FAST: &str = "[solver]\nparticles = 256\nscenarios = 1\n[initial]\nkind = \"gaussian\"\nn = 256\nmean = 0.0\nstd = 1.0\n";

fn model(name: &str, horizon: f64, extra: &str) -> String {
    format!("[model]\nname = \"{name}\"\nhorizon = {horizon}\n{extra}{FAST}")
}

fn invoke(dir: &Path, command: &str, config: &str) -> (i32, String) {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    let mut buf = Vec::new();
    let code = run(
        [
            "solver",
            command,
            "--config",
            path.to_str().unwrap(),
            "--out",
            dir.join("out").to_str().unwrap(),
        ],
        &mut buf,
    );
    (code, String::from_utf8(buf).unwrap())
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = invoke(dir.path(), "validate", &model("lq", 1.0, ""));
    assert_eq!(code, EXIT_PASS, "{text}");
    assert!(dir.path().join("out/assumptions.json").exists());
    assert!(dir.path().join("out/monotone_h.json").exists());
    let (code, _) = invoke(dir.path(), "validate", &model("free_flow", 1.0, "a = -1.0\n"));
    assert_eq!(code, EXIT_VIOLATION);
    let (code, _) = invoke(dir.path(), "validate", "[model]\nname = \"lq\"\nunknown = 3\n");
    assert_eq!(code, EXIT_CONFIG);
    let (code, _) = invoke(dir.path(), "validate", "not toml at all [");
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn unknown_command_and_missing_config_are_usage_errors() {
    let mut buf = Vec::new();
    assert_eq!(run(["solver", "frobnicate", "--config", "x.toml"], &mut buf), EXIT_CONFIG);
    assert_eq!(run(["solver", "solve", "--config", "/nonexistent/x.toml"], &mut buf), EXIT_CONFIG);
}

#[test]
fn solve_writes_one_directory_per_interval() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = invoke(dir.path(), "solve", &model("free_flow", 1.0, ""));
    assert_eq!(code, EXIT_PASS, "{text}");
    let sol = dir.path().join("out/solution");
    for j in 0..4 {
        assert!(sol.join(format!("interval_{j}/meta.json")).exists());
    }
    assert!(!sol.join("interval_4").exists());
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 4, "{text}");
    let t = read_field_csv(&sol.join("interval_0/field_t0.csv")).unwrap();
    assert_eq!(t.nodes.len(), 65);

    let (code, _) = invoke(dir.path(), "solve", &model("lq", 0.2, ""));
    assert_eq!(code, EXIT_PASS);
}

#[test]
fn anti_monotone_long_horizon_does_not_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = invoke(dir.path(), "solve", &model("anti_monotone", 2.0, ""));
    assert_eq!(code, EXIT_NON_CONTRACTION, "{text}");
    assert!(text.contains("error"), "{text}");
}

const CHECK: &str = "[check]\ntimes = [0.0, 0.25, 0.5]\nprobes = [[-1.0], [0.0], [1.0]]\n[check.sampler]\natoms = 32\ntrials = 6\nsteps = 4\nrestarts = 1\n";

#[test]
fn check_passes_on_lq_and_flags_concave_values() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = invoke(dir.path(), "check", &format!("{}{CHECK}", model("lq", 0.5, "")));
    assert_eq!(code, EXIT_PASS, "{text}");
    assert!(dir.path().join("out/check_t2.json").exists());
    let (code, text) = invoke(dir.path(), "check", &format!("{}{CHECK}", model("anti_monotone", 0.5, "")));
    assert_eq!(code, EXIT_VIOLATION, "{text}");
    let empty = format!("{}[check]\ntimes = []\n", model("lq", 0.5, ""));
    assert_eq!(invoke(dir.path(), "check", &empty).0, EXIT_CONFIG);
}

#[test]
fn oracle_compare_writes_the_error_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{}[oracle]\ntimes = [0.0, 0.5]\nx_points = 5\nmu_points = []\nmax_rel_err = 0.05\n",
        model("lq", 0.5, "")
    );
    let (code, text) = invoke(dir.path(), "oracle-compare", &cfg);
    assert_eq!(code, EXIT_PASS, "{text}");
    let mut r = csv::Reader::from_path(dir.path().join("out/oracle_compare.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["quantity", "t", "x", "solver", "oracle", "abs_err", "rel_err"]
    );
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 10);
    for row in rows.iter().filter(|row| row[1].parse::<f64>().unwrap() == 0.5) {
        assert!(row[5].parse::<f64>().unwrap() <= 1e-12);
    }
    let (code, _) = invoke(dir.path(), "oracle-compare", &model("free_flow", 0.5, ""));
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn same_seed_gives_identical_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = model("lq", 0.5, "beta = 0.5\n").replace("scenarios = 1", "scenarios = 4");
    assert_eq!(invoke(a.path(), "solve", &cfg).0, EXIT_PASS);
    assert_eq!(invoke(b.path(), "solve", &cfg).0, EXIT_PASS);
    let files: Vec<_> = walk(&a.path().join("out"));
    assert!(files.len() > 10);
    for f in files {
        let rel = f.strip_prefix(a.path()).unwrap();
        assert_eq!(fs::read(&f).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn run_executes_the_task_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "tasks = [\"validate\", \"lipschitz-sweep\"]\n{}[lipschitz]\nhorizons = [0.25, 0.5]\nband = 1.5\n",
        model("lq", 0.5, "")
    );
    let (code, text) = invoke(dir.path(), "run", &cfg);
    assert_eq!(code, EXIT_PASS, "{text}");
    let mut r = csv::Reader::from_path(dir.path().join("out/lipschitz.csv")).unwrap();
    for row in r.records() {
        let row = row.unwrap();
        let (c, q) = (row[2].parse::<f64>().unwrap(), row[3].parse::<f64>().unwrap());
        assert!((c - q).abs() <= 0.05 * q, "{c} vs {q}");
    }
}
