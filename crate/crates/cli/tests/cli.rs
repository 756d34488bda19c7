use std::path::Path;
use std::process::{Command, Output};

fn msfem(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfem"))
        .args(args)
        .current_dir(dir)
        .env_remove("MSFEM_CACHE")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const LAMINATE: &str = "[field]\nkind = \"laminate\"\na1 = 1.0\na2 = 4.0\n";

#[test]
fn cell_prints_laminate_tensor() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cell.toml", LAMINATE);
    let out = msfem(&["cell", "--config", "cell.toml", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout.lines().find(|l| l.starts_with("a_hat ")).expect("a_hat line");
    let v: Vec<f64> = line.split_whitespace().skip(1).map(|t| t.parse().unwrap()).collect();
    assert_eq!(v.len(), 4);
    assert!((v[0] - 1.6).abs() < 1e-3 && (v[3] - 2.5).abs() < 1e-3, "{v:?}");
    assert_eq!(v[1], 0.0);
    assert_eq!(v[2], 0.0);

    let o = dir.path().join("o");
    for f in ["correctors.csv", "a_hat.csv", "cell_mesh.msh", "chi_nodal.csv", "diagnostics.json", "manifest.json"] {
        assert!(o.join(f).is_file(), "missing {f}");
    }
    let manifest = json(&o.join("manifest.json"));
    assert_eq!(manifest["command"], "cell");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let listed: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(listed.contains(&"manifest.json") && listed.contains(&"correctors.csv"));
    let mesh = std::fs::read_to_string(o.join("cell_mesh.msh")).unwrap();
    assert!(mesh.starts_with("MSH2 4225 8192\nv 0 0\n"));
}

#[test]
fn config_hash_ignores_format_and_key_order() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.toml", "n_cell = 16\n[field]\nkind = \"laminate\"\na1 = 1.0\na2 = 4.0\n");
    write(dir.path(), "b.json", r#"{"field": {"a2": 4.0, "a1": 1.0, "kind": "laminate"}, "n_cell": 16}"#);
    assert!(msfem(&["cell", "--config", "a.toml", "--out", "a"], dir.path()).status.success());
    assert!(msfem(&["cell", "--config", "b.json", "--out", "b"], dir.path()).status.success());
    let ha = json(&dir.path().join("a/manifest.json"))["config_hash"].clone();
    let hb = json(&dir.path().join("b/manifest.json"))["config_hash"].clone();
    assert_eq!(ha, hb);
}

#[test]
fn constant_solve_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "solve.toml",
        "h = 0.25\neps = 0.1\n[field]\nkind = \"constant\"\n[source]\nkind = \"constant\"\nvalue = 1.0\n",
    );
    let out = msfem(&["solve", "--config", "solve.toml", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("o");
    for f in ["coarse_mesh.msh", "coarse_solution.csv", "system.mtx", "fine_mesh.msh", "fine_solution.csv", "solve_report.json"] {
        assert!(o.join(f).is_file(), "missing {f}");
    }
    let mtx = std::fs::read_to_string(o.join("system.mtx")).unwrap();
    assert!(mtx.starts_with("%%MatrixMarket matrix coordinate real general"));
    // 5x5 grid, 9 interior unknowns
    let size: Vec<usize> = mtx
        .lines()
        .find(|l| !l.starts_with('%'))
        .unwrap()
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(&size[..2], &[9, 9]);
    let report = json(&o.join("solve_report.json"));
    assert_eq!(report["dofs"], 25);
    assert_eq!(report["resonance_risk"], false);
}

#[test]
fn resonant_solve_logs_warning() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "solve.toml",
        &format!("h = 0.25\neps = 0.25\nwrite_fine = false\n{LAMINATE}"),
    );
    let out = msfem(&["solve", "--config", "solve.toml", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("resonance"), "{stderr}");
    assert!(!dir.path().join("o/fine_mesh.msh").exists());
}

#[test]
fn missing_field_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cell.toml", "[field]\nkind = \"sampled_grid\"\nn = 4\npath = \"nowhere.csv\"\n");
    let out = msfem(&["cell", "--config", "cell.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));
}

#[test]
fn non_elliptic_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cell.toml", "[field]\nkind = \"checkerboard\"\na1 = -1.0\na2 = 4.0\n");
    let out = msfem(&["cell", "--config", "cell.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not positive"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(msfem(&["cell"], dir.path()).status.code(), Some(2));
    assert_eq!(msfem(&["cell", "--config", "absent.toml"], dir.path()).status.code(), Some(2));
    write(dir.path(), "typo.toml", &format!("n_cels = 8\n{LAMINATE}"));
    let out = msfem(&["cell", "--config", "typo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_cels"));
    assert_eq!(msfem(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn empty_sweep_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "study.toml",
        &format!("[sweep]\nrule = \"fix_eps_sweep_h\"\neps = 0.1\nh = []\n{LAMINATE}"),
    );
    let out = msfem(&["study", "--config", "study.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn degeneration_study_reports_classical_slopes() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "study.toml",
        "modes = [\"oversampled\", \"plain\"]\nnorms = [\"energy_broken\", \"L2\"]\n\
         [field]\nkind = \"constant\"\n\
         [sweep]\nrule = \"fix_eps_sweep_h\"\neps = 0.25\nh = [0.25, 0.125, 0.0625, 0.03125]\n",
    );
    let out = msfem(&["study", "--config", "study.toml", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("o");
    let summary = json(&o.join("summary.json"));
    assert_eq!(summary["resonance"], false);
    let fits = summary["fits"].as_array().unwrap();
    assert_eq!(fits.len(), 4);
    for f in fits {
        let slope = f["slope"].as_f64().unwrap();
        match f["norm"].as_str().unwrap() {
            "energy_broken" => assert!((slope - 1.0).abs() <= 0.1, "{f}"),
            "L2" => assert!((slope - 2.0).abs() <= 0.2, "{f}"),
            other => panic!("unexpected norm {other}"),
        }
    }
    let csv = std::fs::read_to_string(o.join("study.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "h,eps,mode,norm,error,iters,seconds");
    assert_eq!(csv.lines().count(), 1 + 4 * 2 * 2);
    let svgs: Vec<_> = std::fs::read_dir(&o)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "svg"))
        .collect();
    assert_eq!(svgs.len(), 2);
}

#[test]
fn laminate_resonance_study_sets_flag() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "study.toml",
        &format!(
            "modes = [\"plain\"]\nnorms = [\"energy_broken\"]\n\
             [sweep]\nrule = \"fix_eps_sweep_h\"\neps = 0.0625\nh = [0.25, 0.125, 0.0625, 0.03125, 0.015625]\n{LAMINATE}"
        ),
    );
    let cache = dir.path().join("cache");
    let out = msfem(
        &["study", "--config", "study.toml", "--out", "o", "--no-plot", "--cache", cache.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&dir.path().join("o/summary.json"));
    assert_eq!(summary["resonance"], true, "{summary}");
    assert!(std::fs::read_dir(&cache).unwrap().count() >= 5);
    assert!(!std::fs::read_dir(dir.path().join("o"))
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
}
