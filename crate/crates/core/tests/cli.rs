use std::path::Path;
use std::process::{Command, Output};

const CIRCLE: &str = r#"
[curve]
name = "circle"
radius = 1.0

[discretization]
degree = 2
elements = 16

[method]
name = "coupled"
q = 2
tau = 0.01
final_time = 0.1

[output]
dir = "circle"
"#;

fn mcf(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcf")).args(args).env("MCF_OUTPUT_ROOT", root).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_csvs_under_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", CIRCLE);
    let out = mcf(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("circle");
    let flow = std::fs::read_to_string(dir.join("flow_coupled.csv")).unwrap();
    assert!(flow.starts_with("method,step,t,length,min_sqrt_g,err_x_H1,err_v_H1,err_pi_H1,err_H_H1\n"));
    assert_eq!(flow.lines().count(), 1 + 11);
    assert!(dir.join("observables_coupled.csv").exists());
    let snaps = std::fs::read_to_string(dir.join("snapshots_coupled.csv")).unwrap();
    assert_eq!(snaps.lines().next(), Some("t,node,comp0,comp1,comp2"));
    assert_eq!(snaps.lines().count(), 1 + 11 * 32);
}

#[test]
fn missing_curve_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = CIRCLE.replace("[curve]\nname = \"circle\"\nradius = 1.0\n", "");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = mcf(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`curve`"));
}

#[test]
fn unsupported_bdf_order_names_the_range() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &CIRCLE.replace("q = 2", "q = 6"));
    let out = mcf(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1..=5"));
}

#[test]
fn syntax_errors_report_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &CIRCLE.replace("tau = 0.01", "tau = = 0.01"));
    let out = mcf(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn past_the_horizon_stops_with_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &CIRCLE.replace("final_time = 0.1", "final_time = 0.6"));
    let out = mcf(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(4));
    let flow = std::fs::read_to_string(tmp.path().join("circle/flow_coupled.csv")).unwrap();
    // steps 0..=49 recorded, the step reaching t = 0.5 is not taken
    assert_eq!(flow.lines().count(), 1 + 50);
}

#[test]
fn converge_needs_two_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{CIRCLE}\n[converge]\nstudy = \"space\"\nelements = [16]\n");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = mcf(&["converge", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2"));
}

#[test]
fn converge_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{CIRCLE}\n[converge]\nstudy = \"space\"\nelements = [8, 16]\nworkers = 2\n");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = mcf(&["converge", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("circle/eoc.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(tmp.path().join("circle/eoc_lifted.csv").exists());
    assert!(tmp.path().join("circle/flow_E8_tau1e-2.csv").exists());
}

#[test]
fn compare_runs_both_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", CIRCLE);
    let out = mcf(&["compare", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let dziuk = std::fs::read_to_string(tmp.path().join("circle/flow_dziuk.csv")).unwrap();
    assert!(dziuk.lines().skip(1).all(|l| l.starts_with("dziuk,")));
}

#[test]
fn verify_passes_and_detects_a_sign_flip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mcf(&["verify"], tmp.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(!text.contains("FAIL"));
    let out = mcf(&["verify", "--inject-f1-sign-flip"], tmp.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(5));
    assert!(text.contains("FAIL pde-residual"), "{text}");
}

#[test]
fn checked_in_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let config =
            mcf_codim::config::RunConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(config.warnings().is_empty());
        n += 1;
    }
    assert_eq!(n, 8);
}
