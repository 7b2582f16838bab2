use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_benign-attn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL_RUN: &[&str] = &["run", "--n", "20", "--d", "200", "--steps", "30", "--test-size", "50", "--seed", "3"];

#[test]
fn run_is_deterministic_and_plot_does_not_touch_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run/trajectory_seed3.csv");

    let o = bin(SMALL_RUN, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("run/manifest.json").is_file());
    let first = fs::read(&csv).unwrap();

    assert_eq!(code(&bin(SMALL_RUN, dir.path())), 0);
    assert_eq!(fs::read(&csv).unwrap(), first);

    let mut plotted = SMALL_RUN.to_vec();
    plotted.push("--plot");
    assert_eq!(code(&bin(&plotted, dir.path())), 0);
    assert_eq!(fs::read(&csv).unwrap(), first);
    let svgs = fs::read_dir(dir.path().join("run"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert!(svgs > 0);
}

#[test]
fn zero_steps_records_only_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["run", "--n", "10", "--d", "100", "--steps", "0", "--test-size", "20"], dir.path());
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("run/trajectory_seed0.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("#schema="));
    assert!(lines[1].starts_with("step,"));
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("0,"));
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&["run", "--eta", "2"], dir.path())), 1);
    assert_eq!(code(&bin(&["run", "--bogus"], dir.path())), 1);
    assert_eq!(code(&bin(&["run", "--n", "0"], dir.path())), 1);

    let bad_type = dir.path().join("bad_type.toml");
    fs::write(&bad_type, "n = \"twenty\"\n").unwrap();
    assert_eq!(code(&bin(&["run", "--config", bad_type.to_str().unwrap()], dir.path())), 1);

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, "learning_rate = 0.1\n").unwrap();
    assert_eq!(code(&bin(&["run", "--config", unknown.to_str().unwrap()], dir.path())), 1);

    let empty = dir.path().join("empty.toml");
    fs::write(&empty, "rho_list = []\n").unwrap();
    assert_eq!(code(&bin(&["sweep-snr", "--config", empty.to_str().unwrap()], dir.path())), 1);

    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&bin(&["run", "--config", missing.to_str().unwrap()], dir.path())), 1);
}

#[test]
fn help_exits_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_benign-attn")).arg("--help").current_dir(dir.path()).output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["run", "sweep-snr", "sweep-dim", "maxmargin", "verify", "gradcheck"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn verify_passes_and_an_injected_fault_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin(&["verify"], dir.path());
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(dir.path().join("verify/manifest.json").is_file());

    let bad = bin(&["verify", "--inject-fault", "wrong-gradient"], dir.path());
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn gradcheck_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["gradcheck", "--seed", "1"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("gradcheck/gradcheck.csv")).unwrap();
    assert!(text.lines().count() > 2);
}

#[test]
fn maxmargin_small_instance_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["maxmargin", "--n", "6", "--d", "200", "--eta", "0.2"], dir.path());
    assert_eq!(code(&o), 0, "{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("maxmargin/margins_seed0.csv").is_file());
    assert!(dir.path().join("maxmargin/joint_seed0.csv").is_file());
    assert!(dir.path().join("maxmargin/manifest.json").is_file());
}
