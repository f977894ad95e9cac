use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spectree"))
}

#[test]
fn run_writes_outputs_and_honors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "policy = adaptive\npolicy = fixed-64\ntrials = 2\nrun_length = 256\nprompt_len = 16\n").unwrap();
    let out = dir.path().join("out");
    let o = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "5", "--workers", "2"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("raw.csv").is_file());
    assert!(out.join("summary.csv").is_file());
    assert_eq!(fs::read_dir(out.join("cells")).unwrap().count(), 4);

    let c = bin().arg("correlate").arg(out.join("raw.csv")).output().unwrap();
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    assert!(String::from_utf8_lossy(&c.stdout).contains("pearson"));
}

#[test]
fn run_with_unknown_key_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "policy = adaptive\nbogus = 1\n").unwrap();
    let o = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn calibrate_writes_fit_and_refuses_missing_trace() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("hw.profile");
    let params = spectree::CostModelParams::<f64>::preset("crossover").unwrap();
    fs::write(&profile, params.to_profile_text()).unwrap();

    let missing_out = dir.path().join("missing");
    let o = bin()
        .arg("calibrate")
        .arg("--profile")
        .arg(&profile)
        .arg("--trace")
        .arg(dir.path().join("nope.csv"))
        .arg("--out")
        .arg(&missing_out)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(!missing_out.join("calibration.txt").exists());

    let trace = dir.path().join("trace.csv");
    let mut text = String::from("s,c,observed_seconds\n");
    for s in [1u64, 16, 64, 256, 512, 1024] {
        let q = spectree::LatencyQuery::new(s, 256).unwrap();
        text.push_str(&format!("{s},256,{}\n", 1.5 * spectree::roofline_latency(&params, q) + 1e-4));
    }
    fs::write(&trace, text).unwrap();
    let out = dir.path().join("cal");
    let o = bin()
        .arg("calibrate")
        .arg("--profile")
        .arg(&profile)
        .arg("--trace")
        .arg(&trace)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_to_string(out.join("calibration.txt")).unwrap();
    let slope: f64 = written
        .lines()
        .find_map(|l| l.strip_prefix("slope = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((slope - 1.5).abs() < 1e-6);
}

#[test]
fn correlate_on_short_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("r.csv");
    fs::write(&f, "surrogate,accepted_len\n1.5,2\n2.5,3\n").unwrap();
    let o = bin().arg("correlate").arg(&f).output().unwrap();
    assert!(!o.status.success());
}
