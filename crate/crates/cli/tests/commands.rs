use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn physnext(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physnext"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = physnext(&["baseline", "--frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn domain_error_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = physnext(&["baseline", "--clip", "missing", "--method", "pos", "--out", "x.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    fs::write(dir.path().join("bad.cfg"), "tau=0.5\nwat=1\n").unwrap();
    let o = physnext(&["--config", "bad.cfg", "selftest"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selftest_reports_each_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = physnext(&["selftest"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let lines: Vec<_> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|l| l.starts_with("PASS ")));
}

#[test]
fn synth_pos_eval_recovers_default_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let o = physnext(&["synth", "--out", "clips/default", "--hr", "72", "--seed", "3"], cwd);
    assert!(o.status.success());
    assert!(cwd.join("clips/default/gt.csv").is_file());
    let o = physnext(&["baseline", "--clip", "clips/default", "--method", "pos", "--out", "pred/default.csv"], cwd);
    assert!(o.status.success());
    let o = physnext(&["eval", "--pred-dir", "pred", "--gt-dir", "clips", "--out", "report"], cwd);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report = fs::read_to_string(cwd.join("report/report.csv")).unwrap();
    let lines: Vec<_> = report.lines().collect();
    assert_eq!(lines.len(), 2);
    let err: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(err <= 1.0, "{report}");
    let metrics = fs::read_to_string(cwd.join("report/metrics.csv")).unwrap();
    let mae: f64 = metrics.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(mae <= 1.0);
    for svg in ["scatter.svg", "waveform.svg", "psd.svg"] {
        assert!(fs::read_to_string(cwd.join("report").join(svg)).unwrap().starts_with("<svg"));
    }
}

#[test]
fn outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    for out in ["a", "b"] {
        let o = physnext(&["synth", "--out", out, "--duration", "8", "--hr", "90", "--width", "16", "--height", "16"], cwd);
        assert!(o.status.success());
        let o = physnext(&["baseline", "--clip", out, "--method", "chrom", "--out", &format!("{out}.csv")], cwd);
        assert!(o.status.success());
        let o = physnext(&["stmap", "--clip", out, "--rows", "3", "--cols", "2", "--out", &format!("{out}.stmap")], cwd);
        assert!(o.status.success());
    }
    for (a, b) in [("a/gt.csv", "b/gt.csv"), ("a/frame_000100.ppm", "b/frame_000100.ppm"), ("a.csv", "b.csv"), ("a.stmap", "b.stmap")] {
        assert_eq!(fs::read(cwd.join(a)).unwrap(), fs::read(cwd.join(b)).unwrap(), "{a}");
    }
}

#[test]
fn infer_runs_on_a_short_clip() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let run = |args: &[&str]| {
        let o = physnext(args, cwd);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["synth", "--out", "c", "--duration", "2.1", "--width", "16", "--height", "16"]);
    run(&["stmap", "--clip", "c", "--out", "c.stmap"]);
    run(&["infer", "--clip", "c", "--stmap", "c.stmap", "--seed", "5", "--out", "p.csv"]);
    // 63 frames are cropped to 60.
    let p = fs::read_to_string(cwd.join("p.csv")).unwrap();
    assert_eq!(p.lines().count(), 61);

    let o = physnext(&["params"], cwd);
    assert!(o.status.success());
    let text = stdout(&o);
    let count: usize = text.lines().next().unwrap().strip_prefix("parameters ").unwrap().parse().unwrap();
    assert!(count > 0);
    assert!(text.lines().any(|l| l.starts_with("video.stem.w ")));
}
