use std::path::Path;
use std::process::{Command, Output};

fn cryoreduce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cryoreduce"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn pricing() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../pricing.sample")
        .display()
        .to_string()
}

#[test]
fn synth_then_run() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    let out = cryoreduce(&[
        "synth",
        "gen",
        "--seed",
        "2",
        "--good",
        "45",
        "--junk",
        "5",
        "--mrc",
        "--out",
        p(&syn),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(stdout_json(&out)["images"], 50);

    let run_dir = dir.path().join("run");
    let out = cryoreduce(&[
        "run",
        "--input",
        p(&syn.join("stack.mrc")),
        "--out",
        p(&run_dir),
        "--workers",
        "2",
        "--pricing",
        &pricing(),
        "--parallel-uploads",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = stdout_json(&out);
    assert_eq!(summary["images"], 50);
    for name in ["scores.csv", "report.json", "scatter.svg", "timings.json"] {
        assert!(run_dir.join(name).is_file(), "{name}");
    }
    let csv = std::fs::read_to_string(run_dir.join("scores.csv")).unwrap();
    let k = summary["k"].as_u64().unwrap() as usize;
    let header: Vec<String> = std::iter::once("image_id".to_string())
        .chain((1..=k).map(|i| format!("pc{i}")))
        .chain(["distance".to_string(), "label".to_string()])
        .collect();
    assert_eq!(csv.lines().next().unwrap(), header.join(","));
    assert_eq!(csv.lines().count(), 51);
    assert_eq!(
        std::fs::read_dir(run_dir.join("store/keep"))
            .unwrap()
            .count() as u64,
        summary["kept_count"].as_u64().unwrap()
    );
}

#[test]
fn stepwise_commands_match_run() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    assert!(cryoreduce(&[
        "synth",
        "gen",
        "--seed",
        "9",
        "--good",
        "27",
        "--junk",
        "3",
        "--width",
        "12",
        "--height",
        "10",
        "--raw",
        "--out",
        p(&syn)
    ])
    .status
    .success());

    let ds = dir.path().join("ds");
    let out = cryoreduce(&[
        "ingest",
        "--input",
        p(&syn),
        "--chunk-size",
        "4",
        "--out",
        p(&ds),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(stdout_json(&out)["chunks"], 8);

    let red = dir.path().join("red");
    let out = cryoreduce(&[
        "reduce",
        "--input",
        p(&ds),
        "--workers",
        "3",
        "--out",
        p(&red),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let tri = dir.path().join("tri");
    let out = cryoreduce(&["triage", "--input", p(&red), "--out", p(&tri)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let run_dir = dir.path().join("run");
    let out = cryoreduce(&[
        "run",
        "--input",
        p(&syn),
        "--chunk-size",
        "4",
        "--workers",
        "1",
        "--out",
        p(&run_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    assert_eq!(
        std::fs::read(tri.join("scores.csv")).unwrap(),
        std::fs::read(run_dir.join("scores.csv")).unwrap()
    );
}

#[test]
fn reduce_flags_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    assert!(cryoreduce(&[
        "synth",
        "gen",
        "--good",
        "10",
        "--junk",
        "0",
        "--width",
        "4",
        "--height",
        "4",
        "--out",
        p(&syn)
    ])
    .status
    .success());
    let red = dir.path().join("red");
    let out = cryoreduce(&[
        "reduce",
        "--input",
        p(&syn.join("stack.mrc")),
        "--mode",
        "pixel",
        "--no-center",
        "--components",
        "3",
        "--out",
        p(&red),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = stdout_json(&out);
    assert_eq!(summary["k"], 3);
    assert_eq!(summary["mode"], "pixel");
    assert_eq!(summary["centered"], false);

    let out = cryoreduce(&[
        "reduce",
        "--input",
        p(&syn.join("stack.mrc")),
        "--explained",
        "0.5",
        "--out",
        p(&red),
    ]);
    assert!(out.status.success());
    assert!(stdout_json(&out)["k"].as_u64().unwrap() >= 1);
}

#[test]
fn cost_reports_ranking_savings_and_spot_rule() {
    let out = cryoreduce(&[
        "cost",
        "--pricing",
        &pricing(),
        "--data-gb",
        "2000",
        "--hours",
        "60.8",
        "--instances",
        "200",
        "--reduced-gb",
        "1500",
        "--bid",
        "0.96",
        "--spot-price",
        "0.96",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    let ranking = v["ranking"].as_array().unwrap();
    assert_eq!(ranking[0]["scheme"], "spot");
    assert_eq!(ranking[0]["total_dollars"], "11873.60");
    assert_eq!(ranking[0]["breakdown"]["compute"], "11673.60");
    let spot = ranking[0]["savings_pct"].as_f64().unwrap();
    assert!((spot - 27.0).abs() <= 0.5);
    assert!(v["reduction_savings"]
        .as_array()
        .unwrap()
        .iter()
        .all(|s| s["savings_dollars"] == "50.00"));
    assert_eq!(v["spot"]["decision"], "terminate");

    let out = cryoreduce(&[
        "cost",
        "--pricing",
        &pricing(),
        "--data-gb",
        "1",
        "--hours",
        "1",
        "--bid",
        "0.96",
        "--spot-price",
        "0.5",
    ]);
    assert_eq!(stdout_json(&out)["spot"]["decision"], "start");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // usage errors
    assert_eq!(cryoreduce(&[]).status.code(), Some(1));
    assert_eq!(cryoreduce(&["run", "--out", "x"]).status.code(), Some(1));
    assert_eq!(cryoreduce(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        cryoreduce(&[
            "run",
            "--input",
            "a.mrc",
            "--out",
            "x",
            "--components",
            "2",
            "--explained",
            "0.8"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        cryoreduce(&["run", "--input", "a.mrc", "--out", "x", "--workers", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        cryoreduce(&[
            "synth",
            "gen",
            "--good",
            "0",
            "--junk",
            "0",
            "--out",
            p(dir.path())
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(cryoreduce(&["--help"]).status.code(), Some(0));

    // stage failures
    let out = cryoreduce(&[
        "run",
        "--input",
        p(&dir.path().join("missing.mrc")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[ingest]"));

    let bad = dir.path().join("bad.mrc");
    std::fs::write(&bad, [0u8; 100]).unwrap();
    let out = cryoreduce(&[
        "reduce",
        "--input",
        p(&bad),
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = cryoreduce(&[
        "triage",
        "--input",
        p(dir.path()),
        "--out",
        p(&dir.path().join("t")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        assert!(cryoreduce(&[
            "synth",
            "gen",
            "--seed",
            "5",
            "--good",
            "8",
            "--junk",
            "2",
            "--out",
            p(&dir.path().join(name))
        ])
        .status
        .success());
    }
    for file in ["stack.mrc", "truth.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(file)).unwrap(),
            std::fs::read(dir.path().join("b").join(file)).unwrap()
        );
    }
}
