use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slearn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_trace(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let path = dir.join("trace.jsonl");
    let mut args = vec!["gen", "--n-jobs", "60", "--seed", "5", "--out", s(&path)];
    args.extend_from_slice(extra);
    let out = slearn(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    path
}

fn line(id: &str, arrival: u64, durations: &[u64]) -> String {
    format!(
        r#"{{"job_id":"{id}","arrival_ms":{arrival},"task_durations_ms":{durations:?},"features":{{"application":"a","job_name":"n","user":"u","submit_day":0,"submit_hour":0,"cpu_req":1.0,"mem_req":1.0}}}}"#
    )
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path(), &[]);
    for policy in ["oracle", "slearn", "3sigma"] {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out_dir = dir.path().join(format!("{policy}-{run}"));
            let out = slearn(&[
                "simulate",
                "--trace",
                s(&trace),
                "--policy",
                policy,
                "--machines",
                "150",
                "--seed",
                "7",
                "--out",
                s(&out_dir),
            ]);
            assert!(
                out.status.success(),
                "{}",
                String::from_utf8_lossy(&out.stderr)
            );
            outputs.push(read_dir_sorted(&out_dir));
        }
        let names: Vec<&str> = outputs[0].iter().map(|f| f.0.as_str()).collect();
        assert_eq!(
            names,
            ["errors.csv", "jobs.csv", "result.json", "summary.csv"]
        );
        assert_eq!(outputs[0], outputs[1], "{policy}");
        let summary = String::from_utf8(outputs[0][3].1.clone()).unwrap();
        assert!(summary
            .lines()
            .nth(1)
            .unwrap()
            .starts_with(&format!("{policy},7,")));
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path(), &[]);
    let out = dir.path().join("o");
    let cases: Vec<Vec<&str>> = vec![
        vec![
            "simulate",
            "--trace",
            s(&trace),
            "--policy",
            "sjf",
            "--out",
            s(&out),
        ],
        vec![
            "simulate",
            "--trace",
            "/nonexistent.jsonl",
            "--policy",
            "fifo",
            "--out",
            s(&out),
        ],
        vec![
            "simulate",
            "--trace",
            s(&trace),
            "--policy",
            "fifo",
            "--sampling",
            "fixed:2",
            "--out",
            s(&out),
        ],
        vec![
            "simulate",
            "--trace",
            s(&trace),
            "--policy",
            "fifo",
            "--window-days",
            "5",
            "--out",
            s(&out),
        ],
        vec![
            "simulate",
            "--trace",
            s(&trace),
            "--policy",
            "fifo",
            "--machines",
            "0",
            "--out",
            s(&out),
        ],
        vec![
            "compare",
            "--trace",
            s(&trace),
            "--policies",
            "fifo",
            "--out",
            s(&out),
        ],
        vec![
            "bayes",
            "--mu",
            "1",
            "--sigma0-sq",
            "-1",
            "--sigma1-sq",
            "1",
            "--samples",
            "1",
        ],
        vec!["frobnicate"],
    ];
    for args in cases {
        let o = slearn(&args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn history_policy_without_history_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path(), &[]);
    let o = slearn(&[
        "simulate",
        "--trace",
        s(&trace),
        "--policy",
        "3sigma",
        "--history-split",
        "0",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("NoHistory"));

    // an explicit history file makes the whole trace the evaluation set
    let hist = dir.path().join("hist.jsonl");
    assert!(
        slearn(&["gen", "--n-jobs", "30", "--seed", "9", "--out", s(&hist)])
            .status
            .success()
    );
    let out_dir = dir.path().join("h");
    let o = slearn(&[
        "simulate",
        "--trace",
        s(&trace),
        "--policy",
        "3sigma",
        "--history",
        s(&hist),
        "--out",
        s(&out_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("3sigma,0,60,"));
}

#[test]
fn compare_reports_speedup_of_target() {
    let dir = tempfile::tempdir().unwrap();
    // a long job of ten tasks arrives just before a short one; one machine
    let trace = dir.path().join("t.jsonl");
    fs::write(
        &trace,
        format!(
            "{}\n{}\n",
            line("big", 0, &[100; 10]),
            line("small", 1, &[10])
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("cmp");
    let o = slearn(&[
        "compare",
        "--trace",
        s(&trace),
        "--policies",
        "oracle,fifo",
        "--machines",
        "1",
        "--q0-hi-ms",
        "100",
        "--out",
        s(&out_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(out_dir.join("speedups_fifo.csv")).unwrap();
    // fifo: small waits for all of big (JCTs 1000, 1009); oracle slips it in at t=100 (1010, 109)
    assert_eq!(
        rows,
        "job_id,ratio\nbig,0.9900990099009901\nsmall,9.256880733944953\n"
    );
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let fifo_row = summary.lines().find(|l| l.starts_with("fifo,")).unwrap();
    let speedup: f64 = fifo_row.split(',').nth(7).unwrap().parse().unwrap();
    assert!((speedup - 2009.0 / 1119.0).abs() < 1e-12);
    assert!(speedup >= 1.0);

    let same = dir.path().join("same");
    let o = slearn(&[
        "compare",
        "--trace",
        s(&trace),
        "--policies",
        "fifo,fifo",
        "--machines",
        "1",
        "--out",
        s(&same),
    ]);
    assert!(o.status.success());
    let rows = fs::read_to_string(same.join("speedups_fifo-2.csv")).unwrap();
    assert!(rows.lines().skip(1).all(|l| l.ends_with(",1.0")));
}

#[test]
fn bayes_prints_posterior() {
    let o = slearn(&[
        "bayes",
        "--mu",
        "2",
        "--sigma0-sq",
        "1",
        "--sigma1-sq",
        "1",
        "--samples",
        "4",
    ]);
    assert!(o.status.success());
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        "mean 3\nvariance 0.5\n"
    );
    let o = slearn(&[
        "bayes",
        "--mu",
        "0",
        "--sigma0-sq",
        "inf",
        "--sigma1-sq",
        "2",
        "--samples",
        "1,3",
    ]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "mean 2\nvariance 1\n");
}

#[test]
fn gen_is_deterministic_and_zero_skew_analyzes_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        assert!(slearn(&[
            "gen",
            "--n-jobs",
            "50",
            "--sigma1-ms",
            "0",
            "--seed",
            "3",
            "--out",
            s(p)
        ])
        .status
        .success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let out_dir = dir.path().join("an");
    let o = slearn(&["analyze", "--trace", s(&a), "--out", s(&out_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cov = fs::read_to_string(out_dir.join("cov.csv")).unwrap();
    let mut multi = 0;
    for row in cov.lines().skip(1) {
        let space = row.rsplit(',').next().unwrap();
        // single-task jobs have no across-task variability
        if !space.is_empty() {
            assert_eq!(space.parse::<f64>().unwrap(), 0.0);
            multi += 1;
        }
    }
    assert!(multi > 40);
    assert!(out_dir.join("load.csv").exists());
}

#[test]
fn gen_dag_chains_base_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let base = gen_trace(dir.path(), &[]);
    let dag = dir.path().join("dag.jsonl");
    let o = slearn(&[
        "gen-dag",
        "--base",
        s(&base),
        "--seed",
        "1",
        "--out",
        s(&dag),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&dag).unwrap();
    assert!(text.lines().all(|l| l.contains("\"stages\"")));
    let n = text.lines().count();
    assert!((12..=30).contains(&n), "{n} DAG jobs from 60 base jobs");
    let out_dir = dir.path().join("sim");
    let o = slearn(&[
        "simulate",
        "--trace",
        s(&dag),
        "--policy",
        "slearn-dag",
        "--machines",
        "20",
        "--out",
        s(&out_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_trace(dir.path(), &[]);
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let o = slearn(&[
        "simulate",
        "--trace",
        s(&trace),
        "--policy",
        "fifo",
        "--out",
        s(&blocker.join("sub")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}
