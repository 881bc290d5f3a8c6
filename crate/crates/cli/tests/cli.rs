use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn orthosync(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthosync"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec!["synth", "--n", "30", "--d", "3", "--sigma", "0.1", "--p", "0.6", "--seed", "11", "--out"]
            .into_iter()
            .chain([out].into_iter())
            .map(String::from)
            .collect::<Vec<_>>()
    };
    for out in ["a", "b"] {
        let a = args(out);
        let a: Vec<&str> = a.iter().map(|s| s.as_str()).collect();
        let o = orthosync(&a, tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["blocks.f64", "mask.csv", "meta.json", "truth.f64"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn invalid_probability_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orthosync(
        &["synth", "--n", "5", "--d", "3", "--sigma", "0.1", "--p", "0", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("p must lie"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orthosync(&["solve", "--bogus"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = orthosync(&["--help"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn solve_recovers_noiseless_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orthosync(
        &["synth", "--n", "40", "--d", "3", "--sigma", "0", "--p", "1", "--out", "inst"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = orthosync(&["solve", "--instance", "inst", "--out", "res"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let result = json(&tmp.path().join("res/result.json"));
    assert_eq!(result["schema_version"], 1);
    assert!(result["rel_err"].as_f64().unwrap() <= 1e-8);
    let trace = fs::read_to_string(tmp.path().join("res/trace.csv")).unwrap();
    assert!(trace.starts_with("t,objective,rel_decrease"));
}

#[test]
fn solve_writes_json_trace() {
    let tmp = tempfile::tempdir().unwrap();
    orthosync(
        &["synth", "--n", "20", "--d", "2", "--sigma", "0.1", "--p", "1", "--out", "inst"],
        tmp.path(),
    );
    let o = orthosync(
        &["solve", "--instance", "inst", "--algorithm", "gpm", "--format", "json", "--out", "res"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = json(&tmp.path().join("res/trace.json"));
    assert!(!trace.as_array().unwrap().is_empty());
    let result = json(&tmp.path().join("res/result.json"));
    assert_eq!(result["config"]["retraction"], "exact_svd");
}

#[test]
fn align_two_nodes_reproduces_edge() {
    let tmp = tempfile::tempdir().unwrap();
    let (c, s) = (0.6_f64, 0.8_f64);
    fs::write(
        tmp.path().join("edges.txt"),
        format!("# n=2 d=2\n1 2 {c} {} {s} {c}\n", -s),
    )
    .unwrap();
    let o = orthosync(&["align", "--edges", "edges.txt", "--out", "res"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let poses = fs::read_to_string(tmp.path().join("res/poses.txt")).unwrap();
    let rows: Vec<Vec<f64>> = poses
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(|t| t.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    let (x1, x2) = (&rows[0], &rows[1]);
    // X1 X2^T with row-major 2x2 blocks
    let m = |a: usize, b: usize| x1[2 * a] * x2[2 * b] + x1[2 * a + 1] * x2[2 * b + 1];
    let want = [[c, -s], [s, c]];
    for a in 0..2 {
        for b in 0..2 {
            assert!((m(a, b) - want[a][b]).abs() < 1e-10, "{poses}");
        }
    }
}

#[test]
fn align_reports_against_truth() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("edges.txt"), "# n=3 d=1\n1 2 -1\n2 3 -1\n1 3 1\n").unwrap();
    fs::write(tmp.path().join("truth.txt"), "1\n-1\n1\n").unwrap();
    let o = orthosync(
        &["align", "--edges", "edges.txt", "--truth", "truth.txt", "--out", "res"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let res = fs::read_to_string(tmp.path().join("res/residuals.csv")).unwrap();
    assert_eq!(res.lines().count(), 4);
    assert!(res.starts_with("node,residual"));
    let result = json(&tmp.path().join("res/result.json"));
    assert!(result["rel_err"].as_f64().unwrap() < 1e-12);
}

#[test]
fn malformed_edge_list_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("edges.txt"), "# n=3 d=1\n1 2 1\n2 x 1\n").unwrap();
    let o = orthosync(&["align", "--edges", "edges.txt"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    fs::write(tmp.path().join("bad.txt"), "n=3 d=1\n1 2 1\n").unwrap();
    let o = orthosync(&["align", "--edges", "bad.txt"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn verify_noiseless_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orthosync(
        &["verify", "--n", "20", "--d", "2", "--sigma", "0", "--t-max", "5", "--out", "v"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(!out.contains("FAIL"), "{out}");
    assert_eq!(out.matches("PASS").count(), 5, "{out}");
    let theory = fs::read_to_string(tmp.path().join("v/theory.csv")).unwrap();
    assert!(theory.starts_with("t,quantity,value"));
    let summary = json(&tmp.path().join("v/verify.json"));
    assert_eq!(summary["checks"].as_array().unwrap().len(), 5);
}

#[test]
fn verify_heavy_noise_fails_contraction_but_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orthosync(
        &["verify", "--n", "20", "--d", "2", "--sigma", "4.472", "--t-max", "5", "--out", "v"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("FAIL contraction"), "{}", stdout(&o));
}

#[test]
fn verify_rejects_large_n() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orthosync(&["verify", "--n", "300"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orthosync(
        &[
            "bench", "--n", "20", "--d", "2", "--sigma", "0.05,0.1", "--p", "1", "--trials", "2",
            "--t-s", "1,2", "--out", "bench.csv",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(tmp.path().join("bench.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header.join(","),
        "n,d,sigma,p,algorithm,t_s,trials,rel_err_mean,rel_err_std,dfn_mean,time_mean_s,time_std_s,iters_mean,status"
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    // two cells, each with ns_rgs at two depths plus gpm
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert_eq!(&r[13], "ok");
        if &r[4] == "gpm" {
            assert_eq!(&r[5], "");
        }
    }
    let meta = json(&tmp.path().join("bench.meta.json"));
    assert_eq!(meta["threads"], 1);
}

#[test]
fn bench_parallel_cells_matches_serial_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |extra: &[&str], out: &str| {
        let mut args = vec!["bench", "--n", "20", "--d", "2", "--sigma", "0.1", "--p", "1,0.7", "--trials", "1"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out]);
        let o = orthosync(&args, tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let mut rdr = csv::Reader::from_path(tmp.path().join(out)).unwrap();
        rdr.records().map(|r| r.unwrap()[7].to_string()).collect::<Vec<_>>()
    };
    let serial = run(&[], "a.csv");
    let par = run(&["--parallel-cells", "--threads", "2"], "b.csv");
    assert_eq!(serial, par);
}
