use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxloss"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn body_lines(o: &Output) -> Vec<String> {
    stdout(o).lines().skip(1).map(str::to_string).collect()
}

#[test]
fn sweep_small_example() {
    let o = run(&["sweep", "--a", "1", "--dr", "0.1", "--steps", "8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("# manifest {"));
    assert!(!text.contains('\r'));
    let lines = body_lines(&o);
    assert_eq!(lines[0], "theta_deg,r_diou");
    let rows: Vec<&String> = lines[1..]
        .iter()
        .take_while(|l| !l.starts_with("argmin"))
        .collect();
    assert_eq!(rows.len(), 8);
    assert!(rows[5].starts_with("225,0.2320"));
    assert!(lines.iter().any(|l| l == "argmin,225"));
    assert!(text.contains("disagrees_with_published=true"));
}

#[test]
fn invalid_arguments_exit_one() {
    assert_eq!(run(&["sweep", "--a", "-1"]).status.code(), Some(1));
    assert_eq!(run(&["sweep", "--steps", "4"]).status.code(), Some(1));
    assert_eq!(run(&["gradcheck", "--n", "0"]).status.code(), Some(1));
    assert_eq!(run(&["nope"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["sweep", "--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_tolerance_failure_exits_two() {
    let o = run(&["gradcheck", "--n", "10", "--tol", "1e-20"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains(",false"));
    let o = run(&["gradcheck", "--n", "1", "--kind", "miou"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(body_lines(&o).len(), 2);
}

#[test]
fn parse_errors_name_file_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("boxes.jsonl");
    std::fs::write(
        &f,
        "{\"cx\":0,\"cy\":0,\"w\":2,\"h\":2}\n\n{\"cx\":0,\"cy\":0,\"w\":0,\"h\":1}\n",
    )
    .unwrap();
    let o = run(&["cluster", f.to_str().unwrap(), "--k", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("boxes.jsonl:3:"), "{err}");
    assert!(err.contains("`w`"), "{err}");
}

#[test]
fn nms_output_reads_back_as_detections() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("d.jsonl");
    std::fs::write(
        &f,
        "{\"cx\":0,\"cy\":0,\"w\":10,\"h\":10,\"score\":0.9}\n\
         {\"cx\":2.5,\"cy\":0,\"w\":10,\"h\":10,\"score\":0.8}\n\
         {\"cx\":5,\"cy\":0,\"w\":10,\"h\":10,\"score\":0.7}\n",
    )
    .unwrap();
    let out = dir.path().join("kept.jsonl");
    let o = run(&[
        "nms",
        f.to_str().unwrap(),
        "--iou",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    // The manifest line is a comment, so the output is itself valid input.
    let o = run(&["nms", out.to_str().unwrap(), "--iou", "0.5"]);
    assert!(o.status.success());
    let kept = body_lines(&o);
    assert_eq!(kept.len(), 2);
    assert!(kept[0].contains("\"score\":0.9") && kept[1].contains("\"score\":0.7"));
}

#[test]
fn eval_reports_absent_bins() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    let g = dir.path().join("g.jsonl");
    std::fs::write(
        &d,
        "{\"cx\":2.5,\"cy\":0,\"w\":10,\"h\":10,\"score\":0.9}\n",
    )
    .unwrap();
    std::fs::write(&g, "{\"cx\":0,\"cy\":0,\"w\":10,\"h\":10}\n").unwrap();
    let o = run(&["eval", d.to_str().unwrap(), g.to_str().unwrap()]);
    let lines = body_lines(&o);
    assert_eq!(lines[0], "metric,value");
    assert_eq!(lines[1], "ap,0.3");
    assert!(lines.contains(&"ap_m,absent".to_string()));
}

#[test]
fn failed_run_leaves_no_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = run(&["sweep", "--dr", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!Path::new(&out).exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn replay_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("b.jsonl");
    std::fs::write(
        &f,
        "{\"cx\":0,\"cy\":0,\"w\":2,\"h\":2}\n{\"cx\":0,\"cy\":0,\"w\":8,\"h\":4}\n",
    )
    .unwrap();
    let out = dir.path().join("c.csv");
    assert!(run(&[
        "cluster",
        f.to_str().unwrap(),
        "--k",
        "2",
        "-o",
        out.to_str().unwrap()
    ])
    .status
    .success());
    assert!(run(&["replay", out.to_str().unwrap()]).status.success());
    std::fs::write(
        &f,
        "{\"cx\":0,\"cy\":0,\"w\":3,\"h\":2}\n{\"cx\":0,\"cy\":0,\"w\":8,\"h\":4}\n",
    )
    .unwrap();
    let o = run(&["replay", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("input changed"));
}
