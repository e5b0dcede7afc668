use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taskdistill::data::{synthetic, Source};
use taskdistill::harness::read_results;

const ARCH: &str = "mnist:4-6-16-10:k5";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_taskdistill"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn taskdistill")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn fixture(root: &Path) -> PathBuf {
    let dir = root.join("mnist");
    synthetic::write_fixture(&dir, Source::Mnist, 120, 40, 13).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_teacher(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train-teacher", "--dataset", "mnist", "--data-dir", s(data), "--out", s(out),
        "--arch", ARCH, "--epochs", "2", "--batch-size", "16",
    ];
    if !extra.contains(&"--seed") {
        args.extend_from_slice(&["--seed", "4"]);
    }
    args.extend_from_slice(extra);
    run(&args)
}

fn capture(teacher: &Path, data: &Path, out: &Path) -> Output {
    run(&[
        "capture", "--teacher", s(teacher), "--dataset", "mnist", "--data-dir", s(data),
        "--subset-size", "3", "--tau", "3", "--out", s(out),
    ])
}

fn distill(teacher: &Path, cache: &Path, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "distill", "--teacher", s(teacher), "--cache", s(cache), "--dataset", "mnist",
        "--data-dir", s(data), "--rate", "0.5", "--subset-size", "3", "--out", s(out),
        "--epochs", "2", "--batch-size", "16",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn pipeline_runs_and_repeats_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixture(tmp.path());
    let p = |n: &str| tmp.path().join(n);

    let out = train_teacher(&data, &p("t1.tskd"), &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    assert_eq!(code(&train_teacher(&data, &p("t2.tskd"), &[])), 0);
    assert_eq!(fs::read(p("t1.tskd")).unwrap(), fs::read(p("t2.tskd")).unwrap());

    assert_eq!(code(&capture(&p("t1.tskd"), &data, &p("c1.tskc"))), 0);
    assert_eq!(code(&capture(&p("t2.tskd"), &data, &p("c2.tskc"))), 0);
    assert_eq!(fs::read(p("c1.tskc")).unwrap(), fs::read(p("c2.tskc")).unwrap());

    let results = p("one.csv");
    let out = distill(&p("t1.tskd"), &p("c1.tskc"), &data, &p("s1.tskd"), &["--results", s(&results)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("student=mnist:2-3-8-10:k5 task_acc="));
    assert_eq!(code(&distill(&p("t1.tskd"), &p("c1.tskc"), &data, &p("s2.tskd"), &[])), 0);
    assert_eq!(fs::read(p("s1.tskd")).unwrap(), fs::read(p("s2.tskd")).unwrap());
    let row = read_results(&results).unwrap();
    assert_eq!(row.cells.len(), 1);
    assert_eq!(row.cells[0].subset_size, 3);
}

#[test]
fn grid_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixture(tmp.path());
    let grid = tmp.path().join("grid");
    let out = run(&[
        "grid", "--dataset", "mnist", "--data-dir", s(&data), "--rates", "0.5,1.0",
        "--subsets", "2..3", "--out-dir", s(&grid), "--jobs", "2", "--seed", "1",
        "--epochs", "6", "--teacher-epochs", "3", "--batch-size", "8", "--arch", ARCH,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_results(grid.join("results.csv")).unwrap().cells.len(), 4);

    let report = tmp.path().join("report.csv");
    let out = run(&["report", "--grid", s(&grid), "--threshold", "0.998", "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}\n{}", String::from_utf8_lossy(&out.stderr), fs::read_to_string(grid.join("results.csv")).unwrap());
    let text = fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dataset,subset_size,threshold,rate_star,flag"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("mnist,2,0.998,"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixture(tmp.path());
    let p = |n: &str| tmp.path().join(n);

    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["train-teacher", "--bogus"])), 1);
    assert_eq!(code(&run(&["train-teacher", "--dataset", "svhn", "--data-dir", "x", "--out", "y"])), 1);
    let missing = train_teacher(&p("nowhere"), &p("t.tskd"), &[]);
    assert_eq!(code(&missing), 2);
    let diverged = train_teacher(&data, &p("t.tskd"), &["--lr", "1e200"]);
    assert_eq!(code(&diverged), 3, "{}", String::from_utf8_lossy(&diverged.stderr));

    assert_eq!(code(&run(&[
        "grid", "--dataset", "mnist", "--data-dir", s(&data), "--rates", "0.1,0.5",
        "--out-dir", s(&p("g")),
    ])), 1);

    assert_eq!(code(&train_teacher(&data, &p("a.tskd"), &[])), 0);
    assert_eq!(code(&train_teacher(&data, &p("b.tskd"), &["--seed", "5"])), 0);
    assert_eq!(code(&capture(&p("a.tskd"), &data, &p("a.tskc"))), 0);
    let stale = distill(&p("b.tskd"), &p("a.tskc"), &data, &p("s.tskd"), &[]);
    assert_eq!(code(&stale), 2);
    assert!(String::from_utf8_lossy(&stale.stderr).contains("stale"));

    fs::write(p("junk.tskd"), b"nope").unwrap();
    assert_eq!(code(&capture(&p("junk.tskd"), &data, &p("x.tskc"))), 2);
}
