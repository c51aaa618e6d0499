use std::fs;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = rcs_cli::run(std::iter::once("rcs").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["--version"]).0, 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).0, 1);
    assert_eq!(run(&["frobnicate"]).0, 1);
    let (code, _, err) = run(&["select", "--set", "nosuch.key=3"]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown key `nosuch.key`"), "{err}");
    assert_eq!(run(&["select", "--set", "missing_equals"]).0, 1);
    assert_eq!(run(&["select", "--set", "train.mode=nope"]).0, 1);
    assert_eq!(run(&["select", "--set", "selection.fraction=1.5"]).0, 1);

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("dup.cfg");
    fs::write(&cfg, "seed = 1\nseed = 2\n").unwrap();
    assert_eq!(run(&["select", "--config", cfg.to_str().unwrap()]).0, 1);
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.rcsm");
    let (code, _, err) = run(&["probe", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    let junk = tmp.path().join("junk.rcsm");
    fs::write(&junk, b"RCSMxx").unwrap();
    assert_eq!(run(&["select", "--checkpoint", junk.to_str().unwrap()]).0, 2);
    assert_eq!(run(&["analyze", "--run", tmp.path().join("no_run").to_str().unwrap()]).0, 2);
}

#[test]
fn gen_writes_a_readable_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("d.rcsd");
    let (code, out, _) = run(&["gen", "--set", "data.n=40", "--set", "data.dim=3", "--seed", "9", "--out", path.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.starts_with("wrote 40 points of dimension 3"), "{out}");
    let d = rcs_core::data::read_dataset(&path).unwrap();
    assert_eq!((d.len(), d.dim(), d.classes()), (40, 3, 4));
}
