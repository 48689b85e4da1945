use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use poolingvq::formats::{write_codebook, write_features};
use poolingvq::{Codebook, Matrix, Rng};
use tempfile::TempDir;

const SMALL: &str = "epochs = 3\ncodebook_size = 8\n\n[data]\nsamples = 80\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poolingvq")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {text:?}"))
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn features(&self, name: &str, m: &Matrix) -> String {
        write_features(&self.path(name), m).unwrap();
        self.s(name)
    }

    fn codebook(&self, name: &str, p: usize, d: usize, seed: u64) -> String {
        let cb = Codebook::new(Matrix::gaussian(p, d, 1.0, &mut Rng::new(seed))).unwrap();
        write_codebook(&self.path(name), &cb).unwrap();
        self.s(name)
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["compress", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["train-toy", "--bogus"])), 1);
    let f = Fixture::new();
    let x = f.features("x.pvqf", &Matrix::gaussian(10, 4, 1.0, &mut Rng::new(1)));
    let cb = f.codebook("cb.pvq1", 3, 4, 2);
    let o = run(&["compress", &x, "-c", &cb, "-o", &f.s("y"), "--window", "2", "--stride", "3"]);
    assert_eq!(code(&o), 1);
    let o = run(&["sweep", "--sizes", "1,2", "-o", &f.s("t.tsv"), "--config", &f.s("small.toml")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn file_and_shape_errors_exit_two() {
    let f = Fixture::new();
    let cb = f.codebook("cb.pvq1", 3, 4, 2);
    let missing = f.s("nope.pvqf");
    assert_eq!(code(&run(&["compress", &missing, "-c", &cb, "-o", &f.s("y")])), 2);

    fs::write(f.path("junk.pvqf"), b"PVQF\x01").unwrap();
    assert_eq!(code(&run(&["compress", &f.s("junk.pvqf"), "-c", &cb, "-o", &f.s("y")])), 2);

    let x = f.features("x.pvqf", &Matrix::gaussian(10, 5, 1.0, &mut Rng::new(1)));
    let o = run(&["compress", &x, "-c", &cb, "-o", &f.s("y")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    fs::write(f.path("bad.toml"), "epochs = \"many\"\n").unwrap();
    let o = run(&["train-toy", "-o", &f.s("m"), "-m", &f.s("t"), "--config", &f.s("bad.toml")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn data_errors_exit_three() {
    let f = Fixture::new();
    let x = f.features("x.pvqf", &Matrix::gaussian(4, 3, 1.0, &mut Rng::new(1)));
    let o = run(&["init-codebook", &x, "-s", "10", "-o", &f.s("cb.pvq1")]);
    assert_eq!(code(&o), 3);

    let mut z = Matrix::gaussian(6, 3, 1.0, &mut Rng::new(1));
    z.row_mut(2).fill(0.0);
    let z = f.features("z.pvqf", &z);
    let cb = f.codebook("cb.pvq1", 2, 3, 4);
    assert_eq!(code(&run(&["compress", &z, "-c", &cb, "-o", &f.s("y")])), 3);
}

#[test]
fn compress_reports_a_third() {
    let f = Fixture::new();
    let cb = f.codebook("cb.pvq1", 8, 6, 3);
    for (t, want, ratio) in [(4500usize, 1500usize, "3.00"), (11, 4, "2.75")] {
        let x = f.features("x.pvqf", &Matrix::gaussian(t, 6, 1.0, &mut Rng::new(t as u64)));
        let o = run(&["compress", &x, "-c", &cb, "-o", &f.s("y.pvqf"), "--emit-plan", &f.s("plan.tsv")]);
        assert_eq!(code(&o), 0, "{o:?}");
        let out = stdout(&o);
        assert_eq!(field(&out, "original_length"), t.to_string());
        assert_eq!(field(&out, "compressed_length"), want.to_string());
        assert_eq!(field(&out, "ratio"), ratio);
        let y = poolingvq::formats::read_features(&f.path("y.pvqf")).unwrap();
        assert_eq!(y.shape(), (want, 6));
        let plan = fs::read_to_string(f.path("plan.tsv")).unwrap();
        assert_eq!(plan.lines().count(), want);
    }
}

#[test]
fn constant_input_is_all_average() {
    let f = Fixture::new();
    let x = f.features("c.pvqf", &Matrix::from_vec(30, 4, [1.0, 2.0, -1.0, 0.5].repeat(30)).unwrap());
    let cb = f.codebook("cb.pvq1", 5, 4, 9);
    let o = run(&["compress", &x, "-c", &cb, "-o", &f.s("y.txt"), "--text"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("AvgP=100.0%"), "{out}");
    assert!(fs::read_to_string(f.path("y.txt")).unwrap().starts_with("10 4\n"));
}

fn train(f: &Fixture, tag: &str, extra: &[&str]) -> Output {
    let ck = f.s(&format!("{tag}.pvqm"));
    let m = f.s(&format!("{tag}.tsv"));
    let cfg = f.s("small.toml");
    let mut args = vec!["train-toy", "-o", &ck, "-m", &m, "--config", &cfg, "-q"];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn training_is_deterministic() {
    let f = Fixture::new();
    assert_eq!(code(&train(&f, "a", &[])), 0);
    assert_eq!(code(&train(&f, "b", &[])), 0);
    assert_eq!(fs::read(f.path("a.tsv")).unwrap(), fs::read(f.path("b.tsv")).unwrap());
    assert_eq!(fs::read(f.path("a.pvqm")).unwrap(), fs::read(f.path("b.pvqm")).unwrap());
    assert_eq!(code(&train(&f, "c", &["--seed", "8"])), 0);
    assert_ne!(fs::read(f.path("a.tsv")).unwrap(), fs::read(f.path("c.tsv")).unwrap());
}

#[test]
fn zero_epochs_writes_a_header_only_log() {
    let f = Fixture::new();
    assert_eq!(code(&train(&f, "z", &["--epochs", "0"])), 0);
    let log = fs::read_to_string(f.path("z.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("epoch\t"));
    assert_eq!(code(&run(&["eval", &f.s("z.pvqm")])), 0);
}

fn eval_value(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn eval_reproduces_the_last_validation_row() {
    let f = Fixture::new();
    assert_eq!(code(&train(&f, "e", &[])), 0);
    let log = fs::read_to_string(f.path("e.tsv")).unwrap();
    let last: Vec<f64> = log.lines().last().unwrap().split('\t').map(|v| v.parse().unwrap()).collect();
    let o = run(&["eval", &f.s("e.pvqm"), "--split", "val"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    // Checkpoints store f32, so losses agree only to rounding.
    assert!((eval_value(&out, "loss") - last[2]).abs() < 1e-4);
    assert!((eval_value(&out, "accuracy") - last[3]).abs() < 1e-9);
    assert!((eval_value(&out, "macro_f1") - last[4]).abs() < 1e-9);
    assert_eq!(eval_value(&out, "samples"), 16.0);

    let test = stdout(&run(&["eval", &f.s("e.pvqm")]));
    assert_eq!(eval_value(&test, "samples"), 8.0);
    assert_ne!(test, out);
}

#[test]
fn truncated_checkpoint_exits_two() {
    let f = Fixture::new();
    assert_eq!(code(&train(&f, "t", &["--epochs", "1"])), 0);
    let bytes = fs::read(f.path("t.pvqm")).unwrap();
    let cut = f.path("cut.pvqm");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let o = run(&["eval", cut.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn init_codebook_is_reproducible() {
    let f = Fixture::new();
    let a = f.features("a.pvqf", &Matrix::gaussian(50, 4, 1.0, &mut Rng::new(5)));
    let b = f.features("b.pvqf", &Matrix::gaussian(30, 4, 1.0, &mut Rng::new(6)));
    for name in ["cb1.pvq1", "cb2.pvq1"] {
        let o = run(&["init-codebook", &a, &b, "-s", "6", "-o", &f.s(name), "--seed", "3"]);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).starts_with("p=6 D=4 frames=80 "));
    }
    assert!(same(&f.path("cb1.pvq1"), &f.path("cb2.pvq1")));
}

fn same(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}
