use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use blockadapt::data::write_idx;
use blockadapt::diagnostics::{parse_trace, TRACE_HEADER};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockadapt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const TOY: &str = "\
dataset = toy
variant = adam
partition = input_neuron(2)
lr = constant(0.05)
batch = fixed(10)
steps = 60
seed = 1
";

#[test]
fn run_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.cfg", TOY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let ta = fs::read(a.join("trace.csv")).unwrap();
    assert_eq!(ta, fs::read(b.join("trace.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("summary.txt")).unwrap(),
        fs::read(b.join("summary.txt")).unwrap()
    );
    let text = String::from_utf8(ta).unwrap();
    assert!(text.starts_with(TRACE_HEADER));
    assert_eq!(parse_trace(&text).unwrap().len(), 7);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.cfg", TOY);
    let out = dir.path().join("s");
    let o = bin(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "42",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("seed = 42"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.cfg", "steps = 10\nvariant = nadam\n");
    let o = bin(&["run", "--config", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    assert_eq!(bin(&["run"]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));

    let missing = write_config(
        dir.path(),
        "mnist.cfg",
        "dataset = mnist\nmnist_images = nope-img\nmnist_labels = nope-lab\nsteps = 1\n",
    );
    assert_eq!(bin(&["run", "--config", &missing]).status.code(), Some(2));

    let diverge = write_config(
        dir.path(),
        "sgd.cfg",
        "variant = sgd\nlr = constant(1e300)\nsteps = 20\npartition = chunk(2)\n",
    );
    let o = bin(&[
        "run",
        "--config",
        &diverge,
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn gradcheck_subcommand() {
    let o = bin(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.matches("PASS").count(), 2, "{text}");
    let o = bin(&["gradcheck", "--widths", "3,5,5,4", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn compare_writes_joined_trace() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(
        dir.path(),
        "a.cfg",
        &TOY.replace("input_neuron(2)", "chunk(1)"),
    );
    let b = write_config(dir.path(), "b.cfg", &TOY.replace("input_neuron(2)", "diag"));
    let out = dir.path().join("cmp");
    let o = bin(&[
        "compare",
        "--config",
        &a,
        "--config",
        &b,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header[0], "t");
    assert!(header.contains(&"term_b_a") && header.contains(&"term_b_b"));
    let diff_col = header.iter().position(|&h| h == "param_max_diff").unwrap();
    for line in csv.lines().skip(1) {
        let diff: f64 = line.split(',').nth(diff_col).unwrap().parse().unwrap();
        assert!(diff <= 1e-9);
    }

    let c = write_config(dir.path(), "c.cfg", &TOY.replace("seed = 1", "seed = 2"));
    let o = bin(&[
        "compare",
        "--config",
        &a,
        "--config",
        &c,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn mnist_config_runs_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let n = 40;
    let pixels: Vec<u8> = (0..n * 784).map(|i| (i * 37 % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    write_idx(
        &dir.path().join("img"),
        &dir.path().join("lab"),
        28,
        28,
        &pixels,
        &labels,
    )
    .unwrap();
    let cfg = write_config(
        dir.path(),
        "m.cfg",
        "dataset = mnist\nmnist_images = img\nmnist_labels = lab\npartition = input_neuron(10)\n\
         batch = fixed(8)\nepochs = 1\nlr = constant(0.001)\n",
    );
    let out = dir.path().join("m");
    let o = bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let recs = parse_trace(&fs::read_to_string(out.join("trace.csv")).unwrap()).unwrap();
    assert_eq!(recs.last().unwrap().t, 5);
}
