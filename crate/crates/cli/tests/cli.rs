use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ddnt_core::io::{read_image, write_image};
use ddnt_core::model::{build_model, save_checkpoint, ModelConfig};
use ddnt_core::tensor::Tensor;
use ddnt_core::{Model32, Tensor32};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ddnt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddnt"))
        .args(args)
        .current_dir(dir)
        .env_remove("DDNT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn random_image(h: usize, w: usize, seed: u64) -> Tensor32 {
    Tensor::rand_uniform([h, w, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ddnt(dir.path(), &["--help"])), 0);
    assert_eq!(code(&ddnt(dir.path(), &["--version"])), 0);
    assert_eq!(code(&ddnt(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&ddnt(dir.path(), &[])), 1);
    assert_eq!(
        code(&ddnt(dir.path(), &["paramcount", "--preset", "xl"])),
        1
    );
    assert_eq!(code(&ddnt(dir.path(), &["gradcheck", "--tol", "-1"])), 1);
    assert_eq!(
        code(&ddnt(
            dir.path(),
            &["eval", "--data", ".", "--metrics", "lpips"]
        )),
        1
    );
    let bad_lr = [
        "train", "--steps", "1", "--out", "m.ckpt", "--lr", "1e-7", "--lr-min", "1e-6",
    ];
    assert_eq!(code(&ddnt(dir.path(), &bad_lr)), 1);
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn thread_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let run = |value: &str| {
        Command::new(env!("CARGO_BIN_EXE_ddnt"))
            .args(["paramcount", "--preset", "tiny"])
            .env("DDNT_THREADS", value)
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("two")), 1);
    assert_eq!(code(&run("-1")), 1);
    assert_eq!(code(&run("2")), 0);
    assert_eq!(code(&run("0")), 0);
}

#[test]
fn paramcount_agrees_with_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddnt(dir.path(), &["paramcount", "--preset", "tiny"]);
    assert_eq!(code(&out), 0);
    let total: usize = stdout(&out)
        .lines()
        .find_map(|l| l.strip_prefix("total"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    let model: Model32 = build_model(&ModelConfig::tiny(), 0).unwrap();
    assert_eq!(total, model.count_parameters().total);

    fs::write(
        dir.path().join("wide.cfg"),
        "channels = 8, 16, 32\nheads = 2, 2, 4\n",
    )
    .unwrap();
    let out = ddnt(dir.path(), &["paramcount", "--config", "wide.cfg"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(dir.path().join("bad.cfg"), "kernel_size = 4\n").unwrap();
    assert_eq!(
        code(&ddnt(dir.path(), &["paramcount", "--config", "bad.cfg"])),
        1
    );
}

#[test]
fn zero_output_conv_infer_reproduces_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let mut model: Model32 = build_model(&ModelConfig::tiny(), 5).unwrap();
    model.params.zero_prefix("out.");
    save_checkpoint(&model, dir.path().join("zero.ckpt")).unwrap();
    write_image(&random_image(21, 30, 6), dir.path().join("in.ppm")).unwrap();
    let out = ddnt(
        dir.path(),
        &[
            "infer",
            "--ckpt",
            "zero.ckpt",
            "--input",
            "in.ppm",
            "--output",
            "out.ppm",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let input = fs::read(dir.path().join("in.ppm")).unwrap();
    assert_eq!(fs::read(dir.path().join("out.ppm")).unwrap(), input);
}

#[test]
fn eval_of_identical_dirs_hits_the_ideal_scores() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["blur", "sharp"] {
        fs::create_dir_all(dir.path().join(sub)).unwrap();
        for i in 0..3 {
            write_image(
                &random_image(16, 18, i),
                dir.path().join(sub).join(format!("{i}.ppm")),
            )
            .unwrap();
        }
    }
    let out = ddnt(dir.path(), &["eval", "--data", ".", "--csv", "scores.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("image,psnr,ssim,hue"));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(
            &fields[1..],
            ["99.000000", "1.000000", "0.000000"],
            "{line}"
        );
    }
    assert!(stdout(&out).lines().any(|l| l.starts_with("mean")));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_image(&random_image(8, 8, 1), p.join("in.ppm")).unwrap();
    let infer = |ckpt: &str| {
        ddnt(
            p,
            &[
                "infer", "--ckpt", ckpt, "--input", "in.ppm", "--output", "o.ppm",
            ],
        )
    };
    assert_eq!(code(&infer("missing.ckpt")), 2);
    fs::write(p.join("junk.ckpt"), b"JUNKJUNK").unwrap();
    let out = infer("junk.ckpt");
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    fs::create_dir_all(p.join("d/blur")).unwrap();
    fs::create_dir_all(p.join("d/sharp")).unwrap();
    write_image(&random_image(8, 8, 2), p.join("d/blur/a.ppm")).unwrap();
    let out = ddnt(p, &["eval", "--data", "d"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("a.ppm"));
}

#[test]
fn synth_writes_matching_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddnt(
        dir.path(),
        &[
            "synth", "--n", "3", "--size", "24", "--motion", "7,30", "--out", "m",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..3 {
        let name = format!("{i:04}.ppm");
        let b: Tensor32 = read_image(dir.path().join("m/blur").join(&name)).unwrap();
        let s: Tensor32 = read_image(dir.path().join("m/sharp").join(&name)).unwrap();
        assert_eq!(b.shape(), &[24, 24, 3]);
        assert_eq!(s.shape(), b.shape());
        assert_ne!(b, s);
    }
    let again = ddnt(
        dir.path(),
        &[
            "synth", "--n", "3", "--size", "24", "--motion", "7,30", "--out", "m2",
        ],
    );
    assert_eq!(code(&again), 0);
    assert_eq!(
        fs::read(dir.path().join("m/blur/0002.ppm")).unwrap(),
        fs::read(dir.path().join("m2/blur/0002.ppm")).unwrap()
    );
    assert_eq!(
        code(&ddnt(dir.path(), &["synth", "--motion", "7", "--out", "x"])),
        1
    );
}
