use std::path::Path;
use std::process::{Command, Output};

use ksformer_core::haze::{hazy_path, read_ppm, write_ppm};
use ksformer_core::{KsformerModel, NetworkConfig, Tensor};

fn ksformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksformer")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("toy.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

const TINY: &str = "[network]\nside = 32\nbase_channels = 4\nmkram_blocks = 1\n\n[train]\ncrop = 32\nbatch_size = 2\niterations = 3\neval_every = 2\ncheckpoint_every = 2\n";

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let o = ksformer(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_subcommand_or_flag_exits_1() {
    assert_eq!(ksformer(&["dehaze"]).status.code(), Some(1));
    assert_eq!(ksformer(&["flops", "--config", "x.toml", "--side", "64", "--bogus"]).status.code(), Some(1));
    assert_eq!(ksformer(&["flops", "--side", "64"]).status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let o = ksformer(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["synth-data", "train", "eval", "infer", "ablate", "flops", "grad-check"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unreadable_file_exits_2_with_path() {
    let o = ksformer(&["flops", "--config", "/nonexistent/toy.toml", "--side", "64"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/toy.toml"));
}

#[test]
fn flops_reports_totals_and_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = ksformer(&["flops", "--config", &cfg, "--side", "128"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("side 128"));
    let ratio: f64 = text.rsplit("routed/dense ").next().unwrap().trim().parse().unwrap();
    assert!(ratio > 0.0 && ratio < 1.0, "{ratio}");
    assert_eq!(ksformer(&["flops", "--config", &cfg, "--side", "100"]).status.code(), Some(2));
}

#[test]
fn synth_data_is_seeded_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let o = ksformer(&["synth-data", "--count", "3", "--side", "16", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let read = |d: &Path| std::fs::read(hazy_path(d, 2)).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn infer_with_identity_checkpoint_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("id.ksf");
    KsformerModel::new(NetworkConfig::default(), 1).unwrap().save(&ckpt).unwrap();
    let input = dir.path().join("in.ppm");
    let img = Tensor::from_fn([64, 64, 3], |i| ((i * 37) % 256) as f32 / 255.0);
    write_ppm(&input, &img).unwrap();
    let before = std::fs::read(&input).unwrap();
    let out = dir.path().join("out.ppm");
    let o = ksformer(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_ppm(&out).unwrap(), read_ppm(&input).unwrap());
    assert_eq!(std::fs::read(&input).unwrap(), before);

    let small = dir.path().join("small.ppm");
    write_ppm(&small, &Tensor::zeros([16, 16, 3])).unwrap();
    let o = ksformer(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--in", small.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = write_config(dir.path(), TINY);
    let o = ksformer(&["synth-data", "--count", "10", "--side", "32", "--seed", "2", "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let runs: Vec<_> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            let o = ksformer(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
            assert!(stdout(&o).contains("held-out PSNR"));
            out
        })
        .collect();
    for file in ["train.csv", "model.ksf", "step_000002.ksf"] {
        let a = std::fs::read(runs[0].join(file)).unwrap();
        assert_eq!(a, std::fs::read(runs[1].join(file)).unwrap(), "{file} differs between runs");
    }
    let log = std::fs::read_to_string(runs[0].join("train.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss,psnr_val\n"));
    assert_eq!(log.lines().count(), 4);

    let ckpt = runs[0].join("model.ksf");
    let o = ksformer(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("pairs 10"));
}

#[test]
fn ablate_prints_all_arms() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = write_config(dir.path(), TINY);
    ksformer(&["synth-data", "--count", "4", "--side", "32", "--out", data.to_str().unwrap()]);
    let o = ksformer(&["ablate", "--config", &cfg, "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for label in ["Hazy input", "Base", "Base+MKRA", "Base+LFPM", "Full (MKRAM+LFPM)", "Full >= Base"] {
        assert!(text.contains(label), "{label} missing:\n{text}");
    }
}

#[test]
fn grad_check_passes_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = ksformer(&["grad-check", "--config", &cfg, "--coords", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}\n{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("worst"));
}
