//! End-to-end tests of the `compass` binary: exit codes, file outputs,
//! config-file merging, the model registry, and stream round-trips.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array3;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_compass"))
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Deterministic smooth-ish test image in [0, 1].
fn test_image(h: usize, w: usize, phase: f64) -> Array3<f64> {
    Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
        let v = ((r as f64 * 0.31 + phase) .sin() * (c as f64 * 0.17 + 1.3 * ch as f64).cos())
            .mul_add(0.5, 0.5);
        v.clamp(0.0, 1.0)
    })
}

fn write_dataset(dir: &Path, count: usize, h: usize, w: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img = test_image(h, w, i as f64 * 0.7);
        compass_core::image_io::save_image(&dir.join(format!("img{i}.png")), &img).unwrap();
    }
}

/// Train a tiny fresh model for `steps` steps and return the checkpoint path.
fn make_checkpoint(dir: &Path, steps: u64, seed: u64) -> PathBuf {
    let data = dir.join("data");
    write_dataset(&data, 2, 24, 20);
    let ckpt = dir.join(format!("model_s{seed}.ckpt"));
    let out = run(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--model-size",
            "tiny",
            "--steps",
            &steps.to_string(),
            "--batch-size",
            "1",
            "--crop-size",
            "16",
            "--seed",
            &seed.to_string(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    ckpt
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = run(&[], &[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"][..], &["encode", "--help"][..]] {
        let out = run(args, &[]);
        assert_eq!(code(&out), 0, "{args:?}");
        assert!(!stdout(&out).is_empty());
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["encode", "--no-such-flag", "1"], &[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn zero_step_train_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = make_checkpoint(dir.path(), 0, 5);
    let ck = compass_core::checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.seed, 5);
    ck.into_model().unwrap();
}

#[test]
fn encode_then_decode_reproduces_the_encoder_reconstructions_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = make_checkpoint(dir.path(), 0, 1);
    let input = dir.path().join("input.png");
    compass_core::image_io::save_image(&input, &test_image(37, 45, 0.2)).unwrap();
    let stream = dir.path().join("s.cmps");
    let enc_dir = dir.path().join("enc");
    let out = run(
        &[
            "encode",
            "--input",
            input.to_str().unwrap(),
            "--out",
            stream.to_str().unwrap(),
            "--model",
            ckpt.to_str().unwrap(),
            "--scales",
            "1.6,2.0",
            "--dump-recon",
            enc_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stream.is_file());

    let dec_dir = dir.path().join("dec");
    let out = run(
        &[
            "decode",
            "--input",
            stream.to_str().unwrap(),
            "--out-dir",
            dec_dir.to_str().unwrap(),
            "--model",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for k in 0..3 {
        let a = std::fs::read(enc_dir.join(format!("layer_{k}.png"))).unwrap();
        let b = std::fs::read(dec_dir.join(format!("layer_{k}.png"))).unwrap();
        assert_eq!(a, b, "layer {k} decode differs from encoder reconstruction");
    }

    // Decoding only the base layer writes exactly one image.
    let base_dir = dir.path().join("base");
    let out = run(
        &[
            "decode",
            "--input",
            stream.to_str().unwrap(),
            "--out-dir",
            base_dir.to_str().unwrap(),
            "--model",
            ckpt.to_str().unwrap(),
            "--layer",
            "0",
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let names: Vec<_> = std::fs::read_dir(&base_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, ["layer_0.png"]);
    let a = std::fs::read(enc_dir.join("layer_0.png")).unwrap();
    let b = std::fs::read(base_dir.join("layer_0.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = make_checkpoint(dir.path(), 0, 2);
    let out = run(
        &[
            "encode",
            "--input",
            dir.path().join("nope.png").to_str().unwrap(),
            "--out",
            dir.path().join("s.cmps").to_str().unwrap(),
            "--model",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn corrupt_stream_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = make_checkpoint(dir.path(), 0, 3);
    let input = dir.path().join("input.png");
    compass_core::image_io::save_image(&input, &test_image(20, 22, 0.0)).unwrap();
    let stream = dir.path().join("s.cmps");
    let out = run(
        &[
            "encode",
            "--input",
            input.to_str().unwrap(),
            "--out",
            stream.to_str().unwrap(),
            "--model",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut bytes = std::fs::read(&stream).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&stream, &bytes).unwrap();
    let out = run(
        &[
            "decode",
            "--input",
            stream.to_str().unwrap(),
            "--out-dir",
            dir.path().join("dec").to_str().unwrap(),
            "--model",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn invalid_scales_and_quality_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = make_checkpoint(dir.path(), 0, 4);
    let input = dir.path().join("input.png");
    compass_core::image_io::save_image(&input, &test_image(20, 22, 0.0)).unwrap();
    let stream = dir.path().join("s.cmps");
    for extra in [
        &["--scales", "2.0,1.5"][..],
        &["--scales", "0.5"][..],
        &["--scales", ""][..],
        &["--quality", "300"][..],
    ] {
        let mut args = vec![
            "encode",
            "--input",
            input.to_str().unwrap(),
            "--out",
            stream.to_str().unwrap(),
            "--model",
            ckpt.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let out = run(&args, &[]);
        assert_eq!(code(&out), 1, "{extra:?}: {}", stderr(&out));
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, 2, 24, 20);
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "# defaults for smoke training\nseed = 5\nmodel_size = tiny\nsteps = 0\nbatch_size = 1\ncrop_size = 16\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = run(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--seed",
            "9",
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ck = compass_core::checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck.seed, 9, "command-line flag must beat the config file");

    // Without the overriding flag the file's value applies.
    let ckpt2 = dir.path().join("m2.ckpt");
    let out = run(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt2.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(compass_core::checkpoint::load(&ckpt2).unwrap().seed, 5);
}

#[test]
fn malformed_config_lines_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for body in ["not a key value line\n", "config = other.cfg\n"] {
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, body).unwrap();
        let out = run(
            &[
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--data",
                "x",
                "--out",
                "y",
            ],
            &[],
        );
        assert_eq!(code(&out), 1, "{body:?}: {}", stderr(&out));
    }
}

#[test]
fn model_registry_resolves_checkpoints_by_quality_index() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = make_checkpoint(dir.path(), 0, 6);
    let registry = dir.path().join("registry");
    std::fs::create_dir_all(&registry).unwrap();
    std::fs::copy(&ckpt, registry.join("q2.ckpt")).unwrap();
    let input = dir.path().join("input.png");
    compass_core::image_io::save_image(&input, &test_image(21, 19, 0.4)).unwrap();
    let stream = dir.path().join("s.cmps");
    let env = [("COMPASS_MODEL_DIR", registry.to_str().unwrap())];
    let out = run(
        &[
            "encode",
            "--input",
            input.to_str().unwrap(),
            "--out",
            stream.to_str().unwrap(),
            "--quality",
            "2",
        ],
        &env,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // Decode must pick the same registry slot from the stream's quality byte.
    let out = run(
        &[
            "decode",
            "--input",
            stream.to_str().unwrap(),
            "--out-dir",
            dir.path().join("dec").to_str().unwrap(),
        ],
        &env,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("dec/layer_0.png").is_file());

    // Without the environment variable the lookup is a usage error.
    let out = run(
        &[
            "decode",
            "--input",
            stream.to_str().unwrap(),
            "--out-dir",
            dir.path().join("dec2").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn eval_writes_per_layer_records_for_every_image() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = make_checkpoint(dir.path(), 0, 7);
    let data = dir.path().join("evaldata");
    write_dataset(&data, 3, 26, 30);
    let csv_path = dir.path().join("eval.csv");
    let curve_path = dir.path().join("curve.csv");
    let out = run(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--out",
            csv_path.to_str().unwrap(),
            "--scales",
            "1.5",
            "--models",
            ckpt.to_str().unwrap(),
            "--curve-out",
            curve_path.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "image,lambda,layer,bits,acc_bits,bpp,mse,psnr"
    );
    // 3 images x 1 model x 2 layers
    assert_eq!(lines.count(), 6);
    let curve = std::fs::read_to_string(&curve_path).unwrap();
    assert!(curve.starts_with("lambda,bpp,psnr\n"));
    assert_eq!(curve.lines().count(), 2);
    assert!(stdout(&out).contains("lambda 0:"));
}

#[test]
fn eval_requires_exactly_one_model_source() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    write_dataset(&data, 1, 20, 20);
    let out_csv = dir.path().join("e.csv");
    let base = [
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_csv.to_str().unwrap(),
    ];
    let out = run(&base, &[]);
    assert_eq!(code(&out), 1);
    let mut both = base.to_vec();
    both.extend_from_slice(&["--models", "a.ckpt", "--lambdas", "0"]);
    let out = run(&both, &[]);
    assert_eq!(code(&out), 1);
}

fn write_records_csv(path: &Path, rows: &[(&str, usize, usize, f64, f64)]) {
    let mut text = String::from("image,lambda,layer,bits,acc_bits,bpp,mse,psnr\n");
    for (image, lambda, layer, bpp, psnr) in rows {
        text += &format!("{image},{lambda},{layer},0,0,{bpp},0.0,{psnr}\n");
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn report_measures_the_rate_difference_between_two_record_files() {
    let dir = tempfile::tempdir().unwrap();
    let anchor = dir.path().join("anchor.csv");
    let test = dir.path().join("test.csv");
    // The test arm spends exactly twice the bits at every quality, so the
    // average rate difference is +100%. Extra low-layer rows must be
    // ignored in favor of each image's final layer.
    let mut a_rows = Vec::new();
    let mut t_rows = Vec::new();
    for (i, (bpp, psnr)) in [(0.5, 30.0), (1.0, 32.0), (2.0, 34.0), (4.0, 36.0)]
        .into_iter()
        .enumerate()
    {
        a_rows.push(("img", i, 0, 99.0, 1.0)); // distractor row, lower layer
        a_rows.push(("img", i, 1, bpp, psnr));
        t_rows.push(("img", i, 1, 2.0 * bpp, psnr));
    }
    write_records_csv(&anchor, &a_rows);
    write_records_csv(&test, &t_rows);
    let summary = dir.path().join("summary.csv");
    let out = run(
        &[
            "report",
            "--anchor",
            anchor.to_str().unwrap(),
            "--test",
            test.to_str().unwrap(),
            "--out",
            summary.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let value: f64 = text
        .lines()
        .find(|l| l.starts_with("bd-rate"))
        .and_then(|l| l.split(':').nth(1))
        .and_then(|s| s.trim().split('%').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((value - 100.0).abs() < 0.01, "expected +100%, got {value}");
    let summary_text = std::fs::read_to_string(&summary).unwrap();
    assert!(summary_text.starts_with("metric,value\n"));
    assert!(summary_text.contains("bd_rate_percent,"));
}

#[test]
fn report_on_a_missing_file_is_a_data_error() {
    let out = run(&["report", "--anchor", "/no/a.csv", "--test", "/no/b.csv"], &[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn enhancement_stage_without_a_base_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, 1, 20, 20);
    let out = run(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("m.ckpt").to_str().unwrap(),
            "--stage",
            "joint",
            "--model-size",
            "tiny",
            "--steps",
            "0",
        ],
        &[],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("--base"));
}

#[test]
fn resume_conflicts_with_base_and_honors_new_step_target() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = make_checkpoint(dir.path(), 1, 8);
    let data = dir.path().join("data");
    let out = run(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("m.ckpt").to_str().unwrap(),
            "--resume",
            ckpt.to_str().unwrap(),
            "--base",
            ckpt.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    let resumed = dir.path().join("resumed.ckpt");
    let out = run(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            resumed.to_str().unwrap(),
            "--resume",
            ckpt.to_str().unwrap(),
            "--steps",
            "2",
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(compass_core::checkpoint::load(&resumed).unwrap().step, 2);
}

#[test]
fn ablation_flags_reject_unknown_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, 1, 20, 20);
    let out = run(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("m.ckpt").to_str().unwrap(),
            "--model-size",
            "tiny",
            "--steps",
            "0",
            "--predictor",
            "nearest",
        ],
        &[],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}
