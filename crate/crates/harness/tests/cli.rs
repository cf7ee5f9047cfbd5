use std::path::Path;
use std::process::{Command, Output};

use echoir_core::gradcheck::{random_tensor, standard_suite, weighted_sum, GradCase, OP_TOLERANCE};
use echoir_core::layers::Parameterized;
use echoir_core::net::EchoIrNet;
use echoir_core::upsampler::UpsamplerKind;
use echoir_core::{Precision, Tensor};
use echoir_harness::checkpoint;
use echoir_harness::cli::cmd_gradcheck;
use echoir_harness::config::RunConfig;
use echoir_harness::data::manifest_dataset;
use echoir_harness::eval::run_eval;
use echoir_harness::image_io::{load_image, save_image};
use echoir_harness::manifest::Split;
use echoir_harness::train::train;

fn echoir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echoir")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// `3x` forward with an adjoint that reports `2·g`.
fn corrupted_triple(x: &Tensor) -> Tensor {
    let data = x.to_vec().iter().map(|v| 3.0 * v).collect();
    Tensor::from_op(
        "corrupted_triple",
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(|_, g, _| vec![Some(g.iter().map(|v| 2.0 * v).collect())]),
    )
    .unwrap()
}

#[test]
fn gradcheck_flags_a_corrupted_adjoint() {
    let x = random_tensor(&[2, 3], 1, -1.0, 1.0, true);
    let bad = GradCase::new("corrupted_triple", OP_TOLERANCE, vec![x], |xs| {
        weighted_sum(&corrupted_triple(&xs[0]), 7)
    });
    let mut cases = vec![bad];
    cases.extend(standard_suite().into_iter().take(2));
    let mut out = Vec::new();
    assert!(!cmd_gradcheck(&cases, &mut out));
    let text = String::from_utf8(out).unwrap();
    let row = text.lines().find(|l| l.starts_with("corrupted_triple")).unwrap();
    assert!(row.ends_with("FAIL"), "{text}");
    assert!(text.contains("3 cases, 1 failed"), "{text}");
}

#[test]
fn gradcheck_command_passes_and_covers_every_op() {
    let o = echoir(&["gradcheck"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    let summary = text.lines().last().unwrap();
    assert!(summary.contains(", 0 failed;"), "{summary}");
    let n = echoir_core::gradcheck::REGISTERED_OPS.len();
    assert!(summary.contains(&format!("{n} of {n} registered ops covered")), "{summary}");
}

#[test]
fn bilevel_demo_exit_codes() {
    let o = echoir(&["bilevel-demo", "--problem", "quadratic"]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert_eq!(text.lines().count(), 1 + 300 + 2);
    let beta: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("final_beta,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((beta - 1.5).abs() <= 0.02);

    let o = echoir(&["bilevel-demo", "--problem", "constraint-only"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let o = echoir(&["bilevel-demo", "--steps", "5"]);
    assert_eq!(o.status.code(), Some(1));

    let o = echoir(&["bilevel-demo", "--lr", "1e6", "--steps", "60"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn degrade_single_image_and_synthetic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean.ppm");
    let noisy = dir.path().join("noisy.ppm");
    save_image(&clean, &random_tensor(&[3, 8, 8], 2, 0.2, 0.8, false)).unwrap();
    let args = |spec: &str| {
        echoir(&[
            "degrade",
            "--input",
            clean.to_str().unwrap(),
            "--output",
            noisy.to_str().unwrap(),
            "--spec",
            spec,
        ])
    };
    assert!(args("box_blur:kernel=1,seed=0").status.success());
    assert_eq!(load_image(&noisy).unwrap().to_vec(), load_image(&clean).unwrap().to_vec());
    assert!(args("gaussian_noise:std=25,seed=3").status.success());
    assert_ne!(load_image(&noisy).unwrap().to_vec(), load_image(&clean).unwrap().to_vec());
    assert_eq!(args("box_blur:kernel=2,seed=0").status.code(), Some(1));

    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(&cfg, "synthetic_train = 2\nsynthetic_val = 1\nsynthetic_test = 1\nimage_size = 16\npatch_size = 16\n")
        .unwrap();
    let o = echoir(&["--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(), "degrade", "--synthetic"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = manifest_dataset(&data.join("manifest.txt")).unwrap();
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (2, 1, 1));
    assert_eq!(ds.test[0].clean.shape(), &[3, 16, 16]);
}

#[test]
fn config_and_input_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "learning_rate = 0.1\n").unwrap();
    let o = echoir(&["--config", bad.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key 'learning_rate'"));

    let missing = dir.path().join("missing.txt");
    std::fs::write(&missing, "manifest = /nonexistent/manifest.txt\n").unwrap();
    assert_eq!(echoir(&["--config", missing.to_str().unwrap(), "train"]).status.code(), Some(1));

    let out = dir.path().join("o");
    let o = echoir(&["--out", out.to_str().unwrap(), "eval", "--checkpoint", "/nonexistent.ckpt"]);
    assert_eq!(o.status.code(), Some(1));

    let o = echoir(&["upsample", "--input", "/nonexistent.ppm", "--output", "x.ppm"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_echo_config_loss_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(
        &cfg,
        "steps = 4\ncheckpoint_every = 2\nimage_size = 16\npatch_size = 8\nsynthetic_train = 2\nbatch_size = 2\n",
    )
    .unwrap();
    let o = echoir(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = RunConfig::load(&out.join("config.txt")).unwrap();
    assert_eq!((echoed.steps, echoed.seed, echoed.batch_size), (4, 3, 2));
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,train_l1"));
    assert_eq!(loss.lines().count(), 5);
    for f in ["ckpt_000002.bin", "ckpt_000004.bin", "final.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read(out.join("ckpt_000004.bin")).unwrap(),
        std::fs::read(out.join("final.ckpt")).unwrap()
    );
}

#[test]
fn asblo_training_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.out = dir.path().to_path_buf();
    cfg.optimizer = echoir_harness::config::OptimizerKind::Asblo;
    (cfg.steps, cfg.inner_steps, cfg.omega_steps) = (2, 2, 2);
    (cfg.image_size, cfg.patch_size, cfg.synthetic_train, cfg.synthetic_val) = (8, 8, 1, 1);
    train(&cfg).unwrap();
    let trace = std::fs::read_to_string(dir.path().join("asblo_trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some(echoir_core::asblo::Trace::CSV_HEADER));
    assert_eq!(trace.lines().count(), 3);
    assert!(dir.path().join("final.ckpt").exists());
}

fn write_identity_manifest(dir: &Path) -> std::path::PathBuf {
    let img = random_tensor(&[3, 16, 16], 4, 0.0, 1.0, false);
    save_image(dir.join("a.ppm"), &img).unwrap();
    let m = dir.join("manifest.txt");
    std::fs::write(&m, "test a.ppm a.ppm\n").unwrap();
    m
}

#[test]
fn eval_on_identical_pairs_reports_sentinels() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.manifest = Some(write_identity_manifest(dir.path()));
    cfg.out = dir.path().join("eval");
    let net = EchoIrNet::new(cfg.network(), 0, Precision::Wide).unwrap();
    net.zero_params();
    let ckpt = dir.path().join("zero.ckpt");
    checkpoint::save(&ckpt, &net).unwrap();
    let ds = manifest_dataset(cfg.manifest.as_ref().unwrap()).unwrap();
    let rows = run_eval(&cfg, &ckpt, ds.split(Split::Test)).unwrap();
    assert_eq!(rows[0].psnr_degraded, f64::INFINITY);
    assert_eq!(rows[0].psnr_restored, f64::INFINITY);
    assert_eq!(rows[0].ssim_restored, 1.0);
    let csv = std::fs::read_to_string(cfg.out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("a,inf,1,inf,1"));
    assert!(csv.lines().nth(2).unwrap().starts_with("mean,inf,1,"));
}

#[test]
fn upsample_command_writes_image() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.ppm");
    let output = dir.path().join("out.ppm");
    save_image(&input, &random_tensor(&[3, 8, 12], 5, 0.0, 1.0, false)).unwrap();
    let o = echoir(&["upsample", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("PSNR vs input"));
    assert_eq!(load_image(&output).unwrap().shape(), &[3, 8, 12]);
}

#[test]
fn ablation_variants_train_on_the_toy_preset() {
    let mut lines = Vec::new();
    for kind in [UpsamplerKind::Eu, UpsamplerKind::Ps, UpsamplerKind::Tc] {
        for (ca, gdfn) in [(true, true), (false, true), (true, false)] {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = RunConfig::default();
            cfg.out = dir.path().to_path_buf();
            (cfg.upsampler_kind, cfg.channel_attention, cfg.gdfn) = (kind, ca, gdfn);
            (cfg.steps, cfg.image_size, cfg.patch_size, cfg.synthetic_train) = (3, 16, 16, 2);
            let outcome = train(&cfg).unwrap();
            assert_eq!(outcome.losses.len(), 3);
            assert!(outcome.net.num_params() > 0);
            lines.push(format!("{kind:?} ca={ca} gdfn={gdfn}: final train L1 {:.5}", outcome.losses[2]));
        }
    }
    // relative ordering is reported, not asserted
    println!("{}", lines.join("\n"));
}
