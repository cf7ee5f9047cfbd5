//! Command-line surface of `echoir`.
//!
//! Every command returns an exit code: 0 on success, 1 on a contract
//! violation (failed check, bad input, missed tolerance), 2 when a bilevel
//! demo diverges.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use echoir_core::asblo::{
    asblo_train, make_toy_problem, AsbloError, BarrierSchedule, BilevelProblem, Sequence, ToyKind, Trace,
};
use echoir_core::gradcheck::{run_suite, standard_suite, CaseReport, GradCase, REGISTERED_OPS};
use echoir_core::layers::ParamInit;
use echoir_core::metrics::psnr;
use echoir_core::upsampler::{CombineMode, EchoUpsampler, EchoUpsamplerConfig};
use echoir_core::{Precision, Tensor};

use crate::config::RunConfig;
use crate::data::{load_dataset, synthetic_pairs};
use crate::degrade::{degrade, DegradationSpec};
use crate::eval::{mean_row, run_eval};
use crate::image_io::{load_image, save_image};
use crate::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::train::{train, FINAL_CHECKPOINT};

#[derive(Parser, Debug)]
#[command(name = "echoir", version, about = "EchoIR image restoration toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct GlobalArgs {
    /// key = value run configuration
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["wide", "standard"])]
    pub precision: Option<String>,
    /// Sequential, bitwise-reproducible evaluation
    #[arg(long, global = true, value_name = "BOOL")]
    pub deterministic: Option<bool>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Finite-difference check of every differentiable op and composed block
    Gradcheck,
    /// Bilevel training on a one-dimensional problem with a known answer
    BilevelDemo(BilevelDemoArgs),
    /// Degrade one image, or write a synthetic dataset with a manifest
    Degrade(DegradeArgs),
    /// Train per the configuration
    Train,
    /// PSNR/SSIM of a checkpoint on the test split
    Eval(EvalArgs),
    /// 2x guided upsampling of a downsampled image with an untrained echo upsampler
    Upsample(UpsampleArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DemoProblem {
    Quadratic,
    ConstraintOnly,
}

#[derive(Args, Debug)]
pub struct BilevelDemoArgs {
    #[arg(long, value_enum, default_value = "quadratic")]
    pub problem: DemoProblem,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Starting point; 0 for quadratic, 1 for constraint_only
    #[arg(long)]
    pub beta0: Option<f64>,
    /// Initial mu = theta = sigma
    #[arg(long, default_value_t = 0.1)]
    pub schedule_initial: f64,
    #[arg(long, default_value_t = 0.5)]
    pub schedule_factor: f64,
    #[arg(long, default_value_t = 25)]
    pub schedule_period: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub schedule_floor: f64,
    /// Hold the schedule at this value instead of decaying it
    #[arg(long)]
    pub schedule_constant: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub inner_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub inner_lr: f64,
    #[arg(long, default_value_t = 200)]
    pub omega_steps: usize,
    #[arg(long, default_value_t = 0.02)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long, requires = "output", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// e.g. gaussian_noise:std=25,seed=0; defaults to the configured degradation
    #[arg(long)]
    pub spec: Option<String>,
    /// Write the configured synthetic splits and manifest.txt under --out
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Defaults to final.ckpt in the output directory
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct UpsampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    #[arg(long, default_value = "add")]
    pub mode: String,
}

/// Config file (or defaults) with the global flags applied on top.
pub fn effective_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(p) = &g.precision {
        cfg.set("precision", p).map_err(anyhow::Error::msg)?;
    }
    if let Some(d) = g.deterministic {
        cfg.deterministic = d;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Gradcheck => Ok(cmd_gradcheck(&standard_suite(), &mut std::io::stdout().lock())),
        Command::BilevelDemo(a) => return ExitCode::from(cmd_bilevel_demo(a, &mut std::io::stdout().lock())),
        Command::Degrade(a) => effective_config(&cli.global).and_then(|c| cmd_degrade(&c, a)),
        Command::Train => effective_config(&cli.global).and_then(|c| cmd_train(&c)),
        Command::Eval(a) => effective_config(&cli.global).and_then(|c| cmd_eval(&c, a)),
        Command::Upsample(a) => cmd_upsample(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn format_report(r: &CaseReport) -> String {
    let (err, status) = match &r.max_error {
        Ok(e) => (format!("{e:.3e}"), if r.passed() { "ok" } else { "FAIL" }),
        Err(e) => (format!("error: {e}"), "FAIL"),
    };
    format!("{:<34} {:>12} {:>9.0e}  {status}", r.name, err, r.threshold)
}

/// Prints one row per case and a coverage line; true iff every case passes.
pub fn cmd_gradcheck(cases: &[GradCase], out: &mut impl Write) -> bool {
    let reports = run_suite(cases);
    let _ = writeln!(out, "{:<34} {:>12} {:>9}  status", "case", "max_rel_err", "threshold");
    for r in &reports {
        let _ = writeln!(out, "{}", format_report(r));
    }
    let covered: std::collections::HashSet<&str> =
        cases.iter().filter_map(|c| c.op_kinds().ok()).flatten().collect();
    let missing: Vec<&str> = REGISTERED_OPS.iter().copied().filter(|k| !covered.contains(k)).collect();
    let failed = reports.iter().filter(|r| !r.passed()).count();
    let _ = writeln!(
        out,
        "{} cases, {} failed; {} of {} registered ops covered{}",
        reports.len(),
        failed,
        REGISTERED_OPS.len() - missing.len(),
        REGISTERED_OPS.len(),
        if missing.is_empty() {
            String::new()
        } else {
            format!(" (missing: {})", missing.join(", "))
        }
    );
    failed == 0
}

pub fn demo_schedule(a: &BilevelDemoArgs) -> BarrierSchedule {
    let mut s = match a.schedule_constant {
        Some(v) => BarrierSchedule::constant(v),
        None => {
            let seq = Sequence::Geometric {
                initial: a.schedule_initial,
                factor: a.schedule_factor,
                period: a.schedule_period,
                floor: a.schedule_floor,
            };
            BarrierSchedule {
                mu: seq,
                theta: seq,
                sigma: seq,
                ..BarrierSchedule::default()
            }
        }
    };
    s.inner_steps = a.inner_steps;
    s.inner_lr = a.inner_lr;
    s.omega_steps = a.omega_steps;
    s
}

/// Trace CSV then `final_beta,...` and `phi_hat,...`; 0 within tolerance,
/// 1 outside it or on bad arguments, 2 on divergence.
pub fn cmd_bilevel_demo(a: &BilevelDemoArgs, out: &mut impl Write) -> u8 {
    let mut problem = make_toy_problem(match a.problem {
        DemoProblem::Quadratic => ToyKind::Quadratic,
        DemoProblem::ConstraintOnly => ToyKind::ConstraintOnly,
    });
    problem.beta0 = a.beta0.unwrap_or(match a.problem {
        DemoProblem::Quadratic => 0.0,
        DemoProblem::ConstraintOnly => 1.0,
    });
    let schedule = demo_schedule(a);
    let trace: Trace = match asblo_train(&problem, &schedule, a.steps, a.lr, |_| {}) {
        Ok(t) => t,
        Err(AsbloError::Diverged { step, what, .. }) => {
            eprintln!("error: {what} diverged at outer step {step}");
            return 2;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let _ = trace.write_csv(&mut *out);
    let beta = trace.final_beta[0];
    let phi_hat = match problem.upper(&trace.final_beta, &trace.final_omega) {
        Ok(ev) => ev.value,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let _ = writeln!(out, "final_beta,{beta}");
    let _ = writeln!(out, "phi_hat,{phi_hat}");
    if !beta.is_finite() || !phi_hat.is_finite() {
        return 2;
    }
    if (beta - problem.beta_star()).abs() <= a.tolerance {
        0
    } else {
        eprintln!(
            "final beta {beta} is more than {} from {}",
            a.tolerance,
            problem.beta_star()
        );
        1
    }
}

fn cmd_degrade(cfg: &RunConfig, a: &DegradeArgs) -> anyhow::Result<bool> {
    let spec: DegradationSpec = match &a.spec {
        Some(s) => s.parse().map_err(anyhow::Error::msg)?,
        None => cfg.degradation.clone(),
    };
    if let (Some(input), Some(output)) = (&a.input, &a.output) {
        let clean = load_image(input)?;
        save_image(output, &degrade(&clean, &spec))?;
        return Ok(true);
    }
    if !a.synthetic {
        bail!("give --input/--output or --synthetic");
    }
    write_synthetic_dataset(cfg, &spec, &cfg.out)?;
    println!("{}", cfg.out.join("manifest.txt").display());
    Ok(true)
}

/// Clean and degraded PPM files for the configured split sizes, plus
/// `manifest.txt`.
pub fn write_synthetic_dataset(cfg: &RunConfig, spec: &DegradationSpec, dir: &Path) -> anyhow::Result<DatasetManifest> {
    let mut m = DatasetManifest {
        degradation: Some(spec.to_string()),
        entries: Vec::new(),
    };
    for sub in ["clean", "degraded"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for (split, n) in [
        (Split::Train, cfg.synthetic_train),
        (Split::Val, cfg.synthetic_val),
        (Split::Test, cfg.synthetic_test),
    ] {
        for p in synthetic_pairs(split, n, cfg.image_size, cfg.seed, spec) {
            let clean = dir.join("clean").join(format!("{}.ppm", p.name));
            let degraded = dir.join("degraded").join(format!("{}.ppm", p.name));
            save_image(&clean, &p.clean)?;
            save_image(&degraded, &p.degraded)?;
            m.entries.push(ManifestEntry { split, clean, degraded });
        }
    }
    std::fs::write(dir.join("manifest.txt"), m.to_text(dir))?;
    Ok(m)
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<bool> {
    let outcome = train(cfg)?;
    println!("{}", outcome.final_checkpoint.display());
    Ok(true)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> anyhow::Result<bool> {
    cfg.validate().map_err(anyhow::Error::msg)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| cfg.out.join(FINAL_CHECKPOINT));
    let data = load_dataset(cfg)?;
    let rows = run_eval(cfg, &ckpt, &data.test).with_context(|| format!("evaluating {}", ckpt.display()))?;
    let m = mean_row(&rows);
    println!(
        "mean PSNR restored {:.3} dB (degraded {:.3} dB), SSIM restored {:.4} (degraded {:.4})",
        m.psnr_restored, m.psnr_degraded, m.ssim_restored, m.ssim_degraded
    );
    Ok(true)
}

fn cmd_upsample(a: &UpsampleArgs) -> anyhow::Result<bool> {
    let image = load_image(&a.input)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        bail!("image extents must be even, got {h}x{w}");
    }
    let mut cfg = EchoUpsamplerConfig::new(6, 3);
    cfg.window_radius = a.radius;
    cfg.combine_mode = a.mode.parse::<CombineMode>().map_err(anyhow::Error::msg)?;
    let up = EchoUpsampler::new(&mut ParamInit::new(0, Precision::Wide), cfg)?;
    let low = image.avg_pool(2)?;
    // the aggregation needs an even channel count; duplicate the colour planes
    let features = Tensor::concat(&[low.clone(), low.clone()], 0)?;
    let restored = up.aggregate(&features, &image)?.narrow(0, 0, 3)?;
    save_image(&a.output, &restored)?;
    let nearest = nearest_upsample(&low)?;
    println!(
        "PSNR vs input: echo {:.3} dB, nearest {:.3} dB",
        psnr(&restored, &image)?,
        psnr(&nearest, &image)?
    );
    Ok(true)
}

fn nearest_upsample(t: &Tensor) -> anyhow::Result<Tensor> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(c * 4 * h * w);
    for ch in 0..c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                out.push(d[(ch * h + y / 2) * w + x / 2]);
            }
        }
    }
    Ok(Tensor::new(&[c, 2 * h, 2 * w], out, false)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_args(problem: DemoProblem) -> BilevelDemoArgs {
        let cli = Cli::parse_from(["echoir", "bilevel-demo", "--problem", match problem {
            DemoProblem::Quadratic => "quadratic",
            DemoProblem::ConstraintOnly => "constraint-only",
        }]);
        match cli.command {
            Command::BilevelDemo(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn global_flags_override_config() {
        let cli = Cli::parse_from(["echoir", "--seed", "7", "train", "--precision", "standard", "--out", "x"]);
        let cfg = effective_config(&cli.global).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.precision, Precision::Standard);
        assert_eq!(cfg.out, PathBuf::from("x"));
    }

    #[test]
    fn quadratic_demo_prints_full_trace() {
        let mut out = Vec::new();
        let code = cmd_bilevel_demo(&demo_args(DemoProblem::Quadratic), &mut out);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(code, 0, "{text}");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], Trace::CSV_HEADER);
        assert_eq!(lines.len(), 1 + 300 + 2);
        assert!(lines[301].starts_with("final_beta,"));
    }

    #[test]
    fn missed_tolerance_exits_one() {
        let mut a = demo_args(DemoProblem::Quadratic);
        a.steps = 3;
        assert_eq!(cmd_bilevel_demo(&a, &mut Vec::new()), 1);
    }

    #[test]
    fn nearest_upsample_repeats() {
        let t = Tensor::new(&[1, 1, 2], vec![1.0, 2.0], false).unwrap();
        assert_eq!(nearest_upsample(&t).unwrap().to_vec(), vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
