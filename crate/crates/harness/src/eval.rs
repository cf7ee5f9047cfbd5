//! Per-image PSNR/SSIM of restored and degraded inputs against the clean
//! reference.
//!
//! With `deterministic = false` and `ECHOIR_THREADS > 1` images are spread
//! over threads, each with its own copy of the network. Parallel runs are
//! not guaranteed to be bitwise identical to sequential ones.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use echoir_core::metrics::{psnr, ssim};
use echoir_core::net::EchoIrNet;
use echoir_core::Tensor;

use crate::checkpoint::{self, Entry};
use crate::config::RunConfig;
use crate::data::{check_extents, NamedPair};
use crate::train::build_network;

pub const METRICS_CSV_HEADER: &str = "image,psnr_restored,ssim_restored,psnr_degraded,ssim_degraded";
pub const THREADS_ENV: &str = "ECHOIR_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_restored: f64,
    pub ssim_restored: f64,
    pub psnr_degraded: f64,
    pub ssim_degraded: f64,
}

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Network output clamped to `[0, 1]`.
pub fn restore_image(net: &EchoIrNet, degraded: &Tensor) -> anyhow::Result<Tensor> {
    let out = net.forward(&degraded.detach())?;
    let clamped: Vec<f64> = out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Tensor::new(out.shape(), clamped, false)?)
}

fn score(name: &str, restored: &Tensor, degraded: &Tensor, clean: &Tensor) -> anyhow::Result<ImageMetrics> {
    Ok(ImageMetrics {
        name: name.to_string(),
        psnr_restored: psnr(restored, clean)?,
        ssim_restored: ssim(restored, clean)?,
        psnr_degraded: psnr(degraded, clean)?,
        ssim_degraded: ssim(degraded, clean)?,
    })
}

pub fn evaluate(net: &EchoIrNet, pairs: &[NamedPair]) -> anyhow::Result<Vec<ImageMetrics>> {
    check_extents(pairs)?;
    pairs
        .iter()
        .map(|p| score(&p.name, &restore_image(net, &p.degraded)?, &p.degraded, &p.clean))
        .collect()
}

/// Raw form of a pair that can cross threads.
struct RawPair {
    name: String,
    shape: Vec<usize>,
    degraded: Vec<f64>,
    clean: Vec<f64>,
}

pub fn evaluate_parallel(
    cfg: &RunConfig,
    entries: &[Entry],
    pairs: &[NamedPair],
    threads: usize,
) -> anyhow::Result<Vec<ImageMetrics>> {
    check_extents(pairs)?;
    let raw: Vec<RawPair> = pairs
        .iter()
        .map(|p| RawPair {
            name: p.name.clone(),
            shape: p.clean.shape().to_vec(),
            degraded: p.degraded.to_vec(),
            clean: p.clean.to_vec(),
        })
        .collect();
    let chunk = raw.len().div_ceil(threads.max(1)).max(1);
    let results: Vec<anyhow::Result<Vec<ImageMetrics>>> = std::thread::scope(|s| {
        let handles: Vec<_> = raw
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || -> anyhow::Result<Vec<ImageMetrics>> {
                    let net = build_network(cfg)?;
                    checkpoint::restore(&net, entries)?;
                    part.iter()
                        .map(|r| {
                            let degraded = Tensor::new(&r.shape, r.degraded.clone(), false)?;
                            let clean = Tensor::new(&r.shape, r.clean.clone(), false)?;
                            score(&r.name, &restore_image(&net, &degraded)?, &degraded, &clean)
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("evaluation thread panicked"))))
            .collect()
    });
    let mut all = Vec::with_capacity(pairs.len());
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

/// Column means; infinite PSNR stays infinite.
pub fn mean_row(rows: &[ImageMetrics]) -> ImageMetrics {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    ImageMetrics {
        name: "mean".into(),
        psnr_restored: mean(|r| r.psnr_restored),
        ssim_restored: mean(|r| r.ssim_restored),
        psnr_degraded: mean(|r| r.psnr_degraded),
        ssim_degraded: mean(|r| r.ssim_degraded),
    }
}

pub fn metrics_csv(rows: &[ImageMetrics]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{METRICS_CSV_HEADER}");
    for r in rows.iter().chain(std::iter::once(&mean_row(rows))) {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.name, r.psnr_restored, r.ssim_restored, r.psnr_degraded, r.ssim_degraded
        );
    }
    s
}

/// Evaluates `checkpoint` on `pairs`, writes `metrics.csv` to the output
/// directory and returns the rows without the mean.
pub fn run_eval(cfg: &RunConfig, checkpoint_path: &Path, pairs: &[NamedPair]) -> anyhow::Result<Vec<ImageMetrics>> {
    if pairs.is_empty() {
        bail!("nothing to evaluate: the test split is empty");
    }
    let entries = checkpoint::load(checkpoint_path)?;
    let threads = thread_count();
    let rows = if !cfg.deterministic && threads > 1 {
        evaluate_parallel(cfg, &entries, pairs, threads)?
    } else {
        let net = build_network(cfg)?;
        checkpoint::restore(&net, &entries).with_context(|| format!("restoring {}", checkpoint_path.display()))?;
        evaluate(&net, pairs)?
    };
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("metrics.csv"), metrics_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::DegradationSpec;
    use crate::data::synthetic_pairs;
    use crate::manifest::Split;

    #[test]
    fn identical_pairs_give_sentinels() {
        let pairs = synthetic_pairs(Split::Test, 2, 16, 0, &DegradationSpec::gaussian_levels(0.0, 0));
        let net = build_network(&RunConfig::default()).unwrap();
        let rows = evaluate(&net, &pairs).unwrap();
        for r in &rows {
            assert_eq!(r.psnr_degraded, f64::INFINITY);
            assert_eq!(r.ssim_degraded, 1.0);
        }
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with(METRICS_CSV_HEADER));
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn parallel_matches_sequential_here() {
        let cfg = RunConfig::default();
        let pairs = synthetic_pairs(Split::Test, 3, 16, 0, &cfg.degradation);
        let net = build_network(&cfg).unwrap();
        let entries = checkpoint::decode(&checkpoint::encode(&net)).unwrap();
        let seq = evaluate(&net, &pairs).unwrap();
        let par = evaluate_parallel(&cfg, &entries, &pairs, 2).unwrap();
        assert_eq!(seq, par);
    }
}
