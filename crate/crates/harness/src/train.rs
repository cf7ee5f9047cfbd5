//! Training runs: joint Adam (SL) or bilevel (ASBLO).
//!
//! Output directory contents:
//! - `config.txt`: the effective configuration
//! - `loss.csv`: `step,train_l1` (SL)
//! - `asblo_trace.csv`: per outer step trace (ASBLO)
//! - `ckpt_XXXXXX.bin` every `checkpoint_every` steps, `final.ckpt` at the end

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use echoir_core::asblo::{asblo_train, echoir_bilevel_binding};
use echoir_core::layers::Parameterized;
use echoir_core::net::{l1_loss, EchoIrNet};
use echoir_core::optim::Adam;
use echoir_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{OptimizerKind, RunConfig};
use crate::data::{check_extents, load_dataset, random_crop, Dataset};

pub const LOSS_CSV_HEADER: &str = "step,train_l1";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub struct TrainOutcome {
    pub net: EchoIrNet,
    pub losses: Vec<f64>,
    pub final_checkpoint: PathBuf,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn prepare_out_dir(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

pub fn build_network(cfg: &RunConfig) -> anyhow::Result<EchoIrNet> {
    Ok(EchoIrNet::new(cfg.network(), cfg.seed, cfg.precision)?)
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<TrainOutcome> {
    cfg.validate().map_err(anyhow::Error::msg)?;
    let data = load_dataset(cfg)?;
    if data.train.is_empty() {
        bail!("the training split is empty");
    }
    prepare_out_dir(cfg)?;
    match cfg.optimizer {
        OptimizerKind::Sl => train_single_level(cfg, &data),
        OptimizerKind::Asblo => train_bilevel(cfg, &data),
    }
}

fn save_periodic(cfg: &RunConfig, net: &EchoIrNet, step: usize) -> anyhow::Result<()> {
    if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
        checkpoint::save(&cfg.out.join(format!("ckpt_{step:06}.bin")), net)?;
    }
    Ok(())
}

fn finish(cfg: &RunConfig, net: EchoIrNet, losses: Vec<f64>) -> anyhow::Result<TrainOutcome> {
    let final_checkpoint = cfg.out.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_checkpoint, &net)?;
    Ok(TrainOutcome {
        net,
        losses,
        final_checkpoint,
    })
}

/// Mean L1 over the pairs of one batch, with gradients.
fn batch_loss(net: &EchoIrNet, batch: &[(Tensor, Tensor)]) -> anyhow::Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (x, y) in batch {
        let l = l1_loss(&net.forward(x)?, y)?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(&l)?,
        });
    }
    Ok(total.expect("non-empty batch").scale(1.0 / batch.len() as f64))
}

fn train_single_level(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<TrainOutcome> {
    let net = build_network(cfg)?;
    let params = net.params();
    let mut opt = Adam::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = create(&cfg.out.join("loss.csv"))?;
    writeln!(csv, "{LOSS_CSV_HEADER}")?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let i = rand::Rng::random_range(&mut rng, 0..data.train.len());
                random_crop(&data.train[i], cfg.patch_size, &mut rng)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        net.zero_grads();
        let loss = batch_loss(&net, &batch)?;
        let value = loss.item();
        if !value.is_finite() {
            csv.flush()?;
            bail!("non-finite training loss at step {step}");
        }
        loss.backward()?;
        opt.step(&params);
        writeln!(csv, "{step},{value}")?;
        losses.push(value);
        if step % 50 == 0 {
            log::info!("step {step}: train L1 {value:.5}");
        }
        save_periodic(cfg, &net, step)?;
    }
    net.zero_grads();
    csv.flush()?;
    finish(cfg, net, losses)
}

fn train_bilevel(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<TrainOutcome> {
    if data.val.is_empty() {
        bail!("ASBLO needs a non-empty validation split");
    }
    check_extents(&data.train)?;
    check_extents(&data.val)?;
    let net = build_network(cfg)?;
    let problem = echoir_bilevel_binding(
        net,
        data.train.iter().map(|p| p.pair()).collect(),
        data.val.iter().map(|p| p.pair()).collect(),
        cfg.assignment,
    )?;
    let schedule = cfg.schedule();
    let initial_val = problem.validation_loss()?;
    log::info!("initial validation L1 {initial_val:.5}");
    let trace = asblo_train(&problem, &schedule, cfg.steps, cfg.outer_lr, |row| {
        log::debug!("outer step {}: F {:.5} f {:.5} zeta {:.3e}", row.step, row.upper, row.lower, row.zeta);
    })?;
    trace.write_csv(create(&cfg.out.join("asblo_trace.csv"))?)?;
    problem.load(&trace.final_beta, &trace.final_omega)?;
    let final_val = problem.validation_loss()?;
    if !final_val.is_finite() {
        bail!("non-finite validation loss after training");
    }
    log::info!("final validation L1 {final_val:.5}");
    save_periodic(cfg, &problem.net, cfg.steps)?;
    let losses = trace.rows.iter().map(|r| r.lower).collect();
    finish(cfg, problem.net, losses)
}

/// Loads a checkpoint into a freshly built network.
pub fn load_network(cfg: &RunConfig, path: &Path) -> anyhow::Result<EchoIrNet> {
    let net = build_network(cfg)?;
    let entries = checkpoint::load(path)?;
    checkpoint::restore(&net, &entries).with_context(|| format!("restoring {}", path.display()))?;
    Ok(net)
}
