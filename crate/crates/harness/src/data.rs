//! Training, validation and test pairs from a manifest or generated on the fly.

use std::path::Path;

use anyhow::{bail, Context};
use echoir_core::asblo::ImagePair;
use echoir_core::net::EXTENT_MULTIPLE;
use echoir_core::Tensor;
use rand::Rng;

use crate::config::RunConfig;
use crate::degrade::{degrade, synthetic_clean, DegradationSpec};
use crate::image_io::load_image;
use crate::manifest::{DatasetManifest, ManifestEntry, Split};

/// A (degraded, clean) pair with a display name.
pub struct NamedPair {
    pub name: String,
    pub degraded: Tensor,
    pub clean: Tensor,
}

impl NamedPair {
    pub fn pair(&self) -> ImagePair {
        (self.degraded.clone(), self.clean.clone())
    }
}

#[derive(Default)]
pub struct Dataset {
    pub train: Vec<NamedPair>,
    pub val: Vec<NamedPair>,
    pub test: Vec<NamedPair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[NamedPair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Distinct, reproducible seed for item `index` of `split`.
pub fn item_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    let mut z = seed ^ (tag << 56) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn synthetic_pairs(
    split: Split,
    count: usize,
    size: usize,
    seed: u64,
    spec: &DegradationSpec,
) -> Vec<NamedPair> {
    (0..count)
        .map(|i| {
            let s = item_seed(seed, split, i);
            let clean = synthetic_clean(size, size, s);
            let degraded = degrade(&clean, &spec.with_seed(s ^ spec.seed));
            NamedPair {
                name: format!("{}_{i:04}", split.as_str()),
                degraded,
                clean,
            }
        })
        .collect()
}

fn load_entry(e: &ManifestEntry) -> anyhow::Result<NamedPair> {
    let clean = load_image(&e.clean)?;
    let degraded = load_image(&e.degraded)?;
    if clean.shape() != degraded.shape() {
        bail!(
            "{} and {} differ in size ({:?} vs {:?})",
            e.clean.display(),
            e.degraded.display(),
            clean.shape(),
            degraded.shape()
        );
    }
    let name = e
        .degraded
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| e.degraded.display().to_string());
    Ok(NamedPair { name, degraded, clean })
}

pub fn manifest_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let m = DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    let mut ds = Dataset::default();
    for e in &m.entries {
        let pair = load_entry(e)?;
        match e.split {
            Split::Train => ds.train.push(pair),
            Split::Val => ds.val.push(pair),
            Split::Test => ds.test.push(pair),
        }
    }
    Ok(ds)
}

pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    match &cfg.manifest {
        Some(p) => manifest_dataset(p),
        None => Ok(Dataset {
            train: synthetic_pairs(Split::Train, cfg.synthetic_train, cfg.image_size, cfg.seed, &cfg.degradation),
            val: synthetic_pairs(Split::Val, cfg.synthetic_val, cfg.image_size, cfg.seed, &cfg.degradation),
            test: synthetic_pairs(Split::Test, cfg.synthetic_test, cfg.image_size, cfg.seed, &cfg.degradation),
        }),
    }
}

/// Same random `size × size` window of both images.
pub fn random_crop(pair: &NamedPair, size: usize, rng: &mut impl Rng) -> anyhow::Result<ImagePair> {
    let (h, w) = (pair.clean.shape()[1], pair.clean.shape()[2]);
    if h < size || w < size {
        bail!("{} is {h}x{w}, smaller than the {size} patch", pair.name);
    }
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    let crop = |t: &Tensor| -> anyhow::Result<Tensor> { Ok(t.narrow(1, y, size)?.narrow(2, x, size)?.detach()) };
    Ok((crop(&pair.degraded)?, crop(&pair.clean)?))
}

/// Images the network can take whole.
pub fn check_extents(pairs: &[NamedPair]) -> anyhow::Result<()> {
    for p in pairs {
        let s = p.clean.shape();
        if s[1] % EXTENT_MULTIPLE != 0 || s[2] % EXTENT_MULTIPLE != 0 {
            bail!("{}: {}x{} is not a multiple of {EXTENT_MULTIPLE}", p.name, s[1], s[2]);
        }
    }
    Ok(())
}
