//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use echoir_core::asblo::{BarrierSchedule, BlockAssignment, Eta, Sequence};
use echoir_core::net::{EuReference, NetworkConfig};
use echoir_core::upsampler::{CombineMode, UpsamplerKind};
use echoir_core::Precision;

use crate::degrade::DegradationSpec;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key '{key}' given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: {key}: {reason}")]
    Value { line: usize, key: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Joint first-order training of every parameter.
    Sl,
    Asblo,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sl" => Ok(OptimizerKind::Sl),
            "asblo" => Ok(OptimizerKind::Asblo),
            other => Err(format!("unknown optimizer '{other}' (expected SL or ASBLO)")),
        }
    }
}

/// Documented keys: name, default, meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("preset", "toy", "network size: toy or paper"),
    ("upsampler_kind", "EU", "decoder upsampler: EU, PS or TC"),
    ("combine_mode", "add", "echo upsampler kernel merge: add or multiply"),
    ("eu_reference", "encoder_echo", "echo upsampler guide: encoder_echo or input_image"),
    ("window_radius", "2", "echo upsampler window radius"),
    ("channel_attention", "true", "enable channel attention in mix-attention blocks"),
    ("gdfn", "true", "gated feed-forward (false: plain GELU MLP)"),
    ("optimizer", "SL", "SL (joint Adam) or ASBLO (bilevel)"),
    ("assignment", "upsampler_upper", "ASBLO upper block: upsampler_upper or upsampler_lower"),
    ("lr", "0.003", "SL learning rate"),
    ("weight_decay", "0.0001", "SL decoupled weight decay"),
    ("steps", "500", "SL steps or ASBLO outer steps"),
    ("batch_size", "2", "pairs per SL step"),
    ("patch_size", "32", "square training crop; must divide by 8"),
    ("seed", "0", "seed for initialization, data and sampling"),
    ("out", "runs/echoir", "output directory"),
    ("checkpoint_every", "100", "steps between checkpoints (0: final only)"),
    ("manifest", "", "dataset manifest; empty for synthetic data"),
    ("synthetic_train", "16", "synthetic training pairs"),
    ("synthetic_val", "8", "synthetic validation pairs (ASBLO upper level)"),
    ("synthetic_test", "8", "synthetic held-out pairs for eval"),
    ("image_size", "32", "synthetic image extent"),
    ("degradation", "gaussian_noise:std=25", "degradation descriptor for synthetic data"),
    ("precision", "wide", "wide or standard"),
    ("deterministic", "true", "sequential evaluation with bit-identical outputs"),
    ("outer_lr", "0.0003", "ASBLO step size on the upper block"),
    ("inner_steps", "50", "ASBLO regularized lower-level descent steps"),
    ("inner_lr", "0.01", "ASBLO inner step size"),
    ("omega_steps", "20", "ASBLO barrier-problem descent steps"),
    ("schedule_initial", "0.1", "initial mu = theta = sigma"),
    ("schedule_factor", "0.5", "schedule decay factor"),
    ("schedule_period", "25", "outer steps between decays"),
    ("schedule_floor", "0.0001", "schedule lower bound"),
    ("kappa", "1", "barrier junction"),
    ("eta1", "-1.5", "barrier log-branch offset"),
    ("feasibility_eps", "1e-8", "barrier clamp distance from the boundary"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub upsampler_kind: UpsamplerKind,
    pub combine_mode: CombineMode,
    pub eu_reference: EuReference,
    pub window_radius: usize,
    pub channel_attention: bool,
    pub gdfn: bool,
    pub optimizer: OptimizerKind,
    pub assignment: BlockAssignment,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint_every: usize,
    pub manifest: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub synthetic_test: usize,
    pub image_size: usize,
    pub degradation: DegradationSpec,
    pub precision: Precision,
    pub deterministic: bool,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub omega_steps: usize,
    pub schedule_initial: f64,
    pub schedule_factor: f64,
    pub schedule_period: usize,
    pub schedule_floor: f64,
    pub kappa: f64,
    pub eta1: f64,
    pub feasibility_eps: f64,
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            preset: String::new(),
            upsampler_kind: UpsamplerKind::Eu,
            combine_mode: CombineMode::Add,
            eu_reference: EuReference::EncoderEcho,
            window_radius: 0,
            channel_attention: true,
            gdfn: true,
            optimizer: OptimizerKind::Sl,
            assignment: BlockAssignment::UpsamplerUpper,
            lr: 0.0,
            weight_decay: 0.0,
            steps: 0,
            batch_size: 0,
            patch_size: 0,
            seed: 0,
            out: PathBuf::new(),
            checkpoint_every: 0,
            manifest: None,
            synthetic_train: 0,
            synthetic_val: 0,
            synthetic_test: 0,
            image_size: 0,
            degradation: DegradationSpec::gaussian_levels(25.0, 0),
            precision: Precision::Wide,
            deterministic: true,
            outer_lr: 0.0,
            inner_steps: 0,
            inner_lr: 0.0,
            omega_steps: 0,
            schedule_initial: 0.0,
            schedule_factor: 0.0,
            schedule_period: 0,
            schedule_floor: 0.0,
            kappa: 0.0,
            eta1: 0.0,
            feasibility_eps: 0.0,
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("documented defaults parse");
        }
        cfg
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let v = v.trim();
        match key {
            "preset" => {
                if v != "toy" && v != "paper" {
                    return Err(format!("unknown preset '{v}' (expected toy or paper)"));
                }
                self.preset = v.to_string();
            }
            "upsampler_kind" => self.upsampler_kind = parse(v)?,
            "combine_mode" => self.combine_mode = parse(v)?,
            "eu_reference" => self.eu_reference = parse(v)?,
            "window_radius" => self.window_radius = parse(v)?,
            "channel_attention" => self.channel_attention = parse(v)?,
            "gdfn" => self.gdfn = parse(v)?,
            "optimizer" => self.optimizer = parse(v)?,
            "assignment" => {
                self.assignment = match v {
                    "upsampler_upper" => BlockAssignment::UpsamplerUpper,
                    "upsampler_lower" => BlockAssignment::UpsamplerLower,
                    other => return Err(format!("unknown assignment '{other}'")),
                }
            }
            "lr" => self.lr = parse(v)?,
            "weight_decay" => self.weight_decay = parse(v)?,
            "steps" => self.steps = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "patch_size" => self.patch_size = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(v)?,
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synthetic_train" => self.synthetic_train = parse(v)?,
            "synthetic_val" => self.synthetic_val = parse(v)?,
            "synthetic_test" => self.synthetic_test = parse(v)?,
            "image_size" => self.image_size = parse(v)?,
            "degradation" => self.degradation = parse(v)?,
            "precision" => self.precision = parse(v)?,
            "deterministic" => self.deterministic = parse(v)?,
            "outer_lr" => self.outer_lr = parse(v)?,
            "inner_steps" => self.inner_steps = parse(v)?,
            "inner_lr" => self.inner_lr = parse(v)?,
            "omega_steps" => self.omega_steps = parse(v)?,
            "schedule_initial" => self.schedule_initial = parse(v)?,
            "schedule_factor" => self.schedule_factor = parse(v)?,
            "schedule_period" => self.schedule_period = parse(v)?,
            "schedule_floor" => self.schedule_floor = parse(v)?,
            "kappa" => self.kappa = parse(v)?,
            "eta1" => self.eta1 = parse(v)?,
            "feasibility_eps" => self.feasibility_eps = parse(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let k = k.trim();
            if !KEYS.iter().any(|(name, _, _)| *name == k) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: k.to_string(),
                });
            }
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: k.to_string(),
                });
            }
            cfg.set(k, v).map_err(|reason| ConfigError::Value {
                line,
                key: k.to_string(),
                reason,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::parse_str(&text)
    }

    fn value(&self, key: &str) -> String {
        match key {
            "preset" => self.preset.clone(),
            "upsampler_kind" => format!("{:?}", self.upsampler_kind).to_uppercase(),
            "combine_mode" => format!("{:?}", self.combine_mode).to_lowercase(),
            "eu_reference" => match self.eu_reference {
                EuReference::EncoderEcho => "encoder_echo".into(),
                EuReference::InputImage => "input_image".into(),
            },
            "window_radius" => self.window_radius.to_string(),
            "channel_attention" => self.channel_attention.to_string(),
            "gdfn" => self.gdfn.to_string(),
            "optimizer" => format!("{:?}", self.optimizer).to_uppercase(),
            "assignment" => match self.assignment {
                BlockAssignment::UpsamplerUpper => "upsampler_upper".into(),
                BlockAssignment::UpsamplerLower => "upsampler_lower".into(),
            },
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "manifest" => self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "synthetic_train" => self.synthetic_train.to_string(),
            "synthetic_val" => self.synthetic_val.to_string(),
            "synthetic_test" => self.synthetic_test.to_string(),
            "image_size" => self.image_size.to_string(),
            "degradation" => self.degradation.to_string(),
            "precision" => match self.precision {
                Precision::Wide => "wide".into(),
                Precision::Standard => "standard".into(),
            },
            "deterministic" => self.deterministic.to_string(),
            "outer_lr" => self.outer_lr.to_string(),
            "inner_steps" => self.inner_steps.to_string(),
            "inner_lr" => self.inner_lr.to_string(),
            "omega_steps" => self.omega_steps.to_string(),
            "schedule_initial" => self.schedule_initial.to_string(),
            "schedule_factor" => self.schedule_factor.to_string(),
            "schedule_period" => self.schedule_period.to_string(),
            "schedule_floor" => self.schedule_floor.to_string(),
            "kappa" => self.kappa.to_string(),
            "eta1" => self.eta1.to_string(),
            "feasibility_eps" => self.feasibility_eps.to_string(),
            other => unreachable!("undocumented key {other}"),
        }
    }

    /// Every key with its effective value, in documentation order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.value(k));
        }
        s
    }

    pub fn network(&self) -> NetworkConfig {
        let mut n = if self.preset == "paper" {
            NetworkConfig::paper()
        } else {
            NetworkConfig::toy()
        };
        n.upsampler_kind = self.upsampler_kind;
        n.eu_combine_mode = self.combine_mode;
        n.eu_reference = self.eu_reference;
        n.eu_window_radius = self.window_radius;
        n.enable_channel_attention = self.channel_attention;
        n.enable_gdfn = self.gdfn;
        n
    }

    pub fn schedule(&self) -> BarrierSchedule {
        let seq = Sequence::Geometric {
            initial: self.schedule_initial,
            factor: self.schedule_factor,
            period: self.schedule_period,
            floor: self.schedule_floor,
        };
        BarrierSchedule {
            mu: seq,
            theta: seq,
            sigma: seq,
            kappa: self.kappa,
            eta: Eta::derive(self.kappa, self.eta1).unwrap_or(Eta([self.eta1, f64::NAN, f64::NAN, f64::NAN])),
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            omega_steps: self.omega_steps,
            feasibility_eps: self.feasibility_eps,
        }
    }

    /// Cross-key checks beyond per-value parsing.
    pub fn validate(&self) -> Result<(), String> {
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            return Err(format!("patch_size {} must be a positive multiple of 8", self.patch_size));
        }
        if self.manifest.is_none() && (self.image_size < self.patch_size || self.image_size % 8 != 0) {
            return Err(format!(
                "image_size {} must be a multiple of 8 and at least patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.window_radius == 0 {
            return Err("window_radius must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("lr must be positive".into());
        }
        self.network().validate().map_err(|e| e.to_string())?;
        if self.optimizer == OptimizerKind::Asblo {
            self.schedule().validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}
