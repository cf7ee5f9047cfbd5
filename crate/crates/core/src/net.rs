//! The restoration network: shallow extraction, a three-level encoder whose
//! per-level outputs are kept as echoes, a middle module, a three-stage
//! decoder that upsamples under echo guidance, refinement and
//! reconstruction with a global residual.

use crate::attention::{Mam, MixAttentionConfig};
use crate::layers::{join, Conv2d, NamedParams, ParamInit, Parameterized};
use crate::tensor::{Conv2dOptions, Precision, Result, Tensor, TensorError};
use crate::upsampler::{Downsample, EchoUpsamplerConfig, Upsampler, UpsamplerKind};

pub const LEVELS: usize = 3;
/// Spatial extents must be divisible by this.
pub const EXTENT_MULTIPLE: usize = 1 << LEVELS;

/// What the echo upsamplers use as their guide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EuReference {
    /// The encoder output of the matching level.
    #[default]
    EncoderEcho,
    /// The input image, average-pooled to the stage resolution.
    InputImage,
}

impl std::str::FromStr for EuReference {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "encoder_echo" => Ok(EuReference::EncoderEcho),
            "input_image" => Ok(EuReference::InputImage),
            other => Err(format!("unknown reference '{other}' (expected encoder_echo or input_image)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub encoder_lengths: [usize; LEVELS],
    pub encoder_dims: [usize; LEVELS],
    /// Heads per encoder level; decoder stages reuse the head count of the
    /// level they return to.
    pub encoder_heads: [usize; LEVELS],
    pub middle_length: usize,
    pub middle_dim: usize,
    pub middle_heads: usize,
    pub refine_length: usize,
    pub refine_heads: usize,
    pub upsampler_kind: UpsamplerKind,
    pub eu_reference: EuReference,
    pub eu_window_radius: usize,
    pub eu_combine_mode: crate::upsampler::CombineMode,
    pub enable_channel_attention: bool,
    pub enable_gdfn: bool,
}

impl NetworkConfig {
    pub fn paper() -> Self {
        NetworkConfig {
            encoder_lengths: [4, 6, 6],
            encoder_dims: [48, 96, 192],
            encoder_heads: [1, 2, 4],
            middle_length: 8,
            middle_dim: 384,
            middle_heads: 8,
            refine_length: 4,
            refine_heads: 1,
            upsampler_kind: UpsamplerKind::Eu,
            eu_reference: EuReference::EncoderEcho,
            eu_window_radius: crate::upsampler::DEFAULT_WINDOW_RADIUS,
            eu_combine_mode: crate::upsampler::CombineMode::Add,
            enable_channel_attention: true,
            enable_gdfn: true,
        }
    }

    pub fn toy() -> Self {
        NetworkConfig {
            encoder_lengths: [1, 1, 1],
            encoder_dims: [8, 16, 32],
            middle_length: 1,
            middle_dim: 64,
            refine_length: 1,
            ..NetworkConfig::paper()
        }
    }

    /// Base width `C`.
    pub fn dim(&self) -> usize {
        self.encoder_dims[0]
    }

    /// Decoder lengths, deepest stage first.
    pub fn decoder_lengths(&self) -> [usize; LEVELS] {
        let mut l = self.encoder_lengths;
        l.reverse();
        l
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.encoder_dims;
        if d[0] == 0 || d[1] != 2 * d[0] || d[2] != 2 * d[1] || self.middle_dim != 2 * d[2] {
            return Err(TensorError::Config(format!(
                "dims must double per level: {:?} then {}",
                d, self.middle_dim
            )));
        }
        if self.encoder_lengths.contains(&0) || self.middle_length == 0 || self.refine_length == 0 {
            return Err(TensorError::Config("module lengths must be at least 1".into()));
        }
        Ok(())
    }

    fn block(&self, channels: usize, heads: usize) -> MixAttentionConfig {
        let mut c = MixAttentionConfig::new(channels, heads);
        c.enable_channel_attention = self.enable_channel_attention;
        c.enable_gdfn = self.enable_gdfn;
        c
    }
}

/// Per-level encoder outputs, shallowest first.
#[derive(Clone, Debug)]
pub struct EncoderEchoes(pub Vec<Tensor>);

#[derive(Debug)]
pub struct EchoIrNet {
    pub config: NetworkConfig,
    pub shallow: Conv2d,
    pub encoder: Vec<Mam>,
    pub downsamplers: Vec<Downsample>,
    pub middle: Mam,
    /// Deepest stage first.
    pub upsamplers: Vec<Upsampler>,
    pub decoder: Vec<Mam>,
    pub refine: Mam,
    pub reconstruct: Conv2d,
}

fn conv3x3(init: &mut ParamInit, c_in: usize, c_out: usize) -> Conv2d {
    Conv2d::new(init, c_in, c_out, 3, Conv2dOptions::new(1, 1, 1), true)
}

impl EchoIrNet {
    pub fn new(config: NetworkConfig, seed: u64, precision: Precision) -> Result<Self> {
        config.validate()?;
        let mut init = ParamInit::new(seed, precision);
        let c = config.dim();
        let shallow = conv3x3(&mut init, 3, c);
        let mut encoder = Vec::new();
        let mut downsamplers = Vec::new();
        for lvl in 0..LEVELS {
            let dim = config.encoder_dims[lvl];
            let block = config.block(dim, config.encoder_heads[lvl]);
            encoder.push(Mam::new(&mut init, &block, config.encoder_lengths[lvl])?);
            downsamplers.push(Downsample::new(&mut init, dim));
        }
        let middle = Mam::new(
            &mut init,
            &config.block(config.middle_dim, config.middle_heads),
            config.middle_length,
        )?;
        let mut upsamplers = Vec::new();
        let mut decoder = Vec::new();
        for (stage, len) in config.decoder_lengths().into_iter().enumerate() {
            let lvl = LEVELS - 1 - stage;
            let dim = config.encoder_dims[lvl];
            let ref_channels = match config.eu_reference {
                EuReference::EncoderEcho => dim,
                EuReference::InputImage => 3,
            };
            let mut eu = EchoUpsamplerConfig::new(2 * dim, ref_channels);
            eu.window_radius = config.eu_window_radius;
            eu.combine_mode = config.eu_combine_mode;
            upsamplers.push(Upsampler::new(&mut init, config.upsampler_kind, eu)?);
            decoder.push(Mam::new(&mut init, &config.block(dim, config.encoder_heads[lvl]), len)?);
        }
        let refine = Mam::new(&mut init, &config.block(c, config.refine_heads), config.refine_length)?;
        let reconstruct = conv3x3(&mut init, c, 3);
        Ok(EchoIrNet {
            config,
            shallow,
            encoder,
            downsamplers,
            middle,
            upsamplers,
            decoder,
            refine,
            reconstruct,
        })
    }

    pub fn shallow_extract(&self, image: &Tensor) -> Result<Tensor> {
        check_image(image)?;
        self.shallow.forward(image)
    }

    /// Returns the deepest features `[8C, H/8, W/8]` and the echoes.
    pub fn encode(&self, f: &Tensor) -> Result<(Tensor, EncoderEchoes)> {
        let mut x = f.clone();
        let mut echoes = Vec::with_capacity(LEVELS);
        for (mam, down) in self.encoder.iter().zip(&self.downsamplers) {
            let e = mam.forward(&x)?;
            x = down.forward(&e)?;
            echoes.push(e);
        }
        Ok((x, EncoderEchoes(echoes)))
    }

    /// Guides for the three decoder stages, deepest first.
    fn guides(&self, image: &Tensor, echoes: &EncoderEchoes) -> Result<Vec<Tensor>> {
        (0..LEVELS)
            .rev()
            .map(|lvl| match self.config.eu_reference {
                EuReference::EncoderEcho => Ok(echoes.0[lvl].clone()),
                EuReference::InputImage => image.avg_pool(1 << lvl),
            })
            .collect()
    }

    /// `guides` are ordered deepest first, one per stage.
    pub fn decode(&self, f_m: &Tensor, guides: &[Tensor]) -> Result<Tensor> {
        if guides.len() != LEVELS {
            return Err(TensorError::Config(format!(
                "decoder needs {LEVELS} guides, got {}",
                guides.len()
            )));
        }
        let mut x = f_m.clone();
        for ((up, mam), guide) in self.upsamplers.iter().zip(&self.decoder).zip(guides) {
            x = mam.forward(&up.forward(&x, guide)?)?;
        }
        Ok(x)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let f = self.shallow_extract(image)?;
        let (f_e, echoes) = self.encode(&f)?;
        let f_m = self.middle.forward(&f_e)?;
        let f_d = self.decode(&f_m, &self.guides(image, &echoes)?)?;
        let r = self.reconstruct.forward(&self.refine.forward(&f_d)?)?;
        r.add(image)
    }

    /// Upsampler parameters only.
    pub fn upsampler_params(&self) -> NamedParams {
        let mut out = Vec::new();
        for (i, up) in self.upsamplers.iter().enumerate() {
            up.collect_params(&format!("upsamplers.{i}"), &mut out);
        }
        out
    }

    /// Every parameter outside the upsamplers.
    pub fn backbone_params(&self) -> NamedParams {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("upsamplers."))
            .collect()
    }

    /// Parameters grouped by pipeline stage.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<Tensor>)> {
        let group = |p: &dyn Parameterized| p.params();
        let mut enc = Vec::new();
        for m in &self.encoder {
            enc.extend(m.params());
        }
        let mut down = Vec::new();
        for d in &self.downsamplers {
            down.extend(d.params());
        }
        let mut dec = Vec::new();
        for m in &self.decoder {
            dec.extend(m.params());
        }
        vec![
            ("shallow", group(&self.shallow)),
            ("encoder", enc),
            ("downsamplers", down),
            ("middle", group(&self.middle)),
            ("upsamplers", self.upsampler_params().into_iter().map(|(_, t)| t).collect()),
            ("decoder", dec),
            ("refine", group(&self.refine)),
            ("reconstruct", group(&self.reconstruct)),
        ]
    }

    /// Approximate multiply-accumulate count for one `h × w` image.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let cfg = &self.config;
        let px = |lvl: usize| ((h >> lvl) * (w >> lvl)) as u64;
        let c = cfg.dim() as u64;
        let mut total = 27 * c * px(0) + 9 * c * 3 * px(0);
        for lvl in 0..LEVELS {
            let d = cfg.encoder_dims[lvl];
            let n = px(lvl);
            total += cfg.encoder_lengths[lvl] as u64 * block_flops(&cfg.block(d, cfg.encoder_heads[lvl]), n);
            total += 9 * (d as u64) * (2 * d as u64) * px(lvl + 1);
        }
        total += cfg.middle_length as u64 * block_flops(&cfg.block(cfg.middle_dim, cfg.middle_heads), px(LEVELS));
        for (stage, len) in cfg.decoder_lengths().into_iter().enumerate() {
            let lvl = LEVELS - 1 - stage;
            let d = cfg.encoder_dims[lvl] as u64;
            let n = px(lvl);
            let window = (2 * cfg.eu_window_radius as u64 + 1).pow(2);
            total += match cfg.upsampler_kind {
                UpsamplerKind::Eu => {
                    let cr = match cfg.eu_reference {
                        EuReference::EncoderEcho => d,
                        EuReference::InputImage => 3,
                    };
                    let e = crate::upsampler::DEFAULT_EMBED_DIM as u64;
                    n * (cr * cr + cr * e + window * (e + 2 * d) + 2 * d * d)
                }
                UpsamplerKind::Ps => 2 * d * 4 * d * px(lvl + 1),
                UpsamplerKind::Tc => 2 * d * d * 4 * px(lvl + 1),
            };
            total += len as u64 * block_flops(&cfg.block(d as usize, cfg.encoder_heads[lvl]), n);
        }
        total + cfg.refine_length as u64 * block_flops(&cfg.block(cfg.dim(), cfg.refine_heads), px(0))
    }
}

fn block_flops(b: &MixAttentionConfig, n: u64) -> u64 {
    let c = b.channels as u64;
    let attn = 3 * c * c * n + 27 * c * n + 2 * c * (c / b.heads as u64) * n + c * c * n;
    let ca = if b.enable_channel_attention { 2 * c * (c / 4).max(1) + c * n } else { 0 };
    let hid = b.hidden_channels() as u64;
    let ffn = if b.enable_gdfn {
        c * 2 * hid * n + 18 * hid * n + hid * n + hid * c * n
    } else {
        2 * c * hid * n
    };
    attn + ca + ffn
}

impl Parameterized for EchoIrNet {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.shallow.collect_params(&join(prefix, "shallow"), out);
        for (i, (m, d)) in self.encoder.iter().zip(&self.downsamplers).enumerate() {
            m.collect_params(&join(prefix, &format!("encoder.{i}")), out);
            d.collect_params(&join(prefix, &format!("down.{i}")), out);
        }
        self.middle.collect_params(&join(prefix, "middle"), out);
        for (i, (u, m)) in self.upsamplers.iter().zip(&self.decoder).enumerate() {
            u.collect_params(&join(prefix, &format!("upsamplers.{i}")), out);
            m.collect_params(&join(prefix, &format!("decoder.{i}")), out);
        }
        self.refine.collect_params(&join(prefix, "refine"), out);
        self.reconstruct.collect_params(&join(prefix, "reconstruct"), out);
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    match *image.shape() {
        [3, h, w] if h > 0 && w > 0 && h % EXTENT_MULTIPLE == 0 && w % EXTENT_MULTIPLE == 0 => Ok(()),
        _ => Err(TensorError::Config(format!(
            "image must be [3, H, W] with H, W divisible by {EXTENT_MULTIPLE}, got {:?}",
            image.shape()
        ))),
    }
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(TensorError::Shape {
            op: "l1_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    Ok(pred.sub(target)?.abs().mean())
}
