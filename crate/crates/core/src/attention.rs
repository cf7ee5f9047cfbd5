//! Mix-attention blocks: channel-transposed multi-head self-attention,
//! squeeze-style channel attention and a gated depthwise-conv feed-forward
//! network, stacked into mix-attention modules.

use crate::layers::{join, ChannelNorm, Conv2d, Linear, NamedParams, ParamInit, Parameterized};
use crate::tensor::{Result, Tensor, TensorError};

/// Reduction ratio of the channel-attention MLP.
pub const CHANNEL_ATTENTION_REDUCTION: usize = 4;
pub const DEFAULT_GDFN_EXPANSION: f64 = 2.66;

#[derive(Clone, Debug, PartialEq)]
pub struct MixAttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub gdfn_expansion: f64,
    pub enable_channel_attention: bool,
    pub enable_gdfn: bool,
}

impl MixAttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        MixAttentionConfig {
            channels,
            heads,
            gdfn_expansion: DEFAULT_GDFN_EXPANSION,
            enable_channel_attention: true,
            enable_gdfn: true,
        }
    }

    /// Channels per head; the `d` in the `1/sqrt(d)` attention scale.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn hidden_channels(&self) -> usize {
        (self.gdfn_expansion * self.channels as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(TensorError::Config(format!(
                "channels {} not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        if !(self.gdfn_expansion > 0.0) {
            return Err(TensorError::Config(format!(
                "gdfn expansion must be positive, got {}",
                self.gdfn_expansion
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum FeedForward {
    /// `proj_in` yields both branches (`2·hidden` channels), `dw` filters them,
    /// the first half gates the second through GELU.
    Gdfn {
        proj_in: Conv2d,
        dw: Conv2d,
        proj_out: Conv2d,
        hidden: usize,
    },
    /// Ablation: two pointwise projections with GELU in between.
    Mlp { fc1: Conv2d, fc2: Conv2d },
}

impl FeedForward {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeedForward::Gdfn {
                proj_in,
                dw,
                proj_out,
                hidden,
            } => {
                let both = dw.forward(&proj_in.forward(x)?)?;
                let gate = both.narrow(0, 0, *hidden)?;
                let value = both.narrow(0, *hidden, *hidden)?;
                proj_out.forward(&gate.gelu().mul(&value)?)
            }
            FeedForward::Mlp { fc1, fc2 } => fc2.forward(&fc1.forward(x)?.gelu()),
        }
    }
}

impl Parameterized for FeedForward {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        match self {
            FeedForward::Gdfn {
                proj_in,
                dw,
                proj_out,
                ..
            } => {
                proj_in.collect_params(&join(prefix, "proj_in"), out);
                dw.collect_params(&join(prefix, "dw"), out);
                proj_out.collect_params(&join(prefix, "proj_out"), out);
            }
            FeedForward::Mlp { fc1, fc2 } => {
                fc1.collect_params(&join(prefix, "fc1"), out);
                fc2.collect_params(&join(prefix, "fc2"), out);
            }
        }
    }
}

#[derive(Debug)]
pub struct MixAttentionBlock {
    pub config: MixAttentionConfig,
    pub norm1: ChannelNorm,
    pub qkv: Conv2d,
    pub qkv_dw: Conv2d,
    pub proj: Conv2d,
    pub ca_fc1: Linear,
    pub ca_fc2: Linear,
    pub norm2: ChannelNorm,
    pub ffn: FeedForward,
}

impl MixAttentionBlock {
    pub fn new(init: &mut ParamInit, config: MixAttentionConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let reduced = (c / CHANNEL_ATTENTION_REDUCTION).max(1);
        let hidden = config.hidden_channels();
        let ffn = if config.enable_gdfn {
            FeedForward::Gdfn {
                proj_in: Conv2d::pointwise(init, c, 2 * hidden, false),
                dw: Conv2d::depthwise(init, 2 * hidden),
                proj_out: Conv2d::pointwise(init, hidden, c, false),
                hidden,
            }
        } else {
            FeedForward::Mlp {
                fc1: Conv2d::pointwise(init, c, hidden, true),
                fc2: Conv2d::pointwise(init, hidden, c, true),
            }
        };
        Ok(MixAttentionBlock {
            norm1: ChannelNorm::new(init, c),
            qkv: Conv2d::pointwise(init, c, 3 * c, false),
            qkv_dw: Conv2d::depthwise(init, 3 * c),
            proj: Conv2d::pointwise(init, c, c, false),
            ca_fc1: Linear::new(init, c, reduced),
            ca_fc2: Linear::new(init, reduced, c),
            norm2: ChannelNorm::new(init, c),
            ffn,
            config,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        match *x.shape() {
            [c, h, w] if c == self.config.channels => Ok((h, w)),
            _ => Err(TensorError::Shape {
                op: "mix_attention",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.channels],
            }),
        }
    }

    /// Channel-transposed attention: per head, `Softmax(Q·Kᵀ/√d)·V` with
    /// `Q, K, V` of shape `(C/heads) × HW` and softmax over the last axis.
    pub fn multi_head_self_attention(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = self.check_input(x)?;
        let c = self.config.channels;
        let heads = self.config.heads;
        let d = self.config.head_dim();
        let qkv = self.qkv_dw.forward(&self.qkv.forward(x)?)?;
        let split = |i: usize| qkv.narrow(0, i * c, c)?.reshape(&[heads, d, h * w]);
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let alpha = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
        let attn = alpha.softmax(2)?;
        let out = attn.matmul(&v)?.reshape(&[c, h, w])?;
        self.proj.forward(&out)
    }

    /// `channel_weights = Sigmoid(Mlp(AvgPool(f_ts)))`, returns
    /// `f_ts ⊗ channel_weights ⊕ f_t`.
    pub fn channel_attention(&self, f_ts: &Tensor, f_t: &Tensor) -> Result<Tensor> {
        if f_ts.shape() != f_t.shape() {
            return Err(TensorError::Shape {
                op: "channel_attention",
                lhs: f_ts.shape().to_vec(),
                rhs: f_t.shape().to_vec(),
            });
        }
        let cw = self.channel_weights(f_ts)?;
        let c = cw.numel();
        f_ts.mul(&cw.reshape(&[c, 1, 1])?)?.add(f_t)
    }

    pub fn channel_weights(&self, f_ts: &Tensor) -> Result<Tensor> {
        let pooled = f_ts.adaptive_avg_pool()?;
        Ok(self.ca_fc2.forward(&self.ca_fc1.forward(&pooled)?.gelu())?.sigmoid())
    }

    pub fn gdfn(&self, x: &Tensor) -> Result<Tensor> {
        self.ffn.forward(x)
    }

    pub fn forward(&self, f_t: &Tensor) -> Result<Tensor> {
        self.check_input(f_t)?;
        let f_ts = self.multi_head_self_attention(&self.norm1.forward(f_t)?)?;
        let f_ta = if self.config.enable_channel_attention {
            self.channel_attention(&f_ts, f_t)?
        } else {
            f_ts.add(f_t)?
        };
        let f_tg = self.gdfn(&self.norm2.forward(&f_ta)?)?;
        f_tg.add(&f_ta)
    }
}

impl Parameterized for MixAttentionBlock {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.qkv.collect_params(&join(prefix, "qkv"), out);
        self.qkv_dw.collect_params(&join(prefix, "qkv_dw"), out);
        self.proj.collect_params(&join(prefix, "proj"), out);
        if self.config.enable_channel_attention {
            self.ca_fc1.collect_params(&join(prefix, "ca_fc1"), out);
            self.ca_fc2.collect_params(&join(prefix, "ca_fc2"), out);
        }
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.ffn.collect_params(&join(prefix, "ffn"), out);
    }
}

/// A mix-attention module: `length` blocks applied in sequence.
#[derive(Debug)]
pub struct Mam {
    pub blocks: Vec<MixAttentionBlock>,
}

impl Mam {
    pub fn new(init: &mut ParamInit, config: &MixAttentionConfig, length: usize) -> Result<Self> {
        if length < 1 {
            return Err(TensorError::Config("mix-attention module length must be at least 1".into()));
        }
        let blocks = (0..length)
            .map(|_| MixAttentionBlock::new(init, config.clone()))
            .collect::<Result<_>>()?;
        Ok(Mam { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let mut x = f.clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }
}

impl Parameterized for Mam {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &i.to_string()), out);
        }
    }
}
