//! Echo upsampling: a learnable joint-bilateral 2× upsampler guided by an
//! encoder feature map, plus the strided-conv downsampler and the
//! pixel-shuffle / transposed-conv variants used for ablations.
//!
//! Frames: a high-res pixel `p = (y, x)` has fractional low-res centre
//! `p/2`. Its window `Ω` is the `(2R+1)²` block of low-res pixels around
//! `(⌊y/2⌋, ⌊x/2⌋)`, clipped at the borders. The spatial kernel measures
//! `‖p/2 − p′‖` in low-res units; the range kernel compares the guide
//! embedding at `p` with the embedding at `2p′`, the high-res site of `p′`.

use crate::layers::{join, Conv2d, NamedParams, ParamInit, Parameterized};
use crate::tensor::{Conv2dOptions, Result, Tensor, TensorError};

pub const DEFAULT_WINDOW_RADIUS: usize = 2;
pub const DEFAULT_EMBED_DIM: usize = 8;
const MIN_WEIGHT_SUM: f64 = 1e-12;

/// How the spatial and range kernels are merged into one weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CombineMode {
    #[default]
    Add,
    Multiply,
}

impl CombineMode {
    #[inline]
    fn combine(self, spatial: f64, range: f64) -> f64 {
        match self {
            CombineMode::Add => spatial + range,
            CombineMode::Multiply => spatial * range,
        }
    }
}

impl std::str::FromStr for CombineMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "add" => Ok(CombineMode::Add),
            "multiply" => Ok(CombineMode::Multiply),
            other => Err(format!("unknown combine mode '{other}' (expected add or multiply)")),
        }
    }
}

/// `exp(−‖p − p′‖² / (2σ²))`.
pub fn spatial_kernel(p: (f64, f64), p_prime: (f64, f64), sigma: f64) -> f64 {
    let d2 = (p.0 - p_prime.0).powi(2) + (p.1 - p_prime.1).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EchoUpsamplerConfig {
    /// Channels of the low-res input; the output has half as many.
    pub channels: usize,
    /// Channels of the guide feature map.
    pub ref_channels: usize,
    pub embed_dim: usize,
    pub window_radius: usize,
    pub combine_mode: CombineMode,
}

impl EchoUpsamplerConfig {
    pub fn new(channels: usize, ref_channels: usize) -> Self {
        EchoUpsamplerConfig {
            channels,
            ref_channels,
            embed_dim: DEFAULT_EMBED_DIM,
            window_radius: DEFAULT_WINDOW_RADIUS,
            combine_mode: CombineMode::Add,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_radius < 1 {
            return Err(TensorError::Config("window radius must be at least 1".into()));
        }
        if self.embed_dim < 1 {
            return Err(TensorError::Config("embedding width must be at least 1".into()));
        }
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(TensorError::Config(format!(
                "upsampler input channels must be even, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct EchoUpsampler {
    pub config: EchoUpsamplerConfig,
    pub log_sigma_spatial: Tensor,
    pub log_sigma_range: Tensor,
    pub mlp1: Conv2d,
    pub mlp2: Conv2d,
    pub reduce: Conv2d,
}

/// Low-res geometry shared by the fused op and its adjoint.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    embed: usize,
    low_h: usize,
    low_w: usize,
    radius: usize,
    mode: CombineMode,
}

impl Geometry {
    fn high(&self) -> (usize, usize) {
        (2 * self.low_h, 2 * self.low_w)
    }

    /// Window members of high-res pixel (y, x) as low-res (py, px).
    fn window(&self, y: usize, x: usize) -> impl Iterator<Item = (usize, usize)> {
        let r = self.radius;
        let (cy, cx) = (y / 2, x / 2);
        let (h, w) = (self.low_h, self.low_w);
        let ys = cy.saturating_sub(r)..(cy + r + 1).min(h);
        let xs = cx.saturating_sub(r)..(cx + r + 1).min(w);
        ys.flat_map(move |py| xs.clone().map(move |px| (py, px)))
    }
}

/// Per-member kernel terms, recomputed identically in forward and backward.
struct Member {
    low: usize,
    high: usize,
    spatial: f64,
    range: f64,
    weight: f64,
    dist2: f64,
    emb_dist2: f64,
}

fn members(
    g: &Geometry,
    emb: &[f64],
    y: usize,
    x: usize,
    sigma_s: f64,
    sigma_r: f64,
    out: &mut Vec<Member>,
) {
    out.clear();
    let (hh, hw) = g.high();
    let hn = hh * hw;
    let p = y * hw + x;
    for (py, px) in g.window(y, x) {
        let dy = y as f64 / 2.0 - py as f64;
        let dx = x as f64 / 2.0 - px as f64;
        let dist2 = dy * dy + dx * dx;
        let q = (2 * py) * hw + 2 * px;
        let emb_dist2: f64 = (0..g.embed)
            .map(|e| {
                let d = emb[e * hn + p] - emb[e * hn + q];
                d * d
            })
            .sum();
        let spatial = (-dist2 / (2.0 * sigma_s * sigma_s)).exp();
        let range = (-emb_dist2 / (2.0 * sigma_r * sigma_r)).exp();
        out.push(Member {
            low: py * g.low_w + px,
            high: q,
            spatial,
            range,
            weight: g.mode.combine(spatial, range),
            dist2,
            emb_dist2,
        });
    }
}

/// Fused, differentiable bilateral aggregation (channel count preserved).
fn bilateral_aggregate(
    f_down: &Tensor,
    emb: &Tensor,
    log_sigma_s: &Tensor,
    log_sigma_r: &Tensor,
    g: Geometry,
) -> Result<Tensor> {
    let (hh, hw) = g.high();
    let hn = hh * hw;
    let ln = g.low_h * g.low_w;
    let mut out = vec![0.0; g.channels * hn];
    {
        let xd = f_down.data();
        let ed = emb.data();
        let (ss, sr) = (log_sigma_s.item().exp(), log_sigma_r.item().exp());
        let mut ms = Vec::new();
        for y in 0..hh {
            for x in 0..hw {
                members(&g, &ed, y, x, ss, sr, &mut ms);
                let total: f64 = ms.iter().map(|m| m.weight).sum();
                if !(total >= MIN_WEIGHT_SUM) {
                    return Err(TensorError::Config(format!(
                        "echo upsampler weight sum {total:e} at ({y}, {x}) below {MIN_WEIGHT_SUM:e}"
                    )));
                }
                for c in 0..g.channels {
                    let acc: f64 = ms.iter().map(|m| m.weight * xd[c * ln + m.low]).sum();
                    out[c * hn + y * hw + x] = acc / total;
                }
            }
        }
    }
    Tensor::from_op(
        "echo_aggregate",
        &[g.channels, hh, hw],
        out,
        vec![f_down.clone(), emb.clone(), log_sigma_s.clone(), log_sigma_r.clone()],
        Box::new(move |inputs, gout, outd| {
            let xd = inputs[0].data();
            let ed = inputs[1].data();
            let (ss, sr) = (inputs[2].item().exp(), inputs[3].item().exp());
            let mut gx = vec![0.0; xd.len()];
            let mut ge = vec![0.0; ed.len()];
            let mut gls = 0.0;
            let mut glr = 0.0;
            let mut ms = Vec::new();
            for y in 0..hh {
                for x in 0..hw {
                    let p = y * hw + x;
                    members(&g, &ed, y, x, ss, sr, &mut ms);
                    let total: f64 = ms.iter().map(|m| m.weight).sum();
                    for m in &ms {
                        let mut dw = 0.0;
                        for c in 0..g.channels {
                            let go = gout[c * hn + p];
                            dw += go * (xd[c * ln + m.low] - outd[c * hn + p]);
                            gx[c * ln + m.low] += go * m.weight / total;
                        }
                        dw /= total;
                        let (d_spatial, d_range) = match g.mode {
                            CombineMode::Add => (dw, dw),
                            CombineMode::Multiply => (dw * m.range, dw * m.spatial),
                        };
                        gls += d_spatial * m.spatial * m.dist2 / (ss * ss);
                        glr += d_range * m.range * m.emb_dist2 / (sr * sr);
                        let coef = d_range * m.range / (sr * sr);
                        if coef != 0.0 {
                            for e in 0..g.embed {
                                let diff = ed[e * hn + p] - ed[e * hn + m.high];
                                ge[e * hn + p] -= coef * diff;
                                ge[e * hn + m.high] += coef * diff;
                            }
                        }
                    }
                }
            }
            vec![Some(gx), Some(ge), Some(vec![gls]), Some(vec![glr])]
        }),
    )
}

impl EchoUpsampler {
    pub fn new(init: &mut ParamInit, config: EchoUpsamplerConfig) -> Result<Self> {
        config.validate()?;
        let (c, cr, e) = (config.channels, config.ref_channels, config.embed_dim);
        Ok(EchoUpsampler {
            log_sigma_spatial: init.constant(&[1], 0.0),
            log_sigma_range: init.constant(&[1], 0.0),
            mlp1: Conv2d::pointwise(init, cr, cr, true),
            mlp2: Conv2d::pointwise(init, cr, e, true),
            reduce: Conv2d::pointwise(init, c, c / 2, true),
            config,
        })
    }

    pub fn sigma_spatial(&self) -> f64 {
        self.log_sigma_spatial.item().exp()
    }

    pub fn sigma_range(&self) -> f64 {
        self.log_sigma_range.item().exp()
    }

    /// Per-pixel range embedding of the guide: `mlp2(gelu(mlp1(f_ref)))`.
    pub fn embed(&self, f_ref: &Tensor) -> Result<Tensor> {
        self.mlp2.forward(&self.mlp1.forward(f_ref)?.gelu())
    }

    /// Range kernel between high-res pixel `p` and low-res member `p_prime`.
    pub fn range_kernel(&self, f_ref: &Tensor, p: (usize, usize), p_prime: (usize, usize)) -> Result<f64> {
        let emb = self.embed(f_ref)?;
        let (_, h, w) = match *emb.shape() {
            [e, h, w] => (e, h, w),
            _ => unreachable!("embedding is rank 3"),
        };
        let q = (2 * p_prime.0, 2 * p_prime.1);
        if p.0 >= h || p.1 >= w || q.0 >= h || q.1 >= w {
            return Err(TensorError::Config(format!("pixel {p:?} or {q:?} outside {h}x{w}")));
        }
        let e = emb.data();
        let n = h * w;
        let d2: f64 = (0..self.config.embed_dim)
            .map(|k| (e[k * n + p.0 * w + p.1] - e[k * n + q.0 * w + q.1]).powi(2))
            .sum();
        let s = self.sigma_range();
        Ok((-d2 / (2.0 * s * s)).exp())
    }

    fn geometry(&self, f_down: &Tensor, f_ref: &Tensor) -> Result<Geometry> {
        let err = || TensorError::Shape {
            op: "echo_upsample",
            lhs: f_down.shape().to_vec(),
            rhs: f_ref.shape().to_vec(),
        };
        match (f_down.shape(), f_ref.shape()) {
            (&[c, h, w], &[cr, hh, hw])
                if c == self.config.channels
                    && cr == self.config.ref_channels
                    && hh == 2 * h
                    && hw == 2 * w =>
            {
                Ok(Geometry {
                    channels: c,
                    embed: self.config.embed_dim,
                    low_h: h,
                    low_w: w,
                    radius: self.config.window_radius,
                    mode: self.config.combine_mode,
                })
            }
            _ => Err(err()),
        }
    }

    /// Normalized joint-bilateral aggregation before channel reduction:
    /// `[C, H/2, W/2] → [C, H, W]`.
    pub fn aggregate(&self, f_down: &Tensor, f_ref: &Tensor) -> Result<Tensor> {
        let geom = self.geometry(f_down, f_ref)?;
        let emb = self.embed(f_ref)?;
        bilateral_aggregate(f_down, &emb, &self.log_sigma_spatial, &self.log_sigma_range, geom)
    }

    /// `[C, H/2, W/2]` guided by `[C′, H, W]` → `[C/2, H, W]`.
    pub fn forward(&self, f_down: &Tensor, f_ref: &Tensor) -> Result<Tensor> {
        self.reduce.forward(&self.aggregate(f_down, f_ref)?)
    }
}

impl Parameterized for EchoUpsampler {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "log_sigma_spatial"), self.log_sigma_spatial.clone()));
        out.push((join(prefix, "log_sigma_range"), self.log_sigma_range.clone()));
        self.mlp1.collect_params(&join(prefix, "mlp1"), out);
        self.mlp2.collect_params(&join(prefix, "mlp2"), out);
        self.reduce.collect_params(&join(prefix, "reduce"), out);
    }
}

/// Strided 3×3 convolution halving the extents and doubling the channels.
#[derive(Debug)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new(init: &mut ParamInit, channels: usize) -> Self {
        Downsample {
            conv: Conv2d::new(init, channels, 2 * channels, 3, Conv2dOptions::new(2, 1, 1), false),
        }
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        match *f.shape() {
            [_, h, w] if h % 2 == 0 && w % 2 == 0 => self.conv.forward(f),
            _ => Err(TensorError::Config(format!(
                "downsampling needs even extents, got {:?}; pad the input first",
                f.shape()
            ))),
        }
    }
}

impl Parameterized for Downsample {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv.collect_params(&join(prefix, "conv"), out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpsamplerKind {
    /// Echo upsampler.
    #[default]
    Eu,
    /// 1×1 conv then pixel shuffle.
    Ps,
    /// Stride-2 transposed convolution.
    Tc,
}

impl std::str::FromStr for UpsamplerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "eu" => Ok(UpsamplerKind::Eu),
            "ps" => Ok(UpsamplerKind::Ps),
            "tc" => Ok(UpsamplerKind::Tc),
            other => Err(format!("unknown upsampler kind '{other}' (expected EU, PS or TC)")),
        }
    }
}

/// A 2× upsampler halving the channel count.
#[derive(Debug)]
pub enum Upsampler {
    Echo(EchoUpsampler),
    PixelShuffle { conv: Conv2d },
    Transposed { weight: Tensor, bias: Tensor },
}

impl Upsampler {
    pub fn new(init: &mut ParamInit, kind: UpsamplerKind, config: EchoUpsamplerConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(match kind {
            UpsamplerKind::Eu => Upsampler::Echo(EchoUpsampler::new(init, config)?),
            UpsamplerKind::Ps => Upsampler::PixelShuffle {
                conv: Conv2d::pointwise(init, c, 2 * c, true),
            },
            UpsamplerKind::Tc => Upsampler::Transposed {
                weight: init.uniform(&[c, c / 2, 2, 2], c * 4),
                bias: init.constant(&[c / 2], 0.0),
            },
        })
    }

    pub fn kind(&self) -> UpsamplerKind {
        match self {
            Upsampler::Echo(_) => UpsamplerKind::Eu,
            Upsampler::PixelShuffle { .. } => UpsamplerKind::Ps,
            Upsampler::Transposed { .. } => UpsamplerKind::Tc,
        }
    }

    /// `f_ref` is only consulted by the echo variant.
    pub fn forward(&self, f_down: &Tensor, f_ref: &Tensor) -> Result<Tensor> {
        match self {
            Upsampler::Echo(eu) => eu.forward(f_down, f_ref),
            Upsampler::PixelShuffle { conv } => conv.forward(f_down)?.pixel_shuffle(2),
            Upsampler::Transposed { weight, bias } => f_down.conv_transpose2d(weight, Some(bias), 2),
        }
    }
}

impl Parameterized for Upsampler {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        match self {
            Upsampler::Echo(eu) => eu.collect_params(prefix, out),
            Upsampler::PixelShuffle { conv } => conv.collect_params(&join(prefix, "conv"), out),
            Upsampler::Transposed { weight, bias } => {
                out.push((join(prefix, "weight"), weight.clone()));
                out.push((join(prefix, "bias"), bias.clone()));
            }
        }
    }
}

/// Brute-force reference for [`EchoUpsampler`]: explicit loops over every
/// high-res pixel and window member, with its own MLP, GELU and projection.
pub mod oracle {
    use super::{CombineMode, EchoUpsampler};
    use crate::tensor::{Result, Tensor, TensorError};

    fn gelu(x: f64) -> f64 {
        let k = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn pointwise(w: &[f64], b: &[f64], c_in: usize, c_out: usize, v: &[f64]) -> Vec<f64> {
        (0..c_out)
            .map(|o| b[o] + (0..c_in).map(|i| w[o * c_in + i] * v[i]).sum::<f64>())
            .collect()
    }

    /// Pre-reduction output `[C, H, W]`.
    pub fn jbu_aggregate(f_down: &Tensor, f_ref: &Tensor, up: &EchoUpsampler) -> Result<Vec<f64>> {
        let cfg = &up.config;
        let (c, h, w) = match *f_down.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(TensorError::Config("f_down must be rank 3".into())),
        };
        let (cr, hh, hw) = match *f_ref.shape() {
            [cr, hh, hw] => (cr, hh, hw),
            _ => return Err(TensorError::Config("f_ref must be rank 3".into())),
        };
        if hh != 2 * h || hw != 2 * w || c != cfg.channels || cr != cfg.ref_channels {
            return Err(TensorError::Shape {
                op: "jbu_oracle",
                lhs: f_down.shape().to_vec(),
                rhs: f_ref.shape().to_vec(),
            });
        }
        let xd = f_down.to_vec();
        let rd = f_ref.to_vec();
        let (w1, b1) = (up.mlp1.weight.to_vec(), up.mlp1.bias.as_ref().unwrap().to_vec());
        let (w2, b2) = (up.mlp2.weight.to_vec(), up.mlp2.bias.as_ref().unwrap().to_vec());
        let e = cfg.embed_dim;
        let embed_at = |y: usize, x: usize| -> Vec<f64> {
            let v: Vec<f64> = (0..cr).map(|ch| rd[(ch * hh + y) * hw + x]).collect();
            let hid: Vec<f64> = pointwise(&w1, &b1, cr, cr, &v).into_iter().map(gelu).collect();
            pointwise(&w2, &b2, cr, e, &hid)
        };
        let ss = up.log_sigma_spatial.item().exp();
        let sr = up.log_sigma_range.item().exp();
        let r = cfg.window_radius as i64;
        let mut out = vec![0.0; c * hh * hw];
        for y in 0..hh {
            for x in 0..hw {
                let ep = embed_at(y, x);
                let mut num = vec![0.0; c];
                let mut den = 0.0;
                let (cy, cx) = ((y / 2) as i64, (x / 2) as i64);
                for py in cy - r..=cy + r {
                    for px in cx - r..=cx + r {
                        if py < 0 || px < 0 || py >= h as i64 || px >= w as i64 {
                            continue;
                        }
                        let (py, px) = (py as usize, px as usize);
                        let ds = (y as f64 * 0.5 - py as f64).powi(2) + (x as f64 * 0.5 - px as f64).powi(2);
                        let f = (-ds / (2.0 * ss * ss)).exp();
                        let eq = embed_at(2 * py, 2 * px);
                        let dr: f64 = ep.iter().zip(&eq).map(|(a, b)| (a - b).powi(2)).sum();
                        let g = (-dr / (2.0 * sr * sr)).exp();
                        let wgt = match cfg.combine_mode {
                            CombineMode::Add => f + g,
                            CombineMode::Multiply => f * g,
                        };
                        den += wgt;
                        for (ch, n) in num.iter_mut().enumerate() {
                            *n += wgt * xd[(ch * h + py) * w + px];
                        }
                    }
                }
                for ch in 0..c {
                    out[(ch * hh + y) * hw + x] = num[ch] / den;
                }
            }
        }
        Ok(out)
    }

    /// Full output `[C/2, H, W]`, including the channel reduction.
    pub fn jbu_oracle(f_down: &Tensor, f_ref: &Tensor, up: &EchoUpsampler) -> Result<Vec<f64>> {
        let agg = jbu_aggregate(f_down, f_ref, up)?;
        let c = up.config.channels;
        let n = agg.len() / c;
        let wr = up.reduce.weight.to_vec();
        let br = up.reduce.bias.as_ref().unwrap().to_vec();
        let mut out = vec![0.0; c / 2 * n];
        for o in 0..c / 2 {
            for pix in 0..n {
                let mut acc = br[o];
                for i in 0..c {
                    acc += wr[o * c + i] * agg[i * n + pix];
                }
                out[o * n + pix] = acc;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), false).unwrap()
    }

    fn upsampler(c: usize, cr: usize, seed: u64, mode: CombineMode, radius: usize) -> EchoUpsampler {
        let mut cfg = EchoUpsamplerConfig::new(c, cr);
        cfg.combine_mode = mode;
        cfg.window_radius = radius;
        EchoUpsampler::new(&mut ParamInit::new(seed, Precision::Wide), cfg).unwrap()
    }

    #[test]
    fn spatial_kernel_values() {
        assert_eq!(spatial_kernel((1.5, 2.0), (1.5, 2.0), 0.7), 1.0);
        let s = 0.8;
        // ‖p − p′‖² = 2σ²
        let off = (2.0f64).sqrt() * s;
        assert!((spatial_kernel((0.0, 0.0), (off, 0.0), s) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((spatial_kernel((0.0, 0.0), (off, 0.0), s) - 0.367_879).abs() < 1e-6);
        assert_eq!(
            spatial_kernel((0.3, 1.0), (2.0, -1.0), 1.3),
            spatial_kernel((2.0, -1.0), (0.3, 1.0), 1.3)
        );
    }

    #[test]
    fn range_kernel_constant_guide_is_one() {
        let up = upsampler(2, 3, 1, CombineMode::Add, 2);
        let f_ref = Tensor::new(&[3, 8, 8], vec![0.4; 192], false).unwrap();
        for (p, q) in [((0, 0), (1, 2)), ((7, 3), (3, 0)), ((5, 5), (2, 2))] {
            assert!((up.range_kernel(&f_ref, p, q).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn range_kernel_zero_mlp_is_one() {
        let up = upsampler(2, 3, 2, CombineMode::Add, 2);
        up.mlp1.zero_params();
        up.mlp2.zero_params();
        let f_ref = random(&[3, 8, 8], 3);
        assert_eq!(up.range_kernel(&f_ref, (1, 6), (2, 1)).unwrap(), 1.0);
    }

    #[test]
    fn range_kernel_direct_evaluation() {
        let up = upsampler(2, 2, 4, CombineMode::Add, 1);
        up.log_sigma_range.set_data(&[0.3]).unwrap();
        let f_ref = random(&[2, 4, 4], 5);
        let (p, q) = ((1, 2), (1, 0)); // high-res partner (2, 0)
        let w1 = up.mlp1.weight.to_vec();
        let b1 = up.mlp1.bias.as_ref().unwrap().to_vec();
        let w2 = up.mlp2.weight.to_vec();
        let b2 = up.mlp2.bias.as_ref().unwrap().to_vec();
        let r = f_ref.to_vec();
        let embed = |y: usize, x: usize| -> Vec<f64> {
            let v = [r[y * 4 + x], r[16 + y * 4 + x]];
            let hid: Vec<f64> = (0..2)
                .map(|o| crate::tensor::gelu_scalar(b1[o] + w1[o * 2] * v[0] + w1[o * 2 + 1] * v[1]))
                .collect();
            (0..8).map(|o| b2[o] + w2[o * 2] * hid[0] + w2[o * 2 + 1] * hid[1]).collect()
        };
        let (a, b) = (embed(1, 2), embed(2, 0));
        let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        let s = 0.3f64.exp();
        let want = (-d2 / (2.0 * s * s)).exp();
        assert!((up.range_kernel(&f_ref, p, q).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn constant_input_stays_constant() {
        for mode in [CombineMode::Add, CombineMode::Multiply] {
            let up = upsampler(4, 3, 6, mode, 2);
            let f_down = Tensor::new(&[4, 4, 4], vec![0.625; 64], false).unwrap();
            let y = up.aggregate(&f_down, &random(&[3, 8, 8], 7)).unwrap();
            assert_eq!(y.shape(), &[4, 8, 8]);
            assert!(y.to_vec().iter().all(|&v| (v - 0.625).abs() < 1e-14));
        }
    }

    #[test]
    fn add_mode_zero_mlp_is_shifted_gaussian() {
        // g ≡ 1, so W = f + 1
        let up = upsampler(2, 2, 8, CombineMode::Add, 1);
        up.mlp1.zero_params();
        up.mlp2.zero_params();
        let f_down = random(&[2, 3, 3], 9);
        let y = up.aggregate(&f_down, &random(&[2, 6, 6], 10)).unwrap().to_vec();
        let x = f_down.to_vec();
        let (yy, xx) = (3usize, 2usize); // centre (1, 1), fractional (1.5, 1.0)
        let mut num = 0.0;
        let mut den = 0.0;
        for py in 0..3 {
            for px in 0..3 {
                let f = spatial_kernel((1.5, 1.0), (py as f64, px as f64), 1.0);
                num += (f + 1.0) * x[py * 3 + px];
                den += f + 1.0;
            }
        }
        assert!((y[yy * 6 + xx] - num / den).abs() < 1e-14);
    }

    #[test]
    fn shape_contract_and_errors() {
        let up = upsampler(4, 2, 11, CombineMode::Add, 2);
        let y = up.forward(&random(&[4, 3, 5], 1), &random(&[2, 6, 10], 2)).unwrap();
        assert_eq!(y.shape(), &[2, 6, 10]);
        assert!(up.forward(&random(&[4, 3, 5], 1), &random(&[2, 6, 9], 2)).is_err());
        let mut cfg = EchoUpsamplerConfig::new(4, 2);
        cfg.window_radius = 0;
        assert!(cfg.validate().is_err());
        cfg.window_radius = 1;
        cfg.embed_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_pixel_low_res() {
        let up = upsampler(2, 2, 12, CombineMode::Multiply, 1);
        let f_down = Tensor::new(&[2, 1, 1], vec![0.3, -0.8], false).unwrap();
        let y = up.aggregate(&f_down, &random(&[2, 2, 2], 13)).unwrap().to_vec();
        assert!(y[..4].iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(y[4..].iter().all(|&v| (v + 0.8).abs() < 1e-15));
    }

    #[test]
    fn matches_oracle_small() {
        let up = upsampler(2, 2, 14, CombineMode::Add, 2);
        let f_down = random(&[2, 4, 4], 15);
        let f_ref = random(&[2, 8, 8], 16);
        let got = up.forward(&f_down, &f_ref).unwrap().to_vec();
        let want = oracle::jbu_oracle(&f_down, &f_ref, &up).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn downsample_shapes_and_subsampling() {
        let mut init = ParamInit::new(17, Precision::Wide);
        let d = Downsample::new(&mut init, 2);
        let x = random(&[2, 6, 8], 18);
        assert_eq!(d.forward(&x).unwrap().shape(), &[4, 3, 4]);
        assert!(d.forward(&random(&[2, 5, 8], 1)).is_err());
        d.zero_params();
        assert!(d.forward(&x).unwrap().to_vec().iter().all(|&v| v == 0.0));
        // centre tap 1 on matching channels
        d.conv.weight.update_data(|w| {
            for c in 0..2 {
                w[((c * 2 + c) * 3 + 1) * 3 + 1] = 1.0;
            }
        });
        let y = d.forward(&x).unwrap().to_vec();
        let xv = x.to_vec();
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    assert_eq!(y[(c * 3 + i) * 4 + j], xv[(c * 6 + 2 * i) * 8 + 2 * j]);
                }
            }
        }
        assert!(y[24..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ablation_upsamplers_share_shape() {
        let f_down = random(&[8, 2, 2], 19);
        let f_ref = random(&[4, 4, 4], 20);
        for kind in [UpsamplerKind::Eu, UpsamplerKind::Ps, UpsamplerKind::Tc] {
            let up = Upsampler::new(&mut ParamInit::new(21, Precision::Wide), kind, EchoUpsamplerConfig::new(8, 4)).unwrap();
            assert_eq!(up.forward(&f_down, &f_ref).unwrap().shape(), &[4, 4, 4], "{kind:?}");
        }
    }
}
