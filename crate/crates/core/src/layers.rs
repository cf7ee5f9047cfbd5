//! Parameter containers and the small layers the network is assembled from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::conv::Conv2dOptions;
use crate::tensor::{Precision, Result, Tensor};

pub type NamedParams = Vec<(String, Tensor)>;

/// Anything owning learnable tensors.
pub trait Parameterized {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams);

    fn named_params(&self) -> NamedParams {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    /// Sets every parameter to zero.
    fn zero_params(&self) {
        for (_, p) in self.named_params() {
            p.update_data(|d| d.fill(0.0));
        }
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded parameter factory.
pub struct ParamInit {
    rng: ChaCha8Rng,
    precision: Precision,
}

impl ParamInit {
    pub fn new(seed: u64, precision: Precision) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::with_precision(shape, data, true, self.precision).expect("valid parameter shape")
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::with_precision(shape, vec![value; n], true, self.precision)
            .expect("valid parameter shape")
    }
}

#[derive(Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    pub fn new(
        init: &mut ParamInit,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        opts: Conv2dOptions,
        bias: bool,
    ) -> Self {
        let fan_in = c_in / opts.groups * kernel * kernel;
        let weight = init.uniform(&[c_out, c_in / opts.groups, kernel, kernel], fan_in);
        let bias = bias.then(|| init.constant(&[c_out], 0.0));
        Conv2d { weight, bias, opts }
    }

    pub fn pointwise(init: &mut ParamInit, c_in: usize, c_out: usize, bias: bool) -> Self {
        Conv2d::new(init, c_in, c_out, 1, Conv2dOptions::default(), bias)
    }

    /// 3×3 depthwise, padding 1.
    pub fn depthwise(init: &mut ParamInit, channels: usize) -> Self {
        Conv2d::new(init, channels, channels, 3, Conv2dOptions::new(1, 1, channels), false)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.opts)
    }
}

impl Parameterized for Conv2d {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Dense layer acting on a vector `[in]`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut ParamInit, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: init.uniform(&[d_out, d_in], d_in),
            bias: init.constant(&[d_out], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d_in = x.numel();
        let y = self.weight.matmul(&x.reshape(&[d_in, 1])?)?;
        y.reshape(&[self.bias.numel()])?.add(&self.bias)
    }
}

impl Parameterized for Linear {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// Layer normalization across channels at every pixel of a `[C, H, W]` map.
#[derive(Debug)]
pub struct ChannelNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl ChannelNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut ParamInit, channels: usize) -> Self {
        ChannelNorm {
            gamma: init.constant(&[channels], 1.0),
            beta: init.constant(&[channels], 0.0),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, 0, self.eps)
    }
}

impl Parameterized for ChannelNorm {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}
