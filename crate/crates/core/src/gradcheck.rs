//! Central-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{MixAttentionBlock, MixAttentionConfig};
use crate::layers::{ParamInit, Parameterized};
use crate::tensor::{Conv2dOptions, Graph, Precision, Result, Tensor, TensorError};
use crate::upsampler::{CombineMode, EchoUpsampler, EchoUpsamplerConfig};

/// Compares the autodiff gradient of a scalar function of `params` against
/// central differences. Returns the maximum over all coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
///
/// `func` is re-evaluated with each parameter perturbed in place, so it must
/// read the parameters afresh on every call. Existing gradients on `params`
/// are cleared.
pub fn grad_check_params(
    func: impl Fn() -> Result<Tensor>,
    params: &[Tensor],
    step: f64,
) -> Result<f64> {
    for p in params {
        p.zero_grad();
    }
    let out = func()?;
    if out.numel() != 1 {
        return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
    }
    out.backward()?;
    let mut worst: f64 = 0.0;
    let mut offset = 0;
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + step;
            p.set_data(&probe)?;
            let plus = func()?.item();
            probe[i] = base[i] - step;
            p.set_data(&probe)?;
            let minus = func()?.item();
            p.set_data(&base)?;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() || !analytic[i].is_finite() {
                return Err(TensorError::NonFinite { index: offset + i });
            }
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        offset += base.len();
        p.zero_grad();
    }
    Ok(worst)
}

/// Gradient check of `func` with respect to a single input initialised to `x`.
pub fn grad_check(func: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, step: f64) -> Result<f64> {
    let leaf = Tensor::with_precision(x.shape(), x.to_vec(), true, x.precision())?;
    grad_check_params(|| func(&leaf), std::slice::from_ref(&leaf), step)
}

/// Every recorded op kind the tensor core and upsampler can produce.
pub const REGISTERED_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "sigmoid",
    "gelu",
    "exp",
    "square",
    "neg",
    "abs",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "sum",
    "mean",
    "conv2d",
    "conv_transpose2d",
    "pixel_shuffle",
    "avg_pool",
    "softmax",
    "layer_norm",
    "adaptive_avg_pool",
    "echo_aggregate",
];

/// Maximum relative error accepted for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Maximum relative error accepted for composed blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_STEP: f64 = 1e-6;

type Builder = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// A named scalar function of some leaf tensors, checked against central
/// differences.
pub struct GradCase {
    pub name: String,
    pub threshold: f64,
    pub inputs: Vec<Tensor>,
    build: Builder,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        threshold: f64,
        inputs: Vec<Tensor>,
        build: impl Fn(&[Tensor]) -> Result<Tensor> + 'static,
    ) -> Self {
        GradCase {
            name: name.into(),
            threshold,
            inputs,
            build: Box::new(build),
        }
    }

    pub fn evaluate(&self) -> Result<Tensor> {
        (self.build)(&self.inputs)
    }

    pub fn max_error(&self) -> Result<f64> {
        grad_check_params(|| self.evaluate(), &self.inputs, DEFAULT_STEP)
    }

    /// Op kinds recorded while evaluating the case.
    pub fn op_kinds(&self) -> Result<Vec<&'static str>> {
        Ok(Graph::from_root(&self.evaluate()?).kinds())
    }
}

/// Reduces `t` to a scalar with fixed pseudo-random weights, so that no
/// gradient entry is trivially symmetric.
pub fn weighted_sum(t: &Tensor, seed: u64) -> Result<Tensor> {
    let w = random_tensor(t.shape(), seed, -1.0, 1.0, false);
    Ok(t.mul(&w)?.sum())
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64, requires_grad: bool) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect(), requires_grad)
        .expect("valid shape")
}

fn leaf(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, seed, -1.0, 1.0, true)
}

fn op_case(
    name: &str,
    inputs: Vec<Tensor>,
    f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static,
) -> GradCase {
    let seed = name.bytes().map(u64::from).sum::<u64>();
    GradCase::new(name, OP_TOLERANCE, inputs, move |x| weighted_sum(&f(x)?, seed))
}

/// The standard suite: every registered op, then the composed blocks.
pub fn standard_suite() -> Vec<GradCase> {
    let mut cases = vec![
        op_case("add", vec![leaf(&[4, 3], 1), leaf(&[3], 2)], |x| x[0].add(&x[1])),
        op_case("sub", vec![leaf(&[2, 3], 3), leaf(&[2, 1], 4)], |x| x[0].sub(&x[1])),
        op_case("mul", vec![leaf(&[4, 2, 2], 5), leaf(&[4, 1, 1], 6)], |x| x[0].mul(&x[1])),
        op_case("sigmoid", vec![leaf(&[5], 7)], |x| Ok(x[0].scale(3.0).sigmoid())),
        op_case("gelu", vec![leaf(&[6], 8)], |x| Ok(x[0].scale(2.0).gelu())),
        op_case("exp", vec![leaf(&[5], 9)], |x| Ok(x[0].exp())),
        op_case("square", vec![leaf(&[5], 10)], |x| x[0].square()),
        op_case("neg", vec![leaf(&[3], 11)], |x| Ok(x[0].neg())),
        op_case("abs", vec![random_tensor(&[6], 12, 0.1, 1.0, true)], |x| {
            Ok(x[0].add_scalar(-0.55).scale(-1.0).abs())
        }),
        op_case("scale", vec![leaf(&[3], 13)], |x| Ok(x[0].scale(-2.5))),
        op_case("add_scalar", vec![leaf(&[3], 14)], |x| Ok(x[0].add_scalar(0.75).square()?)),
        op_case("matmul", vec![leaf(&[3, 4], 15), leaf(&[4, 2], 16)], |x| x[0].matmul(&x[1])),
        op_case("matmul_batched", vec![leaf(&[2, 3, 4], 17), leaf(&[2, 4, 3], 18)], |x| {
            x[0].matmul(&x[1])
        }),
        op_case("transpose", vec![leaf(&[2, 3, 4], 19)], |x| x[0].transpose()),
        op_case("reshape", vec![leaf(&[2, 6], 20)], |x| x[0].reshape(&[3, 4])),
        op_case("narrow", vec![leaf(&[4, 3], 21)], |x| x[0].narrow(0, 1, 2)),
        op_case("concat", vec![leaf(&[2, 3], 22), leaf(&[1, 3], 23)], |x| {
            Tensor::concat(&[x[0].clone(), x[1].clone()], 0)
        }),
        op_case("sum", vec![leaf(&[2, 3], 24)], |x| Ok(x[0].square()?.sum())),
        op_case("mean", vec![leaf(&[2, 3], 25)], |x| Ok(x[0].square()?.mean())),
        op_case(
            "conv2d",
            vec![leaf(&[4, 8, 8], 26), leaf(&[4, 2, 3, 3], 27), leaf(&[4], 28)],
            |x| x[0].conv2d(&x[1], Some(&x[2]), Conv2dOptions::new(2, 1, 2)),
        ),
        op_case("conv2d_depthwise", vec![leaf(&[3, 5, 5], 29), leaf(&[3, 1, 3, 3], 30)], |x| {
            x[0].conv2d(&x[1], None, Conv2dOptions::new(1, 1, 3))
        }),
        op_case(
            "conv_transpose2d",
            vec![leaf(&[4, 3, 3], 31), leaf(&[4, 2, 2, 2], 32), leaf(&[2], 33)],
            |x| x[0].conv_transpose2d(&x[1], Some(&x[2]), 2),
        ),
        op_case("pixel_shuffle", vec![leaf(&[8, 2, 3], 34)], |x| x[0].pixel_shuffle(2)),
        op_case("avg_pool", vec![leaf(&[2, 4, 6], 35)], |x| x[0].avg_pool(2)),
        op_case("softmax", vec![leaf(&[3, 4], 36)], |x| x[0].scale(2.0).softmax(1)),
        op_case(
            "layer_norm",
            vec![leaf(&[4, 3, 3], 37), leaf(&[4], 38), leaf(&[4], 39)],
            |x| x[0].layer_norm(&x[1], &x[2], 0, 1e-5),
        ),
        op_case("adaptive_avg_pool", vec![leaf(&[3, 4, 4], 40)], |x| x[0].adaptive_avg_pool()),
    ];

    for (mode, tag) in [(CombineMode::Add, "add"), (CombineMode::Multiply, "multiply")] {
        let mut cfg = EchoUpsamplerConfig::new(2, 2);
        cfg.combine_mode = mode;
        cfg.window_radius = 1;
        let up = EchoUpsampler::new(&mut ParamInit::new(41, Precision::Wide), cfg).expect("valid config");
        up.log_sigma_spatial.set_data(&[-0.3]).expect("scalar");
        up.log_sigma_range.set_data(&[0.2]).expect("scalar");
        let mut inputs = vec![leaf(&[2, 3, 3], 42), leaf(&[2, 6, 6], 43)];
        inputs.extend(up.params());
        cases.push(GradCase::new(format!("echo_aggregate_{tag}"), OP_TOLERANCE, inputs, move |x| {
            weighted_sum(&up.aggregate(&x[0], &x[1])?, 44)
        }));
    }

    let block_cfg = MixAttentionConfig::new(4, 2);
    let block = MixAttentionBlock::new(&mut ParamInit::new(45, Precision::Wide), block_cfg).expect("valid config");
    let mut inputs = vec![leaf(&[4, 8, 8], 46)];
    inputs.extend(block.params());
    cases.push(GradCase::new("mix_attention_block", BLOCK_TOLERANCE, inputs, move |x| {
        weighted_sum(&block.forward(&x[0])?, 47)
    }));

    let up = EchoUpsampler::new(&mut ParamInit::new(48, Precision::Wide), EchoUpsamplerConfig::new(4, 4))
        .expect("valid config");
    let mut inputs = vec![leaf(&[4, 4, 4], 49), leaf(&[4, 8, 8], 50)];
    inputs.extend(up.params());
    cases.push(GradCase::new("echo_upsampler", BLOCK_TOLERANCE, inputs, move |x| {
        weighted_sum(&up.forward(&x[0], &x[1])?, 51)
    }));
    cases
}

/// Outcome of one case.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: String,
    pub threshold: f64,
    pub max_error: std::result::Result<f64, TensorError>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        matches!(self.max_error, Ok(e) if e < self.threshold)
    }
}

pub fn run_suite(cases: &[GradCase]) -> Vec<CaseReport> {
    cases
        .iter()
        .map(|c| CaseReport {
            name: c.name.clone(),
            threshold: c.threshold,
            max_error: c.max_error(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(&[6], (0..6).map(|_| rng.random_range(-3.0..3.0)).collect(), false).unwrap();
        let err = grad_check(|x| Ok(x.square()?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0], false).unwrap();
        let err = grad_check(|x| Ok(x.scale(0.0).sum().add_scalar(4.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::new(&[4], vec![0.0; 4], true).unwrap();
        x.sigmoid().sum().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| (g - 0.25).abs() < 1e-15));
        let err = grad_check(|x| Ok(x.sigmoid().sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let x = Tensor::new(&[2], vec![1.0, 709.7], false).unwrap();
        let err = grad_check(|x| Ok(x.narrow(0, 1, 1)?.exp().sum()), &x, 0.1).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { index: 1 });
    }
}

#[cfg(test)]
mod suite_tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn suite_covers_registered_ops() {
        let mut seen = BTreeSet::new();
        for c in standard_suite() {
            seen.extend(c.op_kinds().unwrap());
        }
        for op in REGISTERED_OPS {
            assert!(seen.contains(op), "no case records {op}");
        }
    }
}
