use super::{numel, Result, Tensor, TensorError};

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_scalar_deriv(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Gelu,
    Exp,
    Square,
    Neg,
    Abs,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Exp => "exp",
            Unary::Square => "square",
            Unary::Neg => "neg",
            Unary::Abs => "abs",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid_scalar(x),
            Unary::Gelu => gelu_scalar(x),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Neg => -x,
            Unary::Abs => x.abs(),
        }
    }

    /// Derivative given the input and the already computed output.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Gelu => gelu_scalar_deriv(x),
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::Neg => -1.0,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Trailing-aligned broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each linear index of `out_shape`, the linear index into a tensor of
/// `in_shape` broadcast to it.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= in_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: Binary) -> Result<Tensor> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let out_shape =
            broadcast_shape(self.shape(), other.shape()).ok_or_else(|| TensorError::Shape {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })?;
        let same = self.shape() == other.shape();
        let (map_a, map_b) = if same {
            (None, None)
        } else {
            (
                Some(broadcast_map(self.shape(), &out_shape)),
                Some(broadcast_map(other.shape(), &out_shape)),
            )
        };
        let data = {
            let a = self.data();
            let b = other.data();
            let n = numel(&out_shape);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let ia = map_a.as_ref().map_or(i, |m| m[i]);
                let ib = map_b.as_ref().map_or(i, |m| m[i]);
                out.push(match op {
                    Binary::Add => a[ia] + b[ib],
                    Binary::Sub => a[ia] - b[ib],
                    Binary::Mul => a[ia] * b[ib],
                });
            }
            out
        };
        Tensor::from_op(
            name,
            &out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |inputs, gout, _| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let mut ga = a.requires_grad().then(|| vec![0.0; a.numel()]);
                let mut gb = b.requires_grad().then(|| vec![0.0; b.numel()]);
                let ad = a.data();
                let bd = b.data();
                for (i, &g) in gout.iter().enumerate() {
                    let ia = map_a.as_ref().map_or(i, |m| m[i]);
                    let ib = map_b.as_ref().map_or(i, |m| m[i]);
                    let (da, db) = match op {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (bd[ib], ad[ia]),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g * db;
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Mul)
    }

    pub fn unary(&self, op: Unary) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| op.eval(x)).collect();
        Tensor::from_op(
            op.name(),
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |inputs, gout, out| {
                let x = inputs[0].data();
                let g = gout
                    .iter()
                    .zip(x.iter().zip(out))
                    .map(|(g, (&x, &y))| g * op.deriv(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
        .expect("unary op preserves a valid shape")
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Unary::Sigmoid)
    }

    pub fn gelu(&self) -> Tensor {
        self.unary(Unary::Gelu)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Unary::Exp)
    }

    /// Returns `Result` for symmetry with the binary ops used alongside it.
    pub fn square(&self) -> Result<Tensor> {
        Ok(self.unary(Unary::Square))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Unary::Neg)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Unary::Abs)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x * factor).collect();
        Tensor::from_op(
            "scale",
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |_, gout, _| vec![Some(gout.iter().map(|g| g * factor).collect())]),
        )
        .expect("scale preserves a valid shape")
    }

    /// Adds a constant.
    pub fn add_scalar(&self, value: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x + value).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(|_, gout, _| vec![Some(gout.to_vec())]),
        )
        .expect("add_scalar preserves a valid shape")
    }
}
