use super::{Result, Tensor, TensorError};

/// (outer, extent, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

impl Tensor {
    /// Max-shifted softmax over `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis(self.shape(), axis)?;
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..n {
                        let e = (x[at(j)] - max).exp();
                        out[at(j)] = e;
                        total += e;
                    }
                    for j in 0..n {
                        out[at(j)] /= total;
                    }
                }
            }
        }
        Tensor::from_op(
            "softmax",
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |_, gout, y| {
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            g[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Normalizes every slice along `axis` to zero mean and unit variance
    /// (biased variance plus `eps`), then applies `gamma`, `beta` indexed by
    /// position along `axis`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
        let (outer, n, inner) = split_axis(self.shape(), axis)?;
        for p in [gamma, beta] {
            if p.shape() != [n] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let slices = outer * inner;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; slices];
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            let gm = gamma.data();
            let bt = beta.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mean = (0..n).map(|j| x[at(j)]).sum::<f64>() / n as f64;
                    let var = (0..n).map(|j| (x[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                    let istd = 1.0 / (var + eps).sqrt();
                    inv_std[o * inner + i] = istd;
                    for j in 0..n {
                        let xh = (x[at(j)] - mean) * istd;
                        xhat[at(j)] = xh;
                        out[at(j)] = xh * gm[j] + bt[j];
                    }
                }
            }
        }
        Tensor::from_op(
            "layer_norm",
            self.shape(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |inputs, gout, _| {
                let gm = inputs[1].data();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let nf = n as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let istd = inv_std[o * inner + i];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let g = gout[at(j)];
                            ggamma[j] += g * xhat[at(j)];
                            gbeta[j] += g;
                            let d = g * gm[j];
                            sum_d += d;
                            sum_dx += d * xhat[at(j)];
                        }
                        for j in 0..n {
                            let d = gout[at(j)] * gm[j];
                            gx[at(j)] = istd / nf * (nf * d - sum_d - xhat[at(j)] * sum_dx);
                        }
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }),
        )
    }

    /// `[C, H, W] → [C]`: per-channel mean over all spatial positions.
    pub fn adaptive_avg_pool(&self) -> Result<Tensor> {
        let (c, hw) = match *self.shape() {
            [c, h, w] => (c, h * w),
            _ => {
                return Err(TensorError::Shape {
                    op: "adaptive_avg_pool",
                    lhs: self.shape().to_vec(),
                    rhs: vec![],
                })
            }
        };
        let out: Vec<f64> = {
            let x = self.data();
            (0..c)
                .map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect()
        };
        Tensor::from_op(
            "adaptive_avg_pool",
            &[c],
            out,
            vec![self.clone()],
            Box::new(move |_, gout, _| {
                let mut g = vec![0.0; c * hw];
                for ch in 0..c {
                    g[ch * hw..(ch + 1) * hw].fill(gout[ch] / hw as f64);
                }
                vec![Some(g)]
            }),
        )
    }
}
