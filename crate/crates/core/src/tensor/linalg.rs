use super::{numel, Result, Tensor, TensorError};

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a[m,k]^T`-free helper: out[m,n] += a[m,k] * b[n,k]^T
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                *o += av * gv;
            }
        }
    }
}

impl Tensor {
    /// Matrix product of `[M,K]·[K,N]`, or batched `[B,M,K]·[B,K,N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (batch, m, k, n) = match (self.shape(), other.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n),
            (&[b, m, k], &[b2, k2, n]) if k == k2 && b == b2 => (b, m, k, n),
            _ => return Err(err()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let a = self.data();
            let b = other.data();
            for bi in 0..batch {
                matmul_raw(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if self.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Tensor::from_op(
            "matmul",
            &shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |inputs, gout, _| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ad = a.data();
                let bd = b.data();
                let ga = a.requires_grad().then(|| {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        matmul_bt(
                            &gout[bi * m * n..(bi + 1) * m * n],
                            &bd[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        matmul_at(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &gout[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::Axis { axis: 1, rank });
        }
        let (r, c) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        let batch = self.numel() / (r * c);
        let perm = move |src: &[f64], dst: &mut [f64]| {
            for bi in 0..batch {
                let base = bi * r * c;
                for i in 0..r {
                    for j in 0..c {
                        dst[base + j * r + i] = src[base + i * c + j];
                    }
                }
            }
        };
        let mut out = vec![0.0; self.numel()];
        perm(&self.data(), &mut out);
        let mut shape = self.shape().to_vec();
        shape.swap(rank - 2, rank - 1);
        Tensor::from_op(
            "transpose",
            &shape,
            out,
            vec![self.clone()],
            Box::new(move |_, gout, _| {
                // inverse permutation: transpose of the transposed layout
                let mut g = vec![0.0; gout.len()];
                for bi in 0..batch {
                    let base = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            g[base + i * c + j] = gout[base + j * r + i];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|_, gout, _| vec![Some(gout.to_vec())]),
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::Config(format!(
                "narrow [{start}, {}) outside extent {extent}",
                start + len
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Tensor::from_op(
            "narrow",
            &shape,
            out,
            vec![self.clone()],
            Box::new(move |_, gout, _| {
                let mut g = vec![0.0; total];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&gout[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Config("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        for p in parts {
            let compatible = p.rank() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_extent: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total_extent * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let d = p.data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_extent;
        Tensor::from_op(
            "concat",
            &shape,
            out,
            parts.to_vec(),
            Box::new(move |inputs, gout, _| {
                let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.numel()]).collect();
                let mut pos = 0;
                for o in 0..outer {
                    for (g, &e) in grads.iter_mut().zip(&extents) {
                        g[o * e * inner..(o + 1) * e * inner]
                            .copy_from_slice(&gout[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            &[1],
            vec![s],
            vec![self.clone()],
            Box::new(move |_, gout, _| vec![Some(vec![gout[0]; n])]),
        )
        .expect("sum has a valid shape")
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(
            "mean",
            &[1],
            vec![s],
            vec![self.clone()],
            Box::new(move |_, gout, _| vec![Some(vec![gout[0] / n as f64; n])]),
        )
        .expect("mean has a valid shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec(), false).unwrap()
    }

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn identity_matmul() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i2.matmul(&m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn one_by_one_matmul() {
        assert_eq!(t(&[1, 1], &[2.0]).matmul(&t(&[1, 1], &[3.0])).unwrap().to_vec(), vec![6.0]);
    }

    #[test]
    fn random_matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = t(&[3, 3], &a).matmul(&t(&[3, 3], &b)).unwrap().to_vec();
        let want = triple_loop(&a, &b, 3, 3, 3);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_extent_mismatch() {
        let err = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 3], &[0.0; 6])).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
    }

    #[test]
    fn sum_of_product_gradient_is_transposed_pattern() {
        // loss = sum(A·B): dA[i,p] = sum_j B[p,j], dB[p,j] = sum_i A[i,p]
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true).unwrap();
        let b = Tensor::new(&[3, 2], vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0], true).unwrap();
        a.matmul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![-0.5, 2.0, 4.0, -0.5, 2.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = x.narrow(0, 0, 1).unwrap();
        let b = x.narrow(0, 1, 2).unwrap();
        assert_eq!(b.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
        let y = Tensor::concat(&[a, b], 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let c = x.narrow(1, 1, 1).unwrap();
        assert_eq!(c.to_vec(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn transpose_batched() {
        let x = t(&[2, 2, 3], &(0..12).map(f64::from).collect::<Vec<_>>());
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert_eq!(&y.to_vec()[..6], &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
