use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dOptions {
            stride,
            padding,
            groups,
        }
    }
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    cin_g: usize,
    cout_g: usize,
}

impl ConvGeom {
    /// Visits every (output index, input index, weight index) triple with an
    /// in-bounds input tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvGeom {
            h,
            w,
            c_out,
            k,
            ho,
            wo,
            stride,
            pad,
            cin_g,
            cout_g,
            ..
        } = *self;
        for co in 0..c_out {
            let g = co / cout_g;
            for ci_local in 0..cin_g {
                let ci = g * cin_g + ci_local;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cin_g + ci_local) * k + ky) * k + kx;
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let oidx = (co * ho + oy) * wo + ox;
                                let iidx = (ci * h + iy) * w + ix as usize;
                                f(oidx, iidx, widx);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation (no kernel flip) with zero padding.
    ///
    /// `self` is `[C_in, H, W]`, `weight` is `[C_out, C_in/groups, k, k]`,
    /// `bias` is `[C_out]`. Output extents are
    /// `floor((H + 2·padding − k) / stride) + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        opts: Conv2dOptions,
    ) -> Result<Tensor> {
        let shape_err = || TensorError::Shape {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        let (c_in, h, w) = match *self.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err()),
        };
        let (c_out, cin_g, k, k2) = match *weight.shape() {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err()),
        };
        let Conv2dOptions {
            stride,
            padding,
            groups,
        } = opts;
        if stride == 0 || groups == 0 {
            return Err(TensorError::Config("stride and groups must be positive".into()));
        }
        if k != k2 {
            return Err(TensorError::Config(format!("non-square kernel {k}x{k2}")));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(TensorError::Config(format!(
                "channels {c_in}->{c_out} not divisible by groups {groups}"
            )));
        }
        if cin_g != c_in / groups {
            return Err(shape_err());
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::Config(format!(
                "kernel {k} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(TensorError::Shape {
                    op: "conv2d bias",
                    lhs: vec![c_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            ho,
            wo,
            stride,
            pad: padding,
            cin_g,
            cout_g: c_out / groups,
        };
        let mut out = vec![0.0; c_out * ho * wo];
        {
            let x = self.data();
            let wt = weight.data();
            geom.for_each_tap(|o, i, wi| out[o] += x[i] * wt[wi]);
            if let Some(b) = bias {
                let b = b.data();
                for co in 0..c_out {
                    for v in &mut out[co * ho * wo..(co + 1) * ho * wo] {
                        *v += b[co];
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        debug_assert_eq!(geom.c_in, c_in);
        Tensor::from_op(
            "conv2d",
            &[c_out, ho, wo],
            out,
            inputs,
            Box::new(move |inputs, gout, _| {
                let x = &inputs[0];
                let wt = &inputs[1];
                let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
                let mut gw = wt.requires_grad().then(|| vec![0.0; wt.numel()]);
                {
                    let xd = x.data();
                    let wd = wt.data();
                    match (gx.as_mut(), gw.as_mut()) {
                        (Some(gx), Some(gw)) => geom.for_each_tap(|o, i, wi| {
                            gx[i] += gout[o] * wd[wi];
                            gw[wi] += gout[o] * xd[i];
                        }),
                        (Some(gx), None) => geom.for_each_tap(|o, i, wi| gx[i] += gout[o] * wd[wi]),
                        (None, Some(gw)) => geom.for_each_tap(|o, i, wi| gw[wi] += gout[o] * xd[i]),
                        (None, None) => {}
                    }
                }
                let mut grads = vec![gx, gw];
                if let Some(b) = inputs.get(2) {
                    grads.push(b.requires_grad().then(|| {
                        (0..geom.c_out)
                            .map(|co| gout[co * ho * wo..(co + 1) * ho * wo].iter().sum())
                            .collect()
                    }));
                }
                grads
            }),
        )
    }

    /// Transposed convolution with `padding = 0`: `self` is `[C_in, H, W]`,
    /// `weight` is `[C_in, C_out, k, k]`; output is
    /// `[C_out, (H−1)·stride + k, (W−1)·stride + k]`.
    pub fn conv_transpose2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
        let shape_err = || TensorError::Shape {
            op: "conv_transpose2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        let (c_in, h, w) = match *self.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err()),
        };
        let (wc_in, c_out, k) = match *weight.shape() {
            [a, b, c, d] if c == d => (a, b, c),
            _ => return Err(shape_err()),
        };
        if wc_in != c_in || stride == 0 {
            return Err(shape_err());
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(shape_err());
            }
        }
        let ho = (h - 1) * stride + k;
        let wo = (w - 1) * stride + k;
        let taps = move |mut f: Box<dyn FnMut(usize, usize, usize) + '_>| {
            for ci in 0..c_in {
                for co in 0..c_out {
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((ci * c_out + co) * k + ky) * k + kx;
                            for iy in 0..h {
                                for ix in 0..w {
                                    let oy = iy * stride + ky;
                                    let ox = ix * stride + kx;
                                    f((co * ho + oy) * wo + ox, (ci * h + iy) * w + ix, widx);
                                }
                            }
                        }
                    }
                }
            }
        };
        let mut out = vec![0.0; c_out * ho * wo];
        {
            let x = self.data();
            let wt = weight.data();
            taps(Box::new(|o, i, wi| out[o] += x[i] * wt[wi]));
            if let Some(b) = bias {
                let b = b.data();
                for co in 0..c_out {
                    for v in &mut out[co * ho * wo..(co + 1) * ho * wo] {
                        *v += b[co];
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Tensor::from_op(
            "conv_transpose2d",
            &[c_out, ho, wo],
            out,
            inputs,
            Box::new(move |inputs, gout, _| {
                let x = &inputs[0];
                let wt = &inputs[1];
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; wt.numel()];
                {
                    let xd = x.data();
                    let wd = wt.data();
                    taps(Box::new(|o, i, wi| {
                        gx[i] += gout[o] * wd[wi];
                        gw[wi] += gout[o] * xd[i];
                    }));
                }
                let mut grads = vec![
                    x.requires_grad().then_some(gx),
                    wt.requires_grad().then_some(gw),
                ];
                if let Some(b) = inputs.get(2) {
                    grads.push(b.requires_grad().then(|| {
                        (0..c_out)
                            .map(|co| gout[co * ho * wo..(co + 1) * ho * wo].iter().sum())
                            .collect()
                    }));
                }
                grads
            }),
        )
    }

    /// `[C·r², H, W] → [C, r·H, r·W]`, channel `c·r² + dy·r + dx` landing at
    /// offset `(dy, dx)` of each output block.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor> {
        let (c_in, h, w) = match *self.shape() {
            [c, h, w] if r > 0 && c % (r * r) == 0 => (c, h, w),
            _ => {
                return Err(TensorError::Shape {
                    op: "pixel_shuffle",
                    lhs: self.shape().to_vec(),
                    rhs: vec![r * r],
                })
            }
        };
        let c = c_in / (r * r);
        let (ho, wo) = (h * r, w * r);
        let index = move |ci: usize, y: usize, x: usize| {
            let co = ci / (r * r);
            let dy = (ci % (r * r)) / r;
            let dx = ci % r;
            (co * ho + y * r + dy) * wo + x * r + dx
        };
        let mut out = vec![0.0; self.numel()];
        {
            let d = self.data();
            for ci in 0..c_in {
                for y in 0..h {
                    for x in 0..w {
                        out[index(ci, y, x)] = d[(ci * h + y) * w + x];
                    }
                }
            }
        }
        Tensor::from_op(
            "pixel_shuffle",
            &[c, ho, wo],
            out,
            vec![self.clone()],
            Box::new(move |_, gout, _| {
                let mut g = vec![0.0; gout.len()];
                for ci in 0..c_in {
                    for y in 0..h {
                        for x in 0..w {
                            g[(ci * h + y) * w + x] = gout[index(ci, y, x)];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean over non-overlapping `factor × factor` blocks of a `[C, H, W]` map.
    pub fn avg_pool(&self, factor: usize) -> Result<Tensor> {
        let (c, h, w) = match *self.shape() {
            [c, h, w] if factor > 0 && h % factor == 0 && w % factor == 0 => (c, h, w),
            _ => {
                return Err(TensorError::Shape {
                    op: "avg_pool",
                    lhs: self.shape().to_vec(),
                    rhs: vec![factor, factor],
                })
            }
        };
        let (ho, wo) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; c * ho * wo];
        {
            let d = self.data();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[(ch * ho + y / factor) * wo + x / factor] += d[(ch * h + y) * w + x] * norm;
                    }
                }
            }
        }
        Tensor::from_op(
            "avg_pool",
            &[c, ho, wo],
            out,
            vec![self.clone()],
            Box::new(move |_, gout, _| {
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            g[(ch * h + y) * w + x] = gout[(ch * ho + y / factor) * wo + x / factor] * norm;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data, false).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct summation over output pixels, independent of the tap iterator.
    fn conv_oracle(
        x: &[f64],
        (c_in, h, w): (usize, usize, usize),
        wt: &[f64],
        (c_out, k): (usize, usize),
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let cin_g = c_in / groups;
        let mut out = vec![0.0; c_out * ho * wo];
        for co in 0..c_out {
            let g = co / (c_out / groups);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for cl in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    let ci = g * cin_g + cl;
                                    acc += x[(ci * h + iy as usize) * w + ix as usize]
                                        * wt[((co * cin_g + cl) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_one_by_one_kernel() {
        let x = t(&[1, 3, 3], (0..9).map(f64::from).collect());
        let w = t(&[1, 1, 1, 1], vec![1.0]);
        let y = x.conv2d(&w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn ones_kernel_on_one_hot_gives_neighborhood_indicator() {
        let mut data = vec![0.0; 25];
        data[2 * 5 + 1] = 1.0; // (y=2, x=1)
        let x = t(&[1, 5, 5], data);
        let w = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = x.conv2d(&w, None, Conv2dOptions::new(1, 1, 1)).unwrap().to_vec();
        for yy in 0..5i32 {
            for xx in 0..5i32 {
                let inside = (yy - 2).abs() <= 1 && (xx - 1).abs() <= 1;
                assert_eq!(y[(yy * 5 + xx) as usize], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn depthwise_matches_per_channel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xd = random(&mut rng, 4 * 8 * 8);
        let wd = random(&mut rng, 4 * 9);
        let x = t(&[4, 8, 8], xd.clone());
        let w = t(&[4, 1, 3, 3], wd.clone());
        let y = x.conv2d(&w, None, Conv2dOptions::new(1, 1, 4)).unwrap().to_vec();
        for c in 0..4 {
            let want = conv_oracle(&xd[c * 64..(c + 1) * 64], (1, 8, 8), &wd[c * 9..(c + 1) * 9], (1, 3), 1, 1, 1);
            for (a, b) in y[c * 64..(c + 1) * 64].iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_grouped_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xd = random(&mut rng, 4 * 8 * 8);
        let wd = random(&mut rng, 6 * 2 * 9);
        let bd = random(&mut rng, 6);
        let x = t(&[4, 8, 8], xd.clone());
        let w = t(&[6, 2, 3, 3], wd.clone());
        let b = t(&[6], bd.clone());
        let y = x.conv2d(&w, Some(&b), Conv2dOptions::new(2, 1, 2)).unwrap();
        assert_eq!(y.shape(), &[6, 4, 4]);
        let want = conv_oracle(&xd, (4, 8, 8), &wd, (6, 3), 2, 1, 2);
        for (i, (a, w)) in y.to_vec().iter().zip(&want).enumerate() {
            assert!((a - (w + bd[i / 16])).abs() < 1e-10);
        }
    }

    #[test]
    fn indivisible_groups_rejected() {
        let x = t(&[3, 4, 4], vec![0.0; 48]);
        let w = t(&[2, 1, 1, 1], vec![0.0; 2]);
        assert!(matches!(
            x.conv2d(&w, None, Conv2dOptions::new(1, 0, 2)),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = t(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn transposed_conv_shape_and_scatter() {
        let x = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let y = x.conv_transpose2d(&w, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(
            y.to_vec(),
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn avg_pool_blocks() {
        let x = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(x.avg_pool(2).unwrap().to_vec(), vec![3.0]);
    }
}
