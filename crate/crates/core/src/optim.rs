//! First-order optimizers acting on parameter gradients in place.

use crate::tensor::Tensor;

/// Plain gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&self, params: &[Tensor]) {
        for p in params {
            if let Some(g) = p.grad() {
                let lr = self.lr;
                p.update_data(|d| d.iter_mut().zip(&g).for_each(|(v, gi)| *v -= lr * gi));
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `params` must be passed in the same order on every call.
    pub fn step(&mut self, params: &[Tensor]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
            p.update_data(|d| {
                for i in 0..d.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let step = (m[i] / b1t) / ((v[i] / b2t).sqrt() + eps);
                    d[i] -= lr * (step + wd * d[i]);
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let x = Tensor::new(&[2], vec![1.0, -2.0], true).unwrap();
        x.square().unwrap().sum().backward().unwrap();
        Sgd::new(0.25).step(std::slice::from_ref(&x));
        assert_eq!(x.to_vec(), vec![0.5, -1.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let x = Tensor::new(&[2], vec![1.0, -2.0], true).unwrap();
        x.square().unwrap().sum().backward().unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(std::slice::from_ref(&x));
        let v = x.to_vec();
        assert!((v[0] - 0.9).abs() < 1e-7 && (v[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let x = Tensor::new(&[3], vec![3.0, -1.0, 0.5], true).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            x.zero_grad();
            x.add_scalar(-1.0).square().unwrap().sum().backward().unwrap();
            opt.step(std::slice::from_ref(&x));
        }
        assert!(x.to_vec().iter().all(|v| (v - 1.0).abs() < 1e-3), "{:?}", x.to_vec());
    }
}
