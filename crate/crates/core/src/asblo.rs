//! Bilevel training by a sequence of barrier-regularized single-level
//! problems.
//!
//! The lower-level constraint `ω ∈ argmin f(β, ·)` is replaced by the value
//! gap `ζ(ω) = f(β, ω) − f*_μ(β)`, where `f*_μ` is the optimum of the
//! ridge-regularized lower problem. A smooth log barrier `P_σ(ζ)` keeps `ζ`
//! negative while `ω` minimizes `F + P_σ(ζ) + θ/2‖ω‖²`. The hypergradient
//! of `β` is the explicit upper gradient plus the barrier's `β`-sensitivity.

use std::io::Write;

use crate::layers::Parameterized;
use crate::net::{l1_loss, EchoIrNet};
use crate::optim::Adam;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AsbloError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("barrier argument {zeta} outside the open domain ζ < 0")]
    Domain { zeta: f64 },
    #[error("no feasible start: ζ = {zeta} after restoration")]
    Infeasible { zeta: f64 },
    #[error("diverged at step {step}: non-finite {what} (last values {trace:?})")]
    Diverged {
        step: usize,
        what: &'static str,
        trace: Vec<f64>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AsbloError>;

/// Value of an objective with its gradients in both blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub grad_beta: Vec<f64>,
    pub grad_omega: Vec<f64>,
}

/// Upper objective `F(β, ω)` on validation data and lower objective
/// `f(β, ω)` on training data, over disjoint parameter blocks.
pub trait BilevelProblem {
    fn initial_beta(&self) -> Vec<f64>;
    fn initial_omega(&self) -> Vec<f64>;
    fn upper(&self, beta: &[f64], omega: &[f64]) -> Result<Evaluation>;
    fn lower(&self, beta: &[f64], omega: &[f64]) -> Result<Evaluation>;

    fn upper_value(&self, beta: &[f64], omega: &[f64]) -> Result<f64> {
        Ok(self.upper(beta, omega)?.value)
    }

    fn lower_value(&self, beta: &[f64], omega: &[f64]) -> Result<f64> {
        Ok(self.lower(beta, omega)?.value)
    }
}

/// Barrier constants `η₁..η₄`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eta(pub [f64; 4]);

impl Eta {
    /// Constants making the two barrier branches meet with matching value,
    /// slope and curvature at `ζ = −κ`. `eta1 ≤ −(ln κ + 3/2)` keeps the
    /// barrier nonnegative as `ζ → −∞`.
    pub fn derive(kappa: f64, eta1: f64) -> Result<Eta> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(AsbloError::Config(format!("kappa must lie in (0, 1], got {kappa}")));
        }
        let bound = -(kappa.ln() + 1.5);
        if eta1 > bound + 1e-15 {
            return Err(AsbloError::Config(format!(
                "eta1 = {eta1} makes the barrier negative far from the boundary; need eta1 <= {bound}"
            )));
        }
        Ok(Eta([eta1, kappa.ln() + eta1 + 1.5, kappa * kappa / 2.0, 2.0 * kappa]))
    }
}

impl Default for Eta {
    fn default() -> Self {
        Eta([-1.5, 0.0, 0.5, 2.0])
    }
}

/// Value, slope and curvature of the logarithmic branch (`−κ ≤ ζ < 0`).
fn log_branch(zeta: f64, sigma: f64, eta: &Eta) -> [f64; 3] {
    [-sigma * ((-zeta).ln() + eta.0[0]), -sigma / zeta, sigma / (zeta * zeta)]
}

/// Value, slope and curvature of the rational tail (`ζ < −κ`).
fn tail_branch(zeta: f64, sigma: f64, eta: &Eta) -> [f64; 3] {
    let [_, e2, e3, e4] = eta.0;
    let z2 = zeta * zeta;
    [
        -sigma * (e2 + e3 / z2 + e4 / zeta),
        sigma * (2.0 * e3 / (z2 * zeta) + e4 / z2),
        -sigma * (6.0 * e3 / (z2 * z2) + 2.0 * e4 / (z2 * zeta)),
    ]
}

/// Piecewise log barrier; `+∞` for `ζ ≥ 0`.
pub fn barrier_p(zeta: f64, sigma: f64, kappa: f64, eta: &Eta) -> f64 {
    if zeta >= 0.0 {
        f64::INFINITY
    } else if zeta >= -kappa {
        log_branch(zeta, sigma, eta)[0]
    } else {
        tail_branch(zeta, sigma, eta)[0]
    }
}

/// First and second derivative of [`barrier_p`] in `ζ`.
pub fn barrier_p_derivs(zeta: f64, sigma: f64, kappa: f64, eta: &Eta) -> Result<(f64, f64)> {
    if !(zeta < 0.0) {
        return Err(AsbloError::Domain { zeta });
    }
    let [_, d1, d2] = if zeta >= -kappa {
        log_branch(zeta, sigma, eta)
    } else {
        tail_branch(zeta, sigma, eta)
    };
    Ok((d1, d2))
}

/// A positive, non-increasing sequence indexed by outer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sequence {
    Constant(f64),
    /// `max(floor, initial · factor^⌊k/period⌋)`.
    Geometric {
        initial: f64,
        factor: f64,
        period: usize,
        floor: f64,
    },
}

impl Sequence {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            Sequence::Constant(v) => v,
            Sequence::Geometric {
                initial,
                factor,
                period,
                floor,
            } => (initial * factor.powi((k / period.max(1)) as i32)).max(floor),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            Sequence::Constant(v) => v > 0.0,
            Sequence::Geometric {
                initial,
                factor,
                floor,
                ..
            } => initial > 0.0 && floor > 0.0 && factor > 0.0 && factor <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(AsbloError::Config(format!("{name} sequence must be positive and non-increasing: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    pub mu: f64,
    pub theta: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarrierSchedule {
    pub mu: Sequence,
    pub theta: Sequence,
    pub sigma: Sequence,
    pub kappa: f64,
    pub eta: Eta,
    /// Gradient steps of the ridge-regularized lower solve.
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Line-search descent steps of the barrier problem in `ω`.
    pub omega_steps: usize,
    pub feasibility_eps: f64,
}

impl Default for BarrierSchedule {
    fn default() -> Self {
        let decay = Sequence::Geometric {
            initial: 0.1,
            factor: 0.5,
            period: 25,
            floor: 1e-4,
        };
        BarrierSchedule {
            mu: decay,
            theta: decay,
            sigma: decay,
            kappa: 1.0,
            eta: Eta::default(),
            inner_steps: 50,
            inner_lr: 1e-2,
            omega_steps: 50,
            feasibility_eps: 1e-8,
        }
    }
}

impl BarrierSchedule {
    /// Every sequence fixed at `value`.
    pub fn constant(value: f64) -> Self {
        BarrierSchedule {
            mu: Sequence::Constant(value),
            theta: Sequence::Constant(value),
            sigma: Sequence::Constant(value),
            ..BarrierSchedule::default()
        }
    }

    pub fn at(&self, k: usize) -> ScheduleValues {
        ScheduleValues {
            mu: self.mu.at(k),
            theta: self.theta.at(k),
            sigma: self.sigma.at(k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mu.validate("mu")?;
        self.theta.validate("theta")?;
        self.sigma.validate("sigma")?;
        let derived = Eta::derive(self.kappa, self.eta.0[0])?;
        if derived
            .0
            .iter()
            .zip(&self.eta.0)
            .any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0))
        {
            return Err(AsbloError::Config(format!(
                "eta {:?} does not match the smooth constants {:?} for kappa {}",
                self.eta.0, derived.0, self.kappa
            )));
        }
        if !(self.inner_lr > 0.0 && self.feasibility_eps > 0.0) {
            return Err(AsbloError::Config("inner_lr and feasibility_eps must be positive".into()));
        }
        Ok(())
    }

    /// Barrier value and slope with `ζ` clamped to `≤ −eps`; beyond the
    /// clamp the barrier continues linearly so the composite stays C¹.
    fn clamped(&self, zeta: f64, sigma: f64) -> (f64, f64) {
        let eps = self.feasibility_eps;
        let inner = zeta.min(-eps);
        let value = barrier_p(inner, sigma, self.kappa, &self.eta);
        let (slope, _) = barrier_p_derivs(inner, sigma, self.kappa, &self.eta).expect("clamped below zero");
        if zeta > -eps {
            log::debug!("barrier clamp active at zeta = {zeta:e}");
            (value + slope * (zeta + eps), slope)
        } else {
            (value, slope)
        }
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Minimizer of the ridge-regularized lower problem and its optimal value.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizedMinimum {
    pub z_star: Vec<f64>,
    pub f_star_mu: f64,
}

/// `argmin_ω f(β, ω) + μ/2‖ω‖²` by gradient descent warm-started at `start`.
pub fn inner_regularized_solve(
    problem: &dyn BilevelProblem,
    beta: &[f64],
    start: &[f64],
    mu: f64,
    steps: usize,
    lr: f64,
) -> Result<RegularizedMinimum> {
    if !(mu > 0.0) {
        return Err(AsbloError::Config(format!("mu must be positive, got {mu}")));
    }
    let mut z = start.to_vec();
    let mut trace = Vec::new();
    for step in 0..steps {
        let ev = problem.lower(beta, &z)?;
        let value = ev.value + 0.5 * mu * sq_norm(&z);
        trace.push(value);
        if !value.is_finite() || !finite(&ev.grad_omega) {
            return Err(AsbloError::Diverged {
                step,
                what: "regularized lower objective",
                trace,
            });
        }
        for (zi, gi) in z.iter_mut().zip(&ev.grad_omega) {
            *zi -= lr * (gi + mu * *zi);
        }
    }
    let f_star_mu = problem.lower_value(beta, &z)? + 0.5 * mu * sq_norm(&z);
    if !f_star_mu.is_finite() {
        trace.push(f_star_mu);
        return Err(AsbloError::Diverged {
            step: steps,
            what: "regularized lower objective",
            trace,
        });
    }
    Ok(RegularizedMinimum { z_star: z, f_star_mu })
}

/// `argmin_ω F(β, ω) + P_σ(ζ(ω)) + θ/2‖ω‖²` by gradient descent with
/// backtracking, started from `start` or, when that is infeasible, from
/// points on the segment towards `z*`.
pub fn omega_solve(
    problem: &dyn BilevelProblem,
    beta: &[f64],
    inner: &RegularizedMinimum,
    start: &[f64],
    values: ScheduleValues,
    schedule: &BarrierSchedule,
) -> Result<Vec<f64>> {
    let zeta_at = |w: &[f64]| -> Result<f64> { Ok(problem.lower_value(beta, w)? - inner.f_star_mu) };
    let mut omega = start.to_vec();
    let mut zeta = zeta_at(&omega)?;
    if !(zeta <= 0.0) {
        // Restore feasibility along the segment to z*, where ζ = −μ/2‖z*‖² ≤ 0.
        let mut t = 0.5;
        loop {
            let candidate: Vec<f64> = inner
                .z_star
                .iter()
                .zip(start)
                .map(|(z, s)| z + t * (s - z))
                .collect();
            zeta = zeta_at(&candidate)?;
            omega = candidate;
            if zeta <= 0.0 || t == 0.0 {
                break;
            }
            t = if t < 1e-3 { 0.0 } else { t * 0.5 };
        }
        if !(zeta <= 0.0) {
            return Err(AsbloError::Infeasible { zeta });
        }
    }

    let objective = |w: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let reg = 0.5 * values.theta * sq_norm(w);
        if !with_grad {
            let z = problem.lower_value(beta, w)? - inner.f_star_mu;
            let (p, _) = schedule.clamped(z, values.sigma);
            return Ok((problem.upper_value(beta, w)? + p + reg, Vec::new()));
        }
        let up = problem.upper(beta, w)?;
        let lo = problem.lower(beta, w)?;
        let (p, slope) = schedule.clamped(lo.value - inner.f_star_mu, values.sigma);
        let grad = (0..w.len())
            .map(|i| up.grad_omega[i] + slope * lo.grad_omega[i] + values.theta * w[i])
            .collect();
        Ok((up.value + p + reg, grad))
    };

    let max_lr = schedule.inner_lr * 1e3;
    let mut lr = schedule.inner_lr;
    let mut trace = Vec::new();
    for step in 0..schedule.omega_steps {
        let (value, grad) = objective(&omega, true)?;
        trace.push(value);
        if !value.is_finite() || !finite(&grad) {
            return Err(AsbloError::Diverged {
                step,
                what: "barrier objective",
                trace,
            });
        }
        let g2 = sq_norm(&grad);
        if g2 == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = omega.iter().zip(&grad).map(|(w, g)| w - lr * g).collect();
            let (tv, _) = objective(&trial, false)?;
            if tv.is_finite() && tv <= value - 1e-4 * lr * g2 {
                omega = trial;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
        lr = (lr * 2.0).min(max_lr);
    }
    Ok(omega)
}

/// Barrier sensitivity `P′_σ(ζ) · (∇_β f(β, ω*) − ∇_β f(β, z*))`, with `ζ`
/// clamped like the barrier itself.
pub fn implicit_grad(
    problem: &dyn BilevelProblem,
    beta: &[f64],
    omega_star: &[f64],
    inner: &RegularizedMinimum,
    values: ScheduleValues,
    schedule: &BarrierSchedule,
) -> Result<(Vec<f64>, f64)> {
    let at_omega = problem.lower(beta, omega_star)?;
    let at_z = problem.lower(beta, &inner.z_star)?;
    let zeta = at_omega.value - inner.f_star_mu;
    if !zeta.is_finite() {
        return Err(AsbloError::Domain { zeta });
    }
    let (_, slope) = schedule.clamped(zeta, values.sigma);
    let g = at_omega
        .grad_beta
        .iter()
        .zip(&at_z.grad_beta)
        .map(|(a, b)| slope * (a - b))
        .collect();
    Ok((g, zeta))
}

/// Solutions of one schedule step, reusable as warm starts.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerSolution {
    pub z_star: Vec<f64>,
    pub omega_star: Vec<f64>,
    pub f_star_mu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypergradientResult {
    pub explicit_part: Vec<f64>,
    pub implicit_part: Vec<f64>,
    pub total: Vec<f64>,
    pub zeta: f64,
    pub upper_value: f64,
    pub lower_value: f64,
    pub inner: InnerSolution,
}

/// Hypergradient of `β` at schedule index `k`, warm-started from `warm`.
pub fn hypergradient(
    problem: &dyn BilevelProblem,
    beta: &[f64],
    warm: &InnerSolution,
    schedule: &BarrierSchedule,
    k: usize,
) -> Result<HypergradientResult> {
    let values = schedule.at(k);
    let reg = inner_regularized_solve(
        problem,
        beta,
        &warm.z_star,
        values.mu,
        schedule.inner_steps,
        schedule.inner_lr,
    )?;
    let omega_star = omega_solve(problem, beta, &reg, &warm.omega_star, values, schedule)?;
    let (implicit_part, zeta) = implicit_grad(problem, beta, &omega_star, &reg, values, schedule)?;
    let up = problem.upper(beta, &omega_star)?;
    let lower_value = problem.lower_value(beta, &omega_star)?;
    let total = up.grad_beta.iter().zip(&implicit_part).map(|(a, b)| a + b).collect();
    Ok(HypergradientResult {
        explicit_part: up.grad_beta,
        implicit_part,
        total,
        zeta,
        upper_value: up.value,
        lower_value,
        inner: InnerSolution {
            z_star: reg.z_star,
            omega_star,
            f_star_mu: reg.f_star_mu,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub mu: f64,
    pub theta: f64,
    pub sigma: f64,
    pub zeta: f64,
    /// `F(β_k, ω*_k)`.
    pub upper: f64,
    pub lower: f64,
    pub grad_norm: f64,
    /// `β_k`, before the step.
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub final_beta: Vec<f64>,
    pub final_omega: Vec<f64>,
}

impl Trace {
    pub const CSV_HEADER: &'static str = "step,mu,theta,sigma,zeta,F_val,f_tr,hypergrad_norm";

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.step, r.mu, r.theta, r.sigma, r.zeta, r.upper, r.lower, r.grad_norm
            )?;
        }
        Ok(())
    }
}

/// Outer gradient descent on `β`; `on_step` sees each row as it is produced.
pub fn asblo_train(
    problem: &dyn BilevelProblem,
    schedule: &BarrierSchedule,
    outer_steps: usize,
    outer_lr: f64,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<Trace> {
    schedule.validate()?;
    let mut beta = problem.initial_beta();
    let omega0 = problem.initial_omega();
    let mut warm = InnerSolution {
        z_star: omega0.clone(),
        omega_star: omega0,
        f_star_mu: 0.0,
    };
    let mut trace = Trace::default();
    for k in 0..outer_steps {
        let hg = hypergradient(problem, &beta, &warm, schedule, k)?;
        let v = schedule.at(k);
        let row = TraceRow {
            step: k,
            mu: v.mu,
            theta: v.theta,
            sigma: v.sigma,
            zeta: hg.zeta,
            upper: hg.upper_value,
            lower: hg.lower_value,
            grad_norm: sq_norm(&hg.total).sqrt(),
            beta: beta.clone(),
        };
        on_step(&row);
        trace.rows.push(row);
        if !finite(&hg.total) || !hg.upper_value.is_finite() {
            return Err(AsbloError::Diverged {
                step: k,
                what: "hypergradient",
                trace: trace.rows.iter().map(|r| r.upper).collect(),
            });
        }
        for (b, g) in beta.iter_mut().zip(&hg.total) {
            *b -= outer_lr * g;
        }
        warm = hg.inner;
    }
    trace.final_beta = beta;
    trace.final_omega = warm.omega_star;
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    /// `F = (ω−1)² + (β−2)²`, `f = ½(ω−β)²`.
    Quadratic,
    /// `F = (ω−β)²`, `f = ½ω²`.
    ConstraintOnly,
}

/// One-dimensional bilevel problems with closed-form value functions.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub kind: ToyKind,
    pub beta0: f64,
    pub omega0: f64,
}

pub fn make_toy_problem(kind: ToyKind) -> ToyProblem {
    ToyProblem {
        kind,
        beta0: 0.0,
        omega0: 0.0,
    }
}

impl ToyProblem {
    /// `φ(β) = F(β, S(β))`.
    pub fn phi(&self, beta: f64) -> f64 {
        match self.kind {
            ToyKind::Quadratic => (beta - 1.0).powi(2) + (beta - 2.0).powi(2),
            ToyKind::ConstraintOnly => beta * beta,
        }
    }

    pub fn phi_grad(&self, beta: f64) -> f64 {
        match self.kind {
            ToyKind::Quadratic => 2.0 * (beta - 1.0) + 2.0 * (beta - 2.0),
            ToyKind::ConstraintOnly => 2.0 * beta,
        }
    }

    /// The lower-level solution set, a single point here.
    pub fn lower_solution(&self, beta: f64) -> f64 {
        match self.kind {
            ToyKind::Quadratic => beta,
            ToyKind::ConstraintOnly => 0.0,
        }
    }

    pub fn beta_star(&self) -> f64 {
        match self.kind {
            ToyKind::Quadratic => 1.5,
            ToyKind::ConstraintOnly => 0.0,
        }
    }
}

impl BilevelProblem for ToyProblem {
    fn initial_beta(&self) -> Vec<f64> {
        vec![self.beta0]
    }

    fn initial_omega(&self) -> Vec<f64> {
        vec![self.omega0]
    }

    fn upper(&self, beta: &[f64], omega: &[f64]) -> Result<Evaluation> {
        let (b, w) = (beta[0], omega[0]);
        Ok(match self.kind {
            ToyKind::Quadratic => Evaluation {
                value: (w - 1.0).powi(2) + (b - 2.0).powi(2),
                grad_beta: vec![2.0 * (b - 2.0)],
                grad_omega: vec![2.0 * (w - 1.0)],
            },
            ToyKind::ConstraintOnly => Evaluation {
                value: (w - b).powi(2),
                grad_beta: vec![-2.0 * (w - b)],
                grad_omega: vec![2.0 * (w - b)],
            },
        })
    }

    fn lower(&self, beta: &[f64], omega: &[f64]) -> Result<Evaluation> {
        let (b, w) = (beta[0], omega[0]);
        Ok(match self.kind {
            ToyKind::Quadratic => Evaluation {
                value: 0.5 * (w - b).powi(2),
                grad_beta: vec![-(w - b)],
                grad_omega: vec![w - b],
            },
            ToyKind::ConstraintOnly => Evaluation {
                value: 0.5 * w * w,
                grad_beta: vec![0.0],
                grad_omega: vec![w],
            },
        })
    }
}

/// Which parameter block of the network plays the upper-level role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BlockAssignment {
    /// `β` = upsampler parameters, `ω` = everything else.
    #[default]
    UpsamplerUpper,
    /// `β` = everything except the upsamplers, `ω` = upsampler parameters.
    UpsamplerLower,
}

/// (degraded, clean) image pair.
pub type ImagePair = (Tensor, Tensor);

/// The restoration network as a bilevel problem: `F` is the L1 loss on the
/// validation pairs, `f` the L1 loss on the training pairs.
pub struct EchoIrBilevel {
    pub net: EchoIrNet,
    pub beta_params: Vec<Tensor>,
    pub omega_params: Vec<Tensor>,
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

fn flatten(params: &[Tensor]) -> Vec<f64> {
    params.iter().flat_map(|p| p.to_vec()).collect()
}

fn flatten_grads(params: &[Tensor]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect()
}

fn load(params: &[Tensor], values: &[f64]) -> Result<()> {
    let mut off = 0;
    for p in params {
        let n = p.numel();
        p.set_data(&values[off..off + n])?;
        off += n;
    }
    Ok(())
}

pub fn echoir_bilevel_binding(
    net: EchoIrNet,
    train: Vec<ImagePair>,
    val: Vec<ImagePair>,
    assignment: BlockAssignment,
) -> Result<EchoIrBilevel> {
    if train.is_empty() || val.is_empty() {
        return Err(AsbloError::Config("training and validation splits must be non-empty".into()));
    }
    for (a, _) in &train {
        for (b, _) in &val {
            if a.same_node(b) || (a.shape() == b.shape() && *a.data() == *b.data()) {
                return Err(AsbloError::Config("training and validation splits overlap".into()));
            }
        }
    }
    let up: Vec<Tensor> = net.upsampler_params().into_iter().map(|(_, t)| t).collect();
    let rest: Vec<Tensor> = net.backbone_params().into_iter().map(|(_, t)| t).collect();
    let (beta_params, omega_params) = match assignment {
        BlockAssignment::UpsamplerUpper => (up, rest),
        BlockAssignment::UpsamplerLower => (rest, up),
    };
    Ok(EchoIrBilevel {
        net,
        beta_params,
        omega_params,
        train,
        val,
    })
}

impl EchoIrBilevel {
    fn loss(&self, pairs: &[ImagePair]) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for (x, y) in pairs {
            let l = l1_loss(&self.net.forward(x)?, y)?;
            total = Some(match total {
                None => l,
                Some(t) => t.add(&l)?,
            });
        }
        Ok(total.expect("non-empty split").scale(1.0 / pairs.len() as f64))
    }

    fn evaluate(&self, pairs: &[ImagePair], beta: &[f64], omega: &[f64]) -> Result<Evaluation> {
        load(&self.beta_params, beta)?;
        load(&self.omega_params, omega)?;
        self.net.zero_grads();
        let loss = self.loss(pairs)?;
        loss.backward()?;
        let ev = Evaluation {
            value: loss.item(),
            grad_beta: flatten_grads(&self.beta_params),
            grad_omega: flatten_grads(&self.omega_params),
        };
        self.net.zero_grads();
        Ok(ev)
    }

    fn value(&self, pairs: &[ImagePair], beta: &[f64], omega: &[f64]) -> Result<f64> {
        load(&self.beta_params, beta)?;
        load(&self.omega_params, omega)?;
        Ok(self.loss(pairs)?.item())
    }

    /// Mean L1 on the validation split at the current parameters.
    pub fn validation_loss(&self) -> Result<f64> {
        Ok(self.loss(&self.val)?.item())
    }

    /// Writes `β`, `ω` into the network.
    pub fn load(&self, beta: &[f64], omega: &[f64]) -> Result<()> {
        load(&self.beta_params, beta)?;
        load(&self.omega_params, omega)
    }

    /// One joint first-order step on every parameter over the training
    /// split; returns the loss before the step.
    pub fn single_level_step(&self, opt: &mut Adam) -> Result<f64> {
        let params = self.net.params();
        self.net.zero_grads();
        let loss = self.loss(&self.train)?;
        loss.backward()?;
        opt.step(&params);
        self.net.zero_grads();
        Ok(loss.item())
    }
}

/// Adam with the single-level baseline constants.
pub fn single_level_optimizer(lr: f64) -> Adam {
    Adam::new(lr).with_weight_decay(1e-4)
}

impl BilevelProblem for EchoIrBilevel {
    fn initial_beta(&self) -> Vec<f64> {
        flatten(&self.beta_params)
    }

    fn initial_omega(&self) -> Vec<f64> {
        flatten(&self.omega_params)
    }

    fn upper(&self, beta: &[f64], omega: &[f64]) -> Result<Evaluation> {
        self.evaluate(&self.val, beta, omega)
    }

    fn lower(&self, beta: &[f64], omega: &[f64]) -> Result<Evaluation> {
        self.evaluate(&self.train, beta, omega)
    }

    fn upper_value(&self, beta: &[f64], omega: &[f64]) -> Result<f64> {
        self.value(&self.val, beta, omega)
    }

    fn lower_value(&self, beta: &[f64], omega: &[f64]) -> Result<f64> {
        self.value(&self.train, beta, omega)
    }
}
