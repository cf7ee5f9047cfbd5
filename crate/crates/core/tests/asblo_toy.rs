use echoir_core::asblo::*;
use proptest::prelude::*;

fn toy_schedule(schedule: BarrierSchedule) -> BarrierSchedule {
    BarrierSchedule {
        inner_steps: 200,
        inner_lr: 0.1,
        omega_steps: 200,
        ..schedule
    }
}

fn warm(x: f64) -> InnerSolution {
    InnerSolution {
        z_star: vec![x],
        omega_star: vec![x],
        f_star_mu: 0.0,
    }
}

/// `F = ω²`, `f = ½(ω − 1)²`: neither level sees `β`.
struct Decoupled;

impl BilevelProblem for Decoupled {
    fn initial_beta(&self) -> Vec<f64> {
        vec![0.7]
    }
    fn initial_omega(&self) -> Vec<f64> {
        vec![0.0]
    }
    fn upper(&self, _: &[f64], w: &[f64]) -> Result<Evaluation> {
        Ok(Evaluation {
            value: w[0] * w[0],
            grad_beta: vec![0.0],
            grad_omega: vec![2.0 * w[0]],
        })
    }
    fn lower(&self, _: &[f64], w: &[f64]) -> Result<Evaluation> {
        Ok(Evaluation {
            value: 0.5 * (w[0] - 1.0).powi(2),
            grad_beta: vec![0.0],
            grad_omega: vec![w[0] - 1.0],
        })
    }
}

/// `f ≡ 0`.
struct Flat;

impl BilevelProblem for Flat {
    fn initial_beta(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn initial_omega(&self) -> Vec<f64> {
        vec![2.0, -3.0]
    }
    fn upper(&self, _: &[f64], _: &[f64]) -> Result<Evaluation> {
        unreachable!()
    }
    fn lower(&self, _: &[f64], _: &[f64]) -> Result<Evaluation> {
        Ok(Evaluation {
            value: 0.0,
            grad_beta: vec![0.0],
            grad_omega: vec![0.0, 0.0],
        })
    }
}

#[test]
fn barrier_nonnegative_on_dense_grid() {
    let eta = Eta::default();
    let mut z: f64 = -1e3;
    while z < -1e-6 {
        assert!(barrier_p(z, 1.0, 1.0, &eta) >= 0.0, "negative at {z}");
        z *= 0.999;
    }
}

#[test]
fn barrier_derivative_matches_finite_differences() {
    let eta = Eta::default();
    let h = 1e-6;
    let mut z = -3.0;
    while z <= -0.05 {
        let (d1, d2) = barrier_p_derivs(z, 0.7, 1.0, &eta).unwrap();
        let fd1 = (barrier_p(z + h, 0.7, 1.0, &eta) - barrier_p(z - h, 0.7, 1.0, &eta)) / (2.0 * h);
        assert!((d1 - fd1).abs() / d1.abs().max(1e-12) < 1e-6, "{z}: {d1} vs {fd1}");
        let (p1, _) = barrier_p_derivs(z + h, 0.7, 1.0, &eta).unwrap();
        let (m1, _) = barrier_p_derivs(z - h, 0.7, 1.0, &eta).unwrap();
        assert!((d2 - (p1 - m1) / (2.0 * h)).abs() / d2.abs().max(1e-12) < 1e-5);
        z += 0.0137;
    }
}

#[test]
fn inner_solve_pure_ridge_and_dominance() {
    let r = inner_regularized_solve(&Flat, &[1.0], &[2.0, -3.0], 0.5, 400, 0.1).unwrap();
    assert!(r.z_star.iter().all(|v| v.abs() < 1e-8));
    let q = make_toy_problem(ToyKind::Quadratic);
    let mut last = f64::INFINITY;
    for mu in [1.0, 10.0, 100.0] {
        let r = inner_regularized_solve(&q, &[1.0], &[0.0], mu, 2000, 0.5 / (1.0 + mu)).unwrap();
        assert!(r.z_star[0].abs() < last);
        assert!((r.z_star[0] - 1.0 / (1.0 + mu)).abs() < 1e-8);
        last = r.z_star[0].abs();
    }
}

#[test]
fn inner_solve_reports_divergence() {
    let q = make_toy_problem(ToyKind::Quadratic);
    let err = inner_regularized_solve(&q, &[1.0], &[0.0], 0.1, 4000, 5.0).unwrap_err();
    assert!(matches!(err, AsbloError::Diverged { .. }), "{err}");
}

#[test]
fn omega_solve_approaches_lower_solution_as_sigma_shrinks() {
    let q = make_toy_problem(ToyKind::Quadratic);
    let mut gaps = Vec::new();
    for s in [1e-1, 1e-2, 1e-3, 1e-4] {
        let sched = toy_schedule(BarrierSchedule::constant(s));
        let v = sched.at(0);
        let inner = inner_regularized_solve(&q, &[2.0], &[2.0], v.mu, 200, 0.1).unwrap();
        let w = omega_solve(&q, &[2.0], &inner, &[2.0], v, &sched).unwrap();
        gaps.push((w[0] - 2.0).abs());
    }
    assert!(gaps.windows(2).all(|g| g[1] < g[0]), "{gaps:?}");
    assert!(gaps[3] < 0.05, "{gaps:?}");
}

#[test]
fn omega_solve_heavy_ridge_goes_to_zero() {
    let q = make_toy_problem(ToyKind::Quadratic);
    let mut sched = toy_schedule(BarrierSchedule::constant(1e-3));
    sched.theta = Sequence::Constant(1e6);
    let v = sched.at(0);
    let inner = inner_regularized_solve(&q, &[2.0], &[2.0], v.mu, 200, 0.1).unwrap();
    // start from z*, the feasible point nearest the ridge minimum
    let w = omega_solve(&q, &[2.0], &inner, &inner.z_star, v, &sched).unwrap();
    assert!(w[0].abs() < inner.z_star[0], "{w:?}");
    let mut sched = toy_schedule(BarrierSchedule::constant(1e-3));
    sched.theta = Sequence::Constant(1e6);
    sched.mu = Sequence::Constant(1e6);
    let v = sched.at(0);
    let inner = inner_regularized_solve(&q, &[2.0], &[2.0], v.mu, 2000, 1e-6).unwrap();
    let w = omega_solve(&q, &[2.0], &inner, &[2.0], v, &sched).unwrap();
    assert!(w[0].abs() < 1e-3, "{w:?}");
}

#[test]
fn omega_solve_constraint_only_tracks_beta() {
    // F independent of ω; the lower problem pins ω to β
    struct Pinned;
    impl BilevelProblem for Pinned {
        fn initial_beta(&self) -> Vec<f64> {
            vec![0.8]
        }
        fn initial_omega(&self) -> Vec<f64> {
            vec![0.0]
        }
        fn upper(&self, b: &[f64], _: &[f64]) -> Result<Evaluation> {
            Ok(Evaluation {
                value: b[0] * b[0],
                grad_beta: vec![2.0 * b[0]],
                grad_omega: vec![0.0],
            })
        }
        fn lower(&self, b: &[f64], w: &[f64]) -> Result<Evaluation> {
            Ok(Evaluation {
                value: 0.5 * (w[0] - b[0]).powi(2),
                grad_beta: vec![b[0] - w[0]],
                grad_omega: vec![w[0] - b[0]],
            })
        }
    }
    let sched = toy_schedule(BarrierSchedule::constant(1e-4));
    let v = sched.at(0);
    let inner = inner_regularized_solve(&Pinned, &[0.8], &[0.0], v.mu, 200, 0.1).unwrap();
    let w = omega_solve(&Pinned, &[0.8], &inner, &[0.0], v, &sched).unwrap();
    assert!((w[0] - 0.8).abs() < 0.01, "{w:?}");
}

#[test]
fn implicit_grad_vanishes_without_beta_dependence() {
    let sched = toy_schedule(BarrierSchedule::constant(1e-2));
    let hg = hypergradient(&Decoupled, &[0.7], &warm(0.0), &sched, 0).unwrap();
    assert_eq!(hg.implicit_part, vec![0.0]);
    assert_eq!(hg.total, vec![0.0]);
    assert_eq!(hg.total[0], hg.explicit_part[0] + hg.implicit_part[0]);
}

#[test]
fn training_leaves_beta_alone_without_dependence() {
    let sched = toy_schedule(BarrierSchedule::default());
    let t = asblo_train(&Decoupled, &sched, 20, 1e-2, |_| {}).unwrap();
    assert_eq!(t.final_beta, vec![0.7]);
}

#[test]
fn hypergradient_at_beta_two_is_close_to_closed_form() {
    let q = make_toy_problem(ToyKind::Quadratic);
    let sched = toy_schedule(BarrierSchedule::constant(1e-3));
    let hg = hypergradient(&q, &[2.0], &warm(2.0), &sched, 0).unwrap();
    println!("total at beta=2: {} (closed form 2)", hg.total[0]);
    assert!((hg.total[0] - 2.0).abs() < 0.1, "{}", hg.total[0]);
}

#[test]
fn implicit_grad_matches_finite_difference_hyper_oracle() {
    // d/dβ [F + P_σ(f − f*_μ) + θ/2‖ω‖²] at fixed ω*, re-solving f*_μ at β ± h
    let q = make_toy_problem(ToyKind::Quadratic);
    for s in [1e-2, 1e-3] {
        let sched = toy_schedule(BarrierSchedule::constant(s));
        let v = sched.at(0);
        for beta in [1.0, 2.0, 3.0] {
            let hg = hypergradient(&q, &[beta], &warm(beta), &sched, 0).unwrap();
            let w = hg.inner.omega_star.clone();
            let surrogate = |b: f64| {
                let inner = inner_regularized_solve(&q, &[b], &hg.inner.z_star, v.mu, 400, 0.1).unwrap();
                let zeta = q.lower_value(&[b], &w).unwrap() - inner.f_star_mu;
                q.upper_value(&[b], &w).unwrap()
                    + barrier_p(zeta, v.sigma, sched.kappa, &sched.eta)
                    + 0.5 * v.theta * w[0] * w[0]
            };
            let h = 1e-7;
            let fd = (surrogate(beta + h) - surrogate(beta - h)) / (2.0 * h);
            let rel = (hg.total[0] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-2, "schedule {s} beta {beta}: {} vs {fd}", hg.total[0]);
        }
    }
}

#[test]
fn quadratic_training_converges_and_trace_is_complete() {
    let q = make_toy_problem(ToyKind::Quadratic);
    let sched = toy_schedule(BarrierSchedule::default());
    let t = asblo_train(&q, &sched, 300, 1e-2, |_| {}).unwrap();
    assert_eq!(t.rows.len(), 300);
    assert!((t.final_beta[0] - 1.5).abs() <= 0.02, "{:?}", t.final_beta);
    // F(β, ω*) may only rise where the schedule tightens
    for k in 11..t.rows.len() {
        let (prev, cur) = (&t.rows[k - 1], &t.rows[k]);
        if prev.sigma == cur.sigma {
            assert!(cur.upper <= prev.upper + 1e-6, "step {k}: {} -> {}", prev.upper, cur.upper);
        }
    }
}

#[test]
fn upper_values_non_increasing_under_constant_schedule() {
    let q = make_toy_problem(ToyKind::Quadratic);
    let sched = toy_schedule(BarrierSchedule::constant(1e-3));
    let t = asblo_train(&q, &sched, 300, 1e-2, |_| {}).unwrap();
    for k in 11..t.rows.len() {
        assert!(t.rows[k].upper <= t.rows[k - 1].upper + 1e-6, "step {k}");
    }
}

#[test]
fn constraint_only_training_converges() {
    let mut q = make_toy_problem(ToyKind::ConstraintOnly);
    q.beta0 = 1.0;
    let sched = toy_schedule(BarrierSchedule::default());
    let t = asblo_train(&q, &sched, 300, 1e-2, |_| {}).unwrap();
    assert!(t.final_beta[0].abs() <= 0.02, "{:?}", t.final_beta);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn decomposition_sums_exactly(beta in -1.0f64..4.0, s in 1e-3f64..1e-1) {
        let q = make_toy_problem(ToyKind::Quadratic);
        let sched = toy_schedule(BarrierSchedule::constant(s));
        let hg = hypergradient(&q, &[beta], &warm(beta), &sched, 0).unwrap();
        prop_assert_eq!(hg.total[0], hg.explicit_part[0] + hg.implicit_part[0]);
    }

    #[test]
    fn barrier_derived_constants_are_smooth_and_nonnegative(kappa in 0.05f64..1.0, slack in 0.0f64..2.0) {
        let eta = Eta::derive(kappa, -(kappa.ln() + 1.5) - slack).unwrap();
        let (a, b) = (barrier_p(-kappa, 1.0, kappa, &eta), barrier_p(-kappa * (1.0 + 1e-12), 1.0, kappa, &eta));
        prop_assert!((a - b).abs() < 1e-9);
        for z in [-1e3, -100.0, -10.0, -kappa * 2.0, -kappa, -kappa / 2.0, -1e-6] {
            prop_assert!(barrier_p(z, 1.0, kappa, &eta) >= -1e-12);
        }
    }
}
