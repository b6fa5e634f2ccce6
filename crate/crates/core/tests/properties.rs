//! Property tests for the invariants of each module.

use fmlab::bounds::{bound_uniform_step, bound_variable_step, gronwall_discrete};
use fmlab::coupling::{couple, CouplingMethod};
use fmlab::datasets::{sample, DatasetName, DatasetSpec};
use fmlab::fields::{Activation, AnalyticField, ControlSynthConfig, ControlSynthField, MlpConfig, MlpField, VectorField};
use fmlab::linalg::{sym_eig_min, Mat};
use fmlab::metrics::straightness_deviation;
use fmlab::optim::clip_grad_norm;
use fmlab::params::ParamStore;
use fmlab::rng::Rng;
use fmlab::solvers::{integrate, SolverConfig, Trajectory};
use fmlab::stability::{
    assemble_q, assemble_qtilde, lyapunov_value, search_contraction, ContractionMultipliers, CrossTerm, IssMultipliers,
    StabilityCertificate, DEFAULT_TOL,
};
use fmlab::train::cfm_loss;
use proptest::prelude::*;

fn mat(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn nonneg(rng: &mut Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.uniform()).collect()
}

fn psd(rng: &mut Rng, n: usize, shift: f64) -> Mat {
    let b = mat(rng, n, n, 1.0);
    b.matmul(&b.transpose()).symmetrize().add(&Mat::identity(n).scale(shift))
}

fn activation(i: usize) -> Activation {
    match i % 3 {
        0 => Activation::Tanh,
        1 => Activation::LeakyRelu { slope: 0.2 },
        _ => Activation::LeakyRelu { slope: 1.5 },
    }
}

/// Random field with `m` blocks of random widths and random weights.
fn random_field(seed: u64, n: usize, m: usize) -> ControlSynthField {
    let mut rng = Rng::new(seed);
    let blocks = (0..m).map(|j| (1 + rng.below(4), activation(j + seed as usize))).collect();
    let cfg = ControlSynthConfig {
        dim: n,
        blocks,
        input_dim: n,
    };
    let mut f = ControlSynthField::new(cfg, 1.0, &mut rng).unwrap();
    f.set("a0", mat(&mut rng, n, n, 1.0)).unwrap();
    for j in 0..m {
        let k = f.block_width(j);
        f.set(&format!("a{}", j + 1), mat(&mut rng, n, k, 1.0)).unwrap();
    }
    f
}

fn random_iss(f: &ControlSynthField, rng: &mut Rng) -> IssMultipliers {
    let n = f.dim();
    let m = f.num_blocks();
    let mut upsilon = Vec::new();
    for s in 0..m {
        for r in s + 1..m {
            upsilon.push(CrossTerm {
                s,
                r,
                diag: nonneg(rng, f.block_width(s).min(f.block_width(r))),
            });
        }
    }
    IssMultipliers {
        p: psd(rng, n, 0.0),
        lambda: (0..m).map(|j| nonneg(rng, f.block_width(j))).collect(),
        xi: std::iter::once(nonneg(rng, n))
            .chain((0..m).map(|j| nonneg(rng, f.block_width(j))))
            .collect(),
        upsilon0: (0..m).map(|j| nonneg(rng, f.block_width(j))).collect(),
        upsilon,
        phi: psd(rng, n, 0.1),
    }
}

fn random_contraction(f: &ControlSynthField, rng: &mut Rng) -> ContractionMultipliers {
    let n = f.dim();
    let m = f.num_blocks();
    let mut upsilon_tilde = Vec::new();
    for j in 0..m {
        for r in 0..m {
            upsilon_tilde.push(CrossTerm {
                s: j,
                r,
                diag: nonneg(rng, f.block_width(j).min(f.block_width(r))),
            });
        }
    }
    ContractionMultipliers {
        p_tilde: psd(rng, n, 0.1),
        lambda_tilde: (0..m).map(|j| nonneg(rng, f.block_width(j))).collect(),
        xi_tilde0: nonneg(rng, n),
        upsilon_tilde,
        gamma_blocks: (0..m).map(|j| nonneg(rng, f.block_width(j))).collect(),
        omega_blocks: (0..m).map(|j| nonneg(rng, f.block_width(j))).collect(),
        gamma: 0.1 + rng.uniform(),
        theta: 0.1 + rng.uniform(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bound_nondecreasing_in_sources(
        l in 0.01..5.0f64,
        base in prop::array::uniform3(0.0..2.0f64),
        bump in prop::array::uniform3(0.0..1.0f64),
        taus in prop::collection::vec(0.001..0.5f64, 1..20),
    ) {
        let [d, m, e] = base;
        let b0 = bound_variable_step(l, d, m, e, &taus).unwrap();
        prop_assert!(bound_variable_step(l, d + bump[0], m, e, &taus).unwrap() >= b0);
        prop_assert!(bound_variable_step(l, d, m + bump[1], e, &taus).unwrap() >= b0);
        prop_assert!(bound_variable_step(l, d, m, e + bump[2], &taus).unwrap() >= b0);
        let tau0 = taus[0].min(1.0);
        let u0 = bound_uniform_step(l, d, m, e, tau0).unwrap();
        prop_assert!(bound_uniform_step(l, d + bump[0], m + bump[1], e + bump[2], tau0).unwrap() >= u0);
    }

    #[test]
    fn gronwall_dominates_recursion(
        lambda in 0.0..3.0f64,
        (taus, xis) in (1usize..30).prop_flat_map(|n| (
            prop::collection::vec(0.0..0.3f64, n),
            prop::collection::vec(0.0..1.0f64, n + 1),
        )),
    ) {
        let bounds = gronwall_discrete(lambda, &taus, &xis).unwrap();
        // V_0 = ξ_0, V_n = λ Σ_{1≤j<n} τ_j V_j + Σ_{j≤n} ξ_j
        let mut v = vec![xis[0]];
        for n in 1..=taus.len() {
            let feedback: f64 = (1..n).map(|j| taus[j - 1] * v[j]).sum();
            let source: f64 = xis[..=n].iter().sum();
            v.push(lambda * feedback + source);
            prop_assert!(v[n] <= bounds[n - 1] * (1.0 + 1e-12), "n={} {} > {}", n, v[n], bounds[n - 1]);
        }
    }

    #[test]
    fn q_matrices_exactly_symmetric(seed in 0u64..10_000, n in 1usize..4, m in 0usize..4) {
        let f = random_field(seed, n, m);
        let mut rng = Rng::new(seed ^ 0x5eed);
        let q = assemble_q(&f, &random_iss(&f, &mut rng)).unwrap();
        prop_assert!(q.asymmetry() <= 1e-12);
        prop_assert_eq!(q.rows(), 2 * n + (0..m).map(|j| f.block_width(j)).sum::<usize>());
        let qt = assemble_qtilde(&f, &random_contraction(&f, &mut rng)).unwrap();
        prop_assert!(qt.asymmetry() <= 1e-12);
        prop_assert_eq!(qt.rows(), n + 2 * (0..m).map(|j| f.block_width(j)).sum::<usize>());
    }

    #[test]
    fn lyapunov_positive_off_origin(seed in 0u64..10_000, n in 1usize..4, m in 0usize..3) {
        let f = random_field(seed, n, m);
        let mut rng = Rng::new(seed + 1);
        let cert = StabilityCertificate { iss: None, contraction: Some(random_contraction(&f, &mut rng)) };
        prop_assert_eq!(lyapunov_value(&cert, &vec![0.0; n], &f).unwrap(), 0.0);
        for _ in 0..100 {
            let xi: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
            prop_assert!(lyapunov_value(&cert, &xi, &f).unwrap() > 0.0);
        }
    }

    #[test]
    fn straightness_rigid_invariant(
        pts in prop::collection::vec(prop::array::uniform2(-3.0..3.0f64), 3..12),
        angle in 0.0..std::f64::consts::TAU,
        shift in prop::array::uniform2(-5.0..5.0f64),
    ) {
        let traj = |states: Vec<Vec<f64>>| Trajectory {
            times: (0..states.len()).map(|i| i as f64).collect(),
            states,
            nfe: 0,
            accepted_steps: 0,
            rejected_steps: 0,
        };
        let chord = ((pts[pts.len() - 1][0] - pts[0][0]).powi(2) + (pts[pts.len() - 1][1] - pts[0][1]).powi(2)).sqrt();
        prop_assume!(chord > 1e-3);
        let (s, c) = angle.sin_cos();
        let moved: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| vec![c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]])
            .collect();
        let a = straightness_deviation(&traj(pts.iter().map(|p| p.to_vec()).collect())).unwrap();
        let b = straightness_deviation(&traj(moved)).unwrap();
        prop_assert!(!a.degenerate && !b.degenerate);
        prop_assert!((a.value - b.value).abs() <= 1e-9 * (1.0 + a.value), "{} vs {}", a.value, b.value);
    }

    #[test]
    fn clipped_norm_within_threshold(
        grads in prop::collection::vec(-100.0..100.0f64, 1..40),
        max_norm in 1e-3..10.0f64,
    ) {
        let mut p = ParamStore::new();
        p.push("w", Mat::zeros(1, grads.len()), true);
        p.store_grads(vec![Some(Mat::row_vector(&grads))]);
        let before = clip_grad_norm(&mut p, max_norm);
        prop_assert!(p.grad_norm() <= max_norm + 1e-9);
        if before <= max_norm {
            prop_assert_eq!(p.grad_norm(), before);
        }
    }

    #[test]
    fn ot_no_worse_and_preserves_marginals(seed in 0u64..10_000, n in 1usize..40) {
        let mut rng = Rng::new(seed);
        let x0 = mat(&mut rng, n, 2, 1.0);
        let x1 = mat(&mut rng, n, 2, 2.0);
        let ot = couple(&x0, &x1, CouplingMethod::MinibatchOt).unwrap();
        let ind = couple(&x0, &x1, CouplingMethod::Independent).unwrap();
        prop_assert!(ot.cost <= ind.cost + 1e-9);
        prop_assert_eq!(&ot.x0, &x0);
        let rows = |m: &Mat| {
            let mut r: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            r
        };
        prop_assert_eq!(rows(&ot.x1), rows(&x1));
    }

    #[test]
    fn cfm_endpoints_reduce_to_field_values(seed in 0u64..1000, n in 1usize..8) {
        let f = MlpField::new(MlpConfig { hidden: vec![8], ..MlpConfig::default() }, &mut Rng::new(seed)).unwrap();
        let mut rng = Rng::new(seed + 7);
        let b = couple(&mat(&mut rng, n, 2, 1.0), &mat(&mut rng, n, 2, 1.0), CouplingMethod::Independent).unwrap();
        for (t, x) in [(0.0, &b.x0), (1.0, &b.x1)] {
            let direct: f64 = (0..n)
                .map(|i| {
                    let v = f.eval(t, x.row(i)).unwrap();
                    (0..2).map(|k| (v[k] - (b.x1[(i, k)] - b.x0[(i, k)])).powi(2)).sum::<f64>()
                })
                .sum::<f64>() / n as f64;
            let loss = cfm_loss(&f, &b, &vec![t; n]).unwrap();
            prop_assert!((loss - direct).abs() <= 1e-12 * (1.0 + direct));
        }
    }

    #[test]
    fn datasets_deterministic(seed in 0u64..10_000, which in 0usize..5, count in 1usize..200) {
        let name = DatasetName::ALL[which];
        let spec = DatasetSpec::new(name, count);
        prop_assert_eq!(sample(&spec, &mut Rng::new(seed)).unwrap(), sample(&spec, &mut Rng::new(seed)).unwrap());
    }

    #[test]
    fn solver_nfe_bookkeeping(a in prop::array::uniform4(-2.0..2.0f64), steps in 1usize..50, tol in 1e-9..1e-3f64) {
        let f = AnalyticField::linear(Mat::from_vec(2, 2, a.to_vec()).unwrap()).unwrap();
        let x0 = [0.7, -0.3];
        prop_assert_eq!(integrate(&f, &x0, 0.0, 1.0, &SolverConfig::euler(steps)).unwrap().nfe, steps);
        prop_assert_eq!(integrate(&f, &x0, 0.0, 1.0, &SolverConfig::rk4(steps)).unwrap().nfe, 4 * steps);
        let tr = integrate(&f, &x0, 0.0, 1.0, &SolverConfig::dopri5(tol, tol)).unwrap();
        prop_assert_eq!(tr.nfe, 6 * (tr.accepted_steps + tr.rejected_steps) + 1);
    }
}

#[test]
fn certified_lyapunov_positive_on_many_probes() {
    let mut certified = 0;
    for seed in 0..20 {
        let mut f = random_field(seed, 2, 1);
        f.set("a0", Mat::identity(2).scale(-2.0)).unwrap();
        let found = search_contraction(&f, DEFAULT_TOL).unwrap();
        if !found.verdict.contraction_ok {
            continue;
        }
        certified += 1;
        let p = &found.certificate.contraction.as_ref().unwrap().p_tilde;
        assert!(sym_eig_min(p).unwrap() > 0.0);
        let mut rng = Rng::new(seed);
        assert_eq!(lyapunov_value(&found.certificate, &[0.0, 0.0], &f).unwrap(), 0.0);
        for _ in 0..10_000 {
            let xi = [5.0 * rng.normal(), 5.0 * rng.normal()];
            assert!(lyapunov_value(&found.certificate, &xi, &f).unwrap() > 0.0);
        }
    }
    assert!(certified >= 10, "only {certified} certified fields");
}
