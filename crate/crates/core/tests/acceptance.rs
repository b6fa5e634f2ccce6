//! Acceptance criteria A1-A10. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion. Non-flag arguments select criteria by
//! id, e.g. `cargo test --test acceptance -- A3 A4`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fmlab::assignment::solve_assignment;
use fmlab::bounds::{analytic_suite, validate_bound, Schedule};
use fmlab::checkpoint::AnyField;
use fmlab::coupling::{couple, CouplingBatch, CouplingMethod};
use fmlab::datasets::{DatasetName, DatasetSpec};
use fmlab::fields::{
    Activation, AnalyticField, BoxDomain, Conditioned, ControlSynthConfig, ControlSynthField, MlpConfig, MlpField,
    VectorField,
};
use fmlab::finetune::{field_omega, finetune, finetune_residual, mle_loss_and_grads, MleConfig, Sigma};
use fmlab::gradcheck::grad_check;
use fmlab::linalg::{norm2, sym_eig_max, Mat};
use fmlab::metrics::{heldout_pairs, reconstruction_mse, wasserstein2, FlowModel};
use fmlab::params::ParamStore;
use fmlab::rng::Rng;
use fmlab::solvers::{integrate, SolverConfig};
use fmlab::stability::{
    contraction_probe, contraction_region, lemma2_violations, search_contraction, verify_iss, ContractionLyapunov,
    IssMultipliers, StabilityCertificate, DEFAULT_TOL,
};
use fmlab::train::{cfm_loss_and_grads, pretrain, sample_times, DatasetPairs, PairSampler, TrainConfig};

mod common;
use common::{brute_min_cost, char_poly, largest_root, slope};

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_batch(n: usize, rng: &mut Rng) -> CouplingBatch {
    let x0 = Mat::from_vec(n, 2, (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
    let x1 = Mat::from_vec(n, 2, (0..2 * n).map(|_| 1.0 + 0.5 * rng.normal()).collect()).unwrap();
    couple(&x0, &x1, CouplingMethod::Independent).unwrap()
}

fn small_mlp() -> MlpConfig {
    MlpConfig {
        dim: 2,
        hidden: vec![4],
        time_features: 2,
    }
}

fn small_cs() -> ControlSynthConfig {
    ControlSynthConfig {
        dim: 2,
        blocks: vec![(3, Activation::Tanh)],
        input_dim: 2,
    }
}

/// Grad-check a loss over a field rebuilt from the perturbed store.
fn check_field<F>(store: &mut ParamStore, loss: F) -> f64
where
    F: Fn(&ParamStore) -> fmlab::Result<(f64, Vec<Option<Mat>>)>,
{
    grad_check(
        |p: &mut ParamStore, want: bool| {
            let (l, g) = loss(p)?;
            if want {
                p.store_grads(g);
            }
            Ok(l)
        },
        store,
        1e-5,
    )
    .unwrap()
    .max_rel_error
}

fn a1_gradients() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = Rng::new(seed);
        let batch = random_batch(5, &mut rng);
        let t = sample_times(5, &mut rng);
        let solver = SolverConfig::euler(8);
        let sigma = Sigma::Scalar(1.0);

        let mut mlp = MlpField::new(small_mlp(), &mut rng).unwrap().params().clone();
        worst = worst.max(check_field(&mut mlp.clone(), |p| {
            cfm_loss_and_grads(&MlpField::from_params(small_mlp(), p.clone())?, &batch, &t)
        }));
        worst = worst.max(check_field(&mut mlp, |p| {
            mle_loss_and_grads(&MlpField::from_params(small_mlp(), p.clone())?, &batch, &solver, &sigma)
        }));

        let mut cs = ControlSynthField::new(small_cs(), 0.5, &mut rng).unwrap().params().clone();
        worst = worst.max(check_field(&mut cs.clone(), |p| {
            cfm_loss_and_grads(&ControlSynthField::from_params(small_cs(), p.clone())?, &batch, &t)
        }));
        worst = worst.max(check_field(&mut cs, |p| {
            mle_loss_and_grads(&ControlSynthField::from_params(small_cs(), p.clone())?, &batch, &solver, &sigma)
        }));
    }
    ensure(worst <= 1e-4, format!("max relative error {worst:.2e} over 10 seeds, cfm and mle, mlp and controlsynth"))
}

fn a2_solver_orders() -> Verdict {
    let f = AnalyticField::decay(1);
    let exact = (-1f64).exp();
    let taus: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
    let errs = |make: fn(usize) -> SolverConfig| -> Vec<f64> {
        taus.iter()
            .map(|t| {
                let cfg = make((1.0 / t).round() as usize);
                (integrate(&f, &[1.0], 0.0, 1.0, &cfg).unwrap().final_state()[0] - exact).abs()
            })
            .collect()
    };
    let euler = slope(&taus, &errs(SolverConfig::euler));
    let rk4 = slope(&taus, &errs(SolverConfig::rk4));

    let rtol = 1e-8;
    let mut dopri_err: f64 = 0.0;
    let rotation = AnalyticField::linear(Mat::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]])).unwrap();
    for (field, x0) in [(AnalyticField::decay(2), vec![1.0, -2.0]), (rotation, vec![1.0, 0.5])] {
        let tr = integrate(&field, &x0, 0.0, 1.0, &SolverConfig::dopri5(rtol, rtol)).unwrap();
        let truth = field.exact_flow(&x0, 1.0).unwrap();
        let e = tr.final_state().iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        dopri_err = dopri_err.max(e);
    }
    ensure(
        (euler - 1.0).abs() <= 0.1 && (rk4 - 4.0).abs() <= 0.3 && dopri_err <= 10.0 * rtol,
        format!("euler slope {euler:.3}, rk4 slope {rk4:.3}, dopri5 error {dopri_err:.2e} (limit {:.0e})", 10.0 * rtol),
    )
}

struct Evaluation {
    recon: f64,
    w2: f64,
}

fn evaluate(model: &FlowModel, held: &CouplingBatch, noise: &Mat, data: &Mat, solver: &SolverConfig) -> Evaluation {
    Evaluation {
        recon: reconstruction_mse(held, model, solver).unwrap().mse,
        w2: wasserstein2(&model.sample(noise, solver).unwrap().final_states, data).unwrap(),
    }
}

fn a3_finetune_improves() -> Verdict {
    let solver = SolverConfig::euler(16);
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut pairs = DatasetPairs {
            source: DatasetSpec::standard_gaussian(1),
            target: DatasetSpec::new(DatasetName::TwoMoons, 1),
        };
        let mut f = MlpField::new(MlpConfig::default(), &mut Rng::new(seed)).unwrap();
        let train = TrainConfig {
            steps: 2000,
            batch_size: 128,
            lr: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        pretrain(&mut f, &mut pairs, &train).unwrap();

        let mut rng = Rng::new(1000 + seed);
        let held = heldout_pairs(&mut pairs, 2048, 128, CouplingMethod::MinibatchOt, &mut rng).unwrap();
        let (noise, data) = pairs.draw(512, &mut rng).unwrap();
        let before = evaluate(&FlowModel::new(AnyField::Mlp(f.clone())), &held, &noise, &data, &solver);

        let mle = MleConfig {
            steps: 200,
            batch_size: 128,
            lr: 1e-4,
            seed,
            ..MleConfig::default()
        };
        finetune(&mut f, &mut pairs, &mle).unwrap();
        let after = evaluate(&FlowModel::new(AnyField::Mlp(f)), &held, &noise, &data, &solver);

        let ok = after.recon < before.recon && after.w2 <= 1.1 * before.w2;
        passed += ok as usize;
        lines.push(format!(
            "seed {seed}: mse {:.4}->{:.4} w2 {:.4}->{:.4}{}",
            before.recon,
            after.recon,
            before.w2,
            after.w2,
            if ok { "" } else { " (miss)" }
        ));
    }
    ensure(passed >= 4, format!("{passed}/5 seeds; {}", lines.join("; ")))
}

fn a4_residual() -> Verdict {
    let solver = SolverConfig::euler(16);
    let mut identity_ok = true;
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut pairs = DatasetPairs {
            source: DatasetSpec::standard_gaussian(1),
            target: DatasetSpec::standard_gaussian(1).with_shift([2.0, 0.0]),
        };
        let mut f = MlpField::new(MlpConfig::default(), &mut Rng::new(seed)).unwrap();
        let train = TrainConfig {
            steps: 500,
            batch_size: 128,
            lr: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        pretrain(&mut f, &mut pairs, &train).unwrap();
        let base = AnyField::Mlp(f);

        let mut rng = Rng::new(1000 + seed);
        let held = heldout_pairs(&mut pairs, 2048, 128, CouplingMethod::MinibatchOt, &mut rng).unwrap();
        let (noise, data) = pairs.draw(512, &mut rng).unwrap();
        let plain = FlowModel::new(base.clone());
        let before = evaluate(&plain, &held, &noise, &data, &solver);

        let zero = ControlSynthField::zeros(ControlSynthConfig::default_for(2)).unwrap();
        let stacked = FlowModel::with_residual(base.clone(), zero, 0.5).unwrap();
        identity_ok &= plain.sample(&held.x0, &solver).unwrap().final_states
            == stacked.sample(&held.x0, &solver).unwrap().final_states;
        identity_ok &= reconstruction_mse(&held, &stacked, &solver).unwrap().mse.to_bits() == before.recon.to_bits();

        let mle = MleConfig {
            steps: 200,
            batch_size: 128,
            lr: 1e-3,
            horizon: 0.5,
            lambda_omega: 0.05,
            seed,
            ..MleConfig::default()
        };
        let mut residual = ControlSynthField::new(ControlSynthConfig::default_for(2), 1.0, &mut Rng::new(seed)).unwrap();
        finetune_residual(&base, &mut residual, &mut pairs, &mle).unwrap();
        let omega = field_omega(&residual, mle.eps_a).unwrap();
        let penalty = mle.lambda_omega * omega.max(0.0);
        let after = evaluate(
            &FlowModel::with_residual(base, residual, mle.horizon).unwrap(),
            &held,
            &noise,
            &data,
            &solver,
        );
        let ok = after.recon < before.recon && penalty == 0.0;
        passed += ok as usize;
        lines.push(format!(
            "seed {seed}: mse {:.4}->{:.4} w2 {:.4}->{:.4} omega {omega:.3} penalty {penalty}{}",
            before.recon,
            after.recon,
            before.w2,
            after.w2,
            if ok { "" } else { " (miss)" }
        ));
    }
    ensure(
        identity_ok && passed >= 4,
        format!("zero residual bit-identical: {identity_ok}; {passed}/5 seeds; {}", lines.join("; ")),
    )
}

fn a5_bounds() -> Verdict {
    let cases = analytic_suite();
    let deltas: Vec<f64> = cases.iter().map(|c| c.delta).collect();
    let spans = [0.0, 0.05, 0.1].iter().all(|d| deltas.contains(d))
        && cases.iter().any(|c| c.schedule.is_uniform())
        && cases.iter().any(|c| matches!(c.schedule, Schedule::Geometric { .. }));
    let reports = match validate_bound(&cases) {
        Ok(r) => r,
        Err(e) => return Err(format!("bound violated: {e}")),
    };
    let eq4 = reports.iter().filter(|r| r.measured <= r.bound_variable).count();
    let uniform: Vec<_> = reports.iter().filter_map(|r| r.bound_uniform.map(|b| (r.measured, b))).collect();
    let eq5 = uniform.iter().filter(|(m, b)| m <= b).count();
    ensure(
        spans && reports.len() >= 12 && eq4 == reports.len() && eq5 == uniform.len() && !uniform.is_empty(),
        format!(
            "{} cases, variable-step bound held in {eq4}, uniform-step bound held in {eq5}/{}",
            reports.len(),
            uniform.len()
        ),
    )
}

fn scalar_iss(a0: f64) -> (ControlSynthField, StabilityCertificate) {
    let mut f = ControlSynthField::zeros(ControlSynthConfig {
        dim: 1,
        blocks: vec![],
        input_dim: 1,
    })
    .unwrap();
    f.set("a0", Mat::filled(1, 1, a0)).unwrap();
    let cert = StabilityCertificate {
        iss: Some(IssMultipliers {
            p: Mat::filled(1, 1, 1.0),
            lambda: vec![],
            xi: vec![vec![0.0]],
            upsilon0: vec![],
            upsilon: vec![],
            phi: Mat::filled(1, 1, 1.0),
        }),
        contraction: None,
    };
    (f, cert)
}

fn a6_certificates() -> Verdict {
    let (stable, cert) = scalar_iss(-1.0);
    let q = fmlab::stability::assemble_q(&stable, cert.iss.as_ref().unwrap()).unwrap();
    let hand_ok = q == Mat::from_rows(&[&[-2.0, 1.0], &[1.0, -1.0]]) && verify_iss(&stable, &cert, DEFAULT_TOL).unwrap().iss_ok;
    let (unstable, cert) = scalar_iss(1.0);
    let unstable_rejected = !verify_iss(&unstable, &cert, DEFAULT_TOL).unwrap().iss_ok;

    let solver = SolverConfig::rk4(100);
    let probe_box = BoxDomain::cube(2, 2.0);
    let mut certified = 0;
    let mut probes = 0;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for seed in 0..30u64 {
        let mut rng = Rng::new(seed);
        let act = [Activation::Tanh, Activation::LeakyRelu { slope: 0.2 }][seed as usize % 2];
        let cfg = ControlSynthConfig {
            dim: 2,
            blocks: vec![(2 + rng.below(3), act)],
            input_dim: 2,
        };
        let decay = rng.uniform_in(-0.5, 3.0);
        let mut f = ControlSynthField::new(cfg, decay, &mut rng).unwrap();
        let k = f.block_width(0);
        let a1 = Mat::from_vec(2, k, (0..2 * k).map(|_| 0.5 * rng.normal()).collect()).unwrap();
        f.set("a1", a1).unwrap();
        let found = search_contraction(&f, DEFAULT_TOL).unwrap();
        if !found.verdict.contraction_ok {
            continue;
        }
        certified += 1;
        let region = contraction_region(&f, &found.certificate, DEFAULT_TOL, &probe_box, 41).unwrap();
        let lyap = ContractionLyapunov::new(&f, &found.certificate).unwrap();
        let u = Mat::row_vector(&probe_box.sample(&mut rng));
        let cond = Conditioned::new(&f, u).unwrap();
        let mut done = 0;
        while done < 100 {
            let x0 = probe_box.sample(&mut rng);
            let d0 = probe_box.sample(&mut rng);
            if norm2(&d0) == 0.0 || !region.contains(&lyap, &d0) {
                continue;
            }
            let p = contraction_probe(&cond, &x0, &d0, 1.0, &solver, 10).unwrap();
            worst = worst.max(p.ratio);
            failures += !(p.ratio < 1.0) as usize;
            done += 1;
        }
        probes += done;
    }
    ensure(
        hand_ok && unstable_rejected && certified >= 5 && failures == 0,
        format!(
            "hand ISS example verifies: {hand_ok}; A0=+1 rejected: {unstable_rejected}; \
             {certified}/30 random fields certified, {probes} probes, max ratio {worst:.4}, {failures} failures"
        ),
    )
}

fn a7_lemma2() -> Verdict {
    let mut rng = Rng::new(7);
    let mut lines = Vec::new();
    let mut total = 0;
    for act in [Activation::Tanh, Activation::LeakyRelu { slope: 0.2 }, Activation::LeakyRelu { slope: 2.0 }] {
        let bad = lemma2_violations(act, 4, 3, 100_000, &mut rng);
        total += bad;
        lines.push(format!("{act:?}: {bad}"));
    }
    ensure(total == 0, format!("violations per 1e5 probes: {}", lines.join(", ")))
}

fn a8_oracles() -> Verdict {
    let mut rng = Rng::new(8);
    let mut mismatches = [0usize; 3];
    for i in 0..200 {
        let n = 1 + i % 6;
        let cost = Mat::from_vec(n, n, (0..n * n).map(|_| rng.uniform_in(-10.0, 10.0)).collect()).unwrap();
        let perm = solve_assignment(&cost).unwrap();
        let got: f64 = perm.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
        mismatches[0] += ((got - brute_min_cost(&cost)).abs() > 1e-6) as usize;

        let n = 1 + i % 4;
        let m = Mat::from_vec(n, n, (0..n * n).map(|_| rng.uniform_in(-5.0, 5.0)).collect()).unwrap().symmetrize();
        let upper = (0..n).map(|r| m.row(r).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max) + 1.0;
        let oracle = largest_root(&char_poly(&m), upper);
        mismatches[1] += ((sym_eig_max(&m).unwrap() - oracle).abs() > 1e-6) as usize;

        let k = 1 + i % 6;
        let a = Mat::from_vec(k, 2, (0..2 * k).map(|_| rng.normal()).collect()).unwrap();
        let b = Mat::from_vec(k, 2, (0..2 * k).map(|_| rng.normal() + 1.0).collect()).unwrap();
        let mut c = Mat::zeros(k, k);
        for r in 0..k {
            for s in 0..k {
                c[(r, s)] = a.row(r).iter().zip(b.row(s)).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let oracle = (brute_min_cost(&c) / k as f64).sqrt();
        mismatches[2] += ((wasserstein2(&a, &b).unwrap() - oracle).abs() > 1e-6) as usize;
    }
    ensure(
        mismatches == [0, 0, 0],
        format!(
            "mismatches over 200 instances: assignment {}, eigenvalue {}, w2 {}",
            mismatches[0], mismatches[1], mismatches[2]
        ),
    )
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fmlab"))
        .args(args)
        .current_dir(cwd)
        .env_remove(fmlab::config::OUTPUT_ROOT_ENV)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("fmlab {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn a9_determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(
        dir.path().join("det.toml"),
        "[train]\nsteps = 60\nbatch_size = 32\n[field]\nhidden = [16, 16]\n[dataset]\neval_samples = 64\n",
    )
    .map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        run_cli(&["pretrain", "-c", "det.toml", "-o", &format!("{run}/pre"), "--seed", "5"], dir.path())?;
        run_cli(
            &[
                "sample",
                "-c",
                "det.toml",
                "-o",
                &format!("{run}/sample"),
                "--seed",
                "5",
                "--checkpoint",
                &format!("{run}/pre/pretrained.json"),
                "--trajectories",
                "2",
            ],
            dir.path(),
        )?;
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).map_err(|e| format!("{p}: {e}"));
    let mut same = Vec::new();
    for file in ["pre/pretrained.json", "pre/loss.csv", "sample/samples.csv", "sample/trajectories/traj_0001.csv"] {
        same.push((file, read(&format!("a/{file}"))? == read(&format!("b/{file}"))?));
    }

    // library level: identical configs give identical checkpoints
    let lib = || {
        let mut f = MlpField::new(MlpConfig::default(), &mut Rng::new(11)).unwrap();
        let mut pairs = DatasetPairs {
            source: DatasetSpec::standard_gaussian(1),
            target: DatasetSpec::new(DatasetName::EightGaussians, 1),
        };
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 64,
            seed: 11,
            ..TrainConfig::default()
        };
        pretrain(&mut f, &mut pairs, &cfg).unwrap().final_checkpoint().content_hash()
    };
    let lib_same = lib() == lib();
    let all = same.iter().all(|(_, s)| *s) && lib_same;
    ensure(
        all,
        format!(
            "cli artifacts identical: {}; library checkpoints identical: {lib_same}",
            same.iter().map(|(f, s)| format!("{f}={s}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn a10_nfe() -> Verdict {
    let base = AnyField::Mlp(MlpField::new(small_mlp(), &mut Rng::new(3)).unwrap());
    let residual = ControlSynthField::new(ControlSynthConfig::default_for(2), 1.0, &mut Rng::new(4)).unwrap();
    let mut rng = Rng::new(5);
    let x0 = Mat::from_vec(16, 2, (0..32).map(|_| rng.normal()).collect()).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, model, solves) in [
        ("base", FlowModel::new(base.clone()), 1),
        ("base+residual", FlowModel::with_residual(base, residual, 0.5).unwrap(), 2),
    ] {
        for steps in [1, 16, 100] {
            let e = model.sample(&x0, &SolverConfig::euler(steps)).unwrap();
            let r = model.sample(&x0, &SolverConfig::rk4(steps)).unwrap();
            ok &= e.nfe_per_sample.iter().all(|&n| n == steps * solves);
            ok &= r.nfe_per_sample.iter().all(|&n| n == 4 * steps * solves);
        }
        let adaptive = SolverConfig::dopri5(1e-6, 1e-6);
        let batch = model.sample(&x0, &adaptive).unwrap();
        let mut per_sample = Vec::new();
        for i in 0..x0.rows() {
            let tr = model.trajectory(x0.row(i), &adaptive).unwrap();
            ok &= tr.nfe == 6 * (tr.accepted_steps + tr.rejected_steps) + solves;
            per_sample.push(tr.nfe);
        }
        ok &= per_sample == batch.nfe_per_sample;
        let mean = per_sample.iter().sum::<usize>() as f64 / per_sample.len() as f64;
        ok &= batch.mean_nfe() == mean;
        notes.push(format!("{name}: dopri5 mean nfe {mean:.2}"));
    }
    ensure(
        ok,
        format!("fixed-step nfe = steps x solves, dopri5 nfe = 6 x attempts + 1 per solve; {}", notes.join(", ")),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let selected: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Verdict); 10] = [
        ("A1", "gradient integrity", a1_gradients),
        ("A2", "solver orders", a2_solver_orders),
        ("A3", "fine-tuning improves reconstruction", a3_finetune_improves),
        ("A4", "residual fine-tuning", a4_residual),
        ("A5", "error bound validity", a5_bounds),
        ("A6", "certificate soundness", a6_certificates),
        ("A7", "Lemma 2 inequality", a7_lemma2),
        ("A8", "oracle equivalences", a8_oracles),
        ("A9", "determinism", a9_determinism),
        ("A10", "NFE accounting", a10_nfe),
    ];
    let mut failed = 0;
    for (id, title, run) in criteria {
        if !selected.is_empty() && !selected.iter().any(|s| s.as_str() == id) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("{id} PASS {title} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {title} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
