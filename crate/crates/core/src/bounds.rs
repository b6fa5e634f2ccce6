//! Train-to-inference error bounds for Euler sampling and their empirical
//! check against analytic flows.
//!
//! With truth field `u` (Lipschitz `L_u`), learned field `v`
//! (`‖v − u‖ ≤ δ`), path acceleration bound `M` and initial error `ε₀`,
//! Euler on steps `τ_0 … τ_{N−1}` satisfies
//!
//! * variable steps: `|ε_N| ≤ exp(L_u t_{N−1}) (Σ_j (δτ_j + ½Mτ_j²) + ε₀)`
//!   with `t_{N−1} = Σ_{j<N−1} τ_j`;
//! * uniform steps, `Nτ₀ = 1`: `|ε_N| ≤ e^{L_u} ε₀ + (Mτ₀ + 2δ)/(2L_u) (e^{L_u} − 1)`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{AnalyticField, VectorField};
use crate::linalg::{norm2, Mat};

fn check_sources(l_u: f64, delta: f64, m: f64, eps0: f64) -> Result<()> {
    for (name, v) in [("delta", delta), ("M", m), ("eps0", eps0)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    if !(l_u > 0.0 && l_u.is_finite()) {
        return Err(Error::Config(format!("L_u must be finite and > 0, got {l_u}")));
    }
    Ok(())
}

/// Variable-step bound.
pub fn bound_variable_step(l_u: f64, delta: f64, m: f64, eps0: f64, taus: &[f64]) -> Result<f64> {
    check_sources(l_u, delta, m, eps0)?;
    if taus.is_empty() || taus.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Config("step schedule must be nonempty with finite steps > 0".into()));
    }
    let t_prev: f64 = taus[..taus.len() - 1].iter().sum();
    let local: f64 = taus.iter().map(|&t| delta * t + 0.5 * m * t * t).sum();
    Ok((l_u * t_prev).exp() * (local + eps0))
}

/// Uniform-step bound on `[0, 1]` with step `tau0`.
pub fn bound_uniform_step(l_u: f64, delta: f64, m: f64, eps0: f64, tau0: f64) -> Result<f64> {
    check_sources(l_u, delta, m, eps0)?;
    if !(tau0 > 0.0 && tau0 <= 1.0) {
        return Err(Error::Config(format!("uniform step must lie in (0, 1], got {tau0}")));
    }
    let e = l_u.exp();
    Ok(e * eps0 + (m * tau0 + 2.0 * delta) / (2.0 * l_u) * (e - 1.0))
}

/// Discrete Grönwall bounds `exp(λ t_{n−1}) Σ_{j≤n} ξ_j` for `n = 1..=N`,
/// where `taus = [τ_1, …, τ_N]`, `xis = [ξ_0, …, ξ_N]` and
/// `t_k = τ_1 + … + τ_k`.
pub fn gronwall_discrete(lambda: f64, taus: &[f64], xis: &[f64]) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if xis.len() != taus.len() + 1 {
        return Err(Error::dim("Gronwall sequences (xi has one more entry than tau)", taus.len() + 1, xis.len()));
    }
    if taus.iter().chain(xis).any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Config("Gronwall sequences must be finite and nonnegative".into()));
    }
    let mut out = Vec::with_capacity(taus.len());
    let mut t_prev = 0.0;
    let mut xi_sum = xis[0];
    for n in 1..=taus.len() {
        xi_sum += xis[n];
        out.push((lambda * t_prev).exp() * xi_sum);
        t_prev += taus[n - 1];
    }
    Ok(out)
}

/// Step schedule on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Uniform { steps: usize },
    /// `τ_j ∝ ratio^j`, normalized to sum to 1.
    Geometric { steps: usize, ratio: f64 },
}

impl Schedule {
    pub fn taus(&self) -> Result<Vec<f64>> {
        match *self {
            Schedule::Uniform { steps } if steps > 0 => Ok(vec![1.0 / steps as f64; steps]),
            Schedule::Geometric { steps, ratio } if steps > 0 && ratio > 0.0 && ratio.is_finite() => {
                let raw: Vec<f64> = (0..steps).map(|j| ratio.powi(j as i32)).collect();
                let total: f64 = raw.iter().sum();
                Ok(raw.iter().map(|r| r / total).collect())
            }
            _ => Err(Error::Config(format!("invalid step schedule {self:?}"))),
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, Schedule::Uniform { .. })
    }

    fn label(&self) -> String {
        match self {
            Schedule::Uniform { steps } => format!("uniform{steps}"),
            Schedule::Geometric { steps, ratio } => format!("geom{steps}x{ratio}"),
        }
    }
}

/// One harness case: the learned field is `truth` plus a rotating offset of
/// norm `delta`, started at `x0 + eps0·e₁`.
#[derive(Clone, Debug)]
pub struct BoundCase {
    pub name: String,
    pub truth: AnalyticField,
    /// Lipschitz bound used in the formulas; at least the truth's constant.
    pub l_u: f64,
    pub delta: f64,
    pub omega: f64,
    pub eps0: f64,
    pub x0: Vec<f64>,
    pub schedule: Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub case: String,
    pub l_u: f64,
    pub delta: f64,
    pub m: f64,
    pub eps0: f64,
    pub taus: Vec<f64>,
    pub bound_variable: f64,
    /// Only for uniform schedules.
    pub bound_uniform: Option<f64>,
    pub measured: f64,
    pub pass: bool,
}

/// Euler on an arbitrary schedule starting at `t = 0`.
pub fn euler_schedule(field: &dyn VectorField, x0: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut t = 0.0;
    for &tau in taus {
        let v = field.eval(t, &x)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += tau * vi;
        }
        t += tau;
    }
    Ok(x)
}

fn within(measured: f64, bound: f64) -> bool {
    measured <= bound * (1.0 + 1e-12) + 1e-15
}

/// Run one case without asserting.
pub fn run_case(case: &BoundCase) -> Result<ErrorBoundReport> {
    let dim = case.truth.dim();
    if case.x0.len() != dim {
        return Err(Error::dim(format!("bound case {} start", case.name), dim, case.x0.len()));
    }
    if case.l_u < case.truth.lipschitz() {
        return Err(Error::Config(format!(
            "case {}: L_u = {} is below the field's Lipschitz constant {}",
            case.name,
            case.l_u,
            case.truth.lipschitz()
        )));
    }
    let taus = case.schedule.taus()?;
    let learned = AnalyticField::perturbed(case.truth.clone(), case.delta, case.omega, 0.3)?;
    let m = case
        .truth
        .second_derivative_bound(&case.x0, 1.0)
        .ok_or_else(|| Error::Unsupported("truth field needs a closed-form flow".into()))?;
    let exact = case.truth.exact_flow(&case.x0, 1.0).expect("closed-form flow");
    let mut start = case.x0.clone();
    start[0] += case.eps0;
    let end = euler_schedule(&learned, &start, &taus)?;
    let measured = norm2(&exact.iter().zip(&end).map(|(a, b)| a - b).collect::<Vec<_>>());
    let bound_variable = bound_variable_step(case.l_u, case.delta, m, case.eps0, &taus)?;
    let bound_uniform = if case.schedule.is_uniform() {
        Some(bound_uniform_step(case.l_u, case.delta, m, case.eps0, taus[0])?)
    } else {
        None
    };
    let pass = within(measured, bound_variable) && bound_uniform.is_none_or(|b| within(measured, b));
    Ok(ErrorBoundReport {
        case: case.name.clone(),
        l_u: case.l_u,
        delta: case.delta,
        m,
        eps0: case.eps0,
        taus,
        bound_variable,
        bound_uniform,
        measured,
        pass,
    })
}

/// Run every case; any violation is a hard failure carrying the full table.
pub fn validate_bound(cases: &[BoundCase]) -> Result<Vec<ErrorBoundReport>> {
    let reports = cases.iter().map(run_case).collect::<Result<Vec<_>>>()?;
    if reports.iter().any(|r| !r.pass) {
        return Err(Error::BoundViolation(format!("\n{}", report_csv(&reports))));
    }
    Ok(reports)
}

/// The shipped suite: three truth fields × δ ∈ {0, 0.05, 0.1} × uniform and
/// geometric schedules, plus initial-error cases.
pub fn analytic_suite() -> Vec<BoundCase> {
    let rotation = AnalyticField::linear(Mat::from_rows(&[&[-0.2, 0.8], &[-0.8, -0.2]])).expect("square");
    let truths = [
        ("decay", AnalyticField::decay(2), vec![1.0, -0.5]),
        ("growth", AnalyticField::growth(2), vec![0.5, 0.25]),
        ("rotation", rotation, vec![1.0, 0.0]),
    ];
    let schedules = [
        Schedule::Uniform { steps: 4 },
        Schedule::Uniform { steps: 32 },
        Schedule::Geometric { steps: 8, ratio: 1.5 },
        Schedule::Geometric { steps: 8, ratio: 0.7 },
    ];
    let mut cases = Vec::new();
    for (name, truth, x0) in &truths {
        for delta in [0.0, 0.05, 0.1] {
            for s in &schedules {
                cases.push(BoundCase {
                    name: format!("{name}-d{delta}-{}", s.label()),
                    truth: truth.clone(),
                    l_u: truth.lipschitz(),
                    delta,
                    omega: 3.0,
                    eps0: 0.0,
                    x0: x0.clone(),
                    schedule: s.clone(),
                });
            }
        }
        for s in &schedules[..2] {
            cases.push(BoundCase {
                name: format!("{name}-eps0.05-{}", s.label()),
                truth: truth.clone(),
                l_u: truth.lipschitz(),
                delta: 0.05,
                omega: 3.0,
                eps0: 0.05,
                x0: x0.clone(),
                schedule: s.clone(),
            });
        }
    }
    cases
}

pub const REPORT_HEADER: &str = "case,L_u,delta,M,eps0,bound4,bound5,measured,pass";

pub fn report_csv(reports: &[ErrorBoundReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        let b5 = r.bound_uniform.map(|b| format!("{b:?}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},{},{:?},{}",
            r.case, r.l_u, r.delta, r.m, r.eps0, r.bound_variable, b5, r.measured, r.pass
        );
    }
    s
}

pub fn write_report_csv(reports: &[ErrorBoundReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_csv(reports)).map_err(|e| Error::io(path, e))
}

/// Finite-difference estimate of `max |ẍ|` along a trajectory recorded on
/// a uniform grid. An estimate only: it can under-bound the true value.
pub fn estimate_second_derivative(times: &[f64], states: &[Vec<f64>]) -> Option<f64> {
    if times.len() < 3 || states.len() != times.len() {
        return None;
    }
    let mut best: f64 = 0.0;
    for k in 1..times.len() - 1 {
        let h = times[k + 1] - times[k];
        let acc: Vec<f64> = (0..states[k].len())
            .map(|i| (states[k + 1][i] - 2.0 * states[k][i] + states[k - 1][i]) / (h * h))
            .collect();
        best = best.max(norm2(&acc));
    }
    Some(best)
}
