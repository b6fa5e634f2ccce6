//! Forward integration of `ẋ = v_t(x)`.
//!
//! Fixed-step Euler and RK4 run either in inference mode or unrolled on a
//! tape (discretize-then-optimize: the gradient is exactly the gradient of the
//! discrete solve). Dormand–Prince 5(4) is inference-only.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::fields::VectorField;
use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            other => Err(Error::Config(format!("unknown solver method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    /// Fixed-step methods only.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub record_trajectory: bool,
}

/// Euler with 100 steps.
impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::euler(100)
    }
}

impl SolverConfig {
    pub fn euler(steps: usize) -> Self {
        SolverConfig {
            method: Method::Euler,
            steps,
            ..Self::dopri5(1e-5, 1e-5)
        }
    }

    pub fn rk4(steps: usize) -> Self {
        SolverConfig {
            method: Method::Rk4,
            steps,
            ..Self::dopri5(1e-5, 1e-5)
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method: Method::Dopri5,
            steps: 1,
            rtol,
            atol,
            h_init: 1e-2,
            h_min: 1e-10,
            h_max: 1.0,
            record_trajectory: false,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn is_fixed_step(&self) -> bool {
        self.method != Method::Dopri5
    }

    /// Field evaluations per fixed step.
    pub fn evals_per_step(&self) -> usize {
        match self.method {
            Method::Euler => 1,
            Method::Rk4 => 4,
            Method::Dopri5 => 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_fixed_step() {
            if self.steps < 1 {
                return Err(Error::Config("step_count must be >= 1".into()));
            }
        } else {
            if !(self.rtol > 0.0 && self.atol > 0.0) {
                return Err(Error::Config("rtol and atol must be > 0".into()));
            }
            if !(self.h_min > 0.0 && self.h_min <= self.h_init && self.h_init <= self.h_max) {
                return Err(Error::Config(format!(
                    "need 0 < h_min <= h_init <= h_max, got {} / {} / {}",
                    self.h_min, self.h_init, self.h_max
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// CSV with header `t,x1,..,xd`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.states.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|j| format!("x{j}")));
        writeln!(w, "{}", header.join(","))?;
        for (t, x) in self.times.iter().zip(&self.states) {
            let mut row = vec![format!("{t:?}")];
            row.extend(x.iter().map(|v| format!("{v:?}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn check_interval(t_a: f64, t_b: f64) -> Result<()> {
    if !(t_b > t_a) || !t_a.is_finite() || !t_b.is_finite() {
        return Err(Error::Config(format!("need finite t_b > t_a, got [{t_a}, {t_b}]")));
    }
    Ok(())
}

/// `x + s·v`
fn axpy(x: &Mat, s: f64, v: &Mat) -> Mat {
    x.add(&v.scale(s))
}

/// Uniform grid `t_a + i·τ`, `i = 0..=n`.
pub fn uniform_grid(t_a: f64, t_b: f64, n: usize) -> (f64, Vec<f64>) {
    let tau = (t_b - t_a) / n as f64;
    (tau, (0..=n).map(|i| t_a + i as f64 * tau).collect())
}

fn fixed_step_batch(
    field: &dyn VectorField,
    x0: &Mat,
    t_a: f64,
    t_b: f64,
    cfg: &SolverConfig,
    mut record: impl FnMut(f64, &Mat),
) -> Result<Mat> {
    let (tau, grid) = uniform_grid(t_a, t_b, cfg.steps);
    let rows = x0.rows();
    let mut x = x0.clone();
    record(grid[0], &x);
    for &t in &grid[..cfg.steps] {
        let tv = |s: f64| vec![s; rows];
        x = match cfg.method {
            Method::Euler => {
                let v = field.eval_batch(&tv(t), &x)?;
                axpy(&x, tau, &v)
            }
            Method::Rk4 => {
                let k1 = field.eval_batch(&tv(t), &x)?;
                let k2 = field.eval_batch(&tv(t + 0.5 * tau), &axpy(&x, 0.5 * tau, &k1))?;
                let k3 = field.eval_batch(&tv(t + 0.5 * tau), &axpy(&x, 0.5 * tau, &k2))?;
                let k4 = field.eval_batch(&tv(t + tau), &axpy(&x, tau, &k3))?;
                let mut incr = k1.add(&k4);
                incr.add_assign(&k2.add(&k3).scale(2.0));
                axpy(&x, tau / 6.0, &incr)
            }
            Method::Dopri5 => unreachable!("fixed-step path"),
        };
        record(t + tau, &x);
    }
    Ok(x)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const SAFETY: f64 = 0.9;
const FACTOR_MIN: f64 = 0.2;
const FACTOR_MAX: f64 = 5.0;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;
const MAX_ATTEMPTS: usize = 1_000_000;

fn dopri5(field: &dyn VectorField, x0: &[f64], t_a: f64, t_b: f64, cfg: &SolverConfig) -> Result<Trajectory> {
    let d = x0.len();
    let f = |t: f64, x: &[f64]| field.eval(t, x);
    let mut t = t_a;
    let mut x = x0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; d]; 7];
    k[0] = f(t, &x)?;
    let mut traj = Trajectory {
        times: vec![t],
        states: vec![x.clone()],
        nfe: 1,
        accepted_steps: 0,
        rejected_steps: 0,
    };
    let mut h = cfg.h_init.min(cfg.h_max);
    let mut err_old: f64 = 1e-4;

    while t < t_b {
        if traj.accepted_steps + traj.rejected_steps >= MAX_ATTEMPTS {
            return Err(Error::Stiffness { t, h });
        }
        let last = h >= t_b - t;
        let step = if last { t_b - t } else { h };

        let mut stage = vec![0.0; d];
        for s in 1..7 {
            for i in 0..d {
                let acc: f64 = (0..s).map(|j| A[s][j] * k[j][i]).sum();
                stage[i] = x[i] + step * acc;
            }
            k[s] = f(t + C[s] * step, &stage)?;
        }
        traj.nfe += 6;
        // stage 7 is evaluated at the fifth-order solution
        let x_new = stage;
        let mut err_sq = 0.0;
        for i in 0..d {
            let e: f64 = step * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
            let sc = cfg.atol + cfg.rtol * x[i].abs().max(x_new[i].abs());
            err_sq += (e / sc).powi(2);
        }
        let err = (err_sq / d.max(1) as f64).sqrt();

        if err <= 1.0 {
            let factor = if err == 0.0 {
                FACTOR_MAX
            } else {
                (SAFETY * err.powf(-PI_ALPHA) * err_old.powf(PI_BETA)).clamp(FACTOR_MIN, FACTOR_MAX)
            };
            err_old = err.max(1e-4);
            t = if last { t_b } else { t + step };
            x = x_new;
            k[0] = k[6].clone();
            traj.accepted_steps += 1;
            if cfg.record_trajectory || t >= t_b {
                traj.times.push(t);
                traj.states.push(x.clone());
            }
            h = (step * factor).min(cfg.h_max);
            if last {
                break;
            }
        } else {
            traj.rejected_steps += 1;
            let factor = (SAFETY * err.powf(-0.2)).clamp(FACTOR_MIN, 1.0);
            h = step * factor;
            if h < cfg.h_min {
                return Err(Error::Stiffness { t, h });
            }
        }
    }
    Ok(traj)
}

/// Integrate one initial state over `[t_a, t_b]`.
pub fn integrate(
    field: &dyn VectorField,
    x0: &[f64],
    t_a: f64,
    t_b: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_interval(t_a, t_b)?;
    if x0.len() != field.dim() {
        return Err(Error::dim("integrate initial state", field.dim(), x0.len()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("initial state {x0:?}")));
    }
    if cfg.method == Method::Dopri5 {
        return dopri5(field, x0, t_a, t_b, cfg);
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let record_all = cfg.record_trajectory;
    let steps = cfg.steps;
    let mut seen = 0usize;
    let last = fixed_step_batch(field, &Mat::row_vector(x0), t_a, t_b, cfg, |t, x| {
        if record_all || seen == 0 || seen == steps {
            times.push(t);
            states.push(x.row(0).to_vec());
        }
        seen += 1;
    })?;
    debug_assert_eq!(states.last().map(Vec::as_slice), Some(last.row(0)));
    Ok(Trajectory {
        times,
        states,
        nfe: cfg.steps * cfg.evals_per_step(),
        accepted_steps: cfg.steps,
        rejected_steps: 0,
    })
}

/// Final states of a batch of solves plus the NFE each sample consumed.
#[derive(Clone, Debug)]
pub struct BatchSolve {
    pub final_states: Mat,
    pub nfe_per_sample: Vec<usize>,
}

impl BatchSolve {
    pub fn mean_nfe(&self) -> f64 {
        if self.nfe_per_sample.is_empty() {
            return 0.0;
        }
        self.nfe_per_sample.iter().sum::<usize>() as f64 / self.nfe_per_sample.len() as f64
    }
}

/// Integrate every row of `x0`. Fixed-step methods advance the whole batch
/// together; adaptive solves run per sample.
pub fn integrate_batch(
    field: &dyn VectorField,
    x0: &Mat,
    t_a: f64,
    t_b: f64,
    cfg: &SolverConfig,
) -> Result<BatchSolve> {
    cfg.validate()?;
    check_interval(t_a, t_b)?;
    if x0.cols() != field.dim() {
        return Err(Error::dim("integrate_batch initial states", field.dim(), x0.cols()));
    }
    if cfg.is_fixed_step() {
        let final_states = fixed_step_batch(field, x0, t_a, t_b, cfg, |_, _| {})?;
        let nfe = cfg.steps * cfg.evals_per_step();
        return Ok(BatchSolve {
            final_states,
            nfe_per_sample: vec![nfe; x0.rows()],
        });
    }
    let mut final_states = Mat::zeros(x0.rows(), x0.cols());
    let mut nfe_per_sample = Vec::with_capacity(x0.rows());
    for i in 0..x0.rows() {
        let traj = dopri5(field, x0.row(i), t_a, t_b, cfg)?;
        final_states.row_mut(i).copy_from_slice(traj.final_state());
        nfe_per_sample.push(traj.nfe);
    }
    Ok(BatchSolve {
        final_states,
        nfe_per_sample,
    })
}

/// An unrolled fixed-step solve recorded on a tape. The tape itself is the
/// backward context: call [`Graph::backward`] on any scalar built from
/// `final_state`.
#[derive(Clone, Debug)]
pub struct TapedSolve {
    pub final_state: NodeId,
    pub times: Vec<f64>,
    pub nfe: usize,
}

pub fn integrate_with_tape<'a>(
    g: &mut Graph<'a>,
    field: &'a dyn VectorField,
    params: &[NodeId],
    x0: NodeId,
    t_a: f64,
    t_b: f64,
    cfg: &SolverConfig,
) -> Result<TapedSolve> {
    cfg.validate()?;
    check_interval(t_a, t_b)?;
    if !cfg.is_fixed_step() {
        return Err(Error::Unsupported(
            "adaptive solvers cannot be unrolled for training; use euler or rk4".into(),
        ));
    }
    if g.value(x0).cols() != field.dim() {
        return Err(Error::dim("taped solve initial states", field.dim(), g.value(x0).cols()));
    }
    let rows = g.value(x0).rows();
    let (tau, grid) = uniform_grid(t_a, t_b, cfg.steps);
    let mut x = x0;
    for &t in &grid[..cfg.steps] {
        let tv = |s: f64| vec![s; rows];
        x = match cfg.method {
            Method::Euler => {
                let v = field.forward(g, params, &tv(t), x);
                let dv = g.scale(v, tau);
                g.add(x, dv)
            }
            Method::Rk4 => {
                let k1 = field.forward(g, params, &tv(t), x);
                let s1 = g.scale(k1, 0.5 * tau);
                let x1 = g.add(x, s1);
                let k2 = field.forward(g, params, &tv(t + 0.5 * tau), x1);
                let s2 = g.scale(k2, 0.5 * tau);
                let x2 = g.add(x, s2);
                let k3 = field.forward(g, params, &tv(t + 0.5 * tau), x2);
                let s3 = g.scale(k3, tau);
                let x3 = g.add(x, s3);
                let k4 = field.forward(g, params, &tv(t + tau), x3);
                let k14 = g.add(k1, k4);
                let k23 = g.add(k2, k3);
                let k23 = g.scale(k23, 2.0);
                let incr = g.add(k14, k23);
                let incr = g.scale(incr, tau / 6.0);
                g.add(x, incr)
            }
            Method::Dopri5 => unreachable!(),
        };
    }
    if !g.value(x).is_finite() {
        return Err(Error::NonFinite(format!("{} field state during taped solve", field.kind())));
    }
    Ok(TapedSolve {
        final_state: x,
        times: grid,
        nfe: cfg.steps * cfg.evals_per_step(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::AnalyticField;

    #[test]
    fn euler_one_step_constant() {
        let f = AnalyticField::constant(&[1.0, 0.0]);
        let tr = integrate(&f, &[0.0, 0.0], 0.0, 1.0, &SolverConfig::euler(1)).unwrap();
        assert_eq!(tr.final_state(), &[1.0, 0.0]);
        assert_eq!(tr.nfe, 1);
    }

    #[test]
    fn euler_growth_recursion() {
        let f = AnalyticField::growth(1);
        let tr = integrate(&f, &[1.0], 0.0, 1.0, &SolverConfig::euler(10)).unwrap();
        assert!((tr.final_state()[0] - 2.5937424601).abs() < 1e-9);
    }

    #[test]
    fn dopri5_decay() {
        let f = AnalyticField::decay(2);
        let tr = integrate(&f, &[1.0, 0.0], 0.0, 1.0, &SolverConfig::dopri5(1e-8, 1e-8)).unwrap();
        assert!((tr.final_state()[0] - (-1f64).exp()).abs() < 1e-7);
        assert_eq!(tr.final_state()[1], 0.0);
        assert_eq!(tr.nfe, 6 * (tr.accepted_steps + tr.rejected_steps) + 1);
    }

    #[test]
    fn fixed_grid_is_uniform() {
        let f = AnalyticField::decay(1);
        let tr = integrate(&f, &[1.0], 0.0, 1.0, &SolverConfig::rk4(40).recording()).unwrap();
        assert_eq!(tr.times.len(), 41);
        let tau = 1.0 / 40.0;
        for w in tr.times.windows(2) {
            assert!((w[1] - w[0] - tau).abs() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn tape_rejects_adaptive() {
        let f = AnalyticField::decay(1);
        let mut g = Graph::new();
        let x = g.constant(Mat::row_vector(&[1.0]));
        let err = integrate_with_tape(&mut g, &f, &[], x, 0.0, 1.0, &SolverConfig::dopri5(1e-6, 1e-6));
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn invalid_configs() {
        let f = AnalyticField::decay(1);
        assert!(integrate(&f, &[1.0], 0.0, 1.0, &SolverConfig::euler(0)).is_err());
        assert!(integrate(&f, &[1.0], 1.0, 1.0, &SolverConfig::euler(1)).is_err());
        let mut c = SolverConfig::dopri5(1e-6, 1e-6);
        c.h_min = 1.0;
        c.h_init = 0.1;
        assert!(integrate(&f, &[1.0], 0.0, 1.0, &c).is_err());
        assert!(integrate(&f, &[f64::NAN], 0.0, 1.0, &SolverConfig::euler(1)).is_err());
    }

    #[test]
    fn stiff_field_underflows() {
        // v = -1e9 x forces tiny steps; a large h_min turns that into an error
        let f = AnalyticField::linear(Mat::diag(&[-1e9])).unwrap();
        let mut c = SolverConfig::dopri5(1e-10, 1e-12);
        c.h_min = 1e-6;
        c.h_init = 1e-3;
        match integrate(&f, &[1.0], 0.0, 1.0, &c) {
            Err(Error::Stiffness { t, h }) => {
                assert!(t >= 0.0 && h < 1e-6);
            }
            other => panic!("expected stiffness error, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_csv() {
        let f = AnalyticField::constant(&[1.0]);
        let tr = integrate(&f, &[0.0], 0.0, 1.0, &SolverConfig::euler(2).recording()).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,x1\n0.0,0.0\n0.5,0.5\n1.0,1.0\n");
    }
}
