//! Closed-form fields with known Lipschitz constants and exact flows, used as
//! oracles for the solvers and the error-bound harness.

use super::VectorField;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::{expm, norm2, spectral_norm, Mat};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticKind {
    /// `v = c`
    Constant,
    /// `v = A x`
    Linear,
    /// `v = -x`
    Decay,
    /// `v = base + δ·(cos(ωt + φ), sin(ωt + φ), 0, …)`; the offset has
    /// Euclidean norm at most δ everywhere.
    Perturbed {
        base: Box<AnalyticField>,
        delta: f64,
        omega: f64,
        phase: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticField {
    kind: AnalyticKind,
    dim: usize,
    /// `c` for constant fields, `A` for linear ones; empty otherwise.
    params: ParamStore,
}

impl AnalyticField {
    pub fn constant(c: &[f64]) -> Self {
        let mut params = ParamStore::new();
        params.push("c", Mat::row_vector(c), true);
        AnalyticField {
            kind: AnalyticKind::Constant,
            dim: c.len(),
            params,
        }
    }

    pub fn linear(a: Mat) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dim("linear field matrix", "square", format!("{:?}", a.shape())));
        }
        let dim = a.rows();
        let mut params = ParamStore::new();
        params.push("a", a, true);
        Ok(AnalyticField {
            kind: AnalyticKind::Linear,
            dim,
            params,
        })
    }

    pub fn decay(dim: usize) -> Self {
        AnalyticField {
            kind: AnalyticKind::Decay,
            dim,
            params: ParamStore::new(),
        }
    }

    /// `+x`.
    pub fn growth(dim: usize) -> Self {
        Self::linear(Mat::identity(dim)).expect("identity is square")
    }

    pub fn perturbed(base: AnalyticField, delta: f64, omega: f64, phase: f64) -> Result<Self> {
        if !(delta >= 0.0) {
            return Err(Error::Config(format!("perturbation size must be >= 0, got {delta}")));
        }
        let dim = base.dim;
        Ok(AnalyticField {
            kind: AnalyticKind::Perturbed {
                base: Box::new(base),
                delta,
                omega,
                phase,
            },
            dim,
            params: ParamStore::new(),
        })
    }

    pub fn kind_ref(&self) -> &AnalyticKind {
        &self.kind
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Closed-form Lipschitz constant in `x`.
    pub fn lipschitz(&self) -> f64 {
        match &self.kind {
            AnalyticKind::Constant => 0.0,
            AnalyticKind::Linear => spectral_norm(self.params.get(0)),
            AnalyticKind::Decay => 1.0,
            AnalyticKind::Perturbed { base, .. } => base.lipschitz(),
        }
    }

    /// Offset added to the base field at time `t`.
    pub fn perturbation(&self, t: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.dim];
        if let AnalyticKind::Perturbed {
            delta, omega, phase, ..
        } = &self.kind
        {
            let a = omega * t + phase;
            p[0] = delta * a.cos();
            if self.dim > 1 {
                p[1] = delta * a.sin();
            }
        }
        p
    }

    /// Exact flow `φ_t(x0)` of the field. Perturbed fields have none.
    pub fn exact_flow(&self, x0: &[f64], t: f64) -> Option<Vec<f64>> {
        match &self.kind {
            AnalyticKind::Constant => {
                Some(x0.iter().zip(self.params.get(0).data()).map(|(x, c)| x + c * t).collect())
            }
            AnalyticKind::Linear => Some(expm(&self.params.get(0).scale(t)).mat_vec(x0)),
            AnalyticKind::Decay => Some(x0.iter().map(|x| x * (-t).exp()).collect()),
            AnalyticKind::Perturbed { .. } => None,
        }
    }

    /// Upper bound on `|ẍ(t)|` for `t ∈ [0, horizon]` along the exact flow
    /// from `x0`.
    pub fn second_derivative_bound(&self, x0: &[f64], horizon: f64) -> Option<f64> {
        match &self.kind {
            AnalyticKind::Constant => Some(0.0),
            AnalyticKind::Linear => {
                let a = self.params.get(0);
                let a2 = spectral_norm(&a.matmul(a));
                Some(a2 * (spectral_norm(a) * horizon).exp() * norm2(x0))
            }
            AnalyticKind::Decay => Some(norm2(x0)),
            AnalyticKind::Perturbed { .. } => None,
        }
    }
}

impl VectorField for AnalyticField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> &'static str {
        "analytic"
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, params: &[NodeId], t: &[f64], x: NodeId) -> NodeId {
        match &self.kind {
            AnalyticKind::Constant => {
                let zero = g.scale(x, 0.0);
                g.add_row(zero, params[0])
            }
            AnalyticKind::Linear => g.matmul_nt(x, params[0]),
            AnalyticKind::Decay => g.scale(x, -1.0),
            AnalyticKind::Perturbed { base, .. } => {
                let bp = base.params.bind_frozen(g);
                let v = base.forward(g, &bp, t, x);
                let mut offset = Mat::zeros(t.len(), self.dim);
                for (i, &ti) in t.iter().enumerate() {
                    offset.row_mut(i).copy_from_slice(&self.perturbation(ti));
                }
                let off = g.constant(offset);
                g.add(v, off)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{lipschitz_estimate, BoxDomain};
    use crate::rng::Rng;

    #[test]
    fn constant_field_everywhere() {
        let f = AnalyticField::constant(&[1.0, 0.0]);
        assert_eq!(f.eval(0.3, &[5.0, -7.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(f.eval(0.9, &[0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn lipschitz_of_diag_linear() {
        let f = AnalyticField::linear(Mat::diag(&[2.0, 3.0])).unwrap();
        let est = lipschitz_estimate(&f, &BoxDomain::cube(2, 1.0), 10_000, &mut Rng::new(1)).unwrap();
        assert!(est <= 3.0 + 1e-12 && est >= 2.9, "{est}");
        assert!((f.lipschitz() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_of_constant_and_decay() {
        let dom = BoxDomain::cube(2, 1.0);
        let c = AnalyticField::constant(&[1.0, 2.0]);
        assert_eq!(lipschitz_estimate(&c, &dom, 100, &mut Rng::new(2)).unwrap(), 0.0);
        let d = AnalyticField::decay(2);
        let est = lipschitz_estimate(&d, &dom, 100, &mut Rng::new(2)).unwrap();
        assert!((est - 1.0).abs() < 1e-12, "{est}");
    }

    #[test]
    fn lipschitz_estimate_rejects_bad_input() {
        let d = AnalyticField::decay(2);
        let flat = BoxDomain {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 0.0],
        };
        assert!(lipschitz_estimate(&d, &flat, 10, &mut Rng::new(0)).is_err());
        assert!(lipschitz_estimate(&d, &BoxDomain::cube(2, 1.0), 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn perturbation_within_delta() {
        let base = AnalyticField::linear(Mat::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]])).unwrap();
        let p = AnalyticField::perturbed(base.clone(), 0.1, 3.0, 0.4).unwrap();
        let mut rng = Rng::new(4);
        let dom = BoxDomain::cube(2, 3.0);
        let n = 100_000;
        let mut xs = Mat::zeros(n, 2);
        let mut ts = Vec::with_capacity(n);
        for i in 0..n {
            xs.row_mut(i).copy_from_slice(&dom.sample(&mut rng));
            ts.push(rng.uniform());
        }
        let a = p.eval_batch(&ts, &xs).unwrap();
        let b = base.eval_batch(&ts, &xs).unwrap();
        let worst = (0..n)
            .map(|i| norm2(&a.row(i).iter().zip(b.row(i)).map(|(x, y)| x - y).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        assert!(worst <= 0.1 + 1e-15, "{worst}");
    }

    #[test]
    fn exact_flows() {
        let d = AnalyticField::decay(2);
        let x = d.exact_flow(&[1.0, 2.0], 1.0).unwrap();
        assert!((x[0] - (-1f64).exp()).abs() < 1e-15);
        let l = AnalyticField::linear(Mat::diag(&[0.5, -2.0])).unwrap();
        let y = l.exact_flow(&[1.0, 1.0], 2.0).unwrap();
        assert!((y[0] - 1f64.exp()).abs() < 1e-12);
        assert!((y[1] - (-4f64).exp()).abs() < 1e-12);
    }
}
