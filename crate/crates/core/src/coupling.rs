//! Pairing of noise and data batches.

use serde::{Deserialize, Serialize};

use crate::assignment::solve_assignment;
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Largest batch paired by exact assignment unless overridden.
pub const DEFAULT_MAX_EXACT: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMethod {
    Independent,
    MinibatchOt,
}

impl std::str::FromStr for CouplingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(CouplingMethod::Independent),
            "minibatch_ot" => Ok(CouplingMethod::MinibatchOt),
            other => Err(Error::Config(format!("unknown coupling method {other:?}"))),
        }
    }
}

/// Row `i` of `x0` is paired with row `i` of `x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBatch {
    pub x0: Mat,
    pub x1: Mat,
    pub method: CouplingMethod,
    /// `Σ_i ‖x0_i − x1_i‖²` of the pairing.
    pub cost: f64,
}

impl CouplingBatch {
    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.rows() == 0
    }

    /// Rows `idx` of both sides, keeping the pairing.
    pub fn select(&self, idx: &[usize]) -> CouplingBatch {
        let pick = |m: &Mat| {
            let mut out = Mat::zeros(idx.len(), m.cols());
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).copy_from_slice(m.row(i));
            }
            out
        };
        let x0 = pick(&self.x0);
        let x1 = pick(&self.x1);
        let cost = pair_cost(&x0, &x1);
        CouplingBatch {
            x0,
            x1,
            method: self.method,
            cost,
        }
    }
}

/// Squared Euclidean distances `C_ij = ‖a_i − b_j‖²`.
pub fn sq_dist_matrix(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            c[(i, j)] = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    c
}

fn pair_cost(x0: &Mat, x1: &Mat) -> f64 {
    (0..x0.rows())
        .map(|i| x0.row(i).iter().zip(x1.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

pub fn couple(x0: &Mat, x1: &Mat, method: CouplingMethod) -> Result<CouplingBatch> {
    couple_with_limit(x0, x1, method, DEFAULT_MAX_EXACT)
}

/// Pair two equally sized batches. Minibatch OT permutes `x1` by the exact
/// minimum-cost assignment under squared Euclidean cost.
pub fn couple_with_limit(x0: &Mat, x1: &Mat, method: CouplingMethod, max_exact: usize) -> Result<CouplingBatch> {
    if x0.rows() != x1.rows() {
        return Err(Error::dim("coupling batch sizes", x0.rows(), x1.rows()));
    }
    if x0.cols() != x1.cols() {
        return Err(Error::dim("coupling state dims", x0.cols(), x1.cols()));
    }
    if x0.rows() == 0 {
        return Err(Error::Config("cannot couple empty batches".into()));
    }
    match method {
        CouplingMethod::Independent => Ok(CouplingBatch {
            x0: x0.clone(),
            x1: x1.clone(),
            method,
            cost: pair_cost(x0, x1),
        }),
        CouplingMethod::MinibatchOt => {
            if x0.rows() > max_exact {
                return Err(Error::Config(format!(
                    "batch of {} exceeds the exact assignment limit {max_exact}",
                    x0.rows()
                )));
            }
            let perm = solve_assignment(&sq_dist_matrix(x0, x1))?;
            let mut paired = Mat::zeros(x1.rows(), x1.cols());
            for (i, &j) in perm.iter().enumerate() {
                paired.row_mut(i).copy_from_slice(x1.row(j));
            }
            let cost = pair_cost(x0, &paired);
            Ok(CouplingBatch {
                x0: x0.clone(),
                x1: paired,
                method,
                cost,
            })
        }
    }
}
