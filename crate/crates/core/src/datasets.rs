//! Synthetic 2-D densities used as noise source and data target.
//!
//! Fixed geometry (all in the final coordinates):
//! - `gaussian`: `N(shift, noise_scale² I)`.
//! - `two_moons`: the classic interleaved half circles, centered at the
//!   origin and scaled by 2, so the support is about `[-3, 3] × [-1.5, 1.5]`.
//! - `eight_gaussians`: eight centers on the radius-2 circle at angles
//!   `kπ/4`, isotropic noise of std `noise_scale`.
//! - `checkerboard`: uniform on the dark cells of a 4×4 board over `[-2, 2]²`.
//! - `spiral`: a single arm `r = 3.5·s`, `θ = 3π·s` with `s ∈ (0, 1]`.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::Rng;

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
const MOONS_CENTER: [f64; 2] = [0.5, 0.25];
const MOONS_SCALE: f64 = 2.0;
const SPIRAL_RADIUS: f64 = 3.5;
const SPIRAL_TURNS: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Gaussian,
    TwoMoons,
    EightGaussians,
    Checkerboard,
    Spiral,
}

impl DatasetName {
    pub const ALL: [DatasetName; 5] = [
        DatasetName::Gaussian,
        DatasetName::TwoMoons,
        DatasetName::EightGaussians,
        DatasetName::Checkerboard,
        DatasetName::Spiral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Gaussian => "gaussian",
            DatasetName::TwoMoons => "two_moons",
            DatasetName::EightGaussians => "eight_gaussians",
            DatasetName::Checkerboard => "checkerboard",
            DatasetName::Spiral => "spiral",
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            DatasetName::Gaussian => 1.0,
            DatasetName::TwoMoons => 0.05,
            DatasetName::EightGaussians => 0.1,
            DatasetName::Checkerboard => 0.0,
            DatasetName::Spiral => 0.05,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetName::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset {s:?} (expected one of gaussian, two_moons, eight_gaussians, checkerboard, spiral)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub noise_scale: f64,
    pub sample_count: usize,
    /// Translation applied after sampling.
    #[serde(default)]
    pub shift: [f64; 2],
}

impl DatasetSpec {
    pub fn new(name: DatasetName, sample_count: usize) -> Self {
        DatasetSpec {
            name,
            noise_scale: name.default_noise(),
            sample_count,
            shift: [0.0, 0.0],
        }
    }

    /// The standard Gaussian source.
    pub fn standard_gaussian(sample_count: usize) -> Self {
        Self::new(DatasetName::Gaussian, sample_count)
    }

    pub fn with_noise(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    pub fn with_shift(mut self, shift: [f64; 2]) -> Self {
        self.shift = shift;
        self
    }

    pub fn with_count(mut self, sample_count: usize) -> Self {
        self.sample_count = sample_count;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::Config(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        if self.sample_count < 1 {
            return Err(Error::Config("sample_count must be >= 1".into()));
        }
        Ok(())
    }

    pub const fn dim(&self) -> usize {
        2
    }
}

/// Draw `spec.sample_count` i.i.d. points as rows of a matrix.
pub fn sample(spec: &DatasetSpec, rng: &mut Rng) -> Result<Mat> {
    Ok(sample_labeled(spec, rng)?.0)
}

/// As [`sample`], also returning the mixture component (moon, center,
/// board cell) each point was drawn from. Components without structure
/// report 0.
pub fn sample_labeled(spec: &DatasetSpec, rng: &mut Rng) -> Result<(Mat, Vec<usize>)> {
    spec.validate()?;
    let n = spec.sample_count;
    let s = spec.noise_scale;
    let mut out = Mat::zeros(n, 2);
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let (p, label) = match spec.name {
            DatasetName::Gaussian => ([s * rng.normal(), s * rng.normal()], 0),
            DatasetName::TwoMoons => {
                let upper = rng.coin();
                let theta = PI * rng.uniform();
                let (x, y) = if upper {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let p = [
                    MOONS_SCALE * (x - MOONS_CENTER[0]) + s * rng.normal(),
                    MOONS_SCALE * (y - MOONS_CENTER[1]) + s * rng.normal(),
                ];
                (p, usize::from(!upper))
            }
            DatasetName::EightGaussians => {
                let k = rng.below(8);
                let angle = k as f64 * PI / 4.0;
                let c = [EIGHT_GAUSSIANS_RADIUS * angle.cos(), EIGHT_GAUSSIANS_RADIUS * angle.sin()];
                if s == 0.0 {
                    (c, k)
                } else {
                    ([c[0] + s * rng.normal(), c[1] + s * rng.normal()], k)
                }
            }
            DatasetName::Checkerboard => {
                // pick one of the 8 dark cells of the 4x4 board, then a point in it
                let cell = rng.below(8);
                let row = cell / 2;
                let col = 2 * (cell % 2) + (row % 2);
                let x = -2.0 + col as f64 + rng.uniform();
                let y = -2.0 + row as f64 + rng.uniform();
                ([x + s * rng.normal(), y + s * rng.normal()], cell)
            }
            DatasetName::Spiral => {
                let u = rng.uniform().max(1e-12).sqrt();
                let r = SPIRAL_RADIUS * u;
                let theta = 2.0 * PI * SPIRAL_TURNS * u;
                ([r * theta.cos() + s * rng.normal(), r * theta.sin() + s * rng.normal()], 0)
            }
        };
        out[(i, 0)] = p[0] + spec.shift[0];
        out[(i, 1)] = p[1] + spec.shift[1];
        labels[i] = label;
    }
    Ok((out, labels))
}

/// Centers of the `eight_gaussians` mixture.
pub fn eight_gaussian_centers() -> [[f64; 2]; 8] {
    std::array::from_fn(|k| {
        let a = k as f64 * PI / 4.0;
        [EIGHT_GAUSSIANS_RADIUS * a.cos(), EIGHT_GAUSSIANS_RADIUS * a.sin()]
    })
}

/// Write a batch as CSV with header `x,y` (or `x1..xd` above two columns).
pub fn write_csv<W: Write>(mut w: W, batch: &Mat) -> std::io::Result<()> {
    if batch.cols() == 2 {
        writeln!(w, "x,y")?;
    } else {
        let header: Vec<String> = (1..=batch.cols()).map(|j| format!("x{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
    }
    for i in 0..batch.rows() {
        let row: Vec<String> = batch.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
