//! ISS and contraction certificates for ControlSynth fields.
//!
//! A certificate supplies the multipliers; this module assembles the block
//! matrices `Q` (ISS) and `Q̃` (contraction), checks every inequality
//! numerically, evaluates the Lyapunov function `Ṽ`, and probes contraction
//! empirically by integrating nearby trajectories.
//!
//! Conventions where the block formulas leave shapes open:
//! * cross terms `Υ_{s,r}` and `Υ̃_{j,r}` are `k_s × k_r` blocks with a
//!   diagonal of length `min(k_s, k_r)`;
//! * the positivity condition on `P` reads `P + Σ_j W_jᵀ Λ^j W_j > 0`;
//! * summed conditions over blocks need equal block widths;
//! * `Σ_{s ≤ ω}` runs over the blocks with unbounded activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Activation, BoxDomain, ControlSynthField, VectorField};
use crate::linalg::{dot, norm2, sym_eig_max, sym_eig_min, Mat};
use crate::rng::Rng;
use crate::solvers::{integrate, SolverConfig};

pub const DEFAULT_TOL: f64 = 1e-9;

/// Diagonal of a cross term between blocks `s` and `r` (0-based block
/// indices). Absent terms are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossTerm {
    pub s: usize,
    pub r: usize,
    pub diag: Vec<f64>,
}

/// Multipliers of the ISS conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IssMultipliers {
    pub p: Mat,
    /// `Λ^j` diagonals, one per block.
    pub lambda: Vec<Vec<f64>>,
    /// `Ξ^0` (length `n`) followed by `Ξ^j` (length `k_j`).
    pub xi: Vec<Vec<f64>>,
    /// `Υ_{0,j}` diagonals, one per block.
    pub upsilon0: Vec<Vec<f64>>,
    /// `Υ_{s,r}` for `s < r`.
    #[serde(default)]
    pub upsilon: Vec<CrossTerm>,
    pub phi: Mat,
}

/// Multipliers of the contraction conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionMultipliers {
    pub p_tilde: Mat,
    pub lambda_tilde: Vec<Vec<f64>>,
    pub xi_tilde0: Vec<f64>,
    /// `Υ̃_{j,r}` for any `j, r`.
    #[serde(default)]
    pub upsilon_tilde: Vec<CrossTerm>,
    /// `Γ_j` diagonals.
    pub gamma_blocks: Vec<Vec<f64>>,
    /// `Ω_j` diagonals.
    pub omega_blocks: Vec<Vec<f64>>,
    pub gamma: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iss: Option<IssMultipliers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction: Option<ContractionMultipliers>,
}

impl StabilityCertificate {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One checked inequality: it passes when `margin >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub value: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificateVerdict {
    pub iss_ok: bool,
    pub contraction_ok: bool,
    pub lambda_max_q: Option<f64>,
    pub lambda_max_qtilde: Option<f64>,
    pub conditions: Vec<Condition>,
    pub violated: Vec<String>,
}

impl CertificateVerdict {
    fn record(&mut self, name: impl Into<String>, value: f64, margin: f64) -> bool {
        let name = name.into();
        let ok = margin >= 0.0;
        if !ok {
            self.violated.push(name.clone());
        }
        self.conditions.push(Condition { name, value, margin });
        ok
    }

    /// Merge a contraction verdict into an ISS verdict.
    pub fn merge(mut self, other: CertificateVerdict) -> CertificateVerdict {
        self.contraction_ok = other.contraction_ok;
        self.lambda_max_qtilde = other.lambda_max_qtilde;
        self.conditions.extend(other.conditions);
        self.violated.extend(other.violated);
        self
    }
}

/// `rows × cols` matrix with `diag` on its main diagonal.
fn rect_diag(rows: usize, cols: usize, diag: &[f64]) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for (i, &v) in diag.iter().enumerate() {
        m[(i, i)] = v;
    }
    m
}

fn check_len(what: impl Into<String>, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::dim(what, len, v.len()));
    }
    Ok(())
}

fn check_nonneg(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Certificate(format!("{what} must be a nonnegative diagonal")));
    }
    Ok(())
}

fn check_square(what: &str, m: &Mat, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::dim(format!("block {what}"), format!("{n}x{n}"), format!("{}x{}", m.rows(), m.cols())));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("certificate matrix {what}")));
    }
    if m.asymmetry() > 1e-10 {
        return Err(Error::NotSymmetric {
            asymmetry: m.asymmetry(),
        });
    }
    Ok(())
}

fn block_offsets(field: &ControlSynthField) -> (Vec<usize>, usize) {
    let mut off = Vec::with_capacity(field.num_blocks());
    let mut total = 0;
    for j in 0..field.num_blocks() {
        off.push(total);
        total += field.block_width(j);
    }
    (off, total)
}

fn cross_terms(
    field: &ControlSynthField,
    terms: &[CrossTerm],
    ordered: bool,
    what: &str,
) -> Result<Vec<((usize, usize), Mat)>> {
    let m = field.num_blocks();
    let mut out = Vec::with_capacity(terms.len());
    for t in terms {
        if t.s >= m || t.r >= m || (ordered && t.s >= t.r) {
            return Err(Error::Certificate(format!("{what} index ({}, {}) out of range", t.s, t.r)));
        }
        let (ks, kr) = (field.block_width(t.s), field.block_width(t.r));
        check_len(format!("block {what}_{{{},{}}}", t.s + 1, t.r + 1), &t.diag, ks.min(kr))?;
        check_nonneg(what, &t.diag)?;
        out.push(((t.s, t.r), rect_diag(ks, kr, &t.diag)));
    }
    Ok(out)
}

/// Write `b` at `(r0, c0)` and its transpose at `(c0, r0)`.
fn set_sym(q: &mut Mat, r0: usize, c0: usize, b: &Mat) {
    q.set_block(r0, c0, b);
    q.set_block(c0, r0, &b.transpose());
}

/// `X + Xᵀ`, exactly symmetric.
fn sym_sum(x: &Mat) -> Mat {
    x.add(&x.transpose())
}

fn validate_iss(field: &ControlSynthField, c: &IssMultipliers) -> Result<()> {
    let n = field.dim();
    let m = field.num_blocks();
    check_square("P", &c.p, n)?;
    check_square("Phi", &c.phi, n)?;
    if c.lambda.len() != m || c.upsilon0.len() != m || c.xi.len() != m + 1 {
        return Err(Error::dim(
            "ISS multiplier counts (Lambda, Upsilon_0, Xi)",
            format!("({m}, {m}, {})", m + 1),
            format!("({}, {}, {})", c.lambda.len(), c.upsilon0.len(), c.xi.len()),
        ));
    }
    check_len("block Xi^0", &c.xi[0], n)?;
    check_nonneg("Xi^0", &c.xi[0])?;
    for j in 0..m {
        let k = field.block_width(j);
        check_len(format!("block Lambda^{}", j + 1), &c.lambda[j], k)?;
        check_len(format!("block Xi^{}", j + 1), &c.xi[j + 1], k)?;
        check_len(format!("block Upsilon_{{0,{}}}", j + 1), &c.upsilon0[j], k)?;
        check_nonneg("Lambda", &c.lambda[j])?;
        check_nonneg("Xi", &c.xi[j + 1])?;
        check_nonneg("Upsilon_0", &c.upsilon0[j])?;
    }
    if sym_eig_min(&c.p)? < -DEFAULT_TOL {
        return Err(Error::Certificate("P must be positive semidefinite".into()));
    }
    if sym_eig_min(&c.phi)? <= 0.0 {
        return Err(Error::Certificate("Phi must be positive definite".into()));
    }
    Ok(())
}

/// ISS block matrix over `(x, f_1, …, f_M, g(u))`.
pub fn assemble_q(field: &ControlSynthField, c: &IssMultipliers) -> Result<Mat> {
    validate_iss(field, c)?;
    let n = field.dim();
    let (off, k_total) = block_offsets(field);
    let size = 2 * n + k_total;
    let input = n + k_total;
    let p = c.p.symmetrize();
    let a0 = field.a0();
    let mut q = Mat::zeros(size, size);

    q.set_block(0, 0, &sym_sum(&p.matmul(a0)).add(&Mat::diag(&c.xi[0])));
    let lam: Vec<Mat> = c.lambda.iter().map(|l| Mat::diag(l)).collect();
    for j in 0..field.num_blocks() {
        let (aj, wj) = (field.a(j), field.w(j));
        let oj = n + off[j];
        let lwa = lam[j].matmul(wj).matmul(aj);
        q.set_block(oj, oj, &sym_sum(&lwa).add(&Mat::diag(&c.xi[j + 1])));
        let q1j = p
            .matmul(aj)
            .add(&a0.transpose().matmul(&wj.transpose()).matmul(&lam[j]))
            .add(&wj.transpose().matmul(&Mat::diag(&c.upsilon0[j])));
        set_sym(&mut q, 0, oj, &q1j);
        for r in j + 1..field.num_blocks() {
            let ar = field.a(r);
            let qjr = lam[r].matmul(field.w(r)).matmul(aj).transpose().add(&lam[j].matmul(wj).matmul(ar));
            set_sym(&mut q, oj, n + off[r], &qjr);
        }
        set_sym(&mut q, oj, input, &lam[j].matmul(wj));
    }
    for ((s, r), u) in cross_terms(field, &c.upsilon, true, "Upsilon")? {
        let (os, or) = (n + off[s], n + off[r]);
        let cur = q.block(os, or, u.rows(), u.cols());
        set_sym(&mut q, os, or, &cur.add(&u));
    }
    set_sym(&mut q, 0, input, &p);
    q.set_block(input, input, &c.phi.symmetrize().scale(-1.0));
    Ok(q)
}

fn equal_widths(field: &ControlSynthField, blocks: &[usize], what: &str) -> Result<Option<usize>> {
    let Some(&first) = blocks.first() else {
        return Ok(None);
    };
    let k = field.block_width(first);
    if blocks.iter().any(|&j| field.block_width(j) != k) {
        return Err(Error::Unsupported(format!("{what} sums blocks of unequal widths")));
    }
    Ok(Some(k))
}

/// Check the three ISS conditions.
pub fn verify_iss(field: &ControlSynthField, cert: &StabilityCertificate, tol: f64) -> Result<CertificateVerdict> {
    let mut v = CertificateVerdict::default();
    let Some(c) = &cert.iss else {
        v.violated.push("no ISS multipliers supplied".into());
        return Ok(v);
    };
    let q = assemble_q(field, c)?;
    let n = field.dim();
    let m = field.num_blocks();

    // (i) P + Σ_j W_jᵀ Λ^j W_j > 0
    let mut pos = c.p.symmetrize();
    for j in 0..m {
        let w = field.w(j);
        pos = pos.add(&w.transpose().matmul(&Mat::diag(&c.lambda[j])).matmul(w));
    }
    let lmin = sym_eig_min(&pos.symmetrize())?;
    let ok1 = v.record("iss: lambda_min(P + sum W^T Lambda W) > tol", lmin, lmin - tol);

    // (ii) Q <= 0
    let lmax = sym_eig_max(&q)?;
    v.lambda_max_q = Some(lmax);
    let ok2 = v.record("iss: lambda_max(Q) <= tol", lmax, tol - lmax);

    // (iii) Σ_j Υ_{0,j} + Σ_{s≤ω} Ξ^s + Σ_{s<r≤ω} Υ_{s,r} > 0
    let all: Vec<usize> = (0..m).collect();
    let unbounded: Vec<usize> = (0..m).filter(|&j| field.activation(j).is_unbounded()).collect();
    let ok3 = match equal_widths(field, &all, "ISS condition (iii)")? {
        None => v.record("iss: third sum > tol (vacuous)", f64::INFINITY, f64::INFINITY),
        Some(k) => {
            let mut sum = Mat::zeros(k, k);
            for j in 0..m {
                sum = sum.add(&Mat::diag(&c.upsilon0[j]));
            }
            for &s in &unbounded {
                sum = sum.add(&Mat::diag(&c.xi[s + 1]));
            }
            for t in &c.upsilon {
                if unbounded.contains(&t.s) && unbounded.contains(&t.r) {
                    sum = sum.add(&rect_diag(k, k, &t.diag));
                }
            }
            let l = sym_eig_min(&sum)?;
            v.record("iss: lambda_min(third sum) > tol", l, l - tol)
        }
    };
    let _ = n;
    v.iss_ok = ok1 && ok2 && ok3 && lmin > tol;
    Ok(v)
}

fn lipschitz_diag(field: &ControlSynthField, j: usize) -> Vec<f64> {
    vec![field.activation(j).lipschitz(); field.block_width(j)]
}

fn validate_contraction(field: &ControlSynthField, c: &ContractionMultipliers) -> Result<()> {
    let n = field.dim();
    let m = field.num_blocks();
    check_square("P~", &c.p_tilde, n)?;
    if c.lambda_tilde.len() != m || c.gamma_blocks.len() != m || c.omega_blocks.len() != m {
        return Err(Error::dim(
            "contraction multiplier counts (Lambda~, Gamma, Omega)",
            format!("({m}, {m}, {m})"),
            format!("({}, {}, {})", c.lambda_tilde.len(), c.gamma_blocks.len(), c.omega_blocks.len()),
        ));
    }
    check_len("block Xi~^0", &c.xi_tilde0, n)?;
    check_nonneg("Xi~^0", &c.xi_tilde0)?;
    for j in 0..m {
        let k = field.block_width(j);
        check_len(format!("block Lambda~^{}", j + 1), &c.lambda_tilde[j], k)?;
        check_len(format!("block Gamma_{}", j + 1), &c.gamma_blocks[j], k)?;
        check_len(format!("block Omega_{}", j + 1), &c.omega_blocks[j], k)?;
        check_nonneg("Lambda~", &c.lambda_tilde[j])?;
        check_nonneg("Gamma", &c.gamma_blocks[j])?;
        check_nonneg("Omega", &c.omega_blocks[j])?;
    }
    if !(c.gamma > 0.0 && c.theta > 0.0) {
        return Err(Error::Certificate(format!(
            "gamma and theta must be > 0, got {} and {}",
            c.gamma, c.theta
        )));
    }
    if sym_eig_min(&c.p_tilde)? < -DEFAULT_TOL {
        return Err(Error::Certificate("P~ must be positive semidefinite".into()));
    }
    Ok(())
}

/// Contraction block matrix over `(ξ, p_1..p_M, f_1(W_1ξ)..f_M(W_Mξ))`.
pub fn assemble_qtilde(field: &ControlSynthField, c: &ContractionMultipliers) -> Result<Mat> {
    validate_contraction(field, c)?;
    let n = field.dim();
    let (off, k_total) = block_offsets(field);
    let size = n + 2 * k_total;
    let p = c.p_tilde.symmetrize();
    let a0 = field.a0();
    let mut q = Mat::zeros(size, size);

    q.set_block(0, 0, &sym_sum(&p.matmul(a0)).add(&Mat::diag(&c.xi_tilde0)));
    let lam: Vec<Mat> = c.lambda_tilde.iter().map(|l| Mat::diag(l)).collect();
    for j in 0..field.num_blocks() {
        let (aj, wj) = (field.a(j), field.w(j));
        let pj = n + off[j];
        let fj = n + k_total + off[j];
        let q12 = p.matmul(aj).add(&wj.transpose().matmul(&Mat::diag(&c.gamma_blocks[j])));
        set_sym(&mut q, 0, pj, &q12);
        let q13 = a0
            .transpose()
            .matmul(&wj.transpose())
            .matmul(&lam[j])
            .add(&wj.transpose().matmul(&Mat::diag(&c.omega_blocks[j])));
        set_sym(&mut q, 0, fj, &q13);
        for r in 0..field.num_blocks() {
            let q23 = aj.transpose().matmul(&field.w(r).transpose()).matmul(&lam[r]);
            set_sym(&mut q, pj, n + k_total + off[r], &q23);
        }
        let k = field.block_width(j);
        q.set_block(pj, pj, &Mat::identity(k).scale(-2.0 * c.gamma));
        q.set_block(fj, fj, &Mat::identity(k).scale(-2.0 * c.theta));
    }
    for ((j, r), u) in cross_terms(field, &c.upsilon_tilde, false, "Upsilon~")? {
        let (pj, fr) = (n + off[j], n + k_total + off[r]);
        let cur = q.block(pj, fr, u.rows(), u.cols());
        set_sym(&mut q, pj, fr, &cur.add(&u));
    }
    Ok(q)
}

/// Check the contraction conditions.
pub fn verify_contraction(field: &ControlSynthField, cert: &StabilityCertificate, tol: f64) -> Result<CertificateVerdict> {
    let mut v = CertificateVerdict::default();
    let Some(c) = &cert.contraction else {
        v.violated.push("no contraction multipliers supplied".into());
        return Ok(v);
    };
    let q = assemble_qtilde(field, c)?;
    let lmax = sym_eig_max(&q)?;
    v.lambda_max_qtilde = Some(lmax);
    let mut ok = v.record("contraction: lambda_max(Q~) <= tol", lmax, tol - lmax);

    let m = field.num_blocks();
    for j in 0..m {
        let l = lipschitz_diag(field, j);
        let gs: Vec<f64> = c.gamma_blocks[j].iter().zip(&l).map(|(g, l)| g - c.gamma * l).collect();
        let os: Vec<f64> = c.omega_blocks[j].iter().zip(&l).map(|(o, l)| o - c.theta * l).collect();
        let gmin = gs.iter().copied().fold(f64::INFINITY, f64::min);
        let omin = os.iter().copied().fold(f64::INFINITY, f64::min);
        ok &= v.record(format!("contraction: Gamma_{} - gamma L >= 0", j + 1), gmin, gmin + tol);
        ok &= v.record(format!("contraction: Omega_{} - theta L >= 0", j + 1), omin, omin + tol);
    }
    let all: Vec<usize> = (0..m).collect();
    match equal_widths(field, &all, "contraction sum condition")? {
        None => {
            ok &= v.record("contraction: slack sum > tol (vacuous)", f64::INFINITY, f64::INFINITY);
        }
        Some(k) => {
            let mut sum = vec![0.0; k];
            for j in 0..m {
                let l = lipschitz_diag(field, j);
                for i in 0..k {
                    sum[i] += c.gamma_blocks[j][i] - c.gamma * l[i] + c.omega_blocks[j][i] - c.theta * l[i];
                }
            }
            let mut s = Mat::diag(&sum);
            for t in &c.upsilon_tilde {
                s = s.add(&rect_diag(k, k, &t.diag));
            }
            let l = sym_eig_min(&s.symmetrize())?;
            ok &= v.record("contraction: lambda_min(slack sum) > tol", l, l - tol);
            ok &= l > tol;
        }
    }
    v.contraction_ok = ok;
    Ok(v)
}

/// ISS and contraction together.
pub fn verify(field: &ControlSynthField, cert: &StabilityCertificate, tol: f64) -> Result<CertificateVerdict> {
    let iss = verify_iss(field, cert, tol)?;
    Ok(iss.merge(verify_contraction(field, cert, tol)?))
}

/// A candidate Lyapunov function of the error `ξ`.
pub trait LyapunovFn {
    fn value(&self, xi: &[f64]) -> f64;

    /// `V(ξ) → ∞` as `‖ξ‖ → ∞`.
    fn radially_unbounded(&self) -> bool;
}

/// `Ṽ(ξ) = ξᵀP̃ξ + 2 Σ_j Σ_i Λ̃^j_i ∫₀^{(W_j ξ)_i} f_j`.
pub struct ContractionLyapunov<'a> {
    pub field: &'a ControlSynthField,
    pub multipliers: &'a ContractionMultipliers,
}

impl ContractionLyapunov<'_> {
    pub fn new<'a>(field: &'a ControlSynthField, cert: &'a StabilityCertificate) -> Result<ContractionLyapunov<'a>> {
        let multipliers = cert
            .contraction
            .as_ref()
            .ok_or_else(|| Error::Certificate("no contraction multipliers supplied".into()))?;
        validate_contraction(field, multipliers)?;
        Ok(ContractionLyapunov { field, multipliers })
    }
}

impl LyapunovFn for ContractionLyapunov<'_> {
    fn value(&self, xi: &[f64]) -> f64 {
        let c = self.multipliers;
        let mut v = dot(xi, &c.p_tilde.mat_vec(xi));
        for j in 0..self.field.num_blocks() {
            let act = self.field.activation(j);
            for (s, l) in self.field.w(j).mat_vec(xi).iter().zip(&c.lambda_tilde[j]) {
                v += 2.0 * l * act.integral(*s);
            }
        }
        v
    }

    fn radially_unbounded(&self) -> bool {
        // every menu integral grows without bound, so Ṽ does whenever
        // P̃ + Σ W_jᵀ Λ̃^j W_j is positive definite
        let c = self.multipliers;
        let mut m = c.p_tilde.symmetrize();
        for j in 0..self.field.num_blocks() {
            debug_assert!(self.field.activation(j).has_unbounded_integral());
            let w = self.field.w(j);
            m = m.add(&w.transpose().matmul(&Mat::diag(&c.lambda_tilde[j])).matmul(w));
        }
        sym_eig_min(&m.symmetrize()).is_ok_and(|l| l > 0.0)
    }
}

/// Convenience wrapper over [`ContractionLyapunov`].
pub fn lyapunov_value(cert: &StabilityCertificate, xi: &[f64], field: &ControlSynthField) -> Result<f64> {
    if xi.len() != field.dim() {
        return Err(Error::dim("Lyapunov argument", field.dim(), xi.len()));
    }
    Ok(ContractionLyapunov::new(field, cert)?.value(xi))
}

/// Sublevel set `{ξ : V(ξ) ≤ level}` guaranteed to contract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionRegion {
    /// `+∞` when `global`.
    pub level: f64,
    pub global: bool,
}

impl ContractionRegion {
    pub fn contains(&self, lyap: &dyn LyapunovFn, xi: &[f64]) -> bool {
        self.global || lyap.value(xi) <= self.level
    }
}

/// Level of the region: infinite for radially unbounded `V`, otherwise the
/// largest value on a `grid`-per-axis lattice over `probe`.
pub fn region_level(lyap: &dyn LyapunovFn, probe: &BoxDomain, grid: usize) -> Result<ContractionRegion> {
    if lyap.radially_unbounded() {
        return Ok(ContractionRegion {
            level: f64::INFINITY,
            global: true,
        });
    }
    probe.validate()?;
    if grid < 2 {
        return Err(Error::Config("region grid needs >= 2 points per axis".into()));
    }
    let d = probe.lo.len();
    let total = grid.checked_pow(d as u32).filter(|&t| t <= 50_000_000).ok_or_else(|| {
        Error::Config(format!("grid of {grid}^{d} points is too large"))
    })?;
    let mut best = f64::NEG_INFINITY;
    let mut point = vec![0.0; d];
    for idx in 0..total {
        let mut rem = idx;
        for (k, p) in point.iter_mut().enumerate() {
            let g = rem % grid;
            rem /= grid;
            *p = probe.lo[k] + (probe.hi[k] - probe.lo[k]) * g as f64 / (grid - 1) as f64;
        }
        best = best.max(lyap.value(&point));
    }
    Ok(ContractionRegion {
        level: best,
        global: false,
    })
}

/// Region for a verified contraction certificate; unverified ones are refused.
pub fn contraction_region(
    field: &ControlSynthField,
    cert: &StabilityCertificate,
    tol: f64,
    probe: &BoxDomain,
    grid: usize,
) -> Result<ContractionRegion> {
    let v = verify_contraction(field, cert, tol)?;
    if !v.contraction_ok {
        return Err(Error::Certificate(format!(
            "refusing region for an unverified certificate: {}",
            v.violated.join("; ")
        )));
    }
    region_level(&ContractionLyapunov::new(field, cert)?, probe, grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionProbe {
    pub times: Vec<f64>,
    /// `‖ξ(t_k)‖` for each time.
    pub norms: Vec<f64>,
    /// `‖ξ(horizon)‖ / ‖ξ(0)‖`, defined as 0 when `ξ(0) = 0`.
    pub ratio: f64,
}

/// Integrate from `x0` and `x0 + d0` on `[0, horizon]` and track the gap at
/// `segments + 1` evenly spaced times.
pub fn contraction_probe(
    field: &dyn VectorField,
    x0: &[f64],
    d0: &[f64],
    horizon: f64,
    solver: &SolverConfig,
    segments: usize,
) -> Result<ContractionProbe> {
    if x0.len() != field.dim() || d0.len() != field.dim() {
        return Err(Error::dim("contraction probe state", field.dim(), x0.len().max(d0.len())));
    }
    if !(horizon > 0.0) || segments == 0 {
        return Err(Error::Config("contraction probe needs horizon > 0 and >= 1 segment".into()));
    }
    let times: Vec<f64> = (0..=segments).map(|k| horizon * k as f64 / segments as f64).collect();
    if norm2(d0) == 0.0 {
        return Ok(ContractionProbe {
            norms: vec![0.0; times.len()],
            times,
            ratio: 0.0,
        });
    }
    let mut x = x0.to_vec();
    let mut y: Vec<f64> = x0.iter().zip(d0).map(|(a, b)| a + b).collect();
    let gap = |x: &[f64], y: &[f64]| norm2(&x.iter().zip(y).map(|(a, b)| b - a).collect::<Vec<_>>());
    let mut norms = vec![gap(&x, &y)];
    for w in times.windows(2) {
        x = integrate(field, &x, w[0], w[1], solver)?.final_state().to_vec();
        y = integrate(field, &y, w[0], w[1], solver)?.final_state().to_vec();
        norms.push(gap(&x, &y));
    }
    let ratio = norms[norms.len() - 1] / norms[0];
    Ok(ContractionProbe { times, norms, ratio })
}

/// Count probes violating `p(x,ξ)ᵀp(x,ξ) ≤ ξᵀWᵀL p(x,ξ)` with
/// `p = f(W(x+ξ)) − f(Wx)`, for random `W` (`k × d`), `x`, `ξ`.
pub fn lemma2_violations(act: Activation, k: usize, d: usize, probes: usize, rng: &mut Rng) -> usize {
    let l = act.lipschitz();
    let mut bad = 0;
    for _ in 0..probes {
        let w = Mat::from_vec(k, d, (0..k * d).map(|_| 2.0 * rng.normal()).collect()).expect("shape");
        let x: Vec<f64> = (0..d).map(|_| 3.0 * rng.normal()).collect();
        let xi: Vec<f64> = (0..d).map(|_| 3.0 * rng.normal()).collect();
        let wx = w.mat_vec(&x);
        let wxi = w.mat_vec(&xi);
        let p: Vec<f64> = wx.iter().zip(&wxi).map(|(a, b)| act.apply(a + b) - act.apply(*a)).collect();
        let lhs = dot(&p, &p);
        let rhs: f64 = wxi.iter().zip(&p).map(|(s, pi)| s * l * pi).sum();
        if lhs > rhs + 1e-12 * (1.0 + rhs.abs()) {
            bad += 1;
        }
    }
    bad
}

/// Result of the multiplier grid search.
#[derive(Clone, Debug)]
pub struct SearchResult {
    pub certificate: StabilityCertificate,
    pub verdict: CertificateVerdict,
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64)).collect()
}

/// Grid search over scalar multiples of the identity for the contraction
/// multipliers, with `P̃ = I` and `Λ̃ = 0` so that `Ṽ` is the squared
/// Euclidean norm. Returns the candidate with the smallest `λ_max(Q̃)`;
/// its verdict says whether it certifies.
pub fn search_contraction(field: &ControlSynthField, tol: f64) -> Result<SearchResult> {
    let n = field.dim();
    let m = field.num_blocks();
    let sym_a0 = sym_sum(field.a0());
    let decay = -sym_eig_max(&sym_a0)?;
    let xi0 = if decay > 0.0 { 0.1 * decay } else { 0.0 };
    let make = |gamma: f64, theta: f64| ContractionMultipliers {
        p_tilde: Mat::identity(n),
        lambda_tilde: (0..m).map(|j| vec![0.0; field.block_width(j)]).collect(),
        xi_tilde0: vec![xi0; n],
        upsilon_tilde: Vec::new(),
        gamma_blocks: (0..m).map(|j| lipschitz_diag(field, j).iter().map(|l| gamma * l).collect()).collect(),
        omega_blocks: (0..m)
            .map(|j| lipschitz_diag(field, j).iter().map(|l| theta * l * (1.0 + 1e-3)).collect())
            .collect(),
        gamma,
        theta,
    };
    let mut best: Option<(f64, ContractionMultipliers)> = None;
    for &gamma in &logspace(-3.0, 3.0, 25) {
        for &theta in &logspace(-4.0, 2.0, 13) {
            let c = make(gamma, theta);
            let l = sym_eig_max(&assemble_qtilde(field, &c)?)?;
            if best.as_ref().is_none_or(|(b, _)| l < *b) {
                best = Some((l, c));
            }
        }
    }
    let (_, c) = best.expect("grid is nonempty");
    let certificate = StabilityCertificate {
        iss: None,
        contraction: Some(c),
    };
    let verdict = verify_contraction(field, &certificate, tol)?;
    Ok(SearchResult { certificate, verdict })
}

/// Grid search over scalar ISS multipliers: `P = I`, `Λ^j = λI`,
/// `Ξ^0 = ξI`, `Υ_{0,j} = υI`, `Φ = φI`, remaining terms zero.
pub fn search_iss(field: &ControlSynthField, tol: f64) -> Result<SearchResult> {
    let n = field.dim();
    let m = field.num_blocks();
    let sym_a0 = sym_sum(field.a0());
    let decay = -sym_eig_max(&sym_a0)?;
    let xi0 = if decay > 0.0 { 0.1 * decay } else { 0.0 };
    let make = |lam: f64, ups: f64, phi: f64| IssMultipliers {
        p: Mat::identity(n),
        lambda: (0..m).map(|j| vec![lam; field.block_width(j)]).collect(),
        xi: std::iter::once(vec![xi0; n])
            .chain((0..m).map(|j| vec![0.0; field.block_width(j)]))
            .collect(),
        upsilon0: (0..m).map(|j| vec![ups; field.block_width(j)]).collect(),
        upsilon: Vec::new(),
        phi: Mat::identity(n).scale(phi),
    };
    let mut best: Option<(f64, IssMultipliers)> = None;
    let ups_grid = if m == 0 { vec![0.0] } else { logspace(-4.0, 0.0, 9) };
    let lam_grid = if m == 0 { vec![0.0] } else { logspace(-3.0, 2.0, 11) };
    for &lam in &lam_grid {
        for &ups in &ups_grid {
            for &phi in &logspace(-2.0, 3.0, 11) {
                let c = make(lam, ups, phi);
                let l = sym_eig_max(&assemble_q(field, &c)?)?;
                if best.as_ref().is_none_or(|(b, _)| l < *b) {
                    best = Some((l, c));
                }
            }
        }
    }
    let (_, c) = best.expect("grid is nonempty");
    let certificate = StabilityCertificate {
        iss: Some(c),
        contraction: None,
    };
    let verdict = verify_iss(field, &certificate, tol)?;
    Ok(SearchResult { certificate, verdict })
}
