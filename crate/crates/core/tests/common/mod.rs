//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use fmlab::linalg::Mat;

/// Every permutation of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn brute_min_cost(cost: &Mat) -> f64 {
    permutations(cost.rows())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Characteristic polynomial coefficients `c_0..c_n` (monic) by Faddeev-LeVerrier.
pub fn char_poly(a: &Mat) -> Vec<f64> {
    let n = a.rows();
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    let mut m = Mat::zeros(n, n);
    for k in 1..=n {
        m = a.matmul(&m).add(&Mat::identity(n).scale(c[n - k + 1]));
        let am = a.matmul(&m);
        let tr: f64 = (0..n).map(|i| am[(i, i)]).sum();
        c[n - k] = -tr / k as f64;
    }
    c
}

/// Largest real root of a real-rooted polynomial: Newton from an upper bound
/// decreases monotonically onto it.
pub fn largest_root(c: &[f64], upper: f64) -> f64 {
    let eval = |x: f64| {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &ck in c.iter().rev() {
            dp = dp * x + p;
            p = p * x + ck;
        }
        (p, dp)
    };
    let mut x = upper;
    for _ in 0..10_000 {
        let (p, dp) = eval(x);
        if p == 0.0 || dp == 0.0 {
            break;
        }
        let next = x - p / dp;
        if (next - x).abs() <= 1e-14 * (1.0 + x.abs()) {
            x = next;
            break;
        }
        x = next;
    }
    x
}

/// Least-squares slope of `ln err` against `ln tau`.
pub fn slope(taus: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
