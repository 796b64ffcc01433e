//! Adaptive tensor-product Gauss–Legendre quadrature on boxes.

use crate::error::{Error, Result};
use rayon::prelude::*;
use std::sync::OnceLock;

/// Nodes and weights on [-1, 1] by Newton iteration on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn rule(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static G8: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static G7: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    match n {
        8 => G8.get_or_init(|| gauss_legendre(8)),
        7 => G7.get_or_init(|| gauss_legendre(7)),
        _ => unreachable!(),
    }
}

#[derive(Clone, Debug)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Initial uniform subdivisions per axis, so that narrow supports are seen.
    pub initial_divisions: usize,
    pub max_depth: usize,
    pub max_cells: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { abs_tol: 1e-8, rel_tol: 1e-8, initial_divisions: 4, max_depth: 24, max_cells: 200_000 }
    }
}

#[derive(Clone, Debug)]
struct Cell {
    lo: Vec<f64>,
    hi: Vec<f64>,
    depth: usize,
    value: f64,
    err: f64,
}

fn tensor<F: Fn(&[f64]) -> f64>(f: &F, lo: &[f64], hi: &[f64], n: usize) -> f64 {
    let (x, w) = rule(n);
    let d = lo.len();
    if d == 0 {
        return f(&[]);
    }
    let half: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect();
    let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b + a)).collect();
    let mut idx = vec![0usize; d];
    let mut pt = vec![0.0; d];
    let mut s = 0.0;
    loop {
        let mut wt = 1.0;
        for k in 0..d {
            pt[k] = mid[k] + half[k] * x[idx[k]];
            wt *= w[idx[k]] * half[k];
        }
        s += wt * f(&pt);
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == d {
                return s;
            }
        }
    }
}

fn eval_cell<F: Fn(&[f64]) -> f64>(f: &F, lo: Vec<f64>, hi: Vec<f64>, depth: usize) -> Cell {
    let v8 = tensor(f, &lo, &hi, 8);
    let v7 = tensor(f, &lo, &hi, 7);
    Cell { lo, hi, depth, value: v8, err: (v8 - v7).abs() }
}

fn children(c: &Cell) -> Vec<(Vec<f64>, Vec<f64>)> {
    let d = c.lo.len();
    let mut out = Vec::with_capacity(1 << d);
    for mask in 0..(1usize << d) {
        let mut lo = c.lo.clone();
        let mut hi = c.hi.clone();
        for k in 0..d {
            let m = 0.5 * (c.lo[k] + c.hi[k]);
            if mask >> k & 1 == 0 {
                hi[k] = m;
            } else {
                lo[k] = m;
            }
        }
        out.push((lo, hi));
    }
    out
}

/// Integrates `f` over the box `[lo, hi]`. The global error estimate is the sum of
/// per-cell |GL8 − GL7| and must drop below `abs_tol + rel_tol·|I|`.
pub fn integrate_box<F>(f: &F, lo: &[f64], hi: &[f64], opts: &QuadOptions) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = lo.len();
    if d == 0 {
        return Ok(f(&[]));
    }
    if lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite())) {
        return Err(Error::BadDim("quadrature box must be finite".into()));
    }
    let k = opts.initial_divisions.max(1);
    let mut starts: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![], vec![])];
    for ax in 0..d {
        let step = (hi[ax] - lo[ax]) / k as f64;
        let mut next = Vec::with_capacity(starts.len() * k);
        for (l, h) in &starts {
            for i in 0..k {
                let mut l2 = l.clone();
                let mut h2 = h.clone();
                l2.push(lo[ax] + step * i as f64);
                h2.push(if i + 1 == k { hi[ax] } else { lo[ax] + step * (i + 1) as f64 });
                next.push((l2, h2));
            }
        }
        starts = next;
    }
    let mut cells: Vec<Cell> = starts.into_par_iter().map(|(l, h)| eval_cell(f, l, h, 0)).collect();
    loop {
        let total: f64 = cells.iter().map(|c| c.value).sum();
        let err: f64 = cells.iter().map(|c| c.err).sum();
        let tol = opts.abs_tol + opts.rel_tol * total.abs();
        if err <= tol {
            return Ok(total);
        }
        // split every cell whose error is a sizeable share of the worst one
        let worst = cells.iter().map(|c| c.err).fold(0.0, f64::max);
        let (split, keep): (Vec<Cell>, Vec<Cell>) = cells.into_iter().partition(|c| c.err >= 0.25 * worst && c.err > 0.0);
        if split.iter().any(|c| c.depth >= opts.max_depth) {
            return Err(Error::NonConverged(format!("adaptive depth {} exceeded, error estimate {err:.3e} > {tol:.3e}", opts.max_depth)));
        }
        let jobs: Vec<(Vec<f64>, Vec<f64>, usize)> = split.iter().flat_map(|c| children(c).into_iter().map(move |(l, h)| (l, h, c.depth + 1))).collect();
        if keep.len() + jobs.len() > opts.max_cells {
            return Err(Error::NonConverged(format!("more than {} cells needed, error estimate {err:.3e} > {tol:.3e}", opts.max_cells)));
        }
        let fresh: Vec<Cell> = jobs.into_par_iter().map(|(l, h, dpt)| eval_cell(f, l, h, dpt)).collect();
        cells = keep;
        cells.extend(fresh);
        // keep the reduction order independent of how cells were produced
        cells.sort_by(|a, b| a.lo.partial_cmp(&b.lo).unwrap().then(a.hi.partial_cmp(&b.hi).unwrap()));
    }
}

/// One-dimensional convenience wrapper.
pub fn integrate_1d<F>(f: F, a: f64, b: f64, opts: &QuadOptions) -> Result<f64>
where
    F: Fn(f64) -> f64 + Sync,
{
    integrate_box(&|x: &[f64]| f(x[0]), &[a], &[b], opts)
}

/// Fixed composite GL8 nodes and weights on `[a, b]` split into `cells` equal pieces.
pub fn composite_nodes(a: f64, b: f64, cells: usize) -> Vec<(f64, f64)> {
    let (x, w) = rule(8);
    let h = (b - a) / cells as f64;
    let mut out = Vec::with_capacity(cells * 8);
    for c in 0..cells {
        let lo = a + h * c as f64;
        for (xi, wi) in x.iter().zip(w) {
            out.push((lo + 0.5 * h * (xi + 1.0), 0.5 * h * wi));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_integrate_polynomials_exactly() {
        for n in [7, 8] {
            let (x, w) = gauss_legendre(n);
            for deg in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-14, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn gaussian_in_two_dimensions() {
        let v = integrate_box(&|x: &[f64]| (-(x[0] * x[0] + x[1] * x[1])).exp(), &[-6.0, -6.0], &[6.0, 6.0], &QuadOptions::default()).unwrap();
        assert!((v - std::f64::consts::PI).abs() < 1e-8);
    }

    #[test]
    fn narrow_bump_is_found() {
        let f = |x: f64| if (x - 0.3).abs() < 0.01 { 1.0 - ((x - 0.3) / 0.01).powi(2) } else { 0.0 };
        let v = integrate_1d(f, 0.0, 1.0, &QuadOptions { initial_divisions: 64, ..Default::default() }).unwrap();
        assert!((v - 0.04 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn nonconvergence_is_reported() {
        let opts = QuadOptions { max_depth: 2, ..Default::default() };
        let r = integrate_1d(|x| (x - 0.3).abs().sqrt(), 0.0, 1.0, &opts);
        assert!(matches!(r, Err(Error::NonConverged(_))));
    }

    #[test]
    fn composite_nodes_sum_to_length() {
        let s: f64 = composite_nodes(1.0, 4.0, 5).iter().map(|(_, w)| w).sum();
        assert!((s - 3.0).abs() < 1e-14);
    }
}
