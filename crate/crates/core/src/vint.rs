//! Integration over virtual classes: partitions of unity, integrals, pushforwards
//! through a Thom form, Chern–Weil forms, tropical decomposition and products.

use crate::charts::{check_generated_by_functions, complete_form, Form, JacFn};
use crate::error::{Error, Result};
use crate::ext;
use crate::kcat::{smoothstep, Cutoffs, KChart, Kcat};
use crate::quad::{gauss_legendre, integrate_box, QuadOptions};
use crate::tropical::{fmt_q, Q};
use crate::vclass::{rebuild_with, Bump, Perturbation, QNode, VirtualClass};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde_json::{json, Value};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

/// Tolerance on fiber sums of a partition of unity.
pub const FIBER_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionShape {
    /// `r̃ = S5((ρ − ε)/(1/2 − ε))`, `R = (1/2 − max ρ)₊²`.
    Quintic,
    /// `r̃ = S7((ρ − ε')/(1/2 − ε'))` with `ε' = ε + (1/2 − ε)/3`, `R = (1/2 − max ρ)₊³`.
    Septic,
}

fn septic_step(t: f64) -> f64 {
    let s = t.clamp(0.0, 1.0);
    s * s * s * s * (35.0 + s * (-84.0 + s * (70.0 - 20.0 * s)))
}

/// `r = r̃_k / (|G_k| (R + Σ_fiber r̃/|G|))` on every chart.
#[derive(Clone, Debug)]
pub struct Partition {
    pub k: Arc<Kcat>,
    pub cut: Cutoffs,
    pub eps: f64,
    pub shape: PartitionShape,
}

impl Partition {
    pub fn new(k: Arc<Kcat>, cut: Cutoffs, eps: f64, shape: PartitionShape) -> Result<Partition> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::BadNesting(format!("ε = {eps} must lie in (0, 1/2)")));
        }
        Ok(Partition { k, cut, eps, shape })
    }

    /// The cutoff level below which every `r̃` vanishes.
    pub fn support_level(&self) -> f64 {
        match self.shape {
            PartitionShape::Quintic => self.eps,
            PartitionShape::Septic => self.eps + (0.5 - self.eps) / 3.0,
        }
    }

    fn rtilde(&self, rho: f64) -> f64 {
        let e = self.support_level();
        let t = (rho - e) / (0.5 - e);
        match self.shape {
            PartitionShape::Quintic => smoothstep(t),
            PartitionShape::Septic => septic_step(t),
        }
    }

    fn big_r(&self, max_rho: f64) -> f64 {
        let s = (0.5 - max_rho).max(0.0);
        match self.shape {
            PartitionShape::Quintic => s * s,
            PartitionShape::Septic => s * s * s,
        }
    }

    /// `(Σ_fiber r̃/|G|, max_fiber ρ)` at `(j, v, y)`.
    fn fiber_data(&self, j: usize, v: usize, y: &[f64]) -> (f64, f64) {
        let mut s = 0.0;
        let mut mx = -1.0f64;
        for kk in 0..self.k.charts.len() {
            let g = self.k.charts[kk].group.order() as f64;
            for m in self.k.morphisms_from(kk, j, y, false) {
                let rho = self.cut.rho(kk, v, &m.x);
                mx = mx.max(rho);
                s += self.rtilde(rho) / g;
            }
        }
        (s, mx)
    }

    pub fn r(&self, j: usize, v: usize, y: &[f64]) -> f64 {
        let rt = self.rtilde(self.cut.rho(j, v, y));
        if rt == 0.0 {
            return 0.0;
        }
        let (s, mx) = self.fiber_data(j, v, y);
        rt / (self.k.charts[j].group.order() as f64 * (self.big_r(mx) + s))
    }

    /// `Σ` of `r` over every chart point above `(j, v, y)`.
    pub fn fiber_sum(&self, j: usize, v: usize, y: &[f64]) -> f64 {
        (0..self.k.charts.len()).flat_map(|kk| self.k.morphisms_from(kk, j, y, false).into_iter().map(move |m| (kk, m))).map(|(kk, m)| self.r(kk, v, &m.x)).sum()
    }

    /// Fiber sums equal 1 on the sampled core `{max ρ ≥ 1/2}` and at the given points.
    pub fn verify(&self, extra: &[(usize, usize, Vec<f64>)]) -> Result<usize> {
        let mut pts: Vec<(usize, usize, Vec<f64>)> = extra.to_vec();
        for (j, c) in self.k.charts.iter().enumerate() {
            for v in 0..c.n_vertices() {
                for y in c.grid(&c.f, self.k.opts.grid, self.k.opts.max_per_axis) {
                    if self.k.max_rho(&self.cut, j, v, &y) >= 0.5 {
                        pts.push((j, v, y));
                    }
                }
            }
        }
        let bad = pts.par_iter().find_map_first(|(j, v, y)| {
            let s = self.fiber_sum(*j, *v, y);
            ((s - 1.0).abs() > FIBER_SUM_TOL).then(|| format!("fiber sum {s} at {y:?} on chart {}", self.k.charts[*j].name))
        });
        match bad {
            Some(msg) => Err(Error::CoverFail(msg)),
            None => Ok(pts.len()),
        }
    }

    pub fn as_fn(&self) -> impl Fn(usize, usize, &[f64]) -> f64 + Sync + '_ {
        move |j, v, y| self.r(j, v, y)
    }
}

/// Quadrature nodes of a virtual class, grouped by chart, vertex and branch weight.
#[derive(Clone, Debug)]
pub struct NodeSet {
    pub chart: usize,
    pub vertex: usize,
    pub vertex_coords: Vec<f64>,
    pub mu: f64,
    pub nodes: Vec<QNode>,
}

#[derive(Clone, Debug)]
pub struct ClassNodes {
    pub dim: usize,
    pub sets: Vec<NodeSet>,
}

impl ClassNodes {
    pub fn of(vc: &VirtualClass) -> Result<ClassNodes> {
        if vc.dim < 0 {
            return Err(Error::DegreeMismatch(format!("virtual dimension {} is negative", vc.dim)));
        }
        let mut sets = Vec::new();
        for (j, mu, z) in vc.weighted() {
            let nodes: Vec<QNode> = z.nodes().cloned().collect();
            if nodes.is_empty() {
                continue;
            }
            sets.push(NodeSet { chart: j, vertex: z.vertex, vertex_coords: vc.k.charts[j].vertex(z.vertex), mu, nodes });
        }
        Ok(ClassNodes { dim: vc.dim as usize, sets })
    }

    /// Product class on product charts `j = j_a · charts_b + j_b`; frames are the
    /// first factor's frame followed by the second's.
    pub fn product(&self, other: &ClassNodes, dims_a: &[usize], dims_b: &[usize]) -> ClassNodes {
        let nb = dims_b.len();
        let mut sets = Vec::new();
        for a in &self.sets {
            for b in &other.sets {
                let (da, db) = (dims_a[a.chart], dims_b[b.chart]);
                let mut nodes = Vec::with_capacity(a.nodes.len() * b.nodes.len());
                for p in &a.nodes {
                    for q in &b.nodes {
                        let mut x = p.x.clone();
                        x.extend_from_slice(&q.x);
                        let mut frame: Vec<Vec<f64>> = p.frame.iter().map(|v| v.iter().cloned().chain(std::iter::repeat_n(0.0, db)).collect()).collect();
                        frame.extend(q.frame.iter().map(|v| std::iter::repeat_n(0.0, da).chain(v.iter().cloned()).collect()));
                        nodes.push(QNode { x, frame, w: p.w * q.w });
                    }
                }
                let mut vc = a.vertex_coords.clone();
                vc.extend_from_slice(&b.vertex_coords);
                sets.push(NodeSet { chart: a.chart * nb + b.chart, vertex: 0, vertex_coords: vc, mu: a.mu * b.mu, nodes });
            }
        }
        ClassNodes { dim: self.dim + other.dim, sets }
    }
}

/// `Σ_sets μ Σ_nodes w · r · θ(frame)`.
pub fn integrate_nodes(cls: &ClassNodes, theta: &[Form], r: &(dyn Fn(usize, usize, &[f64]) -> f64 + Sync)) -> Result<f64> {
    for s in &cls.sets {
        let f = theta.get(s.chart).ok_or_else(|| Error::BadDim(format!("no form given on chart {}", s.chart)))?;
        if f.degree != cls.dim {
            return Err(Error::DegreeMismatch(format!("form of degree {} on a class of dimension {}", f.degree, cls.dim)));
        }
    }
    let parts: Vec<f64> = cls
        .sets
        .par_iter()
        .map(|s| {
            let f = &theta[s.chart];
            s.mu * s
                .nodes
                .iter()
                .map(|q| {
                    let rr = r(s.chart, s.vertex, &q.x);
                    if rr == 0.0 {
                        0.0
                    } else {
                        q.w * rr * f.on_vectors(&s.vertex_coords, &q.x, &q.frame)
                    }
                })
                .sum::<f64>()
        })
        .collect();
    Ok(parts.iter().sum())
}

/// `∫_[K] θ` with the partition `part`.
pub fn integrate_vclass(vc: &VirtualClass, theta: &[Form], part: &Partition) -> Result<f64> {
    if part.support_level() + 1e-12 < vc.eps / 2.0 {
        return Err(Error::BadNesting(format!("partition reaches ρ = {} below the traced region ρ > {}", part.support_level(), vc.eps / 2.0)));
    }
    integrate_nodes(&ClassNodes::of(vc)?, theta, &part.as_fn())
}

fn gamma_half(n2: u32) -> f64 {
    // Γ(n2 / 2)
    let mut g = if n2.is_multiple_of(2) { 1.0 } else { PI.sqrt() };
    let mut x = if n2.is_multiple_of(2) { 1.0 } else { 0.5 };
    while 2.0 * x < n2 as f64 - 0.5 {
        g *= x;
        x += 1.0;
    }
    g
}

/// One block of the bundle `W = A × R^{2d}`: `x(a, w) = a + L w` on the block's target
/// coordinates, and the Thom density `E(|w|) = C (1 − |w|²/δ²)^q`.
#[derive(Clone, Debug)]
pub struct ThomBlock {
    pub l: DMatrix<f64>,
    pub delta: f64,
    pub q: u32,
}

impl ThomBlock {
    pub fn d(&self) -> usize {
        self.l.nrows()
    }

    fn norm_const(&self) -> f64 {
        let d = self.d() as u32;
        let q = self.q;
        gamma_half(2 * (q + 1 + d)) / (PI.powi(d as i32) * gamma_half(2 * (q + 1)) * self.delta.powi(2 * d as i32))
    }

    pub fn density(&self, r: f64) -> f64 {
        let t = 1.0 - r * r / (self.delta * self.delta);
        if t <= 0.0 {
            0.0
        } else {
            self.norm_const() * t.powi(self.q as i32)
        }
    }

    /// `∫_{ker L} E(√(ρ0² + |n|²)) dn`.
    pub fn fiber_profile(&self, rho0: f64) -> f64 {
        let s2 = self.delta * self.delta - rho0 * rho0;
        if s2 <= 0.0 {
            return 0.0;
        }
        let d = self.d() as u32;
        let q = self.q;
        let e = (q as f64) + d as f64 / 2.0;
        self.norm_const() * PI.powf(d as f64 / 2.0) * gamma_half(2 * (q + 1)) / gamma_half(2 * q + 2 + d) * s2.powf(e) / self.delta.powi(2 * q as i32)
    }
}

/// A choice `(W, x, e)` for pushforwards to `A = R^d`, as a product of blocks.
#[derive(Clone, Debug)]
pub struct PushConfig {
    pub blocks: Vec<ThomBlock>,
}

impl PushConfig {
    /// One block with `L = [cos θ I | sin θ I]` scaled by `s`.
    pub fn standard(d: usize, angle: f64, scale: f64, delta: f64, q: u32) -> PushConfig {
        let mut l = DMatrix::zeros(d, 2 * d);
        for i in 0..d {
            l[(i, i)] = scale * angle.cos();
            l[(i, d + i)] = scale * angle.sin();
        }
        PushConfig { blocks: vec![ThomBlock { l, delta, q }] }
    }

    pub fn product(&self, other: &PushConfig) -> PushConfig {
        PushConfig { blocks: self.blocks.iter().chain(&other.blocks).cloned().collect() }
    }

    pub fn target_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.d()).sum()
    }

    /// Shape, rank and normalization checks.
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            if b.l.ncols() != 2 * b.d() || b.d() == 0 {
                return Err(Error::BadDim(format!("block {i}: L must be d × 2d")));
            }
            if !(b.delta > 0.0) || b.q < 2 {
                return Err(Error::Schema(format!("block {i}: need δ > 0 and q ≥ 2")));
            }
            let sv = b.l.clone().svd(false, false).singular_values;
            if sv.iter().cloned().fold(f64::INFINITY, f64::min) < 1e-9 {
                return Err(Error::NotSubmersion(format!("block {i}: x is not a submersion on the fiber")));
            }
            let n = 2 * b.d() as u32;
            let area = 2.0 * PI.powf(n as f64 / 2.0) / gamma_half(n);
            let (x, w) = gauss_legendre(40);
            let total: f64 = x
                .iter()
                .zip(&w)
                .map(|(t, wt)| {
                    let r = b.delta * (t + 1.0) / 2.0;
                    wt * b.delta / 2.0 * b.density(r) * r.powi(n as i32 - 1)
                })
                .sum::<f64>()
                * area;
            if (total - 1.0).abs() > 1e-8 {
                return Err(Error::NonConverged(format!("block {i}: Thom form integrates to {total} over the fiber")));
            }
        }
        Ok(())
    }

    /// `(L⁺, N)`: block-diagonal pseudo-inverse and an orthonormal kernel basis.
    fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.target_dim();
        let mut lp = DMatrix::zeros(2 * d, d);
        let mut nn = DMatrix::zeros(2 * d, d);
        let (mut r0, mut c0) = (0, 0);
        for b in &self.blocks {
            let db = b.d();
            let pinv = b.l.clone().pseudo_inverse(1e-14).expect("nonnegative epsilon");
            lp.view_mut((c0, r0), (2 * db, db)).copy_from(&pinv);
            let eig = (b.l.transpose() * &b.l).symmetric_eigen();
            let mut idx: Vec<usize> = (0..2 * db).collect();
            idx.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
            for (k, &i) in idx.iter().take(db).enumerate() {
                nn.view_mut((c0, r0 + k), (2 * db, 1)).copy_from(&eig.eigenvectors.column(i));
            }
            r0 += db;
            c0 += 2 * db;
        }
        (lp, nn)
    }

    fn reach(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let smax = b.l.clone().svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max);
            out.extend(std::iter::repeat_n(smax * b.delta, b.d()));
        }
        out
    }

    /// The configuration for `y*`, `y(a') = M a' + c`: `L' = M⁻¹ L`, same `e`.
    pub fn pulled_back(&self, m: &DMatrix<f64>) -> Result<PushConfig> {
        let minv = m.clone().try_inverse().ok_or_else(|| Error::NotSubmersion("affine map is not invertible".into()))?;
        let mut l = DMatrix::zeros(self.target_dim(), 2 * self.target_dim());
        let (mut r0, mut c0) = (0, 0);
        for b in &self.blocks {
            l.view_mut((r0, c0), (b.d(), 2 * b.d())).copy_from(&b.l);
            r0 += b.d();
            c0 += 2 * b.d();
        }
        let lnew = minv * l;
        // the result stays block diagonal only for block-diagonal M; otherwise use one block
        let b0 = &self.blocks[0];
        if self.blocks.len() > 1 {
            let same = self.blocks.iter().all(|b| b.delta == b0.delta && b.q == b0.q);
            if !same {
                return Err(Error::DimUnsupported("pullback of a multi-block configuration with different profiles".into()));
            }
        }
        if self.blocks.len() == 1 {
            return Ok(PushConfig { blocks: vec![ThomBlock { l: lnew, ..b0.clone() }] });
        }
        Err(Error::DimUnsupported("pullback of a multi-block configuration".into()))
    }
}

/// Maps `π_j` from each chart to `A = R^d`.
#[derive(Clone)]
pub struct Target {
    pub dim: usize,
    pub maps: Vec<JacFn>,
}

impl Target {
    pub fn product(&self, other: &Target, dims_a: &[usize], dims_b: &[usize]) -> Target {
        let mut maps = Vec::new();
        for (ja, fa) in self.maps.iter().enumerate() {
            for (jb, fb) in other.maps.iter().enumerate() {
                let (fa, fb) = (fa.clone(), fb.clone());
                let (da, db) = (dims_a[ja], dims_b[jb]);
                let (ta, tb) = (self.dim, other.dim);
                let f: JacFn = Arc::new(move |x: &[f64]| {
                    let (ya, ja) = fa(&x[..da]);
                    let (yb, jb) = fb(&x[da..]);
                    let mut y = ya;
                    y.extend(yb);
                    let mut jac = vec![vec![0.0; da + db]; ta + tb];
                    for i in 0..ta {
                        jac[i][..da].copy_from_slice(&ja[i]);
                    }
                    for i in 0..tb {
                        jac[ta + i][da..].copy_from_slice(&jb[i]);
                    }
                    (y, jac)
                });
                maps.push(f);
            }
        }
        Target { dim: self.dim + other.dim, maps }
    }
}

struct PushNode {
    pi: Vec<f64>,
    weight: f64,
    /// Per output index set `I`: the a-independent factor.
    coeff: Vec<f64>,
}

/// `π_!θ` as a form on `A`, with a box containing its support.
#[derive(Clone)]
pub struct Pushforward {
    pub form: Form,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Pushforward {
    pub fn at(&self, a: &[f64]) -> Vec<f64> {
        self.form.at(&[], a)
    }
}

/// `π_!(θ) = π̂_!(r θ ∧ e)`, defined so that `∫_A γ ∧ π_!β = ∫ π̂*γ ∧ β`.
pub fn pushforward_nodes(cls: &ClassNodes, target: &Target, theta: &[Form], cfg: &PushConfig, r: &(dyn Fn(usize, usize, &[f64]) -> f64 + Sync)) -> Result<Pushforward> {
    cfg.validate()?;
    let d = cfg.target_dim();
    if d != target.dim {
        return Err(Error::BadDim(format!("configuration has rank for R^{d}, target is R^{}", target.dim)));
    }
    let k = cls.dim;
    let q = match theta.first() {
        Some(f) => f.degree,
        None => return Err(Error::BadDim("no forms given".into())),
    };
    if theta.iter().any(|f| f.degree != q) {
        return Err(Error::DegreeMismatch("chart forms have different degrees".into()));
    }
    if q > k || q + d < k {
        return Err(Error::DegreeMismatch(format!("θ of degree {q} on a class of dimension {k} has no pushforward to R^{d}")));
    }
    let p = q + d - k;
    let (lp, nn) = cfg.matrices();
    let mut b = DMatrix::zeros(2 * d, 2 * d);
    b.view_mut((0, 0), (2 * d, d)).copy_from(&lp);
    b.view_mut((0, d), (2 * d, d)).copy_from(&nn);
    let sigma = if (d * k).is_multiple_of(2) { 1.0 } else { -1.0 } * b.determinant().signum();
    let out_sets = ext::subsets(d, p);
    let s_sets = ext::subsets(k, q);
    let pq_sign = if (p * q).is_multiple_of(2) { 1.0 } else { -1.0 };
    let mut nodes: Vec<PushNode> = Vec::new();
    for s in &cls.sets {
        let f = theta.get(s.chart).ok_or_else(|| Error::BadDim(format!("no form given on chart {}", s.chart)))?;
        let pi = target.maps.get(s.chart).ok_or_else(|| Error::BadDim(format!("no map given on chart {}", s.chart)))?;
        let built: Vec<Option<PushNode>> = s
            .nodes
            .par_iter()
            .map(|qn| {
                let rr = r(s.chart, s.vertex, &qn.x);
                if rr == 0.0 {
                    return None;
                }
                let (y, jac) = pi(&qn.x);
                // −L⁺ P e_i for each frame vector
                let moved: Vec<Vec<f64>> = qn
                    .frame
                    .iter()
                    .map(|e| {
                        let pe: Vec<f64> = (0..d).map(|i| jac[i].iter().zip(e).map(|(a, b)| a * b).sum()).collect();
                        (0..2 * d).map(|row| -(0..d).map(|c| lp[(row, c)] * pe[c]).sum::<f64>()).collect()
                    })
                    .collect();
                let mut coeff = vec![0.0; out_sets.len()];
                for sset in &s_sets {
                    let frame_s: Vec<Vec<f64>> = sset.iter().map(|&i| qn.frame[i].clone()).collect();
                    let th = f.on_vectors(&s.vertex_coords, &qn.x, &frame_s);
                    if th == 0.0 {
                        continue;
                    }
                    let rest: Vec<usize> = (0..k).filter(|i| !sset.contains(i)).collect();
                    let shuffle = ext::merge_sign(sset, &rest).map_or(1.0, |m| m.1);
                    for (ii, iset) in out_sets.iter().enumerate() {
                        let mut cols: Vec<Vec<f64>> = iset.iter().map(|&c| lp.column(c).iter().cloned().collect()).collect();
                        cols.extend(rest.iter().map(|&i| moved[i].clone()));
                        cols.extend((0..d).map(|c| nn.column(c).iter().cloned().collect()));
                        let rows: Vec<Vec<f64>> = (0..2 * d).map(|rw| cols.iter().map(|c| c[rw]).collect()).collect();
                        coeff[ii] += pq_sign * shuffle * th * ext::det(rows);
                    }
                }
                Some(PushNode { pi: y, weight: sigma * s.mu * qn.w * rr, coeff })
            })
            .collect();
        nodes.extend(built.into_iter().flatten());
    }
    let reach = cfg.reach();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for n in &nodes {
        for i in 0..d {
            lo[i] = lo[i].min(n.pi[i] - reach[i]);
            hi[i] = hi[i].max(n.pi[i] + reach[i]);
        }
    }
    if nodes.is_empty() {
        lo = vec![0.0; d];
        hi = vec![0.0; d];
    }
    // cells of side `reach`: only the 3^d cells around `a` can contribute
    let cell = |x: &[f64], reach: &[f64]| -> Vec<i64> { x.iter().zip(reach).map(|(v, r)| (v / r).floor() as i64).collect() };
    let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        cells.entry(cell(&n.pi, &reach)).or_default().push(i);
    }
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(d as u32))
        .map(|mut c| {
            (0..d)
                .map(|_| {
                    let o = (c % 3) as i64 - 1;
                    c /= 3;
                    o
                })
                .collect()
        })
        .collect();
    let nodes = Arc::new(nodes);
    let blocks = cfg.blocks.clone();
    let len = out_sets.len();
    let eval = Arc::new(move |_v: &[f64], a: &[f64]| {
        let mut out = vec![0.0; len];
        let home = cell(a, &reach);
        let near = offsets.iter().filter_map(|o| {
            let c: Vec<i64> = home.iter().zip(o).map(|(h, o)| h + o).collect();
            cells.get(&c)
        });
        for n in near.flatten().map(|&i| &nodes[i]) {
            let diff: Vec<f64> = a.iter().zip(&n.pi).map(|(x, y)| x - y).collect();
            let mut prof = 1.0;
            let (mut r0, mut c0) = (0, 0);
            for b in &blocks {
                let db = b.d();
                let mut s2 = 0.0;
                for row in 0..2 * db {
                    let w: f64 = (0..db).map(|c| lp[(c0 + row, r0 + c)] * diff[r0 + c]).sum();
                    s2 += w * w;
                }
                prof *= b.fiber_profile(s2.sqrt());
                if prof == 0.0 {
                    break;
                }
                r0 += db;
                c0 += 2 * db;
            }
            if prof == 0.0 {
                continue;
            }
            for (o, c) in out.iter_mut().zip(&n.coeff) {
                *o += n.weight * c * prof;
            }
        }
        out
    });
    let min_delta = cfg.blocks.iter().map(|b| b.delta).fold(f64::INFINITY, f64::min);
    let mut form = Form::new(d, p, eval)?;
    form.fd_scale = min_delta.min(1.0);
    Ok(Pushforward { form, lo, hi })
}

pub fn pushforward(vc: &VirtualClass, target: &Target, theta: &[Form], cfg: &PushConfig, part: &Partition) -> Result<Pushforward> {
    pushforward_nodes(&ClassNodes::of(vc)?, target, theta, cfg, &part.as_fn())
}

pub fn target_quad() -> QuadOptions {
    QuadOptions { abs_tol: 1e-10, rel_tol: 1e-10, initial_divisions: 8, max_depth: 30, max_cells: 400_000 }
}

/// `∫_A` of a top-degree form over a box.
pub fn integrate_top(form: &Form, lo: &[f64], hi: &[f64], opts: &QuadOptions) -> Result<f64> {
    if form.degree != form.dim {
        return Err(Error::DegreeMismatch(format!("form of degree {} is not top-degree on R^{}", form.degree, form.dim)));
    }
    if lo.iter().zip(hi).all(|(a, b)| a >= b) {
        return Ok(0.0);
    }
    let e = form.eval.clone();
    integrate_box(&|a: &[f64]| e(&[], a)[0], lo, hi, opts)
}

/// Both sides of `∫_[K] π*θ = ∫_A θ ∧ π_!(1)`.
pub fn adjunction(cls: &ClassNodes, target: &Target, theta_a: &Form, cfg: &PushConfig, dims: &[usize], r: &(dyn Fn(usize, usize, &[f64]) -> f64 + Sync)) -> Result<(f64, f64)> {
    if theta_a.dim != target.dim {
        return Err(Error::BadDim("θ must live on the target".into()));
    }
    let pulled: Vec<Form> = target.maps.iter().zip(dims).map(|(m, &n)| theta_a.pullback(n, m.clone())).collect::<Result<_>>()?;
    let lhs = integrate_nodes(cls, &pulled, r)?;
    let ones: Vec<Form> = dims.iter().map(|&n| Form::constant(n, 1.0)).collect();
    let pf = pushforward_nodes(cls, target, &ones, cfg, r)?;
    let top = theta_a.wedge(&pf.form)?;
    let rhs = integrate_top(&top, &pf.lo, &pf.hi, &target_quad())?;
    Ok((lhs, rhs))
}

/// `θ₁ × θ₂ = pr₁*θ₁ ∧ pr₂*θ₂` on the product of charts.
pub fn product_form(a: &Form, b: &Form) -> Result<Form> {
    let (da, db) = (a.dim, b.dim);
    let n = da + db;
    let p1: JacFn = Arc::new(move |x: &[f64]| (x[..da].to_vec(), (0..da).map(|i| (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()).collect()));
    let p2: JacFn = Arc::new(move |x: &[f64]| (x[da..].to_vec(), (0..db).map(|i| (0..n).map(|j| if j == da + i { 1.0 } else { 0.0 }).collect()).collect()));
    let (ea, eb) = (a.eval.clone(), b.eval.clone());
    // vertex coordinates are concatenated too; split them by each factor's own length
    let fa = Form { eval: Arc::new(move |v: &[f64], x: &[f64]| ea(v, x)), ..a.clone() };
    let fb = Form { eval: Arc::new(move |v: &[f64], x: &[f64]| eb(v, x)), ..b.clone() };
    fa.pullback(n, p1)?.wedge(&fb.pullback(n, p2)?)
}

/// Product partition `r₁ r₂` on product charts.
pub fn product_partition<'a>(
    ra: &'a (dyn Fn(usize, usize, &[f64]) -> f64 + Sync),
    rb: &'a (dyn Fn(usize, usize, &[f64]) -> f64 + Sync),
    dims_a: &'a [usize],
    charts_b: usize,
) -> impl Fn(usize, usize, &[f64]) -> f64 + Sync + 'a {
    move |j, _v, x| {
        let (ja, jb) = (j / charts_b, j % charts_b);
        let da = dims_a[ja];
        ra(ja, 0, &x[..da]) * rb(jb, 0, &x[da..])
    }
}

/// A connection `∇ = d + Σ_j A_j dx_j` on a trivial bundle of rank `rank` over `R^dim`.
#[derive(Clone)]
pub struct Connection {
    pub dim: usize,
    pub rank: usize,
    pub a: Arc<dyn Fn(&[f64]) -> Vec<DMatrix<C64>> + Send + Sync>,
}

impl Connection {
    pub fn trivial(dim: usize, rank: usize) -> Connection {
        Connection { dim, rank, a: Arc::new(move |_| vec![DMatrix::zeros(rank, rank); dim]) }
    }

    pub fn direct_sum(&self, other: &Connection) -> Result<Connection> {
        if self.dim != other.dim {
            return Err(Error::BadDim("direct sum of connections over different bases".into()));
        }
        let (a, b) = (self.a.clone(), other.a.clone());
        let (r1, r2) = (self.rank, other.rank);
        Ok(Connection {
            dim: self.dim,
            rank: r1 + r2,
            a: Arc::new(move |x| {
                a(x).into_iter()
                    .zip(b(x))
                    .map(|(p, q)| {
                        let mut m = DMatrix::zeros(r1 + r2, r1 + r2);
                        m.view_mut((0, 0), (r1, r1)).copy_from(&p);
                        m.view_mut((r1, r1), (r2, r2)).copy_from(&q);
                        m
                    })
                    .collect()
            }),
        })
    }

    /// `F_{ij} = ∂_i A_j − ∂_j A_i + [A_i, A_j]` for `i < j`, derivatives by central differences.
    pub fn curvature(&self, x: &[f64]) -> Vec<DMatrix<C64>> {
        let n = self.dim;
        let h = 1e-5;
        let mut da: Vec<Vec<DMatrix<C64>>> = Vec::with_capacity(n);
        let mut xp = x.to_vec();
        for i in 0..n {
            xp[i] = x[i] + h;
            let p = (self.a)(&xp);
            xp[i] = x[i] - h;
            let m = (self.a)(&xp);
            xp[i] = x[i];
            da.push(p.iter().zip(&m).map(|(u, v)| (u - v) / C64::new(2.0 * h, 0.0)).collect());
        }
        let a = (self.a)(x);
        ext::subsets(n, 2)
            .into_iter()
            .map(|ij| {
                let (i, j) = (ij[0], ij[1]);
                &da[i][j] - &da[j][i] + &a[i] * &a[j] - &a[j] * &a[i]
            })
            .collect()
    }
}

/// `c₁ = tr F / (2πi)`, checked unitary and closed at the samples.
pub fn chern_form(conn: &Connection, samples: &[Vec<f64>]) -> Result<Form> {
    for x in samples {
        for (j, a) in (conn.a)(x).iter().enumerate() {
            let skew = (a + a.adjoint()).norm();
            if skew > 1e-9 * (1.0 + a.norm()) {
                return Err(Error::NotUnitary(format!("A_{j} is not skew-Hermitian at {x:?}")));
            }
        }
    }
    let c = conn.clone();
    let n = conn.dim;
    let eval = Arc::new(move |_v: &[f64], x: &[f64]| c.curvature(x).iter().map(|f| (f.trace() / C64::new(0.0, 2.0 * PI)).re).collect());
    let mut form = Form::new(n, 2, eval)?;
    form.fd_scale = 100.0;
    if n > 2 {
        let d = form.d()?;
        for x in samples {
            let worst = d.at(&[], x).iter().map(|v| v.abs()).fold(0.0, f64::max);
            if worst > 1e-5 {
                return Err(Error::NonConverged(format!("Chern form is not closed at {x:?}: |dc| = {worst:e}")));
            }
        }
        form = form.with_deriv(Form::zero(n, 3));
    }
    form.flags.generated_by_functions = true;
    form.flags.in_omega = true;
    Ok(form)
}

/// `c₁^k`.
pub fn chern_power(c1: &Form, k: usize) -> Result<Form> {
    let mut out = Form::constant(c1.dim, 1.0);
    for _ in 0..k {
        out = out.wedge(c1)?;
    }
    Ok(out)
}

/// Distinct tropical vertices of all charts.
pub fn tropical_points(k: &Kcat) -> Vec<Vec<Q>> {
    let mut pts: Vec<Vec<Q>> = Vec::new();
    for c in &k.charts {
        for p in c.chart.strata() {
            if !pts.contains(p) {
                pts.push(p.clone());
            }
        }
    }
    pts.sort();
    pts
}

/// The class on `K⫽p`: charts rebuilt over tangent cones at `p`, the same perturbation
/// data on the stratum of `p`, zero sets recomputed. `None` when no chart has `p` as a
/// vertex (the completed tropical parts then have no vertices).
pub fn complete_vclass(vc: &VirtualClass, p: &[Q]) -> Result<Option<VirtualClass>> {
    let mut keep: Vec<(usize, usize)> = Vec::new();
    let mut charts: Vec<KChart> = Vec::new();
    for (j, c) in vc.k.charts.iter().enumerate() {
        if c.chart.m != p.len() {
            continue;
        }
        let Some(v) = c.chart.strata().iter().position(|s| s.as_slice() == p) else { continue };
        let completed = c.chart.tropical_complete(p)?;
        if completed.strata().len() != 1 {
            return Err(Error::Infeasible(format!("tangent cone at {} of chart {} is not pointed", p.iter().map(fmt_q).collect::<Vec<_>>().join(","), c.name)));
        }
        charts.push(KChart { chart: completed, ..c.clone() });
        keep.push((j, v));
    }
    if charts.is_empty() {
        return Ok(None);
    }
    let index = |j: usize| keep.iter().position(|(a, _)| *a == j);
    let transitions = vc.k.transitions.iter().filter_map(|t| Some(crate::kcat::Transition { a: index(t.a)?, b: index(t.b)?, ..t.clone() })).collect();
    let k = Arc::new(Kcat::new(charts, transitions, vc.k.base_dim, vc.k.opts.clone()));
    let cores: Vec<Vec<(usize, Vec<f64>, f64)>> = keep.iter().map(|(j, v)| vc.cut.cores[*j].iter().filter(|c| c.0 == *v).map(|(_, x, m)| (0, x.clone(), *m)).collect()).collect();
    let cut = Cutoffs { cores: Arc::new(cores) };
    let bumps: Vec<Bump> = vc
        .nu
        .bumps
        .iter()
        .filter_map(|b| {
            let nj = index(b.chart)?;
            (keep[nj].1 == b.vertex).then(|| Bump { chart: nj, vertex: 0, ..b.clone() })
        })
        .collect();
    let branching = keep.iter().map(|(j, _)| vc.nu.branching[*j]).collect();
    let nu = Perturbation { k: k.clone(), cut, bumps, branching, amplitude: vc.nu.amplitude, attempt: vc.nu.attempt };
    let mut opts = vc.opts.clone();
    opts.zero.surfaces = opts
        .zero
        .surfaces
        .iter()
        .filter_map(|s| {
            let nj = index(s.chart)?;
            (keep[nj].1 == s.vertex).then(|| crate::vclass::SurfaceParam { chart: nj, vertex: 0, ..s.clone() })
        })
        .collect();
    let metric = crate::kcat::MetricChoice { sigma: keep.iter().map(|(j, _)| vc.metric.sigma[*j]).collect(), ..vc.metric.clone() };
    Ok(Some(rebuild_with(Arc::new(nu), metric, &opts)?))
}

fn completed_forms(vc: &VirtualClass, theta: &[Form], p: &[Q]) -> Result<Vec<Form>> {
    let mut out = Vec::new();
    for (j, c) in vc.k.charts.iter().enumerate() {
        if c.chart.m != p.len() || !c.chart.strata().iter().any(|s| s.as_slice() == p) {
            continue;
        }
        out.push(complete_form(&theta[j], &c.chart, p)?.1);
    }
    Ok(out)
}

fn require_function_generated(vc: &VirtualClass, theta: &[Form]) -> Result<()> {
    for (j, (f, c)) in theta.iter().zip(&vc.k.charts).enumerate() {
        let samples = c.grid(&c.f, 4.0, 6);
        if !f.flags.generated_by_functions || !check_generated_by_functions(f, &c.chart, &samples) {
            return Err(Error::Rejected(format!("form on chart {j} is not generated by functions; tropical decomposition does not apply")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DecompositionReport {
    pub total: f64,
    pub parts: Vec<(String, f64)>,
    pub sum: f64,
}

impl DecompositionReport {
    pub fn to_json(&self) -> Value {
        json!({
            "total": self.total,
            "sum": self.sum,
            "parts": self.parts.iter().map(|(p, v)| json!({"p": p, "integral": v})).collect::<Vec<_>>(),
        })
    }
}

fn point_label(p: &[Q]) -> String {
    format!("({})", p.iter().map(fmt_q).collect::<Vec<_>>().join(", "))
}

/// `∫_[K]θ` against `Σ_p ∫_[K⫽p] θ⫽p` over the tropical vertices and the extra points.
pub fn check_decomposition(vc: &VirtualClass, theta: &[Form], shape: PartitionShape, extra_points: &[Vec<Q>]) -> Result<DecompositionReport> {
    require_function_generated(vc, theta)?;
    let part = Partition::new(vc.k.clone(), vc.cut.clone(), vc.eps, shape)?;
    let total = integrate_vclass(vc, theta, &part)?;
    let mut pts = tropical_points(&vc.k);
    for p in extra_points {
        if !pts.contains(p) {
            pts.push(p.clone());
        }
    }
    let mut parts = Vec::new();
    for p in &pts {
        let v = match complete_vclass(vc, p)? {
            None => 0.0,
            Some(sub) => {
                let forms = completed_forms(vc, theta, p)?;
                let sp = Partition::new(sub.k.clone(), sub.cut.clone(), vc.eps, shape)?;
                integrate_vclass(&sub, &forms, &sp)?
            }
        };
        parts.push((point_label(p), v));
    }
    let sum = parts.iter().map(|(_, v)| v).sum();
    Ok(DecompositionReport { total, parts, sum })
}

/// Largest difference between `π_!θ` and `Σ_p (π⫽p)_!(θ⫽p)` at the sample points.
pub fn check_pushforward_decomposition(vc: &VirtualClass, target: &Target, theta: &[Form], cfg: &PushConfig, shape: PartitionShape, samples: &[Vec<f64>]) -> Result<f64> {
    require_function_generated(vc, theta)?;
    let part = Partition::new(vc.k.clone(), vc.cut.clone(), vc.eps, shape)?;
    let whole = pushforward(vc, target, theta, cfg, &part)?;
    let mut pieces = Vec::new();
    for p in tropical_points(&vc.k) {
        if let Some(sub) = complete_vclass(vc, &p)? {
            let forms = completed_forms(vc, theta, &p)?;
            let maps: Vec<JacFn> =
                vc.k.charts.iter().enumerate().filter(|(_, c)| c.chart.strata().iter().any(|s| s.as_slice() == p.as_slice())).map(|(j, _)| target.maps[j].clone()).collect();
            let sp = Partition::new(sub.k.clone(), sub.cut.clone(), vc.eps, shape)?;
            pieces.push(pushforward(&sub, &Target { dim: target.dim, maps }, &forms, cfg, &sp)?);
        }
    }
    let mut worst = 0.0f64;
    for a in samples {
        let w = whole.at(a);
        let mut s = vec![0.0; w.len()];
        for pc in &pieces {
            for (x, y) in s.iter_mut().zip(pc.at(a)) {
                *x += y;
            }
        }
        worst = worst.max(w.iter().zip(&s).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    Ok(worst)
}
