//! Transverse perturbations of ∂̄, their oriented zero sets, and the virtual class.
//!
//! A perturbation is a finite sum of bumps `β(x) = (1 − |x−c|²/R²)^4 · σ` with
//! constant coefficient vectors `σ`, averaged over the chart group and transported
//! to every related chart. On a branching chart the branches are the group translates
//! of the unaveraged bumps inside `{ρ > 1/2}`, collared back to the average outside.

use crate::branched::{collar, BranchSpace};
use crate::charts::{dist, JacFn, Region};
use crate::error::{Error, Result};
use crate::ext;
use crate::kcat::{newton_min_norm, Cutoffs, Kcat, MetricChoice, SecVal};
use crate::quad::gauss_legendre;
use crate::tropical::{fmt_q, q_frac, Q};
use nalgebra::{DMatrix, DVector};
use num::One;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct Bump {
    pub chart: usize,
    pub vertex: usize,
    pub center: Vec<f64>,
    pub radius: f64,
    pub coef: Vec<C64>,
}

impl Bump {
    pub fn profile(&self, x: &[f64]) -> f64 {
        let s = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (self.radius * self.radius);
        if s >= 1.0 {
            0.0
        } else {
            (1.0 - s).powi(4)
        }
    }
}

/// `ν = ∂̄ + p` on every chart; `branch` selects a group element on branching charts.
#[derive(Clone)]
pub struct Perturbation {
    pub k: Arc<Kcat>,
    pub cut: Cutoffs,
    pub bumps: Vec<Bump>,
    pub branching: Vec<bool>,
    pub amplitude: f64,
    pub attempt: usize,
}

impl std::fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Perturbation({} bumps, attempt {}, amplitude {:e})", self.bumps.len(), self.attempt, self.amplitude)
    }
}

fn add_into(acc: &mut [C64], v: &[C64], s: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b * s;
    }
}

fn mat_vec(m: &DMatrix<C64>, v: &[C64]) -> Vec<C64> {
    (m * DVector::from_column_slice(v)).as_slice().to_vec()
}

impl Perturbation {
    pub fn zero(k: Arc<Kcat>, cut: Cutoffs) -> Perturbation {
        let n = k.charts.len();
        Perturbation { k, cut, bumps: vec![], branching: vec![false; n], amplitude: 0.0, attempt: 0 }
    }

    pub fn is_zero(&self) -> bool {
        self.bumps.is_empty()
    }

    fn has_bumps(&self, a: usize) -> bool {
        self.bumps.iter().any(|b| b.chart == a)
    }

    /// Unaveraged bump sum on chart `a`.
    pub fn raw(&self, a: usize, v: usize, x: &[f64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.k.charts[a].rank];
        for b in self.bumps.iter().filter(|b| b.chart == a && b.vertex == v) {
            let w = b.profile(x);
            if w > 0.0 {
                add_into(&mut out, &b.coef, w);
            }
        }
        out
    }

    /// `(1/|G|) Σ_h A(h)·raw(h⁻¹x)`, equivariant.
    pub fn averaged(&self, a: usize, v: usize, x: &[f64]) -> Vec<C64> {
        let c = &self.k.charts[a];
        let n = c.group.order();
        let mut out = vec![C64::new(0.0, 0.0); c.rank];
        for h in 0..n {
            let r = self.raw(a, v, &c.act(c.group.inv(h), x));
            if r.iter().any(|z| *z != C64::new(0.0, 0.0)) {
                add_into(&mut out, &mat_vec(&c.group.elements[h].v_act, &r), 1.0 / n as f64);
            }
        }
        out
    }

    /// Sum over charts with bumps of the mean transport `T_m · averaged(x_m)`.
    fn transported(&self, j: usize, v: usize, y: &[f64], skip_self: bool) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.k.charts[j].rank];
        for a in 0..self.k.charts.len() {
            if !self.has_bumps(a) || (skip_self && a == j) {
                continue;
            }
            if a == j {
                add_into(&mut out, &self.averaged(j, v, y), 1.0);
                continue;
            }
            let ms = self.k.morphisms_from(a, j, y, false);
            if ms.is_empty() {
                continue;
            }
            let w = 1.0 / ms.len() as f64;
            for m in &ms {
                add_into(&mut out, &mat_vec(&m.t, &self.averaged(a, v, &m.x)), w);
            }
        }
        out
    }

    /// The perturbation `p` on branch `branch` of chart `j`.
    pub fn value(&self, j: usize, branch: usize, v: usize, y: &[f64]) -> Vec<C64> {
        if self.bumps.is_empty() {
            return vec![C64::new(0.0, 0.0); self.k.charts[j].rank];
        }
        if !self.branching[j] {
            return self.transported(j, v, y, false);
        }
        let mut out = self.transported(j, v, y, true);
        let c = &self.k.charts[j];
        let n = c.group.order();
        let vals: Vec<Vec<C64>> = (0..n).map(|h| mat_vec(&c.group.elements[h].v_act, &self.raw(j, v, &c.act(c.group.inv(h), y)))).collect();
        let mut avg = vec![C64::new(0.0, 0.0); c.rank];
        for val in &vals {
            add_into(&mut avg, val, 1.0 / n as f64);
        }
        let kap = collar(&self.cut, j, v, y);
        for (i, o) in out.iter_mut().enumerate() {
            *o += avg[i] * (1.0 - kap) + vals[branch][i] * kap;
        }
        out
    }

    /// `ν = ∂̄ + p` with its Jacobian; the perturbation part is differentiated by
    /// central differences.
    pub fn nu(&self, j: usize, branch: usize, v: usize, y: &[f64]) -> SecVal {
        let c = &self.k.charts[j];
        let mut s = c.dbar_at(v, y);
        if self.bumps.is_empty() {
            return s;
        }
        let p = self.value(j, branch, v, y);
        add_into(&mut s.v, &p, 1.0);
        let mut yp = y.to_vec();
        for col in 0..y.len() {
            let h = 1e-6 * (1.0 + y[col].abs());
            yp[col] = y[col] + h;
            let a = self.value(j, branch, v, &yp);
            yp[col] = y[col] - h;
            let b = self.value(j, branch, v, &yp);
            yp[col] = y[col];
            for (i, row) in s.jac.iter_mut().enumerate() {
                row[col] += (a[i] - b[i]) / (2.0 * h);
            }
        }
        s
    }

    pub fn to_json(&self) -> Value {
        json!({
            "attempt": self.attempt,
            "amplitude": self.amplitude,
            "branching": self.branching,
            "bumps": self.bumps.iter().map(|b| json!({
                "chart": b.chart,
                "vertex": b.vertex,
                "center": b.center,
                "radius": b.radius,
                "coef": b.coef.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// A quadrature node on a zero set: the form is evaluated on `frame` and weighted by `w`
/// (orientation signs are folded into `w`).
#[derive(Clone, Debug)]
pub struct QNode {
    pub x: Vec<f64>,
    pub frame: Vec<Vec<f64>>,
    pub w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PieceKind {
    Point,
    Arc,
    Loop,
    Surface,
}

impl PieceKind {
    fn name(self) -> &'static str {
        match self {
            PieceKind::Point => "point",
            PieceKind::Arc => "arc",
            PieceKind::Loop => "loop",
            PieceKind::Surface => "surface",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Piece {
    pub kind: PieceKind,
    pub nodes: Vec<QNode>,
}

/// Oriented zero set of ν on one chart, vertex and branch.
#[derive(Clone, Debug)]
pub struct ZeroSet {
    pub chart: usize,
    pub vertex: usize,
    pub branch: usize,
    pub dim: usize,
    pub pieces: Vec<Piece>,
}

impl ZeroSet {
    pub fn nodes(&self) -> impl Iterator<Item = &QNode> {
        self.pieces.iter().flat_map(|p| p.nodes.iter())
    }

    /// Signed count of points (dimension 0 only).
    pub fn signed_count(&self) -> f64 {
        self.nodes().map(|n| n.w).sum()
    }

    pub fn to_json(&self) -> Value {
        let pieces: Vec<Value> = self
            .pieces
            .iter()
            .map(|p| match p.kind {
                PieceKind::Point => json!({"kind": "point", "x": p.nodes[0].x, "sign": p.nodes[0].w}),
                _ => json!({
                    "kind": p.kind.name(),
                    "nodes": p.nodes.len(),
                    "measure": p.nodes.iter().map(|n| n.w.abs() * frame_volume(&n.frame)).sum::<f64>(),
                    "start": p.nodes[0].x,
                }),
            })
            .collect();
        json!({"chart": self.chart, "vertex": self.vertex, "branch": self.branch, "dim": self.dim, "pieces": pieces})
    }
}

fn frame_volume(frame: &[Vec<f64>]) -> f64 {
    let k = frame.len();
    let gram: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| frame[i].iter().zip(&frame[j]).map(|(a, b)| a * b).sum()).collect()).collect();
    ext::det(gram).max(0.0).sqrt()
}

/// A supplied parametrization of a 2-dimensional zero set, on `[lo, hi]` in `(s, t)`.
#[derive(Clone)]
pub struct SurfaceParam {
    pub chart: usize,
    pub vertex: usize,
    pub map: JacFn,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub periodic: bool,
    pub samples: usize,
}

impl std::fmt::Debug for SurfaceParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SurfaceParam(chart {}, {:?}..{:?}, periodic {})", self.chart, self.lo, self.hi, self.periodic)
    }
}

pub type ExtraCondition = Arc<dyn Fn(usize, usize, &[f64]) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct ZeroOptions {
    /// Grid density for seeds.
    pub per_unit: f64,
    pub max_per_axis: usize,
    /// Arc-length step for curves.
    pub curve_step: f64,
    pub max_curve_steps: usize,
    /// Minimal singular value of Dν on the zero set.
    pub tau: f64,
    pub surfaces: Vec<SurfaceParam>,
}

impl Default for ZeroOptions {
    fn default() -> Self {
        ZeroOptions { per_unit: 17.0, max_per_axis: 48, curve_step: 0.01, max_curve_steps: 400_000, tau: 0.0, surfaces: vec![] }
    }
}

fn grid_spacing(region: &Region, n: usize, m: usize, per_unit: f64, max_per_axis: usize) -> f64 {
    let (lo, hi) = region.bbox(n, m);
    lo.iter().zip(&hi).map(|(a, b)| (b - a) / ((b - a) * per_unit).ceil().clamp(2.0, max_per_axis as f64)).fold(0.0, f64::max)
}

fn sigma_min(s: &SecVal) -> f64 {
    let j = s.real_jacobian();
    if j.nrows() == 0 {
        return f64::INFINITY;
    }
    let sv = j.singular_values();
    sv.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Zeros of `f` reached by Newton from the grid points of `region` where `|f|` is
/// small relative to the local slope.
fn newton_seeds(f: &dyn Fn(&[f64]) -> SecVal, pts: &[Vec<f64>], h: f64, region: &Region) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for x0 in pts {
        let s = f(x0);
        let j = s.real_jacobian();
        let reach = h * (x0.len() as f64).sqrt();
        if s.norm() > 2.0 * j.norm() * reach + 1e-12 {
            continue;
        }
        // the norm test is loose when ν splits into blocks; the linearized step is not
        if j.nrows() > 0 {
            let rhs = DVector::from_iterator(2 * s.v.len(), s.v.iter().flat_map(|c| [c.re, c.im]));
            if let Ok(jp) = j.pseudo_inverse(1e-12) {
                let step = (jp * rhs).norm();
                if step.is_finite() && step > 3.0 * reach {
                    continue;
                }
            }
        }
        if let Some(x) = newton_min_norm(f, x0, 60) {
            if region.contains(&x) {
                out.push(x);
            }
        }
    }
    out
}

/// Unit tangent of a transversely cut out curve: the cofactor vector
/// `c_i = (−1)^i det J_{−i}`, which makes `(c, Dν-preimage of the complex frame)`
/// positively oriented.
fn curve_tangent(s: &SecVal, orient: f64) -> Option<Vec<f64>> {
    let j = s.real_jacobian();
    let (r, n) = (j.nrows(), j.ncols());
    let mut c = vec![0.0; n];
    for (i, ci) in c.iter_mut().enumerate() {
        let minor: Vec<Vec<f64>> = (0..r).map(|row| (0..n).filter(|&col| col != i).map(|col| j[(row, col)]).collect()).collect();
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        *ci = sign * ext::det(minor);
    }
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-14) {
        return None;
    }
    Some(c.into_iter().map(|v| orient * v / norm).collect())
}

struct Tracer<'a> {
    f: &'a dyn Fn(&[f64]) -> SecVal,
    orient: f64,
    inside: &'a dyn Fn(&[f64]) -> bool,
}

impl Tracer<'_> {
    fn tangent(&self, x: &[f64]) -> Result<Vec<f64>> {
        curve_tangent(&(self.f)(x), self.orient).ok_or_else(|| Error::RefinementFailed(format!("zero curve is singular near {x:?}")))
    }

    fn rk4(&self, x: &[f64], h: f64) -> Result<Vec<f64>> {
        let ax = |a: &[f64], k: &[f64], s: f64| a.iter().zip(k).map(|(p, q)| p + s * q).collect::<Vec<f64>>();
        let k1 = self.tangent(x)?;
        let k2 = self.tangent(&ax(x, &k1, h / 2.0))?;
        let k3 = self.tangent(&ax(x, &k2, h / 2.0))?;
        let k4 = self.tangent(&ax(x, &k3, h))?;
        let y: Vec<f64> = (0..x.len()).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
        newton_min_norm(self.f, &y, 30).ok_or_else(|| Error::RefinementFailed(format!("projection onto the zero curve failed near {y:?}")))
    }

    /// Steps from `x0` with step `h` until leaving the region, closing up, or the cap.
    fn walk(&self, x0: &[f64], h: f64, cap: usize) -> Result<(Vec<Vec<f64>>, Option<f64>)> {
        let t0 = self.tangent(x0)?;
        let along = |x: &[f64]| x.iter().zip(x0).zip(&t0).map(|((a, b), t)| (a - b) * t).sum::<f64>();
        let mut pts = vec![x0.to_vec()];
        let mut prev_s = 0.0;
        let mut left = false;
        for step in 1..=cap {
            let last = pts.last().unwrap().clone();
            let x = self.rk4(&last, h)?;
            if !(self.inside)(&x) {
                return Ok((pts, None));
            }
            let s = along(&x) * h.signum();
            if s < -0.5 * h.abs() {
                left = true;
            }
            if left && step > 3 && prev_s < 0.0 && s >= 0.0 && dist(&x, x0) < 2.0 * h.abs() {
                // closed: find the partial step landing on the hyperplane through x0
                let g = |sig: f64| -> Result<f64> { Ok(along(&self.rk4(&last, sig)?) * h.signum()) };
                let (mut a, mut ga, mut b, mut gb) = (0.0, prev_s, h, s);
                for _ in 0..30 {
                    if (gb - ga).abs() < 1e-300 {
                        break;
                    }
                    let c = b - gb * (b - a) / (gb - ga);
                    let gc = g(c)?;
                    a = b;
                    ga = gb;
                    b = c;
                    gb = gc;
                    if gc.abs() < 1e-14 {
                        break;
                    }
                }
                let length = (pts.len() - 1) as f64 * h.abs() + b.abs();
                return Ok((pts, Some(length)));
            }
            prev_s = s;
            pts.push(x);
        }
        Err(Error::RefinementFailed(format!("zero curve through {x0:?} exceeded {cap} steps")))
    }

    fn piece(&self, pts: Vec<Vec<f64>>, weights: Vec<f64>, kind: PieceKind) -> Result<Piece> {
        let mut nodes = Vec::with_capacity(pts.len());
        for (x, w) in pts.into_iter().zip(weights) {
            let t = self.tangent(&x)?;
            nodes.push(QNode { x, frame: vec![t], w });
        }
        Ok(Piece { kind, nodes })
    }

    fn trace(&self, x0: &[f64], h: f64, cap: usize) -> Result<Piece> {
        let (fwd, closed) = self.walk(x0, h, cap)?;
        if let Some(length) = closed {
            let m = (length / h).ceil().max(8.0) as usize;
            let hh = length / m as f64;
            let mut pts = vec![x0.to_vec()];
            for _ in 1..m {
                let x = self.rk4(pts.last().unwrap(), hh)?;
                pts.push(x);
            }
            return self.piece(pts, vec![hh; m], PieceKind::Loop);
        }
        let (bwd, _) = self.walk(x0, -h, cap)?;
        let mut pts: Vec<Vec<f64>> = bwd.into_iter().skip(1).rev().collect();
        pts.extend(fwd);
        let n = pts.len();
        let mut w = vec![h; n];
        w[0] = h / 2.0;
        w[n - 1] = h / 2.0;
        self.piece(pts, w, PieceKind::Arc)
    }
}

/// Oriented zero set of `f` on `region` (chart coordinates with `n` smooth and `m`
/// tropical directions), for a bundle of complex rank `rank`.
#[allow(clippy::too_many_arguments)]
pub fn zero_set(
    f: &dyn Fn(&[f64]) -> SecVal,
    n: usize,
    m: usize,
    rank: usize,
    orientation: i8,
    region: &Region,
    inside: &dyn Fn(&[f64]) -> bool,
    surface: Option<&SurfaceParam>,
    opts: &ZeroOptions,
) -> Result<(usize, Vec<Piece>)> {
    let dim = n + 2 * m;
    if dim < 2 * rank {
        let pts = region.grid(n, m, opts.per_unit, opts.max_per_axis);
        let h = grid_spacing(region, n, m, opts.per_unit, opts.max_per_axis);
        if let Some(x) = newton_seeds(f, &pts, h, region).into_iter().find(|x| inside(x)) {
            return Err(Error::NotTransverse(format!("ν vanishes at {x:?} though the expected dimension is negative")));
        }
        return Ok((0, vec![]));
    }
    let k = dim - 2 * rank;
    let orient = orientation as f64;
    let pts = region.grid(n, m, opts.per_unit, opts.max_per_axis);
    let h = grid_spacing(region, n, m, opts.per_unit, opts.max_per_axis);
    let check = |x: &[f64]| -> Result<()> {
        let s = f(x);
        let sm = sigma_min(&s);
        if sm < opts.tau {
            return Err(Error::NotTransverse(format!("smallest singular value {sm:e} below {:e} at {x:?}", opts.tau)));
        }
        Ok(())
    };
    match k {
        0 => {
            let mut found: Vec<Vec<f64>> = Vec::new();
            for x in newton_seeds(f, &pts, h, region) {
                if inside(&x) && !found.iter().any(|p| dist(p, &x) < 1e-6) {
                    found.push(x);
                }
            }
            found.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let mut pieces = Vec::with_capacity(found.len());
            for x in found {
                check(&x)?;
                let d = f(&x).real_jacobian().determinant();
                pieces.push(Piece { kind: PieceKind::Point, nodes: vec![QNode { x, frame: vec![], w: orient * d.signum() }] });
            }
            Ok((0, pieces))
        }
        1 => {
            let tracer = Tracer { f, orient, inside };
            let step = opts.curve_step;
            let mut pieces: Vec<Piece> = Vec::new();
            for x in newton_seeds(f, &pts, h, region) {
                if !inside(&x) {
                    continue;
                }
                let near = pieces.iter().flat_map(|p| p.nodes.iter()).any(|q| dist(&q.x, &x) < 2.0 * step);
                if near {
                    continue;
                }
                check(&x)?;
                let p = tracer.trace(&x, step, opts.max_curve_steps)?;
                for q in &p.nodes {
                    check(&q.x)?;
                }
                pieces.push(p);
            }
            Ok((1, pieces))
        }
        2 => {
            let Some(sp) = surface else {
                return Err(Error::DimUnsupported("2-dimensional zero sets need a supplied parametrization".into()));
            };
            let piece = surface_piece(f, orient, sp)?;
            for q in &piece.nodes {
                check(&q.x)?;
            }
            // every zero found from the grid must lie on the parametrized surface
            let spacing = surface_spacing(&piece);
            for x in newton_seeds(f, &pts, h, region).into_iter().filter(|x| inside(x)) {
                let near = piece.nodes.iter().map(|q| dist(&q.x, &x)).fold(f64::INFINITY, f64::min);
                if near > 2.0 * spacing {
                    return Err(Error::RefinementFailed(format!("zero at {x:?} is not covered by the supplied parametrization")));
                }
            }
            Ok((2, vec![piece]))
        }
        _ => Err(Error::DimUnsupported(format!("zero sets of dimension {k} are not supported"))),
    }
}

fn surface_spacing(p: &Piece) -> f64 {
    p.nodes.iter().map(|q| q.frame.iter().map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt()).fold(0.0, f64::max) * q.w.abs().sqrt()).fold(0.0, f64::max)
}

fn surface_piece(f: &dyn Fn(&[f64]) -> SecVal, orient: f64, sp: &SurfaceParam) -> Result<Piece> {
    let rule: Vec<(f64, f64)> = if sp.periodic {
        (0..sp.samples).map(|i| (i as f64 / sp.samples as f64, 1.0 / sp.samples as f64)).collect()
    } else {
        let (x, w) = gauss_legendre(sp.samples);
        x.into_iter().zip(w).map(|(a, b)| ((a + 1.0) / 2.0, b / 2.0)).collect()
    };
    let (ls, lt) = (sp.hi[0] - sp.lo[0], sp.hi[1] - sp.lo[1]);
    let mut nodes = Vec::with_capacity(rule.len() * rule.len());
    let mut sign = 0.0;
    for &(a, wa) in &rule {
        for &(b, wb) in &rule {
            let st = [sp.lo[0] + a * ls, sp.lo[1] + b * lt];
            let (x, jac) = (sp.map)(&st);
            let s = f(&x);
            if s.norm() > 1e-8 {
                return Err(Error::RefinementFailed(format!("supplied parametrization misses the zero set by {:e} at {st:?}", s.norm())));
            }
            let ds: Vec<f64> = jac.iter().map(|r| r[0]).collect();
            let dt: Vec<f64> = jac.iter().map(|r| r[1]).collect();
            let j = s.real_jacobian();
            let Some(w) = j.clone().pseudo_inverse(1e-12).ok() else {
                return Err(Error::RefinementFailed("singular differential on the surface".into()));
            };
            let n = x.len();
            let mut cols = vec![ds.clone(), dt.clone()];
            for c in 0..w.ncols() {
                cols.push((0..n).map(|r| w[(r, c)]).collect());
            }
            let rows: Vec<Vec<f64>> = (0..n).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
            let sg = orient * ext::det(rows).signum();
            if sign != 0.0 && sg != sign {
                return Err(Error::RefinementFailed("supplied parametrization does not preserve orientation".into()));
            }
            sign = sg;
            nodes.push(QNode { x, frame: vec![ds, dt], w: sg * wa * wb * ls * lt });
        }
    }
    Ok(Piece { kind: PieceKind::Surface, nodes })
}

#[derive(Clone)]
pub struct BuildOptions {
    pub seed: u64,
    /// Inner cutoff level: the class lives on `K_ε = {ρ > ε}`.
    pub eps: f64,
    pub max_attempts: usize,
    /// Skip the unperturbed attempt.
    pub force_perturbation: bool,
    /// Use branched perturbations on every chart with a nontrivial group.
    pub force_branching: bool,
    pub bumps_per_chart: usize,
    pub zero: ZeroOptions,
    pub extra: Vec<ExtraCondition>,
}

impl std::fmt::Debug for BuildOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BuildOptions(seed {}, ε {}, {} attempts)", self.seed, self.eps, self.max_attempts)
    }
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { seed: 0, eps: 0.1, max_attempts: 64, force_perturbation: false, force_branching: false, bumps_per_chart: 3, zero: ZeroOptions::default(), extra: vec![] }
    }
}

/// Zero sets of one chart: one per branch.
#[derive(Clone, Debug)]
pub struct ChartClass {
    pub branching: bool,
    pub branches: Vec<Vec<ZeroSet>>,
}

/// The weighted branched family of oriented zero sets.
#[derive(Clone, Debug)]
pub struct VirtualClass {
    pub k: Arc<Kcat>,
    pub cut: Cutoffs,
    pub metric: MetricChoice,
    pub nu: Arc<Perturbation>,
    pub eps: f64,
    pub seed: u64,
    pub dim: isize,
    pub charts: Vec<ChartClass>,
    pub opts: BuildOptions,
}

impl VirtualClass {
    /// Weight of each branch of chart `j`.
    pub fn branch_weight(&self, j: usize) -> Q {
        if self.charts[j].branching {
            q_frac(1, self.k.charts[j].group.order() as i64)
        } else {
            Q::one()
        }
    }

    /// Global branch space: the product over branching charts.
    pub fn branch_space(&self) -> BranchSpace {
        let mut b = BranchSpace::singleton();
        for (j, c) in self.charts.iter().enumerate() {
            if c.branching {
                b = b.product(&BranchSpace::uniform(self.k.charts[j].group.order(), true));
            }
        }
        b
    }

    /// `(chart, μ, zero set)` for every chart branch and vertex.
    pub fn weighted(&self) -> Vec<(usize, f64, &ZeroSet)> {
        let mut out = Vec::new();
        for (j, c) in self.charts.iter().enumerate() {
            let mu = if c.branching { 1.0 / self.k.charts[j].group.order() as f64 } else { 1.0 };
            for br in &c.branches {
                for z in br {
                    out.push((j, mu, z));
                }
            }
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.weighted().iter().map(|(_, _, z)| z.nodes().count()).sum()
    }

    pub fn to_json(&self) -> Value {
        let charts: Vec<Value> = self
            .charts
            .iter()
            .enumerate()
            .map(|(j, c)| {
                json!({
                    "chart": self.k.charts[j].name,
                    "branching": c.branching,
                    "mu": fmt_q(&self.branch_weight(j)),
                    "branches": c.branches.iter().map(|b| b.iter().map(|z| z.to_json()).collect::<Vec<_>>()).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "dim": self.dim,
            "eps": self.eps,
            "seed": self.seed,
            "perturbation": self.nu.to_json(),
            "branch_space": self.branch_space().to_json(),
            "charts": charts,
        })
    }
}

/// Largest `‖Dν‖` on the F grid of a chart, the scale for the transversality threshold.
fn lipschitz_scale(k: &Kcat, j: usize) -> f64 {
    let c = &k.charts[j];
    let mut s = 0.0f64;
    for v in 0..c.n_vertices() {
        for x in c.grid(&c.f, k.opts.grid, k.opts.max_per_axis) {
            s = s.max(c.dbar_at(v, &x).real_jacobian().norm());
        }
    }
    s.max(1e-12)
}

fn derived_rng(seed: u64, attempt: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (attempt as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Shrinks the bump until every other chart relates to all of its support or none of
/// it, so the transported bump stays smooth; `None` if that never happens.
fn clean_radius(k: &Kcat, a: usize, center: &[f64], mut radius: f64) -> Option<f64> {
    let ca = &k.charts[a];
    let others: Vec<usize> = (0..k.charts.len()).filter(|&b| b != a && k.transitions.iter().any(|t| (t.a == a && t.b == b) || (t.a == b && t.b == a))).collect();
    if others.is_empty() {
        return Some(radius);
    }
    for _ in 0..6 {
        let ball = Region::ball(center.to_vec(), radius);
        let per_unit = 10.0 / radius;
        let mut pts = ball.grid(ca.chart.n, ca.chart.m, per_unit, 12);
        pts.push(center.to_vec());
        let counts = |x: &[f64]| others.iter().map(|&b| k.morphisms_from(b, a, x, false).len()).collect::<Vec<_>>();
        let c0 = counts(center);
        if pts.iter().all(|x| counts(x) == c0) {
            return Some(radius);
        }
        radius /= 2.0;
    }
    None
}

fn random_perturbation(k: &Arc<Kcat>, cut: &Cutoffs, metric: &MetricChoice, opts: &BuildOptions, attempt: usize, branching: bool) -> Perturbation {
    let mut rng = derived_rng(opts.seed, attempt);
    let amplitude = metric.euclidean_bound() / 2f64.powi(1 + ((attempt - 1) % 4) as i32);
    let mut bumps = Vec::new();
    for (a, c) in k.charts.iter().enumerate() {
        let cores = &cut.cores[a];
        if cores.is_empty() {
            continue;
        }
        for _ in 0..opts.bumps_per_chart {
            let (v, core, margin) = cores[rng.gen_range(0..cores.len())].clone();
            let mut center = core.clone();
            for _ in 0..8 {
                let dir: Vec<f64> = (0..core.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let cand: Vec<f64> = core.iter().zip(&dir).map(|(p, d)| p + 0.18 * margin * d / (core.len() as f64).sqrt()).collect();
                if c.fs.contains(&cand) {
                    center = cand;
                    break;
                }
            }
            let radius = margin.min(0.9 * c.fs.depth(&center));
            let Some(radius) = clean_radius(k, a, &center, radius) else { continue };
            let mut coef: Vec<C64> = (0..c.rank).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let norm = coef.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(1e-12);
            for z in coef.iter_mut() {
                *z *= amplitude / (opts.bumps_per_chart as f64 * norm);
            }
            bumps.push(Bump { chart: a, vertex: v, center, radius, coef });
        }
    }
    let branching = k.charts.iter().enumerate().map(|(j, c)| branching && !c.group.is_trivial() && !cut.cores[j].is_empty()).collect();
    Perturbation { k: k.clone(), cut: cut.clone(), bumps, branching, amplitude, attempt }
}

/// Branching is only supported where no other chart reaches `{ρ_j ≥ 1/2}`.
fn check_branching_isolated(k: &Kcat, cut: &Cutoffs, j: usize) -> Result<()> {
    let c = &k.charts[j];
    for v in 0..c.n_vertices() {
        for y in c.grid(&c.fs, k.opts.grid, k.opts.max_per_axis) {
            if cut.rho(j, v, &y) < 0.5 {
                continue;
            }
            if (0..k.charts.len()).any(|b| b != j && !k.morphisms_from(b, j, &y, false).is_empty()) {
                return Err(Error::DimUnsupported(format!("branched perturbation on chart {} overlaps another chart inside its core", c.name)));
            }
        }
    }
    Ok(())
}

/// Samples `|p|_h < 1` on the F grids.
fn check_small(nu: &Perturbation, metric: &MetricChoice) -> Result<()> {
    let k = &nu.k;
    for (j, c) in k.charts.iter().enumerate() {
        let nb = if nu.branching[j] { c.group.order() } else { 1 };
        for v in 0..c.n_vertices() {
            for y in c.grid(&c.f, k.opts.grid / 2.0, k.opts.max_per_axis / 2) {
                for b in 0..nb {
                    let p = nu.value(j, b, v, &y);
                    if metric.norm(j, &p) >= 1.0 {
                        return Err(Error::NotTransverse(format!("perturbation exceeds the metric bound on chart {} at {y:?}", c.name)));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Samples `ν_b(y) = T·ν_a(x)` over morphisms on the F grids.
fn check_compatible(nu: &Perturbation) -> Result<()> {
    let k = &nu.k;
    for (j, c) in k.charts.iter().enumerate() {
        if nu.branching[j] {
            continue;
        }
        for v in 0..c.n_vertices() {
            for y in c.grid(&c.f, k.opts.grid / 2.0, k.opts.max_per_axis / 2) {
                let here = nu.nu(j, 0, v, &y).v;
                let scale = 1.0 + here.iter().map(|z| z.norm()).fold(0.0, f64::max);
                for a in 0..k.charts.len() {
                    if nu.branching[a] {
                        continue;
                    }
                    for m in k.morphisms_from(a, j, &y, false) {
                        let there = mat_vec(&m.t, &nu.nu(a, 0, v, &m.x).v);
                        if crate::kcat::vec_dist(&there, &here) > 1e-8 * scale {
                            return Err(Error::AxiomViolation { step: 0, chart: j, detail: format!("ν is not compatible with chart {} at {y:?}", k.charts[a].name) });
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn try_build(nu: Arc<Perturbation>, metric: &MetricChoice, opts: &BuildOptions, lips: &[f64]) -> Result<Vec<ChartClass>> {
    let k = nu.k.clone();
    let cut = nu.cut.clone();
    if !nu.is_zero() {
        check_small(&nu, metric)?;
        check_compatible(&nu)?;
    }
    let mut out = Vec::with_capacity(k.charts.len());
    for (j, c) in k.charts.iter().enumerate() {
        let nb = if nu.branching[j] { c.group.order() } else { 1 };
        let mut branches = Vec::with_capacity(nb);
        for b in 0..nb {
            let mut sets = Vec::new();
            for v in 0..c.n_vertices() {
                if cut.cores[j].iter().all(|(w, _, _)| *w != v) {
                    sets.push(ZeroSet { chart: j, vertex: v, branch: b, dim: c.virtual_dim().max(0) as usize, pieces: vec![] });
                    continue;
                }
                let (nu2, cut2) = (nu.clone(), cut.clone());
                let f = move |x: &[f64]| nu2.nu(j, b, v, x);
                let eps = opts.eps;
                let fs = c.fs.clone();
                let inside = move |x: &[f64]| fs.contains(x) && cut2.rho(j, v, x) > eps / 2.0;
                let zo = ZeroOptions { tau: k.opts.tau_rel * lips[j], per_unit: k.opts.grid, max_per_axis: k.opts.max_per_axis, ..opts.zero.clone() };
                let surface = opts.zero.surfaces.iter().find(|s| s.chart == j && s.vertex == v);
                let (dim, pieces) = zero_set(&f, c.chart.n, c.chart.m, c.rank, c.chart.orientation, &c.fs, &inside, surface, &zo)?;
                for q in pieces.iter().flat_map(|p| p.nodes.iter()) {
                    if k.max_rho(&cut, j, v, &q.x) <= 0.5 {
                        return Err(Error::NotTransverse(format!("zero of ν at {:?} on chart {} lies where no cutoff exceeds 1/2", q.x, c.name)));
                    }
                    let n = c.chart.n;
                    if (0..c.chart.m).any(|t| q.x[n + 2 * t].hypot(q.x[n + 2 * t + 1]) < 1e-6) {
                        return Err(Error::NotTransverse(format!("zero of ν at {:?} on chart {} sits on the collapsed locus", q.x, c.name)));
                    }
                    if let Some(i) = opts.extra.iter().position(|e| !e(j, v, &q.x)) {
                        return Err(Error::NotTransverse(format!("extra transversality condition {i} fails at {:?}", q.x)));
                    }
                }
                sets.push(ZeroSet { chart: j, vertex: v, branch: b, dim, pieces });
            }
            branches.push(sets);
        }
        out.push(ChartClass { branching: nu.branching[j], branches });
    }
    Ok(out)
}

/// Zero sets of a fixed perturbation, with the same checks as the build.
pub fn rebuild_with(nu: Arc<Perturbation>, metric: MetricChoice, opts: &BuildOptions) -> Result<VirtualClass> {
    let k = nu.k.clone();
    let dim = k.charts.first().map_or(0, |c| c.virtual_dim());
    let lips: Vec<f64> = (0..k.charts.len()).map(|j| lipschitz_scale(&k, j)).collect();
    let charts = try_build(nu.clone(), &metric, opts, &lips)?;
    Ok(VirtualClass { cut: nu.cut.clone(), k, metric, nu, eps: opts.eps, seed: opts.seed, dim, charts, opts: opts.clone() })
}

fn retryable(e: &Error) -> bool {
    matches!(e, Error::NotTransverse(_) | Error::RefinementFailed(_) | Error::NonConverged(_) | Error::AxiomViolation { .. })
}

/// Builds a transverse (possibly branched) perturbation and its zero sets. The
/// unperturbed ∂̄ is tried first; then seeded random perturbations of decreasing size.
pub fn build_virtual_class(k: Arc<Kcat>, cut: Cutoffs, metric: MetricChoice, opts: &BuildOptions) -> Result<VirtualClass> {
    if !(opts.eps > 0.0 && opts.eps < 0.5) {
        return Err(Error::BadNesting(format!("ε = {} must lie in (0, 1/2)", opts.eps)));
    }
    let dim = k.charts.first().map_or(0, |c| c.virtual_dim());
    if k.charts.iter().any(|c| c.virtual_dim() != dim) {
        return Err(Error::BadDim("charts have different virtual dimensions".into()));
    }
    let lips: Vec<f64> = (0..k.charts.len()).map(|j| lipschitz_scale(&k, j)).collect();
    let mut last = String::from("no attempt made");
    for attempt in 0..=opts.max_attempts {
        if attempt == 0 && (opts.force_perturbation || opts.force_branching) {
            continue;
        }
        let nu = if attempt == 0 {
            Perturbation::zero(k.clone(), cut.clone())
        } else {
            let branching = opts.force_branching || attempt > opts.max_attempts / 2;
            let p = random_perturbation(&k, &cut, &metric, opts, attempt, branching);
            if attempt > 1 && p.branching.iter().any(|b| *b) {
                for (j, b) in p.branching.iter().enumerate() {
                    if *b {
                        check_branching_isolated(&k, &cut, j)?;
                    }
                }
            }
            if opts.force_branching && attempt == 1 {
                for (j, b) in p.branching.iter().enumerate() {
                    if *b {
                        check_branching_isolated(&k, &cut, j)?;
                    }
                }
            }
            p
        };
        let nu = Arc::new(nu);
        match try_build(nu.clone(), &metric, opts, &lips) {
            Ok(charts) => return Ok(VirtualClass { k, cut, metric, nu, eps: opts.eps, seed: opts.seed, dim, charts, opts: opts.clone() }),
            Err(e) if retryable(&e) => last = e.to_string(),
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoTransverseFound(format!("{} attempts; last failure: {last}", opts.max_attempts)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::ExplodedChart;
    use crate::expr::{Expr, Layout};
    use crate::kcat::{section_from_exprs, AffineMap, Group, GroupElement, KChart, KOptions};

    const PLANE: Layout = Layout { n: 2, m: 0 };

    fn expr_section(srcs: &[&str], l: Layout) -> impl Fn(&[f64]) -> SecVal {
        let s = section_from_exprs(srcs.iter().map(|e| Expr::parse(e, l).unwrap()).collect());
        move |x: &[f64]| s(&[], x)
    }

    fn disc() -> Region {
        Region::ball(vec![0.0, 0.0], 2.0)
    }

    fn points(src: &str) -> Vec<Piece> {
        let f = expr_section(&[src], PLANE);
        let r = disc();
        zero_set(&f, 2, 0, 1, 1, &r, &|_: &[f64]| true, None, &ZeroOptions::default()).unwrap().1
    }

    #[test]
    fn point_signs_follow_the_determinant() {
        let p = points("z");
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].nodes[0].w, 1.0);
        let q = points("conj(z)");
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].nodes[0].w, -1.0);
        // z² − ε: two roots ±√ε, both positive (winding number 2 on a large circle)
        let r = points("z^2 - 0.09");
        assert_eq!(r.len(), 2);
        let mut xs: Vec<f64> = r.iter().map(|p| p.nodes[0].x[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((xs[0] + 0.3).abs() < 1e-12 && (xs[1] - 0.3).abs() < 1e-12);
        assert!(r.iter().all(|p| p.nodes[0].w == 1.0));
    }

    fn winding(src: &str, radius: f64) -> f64 {
        let f = expr_section(&[src], PLANE);
        let n = 4000;
        let mut total = 0.0;
        let mut prev = f(&[radius, 0.0]).v[0];
        for i in 1..=n {
            let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let cur = f(&[radius * t.cos(), radius * t.sin()]).v[0];
            total += (cur / prev).arg();
            prev = cur;
        }
        total / (2.0 * std::f64::consts::PI)
    }

    #[test]
    fn signed_counts_match_winding_numbers() {
        for src in ["z", "conj(z)", "z^2 - 0.09", "z^3 - 0.2*z + 0.05", "(z - 0.5)*conj(z + 0.3)"] {
            let count: f64 = points(src).iter().map(|p| p.nodes[0].w).sum();
            assert_eq!(count, winding(src, 1.9).round(), "{src}");
        }
    }

    #[test]
    fn unit_circle_is_a_closed_loop_of_length_two_pi() {
        let l = Layout { n: 3, m: 0 };
        let f = expr_section(&["x1^2 + x2^2 - 1 + i*x3"], l);
        let r = Region::ball(vec![0.0; 3], 2.0);
        let opts = ZeroOptions { per_unit: 6.0, ..ZeroOptions::default() };
        let (k, pieces) = zero_set(&f, 3, 0, 1, 1, &r, &|_: &[f64]| true, None, &opts).unwrap();
        assert_eq!(k, 1);
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].kind, PieceKind::Loop);
        let len: f64 = pieces[0].nodes.iter().map(|q| q.w).sum();
        assert!((len - 2.0 * std::f64::consts::PI).abs() < 1e-9, "{len}");
        // at (1,0,0) the preimage frame is (∂x/2, ∂z), so (t, ∂x, ∂z) positive forces
        // t = −∂y: the loop runs clockwise and ∮ x dy = −π
        let area: f64 = pieces[0].nodes.iter().map(|q| q.w * q.x[0] * q.frame[0][1]).sum();
        assert!((area + std::f64::consts::PI).abs() < 1e-8, "{area}");
    }

    #[test]
    fn arcs_are_cut_by_the_region() {
        let l = Layout { n: 3, m: 0 };
        let f = expr_section(&["x1 + i*x2"], l);
        let r = Region::ball(vec![0.0; 3], 1.0);
        let opts = ZeroOptions { per_unit: 6.0, ..ZeroOptions::default() };
        let (_, pieces) = zero_set(&f, 3, 0, 1, 1, &r, &|x: &[f64]| r.contains(x), None, &opts).unwrap();
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].kind, PieceKind::Arc);
        let dz: f64 = pieces[0].nodes.iter().map(|q| q.w * q.frame[0][2]).sum();
        assert!((dz - 2.0).abs() < 0.02, "{dz}");
    }

    #[test]
    fn torus_parametrization_is_verified() {
        let l = Layout { n: 4, m: 0 };
        let f = expr_section(&["x1^2 + x2^2 - 1 + i*(x3^2 + x4^2 - 1)"], l);
        let map: JacFn = Arc::new(|st: &[f64]| {
            let (s, t) = (st[0], st[1]);
            (vec![s.cos(), s.sin(), t.cos(), t.sin()], vec![vec![-s.sin(), 0.0], vec![s.cos(), 0.0], vec![0.0, -t.sin()], vec![0.0, t.cos()]])
        });
        let tau = 2.0 * std::f64::consts::PI;
        let sp = SurfaceParam { chart: 0, vertex: 0, map, lo: [0.0, 0.0], hi: [tau, tau], periodic: true, samples: 32 };
        let r = Region::ball(vec![0.0; 4], 2.0);
        let opts = ZeroOptions { per_unit: 3.0, ..ZeroOptions::default() };
        let (k, pieces) = zero_set(&f, 4, 0, 1, 1, &r, &|_: &[f64]| true, Some(&sp), &opts).unwrap();
        assert_eq!(k, 2);
        let area: f64 = pieces[0].nodes.iter().map(|q| q.w.abs() * frame_volume(&q.frame)).sum();
        assert!((area - tau * tau).abs() < 1e-9);
        let bad = SurfaceParam { map: Arc::new(|st: &[f64]| (vec![st[0], 0.0, 1.0, 0.0], vec![vec![1.0, 0.0]; 4])), ..sp.clone() };
        assert!(zero_set(&f, 4, 0, 1, 1, &r, &|_: &[f64]| true, Some(&bad), &opts).is_err());
        assert!(matches!(zero_set(&f, 4, 0, 1, 1, &r, &|_: &[f64]| true, None, &opts), Err(Error::DimUnsupported(_))));
    }

    fn one_chart(dbar: &str, group: Group) -> Arc<Kcat> {
        let ball = |r: f64| Region::ball(vec![0.0, 0.0], r);
        let c = KChart {
            name: "c".into(),
            chart: ExplodedChart::smooth(2, ball(3.0)),
            f: ball(2.0),
            f1: ball(2.5),
            fs: ball(3.0),
            u: ball(3.0),
            group,
            rank: 1,
            dbar: section_from_exprs(vec![Expr::parse(dbar, PLANE).unwrap()]),
            dbar_src: vec![dbar.into()],
            base: AffineMap::to_point(2),
        };
        Arc::new(Kcat::new(vec![c], vec![], 0, KOptions { grid: 8.0, ..KOptions::default() }))
    }

    fn z2() -> Group {
        let g = GroupElement { lin: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]), shift: DVector::zeros(2), v_act: DMatrix::identity(1, 1) };
        Group::generate(2, 1, vec![g], 2).unwrap()
    }

    fn build(k: Arc<Kcat>, opts: BuildOptions) -> Result<VirtualClass> {
        let cut = k.choose_cutoffs()?;
        let metric = k.choose_metric(&cut)?;
        build_virtual_class(k, cut, metric, &opts)
    }

    fn total(vc: &VirtualClass) -> f64 {
        vc.weighted().iter().map(|(_, mu, z)| mu * z.signed_count()).sum()
    }

    #[test]
    fn transverse_dbar_is_kept() {
        let vc = build(one_chart("z", Group::trivial(2, 1)), BuildOptions::default()).unwrap();
        assert!(vc.nu.is_zero());
        assert_eq!(total(&vc), 1.0);
    }

    #[test]
    fn degenerate_zero_is_perturbed_into_two_points() {
        let vc = build(one_chart("z^2", Group::trivial(2, 1)), BuildOptions::default()).unwrap();
        assert!(!vc.nu.is_zero());
        let z = &vc.charts[0].branches[0][0];
        assert_eq!(z.pieces.len(), 2);
        assert_eq!(z.signed_count(), 2.0);
        for q in z.nodes() {
            assert!(vc.metric.norm(0, &vc.nu.value(0, 0, 0, &q.x)) < 1.0);
        }
    }

    #[test]
    fn equivariant_and_branched_perturbations_of_z_squared() {
        let vc = build(one_chart("z^2", z2()), BuildOptions { seed: 3, ..BuildOptions::default() }).unwrap();
        assert!(!vc.charts[0].branching);
        let z = &vc.charts[0].branches[0][0];
        assert_eq!(z.signed_count(), 2.0);
        // the zero pair is an orbit
        let (a, b) = (&z.pieces[0].nodes[0].x, &z.pieces[1].nodes[0].x);
        assert!((a[0] + b[0]).abs() < 1e-9 && (a[1] + b[1]).abs() < 1e-9);

        let br = build(one_chart("z^2", z2()), BuildOptions { seed: 3, force_branching: true, ..BuildOptions::default() }).unwrap();
        assert!(br.charts[0].branching);
        assert_eq!(br.branch_weight(0), q_frac(1, 2));
        assert!(br.branch_space().is_probability());
        let sets: Vec<&ZeroSet> = br.charts[0].branches.iter().map(|b| &b[0]).collect();
        assert_eq!(sets.len(), 2);
        for s in &sets {
            assert_eq!(s.signed_count(), 2.0);
        }
        // branch 1 is the image of branch 0 under z ↦ −z
        for q in sets[0].nodes() {
            let minus = [-q.x[0], -q.x[1]];
            assert!(sets[1].nodes().any(|p| dist(&p.x, &minus) < 1e-8));
        }
    }

    #[test]
    fn perturbations_are_deterministic_in_the_seed() {
        let a = build(one_chart("z^2", Group::trivial(2, 1)), BuildOptions { seed: 11, ..BuildOptions::default() }).unwrap();
        let b = build(one_chart("z^2", Group::trivial(2, 1)), BuildOptions { seed: 11, ..BuildOptions::default() }).unwrap();
        let c = build(one_chart("z^2", Group::trivial(2, 1)), BuildOptions { seed: 12, ..BuildOptions::default() }).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn no_transverse_found_when_conditions_cannot_hold() {
        let never: ExtraCondition = Arc::new(|_, _, _| false);
        let opts = BuildOptions { max_attempts: 3, extra: vec![never], ..BuildOptions::default() };
        let e = build(one_chart("z", Group::trivial(2, 1)), opts).unwrap_err();
        assert!(matches!(e, Error::NoTransverseFound(_)));
    }
}
