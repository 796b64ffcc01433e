//! Finite presentations of Kuranishi categories: charts with finite groups, transitions,
//! trivialized obstruction bundles, ∂̄ sections, cutoffs and metrics.

use crate::charts::{dist, grid_box, ExplodedChart, JacFn, MapFn, Region};
use crate::error::{Error, Result};
use crate::expr::{Expr, MAX_VARS};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use std::fmt;
use std::sync::Arc;

/// Value and Jacobian (`jac[i][j] = ∂v_i/∂x_j`) of a section of a trivial bundle.
#[derive(Clone, Debug)]
pub struct SecVal {
    pub v: Vec<C64>,
    pub jac: Vec<Vec<C64>>,
}

impl SecVal {
    pub fn norm(&self) -> f64 {
        self.v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Real Jacobian with rows `(Re v_1, Im v_1, Re v_2, ..)`.
    pub fn real_jacobian(&self) -> DMatrix<f64> {
        let d = self.v.len();
        let n = self.jac.first().map_or(0, |r| r.len());
        DMatrix::from_fn(2 * d, n, |r, c| if r % 2 == 0 { self.jac[r / 2][c].re } else { self.jac[r / 2][c].im })
    }
}

/// `(vertex, x) ↦ value and Jacobian`.
pub type SecFn = Arc<dyn Fn(&[f64], &[f64]) -> SecVal + Send + Sync>;

pub fn section_from_exprs(exprs: Vec<Expr>) -> SecFn {
    Arc::new(move |v, x| {
        let n = x.len().min(MAX_VARS);
        let mut vals = Vec::with_capacity(exprs.len());
        let mut jac = Vec::with_capacity(exprs.len());
        for e in &exprs {
            let d = e.eval_dual(x, v);
            vals.push(d.v);
            jac.push(d.g[..n].to_vec());
        }
        SecVal { v: vals, jac }
    })
}

/// Affine map `x ↦ lin·x + shift` on chart coordinates, with a complex-linear action on V.
#[derive(Clone, Debug)]
pub struct GroupElement {
    pub lin: DMatrix<f64>,
    pub shift: DVector<f64>,
    pub v_act: DMatrix<C64>,
}

impl GroupElement {
    pub fn identity(n: usize, d: usize) -> GroupElement {
        GroupElement { lin: DMatrix::identity(n, n), shift: DVector::zeros(n), v_act: DMatrix::identity(d, d) }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.lin * DVector::from_column_slice(x) + &self.shift).as_slice().to_vec()
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &GroupElement) -> GroupElement {
        GroupElement { lin: &self.lin * &other.lin, shift: &self.lin * &other.shift + &self.shift, v_act: &self.v_act * &other.v_act }
    }

    fn close_to(&self, other: &GroupElement) -> bool {
        (&self.lin - &other.lin).abs().max() < 1e-9 && (&self.shift - &other.shift).abs().max() < 1e-9 && (&self.v_act - &other.v_act).iter().all(|c| c.norm() < 1e-9)
    }
}

/// A finite group given by all of its elements; element 0 is the identity.
#[derive(Clone, Debug)]
pub struct Group {
    pub elements: Vec<GroupElement>,
    inverse: Vec<usize>,
}

impl Group {
    pub fn trivial(n: usize, d: usize) -> Group {
        Group { elements: vec![GroupElement::identity(n, d)], inverse: vec![0] }
    }

    /// Closes the generators under composition; fails if the closure exceeds `order`.
    pub fn generate(n: usize, d: usize, generators: Vec<GroupElement>, order: usize) -> Result<Group> {
        for g in &generators {
            if g.lin.nrows() != n || g.lin.ncols() != n || g.shift.len() != n || g.v_act.nrows() != d || g.v_act.ncols() != d {
                return Err(Error::BadDim(format!("group generator shapes do not match chart dimension {n} and rank {d}")));
            }
            if g.lin.determinant() <= 0.0 {
                return Err(Error::GroupNotClosed("generator is not orientation preserving".into()));
            }
            if g.v_act.clone().try_inverse().is_none() {
                return Err(Error::GroupNotClosed("generator acts non-invertibly on V".into()));
            }
        }
        let mut elems = vec![GroupElement::identity(n, d)];
        let mut frontier = vec![0usize];
        while let Some(i) = frontier.pop() {
            for g in &generators {
                let h = g.compose(&elems[i]);
                if !elems.iter().any(|e| e.close_to(&h)) {
                    if elems.len() == order {
                        return Err(Error::GroupNotClosed(format!("generators produce more than the declared {order} elements")));
                    }
                    elems.push(h);
                    frontier.push(elems.len() - 1);
                }
            }
        }
        if elems.len() != order {
            return Err(Error::GroupNotClosed(format!("generators produce {} elements, declared order {order}", elems.len())));
        }
        let inverse = (0..elems.len())
            .map(|i| (0..elems.len()).find(|&j| elems[i].compose(&elems[j]).close_to(&elems[0])).ok_or_else(|| Error::GroupNotClosed("element without inverse".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Group { elements: elems, inverse })
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn inv(&self, i: usize) -> usize {
        self.inverse[i]
    }

    /// Index of `a ∘ b`.
    pub fn mul(&self, a: usize, b: usize) -> usize {
        let c = self.elements[a].compose(&self.elements[b]);
        self.elements.iter().position(|e| e.close_to(&c)).expect("closed group")
    }

    pub fn is_trivial(&self) -> bool {
        self.elements.len() == 1
    }
}

/// Affine base map `x ↦ P x + q`.
#[derive(Clone, Debug)]
pub struct AffineMap {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.p * DVector::from_column_slice(x) + &self.q).as_slice().to_vec()
    }

    pub fn to_point(n: usize) -> AffineMap {
        AffineMap { p: DMatrix::zeros(0, n), q: DVector::zeros(0) }
    }

    pub fn as_jac_fn(&self) -> JacFn {
        let m = self.clone();
        Arc::new(move |x: &[f64]| {
            let jac = (0..m.p.nrows()).map(|r| (0..m.p.ncols()).map(|c| m.p[(r, c)]).collect()).collect();
            (m.apply(x), jac)
        })
    }
}

/// A chart `F ⊂ F' ⊂ F♯` with group, bundle `C^rank` over `U`, and ∂̄.
#[derive(Clone)]
pub struct KChart {
    pub name: String,
    pub chart: ExplodedChart,
    pub f: Region,
    pub f1: Region,
    pub fs: Region,
    pub u: Region,
    pub group: Group,
    pub rank: usize,
    pub dbar: SecFn,
    pub dbar_src: Vec<String>,
    pub base: AffineMap,
}

impl fmt::Debug for KChart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KChart({}, dim {}, |G| = {}, rank {})", self.name, self.dim(), self.group.order(), self.rank)
    }
}

impl KChart {
    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn virtual_dim(&self) -> isize {
        self.dim() as isize - 2 * self.rank as isize
    }

    pub fn n_vertices(&self) -> usize {
        self.chart.strata().len()
    }

    pub fn vertex(&self, v: usize) -> Vec<f64> {
        self.chart.vertex_f64(v)
    }

    pub fn dbar_at(&self, v: usize, x: &[f64]) -> SecVal {
        (self.dbar)(&self.vertex(v), x)
    }

    pub fn act(&self, g: usize, x: &[f64]) -> Vec<f64> {
        self.group.elements[g].apply(x)
    }

    /// Grid of the given region, `per_unit` points per unit length.
    pub fn grid(&self, region: &Region, per_unit: f64, max_per_axis: usize) -> Vec<Vec<f64>> {
        region.grid(self.chart.n, self.chart.m, per_unit, max_per_axis)
    }
}

/// Transition from chart `a` to chart `b`: `φ: D ⊂ F_a♯ → F_b♯`, local inverse `ψ`,
/// and the bundle inclusion `ι: V_a → V_b` (`rank_b × rank_a`).
#[derive(Clone)]
pub struct Transition {
    pub a: usize,
    pub b: usize,
    pub domain: Region,
    pub phi: JacFn,
    pub psi: Option<JacFn>,
    pub iota: DMatrix<C64>,
}

/// A morphism from a point `x` of chart `chart` to the query point, with the induced
/// identification `t: V_chart(x) → V_target(y)`.
#[derive(Clone, Debug)]
pub struct Morph {
    pub chart: usize,
    pub x: Vec<f64>,
    pub t: DMatrix<C64>,
    /// False for extension along a retraction (lower-dimensional source off its image).
    pub exact: bool,
}

#[derive(Clone, Debug)]
pub struct KOptions {
    /// Grid points per unit length for sampled checks.
    pub grid: f64,
    pub max_per_axis: usize,
    /// Relative transversality threshold.
    pub tau_rel: f64,
    pub coherence_tol: f64,
}

impl Default for KOptions {
    fn default() -> Self {
        KOptions { grid: 17.0, max_per_axis: 48, tau_rel: 1e-4, coherence_tol: 1e-9 }
    }
}

#[derive(Clone)]
pub struct Kcat {
    pub charts: Vec<KChart>,
    pub transitions: Vec<Transition>,
    pub base_dim: usize,
    pub opts: KOptions,
}

impl fmt::Debug for Kcat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Kcat({:?}, {} transitions)", self.charts, self.transitions.len())
    }
}

fn cmat_apply(m: &DMatrix<C64>, v: &[C64]) -> Vec<C64> {
    (m * DVector::from_column_slice(v)).as_slice().to_vec()
}

pub fn vec_dist(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}

/// Moore–Penrose pseudo-inverse of a complex matrix.
pub fn pinv(m: &DMatrix<C64>) -> DMatrix<C64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    m.clone().pseudo_inverse(1e-12).expect("pseudo-inverse with nonnegative epsilon")
}

impl Kcat {
    pub fn new(charts: Vec<KChart>, transitions: Vec<Transition>, base_dim: usize, opts: KOptions) -> Kcat {
        Kcat { charts, transitions, base_dim, opts }
    }

    /// All morphisms from points of chart `k` to the point `y` of chart `b` (same vertex).
    pub fn morphisms_from(&self, k: usize, b: usize, y: &[f64], with_extensions: bool) -> Vec<Morph> {
        let cb = &self.charts[b];
        let mut out = Vec::new();
        if k == b {
            for g in 0..cb.group.order() {
                let x = cb.act(cb.group.inv(g), y);
                out.push(Morph { chart: b, x, t: cb.group.elements[g].v_act.clone(), exact: true });
            }
        }
        for tr in &self.transitions {
            if tr.b == b && tr.a == k {
                let Some(psi) = &tr.psi else { continue };
                let ca = &self.charts[k];
                let equal = ca.dim() == cb.dim();
                for g in 0..cb.group.order() {
                    let yp = cb.act(cb.group.inv(g), y);
                    let (xp, _) = psi(&yp);
                    if !tr.domain.contains(&xp) || !ca.fs.contains(&xp) {
                        continue;
                    }
                    let (back, _) = (tr.phi)(&xp);
                    let on_image = dist(&back, &yp) <= 1e-9 * (1.0 + yp.iter().map(|v| v.abs()).fold(0.0, f64::max));
                    if !on_image && (equal || !with_extensions) {
                        continue;
                    }
                    for h in 0..ca.group.order() {
                        let x = ca.act(h, &xp);
                        let ah_inv = ca.group.elements[ca.group.inv(h)].v_act.clone();
                        let t = &cb.group.elements[g].v_act * &tr.iota * ah_inv;
                        out.push(Morph { chart: k, x, t, exact: on_image });
                    }
                }
            }
            if tr.a == b && tr.b == k {
                let ck = &self.charts[k];
                if ck.dim() != cb.dim() || tr.iota.nrows() != tr.iota.ncols() {
                    continue;
                }
                let Some(iota_inv) = tr.iota.clone().try_inverse() else { continue };
                for g in 0..cb.group.order() {
                    let yp = cb.act(cb.group.inv(g), y);
                    if !tr.domain.contains(&yp) {
                        continue;
                    }
                    let (xp, _) = (tr.phi)(&yp);
                    if !ck.fs.contains(&xp) {
                        continue;
                    }
                    for h in 0..ck.group.order() {
                        let x = ck.act(h, &xp);
                        let ah_inv = ck.group.elements[ck.group.inv(h)].v_act.clone();
                        let t = &cb.group.elements[g].v_act * &iota_inv * ah_inv;
                        out.push(Morph { chart: k, x, t, exact: true });
                    }
                }
            }
        }
        out
    }

    /// Morphisms from `(a, y)` into strictly higher-dimensional charts. Here `t` maps
    /// `V_a(y)` into `V_chart(x)`, the opposite direction to [`Kcat::morphisms_from`].
    pub fn morphisms_out(&self, a: usize, y: &[f64]) -> Vec<Morph> {
        let ca = &self.charts[a];
        let mut out = Vec::new();
        for tr in self.transitions.iter().filter(|t| t.a == a) {
            let cb = &self.charts[tr.b];
            if cb.dim() == ca.dim() {
                continue;
            }
            for h in 0..ca.group.order() {
                let yh = ca.act(h, y);
                if !tr.domain.contains(&yh) || !ca.fs.contains(&yh) {
                    continue;
                }
                let (xp, _) = (tr.phi)(&yh);
                for g in 0..cb.group.order() {
                    let x = cb.act(g, &xp);
                    if !cb.fs.contains(&x) {
                        continue;
                    }
                    let t = &cb.group.elements[g].v_act * &tr.iota * &ca.group.elements[h].v_act;
                    out.push(Morph { chart: tr.b, x, t, exact: true });
                }
            }
        }
        out
    }

    /// Every chart point over `(b, y)`, chart by chart: the fiber of the presentation.
    pub fn fiber(&self, b: usize, y: &[f64]) -> Vec<Morph> {
        (0..self.charts.len()).flat_map(|k| self.morphisms_from(k, b, y, false)).collect()
    }

    fn tau(&self, scale: f64) -> f64 {
        self.opts.tau_rel * scale.max(1e-12)
    }

    /// Checks every invariant of the presentation on deterministic grids.
    pub fn validate(&self) -> Result<ValidationReport> {
        let mut rep = ValidationReport::default();
        if self.charts.is_empty() {
            return Err(Error::NotLocallyFinite("no charts".into()));
        }
        for (i, c) in self.charts.iter().enumerate() {
            let (n, m) = (c.chart.n, c.chart.m);
            for (name, r) in [("F", &c.f), ("F'", &c.f1), ("F#", &c.fs), ("U", &c.u)] {
                let (lo, hi) = r.bbox(n, m);
                if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
                    return Err(Error::NotLocallyFinite(format!("chart {i} ({}): region {name} is unbounded", c.name)));
                }
            }
            if c.base.p.ncols() != c.dim() || c.base.p.nrows() != self.base_dim {
                return Err(Error::BadDim(format!("chart {i}: base map has shape {}x{}, expected {}x{}", c.base.p.nrows(), c.base.p.ncols(), self.base_dim, c.dim())));
            }
            self.check_nesting(i)?;
            self.check_group_preserves(i)?;
            rep.points_checked += self.check_equivariance(i)?;
        }
        for (t_idx, tr) in self.transitions.iter().enumerate() {
            if tr.a >= self.charts.len() || tr.b >= self.charts.len() || tr.a == tr.b {
                return Err(Error::Schema(format!("transition {t_idx} references charts {} and {}", tr.a, tr.b)));
            }
            let (ca, cb) = (&self.charts[tr.a], &self.charts[tr.b]);
            if ca.chart.m != cb.chart.m || ca.n_vertices() != cb.n_vertices() {
                return Err(Error::DimUnsupported(format!("transition {t_idx}: charts with different tropical parts")));
            }
            if tr.iota.nrows() != cb.rank || tr.iota.ncols() != ca.rank {
                return Err(Error::BadInclusion(format!("transition {t_idx}: inclusion has shape {}x{}, expected {}x{}", tr.iota.nrows(), tr.iota.ncols(), cb.rank, ca.rank)));
            }
            if ca.dim() > cb.dim() || ca.rank > cb.rank {
                return Err(Error::BadInclusion(format!(
                    "transition {t_idx}: neither V_{} ⊆ V_{} nor the reverse (source must have the smaller chart and bundle)",
                    ca.name, cb.name
                )));
            }
            let sv = tr.iota.clone().svd(false, false).singular_values;
            if sv.len() < ca.rank || sv.iter().fold(f64::INFINITY, |a, &b| a.min(b)) < 1e-9 {
                return Err(Error::BadInclusion(format!("transition {t_idx}: bundle inclusion is not injective")));
            }
            if ca.dim() == cb.dim() && ca.rank != cb.rank {
                return Err(Error::BadInclusion(format!("transition {t_idx}: equal-dimensional charts need equal bundle ranks")));
            }
            rep.points_checked += self.check_transition(t_idx)?;
        }
        Ok(rep)
    }

    fn check_nesting(&self, i: usize) -> Result<()> {
        let c = &self.charts[i];
        let (n, m) = (c.chart.n, c.chart.m);
        let pts = grid_box(&c.fs.bbox(n, m).0, &c.fs.bbox(n, m).1, self.opts.grid, self.opts.max_per_axis);
        let fails = |what: &str| Error::BadNesting(format!("chart {i} ({}): {what}", c.name));
        for x in &pts {
            let (df, df1, dfs, du) = (c.f.depth(x), c.f1.depth(x), c.fs.depth(x), c.u.depth(x));
            if df > 0.0 && df1 <= 0.0 {
                return Err(fails("F is not inside F'"));
            }
            if df1 > 0.0 && dfs <= 0.0 {
                return Err(fails("F' is not inside F#"));
            }
            // closure of F inside F# lies in F'
            if df >= 0.0 && dfs > 0.0 && df1 <= 0.0 {
                return Err(fails("closure of F in F# leaves F'"));
            }
            if df > 0.0 && du <= 0.0 {
                return Err(fails("bundle domain U does not contain F"));
            }
        }
        if !pts.iter().any(|x| c.f.contains(x)) {
            return Err(fails("F contains no grid point"));
        }
        Ok(())
    }

    fn check_group_preserves(&self, i: usize) -> Result<()> {
        let c = &self.charts[i];
        if c.group.is_trivial() {
            return Ok(());
        }
        for x in c.grid(&c.fs, self.opts.grid, self.opts.max_per_axis) {
            for g in 1..c.group.order() {
                let gx = c.act(g, &x);
                for (name, r) in [("F", &c.f), ("F'", &c.f1), ("F#", &c.fs)] {
                    if (r.depth(&x) - r.depth(&gx)).abs() > 1e-9 && (r.contains(&x) != r.contains(&gx)) {
                        return Err(Error::GroupNotClosed(format!("chart {i}: group element {g} does not preserve {name}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_equivariance(&self, i: usize) -> Result<usize> {
        let c = &self.charts[i];
        let mut count = 0;
        if c.group.is_trivial() {
            return Ok(0);
        }
        for v in 0..c.n_vertices() {
            for x in c.grid(&c.fs, self.opts.grid / 2.0, 24) {
                let s = c.dbar_at(v, &x);
                for g in 1..c.group.order() {
                    let sg = c.dbar_at(v, &c.act(g, &x));
                    let expect = cmat_apply(&c.group.elements[g].v_act, &s.v);
                    let scale = 1.0 + s.norm();
                    if vec_dist(&sg.v, &expect) > self.opts.coherence_tol * 1e3 * scale {
                        return Err(Error::NotTransverse(format!("chart {i}: dbar is not equivariant under group element {g} at {x:?}")));
                    }
                    count += 1;
                }
            }
        }
        Ok(count)
    }

    fn check_transition(&self, t_idx: usize) -> Result<usize> {
        let tr = &self.transitions[t_idx];
        let (ca, cb) = (&self.charts[tr.a], &self.charts[tr.b]);
        let mut count = 0;
        let pts: Vec<Vec<f64>> = ca.grid(&tr.domain, self.opts.grid, self.opts.max_per_axis).into_iter().filter(|x| ca.fs.contains(x)).collect();
        let codim = cb.rank - ca.rank;
        // complement of the image of ι, for the transversality clause
        let q = if codim > 0 {
            let full = tr.iota.clone().svd(true, false);
            let u = full.u.expect("requested U");
            let mut comp = DMatrix::<C64>::zeros(cb.rank, cb.rank);
            comp.copy_from(&u);
            let proj = DMatrix::<C64>::identity(cb.rank, cb.rank) - comp.columns(0, ca.rank) * comp.columns(0, ca.rank).adjoint();
            Some(proj)
        } else {
            None
        };
        for v in 0..ca.n_vertices() {
            for x in &pts {
                let (y, _) = (tr.phi)(x);
                if !cb.fs.closure_contains(&y) {
                    return Err(Error::NotTransverse(format!("transition {t_idx}: φ maps {x:?} outside F#_{}", cb.name)));
                }
                if let Some(psi) = &tr.psi {
                    let (xb, _) = psi(&y);
                    if dist(&xb, x) > 1e-8 * (1.0 + x.iter().map(|a| a.abs()).fold(0.0, f64::max)) {
                        return Err(Error::NotTransverse(format!("transition {t_idx}: ψ∘φ is not the identity at {x:?}")));
                    }
                }
                let sa = ca.dbar_at(v, x);
                let sb = cb.dbar_at(v, &y);
                let expect = cmat_apply(&tr.iota, &sa.v);
                let scale = 1.0 + sb.norm();
                if vec_dist(&sb.v, &expect) > self.opts.coherence_tol * scale {
                    return Err(Error::NotTransverse(format!("transition {t_idx}: dbar not coherent at {x:?} (|difference| = {:.3e})", vec_dist(&sb.v, &expect))));
                }
                if let Some(proj) = &q {
                    let jb = sb.real_jacobian();
                    let qc = complex_to_real(proj);
                    let m = &qc * &jb;
                    let sv = m.svd(false, false).singular_values;
                    let smin = sv.iter().take(2 * codim).fold(f64::INFINITY, |a, &b| a.min(b));
                    let lip = jb.norm();
                    if smin < self.tau(lip) {
                        return Err(Error::NotTransverse(format!("transition {t_idx}: dbar_{} is not transverse to V_{} at {y:?}", cb.name, ca.name)));
                    }
                }
                count += 1;
            }
            // closure clause: boundary points of the domain inside F_a# leave the open F_b#
            let (lo, hi) = tr.domain.bbox(ca.chart.n, ca.chart.m);
            let h = 1.0 / self.opts.grid;
            for x in grid_box(&lo, &hi, 2.0 * self.opts.grid, 2 * self.opts.max_per_axis) {
                let dd = tr.domain.depth(&x);
                if dd > 0.0 && dd < 0.05 * h && ca.fs.depth(&x) > h {
                    let (y, _) = (tr.phi)(&x);
                    if cb.fs.depth(&y) > 2.0 * h {
                        return Err(Error::NotTransverse(format!("transition {t_idx}: image of the overlap is not closed in F#_{} near {x:?}", ca.name)));
                    }
                }
            }
        }
        Ok(count)
    }

    /// Zeros of ∂̄ on a chart's region by Newton from grid seeds.
    pub fn hol_points(&self, i: usize, region: &Region) -> Vec<(usize, Vec<f64>)> {
        let c = &self.charts[i];
        let per_unit = self.opts.grid;
        let (lo, hi) = region.bbox(c.chart.n, c.chart.m);
        let h = lo.iter().zip(&hi).map(|(a, b)| (b - a) / ((b - a) * per_unit).ceil().clamp(2.0, self.opts.max_per_axis as f64)).fold(0.0, f64::max);
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        for v in 0..c.n_vertices() {
            let vert = c.vertex(v);
            let f = |x: &[f64]| (c.dbar)(&vert, x);
            for x0 in c.grid(region, per_unit, self.opts.max_per_axis) {
                let s = f(&x0);
                let lip = s.real_jacobian().norm();
                if s.norm() > 2.0 * lip * h * (x0.len() as f64).sqrt() + 1e-12 {
                    continue;
                }
                if let Some(x) = newton_min_norm(&f, &x0, 40) {
                    if region.contains(&x) && !out.iter().any(|(w, p)| *w == v && dist(p, &x) < 0.25 * h) {
                        out.push((v, x));
                    }
                }
            }
        }
        out
    }

    /// Properness and completeness diagnostics over the base.
    pub fn properness(&self) -> ProperReport {
        let mut rep = ProperReport { proper: true, complete: true, hol_points: 0, hol_tropical_complete: true, notes: vec![] };
        for (i, c) in self.charts.iter().enumerate() {
            let pts = self.hol_points(i, &c.fs);
            rep.hol_points += pts.len();
            let h = 1.0 / self.opts.grid;
            for (v, x) in &pts {
                // some chart must hold the point with margin
                let held = self.fiber(i, x).iter().any(|mo| self.charts[mo.chart].f.depth(&mo.x) > h);
                if !held {
                    rep.proper = false;
                    rep.notes.push(format!("hol point {x:?} of chart {} is not inside any F with margin", c.name));
                }
                let m = c.chart.m;
                let n = c.chart.n;
                if (0..m).any(|j| x[n + 2 * j].hypot(x[n + 2 * j + 1]) < 1e-9) {
                    // the collapsed coefficient moves the tropical part off the vertex
                    let p = &c.chart.strata()[*v];
                    let act = c.chart.polytope.active_face(p).unwrap_or_default();
                    if !act.is_empty() {
                        rep.hol_tropical_complete = false;
                    }
                }
            }
            if !c.chart.polytope.is_complete() {
                rep.complete = false;
                rep.notes.push(format!("tropical part of chart {} is not complete", c.name));
            }
        }
        rep.complete &= rep.proper;
        rep
    }

    /// Cutoff functions ρ_i built around sampled holomorphic points. Candidates are taken
    /// in order of decreasing margin; a point already at `ρ ≥ 0.9` gets no core of its own.
    pub fn choose_cutoffs(&self) -> Result<Cutoffs> {
        let mut cand: Vec<(usize, usize, Vec<f64>, f64)> = Vec::new();
        for (i, c) in self.charts.iter().enumerate() {
            for (v, x) in self.hol_points(i, &c.f) {
                let margin = 2.0 * 0.9 * c.f.depth(&x).min(c.u.depth(&x));
                cand.push((i, v, x, margin));
            }
        }
        // stable: ties keep chart and grid order
        cand.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap_or(std::cmp::Ordering::Equal));
        let mut per_chart: Vec<Vec<(usize, Vec<f64>, f64)>> = vec![Vec::new(); self.charts.len()];
        for (i, v, x, margin) in &cand {
            let cut = Cutoffs { cores: Arc::new(per_chart.clone()) };
            if self.max_rho(&cut, *i, *v, x) >= 0.9 {
                continue;
            }
            let c = &self.charts[*i];
            // near-fixed grid points snap to the mean of their cluster so the orbit is exact
            let near: Vec<Vec<f64>> = (0..c.group.order()).map(|g| c.act(g, x)).filter(|gx| dist(gx, x) < 1e-6).collect();
            let mut xc = vec![0.0; x.len()];
            for p in &near {
                for (a, b) in xc.iter_mut().zip(p) {
                    *a += b / near.len() as f64;
                }
            }
            for g in 0..c.group.order() {
                let gx = c.act(g, &xc);
                if !per_chart[*i].iter().any(|(w, p, _)| w == v && dist(p, &gx) < 1e-9) {
                    per_chart[*i].push((*v, gx, *margin));
                }
            }
        }
        let cut = Cutoffs { cores: Arc::new(per_chart) };
        for (i, v, x, _) in &cand {
            if self.max_rho(&cut, *i, *v, x) <= 0.5 {
                return Err(Error::CannotCover(format!("holomorphic point {x:?} of chart {} has no cutoff above 1/2", self.charts[*i].name)));
            }
        }
        Ok(cut)
    }

    /// max_k ρ_k over the fiber of `(b, y)`.
    pub fn max_rho(&self, cut: &Cutoffs, b: usize, v: usize, y: &[f64]) -> f64 {
        self.fiber(b, y).iter().map(|mo| cut.rho(mo.chart, v, &mo.x)).fold(-1.0, f64::max)
    }

    /// Norm factors σ_i with `{σ|∂̄| < 1} ⊆ {some ρ_j > 1/2}` on the F grids.
    pub fn choose_metric(&self, cut: &Cutoffs) -> Result<MetricChoice> {
        let mut sigma = Vec::with_capacity(self.charts.len());
        for (i, c) in self.charts.iter().enumerate() {
            let mut min_dbar = f64::INFINITY;
            for v in 0..c.n_vertices() {
                for x in c.grid(&c.f, self.opts.grid, self.opts.max_per_axis) {
                    if self.max_rho(cut, i, v, &x) > 0.5 {
                        continue;
                    }
                    min_dbar = min_dbar.min(c.dbar_at(v, &x).norm());
                }
            }
            let uncovered_zero = self.hol_points(i, &c.f).iter().any(|(v, x)| self.max_rho(cut, i, *v, x) <= 0.5);
            if min_dbar <= 1e-12 || uncovered_zero {
                return Err(Error::CannotScale(format!("dbar vanishes on chart {} where no cutoff exceeds 1/2", c.name)));
            }
            sigma.push(if min_dbar.is_finite() { 2.0 / min_dbar } else { 1.0 });
        }
        let global = sigma.iter().cloned().fold(0.0, f64::max);
        Ok(MetricChoice { sigma, global, factor_weights: None })
    }

    /// Grid verification of `{|∂̄|_h < 1} ⊆ {some ρ_j > 1/2}` for a metric choice.
    pub fn verify_metric(&self, cut: &Cutoffs, metric: &MetricChoice) -> Result<usize> {
        let mut count = 0;
        for (i, c) in self.charts.iter().enumerate() {
            for v in 0..c.n_vertices() {
                for x in c.grid(&c.f, self.opts.grid, self.opts.max_per_axis) {
                    let s = c.dbar_at(v, &x);
                    if metric.norm(i, &s.v) < 1.0 && self.max_rho(cut, i, v, &x) <= 0.5 {
                        return Err(Error::CannotScale(format!("chart {}: |dbar|_h < 1 at {x:?} where no cutoff exceeds 1/2", c.name)));
                    }
                    count += 1;
                }
            }
        }
        Ok(count)
    }
}

pub(crate) fn complex_to_real(m: &DMatrix<C64>) -> DMatrix<f64> {
    DMatrix::from_fn(2 * m.nrows(), 2 * m.ncols(), |r, c| {
        let z = m[(r / 2, c / 2)];
        match (r % 2, c % 2) {
            (0, 0) => z.re,
            (0, 1) => -z.im,
            (1, 0) => z.im,
            _ => z.re,
        }
    })
}

/// Gauss–Newton with minimum-norm steps for `f(x) = 0`, `f: R^N → C^d`.
pub fn newton_min_norm(f: &dyn Fn(&[f64]) -> SecVal, x0: &[f64], iters: usize) -> Option<Vec<f64>> {
    let mut x = x0.to_vec();
    for _ in 0..iters {
        let s = f(&x);
        let r = s.norm();
        if r < 1e-13 {
            return Some(x);
        }
        let j = s.real_jacobian();
        let rhs = DVector::from_iterator(2 * s.v.len(), s.v.iter().flat_map(|c| [c.re, c.im]));
        let jp = j.pseudo_inverse(1e-12).ok()?;
        let step = jp * rhs;
        if !step.iter().all(|v| v.is_finite()) {
            return None;
        }
        for (xi, si) in x.iter_mut().zip(step.iter()) {
            *xi -= si;
        }
        if step.norm() < 1e-15 * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            break;
        }
    }
    (f(&x).norm() < 1e-10).then_some(x)
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub points_checked: usize,
}

#[derive(Clone, Debug)]
pub struct ProperReport {
    pub proper: bool,
    pub complete: bool,
    pub hol_points: usize,
    /// Whether the tropical part of the holomorphic locus is complete.
    pub hol_tropical_complete: bool,
    pub notes: Vec<String>,
}

/// Quintic smoothstep mapped to `[-1, 1] → [-1, 1]`, odd about 0.
pub fn smooth_sign(t: f64) -> f64 {
    let s = ((t.clamp(-1.0, 1.0)) + 1.0) / 2.0;
    let q = s * s * s * (s * (6.0 * s - 15.0) + 10.0);
    2.0 * q - 1.0
}

/// Quintic smoothstep on `[0, 1]`.
pub fn smoothstep(t: f64) -> f64 {
    let s = t.clamp(0.0, 1.0);
    s * s * s * (s * (6.0 * s - 15.0) + 10.0)
}

/// `ρ_i = 2(1 − Π_c (1 − ρ̂_c)) − 1` with `ρ̂_c = (S(1 − 2·dist(x, c)/margin_c) + 1)/2`:
/// a C² union of the cores, never below the largest single-core value.
#[derive(Clone, Debug)]
pub struct Cutoffs {
    /// Per chart: (vertex, core point, margin).
    pub cores: Arc<Vec<Vec<(usize, Vec<f64>, f64)>>>,
}

impl Cutoffs {
    pub fn rho(&self, chart: usize, v: usize, x: &[f64]) -> f64 {
        let mut miss = 1.0f64;
        for (w, c, margin) in &self.cores[chart] {
            if *w != v || *margin <= 0.0 {
                continue;
            }
            let t = 1.0 - 2.0 * dist(x, c) / margin;
            if t > -1.0 {
                miss *= (1.0 - smooth_sign(t)) / 2.0;
            }
        }
        1.0 - 2.0 * miss
    }

    pub fn is_empty(&self, chart: usize) -> bool {
        self.cores[chart].is_empty()
    }
}

/// Per-chart norm factors `|v|_h = σ_i |v|`; `global` is used for extensions.
#[derive(Clone, Debug)]
pub struct MetricChoice {
    pub sigma: Vec<f64>,
    pub global: f64,
    /// Weak products: norm² = (1/n) Σ_b σ_b² |v_b|² over blocks of the given sizes.
    pub factor_weights: Option<Vec<(usize, f64)>>,
}

impl MetricChoice {
    pub fn norm(&self, _chart: usize, v: &[C64]) -> f64 {
        match &self.factor_weights {
            None => self.global * v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt(),
            Some(blocks) => {
                let n = blocks.len() as f64;
                let mut s = 0.0;
                let mut off = 0;
                for (len, sig) in blocks {
                    s += sig * sig * v[off..off + len].iter().map(|c| c.norm_sqr()).sum::<f64>();
                    off += len;
                }
                (s / n).sqrt()
            }
        }
    }

    /// Largest Euclidean norm that is guaranteed to have metric norm below 1.
    pub fn euclidean_bound(&self) -> f64 {
        match &self.factor_weights {
            None => 1.0 / self.global,
            Some(blocks) => {
                let n = blocks.len() as f64;
                let smax = blocks.iter().map(|b| b.1).fold(0.0, f64::max);
                n.sqrt() / smax
            }
        }
    }
}

fn block_diag<T: nalgebra::Scalar + num::Zero + Copy>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let mut m = DMatrix::from_element(a.nrows() + b.nrows(), a.ncols() + b.ncols(), T::zero());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut(a.shape(), b.shape()).copy_from(b);
    m
}

fn projection(lo: usize, hi: usize) -> MapFn {
    Arc::new(move |x: &[f64]| x[lo..hi].to_vec())
}

fn product_region(ra: &Region, rb: &Region, da: usize, db: usize, label: &str) -> Region {
    let (la, ha) = ra.bbox(da, 0);
    let (lb, hb) = rb.bbox(db, 0);
    let bbox = ([la.clone(), lb.clone()].concat(), [ha.clone(), hb.clone()].concat());
    Region::Inter(vec![
        Region::Mapped { map: projection(0, da), inner: Box::new(ra.clone()), bbox: bbox.clone(), label: format!("{label}.0") },
        Region::Mapped { map: projection(da, da + db), inner: Box::new(rb.clone()), bbox, label: format!("{label}.1") },
    ])
}

fn product_jac(fa: JacFn, fb: JacFn, da: usize, db: usize) -> JacFn {
    Arc::new(move |x: &[f64]| {
        let (ya, ja) = fa(&x[..da]);
        let (yb, jb) = fb(&x[da..]);
        let (ma, mb) = (ya.len(), yb.len());
        let mut y = ya;
        y.extend(yb);
        let mut jac = vec![vec![0.0; da + db]; ma + mb];
        for i in 0..ma {
            jac[i][..da].copy_from_slice(&ja[i]);
        }
        for i in 0..mb {
            jac[ma + i][da..].copy_from_slice(&jb[i]);
        }
        (y, jac)
    })
}

fn identity_jac(n: usize) -> JacFn {
    Arc::new(move |x: &[f64]| (x.to_vec(), (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()))
}

/// Weak product of two categories of smooth (`m = 0`) charts. Product chart `i·n_b + j`
/// is `F_i × F_j`, intersected with `shrink[i·n_b + j]` when given; `V = V_i ⊕ V_j`,
/// `G = G_i × G_j`, `∂̄ = (∂̄_i, ∂̄_j)`.
pub fn weak_product(a: &Kcat, b: &Kcat, shrink: Option<Vec<Region>>, opts: KOptions) -> Result<Kcat> {
    if a.charts.iter().chain(&b.charts).any(|c| c.chart.m != 0) {
        return Err(Error::DimUnsupported("weak products are implemented for smooth charts only".into()));
    }
    let nb = b.charts.len();
    if let Some(s) = &shrink {
        if s.len() != a.charts.len() * nb {
            return Err(Error::BadDim(format!("{} shrink regions for {} product charts", s.len(), a.charts.len() * nb)));
        }
    }
    let mut charts = Vec::new();
    for (i, ca) in a.charts.iter().enumerate() {
        for (j, cb) in b.charts.iter().enumerate() {
            let (da, db) = (ca.dim(), cb.dim());
            let name = format!("{}x{}", ca.name, cb.name);
            let mut f = product_region(&ca.f, &cb.f, da, db, &name);
            if let Some(s) = &shrink {
                f = Region::Inter(vec![f, s[i * nb + j].clone()]);
            }
            let region = product_region(&ca.chart.region, &cb.chart.region, da, db, &name);
            let mut gens = Vec::new();
            for g in &ca.group.elements {
                gens.push(GroupElement {
                    lin: block_diag(&g.lin, &DMatrix::identity(db, db)),
                    shift: DVector::from_iterator(da + db, g.shift.iter().cloned().chain(std::iter::repeat_n(0.0, db))),
                    v_act: block_diag(&g.v_act, &DMatrix::identity(cb.rank, cb.rank)),
                });
            }
            for g in &cb.group.elements {
                gens.push(GroupElement {
                    lin: block_diag(&DMatrix::identity(da, da), &g.lin),
                    shift: DVector::from_iterator(da + db, std::iter::repeat_n(0.0, da).chain(g.shift.iter().cloned())),
                    v_act: block_diag(&DMatrix::identity(ca.rank, ca.rank), &g.v_act),
                });
            }
            let group = Group::generate(da + db, ca.rank + cb.rank, gens, ca.group.order() * cb.group.order())?;
            let (sa, sb) = (ca.dbar.clone(), cb.dbar.clone());
            let dbar: SecFn = Arc::new(move |_v: &[f64], x: &[f64]| {
                let p = sa(&[], &x[..da]);
                let q = sb(&[], &x[da..]);
                let mut jac: Vec<Vec<C64>> = p.jac.iter().map(|r| r.iter().cloned().chain(std::iter::repeat_n(C64::new(0.0, 0.0), db)).collect()).collect();
                jac.extend(q.jac.iter().map(|r| std::iter::repeat_n(C64::new(0.0, 0.0), da).chain(r.iter().cloned()).collect::<Vec<_>>()));
                let mut v = p.v;
                v.extend(q.v);
                SecVal { v, jac }
            });
            charts.push(KChart {
                name: name.clone(),
                chart: ExplodedChart::new(da + db, 0, crate::tropical::Polytope::whole_space(0), region, ca.chart.orientation * cb.chart.orientation)?,
                f,
                f1: product_region(&ca.f1, &cb.f1, da, db, &name),
                fs: product_region(&ca.fs, &cb.fs, da, db, &name),
                u: product_region(&ca.u, &cb.u, da, db, &name),
                group,
                rank: ca.rank + cb.rank,
                dbar,
                dbar_src: ca.dbar_src.iter().chain(&cb.dbar_src).cloned().collect(),
                base: AffineMap {
                    p: block_diag(&ca.base.p, &cb.base.p),
                    q: DVector::from_iterator(ca.base.q.len() + cb.base.q.len(), ca.base.q.iter().chain(cb.base.q.iter()).cloned()),
                },
            });
        }
    }
    let dims_a: Vec<usize> = a.charts.iter().map(|c| c.dim()).collect();
    let dims_b: Vec<usize> = b.charts.iter().map(|c| c.dim()).collect();
    let mut transitions = Vec::new();
    // t × id, id × t and t × t
    let ida = |i: usize| (i, Region::Inter(vec![]), identity_jac(dims_a[i]), DMatrix::<C64>::identity(a.charts[i].rank, a.charts[i].rank));
    let idb = |j: usize| (j, Region::Inter(vec![]), identity_jac(dims_b[j]), DMatrix::<C64>::identity(b.charts[j].rank, b.charts[j].rank));
    let mut moves_a: Vec<(usize, usize, Region, JacFn, Option<JacFn>, DMatrix<C64>, bool)> =
        a.transitions.iter().map(|t| (t.a, t.b, t.domain.clone(), t.phi.clone(), t.psi.clone(), t.iota.clone(), false)).collect();
    moves_a.extend((0..a.charts.len()).map(|i| {
        let (_, r, f, io) = ida(i);
        (i, i, r, f.clone(), Some(f), io, true)
    }));
    let mut moves_b: Vec<(usize, usize, Region, JacFn, Option<JacFn>, DMatrix<C64>, bool)> =
        b.transitions.iter().map(|t| (t.a, t.b, t.domain.clone(), t.phi.clone(), t.psi.clone(), t.iota.clone(), false)).collect();
    moves_b.extend((0..nb).map(|j| {
        let (_, r, f, io) = idb(j);
        (j, j, r, f.clone(), Some(f), io, true)
    }));
    for ma in &moves_a {
        for mb in &moves_b {
            if ma.6 && mb.6 {
                continue;
            }
            let (da, db) = (dims_a[ma.0], dims_b[mb.0]);
            let domain = product_region(&ma.2, &mb.2, da, db, "transition");
            let psi = match (&ma.4, &mb.4) {
                (Some(p), Some(q)) => Some(product_jac(p.clone(), q.clone(), dims_a[ma.1], dims_b[mb.1])),
                _ => None,
            };
            transitions.push(Transition {
                a: ma.0 * nb + mb.0,
                b: ma.1 * nb + mb.1,
                domain,
                phi: product_jac(ma.3.clone(), mb.3.clone(), da, db),
                psi,
                iota: block_diag(&ma.5, &mb.5),
            });
        }
    }
    let k = Kcat::new(charts, transitions, a.base_dim + b.base_dim, opts);
    // every product of holomorphic points must lie in some shrunk chart
    for (i, ca) in a.charts.iter().enumerate() {
        for (j, cb) in b.charts.iter().enumerate() {
            for (_, x) in a.hol_points(i, &ca.f) {
                for (_, y) in b.hol_points(j, &cb.f) {
                    let p = [x.clone(), y.clone()].concat();
                    if !k.fiber(i * nb + j, &p).iter().any(|mo| k.charts[mo.chart].f.contains(&mo.x)) {
                        return Err(Error::NotCovering(format!("holomorphic point {p:?} is not in any shrunk product chart")));
                    }
                }
            }
        }
    }
    Ok(k)
}

/// Product metric `(1/n) Σ σ_v² |v_v|²` from factor metrics, doubled until
/// `{|∂̄|_h < 1} ⊆ {some ρ > 1/2}` holds for the product cutoffs.
pub fn weak_product_metric(k: &Kcat, cut: &Cutoffs, ma: &MetricChoice, rank_a: usize, mb: &MetricChoice, rank_b: usize) -> Result<MetricChoice> {
    let mut scale = 1.0;
    for _ in 0..12 {
        let blocks = vec![(rank_a, scale * ma.global), (rank_b, scale * mb.global)];
        let global = scale * ma.global.max(mb.global);
        let m = MetricChoice { sigma: vec![global; k.charts.len()], global, factor_weights: Some(blocks) };
        if k.verify_metric(cut, &m).is_ok() {
            return Ok(m);
        }
        scale *= 2.0;
    }
    Err(Error::CannotScale("product metric does not confine |dbar| < 1 to the cutoff cores".into()))
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}

fn det_of(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        1.0
    } else {
        m.determinant()
    }
}

/// `k` orthonormal vectors spanning the kernel of `a` (smallest eigenvalues of `aᵀa`).
fn pinv_real(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    m.clone().pseudo_inverse(1e-12).expect("pseudo-inverse with nonnegative epsilon")
}

fn kernel_basis(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return DMatrix::zeros(0, k);
    }
    let eig = (a.transpose() * a).symmetric_eigen();
    let mut idx: Vec<usize> = (0..a.ncols()).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let mut out = DMatrix::zeros(a.ncols(), k);
    for (col, &i) in idx.iter().take(k).enumerate() {
        out.set_column(col, &eig.eigenvectors.column(i));
    }
    out
}

/// A pulled-back category and, per kept chart, its source chart in `K` with the
/// projection `t ↦ x` onto that chart's coordinates.
pub struct PulledBack {
    pub k: Kcat,
    pub to_k: Vec<(usize, AffineMap)>,
}

/// Pullback along an affine map `y: Z' → Z` for smooth charts with affine base maps.
/// Each chart becomes the fiber product `{(x, z') : P x + q = y(z')}`, parametrized by an
/// orthonormal basis of the kernel of `[P | −M]`; `z'` is restricted to `zbox`. Charts
/// with empty pullback are dropped.
pub fn pullback_kuranishi(k: &Kcat, y: &AffineMap, zbox: &Region) -> Result<PulledBack> {
    let nz = y.p.ncols();
    if y.p.nrows() != k.base_dim {
        return Err(Error::BadDim(format!("map lands in R^{}, base is R^{}", y.p.nrows(), k.base_dim)));
    }
    struct Param {
        x0: DVector<f64>,
        basis: DMatrix<f64>,
        n: usize,
    }
    let mut params: Vec<Option<Param>> = Vec::new();
    let mut charts = Vec::new();
    for c in &k.charts {
        if c.chart.m != 0 {
            return Err(Error::DimUnsupported("pullbacks are implemented for smooth charts only".into()));
        }
        let n = c.dim();
        let mut a = DMatrix::zeros(k.base_dim, n + nz);
        a.view_mut((0, 0), (k.base_dim, n)).copy_from(&c.base.p);
        a.view_mut((0, n), (k.base_dim, nz)).copy_from(&(-&y.p));
        let svd = a.clone().svd(true, true);
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-10).count();
        if rank < k.base_dim {
            return Err(Error::NotSubmersion(format!("chart {} is not transverse to the map", c.name)));
        }
        let rhs = &y.q - &c.base.q;
        let x0 = svd.solve(&rhs, 1e-12).map_err(|e| Error::NotSubmersion(e.to_string()))?;
        let dim = n + nz - k.base_dim;
        let basis = kernel_basis(&a, dim);
        let (lo, hi) = (c.fs.bbox(n, 0), zbox.bbox(nz, 0));
        let wlo: Vec<f64> = lo.0.iter().chain(&hi.0).cloned().collect();
        let whi: Vec<f64> = lo.1.iter().chain(&hi.1).cloned().collect();
        let tb = |i: usize| {
            let (mut l, mut h) = (0.0, 0.0);
            for r in 0..n + nz {
                let kv = basis[(r, i)];
                let (u, v) = (kv * (wlo[r] - x0[r]), kv * (whi[r] - x0[r]));
                l += u.min(v);
                h += u.max(v);
            }
            (l, h)
        };
        let bbox: (Vec<f64>, Vec<f64>) = (0..dim).map(tb).unzip();
        let (b2, x2) = (basis.clone(), x0.clone());
        let to_w: MapFn = Arc::new(move |t: &[f64]| (&x2 + &b2 * DVector::from_column_slice(t)).as_slice().to_vec());
        let along = |r: &Region, lo: usize, hi: usize, label: &str| {
            let w = to_w.clone();
            Region::Mapped { map: Arc::new(move |t: &[f64]| w(t)[lo..hi].to_vec()), inner: Box::new(r.clone()), bbox: bbox.clone(), label: format!("{}.{label}", c.name) }
        };
        let zr = along(zbox, n, n + nz, "z");
        let lift = |r: &Region, label: &str| Region::Inter(vec![along(r, 0, n, label), zr.clone()]);
        let f = lift(&c.f, "f");
        if f.grid(dim, 0, k.opts.grid, k.opts.max_per_axis).is_empty() {
            params.push(None);
            continue;
        }
        let gens = c
            .group
            .elements
            .iter()
            .map(|g| {
                let big = block_diag(&g.lin, &DMatrix::identity(nz, nz));
                let shift = DVector::from_iterator(n + nz, g.shift.iter().cloned().chain(std::iter::repeat_n(0.0, nz)));
                GroupElement { lin: basis.transpose() * &big * &basis, shift: basis.transpose() * (&big * &x0 + shift - &x0), v_act: g.v_act.clone() }
            })
            .collect();
        let group = Group::generate(dim, c.rank, gens, c.group.order())?;
        let (sec, b3, x3) = (c.dbar.clone(), basis.clone(), x0.clone());
        let dbar: SecFn = Arc::new(move |v: &[f64], t: &[f64]| {
            let w = &x3 + &b3 * DVector::from_column_slice(t);
            let s = sec(v, &w.as_slice()[..n]);
            let jac = s.jac.iter().map(|row| (0..dim).map(|col| (0..n).map(|r| row[r] * b3[(r, col)]).sum()).collect()).collect();
            SecVal { v: s.v, jac }
        });
        let base = AffineMap { p: basis.view((n, 0), (nz, dim)).into_owned(), q: x0.rows(n, nz).into_owned() };
        // base first: [lift of Z' | fiber] is positive, with the fiber oriented as in K
        let fib = n - k.base_dim;
        let fp = kernel_basis(&base.p, fib);
        let bx = basis.rows(0, n).into_owned();
        let s1 = det_of(&hcat(&pinv_real(&c.base.p), &(&bx * &fp)));
        let s2 = det_of(&hcat(&pinv_real(&base.p), &fp));
        let mut chart = ExplodedChart::smooth(dim, lift(&c.chart.region, "region"));
        chart.orientation = c.chart.orientation * if s1 * s2 < 0.0 { -1 } else { 1 };
        charts.push(KChart {
            name: c.name.clone(),
            chart,
            f,
            f1: lift(&c.f1, "f1"),
            fs: lift(&c.fs, "fs"),
            u: lift(&c.u, "u"),
            group,
            rank: c.rank,
            dbar,
            dbar_src: c.dbar_src.clone(),
            base,
        });
        params.push(Some(Param { x0, basis, n }));
    }
    let index: Vec<Option<usize>> = params
        .iter()
        .scan(0usize, |acc, p| {
            Some(p.as_ref().map(|_| {
                *acc += 1;
                *acc - 1
            }))
        })
        .collect();
    let mut transitions = Vec::new();
    for t in &k.transitions {
        let (Some(ia), Some(ib)) = (index[t.a], index[t.b]) else { continue };
        let (pa, pb) = (params[t.a].as_ref().unwrap(), params[t.b].as_ref().unwrap());
        let lift_map = |f: &JacFn, from: &Param, to: &Param| -> JacFn {
            let (f, xa, ba, na, xb, bb, nbb) = (f.clone(), from.x0.clone(), from.basis.clone(), from.n, to.x0.clone(), to.basis.clone(), to.n);
            Arc::new(move |s: &[f64]| {
                let w = &xa + &ba * DVector::from_column_slice(s);
                let (y, jy) = f(&w.as_slice()[..na]);
                let mut out = DVector::zeros(nbb + nz);
                for i in 0..nbb {
                    out[i] = y[i];
                }
                for i in 0..nz {
                    out[nbb + i] = w[na + i];
                }
                let tt = bb.transpose() * (out - &xb);
                // d(out)/ds = [Jφ · B_x ; B_z]
                let mut dw = DMatrix::zeros(nbb + nz, s.len());
                for i in 0..nbb {
                    for col in 0..s.len() {
                        dw[(i, col)] = (0..na).map(|r| jy[i][r] * ba[(r, col)]).sum();
                    }
                }
                for i in 0..nz {
                    for col in 0..s.len() {
                        dw[(nbb + i, col)] = ba[(na + i, col)];
                    }
                }
                let j = bb.transpose() * dw;
                (tt.as_slice().to_vec(), (0..j.nrows()).map(|r| j.row(r).iter().cloned().collect()).collect())
            })
        };
        let (xa, ba, na) = (pa.x0.clone(), pa.basis.clone(), pa.n);
        let domain = Region::Mapped {
            map: Arc::new(move |s: &[f64]| (&xa + &ba * DVector::from_column_slice(s)).as_slice()[..na].to_vec()),
            inner: Box::new(t.domain.clone()),
            bbox: charts[ia].fs.bbox(pa.basis.ncols(), 0),
            label: "transition".into(),
        };
        transitions.push(Transition { a: ia, b: ib, domain, phi: lift_map(&t.phi, pa, pb), psi: t.psi.as_ref().map(|p| lift_map(p, pb, pa)), iota: t.iota.clone() });
    }
    let to_k =
        params.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, AffineMap { p: p.basis.rows(0, p.n).into_owned(), q: p.x0.rows(0, p.n).into_owned() }))).collect();
    Ok(PulledBack { k: Kcat::new(charts, transitions, nz, k.opts.clone()), to_k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Layout;

    fn plane_chart(name: &str, dbar: &str, group: Group) -> KChart {
        let l = Layout { n: 2, m: 0 };
        let region = |r: f64| Region::ball(vec![0.0, 0.0], r);
        KChart {
            name: name.into(),
            chart: ExplodedChart::smooth(2, region(3.0)),
            f: region(2.0),
            f1: region(2.5),
            fs: region(3.0),
            u: region(2.8),
            group,
            rank: 1,
            dbar: section_from_exprs(vec![Expr::parse(dbar, l).unwrap()]),
            dbar_src: vec![dbar.into()],
            base: AffineMap::to_point(2),
        }
    }

    fn rot(angle: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()])
    }

    #[test]
    fn single_chart_is_valid_with_one_hol_point() {
        let k = Kcat::new(vec![plane_chart("c", "z", Group::trivial(2, 1))], vec![], 0, KOptions::default());
        k.validate().unwrap();
        let hol = k.hol_points(0, &k.charts[0].f);
        assert_eq!(hol.len(), 1);
        assert!(dist(&hol[0].1, &[0.0, 0.0]) < 1e-12);
        let p = k.properness();
        assert!(p.proper && p.complete);
    }

    #[test]
    fn groups_close_or_fail() {
        let g = GroupElement { lin: rot(2.0 * std::f64::consts::PI / 3.0), shift: DVector::zeros(2), v_act: DMatrix::identity(1, 1) };
        assert_eq!(Group::generate(2, 1, vec![g.clone()], 3).unwrap().order(), 3);
        assert!(matches!(Group::generate(2, 1, vec![g], 2), Err(Error::GroupNotClosed(_))));
        let refl = GroupElement { lin: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), shift: DVector::zeros(2), v_act: DMatrix::identity(1, 1) };
        assert!(Group::generate(2, 1, vec![refl], 2).is_err());
    }

    #[test]
    fn equivariance_violations_are_reported() {
        let g = Group::generate(2, 1, vec![GroupElement { lin: rot(std::f64::consts::PI), shift: DVector::zeros(2), v_act: DMatrix::identity(1, 1) }], 2).unwrap();
        // z ↦ -z with trivial action on V: z^2 is invariant, z is not
        assert!(Kcat::new(vec![plane_chart("c", "z^2", g.clone())], vec![], 0, KOptions::default()).validate().is_ok());
        assert!(Kcat::new(vec![plane_chart("c", "z", g)], vec![], 0, KOptions::default()).validate().is_err());
    }

    #[test]
    fn bad_nesting_is_detected() {
        let mut c = plane_chart("c", "z", Group::trivial(2, 1));
        c.f1 = Region::ball(vec![0.0, 0.0], 1.0);
        let r = Kcat::new(vec![c], vec![], 0, KOptions::default()).validate();
        assert!(matches!(r, Err(Error::BadNesting(_))));
    }

    fn identity_transition(a: usize, b: usize, iota: DMatrix<C64>) -> Transition {
        let id: JacFn = Arc::new(|x: &[f64]| (x.to_vec(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        Transition { a, b, domain: Region::ball(vec![1.0, 0.0], 1.0), phi: id.clone(), psi: Some(id), iota }
    }

    #[test]
    fn incompatible_inclusions_are_rejected() {
        let mut a = plane_chart("a", "z", Group::trivial(2, 1));
        let l = Layout { n: 2, m: 0 };
        a.rank = 2;
        a.dbar = section_from_exprs(vec![Expr::parse("z", l).unwrap(), Expr::parse("0", l).unwrap()]);
        let mut b = plane_chart("b", "z", Group::trivial(2, 2));
        b.rank = 2;
        b.dbar = a.dbar.clone();
        // rank-1 image inside a rank-2 bundle, in both directions: neither contains the other
        let iota = DMatrix::from_row_slice(2, 2, &[C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]);
        a.group = Group::trivial(2, 2);
        let k = Kcat::new(vec![a, b], vec![identity_transition(0, 1, iota)], 0, KOptions::default());
        assert!(matches!(k.validate(), Err(Error::BadInclusion(_))));
    }

    #[test]
    fn incoherent_dbar_is_rejected() {
        let a = plane_chart("a", "z", Group::trivial(2, 1));
        let b = plane_chart("b", "z + 0.5", Group::trivial(2, 1));
        let k = Kcat::new(vec![a, b], vec![identity_transition(0, 1, DMatrix::identity(1, 1))], 0, KOptions::default());
        assert!(matches!(k.validate(), Err(Error::NotTransverse(_))));
    }

    #[test]
    fn morphisms_cover_group_orbits() {
        let g = Group::generate(2, 1, vec![GroupElement { lin: rot(std::f64::consts::PI), shift: DVector::zeros(2), v_act: DMatrix::identity(1, 1) }], 2).unwrap();
        let k = Kcat::new(vec![plane_chart("c", "z^2", g)], vec![], 0, KOptions::default());
        let f = k.fiber(0, &[0.5, 0.25]);
        assert_eq!(f.len(), 2);
        assert!(f.iter().any(|m| dist(&m.x, &[-0.5, -0.25]) < 1e-15));
    }

    #[test]
    fn cutoffs_and_metric_for_dbar_z() {
        let k = Kcat::new(vec![plane_chart("c", "z", Group::trivial(2, 1))], vec![], 0, KOptions::default());
        let cut = k.choose_cutoffs().unwrap();
        assert_eq!(cut.rho(0, 0, &[0.0, 0.0]), 1.0);
        assert!(cut.rho(0, 0, &[1.9, 0.0]) < 0.0);
        let m = k.choose_metric(&cut).unwrap();
        k.verify_metric(&cut, &m).unwrap();
        // a uniform ρ = 1 on |z| < 2 lets the scale drop to 1/2
        let wide = Cutoffs { cores: Arc::new(vec![vec![(0, vec![0.0, 0.0], 1e6)]]) };
        let half = MetricChoice { sigma: vec![0.5], global: 0.5, factor_weights: None };
        assert!(k.verify_metric(&wide, &half).is_ok());
    }

    #[test]
    fn empty_hol_set_gives_minus_one_cutoffs_and_2_over_c_metric() {
        let k = Kcat::new(vec![plane_chart("c", "z + 5", Group::trivial(2, 1))], vec![], 0, KOptions::default());
        let cut = k.choose_cutoffs().unwrap();
        assert!(cut.is_empty(0));
        assert_eq!(cut.rho(0, 0, &[0.0, 0.0]), -1.0);
        let m = k.choose_metric(&cut).unwrap();
        // min |z + 5| over the F grid is close to 3
        assert!((m.sigma[0] - 2.0 / 3.0).abs() < 0.02);
        k.verify_metric(&cut, &m).unwrap();
    }

    #[test]
    fn vanishing_dbar_off_the_cutoffs_cannot_be_scaled() {
        let k = Kcat::new(vec![plane_chart("c", "z", Group::trivial(2, 1))], vec![], 0, KOptions::default());
        let none = Cutoffs { cores: Arc::new(vec![vec![]]) };
        assert!(matches!(k.choose_metric(&none), Err(Error::CannotScale(_))));
    }

    #[test]
    fn smooth_sign_threshold() {
        assert_eq!(smooth_sign(0.0), 0.0);
        assert_eq!(smooth_sign(1.0), 1.0);
        assert_eq!(smooth_sign(-1.0), -1.0);
        // S(t) > 1/2 exactly when t > 0.28113
        assert!(smooth_sign(0.2812) > 0.5 && smooth_sign(0.2810) < 0.5);
    }
    fn z2_rot() -> Group {
        Group::generate(2, 1, vec![GroupElement { lin: rot(std::f64::consts::PI), shift: DVector::zeros(2), v_act: DMatrix::identity(1, 1) }], 2).unwrap()
    }

    #[test]
    fn weak_product_of_single_charts() {
        let coarse = KOptions { grid: 3.0, ..KOptions::default() };
        let a = Kcat::new(vec![plane_chart("a", "z - 0.3", Group::trivial(2, 1))], vec![], 0, coarse.clone());
        let b = Kcat::new(vec![plane_chart("b", "z^2", z2_rot())], vec![], 0, coarse.clone());
        let k = weak_product(&a, &b, None, coarse.clone()).unwrap();
        assert_eq!((k.charts.len(), k.charts[0].dim(), k.charts[0].rank, k.charts[0].group.order()), (1, 4, 2, 2));
        k.validate().unwrap();
        let s = k.charts[0].dbar_at(0, &[0.3, 0.0, 0.5, 0.0]);
        assert!(s.v[0].norm() < 1e-15 && (s.v[1] - C64::new(0.25, 0.0)).norm() < 1e-15);
        let hol = k.hol_points(0, &k.charts[0].f);
        assert_eq!(hol.len(), 1);
        let cut = k.choose_cutoffs().unwrap();
        let (ca, cb) = (a.choose_cutoffs().unwrap(), b.choose_cutoffs().unwrap());
        let metric = weak_product_metric(&k, &cut, &a.choose_metric(&ca).unwrap(), 1, &b.choose_metric(&cb).unwrap(), 1).unwrap();
        assert!(metric.factor_weights.is_some());
        let far = Region::ball(vec![1.5, 0.0, 1.5, 0.0], 0.2);
        assert!(matches!(weak_product(&a, &b, Some(vec![far]), coarse), Err(Error::NotCovering(_))));
    }

    #[test]
    fn pullback_dimensions() {
        let mut c = plane_chart("c", "z - 0.2", Group::trivial(2, 1));
        c.base = AffineMap { p: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), q: DVector::zeros(1) };
        let k = Kcat::new(vec![c], vec![], 1, KOptions::default());
        // inclusion of the point 0.2: the slice x = 0.2, a line
        let incl = AffineMap { p: DMatrix::zeros(1, 0), q: DVector::from_element(1, 0.2) };
        let p = pullback_kuranishi(&k, &incl, &Region::Inter(vec![])).unwrap().k;
        assert_eq!((p.charts[0].dim(), p.base_dim), (1, 0));
        // the zero of z − 0.2 lies on the slice
        assert_eq!(p.hol_points(0, &p.charts[0].f).len(), 1);
        // pulling back along a projection R^2 → R adds a factor
        let proj = AffineMap { p: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), q: DVector::zeros(1) };
        let zbox = Region::Box { u: vec![(-3.0, 3.0), (-1.0, 1.0)], r: vec![] };
        let p = pullback_kuranishi(&k, &proj, &zbox).unwrap().k;
        assert_eq!((p.charts[0].dim(), p.base_dim), (3, 2));
        // a constant map into a chart with a constant base map is not transverse
        let mut c = plane_chart("c", "z", Group::trivial(2, 1));
        c.base = AffineMap { p: DMatrix::zeros(1, 2), q: DVector::zeros(1) };
        let k = Kcat::new(vec![c], vec![], 1, KOptions::default());
        assert!(matches!(pullback_kuranishi(&k, &incl, &Region::Inter(vec![])), Err(Error::NotSubmersion(_))));
    }
}
