//! Sheaves on a Kuranishi category and the inductive construction of global sections.
//!
//! A section is evaluated lazily at `(chart, vertex, x)`. Chart `j` of the output is
//! built at step `j` by blending, over a candidate from the sheaf's extension, every
//! value that the already-fixed data forces at `x`, and then averaging over `G_j`.
//! The blend weights come from the shrink schedule and are 1 exactly where the
//! compatibility has to hold, so agreeing inputs reproduce themselves.

use crate::charts::{dist, Region};
use crate::error::{Error, Result};
use crate::kcat::{pinv, Kcat, Morph};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use std::fmt;
use std::sync::Arc;

/// `(chart, vertex, x) ↦ value`.
pub type ChartFn<V> = Arc<dyn Fn(usize, usize, &[f64]) -> V + Send + Sync>;

pub trait Sheaf: Send + Sync {
    type Val: Clone + fmt::Debug + PartialEq + Send + Sync;

    fn name(&self) -> &'static str;
    /// Value at the source of a morphism, from the value at its target; `t` maps the
    /// source bundle into the target bundle.
    fn restrict(&self, t: &DMatrix<C64>, v: &Self::Val) -> Self::Val;
    /// A value at the target restricting to `v` at the source.
    fn push(&self, t: &DMatrix<C64>, v: &Self::Val) -> Self::Val;
    /// `w = 0` returns `a` and `w = 1` returns `b`, both exactly.
    fn blend(&self, a: &Self::Val, b: &Self::Val, w: f64) -> Self::Val;
    fn average(&self, vals: &[Self::Val]) -> Self::Val;
    fn dist(&self, a: &Self::Val, b: &Self::Val) -> f64;
    fn size(&self, v: &Self::Val) -> f64;
    /// Some local section, used where nothing is forced.
    fn extension(&self, k: &Kcat, chart: usize, vertex: usize, x: &[f64]) -> Self::Val;
}

fn exact_blend<V: Clone>(a: &V, b: &V, w: f64, mix: impl FnOnce(f64) -> V) -> V {
    if w >= 1.0 {
        b.clone()
    } else if w <= 0.0 {
        a.clone()
    } else {
        mix(w)
    }
}

/// Real-valued functions; restriction is composition.
#[derive(Clone, Copy, Debug, Default)]
pub struct FunctionSheaf;

impl Sheaf for FunctionSheaf {
    type Val = f64;

    fn name(&self) -> &'static str {
        "functions"
    }
    fn restrict(&self, _t: &DMatrix<C64>, v: &f64) -> f64 {
        *v
    }
    fn push(&self, _t: &DMatrix<C64>, v: &f64) -> f64 {
        *v
    }
    fn blend(&self, a: &f64, b: &f64, w: f64) -> f64 {
        exact_blend(a, b, w, |w| (1.0 - w) * a + w * b)
    }
    fn average(&self, vals: &[f64]) -> f64 {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
    fn dist(&self, a: &f64, b: &f64) -> f64 {
        (a - b).abs()
    }
    fn size(&self, v: &f64) -> f64 {
        v.abs()
    }
    fn extension(&self, _k: &Kcat, _chart: usize, _vertex: usize, _x: &[f64]) -> f64 {
        0.0
    }
}

/// Hermitian metrics on the obstruction bundles. Pushing along a proper inclusion fills
/// the orthogonal complement with `sigma² I`.
#[derive(Clone, Copy, Debug)]
pub struct MetricSheaf {
    pub sigma: f64,
}

impl Sheaf for MetricSheaf {
    type Val = DMatrix<C64>;

    fn name(&self) -> &'static str {
        "metrics"
    }
    fn restrict(&self, t: &DMatrix<C64>, m: &DMatrix<C64>) -> DMatrix<C64> {
        t.adjoint() * m * t
    }
    fn push(&self, t: &DMatrix<C64>, m: &DMatrix<C64>) -> DMatrix<C64> {
        if t.is_square() {
            if let Some(ti) = t.clone().try_inverse() {
                return ti.adjoint() * m * ti;
            }
        }
        let p = pinv(t);
        let d = t.nrows();
        let comp = DMatrix::<C64>::identity(d, d) - t * &p;
        p.adjoint() * m * p + comp * C64::new(self.sigma * self.sigma, 0.0)
    }
    fn blend(&self, a: &DMatrix<C64>, b: &DMatrix<C64>, w: f64) -> DMatrix<C64> {
        exact_blend(a, b, w, |w| a * C64::new(1.0 - w, 0.0) + b * C64::new(w, 0.0))
    }
    fn average(&self, vals: &[DMatrix<C64>]) -> DMatrix<C64> {
        let mut s = vals[0].clone();
        for v in &vals[1..] {
            s += v;
        }
        s / C64::new(vals.len() as f64, 0.0)
    }
    fn dist(&self, a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        (a - b).iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
    fn size(&self, v: &DMatrix<C64>) -> f64 {
        v.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
    fn extension(&self, k: &Kcat, chart: usize, _vertex: usize, _x: &[f64]) -> DMatrix<C64> {
        let d = k.charts[chart].rank;
        DMatrix::identity(d, d) * C64::new(self.sigma * self.sigma, 0.0)
    }
}

/// Sections of the obstruction bundles, with a caller-supplied local extension.
#[derive(Clone)]
pub struct VectorSheaf {
    pub local: ChartFn<Vec<C64>>,
}

impl Sheaf for VectorSheaf {
    type Val = Vec<C64>;

    fn name(&self) -> &'static str {
        "bundle sections"
    }
    fn restrict(&self, t: &DMatrix<C64>, v: &Vec<C64>) -> Vec<C64> {
        (pinv(t) * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec()
    }
    fn push(&self, t: &DMatrix<C64>, v: &Vec<C64>) -> Vec<C64> {
        (t * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec()
    }
    fn blend(&self, a: &Vec<C64>, b: &Vec<C64>, w: f64) -> Vec<C64> {
        exact_blend(a, b, w, |w| a.iter().zip(b).map(|(x, y)| x * (1.0 - w) + y * w).collect())
    }
    fn average(&self, vals: &[Vec<C64>]) -> Vec<C64> {
        let n = vals.len() as f64;
        (0..vals[0].len()).map(|i| vals.iter().map(|v| v[i]).sum::<C64>() / n).collect()
    }
    fn dist(&self, a: &Vec<C64>, b: &Vec<C64>) -> f64 {
        crate::kcat::vec_dist(a, b)
    }
    fn size(&self, v: &Vec<C64>) -> f64 {
        v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
    fn extension(&self, _k: &Kcat, chart: usize, vertex: usize, x: &[f64]) -> Vec<C64> {
        (self.local)(chart, vertex, x)
    }
}

/// Spot checks of the blend, push/restrict and averaging contracts on one chart.
pub fn self_test<S: Sheaf>(sheaf: &S, k: &Kcat, chart: usize) -> Result<()> {
    let c = &k.charts[chart];
    let fail = |detail: String| Error::AxiomViolation { step: 0, chart, detail };
    let pts = c.grid(&c.f, 2.0, 4);
    for x in pts.iter().take(8) {
        let a = sheaf.extension(k, chart, 0, x);
        let b = sheaf.push(&c.group.elements[c.group.order() - 1].v_act, &a);
        if sheaf.blend(&a, &b, 0.0) != a || sheaf.blend(&a, &b, 1.0) != b {
            return Err(fail(format!("{}: blend does not return its endpoints", sheaf.name())));
        }
        for g in &c.group.elements {
            let back = sheaf.restrict(&g.v_act, &sheaf.push(&g.v_act, &a));
            if sheaf.dist(&back, &a) > 1e-9 * (1.0 + sheaf.size(&a)) {
                return Err(fail(format!("{}: restriction does not undo extension along a group element", sheaf.name())));
            }
        }
        let avg = sheaf.average(&[a.clone(), a.clone()]);
        if sheaf.dist(&avg, &a) > 1e-12 * (1.0 + sheaf.size(&a)) {
            return Err(fail(format!("{}: averaging moves an invariant value", sheaf.name())));
        }
    }
    Ok(())
}

/// Section given on `K1♯`: `kappa` is 1 on `K1`, 0 off `K1♯`; `value` is read only
/// where `kappa > 0`.
#[derive(Clone)]
pub struct Seed<V> {
    pub kappa: ChartFn<f64>,
    pub value: ChartFn<V>,
}

impl<V: Clone + Send + Sync + 'static> Seed<V> {
    pub fn none() -> Seed<V>
    where
        V: Default,
    {
        Seed { kappa: Arc::new(|_, _, _| 0.0), value: Arc::new(|_, _, _| V::default()) }
    }
}

/// `ρ(A ⊂ B)`: 1 on the closure of `A`, 0 off `B`, continuous in between.
pub fn nesting_function(a: &Region, b: &Region, x: &[f64]) -> f64 {
    let da = a.depth(x);
    if da >= 0.0 {
        return 1.0;
    }
    let db = b.depth(x);
    if db <= 0.0 {
        return 0.0;
    }
    db / (db - da)
}

/// The nested domains `f̂_{i,j}` of the induction, with 1-based step numbers as in the
/// construction: `f̂_{i,j} = {κ_i > j/i}` for `j < i`, `{λ_i < 1}` for `j = i`, and
/// `{λ_i < 2^{-(j-i)}}` after.
#[derive(Clone)]
pub struct ShrinkSchedule {
    pub k: Arc<Kcat>,
    pub kappa: ChartFn<f64>,
}

fn clamp01(t: f64) -> f64 {
    t.clamp(0.0, 1.0)
}

impl ShrinkSchedule {
    /// 0 on `F_i`, 1 off `F♯_i`; minimized over the group orbit so it is invariant.
    pub fn lambda(&self, i: usize, x: &[f64]) -> f64 {
        let c = &self.k.charts[i];
        (0..c.group.order()).map(|g| 1.0 - nesting_function(&c.f, &c.fs, &c.act(g, x))).fold(1.0, f64::min)
    }

    /// Seed cutoff, maximized over the group orbit.
    pub fn kappa(&self, i: usize, v: usize, x: &[f64]) -> f64 {
        let c = &self.k.charts[i];
        (0..c.group.order()).map(|g| (self.kappa)(i, v, &c.act(g, x))).fold(0.0, f64::max).clamp(0.0, 1.0)
    }

    /// Membership of `x` in `f̂_{i,j}` (0-based chart index, 1-based step).
    pub fn in_domain(&self, i: usize, j: usize, v: usize, x: &[f64]) -> bool {
        let ii = i + 1;
        if j < ii {
            self.kappa(i, v, x) > j as f64 / ii as f64
        } else {
            self.lambda(i, x) < 0.5f64.powi((j - ii) as i32)
        }
    }

    /// Weight at step `j` (1-based) of the data held on chart `i` (0-based): 1 on
    /// `f̂_{i,j}` and 0 off `f̂_{i,j-1}`. For `i + 1 = j` this is the chart's own seed.
    pub fn weight(&self, i: usize, j: usize, v: usize, x: &[f64]) -> f64 {
        let ii = i + 1;
        if ii < j {
            let hi = 0.5f64.powi((j - 1 - ii) as i32);
            let lo = 0.5f64.powi((j - ii) as i32);
            clamp01((hi - self.lambda(i, x)) / (hi - lo))
        } else {
            let ii = ii as f64;
            clamp01((self.kappa(i, v, x) - (j as f64 - 1.0) / ii) * ii)
        }
    }

    /// Final domain of chart `i` after all steps.
    pub fn in_final(&self, i: usize, x: &[f64]) -> bool {
        let n = self.k.charts.len();
        self.lambda(i, x) < 0.5f64.powi((n - i - 1) as i32)
    }

    /// Samples the nesting conditions of the schedule on a grid of each `F♯_i`.
    pub fn verify(&self) -> Result<usize> {
        let n = self.k.charts.len();
        let mut count = 0;
        for (i, c) in self.k.charts.iter().enumerate() {
            for v in 0..c.n_vertices() {
                for x in c.grid(&c.fs, self.k.opts.grid, self.k.opts.max_per_axis) {
                    let fail = |d: &str| Error::AxiomViolation { step: 0, chart: i, detail: format!("shrink schedule: {d} at {x:?}") };
                    if c.f.contains(&x) && !(i + 1..=n).all(|j| self.in_domain(i, j, v, &x)) {
                        return Err(fail("F is not inside a late domain"));
                    }
                    if self.kappa(i, v, &x) > 0.0 && self.lambda(i, &x) >= 1.0 {
                        return Err(fail("K1♯ leaves F♯"));
                    }
                    for j in 1..=n {
                        if j != i + 1 && self.in_domain(i, j, v, &x) && !self.in_domain(i, j - 1, v, &x) {
                            return Err(fail("domains do not decrease"));
                        }
                    }
                    count += 1;
                }
            }
        }
        Ok(count)
    }
}

/// Forced value at `(j, y)` from a related point of another chart.
#[derive(Clone, Debug)]
pub struct Related {
    pub morph: Morph,
    /// True when the morphism goes from the related point into `(j, y)`.
    pub into: bool,
}

/// Every related point of chart `i` for `(j, y)`, excluding self-morphisms of `j`.
pub fn related_points(k: &Kcat, i: usize, j: usize, y: &[f64]) -> Vec<Related> {
    if i == j {
        return Vec::new();
    }
    let mut out: Vec<Related> = k.morphisms_from(i, j, y, false).into_iter().map(|m| Related { morph: m, into: true }).collect();
    out.extend(k.morphisms_out(j, y).into_iter().filter(|m| m.chart == i).map(|m| Related { morph: m, into: false }));
    out
}

#[derive(Clone, Debug, Default)]
pub struct SectionOptions {
    /// Skip the group averaging (the lifted branched sheaf supplies its own).
    pub no_average: bool,
}

/// A global section produced by the induction, evaluated lazily.
#[derive(Clone)]
pub struct GlobalSection<S: Sheaf> {
    pub k: Arc<Kcat>,
    pub sheaf: Arc<S>,
    pub schedule: ShrinkSchedule,
    pub seed: Seed<S::Val>,
    pub opts: SectionOptions,
}

/// Runs the induction. Evaluation is lazy; call [`GlobalSection::verify`] to sample
/// the compatibility and seed conditions.
pub fn global_section<S: Sheaf>(k: Arc<Kcat>, sheaf: Arc<S>, seed: Seed<S::Val>, opts: SectionOptions) -> Result<GlobalSection<S>> {
    for i in 0..k.charts.len() {
        self_test(sheaf.as_ref(), &k, i)?;
    }
    let schedule = ShrinkSchedule { k: k.clone(), kappa: seed.kappa.clone() };
    schedule.verify()?;
    Ok(GlobalSection { k, sheaf, schedule, seed, opts })
}

impl<S: Sheaf> GlobalSection<S> {
    /// Data held on chart `i` just before step `j` (1-based).
    fn held(&self, i: usize, j: usize, v: usize, x: &[f64]) -> S::Val {
        if i + 1 < j {
            self.eval(i, v, x)
        } else {
            (self.seed.value)(i, v, x)
        }
    }

    /// Candidate at step `j + 1` before averaging.
    fn candidate(&self, j: usize, v: usize, y: &[f64]) -> S::Val {
        let step = j + 1;
        let sh = self.sheaf.as_ref();
        let mut val = sh.extension(&self.k, j, v, y);
        for i in 0..self.k.charts.len() {
            if i == j {
                continue;
            }
            for r in related_points(&self.k, i, j, y) {
                let w = self.schedule.weight(i, step, v, &r.morph.x);
                if w <= 0.0 {
                    continue;
                }
                let held = self.held(i, step, v, &r.morph.x);
                let forced = if r.into { sh.push(&r.morph.t, &held) } else { sh.restrict(&r.morph.t, &held) };
                val = sh.blend(&val, &forced, w);
            }
        }
        self.with_own_seed(j, v, y, val)
    }

    fn with_own_seed(&self, j: usize, v: usize, y: &[f64], val: S::Val) -> S::Val {
        let w = self.schedule.weight(j, j + 1, v, y);
        if w <= 0.0 {
            return val;
        }
        self.sheaf.blend(&val, &(self.seed.value)(j, v, y), w)
    }

    /// Value of the output section on chart `j` at `y`.
    pub fn eval(&self, j: usize, v: usize, y: &[f64]) -> S::Val {
        let c = &self.k.charts[j];
        if self.opts.no_average || c.group.is_trivial() {
            return self.candidate(j, v, y);
        }
        let vals: Vec<S::Val> = (0..c.group.order())
            .map(|g| {
                let yg = c.act(c.group.inv(g), y);
                self.sheaf.push(&c.group.elements[g].v_act, &self.candidate(j, v, &yg))
            })
            .collect();
        let avg = if vals.iter().all(|a| *a == vals[0]) { vals[0].clone() } else { self.sheaf.average(&vals) };
        self.with_own_seed(j, v, y, avg)
    }

    /// Samples compatibility along every morphism between final domains, group
    /// invariance, and exact agreement with the seed on `K1`.
    pub fn verify(&self, tol: f64) -> Result<SectionReport> {
        let sh = self.sheaf.as_ref();
        let n = self.k.charts.len();
        let mut rep = SectionReport::default();
        for (j, c) in self.k.charts.iter().enumerate() {
            for v in 0..c.n_vertices() {
                for y in c.grid(&c.fs, self.k.opts.grid, self.k.opts.max_per_axis) {
                    if !self.schedule.in_final(j, &y) {
                        continue;
                    }
                    let val = self.eval(j, v, &y);
                    let scale = 1.0 + sh.size(&val);
                    rep.points += 1;
                    if self.schedule.kappa(j, v, &y) >= 1.0 {
                        rep.seed_points += 1;
                        if val != (self.seed.value)(j, v, &y) {
                            return Err(Error::AxiomViolation { step: n, chart: j, detail: format!("output differs from the seed on K1 at {y:?}") });
                        }
                    }
                    for i in 0..n {
                        let rel: Vec<Related> = if i == j {
                            self.k.morphisms_from(j, j, &y, false).into_iter().map(|m| Related { morph: m, into: true }).collect()
                        } else {
                            related_points(&self.k, i, j, &y)
                        };
                        for r in rel {
                            if !self.schedule.in_final(i, &r.morph.x) {
                                continue;
                            }
                            let other = self.eval(i, v, &r.morph.x);
                            let d = if r.into { sh.dist(&sh.restrict(&r.morph.t, &val), &other) } else { sh.dist(&sh.restrict(&r.morph.t, &other), &val) };
                            rep.pairs += 1;
                            rep.max_mismatch = rep.max_mismatch.max(d / scale);
                            if d > tol * scale {
                                return Err(Error::AxiomViolation {
                                    step: n,
                                    chart: j,
                                    detail: format!("{} section not compatible with chart {i} at {y:?} (mismatch {d:.3e})", sh.name()),
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(rep)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SectionReport {
    pub points: usize,
    pub pairs: usize,
    pub seed_points: usize,
    pub max_mismatch: f64,
}

/// Seed given by `value` on `F♯` of one chart, transported to every related point.
pub fn chart_seed_in<S: Sheaf + 'static>(k: Arc<Kcat>, sheaf: Arc<S>, chart: usize, value: ChartFn<S::Val>) -> Seed<S::Val>
where
    S::Val: Default,
{
    let kk = k.clone();
    let kappa: ChartFn<f64> = Arc::new(move |j, _v, x| {
        let c = &kk.charts[chart];
        let own = |x: &[f64]| nesting_function(&c.f, &c.fs, x);
        if j == chart {
            own(x)
        } else {
            related_points(&kk, chart, j, x).iter().map(|r| own(&r.morph.x)).fold(0.0, f64::max)
        }
    });
    let value: ChartFn<S::Val> = Arc::new(move |j, v, x| {
        if j == chart {
            return value(j, v, x);
        }
        let c = &k.charts[chart];
        let rel = related_points(&k, chart, j, x);
        match rel.iter().find(|r| c.fs.contains(&r.morph.x)) {
            Some(r) => {
                let held = value(chart, v, &r.morph.x);
                if r.into {
                    sheaf.push(&r.morph.t, &held)
                } else {
                    sheaf.restrict(&r.morph.t, &held)
                }
            }
            None => S::Val::default(),
        }
    });
    Seed { kappa, value }
}

/// Seed built from a function on one chart, transported to every related point.
pub fn chart_seed(k: Arc<Kcat>, chart: usize, rho: ChartFn<f64>) -> Seed<f64> {
    chart_seed_in(k, Arc::new(FunctionSheaf), chart, rho)
}

/// Extends a function given on `F♯` of one chart to the whole category, keeping the
/// support inside `support`.
pub fn extend_function(k: Arc<Kcat>, chart: usize, rho: ChartFn<f64>, support: ChartFn<bool>) -> Result<GlobalSection<FunctionSheaf>> {
    let c = &k.charts[chart];
    for v in 0..c.n_vertices() {
        for x in c.grid(&c.fs, k.opts.grid, k.opts.max_per_axis) {
            if rho(chart, v, &x) != 0.0 && !support(chart, v, &x) {
                return Err(Error::SupportEscape(format!("function is nonzero at {x:?} of chart {}, outside the support region", c.name)));
            }
        }
    }
    let seed = chart_seed(k.clone(), chart, rho);
    let out = global_section(k.clone(), Arc::new(FunctionSheaf), seed, SectionOptions::default())?;
    for (j, cj) in k.charts.iter().enumerate() {
        for v in 0..cj.n_vertices() {
            for y in cj.grid(&cj.fs, k.opts.grid, k.opts.max_per_axis) {
                if out.schedule.in_final(j, &y) && out.eval(j, v, &y) != 0.0 && !support(j, v, &y) {
                    return Err(Error::SupportEscape(format!("extension is nonzero at {y:?} of chart {}", cj.name)));
                }
            }
        }
    }
    Ok(out)
}

/// Nonnegative function vanishing exactly where `signed ≥ 0`.
pub fn vanishing_function(signed: ChartFn<f64>) -> ChartFn<f64> {
    Arc::new(move |j, v, x| {
        let s = signed(j, v, x);
        if s >= 0.0 {
            0.0
        } else {
            s * s
        }
    })
}

/// Signed distance-like function of a point: `≥ 0` only at the point.
pub fn point_indicator(chart: usize, p: Vec<f64>) -> ChartFn<f64> {
    Arc::new(move |j, _v, x| if j == chart { -dist(x, &p) } else { -1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::ExplodedChart;
    use crate::charts::JacFn;
    use crate::expr::{Expr, Layout};
    use crate::kcat::{section_from_exprs, AffineMap, Group, GroupElement, KChart, KOptions, Transition};
    use nalgebra::DVector;

    fn chart(name: &str, dbar: &str, group: Group, f: f64, fs: f64) -> KChart {
        let l = Layout { n: 2, m: 0 };
        let ball = |r: f64| Region::ball(vec![0.0, 0.0], r);
        KChart {
            name: name.into(),
            chart: ExplodedChart::smooth(2, ball(fs)),
            f: ball(f),
            f1: ball((f + fs) / 2.0),
            fs: ball(fs),
            u: ball(fs),
            group,
            rank: 1,
            dbar: section_from_exprs(vec![Expr::parse(dbar, l).unwrap()]),
            dbar_src: vec![dbar.into()],
            base: AffineMap::to_point(2),
        }
    }

    fn z2() -> Group {
        let g = GroupElement { lin: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]), shift: DVector::zeros(2), v_act: DMatrix::identity(1, 1) };
        Group::generate(2, 1, vec![g], 2).unwrap()
    }

    /// Chart 0 is the disc |x| < 1.5, chart 1 a Z/2 chart with x = w² - 1.5.
    fn two_charts() -> Arc<Kcat> {
        let c0 = chart("x", "z", Group::trivial(2, 1), 1.2, 1.5);
        let c1 = chart("w", "z^2 - 1.5", z2(), 0.8, 1.2f64.sqrt());
        let phi: JacFn = Arc::new(|x: &[f64]| {
            let s = C64::new(x[0] + 1.5, x[1]).sqrt();
            let d = 0.5 / s;
            (vec![s.re, s.im], vec![vec![d.re, -d.im], vec![d.im, d.re]])
        });
        let psi: JacFn = Arc::new(|w: &[f64]| {
            let z = C64::new(w[0], w[1]);
            let x = z * z - 1.5;
            let d = 2.0 * z;
            (vec![x.re, x.im], vec![vec![d.re, -d.im], vec![d.im, d.re]])
        });
        let t = Transition { a: 0, b: 1, domain: Region::ball(vec![-1.5, 0.0], 1.2), phi, psi: Some(psi), iota: DMatrix::identity(1, 1) };
        let k = Kcat::new(vec![c0, c1], vec![t], 0, KOptions { grid: 8.0, ..KOptions::default() });
        k.validate().unwrap();
        Arc::new(k)
    }

    fn x_of(j: usize, x: &[f64]) -> C64 {
        let z = C64::new(x[0], x[1]);
        if j == 0 {
            z
        } else {
            z * z - 1.5
        }
    }

    #[test]
    fn one_chart_blend_matches_direct_formula() {
        let k = Arc::new(Kcat::new(vec![chart("c", "z", Group::trivial(2, 1), 1.0, 2.0)], vec![], 0, KOptions { grid: 8.0, ..KOptions::default() }));
        let inner = Region::ball(vec![0.0, 0.0], 0.5);
        let outer = Region::ball(vec![0.0, 0.0], 1.0);
        let (i2, o2) = (inner.clone(), outer.clone());
        let seed = Seed { kappa: Arc::new(move |_, _, x: &[f64]| nesting_function(&i2, &o2, x)), value: Arc::new(|_, _, x: &[f64]| 3.0 + x[0]) };
        let s = global_section(k.clone(), Arc::new(FunctionSheaf), seed, SectionOptions::default()).unwrap();
        for x in [[0.1, 0.2], [0.7, 0.0], [1.5, 0.1]] {
            let kap = nesting_function(&inner, &outer, &x);
            let expect = kap * (3.0 + x[0]);
            assert!((s.eval(0, 0, &x) - expect).abs() < 1e-15);
        }
        assert_eq!(s.eval(0, 0, &[0.1, 0.2]), 3.1);
        s.verify(1e-9).unwrap();
    }

    #[test]
    fn functions_on_a_z2_pair_are_compatible_and_invariant() {
        let k = two_charts();
        let kappa: ChartFn<f64> = Arc::new(|j, _, x: &[f64]| (2.0 * (0.5 - (x_of(j, x) + 0.9).norm()) / 0.5).clamp(0.0, 1.0));
        let value: ChartFn<f64> = Arc::new(|j, _, x: &[f64]| {
            let p = x_of(j, x);
            p.re + 2.0 * p.im * p.im
        });
        let s = global_section(k, Arc::new(FunctionSheaf), Seed { kappa, value }, SectionOptions::default()).unwrap();
        let rep = s.verify(1e-9).unwrap();
        assert!(rep.seed_points > 0 && rep.pairs > rep.points);
        let w = [0.3, 0.4];
        assert_eq!(s.eval(1, 0, &w), s.eval(1, 0, &[-0.3, -0.4]));
    }

    #[test]
    fn metrics_are_compatible() {
        let k = two_charts();
        let kappa: ChartFn<f64> = Arc::new(|j, _, x: &[f64]| (2.0 * (0.5 - (x_of(j, x) + 0.9).norm()) / 0.5).clamp(0.0, 1.0));
        let value: ChartFn<DMatrix<C64>> = Arc::new(|j, _, x: &[f64]| DMatrix::from_element(1, 1, C64::new(1.0 + x_of(j, x).norm_sqr(), 0.0)));
        let s = global_section(k, Arc::new(MetricSheaf { sigma: 1.0 }), Seed { kappa, value }, SectionOptions::default()).unwrap();
        s.verify(1e-9).unwrap();
    }

    #[test]
    fn metric_seed_on_one_chart_extends() {
        let k = two_charts();
        let sheaf = Arc::new(MetricSheaf { sigma: 1.0 });
        let m: ChartFn<DMatrix<C64>> = Arc::new(|_, _, x: &[f64]| DMatrix::from_element(1, 1, C64::new(1.0 + x[0] * x[0] + 0.5 * x[1], 0.0)));
        let seed = chart_seed_in(k.clone(), sheaf.clone(), 0, m.clone());
        let s = global_section(k, sheaf, seed, SectionOptions::default()).unwrap();
        let rep = s.verify(1e-9).unwrap();
        assert!(rep.seed_points > 0);
        assert_eq!(s.eval(0, 0, &[0.3, -0.2]), m(0, 0, &[0.3, -0.2]));
    }

    #[test]
    fn incompatible_seed_is_caught() {
        let k = two_charts();
        let kappa: ChartFn<f64> = Arc::new(|j, _, x: &[f64]| (2.0 * (0.5 - (x_of(j, x) + 0.9).norm()) / 0.5).clamp(0.0, 1.0));
        let value: ChartFn<f64> = Arc::new(|j, _, _x: &[f64]| j as f64);
        let s = global_section(k, Arc::new(FunctionSheaf), Seed { kappa, value }, SectionOptions::default()).unwrap();
        assert!(matches!(s.verify(1e-9), Err(Error::AxiomViolation { .. })));
    }

    #[test]
    fn extend_function_pulls_back_and_respects_support() {
        let k = two_charts();
        let bump: ChartFn<f64> = Arc::new(|_, _, x: &[f64]| (0.25 - (x[0] + 0.9).powi(2) - x[1] * x[1]).max(0.0));
        let sup: ChartFn<bool> = Arc::new(|j, _, x: &[f64]| (x_of(j, x) + 0.9).norm() < 0.6);
        let f = extend_function(k.clone(), 0, bump.clone(), sup).unwrap();
        f.verify(1e-9).unwrap();
        // a point of chart 1 over x = -1.0
        let w = C64::new(0.5, 0.0).sqrt();
        assert!((f.eval(1, 0, &[w.re, w.im]) - 0.24).abs() < 1e-12);
        let tight: ChartFn<bool> = Arc::new(|j, _, x: &[f64]| (x_of(j, x) + 0.9).norm() < 0.3);
        assert!(matches!(extend_function(k, 0, bump, tight), Err(Error::SupportEscape(_))));
    }

    #[test]
    fn zero_function_extends_to_zero() {
        let k = two_charts();
        let f = extend_function(k, 0, Arc::new(|_, _, _| 0.0), Arc::new(|_, _, _| false)).unwrap();
        assert_eq!(f.eval(1, 0, &[0.2, 0.1]), 0.0);
    }

    #[test]
    fn vanishing_function_zero_set() {
        let f = vanishing_function(point_indicator(0, vec![0.5, 0.5]));
        assert_eq!(f(0, 0, &[0.5, 0.5]), 0.0);
        assert!((f(0, 0, &[0.5, 1.0]) - 0.25).abs() < 1e-15);
        let all = vanishing_function(Arc::new(|_, _, _| 1.0));
        assert_eq!(all(0, 0, &[3.0, 4.0]), 0.0);
    }
}
