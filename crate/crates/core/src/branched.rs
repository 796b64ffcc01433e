//! Weighted branched covers: finite probability spaces of branches with an equivalence
//! relation, attached to chart opens, and branched sections of a sheaf.

use crate::charts::Region;
use crate::error::{Error, Result};
use crate::kcat::{Cutoffs, Kcat};
use crate::sheaves::{ChartFn, Sheaf};
use crate::tropical::{fmt_q, q_frac, Q};
use num::{One, Zero};
use serde_json::{json, Value};
use std::sync::Arc;

/// Branches of one open: measure and equivalence classes (union-find without
/// compression; spaces are small).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpace {
    pub mu: Vec<Q>,
    parent: Vec<usize>,
}

impl BranchSpace {
    pub fn singleton() -> BranchSpace {
        BranchSpace { mu: vec![Q::one()], parent: vec![0] }
    }

    /// `n` branches of weight `1/n`; all equivalent unless `discrete`.
    pub fn uniform(n: usize, discrete: bool) -> BranchSpace {
        let mu = vec![q_frac(1, n as i64); n];
        let parent = if discrete { (0..n).collect() } else { vec![0; n] };
        BranchSpace { mu, parent }
    }

    /// Branches with the given weights, pairwise separated.
    pub fn discrete(mu: Vec<Q>) -> BranchSpace {
        let parent = (0..mu.len()).collect();
        BranchSpace { mu, parent }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn find(&self, mut i: usize) -> usize {
        while self.parent[i] != i {
            i = self.parent[i];
        }
        i
    }

    pub fn equivalent(&self, i: usize, j: usize) -> bool {
        self.find(i) == self.find(j)
    }

    pub fn union(&mut self, i: usize, j: usize) {
        let (a, b) = (self.find(i), self.find(j));
        if a != b {
            self.parent[a.max(b)] = a.min(b);
        }
    }

    pub fn total(&self) -> Q {
        self.mu.iter().fold(Q::zero(), |s, m| s + m)
    }

    /// Positive rational weights summing to exactly 1.
    pub fn is_probability(&self) -> bool {
        !self.mu.is_empty() && self.mu.iter().all(|m| *m > Q::zero()) && self.total() == Q::one()
    }

    /// Product space, index `i * other.len() + j`; separated iff separated in some factor.
    pub fn product(&self, other: &BranchSpace) -> BranchSpace {
        let n2 = other.len();
        let mut out = BranchSpace { mu: Vec::with_capacity(self.len() * n2), parent: Vec::with_capacity(self.len() * n2) };
        for i in 0..self.len() {
            for j in 0..n2 {
                out.mu.push(&self.mu[i] * &other.mu[j]);
                out.parent.push(i * n2 + j);
            }
        }
        for a in 0..out.len() {
            for b in 0..a {
                if self.equivalent(a / n2, b / n2) && other.equivalent(a % n2, b % n2) {
                    out.union(a, b);
                }
            }
        }
        out
    }

    pub fn classes(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        let mut roots: Vec<usize> = Vec::new();
        for i in 0..self.len() {
            let r = self.find(i);
            match roots.iter().position(|&x| x == r) {
                Some(p) => out[p].push(i),
                None => {
                    roots.push(r);
                    out.push(vec![i]);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Value {
        json!({
            "mu": self.mu.iter().map(fmt_q).collect::<Vec<_>>(),
            "classes": self.classes(),
        })
    }
}

/// Branch map `I(O₂) → I(O₁)` induced by a morphism `O₁ → O₂`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pullback {
    pub map: Vec<usize>,
}

impl Pullback {
    /// Preimage sums of `mu₂` equal `mu₁`, exactly.
    pub fn preserves_measure(&self, target: &BranchSpace, source: &BranchSpace) -> bool {
        (0..source.len()).all(|j| {
            let pre = self.map.iter().enumerate().filter(|(_, &m)| m == j).fold(Q::zero(), |s, (i, _)| s + &target.mu[i]);
            pre == source.mu[j]
        })
    }

    /// `i ≡ j` whenever their pullbacks are equivalent.
    pub fn reflects_equivalence(&self, target: &BranchSpace, source: &BranchSpace) -> bool {
        let n = target.len();
        (0..n).all(|i| (0..n).all(|j| !source.equivalent(self.map[i], self.map[j]) || target.equivalent(i, j)))
    }
}

/// An open subset of one chart.
#[derive(Clone, Debug)]
pub struct ChartOpen {
    pub chart: usize,
    pub vertex: usize,
    pub region: Region,
}

pub trait WbCover: Send + Sync {
    fn branches(&self, o: &ChartOpen) -> Result<BranchSpace>;
    /// Pullback along `x ↦ g·x` from `o1` into `o2` (`g = 0` for an inclusion).
    fn pullback(&self, o1: &ChartOpen, o2: &ChartOpen, g: usize) -> Result<Pullback>;
}

/// The cover with one branch everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrivialCover;

impl WbCover for TrivialCover {
    fn branches(&self, _o: &ChartOpen) -> Result<BranchSpace> {
        Ok(BranchSpace::singleton())
    }
    fn pullback(&self, _o1: &ChartOpen, _o2: &ChartOpen, _g: usize) -> Result<Pullback> {
        Ok(Pullback { map: vec![0] })
    }
}

/// Sections of the `G_i`-fold cover over opens of chart `i` meeting the closure of
/// `U' = {ρ_i > 1/2}` inside `U = {ρ_i > ε}`; one branch over opens missing it.
#[derive(Clone)]
pub struct PerChartCover {
    pub k: Arc<Kcat>,
    pub cut: Cutoffs,
    pub chart: usize,
    pub eps: f64,
    /// Sample density for open classification.
    pub per_unit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpenKind {
    Misses,
    Straddles,
    Inside,
}

impl PerChartCover {
    pub fn new(k: Arc<Kcat>, cut: Cutoffs, chart: usize, eps: f64) -> Result<PerChartCover> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::BadNesting(format!("U' = {{ρ > 1/2}} must lie compactly in U = {{ρ > ε}}, got ε = {eps}")));
        }
        let per_unit = 2.0 * k.opts.grid;
        Ok(PerChartCover { k, cut, chart, eps, per_unit })
    }

    fn samples(&self, o: &ChartOpen) -> Vec<Vec<f64>> {
        let c = &self.k.charts[self.chart];
        let mut pts = o.region.grid(c.chart.n, c.chart.m, self.per_unit, 64);
        if let Region::Ball { center, .. } = &o.region {
            pts.push(center.clone());
        }
        pts
    }

    pub fn classify(&self, o: &ChartOpen) -> Result<OpenKind> {
        if o.chart != self.chart {
            return Ok(OpenKind::Misses);
        }
        let pts = self.samples(o);
        let rho: Vec<f64> = pts.iter().map(|x| self.cut.rho(self.chart, o.vertex, x)).collect();
        if rho.iter().all(|&r| r < 0.5) {
            return Ok(OpenKind::Misses);
        }
        if rho.iter().any(|&r| r <= self.eps) {
            return Err(Error::BadNesting(format!("open {:?} meets the closure of U' but leaves U", o.region)));
        }
        Ok(if rho.iter().all(|&r| r > 0.5) { OpenKind::Inside } else { OpenKind::Straddles })
    }
}

impl WbCover for PerChartCover {
    fn branches(&self, o: &ChartOpen) -> Result<BranchSpace> {
        let n = self.k.charts[self.chart].group.order();
        Ok(match self.classify(o)? {
            OpenKind::Misses => BranchSpace::singleton(),
            OpenKind::Straddles => BranchSpace::uniform(n, false),
            OpenKind::Inside => BranchSpace::uniform(n, true),
        })
    }

    fn pullback(&self, o1: &ChartOpen, o2: &ChartOpen, g: usize) -> Result<Pullback> {
        let (b1, b2) = (self.branches(o1)?, self.branches(o2)?);
        if b1.len() == 1 {
            return Ok(Pullback { map: vec![0; b2.len()] });
        }
        if b2.len() == 1 {
            return Err(Error::BadNesting("morphism from an open meeting U' into one that misses it".into()));
        }
        let grp = &self.k.charts[self.chart].group;
        Ok(Pullback { map: (0..b2.len()).map(|h| grp.mul(grp.inv(g), h)).collect() })
    }
}

/// Product of covers: product spaces and product pullbacks.
pub struct ProductCover {
    pub factors: Vec<Arc<dyn WbCover>>,
}

impl WbCover for ProductCover {
    fn branches(&self, o: &ChartOpen) -> Result<BranchSpace> {
        let mut out = BranchSpace::singleton();
        for f in &self.factors {
            out = out.product(&f.branches(o)?);
        }
        Ok(out)
    }

    fn pullback(&self, o1: &ChartOpen, o2: &ChartOpen, g: usize) -> Result<Pullback> {
        let mut map = vec![0usize];
        let mut len1 = 1usize;
        for f in &self.factors {
            let p = f.pullback(o1, o2, g)?;
            let n1 = f.branches(o1)?.len();
            let mut next = Vec::with_capacity(map.len() * p.map.len());
            for &a in &map {
                for &b in &p.map {
                    next.push(a * n1 + b);
                }
            }
            map = next;
            len1 *= n1;
        }
        debug_assert!(map.iter().all(|&m| m < len1));
        Ok(Pullback { map })
    }
}

/// Whether branches `i` and `j` are separated at `x`: not equivalent over some small
/// ball around it. The ball radius is halved at most 20 times.
pub fn separated_at(cover: &dyn WbCover, chart: usize, vertex: usize, x: &[f64], r0: f64, i: usize, j: usize) -> bool {
    let mut r = r0;
    for _ in 0..=20 {
        let o = ChartOpen { chart, vertex, region: Region::ball(x.to_vec(), r) };
        if let Ok(b) = cover.branches(&o) {
            if i < b.len() && j < b.len() && !b.equivalent(i, j) {
                return true;
            }
        }
        r /= 2.0;
    }
    false
}

/// Nontrivial automorphism `g` of chart `chart` fixing `x`, used to test stabilizers.
#[derive(Clone, Debug)]
pub struct Automorphism {
    pub chart: usize,
    pub vertex: usize,
    pub x: Vec<f64>,
    pub g: usize,
}

/// True iff every branch is separated from its image under every fixture automorphism.
pub fn has_trivial_stabilizers(cover: &dyn WbCover, k: &Kcat, fixtures: &[Automorphism]) -> bool {
    for a in fixtures {
        let c = &k.charts[a.chart];
        let gx = c.act(a.g, &a.x);
        if crate::charts::dist(&gx, &a.x) > 1e-12 {
            continue;
        }
        let r0 = 0.5 * c.fs.depth(&a.x).max(1e-6);
        let mut ok = false;
        let mut r = r0;
        for _ in 0..=20 {
            let o = ChartOpen { chart: a.chart, vertex: a.vertex, region: Region::ball(a.x.clone(), r) };
            if let (Ok(b), Ok(p)) = (cover.branches(&o), cover.pullback(&o, &o, a.g)) {
                if (0..b.len()).all(|i| !b.equivalent(i, p.map[i])) {
                    ok = true;
                    break;
                }
            }
            r /= 2.0;
        }
        if !ok {
            return false;
        }
    }
    true
}

/// Collar function of a branching chart: 0 off `U'`, 1 where `ρ ≥ 1`.
pub fn collar(cut: &Cutoffs, chart: usize, vertex: usize, x: &[f64]) -> f64 {
    crate::kcat::smoothstep(2.0 * cut.rho(chart, vertex, x) - 1.0)
}

/// Branched average of a section on one chart: branch `g` is the `g`-translate of the
/// input inside `U'`, collared to the plain average outside it. The result is
/// equivariant as a branched section: `h*` sends branch `g` to branch `hg`.
pub fn branched_average<S: Sheaf + 'static>(sheaf: Arc<S>, k: Arc<Kcat>, cut: Cutoffs, chart: usize, section: ChartFn<S::Val>) -> Vec<ChartFn<S::Val>> {
    let order = k.charts[chart].group.order();
    (0..order)
        .map(|g| {
            let (sheaf, k, cut, section) = (sheaf.clone(), k.clone(), cut.clone(), section.clone());
            let f: ChartFn<S::Val> = Arc::new(move |j, v, y: &[f64]| {
                let c = &k.charts[j];
                let translate = |h: usize| sheaf.push(&c.group.elements[h].v_act, &section(j, v, &c.act(c.group.inv(h), y)));
                let vals: Vec<S::Val> = (0..order).map(translate).collect();
                let avg = sheaf.average(&vals);
                sheaf.blend(&avg, &vals[g], collar(&cut, j, v, y))
            });
            f
        })
        .collect()
}

/// Branch-by-branch blend of two branched sections, `w = 1` selecting `b`.
pub fn branched_patch<S: Sheaf + 'static>(sheaf: Arc<S>, a: &[ChartFn<S::Val>], b: &[ChartFn<S::Val>], w: ChartFn<f64>) -> Vec<ChartFn<S::Val>> {
    a.iter()
        .zip(b)
        .map(|(fa, fb)| {
            let (sheaf, fa, fb, w) = (sheaf.clone(), fa.clone(), fb.clone(), w.clone());
            let f: ChartFn<S::Val> = Arc::new(move |j, v, y: &[f64]| sheaf.blend(&fa(j, v, y), &fb(j, v, y), w(j, v, y)));
            f
        })
        .collect()
}

/// Samples a branched section on a chart: branches agree where they are not separated
/// (outside `U'`) and the family is equivariant.
pub fn check_branched_section<S: Sheaf>(sheaf: &S, k: &Kcat, cut: &Cutoffs, chart: usize, branches: &[ChartFn<S::Val>], tol: f64) -> Result<usize> {
    let c = &k.charts[chart];
    let mut n = 0;
    for v in 0..c.n_vertices() {
        for y in c.grid(&c.f, k.opts.grid, k.opts.max_per_axis) {
            let vals: Vec<S::Val> = branches.iter().map(|b| b(chart, v, &y)).collect();
            let scale = 1.0 + vals.iter().map(|x| sheaf.size(x)).fold(0.0, f64::max);
            if cut.rho(chart, v, &y) <= 0.5 {
                for w in &vals[1..] {
                    if sheaf.dist(w, &vals[0]) > tol * scale {
                        return Err(Error::AxiomViolation { step: 0, chart, detail: format!("unseparated branches differ at {y:?}") });
                    }
                }
            }
            for h in 0..c.group.order() {
                let hy = c.act(h, &y);
                for (g, val) in vals.iter().enumerate() {
                    let moved = sheaf.push(&c.group.elements[h].v_act, val);
                    let target = branches[c.group.mul(h, g)](chart, v, &hy);
                    if sheaf.dist(&moved, &target) > tol * scale {
                        return Err(Error::AxiomViolation { step: 0, chart, detail: format!("branched section is not equivariant at {y:?}") });
                    }
                }
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Exact total of `n` copies of `1/n`.
pub fn uniform_total(n: usize) -> Q {
    (0..n).fold(Q::zero(), |s, _| s + q_frac(1, n as i64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::ExplodedChart;
    use crate::expr::{Expr, Layout};
    use crate::kcat::{section_from_exprs, AffineMap, Group, GroupElement, KChart, KOptions};
    use crate::sheaves::VectorSheaf;
    use nalgebra::{DMatrix, DVector};
    use num_complex::Complex64 as C64;

    fn z2_chart(dbar: &str) -> Arc<Kcat> {
        let g = GroupElement { lin: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]), shift: DVector::zeros(2), v_act: DMatrix::identity(1, 1) };
        let ball = |r: f64| Region::ball(vec![0.0, 0.0], r);
        let c = KChart {
            name: "z2".into(),
            chart: ExplodedChart::smooth(2, ball(3.0)),
            f: ball(2.0),
            f1: ball(2.5),
            fs: ball(3.0),
            u: ball(3.0),
            group: Group::generate(2, 1, vec![g], 2).unwrap(),
            rank: 1,
            dbar: section_from_exprs(vec![Expr::parse(dbar, Layout { n: 2, m: 0 }).unwrap()]),
            dbar_src: vec![dbar.into()],
            base: AffineMap::to_point(2),
        };
        Arc::new(Kcat::new(vec![c], vec![], 0, KOptions { grid: 6.0, ..KOptions::default() }))
    }

    fn cover() -> PerChartCover {
        let k = z2_chart("z^2");
        let cut = k.choose_cutoffs().unwrap();
        PerChartCover::new(k, cut, 0, 0.1).unwrap()
    }

    fn open(c: [f64; 2], r: f64) -> ChartOpen {
        ChartOpen { chart: 0, vertex: 0, region: Region::ball(c.to_vec(), r) }
    }

    #[test]
    fn per_chart_cover_examples() {
        let cv = cover();
        let inside = cv.branches(&open([0.0, 0.0], 0.2)).unwrap();
        assert_eq!(inside.mu, vec![q_frac(1, 2), q_frac(1, 2)]);
        assert!(!inside.equivalent(0, 1) && inside.is_probability());
        // one core at 0 with margin 3.6, so ρ = 1/2 at distance ≈ 1.294
        let straddle = cv.branches(&open([1.2, 0.0], 0.3)).unwrap();
        assert_eq!(straddle.len(), 2);
        assert!(straddle.equivalent(0, 1));
        assert_eq!(cv.branches(&open([1.9, 0.0], 0.05)).unwrap().len(), 1);
        let trivial = TrivialCover.branches(&open([0.0, 0.0], 1.0)).unwrap();
        assert_eq!(trivial, BranchSpace::singleton());
    }

    #[test]
    fn pullbacks_preserve_measure_and_reflect_equivalence() {
        let cv = cover();
        let (small, big) = (open([0.0, 0.0], 0.1), open([0.1, 0.0], 0.8));
        let (bs, bb) = (cv.branches(&small).unwrap(), cv.branches(&big).unwrap());
        let p = cv.pullback(&small, &big, 0).unwrap();
        assert!(p.preserves_measure(&bb, &bs));
        assert!(p.reflects_equivalence(&bb, &bs));
        let swap = cv.pullback(&small, &small, 1).unwrap();
        assert_eq!(swap.map, vec![1, 0]);
        assert!(swap.preserves_measure(&bs, &bs));
        let far = open([1.9, 0.0], 0.05);
        let q = cv.pullback(&far, &far, 0).unwrap();
        assert!(q.preserves_measure(&cv.branches(&far).unwrap(), &cv.branches(&far).unwrap()));
    }

    #[test]
    fn product_measures_are_exact() {
        let a = BranchSpace::uniform(2, true);
        let p = a.product(&a);
        assert_eq!(p.len(), 4);
        assert!(p.mu.iter().all(|m| *m == q_frac(1, 4)));
        assert!(p.is_probability());
        let single = a.product(&BranchSpace::singleton());
        assert_eq!(single, a);
        let mixed = a.product(&BranchSpace::uniform(3, false));
        assert!(mixed.equivalent(0, 2) && !mixed.equivalent(0, 3));
        assert_eq!(uniform_total(7), Q::one());
    }

    #[test]
    fn stabilizers() {
        let cv = cover();
        let k = cv.k.clone();
        let fix = [Automorphism { chart: 0, vertex: 0, x: vec![0.0, 0.0], g: 1 }];
        assert!(has_trivial_stabilizers(&cv, &k, &fix));
        assert!(has_trivial_stabilizers(&TrivialCover, &k, &[]));
        // indiscrete everywhere: no open is ever inside U'
        struct Indiscrete;
        impl WbCover for Indiscrete {
            fn branches(&self, _o: &ChartOpen) -> Result<BranchSpace> {
                Ok(BranchSpace::uniform(2, false))
            }
            fn pullback(&self, _a: &ChartOpen, _b: &ChartOpen, g: usize) -> Result<Pullback> {
                Ok(Pullback { map: if g == 0 { vec![0, 1] } else { vec![1, 0] } })
            }
        }
        assert!(!has_trivial_stabilizers(&Indiscrete, &k, &fix));
        assert!(separated_at(&cv, 0, 0, &[0.0, 0.0], 1.0, 0, 1));
        assert!(!separated_at(&cv, 0, 0, &[1.5, 0.0], 0.3, 0, 1));
    }

    #[test]
    fn product_cover_of_two_z2_covers() {
        let cv: Arc<dyn WbCover> = Arc::new(cover());
        let pc = ProductCover { factors: vec![cv.clone(), cv] };
        let o = open([0.0, 0.0], 0.1);
        let b = pc.branches(&o).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.is_probability());
        let p = pc.pullback(&o, &o, 1).unwrap();
        assert_eq!(p.map, vec![3, 2, 1, 0]);
        assert!(p.preserves_measure(&b, &b));
    }

    #[test]
    fn branched_average_is_equivariant() {
        let k = z2_chart("z^2");
        let cut = k.choose_cutoffs().unwrap();
        let sheaf = Arc::new(VectorSheaf { local: Arc::new(|_, _, _| vec![C64::new(0.0, 0.0)]) });
        // an off-centre bump: not invariant under z ↦ -z
        let section: ChartFn<Vec<C64>> = Arc::new(|_, _, y: &[f64]| {
            let r2 = (y[0] - 0.3).powi(2) + y[1] * y[1];
            vec![C64::new(y[0] * y[0] - y[1] * y[1], 2.0 * y[0] * y[1]) + C64::new(0.01, 0.02) * (-r2).exp()]
        });
        let br = branched_average(sheaf.clone(), k.clone(), cut.clone(), 0, section.clone());
        assert_eq!(br.len(), 2);
        check_branched_section(sheaf.as_ref(), &k, &cut, 0, &br, 1e-12).unwrap();
        // inside U' the branches are the two translates and differ
        let y = [0.1, 0.05];
        assert!(crate::kcat::vec_dist(&br[0](0, 0, &y), &br[1](0, 0, &y)) > 1e-4);
        let far = [1.8, 0.0];
        assert_eq!(br[0](0, 0, &far), br[1](0, 0, &far));
    }
}
