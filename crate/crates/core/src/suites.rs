//! Invariance suites over a scenario. Each suite reports the identities it checked,
//! with both sides and the tolerance used.

use crate::charts::{Form, JacFn, Region};
use crate::error::{Error, Result};
use crate::expr::{Expr, Layout};
use crate::ext;
use crate::kcat::{pullback_kuranishi, weak_product_metric, AffineMap, KOptions, Kcat};
use crate::scenario::Scenario;
use crate::vclass::{build_virtual_class, VirtualClass};
use crate::vint::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::sync::Arc;

pub const REPORT_VERSION: u32 = 1;

/// Random forms per fixture in the Stokes suite.
pub const STOKES_FORMS: usize = 20;
/// Seeds compared by the seed suite.
pub const SEED_COUNT: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Suite {
    Counts,
    Partition,
    Stokes,
    Adjunction,
    Seed,
    WeakProduct,
    Pullback,
    Tropical,
}

impl Suite {
    pub const ALL: [Suite; 8] = [Suite::Counts, Suite::Partition, Suite::Stokes, Suite::Adjunction, Suite::Seed, Suite::WeakProduct, Suite::Pullback, Suite::Tropical];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Counts => "counts",
            Suite::Partition => "partition-independence",
            Suite::Stokes => "stokes",
            Suite::Adjunction => "adjunction",
            Suite::Seed => "seed-independence",
            Suite::WeakProduct => "weak-product",
            Suite::Pullback => "pullback",
            Suite::Tropical => "tropical-decomposition",
        }
    }

    /// Accepts the full name or its first word (`partition`, `seed`, ...).
    pub fn parse(s: &str) -> Result<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s || x.name().split('-').next() == Some(s)).ok_or_else(|| Error::Schema(format!("unknown suite {s}")))
    }

    fn default_tol(self) -> f64 {
        match self {
            Suite::Counts => 1e-8,
            Suite::Partition | Suite::Stokes | Suite::Seed | Suite::Tropical => 1e-6,
            Suite::Adjunction | Suite::WeakProduct | Suite::Pullback => 1e-5,
        }
    }
}

/// Overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub grid: Option<f64>,
    pub eps: Option<f64>,
}

impl Flags {
    fn tol(&self, suite: Suite) -> f64 {
        self.tol.unwrap_or(suite.default_tol())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Check {
        let pass = (lhs - rhs).abs() <= tol;
        Check { name: name.into(), lhs, rhs, tol, pass }
    }

    pub fn diff(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// No identity of the suite applies to the scenario.
    NotApplicable,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::NotApplicable => "not-applicable",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub note: Option<String>,
}

impl SuiteResult {
    fn new(suite: Suite) -> SuiteResult {
        SuiteResult { suite, checks: vec![], note: None }
    }

    fn skip(suite: Suite, why: impl Into<String>) -> SuiteResult {
        SuiteResult { suite, checks: vec![], note: Some(why.into()) }
    }

    fn with_note(mut self, note: impl Into<String>) -> SuiteResult {
        self.note = Some(note.into());
        self
    }

    pub fn status(&self) -> Status {
        if self.checks.is_empty() {
            Status::NotApplicable
        } else if self.checks.iter().all(|c| c.pass) {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    /// Largest `|lhs − rhs|` over the checks.
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(Check::diff).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "suite": self.suite.name(),
            "status": self.status().name(),
            "note": self.note,
            "checks": self.checks.iter().map(|c| json!({
                "name": c.name,
                "lhs": c.lhs,
                "rhs": c.rhs,
                "diff": c.diff(),
                "tol": c.tol,
                "pass": c.pass,
            })).collect::<Vec<_>>(),
        })
    }
}

/// The scenario with the command-line overrides applied.
pub fn apply_flags(s: &Scenario, f: &Flags) -> Scenario {
    let mut s = s.clone();
    if let Some(seed) = f.seed {
        s.build.seed = seed;
    }
    if let Some(eps) = f.eps {
        s.build.eps = eps;
    }
    if let Some(g) = f.grid {
        let k = &s.k;
        s.k = Arc::new(Kcat::new(k.charts.clone(), k.transitions.clone(), k.base_dim, KOptions { grid: g, ..k.opts.clone() }));
    }
    s
}

/// Cutoffs, metric and virtual class of a scenario. Weak products use the product of
/// the factor metrics.
pub fn build_class(s: &Scenario) -> Result<VirtualClass> {
    let cut = s.k.choose_cutoffs()?;
    let metric = match &s.factors {
        None => s.k.choose_metric(&cut)?,
        Some(f) => {
            let (a, b) = &**f;
            let ma = a.k.choose_metric(&a.k.choose_cutoffs()?)?;
            let mb = b.k.choose_metric(&b.k.choose_cutoffs()?)?;
            weak_product_metric(&s.k, &cut, &ma, a.k.charts[0].rank, &mb, b.k.charts[0].rank)?
        }
    };
    build_virtual_class(s.k.clone(), cut, metric, &s.build)
}

/// A scenario with its virtual class built once and shared by the suites.
pub struct Context {
    pub scenario: Scenario,
    pub vc: VirtualClass,
    pub flags: Flags,
}

impl Context {
    pub fn new(s: &Scenario, flags: &Flags) -> Result<Context> {
        let scenario = apply_flags(s, flags);
        let vc = build_class(&scenario)?;
        Ok(Context { scenario, vc, flags: flags.clone() })
    }

    fn rng(&self, salt: &str) -> ChaCha8Rng {
        // FNV-1a of the salt, so each suite draws its own stream
        let mut h: u64 = 0xcbf29ce484222325;
        for b in salt.bytes().chain(self.scenario.name.bytes()) {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.scenario.build.seed)
    }

    fn dims(&self) -> Vec<usize> {
        self.scenario.chart_dims()
    }

    fn class_dim(&self) -> Result<usize> {
        usize::try_from(self.vc.dim).map_err(|_| Error::DegreeMismatch(format!("virtual dimension {} is negative", self.vc.dim)))
    }

    /// Registry forms of the class's degree, by name.
    fn top_forms(&self) -> Result<Vec<(String, Vec<Form>)>> {
        let k = self.class_dim()?;
        Ok(self.scenario.forms.iter().filter(|(_, f)| f.first().map(|x| x.degree) == Some(k)).map(|(n, f)| (n.clone(), f.clone())).collect())
    }

    pub fn run(&self, suite: Suite) -> Result<SuiteResult> {
        match suite {
            Suite::Counts => self.counts(),
            Suite::Partition => self.partition(),
            Suite::Stokes => self.stokes(STOKES_FORMS),
            Suite::Adjunction => self.adjunction(),
            Suite::Seed => self.seeds(SEED_COUNT),
            Suite::WeakProduct => self.weak_product(),
            Suite::Pullback => self.pullback(),
            Suite::Tropical => self.tropical(&[]),
        }
    }

    fn integral(&self, forms: &[Form], shape: PartitionShape) -> Result<f64> {
        let part = Partition::new(self.vc.k.clone(), self.vc.cut.clone(), self.vc.eps, shape)?;
        integrate_vclass(&self.vc, forms, &part)
    }

    pub fn counts(&self) -> Result<SuiteResult> {
        let tol = self.flags.tol(Suite::Counts);
        let mut out = SuiteResult::new(Suite::Counts);
        for (name, want) in &self.scenario.expect {
            let got = self.integral(self.scenario.form(name)?, PartitionShape::Quintic)?;
            out.checks.push(Check::new(format!("integral of {name}"), got, *want, tol));
        }
        if out.checks.is_empty() {
            return Ok(SuiteResult::skip(Suite::Counts, "scenario lists no expected integrals"));
        }
        Ok(out)
    }

    pub fn partition(&self) -> Result<SuiteResult> {
        let tol = self.flags.tol(Suite::Partition);
        let mut out = SuiteResult::new(Suite::Partition);
        for (name, forms) in self.top_forms()? {
            let a = self.integral(&forms, PartitionShape::Quintic)?;
            let b = self.integral(&forms, PartitionShape::Septic)?;
            out.checks.push(Check::new(format!("integral of {name}: quintic vs septic partition"), a, b, tol));
        }
        if out.checks.is_empty() {
            return Ok(SuiteResult::skip(Suite::Partition, "no form of the class's degree"));
        }
        Ok(out)
    }

    /// `∫_[K] dθ = 0` for random compactly supported θ centred on the class.
    pub fn stokes(&self, count: usize) -> Result<SuiteResult> {
        let k = self.class_dim()?;
        if k == 0 {
            return Ok(SuiteResult::skip(Suite::Stokes, "class is 0-dimensional: there are no (-1)-forms"));
        }
        let tol = self.flags.tol(Suite::Stokes);
        let cls = ClassNodes::of(&self.vc)?;
        let nodes: Vec<(usize, &[f64])> = cls.sets.iter().flat_map(|s| s.nodes.iter().map(move |q| (s.chart, q.x.as_slice()))).collect();
        if nodes.is_empty() {
            return Ok(SuiteResult::skip(Suite::Stokes, "class has no quadrature nodes"));
        }
        let part = Partition::new(self.vc.k.clone(), self.vc.cut.clone(), self.vc.eps, PartitionShape::Quintic)?;
        let shared = shared_coordinates(&self.scenario.k);
        let target = self.scenario.target.as_ref();
        let (how, src_layout) = if shared {
            let c = &self.scenario.k.charts[0];
            ("chart coordinates", Layout { n: c.chart.n, m: c.chart.m })
        } else if let Some(t) = target.filter(|t| t.dim + 1 >= k) {
            ("pulled back from the target", Layout { n: t.dim, m: 0 })
        } else {
            return Ok(SuiteResult::skip(Suite::Stokes, "charts share no coordinates and the target is too small"));
        };
        let mut rng = self.rng("stokes");
        let mut out = SuiteResult::new(Suite::Stokes);
        for i in 0..count {
            let (chart, x) = nodes[rng.gen_range(0..nodes.len())];
            let center = if shared { x.to_vec() } else { (target.unwrap().maps[chart])(x).0 };
            let radius = rng.gen_range(0.8..1.6);
            let theta = random_bump_form(&mut rng, src_layout, k - 1, &center, radius)?;
            let dtheta = theta.d()?;
            let per_chart: Vec<Form> = if shared {
                vec![dtheta; self.scenario.k.charts.len()]
            } else {
                let t = target.unwrap();
                t.maps.iter().zip(self.dims()).map(|(m, n)| dtheta.pullback(n, m.clone())).collect::<Result<_>>()?
            };
            let v = integrate_nodes(&cls, &per_chart, &part.as_fn())?;
            out.checks.push(Check::new(format!("form {i}"), v, 0.0, tol));
        }
        Ok(out.with_note(format!("{count} random {}-forms in {how}", k - 1)))
    }

    /// Random closed `k`-forms on the target: constants, top-degree bumps, or exact.
    fn closed_target_forms(&self, rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<Form>> {
        let k = self.class_dim()?;
        let t = self.scenario.target.as_ref().ok_or_else(|| Error::Schema("scenario has no target".into()))?;
        let d = t.dim;
        let lay = Layout { n: d, m: 0 };
        (0..count)
            .map(|_| {
                let center: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if k == 0 {
                    Ok(Form::constant(d, rng.gen_range(0.5..2.0)))
                } else if k == d {
                    gaussian_form(rng, lay, d, &center)
                } else {
                    gaussian_form(rng, lay, k - 1, &center)?.d()
                }
            })
            .collect()
    }

    pub fn adjunction(&self) -> Result<SuiteResult> {
        let Some(t) = &self.scenario.target else {
            return Ok(SuiteResult::skip(Suite::Adjunction, "scenario has no target"));
        };
        if self.scenario.push.is_empty() {
            return Ok(SuiteResult::skip(Suite::Adjunction, "scenario has no pushforward configuration"));
        }
        if self.class_dim()? > t.dim {
            return Ok(SuiteResult::skip(Suite::Adjunction, "class dimension exceeds the target dimension"));
        }
        let tol = self.flags.tol(Suite::Adjunction);
        let cls = ClassNodes::of(&self.vc)?;
        let part = Partition::new(self.vc.k.clone(), self.vc.cut.clone(), self.vc.eps, PartitionShape::Quintic)?;
        let r = part.as_fn();
        let dims = self.dims();
        let mut rng = self.rng("adjunction");
        let thetas = self.closed_target_forms(&mut rng, 3)?;
        let mut out = SuiteResult::new(Suite::Adjunction);
        for (i, th) in thetas.iter().enumerate() {
            let mut rhs = Vec::new();
            for (c, cfg) in self.scenario.push.iter().enumerate() {
                let (l, rr) = adjunction(&cls, t, th, cfg, &dims, &r)?;
                out.checks.push(Check::new(format!("form {i}, configuration {c}: pullback integral vs pairing with pushforward"), l, rr, tol));
                rhs.push(rr);
            }
            for c in 1..rhs.len() {
                out.checks.push(Check::new(format!("form {i}: configuration 0 vs {c}"), rhs[0], rhs[c], tol));
            }
        }
        Ok(out)
    }

    /// Closed forms of the class's degree: `1` for points, pullbacks of closed target
    /// forms otherwise.
    fn closed_forms(&self, rng: &mut ChaCha8Rng) -> Result<Vec<(String, Vec<Form>)>> {
        let k = self.class_dim()?;
        let dims = self.dims();
        if k == 0 {
            return Ok(vec![("one".into(), dims.iter().map(|&n| Form::constant(n, 1.0)).collect())]);
        }
        let Some(t) = &self.scenario.target else { return Ok(vec![]) };
        if t.dim < k {
            return Ok(vec![]);
        }
        let forms = self.closed_target_forms(rng, 2)?;
        forms
            .into_iter()
            .enumerate()
            .map(|(i, f)| Ok((format!("pulled-back form {i}"), t.maps.iter().zip(&dims).map(|(m, &n)| f.pullback(n, m.clone())).collect::<Result<_>>()?)))
            .collect()
    }

    /// Rebuilds the class under several seeds, with the perturbation forced on when the
    /// zero sets are found rather than supplied.
    pub fn seeds(&self, count: u64) -> Result<SuiteResult> {
        let tol = self.flags.tol(Suite::Seed);
        let mut rng = self.rng("seed");
        let forms = self.closed_forms(&mut rng)?;
        if forms.is_empty() {
            return Ok(SuiteResult::skip(Suite::Seed, "no closed form of the class's degree"));
        }
        let supplied = !self.scenario.build.zero.surfaces.is_empty();
        let base = self.scenario.build.seed;
        let vals: Vec<Vec<f64>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut s = self.scenario.clone();
                s.build.seed = base + i;
                s.build.force_perturbation |= !supplied;
                let vc = build_class(&s)?;
                let part = Partition::new(vc.k.clone(), vc.cut.clone(), vc.eps, PartitionShape::Quintic)?;
                forms.iter().map(|(_, f)| integrate_vclass(&vc, f, &part)).collect()
            })
            .collect::<Result<_>>()?;
        let mut out = SuiteResult::new(Suite::Seed);
        for (fi, (name, _)) in forms.iter().enumerate() {
            let col: Vec<f64> = vals.iter().map(|v| v[fi]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.checks.push(Check::new(format!("{name}: max vs min over seeds {base}..{}", base + count - 1), hi, lo, tol));
        }
        let note = if supplied { "zero sets are supplied, so the perturbation stays off" } else { "perturbation forced on" };
        Ok(out.with_note(note))
    }

    pub fn weak_product(&self) -> Result<SuiteResult> {
        let Some(f) = &self.scenario.factors else {
            return Ok(SuiteResult::skip(Suite::WeakProduct, "scenario is not a weak product"));
        };
        let (a, b) = &**f;
        let tol = self.flags.tol(Suite::WeakProduct);
        let mut out = SuiteResult::new(Suite::WeakProduct);
        let ones = |s: &Scenario| -> Vec<Form> { s.chart_dims().iter().map(|&n| Form::constant(n, 1.0)).collect() };
        let va = build_class(a)?;
        let vb = build_class(b)?;
        let pa = Partition::new(va.k.clone(), va.cut.clone(), va.eps, PartitionShape::Quintic)?;
        let pb = Partition::new(vb.k.clone(), vb.cut.clone(), vb.eps, PartitionShape::Quintic)?;
        let whole = self.integral(&ones(&self.scenario), PartitionShape::Quintic)?;
        let ia = integrate_vclass(&va, &ones(a), &pa)?;
        let ib = integrate_vclass(&vb, &ones(b), &pb)?;
        out.checks.push(Check::new("integral of 1: product vs product of factors", whole, ia * ib, tol));
        let (Some(t), Some(ta), Some(tb)) = (&self.scenario.target, &a.target, &b.target) else {
            return Ok(out.with_note("factors have no targets; pushforwards not compared"));
        };
        let (Some(cfg), Some(ca), Some(cb)) = (self.scenario.push.first(), a.push.first(), b.push.first()) else {
            return Ok(out.with_note("factors have no pushforward configurations"));
        };
        let part = Partition::new(self.vc.k.clone(), self.vc.cut.clone(), self.vc.eps, PartitionShape::Quintic)?;
        let lhs = pushforward(&self.vc, t, &ones(&self.scenario), cfg, &part)?;
        let fa = pushforward(&va, ta, &ones(a), ca, &pa)?;
        let fb = pushforward(&vb, tb, &ones(b), cb, &pb)?;
        let rhs = product_form(&fa.form, &fb.form)?;
        let mut worst = Check::new("pushforward of 1 vs product of pushforwards", 0.0, 0.0, tol);
        for x in sample_box(&lhs.lo, &lhs.hi, 9) {
            let (l, r) = (lhs.at(&x), rhs.at(&[], &x));
            for (p, q) in l.iter().zip(&r) {
                if (p - q).abs() >= worst.diff() {
                    worst = Check::new(format!("pushforward of 1 vs product of pushforwards at {}", fmt_point(&x)), *p, *q, tol);
                }
            }
        }
        out.checks.push(worst);
        Ok(out)
    }

    /// `y*π_!(1) = π'_!(1)` for an invertible affine `y: A' → A`, with `K' = K ×_A A'`
    /// built from scratch. Needs affine target maps and smooth charts.
    pub fn pullback(&self) -> Result<SuiteResult> {
        let s = &self.scenario;
        let (Some(t), Some(cfg)) = (&s.target, s.push.first()) else {
            return Ok(SuiteResult::skip(Suite::Pullback, "scenario has no target or pushforward configuration"));
        };
        if s.factors.is_some() {
            return Ok(SuiteResult::skip(Suite::Pullback, "weak products use a product metric, which the pulled-back category does not carry"));
        }
        if !s.build.zero.surfaces.is_empty() {
            return Ok(SuiteResult::skip(Suite::Pullback, "zero sets are supplied, not found"));
        }
        if s.k.charts.iter().any(|c| c.chart.m != 0) {
            return Ok(SuiteResult::skip(Suite::Pullback, "pullbacks need smooth charts"));
        }
        let mut charts = s.k.charts.clone();
        for (j, c) in charts.iter_mut().enumerate() {
            let Some(base) = affine_part(&t.maps[j], c.dim(), t.dim) else {
                return Ok(SuiteResult::skip(Suite::Pullback, "target map is not affine"));
            };
            c.base = base;
        }
        let tol = self.flags.tol(Suite::Pullback);
        let over_a = Arc::new(Kcat::new(charts, s.k.transitions.clone(), t.dim, s.k.opts.clone()));
        let d = t.dim;
        let m = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                if i % 2 == 0 {
                    1.3
                } else {
                    0.8
                }
            } else {
                0.0
            }
        });
        let c = DVector::from_element(d, 0.2);
        let y = AffineMap { p: m.clone(), q: c.clone() };
        let part = Partition::new(self.vc.k.clone(), self.vc.cut.clone(), self.vc.eps, PartitionShape::Quintic)?;
        let ones: Vec<Form> = self.dims().iter().map(|&n| Form::constant(n, 1.0)).collect();
        let mut forms = self.top_forms()?;
        if !forms.iter().any(|(n, _)| n == "one") {
            forms.insert(0, ("one".to_string(), ones.clone()));
        }
        let pf1 = pushforward(&self.vc, t, &ones, cfg, &part)?;
        let pre = |v: f64, i: usize| (v - c[i]) / m[(i, i)];
        let zbox = Region::Box { u: (0..d).map(|i| (pre(pf1.lo[i], i) - 1.0, pre(pf1.hi[i], i) + 1.0)).collect(), r: vec![] };
        let pb = pullback_kuranishi(&over_a, &y, &zbox)?;
        let kp = Arc::new(pb.k);
        let mut sp = s.clone();
        sp.k = kp.clone();
        let vp = build_class(&sp)?;
        let tp = Target { dim: d, maps: kp.charts.iter().map(|c| affine_jac(&c.base)).collect() };
        let cfgp = cfg.pulled_back(&m)?;
        let pp = Partition::new(vp.k.clone(), vp.cut.clone(), vp.eps, PartitionShape::Quintic)?;
        let pointwise = self.vc.nu.is_zero() && vp.nu.is_zero();
        let mut out = SuiteResult::new(Suite::Pullback);
        for (name, theta) in &forms {
            let thetap: Vec<Form> = pb.to_k.iter().zip(&kp.charts).map(|((src, a), c)| theta[*src].pullback(c.dim(), affine_jac(a))).collect::<Result<_>>()?;
            let pf = pushforward(&self.vc, t, theta, cfg, &part)?;
            let rhs = pushforward(&vp, &tp, &thetap, &cfgp, &pp)?;
            let lhs = pf.form.pullback(d, affine_jac(&y))?;
            if pointwise {
                let label = format!("{name}: pulled-back pushforward vs pushforward of the pullback");
                let mut worst = Check::new(label.clone(), 0.0, 0.0, tol);
                for x in sample_box(&rhs.lo, &rhs.hi, 9) {
                    for (p, q) in lhs.at(&[], &x).iter().zip(rhs.at(&x)) {
                        if (p - q).abs() >= worst.diff() {
                            worst = Check::new(format!("{label} at {}", fmt_point(&x)), *p, q, tol);
                        }
                    }
                }
                out.checks.push(worst);
            }
            if pf.form.degree == d {
                let opts = target_quad();
                let l = integrate_top(&pf.form, &pf.lo, &pf.hi, &opts)?;
                let r = integrate_top(&rhs.form, &rhs.lo, &rhs.hi, &opts)?;
                out.checks.push(Check::new(format!("{name}: total integral of the pushforward"), l, r, tol));
            }
        }
        if out.checks.is_empty() {
            return Ok(SuiteResult::skip(Suite::Pullback, "perturbed class with a pushforward below top degree: nothing to compare pointwise"));
        }
        Ok(out)
    }

    /// `∫_[K]θ = Σ_p ∫_[K⫽p]θ⫽p` and its pushforward version.
    pub fn tropical(&self, extra_points: &[Vec<crate::tropical::Q>]) -> Result<SuiteResult> {
        let tol = self.flags.tol(Suite::Tropical);
        let push_tol = self.flags.tol.unwrap_or(1e-5);
        let mut out = SuiteResult::new(Suite::Tropical);
        for (name, forms) in self.top_forms()? {
            if forms.iter().any(|f| !f.flags.generated_by_functions) {
                continue;
            }
            let rep = check_decomposition(&self.vc, &forms, PartitionShape::Quintic, extra_points)?;
            let parts: Vec<String> = rep.parts.iter().map(|(p, v)| format!("{p}: {v:.12}")).collect();
            out.checks.push(Check::new(format!("integral of {name} vs sum over tropical points [{}]", parts.join(", ")), rep.total, rep.sum, tol));
        }
        if let (Some(t), Some(cfg)) = (&self.scenario.target, self.scenario.push.first()) {
            let ones: Vec<Form> = self.dims().iter().map(|&n| Form::constant(n, 1.0)).collect();
            let part = Partition::new(self.vc.k.clone(), self.vc.cut.clone(), self.vc.eps, PartitionShape::Quintic)?;
            let pf = pushforward(&self.vc, t, &ones, cfg, &part)?;
            let samples = sample_box(&pf.lo, &pf.hi, 9);
            let worst = check_pushforward_decomposition(&self.vc, t, &ones, cfg, PartitionShape::Quintic, &samples)?;
            out.checks.push(Check::new("pushforward of 1 vs sum over tropical points (max difference)", worst, 0.0, push_tol));
        }
        if out.checks.is_empty() {
            return Ok(SuiteResult::skip(Suite::Tropical, "no function-generated form of the class's degree"));
        }
        Ok(out)
    }
}

/// Runs suites concurrently; results come back in the order asked.
pub fn run_suites(ctx: &Context, suites: &[Suite]) -> Vec<(Suite, Result<SuiteResult>)> {
    suites.par_iter().map(|&s| (s, ctx.run(s))).collect()
}

/// The versioned report for one scenario.
pub fn report(ctx: &Context, results: &[(Suite, Result<SuiteResult>)]) -> Value {
    let s = &ctx.scenario;
    let suites: Vec<Value> = results
        .iter()
        .map(|(suite, r)| match r {
            Ok(r) => r.to_json(),
            Err(e) => json!({"suite": suite.name(), "status": "error", "error": e.code(), "message": e.to_string()}),
        })
        .collect();
    let pass = results.iter().all(|(_, r)| matches!(r, Ok(x) if x.status() != Status::Fail));
    json!({
        "version": REPORT_VERSION,
        "scenario": s.name,
        "seed": s.build.seed,
        "eps": ctx.vc.eps,
        "grid": s.k.opts.grid,
        "zero_grid": s.build.zero.per_unit,
        "curve_step": s.build.zero.curve_step,
        "dimension": ctx.vc.dim,
        "suites": suites,
        "pass": pass,
    })
}

fn fmt_point(x: &[f64]) -> String {
    format!("({})", x.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "))
}

/// `n` points per axis strictly inside the box.
pub fn sample_box(lo: &[f64], hi: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for (a, b) in lo.iter().zip(hi) {
        let mut next = Vec::with_capacity(out.len() * n);
        for p in &out {
            for i in 0..n {
                let mut q = p.clone();
                q.push(a + (b - a) * (i as f64 + 0.5) / n as f64);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// True when all charts have one dimension and every transition is the identity.
fn shared_coordinates(k: &Kcat) -> bool {
    let n = k.charts[0].dim();
    if k.charts.iter().any(|c| c.dim() != n) {
        return false;
    }
    k.transitions.iter().all(|t| {
        k.charts[t.a].grid(&t.domain, k.opts.grid, k.opts.max_per_axis).iter().all(|x| {
            let y = (t.phi)(x).0;
            y.iter().zip(x).all(|(a, b)| (a - b).abs() < 1e-12)
        })
    })
}

/// `(P, q)` with `f(x) = P x + q`, or `None` if the Jacobian varies.
fn affine_part(f: &JacFn, n: usize, d: usize) -> Option<AffineMap> {
    let (q, j0) = f(&vec![0.0; n]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..8 {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (y, j) = f(&x);
        let pred: Vec<f64> = (0..d).map(|i| q[i] + (0..n).map(|c| j0[i][c] * x[c]).sum::<f64>()).collect();
        if j != j0 || pred.iter().zip(&y).any(|(a, b)| (a - b).abs() > 1e-10) {
            return None;
        }
    }
    Some(AffineMap { p: DMatrix::from_fn(d, n, |i, c| j0[i][c]), q: DVector::from_vec(q) })
}

fn affine_jac(a: &AffineMap) -> JacFn {
    let a = a.clone();
    Arc::new(move |x: &[f64]| {
        let y = &a.p * DVector::from_column_slice(x) + &a.q;
        let jac = (0..a.p.nrows()).map(|i| a.p.row(i).iter().cloned().collect()).collect();
        (y.as_slice().to_vec(), jac)
    })
}

fn num(v: f64) -> String {
    format!("({v:.6})")
}

fn random_poly(rng: &mut ChaCha8Rng, dim: usize) -> String {
    let mut s = num(rng.gen_range(-1.0..1.0) + 1.5);
    for i in 0..dim {
        let _ = write!(s, " + {}*x{}", num(rng.gen_range(-1.0..1.0)), i + 1);
    }
    format!("({s})")
}

fn pick_subsets(rng: &mut ChaCha8Rng, dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut all = ext::subsets(dim, degree);
    while all.len() > 3 {
        let i = rng.gen_range(0..all.len());
        all.remove(i);
    }
    all
}

/// A `degree`-form whose coefficients are `((s + |s|)/2)^5 · poly`, `s = 1 − |x − c|²/R²`.
pub fn random_bump_form(rng: &mut ChaCha8Rng, layout: Layout, degree: usize, center: &[f64], radius: f64) -> Result<Form> {
    let dim = layout.dim();
    let dist2: Vec<String> = center.iter().enumerate().map(|(i, c)| format!("(x{} - {})^2", i + 1, num(*c))).collect();
    let s = format!("(1 - ({})/{})", dist2.join(" + "), num(radius * radius));
    let bump = format!("(({s} + abs({s}))/2)^9");
    let terms = pick_subsets(rng, dim, degree).into_iter().map(|idx| Ok((idx, Expr::parse(&format!("{bump} * {}", random_poly(rng, dim)), layout)?))).collect::<Result<_>>()?;
    Form::from_exprs(layout, degree, terms)
}

/// A `degree`-form with Gaussian-times-polynomial coefficients.
fn gaussian_form(rng: &mut ChaCha8Rng, layout: Layout, degree: usize, center: &[f64]) -> Result<Form> {
    let dim = layout.dim();
    let dist2: Vec<String> = center.iter().enumerate().map(|(i, c)| format!("(x{} - {})^2", i + 1, num(*c))).collect();
    let g = format!("exp(-({})/{})", dist2.join(" + "), num(rng.gen_range(0.5..1.5)));
    let terms = pick_subsets(rng, dim, degree).into_iter().map(|idx| Ok((idx, Expr::parse(&format!("{g} * {}", random_poly(rng, dim)), layout)?))).collect::<Result<_>>()?;
    Form::from_exprs(layout, degree, terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::fixture;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()).unwrap(), s);
        }
        assert_eq!(Suite::parse("partition").unwrap(), Suite::Partition);
        assert!(Suite::parse("nope").is_err());
    }

    #[test]
    fn bump_forms_vanish_outside_their_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_bump_form(&mut rng, Layout { n: 2, m: 0 }, 1, &[0.5, 0.0], 0.5).unwrap();
        assert!(f.at(&[], &[1.2, 0.0]).iter().all(|c| *c == 0.0));
        assert!(f.at(&[], &[0.5, 0.1]).iter().any(|c| *c != 0.0));
        let df = f.d().unwrap();
        assert!(df.at(&[], &[1.2, 0.0]).iter().all(|c| *c == 0.0));
    }

    #[test]
    fn affine_maps_are_recognized() {
        let f: JacFn = Arc::new(|x: &[f64]| (vec![2.0 * x[0] - x[1] + 0.5], vec![vec![2.0, -1.0]]));
        let a = affine_part(&f, 2, 1).unwrap();
        assert_eq!(a.p, DMatrix::from_row_slice(1, 2, &[2.0, -1.0]));
        let g: JacFn = Arc::new(|x: &[f64]| (vec![x[0] * x[0]], vec![vec![2.0 * x[0], 0.0]]));
        assert!(affine_part(&g, 2, 1).is_none());
    }

    #[test]
    fn counts_on_the_simplest_fixture() {
        let ctx = Context::new(&fixture("dbar_z").unwrap(), &Flags::default()).unwrap();
        let r = ctx.counts().unwrap();
        assert_eq!(r.status(), Status::Pass, "{r:?}");
        assert_eq!(ctx.stokes(3).unwrap().status(), Status::NotApplicable);
    }
}
