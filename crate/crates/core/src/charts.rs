//! Exploded coordinate charts `R^n × T^m_P` at desk scale.
//!
//! A point of a chart is a vertex of `P` (a 0-dimensional tropical stratum) together with
//! real coordinates `x = (u_1..u_n, Re z_1, Im z_1, ..)`. The coefficient `z = 0` stands
//! for the collapsed locus, so regions bound `|z|` rather than `log|z|`.

use crate::error::{Error, Result};
use crate::expr::{Expr, Layout};
use crate::ext;
use crate::quad::{integrate_box, QuadOptions};
use crate::tropical::{q_to_f64, Polytope, Q};
use serde_json::Value;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

pub type MapFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Region of `R^{n+2m}`. Open; membership is `depth > 0`.
#[derive(Clone)]
pub enum Region {
    /// Bounds on each `u_j` and on each radius `|z_j|`.
    Box {
        u: Vec<(f64, f64)>,
        r: Vec<(f64, f64)>,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Union(Vec<Region>),
    Inter(Vec<Region>),
    /// Preimage of `inner` under `map`, with a bounding box for the preimage.
    Mapped {
        map: MapFn,
        inner: Box<Region>,
        bbox: (Vec<f64>, Vec<f64>),
        label: String,
    },
}

impl fmt::Debug for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Box { u, r } => write!(f, "Box(u={u:?}, r={r:?})"),
            Region::Ball { center, radius } => write!(f, "Ball({center:?}, {radius})"),
            Region::Union(v) => write!(f, "Union{v:?}"),
            Region::Inter(v) => write!(f, "Inter{v:?}"),
            Region::Mapped { label, .. } => write!(f, "Mapped({label})"),
        }
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Region {
    pub fn ball(center: Vec<f64>, radius: f64) -> Region {
        Region::Ball { center, radius }
    }

    /// Signed slack: positive inside, negative outside, 1-Lipschitz for boxes and balls.
    pub fn depth(&self, x: &[f64]) -> f64 {
        match self {
            Region::Box { u, r } => {
                let mut d = f64::INFINITY;
                for (j, (lo, hi)) in u.iter().enumerate() {
                    d = d.min(x[j] - lo).min(hi - x[j]);
                }
                let n = u.len();
                for (j, (lo, hi)) in r.iter().enumerate() {
                    let rad = x[n + 2 * j].hypot(x[n + 2 * j + 1]);
                    if *lo > 0.0 {
                        d = d.min(rad - lo);
                    }
                    d = d.min(hi - rad);
                }
                d
            }
            Region::Ball { center, radius } => radius - dist(x, center),
            Region::Union(v) => v.iter().map(|r| r.depth(x)).fold(f64::NEG_INFINITY, f64::max),
            Region::Inter(v) => v.iter().map(|r| r.depth(x)).fold(f64::INFINITY, f64::min),
            Region::Mapped { map, inner, bbox, .. } => {
                let mut out = f64::INFINITY;
                for (j, v) in x.iter().enumerate() {
                    out = out.min(v - bbox.0[j]).min(bbox.1[j] - v);
                }
                if out <= 0.0 {
                    return out;
                }
                inner.depth(&map(x)).min(out)
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.depth(x) > 0.0
    }

    pub fn closure_contains(&self, x: &[f64]) -> bool {
        self.depth(x) >= 0.0
    }

    /// Axis-aligned bounding box in the real coordinates.
    pub fn bbox(&self, n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            Region::Box { u, r } => {
                let mut lo: Vec<f64> = u.iter().map(|b| b.0).collect();
                let mut hi: Vec<f64> = u.iter().map(|b| b.1).collect();
                for b in r {
                    lo.extend([-b.1, -b.1]);
                    hi.extend([b.1, b.1]);
                }
                (lo, hi)
            }
            Region::Ball { center, radius } => (center.iter().map(|c| c - radius).collect(), center.iter().map(|c| c + radius).collect()),
            Region::Union(v) => {
                let mut lo = vec![f64::INFINITY; n + 2 * m];
                let mut hi = vec![f64::NEG_INFINITY; n + 2 * m];
                for r in v {
                    let (l, h) = r.bbox(n, m);
                    for j in 0..lo.len() {
                        lo[j] = lo[j].min(l[j]);
                        hi[j] = hi[j].max(h[j]);
                    }
                }
                (lo, hi)
            }
            Region::Inter(v) => {
                let mut lo = vec![f64::NEG_INFINITY; n + 2 * m];
                let mut hi = vec![f64::INFINITY; n + 2 * m];
                for r in v {
                    let (l, h) = r.bbox(n, m);
                    for j in 0..lo.len() {
                        lo[j] = lo[j].max(l[j]);
                        hi[j] = hi[j].min(h[j]);
                    }
                }
                (lo, hi)
            }
            Region::Mapped { bbox, .. } => bbox.clone(),
        }
    }

    /// Box in integration coordinates `(u, r_1, φ_1, ..)`.
    pub fn polar_bbox(&self, n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = self.bbox(n, m);
        let mut plo = lo[..n].to_vec();
        let mut phi = hi[..n].to_vec();
        for j in 0..m {
            let (a, b) = (n + 2 * j, n + 2 * j + 1);
            let rmax = lo[a].abs().max(hi[a].abs()).hypot(lo[b].abs().max(hi[b].abs()));
            let straddles = lo[a] <= 0.0 && hi[a] >= 0.0 && lo[b] <= 0.0 && hi[b] >= 0.0;
            let rmin = if straddles {
                0.0
            } else {
                let cx = if lo[a] > 0.0 {
                    lo[a]
                } else if hi[a] < 0.0 {
                    -hi[a]
                } else {
                    0.0
                };
                let cy = if lo[b] > 0.0 {
                    lo[b]
                } else if hi[b] < 0.0 {
                    -hi[b]
                } else {
                    0.0
                };
                cx.hypot(cy)
            };
            plo.extend([rmin, 0.0]);
            phi.extend([rmax, 2.0 * PI]);
        }
        (plo, phi)
    }

    /// Grid points of the bounding box that lie in the region, `per_unit` points per
    /// unit length and at most `max_per_axis` per axis.
    pub fn grid(&self, n: usize, m: usize, per_unit: f64, max_per_axis: usize) -> Vec<Vec<f64>> {
        let (lo, hi) = self.bbox(n, m);
        grid_box(&lo, &hi, per_unit, max_per_axis).into_iter().filter(|x| self.contains(x)).collect()
    }

    pub fn from_json(v: &Value, dim: usize) -> Result<Region> {
        let bad = |w: &str| Error::Schema(format!("region: {w}"));
        let obj = v.as_object().ok_or_else(|| bad("expected an object"))?;
        if let Some(b) = obj.get("ball") {
            let center = f64_list(b.get("center").ok_or_else(|| bad("ball needs center"))?)?;
            let radius = b.get("radius").and_then(Value::as_f64).ok_or_else(|| bad("ball needs numeric radius"))?;
            if center.len() != dim {
                return Err(Error::BadDim(format!("ball center has {} coordinates, chart has {dim}", center.len())));
            }
            if radius <= 0.0 {
                return Err(bad("radius must be positive"));
            }
            return Ok(Region::Ball { center, radius });
        }
        if let Some(b) = obj.get("box") {
            let pairs = |key: &str| -> Result<Vec<(f64, f64)>> {
                match b.get(key) {
                    None => Ok(vec![]),
                    Some(Value::Array(a)) => a
                        .iter()
                        .map(|p| {
                            let p = f64_list(p)?;
                            if p.len() != 2 || p[0] >= p[1] {
                                return Err(bad("bounds must be [lo, hi] with lo < hi"));
                            }
                            Ok((p[0], p[1]))
                        })
                        .collect(),
                    _ => Err(bad("bounds must be a list")),
                }
            };
            let u = pairs("u")?;
            let r = pairs("r")?;
            if r.iter().any(|b| b.0 < 0.0) {
                return Err(bad("radius bounds must be nonnegative"));
            }
            if u.len() + 2 * r.len() != dim {
                return Err(Error::BadDim(format!("box bounds cover {} coordinates, chart has {dim}", u.len() + 2 * r.len())));
            }
            return Ok(Region::Box { u, r });
        }
        if let Some(Value::Array(a)) = obj.get("union") {
            return Ok(Region::Union(a.iter().map(|r| Region::from_json(r, dim)).collect::<Result<_>>()?));
        }
        if let Some(Value::Array(a)) = obj.get("inter") {
            return Ok(Region::Inter(a.iter().map(|r| Region::from_json(r, dim)).collect::<Result<_>>()?));
        }
        Err(bad("expected one of ball, box, union, inter"))
    }
}

pub fn f64_list(v: &Value) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::Schema("expected a list of numbers".into()))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::Schema(format!("expected a number, got {x}"))))
        .collect()
}

/// Regular grid on a box (cell midpoints), deterministic order.
pub fn grid_box(lo: &[f64], hi: &[f64], per_unit: f64, max_per_axis: usize) -> Vec<Vec<f64>> {
    let counts: Vec<usize> = lo.iter().zip(hi).map(|(a, b)| (((b - a) * per_unit).ceil() as usize).clamp(2, max_per_axis.max(2))).collect();
    let mut out: Vec<Vec<f64>> = vec![vec![]];
    for (j, &c) in counts.iter().enumerate() {
        let h = (hi[j] - lo[j]) / c as f64;
        let mut next = Vec::with_capacity(out.len() * c);
        for p in &out {
            for i in 0..c {
                let mut q = p.clone();
                q.push(lo[j] + h * (i as f64 + 0.5));
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// A chart `U ⊂ R^n × T^m_P`.
#[derive(Clone, Debug)]
pub struct ExplodedChart {
    pub n: usize,
    pub m: usize,
    pub polytope: Polytope,
    pub region: Region,
    pub orientation: i8,
    vertices: Vec<Vec<Q>>,
}

impl ExplodedChart {
    pub fn new(n: usize, m: usize, polytope: Polytope, region: Region, orientation: i8) -> Result<ExplodedChart> {
        if polytope.dim() != m {
            return Err(Error::BadDim(format!("polytope lives in R^{}, chart has m = {m}", polytope.dim())));
        }
        if orientation != 1 && orientation != -1 {
            return Err(Error::Schema("orientation must be +1 or -1".into()));
        }
        let vertices = polytope.vertices();
        Ok(ExplodedChart { n, m, polytope, region, orientation, vertices })
    }

    /// A smooth chart: `m = 0`, one stratum.
    pub fn smooth(n: usize, region: Region) -> ExplodedChart {
        ExplodedChart::new(n, 0, Polytope::whole_space(0), region, 1).expect("smooth chart")
    }

    pub fn dim(&self) -> usize {
        self.n + 2 * self.m
    }

    pub fn layout(&self) -> Layout {
        Layout { n: self.n, m: self.m }
    }

    /// Vertices of the tropical part (0-dimensional strata).
    pub fn strata(&self) -> &[Vec<Q>] {
        &self.vertices
    }

    pub fn vertex_f64(&self, v: usize) -> Vec<f64> {
        self.vertices[v].iter().map(q_to_f64).collect()
    }

    pub fn with_region(&self, region: Region) -> ExplodedChart {
        ExplodedChart { region, ..self.clone() }
    }

    /// Replaces the polytope by its tangent cone at `p`; box regions keep their bounds.
    pub fn tropical_complete(&self, p: &[Q]) -> Result<ExplodedChart> {
        let cone = self.polytope.tropical_completion(p)?;
        ExplodedChart::new(self.n, self.m, cone, self.region.clone(), self.orientation)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FormFlags {
    pub in_omega: bool,
    pub generated_by_functions: bool,
    pub refined: bool,
}

pub type Evaluator = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// A differential k-form on `R^dim`, possibly depending on the stratum (vertex).
/// `eval(vertex, x)` returns the coefficients on the sorted k-subsets.
#[derive(Clone)]
pub struct Form {
    pub dim: usize,
    pub degree: usize,
    pub eval: Evaluator,
    pub deriv: Option<Arc<Form>>,
    pub flags: FormFlags,
    /// Coordinate scale for finite-difference derivatives.
    pub fd_scale: f64,
}

impl fmt::Debug for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Form(dim={}, degree={}, {:?})", self.dim, self.degree, self.flags)
    }
}

const FUNCTION_FLAGS: FormFlags = FormFlags { in_omega: true, generated_by_functions: true, refined: false };

impl Form {
    pub fn new(dim: usize, degree: usize, eval: Evaluator) -> Result<Form> {
        if degree > dim {
            return Err(Error::DegreeOverflow(format!("degree {degree} exceeds dimension {dim}")));
        }
        Ok(Form { dim, degree, eval, deriv: None, flags: FUNCTION_FLAGS, fd_scale: 1.0 })
    }

    pub fn with_flags(mut self, flags: FormFlags) -> Form {
        self.flags = flags;
        self
    }

    pub fn with_deriv(mut self, d: Form) -> Form {
        self.deriv = Some(Arc::new(d));
        self
    }

    pub fn zero(dim: usize, degree: usize) -> Form {
        let len = ext::binom(dim, degree);
        let zero = Form::new(dim, degree, Arc::new(move |_, _| vec![0.0; len])).expect("degree within dimension");
        let dz = if degree < dim { Some(Arc::new(Form::zero_leaf(dim, degree + 1))) } else { None };
        Form { deriv: dz, ..zero }
    }

    fn zero_leaf(dim: usize, degree: usize) -> Form {
        let len = ext::binom(dim, degree);
        Form::new(dim, degree, Arc::new(move |_, _| vec![0.0; len])).expect("degree within dimension")
    }

    pub fn constant(dim: usize, c: f64) -> Form {
        let f = Form::new(dim, 0, Arc::new(move |_, _| vec![c])).unwrap();
        if dim == 0 {
            f
        } else {
            f.with_deriv(Form::zero(dim, 1))
        }
    }

    /// A 0-form from a function of the coordinates.
    pub fn function(dim: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Form {
        Form::new(dim, 0, Arc::new(move |_, x| vec![f(x)])).unwrap()
    }

    /// `dx_j` on `R^dim`.
    pub fn coordinate_differential(dim: usize, j: usize) -> Form {
        let mut c = vec![0.0; dim];
        c[j] = 1.0;
        let f = Form::new(dim, 1, Arc::new(move |_, _| c.clone())).unwrap();
        if dim >= 2 {
            f.with_deriv(Form::zero(dim, 2))
        } else {
            f
        }
    }

    /// The form `Σ_I Re(e_I) dx_I` with derivatives from the expressions.
    pub fn from_exprs(layout: Layout, degree: usize, terms: Vec<(Vec<usize>, Expr)>) -> Result<Form> {
        let dim = layout.dim();
        if degree > dim {
            return Err(Error::DegreeOverflow(format!("degree {degree} exceeds dimension {dim}")));
        }
        for (idx, _) in &terms {
            if idx.len() != degree || idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|&i| i >= dim) {
                return Err(Error::Schema(format!("form index {idx:?} is not a sorted {degree}-subset of 0..{dim}")));
            }
        }
        let terms = Arc::new(terms);
        let len = ext::binom(dim, degree);
        let t1 = terms.clone();
        let eval: Evaluator = Arc::new(move |v, x| {
            let mut c = vec![0.0; len];
            for (idx, e) in t1.iter() {
                c[ext::subset_index(dim, idx)] += e.eval(x, v).re;
            }
            c
        });
        let mut form = Form::new(dim, degree, eval)?;
        if degree < dim {
            let dlen = ext::binom(dim, degree + 1);
            let t2 = terms.clone();
            let deval: Evaluator = Arc::new(move |v, x| {
                let mut c = vec![0.0; dlen];
                for (idx, e) in t2.iter() {
                    let g = e.eval_dual(x, v);
                    for j in 0..dim {
                        if let Some((u, s)) = ext::merge_sign(&[j], idx) {
                            c[ext::subset_index(dim, &u)] += s * g.g[j].re;
                        }
                    }
                }
                c
            });
            form = form.with_deriv(Form::new(dim, degree + 1, deval)?);
        }
        Ok(form)
    }

    pub fn at(&self, vertex: &[f64], x: &[f64]) -> Vec<f64> {
        (self.eval)(vertex, x)
    }

    /// Value on k tangent vectors.
    pub fn on_vectors(&self, vertex: &[f64], x: &[f64], vectors: &[Vec<f64>]) -> f64 {
        ext::eval_on_vectors(self.dim, &self.at(vertex, x), vectors)
    }

    pub fn scale(&self, c: f64) -> Form {
        let e = self.eval.clone();
        Form { eval: Arc::new(move |v, x| e(v, x).into_iter().map(|a| a * c).collect()), deriv: self.deriv.as_ref().map(|d| Arc::new(d.scale(c))), ..self.clone() }
    }

    pub fn add(&self, other: &Form) -> Result<Form> {
        if self.dim != other.dim || self.degree != other.degree {
            return Err(Error::DegreeMismatch(format!("cannot add {self:?} and {other:?}")));
        }
        let (a, b) = (self.eval.clone(), other.eval.clone());
        let deriv = match (&self.deriv, &other.deriv) {
            (Some(x), Some(y)) => Some(Arc::new(x.add(y)?)),
            _ => None,
        };
        Ok(Form { eval: Arc::new(move |v, x| a(v, x).into_iter().zip(b(v, x)).map(|(p, q)| p + q).collect()), deriv, flags: meet(self.flags, other.flags), ..self.clone() })
    }

    pub fn wedge(&self, other: &Form) -> Result<Form> {
        if self.dim != other.dim {
            return Err(Error::BadDim(format!("wedge of forms on R^{} and R^{}", self.dim, other.dim)));
        }
        let k = self.degree + other.degree;
        if k > self.dim {
            return Err(Error::DegreeOverflow(format!("wedge has degree {k} on R^{}", self.dim)));
        }
        let (a, b) = (self.eval.clone(), other.eval.clone());
        let (n, ka, kb) = (self.dim, self.degree, other.degree);
        let mut out = Form::new(n, k, Arc::new(move |v, x| ext::wedge_coeffs(n, ka, &a(v, x), kb, &b(v, x))))?;
        out.flags = meet(self.flags, other.flags);
        out.fd_scale = self.fd_scale.min(other.fd_scale);
        // Leibniz rule when both derivatives are known
        if let (Some(da), Some(db)) = (&self.deriv, &other.deriv) {
            if k < n {
                let d1 = da.wedge(other)?;
                let d2 = self.wedge(db)?.scale(if ka % 2 == 0 { 1.0 } else { -1.0 });
                let mut d = d1.add(&d2)?;
                d.deriv = None;
                out.deriv = Some(Arc::new(d));
            }
        }
        Ok(out)
    }

    /// Exterior derivative: analytic when known, else central differences.
    pub fn d(&self) -> Result<Form> {
        if self.degree >= self.dim {
            return Err(Error::DegreeOverflow(format!("d of a top-degree form on R^{}", self.dim)));
        }
        if let Some(d) = &self.deriv {
            return Ok((**d).clone());
        }
        let e = self.eval.clone();
        let (n, k) = (self.dim, self.degree);
        let h = 1e-5 * self.fd_scale;
        let src = ext::subsets(n, k);
        let len = ext::binom(n, k + 1);
        let eval: Evaluator = Arc::new(move |v, x| {
            let mut out = vec![0.0; len];
            let mut xp = x.to_vec();
            for j in 0..n {
                xp[j] = x[j] + h;
                let fp = e(v, &xp);
                xp[j] = x[j] - h;
                let fm = e(v, &xp);
                xp[j] = x[j];
                for (i, idx) in src.iter().enumerate() {
                    let g = (fp[i] - fm[i]) / (2.0 * h);
                    if g == 0.0 {
                        continue;
                    }
                    if let Some((u, s)) = ext::merge_sign(&[j], idx) {
                        out[ext::subset_index(n, &u)] += s * g;
                    }
                }
            }
            out
        });
        Ok(Form { dim: n, degree: k + 1, eval, deriv: None, flags: self.flags, fd_scale: self.fd_scale })
    }

    /// Pullback along `f: R^src → R^dim` given with its Jacobian.
    pub fn pullback(&self, src: usize, f: JacFn) -> Result<Form> {
        if self.degree > src {
            return Err(Error::DegreeOverflow(format!("pullback of a {}-form to R^{src}", self.degree)));
        }
        let e = self.eval.clone();
        let (n, k) = (self.dim, self.degree);
        let g = f.clone();
        let eval: Evaluator = Arc::new(move |v, x| {
            let (y, jac) = g(x);
            ext::pull_coeffs(n, src, k, &e(v, &y), &jac)
        });
        let deriv = match &self.deriv {
            Some(d) if k < src => Some(Arc::new(d.pullback(src, f)?)),
            _ => None,
        };
        Ok(Form { dim: src, degree: k, eval, deriv, flags: self.flags, fd_scale: self.fd_scale })
    }

    /// Spot check that the evaluator defines an alternating multilinear map (it does by
    /// construction from coefficients; this checks the coefficient vector length).
    pub fn check_shape(&self, vertex: &[f64], x: &[f64]) -> Result<()> {
        let c = self.at(vertex, x);
        if c.len() != ext::binom(self.dim, self.degree) {
            return Err(Error::DegreeMismatch(format!("evaluator returned {} coefficients, expected {}", c.len(), ext::binom(self.dim, self.degree))));
        }
        Ok(())
    }
}

pub type JacFn = Arc<dyn Fn(&[f64]) -> (Vec<f64>, Vec<Vec<f64>>) + Send + Sync>;

fn meet(a: FormFlags, b: FormFlags) -> FormFlags {
    let in_omega = a.in_omega && b.in_omega;
    FormFlags {
        in_omega,
        generated_by_functions: a.generated_by_functions && b.generated_by_functions,
        refined: !in_omega && (a.in_omega || a.refined) && (b.in_omega || b.refined),
    }
}

/// Sampled test of the `generated_by_functions` flag: on the rotation field of each
/// tropical coefficient, at `|z| = η`, the form must vanish to first order in η.
pub fn check_generated_by_functions(form: &Form, chart: &ExplodedChart, samples: &[Vec<f64>]) -> bool {
    let (n, m) = (chart.n, chart.m);
    if m == 0 || form.degree == 0 {
        return true;
    }
    let basis: Vec<Vec<f64>> = (0..chart.dim())
        .map(|i| {
            let mut e = vec![0.0; chart.dim()];
            e[i] = 1.0;
            e
        })
        .collect();
    for v in 0..chart.strata().len() {
        let vert = chart.vertex_f64(v);
        for s in samples {
            for j in 0..m {
                let probe = |eta: f64, phi: f64| -> f64 {
                    let mut x = s.clone();
                    x[n + 2 * j] = eta * phi.cos();
                    x[n + 2 * j + 1] = eta * phi.sin();
                    let rot = {
                        let mut r = vec![0.0; chart.dim()];
                        r[n + 2 * j] = -x[n + 2 * j + 1];
                        r[n + 2 * j + 1] = x[n + 2 * j];
                        r
                    };
                    let mut worst: f64 = 0.0;
                    for others in ext::subsets(chart.dim(), form.degree - 1) {
                        let mut vecs = vec![rot.clone()];
                        vecs.extend(others.iter().map(|&i| basis[i].clone()));
                        worst = worst.max(form.on_vectors(&vert, &x, &vecs).abs());
                    }
                    worst
                };
                for phi in [0.3, 2.1, 4.4] {
                    let big = probe(1e-2, phi) / 1e-2;
                    let small = probe(1e-4, phi) / 1e-4;
                    if small > 10.0 * big.max(1.0) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Integrates a top-degree form over every 0-dimensional stratum of the chart.
pub fn integrate_chart(chart: &ExplodedChart, theta: &Form, opts: &QuadOptions) -> Result<f64> {
    if theta.dim != chart.dim() {
        return Err(Error::BadDim(format!("form on R^{} integrated over a chart of dimension {}", theta.dim, chart.dim())));
    }
    if theta.degree != chart.dim() {
        return Err(Error::DegreeMismatch(format!("form of degree {} on a chart of dimension {}", theta.degree, chart.dim())));
    }
    if chart.m > 0 && !(theta.flags.in_omega || theta.flags.refined) {
        return Err(Error::Rejected("stratum-sum integration needs a form in Omega or a refined form".into()));
    }
    let (n, m) = (chart.n, chart.m);
    let (lo, hi) = chart.region.polar_bbox(n, m);
    let mut total = 0.0;
    for v in 0..chart.strata().len() {
        let vert = chart.vertex_f64(v);
        let e = theta.eval.clone();
        let f = |q: &[f64]| -> f64 {
            let mut x = q[..n].to_vec();
            let mut jac = 1.0;
            for j in 0..m {
                let (r, phi) = (q[n + 2 * j], q[n + 2 * j + 1]);
                x.push(r * phi.cos());
                x.push(r * phi.sin());
                jac *= r;
            }
            if jac == 0.0 && m > 0 {
                return 0.0;
            }
            e(&vert, &x)[0] * jac
        };
        total += integrate_box(&f, &lo, &hi, opts)?;
    }
    Ok(total * chart.orientation as f64)
}

/// The form `θ⫽p` on the completed chart: same coordinate formula; a form in Omega whose
/// polytope actually changes is re-flagged as refined.
pub fn complete_form(theta: &Form, chart: &ExplodedChart, p: &[Q]) -> Result<(ExplodedChart, Form)> {
    let completed = chart.tropical_complete(p)?;
    let mut f = theta.clone();
    if completed.polytope != chart.polytope && f.flags.in_omega {
        f.flags.in_omega = false;
        f.flags.refined = true;
    }
    Ok((completed, f))
}
