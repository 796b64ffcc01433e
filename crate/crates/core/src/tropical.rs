//! Exact rational polytopes with open and closed facets, integral-affine maps,
//! and tropical completion (tangent cones) of both.

use crate::error::{Error, Result};
use num::{BigInt, BigRational, Integer, One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;

pub type Q = BigRational;

pub fn q_int(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

pub fn q_frac(n: i64, d: i64) -> Q {
    Q::new(BigInt::from(n), BigInt::from(d))
}

/// Parses `"p/q"`, `"p"` or a finite decimal such as `"-0.25"`.
pub fn parse_q(s: &str) -> Result<Q> {
    let s = s.trim();
    let bad = || Error::Schema(format!("not a rational number: {s:?}"));
    if let Some((n, d)) = s.split_once('/') {
        let n: BigInt = n.trim().parse().map_err(|_| bad())?;
        let d: BigInt = d.trim().parse().map_err(|_| bad())?;
        if d.is_zero() {
            return Err(bad());
        }
        return Ok(Q::new(n, d));
    }
    if let Some((ip, fp)) = s.split_once('.') {
        let neg = ip.starts_with('-');
        let digits = format!("{}{}", ip.trim_start_matches(['-', '+']), fp);
        if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let n: BigInt = digits.parse().map_err(|_| bad())?;
        let d = num::pow(BigInt::from(10), fp.len());
        let v = Q::new(n, d);
        return Ok(if neg { -v } else { v });
    }
    let n: BigInt = s.parse().map_err(|_| bad())?;
    Ok(Q::from_integer(n))
}

pub fn fmt_q(q: &Q) -> String {
    if q.denom().is_one() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

pub fn q_to_f64(q: &Q) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

/// `a·x ≥ b`, or `a·x > b` when `strict`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub a: Vec<BigInt>,
    pub b: Q,
    pub strict: bool,
}

impl Constraint {
    pub fn new(a: Vec<i64>, b: Q, strict: bool) -> Self {
        Constraint { a: a.into_iter().map(BigInt::from).collect(), b, strict }
    }

    pub fn value(&self, x: &[Q]) -> Q {
        let mut s = Q::zero();
        for (ai, xi) in self.a.iter().zip(x) {
            if !ai.is_zero() {
                s += xi * Q::from_integer(ai.clone());
            }
        }
        s
    }

    pub fn holds(&self, x: &[Q]) -> bool {
        let v = self.value(x);
        if self.strict {
            v > self.b
        } else {
            v >= self.b
        }
    }

    pub fn negation(&self) -> RatConstraint {
        RatConstraint { a: self.a.iter().map(|v| Q::from_integer(-v.clone())).collect(), b: -self.b.clone(), strict: !self.strict }
    }

    fn to_rat(&self) -> RatConstraint {
        RatConstraint { a: self.a.iter().map(|v| Q::from_integer(v.clone())).collect(), b: self.b.clone(), strict: self.strict }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a: Vec<String> = self.a.iter().map(|v| v.to_string()).collect();
        write!(f, "[{}]·x {} {}", a.join(","), if self.strict { ">" } else { ">=" }, fmt_q(&self.b))
    }
}

/// Constraint with rational normal; used inside elimination.
#[derive(Clone, Debug)]
pub struct RatConstraint {
    pub a: Vec<Q>,
    pub b: Q,
    pub strict: bool,
}

enum Normalized {
    Trivial,
    Contradiction,
    Keep(Constraint),
}

fn normalize(c: &RatConstraint) -> Normalized {
    if c.a.iter().all(|v| v.is_zero()) {
        let ok = if c.strict { Q::zero() > c.b } else { Q::zero() >= c.b };
        return if ok { Normalized::Trivial } else { Normalized::Contradiction };
    }
    let mut l = BigInt::one();
    for v in &c.a {
        l = l.lcm(v.denom());
    }
    let ints: Vec<BigInt> = c.a.iter().map(|v| (v * Q::from_integer(l.clone())).to_integer()).collect();
    let mut g = BigInt::zero();
    for v in &ints {
        g = g.gcd(v);
    }
    let a: Vec<BigInt> = ints.into_iter().map(|v| v / &g).collect();
    let scale = Q::new(l, g);
    Normalized::Keep(Constraint { a, b: &c.b * scale, strict: c.strict })
}

/// Merge constraints with identical normals, keeping the tightest (strict wins ties).
fn merge_sorted(mut cs: Vec<Constraint>) -> Vec<Constraint> {
    cs.sort_by(|x, y| x.a.cmp(&y.a).then_with(|| y.b.cmp(&x.b)).then_with(|| y.strict.cmp(&x.strict)));
    let mut out: Vec<Constraint> = Vec::with_capacity(cs.len());
    for c in cs {
        if let Some(last) = out.last() {
            if last.a == c.a {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Fourier–Motzkin feasibility with strictness tracking.
pub fn feasible(dim: usize, cs: &[RatConstraint]) -> bool {
    let mut cur: Vec<Constraint> = Vec::new();
    for c in cs {
        match normalize(c) {
            Normalized::Trivial => {}
            Normalized::Contradiction => return false,
            Normalized::Keep(k) => cur.push(k),
        }
    }
    cur = merge_sorted(cur);
    for k in 0..dim {
        let (mut pos, mut neg, mut rest) = (Vec::new(), Vec::new(), Vec::new());
        for c in cur {
            match c.a[k].sign() {
                num::bigint::Sign::Plus => pos.push(c),
                num::bigint::Sign::Minus => neg.push(c),
                num::bigint::Sign::NoSign => rest.push(c),
            }
        }
        for p in &pos {
            let pk = Q::from_integer(p.a[k].clone());
            for n in &neg {
                let nk = Q::from_integer(-n.a[k].clone());
                let a: Vec<Q> = (0..dim).map(|i| Q::from_integer(p.a[i].clone()) / &pk + Q::from_integer(n.a[i].clone()) / &nk).collect();
                let b = &p.b / &pk + &n.b / &nk;
                match normalize(&RatConstraint { a, b, strict: p.strict || n.strict }) {
                    Normalized::Trivial => {}
                    Normalized::Contradiction => return false,
                    Normalized::Keep(c) => rest.push(c),
                }
            }
        }
        cur = merge_sorted(rest);
    }
    cur.is_empty()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Polytope {
    dim: usize,
    constraints: Vec<Constraint>,
}

impl Polytope {
    /// Canonicalizes (primitive normals, merged duplicates, redundancy removed,
    /// lexicographic order) and certifies nonemptiness.
    pub fn from_constraints(dim: usize, constraints: Vec<Constraint>) -> Result<Polytope> {
        for c in &constraints {
            if c.a.len() != dim {
                return Err(Error::BadDim(format!("constraint {c} has {} entries, ambient dimension {dim}", c.a.len())));
            }
        }
        let rat: Vec<RatConstraint> = constraints.iter().map(|c| c.to_rat()).collect();
        if !feasible(dim, &rat) {
            return Err(Error::Infeasible(format!("{} constraints in R^{dim} have no common point", constraints.len())));
        }
        let mut cs = Vec::new();
        for c in &rat {
            match normalize(c) {
                Normalized::Keep(k) => cs.push(k),
                Normalized::Trivial => {}
                Normalized::Contradiction => unreachable!("feasibility already certified"),
            }
        }
        let cs = merge_sorted(cs);
        let mut kept: Vec<Constraint> = Vec::new();
        for (i, c) in cs.iter().enumerate() {
            let mut others: Vec<RatConstraint> = kept.iter().map(|k| k.to_rat()).collect();
            others.extend(cs[i + 1..].iter().map(|k| k.to_rat()));
            others.push(c.negation());
            if feasible(dim, &others) {
                kept.push(c.clone());
            }
        }
        Ok(Polytope { dim, constraints: kept })
    }

    pub fn whole_space(dim: usize) -> Polytope {
        Polytope { dim, constraints: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn contains(&self, p: &[Q]) -> bool {
        p.len() == self.dim && self.constraints.iter().all(|c| c.holds(p))
    }

    fn check_member(&self, p: &[Q]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::BadDim(format!("point has {} coordinates, polytope lives in R^{}", p.len(), self.dim)));
        }
        if !self.contains(p) {
            let s: Vec<String> = p.iter().map(fmt_q).collect();
            return Err(Error::NotMember(format!("({}) is not in the polytope", s.join(", "))));
        }
        Ok(())
    }

    /// Indices of constraints tight at `p`.
    pub fn active_face(&self, p: &[Q]) -> Result<Vec<usize>> {
        self.check_member(p)?;
        Ok(self.constraints.iter().enumerate().filter(|(_, c)| c.value(p) == c.b).map(|(i, _)| i).collect())
    }

    /// Whether every point of `self` satisfies `c`.
    pub fn implies(&self, c: &RatConstraint) -> bool {
        let mut sys: Vec<RatConstraint> = self.constraints.iter().map(|k| k.to_rat()).collect();
        sys.push(RatConstraint { a: c.a.iter().map(|v| -v.clone()).collect(), b: -c.b.clone(), strict: !c.strict });
        !feasible(self.dim, &sys)
    }

    pub fn is_subset_of(&self, other: &Polytope) -> bool {
        self.dim == other.dim && other.constraints.iter().all(|c| self.implies(&c.to_rat()))
    }

    pub fn set_eq(&self, other: &Polytope) -> bool {
        self.is_subset_of(other) && other.is_subset_of(self)
    }

    /// All constraints made non-strict.
    pub fn closure(&self) -> Polytope {
        let cs = self.constraints.iter().map(|c| Constraint { strict: false, ..c.clone() }).collect();
        Polytope::from_constraints(self.dim, cs).expect("closure of a nonempty polytope is nonempty")
    }

    /// Closed as a subset of R^m.
    pub fn is_complete(&self) -> bool {
        let cl = self.closure();
        self.constraints.iter().filter(|c| c.strict).all(|c| cl.implies(&c.to_rat()))
    }

    /// The union of rays from `p` meeting `self` in more than one point,
    /// computed as the tangent cone at `p`.
    pub fn tropical_completion(&self, p: &[Q]) -> Result<Polytope> {
        let act = self.active_face(p)?;
        let cs = act.iter().map(|&i| Constraint { strict: false, ..self.constraints[i].clone() }).collect();
        Polytope::from_constraints(self.dim, cs)
    }

    /// Vertices (0-dimensional faces), sorted.
    pub fn vertices(&self) -> Vec<Vec<Q>> {
        let m = self.dim;
        if m == 0 {
            return vec![vec![]];
        }
        let closed: Vec<&Constraint> = self.constraints.iter().filter(|c| !c.strict).collect();
        let mut out: Vec<Vec<Q>> = Vec::new();
        let mut idx: Vec<usize> = (0..m).collect();
        if closed.len() < m {
            return out;
        }
        loop {
            let rows: Vec<&Constraint> = idx.iter().map(|&i| closed[i]).collect();
            if let Some(x) = solve_exact(&rows) {
                if self.contains(&x) && !out.contains(&x) {
                    out.push(x);
                }
            }
            // next combination
            let mut k = m;
            loop {
                if k == 0 {
                    out.sort();
                    return out;
                }
                k -= 1;
                if idx[k] < closed.len() - (m - k) {
                    idx[k] += 1;
                    for t in k + 1..m {
                        idx[t] = idx[t - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    pub fn is_bounded(&self) -> bool {
        // bounded iff the recession cone is {0}: for each ±e_i direction the cone a·d ≥ 0 forces it out
        let rec = self.recession_cone();
        (0..self.dim).all(|i| {
            [1i64, -1].iter().all(|&s| {
                let mut a = vec![Q::zero(); self.dim];
                a[i] = q_int(s);
                // is there d in rec with s*d_i > 0 ?
                let mut sys: Vec<RatConstraint> = rec.constraints.iter().map(|c| c.to_rat()).collect();
                sys.push(RatConstraint { a, b: Q::zero(), strict: true });
                !feasible(self.dim, &sys)
            })
        })
    }

    pub fn recession_cone(&self) -> Polytope {
        let cs = self.constraints.iter().map(|c| Constraint { a: c.a.clone(), b: Q::zero(), strict: false }).collect();
        Polytope::from_constraints(self.dim, cs).expect("recession cone contains 0")
    }

    pub fn to_json(&self) -> PolytopeJson {
        PolytopeJson {
            dim: self.dim,
            constraints: self
                .constraints
                .iter()
                .map(|c| ConstraintJson { a: c.a.iter().map(|v| v.to_i64().expect("normal entry fits in i64")).collect(), b: fmt_q(&c.b), strict: c.strict })
                .collect(),
        }
    }

    pub fn from_json(j: &PolytopeJson) -> Result<Polytope> {
        let mut cs = Vec::new();
        for c in &j.constraints {
            cs.push(Constraint::new(c.a.clone(), parse_q(&c.b)?, c.strict));
        }
        Polytope::from_constraints(j.dim, cs)
    }
}

impl fmt::Display for Polytope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.constraints.is_empty() {
            return write!(f, "R^{}", self.dim);
        }
        let s: Vec<String> = self.constraints.iter().map(|c| c.to_string()).collect();
        write!(f, "{{{}}}", s.join("; "))
    }
}

fn solve_exact(rows: &[&Constraint]) -> Option<Vec<Q>> {
    let m = rows.len();
    let mut a: Vec<Vec<Q>> = rows
        .iter()
        .map(|c| {
            let mut r: Vec<Q> = c.a.iter().map(|v| Q::from_integer(v.clone())).collect();
            r.push(c.b.clone());
            r
        })
        .collect();
    for col in 0..m {
        let piv = (col..m).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, piv);
        let pv = a[col][col].clone();
        for j in col..=m {
            a[col][j] = &a[col][j] / &pv;
        }
        for r in 0..m {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for j in col..=m {
                    let t = &f * &a[col][j];
                    a[r][j] -= t;
                }
            }
        }
    }
    Some(a.into_iter().map(|r| r[m].clone()).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConstraintJson {
    pub a: Vec<i64>,
    pub b: String,
    pub strict: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PolytopeJson {
    pub dim: usize,
    pub constraints: Vec<ConstraintJson>,
}

pub fn point_from_json(v: &[String]) -> Result<Vec<Q>> {
    v.iter().map(|s| parse_q(s)).collect()
}

pub fn point_to_json(p: &[Q]) -> Vec<String> {
    p.iter().map(fmt_q).collect()
}

/// `x ↦ M x + c` with integer `M`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegralAffineMap {
    pub matrix: Vec<Vec<BigInt>>,
    pub translation: Vec<Q>,
    pub source_dim: usize,
}

impl IntegralAffineMap {
    pub fn new(matrix: Vec<Vec<i64>>, translation: Vec<Q>, source_dim: usize) -> Result<Self> {
        if matrix.len() != translation.len() || matrix.iter().any(|r| r.len() != source_dim) {
            return Err(Error::BadDim("affine map matrix/translation shapes disagree".into()));
        }
        Ok(IntegralAffineMap { matrix: matrix.into_iter().map(|r| r.into_iter().map(BigInt::from).collect()).collect(), translation, source_dim })
    }

    pub fn identity(dim: usize) -> Self {
        let m = (0..dim).map(|i| (0..dim).map(|j| i64::from(i == j)).collect()).collect();
        IntegralAffineMap::new(m, vec![Q::zero(); dim], dim).unwrap()
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.len()
    }

    pub fn apply(&self, x: &[Q]) -> Vec<Q> {
        self.matrix
            .iter()
            .zip(&self.translation)
            .map(|(row, c)| {
                let mut s = c.clone();
                for (m, xi) in row.iter().zip(x) {
                    if !m.is_zero() {
                        s += xi * Q::from_integer(m.clone());
                    }
                }
                s
            })
            .collect()
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &IntegralAffineMap) -> IntegralAffineMap {
        let k = self.target_dim();
        let m = inner.source_dim;
        let mut mat = vec![vec![BigInt::zero(); m]; k];
        for i in 0..k {
            for j in 0..m {
                let mut s = BigInt::zero();
                for l in 0..inner.target_dim() {
                    s += &self.matrix[i][l] * &inner.matrix[l][j];
                }
                mat[i][j] = s;
            }
        }
        IntegralAffineMap { matrix: mat, translation: self.apply(&inner.translation), source_dim: m }
    }

    /// The constraint on the source pulled back from a target constraint.
    fn pull_constraint(&self, c: &Constraint) -> RatConstraint {
        let mut a = vec![Q::zero(); self.source_dim];
        let mut shift = Q::zero();
        for (l, al) in c.a.iter().enumerate() {
            let al = Q::from_integer(al.clone());
            for (j, aj) in a.iter_mut().enumerate() {
                *aj += &al * Q::from_integer(self.matrix[l][j].clone());
            }
            shift += &al * &self.translation[l];
        }
        RatConstraint { a, b: &c.b - shift, strict: c.strict }
    }

    /// Exact test of `f(P) ⊆ Q`.
    pub fn maps_into(&self, p: &Polytope, q: &Polytope) -> bool {
        p.dim() == self.source_dim && q.dim() == self.target_dim() && q.constraints().iter().all(|c| p.implies(&self.pull_constraint(c)))
    }
}

/// A map between completions, with its verified domain and codomain.
#[derive(Clone, Debug)]
pub struct CompletedMap {
    pub map: IntegralAffineMap,
    pub domain: Polytope,
    pub codomain: Polytope,
}

pub fn tropical_complete_map(f: &IntegralAffineMap, p_poly: &Polytope, p: &[Q], q_poly: &Polytope) -> Result<CompletedMap> {
    if !f.maps_into(p_poly, q_poly) {
        return Err(Error::NotMapped(format!("f(P) is not contained in Q (P = {p_poly}, Q = {q_poly})")));
    }
    let dom = p_poly.tropical_completion(p)?;
    let fp = f.apply(p);
    let cod = q_poly.tropical_completion(&fp)?;
    if !f.maps_into(&dom, &cod) {
        // containment of completions is a theorem for affine maps
        return Err(Error::NotMapped(format!("internal: completion {dom} not mapped into {cod}")));
    }
    Ok(CompletedMap { map: f.clone(), domain: dom, codomain: cod })
}

/// Lexicographic comparison helper for sorting points.
pub fn cmp_points(a: &[Q], b: &[Q]) -> Ordering {
    a.cmp(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(a: &[i64], b: Q, strict: bool) -> Constraint {
        Constraint::new(a.to_vec(), b, strict)
    }

    fn unit_interval() -> Polytope {
        Polytope::from_constraints(1, vec![c(&[1], q_int(0), false), c(&[-1], q_int(-1), false)]).unwrap()
    }

    #[test]
    fn ray_from_single_halfspace() {
        let p = Polytope::from_constraints(1, vec![c(&[1], q_int(0), false)]).unwrap();
        assert_eq!(p.constraints().len(), 1);
        assert!(p.contains(&[q_int(5)]));
        assert!(!p.contains(&[q_int(-1)]));
    }

    #[test]
    fn contradictory_constraints_are_infeasible() {
        let r = Polytope::from_constraints(1, vec![c(&[1], q_int(0), false), c(&[-1], q_int(1), false)]);
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn open_point_is_infeasible_but_closed_point_is_not() {
        assert!(Polytope::from_constraints(1, vec![c(&[1], q_int(0), true), c(&[-1], q_int(0), false)]).is_err());
        let pt = Polytope::from_constraints(1, vec![c(&[1], q_int(0), false), c(&[-1], q_int(0), false)]).unwrap();
        assert_eq!(pt.vertices(), vec![vec![q_int(0)]]);
    }

    #[test]
    fn dimension_mismatch() {
        let r = Polytope::from_constraints(2, vec![c(&[1], q_int(0), false)]);
        assert!(matches!(r, Err(Error::BadDim(_))));
    }

    #[test]
    fn canonical_form_is_primitive_and_deduplicated() {
        let p = Polytope::from_constraints(2, vec![c(&[2, 4], q_int(2), false), c(&[1, 2], q_int(0), false), c(&[3, 6], q_int(3), true), c(&[1, 0], q_int(-5), false)]).unwrap();
        // 2x+4y≥2, x+2y≥0, 3x+6y>3 collapse to x+2y>1; x≥-5 stays
        assert_eq!(p.constraints().len(), 2);
        assert!(p.constraints().iter().any(|k| k.a == vec![BigInt::from(1), BigInt::from(2)] && k.b == q_int(1) && k.strict));
    }

    #[test]
    fn redundant_constraints_are_removed() {
        let p = Polytope::from_constraints(2, vec![c(&[1, 0], q_int(0), false), c(&[0, 1], q_int(0), false), c(&[1, 1], q_int(-1), false)]).unwrap();
        assert_eq!(p.constraints().len(), 2);
    }

    #[test]
    fn active_faces() {
        let i = unit_interval();
        assert_eq!(i.active_face(&[q_int(0)]).unwrap().len(), 1);
        assert!(i.active_face(&[q_frac(1, 2)]).unwrap().is_empty());
        let sq =
            Polytope::from_constraints(2, vec![c(&[1, 0], q_int(0), false), c(&[-1, 0], q_int(-1), false), c(&[0, 1], q_int(0), false), c(&[0, -1], q_int(-1), false)]).unwrap();
        let act = sq.active_face(&[q_int(0), q_int(0)]).unwrap();
        assert_eq!(act.len(), 2);
        for i in act {
            assert!(sq.constraints()[i].b.is_zero());
        }
        assert!(matches!(i.active_face(&[q_int(2)]), Err(Error::NotMember(_))));
    }

    #[test]
    fn completion_examples() {
        let i = unit_interval();
        let half_line = Polytope::from_constraints(1, vec![c(&[1], q_int(0), false)]).unwrap();
        assert_eq!(i.tropical_completion(&[q_int(0)]).unwrap(), half_line);
        assert_eq!(i.tropical_completion(&[q_frac(1, 2)]).unwrap(), Polytope::whole_space(1));
        let strip = Polytope::from_constraints(2, vec![c(&[1, 0], q_int(0), false), c(&[0, 1], q_int(0), false), c(&[0, -1], q_int(-1), false)]).unwrap();
        let quadrant = Polytope::from_constraints(2, vec![c(&[1, 0], q_int(0), false), c(&[0, 1], q_int(0), false)]).unwrap();
        assert_eq!(strip.tropical_completion(&[q_int(0), q_int(0)]).unwrap(), quadrant);
    }

    #[test]
    fn completeness_examples() {
        let closed = Polytope::from_constraints(1, vec![c(&[1], q_int(0), false)]).unwrap();
        let open = Polytope::from_constraints(1, vec![c(&[1], q_int(0), true)]).unwrap();
        assert!(closed.is_complete());
        assert!(!open.is_complete());
        assert!(Polytope::whole_space(3).is_complete());
        // a strict constraint that never touches the closure is harmless
        let p = Polytope::from_constraints(1, vec![c(&[1], q_int(0), false), c(&[-1], q_int(-1), false)]).unwrap();
        assert!(p.is_complete());
    }

    #[test]
    fn vertices_of_basic_polytopes() {
        assert_eq!(unit_interval().vertices(), vec![vec![q_int(0)], vec![q_int(1)]]);
        let half = Polytope::from_constraints(1, vec![c(&[1], q_int(0), false)]).unwrap();
        assert_eq!(half.vertices(), vec![vec![q_int(0)]]);
        assert!(Polytope::whole_space(1).vertices().is_empty());
        let open = Polytope::from_constraints(1, vec![c(&[1], q_int(0), true)]).unwrap();
        assert!(open.vertices().is_empty());
        assert_eq!(Polytope::whole_space(0).vertices(), vec![Vec::<Q>::new()]);
    }

    #[test]
    fn map_completion_examples() {
        let i = unit_interval();
        let id = IntegralAffineMap::identity(1);
        let cm = tropical_complete_map(&id, &i, &[q_int(0)], &i).unwrap();
        assert_eq!(cm.domain, Polytope::from_constraints(1, vec![c(&[1], q_int(0), false)]).unwrap());

        let dbl = IntegralAffineMap::new(vec![vec![2]], vec![q_int(0)], 1).unwrap();
        let i2 = Polytope::from_constraints(1, vec![c(&[1], q_int(0), false), c(&[-1], q_int(-2), false)]).unwrap();
        let cm = tropical_complete_map(&dbl, &i, &[q_int(0)], &i2).unwrap();
        assert_eq!(cm.codomain, Polytope::from_constraints(1, vec![c(&[1], q_int(0), false)]).unwrap());

        let diag = IntegralAffineMap::new(vec![vec![1], vec![1]], vec![q_int(0), q_int(0)], 1).unwrap();
        let sq =
            Polytope::from_constraints(2, vec![c(&[1, 0], q_int(0), false), c(&[-1, 0], q_int(-1), false), c(&[0, 1], q_int(0), false), c(&[0, -1], q_int(-1), false)]).unwrap();
        let cm = tropical_complete_map(&diag, &i, &[q_frac(1, 2)], &sq).unwrap();
        assert_eq!(cm.domain, Polytope::whole_space(1));
        assert_eq!(cm.codomain, Polytope::whole_space(2));

        assert!(matches!(tropical_complete_map(&dbl, &i, &[q_int(0)], &i), Err(Error::NotMapped(_))));
    }

    #[test]
    fn parse_and_format_rationals() {
        assert_eq!(parse_q("3/6").unwrap(), q_frac(1, 2));
        assert_eq!(parse_q("-0.25").unwrap(), q_frac(-1, 4));
        assert_eq!(parse_q("7").unwrap(), q_int(7));
        assert!(parse_q("1/0").is_err());
        assert!(parse_q("x").is_err());
        assert_eq!(fmt_q(&q_frac(-2, 4)), "-1/2");
        assert_eq!(fmt_q(&q_int(3)), "3");
    }

    #[test]
    fn json_round_trip() {
        let p = Polytope::from_constraints(2, vec![c(&[1, 0], q_frac(1, 3), true), c(&[0, 1], q_int(0), false)]).unwrap();
        let j = serde_json::to_string(&p.to_json()).unwrap();
        let back: PolytopeJson = serde_json::from_str(&j).unwrap();
        assert_eq!(Polytope::from_json(&back).unwrap(), p);
    }

    #[test]
    fn boundedness() {
        assert!(unit_interval().is_bounded());
        assert!(!Polytope::from_constraints(1, vec![c(&[1], q_int(0), false)]).unwrap().is_bounded());
    }
}
