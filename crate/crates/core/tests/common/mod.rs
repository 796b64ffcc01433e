#![allow(dead_code)]

use num::{BigInt, BigRational, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfc_core::tropical::{Constraint, Polytope};

pub type Q = BigRational;

pub fn qi(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

/// A random convex polytope in R^m together with a point of it. Roughly half the
/// constraints are tight at the point, so faces of every dimension show up.
pub fn random_polytope_with_point(rng: &mut ChaCha8Rng, m: usize) -> (Polytope, Vec<Q>) {
    loop {
        let p: Vec<Q> = (0..m).map(|_| Q::new(BigInt::from(rng.gen_range(-6..=6)), BigInt::from(rng.gen_range(1..=3)))).collect();
        let k = rng.gen_range(1..=6);
        let mut cs = Vec::new();
        for _ in 0..k {
            let a: Vec<i64> = (0..m).map(|_| rng.gen_range(-3..=3)).collect();
            if a.iter().all(|v| *v == 0) {
                continue;
            }
            let ap: Q = a.iter().zip(&p).map(|(ai, pi)| qi(*ai) * pi).fold(Q::zero(), |s, t| s + t);
            let tight = rng.gen_bool(0.5);
            let (b, strict) = if tight { (ap, false) } else { (ap - Q::new(BigInt::from(rng.gen_range(1..=8)), BigInt::from(rng.gen_range(1..=4))), rng.gen_bool(0.5)) };
            cs.push(Constraint::new(a, b, strict));
        }
        if let Ok(poly) = Polytope::from_constraints(m, cs) {
            assert!(poly.contains(&p));
            return (poly, p);
        }
    }
}

/// Integer directions on a grid; at least 1000 of them for every m in 1..=3.
pub fn direction_grid(m: usize) -> Vec<Vec<i64>> {
    let r: i64 = match m {
        1 => 500,
        2 => 16,
        _ => 5,
    };
    let mut out = vec![vec![]];
    for _ in 0..m {
        let mut next = Vec::new();
        for d in &out {
            for v in -r..=r {
                let mut e = d.clone();
                e.push(v);
                next.push(e);
            }
        }
        out = next;
    }
    out.retain(|d| d.iter().any(|v| *v != 0));
    out
}

/// Brute-force ray test: does {p + t d : t ≥ 0} meet P in more than one point?
/// By convexity it does iff p + t d ∈ P for all small t > 0. For the generated data the
/// inactive slacks are at least 1/12 and |a·d| ≤ 45, so t = 2^-20 is small enough.
pub fn ray_meets_in_segment(poly: &Polytope, p: &[Q], d: &[i64]) -> bool {
    let eps = Q::new(BigInt::from(1), BigInt::from(1 << 20));
    let x: Vec<Q> = p.iter().zip(d).map(|(pi, di)| pi + &eps * qi(*di)).collect();
    poly.contains(&x)
}

/// Compares a candidate completion against the ray oracle over the direction grid.
/// Returns the number of directions checked, or the first mismatching direction.
pub fn check_against_rays(poly: &Polytope, p: &[Q], completion: &Polytope) -> Result<usize, Vec<i64>> {
    let dirs = direction_grid(poly.dim());
    for d in &dirs {
        let x: Vec<Q> = p.iter().zip(d).map(|(pi, di)| pi + qi(*di)).collect();
        if completion.contains(&x) != ray_meets_in_segment(poly, p, d) {
            return Err(d.clone());
        }
    }
    Ok(dirs.len())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
