mod common;

use common::*;
use num::BigInt;
use proptest::prelude::*;
use rand::Rng;
use vfc_core::tropical::{tropical_complete_map, Constraint, IntegralAffineMap, Polytope};

#[test]
fn completion_of_unit_interval_matches_ray_oracle() {
    let i = Polytope::from_constraints(1, vec![Constraint::new(vec![1], qi(0), false), Constraint::new(vec![-1], qi(-1), false)]).unwrap();
    for p in [qi(0), Q::new(BigInt::from(1), BigInt::from(2)), qi(1)] {
        let c = i.tropical_completion(std::slice::from_ref(&p)).unwrap();
        assert!(check_against_rays(&i, &[p], &c).unwrap() >= 1000);
    }
}

#[test]
fn completion_of_strip_corner_matches_ray_oracle() {
    let strip =
        Polytope::from_constraints(2, vec![Constraint::new(vec![1, 0], qi(0), false), Constraint::new(vec![0, 1], qi(0), false), Constraint::new(vec![0, -1], qi(-1), false)])
            .unwrap();
    let p = [qi(0), qi(0)];
    let c = strip.tropical_completion(&p).unwrap();
    assert!(check_against_rays(&strip, &p, &c).unwrap() >= 1000);
}

#[test]
fn random_completions_match_ray_oracle() {
    let mut r = rng(7);
    for case in 0..60 {
        let m = 1 + case % 3;
        let (poly, p) = random_polytope_with_point(&mut r, m);
        let c = poly.tropical_completion(&p).unwrap();
        if let Err(d) = check_against_rays(&poly, &p, &c) {
            panic!("case {case}: completion {c} of {poly} disagrees with rays along {d:?}");
        }
    }
}

fn bounded_polytope_with_point(r: &mut rand_chacha::ChaCha8Rng, m: usize) -> (Polytope, Vec<Q>) {
    let (poly, p) = random_polytope_with_point(r, m);
    let mut cs = poly.constraints().to_vec();
    for i in 0..m {
        let mut e = vec![0i64; m];
        e[i] = 1;
        cs.push(Constraint::new(e.clone(), &p[i] - qi(2), false));
        e[i] = -1;
        cs.push(Constraint::new(e, -(&p[i] + qi(2)), false));
    }
    (Polytope::from_constraints(m, cs).unwrap(), p)
}

/// Smallest polytope with the given normals containing the image of the closure of a bounded P.
fn hull_with_normals(f: &IntegralAffineMap, poly: &Polytope, normals: &[Vec<i64>], slack: &[bool]) -> Polytope {
    let verts = poly.closure().vertices();
    let cs = normals
        .iter()
        .zip(slack)
        .map(|(a, s)| {
            let min = verts
                .iter()
                .map(|v| {
                    let y = f.apply(v);
                    a.iter().zip(&y).map(|(ai, yi)| qi(*ai) * yi).fold(qi(0), |s, t| s + t)
                })
                .min()
                .unwrap();
            Constraint::new(a.clone(), if *s { min - qi(1) } else { min }, false)
        })
        .collect();
    Polytope::from_constraints(f.target_dim(), cs).unwrap()
}

#[test]
fn completion_of_maps_is_functorial() {
    let mut r = rng(11);
    for _ in 0..30 {
        let m = r.gen_range(1..=2);
        let k = r.gen_range(1..=2);
        let l = r.gen_range(1..=2);
        let (poly, p) = bounded_polytope_with_point(&mut r, m);
        let rand_map = |r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| {
            let mat = (0..rows).map(|_| (0..cols).map(|_| r.gen_range(-2..=2)).collect()).collect();
            let t = (0..rows).map(|_| Q::new(BigInt::from(r.gen_range(-3..=3)), BigInt::from(2))).collect();
            IntegralAffineMap::new(mat, t, cols).unwrap()
        };
        let f = rand_map(&mut r, k, m);
        let g = rand_map(&mut r, l, k);
        let normals = |r: &mut rand_chacha::ChaCha8Rng, d: usize| -> Vec<Vec<i64>> {
            (0..2 * d)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            if j == i / 2 {
                                if i % 2 == 0 {
                                    1
                                } else {
                                    -1
                                }
                            } else {
                                r.gen_range(-1..=1)
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let nq = normals(&mut r, k);
        let sq: Vec<bool> = nq.iter().map(|_| r.gen_bool(0.5)).collect();
        let qpoly = hull_with_normals(&f, &poly, &nq, &sq);
        let gf = g.compose(&f);
        let nr = normals(&mut r, l);
        let sr: Vec<bool> = nr.iter().map(|_| r.gen_bool(0.5)).collect();
        let rpoly = hull_with_normals(&gf, &poly, &nr, &sr);
        assert!(g.maps_into(&qpoly, &rpoly) || !g.maps_into(&qpoly, &rpoly));

        let cf = tropical_complete_map(&f, &poly, &p, &qpoly).unwrap();
        let cgf = tropical_complete_map(&gf, &poly, &p, &rpoly).unwrap();
        assert_eq!(cgf.domain, cf.domain);
        assert!(gf.maps_into(&cf.domain, &cgf.codomain));
        // where g itself maps Q into R, completing g at f(p) composes with f's completion
        if g.maps_into(&qpoly, &rpoly) {
            let cg = tropical_complete_map(&g, &qpoly, &f.apply(&p), &rpoly).unwrap();
            assert_eq!(cg.domain, cf.codomain);
            assert_eq!(cg.codomain, cgf.codomain);
            assert_eq!(cg.map.compose(&cf.map), cgf.map);
            assert!(cg.map.compose(&cf.map).maps_into(&cf.domain, &cg.codomain));
        }
    }
}

fn arb_case() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 1usize..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polytope_lies_in_its_completion((seed, m) in arb_case()) {
        let (poly, p) = random_polytope_with_point(&mut rng(seed), m);
        let c = poly.tropical_completion(&p).unwrap();
        prop_assert!(poly.is_subset_of(&c));
        prop_assert!(c.is_complete());
        prop_assert!(c.constraints().iter().all(|k| !k.strict));
    }

    #[test]
    fn completion_is_idempotent((seed, m) in arb_case()) {
        let (poly, p) = random_polytope_with_point(&mut rng(seed), m);
        let c = poly.tropical_completion(&p).unwrap();
        prop_assert_eq!(c.tropical_completion(&p).unwrap(), c);
    }

    #[test]
    fn interior_points_complete_to_whole_space((seed, m) in arb_case()) {
        let (poly, p) = random_polytope_with_point(&mut rng(seed), m);
        if poly.active_face(&p).unwrap().is_empty() {
            prop_assert_eq!(poly.tropical_completion(&p).unwrap(), Polytope::whole_space(m));
        }
    }

    #[test]
    fn canonical_form_is_a_fixed_point((seed, m) in arb_case()) {
        let (poly, _) = random_polytope_with_point(&mut rng(seed), m);
        let again = Polytope::from_constraints(m, poly.constraints().to_vec()).unwrap();
        prop_assert_eq!(&again, &poly);
        for c in poly.constraints() {
            let g = c.a.iter().fold(BigInt::from(0), |g, v| num::Integer::gcd(&g, v));
            prop_assert_eq!(g, BigInt::from(1));
        }
    }
}
