//! Acceptance run: one pass/fail line per criterion. Exits nonzero if any fails.

mod common;

use common::*;
use nalgebra::DMatrix;
use num::BigInt;
use num_complex::Complex64 as C64;
use rand::Rng;
use std::sync::Arc;
use std::time::Instant;
use vfc_core::branched::{BranchSpace, Pullback};
use vfc_core::charts::Form;
use vfc_core::scenario::{fixture, Scenario, FIXTURES};
use vfc_core::sheaves::{chart_seed_in, global_section, ChartFn, FunctionSheaf, MetricSheaf, SectionOptions};
use vfc_core::suites::{build_class, Context, Flags, Status, Suite, SuiteResult, SEED_COUNT, STOKES_FORMS};
use vfc_core::tropical::{Constraint, Polytope};
use vfc_core::vint::{integrate_vclass, Partition, PartitionShape};

struct Outcome {
    pass: bool,
    detail: String,
}

fn ok(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fail(detail: impl Into<String>) -> Outcome {
    ok(false, detail)
}

fn completion() -> Outcome {
    let t = Instant::now();
    let mut r = rng(2024);
    let mut dirs = 0;
    for case in 0..60 {
        let m = 1 + case % 3;
        let (poly, p) = random_polytope_with_point(&mut r, m);
        let c = match poly.tropical_completion(&p) {
            Ok(c) => c,
            Err(e) => return fail(format!("case {case}: {e}")),
        };
        match check_against_rays(&poly, &p, &c) {
            Ok(n) => dirs += n,
            Err(d) => return fail(format!("case {case}: completion {c} of {poly} disagrees with rays along {d:?}")),
        }
        match c.tropical_completion(&p) {
            Ok(cc) if cc.set_eq(&c) => {}
            _ => return fail(format!("case {case}: completion of {c} at the same point is not idempotent")),
        }
    }
    // interior points: every constraint slack
    for case in 0..30 {
        let m = 1 + case % 3;
        let p: Vec<Q> = (0..m).map(|_| Q::new(BigInt::from(r.gen_range(-6..=6)), BigInt::from(r.gen_range(1..=3)))).collect();
        let mut cs = Vec::new();
        for _ in 0..r.gen_range(1..=6) {
            let a: Vec<i64> = (0..m).map(|_| r.gen_range(-3..=3)).collect();
            if a.iter().all(|v| *v == 0) {
                continue;
            }
            let ap: Q = a.iter().zip(&p).map(|(ai, pi)| qi(*ai) * pi).fold(qi(0), |s, t| s + t);
            cs.push(Constraint::new(a, ap - Q::new(BigInt::from(r.gen_range(1..=8)), BigInt::from(r.gen_range(1..=4))), r.gen_bool(0.5)));
        }
        let poly = Polytope::from_constraints(m, cs).expect("slack constraints are feasible");
        match poly.tropical_completion(&p) {
            Ok(c) if c.set_eq(&Polytope::whole_space(m)) => {}
            _ => return fail(format!("interior case {case}: completion of {poly} is not R^{m}")),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ok(secs < 10.0, format!("60 polytopes, {dirs} ray directions, 30 interior points, {secs:.2}s (limit 10s)"))
}

fn global_sections() -> Outcome {
    let t = Instant::now();
    let s = match fixture("three_chart") {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let k = s.k.clone();
    let orders: Vec<usize> = k.charts.iter().map(|c| c.group.order()).collect();
    if orders != [1, 2, 3] {
        return fail(format!("three_chart has groups of orders {orders:?}"));
    }
    let f: ChartFn<f64> = Arc::new(|_, _, x: &[f64]| 1.0 + x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v * v).sum::<f64>());
    let fs = match global_section(k.clone(), Arc::new(FunctionSheaf), chart_seed_in(k.clone(), Arc::new(FunctionSheaf), 0, f), SectionOptions::default()) {
        Ok(s) => s,
        Err(e) => return fail(format!("functions: {e}")),
    };
    let rf = match fs.verify(1e-9) {
        Ok(r) => r,
        Err(e) => return fail(format!("functions: {e}")),
    };
    let rank = k.charts[0].rank;
    let m: ChartFn<DMatrix<C64>> = Arc::new(move |_, _, x: &[f64]| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        DMatrix::from_fn(rank, rank, |i, j| if i == j { C64::new(1.0 + r2 + i as f64, 0.0) } else { C64::new(0.1, 0.05 * (j as f64 - i as f64)) })
    });
    let sheaf = Arc::new(MetricSheaf { sigma: 1.0 });
    let ms = match global_section(k.clone(), sheaf.clone(), chart_seed_in(k.clone(), sheaf, 0, m), SectionOptions::default()) {
        Ok(s) => s,
        Err(e) => return fail(format!("metrics: {e}")),
    };
    let rm = match ms.verify(1e-9) {
        Ok(r) => r,
        Err(e) => return fail(format!("metrics: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let seeded = rf.seed_points > 0 && rm.seed_points > 0;
    ok(
        seeded && secs < 30.0,
        format!(
            "functions: {} points, {} pairs, {} on K1; metrics: {} points, {} pairs, {} on K1; {secs:.2}s (limit 30s)",
            rf.points, rf.pairs, rf.seed_points, rm.points, rm.pairs, rm.seed_points
        ),
    )
}

fn counts() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, want) in [("dbar_z", 1.0), ("dbar_z2", 2.0), ("z2_equivariant", 1.0), ("dbar_zbar", -1.0)] {
        let got = fixture(name).and_then(|s| {
            let vc = build_class(&s)?;
            let part = Partition::new(vc.k.clone(), vc.cut.clone(), vc.eps, PartitionShape::Quintic)?;
            let ones: Vec<Form> = s.chart_dims().iter().map(|&n| Form::constant(n, 1.0)).collect();
            integrate_vclass(&vc, &ones, &part)
        });
        match got {
            Ok(v) => {
                pass &= (v - want).abs() <= 1e-8;
                parts.push(format!("{name} {v:.10}"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    ok(pass, parts.join(", "))
}

/// Runs `suite` on each context; fixtures where it does not apply are listed, not counted.
fn over_fixtures(ctxs: &[(String, Context)], suite: Suite, run: impl Fn(&Context) -> vfc_core::Result<SuiteResult> + Sync) -> (Outcome, Vec<(String, SuiteResult)>) {
    let mut applied = Vec::new();
    let mut skipped = Vec::new();
    let mut worst: f64 = 0.0;
    let mut results = Vec::new();
    for (name, ctx) in ctxs {
        match run(ctx) {
            Ok(r) => {
                match r.status() {
                    Status::Pass => applied.push(name.clone()),
                    Status::Fail => {
                        let bad = r.checks.iter().find(|c| !c.pass).map(|c| format!("{}: {:e} vs {:e}", c.name, c.lhs, c.rhs)).unwrap_or_default();
                        return (fail(format!("{name} fails {}: {bad}", suite.name())), results);
                    }
                    Status::NotApplicable => skipped.push(format!("{name} ({})", r.note.clone().unwrap_or_default())),
                }
                worst = worst.max(r.worst());
                results.push((name.clone(), r));
            }
            Err(e) => return (fail(format!("{name}: {e}")), results),
        }
    }
    let mut detail = format!("worst {worst:.2e} on {}", applied.join(", "));
    if !skipped.is_empty() {
        detail.push_str(&format!("; vacuous: {}", skipped.join(", ")));
    }
    (ok(!applied.is_empty(), detail), results)
}

fn named<'a>(ctxs: &'a [(String, Context)], names: &[&str]) -> Vec<(String, &'a Context)> {
    names.iter().filter_map(|n| ctxs.iter().find(|(m, _)| m == n).map(|(m, c)| (m.clone(), c))).collect()
}

fn required(ctxs: &[(String, Context)], names: &[&str], suite: Suite) -> Outcome {
    let found = named(ctxs, names);
    if found.len() != names.len() {
        return fail(format!("missing fixtures among {names:?}"));
    }
    let mut parts = Vec::new();
    for (name, ctx) in found {
        match ctx.run(suite) {
            Ok(r) if r.status() == Status::Pass => parts.push(format!("{name} worst {:.2e} over {} checks", r.worst(), r.checks.len())),
            Ok(r) => return fail(format!("{name}: {} ({})", r.status().name(), r.note.unwrap_or_default())),
            Err(e) => return fail(format!("{name}: {e}")),
        }
    }
    ok(true, parts.join("; "))
}

fn branch_measures(scenarios: &[Scenario]) -> Outcome {
    let mut spaces = vec![BranchSpace::singleton(), BranchSpace::uniform(2, true), BranchSpace::uniform(3, false), BranchSpace::uniform(6, true)];
    let mut branched = Vec::new();
    for s in scenarios.iter().filter(|s| s.k.charts.iter().any(|c| c.group.order() > 1)) {
        let mut s = s.clone();
        s.build.force_branching = true;
        match build_class(&s) {
            Ok(vc) if vc.charts.iter().any(|c| c.branching) => {
                branched.push(s.name.clone());
                spaces.push(vc.branch_space());
            }
            // no chart with a nontrivial group carries a core
            Ok(_) => {}
            Err(e) => return fail(format!("{}: {e}", s.name)),
        }
    }
    if branched.is_empty() {
        return fail("no fixture branches");
    }
    let mut checked = 0;
    for a in &spaces {
        if !a.is_probability() {
            return fail(format!("measure {:?} does not sum to 1", a.mu));
        }
        for b in &spaces {
            let p = a.product(b);
            let n2 = b.len();
            let first = Pullback { map: (0..p.len()).map(|i| i / n2).collect() };
            let second = Pullback { map: (0..p.len()).map(|i| i % n2).collect() };
            let good = p.is_probability() && p.total() == a.total() * b.total() && first.preserves_measure(&p, a) && second.preserves_measure(&p, b);
            if !good {
                return fail(format!("product of {:?} and {:?} breaks a measure identity", a.mu, b.mu));
            }
            checked += 1;
        }
        // refining every branch into two halves
        let fine = BranchSpace::discrete(a.mu.iter().flat_map(|m| [m / qi(2), m / qi(2)]).collect());
        let refine = Pullback { map: (0..fine.len()).map(|i| i / 2).collect() };
        if !fine.is_probability() || !refine.preserves_measure(&fine, a) {
            return fail(format!("refinement of {:?} does not preserve the measure", a.mu));
        }
    }
    ok(true, format!("{} spaces ({} from branched fixtures: {}), {checked} products, exact rationals", spaces.len(), branched.len(), branched.join(", ")))
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: u32, title: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((n, title, o, t.elapsed().as_secs_f64()));
        let (n, title, o, secs) = results.last().unwrap();
        println!("criterion {n:>2} {:4} {title} [{secs:.2}s]: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };

    timed(1, "tropical completion", &mut completion);
    timed(2, "global sections on three_chart", &mut global_sections);
    timed(3, "virtual class counts", &mut counts);

    let mut scenarios = Vec::new();
    let mut ctxs = Vec::new();
    let mut build_errors = Vec::new();
    for (name, _) in FIXTURES {
        match fixture(name).and_then(|s| Context::new(&s, &Flags::default()).map(|c| (s, c))) {
            Ok((s, c)) => {
                scenarios.push(s);
                ctxs.push((name.to_string(), c));
            }
            Err(e) => build_errors.push(format!("{name}: {e}")),
        }
    }
    let all_built = build_errors.is_empty();
    let with_builds = |o: Outcome| if all_built { o } else { fail(format!("{}; build errors: {}", o.detail, build_errors.join("; "))) };

    timed(4, "partition independence", &mut || with_builds(over_fixtures(&ctxs, Suite::Partition, |c| c.partition()).0));
    timed(5, "Stokes", &mut || with_builds(over_fixtures(&ctxs, Suite::Stokes, |c| c.stokes(STOKES_FORMS)).0));
    timed(6, "adjunction and configuration independence", &mut || {
        let (o, rs) = over_fixtures(&ctxs, Suite::Adjunction, |c| c.adjunction());
        let across = rs.iter().filter(|(_, r)| r.checks.iter().any(|c| c.name.contains("configuration 0 vs"))).count();
        if o.pass && across == 0 {
            return fail("no fixture compares two configurations");
        }
        with_builds(ok(o.pass, format!("{}; {across} fixtures compare two configurations", o.detail)))
    });
    timed(7, "seed independence", &mut || with_builds(over_fixtures(&ctxs, Suite::Seed, |c| c.seeds(SEED_COUNT)).0));
    timed(8, "weak product", &mut || required(&ctxs, &["product"], Suite::WeakProduct));
    timed(9, "tropical decomposition", &mut || required(&ctxs, &["t1_ray", "two_vertex"], Suite::Tropical));
    timed(10, "branched-cover measures", &mut || branch_measures(&scenarios));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass in {:.1}s", results.len() - failed.len(), results.len(), total.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
