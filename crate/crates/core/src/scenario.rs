//! JSON scenarios: chart data, forms, targets and pushforward configurations, plus the
//! shipped fixture library.

use crate::charts::{f64_list, ExplodedChart, Form, JacFn, Region};
use crate::error::{Error, Result};
use crate::expr::{Expr, Layout};
use crate::kcat::{section_from_exprs, weak_product, AffineMap, Group, GroupElement, KChart, KOptions, Kcat, Transition};
use crate::tropical::{Polytope, PolytopeJson};
use crate::vclass::{BuildOptions, SurfaceParam, ZeroOptions};
use crate::vint::{PushConfig, Target};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde_json::Value;
use std::collections::BTreeMap;
use std::sync::Arc;

pub const SCHEMA_VERSION: u64 = 1;

/// Shipped fixtures, by name.
pub const FIXTURES: &[(&str, &str)] = &[
    ("dbar_z", include_str!("../fixtures/dbar_z.json")),
    ("dbar_z2", include_str!("../fixtures/dbar_z2.json")),
    ("dbar_zbar", include_str!("../fixtures/dbar_zbar.json")),
    ("z2_equivariant", include_str!("../fixtures/z2_equivariant.json")),
    ("z2_orbit", include_str!("../fixtures/z2_orbit.json")),
    ("shifted_point", include_str!("../fixtures/shifted_point.json")),
    ("t1_ray", include_str!("../fixtures/t1_ray.json")),
    ("two_vertex", include_str!("../fixtures/two_vertex.json")),
    ("three_chart", include_str!("../fixtures/three_chart.json")),
    ("circle", include_str!("../fixtures/circle.json")),
    ("two_chart_circle", include_str!("../fixtures/two_chart_circle.json")),
    ("torus", include_str!("../fixtures/torus.json")),
    ("product", include_str!("../fixtures/product.json")),
];

pub fn fixture_source(name: &str) -> Result<&'static str> {
    FIXTURES.iter().find(|f| f.0 == name).map(|f| f.1).ok_or_else(|| Error::Schema(format!("no fixture named {name}")))
}

pub fn fixture(name: &str) -> Result<Scenario> {
    Scenario::parse(fixture_source(name)?)
}

/// A loaded scenario.
#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub k: Arc<Kcat>,
    /// Per form name, one form per chart.
    pub forms: BTreeMap<String, Vec<Form>>,
    pub target: Option<Target>,
    pub push: Vec<PushConfig>,
    pub build: BuildOptions,
    /// Expected `∫_[K]` of named forms.
    pub expect: BTreeMap<String, f64>,
    /// Factor scenarios when this is a weak product.
    pub factors: Option<Box<(Scenario, Scenario)>>,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn get<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| schema(format!("missing field {key}")))
}

fn get_usize(v: &Value, key: &str) -> Result<usize> {
    get(v, key)?.as_u64().map(|x| x as usize).ok_or_else(|| schema(format!("{key} must be a nonnegative integer")))
}

fn get_f64(v: &Value, key: &str) -> Result<f64> {
    get(v, key)?.as_f64().ok_or_else(|| schema(format!("{key} must be a number")))
}

fn opt_f64(v: &Value, key: &str, default: f64) -> Result<f64> {
    match v.get(key) {
        None => Ok(default),
        Some(x) => x.as_f64().ok_or_else(|| schema(format!("{key} must be a number"))),
    }
}

fn opt_bool(v: &Value, key: &str) -> Result<bool> {
    match v.get(key) {
        None => Ok(false),
        Some(x) => x.as_bool().ok_or_else(|| schema(format!("{key} must be a boolean"))),
    }
}

fn str_list(v: &Value, what: &str) -> Result<Vec<String>> {
    v.as_array()
        .ok_or_else(|| schema(format!("{what} must be a list of strings")))?
        .iter()
        .map(|s| s.as_str().map(String::from).ok_or_else(|| schema(format!("{what} must be a list of strings"))))
        .collect()
}

fn real_matrix(v: &Value, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
    let r = v.as_array().ok_or_else(|| schema(format!("{what} must be a list of rows")))?;
    if r.len() != rows {
        return Err(Error::BadDim(format!("{what} has {} rows, expected {rows}", r.len())));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, row) in r.iter().enumerate() {
        let vals = f64_list(row)?;
        if vals.len() != cols {
            return Err(Error::BadDim(format!("{what} row {i} has {} entries, expected {cols}", vals.len())));
        }
        for (j, x) in vals.into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(m)
}

/// Complex matrices are written as rows of `[re, im]` pairs.
fn complex_matrix(v: &Value, rows: usize, cols: usize, what: &str) -> Result<DMatrix<C64>> {
    let r = v.as_array().ok_or_else(|| schema(format!("{what} must be a list of rows")))?;
    if r.len() != rows {
        return Err(Error::BadDim(format!("{what} has {} rows, expected {rows}", r.len())));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, row) in r.iter().enumerate() {
        let entries = row.as_array().ok_or_else(|| schema(format!("{what} row {i} must be a list")))?;
        if entries.len() != cols {
            return Err(Error::BadDim(format!("{what} row {i} has {} entries, expected {cols}", entries.len())));
        }
        for (j, e) in entries.iter().enumerate() {
            let p = f64_list(e)?;
            if p.len() != 2 {
                return Err(schema(format!("{what} entries must be [re, im]")));
            }
            m[(i, j)] = C64::new(p[0], p[1]);
        }
    }
    Ok(m)
}

/// A map given by expressions: `{"real": [..]}` uses real parts, `{"complex": [..]}`
/// contributes real and imaginary parts of each expression.
pub fn map_from_json(v: &Value, layout: Layout) -> Result<(usize, JacFn)> {
    let (srcs, complex) = if let Some(r) = v.get("real") {
        (str_list(r, "real map")?, false)
    } else if let Some(c) = v.get("complex") {
        (str_list(c, "complex map")?, true)
    } else {
        return Err(schema("map needs a real or complex expression list"));
    };
    let exprs: Vec<Expr> = srcs.iter().map(|s| Expr::parse(s, layout)).collect::<Result<_>>()?;
    let n = layout.dim();
    let out = if complex { 2 * exprs.len() } else { exprs.len() };
    let f: JacFn = Arc::new(move |x: &[f64]| {
        let mut y = Vec::with_capacity(out);
        let mut jac = Vec::with_capacity(out);
        for e in &exprs {
            let d = e.eval_dual(x, &[]);
            y.push(d.v.re);
            jac.push(d.g[..n].iter().map(|g| g.re).collect());
            if complex {
                y.push(d.v.im);
                jac.push(d.g[..n].iter().map(|g| g.im).collect());
            }
        }
        (y, jac)
    });
    Ok((out, f))
}

fn parse_group(v: Option<&Value>, n: usize, rank: usize) -> Result<Group> {
    let Some(v) = v else { return Ok(Group::trivial(n, rank)) };
    let order = get_usize(v, "order")?;
    let gens = get(v, "generators")?.as_array().ok_or_else(|| schema("generators must be a list"))?;
    let gens = gens
        .iter()
        .map(|g| {
            let lin = real_matrix(get(g, "lin")?, n, n, "lin")?;
            let shift = match g.get("shift") {
                Some(s) => DVector::from_vec(f64_list(s)?),
                None => DVector::zeros(n),
            };
            let v_act = match g.get("v_act") {
                Some(a) => complex_matrix(a, rank, rank, "v_act")?,
                None => DMatrix::identity(rank, rank),
            };
            Ok(GroupElement { lin, shift, v_act })
        })
        .collect::<Result<Vec<_>>>()?;
    Group::generate(n, rank, gens, order)
}

fn parse_chart(v: &Value, base_dim: usize) -> Result<KChart> {
    let name = v.get("name").and_then(Value::as_str).unwrap_or("chart").to_string();
    let n = get_usize(v, "n")?;
    let m = v.get("m").map_or(Ok(0), |_| get_usize(v, "m"))?;
    let dim = n + 2 * m;
    let polytope = match v.get("polytope") {
        Some(p) => {
            let pj: PolytopeJson = serde_json::from_value(p.clone()).map_err(|e| schema(format!("polytope: {e}")))?;
            Polytope::from_json(&pj)?
        }
        None => Polytope::whole_space(m),
    };
    let orientation = v.get("orientation").and_then(Value::as_i64).unwrap_or(1) as i8;
    let region = |key: &str| Region::from_json(get(v, key)?, dim);
    let fs = region("fs")?;
    let chart_region = match v.get("region") {
        Some(_) => region("region")?,
        None => fs.clone(),
    };
    let chart = ExplodedChart::new(n, m, polytope, chart_region, orientation)?;
    let rank = get_usize(v, "rank")?;
    let dbar_src = str_list(get(v, "dbar")?, "dbar")?;
    if dbar_src.len() != rank {
        return Err(Error::BadDim(format!("chart {name}: {} dbar components for rank {rank}", dbar_src.len())));
    }
    let layout = Layout { n, m };
    let exprs = dbar_src.iter().map(|s| Expr::parse(s, layout)).collect::<Result<Vec<_>>>()?;
    let base = match v.get("base") {
        Some(b) => AffineMap { p: real_matrix(get(b, "p")?, base_dim, dim, "base.p")?, q: DVector::from_vec(f64_list(get(b, "q")?)?) },
        None if base_dim == 0 => AffineMap::to_point(dim),
        None => return Err(schema(format!("chart {name} needs a base map"))),
    };
    Ok(KChart {
        name,
        chart,
        f: region("f")?,
        f1: region("f1")?,
        fs,
        u: region("u")?,
        group: parse_group(v.get("group"), dim, rank)?,
        rank,
        dbar: section_from_exprs(exprs),
        dbar_src,
        base,
    })
}

fn parse_form(v: &Value, layout: Layout) -> Result<Form> {
    let degree = get_usize(v, "degree")?;
    let terms = get(v, "terms")?.as_array().ok_or_else(|| schema("terms must be a list"))?;
    let terms = terms
        .iter()
        .map(|t| {
            let idx = get(t, "idx")?
                .as_array()
                .ok_or_else(|| schema("idx must be a list"))?
                .iter()
                .map(|i| i.as_u64().map(|i| i as usize).ok_or_else(|| schema("idx entries must be integers")))
                .collect::<Result<Vec<_>>>()?;
            let e = get(t, "expr")?.as_str().ok_or_else(|| schema("expr must be a string"))?;
            Ok((idx, Expr::parse(e, layout)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Form::from_exprs(layout, degree, terms)
}

fn parse_push(v: &Value) -> Result<PushConfig> {
    let d = get_usize(v, "dim")?;
    Ok(PushConfig::standard(d, opt_f64(v, "angle", 0.0)?, opt_f64(v, "scale", 1.0)?, get_f64(v, "delta")?, v.get("q").and_then(Value::as_u64).unwrap_or(4) as u32))
}

impl Scenario {
    pub fn parse(src: &str) -> Result<Scenario> {
        let v: Value = serde_json::from_str(src).map_err(|e| schema(format!("invalid JSON: {e}")))?;
        Scenario::from_value(&v)
    }

    pub fn from_value(v: &Value) -> Result<Scenario> {
        let version = get(v, "version")?.as_u64().ok_or_else(|| schema("version must be an integer"))?;
        if version != SCHEMA_VERSION {
            return Err(schema(format!("unsupported scenario version {version}")));
        }
        let name = v.get("name").and_then(Value::as_str).unwrap_or("scenario").to_string();
        let opts = v.get("options").cloned().unwrap_or(Value::Null);
        let kopts = KOptions { grid: opt_f64(&opts, "grid", KOptions::default().grid)?, ..KOptions::default() };
        let mut build = BuildOptions {
            seed: opts.get("seed").and_then(Value::as_u64).unwrap_or(1),
            eps: opt_f64(&opts, "eps", 0.1)?,
            force_perturbation: opt_bool(&opts, "force_perturbation")?,
            force_branching: opt_bool(&opts, "force_branching")?,
            ..BuildOptions::default()
        };
        if let Some(n) = opts.get("max_attempts") {
            build.max_attempts = n.as_u64().ok_or_else(|| schema("options.max_attempts must be a nonnegative integer"))? as usize;
        }
        let zd = ZeroOptions::default();
        build.zero = ZeroOptions { per_unit: opt_f64(&opts, "zero_grid", zd.per_unit)?, curve_step: opt_f64(&opts, "curve_step", zd.curve_step)?, ..zd };

        if let Some(wp) = v.get("weak_product") {
            let names = str_list(wp, "weak_product")?;
            if names.len() != 2 {
                return Err(schema("weak_product takes two fixture names"));
            }
            let a = fixture(&names[0])?;
            let b = fixture(&names[1])?;
            let k = weak_product(&a.k, &b.k, None, kopts)?;
            let mut expect = BTreeMap::new();
            if let (Some(x), Some(y)) = (a.expect.get("one"), b.expect.get("one")) {
                expect.insert("one".to_string(), x * y);
            }
            let dims: Vec<usize> = k.charts.iter().map(|c| c.dim()).collect();
            let mut forms = BTreeMap::new();
            forms.insert("one".to_string(), dims.iter().map(|&d| Form::constant(d, 1.0)).collect());
            let target = match (&a.target, &b.target) {
                (Some(ta), Some(tb)) => Some(ta.product(tb, &a.chart_dims(), &b.chart_dims())),
                _ => None,
            };
            let push = a.push.iter().zip(&b.push).map(|(pa, pb)| pa.product(pb)).collect();
            return Ok(Scenario { name, k: Arc::new(k), forms, target, push, build, expect, factors: Some(Box::new((a, b))) });
        }

        let base_dim = v.get("base_dim").map_or(Ok(0), |_| get_usize(v, "base_dim"))?;
        let charts = get(v, "charts")?.as_array().ok_or_else(|| schema("charts must be a list"))?;
        if charts.is_empty() {
            return Err(schema("at least one chart is required"));
        }
        let charts = charts.iter().map(|c| parse_chart(c, base_dim)).collect::<Result<Vec<_>>>()?;
        let layouts: Vec<Layout> = charts.iter().map(|c| c.chart.layout()).collect();
        let mut transitions = Vec::new();
        if let Some(ts) = v.get("transitions") {
            for t in ts.as_array().ok_or_else(|| schema("transitions must be a list"))? {
                let a = get_usize(t, "from")?;
                let b = get_usize(t, "to")?;
                if a >= charts.len() || b >= charts.len() {
                    return Err(schema(format!("transition {a} -> {b} refers to a missing chart")));
                }
                let (na, phi) = map_from_json(get(t, "phi")?, layouts[a])?;
                if na != charts[b].dim() {
                    return Err(Error::BadDim(format!("transition {a} -> {b}: phi has {na} components")));
                }
                let psi = match t.get("psi") {
                    Some(p) => Some(map_from_json(p, layouts[b])?.1),
                    None => None,
                };
                let iota = complex_matrix(get(t, "iota")?, charts[b].rank, charts[a].rank, "iota")?;
                transitions.push(Transition { a, b, domain: Region::from_json(get(t, "domain")?, charts[a].dim())?, phi, psi, iota });
            }
        }
        if let Some(ss) = v.get("surfaces") {
            for s in ss.as_array().ok_or_else(|| schema("surfaces must be a list"))? {
                let chart = get_usize(s, "chart")?;
                if chart >= charts.len() {
                    return Err(schema("surface refers to a missing chart"));
                }
                let (out, map) = map_from_json(get(s, "map")?, Layout { n: 2, m: 0 })?;
                if out != charts[chart].dim() {
                    return Err(Error::BadDim(format!("surface map has {out} components, chart has dimension {}", charts[chart].dim())));
                }
                let lo = f64_list(get(s, "lo")?)?;
                let hi = f64_list(get(s, "hi")?)?;
                if lo.len() != 2 || hi.len() != 2 {
                    return Err(schema("surface bounds must have two entries"));
                }
                build.zero.surfaces.push(SurfaceParam {
                    chart,
                    vertex: s.get("vertex").and_then(Value::as_u64).unwrap_or(0) as usize,
                    map,
                    lo: [lo[0], lo[1]],
                    hi: [hi[0], hi[1]],
                    periodic: opt_bool(s, "periodic")?,
                    samples: s.get("samples").and_then(Value::as_u64).unwrap_or(32) as usize,
                });
            }
        }
        let mut forms = BTreeMap::new();
        forms.insert("one".to_string(), layouts.iter().map(|l| Form::constant(l.dim(), 1.0)).collect::<Vec<_>>());
        if let Some(Value::Object(fs)) = v.get("forms") {
            for (fname, spec) in fs {
                let per: Vec<Form> = match spec.get("per_chart") {
                    Some(list) => {
                        let list = list.as_array().ok_or_else(|| schema("per_chart must be a list"))?;
                        if list.len() != charts.len() {
                            return Err(schema(format!("form {fname}: one entry per chart is required")));
                        }
                        list.iter().zip(&layouts).map(|(f, l)| parse_form(f, *l)).collect::<Result<_>>()?
                    }
                    None => layouts.iter().map(|l| parse_form(spec, *l)).collect::<Result<_>>()?,
                };
                forms.insert(fname.clone(), per);
            }
        }
        let target = match v.get("target") {
            None => None,
            Some(t) => {
                let dim = get_usize(t, "dim")?;
                let maps = get(t, "maps")?.as_array().ok_or_else(|| schema("target maps must be a list"))?;
                let maps: Vec<JacFn> = if maps.len() == 1 && charts.len() > 1 {
                    layouts.iter().map(|l| map_from_json(&maps[0], *l).map(|m| m.1)).collect::<Result<_>>()?
                } else if maps.len() == charts.len() {
                    maps.iter().zip(&layouts).map(|(m, l)| map_from_json(m, *l).map(|m| m.1)).collect::<Result<_>>()?
                } else {
                    return Err(schema("target needs one map, or one per chart"));
                };
                for (m, l) in maps.iter().zip(&layouts) {
                    if m(&vec![0.0; l.dim()]).0.len() != dim {
                        return Err(Error::BadDim(format!("target map does not land in R^{dim}")));
                    }
                }
                Some(Target { dim, maps })
            }
        };
        let push = match v.get("push") {
            None => vec![],
            Some(p) => p.as_array().ok_or_else(|| schema("push must be a list"))?.iter().map(parse_push).collect::<Result<_>>()?,
        };
        let mut expect = BTreeMap::new();
        if let Some(Value::Object(e)) = v.get("expect") {
            for (fname, val) in e {
                if !forms.contains_key(fname) {
                    return Err(schema(format!("expectation for unknown form {fname}")));
                }
                expect.insert(fname.clone(), val.as_f64().ok_or_else(|| schema("expectations must be numbers"))?);
            }
        }
        let k = Kcat::new(charts, transitions, base_dim, kopts);
        Ok(Scenario { name, k: Arc::new(k), forms, target, push, build, expect, factors: None })
    }

    pub fn chart_dims(&self) -> Vec<usize> {
        self.k.charts.iter().map(|c| c.dim()).collect()
    }

    pub fn form(&self, name: &str) -> Result<&[Form]> {
        self.forms.get(name).map(|v| v.as_slice()).ok_or_else(|| schema(format!("scenario has no form named {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_fixture_parses() {
        for (name, _) in FIXTURES {
            let s = fixture(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!s.k.charts.is_empty());
        }
    }

    #[test]
    fn malformed_scenarios_are_schema_errors() {
        assert!(matches!(Scenario::parse("{"), Err(Error::Schema(_))));
        assert!(matches!(Scenario::parse(r#"{"version": 7, "charts": []}"#), Err(Error::Schema(_))));
        assert!(matches!(Scenario::parse(r#"{"version": 1, "charts": []}"#), Err(Error::Schema(_))));
        let bad_region = r#"{"version": 1, "charts": [{"n": 2, "rank": 1, "dbar": ["z"], "f": {"ball": {"center": [0], "radius": 1}}, "f1": {}, "fs": {}, "u": {}}]}"#;
        assert!(Scenario::parse(bad_region).is_err());
    }

    #[test]
    fn complex_maps_split_into_real_parts() {
        let (n, f) = map_from_json(&serde_json::json!({"complex": ["z^2"]}), Layout { n: 2, m: 0 }).unwrap();
        assert_eq!(n, 2);
        let (y, j) = f(&[1.0, 2.0]);
        assert_eq!(y, vec![-3.0, 4.0]);
        assert_eq!(j, vec![vec![2.0, -4.0], vec![4.0, 2.0]]);
    }
}
