use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vfc_core::scenario::{fixture_source, Scenario, FIXTURES};
use vfc_core::suites::{apply_flags, build_class, report, run_suites, sample_box, Context, Flags, Suite, REPORT_VERSION};
use vfc_core::tropical::{point_from_json, point_to_json, Polytope, PolytopeJson};
use vfc_core::vint::{integrate_vclass, pushforward, Partition, PartitionShape};
use vfc_core::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "vfc", version, about = "Build virtual classes of Kuranishi scenarios and check their invariants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON file, or the name of a built-in fixture.
    scenario: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Tolerance for every check (default: per suite).
    #[arg(long)]
    tol: Option<f64>,
    /// Sampling density per unit length for cutoffs and validation.
    #[arg(long)]
    grid: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Tropical completion of a polytope at a point.
    CompletePolytope {
        /// JSON file with `polytope` and `point`.
        input: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check the Kuranishi category axioms on sampled points.
    Validate(Common),
    /// Build the virtual class and print its zero sets.
    Vclass(Common),
    /// Integrate every form of the scenario over the virtual class.
    Integrate {
        #[command(flatten)]
        common: Common,
        /// Only this form.
        #[arg(long)]
        form: Option<String>,
    },
    /// Push a form forward to the target and sample it on a grid.
    Pushforward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        form: Option<String>,
        /// Index of the pushforward configuration.
        #[arg(long, default_value_t = 0)]
        config: usize,
        /// Samples per target axis.
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
    /// Run invariance suites; exits 1 if any check fails.
    Check {
        #[command(flatten)]
        common: Common,
        /// Suite to run (repeatable); all suites when omitted.
        #[arg(long = "suite")]
        suites: Vec<String>,
    },
    /// List the built-in fixtures, or print one.
    Fixtures { name: Option<String> },
}

enum Failure {
    Error(Error),
    Check(Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(Value, Option<PathBuf>), Failure>;

fn load(src: &str) -> Result<Scenario, Error> {
    let text = if Path::new(src).exists() {
        std::fs::read_to_string(src).map_err(|e| Error::Io(format!("{src}: {e}")))?
    } else if FIXTURES.iter().any(|f| f.0 == src) {
        fixture_source(src)?.to_string()
    } else {
        return Err(Error::Io(format!("{src}: no such file or fixture")));
    };
    Scenario::parse(&text)
}

fn flags(c: &Common) -> Flags {
    Flags { seed: c.seed, tol: c.tol, grid: c.grid, eps: c.eps }
}

fn prepared(c: &Common) -> Result<Scenario, Error> {
    Ok(apply_flags(&load(&c.scenario)?, &flags(c)))
}

fn complete_polytope(input: &Path) -> Result<Value, Error> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::Io(format!("{}: {e}", input.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
    let pj: PolytopeJson =
        serde_json::from_value(v.get("polytope").cloned().ok_or_else(|| Error::Schema("missing `polytope`".into()))?).map_err(|e| Error::Schema(format!("polytope: {e}")))?;
    let pt: Vec<String> =
        serde_json::from_value(v.get("point").cloned().ok_or_else(|| Error::Schema("missing `point`".into()))?).map_err(|e| Error::Schema(format!("point: {e}")))?;
    let poly = Polytope::from_json(&pj)?;
    let p = point_from_json(&pt)?;
    let c = poly.tropical_completion(&p)?;
    Ok(json!({
        "version": REPORT_VERSION,
        "polytope": poly.to_json(),
        "point": point_to_json(&p),
        "completion": c.to_json(),
        "complete": c.is_complete(),
        "bounded": c.is_bounded(),
    }))
}

fn integrate(c: &Common, only: Option<&str>) -> Outcome {
    let s = prepared(c)?;
    let vc = build_class(&s)?;
    let part = Partition::new(vc.k.clone(), vc.cut.clone(), vc.eps, PartitionShape::Quintic)?;
    let tol = c.tol.unwrap_or(1e-8);
    let mut rows = Vec::new();
    let mut pass = true;
    for (name, forms) in &s.forms {
        if only.is_some_and(|o| o != name) {
            continue;
        }
        let v = integrate_vclass(&vc, forms, &part)?;
        let mut row = json!({"form": name, "integral": v});
        if let Some(want) = s.expect.get(name) {
            let ok = (v - want).abs() <= tol;
            pass &= ok;
            row["expected"] = json!(want);
            row["tol"] = json!(tol);
            row["pass"] = json!(ok);
        }
        rows.push(row);
    }
    if let Some(o) = only {
        if rows.is_empty() {
            return Err(Error::Schema(format!("no form named {o}")).into());
        }
    }
    let out = json!({"version": REPORT_VERSION, "scenario": s.name, "seed": s.build.seed, "eps": vc.eps, "integrals": rows, "pass": pass});
    if pass {
        Ok((out, c.report.clone()))
    } else {
        Err(Failure::Check(out))
    }
}

fn push(c: &Common, form: Option<&str>, config: usize, samples: usize) -> Outcome {
    let s = prepared(c)?;
    let target = s.target.as_ref().ok_or_else(|| Error::Schema("scenario has no target".into()))?;
    let cfg = s.push.get(config).ok_or_else(|| Error::Schema(format!("no pushforward configuration {config}")))?;
    let name = match form {
        Some(f) => f.to_string(),
        None => s.forms.keys().next().cloned().ok_or_else(|| Error::Schema("scenario has no forms".into()))?,
    };
    let theta = s.form(&name)?;
    let vc = build_class(&s)?;
    let part = Partition::new(vc.k.clone(), vc.cut.clone(), vc.eps, PartitionShape::Quintic)?;
    let pf = pushforward(&vc, target, theta, cfg, &part)?;
    let pts = sample_box(&pf.lo, &pf.hi, samples.max(1));
    let values: Vec<Value> = pts.iter().map(|x| json!({"x": x, "coeffs": pf.form.at(&[], x)})).collect();
    let out = json!({
        "version": REPORT_VERSION,
        "scenario": s.name,
        "seed": s.build.seed,
        "eps": vc.eps,
        "form": name,
        "config": config,
        "degree": pf.form.degree,
        "support": {"lo": pf.lo, "hi": pf.hi},
        "samples": values,
    });
    Ok((out, c.report.clone()))
}

fn check(c: &Common, names: &[String]) -> Outcome {
    let suites: Vec<Suite> = if names.is_empty() { Suite::ALL.to_vec() } else { names.iter().map(|n| Suite::parse(n)).collect::<Result<_, _>>()? };
    let ctx = Context::new(&load(&c.scenario)?, &flags(c))?;
    let results = run_suites(&ctx, &suites);
    // a suite that errors numerically is reported, then decides the exit code
    if let Some(e) = results.iter().filter_map(|(_, r)| r.as_ref().err()).next() {
        let out = report(&ctx, &results);
        write_report(c.report.as_deref(), &out)?;
        emit(&out);
        return Err(Failure::Error(e.clone()));
    }
    let out = report(&ctx, &results);
    if out["pass"] == json!(true) {
        Ok((out, c.report.clone()))
    } else {
        Err(Failure::Check(out))
    }
}

/// Prints to stdout; a closed pipe is not an error.
fn emit(v: &Value) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{}", pretty(v));
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON values serialize")
}

fn write_report(path: Option<&Path>, v: &Value) -> Result<(), Error> {
    if let Some(p) = path {
        std::fs::write(p, pretty(v) + "\n").map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn dispatch(cmd: &Command) -> Outcome {
    match cmd {
        Command::CompletePolytope { input, report } => Ok((complete_polytope(input)?, report.clone())),
        Command::Validate(c) => {
            let s = prepared(c)?;
            let r = s.k.validate()?;
            Ok((json!({"version": REPORT_VERSION, "scenario": s.name, "charts": s.k.charts.len(), "points_checked": r.points_checked, "valid": true}), c.report.clone()))
        }
        Command::Vclass(c) => {
            let s = prepared(c)?;
            let vc = build_class(&s)?;
            let mut v = vc.to_json();
            v["version"] = json!(REPORT_VERSION);
            v["scenario"] = json!(s.name);
            v["branch_space"] = vc.branch_space().to_json();
            Ok((v, c.report.clone()))
        }
        Command::Integrate { common, form } => integrate(common, form.as_deref()),
        Command::Pushforward { common, form, config, samples } => push(common, form.as_deref(), *config, *samples),
        Command::Check { common, suites } => check(common, suites),
        Command::Fixtures { name } => match name {
            Some(n) => {
                let src: Value = serde_json::from_str(fixture_source(n)?).map_err(|e| Error::Schema(e.to_string()))?;
                Ok((src, None))
            }
            None => Ok((json!(FIXTURES.iter().map(|f| f.0).collect::<Vec<_>>()), None)),
        },
    }
}

fn report_path(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::CompletePolytope { report, .. } => report.as_deref(),
        Command::Validate(c) | Command::Vclass(c) => c.report.as_deref(),
        Command::Integrate { common, .. } | Command::Pushforward { common, .. } | Command::Check { common, .. } => common.report.as_deref(),
        Command::Fixtures { .. } => None,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok((v, path)) => match write_report(path.as_deref(), &v) {
            Ok(()) => {
                emit(&v);
                ExitCode::SUCCESS
            }
            Err(e) => fail_with(&e),
        },
        Err(Failure::Check(v)) => {
            if let Err(e) = write_report(report_path(&cli.command), &v) {
                return fail_with(&e);
            }
            emit(&v);
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => fail_with(&e),
    }
}

fn fail_with(e: &Error) -> ExitCode {
    eprintln!("{}", json!({"error": e.code(), "message": e.to_string()}));
    match e.class() {
        ErrorClass::Input => ExitCode::from(2),
        ErrorClass::Numerical => ExitCode::from(3),
    }
}
