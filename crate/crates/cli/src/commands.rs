//! Subcommand implementations. Each writes its artifacts to the output
//! directory and returns the list of failed checks.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use funcito::backwards::{ito_convergence, kbe_residual_profile, KbeTarget, ProbePlan};
use funcito::calculus::{
    horizontal_derivative, probe_vertical_property, symmetric_bumps, vertical_gradient, vertical_hessian,
};
use funcito::comparison::{derive_seed, run_scenario, ComparisonScenario, Verdict};
use funcito::functionals::{AsianSquareBrownian, EstimatedValuation, Functional, FunctionalSpec, ScalarFn};
use funcito::models::{mean_se, simulate_stream, simulate_with_ledger};
use funcito::pathspace::{stop, stop_pre, StoppedPath};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ValuationKind, SCHEMA_VERSION};

/// Sub-seed tags; the same tags are used by the comparison module.
const TAG_VALUATION: u64 = 3;
const TAG_PROBES: u64 = 4;

pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub failures: Vec<String>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a ExperimentConfig,
    report: T,
}

fn write_json<T: Serialize>(path: &Path, command: &str, cfg: &ExperimentConfig, report: T) -> Result<()> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        command,
        config: cfg,
        report,
    };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn section<'a, T>(block: &'a Option<T>, name: &str) -> Result<&'a T> {
    block
        .as_ref()
        .with_context(|| format!("config has no [{name}] section"))
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let sc = section(&cfg.simulate, "simulate")?;
    let model = cfg.model(&sc.model)?;
    let grid = cfg.grid()?;
    let n_write = sc.write_paths.unwrap_or(sc.n_paths).min(sc.n_paths);
    let width = (sc.n_paths.max(2) - 1).to_string().len();
    let mut files = Vec::new();
    let counts = (0..sc.n_paths as u64)
        .into_par_iter()
        .map(|i| -> Result<(u32, Option<PathBuf>)> {
            let (p, ledger) = simulate_with_ledger(model, &grid, cfg.seed, i);
            let file = if (i as usize) < n_write {
                let path = out.join(format!("path_{:0width$}.csv", i, width = width));
                let mut w = create(&path)?;
                p.to_csv(&mut w)?;
                w.flush()?;
                Some(path)
            } else {
                None
            };
            Ok((ledger.jump_counts.iter().sum(), file))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut jump_counts = Vec::with_capacity(counts.len());
    for (c, f) in counts {
        jump_counts.push(c as f64);
        files.extend(f);
    }
    let (mean, se) = mean_se(&jump_counts);
    #[derive(Serialize)]
    struct Manifest<'a> {
        model: &'a str,
        seed: u64,
        stream_rule: &'static str,
        n_paths: usize,
        files: Vec<String>,
        jump_count_mean: f64,
        jump_count_se: f64,
    }
    let manifest = Manifest {
        model: &sc.model,
        seed: cfg.seed,
        stream_rule: "path i uses ChaCha8 seeded with `seed`, stream i",
        n_paths: sc.n_paths,
        files: files
            .iter()
            .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
        jump_count_mean: mean,
        jump_count_se: se,
    };
    let path = out.join("manifest.json");
    write_json(&path, "simulate", cfg, manifest)?;
    files.push(path);
    Ok(Outcome {
        files,
        failures: vec![],
    })
}

pub fn check_ito(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let c = section(&cfg.check_ito, "check_ito")?;
    let f = cfg.functional(&c.functional)?;
    let model = cfg.model(&c.model)?;
    for &n in &c.ladder {
        let grid = funcito::pathspace::TimeGrid::new(cfg.grid.horizon, n)?;
        f.validate(&grid)
            .with_context(|| format!("functional `{}` on the {n}-step grid", c.functional))?;
    }
    let table = ito_convergence(
        f,
        &c.functional,
        model,
        cfg.grid.horizon,
        &c.ladder,
        c.n_paths,
        cfg.seed,
        &c.derivatives,
        c.qv,
        c.min_order,
    )?;
    let csv_path = out.join("ito_convergence.csv");
    let mut w = create(&csv_path)?;
    writeln!(w, "n_steps,mean_abs_residual,se")?;
    for r in &table.rows {
        writeln!(w, "{},{:.16e},{:.16e}", r.n_steps, r.mean_abs_residual, r.se)?;
    }
    w.flush()?;
    let json_path = out.join("ito_report.json");
    write_json(&json_path, "check-ito", cfg, &table)?;
    let mut failures = vec![];
    if !table.pass {
        failures.push(format!(
            "check-ito {} x {}: fitted order {:?} below {}",
            c.functional, c.model, table.fitted_order, table.min_order
        ));
    }
    Ok(Outcome {
        files: vec![csv_path, json_path],
        failures,
    })
}

fn is_asian_square(f: &FunctionalSpec) -> bool {
    matches!(
        f,
        FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square
        }
    )
}

pub fn check_kbe(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let c = section(&cfg.check_kbe, "check_kbe")?;
    let f = cfg.functional(&c.functional)?;
    let model = cfg.model(&c.model)?;
    let chars_name = c.characteristics.as_deref().unwrap_or(&c.model);
    let chars_model = cfg.model(chars_name)?;
    let grid = cfg.grid()?;
    let plan = ProbePlan {
        n_paths: c.n_paths,
        n_time_probes: c.n_time_probes,
        seed: derive_seed(cfg.seed, TAG_PROBES),
    };
    let estimated;
    let closed;
    let target = match c.valuation {
        ValuationKind::Estimated => {
            if !f.is_terminal_payoff() {
                bail!("the estimated valuation needs a terminal payoff, got `{}`", f.name());
            }
            estimated = EstimatedValuation::new(
                f.clone(),
                model.clone(),
                grid,
                c.m_valuation,
                derive_seed(cfg.seed, TAG_VALUATION),
            )?;
            KbeTarget::Estimated(&estimated)
        }
        ValuationKind::ClosedForm => {
            if !is_asian_square(f) {
                bail!("the closed-form valuation covers the Asian square payoff only");
            }
            closed = AsianSquareBrownian::from_model(model, grid)?;
            KbeTarget::Exact(&closed)
        }
        ValuationKind::Direct => KbeTarget::Exact(f),
    };
    let name = format!("{}[{}]", c.functional, c.model);
    let report = kbe_residual_profile(target, &name, chars_model, &grid, &plan, &c.derivatives, &c.tolerance)?;
    let csv_path = out.join("kbe_probes.csv");
    let mut w = create(&csv_path)?;
    writeln!(w, "path,index,residual,se,tol,within")?;
    for p in &report.probes {
        writeln!(
            w,
            "{},{},{:.16e},{:.16e},{:.16e},{}",
            p.path,
            p.index,
            p.residual,
            p.se,
            p.tol,
            p.residual.abs() <= p.tol
        )?;
    }
    w.flush()?;
    let json_path = out.join("kbe_report.json");
    write_json(&json_path, "check-kbe", cfg, &report)?;
    let mut failures = vec![];
    if report.pass == c.expect_fail {
        failures.push(format!(
            "check-kbe {name} with `{chars_name}` characteristics: pass rate {:.3} ({} expected)",
            report.pass_rate,
            if c.expect_fail { "failure" } else { "pass" }
        ));
    }
    Ok(Outcome {
        files: vec![csv_path, json_path],
        failures,
    })
}

/// The comparison scenario described by the `[compare]` section.
pub fn scenario(cfg: &ExperimentConfig) -> Result<ComparisonScenario> {
    let c = section(&cfg.compare, "compare")?;
    Ok(ComparisonScenario {
        grid: cfg.grid()?,
        model_x: cfg.model(&c.model_x)?.clone(),
        model_y: cfg.model(&c.model_y)?.clone(),
        payoff: cfg.functional(&c.payoff)?.clone(),
        theorem: c.theorem,
        reversed: c.reversed,
        budgets: c.budgets,
        tolerances: c.tolerances,
        derivatives: c.derivatives.clone(),
        seed: cfg.seed,
    })
}

pub fn compare(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let c = section(&cfg.compare, "compare")?;
    let report = run_scenario(&scenario(cfg)?)?;
    let csv_path = out.join("order_summary.csv");
    let mut w = create(&csv_path)?;
    writeln!(w, "row,samples,min_slack,mean_slack,pass_rate,ex,ey,se_x,se_y,margin,verdict")?;
    let h = &report.hypotheses;
    for chk in &h.checks {
        writeln!(
            w,
            "{},{},{:.16e},{:.16e},,,,,,,{}",
            chk.name,
            chk.samples,
            chk.min_slack,
            chk.mean_slack,
            if chk.pass { "pass" } else { "fail" }
        )?;
    }
    writeln!(
        w,
        "kbe_{},{},,,{:.16e},,,,,,{}",
        h.kbe.operator,
        h.kbe.n_probes,
        h.kbe.pass_rate,
        if h.kbe.pass { "pass" } else { "fail" }
    )?;
    for p in &h.properties {
        writeln!(w, "{},{},{:.16e},,,,,,,,{}", p.property, p.samples, p.min_slack, p.verdict)?;
    }
    let k = &report.conclusion;
    let verdict = match k.verdict {
        Verdict::Ordered => "ordered",
        Verdict::Violated => "violated",
    };
    writeln!(
        w,
        "conclusion,{},,,,{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
        c.budgets.n_out, k.ex, k.ey, k.se_x, k.se_y, k.margin, verdict
    )?;
    w.flush()?;
    let json_path = out.join("order_report.json");
    write_json(&json_path, "compare", cfg, &report)?;
    let mut failures = vec![];
    for chk in h.checks.iter().filter(|c| !c.pass) {
        failures.push(format!("compare: hypothesis {} has slack {:e}", chk.name, chk.min_slack));
    }
    if !h.kbe.pass {
        failures.push(format!(
            "compare: backward equation pass rate {:.3} along the lower model",
            h.kbe.pass_rate
        ));
    }
    for p in h.properties.iter().filter(|p| !p.passed()) {
        failures.push(format!("compare: {} fails with slack {:e}", p.property, p.min_slack));
    }
    if k.verdict == Verdict::Violated {
        failures.push(format!("compare: conclusion violated with margin {:.3}", k.margin));
    }
    Ok(Outcome {
        files: vec![csv_path, json_path],
        failures,
    })
}

#[derive(Serialize)]
struct ProbeRow {
    path: usize,
    index: usize,
    value: f64,
    horizontal: f64,
    gradient: f64,
    hessian: f64,
}

pub fn probe(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let c = section(&cfg.probe, "probe")?;
    let f = cfg.functional(&c.functional)?;
    let model = cfg.model(&c.model)?;
    let grid = cfg.grid()?;
    let n = grid.n_steps();
    let room = c.derivatives.m_h * if c.derivatives.richardson { 2 } else { 1 };
    if room > n {
        bail!("horizontal step of {room} grid steps exceeds the grid");
    }
    let valuation = match c.m_valuation {
        Some(m) => Some(EstimatedValuation::new(
            f.clone(),
            model.clone(),
            grid,
            m,
            derive_seed(cfg.seed, TAG_VALUATION),
        )?),
        None => None,
    };
    let target: &dyn Functional = match &valuation {
        Some(v) => v,
        None => f,
    };
    let probe_seed = derive_seed(cfg.seed, TAG_PROBES);
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    rng.set_stream(u64::MAX);
    let indices: Vec<usize> = (0..c.n_paths).map(|_| rng.gen_range(0..=n - room)).collect();
    let points = indices
        .iter()
        .enumerate()
        .map(|(i, &k)| -> Result<StoppedPath> {
            let p = simulate_stream(model, &grid, probe_seed, i as u64);
            Ok(if k == 0 { stop(&p, 0)? } else { stop_pre(&p, k)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = points
        .par_iter()
        .enumerate()
        .map(|(i, sp)| -> Result<ProbeRow> {
            Ok(ProbeRow {
                path: i,
                index: sp.stop_index(),
                value: target.eval(sp)?,
                horizontal: horizontal_derivative(target, sp, &c.derivatives)?,
                gradient: vertical_gradient(target, sp, &c.derivatives)?[0],
                hessian: vertical_hessian(target, sp, &c.derivatives)?.matrix[(0, 0)],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bumps = symmetric_bumps(c.bump, 2);
    let properties = c
        .properties
        .iter()
        .map(|p| probe_vertical_property(target, *p, &points, &bumps, c.tolerance, &c.derivatives))
        .collect::<funcito::Result<Vec<_>>>()?;
    let csv_path = out.join("probe.csv");
    let mut w = create(&csv_path)?;
    writeln!(w, "path,index,value,horizontal,gradient,hessian")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.path, r.index, r.value, r.horizontal, r.gradient, r.hessian
        )?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Report<'a> {
        target: String,
        points: &'a [ProbeRow],
        properties: &'a [funcito::calculus::ConvexityReport],
    }
    let json_path = out.join("probe_report.json");
    write_json(
        &json_path,
        "probe",
        cfg,
        Report {
            target: match c.m_valuation {
                Some(m) => format!("valuation of {} over {} ({m} continuations)", c.functional, c.model),
                None => c.functional.clone(),
            },
            points: &rows,
            properties: &properties,
        },
    )?;
    let failures = properties
        .iter()
        .filter(|p| !p.passed())
        .map(|p| format!("probe: {} fails with slack {:e}", p.property, p.min_slack))
        .collect();
    Ok(Outcome {
        files: vec![csv_path, json_path],
        failures,
    })
}
