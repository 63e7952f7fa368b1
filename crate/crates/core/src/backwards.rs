//! Functional Itô formula residuals and the backward operators `U` and `Ū`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{DerivativeConfig, Scheme};
use crate::error::{Error, Result};
use crate::functionals::{EstimatedValuation, Functional};
use crate::models::{mean_se, simulate_stream, Characteristics, ModelSpec};
use crate::pathspace::{horizontal_extend, stop, stop_pre, vertical_bump, GridPath, StoppedPath, TimeGrid};

/// Source of the continuous quadratic variation in the Itô residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QvSource {
    /// Squared continuous increments of the path itself.
    #[default]
    Realized,
    /// `c·dt` from the model's characteristics.
    Model,
}

/// The four sums on the right of the functional Itô formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItoTerms {
    /// `F(T, X^T) − F(0, X^0)`.
    pub lhs: f64,
    /// `Σ 𝒟F·dt`.
    pub horizontal: f64,
    /// `Σ ∇F·ΔX`, continuous increments and jumps.
    pub stochastic: f64,
    /// `½ Σ ∇²F·Δ[X]^c`.
    pub quadratic: f64,
    /// `Σ_jumps [F(X^s) − F(X^{s−}) − ∇F·ΔX]`.
    pub jump_correction: f64,
}

impl ItoTerms {
    pub fn residual(&self) -> f64 {
        self.lhs - (self.horizontal + self.stochastic + self.quadratic + self.jump_correction)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Discretized functional Itô formula along one path.
///
/// For the step `(t_k, t_{k+1}]` the integrands are evaluated at `X^{t_k}`,
/// which is `X^{s−}` for every `s` inside the step. A step whose end index
/// carries a jump flag is treated as a jump at `t_{k+1}`, evaluated at
/// `stop_pre(p, k + 1)`.
pub fn ito_residual<F: Functional + ?Sized>(
    f: &F,
    p: &GridPath,
    model: &ModelSpec,
    cfg: &DerivativeConfig,
    qv: QvSource,
) -> Result<ItoTerms> {
    let n = p.grid().n_steps();
    let dt = p.grid().dt();
    let d = p.dim();
    let mut terms = ItoTerms {
        lhs: f.eval(&stop(p, n)?)? - f.eval(&stop(p, 0)?)?,
        horizontal: 0.0,
        stochastic: 0.0,
        quadratic: 0.0,
        jump_correction: 0.0,
    };
    for k in 0..n {
        let at = stop(p, k)?;
        let base = f.eval(&at)?;
        terms.horizontal += crate::calculus::horizontal_derivative_with_base(f, &at, base, cfg)? * dt;
        if p.is_jump(k + 1) {
            let pre = stop_pre(p, k + 1)?;
            let post = stop(p, k + 1)?;
            let jump = p.jump(k + 1);
            let grad = crate::calculus::vertical_gradient(f, &pre, cfg)?;
            let lin = dot(&grad, &jump);
            terms.stochastic += lin;
            terms.jump_correction += f.eval(&post)? - f.eval(&pre)? - lin;
            if qv == QvSource::Model {
                terms.quadratic += quad_model(f, &at, base, model, k, cfg)? * dt;
            }
        } else {
            let inc: Vec<f64> = (0..d).map(|c| p.value(k + 1)[c] - p.value(k)[c]).collect();
            let grad = crate::calculus::vertical_gradient(f, &at, cfg)?;
            terms.stochastic += dot(&grad, &inc);
            let hess = crate::calculus::vertical_hessian_with_base(f, &at, base, cfg)?.matrix;
            terms.quadratic += match qv {
                QvSource::Realized => {
                    let mut q = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            q += hess[(i, j)] * inc[i] * inc[j];
                        }
                    }
                    0.5 * q
                }
                QvSource::Model => quad_model(f, &at, base, model, k, cfg)? * dt,
            };
        }
    }
    Ok(terms)
}

fn quad_model<F: Functional + ?Sized>(
    f: &F,
    at: &StoppedPath,
    base: f64,
    model: &ModelSpec,
    k: usize,
    cfg: &DerivativeConfig,
) -> Result<f64> {
    let c = model.characteristics_at(k, at).c;
    let hess = crate::calculus::vertical_hessian_with_base(f, at, base, cfg)?.matrix;
    Ok(0.5 * hess.component_mul(&c).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoResidualReport {
    pub functional: String,
    pub model: String,
    pub n_steps: usize,
    pub qv: QvSource,
    pub residuals: Vec<f64>,
    pub mean_abs: f64,
    pub se_abs: f64,
}

/// Residuals over `n_paths` simulated paths (streams `0..n_paths` of `seed`).
#[allow(clippy::too_many_arguments)]
pub fn ito_residual_batch<F: Functional + ?Sized>(
    f: &F,
    functional: &str,
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    cfg: &DerivativeConfig,
    qv: QvSource,
) -> Result<ItoResidualReport> {
    if n_paths == 0 {
        return Err(Error::EmptySampleSet);
    }
    let residuals = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let p = simulate_stream(model, grid, seed, i);
            ito_residual(f, &p, model, cfg, qv).map(|t| t.residual())
        })
        .collect::<Result<Vec<f64>>>()?;
    let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let (mean_abs, se_abs) = mean_se(&abs);
    Ok(ItoResidualReport {
        functional: functional.to_string(),
        model: model.name().to_string(),
        n_steps: grid.n_steps(),
        qv,
        residuals,
        mean_abs,
        se_abs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n_steps: usize,
    pub mean_abs_residual: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub functional: String,
    pub model: String,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log mean|r|` against `log dt`.
    pub fitted_order: Option<f64>,
    /// Every rung is at rounding level, so there is no order to fit.
    pub exact: bool,
    pub min_order: f64,
    pub pass: bool,
}

/// Slope of `log y` against `log x`.
pub fn fit_order(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Absolute residual below which a rung counts as exact.
pub const EXACT_RESIDUAL: f64 = 1e-9;

/// Itô residual over a ladder of grid sizes and the fitted convergence order.
#[allow(clippy::too_many_arguments)]
pub fn ito_convergence<F: Functional + ?Sized>(
    f: &F,
    functional: &str,
    model: &ModelSpec,
    horizon: f64,
    ladder: &[usize],
    n_paths: usize,
    seed: u64,
    cfg: &DerivativeConfig,
    qv: QvSource,
    min_order: f64,
) -> Result<ConvergenceTable> {
    let mut rows = Vec::with_capacity(ladder.len());
    for (r, &n) in ladder.iter().enumerate() {
        let grid = TimeGrid::new(horizon, n)?;
        let rep = ito_residual_batch(f, functional, model, &grid, n_paths, seed.wrapping_add(r as u64), cfg, qv)?;
        rows.push(ConvergenceRow {
            n_steps: n,
            mean_abs_residual: rep.mean_abs,
            se: rep.se_abs,
        });
    }
    let dts: Vec<f64> = rows.iter().map(|r| horizon / r.n_steps as f64).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_abs_residual).collect();
    let exact = means.iter().all(|m| *m <= EXACT_RESIDUAL);
    let fitted_order = fit_order(&dts, &means);
    let pass = exact || fitted_order.is_some_and(|a| a >= min_order);
    Ok(ConvergenceTable {
        functional: functional.to_string(),
        model: model.name().to_string(),
        rows,
        fitted_order,
        exact,
        min_order,
        pass,
    })
}

/// Terms of the backward operators at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OperatorTerms {
    /// `𝒟F` (time drift density 1).
    pub horizontal: f64,
    /// `½ Σ ∇²_{ij}F c^{ij}`.
    pub diffusion: f64,
    /// `∫ H_F(x) K(dx)`.
    pub jump: f64,
    /// `Σ ∇_i F b^i`.
    pub drift: f64,
}

impl OperatorTerms {
    pub fn u(&self) -> f64 {
        self.horizontal + self.diffusion + self.jump
    }

    pub fn ubar(&self) -> f64 {
        self.u() + self.drift
    }
}

type VecEval<'a> = dyn Fn(&StoppedPath) -> Result<Vec<f64>> + Sync + 'a;

/// Operator terms for every component returned by `eval`, all computed from
/// one set of stencil points.
#[allow(clippy::needless_range_loop)]
fn operator_terms_vec(
    eval: &VecEval<'_>,
    d: usize,
    chars: &Characteristics,
    sp: &StoppedPath,
    h: f64,
    h2: f64,
    cfg: &DerivativeConfig,
) -> Result<Vec<OperatorTerms>> {
    if chars.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: chars.dim(),
        });
    }
    let dt = sp.grid().dt();
    let m = cfg.m_h.max(1);
    let base = eval(sp)?;
    let comps = base.len();
    let ext = eval(&horizontal_extend(sp, m)?)?;
    let ext2 = if cfg.richardson {
        Some(eval(&horizontal_extend(sp, 2 * m)?)?)
    } else {
        None
    };
    let unit = |i: usize, s: f64| {
        let mut e = vec![0.0; d];
        e[i] = s;
        e
    };
    let mut grad = vec![vec![0.0; d]; comps];
    for i in 0..d {
        let up = eval(&vertical_bump(sp, &unit(i, h))?)?;
        match cfg.scheme {
            Scheme::Central => {
                let dn = eval(&vertical_bump(sp, &unit(i, -h))?)?;
                for j in 0..comps {
                    grad[j][i] = (up[j] - dn[j]) / (2.0 * h);
                }
            }
            Scheme::Forward => {
                for j in 0..comps {
                    grad[j][i] = (up[j] - base[j]) / h;
                }
            }
        }
    }
    let mut diffusion = vec![0.0; comps];
    for i in 0..d {
        for l in 0..d {
            let c = chars.c[(i, l)];
            if c == 0.0 {
                continue;
            }
            let second: Vec<f64> = if i == l {
                let up = eval(&vertical_bump(sp, &unit(i, h2))?)?;
                let dn = eval(&vertical_bump(sp, &unit(i, -h2))?)?;
                (0..comps).map(|j| (up[j] - 2.0 * base[j] + dn[j]) / (h2 * h2)).collect()
            } else {
                let nested = |si: f64, sl: f64| -> Result<Vec<f64>> {
                    let first = vertical_bump(sp, &unit(i, si * h2))?;
                    eval(&vertical_bump(&first, &unit(l, sl * h2))?)
                };
                let (pp, pm, mp, mm) = (nested(1.0, 1.0)?, nested(1.0, -1.0)?, nested(-1.0, 1.0)?, nested(-1.0, -1.0)?);
                (0..comps)
                    .map(|j| (pp[j] - pm[j] - mp[j] + mm[j]) / (4.0 * h2 * h2))
                    .collect()
            };
            for j in 0..comps {
                diffusion[j] += 0.5 * second[j] * c;
            }
        }
    }
    let mut jump = vec![0.0; comps];
    for atom in &chars.kernel {
        if atom.intensity == 0.0 {
            continue;
        }
        let bumped = eval(&vertical_bump(sp, &atom.size)?)?;
        for j in 0..comps {
            let hj = bumped[j] - base[j] - dot(&grad[j], &atom.size);
            jump[j] += atom.intensity * hj;
        }
    }
    (0..comps)
        .map(|j| {
            let one = (ext[j] - base[j]) / (m as f64 * dt);
            let horizontal = match &ext2 {
                Some(e2) => 2.0 * one - (e2[j] - base[j]) / (2.0 * m as f64 * dt),
                None => one,
            };
            let t = OperatorTerms {
                horizontal,
                diffusion: diffusion[j],
                jump: jump[j],
                drift: dot(&grad[j], &chars.b),
            };
            if [t.horizontal, t.diffusion, t.jump, t.drift].iter().all(|v| v.is_finite()) {
                Ok(t)
            } else {
                Err(Error::DerivativeBlowup(sp.stop_index()))
            }
        })
        .collect()
}

/// `𝒟F`, `½∇²F:c`, `∫H_F dK` and `∇F·b` at `sp_pre`.
pub fn operator_terms<F: Functional + ?Sized>(
    f: &F,
    chars: &Characteristics,
    sp_pre: &StoppedPath,
    cfg: &DerivativeConfig,
) -> Result<OperatorTerms> {
    let h = cfg.grad_step(f, sp_pre);
    let h2 = cfg.hess_step(f, sp_pre);
    let eval = |sp: &StoppedPath| -> Result<Vec<f64>> { Ok(vec![f.eval(sp)?]) };
    Ok(operator_terms_vec(&eval, f.dim(), chars, sp_pre, h, h2, cfg)?[0])
}

/// `U F = 𝒟F + ½ Σ ∇²_{ij}F c^{ij} + ∫ H_F(x) K(dx)`.
pub fn u_op<F: Functional + ?Sized>(
    f: &F,
    chars: &Characteristics,
    sp_pre: &StoppedPath,
    cfg: &DerivativeConfig,
) -> Result<f64> {
    Ok(operator_terms(f, chars, sp_pre, cfg)?.u())
}

/// `Ū F = U F + Σ ∇_i F b^i`.
pub fn ubar_op<F: Functional + ?Sized>(
    f: &F,
    chars: &Characteristics,
    sp_pre: &StoppedPath,
    cfg: &DerivativeConfig,
) -> Result<f64> {
    Ok(operator_terms(f, chars, sp_pre, cfg)?.ubar())
}

/// Operator value at one point with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorEstimate {
    pub terms: OperatorTerms,
    pub value: f64,
    pub se: f64,
}

/// `U` (or `Ū` when `with_drift`) of a Monte Carlo valuation, with the
/// standard error taken from the per-continuation operator values. All
/// continuations share the stencil steps of the averaged valuation.
pub fn valuation_operator(
    g: &EstimatedValuation,
    chars: &Characteristics,
    sp_pre: &StoppedPath,
    cfg: &DerivativeConfig,
    with_drift: bool,
) -> Result<OperatorEstimate> {
    let h = cfg.grad_step(g, sp_pre);
    let h2 = cfg.hess_step(g, sp_pre);
    let eval = |sp: &StoppedPath| g.eval_samples(sp);
    let per = operator_terms_vec(&eval, 1, chars, sp_pre, h, h2, cfg)?;
    let m = per.len() as f64;
    let mut terms = OperatorTerms::default();
    for t in &per {
        terms.horizontal += t.horizontal;
        terms.diffusion += t.diffusion;
        terms.jump += t.jump;
        terms.drift += t.drift;
    }
    terms.horizontal /= m;
    terms.diffusion /= m;
    terms.jump /= m;
    terms.drift /= m;
    let values: Vec<f64> = per.iter().map(|t| if with_drift { t.ubar() } else { t.u() }).collect();
    let (_, se) = mean_se(&values);
    Ok(OperatorEstimate {
        value: if with_drift { terms.ubar() } else { terms.u() },
        terms,
        se,
    })
}

/// Functional whose backward residual is profiled.
#[derive(Clone, Copy)]
pub enum KbeTarget<'a> {
    /// Evaluated without sampling noise (closed forms, semigroup quadrature).
    Exact(&'a dyn Functional),
    Estimated(&'a EstimatedValuation),
}

impl KbeTarget<'_> {
    fn operator(
        &self,
        chars: &Characteristics,
        sp_pre: &StoppedPath,
        cfg: &DerivativeConfig,
        with_drift: bool,
    ) -> Result<(f64, f64, f64)> {
        match self {
            KbeTarget::Exact(f) => {
                let t = operator_terms(*f, chars, sp_pre, cfg)?;
                let v = if with_drift { t.ubar() } else { t.u() };
                Ok((v, 0.0, cfg.grad_step(*f, sp_pre)))
            }
            KbeTarget::Estimated(g) => {
                let e = valuation_operator(g, chars, sp_pre, cfg, with_drift)?;
                Ok((e.value, e.se, cfg.grad_step(*g, sp_pre)))
            }
        }
    }
}

/// Error model constants of the backward-equation tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbeTolerance {
    /// Multiplier of the Monte Carlo standard error of the operator value.
    pub c_mc: f64,
    /// Multiplier of `eps_v² + dt`.
    pub c_disc: f64,
    /// Required fraction of probes within tolerance.
    pub pass_rate: f64,
}

impl Default for KbeTolerance {
    fn default() -> Self {
        Self {
            c_mc: 3.0,
            c_disc: 10.0,
            pass_rate: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbeProbe {
    pub path: usize,
    pub index: usize,
    pub residual: f64,
    pub se: f64,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbeReport {
    pub functional: String,
    pub model: String,
    pub operator: String,
    pub n_steps: usize,
    pub n_probes: usize,
    pub residual_mean: f64,
    /// 95th percentile of `|residual|`.
    pub residual_p95: f64,
    /// Median per-probe tolerance.
    pub tol: f64,
    pub pass_rate: f64,
    pub tolerance_model: KbeTolerance,
    pub pass: bool,
    pub probes: Vec<KbeProbe>,
}

/// Sampling plan for a backward-equation residual profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub n_paths: usize,
    pub n_time_probes: usize,
    pub seed: u64,
}

/// Samples `(path, time)` pairs from `model`, evaluates `U` (driftless
/// model) or `Ū` against the model's characteristics at the left-limit
/// stopped path, and compares each residual with
/// `c_mc·SE + c_disc·(eps_v² + dt)`.
///
/// Times are drawn uniformly from the indices that leave room for the
/// forward horizontal difference.
pub fn kbe_residual_profile(
    target: KbeTarget<'_>,
    functional: &str,
    model: &ModelSpec,
    grid: &TimeGrid,
    plan: &ProbePlan,
    cfg: &DerivativeConfig,
    tolerance: &KbeTolerance,
) -> Result<KbeReport> {
    if plan.n_paths == 0 || plan.n_time_probes == 0 {
        return Err(Error::EmptySampleSet);
    }
    let n = grid.n_steps();
    let room = cfg.m_h.max(1) * if cfg.richardson { 2 } else { 1 };
    if room > n {
        return Err(Error::PastHorizon {
            from: 0,
            steps: room,
            n_steps: n,
        });
    }
    let with_drift = !model.is_driftless();
    let dt = grid.dt();
    let mut points = Vec::with_capacity(plan.n_paths * plan.n_time_probes);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(u64::MAX);
    for path in 0..plan.n_paths {
        for _ in 0..plan.n_time_probes {
            points.push((path, rng.gen_range(0..=n - room)));
        }
    }
    let paths: Vec<GridPath> = (0..plan.n_paths as u64)
        .into_par_iter()
        .map(|i| simulate_stream(model, grid, plan.seed, i))
        .collect();
    let probes = points
        .par_iter()
        .map(|&(path, k)| {
            let p = &paths[path];
            let sp = if k == 0 { stop(p, 0)? } else { stop_pre(p, k)? };
            let chars = model.characteristics_at(k, &sp);
            let (residual, se, eps) = target.operator(&chars, &sp, cfg, with_drift)?;
            let tol = tolerance.c_mc * se + tolerance.c_disc * (eps * eps + dt);
            Ok(KbeProbe {
                path,
                index: k,
                residual,
                se,
                tol,
            })
        })
        .collect::<Result<Vec<KbeProbe>>>()?;
    Ok(summarize(functional, model, grid, with_drift, tolerance, probes))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

fn summarize(
    functional: &str,
    model: &ModelSpec,
    grid: &TimeGrid,
    with_drift: bool,
    tolerance: &KbeTolerance,
    probes: Vec<KbeProbe>,
) -> KbeReport {
    let count = probes.len();
    let within = probes.iter().filter(|p| p.residual.abs() <= p.tol).count();
    let mut abs: Vec<f64> = probes.iter().map(|p| p.residual.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let mut tols: Vec<f64> = probes.iter().map(|p| p.tol).collect();
    tols.sort_by(f64::total_cmp);
    let pass_rate = within as f64 / count as f64;
    KbeReport {
        functional: functional.to_string(),
        model: model.name().to_string(),
        operator: if with_drift { "ubar" } else { "u" }.to_string(),
        n_steps: grid.n_steps(),
        n_probes: count,
        residual_mean: probes.iter().map(|p| p.residual).sum::<f64>() / count as f64,
        residual_p95: quantile(&abs, 0.95),
        tol: quantile(&tols, 0.5),
        pass_rate,
        tolerance_model: *tolerance,
        pass: pass_rate >= tolerance.pass_rate,
        probes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{vertical_gradient, vertical_hessian};
    use crate::functionals::{AsianSquareBrownian, Combination, FunctionalSpec, MonitorFn, ScalarFn, WeightFn};
    use crate::models::{simulate_with_ledger, Atom};

    fn bm(sigma: f64) -> ModelSpec {
        ModelSpec::Brownian {
            x0: 0.0,
            drift: 0.0,
            sigma,
        }
    }

    fn cp() -> ModelSpec {
        ModelSpec::CompoundPoisson {
            x0: 0.0,
            rate: 3.0,
            atoms: vec![Atom { size: 0.2, prob: 0.5 }, Atom { size: -0.1, prob: 0.5 }],
        }
    }

    #[test]
    fn terminal_identity_telescopes() {
        let f = FunctionalSpec::Terminal {
            f_tilde: ScalarFn::Identity,
        };
        let g = TimeGrid::new(1.0, 64).unwrap();
        let model = ModelSpec::LevyJumpDiffusion {
            x0: 0.5,
            drift: 0.1,
            sigma: 0.3,
            rate: 4.0,
            atoms: vec![Atom { size: 0.1, prob: 1.0 }],
        };
        for i in 0..5 {
            let p = simulate_stream(&model, &g, 1, i);
            let r = ito_residual(&f, &p, &model, &DerivativeConfig::default(), QvSource::Realized).unwrap();
            assert!(r.residual().abs() < 1e-9, "{}", r.residual());
        }
    }

    #[test]
    fn integral_on_pure_jump_path() {
        // hand-built: 0, 0, 1, 1, 0.5 with jumps at 2 and 4
        let g = TimeGrid::new(1.0, 4).unwrap();
        let p = GridPath::new(g, 1, vec![0.0, 0.0, 1.0, 1.0, 0.5], vec![false, false, true, false, true]).unwrap();
        let f = FunctionalSpec::IntegralOfFunction {
            g: ScalarFn::Identity,
            rho: WeightFn::default(),
        };
        let r = ito_residual(&f, &p, &cp(), &DerivativeConfig::default(), QvSource::Realized).unwrap();
        // lhs = (0 + 0 + 1 + 1)·0.25, and the horizontal sum reproduces it step by step
        assert!((r.lhs - 0.5).abs() < 1e-15);
        assert!((r.horizontal - 0.5).abs() < 1e-15);
        assert_eq!(r.stochastic, 0.0);
        assert_eq!(r.jump_correction, 0.0);
        assert!(r.residual().abs() < 1e-15);
    }

    #[test]
    fn jump_ledger_replay_in_residual_terms() {
        let f = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        };
        let g = TimeGrid::new(1.0, 50).unwrap();
        let (p, l) = simulate_with_ledger(&cp(), &g, 3, 0);
        let r = ito_residual(&f, &p, &cp(), &DerivativeConfig::default(), QvSource::Realized).unwrap();
        assert!(l.jump_counts.iter().any(|c| *c > 0));
        assert!(r.residual().abs() < 1e-12);
        assert_eq!(r.quadratic, 0.0);
    }

    #[test]
    fn asian_brownian_residual_halves() {
        let f = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        };
        let cfg = DerivativeConfig::default();
        let model = ModelSpec::Brownian {
            x0: 1.0,
            drift: 0.0,
            sigma: 0.5,
        };
        let a = ito_residual_batch(&f, "asian", &model, &TimeGrid::new(1.0, 50).unwrap(), 200, 4, &cfg, QvSource::Realized)
            .unwrap();
        let b = ito_residual_batch(&f, "asian", &model, &TimeGrid::new(1.0, 100).unwrap(), 200, 5, &cfg, QvSource::Realized)
            .unwrap();
        let ratio = b.mean_abs / a.mean_abs;
        assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn model_qv_converges_slower() {
        let f = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        };
        let model = bm(0.5);
        let cfg = DerivativeConfig::default();
        let t = ito_convergence(&f, "asian", &model, 1.0, &[50, 200], 200, 9, &cfg, QvSource::Model, 0.8).unwrap();
        let a = t.fitted_order.unwrap();
        assert!(a < 0.75, "order {a}");
    }

    #[test]
    fn fit_order_of_power_law() {
        let xs = [0.1, 0.05, 0.025];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((fit_order(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(fit_order(&[1.0], &[1.0]), None);
    }

    #[test]
    fn operator_examples() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let p = simulate_stream(&bm(0.3), &g, 2, 0);
        let sp = stop_pre(&p, 7).unwrap();
        let cfg = DerivativeConfig::default();
        let chars = Characteristics::scalar(0.0, 0.3, vec![(0.1, 2.0), (-0.2, 1.0)]);

        let konst = FunctionalSpec::Terminal {
            f_tilde: ScalarFn::ExpClipped { cap: -40.0 },
        };
        assert_eq!(u_op(&konst, &chars, &sp, &cfg).unwrap(), 0.0);

        let mon = FunctionalSpec::DiscreteMonitor {
            monitor_times: vec![0.25],
            h: ScalarFn::Identity,
            g: MonitorFn::default(),
        };
        assert!(u_op(&mon, &chars, &sp, &cfg).unwrap().abs() < 1e-7);

        let drift = Characteristics::scalar(0.0, 0.3, vec![]);
        let lin = FunctionalSpec::Terminal {
            f_tilde: ScalarFn::Identity,
        };
        assert_eq!(
            ubar_op(&lin, &drift, &sp, &cfg).unwrap(),
            u_op(&lin, &drift, &sp, &cfg).unwrap()
        );
        let b = 0.7;
        let pure_drift = Characteristics::scalar(b, 0.0, vec![]);
        assert!((ubar_op(&lin, &pure_drift, &sp, &cfg).unwrap() - b).abs() < 1e-9);
    }

    #[test]
    fn operator_terms_match_calculus() {
        let g = TimeGrid::new(1.0, 30).unwrap();
        let p = simulate_stream(&bm(0.4), &g, 5, 0);
        let sp = stop_pre(&p, 11).unwrap();
        let f = FunctionalSpec::Asian {
            f_tilde: ScalarFn::SoftplusCall { strike: 0.0, width: 0.2 },
        };
        let cfg = DerivativeConfig::default();
        let chars = Characteristics::scalar(0.3, 0.4, vec![(0.1, 2.0)]);
        let t = operator_terms(&f, &chars, &sp, &cfg).unwrap();
        let grad = vertical_gradient(&f, &sp, &cfg).unwrap()[0];
        let hess = vertical_hessian(&f, &sp, &cfg).unwrap().matrix[(0, 0)];
        assert!((t.drift - grad * 0.3).abs() < 1e-12);
        assert!((t.diffusion - 0.5 * hess * 0.16).abs() < 1e-12);
        let gap = ubar_op(&f, &chars, &sp, &cfg).unwrap() - u_op(&f, &chars, &sp, &cfg).unwrap();
        assert!((gap - t.drift).abs() < 1e-12);
        let h = crate::functionals::increment_h(&f, &sp, &[0.1], &[grad]).unwrap();
        assert!((t.jump - 2.0 * h).abs() < 1e-12);
    }

    #[test]
    fn operators_are_linear() {
        let g = TimeGrid::new(1.0, 30).unwrap();
        let p = simulate_stream(&bm(0.4), &g, 6, 0);
        let sp = stop_pre(&p, 9).unwrap();
        let a = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        };
        let b = FunctionalSpec::IntegralOfFunction {
            g: ScalarFn::Sin,
            rho: WeightFn::default(),
        };
        let combo = Combination {
            terms: vec![(2.0, &a as &dyn Functional), (-0.5, &b as &dyn Functional)],
        };
        let chars = Characteristics::scalar(0.2, 0.4, vec![(0.3, 1.0)]);
        let cfg = DerivativeConfig::default().pinned(&combo, &sp);
        let lhs = ubar_op(&combo, &chars, &sp, &cfg).unwrap();
        let rhs = 2.0 * ubar_op(&a, &chars, &sp, &cfg).unwrap() - 0.5 * ubar_op(&b, &chars, &sp, &cfg).unwrap();
        assert!((lhs - rhs).abs() < 1e-8 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn closed_form_asian_kbe() {
        let sigma = 0.3;
        let g = TimeGrid::new(1.0, 100).unwrap();
        let model = bm(sigma);
        let cf = AsianSquareBrownian::from_model(&model, g).unwrap();
        let plan = ProbePlan {
            n_paths: 20,
            n_time_probes: 5,
            seed: 1,
        };
        let rep = kbe_residual_profile(
            KbeTarget::Exact(&cf),
            "asian_square_closed_form",
            &model,
            &g,
            &plan,
            &DerivativeConfig::default(),
            &KbeTolerance::default(),
        )
        .unwrap();
        assert!(rep.pass);
        assert_eq!(rep.pass_rate, 1.0);
        // the discrete closed form solves the equation up to σ²dt²(2N−1)/T²
        assert!(rep.residual_p95 <= 2.0 * sigma * sigma * g.dt() + 1e-6);
        assert_eq!(rep.operator, "u");
    }

    #[test]
    fn valuation_operator_matches_scalar_path() {
        let g = TimeGrid::new(1.0, 40).unwrap();
        let model = bm(0.3);
        let f = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        };
        let v = EstimatedValuation::new(f, model.clone(), g, 300, 2).unwrap();
        let p = simulate_stream(&model, &g, 8, 0);
        let sp = stop_pre(&p, 13).unwrap();
        let chars = model.characteristics_at(13, &sp);
        let cfg = DerivativeConfig::default();
        let est = valuation_operator(&v, &chars, &sp, &cfg, false).unwrap();
        let direct = u_op(&v, &chars, &sp, &cfg).unwrap();
        assert!((est.value - direct).abs() < 1e-9, "{} vs {direct}", est.value);
        assert!(est.se > 0.0);
    }
}
