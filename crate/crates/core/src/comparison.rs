//! Numerical checks of the comparison theorems: ordering of characteristics,
//! kernel integrals of `H_{G_f}`, the backward equation of `G_f` along the
//! lower model's paths, vertical convexity and monotonicity of `G_f`, and the
//! terminal expectation inequality.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backwards::{valuation_operator, KbeTolerance};
use crate::calculus::{probe_vertical_property, symmetric_bumps, ConvexityReport, DerivativeConfig, VerticalProperty};
use crate::error::{Error, Result};
use crate::functionals::{EstimatedValuation, Functional, FunctionalSpec};
use crate::models::{mean_se, simulate_stream, Atom, Characteristics, ModelSpec};
use crate::pathspace::{stop, stop_pre, StoppedPath, TimeGrid};

/// Which comparison result a scenario instantiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Theorem {
    /// Vertically directional convex `G_f`, entrywise diffusion order, driftless models.
    #[serde(rename = "emm_dcx")]
    EmmDcx,
    /// Vertically convex `G_f`, psd diffusion order, driftless models.
    #[serde(rename = "emm_cx")]
    EmmCx,
    /// Combined second-order inequality only, driftless models.
    #[serde(rename = "emm_general")]
    EmmGeneral,
    /// One process under two martingale measures: only the kernel changes.
    #[serde(rename = "emm_two_kernels")]
    EmmTwoKernels,
    /// Vertically increasing and directional convex `G_f`, drift and entrywise diffusion order.
    #[serde(rename = "P_incr_dcx")]
    PIncrDcx,
    /// Vertically increasing and convex `G_f`, drift and psd diffusion order.
    #[serde(rename = "P_incr_cx")]
    PIncrCx,
    /// Combined first- and second-order inequality only.
    #[serde(rename = "P_general")]
    PGeneral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DiffusionOrder {
    Entrywise,
    Psd,
    Equal,
    None,
}

impl Theorem {
    pub fn label(&self) -> &'static str {
        match self {
            Theorem::EmmDcx => "emm_dcx",
            Theorem::EmmCx => "emm_cx",
            Theorem::EmmGeneral => "emm_general",
            Theorem::EmmTwoKernels => "emm_two_kernels",
            Theorem::PIncrDcx => "P_incr_dcx",
            Theorem::PIncrCx => "P_incr_cx",
            Theorem::PGeneral => "P_general",
        }
    }

    /// Stated under equivalent martingale measures.
    pub fn is_emm(&self) -> bool {
        matches!(
            self,
            Theorem::EmmDcx | Theorem::EmmCx | Theorem::EmmGeneral | Theorem::EmmTwoKernels
        )
    }

    fn is_general(&self) -> bool {
        matches!(self, Theorem::EmmGeneral | Theorem::PGeneral)
    }

    fn diffusion_order(&self) -> DiffusionOrder {
        match self {
            Theorem::EmmDcx | Theorem::PIncrDcx => DiffusionOrder::Entrywise,
            Theorem::EmmCx | Theorem::PIncrCx => DiffusionOrder::Psd,
            Theorem::EmmTwoKernels => DiffusionOrder::Equal,
            Theorem::EmmGeneral | Theorem::PGeneral => DiffusionOrder::None,
        }
    }

    /// Vertical properties `G_f` must have.
    pub fn required_properties(&self) -> Vec<VerticalProperty> {
        match self {
            Theorem::EmmDcx => vec![VerticalProperty::DirectionalConvex],
            Theorem::EmmCx => vec![VerticalProperty::Convex],
            Theorem::PIncrDcx => vec![VerticalProperty::DirectionalConvex, VerticalProperty::MonotoneIncreasing],
            Theorem::PIncrCx => vec![VerticalProperty::Convex, VerticalProperty::MonotoneIncreasing],
            Theorem::EmmGeneral | Theorem::EmmTwoKernels | Theorem::PGeneral => vec![],
        }
    }
}

/// Monte Carlo budgets of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    /// Outer paths per model for the expectation estimates.
    pub n_out: usize,
    /// Continuations of the valuation `G_f`.
    pub m_valuation: usize,
    /// Paths of the lower model carrying hypothesis probes.
    pub n_hyp_paths: usize,
    /// Probe times per hypothesis path.
    pub n_hyp_times: usize,
}

impl Budgets {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_out", self.n_out),
            ("m_valuation", self.m_valuation),
            ("n_hyp_paths", self.n_hyp_paths),
            ("n_hyp_times", self.n_hyp_times),
        ] {
            if v == 0 {
                return Err(Error::param(name, "budget must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// A hypothesis holds when its worst slack is at least `−slack`.
    pub slack: f64,
    /// Tolerance of the convexity and monotonicity probes.
    pub property: f64,
    /// Half-width of the bump grid used by the property probes.
    pub property_bump: f64,
    /// Symmetry defect allowed in psd comparisons.
    pub symmetry: f64,
    /// Width of the verdict band in combined standard errors.
    pub band: f64,
    pub kbe: KbeTolerance,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            slack: 1e-9,
            property: 1e-9,
            property_bump: 0.05,
            symmetry: 1e-12,
            band: 3.0,
            kbe: KbeTolerance::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonScenario {
    pub grid: TimeGrid,
    /// Upper model; `G_f` is built over it.
    pub model_x: ModelSpec,
    /// Lower model; hypotheses are probed along its paths.
    pub model_y: ModelSpec,
    pub payoff: FunctionalSpec,
    pub theorem: Theorem,
    /// Check the reversed inequalities and expect `E[f(Y)] ≥ E[f(X)]`.
    #[serde(default)]
    pub reversed: bool,
    pub budgets: Budgets,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub derivatives: DerivativeConfig,
    pub seed: u64,
}

/// Seed for a named sub-task, derived from the root seed.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(tag);
    rng.next_u64()
}

const TAG_X: u64 = 1;
const TAG_Y: u64 = 2;
const TAG_VALUATION: u64 = 3;
const TAG_PROBES: u64 = 4;

fn same_characteristic_skeleton(a: &ModelSpec, b: &ModelSpec) -> bool {
    let drift_sigma = |m: &ModelSpec| match *m {
        ModelSpec::Brownian { drift, sigma, .. } => Some((drift, sigma)),
        ModelSpec::LevyJumpDiffusion { drift, sigma, .. } => Some((drift, sigma)),
        ModelSpec::CompoundPoisson { .. } => None,
        ModelSpec::ItoSemimartingale { .. } => None,
    };
    match (drift_sigma(a), drift_sigma(b)) {
        (Some(x), Some(y)) => x == y,
        _ => matches!((a, b), (ModelSpec::CompoundPoisson { .. }, ModelSpec::CompoundPoisson { .. })) && a.is_driftless() && b.is_driftless(),
    }
}

impl ComparisonScenario {
    pub fn validate(&self) -> Result<()> {
        self.model_x.validate()?;
        self.model_y.validate()?;
        self.payoff.validate(&self.grid)?;
        self.budgets.validate()?;
        self.derivatives.validate()?;
        if !self.payoff.is_terminal_payoff() {
            return Err(Error::Scenario(format!(
                "payoff `{}` is not a terminal payoff",
                self.payoff.name()
            )));
        }
        if self.model_x.x0() != self.model_y.x0() {
            return Err(Error::Scenario(format!(
                "models start at {} and {}",
                self.model_x.x0(),
                self.model_y.x0()
            )));
        }
        if !self.model_x.independent_increments() {
            return Err(Error::NotIndependentIncrements);
        }
        if self.theorem.is_emm() && !(self.model_x.is_driftless() && self.model_y.is_driftless()) {
            return Err(Error::Scenario(format!(
                "{} needs driftless models",
                self.theorem.label()
            )));
        }
        if self.theorem == Theorem::EmmTwoKernels && !same_characteristic_skeleton(&self.model_x, &self.model_y) {
            return Err(Error::Scenario("diffusion parts differ".into()));
        }
        Ok(())
    }

    fn sign(&self) -> f64 {
        if self.reversed {
            -1.0
        } else {
            1.0
        }
    }
}

/// True iff the smallest eigenvalue of `c2 − c1` is at least `−tol`.
pub fn psd_order(c1: &DMatrix<f64>, c2: &DMatrix<f64>, tol: f64) -> Result<bool> {
    Ok(psd_slack(c1, c2, tol)? >= -tol)
}

/// Smallest eigenvalue of `c2 − c1`.
pub fn psd_slack(c1: &DMatrix<f64>, c2: &DMatrix<f64>, sym_tol: f64) -> Result<f64> {
    if c1.shape() != c2.shape() || c1.nrows() != c1.ncols() {
        return Err(Error::DimensionMismatch {
            expected: c1.nrows(),
            got: c2.nrows(),
        });
    }
    for c in [c1, c2] {
        let defect = (c - c.transpose()).amax();
        if defect > sym_tol {
            return Err(Error::Asymmetric(defect));
        }
    }
    let diff = c2 - c1;
    if diff.nrows() == 1 {
        return Ok(diff[(0, 0)]);
    }
    let sym = (&diff + diff.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym).eigenvalues.min())
}

/// Worst and mean slack of one hypothesis over the probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub samples: usize,
    pub min_slack: f64,
    pub mean_slack: f64,
    pub pass: bool,
}

impl HypothesisCheck {
    fn from_slacks(name: &str, slacks: &[f64], tol: f64) -> Self {
        let min_slack = slacks.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            name: name.to_string(),
            samples: slacks.len(),
            min_slack,
            mean_slack: slacks.iter().sum::<f64>() / slacks.len() as f64,
            pass: min_slack >= -tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbeHypothesis {
    pub operator: String,
    pub n_probes: usize,
    pub pass_rate: f64,
    pub residual_p95: f64,
    pub tol_median: f64,
    pub pass: bool,
}

/// Hypothesis part of an order report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub theorem: Theorem,
    pub reversed: bool,
    pub checks: Vec<HypothesisCheck>,
    pub kbe: KbeHypothesis,
    pub properties: Vec<ConvexityReport>,
    /// Uniform integrability has no finite-sample test; it is declared.
    pub class_dl: String,
    /// The backward equation is probed on paths of the lower model only.
    pub limitation: String,
    pub pass: bool,
    /// Every ordering slack is strictly positive.
    pub strictly_positive: bool,
}

struct ProbeSlacks {
    drift: f64,
    diffusion: f64,
    kernel: f64,
    general: f64,
    kbe_residual: f64,
    kbe_tol: f64,
}

fn probe_points(sc: &ComparisonScenario) -> Result<Vec<(StoppedPath, usize)>> {
    use rand::Rng;
    let n = sc.grid.n_steps();
    let room = sc.derivatives.m_h.max(1) * if sc.derivatives.richardson { 2 } else { 1 };
    if room > n {
        return Err(Error::PastHorizon {
            from: 0,
            steps: room,
            n_steps: n,
        });
    }
    let seed = derive_seed(sc.seed, TAG_PROBES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut points = Vec::with_capacity(sc.budgets.n_hyp_paths * sc.budgets.n_hyp_times);
    for i in 0..sc.budgets.n_hyp_paths {
        let p = simulate_stream(&sc.model_y, &sc.grid, seed, i as u64);
        for _ in 0..sc.budgets.n_hyp_times {
            let k = rng.gen_range(0..=n - room);
            let sp = if k == 0 { stop(&p, 0)? } else { stop_pre(&p, k)? };
            points.push((sp, k));
        }
    }
    Ok(points)
}

fn diffusion_slack(order: DiffusionOrder, cx: &Characteristics, cy: &Characteristics, sym: f64) -> Result<f64> {
    match order {
        DiffusionOrder::Entrywise => Ok((&cx.c - &cy.c).min()),
        DiffusionOrder::Psd => psd_slack(&cy.c, &cx.c, sym),
        DiffusionOrder::Equal => Ok(-(&cx.c - &cy.c).amax()),
        DiffusionOrder::None => Ok(0.0),
    }
}

/// Builds `G_f` over the upper model and probes every hypothesis of the
/// selected theorem at sampled points of the lower model's paths.
pub fn check_hypotheses(sc: &ComparisonScenario) -> Result<HypothesisReport> {
    sc.validate()?;
    let g = EstimatedValuation::new(
        sc.payoff.clone(),
        sc.model_x.clone(),
        sc.grid,
        sc.budgets.m_valuation,
        derive_seed(sc.seed, TAG_VALUATION),
    )?;
    check_hypotheses_with(sc, &g)
}

/// [`check_hypotheses`] with a prebuilt valuation over `model_x`.
pub fn check_hypotheses_with(sc: &ComparisonScenario, g: &EstimatedValuation) -> Result<HypothesisReport> {
    sc.validate()?;
    if g.model() != &sc.model_x || g.payoff() != &sc.payoff || g.grid() != &sc.grid {
        return Err(Error::Scenario("valuation does not match the scenario".into()));
    }
    let points = probe_points(sc)?;
    let theorem = sc.theorem;
    let sign = sc.sign();
    let tol = sc.tolerances;
    let dt = sc.grid.dt();
    let with_drift = !theorem.is_emm();
    let slacks = points
        .par_iter()
        .map(|(sp, k)| -> Result<ProbeSlacks> {
            let cx = sc.model_x.characteristics_at(*k, sp);
            let cy = sc.model_y.characteristics_at(*k, sp);
            let cfg = sc.derivatives.pinned(g, sp);
            let ox = valuation_operator(g, &cx, sp, &cfg, with_drift)?;
            let oy = valuation_operator(g, &cy, sp, &cfg, with_drift)?;
            let drift = cx
                .b
                .iter()
                .zip(&cy.b)
                .map(|(x, y)| x - y)
                .fold(f64::INFINITY, f64::min);
            let second = ox.terms.diffusion - oy.terms.diffusion + ox.terms.jump - oy.terms.jump;
            let first = if with_drift { ox.terms.drift - oy.terms.drift } else { 0.0 };
            let eps = cfg.grad_step(g, sp);
            Ok(ProbeSlacks {
                drift: sign * drift,
                diffusion: sign * diffusion_slack(theorem.diffusion_order(), &cx, &cy, tol.symmetry)?,
                kernel: sign * (ox.terms.jump - oy.terms.jump),
                general: sign * (first + second),
                kbe_residual: ox.value,
                kbe_tol: tol.kbe.c_mc * ox.se + tol.kbe.c_disc * (eps * eps + dt),
            })
        })
        .collect::<Result<Vec<ProbeSlacks>>>()?;

    let collect = |f: fn(&ProbeSlacks) -> f64| slacks.iter().map(f).collect::<Vec<f64>>();
    let mut checks = Vec::new();
    if with_drift && !theorem.is_general() {
        checks.push(HypothesisCheck::from_slacks("drift_order", &collect(|s| s.drift), tol.slack));
    }
    match theorem.diffusion_order() {
        DiffusionOrder::Entrywise => checks.push(HypothesisCheck::from_slacks(
            "diffusion_order_entrywise",
            &collect(|s| s.diffusion),
            tol.slack,
        )),
        DiffusionOrder::Psd => checks.push(HypothesisCheck::from_slacks(
            "diffusion_order_psd",
            &collect(|s| s.diffusion),
            tol.slack,
        )),
        DiffusionOrder::Equal => {
            // the equality check is one-sided by construction; undo the sign
            let eq: Vec<f64> = slacks.iter().map(|s| sign * s.diffusion).collect();
            checks.push(HypothesisCheck::from_slacks("diffusion_equal", &eq, tol.slack));
        }
        DiffusionOrder::None => {}
    }
    if theorem.is_general() {
        checks.push(HypothesisCheck::from_slacks(
            "general_inequality",
            &collect(|s| s.general),
            tol.slack,
        ));
    } else {
        checks.push(HypothesisCheck::from_slacks("kernel_order", &collect(|s| s.kernel), tol.slack));
    }

    let within = slacks.iter().filter(|s| s.kbe_residual.abs() <= s.kbe_tol).count();
    let mut abs: Vec<f64> = slacks.iter().map(|s| s.kbe_residual.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let mut tols: Vec<f64> = slacks.iter().map(|s| s.kbe_tol).collect();
    tols.sort_by(f64::total_cmp);
    let pass_rate = within as f64 / slacks.len() as f64;
    let kbe = KbeHypothesis {
        operator: if with_drift { "ubar" } else { "u" }.to_string(),
        n_probes: slacks.len(),
        pass_rate,
        residual_p95: abs[((abs.len() - 1) as f64 * 0.95).round() as usize],
        tol_median: tols[tols.len() / 2],
        pass: pass_rate >= tol.kbe.pass_rate,
    };

    let samples: Vec<StoppedPath> = points.iter().map(|(sp, _)| sp.clone()).collect();
    let bumps = symmetric_bumps(tol.property_bump, 2);
    let properties = theorem
        .required_properties()
        .into_iter()
        .map(|p| probe_vertical_property(g, p, &samples, &bumps, tol.property, &sc.derivatives))
        .collect::<Result<Vec<ConvexityReport>>>()?;

    let pass = checks.iter().all(|c| c.pass) && kbe.pass && properties.iter().all(|p| p.passed());
    let strictly_positive = checks
        .iter()
        .filter(|c| c.name != "diffusion_equal")
        .all(|c| c.min_slack > 0.0);
    Ok(HypothesisReport {
        theorem,
        reversed: sc.reversed,
        checks,
        kbe,
        properties,
        class_dl: "declared: payoffs have bounded second moments under the catalog models".to_string(),
        limitation: "backward equation checked at sampled points of the lower model's paths only".to_string(),
        pass,
        strictly_positive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ordered,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conclusion {
    pub ex: f64,
    pub ey: f64,
    pub se_x: f64,
    pub se_y: f64,
    /// `√(se_x² + se_y²)`.
    pub band: f64,
    /// `(EX − EY)/band`, or `(EY − EX)/band` in reversed mode.
    pub margin: f64,
    pub verdict: Verdict,
}

fn payoff_mean(payoff: &FunctionalSpec, model: &ModelSpec, grid: &TimeGrid, n: usize, seed: u64) -> Result<(f64, f64)> {
    let values = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let p = simulate_stream(model, grid, seed, i);
            payoff.eval(&stop(&p, grid.n_steps())?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_se(&values))
}

/// Independent estimates of `E[f(X^T)]` and `E[f(Y^T)]` on disjoint seed
/// streams, and the verdict at `band` combined standard errors.
pub fn compare_expectations(sc: &ComparisonScenario) -> Result<Conclusion> {
    sc.validate()?;
    let (ex, se_x) = payoff_mean(&sc.payoff, &sc.model_x, &sc.grid, sc.budgets.n_out, derive_seed(sc.seed, TAG_X))?;
    let (ey, se_y) = payoff_mean(&sc.payoff, &sc.model_y, &sc.grid, sc.budgets.n_out, derive_seed(sc.seed, TAG_Y))?;
    Ok(conclude(ex, ey, se_x, se_y, sc.reversed, sc.tolerances.band))
}

/// Verdict from two estimates and their standard errors.
pub fn conclude(ex: f64, ey: f64, se_x: f64, se_y: f64, reversed: bool, k: f64) -> Conclusion {
    let band = (se_x * se_x + se_y * se_y).sqrt();
    let diff = if reversed { ey - ex } else { ex - ey };
    let margin = if band > 0.0 {
        diff / band
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    };
    Conclusion {
        ex,
        ey,
        se_x,
        se_y,
        band,
        margin,
        verdict: if margin >= -k { Verdict::Ordered } else { Verdict::Violated },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub hypotheses: HypothesisReport,
    pub conclusion: Conclusion,
}

impl OrderReport {
    /// Hypotheses hold and the conclusion is ordered.
    pub fn pass(&self) -> bool {
        self.hypotheses.pass && self.conclusion.verdict == Verdict::Ordered
    }
}

pub fn run_scenario(sc: &ComparisonScenario) -> Result<OrderReport> {
    Ok(OrderReport {
        hypotheses: check_hypotheses(sc)?,
        conclusion: compare_expectations(sc)?,
    })
}

/// Jump part of a one-dimensional jump diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpPart {
    pub rate: f64,
    pub atoms: Vec<Atom>,
}

/// One jump diffusion under two kernels: `base` with `k1` is the lower
/// model, `base` with `k2` the upper one. Only the kernel order is checked
/// besides the backward equation.
#[allow(clippy::too_many_arguments)]
pub fn two_kernel_compare(
    base: &ModelSpec,
    k1: &JumpPart,
    k2: &JumpPart,
    grid: TimeGrid,
    payoff: FunctionalSpec,
    budgets: Budgets,
    tolerances: Tolerances,
    derivatives: DerivativeConfig,
    seed: u64,
) -> Result<OrderReport> {
    let with = |k: &JumpPart| -> Result<ModelSpec> {
        match *base {
            ModelSpec::LevyJumpDiffusion { x0, drift, sigma, .. } => Ok(ModelSpec::LevyJumpDiffusion {
                x0,
                drift,
                sigma,
                rate: k.rate,
                atoms: k.atoms.clone(),
            }),
            ModelSpec::Brownian { x0, drift, sigma } => Ok(ModelSpec::LevyJumpDiffusion {
                x0,
                drift,
                sigma,
                rate: k.rate,
                atoms: k.atoms.clone(),
            }),
            _ => Err(Error::UnsupportedModel(format!(
                "two-kernel comparison needs a jump diffusion base, got {}",
                base.name()
            ))),
        }
    };
    let sc = ComparisonScenario {
        grid,
        model_x: with(k2)?,
        model_y: with(k1)?,
        payoff,
        theorem: Theorem::EmmTwoKernels,
        reversed: false,
        budgets,
        tolerances,
        derivatives,
        seed,
    };
    run_scenario(&sc)
}
