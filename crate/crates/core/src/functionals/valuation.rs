//! Valuation functionals `G_f(t, ω) = E[f(ω ⊕_t X)]`.

use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;

use super::{past_sum, Functional, FunctionalSpec, ScalarFn};
use crate::error::{Error, Result};
use crate::models::{mean_se, simulate_batch, ModelSpec};
use crate::pathspace::{concat, stop, GridPath, StoppedPath, TimeGrid};

/// Monte Carlo valuation over a fixed set of continuation paths.
///
/// Continuations `S^j` are drawn once from the model started at 0. Seen from
/// stop index `k`, continuation `j` is `S^j` shifted to start at `k`: the
/// path value at index `i ≥ k` is `ω_{t_k} + S^j_{i−k}`. For time-homogeneous
/// models with independent increments this has the law of `X` after `t_k`,
/// and every query (bumped, extended, or at a different stop) reuses the
/// same draws.
#[derive(Debug, Clone)]
pub struct EstimatedValuation {
    payoff: FunctionalSpec,
    model: ModelSpec,
    grid: TimeGrid,
    m: usize,
    seed: u64,
    /// `m × (n + 1)`, row `j` is `S^j`.
    incr: Vec<f64>,
    /// `m × (n + 1)`, row `j` holds `Σ_{i<N} S^j_i` at position `N` (Asian only).
    prefix: Vec<f64>,
}

impl EstimatedValuation {
    pub fn new(payoff: FunctionalSpec, model: ModelSpec, grid: TimeGrid, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::param("m", "need at least one continuation"));
        }
        if !model.independent_increments() {
            return Err(Error::NotIndependentIncrements);
        }
        model.validate()?;
        payoff.validate(&grid)?;
        let n = grid.n_steps();
        let paths = simulate_batch(&model.with_x0(0.0), &grid, m, seed);
        let mut incr = Vec::with_capacity(m * (n + 1));
        for p in &paths {
            incr.extend_from_slice(p.values());
        }
        let mut prefix = Vec::new();
        if matches!(payoff, FunctionalSpec::Asian { .. }) {
            prefix.reserve(m * (n + 1));
            for j in 0..m {
                let mut acc = 0.0;
                prefix.push(0.0);
                for i in 0..n {
                    acc += incr[j * (n + 1) + i];
                    prefix.push(acc);
                }
            }
        }
        Ok(Self {
            payoff,
            model,
            grid,
            m,
            seed,
            incr,
            prefix,
        })
    }

    pub fn payoff(&self) -> &FunctionalSpec {
        &self.payoff
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn sample_count(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Continuation `j` as used from stop index `k`: zero up to `k`, then
    /// `S^j_{i−k}`.
    pub fn continuation_for(&self, j: usize, k: usize) -> GridPath {
        let n = self.grid.n_steps();
        let row = &self.incr[j * (n + 1)..(j + 1) * (n + 1)];
        let values = (0..=n).map(|i| if i < k { 0.0 } else { row[i - k] }).collect();
        GridPath::from_values(self.grid, values).expect("grid shape")
    }

    fn check(&self, sp: &StoppedPath) -> Result<()> {
        if *sp.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        if sp.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: sp.dim(),
            });
        }
        Ok(())
    }

    /// Payoff on every continuation, in sample order.
    pub fn eval_samples(&self, sp: &StoppedPath) -> Result<Vec<f64>> {
        self.check(sp)?;
        let ctx = self.context(sp);
        (0..self.m).map(|j| self.sample_with(&ctx, sp, j)).collect()
    }

    /// Payoff on continuation `j` only.
    pub fn sample_value(&self, sp: &StoppedPath, j: usize) -> Result<f64> {
        self.check(sp)?;
        let ctx = self.context(sp);
        self.sample_with(&ctx, sp, j)
    }

    /// Estimate with its Monte Carlo standard error.
    pub fn eval_with_se(&self, sp: &StoppedPath) -> Result<(f64, f64)> {
        let s = self.eval_samples(sp)?;
        Ok((s.iter().sum::<f64>() / self.m as f64, mean_se(&s).1))
    }

    /// Single-continuation view, for per-sample error propagation.
    pub fn sample(&self, j: usize) -> SampleView<'_> {
        SampleView { parent: self, j }
    }

    fn context(&self, sp: &StoppedPath) -> Ctx {
        let k = sp.stop_index();
        let x = sp.coord(k, 0);
        let past = match &self.payoff {
            FunctionalSpec::Asian { .. } => past_sum(sp, |v| v),
            FunctionalSpec::IntegralPayoff { f_tilde } => past_sum(sp, |v| f_tilde.value(v)),
            _ => 0.0,
        };
        Ctx { k, x, past }
    }

    fn sample_with(&self, ctx: &Ctx, sp: &StoppedPath, j: usize) -> Result<f64> {
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let nn = n - ctx.k;
        let row = j * (n + 1);
        Ok(match &self.payoff {
            FunctionalSpec::Asian { f_tilde } => {
                let s = ctx.past + nn as f64 * ctx.x + self.prefix[row + nn];
                f_tilde.value(s * dt / self.grid.horizon())
            }
            FunctionalSpec::Terminal { f_tilde } => {
                f_tilde.value(ctx.x + self.incr[row + nn])
            }
            FunctionalSpec::IntegralPayoff { f_tilde } => {
                let fut: f64 = self.incr[row..row + nn].iter().map(|s| f_tilde.value(ctx.x + s)).sum();
                (ctx.past + fut) * dt
            }
            other => {
                let path = concat(sp, &self.continuation_for(j, ctx.k))?;
                other.eval(&stop(&path, n)?)?
            }
        })
    }
}

struct Ctx {
    k: usize,
    x: f64,
    past: f64,
}

impl Functional for EstimatedValuation {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, sp: &StoppedPath) -> Result<f64> {
        Ok(self.eval_samples(sp)?.iter().sum::<f64>() / self.m as f64)
    }

    fn fd_scale(&self, _sp: &StoppedPath) -> f64 {
        10.0
    }
}

/// One continuation of an [`EstimatedValuation`], viewed as a functional.
#[derive(Clone, Copy)]
pub struct SampleView<'a> {
    parent: &'a EstimatedValuation,
    j: usize,
}

impl Functional for SampleView<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, sp: &StoppedPath) -> Result<f64> {
        self.parent.sample_value(sp, self.j)
    }

    fn fd_scale(&self, _sp: &StoppedPath) -> f64 {
        10.0
    }
}

/// `G_f` for `f = ∫₀ᵀ f̃(ω_t) dt` under Brownian motion with drift, through
/// the transition semigroup: `Σ_{m<N} T_{m·dt} f̃(ω_t)·dt + ∫₀ᵗ f̃(ω_s) ds`.
///
/// The time integral uses the same grid nodes as the payoff's left-Riemann
/// sum; `T_s f̃(x) = E f̃(x + b·s + σ√s·Z)` uses Gauss–Hermite quadrature.
#[derive(Debug, Clone)]
pub struct SemigroupValuation {
    f_tilde: ScalarFn,
    drift: f64,
    sigma: f64,
    grid: TimeGrid,
    nodes: usize,
    rule: GaussHermite,
    coarse: GaussHermite,
}

impl SemigroupValuation {
    pub fn new(f_tilde: ScalarFn, model: &ModelSpec, grid: TimeGrid, nodes: usize) -> Result<Self> {
        let ModelSpec::Brownian { drift, sigma, .. } = *model else {
            return Err(Error::UnsupportedModel(
                "the semigroup route needs a closed-form transition; only brownian is available".into(),
            ));
        };
        let nz = |n: usize| NonZeroUsize::new(n.max(2)).expect("nonzero");
        Ok(Self {
            f_tilde,
            drift,
            sigma,
            grid,
            nodes,
            rule: GaussHermite::new(nz(nodes)),
            coarse: GaussHermite::new(nz(nodes / 2)),
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    fn transition(&self, rule: &GaussHermite, s: f64, x: f64) -> f64 {
        if s == 0.0 || self.sigma == 0.0 {
            return self.f_tilde.value(x + self.drift * s);
        }
        let mu = x + self.drift * s;
        let scale = self.sigma * (2.0 * s).sqrt();
        rule.integrate(|u| self.f_tilde.value(mu + scale * u)) / std::f64::consts::PI.sqrt()
    }

    /// `T_s f̃(x)`.
    pub fn semigroup(&self, s: f64, x: f64) -> f64 {
        self.transition(&self.rule, s, x)
    }

    /// Value and a quadrature error bound (difference to a half-size rule).
    pub fn eval_with_bound(&self, sp: &StoppedPath) -> Result<(f64, f64)> {
        if *sp.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        let k = sp.stop_index();
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let x = sp.coord(k, 0);
        let past = past_sum(sp, |v| self.f_tilde.value(v));
        let mut fut = 0.0;
        let mut bound = 0.0;
        for m in 0..n - k {
            let s = m as f64 * dt;
            let fine = self.transition(&self.rule, s, x);
            fut += fine;
            bound += (fine - self.transition(&self.coarse, s, x)).abs();
        }
        Ok(((past + fut) * dt, bound * dt))
    }
}

impl Functional for SemigroupValuation {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, sp: &StoppedPath) -> Result<f64> {
        Ok(self.eval_with_bound(sp)?.0)
    }
}

/// Closed-form `G_f` for `f = ((1/T)∫₀ᵀ ω dt)²` under Brownian motion with
/// drift `b` and volatility `σ`, on the grid's left-Riemann average.
///
/// With `N = n − k` steps left, `P = Σ_{i<k} ω_i` and frozen value `x`:
/// `G = (dt/T)² [(P + N·x + b·dt·N(N−1)/2)² + σ²·dt·(N−1)N(2N−1)/6]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsianSquareBrownian {
    pub drift: f64,
    pub sigma: f64,
    pub grid: TimeGrid,
}

impl AsianSquareBrownian {
    pub fn from_model(model: &ModelSpec, grid: TimeGrid) -> Result<Self> {
        match *model {
            ModelSpec::Brownian { drift, sigma, .. } => Ok(Self { drift, sigma, grid }),
            _ => Err(Error::UnsupportedModel("closed form exists for brownian only".into())),
        }
    }
}

impl Functional for AsianSquareBrownian {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, sp: &StoppedPath) -> Result<f64> {
        if *sp.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let k = sp.stop_index();
        let nn = (n - k) as f64;
        let mean = past_sum(sp, |v| v) + nn * sp.coord(k, 0) + self.drift * dt * nn * (nn - 1.0) / 2.0;
        let var = self.sigma * self.sigma * dt * (nn - 1.0) * nn * (2.0 * nn - 1.0) / 6.0;
        let r = dt / self.grid.horizon();
        Ok(r * r * (mean * mean + var.max(0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{simulate_batch, simulate_stream, Atom};
    use crate::pathspace::{stop, vertical_bump};

    fn bm(sigma: f64) -> ModelSpec {
        ModelSpec::Brownian {
            x0: 0.0,
            drift: 0.0,
            sigma,
        }
    }

    #[test]
    fn refuses_dependent_increments() {
        use crate::models::Coef;
        let ito = ModelSpec::ItoSemimartingale {
            x0: 0.0,
            beta: Coef::Const(0.0),
            delta: Coef::Const(0.2),
            jumps: vec![],
        };
        let g = TimeGrid::new(1.0, 10).unwrap();
        let f = FunctionalSpec::Terminal {
            f_tilde: ScalarFn::Identity,
        };
        assert_eq!(
            EstimatedValuation::new(f, ito, g, 10, 0).err(),
            Some(Error::NotIndependentIncrements)
        );
    }

    #[test]
    fn martingale_mean_at_start() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let x0 = 0.7;
        let f = FunctionalSpec::Terminal {
            f_tilde: ScalarFn::Identity,
        };
        let v = EstimatedValuation::new(f, bm(0.5), g, 20_000, 3).unwrap();
        let sp = stop(&GridPath::constant(g, &[x0]), 0).unwrap();
        let (m, se) = v.eval_with_se(&sp).unwrap();
        assert!((m - x0).abs() <= 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn compound_poisson_integral_mean() {
        let (lam, mj, t) = (2.0, 0.3, 1.0);
        let n = 200;
        let g = TimeGrid::new(t, n).unwrap();
        let model = ModelSpec::CompoundPoisson {
            x0: 0.0,
            rate: lam,
            atoms: vec![Atom { size: 0.5, prob: 0.8 }, Atom { size: -0.5, prob: 0.2 }],
        };
        let f = FunctionalSpec::IntegralPayoff {
            f_tilde: ScalarFn::Identity,
        };
        let v = EstimatedValuation::new(f, model, g, 20_000, 5).unwrap();
        let sp = stop(&GridPath::constant(g, &[0.0]), 0).unwrap();
        let (m, se) = v.eval_with_se(&sp).unwrap();
        let exact = lam * mj * t * t / 2.0;
        // left-Riemann bias: λ·m·dt·T/2
        let bias = lam * mj * g.dt() * t / 2.0;
        assert!((m - exact).abs() <= 3.0 * se + bias, "{m} vs {exact}");
    }

    #[test]
    fn asian_square_second_moment() {
        let (x0, sigma) = (1.2, 0.4);
        let g = TimeGrid::new(1.0, 100).unwrap();
        let f = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        };
        let v = EstimatedValuation::new(f, bm(sigma), g, 40_000, 8).unwrap();
        let sp = stop(&GridPath::constant(g, &[x0]), 0).unwrap();
        let (m, se) = v.eval_with_se(&sp).unwrap();
        // Var((1/T)∫σB dt) = σ²T/3 via ∫∫ min(s,u) ds du = T³/3
        let exact = x0 * x0 + sigma * sigma / 3.0;
        let disc = AsianSquareBrownian::from_model(&bm(sigma), g).unwrap().eval(&sp).unwrap();
        assert!((m - disc).abs() <= 3.0 * se, "{m} vs {disc}");
        assert!((disc - exact).abs() < 2.0 * sigma * sigma * g.dt());
    }

    #[test]
    fn terminal_condition_and_single_sample() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let model = ModelSpec::LevyJumpDiffusion {
            x0: 0.3,
            drift: 0.1,
            sigma: 0.2,
            rate: 3.0,
            atoms: vec![Atom { size: 0.2, prob: 0.5 }, Atom { size: -0.1, prob: 0.5 }],
        };
        let payoffs = [
            FunctionalSpec::Asian {
                f_tilde: ScalarFn::SoftplusCall { strike: 0.3, width: 0.1 },
            },
            FunctionalSpec::Terminal {
                f_tilde: ScalarFn::Sin,
            },
            FunctionalSpec::IntegralPayoff {
                f_tilde: ScalarFn::Square,
            },
            FunctionalSpec::DiscreteMonitor {
                monitor_times: vec![0.5],
                h: ScalarFn::Identity,
                g: crate::functionals::MonitorFn::default(),
            },
        ];
        for (i, f) in payoffs.into_iter().enumerate() {
            let v = EstimatedValuation::new(f.clone(), model.clone(), g, 5, 2).unwrap();
            let p = simulate_stream(&model, &g, 77, i as u64);
            let end = stop(&p, 16).unwrap();
            assert_eq!(v.eval(&end).unwrap(), f.eval(&end).unwrap());
            for k in [0, 5, 11] {
                let sp = stop(&p, k).unwrap();
                let direct = f.eval(&stop(&concat(&sp, &v.continuation_for(3, k)).unwrap(), 16).unwrap()).unwrap();
                let s = v.sample_value(&sp, 3).unwrap();
                assert!((s - direct).abs() <= 1e-12 * (1.0 + direct.abs()), "{f:?} k={k}: {s} vs {direct}");
            }
            let sp = stop(&p, 4).unwrap();
            assert_eq!(v.eval(&sp).unwrap(), v.eval(&sp).unwrap());
        }
    }

    #[test]
    fn martingale_along_paths() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let model = ModelSpec::Brownian {
            x0: 0.5,
            drift: 0.0,
            sigma: 0.3,
        };
        let f = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        };
        let v = EstimatedValuation::new(f, model.clone(), g, 4000, 1).unwrap();
        let g0 = v.eval(&stop(&GridPath::constant(g, &[0.5]), 0).unwrap()).unwrap();
        let paths = simulate_batch(&model, &g, 4000, 99);
        for k in [5, 10, 20] {
            let vals: Vec<f64> = paths.iter().map(|p| v.eval(&stop(p, k).unwrap()).unwrap()).collect();
            let (m, se) = mean_se(&vals);
            assert!((m - g0).abs() <= 3.0 * se, "k={k}: {m} vs {g0} ± {se}");
        }
    }

    #[test]
    fn semigroup_examples() {
        let g = TimeGrid::new(2.0, 50).unwrap();
        let model = ModelSpec::Brownian {
            x0: 0.0,
            drift: 0.0,
            sigma: 0.3,
        };
        let p = simulate_stream(&model, &g, 4, 0);
        let konst = SemigroupValuation::new(ScalarFn::ExpClipped { cap: -50.0 }, &model, g, 20).unwrap();
        let c = (-50.0f64).exp();
        for k in [0, 17, 50] {
            let v = konst.eval(&stop(&p, k).unwrap()).unwrap();
            assert!((v - c * 2.0).abs() < 1e-12 * c);
        }
        let sq = SemigroupValuation::new(ScalarFn::Square, &model, g, 20).unwrap();
        let end = stop(&p, 50).unwrap();
        let pay = FunctionalSpec::IntegralPayoff {
            f_tilde: ScalarFn::Square,
        };
        assert_eq!(sq.eval(&end).unwrap(), pay.eval(&end).unwrap());
        // x0²T + σ² Σ_m m·dt·dt on the grid, which tends to x0²T + σ²T²/2
        let x0 = 0.8;
        let (v, bound) = sq.eval_with_bound(&stop(&GridPath::constant(g, &[x0]), 0).unwrap()).unwrap();
        let dt = g.dt();
        let disc = x0 * x0 * 2.0 + 0.09 * dt * dt * (50.0 * 49.0 / 2.0);
        assert!((v - disc).abs() < 1e-12);
        assert!(bound < 1e-12);
        assert!(SemigroupValuation::new(ScalarFn::Square, &ModelSpec::CompoundPoisson { x0: 0.0, rate: 0.0, atoms: vec![] }, g, 20).is_err());
    }

    #[test]
    fn closed_form_is_vertically_quadratic() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let cf = AsianSquareBrownian {
            drift: 0.0,
            sigma: 0.3,
            grid: g,
        };
        let p = simulate_stream(&bm(0.3), &g, 0, 0);
        let sp = stop(&p, 4).unwrap();
        let x = 0.2;
        let second = cf.eval(&vertical_bump(&sp, &[x]).unwrap()).unwrap() - 2.0 * cf.eval(&sp).unwrap()
            + cf.eval(&vertical_bump(&sp, &[-x]).unwrap()).unwrap();
        let r = 0.6;
        assert!((second - 2.0 * (r * x).powi(2)).abs() < 1e-13);
    }
}
