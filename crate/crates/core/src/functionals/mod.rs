//! Non-anticipative functionals `F(t, ω)` on stopped paths.
//!
//! Time integrals use the left-Riemann rule on the grid, so integrands see
//! pre-jump values and the integral up to `t_k` does not depend on `ω_{t_k}`.

mod library;
mod valuation;

pub use library::{de_scalar, MonitorFn, ScalarFn, WeightFn};
pub use valuation::{AsianSquareBrownian, EstimatedValuation, SampleView, SemigroupValuation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathspace::{vertical_bump, StoppedPath, TimeGrid};

/// Anything that can be evaluated on a stopped path.
pub trait Functional: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, sp: &StoppedPath) -> Result<f64>;

    /// Multiplier applied to default finite-difference steps at `sp`. Monte
    /// Carlo valuations use larger steps than exactly evaluated functionals.
    fn fd_scale(&self, _sp: &StoppedPath) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalSpec {
    /// `∫₀ᵗ g(ω_s) ρ(s) ds`.
    IntegralOfFunction {
        #[serde(deserialize_with = "de_scalar")]
        g: ScalarFn,
        #[serde(default)]
        rho: WeightFn,
    },
    /// `h(ω_t − ω_{t_n−}) 𝟙_{t ≥ t_n} g(ω_{t_1−}, …, ω_{t_n−})`.
    DiscreteMonitor {
        monitor_times: Vec<f64>,
        #[serde(deserialize_with = "de_scalar")]
        h: ScalarFn,
        #[serde(default)]
        g: MonitorFn,
    },
    /// `f̃((1/T) ∫₀ᵀ ω_t dt)` of the frozen path.
    Asian {
        #[serde(deserialize_with = "de_scalar")]
        f_tilde: ScalarFn,
    },
    /// `f̃(ω_T)` of the frozen path.
    Terminal {
        #[serde(deserialize_with = "de_scalar")]
        f_tilde: ScalarFn,
    },
    /// `∫₀ᵀ f̃(ω_t) dt` of the frozen path.
    IntegralPayoff {
        #[serde(deserialize_with = "de_scalar")]
        f_tilde: ScalarFn,
    },
}

impl FunctionalSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FunctionalSpec::IntegralOfFunction { .. } => "integral_of_function",
            FunctionalSpec::DiscreteMonitor { .. } => "discrete_monitor",
            FunctionalSpec::Asian { .. } => "asian",
            FunctionalSpec::Terminal { .. } => "terminal",
            FunctionalSpec::IntegralPayoff { .. } => "integral_payoff",
        }
    }

    /// Payoff-type functionals evaluate the whole frozen path.
    pub fn is_terminal_payoff(&self) -> bool {
        matches!(
            self,
            FunctionalSpec::Asian { .. } | FunctionalSpec::Terminal { .. } | FunctionalSpec::IntegralPayoff { .. }
        )
    }

    pub fn f_tilde(&self) -> Option<&ScalarFn> {
        match self {
            FunctionalSpec::Asian { f_tilde }
            | FunctionalSpec::Terminal { f_tilde }
            | FunctionalSpec::IntegralPayoff { f_tilde } => Some(f_tilde),
            _ => None,
        }
    }

    /// Checks parameters against a grid.
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        match self {
            FunctionalSpec::IntegralOfFunction { g, .. } => g.validate(),
            FunctionalSpec::DiscreteMonitor { monitor_times, h, g } => {
                h.validate()?;
                self.monitor_indices(grid)?;
                if monitor_times.is_empty() {
                    return Err(Error::param("monitor_times", "need at least one"));
                }
                if h.value(0.0) != 0.0 {
                    return Err(Error::param("h", "must vanish at 0"));
                }
                if let MonitorFn::WeightedSum { weights } = g {
                    if weights.len() != monitor_times.len() {
                        return Err(Error::param("weights", "one weight per monitor time"));
                    }
                }
                Ok(())
            }
            FunctionalSpec::Asian { f_tilde }
            | FunctionalSpec::Terminal { f_tilde }
            | FunctionalSpec::IntegralPayoff { f_tilde } => f_tilde.validate(),
        }
    }

    fn monitor_indices(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        let FunctionalSpec::DiscreteMonitor { monitor_times, .. } = self else {
            return Ok(vec![]);
        };
        let idx = monitor_times
            .iter()
            .map(|&t| grid.index_of(t).ok_or(Error::OffGridMonitor(t)))
            .collect::<Result<Vec<_>>>()?;
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("monitor_times", "must be strictly increasing"));
        }
        Ok(idx)
    }
}

/// `Σ_{i<k} f(ω_i)`: the left-Riemann sum of the past, without the `dt` factor.
pub(crate) fn past_sum(sp: &StoppedPath, f: impl Fn(f64) -> f64) -> f64 {
    (0..sp.stop_index()).map(|i| f(sp.coord(i, 0))).sum()
}

fn check_dim(sp: &StoppedPath) -> Result<()> {
    if sp.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: sp.dim(),
        });
    }
    Ok(())
}

impl Functional for FunctionalSpec {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, sp: &StoppedPath) -> Result<f64> {
        check_dim(sp)?;
        let grid = sp.grid();
        let n = grid.n_steps();
        let dt = grid.dt();
        let k = sp.stop_index();
        let x = sp.coord(k, 0);
        Ok(match self {
            FunctionalSpec::IntegralOfFunction { g, rho } => {
                (0..k)
                    .map(|i| g.value(sp.coord(i, 0)) * rho.value(grid.time(i)))
                    .sum::<f64>()
                    * dt
            }
            FunctionalSpec::DiscreteMonitor { h, g, .. } => {
                let idx = self.monitor_indices(grid)?;
                let last = *idx.last().ok_or_else(|| Error::param("monitor_times", "need at least one"))?;
                if k < last {
                    0.0
                } else {
                    let lefts: Vec<f64> = idx.iter().map(|&i| sp.left_coord(i, 0)).collect();
                    h.value(x - lefts[lefts.len() - 1]) * g.value(&lefts)
                }
            }
            FunctionalSpec::Asian { f_tilde } => {
                let s = past_sum(sp, |v| v) + (n - k) as f64 * x;
                f_tilde.value(s * dt / grid.horizon())
            }
            FunctionalSpec::Terminal { f_tilde } => f_tilde.value(x),
            FunctionalSpec::IntegralPayoff { f_tilde } => {
                (past_sum(sp, |v| f_tilde.value(v)) + (n - k) as f64 * f_tilde.value(x)) * dt
            }
        })
    }

    /// A vertical bump moves the Asian average by `(T − t)/T` times the bump,
    /// so steps are taken in units of the average.
    fn fd_scale(&self, sp: &StoppedPath) -> f64 {
        match self {
            FunctionalSpec::Asian { .. } => {
                let n = sp.grid().n_steps();
                n as f64 / (n - sp.stop_index()).max(1) as f64
            }
            _ => 1.0,
        }
    }
}

/// `Σ_m w_m F_m`, for linearity checks.
pub struct Combination<'a> {
    pub terms: Vec<(f64, &'a dyn Functional)>,
}

impl Functional for Combination<'_> {
    fn dim(&self) -> usize {
        self.terms.first().map_or(1, |(_, f)| f.dim())
    }

    fn eval(&self, sp: &StoppedPath) -> Result<f64> {
        let mut acc = 0.0;
        for (w, f) in &self.terms {
            acc += w * f.eval(sp)?;
        }
        Ok(acc)
    }

    fn fd_scale(&self, sp: &StoppedPath) -> f64 {
        self.terms.iter().map(|(_, f)| f.fd_scale(sp)).fold(1.0, f64::max)
    }
}

/// `H_F(t, ω, x) = F(ω^{t−} + x𝟙) − F(ω^{t−}) − ∇F·x`, with the gradient
/// supplied by the caller.
pub fn increment_h<F: Functional + ?Sized>(f: &F, sp_pre: &StoppedPath, x: &[f64], grad: &[f64]) -> Result<f64> {
    if grad.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: grad.len(),
        });
    }
    let base = f.eval(sp_pre)?;
    increment_h_with_base(f, sp_pre, base, x, grad)
}

/// [`increment_h`] when `F(ω^{t−})` is already known.
pub fn increment_h_with_base<F: Functional + ?Sized>(
    f: &F,
    sp_pre: &StoppedPath,
    base: f64,
    x: &[f64],
    grad: &[f64],
) -> Result<f64> {
    let bumped = f.eval(&vertical_bump(sp_pre, x)?)?;
    let lin: f64 = grad.iter().zip(x).map(|(g, xi)| g * xi).sum();
    Ok(bumped - base - lin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathspace::{stop, GridPath};
    use proptest::prelude::*;

    fn g4() -> TimeGrid {
        TimeGrid::new(1.0, 4).unwrap()
    }

    #[test]
    fn integral_of_constant() {
        let c = 1.7;
        let f = FunctionalSpec::IntegralOfFunction {
            g: ScalarFn::Identity,
            rho: WeightFn::default(),
        };
        let sp = stop(&GridPath::constant(g4(), &[c]), 4).unwrap();
        assert!((f.eval(&sp).unwrap() - c * 1.0).abs() < 1e-15);
    }

    #[test]
    fn asian_of_ramp() {
        let n = 1000;
        let g = TimeGrid::new(1.0, n).unwrap();
        let p = GridPath::from_values(g, (0..=n).map(|k| g.time(k)).collect()).unwrap();
        let f = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Identity,
        };
        let v = f.eval(&stop(&p, n).unwrap()).unwrap();
        // left-Riemann mean of t on [0,1] is (1 − dt)/2
        assert!((v - 0.5).abs() <= 0.5 / n as f64 + 1e-12);
    }

    #[test]
    fn monitor_hand_oracle() {
        // jump of +1 at index 2 = monitor time 0.5
        let p = GridPath::new(
            g4(),
            1,
            vec![0.0, 0.2, 1.2, 1.5, 0.9],
            vec![false, false, true, false, false],
        )
        .unwrap();
        let f = FunctionalSpec::DiscreteMonitor {
            monitor_times: vec![0.5],
            h: ScalarFn::Identity,
            g: MonitorFn::default(),
        };
        f.validate(&g4()).unwrap();
        let at = |k| f.eval(&stop(&p, k).unwrap()).unwrap();
        assert_eq!(at(1), 0.0);
        assert!((at(2) - 1.0).abs() < 1e-15);
        assert!((at(3) - 1.3).abs() < 1e-15);
        assert!((at(4) - 0.7).abs() < 1e-15);
        let off = FunctionalSpec::DiscreteMonitor {
            monitor_times: vec![0.3],
            h: ScalarFn::Identity,
            g: MonitorFn::default(),
        };
        assert_eq!(off.validate(&g4()), Err(Error::OffGridMonitor(0.3)));
        assert_eq!(off.eval(&stop(&p, 4).unwrap()), Err(Error::OffGridMonitor(0.3)));
    }

    #[test]
    fn increment_examples() {
        let p = GridPath::from_values(g4(), vec![0.3, -0.1, 0.5, 0.2, 0.9]).unwrap();
        let sp = stop(&p, 2).unwrap();
        let a = FunctionalSpec::IntegralOfFunction {
            g: ScalarFn::Sin,
            rho: WeightFn::default(),
        };
        assert_eq!(increment_h(&a, &sp, &[0.7], &[0.0]).unwrap(), 0.0);
        let t = FunctionalSpec::Terminal {
            f_tilde: ScalarFn::Identity,
        };
        for x in [-1.0, 0.25, 3.0] {
            assert!(increment_h(&t, &sp, &[x], &[1.0]).unwrap().abs() < 1e-15);
        }
        let asian = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        };
        let x = 0.4;
        let s = 0.5;
        let mean = (0.3 - 0.1 + 2.0 * 0.5) * 0.25;
        let grad = 2.0 * mean * (1.0 - s);
        let h = increment_h(&asian, &sp, &[x], &[grad]).unwrap();
        assert!((h - ((1.0 - s) * x).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn serde_forms() {
        let f: FunctionalSpec = serde_json::from_str(r#"{"kind":"asian","f_tilde":"square"}"#).unwrap();
        assert_eq!(
            f,
            FunctionalSpec::Asian {
                f_tilde: ScalarFn::Square
            }
        );
        let m: FunctionalSpec =
            serde_json::from_str(r#"{"kind":"discrete_monitor","monitor_times":[0.5],"h":"sin"}"#).unwrap();
        let back: FunctionalSpec = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    fn catalog() -> Vec<FunctionalSpec> {
        vec![
            FunctionalSpec::IntegralOfFunction {
                g: ScalarFn::Tanh,
                rho: WeightFn::Linear {
                    intercept: 1.0,
                    slope: -0.5,
                },
            },
            FunctionalSpec::DiscreteMonitor {
                monitor_times: vec![0.25, 0.5],
                h: ScalarFn::Sin,
                g: MonitorFn::WeightedSum {
                    weights: vec![1.0, 0.5],
                },
            },
            FunctionalSpec::Asian {
                f_tilde: ScalarFn::Square,
            },
            FunctionalSpec::Terminal {
                f_tilde: ScalarFn::Sin,
            },
            FunctionalSpec::IntegralPayoff {
                f_tilde: ScalarFn::Square,
            },
        ]
    }

    proptest! {
        #[test]
        fn non_anticipative(a in proptest::collection::vec(-2.0f64..2.0, 9),
                            b in proptest::collection::vec(-2.0f64..2.0, 9),
                            k in 0usize..=8) {
            let g = TimeGrid::new(1.0, 8).unwrap();
            let pa = GridPath::from_values(g, a.clone()).unwrap();
            let mixed: Vec<f64> = (0..9).map(|i| if i <= k { a[i] } else { b[i] }).collect();
            let pb = GridPath::from_values(g, mixed).unwrap();
            for f in catalog() {
                let va = f.eval(&stop(&pa, k).unwrap()).unwrap();
                let vb = f.eval(&stop(&pb, k).unwrap()).unwrap();
                prop_assert_eq!(va, vb);
            }
        }
    }
}
