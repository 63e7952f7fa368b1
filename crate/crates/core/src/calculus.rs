//! Finite-difference horizontal and vertical derivatives, and probes for
//! vertical convexity, directional convexity and monotonicity.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::pathspace::{horizontal_extend, vertical_bump, StoppedPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Central,
    Forward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DerivativeConfig {
    /// Step for first vertical derivatives; scaled automatically when unset.
    pub eps_v: Option<f64>,
    /// Step for second vertical derivatives; scaled automatically when unset.
    pub eps_v2: Option<f64>,
    /// Horizontal step in grid steps.
    pub m_h: usize,
    /// Combine horizontal steps `m_h` and `2·m_h`.
    pub richardson: bool,
    pub scheme: Scheme,
}

impl Default for DerivativeConfig {
    fn default() -> Self {
        Self {
            eps_v: None,
            eps_v2: None,
            m_h: 1,
            richardson: false,
            scheme: Scheme::Central,
        }
    }
}

impl DerivativeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, e) in [("eps_v", self.eps_v), ("eps_v2", self.eps_v2)] {
            if let Some(e) = e {
                if !(e > 0.0 && e.is_finite()) {
                    return Err(Error::param(name, "must be positive"));
                }
            }
        }
        if self.m_h == 0 {
            return Err(Error::param("m_h", "must be at least 1"));
        }
        Ok(())
    }

    /// Step for the gradient at `sp`: `ε^{1/3}·(1 + ‖ω^t‖∞)·scale` by default.
    pub fn grad_step<F: Functional + ?Sized>(&self, f: &F, sp: &StoppedPath) -> f64 {
        self.eps_v
            .unwrap_or_else(|| f64::EPSILON.cbrt() * (1.0 + sp.sup_norm()) * f.fd_scale(sp))
    }

    /// Step for the Hessian at `sp`: `ε^{1/4}·(1 + ‖ω^t‖∞)·scale` by default.
    pub fn hess_step<F: Functional + ?Sized>(&self, f: &F, sp: &StoppedPath) -> f64 {
        self.eps_v2
            .unwrap_or_else(|| f64::EPSILON.powf(0.25) * (1.0 + sp.sup_norm()) * f.fd_scale(sp))
    }

    /// Copy with both vertical steps pinned to their values at `sp`, so that
    /// several functionals can be differentiated with identical steps.
    pub fn pinned<F: Functional + ?Sized>(&self, f: &F, sp: &StoppedPath) -> Self {
        Self {
            eps_v: Some(self.grad_step(f, sp)),
            eps_v2: Some(self.hess_step(f, sp)),
            ..self.clone()
        }
    }
}

fn finite(v: f64, sp: &StoppedPath) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::DerivativeBlowup(sp.stop_index()))
    }
}

fn unit(d: usize, i: usize, h: f64) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[i] = h;
    e
}

fn eval_bumped<F: Functional + ?Sized>(f: &F, sp: &StoppedPath, x: &[f64]) -> Result<f64> {
    f.eval(&vertical_bump(sp, x)?)
}

/// `𝒟F(t, ω) ≈ (F(t + m·dt, ω^t) − F(t, ω^t)) / (m·dt)`.
pub fn horizontal_derivative<F: Functional + ?Sized>(f: &F, sp: &StoppedPath, cfg: &DerivativeConfig) -> Result<f64> {
    let base = f.eval(sp)?;
    horizontal_derivative_with_base(f, sp, base, cfg)
}

/// [`horizontal_derivative`] when `F(t, ω^t)` is already known.
pub fn horizontal_derivative_with_base<F: Functional + ?Sized>(
    f: &F,
    sp: &StoppedPath,
    base: f64,
    cfg: &DerivativeConfig,
) -> Result<f64> {
    let m = cfg.m_h.max(1);
    let dt = sp.grid().dt();
    let one = (f.eval(&horizontal_extend(sp, m)?)? - base) / (m as f64 * dt);
    let d = if cfg.richardson {
        let two = (f.eval(&horizontal_extend(sp, 2 * m)?)? - base) / (2.0 * m as f64 * dt);
        2.0 * one - two
    } else {
        one
    };
    finite(d, sp)
}

/// Vertical gradient by central (or forward) differences.
pub fn vertical_gradient<F: Functional + ?Sized>(f: &F, sp: &StoppedPath, cfg: &DerivativeConfig) -> Result<Vec<f64>> {
    let h = cfg.grad_step(f, sp);
    let d = f.dim();
    let base = match cfg.scheme {
        Scheme::Forward => Some(f.eval(sp)?),
        Scheme::Central => None,
    };
    (0..d)
        .map(|i| {
            let up = eval_bumped(f, sp, &unit(d, i, h))?;
            let g = match base {
                Some(b) => (up - b) / h,
                None => (up - eval_bumped(f, sp, &unit(d, i, -h))?) / (2.0 * h),
            };
            finite(g, sp)
        })
        .collect()
}

/// Symmetrized vertical Hessian and the defect of the raw estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Hessian {
    pub matrix: DMatrix<f64>,
    pub asymmetry: f64,
}

/// Second central differences; off-diagonal entries use the four-point
/// stencil with nested bumps in both orders.
pub fn vertical_hessian<F: Functional + ?Sized>(f: &F, sp: &StoppedPath, cfg: &DerivativeConfig) -> Result<Hessian> {
    let base = f.eval(sp)?;
    vertical_hessian_with_base(f, sp, base, cfg)
}

/// [`vertical_hessian`] when `F(t, ω^t)` is already known.
pub fn vertical_hessian_with_base<F: Functional + ?Sized>(
    f: &F,
    sp: &StoppedPath,
    base: f64,
    cfg: &DerivativeConfig,
) -> Result<Hessian> {
    let h = cfg.hess_step(f, sp);
    let d = f.dim();
    let mut raw = DMatrix::zeros(d, d);
    for i in 0..d {
        let up = eval_bumped(f, sp, &unit(d, i, h))?;
        let dn = eval_bumped(f, sp, &unit(d, i, -h))?;
        raw[(i, i)] = finite((up - 2.0 * base + dn) / (h * h), sp)?;
        for j in 0..d {
            if i == j {
                continue;
            }
            let nested = |si: f64, sj: f64| -> Result<f64> {
                let first = vertical_bump(sp, &unit(d, i, si * h))?;
                f.eval(&vertical_bump(&first, &unit(d, j, sj * h))?)
            };
            let v = (nested(1.0, 1.0)? - nested(1.0, -1.0)? - nested(-1.0, 1.0)? + nested(-1.0, -1.0)?) / (4.0 * h * h);
            raw[(i, j)] = finite(v, sp)?;
        }
    }
    let asymmetry = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| (raw[(i, j)] - raw[(j, i)]).abs())
        .fold(0.0, f64::max);
    let matrix = (&raw + raw.transpose()) * 0.5;
    Ok(Hessian { matrix, asymmetry })
}

/// Change in `F` under a small vertical bump and a one-step horizontal
/// extension: a spot check of d∞-continuity, not a proof of it.
pub fn continuity_spot_check<F: Functional + ?Sized>(f: &F, sp: &StoppedPath, delta: f64) -> Result<(f64, f64)> {
    let base = f.eval(sp)?;
    let d = f.dim();
    let vert = (f.eval(&vertical_bump(sp, &vec![delta; d])?)? - base).abs();
    let horiz = if sp.stop_index() < sp.grid().n_steps() {
        (f.eval(&horizontal_extend(sp, 1)?)? - base).abs()
    } else {
        0.0
    };
    Ok((vert, horiz))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerticalProperty {
    Convex,
    DirectionalConvex,
    MonotoneIncreasing,
}

impl VerticalProperty {
    pub fn label(&self) -> &'static str {
        match self {
            VerticalProperty::Convex => "vertically_convex",
            VerticalProperty::DirectionalConvex => "vertically_directional_convex",
            VerticalProperty::MonotoneIncreasing => "vertically_monotone_increasing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub property: String,
    pub samples: usize,
    pub min_slack: f64,
    pub tolerance: f64,
    pub verdict: String,
}

impl ConvexityReport {
    pub fn passed(&self) -> bool {
        self.verdict == "pass"
    }
}

/// Probes a vertical property at each sample point.
///
/// Convexity: midpoint slack `F(a) + F(b) − 2F((a+b)/2)` over all pairs of
/// the bump grid. Directional convexity: smallest Hessian entry.
/// Monotonicity: `F(b) − F(a)` over pairs with `b ≥ a` componentwise.
pub fn probe_vertical_property<F: Functional + ?Sized>(
    f: &F,
    property: VerticalProperty,
    samples: &[StoppedPath],
    bump_grid: &[Vec<f64>],
    tol: f64,
    cfg: &DerivativeConfig,
) -> Result<ConvexityReport> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if property != VerticalProperty::DirectionalConvex && bump_grid.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let slacks = samples
        .par_iter()
        .map(|sp| point_slack(f, property, sp, bump_grid, cfg))
        .collect::<Result<Vec<f64>>>()?;
    let min_slack = slacks.into_iter().fold(f64::INFINITY, f64::min);
    Ok(ConvexityReport {
        property: property.label().to_string(),
        samples: samples.len(),
        min_slack,
        tolerance: tol,
        verdict: if min_slack >= -tol { "pass" } else { "fail" }.to_string(),
    })
}

fn point_slack<F: Functional + ?Sized>(
    f: &F,
    property: VerticalProperty,
    sp: &StoppedPath,
    bump_grid: &[Vec<f64>],
    cfg: &DerivativeConfig,
) -> Result<f64> {
    match property {
        VerticalProperty::DirectionalConvex => {
            let h = vertical_hessian(f, sp, cfg)?;
            Ok(h.matrix.iter().copied().fold(f64::INFINITY, f64::min))
        }
        VerticalProperty::Convex => {
            let vals = bump_grid
                .iter()
                .map(|a| eval_bumped(f, sp, a))
                .collect::<Result<Vec<f64>>>()?;
            let mut worst = f64::INFINITY;
            for (i, a) in bump_grid.iter().enumerate() {
                for (j, b) in bump_grid.iter().enumerate().skip(i + 1) {
                    let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
                    let s = vals[i] + vals[j] - 2.0 * eval_bumped(f, sp, &mid)?;
                    worst = worst.min(s);
                }
            }
            Ok(worst)
        }
        VerticalProperty::MonotoneIncreasing => {
            let vals = bump_grid
                .iter()
                .map(|a| eval_bumped(f, sp, a))
                .collect::<Result<Vec<f64>>>()?;
            let mut worst = f64::INFINITY;
            for (i, a) in bump_grid.iter().enumerate() {
                for (j, b) in bump_grid.iter().enumerate() {
                    if i != j && a.iter().zip(b).all(|(x, y)| y >= x) {
                        worst = worst.min(vals[j] - vals[i]);
                    }
                }
            }
            Ok(worst)
        }
    }
}

/// Symmetric one-dimensional bump grid `{−ε, …, ε}` with `2·half + 1` points.
pub fn symmetric_bumps(eps: f64, half: usize) -> Vec<Vec<f64>> {
    let half = half.max(1) as i64;
    (-half..=half).map(|i| vec![eps * i as f64 / half as f64]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{FunctionalSpec, MonitorFn, ScalarFn, WeightFn};
    use crate::models::{simulate_stream, ModelSpec};
    use crate::pathspace::{stop, GridPath, TimeGrid};

    fn paths(n: usize, count: usize) -> Vec<GridPath> {
        let g = TimeGrid::new(1.0, n).unwrap();
        let m = ModelSpec::LevyJumpDiffusion {
            x0: 0.2,
            drift: 0.0,
            sigma: 0.4,
            rate: 2.0,
            atoms: vec![
                crate::models::Atom { size: 0.3, prob: 0.5 },
                crate::models::Atom { size: -0.3, prob: 0.5 },
            ],
        };
        (0..count as u64).map(|i| simulate_stream(&m, &g, 21, i)).collect()
    }

    #[test]
    fn integral_functional_derivatives() {
        let f = FunctionalSpec::IntegralOfFunction {
            g: ScalarFn::Sin,
            rho: WeightFn::Exponential { rate: 0.5 },
        };
        let cfg = DerivativeConfig::default();
        for p in paths(40, 10) {
            for k in [0, 7, 39] {
                let sp = stop(&p, k).unwrap();
                let t = sp.time();
                let d = horizontal_derivative(&f, &sp, &cfg).unwrap();
                assert!((d - sp.coord(k, 0).sin() * (-0.5 * t).exp()).abs() < 1e-10);
                assert_eq!(vertical_gradient(&f, &sp, &cfg).unwrap(), vec![0.0]);
                assert_eq!(vertical_hessian(&f, &sp, &cfg).unwrap().matrix[(0, 0)], 0.0);
            }
        }
    }

    #[test]
    fn constant_frozen_value_integral() {
        let c = -0.8;
        let g = TimeGrid::new(1.0, 10).unwrap();
        let f = FunctionalSpec::IntegralOfFunction {
            g: ScalarFn::Identity,
            rho: WeightFn::default(),
        };
        let sp = stop(&GridPath::constant(g, &[c]), 3).unwrap();
        let d = horizontal_derivative(&f, &sp, &DerivativeConfig::default()).unwrap();
        assert!((d - c).abs() < 1e-12);
    }

    #[test]
    fn monitor_horizontal_derivative_is_zero() {
        let f = FunctionalSpec::DiscreteMonitor {
            monitor_times: vec![0.25],
            h: ScalarFn::Sin,
            g: MonitorFn::default(),
        };
        let cfg = DerivativeConfig::default();
        for p in paths(20, 5) {
            for k in [2, 5, 12] {
                let sp = stop(&p, k).unwrap();
                assert_eq!(horizontal_derivative(&f, &sp, &cfg).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn horizon_has_no_room() {
        let g = TimeGrid::new(1.0, 5).unwrap();
        let sp = stop(&GridPath::constant(g, &[0.0]), 5).unwrap();
        let f = FunctionalSpec::Terminal {
            f_tilde: ScalarFn::Identity,
        };
        assert!(matches!(
            horizontal_derivative(&f, &sp, &DerivativeConfig::default()),
            Err(Error::PastHorizon { .. })
        ));
        let d = vertical_gradient(&f, &sp, &DerivativeConfig::default()).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn asian_closed_forms() {
        let n = 50;
        let f_t = ScalarFn::SoftplusCall { strike: 0.1, width: 0.3 };
        let f = FunctionalSpec::Asian { f_tilde: f_t.clone() };
        let cfg = DerivativeConfig::default();
        for p in paths(n, 10) {
            for k in [0, 13, 49] {
                let sp = stop(&p, k).unwrap();
                let r = 1.0 - sp.time();
                let mean = (0..k).map(|i| p.value(i)[0]).sum::<f64>() / n as f64 + r * p.value(k)[0];
                let g = vertical_gradient(&f, &sp, &cfg).unwrap()[0];
                let h = vertical_hessian(&f, &sp, &cfg).unwrap();
                assert!((g - r * f_t.d1(mean)).abs() <= 1e-8 * (r * f_t.d1(mean)).abs().max(1e-3));
                let want = r * r * f_t.d2(mean);
                assert!((h.matrix[(0, 0)] - want).abs() <= 1e-4 * want.abs(), "{} vs {want}", h.matrix[(0, 0)]);
                assert_eq!(h.asymmetry, 0.0);
            }
        }
    }

    #[test]
    fn richardson_keeps_exact_differences() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let f = FunctionalSpec::IntegralOfFunction {
            g: ScalarFn::Identity,
            rho: WeightFn::default(),
        };
        let ramp = GridPath::from_values(g, (0..=100).map(|k| g.time(k)).collect()).unwrap();
        let sp = stop(&ramp, 30).unwrap();
        let plain = horizontal_derivative(&f, &sp, &DerivativeConfig::default()).unwrap();
        // the frozen path is flat, so the exact one-sided derivative is ω_t = 0.3
        assert!((plain - 0.3).abs() < 1e-12);
        let rich = horizontal_derivative(
            &f,
            &sp,
            &DerivativeConfig {
                richardson: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((rich - 0.3).abs() < 1e-12);
    }

    #[test]
    fn probe_examples() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let samples: Vec<StoppedPath> = paths(20, 6).iter().map(|p| stop(p, 5).unwrap()).collect();
        let cfg = DerivativeConfig::default();
        let eps = 0.1;
        let bumps = symmetric_bumps(eps, 2);
        let convex = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        };
        let r = probe_vertical_property(&convex, VerticalProperty::Convex, &samples, &bumps, 1e-12, &cfg).unwrap();
        assert!(r.passed());
        let concave = FunctionalSpec::Asian {
            f_tilde: ScalarFn::NegSquare,
        };
        let r = probe_vertical_property(&concave, VerticalProperty::Convex, &samples, &bumps, 1e-12, &cfg).unwrap();
        assert!(!r.passed());
        let frac = 1.0 - g.time(5);
        let expect = -2.0 * frac * frac * eps * eps;
        assert!((r.min_slack - expect).abs() < 1e-12, "{} vs {expect}", r.min_slack);

        let lin = FunctionalSpec::Terminal {
            f_tilde: ScalarFn::Identity,
        };
        let r = probe_vertical_property(&lin, VerticalProperty::MonotoneIncreasing, &samples, &bumps, 1e-12, &cfg)
            .unwrap();
        assert!(r.passed() && r.min_slack >= 0.0);
        let r = probe_vertical_property(&convex, VerticalProperty::DirectionalConvex, &samples, &[], 1e-6, &cfg).unwrap();
        assert!(r.passed());
        assert_eq!(
            probe_vertical_property(&lin, VerticalProperty::Convex, &[], &bumps, 0.0, &cfg),
            Err(Error::EmptySampleSet)
        );
        let json = serde_json::to_value(&r).unwrap();
        for key in ["property", "samples", "min_slack", "verdict"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn continuity_spot() {
        let f = FunctionalSpec::Asian {
            f_tilde: ScalarFn::Tanh,
        };
        let sp = stop(&paths(30, 1)[0], 10).unwrap();
        let (v, h) = continuity_spot_check(&f, &sp, 1e-6).unwrap();
        assert!(v < 1e-5 && h < 1e-14);
    }
}
