//! Semimartingale model catalog.
//!
//! Every model is one-dimensional and described by its differential
//! characteristics `(b, c, K)` with respect to `A_t = t`, using the identity
//! as truncation function: `b` is the full drift, so the Euler step adds the
//! compensated jump part `b − ∫x K(dx)` as deterministic drift and the raw
//! jumps on top.
//!
//! Randomness: path `i` of a batch drawn with root seed `s` uses
//! `ChaCha8Rng::seed_from_u64(s)` on stream `i`. A single [`simulate`] call
//! is stream 0.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathspace::{GridPath, StoppedPath, TimeGrid};

/// Jump atom of a compound Poisson law: size and probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub size: f64,
    pub prob: f64,
}

/// State-dependent jump atom: size and intensity per unit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAtom {
    pub size: f64,
    pub intensity: Coef,
}

/// Coefficient expression over `(t, ω_{t−}, running mean of ω on [0, t))`.
///
/// Numbers deserialize as constants; `"time"`, `"state"` and `"running_mean"`
/// are the three inputs; tables like `{ sin = "state" }` or
/// `{ add = [0.2, { mul = [0.05, { sin = "state" }] }] }` combine them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coef {
    Const(f64),
    Expr(Expr),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Time,
    State,
    RunningMean,
    Add(Vec<Coef>),
    Mul(Vec<Coef>),
    Neg(Box<Coef>),
    Sin(Box<Coef>),
    Cos(Box<Coef>),
    Exp(Box<Coef>),
    Tanh(Box<Coef>),
    Abs(Box<Coef>),
    Max(Vec<Coef>),
    Min(Vec<Coef>),
}

/// Inputs to a coefficient expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefInput {
    pub t: f64,
    pub state: f64,
    pub running_mean: f64,
}

impl CoefInput {
    /// Inputs read off a left-limit stopped path.
    pub fn from_stopped(sp: &StoppedPath) -> Self {
        let k = sp.stop_index();
        let state = sp.coord(k, 0);
        let running_mean = if k == 0 {
            state
        } else {
            (0..k).map(|i| sp.coord(i, 0)).sum::<f64>() / k as f64
        };
        Self {
            t: sp.time(),
            state,
            running_mean,
        }
    }
}

impl Coef {
    pub fn eval(&self, x: &CoefInput) -> f64 {
        match self {
            Coef::Const(c) => *c,
            Coef::Expr(e) => e.eval(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Coef::Const(c) if *c == 0.0)
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Coef::Const(_) => true,
            Coef::Expr(e) => e.is_constant(),
        }
    }
}

impl Expr {
    fn eval(&self, x: &CoefInput) -> f64 {
        match self {
            Expr::Time => x.t,
            Expr::State => x.state,
            Expr::RunningMean => x.running_mean,
            Expr::Add(v) => v.iter().map(|c| c.eval(x)).sum(),
            Expr::Mul(v) => v.iter().map(|c| c.eval(x)).product(),
            Expr::Neg(c) => -c.eval(x),
            Expr::Sin(c) => c.eval(x).sin(),
            Expr::Cos(c) => c.eval(x).cos(),
            Expr::Exp(c) => c.eval(x).exp(),
            Expr::Tanh(c) => c.eval(x).tanh(),
            Expr::Abs(c) => c.eval(x).abs(),
            Expr::Max(v) => v.iter().map(|c| c.eval(x)).fold(f64::NEG_INFINITY, f64::max),
            Expr::Min(v) => v.iter().map(|c| c.eval(x)).fold(f64::INFINITY, f64::min),
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Expr::Time | Expr::State | Expr::RunningMean => false,
            Expr::Add(v) | Expr::Mul(v) | Expr::Max(v) | Expr::Min(v) => {
                v.iter().all(Coef::is_constant)
            }
            Expr::Neg(c) | Expr::Sin(c) | Expr::Cos(c) | Expr::Exp(c) | Expr::Tanh(c) | Expr::Abs(c) => {
                c.is_constant()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Brownian {
        x0: f64,
        #[serde(default)]
        drift: f64,
        sigma: f64,
    },
    CompoundPoisson {
        x0: f64,
        rate: f64,
        atoms: Vec<Atom>,
    },
    /// Type C when `sigma > 0`.
    LevyJumpDiffusion {
        x0: f64,
        #[serde(default)]
        drift: f64,
        sigma: f64,
        rate: f64,
        atoms: Vec<Atom>,
    },
    ItoSemimartingale {
        x0: f64,
        beta: Coef,
        delta: Coef,
        #[serde(default)]
        jumps: Vec<StateAtom>,
    },
}

/// Jump atom of a kernel `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelAtom {
    pub size: Vec<f64>,
    pub intensity: f64,
}

/// Differential characteristics with respect to `A_t = t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Characteristics {
    pub b: Vec<f64>,
    pub c: DMatrix<f64>,
    pub kernel: Vec<KernelAtom>,
}

impl Characteristics {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// One-dimensional characteristics `(b, σ², K)`.
    pub fn scalar(b: f64, sigma: f64, atoms: Vec<(f64, f64)>) -> Self {
        Self {
            b: vec![b],
            c: DMatrix::from_element(1, 1, sigma * sigma),
            kernel: atoms
                .into_iter()
                .map(|(size, intensity)| KernelAtom {
                    size: vec![size],
                    intensity,
                })
                .collect(),
        }
    }

    /// Total jump intensity.
    pub fn jump_rate(&self) -> f64 {
        self.kernel.iter().map(|a| a.intensity).sum()
    }
}

/// `∫ h(x) K(dx)` for a finite atom list.
pub fn kernel_integral<F>(kernel: &[KernelAtom], mut h: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    kernel.iter().map(|a| a.intensity * h(&a.size)).sum()
}

fn check_atoms(atoms: &[Atom], rate: f64) -> Result<()> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::param("rate", "must be finite and nonnegative"));
    }
    if rate > 0.0 && atoms.is_empty() {
        return Err(Error::param("atoms", "positive rate needs at least one atom"));
    }
    if atoms.iter().any(|a| a.prob.is_nan() || a.prob < 0.0 || !a.size.is_finite()) {
        return Err(Error::param("atoms", "probabilities must be nonnegative"));
    }
    if !atoms.is_empty() {
        let total: f64 = atoms.iter().map(|a| a.prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param("atoms", format!("probabilities sum to {total}, not 1")));
        }
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::param("sigma", "must be finite and nonnegative"))
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Brownian { sigma, .. } => check_sigma(*sigma),
            ModelSpec::CompoundPoisson { rate, atoms, .. } => check_atoms(atoms, *rate),
            ModelSpec::LevyJumpDiffusion {
                sigma, rate, atoms, ..
            } => {
                check_sigma(*sigma)?;
                check_atoms(atoms, *rate)
            }
            ModelSpec::ItoSemimartingale { jumps, .. } => {
                if jumps.iter().any(|j| !j.size.is_finite()) {
                    return Err(Error::param("jumps", "sizes must be finite"));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Brownian { .. } => "brownian",
            ModelSpec::CompoundPoisson { .. } => "compound_poisson",
            ModelSpec::LevyJumpDiffusion { .. } => "levy_jump_diffusion",
            ModelSpec::ItoSemimartingale { .. } => "ito_semimartingale",
        }
    }

    pub fn x0(&self) -> f64 {
        match self {
            ModelSpec::Brownian { x0, .. }
            | ModelSpec::CompoundPoisson { x0, .. }
            | ModelSpec::LevyJumpDiffusion { x0, .. }
            | ModelSpec::ItoSemimartingale { x0, .. } => *x0,
        }
    }

    /// Copy of the model started at `x0`.
    pub fn with_x0(&self, new_x0: f64) -> Self {
        let mut m = self.clone();
        match &mut m {
            ModelSpec::Brownian { x0, .. }
            | ModelSpec::CompoundPoisson { x0, .. }
            | ModelSpec::LevyJumpDiffusion { x0, .. }
            | ModelSpec::ItoSemimartingale { x0, .. } => *x0 = new_x0,
        }
        m
    }

    pub fn dim(&self) -> usize {
        1
    }

    pub fn independent_increments(&self) -> bool {
        !matches!(self, ModelSpec::ItoSemimartingale { .. })
    }

    pub fn finite_variation(&self) -> bool {
        match self {
            ModelSpec::Brownian { sigma, .. } | ModelSpec::LevyJumpDiffusion { sigma, .. } => {
                *sigma == 0.0
            }
            ModelSpec::CompoundPoisson { .. } => true,
            ModelSpec::ItoSemimartingale { delta, .. } => delta.is_zero(),
        }
    }

    /// Lévy process with a nonzero Gaussian component.
    pub fn is_type_c(&self) -> bool {
        match self {
            ModelSpec::Brownian { sigma, .. } | ModelSpec::LevyJumpDiffusion { sigma, .. } => {
                *sigma > 0.0
            }
            _ => false,
        }
    }

    /// True when the drift characteristic is identically zero.
    pub fn is_driftless(&self) -> bool {
        match self {
            ModelSpec::Brownian { drift, .. } | ModelSpec::LevyJumpDiffusion { drift, .. } => {
                *drift == 0.0
            }
            ModelSpec::CompoundPoisson { rate, atoms, .. } => {
                *rate == 0.0 || atoms.iter().map(|a| a.prob * a.size).sum::<f64>() == 0.0
            }
            ModelSpec::ItoSemimartingale { beta, .. } => beta.is_zero(),
        }
    }

    /// Characteristics at index `k`, evaluated on the left-limit stopped path.
    /// Models with independent increments ignore `sp_pre`.
    pub fn characteristics_at(&self, k: usize, sp_pre: &StoppedPath) -> Characteristics {
        let input = if matches!(self, ModelSpec::ItoSemimartingale { .. }) {
            let mut inp = CoefInput::from_stopped(sp_pre);
            inp.t = sp_pre.grid().time(k);
            inp
        } else {
            CoefInput {
                t: 0.0,
                state: 0.0,
                running_mean: 0.0,
            }
        };
        self.characteristics_from(&input)
    }

    fn characteristics_from(&self, input: &CoefInput) -> Characteristics {
        match self {
            ModelSpec::Brownian { drift, sigma, .. } => {
                Characteristics::scalar(*drift, *sigma, vec![])
            }
            ModelSpec::CompoundPoisson { rate, atoms, .. } => {
                let kernel: Vec<(f64, f64)> =
                    atoms.iter().map(|a| (a.size, rate * a.prob)).collect();
                let b = kernel.iter().map(|(x, l)| x * l).sum();
                Characteristics::scalar(b, 0.0, kernel)
            }
            ModelSpec::LevyJumpDiffusion {
                drift,
                sigma,
                rate,
                atoms,
                ..
            } => Characteristics::scalar(
                *drift,
                *sigma,
                atoms.iter().map(|a| (a.size, rate * a.prob)).collect(),
            ),
            ModelSpec::ItoSemimartingale {
                beta, delta, jumps, ..
            } => Characteristics::scalar(
                beta.eval(input),
                delta.eval(input).abs(),
                jumps
                    .iter()
                    .map(|j| (j.size, j.intensity.eval(input).max(0.0)))
                    .collect(),
            ),
        }
    }
}

/// Per-step decomposition of a simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLedger {
    /// `b·dt` on each step.
    pub drift: Vec<f64>,
    /// `σ·√dt·Z` on each step.
    pub diffusive: Vec<f64>,
    /// Sum of jumps on each step.
    pub jumps: Vec<f64>,
    /// Number of jumps on each step.
    pub jump_counts: Vec<u32>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn simulate_inner(model: &ModelSpec, grid: &TimeGrid, rng: &mut ChaCha8Rng) -> (GridPath, StepLedger) {
    let n = grid.n_steps();
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let mut values = Vec::with_capacity(n + 1);
    let mut flags = Vec::with_capacity(n + 1);
    let mut ledger = StepLedger {
        drift: Vec::with_capacity(n),
        diffusive: Vec::with_capacity(n),
        jumps: Vec::with_capacity(n),
        jump_counts: Vec::with_capacity(n),
    };
    values.push(model.x0());
    flags.push(false);
    let constant = model.independent_increments();
    let mut chars = model.characteristics_from(&CoefInput {
        t: 0.0,
        state: model.x0(),
        running_mean: model.x0(),
    });
    let mut sum = 0.0;
    for k in 0..n {
        let x = values[k];
        let left = if flags[k] { values[k - 1] } else { x };
        if !constant {
            let running_mean = if k == 0 { left } else { sum / k as f64 };
            chars = model.characteristics_from(&CoefInput {
                t: grid.time(k),
                state: left,
                running_mean,
            });
        }
        sum += x;
        let b = chars.b[0];
        let sigma = chars.c[(0, 0)].sqrt();
        let comp: f64 = chars.kernel.iter().map(|a| a.intensity * a.size[0]).sum();
        let z: f64 = rng.sample(StandardNormal);
        let mut jump = 0.0;
        let mut count = 0u32;
        for atom in &chars.kernel {
            let mean = atom.intensity * dt;
            if mean > 0.0 {
                let nj: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
                if nj > 0.0 {
                    count += nj as u32;
                    jump += nj * atom.size[0];
                }
            }
        }
        let drift = (b - comp) * dt;
        let diff = sigma * sdt * z;
        values.push(x + drift + diff + jump);
        flags.push(count > 0);
        ledger.drift.push(b * dt);
        ledger.diffusive.push(diff);
        ledger.jumps.push(jump);
        ledger.jump_counts.push(count);
    }
    let path = GridPath::new(*grid, 1, values, flags).expect("simulator shape");
    (path, ledger)
}

/// One path (stream 0 of `seed`).
pub fn simulate(model: &ModelSpec, grid: &TimeGrid, seed: u64) -> GridPath {
    simulate_stream(model, grid, seed, 0)
}

/// Path number `stream` of the batch rooted at `seed`.
pub fn simulate_stream(model: &ModelSpec, grid: &TimeGrid, seed: u64, stream: u64) -> GridPath {
    simulate_inner(model, grid, &mut rng_for(seed, stream)).0
}

/// Path plus its per-step drift/diffusion/jump decomposition.
pub fn simulate_with_ledger(
    model: &ModelSpec,
    grid: &TimeGrid,
    seed: u64,
    stream: u64,
) -> (GridPath, StepLedger) {
    simulate_inner(model, grid, &mut rng_for(seed, stream))
}

/// `n` paths on streams `0..n`, simulated in parallel.
pub fn simulate_batch(model: &ModelSpec, grid: &TimeGrid, n: usize, seed: u64) -> Vec<GridPath> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_stream(model, grid, seed, i))
        .collect()
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimate of `E[[M]_T^{1/2} + ∫|dB|]` with its standard error.
pub fn h1_norm_estimate(model: &ModelSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> (f64, f64) {
    let samples: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let (_, l) = simulate_with_ledger(model, grid, seed, i);
            let qv: f64 = l.diffusive.iter().map(|x| x * x).sum::<f64>()
                + l.jumps.iter().map(|x| x * x).sum::<f64>();
            let var: f64 = l.drift.iter().map(|x| x.abs()).sum();
            qv.sqrt() + var
        })
        .collect();
    mean_se(&samples)
}
