//! Experiment configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use funcito::backwards::{KbeTolerance, QvSource};
use funcito::calculus::{DerivativeConfig, VerticalProperty};
use funcito::comparison::{Budgets, Theorem, Tolerances};
use funcito::functionals::FunctionalSpec;
use funcito::models::ModelSpec;
use funcito::pathspace::TimeGrid;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub grid: GridConfig,
    #[serde(default)]
    pub models: BTreeMap<String, ModelSpec>,
    #[serde(default)]
    pub functionals: BTreeMap<String, FunctionalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_ito: Option<CheckItoConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_kbe: Option<CheckKbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: String,
    pub n_paths: usize,
    /// Paths written as CSV; the manifest summarizes all `n_paths`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub write_paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckItoConfig {
    pub functional: String,
    pub model: String,
    pub ladder: Vec<usize>,
    pub n_paths: usize,
    #[serde(default)]
    pub qv: QvSource,
    #[serde(default = "default_min_order")]
    pub min_order: f64,
    #[serde(default)]
    pub derivatives: DerivativeConfig,
}

fn default_min_order() -> f64 {
    0.8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuationKind {
    /// Monte Carlo valuation with common random numbers.
    #[default]
    Estimated,
    /// Closed form for the Asian square payoff under Brownian motion.
    ClosedForm,
    /// The functional itself.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckKbeConfig {
    pub functional: String,
    /// Model defining the valuation.
    pub model: String,
    /// Model supplying paths and characteristics; defaults to `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub characteristics: Option<String>,
    #[serde(default)]
    pub valuation: ValuationKind,
    #[serde(default = "default_m_valuation")]
    pub m_valuation: usize,
    pub n_paths: usize,
    pub n_time_probes: usize,
    /// Negative control: the command succeeds when the gate fails.
    #[serde(default)]
    pub expect_fail: bool,
    #[serde(default)]
    pub tolerance: KbeTolerance,
    #[serde(default)]
    pub derivatives: DerivativeConfig,
}

fn default_m_valuation() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub model_x: String,
    pub model_y: String,
    pub payoff: String,
    pub theorem: Theorem,
    #[serde(default)]
    pub reversed: bool,
    pub budgets: Budgets,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub derivatives: DerivativeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub functional: String,
    /// Model whose paths carry the probe points.
    pub model: String,
    pub n_paths: usize,
    #[serde(default)]
    pub properties: Vec<VerticalProperty>,
    /// Probe `G_f` over `model` with this many continuations instead of the
    /// functional itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_valuation: Option<usize>,
    #[serde(default = "default_bump")]
    pub bump: f64,
    #[serde(default = "default_property_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub derivatives: DerivativeConfig,
}

fn default_bump() -> f64 {
    0.05
}

fn default_property_tol() -> f64 {
    1e-9
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!("`{name}` must be positive");
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        Ok(TimeGrid::new(self.grid.horizon, self.grid.n_steps)?)
    }

    pub fn model(&self, name: &str) -> Result<&ModelSpec> {
        self.models.get(name).with_context(|| format!("unknown model `{name}`"))
    }

    pub fn functional(&self, name: &str) -> Result<&FunctionalSpec> {
        self.functionals
            .get(name)
            .with_context(|| format!("unknown functional `{name}`"))
    }

    /// Names resolve, budgets and tolerances are positive.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        let grid = self.grid()?;
        for (name, m) in &self.models {
            m.validate().with_context(|| format!("model `{name}`"))?;
        }
        for (name, f) in &self.functionals {
            f.validate(&grid).with_context(|| format!("functional `{name}`"))?;
        }
        if let Some(s) = &self.simulate {
            self.model(&s.model)?;
            positive("simulate.n_paths", s.n_paths)?;
        }
        if let Some(c) = &self.check_ito {
            self.model(&c.model)?;
            self.functional(&c.functional)?;
            positive("check_ito.n_paths", c.n_paths)?;
            if c.ladder.len() < 2 || c.ladder.contains(&0) {
                bail!("`check_ito.ladder` needs at least two positive grid sizes");
            }
            c.derivatives.validate()?;
        }
        if let Some(c) = &self.check_kbe {
            self.model(&c.model)?;
            if let Some(m) = &c.characteristics {
                self.model(m)?;
            }
            self.functional(&c.functional)?;
            positive("check_kbe.m_valuation", c.m_valuation)?;
            positive("check_kbe.n_paths", c.n_paths)?;
            positive("check_kbe.n_time_probes", c.n_time_probes)?;
            let t = &c.tolerance;
            if !(t.c_mc >= 0.0 && t.c_disc >= 0.0 && t.pass_rate > 0.0 && t.pass_rate <= 1.0) {
                bail!("`check_kbe.tolerance` constants must be nonnegative and the pass rate in (0, 1]");
            }
            c.derivatives.validate()?;
        }
        if let Some(c) = &self.compare {
            self.model(&c.model_x)?;
            self.model(&c.model_y)?;
            self.functional(&c.payoff)?;
            c.budgets.validate()?;
            let t = &c.tolerances;
            if !(t.slack >= 0.0 && t.property >= 0.0 && t.property_bump > 0.0 && t.band > 0.0) {
                bail!("`compare.tolerances` must be nonnegative and the band positive");
            }
            c.derivatives.validate()?;
        }
        if let Some(p) = &self.probe {
            self.model(&p.model)?;
            self.functional(&p.functional)?;
            positive("probe.n_paths", p.n_paths)?;
            if let Some(m) = p.m_valuation {
                positive("probe.m_valuation", m)?;
            }
            if !(p.bump > 0.0 && p.tolerance >= 0.0) {
                bail!("`probe.bump` must be positive and `probe.tolerance` nonnegative");
            }
            p.derivatives.validate()?;
        }
        Ok(())
    }
}
