//! Scenario configuration files (TOML).
//!
//! ```toml
//! name = "sinusoidal"
//! seed = 2024
//!
//! [model]
//! preset = "sinusoidal"
//! params = { b0 = 0.3 }
//!
//! [time]
//! t0 = 0.0
//! t1 = 0.5
//! steps = 1000
//! ```
//!
//! Every other section is optional and falls back to the defaults below.

use crate::error::{Error, Result};
use crate::filter::{BackwardSpec, ForwardSpec, OracleSpec, Resampling};
use crate::model::{CoefficientSet, ObservableFn, Preset, PRESET_IDS};
use crate::sde::TimeGrid;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    /// Overrides of the preset's default parameters.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { t0: 0.0, t1: 0.5, steps: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub x: f64,
    pub v: f64,
    pub y: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { x: 0.0, v: 0.5, y: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeConfig {
    pub n_xi: usize,
    pub n_nu: usize,
    /// Half-extent in prior standard deviations.
    pub n_std: f64,
    /// Start-up Gaussian width in cells.
    pub init_width: f64,
    pub backward_n_x: usize,
    pub backward_n_v: usize,
    pub backward_n_y: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self { n_xi: 129, n_nu: 129, n_std: 8.0, init_width: 2.0, backward_n_x: 41, backward_n_v: 41, backward_n_y: 9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleConfig {
    pub ks: usize,
    pub oracle: usize,
    pub batches: usize,
    /// Resample when the effective sample fraction falls below this; 0 disables.
    pub resample_below: f64,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self { ks: 100_000, oracle: 100_000, batches: 20, resample_below: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParametrixConfig {
    pub order: usize,
    pub lags: Vec<f64>,
    /// Evaluation box: nodes per axis and half-width in frozen standard deviations.
    pub box_nodes: usize,
    pub box_half: f64,
    /// Flow lattice: nodes per axis and half-width.
    pub flow_nodes: usize,
    pub flow_half: f64,
    pub steps_per_unit: usize,
    pub save_stride: usize,
}

impl Default for ParametrixConfig {
    fn default() -> Self {
        Self {
            order: 3,
            lags: crate::tolerances::acceptance::SANDWICH_LAGS.to_vec(),
            box_nodes: 15,
            box_half: 2.5,
            flow_nodes: 65,
            flow_half: 6.0,
            steps_per_unit: 1000,
            save_stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<String>,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default = "default_observable")]
    pub observable: ObservableFn,
    #[serde(default)]
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub particles: ParticleConfig,
    #[serde(default)]
    pub parametrix: ParametrixConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_observable() -> ObservableFn {
    ObservableFn::TanhXi
}

fn line_of(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.starts_with(key) && l[key.len()..].trim_start().starts_with('=')
        })
        .map_or(0, |i| i + 1)
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

impl ScenarioConfig {
    /// Default scenario for a preset id.
    pub fn for_preset(preset: &str, seed: u64) -> Result<Self> {
        let cfg = Self {
            name: preset.to_string(),
            seed,
            model: ModelConfig { preset: preset.to_string(), params: BTreeMap::new() },
            time: TimeConfig::default(),
            initial: InitialConfig::default(),
            observable: default_observable(),
            lattice: LatticeConfig::default(),
            particles: ParticleConfig::default(),
            parametrix: ParametrixConfig::default(),
            output: OutputConfig::default(),
        };
        cfg.validate("")?;
        Ok(cfg)
    }

    /// Parses and validates; errors carry the offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(0, |s| line_at(text, s.start)),
            msg: e.message().to_string(),
        })?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical TOML form; hashed into artifact manifests.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self, text: &str) -> Result<()> {
        let err = |key: &str, msg: String| Error::Config { line: line_of(text, key), msg };
        self.coefficients().map_err(|e| err("preset", e.to_string()))?;
        for (k, v) in &self.model.params {
            if !v.is_finite() {
                return Err(err(k, format!("parameter {k} is not finite")));
            }
        }
        if !(self.time.t0 < self.time.t1) {
            return Err(err("t1", format!("need t0 < t1, got {} and {}", self.time.t0, self.time.t1)));
        }
        if self.time.steps == 0 || self.time.steps % 2 != 0 {
            return Err(err("steps", format!("steps must be positive and even, got {}", self.time.steps)));
        }
        for (key, n) in [
            ("n_xi", self.lattice.n_xi),
            ("n_nu", self.lattice.n_nu),
            ("backward_n_x", self.lattice.backward_n_x),
            ("backward_n_v", self.lattice.backward_n_v),
            ("backward_n_y", self.lattice.backward_n_y),
        ] {
            if n < 5 || n % 2 == 0 {
                return Err(err(key, format!("{key} must be odd and at least 5, got {n}")));
            }
        }
        if !(self.lattice.n_std > 0.0) || !(self.lattice.init_width > 0.0) {
            return Err(err("n_std", "lattice extents must be positive".into()));
        }
        if self.particles.ks < 2 {
            return Err(err("ks", "need at least two particles".into()));
        }
        if self.particles.batches < 2 || self.particles.oracle < 2 * self.particles.batches {
            return Err(err("oracle", "need at least two batches of at least two particles".into()));
        }
        if !(0.0..=1.0).contains(&self.particles.resample_below) {
            return Err(err("resample_below", "must lie in [0, 1]".into()));
        }
        let p = &self.parametrix;
        if !(1..=3).contains(&p.order) {
            return Err(err("order", format!("truncation order must be 1, 2 or 3, got {}", p.order)));
        }
        if p.lags.is_empty() || p.lags.iter().any(|l| !(*l > 0.0)) {
            return Err(err("lags", "lags must be positive".into()));
        }
        if p.box_nodes < 4 || p.flow_nodes < 5 || p.steps_per_unit == 0 || p.save_stride == 0 || !(p.box_half > 0.0) || !(p.flow_half > 0.0) {
            return Err(err("parametrix", "parametrix grid sizes must be positive".into()));
        }
        Ok(())
    }

    /// Preset with overrides applied.
    pub fn coefficients(&self) -> Result<CoefficientSet> {
        if !PRESET_IDS.contains(&self.model.preset.as_str()) {
            return Err(crate::error::domain(format!("unknown preset id '{}' (known: {})", self.model.preset, PRESET_IDS.join(", "))));
        }
        let base = CoefficientSet::from_id(&self.model.preset)?;
        let mut table: BTreeMap<String, f64> = base.preset.params().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for (k, v) in &self.model.params {
            match table.get_mut(k) {
                Some(slot) => *slot = *v,
                None => return Err(crate::error::domain(format!("preset '{}' has no parameter '{k}'", self.model.preset))),
            }
        }
        let mut tagged = toml::Table::new();
        tagged.insert("id".into(), toml::Value::String(self.model.preset.clone()));
        for (k, v) in table {
            tagged.insert(k, toml::Value::Float(v));
        }
        let preset: Preset = tagged.try_into().map_err(|e: toml::de::Error| crate::error::domain(e.to_string()))?;
        Ok(CoefficientSet::new(preset))
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.t0, self.time.t1, self.time.steps)
    }

    pub fn start(&self) -> ([f64; 2], f64) {
        ([self.initial.x, self.initial.v], self.initial.y)
    }

    pub fn forward_spec(&self) -> ForwardSpec {
        ForwardSpec { n_eta: self.lattice.n_xi, n_nu: self.lattice.n_nu, n_std: self.lattice.n_std, init_width: self.lattice.init_width, ..Default::default() }
    }

    pub fn backward_spec(&self) -> BackwardSpec {
        BackwardSpec { n_eta: self.lattice.backward_n_x, n_v: self.lattice.backward_n_v, n_y: self.lattice.backward_n_y, n_std: self.lattice.n_std }
    }

    pub fn oracle_spec(&self) -> OracleSpec {
        OracleSpec {
            batches: self.particles.batches,
            resampling: if self.particles.resample_below > 0.0 { Resampling::Stratified(self.particles.resample_below) } else { Resampling::None },
            ..Default::default()
        }
    }
}
