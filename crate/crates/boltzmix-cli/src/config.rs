//! Run configuration: TOML text, defaults, validation and dotted-path edits.

use std::path::{Path, PathBuf};

use boltzmix::collision::{CollisionOperator, CollisionSettings, Interpolation, Pruning};
use boltzmix::model::{AngularProfile, KernelSpec, Species, WeightSpec};
use boltzmix::quadrature::{make_sphere_rule, VelocityGrid};
use boltzmix::solver::{Scenario, Scheme, StepConfig, TorusConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

const TWO_SPECIES_RELAX: &str = include_str!("../presets/two_species_relax.toml");
const LARGE_AMPLITUDE: &str = include_str!("../presets/large_amplitude.toml");

/// Names of the presets shipped with the binary.
pub const PRESETS: [&str; 2] = ["two_species_relax", "large_amplitude"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    pub mass: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CollisionConstant {
    Uniform(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngularChoice {
    AbsCos,
    CosSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub gamma: f64,
    pub c_phi: CollisionConstant,
    pub angular: AngularChoice,
    pub c_b: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            c_phi: CollisionConstant::Uniform(1.0),
            angular: AngularChoice::AbsCos,
            c_b: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub half_width: f64,
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            half_width: 6.0,
            points: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SphereConfig {
    pub n_polar: usize,
    pub n_azimuth: usize,
}

impl Default for SphereConfig {
    fn default() -> Self {
        Self {
            n_polar: 4,
            n_azimuth: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub q: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self { q: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationChoice {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningChoice {
    None,
    Partner,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionConfig {
    pub interpolation: InterpolationChoice,
    pub pruning: PruningChoice,
    pub cutoff: f64,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        Self {
            interpolation: InterpolationChoice::Quadratic,
            pruning: PruningChoice::Pair,
            cutoff: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    SemiImplicitLoss,
    ExplicitEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSection {
    /// Omitted: 0.2 / max nu.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub scheme: SchemeChoice,
    pub conservation_fix: bool,
}

impl Default for StepSection {
    fn default() -> Self {
        Self {
            dt: None,
            scheme: SchemeChoice::SemiImplicitLoss,
            conservation_fix: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Equilibrium,
    TwoSpeciesRelax,
    LargeAmplitude,
    BiMaxwellian,
    RandomSmooth,
    StandingWave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shell_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shell_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<f64>,
    /// Present: run on a 1D torus with this many cells.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub torus_cells: Option<usize>,
    pub transport_only: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: ScenarioName::TwoSpeciesRelax,
            amplitude: None,
            shell_radius: None,
            shell_width: None,
            drift: None,
            torus_cells: None,
            transport_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub t_end: f64,
    pub sample_every: usize,
    pub output: PathBuf,
    pub workers: usize,
    pub seed: u64,
    /// Time window of the decay-rate fit; defaults to the last three quarters.
    pub fit_window: Option<[f64; 2]>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            sample_every: 1,
            output: PathBuf::from("out"),
            workers: 1,
            seed: 0,
            fit_window: None,
        }
    }
}

fn default_species() -> Vec<SpeciesConfig> {
    vec![
        SpeciesConfig { mass: 1.0, density: 1.0 },
        SpeciesConfig { mass: 2.0, density: 0.5 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_species")]
    pub species: Vec<SpeciesConfig>,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub sphere: SphereConfig,
    #[serde(default)]
    pub weight: WeightConfig,
    #[serde(default)]
    pub collision: CollisionConfig,
    #[serde(default)]
    pub step: StepSection,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            species: default_species(),
            kernel: KernelConfig::default(),
            grid: GridConfig::default(),
            sphere: SphereConfig::default(),
            weight: WeightConfig::default(),
            collision: CollisionConfig::default(),
            step: StepSection::default(),
            scenario: ScenarioConfig::default(),
            run: RunSection::default(),
        }
    }
}

fn invalid(key: &str, message: impl ToString) -> CliError {
    CliError::Invalid {
        key: key.to_string(),
        message: message.to_string(),
    }
}

/// Everything a run needs, built from a validated config.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub species: Vec<Species>,
    pub kernel: KernelSpec,
    pub grid: VelocityGrid,
    pub weight: WeightSpec,
    pub settings: CollisionSettings,
    pub scenario: Scenario,
    pub torus: Option<TorusConfig>,
}

impl Resolved {
    pub fn operator(&self, config: &RunConfig) -> Result<CollisionOperator, CliError> {
        let rule = make_sphere_rule(config.sphere.n_polar, config.sphere.n_azimuth)
            .map_err(|e| invalid("sphere", e))?;
        CollisionOperator::new(self.species.clone(), self.kernel.clone(), self.grid.clone(), rule, self.settings)
            .map_err(|e| invalid("grid", e))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "two_species_relax" => Self::from_toml(TWO_SPECIES_RELAX),
            "large_amplitude" => Self::from_toml(LARGE_AMPLITUDE),
            other => Err(CliError::UnknownPreset(other.to_string())),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section and builds the library objects; errors name the key.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        if self.species.is_empty() {
            return Err(invalid("species", "at least one species is required"));
        }
        let species = self
            .species
            .iter()
            .enumerate()
            .map(|(k, s)| Species::new(s.mass, s.density).map_err(|e| invalid(&format!("species.{k}"), e)))
            .collect::<Result<Vec<_>, _>>()?;
        let n = species.len();
        let c_phi = match &self.kernel.c_phi {
            CollisionConstant::Uniform(c) => vec![vec![*c; n]; n],
            CollisionConstant::Matrix(m) => m.clone(),
        };
        let angular = match self.kernel.angular {
            AngularChoice::AbsCos => AngularProfile::AbsCos,
            AngularChoice::CosSquared => AngularProfile::CosSquared,
        };
        let kernel = KernelSpec::new(self.kernel.gamma, c_phi, angular, self.kernel.c_b).map_err(|e| invalid("kernel", e))?;
        let grid = VelocityGrid::new(self.grid.half_width, self.grid.points).map_err(|e| invalid("grid", e))?;
        make_sphere_rule(self.sphere.n_polar, self.sphere.n_azimuth).map_err(|e| invalid("sphere", e))?;
        let weight = WeightSpec::new(self.weight.q).map_err(|e| invalid("weight.q", e))?;
        if !(self.collision.cutoff > 0.0) {
            return Err(invalid("collision.cutoff", "must be positive"));
        }
        let pruning = match self.collision.pruning {
            PruningChoice::None => Pruning::None,
            PruningChoice::Partner => Pruning::Partner(self.collision.cutoff),
            PruningChoice::Pair => Pruning::Pair(self.collision.cutoff),
        };
        let settings = CollisionSettings {
            interpolation: match self.collision.interpolation {
                InterpolationChoice::Linear => Interpolation::Linear,
                InterpolationChoice::Quadratic => Interpolation::Quadratic,
            },
            pruning,
            weak_pruning: pruning,
        };
        if let Some(dt) = self.step.dt {
            StepConfig::new(dt).map_err(|e| invalid("step.dt", e))?;
        }
        let sc = &self.scenario;
        let amplitude = |default: f64| sc.amplitude.unwrap_or(default);
        let scenario = match sc.name {
            ScenarioName::Equilibrium => Scenario::Equilibrium,
            ScenarioName::TwoSpeciesRelax => Scenario::TwoSpeciesRelax { amplitude: amplitude(0.1) },
            ScenarioName::LargeAmplitude => Scenario::LargeAmplitude {
                amplitude: amplitude(0.9),
                shell_radius: sc.shell_radius.unwrap_or(4.0),
                shell_width: sc.shell_width.unwrap_or(0.5),
            },
            ScenarioName::BiMaxwellian => Scenario::BiMaxwellian { drift: sc.drift.unwrap_or(0.5) },
            ScenarioName::RandomSmooth => Scenario::RandomSmooth { amplitude: amplitude(0.5) },
            ScenarioName::StandingWave => Scenario::Equilibrium,
        };
        let torus = match (sc.torus_cells, sc.name) {
            (Some(c), _) => {
                let mut t = TorusConfig::new(c).map_err(|e| invalid("scenario.torus_cells", e))?;
                t.transport_only = sc.transport_only;
                Some(t)
            }
            (None, ScenarioName::StandingWave) => {
                return Err(invalid("scenario.torus_cells", "standing_wave needs a torus"));
            }
            (None, _) => None,
        };
        if sc.name == ScenarioName::StandingWave && !(amplitude(0.2).abs() < 1.0) {
            return Err(invalid("scenario.amplitude", "must lie in (-1, 1)"));
        }
        if !(self.run.t_end.is_finite() && self.run.t_end >= 0.0) {
            return Err(invalid("run.t_end", "must be finite and nonnegative"));
        }
        if self.run.sample_every == 0 {
            return Err(invalid("run.sample_every", "must be at least 1"));
        }
        if let Some([a, b]) = self.run.fit_window {
            if !(a >= 0.0 && b > a) {
                return Err(invalid("run.fit_window", "needs 0 <= start < end"));
            }
        }
        if self.run.workers == 0 {
            return Err(invalid("run.workers", "must be at least 1"));
        }
        Ok(Resolved {
            species,
            kernel,
            grid,
            weight,
            settings,
            scenario,
            torus,
        })
    }

    pub fn fit_window(&self) -> (f64, f64) {
        match self.run.fit_window {
            Some([a, b]) => (a, b),
            None => (0.25 * self.run.t_end, self.run.t_end),
        }
    }

    pub fn step_config(&self, nu_max: f64) -> Result<StepConfig, CliError> {
        let dt = self.step.dt.unwrap_or(0.2 / nu_max);
        let mut cfg = StepConfig::new(dt).map_err(|e| invalid("step.dt", e))?;
        cfg.scheme = match self.step.scheme {
            SchemeChoice::SemiImplicitLoss => Scheme::SemiImplicitLoss,
            SchemeChoice::ExplicitEuler => Scheme::ExplicitEuler,
        };
        cfg.conservation_fix = self.step.conservation_fix;
        Ok(cfg)
    }

    /// Returns a copy with the value at a dotted path replaced. `mass_ratio`
    /// sets the second species mass to value times the first.
    pub fn with_parameter(&self, path: &str, value: f64) -> Result<Self, CliError> {
        if path == "mass_ratio" {
            if self.species.len() < 2 {
                return Err(CliError::UnknownParameter(path.to_string()));
            }
            let mut out = self.clone();
            out.species[1].mass = value * out.species[0].mass;
            return Ok(out);
        }
        let mut tree = toml::Value::try_from(self).expect("config serializes");
        let mut slot = &mut tree;
        for part in path.split('.') {
            slot = match slot {
                toml::Value::Table(t) => t.get_mut(part),
                toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|k| a.get_mut(k)),
                _ => None,
            }
            .ok_or_else(|| CliError::UnknownParameter(path.to_string()))?;
        }
        *slot = match slot {
            toml::Value::Integer(_) => {
                if value.fract() != 0.0 {
                    return Err(invalid(path, format!("expects an integer, got {value}")));
                }
                toml::Value::Integer(value as i64)
            }
            toml::Value::Float(_) => toml::Value::Float(value),
            _ => return Err(CliError::UnknownParameter(path.to_string())),
        };
        let text = toml::to_string(&tree).expect("edited config serializes");
        Self::from_toml(&text)
    }
}
