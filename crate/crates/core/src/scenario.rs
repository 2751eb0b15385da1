//! Scenario files: a flat TOML schema with one section per parameter group.
//! Physical units in the file, nondimensional units everywhere else.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cr3bp::{Mat6, State6, SystemConstants, Vec6};
use crate::error::{Error, Result};
use crate::montecarlo::{MonteCarloConfig, Propagation};
use crate::steering::{MeasurementModel, NormMode, ObjectiveKind, SteeringConfig};
use crate::integrate::Tolerances;

/// The scenario shipped with the crate.
pub const DEFAULT_SCENARIO: &str = include_str!("../scenarios/l2_halo.toml");

pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_SEED: u64 = 20240917;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ObjectiveSelection {
    #[serde(rename = "min-nl")]
    MinNl,
    #[serde(rename = "min-cov")]
    MinCov,
    #[default]
    #[serde(rename = "both")]
    Both,
}

impl ObjectiveSelection {
    pub fn kinds(&self) -> Vec<ObjectiveKind> {
        match self {
            Self::MinNl => vec![ObjectiveKind::MinNonlinearity],
            Self::MinCov => vec![ObjectiveKind::MinCovariance],
            Self::Both => vec![ObjectiveKind::MinNonlinearity, ObjectiveKind::MinCovariance],
        }
    }
}

impl fmt::Display for ObjectiveSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MinNl => "min-nl",
            Self::MinCov => "min-cov",
            Self::Both => "both",
        })
    }
}

impl FromStr for ObjectiveSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min-nl" => Ok(Self::MinNl),
            "min-cov" => Ok(Self::MinCov),
            "both" => Ok(Self::Both),
            other => Err(Error::Validation {
                field: "run.objective".into(),
                message: format!("unknown objective '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub mu: f64,
    pub length_unit_km: f64,
    pub time_unit_s: f64,
}

fn default_period_guess() -> f64 {
    3.26895
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSection {
    pub initial_mean: [f64; 6],
    #[serde(default = "default_period_guess")]
    pub period_guess: f64,
    pub segments_per_rev: usize,
    pub revs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersionSection {
    pub position_3sigma_km: f64,
    pub velocity_3sigma_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub u_max_mps: f64,
    pub eps_x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub position_3sigma_km: f64,
    pub velocity_3sigma_mps: f64,
    pub measurement_position_m: f64,
    pub measurement_velocity_cmps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    pub m_star: usize,
    pub lambda: f64,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub objective: ObjectiveSelection,
    #[serde(default)]
    pub norm_mode: NormMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            objective: ObjectiveSelection::default(),
            norm_mode: NormMode::default(),
            seed: DEFAULT_SEED,
            n_samples: DEFAULT_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub system: SystemSection,
    pub orbit: OrbitSection,
    pub dispersion: DispersionSection,
    pub constraints: ConstraintSection,
    pub filter: FilterSection,
    pub tuning: TuningSection,
    #[serde(default)]
    pub run: RunSection,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.into(),
        message: message.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

impl Scenario {
    /// The shipped Earth-Moon L2 halo scenario.
    pub fn l2_halo() -> Self {
        Self::parse(DEFAULT_SCENARIO).expect("shipped scenario is valid")
    }

    /// Parses and validates scenario text.
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        SystemConstants::new(self.system.mu, self.system.length_unit_km, self.system.time_unit_s)
            .map_err(|e| invalid("system", e.to_string()))?;
        if !self.orbit.initial_mean.iter().all(|v| v.is_finite()) {
            return Err(invalid("orbit.initial_mean", "entries must be finite"));
        }
        positive("orbit.period_guess", self.orbit.period_guess)?;
        if self.orbit.segments_per_rev < 1 {
            return Err(invalid("orbit.segments_per_rev", "must be at least 1"));
        }
        if self.orbit.revs < 1 {
            return Err(invalid("orbit.revs", "must be at least 1"));
        }
        positive("dispersion.position_3sigma_km", self.dispersion.position_3sigma_km)?;
        positive("dispersion.velocity_3sigma_mps", self.dispersion.velocity_3sigma_mps)?;
        positive("filter.position_3sigma_km", self.filter.position_3sigma_km)?;
        positive("filter.velocity_3sigma_mps", self.filter.velocity_3sigma_mps)?;
        positive("filter.measurement_position_m", self.filter.measurement_position_m)?;
        positive("filter.measurement_velocity_cmps", self.filter.measurement_velocity_cmps)?;
        if !(self.constraints.u_max_mps >= 0.0 && self.constraints.u_max_mps.is_finite()) {
            return Err(invalid("constraints.u_max_mps", "must be finite and nonnegative"));
        }
        if !(self.constraints.eps_x > 0.0 && self.constraints.eps_x < 1.0) {
            return Err(invalid("constraints.eps_x", format!("must lie in (0, 1), got {}", self.constraints.eps_x)));
        }
        if !(0.0..=1.0).contains(&self.tuning.lambda) {
            return Err(invalid("tuning.lambda", format!("must lie in [0, 1], got {}", self.tuning.lambda)));
        }
        if self.tuning.m_star != 2 {
            return Err(invalid("tuning.m_star", format!("only 2 is supported, got {}", self.tuning.m_star)));
        }
        Ok(())
    }

    pub fn constants(&self) -> SystemConstants {
        SystemConstants::new(self.system.mu, self.system.length_unit_km, self.system.time_unit_s).expect("validated")
    }

    pub fn initial_guess(&self) -> State6 {
        State6::from_slice(&self.orbit.initial_mean)
    }

    fn diag(&self, km: f64, mps: f64) -> Mat6 {
        let c = self.constants();
        let mut m = Mat6::zeros();
        for i in 0..3 {
            m[(i, i)] = c.km_to_nd(km).powi(2);
            m[(i + 3, i + 3)] = c.mps_to_nd(mps).powi(2);
        }
        m
    }

    /// Estimated-state covariance at the initial time.
    pub fn p_hat0(&self) -> Mat6 {
        self.diag(self.dispersion.position_3sigma_km / 3.0, self.dispersion.velocity_3sigma_mps / 3.0)
    }

    /// Estimation-error covariance before the first measurement.
    pub fn p_tilde0(&self) -> Mat6 {
        self.diag(self.filter.position_3sigma_km / 3.0, self.filter.velocity_3sigma_mps / 3.0)
    }

    pub fn measurement_model(&self) -> MeasurementModel {
        let c = self.constants();
        MeasurementModel::full_state(
            c.km_to_nd(self.filter.measurement_position_m * 1e-3),
            c.mps_to_nd(self.filter.measurement_velocity_cmps * 1e-2),
        )
    }

    /// Steering data in deviation coordinates: the corrected orbit is the
    /// reference, so the initial and target mean deviations are zero.
    pub fn steering_config(&self) -> SteeringConfig {
        SteeringConfig {
            u_max: self.constants().mps_to_nd(self.constraints.u_max_mps),
            eps_x: self.constraints.eps_x,
            lambda: self.tuning.lambda,
            norm_mode: self.run.norm_mode,
            mean0: Vec6::zeros(),
            target: Vec6::zeros(),
        }
    }

    pub fn monte_carlo_config(&self) -> MonteCarloConfig {
        MonteCarloConfig {
            n_samples: self.run.n_samples,
            seed: self.run.seed,
            eps_x: self.constraints.eps_x,
            p_hat0: self.p_hat0(),
            mean0: Vec6::zeros(),
            propagation: Propagation::Nonlinear(Tolerances::default()),
        }
    }

    /// Fields that determine the reference orbit, the linearizations and the
    /// g coefficients (the cache key input).
    pub fn dynamics_fingerprint(&self) -> String {
        let key = (
            &self.system,
            &self.orbit,
            self.tuning.m_star,
            Tolerances::default(),
            crate::tensors::NormConfig::default(),
            CACHE_FORMAT,
        );
        serde_json::to_string(&key).expect("plain data serializes")
    }
}

/// Bumped whenever a cached artifact changes shape or meaning.
pub const CACHE_FORMAT: u32 = 1;

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    Scenario::parse(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_scenario_has_table_values() {
        let s = Scenario::l2_halo();
        assert_eq!(s.orbit.initial_mean, [1.13, 0.0, -0.1767, 0.0, -0.2255, 0.0]);
        assert_eq!((s.dispersion.position_3sigma_km, s.dispersion.velocity_3sigma_mps), (30.0, 3.0));
        assert_eq!(s.constraints.u_max_mps, 20.0);
        assert_eq!(s.constraints.eps_x, 1e-3);
        assert_eq!((s.filter.measurement_position_m, s.filter.measurement_velocity_cmps), (1.0, 10.0));
        assert_eq!((s.tuning.lambda, s.tuning.m_star), (0.52, 2));
        assert_eq!((s.orbit.segments_per_rev, s.orbit.revs), (9, 2));
        let c = s.constants();
        assert!((c.nd_to_km(s.p_hat0()[(0, 0)].sqrt()) - 10.0).abs() < 1e-9);
        assert!((c.nd_to_mps(s.p_tilde0()[(4, 4)].sqrt()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_lambda_names_the_field() {
        let text = DEFAULT_SCENARIO.replace("lambda = 0.52", "lambda = 1.5");
        match Scenario::parse(&text) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "tuning.lambda"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn omitted_sample_count_defaults() {
        let text = DEFAULT_SCENARIO.replace("n_samples = 1000\n", "");
        assert_eq!(Scenario::parse(&text).unwrap().run.n_samples, 1000);
    }

    #[test]
    fn parse_errors_carry_location() {
        let text = DEFAULT_SCENARIO.replace("revs = 2", "revs = two");
        let msg = Scenario::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("revs") && msg.contains("line"), "{msg}");
        let text = DEFAULT_SCENARIO.replace("revs = 2", "revs = 2\nrevz = 3");
        assert!(Scenario::parse(&text).unwrap_err().to_string().contains("revz"));
    }

    #[test]
    fn fingerprint_tracks_dynamics_fields_only() {
        let base = Scenario::l2_halo();
        let mut s = base;
        s.run.seed += 1;
        s.tuning.lambda = 0.3;
        s.constraints.u_max_mps = 5.0;
        assert_eq!(base.dynamics_fingerprint(), s.dynamics_fingerprint());
        let mut s = base;
        s.orbit.segments_per_rev = 8;
        assert_ne!(base.dynamics_fingerprint(), s.dynamics_fingerprint());
        let mut s = base;
        s.system.mu += 1e-12;
        assert_ne!(base.dynamics_fingerprint(), s.dynamics_fingerprint());
    }
}
