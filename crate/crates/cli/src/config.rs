//! JSON experiment configuration. Every section except `model` has defaults;
//! unknown fields are rejected.

use serde::{Deserialize, Serialize};
use vfp_core::experiments::SeriesSettings;
use vfp_core::gaussian::GaussianState;
use vfp_core::particles::{ContractionSettings, Integrator, SimConfig};
use vfp_core::pde::{FixedPointOptions, GridConfig};
use vfp_core::{builtin_kernel, Error, KernelSpec, ModelParams, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub oracle: OracleSection,
    /// Output path prefix; `--out` takes precedence.
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub gamma: f64,
    pub lambda: f64,
    pub kernel: KernelSpec,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub dt: f64,
    pub seed: u64,
    pub integrator: Integrator,
    /// Number of particles.
    pub n: usize,
    pub horizon: f64,
    pub replicas: usize,
    pub sample_every: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let c = ContractionSettings::default();
        let s = SimConfig::default();
        Self {
            dt: s.dt,
            seed: s.seed,
            integrator: s.integrator,
            n: c.n,
            horizon: c.horizon,
            replicas: c.replicas,
            sample_every: c.sample_every,
        }
    }
}

/// Gaussian initial datum `N(mean, cov)` in phase space.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl GaussianSpec {
    pub fn diagonal(mx: f64, mv: f64, sxx: f64, svv: f64) -> Self {
        Self { mean: [mx, mv], cov: [[sxx, 0.0], [0.0, svv]] }
    }

    pub fn state(&self) -> Result<GaussianState> {
        if self.cov[0][1] != self.cov[1][0] {
            return Err(Error::Config(format!("covariance {:?} is not symmetric", self.cov)));
        }
        GaussianState::new(
            nalgebra::Vector2::new(self.mean[0], self.mean[1]),
            nalgebra::Matrix2::new(self.cov[0][0], self.cov[0][1], self.cov[1][0], self.cov[1][1]),
        )
        .map_err(|e| Error::Config(format!("invalid Gaussian {self:?}: {e}")))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub horizon: f64,
    pub output_every: f64,
    /// Samples per cloud for the `w2_to_stationary` column; `0` writes `nan`.
    pub w2_samples: usize,
    pub initial: GaussianSpec,
    /// Also scan Gaussian initial data for an increasing classical free energy.
    pub witness_search: bool,
    pub max_candidates: usize,
    pub fixed_point: FixedPointOptions,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            output_every: 0.5,
            w2_samples: 0,
            initial: GaussianSpec::diagonal(1.0, 0.0, 1.0, 1.0),
            witness_search: false,
            max_candidates: usize::MAX,
            fixed_point: FixedPointOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// States for the free-energy tables.
    pub states: Vec<GaussianSpec>,
    /// Pairs for the Bures distance table.
    pub pairs: Vec<[GaussianSpec; 2]>,
    /// Particle numbers for the particle-limit table.
    pub particle_numbers: Vec<usize>,
}

impl Default for OracleSection {
    fn default() -> Self {
        let a = GaussianSpec::diagonal(0.5, -0.3, 0.8, 1.4);
        let b = GaussianSpec::diagonal(-1.0, 0.4, 0.3, 0.7);
        Self {
            states: vec![a, b],
            pairs: vec![
                [a, a],
                [a, GaussianSpec::diagonal(1.5, 0.7, 0.8, 1.4)],
                [GaussianSpec::diagonal(0.0, 0.0, 1.0, 1.0), GaussianSpec::diagonal(0.0, 0.0, 4.0, 1.0)],
                [a, b],
            ],
            particle_numbers: (1..=10).map(|k| 1usize << k).collect(),
        }
    }
}

/// Everything derived from a validated configuration.
pub struct Validated {
    pub params: ModelParams,
    pub sim: SimConfig,
    pub contraction: ContractionSettings,
    pub series: SeriesSettings,
    pub initial: GaussianState,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("cannot parse configuration: {e}")))
    }

    /// Checks every section; nothing is computed before this succeeds.
    pub fn validate(&self) -> Result<Validated> {
        let kernel = builtin_kernel(&self.model.kernel)?;
        let params = ModelParams::new(self.model.gamma, self.model.lambda, kernel)?;
        let s = &self.sim;
        let sim = SimConfig { dt: s.dt, seed: s.seed, integrator: s.integrator };
        sim.validate()?;
        if s.n < 2 || s.replicas == 0 || !(s.horizon > 0.0 && s.horizon.is_finite()) || !(s.sample_every > 0.0) {
            return Err(Error::Config(format!("invalid sim section {s:?}")));
        }
        self.grid.validate()?;
        let e = &self.experiment;
        let series = SeriesSettings { horizon: e.horizon, output_every: e.output_every, w2_samples: e.w2_samples, seed: s.seed };
        series.validate()?;
        let fp = &e.fixed_point;
        if !(fp.damping > 0.0 && fp.damping <= 1.0) || !(fp.tol > 0.0) || fp.max_iter == 0 {
            return Err(Error::Config(format!("invalid fixed-point options {fp:?}")));
        }
        let initial = e.initial.state()?;
        for g in self.oracle.states.iter().chain(self.oracle.pairs.iter().flatten()) {
            g.state()?;
        }
        if self.oracle.particle_numbers.iter().any(|n| *n < 2) {
            return Err(Error::Config("particle_numbers must all be at least 2".into()));
        }
        Ok(Validated {
            params,
            sim,
            contraction: ContractionSettings { n: s.n, horizon: s.horizon, replicas: s.replicas, sample_every: s.sample_every },
            series,
            initial,
        })
    }

    /// Replaces every seed in the configuration.
    pub fn override_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"model": {"gamma": 1.0, "lambda": 0.1, "kernel": {"type": "sine", "amplitude": 1.0}}}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        let v = c.validate().unwrap();
        assert_eq!(c.grid, GridConfig::default());
        assert_eq!(v.contraction, ContractionSettings::default());
        assert_eq!(v.params.kernel.sine_amplitude(), Some(1.0));
    }

    #[test]
    fn invalid_sections_are_rejected() {
        let bad = [
            r#"{"model": {"gamma": -1.0, "lambda": 0.1, "kernel": {"type": "zero"}}}"#,
            r#"{"model": {"gamma": 1.0, "lambda": 0.1, "kernel": {"type": "cosine"}}}"#,
            r#"{"model": {"gamma": 1.0, "lambda": 0.1, "kernel": {"type": "zero"}}, "grid": {"nx": 2}}"#,
            r#"{"model": {"gamma": 1.0, "lambda": 0.1, "kernel": {"type": "zero"}}, "sim": {"n": 1}}"#,
            r#"{"model": {"gamma": 1.0, "lambda": 0.1, "kernel": {"type": "zero"}}, "typo": 1}"#,
            r#"{"model": {"gamma": 1.0, "lambda": 0.1, "kernel": {"type": "zero"}},
                "experiment": {"initial": {"mean": [0, 0], "cov": [[1, 0], [0, -1]]}}}"#,
            r#"{"model": {"gamma": 1.0, "lambda": 0.1, "kernel": {"type": "zero"}}, "experiment": {"output_every": 0}}"#,
        ];
        for text in bad {
            let res = ExperimentConfig::from_json(text).and_then(|c| c.validate().map(|_| ()));
            assert!(matches!(res, Err(Error::Config(_))), "{text} -> {res:?}");
        }
    }
}
