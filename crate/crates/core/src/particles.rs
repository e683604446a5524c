//! N-particle non-equilibrium Langevin system
//!
//! ```text
//! dX_i = V_i dt
//! dV_i = -(X_i + gamma V_i + lambda F_i(X)) dt + sqrt(2 gamma) dB_i
//! F_i(x) = 1/(N-1) sum_{j != i} K'(x_i - x_j)
//! ```
//!
//! and the synchronous coupling of two copies driven by the same noise.
//!
//! Noise comes from one ChaCha stream per particle (stream index = particle
//! index), so trajectories do not depend on how the force loop is scheduled.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{coupling_constants, smallness_holds, CouplingConstants, ModelParams};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Positions and velocities of `N >= 2` particles at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
}

impl ParticleState {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if x.len() != v.len() {
            return Err(Error::Contract(format!("{} positions but {} velocities", x.len(), v.len())));
        }
        if x.len() < 2 {
            return Err(Error::Contract(format!("need at least two particles, got {}", x.len())));
        }
        if x.iter().chain(&v).any(|z| !z.is_finite()) {
            return Err(Error::Contract("particle state has non-finite entries".into()));
        }
        Ok(Self { x, v, t: 0.0 })
    }

    /// `N` independent draws from the product Gaussian with the given means and standard deviations.
    pub fn sample_gaussian(n: usize, mean: [f64; 2], std: [f64; 2], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut x = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let (zx, zv): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            x.push(mean[0] + std[0] * zx);
            v.push(mean[1] + std[1] * zv);
        }
        Self::new(x, v)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn max_abs_v(&self) -> f64 {
        self.v.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Empirical `(mean_x, mean_v, var_x, cov_xv, var_v)`.
    pub fn empirical_moments(&self) -> [f64; 5] {
        let n = self.len() as f64;
        let mx = self.x.iter().sum::<f64>() / n;
        let mv = self.v.iter().sum::<f64>() / n;
        let mut s = [0.0; 3];
        for (x, v) in self.x.iter().zip(&self.v) {
            s[0] += (x - mx) * (x - mx);
            s[1] += (x - mx) * (v - mv);
            s[2] += (v - mv) * (v - mv);
        }
        [mx, mv, s[0] / n, s[1] / n, s[2] / n]
    }

    /// CSV rows `t,i,x_i,v_i`, no header.
    pub fn write_csv_rows<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for (i, (x, v)) in self.x.iter().zip(&self.v).enumerate() {
            writeln!(out, "{:.16e},{},{:.16e},{:.16e}", self.t, i, x, v)?;
        }
        Ok(())
    }
}

/// Two replicas advanced with identical noise.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledPair {
    pub z: ParticleState,
    pub z_tilde: ParticleState,
}

impl CoupledPair {
    pub fn new(z: ParticleState, z_tilde: ParticleState) -> Result<Self> {
        if z.len() != z_tilde.len() || z.t != z_tilde.t {
            return Err(Error::Contract("coupled replicas need the same N and clock".into()));
        }
        Ok(Self { z, z_tilde })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    EulerMaruyama,
    #[default]
    KineticSplitting,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub seed: u64,
    #[serde(default)]
    pub integrator: Integrator,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt: 1e-3, seed: 0, integrator: Integrator::KineticSplitting }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Per-particle standard normal streams.
pub struct NoiseStream {
    rngs: Vec<ChaCha8Rng>,
}

impl NoiseStream {
    pub fn new(seed: u64, n: usize) -> Self {
        let rngs = (0..n as u64)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i);
                rng
            })
            .collect();
        Self { rngs }
    }

    /// Next draw for every particle.
    pub fn fill(&mut self, out: &mut [f64]) {
        assert_eq!(out.len(), self.rngs.len(), "noise buffer length");
        out.par_iter_mut().zip(self.rngs.par_iter_mut()).for_each(|(o, rng)| *o = rng.sample(StandardNormal));
    }
}

/// Seed of replica `r` derived from a base seed.
pub fn replica_seed(seed: u64, replica: u64) -> u64 {
    seed ^ replica.wrapping_add(1).wrapping_mul(GOLDEN)
}

/// `F_i(x) = 1/(N-1) sum_{j != i} K'(x_i - x_j)`.
pub fn pairwise_force(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    pairwise_force_into(params, x, &mut out)?;
    Ok(out)
}

/// [`pairwise_force`] into a caller buffer.
///
/// Quadratic and sine kernels use exact separable forms of the double sum
/// (`O(N)`); every other kernel is summed directly (`O(N^2)`).
pub fn pairwise_force_into(params: &ModelParams, x: &[f64], out: &mut [f64]) -> Result<()> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Contract(format!("pairwise force needs N >= 2, got {n}")));
    }
    assert_eq!(out.len(), n, "force buffer length");
    let scale = 1.0 / (n as f64 - 1.0);
    let kernel = &params.kernel;
    if let Some((a, b)) = kernel.quadratic_coefficients() {
        // sum_{j!=i} 2a(x_i - x_j) + b = 2a(N x_i - S) + (N-1) b
        let total: f64 = x.iter().sum();
        for (o, xi) in out.iter_mut().zip(x) {
            *o = 2.0 * a * (n as f64 * xi - total) * scale + b;
        }
    } else if let Some(c) = kernel.sine_amplitude() {
        // cos(x_i - x_j) = cos x_i cos x_j + sin x_i sin x_j; the j = i term is 1
        let (sin, cos): (Vec<f64>, Vec<f64>) = x.iter().map(|xi| xi.sin_cos()).unzip();
        let s_tot: f64 = sin.iter().sum();
        let c_tot: f64 = cos.iter().sum();
        for i in 0..n {
            out[i] = c * (cos[i] * c_tot + sin[i] * s_tot - 1.0) * scale;
        }
    } else {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let xi = x[i];
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                if j != i {
                    acc += kernel.d1(xi - xj);
                }
            }
            *o = acc * scale;
        });
    }
    Ok(())
}

/// Central finite-difference `|grad F(x) u|` (step `1e-5`) next to the bound `2 sup|K''|`.
pub fn force_jacobian_norm_bound_check(params: &ModelParams, x: &[f64], u: &[f64]) -> Result<(f64, f64)> {
    if u.len() != x.len() {
        return Err(Error::Contract("direction and positions differ in length".into()));
    }
    let norm = u.iter().map(|c| c * c).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("direction must be a unit vector, |u| = {norm}")));
    }
    let h = 1e-5;
    let plus: Vec<f64> = x.iter().zip(u).map(|(x, u)| x + h * u).collect();
    let minus: Vec<f64> = x.iter().zip(u).map(|(x, u)| x - h * u).collect();
    let fp = pairwise_force(params, &plus)?;
    let fm = pairwise_force(params, &minus)?;
    let directional = fp.iter().zip(&fm).map(|(p, m)| ((p - m) / (2.0 * h)).powi(2)).sum::<f64>().sqrt();
    Ok((directional, 2.0 * params.kernel.d2_sup()))
}

/// Scratch space reused across steps.
#[derive(Default)]
pub struct StepBuffers {
    force: Vec<f64>,
}

/// One integrator step in place.
pub fn step(state: &mut ParticleState, params: &ModelParams, cfg: &SimConfig, noise: &[f64]) -> Result<()> {
    step_with(state, params, cfg, noise, &mut StepBuffers::default())
}

pub fn step_with(
    state: &mut ParticleState,
    params: &ModelParams,
    cfg: &SimConfig,
    noise: &[f64],
    buf: &mut StepBuffers,
) -> Result<()> {
    let n = state.len();
    if noise.len() != n {
        return Err(Error::Contract(format!("{} noise draws for {} particles", noise.len(), n)));
    }
    buf.force.resize(n, 0.0);
    let (gamma, lambda, dt) = (params.gamma, params.lambda, cfg.dt);
    match cfg.integrator {
        Integrator::EulerMaruyama => {
            pairwise_force_into(params, &state.x, &mut buf.force)?;
            let sigma = (2.0 * gamma * dt).sqrt();
            for i in 0..n {
                let (x, v) = (state.x[i], state.v[i]);
                state.x[i] = x + v * dt;
                state.v[i] = v - (x + gamma * v + lambda * buf.force[i]) * dt + sigma * noise[i];
            }
        }
        Integrator::KineticSplitting => {
            let damp = (-gamma * dt).exp();
            let impulse = -(-gamma * dt).exp_m1() / gamma;
            let sigma = (-(-2.0 * gamma * dt).exp_m1()).sqrt();
            for (x, v) in state.x.iter_mut().zip(&state.v) {
                *x += 0.5 * dt * v;
            }
            pairwise_force_into(params, &state.x, &mut buf.force)?;
            for i in 0..n {
                let drift = -(state.x[i] + lambda * buf.force[i]);
                state.v[i] = damp * state.v[i] + impulse * drift + sigma * noise[i];
                state.x[i] += 0.5 * dt * state.v[i];
            }
        }
    }
    state.t += dt;
    if state.x.iter().chain(&state.v).any(|z| !z.is_finite()) {
        return Err(Error::Divergence { t: state.t, max_abs_v: state.max_abs_v() });
    }
    Ok(())
}

/// Both replicas advanced with the same noise.
pub fn coupled_step(pair: &mut CoupledPair, params: &ModelParams, cfg: &SimConfig, noise: &[f64]) -> Result<()> {
    let mut buf = StepBuffers::default();
    step_with(&mut pair.z, params, cfg, noise, &mut buf)?;
    step_with(&mut pair.z_tilde, params, cfg, noise, &mut buf)
}

/// `|P|^2 + b|Q|^2` with `P = dx + a dv`, `Q = dv`.
pub fn modified_norm_sq(pair: &CoupledPair, constants: &CouplingConstants) -> f64 {
    let (z, w) = (&pair.z, &pair.z_tilde);
    let mut acc = 0.0;
    for i in 0..z.len() {
        let dx = z.x[i] - w.x[i];
        let dv = z.v[i] - w.v[i];
        let p = dx + constants.a * dv;
        acc += p * p + constants.b * dv * dv;
    }
    acc
}

/// Squared Euclidean distance `|Z - Z~|^2` in phase space.
pub fn euclid_sq(pair: &CoupledPair) -> f64 {
    let (z, w) = (&pair.z, &pair.z_tilde);
    z.x.iter().zip(&w.x).chain(z.v.iter().zip(&w.v)).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionSettings {
    pub n: usize,
    pub horizon: f64,
    pub replicas: usize,
    /// Time between recorded samples.
    pub sample_every: f64,
}

impl Default for ContractionSettings {
    fn default() -> Self {
        Self { n: 64, horizon: 20.0, replicas: 16, sample_every: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplicaTrace {
    pub modified_norm_sq: Vec<f64>,
    pub euclid_sq: Vec<f64>,
    pub fitted_rate_modified: f64,
    pub fitted_rate_euclid: f64,
    /// `max_{s<t} m(t) / (e^{-(a/4)(t-s)} m(s))`.
    pub worst_pathwise_ratio: f64,
    /// `max_t e(t) / (4 e^{-(a/4)t} e(0))`.
    pub worst_euclid_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractionReport {
    pub gamma: f64,
    pub lambda: f64,
    pub a: f64,
    pub b: f64,
    pub dt: f64,
    pub envelope_rate: f64,
    pub times: Vec<f64>,
    /// Replica average of the squared modified norm.
    pub modified_norm_sq: Vec<f64>,
    /// Replica average of the squared Euclidean distance.
    pub euclid_sq: Vec<f64>,
    /// Smallest fitted decay rate of the modified norm over replicas.
    pub fitted_rate: f64,
    pub worst_pathwise_ratio: f64,
    pub worst_euclid_ratio: f64,
    pub pathwise_slack: f64,
    pub euclid_slack: f64,
    pub envelope_ok: bool,
    pub outside_guarantee: bool,
    pub warning: Option<String>,
    pub replicas: Vec<ReplicaTrace>,
}

/// Least-squares decay rate `-d ln y / dt` over samples with `t >= t_from`.
pub fn fit_decay_rate(times: &[f64], values: &[f64], t_from: f64) -> f64 {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, y)| **t >= t_from && **y > 0.0)
        .map(|(t, y)| (*t, y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let (mt, my) = pts.iter().fold((0.0, 0.0), |(a, b), (t, y)| (a + t / n, b + y / n));
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(a, b), (t, y)| (a + (t - mt) * (y - my), b + (t - mt) * (t - mt)));
    -sxy / sxx
}

fn worst_pathwise(times: &[f64], m: &[f64], rate: f64) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..m.len() {
        if m[s] <= 0.0 {
            continue;
        }
        for t in s + 1..m.len() {
            let env = (-rate * (times[t] - times[s])).exp() * m[s];
            worst = worst.max(m[t] / env);
        }
    }
    worst
}

fn run_replica(
    params: &ModelParams,
    cfg: &SimConfig,
    settings: &ContractionSettings,
    constants: &CouplingConstants,
    replica: u64,
    steps_per_sample: usize,
    samples: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let seed = replica_seed(cfg.seed, replica);
    let z = ParticleState::sample_gaussian(settings.n, [0.0, 0.0], [1.0, 1.0], seed)?;
    let z_tilde = ParticleState::sample_gaussian(settings.n, [2.0, -1.0], [1.5, 0.5], seed ^ GOLDEN)?;
    let mut pair = CoupledPair::new(z, z_tilde)?;
    let mut noise = NoiseStream::new(seed, settings.n);
    let mut draws = vec![0.0; settings.n];
    let mut buf = StepBuffers::default();
    let mut mod_sq = Vec::with_capacity(samples + 1);
    let mut eu_sq = Vec::with_capacity(samples + 1);
    mod_sq.push(modified_norm_sq(&pair, constants));
    eu_sq.push(euclid_sq(&pair));
    for _ in 0..samples {
        for _ in 0..steps_per_sample {
            noise.fill(&mut draws);
            step_with(&mut pair.z, params, cfg, &draws, &mut buf)?;
            step_with(&mut pair.z_tilde, params, cfg, &draws, &mut buf)?;
        }
        mod_sq.push(modified_norm_sq(&pair, constants));
        eu_sq.push(euclid_sq(&pair));
    }
    Ok((mod_sq, eu_sq))
}

/// Synchronous-coupling experiment: `replicas` independent coupled pairs,
/// sampled every `sample_every`, compared with the envelopes
/// `e^{-(a/4)t}` (modified norm, pathwise between any two samples) and
/// `4 e^{-(a/4)t}` (Euclidean).
pub fn contraction_experiment(
    params: &ModelParams,
    cfg: &SimConfig,
    settings: &ContractionSettings,
) -> Result<ContractionReport> {
    cfg.validate()?;
    if settings.n < 2 || settings.replicas == 0 || !(settings.horizon > 0.0) || !(settings.sample_every > 0.0) {
        return Err(Error::Config(format!("invalid contraction settings {settings:?}")));
    }
    let constants = coupling_constants(params.gamma);
    let steps_per_sample = ((settings.sample_every / cfg.dt).round() as usize).max(1);
    let samples = ((settings.horizon / (steps_per_sample as f64 * cfg.dt)).round() as usize).max(1);
    let times: Vec<f64> = (0..=samples).map(|k| (k * steps_per_sample) as f64 * cfg.dt).collect();

    let traces: Vec<(Vec<f64>, Vec<f64>)> = (0..settings.replicas as u64)
        .into_par_iter()
        .map(|r| run_replica(params, cfg, settings, &constants, r, steps_per_sample, samples))
        .collect::<Result<_>>()?;

    let rate = constants.squared_norm_rate();
    let horizon = *times.last().unwrap();
    let pathwise_slack = 1.0 + 10.0 * cfg.dt;
    let euclid_slack = 1.05;
    let replicas: Vec<ReplicaTrace> = traces
        .into_iter()
        .map(|(m, e)| {
            let worst_euclid_ratio = e
                .iter()
                .zip(&times)
                .map(|(e_t, t)| if e[0] > 0.0 { e_t / (4.0 * (-rate * t).exp() * e[0]) } else { 0.0 })
                .fold(0.0, f64::max);
            ReplicaTrace {
                fitted_rate_modified: fit_decay_rate(&times, &m, horizon / 4.0),
                fitted_rate_euclid: fit_decay_rate(&times, &e, horizon / 4.0),
                worst_pathwise_ratio: worst_pathwise(&times, &m, rate),
                worst_euclid_ratio,
                modified_norm_sq: m,
                euclid_sq: e,
            }
        })
        .collect();

    let count = replicas.len() as f64;
    let average = |pick: fn(&ReplicaTrace) -> &Vec<f64>| -> Vec<f64> {
        (0..times.len()).map(|k| replicas.iter().map(|r| pick(r)[k]).sum::<f64>() / count).collect()
    };
    let worst_pathwise_ratio = replicas.iter().map(|r| r.worst_pathwise_ratio).fold(0.0, f64::max);
    let worst_euclid_ratio = replicas.iter().map(|r| r.worst_euclid_ratio).fold(0.0, f64::max);
    let outside_guarantee = !smallness_holds(params);
    Ok(ContractionReport {
        gamma: params.gamma,
        lambda: params.lambda,
        a: constants.a,
        b: constants.b,
        dt: cfg.dt,
        envelope_rate: rate,
        modified_norm_sq: average(|r| &r.modified_norm_sq),
        euclid_sq: average(|r| &r.euclid_sq),
        fitted_rate: replicas.iter().map(|r| r.fitted_rate_modified).fold(f64::INFINITY, f64::min),
        envelope_ok: worst_pathwise_ratio <= pathwise_slack && worst_euclid_ratio <= euclid_slack,
        warning: outside_guarantee.then(|| {
            "outside-guarantee: lambda * sup|K''| exceeds min(gamma, 1/gamma)/8; envelopes are not guaranteed".to_string()
        }),
        outside_guarantee,
        worst_pathwise_ratio,
        worst_euclid_ratio,
        pathwise_slack,
        euclid_slack,
        times,
        replicas,
    })
}
