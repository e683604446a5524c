//! Grid-based experiment drivers: Lyapunov functional time series, the search
//! for initial data along which the classical free energy increases, and the
//! decay of the twisted Fisher information.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{
    classical_free_energy, entropy, fisher_information, mean_field_free_energy, w2_grid_with,
};
use crate::gaussian::{free_energy_rates, GaussianState};
use crate::model::{coupling_constants, smallness_holds, ModelParams};
use crate::pde::{stationary_fixed_point, FixedPointOptions, GridConfig, PhaseGrid, VfpSolver};

/// Absolute floor below which Fisher values count as zero in envelope checks.
pub const FISHER_FLOOR: f64 = 1e-9;

/// Relative slack of the Fisher envelopes.
pub const FISHER_SLACK: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesSettings {
    pub horizon: f64,
    /// Time between output rows.
    pub output_every: f64,
    /// Samples per cloud for the distance to the stationary state; `0` skips it.
    #[serde(default)]
    pub w2_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SeriesSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || !(self.output_every > 0.0) {
            return Err(Error::Config(format!("invalid series settings {self:?}")));
        }
        if self.w2_samples > crate::functionals::MAX_W2_SAMPLES {
            return Err(Error::Config(format!(
                "w2_samples must not exceed {}",
                crate::functionals::MAX_W2_SAMPLES
            )));
        }
        Ok(())
    }

    /// Output times `0, dt_out, ...` up to the horizon (the last interval may be shorter).
    pub fn times(&self) -> Vec<f64> {
        let n = (self.horizon / self.output_every - 1e-9).ceil() as usize;
        (0..=n).map(|k| (k as f64 * self.output_every).min(self.horizon)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovRow {
    pub t: f64,
    pub entropy: f64,
    pub e_classical: f64,
    /// Mean-field free energy, `NaN` unless the kernel is quadratic.
    pub f_quadratic: f64,
    pub fisher_i: f64,
    pub fisher_a: f64,
    /// Monte Carlo distance to the stationary fixed point, `NaN` when skipped.
    pub w2_to_stationary: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub rows: Vec<LyapunovRow>,
    /// Largest one-step increase of the mean-field free energy (`NaN` if not tracked).
    pub max_f_increase: f64,
    /// Largest one-step increase of the classical free energy.
    pub max_e_increase: f64,
    pub warnings: Vec<String>,
}

fn row(
    grid: &PhaseGrid,
    params: &ModelParams,
    a_mat: &nalgebra::Matrix2<f64>,
    stationary: Option<&PhaseGrid>,
    settings: &SeriesSettings,
) -> Result<LyapunovRow> {
    let w2 = match stationary {
        Some(s) if settings.w2_samples > 0 => w2_grid_with(grid, s, settings.w2_samples, settings.seed)?,
        _ => f64::NAN,
    };
    Ok(LyapunovRow {
        t: grid.t,
        entropy: entropy(grid),
        e_classical: classical_free_energy(grid, params),
        f_quadratic: mean_field_free_energy(grid, params).unwrap_or(f64::NAN),
        fisher_i: fisher_information(grid, params, &nalgebra::Matrix2::identity()),
        fisher_a: fisher_information(grid, params, a_mat),
        w2_to_stationary: w2,
        mass: grid.mass(),
    })
}

fn max_increase(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
}

/// Runs the grid solver from `initial` and records the Lyapunov candidates at every output time.
pub fn lyapunov_series(
    params: &ModelParams,
    cfg: &GridConfig,
    initial: &PhaseGrid,
    settings: &SeriesSettings,
) -> Result<LyapunovReport> {
    settings.validate()?;
    let mut warnings = Vec::new();
    let stationary = if settings.w2_samples > 0 {
        match stationary_fixed_point(params, cfg, &FixedPointOptions::default()) {
            Ok((grid, report)) => {
                warnings.extend(report.warning);
                Some(grid)
            }
            Err(Error::NonConvergence { iterations, residual }) => {
                warnings.push(format!(
                    "fixed point not found ({iterations} iterations, residual {residual:e}); w2 column skipped"
                ));
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let a_mat = coupling_constants(params.gamma).a_mat;
    let mut solver = VfpSolver::new(params, cfg)?;
    let mut grid = initial.clone();
    let times = settings.times();
    let mut rows = vec![row(&grid, params, &a_mat, stationary.as_ref(), settings)?];
    for w in times.windows(2) {
        solver.advance(&mut grid, w[1] - w[0])?;
        grid.t = w[1];
        rows.push(row(&grid, params, &a_mat, stationary.as_ref(), settings)?);
    }
    let max_f_increase = if rows[0].f_quadratic.is_nan() {
        f64::NAN
    } else {
        max_increase(rows.iter().map(|r| r.f_quadratic))
    };
    let max_e_increase = max_increase(rows.iter().map(|r| r.e_classical));
    Ok(LyapunovReport { rows, max_f_increase, max_e_increase, warnings })
}

/// A Gaussian initial state along which the classical free energy increases.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Witness {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub de_dt: f64,
    /// Mean-field free-energy rate at the same state (`NaN` for non-quadratic kernels).
    pub df_dt: f64,
    /// Number of candidates examined before this one was accepted.
    pub examined: usize,
}

/// Deterministic list of Gaussian initial data scanned by [`find_energy_witness`]:
/// means on `{-2, -1.875, ..., 2}^2` and diagonal variances in `{0.25, 0.5, 1, 2}`.
pub fn witness_candidates() -> Vec<GaussianState> {
    let means: Vec<f64> = (0..=32).map(|k| -2.0 + k as f64 * 0.125).collect();
    let vars = [0.5, 1.0, 0.25, 2.0];
    let mut out = Vec::new();
    for &sx in &vars {
        for &sv in &vars {
            for &mx in &means {
                for &mv in &means {
                    out.push(GaussianState::diagonal(mx, mv, sx, sv).expect("positive variances"));
                }
            }
        }
    }
    out
}

/// `dE/dt` at `t = 0` from the grid solver, by the one-sided second-order
/// difference `(-3 E_0 + 4 E_h - E_2h) / (2h)`.
pub fn grid_energy_rate(params: &ModelParams, cfg: &GridConfig, initial: &PhaseGrid, h: f64) -> Result<f64> {
    let mut solver = VfpSolver::new(params, cfg)?;
    let mut grid = initial.clone();
    let e0 = classical_free_energy(&grid, params);
    solver.advance(&mut grid, h)?;
    let e1 = classical_free_energy(&grid, params);
    solver.advance(&mut grid, h)?;
    let e2 = classical_free_energy(&grid, params);
    Ok((-3.0 * e0 + 4.0 * e1 - e2) / (2.0 * h))
}

/// Scans [`witness_candidates`] and returns the first state with `dE/dt(0) > threshold`.
///
/// Quadratic kernels use the closed-form Gaussian rates; other kernels run the
/// grid solver (`cfg`) over a window of length `0.02` per candidate, so
/// `max_candidates` bounds the cost.
pub fn find_energy_witness(
    params: &ModelParams,
    cfg: &GridConfig,
    threshold: f64,
    max_candidates: usize,
) -> Result<Option<Witness>> {
    let quadratic = params.kernel.quadratic_coefficients().is_some();
    for (k, g) in witness_candidates().into_iter().take(max_candidates).enumerate() {
        let (de, df) = if quadratic {
            let (df, de) = free_energy_rates(&g, params)?;
            (de, df)
        } else {
            let grid = PhaseGrid::from_density(cfg, |x, v| g.density(x, v))?;
            (grid_energy_rate(params, cfg, &grid, 0.01)?, f64::NAN)
        };
        if de > threshold {
            return Ok(Some(Witness {
                mean: [g.mean[0], g.mean[1]],
                cov: [[g.cov[(0, 0)], g.cov[(0, 1)]], [g.cov[(1, 0)], g.cov[(1, 1)]]],
                de_dt: de,
                df_dt: df,
                examined: k + 1,
            }));
        }
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherRow {
    pub t: f64,
    pub fisher_a: f64,
    pub fisher_i: f64,
    /// `I_A(0) e^{-(a/4) t}`.
    pub envelope_a: f64,
    /// `4 I_I(0) e^{-min(gamma, 1/gamma) t / 8}`.
    pub envelope_i: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FisherReport {
    pub rows: Vec<FisherRow>,
    /// `max_t I_A(t) / envelope_a(t)` over rows above [`FISHER_FLOOR`].
    pub worst_ratio_a: f64,
    pub worst_ratio_i: f64,
    pub slack: f64,
    pub envelopes_ok: bool,
    pub outside_guarantee: bool,
    pub warning: Option<String>,
}

/// Twisted Fisher information along the grid flow, compared with both envelopes.
/// A row passes when the value is below `slack * envelope` or below [`FISHER_FLOOR`].
pub fn fisher_series(
    params: &ModelParams,
    cfg: &GridConfig,
    initial: &PhaseGrid,
    settings: &SeriesSettings,
) -> Result<FisherReport> {
    settings.validate()?;
    let constants = coupling_constants(params.gamma);
    let id = nalgebra::Matrix2::identity();
    let mut solver = VfpSolver::new(params, cfg)?;
    let mut grid = initial.clone();
    let (ia0, ii0) = (fisher_information(&grid, params, &constants.a_mat), fisher_information(&grid, params, &id));
    let rate_i = params.gamma_min() / 8.0;
    let mut rows = Vec::new();
    let times = settings.times();
    for (k, &t) in times.iter().enumerate() {
        if k > 0 {
            solver.advance(&mut grid, t - times[k - 1])?;
            grid.t = t;
        }
        rows.push(FisherRow {
            t,
            fisher_a: fisher_information(&grid, params, &constants.a_mat),
            fisher_i: fisher_information(&grid, params, &id),
            envelope_a: ia0 * (-constants.squared_norm_rate() * t).exp(),
            envelope_i: 4.0 * ii0 * (-rate_i * t).exp(),
        });
    }
    let ratio = |v: f64, env: f64| if v <= FISHER_FLOOR { 0.0 } else { v / env };
    let worst_ratio_a = rows.iter().map(|r| ratio(r.fisher_a, r.envelope_a)).fold(0.0, f64::max);
    let worst_ratio_i = rows.iter().map(|r| ratio(r.fisher_i, r.envelope_i)).fold(0.0, f64::max);
    let outside_guarantee = !smallness_holds(params);
    Ok(FisherReport {
        rows,
        worst_ratio_a,
        worst_ratio_i,
        slack: FISHER_SLACK,
        envelopes_ok: worst_ratio_a <= FISHER_SLACK && worst_ratio_i <= FISHER_SLACK,
        outside_guarantee,
        warning: outside_guarantee
            .then(|| "outside-guarantee: smallness condition fails, the envelopes are not guaranteed".to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InteractionKernel;

    #[test]
    fn output_times_hit_the_horizon() {
        let s = SeriesSettings { horizon: 1.0, output_every: 0.3, w2_samples: 0, seed: 0 };
        let t = s.times();
        assert_eq!(t.len(), 5);
        assert_eq!(*t.last().unwrap(), 1.0);
        let s = SeriesSettings { horizon: 1.0, output_every: 0.25, ..s };
        assert_eq!(s.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn witness_for_quadratic_kernel() {
        let p = ModelParams::new(0.8, 1.0, InteractionKernel::quadratic_linear(0.5, 1.0).unwrap()).unwrap();
        let w = find_energy_witness(&p, &GridConfig::default(), 0.0, usize::MAX).unwrap().unwrap();
        assert!(w.de_dt > 0.0);
        assert!(w.df_dt <= 0.0);
        // without the linear part the classical free energy is a Lyapunov function
        let even = ModelParams::new(0.8, 1.0, InteractionKernel::quadratic_linear(0.5, 0.0).unwrap()).unwrap();
        assert!(find_energy_witness(&even, &GridConfig::default(), 1e-12, usize::MAX).unwrap().is_none());
    }

    #[test]
    fn fisher_stationary_start_stays_flat() {
        let cfg = GridConfig::with_cells(48, 48);
        let p = ModelParams::new(1.0, 0.125, InteractionKernel::sine(1.0).unwrap()).unwrap();
        let (fp, _) = stationary_fixed_point(&p, &cfg, &FixedPointOptions::default()).unwrap();
        let s = SeriesSettings { horizon: 1.0, output_every: 0.5, w2_samples: 0, seed: 0 };
        let r = fisher_series(&p, &cfg, &fp, &s).unwrap();
        assert!(r.rows.iter().all(|row| row.fisher_a <= 1e-6 && row.fisher_i <= 1e-6));
        assert!(r.envelopes_ok && !r.outside_guarantee);
    }

    #[test]
    fn lyapunov_rows_are_complete() {
        let cfg = GridConfig::with_cells(32, 32);
        let p = ModelParams::new(1.0, 1.0, InteractionKernel::quadratic_linear(0.5, 1.0).unwrap()).unwrap();
        let g = GaussianState::diagonal(1.0, 0.0, 0.5, 1.0).unwrap();
        let grid = PhaseGrid::from_density(&cfg, |x, v| g.density(x, v)).unwrap();
        let s = SeriesSettings { horizon: 0.5, output_every: 0.25, w2_samples: 64, seed: 1 };
        let r = lyapunov_series(&p, &cfg, &grid, &s).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows.iter().all(|row| row.f_quadratic.is_finite() && row.w2_to_stationary.is_finite()));
        assert!(r.max_f_increase < 1e-6);
        let sine = ModelParams::new(1.0, 0.1, InteractionKernel::sine(1.0).unwrap()).unwrap();
        let r = lyapunov_series(&sine, &cfg, &grid, &SeriesSettings { w2_samples: 0, ..s }).unwrap();
        assert!(r.rows.iter().all(|row| row.f_quadratic.is_nan() && row.w2_to_stationary.is_nan()));
        assert!(r.max_f_increase.is_nan());
    }
}
