//! Subcommand runners. Each computes everything first and then writes its
//! files from this thread, so reruns with the same configuration produce
//! byte-identical output.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use vfp_core::experiments::{find_energy_witness, fisher_series, lyapunov_series};
use vfp_core::functionals::fisher_information;
use vfp_core::gaussian::{
    bures_w2, classical_free_energy_quadratic, free_energy_particle_limit, free_energy_quadratic, stationary_gaussian,
    GaussianState,
};
use vfp_core::particles::{contraction_experiment, step_with, NoiseStream, ParticleState, StepBuffers};
use vfp_core::pde::{stationary_fixed_point, PhaseGrid, VfpSolver};
use vfp_core::{coupling_constants, Error, Result};

use crate::config::{ExperimentConfig, Validated};

/// Files written and whether a guaranteed envelope was violated.
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub envelope_violation: bool,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Solver {
    Particles,
    Grid,
}

/// `17` significant digits; non-finite values as `nan`, `inf`, `-inf`.
pub fn fmt(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

struct Files {
    prefix: String,
    written: Vec<PathBuf>,
}

impl Files {
    fn new(prefix: &str) -> Self {
        Self { prefix: prefix.to_string(), written: Vec::new() }
    }

    fn create(&mut self, suffix: &str) -> Result<BufWriter<fs::File>> {
        let path = PathBuf::from(format!("{}{suffix}", self.prefix));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = fs::File::create(&path)?;
        self.written.push(path);
        Ok(BufWriter::new(file))
    }

    fn csv(&mut self, suffix: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
        let mut out = self.create(suffix)?;
        writeln!(out, "{}", header.join(","))?;
        for row in rows {
            let cells: Vec<String> = row.into_iter().map(fmt).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, suffix: &str, value: &T) -> Result<()> {
        let mut out = self.create(suffix)?;
        serde_json::to_writer_pretty(&mut out, value)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    fn done(self, envelope_violation: bool, warnings: Vec<String>) -> Outcome {
        Outcome { files: self.written, envelope_violation, warnings }
    }
}

fn initial_grid(v: &Validated, cfg: &ExperimentConfig) -> Result<PhaseGrid> {
    let g = v.initial;
    PhaseGrid::from_density(&cfg.grid, |x, w| g.density(x, w))
}

pub fn contraction(cfg: &ExperimentConfig, v: &Validated, prefix: &str) -> Result<Outcome> {
    let report = contraction_experiment(&v.params, &v.sim, &v.contraction)?;
    let mut files = Files::new(prefix);
    let (m0, e0) = (report.modified_norm_sq[0], report.euclid_sq[0]);
    let rows = report.times.iter().enumerate().map(|(k, &t)| {
        let env = (-report.envelope_rate * t).exp();
        vec![t, report.modified_norm_sq[k], report.euclid_sq[k], m0 * env, 4.0 * e0 * env]
    });
    files.csv(
        "_contraction.csv",
        &["t", "modified_norm_sq", "euclid_sq", "envelope_modified", "envelope_euclid"],
        rows.collect::<Vec<_>>(),
    )?;
    files.json("_contraction.json", &json!({ "config": cfg, "report": report }))?;
    let violation = !report.envelope_ok && !report.outside_guarantee;
    Ok(files.done(violation, report.warning.into_iter().collect()))
}

pub fn lyapunov(cfg: &ExperimentConfig, v: &Validated, prefix: &str) -> Result<Outcome> {
    let witness = if cfg.experiment.witness_search {
        Some(find_energy_witness(&v.params, &cfg.grid, 0.0, cfg.experiment.max_candidates)?)
    } else {
        None
    };
    let report = lyapunov_series(&v.params, &cfg.grid, &initial_grid(v, cfg)?, &v.series)?;
    let mut files = Files::new(prefix);
    files.csv(
        "_lyapunov.csv",
        &["t", "entropy", "E_classical", "F_quadratic", "fisher_I", "fisher_A", "w2_to_stationary", "mass"],
        report
            .rows
            .iter()
            .map(|r| vec![r.t, r.entropy, r.e_classical, r.f_quadratic, r.fisher_i, r.fisher_a, r.w2_to_stationary, r.mass])
            .collect::<Vec<_>>(),
    )?;
    let mut warnings = report.warnings.clone();
    if matches!(witness, Some(None)) {
        warnings.push("witness search found no initial state with dE/dt(0) > 0".into());
    }
    files.json(
        "_lyapunov.json",
        &json!({
            "config": cfg,
            "max_f_increase": report.max_f_increase,
            "max_e_increase": report.max_e_increase,
            "witness": witness.flatten(),
            "warnings": warnings,
        }),
    )?;
    Ok(files.done(false, warnings))
}

pub fn fisher(cfg: &ExperimentConfig, v: &Validated, prefix: &str) -> Result<Outcome> {
    let report = fisher_series(&v.params, &cfg.grid, &initial_grid(v, cfg)?, &v.series)?;
    let mut files = Files::new(prefix);
    files.csv(
        "_fisher.csv",
        &["t", "fisher_A", "fisher_I", "envelope_A", "envelope_I"],
        report.rows.iter().map(|r| vec![r.t, r.fisher_a, r.fisher_i, r.envelope_a, r.envelope_i]).collect::<Vec<_>>(),
    )?;
    files.json(
        "_fisher.json",
        &json!({
            "config": cfg,
            "worst_ratio_a": report.worst_ratio_a,
            "worst_ratio_i": report.worst_ratio_i,
            "slack": report.slack,
            "envelopes_ok": report.envelopes_ok,
            "outside_guarantee": report.outside_guarantee,
            "warning": report.warning,
        }),
    )?;
    let violation = !report.envelopes_ok && !report.outside_guarantee;
    Ok(files.done(violation, report.warning.into_iter().collect()))
}

pub fn stationary(cfg: &ExperimentConfig, v: &Validated, prefix: &str) -> Result<Outcome> {
    let (grid, report) = stationary_fixed_point(&v.params, &cfg.grid, &cfg.experiment.fixed_point)?;
    let a = coupling_constants(v.params.gamma).a_mat;
    let fisher_a = fisher_information(&grid, &v.params, &a);
    let mut files = Files::new(prefix);
    let mut out = files.create("_stationary.csv")?;
    grid.write_csv(&mut out)?;
    out.flush()?;
    drop(out);
    files.json(
        "_stationary.json",
        &json!({
            "config": cfg,
            "iterations": report.iterations,
            "residual": report.residual,
            "moments": grid.moments(),
            "fisher_A": fisher_a,
            "warning": report.warning,
        }),
    )?;
    Ok(files.done(false, report.warning.into_iter().collect()))
}

#[derive(Serialize)]
struct GaussianJson {
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

impl From<&GaussianState> for GaussianJson {
    fn from(g: &GaussianState) -> Self {
        Self { mean: [g.mean[0], g.mean[1]], cov: [[g.cov[(0, 0)], g.cov[(0, 1)]], [g.cov[(1, 0)], g.cov[(1, 1)]]] }
    }
}

pub fn oracle(cfg: &ExperimentConfig, v: &Validated, prefix: &str) -> Result<Outcome> {
    let p = &v.params;
    if p.kernel.quadratic_coefficients().is_none() {
        return Err(Error::Config("the oracle subcommand needs the quadratic_linear (or zero) kernel".into()));
    }
    let states: Vec<GaussianState> = cfg.oracle.states.iter().map(|g| g.state()).collect::<Result<_>>()?;
    let stationary = stationary_gaussian(p)?;
    let bures: Vec<_> = cfg
        .oracle
        .pairs
        .iter()
        .map(|[a, b]| -> Result<_> {
            let (ga, gb) = (a.state()?, b.state()?);
            Ok(json!({ "g1": GaussianJson::from(&ga), "g2": GaussianJson::from(&gb), "w2": bures_w2(&ga, &gb) }))
        })
        .collect::<Result<_>>()?;
    let energies: Vec<_> = states
        .iter()
        .map(|g| -> Result<_> {
            Ok(json!({
                "state": GaussianJson::from(g),
                "F": free_energy_quadratic(g, p)?,
                "E": classical_free_energy_quadratic(g, p)?,
            }))
        })
        .collect::<Result<_>>()?;
    let mut limit_table = Vec::new();
    for &n in &cfg.oracle.particle_numbers {
        let values: Vec<f64> = states.iter().map(|g| free_energy_particle_limit(g, p, n)).collect::<Result<_>>()?;
        let diff = if values.len() >= 2 { values[0] - values[1] } else { f64::NAN };
        limit_table.push(json!({ "n": n, "per_particle_kl": values, "difference_first_two": diff }));
    }
    let f_diff = if states.len() >= 2 {
        free_energy_quadratic(&states[0], p)? - free_energy_quadratic(&states[1], p)?
    } else {
        f64::NAN
    };
    let mut files = Files::new(prefix);
    files.json(
        "_oracle.json",
        &json!({
            "config": cfg,
            "stationary": GaussianJson::from(&stationary),
            "bures": bures,
            "free_energies": energies,
            "particle_limit": limit_table,
            "free_energy_difference_first_two": f_diff,
        }),
    )?;
    Ok(files.done(false, Vec::new()))
}

pub fn simulate(cfg: &ExperimentConfig, v: &Validated, prefix: &str, solver: Solver) -> Result<Outcome> {
    let mut files = Files::new(prefix);
    match solver {
        Solver::Particles => {
            let s = &cfg.sim;
            let g = v.initial;
            let std = [g.cov[(0, 0)].sqrt(), g.cov[(1, 1)].sqrt()];
            if g.cov[(0, 1)] != 0.0 {
                return Err(Error::Config("particle initial data must have a diagonal covariance".into()));
            }
            let mut state = ParticleState::sample_gaussian(s.n, [g.mean[0], g.mean[1]], std, s.seed)?;
            let mut noise = NoiseStream::new(s.seed, s.n);
            let mut draws = vec![0.0; s.n];
            let mut buf = StepBuffers::default();
            let per_sample = ((s.sample_every / s.dt).round() as usize).max(1);
            let samples = ((s.horizon / (per_sample as f64 * s.dt)).round() as usize).max(1);
            let record = |st: &ParticleState| {
                let m = st.empirical_moments();
                vec![st.t, m[0], m[1], m[2], m[3], m[4], st.max_abs_v()]
            };
            let mut rows = vec![record(&state)];
            for _ in 0..samples {
                for _ in 0..per_sample {
                    noise.fill(&mut draws);
                    step_with(&mut state, &v.params, &v.sim, &draws, &mut buf)?;
                }
                rows.push(record(&state));
            }
            files.csv("_simulate.csv", &["t", "m_x", "m_v", "var_x", "cov_xv", "var_v", "max_abs_v"], rows)?;
            let mut out = files.create("_particles.csv")?;
            writeln!(out, "t,i,x,v")?;
            state.write_csv_rows(&mut out)?;
            out.flush()?;
        }
        Solver::Grid => {
            let mut grid = initial_grid(v, cfg)?;
            let mut solver = VfpSolver::new(&v.params, &cfg.grid)?;
            let record = |g: &PhaseGrid| {
                let m = g.moments();
                vec![g.t, m[0], m[1], m[2], m[3], m[4], g.mass(), g.min_value()]
            };
            let times = v.series.times();
            let mut rows = vec![record(&grid)];
            for w in times.windows(2) {
                solver.advance(&mut grid, w[1] - w[0])?;
                grid.t = w[1];
                rows.push(record(&grid));
            }
            files.csv("_simulate.csv", &["t", "m_x", "m_v", "var_x", "cov_xv", "var_v", "mass", "min_f"], rows)?;
            let mut out = files.create("_grid.bin")?;
            grid.write_binary(&mut out)?;
            out.flush()?;
        }
    }
    Ok(files.done(false, Vec::new()))
}

/// Default prefix when neither `--out` nor the configuration names one.
pub fn default_prefix(command: &str) -> String {
    Path::new("vfp-out").join(command).to_string_lossy().into_owned()
}
