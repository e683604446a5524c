//! Closed forms for the quadratic-linear kernel `K(x) = a x^2 + b x`.
//!
//! With this kernel the mean-field force is affine in `x`, Gaussian data stay
//! Gaussian, and everything reduces to the first two moments.
//!
//! Free-energy conventions (additive constants dropped):
//!
//! ```text
//! E(f) = int f ln f + int (x^2 + v^2)/2 f + (lambda/2) int int K(x - y) f f
//! F(f) = E(f) + lambda b m_x
//! ```
//!
//! so for the quadratic kernel `F = entropy + moments + lambda a var_x + lambda b m_x`.
//! `F` is the per-particle limit of the relative entropy to the N-particle Gibbs
//! measure, see [`free_energy_particle_limit`].

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::model::{sym_sqrt, ModelParams};
use crate::ode::dopri5;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Phase-space Gaussian with mean `(m_x, m_v)` and covariance `cov`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianState {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl GaussianState {
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        if mean.iter().chain(cov.iter()).any(|z| !z.is_finite()) {
            return Err(Error::Contract("Gaussian state has non-finite entries".into()));
        }
        if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-12 * (1.0 + cov.abs().max()) {
            return Err(Error::Contract(format!("covariance is not symmetric: {cov}")));
        }
        if !(cov[(0, 0)] > 0.0 && cov.determinant() > 0.0) {
            return Err(Error::Contract(format!("covariance is not positive definite: {cov}")));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard() -> Self {
        Self { mean: Vector2::zeros(), cov: Matrix2::identity() }
    }

    /// Product Gaussian with the given means and variances.
    pub fn diagonal(m_x: f64, m_v: f64, var_x: f64, var_v: f64) -> Result<Self> {
        Self::new(Vector2::new(m_x, m_v), Matrix2::new(var_x, 0.0, 0.0, var_v))
    }

    pub fn density(&self, x: f64, v: f64) -> f64 {
        let d = Vector2::new(x, v) - self.mean;
        let det = self.cov.determinant();
        let inv = Matrix2::new(self.cov[(1, 1)], -self.cov[(0, 1)], -self.cov[(1, 0)], self.cov[(0, 0)]) / det;
        (-0.5 * d.dot(&(inv * d))).exp() / (std::f64::consts::TAU * det.sqrt())
    }

    /// `int f ln f = -(1 + ln 2 pi) - ln det(cov) / 2`.
    pub fn entropy(&self) -> f64 {
        -(1.0 + LN_2PI) - 0.5 * self.cov.determinant().ln()
    }

    fn to_vec(self) -> [f64; 5] {
        [self.mean[0], self.mean[1], self.cov[(0, 0)], self.cov[(0, 1)], self.cov[(1, 1)]]
    }

    fn from_slice(y: &[f64]) -> Self {
        Self { mean: Vector2::new(y[0], y[1]), cov: Matrix2::new(y[2], y[3], y[3], y[4]) }
    }
}

/// `KL(g1 | g2)` between two phase-space Gaussians.
pub fn relative_entropy(g1: &GaussianState, g2: &GaussianState) -> f64 {
    let inv2 = g2.cov.try_inverse().expect("positive definite covariance");
    let d = g2.mean - g1.mean;
    0.5 * ((inv2 * g1.cov).trace() + d.dot(&(inv2 * d)) - 2.0 + (g2.cov.determinant() / g1.cov.determinant()).ln())
}

fn quadratic(params: &ModelParams) -> Result<(f64, f64, f64)> {
    let (a, b) = params.kernel.quadratic_coefficients().ok_or_else(|| {
        Error::Contract("closed forms need the quadratic_linear (or zero) kernel".into())
    })?;
    let stiffness = 1.0 + 2.0 * params.lambda * a;
    if !(stiffness > 0.0) {
        return Err(Error::Unconfined { stiffness });
    }
    Ok((a, b, stiffness))
}

fn moment_rhs(gamma: f64, lambda_b: f64, stiffness: f64) -> impl Fn(f64, &[f64], &mut [f64]) {
    move |_, y, dy| {
        let (mx, mv, sxx, sxv, svv) = (y[0], y[1], y[2], y[3], y[4]);
        dy[0] = mv;
        dy[1] = -mx - lambda_b - gamma * mv;
        // B = [[0, 1], [-k, -gamma]], S' = B S + S B^T + diag(0, 2 gamma)
        dy[2] = 2.0 * sxv;
        dy[3] = svv - stiffness * sxx - gamma * sxv;
        dy[4] = -2.0 * stiffness * sxv - 2.0 * gamma * svv + 2.0 * gamma;
    }
}

/// Gaussian solution of the kinetic equation at each of `times` (nondecreasing, starting at or after 0).
pub fn moment_flow_at(state: &GaussianState, params: &ModelParams, times: &[f64]) -> Result<Vec<GaussianState>> {
    let (_, b, stiffness) = quadratic(params)?;
    let rhs = moment_rhs(params.gamma, params.lambda * b, stiffness);
    let mut y = state.to_vec().to_vec();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        if target < t {
            return Err(Error::Contract(format!("output times must be nondecreasing and >= 0, got {target}")));
        }
        y = dopri5(&rhs, t, target, &y, 1e-10)?;
        t = target;
        out.push(GaussianState::from_slice(&y));
    }
    Ok(out)
}

/// Gaussian solution sampled at `samples + 1` equally spaced times in `[0, horizon]`.
pub fn moment_flow(
    state: &GaussianState,
    params: &ModelParams,
    horizon: f64,
    samples: usize,
) -> Result<Vec<(f64, GaussianState)>> {
    if !(horizon >= 0.0) || samples == 0 {
        return Err(Error::Config(format!("moment_flow needs horizon >= 0 and samples >= 1, got {horizon}, {samples}")));
    }
    let times: Vec<f64> = (0..=samples).map(|k| horizon * k as f64 / samples as f64).collect();
    let states = moment_flow_at(state, params, &times)?;
    Ok(times.into_iter().zip(states).collect())
}

/// Mean `(-lambda b, 0)`, covariance `diag(1/(1 + 2 lambda a), 1)`.
pub fn stationary_gaussian(params: &ModelParams) -> Result<GaussianState> {
    let (_, b, stiffness) = quadratic(params)?;
    GaussianState::diagonal(-params.lambda * b, 0.0, 1.0 / stiffness, 1.0)
}

/// Wasserstein-2 distance between Gaussians (Bures formula).
pub fn bures_w2(g1: &GaussianState, g2: &GaussianState) -> f64 {
    let r2 = sym_sqrt(&g2.cov);
    let cross = sym_sqrt(&(r2 * g1.cov * r2));
    let trace = (g1.cov + g2.cov - 2.0 * cross).trace();
    ((g1.mean - g2.mean).norm_squared() + trace.max(0.0)).sqrt()
}

/// `F(g)` with the additive constant set to zero.
pub fn free_energy_quadratic(g: &GaussianState, params: &ModelParams) -> Result<f64> {
    let (a, b, _) = quadratic(params)?;
    let (mx, mv) = (g.mean[0], g.mean[1]);
    let moments = 0.5 * (g.cov[(0, 0)] + mx * mx + g.cov[(1, 1)] + mv * mv);
    Ok(g.entropy() + moments + params.lambda * a * g.cov[(0, 0)] + params.lambda * b * mx)
}

/// Classical free energy `E(g) = F(g) - lambda b m_x`.
pub fn classical_free_energy_quadratic(g: &GaussianState, params: &ModelParams) -> Result<f64> {
    let (_, b, _) = quadratic(params)?;
    Ok(free_energy_quadratic(g, params)? - params.lambda * b * g.mean[0])
}

/// Time derivatives `(dF/dt, dE/dt)` along the Gaussian flow through `g`.
pub fn free_energy_rates(g: &GaussianState, params: &ModelParams) -> Result<(f64, f64)> {
    let (_, b, stiffness) = quadratic(params)?;
    let y = g.to_vec();
    let mut dy = [0.0; 5];
    moment_rhs(params.gamma, params.lambda * b, stiffness)(0.0, &y, &mut dy);
    let (mx, mv, sxx, sxv, svv) = (y[0], y[1], y[2], y[3], y[4]);
    let det = sxx * svv - sxv * sxv;
    let grad = [
        mx + params.lambda * b,
        mv,
        0.5 * stiffness - 0.5 * svv / det,
        sxv / det,
        0.5 - 0.5 * sxx / det,
    ];
    let df: f64 = grad.iter().zip(&dy).map(|(g, d)| g * d).sum();
    Ok((df, df - params.lambda * b * mv))
}

/// The N-particle Gibbs measure `mu_N`: Gaussian with position precision
/// `I + (2 lambda a/(N-1))(N I - 1 1^T)`, position mean `-lambda b 1`
/// and a standard velocity block.
#[derive(Clone, Debug, PartialEq)]
pub struct GibbsN {
    pub n: usize,
    /// `2N x 2N` precision in the variable order `(x_1..x_N, v_1..v_N)`.
    pub precision: nalgebra::DMatrix<f64>,
    pub mean: nalgebra::DVector<f64>,
}

impl GibbsN {
    /// Eigenvalue of the position precision on the mean-zero sector.
    pub fn transverse_eigenvalue(&self, params: &ModelParams) -> f64 {
        transverse(params, self.n)
    }

    /// Variance of a single position coordinate.
    pub fn marginal_var_x(&self, params: &ModelParams) -> f64 {
        let n = self.n as f64;
        1.0 / n + (1.0 - 1.0 / n) / transverse(params, self.n)
    }
}

fn transverse(params: &ModelParams, n: usize) -> f64 {
    let a = params.kernel.quadratic_coefficients().map_or(0.0, |(a, _)| a);
    let n = n as f64;
    1.0 + 2.0 * params.lambda * a * n / (n - 1.0)
}

fn check_gibbs(params: &ModelParams, n: usize) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::Contract(format!("Gibbs measure needs N >= 2, got {n}")));
    }
    let (a, b) = params
        .kernel
        .quadratic_coefficients()
        .ok_or_else(|| Error::Contract("Gibbs measure needs the quadratic_linear kernel".into()))?;
    let t = transverse(params, n);
    if !(t > 0.0) {
        return Err(Error::Unconfined { stiffness: t });
    }
    Ok((a, b))
}

/// Dense representation of `mu_N` (`O(N^2)` memory; meant for moderate `N`).
pub fn gibbs_measure_n(params: &ModelParams, n: usize) -> Result<GibbsN> {
    let (a, b) = check_gibbs(params, n)?;
    let c = 2.0 * params.lambda * a / (n as f64 - 1.0);
    let mut precision = nalgebra::DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            precision[(i, j)] = if i == j { 1.0 + c * (n as f64 - 1.0) } else { -c };
        }
        precision[(n + i, n + i)] = 1.0;
    }
    let mut mean = nalgebra::DVector::<f64>::zeros(2 * n);
    for i in 0..n {
        mean[i] = -params.lambda * b;
    }
    Ok(GibbsN { n, precision, mean })
}

/// `(1/N) KL(g^{(x)N} | mu_N)` in closed form.
pub fn free_energy_particle_limit(g: &GaussianState, params: &ModelParams, n: usize) -> Result<f64> {
    let (_, b) = check_gibbs(params, n)?;
    let (a, _, _) = quadratic(params)?;
    let nf = n as f64;
    let (mx, mv) = (g.mean[0], g.mean[1]);
    let shift = mx + params.lambda * b;
    let trace = g.cov[(0, 0)] * (1.0 + 2.0 * params.lambda * a) + g.cov[(1, 1)];
    let log_det_precision = (nf - 1.0) / nf * transverse(params, n).ln();
    Ok(0.5 * (trace + shift * shift + mv * mv - 2.0 - log_det_precision - g.cov.determinant().ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InteractionKernel;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn quad(gamma: f64, lambda: f64, a: f64, b: f64) -> ModelParams {
        ModelParams::new(gamma, lambda, InteractionKernel::quadratic_linear(a, b).unwrap()).unwrap()
    }

    fn mat_exp(m: Matrix2<f64>, t: f64) -> Matrix2<f64> {
        // scaling and squaring with a Taylor core
        let s = 8;
        let scaled = m * (t / 2f64.powi(s));
        let mut term = Matrix2::identity();
        let mut sum = Matrix2::identity();
        for k in 1..30 {
            term = term * scaled / k as f64;
            sum += term;
        }
        (0..s).fold(sum, |acc, _| acc * acc)
    }

    /// Dense KL between g^{(x)N} and mu_N via Cholesky, independent of the closed form.
    fn dense_kl_per_particle(g: &GaussianState, params: &ModelParams, n: usize) -> f64 {
        let gibbs = gibbs_measure_n(params, n).unwrap();
        let mut cov = DMatrix::<f64>::zeros(2 * n, 2 * n);
        let mut mean = DVector::<f64>::zeros(2 * n);
        for i in 0..n {
            cov[(i, i)] = g.cov[(0, 0)];
            cov[(i, n + i)] = g.cov[(0, 1)];
            cov[(n + i, i)] = g.cov[(1, 0)];
            cov[(n + i, n + i)] = g.cov[(1, 1)];
            mean[i] = g.mean[0];
            mean[n + i] = g.mean[1];
        }
        let p = &gibbs.precision;
        let d = &gibbs.mean - &mean;
        let log_det = |m: &DMatrix<f64>| {
            let l = m.clone().cholesky().unwrap();
            2.0 * l.l().diagonal().iter().map(|x| x.ln()).sum::<f64>()
        };
        let kl = 0.5 * ((p * &cov).trace() + d.dot(&(p * &d)) - 2.0 * n as f64 - log_det(&cov) - log_det(p));
        kl / n as f64
    }

    #[test]
    fn stationary_examples() {
        let g = stationary_gaussian(&quad(1.0, 1.0, 0.0, 0.0)).unwrap();
        assert_eq!(g, GaussianState::standard());
        let g = stationary_gaussian(&quad(1.0, 1.0, 0.0, 1.0)).unwrap();
        assert_eq!(g.mean, Vector2::new(-1.0, 0.0));
        assert_eq!(g.cov, Matrix2::identity());
        let g = stationary_gaussian(&quad(1.0, 1.0, 0.5, 0.0)).unwrap();
        assert_eq!(g.cov[(0, 0)], 0.5);
    }

    #[test]
    fn unconfined_is_rejected() {
        let p = quad(1.0, 1.0, -0.5, 0.0);
        assert!(matches!(stationary_gaussian(&p), Err(Error::Unconfined { .. })));
        assert!(matches!(moment_flow(&GaussianState::standard(), &p, 1.0, 4), Err(Error::Unconfined { .. })));
    }

    #[test]
    fn stationary_is_a_fixed_point() {
        for (gamma, a, b) in [(1.0, 0.5, 1.0), (0.3, 2.0, -1.0), (4.0, -0.2, 0.5)] {
            let p = quad(gamma, 1.0, a, b);
            let s = stationary_gaussian(&p).unwrap();
            let k = 1.0 + 2.0 * a;
            let bm = Matrix2::new(0.0, 1.0, -k, -gamma);
            let residual = bm * s.cov + s.cov * bm.transpose() + Matrix2::new(0.0, 0.0, 0.0, 2.0 * gamma);
            assert!(residual.abs().max() < 1e-14);
            let traj = moment_flow(&s, &p, 10.0, 10).unwrap();
            for (_, g) in traj {
                assert!((g.mean - s.mean).abs().max() < 1e-9);
                assert!((g.cov - s.cov).abs().max() < 1e-9);
            }
        }
    }

    #[test]
    fn free_mean_follows_matrix_exponential() {
        let gamma = 0.7;
        let p = quad(gamma, 0.0, 0.5, 1.0);
        let g0 = GaussianState::diagonal(1.5, -0.5, 0.3, 2.0).unwrap();
        let traj = moment_flow(&g0, &p, 6.0, 12).unwrap();
        let j = Matrix2::new(0.0, 1.0, -1.0, -gamma);
        for (t, g) in traj {
            let e = mat_exp(j, t);
            let m = e * g0.mean;
            assert!((g.mean - m).abs().max() < 1e-9, "t={t}");
            // covariance: e S0 e^T + int_0^t e(s) Q e(s)^T ds, check by a fine trapezoid
            let steps = 4000;
            let h = t / steps as f64;
            let q = Matrix2::new(0.0, 0.0, 0.0, 2.0 * gamma);
            let mut integral = Matrix2::zeros();
            for k in 0..=steps {
                let es = mat_exp(j, k as f64 * h);
                let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
                integral += es * q * es.transpose() * (w * h);
            }
            let cov = e * g0.cov * e.transpose() + integral;
            assert!((g.cov - cov).abs().max() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn symmetric_data_keep_zero_mean() {
        let p = quad(1.0, 1.0, 0.5, 0.0);
        let g0 = GaussianState::diagonal(0.0, 0.0, 2.0, 0.5).unwrap();
        for (_, g) in moment_flow(&g0, &p, 5.0, 5).unwrap() {
            assert_eq!(g.mean, Vector2::zeros());
        }
    }

    #[test]
    fn bures_examples() {
        let g = GaussianState::diagonal(0.3, -1.0, 2.0, 0.5).unwrap();
        assert_abs_diff_eq!(bures_w2(&g, &g), 0.0, epsilon = 1e-7);
        let shifted = GaussianState::new(g.mean + Vector2::new(3.0, 4.0), g.cov).unwrap();
        assert_abs_diff_eq!(bures_w2(&g, &shifted), 5.0, epsilon = 1e-7);
        let g1 = GaussianState::diagonal(0.0, 0.0, 1.0, 1.0).unwrap();
        let g2 = GaussianState::diagonal(0.0, 0.0, 4.0, 1.0).unwrap();
        assert_abs_diff_eq!(bures_w2(&g1, &g2), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn entropy_of_standard_gaussian() {
        assert_abs_diff_eq!(GaussianState::standard().entropy(), -2.837_877_066_409_345_5, epsilon = 1e-15);
    }

    #[test]
    fn zero_kernel_free_energy_is_relative_entropy() {
        let p = quad(1.0, 1.0, 0.0, 0.0);
        let gs = [
            GaussianState::diagonal(1.0, -2.0, 0.5, 3.0).unwrap(),
            GaussianState::new(Vector2::new(0.2, 0.1), Matrix2::new(1.5, 0.4, 0.4, 0.9)).unwrap(),
        ];
        let std = GaussianState::standard();
        let c = free_energy_quadratic(&gs[0], &p).unwrap() - relative_entropy(&gs[0], &std);
        for g in &gs {
            let f = free_energy_quadratic(g, &p).unwrap();
            assert_abs_diff_eq!(f - relative_entropy(g, &std), c, epsilon = 1e-12);
            for n in [2, 7, 100] {
                assert_abs_diff_eq!(free_energy_particle_limit(g, &p, n).unwrap(), relative_entropy(g, &std), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn particle_limit_matches_dense_route() {
        let p = quad(1.0, 0.7, 0.5, -1.2);
        let g = GaussianState::new(Vector2::new(0.4, -0.3), Matrix2::new(0.8, 0.2, 0.2, 1.3)).unwrap();
        for n in [2, 3, 5, 12] {
            let closed = free_energy_particle_limit(&g, &p, n).unwrap();
            assert_abs_diff_eq!(closed, dense_kl_per_particle(&g, &p, n), epsilon = 1e-10);
        }
    }

    #[test]
    fn particle_limit_differences_match_free_energy() {
        let p = quad(1.0, 1.0, 0.5, 1.0);
        let g1 = GaussianState::diagonal(1.0, 0.5, 0.6, 1.4).unwrap();
        let g2 = GaussianState::new(Vector2::new(-2.0, 0.0), Matrix2::new(2.0, -0.3, -0.3, 0.7)).unwrap();
        let df = free_energy_quadratic(&g1, &p).unwrap() - free_energy_quadratic(&g2, &p).unwrap();
        let de = classical_free_energy_quadratic(&g1, &p).unwrap() - classical_free_energy_quadratic(&g2, &p).unwrap();
        for k in 1..=10 {
            let n = 1usize << k;
            let dn = free_energy_particle_limit(&g1, &p, n).unwrap() - free_energy_particle_limit(&g2, &p, n).unwrap();
            assert_abs_diff_eq!(dn, df, epsilon = 1e-12);
            assert!((dn - de).abs() > 0.5, "the classical free energy is not the limit when b != 0");
        }
    }

    #[test]
    fn gibbs_structure() {
        let p = quad(1.0, 1.0, 0.8, 0.6);
        let n = 9;
        let gibbs = gibbs_measure_n(&p, n).unwrap();
        let ones = DVector::<f64>::from_element(n, 1.0);
        let px = gibbs.precision.view((0, 0), (n, n)).into_owned();
        assert!((&px * &ones - &ones).abs().max() < 1e-14);
        let mx = gibbs.mean.rows(0, n).into_owned();
        assert!((&px * &mx + &ones * 0.6).abs().max() < 1e-14);
        let eig = px.clone().symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(ev[0], 1.0, epsilon = 1e-12);
        for e in &ev[1..] {
            assert_abs_diff_eq!(*e, gibbs.transverse_eigenvalue(&p), epsilon = 1e-12);
        }
        let inv = px.try_inverse().unwrap();
        assert_abs_diff_eq!(inv[(0, 0)], gibbs.marginal_var_x(&p), epsilon = 1e-12);
        let zero_a = gibbs_measure_n(&quad(1.0, 1.0, 0.0, 0.6), 4).unwrap();
        assert_eq!(zero_a.precision, DMatrix::identity(8, 8));
    }

    #[test]
    fn gibbs_marginal_approaches_stationary() {
        let p = quad(1.0, 1.0, 0.5, 1.0);
        let target = stationary_gaussian(&p).unwrap().cov[(0, 0)];
        for n in [10, 100, 1000, 10000] {
            let gibbs = GibbsN { n, precision: DMatrix::zeros(0, 0), mean: DVector::zeros(0) };
            let err = (gibbs.marginal_var_x(&p) - target).abs();
            assert!(err <= 2.0 / n as f64, "N={n}: {err}");
        }
    }

    #[test]
    fn free_energy_rates_match_finite_differences() {
        let p = quad(0.8, 1.0, 0.5, 1.0);
        let g0 = GaussianState::new(Vector2::new(1.0, -0.625), Matrix2::new(0.5, 0.0, 0.0, 1.0)).unwrap();
        let h = 1e-5;
        let traj = moment_flow_at(&g0, &p, &[0.0, h]).unwrap();
        let fd_f = (free_energy_quadratic(&traj[1], &p).unwrap() - free_energy_quadratic(&traj[0], &p).unwrap()) / h;
        let fd_e = (classical_free_energy_quadratic(&traj[1], &p).unwrap()
            - classical_free_energy_quadratic(&traj[0], &p).unwrap())
            / h;
        let (df, de) = free_energy_rates(&g0, &p).unwrap();
        assert_abs_diff_eq!(df, fd_f, epsilon = 1e-4);
        assert_abs_diff_eq!(de, fd_e, epsilon = 1e-4);
        assert!(de > 0.0, "this start is a witness for the classical free energy increasing");
    }

    fn spd() -> impl Strategy<Value = GaussianState> {
        (-3.0..3.0f64, -3.0..3.0f64, 0.1..3.0f64, 0.1..3.0f64, -0.9..0.9f64).prop_map(|(mx, mv, sx, sv, r)| {
            let c = r * (sx * sv).sqrt();
            GaussianState::new(Vector2::new(mx, mv), Matrix2::new(sx, c, c, sv)).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn free_energy_decreases_along_flow(g0 in spd(), gamma in 0.1..5.0f64, a in -0.2..2.0f64, b in -2.0..2.0f64) {
            let p = quad(gamma, 1.0, a, b);
            let traj = moment_flow(&g0, &p, 5.0, 50).unwrap();
            let mut last = f64::INFINITY;
            for (_, g) in traj {
                prop_assert!(g.cov.determinant() > 0.0);
                prop_assert!((g.cov[(0, 1)] - g.cov[(1, 0)]).abs() == 0.0);
                let f = free_energy_quadratic(&g, &p).unwrap();
                prop_assert!(f <= last + 1e-9);
                last = f;
                prop_assert!(free_energy_rates(&g, &p).unwrap().0 <= 1e-9);
            }
        }

        #[test]
        fn bures_metric_axioms(g1 in spd(), g2 in spd(), g3 in spd()) {
            let d12 = bures_w2(&g1, &g2);
            prop_assert!(d12 >= 0.0);
            prop_assert!((d12 - bures_w2(&g2, &g1)).abs() < 1e-8);
            prop_assert!(bures_w2(&g1, &g3) <= d12 + bures_w2(&g2, &g3) + 1e-10);
        }
    }
}
