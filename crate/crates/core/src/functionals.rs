//! Scalar functionals of grid densities and point clouds.
//!
//! Grid values are cell averages. Log-based functionals skip cells with
//! `f < MASK`, and their finite-difference terms only use cells whose whole
//! stencil is unmasked. Where the quantity involves `ln f`, a second-order
//! correction turns cell averages into point values so that smooth densities
//! are integrated to `O(dx^4 + dv^4)`.
//!
//! The classical free energy uses the convention
//! `E(f) = int f ln f + int (x^2 + v^2)/2 f + (lambda/2) int int K(x - y) f f`
//! (see [`crate::gaussian`]).

use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pde::{maxwellian_cells, potential, simpson_cells, KernelTables, PhaseGrid, MASK};

/// Largest cloud accepted by [`w2_empirical`].
pub const MAX_W2_SAMPLES: usize = 4096;

/// Sample count used by [`w2_grid`].
pub const W2_GRID_SAMPLES: usize = 2048;

/// `f_hat = exp(-x^2/2 - lambda (K * rho)(x) - v^2/2) / Z` as cell averages on the grid of `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEquilibrium {
    pub grid: PhaseGrid,
    pub z: f64,
    /// Position factor (cell averages of `exp(-H)`, unnormalized).
    x_part: Vec<f64>,
    /// Velocity factor (cell averages of `exp(-v^2/2)`).
    v_part: Vec<f64>,
}

fn check_same_shape(f: &PhaseGrid, g: &PhaseGrid) -> Result<()> {
    if !f.same_shape(g) {
        return Err(Error::Contract("densities live on different grids".into()));
    }
    Ok(())
}

/// `(sum (D_x f)^2 / f, sum (D_v f)^2 / f) * dx dv` with central differences on
/// cells whose three-point stencil is unmasked.
fn squared_gradients(grid: &PhaseGrid) -> (f64, f64) {
    let (nx, nv, dx, dv) = (grid.nx, grid.nv, grid.dx(), grid.dv());
    let (mut sx, mut sv) = (0.0, 0.0);
    for i in 0..nx {
        for j in 0..nv {
            let f = grid.get(i, j);
            if f < MASK {
                continue;
            }
            if i > 0 && i + 1 < nx {
                let (l, r) = (grid.get(i - 1, j), grid.get(i + 1, j));
                if l >= MASK && r >= MASK {
                    sx += (r - l).powi(2) / (4.0 * dx * dx * f);
                }
            }
            if j > 0 && j + 1 < nv {
                let (d, u) = (grid.get(i, j - 1), grid.get(i, j + 1));
                if d >= MASK && u >= MASK {
                    sv += (u - d).powi(2) / (4.0 * dv * dv * f);
                }
            }
        }
    }
    (sx * dx * dv, sv * dx * dv)
}

/// `int f ln f`: the masked cell sum plus the `(dx^2 I_x + dv^2 I_v)/24` correction
/// for cell averaging.
pub fn entropy(grid: &PhaseGrid) -> f64 {
    let cell = grid.dx() * grid.dv();
    let raw: f64 = grid.data.iter().filter(|f| **f >= MASK).map(|f| f * f.ln()).sum::<f64>() * cell;
    let (ix, iv) = squared_gradients(grid);
    raw + (grid.dx().powi(2) * ix + grid.dv().powi(2) * iv) / 24.0
}

/// Normalized position-cell masses.
fn marginal_weights(grid: &PhaseGrid) -> Vec<f64> {
    let cell = grid.dx() * grid.dv();
    let w: Vec<f64> = grid.data.chunks(grid.nv).map(|row| row.iter().sum::<f64>() * cell).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// `int (x^2 + v^2)/2 f` from Sheppard-corrected moments.
fn confinement(grid: &PhaseGrid) -> f64 {
    let [mx, mv, sxx, _, svv] = grid.moments();
    0.5 * (sxx + mx * mx + svv + mv * mv)
}

/// Classical free energy `E(f)`.
pub fn classical_free_energy(grid: &PhaseGrid, params: &ModelParams) -> f64 {
    let mut e = entropy(grid) + confinement(grid);
    if params.lambda != 0.0 {
        let w = marginal_weights(grid);
        let tables = KernelTables::new(params, grid.nx, grid.dx());
        let conv = tables.at_centers(&w);
        let pair: f64 = w.iter().zip(&conv).map(|(a, b)| a * b).sum();
        e += 0.5 * params.lambda * pair;
    }
    e
}

/// Mean-field free energy `F(f) = E(f) + lambda b m_x` for the quadratic kernel
/// `a x^2 + b x`, written as `entropy + confinement + lambda a var_x + lambda b m_x`.
pub fn mean_field_free_energy(grid: &PhaseGrid, params: &ModelParams) -> Result<f64> {
    let (a, b) = params
        .kernel
        .quadratic_coefficients()
        .ok_or_else(|| Error::Contract("the mean-field free energy is only available for quadratic_linear".into()))?;
    let [mx, _, sxx, _, _] = grid.moments();
    Ok(entropy(grid) + confinement(grid) + params.lambda * (a * sxx + b * mx))
}

/// Local equilibrium `f_hat` of `grid`: Simpson cell averages of the unnormalized
/// Gibbs factor, divided by their grid integral `Z`.
pub fn local_equilibrium(grid: &PhaseGrid, params: &ModelParams) -> LocalEquilibrium {
    let (nx, nv, dx, dv) = (grid.nx, grid.nv, grid.dx(), grid.dv());
    let w = marginal_weights(grid);
    let tables = KernelTables::new(params, nx, dx);
    let (hc, hf) = potential(params, &tables, grid.lx, &w);
    let ec: Vec<f64> = hc.iter().map(|h| (-h).exp()).collect();
    let ef: Vec<f64> = hf.iter().map(|h| (-h).exp()).collect();
    let x_part = simpson_cells(&ec, &ef);
    let v_part = maxwellian_cells(nv, grid.lv);
    let z = x_part.iter().sum::<f64>() * v_part.iter().sum::<f64>() * dx * dv;
    let mut eq = grid.clone();
    for i in 0..nx {
        for j in 0..nv {
            eq.data[i * nv + j] = x_part[i] * v_part[j] / z;
        }
    }
    LocalEquilibrium { grid: eq, z, x_part, v_part }
}

/// `d^2 g / g` by the three-point stencil, `None` at the ends or when a neighbour vanishes.
fn curvature(g: &[f64], k: usize, h: f64) -> Option<f64> {
    if k == 0 || k + 1 == g.len() || g[k] <= 0.0 {
        return None;
    }
    Some((g[k - 1] - 2.0 * g[k] + g[k + 1]) / (h * h * g[k]))
}

/// Twisted Fisher information `int |A grad ln(f / f_hat)|^2 f`.
///
/// The log ratio is taken from point-value estimates of `f` and `f_hat`
/// (cell average minus `dx^2/24` curvature), then differentiated centrally.
pub fn fisher_information(grid: &PhaseGrid, params: &ModelParams, a: &Matrix2<f64>) -> f64 {
    let (nx, nv, dx, dv) = (grid.nx, grid.nv, grid.dx(), grid.dv());
    let eq = local_equilibrium(grid, params);
    let (cx2, cv2) = (dx * dx / 24.0, dv * dv / 24.0);
    let mut q = vec![f64::NAN; nx * nv];
    let cols: Vec<Vec<f64>> = (0..nv).map(|j| (0..nx).map(|i| grid.get(i, j)).collect()).collect();
    for i in 1..nx.saturating_sub(1) {
        let Some(eq_cx) = curvature(&eq.x_part, i, dx) else { continue };
        let row = &grid.data[i * nv..(i + 1) * nv];
        for j in 1..nv - 1 {
            let f = row[j];
            let stencil = [f, row[j - 1], row[j + 1], grid.get(i - 1, j), grid.get(i + 1, j)];
            if stencil.iter().any(|s| *s < MASK) {
                continue;
            }
            let (Some(cx), Some(cv), Some(eq_cv)) =
                (curvature(&cols[j], i, dx), curvature(row, j, dv), curvature(&eq.v_part, j, dv))
            else {
                continue;
            };
            let ratio = (f / (eq.x_part[i] * eq.v_part[j])).ln();
            q[i * nv + j] = ratio - cx2 * (cx - eq_cx) - cv2 * (cv - eq_cv);
        }
    }
    let mut total = 0.0;
    for i in 1..nx.saturating_sub(1) {
        for j in 1..nv - 1 {
            let (l, r, d, u) = (q[(i - 1) * nv + j], q[(i + 1) * nv + j], q[i * nv + j - 1], q[i * nv + j + 1]);
            if [l, r, d, u].iter().any(|x| x.is_nan()) {
                continue;
            }
            let g = nalgebra::Vector2::new((r - l) / (2.0 * dx), (u - d) / (2.0 * dv));
            total += (a * g).norm_squared() * grid.get(i, j);
        }
    }
    total * dx * dv
}

/// `H(f | g) = sum f ln(f / g) dx dv` over cells with `f >= MASK`.
pub fn relative_entropy(f: &PhaseGrid, g: &PhaseGrid) -> Result<f64> {
    check_same_shape(f, g)?;
    let mut acc = 0.0;
    for (a, b) in f.data.iter().zip(&g.data) {
        if *a < MASK {
            continue;
        }
        if !(*b > 0.0) {
            return Err(Error::Support { value: *a });
        }
        acc += a * (a / b).ln();
    }
    Ok(acc * f.dx() * f.dv())
}

/// `||f - g||_1` on a common grid.
pub fn l1_distance(f: &PhaseGrid, g: &PhaseGrid) -> Result<f64> {
    check_same_shape(f, g)?;
    Ok(f.data.iter().zip(&g.data).map(|(a, b)| (a - b).abs()).sum::<f64>() * f.dx() * f.dv())
}

/// Exact Wasserstein-2 distance between two uniform clouds of equal size:
/// the square root of the mean squared distance under an optimal assignment.
pub fn w2_empirical(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::Contract(format!("clouds have different sizes ({n} vs {})", b.len())));
    }
    if n > MAX_W2_SAMPLES {
        return Err(Error::Contract(format!("at most {MAX_W2_SAMPLES} points per cloud, got {n}")));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let sq = |p: &[f64; 2], q: &[f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| sq(p, q))).collect();
    let assign = assignment::solve(&cost, n);
    // summing sorted costs makes the result exactly symmetric in (a, b)
    let mut matched: Vec<f64> = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).collect();
    matched.sort_by(f64::total_cmp);
    let total: f64 = matched.iter().sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// `n` points drawn from the cell-average density: an inverse-CDF pick of the
/// cell followed by a uniform position inside it. The draws depend only on
/// `(seed, n)`, so two grids sampled with the same seed share their randomness.
pub fn sample_grid(grid: &PhaseGrid, n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    let mut cdf = Vec::with_capacity(grid.data.len());
    let mut acc = 0.0;
    for f in &grid.data {
        if !(*f >= 0.0) {
            return Err(Error::Contract("cannot sample a density with negative cells".into()));
        }
        acc += f;
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::Contract("cannot sample a density without mass".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, dv) = (grid.dx(), grid.dv());
    Ok((0..n)
        .map(|_| {
            let (u, jx, jv): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            let k = cdf.partition_point(|c| *c <= u * acc).min(cdf.len() - 1);
            let (i, j) = (k / grid.nv, k % grid.nv);
            [grid.x_center(i) + (jx - 0.5) * dx, grid.v_center(j) + (jv - 0.5) * dv]
        })
        .collect())
}

/// Monte Carlo estimate of the Wasserstein-2 distance between two grid densities:
/// [`W2_GRID_SAMPLES`] draws from each via [`sample_grid`] and an exact assignment.
/// The statistical error is of order `n^{-1/4}`.
pub fn w2_grid(f: &PhaseGrid, g: &PhaseGrid, seed: u64) -> Result<f64> {
    w2_grid_with(f, g, W2_GRID_SAMPLES, seed)
}

/// [`w2_grid`] with an explicit sample count.
pub fn w2_grid_with(f: &PhaseGrid, g: &PhaseGrid, n: usize, seed: u64) -> Result<f64> {
    check_same_shape(f, g)?;
    w2_empirical(&sample_grid(f, n, seed)?, &sample_grid(g, n, seed)?)
}
