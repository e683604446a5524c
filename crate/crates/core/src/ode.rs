//! Adaptive Dormand-Prince 5(4) integrator for small smooth systems.

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to `t1`, keeping the local error
/// estimate of every accepted step below `tol * (1 + |y|_inf)`.
pub(crate) fn dopri5<F>(mut f: F, t0: f64, t1: f64, y0: &[f64], tol: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut y = y0.to_vec();
    if t1 == t0 {
        return Ok(y);
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut h = (span * 1e-3).min(0.01);
    let mut t = t0;
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y5 = vec![0.0; n];
    let mut steps = 0usize;
    while dir * (t1 - t) > 0.0 {
        steps += 1;
        if steps > 10_000_000 || h < 1e-14 * span {
            return Err(Error::NonConvergence { iterations: steps, residual: h });
        }
        let h_step = h.min(dir * (t1 - t));
        for s in 0..7 {
            for i in 0..n {
                tmp[i] = y[i] + dir * h_step * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
            }
            f(t + dir * C[s] * h_step, &tmp, &mut k[s]);
        }
        let mut err = 0.0f64;
        for i in 0..n {
            let d5: f64 = (0..7).map(|s| B5[s] * k[s][i]).sum();
            let d4: f64 = (0..7).map(|s| B4[s] * k[s][i]).sum();
            y5[i] = y[i] + dir * h_step * d5;
            err = err.max((h_step * (d5 - d4)).abs() / (1.0 + y[i].abs().max(y5[i].abs())));
        }
        if !err.is_finite() {
            return Err(Error::NonConvergence { iterations: steps, residual: err });
        }
        if err <= tol {
            t = if h_step == dir * (t1 - t) { t1 } else { t + dir * h_step };
            y.copy_from_slice(&y5);
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * (tol / err).powf(0.2)).clamp(0.2, 5.0) };
        h = h_step * factor;
    }
    Ok(y)
}
