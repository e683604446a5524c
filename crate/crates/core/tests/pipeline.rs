use vfp_core::functionals::{l1_distance, mean_field_free_energy, relative_entropy, w2_grid_with};
use vfp_core::gaussian::{free_energy_quadratic, moment_flow_at, stationary_gaussian, GaussianState};
use vfp_core::pde::{stationary_fixed_point, FixedPointOptions, GridConfig, PhaseGrid, VfpSolver};
use vfp_core::{InteractionKernel, ModelParams};

fn quadratic(lambda: f64) -> ModelParams {
    ModelParams::new(1.0, lambda, InteractionKernel::quadratic_linear(0.5, 1.0).unwrap()).unwrap()
}

fn grid_of(g: &GaussianState, cfg: &GridConfig) -> PhaseGrid {
    PhaseGrid::from_density(cfg, |x, v| g.density(x, v)).unwrap()
}

#[test]
fn grid_free_energy_matches_closed_form_along_the_flow() {
    let p = quadratic(0.5);
    let cfg = GridConfig::with_cells(96, 96);
    let g0 = GaussianState::diagonal(1.0, 0.5, 0.7, 1.3).unwrap();
    let mut grid = grid_of(&g0, &cfg);
    let mut solver = VfpSolver::new(&p, &cfg).unwrap();
    let times = [0.5, 1.0, 1.5];
    let exact = moment_flow_at(&g0, &p, &times).unwrap();
    let mut t = 0.0;
    for (&target, g) in times.iter().zip(&exact) {
        solver.advance(&mut grid, target - t).unwrap();
        t = target;
        let diff = mean_field_free_energy(&grid, &p).unwrap() - free_energy_quadratic(g, &p).unwrap();
        assert!(diff.abs() < 2e-3, "t={t}: {diff}");
    }
}

#[test]
fn fixed_point_agrees_with_stationary_gaussian() {
    let p = quadratic(0.3);
    let cfg = GridConfig::with_cells(64, 64);
    let (grid, report) = stationary_fixed_point(&p, &cfg, &FixedPointOptions::default()).unwrap();
    assert!(report.residual <= 1e-10);
    let exact = grid_of(&stationary_gaussian(&p).unwrap(), &cfg);
    assert!(l1_distance(&grid, &exact).unwrap() < 1e-3);
    assert!(relative_entropy(&grid, &exact).unwrap() < 1e-6);
    assert!(w2_grid_with(&grid, &exact, 512, 3).unwrap() < 0.05);
}
