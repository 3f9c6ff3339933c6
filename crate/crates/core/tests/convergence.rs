use qsmp::adjoint::gamma_process;
use qsmp::bmo::terminal_mean;
use qsmp::bsde::{solve_quadratic_bsde, BsdeOptions};
use qsmp::families;
use qsmp::paths::{expansion_rate_check, simulate_brownian, solve_forward_sde, Control, TimeGrid};
use qsmp::quadrature::gauss_hermite_expectation;
use qsmp::smp::solve_candidate;
use qsmp::stats::fit_log2_slope;

#[test]
fn euler_strong_order_on_geometric_brownian_motion() {
    let (a, s) = (0.05, 0.4);
    let spec = families::geometric(a, s);
    let mut dts = Vec::new();
    let mut errors = Vec::new();
    for steps in [8usize, 16, 32, 64, 128] {
        let grid = TimeGrid::new(steps, 1.0).unwrap();
        let noise = simulate_brownian(&grid, 1, 20_000, 5, 0).unwrap();
        let fwd = solve_forward_sde(&spec, &grid, &noise, &Control::constant(vec![0.0])).unwrap();
        let err: f64 = (0..noise.paths)
            .map(|p| {
                let exact = ((a - 0.5 * s * s) + s * noise.terminal(p, 0)).exp();
                (fwd.state(p, steps)[0] - exact).abs()
            })
            .sum::<f64>()
            / noise.paths as f64;
        dts.push(grid.dt);
        errors.push(err);
    }
    let fit = fit_log2_slope(&dts, &errors).unwrap();
    assert!((0.4..=0.6).contains(&fit.slope), "strong order {}", fit.slope);
}

#[test]
fn forward_expansion_rates_on_geometric_brownian_motion() {
    let spec = families::geometric(0.05, 0.4);
    let grid = TimeGrid::new(50, 1.0).unwrap();
    let noise = simulate_brownian(&grid, 1, 20_000, 9, 0).unwrap();
    let r = expansion_rate_check(
        &spec,
        &grid,
        &noise,
        &Control::constant(vec![0.0]),
        &Control::constant(vec![0.5]),
        &qsmp::smp::DEFAULT_EPSILONS,
    )
    .unwrap();
    let first = r.first_order_fit.slope().unwrap();
    let rem = r.remainder_fit.slope().unwrap();
    assert!((1.9..=2.1).contains(&first), "first-order slope {first}");
    assert!(rem > 3.5, "remainder slope {rem}");
}

#[test]
fn gamma_has_unit_mean_when_the_generator_ignores_y() {
    let spec = families::exponential_utility(1.0, 0.0, 1.0);
    let grid = TimeGrid::new(50, 1.0).unwrap();
    let noise = simulate_brownian(&grid, 1, 100_000, 13, 0).unwrap();
    let fwd = solve_forward_sde(&spec, &grid, &noise, &Control::constant(vec![0.0])).unwrap();
    let bwd = solve_quadratic_bsde(&spec, &grid, &noise, &fwd, &BsdeOptions::with_degree(5)).unwrap();
    let gamma = gamma_process(&spec, &grid, &noise, &fwd, &bwd).unwrap();
    let e = terminal_mean(&gamma.values, grid.steps);
    assert!((e.value - 1.0).abs() <= 3.0 * e.std_error, "E[Gamma_T] = {} +- {}", e.value, e.std_error);
}

#[test]
fn adjoint_at_time_zero_is_the_sensitivity_to_the_initial_state() {
    // Y_0(x) = log E[exp(tanh(x + W_1))], so p_0 = E[e^{tanh W} sech^2 W] / E[e^{tanh W}]
    let num = gauss_hermite_expectation(200, |w| w.tanh().exp() / w.cosh().powi(2)).unwrap();
    let den = gauss_hermite_expectation(200, |w| w.tanh().exp()).unwrap();
    let oracle = num / den;
    let spec = families::exponential_utility(1.0, 0.0, 1.0);
    let grid = TimeGrid::new(50, 1.0).unwrap();
    let noise = simulate_brownian(&grid, 1, 100_000, 31, 0).unwrap();
    let c = solve_candidate(&spec, &grid, &noise, &Control::constant(vec![0.0]), &BsdeOptions::with_degree(5)).unwrap();
    let p0: f64 = (0..noise.paths).map(|p| c.adjoint.p_at(p, 0)[0]).sum::<f64>() / noise.paths as f64;
    assert!((p0 - oracle).abs() < 0.01, "p_0 = {p0}, oracle {oracle}");
}
