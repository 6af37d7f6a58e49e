//! Property tests for the structural invariants: linearity and monotonicity
//! claims that ought to hold for arbitrary inputs, not just the hand-picked
//! ones in the unit tests.

use fracsde::fbm::covariance_rh;
use fracsde::frac_ops::{rl_integral_left, Hurst};
use fracsde::grid::{holder_norm, Path, TimeGrid};
use proptest::prelude::*;

fn grid_and_samples(n: usize) -> impl Strategy<Value = (TimeGrid, Vec<f64>)> {
    prop::collection::vec(-5.0..5.0f64, n + 1)
        .prop_map(move |vals| (TimeGrid::new(1.0, n).unwrap(), vals))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Fractional integration is linear, and the weights are positive: a
    // nonnegative integrand yields a nonnegative integral.
    #[test]
    fn rl_integral_linear_and_positive(
        (grid, f) in grid_and_samples(48),
        (_, g) in grid_and_samples(48),
        a in -3.0..3.0f64,
        alpha in 0.1..1.9f64,
    ) {
        let lhs = rl_integral_left(
            &grid,
            &f.iter().zip(&g).map(|(x, y)| a * x + y).collect::<Vec<_>>(),
            alpha,
        ).unwrap();
        let fa = rl_integral_left(&grid, &f, alpha).unwrap();
        let ga = rl_integral_left(&grid, &g, alpha).unwrap();
        for k in 0..=48 {
            let want = a * fa[k] + ga[k];
            prop_assert!((lhs[k] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
        let pos: Vec<f64> = f.iter().map(|x| x.abs()).collect();
        let integ = rl_integral_left(&grid, &pos, alpha).unwrap();
        prop_assert!(integ.iter().all(|&v| v >= -1e-12));
    }

    // The Hölder seminorm only grows when pairs at distance <= 1 are weighted by
    // a larger exponent, and a refinement can only reveal larger ratios.
    #[test]
    fn holder_norm_monotonicity((grid, f) in grid_and_samples(32)) {
        let path = Path::from_values(grid, 1, f.clone()).unwrap();
        let lo = holder_norm(&path, 0.3).unwrap();
        let hi = holder_norm(&path, 0.9).unwrap();
        prop_assert!(hi >= lo - 1e-12);

        // refinement grid carrying the same function linearly interpolated
        let fine_grid = grid.refined();
        let mut fine = Vec::with_capacity(65);
        for k in 0..32 {
            fine.push(f[k]);
            fine.push(0.5 * (f[k] + f[k + 1]));
        }
        fine.push(f[32]);
        let fine_path = Path::from_values(fine_grid, 1, fine).unwrap();
        for lambda in [0.4, 0.8] {
            prop_assert!(
                holder_norm(&fine_path, lambda).unwrap()
                    >= holder_norm(&path, lambda).unwrap() - 1e-12
            );
        }
    }

    // Covariance function: symmetric, unit diagonal scaling, Cauchy-Schwarz.
    #[test]
    fn covariance_rh_structure(
        t in 0.01..2.0f64,
        s in 0.01..2.0f64,
        hval in 0.51..0.99f64,
    ) {
        let h = Hurst::new(hval).unwrap();
        let rts = covariance_rh(t, s, h);
        let rst = covariance_rh(s, t, h);
        prop_assert!((rts - rst).abs() <= 1e-12 * (1.0 + rts.abs()));
        let rtt = covariance_rh(t, t, h);
        let rss = covariance_rh(s, s, h);
        prop_assert!((rtt - t.powf(2.0 * hval)).abs() <= 1e-12 * (1.0 + rtt));
        prop_assert!(rts.abs() <= (rtt * rss).sqrt() + 1e-12);
    }

    // Grid geometry: strictly increasing nodes, exact endpoints, uniform spacing.
    #[test]
    fn grid_nodes_uniform(t in 0.1..10.0f64, n in 2usize..512) {
        let grid = TimeGrid::new(t, n).unwrap();
        let nodes = grid.nodes();
        prop_assert_eq!(nodes[0], 0.0);
        prop_assert_eq!(nodes[n], t);
        for k in 0..n {
            prop_assert!(nodes[k + 1] > nodes[k]);
            prop_assert!((nodes[k + 1] - nodes[k] - grid.dt()).abs() <= 1e-12 * t);
        }
    }
}
