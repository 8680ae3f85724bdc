use lbtr::geometry::{dot, Point};
use lbtr::probes::*;
use lbtr::transport::*;

fn remainder_sweep(sign: f64) -> Vec<f64> {
    let grid = SpaceTimeGrid::desk();
    let kernel = Kernel::full(&grid, |x: Point, th, thp| 0.5 * (1.0 + 0.5 * dot(th, thp)) * (1.0 + x[0]));
    let coeff = CoefficientField::new(grid.domain, Absorption::Zero, kernel);
    let centre = if sign > 0.0 { [-1.0, 0.0] } else { [1.0, 0.0] };
    let spatial = Spatial::Bump(BumpProfile::new(centre, 0.125));
    lambda_sweep(grid.domain.diameter())
        .into_iter()
        .map(|l| {
            let p = GoProbe::new(sign, l, spatial, DirectionWeight::Uniform).unwrap();
            go_remainder(&p, &coeff, &grid, false).unwrap().norm
        })
        .collect()
}

#[test]
fn test_remainder_decays_with_frequency() {
    for sign in [1.0, -1.0] {
        let n = remainder_sweep(sign);
        println!("sign {sign}: {n:?}");
        for w in n.windows(2) {
            assert!(w[1] <= 1.2 * w[0], "{n:?}");
        }
        assert!(n[3] <= 0.5 * n[0], "{n:?}");
    }
}

mod props {
    use lbtr::probes::{poisson_mollifier, BumpProfile};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

        #[test]
        fn test_mollifier_normalized_and_bounded(h in 0.01..0.97f64, w in 0.0..std::f64::consts::TAU) {
            let omega = [w.cos(), w.sin()];
            let n = 2048;
            let mut acc = 0.0;
            for j in 0..n {
                let a = 2.0 * PI * j as f64 / n as f64;
                let v = poisson_mollifier(h, omega, [a.cos(), a.sin()]).unwrap();
                prop_assert!(v >= 0.0 && v <= 2.0 / (2.0 * PI * (1.0 - h)) * (1.0 + 1e-12));
                acc += v * 2.0 * PI / n as f64;
            }
            prop_assert!((acc - 1.0).abs() < 1e-8, "{}", acc);
        }

        #[test]
        fn test_bump_vanishes_outside_support(cx in -1.5..1.5f64, cy in -1.5..1.5f64, w in 0.05..0.5f64, d in 1.0..3.0f64, a in 0.0..std::f64::consts::TAU) {
            let b = BumpProfile::new([cx, cy], w);
            let y = [cx + d * w * a.cos(), cy + d * w * a.sin()];
            prop_assert_eq!(b.eval(y), 0.0);
            prop_assert!(b.eval([cx, cy]) > 0.0);
        }
    }
}
