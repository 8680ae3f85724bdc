use lbtr::geometry::{dot, DomainSpec, Point};
use lbtr::transport::*;
use proptest::prelude::*;

fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (1.0 - s * s).powi(4)
    } else {
        0.0
    }
}

fn coeff(grid: &SpaceTimeGrid, a: f64, k: f64) -> CoefficientField {
    let absorption = Absorption::func(move |t, x: Point| a * (1.0 + 0.5 * (3.0 * t).sin() * x[0]));
    let kernel = Kernel::full(grid, move |x, th, thp| k * (1.0 + 0.5 * dot(th, thp) + 0.3 * th[1] + x[1]));
    CoefficientField::new(grid.domain, absorption, kernel)
}

/// ∫∫ u·w over Q_T by trapezoid in time.
fn pairing(grid: &SpaceTimeGrid, u: &KineticField, w: &dyn Fn(f64, Point, usize) -> C64) -> C64 {
    let nd = grid.ndir();
    let mut acc = C64::new(0.0, 0.0);
    for (n, s) in u.slices.iter().enumerate() {
        let t = grid.time(n);
        for node in 0..grid.nodes() {
            if !grid.inside(node) {
                continue;
            }
            let x = grid.node_point(node);
            for m in 0..nd {
                acc += s.get(node, m) * w(t, x, m) * (grid.time_weight(n) * grid.cell_area() * grid.quad.weights[m]);
            }
        }
    }
    acc
}

fn green_mismatch(grid: &SpaceTimeGrid) -> f64 {
    let c = coeff(grid, 0.6, 0.15);
    let dirs = grid.quad.dirs.clone();
    let v = move |t: f64, x: Point, m: usize| {
        let r = ((x[0] - 0.1).powi(2) + x[1].powi(2)).sqrt() / 0.3;
        C64::new(bump((t - 0.9) / 0.6) * bump(r) * (1.0 + 0.5 * dirs[m][0]), 0.0)
    };
    let dirs = grid.quad.dirs.clone();
    let g = move |t: f64, x: Point, m: usize| {
        let r = ((x[0] + 0.05).powi(2) + (x[1] - 0.1).powi(2)).sqrt() / 0.3;
        C64::new(bump((t - 1.6) / 0.6) * bump(r) * (1.0 - 0.4 * dirs[m][1]), 0.0)
    };
    let opts = SolverOptions { record_field: true, ..Default::default() };
    let vs = FnSource(&v);
    let gs = FnSource(&g);
    let u = solve_forward(grid, Forward::new(&c).source(&vs).options(opts)).unwrap().field.unwrap();
    let w = solve_adjoint(grid, Adjoint::new(&c).source(&gs).options(opts)).unwrap().field.unwrap();
    let lhs = pairing(grid, &w, &v);
    let rhs = pairing(grid, &u, &g);
    (lhs - rhs).norm() / rhs.norm()
}

#[test]
fn test_green_identity_first_order() {
    let g0 = SpaceTimeGrid::new(DomainSpec::desk(), 32, 16, 16).unwrap();
    let g1 = g0.refined().unwrap();
    let g2 = g1.refined().unwrap();
    let e: Vec<f64> = [&g0, &g1, &g2].iter().map(|g| green_mismatch(g)).collect();
    let order = ((e[0] / e[2]).log2()) / 2.0;
    println!("green mismatch {e:?} order {order}");
    assert!(order >= 1.0, "{e:?}");
}

fn smooth_inflow(grid: &SpaceTimeGrid) -> impl Fn(f64, Point, usize) -> C64 + Sync + '_ {
    move |t: f64, x: Point, m: usize| {
        let cs = dot(grid.domain.normal(x), grid.quad.dirs[m]);
        let s = (std::f64::consts::PI * t / grid.domain.horizon).sin();
        C64::new(s.powi(4) * cs.powi(4) * (1.0 + 0.5 * x[0]), 0.0)
    }
}

/// Collision series u = Σ_j u_j with u_0 free transport of the inflow and
/// u_{j+1}(t,x,θ) = ∫_0^{min(t, s_b)} L_k[u_j](t−s, x−sθ, θ) ds, by nested
/// composite midpoint quadrature.
struct Series<'a> {
    grid: &'a SpaceTimeGrid,
    k: f64,
    f: &'a dyn Fn(f64, Point, usize) -> C64,
    steps: usize,
}

impl Series<'_> {
    fn term(&self, j: usize, t: f64, x: Point, m: usize) -> f64 {
        let th = self.grid.quad.dirs[m];
        let sb = self.grid.domain.backward_exit(x, th);
        if j == 0 {
            return if sb <= t { (self.f)(t - sb, lbtr::geometry::axpy(-sb, th, x), m).re } else { 0.0 };
        }
        let len = sb.min(t);
        let ds = len / self.steps as f64;
        let mut acc = 0.0;
        for q in 0..self.steps {
            let s = (q as f64 + 0.5) * ds;
            let y = lbtr::geometry::axpy(-s, th, x);
            let mut l = 0.0;
            for mp in 0..self.grid.ndir() {
                l += self.grid.quad.weights[mp] * self.k * self.term(j - 1, t - s, y, mp);
            }
            acc += l * ds;
        }
        acc
    }
}

#[test]
fn test_small_scattering_matches_collision_series() {
    let grid = SpaceTimeGrid::new(DomainSpec::desk(), 64, 48, 8).unwrap();
    let k0 = 0.25 / (2.0 * std::f64::consts::PI * grid.domain.horizon);
    let f = smooth_inflow(&grid);
    let c = CoefficientField::new(grid.domain, Absorption::Zero, Kernel::full(&grid, |_, _, _| k0));
    let free = CoefficientField::zero(grid.domain);
    let opts = SolverOptions { record_field: true, ..Default::default() };
    let u = solve_forward(&grid, Forward::new(&c).inflow(Inflow::Func(&f)).options(opts)).unwrap().field.unwrap();
    let u_free = solve_forward(&grid, Forward::new(&free).inflow(Inflow::Func(&f)).options(opts)).unwrap().field.unwrap();
    let series = Series { grid: &grid, k: k0, f: &f, steps: 12 };
    let (mut num, mut den, mut snum, mut sden) = (0.0, 0.0, 0.0, 0.0);
    for n in [32, 48, 64] {
        let t = grid.time(n);
        for node in (0..grid.nodes()).step_by(97) {
            if !grid.inside(node) {
                continue;
            }
            let x = grid.node_point(node);
            for m in 0..grid.ndir() {
                let s1 = series.term(1, t, x, m) + series.term(2, t, x, m);
                let exact = series.term(0, t, x, m) + s1;
                let got = u.slices[n].get(node, m).re;
                num += (got - exact).powi(2);
                den += exact.powi(2);
                let scattered = got - u_free.slices[n].get(node, m).re;
                snum += (scattered - s1).powi(2);
                sden += s1.powi(2);
            }
        }
    }
    let (rel, srel) = ((num / den).sqrt(), (snum / sden).sqrt());
    println!("collision series: total {rel:.4}, scattered part {srel:.4}");
    assert!(rel < 0.05);
    assert!(srel < 0.15);
}

#[test]
fn test_adjoint_is_reversed_forward_for_symmetric_coefficients() {
    let grid = SpaceTimeGrid::new(DomainSpec::desk(), 40, 24, 16).unwrap();
    let horizon = grid.domain.horizon;
    let a = Absorption::func(move |t, x: Point| 0.5 + 0.3 * (std::f64::consts::PI * t / horizon).sin() * (1.0 + x[0] * x[0]));
    let kernel = Kernel::full(&grid, |x, th, thp| 0.05 * (1.0 + x[0] * x[0]) * (1.0 + dot(th, thp)));
    let c = CoefficientField::new(grid.domain, a, kernel);
    let f = smooth_inflow(&grid);
    let opp: Vec<usize> = (0..grid.ndir()).map(|m| grid.quad.opposite(m).unwrap()).collect();
    let h = |t: f64, x: Point, m: usize| f(horizon - t, x, opp[m]);
    let opts = SolverOptions { record_field: true, ..Default::default() };
    let u = solve_forward(&grid, Forward::new(&c).inflow(Inflow::Func(&f)).options(opts)).unwrap().field.unwrap();
    let w = solve_adjoint(&grid, Adjoint::new(&c).outflow(Inflow::Func(&h)).options(opts)).unwrap().field.unwrap();
    let mut err = 0.0f64;
    let mut scale = 0.0f64;
    for n in 0..=grid.nt {
        for node in 0..grid.nodes() {
            for (m, &om) in opp.iter().enumerate() {
                let a = w.slices[grid.nt - n].get(node, om);
                let b = u.slices[n].get(node, m);
                err = err.max((a - b).norm());
                scale = scale.max(b.norm());
            }
        }
    }
    assert!(err <= 1e-10 * scale, "{err} vs {scale}");
}

#[test]
fn test_linear_scheme_preserves_positivity() {
    let grid = SpaceTimeGrid::new(DomainSpec::desk(), 40, 24, 16).unwrap();
    let kernel = Kernel::full(&grid, |x, th, thp| 0.2 * (1.0 + dot(th, thp)) * (1.0 + x[1]));
    let c = CoefficientField::new(grid.domain, Absorption::func(|t, x: Point| 0.8 + 0.5 * (3.0 * t).sin() * x[0]), kernel);
    let f = smooth_inflow(&grid);
    let u0 = lbtr::transport::Slice::from_fn(&grid, |x, m| C64::new(bump(4.0 * x[0]) * (1.0 + grid.quad.dirs[m][1]), 0.0));
    let opts = SolverOptions { interpolation: Interpolation::Linear, ..Default::default() };
    let mut min = f64::INFINITY;
    solve_forward_observed(&grid, Forward::new(&c).initial(&u0).inflow(Inflow::Func(&f)).options(opts), &mut |v| {
        for node in 0..grid.nodes() {
            for m in 0..grid.ndir() {
                min = min.min(v.get(node, m).re);
            }
        }
    })
    .unwrap();
    assert!(min >= -1e-12, "{min}");
}

#[test]
fn test_energy_zero_data() {
    let grid = SpaceTimeGrid::new(DomainSpec::desk(), 16, 16, 8).unwrap();
    let c = CoefficientField::zero(grid.domain);
    let r = energy_check(&grid, Forward::new(&c), 2.0).unwrap();
    assert_eq!(r.lhs, 0.0);
    assert_eq!(r.rhs, 0.0);
    assert!(r.holds);
}

#[test]
fn test_energy_free_pulse_has_slack() {
    let grid = SpaceTimeGrid::new(DomainSpec::desk(), 32, 24, 16).unwrap();
    let c = CoefficientField::zero(grid.domain);
    let f = smooth_inflow(&grid);
    let r = energy_check(&grid, Forward::new(&c).inflow(Inflow::Func(&f)), 1.0).unwrap();
    assert!(r.holds && r.slack > 0.0, "{r:?}");
}

fn splitmix(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed;
    move || {
        s = s.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn test_energy_estimate_random_coefficients(seed in any::<u64>()) {
        let grid = SpaceTimeGrid::new(DomainSpec::desk(), 24, 16, 8).unwrap();
        let mut rng = splitmix(seed);
        let (a0, a1, k0, k1) = (rng(), rng() - 0.5, 0.2 * rng(), 0.1 * rng());
        let absorption = Absorption::func(move |t, x: Point| a0 + a1 * (2.0 * t + x[0]).sin());
        let kernel = Kernel::full(&grid, move |x, th, thp| k0 + k1 * (1.0 + dot(th, thp)) * (1.0 + x[1]));
        let c = CoefficientField::new(grid.domain, absorption, kernel);
        let f = smooth_inflow(&grid);
        let u0 = lbtr::transport::Slice::from_fn(&grid, |x, _| C64::new(rng_free(x), 0.0));
        let p = 1.0 + 2.0 * ((seed % 7) as f64 / 7.0);
        let r = energy_check(&grid, Forward::new(&c).initial(&u0).inflow(Inflow::Func(&f)), p).unwrap();
        prop_assert!(r.holds, "{:?}", r);
    }
}

fn rng_free(x: Point) -> f64 {
    bump(3.0 * (x[0] * x[0] + x[1] * x[1]).sqrt())
}
