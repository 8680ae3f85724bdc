//! Geometric-optics probes: bump profiles, oscillatory phases, attenuation
//! factors b_a, the Poisson direction mollifier, GO inflow data and the
//! remainder fields ψ_λ^±.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{axpy, dot, norm, sub, Point, Side, SphereQuadrature};
use crate::transport::{
    solve_adjoint_observed, solve_forward_observed, Adjoint, BoundaryFlux, Carrier, CoefficientField, Forward,
    KineticField, LpNorm, SolverOptions, Source, SpaceTimeGrid, C64,
};

/// Minimum lattice points per wavelength for fields carrying e^{iλ(t − x·θ)}
/// explicitly.
pub const POINTS_PER_WAVELENGTH: f64 = 8.0;

/// Radial polynomial bump amplitude·(1 − s²)⁴, s = |y − center|/width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    pub center: Point,
    pub width: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

impl BumpProfile {
    pub fn new(center: Point, width: f64) -> Self {
        BumpProfile { center, width, amplitude: 1.0 }
    }

    #[inline]
    pub fn eval(&self, y: Point) -> f64 {
        let d = sub(y, self.center);
        let s2 = dot(d, d) / (self.width * self.width);
        if s2 >= 1.0 {
            0.0
        } else {
            self.amplitude * (1.0 - s2).powi(4)
        }
    }

    /// ∫ φ dy = amplitude · π w² / 5.
    pub fn integral(&self) -> f64 {
        self.amplitude * PI * self.width * self.width / 5.0
    }

    /// ∫ φ² dy = amplitude² · π w² / 9.
    pub fn square_integral(&self) -> f64 {
        self.amplitude * self.amplitude * PI * self.width * self.width / 9.0
    }

    /// Whether the support lies in the annulus r/2 < |y| < T − r/2.
    pub fn in_annulus(&self, r: f64, horizon: f64) -> bool {
        let c = norm(self.center);
        c - self.width >= 0.5 * r && c + self.width <= horizon - 0.5 * r
    }
}

/// Spatial part of a probe amplitude φ(y, θ) = spatial(y)·direction(θ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Spatial {
    Bump(BumpProfile),
    /// Radial C² ramp: 0 for |y| ≤ inner, 1 for |y| ≥ inner + width.
    Ramp { inner: f64, width: f64 },
    Unit,
}

impl Spatial {
    #[inline]
    pub fn eval(&self, y: Point) -> f64 {
        match self {
            Spatial::Bump(b) => b.eval(y),
            Spatial::Ramp { inner, width } => {
                let s = ((norm(y) - inner) / width).clamp(0.0, 1.0);
                s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
            }
            Spatial::Unit => 1.0,
        }
    }
}

/// Angular part of a probe amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DirectionWeight {
    Uniform,
    /// ρ_h(ω, θ).
    Mollified { h: f64, omega: Point },
    /// Discrete delta at the quadrature direction nearest to ω.
    Point { omega: Point },
}

impl DirectionWeight {
    pub fn validate(&self) -> Result<()> {
        match self {
            DirectionWeight::Mollified { h, omega } if !(*h > 0.0 && *h < 1.0) || (norm(*omega) - 1.0).abs() > 1e-9 => {
                invalid(format!("mollifier needs h in (0,1) and |ω| = 1, got h = {h}, ω = {omega:?}"))
            }
            DirectionWeight::Point { omega } if (norm(*omega) - 1.0).abs() > 1e-9 => invalid("direction must be a unit vector"),
            _ => Ok(()),
        }
    }

    /// Weight at quadrature direction `m`.
    pub fn weight(&self, quad: &SphereQuadrature, m: usize) -> f64 {
        match *self {
            DirectionWeight::Uniform => 1.0,
            DirectionWeight::Mollified { h, omega } => poisson_kernel(h, omega, quad.dirs[m]),
            DirectionWeight::Point { omega } => {
                let best = (0..quad.len())
                    .max_by(|&i, &j| dot(quad.dirs[i], omega).total_cmp(&dot(quad.dirs[j], omega)))
                    .unwrap_or(0);
                if best == m {
                    1.0 / quad.weights[m]
                } else {
                    0.0
                }
            }
        }
    }
}

/// A GO probe φ_λ^±(t,x,θ) = φ(x − tθ, θ) e^{±iλ(t − x·θ)}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoProbe {
    /// +1 or −1.
    pub sign: f64,
    pub lambda: f64,
    pub spatial: Spatial,
    pub direction: DirectionWeight,
}

impl GoProbe {
    pub fn new(sign: f64, lambda: f64, spatial: Spatial, direction: DirectionWeight) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return invalid(format!("probe frequency must be positive, got {lambda}"));
        }
        if sign != 1.0 && sign != -1.0 {
            return invalid("probe sign must be ±1");
        }
        direction.validate()?;
        Ok(GoProbe { sign, lambda, spatial, direction })
    }

    pub fn carrier(&self) -> Carrier {
        Carrier::new(self.lambda, self.sign)
    }

    /// Amplitude φ(x − tθ_m, θ_m) without the phase.
    #[inline]
    pub fn envelope(&self, quad: &SphereQuadrature, t: f64, x: Point, m: usize) -> f64 {
        let dw = self.direction.weight(quad, m);
        if dw == 0.0 {
            return 0.0;
        }
        dw * self.spatial.eval(axpy(-t, quad.dirs[m], x))
    }

    /// φ_λ^±(t, x, θ_m).
    pub fn eval(&self, quad: &SphereQuadrature, t: f64, x: Point, m: usize) -> C64 {
        self.carrier().phase(t, x, quad.dirs[m]) * self.envelope(quad, t, x, m)
    }

    /// Fails when e^{iλ(t − x·θ)} is under-resolved on the grid.
    pub fn check_resolved(&self, grid: &SpaceTimeGrid) -> Result<()> {
        let max = max_resolved_lambda(grid);
        if self.lambda > max {
            return invalid(format!(
                "λ = {:.3} gives fewer than {POINTS_PER_WAVELENGTH} points per wavelength (limit λ ≤ {max:.3})",
                self.lambda
            ));
        }
        Ok(())
    }
}

/// Largest λ with at least eight lattice points per wavelength 2π/λ.
pub fn max_resolved_lambda(grid: &SpaceTimeGrid) -> f64 {
    2.0 * PI / (POINTS_PER_WAVELENGTH * grid.dx.max(grid.dt))
}

/// Default frequency sweep {4, 8, 16, 32}·2π/diam(Ω).
pub fn lambda_sweep(diameter: f64) -> Vec<f64> {
    [4.0, 8.0, 16.0, 32.0].iter().map(|m| m * 2.0 * PI / diameter).collect()
}

/// b_{σa}(t,x,θ) = exp(−σ ∫₀ᵗ a(s, x − (t − s)θ) ds) by the midpoint rule with
/// step ≤ `max_step`.
pub fn attenuation(a: &dyn Fn(f64, Point) -> f64, sign: f64, t: f64, x: Point, theta: Point, max_step: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let n = (t / max_step).ceil().max(1.0) as usize;
    (-sign * line_integral(a, t, x, theta, n)).exp()
}

fn line_integral(a: &dyn Fn(f64, Point) -> f64, t: f64, x: Point, theta: Point, n: usize) -> f64 {
    let ds = t / n as f64;
    (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) * ds;
            a(s, axpy(-(t - s), theta, x))
        })
        .sum::<f64>()
        * ds
}

/// Central-difference residual of (∂_t + θ·∇ + σa) b_{σa} at (t, x, θ).
///
/// Both neighbouring evaluations use the same number of quadrature nodes, so
/// the quadrature error is smooth along the characteristic.
pub fn attenuation_pde_residual(
    a: &dyn Fn(f64, Point) -> f64,
    sign: f64,
    t: f64,
    x: Point,
    theta: Point,
    spacing: f64,
) -> f64 {
    let n = ((t + spacing) / (spacing * spacing)).ceil() as usize;
    let b = |tt: f64, xx: Point| {
        let nn = ((tt / (t + spacing)) * n as f64).ceil().max(1.0) as usize;
        (-sign * line_integral(a, tt, xx, theta, nn)).exp()
    };
    let fwd = b(t + spacing, axpy(spacing, theta, x));
    let bwd = b(t - spacing, axpy(-spacing, theta, x));
    (fwd - bwd) / (2.0 * spacing) + sign * a(t, x) * b(t, x)
}

/// Poisson kernel P(hω, θ) = (1 − h²)/(α_n |hω − θ|ⁿ), n = 2, α_2 = 2π.
pub fn poisson_mollifier(h: f64, omega: Point, theta: Point) -> Result<f64> {
    if !(h > 0.0 && h < 1.0) {
        return invalid(format!("mollifier parameter h = {h} outside (0, 1)"));
    }
    Ok(poisson_kernel(h, omega, theta))
}

#[inline]
fn poisson_kernel(h: f64, omega: Point, theta: Point) -> f64 {
    let d = sub([h * omega[0], h * omega[1]], theta);
    (1.0 - h * h) / (2.0 * PI * dot(d, d))
}

/// |∫_S ρ_h(ω,θ) g(θ) dθ − g(ω)| for each h, by the uniform rule on `points` directions.
pub fn mollifier_convergence(g: &dyn Fn(Point) -> f64, omega: Point, hs: &[f64], points: usize) -> Result<Vec<f64>> {
    let dth = 2.0 * PI / points as f64;
    hs.iter()
        .map(|&h| {
            let mut acc = 0.0;
            for j in 0..points {
                let ang = j as f64 * dth;
                let th = [ang.cos(), ang.sin()];
                acc += poisson_mollifier(h, omega, th)? * g(th) * dth;
            }
            Ok((acc - g(omega)).abs())
        })
        .collect()
}

/// Inflow f_λ = φ_λ b_{σ a_ref} on Σ⁻, returned as an envelope relative to the
/// probe carrier. For convex Ω the backward characteristic from Σ⁻ never meets
/// supp a (a is extended by zero), so b = 1 there.
pub fn go_inflow(probe: &GoProbe, grid: &SpaceTimeGrid) -> BoundaryFlux {
    BoundaryFlux::from_fn(grid, Side::Incoming, Some(probe.carrier()), |t, x, m| {
        C64::new(probe.envelope(&grid.quad, t, x, m), 0.0)
    })
}

/// As [`go_inflow`] with the phase multiplied in; rejects under-resolved λ.
pub fn go_inflow_physical(probe: &GoProbe, grid: &SpaceTimeGrid) -> Result<BoundaryFlux> {
    probe.check_resolved(grid)?;
    Ok(go_inflow(probe, grid).to_physical(grid))
}

/// Table of b_{σa}(t_n + Δt/2, x_node, θ_m), indexed `(n * nodes + node) * ndir + m`.
pub struct AttenuationTable {
    ndir: usize,
    nodes: usize,
    values: Option<Vec<f64>>,
}

impl AttenuationTable {
    pub fn half_levels(grid: &SpaceTimeGrid, coeff: &CoefficientField, sign: f64) -> Self {
        let (nd, nodes) = (grid.ndir(), grid.nodes());
        if coeff.absorption.is_zero() {
            return AttenuationTable { ndir: nd, nodes, values: None };
        }
        let a = |t: f64, x: Point| coeff.absorption_at(t, x);
        let mut values = vec![1.0; grid.nt * nodes * nd];
        values.par_chunks_mut(nodes * nd).enumerate().for_each(|(n, chunk)| {
            let t = grid.time(n) + 0.5 * grid.dt;
            for node in 0..nodes {
                if !grid.inside(node) {
                    continue;
                }
                let x = grid.node_point(node);
                for m in 0..nd {
                    let th = grid.quad.dirs[m];
                    let len = t.min(grid.domain.backward_exit(x, th));
                    let steps = (len / grid.dt).ceil().max(1.0) as usize;
                    let integral = line_integral(&|s, y| a(t - len + s, y), len, x, th, steps);
                    chunk[node * nd + m] = (-sign * integral).exp();
                }
            }
        });
        AttenuationTable { ndir: nd, nodes, values: Some(values) }
    }

    #[inline]
    pub fn get(&self, level: usize, node: usize, m: usize) -> f64 {
        match &self.values {
            None => 1.0,
            Some(v) => v[(level * self.nodes + node) * self.ndir + m],
        }
    }
}

/// Source L_k[φ_λ b] (or L_k^* for the adjoint variant) as an envelope
/// relative to the probe carrier.
struct RemainderSource<'a> {
    grid: &'a SpaceTimeGrid,
    coeff: &'a CoefficientField,
    probe: &'a GoProbe,
    table: &'a AttenuationTable,
    adjoint: bool,
}

impl Source for RemainderSource<'_> {
    fn fill(&self, t: f64, x: Point, node: usize, out: &mut [C64]) {
        let grid = self.grid;
        let nd = grid.ndir();
        let level = ((t / grid.dt).floor() as usize).min(grid.nt - 1);
        let c = self.probe.carrier();
        let phase = |m: usize| C64::from_polar(1.0, c.sign * c.lambda * dot(x, grid.quad.dirs[m]));
        let amp: Vec<C64> = (0..nd)
            .map(|m| {
                let e = self.probe.envelope(&grid.quad, t, x, m) * self.table.get(level, node, m);
                phase(m).conj() * (e * grid.quad.weights[m])
            })
            .collect();
        for (m, o) in out.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for (mp, v) in amp.iter().enumerate() {
                let k = if self.adjoint { self.coeff.kernel.value(node, mp, m) } else { self.coeff.kernel.value(node, m, mp) };
                acc += v * k;
            }
            *o = acc * phase(m);
        }
    }
}

/// Remainder ψ_λ^± of the GO solution and its L²(Q_T) norm.
#[derive(Debug, Clone)]
pub struct Remainder {
    pub norm: f64,
    pub field: Option<KineticField>,
}

/// Solves for the GO remainder. For sign + (u⁺ = φ⁺_λ b_a + ψ⁺):
///
/// ∂_t ψ + θ·∇ψ + aψ − L_k[ψ] = L_k[φ⁺_λ b_a],  ψ(0) = 0,  ψ|Σ⁻ = 0;
///
/// for sign − (u⁻ = φ⁻_λ b_{−a} + ψ⁻) the adjoint system
///
/// ∂_t ψ + θ·∇ψ − aψ + L_k^*[ψ] = −L_k^*[φ⁻_λ b_{−a}],  ψ(T) = 0,  ψ|Σ⁺ = 0.
///
/// Fields are envelopes relative to the probe carrier.
pub fn go_remainder(probe: &GoProbe, coeff: &CoefficientField, grid: &SpaceTimeGrid, keep_field: bool) -> Result<Remainder> {
    let options = SolverOptions { record_field: keep_field, ..Default::default() };
    if coeff.kernel.is_zero() {
        let field = keep_field.then(|| KineticField {
            slices: vec![crate::transport::Slice::zeros(grid); grid.nt + 1],
            carrier: Some(probe.carrier()),
        });
        return Ok(Remainder { norm: 0.0, field });
    }
    let table = AttenuationTable::half_levels(grid, coeff, probe.sign);
    let src = RemainderSource { grid, coeff, probe, table: &table, adjoint: probe.sign < 0.0 };
    let mut acc = 0.0;
    let field = if probe.sign > 0.0 {
        let fwd = Forward::new(coeff).source(&src).carrier(Some(probe.carrier())).options(options);
        solve_forward_observed(grid, fwd, &mut |v| {
            acc += grid.time_weight(v.level) * v.to_slice().lp_norm(grid, 2.0).powi(2);
        })?
        .field
    } else {
        let adj = Adjoint::new(coeff).source(&src).carrier(Some(probe.carrier())).options(options);
        solve_adjoint_observed(grid, adj, &mut |level, s| {
            acc += grid.time_weight(level) * s.lp_norm(grid, 2.0).powi(2);
        })?
        .field
    };
    Ok(Remainder { norm: acc.sqrt(), field })
}

/// Residual of (∂_t + θ·∇ + a)(φ_λ b_a) at a point, for k = 0 (sign +) or of
/// (∂_t + θ·∇ − a)(φ_λ b_{−a}) (sign −), by central differences along the
/// characteristic.
pub fn go_ansatz_residual(
    probe: &GoProbe,
    a: &dyn Fn(f64, Point) -> f64,
    quad: &SphereQuadrature,
    t: f64,
    x: Point,
    m: usize,
    spacing: f64,
) -> C64 {
    let th = quad.dirs[m];
    let u = |tt: f64, xx: Point| -> C64 {
        let n = ((tt.max(0.0) + spacing) / (spacing * spacing)).ceil() as usize;
        let b = if tt <= 0.0 { 1.0 } else { (-probe.sign * line_integral(a, tt, xx, th, n.max(1))).exp() };
        probe.eval(quad, tt, xx, m) * b
    };
    let d = (u(t + spacing, axpy(spacing, th, x)) - u(t - spacing, axpy(-spacing, th, x))) / (2.0 * spacing);
    d + u(t, x) * (probe.sign * a(t, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sphere_quadrature, DomainSpec};
    use crate::transport::{Absorption, Kernel};

    fn dense(n: usize) -> Vec<Point> {
        (0..n).map(|j| {
            let a = 2.0 * PI * j as f64 / n as f64;
            [a.cos(), a.sin()]
        })
        .collect()
    }

    #[test]
    fn test_attenuation_examples() {
        let x = [0.1, -0.2];
        let th = [0.6, 0.8];
        assert_eq!(attenuation(&|_, _| 0.0, 1.0, 1.3, x, th, 0.01), 1.0);
        let c = 0.7;
        assert!((attenuation(&|_, _| c, 1.0, 1.3, x, th, 0.01) - (-c * 1.3f64).exp()).abs() < 1e-14);
        assert!((attenuation(&|_, _| c, -1.0, 1.3, x, th, 0.01) - (c * 1.3f64).exp()).abs() < 1e-13);
        let t = 1.5;
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&h| (attenuation(&|s, _| s, 1.0, t, x, th, h) - (-t * t / 2.0).exp()).abs())
            .collect();
        // midpoint rule is exact for a linear integrand
        assert!(errs.iter().all(|e| *e < 1e-14));
        let quad = |s: f64, _: Point| s * s;
        let e: Vec<f64> = [0.1, 0.05]
            .iter()
            .map(|&h| (attenuation(&quad, 1.0, t, x, th, h) - (-t.powi(3) / 3.0).exp()).abs())
            .collect();
        assert!(e[0] / e[1] > 3.5);
    }

    #[test]
    fn test_attenuation_multiplicative() {
        let a1 = |t: f64, x: Point| 0.3 + 0.2 * (t + x[0]).sin();
        let a2 = |t: f64, x: Point| 0.5 * (x[1] * t).cos();
        let sum = |t: f64, x: Point| a1(t, x) + a2(t, x);
        let (x, th) = ([0.2, 0.1], [0.0, 1.0]);
        let b = attenuation(&sum, 1.0, 1.7, x, th, 0.01);
        let b12 = attenuation(&a1, 1.0, 1.7, x, th, 0.01) * attenuation(&a2, 1.0, 1.7, x, th, 0.01);
        assert!((b - b12).abs() < 1e-12);
        let inv = attenuation(&a1, -1.0, 1.7, x, th, 0.01) * attenuation(&a1, 1.0, 1.7, x, th, 0.01);
        assert!((inv - 1.0).abs() < 1e-12);
    }

    #[test]
    fn test_attenuation_residual_second_order() {
        let a = |t: f64, x: Point| 0.4 + 0.3 * (2.0 * t).sin() * x[0] + 0.2 * x[1] * x[1];
        let (x, th) = ([0.1, 0.2], [0.8, -0.6]);
        let zero = attenuation_pde_residual(&|_, _| 0.0, 1.0, 1.0, x, th, 0.1);
        assert_eq!(zero, 0.0);
        let r: Vec<f64> = [0.04, 0.02, 0.01].iter().map(|&h| attenuation_pde_residual(&a, 1.0, 1.2, x, th, h).abs()).collect();
        let order = (r[0] / r[2]).log2() / 2.0;
        assert!(order > 1.8, "{r:?}");
    }

    #[test]
    fn test_mollifier_normalization_and_bound() {
        let dirs = dense(1024);
        let omega = [0.6, 0.8];
        for h in [0.3, 0.7, 0.95] {
            let mut acc = 0.0;
            for th in &dirs {
                let v = poisson_mollifier(h, omega, *th).unwrap();
                assert!(v >= 0.0 && v <= 2.0 / (2.0 * PI * (1.0 - h)) * (1.0 + 1e-12));
                acc += v * 2.0 * PI / 1024.0;
            }
            assert!((acc - 1.0).abs() < 1e-8, "h = {h}: {acc}");
        }
        assert!(poisson_mollifier(1.0, omega, omega).is_err());
        assert!(poisson_mollifier(0.0, omega, omega).is_err());
        for th in dirs.iter().step_by(37) {
            assert!((poisson_mollifier(1e-9, omega, *th).unwrap() - 1.0 / (2.0 * PI)).abs() < 1e-8);
        }
    }

    #[test]
    fn test_mollifier_convergence_examples() {
        let ones = mollifier_convergence(&|_| 1.0, [1.0, 0.0], &[0.5, 0.9, 0.99], 4096).unwrap();
        assert!(ones.iter().all(|e| *e < 1e-10));
        let e = mollifier_convergence(&|th| th[0], [1.0, 0.0], &[0.5, 0.9, 0.99], 4096).unwrap();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    }

    #[test]
    fn test_probe_validation_and_roundtrip() {
        let bump = Spatial::Bump(BumpProfile::new([-1.0, 0.0], 0.125));
        assert!(GoProbe::new(1.0, 0.0, bump, DirectionWeight::Uniform).is_err());
        assert!(GoProbe::new(1.0, 2.0, bump, DirectionWeight::Mollified { h: 1.0, omega: [1.0, 0.0] }).is_err());
        let p = GoProbe::new(-1.0, 12.0, bump, DirectionWeight::Mollified { h: 0.9, omega: [0.0, 1.0] }).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: GoProbe = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn test_bump_integrals() {
        let b = BumpProfile { center: [0.3, -0.2], width: 0.2, amplitude: 1.5 };
        let n = 800;
        let h = 0.5 / n as f64;
        let (mut i1, mut i2) = (0.0, 0.0);
        for j in 0..n {
            for i in 0..n {
                let y = [0.3 - 0.25 + (i as f64 + 0.5) * h * 1.0, -0.2 - 0.25 + (j as f64 + 0.5) * h];
                let v = b.eval(y);
                i1 += v * h * h;
                i2 += v * v * h * h;
            }
        }
        assert!((i1 - b.integral()).abs() < 1e-5);
        assert!((i2 - b.square_integral()).abs() < 1e-5);
    }

    #[test]
    fn test_go_inflow_properties() {
        let grid = SpaceTimeGrid::new(DomainSpec::desk(), 32, 32, 16).unwrap();
        let bump = Spatial::Bump(BumpProfile::new([-1.0, 0.0], 0.125));
        let p1 = GoProbe::new(1.0, 3.0, bump, DirectionWeight::Uniform).unwrap();
        let p2 = GoProbe::new(1.0, 9.0, bump, DirectionWeight::Uniform).unwrap();
        let f1 = go_inflow_physical(&p1, &grid).unwrap();
        let f2 = go_inflow_physical(&p2, &grid).unwrap();
        for (a, b) in f1.data.iter().zip(&f2.data) {
            assert!((a.norm() - b.norm()).abs() < 1e-12);
        }
        // support of φ⁺ at t = 0 misses Ω
        for b in 0..f1.nb {
            for m in 0..f1.ndir {
                assert_eq!(f1.get(0, b, m).norm(), 0.0);
            }
        }
        assert!(f1.max_abs() > 0.5);
        let fast = GoProbe::new(1.0, 1e3, bump, DirectionWeight::Uniform).unwrap();
        assert!(go_inflow_physical(&fast, &grid).is_err());
    }

    #[test]
    fn test_go_ansatz_residual_small() {
        let quad = sphere_quadrature(16, 2).unwrap();
        let bump = Spatial::Bump(BumpProfile::new([-0.6, 0.1], 0.4));
        let p = GoProbe::new(1.0, 6.0, bump, DirectionWeight::Uniform).unwrap();
        let a = |t: f64, x: Point| 0.5 + 0.2 * (t * x[0]).cos();
        let r: Vec<f64> = [0.02, 0.01].iter().map(|&h| go_ansatz_residual(&p, &a, &quad, 0.7, [0.0, 0.05], 0, h).norm()).collect();
        assert!(r[0] / r[1] > 3.0, "{r:?}");
    }

    #[test]
    fn test_remainder_zero_without_scattering() {
        let grid = SpaceTimeGrid::new(DomainSpec::desk(), 16, 16, 8).unwrap();
        let coeff = CoefficientField::new(grid.domain, Absorption::func(|_, _| 0.3), Kernel::Zero);
        let bump = Spatial::Bump(BumpProfile::new([-1.0, 0.0], 0.125));
        let p = GoProbe::new(1.0, 8.0, bump, DirectionWeight::Uniform).unwrap();
        let r = go_remainder(&p, &coeff, &grid, true).unwrap();
        assert_eq!(r.norm, 0.0);
    }
}
