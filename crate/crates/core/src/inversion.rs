//! Reconstruction pipelines. The reference coefficient is the known one and
//! the black box carries the unknown; every pipeline measures both with the
//! same probes, recovers the difference and adds the reference back.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::albedo::{apply, free_transport_baseline, op_distance, probe_catalog, MeasurementKind, MeasurementResponse};
use crate::error::{invalid, Error, Result};
use crate::geometry::{axpy, norm, DomainSpec, Point, RegionTag, Side, SpacetimeLattice};
use crate::phantoms::Phantom;
use crate::probes::{attenuation, max_resolved_lambda, BumpProfile, DirectionWeight, GoProbe, Spatial};
use crate::raytransform::{
    fft3, fourier_slice, frequency, invert_cone_spectrum, invert_xray, light_ray_integral, ray_data_oracle,
    stability_bound, CompletionConfig, CompletionScheme, OffsetLattice, PlaneGrid, Provenance, RayDataSet, Sinogram,
    SliceOptions,
};
use crate::transport::{
    solve_forward_observed, Absorption, BoundaryFlux, Carrier, CoefficientField, Forward, Inflow, Kernel, Slice,
    SolverOptions, SpaceTimeGrid, C64,
};

/// Estimates at or below −1 + LOG_GUARD are excluded before taking −log(1 + ·).
pub const LOG_GUARD: f64 = 1e-6;

/// How the GO phase e^{±iλ(t − x·θ)} reaches the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFrame {
    /// Carried analytically; only envelopes are sampled.
    #[default]
    Envelope,
    /// Sampled on the grid; needs 8 points per wavelength.
    Physical,
}

/// Parameters of the localizing probes φ⁺ = ρ̄_h(ω, θ)Φ(y), φ⁻ = φ₂(y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeParams {
    pub lambda: f64,
    /// Mollifier parameter; `None` follows h = 1 − coupling/λ.
    pub h: Option<f64>,
    pub coupling: f64,
    /// Width of the bump φ₂.
    pub width: f64,
    /// Width of the radial ramp that switches Φ on outside B(0, r/2).
    pub ramp: f64,
    pub frame: ProbeFrame,
    pub solver: SolverOptions,
    /// Samples whose normalization falls below this fraction of ∫φ₂ are excluded.
    pub min_normalization: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self::for_domain(&DomainSpec::desk())
    }
}

impl ProbeParams {
    /// λ = 32·2π/diam Ω, w = r/8, ramp r/10, cubic solver.
    pub fn for_domain(spec: &DomainSpec) -> Self {
        ProbeParams {
            lambda: 32.0 * 2.0 * PI / spec.diameter(),
            h: None,
            coupling: 1.0,
            width: spec.r / 8.0,
            ramp: 0.1 * spec.r,
            frame: ProbeFrame::Envelope,
            solver: SolverOptions::cubic(),
            min_normalization: 0.05,
        }
    }

    pub fn mollifier_h(&self) -> f64 {
        self.h.unwrap_or(1.0 - self.coupling / self.lambda)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.mollifier_h();
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return invalid(format!("probe frequency must be positive, got {}", self.lambda));
        }
        if !(h > 0.0 && h < 1.0) {
            return invalid(format!("mollifier parameter must lie in (0, 1), got {h}"));
        }
        if !(self.width > 0.0 && self.ramp > 0.0) {
            return invalid("bump width and ramp width must be positive");
        }
        if !(0.0..1.0).contains(&self.min_normalization) {
            return invalid("min_normalization must lie in [0, 1)");
        }
        Ok(())
    }
}

/// ρ_h(ω, θ_m) renormalized so that Σ_m w_m ρ̄ = 1 on the solver's directions.
pub fn mollifier_weights(grid: &SpaceTimeGrid, h: f64, omega: Point) -> Result<Vec<f64>> {
    let dw = DirectionWeight::Mollified { h, omega };
    dw.validate()?;
    let raw: Vec<f64> = (0..grid.ndir()).map(|m| dw.weight(&grid.quad, m)).collect();
    let total: f64 = raw.iter().zip(&grid.quad.weights).map(|(a, w)| a * w).sum();
    Ok(raw.iter().map(|v| v / total).collect())
}

/// Region on which each measurement kind determines the absorption.
pub fn validity_region(kind: MeasurementKind) -> RegionTag {
    match kind {
        MeasurementKind::BoundaryOnly => RegionTag::Xstar,
        MeasurementKind::BoundaryPlusFinal => RegionTag::Xsharp,
        MeasurementKind::FullData => RegionTag::OmegaT,
    }
}

fn inflow_spatial(kind: MeasurementKind, spec: &DomainSpec, params: &ProbeParams) -> Spatial {
    match kind {
        MeasurementKind::FullData => Spatial::Unit,
        _ => Spatial::Ramp { inner: 0.5 * spec.r, width: params.ramp },
    }
}

fn check_resolved(lambda: f64, grid: &SpaceTimeGrid) -> Result<()> {
    let max = max_resolved_lambda(grid);
    if lambda > max {
        return invalid(format!("λ = {lambda:.3} is under-resolved on this grid (physical frame needs λ ≤ {max:.3})"));
    }
    Ok(())
}

/// Black-box and reference responses to φ⁺ = dirw(θ)·spatial(y)·e^{iλ(t − x·θ)}.
#[allow(clippy::too_many_arguments)]
fn probe_responses(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    blackbox: &CoefficientField,
    reference: &CoefficientField,
    spatial: Spatial,
    dirw: &[f64],
    params: &ProbeParams,
) -> Result<(MeasurementResponse, MeasurementResponse)> {
    let carrier = Carrier::new(params.lambda, 1.0);
    let physical = params.frame == ProbeFrame::Physical;
    let env = |t: f64, x: Point, m: usize| dirw[m] * spatial.eval(axpy(-t, grid.quad.dirs[m], x));
    let mut f = BoundaryFlux::from_fn(grid, Side::Incoming, Some(carrier), |t, x, m| C64::new(env(t, x, m), 0.0));
    if physical {
        check_resolved(params.lambda, grid)?;
        f = f.to_physical(grid);
    }
    let u0 = kind.accepts_initial().then(|| {
        Slice::from_fn(grid, |x, m| {
            let v = C64::new(env(0.0, x, m), 0.0);
            if physical {
                v * carrier.phase(0.0, x, grid.quad.dirs[m])
            } else {
                v
            }
        })
    });
    let (bb, rf) = rayon::join(
        || apply(kind, grid, blackbox, &f, u0.as_ref(), params.solver),
        || apply(kind, grid, reference, &f, u0.as_ref(), params.solver),
    );
    Ok((bb?, rf?))
}

/// A point of Σ⁺ or of the final slice with its quadrature weight.
struct Observation {
    t: f64,
    x: Point,
    m: usize,
    weight: f64,
    final_time: bool,
    diff: C64,
    reference: C64,
}

fn for_each_observation(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    bb: &MeasurementResponse,
    rf: &MeasurementResponse,
    mut visit: impl FnMut(Observation),
) {
    let zero = C64::new(0.0, 0.0);
    let (tb, tr) = (&bb.trace, &rf.trace);
    for i in 0..tb.levels {
        let (t, tw) = (grid.time(i), grid.time_weight(i));
        for b in 0..tb.nb {
            let x = grid.mesh.points[b];
            for m in 0..tb.ndir {
                if grid.mesh.side(b, m) != Side::Outgoing {
                    continue;
                }
                let (u, r) = (tb.get(i, b, m), tr.get(i, b, m));
                if u == zero && r == zero {
                    continue;
                }
                let weight = tw * grid.mesh.dxi(b, m);
                visit(Observation { t, x, m, weight, final_time: false, diff: u - r, reference: r });
            }
        }
    }
    if !kind.has_final() {
        return;
    }
    let (Some(fb), Some(fr)) = (&bb.final_slice, &rf.final_slice) else { return };
    let t = grid.domain.horizon;
    for node in 0..grid.nodes() {
        if !grid.inside(node) {
            continue;
        }
        let x = grid.node_point(node);
        for m in 0..grid.ndir() {
            let (u, r) = (fb.get(node, m), fr.get(node, m));
            if u == zero && r == zero {
                continue;
            }
            let weight = grid.cell_area() * grid.quad.weights[m];
            visit(Observation { t, x, m, weight, final_time: true, diff: u - r, reference: r });
        }
    }
}

/// u⁻/φ⁻ = b_{−a_ref}·e^{−iλ(t − x·θ)}; the phase is dropped in the envelope
/// frame, where it cancels the carrier of u⁺.
fn adjoint_factor(
    grid: &SpaceTimeGrid,
    reference: &CoefficientField,
    frame: ProbeFrame,
    lambda: f64,
    t: f64,
    x: Point,
    m: usize,
) -> C64 {
    let th = grid.quad.dirs[m];
    let b = if reference.absorption.is_zero() {
        1.0
    } else {
        attenuation(&|s, y| reference.absorption_at(s, y), -1.0, t, x, th, grid.dt)
    };
    match frame {
        ProbeFrame::Envelope => C64::new(b, 0.0),
        ProbeFrame::Physical => Carrier::new(lambda, -1.0).phase(t, x, th) * b,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingResult {
    pub kind: MeasurementKind,
    pub lambda: f64,
    /// Σ⁺ term plus the final-time term.
    pub value: C64,
    pub boundary_term: C64,
    /// Absent for boundary-only data.
    pub final_term: Option<C64>,
    /// ∫ φ⁺φ⁻ by the same quadrature, taken from the reference response.
    pub normalization: f64,
}

/// ∫_{Σ⁺} (𝒜_bb − 𝒜_ref)(f_λ) u_λ⁻ dξ, plus ∫ (u_bb − u_ref)(T) u_λ⁻(T) for
/// kinds that observe the final state. On Σ⁺ and at t = T the adjoint GO
/// solution is exactly φ⁻ b_{−a_ref} e^{−iλ(t − x·θ)}, so no adjoint solve is
/// needed. For full data the initial state is φ⁺ at t = 0.
#[allow(clippy::too_many_arguments)]
pub fn pairing(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    blackbox: &CoefficientField,
    reference: &CoefficientField,
    plus: &GoProbe,
    minus: &GoProbe,
    frame: ProbeFrame,
    solver: SolverOptions,
) -> Result<PairingResult> {
    if plus.sign != 1.0 || minus.sign != -1.0 {
        return invalid("pairing needs φ⁺ with sign +1 and φ⁻ with sign −1");
    }
    if (plus.lambda - minus.lambda).abs() > 1e-12 * plus.lambda {
        return invalid(format!("φ⁺ and φ⁻ must share λ, got {} and {}", plus.lambda, minus.lambda));
    }
    let dirw: Vec<f64> = (0..grid.ndir()).map(|m| plus.direction.weight(&grid.quad, m)).collect();
    let params = ProbeParams { lambda: plus.lambda, frame, solver, ..ProbeParams::for_domain(&grid.domain) };
    let (bb, rf) = probe_responses(kind, grid, blackbox, reference, plus.spatial, &dirw, &params)?;
    let zero = C64::new(0.0, 0.0);
    let (mut bt, mut ft, mut nrm) = (zero, zero, 0.0);
    for_each_observation(kind, grid, &bb, &rf, |o| {
        let phi = minus.envelope(&grid.quad, o.t, o.x, o.m);
        if phi == 0.0 {
            return;
        }
        let u = adjoint_factor(grid, reference, frame, plus.lambda, o.t, o.x, o.m) * (phi * o.weight);
        if o.final_time {
            ft += o.diff * u;
        } else {
            bt += o.diff * u;
        }
        nrm += (o.reference * u).re;
    });
    let final_term = kind.has_final().then_some(ft);
    let value = bt + ft;
    if !(value.re.is_finite() && value.im.is_finite()) {
        return Err(Error::NonFinite { step: grid.nt, time: grid.domain.horizon, detail: "pairing value".into() });
    }
    Ok(PairingResult { kind, lambda: plus.lambda, value, boundary_term: bt, final_term, normalization: nrm })
}

/// Σ_m w_m ∫ φ⁺(y, θ_m) φ⁻(y, θ_m) [e^{−∫₀ᵀ a(s, y + sθ_m) ds} − 1] dy by the
/// midpoint rule with spacing `h` in y and adaptive quadrature along lines.
/// `a` is the absorption difference; it is cut off outside Ω_T.
pub fn pairing_target(
    grid: &SpaceTimeGrid,
    a: &(dyn Fn(f64, Point) -> f64 + Sync),
    plus: &GoProbe,
    minus: &GoProbe,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return invalid("quadrature spacing must be positive");
    }
    let spec = grid.domain;
    let cut = |t: f64, x: Point| if spec.in_omega_t(t, x) { a(t, x) } else { 0.0 };
    let (center, half) = match (plus.spatial, minus.spatial) {
        (Spatial::Bump(b), _) | (_, Spatial::Bump(b)) => (b.center, b.width),
        _ => ([0.0, 0.0], spec.horizon + spec.radius()),
    };
    let n = (2.0 * half / h).ceil().max(1.0) as usize;
    let step = 2.0 * half / n as f64;
    let total: f64 = (0..grid.ndir())
        .into_par_iter()
        .map(|m| {
            let th = grid.quad.dirs[m];
            let mut acc = 0.0;
            for j in 0..n {
                for i in 0..n {
                    let y = [center[0] - half + (i as f64 + 0.5) * step, center[1] - half + (j as f64 + 0.5) * step];
                    let w = plus.envelope(&grid.quad, 0.0, y, m) * minus.envelope(&grid.quad, 0.0, y, m);
                    if w != 0.0 {
                        let r = light_ray_integral(&cut, spec.horizon, spec.radius(), th, y);
                        acc += w * ((-r).exp() - 1.0);
                    }
                }
            }
            grid.quad.weights[m] * acc * step * step
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total)
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    y: Point,
    m: u32,
    diff: f64,
    reference: f64,
}

/// Observations mapped to their line offsets y = x − tθ and binned on a square
/// grid so that bump-localized sums touch only nearby samples.
struct SampleCloud {
    lo: f64,
    cell: f64,
    n: usize,
    start: Vec<usize>,
    samples: Vec<Sample>,
}

impl SampleCloud {
    fn new(samples: Vec<Sample>, half: f64, cell: f64) -> Self {
        let n = ((2.0 * half / cell).ceil() as usize).max(1);
        let lo = -half;
        let coord = |v: f64| (((v - lo) / cell).floor().max(0.0) as usize).min(n - 1);
        let bin = |y: Point| coord(y[1]) * n + coord(y[0]);
        let mut start = vec![0usize; n * n + 1];
        for s in &samples {
            start[bin(s.y) + 1] += 1;
        }
        for k in 0..n * n {
            start[k + 1] += start[k];
        }
        let mut fill = start.clone();
        let mut sorted = samples.clone();
        for s in samples {
            let b = bin(s.y);
            sorted[fill[b]] = s;
            fill[b] += 1;
        }
        SampleCloud { lo, cell, n, start, samples: sorted }
    }

    /// (Σ diff·φ₂·dirw, Σ reference·φ₂) over the samples under the bump.
    fn read(&self, bump: &BumpProfile, dirw: Option<&[f64]>) -> (f64, f64) {
        let range = |c: f64| -> Option<(usize, usize)> {
            let a = ((c - bump.width - self.lo) / self.cell).floor();
            let b = ((c + bump.width - self.lo) / self.cell).floor();
            if b < 0.0 || a > (self.n - 1) as f64 {
                None
            } else {
                Some((a.max(0.0) as usize, (b as usize).min(self.n - 1)))
            }
        };
        let (Some((i0, i1)), Some((j0, j1))) = (range(bump.center[0]), range(bump.center[1])) else {
            return (0.0, 0.0);
        };
        let (mut p, mut q) = (0.0, 0.0);
        for j in j0..=j1 {
            for i in i0..=i1 {
                let b = j * self.n + i;
                for s in &self.samples[self.start[b]..self.start[b + 1]] {
                    let phi = bump.eval(s.y);
                    if phi == 0.0 {
                        continue;
                    }
                    let dw = dirw.map_or(1.0, |d| d[s.m as usize]);
                    p += s.diff * phi * dw;
                    q += s.reference * phi;
                }
            }
        }
        (p, q)
    }
}

/// Responses to φ⁺ = ρ̄_h(ω, ·)Φ, folded into a sample cloud.
fn direction_cloud(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    blackbox: &CoefficientField,
    reference: &CoefficientField,
    omega: Point,
    params: &ProbeParams,
) -> Result<SampleCloud> {
    let dirw = mollifier_weights(grid, params.mollifier_h(), omega)?;
    let spatial = inflow_spatial(kind, &grid.domain, params);
    let (bb, rf) = probe_responses(kind, grid, blackbox, reference, spatial, &dirw, params)?;
    let mut samples = Vec::new();
    for_each_observation(kind, grid, &bb, &rf, |o| {
        let u = adjoint_factor(grid, reference, params.frame, params.lambda, o.t, o.x, o.m) * o.weight;
        samples.push(Sample {
            y: axpy(-o.t, grid.quad.dirs[o.m], o.x),
            m: o.m as u32,
            diff: (o.diff * u).re,
            reference: (o.reference * u).re,
        });
    });
    Ok(SampleCloud::new(samples, grid.domain.radius() + grid.domain.horizon + params.width, params.width))
}

/// Quadrature oracle of [`estimate_exp_integral`]: the ρ̄_h(ω, ·)Φφ₂-weighted
/// mean of e^{−∫₀ᵀ δa(s, y + sθ) ds} − 1 over directions θ_m and offsets near y,
/// midpoint rule with spacing `h_step`.
pub fn localized_target(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    a: &(dyn Fn(f64, Point) -> f64 + Sync),
    omega: Point,
    y: Point,
    params: &ProbeParams,
    h_step: f64,
) -> Result<f64> {
    let spec = grid.domain;
    let dirw = mollifier_weights(grid, params.mollifier_h(), omega)?;
    let spatial = inflow_spatial(kind, &spec, params);
    let bump = BumpProfile::new(y, params.width);
    let cut = |t: f64, x: Point| if spec.in_omega_t(t, x) { a(t, x) } else { 0.0 };
    let n = (2.0 * bump.width / h_step).ceil().max(1.0) as usize;
    let step = 2.0 * bump.width / n as f64;
    let (num, den) = (0..grid.ndir())
        .into_par_iter()
        .filter(|&m| dirw[m] > 1e-12 * dirw.iter().fold(0.0f64, |x, v| x.max(*v)))
        .map(|m| {
            let th = grid.quad.dirs[m];
            let (mut p, mut q) = (0.0, 0.0);
            for j in 0..n {
                for i in 0..n {
                    let z = [y[0] - bump.width + (i as f64 + 0.5) * step, y[1] - bump.width + (j as f64 + 0.5) * step];
                    let w = bump.eval(z) * spatial.eval(z);
                    if w != 0.0 {
                        p += w * ((-light_ray_integral(&cut, spec.horizon, spec.radius(), th, z)).exp() - 1.0);
                        q += w;
                    }
                }
            }
            let wm = grid.quad.weights[m] * dirw[m];
            (wm * p, wm * q)
        })
        .collect::<Vec<_>>()
        .iter()
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    if !(den > 0.0) {
        return invalid("localizing weights vanish at this centre");
    }
    Ok(num / den)
}

fn check_center(kind: MeasurementKind, spec: &DomainSpec, bump: &BumpProfile) -> Result<()> {
    let c = norm(bump.center);
    let ok = match kind {
        MeasurementKind::BoundaryOnly => bump.in_annulus(spec.r, spec.horizon),
        MeasurementKind::BoundaryPlusFinal => c - bump.width >= 0.5 * spec.r,
        MeasurementKind::FullData => true,
    };
    if ok {
        return Ok(());
    }
    let need = match kind {
        MeasurementKind::BoundaryOnly => "r/2 + w ≤ |y| ≤ T − r/2 − w",
        _ => "|y| ≥ r/2 + w",
    };
    invalid(format!("bump centre {:?} is not admissible for {kind:?} data (need {need})", bump.center))
}

/// Localized estimates of e^{−∫₀ᵀ δa(s, y + sω) ds} − 1 at each centre y, where
/// δa = a_bb − a_ref: the pairing of φ⁺ = ρ̄_h(ω, θ)Φ(y) with φ⁻ = φ₂(· − y)
/// divided by ∫φ⁺φ⁻ from the same quadrature.
pub fn estimate_exp_integral(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    blackbox: &CoefficientField,
    reference: &CoefficientField,
    omega: Point,
    centers: &[Point],
    params: &ProbeParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    for &y in centers {
        check_center(kind, &grid.domain, &BumpProfile::new(y, params.width))?;
    }
    let cloud = direction_cloud(kind, grid, blackbox, reference, omega, params)?;
    centers
        .iter()
        .map(|&y| {
            let bump = BumpProfile::new(y, params.width);
            let (p, q) = cloud.read(&bump, None);
            if !(q >= params.min_normalization * bump.integral()) {
                return Err(Error::Coverage(format!(
                    "normalization {q:.3e} at y = {y:?} is below {} ∫φ₂",
                    params.min_normalization
                )));
            }
            Ok(p / q)
        })
        .collect()
}

/// Whether the line t ↦ (t, y + tθ), 0 ≤ t ≤ T, avoids `region`: exact tests
/// for |y| against the cone radii, otherwise sampling at `step`.
pub fn line_avoids(spec: &DomainSpec, region: RegionTag, y: Point, theta: Point, step: f64) -> bool {
    let ny = norm(y);
    let (r, tt) = (spec.r, spec.horizon);
    match region {
        RegionTag::Xstar if ny <= 0.5 * r || ny >= tt - 0.5 * r => return true,
        RegionTag::Xsharp if ny <= 0.5 * r => return true,
        _ => {}
    }
    let Some((s0, s1)) = spec.chord(y, theta) else { return true };
    let (t0, t1) = (s0.max(0.0), s1.min(tt));
    if t1 <= t0 {
        return true;
    }
    let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
    !(0..=n).any(|k| {
        let t = t0 + (t1 - t0) * k as f64 / n as f64;
        region.contains(t, axpy(t, theta, y), spec)
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryStats {
    /// Lines that may meet the validity region.
    pub considered: usize,
    /// Lines that avoid the region, set to zero.
    pub zero_filled: usize,
    /// Considered lines without a reliable estimate; their value is zero.
    pub excluded: usize,
}

#[derive(Debug, Clone)]
pub struct RecoveredRays {
    pub rays: RayDataSet,
    pub stats: RecoveryStats,
}

/// R(δa)(θ_m, y) = −log(1 + estimate) for every solver direction θ_m and every
/// offset y, from two solves per direction. Lines avoiding the validity
/// region are zero-filled; lines with small normalization or an estimate
/// ≤ −1 + LOG_GUARD are excluded and listed. Aborts when more than
/// `max_excluded` of the considered lines are excluded.
#[allow(clippy::too_many_arguments)]
pub fn recover_ray_data(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    blackbox: &CoefficientField,
    reference: &CoefficientField,
    offsets: OffsetLattice,
    params: &ProbeParams,
    max_excluded: f64,
) -> Result<RecoveredRays> {
    params.validate()?;
    let spec = grid.domain;
    let region = validity_region(kind);
    let dirs = grid.quad.dirs.clone();
    let nn = offsets.len();
    let n = offsets.n;
    let step = 0.5 * grid.dt.min(grid.dx);
    let per_dir = (0..dirs.len())
        .into_par_iter()
        .map(|m| -> Result<(Vec<f64>, Vec<usize>, usize)> {
            let th = dirs[m];
            let lines: Vec<(usize, Point)> = (0..nn)
                .map(|k| (k, offsets.point(k % n, k / n)))
                .filter(|&(_, y)| !line_avoids(&spec, region, y, th, step))
                .collect();
            let mut vals = vec![0.0; nn];
            let mut excluded = Vec::new();
            if lines.is_empty() {
                return Ok((vals, excluded, 0));
            }
            let cloud = direction_cloud(kind, grid, blackbox, reference, th, params)?;
            for &(k, y) in &lines {
                let bump = BumpProfile::new(y, params.width);
                let (p, q) = cloud.read(&bump, None);
                let est = p / q;
                if !(q >= params.min_normalization * bump.integral()) || !(est > -1.0 + LOG_GUARD) {
                    excluded.push(m * nn + k);
                    continue;
                }
                vals[k] = -est.ln_1p();
            }
            Ok((vals, excluded, lines.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rays = RayDataSet::zeros(dirs, offsets, Provenance::BoundaryRecovered);
    let mut stats = RecoveryStats::default();
    let mut worst = (0usize, 0usize);
    for (m, (vals, excl, considered)) in per_dir.into_iter().enumerate() {
        rays.values[m * nn..(m + 1) * nn].copy_from_slice(&vals);
        if excl.len() > worst.1 {
            worst = (m, excl.len());
        }
        stats.considered += considered;
        stats.zero_filled += nn - considered;
        stats.excluded += excl.len();
        rays.excluded.extend(excl);
    }
    if stats.excluded as f64 > max_excluded * stats.considered as f64 {
        return Err(Error::Coverage(format!(
            "{} of {} considered lines excluded (limit {:.1}%); direction {} lost {}",
            stats.excluded,
            stats.considered,
            100.0 * max_excluded,
            worst.0,
            worst.1
        )));
    }
    rays.validate()?;
    Ok(RecoveredRays { rays, stats })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityParams {
    pub mu: f64,
    pub constant: f64,
}

impl Default for StabilityParams {
    fn default() -> Self {
        StabilityParams { mu: 0.5, constant: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbsorptionConfig {
    pub probe: ProbeParams,
    /// Reconstruction lattice has `lattice_nx`² nodes over the bounding square.
    pub lattice_nx: usize,
    /// Defaults to the count giving Δt ≈ Δx.
    pub lattice_nt: Option<usize>,
    /// Line-offset spacing; defaults to the lattice Δx.
    pub offset_spacing: Option<f64>,
    pub band_limit: Option<f64>,
    pub iterations: usize,
    pub relaxation: f64,
    pub tolerance: f64,
    pub scheme: CompletionScheme,
    /// Largest tolerated fraction of excluded lines.
    pub max_excluded: f64,
    pub stability: StabilityParams,
    /// Probed operator distance ε, when known.
    pub epsilon: Option<f64>,
}

impl Default for AbsorptionConfig {
    fn default() -> Self {
        Self::for_domain(&DomainSpec::desk())
    }
}

impl AbsorptionConfig {
    pub fn for_domain(spec: &DomainSpec) -> Self {
        AbsorptionConfig {
            probe: ProbeParams::for_domain(spec),
            lattice_nx: 32,
            lattice_nt: None,
            offset_spacing: None,
            band_limit: None,
            iterations: 500,
            relaxation: 1.0,
            tolerance: 1e-10,
            scheme: CompletionScheme::Pocs,
            max_excluded: 0.05,
            stability: StabilityParams::default(),
            epsilon: None,
        }
    }

    pub fn lattice(&self, spec: &DomainSpec) -> SpacetimeLattice {
        let h = spec.half_extent();
        let dx = 2.0 * h[0].max(h[1]) / self.lattice_nx as f64;
        let nt = self.lattice_nt.unwrap_or_else(|| (spec.horizon / dx).round().max(1.0) as usize);
        SpacetimeLattice::covering(spec, nt, self.lattice_nx)
    }

    /// Offsets covering every line through the lattice during [0, T].
    pub fn offsets(&self, lat: &SpacetimeLattice) -> OffsetLattice {
        let half = lat.lo[0].abs().max(lat.lo[1].abs()) + 0.5 * lat.dx + lat.time(lat.nt - 1) + 0.5 * lat.dt;
        OffsetLattice::covering(half, self.offset_spacing.unwrap_or(lat.dx))
    }

    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        if self.lattice_nx < 4 {
            return invalid("lattice_nx must be at least 4");
        }
        if self.lattice_nt == Some(0) {
            return invalid("lattice_nt must be positive");
        }
        if let Some(d) = self.offset_spacing {
            if !(d > 0.0) {
                return invalid("offset spacing must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.max_excluded) {
            return invalid("max_excluded must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// ‖err‖₂/‖truth‖₂ on the region; `None` when the truth vanishes there.
    pub rel_l2: Option<f64>,
    pub l2: f64,
    pub hminus1: f64,
    pub linf: f64,
}

/// Errors of `field` against `truth` on the lattice nodes in `region` only.
pub fn error_metrics(
    lat: &SpacetimeLattice,
    spec: &DomainSpec,
    field: &[f64],
    truth: &[f64],
    region: RegionTag,
) -> Result<ErrorMetrics> {
    if field.len() != lat.len() || truth.len() != lat.len() {
        return invalid("field and truth must be sampled on the lattice");
    }
    let mask = lat.mask(spec, region);
    let err: Vec<f64> = (0..lat.len()).map(|k| if mask[k] { field[k] - truth[k] } else { 0.0 }).collect();
    let cell = lat.cell();
    let l2 = (err.iter().map(|e| e * e).sum::<f64>() * cell).sqrt();
    let tn = (truth.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v * v).sum::<f64>() * cell).sqrt();
    let linf = err.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    Ok(ErrorMetrics { rel_l2: (tn > 0.0).then(|| l2 / tn), l2, hminus1: hminus1_norm(lat, &err, 2)?, linf })
}

/// sqrt(Σ (1 + τ² + |ξ|²)⁻¹ |â|² dτ dξ/(2π)³) from the DFT of the field
/// zero-padded by `pad` in every axis; equals the L² norm with the weight
/// removed.
pub fn hminus1_norm(lat: &SpacetimeLattice, values: &[f64], pad: usize) -> Result<f64> {
    if values.len() != lat.len() {
        return invalid("field length does not match the lattice");
    }
    if pad == 0 {
        return invalid("padding factor must be at least 1");
    }
    let (nt, nx) = (lat.nt * pad, lat.nx * pad);
    let mut data = vec![C64::new(0.0, 0.0); nt * nx * nx];
    for k in 0..lat.nt {
        for j in 0..lat.nx {
            for i in 0..lat.nx {
                data[(k * nx + j) * nx + i] = C64::new(values[lat.index(k, i, j)], 0.0);
            }
        }
    }
    fft3(&mut data, nt, nx, false);
    let mut acc = 0.0;
    for k in 0..nt {
        let tau = frequency(k, nt, lat.dt);
        for j in 0..nx {
            let x1 = frequency(j, nx, lat.dx);
            for i in 0..nx {
                let x0 = frequency(i, nx, lat.dx);
                acc += data[(k * nx + j) * nx + i].norm_sqr() / (1.0 + tau * tau + x0 * x0 + x1 * x1);
            }
        }
    }
    Ok((acc * lat.cell() / data.len() as f64).sqrt())
}

/// H⁻¹ surrogate of a field restricted to `mask`, on the twice-padded lattice.
pub fn hminus1_surrogate(lat: &SpacetimeLattice, values: &[f64], mask: &[bool]) -> Result<f64> {
    if mask.len() != values.len() {
        return invalid("mask length does not match the field");
    }
    let masked: Vec<f64> = values.iter().zip(mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect();
    hminus1_norm(lat, &masked, 2)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionReport {
    pub kind: MeasurementKind,
    pub region: RegionTag,
    pub lattice: SpacetimeLattice,
    /// Recovered absorption a_ref + δa, ordered `[k][j][i]`.
    #[serde(skip)]
    pub field: Vec<f64>,
    /// Recovered δa.
    #[serde(skip)]
    pub difference: Vec<f64>,
    #[serde(skip)]
    pub rays: RayDataSet,
    pub stats: RecoveryStats,
    pub metrics: Option<ErrorMetrics>,
    /// Relative L² distance of the recovered rays to quadrature of the true δa.
    pub ray_error: Option<f64>,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub epsilon: Option<f64>,
    /// C(ε^{μ/2} + 1/|ln ε|) when ε ∈ (0, 1) is known.
    pub bound: Option<f64>,
    pub stability: StabilityParams,
}

impl ReconstructionReport {
    pub fn residuals_csv(&self) -> String {
        let mut s = String::from("iteration,relative_residual[1]\n");
        for (i, r) in self.residuals.iter().enumerate() {
            s.push_str(&format!("{},{:.9e}\n", i + 1, r));
        }
        s
    }
}

fn relative_l2(a: &[f64], b: &[f64]) -> Option<f64> {
    let den = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (den > 0.0).then(|| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() / den)
}

/// recover_ray_data → fourier_slice → invert_cone_spectrum with the support
/// matched to the kind, then a = a_ref + δa. `truth` (the black-box
/// absorption, when known) enables the error metrics.
pub fn reconstruct_absorption(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    blackbox: &CoefficientField,
    reference: &CoefficientField,
    cfg: &AbsorptionConfig,
    truth: Option<&(dyn Fn(f64, Point) -> f64 + Sync)>,
) -> Result<ReconstructionReport> {
    cfg.validate()?;
    let spec = grid.domain;
    let lat = cfg.lattice(&spec);
    let region = validity_region(kind);
    let offsets = cfg.offsets(&lat);
    let rec = recover_ray_data(kind, grid, blackbox, reference, offsets, &cfg.probe, cfg.max_excluded)?;
    let spectrum = fourier_slice(&rec.rays, &lat, SliceOptions { band_limit: cfg.band_limit, anchor_time: None })?;
    let mut cc = CompletionConfig::new(lat.mask(&spec, region), vec![0.0; lat.len()]);
    cc.iterations = cfg.iterations;
    cc.relaxation = cfg.relaxation;
    cc.tolerance = cfg.tolerance;
    cc.scheme = cfg.scheme;
    let done = invert_cone_spectrum(&spectrum, &cc)?;
    let base = lat.sample(|t, x| reference.absorption_at(t, x));
    let field: Vec<f64> = done.field.iter().zip(&base).map(|(d, b)| d + b).collect();
    let (metrics, ray_error) = match truth {
        Some(a) => {
            let cut = |t: f64, x: Point| if spec.in_omega_t(t, x) { a(t, x) } else { 0.0 };
            let metrics = error_metrics(&lat, &spec, &field, &lat.sample(cut), region)?;
            let diff = |t: f64, x: Point| cut(t, x) - reference.absorption_at(t, x);
            let oracle = ray_data_oracle(&diff, spec.horizon, spec.radius(), &rec.rays.dirs, offsets);
            (Some(metrics), relative_l2(&rec.rays.values, &oracle.values))
        }
        None => (None, None),
    };
    let bound = match cfg.epsilon {
        Some(e) if e > 0.0 && e < 1.0 => Some(stability_bound(e, cfg.stability.mu, spec.dim, cfg.stability.constant)?),
        _ => None,
    };
    Ok(ReconstructionReport {
        kind,
        region,
        lattice: lat,
        field,
        difference: done.field,
        rays: rec.rays,
        stats: rec.stats,
        metrics,
        ray_error,
        residuals: done.residuals,
        converged: done.converged,
        epsilon: cfg.epsilon,
        bound,
        stability: cfg.stability,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScatterConfig {
    pub probe: ProbeParams,
    /// Mollifier parameter of φ⁻; defaults to that of φ⁺.
    pub h_prime: Option<f64>,
    /// |y| of the bump centres; defaults to T/2.
    pub center_radius: Option<f64>,
    /// Sinogram offset spacing; defaults to the solver Δx.
    pub offset_spacing: Option<f64>,
    pub plane_n: usize,
    /// Directions with |κ(ω, ω)| below this fraction of the maximum are dropped.
    pub kappa_threshold: f64,
}

impl Default for ScatterConfig {
    fn default() -> Self {
        Self::for_domain(&DomainSpec::desk())
    }
}

impl ScatterConfig {
    pub fn for_domain(spec: &DomainSpec) -> Self {
        ScatterConfig {
            probe: ProbeParams::for_domain(spec),
            h_prime: None,
            center_radius: None,
            offset_spacing: None,
            plane_n: 64,
            kappa_threshold: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScatterReport {
    pub plane: PlaneGrid,
    /// Recovered ρ_bb − ρ_ref on `plane`, ordered `[j][i]`.
    #[serde(skip)]
    pub rho: Vec<f64>,
    #[serde(skip)]
    pub sinogram: Sinogram,
    #[serde(skip)]
    pub oracle_sinogram: Option<Sinogram>,
    pub dropped: Vec<usize>,
    pub warnings: Vec<String>,
    /// Relative L² error on the plane nodes inside Ω.
    pub rel_l2: Option<f64>,
    pub sinogram_error: Option<f64>,
}

/// Scattering density recovery for k = ρ(x)κ(θ, θ') with κ known and equal
/// absorption on both sides. For each direction ω the boundary data of
/// φ⁺ = ρ̄_h(ω, ·)Φ are paired with φ⁻ = ρ̄_{h'}(ω, ·)φ₂(· − y); dividing by
/// κ(ω, ω)∫φ₂ gives ∫₀ᵀ δρ(y + tω) dt. Centres y = s n − (c² − s²)^{1/2} ω
/// with |y| = c put the whole chord of offset s inside [0, T]. Opposite
/// directions fill the same sinogram row and are averaged; the sinogram is
/// inverted by filtered back-projection.
pub fn reconstruct_scattering(
    grid: &SpaceTimeGrid,
    blackbox: &CoefficientField,
    reference: &CoefficientField,
    kappa: &dyn Fn(Point, Point) -> f64,
    cfg: &ScatterConfig,
    truth: Option<&(dyn Fn(Point) -> f64 + Sync)>,
) -> Result<ScatterReport> {
    let params = cfg.probe;
    params.validate()?;
    let spec = grid.domain;
    let nd = grid.ndir();
    if !nd.is_multiple_of(2) {
        return invalid("scattering recovery needs an even number of directions");
    }
    let mut gap = 0.0f64;
    for n in 0..=grid.nt {
        let t = grid.time(n);
        for node in (0..grid.nodes()).filter(|&k| grid.inside(k)) {
            let x = grid.node_point(node);
            gap = gap.max((blackbox.absorption_at(t, x) - reference.absorption_at(t, x)).abs());
        }
    }
    if gap > 1e-12 {
        return invalid(format!("absorption differs between black box and reference (max gap {gap:.3e})"));
    }
    let (r, w) = (spec.r, params.width);
    let c = cfg.center_radius.unwrap_or(0.5 * spec.horizon);
    if c - w < 0.5 * r || c + w > spec.horizon - 0.5 * r || (c * c - 0.25 * r * r).max(0.0).sqrt() - w < 0.5 * r {
        return invalid(format!("centre radius {c} with bump width {w} does not keep the chords inside [0, T]"));
    }
    let hp = cfg.h_prime.unwrap_or(params.mollifier_h());
    let ds = cfg.offset_spacing.unwrap_or(grid.dx);
    if !(ds > 0.0) {
        return invalid("offset spacing must be positive");
    }
    let half = spec.radius();
    let na = nd / 2;
    let mut sino = Sinogram::uniform(na, half, ds);
    let kd: Vec<f64> = (0..nd).map(|m| kappa(grid.quad.dirs[m], grid.quad.dirs[m])).collect();
    let kmax = kd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    for (m, k) in kd.iter().enumerate() {
        if !(k.abs() >= cfg.kappa_threshold * kmax) || kmax == 0.0 {
            dropped.push(m);
            warnings.push(format!("direction {m} dropped: |κ(ω,ω)| = {:.3e} below threshold", k.abs()));
        }
    }
    let ns = sino.ns;
    let offs: Vec<f64> = (0..ns).map(|p| sino.offset(p)).collect();
    let rows = (0..nd)
        .into_par_iter()
        .map(|m| -> Result<Option<Vec<f64>>> {
            if dropped.contains(&m) {
                return Ok(None);
            }
            let th = grid.quad.dirs[m];
            let nrm = [-th[1], th[0]];
            let cloud = direction_cloud(MeasurementKind::BoundaryOnly, grid, blackbox, reference, th, &params)?;
            let dirw = mollifier_weights(grid, hp, th)?;
            let mut row = vec![0.0; ns];
            for (p, &s) in offs.iter().enumerate() {
                if s.abs() >= half {
                    continue;
                }
                let y = axpy(-(c * c - s * s).sqrt(), th, [s * nrm[0], s * nrm[1]]);
                let bump = BumpProfile::new(y, w);
                let (pp, q) = cloud.read(&bump, Some(&dirw));
                if !(q >= params.min_normalization * bump.integral()) {
                    return Err(Error::Coverage(format!("normalization {q:.3e} too small at direction {m}, offset {s:.4}")));
                }
                row[p] = pp / (kd[m] * q);
            }
            Ok(Some(row))
        })
        .collect::<Result<Vec<_>>>()?;
    for a in 0..na {
        let mut count = 0.0;
        if let Some(row) = &rows[a] {
            for p in 0..ns {
                sino.values[a * ns + p] += row[p];
            }
            count += 1.0;
        }
        // θ_{a+N/2} = −θ_a and n flips sign, so offset s maps to −s.
        if let Some(row) = &rows[a + na] {
            for p in 0..ns {
                sino.values[a * ns + p] += row[ns - 1 - p];
            }
            count += 1.0;
        }
        if count == 0.0 {
            return Err(Error::Coverage(format!("no usable direction for sinogram angle {a}")));
        }
        for p in 0..ns {
            sino.values[a * ns + p] /= count;
        }
    }
    let plane = PlaneGrid::covering(&spec, cfg.plane_n);
    let rho = invert_xray(&sino, plane)?;
    let (oracle_sinogram, rel_l2, sinogram_error) = match truth {
        Some(f) => {
            let cut = |x: Point| if spec.contains(x) { f(x) } else { 0.0 };
            let oracle = Sinogram::oracle(na, half, ds, &cut, half);
            let serr = relative_l2(&sino.values, &oracle.values);
            let inside: Vec<usize> = (0..plane.n * plane.n).filter(|&k| spec.contains(plane.point(k % plane.n, k / plane.n))).collect();
            let got: Vec<f64> = inside.iter().map(|&k| rho[k]).collect();
            let want: Vec<f64> = inside.iter().map(|&k| cut(plane.point(k % plane.n, k / plane.n))).collect();
            (Some(oracle), relative_l2(&got, &want), serr)
        }
        None => (None, None, None),
    };
    Ok(ScatterReport { plane, rho, sinogram: sino, oracle_sinogram, dropped, warnings, rel_l2, sinogram_error })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloakConfig {
    pub amplitude: f64,
    pub probes: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for CloakConfig {
    fn default() -> Self {
        CloakConfig { amplitude: 0.5, probes: 12, seed: 11, solver: SolverOptions::cubic() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloakLevel {
    pub nt: usize,
    pub nx: usize,
    /// Probed L¹ distance between numerical and exact free-transport albedo.
    pub baseline: f64,
    pub cloak_distance: f64,
    pub xstar_distance: f64,
    /// max |u| over the cloak shrunk by one cell, with the cloak absorption.
    pub interior_max: f64,
    /// max |u_numerical − u_exact| of free transport over Ω_T.
    pub field_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloakReport {
    pub amplitude: f64,
    pub probes: usize,
    pub levels: Vec<CloakLevel>,
}

impl CloakReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "nt,nx,baseline_l1[1],cloak_distance_l1[1],xstar_distance_l1[1],interior_max[1],field_baseline_linf[1]\n",
        );
        for l in &self.levels {
            s.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                l.nt, l.nx, l.baseline, l.cloak_distance, l.xstar_distance, l.interior_max, l.field_baseline
            ));
        }
        s
    }
}

/// Boundary-only non-uniqueness: the bump-in-cloak absorption (kept one cell
/// inside C_r) against a = 0, and the equal-amplitude bump-in-Xstar, both
/// with the same scattering ρ(x)κ(θ, θ'). One level per grid.
pub fn cloak_demo(
    grids: &[SpaceTimeGrid],
    rho: &(dyn Fn(Point) -> f64 + Sync),
    kappa: &(dyn Fn(Point, Point) -> f64 + Sync),
    cfg: &CloakConfig,
) -> Result<CloakReport> {
    if grids.is_empty() {
        return invalid("cloak demo needs at least one grid");
    }
    let mut levels = Vec::with_capacity(grids.len());
    for grid in grids {
        let spec = grid.domain;
        let absorption = |p: Phantom| -> Result<Absorption> {
            if cfg.amplitude == 0.0 {
                return Ok(Absorption::Zero);
            }
            let e = p.ellipsoid(&spec, cfg.amplitude).expect("bump phantom");
            if p == Phantom::BumpInCloak {
                let margin = grid.dx.max(grid.dt);
                if let Some((t, x)) = e.first_outside(|t, x| t >= margin && norm(x) <= 0.5 * spec.r - t - margin) {
                    return invalid(format!("cloak bump is closer than one cell to ∂C_r at t = {t:.3}, x = {x:?}"));
                }
            } else {
                e.check_support(&spec, RegionTag::Xstar)?;
            }
            Ok(Absorption::func(move |t, x| e.eval(t, x)))
        };
        let kernel = Kernel::separable(grid, rho, kappa);
        let reference = CoefficientField::new(spec, Absorption::Zero, kernel.clone());
        let cloak = CoefficientField::new(spec, absorption(Phantom::BumpInCloak)?, kernel.clone());
        let xstar = CoefficientField::new(spec, absorption(Phantom::BumpInXstar)?, kernel);
        let probes = probe_catalog(grid, cfg.probes, cfg.seed, MeasurementKind::BoundaryOnly)?;
        let baseline = free_transport_baseline(grid, &probes, cfg.solver)?;
        let dc = op_distance(MeasurementKind::BoundaryOnly, grid, &cloak, &reference, &probes, cfg.solver)?;
        let dx = op_distance(MeasurementKind::BoundaryOnly, grid, &xstar, &reference, &probes, cfg.solver)?;
        let zero = CoefficientField::zero(spec);
        let margin = grid.dx;
        let maxima = probes
            .par_iter()
            .map(|p| -> Result<(f64, f64)> {
                let mut interior = 0.0f64;
                solve_forward_observed(
                    grid,
                    Forward::new(&cloak).inflow(Inflow::Flux(&p.inflow)).options(cfg.solver),
                    &mut |v| {
                        for node in (0..grid.nodes()).filter(|&k| grid.inside(k)) {
                            if norm(grid.node_point(node)) <= 0.5 * spec.r - v.time - margin {
                                for m in 0..grid.ndir() {
                                    interior = interior.max(v.get(node, m).norm());
                                }
                            }
                        }
                    },
                )?;
                let mut field_err = 0.0f64;
                solve_forward_observed(
                    grid,
                    Forward::new(&zero).inflow(Inflow::Flux(&p.inflow)).options(cfg.solver),
                    &mut |v| {
                        for node in (0..grid.nodes()).filter(|&k| grid.inside(k)) {
                            let x = grid.node_point(node);
                            for m in 0..grid.ndir() {
                                let th = grid.quad.dirs[m];
                                let s = spec.backward_exit(x, th);
                                let exact = if s <= v.time {
                                    p.inflow.interp(grid, v.time - s, axpy(-s, th, x), m)
                                } else {
                                    C64::new(0.0, 0.0)
                                };
                                field_err = field_err.max((v.get(node, m) - exact).norm());
                            }
                        }
                    },
                )?;
                Ok((interior, field_err))
            })
            .collect::<Result<Vec<_>>>()?;
        let (interior_max, field_baseline) = maxima.iter().fold((0.0f64, 0.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1)));
        levels.push(CloakLevel {
            nt: grid.nt,
            nx: grid.nx,
            baseline,
            cloak_distance: dc.distance,
            xstar_distance: dx.distance,
            interior_max,
            field_baseline,
        });
    }
    Ok(CloakReport { amplitude: cfg.amplitude, probes: cfg.probes, levels })
}
