//! Measurement operators built on the forward solver: the boundary albedo map,
//! boundary plus final-time observation, and the full-data map that also
//! varies the initial state. A probed operator distance stands in for the
//! L¹ operator norm of the difference of two such maps.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{axpy, dot, Point, Side};
use crate::probes::{lambda_sweep, BumpProfile, DirectionWeight, GoProbe, Spatial};
use crate::transport::{
    solve_forward, BoundaryFlux, CoefficientField, Forward, Inflow, LpNorm, Slice, SolverOptions, SpaceTimeGrid, C64,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    /// f ↦ u|Σ⁺ with u(0) = 0.
    BoundaryOnly,
    /// f ↦ (u|Σ⁺, u(T)) with u(0) = 0.
    BoundaryPlusFinal,
    /// (u0, f) ↦ (u|Σ⁺, u(T)).
    FullData,
}

impl MeasurementKind {
    pub fn has_final(self) -> bool {
        self != MeasurementKind::BoundaryOnly
    }

    pub fn accepts_initial(self) -> bool {
        self == MeasurementKind::FullData
    }

    /// Short name used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            MeasurementKind::BoundaryOnly => "boundary",
            MeasurementKind::BoundaryPlusFinal => "final",
            MeasurementKind::FullData => "full",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        match s {
            "boundary" => Some(MeasurementKind::BoundaryOnly),
            "final" => Some(MeasurementKind::BoundaryPlusFinal),
            "full" => Some(MeasurementKind::FullData),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeasurementResponse {
    /// u on Σ⁺ (an envelope when the inflow carries a carrier).
    pub trace: BoundaryFlux,
    /// u(T), present unless the kind is boundary-only.
    pub final_slice: Option<Slice>,
}

impl MeasurementResponse {
    /// ‖u|Σ⁺‖_{𝓛_p^+} + ‖u(T)‖_p.
    pub fn norm(&self, grid: &SpaceTimeGrid, p: f64) -> f64 {
        self.trace.lp_norm(grid, p) + self.final_slice.as_ref().map_or(0.0, |s| s.lp_norm(grid, p))
    }

    pub fn sub(&self, other: &MeasurementResponse) -> MeasurementResponse {
        MeasurementResponse {
            trace: self.trace.sub(&other.trace),
            final_slice: match (&self.final_slice, &other.final_slice) {
                (Some(a), Some(b)) => Some(a.sub(b)),
                _ => None,
            },
        }
    }
}

/// Runs the forward solver and returns the traces the measurement kind observes.
pub fn apply(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    coeff: &CoefficientField,
    f: &BoundaryFlux,
    u0: Option<&Slice>,
    options: SolverOptions,
) -> Result<MeasurementResponse> {
    if f.side != Side::Incoming {
        return invalid("inflow data must live on Σ⁻");
    }
    if let Some(u0) = u0 {
        if !kind.accepts_initial() && !u0.is_zero() {
            return invalid(format!("{kind:?} measurements require a zero initial state"));
        }
    }
    let mut problem = Forward::new(coeff).inflow(Inflow::Flux(f)).options(options);
    if let Some(u0) = u0 {
        problem = problem.initial(u0);
    }
    let run = solve_forward(grid, problem)?;
    Ok(MeasurementResponse { trace: run.trace, final_slice: kind.has_final().then_some(run.final_slice) })
}

/// One probe of the measurement map: inflow on Σ⁻ and, for full data, an
/// initial state.
#[derive(Debug, Clone)]
pub struct AlbedoProbe {
    pub id: String,
    pub inflow: BoundaryFlux,
    pub initial: Option<Slice>,
}

impl AlbedoProbe {
    /// ‖f‖_{𝓛_1^-} + ‖u0‖_1.
    pub fn norm(&self, grid: &SpaceTimeGrid) -> f64 {
        self.inflow.lp_norm(grid, 1.0) + self.initial.as_ref().map_or(0.0, |s| s.lp_norm(grid, 1.0))
    }

    fn normalized(mut self, grid: &SpaceTimeGrid) -> Result<Self> {
        let n = self.norm(grid);
        if !(n > 0.0) {
            return invalid(format!("probe {} has zero norm", self.id));
        }
        let c = C64::new(1.0 / n, 0.0);
        self.inflow = self.inflow.scaled(c);
        self.initial = self.initial.map(|s| s.scaled(c));
        Ok(self)
    }
}

/// Per-probe contribution to a probed distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub probe: String,
    pub distance: f64,
}

/// max over probes of ‖response₁ − response₂‖₁: a lower bound on the operator
/// distance, never the norm itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbedDistance {
    pub kind: MeasurementKind,
    pub distance: f64,
    pub rows: Vec<DistanceRow>,
}

impl ProbedDistance {
    /// CSV with one row per probe.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("probe,distance_l1 [dimensionless]\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.12e}\n", r.probe, r.distance));
        }
        out
    }
}

pub fn op_distance(
    kind: MeasurementKind,
    grid: &SpaceTimeGrid,
    coeff1: &CoefficientField,
    coeff2: &CoefficientField,
    probes: &[AlbedoProbe],
    options: SolverOptions,
) -> Result<ProbedDistance> {
    if probes.is_empty() {
        return invalid("operator distance needs at least one probe");
    }
    let rows = probes
        .par_iter()
        .map(|p| {
            let init = if kind.accepts_initial() { p.initial.as_ref() } else { None };
            let r1 = apply(kind, grid, coeff1, &p.inflow, init, options)?;
            let r2 = apply(kind, grid, coeff2, &p.inflow, init, options)?;
            Ok(DistanceRow { probe: p.id.clone(), distance: r1.sub(&r2).norm(grid, 1.0) })
        })
        .collect::<Result<Vec<_>>>()?;
    let distance = rows.iter().map(|r| r.distance).fold(0.0, f64::max);
    Ok(ProbedDistance { kind, distance, rows })
}

/// Outgoing trace of free transport computed from the inflow along exact
/// characteristics: u(t, x_b, θ) = f(t − s, x_b − sθ, θ), s the chord length.
pub fn exact_free_trace(grid: &SpaceTimeGrid, f: &BoundaryFlux) -> BoundaryFlux {
    let mut out = BoundaryFlux::zeros(grid, Side::Outgoing);
    out.carrier = f.carrier;
    for i in 0..out.levels {
        let t = grid.time(i);
        for b in 0..out.nb {
            let xb = grid.mesh.points[b];
            for m in 0..out.ndir {
                if grid.mesh.side(b, m) != Side::Outgoing {
                    continue;
                }
                let th = grid.quad.dirs[m];
                let s = grid.domain.backward_exit(xb, th);
                if s <= t {
                    let k = out.idx(i, b, m);
                    out.data[k] = f.interp(grid, t - s, axpy(-s, th, xb), m);
                }
            }
        }
    }
    out
}

/// max over probes of ‖numerical − exact‖₁ for free-transport traces: the
/// discretization error floor against which small distances are judged.
pub fn free_transport_baseline(grid: &SpaceTimeGrid, probes: &[AlbedoProbe], options: SolverOptions) -> Result<f64> {
    if probes.is_empty() {
        return invalid("baseline needs at least one probe");
    }
    let zero = CoefficientField::zero(grid.domain);
    let errs = probes
        .par_iter()
        .map(|p| {
            let run = solve_forward(grid, Forward::new(&zero).inflow(Inflow::Flux(&p.inflow)).options(options))?;
            Ok(run.trace.sub(&exact_free_trace(grid, &p.inflow)).lp_norm(grid, 1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Smooth time window vanishing with its first derivatives at the ends.
fn window(t: f64, start: f64, end: f64) -> f64 {
    if t <= start || t >= end {
        return 0.0;
    }
    let s = (t - start) / (end - start);
    (PI * s).sin().powi(4)
}

/// Deterministic seeded family of L¹-normalized probes cycling through GO
/// inflows, localized boundary pulses and random band-limited fluxes.
///
/// GO inflows are envelopes relative to their carrier, exactly as the
/// reconstruction pipelines feed them to the solver, at λ from the default
/// sweep. All profiles vary on scales of at least a few tenths of the domain
/// and vanish smoothly at t = 0 and at grazing directions, so the discretization
/// error of the responses stays well below the effects being probed. For full
/// data every third probe also carries an initial state.
pub fn probe_catalog(grid: &SpaceTimeGrid, count: usize, seed: u64, kind: MeasurementKind) -> Result<Vec<AlbedoProbe>> {
    if count == 0 {
        return invalid("probe catalog needs count ≥ 1");
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let horizon = grid.domain.horizon;
    let r = grid.domain.r;
    let lambdas = lambda_sweep(grid.domain.diameter());
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let grazing = |xb: Point, m: usize| dot(grid.domain.normal(xb), grid.quad.dirs[m]).powi(4);
        let (id, inflow) = match i % 3 {
            0 => {
                let lambda = lambdas[(i / 3) % lambdas.len()];
                let w = rng.gen_range(0.3..0.5) * r;
                let radius = rng.gen_range(0.5 * r + w..horizon - 0.5 * r - w);
                let ang = rng.gen_range(0.0..2.0 * PI);
                let bump = BumpProfile::new([radius * ang.cos(), radius * ang.sin()], w);
                let dir = if rng.gen_bool(0.5) {
                    DirectionWeight::Uniform
                } else {
                    let a: f64 = rng.gen_range(0.0..2.0 * PI);
                    DirectionWeight::Mollified { h: rng.gen_range(0.3..0.7), omega: [a.cos(), a.sin()] }
                };
                let probe = GoProbe::new(1.0, lambda, Spatial::Bump(bump), dir)?;
                let f = BoundaryFlux::from_fn(grid, Side::Incoming, Some(probe.carrier()), |t, x, m| {
                    C64::new(probe.envelope(&grid.quad, t, x, m) * grazing(x, m), 0.0)
                });
                (format!("go-{i}"), f)
            }
            1 => {
                let ang0 = rng.gen_range(0.0..2.0 * PI);
                let dur = rng.gen_range(1.0..1.6);
                let t0 = rng.gen_range(0.0..horizon - dur);
                let spread = rng.gen_range(1.2..2.0);
                let f = BoundaryFlux::from_fn(grid, Side::Incoming, None, |t, x, m| {
                    let ang = x[1].atan2(x[0]);
                    let d = ((ang - ang0 + PI).rem_euclid(2.0 * PI) - PI) / spread;
                    let sp = if d.abs() < 1.0 { (1.0 - d * d).powi(4) } else { 0.0 };
                    C64::new(window(t, t0, t0 + dur) * sp * grazing(x, m), 0.0)
                });
                (format!("pulse-{i}"), f)
            }
            _ => {
                let modes: Vec<(f64, f64, f64, f64)> = (0..3)
                    .map(|_| {
                        (
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(0..3) as f64,
                            rng.gen_range(0..2) as f64,
                            rng.gen_range(0.0..2.0 * PI),
                        )
                    })
                    .collect();
                let f = BoundaryFlux::from_fn(grid, Side::Incoming, None, |t, x, m| {
                    let ang = x[1].atan2(x[0]);
                    let th = grid.quad.angle(m);
                    let v: f64 = modes
                        .iter()
                        .map(|&(c, k, l, ph)| c * (k * ang + l * th + ph + 2.0 * PI * t / horizon).cos())
                        .sum();
                    C64::new(window(t, 0.0, horizon) * v * grazing(x, m), 0.0)
                });
                (format!("band-{i}"), f)
            }
        };
        let initial = (kind.accepts_initial() && i % 3 == 2).then(|| {
            let c = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
            let a: f64 = rng.gen_range(0.0..2.0 * PI);
            let b = BumpProfile::new(c, 0.4 * r);
            Slice::from_fn(grid, |x, m| C64::new(b.eval(x) * (1.0 + 0.5 * (grid.quad.angle(m) - a).cos()), 0.0))
        });
        out.push(AlbedoProbe { id, inflow, initial }.normalized(grid)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainSpec;
    use crate::transport::{Absorption, Kernel};

    fn grid() -> SpaceTimeGrid {
        SpaceTimeGrid::new(DomainSpec::desk(), 32, 24, 16).unwrap()
    }

    #[test]
    fn test_catalog_deterministic_and_normalized() {
        let g = grid();
        let a = probe_catalog(&g, 6, 7, MeasurementKind::FullData).unwrap();
        let b = probe_catalog(&g, 6, 7, MeasurementKind::FullData).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.inflow.data, q.inflow.data);
            assert_eq!(p.initial, q.initial);
            assert!((p.norm(&g) - 1.0).abs() < 1e-10);
        }
        assert!(a.iter().any(|p| p.initial.is_some()));
        assert!(probe_catalog(&g, 0, 7, MeasurementKind::BoundaryOnly).is_err());
    }

    #[test]
    fn test_apply_free_is_free_trace_and_linear() {
        let g = grid();
        let zero = CoefficientField::zero(g.domain);
        let probes = probe_catalog(&g, 3, 3, MeasurementKind::BoundaryOnly).unwrap();
        let (f1, f2) = (&probes[1].inflow, &probes[2].inflow);
        let coeff = CoefficientField::new(g.domain, Absorption::func(|_, x: Point| 0.5 + x[0]), Kernel::full(&g, |_, _, _| 0.1));
        let r1 = apply(MeasurementKind::BoundaryOnly, &g, &coeff, f1, None, SolverOptions::default()).unwrap();
        let r2 = apply(MeasurementKind::BoundaryOnly, &g, &coeff, f2, None, SolverOptions::default()).unwrap();
        let (al, be) = (C64::new(2.0, -1.0), C64::new(0.5, 0.0));
        let mix = f1.scaled(al).add(&f2.scaled(be));
        let r = apply(MeasurementKind::BoundaryOnly, &g, &coeff, &mix, None, SolverOptions::default()).unwrap();
        let lin = r1.trace.scaled(al).add(&r2.trace.scaled(be));
        assert!(r.trace.sub(&lin).max_abs() < 1e-12 * lin.max_abs().max(1.0));
        let free = apply(MeasurementKind::BoundaryOnly, &g, &zero, f1, None, SolverOptions::default()).unwrap();
        assert!(free.final_slice.is_none());
        let fin = apply(MeasurementKind::BoundaryPlusFinal, &g, &zero, f1, None, SolverOptions::default()).unwrap();
        assert_eq!(free.trace.data, fin.trace.data);
        assert!(fin.final_slice.is_some());
    }

    #[test]
    fn test_apply_rejects_initial_for_boundary_kinds() {
        let g = grid();
        let zero = CoefficientField::zero(g.domain);
        let f = BoundaryFlux::zeros(&g, Side::Incoming);
        let u0 = Slice::from_fn(&g, |_, _| C64::new(1.0, 0.0));
        assert!(apply(MeasurementKind::BoundaryOnly, &g, &zero, &f, Some(&u0), SolverOptions::default()).is_err());
        assert!(apply(MeasurementKind::BoundaryPlusFinal, &g, &zero, &f, Some(&u0), SolverOptions::default()).is_err());
        assert!(apply(MeasurementKind::FullData, &g, &zero, &f, Some(&u0), SolverOptions::default()).is_ok());
    }

    #[test]
    fn test_distance_identical_is_zero_and_empty_rejected() {
        let g = grid();
        let c = CoefficientField::new(g.domain, Absorption::func(|_, _| 0.4), Kernel::Zero);
        let probes = probe_catalog(&g, 3, 1, MeasurementKind::FullData).unwrap();
        let d = op_distance(MeasurementKind::FullData, &g, &c, &c, &probes, SolverOptions::default()).unwrap();
        assert!(d.distance < 1e-12);
        assert_eq!(d.rows.len(), 3);
        assert!(d.to_csv().starts_with("probe,"));
        assert!(op_distance(MeasurementKind::FullData, &g, &c, &c, &[], SolverOptions::default()).is_err());
    }

    #[test]
    fn test_kind_names_roundtrip() {
        for k in [MeasurementKind::BoundaryOnly, MeasurementKind::BoundaryPlusFinal, MeasurementKind::FullData] {
            assert_eq!(MeasurementKind::from_short_name(k.short_name()), Some(k));
        }
        assert_eq!(MeasurementKind::from_short_name("bogus"), None);
    }
}
