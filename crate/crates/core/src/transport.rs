//! Forward and adjoint solvers for the linear Boltzmann equation
//!
//! ∂_t u + θ·∇u + a(t,x) u = L_k[u] + v,   u(0) = u0,   u|Σ⁻ = f,
//!
//! together with traces, L^p norms and the a-priori estimate check.
//!
//! Each time step is split into exact semi-Lagrangian advection with bilinear
//! (or, optionally, cubic) interpolation, an absorption factor from the midpoint rule along the
//! characteristic, and an explicit scattering/source increment. Characteristics
//! that leave Ω within a step are clipped at Γ⁻ and take the inflow value at the
//! crossing time. The lattice carries a halo: upstream exterior nodes hold the
//! inflow continued along characteristics, other exterior nodes are advected
//! freely (a = k = 0 outside Ω), so interpolation near ∂Ω stays consistent.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    axpy, boundary_mesh, dot, sphere_quadrature, BoundaryMesh, DomainSpec, Point, Side,
    SpacetimeLattice, SphereQuadrature,
};

pub type C64 = Complex64;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Discretization of [0,T] × Ω × S¹: time levels, a cell-centred square
/// lattice over the bounding box of Ω, directions and boundary mesh.
#[derive(Debug, Clone)]
pub struct SpaceTimeGrid {
    pub domain: DomainSpec,
    pub nt: usize,
    pub dt: f64,
    pub nx: usize,
    pub dx: f64,
    /// Centre of lattice node (0, 0).
    pub origin: Point,
    pub quad: SphereQuadrature,
    pub mesh: BoundaryMesh,
    inside: Vec<bool>,
}

impl SpaceTimeGrid {
    /// Grid with `4·nx` boundary points.
    pub fn new(domain: DomainSpec, nt: usize, nx: usize, ndir: usize) -> Result<Self> {
        Self::with_boundary_points(domain, nt, nx, ndir, 4 * nx)
    }

    pub fn with_boundary_points(
        domain: DomainSpec,
        nt: usize,
        nx: usize,
        ndir: usize,
        nb: usize,
    ) -> Result<Self> {
        domain.validate()?;
        if nt == 0 || nx < 4 {
            return invalid("grid needs nt ≥ 1 and nx ≥ 4");
        }
        let quad = sphere_quadrature(ndir, domain.dim)?;
        let mesh = boundary_mesh(&domain, &quad, nb)?;
        let h = domain.half_extent();
        let side = 2.0 * h[0].max(h[1]);
        let dx = side / nx as f64;
        let origin = [-0.5 * side + 0.5 * dx, -0.5 * side + 0.5 * dx];
        let mut inside = Vec::with_capacity(nx * nx);
        for j in 0..nx {
            for i in 0..nx {
                inside.push(domain.contains([origin[0] + i as f64 * dx, origin[1] + j as f64 * dx]));
            }
        }
        Ok(SpaceTimeGrid {
            domain,
            nt,
            dt: domain.horizon / nt as f64,
            nx,
            dx,
            origin,
            quad,
            mesh,
            inside,
        })
    }

    /// Desk scale: 64² lattice, 128 steps, 32 directions on the default domain.
    pub fn desk() -> Self {
        Self::new(DomainSpec::desk(), 128, 64, 32).expect("desk grid is valid")
    }

    /// Same domain and directions with Δt and Δx halved.
    pub fn refined(&self) -> Result<Self> {
        Self::with_boundary_points(self.domain, 2 * self.nt, 2 * self.nx, self.ndir(), 2 * self.mesh.len())
    }

    pub fn ndir(&self) -> usize {
        self.quad.len()
    }

    pub fn nodes(&self) -> usize {
        self.nx * self.nx
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize) -> Point {
        [self.origin[0] + i as f64 * self.dx, self.origin[1] + j as f64 * self.dx]
    }

    #[inline]
    pub fn node_point(&self, node: usize) -> Point {
        self.point(node % self.nx, node / self.nx)
    }

    #[inline]
    pub fn inside(&self, node: usize) -> bool {
        self.inside[node]
    }

    #[inline]
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    /// Trapezoid weight of time level `n` on [0, T].
    #[inline]
    pub fn time_weight(&self, n: usize) -> f64 {
        if n == 0 || n == self.nt {
            0.5 * self.dt
        } else {
            self.dt
        }
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dx
    }

    /// Cell-centred spacetime lattice matching this grid's spatial lattice.
    pub fn lattice(&self) -> SpacetimeLattice {
        SpacetimeLattice::covering(&self.domain, self.nt, self.nx)
    }
}

/// Phase e^{iσλ(t − x·θ)} carried analytically by the solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Carrier {
    pub lambda: f64,
    /// +1 or −1.
    pub sign: f64,
}

impl Carrier {
    pub fn new(lambda: f64, sign: f64) -> Self {
        Carrier { lambda, sign: sign.signum() }
    }

    #[inline]
    pub fn phase(&self, t: f64, x: Point, theta: Point) -> C64 {
        C64::from_polar(1.0, self.sign * self.lambda * (t - dot(x, theta)))
    }

    pub fn reversed(&self) -> Self {
        Carrier { lambda: self.lambda, sign: -self.sign }
    }
}

/// Samples u(x_j, θ_m) at one time, node-major (`data[node * ndir + m]`), zero
/// at lattice nodes outside Ω.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub nx: usize,
    pub ndir: usize,
    pub data: Vec<C64>,
}

impl Slice {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Slice { nx: grid.nx, ndir: grid.ndir(), data: vec![ZERO; grid.nodes() * grid.ndir()] }
    }

    pub fn from_fn(grid: &SpaceTimeGrid, f: impl Fn(Point, usize) -> C64) -> Self {
        let mut s = Self::zeros(grid);
        let nd = grid.ndir();
        for node in 0..grid.nodes() {
            if grid.inside(node) {
                let x = grid.node_point(node);
                for m in 0..nd {
                    s.data[node * nd + m] = f(x, m);
                }
            }
        }
        s
    }

    #[inline]
    pub fn get(&self, node: usize, m: usize) -> C64 {
        self.data[node * self.ndir + m]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|z| *z == ZERO)
    }

    pub fn scaled(&self, c: C64) -> Self {
        Slice { nx: self.nx, ndir: self.ndir, data: self.data.iter().map(|z| z * c).collect() }
    }

    pub fn sub(&self, other: &Slice) -> Self {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Slice { nx: self.nx, ndir: self.ndir, data }
    }

    pub fn add(&self, other: &Slice) -> Self {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Slice { nx: self.nx, ndir: self.ndir, data }
    }
}

/// Solution samples at every time level 0..=nt.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticField {
    pub slices: Vec<Slice>,
    pub carrier: Option<Carrier>,
}

impl KineticField {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Samples on [0,T] × Γ^± at the time levels and boundary mesh of a grid,
/// stored as `data[(i * nb + b) * ndir + m]`; entries off the matching side
/// are zero. With a carrier the physical value is `data · carrier.phase`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFlux {
    pub side: Side,
    pub levels: usize,
    pub nb: usize,
    pub ndir: usize,
    pub carrier: Option<Carrier>,
    pub data: Vec<C64>,
}

impl BoundaryFlux {
    pub fn zeros(grid: &SpaceTimeGrid, side: Side) -> Self {
        let (levels, nb, ndir) = (grid.nt + 1, grid.mesh.len(), grid.ndir());
        BoundaryFlux { side, levels, nb, ndir, carrier: None, data: vec![ZERO; levels * nb * ndir] }
    }

    /// Samples `f(t, x_b, m)` on the pairs of the requested side.
    pub fn from_fn(
        grid: &SpaceTimeGrid,
        side: Side,
        carrier: Option<Carrier>,
        f: impl Fn(f64, Point, usize) -> C64,
    ) -> Self {
        let mut out = Self::zeros(grid, side);
        out.carrier = carrier;
        for i in 0..out.levels {
            let t = grid.time(i);
            for b in 0..out.nb {
                let xb = grid.mesh.points[b];
                for m in 0..out.ndir {
                    if grid.mesh.side(b, m) == side {
                        out.data[(i * out.nb + b) * out.ndir + m] = f(t, xb, m);
                    }
                }
            }
        }
        out
    }

    #[inline]
    pub fn idx(&self, i: usize, b: usize, m: usize) -> usize {
        (i * self.nb + b) * self.ndir + m
    }

    #[inline]
    pub fn get(&self, i: usize, b: usize, m: usize) -> C64 {
        self.data[self.idx(i, b, m)]
    }

    /// Value at an arbitrary time and boundary point: linear in time (clamped
    /// to [0, T]) and linear along the boundary between mesh points.
    pub fn interp(&self, grid: &SpaceTimeGrid, t: f64, x: Point, m: usize) -> C64 {
        let u = (t / grid.dt).clamp(0.0, (self.levels - 1) as f64);
        let i0 = (u.floor() as usize).min(self.levels - 1);
        let i1 = (i0 + 1).min(self.levels - 1);
        let wt = u - i0 as f64;
        let (b0, b1, wb) = grid.mesh.locate(x);
        let at = |i: usize| self.get(i, b0, m) * (1.0 - wb) + self.get(i, b1, m) * wb;
        at(i0) * (1.0 - wt) + at(i1) * wt
    }

    /// Materializes the carrier into the samples.
    pub fn to_physical(&self, grid: &SpaceTimeGrid) -> Self {
        let Some(c) = self.carrier else { return self.clone() };
        let mut out = self.clone();
        out.carrier = None;
        for i in 0..self.levels {
            let t = grid.time(i);
            for b in 0..self.nb {
                for m in 0..self.ndir {
                    let k = self.idx(i, b, m);
                    out.data[k] *= c.phase(t, grid.mesh.points[b], grid.quad.dirs[m]);
                }
            }
        }
        out
    }

    pub fn scaled(&self, c: C64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|z| *z *= c);
        out
    }

    /// Difference of two fluxes on the same side and carrier.
    pub fn sub(&self, other: &BoundaryFlux) -> Self {
        debug_assert_eq!(self.carrier, other.carrier);
        let mut out = self.clone();
        out.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a -= b);
        out
    }

    pub fn add(&self, other: &BoundaryFlux) -> Self {
        debug_assert_eq!(self.carrier, other.carrier);
        let mut out = self.clone();
        out.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Quadrature norms: ‖·‖_{L^p(Q)} for slices, ‖·‖_{L^p(Q_T)} for fields and
/// ‖·‖_{𝓛_p^±(Σ^±)} (with the dξ weight) for boundary fluxes.
pub trait LpNorm {
    fn lp_norm(&self, grid: &SpaceTimeGrid, p: f64) -> f64;
}

fn finish_norm(acc: f64, p: f64) -> f64 {
    if p.is_infinite() {
        acc
    } else {
        acc.powf(1.0 / p)
    }
}

impl LpNorm for Slice {
    fn lp_norm(&self, grid: &SpaceTimeGrid, p: f64) -> f64 {
        finish_norm(slice_power(grid, self, p), p)
    }
}

fn slice_power(grid: &SpaceTimeGrid, s: &Slice, p: f64) -> f64 {
    let nd = grid.ndir();
    let mut acc = 0.0;
    for node in 0..grid.nodes() {
        if !grid.inside(node) {
            continue;
        }
        for m in 0..nd {
            let v = s.data[node * nd + m].norm();
            if p.is_infinite() {
                acc = f64::max(acc, v);
            } else {
                acc += grid.quad.weights[m] * v.powf(p);
            }
        }
    }
    if p.is_infinite() {
        acc
    } else {
        acc * grid.cell_area()
    }
}

impl LpNorm for KineticField {
    fn lp_norm(&self, grid: &SpaceTimeGrid, p: f64) -> f64 {
        let mut acc = 0.0;
        for (n, s) in self.slices.iter().enumerate() {
            let v = slice_power(grid, s, p);
            if p.is_infinite() {
                acc = f64::max(acc, v);
            } else {
                acc += grid.time_weight(n) * v;
            }
        }
        finish_norm(acc, p)
    }
}

impl LpNorm for BoundaryFlux {
    fn lp_norm(&self, grid: &SpaceTimeGrid, p: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.levels {
            let tw = grid.time_weight(i);
            for b in 0..self.nb {
                for m in 0..self.ndir {
                    if grid.mesh.side(b, m) != self.side {
                        continue;
                    }
                    let v = self.get(i, b, m).norm();
                    if p.is_infinite() {
                        acc = f64::max(acc, v);
                    } else {
                        acc += tw * grid.mesh.dxi(b, m) * v.powf(p);
                    }
                }
            }
        }
        finish_norm(acc, p)
    }
}

/// Absorption a(t, x), extended by zero outside Ω_T when evaluated through
/// [`CoefficientField::absorption_at`].
#[derive(Clone)]
pub enum Absorption {
    Zero,
    Func(Arc<dyn Fn(f64, Point) -> f64 + Send + Sync>),
    Sampled { lattice: SpacetimeLattice, values: Arc<Vec<f64>> },
}

impl std::fmt::Debug for Absorption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Absorption::Zero => write!(f, "Zero"),
            Absorption::Func(_) => write!(f, "Func(..)"),
            Absorption::Sampled { lattice, .. } => write!(f, "Sampled({lattice:?})"),
        }
    }
}

impl Absorption {
    pub fn func(f: impl Fn(f64, Point) -> f64 + Send + Sync + 'static) -> Self {
        Absorption::Func(Arc::new(f))
    }

    /// Raw evaluation without the Ω_T cut-off.
    #[inline]
    pub fn eval_raw(&self, t: f64, x: Point) -> f64 {
        match self {
            Absorption::Zero => 0.0,
            Absorption::Func(f) => f(t, x),
            Absorption::Sampled { lattice, values } => lattice.interpolate(values, t, x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Absorption::Zero)
    }
}

/// Scattering kernel k(x, θ_m, θ_m') on the interior lattice nodes.
#[derive(Debug, Clone)]
pub enum Kernel {
    Zero,
    /// `values[(node * ndir + m) * ndir + m']`.
    Full { ndir: usize, values: Arc<Vec<f64>> },
    /// k = ρ(x) κ(θ, θ'); `kappa[m * ndir + m']`.
    Separable { ndir: usize, rho: Arc<Vec<f64>>, kappa: Arc<Vec<f64>> },
}

impl Kernel {
    /// Full kernel sampled from `k(x, θ, θ')` at the lattice nodes inside Ω.
    pub fn full(grid: &SpaceTimeGrid, k: impl Fn(Point, Point, Point) -> f64) -> Self {
        let nd = grid.ndir();
        let mut values = vec![0.0; grid.nodes() * nd * nd];
        for node in 0..grid.nodes() {
            if !grid.inside(node) {
                continue;
            }
            let x = grid.node_point(node);
            for m in 0..nd {
                for mp in 0..nd {
                    values[(node * nd + m) * nd + mp] = k(x, grid.quad.dirs[m], grid.quad.dirs[mp]);
                }
            }
        }
        Kernel::Full { ndir: nd, values: Arc::new(values) }
    }

    pub fn separable(
        grid: &SpaceTimeGrid,
        rho: impl Fn(Point) -> f64,
        kappa: impl Fn(Point, Point) -> f64,
    ) -> Self {
        let nd = grid.ndir();
        let rho = (0..grid.nodes())
            .map(|node| if grid.inside(node) { rho(grid.node_point(node)) } else { 0.0 })
            .collect();
        let mut kap = vec![0.0; nd * nd];
        for m in 0..nd {
            for mp in 0..nd {
                kap[m * nd + mp] = kappa(grid.quad.dirs[m], grid.quad.dirs[mp]);
            }
        }
        Kernel::Separable { ndir: nd, rho: Arc::new(rho), kappa: Arc::new(kap) }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Kernel::Zero)
    }

    /// k(x_node, θ_m, θ_m').
    #[inline]
    pub fn value(&self, node: usize, m: usize, mp: usize) -> f64 {
        match self {
            Kernel::Zero => 0.0,
            Kernel::Full { ndir, values } => values[(node * ndir + m) * ndir + mp],
            Kernel::Separable { ndir, rho, kappa } => rho[node] * kappa[m * ndir + mp],
        }
    }

    /// The separable kernel written out as a full array.
    pub fn materialize(&self, grid: &SpaceTimeGrid) -> Kernel {
        match self {
            Kernel::Separable { .. } => {
                let nd = grid.ndir();
                let mut values = vec![0.0; grid.nodes() * nd * nd];
                for node in 0..grid.nodes() {
                    for m in 0..nd {
                        for mp in 0..nd {
                            values[(node * nd + m) * nd + mp] = self.value(node, m, mp);
                        }
                    }
                }
                Kernel::Full { ndir: nd, values: Arc::new(values) }
            }
            other => other.clone(),
        }
    }

    /// Kernel of the time-reversed adjoint problem: k̃(x, θ, θ') = k(x, −θ', −θ).
    fn reversed(&self, quad: &SphereQuadrature) -> Result<Kernel> {
        let nd = quad.len();
        let opp = |m: usize| quad.opposite(m).ok_or_else(|| Error::InvalidInput("adjoint needs an even direction count".into()));
        match self {
            Kernel::Zero => Ok(Kernel::Zero),
            Kernel::Full { values, .. } => {
                let nodes = values.len() / (nd * nd);
                let mut out = vec![0.0; values.len()];
                for node in 0..nodes {
                    for m in 0..nd {
                        for mp in 0..nd {
                            out[(node * nd + m) * nd + mp] = values[(node * nd + opp(mp)?) * nd + opp(m)?];
                        }
                    }
                }
                Ok(Kernel::Full { ndir: nd, values: Arc::new(out) })
            }
            Kernel::Separable { rho, kappa, .. } => {
                let mut out = vec![0.0; nd * nd];
                for m in 0..nd {
                    for mp in 0..nd {
                        out[m * nd + mp] = kappa[opp(mp)? * nd + opp(m)?];
                    }
                }
                Ok(Kernel::Separable { ndir: nd, rho: rho.clone(), kappa: Arc::new(out) })
            }
        }
    }

    /// Constant angular factor, when the kernel is ρ(x)·c.
    fn isotropic_factor(&self) -> Option<f64> {
        match self {
            Kernel::Separable { kappa, .. } => {
                let c = kappa[0];
                kappa.iter().all(|&v| v == c).then_some(c)
            }
            _ => None,
        }
    }
}

/// L_k[u](θ_m) = Σ_m' w_m' k(x, θ_m, θ_m') u(θ_m') at one lattice node, or
/// the adjoint L_k^*[u](θ_m) = Σ_m' w_m' k(x, θ_m', θ_m) u(θ_m').
pub fn scatter_apply(
    kernel: &Kernel,
    node: usize,
    weights: &[f64],
    u: &[C64],
    adjoint: bool,
) -> Result<Vec<C64>> {
    let nd = weights.len();
    if u.len() != nd {
        return invalid(format!("direction count mismatch: {} values for {} directions", u.len(), nd));
    }
    if let Kernel::Full { ndir, .. } | Kernel::Separable { ndir, .. } = kernel {
        if *ndir != nd {
            return invalid(format!("kernel has {ndir} directions, quadrature has {nd}"));
        }
    }
    let mut out = vec![ZERO; nd];
    for (m, o) in out.iter_mut().enumerate() {
        let mut acc = ZERO;
        for mp in 0..nd {
            let k = if adjoint { kernel.value(node, mp, m) } else { kernel.value(node, m, mp) };
            acc += u[mp] * (weights[mp] * k);
        }
        *o = acc;
    }
    Ok(out)
}

/// Bounds M0 ≥ ‖a‖_∞, M1 ≥ sup ∫|k| dθ', M2 ≥ sup ∫|k| dθ.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Bounds {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
}

/// Absorption and scattering on a domain.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub domain: DomainSpec,
    pub absorption: Absorption,
    pub kernel: Kernel,
    /// Declared admissible-set bounds; sampled values are checked against them.
    pub declared: Option<Bounds>,
}

impl CoefficientField {
    pub fn new(domain: DomainSpec, absorption: Absorption, kernel: Kernel) -> Self {
        CoefficientField { domain, absorption, kernel, declared: None }
    }

    pub fn zero(domain: DomainSpec) -> Self {
        Self::new(domain, Absorption::Zero, Kernel::Zero)
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.declared = Some(bounds);
        self
    }

    /// a(t, x) extended by zero outside Ω_T.
    #[inline]
    pub fn absorption_at(&self, t: f64, x: Point) -> f64 {
        if self.absorption.is_zero() || !(0.0..=self.domain.horizon).contains(&t) || !self.domain.contains(x) {
            0.0
        } else {
            self.absorption.eval_raw(t, x)
        }
    }

    /// Attenuation continued a distance `s` outside Ω from the entry point
    /// `at`, so ghost values join the interior solution smoothly.
    #[inline]
    fn ghost_gain(&self, t: f64, at: Point, s: f64) -> f64 {
        if self.absorption.is_zero() {
            1.0
        } else {
            (s * self.absorption.eval_raw(t.clamp(0.0, self.domain.horizon), at)).exp()
        }
    }

    /// Bounds measured on the grid (absorption at every node and half level,
    /// kernel row/column sums by quadrature), combined with any declared bounds.
    pub fn bounds(&self, grid: &SpaceTimeGrid) -> Bounds {
        let nd = grid.ndir();
        let mut b = Bounds::default();
        if !self.absorption.is_zero() {
            for n in 0..=2 * grid.nt {
                let t = 0.5 * n as f64 * grid.dt;
                for node in 0..grid.nodes() {
                    if grid.inside(node) {
                        b.m0 = b.m0.max(self.absorption_at(t, grid.node_point(node)).abs());
                    }
                }
            }
        }
        if !self.kernel.is_zero() {
            for node in 0..grid.nodes() {
                if !grid.inside(node) {
                    continue;
                }
                for m in 0..nd {
                    let (mut row, mut col) = (0.0, 0.0);
                    for mp in 0..nd {
                        row += grid.quad.weights[mp] * self.kernel.value(node, m, mp).abs();
                        col += grid.quad.weights[mp] * self.kernel.value(node, mp, m).abs();
                    }
                    b.m1 = b.m1.max(row);
                    b.m2 = b.m2.max(col);
                }
            }
        }
        if let Some(d) = self.declared {
            b.m0 = b.m0.max(d.m0);
            b.m1 = b.m1.max(d.m1);
            b.m2 = b.m2.max(d.m2);
        }
        b
    }

    /// Fails when sampled values exceed the declared bounds.
    pub fn check_admissible(&self, grid: &SpaceTimeGrid) -> Result<()> {
        let Some(d) = self.declared else { return Ok(()) };
        let measured = CoefficientField { declared: None, ..self.clone() }.bounds(grid);
        let tol = 1e-12;
        let mut bad = Vec::new();
        if measured.m0 > d.m0 * (1.0 + tol) + tol {
            bad.push(format!("‖a‖∞ = {:.4} > M0 = {}", measured.m0, d.m0));
        }
        if measured.m1 > d.m1 * (1.0 + tol) + tol {
            bad.push(format!("sup ∫|k|dθ' = {:.4} > M1 = {}", measured.m1, d.m1));
        }
        if measured.m2 > d.m2 * (1.0 + tol) + tol {
            bad.push(format!("sup ∫|k|dθ = {:.4} > M2 = {}", measured.m2, d.m2));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Admissibility(bad.join(", ")))
        }
    }
}

/// Inflow data on Σ⁻ (or, for the adjoint, data on Σ⁺).
#[derive(Clone, Copy)]
pub enum Inflow<'a> {
    Zero,
    Flux(&'a BoundaryFlux),
    Func(&'a (dyn Fn(f64, Point, usize) -> C64 + Sync)),
}

impl Inflow<'_> {
    #[inline]
    fn eval(&self, grid: &SpaceTimeGrid, t: f64, x: Point, m: usize) -> C64 {
        match self {
            Inflow::Zero => ZERO,
            Inflow::Flux(f) => f.interp(grid, t, x, m),
            Inflow::Func(f) => f(t.clamp(0.0, grid.domain.horizon), x, m),
        }
    }

    fn carrier(&self) -> Option<Carrier> {
        match self {
            Inflow::Flux(f) => f.carrier,
            _ => None,
        }
    }
}

/// Volumetric source v(t, x, ·), filled for all directions at one node.
pub trait Source: Sync {
    fn fill(&self, t: f64, x: Point, node: usize, out: &mut [C64]);
}

/// Source given by a closure `v(t, x, m)`.
pub struct FnSource<F>(pub F);

impl<F: Fn(f64, Point, usize) -> C64 + Sync> Source for FnSource<F> {
    fn fill(&self, t: f64, x: Point, _node: usize, out: &mut [C64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = (self.0)(t, x, m);
        }
    }
}

/// Spatial interpolation used at departure points and boundary traces.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Bilinear: positivity preserving, error O(Δx²/Δt) from accumulated smoothing.
    Linear,
    /// Tensor cubic Lagrange: error O(Δx⁴/Δt), not positivity preserving.
    #[default]
    Cubic,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Heun predictor-corrector on the scattering increment.
    pub predictor_corrector: bool,
    /// Keep every time level (memory grows with nt · nodes · ndir).
    pub record_field: bool,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl SolverOptions {
    pub fn cubic() -> Self {
        SolverOptions { interpolation: Interpolation::Cubic, ..Default::default() }
    }
}

/// A forward problem: coefficients, initial state, inflow and source.
#[derive(Clone, Copy)]
pub struct Forward<'a> {
    pub coeff: &'a CoefficientField,
    pub initial: Option<&'a Slice>,
    pub inflow: Inflow<'a>,
    pub source: Option<&'a dyn Source>,
    /// When set, all data and outputs are envelopes relative to this carrier.
    pub carrier: Option<Carrier>,
    pub options: SolverOptions,
}

impl<'a> Forward<'a> {
    pub fn new(coeff: &'a CoefficientField) -> Self {
        Forward { coeff, initial: None, inflow: Inflow::Zero, source: None, carrier: None, options: SolverOptions::default() }
    }

    pub fn initial(mut self, u0: &'a Slice) -> Self {
        self.initial = Some(u0);
        self
    }

    pub fn inflow(mut self, f: Inflow<'a>) -> Self {
        if self.carrier.is_none() {
            self.carrier = f.carrier();
        }
        self.inflow = f;
        self
    }

    pub fn source(mut self, v: &'a dyn Source) -> Self {
        self.source = Some(v);
        self
    }

    pub fn carrier(mut self, c: Option<Carrier>) -> Self {
        self.carrier = c;
        self
    }

    pub fn options(mut self, o: SolverOptions) -> Self {
        self.options = o;
        self
    }
}

/// Outputs of a forward run.
#[derive(Debug, Clone)]
pub struct ForwardRun {
    /// u on Σ⁺.
    pub trace: BoundaryFlux,
    /// u(T).
    pub final_slice: Slice,
    pub field: Option<KineticField>,
}

/// Read access to the solver state at one time level.
pub struct SliceView<'g> {
    grid: &'g SpaceTimeGrid,
    pad: &'g Padded,
    interpolation: Interpolation,
    data: &'g [C64],
    pub level: usize,
    pub time: f64,
}

impl SliceView<'_> {
    /// u(x_node, θ_m) for an interior lattice node (zero outside Ω).
    #[inline]
    pub fn get(&self, node: usize, m: usize) -> C64 {
        if !self.grid.inside(node) {
            return ZERO;
        }
        let p = self.pad.pad_index(node, self.grid.nx);
        self.data[p * self.pad.ndir + m]
    }

    pub fn to_slice(&self) -> Slice {
        let mut s = Slice::zeros(self.grid);
        let nd = self.grid.ndir();
        for node in 0..self.grid.nodes() {
            if self.grid.inside(node) {
                let p = self.pad.pad_index(node, self.grid.nx);
                s.data[node * nd..(node + 1) * nd].copy_from_slice(&self.data[p * nd..(p + 1) * nd]);
            }
        }
        s
    }

    /// Interpolation of the (halo-extended) state at an arbitrary point.
    pub fn interp(&self, x: Point, m: usize) -> C64 {
        match self.pad.stencil(x, self.interpolation) {
            Some(st) => st.apply(self.data, self.pad.np, self.pad.ndir, m),
            None => ZERO,
        }
    }
}

/// Halo-padded lattice geometry.
#[derive(Debug, Clone, Copy)]
struct Padded {
    np: usize,
    halo: usize,
    ndir: usize,
    lo: Point,
    dx: f64,
}

impl Padded {
    fn new(grid: &SpaceTimeGrid) -> Self {
        let halo = (grid.dt / grid.dx).ceil() as usize + 3;
        let np = grid.nx + 2 * halo;
        let lo = [grid.origin[0] - halo as f64 * grid.dx, grid.origin[1] - halo as f64 * grid.dx];
        Padded { np, halo, ndir: grid.ndir(), lo, dx: grid.dx }
    }

    #[inline]
    fn point(&self, p: usize) -> Point {
        [self.lo[0] + (p % self.np) as f64 * self.dx, self.lo[1] + (p / self.np) as f64 * self.dx]
    }

    #[inline]
    fn pad_index(&self, node: usize, nx: usize) -> usize {
        (node / nx + self.halo) * self.np + node % nx + self.halo
    }

    #[inline]
    fn lattice_node(&self, p: usize, nx: usize) -> Option<usize> {
        let (i, j) = (p % self.np, p / self.np);
        if i < self.halo || j < self.halo || i >= self.halo + nx || j >= self.halo + nx {
            None
        } else {
            Some((j - self.halo) * nx + i - self.halo)
        }
    }

    #[inline]
    fn stencil(&self, x: Point, interp: Interpolation) -> Option<Stencil> {
        let gx = (x[0] - self.lo[0]) / self.dx;
        let gy = (x[1] - self.lo[1]) / self.dx;
        let (i0, j0) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - i0, gy - j0);
        let (lo, n) = match interp {
            Interpolation::Linear => (0.0, 2),
            Interpolation::Cubic => (1.0, 4),
        };
        let (bi, bj) = (i0 - lo, j0 - lo);
        if bi < 0.0 || bj < 0.0 || bi as usize + n > self.np || bj as usize + n > self.np {
            return None;
        }
        let weights = |f: f64| match interp {
            Interpolation::Linear => [1.0 - f, f, 0.0, 0.0],
            Interpolation::Cubic => [
                -f * (f - 1.0) * (f - 2.0) / 6.0,
                (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
                -(f + 1.0) * f * (f - 2.0) / 2.0,
                (f + 1.0) * f * (f - 1.0) / 6.0,
            ],
        };
        Some(Stencil { base: bj as usize * self.np + bi as usize, n: n as u8, wx: weights(fx), wy: weights(fy) })
    }
}

/// Tensor interpolation stencil with `n × n` taps starting at `base`.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    base: usize,
    n: u8,
    wx: [f64; 4],
    wy: [f64; 4],
}

impl Stencil {
    #[inline]
    fn apply(&self, data: &[C64], np: usize, nd: usize, m: usize) -> C64 {
        let n = self.n as usize;
        let mut acc = ZERO;
        for j in 0..n {
            let row = self.base + j * np;
            let mut r = ZERO;
            for i in 0..n {
                r += data[(row + i) * nd + m] * self.wx[i];
            }
            acc += r * self.wy[j];
        }
        acc
    }
}

/// Per-(node, direction) update rule, fixed for the whole run.
#[derive(Debug, Clone, Copy)]
enum Plan {
    Zero,
    /// Interpolate the previous level at the departure point; `mid` is the
    /// midpoint of the step's characteristic (absorption applied when inside Ω).
    Interp { st: Stencil, mid: Option<Point> },
    /// Characteristic crosses Γ⁻ a distance `s` upstream at `at`.
    Clip { s: f64, at: Point, mid: Point },
    /// Exterior node upstream of Ω: inflow continued backwards from the
    /// entry point `at`, a distance `s` ahead.
    Upstream { s: f64, at: Point },
}

struct Plans {
    pad: Padded,
    plans: Vec<Plan>,
    /// Interior lattice node of each padded node, if inside Ω.
    interior: Vec<Option<usize>>,
    /// Per (b, m) on Γ⁺: stencil of x_b.
    trace: Vec<Option<Stencil>>,
}

impl Plans {
    fn build(grid: &SpaceTimeGrid, interp: Interpolation) -> Self {
        let pad = Padded::new(grid);
        let nd = grid.ndir();
        let dt = grid.dt;
        let dom = &grid.domain;
        let mut plans = Vec::with_capacity(pad.np * pad.np * nd);
        let mut interior = Vec::with_capacity(pad.np * pad.np);
        for p in 0..pad.np * pad.np {
            let x = pad.point(p);
            let node = pad.lattice_node(p, grid.nx).filter(|&n| grid.inside(n));
            interior.push(node);
            for m in 0..nd {
                let th = grid.quad.dirs[m];
                let plan = if node.is_some() {
                    let sb = dom.backward_exit(x, th);
                    if sb >= dt {
                        let dep = axpy(-dt, th, x);
                        match pad.stencil(dep, interp) {
                            Some(st) => Plan::Interp { st, mid: Some(axpy(-0.5 * dt, th, x)) },
                            None => Plan::Zero,
                        }
                    } else {
                        Plan::Clip { s: sb, at: axpy(-sb, th, x), mid: axpy(-0.5 * sb, th, x) }
                    }
                } else {
                    match dom.chord(x, th) {
                        Some((s_in, _)) if s_in > 0.0 => Plan::Upstream { s: s_in, at: axpy(s_in, th, x) },
                        _ => match pad.stencil(axpy(-dt, th, x), interp) {
                            Some(st) => Plan::Interp { st, mid: None },
                            None => Plan::Zero,
                        },
                    }
                };
                plans.push(plan);
            }
        }
        let mut trace = Vec::with_capacity(grid.mesh.len() * nd);
        for b in 0..grid.mesh.len() {
            for m in 0..nd {
                trace.push(if grid.mesh.side(b, m) == Side::Outgoing { pad.stencil(grid.mesh.points[b], interp) } else { None });
            }
        }
        Plans { pad, plans, interior, trace }
    }
}

/// Solves the forward problem.
pub fn solve_forward(grid: &SpaceTimeGrid, problem: Forward<'_>) -> Result<ForwardRun> {
    solve_forward_observed(grid, problem, &mut |_| {})
}

/// Solves the forward problem, calling `observer` at every time level
/// (including t = 0) with a view of the current state.
pub fn solve_forward_observed(
    grid: &SpaceTimeGrid,
    problem: Forward<'_>,
    observer: &mut dyn FnMut(&SliceView<'_>),
) -> Result<ForwardRun> {
    let nd = grid.ndir();
    let coeff = problem.coeff;
    if coeff.domain != grid.domain {
        return invalid("coefficient domain differs from grid domain");
    }
    {
        let k = &coeff.kernel;
        if let Kernel::Full { ndir, values } = k {
            if *ndir != nd || values.len() != grid.nodes() * nd * nd {
                return invalid("kernel sampled on a different grid");
            }
        }
        if let Kernel::Separable { ndir, rho, .. } = k {
            if *ndir != nd || rho.len() != grid.nodes() {
                return invalid("kernel sampled on a different grid");
            }
        }
    }
    if let Some(u0) = problem.initial {
        if u0.nx != grid.nx || u0.ndir != nd {
            return invalid("initial slice has the wrong shape");
        }
    }
    let interpolation = problem.options.interpolation;
    let plans = Plans::build(grid, interpolation);
    let pad = plans.pad;
    let npad = pad.np * pad.np;
    let carrier = problem.carrier;
    let has_a = !coeff.absorption.is_zero();
    let collide = !coeff.kernel.is_zero() || problem.source.is_some();
    let iso = coeff.kernel.isotropic_factor();
    let weights = &grid.quad.weights;

    // e^{iσλ x·θ_m} per interior node, used to move the carrier through L_k.
    let phases: Option<Vec<C64>> = carrier.filter(|_| !coeff.kernel.is_zero()).map(|c| {
        let mut v = vec![ZERO; grid.nodes() * nd];
        for node in 0..grid.nodes() {
            let x = grid.node_point(node);
            for m in 0..nd {
                v[node * nd + m] = C64::from_polar(1.0, c.sign * c.lambda * dot(x, grid.quad.dirs[m]));
            }
        }
        v
    });

    let mut cur = vec![ZERO; npad * nd];
    for p in 0..npad {
        for m in 0..nd {
            cur[p * nd + m] = match (plans.interior[p], plans.plans[p * nd + m]) {
                (Some(node), _) => problem.initial.map_or(ZERO, |u0| u0.get(node, m)),
                (None, Plan::Upstream { s, at }) => problem.inflow.eval(grid, s, at, m) * coeff.ghost_gain(s, at, s),
                _ => ZERO,
            };
        }
    }
    let mut next = vec![ZERO; npad * nd];

    let mut trace = BoundaryFlux::zeros(grid, Side::Outgoing);
    trace.carrier = carrier;
    let mut field = problem.options.record_field.then(|| KineticField { slices: Vec::with_capacity(grid.nt + 1), carrier });

    let mut emit = |level: usize, data: &[C64], trace: &mut BoundaryFlux, field: &mut Option<KineticField>| {
        let view = SliceView { grid, pad: &pad, interpolation, data, level, time: grid.time(level) };
        for b in 0..grid.mesh.len() {
            for m in 0..nd {
                if let Some(st) = plans.trace[b * nd + m] {
                    let k = trace.idx(level, b, m);
                    trace.data[k] = st.apply(data, pad.np, nd, m);
                }
            }
        }
        if let Some(f) = field.as_mut() {
            f.slices.push(view.to_slice());
        }
        observer(&view);
    };
    emit(0, &cur, &mut trace, &mut field);

    let chunk_nodes = 64;
    for n in 0..grid.nt {
        let t0 = grid.time(n);
        let t1 = grid.time(n + 1);
        let tmid = t0 + 0.5 * grid.dt;
        let prev = &cur;
        next.par_chunks_mut(chunk_nodes * nd).enumerate().for_each(|(c, out)| {
            let mut deff = vec![0.0; nd];
            let mut tmp = vec![ZERO; nd];
            let mut lbuf = vec![ZERO; nd];
            let mut vbuf = vec![ZERO; nd];
            for (q, o) in out.chunks_mut(nd).enumerate() {
                let p = c * chunk_nodes + q;
                for m in 0..nd {
                    let (val, d) = match plans.plans[p * nd + m] {
                        Plan::Zero => (ZERO, 0.0),
                        Plan::Interp { st, mid } => {
                            let mut v = st.apply(prev, pad.np, nd, m);
                            if let (true, Some(xm)) = (has_a, mid) {
                                v *= (-grid.dt * coeff.absorption_at(tmid, xm)).exp();
                            }
                            (v, if mid.is_some() { grid.dt } else { 0.0 })
                        }
                        Plan::Clip { s, at, mid } => {
                            let mut v = problem.inflow.eval(grid, t1 - s, at, m);
                            if has_a {
                                v *= (-s * coeff.absorption_at(t1 - 0.5 * s, mid)).exp();
                            }
                            (v, s)
                        }
                        Plan::Upstream { s, at } => (problem.inflow.eval(grid, t1 + s, at, m) * coeff.ghost_gain(t1 + s, at, s), 0.0),
                    };
                    o[m] = val;
                    deff[m] = d;
                }
                let Some(node) = plans.interior[p] else { continue };
                if !collide {
                    continue;
                }
                let x = grid.node_point(node);
                let ph = phases.as_ref().map(|v| &v[node * nd..(node + 1) * nd]);
                collision(&coeff.kernel, iso, node, weights, ph, o, &mut lbuf, &mut tmp);
                if let Some(src) = problem.source {
                    src.fill(tmid, x, node, &mut vbuf);
                } else {
                    vbuf.iter_mut().for_each(|z| *z = ZERO);
                }
                if problem.options.predictor_corrector && !coeff.kernel.is_zero() {
                    let pred: Vec<C64> = (0..nd).map(|m| o[m] + deff[m] * (lbuf[m] + vbuf[m])).collect();
                    let l0 = lbuf.clone();
                    collision(&coeff.kernel, iso, node, weights, ph, &pred, &mut lbuf, &mut tmp);
                    for m in 0..nd {
                        o[m] += deff[m] * (0.5 * (l0[m] + lbuf[m]) + vbuf[m]);
                    }
                } else {
                    for m in 0..nd {
                        o[m] += deff[m] * (lbuf[m] + vbuf[m]);
                    }
                }
            }
        });
        std::mem::swap(&mut cur, &mut next);
        if let Some(bad) = cur.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            let p = bad / nd;
            return Err(Error::NonFinite {
                step: n + 1,
                time: t1,
                detail: format!("at x = {:?}, direction {}", pad.point(p), bad % nd),
            });
        }
        emit(n + 1, &cur, &mut trace, &mut field);
    }

    let view = SliceView { grid, pad: &pad, interpolation, data: &cur, level: grid.nt, time: grid.domain.horizon };
    Ok(ForwardRun { trace, final_slice: view.to_slice(), field })
}

/// out = L_k[u] at one node, with the carrier phases moved through the kernel.
#[allow(clippy::too_many_arguments)]
#[inline]
fn collision(
    kernel: &Kernel,
    iso: Option<f64>,
    node: usize,
    weights: &[f64],
    phases: Option<&[C64]>,
    u: &[C64],
    out: &mut [C64],
    tmp: &mut [C64],
) {
    let nd = weights.len();
    if kernel.is_zero() {
        out.iter_mut().for_each(|z| *z = ZERO);
        return;
    }
    for m in 0..nd {
        tmp[m] = match phases {
            Some(ph) => u[m] * ph[m].conj() * weights[m],
            None => u[m] * weights[m],
        };
    }
    if let (Some(c), Kernel::Separable { rho, .. }) = (iso, kernel) {
        let s: C64 = tmp.iter().sum::<C64>() * (c * rho[node]);
        out.iter_mut().for_each(|z| *z = s);
    } else {
        for (m, o) in out.iter_mut().enumerate() {
            let mut acc = ZERO;
            for (mp, t) in tmp.iter().enumerate() {
                acc += t * kernel.value(node, m, mp);
            }
            *o = acc;
        }
    }
    if let Some(ph) = phases {
        for m in 0..nd {
            out[m] *= ph[m];
        }
    }
}

/// The backward adjoint problem
///
/// ∂_t w + θ·∇w − a w = −L_k^*[w] − g,   w(T) = w_T,   w|Σ⁺ = h.
#[derive(Clone, Copy)]
pub struct Adjoint<'a> {
    pub coeff: &'a CoefficientField,
    pub final_state: Option<&'a Slice>,
    /// Data on Σ⁺.
    pub outflow: Inflow<'a>,
    pub source: Option<&'a dyn Source>,
    pub carrier: Option<Carrier>,
    pub options: SolverOptions,
}

impl<'a> Adjoint<'a> {
    pub fn new(coeff: &'a CoefficientField) -> Self {
        Adjoint { coeff, final_state: None, outflow: Inflow::Zero, source: None, carrier: None, options: SolverOptions::default() }
    }

    pub fn final_state(mut self, w: &'a Slice) -> Self {
        self.final_state = Some(w);
        self
    }

    pub fn outflow(mut self, h: Inflow<'a>) -> Self {
        if self.carrier.is_none() {
            self.carrier = h.carrier();
        }
        self.outflow = h;
        self
    }

    pub fn source(mut self, g: &'a dyn Source) -> Self {
        self.source = Some(g);
        self
    }

    pub fn carrier(mut self, c: Option<Carrier>) -> Self {
        self.carrier = c;
        self
    }

    pub fn options(mut self, o: SolverOptions) -> Self {
        self.options = o;
        self
    }
}

/// Outputs of an adjoint run.
#[derive(Debug, Clone)]
pub struct AdjointRun {
    /// w on Σ⁻.
    pub trace: BoundaryFlux,
    /// w(0).
    pub initial_slice: Slice,
    pub field: Option<KineticField>,
}

/// Solves the adjoint problem by the substitution s = T − t, θ → −θ, which
/// turns it into a forward problem with absorption a(T − s, x) and kernel
/// k(x, −θ', −θ); the result is mapped back.
pub fn solve_adjoint(grid: &SpaceTimeGrid, problem: Adjoint<'_>) -> Result<AdjointRun> {
    solve_adjoint_observed(grid, problem, &mut |_, _| {})
}

/// As [`solve_adjoint`], calling `observer(level, w(t_level))` with levels in
/// decreasing order nt, nt−1, …, 0.
pub fn solve_adjoint_observed(
    grid: &SpaceTimeGrid,
    problem: Adjoint<'_>,
    observer: &mut dyn FnMut(usize, &Slice),
) -> Result<AdjointRun> {
    let nd = grid.ndir();
    let opp: Vec<usize> = (0..nd)
        .map(|m| grid.quad.opposite(m).ok_or_else(|| Error::InvalidInput("adjoint needs an even direction count".into())))
        .collect::<Result<_>>()?;
    let horizon = grid.domain.horizon;
    let coeff = problem.coeff;
    let absorption = match &coeff.absorption {
        Absorption::Zero => Absorption::Zero,
        a => {
            let a = a.clone();
            Absorption::func(move |s, x| a.eval_raw(horizon - s, x))
        }
    };
    let rev = CoefficientField {
        domain: coeff.domain,
        absorption,
        kernel: coeff.kernel.reversed(&grid.quad)?,
        declared: coeff.declared,
    };
    let permute = |s: &Slice| {
        let mut out = s.clone();
        for node in 0..grid.nodes() {
            for m in 0..nd {
                out.data[node * nd + m] = s.data[node * nd + opp[m]];
            }
        }
        out
    };
    let init = problem.final_state.map(permute);
    let outflow = problem.outflow;
    let opp_ref = &opp;
    let data = move |s: f64, x: Point, m: usize| outflow.eval(grid, horizon - s, x, opp_ref[m]);
    let rev_source = problem.source.map(|g| ReversedSource { inner: g, horizon, opp: &opp });
    let mut fwd = Forward::new(&rev)
        .inflow(Inflow::Func(&data))
        .carrier(problem.carrier.map(|c| c.reversed()))
        .options(problem.options);
    if let Some(u0) = init.as_ref() {
        fwd = fwd.initial(u0);
    }
    if let Some(src) = rev_source.as_ref() {
        fwd = fwd.source(src);
    }
    let run = solve_forward_observed(grid, fwd, &mut |view| {
        observer(grid.nt - view.level, &permute(&view.to_slice()));
    })?;
    let mut trace = BoundaryFlux::zeros(grid, Side::Incoming);
    trace.carrier = problem.carrier;
    for i in 0..trace.levels {
        for b in 0..trace.nb {
            for m in 0..nd {
                if grid.mesh.side(b, m) == Side::Incoming {
                    let k = trace.idx(i, b, m);
                    trace.data[k] = run.trace.get(grid.nt - i, b, opp[m]);
                }
            }
        }
    }
    let field = run.field.map(|f| {
        let mut slices: Vec<Slice> = f.slices.iter().map(permute).collect();
        slices.reverse();
        KineticField { slices, carrier: problem.carrier }
    });
    Ok(AdjointRun { trace, initial_slice: permute(&run.final_slice), field })
}

struct ReversedSource<'a> {
    inner: &'a dyn Source,
    horizon: f64,
    opp: &'a [usize],
}

impl Source for ReversedSource<'_> {
    fn fill(&self, s: f64, x: Point, node: usize, out: &mut [C64]) {
        let mut buf = vec![ZERO; out.len()];
        self.inner.fill(self.horizon - s, x, node, &mut buf);
        for (m, o) in out.iter_mut().enumerate() {
            *o = buf[self.opp[m]];
        }
    }
}

/// Restriction of a stored field to [0,T] × Γ⁺. Interpolation uses only lattice
/// nodes inside Ω (weights renormalized), since stored fields are zero outside.
pub fn trace_outgoing(grid: &SpaceTimeGrid, u: &KineticField) -> BoundaryFlux {
    let nd = grid.ndir();
    let mut out = BoundaryFlux::zeros(grid, Side::Outgoing);
    out.carrier = u.carrier;
    let nx = grid.nx;
    for (i, s) in u.slices.iter().enumerate().take(out.levels) {
        for b in 0..grid.mesh.len() {
            let xb = grid.mesh.points[b];
            let gx = (xb[0] - grid.origin[0]) / grid.dx;
            let gy = (xb[1] - grid.origin[1]) / grid.dx;
            let (i0, j0) = (gx.floor() as i64, gy.floor() as i64);
            let (fx, fy) = (gx - i0 as f64, gy - j0 as f64);
            let mut taps = Vec::with_capacity(4);
            for (di, wx) in [(0, 1.0 - fx), (1, fx)] {
                for (dj, wy) in [(0, 1.0 - fy), (1, fy)] {
                    let (ii, jj) = (i0 + di, j0 + dj);
                    if ii < 0 || jj < 0 || ii >= nx as i64 || jj >= nx as i64 {
                        continue;
                    }
                    let node = jj as usize * nx + ii as usize;
                    if grid.inside(node) && wx * wy > 0.0 {
                        taps.push((node, wx * wy));
                    }
                }
            }
            let wsum: f64 = taps.iter().map(|t| t.1).sum();
            if wsum <= 0.0 {
                continue;
            }
            for m in 0..nd {
                if grid.mesh.side(b, m) == Side::Outgoing {
                    let v: C64 = taps.iter().map(|&(node, w)| s.get(node, m) * w).sum();
                    let k = out.idx(i, b, m);
                    out.data[k] = v / wsum;
                }
            }
        }
    }
    out
}

/// Result of checking ‖u(t)‖_p + ‖u‖_{𝓛_p^+} ≤ C(‖u0‖_p + ‖f‖_{𝓛_p^-} + ‖v‖_p).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub p: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub constant: f64,
    pub bounds: Bounds,
    pub slack: f64,
    pub holds: bool,
}

/// Constant of the a-priori estimate: C = 2·exp(C1·T/p) with
/// C1 = p(M0 + C_p + 1/q), C_p = M1^{1/q} M2^{1/p}.
pub fn energy_constant(bounds: Bounds, p: f64, horizon: f64) -> f64 {
    let inv_q = 1.0 - 1.0 / p;
    let pw = |base: f64, e: f64| if e == 0.0 { 1.0 } else { base.powf(e) };
    let cp = pw(bounds.m1, inv_q) * pw(bounds.m2, 1.0 / p);
    let cp = if bounds.m1 == 0.0 && bounds.m2 == 0.0 { 0.0 } else { cp };
    let c1 = p * (bounds.m0 + cp + inv_q);
    2.0 * (c1 * horizon / p).exp()
}

/// Runs the problem and evaluates both sides of the a-priori estimate, with the
/// left side maximized over the time levels.
pub fn energy_check(grid: &SpaceTimeGrid, problem: Forward<'_>, p: f64) -> Result<EnergyReport> {
    if !(p >= 1.0) || !p.is_finite() {
        return invalid("energy check needs finite p ≥ 1");
    }
    let mut sup_u = 0.0f64;
    let run = solve_forward_observed(grid, problem, &mut |view| {
        let s = view.to_slice();
        sup_u = sup_u.max(s.lp_norm(grid, p));
    })?;
    let out_norm = run.trace.lp_norm(grid, p);
    let u0 = problem.initial.map_or(0.0, |s| s.lp_norm(grid, p));
    let f = match problem.inflow {
        Inflow::Zero => 0.0,
        Inflow::Flux(fl) => fl.lp_norm(grid, p),
        inflow @ Inflow::Func(_) => {
            BoundaryFlux::from_fn(grid, Side::Incoming, None, |t, x, m| inflow.eval(grid, t, x, m)).lp_norm(grid, p)
        }
    };
    let v = problem.source.map_or(0.0, |src| source_norm(grid, src, p));
    let bounds = problem.coeff.bounds(grid);
    let constant = energy_constant(bounds, p, grid.domain.horizon);
    let lhs = sup_u + out_norm;
    let rhs = constant * (u0 + f + v);
    Ok(EnergyReport { p, lhs, rhs, constant, bounds, slack: rhs - lhs, holds: lhs <= rhs })
}

/// ‖v‖_{L^p(Q_T)} by trapezoid in time over the lattice nodes inside Ω.
pub fn source_norm(grid: &SpaceTimeGrid, src: &dyn Source, p: f64) -> f64 {
    let nd = grid.ndir();
    let mut buf = vec![ZERO; nd];
    let mut acc = 0.0;
    for n in 0..=grid.nt {
        let t = grid.time(n);
        for node in 0..grid.nodes() {
            if !grid.inside(node) {
                continue;
            }
            src.fill(t, grid.node_point(node), node, &mut buf);
            for m in 0..nd {
                acc += grid.time_weight(n) * grid.cell_area() * grid.quad.weights[m] * buf[m].norm().powf(p);
            }
        }
    }
    acc.powf(1.0 / p)
}
