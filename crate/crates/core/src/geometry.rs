//! Spatial domain, direction quadrature, boundary bundles and the
//! spacetime regions (light cones, cloak, resolvable sets).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Point = [f64; 2];

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn axpy(s: f64, d: Point, x: Point) -> Point {
    [x[0] + s * d[0], x[1] + s * d[1]]
}

/// Shape of the convex domain Ω.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Disk of radius r/2 centred at the origin.
    Disk,
    /// Axis-aligned box centred at the origin with the given half widths.
    Box { half: [f64; 2] },
}

/// Domain Ω ⊆ B(0, r/2), the radius r and the time horizon T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub dim: usize,
    pub r: f64,
    pub horizon: f64,
    pub shape: Shape,
}

impl DomainSpec {
    pub fn new(r: f64, horizon: f64, shape: Shape) -> Result<Self> {
        let spec = DomainSpec { dim: 2, r, horizon, shape };
        spec.validate()?;
        Ok(spec)
    }

    /// The desk-scale default: r = 1, T = 2.5, Ω the disk of radius 1/2.
    pub fn desk() -> Self {
        DomainSpec { dim: 2, r: 1.0, horizon: 2.5, shape: Shape::Disk }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 {
            return invalid(format!("only dimension 2 is supported, got {}", self.dim));
        }
        if !(self.r > 0.0) || !self.r.is_finite() {
            return invalid("radius r must be positive");
        }
        if !(self.horizon > 2.0 * self.r) {
            return invalid(format!(
                "horizon must satisfy T > 2r strictly (T = {}, 2r = {})",
                self.horizon,
                2.0 * self.r
            ));
        }
        if let Shape::Box { half } = self.shape {
            if !(half[0] > 0.0 && half[1] > 0.0) {
                return invalid("box half widths must be positive");
            }
            if half[0].hypot(half[1]) > 0.5 * self.r * (1.0 + 1e-12) {
                return invalid("box must lie inside B(0, r/2)");
            }
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.r
    }

    pub fn contains(&self, x: Point) -> bool {
        match self.shape {
            Shape::Disk => norm(x) < self.radius(),
            Shape::Box { half } => x[0].abs() < half[0] && x[1].abs() < half[1],
        }
    }

    /// Lower and upper corners of the bounding box of Ω.
    pub fn bbox(&self) -> (Point, Point) {
        let h = self.half_extent();
        ([-h[0], -h[1]], h)
    }

    pub fn half_extent(&self) -> Point {
        match self.shape {
            Shape::Disk => [self.radius(), self.radius()],
            Shape::Box { half } => half,
        }
    }

    pub fn diameter(&self) -> f64 {
        match self.shape {
            Shape::Disk => self.r,
            Shape::Box { half } => 2.0 * half[0].hypot(half[1]),
        }
    }

    pub fn area(&self) -> f64 {
        match self.shape {
            Shape::Disk => PI * self.radius().powi(2),
            Shape::Box { half } => 4.0 * half[0] * half[1],
        }
    }

    pub fn perimeter(&self) -> f64 {
        match self.shape {
            Shape::Disk => 2.0 * PI * self.radius(),
            Shape::Box { half } => 4.0 * (half[0] + half[1]),
        }
    }

    /// Parameter interval `(s_in, s_out)` of the line `s ↦ x + sθ` inside Ω.
    pub fn chord(&self, x: Point, theta: Point) -> Option<(f64, f64)> {
        match self.shape {
            Shape::Disk => {
                let b = dot(x, theta);
                let c = dot(x, x) - self.radius().powi(2);
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Box { half } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for k in 0..2 {
                    if theta[k].abs() < 1e-300 {
                        if x[k].abs() >= half[k] {
                            return None;
                        }
                    } else {
                        let a = (-half[k] - x[k]) / theta[k];
                        let b = (half[k] - x[k]) / theta[k];
                        lo = lo.max(a.min(b));
                        hi = hi.min(a.max(b));
                    }
                }
                if hi > lo {
                    Some((lo, hi))
                } else {
                    None
                }
            }
        }
    }

    /// Distance travelled backwards along θ from an interior point before leaving Ω.
    pub fn backward_exit(&self, x: Point, theta: Point) -> f64 {
        match self.chord(x, theta) {
            Some((s_in, _)) => (-s_in).max(0.0),
            None => 0.0,
        }
    }

    /// Outward unit normal at a boundary point.
    pub fn normal(&self, xb: Point) -> Point {
        match self.shape {
            Shape::Disk => {
                let n = norm(xb);
                [xb[0] / n, xb[1] / n]
            }
            Shape::Box { half } => {
                let d0 = half[0] - xb[0].abs();
                let d1 = half[1] - xb[1].abs();
                if d0 <= d1 {
                    [xb[0].signum(), 0.0]
                } else {
                    [0.0, xb[1].signum()]
                }
            }
        }
    }

    /// Membership in Ω_T = [0, T] × Ω.
    pub fn in_omega_t(&self, t: f64, x: Point) -> bool {
        (0.0..=self.horizon).contains(&t) && self.contains(x)
    }
}

/// Forward light cone C_r^+: |x| < t − r/2 with t > r/2.
pub fn in_forward_cone(t: f64, x: Point, spec: &DomainSpec) -> bool {
    t > 0.5 * spec.r && norm(x) < t - 0.5 * spec.r
}

/// Backward light cone C_r^-: |x| < T − r/2 − t.
pub fn in_backward_cone(t: f64, x: Point, spec: &DomainSpec) -> bool {
    norm(x) < spec.horizon - 0.5 * spec.r - t
}

/// Cloaking region C_r: |x| ≤ r/2 − t with 0 ≤ t ≤ r/2 (closed).
pub fn in_cloak(t: f64, x: Point, spec: &DomainSpec) -> bool {
    (0.0..=0.5 * spec.r).contains(&t) && norm(x) <= 0.5 * spec.r - t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionTag {
    ForwardCone,
    BackwardCone,
    Cloak,
    Xstar,
    Xsharp,
    /// All of Ω_T; never returned by `classify`.
    OmegaT,
    Outside,
}

impl RegionTag {
    /// Membership of `(t, x)` in the set named by the tag. `Outside` means the
    /// complement of Ω_T.
    pub fn contains(self, t: f64, x: Point, spec: &DomainSpec) -> bool {
        match self {
            RegionTag::ForwardCone => in_forward_cone(t, x, spec),
            RegionTag::BackwardCone => in_backward_cone(t, x, spec),
            RegionTag::Cloak => in_cloak(t, x, spec),
            RegionTag::Xsharp => spec.in_omega_t(t, x) && in_forward_cone(t, x, spec),
            RegionTag::Xstar => {
                spec.in_omega_t(t, x) && in_forward_cone(t, x, spec) && in_backward_cone(t, x, spec)
            }
            RegionTag::OmegaT => spec.in_omega_t(t, x),
            RegionTag::Outside => !spec.in_omega_t(t, x),
        }
    }
}

/// Most specific region containing `(t, x)`. Inside Ω_T every point lies in
/// X_{r,*}, X_{r,♯}, the cloak or the backward cone, so `ForwardCone` is never
/// returned (Ω_T ∩ C_r^+ is X_{r,♯}).
pub fn classify(t: f64, x: Point, spec: &DomainSpec) -> RegionTag {
    if !spec.in_omega_t(t, x) {
        return RegionTag::Outside;
    }
    let fwd = in_forward_cone(t, x, spec);
    let bwd = in_backward_cone(t, x, spec);
    if fwd && bwd {
        RegionTag::Xstar
    } else if fwd {
        RegionTag::Xsharp
    } else if in_cloak(t, x, spec) {
        RegionTag::Cloak
    } else if bwd {
        RegionTag::BackwardCone
    } else {
        RegionTag::Outside
    }
}

/// Discrete directions on the unit circle with positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereQuadrature {
    pub dirs: Vec<Point>,
    pub weights: Vec<f64>,
}

/// Uniform angular grid θ_m = (cos 2πm/N, sin 2πm/N) with weights 2π/N.
pub fn sphere_quadrature(ndir: usize, n: usize) -> Result<SphereQuadrature> {
    if n != 2 {
        return invalid(format!("only dimension 2 is supported, got {n}"));
    }
    if ndir < 4 {
        return invalid(format!("need at least 4 directions, got {ndir}"));
    }
    let dirs = (0..ndir)
        .map(|m| {
            let phi = 2.0 * PI * m as f64 / ndir as f64;
            [phi.cos(), phi.sin()]
        })
        .collect();
    Ok(SphereQuadrature { dirs, weights: vec![2.0 * PI / ndir as f64; ndir] })
}

impl SphereQuadrature {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn angle(&self, m: usize) -> f64 {
        2.0 * PI * m as f64 / self.len() as f64
    }

    /// Index of −θ_m (exists when the direction count is even).
    pub fn opposite(&self, m: usize) -> Option<usize> {
        let n = self.len();
        n.is_multiple_of(2).then(|| (m + n / 2) % n)
    }

    pub fn integrate(&self, f: impl Fn(Point) -> f64) -> f64 {
        self.dirs.iter().zip(&self.weights).map(|(&d, &w)| w * f(d)).sum()
    }
}

/// Which half-bundle a boundary pair (x_b, θ_m) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Incoming,
    Outgoing,
    Grazing,
}

/// Boundary points of ∂Ω with normals, surface weights and the Γ^± split for
/// every quadrature direction.
#[derive(Debug, Clone)]
pub struct BoundaryMesh {
    pub points: Vec<Point>,
    pub normals: Vec<Point>,
    pub surface_weights: Vec<f64>,
    /// θ_m · ν(x_b), stored as `cos[b * ndir + m]`.
    pub cos: Vec<f64>,
    pub ndir: usize,
    dir_weights: Vec<f64>,
    shape: Shape,
    radius: f64,
}

const GRAZING_TOL: f64 = 1e-12;

pub fn boundary_mesh(spec: &DomainSpec, quad: &SphereQuadrature, nb: usize) -> Result<BoundaryMesh> {
    if nb < 4 {
        return invalid("boundary mesh needs at least 4 points");
    }
    let mut points = Vec::with_capacity(nb);
    let mut normals = Vec::with_capacity(nb);
    let sw = match spec.shape {
        Shape::Disk => {
            let rad = spec.radius();
            for j in 0..nb {
                let phi = 2.0 * PI * (j as f64 + 0.5) / nb as f64;
                points.push([rad * phi.cos(), rad * phi.sin()]);
                normals.push([phi.cos(), phi.sin()]);
            }
            2.0 * PI * rad / nb as f64
        }
        Shape::Box { half } => {
            let per = spec.perimeter();
            for j in 0..nb {
                let s = per * (j as f64 + 0.5) / nb as f64;
                let (p, n) = box_point(half, s);
                points.push(p);
                normals.push(n);
            }
            per / nb as f64
        }
    };
    let ndir = quad.len();
    let mut cos = Vec::with_capacity(nb * ndir);
    for nrm in &normals {
        for d in &quad.dirs {
            let c = dot(*d, *nrm);
            cos.push(if c.abs() < GRAZING_TOL { 0.0 } else { c });
        }
    }
    Ok(BoundaryMesh {
        points,
        normals,
        surface_weights: vec![sw; nb],
        cos,
        ndir,
        dir_weights: quad.weights.clone(),
        shape: spec.shape,
        radius: spec.radius(),
    })
}

/// Point and normal at arclength `s` along the box perimeter, starting at the
/// lower-left corner and running counter-clockwise.
fn box_point(half: Point, s: f64) -> (Point, Point) {
    let (w, h) = (2.0 * half[0], 2.0 * half[1]);
    if s < w {
        ([-half[0] + s, -half[1]], [0.0, -1.0])
    } else if s < w + h {
        ([half[0], -half[1] + (s - w)], [1.0, 0.0])
    } else if s < 2.0 * w + h {
        ([half[0] - (s - w - h), half[1]], [0.0, 1.0])
    } else {
        ([-half[0], half[1] - (s - 2.0 * w - h)], [-1.0, 0.0])
    }
}

impl BoundaryMesh {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn cos(&self, b: usize, m: usize) -> f64 {
        self.cos[b * self.ndir + m]
    }

    pub fn side(&self, b: usize, m: usize) -> Side {
        let c = self.cos(b, m);
        if c > 0.0 {
            Side::Outgoing
        } else if c < 0.0 {
            Side::Incoming
        } else {
            Side::Grazing
        }
    }

    /// Quadrature weight of dξ = |θ·ν| dσ dθ for the pair (x_b, θ_m).
    #[inline]
    pub fn dxi(&self, b: usize, m: usize) -> f64 {
        self.cos(b, m).abs() * self.surface_weights[b] * self.dir_weights[m]
    }

    /// Total dξ-measure of the requested half-bundle.
    pub fn measure(&self, side: Side) -> f64 {
        let mut acc = 0.0;
        for b in 0..self.len() {
            for m in 0..self.ndir {
                if self.side(b, m) == side {
                    acc += self.dxi(b, m);
                }
            }
        }
        acc
    }

    /// Neighbouring mesh indices and linear weight for a point on (or near) ∂Ω,
    /// periodic along the boundary.
    pub fn locate(&self, x: Point) -> (usize, usize, f64) {
        let nb = self.len();
        let u = match self.shape {
            Shape::Disk => {
                let phi = x[1].atan2(x[0]).rem_euclid(2.0 * PI);
                phi / (2.0 * PI) * nb as f64 - 0.5
            }
            Shape::Box { half } => {
                let per = 4.0 * (half[0] + half[1]);
                box_arclength(half, x) / per * nb as f64 - 0.5
            }
        };
        let f = u.floor();
        let w = u - f;
        let i0 = (f as i64).rem_euclid(nb as i64) as usize;
        (i0, (i0 + 1) % nb, w)
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

fn box_arclength(half: Point, x: Point) -> f64 {
    let (w, h) = (2.0 * half[0], 2.0 * half[1]);
    let cx = x[0].clamp(-half[0], half[0]);
    let cy = x[1].clamp(-half[1], half[1]);
    let d = [half[1] + cy, half[0] - cx, half[1] - cy, half[0] + cx];
    let side = (0..4).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap_or(0);
    match side {
        0 => cx + half[0],
        1 => w + cy + half[1],
        2 => w + h + (half[0] - cx),
        _ => 2.0 * w + h + (half[1] - cy),
    }
}

/// Regular spacetime lattice of cell centres, used for sampled coefficients,
/// reconstructions and spectra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacetimeLattice {
    pub nt: usize,
    pub t0: f64,
    pub dt: f64,
    pub nx: usize,
    pub lo: Point,
    pub dx: f64,
}

impl SpacetimeLattice {
    /// Cell-centred lattice over [0, T) × bounding square of Ω.
    pub fn covering(spec: &DomainSpec, nt: usize, nx: usize) -> Self {
        let h = spec.half_extent();
        let side = 2.0 * h[0].max(h[1]);
        let dx = side / nx as f64;
        let dt = spec.horizon / nt as f64;
        SpacetimeLattice {
            nt,
            t0: 0.5 * dt,
            dt,
            nx,
            lo: [-0.5 * side + 0.5 * dx, -0.5 * side + 0.5 * dx],
            dx,
        }
    }

    pub fn len(&self) -> usize {
        self.nt * self.nx * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize) -> Point {
        [self.lo[0] + i as f64 * self.dx, self.lo[1] + j as f64 * self.dx]
    }

    #[inline]
    pub fn index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.nx + j) * self.nx + i
    }

    /// Cell volume dt·dx².
    pub fn cell(&self) -> f64 {
        self.dt * self.dx * self.dx
    }

    /// Samples `f(t, x)` at every lattice node, ordered `[k][j][i]`.
    pub fn sample(&self, f: impl Fn(f64, Point) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for k in 0..self.nt {
            let t = self.time(k);
            for j in 0..self.nx {
                for i in 0..self.nx {
                    out.push(f(t, self.point(i, j)));
                }
            }
        }
        out
    }

    /// Boolean mask of the nodes lying in `region`.
    pub fn mask(&self, spec: &DomainSpec, region: RegionTag) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.len());
        for k in 0..self.nt {
            let t = self.time(k);
            for j in 0..self.nx {
                for i in 0..self.nx {
                    out.push(region.contains(t, self.point(i, j), spec));
                }
            }
        }
        out
    }

    /// Multilinear interpolation of node values, zero outside the lattice hull.
    pub fn interpolate(&self, values: &[f64], t: f64, x: Point) -> f64 {
        let ft = (t - self.t0) / self.dt;
        let fx = (x[0] - self.lo[0]) / self.dx;
        let fy = (x[1] - self.lo[1]) / self.dx;
        let (k0, i0, j0) = (ft.floor(), fx.floor(), fy.floor());
        let (wt, wx, wy) = (ft - k0, fx - i0, fy - j0);
        let mut acc = 0.0;
        for (dk, ct) in [(0i64, 1.0 - wt), (1, wt)] {
            let k = k0 as i64 + dk;
            if ct == 0.0 || k < 0 || k >= self.nt as i64 {
                continue;
            }
            for (dj, cy) in [(0i64, 1.0 - wy), (1, wy)] {
                let j = j0 as i64 + dj;
                if cy == 0.0 || j < 0 || j >= self.nx as i64 {
                    continue;
                }
                for (di, cx) in [(0i64, 1.0 - wx), (1, wx)] {
                    let i = i0 as i64 + di;
                    if cx == 0.0 || i < 0 || i >= self.nx as i64 {
                        continue;
                    }
                    acc += ct * cy * cx * values[self.index(k as usize, i as usize, j as usize)];
                }
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DomainSpec {
        DomainSpec::desk()
    }

    #[test]
    fn test_forward_cone_examples() {
        let s = spec();
        assert!(!in_forward_cone(0.5, [0.0, 0.0], &s));
        assert!(in_forward_cone(s.horizon, [0.0, 0.0], &s));
        assert!(!in_forward_cone(0.6, [0.2, 0.0], &s));
    }

    #[test]
    fn test_backward_cone_examples() {
        let s = spec();
        assert!(!in_backward_cone(s.horizon, [0.0, 0.0], &s));
        assert!(in_backward_cone(0.0, [0.0, 0.0], &s));
        assert!(in_backward_cone(s.horizon - 1.0, [0.4, 0.0], &s));
    }

    #[test]
    fn test_cloak_examples() {
        let s = spec();
        assert!(in_cloak(0.0, [0.0, 0.0], &s));
        assert!(!in_cloak(0.5 + 1e-9, [0.0, 0.0], &s));
        assert!(in_cloak(0.25, [0.25, 0.0], &s));
    }

    #[test]
    fn test_classify_examples() {
        let s = spec();
        assert_eq!(classify(s.horizon / 2.0, [0.0, 0.0], &s), RegionTag::Xstar);
        assert_eq!(classify(0.1, [0.1, 0.0], &s), RegionTag::Cloak);
        assert_eq!(classify(1.0, [0.7, 0.0], &s), RegionTag::Outside);
        assert_eq!(classify(2.3, [0.1, 0.0], &s), RegionTag::Xsharp);
    }

    #[test]
    fn test_quadrature_examples() {
        let q = sphere_quadrature(8, 2).unwrap();
        for (m, d) in q.dirs.iter().enumerate() {
            let phi = 2.0 * PI * m as f64 / 8.0;
            assert!((d[0] - phi.cos()).abs() < 1e-15 && (d[1] - phi.sin()).abs() < 1e-15);
            assert!((q.weights[m] - 2.0 * PI / 8.0).abs() < 1e-15);
        }
        assert!((q.measure() - 2.0 * PI).abs() < 1e-12);
        assert!((q.integrate(|t| t[0] * t[0]) - PI).abs() < 1e-10);
        assert!(sphere_quadrature(3, 2).is_err());
        assert_eq!(q.opposite(1), Some(5));
    }

    #[test]
    fn test_boundary_classification() {
        let s = spec();
        let q = sphere_quadrature(16, 2).unwrap();
        let mesh = boundary_mesh(&s, &q, 64).unwrap();
        for b in 0..mesh.len() {
            for m in 0..q.len() {
                let c = dot(q.dirs[m], mesh.normals[b]);
                match mesh.side(b, m) {
                    Side::Outgoing => assert!(c > 0.0),
                    Side::Incoming => assert!(c < 0.0),
                    Side::Grazing => assert_eq!(mesh.dxi(b, m), 0.0),
                }
            }
        }
    }

    #[test]
    fn test_normal_direction_weight_one() {
        let s = spec();
        let q = sphere_quadrature(8, 2).unwrap();
        let mesh = boundary_mesh(&s, &q, 4).unwrap();
        // Mesh point 0 sits at angle π/4, which is direction 1; direction 3 is tangent.
        assert_eq!(mesh.side(0, 1), Side::Outgoing);
        assert!((mesh.cos(0, 1) - 1.0).abs() < 1e-15);
        assert!((mesh.dxi(0, 1) - mesh.surface_weights[0] * q.weights[1]).abs() < 1e-15);
        assert_eq!(mesh.side(0, 3), Side::Grazing);
        assert_eq!(mesh.dxi(0, 3), 0.0);
    }

    #[test]
    fn test_incoming_measure_matches_brute_force() {
        let s = spec();
        let q = sphere_quadrature(64, 2).unwrap();
        let mesh = boundary_mesh(&s, &q, 200).unwrap();
        // ∫∫ max(−θ·ν, 0) dθ dσ = perimeter · 2.
        let exact = s.perimeter() * 2.0;
        let got = mesh.measure(Side::Incoming);
        assert!((got - exact).abs() / exact < 2e-3, "{got} vs {exact}");
        // Independent brute force with a finer angular sum.
        let mut brute = 0.0;
        let nphi = 2000;
        for j in 0..200 {
            let nu = mesh.normals[j];
            for k in 0..nphi {
                let a = 2.0 * PI * k as f64 / nphi as f64;
                brute += (-(a.cos() * nu[0] + a.sin() * nu[1])).max(0.0);
            }
        }
        brute *= mesh.surface_weights[0] * 2.0 * PI / nphi as f64;
        assert!((got - brute).abs() / brute < 2e-3);
    }

    #[test]
    fn test_chord_disk() {
        let s = spec();
        let (a, b) = s.chord([0.0, 0.0], [1.0, 0.0]).unwrap();
        assert!((a + 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
        assert!(s.chord([0.0, 0.6], [1.0, 0.0]).is_none());
        assert!((s.backward_exit([0.25, 0.0], [1.0, 0.0]) - 0.75).abs() < 1e-14);
    }

    #[test]
    fn test_box_domain() {
        let s = DomainSpec::new(1.0, 2.5, Shape::Box { half: [0.3, 0.2] }).unwrap();
        assert!(s.contains([0.29, 0.19]));
        assert!(!s.contains([0.31, 0.0]));
        let (a, b) = s.chord([0.0, 0.0], [1.0, 0.0]).unwrap();
        assert!((a + 0.3).abs() < 1e-15 && (b - 0.3).abs() < 1e-15);
        assert_eq!(s.normal([0.3, 0.05]), [1.0, 0.0]);
        let q = sphere_quadrature(32, 2).unwrap();
        let mesh = boundary_mesh(&s, &q, 80).unwrap();
        let exact = s.perimeter() * 2.0;
        assert!((mesh.measure(Side::Incoming) - exact).abs() / exact < 1e-2);
        let (i0, i1, w) = mesh.locate(mesh.points[7]);
        assert!((i0 == 7 && w.abs() < 1e-9) || (i1 == 7 && (w - 1.0).abs() < 1e-9));
    }

    #[test]
    fn test_invalid_domains() {
        assert!(DomainSpec::new(1.0, 2.0, Shape::Disk).is_err());
        assert!(DomainSpec::new(1.0, 2.5, Shape::Box { half: [0.5, 0.5] }).is_err());
    }

    #[test]
    fn test_locate_disk() {
        let s = spec();
        let q = sphere_quadrature(8, 2).unwrap();
        let mesh = boundary_mesh(&s, &q, 16).unwrap();
        let (i0, i1, w) = mesh.locate(mesh.points[3]);
        assert_eq!((i0, i1), (3, 4));
        assert!(w.abs() < 1e-12);
        let (i0, i1, _) = mesh.locate(mesh.points[15]);
        assert_eq!((i0, i1), (15, 0));
    }
}
