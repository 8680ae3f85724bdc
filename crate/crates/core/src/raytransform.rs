//! Light-ray transform R(a)(θ, y) = ∫ a(t, y + tθ) dt, its Fourier-slice
//! identity on the cone |τ| ≤ |ξ|, the spatial X-ray transform with filtered
//! back-projection, and completion of cone-restricted spectra.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{dot, norm, DomainSpec, Point, SpacetimeLattice};
use crate::transport::CoefficientField;

const INITIAL_PANELS: usize = 64;
const MAX_DEPTH: usize = 40;

fn simpson_panel(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, tol: f64, depth: usize) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        left + right + diff / 15.0
    } else {
        simpson_panel(f, a, m, fa, flm, fm, 0.5 * tol, depth - 1)
            + simpson_panel(f, m, b, fm, frm, fb, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson quadrature over [a, b]. The interval is first split into
/// fixed panels so that narrow features are not skipped.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / INITIAL_PANELS as f64;
    let ptol = tol / INITIAL_PANELS as f64;
    let mut acc = 0.0;
    let mut fa = f(a);
    for p in 0..INITIAL_PANELS {
        let lo = a + p as f64 * h;
        let hi = if p + 1 == INITIAL_PANELS { b } else { lo + h };
        let (fm, fb) = (f(0.5 * (lo + hi)), f(hi));
        acc += simpson_panel(f, lo, hi, fa, fm, fb, ptol, MAX_DEPTH);
        fa = fb;
    }
    acc
}

/// Parameter interval on which the line y + tθ lies in the disk of radius `radius`.
pub(crate) fn disk_interval(y: Point, theta: Point, radius: f64) -> Option<(f64, f64)> {
    let tt = dot(theta, theta);
    let b = dot(y, theta) / tt;
    let c = (dot(y, y) - radius * radius) / tt;
    let disc = b * b - c;
    (disc > 0.0).then(|| (-b - disc.sqrt(), -b + disc.sqrt()))
}

/// Light-ray integral of `a` along t ↦ (t, y + tθ) for t ∈ [0, horizon], with
/// `a` treated as zero outside the disk of radius `reach`.
pub fn light_ray_integral(a: &dyn Fn(f64, Point) -> f64, horizon: f64, reach: f64, theta: Point, y: Point) -> f64 {
    let Some((t0, t1)) = disk_interval(y, theta, reach) else { return 0.0 };
    let (t0, t1) = (t0.max(0.0), t1.min(horizon));
    if t1 <= t0 {
        return 0.0;
    }
    let f = |t: f64| a(t, [y[0] + t * theta[0], y[1] + t * theta[1]]);
    integrate(&f, t0, t1, 1e-12)
}

/// R(a)(θ, y) for the absorption of `coeff`, extended by zero outside Ω_T.
pub fn light_ray_transform(coeff: &CoefficientField, theta: Point, y: Point) -> f64 {
    let d = coeff.domain;
    let f = |t: f64, x: Point| coeff.absorption_at(t, x);
    light_ray_integral(&f, d.horizon, d.radius(), theta, y)
}

/// Node-centred square lattice of line offsets, symmetric about the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetLattice {
    pub n: usize,
    pub lo: f64,
    pub d: f64,
}

impl OffsetLattice {
    /// Smallest odd lattice with spacing `d` whose square contains [−half, half]².
    pub fn covering(half: f64, d: f64) -> Self {
        let n = 2 * (half / d - 1e-9).ceil().max(0.0) as usize + 1;
        OffsetLattice { n, lo: -((n - 1) as f64) * 0.5 * d, d }
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn half_width(&self) -> f64 {
        -self.lo
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize) -> Point {
        [self.lo + i as f64 * self.d, self.lo + j as f64 * self.d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    BoundaryRecovered,
}

/// Samples of R(a)(θ_m, y) on an offset lattice, ordered `[m][j][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RayDataSet {
    pub dirs: Vec<Point>,
    pub offsets: OffsetLattice,
    pub values: Vec<f64>,
    /// Flat indices of samples judged unreliable; their values are zero.
    pub excluded: Vec<usize>,
    pub provenance: Provenance,
}

impl RayDataSet {
    pub fn zeros(dirs: Vec<Point>, offsets: OffsetLattice, provenance: Provenance) -> Self {
        let values = vec![0.0; dirs.len() * offsets.len()];
        RayDataSet { dirs, offsets, values, excluded: Vec::new(), provenance }
    }

    #[inline]
    pub fn index(&self, m: usize, i: usize, j: usize) -> usize {
        (m * self.offsets.n + j) * self.offsets.n + i
    }

    pub fn get(&self, m: usize, i: usize, j: usize) -> f64 {
        self.values[self.index(m, i, j)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.dirs.len() * self.offsets.len() {
            return invalid("ray data length does not match directions × offsets");
        }
        if let Some(k) = self.values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite ray sample at index {k}"));
        }
        Ok(())
    }
}

/// Ray data of `a` by direct quadrature; `a` vanishes outside the disk of
/// radius `reach` and outside [0, horizon].
pub fn ray_data_oracle(
    a: &(dyn Fn(f64, Point) -> f64 + Sync),
    horizon: f64,
    reach: f64,
    dirs: &[Point],
    offsets: OffsetLattice,
) -> RayDataSet {
    let mut out = RayDataSet::zeros(dirs.to_vec(), offsets, Provenance::Oracle);
    let n = offsets.n;
    out.values.par_chunks_mut(n * n).enumerate().for_each(|(m, chunk)| {
        for j in 0..n {
            for i in 0..n {
                chunk[j * n + i] = light_ray_integral(a, horizon, reach, dirs[m], offsets.point(i, j));
            }
        }
    });
    out
}

/// Ray data of a coefficient's absorption by direct quadrature.
pub fn ray_data_of(coeff: &CoefficientField, dirs: &[Point], offsets: OffsetLattice) -> RayDataSet {
    let f = |t: f64, x: Point| coeff.absorption_at(t, x);
    ray_data_oracle(&f, coeff.domain.horizon, coeff.domain.radius(), dirs, offsets)
}

/// Line integral ∫ ρ(y + tω) dt of a spatial field supported in the disk of
/// radius `reach`.
pub fn xray_transform(rho: &dyn Fn(Point) -> f64, omega: Point, y: Point, reach: f64) -> f64 {
    let Some((t0, t1)) = disk_interval(y, omega, reach) else { return 0.0 };
    let f = |t: f64| rho([y[0] + t * omega[0], y[1] + t * omega[1]]);
    integrate(&f, t0, t1, 1e-12)
}

/// Parallel-beam sinogram: `values[a][p]` is ∫ ρ(s_p n_a + t ω_a) dt with
/// ω_a = (cos φ_a, sin φ_a), n_a = (−sin φ_a, cos φ_a), φ_a ∈ [0, π).
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub angles: Vec<f64>,
    pub s0: f64,
    pub ds: f64,
    pub ns: usize,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn direction(&self, a: usize) -> (Point, Point) {
        let (s, c) = self.angles[a].sin_cos();
        ([c, s], [-s, c])
    }

    pub fn offset(&self, p: usize) -> f64 {
        self.s0 + p as f64 * self.ds
    }

    /// Uniform angles φ_a = πa/N and offsets covering [−half, half].
    pub fn uniform(nangles: usize, half: f64, ds: f64) -> Self {
        let ns = 2 * (half / ds - 1e-9).ceil() as usize + 1;
        let s0 = -((ns - 1) as f64) * 0.5 * ds;
        let angles = (0..nangles).map(|a| PI * a as f64 / nangles as f64).collect();
        Sinogram { angles, s0, ds, ns, values: vec![0.0; nangles * ns] }
    }

    /// Fills the sinogram by quadrature of `rho`.
    pub fn oracle(nangles: usize, half: f64, ds: f64, rho: &(dyn Fn(Point) -> f64 + Sync), reach: f64) -> Self {
        let mut sino = Sinogram::uniform(nangles, half, ds);
        let dirs: Vec<(Point, Point)> = (0..nangles).map(|a| sino.direction(a)).collect();
        let (s0, ns) = (sino.s0, sino.ns);
        sino.values.par_chunks_mut(ns).enumerate().for_each(|(a, row)| {
            let (w, nrm) = dirs[a];
            for (p, v) in row.iter_mut().enumerate() {
                let s = s0 + p as f64 * ds;
                *v = xray_transform(rho, w, [s * nrm[0], s * nrm[1]], reach);
            }
        });
        sino
    }
}

/// Square node grid on which spatial reconstructions are returned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneGrid {
    pub n: usize,
    pub lo: Point,
    pub d: f64,
}

impl PlaneGrid {
    /// Cell-centred grid over the bounding square of Ω.
    pub fn covering(spec: &DomainSpec, n: usize) -> Self {
        let h = spec.half_extent();
        let side = 2.0 * h[0].max(h[1]);
        let d = side / n as f64;
        PlaneGrid { n, lo: [-0.5 * side + 0.5 * d; 2], d }
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize) -> Point {
        [self.lo[0] + i as f64 * self.d, self.lo[1] + j as f64 * self.d]
    }

    pub fn sample(&self, f: impl Fn(Point) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for j in 0..self.n {
            for i in 0..self.n {
                out.push(f(self.point(i, j)));
            }
        }
        out
    }
}

/// Filtered back-projection with the Ram-Lak kernel, evaluated on `grid`.
pub fn invert_xray(sino: &Sinogram, grid: PlaneGrid) -> Result<Vec<f64>> {
    let (na, ns) = (sino.angles.len(), sino.ns);
    if na == 0 || ns == 0 || sino.values.len() != na * ns {
        return invalid("sinogram shape is inconsistent");
    }
    let len = (2 * ns).next_power_of_two();
    let ds = sino.ds;
    let mut kernel = vec![C64::new(0.0, 0.0); len];
    for (k, z) in kernel.iter_mut().enumerate() {
        let n = if k <= len / 2 { k as i64 } else { k as i64 - len as i64 };
        let v = if n == 0 {
            0.25 / (ds * ds)
        } else if n % 2 != 0 {
            -1.0 / (PI * PI * (n * n) as f64 * ds * ds)
        } else {
            0.0
        };
        *z = C64::new(v, 0.0);
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    fwd.process(&mut kernel);
    let filtered: Vec<Vec<f64>> = (0..na)
        .into_par_iter()
        .map(|a| {
            let mut row = vec![C64::new(0.0, 0.0); len];
            for p in 0..ns {
                row[p] = C64::new(sino.values[a * ns + p], 0.0);
            }
            fwd.process(&mut row);
            row.iter_mut().zip(&kernel).for_each(|(r, k)| *r *= k);
            inv.process(&mut row);
            row[..ns].iter().map(|z| z.re * ds / len as f64).collect()
        })
        .collect();
    let dirs: Vec<Point> = (0..na).map(|a| sino.direction(a).1).collect();
    let scale = PI / na as f64;
    let mut out = vec![0.0; grid.n * grid.n];
    out.par_chunks_mut(grid.n).enumerate().for_each(|(j, row)| {
        for (i, v) in row.iter_mut().enumerate() {
            let x = grid.point(i, j);
            let mut acc = 0.0;
            for (a, q) in filtered.iter().enumerate() {
                let f = (dot(x, dirs[a]) - sino.s0) / ds;
                let p0 = f.floor();
                if p0 < 0.0 || p0 as usize + 1 >= ns {
                    continue;
                }
                let (p, w) = (p0 as usize, f - p0);
                acc += (1.0 - w) * q[p] + w * q[p + 1];
            }
            *v = acc * scale;
        }
    });
    Ok(out)
}

/// Signed DFT frequency 2πk'/(n·d) of index k.
#[inline]
pub fn frequency(k: usize, n: usize, d: f64) -> f64 {
    let kk = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
    2.0 * PI * kk / (n as f64 * d)
}

fn is_nyquist(k: usize, n: usize) -> bool {
    n.is_multiple_of(2) && k == n / 2
}

/// In-place 3-D FFT of `[k][j][i]` data; the inverse is normalized.
pub fn fft3(data: &mut [C64], nt: usize, nx: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (px, pt) = if inverse {
        (planner.plan_fft_inverse(nx), planner.plan_fft_inverse(nt))
    } else {
        (planner.plan_fft_forward(nx), planner.plan_fft_forward(nt))
    };
    data.par_chunks_mut(nx).for_each(|row| px.process(row));
    data.par_chunks_mut(nx * nx).for_each(|plane| {
        let mut col = vec![C64::new(0.0, 0.0); nx];
        for i in 0..nx {
            for j in 0..nx {
                col[j] = plane[j * nx + i];
            }
            px.process(&mut col);
            for j in 0..nx {
                plane[j * nx + i] = col[j];
            }
        }
    });
    let stride = nx * nx;
    let columns: Vec<Vec<C64>> = (0..stride)
        .into_par_iter()
        .map(|s| {
            let mut col: Vec<C64> = (0..nt).map(|k| data[k * stride + s]).collect();
            pt.process(&mut col);
            col
        })
        .collect();
    let scale = if inverse { 1.0 / (nt * stride) as f64 } else { 1.0 };
    for (s, col) in columns.iter().enumerate() {
        for k in 0..nt {
            data[k * stride + s] = col[k] * scale;
        }
    }
}

/// Samples of the continuous transform â(τ_k, ξ_ij) on the DFT frequencies
/// of a spacetime lattice (FFT ordering, `[k][j][i]`), with a mask of the
/// samples that carry data.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeSpectrum {
    pub lattice: SpacetimeLattice,
    pub values: Vec<C64>,
    pub mask: Vec<bool>,
}

impl ConeSpectrum {
    pub fn tau(&self, k: usize) -> f64 {
        frequency(k, self.lattice.nt, self.lattice.dt)
    }

    pub fn xi(&self, i: usize, j: usize) -> Point {
        let l = &self.lattice;
        [frequency(i, l.nx, l.dx), frequency(j, l.nx, l.dx)]
    }

    /// Index of the frequency (−τ, −ξ).
    pub fn mirror(&self, idx: usize) -> usize {
        let (nt, nx) = (self.lattice.nt, self.lattice.nx);
        let (k, r) = (idx / (nx * nx), idx % (nx * nx));
        let (j, i) = (r / nx, r % nx);
        let neg = |a: usize, n: usize| (n - a) % n;
        self.lattice.index(neg(k, nt), neg(i, nx), neg(j, nx))
    }
}

/// Factor mapping DFT coefficients of lattice samples to the continuous
/// transform at the same frequency.
fn lattice_phase(lat: &SpacetimeLattice, k: usize, i: usize, j: usize) -> C64 {
    let tau = frequency(k, lat.nt, lat.dt);
    let (x0, x1) = (frequency(i, lat.nx, lat.dx), frequency(j, lat.nx, lat.dx));
    C64::from_polar(lat.cell(), -(tau * lat.t0 + x0 * lat.lo[0] + x1 * lat.lo[1]))
}

/// Continuous-transform samples of a lattice field (every frequency kept).
pub fn spectrum_of(lat: &SpacetimeLattice, field: &[f64]) -> ConeSpectrum {
    let mut data: Vec<C64> = field.iter().map(|&v| C64::new(v, 0.0)).collect();
    fft3(&mut data, lat.nt, lat.nx, false);
    for k in 0..lat.nt {
        for j in 0..lat.nx {
            for i in 0..lat.nx {
                data[lat.index(k, i, j)] *= lattice_phase(lat, k, i, j);
            }
        }
    }
    ConeSpectrum { lattice: *lat, values: data, mask: vec![true; lat.len()] }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceOptions {
    /// Frequencies with |ξ| above this are left out of the mask.
    pub band_limit: Option<f64>,
    /// Time at which lines are anchored before interpolating in direction
    /// (defaults to the middle of the lattice time range).
    pub anchor_time: Option<f64>,
}

/// Unit vector orthogonal to ξ used to complete ω: the +90° rotation of
/// ξ/|ξ|, flipped into the upper half-plane.
pub fn zeta(xi: Point) -> Point {
    let n = norm(xi);
    let mut z = [-xi[1] / n, xi[0] / n];
    if z[1] < 0.0 || (z[1] == 0.0 && z[0] < 0.0) {
        z = [-z[0], -z[1]];
    }
    z
}

/// Direction ω with ω·ξ = τ, for |τ| ≤ |ξ| and ξ ≠ 0.
pub fn cone_direction(tau: f64, xi: Point) -> Point {
    let n2 = dot(xi, xi);
    let z = zeta(xi);
    let s = (1.0 - tau * tau / n2).max(0.0).sqrt();
    [tau / n2 * xi[0] + s * z[0], tau / n2 * xi[1] + s * z[1]]
}

fn angular_weights(phi: f64, ndir: usize) -> [(usize, f64); 4] {
    let h = 2.0 * PI / ndir as f64;
    let f = phi.rem_euclid(2.0 * PI) / h;
    let base = f.floor();
    let s = f - base;
    let w = [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ];
    let b = base as i64;
    let idx = |o: i64| (b + o).rem_euclid(ndir as i64) as usize;
    [(idx(-1), w[0]), (idx(0), w[1]), (idx(1), w[2]), (idx(2), w[3])]
}

fn uniform_angles(dirs: &[Point]) -> bool {
    let n = dirs.len() as f64;
    dirs.iter().enumerate().all(|(m, d)| {
        let phi = 2.0 * PI * m as f64 / n;
        (d[0] - phi.cos()).abs() < 1e-9 && (d[1] - phi.sin()).abs() < 1e-9
    })
}

/// Cone samples â(τ, ξ) = ∫ R(a)(ω, y) e^{−iy·ξ} dy with ω·ξ = −τ, where
/// â(τ, ξ) = ∫∫ a(t, x) e^{−i(tτ + x·ξ)} dt dx.
///
/// The spatial transform is taken for every direction of the data set and
/// then interpolated in the angle of ω (periodic cubic). Lines are
/// re-parametrized by their position at the anchor time before the
/// interpolation, which removes the fast phase e^{−iτ t_c}.
pub fn fourier_slice(rays: &RayDataSet, lattice: &SpacetimeLattice, opts: SliceOptions) -> Result<ConeSpectrum> {
    rays.validate()?;
    let ndir = rays.dirs.len();
    if ndir < 4 || !uniform_angles(&rays.dirs) {
        return invalid("fourier_slice needs at least 4 uniformly spaced directions starting at angle 0");
    }
    let half = lattice.lo[0].abs().max(lattice.lo[1].abs()) + 0.5 * lattice.dx;
    let t_end = lattice.time(lattice.nt - 1) + 0.5 * lattice.dt;
    if rays.offsets.half_width() + 1e-9 < half + t_end {
        return invalid(format!(
            "offset lattice half-width {:.3} does not cover lines through the lattice (need {:.3})",
            rays.offsets.half_width(),
            half + t_end
        ));
    }
    let tc = opts.anchor_time.unwrap_or(0.5 * (lattice.t0 + lattice.time(lattice.nt - 1)));
    let (nx, ny) = (lattice.nx, rays.offsets.n);
    let xis: Vec<f64> = (0..nx).map(|i| frequency(i, nx, lattice.dx)).collect();
    let ys: Vec<f64> = (0..ny).map(|i| rays.offsets.lo + i as f64 * rays.offsets.d).collect();
    let e: Vec<C64> = xis.iter().flat_map(|&x| ys.iter().map(move |&y| C64::from_polar(1.0, -x * y))).collect();
    let d2 = rays.offsets.d * rays.offsets.d;
    // anchored[m][b][a]: spatial transform at ξ = (ξ_a, ξ_b) of R(θ_m, z + t_c θ_m) in z.
    let anchored: Vec<Vec<C64>> = (0..ndir)
        .into_par_iter()
        .map(|m| {
            let r = &rays.values[m * ny * ny..(m + 1) * ny * ny];
            let mut g = vec![C64::new(0.0, 0.0); ny * nx];
            for j in 0..ny {
                let row = &r[j * ny..(j + 1) * ny];
                if row.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for a in 0..nx {
                    let ea = &e[a * ny..(a + 1) * ny];
                    g[j * nx + a] = row.iter().zip(ea).map(|(&v, z)| z * v).sum();
                }
            }
            let th = rays.dirs[m];
            let mut out = vec![C64::new(0.0, 0.0); nx * nx];
            for b in 0..nx {
                let eb = &e[b * ny..(b + 1) * ny];
                for a in 0..nx {
                    let mut acc = C64::new(0.0, 0.0);
                    for j in 0..ny {
                        acc += eb[j] * g[j * nx + a];
                    }
                    let shift = -tc * (th[0] * xis[a] + th[1] * xis[b]);
                    out[b * nx + a] = acc * C64::from_polar(d2, shift);
                }
            }
            out
        })
        .collect();
    let nt = lattice.nt;
    let band = opts.band_limit.unwrap_or(f64::INFINITY);
    let mut values = vec![C64::new(0.0, 0.0); lattice.len()];
    let mut mask = vec![false; lattice.len()];
    values.par_chunks_mut(nx * nx).zip(mask.par_chunks_mut(nx * nx)).enumerate().for_each(|(k, (vals, msk))| {
        let tau = frequency(k, nt, lattice.dt);
        if is_nyquist(k, nt) {
            return;
        }
        for b in 0..nx {
            for a in 0..nx {
                if is_nyquist(a, nx) || is_nyquist(b, nx) {
                    continue;
                }
                let xi = [xis[a], xis[b]];
                let n = norm(xi);
                if tau.abs() > n || n > band {
                    continue;
                }
                let s = b * nx + a;
                let d = if n == 0.0 {
                    anchored.iter().map(|v| v[s]).sum::<C64>() / ndir as f64
                } else {
                    let w = cone_direction(-tau, xi);
                    angular_weights(w[1].atan2(w[0]), ndir).iter().map(|&(m, c)| anchored[m][s] * c).sum()
                };
                vals[s] = d * C64::from_polar(1.0, -tau * tc);
                msk[s] = true;
            }
        }
    });
    Ok(ConeSpectrum { lattice: *lattice, values, mask })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionScheme {
    /// Alternating projections; the data projection is relaxed.
    #[default]
    Pocs,
    /// Relaxed composite step x ← x + w(P₂P₁x − x).
    Landweber,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionConfig {
    pub iterations: usize,
    pub relaxation: f64,
    /// Lattice nodes where the unknown may differ from `exterior`.
    pub support: Vec<bool>,
    /// Known values a₀ imposed outside the support.
    pub exterior: Vec<f64>,
    /// Stop when the relative data residual drops below this.
    pub tolerance: f64,
    pub scheme: CompletionScheme,
}

impl CompletionConfig {
    pub fn new(support: Vec<bool>, exterior: Vec<f64>) -> Self {
        CompletionConfig { iterations: 500, relaxation: 1.0, support, exterior, tolerance: 1e-10, scheme: CompletionScheme::Pocs }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return invalid(format!("relaxation must lie in (0, 1], got {}", self.relaxation));
        }
        if self.support.len() != len || self.exterior.len() != len {
            return invalid(format!(
                "support/exterior lengths {}/{} do not match the lattice size {len}",
                self.support.len(),
                self.exterior.len()
            ));
        }
        if self.iterations == 0 {
            return invalid("iteration count must be positive");
        }
        Ok(())
    }
}

/// Completed field plus the per-iteration relative distance to the data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub field: Vec<f64>,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl Completion {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("iteration,relative_residual[1]\n");
        for (i, r) in self.residuals.iter().enumerate() {
            s.push_str(&format!("{},{:.9e}\n", i + 1, r));
        }
        s
    }
}

/// Completes a cone-restricted spectrum by alternating projections onto the
/// measured data (on the mask) and the physical constraints (real, equal to
/// the exterior values off the support).
pub fn invert_cone_spectrum(spec: &ConeSpectrum, cfg: &CompletionConfig) -> Result<Completion> {
    let lat = spec.lattice;
    let len = lat.len();
    cfg.validate(len)?;
    if spec.values.len() != len || spec.mask.len() != len {
        return invalid("spectrum size does not match its lattice");
    }
    let mut target = vec![C64::new(0.0, 0.0); len];
    for k in 0..lat.nt {
        for j in 0..lat.nx {
            for i in 0..lat.nx {
                let s = lat.index(k, i, j);
                if spec.mask[s] {
                    target[s] = spec.values[s] / lattice_phase(&lat, k, i, j);
                }
            }
        }
    }
    let data_norm = target.iter().zip(&spec.mask).filter(|(_, &m)| m).map(|(z, _)| z.norm_sqr()).sum::<f64>().sqrt();
    let mut x: Vec<f64> = (0..len).map(|s| if cfg.support[s] { 0.0 } else { cfg.exterior[s] }).collect();
    let mut residuals = Vec::new();
    let mut rising = 0;
    let mut buf = vec![C64::new(0.0, 0.0); len];
    let w = cfg.relaxation;
    for it in 0..cfg.iterations {
        buf.par_iter_mut().zip(&x).for_each(|(b, &v)| *b = C64::new(v, 0.0));
        fft3(&mut buf, lat.nt, lat.nx, false);
        let mut res = 0.0;
        for s in 0..len {
            if spec.mask[s] {
                let diff = target[s] - buf[s];
                res += diff.norm_sqr();
                buf[s] += match cfg.scheme {
                    CompletionScheme::Pocs => diff * w,
                    CompletionScheme::Landweber => diff,
                };
            }
        }
        let rel = if data_norm > 0.0 { res.sqrt() / data_norm } else { res.sqrt() };
        if !rel.is_finite() {
            return Err(Error::NonFinite { step: it, time: 0.0, detail: "completion residual".into() });
        }
        if let Some(&prev) = residuals.last() {
            rising = if rel > prev { rising + 1 } else { 0 };
        }
        residuals.push(rel);
        if rising >= 10 {
            return Err(Error::Divergence { iterations: it + 1, residual: rel });
        }
        fft3(&mut buf, lat.nt, lat.nx, true);
        for s in 0..len {
            let p = if cfg.support[s] { buf[s].re } else { cfg.exterior[s] };
            x[s] = match cfg.scheme {
                CompletionScheme::Pocs => p,
                CompletionScheme::Landweber => x[s] + w * (p - x[s]),
            };
        }
        if rel <= cfg.tolerance {
            return Ok(Completion { field: x, residuals, converged: true });
        }
    }
    Ok(Completion { field: x, residuals, converged: false })
}

/// C(ε^{μ/2} + |log ε|^{−1}). `n` is the dimension parameter carried with the
/// constants for reporting; it does not enter the simplified bound.
pub fn stability_bound(eps: f64, mu: f64, n: usize, c: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return invalid(format!("stability bound needs 0 < ε < 1, got {eps}"));
    }
    if !(mu > 0.0 && mu < 1.0 + 1e-12) || c <= 0.0 || n == 0 {
        return invalid("stability constants need μ ∈ (0, 1], C > 0, N ≥ 1");
    }
    Ok(c * (eps.powf(0.5 * mu) + 1.0 / eps.ln().abs()))
}
