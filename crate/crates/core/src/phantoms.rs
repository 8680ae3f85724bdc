//! Bundled synthetic coefficients with closed-form definitions. Lengths scale
//! with r and times with T so the supports stay in their named regions on any
//! admissible domain; the values quoted below are for r = 1, T = 2.5.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{dot, DomainSpec, Point, RegionTag};

/// a(t, x) = A (1 − s²)⁴ with s² = ((t − t_c)/R_t)² + |x − x_c|²/R_x², zero for s ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_t: f64,
    pub center_x: Point,
    pub radius_t: f64,
    pub radius_x: f64,
    pub amplitude: f64,
}

impl Ellipsoid {
    #[inline]
    pub fn eval(&self, t: f64, x: Point) -> f64 {
        let dx = [x[0] - self.center_x[0], x[1] - self.center_x[1]];
        let s2 = ((t - self.center_t) / self.radius_t).powi(2) + dot(dx, dx) / (self.radius_x * self.radius_x);
        if s2 >= 1.0 {
            0.0
        } else {
            self.amplitude * (1.0 - s2).powi(4)
        }
    }

    /// Checks that the closed support lies in `region` by sampling its surface
    /// and interior.
    pub fn check_support(&self, spec: &DomainSpec, region: RegionTag) -> Result<()> {
        match self.first_outside(|t, x| region.contains(t, x, spec)) {
            None => Ok(()),
            Some((t, x)) => invalid(format!("phantom support leaves {region:?} at t = {t:.3}, x = {x:?}")),
        }
    }

    /// First sampled support point where `inside` fails.
    pub fn first_outside(&self, inside: impl Fn(f64, Point) -> bool) -> Option<(f64, Point)> {
        let n = 24;
        for i in 0..=n {
            let u = -1.0 + 2.0 * i as f64 / n as f64;
            let t = self.center_t + u * self.radius_t;
            let rad = self.radius_x * (1.0 - u * u).max(0.0).sqrt();
            for j in 0..4 * n {
                let ang = 2.0 * std::f64::consts::PI * j as f64 / (4 * n) as f64;
                for frac in [0.0, 0.5, 1.0] {
                    let x = [self.center_x[0] + frac * rad * ang.cos(), self.center_x[1] + frac * rad * ang.sin()];
                    if !inside(t, x) {
                        return Some((t, x));
                    }
                }
            }
        }
        None
    }
}

/// ρ(x) = A exp(−|x − c|²/(2σ²)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub center: Point,
    pub sigma: f64,
    pub amplitude: f64,
}

impl Gaussian2 {
    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        let d = [x[0] - self.center[0], x[1] - self.center[1]];
        self.amplitude * (-dot(d, d) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// a(t, x) = A exp(−(t − t_c)²/(2σ_t²)) exp(−|x|²/(2σ_x²)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparableGaussian {
    pub center_t: f64,
    pub sigma_t: f64,
    pub sigma_x: f64,
    pub amplitude: f64,
}

impl SeparableGaussian {
    #[inline]
    pub fn eval(&self, t: f64, x: Point) -> f64 {
        self.amplitude
            * (-(t - self.center_t).powi(2) / (2.0 * self.sigma_t * self.sigma_t)).exp()
            * (-dot(x, x) / (2.0 * self.sigma_x * self.sigma_x)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phantom {
    /// Ellipsoid bump, t_c = T/2, R_t = 0.4(T − r) (0.6), R_x = 0.4r, x_c = 0.
    #[serde(rename = "bump-in-Xstar")]
    BumpInXstar,
    /// Ellipsoid bump, t_c = 0.15r, R_t = 0.1r, R_x = 0.25r, x_c = 0.
    BumpInCloak,
    /// Ellipsoid bump, t_c = T − 0.3r, R_t = 0.18r, R_x = 0.22r, x_c = (0.2r, 0).
    #[serde(rename = "bump-in-Xsharp-only")]
    BumpInXsharpOnly,
    /// Scattering density, c = (0.1r, −0.05r), σ = 0.1r.
    GaussianRho,
    /// t_c = T/2, σ_t = 0.2, σ_x = 0.08r.
    SeparableGaussianA,
}

impl Phantom {
    pub const ALL: [Phantom; 5] = [
        Phantom::BumpInXstar,
        Phantom::BumpInCloak,
        Phantom::BumpInXsharpOnly,
        Phantom::GaussianRho,
        Phantom::SeparableGaussianA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phantom::BumpInXstar => "bump-in-Xstar",
            Phantom::BumpInCloak => "bump-in-cloak",
            Phantom::BumpInXsharpOnly => "bump-in-Xsharp-only",
            Phantom::GaussianRho => "gaussian-rho",
            Phantom::SeparableGaussianA => "separable-gaussian-a",
        }
    }

    pub fn available() -> String {
        Phantom::ALL.iter().map(|p| p.name()).collect::<Vec<_>>().join(", ")
    }

    /// Whether the phantom is a scattering density ρ(x) rather than an absorption.
    pub fn is_density(self) -> bool {
        self == Phantom::GaussianRho
    }

    /// Region that must contain the support, when the phantom is a bump.
    pub fn region(self) -> Option<RegionTag> {
        match self {
            Phantom::BumpInXstar => Some(RegionTag::Xstar),
            Phantom::BumpInCloak => Some(RegionTag::Cloak),
            Phantom::BumpInXsharpOnly => Some(RegionTag::Xsharp),
            _ => None,
        }
    }

    pub fn ellipsoid(self, spec: &DomainSpec, amplitude: f64) -> Option<Ellipsoid> {
        let (r, tt) = (spec.r, spec.horizon);
        let e = |center_t, center_x, radius_t, radius_x| Ellipsoid { center_t, center_x, radius_t, radius_x, amplitude };
        match self {
            Phantom::BumpInXstar => Some(e(0.5 * tt, [0.0, 0.0], 0.4 * (tt - r), 0.4 * r)),
            Phantom::BumpInCloak => Some(e(0.15 * r, [0.0, 0.0], 0.1 * r, 0.25 * r)),
            Phantom::BumpInXsharpOnly => Some(e(tt - 0.3 * r, [0.2 * r, 0.0], 0.18 * r, 0.22 * r)),
            _ => None,
        }
    }

    /// Absorption a(t, x) for the absorption phantoms, with its support checked.
    pub fn absorption(self, spec: &DomainSpec, amplitude: f64) -> Result<Arc<dyn Fn(f64, Point) -> f64 + Send + Sync>> {
        if let Some(e) = self.ellipsoid(spec, amplitude) {
            if let Some(region) = self.region() {
                e.check_support(spec, region)?;
            }
            if self == Phantom::BumpInXsharpOnly {
                // Must also stay out of X_{r,*}: the whole bump lies in t ≥ T − r/2.
                if e.center_t - e.radius_t < spec.horizon - 0.5 * spec.r {
                    return invalid("bump-in-Xsharp-only overlaps X_{r,*}");
                }
            }
            return Ok(Arc::new(move |t, x| e.eval(t, x)));
        }
        match self {
            Phantom::SeparableGaussianA => {
                let g = self.separable(spec, amplitude).expect("separable phantom");
                Ok(Arc::new(move |t, x| g.eval(t, x)))
            }
            _ => invalid(format!("{} is a scattering density, not an absorption", self.name())),
        }
    }

    pub fn density(self, spec: &DomainSpec, amplitude: f64) -> Option<Gaussian2> {
        (self == Phantom::GaussianRho).then(|| Gaussian2 { center: [0.1 * spec.r, -0.05 * spec.r], sigma: 0.1 * spec.r, amplitude })
    }

    pub fn separable(self, spec: &DomainSpec, amplitude: f64) -> Option<SeparableGaussian> {
        (self == Phantom::SeparableGaussianA).then_some(SeparableGaussian {
            center_t: 0.5 * spec.horizon,
            sigma_t: 0.2,
            sigma_x: 0.08 * spec.r,
            amplitude,
        })
    }
}

impl fmt::Display for Phantom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phantom {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phantom::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown phantom '{s}'; available: {}", Phantom::available())))
    }
}
