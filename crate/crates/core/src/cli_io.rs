//! Experiment configuration, the LBTR array format, CSV/JSON artifacts and the
//! `lbtr` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::albedo::{self, free_transport_baseline, op_distance, probe_catalog, MeasurementKind};
use crate::error::{invalid, Error, Result};
use crate::geometry::{DomainSpec, Point, Shape, SpacetimeLattice};
use crate::inversion::{
    cloak_demo, reconstruct_absorption, reconstruct_scattering, AbsorptionConfig, CloakConfig, ProbeFrame,
    ProbeParams, ScatterConfig,
};
use crate::phantoms::Phantom;
use crate::probes::{go_remainder, max_resolved_lambda, BumpProfile, DirectionWeight, GoProbe, Spatial};
use crate::raytransform::{ray_data_oracle, CompletionScheme};
use crate::transport::{
    Absorption, Bounds, C64, CoefficientField, Interpolation, Kernel, LpNorm, SolverOptions, SpaceTimeGrid,
};

pub const ARRAY_MAGIC: [u8; 4] = *b"LBTR";
pub const ARRAY_VERSION: u16 = 1;

/// Scalar payload of an [`ArrayFile`].
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    Real(Vec<f64>),
    Complex(Vec<C64>),
}

/// Row-major array with its dimensions. On disk: magic "LBTR", version u16,
/// rank u16, rank × u64 dims, scalar kind u16 (0 real, 1 complex), then the
/// little-endian f64 payload (complex values as re, im pairs).
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    pub dims: Vec<u64>,
    pub data: ArrayData,
}

fn element_count(dims: &[u64]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
}

impl ArrayFile {
    pub fn real(dims: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        Self::checked(dims, ArrayData::Real(values))
    }

    pub fn complex(dims: Vec<u64>, values: Vec<C64>) -> Result<Self> {
        Self::checked(dims, ArrayData::Complex(values))
    }

    fn checked(dims: Vec<u64>, data: ArrayData) -> Result<Self> {
        if dims.len() > u16::MAX as usize {
            return invalid("array rank exceeds u16");
        }
        let len = match &data {
            ArrayData::Real(v) => v.len(),
            ArrayData::Complex(v) => v.len(),
        };
        if element_count(&dims) != Some(len) {
            return invalid(format!("array payload has {len} elements but dims {dims:?}"));
        }
        Ok(ArrayFile { dims, data })
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ArrayData::Real(v) => v.len(),
            ArrayData::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + 16 * self.len());
        out.extend_from_slice(&ARRAY_MAGIC);
        out.extend_from_slice(&ARRAY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            ArrayData::Real(v) => {
                out.extend_from_slice(&0u16.to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            ArrayData::Complex(v) => {
                out.extend_from_slice(&1u16.to_le_bytes());
                for z in v {
                    out.extend_from_slice(&z.re.to_le_bytes());
                    out.extend_from_slice(&z.im.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            match end {
                Some(e) => {
                    let s = &bytes[pos..e];
                    pos = e;
                    Ok(s)
                }
                None => Err(Error::Corrupt(format!("truncated while reading {what} at byte {pos}"))),
            }
        };
        let u16_at = |s: &[u8]| u16::from_le_bytes([s[0], s[1]]);
        if take(4, "magic")? != ARRAY_MAGIC {
            return Err(Error::Corrupt("bad magic bytes (expected \"LBTR\")".into()));
        }
        let version = u16_at(take(2, "version")?);
        if version != ARRAY_VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {version}")));
        }
        let rank = u16_at(take(2, "rank")?) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(8, "dims")?.try_into().expect("8 bytes")));
        }
        let kind = u16_at(take(2, "scalar kind")?);
        let count = element_count(&dims).ok_or_else(|| Error::Corrupt(format!("dims {dims:?} overflow")))?;
        let width = match kind {
            0 => 8,
            1 => 16,
            k => return Err(Error::Corrupt(format!("unknown scalar kind {k}"))),
        };
        let size = count.checked_mul(width).ok_or_else(|| Error::Corrupt(format!("dims {dims:?} overflow")))?;
        let payload = take(size, "payload")?;
        if pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes after payload", bytes.len() - pos)));
        }
        let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8 bytes"));
        let data = if kind == 0 {
            ArrayData::Real(payload.chunks_exact(8).map(f).collect())
        } else {
            ArrayData::Complex(payload.chunks_exact(16).map(|c| C64::new(f(&c[..8]), f(&c[8..]))).collect())
        };
        Ok(ArrayFile { dims, data })
    }
}

pub fn write_array(path: &Path, array: &ArrayFile) -> Result<()> {
    fs::write(path, array.to_bytes())?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<ArrayFile> {
    ArrayFile::from_bytes(&fs::read(path)?)
}

/// SplitMix64 child seed `index` of `seed`: the (index + 1)-th output of a
/// SplitMix64 stream started at `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = SplitMix64::seed_from_u64(seed);
    for _ in 0..index {
        rng.next_u64();
    }
    rng.next_u64()
}

/// Stream indices passed to [`derive_seed`].
pub mod streams {
    pub const ALBEDO_PROBES: u64 = 0;
    pub const CLOAK_PROBES: u64 = 1;
    pub const FORWARD_PROBE: u64 = 2;
    pub const EPSILON_PROBES: u64 = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Coarse,
    Desk,
    Fine,
}

impl Resolution {
    /// (nt, nx, ndir).
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Resolution::Coarse => (64, 32, 32),
            Resolution::Desk => (128, 64, 32),
            Resolution::Fine => (256, 128, 32),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "coarse" => Some(Resolution::Coarse),
            "desk" => Some(Resolution::Desk),
            "fine" => Some(Resolution::Fine),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Resolution::Coarse => "coarse",
            Resolution::Desk => "desk",
            Resolution::Fine => "fine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AbsorptionSpec {
    Zero,
    Phantom {
        phantom: Phantom,
        amplitude: f64,
    },
    /// Rank-3 real array `[nt][nx][nx]` on the covering lattice.
    Array {
        path: PathBuf,
        #[serde(skip)]
        values: Arc<Vec<f64>>,
        #[serde(skip)]
        lattice: Option<SpacetimeLattice>,
    },
}

/// k(x, θ, θ') = ρ(x)κ with a constant κ.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScatteringSpec {
    Zero,
    Phantom { phantom: Phantom, amplitude: f64, kappa: f64 },
}

impl ScatteringSpec {
    fn parts(&self, spec: &DomainSpec) -> Option<(crate::phantoms::Gaussian2, f64)> {
        match *self {
            ScatteringSpec::Zero => None,
            ScatteringSpec::Phantom { phantom, amplitude, kappa } => Some((phantom.density(spec, amplitude)?, kappa)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientSpec {
    pub absorption: AbsorptionSpec,
    pub scattering: ScatteringSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub resolution: Option<Resolution>,
    pub nt: usize,
    pub nx: usize,
    pub ndir: usize,
}

/// Fully validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub domain: DomainSpec,
    pub grid: GridSpec,
    pub blackbox: CoefficientSpec,
    pub reference: CoefficientSpec,
    pub bounds: Bounds,
    pub kind: MeasurementKind,
    /// λ values of the `probe` sweep; pipelines use the largest.
    pub lambdas: Vec<f64>,
    pub completion: AbsorptionConfig,
    pub scatter: ScatterConfig,
    pub cloak: CloakConfig,
    pub cloak_refine: bool,
    pub albedo_probes: usize,
    pub seed: u64,
    /// Left out of the serialized config so artifacts do not depend on where they are written.
    #[serde(skip)]
    pub output: PathBuf,
}

const TOP_KEYS: &[&str] = &[
    "domain", "grid", "blackbox", "reference", "bounds", "kind", "probe", "completion", "stability", "scatter",
    "cloak", "albedo", "solver", "seed", "output",
];

struct Reader {
    errors: Vec<String>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Reader {
    fn push(&mut self, path: &str, msg: impl fmt::Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn check_keys(&mut self, o: &Map<String, Value>, path: &str, allowed: &[&str]) {
        for k in o.keys() {
            if !allowed.contains(&k.as_str()) {
                self.push(&join(path, k), format!("unknown field (expected one of: {})", allowed.join(", ")));
            }
        }
    }

    /// Object at `parent[key]`; `None` when absent or null.
    fn section<'a>(
        &mut self,
        parent: Option<&'a Map<String, Value>>,
        key: &str,
        path: &str,
        allowed: &[&str],
    ) -> Option<&'a Map<String, Value>> {
        let p = join(path, key);
        match parent?.get(key)? {
            Value::Null => None,
            Value::Object(o) => {
                self.check_keys(o, &p, allowed);
                Some(o)
            }
            _ => {
                self.push(&p, "expected an object");
                None
            }
        }
    }

    fn value<'a>(&self, o: Option<&'a Map<String, Value>>, key: &str) -> Option<&'a Value> {
        o.and_then(|o| o.get(key)).filter(|v| !v.is_null())
    }

    fn f64(&mut self, o: Option<&Map<String, Value>>, key: &str, path: &str) -> Option<f64> {
        let v = self.value(o, key)?;
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.push(&join(path, key), "expected a finite number");
                None
            }
        }
    }

    fn u64(&mut self, o: Option<&Map<String, Value>>, key: &str, path: &str) -> Option<u64> {
        let v = self.value(o, key)?;
        let r = v.as_u64();
        if r.is_none() {
            self.push(&join(path, key), "expected a non-negative integer");
        }
        r
    }

    fn usize(&mut self, o: Option<&Map<String, Value>>, key: &str, path: &str) -> Option<usize> {
        self.u64(o, key, path).map(|v| v as usize)
    }

    fn bool(&mut self, o: Option<&Map<String, Value>>, key: &str, path: &str) -> Option<bool> {
        let v = self.value(o, key)?;
        let r = v.as_bool();
        if r.is_none() {
            self.push(&join(path, key), "expected true or false");
        }
        r
    }

    fn str<'a>(&mut self, o: Option<&'a Map<String, Value>>, key: &str, path: &str) -> Option<&'a str> {
        let v = o.and_then(|o| o.get(key)).filter(|v| !v.is_null())?;
        let r = v.as_str();
        if r.is_none() {
            self.push(&join(path, key), "expected a string");
        }
        r
    }

    fn phantom(&mut self, name: &str, path: &str) -> Option<Phantom> {
        match name.parse::<Phantom>() {
            Ok(p) => Some(p),
            Err(_) => {
                self.push(path, format!("unknown phantom '{name}'; available phantoms: {}", Phantom::available()));
                None
            }
        }
    }

    fn absorption(&mut self, v: Option<&Value>, path: &str, base: &Path, default: AbsorptionSpec) -> AbsorptionSpec {
        let v = match v {
            None | Some(Value::Null) => return default,
            Some(v) => v,
        };
        if v.as_str() == Some("zero") {
            return AbsorptionSpec::Zero;
        }
        let Some(o) = v.as_object() else {
            self.push(path, "expected \"zero\", {\"phantom\", \"amplitude\"} or {\"array\"}");
            return default;
        };
        if o.contains_key("array") {
            self.check_keys(o, path, &["array"]);
            let Some(p) = self.str(Some(o), "array", path) else { return default };
            let full = base.join(p);
            return AbsorptionSpec::Array { path: full, values: Arc::default(), lattice: None };
        }
        self.check_keys(o, path, &["phantom", "amplitude"]);
        let amplitude = self.f64(Some(o), "amplitude", path).unwrap_or(1.0);
        let Some(name) = self.str(Some(o), "phantom", path) else {
            if !o.contains_key("phantom") {
                self.push(&join(path, "phantom"), "missing field");
            }
            return default;
        };
        let Some(phantom) = self.phantom(name, &join(path, "phantom")) else { return default };
        if phantom.is_density() {
            self.push(&join(path, "phantom"), format!("'{name}' is a scattering density, not an absorption"));
            return default;
        }
        AbsorptionSpec::Phantom { phantom, amplitude }
    }

    fn scattering(&mut self, v: Option<&Value>, path: &str) -> ScatteringSpec {
        let v = match v {
            None | Some(Value::Null) => return ScatteringSpec::Zero,
            Some(v) => v,
        };
        if v.as_str() == Some("zero") {
            return ScatteringSpec::Zero;
        }
        let Some(o) = v.as_object() else {
            self.push(path, "expected \"zero\" or {\"phantom\", \"amplitude\", \"kappa\"}");
            return ScatteringSpec::Zero;
        };
        self.check_keys(o, path, &["phantom", "amplitude", "kappa"]);
        let amplitude = self.f64(Some(o), "amplitude", path).unwrap_or(1.0);
        let kappa = self.f64(Some(o), "kappa", path).unwrap_or(1.0 / (2.0 * std::f64::consts::PI));
        let Some(name) = self.str(Some(o), "phantom", path) else {
            if !o.contains_key("phantom") {
                self.push(&join(path, "phantom"), "missing field");
            }
            return ScatteringSpec::Zero;
        };
        let Some(phantom) = self.phantom(name, &join(path, "phantom")) else { return ScatteringSpec::Zero };
        if !phantom.is_density() {
            self.push(&join(path, "phantom"), format!("'{name}' is an absorption phantom, not a scattering density"));
            return ScatteringSpec::Zero;
        }
        ScatteringSpec::Phantom { phantom, amplitude, kappa }
    }

    fn coefficients(
        &mut self,
        root: Option<&Map<String, Value>>,
        key: &str,
        base: &Path,
        default_absorption: AbsorptionSpec,
    ) -> CoefficientSpec {
        let o = self.section(root, key, "", &["absorption", "scattering"]);
        let absorption = self.absorption(o.and_then(|o| o.get("absorption")), &join(key, "absorption"), base, default_absorption);
        let scattering = self.scattering(o.and_then(|o| o.get("scattering")), &join(key, "scattering"));
        CoefficientSpec { absorption, scattering }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON config; relative array paths resolve
    /// against `base`. Every problem found is reported, each prefixed with its
    /// JSON path.
    pub fn from_value(value: &Value, base: &Path) -> Result<Self> {
        let mut rd = Reader { errors: Vec::new() };
        let root = match value {
            Value::Object(o) => {
                rd.check_keys(o, "", TOP_KEYS);
                Some(o)
            }
            _ => return Err(Error::Config(vec!["$: expected a JSON object".into()])),
        };

        let dom = rd.section(root, "domain", "", &["r", "horizon", "shape"]);
        let r = rd.f64(dom, "r", "domain").unwrap_or(1.0);
        let horizon = rd.f64(dom, "horizon", "domain").unwrap_or(2.5);
        let shape = match dom.and_then(|o| o.get("shape")).filter(|v| !v.is_null()) {
            None => Shape::Disk,
            Some(v) => match serde_json::from_value::<Shape>(v.clone()) {
                Ok(s) => s,
                Err(e) => {
                    rd.push("domain.shape", format!("expected {{\"type\": \"disk\"}} or {{\"type\": \"box\", \"half\": [..]}} ({e})"));
                    Shape::Disk
                }
            },
        };
        let domain = DomainSpec { dim: 2, r, horizon, shape };
        let mut domain_ok = true;
        if !(horizon > 2.0 * r) {
            rd.push(
                "domain.horizon",
                format!("T = {horizon} must satisfy the strict inequality T > 2r = {}", 2.0 * r),
            );
            domain_ok = false;
        } else if let Err(e) = domain.validate() {
            rd.push("domain", e);
            domain_ok = false;
        }

        let g = rd.section(root, "grid", "", &["resolution", "nt", "nx", "ndir"]);
        let resolution = match rd.str(g, "resolution", "grid") {
            Some(s) => Resolution::parse(s).or_else(|| {
                rd.push("grid.resolution", format!("unknown resolution '{s}' (expected coarse, desk or fine)"));
                None
            }),
            None => (rd.value(g, "nt").is_none() && rd.value(g, "nx").is_none()).then_some(Resolution::Desk),
        };
        let (dnt, dnx, dnd) = resolution.unwrap_or(Resolution::Desk).dims();
        let nt = rd.usize(g, "nt", "grid").unwrap_or(dnt);
        let nx = rd.usize(g, "nx", "grid").unwrap_or(dnx);
        let ndir = rd.usize(g, "ndir", "grid").unwrap_or(dnd);
        let mut grid_ok = true;
        for (name, v, min) in [("nt", nt, 1), ("nx", nx, 4), ("ndir", ndir, 4)] {
            if v < min {
                rd.push(&join("grid", name), format!("must be at least {min}"));
                grid_ok = false;
            }
        }

        let b = rd.section(root, "bounds", "", &["m0", "m1", "m2"]);
        let bounds = Bounds {
            m0: rd.f64(b, "m0", "bounds").unwrap_or(2.0),
            m1: rd.f64(b, "m1", "bounds").unwrap_or(1.0),
            m2: rd.f64(b, "m2", "bounds").unwrap_or(1.0),
        };
        for (name, v) in [("m0", bounds.m0), ("m1", bounds.m1), ("m2", bounds.m2)] {
            if v < 0.0 {
                rd.push(&join("bounds", name), "must be non-negative");
            }
        }

        let base = base.to_path_buf();
        let blackbox = rd.coefficients(
            root,
            "blackbox",
            &base,
            AbsorptionSpec::Phantom { phantom: Phantom::BumpInXstar, amplitude: 1.0 },
        );
        let reference = rd.coefficients(root, "reference", &base, AbsorptionSpec::Zero);

        let kind = match rd.str(root, "kind", "") {
            None => MeasurementKind::BoundaryOnly,
            Some(s) => MeasurementKind::from_short_name(s).unwrap_or_else(|| {
                rd.push("kind", format!("unknown kind '{s}' (expected boundary, final or full)"));
                MeasurementKind::BoundaryOnly
            }),
        };

        let solver_sec = rd.section(root, "solver", "", &["interpolation", "predictor_corrector"]);
        let mut solver = SolverOptions::cubic();
        match rd.str(solver_sec, "interpolation", "solver") {
            Some("linear") => solver.interpolation = Interpolation::Linear,
            Some("cubic") | None => {}
            Some(s) => rd.push("solver.interpolation", format!("unknown interpolation '{s}' (expected linear or cubic)")),
        }
        solver.predictor_corrector = rd.bool(solver_sec, "predictor_corrector", "solver").unwrap_or(false);

        let p = rd.section(
            root,
            "probe",
            "",
            &["lambdas", "h", "coupling", "width", "ramp", "frame", "min_normalization", "center_spacing"],
        );
        let mut probe = ProbeParams::for_domain(&domain);
        probe.solver = solver;
        let lambdas = match rd.value(p, "lambdas") {
            None => crate::probes::lambda_sweep(domain.diameter()),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, v) in items.iter().enumerate() {
                    match v.as_f64() {
                        Some(x) if x.is_finite() && x > 0.0 => out.push(x),
                        _ => rd.push(&format!("probe.lambdas[{i}]"), "expected a positive number"),
                    }
                }
                if items.is_empty() {
                    rd.push("probe.lambdas", "must not be empty");
                }
                out
            }
            Some(_) => {
                rd.push("probe.lambdas", "expected an array of numbers");
                Vec::new()
            }
        };
        if let Some(&max) = lambdas.iter().max_by(|a, b| a.total_cmp(b)) {
            probe.lambda = max;
        }
        probe.h = rd.f64(p, "h", "probe");
        if let Some(v) = rd.f64(p, "coupling", "probe") {
            probe.coupling = v;
        }
        if let Some(v) = rd.f64(p, "width", "probe") {
            probe.width = v;
        }
        if let Some(v) = rd.f64(p, "ramp", "probe") {
            probe.ramp = v;
        }
        if let Some(v) = rd.f64(p, "min_normalization", "probe") {
            probe.min_normalization = v;
        }
        match rd.str(p, "frame", "probe") {
            Some("physical") => probe.frame = ProbeFrame::Physical,
            Some("envelope") | None => {}
            Some(s) => rd.push("probe.frame", format!("unknown frame '{s}' (expected envelope or physical)")),
        }
        let center_spacing = rd.f64(p, "center_spacing", "probe");
        if let Err(e) = probe.validate() {
            rd.push("probe", e);
        }

        let c = rd.section(
            root,
            "completion",
            "",
            &["lattice_nx", "lattice_nt", "band_limit", "iterations", "relaxation", "tolerance", "scheme", "max_excluded"],
        );
        let mut completion = AbsorptionConfig::for_domain(&domain);
        completion.probe = probe;
        completion.offset_spacing = center_spacing;
        if let Some(v) = rd.usize(c, "lattice_nx", "completion") {
            completion.lattice_nx = v;
        }
        completion.lattice_nt = rd.usize(c, "lattice_nt", "completion");
        completion.band_limit = rd.f64(c, "band_limit", "completion");
        if let Some(v) = rd.usize(c, "iterations", "completion") {
            completion.iterations = v;
        }
        if let Some(v) = rd.f64(c, "relaxation", "completion") {
            completion.relaxation = v;
        }
        if let Some(v) = rd.f64(c, "tolerance", "completion") {
            completion.tolerance = v;
        }
        if let Some(v) = rd.f64(c, "max_excluded", "completion") {
            completion.max_excluded = v;
        }
        match rd.str(c, "scheme", "completion") {
            Some("pocs") | None => {}
            Some("landweber") => completion.scheme = CompletionScheme::Landweber,
            Some(s) => rd.push("completion.scheme", format!("unknown scheme '{s}' (expected pocs or landweber)")),
        }
        if let Err(e) = completion.validate() {
            // Probe errors were already reported under "probe".
            if probe.validate().is_ok() {
                rd.push("completion", e);
            }
        }

        let s = rd.section(root, "stability", "", &["mu", "constant", "epsilon"]);
        if let Some(v) = rd.f64(s, "mu", "stability") {
            completion.stability.mu = v;
        }
        if let Some(v) = rd.f64(s, "constant", "stability") {
            completion.stability.constant = v;
        }
        completion.epsilon = rd.f64(s, "epsilon", "stability");
        if !(completion.stability.mu > 0.0 && completion.stability.mu <= 1.0) {
            rd.push("stability.mu", "must lie in (0, 1]");
        }
        if let Some(e) = completion.epsilon {
            if !(e > 0.0 && e < 1.0) {
                rd.push("stability.epsilon", "must lie in (0, 1)");
            }
        }

        let sc = rd.section(root, "scatter", "", &["plane_n", "h_prime", "center_radius", "kappa_threshold"]);
        let mut scatter = ScatterConfig::for_domain(&domain);
        scatter.probe = probe;
        scatter.offset_spacing = center_spacing;
        if let Some(v) = rd.usize(sc, "plane_n", "scatter") {
            scatter.plane_n = v;
        }
        scatter.h_prime = rd.f64(sc, "h_prime", "scatter");
        scatter.center_radius = rd.f64(sc, "center_radius", "scatter");
        if let Some(v) = rd.f64(sc, "kappa_threshold", "scatter") {
            scatter.kappa_threshold = v;
        }
        if scatter.plane_n < 8 {
            rd.push("scatter.plane_n", "must be at least 8");
        }
        if let Some(h) = scatter.h_prime {
            if !(0.0..1.0).contains(&h) {
                rd.push("scatter.h_prime", "must lie in [0, 1)");
            }
        }

        let ck = rd.section(root, "cloak", "", &["amplitude", "probes", "refine"]);
        let mut cloak = CloakConfig { solver, amplitude: 0.5 * bounds.m0, ..CloakConfig::default() };
        if let Some(v) = rd.f64(ck, "amplitude", "cloak") {
            cloak.amplitude = v;
        }
        if let Some(v) = rd.usize(ck, "probes", "cloak") {
            cloak.probes = v;
        }
        let cloak_refine = rd.bool(ck, "refine", "cloak").unwrap_or(true);
        if cloak.probes == 0 {
            rd.push("cloak.probes", "must be at least 1");
        }
        if cloak.amplitude.abs() > bounds.m0 {
            rd.push("cloak.amplitude", format!("|{}| exceeds bounds.m0 = {}", cloak.amplitude, bounds.m0));
        }

        let al = rd.section(root, "albedo", "", &["probes"]);
        let albedo_probes = rd.usize(al, "probes", "albedo").unwrap_or(6);
        if albedo_probes == 0 {
            rd.push("albedo.probes", "must be at least 1");
        }

        let seed = match root.and_then(|o| o.get("seed")) {
            None | Some(Value::Null) => 0,
            Some(_) => rd.u64(root, "seed", "").unwrap_or(0),
        };
        let output = rd.str(root, "output", "").map_or_else(|| PathBuf::from("out"), PathBuf::from);

        let mut cfg = ExperimentConfig {
            domain,
            grid: GridSpec { resolution, nt, nx, ndir },
            blackbox,
            reference,
            bounds,
            kind,
            lambdas,
            completion,
            scatter,
            cloak,
            cloak_refine,
            albedo_probes,
            seed,
            output,
        };
        if domain_ok {
            cfg.check_coefficients(&mut rd);
            if grid_ok && cfg.completion.probe.frame == ProbeFrame::Physical {
                match cfg.grid() {
                    Ok(grid) => {
                        let limit = max_resolved_lambda(&grid);
                        if cfg.completion.probe.lambda > limit {
                            rd.push(
                                "probe.lambdas",
                                format!(
                                    "λ = {:.3} needs at least 8 points per wavelength; the grid resolves λ ≤ {limit:.3}",
                                    cfg.completion.probe.lambda
                                ),
                            );
                        }
                    }
                    Err(e) => rd.push("grid", e),
                }
            }
        }
        if rd.errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(rd.errors))
        }
    }

    fn check_coefficients(&mut self, rd: &mut Reader) {
        let domain = self.domain;
        let bounds = self.bounds;
        for (key, spec) in [("blackbox", &mut self.blackbox), ("reference", &mut self.reference)] {
            let path = join(key, "absorption");
            match &mut spec.absorption {
                AbsorptionSpec::Zero => {}
                AbsorptionSpec::Phantom { phantom, amplitude } => {
                    if let Err(e) = phantom.absorption(&domain, *amplitude) {
                        rd.push(&path, e);
                    }
                    if amplitude.abs() > bounds.m0 {
                        rd.push(&join(&path, "amplitude"), format!("|{amplitude}| exceeds bounds.m0 = {}", bounds.m0));
                    }
                }
                AbsorptionSpec::Array { path: file, values, lattice } => match read_array(file) {
                    Err(e) => rd.push(&join(&path, "array"), format!("{}: {e}", file.display())),
                    Ok(a) => match (&a.data, a.dims.as_slice()) {
                        (ArrayData::Real(v), &[nt, nx, ny]) if nx == ny && nt > 0 && nx > 1 => {
                            let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                            if v.iter().any(|x| !x.is_finite()) {
                                rd.push(&join(&path, "array"), "contains non-finite values");
                            } else if max > bounds.m0 {
                                rd.push(&join(&path, "array"), format!("max |a| = {max} exceeds bounds.m0 = {}", bounds.m0));
                            }
                            *lattice = Some(SpacetimeLattice::covering(&domain, nt as usize, nx as usize));
                            *values = Arc::new(v.clone());
                        }
                        _ => rd.push(&join(&path, "array"), format!("expected a real [nt, nx, nx] array, got dims {:?}", a.dims)),
                    },
                },
            }
            if let ScatteringSpec::Phantom { amplitude, kappa, .. } = spec.scattering {
                // ∫|k| dθ' = ∫|k| dθ = 2π|κ| ρ(x), and max ρ = |amplitude|.
                let m = 2.0 * std::f64::consts::PI * kappa.abs() * amplitude.abs();
                let path = join(key, "scattering");
                if m > bounds.m1 {
                    rd.push(&path, format!("sup ∫|k| dθ' = {m:.6} exceeds bounds.m1 = {}", bounds.m1));
                }
                if m > bounds.m2 {
                    rd.push(&path, format!("sup ∫|k| dθ = {m:.6} exceeds bounds.m2 = {}", bounds.m2));
                }
            }
        }
    }

    /// A config with every default, as produced by `{}`.
    pub fn defaults() -> Self {
        Self::from_value(&json!({}), Path::new(".")).expect("defaults are valid")
    }

    pub fn grid(&self) -> Result<SpaceTimeGrid> {
        SpaceTimeGrid::new(self.domain, self.grid.nt, self.grid.nx, self.grid.ndir)
    }

    pub fn absorption_fn(&self, spec: &CoefficientSpec) -> Result<Arc<dyn Fn(f64, Point) -> f64 + Send + Sync>> {
        Ok(match &spec.absorption {
            AbsorptionSpec::Zero => Arc::new(|_, _| 0.0),
            AbsorptionSpec::Phantom { phantom, amplitude } => phantom.absorption(&self.domain, *amplitude)?,
            AbsorptionSpec::Array { values, lattice, .. } => {
                let lat = lattice.ok_or_else(|| Error::InvalidInput("array absorption was not loaded".into()))?;
                let values = values.clone();
                Arc::new(move |t, x| lat.interpolate(&values, t, x))
            }
        })
    }

    pub fn coefficients(&self, spec: &CoefficientSpec, grid: &SpaceTimeGrid) -> Result<CoefficientField> {
        let absorption = match &spec.absorption {
            AbsorptionSpec::Zero => Absorption::Zero,
            AbsorptionSpec::Array { values, lattice: Some(lat), .. } => {
                Absorption::Sampled { lattice: *lat, values: values.clone() }
            }
            _ => Absorption::Func(self.absorption_fn(spec)?),
        };
        let kernel = match spec.scattering.parts(&self.domain) {
            None => Kernel::Zero,
            Some((rho, kappa)) => Kernel::separable(grid, |x| rho.eval(x), |_, _| kappa),
        };
        Ok(CoefficientField::new(self.domain, absorption, kernel).with_bounds(self.bounds))
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let value = read_config_value(path)?;
    ExperimentConfig::from_value(&value, path.parent().unwrap_or(Path::new(".")))
}

fn read_config_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(vec![format!("{}: cannot read config ({e})", path.display())]))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: invalid JSON ({e})", path.display())]))
}

/// Files written by one subcommand, with their SHA-256 digests.
struct Artifacts {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.bytes(name, s.as_bytes())
    }

    fn array(&mut self, name: &str, a: &ArrayFile) -> Result<()> {
        self.bytes(name, &a.to_bytes())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.bytes(name, &bytes)
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<Vec<String>> {
        let manifest = json!({
            "command": command,
            "seed": cfg.seed,
            "artifacts": self.files,
        });
        let names = self.files.keys().cloned().collect();
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        fs::write(self.dir.join(format!("{command}.manifest.json")), s)?;
        self.files.clear();
        Ok(names)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn num(x: f64) -> String {
    format!("{x:.12e}")
}

fn parse_csv_rows(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

fn copy_csv(art: &mut Artifacts, name: &str, text: &str) -> Result<()> {
    let (header, rows) = parse_csv_rows(text)?;
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    art.csv(name, &h, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the black-box problem for one seeded probe and store the traces.
    Forward,
    /// Apply the albedo operators to a probe catalog and report the distance.
    Albedo,
    /// Build GO probes and sweep the remainder norm over λ.
    Probe,
    /// Oracle light-ray transforms of the black-box minus reference absorption.
    Rays,
    /// Absorption reconstruction for the measurement kind.
    Reconstruct,
    /// Scattering density recovery.
    Scatter,
    /// Boundary-only non-uniqueness demo.
    Cloak,
    /// Merge every CSV in the output directory into bundle.json.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Albedo => "albedo",
            Command::Probe => "probe",
            Command::Rays => "rays",
            Command::Reconstruct => "reconstruct",
            Command::Scatter => "scatter",
            Command::Cloak => "cloak",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Boundary,
    Final,
    Full,
}

/// Linear Boltzmann transport laboratory.
#[derive(Debug, Parser)]
#[command(name = "lbtr", version)]
pub struct Cli {
    /// JSON experiment config; every field has a default.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long, global = true, value_enum)]
    pub resolution: Option<Resolution>,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    /// Config value with the command-line overrides applied.
    pub fn config_value(&self) -> Result<Value> {
        let mut v = match &self.config {
            Some(p) => read_config_value(p)?,
            None => json!({}),
        };
        let Some(o) = v.as_object_mut() else {
            return Err(Error::Config(vec!["$: expected a JSON object".into()]));
        };
        if let Some(s) = self.seed {
            o.insert("seed".into(), json!(s));
        }
        if let Some(d) = &self.out {
            o.insert("output".into(), json!(d));
        }
        if let Some(k) = self.kind {
            let s = match k {
                KindArg::Boundary => "boundary",
                KindArg::Final => "final",
                KindArg::Full => "full",
            };
            o.insert("kind".into(), json!(s));
        }
        if let Some(r) = self.resolution {
            o.insert("grid".into(), json!({ "resolution": r.name() }));
        }
        Ok(v)
    }

    pub fn load(&self) -> Result<ExperimentConfig> {
        let base = self.config.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
        ExperimentConfig::from_value(&self.config_value()?, base)
    }
}

/// Runs one subcommand and returns the names of the artifacts written to the
/// output directory (a `<command>.manifest.json` with their hashes is written
/// alongside).
pub fn run_subcommand(command: Command, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let mut art = Artifacts::new(&cfg.output)?;
    art.json(&format!("{}.config.json", command.name()), cfg)?;
    match command {
        Command::Forward => forward(cfg, &mut art)?,
        Command::Albedo => albedo_cmd(cfg, &mut art)?,
        Command::Probe => probe_cmd(cfg, &mut art)?,
        Command::Rays => rays(cfg, &mut art)?,
        Command::Reconstruct => reconstruct(cfg, &mut art)?,
        Command::Scatter => scatter(cfg, &mut art)?,
        Command::Cloak => cloak(cfg, &mut art)?,
        Command::Report => report(cfg, &mut art)?,
    }
    art.finish(command.name(), cfg)
}

fn flux_array(f: &crate::transport::BoundaryFlux) -> Result<ArrayFile> {
    ArrayFile::complex(vec![f.levels as u64, f.nb as u64, f.ndir as u64], f.data.clone())
}

fn forward(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let grid = cfg.grid()?;
    let coeff = cfg.coefficients(&cfg.blackbox, &grid)?;
    coeff.check_admissible(&grid)?;
    let probes = probe_catalog(&grid, 1, derive_seed(cfg.seed, streams::FORWARD_PROBE), cfg.kind)?;
    let p = &probes[0];
    let init = if cfg.kind.accepts_initial() { p.initial.as_ref() } else { None };
    let resp = albedo::apply(cfg.kind, &grid, &coeff, &p.inflow, init, cfg.completion.probe.solver)?;
    art.array("forward_trace.lbtr", &flux_array(&resp.trace)?)?;
    if let Some(s) = &resp.final_slice {
        art.array("forward_final.lbtr", &ArrayFile::complex(vec![s.nx as u64, s.nx as u64, s.ndir as u64], s.data.clone())?)?;
    }
    art.json(
        "forward.json",
        &json!({
            "probe": p.id,
            "kind": cfg.kind,
            "carrier": resp.trace.carrier,
            "trace_l1": resp.trace.lp_norm(&grid, 1.0),
            "final_l1": resp.final_slice.as_ref().map(|s| s.lp_norm(&grid, 1.0)),
            "inflow_l1": p.norm(&grid),
        }),
    )
}

fn albedo_cmd(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let grid = cfg.grid()?;
    let bb = cfg.coefficients(&cfg.blackbox, &grid)?;
    let rf = cfg.coefficients(&cfg.reference, &grid)?;
    bb.check_admissible(&grid)?;
    rf.check_admissible(&grid)?;
    let probes = probe_catalog(&grid, cfg.albedo_probes, derive_seed(cfg.seed, streams::ALBEDO_PROBES), cfg.kind)?;
    let options = cfg.completion.probe.solver;
    let dist = op_distance(cfg.kind, &grid, &bb, &rf, &probes, options)?;
    let baseline = free_transport_baseline(&grid, &probes, options)?;
    copy_csv(art, "albedo_distance.csv", &dist.to_csv())?;
    art.json("albedo.json", &json!({ "kind": cfg.kind, "distance": dist.distance, "free_transport_baseline": baseline }))
}

fn probe_cmd(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let grid = cfg.grid()?;
    let coeff = cfg.coefficients(&cfg.blackbox, &grid)?;
    coeff.check_admissible(&grid)?;
    let spec = cfg.domain;
    let bump = BumpProfile::new([0.5 * spec.horizon, 0.0], 0.3 * spec.r);
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for &lambda in &cfg.lambdas {
        let mut norms = [0.0; 2];
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            let probe = GoProbe::new(sign, lambda, Spatial::Bump(bump), DirectionWeight::Uniform)?;
            if cfg.completion.probe.frame == ProbeFrame::Physical {
                probe.check_resolved(&grid)?;
            }
            norms[k] = go_remainder(&probe, &coeff, &grid, false)?.norm;
        }
        rows.push(vec![num(lambda), num(norms[0]), num(norms[1])]);
        out.push(json!({ "lambda": lambda, "remainder_plus": norms[0], "remainder_minus": norms[1] }));
    }
    art.csv("probe_remainder.csv", &["lambda[1/length]", "remainder_plus_l2[1]", "remainder_minus_l2[1]"], &rows)?;
    art.json("probe.json", &json!({ "bump_center": bump.center, "bump_width": bump.width, "sweep": out }))
}

fn rays(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let spec = cfg.domain;
    let a = cfg.absorption_fn(&cfg.blackbox)?;
    let a0 = cfg.absorption_fn(&cfg.reference)?;
    let diff = move |t: f64, x: Point| {
        if spec.in_omega_t(t, x) {
            a(t, x) - a0(t, x)
        } else {
            0.0
        }
    };
    let lat = cfg.completion.lattice(&spec);
    let offsets = cfg.completion.offsets(&lat);
    let quad = crate::geometry::sphere_quadrature(cfg.grid.ndir, 2)?;
    let data = ray_data_oracle(&diff, spec.horizon, spec.radius(), &quad.dirs, offsets);
    let n = offsets.n as u64;
    art.array("rays.lbtr", &ArrayFile::real(vec![quad.len() as u64, n, n], data.values.clone())?)?;
    let per = (offsets.n * offsets.n).max(1);
    let rows: Vec<Vec<String>> = (0..quad.len())
        .map(|m| {
            let v = &data.values[m * per..(m + 1) * per];
            let max = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
            let l2 = (v.iter().map(|x| x * x).sum::<f64>() * offsets.d * offsets.d).sqrt();
            vec![m.to_string(), num(quad.angle(m)), num(max), num(l2)]
        })
        .collect();
    art.csv("rays.csv", &["direction", "angle[rad]", "max_abs_ray_integral[1]", "l2_over_offsets[length]"], &rows)
}

fn reconstruct(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let grid = cfg.grid()?;
    let bb = cfg.coefficients(&cfg.blackbox, &grid)?;
    let rf = cfg.coefficients(&cfg.reference, &grid)?;
    bb.check_admissible(&grid)?;
    rf.check_admissible(&grid)?;
    let mut rc = cfg.completion.clone();
    if rc.epsilon.is_none() {
        let probes =
            probe_catalog(&grid, cfg.albedo_probes, derive_seed(cfg.seed, streams::EPSILON_PROBES), cfg.kind)?;
        let d = op_distance(cfg.kind, &grid, &bb, &rf, &probes, rc.probe.solver)?.distance;
        rc.epsilon = Some(d);
    }
    let truth = cfg.absorption_fn(&cfg.blackbox)?;
    let t = move |t: f64, x: Point| truth(t, x);
    let rep = reconstruct_absorption(cfg.kind, &grid, &bb, &rf, &rc, Some(&t))?;
    let lat = rep.lattice;
    let dims = vec![lat.nt as u64, lat.nx as u64, lat.nx as u64];
    art.array("reconstruct_field.lbtr", &ArrayFile::real(dims.clone(), rep.field.clone())?)?;
    art.array("reconstruct_difference.lbtr", &ArrayFile::real(dims, rep.difference.clone())?)?;
    let n = rep.rays.offsets.n as u64;
    art.array("reconstruct_rays.lbtr", &ArrayFile::real(vec![rep.rays.dirs.len() as u64, n, n], rep.rays.values.clone())?)?;
    copy_csv(art, "reconstruct_residuals.csv", &rep.residuals_csv())?;
    let m = rep.metrics;
    art.csv(
        "reconstruct_error.csv",
        &["kind", "epsilon[1]", "bound[1]", "rel_l2[1]", "l2[absorption]", "hminus1[absorption]", "linf[absorption]"],
        &[vec![
            cfg.kind.short_name().to_string(),
            rep.epsilon.map_or_else(String::new, num),
            rep.bound.map_or_else(String::new, num),
            m.and_then(|m| m.rel_l2).map_or_else(String::new, num),
            m.map_or_else(String::new, |m| num(m.l2)),
            m.map_or_else(String::new, |m| num(m.hminus1)),
            m.map_or_else(String::new, |m| num(m.linf)),
        ]],
    )?;
    art.json("reconstruct_report.json", &rep)
}

fn scatter(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let grid = cfg.grid()?;
    let (rho, kappa) = cfg
        .blackbox
        .scattering
        .parts(&cfg.domain)
        .ok_or_else(|| Error::InvalidInput("scatter needs a scattering phantom in blackbox.scattering".into()))?;
    if let ScatteringSpec::Phantom { kappa: k0, .. } = cfg.reference.scattering {
        if k0 != kappa {
            return invalid("scatter needs the same κ on the black-box and reference sides");
        }
    }
    if cfg.blackbox.absorption != cfg.reference.absorption {
        return invalid("scatter needs equal absorption on the black-box and reference sides");
    }
    let bb = cfg.coefficients(&cfg.blackbox, &grid)?;
    let rf = cfg.coefficients(&cfg.reference, &grid)?;
    bb.check_admissible(&grid)?;
    rf.check_admissible(&grid)?;
    let rho_ref = cfg.reference.scattering.parts(&cfg.domain).map(|p| p.0);
    let truth = move |x: Point| rho.eval(x) - rho_ref.as_ref().map_or(0.0, |r| r.eval(x));
    let rep = reconstruct_scattering(&grid, &bb, &rf, &|_, _| kappa, &cfg.scatter, Some(&truth))?;
    let n = rep.plane.n as u64;
    art.array("scatter_rho.lbtr", &ArrayFile::real(vec![n, n], rep.rho.clone())?)?;
    let s = &rep.sinogram;
    art.array("scatter_sinogram.lbtr", &ArrayFile::real(vec![s.angles.len() as u64, s.ns as u64], s.values.clone())?)?;
    let mut rows = Vec::new();
    for a in 0..s.angles.len() {
        for p in 0..s.ns {
            let k = a * s.ns + p;
            let oracle = rep.oracle_sinogram.as_ref().map_or_else(String::new, |o| num(o.values[k]));
            rows.push(vec![num(s.angles[a]), num(s.offset(p)), num(s.values[k]), oracle]);
        }
    }
    art.csv("scatter_sinogram.csv", &["angle[rad]", "offset[length]", "recovered[1]", "oracle[1]"], &rows)?;
    art.json("scatter_report.json", &rep)
}

fn cloak(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let grid = cfg.grid()?;
    let mut grids = Vec::new();
    if cfg.cloak_refine {
        grids.push(SpaceTimeGrid::new(cfg.domain, (grid.nt / 2).max(1), (grid.nx / 2).max(4), grid.ndir())?);
    }
    grids.push(grid);
    let (rho, kappa) = match cfg.blackbox.scattering.parts(&cfg.domain) {
        Some((g, k)) => (Some(g), k),
        None => (None, 0.0),
    };
    let rho_fn = move |x: Point| rho.as_ref().map_or(0.0, |g| g.eval(x));
    let mut cc = cfg.cloak;
    cc.seed = derive_seed(cfg.seed, streams::CLOAK_PROBES);
    let rep = cloak_demo(&grids, &rho_fn, &|_, _| kappa, &cc)?;
    copy_csv(art, "cloak.csv", &rep.to_csv())?;
    art.json("cloak_report.json", &rep)
}

fn report(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(&cfg.output)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    names.sort();
    let mut files = Map::new();
    for p in names {
        let (header, rows) = parse_csv_rows(&fs::read_to_string(&p)?)?;
        let rows: Vec<Value> = rows
            .into_iter()
            .map(|r| {
                Value::Array(
                    r.into_iter()
                        .map(|c| c.parse::<f64>().ok().filter(|x| x.is_finite()).map_or(Value::String(c), |x| json!(x)))
                        .collect(),
                )
            })
            .collect();
        let name = p.file_name().expect("file name").to_string_lossy().into_owned();
        files.insert(name, json!({ "columns": header, "rows": rows }));
    }
    art.json("bundle.json", &json!({ "files": files }))
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::Admissibility(_) => "admissibility",
        Error::NonFinite { .. } => "non_finite",
        Error::Divergence { .. } => "divergence",
        Error::Coverage(_) => "coverage",
        Error::Corrupt(_) => "corrupt",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Structured error document written to stderr.
pub fn error_json(e: &Error) -> Value {
    let details = match e {
        Error::Config(list) => list.clone(),
        _ => Vec::new(),
    };
    json!({ "error": { "kind": error_kind(e), "message": e.to_string(), "details": details } })
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LBTR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(vec![format!("LBTR_THREADS: expected a positive integer, got '{v}'")]))?;
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Entry point: parses arguments, runs the subcommand and returns the exit
/// code (0 success, 1 pipeline failure, 2 usage or configuration error).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let fail = |e: &Error| {
        eprintln!("{}", error_json(e));
    };
    let cfg = match configure_threads().and_then(|_| cli.load()) {
        Ok(c) => c,
        Err(e) => {
            fail(&e);
            return 2;
        }
    };
    match run_subcommand(cli.command, &cfg) {
        Ok(files) => {
            for f in files {
                println!("{}", cfg.output.join(f).display());
            }
            0
        }
        Err(e) => {
            fail(&e);
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(v: Value) -> Result<ExperimentConfig> {
        ExperimentConfig::from_value(&v, Path::new("."))
    }

    fn errors(v: Value) -> Vec<String> {
        match parse(v) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn test_minimal_config_fills_defaults() {
        let c = ExperimentConfig::defaults();
        assert_eq!(c.domain, DomainSpec::desk());
        assert_eq!((c.grid.nt, c.grid.nx, c.grid.ndir), (128, 64, 32));
        assert_eq!(c.kind, MeasurementKind::BoundaryOnly);
        assert_eq!(c.lambdas.len(), 4);
        assert_eq!(c.completion.probe.lambda, c.lambdas[3]);
        assert_eq!(c.completion.iterations, 500);
        assert_eq!(c.seed, 0);
        assert!(matches!(c.blackbox.absorption, AbsorptionSpec::Phantom { phantom: Phantom::BumpInXstar, .. }));
        assert_eq!(c.reference.absorption, AbsorptionSpec::Zero);
    }

    #[test]
    fn test_t_equal_2r_rejected_with_strict_inequality() {
        let e = errors(json!({ "domain": { "r": 1.0, "horizon": 2.0 } }));
        assert!(e.iter().any(|m| m.starts_with("domain.horizon") && m.contains("strict inequality T > 2r")), "{e:?}");
    }

    #[test]
    fn test_unknown_phantom_lists_available() {
        let e = errors(json!({ "blackbox": { "absorption": { "phantom": "banana" } } }));
        assert_eq!(e.len(), 1);
        assert!(e[0].starts_with("blackbox.absorption.phantom"));
        for p in Phantom::ALL {
            assert!(e[0].contains(p.name()));
        }
    }

    #[test]
    fn test_all_errors_collected_with_paths() {
        let e = errors(json!({
            "grid": { "nx": 2 },
            "bounds": { "m0": 0.5 },
            "kind": "partial",
            "probe": { "frame": "sideways" },
            "extra": 1,
            "blackbox": { "scattering": { "amplitude": 1.0 } }
        }));
        for prefix in ["grid.nx", "blackbox.absorption.amplitude", "kind", "probe.frame", "extra", "blackbox.scattering.phantom"] {
            assert!(e.iter().any(|m| m.starts_with(prefix)), "missing {prefix} in {e:?}");
        }
    }

    #[test]
    fn test_physical_frame_needs_eight_points_per_wavelength() {
        let e = errors(json!({ "probe": { "frame": "physical" } }));
        assert!(e.iter().any(|m| m.contains("8 points per wavelength")), "{e:?}");
        let ok = parse(json!({ "probe": { "frame": "physical", "lambdas": [4.0] } }));
        assert!(ok.is_ok(), "{ok:?}");
    }

    #[test]
    fn test_scattering_bounds_checked() {
        let e = errors(json!({ "blackbox": { "scattering": { "phantom": "gaussian-rho", "amplitude": 8.0, "kappa": 0.1 } } }));
        assert!(e.iter().any(|m| m.contains("bounds.m1")), "{e:?}");
        assert!(e.iter().any(|m| m.contains("bounds.m2")), "{e:?}");
    }

    #[test]
    fn test_array_round_trip_bitwise() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let mut f = || f64::from_bits(rng.next_u64() >> 2);
        let vals: Vec<C64> = (0..3 * 4 * 5).map(|_| C64::new(f(), f())).collect();
        let a = ArrayFile::complex(vec![3, 4, 5], vals).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lbtr");
        write_array(&p, &a).unwrap();
        let b = read_array(&p).unwrap();
        assert_eq!(a.dims, b.dims);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn test_truncated_file_is_corrupt() {
        let a = ArrayFile::real(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let bytes = a.to_bytes();
        for cut in [0, 3, 9, bytes.len() - 1] {
            assert!(matches!(ArrayFile::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(ArrayFile::from_bytes(&long), Err(Error::Corrupt(_))));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(ArrayFile::from_bytes(&bad), Err(Error::Corrupt(_))));
    }

    #[test]
    fn test_rank_zero_scalar() {
        let a = ArrayFile::real(vec![], vec![std::f64::consts::PI]).unwrap();
        let b = ArrayFile::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b, a);
        assert!(ArrayFile::real(vec![], vec![]).is_err());
    }

    #[test]
    fn test_array_absorption_loaded_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let a = ArrayFile::real(vec![4, 8, 8], vec![0.25; 256]).unwrap();
        write_array(&dir.path().join("a.lbtr"), &a).unwrap();
        let c = ExperimentConfig::from_value(&json!({ "blackbox": { "absorption": { "array": "a.lbtr" } } }), dir.path()).unwrap();
        let f = c.absorption_fn(&c.blackbox).unwrap();
        assert!((f(1.0, [0.0, 0.0]) - 0.25).abs() < 1e-12);
        let e = ExperimentConfig::from_value(&json!({ "blackbox": { "absorption": { "array": "missing.lbtr" } } }), dir.path());
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn test_derive_seed_is_splitmix_stream() {
        let mut rng = SplitMix64::seed_from_u64(42);
        let first = rng.next_u64();
        let second = rng.next_u64();
        assert_eq!(derive_seed(42, 0), first);
        assert_eq!(derive_seed(42, 1), second);
    }

    #[test]
    fn test_cli_overrides_and_exit_codes() {
        let cli = Cli::try_parse_from(["lbtr", "--seed", "7", "--kind", "final", "--resolution", "coarse", "cloak"]).unwrap();
        let c = cli.load().unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.kind, MeasurementKind::BoundaryPlusFinal);
        assert_eq!((c.grid.nt, c.grid.nx), (64, 32));
        assert_eq!(run(["lbtr", "frobnicate"]), 2);
        assert_eq!(run(["lbtr", "--config", "/nonexistent/cfg.json", "rays"]), 2);
    }

    #[test]
    fn test_report_bundles_csv() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.csv"), "a[1],b\n1.5,foo\n").unwrap();
        let mut c = ExperimentConfig::defaults();
        c.output = dir.path().to_path_buf();
        run_subcommand(Command::Report, &c).unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bundle.json")).unwrap()).unwrap();
        assert_eq!(v["files"]["x.csv"]["rows"][0][0], json!(1.5));
        assert_eq!(v["files"]["x.csv"]["rows"][0][1], json!("foo"));
        let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.manifest.json")).unwrap()).unwrap();
        assert!(m["artifacts"]["bundle.json"].as_str().unwrap().len() == 64);
    }
}
