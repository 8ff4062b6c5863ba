//! Benchmark dynamical systems, noise models and excitation signals.
//!
//! Every system has the control-affine form `dx/dt = f(x) + g(x) u`,
//! `y = h(x)`; only the Duffing oscillator carries an input map.

use nalgebra::DMatrix;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seeded random stream used everywhere randomness enters.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Axis-aligned box `[lo_i, hi_i]` in state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        Error::check_dim("box bounds", lo.len(), hi.len())?;
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::invalid("domain", "lower bound exceeds upper bound"));
        }
        Ok(Self { lo, hi })
    }

    /// The square `[-r, r]^dim`.
    pub fn symmetric(dim: usize, r: f64) -> Self {
        Self {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn sample_uniform(&self, rng: &mut Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l == h { l } else { rng.random_range(l..=h) })
            .collect()
    }

    /// Gaussian centred on the box with standard deviation a quarter of the
    /// box width per axis, rejected until the draw lies inside the box.
    pub fn sample_gaussian(&self, rng: &mut Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| {
                let mid = 0.5 * (l + h);
                let std = 0.25 * (h - l);
                if std == 0.0 {
                    return mid;
                }
                let normal = Normal::new(mid, std).expect("finite std");
                loop {
                    let v = normal.sample(rng);
                    if (l..=h).contains(&v) {
                        break v;
                    }
                }
            })
            .collect()
    }
}

/// How initial conditions are drawn from a [`BoxDomain`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSampling {
    #[default]
    Uniform,
    Gaussian,
}

impl InitialSampling {
    pub fn sample(self, domain: &BoxDomain, rng: &mut Rng) -> Vec<f64> {
        match self {
            InitialSampling::Uniform => domain.sample_uniform(rng),
            InitialSampling::Gaussian => domain.sample_gaussian(rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemKind {
    /// `x1' = x2 + sin x1`, `x2' = -x1 + cos x2`, `y = x1`.
    Example1,
    /// `x1' = x2`, `x2' = (1 - x1^2) x2 - x1`, `y = x1`.
    VanDerPol,
    /// Reverse Duffing: `x1' = x2^3`, `x2' = -x1 + u`, `y = x1`.
    /// Unexcited trajectories conserve `2 x1^2 + x2^4`.
    Duffing,
    /// `x' = A x`, `y = C x`.
    Linear { a: DMatrix<f64>, c: DMatrix<f64> },
}

/// A dynamical system from the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub n_x: usize,
    pub n_y: usize,
    /// Box used for sampling initial conditions.
    pub domain: BoxDomain,
}

impl SystemSpec {
    pub fn name(&self) -> &'static str {
        match self.kind {
            SystemKind::Example1 => "example1",
            SystemKind::VanDerPol => "vanderpol",
            SystemKind::Duffing => "duffing",
            SystemKind::Linear { .. } => "linear",
        }
    }

    pub fn with_domain(mut self, domain: BoxDomain) -> Result<Self> {
        Error::check_dim("domain", self.n_x, domain.dim())?;
        self.domain = domain;
        Ok(self)
    }

    /// Number of scalar inputs accepted by the input map (0 if none).
    pub fn n_u(&self) -> usize {
        match self.kind {
            SystemKind::Duffing => 1,
            _ => 0,
        }
    }

    pub fn has_input_map(&self) -> bool {
        self.n_u() > 0
    }

    /// Autonomous part `f(x)`.
    pub fn vector_field(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            SystemKind::Example1 => {
                out[0] = x[1] + x[0].sin();
                out[1] = -x[0] + x[1].cos();
            }
            SystemKind::VanDerPol => {
                out[0] = x[1];
                out[1] = (1.0 - x[0] * x[0]) * x[1] - x[0];
            }
            SystemKind::Duffing => {
                out[0] = x[1] * x[1] * x[1];
                out[1] = -x[0];
            }
            SystemKind::Linear { a, .. } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..self.n_x).map(|j| a[(i, j)] * x[j]).sum();
                }
            }
        }
    }

    /// Full drift `f(x) + g(x) u`. `u` may be empty for autonomous use.
    pub fn drift(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.vector_field(x, out);
        if let (SystemKind::Duffing, Some(&u0)) = (&self.kind, u.first()) {
            out[1] += u0;
        }
    }

    pub fn output(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            SystemKind::Linear { c, .. } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..self.n_x).map(|j| c[(i, j)] * x[j]).sum();
                }
            }
            _ => out[0] = x[0],
        }
    }

    pub fn output_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_y];
        self.output(x, &mut y);
        y
    }

    pub fn drift_vec(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_x];
        self.drift(t, x, u, &mut dx);
        dx
    }

    /// Input gain `g(x)` as an `n_x x n_u` matrix, if the system has one.
    pub fn input_map(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        match self.kind {
            SystemKind::Duffing => Some(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])),
            _ => None,
        }
    }
}

pub fn make_example1() -> SystemSpec {
    SystemSpec {
        kind: SystemKind::Example1,
        n_x: 2,
        n_y: 1,
        domain: BoxDomain::symmetric(2, 5.0),
    }
}

pub fn make_vanderpol() -> SystemSpec {
    SystemSpec {
        kind: SystemKind::VanDerPol,
        n_x: 2,
        n_y: 1,
        domain: BoxDomain::symmetric(2, 1.0),
    }
}

/// Reverse Duffing oscillator on `[-1, 1]^2`; use [`SystemSpec::with_domain`]
/// for other training boxes.
pub fn make_duffing() -> SystemSpec {
    SystemSpec {
        kind: SystemKind::Duffing,
        n_x: 2,
        n_y: 1,
        domain: BoxDomain::symmetric(2, 1.0),
    }
}

pub fn make_linear(a: DMatrix<f64>, c: DMatrix<f64>) -> Result<SystemSpec> {
    let n_x = a.nrows();
    if n_x == 0 || c.nrows() == 0 {
        return Err(Error::invalid("linear", "empty system matrices"));
    }
    Error::check_dim("linear A columns", n_x, a.ncols())?;
    Error::check_dim("linear C columns", n_x, c.ncols())?;
    let n_y = c.nrows();
    Ok(SystemSpec {
        kind: SystemKind::Linear { a, c },
        n_x,
        n_y,
        domain: BoxDomain::symmetric(n_x, 1.0),
    })
}

/// Look up a catalog system by its config name. `linear` needs matrices and
/// is built with [`make_linear`] instead.
pub fn by_name(name: &str) -> Option<SystemSpec> {
    match name {
        "example1" => Some(make_example1()),
        "vanderpol" => Some(make_vanderpol()),
        "duffing" => Some(make_duffing()),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum NoiseKind {
    #[default]
    None,
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// Gaussian rejected outside `mean +/- 4 std`, so the support is bounded.
    TruncatedGaussian {
        mean: f64,
        std: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    Measurement,
    Process,
}

/// Noise model. In JSON it is one flat object, e.g.
/// `{"kind": "gaussian", "mean": 0, "std": 0.5, "target": "measurement"}`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNoise", into = "RawNoise")]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub target: NoiseTarget,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<f64>,
    #[serde(default)]
    target: NoiseTarget,
}

impl TryFrom<RawNoise> for NoiseSpec {
    type Error = String;

    fn try_from(raw: RawNoise) -> std::result::Result<Self, String> {
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| format!("missing field `{name}`"));
        let forbid = |v: Option<f64>, name: &str| match v {
            Some(_) => Err(format!("unknown field `{name}` for noise kind `{}`", raw.kind)),
            None => Ok(()),
        };
        let kind = match raw.kind.as_str() {
            "none" => {
                forbid(raw.mean, "mean")?;
                forbid(raw.std, "std")?;
                forbid(raw.lo, "lo")?;
                forbid(raw.hi, "hi")?;
                NoiseKind::None
            }
            "gaussian" | "truncated_gaussian" => {
                forbid(raw.lo, "lo")?;
                forbid(raw.hi, "hi")?;
                let mean = raw.mean.unwrap_or(0.0);
                let std = need(raw.std, "std")?;
                if raw.kind == "gaussian" {
                    NoiseKind::Gaussian { mean, std }
                } else {
                    NoiseKind::TruncatedGaussian { mean, std }
                }
            }
            "uniform" => {
                forbid(raw.mean, "mean")?;
                forbid(raw.std, "std")?;
                NoiseKind::Uniform {
                    lo: need(raw.lo, "lo")?,
                    hi: need(raw.hi, "hi")?,
                }
            }
            other => return Err(format!("unknown noise kind `{other}`")),
        };
        let spec = NoiseSpec {
            kind,
            target: raw.target,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

impl From<NoiseSpec> for RawNoise {
    fn from(spec: NoiseSpec) -> Self {
        let mut raw = RawNoise {
            kind: String::new(),
            mean: None,
            std: None,
            lo: None,
            hi: None,
            target: spec.target,
        };
        match spec.kind {
            NoiseKind::None => raw.kind = "none".into(),
            NoiseKind::Gaussian { mean, std } => {
                raw.kind = "gaussian".into();
                raw.mean = Some(mean);
                raw.std = Some(std);
            }
            NoiseKind::TruncatedGaussian { mean, std } => {
                raw.kind = "truncated_gaussian".into();
                raw.mean = Some(mean);
                raw.std = Some(std);
            }
            NoiseKind::Uniform { lo, hi } => {
                raw.kind = "uniform".into();
                raw.lo = Some(lo);
                raw.hi = Some(hi);
            }
        }
        raw
    }
}

pub const TRUNCATION_SIGMAS: f64 = 4.0;

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        kind: NoiseKind::None,
        target: NoiseTarget::Measurement,
    };

    pub fn measurement(kind: NoiseKind) -> Self {
        Self {
            kind,
            target: NoiseTarget::Measurement,
        }
    }

    pub fn process(kind: NoiseKind) -> Self {
        Self {
            kind,
            target: NoiseTarget::Process,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Gaussian { mean, std } | NoiseKind::TruncatedGaussian { mean, std } => {
                if !(std >= 0.0 && std.is_finite() && mean.is_finite()) {
                    return Err(Error::invalid("noise.std", "must be finite and >= 0"));
                }
            }
            NoiseKind::Uniform { lo, hi } => {
                if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                    return Err(Error::invalid("noise.lo", "uniform bounds need lo <= hi"));
                }
            }
            NoiseKind::None => {}
        }
        Ok(())
    }

    /// Bound on `|v|` per component, when the support is bounded.
    pub fn component_bound(&self) -> Option<f64> {
        match self.kind {
            NoiseKind::None => Some(0.0),
            NoiseKind::Gaussian { std, .. } if std == 0.0 => Some(0.0),
            NoiseKind::Gaussian { .. } => None,
            NoiseKind::TruncatedGaussian { mean, std } => {
                Some(mean.abs() + TRUNCATION_SIGMAS * std)
            }
            NoiseKind::Uniform { lo, hi } => Some(lo.abs().max(hi.abs())),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, NoiseKind::None)
    }
}

/// Draw `dim` i.i.d. samples. `None` noise returns zeros without touching `rng`.
pub fn sample_noise(spec: &NoiseSpec, dim: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    fill_noise(spec, &mut out, rng);
    out
}

pub fn fill_noise(spec: &NoiseSpec, out: &mut [f64], rng: &mut Rng) {
    match spec.kind {
        NoiseKind::None => out.fill(0.0),
        NoiseKind::Gaussian { mean, std } => {
            let d = Normal::new(mean, std).expect("validated noise spec");
            out.iter_mut().for_each(|v| *v = d.sample(rng));
        }
        NoiseKind::TruncatedGaussian { mean, std } => {
            let d = Normal::new(mean, std).expect("validated noise spec");
            for v in out.iter_mut() {
                *v = loop {
                    let s = d.sample(rng);
                    if (s - mean).abs() <= TRUNCATION_SIGMAS * std {
                        break s;
                    }
                };
            }
        }
        NoiseKind::Uniform { lo, hi } => {
            if lo == hi {
                out.fill(lo);
            } else {
                let d = Uniform::new_inclusive(lo, hi).expect("validated noise spec");
                out.iter_mut().for_each(|v| *v = d.sample(rng));
            }
        }
    }
}

/// Known input signal `u(t)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExcitationSpec {
    #[default]
    None,
    /// `u(t) = amplitude * cos(frequency * t)`.
    Cosine { amplitude: f64, frequency: f64 },
}

impl ExcitationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ExcitationSpec::Cosine { frequency, amplitude }
                if !(frequency >= 0.0 && amplitude.is_finite()) =>
            {
                Err(Error::invalid("excitation.frequency", "must be >= 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, ExcitationSpec::None)
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            ExcitationSpec::None => 0.0,
            ExcitationSpec::Cosine {
                amplitude,
                frequency,
            } => amplitude * (frequency * t).cos(),
        }
    }
}
