//! Observer structures and their rollout.
//!
//! * [`KklObserver`]: latent dynamics `z' = D z + F y` with diagonal
//!   `D = diag(-exp(rho))` and `F` the all-ones matrix, estimate
//!   `x_hat = T*(z)`. An optional forward map `T` enables the
//!   non-autonomous drift `phi(z) u` and the PDE penalty.
//! * [`LuenbergerObserver`]: `x_hat' = A x_hat + g_hat(x_hat) + G (y - C x_hat)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{Rk4, Series, TimeGrid, Trajectory};
use crate::net::{jacobian_input, Activation, Mlp, MlpSpec, NetCheckpoint};
use crate::systems::{Rng, SystemSpec};

pub const OBSERVER_FORMAT_VERSION: u32 = 1;

/// Latent dimension `n_y (n_x + 1)` guaranteeing an injective immersion.
pub fn kkl_dim(n_x: usize, n_y: usize) -> usize {
    n_y * (n_x + 1)
}

/// Default eigenvalues `-(0.9 + 0.1 i)`, `i = 1..d_z`.
pub fn default_eigenvalues(d_z: usize) -> Vec<f64> {
    (1..=d_z).map(|i| -(0.9 + 0.1 * i as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KklObserver {
    /// `lambda_i = -exp(rho_i)`.
    pub rho: Vec<f64>,
    pub n_x: usize,
    pub n_y: usize,
    /// Inverse map `R^{d_z} -> R^{n_x}`.
    pub tstar: Mlp,
    /// Forward map `R^{n_x} -> R^{d_z}`.
    pub t_fwd: Option<Mlp>,
}

impl KklObserver {
    pub fn new(n_x: usize, n_y: usize, rho: Vec<f64>, tstar: Mlp, t_fwd: Option<Mlp>) -> Result<Self> {
        let d_z = rho.len();
        if d_z == 0 || n_x == 0 || n_y == 0 {
            return Err(Error::invalid("observer", "dimensions must be positive"));
        }
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::invalid("rho", "must be finite"));
        }
        Error::check_dim("tstar input", d_z, tstar.spec.input_dim())?;
        Error::check_dim("tstar output", n_x, tstar.spec.output_dim())?;
        if let Some(t) = &t_fwd {
            Error::check_dim("t_fwd input", n_x, t.spec.input_dim())?;
            Error::check_dim("t_fwd output", d_z, t.spec.output_dim())?;
        }
        Ok(Self {
            rho,
            n_x,
            n_y,
            tstar,
            t_fwd,
        })
    }

    /// Builds `rho` from strictly negative eigenvalues.
    pub fn with_eigenvalues(
        n_x: usize,
        n_y: usize,
        eigenvalues: &[f64],
        tstar: Mlp,
        t_fwd: Option<Mlp>,
    ) -> Result<Self> {
        if eigenvalues.iter().any(|l| !(*l < 0.0 && l.is_finite())) {
            return Err(Error::invalid("eigenvalues", "must be finite and strictly negative"));
        }
        let rho = eigenvalues.iter().map(|l| (-l).ln()).collect();
        Self::new(n_x, n_y, rho, tstar, t_fwd)
    }

    /// Fresh observer with `d_z = kkl_dim(n_x, n_y)` unless `eigenvalues` is
    /// given, randomly initialised networks with the given hidden layers.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        n_x: usize,
        n_y: usize,
        eigenvalues: Option<&[f64]>,
        hidden: &[usize],
        activation: Activation,
        with_forward_map: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let eig = match eigenvalues {
            Some(e) => e.to_vec(),
            None => default_eigenvalues(kkl_dim(n_x, n_y)),
        };
        let d_z = eig.len();
        let sizes = |i: usize, o: usize| {
            let mut s = vec![i];
            s.extend_from_slice(hidden);
            s.push(o);
            s
        };
        let tstar = Mlp::init(MlpSpec::new(sizes(d_z, n_x), activation)?, rng)?;
        let t_fwd = if with_forward_map {
            Some(Mlp::init(MlpSpec::new(sizes(n_x, d_z), activation)?, rng)?)
        } else {
            None
        };
        Self::with_eigenvalues(n_x, n_y, &eig, tstar, t_fwd)
    }

    pub fn d_z(&self) -> usize {
        self.rho.len()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        d_eigenvalues(self)
    }

    /// `F`, the `d_z x n_y` all-ones matrix.
    pub fn f_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_element(self.d_z(), self.n_y, 1.0)
    }

    /// Largest (slowest) eigenvalue of `D`.
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn d_eigenvalues(obs: &KklObserver) -> Vec<f64> {
    obs.rho.iter().map(|r| -r.exp()).collect()
}

pub fn latent_drift(obs: &KklObserver, z: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim("latent state", obs.d_z(), z.len())?;
    Error::check_dim("measurement", obs.n_y, y.len())?;
    let lambda = obs.eigenvalues();
    let mut dz = vec![0.0; z.len()];
    kkl_linear_drift(&lambda, z, y.iter().sum(), &mut dz);
    Ok(dz)
}

/// `dz_i = lambda_i z_i + sum_j y_j` (F is all ones).
#[inline]
pub(crate) fn kkl_linear_drift(lambda: &[f64], z: &[f64], y_sum: f64, dz: &mut [f64]) {
    for ((d, &l), &zi) in dz.iter_mut().zip(lambda).zip(z) {
        *d = l * zi + y_sum;
    }
}

/// `phi(z) = dT/dx(T*(z)) g(T*(z))`, a `d_z x n_u` matrix.
pub fn input_gain(obs: &KklObserver, sys: &SystemSpec, z: &[f64]) -> Result<DMatrix<f64>> {
    let t_fwd = obs.t_fwd.as_ref().ok_or(Error::Missing("a forward map T"))?;
    let xhat = obs.tstar.eval(z)?;
    let g = sys
        .input_map(&xhat)
        .ok_or(Error::Missing("an input map on the system"))?;
    let jac = jacobian_input(&t_fwd.spec, &t_fwd.params, &xhat)?;
    Ok(jac * g)
}

pub fn latent_drift_nonauto(
    obs: &KklObserver,
    sys: &SystemSpec,
    z: &[f64],
    y: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    let mut dz = latent_drift(obs, z, y)?;
    let phi = input_gain(obs, sys, z)?;
    Error::check_dim("input", phi.ncols(), u.len())?;
    for (i, d) in dz.iter_mut().enumerate() {
        *d += (0..u.len()).map(|j| phi[(i, j)] * u[j]).sum::<f64>();
    }
    Ok(dz)
}

pub fn estimate(obs: &KklObserver, z: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim("latent state", obs.d_z(), z.len())?;
    obs.tstar.eval(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LuenbergerObserver {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// Learned nonlinearity `R^{n_x} -> R^{n_x}`.
    pub ghat: Mlp,
}

impl LuenbergerObserver {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, g: DMatrix<f64>, ghat: Mlp) -> Result<Self> {
        let n_x = a.nrows();
        Error::check_dim("A columns", n_x, a.ncols())?;
        Error::check_dim("C columns", n_x, c.ncols())?;
        Error::check_dim("G rows", n_x, g.nrows())?;
        Error::check_dim("G columns", c.nrows(), g.ncols())?;
        Error::check_dim("g_hat input", n_x, ghat.spec.input_dim())?;
        Error::check_dim("g_hat output", n_x, ghat.spec.output_dim())?;
        let closed = &a - &g * &c;
        let max_re = closed
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max);
        if !(max_re < 0.0) {
            return Err(Error::NotHurwitz(max_re));
        }
        Ok(Self { a, c, g, ghat })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }
}

/// `A x_hat + g_hat(x_hat) + G (y - C x_hat)`.
pub fn luenberger_drift(obs: &LuenbergerObserver, xhat: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim("state estimate", obs.n_x(), xhat.len())?;
    Error::check_dim("measurement", obs.n_y(), y.len())?;
    let mut out = obs.ghat.eval(xhat)?;
    luenberger_linear_part(obs, xhat, y, &mut out);
    Ok(out)
}

/// Adds `A x_hat + G (y - C x_hat)` to `out`.
pub(crate) fn luenberger_linear_part(obs: &LuenbergerObserver, xhat: &[f64], y: &[f64], out: &mut [f64]) {
    let (n_x, n_y) = (obs.n_x(), obs.n_y());
    let innov: Vec<f64> = (0..n_y)
        .map(|i| y[i] - (0..n_x).map(|j| obs.c[(i, j)] * xhat[j]).sum::<f64>())
        .collect();
    for (i, o) in out.iter_mut().enumerate() {
        *o += (0..n_x).map(|j| obs.a[(i, j)] * xhat[j]).sum::<f64>()
            + (0..n_y).map(|j| obs.g[(i, j)] * innov[j]).sum::<f64>();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observer {
    Kkl(KklObserver),
    Luenberger(LuenbergerObserver),
}

impl Observer {
    pub fn kind(&self) -> &'static str {
        match self {
            Observer::Kkl(_) => "kkl",
            Observer::Luenberger(_) => "luenberger",
        }
    }

    pub fn n_x(&self) -> usize {
        match self {
            Observer::Kkl(o) => o.n_x,
            Observer::Luenberger(o) => o.n_x(),
        }
    }

    pub fn n_y(&self) -> usize {
        match self {
            Observer::Kkl(o) => o.n_y,
            Observer::Luenberger(o) => o.n_y(),
        }
    }

    /// Dimension of the integrated observer state.
    pub fn state_dim(&self) -> usize {
        match self {
            Observer::Kkl(o) => o.d_z(),
            Observer::Luenberger(o) => o.n_x(),
        }
    }

    /// Flat learnable parameters: `[rho, T*, T?]` or `[g_hat]`.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Observer::Kkl(o) => {
                let mut p = o.rho.clone();
                p.extend_from_slice(&o.tstar.params);
                if let Some(t) = &o.t_fwd {
                    p.extend_from_slice(&t.params);
                }
                p
            }
            Observer::Luenberger(o) => o.ghat.params.0.clone(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Observer::Kkl(o) => {
                o.d_z() + o.tstar.params.len() + o.t_fwd.as_ref().map_or(0, |t| t.params.len())
            }
            Observer::Luenberger(o) => o.ghat.params.len(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        Error::check_dim("observer parameters", self.n_params(), p.len())?;
        match self {
            Observer::Kkl(o) => {
                let (rho, rest) = p.split_at(o.d_z());
                o.rho.copy_from_slice(rho);
                let (ts, tf) = rest.split_at(o.tstar.params.len());
                o.tstar.params.copy_from_slice(ts);
                if let Some(t) = &mut o.t_fwd {
                    t.params.copy_from_slice(tf);
                }
            }
            Observer::Luenberger(o) => o.ghat.params.copy_from_slice(p),
        }
        Ok(())
    }

    pub fn as_kkl(&self) -> Option<&KklObserver> {
        match self {
            Observer::Kkl(o) => Some(o),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ObserverCheckpoint::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: ObserverCheckpoint = serde_json::from_str(text)?;
        ck.try_into()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Known input applied to a non-autonomous system during a rollout.
#[derive(Debug, Clone, Copy)]
pub struct InputSignal<'a> {
    pub sys: &'a SystemSpec,
    /// Samples of `u` on the rollout grid.
    pub u: &'a Series,
}

/// Result of [`run_observer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverRun {
    /// Integrated observer state (`z` for KKL, `x_hat` for Luenberger).
    pub latent: Trajectory,
    /// State estimate at every grid point.
    pub estimate: Trajectory,
}

/// Integrates the observer driven by grid-sampled measurements; values at
/// RK4 stage times are linearly interpolated between grid samples.
pub fn run_observer(
    obs: &Observer,
    y: &Series,
    z0: &[f64],
    grid: &TimeGrid,
    input: Option<InputSignal<'_>>,
) -> Result<ObserverRun> {
    Error::check_dim("measurement samples", grid.len(), y.len())?;
    Error::check_dim("measurement dim", obs.n_y(), y.dim())?;
    Error::check_dim("initial observer state", obs.state_dim(), z0.len())?;
    if let Some(inp) = &input {
        Error::check_dim("input samples", grid.len(), inp.u.len())?;
    }
    let dim = obs.state_dim();
    let mut ys = vec![0.0; obs.n_y()];
    let mut us = vec![0.0; input.as_ref().map_or(0, |i| i.u.dim())];
    let mut latent = Series::with_capacity(dim, grid.len());
    latent.push(z0)?;
    let mut rk = Rk4::new(dim);
    let mut next = vec![0.0; dim];
    let mut failure: Option<Error> = None;

    let lambda = match obs {
        Observer::Kkl(o) => o.eigenvalues(),
        Observer::Luenberger(_) => Vec::new(),
    };

    for n in 0..grid.n_steps() {
        let t_n = grid.time(n);
        let mut f = |t: f64, z: &[f64], dz: &mut [f64]| {
            let frac = ((t - t_n) / grid.h).clamp(0.0, 1.0);
            let (i, frac) = if frac >= 1.0 { (n + 1, 0.0) } else { (n, frac) };
            y.lerp_into(i, frac, &mut ys);
            if let Some(inp) = &input {
                inp.u.lerp_into(i, frac, &mut us);
            }
            match obs {
                Observer::Kkl(o) => {
                    kkl_linear_drift(&lambda, z, ys.iter().sum(), dz);
                    if let Some(inp) = &input {
                        if us.iter().any(|v| *v != 0.0) {
                            match input_gain(o, inp.sys, z) {
                                Ok(phi) => {
                                    for (r, d) in dz.iter_mut().enumerate() {
                                        *d += (0..us.len()).map(|j| phi[(r, j)] * us[j]).sum::<f64>();
                                    }
                                }
                                Err(e) => failure = failure.take().or(Some(e)),
                            }
                        }
                    }
                }
                Observer::Luenberger(o) => match o.ghat.eval(z) {
                    Ok(g) => {
                        dz.copy_from_slice(&g);
                        luenberger_linear_part(o, z, &ys, dz);
                    }
                    Err(e) => failure = failure.take().or(Some(e)),
                },
            }
        };
        rk.step(&mut f, t_n, latent.row(n), grid.h, &mut next);
        if let Some(e) = failure.take() {
            return Err(e);
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: n + 1 });
        }
        latent.push(&next)?;
    }

    let estimate = match obs {
        Observer::Kkl(o) => {
            let zs = DMatrix::from_column_slice(dim, latent.len(), latent.as_flat());
            let xs = o.tstar.eval_batch(&zs)?;
            Series::from_flat(o.n_x, xs.as_slice().to_vec())?
        }
        Observer::Luenberger(_) => latent.clone(),
    };
    Ok(ObserverRun {
        latent: Trajectory::new(*grid, latent)?,
        estimate: Trajectory::new(*grid, estimate)?,
    })
}

pub(crate) mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        crate::observer::matrix_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}


/// Builds a matrix from a list of equally long rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid("matrix", "rows must be non-empty and of equal length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// JSON form of an observer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObserverCheckpoint {
    Kkl {
        format_version: u32,
        n_x: usize,
        n_y: usize,
        d_z: usize,
        rho: Vec<f64>,
        tstar: NetCheckpoint,
        #[serde(default)]
        t_fwd: Option<NetCheckpoint>,
    },
    Luenberger {
        format_version: u32,
        #[serde(with = "rows")]
        a: DMatrix<f64>,
        #[serde(with = "rows")]
        c: DMatrix<f64>,
        #[serde(with = "rows")]
        g: DMatrix<f64>,
        ghat: NetCheckpoint,
    },
}

impl From<&Observer> for ObserverCheckpoint {
    fn from(obs: &Observer) -> Self {
        match obs {
            Observer::Kkl(o) => ObserverCheckpoint::Kkl {
                format_version: OBSERVER_FORMAT_VERSION,
                n_x: o.n_x,
                n_y: o.n_y,
                d_z: o.d_z(),
                rho: o.rho.clone(),
                tstar: o.tstar.to_checkpoint(),
                t_fwd: o.t_fwd.as_ref().map(Mlp::to_checkpoint),
            },
            Observer::Luenberger(o) => ObserverCheckpoint::Luenberger {
                format_version: OBSERVER_FORMAT_VERSION,
                a: o.a.clone(),
                c: o.c.clone(),
                g: o.g.clone(),
                ghat: o.ghat.to_checkpoint(),
            },
        }
    }
}

impl TryFrom<ObserverCheckpoint> for Observer {
    type Error = Error;

    fn try_from(ck: ObserverCheckpoint) -> Result<Self> {
        let check_version = |v: u32| {
            if v == OBSERVER_FORMAT_VERSION {
                Ok(())
            } else {
                Err(Error::invalid("format_version", format!("unsupported version {v}")))
            }
        };
        match ck {
            ObserverCheckpoint::Kkl {
                format_version,
                n_x,
                n_y,
                d_z,
                rho,
                tstar,
                t_fwd,
            } => {
                check_version(format_version)?;
                Error::check_dim("rho", d_z, rho.len())?;
                let t_fwd = t_fwd.map(Mlp::from_checkpoint).transpose()?;
                Ok(Observer::Kkl(KklObserver::new(
                    n_x,
                    n_y,
                    rho,
                    Mlp::from_checkpoint(tstar)?,
                    t_fwd,
                )?))
            }
            ObserverCheckpoint::Luenberger {
                format_version,
                a,
                c,
                g,
                ghat,
            } => {
                check_version(format_version)?;
                Ok(Observer::Luenberger(LuenbergerObserver::new(
                    a,
                    c,
                    g,
                    Mlp::from_checkpoint(ghat)?,
                )?))
            }
        }
    }
}
