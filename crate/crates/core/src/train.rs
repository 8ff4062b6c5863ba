//! Datasets, losses, gradients and the optimisation loop.
//!
//! Losses are integrals over the simulation horizon, discretised with the
//! trapezoidal rule and averaged over the trajectories of a batch.
//! Gradients come either from an exact reverse sweep through every RK4
//! stage ([`grad_backprop`]) or from a backward RK4 integration of the
//! continuous adjoint system ([`grad_adjoint`]).

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{fmt_f64, simulate_system, Series, TimeGrid, Trajectory};
use crate::net::{backward_batch, backward_tangent_batch, forward_batch, forward_tangent_batch,
                 jacobian_input};
use crate::observer::{KklObserver, LuenbergerObserver, Observer};
use crate::systems::{fill_noise, rng_from_seed, ExcitationSpec, NoiseSpec, NoiseTarget, Rng,
                     SystemSpec};

/// Simulated training data. Stored states are noiseless; stored outputs
/// carry the training noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: SystemSpec,
    pub grid: TimeGrid,
    pub trajectories: Vec<Trajectory>,
    pub noise_applied: NoiseSpec,
}

impl Dataset {
    pub fn new(
        system: SystemSpec,
        grid: TimeGrid,
        trajectories: Vec<Trajectory>,
        noise_applied: NoiseSpec,
    ) -> Result<Self> {
        for t in &trajectories {
            if t.grid != grid {
                return Err(Error::GridMismatch);
            }
            Error::check_dim("dataset state", system.n_x, t.states.dim())?;
            let y = t.outputs.as_ref().ok_or(Error::Missing("measured outputs"))?;
            Error::check_dim("dataset output", system.n_y, y.dim())?;
        }
        Ok(Self {
            system,
            grid,
            trajectories,
            noise_applied,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Simulates `n_traj` trajectories from initial states drawn uniformly in
/// the system domain; `train_noise` is added to the stored outputs only.
pub fn generate_dataset(
    sys: &SystemSpec,
    n_traj: usize,
    grid: &TimeGrid,
    rng: &mut Rng,
    train_noise: NoiseSpec,
) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::invalid("n_traj", "must be at least 1"));
    }
    train_noise.validate()?;
    if train_noise.target != NoiseTarget::Measurement && !train_noise.is_none() {
        return Err(Error::invalid("train_noise.target", "training noise corrupts measurements only"));
    }
    let mut trajectories = Vec::with_capacity(n_traj);
    let mut v = vec![0.0; sys.n_y];
    for _ in 0..n_traj {
        let x0 = sys.domain.sample_uniform(rng);
        let mut traj = simulate_system(sys, &x0, grid, &[], &ExcitationSpec::None, rng)?;
        let mut y = Series::with_capacity(sys.n_y, grid.len());
        for x in traj.states.rows() {
            let mut yx = sys.output_vec(x);
            fill_noise(&train_noise, &mut v, rng);
            yx.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            y.push(&yx)?;
        }
        traj.outputs = Some(y);
        trajectories.push(traj);
    }
    Dataset::new(sys.clone(), *grid, trajectories, train_noise)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Reverse sweep through the discrete RK4 rollout.
    #[default]
    Backprop,
    /// Backward integration of the continuous adjoint system.
    Adjoint,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `int |x - T*(z)|^2 dt`.
    #[default]
    Lagrange,
    /// `int |z - T(x)|^2 + |x - T*(T(x))|^2 dt`, for observers that are later
    /// driven by a known input.
    Nonautonomous,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Gd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerSpec {
    pub const ADAM: Self = OptimizerSpec::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub fn validate(&self) -> Result<()> {
        if let OptimizerSpec::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) {
                return Err(Error::invalid("optimizer.beta1", "must lie in [0, 1)"));
            }
            if !(0.0..1.0).contains(&beta2) {
                return Err(Error::invalid("optimizer.beta2", "must lie in [0, 1)"));
            }
            if !(eps > 0.0) {
                return Err(Error::invalid("optimizer.eps", "must be positive"));
            }
        }
        Ok(())
    }
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self::ADAM
    }
}

fn default_one() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Trajectories per optimiser step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate multiplier applied after every epoch.
    #[serde(default = "default_one")]
    pub lr_decay: f64,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    /// Weight of the eigenvalue penalty `int sum lambda_i^2 dt`.
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub train_noise: NoiseSpec,
    /// Weight of the PDE residual penalty; needs a forward map.
    #[serde(default)]
    pub pde_weight: f64,
    #[serde(default)]
    pub gradient_mode: GradientMode,
    #[serde(default)]
    pub loss_mode: LossMode,
    #[serde(default)]
    pub seed: u64,
    /// L2 pull of network weights toward zero (not applied to `rho`).
    #[serde(default)]
    pub weight_decay: f64,
    /// When false the eigenvalues of `D` stay at their initial values.
    #[serde(default = "default_true")]
    pub learn_eigenvalues: bool,
    /// Loss quadrature uses every `loss_stride`-th grid point; the observer
    /// is still integrated on the full grid.
    #[serde(default = "default_stride")]
    pub loss_stride: usize,
}

fn default_stride() -> usize {
    1
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            lr_decay: 1.0,
            optimizer: OptimizerSpec::ADAM,
            gamma: 0.0,
            train_noise: NoiseSpec::NONE,
            pde_weight: 0.0,
            gradient_mode: GradientMode::Backprop,
            loss_mode: LossMode::Lagrange,
            seed: 0,
            weight_decay: 0.0,
            learn_eigenvalues: true,
            loss_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.loss_stride == 0 {
            return Err(Error::invalid("loss_stride", "must be at least 1"));
        }
        if self.loss_stride > 1 && self.gradient_mode == GradientMode::Adjoint {
            return Err(Error::invalid("loss_stride", "the adjoint gradient needs loss_stride 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay", "must lie in (0, 1]"));
        }
        for (key, v) in [
            ("gamma", self.gamma),
            ("pde_weight", self.pde_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(key, "must be finite and >= 0"));
            }
        }
        self.optimizer.validate()?;
        self.train_noise.validate()
    }
}

/// Loss terms; `total = data + gamma reg + pde_weight pde + fwd`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub reg: f64,
    pub pde: f64,
    pub fwd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn with_total(mut self, gamma: f64, pde_weight: f64) -> Self {
        self.total = self.data + gamma * self.reg + pde_weight * self.pde + self.fwd;
        self
    }

    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.data += s * o.data;
        self.reg += s * o.reg;
        self.pde += s * o.pde;
        self.fwd += s * o.fwd;
        self.total += s * o.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.data, self.reg, self.pde, self.fwd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Trapezoidal `int |x - x_hat|^2 dt`.
pub fn loss_lagrange(x: &Trajectory, xhat: &Trajectory) -> Result<f64> {
    if x.grid != xhat.grid {
        return Err(Error::GridMismatch);
    }
    Error::check_dim("estimate dim", x.states.dim(), xhat.states.dim())?;
    let w = x.grid.trapezoid_weights();
    Ok(x.states
        .rows()
        .zip(xhat.states.rows())
        .zip(&w)
        .map(|((a, b), w)| w * sq_dist(a, b))
        .sum())
}

/// Adds the eigenvalue penalty `(tf - t0) sum lambda_i^2` to `base`.
pub fn loss_regularized(base: f64, obs: &KklObserver, gamma: f64, grid: &TimeGrid) -> LossBreakdown {
    let reg = grid.horizon() * obs.eigenvalues().iter().map(|l| l * l).sum::<f64>();
    LossBreakdown {
        data: base,
        reg,
        ..Default::default()
    }
    .with_total(gamma, 0.0)
}

/// Trapezoidal `int |z - T(x)|^2 dt` (`fwd`) and `int |x - T*(T(x))|^2 dt` (`data`).
pub fn loss_nonauto(obs: &KklObserver, x: &Trajectory, z: &Trajectory) -> Result<LossBreakdown> {
    let t_fwd = obs.t_fwd.as_ref().ok_or(Error::Missing("a forward map T"))?;
    if x.grid != z.grid {
        return Err(Error::GridMismatch);
    }
    Error::check_dim("latent dim", obs.d_z(), z.states.dim())?;
    let xm = series_matrix(&x.states);
    let tx = t_fwd.eval_batch(&xm)?;
    let back = obs.tstar.eval_batch(&tx)?;
    let zm = series_matrix(&z.states);
    let w = x.grid.trapezoid_weights();
    let mut out = LossBreakdown::default();
    for (k, wk) in w.iter().enumerate() {
        out.fwd += wk * (zm.column(k) - tx.column(k)).norm_squared();
        out.data += wk * (xm.column(k) - back.column(k)).norm_squared();
    }
    Ok(out.with_total(0.0, 0.0))
}

/// `|dT/dx(x) f(x) - (D T(x) + F y)|` at one point.
pub fn pde_penalty(obs: &KklObserver, sys: &SystemSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    let t_fwd = obs.t_fwd.as_ref().ok_or(Error::Missing("a forward map T"))?;
    Error::check_dim("state", obs.n_x, x.len())?;
    Error::check_dim("measurement", obs.n_y, y.len())?;
    let mut f = vec![0.0; sys.n_x];
    sys.vector_field(x, &mut f);
    let jac = jacobian_input(&t_fwd.spec, &t_fwd.params, x)?;
    let tx = t_fwd.eval(x)?;
    let jf = jac * DMatrix::from_column_slice(f.len(), 1, &f);
    let ysum: f64 = y.iter().sum();
    let lambda = obs.eigenvalues();
    Ok((0..obs.d_z())
        .map(|i| {
            let r = jf[(i, 0)] - (lambda[i] * tx[i] + ysum);
            r * r
        })
        .sum::<f64>()
        .sqrt())
}

/// Latent trajectory of a KKL observer driven by the stored outputs, as
/// integrated during training.
pub fn latent_trajectory(obs: &KklObserver, traj: &Trajectory) -> Result<Trajectory> {
    let y = traj.outputs.as_ref().ok_or(Error::Missing("measured outputs"))?;
    Error::check_dim("measurement", obs.n_y, y.dim())?;
    let s = output_sums(y);
    let z = latent_rollout(&obs.eigenvalues(), &s, traj.grid.h)?;
    Trajectory::new(traj.grid, Series::from_flat(obs.d_z(), z)?)
}

pub fn grad_backprop(
    obs: &Observer,
    sys: &SystemSpec,
    batch: &[&Trajectory],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, LossBreakdown)> {
    gradient(obs, sys, batch, cfg, GradientMode::Backprop)
}

pub fn grad_adjoint(
    obs: &Observer,
    sys: &SystemSpec,
    batch: &[&Trajectory],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, LossBreakdown)> {
    gradient(obs, sys, batch, cfg, GradientMode::Adjoint)
}

/// Batch-averaged loss and its gradient in the layout of [`Observer::params`].
pub fn gradient(
    obs: &Observer,
    sys: &SystemSpec,
    batch: &[&Trajectory],
    cfg: &TrainConfig,
    mode: GradientMode,
) -> Result<(Vec<f64>, LossBreakdown)> {
    let first = batch.first().ok_or(Error::invalid("batch", "must not be empty"))?;
    for t in batch {
        if t.grid != first.grid {
            return Err(Error::GridMismatch);
        }
        Error::check_dim("batch state", obs.n_x(), t.states.dim())?;
        let y = t.outputs.as_ref().ok_or(Error::Missing("measured outputs"))?;
        Error::check_dim("batch output", obs.n_y(), y.dim())?;
    }
    let stride = cfg.loss_stride.max(1);
    if first.grid.n_steps() % stride != 0 {
        return Err(Error::invalid("loss_stride", "must divide the number of grid steps"));
    }
    if stride > 1 && mode == GradientMode::Adjoint {
        return Err(Error::invalid("loss_stride", "the adjoint gradient needs loss_stride 1"));
    }
    match obs {
        Observer::Kkl(o) => kkl_gradient(o, sys, batch, cfg, mode),
        Observer::Luenberger(o) => {
            if cfg.loss_mode != LossMode::Lagrange {
                return Err(Error::invalid("loss_mode", "the Luenberger observer uses the Lagrange loss"));
            }
            luenberger_gradient(o, batch, mode, stride)
        }
    }
}

/// Trapezoid weights on the grid points `0, stride, 2 stride, ..., n`,
/// zero elsewhere.
fn strided_trapezoid(grid: &TimeGrid, stride: usize) -> Vec<f64> {
    let n = grid.n_steps();
    let hs = grid.h * stride as f64;
    let mut w = vec![0.0; n + 1];
    for k in (0..=n).step_by(stride) {
        w[k] = if k == 0 || k == n { 0.5 * hs } else { hs };
    }
    w
}

fn select_cols(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

fn series_matrix(s: &Series) -> DMatrix<f64> {
    DMatrix::from_column_slice(s.dim(), s.len(), s.as_flat())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn output_sums(y: &Series) -> Vec<f64> {
    y.rows().map(|r| r.iter().sum()).collect()
}

/// One RK4 step of `z' = l z + s(t)` with `s` linear between grid samples.
#[inline]
fn latent_step(l: f64, a: f64, s0: f64, s1: f64, h: f64) -> f64 {
    let sm = s0 + 0.5 * (s1 - s0);
    let k1 = l * a + s0;
    let k2 = l * (a + 0.5 * h * k1) + sm;
    let k3 = l * (a + 0.5 * h * k2) + sm;
    let k4 = l * (a + h * k3) + s1;
    a + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Latent rollout from `z0 = 0`, row-major `(N + 1) x d_z`.
fn latent_rollout(lambda: &[f64], s: &[f64], h: f64) -> Result<Vec<f64>> {
    let d_z = lambda.len();
    let mut z = vec![0.0; s.len() * d_z];
    for n in 0..s.len() - 1 {
        for (i, &l) in lambda.iter().enumerate() {
            let next = latent_step(l, z[n * d_z + i], s[n], s[n + 1], h);
            if !next.is_finite() {
                return Err(Error::Divergence { step: n + 1 });
            }
            z[(n + 1) * d_z + i] = next;
        }
    }
    Ok(z)
}

/// Per-point integrand values of the KKL data terms.
struct Integrand {
    data: Vec<f64>,
    fwd: Vec<f64>,
    /// Weighted derivative of the loss with respect to each `z` column.
    grad_z: DMatrix<f64>,
}

/// Evaluates the loss integrand at the columns of `z` and `x`, accumulating
/// parameter gradients of `sum_k wq_k L_k` into the network slices.
fn kkl_integrand(
    obs: &KklObserver,
    mode: LossMode,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    wq: &[f64],
    g_tstar: &mut [f64],
    g_tfwd: &mut [f64],
) -> Result<Integrand> {
    let p = z.ncols();
    match mode {
        LossMode::Lagrange => {
            let (xhat, cache) = forward_batch(&obs.tstar.spec, &obs.tstar.params, z)?;
            let mut r = x - xhat;
            let data = r.column_iter().map(|c| c.norm_squared()).collect();
            for (k, mut c) in r.column_iter_mut().enumerate() {
                c *= -2.0 * wq[k];
            }
            let grad_z = backward_batch(&obs.tstar.spec, &obs.tstar.params, &cache, &r, g_tstar);
            Ok(Integrand {
                data,
                fwd: vec![0.0; p],
                grad_z,
            })
        }
        LossMode::Nonautonomous => {
            let t_fwd = obs.t_fwd.as_ref().ok_or(Error::Missing("a forward map T"))?;
            let (zt, c_fwd) = forward_batch(&t_fwd.spec, &t_fwd.params, x)?;
            let (back, c_inv) = forward_batch(&obs.tstar.spec, &obs.tstar.params, &zt)?;
            let mut rx = x - back;
            let mut rz = z - &zt;
            let data = rx.column_iter().map(|c| c.norm_squared()).collect();
            let fwd = rz.column_iter().map(|c| c.norm_squared()).collect();
            for (k, mut c) in rx.column_iter_mut().enumerate() {
                c *= -2.0 * wq[k];
            }
            for (k, mut c) in rz.column_iter_mut().enumerate() {
                c *= 2.0 * wq[k];
            }
            let g_zt = backward_batch(&obs.tstar.spec, &obs.tstar.params, &c_inv, &rx, g_tstar) - &rz;
            backward_batch(&t_fwd.spec, &t_fwd.params, &c_fwd, &g_zt, g_tfwd);
            Ok(Integrand {
                data,
                fwd,
                grad_z: rz,
            })
        }
    }
}

/// `sum_k wq_k |r_k|` for the PDE residual at the columns of `x`, with
/// gradients scaled by `weight` accumulated into `rho` and the forward map.
#[allow(clippy::too_many_arguments)]
fn pde_term(
    obs: &KklObserver,
    sys: &SystemSpec,
    lambda: &[f64],
    x: &DMatrix<f64>,
    wq: &[f64],
    weight: f64,
    g_rho: &mut [f64],
    g_tfwd: &mut [f64],
) -> Result<f64> {
    let t_fwd = obs.t_fwd.as_ref().ok_or(Error::Missing("a forward map T"))?;
    let p = x.ncols();
    let mut v = DMatrix::<f64>::zeros(x.nrows(), p);
    let mut y = vec![0.0; sys.n_y];
    let mut ysum = vec![0.0; p];
    for k in 0..p {
        let xk: Vec<f64> = x.column(k).iter().copied().collect();
        sys.vector_field(&xk, v.column_mut(k).as_mut_slice());
        sys.output(&xk, &mut y);
        ysum[k] = y.iter().sum();
    }
    let (tx, jv, cache) = forward_tangent_batch(&t_fwd.spec, &t_fwd.params, x, &v)?;
    let d_z = lambda.len();
    let mut g_tan = DMatrix::<f64>::zeros(d_z, p);
    let mut g_out = DMatrix::<f64>::zeros(d_z, p);
    let mut total = 0.0;
    let mut r = vec![0.0; d_z];
    for k in 0..p {
        for i in 0..d_z {
            r[i] = jv[(i, k)] - (lambda[i] * tx[(i, k)] + ysum[k]);
        }
        let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += wq[k] * nr;
        if nr > 0.0 {
            let s = weight * wq[k] / nr;
            for i in 0..d_z {
                let gt = s * r[i];
                g_tan[(i, k)] = gt;
                g_out[(i, k)] = -lambda[i] * gt;
                g_rho[i] -= gt * tx[(i, k)] * lambda[i];
            }
        }
    }
    backward_tangent_batch(&t_fwd.spec, &t_fwd.params, &cache, &g_out, &g_tan, g_tfwd);
    Ok(total)
}

fn kkl_gradient(
    obs: &KklObserver,
    sys: &SystemSpec,
    batch: &[&Trajectory],
    cfg: &TrainConfig,
    mode: GradientMode,
) -> Result<(Vec<f64>, LossBreakdown)> {
    let grid = batch[0].grid;
    let (h, n) = (grid.h, grid.n_steps());
    let d_z = obs.d_z();
    let lambda = obs.eigenvalues();
    let n_ts = obs.tstar.params.len();
    let n_params = Observer::Kkl(obs.clone()).n_params();
    let mut grad = vec![0.0; n_params];
    let (g_rho, rest) = grad.split_at_mut(d_z);
    let (g_ts, g_tf) = rest.split_at_mut(n_ts);
    let inv_b = 1.0 / batch.len() as f64;
    let stride = cfg.loss_stride.max(1);
    let trap: Vec<f64> = grid.trapezoid_weights().iter().map(|w| w * inv_b).collect();
    let idx: Vec<usize> = (0..=n).step_by(stride).collect();
    let trap_s: Vec<f64> = strided_trapezoid(&grid, stride)
        .into_iter()
        .filter(|w| *w > 0.0)
        .map(|w| w * inv_b)
        .collect();
    let use_pde = cfg.pde_weight > 0.0;
    if use_pde && obs.t_fwd.is_none() {
        return Err(Error::Missing("a forward map T for the PDE penalty"));
    }
    let mut loss = LossBreakdown::default();

    for traj in batch {
        let s = output_sums(traj.outputs.as_ref().expect("checked"));
        let zflat = latent_rollout(&lambda, &s, h)?;
        let z = DMatrix::from_column_slice(d_z, n + 1, &zflat);
        let x = series_matrix(&traj.states);
        match mode {
            GradientMode::Backprop if stride == 1 => {
                let it = kkl_integrand(obs, cfg.loss_mode, &z, &x, &trap, g_ts, g_tf)?;
                loss.data += it.data.iter().zip(&trap).map(|(v, w)| v * w).sum::<f64>();
                loss.fwd += it.fwd.iter().zip(&trap).map(|(v, w)| v * w).sum::<f64>();
                latent_backprop(&lambda, &zflat, &s, h, &it.grad_z, g_rho);
            }
            GradientMode::Backprop => {
                let (zs, xs) = (select_cols(&z, &idx), select_cols(&x, &idx));
                let it = kkl_integrand(obs, cfg.loss_mode, &zs, &xs, &trap_s, g_ts, g_tf)?;
                loss.data += it.data.iter().zip(&trap_s).map(|(v, w)| v * w).sum::<f64>();
                loss.fwd += it.fwd.iter().zip(&trap_s).map(|(v, w)| v * w).sum::<f64>();
                let mut grad_z = DMatrix::<f64>::zeros(d_z, n + 1);
                for (j, &k) in idx.iter().enumerate() {
                    grad_z.set_column(k, &it.grad_z.column(j));
                }
                latent_backprop(&lambda, &zflat, &s, h, &grad_z, g_rho);
            }
            GradientMode::Adjoint => {
                // Grid points, then step midpoints; Simpson weights.
                let mid = |m: &DMatrix<f64>| {
                    DMatrix::from_fn(m.nrows(), n, |i, k| 0.5 * (m[(i, k)] + m[(i, k + 1)]))
                };
                let zz = concat_cols(&z, &mid(&z));
                let xx = concat_cols(&x, &mid(&x));
                let mut wq = vec![h / 3.0 * inv_b; 2 * n + 1];
                wq[0] = h / 6.0 * inv_b;
                wq[n] = h / 6.0 * inv_b;
                wq[n + 1..].iter_mut().for_each(|w| *w = 2.0 * h / 3.0 * inv_b);
                let it = kkl_integrand(obs, cfg.loss_mode, &zz, &xx, &wq, g_ts, g_tf)?;
                loss.data += it.data[..=n].iter().zip(&trap).map(|(v, w)| v * w).sum::<f64>();
                loss.fwd += it.fwd[..=n].iter().zip(&trap).map(|(v, w)| v * w).sum::<f64>();
                // Per-point integrand derivative, keeping the 1/B batch factor.
                let mut lz = it.grad_z;
                for (k, mut c) in lz.column_iter_mut().enumerate() {
                    c *= inv_b / wq[k];
                }
                latent_adjoint(&lambda, &zz, &lz, h, n, g_rho);
            }
        }
        if use_pde {
            let xs = select_cols(&x, &idx);
            loss.pde += pde_term(obs, sys, &lambda, &xs, &trap_s, cfg.pde_weight, g_rho, g_tf)?;
        }
    }

    let horizon = grid.horizon();
    loss.reg = horizon * lambda.iter().map(|l| l * l).sum::<f64>();
    for (g, l) in g_rho.iter_mut().zip(&lambda) {
        *g += 2.0 * cfg.gamma * horizon * l * l;
    }
    let loss = loss.with_total(cfg.gamma, cfg.pde_weight);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step: n });
    }
    Ok((grad, loss))
}

fn concat_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    DMatrix::from_vec(a.nrows(), a.ncols() + b.ncols(), data)
}

/// Reverse sweep through [`latent_step`]; `grad_z` holds the direct loss
/// derivative at each grid point. Accumulates `dL/drho` into `g_rho`.
fn latent_backprop(lambda: &[f64], z: &[f64], s: &[f64], h: f64, grad_z: &DMatrix<f64>, g_rho: &mut [f64]) {
    let d_z = lambda.len();
    let n = s.len() - 1;
    for (i, &l) in lambda.iter().enumerate() {
        let mut gz = grad_z[(i, n)];
        let mut gl = 0.0;
        for k in (0..n).rev() {
            let a = z[k * d_z + i];
            let (s0, s1) = (s[k], s[k + 1]);
            let sm = s0 + 0.5 * (s1 - s0);
            let k1 = l * a + s0;
            let u2 = a + 0.5 * h * k1;
            let k2 = l * u2 + sm;
            let u3 = a + 0.5 * h * k2;
            let k3 = l * u3 + sm;
            let u4 = a + h * k3;
            let g = gz;
            let mut gk1 = h / 6.0 * g;
            let mut gk2 = h / 3.0 * g;
            let mut gk3 = h / 3.0 * g;
            let gk4 = h / 6.0 * g;
            let mut ga = g;
            gl += u4 * gk4;
            let gu4 = l * gk4;
            ga += gu4;
            gk3 += h * gu4;
            gl += u3 * gk3;
            let gu3 = l * gk3;
            ga += gu3;
            gk2 += 0.5 * h * gu3;
            gl += u2 * gk2;
            let gu2 = l * gk2;
            ga += gu2;
            gk1 += 0.5 * h * gu2;
            gl += a * gk1;
            ga += l * gk1;
            gz = ga + grad_z[(i, k)];
        }
        g_rho[i] += gl * l;
    }
}

/// Backward RK4 in `tau = tf - t` of `p' = lambda p + L_z` and
/// `mu' = p lambda z`, from `p = mu = 0`. `zz` and `lz` hold grid points
/// `0..=n` followed by the `n` step midpoints.
fn latent_adjoint(lambda: &[f64], zz: &DMatrix<f64>, lz: &DMatrix<f64>, h: f64, n: usize, g_rho: &mut [f64]) {
    for (i, &l) in lambda.iter().enumerate() {
        let mut p = 0.0;
        let mut mu = 0.0;
        for k in (0..n).rev() {
            let (z1, zm, z4) = (zz[(i, k + 1)], zz[(i, n + 1 + k)], zz[(i, k)]);
            let (l1, lm, l4) = (lz[(i, k + 1)], lz[(i, n + 1 + k)], lz[(i, k)]);
            let k1 = l * p + l1;
            let p2 = p + 0.5 * h * k1;
            let k2 = l * p2 + lm;
            let p3 = p + 0.5 * h * k2;
            let k3 = l * p3 + lm;
            let p4 = p + h * k3;
            let k4 = l * p4 + l4;
            mu += h / 6.0 * l * (p * z1 + 2.0 * (p2 + p3) * zm + p4 * z4);
            p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        g_rho[i] += mu;
    }
}

fn luenberger_gradient(
    obs: &LuenbergerObserver,
    batch: &[&Trajectory],
    mode: GradientMode,
    stride: usize,
) -> Result<(Vec<f64>, LossBreakdown)> {
    let grid = batch[0].grid;
    let (h, n) = (grid.h, grid.n_steps());
    let b = batch.len();
    let n_x = obs.n_x();
    let inv_b = 1.0 / b as f64;
    let trap = strided_trapezoid(&grid, stride);
    let spec = &obs.ghat.spec;
    let params = &obs.ghat.params;
    let m = &obs.a - &obs.g * &obs.c;
    let mt = m.transpose();

    // Column b of step k: trajectory b at grid point k.
    let gather = |k: usize, f: &dyn Fn(&Trajectory) -> &Series| {
        let dim = f(batch[0]).dim();
        DMatrix::from_fn(dim, b, |i, j| f(batch[j]).row(k)[i])
    };
    let xs: Vec<DMatrix<f64>> = (0..=n).map(|k| gather(k, &|t| &t.states)).collect();
    let gy: Vec<DMatrix<f64>> = (0..=n)
        .map(|k| &obs.g * gather(k, &|t| t.outputs.as_ref().expect("checked")))
        .collect();
    let gym: Vec<DMatrix<f64>> = (0..n).map(|k| (&gy[k] + &gy[k + 1]) * 0.5).collect();

    let drift = |u: &DMatrix<f64>, gyt: &DMatrix<f64>| -> Result<_> {
        let (g, cache) = forward_batch(spec, params, u)?;
        Ok((&m * u + g + gyt, cache))
    };

    let mut xh = Vec::with_capacity(n + 1);
    xh.push(DMatrix::<f64>::zeros(n_x, b));
    for k in 0..n {
        let a = &xh[k];
        let (k1, _) = drift(a, &gy[k])?;
        let (k2, _) = drift(&(a + &k1 * (0.5 * h)), &gym[k])?;
        let (k3, _) = drift(&(a + &k2 * (0.5 * h)), &gym[k])?;
        let (k4, _) = drift(&(a + &k3 * h), &gy[k + 1])?;
        let next = a + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        xh.push(next);
    }

    let mut grad = vec![0.0; params.len()];
    let mut data = 0.0;
    for k in 0..=n {
        data += trap[k] * inv_b * (&xs[k] - &xh[k]).norm_squared();
    }
    // d/dx_hat of the integrand |x - x_hat|^2 / B.
    let lgrad = |x: &DMatrix<f64>, xhat: &DMatrix<f64>| (x - xhat) * (-2.0 * inv_b);

    match mode {
        GradientMode::Backprop => {
            let mut gx = lgrad(&xs[n], &xh[n]) * trap[n];
            for k in (0..n).rev() {
                let a = &xh[k];
                let (k1, c1) = drift(a, &gy[k])?;
                let u2 = a + &k1 * (0.5 * h);
                let (k2, c2) = drift(&u2, &gym[k])?;
                let u3 = a + &k2 * (0.5 * h);
                let (k3, c3) = drift(&u3, &gym[k])?;
                let (_, c4) = drift(&(a + &k3 * h), &gy[k + 1])?;
                let mut gk1 = &gx * (h / 6.0);
                let mut gk2 = &gx * (h / 3.0);
                let mut gk3 = &gx * (h / 3.0);
                let gk4 = &gx * (h / 6.0);
                let mut ga = gx.clone();
                let vjp = |c, gk: &DMatrix<f64>, grad: &mut [f64]| {
                    &mt * gk + backward_batch(spec, params, c, gk, grad)
                };
                let gu4 = vjp(&c4, &gk4, &mut grad);
                ga += &gu4;
                gk3 += &gu4 * h;
                let gu3 = vjp(&c3, &gk3, &mut grad);
                ga += &gu3;
                gk2 += &gu3 * (0.5 * h);
                let gu2 = vjp(&c2, &gk2, &mut grad);
                ga += &gu2;
                gk1 += &gu2 * (0.5 * h);
                ga += vjp(&c1, &gk1, &mut grad);
                gx = ga + lgrad(&xs[k], a) * trap[k];
            }
        }
        GradientMode::Adjoint => {
            let mut p = DMatrix::<f64>::zeros(n_x, b);
            for k in (0..n).rev() {
                let s1 = &xh[k + 1];
                let sm = (&xh[k] + &xh[k + 1]) * 0.5;
                let s4 = &xh[k];
                let xm = (&xs[k] + &xs[k + 1]) * 0.5;
                let (_, c1) = forward_batch(spec, params, s1)?;
                let (_, cm) = forward_batch(spec, params, &sm)?;
                let (_, c4) = forward_batch(spec, params, s4)?;
                // Stage slope; `w` scales the parameter accumulation.
                let stage = |c, ps: &DMatrix<f64>, x: &DMatrix<f64>, s: &DMatrix<f64>, w: f64,
                                 grad: &mut [f64]| {
                    let gin = backward_batch(spec, params, c, &(ps * w), grad);
                    &mt * ps + gin / w + lgrad(x, s)
                };
                let k1 = stage(&c1, &p, &xs[k + 1], s1, h / 6.0, &mut grad);
                let p2 = &p + &k1 * (0.5 * h);
                let k2 = stage(&cm, &p2, &xm, &sm, h / 3.0, &mut grad);
                let p3 = &p + &k2 * (0.5 * h);
                let k3 = stage(&cm, &p3, &xm, &sm, h / 3.0, &mut grad);
                let p4 = &p + &k3 * h;
                let k4 = stage(&c4, &p4, &xs[k], s4, h / 6.0, &mut grad);
                p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
        }
    }
    let loss = LossBreakdown {
        data,
        ..Default::default()
    }
    .with_total(0.0, 0.0);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step: n });
    }
    Ok((grad, loss))
}

/// First-order optimiser state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, n_params: usize) -> Self {
        Self {
            spec,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.spec {
            OptimizerSpec::Gd => {
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
            }
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Everything besides the observer needed to continue a run exactly:
/// optimizer moments, the decayed learning rate and the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub history: Vec<LossBreakdown>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Self {
            epoch: 0,
            learning_rate: cfg.learning_rate,
            optimizer: Optimizer::new(cfg.optimizer, n_params),
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub observer: Observer,
    /// Mean loss of every epoch, in order.
    pub history: Vec<LossBreakdown>,
}

pub fn train(obs: Observer, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(obs, dataset, cfg, |_, _, _| Ok(()))
}

/// Like [`train`], calling `on_epoch(epoch, observer, loss)` after each
/// epoch (1-based).
pub fn train_with<F>(obs: Observer, dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Observer, &LossBreakdown) -> Result<()>,
{
    let state = TrainState::new(cfg, obs.n_params());
    let (observer, state) = train_from(obs, state, dataset, cfg, |o, s| {
        on_epoch(s.epoch, o, s.history.last().expect("one epoch done"))
    })?;
    Ok(TrainOutcome {
        observer,
        history: state.history,
    })
}

/// Runs the epochs after `state.epoch` up to `cfg.epochs`. Shuffling depends
/// only on the seed and the epoch index, so a run split at any epoch and
/// resumed from its state reproduces the uninterrupted run.
pub fn train_from<F>(
    mut obs: Observer,
    mut state: TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Observer, TrainState)>
where
    F: FnMut(&Observer, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "must not be empty"));
    }
    let mut params = obs.params();
    Error::check_dim("optimizer state", params.len(), state.optimizer.m.len())?;
    if state.optimizer.spec != cfg.optimizer {
        return Err(Error::invalid("optimizer", "differs from the resumed state"));
    }
    let frozen = match &obs {
        Observer::Kkl(o) if !cfg.learn_eigenvalues => o.d_z(),
        _ => 0,
    };
    let n_rho = match &obs {
        Observer::Kkl(o) => o.d_z(),
        Observer::Luenberger(_) => 0,
    };
    let n_traj = dataset.len();
    for epoch in state.epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n_traj).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &dataset.trajectories[i]).collect();
            let (mut g, loss) = match gradient(&obs, &dataset.system, &batch, cfg, cfg.gradient_mode) {
                Err(Error::Divergence { .. }) => return Err(Error::NonFiniteLoss { epoch }),
                r => r?,
            };
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            g[..frozen].iter_mut().for_each(|v| *v = 0.0);
            if cfg.weight_decay > 0.0 {
                for (gi, pi) in g[n_rho..].iter_mut().zip(&params[n_rho..]) {
                    *gi += cfg.weight_decay * pi;
                }
            }
            state.optimizer.step(&mut params, &g, state.learning_rate);
            obs.set_params(&params)?;
            acc.add_scaled(&loss, chunk.len() as f64 / n_traj as f64);
        }
        state.learning_rate *= cfg.lr_decay;
        state.epoch = epoch;
        state.history.push(acc);
        on_epoch(&obs, &state)?;
    }
    Ok((obs, state))
}

fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    rng_from_seed(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Writes `epoch,data,reg,pde,fwd,total`, one row per epoch starting at 1.
pub fn write_history_csv<W: Write>(w: &mut W, history: &[LossBreakdown]) -> Result<()> {
    writeln!(w, "epoch,data,reg,pde,fwd,total")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            i + 1,
            fmt_f64(l.data),
            fmt_f64(l.reg),
            fmt_f64(l.pde),
            fmt_f64(l.fwd),
            fmt_f64(l.total)
        )?;
    }
    Ok(())
}
