//! Metrics and evaluation experiments: scenario matrices, the eigenvalue
//! scaling sweep on a linear oracle, generalization maps and the Lipschitz
//! error-bound report.

use std::io::Write;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrate::{fmt_f64, simulate_system, solve_coupled, TimeGrid, Trajectory};
use crate::net::lipschitz_upper_bound;
use crate::observer::{run_observer, InputSignal, KklObserver, Observer};
use crate::systems::{make_linear, BoxDomain, ExcitationSpec, NoiseSpec, Rng, SystemSpec};
use crate::train::{latent_trajectory, Dataset};

/// Fraction of the initial error norm below which the error must stay.
pub const CONVERGENCE_FRACTION: f64 = 0.05;
/// Share of the horizon, at the end, averaged for the steady-state error.
pub const STEADY_STATE_SHARE: f64 = 0.2;

fn check_pair(x: &Trajectory, xhat: &Trajectory) -> Result<()> {
    if x.grid != xhat.grid {
        return Err(Error::GridMismatch);
    }
    Error::check_dim("estimate dim", x.states.dim(), xhat.states.dim())
}

fn error_norms(x: &Trajectory, xhat: &Trajectory) -> Vec<f64> {
    x.states
        .rows()
        .zip(xhat.states.rows())
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .collect()
}

/// First grid index with `t >= t0 + offset`, robust to rounding of the grid.
fn first_index_after(grid: &TimeGrid, offset: f64) -> usize {
    let k = offset / grid.h;
    (k - 1e-9).ceil().max(0.0) as usize
}

/// Sum of squared per-component errors and the number of terms, from
/// `t0 + warmup` on.
fn squared_error(x: &Trajectory, xhat: &Trajectory, warmup: f64) -> Result<(f64, usize)> {
    check_pair(x, xhat)?;
    if !(warmup >= 0.0 && warmup < x.grid.horizon()) {
        return Err(Error::invalid("warmup", "must lie in [0, tf - t0)"));
    }
    let start = first_index_after(&x.grid, warmup);
    let mut sum = 0.0;
    for i in start..x.grid.len() {
        for (a, b) in x.states.row(i).iter().zip(xhat.states.row(i)) {
            sum += (a - b) * (a - b);
        }
    }
    Ok((sum, (x.grid.len() - start) * x.states.dim()))
}

/// Root mean squared per-component error over grid points with
/// `t >= t0 + warmup`.
pub fn rmse(x: &Trajectory, xhat: &Trajectory, warmup: f64) -> Result<f64> {
    let (sum, n) = squared_error(x, xhat, warmup)?;
    Ok((sum / n as f64).sqrt())
}

/// First grid time after which `errors` stays below `fraction` of its first
/// value. `None` when the final sample is still above the threshold.
pub fn convergence_time_of(grid: &TimeGrid, errors: &[f64], fraction: f64) -> Option<f64> {
    let threshold = fraction * errors[0];
    match errors.iter().rposition(|&e| !(e <= threshold)) {
        None => Some(grid.t0),
        Some(last) if last + 1 == errors.len() => None,
        Some(last) => Some(grid.time(last + 1)),
    }
}

/// Convergence time of the error norm `|x - xhat|`, see
/// [`convergence_time_of`] with [`CONVERGENCE_FRACTION`].
pub fn convergence_time(x: &Trajectory, xhat: &Trajectory) -> Result<Option<f64>> {
    check_pair(x, xhat)?;
    Ok(convergence_time_of(&x.grid, &error_norms(x, xhat), CONVERGENCE_FRACTION))
}

fn tail_mean(grid: &TimeGrid, errors: &[f64]) -> f64 {
    let start = first_index_after(grid, (1.0 - STEADY_STATE_SHARE) * grid.horizon());
    let tail = &errors[start.min(errors.len() - 1)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Mean error norm over the final [`STEADY_STATE_SHARE`] of the horizon.
pub fn steady_state_error(x: &Trajectory, xhat: &Trajectory) -> Result<f64> {
    check_pair(x, xhat)?;
    Ok(tail_mean(&x.grid, &error_norms(x, xhat)))
}

/// Runs `obs` from a zero initial state on the measured outputs (and inputs,
/// if any) stored in `truth`.
pub fn estimate_along(obs: &Observer, sys: &SystemSpec, truth: &Trajectory) -> Result<Trajectory> {
    let y = truth.outputs.as_ref().ok_or(Error::Missing("measured outputs"))?;
    let input = truth.inputs.as_ref().map(|u| InputSignal { sys, u });
    let z0 = vec![0.0; obs.state_dim()];
    Ok(run_observer(obs, y, &z0, &truth.grid, input)?.estimate)
}

/// One test condition: a noise model and an optional known input.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub label: String,
    pub noise: NoiseSpec,
    pub excitation: ExcitationSpec,
}

impl Scenario {
    pub fn new(label: impl Into<String>, noise: NoiseSpec) -> Self {
        Self {
            label: label.into(),
            noise,
            excitation: ExcitationSpec::None,
        }
    }
}

/// One cell of a scenario matrix. `rmse` is `None` when the observer
/// diverged; `convergence_time` is `None` when it diverged or never settled.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub observer_id: String,
    pub scenario: String,
    pub rmse: Option<f64>,
    pub convergence_time: Option<f64>,
    pub trajectory_refs: Vec<PathBuf>,
}

/// Evaluates every observer under every scenario.
///
/// For each scenario and test initial condition one noisy measurement record
/// is drawn and shared by all observers. A cell's RMSE pools the squared
/// errors of all initial conditions; its convergence time is taken on the
/// error norm averaged across initial conditions.
#[allow(clippy::too_many_arguments)]
pub fn scenario_matrix(
    observers: &[(String, Observer)],
    sys: &SystemSpec,
    initial_conditions: &[Vec<f64>],
    scenarios: &[Scenario],
    grid: &TimeGrid,
    warmup: f64,
    rng: &mut Rng,
) -> Result<Vec<ScenarioResult>> {
    scenario_matrix_with(observers, sys, initial_conditions, scenarios, grid, warmup, rng, None)
}

/// Receives `(observer, scenario, initial condition index, truth, estimate)`
/// for every evaluated run and returns the path it wrote.
pub type TrajectorySink<'a> = dyn FnMut(&str, &str, usize, &Trajectory, &Trajectory) -> Result<PathBuf> + 'a;

/// [`scenario_matrix`] that also hands every run to `sink`, recording the
/// returned paths in `trajectory_refs`.
#[allow(clippy::too_many_arguments)]
pub fn scenario_matrix_with(
    observers: &[(String, Observer)],
    sys: &SystemSpec,
    initial_conditions: &[Vec<f64>],
    scenarios: &[Scenario],
    grid: &TimeGrid,
    warmup: f64,
    rng: &mut Rng,
    mut sink: Option<&mut TrajectorySink<'_>>,
) -> Result<Vec<ScenarioResult>> {
    if observers.is_empty() || initial_conditions.is_empty() || scenarios.is_empty() {
        return Err(Error::invalid("scenario_matrix", "observers, initial conditions and scenarios must be non-empty"));
    }
    let mut out = Vec::with_capacity(observers.len() * scenarios.len());
    for sc in scenarios {
        let truths = initial_conditions
            .iter()
            .map(|x0| simulate_system(sys, x0, grid, &[sc.noise], &sc.excitation, rng))
            .collect::<Result<Vec<_>>>()?;
        for (id, obs) in observers {
            out.push(evaluate_cell(id, &sc.label, obs, sys, &truths, warmup, sink.as_deref_mut())?);
        }
    }
    Ok(out)
}

fn evaluate_cell(
    id: &str,
    scenario: &str,
    obs: &Observer,
    sys: &SystemSpec,
    truths: &[Trajectory],
    warmup: f64,
    mut sink: Option<&mut TrajectorySink<'_>>,
) -> Result<ScenarioResult> {
    let grid = truths[0].grid;
    let mut cell = ScenarioResult {
        observer_id: id.to_string(),
        scenario: scenario.to_string(),
        rmse: None,
        convergence_time: None,
        trajectory_refs: Vec::new(),
    };
    let (mut sum, mut count) = (0.0, 0);
    let mut mean_err = vec![0.0; grid.len()];
    for (i, truth) in truths.iter().enumerate() {
        let xhat = match estimate_along(obs, sys, truth) {
            Ok(x) => x,
            Err(Error::Divergence { .. }) => return Ok(cell),
            Err(e) => return Err(e),
        };
        if !xhat.states.is_finite() {
            return Ok(cell);
        }
        if let Some(emit) = sink.as_deref_mut() {
            cell.trajectory_refs.push(emit(id, scenario, i, truth, &xhat)?);
        }
        let (s, n) = squared_error(truth, &xhat, warmup)?;
        sum += s;
        count += n;
        for (m, e) in mean_err.iter_mut().zip(error_norms(truth, &xhat)) {
            *m += e / truths.len() as f64;
        }
    }
    cell.rmse = Some((sum / count as f64).sqrt());
    cell.convergence_time = convergence_time_of(&grid, &mean_err, CONVERGENCE_FRACTION);
    Ok(cell)
}

fn fmt_opt(v: Option<f64>, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), fmt_f64)
}

/// CSV `observer,scenario,rmse,convergence_time`. A diverged cell has
/// `rmse = nan`; an unsettled error has `convergence_time = inf`.
pub fn write_scenario_csv<W: Write>(w: &mut W, rows: &[ScenarioResult]) -> Result<()> {
    writeln!(w, "observer,scenario,rmse,convergence_time")?;
    for r in rows {
        let ct = match (r.rmse, r.convergence_time) {
            (None, _) => "nan".to_string(),
            (Some(_), t) => fmt_opt(t, "inf"),
        };
        writeln!(w, "{},{},{},{}", r.observer_id, r.scenario, fmt_opt(r.rmse, "nan"), ct)?;
    }
    Ok(())
}

/// Solves `T A - D T = F C` through the Kronecker form
/// `(A^T (x) I - I (x) D) vec T = vec(F C)`.
pub fn sylvester_oracle(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    f: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n, p) = (a.nrows(), d.nrows());
    Error::check_dim("A columns", n, a.ncols())?;
    Error::check_dim("D columns", p, d.ncols())?;
    Error::check_dim("C columns", n, c.ncols())?;
    Error::check_dim("F rows", p, f.nrows())?;
    Error::check_dim("F columns", c.nrows(), f.ncols())?;
    let k = a.transpose().kronecker(&DMatrix::identity(p, p))
        - DMatrix::<f64>::identity(n, n).kronecker(d);
    let rhs = f * c;
    let vec = DVector::from_column_slice(rhs.as_slice());
    let sol = k
        .lu()
        .solve(&vec)
        .ok_or_else(|| Error::Singular("spectra of A and D overlap".into()))?;
    let t = DMatrix::from_column_slice(p, n, sol.as_slice());
    let residual = (&t * a - d * &t - &rhs).norm();
    if !(residual < 1e-10 * rhs.norm().max(1.0)) {
        return Err(Error::Singular(format!("Sylvester residual {residual:e}")));
    }
    Ok(t)
}

/// Singular values of `m`, sorted in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Least-squares left inverse `(T^T T)^-1 T^T` through the SVD.
pub fn pseudo_inverse(t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = singular_values(t);
    let tol = s.first().copied().unwrap_or(0.0) * 1e-13;
    t.clone()
        .svd(true, true)
        .pseudo_inverse(tol)
        .map_err(|e| Error::Singular(e.to_string()))
}

/// Linear test problem `x' = A x, y = C x` with a latent design `D_base, F`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOracle {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_base: Vec<f64>,
    pub f: DMatrix<f64>,
    pub x0: Vec<f64>,
}

impl LinearOracle {
    /// Rotation `A = [[0, 1], [-1, 0]]`, `C = [1, 0]`, `D = diag(-1, -2, -3)`,
    /// `F = 1`, started from `x0 = (1, 0)`.
    pub fn rotation() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            d_base: vec![-1.0, -2.0, -3.0],
            f: DMatrix::from_element(3, 1, 1.0),
            x0: vec![1.0, 0.0],
        }
    }

    pub fn d_z(&self) -> usize {
        self.d_base.len()
    }

    pub fn d_matrix(&self, k: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(self.d_z(), self.d_base.iter().map(|l| k * l)))
    }

    pub fn system(&self) -> Result<SystemSpec> {
        make_linear(self.a.clone(), self.c.clone())
    }

    /// `T_k` for `D_k = k D_base`.
    pub fn transform(&self, k: f64) -> Result<DMatrix<f64>> {
        sylvester_oracle(&self.a, &self.c, &self.d_matrix(k), &self.f)
    }

    /// The exact KKL observer for `D_k`: `T_k` as forward map and its
    /// pseudo-inverse as `T*`.
    pub fn observer(&self, k: f64) -> Result<KklObserver> {
        use crate::net::Mlp;
        // F is fixed to ones by the observer; a general F cannot be honoured.
        if self.f.iter().any(|v| *v != 1.0) {
            return Err(Error::invalid("f", "KKL observers use F = 1"));
        }
        let t = self.transform(k)?;
        let tinv = pseudo_inverse(&t)?;
        let lambda: Vec<f64> = self.d_base.iter().map(|l| k * l).collect();
        let n_x = self.a.nrows();
        KklObserver::with_eigenvalues(
            n_x,
            self.c.nrows(),
            &lambda,
            Mlp::affine(&tinv, &vec![0.0; n_x])?,
            Some(Mlp::affine(&t, &vec![0.0; self.d_z()])?),
        )
    }
}

/// Outcome of one scaling factor in [`robustness_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub k: f64,
    /// `None` when the error never settles below the threshold.
    pub convergence_time: Option<f64>,
    pub steady_state_error: f64,
    /// Largest ratio of the observed error to the robustness bound over the
    /// grid; at most 1 when the bound holds pointwise. Infinite for noise
    /// with unbounded support.
    pub max_bound_ratio: f64,
}

/// Simulation of one scaled observer on the linear oracle.
#[derive(Debug, Clone)]
pub struct OracleRun {
    pub truth: Trajectory,
    pub latent: Trajectory,
    pub estimate: Trajectory,
    pub transform: DMatrix<f64>,
}

/// Couples the oracle system with `z' = k D z + F y`, `z(t0) = 0`, and
/// reconstructs `x_hat = T_k^+ z`.
pub fn oracle_run(oracle: &LinearOracle, k: f64, noise: NoiseSpec, grid: &TimeGrid, rng: &mut Rng) -> Result<OracleRun> {
    let sys = oracle.system()?;
    let d = oracle.d_matrix(k);
    let t = oracle.transform(k)?;
    let tinv = pseudo_inverse(&t)?;
    let (dz, f) = (oracle.d_z(), &oracle.f);
    let drift = |_t: f64, z: &[f64], y: &[f64], _u: &[f64], out: &mut [f64]| {
        for i in 0..dz {
            out[i] = d[(i, i)] * z[i] + (0..y.len()).map(|j| f[(i, j)] * y[j]).sum::<f64>();
        }
    };
    let run = solve_coupled(&sys, drift, &oracle.x0, &vec![0.0; dz], grid, &[noise], &ExcitationSpec::None, rng)?;
    let zs = DMatrix::from_column_slice(dz, grid.len(), run.observer.states.as_flat());
    let xs = &tinv * zs;
    let estimate = Trajectory::new(
        *grid,
        crate::integrate::Series::from_flat(oracle.a.nrows(), xs.as_slice().to_vec())?,
    )?;
    Ok(OracleRun {
        truth: run.system,
        latent: run.observer,
        estimate,
        transform: t,
    })
}

/// Pointwise robustness bound for the scaled oracle observer with
/// measurement noise only:
/// `k^{d_z} sqrt(n_x) L_T (e^{k l (t - t0)} |z(t0) - T_k x(t0)| + v / |k l|)`
/// where `l` is the slowest base eigenvalue, `L_T = 1 / sigma_min(T_k)` and
/// `v` bounds `|F v(t)|`.
pub fn robustness_bound(oracle: &LinearOracle, k: f64, run: &OracleRun, noise: &NoiseSpec) -> Option<Vec<f64>> {
    let per_component = noise.component_bound()?;
    let n_y = oracle.c.nrows();
    let v_bar = (&oracle.f * DVector::from_element(n_y, per_component)).norm();
    let sigma_min = *singular_values(&run.transform).last()?;
    let l_t = 1.0 / sigma_min;
    let lam = k * oracle.d_base.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n_x = oracle.a.nrows() as f64;
    let gain = k.powi(oracle.d_z() as i32) * n_x.sqrt() * l_t;
    let x0 = DVector::from_column_slice(run.truth.states.row(0));
    let z0 = DVector::from_column_slice(run.latent.states.row(0));
    let e0 = (z0 - &run.transform * x0).norm();
    let grid = run.truth.grid;
    Some(
        (0..grid.len())
            .map(|i| gain * ((lam * (grid.time(i) - grid.t0)).exp() * e0 + v_bar / lam.abs()))
            .collect(),
    )
}

/// Scales the base eigenvalues by each `k`, simulating every observer on the
/// same noise realization (the generator is cloned per `k`).
pub fn robustness_sweep(
    oracle: &LinearOracle,
    k_values: &[f64],
    noise: NoiseSpec,
    grid: &TimeGrid,
    rng: &Rng,
) -> Result<Vec<SweepPoint>> {
    k_values
        .iter()
        .map(|&k| {
            if !(k >= 1.0 && k.is_finite()) {
                return Err(Error::invalid("k_values", "every k must be finite and >= 1"));
            }
            let run = oracle_run(oracle, k, noise, grid, &mut rng.clone())?;
            let errs = error_norms(&run.truth, &run.estimate);
            let max_bound_ratio = match robustness_bound(oracle, k, &run, &noise) {
                // Errors at round-off level are not compared against a bound
                // that decays below machine precision.
                Some(b) => {
                    let floor = 1e-12 * errs[0].max(1.0);
                    errs.iter().zip(&b).map(|(e, b)| e / (b + floor)).fold(0.0, f64::max)
                }
                None => f64::INFINITY,
            };
            Ok(SweepPoint {
                k,
                convergence_time: convergence_time_of(grid, &errs, CONVERGENCE_FRACTION),
                steady_state_error: tail_mean(grid, &errs),
                max_bound_ratio,
            })
        })
        .collect()
}

/// CSV `k,convergence_time,steady_state_error`; `inf` marks no convergence.
pub fn write_sweep_csv<W: Write>(w: &mut W, points: &[SweepPoint]) -> Result<()> {
    writeln!(w, "k,convergence_time,steady_state_error")?;
    for p in points {
        writeln!(
            w,
            "{},{},{}",
            fmt_f64(p.k),
            fmt_opt(p.convergence_time, "inf"),
            fmt_f64(p.steady_state_error)
        )?;
    }
    Ok(())
}

/// Row-major `n1 x n2` lattice over a 2-D box, endpoints included.
pub fn lattice(domain: &BoxDomain, n1: usize, n2: usize) -> Result<Vec<Vec<f64>>> {
    if domain.dim() != 2 || n1 == 0 || n2 == 0 {
        return Err(Error::invalid("lattice", "needs a 2-D box and at least one point per axis"));
    }
    let axis = |i: usize, n: usize, k: usize| {
        if n == 1 {
            0.5 * (domain.lo[i] + domain.hi[i])
        } else {
            domain.lo[i] + (domain.hi[i] - domain.lo[i]) * k as f64 / (n - 1) as f64
        }
    };
    Ok((0..n1)
        .flat_map(|a| (0..n2).map(move |b| (a, b)))
        .map(|(a, b)| vec![axis(0, n1, a), axis(1, n2, b)])
        .collect())
}

/// Noiseless RMSE from every initial condition; `None` marks divergence.
pub fn generalization_map(
    obs: &Observer,
    sys: &SystemSpec,
    initial_conditions: &[Vec<f64>],
    grid: &TimeGrid,
    warmup: f64,
) -> Result<Vec<Option<f64>>> {
    let mut rng = crate::systems::rng_from_seed(0);
    initial_conditions
        .iter()
        .map(|x0| {
            let truth = match simulate_system(sys, x0, grid, &[], &ExcitationSpec::None, &mut rng) {
                Ok(t) => t,
                Err(Error::Divergence { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            match estimate_along(obs, sys, &truth) {
                Ok(xhat) if xhat.states.is_finite() => rmse(&truth, &xhat, warmup).map(Some),
                Ok(_) | Err(Error::Divergence { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// CSV `x1_0,x2_0,rmse`; divergent cells carry `nan`.
pub fn write_genmap_csv<W: Write>(w: &mut W, ics: &[Vec<f64>], rmse: &[Option<f64>]) -> Result<()> {
    Error::check_dim("generalization map cells", ics.len(), rmse.len())?;
    writeln!(w, "x1_0,x2_0,rmse")?;
    for (x0, r) in ics.iter().zip(rmse) {
        Error::check_dim("initial condition", 2, x0.len())?;
        writeln!(w, "{},{},{}", fmt_f64(x0[0]), fmt_f64(x0[1]), fmt_opt(*r, "nan"))?;
    }
    Ok(())
}

/// One sample of the approximation-error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPoint {
    pub trajectory: usize,
    pub t: f64,
    pub observed: f64,
    pub bound: f64,
}

/// Bound `|x_hat - x| <= l |z - T(x)| + eps` evaluated on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBoundReport {
    /// Upper bound on the Lipschitz constant of `T*`.
    pub lipschitz_l: f64,
    pub empirical_eps_bar: f64,
    /// Whether the contraction term `l |z - T(x)|` is included; it needs a
    /// learned forward map.
    pub has_contraction_term: bool,
    pub bound_curve: Vec<BoundPoint>,
}

impl ErrorBoundReport {
    pub fn holds(&self) -> bool {
        self.bound_curve.iter().all(|p| p.observed <= p.bound)
    }

    /// CSV `trajectory,t,observed,bound`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "trajectory,t,observed,bound")?;
        for p in &self.bound_curve {
            writeln!(w, "{},{},{},{}", p.trajectory, fmt_f64(p.t), fmt_f64(p.observed), fmt_f64(p.bound))?;
        }
        Ok(())
    }
}

/// With a forward map, `eps` is the largest reconstruction residual
/// `|T*(T(x)) - x|` over the dataset, which makes the bound exact up to the
/// Lipschitz estimate. Without one, `eps` is the largest estimation error
/// over the final [`STEADY_STATE_SHARE`] of each trajectory and the curve
/// is that constant.
pub fn error_bound_report(obs: &KklObserver, dataset: &Dataset) -> Result<ErrorBoundReport> {
    let l = lipschitz_upper_bound(&obs.tstar.spec, &obs.tstar.params.0);
    let wrapped = Observer::Kkl(obs.clone());
    let mut eps: f64 = 0.0;
    let mut runs = Vec::with_capacity(dataset.len());
    for traj in &dataset.trajectories {
        let z = latent_trajectory(obs, traj)?;
        let xhat = estimate_along(&wrapped, &dataset.system, traj)?;
        let errs = error_norms(traj, &xhat);
        let dist = match &obs.t_fwd {
            Some(t) => {
                let mut d = Vec::with_capacity(traj.grid.len());
                for (x, zi) in traj.states.rows().zip(z.states.rows()) {
                    let tx = t.eval(x)?;
                    let back = obs.tstar.eval(&tx)?;
                    eps = eps.max(back.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
                    d.push(zi.iter().zip(&tx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
                }
                Some(d)
            }
            None => {
                let start = first_index_after(&traj.grid, (1.0 - STEADY_STATE_SHARE) * traj.grid.horizon());
                eps = errs[start..].iter().copied().fold(eps, f64::max);
                None
            }
        };
        runs.push((errs, dist));
    }
    let has_contraction_term = obs.t_fwd.is_some();
    let mut bound_curve = Vec::new();
    for (j, (errs, dist)) in runs.iter().enumerate() {
        let grid = dataset.trajectories[j].grid;
        for (i, &e) in errs.iter().enumerate() {
            let contraction = dist.as_ref().map_or(0.0, |d| l * d[i]);
            bound_curve.push(BoundPoint {
                trajectory: j,
                t: grid.time(i),
                observed: e,
                bound: contraction + eps,
            });
        }
    }
    Ok(ErrorBoundReport {
        lipschitz_l: l,
        empirical_eps_bar: eps,
        has_contraction_term,
        bound_curve,
    })
}
