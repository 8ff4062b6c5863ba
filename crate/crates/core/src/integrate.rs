//! Fixed-step classical Runge-Kutta integration.
//!
//! All simulations in the crate run on a uniform [`TimeGrid`] with the
//! 4-stage RK4 scheme. Sample paths are stored row-major in [`Series`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::{fill_noise, ExcitationSpec, NoiseSpec, NoiseTarget, Rng, SystemSpec};

/// Uniform grid `t0, t0 + h, ..., tf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub tf: f64,
    pub h: f64,
    #[serde(skip)]
    n_steps: usize,
}

impl<'de> Deserialize<'de> for TimeGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            #[serde(default)]
            t0: f64,
            tf: f64,
            h: f64,
        }
        let raw = Raw::deserialize(d)?;
        TimeGrid::new(raw.t0, raw.tf, raw.h).map_err(serde::de::Error::custom)
    }
}

impl TimeGrid {
    pub fn new(t0: f64, tf: f64, h: f64) -> Result<Self> {
        if !(t0.is_finite() && tf.is_finite() && h.is_finite()) {
            return Err(Error::InvalidGrid("non-finite bounds".into()));
        }
        if !(tf > t0) {
            return Err(Error::InvalidGrid(format!("tf ({tf}) must exceed t0 ({t0})")));
        }
        if !(h > 0.0) {
            return Err(Error::InvalidGrid(format!("step {h} must be positive")));
        }
        let ratio = (tf - t0) / h;
        let n = ratio.round();
        if n < 1.0 || ((ratio - n) / ratio).abs() > 1e-9 {
            return Err(Error::InvalidGrid(format!(
                "horizon {} is not a multiple of step {h}",
                tf - t0
            )));
        }
        Ok(Self {
            t0,
            tf,
            h,
            n_steps: n as usize,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    pub fn horizon(&self) -> f64 {
        self.tf - self.t0
    }

    /// Same horizon, different step.
    pub fn with_step(&self, h: f64) -> Result<Self> {
        Self::new(self.t0, self.tf, h)
    }

    /// Trapezoidal quadrature weights on the grid.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![self.h; self.len()];
        w[0] = 0.5 * self.h;
        w[self.n_steps] = 0.5 * self.h;
        w
    }
}

/// Row-major sequence of equally sized samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    dim: usize,
    rows: usize,
    data: Vec<f64>,
}

impl Series {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: 0,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            rows: 0,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn zeros(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            rows,
            data: vec![0.0; dim * rows],
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid("series", "data length is not a multiple of dim"));
        }
        Ok(Self {
            dim,
            rows: data.len() / dim,
            data,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut s = Self::with_capacity(dim, rows.len());
        for r in rows {
            s.push(r.as_ref())?;
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        Error::check_dim("series row", self.dim, row.len())?;
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// All samples, row after row.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sample at fractional position `i + frac` by linear interpolation.
    pub fn lerp_into(&self, i: usize, frac: f64, out: &mut [f64]) {
        let a = self.row(i);
        if frac == 0.0 {
            out.copy_from_slice(a);
        } else {
            let b = self.row(i + 1);
            for ((o, &va), &vb) in out.iter_mut().zip(a).zip(b) {
                *o = va + frac * (vb - va);
            }
        }
    }
}

/// Sample paths on a grid: states, and optionally outputs and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Series,
    pub outputs: Option<Series>,
    pub inputs: Option<Series>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, states: Series) -> Result<Self> {
        Error::check_dim("trajectory rows", grid.len(), states.len())?;
        Ok(Self {
            grid,
            states,
            outputs: None,
            inputs: None,
        })
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.row(self.states.len() - 1)
    }

    /// CSV with header `t,x1..xn[,y1..ym][,u1..uk]`; `prefix` replaces `x`.
    pub fn write_csv<W: Write>(&self, w: &mut W, prefix: &str) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.states.dim()).map(|i| format!("{prefix}{i}")));
        if let Some(y) = &self.outputs {
            header.extend((1..=y.dim()).map(|i| format!("y{i}")));
        }
        if let Some(u) = &self.inputs {
            header.extend((1..=u.dim()).map(|i| format!("u{i}")));
        }
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for i in 0..self.grid.len() {
            line.clear();
            line.push_str(&fmt_f64(self.grid.time(i)));
            let extra = [Some(&self.states), self.outputs.as_ref(), self.inputs.as_ref()];
            for s in extra.into_iter().flatten() {
                for v in s.row(i) {
                    line.push(',');
                    line.push_str(&fmt_f64(*v));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// 17 significant digits, `.` decimal separator.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reusable RK4 stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
        }
    }

    /// One classical RK4 step; `f(t, x, dx)` writes the derivative into `dx`.
    pub fn step<F>(&mut self, f: &mut F, t: f64, x: &[f64], h: f64, out: &mut [f64])
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        f(t, x, k1);
        axpy_into(tmp, x, 0.5 * h, k1);
        f(t + 0.5 * h, tmp, k2);
        axpy_into(tmp, x, 0.5 * h, k2);
        f(t + 0.5 * h, tmp, k3);
        axpy_into(tmp, x, h, k3);
        f(t + h, tmp, k4);
        for i in 0..x.len() {
            out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, k: &[f64]) {
    for ((o, &xi), &ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + a * ki;
    }
}

/// Single RK4 step. Returns [`Error::Divergence`] if the result is non-finite.
pub fn rk4_step<F>(mut f: F, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut out = vec![0.0; x.len()];
    Rk4::new(x.len()).step(&mut f, t, x, h, &mut out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Divergence { step: 0 })
    }
}

pub fn solve_ivp<F>(mut f: F, x0: &[f64], grid: &TimeGrid) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let d = x0.len();
    let mut states = Series::with_capacity(d, grid.len());
    states.push(x0)?;
    let mut rk = Rk4::new(d);
    let mut next = vec![0.0; d];
    for n in 0..grid.n_steps() {
        rk.step(&mut f, grid.time(n), states.row(n), grid.h, &mut next);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: n + 1 });
        }
        states.push(&next)?;
    }
    Trajectory::new(*grid, states)
}

/// Output of [`solve_coupled`].
#[derive(Debug, Clone)]
pub struct CoupledRun {
    /// True state with measured outputs (noise included) and inputs.
    pub system: Trajectory,
    /// Observer state.
    pub observer: Trajectory,
}

/// Integrates the true system and an observer as one stacked RK4 state.
///
/// `obs_drift(t, z, y, u, dz)` sees the measured output of the current stage
/// state. Noise samples are drawn once per step and held across its stages;
/// the stored output at grid point `n` carries the sample of step `n`.
#[allow(clippy::too_many_arguments)]
pub fn solve_coupled<F>(
    sys: &SystemSpec,
    mut obs_drift: F,
    x0: &[f64],
    z0: &[f64],
    grid: &TimeGrid,
    noise: &[NoiseSpec],
    excitation: &ExcitationSpec,
    rng: &mut Rng,
) -> Result<CoupledRun>
where
    F: FnMut(f64, &[f64], &[f64], &[f64], &mut [f64]),
{
    Error::check_dim("x0", sys.n_x, x0.len())?;
    for spec in noise {
        spec.validate()?;
    }
    let (n_x, n_y, d_z) = (sys.n_x, sys.n_y, z0.len());
    let n_u = if excitation.is_none() { 0 } else { sys.n_u() };
    if !excitation.is_none() && n_u == 0 {
        return Err(Error::Missing("an input map for the excitation"));
    }

    let mut v = vec![0.0; n_y];
    let mut w = vec![0.0; n_x];
    let mut v_tmp = vec![0.0; n_y];
    let mut w_tmp = vec![0.0; n_x];
    let mut draw = |v: &mut Vec<f64>, w: &mut Vec<f64>, rng: &mut Rng| {
        v.fill(0.0);
        w.fill(0.0);
        for spec in noise {
            match spec.target {
                NoiseTarget::Measurement => {
                    fill_noise(spec, &mut v_tmp, rng);
                    v.iter_mut().zip(&v_tmp).for_each(|(a, b)| *a += b);
                }
                NoiseTarget::Process => {
                    fill_noise(spec, &mut w_tmp, rng);
                    w.iter_mut().zip(&w_tmp).for_each(|(a, b)| *a += b);
                }
            }
        }
    };

    let mut xs = Series::with_capacity(n_x, grid.len());
    let mut ys = Series::with_capacity(n_y, grid.len());
    let mut us = Series::with_capacity(n_u, grid.len());
    let mut zs = Series::with_capacity(d_z, grid.len());
    let mut stack: Vec<f64> = x0.iter().chain(z0).copied().collect();
    let mut next = vec![0.0; n_x + d_z];
    let mut rk = Rk4::new(n_x + d_z);
    let mut y = vec![0.0; n_y];
    let mut u = vec![0.0; n_u];

    let record = |stack: &[f64], t: f64, v: &[f64], xs: &mut Series, ys: &mut Series,
                  us: &mut Series, zs: &mut Series| {
        let mut y = sys.output_vec(&stack[..n_x]);
        y.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        xs.push(&stack[..n_x]).unwrap();
        zs.push(&stack[n_x..]).unwrap();
        ys.push(&y).unwrap();
        if n_u > 0 {
            us.push(&[excitation.value(t)]).unwrap();
        }
    };

    for n in 0..grid.n_steps() {
        let t = grid.time(n);
        draw(&mut v, &mut w, rng);
        record(&stack, t, &v, &mut xs, &mut ys, &mut us, &mut zs);
        let mut f = |ts: f64, s: &[f64], ds: &mut [f64]| {
            let (x, z) = s.split_at(n_x);
            let (dx, dz) = ds.split_at_mut(n_x);
            if n_u > 0 {
                u[0] = excitation.value(ts);
            }
            sys.drift(ts, x, &u, dx);
            dx.iter_mut().zip(&w).for_each(|(a, b)| *a += b);
            sys.output(x, &mut y);
            y.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            obs_drift(ts, z, &y, &u, dz);
        };
        rk.step(&mut f, t, &stack, grid.h, &mut next);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: n + 1 });
        }
        std::mem::swap(&mut stack, &mut next);
    }
    draw(&mut v, &mut w, rng);
    record(&stack, grid.tf, &v, &mut xs, &mut ys, &mut us, &mut zs);

    let mut system = Trajectory::new(*grid, xs)?;
    system.outputs = Some(ys);
    if n_u > 0 {
        system.inputs = Some(us);
    }
    let observer = Trajectory::new(*grid, zs)?;
    Ok(CoupledRun { system, observer })
}

/// Simulates the system alone (observer state of dimension zero).
pub fn simulate_system(
    sys: &SystemSpec,
    x0: &[f64],
    grid: &TimeGrid,
    noise: &[NoiseSpec],
    excitation: &ExcitationSpec,
    rng: &mut Rng,
) -> Result<Trajectory> {
    solve_coupled(sys, |_, _, _, _, _| {}, x0, &[], grid, noise, excitation, rng)
        .map(|r| r.system)
}
