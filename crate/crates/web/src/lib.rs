//! Browser bindings for three operations: simulating a catalog system,
//! running the exact KKL observer on the linear rotation oracle for a given
//! eigenvalue scale `k`, and sweeping `k` to expose the trade-off between
//! convergence speed and noise sensitivity.
//!
//! Results are flat `Float64Array`s with a fixed number of columns per row.

use odekkl::eval::{oracle_run, robustness_sweep, LinearOracle};
use odekkl::integrate::{simulate_system, TimeGrid};
use odekkl::systems::{by_name, rng_from_seed, ExcitationSpec, NoiseKind, NoiseSpec};
use wasm_bindgen::prelude::*;

fn grid(tf: f64, h: f64) -> Result<TimeGrid, String> {
    TimeGrid::new(0.0, tf, h).map_err(|e| e.to_string())
}

fn truncated_noise(std: f64) -> NoiseSpec {
    if std > 0.0 {
        NoiseSpec::measurement(NoiseKind::TruncatedGaussian { mean: 0.0, std })
    } else {
        NoiseSpec::NONE
    }
}

/// Rows `t, x1, x2` of a noiseless catalog trajectory. A nonzero
/// `amplitude` drives the Duffing oscillator with `amplitude cos(frequency t)`.
pub fn system_rows(system: &str, x1: f64, x2: f64, tf: f64, h: f64, amplitude: f64, frequency: f64) -> Result<Vec<f64>, String> {
    let sys = by_name(system).ok_or_else(|| format!("unknown system `{system}`"))?;
    let excitation = if amplitude != 0.0 {
        ExcitationSpec::Cosine { amplitude, frequency }
    } else {
        ExcitationSpec::None
    };
    let g = grid(tf, h)?;
    let traj = simulate_system(&sys, &[x1, x2], &g, &[], &excitation, &mut rng_from_seed(0))
        .map_err(|e| e.to_string())?;
    Ok((0..g.len())
        .flat_map(|i| {
            let x = traj.states.row(i);
            [g.time(i), x[0], x[1]]
        })
        .collect())
}

/// Rows `t, x1, x2, xhat1, xhat2` for the rotation oracle observed with
/// eigenvalues `k (-1, -2, -3)` under truncated gaussian measurement noise.
pub fn oracle_rows(k: f64, noise_std: f64, seed: u32, tf: f64) -> Result<Vec<f64>, String> {
    if !(k >= 1.0) {
        return Err("k must be >= 1".into());
    }
    let g = grid(tf, 0.01)?;
    let run = oracle_run(&LinearOracle::rotation(), k, truncated_noise(noise_std), &g, &mut rng_from_seed(seed as u64))
        .map_err(|e| e.to_string())?;
    Ok((0..g.len())
        .flat_map(|i| {
            let (x, e) = (run.truth.states.row(i), run.estimate.states.row(i));
            [g.time(i), x[0], x[1], e[0], e[1]]
        })
        .collect())
}

/// Rows `k, convergence_time, steady_state_error`; `NaN` marks an error
/// that never settles.
pub fn sweep_rows(k_values: &[f64], noise_std: f64, seed: u32, tf: f64) -> Result<Vec<f64>, String> {
    let g = grid(tf, 0.01)?;
    let pts = robustness_sweep(&LinearOracle::rotation(), k_values, truncated_noise(noise_std), &g, &rng_from_seed(seed as u64))
        .map_err(|e| e.to_string())?;
    Ok(pts
        .iter()
        .flat_map(|p| [p.k, p.convergence_time.unwrap_or(f64::NAN), p.steady_state_error])
        .collect())
}

#[wasm_bindgen]
pub fn simulate(system: &str, x1: f64, x2: f64, tf: f64, h: f64, amplitude: f64, frequency: f64) -> Result<Vec<f64>, JsError> {
    system_rows(system, x1, x2, tf, h, amplitude, frequency).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn oracle(k: f64, noise_std: f64, seed: u32, tf: f64) -> Result<Vec<f64>, JsError> {
    oracle_rows(k, noise_std, seed, tf).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sweep(k_values: Vec<f64>, noise_std: f64, seed: u32, tf: f64) -> Result<Vec<f64>, JsError> {
    sweep_rows(&k_values, noise_std, seed, tf).map_err(|e| JsError::new(&e))
}
