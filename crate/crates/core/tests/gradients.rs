use nalgebra::DMatrix;
use odekkl::integrate::{Series, TimeGrid, Trajectory};
use odekkl::net::{Activation, Mlp, MlpSpec};
use odekkl::observer::{KklObserver, LuenbergerObserver, Observer};
use odekkl::systems::{make_duffing, make_example1, make_vanderpol, rng_from_seed, NoiseKind,
                      NoiseSpec, SystemSpec};
use odekkl::train::{generate_dataset, grad_adjoint, grad_backprop, latent_trajectory, Dataset,
                    LossMode, TrainConfig};

/// Largest per-component relative error, with components far below the
/// gradient scale compared against `1e-3 * max|fd|` instead of themselves.
fn max_rel_err(g: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    g.iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-3 * scale).max(1e-300))
        .fold(0.0, f64::max)
}

fn central_fd(obs: &Observer, mut loss: impl FnMut(&Observer) -> f64) -> Vec<f64> {
    let p0 = obs.params();
    let mut o = obs.clone();
    let eps = 1e-6;
    (0..p0.len())
        .map(|i| {
            let mut p = p0.clone();
            p[i] = p0[i] + eps;
            o.set_params(&p).unwrap();
            let up = loss(&o);
            p[i] = p0[i] - eps;
            o.set_params(&p).unwrap();
            let down = loss(&o);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    d / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn vdp_data(grid: &TimeGrid, n: usize, noise: NoiseSpec) -> Dataset {
    generate_dataset(&make_vanderpol(), n, grid, &mut rng_from_seed(11), noise).unwrap()
}

fn kkl_obs(hidden: &[usize], forward: bool) -> Observer {
    let mut rng = rng_from_seed(5);
    Observer::Kkl(
        KklObserver::init(2, 1, None, hidden, Activation::Tanh, forward, &mut rng).unwrap(),
    )
}

type GradFn = fn(&Observer, &SystemSpec, &[&Trajectory], &TrainConfig)
    -> odekkl::Result<(Vec<f64>, odekkl::train::LossBreakdown)>;

fn refs(d: &Dataset) -> Vec<&Trajectory> {
    d.trajectories.iter().collect()
}

#[test]
fn kkl_backprop_matches_finite_differences() {
    let grid = TimeGrid::new(0.0, 2.0, 0.02).unwrap();
    let noise = NoiseSpec::measurement(NoiseKind::Gaussian { mean: 0.0, std: 0.1 });
    let data = vdp_data(&grid, 2, noise);
    let obs = kkl_obs(&[16], false);
    let mut cfg = TrainConfig::new(1, 2, 1e-3);
    cfg.gamma = 0.05;
    let batch = refs(&data);
    for stride in [1, 5] {
        cfg.loss_stride = stride;
        let (g, _) = grad_backprop(&obs, &data.system, &batch, &cfg).unwrap();
        let fd = central_fd(&obs, |o| grad_backprop(o, &data.system, &batch, &cfg).unwrap().1.total);
        let err = max_rel_err(&g, &fd);
        assert!(err < 1e-5, "stride {stride}: max relative error {err}");
    }
}

#[test]
fn nonautonomous_and_pde_gradients_match_finite_differences() {
    let sys = make_duffing();
    let grid = TimeGrid::new(0.0, 1.0, 0.05).unwrap();
    let data = generate_dataset(&sys, 2, &grid, &mut rng_from_seed(3), NoiseSpec::NONE).unwrap();
    let obs = kkl_obs(&[6], true);
    let batch = refs(&data);
    for (mode, pde) in [(LossMode::Nonautonomous, 0.0), (LossMode::Lagrange, 0.3),
                        (LossMode::Nonautonomous, 0.3)] {
        let mut cfg = TrainConfig::new(1, 2, 1e-3);
        cfg.loss_mode = mode;
        cfg.pde_weight = pde;
        cfg.gamma = 0.01;
        let (g, l) = grad_backprop(&obs, &sys, &batch, &cfg).unwrap();
        assert!(l.fwd > 0.0 || mode == LossMode::Lagrange);
        assert!(l.pde > 0.0 || pde == 0.0);
        let fd = central_fd(&obs, |o| grad_backprop(o, &sys, &batch, &cfg).unwrap().1.total);
        let err = max_rel_err(&g, &fd);
        assert!(err < 1e-5, "{mode:?} pde={pde}: max relative error {err}");
    }
}

fn luenberger_obs() -> Observer {
    let mut rng = rng_from_seed(8);
    let ghat = Mlp::init(MlpSpec::new(vec![2, 8, 2], Activation::Tanh).unwrap(), &mut rng).unwrap();
    Observer::Luenberger(
        LuenbergerObserver::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[2.0, 1.0]),
            ghat,
        )
        .unwrap(),
    )
}

fn example1_data(h: f64) -> Dataset {
    let sys: SystemSpec = make_example1();
    let grid = TimeGrid::new(0.0, 2.0, h).unwrap();
    generate_dataset(&sys, 2, &grid, &mut rng_from_seed(2), NoiseSpec::NONE).unwrap()
}

#[test]
fn luenberger_backprop_matches_finite_differences() {
    let data = example1_data(0.05);
    let obs = luenberger_obs();
    let mut cfg = TrainConfig::new(1, 2, 1e-3);
    let batch = refs(&data);
    for stride in [1, 4] {
        cfg.loss_stride = stride;
        let (g, _) = grad_backprop(&obs, &data.system, &batch, &cfg).unwrap();
        let fd = central_fd(&obs, |o| grad_backprop(o, &data.system, &batch, &cfg).unwrap().1.total);
        let err = max_rel_err(&g, &fd);
        assert!(err < 1e-5, "stride {stride}: max relative error {err}");
    }
}

#[test]
fn adjoint_agrees_with_backprop_and_converges() {
    let obs = kkl_obs(&[16], false);
    let mut cfg = TrainConfig::new(1, 2, 1e-3);
    cfg.gamma = 0.05;
    let mut gaps = Vec::new();
    for h in [0.02, 0.01] {
        let grid = TimeGrid::new(0.0, 2.0, h).unwrap();
        let data = vdp_data(&grid, 2, NoiseSpec::NONE);
        let batch = refs(&data);
        let (gb, lb) = grad_backprop(&obs, &data.system, &batch, &cfg).unwrap();
        let (ga, la) = grad_adjoint(&obs, &data.system, &batch, &cfg).unwrap();
        assert_eq!(lb, la);
        assert!(cosine(&ga, &gb) > 0.999);
        let gap = rel_gap(&ga, &gb);
        assert!(gap < 1e-2, "h={h}: relative gap {gap}");
        gaps.push(gap);
    }
    assert!(gaps[1] < gaps[0], "{gaps:?}");

    let obs = luenberger_obs();
    let mut gaps = Vec::new();
    for h in [0.02, 0.01] {
        let data = example1_data(h);
        let batch = refs(&data);
        let (gb, _) = grad_backprop(&obs, &data.system, &batch, &cfg).unwrap();
        let (ga, _) = grad_adjoint(&obs, &data.system, &batch, &cfg).unwrap();
        assert!(cosine(&ga, &gb) > 0.999);
        gaps.push(rel_gap(&ga, &gb));
    }
    assert!(gaps[1] < gaps[0], "{gaps:?}");
}

/// Trajectory whose states equal the current estimate, so the data term and
/// its gradient vanish.
fn self_consistent(obs: &KklObserver, data: &Dataset) -> Trajectory {
    let t = &data.trajectories[0];
    let z = latent_trajectory(obs, t).unwrap();
    let rows: Vec<Vec<f64>> = z.states.rows().map(|r| obs.tstar.eval(r).unwrap()).collect();
    let mut out = Trajectory::new(t.grid, Series::from_rows(&rows).unwrap()).unwrap();
    out.outputs = t.outputs.clone();
    out
}

#[test]
fn regularisation_only_gradient_is_analytic() {
    let grid = TimeGrid::new(0.0, 1.5, 0.01).unwrap();
    let data = vdp_data(&grid, 1, NoiseSpec::NONE);
    let obs = kkl_obs(&[5], false);
    let kkl = obs.as_kkl().unwrap();
    let traj = self_consistent(kkl, &data);
    let mut cfg = TrainConfig::new(1, 1, 1e-3);
    for gamma in [0.0, 0.7] {
        cfg.gamma = gamma;
        // The adjoint also samples step midpoints, where the interpolated
        // state differs from the estimate by O(h^2).
        for (grad, tol) in [(grad_backprop as GradFn, 1e-12), (grad_adjoint, 1e-5)] {
            let (g, l) = grad(&obs, &data.system, &[&traj], &cfg).unwrap();
            assert!(l.data < 1e-28);
            for (i, lam) in kkl.eigenvalues().iter().enumerate() {
                let want = 2.0 * gamma * grid.horizon() * lam * lam;
                assert!((g[i] - want).abs() < tol, "rho_{i}: {} vs {want}", g[i]);
            }
            assert!(g[kkl.d_z()..].iter().all(|v| v.abs() < tol));
        }
    }
}

