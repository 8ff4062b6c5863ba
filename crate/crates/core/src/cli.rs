//! Declarative experiment runner behind the `odekkl` binary.
//!
//! Each subcommand reads one JSON config carrying `schema_version`. Unknown
//! keys are rejected. Relative paths inside a config resolve against the
//! config's directory. Outputs are a pure function of the config and seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::eval::{
    generalization_map, lattice, robustness_sweep, scenario_matrix_with, write_genmap_csv,
    write_scenario_csv, write_sweep_csv, LinearOracle, Scenario,
};
use crate::integrate::{fmt_f64, simulate_system, TimeGrid, Trajectory};
use crate::net::{Activation, Mlp, MlpSpec};
use crate::observer::{matrix_from_rows, run_observer, InputSignal, KklObserver, LuenbergerObserver,
                      Observer, ObserverCheckpoint};
use crate::systems::{by_name, make_linear, rng_from_seed, BoxDomain, ExcitationSpec, NoiseSpec,
                     Rng, SystemSpec};
use crate::train::{generate_dataset, train_from, Dataset, write_history_csv, TrainConfig, TrainState};

pub const SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "odekkl", version, about = "Neural ODE state observers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate systems (and optionally an observer) to trajectory CSVs.
    Simulate(CommonArgs),
    /// Train an observer; writes the observer, a resumable checkpoint and
    /// the loss history.
    Train(CommonArgs),
    /// Scenario matrix of observers under noise scenarios.
    Eval(CommonArgs),
    /// Eigenvalue scaling sweep on a linear oracle.
    Sweep(CommonArgs),
    /// Per-initial-condition RMSE over a lattice.
    Genmap(CommonArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config { key: String, message: String },
    Divergence(String),
    Runtime(String),
}

impl CliError {
    fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Divergence(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    /// Single-line JSON description for stderr.
    pub fn line(&self) -> String {
        let v = match self {
            CliError::Config { key, message } => {
                serde_json::json!({"error": "config", "key": key, "message": message})
            }
            CliError::Divergence(m) => serde_json::json!({"error": "divergence", "message": m}),
            CliError::Runtime(m) => serde_json::json!({"error": "runtime", "message": m}),
        };
        v.to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Divergence { .. } | Error::NonFiniteLoss { .. } => CliError::Divergence(msg),
            Error::InvalidValue { key, message } => CliError::Config { key, message },
            Error::InvalidGrid(m) => CliError::config("grid", m),
            Error::NotHurwitz(_) => CliError::config("observer.g", msg),
            Error::DimensionMismatch { context, .. } => CliError::config(context, msg),
            Error::Json(_) => CliError::config("", msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses a config, naming the offending key on failure. Unknown-field
/// errors name the unknown key itself.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::config("", format!("invalid JSON: {e}")))?;
    match value.get("schema_version") {
        None => return Err(CliError::config("schema_version", "missing field `schema_version`")),
        Some(v) if v.as_u64() != Some(SCHEMA_VERSION as u64) => {
            return Err(CliError::config(
                "schema_version",
                format!("unsupported schema version {v}, expected {SCHEMA_VERSION}"),
            ))
        }
        Some(_) => {}
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut key = e.path().to_string();
        let message = e.inner().to_string();
        let message = message.split(" at line ").next().unwrap_or_default().to_string();
        if let Some(field) = message
            .strip_prefix("unknown field `")
            .and_then(|r| r.split('`').next())
        {
            if !(key == field || key.ends_with(&format!(".{field}"))) {
                key = if key == "." || key.is_empty() { field.to_string() } else { format!("{key}.{field}") };
            }
        }
        if key == "." {
            key.clear();
        }
        CliError::Config { key, message }
    })
}

/// A config file together with its directory, for resolving relative paths.
/// A parsed config plus the directory its relative paths resolve against.
pub struct Loaded<T> {
    pub cfg: T,
    pub dir: PathBuf,
}

impl<T: DeserializeOwned> Loaded<T> {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        let cfg = parse_config(&text)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { cfg, dir })
    }
}

fn resolve_existing(dir: &Path, p: &Path, key: &str) -> CliResult<PathBuf> {
    let full = if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
    if !full.is_file() {
        return Err(CliError::config(key, format!("file not found: {}", full.display())));
    }
    Ok(full)
}

fn output_dir(args: &CommonArgs, dir: &Path, configured: &Option<PathBuf>) -> CliResult<PathBuf> {
    let out = match (&args.out, configured) {
        (Some(o), _) => o.clone(),
        (None, Some(p)) if p.is_absolute() => p.clone(),
        (None, Some(p)) => dir.join(p),
        (None, None) => PathBuf::from("out"),
    };
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// System selector: a catalog name, or `linear` with `a` and `c` rows.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub name: String,
    #[serde(default)]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub c: Option<Vec<Vec<f64>>>,
    /// Initial-condition sampling box; defaults to the catalog box.
    #[serde(default)]
    pub domain: Option<BoxDomain>,
}

impl SystemConfig {
    pub fn build(&self) -> CliResult<SystemSpec> {
        let sys = match (self.name.as_str(), &self.a, &self.c) {
            ("linear", Some(a), Some(c)) => make_linear(matrix_from_rows(a)?, matrix_from_rows(c)?)?,
            ("linear", _, _) => return Err(CliError::config("system.a", "linear systems need `a` and `c`")),
            (name, None, None) => {
                by_name(name).ok_or_else(|| CliError::config("system.name", format!("unknown system `{name}`")))?
            }
            _ => return Err(CliError::config("system.a", "`a` and `c` are only accepted for `linear`")),
        };
        match &self.domain {
            Some(d) => {
                let d = BoxDomain::new(d.lo.clone(), d.hi.clone())
                    .map_err(|e| CliError::config("system.domain", e.to_string()))?;
                sys.with_domain(d).map_err(|e| CliError::config("system.domain", e.to_string()))
            }
            None => Ok(sys),
        }
    }
}

/// Explicit points plus `random` uniform draws from the system's box.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConditions {
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub random: usize,
}

impl InitialConditions {
    pub fn resolve(&self, sys: &SystemSpec, rng: &mut Rng) -> CliResult<Vec<Vec<f64>>> {
        let mut out = self.points.clone();
        if let Some(p) = out.iter().find(|p| p.len() != sys.n_x) {
            return Err(CliError::config(
                "initial_conditions.points",
                format!("point {p:?} has dimension {}, system has {}", p.len(), sys.n_x),
            ));
        }
        out.extend((0..self.random).map(|_| sys.domain.sample_uniform(rng)));
        if out.is_empty() {
            return Err(CliError::config("initial_conditions", "no initial conditions given"));
        }
        Ok(out)
    }
}

/// Architecture of a freshly initialised observer.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObserverInit {
    Kkl {
        /// Initial eigenvalues of `D`; the default has `d_z = n_y (n_x + 1)`.
        #[serde(default)]
        eigenvalues: Option<Vec<f64>>,
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        /// Also learn the forward map `T`.
        #[serde(default)]
        forward_map: bool,
    },
    Luenberger {
        a: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        g: Vec<Vec<f64>>,
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
}

impl ObserverInit {
    pub fn build(&self, sys: &SystemSpec, rng: &mut Rng) -> CliResult<Observer> {
        match self {
            ObserverInit::Kkl {
                eigenvalues,
                hidden,
                activation,
                forward_map,
            } => Ok(Observer::Kkl(KklObserver::init(
                sys.n_x,
                sys.n_y,
                eigenvalues.as_deref(),
                hidden,
                *activation,
                *forward_map,
                rng,
            )?)),
            ObserverInit::Luenberger {
                a,
                c,
                g,
                hidden,
                activation,
            } => {
                let (a, c, g) = (matrix_from_rows(a)?, matrix_from_rows(c)?, matrix_from_rows(g)?);
                let mut sizes = vec![a.nrows()];
                sizes.extend_from_slice(hidden);
                sizes.push(a.nrows());
                let ghat = Mlp::init(MlpSpec::new(sizes, *activation)?, rng)?;
                Ok(Observer::Luenberger(LuenbergerObserver::new(a, c, g, ghat)?))
            }
        }
    }
}

fn check_observer_fits(obs: &Observer, sys: &SystemSpec) -> CliResult<()> {
    if obs.n_x() != sys.n_x || obs.n_y() != sys.n_y {
        return Err(CliError::config(
            "observer",
            format!(
                "observer has n_x={}, n_y={} but the system has n_x={}, n_y={}",
                obs.n_x(),
                obs.n_y(),
                sys.n_x,
                sys.n_y
            ),
        ));
    }
    Ok(())
}

fn load_observer(path: &Path, key: &str) -> CliResult<Observer> {
    Observer::load(path).map_err(|e| CliError::config(key, format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    pub system: SystemConfig,
    pub grid: TimeGrid,
    pub initial_conditions: InitialConditions,
    #[serde(default)]
    pub noise: Vec<NoiseSpec>,
    #[serde(default)]
    pub excitation: ExcitationSpec,
    #[serde(default)]
    pub seed: u64,
    /// Optional observer checkpoint run on the measured outputs.
    #[serde(default)]
    pub observer: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub schema_version: u32,
    pub system: SystemConfig,
    pub grid: TimeGrid,
    pub n_trajectories: usize,
    pub observer: ObserverInit,
    pub train: TrainConfig,
    /// Write `checkpoint.json` every this many epochs (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverRef {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub label: String,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub excitation: ExcitationSpec,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub schema_version: u32,
    pub system: SystemConfig,
    pub grid: TimeGrid,
    pub initial_conditions: InitialConditions,
    pub observers: Vec<ObserverRef>,
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(default)]
    pub warmup: f64,
    #[serde(default)]
    pub seed: u64,
    /// Also write `trajectories/<observer>__<scenario>__<i>.csv`.
    #[serde(default)]
    pub write_trajectories: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d_base: Vec<f64>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    pub oracle: OracleConfig,
    pub grid: TimeGrid,
    pub k_values: Vec<f64>,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GenmapConfig {
    pub schema_version: u32,
    pub system: SystemConfig,
    pub grid: TimeGrid,
    pub observer: PathBuf,
    /// Box of initial conditions queried on a regular lattice.
    pub query: BoxDomain,
    /// Lattice points along `x1` and `x2`.
    pub resolution: [usize; 2],
    #[serde(default)]
    pub warmup: f64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Resumable training checkpoint: the observer and the optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCheckpoint {
    pub format_version: u32,
    pub observer: ObserverCheckpoint,
    pub state: TrainState,
}

impl TrainCheckpoint {
    pub fn new(obs: &Observer, state: &TrainState) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            observer: obs.into(),
            state: state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<(Observer, TrainState)> {
        let text = std::fs::read_to_string(path)?;
        let ck: TrainCheckpoint = serde_json::from_str(&text)
            .map_err(|e| CliError::config("resume_from", format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(CliError::config("resume_from", format!("unsupported checkpoint version {}", ck.format_version)));
        }
        Ok((Observer::try_from(ck.observer)?, ck.state))
    }
}

/// Parses `argv` and runs it, returning the process exit code. Errors are
/// printed to stderr as one JSON line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Genmap(a) => cmd_genmap(a),
    }
}

pub fn cmd_simulate(args: &CommonArgs) -> CliResult<()> {
    let Loaded { cfg, dir } = Loaded::<SimulateConfig>::read(&args.config)?;
    let sys = cfg.system.build()?;
    for (i, n) in cfg.noise.iter().enumerate() {
        n.validate().map_err(|e| CliError::config(format!("noise[{i}]"), e.to_string()))?;
    }
    cfg.excitation
        .validate()
        .map_err(|e| CliError::config("excitation", e.to_string()))?;
    if !cfg.excitation.is_none() && !sys.has_input_map() {
        return Err(CliError::config("excitation", format!("system `{}` takes no input", sys.name())));
    }
    let observer = match &cfg.observer {
        Some(p) => {
            let obs = load_observer(&resolve_existing(&dir, p, "observer")?, "observer")?;
            check_observer_fits(&obs, &sys)?;
            Some(obs)
        }
        None => None,
    };
    let out = output_dir(args, &dir, &cfg.out_dir)?;
    let mut rng = rng_from_seed(args.seed.unwrap_or(cfg.seed));
    let ics = cfg.initial_conditions.resolve(&sys, &mut rng)?;
    for (i, x0) in ics.iter().enumerate() {
        let traj = simulate_system(&sys, x0, &cfg.grid, &cfg.noise, &cfg.excitation, &mut rng)?;
        let mut w = create(&out.join(format!("trajectory_{i}.csv")))?;
        traj.write_csv(&mut w, "x")?;
        w.flush()?;
        if let Some(obs) = &observer {
            let y = traj.outputs.as_ref().expect("simulated outputs");
            let input = traj.inputs.as_ref().map(|u| InputSignal { sys: &sys, u });
            let run = run_observer(obs, y, &vec![0.0; obs.state_dim()], &cfg.grid, input)?;
            let mut w = create(&out.join(format!("estimate_{i}.csv")))?;
            run.estimate.write_csv(&mut w, "xhat")?;
            w.flush()?;
        }
    }
    Ok(())
}

/// Everything a training run needs, either fresh or restored from
/// `resume_from`.
pub struct TrainSetup {
    pub data: Dataset,
    pub config: TrainConfig,
    pub observer: Observer,
    pub state: TrainState,
}

/// Validates `cfg`, draws the dataset from the training seed and builds the
/// observer from seed + 1. `seed` overrides `train.seed`.
pub fn prepare_training(cfg: &TrainFileConfig, dir: &Path, seed: Option<u64>) -> CliResult<TrainSetup> {
    let sys = cfg.system.build()?;
    let mut tc = cfg.train.clone();
    if let Some(s) = seed {
        tc.seed = s;
    }
    tc.validate().map_err(|e| match CliError::from(e) {
        CliError::Config { key, message } => CliError::config(format!("train.{key}"), message),
        other => other,
    })?;
    if cfg.n_trajectories == 0 {
        return Err(CliError::config("n_trajectories", "must be >= 1"));
    }
    let resume = cfg
        .resume_from
        .as_ref()
        .map(|p| resolve_existing(dir, p, "resume_from"))
        .transpose()?;
    let (observer, state) = match resume {
        Some(p) => {
            let (obs, state) = TrainCheckpoint::load(&p)?;
            check_observer_fits(&obs, &sys)?;
            if state.epoch > tc.epochs {
                return Err(CliError::config(
                    "train.epochs",
                    format!("checkpoint is at epoch {}, beyond the configured {}", state.epoch, tc.epochs),
                ));
            }
            (obs, state)
        }
        None => {
            let obs = cfg.observer.build(&sys, &mut rng_from_seed(tc.seed.wrapping_add(1)))?;
            check_observer_fits(&obs, &sys)?;
            let n = obs.n_params();
            (obs, TrainState::new(&tc, n))
        }
    };
    let data = generate_dataset(&sys, cfg.n_trajectories, &cfg.grid, &mut rng_from_seed(tc.seed), tc.train_noise)?;
    Ok(TrainSetup { data, config: tc, observer, state })
}

pub fn cmd_train(args: &CommonArgs) -> CliResult<()> {
    let Loaded { cfg, dir } = Loaded::<TrainFileConfig>::read(&args.config)?;
    let TrainSetup { data, config: tc, observer: obs, state } = prepare_training(&cfg, &dir, args.seed)?;
    let out = output_dir(args, &dir, &cfg.out_dir)?;
    let ck_path = out.join("checkpoint.json");
    let every = cfg.checkpoint_every;
    let (obs, state) = train_from(obs, state, &data, &tc, |o, s| {
        if every > 0 && s.epoch % every == 0 {
            TrainCheckpoint::new(o, s)
                .save(&ck_path)
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
        Ok(())
    })?;
    TrainCheckpoint::new(&obs, &state).save(&ck_path)?;
    obs.save(&out.join("observer.json"))?;
    let mut w = create(&out.join("history.csv"))?;
    write_history_csv(&mut w, &state.history)?;
    w.flush()?;
    if let Some(k) = obs.as_kkl() {
        let eig: Vec<String> = k.eigenvalues().iter().map(|v| fmt_f64(*v)).collect();
        println!("eigenvalues {}", eig.join(","));
    }
    if let Some(l) = state.history.last() {
        println!("final loss {}", fmt_f64(l.total));
    }
    Ok(())
}

fn write_pair_csv(path: &Path, truth: &Trajectory, est: &Trajectory) -> crate::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = truth.states.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=n).map(|i| format!("xhat{i}")));
    if let Some(y) = &truth.outputs {
        header.extend((1..=y.dim()).map(|i| format!("y{i}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..truth.grid.len() {
        let mut row = vec![fmt_f64(truth.grid.time(i))];
        row.extend(truth.states.row(i).iter().map(|v| fmt_f64(*v)));
        row.extend(est.states.row(i).iter().map(|v| fmt_f64(*v)));
        if let Some(y) = &truth.outputs {
            row.extend(y.row(i).iter().map(|v| fmt_f64(*v)));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn is_plain_label(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c))
}

pub fn cmd_eval(args: &CommonArgs) -> CliResult<()> {
    let Loaded { cfg, dir } = Loaded::<EvalConfig>::read(&args.config)?;
    let sys = cfg.system.build()?;
    if cfg.observers.is_empty() {
        return Err(CliError::config("observers", "at least one observer is required"));
    }
    if cfg.scenarios.is_empty() {
        return Err(CliError::config("scenarios", "at least one scenario is required"));
    }
    let mut observers = Vec::with_capacity(cfg.observers.len());
    for (i, r) in cfg.observers.iter().enumerate() {
        let key = format!("observers[{i}].path");
        if !is_plain_label(&r.id) {
            return Err(CliError::config(format!("observers[{i}].id"), "use letters, digits, `_`, `-` or `.`"));
        }
        let obs = load_observer(&resolve_existing(&dir, &r.path, &key)?, &key)?;
        check_observer_fits(&obs, &sys)?;
        observers.push((r.id.clone(), obs));
    }
    let mut scenarios = Vec::with_capacity(cfg.scenarios.len());
    for (i, s) in cfg.scenarios.iter().enumerate() {
        if !is_plain_label(&s.label) {
            return Err(CliError::config(format!("scenarios[{i}].label"), "use letters, digits, `_`, `-` or `.`"));
        }
        if !s.excitation.is_none() && !sys.has_input_map() {
            return Err(CliError::config(format!("scenarios[{i}].excitation"), "system takes no input"));
        }
        scenarios.push(Scenario {
            label: s.label.clone(),
            noise: s.noise,
            excitation: s.excitation,
        });
    }
    if !(cfg.warmup >= 0.0 && cfg.warmup < cfg.grid.horizon()) {
        return Err(CliError::config("warmup", "must lie in [0, tf - t0)"));
    }
    let out = output_dir(args, &dir, &cfg.out_dir)?;
    let mut rng = rng_from_seed(args.seed.unwrap_or(cfg.seed));
    let ics = cfg.initial_conditions.resolve(&sys, &mut rng)?;
    let traj_dir = out.join("trajectories");
    if cfg.write_trajectories {
        std::fs::create_dir_all(&traj_dir)?;
    }
    let mut sink = |o: &str, s: &str, i: usize, truth: &Trajectory, est: &Trajectory| {
        let p = traj_dir.join(format!("{o}__{s}__{i}.csv"));
        write_pair_csv(&p, truth, est)?;
        Ok(p)
    };
    let sink: Option<&mut crate::eval::TrajectorySink<'_>> =
        if cfg.write_trajectories { Some(&mut sink) } else { None };
    let rows = scenario_matrix_with(&observers, &sys, &ics, &scenarios, &cfg.grid, cfg.warmup, &mut rng, sink)?;
    let mut w = create(&out.join("scenario_matrix.csv"))?;
    write_scenario_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep(args: &CommonArgs) -> CliResult<()> {
    let Loaded { cfg, dir } = Loaded::<SweepConfig>::read(&args.config)?;
    let o = &cfg.oracle;
    let a = matrix_from_rows(&o.a)?;
    let c = matrix_from_rows(&o.c)?;
    if o.x0.len() != a.nrows() {
        return Err(CliError::config("oracle.x0", "dimension differs from `a`"));
    }
    if cfg.k_values.is_empty() {
        return Err(CliError::config("k_values", "at least one k is required"));
    }
    if let Some(k) = cfg.k_values.iter().find(|k| !(**k >= 1.0 && k.is_finite())) {
        return Err(CliError::config("k_values", format!("{k} is not a finite value >= 1")));
    }
    if o.d_base.iter().any(|l| !(*l < 0.0)) {
        return Err(CliError::config("oracle.d_base", "eigenvalues must be negative"));
    }
    cfg.noise.validate().map_err(|e| CliError::config("noise", e.to_string()))?;
    let oracle = LinearOracle {
        f: DMatrix::from_element(o.d_base.len(), c.nrows(), 1.0),
        a,
        c,
        d_base: o.d_base.clone(),
        x0: o.x0.clone(),
    };
    let out = output_dir(args, &dir, &cfg.out_dir)?;
    let rng = rng_from_seed(args.seed.unwrap_or(cfg.seed));
    let points = robustness_sweep(&oracle, &cfg.k_values, cfg.noise, &cfg.grid, &rng)?;
    let mut w = create(&out.join("sweep.csv"))?;
    write_sweep_csv(&mut w, &points)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_genmap(args: &CommonArgs) -> CliResult<()> {
    let Loaded { cfg, dir } = Loaded::<GenmapConfig>::read(&args.config)?;
    let sys = cfg.system.build()?;
    let obs = load_observer(&resolve_existing(&dir, &cfg.observer, "observer")?, "observer")?;
    check_observer_fits(&obs, &sys)?;
    let query = BoxDomain::new(cfg.query.lo.clone(), cfg.query.hi.clone())
        .map_err(|e| CliError::config("query", e.to_string()))?;
    let ics = lattice(&query, cfg.resolution[0], cfg.resolution[1])
        .map_err(|e| CliError::config("resolution", e.to_string()))?;
    if !(cfg.warmup >= 0.0 && cfg.warmup < cfg.grid.horizon()) {
        return Err(CliError::config("warmup", "must lie in [0, tf - t0)"));
    }
    let out = output_dir(args, &dir, &cfg.out_dir)?;
    let map = generalization_map(&obs, &sys, &ics, &cfg.grid, cfg.warmup)?;
    let mut w = create(&out.join("genmap.csv"))?;
    write_genmap_csv(&mut w, &ics, &map)?;
    w.flush()?;
    Ok(())
}
