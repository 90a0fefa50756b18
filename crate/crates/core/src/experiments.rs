//! Experiment presets, config resolution and result files.
//!
//! A run resolves a flat JSON object of [`WorldConfig`] keys from four
//! layers (defaults, experiment preset, config file, command-line
//! overrides; later wins). A key whose value is an array becomes a sweep
//! axis; a scalar for a preset axis key collapses that axis.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::sim::{ConfigError, SimError, World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SourceSeek,
    Coverage,
    RcSweep,
    CommsFailure,
}

/// When a run stops before `t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Every robot knows a source region.
    SourceFound,
    FullCoverage,
    /// Run to `t_max`, noting when coverage first reaches 1.
    Never,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Self::SourceSeek, Self::Coverage, Self::RcSweep, Self::CommsFailure];

    pub fn name(self) -> &'static str {
        match self {
            Self::SourceSeek => "source-seek",
            Self::Coverage => "coverage",
            Self::RcSweep => "rc-sweep",
            Self::CommsFailure => "comms-failure",
        }
    }

    pub fn stop_rule(self) -> StopRule {
        match self {
            Self::SourceSeek => StopRule::SourceFound,
            Self::CommsFailure => StopRule::FullCoverage,
            Self::Coverage | Self::RcSweep => StopRule::Never,
        }
    }

    /// Scalar settings layered over the defaults.
    pub fn preset(self) -> Map<String, Value> {
        let exploration = || {
            serde_json::json!({
                "d": 200.0, "init": "random", "sigma_psi": 0.1, "sigma_i": 1000.0,
                "r_c": 50.0, "n_r": 20, "t_max": 1000.0,
            })
        };
        let v = match self {
            Self::SourceSeek => serde_json::json!({
                "d": 100.0, "init": "corner", "sigma_psi": 0.01, "sigma_i": 0.5,
                "require_source": true, "t_max": 1000.0,
            }),
            Self::Coverage | Self::RcSweep => exploration(),
            Self::CommsFailure => {
                let mut v = exploration();
                v["failure_mode"] = "silent".into();
                v["t_max"] = 2000.0.into();
                v
            }
        };
        match v {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }

    /// Default sweep grid, outermost axis first.
    pub fn axes(self) -> Vec<(String, Vec<Value>)> {
        let axis = |k: &str, v: Value| (k.to_string(), v.as_array().cloned().unwrap_or_default());
        match self {
            Self::SourceSeek => vec![
                axis("n_r", serde_json::json!([5, 10, 15, 20])),
                axis("r_c", serde_json::json!([20.0, 40.0, 60.0])),
            ],
            Self::Coverage => vec![axis("n_r", serde_json::json!([5, 10, 20]))],
            Self::RcSweep => vec![
                axis("r_c", serde_json::json!([20.0, 50.0, 100.0])),
                axis("init", serde_json::json!(["corner", "random"])),
            ],
            Self::CommsFailure => vec![axis("alpha", serde_json::json!([0.0, 0.25, 0.5, 0.75, 1.0]))],
        }
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}; expected one of source-seek, coverage, rc-sweep, comms-failure"))
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bad configuration: {0}")]
    Resolve(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

impl ExperimentError {
    /// Whether the run was refused before simulating.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Resolve(_) | Self::Sim(SimError::Config(_)))
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::Sim(SimError::NumericalAbort { .. }))
    }
}

fn io_error(path: &Path) -> impl Fn(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses `key=value`. The value is read as JSON where possible; a
/// comma-separated list becomes an array (a sweep), anything else a string.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("override {s:?} is not key=value"))?;
    let scalar = |t: &str| serde_json::from_str::<Value>(t.trim()).unwrap_or_else(|_| Value::String(t.trim().to_string()));
    let value = match serde_json::from_str::<Value>(raw) {
        Ok(v) => v,
        Err(_) if raw.contains(',') => Value::Array(raw.split(',').map(scalar).collect()),
        Err(_) => scalar(raw),
    };
    Ok((key.trim().to_string(), value))
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub name: String,
    pub values: Vec<(String, Value)>,
    pub config: WorldConfig,
}

/// A fully resolved experiment.
#[derive(Debug, Clone, Serialize)]
pub struct Plan {
    pub experiment: Experiment,
    pub base: Map<String, Value>,
    pub axes: Vec<(String, Vec<Value>)>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn display_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Plan {
    /// Resolves the config layers. `seeds` of `None` means the config's own
    /// `seed` if one was given, else [`DEFAULT_SEEDS`].
    pub fn resolve(
        experiment: Experiment,
        file: Option<Map<String, Value>>,
        overrides: &[(String, Value)],
        seeds: Option<Vec<u64>>,
    ) -> Result<Self, ExperimentError> {
        let defaults = match serde_json::to_value(WorldConfig::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serialises to an object"),
        };
        let mut base = defaults;
        let mut axes = experiment.axes();
        let mut explicit_seed = None;
        let layers = std::iter::once(experiment.preset())
            .chain(file)
            .chain(std::iter::once(overrides.iter().cloned().collect::<Map<_, _>>()));
        for (i, layer) in layers.enumerate() {
            for (key, value) in layer {
                if !base.contains_key(&key) {
                    return Err(ExperimentError::Resolve(format!("unknown key {key:?}")));
                }
                if i == 0 {
                    // Preset scalars sit under the preset's own axes.
                    base.insert(key, value);
                    continue;
                }
                if key == "seed" {
                    explicit_seed = value.as_u64();
                }
                axes.retain(|(k, _)| *k != key);
                match value {
                    Value::Array(values) if !values.is_empty() => axes.push((key, values)),
                    Value::Array(_) => return Err(ExperimentError::Resolve(format!("empty sweep for {key:?}"))),
                    scalar => {
                        base.insert(key, scalar);
                    }
                }
            }
        }
        let seeds = seeds.or(explicit_seed.map(|s| vec![s])).unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
        if seeds.is_empty() {
            return Err(ExperimentError::Resolve("no seeds".into()));
        }
        let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for (key, values) in &axes {
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut c = prefix.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        let cells = combos
            .into_iter()
            .map(|values| {
                let mut map = base.clone();
                for (k, v) in &values {
                    map.insert(k.clone(), v.clone());
                }
                let config: WorldConfig =
                    serde_json::from_value(Value::Object(map)).map_err(|e| ExperimentError::Resolve(e.to_string()))?;
                config.validate()?;
                let name = if values.is_empty() {
                    "base".to_string()
                } else {
                    values.iter().map(|(k, v)| format!("{k}-{}", display_value(v))).collect::<Vec<_>>().join("_")
                };
                Ok(Cell { name, values, config })
            })
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        Ok(Self {
            experiment,
            base,
            axes,
            seeds,
            cells,
        })
    }

    pub fn cell(&self, name: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.name == name)
    }
}

/// Result of one (cell, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub cell: String,
    pub seed: u64,
    /// Source found (source-seek) or full coverage (others); `None` when
    /// censored at `t_max`.
    pub completion_time: Option<f64>,
    pub final_t: f64,
    pub final_coverage: f64,
    pub final_rms_psi: f64,
    pub min_distance: f64,
    pub max_speed: f64,
    pub metrics_csv: String,
    pub trajectory_csv: String,
    pub config: WorldConfig,
}

/// Simulates one cell for one seed.
pub fn run(experiment: Experiment, cell: &Cell, seed: u64) -> Result<Outcome, ExperimentError> {
    let config = WorldConfig { seed, ..cell.config.clone() };
    let mut world = World::new(config.clone())?;
    let completion_time = match experiment.stop_rule() {
        StopRule::SourceFound => {
            let mut t = None;
            world.run_until(|m| {
                t = Some(m.t);
                m.done
            })?
            .then_some(t)
            .flatten()
        }
        StopRule::FullCoverage => {
            let mut t = None;
            world.run_until(|m| {
                t = Some(m.t);
                m.coverage >= 1.0
            })?
            .then_some(t)
            .flatten()
        }
        StopRule::Never => {
            world.run_until(|_| false)?;
            world.metrics().iter().find(|m| m.coverage >= 1.0).map(|m| m.t)
        }
    };
    // A run that reached t_max reports its state at t_max.
    let last = match world.metrics().last() {
        Some(m) if world.step_count() < world.config().total_steps() => m.clone(),
        _ => world.current_metrics(),
    };
    let safety = world.safety();
    Ok(Outcome {
        cell: cell.name.clone(),
        seed,
        completion_time,
        final_t: last.t,
        final_coverage: last.coverage,
        final_rms_psi: last.rms_psi,
        min_distance: safety.min_distance,
        max_speed: safety.max_speed,
        metrics_csv: world.metrics_csv(),
        trajectory_csv: world.trajectory_csv(),
        config,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-cell aggregate over seeds. Censored runs count at `t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub cell: String,
    pub runs: usize,
    pub censored: usize,
    pub completion_mean: f64,
    pub completion_std: f64,
    pub rms_mean: f64,
    pub rms_std: f64,
    pub min_distance: f64,
    pub max_speed: f64,
}

pub fn summarize(cell: &Cell, outcomes: &[Outcome]) -> Summary {
    let mine: Vec<&Outcome> = outcomes.iter().filter(|o| o.cell == cell.name).collect();
    let times: Vec<f64> = mine.iter().map(|o| o.completion_time.unwrap_or(o.config.t_max)).collect();
    let rms: Vec<f64> = mine.iter().map(|o| o.final_rms_psi).collect();
    let (completion_mean, completion_std) = mean_std(&times);
    let (rms_mean, rms_std) = mean_std(&rms);
    Summary {
        cell: cell.name.clone(),
        runs: mine.len(),
        censored: mine.iter().filter(|o| o.completion_time.is_none()).count(),
        completion_mean,
        completion_std,
        rms_mean,
        rms_std,
        min_distance: mine.iter().map(|o| o.min_distance).fold(f64::INFINITY, f64::min),
        max_speed: mine.iter().map(|o| o.max_speed).fold(0.0, f64::max),
    }
}

fn axis_header(plan: &Plan) -> String {
    plan.axes.iter().map(|(k, _)| format!("{k},")).collect()
}

fn axis_values(cell: &Cell) -> String {
    cell.values.iter().map(|(_, v)| format!("{},", display_value(v))).collect()
}

pub fn cells_csv(plan: &Plan, outcomes: &[Outcome]) -> String {
    let mut out = format!(
        "cell,{}seed,completion_time,censored,final_t,final_coverage,final_rms_psi,min_distance,max_speed\n",
        axis_header(plan)
    );
    for cell in &plan.cells {
        for o in outcomes.iter().filter(|o| o.cell == cell.name) {
            let time = o.completion_time.map(|t| format!("{t:.1}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{}{},{},{},{:.1},{:.6},{:.6},{:.6},{:.6}",
                cell.name,
                axis_values(cell),
                o.seed,
                time,
                u8::from(o.completion_time.is_none()),
                o.final_t,
                o.final_coverage,
                o.final_rms_psi,
                o.min_distance,
                o.max_speed
            );
        }
    }
    out
}

pub fn summary_csv(plan: &Plan, outcomes: &[Outcome]) -> String {
    let mut out = format!(
        "cell,{}runs,censored,completion_mean,completion_std,rms_psi_mean,rms_psi_std,min_distance,max_speed\n",
        axis_header(plan)
    );
    for cell in &plan.cells {
        let s = summarize(cell, outcomes);
        if s.runs == 0 {
            continue;
        }
        let _ = writeln!(
            out,
            "{},{}{},{},{:.1},{:.1},{:.6},{:.6},{:.6},{:.6}",
            cell.name,
            axis_values(cell),
            s.runs,
            s.censored,
            s.completion_mean,
            s.completion_std,
            s.rms_mean,
            s.rms_std,
            s.min_distance,
            s.max_speed
        );
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_error(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serialises") + "\n"
}

/// Runs every cell and seed, writing results under `out`:
/// `config.json`, `cells.csv`, `summary.csv` and, per run,
/// `runs/<cell>/seed-<s>/{config.json,metrics.csv,trajectory.csv}`.
pub fn execute(plan: &Plan, out: &Path, mut progress: impl FnMut(&Outcome)) -> Result<Vec<Outcome>, ExperimentError> {
    fs::create_dir_all(out).map_err(io_error(out))?;
    write(&out.join("config.json"), &to_json(plan))?;
    let mut outcomes = Vec::new();
    for cell in &plan.cells {
        for &seed in &plan.seeds {
            let o = run(plan.experiment, cell, seed)?;
            let dir = out.join("runs").join(&cell.name).join(format!("seed-{seed}"));
            fs::create_dir_all(&dir).map_err(io_error(&dir))?;
            write(&dir.join("config.json"), &to_json(&o.config))?;
            write(&dir.join("metrics.csv"), &o.metrics_csv)?;
            write(&dir.join("trajectory.csv"), &o.trajectory_csv)?;
            progress(&o);
            outcomes.push(o);
        }
    }
    write(&out.join("cells.csv"), &cells_csv(plan, &outcomes))?;
    write(&out.join("summary.csv"), &summary_csv(plan, &outcomes))?;
    Ok(outcomes)
}
