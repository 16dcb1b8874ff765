//! Run configuration: a JSON file, flag shortcuts and dotted-key overrides
//! merged into one value, then deserialized strictly.

use std::path::{Path, PathBuf};

use boltzflow::odeint::SolverConfig;
use boltzflow::targets::TargetSpec;
use boltzflow::training::TrainConfig;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const DEFAULT_OUT: &str = "boltzflow-out";
pub const CHECKPOINT_FILE: &str = "checkpoint.bcrv";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Training settings; `train.seed` is replaced by the top-level seed.
    #[serde(default)]
    pub train: TrainConfig,
    /// Solver for sampling and evaluation.
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub teleport: TeleportConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Defaults to `<out>/checkpoint.bcrv`.
    pub checkpoint: Option<PathBuf>,
    pub n: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { checkpoint: None, n: 50_000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub checkpoint: Option<PathBuf>,
    /// Model samples per repeat.
    pub n: usize,
    pub repeats: usize,
    /// Exact target samples for the energy distance; defaults to `n`.
    pub reference_n: Option<usize>,
    /// Exact target samples for the NLL; defaults to `n`.
    pub nll_n: Option<usize>,
    pub energy_distance: bool,
    pub nll: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            n: 50_000,
            repeats: 10,
            reference_n: None,
            nll_n: None,
            energy_distance: true,
            nll: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleportConfig {
    pub m: Vec<f64>,
    /// Times at which density curves are tabulated.
    pub density_t: Vec<f64>,
    /// Times at which `|v_t|^2` is evaluated.
    pub vnorm_t: Vec<f64>,
    /// Per-panel trapezoid error target of the density grid.
    pub panel_tol: f64,
    pub max_spacing: f64,
    /// Grid extent beyond `0` and `m`.
    pub margin: f64,
}

impl Default for TeleportConfig {
    fn default() -> Self {
        let vnorm_t = (0..=200).map(|k| 0.999 * k as f64 / 200.0).chain([0.9995, 0.9999]).collect();
        Self {
            m: vec![1.0, 5.0, 15.0, 50.0],
            density_t: vec![0.0, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0],
            vnorm_t,
            panel_tol: 1e-11,
            max_spacing: 0.25,
            margin: 40.0,
        }
    }
}

impl RunConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn require_target(&self) -> Result<&TargetSpec, CliError> {
        self.target.as_ref().ok_or_else(|| CliError::Config("missing required key `target`".into()))
    }
}

/// Parse an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `root.a.b.c = value` for `path = "a.b.c"`, creating objects on the way.
pub fn set_dotted(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key `{path}`")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(CliError::Config(format!(
                    "override `{path}`: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*part).to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

/// Split dotted `--a.b=v` / `--a.b v` flags out of `args`.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|name| name.contains('.')));
        match key {
            Some(k) => match k.split_once('=') {
                Some((name, value)) => overrides.push((name.to_string(), value.to_string())),
                None => {
                    let value = it.next().ok_or_else(|| CliError::Config(format!("override `--{k}` has no value")))?;
                    overrides.push((k.to_string(), value));
                }
            },
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

pub struct Shortcuts<'a> {
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
}

/// Build the run configuration from a file plus flag overrides.
pub fn load(flags: &Shortcuts<'_>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut root = match flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::Config("config root must be a JSON object".into()));
    }
    if let Some(seed) = flags.seed {
        set_dotted(&mut root, "seed", Value::from(seed))?;
    }
    if let Some(out) = flags.out {
        set_dotted(&mut root, "out", Value::String(out.to_string_lossy().into_owned()))?;
    }
    for (key, raw) in overrides {
        set_dotted(&mut root, key, parse_value(raw))?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.train.seed = cfg.seed;
    cfg.solver.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}
