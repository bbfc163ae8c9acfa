//! Run configuration: a TOML file layered over the desk defaults of its
//! system, then `key.path=value` overrides.

use std::path::Path;

use opssplit_core::datagen::{GenConfig, System};
use opssplit_core::integrate::IntegratorConfig;
use opssplit_core::metrics::TheoremSetup;
use opssplit_core::rhs::StateWeight;
use opssplit_core::setup::{DynamicsSpec, ModelSpec, TermSpec};
use opssplit_core::train::TrainConfig;
use opssplit_core::dynamics::Mode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhsConfig {
    pub fd_order: usize,
    pub pressure_weight: StateWeight,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<TermSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Best,
    Final,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Best => "best",
            Which::Final => "final",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub lr_period: usize,
    pub rollout: usize,
    pub batch: usize,
    pub windows_per_epoch: usize,
    pub test_windows: usize,
    pub loss_p: f64,
    pub loss_eps: f64,
    /// Training trajectories used; 0 keeps all.
    pub n_train: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Which,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GenConfig,
    pub model: ModelSpec,
    pub rhs: RhsConfig,
    pub integrator: IntegratorConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub theorem: TheoremSetup,
}

impl RunConfig {
    pub fn desk(system: System) -> Self {
        let t = TrainConfig::desk(Mode::Opssplit, 0);
        Self {
            seed: 1,
            data: GenConfig::desk(system),
            model: ModelSpec::desk(system),
            rhs: RhsConfig {
                fd_order: 2,
                pressure_weight: StateWeight::LnDensity,
                terms: Vec::new(),
            },
            integrator: IntegratorConfig::default(),
            train: TrainSection {
                epochs: t.epochs,
                lr: t.lr,
                lr_period: t.lr_period,
                rollout: t.rollout,
                batch: t.batch,
                windows_per_epoch: t.windows_per_epoch,
                test_windows: t.test_windows,
                loss_p: t.loss_p,
                loss_eps: t.loss_eps,
                n_train: 0,
            },
            eval: EvalSection { checkpoint: Which::Final },
            theorem: TheoremSetup::default(),
        }
    }

    pub fn system(&self) -> System {
        self.data.system
    }

    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode,
            epochs: t.epochs,
            lr: t.lr,
            lr_period: t.lr_period,
            rollout: t.rollout,
            batch: t.batch,
            windows_per_epoch: t.windows_per_epoch,
            test_windows: t.test_windows,
            loss_p: t.loss_p,
            loss_eps: t.loss_eps,
            seed: opssplit_core::rng::derive_seed(self.seed, "shuffle"),
            warm_start: Default::default(),
        }
    }

    /// Dynamics description for a dataset grid with spacing `dx = dy`.
    pub fn dynamics_spec(&self, grid: (usize, usize), dx: f64, dy: f64) -> DynamicsSpec {
        DynamicsSpec {
            system: self.system(),
            model: self.model.clone(),
            fd_order: self.rhs.fd_order,
            integrator: self.integrator.clone(),
            pressure_weight: self.rhs.pressure_weight,
            terms: self.rhs.terms.clone(),
            coefficient: self.data.train_ranges.coefficient,
            grid,
            dx,
            dy,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.integrator.validate()?;
        self.train_config(Mode::Ar).validate()?;
        if ![2, 4, 6, 8].contains(&self.rhs.fd_order) {
            return Err(CliError::config(format!("fd_order {} is not one of 2, 4, 6, 8", self.rhs.fd_order)));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Apply `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
fn set_path(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override '{assignment}' is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override '{path}' descends into a non-table")))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| CliError::config(format!("override '{path}' descends into a non-table")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Resolve a configuration from optional file text plus overrides.
pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut user: toml::Value = match text {
        Some(t) => toml::from_str(t).map_err(|e| CliError::config(format!("config: {e}")))?,
        None => toml::Value::Table(Default::default()),
    };
    for o in overrides {
        set_path(&mut user, o)?;
    }
    let system = match user.get("data").and_then(|d| d.get("system")) {
        None => System::Incompressible,
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| CliError::config(format!("data.system: {e}")))?,
    };
    let mut base = toml::Value::try_from(RunConfig::desk(system))
        .map_err(|e| CliError::config(format!("default config: {e}")))?;
    merge(&mut base, user);
    let cfg: RunConfig = base.try_into().map_err(|e| CliError::config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    resolve(text.as_deref(), overrides)
}

/// First 16 hex digits of SHA-256 over the canonical JSON of the command,
/// its arguments and the resolved configuration (or the part of it the
/// command reads).
pub fn config_hash(command: &str, args: &serde_json::Value, cfg: &serde_json::Value) -> String {
    let doc = serde_json::json!({ "command": command, "args": args, "config": cfg });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
