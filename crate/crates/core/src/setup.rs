//! Assemble AR, NODE and OpsSplit dynamics for a system from one model
//! description, so that the modes differ only in how the learned parts
//! are deployed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{NormStats, System};
use crate::dynamics::{Dynamics, Mode};
use crate::error::{CoreError, Result};
use crate::integrate::IntegratorConfig;
use crate::neural::{build_model, Activation, Architecture, OperatorConfig};
use crate::rhs::{
    build_compressible_rhs, build_incompressible_rhs, build_monolithic_rhs, OperatorTerm, SplitRhs, StateWeight,
};
use crate::rng;
use crate::stencil::{make_stencil, StencilKind};

fn default_kernel() -> usize {
    3
}

fn default_activation() -> Activation {
    Activation::Gelu
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub modes: usize,
    pub width: usize,
    /// Layers of the single AR / NODE model.
    pub layers: usize,
    /// Layers of each OpsSplit per-operator model.
    pub split_layers: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn desk(system: System) -> Self {
        let (layers, split_layers) = match system {
            System::Incompressible => (3, 3),
            System::Compressible => (6, 3),
        };
        Self {
            arch: Architecture::Spectral,
            modes: 8,
            width: 16,
            layers,
            split_layers,
            kernel: 3,
            activation: Activation::Gelu,
        }
    }

    pub fn operator(&self, in_channels: usize, out_channels: usize, layers: usize) -> OperatorConfig {
        OperatorConfig {
            arch: self.arch,
            in_channels,
            out_channels,
            modes: self.modes,
            width: self.width,
            layers,
            kernel: self.kernel,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermSpecKind {
    Fixed,
    Learned,
}

/// One user-declared split term. Fixed terms name a stencil operator,
/// learned terms name a model slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub kind: TermSpecKind,
    pub operator: String,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    pub coefficient: f64,
    #[serde(default)]
    pub coefficient_name: Option<String>,
    #[serde(default)]
    pub weight: Option<StateWeight>,
    #[serde(default)]
    pub weight_channel: usize,
}

/// Everything needed to build the dynamics of one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsSpec {
    pub system: System,
    pub model: ModelSpec,
    pub fd_order: usize,
    pub integrator: IntegratorConfig,
    pub pressure_weight: StateWeight,
    /// Replaces the system's default split when non-empty.
    pub terms: Vec<TermSpec>,
    /// Training value of ν or γ.
    pub coefficient: f64,
    pub grid: (usize, usize),
    pub dx: f64,
    pub dy: f64,
}

fn slot_names(system: System) -> Vec<String> {
    match system {
        System::Incompressible => vec!["conv".into()],
        System::Compressible => vec!["div".into(), "conv".into()],
    }
}

fn custom_rhs(spec: &DynamicsSpec, channels: Vec<String>) -> Result<(SplitRhs, Vec<String>, Vec<OperatorConfig>)> {
    let mut slots: Vec<String> = Vec::new();
    let mut configs: Vec<OperatorConfig> = Vec::new();
    let mut terms = Vec::with_capacity(spec.terms.len());
    for (k, t) in spec.terms.iter().enumerate() {
        let term = match t.kind {
            TermSpecKind::Fixed => {
                let kind: StencilKind = serde_json::from_value(serde_json::Value::String(t.operator.clone()))
                    .map_err(|_| CoreError::Config(format!("term {k}: unknown stencil operator '{}'", t.operator)))?;
                let kernel = make_stencil(kind, spec.fd_order, spec.dx, spec.dy)?;
                OperatorTerm::fixed(kernel, t.coefficient, t.inputs.clone(), t.outputs.clone())
            }
            TermSpecKind::Learned => {
                let cfg = spec.model.operator(t.inputs.len(), t.outputs.len(), spec.model.split_layers);
                let slot = match slots.iter().position(|s| *s == t.operator) {
                    Some(i) => {
                        if configs[i] != cfg {
                            return Err(CoreError::Config(format!(
                                "term {k}: slot '{}' reused with different channel counts",
                                t.operator
                            )));
                        }
                        i
                    }
                    None => {
                        slots.push(t.operator.clone());
                        configs.push(cfg);
                        slots.len() - 1
                    }
                };
                OperatorTerm::learned(slot, t.coefficient, t.inputs.clone(), t.outputs.clone())
            }
        };
        let term = match &t.coefficient_name {
            Some(n) => term.named(n),
            None => term,
        };
        terms.push(match t.weight {
            Some(w) => term.weighted(w, t.weight_channel),
            None => term,
        });
    }
    let rhs = SplitRhs::new(channels, terms);
    rhs.validate()?;
    Ok((rhs, slots, configs))
}

/// Build the dynamics of `mode`; model initialisation is seeded per slot
/// from `seed`. With `stats`, fixed terms act on normalised states and
/// one integrator unit spans `frame_dt`.
pub fn build_dynamics(
    spec: &DynamicsSpec,
    mode: Mode,
    stats: Option<&NormStats>,
    frame_dt: f64,
    seed: u64,
) -> Result<Dynamics> {
    spec.integrator.validate()?;
    let channels = spec.system.channels();
    let c = channels.len();
    let init = |cfg: &OperatorConfig, slot: &str| build_model(cfg, spec.grid, rng::derive_seed(seed, slot));
    let scaling = match stats {
        Some(s) => s.frame_scaling(frame_dt),
        None => crate::rhs::FrameScaling::identity(c),
    };
    match mode {
        Mode::Ar => {
            let cfg = spec.model.operator(c, c, spec.model.layers);
            Ok(Dynamics::autoregressive(init(&cfg, "next")?))
        }
        Mode::Node => {
            let cfg = spec.model.operator(c, c, spec.model.layers);
            let rhs = build_monolithic_rhs(channels).with_scaling(scaling);
            Ok(Dynamics::ode(mode, vec!["rhs".into()], vec![init(&cfg, "rhs")?], rhs, spec.integrator.clone()))
        }
        Mode::Opssplit => {
            let (rhs, slots, configs) = if spec.terms.is_empty() {
                let rhs = match spec.system {
                    System::Incompressible => build_incompressible_rhs(spec.coefficient, spec.fd_order, spec.dx, spec.dy)?,
                    System::Compressible => build_compressible_rhs(
                        spec.coefficient,
                        spec.fd_order,
                        spec.dx,
                        spec.dy,
                        spec.pressure_weight,
                    )?,
                };
                let l = spec.model.split_layers;
                let configs = match spec.system {
                    System::Incompressible => vec![spec.model.operator(2, 2, l)],
                    System::Compressible => vec![spec.model.operator(3, 1, l), spec.model.operator(2, 2, l)],
                };
                (rhs, slot_names(spec.system), configs)
            } else {
                custom_rhs(spec, channels)?
            };
            let models = slots
                .iter()
                .zip(&configs)
                .map(|(s, cfg)| init(cfg, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(Dynamics::ode(mode, slots, models, rhs.with_scaling(scaling), spec.integrator.clone()))
        }
    }
}

/// Parameter counts per mode; errors when any pair differs by more than
/// `tolerance` relative to the larger.
pub fn check_budget(counts: &BTreeMap<Mode, usize>, tolerance: f64) -> Result<()> {
    let max = counts.values().copied().max().unwrap_or(0) as f64;
    let min = counts.values().copied().min().unwrap_or(0) as f64;
    if max > 0.0 && (max - min) / max > tolerance {
        return Err(CoreError::Config(format!(
            "parameter budgets differ by more than {:.0}%: {counts:?}",
            100.0 * tolerance
        )));
    }
    Ok(())
}
