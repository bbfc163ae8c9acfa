//! Split right-hand sides: sums of fixed finite-difference terms and
//! learned operator terms, evaluated on a tape.
//!
//! The state may be normalised. [`FrameScaling`] records the affine map
//! back to physical units and the physical duration of one time unit, so
//! fixed terms keep their physical coefficients while the state and the
//! clock stay normalised.

use std::collections::BTreeMap;
use std::rc::Rc;

use opssplit_tensor::{Tap, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::neural::{BoundModel, OperatorModel};
use crate::stencil::{make_stencil, StencilKernel, StencilKind};

/// physical = half_range · state + mid, per channel; one time unit of the
/// integrator lasts `time` physical seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScaling {
    pub time: f64,
    pub half_range: Vec<f64>,
    pub mid: Vec<f64>,
}

impl FrameScaling {
    pub fn identity(channels: usize) -> Self {
        Self {
            time: 1.0,
            half_range: vec![1.0; channels],
            mid: vec![0.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TermKind {
    Fixed(StencilKernel),
    Learned { slot: usize },
}

/// Pointwise multiplier built from a (physical) density channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateWeight {
    None,
    LnDensity,
    InvDensity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorTerm {
    pub kind: TermKind,
    pub coefficient: f64,
    /// Name under which the coefficient can be replaced at inference.
    pub coefficient_name: Option<String>,
    /// coefficient = sign · named value.
    pub coefficient_sign: f64,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    pub weight: StateWeight,
    pub weight_channel: usize,
}

impl OperatorTerm {
    pub fn fixed(kernel: StencilKernel, coefficient: f64, inputs: Vec<usize>, outputs: Vec<usize>) -> Self {
        Self {
            kind: TermKind::Fixed(kernel),
            coefficient,
            coefficient_name: None,
            coefficient_sign: 1.0,
            inputs,
            outputs,
            weight: StateWeight::None,
            weight_channel: 0,
        }
    }

    pub fn learned(slot: usize, coefficient: f64, inputs: Vec<usize>, outputs: Vec<usize>) -> Self {
        Self {
            kind: TermKind::Learned { slot },
            coefficient,
            coefficient_name: None,
            coefficient_sign: 1.0,
            inputs,
            outputs,
            weight: StateWeight::None,
            weight_channel: 0,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.coefficient_name = Some(name.to_string());
        self.coefficient_sign = if self.coefficient < 0.0 { -1.0 } else { 1.0 };
        self
    }

    pub fn weighted(mut self, weight: StateWeight, channel: usize) -> Self {
        self.weight = weight;
        self.weight_channel = channel;
        self
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.kind, TermKind::Fixed(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermFilter {
    All,
    Fixed,
    Learned,
}

impl TermFilter {
    fn accepts(self, t: &OperatorTerm) -> bool {
        match self {
            TermFilter::All => true,
            TermFilter::Fixed => t.is_fixed(),
            TermFilter::Learned => !t.is_fixed(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitRhs {
    pub channels: Vec<String>,
    pub terms: Vec<OperatorTerm>,
    pub scaling: FrameScaling,
}

/// A model paired with its parameters on the current tape.
pub type Slot<'a> = (&'a OperatorModel, &'a BoundModel);

impl SplitRhs {
    pub fn new(channels: Vec<String>, terms: Vec<OperatorTerm>) -> Self {
        let n = channels.len();
        Self {
            channels,
            terms,
            scaling: FrameScaling::identity(n),
        }
    }

    pub fn with_scaling(mut self, scaling: FrameScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Selectors in range and every channel driven by at least one term.
    pub fn validate(&self) -> Result<()> {
        let c = self.n_channels();
        let mut covered = vec![false; c];
        for (k, t) in self.terms.iter().enumerate() {
            if t.inputs.iter().chain(&t.outputs).any(|&i| i >= c) || t.weight_channel >= c {
                return Err(CoreError::Config(format!("term {k} selects a channel outside 0..{c}")));
            }
            if !t.coefficient.is_finite() {
                return Err(CoreError::Config(format!("term {k} has a non-finite coefficient")));
            }
            t.outputs.iter().for_each(|&o| covered[o] = true);
        }
        if let Some(missing) = covered.iter().position(|&v| !v) {
            return Err(CoreError::Config(format!(
                "channel '{}' receives no term",
                self.channels[missing]
            )));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> BTreeMap<String, f64> {
        self.terms
            .iter()
            .filter_map(|t| t.coefficient_name.clone().map(|n| (n, t.coefficient_sign * t.coefficient)))
            .collect()
    }

    /// Replace every coefficient registered under `name`, keeping the sign
    /// the term was built with; returns how many terms changed.
    pub fn set_coefficient(&mut self, name: &str, value: f64) -> Result<usize> {
        let mut n = 0;
        for t in &mut self.terms {
            if t.coefficient_name.as_deref() == Some(name) {
                t.coefficient = t.coefficient_sign * value;
                n += 1;
            }
        }
        if n == 0 {
            return Err(CoreError::Config(format!("no coefficient named '{name}'")));
        }
        Ok(n)
    }

    fn channel_column(&self, values: impl Fn(usize) -> f64, chans: &[usize]) -> Tensor {
        Tensor::new(vec![chans.len(), 1, 1], chans.iter().map(|&c| values(c)).collect()).expect("shape")
    }

    fn term_output(&self, tape: &Tape, slots: &[Slot], u: Var, t: &OperatorTerm) -> Result<Var> {
        let x = tape.select(u, &t.inputs)?;
        let out = match &t.kind {
            TermKind::Learned { slot } => {
                let (model, bound) = slots
                    .get(*slot)
                    .ok_or_else(|| CoreError::Config(format!("no model bound for slot {slot}")))?;
                let y = model.forward(tape, bound, x)?;
                if tape.shape(y)[0] != t.outputs.len() {
                    return Err(CoreError::Shape(format!(
                        "learned term emits {} channels but routes to {}",
                        tape.shape(y)[0],
                        t.outputs.len()
                    )));
                }
                tape.scale(y, t.coefficient)?
            }
            TermKind::Fixed(kernel) => {
                let s = &self.scaling;
                let in_scale = tape.constant(self.channel_column(|c| s.half_range[c], &t.inputs));
                let x = tape.mul(x, in_scale)?;
                let taps: Vec<Rc<[Tap]>> = kernel.shared_taps();
                let y = if kernel.kind == StencilKind::Divergence {
                    if t.inputs.len() != 2 {
                        return Err(CoreError::Shape("divergence term needs two input channels".into()));
                    }
                    let gx = tape.fixed_taps(tape.select(x, &[0])?, taps[0].clone())?;
                    let gy = tape.fixed_taps(tape.select(x, &[1])?, taps[1].clone())?;
                    tape.add(gx, gy)?
                } else {
                    tape.fixed_taps(x, taps[0].clone())?
                };
                let n_out = tape.shape(y)[0];
                if n_out != t.outputs.len() {
                    return Err(CoreError::Shape(format!(
                        "fixed term emits {n_out} channels but routes to {}",
                        t.outputs.len()
                    )));
                }
                let out_scale = tape.constant(
                    self.channel_column(|c| t.coefficient * s.time / s.half_range[c], &t.outputs),
                );
                tape.mul(y, out_scale)?
            }
        };
        match t.weight {
            StateWeight::None => Ok(out),
            StateWeight::LnDensity | StateWeight::InvDensity => {
                let c = t.weight_channel;
                let rho = tape.select(u, &[c])?;
                let rho = tape.scale(rho, self.scaling.half_range[c])?;
                let rho = tape.add_scalar(rho, self.scaling.mid[c])?;
                if let Some(&bad) = tape.value(rho).data().iter().find(|&&r| r <= 0.0) {
                    return Err(CoreError::Numerical(format!("density {bad} is not strictly positive")));
                }
                let w = if t.weight == StateWeight::LnDensity {
                    tape.ln(rho)?
                } else {
                    let one = tape.constant(Tensor::scalar(1.0));
                    tape.div(one, rho)?
                };
                Ok(tape.mul(out, w)?)
            }
        }
    }

    /// du/dt for the terms accepted by `filter`, summed per channel in term
    /// order.
    pub fn eval_filtered(&self, tape: &Tape, slots: &[Slot], u: Var, filter: TermFilter) -> Result<Var> {
        let shape = tape.shape(u);
        if shape.len() != 3 || shape[0] != self.n_channels() {
            return Err(CoreError::Shape(format!(
                "state {shape:?} does not match schema {:?}",
                self.channels
            )));
        }
        let mut parts: Vec<Option<Var>> = vec![None; self.n_channels()];
        for t in self.terms.iter().filter(|t| filter.accepts(t)) {
            let y = self.term_output(tape, slots, u, t)?;
            for (k, &o) in t.outputs.iter().enumerate() {
                let yk = if t.outputs.len() == 1 { y } else { tape.select(y, &[k])? };
                parts[o] = Some(match parts[o] {
                    Some(acc) => tape.add(acc, yk)?,
                    None => yk,
                });
            }
        }
        let zero = || tape.constant(Tensor::zeros(&[1, shape[1], shape[2]]));
        let parts: Vec<Var> = parts.into_iter().map(|p| p.unwrap_or_else(zero)).collect();
        Ok(tape.concat(&parts)?)
    }

    pub fn eval_tape(&self, tape: &Tape, slots: &[Slot], u: Var) -> Result<Var> {
        self.eval_filtered(tape, slots, u, TermFilter::All)
    }

    /// Gradient-free evaluation on a field.
    pub fn eval_rhs(&self, models: &[&OperatorModel], u: &Field) -> Result<Field> {
        let tape = Tape::new();
        let grid = (u.h(), u.w());
        let bound: Vec<BoundModel> = models
            .iter()
            .map(|m| m.bind(&tape, false, grid))
            .collect::<Result<_>>()?;
        let slots: Vec<Slot> = models.iter().copied().zip(bound.iter()).collect();
        let uv = tape.constant(u.data.clone());
        let y = self.eval_tape(&tape, &slots, uv)?;
        Field::new((*tape.value(y)).clone(), u.dx, u.dy)
    }
}

/// dv/dt = −NO_conv(v) + ν·FD_∇²(v) on state `[u, v]`; the convection
/// model sits in slot 0.
pub fn build_incompressible_rhs(nu: f64, fd_order: usize, dx: f64, dy: f64) -> Result<SplitRhs> {
    let lap = make_stencil(StencilKind::Laplacian, fd_order, dx, dy)?;
    let rhs = SplitRhs::new(
        vec!["u".into(), "v".into()],
        vec![
            OperatorTerm::learned(0, -1.0, vec![0, 1], vec![0, 1]),
            OperatorTerm::fixed(lap, nu, vec![0, 1], vec![0, 1]).named("nu"),
        ],
    );
    rhs.validate()?;
    Ok(rhs)
}

/// State `[ρ, u, v, P]`; divergence model (3 → 1) in slot 0 shared by the
/// density and pressure equations, convection model (2 → 2) in slot 1.
pub fn build_compressible_rhs(
    gamma: f64,
    fd_order: usize,
    dx: f64,
    dy: f64,
    weight: StateWeight,
) -> Result<SplitRhs> {
    let gx = make_stencil(StencilKind::GradX, fd_order, dx, dy)?;
    let gy = make_stencil(StencilKind::GradY, fd_order, dx, dy)?;
    let rhs = SplitRhs::new(
        vec!["rho".into(), "u".into(), "v".into(), "p".into()],
        vec![
            OperatorTerm::learned(0, -1.0, vec![0, 1, 2], vec![0]),
            OperatorTerm::learned(1, -1.0, vec![1, 2], vec![1, 2]),
            OperatorTerm::fixed(gx, -1.0, vec![3], vec![1]).weighted(weight, 0),
            OperatorTerm::fixed(gy, -1.0, vec![3], vec![2]).weighted(weight, 0),
            OperatorTerm::learned(0, -gamma, vec![3, 1, 2], vec![3]).named("gamma"),
        ],
    );
    rhs.validate()?;
    Ok(rhs)
}

/// One learned term driving every channel (neural-ODE baseline).
pub fn build_monolithic_rhs(channels: Vec<String>) -> SplitRhs {
    let all: Vec<usize> = (0..channels.len()).collect();
    SplitRhs::new(channels, vec![OperatorTerm::learned(0, 1.0, all.clone(), all)])
}
