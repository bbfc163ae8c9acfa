//! The three deployment modes behind one frame-stepping interface:
//! autoregressive next-state models, neural ODEs with a monolithic learned
//! right-hand side, and split right-hand sides.

use opssplit_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::integrate::{euler_step, rk4_step, IntegratorConfig, Scheme, TapeSpace, DIVERGENCE_LIMIT};
use crate::neural::{BoundModel, OperatorModel};
use crate::rhs::{Slot, SplitRhs, TermFilter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ar,
    Node,
    Opssplit,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ar, Mode::Node, Mode::Opssplit];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ar => "ar",
            Mode::Node => "node",
            Mode::Opssplit => "opssplit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct Dynamics {
    pub mode: Mode,
    /// Slot names, parallel to `models`.
    pub slots: Vec<String>,
    pub models: Vec<OperatorModel>,
    /// Absent in AR mode.
    pub rhs: Option<SplitRhs>,
    pub integrator: IntegratorConfig,
}

impl Dynamics {
    pub fn autoregressive(model: OperatorModel) -> Self {
        Self {
            mode: Mode::Ar,
            slots: vec!["next".into()],
            models: vec![model],
            rhs: None,
            integrator: IntegratorConfig::default(),
        }
    }

    pub fn ode(mode: Mode, slots: Vec<String>, models: Vec<OperatorModel>, rhs: SplitRhs, integrator: IntegratorConfig) -> Self {
        Self {
            mode,
            slots,
            models,
            rhs: Some(rhs),
            integrator,
        }
    }

    pub fn param_count(&self) -> usize {
        self.models.iter().map(|m| m.param_count()).sum()
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s == name)
    }

    pub fn bind(&self, tape: &Tape, requires_grad: bool, grid: (usize, usize)) -> Result<Vec<BoundModel>> {
        self.models.iter().map(|m| m.bind(tape, requires_grad, grid)).collect()
    }

    fn slots_of<'a>(&'a self, bound: &'a [BoundModel]) -> Vec<Slot<'a>> {
        self.models.iter().zip(bound.iter()).collect()
    }

    /// Advance one data frame.
    pub fn frame_step(&self, tape: &Tape, bound: &[BoundModel], u: Var) -> Result<Var> {
        match (&self.rhs, self.mode) {
            (None, _) | (_, Mode::Ar) => self.models[0].forward(tape, &bound[0], u),
            (Some(rhs), _) => {
                let slots = self.slots_of(bound);
                let sp = TapeSpace(tape);
                let h = self.integrator.h();
                let mut state = u;
                for _ in 0..self.integrator.substeps {
                    state = match self.integrator.scheme {
                        Scheme::Euler => {
                            let mut f = |x: &Var| rhs.eval_tape(tape, &slots, *x);
                            euler_step(&sp, &mut f, &state, h)?
                        }
                        Scheme::Rk4 => {
                            let mut f = |x: &Var| rhs.eval_tape(tape, &slots, *x);
                            rk4_step(&sp, &mut f, &state, h)?
                        }
                        Scheme::Strang => {
                            // learned part half steps around the fixed part
                            let mut learned = |x: &Var| rhs.eval_filtered(tape, &slots, *x, TermFilter::Learned);
                            let mut fixed = |x: &Var| rhs.eval_filtered(tape, &slots, *x, TermFilter::Fixed);
                            let a = rk4_step(&sp, &mut learned, &state, 0.5 * h)?;
                            let b = rk4_step(&sp, &mut fixed, &a, h)?;
                            rk4_step(&sp, &mut learned, &b, 0.5 * h)?
                        }
                    };
                }
                Ok(state)
            }
        }
    }

    /// Differentiable rollout of `n` frames on one tape.
    pub fn rollout_tape(&self, tape: &Tape, bound: &[BoundModel], u0: Var, n: usize) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(n);
        let mut u = u0;
        for k in 1..=n {
            u = self.frame_step(tape, bound, u)?;
            let m = tape.value(u).max_abs();
            if !(m <= DIVERGENCE_LIMIT) {
                return Err(CoreError::Diverged { frame: k, value: m });
            }
            out.push(u);
        }
        Ok(out)
    }

    /// Gradient-free rollout; a fresh tape per frame keeps memory flat.
    /// On divergence the frames produced so far are returned with the error.
    pub fn rollout(&self, u0: &Tensor, n: usize) -> (Vec<Tensor>, Option<CoreError>) {
        let grid = (u0.shape()[1], u0.shape()[2]);
        let mut frames = Vec::with_capacity(n);
        let mut u = u0.clone();
        for k in 1..=n {
            let tape = Tape::new();
            let step = self.bind(&tape, false, grid).and_then(|bound| {
                let x = tape.constant(u.clone());
                self.frame_step(&tape, &bound, x)
            });
            match step {
                Ok(v) => {
                    let next = (*tape.value(v)).clone();
                    let m = next.max_abs();
                    if !(m <= DIVERGENCE_LIMIT) {
                        return (frames, Some(CoreError::Diverged { frame: k, value: m }));
                    }
                    frames.push(next.clone());
                    u = next;
                }
                Err(e) => {
                    let e = match e {
                        CoreError::Tensor(opssplit_tensor::TensorError::NonFinite { .. }) => {
                            CoreError::Diverged { frame: k, value: f64::INFINITY }
                        }
                        other => other,
                    };
                    return (frames, Some(e));
                }
            }
        }
        (frames, None)
    }
}
