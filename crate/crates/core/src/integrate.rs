//! Explicit time stepping, splitting compositions and rollouts, generic
//! over the state representation so the same schemes drive plain vectors,
//! tensors and differentiable tape variables.

use opssplit_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Values above this magnitude abort a rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub trait StateSpace {
    type State: Clone;

    /// `y + a·x`
    fn axpy(&self, y: &Self::State, a: f64, x: &Self::State) -> Result<Self::State>;

    fn max_abs(&self, s: &Self::State) -> f64;
}

pub struct VecSpace;

impl StateSpace for VecSpace {
    type State = Vec<f64>;

    fn axpy(&self, y: &Vec<f64>, a: f64, x: &Vec<f64>) -> Result<Vec<f64>> {
        if x.len() != y.len() {
            return Err(CoreError::Shape(format!("state lengths {} and {}", y.len(), x.len())));
        }
        Ok(y.iter().zip(x).map(|(p, q)| p + a * q).collect())
    }

    fn max_abs(&self, s: &Vec<f64>) -> f64 {
        s.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub struct TensorSpace;

impl StateSpace for TensorSpace {
    type State = Tensor;

    fn axpy(&self, y: &Tensor, a: f64, x: &Tensor) -> Result<Tensor> {
        Ok(y.zip_map(x, |p, q| p + a * q)?)
    }

    fn max_abs(&self, s: &Tensor) -> f64 {
        s.max_abs()
    }
}

pub struct TapeSpace<'a>(pub &'a Tape);

impl StateSpace for TapeSpace<'_> {
    type State = Var;

    fn axpy(&self, y: &Var, a: f64, x: &Var) -> Result<Var> {
        let ax = self.0.scale(*x, a)?;
        Ok(self.0.add(*y, ax)?)
    }

    fn max_abs(&self, s: &Var) -> f64 {
        self.0.value(*s).max_abs()
    }
}

pub fn euler_step<S: StateSpace>(
    sp: &S,
    f: &mut dyn FnMut(&S::State) -> Result<S::State>,
    u: &S::State,
    h: f64,
) -> Result<S::State> {
    let k = f(u)?;
    sp.axpy(u, h, &k)
}

/// Classical four-stage Runge–Kutta.
pub fn rk4_step<S: StateSpace>(
    sp: &S,
    f: &mut dyn FnMut(&S::State) -> Result<S::State>,
    u: &S::State,
    h: f64,
) -> Result<S::State> {
    let k1 = f(u)?;
    let k2 = f(&sp.axpy(u, 0.5 * h, &k1)?)?;
    let k3 = f(&sp.axpy(u, 0.5 * h, &k2)?)?;
    let k4 = f(&sp.axpy(u, h, &k3)?)?;
    let mut out = sp.axpy(u, h / 6.0, &k1)?;
    out = sp.axpy(&out, h / 3.0, &k2)?;
    out = sp.axpy(&out, h / 3.0, &k3)?;
    sp.axpy(&out, h / 6.0, &k4)
}

/// A flow map `(u, h) ↦ u(h)`.
pub type Flow<'a, T> = dyn FnMut(&T, f64) -> Result<T> + 'a;

/// B(h/2) ∘ A(h) ∘ B(h/2)
pub fn strang_compose<T>(a: &mut Flow<T>, b: &mut Flow<T>, u: &T, h: f64) -> Result<T> {
    let half = b(u, 0.5 * h)?;
    let full = a(&half, h)?;
    b(&full, 0.5 * h)
}

/// A(h) ∘ B(h)
pub fn lie_compose<T>(a: &mut Flow<T>, b: &mut Flow<T>, u: &T, h: f64) -> Result<T> {
    let first = b(u, h)?;
    a(&first, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
    Strang,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Frame interval in integrator time units.
    pub dt: f64,
    pub substeps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Euler,
            dt: 1.0,
            substeps: 1,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.substeps == 0 {
            return Err(CoreError::Config(format!(
                "integrator needs dt > 0 and substeps >= 1, got dt={} substeps={}",
                self.dt, self.substeps
            )));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        self.dt / self.substeps as f64
    }
}

/// Iterate `step` for `n_frames`, returning frames 1..=n. Any value above
/// [`DIVERGENCE_LIMIT`] aborts with the offending frame.
pub fn rollout<S: StateSpace>(
    sp: &S,
    step: &mut dyn FnMut(&S::State) -> Result<S::State>,
    u0: &S::State,
    n_frames: usize,
) -> Result<Vec<S::State>> {
    if n_frames == 0 {
        return Err(CoreError::Config("rollout needs at least one frame".into()));
    }
    let mut frames = Vec::with_capacity(n_frames);
    let mut u = u0.clone();
    for k in 1..=n_frames {
        u = step(&u)?;
        let m = sp.max_abs(&u);
        if !(m <= DIVERGENCE_LIMIT) {
            return Err(CoreError::Diverged { frame: k, value: m });
        }
        frames.push(u.clone());
    }
    Ok(frames)
}
