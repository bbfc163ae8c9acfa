//! Inviscid compressible flow in primitive variables [ρ, u, v, P] on the
//! periodic unit square: fourth-order central differences, RK4, and an
//! exponential filter on the top third of Fourier modes after every step.

use num_complex::Complex64;
use opssplit_tensor::{apply_taps, signed_index, Tap, Tensor};

use super::dataset::Trajectory;
use super::incompressible::SpectralGrid;
use super::params::{SimParams, System};
use crate::error::{CoreError, Result};
use crate::stencil::{make_stencil, StencilKind};

const FILTER_STRENGTH: f64 = 36.0;
const FILTER_POWER: i32 = 4;
/// tanh width of the shear-layer interfaces.
const INTERFACE_WIDTH: f64 = 0.05;

struct Ops {
    n: usize,
    gx: Vec<Tap>,
    gy: Vec<Tap>,
    grid: SpectralGrid,
    /// Filter factor per `[n, n/2 + 1]` coefficient.
    sigma: Vec<f64>,
}

fn axis_filter(k: i64, n: usize) -> f64 {
    let kappa = k.unsigned_abs() as f64 / (n / 2) as f64;
    let cut = 2.0 / 3.0;
    if kappa <= cut {
        1.0
    } else {
        (-FILTER_STRENGTH * ((kappa - cut) / (1.0 - cut)).powi(FILTER_POWER)).exp()
    }
}

impl Ops {
    fn new(n: usize, dx: f64) -> Result<Self> {
        let gx = make_stencil(StencilKind::GradX, 4, dx, dx)?.taps().remove(0);
        let gy = make_stencil(StencilKind::GradY, 4, dx, dx)?.taps().remove(0);
        let grid = SpectralGrid::new(n, 1.0)?;
        let hw = n / 2 + 1;
        let mut sigma = vec![0.0; n * hw];
        for i in 0..n {
            for j in 0..hw {
                sigma[i * hw + j] = axis_filter(signed_index(i, n), n) * axis_filter(j as i64, n);
            }
        }
        Ok(Self { n, gx, gy, grid, sigma })
    }

    fn dx(&self, f: &[f64]) -> Vec<f64> {
        apply_taps(f, 1, self.n, self.n, &self.gx)
    }

    fn dy(&self, f: &[f64]) -> Vec<f64> {
        apply_taps(f, 1, self.n, self.n, &self.gy)
    }

    /// f₀ + F⁻¹[σ · F(f − f₀)] with f₀ the first sample, so constant
    /// planes pass through bit-for-bit.
    fn filter(&self, f: &mut [f64]) {
        let f0 = f[0];
        let shifted: Vec<f64> = f.iter().map(|v| v - f0).collect();
        let mut s = self.grid.fwd(&shifted);
        for (c, &w) in s.iter_mut().zip(&self.sigma) {
            *c *= Complex64::new(w, 0.0);
        }
        for (o, v) in f.iter_mut().zip(self.grid.inv(&s)) {
            *o = f0 + v;
        }
    }
}

/// `[ρ, u, v, P]` planes, each `n²`.
type State = [Vec<f64>; 4];

fn rhs(ops: &Ops, s: &State, gamma: f64) -> State {
    let [rho, u, v, p] = s;
    let m = rho.len();
    let ru: Vec<f64> = (0..m).map(|k| rho[k] * u[k]).collect();
    let rv: Vec<f64> = (0..m).map(|k| rho[k] * v[k]).collect();
    let (d_ru, d_rv) = (ops.dx(&ru), ops.dy(&rv));
    let (ux, uy, vx, vy) = (ops.dx(u), ops.dy(u), ops.dx(v), ops.dy(v));
    let (px, py) = (ops.dx(p), ops.dy(p));
    let mut out: State = [vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    for k in 0..m {
        out[0][k] = -(d_ru[k] + d_rv[k]);
        out[1][k] = -(u[k] * ux[k] + v[k] * uy[k]) - px[k] / rho[k];
        out[2][k] = -(u[k] * vx[k] + v[k] * vy[k]) - py[k] / rho[k];
        out[3][k] = -(u[k] * px[k] + v[k] * py[k]) - gamma * p[k] * (ux[k] + vy[k]);
    }
    out
}

fn axpy(y: &State, h: f64, k: &State) -> State {
    std::array::from_fn(|c| y[c].iter().zip(&k[c]).map(|(a, b)| a + h * b).collect())
}

/// Shear-layer initial condition with a sinusoidal transverse perturbation;
/// the density and velocity jumps are tanh profiles.
pub fn initial_state(p: &SimParams) -> [Vec<f64>; 4] {
    let n = p.grid;
    let h = p.spacing();
    let sigma = 0.05 / 2f64.sqrt();
    let mut s: State = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n], vec![p.beta; n * n]];
    for i in 0..n {
        let x = i as f64 * h;
        for j in 0..n {
            let y = j as f64 * h;
            let k = i * n + j;
            let band = 0.5 * (((y - 0.25) / INTERFACE_WIDTH).tanh() - ((y - 0.75) / INTERFACE_WIDTH).tanh());
            s[0][k] = 1.0 + band;
            s[1][k] = -0.5 + band;
            let bump = (-(y - 0.25).powi(2) / (2.0 * sigma * sigma)).exp()
                + (-(y - 0.75).powi(2) / (2.0 * sigma * sigma)).exp();
            s[2][k] = p.alpha * (4.0 * std::f64::consts::PI * x).sin() * bump;
        }
    }
    s
}

fn check(s: &State, gamma: f64, dt: f64, dx: f64, step: usize) -> Result<()> {
    let mut speed: f64 = 0.0;
    for k in 0..s[0].len() {
        let (rho, p) = (s[0][k], s[3][k]);
        if !(rho > 0.0) {
            return Err(CoreError::Numerical(format!("density {rho} is not positive at step {step}")));
        }
        if !(p >= 0.0) || !s[1][k].is_finite() || !s[2][k].is_finite() {
            return Err(CoreError::Numerical(format!("invalid state at step {step}")));
        }
        let c = (gamma * p / rho).sqrt();
        speed = speed.max(s[1][k].abs().max(s[2][k].abs()) + c);
    }
    let cfl = speed * dt / dx;
    if cfl > 0.5 {
        return Err(CoreError::Numerical(format!("CFL number {cfl:.3} exceeds 0.5 at step {step}")));
    }
    Ok(())
}

/// Solve from the standard initial condition.
pub fn solve_compressible(p: &SimParams, record_every: usize) -> Result<Trajectory> {
    let s0 = initial_state(p);
    solve_compressible_from(p, s0, record_every, true)
}

/// Solve from an arbitrary state; `filter_initial` smooths the initial
/// planes with the same filter used after each step.
pub fn solve_compressible_from(
    p: &SimParams,
    mut s: [Vec<f64>; 4],
    record_every: usize,
    filter_initial: bool,
) -> Result<Trajectory> {
    if p.system != System::Compressible {
        return Err(CoreError::Config("compressible solver given incompressible parameters".into()));
    }
    let n = p.grid;
    let steps = p.n_steps();
    if record_every == 0 || steps % record_every != 0 {
        return Err(CoreError::Config(format!("record stride {record_every} does not divide {steps} steps")));
    }
    let dx = p.spacing();
    let ops = Ops::new(n, dx)?;
    if filter_initial {
        s.iter_mut().for_each(|f| ops.filter(f));
    }
    let (h, gamma) = (p.dt, p.coefficient);
    let mut frames = Vec::with_capacity((steps / record_every + 1) * 4 * n * n);
    for step in 0..=steps {
        check(&s, gamma, h, dx, step)?;
        if step % record_every == 0 {
            s.iter().for_each(|f| frames.extend_from_slice(f));
        }
        if step == steps {
            break;
        }
        let k1 = rhs(&ops, &s, gamma);
        let k2 = rhs(&ops, &axpy(&s, 0.5 * h, &k1), gamma);
        let k3 = rhs(&ops, &axpy(&s, 0.5 * h, &k2), gamma);
        let k4 = rhs(&ops, &axpy(&s, h, &k3), gamma);
        let mut next = axpy(&s, h / 6.0, &k1);
        next = axpy(&next, h / 3.0, &k2);
        next = axpy(&next, h / 3.0, &k3);
        s = axpy(&next, h / 6.0, &k4);
        s.iter_mut().for_each(|f| ops.filter(f));
    }
    let t = steps / record_every + 1;
    Ok(Trajectory {
        frames: Tensor::new(vec![t, 4, n, n], frames)?,
        frame_dt: p.dt * record_every as f64,
        params: p.clone(),
    })
}
