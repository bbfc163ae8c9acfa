//! Pseudo-spectral incompressible Navier–Stokes on the periodic square
//! [-1, 1]², velocity-only formulation: the pressure-Poisson solve is the
//! Leray projection k (k·N̂)/|k|² of the convection term.

use num_complex::Complex64;
use opssplit_tensor::{signed_index, Fft2Plan, Tensor};

use super::dataset::Trajectory;
use super::params::{SimParams, System};
use crate::error::{CoreError, Result};

type Spec = Vec<Complex64>;

pub(crate) struct SpectralGrid {
    pub n: usize,
    pub plan: Fft2Plan,
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
    /// 2/3-rule mask over `[n, n/2 + 1]`.
    pub keep: Vec<bool>,
}

impl SpectralGrid {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        let plan = Fft2Plan::new(n, n)?;
        let k0 = 2.0 * std::f64::consts::PI / length;
        let hw = n / 2 + 1;
        let cut = n as i64 / 3;
        let mut keep = vec![false; n * hw];
        for i in 0..n {
            for j in 0..hw {
                keep[i * hw + j] = signed_index(i, n).abs() <= cut && (j as i64) <= cut;
            }
        }
        Ok(Self {
            n,
            plan,
            kx: (0..n).map(|i| k0 * signed_index(i, n) as f64).collect(),
            ky: (0..hw).map(|j| k0 * j as f64).collect(),
            keep,
        })
    }

    pub fn hw(&self) -> usize {
        self.n / 2 + 1
    }

    pub fn fwd(&self, f: &[f64]) -> Spec {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n * self.hw()];
        self.plan.forward_plane(f, &mut out);
        out
    }

    pub fn inv(&self, s: &[Complex64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        self.plan.inverse_plane(s, &mut out);
        out
    }

    pub fn dealias(&self, s: &mut [Complex64]) {
        for (v, &k) in s.iter_mut().zip(&self.keep) {
            if !k {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// i·k_axis·ŝ, with the self-conjugate Nyquist row/column zeroed.
    pub fn deriv(&self, s: &[Complex64], along_x: bool) -> Spec {
        let hw = self.hw();
        let n = self.n;
        let mut out = vec![Complex64::new(0.0, 0.0); n * hw];
        for i in 0..n {
            for j in 0..hw {
                let nyq = (along_x && i == n / 2) || (!along_x && j == n / 2);
                if nyq {
                    continue;
                }
                let k = if along_x { self.kx[i] } else { self.ky[j] };
                out[i * hw + j] = Complex64::new(0.0, k) * s[i * hw + j];
            }
        }
        out
    }

    /// Remove the gradient part: N̂ − k (k·N̂)/|k|², mean mode untouched.
    pub fn project(&self, a: &mut [Complex64], b: &mut [Complex64]) {
        let hw = self.hw();
        for i in 0..self.n {
            for j in 0..hw {
                let (kx, ky) = (self.kx[i], self.ky[j]);
                let k2 = kx * kx + ky * ky;
                if k2 == 0.0 {
                    continue;
                }
                let idx = i * hw + j;
                let dot = a[idx] * kx + b[idx] * ky;
                a[idx] -= dot * (kx / k2);
                b[idx] -= dot * (ky / k2);
            }
        }
    }

    pub fn k2(&self, i: usize, j: usize) -> f64 {
        self.kx[i] * self.kx[i] + self.ky[j] * self.ky[j]
    }
}

struct State {
    u: Spec,
    v: Spec,
}

fn rhs(g: &SpectralGrid, s: &State, nu: f64) -> State {
    let u = g.inv(&s.u);
    let v = g.inv(&s.v);
    let ux = g.inv(&g.deriv(&s.u, true));
    let uy = g.inv(&g.deriv(&s.u, false));
    let vx = g.inv(&g.deriv(&s.v, true));
    let vy = g.inv(&g.deriv(&s.v, false));
    let nu_phys: Vec<f64> = (0..u.len()).map(|k| -(u[k] * ux[k] + v[k] * uy[k])).collect();
    let nv_phys: Vec<f64> = (0..u.len()).map(|k| -(u[k] * vx[k] + v[k] * vy[k])).collect();
    let mut a = g.fwd(&nu_phys);
    let mut b = g.fwd(&nv_phys);
    g.dealias(&mut a);
    g.dealias(&mut b);
    g.project(&mut a, &mut b);
    let hw = g.hw();
    for i in 0..g.n {
        for j in 0..hw {
            let idx = i * hw + j;
            let damp = nu * g.k2(i, j);
            a[idx] -= s.u[idx] * damp;
            b[idx] -= s.v[idx] * damp;
        }
    }
    State { u: a, v: b }
}

fn axpy(y: &State, h: f64, k: &State) -> State {
    State {
        u: y.u.iter().zip(&k.u).map(|(a, b)| a + b * h).collect(),
        v: y.v.iter().zip(&k.v).map(|(a, b)| a + b * h).collect(),
    }
}

/// Initial velocity `u = −sin(2παy)`, `v = −sin(4πβx)` sampled on the grid.
pub fn initial_velocity(p: &SimParams) -> (Vec<f64>, Vec<f64>) {
    let n = p.grid;
    let h = p.spacing();
    let x0 = System::Incompressible.domain_origin();
    let tau = 2.0 * std::f64::consts::PI;
    let mut u = vec![0.0; n * n];
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        let x = x0 + i as f64 * h;
        for j in 0..n {
            let y = x0 + j as f64 * h;
            u[i * n + j] = -(tau * p.alpha * y).sin();
            v[i * n + j] = -(2.0 * tau * p.beta * x).sin();
        }
    }
    (u, v)
}

/// Max |∇·v| of a velocity pair evaluated spectrally.
pub fn spectral_divergence(n: usize, u: &[f64], v: &[f64]) -> Result<f64> {
    let g = SpectralGrid::new(n, System::Incompressible.domain_length())?;
    let mut d = g.deriv(&g.fwd(u), true);
    for (a, b) in d.iter_mut().zip(g.deriv(&g.fwd(v), false)) {
        *a += b;
    }
    Ok(g.inv(&d).iter().fold(0.0, |m, x| m.max(x.abs())))
}

/// RK4 in Fourier space with 2/3 dealiasing (applied to the initial
/// condition as well). Records every `record_every`-th step, step 0
/// included.
pub fn solve_incompressible(p: &SimParams, record_every: usize) -> Result<Trajectory> {
    if p.system != System::Incompressible {
        return Err(CoreError::Config("incompressible solver given compressible parameters".into()));
    }
    let n = p.grid;
    let steps = p.n_steps();
    if record_every == 0 || steps % record_every != 0 {
        return Err(CoreError::Config(format!("record stride {record_every} does not divide {steps} steps")));
    }
    let g = SpectralGrid::new(n, System::Incompressible.domain_length())?;
    let (u0, v0) = initial_velocity(p);
    let mut s = State {
        u: g.fwd(&u0),
        v: g.fwd(&v0),
    };
    g.dealias(&mut s.u);
    g.dealias(&mut s.v);
    g.project(&mut s.u, &mut s.v);

    let h = p.dt;
    let dx = p.spacing();
    let mut frames = Vec::with_capacity((steps / record_every + 1) * 2 * n * n);
    for step in 0..=steps {
        if step % record_every == 0 {
            let u = g.inv(&s.u);
            let v = g.inv(&s.v);
            let vmax = u.iter().chain(&v).fold(0.0f64, |m, x| m.max(x.abs()));
            if !vmax.is_finite() {
                return Err(CoreError::Numerical(format!("non-finite velocity at step {step}")));
            }
            if vmax * h / dx > 0.5 {
                return Err(CoreError::Numerical(format!(
                    "CFL number {:.3} exceeds 0.5 at step {step}",
                    vmax * h / dx
                )));
            }
            frames.extend(u);
            frames.extend(v);
        }
        if step == steps {
            break;
        }
        let k1 = rhs(&g, &s, p.coefficient);
        let k2 = rhs(&g, &axpy(&s, 0.5 * h, &k1), p.coefficient);
        let k3 = rhs(&g, &axpy(&s, 0.5 * h, &k2), p.coefficient);
        let k4 = rhs(&g, &axpy(&s, h, &k3), p.coefficient);
        let mut next = axpy(&s, h / 6.0, &k1);
        next = axpy(&next, h / 3.0, &k2);
        next = axpy(&next, h / 3.0, &k3);
        s = axpy(&next, h / 6.0, &k4);
    }
    let t = steps / record_every + 1;
    Ok(Trajectory {
        frames: Tensor::new(vec![t, 2, n, n], frames)?,
        frame_dt: p.dt * record_every as f64,
        params: p.clone(),
    })
}

/// Leray-projected convection P[(v·∇)v] = (v·∇)v + ∇P, dealiased: the
/// operator the learned incompressible term stands in for.
pub fn projected_convection(n: usize, u: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = SpectralGrid::new(n, System::Incompressible.domain_length())?;
    let mut s = State { u: g.fwd(u), v: g.fwd(v) };
    g.dealias(&mut s.u);
    g.dealias(&mut s.v);
    let r = rhs(&g, &s, 0.0);
    let neg = |x: Vec<f64>| x.into_iter().map(|a| -a).collect::<Vec<_>>();
    Ok((neg(g.inv(&r.u)), neg(g.inv(&r.v))))
}
