//! One PASS/FAIL line per primary acceptance criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout; the
//! process exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use nalgebra::{Matrix2, Vector2};
use opssplit_cli::commands::{self, EvalSource};
use opssplit_cli::{resolve, RunConfig};
use opssplit_core::datagen::compressible::solve_compressible_from;
use opssplit_core::datagen::incompressible::spectral_divergence;
use opssplit_core::datagen::{solve_compressible, solve_incompressible, NormStats, SimParams, Split, System};
use opssplit_core::dynamics::{Dynamics, Mode};
use opssplit_core::integrate::{lie_compose, rk4_step, strang_compose, IntegratorConfig, VecSpace};
use opssplit_core::metrics::{nrmse, theorem_shift_harness, EvalReport, TheoremSetup};
use opssplit_core::rhs::StateWeight;
use opssplit_core::setup::{build_dynamics, DynamicsSpec, ModelSpec};
use opssplit_core::stencil::{fit_slope, measure_order, StencilKind};
use opssplit_core::train::{relative_lp, LossRecord};
use opssplit_tensor::{fft2, ifft2, ModeBasis, Tap, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-6;
const GRAD_CASES: usize = 20;
const STENCIL_BAND: f64 = 0.3;
const FFT_ROUND_TRIP: f64 = 1e-12;
const PARSEVAL: f64 = 1e-10;
const DIVERGENCE: f64 = 1e-8;
const MASS_DRIFT: f64 = 5e-3;
const THEOREM_TOL: f64 = 1e-10;
const IDENTITY_TOL: f64 = 1e-12;
const TREND_SECONDS: f64 = 45.0 * 60.0;
const SEEDS: [u64; 3] = [1, 2, 3];
const DATA_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn work_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

// ---------------------------------------------------------------- autodiff

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build = dyn Fn(&Tape, &[Var]) -> Var;

fn weighted_sum(tape: &Tape, v: Var) -> Var {
    let shape = tape.shape(v);
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect()).unwrap());
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

fn eval_scalar(inputs: &[Tensor], f: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&tape, &vars);
    tape.value(out).item().unwrap()
}

fn rel_err(g: f64, fd: f64) -> f64 {
    (g - fd).abs() / fd.abs().max(1.0)
}

fn gradcheck(inputs: &[Tensor], f: &Build) -> f64 {
    const H: f64 = 1e-5;
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).unwrap().clone();
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= H;
            worst = worst.max(rel_err(g.data()[e], (eval_scalar(&plus, f) - eval_scalar(&minus, f)) / (2.0 * H)));
        }
    }
    worst
}

fn op_cases() -> Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>, Box<Build>)> {
    let unary = |name: &'static str, op: fn(&Tape, Var) -> Var| -> (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>, Box<Build>) {
        (
            name,
            Box::new(|r| vec![random(r, &[7], -2.0, 2.0)]),
            Box::new(move |t, v| {
                let y = op(t, v[0]);
                weighted_sum(t, y)
            }),
        )
    };
    let binary = |name: &'static str, op: fn(&Tape, Var, Var) -> Var| -> (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>, Box<Build>) {
        (
            name,
            Box::new(|r| vec![random(r, &[2, 3, 4], -2.0, 2.0), random(r, &[4], 0.5, 2.0)]),
            Box::new(move |t, v| {
                let y = op(t, v[0], v[1]);
                weighted_sum(t, y)
            }),
        )
    };
    let basis = Rc::new(ModeBasis::new(8, 8, 2, 3).unwrap());
    let taps: Rc<[Tap]> = Rc::from(vec![
        Tap { di: 1, dj: 0, coeff: 0.7 },
        Tap { di: -2, dj: 1, coeff: -0.3 },
        Tap { di: 0, dj: -1, coeff: 1.1 },
    ]);
    vec![
        unary("neg", |t, x| t.neg(x).unwrap()),
        unary("exp", |t, x| t.exp(x).unwrap()),
        unary("sin", |t, x| t.sin(x).unwrap()),
        unary("tanh", |t, x| t.tanh(x).unwrap()),
        unary("gelu", |t, x| t.gelu(x).unwrap()),
        unary("square", |t, x| t.square(x).unwrap()),
        unary("scale", |t, x| t.scale(x, -1.7).unwrap()),
        unary("ln", |t, x| {
            let s = t.square(x).unwrap();
            let s = t.add_scalar(s, 0.5).unwrap();
            t.ln(s).unwrap()
        }),
        unary("sqrt", |t, x| {
            let s = t.square(x).unwrap();
            let s = t.add_scalar(s, 0.5).unwrap();
            t.sqrt(s).unwrap()
        }),
        binary("add", |t, a, b| t.add(a, b).unwrap()),
        binary("sub", |t, a, b| t.sub(a, b).unwrap()),
        binary("mul", |t, a, b| t.mul(a, b).unwrap()),
        binary("div", |t, a, b| t.div(a, b).unwrap()),
        (
            "sum/mean/lp_norm",
            Box::new(|r| vec![random(r, &[3, 5], -1.0, 1.0)]),
            Box::new(|t, v| {
                let m = t.mean(v[0]).unwrap();
                let n2 = t.lp_norm(v[0], 2.0).unwrap();
                let n3 = t.lp_norm(v[0], 3.0).unwrap();
                let a = t.add(m, n2).unwrap();
                t.add(a, n3).unwrap()
            }),
        ),
        (
            "linear",
            Box::new(|r| vec![random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[4, 5], -1.0, 1.0), random(r, &[5], -1.0, 1.0)]),
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "channel_mix",
            Box::new(|r| vec![random(r, &[3, 4, 4], -1.0, 1.0), random(r, &[3, 2], -1.0, 1.0), random(r, &[2], -1.0, 1.0)]),
            Box::new(|t, v| {
                let y = t.channel_mix(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "spectral_conv",
            Box::new(|r| {
                vec![
                    random(r, &[2, 8, 8], -1.0, 1.0),
                    random(r, &[2, 3, 4, 3], -1.0, 1.0),
                    random(r, &[2, 3, 4, 3], -1.0, 1.0),
                ]
            }),
            Box::new(move |t, v| {
                let y = t.spectral_conv(v[0], v[1], v[2], basis.clone()).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "conv2d_periodic",
            Box::new(|r| vec![random(r, &[2, 6, 8], -1.0, 1.0), random(r, &[3, 2, 3, 3], -1.0, 1.0), random(r, &[3], -1.0, 1.0)]),
            Box::new(|t, v| {
                let y = t.conv2d_periodic(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y)
            }),
        ),
        (
            "fixed_taps/select/concat",
            Box::new(|r| vec![random(r, &[3, 6, 6], -1.0, 1.0)]),
            Box::new(move |t, v| {
                let a = t.select(v[0], &[2, 0]).unwrap();
                let b = t.fixed_taps(a, taps.clone()).unwrap();
                let c = t.concat(&[b, v[0]]).unwrap();
                let c = t.sin(c).unwrap();
                weighted_sum(t, c)
            }),
        ),
    ]
}

fn small_spec(system: System) -> DynamicsSpec {
    DynamicsSpec {
        system,
        model: ModelSpec {
            modes: 2,
            width: 4,
            layers: 2,
            split_layers: 2,
            ..ModelSpec::desk(system)
        },
        fd_order: 2,
        integrator: IntegratorConfig::default(),
        pressure_weight: StateWeight::LnDensity,
        terms: vec![],
        coefficient: if system == System::Incompressible { 0.01 } else { 5.0 / 3.0 },
        grid: (8, 8),
        dx: 0.25,
        dy: 0.25,
    }
}

fn step_loss(d: &Dynamics, u: &Tensor) -> f64 {
    let tape = Tape::new();
    let bound = d.bind(&tape, false, (8, 8)).unwrap();
    let y = d.frame_step(&tape, &bound, tape.constant(u.clone())).unwrap();
    tape.value(weighted_sum(&tape, y)).item().unwrap()
}

/// One integrator step of a full model, checked over every parameter and
/// state entry.
fn step_gradcheck(d: &Dynamics, u: &Tensor) -> f64 {
    const H: f64 = 1e-5;
    let tape = Tape::new();
    let bound = d.bind(&tape, true, (8, 8)).unwrap();
    let x = tape.leaf(u.clone(), true);
    let y = d.frame_step(&tape, &bound, x).unwrap();
    let loss = weighted_sum(&tape, y);
    let grads = tape.backward(loss).unwrap();
    let gx = grads.get(x).unwrap().clone();
    let mut worst: f64 = 0.0;
    for e in 0..u.len() {
        let (mut p, mut m) = (u.clone(), u.clone());
        p.data_mut()[e] += H;
        m.data_mut()[e] -= H;
        worst = worst.max(rel_err(gx.data()[e], (step_loss(d, &p) - step_loss(d, &m)) / (2.0 * H)));
    }
    for (s, b) in bound.iter().enumerate() {
        for (k, var) in b.vars.iter().enumerate() {
            let g = grads.get(*var).unwrap().clone();
            for e in 0..g.len() {
                let mut dp = d.clone();
                dp.models[s].params[k].data_mut()[e] += H;
                let mut dm = d.clone();
                dm.models[s].params[k].data_mut()[e] -= H;
                worst = worst.max(rel_err(g.data()[e], (step_loss(&dp, u) - step_loss(&dm, u)) / (2.0 * H)));
            }
        }
    }
    worst
}

fn autodiff() -> Outcome {
    let t0 = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (k, (name, make, f)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        for _ in 0..GRAD_CASES {
            let e = gradcheck(&make(&mut rng), &*f);
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    let models = [
        (System::Incompressible, Mode::Opssplit, "opssplit step"),
        (System::Compressible, Mode::Opssplit, "compressible opssplit step"),
        (System::Incompressible, Mode::Node, "node step"),
        (System::Incompressible, Mode::Ar, "ar step"),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    for case in 0..GRAD_CASES {
        let (system, mode, name) = models[case % models.len()];
        let c = system.channels().len();
        let stats = NormStats { min: vec![0.5; c], max: vec![1.5; c] };
        let d = build_dynamics(&small_spec(system), mode, Some(&stats), 0.01, case as u64).unwrap();
        let e = step_gradcheck(&d, &random(&mut rng, &[c, 8, 8], -0.9, 0.9));
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst.0 < GRAD_TOL && secs < 60.0,
        format!("max rel err {:.2e} ({}) over {GRAD_CASES} inputs per op, {secs:.1}s", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- stencils

fn stencils() -> Outcome {
    let f = |x: f64, y: f64| x.sin() * (2.0 * y).cos() + 0.5 * (3.0 * x + y).cos();
    let fx = |x: f64, y: f64| x.cos() * (2.0 * y).cos() - 1.5 * (3.0 * x + y).sin();
    let fy = |x: f64, y: f64| -2.0 * x.sin() * (2.0 * y).sin() - 0.5 * (3.0 * x + y).sin();
    let lap = |x: f64, y: f64| -5.0 * x.sin() * (2.0 * y).cos() - 5.0 * (3.0 * x + y).cos();
    let div = move |x: f64, y: f64| fx(x, y) + fy(x, y);
    let mut worst = (0.0f64, String::new());
    for order in [2, 4, 6, 8] {
        for (kind, exact) in [
            (StencilKind::GradX, &fx as &dyn Fn(f64, f64) -> f64),
            (StencilKind::GradY, &fy),
            (StencilKind::Laplacian, &lap),
            (StencilKind::Divergence, &div),
        ] {
            let m = measure_order(kind, order, TAU, &f, exact, &[32, 64, 128]).unwrap();
            let dev = (m.slope - order as f64).abs();
            if dev >= worst.0 {
                worst = (dev, format!("{kind:?} order {order} slope {:.3}", m.slope));
            }
        }
    }
    outcome(worst.0 <= STENCIL_BAND, format!("worst deviation {:.3} ({})", worst.0, worst.1))
}

// ---------------------------------------------------------------- fft

fn fft() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let (mut rt, mut pv) = (0.0f64, 0.0f64);
    for (h, w) in [(4, 4), (8, 6), (16, 16), (32, 64), (64, 64), (10, 12)] {
        for _ in 0..4 {
            let f = random(&mut rng, &[h, w], -1.0, 1.0);
            let back = ifft2(&fft2(&f, 0.1, 0.2).unwrap()).unwrap();
            let num: f64 = f.data().iter().zip(back.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = f.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            rt = rt.max(num / den);
            let physical: f64 = f.data().iter().map(|x| x * x).sum();
            let spectral = fft2(&f, 1.0, 1.0).unwrap().energy();
            pv = pv.max((physical - spectral).abs() / physical);
        }
    }
    outcome(rt <= FFT_ROUND_TRIP && pv <= PARSEVAL, format!("round trip {rt:.2e}, Parseval {pv:.2e}"))
}

// ---------------------------------------------------------------- solvers

fn incompressible_solver() -> Outcome {
    let mut worst_div = 0.0f64;
    let mut monotone = true;
    let mut slowest = 0.0f64;
    for (alpha, beta) in [(0.5, 0.5), (1.0, 1.0), (0.3, 0.2)] {
        let p = SimParams {
            system: System::Incompressible,
            alpha,
            beta,
            coefficient: 0.001,
            grid: 64,
            dt: 0.001,
            t_final: 0.25,
        };
        let t0 = Instant::now();
        let tr = solve_incompressible(&p, 1).unwrap();
        slowest = slowest.max(t0.elapsed().as_secs_f64());
        let mut last = f64::INFINITY;
        for k in 0..tr.n_frames() {
            let f = tr.frame(k);
            let (u, v) = f.data().split_at(64 * 64);
            worst_div = worst_div.max(spectral_divergence(64, u, v).unwrap());
            let e = 0.5 * f.data().iter().map(|x| x * x).sum::<f64>();
            monotone &= e <= last * (1.0 + 1e-12);
            last = e;
        }
    }
    outcome(
        worst_div <= DIVERGENCE && monotone && slowest < 60.0,
        format!("max |div v| {worst_div:.2e}, energy monotone {monotone}, slowest {slowest:.1}s"),
    )
}

fn compressible_solver() -> Outcome {
    let n = 64 * 64;
    let uniform = SimParams {
        system: System::Compressible,
        alpha: 0.0,
        beta: 1.0,
        coefficient: 1.4,
        grid: 64,
        dt: 0.001,
        t_final: 0.2,
    };
    let s0 = [vec![1.3; n], vec![0.2; n], vec![-0.1; n], vec![2.5; n]];
    let tr = solve_compressible_from(&uniform, s0.clone(), 20, true).unwrap();
    let stationary = (0..tr.n_frames()).all(|k| {
        tr.frame(k)
            .data()
            .chunks(n)
            .enumerate()
            .all(|(c, plane)| plane.iter().all(|&v| v == s0[c][0]))
    });
    let mut drift = 0.0f64;
    let mut positive = true;
    for (alpha, beta, gamma) in [(0.1, 1.0, 5.0 / 3.0), (0.5, 5.0, 5.0 / 3.0), (1.0, 10.0, 2.0 / 3.0), (0.5, 5.0, 2.0 / 3.0)] {
        let p = SimParams {
            system: System::Compressible,
            alpha,
            beta,
            coefficient: gamma,
            grid: 64,
            dt: 0.001,
            t_final: 2.0,
        };
        let tr = solve_compressible(&p, 20).unwrap();
        let mass = |k: usize| tr.frame(k).data()[..n].iter().sum::<f64>();
        let m0 = mass(0);
        for k in 0..tr.n_frames() {
            drift = drift.max((mass(k) - m0).abs() / m0);
            positive &= tr.frame(k).data()[..n].iter().all(|&r| r > 0.0);
        }
    }
    outcome(
        stationary && drift <= MASS_DRIFT && positive,
        format!("uniform stationary {stationary}, max mass drift {drift:.2e}, rho > 0 {positive}"),
    )
}

// ---------------------------------------------------------------- splitting

fn splitting() -> Outcome {
    let a = Matrix2::new(0.0, 1.0, -1.0, 0.0);
    let b = Matrix2::new(-1.0, 0.0, 0.5, -2.0);
    let flow = |m: Matrix2<f64>| {
        move |u: &Vec<f64>, h: f64| -> opssplit_core::Result<Vec<f64>> {
            let y = (m * h).exp() * Vector2::new(u[0], u[1]);
            Ok(vec![y[0], y[1]])
        }
    };
    let u0 = vec![1.0, 0.5];
    let target = (a + b).exp() * Vector2::new(u0[0], u0[1]);
    let err = |u: &[f64]| ((u[0] - target[0]).powi(2) + (u[1] - target[1]).powi(2)).sqrt().ln();
    let ns = [8usize, 16, 32, 64];
    let hs: Vec<f64> = ns.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let slope = |strang: bool| {
        let es: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let (mut fa, mut fb) = (flow(a), flow(b));
                let mut u = u0.clone();
                for _ in 0..n {
                    u = if strang {
                        strang_compose(&mut fa, &mut fb, &u, 1.0 / n as f64).unwrap()
                    } else {
                        lie_compose(&mut fa, &mut fb, &u, 1.0 / n as f64).unwrap()
                    };
                }
                err(&u)
            })
            .collect();
        fit_slope(&hs, &es)
    };
    let es: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let mut f = |u: &Vec<f64>| {
                let y = (a + b) * Vector2::new(u[0], u[1]);
                Ok(vec![y[0], y[1]])
            };
            let mut u = u0.clone();
            for _ in 0..n {
                u = rk4_step(&VecSpace, &mut f, &u, 1.0 / n as f64).unwrap();
            }
            err(&u)
        })
        .collect();
    let (s, l, r) = (slope(true), slope(false), fit_slope(&hs, &es));
    outcome(
        s >= 1.8 && (0.8..=1.2).contains(&l) && r >= 3.5,
        format!("Strang {s:.3}, Lie {l:.3}, RK4 {r:.3}"),
    )
}

// ---------------------------------------------------------------- theorem

fn theorem() -> Outcome {
    let t0 = Instant::now();
    let setup = TheoremSetup::default();
    let t = theorem_shift_harness(&setup).unwrap();
    let span = setup.shifts.iter().cloned().fold(0.0, f64::max) / setup.shifts.iter().cloned().fold(f64::INFINITY, f64::min);
    let closed = t
        .rows
        .iter()
        .map(|r| (r.err_node - r.node_closed_form).abs() / r.node_closed_form)
        .fold(0.0, f64::max);
    let errs: Vec<f64> = t.rows.iter().map(|r| r.err_opssplit).collect();
    let lo = errs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = errs.iter().cloned().fold(0.0, f64::max);
    let var = (hi - lo) / lo;
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        closed <= THEOREM_TOL
            && span >= 10.0
            && var <= 0.10
            && (t.slope_node - 1.0).abs() <= 0.1
            && t.slope_opssplit.abs() <= 0.1
            && secs < 60.0,
        format!(
            "NODE closed-form rel err {closed:.1e}, OpsSplit variation {:.1}% over {span:.0}x, slopes NODE {:.3} OpsSplit {:.3}, {secs:.2}s",
            100.0 * var,
            t.slope_node,
            t.slope_opssplit
        ),
    )
}

// ---------------------------------------------------------------- identities

fn identities() -> Outcome {
    let mut worst = 0.0f64;
    let x = [0.3, -1.2, 2.5, 0.7];
    worst = worst.max(relative_lp(&x, &x, 2.0, 1e-6).unwrap().abs());
    worst = worst.max(nrmse(&x, &x).unwrap().abs());
    let t = [1.0, -2.0, 0.5, 3.0];
    let a = relative_lp(&x, &t, 2.0, 0.0).unwrap();
    for c in [1e-3, 0.5, 7.0, 1e4] {
        let sx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let st: Vec<f64> = t.iter().map(|v| c * v).collect();
        worst = worst.max((relative_lp(&sx, &st, 2.0, 0.0).unwrap() - a).abs());
    }
    worst = worst.max((relative_lp(&[0.0, 0.0], &[3.0, 4.0], 2.0, 0.0).unwrap() - 1.0).abs());
    worst = worst.max((nrmse(&[0.0; 16], &[1.0; 16]).unwrap() - (1.0 / (1.0 + 1e-6f64)).sqrt()).abs());
    outcome(worst <= IDENTITY_TOL, format!("max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- end to end

fn cfg(overrides: &[String]) -> RunConfig {
    resolve(None, overrides).unwrap()
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

struct TrendRun {
    ood: Option<f64>,
    /// Per-step error at the last OOD extrapolation frame; infinite when the
    /// rollout stopped early.
    final_frame: f64,
    residual: Option<(f64, f64)>,
}

fn summarise(report: &EvalReport, train_horizon: usize) -> TrendRun {
    let ood = report.scenario(Split::Ood).and_then(|s| s.nrmse);
    let final_frame = report
        .scenario(Split::OodTExtrapolate)
        .and_then(|s| s.curve.last().filter(|p| p.frame == s.horizon).map(|p| p.nrmse_mean))
        .unwrap_or(f64::INFINITY);
    let residual = report
        .residual
        .as_ref()
        .and_then(|r| r.iter().find(|p| p.frame == train_horizon))
        .map(|p| (p.predicted, p.reference));
    TrendRun { ood, final_frame, residual }
}

/// Desk training of all three modes per seed on one incompressible dataset.
fn trend_runs(root: &Path) -> (BTreeMap<(u64, Mode), TrendRun>, f64) {
    let t0 = Instant::now();
    let data = root.join("inc");
    commands::gen(&cfg(&[format!("seed={DATA_SEED}")]), &data, true).unwrap();
    let horizon = {
        let splits = commands::load_splits(&data).unwrap();
        splits[&Split::Train].n_frames() - 1
    };
    let mut runs = BTreeMap::new();
    for seed in SEEDS {
        let c = cfg(&[format!("seed={seed}")]);
        for mode in Mode::ALL {
            let dir = root.join(format!("trend/{seed}/{}", mode.name()));
            let train = dir.join("train");
            commands::train_cmd(&c, mode, &data, &train, &[], true).unwrap();
            let (report, _) = commands::eval_cmd(&c, EvalSource::Checkpoints(&train), &data, &dir.join("eval"), true).unwrap();
            let run = summarise(&report, horizon);
            println!(
                "  seed {seed} {:8} ood {:?} final-frame {:.4} residual {:?}",
                mode.name(),
                run.ood,
                run.final_frame,
                run.residual
            );
            runs.insert((seed, mode), run);
        }
    }
    (runs, t0.elapsed().as_secs_f64())
}

fn trend(runs: &BTreeMap<(u64, Mode), TrendRun>, secs: f64) -> Outcome {
    let score = |s: u64, m: Mode| runs[&(s, m)].ood.unwrap_or(f64::INFINITY);
    let held: Vec<u64> = SEEDS
        .iter()
        .copied()
        .filter(|&s| score(s, Mode::Opssplit) < score(s, Mode::Node) && score(s, Mode::Node) < score(s, Mode::Ar))
        .collect();
    let detail: Vec<String> = SEEDS
        .iter()
        .map(|&s| {
            format!(
                "seed {s}: {:.3}/{:.3}/{:.3}",
                score(s, Mode::Opssplit),
                score(s, Mode::Node),
                score(s, Mode::Ar)
            )
        })
        .collect();
    outcome(
        held.len() >= 2 && secs <= TREND_SECONDS,
        format!(
            "OOD OpsSplit/NODE/AR {}; ordering in {} of 3 seeds; {:.1} min",
            detail.join(", "),
            held.len(),
            secs / 60.0
        ),
    )
}

fn stability(runs: &BTreeMap<(u64, Mode), TrendRun>) -> Outcome {
    let held = SEEDS
        .iter()
        .filter(|&&s| runs[&(s, Mode::Opssplit)].final_frame <= runs[&(s, Mode::Node)].final_frame)
        .count();
    let residuals: Vec<(f64, f64)> = SEEDS.iter().filter_map(|&s| runs[&(s, Mode::Opssplit)].residual).collect();
    let residual_ok = residuals.len() == SEEDS.len() && residuals.iter().all(|(p, r)| *p <= 2.0 * r);
    let frames: Vec<String> = SEEDS
        .iter()
        .map(|&s| format!("{:.3}<={:.3}", runs[&(s, Mode::Opssplit)].final_frame, runs[&(s, Mode::Node)].final_frame))
        .collect();
    let res: Vec<String> = residuals.iter().map(|(p, r)| format!("{p:.3}/{r:.3}")).collect();
    outcome(
        held >= 2 && residual_ok,
        format!(
            "final OOD frame OpsSplit<=NODE {} ({} of 3); residual/floor {}",
            frames.join(", "),
            held,
            res.join(", ")
        ),
    )
}

/// Epochs (1-based) the warm run needs to reach the scratch run's epoch-N
/// test loss, for the N with the largest saving.
fn transfer_gain(scratch: &LossRecord, warm: &LossRecord) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for (n, s) in scratch.epochs.iter().enumerate().map(|(k, e)| (k + 1, e.test_loss)) {
        if let Some(k) = warm.epochs.iter().position(|e| e.test_loss <= s).map(|k| k + 1) {
            if 2 * k <= n && best.map_or(true, |(bn, bk)| (n - 2 * k) > (bn - 2 * bk)) {
                best = Some((n, k));
            }
        }
    }
    best
}

fn transfer(root: &Path) -> Outcome {
    let data = root.join("comp");
    let budget = ["data.system=compressible", "train.epochs=20", "train.windows_per_epoch=64", "train.lr_period=7"];
    let mut gen_cfg = strings(&budget);
    gen_cfg.push(format!("seed={DATA_SEED}"));
    commands::gen(&cfg(&gen_cfg), &data, true).unwrap();
    let mut held = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let mut o = strings(&budget);
        o.push(format!("seed={seed}"));
        let c = cfg(&o);
        let source = commands::checkpoint_path(
            &root.join(format!("trend/{seed}/opssplit/train")),
            opssplit_cli::config::Which::Final,
            "conv",
        );
        let dir = root.join(format!("transfer/{seed}"));
        let scratch = commands::train_cmd(&c, Mode::Opssplit, &data, &dir.join("scratch"), &[], true).unwrap();
        let warm = commands::train_cmd(&c, Mode::Opssplit, &data, &dir.join("warm"), &[("conv".into(), source)], true).unwrap();
        match transfer_gain(&scratch.record, &warm.record) {
            Some((n, k)) => {
                held += 1;
                detail.push(format!("seed {seed}: scratch epoch {n} reached in {k}"));
            }
            None => detail.push(format!("seed {seed}: no N with warm <= N/2")),
        }
    }
    outcome(held >= 2, format!("{} ({held} of 3 seeds)", detail.join(", ")))
}

// ---------------------------------------------------------------- determinism

fn tiny() -> Vec<String> {
    strings(&[
        "data.grid=16",
        "data.n_train=3",
        "data.n_test=2",
        "data.n_ood=2",
        "data.t_final=0.02",
        "data.t_extrapolate=0.04",
        "model.modes=2",
        "model.width=4",
        "model.layers=1",
        "model.split_layers=1",
        "train.epochs=2",
        "train.windows_per_epoch=4",
        "train.test_windows=2",
        "train.rollout=2",
        "train.batch=2",
        "theorem.grid=16",
    ])
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "timing.csv") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_all_commands(out: &Path, data: &Path) {
    let c = cfg(&tiny());
    commands::gen(&c, &out.join("gen"), true).unwrap();
    let train = out.join("train");
    commands::train_cmd(&c, Mode::Opssplit, data, &train, &[], true).unwrap();
    commands::eval_cmd(&c, EvalSource::Checkpoints(&train), data, &out.join("eval"), true).unwrap();
    commands::eval_cmd(&c, EvalSource::Oracle, data, &out.join("oracle"), true).unwrap();
    commands::theorem_cmd(&c, &out.join("theorem"), true).unwrap();
    commands::ablate_cmd(
        None,
        &tiny(),
        commands::Axis::FdOrder,
        &strings(&["2", "4"]),
        &Mode::ALL,
        data,
        &out.join("ablate"),
        true,
    )
    .unwrap();
    let args = commands::CompareArgs {
        checkpoint: &train,
        data,
        split: Split::Test,
        trajectory: 0,
        frame: None,
        out: &out.join("compare"),
        force: true,
    };
    commands::compare_ops_cmd(&c, &args).unwrap();
}

fn determinism(root: &Path) -> Outcome {
    let data = root.join("det/data");
    commands::gen(&cfg(&tiny()), &data, true).unwrap();
    let (a, b) = (root.join("det/a"), root.join("det/b"));
    run_all_commands(&a, &data);
    run_all_commands(&b, &data);
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    outcome(
        differing.is_empty() && !fa.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts identical across reruns", fa.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let root = work_dir();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("autodiff", autodiff());
    report("stencil-orders", stencils());
    report("fft", fft());
    report("incompressible-solver", incompressible_solver());
    report("compressible-solver", compressible_solver());
    report("splitting-orders", splitting());
    report("theorem-harness", theorem());
    report("loss-metric-identities", identities());
    report("determinism", determinism(&root));
    let (runs, secs) = trend_runs(&root);
    report("end-to-end-trend", trend(&runs, secs));
    report("rollout-stability", stability(&runs));
    report("transfer", transfer(&root));
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
