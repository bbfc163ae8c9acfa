use opssplit_core::datagen::System;
use opssplit_core::dynamics::{Dynamics, Mode};
use opssplit_core::integrate::IntegratorConfig;
use opssplit_core::metrics::{nrmse, NRMSE_EPS};
use opssplit_core::neural::{build_model, OperatorConfig};
use opssplit_core::rhs::StateWeight;
use opssplit_core::setup::{build_dynamics, DynamicsSpec, ModelSpec};
use opssplit_core::train::{
    epoch_windows, lr_at, relative_lp, relative_lp_loss, train, train_window_loss, Adam, TrainConfig, Window,
    WindowSource,
};
use opssplit_core::CoreError;
use opssplit_tensor::{Tape, Tensor};
use proptest::prelude::*;

#[test]
fn relative_loss_unit_cases() {
    assert_eq!(relative_lp(&[0.0, 0.0], &[3.0, 4.0], 2.0, 0.0).unwrap(), 1.0);
    assert_eq!(relative_lp(&[1.0, -2.0, 3.0], &[1.0, -2.0, 3.0], 2.0, 1e-6).unwrap(), 0.0);
    // ‖(1, 1)‖₁ / ‖(2, 0)‖₁
    assert_eq!(relative_lp(&[3.0, 1.0], &[2.0, 0.0], 1.0, 0.0).unwrap(), 1.0);
    assert!(relative_lp(&[1.0], &[1.0, 2.0], 2.0, 0.0).is_err());
    assert!(relative_lp(&[1.0], &[1.0], 0.5, 0.0).is_err());
}

proptest! {
    #[test]
    fn relative_loss_scale_invariant(
        pred in prop::collection::vec(-5.0f64..5.0, 6),
        target in prop::collection::vec(0.5f64..5.0, 6),
        c in 0.01f64..100.0,
        p in prop::sample::select(vec![1.0, 2.0, 3.0]),
    ) {
        let a = relative_lp(&pred, &target, p, 0.0).unwrap();
        let sp: Vec<f64> = pred.iter().map(|v| c * v).collect();
        let st: Vec<f64> = target.iter().map(|v| c * v).collect();
        let b = relative_lp(&sp, &st, p, 0.0).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn tape_loss_matches_plain(pred in prop::collection::vec(-2.0f64..2.0, 8), target in prop::collection::vec(-2.0f64..2.0, 8)) {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2, 2, 2], pred.clone()).unwrap(), true);
        let t = tape.constant(Tensor::new(vec![2, 2, 2], target.clone()).unwrap());
        let l = relative_lp_loss(&tape, p, t, 2.0, 1e-6).unwrap();
        let v = tape.value(l).item().unwrap();
        let w = relative_lp(&pred, &target, 2.0, 1e-6).unwrap();
        prop_assert!((v - w).abs() <= 1e-12 * (1.0 + w));
    }

    #[test]
    fn nrmse_symmetric_and_nonnegative(pred in prop::collection::vec(-3.0f64..3.0, 5), target in prop::collection::vec(-3.0f64..3.0, 5)) {
        let a = nrmse(&pred, &target).unwrap();
        let np: Vec<f64> = pred.iter().map(|v| -v).collect();
        let nt: Vec<f64> = target.iter().map(|v| -v).collect();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, nrmse(&np, &nt).unwrap());
    }
}

#[test]
fn nrmse_unit_cases() {
    assert_eq!(nrmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    let c = nrmse(&[0.0; 9], &[1.0; 9]).unwrap();
    assert!((c - (1.0 / (1.0 + 1e-6f64)).sqrt()).abs() <= 1e-12);
    assert_eq!(NRMSE_EPS, 1e-6);
    // mean sq err 1, mean sq target 4
    let v = nrmse(&[1.0, 3.0], &[2.0, 2.0]).unwrap();
    assert!((v - (1.0 / (4.0 + 1e-6f64)).sqrt()).abs() <= 1e-12);
    assert!(nrmse(&[], &[]).is_err());
}

#[test]
fn tape_loss_rejects_shape_mismatch() {
    let tape = Tape::new();
    let p = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let t = tape.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(matches!(relative_lp_loss(&tape, p, t, 2.0, 0.0), Err(CoreError::Shape(_))));
}

#[test]
fn adam_first_step_has_unit_magnitude() {
    let mut adam = Adam::new(&[3]);
    let mut p = vec![1.0, -1.0, 0.0];
    let g = vec![1.0, -4.0, 0.25];
    assert!(adam.step(&mut [&mut p[..]], &[&g[..]], 0.1).unwrap());
    // m̂ = g, v̂ = g², so each step is lr·sign(g) up to ε
    for (a, (b, gi)) in p.iter().zip([1.0, -1.0, 0.0].iter().zip(&g)) {
        let want = b - 0.1 * gi / (gi.abs() + 1e-8);
        assert!((a - want).abs() < 1e-15, "{a} vs {want}");
    }
}

#[test]
fn adam_second_step_closed_form() {
    let mut adam = Adam::new(&[1]);
    let mut p = vec![0.0];
    adam.step(&mut [&mut p[..]], &[&[2.0][..]], 0.01).unwrap();
    adam.step(&mut [&mut p[..]], &[&[-1.0][..]], 0.01).unwrap();
    let m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0;
    let v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0;
    let mh = m / (1.0 - 0.81);
    let vh = v / (1.0 - 0.999f64 * 0.999);
    let want = -0.01 * 2.0 / (2.0 + 1e-8) - 0.01 * mh / (vh.sqrt() + 1e-8);
    assert!((p[0] - want).abs() < 1e-15, "{} vs {want}", p[0]);
}

#[test]
fn adam_zero_gradient_decays_moments() {
    let mut adam = Adam::new(&[1]);
    let mut p = vec![0.0];
    adam.step(&mut [&mut p[..]], &[&[1.0][..]], 0.1).unwrap();
    let before = p[0];
    let m0 = adam.first_moment(0)[0];
    adam.step(&mut [&mut p[..]], &[&[0.0][..]], 0.1).unwrap();
    assert!((adam.first_moment(0)[0] - 0.9 * m0).abs() < 1e-16);
    // a zero gradient from rest leaves parameters untouched
    let mut fresh = Adam::new(&[2]);
    let mut q = vec![3.0, -2.0];
    fresh.step(&mut [&mut q[..]], &[&[0.0, 0.0][..]], 0.1).unwrap();
    assert_eq!(q, vec![3.0, -2.0]);
    assert!(p[0] != before);
}

#[test]
fn adam_skips_non_finite_gradients() {
    let mut adam = Adam::new(&[2]);
    let mut p = vec![1.0, 2.0];
    assert!(!adam.step(&mut [&mut p[..]], &[&[f64::NAN, 1.0][..]], 0.1).unwrap());
    assert_eq!(p, vec![1.0, 2.0]);
    assert_eq!(adam.t, 0);
    assert!(adam.step(&mut [&mut p[..]], &[&[1.0][..]], 0.1).is_err());
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut adam = Adam::new(&[1]);
    let mut x = vec![5.0];
    for _ in 0..500 {
        let g = vec![x[0]];
        adam.step(&mut [&mut x[..]], &[&g[..]], 0.05).unwrap();
    }
    assert!(x[0].abs() < 0.1, "{}", x[0]);
}

#[test]
fn learning_rate_halves_per_period() {
    assert_eq!(lr_at(1e-3, 20, 0), 1e-3);
    assert_eq!(lr_at(1e-3, 20, 19), 1e-3);
    assert_eq!(lr_at(1e-3, 20, 20), 5e-4);
    assert_eq!(lr_at(1e-3, 20, 59), 2.5e-4);
    for e in 0..200 {
        assert_eq!(lr_at(0.3, 7, e), 0.3 * 2f64.powi(-((e / 7) as i32)));
    }
}

fn constant_source(c: usize, frames: usize, n: usize) -> WindowSource {
    let per = c * n * n;
    let data: Vec<f64> = (0..frames).flat_map(|_| (0..per).map(|k| 0.1 * (k % 7) as f64 - 0.2)).collect();
    WindowSource { trajs: vec![Tensor::new(vec![frames, c, n, n], data).unwrap()] }
}

/// AR model whose output equals its input.
fn identity_ar(c: usize, n: usize) -> Dynamics {
    let cfg = OperatorConfig::spectral(c, c, 2, 4, 1);
    let mut m = build_model(&cfg, (n, n), 1).unwrap();
    m.zero();
    // lift: x → first c hidden channels, projection: hidden → out
    for (name, p) in m.names.iter().zip(m.params.iter_mut()) {
        let s = p.shape().to_vec();
        if (name.starts_with("lift") || name.starts_with("proj")) && s.len() == 2 {
            for i in 0..c {
                p.data_mut()[i * s[1] + i] = 1.0;
            }
        }
        if name.ends_with(".mix.w") {
            for i in 0..s[0] {
                p.data_mut()[i * s[1] + i] = 1.0;
            }
        }
    }
    Dynamics::autoregressive(m)
}

#[test]
fn identity_model_has_zero_loss_on_constant_data() {
    let (c, n) = (2, 8);
    let src = constant_source(c, 7, n);
    let d = identity_ar(c, n);
    let mut cfg = TrainConfig::desk(Mode::Ar, 1);
    for rollout in [1, 5] {
        cfg.rollout = rollout;
        let tape = Tape::new();
        let bound = d.bind(&tape, false, (n, n)).unwrap();
        let l = train_window_loss(&d, &tape, &bound, &src, Window { traj: 0, start: 0 }, &cfg).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-14, "rollout {rollout}");
    }
}

#[test]
fn rollout_one_is_single_step_loss() {
    let n = 8;
    let spec = small_spec(System::Incompressible, n);
    let d = build_dynamics(&spec, Mode::Node, None, 1.0, 3).unwrap();
    let src = ramp_source(2, 4, n);
    let mut cfg = TrainConfig::desk(Mode::Node, 1);
    cfg.rollout = 1;
    let tape = Tape::new();
    let bound = d.bind(&tape, false, (n, n)).unwrap();
    let w = Window { traj: 0, start: 1 };
    let l = train_window_loss(&d, &tape, &bound, &src, w, &cfg).unwrap();
    let (pred, err) = d.rollout(&src.frame(w, 0), 1);
    assert!(err.is_none());
    let direct = relative_lp(pred[0].data(), src.frame(w, 1).data(), 2.0, 1e-6).unwrap();
    assert!((tape.value(l).item().unwrap() - direct).abs() < 1e-14);
}

fn small_spec(system: System, n: usize) -> DynamicsSpec {
    let mut model = ModelSpec::desk(system);
    model.modes = 2;
    model.width = 4;
    model.layers = 2;
    model.split_layers = 1;
    DynamicsSpec {
        system,
        model,
        fd_order: 2,
        integrator: IntegratorConfig::default(),
        pressure_weight: StateWeight::LnDensity,
        terms: vec![],
        coefficient: 0.001,
        grid: (n, n),
        dx: 2.0 / n as f64,
        dy: 2.0 / n as f64,
    }
}

fn ramp_source(c: usize, frames: usize, n: usize) -> WindowSource {
    let per = c * n * n;
    let trajs = (0..2)
        .map(|t| {
            let data: Vec<f64> = (0..frames * per)
                .map(|k| ((k % per) as f64 * 0.37 + (k / per) as f64 * 0.05 + t as f64).sin() * 0.5)
                .collect();
            Tensor::new(vec![frames, c, n, n], data).unwrap()
        })
        .collect();
    WindowSource { trajs }
}

#[test]
fn window_order_is_mode_independent() {
    let src = ramp_source(2, 9, 4);
    let all = src.windows(5);
    assert_eq!(all.len(), 2 * 4);
    let a = epoch_windows(&all, &TrainConfig::desk(Mode::Ar, 7), 3);
    let b = epoch_windows(&all, &TrainConfig::desk(Mode::Opssplit, 7), 3);
    assert_eq!(a, b);
    assert_ne!(a, epoch_windows(&all, &TrainConfig::desk(Mode::Ar, 7), 4));
}

fn quick_cfg(mode: Mode) -> TrainConfig {
    let mut cfg = TrainConfig::desk(mode, 5);
    cfg.epochs = 3;
    cfg.windows_per_epoch = 0;
    cfg.test_windows = 0;
    cfg.rollout = 2;
    cfg.batch = 2;
    cfg.lr = 5e-3;
    cfg
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let n = 8;
    for mode in Mode::ALL {
        let spec = small_spec(System::Incompressible, n);
        let src = ramp_source(2, 6, n);
        let run = || {
            let d = build_dynamics(&spec, mode, None, 1.0, 11).unwrap();
            train(d, &src, &src, &quick_cfg(mode)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.final_dynamics.models, b.final_dynamics.models, "{mode:?}");
        let e = &a.record.epochs;
        assert_eq!(e.len(), 3);
        assert!(e[2].train_loss < e[0].train_loss, "{mode:?}: {e:?}");
        assert!(a.best_epoch < 3);
    }
}

#[test]
fn persistent_divergence_aborts() {
    let n = 8;
    let spec = small_spec(System::Incompressible, n);
    let mut d = build_dynamics(&spec, Mode::Ar, None, 1.0, 11).unwrap();
    for p in &mut d.models[0].params {
        p.data_mut().iter_mut().for_each(|v| *v *= 1e4);
    }
    let src = ramp_source(2, 6, n);
    match train(d, &src, &src, &quick_cfg(Mode::Ar)) {
        Err(e) => assert!(e.is_numerical(), "{e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn invalid_training_config_rejected() {
    let base = TrainConfig::desk(Mode::Node, 1);
    let mut bad = vec![];
    for f in [
        |c: &mut TrainConfig| c.rollout = 0,
        |c: &mut TrainConfig| c.lr = 0.0,
        |c: &mut TrainConfig| c.batch = 0,
        |c: &mut TrainConfig| c.loss_p = 0.5,
        |c: &mut TrainConfig| c.lr_period = 0,
    ] {
        let mut c = base.clone();
        f(&mut c);
        bad.push(c);
    }
    for c in bad {
        assert!(c.validate().is_err());
    }
    assert!(base.validate().is_ok());
}
