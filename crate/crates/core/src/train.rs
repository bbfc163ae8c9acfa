//! Relative-Lp rollout training with Adam and a step-decay schedule.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use opssplit_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dynamics, Mode};
use crate::error::{CoreError, Result};
use crate::rng;

/// ‖pred − target‖_p / (‖target‖_p + ε) on the tape; `target` is constant.
pub fn relative_lp_loss(tape: &Tape, pred: Var, target: Var, p: f64, eps: f64) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(CoreError::Shape(format!(
            "loss operands {:?} and {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let diff = tape.sub(pred, target)?;
    let num = tape.lp_norm(diff, p)?;
    let den = tape.lp_norm(target, p)?;
    let den = tape.add_scalar(den, eps)?;
    Ok(tape.div(num, den)?)
}

/// Plain-value version of [`relative_lp_loss`].
pub fn relative_lp(pred: &[f64], target: &[f64], p: f64, eps: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(CoreError::Shape(format!("loss operands of length {} and {}", pred.len(), target.len())));
    }
    if p < 1.0 {
        return Err(CoreError::Config(format!("p-norm needs p >= 1, got {p}")));
    }
    let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p);
    let num = norm(&mut pred.iter().zip(target).map(|(a, b)| a - b));
    let den = norm(&mut target.iter().copied());
    Ok(num / (den + eps))
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moment(&self, k: usize) -> &[f64] {
        &self.m[k]
    }

    /// Bias-corrected update. A non-finite gradient skips the step and
    /// returns `false`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CoreError::Shape("optimiser state does not match parameters".into()));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(CoreError::Shape(format!("parameter {k} length changed")));
            }
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            warn!("non-finite gradient; optimiser step skipped");
            return Ok(false);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

/// lr₀ · 2^{−⌊epoch / period⌋}
pub fn lr_at(lr0: f64, period: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / period.max(1)) as i32)
}

fn default_p() -> f64 {
    2.0
}

fn default_eps() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub lr: f64,
    pub lr_period: usize,
    pub rollout: usize,
    pub batch: usize,
    /// Windows drawn per epoch; 0 uses every window once.
    pub windows_per_epoch: usize,
    /// Test windows scored per epoch; 0 uses all.
    pub test_windows: usize,
    #[serde(default = "default_p")]
    pub loss_p: f64,
    #[serde(default = "default_eps")]
    pub loss_eps: f64,
    pub seed: u64,
    #[serde(default)]
    pub warm_start: BTreeMap<String, PathBuf>,
}

impl TrainConfig {
    pub fn desk(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            epochs: 60,
            lr: 1e-3,
            lr_period: 20,
            rollout: 5,
            batch: 4,
            windows_per_epoch: 128,
            test_windows: 32,
            loss_p: 2.0,
            loss_eps: 1e-6,
            seed,
            warm_start: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollout == 0 || self.batch == 0 || self.epochs == 0 || !(self.lr > 0.0) || self.lr_period == 0 {
            return Err(CoreError::Config(format!("invalid training config {self:?}")));
        }
        if self.loss_p < 1.0 || self.loss_eps < 0.0 {
            return Err(CoreError::Config("loss needs p >= 1 and eps >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
    pub seconds: f64,
    pub skipped_windows: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub epochs: Vec<EpochRecord>,
}

impl LossRecord {
    /// `epoch,train_loss,test_loss,lr,config_hash`; timings are kept out so
    /// that reruns are byte-identical.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = String::from("epoch,train_loss,test_loss,lr,config_hash\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{}\n",
                e.epoch, e.train_loss, e.test_loss, e.lr, config_hash
            ));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.3}\n", e.epoch, e.seconds));
        }
        s
    }
}

/// A start frame within one normalised trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
}

/// Normalised trajectories `[T, C, H, W]` with frame accessors.
pub struct WindowSource {
    pub trajs: Vec<Tensor>,
}

impl WindowSource {
    /// Normalise every trajectory of `ds` with `stats`.
    pub fn from_dataset(ds: &crate::datagen::Dataset, stats: &crate::datagen::NormStats) -> Self {
        let trajs = ds
            .trajectories
            .iter()
            .map(|t| {
                let s = t.frames.shape().to_vec();
                let mut data = Vec::with_capacity(t.frames.len());
                for k in 0..t.n_frames() {
                    data.extend_from_slice(stats.normalize(&t.frame(k)).data());
                }
                Tensor::new(s, data).expect("shape")
            })
            .collect();
        Self { trajs }
    }

    pub fn frame(&self, w: Window, offset: usize) -> Tensor {
        let t = &self.trajs[w.traj];
        let s = t.shape();
        let n: usize = s[1..].iter().product();
        let k = w.start + offset;
        Tensor::new(s[1..].to_vec(), t.data()[k * n..(k + 1) * n].to_vec()).expect("shape")
    }

    pub fn windows(&self, rollout: usize) -> Vec<Window> {
        let mut out = Vec::new();
        for (traj, t) in self.trajs.iter().enumerate() {
            let n = t.shape()[0];
            for start in 0..n.saturating_sub(rollout) {
                out.push(Window { traj, start });
            }
        }
        out
    }
}

/// Mean relative-Lp loss over the `rollout` predicted frames of one window.
pub fn train_window_loss(
    dynamics: &Dynamics,
    tape: &Tape,
    bound: &[crate::neural::BoundModel],
    src: &WindowSource,
    w: Window,
    cfg: &TrainConfig,
) -> Result<Var> {
    let u0 = tape.constant(src.frame(w, 0));
    let preds = dynamics.rollout_tape(tape, bound, u0, cfg.rollout)?;
    let mut total: Option<Var> = None;
    for (k, p) in preds.iter().enumerate() {
        let target = tape.constant(src.frame(w, k + 1));
        let l = relative_lp_loss(tape, *p, target, cfg.loss_p, cfg.loss_eps)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.expect("rollout >= 1"), 1.0 / cfg.rollout as f64)?)
}

fn window_value(dynamics: &Dynamics, src: &WindowSource, w: Window, cfg: &TrainConfig) -> Result<f64> {
    let tape = Tape::new();
    let grid = {
        let s = src.trajs[w.traj].shape();
        (s[2], s[3])
    };
    let bound = dynamics.bind(&tape, false, grid)?;
    let l = train_window_loss(dynamics, &tape, &bound, src, w, cfg)?;
    Ok(tape.value(l).item().expect("scalar"))
}

/// Evenly spaced subset of at most `k` windows (all if `k == 0`).
pub fn spread(windows: &[Window], k: usize) -> Vec<Window> {
    if k == 0 || k >= windows.len() {
        return windows.to_vec();
    }
    (0..k).map(|i| windows[i * windows.len() / k]).collect()
}

/// Mean window loss over `windows`, ignoring diverged windows; `None` if
/// every window diverged.
pub fn mean_loss(dynamics: &Dynamics, src: &WindowSource, windows: &[Window], cfg: &TrainConfig) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0;
    for &w in windows {
        match window_value(dynamics, src, w, cfg) {
            Ok(v) => {
                sum += v;
                n += 1;
            }
            Err(e) if e.is_numerical() => {}
            Err(e) => return Err(e),
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

pub struct TrainOutcome {
    pub final_dynamics: Dynamics,
    pub best_dynamics: Dynamics,
    pub best_epoch: usize,
    pub record: LossRecord,
}

/// Epoch order of training windows: a seeded shuffle that depends only on
/// the training seed and the epoch, never on the mode.
pub fn epoch_windows(all: &[Window], cfg: &TrainConfig, epoch: usize) -> Vec<Window> {
    let mut order = all.to_vec();
    let mut r = rng::stream(cfg.seed, &format!("windows/{epoch}"));
    order.shuffle(&mut r);
    if cfg.windows_per_epoch > 0 {
        order.truncate(cfg.windows_per_epoch);
    }
    order
}

pub fn train(mut dynamics: Dynamics, train: &WindowSource, test: &WindowSource, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let all = train.windows(cfg.rollout);
    if all.is_empty() {
        return Err(CoreError::Config(format!(
            "no training windows of length {} in the data",
            cfg.rollout + 1
        )));
    }
    let test_windows = spread(&test.windows(cfg.rollout), cfg.test_windows);
    let grid = {
        let s = train.trajs[0].shape();
        (s[2], s[3])
    };
    let sizes: Vec<usize> = dynamics.models.iter().flat_map(|m| m.params.iter().map(|p| p.len())).collect();
    let mut adam = Adam::new(&sizes);
    let mut record = LossRecord::default();
    let mut best: Option<(f64, usize, Dynamics)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(cfg.lr, cfg.lr_period, epoch);
        let order = epoch_windows(&all, cfg, epoch);
        let (mut loss_sum, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch) {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut used = 0usize;
            for &w in batch {
                let tape = Tape::new();
                let bound = dynamics.bind(&tape, true, grid)?;
                let loss = match train_window_loss(&dynamics, &tape, &bound, train, w, cfg) {
                    Ok(l) => l,
                    Err(e) if e.is_numerical() => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                loss_sum += tape.value(loss).item().expect("scalar");
                counted += 1;
                used += 1;
                let vars: Vec<Var> = bound.iter().flat_map(|b| b.vars.iter().copied()).collect();
                let grads = tape.backward(loss)?;
                for (a, v) in acc.iter_mut().zip(&vars) {
                    if let Some(g) = grads.get(*v) {
                        a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
            if used == 0 {
                continue;
            }
            acc.iter_mut().for_each(|a| a.iter_mut().for_each(|x| *x /= used as f64));
            let mut params: Vec<&mut [f64]> = dynamics
                .models
                .iter_mut()
                .flat_map(|m| m.params.iter_mut().map(|p| p.data_mut()))
                .collect();
            let grads: Vec<&[f64]> = acc.iter().map(|a| a.as_slice()).collect();
            adam.step(&mut params, &grads, lr)?;
        }
        if 2 * skipped > order.len() {
            return Err(CoreError::Numerical(format!(
                "{skipped} of {} training windows diverged in epoch {epoch}",
                order.len()
            )));
        }
        let train_loss = if counted > 0 { loss_sum / counted as f64 } else { f64::NAN };
        let test_loss = mean_loss(&dynamics, test, &test_windows, cfg)?.unwrap_or(f64::INFINITY);
        info!(
            "{} epoch {epoch}: train {train_loss:.4e} test {test_loss:.4e} lr {lr:.2e}",
            cfg.mode.name()
        );
        if best.as_ref().map_or(true, |(b, _, _)| test_loss < *b) {
            best = Some((test_loss, epoch, dynamics.clone()));
        }
        record.epochs.push(EpochRecord {
            epoch,
            train_loss,
            test_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            skipped_windows: skipped,
        });
    }
    let (_, best_epoch, best_dynamics) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_dynamics: dynamics,
        best_dynamics,
        best_epoch,
        record,
    })
}
