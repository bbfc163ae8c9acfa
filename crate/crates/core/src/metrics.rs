//! Evaluation: NRMSE per scenario, rollout error curves, continuity
//! residuals, the parameter-shift harness and learned-vs-numerical
//! operator comparison.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use log::warn;
use opssplit_tensor::{fft2, ifft2, signed_index, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::incompressible::projected_convection;
use crate::datagen::{Dataset, NormStats, Split, System};
use crate::dynamics::{Dynamics, Mode};
use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::integrate::{rk4_step, VecSpace};
use crate::neural::OperatorModel;
use crate::stencil::{apply_stencil, fit_slope, make_stencil, StencilKind};

pub const NRMSE_EPS: f64 = 1e-6;

/// √(mean (u − û)² / (mean u² + ε))
pub fn nrmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(CoreError::Shape(format!(
            "nrmse operands of length {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let se: f64 = pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum();
    let ss: f64 = target.iter().map(|t| t * t).sum();
    Ok((se / n / (ss / n + NRMSE_EPS)).sqrt())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Replace the system coefficient (ν or γ) of an OpsSplit model; other
/// modes have nowhere to put it and are returned unchanged.
pub fn inject_coefficient(dynamics: &mut Dynamics, system: System, value: f64) -> Result<Option<f64>> {
    if dynamics.mode != Mode::Opssplit {
        return Ok(None);
    }
    let rhs = dynamics
        .rhs
        .as_mut()
        .ok_or_else(|| CoreError::Config("OpsSplit dynamics without a right-hand side".into()))?;
    rhs.set_coefficient(system.coefficient_name(), value)?;
    Ok(Some(value))
}

/// Physical predictions for every trajectory: frames 1..=horizon, cut
/// short at the first diverged frame.
pub struct Predictions {
    pub frames: Vec<Vec<Tensor>>,
    /// First failing frame per trajectory.
    pub blow_up: Vec<Option<usize>>,
}

pub fn predict(dynamics: &Dynamics, ds: &Dataset, stats: &NormStats, horizon: usize) -> Result<Predictions> {
    if horizon + 1 > ds.n_frames() {
        return Err(CoreError::Config(format!(
            "horizon {horizon} exceeds the {} frames of '{}'",
            ds.n_frames(),
            ds.name
        )));
    }
    let mut frames = Vec::with_capacity(ds.trajectories.len());
    let mut blow_up = Vec::with_capacity(ds.trajectories.len());
    for tr in &ds.trajectories {
        let u0 = stats.normalize(&tr.frame(0));
        let (out, err) = dynamics.rollout(&u0, horizon);
        match err {
            None => blow_up.push(None),
            Some(CoreError::Diverged { frame, .. }) => blow_up.push(Some(frame)),
            Some(e) if e.is_numerical() => blow_up.push(Some(out.len() + 1)),
            Some(e) => return Err(e),
        }
        frames.push(out.iter().map(|f| stats.denormalize(f)).collect());
    }
    Ok(Predictions { frames, blow_up })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub frame: usize,
    pub nrmse_mean: f64,
    pub nrmse_std: f64,
    pub extrapolate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutCurve {
    pub points: Vec<CurvePoint>,
    pub train_horizon: usize,
    /// Earliest frame at which any trajectory diverged; the curve stops
    /// before it.
    pub blow_up_frame: Option<usize>,
}

impl RolloutCurve {
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = String::from("frame,nrmse_mean,nrmse_std,extrapolate,config_hash\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{:e},{:e},{},{}\n",
                p.frame, p.nrmse_mean, p.nrmse_std, p.extrapolate as u8, config_hash
            ));
        }
        s
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }
}

/// Per-frame NRMSE averaged over trajectories; frames past
/// `train_horizon` are flagged as extrapolation.
pub fn rollout_error_curve(pred: &Predictions, ds: &Dataset, train_horizon: usize) -> Result<RolloutCurve> {
    let blow_up_frame = pred.blow_up.iter().flatten().min().copied();
    let valid = pred.frames.iter().map(|f| f.len()).min().unwrap_or(0);
    let mut points = Vec::with_capacity(valid);
    for k in 1..=valid {
        let errs = pred
            .frames
            .iter()
            .zip(&ds.trajectories)
            .map(|(p, tr)| nrmse(p[k - 1].data(), tr.frame(k).data()))
            .collect::<Result<Vec<_>>>()?;
        let (m, s) = mean_std(&errs);
        points.push(CurvePoint {
            frame: k,
            nrmse_mean: m,
            nrmse_std: s,
            extrapolate: k > train_horizon,
        });
    }
    Ok(RolloutCurve {
        points,
        train_horizon,
        blow_up_frame,
    })
}

/// Mean |∇·v| per frame of a velocity sequence `[u, v]` (physical units).
pub fn continuity_residual(frames: &[Tensor], order: usize, dx: f64, dy: f64) -> Result<Vec<f64>> {
    let k = make_stencil(StencilKind::Divergence, order, dx, dy)?;
    frames
        .iter()
        .map(|f| {
            if f.rank() != 3 || f.shape()[0] != 2 {
                return Err(CoreError::Shape(format!("continuity residual needs [2, H, W], got {:?}", f.shape())));
            }
            let d = apply_stencil(&Field::new(f.clone(), dx, dy)?, &k)?;
            let n = d.data.len() as f64;
            Ok(d.data.data().iter().map(|x| x.abs()).sum::<f64>() / n)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub frame: usize,
    pub predicted: f64,
    pub reference: f64,
    pub extrapolate: bool,
}

/// Trajectory-averaged residuals of predictions and reference data,
/// frames 0..=valid horizon.
pub fn residual_series(
    pred: &Predictions,
    ds: &Dataset,
    order: usize,
    train_horizon: usize,
) -> Result<Vec<ResidualPoint>> {
    let valid = pred.frames.iter().map(|f| f.len()).min().unwrap_or(0);
    let mut pred_sum = vec![0.0; valid + 1];
    let mut ref_sum = vec![0.0; valid + 1];
    for (p, tr) in pred.frames.iter().zip(&ds.trajectories) {
        let reference: Vec<Tensor> = (0..=valid).map(|k| tr.frame(k)).collect();
        let mut predicted = vec![reference[0].clone()];
        predicted.extend(p[..valid].iter().cloned());
        for (acc, r) in ref_sum.iter_mut().zip(continuity_residual(&reference, order, ds.dx, ds.dy)?) {
            *acc += r;
        }
        for (acc, r) in pred_sum.iter_mut().zip(continuity_residual(&predicted, order, ds.dx, ds.dy)?) {
            *acc += r;
        }
    }
    let n = ds.trajectories.len() as f64;
    Ok((0..=valid)
        .map(|k| ResidualPoint {
            frame: k,
            predicted: pred_sum[k] / n,
            reference: ref_sum[k] / n,
            extrapolate: k > train_horizon,
        })
        .collect())
}

pub fn residual_csv(points: &[ResidualPoint], config_hash: &str) -> String {
    let mut s = String::from("frame,residual_predicted,residual_reference,extrapolate,config_hash\n");
    for p in points {
        s.push_str(&format!(
            "{},{:e},{:e},{},{}\n",
            p.frame, p.predicted, p.reference, p.extrapolate as u8, config_hash
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub split: String,
    pub horizon: usize,
    /// Mean over trajectories of the whole-rollout NRMSE; `None` when a
    /// trajectory diverged.
    pub nrmse: Option<f64>,
    pub per_trajectory: Vec<Option<f64>>,
    pub diverged: usize,
    /// Coefficients the dynamics used on this split.
    pub coefficients: BTreeMap<String, f64>,
    pub curve: RolloutCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub system: System,
    pub architecture: String,
    pub seed: u64,
    pub config_hash: String,
    pub param_count: usize,
    pub scenarios: BTreeMap<String, ScenarioReport>,
    pub missing: Vec<String>,
    pub residual: Option<Vec<ResidualPoint>>,
}

impl EvalReport {
    pub fn scenario(&self, split: Split) -> Option<&ScenarioReport> {
        self.scenarios.get(split.name())
    }

    /// Writes `report.json`, `rollout_error.csv` (the longest available
    /// in-distribution rollout), one `rollout_error_<split>.csv` per split
    /// and `residual.csv` when available.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| CoreError::io(&p, e))
        };
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        put("report.json", json)?;
        for (name, sc) in &self.scenarios {
            put(&format!("rollout_error_{name}.csv"), sc.curve.to_csv(&self.config_hash))?;
        }
        let main = self
            .scenario(Split::TExtrapolate)
            .or_else(|| self.scenario(Split::Test))
            .or_else(|| self.scenarios.values().next());
        if let Some(sc) = main {
            put("rollout_error.csv", sc.curve.to_csv(&self.config_hash))?;
        }
        if let Some(r) = &self.residual {
            put("residual.csv", residual_csv(r, &self.config_hash))?;
        }
        Ok(())
    }
}

pub struct EvalContext<'a> {
    pub stats: &'a NormStats,
    /// Frames covered by the training trajectories, after frame 0.
    pub train_horizon: usize,
    pub fd_order: usize,
    pub architecture: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Evaluate every available split. OpsSplit receives each split's own
/// coefficient; the others keep whatever they were trained with.
pub fn run_scenarios(dynamics: &Dynamics, splits: &BTreeMap<Split, Dataset>, ctx: &EvalContext) -> Result<EvalReport> {
    let mut predictor = |ds: &Dataset, horizon: usize| -> Result<(Predictions, BTreeMap<String, f64>)> {
        let mut d = dynamics.clone();
        inject_coefficient(&mut d, ds.system, ds.coefficient())?;
        let coefficients = d.rhs.as_ref().map(|r| r.coefficients()).unwrap_or_default();
        Ok((predict(&d, ds, ctx.stats, horizon)?, coefficients))
    };
    run_scenarios_with(dynamics.mode.name(), dynamics.param_count(), splits, ctx, &mut predictor)
}

/// Produces physical predictions for a split plus the coefficients used.
pub type Predictor<'a> = dyn FnMut(&Dataset, usize) -> Result<(Predictions, BTreeMap<String, f64>)> + 'a;

pub fn run_scenarios_with(
    label: &str,
    param_count: usize,
    splits: &BTreeMap<Split, Dataset>,
    ctx: &EvalContext,
    predictor: &mut Predictor,
) -> Result<EvalReport> {
    let system = splits
        .values()
        .next()
        .map(|d| d.system)
        .ok_or_else(|| CoreError::Config("no evaluation splits given".into()))?;
    let mut scenarios = BTreeMap::new();
    let mut missing = Vec::new();
    let mut residual = None;
    for split in [Split::Test, Split::TExtrapolate, Split::Ood, Split::OodTExtrapolate] {
        let Some(ds) = splits.get(&split) else {
            warn!("split '{}' missing; report is partial", split.name());
            missing.push(split.name().to_string());
            continue;
        };
        if ds.system != system {
            return Err(CoreError::Schema(format!("split '{}' belongs to another system", split.name())));
        }
        let horizon = ds.n_frames() - 1;
        let (pred, coefficients) = predictor(ds, horizon)?;
        let curve = rollout_error_curve(&pred, ds, ctx.train_horizon)?;
        let per_trajectory = pred
            .frames
            .iter()
            .zip(&pred.blow_up)
            .zip(&ds.trajectories)
            .map(|((p, b), tr)| {
                if b.is_some() {
                    return Ok(None);
                }
                let flat: Vec<f64> = p.iter().flat_map(|f| f.data().iter().copied()).collect();
                let n = tr.frame_len();
                nrmse(&flat, &tr.frames.data()[n..]).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let diverged = per_trajectory.iter().filter(|x| x.is_none()).count();
        let nrmse_mean = (diverged == 0)
            .then(|| per_trajectory.iter().flatten().sum::<f64>() / per_trajectory.len() as f64);
        if split == Split::TExtrapolate && system == System::Incompressible {
            residual = Some(residual_series(&pred, ds, ctx.fd_order, ctx.train_horizon)?);
        }
        scenarios.insert(
            split.name().to_string(),
            ScenarioReport {
                split: split.name().to_string(),
                horizon,
                nrmse: nrmse_mean,
                per_trajectory,
                diverged,
                coefficients,
                curve,
            },
        );
    }
    Ok(EvalReport {
        mode: label.to_string(),
        system,
        architecture: ctx.architecture.clone(),
        seed: ctx.seed,
        config_hash: ctx.config_hash.clone(),
        param_count,
        scenarios,
        missing,
        residual,
    })
}

/// Parameter-shift harness on du/dt = λ∇²u + u² over [0, 2π)².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSetup {
    pub grid: usize,
    pub lambda_train: f64,
    pub shifts: Vec<f64>,
    /// Step of the one-step maps standing in for the autoregressive model.
    pub dt: f64,
    pub fd_order: usize,
}

impl Default for TheoremSetup {
    fn default() -> Self {
        Self {
            grid: 32,
            lambda_train: 1.0,
            shifts: vec![0.005, 0.01, 0.02, 0.05],
            dt: 1e-3,
            fd_order: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremRow {
    pub shift: f64,
    pub err_ar: f64,
    pub err_node: f64,
    pub err_opssplit: f64,
    /// |Δλ|·‖ℒu‖
    pub node_closed_form: f64,
    /// λ_test·‖FD(u) − ℒu‖
    pub opssplit_closed_form: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremTable {
    pub rows: Vec<TheoremRow>,
    /// The same estimators without a shift.
    pub unshifted: TheoremRow,
    pub slope_ar: f64,
    pub slope_node: f64,
    pub slope_opssplit: f64,
}

impl TheoremTable {
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = String::from("shift,err_ar,err_node,err_opssplit,slope_ar,slope_node,slope_opssplit,config_hash\n");
        for r in std::iter::once(&self.unshifted).chain(&self.rows) {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:.6},{:.6},{:.6},{}\n",
                r.shift, r.err_ar, r.err_node, r.err_opssplit, self.slope_ar, self.slope_node, self.slope_opssplit, config_hash
            ));
        }
        s
    }
}

/// Band-limited test state and its exact Laplacian.
pub fn theorem_state(n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = TAU / n as f64;
    let modes: [(f64, f64, f64, f64); 3] = [(1.0, 2.0, 0.6, 0.0), (3.0, 1.0, 0.3, 0.7), (2.0, -3.0, 0.2, 1.9)];
    let mut u = vec![0.0; n * n];
    let mut lap = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (i as f64 * h, j as f64 * h);
            for &(kx, ky, a, ph) in &modes {
                let s = a * (kx * x + ky * y + ph).sin();
                u[i * n + j] += s;
                lap[i * n + j] -= (kx * kx + ky * ky) * s;
            }
        }
    }
    (u, lap)
}

fn spectral_laplacian(u: &[f64], n: usize) -> Result<Vec<f64>> {
    let h = TAU / n as f64;
    let mut s = fft2(&Tensor::new(vec![1, n, n], u.to_vec())?, h, h)?;
    let hw = s.half_w();
    for i in 0..n {
        let kx = signed_index(i, n) as f64;
        for j in 0..hw {
            let k2 = kx * kx + (j * j) as f64;
            s.data[i * hw + j] *= -k2;
        }
    }
    Ok(ifft2(&s)?.into_data())
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Dynamics-estimation errors ‖F̂(u; λ_test) − F*(u; λ_test)‖ (RMS over the
/// grid) of three oracle estimators: a right-hand side frozen at λ_train,
/// a one-step RK4 map frozen at λ_train (error measured as a rate), and a
/// split right-hand side with λ_test injected into a finite-difference
/// Laplacian.
pub fn theorem_shift_harness(setup: &TheoremSetup) -> Result<TheoremTable> {
    let n = setup.grid;
    if setup.shifts.len() < 2 || setup.shifts.iter().any(|s| !(*s > 0.0)) {
        return Err(CoreError::Config("theorem harness needs at least two positive shifts".into()));
    }
    let (u, lap) = theorem_state(n);
    let h = TAU / n as f64;
    let fd = apply_stencil(
        &Field::new(Tensor::new(vec![1, n, n], u.clone())?, h, h)?,
        &make_stencil(StencilKind::Laplacian, setup.fd_order, h, h)?,
    )?
    .data
    .into_data();
    let rhs = |lambda: f64, x: &Vec<f64>| -> Result<Vec<f64>> {
        let l = spectral_laplacian(x, n)?;
        Ok(l.iter().zip(x).map(|(a, b)| lambda * a + b * b).collect())
    };
    let step = |lambda: f64| -> Result<Vec<f64>> {
        let mut f = |x: &Vec<f64>| rhs(lambda, x);
        rk4_step(&VecSpace, &mut f, &u, setup.dt)
    };
    let lt = setup.lambda_train;
    let ar_train = step(lt)?;
    let norm_l = rms(&lap);
    let fd_gap = rms_diff(&fd, &lap);
    let row = |shift: f64| -> Result<TheoremRow> {
        let ltest = lt + shift;
        let truth: Vec<f64> = lap.iter().zip(&u).map(|(l, x)| ltest * l + x * x).collect();
        let node: Vec<f64> = lap.iter().zip(&u).map(|(l, x)| lt * l + x * x).collect();
        let ops: Vec<f64> = fd.iter().zip(&u).map(|(l, x)| ltest * l + x * x).collect();
        let ar_test = step(ltest)?;
        Ok(TheoremRow {
            shift,
            err_ar: rms_diff(&ar_train, &ar_test) / setup.dt,
            err_node: rms_diff(&node, &truth),
            err_opssplit: rms_diff(&ops, &truth),
            node_closed_form: shift.abs() * norm_l,
            opssplit_closed_form: ltest.abs() * fd_gap,
        })
    };
    let rows = setup.shifts.iter().map(|&s| row(s)).collect::<Result<Vec<_>>>()?;
    let unshifted = row(0.0)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.shift.ln()).collect();
    let slope = |f: &dyn Fn(&TheoremRow) -> f64| fit_slope(&xs, &rows.iter().map(|r| f(r).ln()).collect::<Vec<_>>());
    Ok(TheoremTable {
        slope_ar: slope(&|r| r.err_ar),
        slope_node: slope(&|r| r.err_node),
        slope_opssplit: slope(&|r| r.err_opssplit),
        rows,
        unshifted,
    })
}

/// Per-channel affine map onto [-1, 1]; `None` for a constant channel.
pub fn minmax_unit(plane: &[f64]) -> Option<Vec<f64>> {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi > lo).then(|| plane.iter().map(|x| 2.0 * (x - lo) / (hi - lo) - 1.0).collect())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Side-by-side normalised outputs. Learned operators act in a latent,
/// normalised frame, so only the shapes are comparable.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorComparison {
    /// `[C, H, W]`, each channel min-max scaled; constant channels are 0.
    pub learned: Tensor,
    pub numerical: Tensor,
    pub correlation: Vec<Option<f64>>,
}

pub fn compare_outputs(learned: &Tensor, numerical: &Tensor) -> Result<OperatorComparison> {
    if learned.shape() != numerical.shape() || learned.rank() != 3 {
        return Err(CoreError::Shape(format!(
            "operator outputs {:?} and {:?} differ",
            learned.shape(),
            numerical.shape()
        )));
    }
    let (c, n) = (learned.shape()[0], learned.shape()[1] * learned.shape()[2]);
    let mut a = Vec::with_capacity(c * n);
    let mut b = Vec::with_capacity(c * n);
    let mut correlation = Vec::with_capacity(c);
    for k in 0..c {
        let la = minmax_unit(&learned.data()[k * n..(k + 1) * n]);
        let nb = minmax_unit(&numerical.data()[k * n..(k + 1) * n]);
        correlation.push(match (&la, &nb) {
            (Some(x), Some(y)) => pearson(x, y),
            _ => None,
        });
        a.extend(la.unwrap_or_else(|| vec![0.0; n]));
        b.extend(nb.unwrap_or_else(|| vec![0.0; n]));
    }
    Ok(OperatorComparison {
        learned: Tensor::new(learned.shape().to_vec(), a)?,
        numerical: Tensor::new(learned.shape().to_vec(), b)?,
        correlation,
    })
}

/// The convection operator of the physical state `[C, H, W]`: the
/// projected P[(v·∇)v] for incompressible flow, (v·∇)v by fourth-order
/// differences for compressible flow.
pub fn numerical_convection(system: System, state: &Tensor, dx: f64, dy: f64) -> Result<Tensor> {
    let (h, w) = (state.shape()[1], state.shape()[2]);
    let n = h * w;
    let (ui, vi) = match system {
        System::Incompressible => (0, 1),
        System::Compressible => (1, 2),
    };
    let u = &state.data()[ui * n..(ui + 1) * n];
    let v = &state.data()[vi * n..(vi + 1) * n];
    let out = match system {
        System::Incompressible => {
            if h != w {
                return Err(CoreError::Shape("spectral convection needs a square grid".into()));
            }
            let (a, b) = projected_convection(h, u, v)?;
            [a, b].concat()
        }
        System::Compressible => {
            let vel = Field::new(Tensor::new(vec![2, h, w], [u, v].concat())?, dx, dy)?;
            let gx = apply_stencil(&vel, &make_stencil(StencilKind::GradX, 4, dx, dy)?)?;
            let gy = apply_stencil(&vel, &make_stencil(StencilKind::GradY, 4, dx, dy)?)?;
            let mut out = vec![0.0; 2 * n];
            for c in 0..2 {
                for k in 0..n {
                    out[c * n + k] = u[k] * gx.plane(c)[k] + v[k] * gy.plane(c)[k];
                }
            }
            out
        }
    };
    Ok(Tensor::new(vec![2, h, w], out)?)
}

/// Compare a learned convection slot with the numerical operator on one
/// physical state.
pub fn operator_compare(
    model: &OperatorModel,
    system: System,
    state: &Tensor,
    stats: &NormStats,
    dx: f64,
    dy: f64,
) -> Result<OperatorComparison> {
    let (ui, vi) = match system {
        System::Incompressible => (0, 1),
        System::Compressible => (1, 2),
    };
    let normed = stats.normalize(state);
    let n = state.shape()[1] * state.shape()[2];
    let vel: Vec<f64> = [ui, vi]
        .iter()
        .flat_map(|&c| normed.data()[c * n..(c + 1) * n].iter().copied())
        .collect();
    let input = Tensor::new(vec![2, state.shape()[1], state.shape()[2]], vel)?;
    let learned = model.apply(&input)?;
    let numerical = numerical_convection(system, state, dx, dy)?;
    compare_outputs(&learned, &numerical)
}
