//! The subcommands. Each returns whether its results are complete.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use opssplit_core::datagen::dataset::dataset_paths;
use opssplit_core::datagen::{
    generate_splits, read_dataset, solve_compressible, solve_incompressible, write_dataset, Dataset, NormStats, Split,
    System, Trajectory,
};
use opssplit_core::dynamics::{Dynamics, Mode};
use opssplit_core::metrics::{
    operator_compare, run_scenarios, run_scenarios_with, theorem_shift_harness, EvalContext, EvalReport, Predictions,
};
use opssplit_core::neural::{Architecture, OperatorModel};
use opssplit_core::rng::derive_seed;
use opssplit_core::setup::{build_dynamics, check_budget};
use opssplit_core::train::{train, LossRecord, WindowSource};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{config_hash, RunConfig, Which};
use crate::error::CliError;

pub const BUDGET_TOLERANCE: f64 = 0.05;

/// Refuse to overwrite existing outputs unless forced.
fn guard_outputs(dir: &Path, files: &[PathBuf], force: bool) -> Result<(), CliError> {
    if !force {
        if let Some(f) = files.iter().find(|f| f.exists()) {
            return Err(CliError::config(format!(
                "{} already exists; pass --force to overwrite",
                f.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

#[derive(Serialize)]
struct GenManifest<'a> {
    config_hash: &'a str,
    seed: u64,
    data: &'a opssplit_core::datagen::GenConfig,
    splits: Vec<&'static str>,
}

pub fn gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<String, CliError> {
    let hash = config_hash("gen", &json!({}), &json!({ "seed": cfg.seed, "data": cfg.data }));
    let mut files = vec![out.join("gen.json")];
    for s in Split::ALL {
        let (a, b) = dataset_paths(out, s.name());
        files.extend([a, b]);
    }
    guard_outputs(out, &files, force)?;
    for ds in generate_splits(&cfg.data, cfg.seed, Some(&hash))? {
        write_dataset(&ds, out)?;
    }
    write_json(
        &out.join("gen.json"),
        &GenManifest {
            config_hash: &hash,
            seed: cfg.seed,
            data: &cfg.data,
            splits: Split::ALL.iter().map(|s| s.name()).collect(),
        },
    )?;
    info!("wrote {} splits to {} [{hash}]", Split::ALL.len(), out.display());
    Ok(hash)
}

/// Every split present in `dir`, keyed by split.
pub fn load_splits(dir: &Path) -> Result<BTreeMap<Split, Dataset>, CliError> {
    let mut out = BTreeMap::new();
    for s in Split::ALL {
        let (fields, meta) = dataset_paths(dir, s.name());
        if fields.exists() || meta.exists() {
            out.insert(s, read_dataset(dir, s.name())?);
        }
    }
    Ok(out)
}

fn train_stats(splits: &BTreeMap<Split, Dataset>) -> Result<NormStats, CliError> {
    let ds = splits
        .get(&Split::Train)
        .or_else(|| splits.values().next())
        .ok_or_else(|| CliError::config("data directory holds no datasets"))?;
    Ok(ds.stats()?.clone())
}

fn check_system(cfg: &RunConfig, splits: &BTreeMap<Split, Dataset>) -> Result<(), CliError> {
    if let Some(ds) = splits.values().find(|d| d.system != cfg.system()) {
        return Err(CliError::config(format!(
            "dataset '{}' holds {:?} data but the config describes {:?}",
            ds.name,
            ds.system,
            cfg.system()
        )));
    }
    Ok(())
}

fn model_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "init")
}

/// Build the dynamics of `mode` for a dataset and check that all three
/// modes carry comparable parameter counts.
pub fn build_for(cfg: &RunConfig, mode: Mode, reference: &Dataset, stats: &NormStats) -> Result<Dynamics, CliError> {
    let spec = cfg.dynamics_spec(reference.grid(), reference.dx, reference.dy);
    let mut counts = BTreeMap::new();
    for m in Mode::ALL {
        let d = build_dynamics(&spec, m, Some(stats), reference.frame_dt(), model_seed(cfg))?;
        counts.insert(m, d.param_count());
    }
    check_budget(&counts, BUDGET_TOLERANCE)?;
    Ok(build_dynamics(&spec, mode, Some(stats), reference.frame_dt(), model_seed(cfg))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub mode: Mode,
    pub slots: Vec<String>,
    pub param_count: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub warm_start: BTreeMap<String, String>,
    pub config: RunConfig,
}

pub fn checkpoint_path(dir: &Path, which: Which, slot: &str) -> PathBuf {
    dir.join(format!("{}_{slot}.ckpt", which.name()))
}

pub struct TrainResult {
    pub summary: TrainSummary,
    pub record: LossRecord,
}

pub fn train_cmd(
    cfg: &RunConfig,
    mode: Mode,
    data: &Path,
    out: &Path,
    warm_start: &[(String, PathBuf)],
    force: bool,
) -> Result<TrainResult, CliError> {
    let ws: BTreeMap<String, String> = warm_start
        .iter()
        .map(|(s, p)| (s.clone(), p.display().to_string()))
        .collect();
    let hash = config_hash("train", &json!({ "mode": mode, "warm_start": ws }), &json!(cfg));
    guard_outputs(out, &[out.join("train.json"), out.join("loss.csv")], force)?;
    let mut splits = load_splits(data)?;
    check_system(cfg, &splits)?;
    let mut train_ds = splits
        .remove(&Split::Train)
        .ok_or_else(|| CliError::config(format!("{}: no train split", data.display())))?;
    let test_ds = splits
        .remove(&Split::Test)
        .ok_or_else(|| CliError::config(format!("{}: no test split", data.display())))?;
    let stats = train_ds.stats()?.clone();
    if cfg.train.n_train > 0 {
        if cfg.train.n_train > train_ds.trajectories.len() {
            return Err(CliError::config(format!(
                "n_train {} exceeds the {} stored trajectories",
                cfg.train.n_train,
                train_ds.trajectories.len()
            )));
        }
        train_ds.trajectories.truncate(cfg.train.n_train);
    }
    let mut dynamics = build_for(cfg, mode, &train_ds, &stats)?;
    for (slot, path) in warm_start {
        let k = dynamics.slot_index(slot).ok_or_else(|| {
            CliError::config(format!("no slot '{slot}' in {} (slots {:?})", mode.name(), dynamics.slots))
        })?;
        dynamics.models[k].load(path)?;
        info!("warm start: slot '{slot}' from {}", path.display());
    }
    let tc = cfg.train_config(mode);
    let outcome = train(
        dynamics,
        &WindowSource::from_dataset(&train_ds, &stats),
        &WindowSource::from_dataset(&test_ds, &stats),
        &tc,
    )?;
    for (which, d) in [(Which::Final, &outcome.final_dynamics), (Which::Best, &outcome.best_dynamics)] {
        for (slot, m) in d.slots.iter().zip(&d.models) {
            m.save_tagged(&checkpoint_path(out, which, slot), Some(&hash))?;
        }
    }
    write(&out.join("loss.csv"), outcome.record.to_csv(&hash))?;
    write(&out.join("timing.csv"), outcome.record.timing_csv())?;
    let last = outcome.record.epochs.last().expect("epochs >= 1");
    let summary = TrainSummary {
        config_hash: hash,
        mode,
        slots: outcome.final_dynamics.slots.clone(),
        param_count: outcome.final_dynamics.param_count(),
        best_epoch: outcome.best_epoch,
        final_train_loss: last.train_loss,
        final_test_loss: last.test_loss,
        warm_start: ws,
        config: cfg.clone(),
    };
    write_json(&out.join("train.json"), &summary)?;
    Ok(TrainResult {
        summary,
        record: outcome.record,
    })
}

pub fn read_summary(dir: &Path) -> Result<TrainSummary, CliError> {
    let p = dir.join("train.json");
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
}

/// Rebuild trained dynamics from a training output directory.
pub fn load_dynamics(dir: &Path, which: Which, reference: &Dataset, stats: &NormStats) -> Result<Dynamics, CliError> {
    let summary = read_summary(dir)?;
    let mut d = build_for(&summary.config, summary.mode, reference, stats)?;
    if d.slots != summary.slots {
        return Err(CliError::config(format!(
            "checkpoint slots {:?} do not match configured slots {:?}",
            summary.slots, d.slots
        )));
    }
    for k in 0..d.slots.len() {
        let p = checkpoint_path(dir, which, &d.slots[k]);
        d.models[k].load(&p)?;
    }
    Ok(d)
}

fn architecture(cfg: &RunConfig) -> String {
    match cfg.model.arch {
        Architecture::Spectral => "spectral".into(),
        Architecture::Conv => "conv".into(),
    }
}

fn train_horizon(cfg: &RunConfig, splits: &BTreeMap<Split, Dataset>) -> usize {
    splits
        .get(&Split::Train)
        .or_else(|| splits.get(&Split::Test))
        .map(|d| d.n_frames() - 1)
        .unwrap_or_else(|| cfg.data.frames() - 1)
}

/// Re-run the reference solver from each trajectory's parameters.
#[derive(Deserialize)]
struct GenRecord {
    data: opssplit_core::datagen::GenConfig,
}

/// Solver settings the data were generated with, from `gen.json` when present.
fn data_config(cfg: &RunConfig, data: &Path) -> Result<opssplit_core::datagen::GenConfig, CliError> {
    let path = data.join("gen.json");
    if !path.exists() {
        return Ok(cfg.data.clone());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let rec: GenRecord = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(rec.data)
}

fn oracle_predictions(gen: &opssplit_core::datagen::GenConfig, ds: &Dataset, horizon: usize) -> Result<Predictions, CliError> {
    let cfg = gen;
    let mut frames = Vec::with_capacity(ds.trajectories.len());
    for tr in &ds.trajectories {
        let mut p = tr.params.clone();
        p.grid = cfg.grid;
        let full: Trajectory = match p.system {
            System::Incompressible => solve_incompressible(&p, cfg.t_stride)?,
            System::Compressible => solve_compressible(&p, cfg.t_stride)?,
        }
        .subsample(1, cfg.x_stride)?;
        frames.push((1..=horizon).map(|k| full.frame(k)).collect());
    }
    Ok(Predictions {
        blow_up: vec![None; frames.len()],
        frames,
    })
}

pub enum EvalSource<'a> {
    Checkpoints(&'a Path),
    Oracle,
}

/// Evaluate on every available split; the flag reports whether all four
/// scenarios were present.
pub fn eval_cmd(cfg: &RunConfig, source: EvalSource, data: &Path, out: &Path, force: bool) -> Result<(EvalReport, bool), CliError> {
    let label = match source {
        EvalSource::Checkpoints(dir) => json!({ "checkpoints": read_summary(dir)?.config_hash }),
        EvalSource::Oracle => json!({ "oracle": true }),
    };
    let hash = config_hash("eval", &label, &json!(cfg));
    guard_outputs(out, &[out.join("report.json")], force)?;
    let mut splits = load_splits(data)?;
    check_system(cfg, &splits)?;
    let stats = train_stats(&splits)?;
    let horizon = train_horizon(cfg, &splits);
    let reference = splits.values().next().expect("non-empty").clone();
    splits.remove(&Split::Train);
    if splits.is_empty() {
        return Err(CliError::config(format!("{}: no evaluation splits", data.display())));
    }
    let ctx = EvalContext {
        stats: &stats,
        train_horizon: horizon,
        fd_order: cfg.rhs.fd_order,
        architecture: architecture(cfg),
        seed: cfg.seed,
        config_hash: hash,
    };
    let report = match source {
        EvalSource::Checkpoints(dir) => {
            let d = load_dynamics(dir, cfg.eval.checkpoint, &reference, &stats)?;
            run_scenarios(&d, &splits, &ctx)?
        }
        EvalSource::Oracle => {
            let gen = data_config(cfg, data)?;
            let mut predictor = |ds: &Dataset, h: usize| {
                oracle_predictions(&gen, ds, h)
                    .map(|p| (p, BTreeMap::from([(ds.system.coefficient_name().to_string(), ds.coefficient())])))
                    .map_err(|e| opssplit_core::CoreError::Config(e.message))
            };
            run_scenarios_with("oracle", 0, &splits, &ctx, &mut predictor)?
        }
    };
    report.write(out)?;
    let complete = report.missing.is_empty();
    if !complete {
        warn!("missing splits: {:?}", report.missing);
    }
    Ok((report, complete))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    RolloutLength,
    Substeps,
    Width,
    NTrain,
    FdOrder,
}

impl Axis {
    pub fn key(self) -> &'static str {
        match self {
            Axis::RolloutLength => "train.rollout",
            Axis::Substeps => "integrator.substeps",
            Axis::Width => "model.width",
            Axis::NTrain => "train.n_train",
            Axis::FdOrder => "rhs.fd_order",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::RolloutLength => "rollout-length",
            Axis::Substeps => "substeps",
            Axis::Width => "width",
            Axis::NTrain => "n-train",
            Axis::FdOrder => "fd-order",
        }
    }

    /// Modes for which the axis changes anything.
    pub fn modes(self) -> &'static [Mode] {
        match self {
            Axis::Substeps => &[Mode::Node, Mode::Opssplit],
            Axis::FdOrder => &[Mode::Opssplit],
            _ => &Mode::ALL,
        }
    }
}

pub struct AblateRow {
    pub value: String,
    pub mode: Mode,
    pub outcome: Result<EvalReport, String>,
    pub config_hash: String,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

pub fn ablate_csv(axis: Axis, rows: &[AblateRow]) -> String {
    let mut s = String::from(
        "axis,value,mode,param_count,nrmse_test,nrmse_t_extrapolate,nrmse_ood,nrmse_ood_t_extrapolate,status,config_hash\n",
    );
    for r in rows {
        let (pc, cols, status) = match &r.outcome {
            Ok(rep) => {
                let g = |sp: Split| fmt_opt(rep.scenario(sp).and_then(|x| x.nrmse));
                (
                    rep.param_count.to_string(),
                    [g(Split::Test), g(Split::TExtrapolate), g(Split::Ood), g(Split::OodTExtrapolate)],
                    "ok".to_string(),
                )
            }
            Err(e) => (String::new(), Default::default(), format!("failed: {}", e.replace([',', '\n'], ";"))),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            axis.name(),
            r.value,
            r.mode.name(),
            pc,
            cols[0],
            cols[1],
            cols[2],
            cols[3],
            status,
            r.config_hash
        ));
    }
    s
}

/// One train + eval leg per value and applicable mode; failures are
/// recorded and the sweep continues.
pub fn ablate_cmd(
    base_text: Option<&str>,
    base_overrides: &[String],
    axis: Axis,
    values: &[String],
    modes: &[Mode],
    data: &Path,
    out: &Path,
    force: bool,
) -> Result<(Vec<AblateRow>, bool), CliError> {
    guard_outputs(out, &[out.join("ablate.csv")], force)?;
    let mut rows = Vec::new();
    for v in values {
        let mut overrides = base_overrides.to_vec();
        overrides.push(format!("{}={v}", axis.key()));
        let cfg = crate::config::resolve(base_text, &overrides)?;
        for &mode in axis.modes().iter().filter(|m| modes.contains(m)) {
            let leg = out.join(format!("{}-{v}", axis.name())).join(mode.name());
            let hash = config_hash("train", &json!({ "mode": mode, "warm_start": {} }), &json!(cfg));
            info!("ablate {}={v} {}", axis.name(), mode.name());
            let outcome = train_cmd(&cfg, mode, data, &leg.join("train"), &[], true)
                .and_then(|_| eval_cmd(&cfg, EvalSource::Checkpoints(&leg.join("train")), data, &leg.join("eval"), true))
                .map(|(r, _)| r)
                .map_err(|e| e.message);
            if let Err(e) = &outcome {
                warn!("leg {}={v} {} failed: {e}", axis.name(), mode.name());
            }
            rows.push(AblateRow {
                value: v.clone(),
                mode,
                outcome,
                config_hash: hash,
            });
        }
    }
    write(&out.join("ablate.csv"), ablate_csv(axis, &rows))?;
    let complete = rows.iter().all(|r| r.outcome.is_ok());
    Ok((rows, complete))
}

pub fn theorem_cmd(cfg: &RunConfig, out: &Path, force: bool) -> Result<opssplit_core::metrics::TheoremTable, CliError> {
    let hash = config_hash("theorem", &json!({}), &json!({ "theorem": cfg.theorem }));
    guard_outputs(out, &[out.join("theorem.csv")], force)?;
    let table = theorem_shift_harness(&cfg.theorem)?;
    write(&out.join("theorem.csv"), table.to_csv(&hash))?;
    write_json(&out.join("theorem.json"), &json!({ "config_hash": hash, "table": table }))?;
    Ok(table)
}

#[derive(Serialize)]
struct CompareRecord<'a> {
    config_hash: &'a str,
    label: &'static str,
    split: &'static str,
    trajectory: usize,
    frame: usize,
    channels: Vec<String>,
    /// Pearson correlation per channel after min-max scaling; null when a
    /// channel is constant.
    correlation: Vec<Option<f64>>,
}

pub struct CompareArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub split: Split,
    pub trajectory: usize,
    pub frame: Option<usize>,
    pub out: &'a Path,
    pub force: bool,
}

/// Learned convection slot against the numerical operator on one state;
/// writes `opcompare/{state,learned,numerical}` in the dataset container.
pub fn compare_ops_cmd(cfg: &RunConfig, a: &CompareArgs) -> Result<Vec<Option<f64>>, CliError> {
    let ckpt = if a.checkpoint.is_dir() {
        checkpoint_path(a.checkpoint, cfg.eval.checkpoint, "conv")
    } else {
        a.checkpoint.to_path_buf()
    };
    let model = OperatorModel::from_checkpoint(&ckpt)?;
    if model.config.in_channels != 2 || model.config.out_channels != 2 {
        return Err(CliError::config(format!(
            "{} is not a convection operator (2 -> 2 channels)",
            ckpt.display()
        )));
    }
    let hash = config_hash(
        "compare-ops",
        &json!({ "checkpoint": opssplit_core::neural::checkpoint_tag(&ckpt)?, "split": a.split, "trajectory": a.trajectory, "frame": a.frame }),
        &json!(cfg),
    );
    let dir = a.out.join("opcompare");
    guard_outputs(&dir, &[dir.join("correlation.json")], a.force)?;
    let splits = load_splits(a.data)?;
    check_system(cfg, &splits)?;
    let stats = train_stats(&splits)?;
    let ds = splits
        .get(&a.split)
        .ok_or_else(|| CliError::config(format!("no '{}' split in {}", a.split.name(), a.data.display())))?;
    let tr = ds
        .trajectories
        .get(a.trajectory)
        .ok_or_else(|| CliError::config(format!("trajectory {} out of range", a.trajectory)))?;
    let frame = a.frame.unwrap_or(tr.n_frames() / 2);
    if frame >= tr.n_frames() {
        return Err(CliError::config(format!("frame {frame} out of range")));
    }
    let state = tr.frame(frame);
    let cmp = operator_compare(&model, ds.system, &state, &stats, ds.dx, ds.dy)?;
    let dump = |name: &str, data: &opssplit_core::Field, channels: Vec<String>| -> Result<(), CliError> {
        let mut shape = vec![1];
        shape.extend_from_slice(data.data.shape());
        let d = Dataset {
            name: name.to_string(),
            split: a.split,
            system: ds.system,
            channels,
            dx: ds.dx,
            dy: ds.dy,
            trajectories: vec![Trajectory {
                frames: opssplit_tensor::Tensor::new(shape, data.data.data().to_vec()).expect("shape"),
                frame_dt: tr.frame_dt,
                params: tr.params.clone(),
            }],
            stats: None,
            seed: cfg.seed,
            config_hash: Some(hash.clone()),
        };
        Ok(write_dataset(&d, &dir)?)
    };
    let conv_channels = vec!["conv_x".to_string(), "conv_y".to_string()];
    dump("state", &opssplit_core::Field::new(state, ds.dx, ds.dy)?, ds.channels.clone())?;
    dump("learned", &opssplit_core::Field::new(cmp.learned, ds.dx, ds.dy)?, conv_channels.clone())?;
    dump("numerical", &opssplit_core::Field::new(cmp.numerical, ds.dx, ds.dy)?, conv_channels.clone())?;
    write_json(
        &dir.join("correlation.json"),
        &CompareRecord {
            config_hash: &hash,
            label: "qualitative: learned operator acts in a normalised latent frame",
            split: a.split.name(),
            trajectory: a.trajectory,
            frame,
            channels: conv_channels,
            correlation: cmp.correlation.clone(),
        },
    )?;
    Ok(cmp.correlation)
}
