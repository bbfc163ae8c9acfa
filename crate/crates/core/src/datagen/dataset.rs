//! Trajectories, splits, normalisation and the on-disk container:
//! `<name>.fields` holds raw little-endian doubles laid out
//! `[N, T, C, H, W]`, `<name>.meta.json` holds everything else.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use opssplit_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::params::{SimParams, System};
use crate::error::{CoreError, Result};
use crate::rhs::FrameScaling;

pub const FORMAT_TAG: &str = "opssplit-dataset";
pub const SCHEMA_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    TExtrapolate,
    Ood,
    OodTExtrapolate,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Test,
        Split::TExtrapolate,
        Split::Ood,
        Split::OodTExtrapolate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::TExtrapolate => "t-extrapolate",
            Split::Ood => "ood",
            Split::OodTExtrapolate => "ood-t-extrapolate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_ood(self) -> bool {
        matches!(self, Split::Ood | Split::OodTExtrapolate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[T, C, H, W]`
    pub frames: Tensor,
    pub frame_dt: f64,
    pub params: SimParams,
}

impl Trajectory {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame_len(&self) -> usize {
        self.frames.shape()[1..].iter().product()
    }

    pub fn frame(&self, t: usize) -> Tensor {
        let n = self.frame_len();
        Tensor::new(self.frames.shape()[1..].to_vec(), self.frames.data()[t * n..(t + 1) * n].to_vec())
            .expect("shape")
    }

    /// Keep every `t_stride`-th frame and every `x_stride`-th grid point.
    pub fn subsample(&self, t_stride: usize, x_stride: usize) -> Result<Trajectory> {
        let s = self.frames.shape();
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        if t_stride == 0 || x_stride == 0 || (t - 1) % t_stride != 0 || h % x_stride != 0 || w % x_stride != 0 {
            return Err(CoreError::Config(format!(
                "strides ({t_stride}, {x_stride}) do not divide {} steps on a {h}x{w} grid",
                t - 1
            )));
        }
        let (ho, wo) = (h / x_stride, w / x_stride);
        let mut data = Vec::with_capacity(((t - 1) / t_stride + 1) * c * ho * wo);
        for ti in (0..t).step_by(t_stride) {
            for ci in 0..c {
                for i in (0..h).step_by(x_stride) {
                    for j in (0..w).step_by(x_stride) {
                        data.push(self.frames.data()[((ti * c + ci) * h + i) * w + j]);
                    }
                }
            }
        }
        let n_out = (t - 1) / t_stride + 1;
        let mut params = self.params.clone();
        params.grid = ho;
        Ok(Trajectory {
            frames: Tensor::new(vec![n_out, c, ho, wo], data)?,
            frame_dt: self.frame_dt * t_stride as f64,
            params,
        })
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> Result<Trajectory> {
        if n == 0 || n > self.n_frames() {
            return Err(CoreError::Config(format!("cannot keep {n} of {} frames", self.n_frames())));
        }
        let mut shape = self.frames.shape().to_vec();
        shape[0] = n;
        let mut params = self.params.clone();
        params.t_final = self.frame_dt * (n - 1) as f64;
        Ok(Trajectory {
            frames: Tensor::new(shape, self.frames.data()[..n * self.frame_len()].to_vec())?,
            frame_dt: self.frame_dt,
            params,
        })
    }
}

/// Per-channel ranges from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| CoreError::Config("no trajectories to normalise".into()))?;
        let s = first.frames.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for tr in trajs {
            for frame in tr.frames.data().chunks(c * hw) {
                for ch in 0..c {
                    for &v in &frame[ch * hw..(ch + 1) * hw] {
                        min[ch] = min[ch].min(v);
                        max[ch] = max[ch].max(v);
                    }
                }
            }
        }
        Ok(Self { min, max })
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    fn degenerate(&self, c: usize) -> bool {
        !(self.max[c] > self.min[c])
    }

    /// x ↦ 2(x − min)/(max − min) − 1 on a `[.., C, H, W]` tensor; a
    /// constant channel maps to 0.
    pub fn normalize(&self, t: &Tensor) -> Tensor {
        self.map_channels(t, |c, x| {
            if self.degenerate(c) {
                0.0
            } else {
                2.0 * (x - self.min[c]) / (self.max[c] - self.min[c]) - 1.0
            }
        })
    }

    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        self.map_channels(t, |c, x| {
            if self.degenerate(c) {
                self.min[c]
            } else {
                (x + 1.0) / 2.0 * (self.max[c] - self.min[c]) + self.min[c]
            }
        })
    }

    fn map_channels(&self, t: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let s = t.shape();
        let r = s.len();
        let (c, hw) = (s[r - 3], s[r - 2] * s[r - 1]);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f((k / hw) % c, x))
            .collect();
        Tensor::new(s.to_vec(), data).expect("shape")
    }

    pub fn warn_degenerate(&self, names: &[String]) {
        for c in 0..self.channels() {
            if self.degenerate(c) {
                warn!("channel '{}' is constant in the training split; normalised to 0", names[c]);
            }
        }
    }

    /// Physical-unit map of the normalised state, one integrator time unit
    /// per `frame_dt` seconds.
    pub fn frame_scaling(&self, frame_dt: f64) -> FrameScaling {
        let c = self.channels();
        FrameScaling {
            time: frame_dt,
            half_range: (0..c)
                .map(|k| if self.degenerate(k) { 1.0 } else { 0.5 * (self.max[k] - self.min[k]) })
                .collect(),
            mid: (0..c)
                .map(|k| if self.degenerate(k) { self.min[k] } else { 0.5 * (self.max[k] + self.min[k]) })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub system: System,
    pub channels: Vec<String>,
    pub dx: f64,
    pub dy: f64,
    pub trajectories: Vec<Trajectory>,
    pub stats: Option<NormStats>,
    pub seed: u64,
    pub config_hash: Option<String>,
}

impl Dataset {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.trajectories[0].frames.shape();
        (s[2], s[3])
    }

    pub fn n_frames(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.n_frames())
    }

    pub fn frame_dt(&self) -> f64 {
        self.trajectories[0].frame_dt
    }

    pub fn stats(&self) -> Result<&NormStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| CoreError::Schema(format!("dataset '{}' carries no normalisation stats", self.name)))
    }

    /// The PDE coefficient shared by every trajectory.
    pub fn coefficient(&self) -> f64 {
        self.trajectories[0].params.coefficient
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .trajectories
            .first()
            .ok_or_else(|| CoreError::Schema(format!("dataset '{}' is empty", self.name)))?;
        let shape = first.frames.shape();
        if shape.len() != 4 || shape[1] != self.channels.len() {
            return Err(CoreError::Schema(format!("frames {shape:?} do not match channels {:?}", self.channels)));
        }
        for tr in &self.trajectories {
            if tr.frames.shape() != shape {
                return Err(CoreError::Schema(format!(
                    "trajectory shape {:?} differs from {shape:?}",
                    tr.frames.shape()
                )));
            }
            if !tr.frames.is_finite() {
                return Err(CoreError::Numerical("trajectory holds non-finite values".into()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    schema_version: String,
    name: String,
    split: Split,
    system: System,
    channels: Vec<String>,
    /// [N, T, C, H, W]
    shape: Vec<usize>,
    dx: f64,
    dy: f64,
    frame_dt: f64,
    params: Vec<SimParams>,
    stats: Option<NormStats>,
    seed: u64,
    config_hash: Option<String>,
}

pub fn dataset_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.fields")), dir.join(format!("{name}.meta.json")))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    let (fields, meta_path) = dataset_paths(dir, &ds.name);
    let s = ds.trajectories[0].frames.shape();
    let meta = Meta {
        format: FORMAT_TAG.into(),
        schema_version: SCHEMA_VERSION.into(),
        name: ds.name.clone(),
        split: ds.split,
        system: ds.system,
        channels: ds.channels.clone(),
        shape: vec![ds.trajectories.len(), s[0], s[1], s[2], s[3]],
        dx: ds.dx,
        dy: ds.dy,
        frame_dt: ds.frame_dt(),
        params: ds.trajectories.iter().map(|t| t.params.clone()).collect(),
        stats: ds.stats.clone(),
        seed: ds.seed,
        config_hash: ds.config_hash.clone(),
    };
    let mut buf = Vec::with_capacity(8 * ds.trajectories.len() * ds.trajectories[0].frames.len());
    for tr in &ds.trajectories {
        for v in tr.frames.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(&fields)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| CoreError::io(&fields, e))?;
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    std::fs::write(&meta_path, json).map_err(|e| CoreError::io(&meta_path, e))
}

pub fn read_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    let (fields, meta_path) = dataset_paths(dir, name);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?;
    let probe: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CoreError::Schema(format!("{}: {e}", meta_path.display())))?;
    if probe.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
        return Err(CoreError::Schema(format!("{}: not a dataset (bad format tag)", meta_path.display())));
    }
    if probe.get("schema_version").and_then(|v| v.as_str()) != Some(SCHEMA_VERSION) {
        return Err(CoreError::Schema(format!(
            "{}: unsupported schema version {}",
            meta_path.display(),
            probe.get("schema_version").unwrap_or(&serde_json::Value::Null)
        )));
    }
    let meta: Meta =
        serde_json::from_value(probe).map_err(|e| CoreError::Schema(format!("{}: {e}", meta_path.display())))?;
    if meta.shape.len() != 5 || meta.params.len() != meta.shape[0] || meta.shape[2] != meta.channels.len() {
        return Err(CoreError::Schema(format!("{}: inconsistent shape {:?}", meta_path.display(), meta.shape)));
    }
    let bytes = std::fs::read(&fields).map_err(|e| CoreError::io(&fields, e))?;
    let total: usize = meta.shape.iter().product();
    if bytes.len() != 8 * total {
        return Err(CoreError::Schema(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            fields.display(),
            8 * total,
            meta.shape,
            bytes.len()
        )));
    }
    let per = total / meta.shape[0];
    let trajectories = bytes
        .chunks_exact(8 * per)
        .zip(meta.params)
        .map(|(chunk, params)| {
            let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Trajectory {
                frames: Tensor::new(meta.shape[1..].to_vec(), data)?,
                frame_dt: meta.frame_dt,
                params,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: meta.name,
        split: meta.split,
        system: meta.system,
        channels: meta.channels,
        dx: meta.dx,
        dy: meta.dy,
        trajectories,
        stats: meta.stats,
        seed: meta.seed,
        config_hash: meta.config_hash,
    })
}
