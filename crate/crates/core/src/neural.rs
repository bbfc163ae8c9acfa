//! Trainable operator networks: a spectral-convolution operator and a
//! plain periodic convolutional operator, both lift → layers → projection.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use opssplit_tensor::{ModeBasis, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OPSCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Spectral,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub arch: Architecture,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Retained Fourier modes per axis (spectral only).
    pub modes: usize,
    pub width: usize,
    pub layers: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub activation: Activation,
}

impl OperatorConfig {
    pub fn spectral(in_channels: usize, out_channels: usize, modes: usize, width: usize, layers: usize) -> Self {
        Self {
            arch: Architecture::Spectral,
            in_channels,
            out_channels,
            modes,
            width,
            layers,
            kernel: 3,
            activation: Activation::Gelu,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, width: usize, layers: usize) -> Self {
        Self {
            arch: Architecture::Conv,
            in_channels,
            out_channels,
            modes: 0,
            width,
            layers,
            kernel: 3,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 || self.layers == 0 {
            return Err(CoreError::Config(format!("degenerate operator config {self:?}")));
        }
        match self.arch {
            Architecture::Spectral => {
                if self.modes == 0 || self.modes > h / 2 || self.modes > w / 2 {
                    return Err(CoreError::Config(format!(
                        "modes {} exceed the Nyquist limit of a {h}x{w} grid",
                        self.modes
                    )));
                }
            }
            Architecture::Conv => {
                if self.kernel % 2 == 0 || self.kernel > h.min(w) {
                    return Err(CoreError::Config(format!("conv kernel {} must be odd and fit the grid", self.kernel)));
                }
            }
        }
        Ok(())
    }

    /// Closed-form number of real parameters.
    pub fn param_count(&self) -> usize {
        let (i, o, w, m) = (self.in_channels, self.out_channels, self.width, self.modes);
        let lift = i * w + w;
        let proj = w * o + o;
        let layer = match self.arch {
            // re + im of w·w·(2m)·m complex weights, plus the pointwise path
            Architecture::Spectral => 2 * (w * w * 2 * m * m) + w * w + w,
            Architecture::Conv => w * w * self.kernel * self.kernel + w,
        };
        lift + self.layers * layer + proj
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (w, m) = (self.width, self.modes);
        let mut v = vec![
            ("lift.w".to_string(), vec![self.in_channels, w]),
            ("lift.b".to_string(), vec![w]),
        ];
        for l in 0..self.layers {
            match self.arch {
                Architecture::Spectral => {
                    v.push((format!("layer{l}.spec_re"), vec![w, w, 2 * m, m]));
                    v.push((format!("layer{l}.spec_im"), vec![w, w, 2 * m, m]));
                    v.push((format!("layer{l}.mix.w"), vec![w, w]));
                    v.push((format!("layer{l}.mix.b"), vec![w]));
                }
                Architecture::Conv => {
                    v.push((format!("layer{l}.conv.k"), vec![w, w, self.kernel, self.kernel]));
                    v.push((format!("layer{l}.conv.b"), vec![w]));
                }
            }
        }
        v.push(("proj.w".to_string(), vec![w, self.out_channels]));
        v.push(("proj.b".to_string(), vec![self.out_channels]));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorModel {
    pub config: OperatorConfig,
    pub seed: u64,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

/// Parameters of one model registered on one tape.
pub struct BoundModel {
    pub vars: Vec<Var>,
    basis: Option<Rc<ModeBasis>>,
}

pub fn build_model(config: &OperatorConfig, grid: (usize, usize), seed: u64) -> Result<OperatorModel> {
    config.validate(grid.0, grid.1)?;
    let mut r = rng::stream(seed, "init");
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in config.layout() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.contains(".spec_") {
            let scale = 1.0 / (config.width * config.width) as f64;
            (0..n).map(|_| scale * r.gen::<f64>()).collect()
        } else {
            let fan_in = fan_in(&name, config);
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| r.gen_range(-bound..bound)).collect()
        };
        names.push(name);
        params.push(Tensor::new(shape, data)?);
    }
    Ok(OperatorModel {
        config: config.clone(),
        seed,
        names,
        params,
    })
}

/// Biases share the fan-in of their weight.
fn fan_in(name: &str, c: &OperatorConfig) -> usize {
    if name.starts_with("lift") {
        c.in_channels
    } else if name.contains(".conv.") {
        c.width * c.kernel * c.kernel
    } else {
        c.width
    }
}

impl OperatorModel {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero(&mut self) {
        for p in &mut self.params {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn bind(&self, tape: &Tape, requires_grad: bool, grid: (usize, usize)) -> Result<BoundModel> {
        self.config.validate(grid.0, grid.1)?;
        let vars = self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect();
        let basis = match self.config.arch {
            Architecture::Spectral => Some(Rc::new(ModeBasis::new(
                grid.0,
                grid.1,
                self.config.modes,
                self.config.modes,
            )?)),
            Architecture::Conv => None,
        };
        Ok(BoundModel { vars, basis })
    }

    fn act(&self, tape: &Tape, x: Var) -> Result<Var> {
        Ok(match self.config.activation {
            Activation::Gelu => tape.gelu(x)?,
            Activation::Tanh => tape.tanh(x)?,
        })
    }

    /// `x [C_in, H, W] → [C_out, H, W]`.
    pub fn forward(&self, tape: &Tape, bound: &BoundModel, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[0] != self.config.in_channels {
            return Err(CoreError::Shape(format!(
                "operator expects [{}, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        if let Some(b) = &bound.basis {
            if b.grid() != (shape[1], shape[2]) {
                return Err(CoreError::Shape(format!("model bound for grid {:?}, got {shape:?}", b.grid())));
            }
        }
        let v = &bound.vars;
        let mut h = tape.channel_mix(x, v[0], v[1])?;
        let per_layer = match self.config.arch {
            Architecture::Spectral => 4,
            Architecture::Conv => 2,
        };
        for l in 0..self.config.layers {
            let p = &v[2 + l * per_layer..2 + (l + 1) * per_layer];
            let y = match self.config.arch {
                Architecture::Spectral => {
                    let basis = bound.basis.clone().expect("spectral basis");
                    let s = tape.spectral_conv(h, p[0], p[1], basis)?;
                    let m = tape.channel_mix(h, p[2], p[3])?;
                    tape.add(s, m)?
                }
                Architecture::Conv => tape.conv2d_periodic(h, p[0], p[1])?,
            };
            h = if l + 1 < self.config.layers { self.act(tape, y)? } else { y };
        }
        let n = v.len();
        tape.channel_mix(h, v[n - 2], v[n - 1]).map_err(Into::into)
    }

    /// Forward pass without gradient tracking.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let s = x.shape();
        if s.len() != 3 {
            return Err(CoreError::Shape(format!("operator expects [C, H, W], got {s:?}")));
        }
        let bound = self.bind(&tape, false, (s[1], s[2]))?;
        let xv = tape.constant(x.clone());
        let y = self.forward(&tape, &bound, xv)?;
        Ok((*tape.value(y)).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_tagged(path, None)
    }

    /// Save with a run tag (config hash) recorded in the header.
    pub fn save_tagged(&self, path: &Path, tag: Option<&str>) -> Result<()> {
        let header = CheckpointHeader {
            names: self.names.clone(),
            shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
            config: self.config.clone(),
            seed: self.seed,
            tag: tag.map(str::to_string),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * self.param_count());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.params {
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&buf).map_err(|e| CoreError::io(path, e))
    }

    /// Replace parameters from a checkpoint; refuses any shape or config
    /// mismatch and leaves `self` untouched on error.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let (header, params) = read_checkpoint(path)?;
        if header.config != self.config || header.names != self.names {
            return Err(CoreError::Shape(format!(
                "checkpoint {} holds {:?}, expected {:?}",
                path.display(),
                header.config,
                self.config
            )));
        }
        for (p, q) in self.params.iter().zip(&params) {
            if p.shape() != q.shape() {
                return Err(CoreError::Shape(format!(
                    "checkpoint tensor shape {:?} differs from {:?}",
                    q.shape(),
                    p.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        Ok(Self {
            config: header.config,
            seed: header.seed,
            names: header.names,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    config: OperatorConfig,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
}

/// Run tag stored in a checkpoint header, if any.
pub fn checkpoint_tag(path: &Path) -> Result<Option<String>> {
    Ok(read_checkpoint(path)?.0.tag)
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CoreError::io(path, e))?;
    let bad = |msg: &str| CoreError::Schema(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.names.len() != header.shapes.len() {
        return Err(bad("header names and shapes disagree"));
    }
    let total: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let data = &bytes[16 + hlen..];
    if data.len() != 8 * total {
        return Err(bad(&format!("expected {} payload bytes, found {}", 8 * total, data.len())));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut params = Vec::with_capacity(header.shapes.len());
    for s in &header.shapes {
        let n = s.iter().product();
        params.push(Tensor::new(s.clone(), values.by_ref().take(n).collect())?);
    }
    Ok((header, params))
}
