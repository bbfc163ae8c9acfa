//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Variables are
//! lightweight [`Var`] handles into it. [`Tape::backward`] consumes the tape
//! and returns the gradients of a scalar loss with respect to every node
//! that depends on a leaf created with `requires_grad = true`.
//!
//! ```
//! use opssplit_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::modes::ModeBasis;
use crate::tensor::{broadcast_map, broadcast_shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Element-wise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sin,
    Tanh,
    Gelu,
}

/// One tap of a fixed periodic stencil. Applied in difference form,
/// `coeff · (x[i + di, j + dj] − x[i, j])`, which is exact for kernels
/// whose coefficients sum to zero and maps constants to exactly zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub di: isize,
    pub dj: isize,
    pub coeff: f64,
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Neg,
    Exp,
    Ln,
    Sin,
    Tanh,
    Gelu,
    Sqrt,
    Square,
}

enum Op {
    Leaf,
    Binary(BinOp, usize, usize),
    Unary(UnOp, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    LpNorm(usize, f64),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    ChannelMix {
        x: usize,
        w: usize,
        b: usize,
    },
    SpectralConv {
        x: usize,
        wr: usize,
        wi: usize,
        basis: Rc<ModeBasis>,
        xr: Vec<f64>,
        xi: Vec<f64>,
    },
    Conv2d {
        x: usize,
        k: usize,
        b: usize,
    },
    FixedTaps {
        x: usize,
        taps: Rc<[Tap]>,
    },
    Select {
        x: usize,
        channels: Vec<usize>,
    },
    Concat(Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Confined to a single thread.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Exact (erf-based) GELU, `x · Φ(x)`.
pub fn gelu_value(x: f64) -> f64 {
    gelu(x)
}

fn spatial_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

/// dst[i, j] += a · src[(i + di) mod h, (j + dj) mod w]
fn shifted_axpy(dst: &mut [f64], src: &[f64], a: f64, di: isize, dj: isize, h: usize, w: usize) {
    let dj = dj.rem_euclid(w as isize) as usize;
    for i in 0..h {
        let si = (i as isize + di).rem_euclid(h as isize) as usize;
        let s = &src[si * w..(si + 1) * w];
        let d = &mut dst[i * w..(i + 1) * w];
        let split = w - dj;
        for (dv, sv) in d[..split].iter_mut().zip(&s[dj..]) {
            *dv += a * sv;
        }
        for (dv, sv) in d[split..].iter_mut().zip(&s[..dj]) {
            *dv += a * sv;
        }
    }
}

/// Σ g[i, j] · src[(i + di) mod h, (j + dj) mod w]
fn shifted_dot(g: &[f64], src: &[f64], di: isize, dj: isize, h: usize, w: usize) -> f64 {
    let dj = dj.rem_euclid(w as isize) as usize;
    let mut acc = 0.0;
    for i in 0..h {
        let si = (i as isize + di).rem_euclid(h as isize) as usize;
        let s = &src[si * w..(si + 1) * w];
        let gr = &g[i * w..(i + 1) * w];
        let split = w - dj;
        for (gv, sv) in gr[..split].iter().zip(&s[dj..]) {
            acc += gv * sv;
        }
        for (gv, sv) in gr[split..].iter().zip(&s[..dj]) {
            acc += gv * sv;
        }
    }
    acc
}

/// Apply fixed taps in difference form to every `[H, W]` plane of `x`.
pub fn apply_taps(x: &[f64], planes: usize, h: usize, w: usize, taps: &[Tap]) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for tap in taps {
            let dj = tap.dj.rem_euclid(w as isize) as usize;
            for i in 0..h {
                let si = (i as isize + tap.di).rem_euclid(h as isize) as usize;
                let s = &src[si * w..(si + 1) * w];
                let c = &src[i * w..(i + 1) * w];
                let d = &mut dst[i * w..(i + 1) * w];
                for j in 0..w {
                    let sj = if j + dj < w { j + dj } else { j + dj - w };
                    d[j] += tap.coeff * (s[sj] - c[j]);
                }
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        self.nodes.borrow()[v.index].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.index].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> Rc<Tensor> {
        self.nodes.borrow()[i].value.clone()
    }

    fn finish(&self, out: Tensor, op: Op, parents: &[usize], name: &'static str) -> Result<Var> {
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(out, op, rg))
    }

    /// Dispatch by name; binary operations require `b`.
    pub fn elementwise(&self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| TensorError::Invalid(format!("{op:?} needs two operands")));
        match op {
            ElemOp::Add => self.add(a, need_b()?),
            ElemOp::Sub => self.sub(a, need_b()?),
            ElemOp::Mul => self.mul(a, need_b()?),
            ElemOp::Div => self.div(a, need_b()?),
            ElemOp::Neg => self.neg(a),
            ElemOp::Exp => self.exp(a),
            ElemOp::Ln => self.ln(a),
            ElemOp::Sin => self.sin(a),
            ElemOp::Tanh => self.tanh(a),
            ElemOp::Gelu => self.gelu(a),
        }
    }

    fn binary(&self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let out = if va.shape() == vb.shape() {
            va.zip_map(&vb, f)?
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape())?;
            let ma = broadcast_map(&shape, va.shape());
            let mb = broadcast_map(&shape, vb.shape());
            let (da, db) = (va.data(), vb.data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(shape, data)?
        };
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        self.finish(out, Op::Binary(op, ia, ib), &[ia, ib], name)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    fn unary(&self, op: UnOp, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = self.val(ia);
        if let UnOp::Ln = op {
            if let Some(&bad) = va.data().iter().find(|&&x| x <= 0.0) {
                return Err(TensorError::NonPositiveLog { value: bad });
            }
        }
        let out = va.map(|x| match op {
            UnOp::Neg => -x,
            UnOp::Exp => x.exp(),
            UnOp::Ln => x.ln(),
            UnOp::Sin => x.sin(),
            UnOp::Tanh => x.tanh(),
            UnOp::Gelu => gelu(x),
            UnOp::Sqrt => x.sqrt(),
            UnOp::Square => x * x,
        });
        let name = match op {
            UnOp::Neg => "neg",
            UnOp::Exp => "exp",
            UnOp::Ln => "ln",
            UnOp::Sin => "sin",
            UnOp::Tanh => "tanh",
            UnOp::Gelu => "gelu",
            UnOp::Sqrt => "sqrt",
            UnOp::Square => "square",
        };
        self.finish(out, Op::Unary(op, ia), &[ia], name)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(UnOp::Neg, a)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(UnOp::Exp, a)
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary(UnOp::Ln, a)
    }

    pub fn sin(&self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sin, a)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(UnOp::Tanh, a)
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(UnOp::Gelu, a)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sqrt, a)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(UnOp::Square, a)
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|x| x * s);
        self.finish(out, Op::Scale(ia, s), &[ia], "scale")
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|x| x + s);
        self.finish(out, Op::AddScalar(ia), &[ia], "add_scalar")
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.val(ia).sum());
        self.finish(out, Op::Sum(ia), &[ia], "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.val(ia);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.finish(out, Op::Mean(ia), &[ia], "mean")
    }

    /// `(Σ |x|^p)^{1/p}`, `p ≥ 1`.
    pub fn lp_norm(&self, a: Var, p: f64) -> Result<Var> {
        if p < 1.0 {
            return Err(TensorError::Invalid(format!("p-norm needs p >= 1, got {p}")));
        }
        let ia = self.idx(a)?;
        let v = self.val(ia);
        let norm = if p == 2.0 {
            v.data().iter().map(|x| x * x).sum::<f64>().sqrt()
        } else {
            v.data().iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
        };
        self.finish(Tensor::scalar(norm), Op::LpNorm(ia, p), &[ia], "lp_norm")
    }

    /// `y = x W + b` over the last axis of `x`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (vx, vw, vb) = (self.val(ix), self.val(iw), self.val(ib));
        let (n_in, n_out) = match *vw.shape() {
            [i, o] => (i, o),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: vx.shape().to_vec(),
                    rhs: vw.shape().to_vec(),
                })
            }
        };
        if vx.shape().last() != Some(&n_in) || vb.shape() != [n_out] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let rows = vx.len() / n_in;
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &vx.data()[r * n_in..(r + 1) * n_in];
            let yr = &mut out[r * n_out..(r + 1) * n_out];
            yr.copy_from_slice(vb.data());
            for (i, &xi) in xr.iter().enumerate() {
                let wr = &vw.data()[i * n_out..(i + 1) * n_out];
                for (y, &wv) in yr.iter_mut().zip(wr) {
                    *y += xi * wv;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        self.finish(
            Tensor::new(shape, out)?,
            Op::Linear { x: ix, w: iw, b: ib },
            &[ix, iw, ib],
            "linear",
        )
    }

    /// Point-wise channel mixing: `x [Cin, ...]`, `w [Cin, Cout]`, `b [Cout]`.
    pub fn channel_mix(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (vx, vw, vb) = (self.val(ix), self.val(iw), self.val(ib));
        let mismatch = || TensorError::ShapeMismatch {
            op: "channel_mix",
            lhs: vx.shape().to_vec(),
            rhs: vw.shape().to_vec(),
        };
        let (cin, cout) = match *vw.shape() {
            [i, o] => (i, o),
            _ => return Err(mismatch()),
        };
        if vx.shape().first() != Some(&cin) || vb.shape() != [cout] {
            return Err(mismatch());
        }
        let s = vx.len() / cin;
        let mut out = vec![0.0; cout * s];
        for o in 0..cout {
            let y = &mut out[o * s..(o + 1) * s];
            y.iter_mut().for_each(|v| *v = vb.data()[o]);
            for i in 0..cin {
                let a = vw.data()[i * cout + o];
                let xi = &vx.data()[i * s..(i + 1) * s];
                for (yv, xv) in y.iter_mut().zip(xi) {
                    *yv += a * xv;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = cout;
        self.finish(
            Tensor::new(shape, out)?,
            Op::ChannelMix { x: ix, w: iw, b: ib },
            &[ix, iw, ib],
            "channel_mix",
        )
    }

    /// Spectral convolution: multiply the retained Fourier modes of every
    /// input channel by complex weights `wr + i·wi` (shape
    /// `[Cin, Cout, 2·m1, m2]`) and synthesise the output channels.
    pub fn spectral_conv(&self, x: Var, wr: Var, wi: Var, basis: Rc<ModeBasis>) -> Result<Var> {
        let (ix, iwr, iwi) = (self.idx(x)?, self.idx(wr)?, self.idx(wi)?);
        let (vx, vwr, vwi) = (self.val(ix), self.val(iwr), self.val(iwi));
        let (cin, h, w) = spatial_dims(&vx, "spectral_conv")?;
        let nc = basis.n_coeffs();
        let (m1, m2) = basis.modes();
        let cout = match *vwr.shape() {
            [i, o, r, m] if i == cin && r == 2 * m1 && m == m2 => o,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "spectral_conv",
                    lhs: vx.shape().to_vec(),
                    rhs: vwr.shape().to_vec(),
                })
            }
        };
        if vwi.shape() != vwr.shape() || basis.grid() != (h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "spectral_conv",
                lhs: vwr.shape().to_vec(),
                rhs: vwi.shape().to_vec(),
            });
        }
        let mut xr = vec![0.0; cin * nc];
        let mut xi = vec![0.0; cin * nc];
        for c in 0..cin {
            basis.forward(
                &vx.data()[c * h * w..(c + 1) * h * w],
                &mut xr[c * nc..(c + 1) * nc],
                &mut xi[c * nc..(c + 1) * nc],
            );
        }
        let weights = basis.synthesis_weights();
        let mut out = vec![0.0; cout * h * w];
        let mut yr = vec![0.0; nc];
        let mut yi = vec![0.0; nc];
        for o in 0..cout {
            yr.iter_mut().for_each(|v| *v = 0.0);
            yi.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..cin {
                let off = (c * cout + o) * nc;
                let ar = &vwr.data()[off..off + nc];
                let ai = &vwi.data()[off..off + nc];
                let br = &xr[c * nc..(c + 1) * nc];
                let bi = &xi[c * nc..(c + 1) * nc];
                for k in 0..nc {
                    yr[k] += br[k] * ar[k] - bi[k] * ai[k];
                    yi[k] += br[k] * ai[k] + bi[k] * ar[k];
                }
            }
            basis.inverse(&yr, &yi, &weights, &mut out[o * h * w..(o + 1) * h * w]);
        }
        self.finish(
            Tensor::new(vec![cout, h, w], out)?,
            Op::SpectralConv {
                x: ix,
                wr: iwr,
                wi: iwi,
                basis,
                xr,
                xi,
            },
            &[ix, iwr, iwi],
            "spectral_conv",
        )
    }

    /// Periodic 2-D cross-correlation, `x [Cin, H, W]`, `k [Cout, Cin, KH, KW]`
    /// with odd kernel extents centred on the output pixel, `b [Cout]`.
    pub fn conv2d_periodic(&self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (ix, ik, ib) = (self.idx(x)?, self.idx(k)?, self.idx(b)?);
        let (vx, vk, vb) = (self.val(ix), self.val(ik), self.val(ib));
        let (cin, h, w) = spatial_dims(&vx, "conv2d")?;
        let (cout, kh, kw) = match *vk.shape() {
            [o, i, kh, kw] if i == cin && kh % 2 == 1 && kw % 2 == 1 => (o, kh, kw),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vx.shape().to_vec(),
                    rhs: vk.shape().to_vec(),
                })
            }
        };
        if vb.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: vb.shape().to_vec(),
                rhs: vec![cout],
            });
        }
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let hw = h * w;
        let mut out = vec![0.0; cout * hw];
        for o in 0..cout {
            let dst = &mut out[o * hw..(o + 1) * hw];
            dst.iter_mut().for_each(|v| *v = vb.data()[o]);
            for c in 0..cin {
                let src = &vx.data()[c * hw..(c + 1) * hw];
                for p in 0..kh {
                    for q in 0..kw {
                        let a = vk.data()[((o * cin + c) * kh + p) * kw + q];
                        shifted_axpy(dst, src, a, p as isize - ph, q as isize - pw, h, w);
                    }
                }
            }
        }
        self.finish(
            Tensor::new(vec![cout, h, w], out)?,
            Op::Conv2d { x: ix, k: ik, b: ib },
            &[ix, ik, ib],
            "conv2d",
        )
    }

    /// Fixed periodic stencil applied channel by channel to `x [C, H, W]`.
    pub fn fixed_taps(&self, x: Var, taps: Rc<[Tap]>) -> Result<Var> {
        let ix = self.idx(x)?;
        let vx = self.val(ix);
        let (c, h, w) = spatial_dims(&vx, "fixed_taps")?;
        let out = apply_taps(vx.data(), c, h, w, &taps);
        self.finish(
            Tensor::new(vec![c, h, w], out)?,
            Op::FixedTaps { x: ix, taps },
            &[ix],
            "fixed_taps",
        )
    }

    /// Select entries along the leading axis.
    pub fn select(&self, x: Var, channels: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let vx = self.val(ix);
        let c = *vx.shape().first().ok_or_else(|| TensorError::Invalid("select on scalar".into()))?;
        if let Some(&bad) = channels.iter().find(|&&k| k >= c) {
            return Err(TensorError::Invalid(format!("channel {bad} out of range for {c}")));
        }
        let s = vx.len() / c;
        let mut out = Vec::with_capacity(channels.len() * s);
        for &k in channels {
            out.extend_from_slice(&vx.data()[k * s..(k + 1) * s]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = channels.len();
        self.finish(
            Tensor::new(shape, out)?,
            Op::Select {
                x: ix,
                channels: channels.to_vec(),
            },
            &[ix],
            "select",
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of nothing".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let vals: Vec<Rc<Tensor>> = idx.iter().map(|&i| self.val(i)).collect();
        let tail = vals[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in &vals {
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vals[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.finish(Tensor::new(shape, data)?, Op::Concat(idx.clone()), &idx, "concat")
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let nodes = self.nodes.into_inner();
        let lv = &nodes[il];
        if lv.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.value.shape().to_vec(),
            });
        }
        if !lv.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::new(lv.value.shape().to_vec(), vec![1.0])?);
        for i in (0..=il).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], i: usize, g: Tensor) {
    if !nodes[i].requires_grad {
        return;
    }
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_map(g.shape(), shape);
    let mut out = Tensor::zeros(shape);
    {
        let d = out.data_mut();
        for (k, &j) in map.iter().enumerate() {
            d[j] += g.data()[k];
        }
    }
    out
}

fn backprop(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Binary(op, a, b) => {
            let (a, b) = (*a, *b);
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let same = va.shape() == vb.shape();
            let (ma, mb) = if same {
                (None, None)
            } else {
                (
                    Some(broadcast_map(g.shape(), va.shape())),
                    Some(broadcast_map(g.shape(), vb.shape())),
                )
            };
            let at = |k: usize| match &ma {
                Some(m) => va.data()[m[k]],
                None => va.data()[k],
            };
            let bt = |k: usize| match &mb {
                Some(m) => vb.data()[m[k]],
                None => vb.data()[k],
            };
            let n = g.len();
            let gd = g.data();
            let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                BinOp::Add => (gd.to_vec(), gd.to_vec()),
                BinOp::Sub => (gd.to_vec(), gd.iter().map(|x| -x).collect()),
                BinOp::Mul => ((0..n).map(|k| gd[k] * bt(k)).collect(), (0..n).map(|k| gd[k] * at(k)).collect()),
                BinOp::Div => (
                    (0..n).map(|k| gd[k] / bt(k)).collect(),
                    (0..n).map(|k| -gd[k] * at(k) / (bt(k) * bt(k))).collect(),
                ),
            };
            let shape = g.shape().to_vec();
            let ga = Tensor::new(shape.clone(), ga).expect("shape");
            let gb = Tensor::new(shape, gb).expect("shape");
            accumulate(grads, nodes, a, reduce_to(&ga, va.shape()));
            accumulate(grads, nodes, b, reduce_to(&gb, vb.shape()));
        }
        Op::Unary(op, a) => {
            let x = &nodes[*a].value;
            let gd = g.data();
            let xd = x.data();
            let yd = out.data();
            let data: Vec<f64> = (0..gd.len())
                .map(|k| {
                    gd[k]
                        * match op {
                            UnOp::Neg => -1.0,
                            UnOp::Exp => yd[k],
                            UnOp::Ln => 1.0 / xd[k],
                            UnOp::Sin => xd[k].cos(),
                            UnOp::Tanh => 1.0 - yd[k] * yd[k],
                            UnOp::Gelu => gelu_grad(xd[k]),
                            UnOp::Sqrt => 0.5 / yd[k],
                            UnOp::Square => 2.0 * xd[k],
                        }
                })
                .collect();
            accumulate(grads, nodes, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.map(|v| v * s)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Sum(a) => {
            let gv = g.data()[0];
            accumulate(grads, nodes, *a, Tensor::full(nodes[*a].value.shape(), gv));
        }
        Op::Mean(a) => {
            let x = &nodes[*a].value;
            let gv = g.data()[0] / x.len() as f64;
            accumulate(grads, nodes, *a, Tensor::full(x.shape(), gv));
        }
        Op::LpNorm(a, p) => {
            let x = &nodes[*a].value;
            let norm = out.data()[0];
            let gv = g.data()[0];
            let gx = if norm == 0.0 {
                Tensor::zeros(x.shape())
            } else if *p == 2.0 {
                x.map(|v| gv * v / norm)
            } else {
                let denom = norm.powf(p - 1.0);
                x.map(|v| gv * v.signum() * v.abs().powf(p - 1.0) / denom)
            };
            accumulate(grads, nodes, *a, gx);
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            let (n_in, n_out) = (vw.shape()[0], vw.shape()[1]);
            let rows = vx.len() / n_in;
            let gd = g.data();
            let mut gx = vec![0.0; vx.len()];
            let mut gw = vec![0.0; vw.len()];
            let mut gb = vec![0.0; n_out];
            for r in 0..rows {
                let gr = &gd[r * n_out..(r + 1) * n_out];
                let xr = &vx.data()[r * n_in..(r + 1) * n_in];
                for (o, &gv) in gr.iter().enumerate() {
                    gb[o] += gv;
                }
                for i in 0..n_in {
                    let wr = &vw.data()[i * n_out..(i + 1) * n_out];
                    gx[r * n_in + i] = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
                    let gwr = &mut gw[i * n_out..(i + 1) * n_out];
                    for (gwv, &gv) in gwr.iter_mut().zip(gr) {
                        *gwv += xr[i] * gv;
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vx.shape().to_vec(), gx).expect("shape"));
            accumulate(grads, nodes, *w, Tensor::new(vw.shape().to_vec(), gw).expect("shape"));
            accumulate(grads, nodes, *b, Tensor::from_vec(gb));
        }
        Op::ChannelMix { x, w, b } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            let (cin, cout) = (vw.shape()[0], vw.shape()[1]);
            let s = vx.len() / cin;
            let gd = g.data();
            let mut gx = vec![0.0; vx.len()];
            let mut gw = vec![0.0; vw.len()];
            let mut gb = vec![0.0; cout];
            for o in 0..cout {
                let go = &gd[o * s..(o + 1) * s];
                gb[o] = go.iter().sum();
                for i in 0..cin {
                    let a = vw.data()[i * cout + o];
                    let xi = &vx.data()[i * s..(i + 1) * s];
                    gw[i * cout + o] = go.iter().zip(xi).map(|(p, q)| p * q).sum();
                    let gxi = &mut gx[i * s..(i + 1) * s];
                    for (gv, &gov) in gxi.iter_mut().zip(go) {
                        *gv += a * gov;
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vx.shape().to_vec(), gx).expect("shape"));
            accumulate(grads, nodes, *w, Tensor::new(vw.shape().to_vec(), gw).expect("shape"));
            accumulate(grads, nodes, *b, Tensor::from_vec(gb));
        }
        Op::SpectralConv {
            x,
            wr,
            wi,
            basis,
            xr,
            xi,
        } => {
            let (vx, vwr, vwi) = (&nodes[*x].value, &nodes[*wr].value, &nodes[*wi].value);
            let (cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let cout = vwr.shape()[1];
            let nc = basis.n_coeffs();
            let m2 = basis.modes().1;
            let sw = basis.synthesis_weights();
            // Adjoint of synthesis: gY = (c_k / HW) · forward(g).
            let mut gyr = vec![0.0; cout * nc];
            let mut gyi = vec![0.0; cout * nc];
            for o in 0..cout {
                basis.forward(
                    &g.data()[o * h * w..(o + 1) * h * w],
                    &mut gyr[o * nc..(o + 1) * nc],
                    &mut gyi[o * nc..(o + 1) * nc],
                );
                for k in 0..nc {
                    let s = sw[k % m2];
                    gyr[o * nc + k] *= s;
                    gyi[o * nc + k] *= s;
                }
            }
            let mut gwr = vec![0.0; vwr.len()];
            let mut gwi = vec![0.0; vwi.len()];
            let mut gx = vec![0.0; vx.len()];
            let mut gxr = vec![0.0; nc];
            let mut gxi = vec![0.0; nc];
            let ones = vec![1.0; m2];
            for c in 0..cin {
                gxr.iter_mut().for_each(|v| *v = 0.0);
                gxi.iter_mut().for_each(|v| *v = 0.0);
                let br = &xr[c * nc..(c + 1) * nc];
                let bi = &xi[c * nc..(c + 1) * nc];
                for o in 0..cout {
                    let off = (c * cout + o) * nc;
                    let ar = &vwr.data()[off..off + nc];
                    let ai = &vwi.data()[off..off + nc];
                    let gr = &gyr[o * nc..(o + 1) * nc];
                    let gi = &gyi[o * nc..(o + 1) * nc];
                    for k in 0..nc {
                        // conj(X) · gY and conj(W) · gY
                        gwr[off + k] = br[k] * gr[k] + bi[k] * gi[k];
                        gwi[off + k] = br[k] * gi[k] - bi[k] * gr[k];
                        gxr[k] += ar[k] * gr[k] + ai[k] * gi[k];
                        gxi[k] += ar[k] * gi[k] - ai[k] * gr[k];
                    }
                }
                basis.inverse(&gxr, &gxi, &ones, &mut gx[c * h * w..(c + 1) * h * w]);
            }
            accumulate(grads, nodes, *x, Tensor::new(vx.shape().to_vec(), gx).expect("shape"));
            accumulate(grads, nodes, *wr, Tensor::new(vwr.shape().to_vec(), gwr).expect("shape"));
            accumulate(grads, nodes, *wi, Tensor::new(vwi.shape().to_vec(), gwi).expect("shape"));
        }
        Op::Conv2d { x, k, b } => {
            let (vx, vk) = (&nodes[*x].value, &nodes[*k].value);
            let (cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let (cout, kh, kw) = (vk.shape()[0], vk.shape()[2], vk.shape()[3]);
            let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
            let hw = h * w;
            let mut gx = vec![0.0; vx.len()];
            let mut gk = vec![0.0; vk.len()];
            let mut gb = vec![0.0; cout];
            for o in 0..cout {
                let go = &g.data()[o * hw..(o + 1) * hw];
                gb[o] = go.iter().sum();
                for c in 0..cin {
                    let src = &vx.data()[c * hw..(c + 1) * hw];
                    for p in 0..kh {
                        for q in 0..kw {
                            let (di, dj) = (p as isize - ph, q as isize - pw);
                            let kidx = ((o * cin + c) * kh + p) * kw + q;
                            gk[kidx] = shifted_dot(go, src, di, dj, h, w);
                            shifted_axpy(&mut gx[c * hw..(c + 1) * hw], go, vk.data()[kidx], -di, -dj, h, w);
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vx.shape().to_vec(), gx).expect("shape"));
            accumulate(grads, nodes, *k, Tensor::new(vk.shape().to_vec(), gk).expect("shape"));
            accumulate(grads, nodes, *b, Tensor::from_vec(gb));
        }
        Op::FixedTaps { x, taps } => {
            let vx = &nodes[*x].value;
            let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let hw = h * w;
            let mut gx = vec![0.0; vx.len()];
            for p in 0..c {
                let gp = &g.data()[p * hw..(p + 1) * hw];
                let dst = &mut gx[p * hw..(p + 1) * hw];
                for tap in taps.iter() {
                    shifted_axpy(dst, gp, tap.coeff, -tap.di, -tap.dj, h, w);
                    for (d, &gv) in dst.iter_mut().zip(gp) {
                        *d -= tap.coeff * gv;
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vx.shape().to_vec(), gx).expect("shape"));
        }
        Op::Select { x, channels } => {
            let vx = &nodes[*x].value;
            let s = vx.len() / vx.shape()[0];
            let mut gx = Tensor::zeros(vx.shape());
            {
                let d = gx.data_mut();
                for (slot, &k) in channels.iter().enumerate() {
                    for t in 0..s {
                        d[k * s + t] += g.data()[slot * s + t];
                    }
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let shape = nodes[p].value.shape().to_vec();
                let n = nodes[p].value.len();
                let part = Tensor::new(shape, g.data()[offset..offset + n].to_vec()).expect("shape");
                offset += n;
                accumulate(grads, nodes, p, part);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}
