//! Multi-channel fields on a uniform periodic grid.
//!
//! Layout is `[C, H, W]` with `ij` indexing: axis 1 runs along x with
//! spacing `dx`, axis 2 along y with spacing `dy`.

use opssplit_tensor::Tensor;

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub data: Tensor,
    pub dx: f64,
    pub dy: f64,
}

impl Field {
    pub fn new(data: Tensor, dx: f64, dy: f64) -> Result<Self> {
        if data.rank() != 3 {
            return Err(CoreError::Shape(format!("field must be [C, H, W], got {:?}", data.shape())));
        }
        Ok(Self { data, dx, dy })
    }

    pub fn zeros(c: usize, h: usize, w: usize, dx: f64, dy: f64) -> Self {
        Self {
            data: Tensor::zeros(&[c, h, w]),
            dx,
            dy,
        }
    }

    /// Sample `f(x, y)` per channel at `x = x0 + i·dx`, `y = y0 + j·dy`.
    pub fn from_fn(
        c: usize,
        h: usize,
        w: usize,
        (x0, dx): (f64, f64),
        (y0, dy): (f64, f64),
        f: impl Fn(usize, f64, f64) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data.push(f(ch, x0 + i as f64 * dx, y0 + j as f64 * dy));
                }
            }
        }
        Self {
            data: Tensor::new(vec![c, h, w], data).expect("shape"),
            dx,
            dy,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h() * self.w();
        &self.data.data()[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h() * self.w();
        &mut self.data.data_mut()[c * n..(c + 1) * n]
    }

    /// Periodic shift by `(si, sj)` cells: out[i, j] = self[i − si, j − sj].
    pub fn shifted(&self, si: isize, sj: isize) -> Self {
        let (c, h, w) = (self.channels(), self.h(), self.w());
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h {
                let src_i = (i as isize - si).rem_euclid(h as isize) as usize;
                for j in 0..w {
                    let src_j = (j as isize - sj).rem_euclid(w as isize) as usize;
                    out[(ch * h + i) * w + j] = self.data.data()[(ch * h + src_i) * w + src_j];
                }
            }
        }
        Self {
            data: Tensor::new(vec![c, h, w], out).expect("shape"),
            dx: self.dx,
            dy: self.dy,
        }
    }
}
