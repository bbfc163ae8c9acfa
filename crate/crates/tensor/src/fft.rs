//! Real 2-D FFTs in the real-to-complex layout `[C, H, W/2 + 1]`.
//!
//! Normalisation: the forward transform is unscaled, the inverse is scaled
//! by `1 / (H·W)`. Spectral solvers and spectral layers rely on the same
//! convention.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Complex coefficients of a real multi-channel field.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub dx: f64,
    pub dy: f64,
    /// `[C, H, W/2 + 1]`, row-major.
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn half_w(&self) -> usize {
        self.w / 2 + 1
    }

    pub fn at(&self, c: usize, kx: usize, ky: usize) -> Complex64 {
        self.data[(c * self.h + kx) * self.half_w() + ky]
    }

    /// Σ |f|² over the full (Hermitian-completed) spectrum divided by H·W,
    /// which equals Σ |f|² in physical space.
    pub fn energy(&self) -> f64 {
        let hw = self.half_w();
        let mut total = 0.0;
        for c in 0..self.channels {
            for kx in 0..self.h {
                for ky in 0..hw {
                    let mult = if ky == 0 || (self.w % 2 == 0 && ky == self.w / 2) {
                        1.0
                    } else {
                        2.0
                    };
                    total += mult * self.at(c, kx, ky).norm_sqr();
                }
            }
        }
        total / (self.h * self.w) as f64
    }
}

/// Reusable plans for one grid size.
#[derive(Clone)]
pub struct Fft2Plan {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2Plan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2Plan")
            .field("h", &self.h)
            .field("w", &self.w)
            .finish()
    }
}

impl Fft2Plan {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddGrid { h, w });
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Forward transform of one `[H, W]` plane into `[H, W/2 + 1]`.
    pub fn forward_plane(&self, plane: &[f64], out: &mut [Complex64]) {
        let (h, w) = (self.h, self.w);
        let hw = w / 2 + 1;
        let mut full: Vec<Complex64> = plane.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        for row in full.chunks_mut(w) {
            self.row_fwd.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for ky in 0..hw {
            for x in 0..h {
                col[x] = full[x * w + ky];
            }
            self.col_fwd.process(&mut col);
            for kx in 0..h {
                out[kx * hw + ky] = col[kx];
            }
        }
    }

    /// Inverse transform of one `[H, W/2 + 1]` plane, scaled by 1/(H·W).
    pub fn inverse_plane(&self, spec: &[Complex64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let hw = w / 2 + 1;
        let mut full = vec![Complex64::new(0.0, 0.0); h * w];
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for ky in 0..hw {
            for kx in 0..h {
                col[kx] = spec[kx * hw + ky];
            }
            self.col_inv.process(&mut col);
            for x in 0..h {
                full[x * w + ky] = col[x];
            }
        }
        // Hermitian completion along the last axis; the DC and Nyquist
        // columns contribute only through their real parts.
        for x in 0..h {
            let row = &mut full[x * w..(x + 1) * w];
            row[0].im = 0.0;
            row[w / 2].im = 0.0;
            for ky in 1..w / 2 {
                row[w - ky] = row[ky].conj();
            }
            self.row_inv.process(row);
        }
        let scale = 1.0 / (h * w) as f64;
        for (o, v) in out.iter_mut().zip(&full) {
            *o = v.re * scale;
        }
    }
}

fn plane_dims(field: &Tensor) -> Result<(usize, usize, usize)> {
    match *field.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::Invalid(format!(
            "fft2 expects [H, W] or [C, H, W], got {:?}",
            field.shape()
        ))),
    }
}

/// Forward 2-D FFT of every channel of `field`.
pub fn fft2(field: &Tensor, dx: f64, dy: f64) -> Result<Spectrum> {
    let (c, h, w) = plane_dims(field)?;
    let plan = Fft2Plan::new(h, w)?;
    let hw = w / 2 + 1;
    let mut data = vec![Complex64::new(0.0, 0.0); c * h * hw];
    for ch in 0..c {
        plan.forward_plane(
            &field.data()[ch * h * w..(ch + 1) * h * w],
            &mut data[ch * h * hw..(ch + 1) * h * hw],
        );
    }
    Ok(Spectrum {
        channels: c,
        h,
        w,
        dx,
        dy,
        data,
    })
}

/// Inverse of [`fft2`]; returns a `[C, H, W]` tensor.
pub fn ifft2(spec: &Spectrum) -> Result<Tensor> {
    let plan = Fft2Plan::new(spec.h, spec.w)?;
    let (h, w) = (spec.h, spec.w);
    let hw = spec.half_w();
    let mut out = vec![0.0; spec.channels * h * w];
    for ch in 0..spec.channels {
        plan.inverse_plane(
            &spec.data[ch * h * hw..(ch + 1) * h * hw],
            &mut out[ch * h * w..(ch + 1) * h * w],
        );
    }
    Tensor::new(vec![spec.channels, h, w], out)
}

/// Signed integer wavenumber of FFT bin `k` on an axis of length `n`.
pub fn signed_index(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn constant_field_is_pure_dc() {
        let f = Tensor::full(&[1, 8, 8], 3.0);
        let s = fft2(&f, 1.0, 1.0).unwrap();
        assert!((s.at(0, 0, 0).re - 3.0 * 64.0).abs() < 1e-12);
        for kx in 0..8 {
            for ky in 0..5 {
                if (kx, ky) != (0, 0) {
                    assert!(s.at(0, kx, ky).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pure_tone_only_in_unit_modes() {
        let n = 16;
        // f(x, y) = sin(2π x / L) with x along the first axis.
        let data: Vec<f64> = (0..n * n)
            .map(|i| (2.0 * PI * (i / n) as f64 / n as f64).sin())
            .collect();
        let f = Tensor::new(vec![n, n], data).unwrap();
        let s = fft2(&f, 1.0, 1.0).unwrap();
        for kx in 0..n {
            for ky in 0..n / 2 + 1 {
                let mag = s.at(0, kx, ky).norm();
                if ky == 0 && (kx == 1 || kx == n - 1) {
                    assert!((mag - (n * n) as f64 / 2.0).abs() < 1e-9);
                } else {
                    assert!(mag < 1e-9, "leak at ({kx},{ky}) = {mag}");
                }
            }
        }
    }

    #[test]
    fn odd_grid_rejected() {
        let f = Tensor::zeros(&[1, 6, 7]);
        assert!(matches!(fft2(&f, 1.0, 1.0), Err(TensorError::OddGrid { .. })));
        let f = Tensor::zeros(&[1, 2, 2]);
        assert!(fft2(&f, 1.0, 1.0).is_err());
    }

    #[test]
    fn signed_wavenumbers() {
        assert_eq!(signed_index(0, 8), 0);
        assert_eq!(signed_index(4, 8), 4);
        assert_eq!(signed_index(5, 8), -3);
    }
}
