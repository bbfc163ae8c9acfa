//! Truncated 2-D discrete Fourier transforms over a fixed set of retained
//! modes. This is the kernel behind spectral-convolution layers: only the
//! lowest `m1` positive and `m1` negative row wavenumbers and the first
//! `m2` column wavenumbers of the real-to-complex layout are ever touched,
//! so a partial DFT against precomputed twiddles is cheaper than a full
//! transform and has an explicit adjoint.

use std::f64::consts::PI;

use crate::error::{Result, TensorError};

#[derive(Debug, Clone)]
pub struct ModeBasis {
    h: usize,
    w: usize,
    m1: usize,
    m2: usize,
    /// cos/sin(2π k2 y / W), laid out [m2][W].
    cw: Vec<f64>,
    sw: Vec<f64>,
    /// cos/sin(2π kr x / H) for the retained rows, laid out [2·m1][H].
    ch: Vec<f64>,
    sh: Vec<f64>,
}

impl ModeBasis {
    pub fn new(h: usize, w: usize, m1: usize, m2: usize) -> Result<Self> {
        if m1 == 0 || m2 == 0 || m1 > h / 2 || m2 > w / 2 {
            return Err(TensorError::Invalid(format!(
                "modes ({m1}, {m2}) exceed the Nyquist limit of a {h}x{w} grid"
            )));
        }
        let rows: Vec<usize> = (0..m1).chain(h - m1..h).collect();
        let mut cw = Vec::with_capacity(m2 * w);
        let mut sw = Vec::with_capacity(m2 * w);
        for k in 0..m2 {
            for y in 0..w {
                let phase = 2.0 * PI * ((k * y) % w) as f64 / w as f64;
                cw.push(phase.cos());
                sw.push(phase.sin());
            }
        }
        let mut ch = Vec::with_capacity(rows.len() * h);
        let mut sh = Vec::with_capacity(rows.len() * h);
        for &k in &rows {
            for x in 0..h {
                let phase = 2.0 * PI * ((k * x) % h) as f64 / h as f64;
                ch.push(phase.cos());
                sh.push(phase.sin());
            }
        }
        Ok(Self {
            h,
            w,
            m1,
            m2,
            cw,
            sw,
            ch,
            sh,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn modes(&self) -> (usize, usize) {
        (self.m1, self.m2)
    }

    /// Number of retained complex coefficients per plane.
    pub fn n_coeffs(&self) -> usize {
        2 * self.m1 * self.m2
    }

    /// Column multiplicity of the real-to-complex layout, divided by H·W:
    /// the k2 = 0 column appears once, every other retained column stands in
    /// for its Hermitian mirror as well.
    pub fn synthesis_weights(&self) -> Vec<f64> {
        let n = (self.h * self.w) as f64;
        (0..self.m2)
            .map(|k| if k == 0 { 1.0 / n } else { 2.0 / n })
            .collect()
    }

    /// X[r, k2] = Σ_{x,y} f[x, y] e^{-2πi (kr x / H + k2 y / W)}.
    pub fn forward(&self, plane: &[f64], re: &mut [f64], im: &mut [f64]) {
        let (h, w, m2) = (self.h, self.w, self.m2);
        debug_assert_eq!(plane.len(), h * w);
        let mut zr = vec![0.0; h * m2];
        let mut zi = vec![0.0; h * m2];
        for x in 0..h {
            let row = &plane[x * w..(x + 1) * w];
            for k in 0..m2 {
                let c = &self.cw[k * w..(k + 1) * w];
                let s = &self.sw[k * w..(k + 1) * w];
                let mut acc_r = 0.0;
                let mut acc_i = 0.0;
                for y in 0..w {
                    acc_r += row[y] * c[y];
                    acc_i -= row[y] * s[y];
                }
                zr[x * m2 + k] = acc_r;
                zi[x * m2 + k] = acc_i;
            }
        }
        let n_rows = 2 * self.m1;
        re[..n_rows * m2].iter_mut().for_each(|v| *v = 0.0);
        im[..n_rows * m2].iter_mut().for_each(|v| *v = 0.0);
        for r in 0..n_rows {
            let c = &self.ch[r * h..(r + 1) * h];
            let s = &self.sh[r * h..(r + 1) * h];
            let out_r = &mut re[r * m2..(r + 1) * m2];
            let out_i = &mut im[r * m2..(r + 1) * m2];
            for x in 0..h {
                let (cx, sx) = (c[x], s[x]);
                let zr_row = &zr[x * m2..(x + 1) * m2];
                let zi_row = &zi[x * m2..(x + 1) * m2];
                for k in 0..m2 {
                    out_r[k] += zr_row[k] * cx + zi_row[k] * sx;
                    out_i[k] += zi_row[k] * cx - zr_row[k] * sx;
                }
            }
        }
    }

    /// f[x, y] = Re Σ_{r,k2} weight[k2] · Y[r, k2] e^{+2πi (kr x / H + k2 y / W)}.
    pub fn inverse(&self, re: &[f64], im: &[f64], weight: &[f64], plane: &mut [f64]) {
        let (h, w, m2) = (self.h, self.w, self.m2);
        let n_rows = 2 * self.m1;
        let mut qr = vec![0.0; h * m2];
        let mut qi = vec![0.0; h * m2];
        for r in 0..n_rows {
            let c = &self.ch[r * h..(r + 1) * h];
            let s = &self.sh[r * h..(r + 1) * h];
            let yr = &re[r * m2..(r + 1) * m2];
            let yi = &im[r * m2..(r + 1) * m2];
            for x in 0..h {
                let (cx, sx) = (c[x], s[x]);
                let qr_row = &mut qr[x * m2..(x + 1) * m2];
                let qi_row = &mut qi[x * m2..(x + 1) * m2];
                for k in 0..m2 {
                    qr_row[k] += yr[k] * cx - yi[k] * sx;
                    qi_row[k] += yr[k] * sx + yi[k] * cx;
                }
            }
        }
        for x in 0..h {
            let out = &mut plane[x * w..(x + 1) * w];
            out.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..m2 {
                let a = weight[k] * qr[x * m2 + k];
                let b = weight[k] * qi[x * m2 + k];
                let c = &self.cw[k * w..(k + 1) * w];
                let s = &self.sw[k * w..(k + 1) * w];
                for y in 0..w {
                    out[y] += a * c[y] - b * s[y];
                }
            }
        }
    }
}
