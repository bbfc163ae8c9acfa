//! Central finite-difference stencils on periodic grids.
//!
//! Coefficients come from the Taylor-moment system solved in exact rational
//! arithmetic, so the tables are exact up to the final conversion to `f64`.

use std::rc::Rc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use opssplit_tensor::{apply_taps, Tap, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::Field;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StencilKind {
    GradX,
    GradY,
    Laplacian,
    Divergence,
}

impl StencilKind {
    pub fn input_channels(self) -> usize {
        match self {
            StencilKind::Divergence => 2,
            _ => 1,
        }
    }
}

/// Exact weights `c_j`, `j = −p..=p`, with Σ c_j j^m / m! = δ_{m,deriv}
/// for m = 0..2p.
pub fn taylor_weights(deriv: usize, half_width: usize) -> Vec<BigRational> {
    let n = 2 * half_width + 1;
    let offsets: Vec<i64> = (-(half_width as i64)..=half_width as i64).collect();
    // Rows m: Σ_j j^m c_j = m! δ_{m,d}
    let mut a: Vec<Vec<BigRational>> = (0..n)
        .map(|m| {
            let mut row: Vec<BigRational> = offsets
                .iter()
                .map(|&j| BigRational::from_integer(BigInt::from(j).pow(m as u32)))
                .collect();
            let rhs = if m == deriv {
                BigRational::from_integer((1..=m as i64).product::<i64>().into())
            } else {
                BigRational::zero()
            };
            row.push(rhs);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero()).expect("Vandermonde is non-singular");
        a.swap(col, pivot);
        let inv = BigRational::one() / a[col][col].clone();
        for k in col..=n {
            a[col][k] = a[col][k].clone() * inv.clone();
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for k in col..=n {
                    let v = a[col][k].clone() * f.clone();
                    a[r][k] = a[r][k].clone() - v;
                }
            }
        }
    }
    a.into_iter().map(|row| row[n].clone()).collect()
}

/// Unscaled `f64` weights for offsets `−order/2..=order/2`.
pub fn axis_row(deriv: usize, order: usize) -> Result<Vec<f64>> {
    check_order(order)?;
    Ok(taylor_weights(deriv, order / 2)
        .iter()
        .map(|c| c.to_f64().expect("finite rational"))
        .collect())
}

fn check_order(order: usize) -> Result<()> {
    if !matches!(order, 2 | 4 | 6 | 8) {
        return Err(CoreError::Config(format!(
            "unsupported stencil order {order}; expected one of 2, 4, 6, 8"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StencilKernel {
    pub kind: StencilKind,
    pub order: usize,
    pub dx: f64,
    pub dy: f64,
    first: Vec<f64>,
    second: Vec<f64>,
}

pub fn make_stencil(kind: StencilKind, order: usize, dx: f64, dy: f64) -> Result<StencilKernel> {
    check_order(order)?;
    if !(dx > 0.0 && dy > 0.0) {
        return Err(CoreError::Config(format!("grid spacing must be positive, got ({dx}, {dy})")));
    }
    Ok(StencilKernel {
        kind,
        order,
        dx,
        dy,
        first: axis_row(1, order)?,
        second: axis_row(2, order)?,
    })
}

impl StencilKernel {
    pub fn half_width(&self) -> usize {
        self.order / 2
    }

    /// Axis row scaled by the spacing, e.g. `[1, −2, 1] / h²`.
    pub fn row(&self, deriv: usize, spacing: f64) -> Vec<f64> {
        let (base, pow) = match deriv {
            1 => (&self.first, 1),
            _ => (&self.second, 2),
        };
        base.iter().map(|c| c / spacing.powi(pow)).collect()
    }

    fn axis_taps(&self, deriv: usize, along_x: bool, out: &mut Vec<Tap>) {
        let p = self.half_width() as isize;
        let spacing = if along_x { self.dx } else { self.dy };
        for (k, c) in self.row(deriv, spacing).into_iter().enumerate() {
            let off = k as isize - p;
            if off == 0 || c == 0.0 {
                continue;
            }
            let (di, dj) = if along_x { (off, 0) } else { (0, off) };
            out.push(Tap { di, dj, coeff: c });
        }
    }

    /// Difference-form taps per input channel; one set for scalar kinds,
    /// an (x, y) pair for divergence.
    pub fn taps(&self) -> Vec<Vec<Tap>> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        match self.kind {
            StencilKind::GradX => self.axis_taps(1, true, &mut x),
            StencilKind::GradY => self.axis_taps(1, false, &mut x),
            StencilKind::Laplacian => {
                self.axis_taps(2, true, &mut x);
                self.axis_taps(2, false, &mut x);
            }
            StencilKind::Divergence => {
                self.axis_taps(1, true, &mut x);
                self.axis_taps(1, false, &mut y);
                return vec![x, y];
            }
        }
        vec![x]
    }

    pub fn shared_taps(&self) -> Vec<Rc<[Tap]>> {
        self.taps().into_iter().map(Rc::from).collect()
    }

    /// Dense `(2p+1)²` coefficient arrays, centre included, one per
    /// input channel; entry `[a][b]` multiplies `f[i + a − p, j + b − p]`.
    pub fn coefficients(&self) -> Vec<Vec<f64>> {
        let p = self.half_width() as isize;
        let n = (2 * p + 1) as usize;
        self.taps()
            .into_iter()
            .map(|taps| {
                let mut grid = vec![0.0; n * n];
                let centre = (p as usize) * n + p as usize;
                for t in taps {
                    grid[((t.di + p) as usize) * n + (t.dj + p) as usize] += t.coeff;
                    grid[centre] -= t.coeff;
                }
                grid
            })
            .collect()
    }

    fn check_spacing(&self, f: &Field) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
        if !close(self.dx, f.dx) || !close(self.dy, f.dy) {
            return Err(CoreError::Shape(format!(
                "stencil spacing ({}, {}) does not match field spacing ({}, {})",
                self.dx, self.dy, f.dx, f.dy
            )));
        }
        Ok(())
    }
}

/// Periodic application. Scalar kinds act on every channel; divergence
/// maps channel pairs `(2k, 2k+1)` to output channel `k`.
pub fn apply_stencil(f: &Field, k: &StencilKernel) -> Result<Field> {
    k.check_spacing(f)?;
    let (c, h, w) = (f.channels(), f.h(), f.w());
    let taps = k.taps();
    let out = if k.kind == StencilKind::Divergence {
        if c % 2 != 0 {
            return Err(CoreError::Shape(format!("divergence needs an even channel count, got {c}")));
        }
        let n = h * w;
        let mut out = Vec::with_capacity(c / 2 * n);
        for pair in 0..c / 2 {
            let gx = apply_taps(f.plane(2 * pair), 1, h, w, &taps[0]);
            let gy = apply_taps(f.plane(2 * pair + 1), 1, h, w, &taps[1]);
            out.extend(gx.iter().zip(&gy).map(|(a, b)| a + b));
        }
        Tensor::new(vec![c / 2, h, w], out)?
    } else {
        Tensor::new(vec![c, h, w], apply_taps(f.data.data(), c, h, w, &taps[0]))?
    };
    Field::new(out, f.dx, f.dy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasuredOrder {
    pub slope: f64,
    pub sizes: Vec<usize>,
    pub errors: Vec<f64>,
    /// False when the error did not fall at every refinement.
    pub monotone: bool,
}

/// Least-squares slope of log(max error) against log(h) on `[0, L)²`
/// for the scalar test function `f` with exact derivative `exact`.
/// Divergence is measured on the vector field `(f, f)`.
pub fn measure_order(
    kind: StencilKind,
    order: usize,
    length: f64,
    f: &dyn Fn(f64, f64) -> f64,
    exact: &dyn Fn(f64, f64) -> f64,
    sizes: &[usize],
) -> Result<MeasuredOrder> {
    if sizes.len() < 3 {
        return Err(CoreError::Config("order measurement needs at least three grids".into()));
    }
    let mut errors = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let h = length / n as f64;
        let c = kind.input_channels();
        let field = Field::from_fn(c, n, n, (0.0, h), (0.0, h), |_, x, y| f(x, y));
        let k = make_stencil(kind, order, h, h)?;
        let out = apply_stencil(&field, &k)?;
        let mut err: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let e = (out.plane(0)[i * n + j] - exact(i as f64 * h, j as f64 * h)).abs();
                err = err.max(e);
            }
        }
        errors.push(err);
    }
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let xs: Vec<f64> = sizes.iter().map(|&n| (length / n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    Ok(MeasuredOrder {
        slope: fit_slope(&xs, &ys),
        sizes: sizes.to_vec(),
        errors,
        monotone,
    })
}

/// Ordinary least-squares slope.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
