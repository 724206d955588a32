//! `W` tabulated on a square window (d = 2) and interpolated for flow
//! integration.
//!
//! Node values come from one FFT convolution of the punctured kernel
//! `K(z) = z / |z|^2` (with `K(0) = 0`) against the mid-zone source lattice.
//! The punctured lattice sum of `K * f` is off by `(h^2 / 2) grad f(x)`
//! at lattice points, which is subtracted; the far-zone expansion is added
//! node by node. Between nodes a tensor cubic Lagrange stencil is used.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corrector::CorrectorField;
use crate::error::{Error, Result};
use crate::fields::Field;

/// Relative safety margin put on the node maximum when reporting `sup |W|`.
const SUP_MARGIN: f64 = 5e-3;

/// `W` on the lattice nodes of `[-half_width, half_width]^2`.
#[derive(Clone, Debug)]
pub struct WGrid {
    h: f64,
    /// Nodes are `(i - q) h` for `i` in `0..2q+1` along each axis.
    q: usize,
    values: Vec<[f64; 2]>,
    half_width: f64,
    sup_norm: f64,
}

/// Interpolated-versus-direct comparison at random points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridValidation {
    pub points: usize,
    pub max_abs_err: f64,
    pub sup_w: f64,
    /// `max_abs_err / sup_w`.
    pub relative: f64,
}

fn fft2(buf: &mut [Complex64], n: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let plan = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    plan.process(buf);
    transpose(buf, n);
    plan.process(buf);
    transpose(buf, n);
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

impl WGrid {
    /// Working radius a corrector needs for a window of this half width at
    /// lattice spacing `h`.
    pub fn required_radius(half_width: f64, h: f64) -> f64 {
        let q = (half_width / h).ceil() + 2.0;
        std::f64::consts::SQRT_2 * q * h * (1.0 + 1e-9)
    }

    /// Tabulates `W` on `[-half_width, half_width]^2`. The window's corners
    /// must lie inside the corrector's working radius.
    pub fn build(c: &CorrectorField, half_width: f64) -> Result<Self> {
        if c.dim() != 2 {
            return Err(Error::Config("tabulated W is available in d = 2 only".into()));
        }
        if !(half_width > 0.0) {
            return Err(Error::Input("window half width must be positive".into()));
        }
        let (m, h, src) = c.dense_sources();
        // two extra nodes so the cubic stencil never leaves the table
        let q = (half_width / h).ceil() as usize + 2;
        let corner = std::f64::consts::SQRT_2 * q as f64 * h;
        debug_assert!(corner <= Self::required_radius(half_width, h));
        if corner > c.valid_radius() {
            return Err(Error::Config(format!(
                "window corner |x| = {corner:.3} exceeds the corrector's working radius {:.3}",
                c.valid_radius()
            )));
        }
        let ns = 2 * m + 1;
        let nq = 2 * q + 1;
        let reach = q + m;
        let nk = 2 * reach + 1;
        // indices read back are 2m..=2m+2q; aliasing needs p > 2m + 2q
        let p = nk.max(ns).next_power_of_two();

        let mut kern = vec![Complex64::new(0.0, 0.0); p * p];
        for a in 0..nk {
            let z1 = (a as f64 - reach as f64) * h;
            for b in 0..nk {
                let z2 = (b as f64 - reach as f64) * h;
                let r2 = z1 * z1 + z2 * z2;
                if r2 > 0.0 {
                    kern[a * p + b] = Complex64::new(z1 / r2, z2 / r2);
                }
            }
        }
        let mut srcs = vec![Complex64::new(0.0, 0.0); p * p];
        // dense_sources is laid out with axis 0 slowest after reversal: flat = i1 * n + i0
        for i1 in 0..ns {
            for i0 in 0..ns {
                srcs[i0 * p + i1] = Complex64::new(src[i1 * ns + i0], 0.0);
            }
        }
        let mut planner = FftPlanner::new();
        fft2(&mut kern, p, false, &mut planner);
        fft2(&mut srcs, p, false, &mut planner);
        for (k, s) in kern.iter_mut().zip(&srcs) {
            *k *= s;
        }
        drop(srcs);
        fft2(&mut kern, p, true, &mut planner);
        let norm = 1.0 / (p * p) as f64;

        let corr = 0.5 * h * h;
        let values: Vec<[f64; 2]> = (0..nq * nq)
            .into_par_iter()
            .map(|flat| {
                let (i, j) = (flat / nq, flat % nq);
                let x = [(i as f64 - q as f64) * h, (j as f64 - q as f64) * h];
                let conv = kern[(i + 2 * m) * p + (j + 2 * m)] * norm;
                let grad = c.grad_eta_g(&x);
                let far = c.far_only(&x);
                let pf = c.prefactor(&x);
                [
                    pf * (conv.re - corr * grad[0] + far[0]),
                    pf * (conv.im - corr * grad[1] + far[1]),
                ]
            })
            .collect();
        let node_max = values.iter().map(|w| w[0].hypot(w[1])).fold(0.0, f64::max);
        Ok(Self { h, q, values, half_width, sup_norm: node_max * (1.0 + SUP_MARGIN) })
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Largest node value of `|W|` inflated by a small interpolation margin.
    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x[0].abs() <= self.half_width && x[1].abs() <= self.half_width
    }

    /// Interpolated `W(x)`, or `None` outside the window.
    pub fn interpolate(&self, x: &[f64]) -> Option<[f64; 2]> {
        if !self.contains(x) {
            return None;
        }
        let nq = 2 * self.q + 1;
        let mut base = [0usize; 2];
        let mut wts = [[0.0; 4]; 2];
        for a in 0..2 {
            let u = x[a] / self.h + self.q as f64;
            let i = (u.floor() as usize).clamp(1, nq - 3);
            let t = u - i as f64;
            base[a] = i - 1;
            wts[a] = lagrange4(t);
        }
        let mut out = [0.0; 2];
        for (di, wi) in wts[0].iter().enumerate() {
            let row = (base[0] + di) * nq + base[1];
            for (dj, wj) in wts[1].iter().enumerate() {
                let v = self.values[row + dj];
                let w = wi * wj;
                out[0] += w * v[0];
                out[1] += w * v[1];
            }
        }
        Some(out)
    }

    /// Compares interpolated values with direct quadrature at `points` seeded
    /// uniform points of the window.
    pub fn validate(&self, c: &CorrectorField, points: usize, seed: u64) -> Result<GridValidation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<[f64; 2]> = (0..points)
            .map(|_| {
                [
                    rng.gen_range(-self.half_width..self.half_width),
                    rng.gen_range(-self.half_width..self.half_width),
                ]
            })
            .collect();
        let errs = xs
            .par_iter()
            .map(|x| {
                let direct = c.eval(x)?;
                let interp = self.interpolate(x).expect("sample lies in the window");
                Ok((direct[0] - interp[0]).hypot(direct[1] - interp[1]))
            })
            .collect::<Result<Vec<f64>>>()?;
        let max_abs_err = errs.into_iter().fold(0.0, f64::max);
        Ok(GridValidation {
            points,
            max_abs_err,
            sup_w: self.sup_norm,
            relative: if self.sup_norm > 0.0 { max_abs_err / self.sup_norm } else { max_abs_err },
        })
    }
}

/// Cubic Lagrange weights for nodes at -1, 0, 1, 2 evaluated at `t`.
fn lagrange4(t: f64) -> [f64; 4] {
    let (a, b, c, d) = (t + 1.0, t, t - 1.0, t - 2.0);
    [-b * c * d / 6.0, a * c * d / 2.0, -a * b * d / 2.0, a * b * c / 6.0]
}

impl Field for WGrid {
    fn dim(&self) -> usize {
        2
    }

    /// Writes NaN outside the window.
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self.interpolate(x) {
            Some(w) => out[..2].copy_from_slice(&w),
            None => out[..2].iter_mut().for_each(|o| *o = f64::NAN),
        }
    }

    fn sup_bound(&self) -> f64 {
        self.sup_norm
    }
}
