//! Finite-scale diagnostics for vanishing mean drift and vanishing mean flux.
//!
//! Both properties are limits as the box grows, so nothing here decides them;
//! the functions report box averages and normalized fluxes at given scales.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::fields::{Field, PartialField, VectorField};
use crate::quadrature::{composite_nodes, panels_for, GaussLegendre};

/// Default Gauss–Legendre nodes per panel and axis.
pub const DEFAULT_QUAD_NODES: usize = 32;

/// Per-scale suprema of box averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub scales: Vec<f64>,
    /// Supremum over all sampled centers.
    pub sup_box_average: Vec<f64>,
    /// Supremum over the deterministic lattice centers only.
    pub sup_lattice: Vec<f64>,
    /// Supremum over the seeded uniform centers only.
    pub sup_random: Vec<f64>,
    pub centers_sampled: usize,
    pub seed: u64,
}

/// Where box centers come from: a lattice on `[-extent, extent]^d` plus
/// `random` seeded uniform points in the same cube.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub extent: f64,
    pub lattice_per_axis: usize,
    pub random: usize,
    pub seed: u64,
    pub quad_nodes: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { extent: 10.0, lattice_per_axis: 3, random: 4, seed: 0, quad_nodes: DEFAULT_QUAD_NODES }
    }
}

fn axis_rule(len: f64, k: f64, n: usize) -> Vec<(f64, f64)> {
    let gl = GaussLegendre::new(n);
    composite_nodes(&gl, 0.0, len, panels_for(len, k, n))
}

/// Integrates `field` over the box `lo + [0, len]^d` with a tensor composite
/// Gauss–Legendre rule; `axis` holds 1-D nodes on `[0, len]`.
fn box_integral<F: Field + ?Sized>(field: &F, lo: &[f64], axis: &[(f64, f64)], dims: &[usize]) -> Vec<f64> {
    let d = field.dim();
    let m = axis.len();
    let mut total = vec![0.0; d];
    let mut x = [0.0; 3];
    let mut v = [0.0; 3];
    x[..d].copy_from_slice(&lo[..d]);
    let count = m.pow(dims.len() as u32);
    for flat in 0..count {
        let mut rem = flat;
        let mut w = 1.0;
        for &a in dims {
            let (node, wt) = axis[rem % m];
            rem /= m;
            x[a] = lo[a] + node;
            w *= wt;
        }
        field.eval_into(&x[..d], &mut v[..d]);
        for (t, vi) in total.iter_mut().zip(&v[..d]) {
            *t += w * vi;
        }
    }
    total
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `max_x |ell^{-d} \int_{x + [0, ell]^d} V|` over the given centers.
pub fn mean_drift_box(
    field: &VectorField,
    ell: f64,
    centers: &[Vec<f64>],
    quad_n: usize,
) -> Result<f64> {
    if !(ell > 0.0) {
        return Err(Error::Input(format!("box side must be positive, got {ell}")));
    }
    if quad_n < 2 {
        return Err(Error::Input("need at least 2 quadrature nodes per axis".into()));
    }
    if centers.is_empty() {
        return Err(Error::Input("empty center list".into()));
    }
    let d = field.dim();
    if let Some(c) = centers.iter().find(|c| c.len() != d) {
        return Err(dim_mismatch(d, c.len()));
    }
    let axis = axis_rule(ell, field.wavenumber_bound(), quad_n);
    let dims: Vec<usize> = (0..d).collect();
    let vol = ell.powi(d as i32);
    let vals: Vec<f64> = centers
        .par_iter()
        .map(|c| norm(&box_integral(field, c, &axis, &dims)) / vol)
        .collect();
    Ok(vals.into_iter().fold(0.0, f64::max))
}

/// An axis-aligned `(d-1)`-box: centered at `center`, lying in the
/// hyperplane orthogonal to `normal_axis`, with side `side`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluxBox {
    pub center: Vec<f64>,
    pub normal_axis: usize,
    pub side: f64,
}

/// `ell^{-(d-1)} |\int_Q V . n|` for an axis-aligned `(d-1)`-box.
pub fn mean_flux_box(field: &VectorField, q: &FluxBox, quad_n: usize) -> Result<f64> {
    let d = field.dim();
    if q.center.len() != d {
        return Err(dim_mismatch(d, q.center.len()));
    }
    if q.normal_axis >= d {
        return Err(Error::Input(format!("normal axis {} out of range for d={d}", q.normal_axis)));
    }
    if !(q.side > 0.0) {
        return Err(Error::Input("flux box side must be positive".into()));
    }
    let axis = axis_rule(q.side, field.wavenumber_bound(), quad_n.max(2));
    let dims: Vec<usize> = (0..d).filter(|&a| a != q.normal_axis).collect();
    let lo: Vec<f64> = (0..d)
        .map(|a| if a == q.normal_axis { q.center[a] } else { q.center[a] - 0.5 * q.side })
        .collect();
    let total = box_integral(field, &lo, &axis, &dims);
    Ok(total[q.normal_axis].abs() / q.side.powi(d as i32 - 1))
}

/// Restriction of a sphere integral to the cap `R * D_r(pole)`, where
/// `D_r(pole)` is the part of the unit sphere within chordal distance `r` of
/// the unit vector `pole`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cap {
    pub pole: Vec<f64>,
    pub r: f64,
}

/// Normalized surface flux with its quadrature error estimate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FluxValue {
    pub value: f64,
    pub err_est: f64,
}

fn sphere_flux<F: Field + ?Sized>(field: &F, center: &[f64], radius: f64, cap: Option<&Cap>, n: usize) -> (f64, f64) {
    let d = field.dim();
    let max_angle = match cap {
        Some(c) => 2.0 * (0.5 * c.r.min(2.0)).asin(),
        None => PI,
    };
    let mut v = [0.0; 3];
    let mut y = [0.0; 3];
    let mut flux = 0.0;
    let mut area = 0.0;
    match d {
        2 => {
            let theta0 = cap.map(|c| c.pole[1].atan2(c.pole[0])).unwrap_or(0.0);
            if cap.is_none() {
                // periodic trapezoid
                for k in 0..n {
                    let t = 2.0 * PI * k as f64 / n as f64;
                    let (s, c) = t.sin_cos();
                    y[0] = center[0] + radius * c;
                    y[1] = center[1] + radius * s;
                    field.eval_into(&y[..2], &mut v[..2]);
                    flux += (v[0] * c + v[1] * s) * radius * 2.0 * PI / n as f64;
                }
                area = 2.0 * PI * radius;
            } else {
                let gl = GaussLegendre::new(n);
                for (t, w) in gl.mapped(theta0 - max_angle, theta0 + max_angle) {
                    let (s, c) = t.sin_cos();
                    y[0] = center[0] + radius * c;
                    y[1] = center[1] + radius * s;
                    field.eval_into(&y[..2], &mut v[..2]);
                    flux += w * radius * (v[0] * c + v[1] * s);
                    area += w * radius;
                }
            }
        }
        3 => {
            // orthonormal frame with e3 = pole
            let pole = cap.map(|c| [c.pole[0], c.pole[1], c.pole[2]]).unwrap_or([0.0, 0.0, 1.0]);
            let helper = if pole[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let e1 = normalize(cross(helper, pole));
            let e2 = cross(pole, e1);
            let gl = GaussLegendre::new(n);
            let m = 2 * n;
            let cos_lo = max_angle.cos();
            for (ct, wt) in gl.mapped(cos_lo, 1.0) {
                let st = (1.0 - ct * ct).max(0.0).sqrt();
                for k in 0..m {
                    let phi = 2.0 * PI * (k as f64 + 0.5) / m as f64;
                    let (sp, cp) = phi.sin_cos();
                    let mut nrm = [0.0; 3];
                    for i in 0..3 {
                        nrm[i] = st * cp * e1[i] + st * sp * e2[i] + ct * pole[i];
                        y[i] = center[i] + radius * nrm[i];
                    }
                    field.eval_into(&y[..3], &mut v[..3]);
                    let w = wt * 2.0 * PI / m as f64 * radius * radius;
                    flux += w * (v[0] * nrm[0] + v[1] * nrm[1] + v[2] * nrm[2]);
                    area += w;
                }
            }
        }
        _ => unreachable!("checked by caller"),
    }
    (flux, area)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Surface-averaged flux `|\int_{\partial B_R} V . n| / H^{d-1}(\partial B_R)`,
/// optionally restricted to a cap. The error estimate is the change when
/// the angular resolution is doubled.
pub fn mean_flux_sphere<F: Field + ?Sized>(
    field: &F,
    wavenumber: f64,
    center: &[f64],
    radius: f64,
    quad_n: usize,
    cap: Option<&Cap>,
) -> Result<FluxValue> {
    let d = field.dim();
    if center.len() != d {
        return Err(dim_mismatch(d, center.len()));
    }
    if !(2..=3).contains(&d) {
        return Err(Error::Input("sphere fluxes are implemented for d = 2 or 3".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Input("sphere radius must be positive".into()));
    }
    if let Some(c) = cap {
        if c.pole.len() != d || !(c.r > 0.0) {
            return Err(Error::Input("cap needs a unit pole of matching dimension and r > 0".into()));
        }
    }
    let n = quad_n.max(4) + (2.0 * wavenumber * radius).ceil() as usize;
    let (f1, a1) = sphere_flux(field, center, radius, cap, n);
    let (f2, _) = sphere_flux(field, center, radius, cap, 2 * n);
    let value = f2.abs() / a1;
    let err_est = (f2 - f1).abs() / a1 + 16.0 * f64::EPSILON * field.sup_bound().min(1e300).max(1.0);
    Ok(FluxValue { value, err_est })
}

fn sample_centers(d: usize, cfg: &SamplerConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = cfg.lattice_per_axis.max(1);
    let mut lattice = Vec::new();
    for flat in 0..n.pow(d as u32) {
        let mut rem = flat;
        let mut c = Vec::with_capacity(d);
        for _ in 0..d {
            let i = rem % n;
            rem /= n;
            let t = if n == 1 { 0.0 } else { -cfg.extent + 2.0 * cfg.extent * i as f64 / (n - 1) as f64 };
            c.push(t);
        }
        lattice.push(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let random = (0..cfg.random)
        .map(|_| (0..d).map(|_| rng.gen_range(-cfg.extent..=cfg.extent)).collect())
        .collect();
    (lattice, random)
}

fn drift_sweep_impl<F: Field + ?Sized>(field: &F, wavenumber: f64, scales: &[f64], cfg: &SamplerConfig) -> Result<DriftReport> {
    if scales.is_empty() {
        return Err(Error::Input("scale list is empty".into()));
    }
    if scales.windows(2).any(|w| !(w[1] > w[0])) || !(scales[0] > 0.0) {
        return Err(Error::Input("scales must be positive and increasing".into()));
    }
    let d = field.dim();
    let (lattice, random) = sample_centers(d, cfg);
    let dims: Vec<usize> = (0..d).collect();
    let mut report = DriftReport {
        scales: scales.to_vec(),
        sup_box_average: Vec::new(),
        sup_lattice: Vec::new(),
        sup_random: Vec::new(),
        centers_sampled: lattice.len() + random.len(),
        seed: cfg.seed,
    };
    for &ell in scales {
        let axis = axis_rule(ell, wavenumber, cfg.quad_nodes.max(2));
        let vol = ell.powi(d as i32);
        let sup = |cs: &[Vec<f64>]| -> f64 {
            cs.par_iter()
                .map(|c| norm(&box_integral(field, c, &axis, &dims)) / vol)
                .collect::<Vec<_>>()
                .into_iter()
                .fold(0.0, f64::max)
        };
        let sl = sup(&lattice);
        let sr = sup(&random);
        report.sup_lattice.push(sl);
        report.sup_random.push(sr);
        report.sup_box_average.push(sl.max(sr));
    }
    Ok(report)
}

/// Box-average suprema of `field` at each scale.
pub fn drift_sweep(field: &VectorField, scales: &[f64], cfg: &SamplerConfig) -> Result<DriftReport> {
    drift_sweep_impl(field, field.wavenumber_bound(), scales, cfg)
}

/// Runs [`drift_sweep`] on each partial derivative field `dV/dx_j`
/// (finite differences with step `h`); one report per `j`.
pub fn derivative_drift(field: &VectorField, scales: &[f64], h: f64, cfg: &SamplerConfig) -> Result<Vec<DriftReport>> {
    if !(h > 0.0) {
        return Err(Error::Input("finite-difference step must be positive".into()));
    }
    (0..field.dim())
        .map(|axis| {
            let partial = PartialField { base: field, axis, step: h };
            drift_sweep_impl(&partial, field.wavenumber_bound(), scales, cfg)
        })
        .collect()
}
