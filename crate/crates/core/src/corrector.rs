//! The corrector field `W`: the gradient of the Newtonian potential of
//! `grad psi . V`, divided by `psi`, with `psi(x) = (|x|^2 + alpha^2)^{-p}`.
//!
//! ```text
//! W(x) = 2p c_d (|x|^2 + alpha^2)^p  \int K(x - y) g(y) dy,
//! K(z) = z / |z|^d,   g(y) = y . V(y) / (|y|^2 + alpha^2)^{p+1},
//! c_d  = 1 / (d omega_d).
//! ```
//!
//! The integral is split with two smooth partitions of unity:
//!
//! * `chi(|x - y|)` (1 near `x`, 0 beyond `near_radius`) isolates the weak
//!   singularity. That piece is integrated in polar coordinates centered at
//!   `x`, where the Jacobian `rho^{d-1}` cancels `|K| = rho^{1-d}` and the
//!   integrand becomes smooth.
//! * `eta(|y|)` (1 inside `mid_radius`, 0 beyond `1.25 mid_radius`) splits
//!   sources into a mid zone, summed on a Cartesian lattice (trapezoidal rule
//!   on a smooth compactly supported integrand), and a far zone.
//! * In d = 2 the far zone is a Laurent expansion in `z = x1 + i x2` whose
//!   moments are integrated once over rings up to `truncation_radius`;
//!   sources beyond it are dropped with a certified bound. In d = 3 the far
//!   zone is dropped and the bound is taken at `mid_radius`.
//!
//! Every truncation above removes a harmonic contribution near `x`, so the
//! computed `W` satisfies `div(psi W) = -grad psi . V` exactly up to
//! quadrature error, whatever the truncation radius.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::fields::{Field, VectorField};
use crate::quadrature::{adaptive, composite_nodes, panels_for, unit_ball_volume, GaussLegendre, SphereRule};

/// Weight parameters of `psi(x) = (|x|^2 + alpha^2)^{-p}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiParams {
    pub p: f64,
    pub alpha: f64,
    pub dim: usize,
}

impl PsiParams {
    /// Requires `(d-1)/2 < p < d/2` and `alpha > 0`.
    pub fn new(dim: usize, p: f64, alpha: f64) -> Result<Self> {
        let d = dim as f64;
        if !(2..=3).contains(&dim) {
            return Err(Error::Input(format!("corrector supports d = 2 or 3, got {dim}")));
        }
        if !(p > 0.5 * (d - 1.0) && p < 0.5 * d) {
            return Err(Error::Input(format!("p must lie in ({}, {}), got {p}", 0.5 * (d - 1.0), 0.5 * d)));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Input(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { p, alpha, dim })
    }

    /// Midpoint of the admissible exponent interval, `(2d - 1) / 4`.
    pub fn default_p(dim: usize) -> f64 {
        (2.0 * dim as f64 - 1.0) / 4.0
    }

    fn base(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() + self.alpha * self.alpha
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.base(x).powf(-self.p)
    }

    /// `grad psi(x) = -2p x (|x|^2 + alpha^2)^{-(p+1)}`.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let f = -2.0 * self.p * self.base(x).powf(-self.p - 1.0);
        x.iter().map(|v| f * v).collect()
    }
}

/// Quadrature settings for the corrector integral. Lengths are in the same
/// units as the field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Gauss–Legendre nodes per radial panel in the near zone.
    pub radial_nodes: usize,
    /// Size of the sphere rule in the near zone (angles in d = 2,
    /// latitudes in d = 3).
    pub angular_nodes: usize,
    /// Spacing of the mid-zone source lattice.
    pub lattice_spacing: f64,
    /// Radius of the smooth cutoff around the singularity.
    pub near_radius: f64,
    /// Sources inside this radius are summed on the lattice.
    pub mid_radius: f64,
    /// Outer radius of the far-zone moments; derived from `tail_tol` if unset.
    pub truncation_radius: Option<f64>,
    /// Bound allowed on the dropped tail of the bare integral.
    pub tail_tol: f64,
    /// Terms kept in the far-zone expansion (d = 2).
    pub far_terms: usize,
}

impl QuadratureConfig {
    pub fn default_for(dim: usize) -> Self {
        match dim {
            3 => Self {
                radial_nodes: 16,
                angular_nodes: 12,
                lattice_spacing: 0.25,
                near_radius: 2.0,
                mid_radius: 8.0,
                truncation_radius: None,
                tail_tol: 0.2,
                far_terms: 0,
            },
            _ => Self {
                radial_nodes: 24,
                angular_nodes: 64,
                lattice_spacing: 0.1,
                near_radius: 2.0,
                mid_radius: 16.0,
                truncation_radius: None,
                tail_tol: 1e-4,
                far_terms: 48,
            },
        }
    }

    /// Default settings with `mid_radius` enlarged so that every `|x| <= radius`
    /// is inside the corrector's validity region.
    pub fn for_working_radius(dim: usize, radius: f64) -> Self {
        let mut cfg = Self::default_for(dim);
        let needed = if dim == 2 { radius / FAR_RATIO } else { 2.0 * radius };
        cfg.mid_radius = cfg.mid_radius.max(needed).max(radius + cfg.near_radius);
        cfg
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.radial_nodes < 2 || self.angular_nodes < 4 {
            return bad("need radial_nodes >= 2 and angular_nodes >= 4");
        }
        if !(self.lattice_spacing > 0.0) || !(self.near_radius > 0.0) {
            return bad("lattice_spacing and near_radius must be positive");
        }
        if !(self.near_radius >= 4.0 * self.lattice_spacing) {
            return bad("near_radius must span at least 4 lattice spacings");
        }
        if !(self.mid_radius > self.near_radius) {
            return bad("mid_radius must exceed near_radius");
        }
        if !(self.tail_tol > 0.0) {
            return bad("tail_tol must be positive");
        }
        if dim == 2 && self.far_terms < 4 {
            return bad("far_terms must be at least 4 in d = 2");
        }
        Ok(())
    }
}

const OUTER_FACTOR: f64 = 1.25;
const FAR_RATIO: f64 = 0.7;
const FAR_RADIAL_NODES: usize = 12;

/// `C^infinity` step: 0 for `t <= 0`, 1 for `t >= 1`.
fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    a / (a + b)
}

/// Near-zone cutoff: 1 on `[0, r0/4]`, 0 beyond `r0`.
fn chi(rho: f64, r0: f64) -> f64 {
    let a = 0.25 * r0;
    1.0 - smooth_step((rho - a) / (r0 - a))
}

fn eta(r: f64, r_in: f64) -> f64 {
    1.0 - smooth_step((r - r_in) / ((OUTER_FACTOR - 1.0) * r_in))
}

/// Certified bound on `\int_{|y| > R} |K(x - y) g(y)| dy` for `|y| >= 2|x|`:
/// `d omega_d 2^{d-1} ||V|| R^{-2p} / (2p)`.
pub fn tail_bound(dim: usize, p: f64, sup_v: f64, radius: f64) -> f64 {
    let d = dim as f64;
    d * unit_ball_volume(dim) * 2f64.powf(d - 1.0) * sup_v * radius.powf(-2.0 * p) / (2.0 * p)
}

/// Smallest radius whose tail bound is within `tol`.
pub fn truncation_radius_for(dim: usize, p: f64, sup_v: f64, tol: f64) -> f64 {
    let d = dim as f64;
    let c = d * unit_ball_volume(dim) * 2f64.powf(d - 1.0) * sup_v / (2.0 * p);
    (c / tol).powf(1.0 / (2.0 * p))
}

struct Source {
    y: [f64; 3],
    weight: f64,
    coarse: bool,
}

struct FarExpansion {
    r_in: f64,
    /// `M_k = \int (1 - eta) g(w) (r_in / w)^k / w dA`.
    moments: Vec<Complex64>,
}

/// Value of `W` together with error information.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrectorValue {
    pub w: Vec<f64>,
    /// Quadrature error estimate (coarse-vs-fine plus far-series remainder).
    pub err_est: f64,
    /// Certified bound on the contribution of dropped far sources.
    pub tail_bound: f64,
}

/// The corrector `W` for a bounded base field and weight `psi`.
pub struct CorrectorField {
    base: VectorField,
    psi: PsiParams,
    quad: QuadratureConfig,
    c_d: f64,
    sources: Vec<Source>,
    near: Vec<(f64, f64)>,
    near_coarse: Vec<(f64, f64)>,
    sphere: SphereRule,
    sphere_coarse: SphereRule,
    far: Option<FarExpansion>,
    truncation_radius: f64,
    bare_tail_bound: f64,
    valid_radius: f64,
}

impl std::fmt::Debug for CorrectorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorrectorField")
            .field("psi", &self.psi)
            .field("quad", &self.quad)
            .field("sources", &self.sources.len())
            .field("truncation_radius", &self.truncation_radius)
            .field("valid_radius", &self.valid_radius)
            .finish()
    }
}

impl CorrectorField {
    pub fn new(base: VectorField, psi: PsiParams, quad: QuadratureConfig) -> Result<Self> {
        let d = base.dim();
        if psi.dim != d {
            return Err(dim_mismatch(d, psi.dim));
        }
        quad.validate(d)?;
        let sup_v = base.sup_bound();
        if !sup_v.is_finite() {
            return Err(Error::Config("corrector needs a bounded base field".into()));
        }
        let r_in = quad.mid_radius;
        let r_out = OUTER_FACTOR * r_in;
        let truncation_radius = if d == 2 {
            match quad.truncation_radius {
                Some(r) if r < r_out => {
                    return Err(Error::Config(format!("truncation_radius {r} is inside the mid zone (< {r_out})")))
                }
                Some(r) => r,
                None => truncation_radius_for(d, psi.p, sup_v, quad.tail_tol).max(r_out),
            }
        } else {
            r_in
        };
        let bare_tail_bound = tail_bound(d, psi.p, sup_v, truncation_radius);
        if bare_tail_bound > quad.tail_tol * (1.0 + 1e-9) {
            return Err(Error::Config(format!(
                "tail bound {bare_tail_bound:.3e} at R={truncation_radius} exceeds tail_tol {:.3e}",
                quad.tail_tol
            )));
        }
        let valid_radius = if d == 2 {
            (r_in - quad.near_radius).min(FAR_RATIO * r_in)
        } else {
            (r_in - quad.near_radius).min(0.5 * r_in)
        };

        let mut cf = Self {
            c_d: 1.0 / (d as f64 * unit_ball_volume(d)),
            sources: Vec::new(),
            near: near_rule(quad.radial_nodes, quad.near_radius),
            near_coarse: near_rule(quad.radial_nodes / 2, quad.near_radius),
            sphere: SphereRule::new(d, quad.angular_nodes),
            sphere_coarse: SphereRule::new(d, quad.angular_nodes / 2),
            far: None,
            truncation_radius,
            bare_tail_bound,
            valid_radius,
            base,
            psi,
            quad,
        };
        cf.sources = cf.build_lattice();
        if d == 2 && !cf.is_trivial() {
            cf.far = Some(cf.build_far());
        }
        Ok(cf)
    }

    /// Default quadrature and the given exponent / scale.
    pub fn with_defaults(base: VectorField, p: f64, alpha: f64) -> Result<Self> {
        let d = base.dim();
        Self::new(base, PsiParams::new(d, p, alpha)?, QuadratureConfig::default_for(d))
    }

    pub fn base(&self) -> &VectorField {
        &self.base
    }

    pub fn psi(&self) -> &PsiParams {
        &self.psi
    }

    pub fn quad(&self) -> &QuadratureConfig {
        &self.quad
    }

    pub fn c_d(&self) -> f64 {
        self.c_d
    }

    /// Points with `|x|` up to this radius are evaluated to full accuracy.
    pub fn valid_radius(&self) -> f64 {
        self.valid_radius
    }

    pub fn truncation_radius(&self) -> f64 {
        self.truncation_radius
    }

    fn is_trivial(&self) -> bool {
        self.base.sup_bound() == 0.0
    }

    /// `g(y) = y . V(y) / (|y|^2 + alpha^2)^{p+1}`.
    fn g(&self, y: &[f64]) -> f64 {
        let d = y.len();
        let mut v = [0.0; 3];
        self.base.eval_into(y, &mut v[..d]);
        let dot: f64 = y.iter().zip(&v[..d]).map(|(a, b)| a * b).sum();
        let r2: f64 = y.iter().map(|a| a * a).sum();
        dot * (r2 + self.psi.alpha * self.psi.alpha).powf(-self.psi.p - 1.0)
    }

    pub(crate) fn prefactor(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|a| a * a).sum();
        2.0 * self.psi.p * self.c_d * (r2 + self.psi.alpha * self.psi.alpha).powf(self.psi.p)
    }

    fn lattice_side(&self) -> (usize, f64) {
        let h = self.quad.lattice_spacing;
        let m = (OUTER_FACTOR * self.quad.mid_radius / h).ceil() as usize;
        (m, h)
    }

    fn build_lattice(&self) -> Vec<Source> {
        if self.is_trivial() {
            return Vec::new();
        }
        let d = self.base.dim();
        let (m, h) = self.lattice_side();
        let n = 2 * m + 1;
        let r_in = self.quad.mid_radius;
        let r_out2 = (OUTER_FACTOR * r_in).powi(2);
        let hd = h.powi(d as i32);
        let total = n.pow(d as u32);
        let mut out = Vec::new();
        for flat in 0..total {
            let mut rem = flat;
            let mut y = [0.0; 3];
            let mut even = true;
            for yi in y.iter_mut().take(d) {
                let i = rem % n;
                rem /= n;
                *yi = (i as f64 - m as f64) * h;
                even &= (i + m) % 2 == 0;
            }
            let r2: f64 = y[..d].iter().map(|a| a * a).sum();
            if r2 >= r_out2 {
                continue;
            }
            let w = eta(r2.sqrt(), r_in) * self.g(&y[..d]) * hd;
            if w != 0.0 {
                out.push(Source { y, weight: w, coarse: even });
            }
        }
        out
    }

    fn build_far(&self) -> FarExpansion {
        let r_in = self.quad.mid_radius;
        let kmax = self.quad.far_terms;
        let k = self.base.wavenumber_bound();
        let width = (4.0 / k.max(1.0)).min(4.0);
        let len = self.truncation_radius - r_in;
        let panels = ((len / width).ceil() as usize).max(1);
        let gl = GaussLegendre::new(FAR_RADIAL_NODES);
        let rings = composite_nodes(&gl, r_in, self.truncation_radius, panels);
        let alpha2 = self.psi.alpha * self.psi.alpha;
        let p = self.psi.p;

        let mut planner = FftPlanner::<f64>::new();
        let mut plans: HashMap<usize, Arc<dyn Fft<f64>>> = HashMap::new();
        let mut moments = vec![Complex64::new(0.0, 0.0); kmax];
        let mut buf: Vec<Complex64> = Vec::new();
        let mut v = [0.0; 2];
        for (r, wr) in rings {
            let outer = 1.0 - eta(r, r_in);
            if outer == 0.0 {
                continue;
            }
            let kr = k * r;
            let need = kr + kmax as f64 + 32.0 + 4.0 * kr.cbrt();
            let n = (need.ceil() as usize).next_power_of_two().max(64);
            let plan = plans.entry(n).or_insert_with(|| planner.plan_fft_forward(n)).clone();
            buf.clear();
            let radial = r * (r * r + alpha2).powf(-p - 1.0);
            for j in 0..n {
                let t = std::f64::consts::TAU * j as f64 / n as f64;
                let (s, c) = t.sin_cos();
                self.base.eval_into(&[r * c, r * s], &mut v);
                buf.push(Complex64::new(radial * (c * v[0] + s * v[1]), 0.0));
            }
            plan.process(&mut buf);
            // angular integral of g e^{-i m theta} is 2 pi * buf[m] / n
            let ang = std::f64::consts::TAU / n as f64;
            // area element r dr times the 1/|w| = 1/r of the expansion
            let mut scale = outer * wr;
            for (kk, mom) in moments.iter_mut().enumerate() {
                *mom += buf[kk + 1] * (ang * scale);
                scale *= r_in / r;
            }
        }
        FarExpansion { r_in, moments }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        let d = self.base.dim();
        if x.len() != d {
            return Err(dim_mismatch(d, x.len()));
        }
        let r = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(r <= self.valid_radius) {
            return Err(Error::Config(format!(
                "|x| = {r:.3} is outside the corrector's working radius {:.3}; raise mid_radius",
                self.valid_radius
            )));
        }
        Ok(())
    }

    fn near_sum(&self, x: &[f64], radial: &[(f64, f64)], sphere: &SphereRule, out: &mut [f64]) {
        let d = x.len();
        let mut y = [0.0; 3];
        for (rho, wr) in radial {
            for (s, ws) in sphere.dirs.iter().zip(&sphere.weights) {
                for i in 0..d {
                    y[i] = x[i] + rho * s[i];
                }
                let gw = self.g(&y[..d]) * wr * ws;
                for i in 0..d {
                    out[i] -= s[i] * gw;
                }
            }
        }
    }

    fn mid_sum(&self, x: &[f64], coarse_only: bool, out: &mut [f64]) {
        let d = x.len();
        let r0 = self.quad.near_radius;
        let r02 = r0 * r0;
        let scale = if coarse_only { (1u32 << d) as f64 } else { 1.0 };
        let mut acc = [0.0; 3];
        for s in &self.sources {
            if coarse_only && !s.coarse {
                continue;
            }
            let mut z = [0.0; 3];
            let mut r2 = 0.0;
            for i in 0..d {
                z[i] = x[i] - s.y[i];
                r2 += z[i] * z[i];
            }
            if r2 == 0.0 {
                continue;
            }
            let mut f = s.weight / if d == 2 { r2 } else { r2 * r2.sqrt() };
            if r2 < r02 {
                f *= 1.0 - chi(r2.sqrt(), r0);
            }
            for i in 0..d {
                acc[i] += z[i] * f;
            }
        }
        for i in 0..d {
            out[i] += scale * acc[i];
        }
    }

    /// Far-zone contribution and the magnitude of the last two series terms.
    fn far_sum(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let Some(far) = &self.far else { return 0.0 };
        let z = Complex64::new(x[0], x[1]) / far.r_in;
        let mut zk = Complex64::new(1.0, 0.0);
        let mut s = Complex64::new(0.0, 0.0);
        let mut last = 0.0;
        let n = far.moments.len();
        for (k, m) in far.moments.iter().enumerate() {
            let term = zk * m;
            s -= term;
            if k + 2 >= n {
                last += term.norm();
            }
            zk *= z;
        }
        // K(x - y) corresponds to 1 / conj(z - w)
        out[0] += s.re;
        out[1] -= s.im;
        last
    }

    /// The bare integral `\int K(x - y) g(y) dy`.
    fn integral(&self, x: &[f64], coarse: bool) -> ([f64; 3], f64) {
        let mut out = [0.0; 3];
        let d = x.len();
        if self.is_trivial() {
            return (out, 0.0);
        }
        if coarse {
            self.near_sum(x, &self.near_coarse, &self.sphere_coarse, &mut out[..d]);
        } else {
            self.near_sum(x, &self.near, &self.sphere, &mut out[..d]);
        }
        self.mid_sum(x, coarse, &mut out[..d]);
        let rem = self.far_sum(x, &mut out[..d]);
        (out, rem)
    }

    /// `W(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let (i, _) = self.integral(x, false);
        let pf = self.prefactor(x);
        Ok(i[..x.len()].iter().map(|v| v * pf).collect())
    }

    /// `W(x)` with a quadrature error estimate and the certified tail bound.
    pub fn eval_with_error(&self, x: &[f64]) -> Result<CorrectorValue> {
        self.check_point(x)?;
        let d = x.len();
        let (fine, rem) = self.integral(x, false);
        let (coarse, _) = self.integral(x, true);
        let pf = self.prefactor(x);
        let diff = (0..d).map(|i| (fine[i] - coarse[i]).powi(2)).sum::<f64>().sqrt();
        let trivial = self.is_trivial();
        Ok(CorrectorValue {
            w: fine[..d].iter().map(|v| v * pf).collect(),
            err_est: pf * (diff + rem) + 4.0 * f64::EPSILON * pf * fine[..d].iter().map(|v| v.abs()).sum::<f64>(),
            tail_bound: if trivial { 0.0 } else { pf * self.bare_tail_bound },
        })
    }

    /// Closed-form divergence `div W = 2p x . (V(x) + W(x)) / (|x|^2 + alpha^2)`.
    pub fn div_exact(&self, x: &[f64], w_at_x: &[f64]) -> Result<f64> {
        let d = self.base.dim();
        if x.len() != d || w_at_x.len() != d {
            return Err(dim_mismatch(d, x.len().min(w_at_x.len())));
        }
        let mut v = [0.0; 3];
        self.base.eval_into(x, &mut v[..d]);
        let r2: f64 = x.iter().map(|a| a * a).sum();
        let dot: f64 = (0..d).map(|i| x[i] * (v[i] + w_at_x[i])).sum();
        Ok(2.0 * self.psi.p * dot / (r2 + self.psi.alpha * self.psi.alpha))
    }

    /// Source lattice values `eta g h^d` on the full `(2m+1)^d` lattice, for
    /// grid convolution. Returns `(m, h, values)`.
    pub(crate) fn dense_sources(&self) -> (usize, f64, Vec<f64>) {
        let (m, h) = self.lattice_side();
        let n = 2 * m + 1;
        let mut vals = vec![0.0; n.pow(self.base.dim() as u32)];
        for s in &self.sources {
            let mut flat = 0;
            for i in (0..self.base.dim()).rev() {
                let idx = (s.y[i] / h).round() as i64 + m as i64;
                flat = flat * n + idx as usize;
            }
            vals[flat] = s.weight;
        }
        (m, h, vals)
    }

    /// `grad (eta g)` at `x` by central differences.
    pub(crate) fn grad_eta_g(&self, x: &[f64]) -> [f64; 3] {
        let d = x.len();
        let step = 1e-4;
        let r_in = self.quad.mid_radius;
        let f = |y: &[f64]| eta(y.iter().map(|a| a * a).sum::<f64>().sqrt(), r_in) * self.g(y);
        let mut out = [0.0; 3];
        let mut y = [0.0; 3];
        y[..d].copy_from_slice(x);
        for i in 0..d {
            y[i] = x[i] + step;
            let fp = f(&y[..d]);
            y[i] = x[i] - step;
            let fm = f(&y[..d]);
            y[i] = x[i];
            out[i] = (fp - fm) / (2.0 * step);
        }
        out
    }

    pub(crate) fn far_only(&self, x: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        self.far_sum(x, &mut out[..x.len()]);
        out
    }
}

fn near_rule(nodes: usize, r0: f64) -> Vec<(f64, f64)> {
    let nodes = nodes.max(2);
    let gl = GaussLegendre::new(nodes);
    let panels = (r0 / 1.0).ceil() as usize;
    composite_nodes(&gl, 0.0, r0, panels)
        .into_iter()
        .map(|(rho, w)| (rho, w * chi(rho, r0)))
        .filter(|(_, w)| *w != 0.0)
        .collect()
}

impl Field for CorrectorField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Writes NaN outside the working radius.
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let r = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(r <= self.valid_radius) {
            out[..d].iter_mut().for_each(|o| *o = f64::NAN);
            return;
        }
        let (i, _) = self.integral(x, false);
        let pf = self.prefactor(x);
        for k in 0..d {
            out[k] = i[k] * pf;
        }
    }

    fn sup_bound(&self) -> f64 {
        f64::INFINITY
    }
}

/// Result of comparing `W(alpha x)` against the rescaled representation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingCheck {
    pub direct: CorrectorValue,
    pub rescaled: CorrectorValue,
    pub residual: f64,
    /// Sum of the two quadrature error estimates.
    pub combined_err: f64,
}

/// Builds the corrector in rescaled variables: base field `y -> V(alpha y)`,
/// `alpha = 1`, and every length divided by `alpha`. `refine < 1` makes the
/// rescaled lattice and near rule finer than a pure change of variables, so
/// the two routes share no nodes.
pub fn rescaled_corrector(c: &CorrectorField, refine: f64) -> Result<CorrectorField> {
    let a = c.psi.alpha;
    let q = &c.quad;
    let quad = QuadratureConfig {
        radial_nodes: ((q.radial_nodes as f64) / refine).round() as usize,
        angular_nodes: ((q.angular_nodes as f64) / refine).round() as usize,
        lattice_spacing: q.lattice_spacing * refine / a,
        near_radius: q.near_radius / a,
        mid_radius: q.mid_radius / a,
        truncation_radius: Some(c.truncation_radius / a),
        tail_tol: q.tail_tol * a.powf(2.0 * c.psi.p) * (1.0 + 1e-9),
        far_terms: q.far_terms,
    };
    let psi = PsiParams::new(c.psi.dim, c.psi.p, 1.0)?;
    let base = if a == 1.0 { c.base.clone() } else { VectorField::dilated(a, c.base.clone()) };
    CorrectorField::new(base, psi, quad)
}

/// Evaluates `W(alpha x)` directly and through the rescaled representation
/// (with `rescaled` built by [`rescaled_corrector`]).
pub fn scaling_check(c: &CorrectorField, rescaled: &CorrectorField, x: &[f64]) -> Result<ScalingCheck> {
    let a = c.psi.alpha;
    let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
    let direct = c.eval_with_error(&ax)?;
    let resc = rescaled.eval_with_error(x)?;
    let residual = direct.w.iter().zip(&resc.w).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    Ok(ScalingCheck { combined_err: direct.err_est + resc.err_est, direct, rescaled: resc, residual })
}

/// `\int_{B_rho} y . V(scale y) / (|y|^2 + c)^p dy` in polar coordinates.
/// Vanishes for incompressible `V`. Returns `(value, error_estimate)`.
pub fn radial_moment_check(field: &VectorField, rho: f64, scale: f64, c: f64, p: f64) -> Result<(f64, f64)> {
    let d = field.dim();
    if !(2..=3).contains(&d) {
        return Err(Error::Input("radial moments are implemented for d = 2 or 3".into()));
    }
    if !(rho > 0.0) || !(c > 0.0) {
        return Err(Error::Input("need rho > 0 and c > 0".into()));
    }
    let k = field.wavenumber_bound() * scale.abs();
    let run = |n_ang: usize, n_rad: usize| -> f64 {
        let sphere = SphereRule::new(d, n_ang);
        let gl = GaussLegendre::new(n_rad);
        let radial = composite_nodes(&gl, 0.0, rho, panels_for(rho, k, n_rad));
        let mut v = [0.0; 3];
        let mut y = [0.0; 3];
        let mut total = 0.0;
        for (r, wr) in radial {
            let mut ang = 0.0;
            for (s, ws) in sphere.dirs.iter().zip(&sphere.weights) {
                for i in 0..d {
                    y[i] = scale * r * s[i];
                }
                field.eval_into(&y[..d], &mut v[..d]);
                ang += ws * (0..d).map(|i| s[i] * v[i]).sum::<f64>();
            }
            total += wr * r.powi(d as i32) * (r * r + c).powf(-p) * ang;
        }
        total
    };
    let n_ang = 64 + (2.0 * k * rho).ceil() as usize;
    let fine = run(n_ang, 24);
    let coarse = run(n_ang / 2 + 2, 12);
    Ok((fine, (fine - coarse).abs()))
}

/// `mu(B_R(0)) = d omega_d \int_0^R r^{d-1} (r^2 + alpha^2)^{-p} dr`.
pub fn measure_ball(psi: &PsiParams, radius: f64) -> Result<f64> {
    if !(radius >= 0.0) {
        return Err(Error::Input("radius must be nonnegative".into()));
    }
    if radius == 0.0 {
        return Ok(0.0);
    }
    let d = psi.dim;
    let a2 = psi.alpha * psi.alpha;
    let (v, _) = adaptive(
        |r| r.powi(d as i32 - 1) * (r * r + a2).powf(-psi.p),
        0.0,
        radius,
        1e-300,
        1e-13,
    );
    Ok(d as f64 * unit_ball_volume(d) * v)
}

/// One row of an alpha sweep; suprema over the sample grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub sup_w: f64,
    /// Supremum of the central-difference divergence of `W`.
    pub sup_div_w: f64,
    /// Supremum of the closed-form divergence.
    pub sup_div_exact: f64,
    /// Supremum over grid and axes of `|dW/dx_j|`.
    pub sup_dw: f64,
    /// `(p / alpha) (||V|| + sup|W|)`.
    pub div_bound: f64,
}

/// Sweeps `alpha`, reporting suprema of `|W|`, `|div W|` and `|dW/dx_j|`
/// over `grid`. Derivatives use central differences with step `fd_step`.
pub fn alpha_sweep(
    field: &VectorField,
    p: f64,
    alphas: &[f64],
    grid: &[Vec<f64>],
    quad: &QuadratureConfig,
    fd_step: f64,
) -> Result<Vec<AlphaRow>> {
    if alphas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("alphas must be increasing".into()));
    }
    let d = field.dim();
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let c = CorrectorField::new(field.clone(), PsiParams::new(d, p, alpha)?, quad.clone())?;
        let per_point: Vec<Result<(f64, f64, f64, f64)>> = grid
            .par_iter()
            .map(|x| {
                let w = c.eval(x)?;
                let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                let exact = c.div_exact(x, &w)?.abs();
                let mut div = 0.0;
                let mut dmax: f64 = 0.0;
                let mut y = x.clone();
                for j in 0..d {
                    y[j] = x[j] + fd_step;
                    let wp = c.eval(&y)?;
                    y[j] = x[j] - fd_step;
                    let wm = c.eval(&y)?;
                    y[j] = x[j];
                    let dj: Vec<f64> = (0..d).map(|i| (wp[i] - wm[i]) / (2.0 * fd_step)).collect();
                    div += dj[j];
                    dmax = dmax.max(dj.iter().map(|v| v * v).sum::<f64>().sqrt());
                }
                Ok((nw, div.abs(), exact, dmax))
            })
            .collect();
        let mut row = AlphaRow { alpha, sup_w: 0.0, sup_div_w: 0.0, sup_div_exact: 0.0, sup_dw: 0.0, div_bound: 0.0 };
        for r in per_point {
            let (nw, dv, ex, dm) = r?;
            row.sup_w = row.sup_w.max(nw);
            row.sup_div_w = row.sup_div_w.max(dv);
            row.sup_div_exact = row.sup_div_exact.max(ex);
            row.sup_dw = row.sup_dw.max(dm);
        }
        row.div_bound = p / alpha * (field.sup_bound() + row.sup_w);
        rows.push(row);
    }
    Ok(rows)
}

/// Square lattice of `n x n` points on `[-half, half]^2`.
pub fn square_grid(half: f64, n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let t = |k: usize| if n == 1 { 0.0 } else { -half + 2.0 * half * k as f64 / (n - 1) as f64 };
            out.push(vec![t(i), t(j)]);
        }
    }
    out
}
