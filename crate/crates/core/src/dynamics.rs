//! Fixed-step RK4 flows of `V` and `V + W`, the invariance residual of
//! `psi (V + W)`, and a Monte-Carlo check that `mu = psi dx` is pushed
//! forward to itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{CorrectorField, PsiParams, QuadratureConfig};
use crate::error::{dim_mismatch, Error, Result};
use crate::fields::{Field, VectorField};
use crate::wgrid::WGrid;

/// Default RK4 step.
pub const DEFAULT_STEP: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub step: f64,
    pub horizon: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, horizon: 1.0 }
    }
}

impl FlowConfig {
    fn check(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Input(format!("step must be positive, got {}", self.step)));
        }
        if !(self.horizon >= 0.0) {
            return Err(Error::Input(format!("horizon must be nonnegative, got {}", self.horizon)));
        }
        Ok(())
    }
}

/// Sampled flow path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub field_id: String,
}

impl Trajectory {
    pub fn end(&self) -> &[f64] {
        self.states.last().map(|s| s.as_slice()).unwrap_or(&[])
    }

    /// Largest excess of `|x(t)|` over `|x(0)| + speed * |t - t0|`; at most 0
    /// when the growth bound holds.
    pub fn growth_excess(&self, speed: f64) -> f64 {
        let (Some(x0), Some(&t0)) = (self.states.first(), self.times.first()) else {
            return 0.0;
        };
        let r0 = norm(x0);
        self.times
            .iter()
            .zip(&self.states)
            .map(|(t, x)| norm(x) - r0 - speed * (t - t0).abs())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One classical RK4 step of size `h` from `x`, in place. Returns `false` if
/// any stage produced a non-finite value.
pub fn rk4_step<F: Field + ?Sized>(f: &F, x: &mut [f64], h: f64) -> bool {
    let d = x.len();
    let mut k1 = [0.0; 3];
    let mut k2 = [0.0; 3];
    let mut k3 = [0.0; 3];
    let mut k4 = [0.0; 3];
    let mut y = [0.0; 3];
    f.eval_into(x, &mut k1[..d]);
    for i in 0..d {
        y[i] = x[i] + 0.5 * h * k1[i];
    }
    f.eval_into(&y[..d], &mut k2[..d]);
    for i in 0..d {
        y[i] = x[i] + 0.5 * h * k2[i];
    }
    f.eval_into(&y[..d], &mut k3[..d]);
    for i in 0..d {
        y[i] = x[i] + h * k3[i];
    }
    f.eval_into(&y[..d], &mut k4[..d]);
    let mut ok = true;
    for i in 0..d {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        ok &= x[i].is_finite();
    }
    ok
}

/// Splits `[0, t]` into steps of size at most `h`, landing exactly on `t`.
pub(crate) fn step_plan(t: f64, h: f64) -> (usize, f64) {
    if t == 0.0 {
        return (0, 0.0);
    }
    let n = (t.abs() / h).ceil().max(1.0) as usize;
    (n, t / n as f64)
}

fn check_start<F: Field + ?Sized>(f: &F, x0: &[f64]) -> Result<()> {
    if x0.len() != f.dim() {
        return Err(dim_mismatch(f.dim(), x0.len()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("initial state must be finite".into()));
    }
    Ok(())
}

/// `phi^t(x0)` by RK4 with steps of size at most `cfg.step`; `t < 0`
/// integrates backward.
pub fn flow_map<F: Field + ?Sized>(f: &F, x0: &[f64], t: f64, cfg: &FlowConfig) -> Result<Vec<f64>> {
    cfg.check()?;
    check_start(f, x0)?;
    let (n, h) = step_plan(t, cfg.step);
    let mut x = x0.to_vec();
    for k in 0..n {
        if !rk4_step(f, &mut x, h) {
            return Err(Error::Integration {
                t: (k + 1) as f64 * h,
                reason: "state became non-finite (left the field's domain?)".into(),
            });
        }
    }
    Ok(x)
}

/// Integrates to time `t`, keeping every `every`-th step and the endpoint.
pub fn integrate<F: Field + ?Sized>(
    f: &F,
    x0: &[f64],
    t: f64,
    cfg: &FlowConfig,
    every: usize,
    field_id: &str,
) -> Result<Trajectory> {
    cfg.check()?;
    check_start(f, x0)?;
    let every = every.max(1);
    let (n, h) = step_plan(t, cfg.step);
    let mut x = x0.to_vec();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    for k in 1..=n {
        if !rk4_step(f, &mut x, h) {
            return Err(Error::Integration {
                t: k as f64 * h,
                reason: "state became non-finite (left the field's domain?)".into(),
            });
        }
        if k % every == 0 || k == n {
            times.push(k as f64 * h);
            states.push(x.clone());
        }
    }
    Ok(Trajectory { times, states, field_id: field_id.to_string() })
}

/// How `W` is supplied to a corrected flow.
#[derive(Debug)]
pub enum WSource {
    /// Tabulated on a window and interpolated; NaN outside the window.
    Grid(WGrid),
    /// Direct quadrature at every call (slow; the reference).
    Direct(Box<CorrectorField>),
}

/// `V` or `V + W`.
#[derive(Debug)]
pub struct CorrectedField {
    base: VectorField,
    w: Option<WSource>,
    id: String,
}

impl CorrectedField {
    pub fn uncorrected(base: VectorField, id: &str) -> Self {
        Self { base, w: None, id: id.to_string() }
    }

    /// `V + W` with `W` tabulated on `[-half_width, half_width]^2`.
    pub fn with_grid(c: &CorrectorField, half_width: f64, id: &str) -> Result<Self> {
        let grid = WGrid::build(c, half_width)?;
        Ok(Self { base: c.base().clone(), w: Some(WSource::Grid(grid)), id: id.to_string() })
    }

    /// Builds the corrector for `base` and `psi` with a working radius that
    /// covers the window, then tabulates `W` there. `lattice_spacing`
    /// defaults to 0.1, or 0.2 for windows wider than 20.
    pub fn tabulated(base: VectorField, psi: PsiParams, half_width: f64, lattice_spacing: Option<f64>, id: &str) -> Result<Self> {
        let h = lattice_spacing.unwrap_or(if half_width > 20.0 { 0.2 } else { 0.1 });
        if !(h > 0.0) {
            return Err(Error::Input(format!("lattice spacing must be positive, got {h}")));
        }
        let mut quad = QuadratureConfig::for_working_radius(base.dim(), WGrid::required_radius(half_width, h));
        quad.lattice_spacing = h;
        let c = CorrectorField::new(base, psi, quad)?;
        Self::with_grid(&c, half_width, id)
    }

    pub fn with_direct(c: CorrectorField, id: &str) -> Self {
        Self { base: c.base().clone(), w: Some(WSource::Direct(Box::new(c))), id: id.to_string() }
    }

    pub fn base(&self) -> &VectorField {
        &self.base
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn grid(&self) -> Option<&WGrid> {
        match &self.w {
            Some(WSource::Grid(g)) => Some(g),
            _ => None,
        }
    }

    pub fn is_corrected(&self) -> bool {
        self.w.is_some()
    }

    /// `sup |W|` on the working region: the grid bound when tabulated,
    /// infinite for direct evaluation (no a-priori bound), 0 when absent.
    pub fn w_sup(&self) -> f64 {
        match &self.w {
            None => 0.0,
            Some(WSource::Grid(g)) => g.sup_norm(),
            Some(WSource::Direct(_)) => f64::INFINITY,
        }
    }

    /// `W(x)` alone (zero when uncorrected).
    pub fn w_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.w {
            None => out.iter_mut().for_each(|o| *o = 0.0),
            Some(WSource::Grid(g)) => g.eval_into(x, out),
            Some(WSource::Direct(c)) => c.eval_into(x, out),
        }
    }

    /// Whether `x` is where `W` is available.
    pub fn in_domain(&self, x: &[f64]) -> bool {
        match &self.w {
            None => true,
            Some(WSource::Grid(g)) => g.contains(x),
            Some(WSource::Direct(c)) => norm(x) <= c.valid_radius(),
        }
    }
}

impl Field for CorrectedField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.base.eval_into(x, out);
        if self.w.is_some() {
            let d = x.len();
            let mut w = [0.0; 3];
            self.w_into(x, &mut w[..d]);
            for i in 0..d {
                out[i] += w[i];
            }
        }
    }

    fn sup_bound(&self) -> f64 {
        self.base.sup_bound() + self.w_sup()
    }
}

/// Central-difference `div(psi (V + W))` at a point, with the size of the
/// uncorrected term `grad psi . V` for scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InvarianceResidual {
    pub residual: f64,
    pub reference: f64,
}

/// `div(psi (V + W))(x)` by central differences of step `h`; `w = None`
/// drops the corrector.
pub fn invariance_residual(
    base: &VectorField,
    w: Option<&dyn Field>,
    psi: &PsiParams,
    x: &[f64],
    h: f64,
) -> Result<InvarianceResidual> {
    let d = base.dim();
    if x.len() != d || psi.dim != d {
        return Err(dim_mismatch(d, x.len()));
    }
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {h}")));
    }
    let flux = |y: &[f64], i: usize| -> Result<f64> {
        let mut v = [0.0; 3];
        base.eval_into(y, &mut v[..d]);
        let mut total = v[i];
        if let Some(w) = w {
            let mut wv = [0.0; 3];
            w.eval_into(y, &mut wv[..d]);
            if !wv[i].is_finite() {
                return Err(Error::Config(format!("W is not available at {y:?}")));
            }
            total += wv[i];
        }
        Ok(psi.value(y) * total)
    };
    let mut y = x.to_vec();
    let mut residual = 0.0;
    for i in 0..d {
        y[i] = x[i] + h;
        let fp = flux(&y, i)?;
        y[i] = x[i] - h;
        let fm = flux(&y, i)?;
        y[i] = x[i];
        residual += (fp - fm) / (2.0 * h);
    }
    let mut v = [0.0; 3];
    base.eval_into(x, &mut v[..d]);
    let reference = psi.grad(x).iter().zip(&v[..d]).map(|(a, b)| a * b).sum();
    Ok(InvarianceResidual { residual, reference })
}

/// Settings for [`pushforward_test`]. The region is the cube
/// `[-half_width, half_width]^d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PushforwardConfig {
    pub half_width: f64,
    pub n_particles: usize,
    pub time: f64,
    pub seed: u64,
    /// Test functions per axis; the family has `bumps_per_axis^d` members.
    pub bumps_per_axis: usize,
    pub bootstrap: usize,
    pub step: f64,
}

impl Default for PushforwardConfig {
    fn default() -> Self {
        Self {
            half_width: 5.0,
            n_particles: 100_000,
            time: 1.0,
            seed: 0,
            bumps_per_axis: 5,
            bootstrap: 200,
            step: DEFAULT_STEP,
        }
    }
}

/// One smooth test function and its paired estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestFunctionResult {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Sample mean of `phi(X)`.
    pub before: f64,
    /// Sample mean of `phi(T_t X)`.
    pub after: f64,
    /// `|after - before|`.
    pub discrepancy: f64,
    /// Half-width of the central 95% bootstrap interval of `after - before`.
    pub width: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PushforwardReport {
    pub functions: Vec<TestFunctionResult>,
    pub max_discrepancy: f64,
    pub max_width: f64,
    /// Largest `discrepancy / width` (0 when both vanish).
    pub max_ratio: f64,
    pub acceptance_rate: f64,
    pub n_particles: usize,
    pub margin: f64,
    pub seed: u64,
}

impl PushforwardReport {
    /// Every discrepancy is within `k` bootstrap widths.
    pub fn within(&self, k: f64) -> bool {
        self.functions.iter().all(|f| f.discrepancy <= k * f.width)
    }
}

/// `C^infinity` bump, 1 at the center, supported in the open ball.
fn bump(x: &[f64], center: &[f64], radius: f64) -> f64 {
    let s2 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (radius * radius);
    if s2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s2)).exp()
    }
}

/// Samples `mu = psi dx` restricted to the cube, flows the sample for
/// `cfg.time` under `field`, and compares sample means of smooth test
/// functions before and after.
///
/// Test functions live in an interior window shrunk by
/// `time * sup |field|`, so mass outside the cube cannot reach them.
pub fn pushforward_test(field: &CorrectedField, psi: &PsiParams, cfg: &PushforwardConfig) -> Result<PushforwardReport> {
    let d = field.dim();
    if psi.dim != d {
        return Err(dim_mismatch(d, psi.dim));
    }
    if cfg.n_particles < 1000 {
        return Err(Error::Input("push-forward test needs at least 1000 particles".into()));
    }
    if !(cfg.half_width > 0.0) || !(cfg.time >= 0.0) || cfg.bumps_per_axis == 0 {
        return Err(Error::Input("need half_width > 0, time >= 0 and at least one bump per axis".into()));
    }
    let speed = field.sup_bound();
    let margin = cfg.time * speed;
    if !margin.is_finite() {
        return Err(Error::Config("push-forward test needs a finite speed bound (use a tabulated W)".into()));
    }
    let inner = cfg.half_width - margin;
    if !(inner > 0.0) {
        return Err(Error::Config(format!(
            "no interior window: half width {} minus margin {margin:.3}",
            cfg.half_width
        )));
    }
    // the flowed sample stays within half_width + margin of the origin
    let reach: Vec<f64> = vec![cfg.half_width + margin; d];
    let corner: Vec<f64> = reach.iter().map(|r| r * 0.999_999).collect();
    if !field.in_domain(&corner) {
        return Err(Error::Config(format!(
            "W must cover the cube of half width {:.3} (region plus transport margin)",
            cfg.half_width + margin
        )));
    }

    // rejection sampling: psi is largest at the point of the cube nearest 0
    let psi_max = psi.value(&vec![0.0; d]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample = Vec::with_capacity(cfg.n_particles);
    let mut proposed = 0usize;
    let cap = cfg.n_particles.saturating_mul(100);
    while sample.len() < cfg.n_particles && proposed < cap {
        proposed += 1;
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-cfg.half_width..cfg.half_width)).collect();
        if rng.gen::<f64>() * psi_max < psi.value(&x) {
            sample.push(x);
        }
    }
    let acceptance_rate = sample.len() as f64 / proposed as f64;
    if acceptance_rate < 0.01 {
        return Err(Error::Config(format!("rejection sampling efficiency {acceptance_rate:.4} is below 1%")));
    }

    // bump family on a lattice of the interior window
    let k = cfg.bumps_per_axis;
    let spacing = 2.0 * inner / k as f64;
    let radius = spacing;
    let half_support = radius.min(inner);
    let centers: Vec<Vec<f64>> = (0..k.pow(d as u32))
        .map(|flat| {
            let mut rem = flat;
            (0..d)
                .map(|_| {
                    let i = rem % k;
                    rem /= k;
                    // keep each support inside the window
                    let lo = -inner + half_support;
                    let hi = inner - half_support;
                    if k == 1 {
                        0.0
                    } else {
                        lo + (hi - lo) * i as f64 / (k - 1) as f64
                    }
                })
                .collect()
        })
        .collect();

    let flow = FlowConfig { step: cfg.step, horizon: cfg.time };
    let finals = sample
        .par_iter()
        .map(|x| flow_map(field, x, cfg.time, &flow))
        .collect::<Result<Vec<Vec<f64>>>>()?;

    let nf = centers.len();
    let n = sample.len();
    // diffs[i * nf + j] = phi_j(T x_i) - phi_j(x_i)
    let mut diffs = vec![0.0; n * nf];
    let mut before = vec![0.0; nf];
    let mut after = vec![0.0; nf];
    for i in 0..n {
        for (j, c) in centers.iter().enumerate() {
            let b = bump(&sample[i], c, half_support);
            let a = bump(&finals[i], c, half_support);
            before[j] += b;
            after[j] += a;
            diffs[i * nf + j] = a - b;
        }
    }
    let mut boot = vec![Vec::with_capacity(cfg.bootstrap); nf];
    let mut acc = vec![0.0; nf];
    for _ in 0..cfg.bootstrap {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            for (a, dv) in acc.iter_mut().zip(&diffs[i * nf..(i + 1) * nf]) {
                *a += dv;
            }
        }
        for (b, a) in boot.iter_mut().zip(&acc) {
            b.push(a / n as f64);
        }
    }
    let functions: Vec<TestFunctionResult> = centers
        .into_iter()
        .enumerate()
        .map(|(j, center)| {
            let mut bs = std::mem::take(&mut boot[j]);
            bs.sort_by(f64::total_cmp);
            let width = if bs.is_empty() {
                0.0
            } else {
                let lo = bs[((bs.len() as f64) * 0.025) as usize];
                let hi = bs[(((bs.len() as f64) * 0.975) as usize).min(bs.len() - 1)];
                0.5 * (hi - lo)
            };
            let b = before[j] / n as f64;
            let a = after[j] / n as f64;
            TestFunctionResult { center, radius: half_support, before: b, after: a, discrepancy: (a - b).abs(), width }
        })
        .collect();
    let max_discrepancy = functions.iter().map(|f| f.discrepancy).fold(0.0, f64::max);
    let max_width = functions.iter().map(|f| f.width).fold(0.0, f64::max);
    let max_ratio = functions
        .iter()
        .map(|f| if f.discrepancy == 0.0 { 0.0 } else { f.discrepancy / f.width })
        .fold(0.0, f64::max);
    Ok(PushforwardReport {
        functions,
        max_discrepancy,
        max_width,
        max_ratio,
        acceptance_rate,
        n_particles: n,
        margin,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn flow_examples() {
        let cfg = FlowConfig::default();
        let z = flow_map(&VectorField::zero(2), &[1.5, -2.0], 3.0, &cfg).unwrap();
        assert_eq!(z, vec![1.5, -2.0]);
        let c = flow_map(&VectorField::Constant(vec![1.0, -0.5]), &[0.0, 1.0], 2.5, &cfg).unwrap();
        assert!((c[0] - 2.5).abs() < 1e-13 && (c[1] + 0.25).abs() < 1e-13);
        let s = flow_map(&VectorField::shear_sin(), &[FRAC_PI_2, 0.0], 1.0, &cfg).unwrap();
        assert!((s[0] - FRAC_PI_2).abs() < 1e-10 && (s[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rk4_is_fourth_order_on_a_linear_field() {
        // x' = A x with A = [[0,-1],[1,0]] has exact solution a rotation
        let f = VectorField::circular();
        let t: f64 = 5.0;
        let exact = [t.cos(), t.sin()];
        let err = |h: f64| {
            let x = flow_map(&f, &[1.0, 0.0], t, &FlowConfig { step: h, horizon: t }).unwrap();
            (x[0] - exact[0]).hypot(x[1] - exact[1])
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio >= 12.0, "ratio {ratio}");
    }

    #[test]
    fn backward_flow_undoes_forward_flow() {
        let cfg = FlowConfig::default();
        for f in [VectorField::shear_sin(), VectorField::taylor_green()] {
            let x0 = [0.3, -1.1];
            let x1 = flow_map(&f, &x0, 10.0, &cfg).unwrap();
            let back = flow_map(&f, &x1, -10.0, &cfg).unwrap();
            assert!((back[0] - x0[0]).hypot(back[1] - x0[1]) < 1e-6);
        }
    }

    #[test]
    fn trajectories_obey_the_growth_bound() {
        let f = VectorField::taylor_green();
        let tr = integrate(&f, &[2.0, 0.1], 20.0, &FlowConfig::default(), 10, "tg").unwrap();
        assert!(tr.growth_excess(f.sup_bound()) <= 1e-6);
        assert_eq!(tr.times.len(), tr.states.len());
        assert!((tr.times.last().unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_states_are_reported() {
        let c = CorrectorField::with_defaults(VectorField::shear_sin(), 0.75, 1.0).unwrap();
        let f = CorrectedField::with_grid(&c, 2.0, "shear+W").unwrap();
        let r = flow_map(&f, &[FRAC_PI_2, 0.0], 10.0, &FlowConfig::default());
        assert!(matches!(r, Err(Error::Integration { .. })));
    }

    #[test]
    fn invariance_residual_examples() {
        let psi = PsiParams::new(2, 0.75, 1.0).unwrap();
        let zero = VectorField::zero(2);
        let r = invariance_residual(&zero, None, &psi, &[0.4, 0.2], 1e-3).unwrap();
        assert_eq!(r.residual, 0.0);
        // without W the residual is grad psi . V
        let shear = VectorField::shear_sin();
        let r = invariance_residual(&shear, None, &psi, &[1.0, 0.7], 1e-4).unwrap();
        assert!((r.residual - r.reference).abs() < 1e-7);
        let c = CorrectorField::with_defaults(shear.clone(), 0.75, 1.0).unwrap();
        let r = invariance_residual(&shear, Some(&c), &psi, &[1.0, 0.7], 1e-3).unwrap();
        assert!(r.residual.abs() < 1e-3 * r.reference.abs(), "{r:?}");
    }

    #[test]
    fn bumps_are_smooth_and_local() {
        assert_eq!(bump(&[0.0, 0.0], &[0.0, 0.0], 1.0), 1.0);
        assert_eq!(bump(&[1.0, 0.0], &[0.0, 0.0], 1.0), 0.0);
        assert!(bump(&[0.999, 0.0], &[0.0, 0.0], 1.0) < 1e-100);
    }

    #[test]
    fn identity_flow_has_zero_discrepancy() {
        let psi = PsiParams::new(2, 0.75, 2.0).unwrap();
        let f = CorrectedField::uncorrected(VectorField::zero(2), "zero");
        let cfg = PushforwardConfig { n_particles: 2000, bootstrap: 50, ..Default::default() };
        let r = pushforward_test(&f, &psi, &cfg).unwrap();
        assert_eq!(r.functions.len(), 25);
        assert_eq!(r.max_discrepancy, 0.0);
        assert!(r.within(3.0));
    }
}
