//! Recurrence checks: exact iteration of discrete measure-preserving maps,
//! return scans for continuous flows, Poisson-stability sampling and
//! near-return search.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::PsiParams;
use crate::dynamics::{rk4_step, step_plan, DEFAULT_STEP};
use crate::error::{dim_mismatch, Error, Result};
use crate::fields::Field;

/// An injective map on a countable state space with a weight per state.
pub trait DiscreteMap {
    type State: Clone + Eq + Hash + Ord + std::fmt::Debug;
    fn apply(&self, s: &Self::State) -> Self::State;
    fn weight(&self, s: &Self::State) -> f64;
}

/// A map on `{0, ..., n-1}` with per-state weights, checked exhaustively for
/// injectivity and for `weight(T^{-1}{s}) = weight(s)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiniteMap {
    map: Vec<usize>,
    weights: Vec<f64>,
}

impl FiniteMap {
    pub fn new(map: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let n = map.len();
        if weights.len() != n {
            return Err(Error::Input(format!("{} weights for {n} states", weights.len())));
        }
        let mut pre = vec![usize::MAX; n];
        for (i, &j) in map.iter().enumerate() {
            if j >= n {
                return Err(Error::Model(format!("state {i} maps outside the state space ({j})")));
            }
            if pre[j] != usize::MAX {
                return Err(Error::Model(format!("states {} and {i} both map to {j}", pre[j])));
            }
            pre[j] = i;
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Input(format!("weights must be finite and nonnegative, got {w}")));
        }
        for (j, &i) in pre.iter().enumerate() {
            if weights[i] != weights[j] {
                return Err(Error::Model(format!("weight of the preimage of {j} differs from its own weight")));
            }
        }
        Ok(Self { map, weights })
    }

    /// `i -> i + 1 mod n` with unit weights.
    pub fn cycle(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("cycle needs at least one state".into()));
        }
        Self::new((0..n).map(|i| (i + 1) % n).collect(), vec![1.0; n])
    }

    /// Uniformly random permutation with unit weights.
    pub fn random_permutation(n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            map.swap(i, j);
        }
        Self::new(map, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }
}

impl DiscreteMap for FiniteMap {
    type State = usize;
    fn apply(&self, s: &usize) -> usize {
        self.map[*s]
    }
    fn weight(&self, s: &usize) -> f64 {
        self.weights[*s]
    }
}

/// Weights on `Z^d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeWeight {
    Counting,
    /// `psi(k) = (|k|^2 + alpha^2)^{-p}`.
    Psi { p: f64, alpha: f64 },
}

/// Maps on `Z^d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeMap {
    /// `k -> k + shift`; preserves counting measure, not `psi` weights.
    Translate(Vec<i64>),
    /// Quarter turn in the first two coordinates; preserves both weights.
    Rotate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatticeSystem {
    pub dim: usize,
    pub map: LatticeMap,
    pub weight: LatticeWeight,
}

impl LatticeSystem {
    pub fn new(dim: usize, map: LatticeMap, weight: LatticeWeight) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("lattice dimension must be positive".into()));
        }
        match &map {
            LatticeMap::Translate(s) if s.len() != dim => return Err(dim_mismatch(dim, s.len())),
            LatticeMap::Rotate if dim < 2 => return Err(Error::Input("rotation needs d >= 2".into())),
            _ => {}
        }
        if let LatticeWeight::Psi { alpha, .. } = weight {
            if !(alpha > 0.0) {
                return Err(Error::Input("alpha must be positive".into()));
            }
        }
        Ok(Self { dim, map, weight })
    }
}

impl DiscreteMap for LatticeSystem {
    type State = Vec<i64>;
    fn apply(&self, s: &Vec<i64>) -> Vec<i64> {
        match &self.map {
            LatticeMap::Translate(shift) => s.iter().zip(shift).map(|(a, b)| a + b).collect(),
            LatticeMap::Rotate => {
                let mut out = s.clone();
                out[0] = -s[1];
                out[1] = s[0];
                out
            }
        }
    }
    fn weight(&self, s: &Vec<i64>) -> f64 {
        match self.weight {
            LatticeWeight::Counting => 1.0,
            LatticeWeight::Psi { p, alpha } => {
                let r2: f64 = s.iter().map(|&k| (k * k) as f64).sum();
                (r2 + alpha * alpha).powf(-p)
            }
        }
    }
}

/// Outcome of iterating a discrete map on a set `U`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecurrenceReport {
    pub u_size: usize,
    pub u_measure: f64,
    pub horizon: usize,
    /// Every `n` in `1..=horizon` with `T^n(U) ∩ U` nonempty, increasing.
    pub return_events: Vec<usize>,
    /// `mu(U ∪ T(U) ∪ ... ∪ T^n(U))` for `n = 0..=horizon`.
    pub orbit_growth: Vec<f64>,
    /// Least-squares slope of `orbit_growth` against `n`.
    pub slope: f64,
    /// Whether `weight(T(s)) = weight(s)` held on every visited state.
    pub measure_preserved_on_orbit: bool,
}

fn lsq_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Iterates `T^n(U)` exactly for `n <= horizon`, recording returns to `U`
/// and the measure of the accumulated orbit. Fails with a model error if two
/// visited states share an image.
pub fn poincare_discrete_check<M: DiscreteMap>(map: &M, u: &[M::State], horizon: usize) -> Result<RecurrenceReport> {
    let uset: HashSet<M::State> = u.iter().cloned().collect();
    if uset.is_empty() {
        return Err(Error::Input("U must be nonempty".into()));
    }
    let mut current: Vec<M::State> = uset.iter().cloned().collect();
    current.sort();
    // summed in sorted order so the result does not depend on hashing
    let u_measure: f64 = current.iter().map(|s| map.weight(s)).sum();
    if !(u_measure > 0.0) {
        return Err(Error::Input("U must have positive measure".into()));
    }
    let mut union: HashSet<M::State> = uset.clone();
    let mut preimage: HashMap<M::State, M::State> = HashMap::new();
    let mut measure = u_measure;
    let mut orbit_growth = vec![measure];
    let mut return_events = Vec::new();
    let mut preserved = true;
    for n in 1..=horizon {
        let mut next = Vec::with_capacity(current.len());
        for s in &current {
            let t = map.apply(s);
            match preimage.get(&t) {
                Some(prev) if prev != s => {
                    return Err(Error::Model(format!("states {prev:?} and {s:?} both map to {t:?}")));
                }
                Some(_) => {}
                None => {
                    preimage.insert(t.clone(), s.clone());
                }
            }
            preserved &= map.weight(&t) == map.weight(s);
            next.push(t);
        }
        if next.iter().any(|s| uset.contains(s)) {
            return_events.push(n);
        }
        for s in &next {
            if union.insert(s.clone()) {
                measure += map.weight(s);
            }
        }
        orbit_growth.push(measure);
        current = next;
    }
    let slope = lsq_slope(&orbit_growth);
    Ok(RecurrenceReport {
        u_size: uset.len(),
        u_measure,
        horizon,
        return_events,
        orbit_growth,
        slope,
        measure_preserved_on_orbit: preserved,
    })
}

/// Open ball `B_radius(center)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn contains(&self, x: &[f64]) -> bool {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        r2 < self.radius * self.radius
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReturnScanConfig {
    /// Returns are counted only at times `t >= tau`.
    pub tau: f64,
    pub horizon: f64,
    pub n_particles: usize,
    pub seed: u64,
    pub step: f64,
    pub histogram_bins: usize,
}

impl Default for ReturnScanConfig {
    fn default() -> Self {
        Self { tau: 1.0, horizon: 1000.0, n_particles: 1000, seed: 0, step: DEFAULT_STEP, histogram_bins: 20 }
    }
}

/// What happened to one particle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleFate {
    /// Left `U` and was back in it at a step with `t >= tau`.
    Returned(f64),
    /// Never left `U` before the horizon.
    NeverLeft,
    /// Left `U` and was still away at the horizon.
    Away,
    /// Left the domain where the field is available.
    Escaped(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReturnScanReport {
    pub ball: Ball,
    pub config: ReturnScanConfig,
    /// `"mu"` when starts were drawn from `psi dx`, else `"lebesgue"`.
    pub sampled_from: String,
    pub n_particles: usize,
    pub returned: usize,
    pub never_left: usize,
    pub away: usize,
    pub escaped: usize,
    /// `(returned + never_left) / n_particles`.
    pub return_fraction: f64,
    /// Sorted first-return times.
    pub return_times: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
}

fn sample_ball(ball: &Ball, psi: Option<&PsiParams>, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let d = ball.center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // psi is largest at the point of the ball closest to the origin
    let cn = ball.center.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nearest: Vec<f64> = if cn <= ball.radius {
        vec![0.0; d]
    } else {
        ball.center.iter().map(|c| c * (1.0 - ball.radius / cn)).collect()
    };
    let wmax = psi.map(|p| p.value(&nearest)).unwrap_or(1.0);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n {
        tries += 1;
        if tries > 1000 * n.max(1) {
            return Err(Error::Config("could not sample the start ball".into()));
        }
        let x: Vec<f64> = ball.center.iter().map(|c| c + rng.gen_range(-ball.radius..ball.radius)).collect();
        if !ball.contains(&x) {
            continue;
        }
        if let Some(p) = psi {
            if rng.gen::<f64>() * wmax >= p.value(&x) {
                continue;
            }
        }
        out.push(x);
    }
    Ok(out)
}

fn particle_fate<F: Field + ?Sized>(field: &F, ball: &Ball, x0: &[f64], cfg: &ReturnScanConfig) -> ParticleFate {
    let (n, h) = step_plan(cfg.horizon, cfg.step);
    let mut x = x0.to_vec();
    let mut left = false;
    for k in 1..=n {
        let t = k as f64 * h;
        if !rk4_step(field, &mut x, h) {
            return ParticleFate::Escaped(t);
        }
        let inside = ball.contains(&x);
        if !inside {
            left = true;
        } else if left && t >= cfg.tau {
            return ParticleFate::Returned(t);
        }
    }
    if left {
        ParticleFate::Away
    } else {
        ParticleFate::NeverLeft
    }
}

fn histogram(times: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<HistogramBin> {
    if bins == 0 || !(hi > lo) {
        return Vec::new();
    }
    let w = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> =
        (0..bins).map(|i| HistogramBin { lo: lo + i as f64 * w, hi: lo + (i + 1) as f64 * w, count: 0 }).collect();
    for &t in times {
        let i = (((t - lo) / w) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

/// Samples starts in `ball` (from `psi dx` when given, else uniformly), flows
/// each under `field` and records its first return after `tau`.
pub fn continuous_return_scan<F: Field + ?Sized>(
    field: &F,
    psi: Option<&PsiParams>,
    ball: &Ball,
    cfg: &ReturnScanConfig,
) -> Result<ReturnScanReport> {
    let d = field.dim();
    if ball.center.len() != d {
        return Err(dim_mismatch(d, ball.center.len()));
    }
    if !(ball.radius > 0.0) || !(cfg.tau > 0.0) || !(cfg.horizon >= cfg.tau) || !(cfg.step > 0.0) {
        return Err(Error::Input("need radius > 0, tau > 0, horizon >= tau and step > 0".into()));
    }
    let starts = sample_ball(ball, psi, cfg.n_particles, cfg.seed)?;
    let fates: Vec<ParticleFate> = starts.par_iter().map(|x| particle_fate(field, ball, x, cfg)).collect();
    let mut times = Vec::new();
    let (mut never_left, mut away, mut escaped) = (0, 0, 0);
    for f in &fates {
        match f {
            ParticleFate::Returned(t) => times.push(*t),
            ParticleFate::NeverLeft => never_left += 1,
            ParticleFate::Away => away += 1,
            ParticleFate::Escaped(_) => escaped += 1,
        }
    }
    times.sort_by(f64::total_cmp);
    let n = starts.len();
    Ok(ReturnScanReport {
        ball: ball.clone(),
        config: cfg.clone(),
        sampled_from: if psi.is_some() { "mu" } else { "lebesgue" }.into(),
        n_particles: n,
        returned: times.len(),
        never_left,
        away,
        escaped,
        return_fraction: (times.len() + never_left) as f64 / n as f64,
        histogram: histogram(&times, cfg.tau, cfg.horizon, cfg.histogram_bins),
        return_times: times,
    })
}

/// Rectangular window `[lo_i, hi_i]` sampled with `per_axis` points per axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Window {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub per_axis: usize,
}

impl Window {
    pub fn points(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.lo.len();
        if self.hi.len() != d {
            return Err(dim_mismatch(d, self.hi.len()));
        }
        if self.per_axis == 0 {
            return Err(Error::Input("need at least one point per axis".into()));
        }
        let k = self.per_axis;
        Ok((0..k.pow(d as u32))
            .map(|flat| {
                let mut rem = flat;
                (0..d)
                    .map(|a| {
                        let i = rem % k;
                        rem /= k;
                        if k == 1 {
                            0.5 * (self.lo[a] + self.hi[a])
                        } else {
                            self.lo[a] + (self.hi[a] - self.lo[a]) * i as f64 / (k - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoissonConfig {
    pub tau: f64,
    pub horizon: f64,
    /// Near-return threshold `eps_r`.
    pub eps: f64,
    pub step: f64,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self { tau: 1.0, horizon: 100.0, eps: 0.05, step: DEFAULT_STEP }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoissonPoint {
    pub x: Vec<f64>,
    /// `min |phi^t(x) - x|` over sampled `t` in `[tau, horizon]`; `None`
    /// if the orbit left the field's domain first.
    pub min_distance: Option<f64>,
    pub at_time: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoissonReport {
    pub config: PoissonConfig,
    pub points: Vec<PoissonPoint>,
    pub escaped: usize,
    /// Share of grid points with a near return within `eps`.
    pub fraction: f64,
}

fn closest_return<F: Field + ?Sized>(field: &F, x0: &[f64], tau: f64, horizon: f64, step: f64) -> Option<(f64, f64)> {
    let (n, h) = step_plan(horizon, step);
    let mut x = x0.to_vec();
    let mut best: Option<(f64, f64)> = None;
    for k in 1..=n {
        if !rk4_step(field, &mut x, h) {
            return None;
        }
        let t = k as f64 * h;
        if t + 1e-12 >= tau {
            let dist = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, t));
            }
        }
    }
    best
}

/// For each grid point, the closest sampled return of its forward orbit.
pub fn poisson_stability_scan<F: Field + ?Sized>(field: &F, window: &Window, cfg: &PoissonConfig) -> Result<PoissonReport> {
    if window.lo.len() != field.dim() {
        return Err(dim_mismatch(field.dim(), window.lo.len()));
    }
    if !(cfg.tau >= 0.0) || !(cfg.horizon > cfg.tau) || !(cfg.step > 0.0) || !(cfg.eps > 0.0) {
        return Err(Error::Input("need 0 <= tau < horizon, step > 0 and eps > 0".into()));
    }
    let pts = window.points()?;
    let points: Vec<PoissonPoint> = pts
        .into_par_iter()
        .map(|x| {
            let r = closest_return(field, &x, cfg.tau, cfg.horizon, cfg.step);
            PoissonPoint { min_distance: r.map(|v| v.0), at_time: r.map(|v| v.1), x }
        })
        .collect();
    let escaped = points.iter().filter(|p| p.min_distance.is_none()).count();
    let hits = points.iter().filter(|p| p.min_distance.is_some_and(|d| d <= cfg.eps)).count();
    Ok(PoissonReport { fraction: hits as f64 / points.len() as f64, escaped, points, config: cfg.clone() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NearReturn {
    pub t: f64,
    pub distance: f64,
}

/// Minimizes `|phi^t(x0) - x0|` over `t` in `[tau, horizon]`: sampled at
/// every RK4 step, then refined by golden-section search over a single RK4
/// sub-step around the best samples.
pub fn near_return_search<F: Field + ?Sized>(field: &F, x0: &[f64], tau: f64, horizon: f64, step: f64) -> Result<NearReturn> {
    let d = field.dim();
    if x0.len() != d {
        return Err(dim_mismatch(d, x0.len()));
    }
    if !(horizon > 0.0) || !(tau >= 0.0) || tau > horizon || !(step > 0.0) {
        return Err(Error::Input("need 0 <= tau <= horizon, horizon > 0 and step > 0".into()));
    }
    let (n, h) = step_plan(horizon, step);
    let dist = |x: &[f64]| x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut x = x0.to_vec();
    // (distance, step index)
    let mut best: Option<(f64, usize)> = None;
    let mut states = vec![x.clone()];
    for k in 1..=n {
        if !rk4_step(field, &mut x, h) {
            return Err(Error::Integration { t: k as f64 * h, reason: "orbit left the field's domain".into() });
        }
        states.push(x.clone());
        if k as f64 * h + 1e-12 >= tau {
            let dk = dist(&x);
            if best.is_none_or(|(b, _)| dk < b) {
                best = Some((dk, k));
            }
        }
    }
    let (mut best_d, k) = best.ok_or_else(|| Error::Input("no sampled time in [tau, horizon]".into()))?;
    let mut best_t = k as f64 * h;
    // phi^{t_j + s} ~ one RK4 step of size s from the stored state at t_j
    let at = |j: usize, s: f64| -> Option<f64> {
        let mut y = states[j].clone();
        rk4_step(field, &mut y, s).then(|| dist(&y))
    };
    let lo_t = (k as f64 - 1.0) * h;
    let hi_t = ((k + 1).min(n)) as f64 * h;
    let eval = |t: f64| -> Option<f64> {
        let j = ((t / h).floor() as usize).min(n);
        at(j, t - j as f64 * h)
    };
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo_t.max(tau), hi_t.min(horizon));
    if b > a {
        let mut c = b - gr * (b - a);
        let mut e = a + gr * (b - a);
        let mut fc = eval(c).unwrap_or(f64::INFINITY);
        let mut fe = eval(e).unwrap_or(f64::INFINITY);
        for _ in 0..100 {
            if fc < fe {
                b = e;
                e = c;
                fe = fc;
                c = b - gr * (b - a);
                fc = eval(c).unwrap_or(f64::INFINITY);
            } else {
                a = c;
                c = e;
                fc = fe;
                e = a + gr * (b - a);
                fe = eval(e).unwrap_or(f64::INFINITY);
            }
            if (b - a).abs() < 1e-13 * (1.0 + b.abs()) {
                break;
            }
        }
        let tm = 0.5 * (a + b);
        if let Some(dm) = eval(tm) {
            if dm < best_d {
                best_d = dm;
                best_t = tm;
            }
        }
    }
    Ok(NearReturn { t: best_t, distance: best_d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::VectorField;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn cycle_returns_at_multiples_of_its_period() {
        let m = FiniteMap::cycle(12).unwrap();
        let r = poincare_discrete_check(&m, &[0], 50).unwrap();
        assert_eq!(r.return_events, vec![12, 24, 36, 48]);
        assert_eq!(r.orbit_growth[11], 12.0);
        assert_eq!(*r.orbit_growth.last().unwrap(), 12.0);
    }

    #[test]
    fn non_injective_maps_are_rejected() {
        assert!(matches!(FiniteMap::new(vec![1, 1, 0], vec![1.0; 3]), Err(Error::Model(_))));
        assert!(matches!(FiniteMap::new(vec![1, 0, 2], vec![1.0, 2.0, 1.0]), Err(Error::Model(_))));
    }

    #[test]
    fn translation_wanders_with_linear_growth() {
        let sys = LatticeSystem::new(1, LatticeMap::Translate(vec![10]), LatticeWeight::Counting).unwrap();
        let u: Vec<Vec<i64>> = (0..10).map(|k| vec![k]).collect();
        let r = poincare_discrete_check(&sys, &u, 100).unwrap();
        assert!(r.return_events.is_empty());
        assert!((r.slope - 10.0).abs() < 1e-9);
        // a unit shift overlaps U for n < 10 and then leaves for good
        let sys = LatticeSystem::new(1, LatticeMap::Translate(vec![1]), LatticeWeight::Counting).unwrap();
        let r = poincare_discrete_check(&sys, &u, 100).unwrap();
        assert_eq!(r.return_events, (1..10).collect::<Vec<_>>());
        assert!((r.slope - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psi_weighted_rotation_preserves_measure() {
        let sys = LatticeSystem::new(2, LatticeMap::Rotate, LatticeWeight::Psi { p: 0.75, alpha: 1.0 }).unwrap();
        let u = vec![vec![3, 1]];
        let r = poincare_discrete_check(&sys, &u, 8).unwrap();
        assert_eq!(r.return_events, vec![4, 8]);
        assert!(r.measure_preserved_on_orbit);
        let sys = LatticeSystem::new(2, LatticeMap::Translate(vec![1, 0]), LatticeWeight::Psi { p: 0.75, alpha: 1.0 }).unwrap();
        assert!(!poincare_discrete_check(&sys, &u, 3).unwrap().measure_preserved_on_orbit);
    }

    #[test]
    fn zero_field_never_leaves() {
        let ball = Ball { center: vec![FRAC_PI_2, 0.0], radius: 0.5 };
        let cfg = ReturnScanConfig { horizon: 5.0, n_particles: 50, ..Default::default() };
        let r = continuous_return_scan(&VectorField::zero(2), None, &ball, &cfg).unwrap();
        assert_eq!(r.never_left, 50);
        assert_eq!(r.return_fraction, 1.0);
    }

    #[test]
    fn sampling_from_psi_stays_in_the_ball() {
        let ball = Ball { center: vec![3.0, 0.0], radius: 0.5 };
        let psi = PsiParams::new(2, 0.75, 2.0).unwrap();
        let pts = sample_ball(&ball, Some(&psi), 500, 1).unwrap();
        assert!(pts.iter().all(|x| ball.contains(x)));
        // psi tilts the sample toward the origin
        let mean: f64 = pts.iter().map(|x| x[0]).sum::<f64>() / 500.0;
        assert!(mean < 3.0);
    }

    #[test]
    fn circular_orbits_are_poisson_stable() {
        let w = Window { lo: vec![-2.0, -2.0], hi: vec![2.0, 2.0], per_axis: 5 };
        let cfg = PoissonConfig { horizon: 2.0 * PI + 0.1, ..Default::default() };
        let r = poisson_stability_scan(&VectorField::circular(), &w, &cfg).unwrap();
        assert_eq!(r.fraction, 1.0);
        let r = poisson_stability_scan(&VectorField::zero(2), &w, &cfg).unwrap();
        assert_eq!(r.fraction, 1.0);
    }

    #[test]
    fn near_return_examples() {
        let r = near_return_search(&VectorField::circular(), &[1.0, 0.0], 1.0, 10.0, 1e-2).unwrap();
        assert!((r.t - 2.0 * PI).abs() < 1e-6, "{r:?}");
        assert!(r.distance < 1e-8, "{r:?}");
        let r = near_return_search(&VectorField::zero(2), &[0.3, 0.1], 1.0, 5.0, 1e-2).unwrap();
        assert_eq!(r.distance, 0.0);
        let r = near_return_search(&VectorField::shear_sin(), &[FRAC_PI_2, 0.0], 1.0, 100.0, 1e-2).unwrap();
        assert!(r.distance >= 0.9, "{r:?}");
    }
}
