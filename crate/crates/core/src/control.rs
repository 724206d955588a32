//! Small-control navigation between two points.
//!
//! The control applied to `x' = V(x) + u` is `u(t) = W(x(t)) + u~(t)` with
//! `u~` piecewise constant and small, so the planned motion follows the
//! recurrent field `V + W` plus a nudge. Planning is a search over cells:
//! from each reached state, every nudge in a finite net is held for `tau`,
//! then the free flow of `V + W` is followed for up to `coast_factor * tau`,
//! recording every new cell along the way. States near the target are
//! finished off with a constant control found by Newton shooting.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{norm, rk4_step, step_plan, CorrectedField, Trajectory, DEFAULT_STEP};
use crate::error::{dim_mismatch, Error, Result};
use crate::fields::{Field, VectorField};

/// Share of the free budget `delta - sup|W|` kept for shooting, so the
/// composed control stays strictly below `delta`.
const SHOOT_SHARE: f64 = 5.0 / 6.0;

/// `tau (delta - u_norm) / 2`: the radius of the ball of endpoints reachable
/// by adding a constant nudge over a window of length `tau`.
pub fn step1_ball_radius(tau: f64, delta: f64, u_norm: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("tau must be positive, got {tau}")));
    }
    if !(u_norm < delta) {
        return Err(Error::Input(format!("control norm {u_norm} must be below delta {delta}")));
    }
    Ok(tau * (delta - u_norm) / 2.0)
}

/// Piecewise-constant nudge `u~`: `values[i]` holds on
/// `[breakpoints[i], breakpoints[i+1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub breakpoints: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// `max |values[i]|`.
    pub sup_norm: f64,
}

impl ControlSchedule {
    pub fn empty() -> Self {
        Self { breakpoints: vec![0.0], values: Vec::new(), sup_norm: 0.0 }
    }

    pub fn from_pieces(pieces: &[(f64, Vec<f64>)]) -> Self {
        let mut breakpoints = vec![0.0];
        let mut values = Vec::with_capacity(pieces.len());
        for (dur, v) in pieces {
            breakpoints.push(breakpoints.last().unwrap() + dur);
            values.push(v.clone());
        }
        let sup_norm = values.iter().map(|v| norm(v)).fold(0.0, f64::max);
        Self { breakpoints, values, sup_norm }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.breakpoints.last().copied().unwrap_or(0.0)
    }

    fn pieces(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.breakpoints.windows(2).zip(&self.values).map(|(b, v)| (b[1] - b[0], v.as_slice()))
    }
}

/// Planning problem. Omitted keys take the values of [`ReachSpec::new`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ReachSpec {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub delta: f64,
    pub arrival_tol: f64,
    /// Longest schedule accepted.
    pub horizon: f64,
    /// Side of the search cells; defaults to `tau * nudge`, the diameter
    /// of the ball marked around each window endpoint.
    #[serde(default)]
    pub cell_size: Option<f64>,
    /// Length of each control window.
    pub tau: f64,
    /// Free-flow coasting lasts up to `coast_factor * tau`.
    pub coast_factor: usize,
    /// Fraction of `delta - sup|W|` used by the nudge net.
    pub budget_split: f64,
    /// Cap on the number of expanded states.
    pub max_expansions: usize,
    /// States are expanded in order of `time + heuristic_weight * |x - y0| / sup|V + W|`;
    /// 0 gives plain time order.
    pub heuristic_weight: f64,
    pub step: f64,
}

impl Default for ReachSpec {
    fn default() -> Self {
        Self::new(Vec::new(), Vec::new(), 0.0, 0.0)
    }
}

impl ReachSpec {
    pub fn new(x0: Vec<f64>, y0: Vec<f64>, delta: f64, arrival_tol: f64) -> Self {
        Self {
            x0,
            y0,
            delta,
            arrival_tol,
            horizon: 1000.0,
            cell_size: None,
            tau: 2.0,
            coast_factor: 50,
            budget_split: 0.5,
            max_expansions: 200_000,
            heuristic_weight: 10.0,
            step: DEFAULT_STEP,
        }
    }

    fn check(&self) -> Result<()> {
        if self.x0.len() != self.y0.len() {
            return Err(dim_mismatch(self.x0.len(), self.y0.len()));
        }
        let pos = [
            ("delta", self.delta),
            ("arrival_tol", self.arrival_tol),
            ("cell_size", self.cell_size.unwrap_or(1.0)),
            ("tau", self.tau),
            ("step", self.step),
        ];
        if let Some((name, v)) = pos.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Input(format!("{name} must be positive, got {v}")));
        }
        if !(self.horizon >= 0.0) {
            return Err(Error::Input("horizon must be nonnegative".into()));
        }
        if !(self.heuristic_weight >= 0.0 && self.heuristic_weight.is_finite()) {
            return Err(Error::Input("heuristic_weight must be a finite nonnegative number".into()));
        }
        if !(self.budget_split > 0.0 && self.budget_split < 1.0) {
            return Err(Error::Input("budget_split must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReachStatus {
    Reached,
    NotReached,
}

/// Where the search stood when it stopped.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrontierStats {
    pub nodes: usize,
    pub reached_cells: usize,
    pub queued: usize,
    /// Smallest `|x - y0|` over all recorded states.
    pub closest_distance: f64,
    pub latest_time: f64,
    /// `"expansions"`, `"saturated"` or `"none"`.
    pub exhausted: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReachResult {
    pub status: ReachStatus,
    pub schedule: ControlSchedule,
    pub trajectory: Trajectory,
    pub arrival_error: f64,
    pub expanded_cells: usize,
    /// `sup |W|` used for the budget split.
    pub w_bound: f64,
    /// Nudge net magnitude and shooting cap.
    pub nudge: f64,
    pub shoot_cap: f64,
    pub cell_size: f64,
    /// Largest `|W(x) + u~|` met at any RK4 stage of the realized path.
    pub composed_sup_norm: f64,
    pub frontier: FrontierStats,
}

/// `V(x) + W(x) + u`, optionally recording `max |W(x) + u|`.
struct Controlled<'a> {
    base: &'a VectorField,
    corrected: &'a CorrectedField,
    u: [f64; 3],
    peak: Option<&'a AtomicU64>,
}

impl Field for Controlled<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let mut w = [0.0; 3];
        self.corrected.w_into(x, &mut w[..d]);
        for i in 0..d {
            w[i] += self.u[i];
        }
        if let Some(peak) = self.peak {
            let m = norm(&w[..d]);
            if m.is_finite() {
                peak.fetch_max(m.to_bits(), AtomicOrdering::Relaxed);
            } else {
                peak.store(f64::INFINITY.to_bits(), AtomicOrdering::Relaxed);
            }
        }
        self.base.eval_into(x, out);
        for i in 0..d {
            out[i] += w[i];
        }
    }

    fn sup_bound(&self) -> f64 {
        self.corrected.sup_bound() + norm(&self.u)
    }
}

fn as3(u: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    out[..u.len()].copy_from_slice(u);
    out
}

/// Integrates one constant-nudge window; `None` if the state left the
/// domain of `W`.
fn segment(base: &VectorField, corrected: &CorrectedField, x: &[f64], u: &[f64], dur: f64, step: f64) -> Option<Vec<f64>> {
    let f = Controlled { base, corrected, u: as3(u), peak: None };
    let (n, h) = step_plan(dur, step);
    let mut y = x.to_vec();
    for _ in 0..n {
        if !rk4_step(&f, &mut y, h) {
            return None;
        }
    }
    Some(y)
}

fn solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, v)| r.iter().copied().chain([*v]).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

/// Newton shooting for a constant nudge `c`, `|c| <= cap`, carrying `x` to
/// `target` in time `dur`.
fn shoot(
    base: &VectorField,
    corrected: &CorrectedField,
    x: &[f64],
    target: &[f64],
    dur: f64,
    cap: f64,
    step: f64,
    tol: f64,
) -> Option<Vec<f64>> {
    let d = x.len();
    let free = segment(base, corrected, x, &vec![0.0; d], dur, step)?;
    let mut c: Vec<f64> = free.iter().zip(target).map(|(f, t)| (t - f) / dur).collect();
    for _ in 0..30 {
        let cn = norm(&c);
        if cn > cap {
            c.iter_mut().for_each(|v| *v *= cap / cn);
        }
        let end = segment(base, corrected, x, &c, dur, step)?;
        let r: Vec<f64> = end.iter().zip(target).map(|(e, t)| e - t).collect();
        if norm(&r) <= tol {
            return (norm(&c) <= cap * (1.0 + 1e-12)).then_some(c);
        }
        let eps = 1e-6;
        let mut jac = vec![vec![0.0; d]; d];
        for j in 0..d {
            let mut cj = c.clone();
            cj[j] += eps;
            let ej = segment(base, corrected, x, &cj, dur, step)?;
            for i in 0..d {
                jac[i][j] = (ej[i] - end[i]) / eps;
            }
        }
        let dc = solve(&jac, &r)?;
        for (ci, di) in c.iter_mut().zip(&dc) {
            *ci -= di;
        }
    }
    None
}

/// Unit directions of the nudge net: 8 compass points in d = 2, the 26
/// neighbours of a cube in d = 3.
fn compass(d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let k = 3usize.pow(d as u32);
    for flat in 0..k {
        let mut rem = flat;
        let v: Vec<f64> = (0..d)
            .map(|_| {
                let i = rem % 3;
                rem /= 3;
                i as f64 - 1.0
            })
            .collect();
        let n = norm(&v);
        if n > 0.0 {
            out.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    out
}

struct Node {
    state: Vec<f64>,
    time: f64,
    parent: Option<usize>,
    control: Vec<f64>,
    duration: f64,
}

#[derive(PartialEq)]
struct Queued {
    key: f64,
    id: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (key, id)
        other.key.total_cmp(&self.key).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The search state. [`plan_reach`] wraps construction and [`Planner::run`].
pub struct Planner<'a> {
    field: &'a CorrectedField,
    spec: ReachSpec,
    nudge: f64,
    shoot_cap: f64,
    w_bound: f64,
    cell_size: f64,
    /// `sup |V + W|`, turning distance into a time estimate for the queue.
    speed: f64,
    controls: Vec<Vec<f64>>,
    nodes: Vec<Node>,
    cells: HashMap<Vec<i64>, usize>,
    reached: HashSet<Vec<i64>>,
    heap: BinaryHeap<Queued>,
    expansions: usize,
    closest: f64,
}

impl<'a> Planner<'a> {
    pub fn new(field: &'a CorrectedField, spec: ReachSpec) -> Result<Self> {
        spec.check()?;
        let d = field.dim();
        if spec.x0.len() != d {
            return Err(dim_mismatch(d, spec.x0.len()));
        }
        let w_bound = field.w_sup();
        if !w_bound.is_finite() {
            return Err(Error::Config("planning needs a tabulated W with a known bound".into()));
        }
        if w_bound >= spec.delta {
            return Err(Error::Config(format!(
                "sup|W| = {w_bound:.4} is not below delta = {}; raise alpha",
                spec.delta
            )));
        }
        if !field.in_domain(&spec.x0) || !field.in_domain(&spec.y0) {
            return Err(Error::Config("x0 and y0 must lie where W is tabulated".into()));
        }
        let free = spec.delta - w_bound;
        let planning = spec.budget_split * free;
        let nudge = 0.5 * planning;
        let mut controls = vec![vec![0.0; d]];
        controls.extend(compass(d).into_iter().map(|u| u.into_iter().map(|a| a * nudge).collect()));
        let mut p = Self {
            field,
            nudge,
            shoot_cap: SHOOT_SHARE * free,
            w_bound,
            cell_size: spec.cell_size.unwrap_or(spec.tau * nudge),
            speed: field.sup_bound().max(f64::MIN_POSITIVE),
            controls,
            nodes: Vec::new(),
            cells: HashMap::new(),
            reached: HashSet::new(),
            heap: BinaryHeap::new(),
            expansions: 0,
            closest: norm(&diff(&spec.x0, &spec.y0)),
            spec,
        };
        let root = Node { state: p.spec.x0.clone(), time: 0.0, parent: None, control: vec![0.0; d], duration: 0.0 };
        p.add_node(root);
        Ok(p)
    }

    fn cell(&self, x: &[f64]) -> Vec<i64> {
        x.iter().map(|v| (v / self.cell_size).floor() as i64).collect()
    }

    /// Whether the cell containing `x` has been marked reached (by a
    /// recorded state or by the ball around a window endpoint).
    pub fn is_reached(&self, x: &[f64]) -> bool {
        self.reached.contains(&self.cell(x))
    }

    /// Marks every cell meeting the ball `B_r(x)`.
    fn mark_ball(&mut self, x: &[f64], r: f64) {
        let d = x.len();
        let cs = self.cell_size;
        let lo: Vec<i64> = x.iter().map(|v| ((v - r) / cs).floor() as i64).collect();
        let hi: Vec<i64> = x.iter().map(|v| ((v + r) / cs).floor() as i64).collect();
        let span: Vec<usize> = lo.iter().zip(&hi).map(|(a, b)| (b - a + 1) as usize).collect();
        let total: usize = span.iter().product();
        for flat in 0..total {
            let mut rem = flat;
            let mut cell = Vec::with_capacity(d);
            let mut dist2 = 0.0;
            for a in 0..d {
                let c = lo[a] + (rem % span[a]) as i64;
                rem /= span[a];
                // nearest point of the cell to x
                let near = x[a].clamp(c as f64 * cs, (c + 1) as f64 * cs);
                dist2 += (near - x[a]) * (near - x[a]);
                cell.push(c);
            }
            if dist2 <= r * r {
                self.reached.insert(cell);
            }
        }
    }

    /// Records a state if its cell is new; returns its id.
    fn add_node(&mut self, node: Node) -> Option<usize> {
        let cell = self.cell(&node.state);
        if self.cells.contains_key(&cell) {
            return None;
        }
        let id = self.nodes.len();
        self.closest = self.closest.min(norm(&diff(&node.state, &self.spec.y0)));
        self.cells.insert(cell.clone(), id);
        self.reached.insert(cell);
        let key = node.time + self.spec.heuristic_weight * norm(&diff(&node.state, &self.spec.y0)) / self.speed;
        self.heap.push(Queued { key, id });
        self.nodes.push(node);
        Some(id)
    }

    fn pieces_to(&self, id: usize) -> Vec<(f64, Vec<f64>)> {
        let mut chain = Vec::new();
        let mut cur = Some(id);
        while let Some(i) = cur {
            let n = &self.nodes[i];
            if n.parent.is_some() {
                chain.push((n.duration, n.control.clone()));
            }
            cur = n.parent;
        }
        chain.reverse();
        chain
    }

    /// Tries to finish from node `id`: shoot a constant control at `y0` over
    /// one to three windows, else accept the node if within tolerance.
    fn try_finish(&self, id: usize) -> Option<Vec<(f64, Vec<f64>)>> {
        let n = &self.nodes[id];
        if n.time > self.spec.horizon {
            return None;
        }
        let dist = norm(&diff(&n.state, &self.spec.y0));
        let tol = (1e-3 * self.spec.arrival_tol).min(1e-6);
        let base = self.field.base();
        for k in 1..=3 {
            let dur = k as f64 * self.spec.tau;
            if n.time + dur > self.spec.horizon || dist > (self.speed + self.shoot_cap) * dur {
                continue;
            }
            if let Some(c) = shoot(base, self.field, &n.state, &self.spec.y0, dur, self.shoot_cap, self.spec.step, tol) {
                let mut p = self.pieces_to(id);
                p.push((dur, c));
                return Some(p);
            }
        }
        (dist <= self.spec.arrival_tol).then(|| self.pieces_to(id))
    }

    /// Expands every queued state with `time + tau <= t_limit`, in queue
    /// order, without looking for the target. With `heuristic_weight = 0`
    /// this is `t_limit / tau` rounds of breadth-first expansion.
    pub fn explore(&mut self, t_limit: f64) {
        let mut deferred = Vec::new();
        while let Some(q) = self.heap.pop() {
            if self.nodes[q.id].time + self.spec.tau > t_limit {
                deferred.push(q);
                continue;
            }
            self.expand(q.id, false);
        }
        self.heap.extend(deferred);
    }

    /// Holds every control for `tau` from node `id`, then coasts. Returns
    /// the pieces of a finished path if `seek` and one is found.
    fn expand(&mut self, id: usize, seek: bool) -> Option<Vec<(f64, Vec<f64>)>> {
        self.expansions += 1;
        let spec = self.spec.clone();
        let base = self.field.base();
        let zero = vec![0.0; spec.x0.len()];
        let from = self.nodes[id].state.clone();
        let time = self.nodes[id].time;
        // each control window and its coast are independent; merge in order
        let runs: Vec<(Vec<f64>, Vec<Vec<f64>>)> = self
            .controls
            .par_iter()
            .map(|u| {
                let Some(end) = segment(base, self.field, &from, u, spec.tau, spec.step) else {
                    return (Vec::new(), Vec::new());
                };
                let mut coast = Vec::new();
                let mut x = end.clone();
                let mut last_cell = self.cell(&end);
                for _ in 0..spec.coast_factor {
                    let Some(nx) = segment(base, self.field, &x, &zero, spec.tau, spec.step) else { break };
                    let cell = self.cell(&nx);
                    // stop once the coast enters ground already covered
                    if cell != last_cell && self.cells.contains_key(&cell) {
                        break;
                    }
                    last_cell = cell;
                    coast.push(nx.clone());
                    x = nx;
                }
                (end, coast)
            })
            .collect();
        let tau = spec.tau;
        let r_ball = tau * self.nudge / 2.0;
        for (u, (end, coast)) in self.controls.clone().iter().zip(runs) {
            if end.is_empty() {
                continue;
            }
            self.mark_ball(&end, r_ball);
            let node = Node { state: end, time: time + tau, parent: Some(id), control: u.clone(), duration: tau };
            let Some(mut prev) = self.add_node(node) else { continue };
            if seek {
                if let Some(p) = self.try_finish(prev) {
                    return Some(p);
                }
            }
            for x in coast {
                let t = self.nodes[prev].time + tau;
                let node = Node { state: x, time: t, parent: Some(prev), control: zero.clone(), duration: tau };
                let Some(nid) = self.add_node(node) else { break };
                if seek {
                    if let Some(p) = self.try_finish(nid) {
                        return Some(p);
                    }
                }
                prev = nid;
            }
        }
        None
    }

    /// Runs the search until `y0` is reached or the budget runs out.
    pub fn run(&mut self) -> Result<ReachResult> {
        let spec = self.spec.clone();
        let base = self.field.base();
        let start_dist = norm(&diff(&spec.x0, &spec.y0));
        if start_dist <= spec.arrival_tol {
            return self.finish(Vec::new(), ReachStatus::Reached, "none");
        }
        // one constant control straight at the target
        let direct_t = start_dist / self.shoot_cap;
        if direct_t <= spec.horizon {
            let tol = (1e-3 * spec.arrival_tol).min(1e-6);
            if let Some(c) = shoot(base, self.field, &spec.x0, &spec.y0, direct_t, self.shoot_cap, spec.step, tol) {
                return self.finish(vec![(direct_t, c)], ReachStatus::Reached, "none");
            }
        }
        let exhausted;
        loop {
            let Some(Queued { id, .. }) = self.heap.pop() else {
                exhausted = "saturated";
                break;
            };
            if self.expansions >= spec.max_expansions {
                exhausted = "expansions";
                break;
            }
            if let Some(p) = self.expand(id, true) {
                return self.finish(p, ReachStatus::Reached, "none");
            }
        }
        // best effort: path to the closest recorded state
        let best = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].time <= spec.horizon)
            .min_by(|&a, &b| {
                let da = norm(&diff(&self.nodes[a].state, &spec.y0));
                let db = norm(&diff(&self.nodes[b].state, &spec.y0));
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap_or(0);
        let pieces = self.pieces_to(best);
        self.finish(pieces, ReachStatus::NotReached, exhausted)
    }

    fn finish(&self, pieces: Vec<(f64, Vec<f64>)>, status: ReachStatus, exhausted: &str) -> Result<ReachResult> {
        let schedule = ControlSchedule::from_pieces(&pieces);
        let sim = simulate(self.field.base(), self.field, &self.spec.x0, &schedule, self.spec.step)?;
        let arrival_error = norm(&diff(sim.trajectory.end(), &self.spec.y0));
        let status = if status == ReachStatus::Reached
            && arrival_error <= self.spec.arrival_tol
            && sim.composed_sup < self.spec.delta
        {
            ReachStatus::Reached
        } else {
            ReachStatus::NotReached
        };
        Ok(ReachResult {
            status,
            schedule,
            trajectory: sim.trajectory,
            arrival_error,
            expanded_cells: self.expansions,
            w_bound: self.w_bound,
            nudge: self.nudge,
            shoot_cap: self.shoot_cap,
            cell_size: self.cell_size,
            composed_sup_norm: sim.composed_sup,
            frontier: FrontierStats {
                nodes: self.nodes.len(),
                reached_cells: self.reached.len(),
                queued: self.heap.len(),
                closest_distance: self.closest,
                latest_time: self.nodes.iter().map(|n| n.time).fold(0.0, f64::max),
                exhausted: exhausted.to_string(),
            },
        })
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Plans a schedule carrying `spec.x0` to `spec.y0`.
pub fn plan_reach(field: &CorrectedField, spec: &ReachSpec) -> Result<ReachResult> {
    Planner::new(field, spec.clone())?.run()
}

struct Simulation {
    trajectory: Trajectory,
    composed_sup: f64,
}

/// Integrates `x' = V(x) + W(x) + u~(t)` piece by piece, recording one state
/// per piece and the largest `|W + u~|` seen at any RK4 stage.
fn simulate(base: &VectorField, w: &CorrectedField, x0: &[f64], schedule: &ControlSchedule, step: f64) -> Result<Simulation> {
    let peak = AtomicU64::new(0f64.to_bits());
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    for (dur, u) in schedule.pieces() {
        if u.len() != x.len() {
            return Err(dim_mismatch(x.len(), u.len()));
        }
        let f = Controlled { base, corrected: w, u: as3(u), peak: Some(&peak) };
        let (n, h) = step_plan(dur, step);
        for k in 0..n {
            if !rk4_step(&f, &mut x, h) {
                return Err(Error::Integration { t: t + (k + 1) as f64 * h, reason: "left the domain of W".into() });
            }
        }
        t += dur;
        times.push(t);
        states.push(x.clone());
    }
    Ok(Simulation {
        trajectory: Trajectory { times, states, field_id: "V + W(x) + u~".into() },
        composed_sup: f64::from_bits(peak.load(AtomicOrdering::Relaxed)),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verification {
    pub pass: bool,
    pub arrival_error: f64,
    pub composed_sup_norm: f64,
    pub arrival_ok: bool,
    pub bound_ok: bool,
}

/// Re-simulates `x' = V(x) + u(t)` with `u(t) = W(x(t)) + u~(t)` against the
/// original field `V` (taken from `w.base()`); passes iff the endpoint is
/// within `spec.arrival_tol` of `spec.y0` and `sup |u| < spec.delta`.
pub fn verify_schedule(w: &CorrectedField, schedule: &ControlSchedule, spec: &ReachSpec) -> Result<Verification> {
    spec.check()?;
    let sim = match simulate(w.base(), w, &spec.x0, schedule, spec.step) {
        Ok(s) => s,
        Err(Error::Integration { .. }) => {
            return Ok(Verification {
                pass: false,
                arrival_error: f64::INFINITY,
                composed_sup_norm: f64::INFINITY,
                arrival_ok: false,
                bound_ok: false,
            })
        }
        Err(e) => return Err(e),
    };
    let arrival_error = norm(&diff(sim.trajectory.end(), &spec.y0));
    let arrival_ok = arrival_error <= spec.arrival_tol;
    let bound_ok = sim.composed_sup < spec.delta;
    Ok(Verification { pass: arrival_ok && bound_ok, arrival_error, composed_sup_norm: sim.composed_sup, arrival_ok, bound_ok })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step1_radius_examples() {
        assert!((step1_ball_radius(0.1, 0.3, 0.1).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(step1_ball_radius(1.0, 1.0, 0.0).unwrap(), 0.5);
        assert!(step1_ball_radius(1.0, 0.3, 0.3).is_err());
    }

    #[test]
    fn compass_sizes() {
        assert_eq!(compass(2).len(), 8);
        assert_eq!(compass(3).len(), 26);
    }

    #[test]
    fn same_point_needs_no_control() {
        let f = CorrectedField::uncorrected(VectorField::zero(2), "zero");
        let spec = ReachSpec::new(vec![0.3, 0.4], vec![0.3, 0.4], 0.3, 0.1);
        let r = plan_reach(&f, &spec).unwrap();
        assert_eq!(r.status, ReachStatus::Reached);
        assert!(r.schedule.is_empty());
        assert_eq!(r.arrival_error, 0.0);
        assert!(verify_schedule(&f, &r.schedule, &spec).unwrap().pass);
    }

    #[test]
    fn pure_control_goes_straight() {
        let f = CorrectedField::uncorrected(VectorField::zero(2), "zero");
        let spec = ReachSpec::new(vec![0.0, 0.0], vec![1.0, 0.0], 0.3, 0.01);
        let r = plan_reach(&f, &spec).unwrap();
        assert_eq!(r.status, ReachStatus::Reached);
        assert_eq!(r.schedule.values.len(), 1);
        assert!((r.schedule.values[0][0] - 0.25).abs() < 1e-12 && r.schedule.values[0][1].abs() < 1e-12);
        assert!((r.schedule.duration() - 4.0).abs() < 1e-12);
        assert!(r.arrival_error < 1e-9);
    }

    #[test]
    fn perturbed_schedule_fails_verification() {
        let f = CorrectedField::uncorrected(VectorField::zero(2), "zero");
        let spec = ReachSpec::new(vec![0.0, 0.0], vec![1.0, 0.0], 0.3, 0.01);
        let r = plan_reach(&f, &spec).unwrap();
        let mut bad = r.schedule.clone();
        let t = bad.duration();
        bad.values[0][1] += 2.0 * spec.arrival_tol / t;
        let v = verify_schedule(&f, &bad, &spec).unwrap();
        assert!(!v.pass);
        assert!((v.arrival_error - 2.0 * spec.arrival_tol).abs() < 1e-9);
    }

    #[test]
    fn oversized_corrector_is_rejected() {
        let f = CorrectedField::uncorrected(VectorField::zero(2), "zero");
        let spec = ReachSpec::new(vec![0.0, 0.0], vec![1.0, 0.0], 0.3, 0.01);
        assert!(Planner::new(&f, spec).is_ok());
        let mut bad = ReachSpec::new(vec![0.0, 0.0], vec![1.0, 0.0], 0.3, 0.01);
        bad.budget_split = 1.0;
        assert!(matches!(plan_reach(&f, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn three_rounds_cover_the_pure_control_ball() {
        let f = CorrectedField::uncorrected(VectorField::zero(2), "zero");
        let mut spec = ReachSpec::new(vec![0.0, 0.0], vec![50.0, 0.0], 0.3, 0.01);
        spec.heuristic_weight = 0.0;
        let nudge = 0.5 * spec.budget_split * spec.delta;
        let s = spec.tau * nudge;
        spec.cell_size = Some(s / 4.0);
        let mut p = Planner::new(&f, spec.clone()).unwrap();
        p.explore(3.0 * spec.tau);
        let radius = 3.0 * s * (1.0 - 0.25);
        for i in 0..=40 {
            let r = radius * i as f64 / 40.0;
            for k in 0..90 {
                let (sn, cs) = (std::f64::consts::TAU * k as f64 / 90.0).sin_cos();
                assert!(p.is_reached(&[r * cs, r * sn]), "r={r} angle={k}");
            }
        }
        // nothing beyond three full nudges plus the marked ball
        assert!(!p.is_reached(&[3.0 * s + s / 2.0 + 2.0 * s / 4.0, 0.0]));
    }

    #[test]
    fn longer_horizon_keeps_success() {
        let f = CorrectedField::uncorrected(VectorField::circular(), "circular");
        let mut spec = ReachSpec::new(vec![1.0, 0.0], vec![-1.5, 0.5], 0.3, 0.05);
        spec.max_expansions = 2000;
        let mut reached_before = false;
        for h in [2.0, 4.0, 8.0, 16.0, 32.0] {
            spec.horizon = h;
            let r = plan_reach(&f, &spec).unwrap();
            let reached = r.status == ReachStatus::Reached;
            assert!(reached || !reached_before, "lost success at horizon {h}");
            if reached {
                assert!(r.schedule.duration() <= h + 1e-9);
                assert!(verify_schedule(&f, &r.schedule, &spec).unwrap().pass);
            }
            reached_before |= reached;
        }
        assert!(reached_before);
    }

    #[test]
    fn planning_is_deterministic() {
        let f = CorrectedField::uncorrected(VectorField::circular(), "circular");
        let mut spec = ReachSpec::new(vec![1.0, 0.0], vec![-2.0, 1.0], 0.2, 0.05);
        spec.max_expansions = 80;
        let a = plan_reach(&f, &spec).unwrap();
        let b = plan_reach(&f, &spec).unwrap();
        assert_eq!(a.schedule, b.schedule);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.expanded_cells, b.expanded_cells);
    }
}
