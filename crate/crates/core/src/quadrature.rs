//! Quadrature building blocks: Gauss–Legendre rules, composite panels,
//! adaptive Gauss–Kronrod and product rules on the unit sphere.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on the three-term recurrence, started from the
    /// Chebyshev-like initial guess. Accurate to a few ulp up to n ~ 500.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss–Legendre points on `[a, b]` split into `panels` equal pieces.
pub fn composite_nodes(rule: &GaussLegendre, a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * rule.len());
    for k in 0..panels {
        let lo = a + k as f64 * width;
        out.extend(rule.mapped(lo, lo + width));
    }
    out
}

/// Number of panels needed so that an `n`-point rule resolves oscillations of
/// angular wavenumber `k` over a length `len`.
pub fn panels_for(len: f64, k: f64, n: usize) -> usize {
    if k <= 0.0 || len <= 0.0 {
        return 1;
    }
    // an n-point rule handles roughly k*width <= n/2 comfortably
    let width = 0.5 * n as f64 / k;
    ((len / width).ceil() as usize).max(1)
}

// G7-K15 abscissae and weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod (G7/K15) with interval bisection.
///
/// Returns `(value, error_estimate)`.
pub fn adaptive<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> (f64, f64) {
    let (v0, e0) = gk15(&mut f, a, b);
    let mut intervals = vec![(a, b, v0, e0)];
    let mut total = v0;
    let mut err = e0;
    let mut iters = 0;
    while err > abs_tol.max(rel_tol * total.abs()) && iters < 2000 {
        iters += 1;
        let (idx, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty interval list");
        let (lo, hi, v, e) = intervals.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&mut f, lo, mid);
        let (v2, e2) = gk15(&mut f, mid, hi);
        total += v1 + v2 - v;
        err += e1 + e2 - e;
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
    let total: f64 = intervals.iter().map(|i| i.2).sum();
    let err: f64 = intervals.iter().map(|i| i.3).sum();
    (total, err)
}

/// A quadrature rule on the unit sphere `S^{d-1}`: unit directions and weights
/// summing to the sphere's surface measure.
#[derive(Clone, Debug)]
pub struct SphereRule {
    pub dim: usize,
    pub dirs: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    /// `n` equally spaced angles (d = 2) or a latitude–longitude product rule
    /// with `n` Gauss–Legendre latitudes and `2n` longitudes (d = 3).
    pub fn new(dim: usize, n: usize) -> Self {
        let n = n.max(1);
        let mut dirs = Vec::new();
        let mut weights = Vec::new();
        match dim {
            2 => {
                let w = 2.0 * PI / n as f64;
                for k in 0..n {
                    let t = 2.0 * PI * k as f64 / n as f64;
                    dirs.push([t.cos(), t.sin(), 0.0]);
                    weights.push(w);
                }
            }
            3 => {
                let gl = GaussLegendre::new(n);
                let m = 2 * n;
                let wphi = 2.0 * PI / m as f64;
                for (ct, wt) in gl.nodes.iter().zip(&gl.weights) {
                    let st = (1.0 - ct * ct).max(0.0).sqrt();
                    for k in 0..m {
                        let phi = 2.0 * PI * (k as f64 + 0.5) / m as f64;
                        dirs.push([st * phi.cos(), st * phi.sin(), *ct]);
                        weights.push(wt * wphi);
                    }
                }
            }
            _ => panic!("sphere rules exist for d = 2 or 3 only"),
        }
        Self { dim, dirs, weights }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }
}

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / d as f64 * unit_ball_volume(d - 2),
    }
}

/// Surface measure of the unit sphere `S^{d-1}`, i.e. `d * omega_d`.
pub fn unit_sphere_area(d: usize) -> f64 {
    d as f64 * unit_ball_volume(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in [1, 2, 5, 16, 33] {
            let gl = GaussLegendre::new(n);
            let wsum: f64 = gl.weights.iter().sum();
            assert!((wsum - 2.0).abs() < 1e-13, "n={n}");
            // x^(2n-2) over [-1,1] = 2/(2n-1)
            let k = 2 * n - 2;
            let v = gl.integrate(-1.0, 1.0, |x| x.powi(k as i32));
            assert!((v - 2.0 / (k as f64 + 1.0)).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn adaptive_handles_endpoint_singularity() {
        let (v, e) = adaptive(|x: f64| 1.0 / x.sqrt(), 0.0, 1.0, 1e-10, 1e-12);
        assert!((v - 2.0).abs() < 1e-8, "v={v} e={e}");
    }

    #[test]
    fn sphere_rules_have_correct_area() {
        let r2 = SphereRule::new(2, 17);
        assert!((r2.weights.iter().sum::<f64>() - 2.0 * PI).abs() < 1e-12);
        let r3 = SphereRule::new(3, 12);
        assert!((r3.weights.iter().sum::<f64>() - 4.0 * PI).abs() < 1e-12);
        // second moment of z^2 over S^2 = 4pi/3
        let m: f64 = r3.dirs.iter().zip(&r3.weights).map(|(d, w)| w * d[2] * d[2]).sum();
        assert!((m - 4.0 * PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unit_ball_volumes() {
        assert!((unit_ball_volume(2) - PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-15);
        assert!((unit_sphere_area(3) - 4.0 * PI).abs() < 1e-14);
    }
}
