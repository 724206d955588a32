//! Velocity fields: declarative specs, evaluation and finite-difference
//! derivatives.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{dim_mismatch, Error, Result};

/// Default central-difference step, in field length units.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Anything that can be sampled as a vector field on `R^d`.
///
/// `eval_into` is the hot path: it writes `dim()` components into `out` and
/// must not allocate.
pub trait Field: Sync {
    fn dim(&self) -> usize;
    fn eval_into(&self, x: &[f64], out: &mut [f64]);
    /// Upper bound on `|F(x)|`; `f64::INFINITY` for unbounded test fields.
    fn sup_bound(&self) -> f64;
}

impl<T: Field + ?Sized> Field for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval_into(x, out)
    }
    fn sup_bound(&self) -> f64 {
        (**self).sup_bound()
    }
}

/// Field kinds accepted in JSON specs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Zero,
    Constant,
    ShearSin,
    TaylorGreen,
    Linear,
    Grid,
    Sum,
    Scaled,
    Dilated,
}

/// Serializable description of a field: `{"kind", "dim", "params"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub kind: FieldKind,
    pub dim: usize,
    #[serde(default)]
    pub params: Value,
}

impl FieldSpec {
    pub fn new(kind: FieldKind, dim: usize, params: Value) -> Self {
        Self { kind, dim, params }
    }
}

/// Node values of a field sampled on a regular grid, tiled periodically.
#[derive(Clone, Debug)]
pub struct GridField {
    dim: usize,
    origin: Vec<f64>,
    spacing: Vec<f64>,
    counts: Vec<usize>,
    /// `dim` components per node, last axis fastest.
    values: Vec<f64>,
    sup: f64,
}

impl GridField {
    pub fn new(origin: Vec<f64>, spacing: Vec<f64>, counts: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let dim = origin.len();
        if !(2..=3).contains(&dim) || spacing.len() != dim || counts.len() != dim {
            return Err(Error::Input("grid field needs consistent dimension 2 or 3".into()));
        }
        if spacing.iter().any(|h| !(*h > 0.0)) || counts.iter().any(|&n| n < 2) {
            return Err(Error::Input("grid field needs positive spacing and >= 2 nodes per axis".into()));
        }
        let nodes: usize = counts.iter().product();
        if values.len() != nodes * dim {
            return Err(Error::Input(format!(
                "grid field expects {} values, got {}",
                nodes * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("grid field values must be finite".into()));
        }
        let sup = values
            .chunks(dim)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Ok(Self { dim, origin, spacing, counts, values, sup })
    }

    /// Reads `x1,...,xd,v1,...,vd` rows covering a full tensor grid.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let ncol = headers.len();
        if ncol % 2 != 0 || ncol < 4 {
            return Err(Error::Input("grid csv header must be x1..xd,v1..vd".into()));
        }
        let dim = ncol / 2;
        for (i, h) in headers.iter().enumerate() {
            let want = if i < dim { format!("x{}", i + 1) } else { format!("v{}", i - dim + 1) };
            if h.trim() != want {
                return Err(Error::Input(format!("grid csv header column {i}: expected {want}, got {h}")));
            }
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Input(format!("bad number {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != ncol {
                return Err(Error::Input("ragged grid csv row".into()));
            }
            rows.push(row);
        }
        let mut axes: Vec<Vec<f64>> = vec![Vec::new(); dim];
        for row in &rows {
            for a in 0..dim {
                axes[a].push(row[a]);
            }
        }
        for ax in axes.iter_mut() {
            ax.sort_by(f64::total_cmp);
            ax.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let counts: Vec<usize> = axes.iter().map(Vec::len).collect();
        let origin: Vec<f64> = axes.iter().map(|a| a[0]).collect();
        let mut spacing = Vec::with_capacity(dim);
        for ax in &axes {
            if ax.len() < 2 {
                return Err(Error::Input("grid csv needs >= 2 nodes per axis".into()));
            }
            let h = (ax[ax.len() - 1] - ax[0]) / (ax.len() - 1) as f64;
            if ax.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-6 * h) {
                return Err(Error::Input("grid csv axis is not uniformly spaced".into()));
            }
            spacing.push(h);
        }
        let nodes: usize = counts.iter().product();
        if rows.len() != nodes {
            return Err(Error::Input(format!("grid csv has {} rows, tensor grid needs {nodes}", rows.len())));
        }
        let mut values = vec![f64::NAN; nodes * dim];
        for row in &rows {
            let mut flat = 0;
            for a in 0..dim {
                let i = ((row[a] - origin[a]) / spacing[a]).round() as usize;
                flat = flat * counts[a] + i;
            }
            values[flat * dim..(flat + 1) * dim].copy_from_slice(&row[dim..]);
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Input("grid csv has duplicate or missing nodes".into()));
        }
        Self::new(origin, spacing, counts, values)
    }

    fn node(&self, idx: &[usize]) -> &[f64] {
        let mut flat = 0;
        for a in 0..self.dim {
            flat = flat * self.counts[a] + idx[a];
        }
        &self.values[flat * self.dim..(flat + 1) * self.dim]
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..d {
            let n = self.counts[a];
            let u = (x[a] - self.origin[a]) / self.spacing[a];
            let fl = u.floor();
            frac[a] = u - fl;
            let i = (fl as i64).rem_euclid(n as i64) as usize;
            base[a] = i;
            next[a] = (i + 1) % n;
        }
        out[..d].iter_mut().for_each(|o| *o = 0.0);
        let mut idx = [0usize; 3];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    idx[a] = next[a];
                    w *= frac[a];
                } else {
                    idx[a] = base[a];
                    w *= 1.0 - frac[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            for (o, v) in out[..d].iter_mut().zip(self.node(&idx[..d])) {
                *o += w * v;
            }
        }
    }
}

/// A velocity field on `R^d`.
#[derive(Clone, Debug)]
pub enum VectorField {
    Constant(Vec<f64>),
    /// `(0, a sin(k x1))`, padded with a zero third component in d = 3.
    ShearSin { dim: usize, amplitude: f64, wavenumber: f64 },
    /// `a (-sin x1 cos x2, cos x1 sin x2)`.
    TaylorGreen { amplitude: f64 },
    /// `A x`; unbounded, for tests and diagnostics only.
    Linear { matrix: Vec<Vec<f64>> },
    Grid(GridField),
    Sum(Vec<VectorField>),
    Scaled { factor: f64, field: Box<VectorField> },
    /// `x -> F(factor * x)`.
    Dilated { factor: f64, field: Box<VectorField> },
}

impl VectorField {
    pub fn zero(dim: usize) -> Self {
        Self::Constant(vec![0.0; dim])
    }

    pub fn shear_sin() -> Self {
        Self::ShearSin { dim: 2, amplitude: 1.0, wavenumber: 1.0 }
    }

    pub fn taylor_green() -> Self {
        Self::TaylorGreen { amplitude: 1.0 }
    }

    /// Rigid rotation `(-x2, x1)`.
    pub fn circular() -> Self {
        Self::Linear { matrix: vec![vec![0.0, -1.0], vec![1.0, 0.0]] }
    }

    /// `F(x) = x`, the canonical compressible test field.
    pub fn identity(dim: usize) -> Self {
        let matrix = (0..dim).map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self::Linear { matrix }
    }

    pub fn sum(terms: Vec<VectorField>) -> Result<Self> {
        let d = terms.first().map(|t| t.dim()).ok_or_else(|| Error::Input("empty sum".into()))?;
        if let Some(t) = terms.iter().find(|t| t.dim() != d) {
            return Err(dim_mismatch(d, t.dim()));
        }
        Ok(Self::Sum(terms))
    }

    pub fn scaled(factor: f64, field: VectorField) -> Self {
        Self::Scaled { factor, field: Box::new(field) }
    }

    pub fn dilated(factor: f64, field: VectorField) -> Self {
        Self::Dilated { factor, field: Box::new(field) }
    }

    /// Resolves a short name used on the command line: `zero`, `shear_sin`,
    /// `taylor_green`, `circular`, `identity`, `constant:c1,c2[,c3]`, or a path
    /// to a JSON spec file.
    pub fn from_name(name: &str, dim: usize) -> Result<Self> {
        match name {
            "zero" => Ok(Self::zero(dim)),
            "shear_sin" => Ok(Self::ShearSin { dim, amplitude: 1.0, wavenumber: 1.0 }),
            "taylor_green" => Ok(Self::taylor_green()),
            "circular" => Ok(Self::circular()),
            "identity" => Ok(Self::identity(dim)),
            _ => {
                if let Some(rest) = name.strip_prefix("constant:") {
                    let c = parse_point(rest)?;
                    return Ok(Self::Constant(c));
                }
                let path = Path::new(name);
                if path.exists() {
                    let text = std::fs::read_to_string(path)?;
                    let spec: FieldSpec = serde_json::from_str(&text)?;
                    return Self::from_spec(&spec, path.parent());
                }
                Err(Error::Input(format!("unknown field {name:?}")))
            }
        }
    }

    /// Builds a field from its declarative spec. Relative CSV paths of grid
    /// fields are resolved against `base_dir`.
    pub fn from_spec(spec: &FieldSpec, base_dir: Option<&Path>) -> Result<Self> {
        let d = spec.dim;
        if d == 0 {
            return Err(Error::Input("field dimension must be positive".into()));
        }
        let p = &spec.params;
        let num = |key: &str, default: f64| -> Result<f64> {
            match p.get(key) {
                None | Some(Value::Null) => Ok(default),
                Some(v) => v.as_f64().ok_or_else(|| Error::Input(format!("param {key} must be a number"))),
            }
        };
        let field = match spec.kind {
            FieldKind::Zero => Self::zero(d),
            FieldKind::Constant => {
                let c: Vec<f64> = serde_json::from_value(p.get("value").cloned().unwrap_or(Value::Null))
                    .map_err(|e| Error::Input(format!("constant field needs params.value: {e}")))?;
                Self::Constant(c)
            }
            FieldKind::ShearSin => {
                if !(2..=3).contains(&d) {
                    return Err(Error::Input("shear_sin is defined for d = 2 or 3".into()));
                }
                Self::ShearSin { dim: d, amplitude: num("amplitude", 1.0)?, wavenumber: num("wavenumber", 1.0)? }
            }
            FieldKind::TaylorGreen => {
                if d != 2 {
                    return Err(Error::Input("taylor_green is defined for d = 2".into()));
                }
                Self::TaylorGreen { amplitude: num("amplitude", 1.0)? }
            }
            FieldKind::Linear => {
                let m: Vec<Vec<f64>> = serde_json::from_value(p.get("matrix").cloned().unwrap_or(Value::Null))
                    .map_err(|e| Error::Input(format!("linear field needs params.matrix: {e}")))?;
                if m.len() != d || m.iter().any(|r| r.len() != d) {
                    return Err(Error::Input("linear field matrix must be d x d".into()));
                }
                Self::Linear { matrix: m }
            }
            FieldKind::Grid => {
                let rel = p
                    .get("path")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::Input("grid field needs params.path".into()))?;
                let path = match base_dir {
                    Some(b) if Path::new(rel).is_relative() => b.join(rel),
                    _ => Path::new(rel).to_path_buf(),
                };
                Self::Grid(GridField::from_csv(&path)?)
            }
            FieldKind::Sum => {
                let terms: Vec<FieldSpec> = serde_json::from_value(p.get("terms").cloned().unwrap_or(Value::Null))
                    .map_err(|e| Error::Input(format!("sum field needs params.terms: {e}")))?;
                let terms = terms.iter().map(|t| Self::from_spec(t, base_dir)).collect::<Result<Vec<_>>>()?;
                Self::sum(terms)?
            }
            FieldKind::Scaled | FieldKind::Dilated => {
                let inner: FieldSpec = serde_json::from_value(p.get("field").cloned().unwrap_or(Value::Null))
                    .map_err(|e| Error::Input(format!("{:?} field needs params.field: {e}", spec.kind)))?;
                let inner = Self::from_spec(&inner, base_dir)?;
                let factor = num("factor", f64::NAN)?;
                if !factor.is_finite() {
                    return Err(Error::Input("params.factor must be a finite number".into()));
                }
                if spec.kind == FieldKind::Scaled {
                    Self::scaled(factor, inner)
                } else {
                    Self::dilated(factor, inner)
                }
            }
        };
        if field.dim() != d {
            return Err(dim_mismatch(d, field.dim()));
        }
        Ok(field)
    }

    /// Lipschitz estimate, when one is known in closed form.
    pub fn lip_bound(&self) -> Option<f64> {
        match self {
            Self::Constant(_) => Some(0.0),
            Self::ShearSin { amplitude, wavenumber, .. } => Some((amplitude * wavenumber).abs()),
            Self::TaylorGreen { amplitude } => Some(amplitude.abs() * 2f64.sqrt()),
            Self::Linear { matrix } => Some(matrix.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()),
            Self::Grid(_) => None,
            Self::Sum(ts) => ts.iter().map(Self::lip_bound).sum(),
            Self::Scaled { factor, field } => field.lip_bound().map(|l| l * factor.abs()),
            Self::Dilated { factor, field } => field.lip_bound().map(|l| l * factor.abs()),
        }
    }

    /// Largest spatial angular wavenumber present in the field. Quadrature
    /// rules use it to size panels on long intervals and large circles.
    pub fn wavenumber_bound(&self) -> f64 {
        match self {
            Self::Constant(_) | Self::Linear { .. } => 0.0,
            Self::ShearSin { wavenumber, .. } => wavenumber.abs(),
            Self::TaylorGreen { .. } => 2f64.sqrt(),
            Self::Grid(g) => {
                let hmin = g.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
                PI / hmin * (g.dim as f64).sqrt()
            }
            Self::Sum(ts) => ts.iter().map(Self::wavenumber_bound).fold(0.0, f64::max),
            Self::Scaled { field, .. } => field.wavenumber_bound(),
            Self::Dilated { factor, field } => factor.abs() * field.wavenumber_bound(),
        }
    }

    /// `true` for the built-ins whose divergence vanishes identically.
    pub fn is_incompressible_builtin(&self) -> bool {
        match self {
            Self::Constant(_) | Self::ShearSin { .. } | Self::TaylorGreen { .. } => true,
            Self::Linear { matrix } => (0..matrix.len()).map(|i| matrix[i][i]).sum::<f64>() == 0.0,
            Self::Grid(_) => false,
            Self::Sum(ts) => ts.iter().all(Self::is_incompressible_builtin),
            Self::Scaled { field, .. } | Self::Dilated { field, .. } => field.is_incompressible_builtin(),
        }
    }
}

impl Field for VectorField {
    fn dim(&self) -> usize {
        match self {
            Self::Constant(c) => c.len(),
            Self::ShearSin { dim, .. } => *dim,
            Self::TaylorGreen { .. } => 2,
            Self::Linear { matrix } => matrix.len(),
            Self::Grid(g) => g.dim,
            Self::Sum(ts) => ts[0].dim(),
            Self::Scaled { field, .. } | Self::Dilated { field, .. } => field.dim(),
        }
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Constant(c) => out[..c.len()].copy_from_slice(c),
            Self::ShearSin { dim, amplitude, wavenumber } => {
                out[0] = 0.0;
                out[1] = amplitude * (wavenumber * x[0]).sin();
                if *dim == 3 {
                    out[2] = 0.0;
                }
            }
            Self::TaylorGreen { amplitude } => {
                let (s1, c1) = x[0].sin_cos();
                let (s2, c2) = x[1].sin_cos();
                out[0] = -amplitude * s1 * c2;
                out[1] = amplitude * c1 * s2;
            }
            Self::Linear { matrix } => {
                for (o, row) in out.iter_mut().zip(matrix) {
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Self::Grid(g) => g.eval_into(x, out),
            Self::Sum(ts) => {
                let d = ts[0].dim();
                let mut tmp = [0.0; 3];
                out[..d].iter_mut().for_each(|o| *o = 0.0);
                for t in ts {
                    t.eval_into(x, &mut tmp[..d]);
                    for (o, v) in out[..d].iter_mut().zip(&tmp[..d]) {
                        *o += v;
                    }
                }
            }
            Self::Scaled { factor, field } => {
                let d = field.dim();
                field.eval_into(x, out);
                out[..d].iter_mut().for_each(|o| *o *= factor);
            }
            Self::Dilated { factor, field } => {
                let d = field.dim();
                let mut y = [0.0; 3];
                for (yi, xi) in y[..d].iter_mut().zip(x) {
                    *yi = factor * xi;
                }
                field.eval_into(&y[..d], out);
            }
        }
    }

    fn sup_bound(&self) -> f64 {
        match self {
            Self::Constant(c) => c.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Self::ShearSin { amplitude, .. } | Self::TaylorGreen { amplitude } => amplitude.abs(),
            Self::Linear { matrix } => {
                if matrix.iter().flatten().all(|v| *v == 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Self::Grid(g) => g.sup,
            Self::Sum(ts) => ts.iter().map(|t| t.sup_bound()).sum(),
            Self::Scaled { factor, field } => factor.abs() * field.sup_bound(),
            Self::Dilated { field, .. } => field.sup_bound(),
        }
    }
}

/// Parses `"a,b,c"` into a point.
pub fn parse_point(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Input(format!("bad coordinate {t:?}: {e}"))))
        .collect()
}

/// Evaluates `field` at `x`, checking dimensions and finiteness.
pub fn eval_field<F: Field + ?Sized>(field: &F, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != field.dim() {
        return Err(dim_mismatch(field.dim(), x.len()));
    }
    let mut out = vec![0.0; x.len()];
    field.eval_into(x, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model(format!("field returned a non-finite value at {x:?}")));
    }
    Ok(out)
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("finite-difference step must be positive, got {h}")))
    }
}

/// Central-difference divergence.
pub fn divergence_fd<F: Field + ?Sized>(field: &F, x: &[f64], h: f64) -> Result<f64> {
    check_step(h)?;
    let d = field.dim();
    if x.len() != d {
        return Err(dim_mismatch(d, x.len()));
    }
    let mut y = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let mut div = 0.0;
    for i in 0..d {
        y[i] = x[i] + h;
        field.eval_into(&y, &mut fp);
        y[i] = x[i] - h;
        field.eval_into(&y, &mut fm);
        y[i] = x[i];
        div += (fp[i] - fm[i]) / (2.0 * h);
    }
    Ok(div)
}

/// Central-difference Jacobian; row `i` is the gradient of component `i`.
pub fn jacobian_fd<F: Field + ?Sized>(field: &F, x: &[f64], h: f64) -> Result<Vec<Vec<f64>>> {
    check_step(h)?;
    let d = field.dim();
    if x.len() != d {
        return Err(dim_mismatch(d, x.len()));
    }
    let mut jac = vec![vec![0.0; d]; d];
    let mut y = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    for j in 0..d {
        y[j] = x[j] + h;
        field.eval_into(&y, &mut fp);
        y[j] = x[j] - h;
        field.eval_into(&y, &mut fm);
        y[j] = x[j];
        for i in 0..d {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// The partial derivative `dF/dx_axis`, itself a vector field, by central
/// differences.
pub struct PartialField<'a, F: Field + ?Sized> {
    pub base: &'a F,
    pub axis: usize,
    pub step: f64,
}

impl<F: Field + ?Sized> Field for PartialField<'_, F> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.base.dim();
        let mut y = [0.0; 3];
        let mut fm = [0.0; 3];
        y[..d].copy_from_slice(&x[..d]);
        y[self.axis] = x[self.axis] - self.step;
        self.base.eval_into(&y[..d], &mut fm[..d]);
        y[self.axis] = x[self.axis] + self.step;
        self.base.eval_into(&y[..d], out);
        for (o, m) in out[..d].iter_mut().zip(&fm[..d]) {
            *o = (*o - m) / (2.0 * self.step);
        }
    }

    fn sup_bound(&self) -> f64 {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn eval_examples() {
        let s = VectorField::shear_sin();
        assert_eq!(eval_field(&s, &[0.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        let c = VectorField::Constant(vec![1.0, 0.0]);
        assert_eq!(eval_field(&c, &[3.0, -7.0]).unwrap(), vec![1.0, 0.0]);
        let tg = VectorField::taylor_green();
        assert!(close(&eval_field(&tg, &[FRAC_PI_2, 0.0]).unwrap(), &[-1.0, 0.0], 1e-15));
    }

    #[test]
    fn eval_rejects_wrong_dimension() {
        let s = VectorField::shear_sin();
        assert!(matches!(eval_field(&s, &[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn divergence_examples() {
        let tg = VectorField::taylor_green();
        assert!(divergence_fd(&tg, &[0.7, 1.3], 1e-4).unwrap().abs() < 1e-6);
        let c = VectorField::Constant(vec![0.3, -2.0]);
        assert_eq!(divergence_fd(&c, &[1.0, 2.0], 1e-4).unwrap(), 0.0);
        let comp = VectorField::Linear { matrix: vec![vec![1.0, 0.0], vec![0.0, 0.0]] };
        assert!((divergence_fd(&comp, &[0.4, 9.0], 1e-4).unwrap() - 1.0).abs() < 1e-6);
        assert!(divergence_fd(&comp, &[0.4, 9.0], 0.0).is_err());
    }

    #[test]
    fn jacobian_examples() {
        let s = VectorField::shear_sin();
        let j = jacobian_fd(&s, &[0.0, 0.0], 1e-4).unwrap();
        assert!(close(&j[0], &[0.0, 0.0], 1e-6) && close(&j[1], &[1.0, 0.0], 1e-6));
        let c = VectorField::Constant(vec![1.0, 1.0]);
        let j = jacobian_fd(&c, &[2.0, 3.0], 1e-4).unwrap();
        assert!(j.iter().flatten().all(|v| *v == 0.0));
        let tg = VectorField::taylor_green();
        let j = jacobian_fd(&tg, &[0.0, 0.0], 1e-4).unwrap();
        assert!(close(&j[0], &[-1.0, 0.0], 1e-6) && close(&j[1], &[0.0, 1.0], 1e-6));
    }

    #[test]
    fn builtins_are_divergence_free_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fields = [
            VectorField::shear_sin(),
            VectorField::taylor_green(),
            VectorField::Constant(vec![0.2, -0.9]),
            VectorField::sum(vec![VectorField::shear_sin(), VectorField::taylor_green()]).unwrap(),
        ];
        for (k, f) in fields.iter().enumerate() {
            let tol = if k == 3 { 2e-6 } else { 1e-6 };
            for _ in 0..10_000 {
                let x = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
                assert!(divergence_fd(f, &x, 1e-4).unwrap().abs() <= tol);
            }
        }
    }

    #[test]
    fn sum_is_exact_pointwise() {
        let a = VectorField::shear_sin();
        let b = VectorField::taylor_green();
        let s = VectorField::sum(vec![a.clone(), b.clone()]).unwrap();
        let x = [0.37, -2.2];
        let va = eval_field(&a, &x).unwrap();
        let vb = eval_field(&b, &x).unwrap();
        let vs = eval_field(&s, &x).unwrap();
        assert_eq!(vs, vec![va[0] + vb[0], va[1] + vb[1]]);
    }

    #[test]
    fn spec_roundtrip_through_json() {
        let json = r#"{"kind":"sum","dim":2,"params":{"terms":[
            {"kind":"shear_sin","dim":2},
            {"kind":"scaled","dim":2,"params":{"factor":0.5,"field":{"kind":"taylor_green","dim":2}}}]}}"#;
        let spec: FieldSpec = serde_json::from_str(json).unwrap();
        let f = VectorField::from_spec(&spec, None).unwrap();
        let v = eval_field(&f, &[FRAC_PI_2, 0.0]).unwrap();
        assert!(close(&v, &[-0.5, 1.0], 1e-15));
        assert_eq!(f.sup_bound(), 1.5);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let spec = FieldSpec::new(FieldKind::TaylorGreen, 3, Value::Null);
        assert!(VectorField::from_spec(&spec, None).is_err());
        let spec = FieldSpec::new(FieldKind::Constant, 2, serde_json::json!({"value": [1.0, 2.0, 3.0]}));
        assert!(VectorField::from_spec(&spec, None).is_err());
    }

    #[test]
    fn grid_field_interpolates_and_tiles() {
        // nodes of sin on a 2pi-periodic lattice
        let n = 64;
        let h = 2.0 * PI / n as f64;
        let mut values = Vec::new();
        for i in 0..n {
            for _j in 0..n {
                values.push(0.0);
                values.push((i as f64 * h).sin());
            }
        }
        let g = VectorField::Grid(GridField::new(vec![0.0, 0.0], vec![h, h], vec![n, n], values).unwrap());
        let x = [1.234, 0.5];
        let v = eval_field(&g, &x).unwrap();
        assert!((v[1] - 1.234f64.sin()).abs() < h * h);
        let shifted = eval_field(&g, &[x[0] + 2.0 * PI * 3.0, x[1] - 2.0 * PI]).unwrap();
        assert!((shifted[1] - v[1]).abs() < 1e-12);
        // exact at nodes
        let v = eval_field(&g, &[5.0 * h, 0.0]).unwrap();
        assert!((v[1] - (5.0 * h).sin()).abs() < 1e-14);
    }

    #[test]
    fn grid_field_reads_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let mut text = String::from("x1,x2,v1,v2\n");
        for i in 0..3 {
            for j in 0..4 {
                text.push_str(&format!("{},{},{},{}\n", i as f64 * 0.5, j as f64, i as f64, -(j as f64)));
            }
        }
        std::fs::write(&path, text).unwrap();
        let spec = FieldSpec::new(FieldKind::Grid, 2, serde_json::json!({"path": "g.csv"}));
        let f = VectorField::from_spec(&spec, Some(dir.path())).unwrap();
        let v = eval_field(&f, &[0.25, 1.5]).unwrap();
        assert!(close(&v, &[0.5, -1.5], 1e-12));
    }

    #[test]
    fn sampled_norms_respect_sup_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fields = [
            VectorField::shear_sin(),
            VectorField::taylor_green(),
            VectorField::scaled(-2.5, VectorField::taylor_green()),
            VectorField::sum(vec![VectorField::shear_sin(), VectorField::Constant(vec![0.1, 0.2])]).unwrap(),
        ];
        for f in &fields {
            let bound = f.sup_bound() * (1.0 + 1e-12);
            for _ in 0..100_000 {
                let x = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
                let v = eval_field(f, &x).unwrap();
                assert!(v.iter().map(|c| c * c).sum::<f64>().sqrt() <= bound);
            }
        }
    }
}
