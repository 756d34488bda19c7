//! Periodic coefficient tensors `a_ij^{ab}(y)` evaluated at `y = x / eps mod 1`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsfemError, Result};
use crate::mesh::Point;

/// Spatial dimension.
pub const DIM: usize = 2;
/// Largest supported number of equations.
pub const MAX_M: usize = 3;
const MAX_DM: usize = DIM * MAX_M;

/// Coefficient tensor stored as a `dm x dm` matrix with row `a*2 + i` and
/// column `b*2 + j` holding `a_ij^{ab}`.
#[derive(Clone, Copy, PartialEq)]
pub struct Tensor {
    m: usize,
    data: [f64; MAX_DM * MAX_DM],
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("m", &self.m)
            .field("entries", &self.entries())
            .finish()
    }
}

impl Tensor {
    pub fn zeros(m: usize) -> Self {
        assert!((1..=MAX_M).contains(&m), "m must be in 1..={MAX_M}");
        Tensor {
            m,
            data: [0.0; MAX_DM * MAX_DM],
        }
    }

    /// `a * delta_ij delta_ab`.
    pub fn isotropic(m: usize, a: f64) -> Self {
        let mut t = Tensor::zeros(m);
        for r in 0..t.dm() {
            t.data[r * MAX_DM + r] = a;
        }
        t
    }

    pub fn identity(m: usize) -> Self {
        Tensor::isotropic(m, 1.0)
    }

    /// Scalar (m = 1) tensor from a 2x2 matrix.
    pub fn from_2x2(a: [[f64; 2]; 2]) -> Self {
        let mut t = Tensor::zeros(1);
        for i in 0..2 {
            for j in 0..2 {
                t.set(0, i, 0, j, a[i][j]);
            }
        }
        t
    }

    /// Row-major `dm x dm` entries.
    pub fn from_entries(m: usize, entries: &[f64]) -> Result<Self> {
        if !(1..=MAX_M).contains(&m) {
            return Err(MsfemError::invalid(format!("m must be in 1..={MAX_M}, got {m}")));
        }
        let dm = DIM * m;
        if entries.len() != dm * dm {
            return Err(MsfemError::invalid(format!(
                "tensor for m={m} needs {} entries, got {}",
                dm * dm,
                entries.len()
            )));
        }
        let mut t = Tensor::zeros(m);
        for r in 0..dm {
            for c in 0..dm {
                t.data[r * MAX_DM + c] = entries[r * dm + c];
            }
        }
        Ok(t)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dm(&self) -> usize {
        DIM * self.m
    }

    /// Entry of the `dm x dm` matrix.
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * MAX_DM + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * MAX_DM + c]
    }

    /// `a_ij^{ab}`.
    #[inline]
    pub fn get(&self, a: usize, i: usize, b: usize, j: usize) -> f64 {
        self.at(a * DIM + i, b * DIM + j)
    }

    pub fn set(&mut self, a: usize, i: usize, b: usize, j: usize, v: f64) {
        *self.at_mut(a * DIM + i, b * DIM + j) = v;
    }

    pub fn entries(&self) -> Vec<f64> {
        let dm = self.dm();
        (0..dm * dm).map(|k| self.at(k / dm, k % dm)).collect()
    }

    pub fn transpose(&self) -> Tensor {
        let mut t = Tensor::zeros(self.m);
        for r in 0..self.dm() {
            for c in 0..self.dm() {
                *t.at_mut(c, r) = self.at(r, c);
            }
        }
        t
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.m, other.m);
        let dm = self.dm();
        let mut d = 0.0f64;
        for r in 0..dm {
            for c in 0..dm {
                d = d.max((self.at(r, c) - other.at(r, c)).abs());
            }
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.max_abs_diff(&self.transpose()) <= tol * self.max_abs().max(1.0)
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        let mut t = *self;
        t.data.iter_mut().for_each(|v| *v *= s);
        t
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor, s: f64) {
        assert_eq!(self.m, other.m);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    /// `sum a_ij^{ab} xi_i xi_j eta_a eta_b`.
    pub fn legendre_hadamard(&self, xi: [f64; 2], eta: &[f64]) -> f64 {
        let mut s = 0.0;
        for a in 0..self.m {
            for b in 0..self.m {
                for i in 0..DIM {
                    for j in 0..DIM {
                        s += self.get(a, i, b, j) * xi[i] * xi[j] * eta[a] * eta[b];
                    }
                }
            }
        }
        s
    }

    /// `A g` for a gradient stored as `g[b*2 + j]`.
    #[inline]
    pub fn apply(&self, g: &[f64]) -> [f64; MAX_DM] {
        let dm = self.dm();
        let mut out = [0.0; MAX_DM];
        for (r, o) in out.iter_mut().enumerate().take(dm) {
            let row = &self.data[r * MAX_DM..r * MAX_DM + dm];
            *o = row.iter().zip(g).map(|(a, b)| a * b).sum();
        }
        out
    }
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            m: usize,
            entries: Vec<f64>,
        }
        Repr {
            m: self.m,
            entries: self.entries(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Repr {
            m: usize,
            entries: Vec<f64>,
        }
        let r = Repr::deserialize(d)?;
        Tensor::from_entries(r.m, &r.entries).map_err(serde::de::Error::custom)
    }
}

/// Reduces to `[0, 1)`.
#[inline]
pub fn frac(y: f64) -> f64 {
    let r = y.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn half() -> f64 {
    0.5
}
fn first_axis() -> usize {
    1
}
fn scalar_m() -> usize {
    1
}

/// Serializable description of a coefficient field, as found in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldDescriptor {
    /// `value * I`, or the explicit row-major `tensor` of size `(2m)^2`.
    Constant {
        #[serde(default = "one")]
        value: f64,
        #[serde(default)]
        tensor: Option<Vec<f64>>,
        #[serde(default = "scalar_m")]
        m: usize,
    },
    /// Layers normal to axis `direction` (1 or 2): `a1` where `y_dir < fraction`.
    Laminate {
        a1: f64,
        a2: f64,
        #[serde(default = "first_axis")]
        direction: usize,
        #[serde(default = "half")]
        fraction: f64,
    },
    Checkerboard { a1: f64, a2: f64 },
    /// `mean + amplitude sin(2 pi y1) sin(2 pi y2)`.
    Trigonometric {
        #[serde(default = "two")]
        mean: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// Piecewise-constant values on an `n x n` grid of the cell, either inline
    /// or from a CSV file with one row per cell (first index fastest) holding
    /// 1 (isotropic) or `(2m)^2` entries.
    SampledGrid {
        n: usize,
        #[serde(default = "scalar_m")]
        m: usize,
        #[serde(default)]
        path: Option<String>,
        #[serde(default)]
        values: Option<Vec<Vec<f64>>>,
    },
    /// Two-component laminate system
    /// `a_ij^{ab} = mu(y) (delta_ij delta_ab + kappa delta_ia delta_jb)`.
    LaminateSystem {
        a1: f64,
        a2: f64,
        #[serde(default = "first_axis")]
        direction: usize,
        #[serde(default = "half")]
        fraction: f64,
        #[serde(default)]
        kappa: f64,
    },
}

impl FieldDescriptor {
    pub fn build(&self) -> Result<CoefficientField> {
        CoefficientField::from_descriptor(self.clone())
    }

    /// Rewrites a relative `path` so that it is resolved against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let FieldDescriptor::SampledGrid { path: Some(p), .. } = self {
            let pb = Path::new(p.as_str());
            if pb.is_relative() {
                *p = base.join(pb).to_string_lossy().into_owned();
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Constant(Tensor),
    Laminate {
        a1: f64,
        a2: f64,
        axis: usize,
        fraction: f64,
    },
    Checkerboard {
        a1: f64,
        a2: f64,
    },
    Trigonometric {
        mean: f64,
        amplitude: f64,
    },
    Grid {
        n: usize,
        cells: Vec<Tensor>,
    },
    LaminateSystem {
        a1: f64,
        a2: f64,
        axis: usize,
        fraction: f64,
        kappa: f64,
    },
}

/// A 1-periodic coefficient field on the unit cell.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    m: usize,
    symmetric: bool,
    kind: Kind,
    descriptor: FieldDescriptor,
}

fn check_axis(direction: usize) -> Result<usize> {
    match direction {
        1 | 2 => Ok(direction - 1),
        _ => Err(MsfemError::invalid(format!("direction must be 1 or 2, got {direction}"))),
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(MsfemError::invalid(format!("fraction must lie in (0, 1), got {fraction}")))
    }
}

impl CoefficientField {
    pub fn from_descriptor(descriptor: FieldDescriptor) -> Result<Self> {
        let (m, kind) = match &descriptor {
            FieldDescriptor::Constant { value, tensor, m } => {
                let t = match tensor {
                    Some(e) => Tensor::from_entries(*m, e)?,
                    None => {
                        if !(1..=MAX_M).contains(m) {
                            return Err(MsfemError::invalid(format!("m must be in 1..={MAX_M}")));
                        }
                        Tensor::isotropic(*m, *value)
                    }
                };
                (*m, Kind::Constant(t))
            }
            FieldDescriptor::Laminate {
                a1,
                a2,
                direction,
                fraction,
            } => {
                check_fraction(*fraction)?;
                (
                    1,
                    Kind::Laminate {
                        a1: *a1,
                        a2: *a2,
                        axis: check_axis(*direction)?,
                        fraction: *fraction,
                    },
                )
            }
            FieldDescriptor::Checkerboard { a1, a2 } => (1, Kind::Checkerboard { a1: *a1, a2: *a2 }),
            FieldDescriptor::Trigonometric { mean, amplitude } => (
                1,
                Kind::Trigonometric {
                    mean: *mean,
                    amplitude: *amplitude,
                },
            ),
            FieldDescriptor::SampledGrid { n, m, path, values } => {
                if *n == 0 {
                    return Err(MsfemError::invalid("sampled grid needs n >= 1"));
                }
                if !(1..=MAX_M).contains(m) {
                    return Err(MsfemError::invalid(format!("m must be in 1..={MAX_M}")));
                }
                let rows = match (path, values) {
                    (Some(p), None) => read_grid_csv(Path::new(p))?,
                    (None, Some(v)) => v.clone(),
                    _ => {
                        return Err(MsfemError::invalid(
                            "sampled grid needs exactly one of `path` or `values`",
                        ))
                    }
                };
                if rows.len() != n * n {
                    return Err(MsfemError::invalid(format!(
                        "sampled grid with n={n} needs {} rows, got {}",
                        n * n,
                        rows.len()
                    )));
                }
                let cells = rows
                    .iter()
                    .map(|r| {
                        if r.len() == 1 {
                            Ok(Tensor::isotropic(*m, r[0]))
                        } else {
                            Tensor::from_entries(*m, r)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                (*m, Kind::Grid { n: *n, cells })
            }
            FieldDescriptor::LaminateSystem {
                a1,
                a2,
                direction,
                fraction,
                kappa,
            } => {
                check_fraction(*fraction)?;
                if *kappa < 0.0 {
                    return Err(MsfemError::invalid("kappa must be nonnegative"));
                }
                (
                    2,
                    Kind::LaminateSystem {
                        a1: *a1,
                        a2: *a2,
                        axis: check_axis(*direction)?,
                        fraction: *fraction,
                        kappa: *kappa,
                    },
                )
            }
        };
        let mut field = CoefficientField {
            m,
            symmetric: true,
            kind,
            descriptor,
        };
        field.symmetric = match &field.kind {
            Kind::Constant(t) => t.is_symmetric(1e-14),
            Kind::Grid { cells, .. } => cells.iter().all(|t| t.is_symmetric(1e-14)),
            _ => true,
        };
        Ok(field)
    }

    pub fn constant(t: Tensor) -> Self {
        CoefficientField::from_descriptor(FieldDescriptor::Constant {
            value: 1.0,
            tensor: Some(t.entries()),
            m: t.m(),
        })
        .expect("valid tensor")
    }

    pub fn isotropic(a: f64) -> Self {
        FieldDescriptor::Constant {
            value: a,
            tensor: None,
            m: 1,
        }
        .build()
        .expect("valid scalar")
    }

    pub fn laminate(a1: f64, a2: f64, direction: usize) -> Result<Self> {
        FieldDescriptor::Laminate {
            a1,
            a2,
            direction,
            fraction: 0.5,
        }
        .build()
    }

    pub fn checkerboard(a1: f64, a2: f64) -> Self {
        FieldDescriptor::Checkerboard { a1, a2 }.build().expect("checkerboard")
    }

    pub fn trigonometric(mean: f64, amplitude: f64) -> Self {
        FieldDescriptor::Trigonometric { mean, amplitude }
            .build()
            .expect("trigonometric")
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dm(&self) -> usize {
        DIM * self.m
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn descriptor(&self) -> &FieldDescriptor {
        &self.descriptor
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, Kind::Constant(_))
    }

    /// `A(y)`; `y` is reduced modulo 1.
    pub fn eval(&self, y: Point) -> Tensor {
        let (y1, y2) = (frac(y[0]), frac(y[1]));
        match &self.kind {
            Kind::Constant(t) => *t,
            Kind::Laminate {
                a1,
                a2,
                axis,
                fraction,
            } => {
                let s = if *axis == 0 { y1 } else { y2 };
                Tensor::isotropic(1, if s < *fraction { *a1 } else { *a2 })
            }
            Kind::Checkerboard { a1, a2 } => {
                let parity = ((2.0 * y1) as usize + (2.0 * y2) as usize) % 2;
                Tensor::isotropic(1, if parity == 0 { *a1 } else { *a2 })
            }
            Kind::Trigonometric { mean, amplitude } => {
                Tensor::isotropic(1, mean + amplitude * (2.0 * PI * y1).sin() * (2.0 * PI * y2).sin())
            }
            Kind::Grid { n, cells } => {
                let i = ((y1 * *n as f64) as usize).min(n - 1);
                let j = ((y2 * *n as f64) as usize).min(n - 1);
                cells[j * n + i]
            }
            Kind::LaminateSystem {
                a1,
                a2,
                axis,
                fraction,
                kappa,
            } => {
                let s = if *axis == 0 { y1 } else { y2 };
                let mu = if s < *fraction { *a1 } else { *a2 };
                let mut t = Tensor::zeros(2);
                for a in 0..2 {
                    for i in 0..2 {
                        for b in 0..2 {
                            for j in 0..2 {
                                let v = f64::from(u8::from(i == j && a == b))
                                    + kappa * f64::from(u8::from(i == a && j == b));
                                t.set(a, i, b, j, mu * v);
                            }
                        }
                    }
                }
                t
            }
        }
    }

    /// `A(x / eps)`.
    pub fn eval_eps(&self, x: Point, eps: f64) -> Result<Tensor> {
        if !(eps > 0.0) {
            return Err(MsfemError::invalid(format!("eps must be positive, got {eps}")));
        }
        Ok(self.eval([x[0] / eps, x[1] / eps]))
    }
}

fn read_grid_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        MsfemError::invalid(format!("cannot read sampled grid `{}`: {e}", path.display()))
    })?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            // tolerate a single header line
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(_) => {
                return Err(MsfemError::Parse(format!(
                    "{}:{}: expected comma-separated numbers",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(rows)
}

/// Ellipticity estimate `(lambda, Lambda)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipticityBounds {
    pub lambda: f64,
    pub big_lambda: f64,
}

fn eta_directions(m: usize, n: usize) -> Vec<Vec<f64>> {
    match m {
        1 => vec![vec![1.0]],
        2 => (0..n)
            .map(|k| {
                let t = PI * k as f64 / n as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            // Fibonacci points on the upper half sphere
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|k| {
                    let z = 1.0 - (k as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * k as f64;
                    vec![r * t.cos(), r * t.sin(), z]
                })
                .collect()
        }
    }
}

fn xi_directions(n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|k| {
            let t = PI * k as f64 / n as f64;
            [t.cos(), t.sin()]
        })
        .collect()
}

fn bounds_over(field: &CoefficientField, ys: impl Iterator<Item = Point>, n_directions: usize) -> Result<EllipticityBounds> {
    let xis = xi_directions(n_directions);
    let etas = eta_directions(field.m(), n_directions);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in ys {
        let t = field.eval(y);
        for xi in &xis {
            for eta in &etas {
                let q = t.legendre_hadamard(*xi, eta);
                lo = lo.min(q);
                hi = hi.max(q);
            }
        }
    }
    if !(lo > 0.0) {
        return Err(MsfemError::NotElliptic(format!(
            "Legendre-Hadamard lower bound {lo} is not positive"
        )));
    }
    Ok(EllipticityBounds {
        lambda: lo,
        big_lambda: hi,
    })
}

/// Min/max of the Legendre-Hadamard form over an `s x s` grid of cell points
/// `y = (i/s, j/s)` with `s = ceil(sqrt(n_samples))` and `n_directions`
/// equally spaced unit directions for `xi` (and `eta` when `m > 1`).
pub fn check_ellipticity(field: &CoefficientField, n_samples: usize, n_directions: usize) -> Result<EllipticityBounds> {
    if n_samples == 0 || n_directions == 0 {
        return Err(MsfemError::invalid("n_samples and n_directions must be positive"));
    }
    let s = (n_samples as f64).sqrt().ceil() as usize;
    let ys = (0..s * s).map(move |k| [(k % s) as f64 / s as f64, (k / s) as f64 / s as f64]);
    bounds_over(field, ys, n_directions)
}

/// Same as [`check_ellipticity`] with seeded uniformly random cell points.
pub fn check_ellipticity_random(
    field: &CoefficientField,
    n_samples: usize,
    n_directions: usize,
    seed: u64,
) -> Result<EllipticityBounds> {
    if n_samples == 0 || n_directions == 0 {
        return Err(MsfemError::invalid("n_samples and n_directions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys: Vec<Point> = (0..n_samples).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    bounds_over(field, ys.into_iter(), n_directions)
}
