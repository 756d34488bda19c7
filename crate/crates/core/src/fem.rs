//! Conforming P1 finite elements: assembly, Dirichlet elimination, solves and norms.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff::{CoefficientField, Tensor, DIM, MAX_M};
use crate::error::{MsfemError, Result};
use crate::mesh::{barycentric_gradients, signed_area, Hierarchy, Mesh, Point};
use crate::quadrature::{map_point, QuadratureOrder};
use crate::solver::{pcg, solve_sparse, DenseCholesky, Multigrid, SolveReport, SolverOptions};
use crate::sparse::CsrMatrix;

/// Smallest element area accepted by assembly.
pub const MIN_AREA: f64 = 1e-14;

/// Coefficient seen by the assembly: the oscillating field at scale `eps`,
/// or a constant tensor (the `eps = infinity` case).
#[derive(Debug, Clone, Copy)]
pub enum Material<'a> {
    Oscillating { field: &'a CoefficientField, eps: f64 },
    Constant(Tensor),
}

impl<'a> Material<'a> {
    pub fn oscillating(field: &'a CoefficientField, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(MsfemError::invalid(format!("eps must be positive, got {eps}")));
        }
        Ok(Material::Oscillating { field, eps })
    }

    pub fn m(&self) -> usize {
        match self {
            Material::Oscillating { field, .. } => field.m(),
            Material::Constant(t) => t.m(),
        }
    }

    #[inline]
    pub fn eval(&self, x: Point) -> Tensor {
        match self {
            Material::Oscillating { field, eps } => field.eval([x[0] / eps, x[1] / eps]),
            Material::Constant(t) => *t,
        }
    }

    /// Quadrature average of the tensor over a triangle.
    pub fn average(&self, tri: &[Point; 3], quad: QuadratureOrder) -> Tensor {
        match self {
            Material::Constant(t) => *t,
            Material::Oscillating { .. } => {
                let rule = quad.rule();
                if rule.len() == 1 {
                    return self.eval(map_point(tri, &rule.points[0]));
                }
                let mut acc = Tensor::zeros(self.m());
                for (b, w) in rule.points.iter().zip(rule.weights) {
                    acc.add_assign_scaled(&self.eval(map_point(tri, b)), *w);
                }
                acc
            }
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match self {
            Material::Oscillating { field, .. } => field.symmetric(),
            Material::Constant(t) => t.is_symmetric(1e-14),
        }
    }
}

/// Element stiffness for P1 with a constant tensor on the element. Entry
/// `(a*m + p, b*m + q)` of the returned row-major `3m x 3m` matrix.
pub fn element_stiffness(tri: &[Point; 3], a: &Tensor) -> Vec<f64> {
    let m = a.m();
    let n = 3 * m;
    let g = barycentric_gradients(tri);
    let area = signed_area(tri);
    let mut k = vec![0.0; n * n];
    for la in 0..3 {
        for lb in 0..3 {
            for p in 0..m {
                for q in 0..m {
                    let mut s = 0.0;
                    for i in 0..DIM {
                        for j in 0..DIM {
                            s += a.get(p, i, q, j) * g[la][i] * g[lb][j];
                        }
                    }
                    k[(la * m + p) * n + lb * m + q] = area * s;
                }
            }
        }
    }
    k
}

fn check_element(mesh: &Mesh, e: usize) -> Result<[Point; 3]> {
    let tri = mesh.triangle(e);
    let area = signed_area(&tri);
    if area < MIN_AREA {
        return Err(MsfemError::Assembly {
            element: e,
            reason: format!("degenerate element with area {area:e}"),
        });
    }
    Ok(tri)
}

const CHUNK: usize = 1 << 14;

/// Global stiffness `K[(a,p),(b,q)] = a_T(lambda_b e^q, lambda_a e^p)`.
pub fn assemble_stiffness(mesh: &Mesh, material: Material<'_>, quad: QuadratureOrder) -> Result<CsrMatrix> {
    let m = material.m();
    let n = 3 * m;
    let mut k = CsrMatrix::fem_pattern(mesh, m);
    let ne = mesh.n_elements();
    for start in (0..ne).step_by(CHUNK) {
        let end = (start + CHUNK).min(ne);
        let locals: Vec<Vec<f64>> = (start..end)
            .into_par_iter()
            .map(|e| {
                let tri = check_element(mesh, e)?;
                Ok(element_stiffness(&tri, &material.average(&tri, quad)))
            })
            .collect::<Result<_>>()?;
        for (e, ke) in (start..end).zip(&locals) {
            let el = mesh.elements()[e];
            for la in 0..3 {
                for p in 0..m {
                    let row = el[la] * m + p;
                    for lb in 0..3 {
                        for q in 0..m {
                            k.add_at(row, el[lb] * m + q, ke[(la * m + p) * n + lb * m + q]);
                        }
                    }
                }
            }
        }
    }
    Ok(k)
}

/// Right-hand side function `f(x)`, applied to every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    Constant {
        value: f64,
    },
    /// `amplitude sin(k1 pi x1) sin(k2 pi x2)`.
    Sine {
        #[serde(default = "unit")]
        amplitude: f64,
        #[serde(default = "unit")]
        k1: f64,
        #[serde(default = "unit")]
        k2: f64,
    },
    /// `c0 + c1 x1 + c2 x2`.
    Linear {
        c0: f64,
        c1: f64,
        c2: f64,
    },
}

fn unit() -> f64 {
    1.0
}

impl Default for Source {
    fn default() -> Self {
        Source::Constant { value: 1.0 }
    }
}

impl Source {
    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        match self {
            Source::Constant { value } => *value,
            Source::Sine { amplitude, k1, k2 } => {
                amplitude * (k1 * std::f64::consts::PI * x[0]).sin() * (k2 * std::f64::consts::PI * x[1]).sin()
            }
            Source::Linear { c0, c1, c2 } => c0 + c1 * x[0] + c2 * x[1],
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Source::Constant { value } => *value == 0.0,
            Source::Sine { amplitude, .. } => *amplitude == 0.0,
            Source::Linear { c0, c1, c2 } => *c0 == 0.0 && *c1 == 0.0 && *c2 == 0.0,
        }
    }
}

/// Load vector `F[(a,p)] = int f_p lambda_a`.
pub fn assemble_load(mesh: &Mesh, m: usize, f: &(dyn Fn(Point, usize) -> f64 + Sync), quad: QuadratureOrder) -> Vec<f64> {
    let rule = quad.rule();
    let mut out = vec![0.0; mesh.n_vertices() * m];
    for (e, el) in mesh.elements().iter().enumerate() {
        let tri = mesh.triangle(e);
        let area = signed_area(&tri);
        for (b, w) in rule.points.iter().zip(rule.weights) {
            let x = map_point(&tri, b);
            for p in 0..m {
                let fx = f(x, p) * w * area;
                for a in 0..3 {
                    out[el[a] * m + p] += fx * b[a];
                }
            }
        }
    }
    out
}

pub fn assemble_source(mesh: &Mesh, m: usize, source: &Source) -> Vec<f64> {
    assemble_load(mesh, m, &|x, _| source.eval(x), QuadratureOrder::Four)
}

/// Expands a per-vertex flag to a per-DOF flag.
pub fn dof_mask(vertex_flags: &[bool], m: usize) -> Vec<bool> {
    vertex_flags.iter().flat_map(|&b| std::iter::repeat(b).take(m)).collect()
}

/// Elimination of fixed DOFs: keeps `K_ff` and the coupling `K_fb` so that
/// several right-hand sides and boundary data can be reduced cheaply.
#[derive(Debug, Clone)]
pub struct DirichletReduction {
    pub free: Vec<usize>,
    pub free_mask: Vec<bool>,
    pub k_ff: CsrMatrix,
    k_fb: CsrMatrix,
    fixed: Vec<usize>,
    n: usize,
}

impl DirichletReduction {
    pub fn new(k: &CsrMatrix, fixed_mask: &[bool]) -> Self {
        let n = k.n_rows();
        assert_eq!(fixed_mask.len(), n);
        let free: Vec<usize> = (0..n).filter(|&i| !fixed_mask[i]).collect();
        let fixed: Vec<usize> = (0..n).filter(|&i| fixed_mask[i]).collect();
        DirichletReduction {
            k_ff: k.submatrix(&free, &free),
            k_fb: k.submatrix(&free, &fixed),
            free_mask: fixed_mask.iter().map(|b| !b).collect(),
            free,
            fixed,
            n,
        }
    }

    /// `f_free - K_fb g_fixed`; `g` is a full-length vector read at fixed DOFs.
    pub fn reduce_rhs(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let gb: Vec<f64> = self.fixed.iter().map(|&i| g[i]).collect();
        let kg = self.k_fb.mul_vec(&gb);
        self.free.iter().zip(kg).map(|(&i, v)| f[i] - v).collect()
    }

    pub fn expand(&self, x_free: &[f64], g: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for &i in &self.fixed {
            x[i] = g[i];
        }
        for (&i, &v) in self.free.iter().zip(x_free) {
            x[i] = v;
        }
        x
    }
}

/// Reduced SPD system after eliminating Dirichlet DOFs.
#[derive(Debug, Clone)]
pub struct DirichletSystem {
    pub reduction: DirichletReduction,
    pub rhs: Vec<f64>,
    pub full_values: Vec<f64>,
}

impl DirichletSystem {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.reduction.k_ff
    }

    pub fn expand(&self, x_free: &[f64]) -> Vec<f64> {
        self.reduction.expand(x_free, &self.full_values)
    }
}

/// Row/column elimination. `values[v]` must be `Some` (an m-vector) for every
/// flagged vertex `v`.
pub fn apply_dirichlet(
    k: &CsrMatrix,
    f: &[f64],
    boundary: &[bool],
    m: usize,
    values: &[Option<Vec<f64>>],
) -> Result<DirichletSystem> {
    if boundary.len() * m != k.n_rows() || f.len() != k.n_rows() || values.len() != boundary.len() {
        return Err(MsfemError::invalid("Dirichlet data does not match the system size"));
    }
    let mut full = vec![0.0; k.n_rows()];
    for (v, &b) in boundary.iter().enumerate() {
        if !b {
            continue;
        }
        let val = values[v]
            .as_ref()
            .ok_or_else(|| MsfemError::invalid(format!("missing boundary value for vertex {v}")))?;
        if val.len() != m {
            return Err(MsfemError::invalid(format!("boundary value for vertex {v} must have {m} components")));
        }
        full[v * m..(v + 1) * m].copy_from_slice(val);
    }
    let reduction = DirichletReduction::new(k, &dof_mask(boundary, m));
    let rhs = reduction.reduce_rhs(f, &full);
    Ok(DirichletSystem {
        reduction,
        rhs,
        full_values: full,
    })
}

/// Factorized (dense) or multigrid-preconditioned solver for a fixed reduced
/// matrix, reused across right-hand sides.
pub enum SpdSolver {
    Empty,
    Dense(DenseCholesky),
    Multigrid { mg: Box<Multigrid>, tol: f64, max_iter: usize },
}

/// Systems up to this size are factorized densely.
pub const DENSE_LIMIT: usize = 150;

impl SpdSolver {
    pub fn new(k_ff: &CsrMatrix, hierarchy: &Hierarchy, free_mask: &[bool], m: usize, tol: f64) -> Result<Self> {
        let n = k_ff.n_rows();
        if n == 0 {
            Ok(SpdSolver::Empty)
        } else if n <= DENSE_LIMIT || hierarchy.depth() == 0 {
            if n > 4000 {
                return Err(MsfemError::TooLarge(format!("dense factorization of {n} unknowns")));
            }
            Ok(SpdSolver::Dense(DenseCholesky::new(k_ff)?))
        } else {
            Ok(SpdSolver::Multigrid {
                mg: Box::new(Multigrid::new(k_ff, hierarchy, free_mask, m)?),
                tol,
                max_iter: 500,
            })
        }
    }

    pub fn solve(&self, k_ff: &CsrMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveReport)> {
        self.solve_from(k_ff, b, None)
    }

    /// Iterative variants start from `x0`; the dense one ignores it.
    pub fn solve_from(&self, k_ff: &CsrMatrix, b: &[f64], x0: Option<&[f64]>) -> Result<(Vec<f64>, SolveReport)> {
        match self {
            SpdSolver::Empty => Ok((
                Vec::new(),
                SolveReport {
                    iterations: 0,
                    residual: 0.0,
                    seconds: 0.0,
                    method: "empty".into(),
                },
            )),
            SpdSolver::Dense(ch) => Ok((
                ch.solve(b),
                SolveReport {
                    iterations: 1,
                    residual: 0.0,
                    seconds: 0.0,
                    method: "dense-cholesky".into(),
                },
            )),
            SpdSolver::Multigrid { mg, tol, max_iter } => pcg(k_ff, b, x0, mg.as_ref(), *tol, *max_iter),
        }
    }
}

/// P1 solution of `-div(A grad u) = f` with `u = 0` on the boundary. With a
/// refinement hierarchy the solve uses multigrid-preconditioned CG.
pub fn solve_p1(
    mesh: Arc<Mesh>,
    hierarchy: Option<&Hierarchy>,
    material: Material<'_>,
    source: &Source,
    opts: &SolverOptions,
) -> Result<(FeFunction, SolveReport)> {
    let m = material.m();
    let k = assemble_stiffness(&mesh, material, QuadratureOrder::Midpoint)?;
    let f = assemble_source(&mesh, m, source);
    let red = DirichletReduction::new(&k, &dof_mask(mesh.boundary(), m));
    let zeros = vec![0.0; k.n_rows()];
    let b = red.reduce_rhs(&f, &zeros);
    let (x, report) = match hierarchy {
        Some(h) if h.depth() > 0 && b.len() > 2000 && material.is_symmetric() => {
            let mg = Multigrid::new(&red.k_ff, h, &red.free_mask, m)?;
            pcg(&red.k_ff, &b, None, &mg, opts.tol, opts.max_iter)?
        }
        _ => solve_sparse(&red.k_ff, &b, opts)?,
    };
    let values = red.expand(&x, &zeros);
    Ok((FeFunction::new(mesh, m, values)?, report))
}

/// P1 function with `m` components per vertex, stored as `values[v*m + p]`.
#[derive(Debug, Clone)]
pub struct FeFunction {
    pub mesh: Arc<Mesh>,
    pub m: usize,
    pub values: Vec<f64>,
}

impl FeFunction {
    pub fn new(mesh: Arc<Mesh>, m: usize, values: Vec<f64>) -> Result<Self> {
        if !(1..=MAX_M).contains(&m) || values.len() != m * mesh.n_vertices() {
            return Err(MsfemError::invalid(format!(
                "expected {} values for m={m}, got {}",
                m * mesh.n_vertices(),
                values.len()
            )));
        }
        Ok(FeFunction { mesh, m, values })
    }

    pub fn zeros(mesh: Arc<Mesh>, m: usize) -> Self {
        let n = mesh.n_vertices() * m;
        FeFunction {
            mesh,
            m,
            values: vec![0.0; n],
        }
    }

    /// Nodal interpolant of `f(x, component)`.
    pub fn interpolate(mesh: Arc<Mesh>, m: usize, f: impl Fn(Point, usize) -> f64) -> Self {
        let values = mesh
            .vertices()
            .iter()
            .flat_map(|&x| (0..m).map(move |p| (x, p)))
            .map(|(x, p)| f(x, p))
            .collect();
        FeFunction { mesh, m, values }
    }

    fn check_same(&self, other: &FeFunction) -> Result<()> {
        if self.m != other.m || !(Arc::ptr_eq(&self.mesh, &other.mesh) || self.mesh.same_as(&other.mesh)) {
            return Err(MsfemError::invalid("functions live on different meshes"));
        }
        Ok(())
    }

    pub fn sub(&self, other: &FeFunction) -> Result<FeFunction> {
        self.check_same(other)?;
        Ok(FeFunction {
            mesh: self.mesh.clone(),
            m: self.m,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    /// Values at the three vertices of element `e`, as `[a][p]`.
    #[inline]
    pub fn element_values(&self, e: usize) -> [[f64; MAX_M]; 3] {
        let el = self.mesh.elements()[e];
        let mut out = [[0.0; MAX_M]; 3];
        for a in 0..3 {
            for p in 0..self.m {
                out[a][p] = self.values[el[a] * self.m + p];
            }
        }
        out
    }

    /// Gradient on element `e`, as `g[p*2 + i] = d u_p / d x_i`.
    #[inline]
    pub fn gradient(&self, e: usize) -> [f64; DIM * MAX_M] {
        let g = barycentric_gradients(&self.mesh.triangle(e));
        let vals = self.element_values(e);
        let mut out = [0.0; DIM * MAX_M];
        for p in 0..self.m {
            for i in 0..DIM {
                out[p * DIM + i] = (0..3).map(|a| vals[a][p] * g[a][i]).sum();
            }
        }
        out
    }

    pub fn h1_seminorm(&self) -> f64 {
        let mut s = 0.0;
        for e in 0..self.mesh.n_elements() {
            let g = self.gradient(e);
            s += self.mesh.area(e) * g[..DIM * self.m].iter().map(|v| v * v).sum::<f64>();
        }
        s.sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        self.lp_norm(2.0)
    }

    /// `(int |u|^p)^(1/p)` with the Euclidean norm over components and the
    /// degree-4 rule on every element.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let rule = QuadratureOrder::Four.rule();
        let mut s = 0.0;
        for e in 0..self.mesh.n_elements() {
            let vals = self.element_values(e);
            let area = self.mesh.area(e);
            for (b, w) in rule.points.iter().zip(rule.weights) {
                let mut n2 = 0.0;
                for c in 0..self.m {
                    let u = b[0] * vals[0][c] + b[1] * vals[1][c] + b[2] * vals[2][c];
                    n2 += u * u;
                }
                s += w * area * if p == 2.0 { n2 } else { n2.sqrt().powf(p) };
            }
        }
        s.powf(1.0 / p)
    }

    /// `a(u, v) = int grad v . A grad u`.
    pub fn energy_form(&self, v: &FeFunction, material: Material<'_>, quad: QuadratureOrder) -> Result<f64> {
        self.check_same(v)?;
        if material.m() != self.m {
            return Err(MsfemError::invalid("material and function have different m"));
        }
        let mut s = 0.0;
        for e in 0..self.mesh.n_elements() {
            let tri = self.mesh.triangle(e);
            let a = material.average(&tri, quad);
            let gu = self.gradient(e);
            let gv = v.gradient(e);
            let agu = a.apply(&gu);
            s += signed_area(&tri) * (0..DIM * self.m).map(|r| gv[r] * agu[r]).sum::<f64>();
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_triangulation, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> Arc<Mesh> {
        Arc::new(build_structured_triangulation(Rect::UNIT, n).unwrap())
    }

    #[test]
    fn single_cell_laplacian() {
        let mesh = unit(1);
        let id = CoefficientField::isotropic(1.0);
        let k = assemble_stiffness(&mesh, Material::Constant(Tensor::identity(1)), QuadratureOrder::Midpoint).unwrap();
        // vertices (0,0),(1,0),(0,1),(1,1); triangles split along (0,0)-(1,1)
        let expected = [
            [1.0, -0.5, -0.5, 0.0],
            [-0.5, 1.0, 0.0, -0.5],
            [-0.5, 0.0, 1.0, -0.5],
            [0.0, -0.5, -0.5, 1.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((k.get(i, j) - expected[i][j]).abs() < 1e-15, "({i},{j})");
            }
            let (_, row) = k.row(i);
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        let k2 = assemble_stiffness(&mesh, Material::oscillating(&id, 0.1).unwrap(), QuadratureOrder::Four).unwrap();
        assert!(k.max_abs_diff(&k2) < 1e-15);
    }

    #[test]
    fn symmetric_fields_give_symmetric_matrices() {
        let mesh = unit(8);
        for f in [CoefficientField::trigonometric(2.0, 1.0), CoefficientField::checkerboard(1.0, 4.0)] {
            let k = assemble_stiffness(&mesh, Material::oscillating(&f, 0.3).unwrap(), QuadratureOrder::Four).unwrap();
            assert!(k.is_symmetric(1e-12));
        }
    }

    #[test]
    fn ellipticity_sandwich_on_random_vectors() {
        let mesh = unit(64);
        let f = CoefficientField::laminate(1.0, 4.0, 1).unwrap();
        let mat = Material::oscillating(&f, 0.25).unwrap();
        let k = assemble_stiffness(&mesh, mat, QuadratureOrder::Midpoint).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let v: Vec<f64> = (0..mesh.n_vertices()).map(|_| rng.random::<f64>() - 0.5).collect();
            let q = crate::sparse::dot(&v, &k.mul_vec(&v));
            let fv = FeFunction::new(mesh.clone(), 1, v).unwrap();
            let h1 = fv.h1_seminorm().powi(2);
            assert!(q >= h1 * (1.0 - 1e-10) && q <= 4.0 * h1 * (1.0 + 1e-10));
            let e = fv.energy_form(&fv, mat, QuadratureOrder::Midpoint).unwrap();
            assert!((e - q).abs() < 1e-10 * q);
        }
    }

    #[test]
    fn degenerate_element_named() {
        let mesh = Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1e-15], [1.0, 1.0]], vec![[0, 1, 2], [0, 1, 3]]).unwrap();
        match assemble_stiffness(&mesh, Material::Constant(Tensor::identity(1)), QuadratureOrder::Midpoint) {
            Err(MsfemError::Assembly { element, .. }) => assert_eq!(element, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_vectors() {
        let mesh = unit(2);
        let f1 = assemble_load(&mesh, 1, &|_, _| 1.0, QuadratureOrder::Midpoint);
        assert!((f1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let f0 = assemble_load(&mesh, 1, &|_, _| 0.0, QuadratureOrder::Four);
        assert!(f0.iter().all(|&v| v == 0.0));
        let fx = assemble_load(&mesh, 1, &|x, _| x[0], QuadratureOrder::Midpoint);
        assert!((fx.iter().sum::<f64>() - 0.5).abs() < 1e-12);
    }

    fn laplace_with_boundary(n: usize, g: impl Fn(Point) -> f64) -> FeFunction {
        let mesh = unit(n);
        let k = assemble_stiffness(&mesh, Material::Constant(Tensor::identity(1)), QuadratureOrder::Midpoint).unwrap();
        let f = vec![0.0; mesh.n_vertices()];
        let values: Vec<Option<Vec<f64>>> = mesh
            .vertices()
            .iter()
            .zip(mesh.boundary())
            .map(|(&x, &b)| b.then(|| vec![g(x)]))
            .collect();
        let sys = apply_dirichlet(&k, &f, mesh.boundary(), 1, &values).unwrap();
        let (x, _) = solve_sparse(sys.matrix(), &sys.rhs, &SolverOptions::with_tol(1e-13)).unwrap();
        FeFunction::new(mesh, 1, sys.expand(&x)).unwrap()
    }

    #[test]
    fn dirichlet_patch_tests() {
        let u = laplace_with_boundary(6, |_| 0.0);
        assert!(u.values.iter().all(|v| v.abs() < 1e-14));
        let u = laplace_with_boundary(6, |_| 1.0);
        assert!(u.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let g = |x: Point| 0.3 + 2.0 * x[0] - 1.5 * x[1];
        let u = laplace_with_boundary(7, g);
        for (v, x) in u.values.iter().zip(u.mesh.vertices()) {
            assert!((v - g(*x)).abs() < 1e-11);
        }
    }

    #[test]
    fn missing_boundary_value() {
        let mesh = unit(2);
        let k = assemble_stiffness(&mesh, Material::Constant(Tensor::identity(1)), QuadratureOrder::Midpoint).unwrap();
        let values = vec![None; mesh.n_vertices()];
        assert!(matches!(
            apply_dirichlet(&k, &vec![0.0; 9], mesh.boundary(), 1, &values),
            Err(MsfemError::InvalidArgument(_))
        ));
    }

    #[test]
    fn norms_of_simple_functions() {
        let mesh = unit(5);
        let c = FeFunction::interpolate(mesh.clone(), 1, |_, _| 2.0);
        assert!(c.h1_seminorm() < 1e-14);
        let x = FeFunction::interpolate(mesh.clone(), 1, |p, _| p[0]);
        assert!((x.h1_seminorm() - 1.0).abs() < 1e-12);
        assert!((x.l2_norm().powi(2) - 1.0 / 3.0).abs() < 1e-12);
        assert!((x.lp_norm(2.0) - x.l2_norm()).abs() < 1e-12);
        let other = FeFunction::interpolate(unit(4), 1, |p, _| p[0]);
        assert!(x.sub(&other).is_err());
    }

    #[test]
    fn galerkin_orthogonality() {
        let mesh = unit(16);
        let f = CoefficientField::trigonometric(2.0, 1.0);
        let mat = Material::oscillating(&f, 0.2).unwrap();
        let src = Source::Constant { value: 1.0 };
        let (u, _) = solve_p1(mesh.clone(), None, mat, &src, &SolverOptions::with_tol(1e-12)).unwrap();
        let load = assemble_source(&mesh, 1, &src);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let v = loop {
                let v = rng.random_range(0..mesh.n_vertices());
                if !mesh.boundary()[v] {
                    break v;
                }
            };
            let hat = FeFunction::interpolate(mesh.clone(), 1, |x, _| f64::from(u8::from(x == mesh.vertices()[v])));
            let a = u.energy_form(&hat, mat, QuadratureOrder::Midpoint).unwrap();
            assert!((a - load[v]).abs() < 1e-10, "{a} vs {}", load[v]);
        }
    }

    #[test]
    fn multigrid_solve_matches_sparse_solve() {
        let grid = crate::mesh::RefinedGrid::new(Rect::UNIT, 64).unwrap();
        let f = CoefficientField::checkerboard(1.0, 4.0);
        let mat = Material::oscillating(&f, 1.0 / 8.0).unwrap();
        let src = Source::Constant { value: 1.0 };
        let opts = SolverOptions::with_tol(1e-10);
        let (u_mg, rep) = solve_p1(grid.mesh.clone(), Some(&grid.hierarchy), mat, &src, &opts).unwrap();
        assert_eq!(rep.method, "cg+multigrid");
        assert!(rep.iterations < 40, "{rep:?}");
        let (u_cg, _) = solve_p1(grid.mesh.clone(), None, mat, &src, &opts).unwrap();
        let d = u_mg.sub(&u_cg).unwrap();
        assert!(d.l2_norm() < 1e-8 * u_cg.l2_norm());
    }
}
