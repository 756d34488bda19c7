//! Linear solvers: preconditioned conjugate gradients, BiCGSTAB for
//! nonsymmetric systems, dense direct solves, and a geometric multigrid
//! preconditioner built on red-refinement hierarchies.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MsfemError, Result};
use crate::mesh::Hierarchy;
use crate::sparse::{dot, norm2, CsrMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// True relative residual `|K x - b| / |b|`.
    pub residual: f64,
    pub seconds: f64,
    pub method: String,
}

impl SolveReport {
    fn trivial(method: &str) -> Self {
        SolveReport {
            iterations: 0,
            residual: 0.0,
            seconds: 0.0,
            method: method.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Dense direct below the threshold, otherwise CG (or BiCGSTAB if nonsymmetric).
    #[default]
    Auto,
    Cg,
    BiCgStab,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: Method,
    pub dense_threshold: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 20_000,
            method: Method::Auto,
            dense_threshold: 2000,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolverOptions {
            tol,
            ..Default::default()
        }
    }
}

pub trait Preconditioner: Sync {
    /// `z = M^{-1} r`.
    fn apply(&self, r: &[f64], z: &mut [f64]);
    fn name(&self) -> &'static str;
}

pub struct Identity;

impl Preconditioner for Identity {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
    fn name(&self) -> &'static str {
        "none"
    }
}

pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(a: &CsrMatrix) -> Self {
        Jacobi {
            inv_diag: a
                .diagonal()
                .into_iter()
                .map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
                .collect(),
        }
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * di;
        }
    }
    fn name(&self) -> &'static str {
        "jacobi"
    }
}

fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64], bnorm: f64) -> f64 {
    let ax = a.mul_vec(x);
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (q - p) * (q - p)).sum::<f64>().sqrt();
    r / bnorm
}

fn check_square(a: &CsrMatrix, b: &[f64]) -> Result<()> {
    if a.n_rows() != a.n_cols() || a.n_rows() != b.len() {
        return Err(MsfemError::invalid(format!(
            "system dimensions {}x{} with rhs {}",
            a.n_rows(),
            a.n_cols(),
            b.len()
        )));
    }
    Ok(())
}

/// Preconditioned conjugate gradients for SPD systems. Converged when the
/// true relative residual is at most `tol`.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    prec: &dyn Preconditioner,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    check_square(a, b)?;
    let start = Instant::now();
    let method = format!("cg+{}", prec.name());
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], SolveReport::trivial(&method)));
    }
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut iterations = 0;
    // restart from the true residual if the recurrence drifted
    for _restart in 0..4 {
        a.spmv(&x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        if norm2(&r) / bnorm <= tol {
            break;
        }
        prec.apply(&r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let inner_tol = 0.5 * tol * bnorm;
        while iterations < max_iter {
            a.spmv(&p, &mut q);
            let pq = dot(&p, &q);
            if pq <= 0.0 {
                return Err(MsfemError::invalid(
                    "matrix is not positive definite (p^T K p <= 0 in CG)",
                ));
            }
            let alpha = rz / pq;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            iterations += 1;
            if norm2(&r) <= inner_tol {
                break;
            }
            prec.apply(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if iterations >= max_iter {
            break;
        }
    }
    let residual = relative_residual(a, &x, b, bnorm);
    let report = SolveReport {
        iterations,
        residual,
        seconds: start.elapsed().as_secs_f64(),
        method,
    };
    if residual <= tol {
        Ok((x, report))
    } else {
        Err(MsfemError::ConvergenceFailure(report))
    }
}

/// Right-preconditioned BiCGSTAB for general square systems.
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    prec: &dyn Preconditioner,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    check_square(a, b)?;
    let start = Instant::now();
    let method = format!("bicgstab+{}", prec.name());
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], SolveReport::trivial(&method)));
    }
    let mut x = vec![0.0; n];
    let mut iterations = 0;
    let (mut ph, mut sh, mut v, mut t) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    'outer: for _restart in 0..4 {
        let mut r = a.mul_vec(&x);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        if norm2(&r) / bnorm <= tol {
            break;
        }
        let r0 = r.clone();
        let mut p = vec![0.0; n];
        v.iter_mut().for_each(|e| *e = 0.0);
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        while iterations < max_iter {
            let rho_new = dot(&r0, &r);
            if rho_new == 0.0 {
                continue 'outer;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            prec.apply(&p, &mut ph);
            a.spmv(&ph, &mut v);
            alpha = rho / dot(&r0, &v);
            let mut s = r.clone();
            for i in 0..n {
                s[i] -= alpha * v[i];
            }
            iterations += 1;
            if norm2(&s) <= 0.5 * tol * bnorm {
                for i in 0..n {
                    x[i] += alpha * ph[i];
                }
                break;
            }
            prec.apply(&s, &mut sh);
            a.spmv(&sh, &mut t);
            let tt = dot(&t, &t);
            omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
            for i in 0..n {
                x[i] += alpha * ph[i] + omega * sh[i];
                r[i] = s[i] - omega * t[i];
            }
            if norm2(&r) <= 0.5 * tol * bnorm || omega == 0.0 {
                break;
            }
        }
        if iterations >= max_iter {
            break;
        }
    }
    let residual = relative_residual(a, &x, b, bnorm);
    let report = SolveReport {
        iterations,
        residual,
        seconds: start.elapsed().as_secs_f64(),
        method,
    };
    if residual <= tol {
        Ok((x, report))
    } else {
        Err(MsfemError::ConvergenceFailure(report))
    }
}

/// Cholesky for symmetric matrices (falling back to LU), LU otherwise.
pub fn solve_dense(a: &CsrMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveReport)> {
    check_square(a, b)?;
    let start = Instant::now();
    let n = b.len();
    if n == 0 {
        return Ok((Vec::new(), SolveReport::trivial("dense")));
    }
    let dense = a.to_dense();
    let rhs = DVector::from_column_slice(b);
    let (x, method) = match (a.is_symmetric(1e-12), dense.clone().cholesky()) {
        (true, Some(ch)) => (ch.solve(&rhs), "dense-cholesky"),
        _ => {
            let lu = dense.lu();
            let x = lu
                .solve(&rhs)
                .ok_or_else(|| MsfemError::invalid("matrix is singular"))?;
            (x, "dense-lu")
        }
    };
    let x: Vec<f64> = x.iter().copied().collect();
    let bnorm = norm2(b);
    let residual = if bnorm > 0.0 {
        relative_residual(a, &x, b, bnorm)
    } else {
        0.0
    };
    Ok((
        x,
        SolveReport {
            iterations: 1,
            residual,
            seconds: start.elapsed().as_secs_f64(),
            method: method.to_string(),
        },
    ))
}

/// Solves `K x = b` according to `opts`. Symmetric systems use Jacobi-CG,
/// nonsymmetric ones BiCGSTAB, and small systems a dense factorization.
pub fn solve_sparse(a: &CsrMatrix, b: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, SolveReport)> {
    check_square(a, b)?;
    let symmetric = a.is_symmetric(1e-12);
    let method = match opts.method {
        Method::Auto if b.len() < opts.dense_threshold => Method::Direct,
        Method::Auto if symmetric => Method::Cg,
        Method::Auto => Method::BiCgStab,
        Method::Cg if !symmetric => Method::BiCgStab,
        m => m,
    };
    let out = match method {
        Method::Direct => solve_dense(a, b)?,
        Method::Cg => pcg(a, b, None, &Jacobi::new(a), opts.tol, opts.max_iter)?,
        _ => bicgstab(a, b, &Jacobi::new(a), opts.tol, opts.max_iter)?,
    };
    if out.1.residual > opts.tol.max(1e-10) {
        return Err(MsfemError::ConvergenceFailure(out.1));
    }
    Ok(out)
}

struct Level {
    a: CsrMatrix,
    /// Prolongation from the next coarser level.
    p: CsrMatrix,
    pt: CsrMatrix,
}

enum Coarse {
    Empty,
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Smooth(CsrMatrix),
}

/// Geometric multigrid V-cycle with symmetric Gauss-Seidel smoothing and
/// Galerkin coarse operators. Symmetric, hence usable inside CG.
pub struct Multigrid {
    /// Finest first; `levels[k].p` maps level `k+1` to level `k`.
    levels: Vec<Level>,
    coarse_a: CsrMatrix,
    coarse: Coarse,
    sweeps: usize,
}

const COARSE_DENSE_LIMIT: usize = 1500;
const COARSEN_STOP: usize = 200;

impl Multigrid {
    /// `a` acts on the free DOFs of the finest level of `hierarchy`;
    /// `free[v*m + c]` marks them among all DOFs of the finest level.
    pub fn new(a: &CsrMatrix, hierarchy: &Hierarchy, free: &[bool], m: usize) -> Result<Self> {
        let n_free = free.iter().filter(|&&f| f).count();
        if n_free != a.n_rows() {
            return Err(MsfemError::invalid("free mask does not match matrix size"));
        }
        let mut levels = Vec::new();
        let mut fine_free = free.to_vec();
        let mut current = a.clone();
        for step in hierarchy.steps.iter().rev() {
            if current.n_rows() <= COARSEN_STOP {
                break;
            }
            if fine_free.len() != step.fine_vertices() * m {
                return Err(MsfemError::invalid("hierarchy does not match DOF layout"));
            }
            let coarse_free: Vec<bool> = fine_free[..step.coarse_vertices * m].to_vec();
            let number = |mask: &[bool]| {
                let mut idx = vec![usize::MAX; mask.len()];
                let mut k = 0;
                for (i, &f) in mask.iter().enumerate() {
                    if f {
                        idx[i] = k;
                        k += 1;
                    }
                }
                (idx, k)
            };
            let (fidx, nf) = number(&fine_free);
            let (cidx, nc) = number(&coarse_free);
            let mut t = Vec::with_capacity(nf * 2);
            for v in 0..step.coarse_vertices {
                for c in 0..m {
                    let d = v * m + c;
                    if fine_free[d] {
                        t.push((fidx[d], cidx[d], 1.0));
                    }
                }
            }
            for (k, &[a0, a1]) in step.midpoints.iter().enumerate() {
                let v = step.coarse_vertices + k;
                for c in 0..m {
                    let d = v * m + c;
                    if !fine_free[d] {
                        continue;
                    }
                    for par in [a0, a1] {
                        let pd = par * m + c;
                        if coarse_free[pd] {
                            t.push((fidx[d], cidx[pd], 0.5));
                        }
                    }
                }
            }
            let p = CsrMatrix::from_triplets(nf, nc, &t)?;
            let pt = p.transpose();
            let coarse = pt.matmul(&current.matmul(&p));
            levels.push(Level { a: current, p, pt });
            current = coarse;
            fine_free = coarse_free;
        }
        let coarse = if current.n_rows() == 0 {
            Coarse::Empty
        } else if current.n_rows() <= COARSE_DENSE_LIMIT {
            match current.to_dense().cholesky() {
                Some(ch) => Coarse::Cholesky(ch),
                None => Coarse::Smooth(current.clone()),
            }
        } else {
            Coarse::Smooth(current.clone())
        };
        Ok(Multigrid {
            levels,
            coarse_a: current,
            coarse,
            sweeps: 1,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len() + 1
    }

    fn solve_coarse(&self, b: &[f64], x: &mut [f64]) {
        match &self.coarse {
            Coarse::Empty => {}
            Coarse::Cholesky(ch) => {
                let s = ch.solve(&DVector::from_column_slice(b));
                x.copy_from_slice(s.as_slice());
            }
            Coarse::Smooth(a) => {
                x.iter_mut().for_each(|v| *v = 0.0);
                for _ in 0..20 {
                    gauss_seidel(a, b, x, false);
                    gauss_seidel(a, b, x, true);
                }
            }
        }
    }

    fn vcycle(&self, l: usize, b: &[f64], x: &mut [f64]) {
        if l == self.levels.len() {
            self.solve_coarse(b, x);
            return;
        }
        let lev = &self.levels[l];
        x.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..self.sweeps {
            gauss_seidel(&lev.a, b, x, false);
        }
        let mut r = lev.a.mul_vec(x);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let rc = lev.pt.mul_vec(&r);
        let mut xc = vec![0.0; rc.len()];
        self.vcycle(l + 1, &rc, &mut xc);
        let corr = lev.p.mul_vec(&xc);
        for (xi, ci) in x.iter_mut().zip(&corr) {
            *xi += ci;
        }
        for _ in 0..self.sweeps {
            gauss_seidel(&lev.a, b, x, true);
        }
    }

    /// Matrix of the coarsest level.
    pub fn coarsest(&self) -> &CsrMatrix {
        &self.coarse_a
    }
}

impl Preconditioner for Multigrid {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        self.vcycle(0, r, z);
    }
    fn name(&self) -> &'static str {
        "multigrid"
    }
}

fn gauss_seidel(a: &CsrMatrix, b: &[f64], x: &mut [f64], backward: bool) {
    let n = b.len();
    let mut step = |i: usize| {
        let (cols, vals) = a.row(i);
        let mut s = b[i];
        let mut d = 0.0;
        for (&j, &v) in cols.iter().zip(vals) {
            if j == i {
                d = v;
            } else {
                s -= v * x[j];
            }
        }
        if d != 0.0 {
            x[i] = s / d;
        }
    };
    if backward {
        (0..n).rev().for_each(&mut step);
    } else {
        (0..n).for_each(&mut step);
    }
}

/// Dense symmetric factorization reused for many right-hand sides.
pub struct DenseCholesky {
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl DenseCholesky {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let d: DMatrix<f64> = a.to_dense();
        let factor = d
            .cholesky()
            .ok_or_else(|| MsfemError::invalid("matrix is not positive definite"))?;
        Ok(DenseCholesky { factor })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        if b.is_empty() {
            return Vec::new();
        }
        self.factor.solve(&DVector::from_column_slice(b)).as_slice().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_in_one_iteration() {
        let a = CsrMatrix::identity(5);
        let b = vec![1.0, -2.0, 3.0, 0.5, 7.0];
        let (x, rep) = pcg(&a, &b, None, &Identity, 1e-12, 10).unwrap();
        assert_eq!(x, b);
        assert_eq!(rep.iterations, 1);
    }

    #[test]
    fn two_by_two() {
        let a = CsrMatrix::from_dense(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        for method in [Method::Cg, Method::Direct, Method::BiCgStab] {
            let opts = SolverOptions {
                tol: 1e-12,
                method,
                ..Default::default()
            };
            let (x, _) = solve_sparse(&a, &[3.0, 3.0], &opts).unwrap();
            assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12, "{method:?}");
        }
    }

    fn random_spd(n: usize, seed: u64) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let s = &g * g.transpose() / n as f64 + DMatrix::identity(n, n);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| s[(i, j)]).collect()).collect();
        CsrMatrix::from_dense(&rows)
    }

    #[test]
    fn random_spd_matches_dense() {
        let a = random_spd(50, 3);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let tol = 1e-10;
        let (x, rep) = pcg(&a, &b, None, &Jacobi::new(&a), tol, 10_000).unwrap();
        assert!(rep.residual <= tol);
        let (xd, _) = solve_dense(&a, &b).unwrap();
        let err = x.iter().zip(&xd).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let scale = xd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 10.0 * tol * scale, "err {err}");
    }

    #[test]
    fn nonsymmetric_goes_to_bicgstab() {
        let a = CsrMatrix::from_dense(&[
            vec![4.0, 1.0, 0.0],
            vec![0.5, 3.0, 1.0],
            vec![0.0, -1.0, 2.0],
        ]);
        let b = [1.0, 2.0, 3.0];
        let opts = SolverOptions {
            tol: 1e-12,
            method: Method::Cg,
            ..Default::default()
        };
        let (x, rep) = solve_sparse(&a, &b, &opts).unwrap();
        assert!(rep.method.starts_with("bicgstab"));
        let (xd, _) = solve_dense(&a, &b).unwrap();
        for (p, q) in x.iter().zip(&xd) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn iteration_cap_reports_failure() {
        let a = random_spd(40, 9);
        let b = vec![1.0; 40];
        match pcg(&a, &b, None, &Identity, 1e-14, 2) {
            Err(MsfemError::ConvergenceFailure(rep)) => assert_eq!(rep.iterations, 2),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn zero_rhs() {
        let a = random_spd(4, 1);
        let (x, rep) = solve_sparse(&a, &[0.0; 4], &SolverOptions::default()).unwrap();
        assert_eq!(x, vec![0.0; 4]);
        assert_eq!(rep.residual, 0.0);
    }
}
