//! Periodic cell problems, homogenized tensors, first-order approximations
//! and multiplier diagnostics.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coeff::{check_ellipticity, frac, CoefficientField, FieldDescriptor, Tensor, DIM, MAX_M};
use crate::error::{MsfemError, Result};
use crate::fem::{element_stiffness, FeFunction, Material};
use crate::mesh::{barycentric_gradients, build_structured_triangulation, signed_area, ElementLocator, Mesh, Point, Rect};
use crate::quadrature::QuadratureOrder;
use crate::solver::{pcg, Jacobi};
use crate::sparse::CsrMatrix;

/// Default resolution of the cell mesh.
pub const DEFAULT_N_CELL: usize = 64;

/// Periodic correctors `chi_j^b` on a uniform `n x n` triangulation of the
/// unit cell. Vertex `(i, j)` of the periodic grid has index `j n + i`.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    n_cell: usize,
    m: usize,
    descriptor: FieldDescriptor,
    /// `chi[j*m + b][v*m + g]`: component `g` of `chi_j^b` at periodic vertex `v`.
    chi: Vec<Vec<f64>>,
    /// `grads[j*m + b][e][g*2 + k] = d chi_j^{gb} / d y_k` on cell element `e`.
    grads: Vec<Vec<[f64; DIM * MAX_M]>>,
    /// Largest relative residual over the periodic solves.
    pub residual: f64,
    pub iterations: usize,
}

fn periodic_index(n: usize, v: usize) -> usize {
    let (i, j) = (v % (n + 1), v / (n + 1));
    (j % n) * n + (i % n)
}

/// Solves `a_Y(chi_j^b, psi) = -a_Y(y_j e^b, psi)` for all `j, b` with
/// periodic DOF identification; one DOF is pinned and the mean removed.
pub fn solve_corrector(field: &CoefficientField, n_cell: usize) -> Result<CorrectorSet> {
    if n_cell < 4 {
        return Err(MsfemError::invalid(format!("n_cell must be at least 4, got {n_cell}")));
    }
    check_ellipticity(field, (n_cell * n_cell).min(4096), 16)?;
    let n = n_cell;
    let m = field.m();
    let mesh = build_structured_triangulation(Rect::UNIT, n)?;
    let pidx: Vec<usize> = (0..mesh.n_vertices()).map(|v| periodic_index(n, v)).collect();
    let ndof = n * n * m;
    let dm = DIM * m;

    let mut rows = vec![Vec::new(); ndof];
    for el in mesh.elements() {
        for &a in el {
            for &b in el {
                for p in 0..m {
                    for q in 0..m {
                        rows[pidx[a] * m + p].push(pidx[b] * m + q);
                    }
                }
            }
        }
    }
    let mut k = CsrMatrix::from_pattern(ndof, ndof, rows);
    let mut rhs = vec![vec![0.0; ndof]; dm];
    let mat = Material::Oscillating { field, eps: 1.0 };
    for (e, el) in mesh.elements().iter().enumerate() {
        let tri = mesh.triangle(e);
        let a = mat.average(&tri, QuadratureOrder::Midpoint);
        let ke = element_stiffness(&tri, &a);
        let g = barycentric_gradients(&tri);
        let area = signed_area(&tri);
        for la in 0..3 {
            for p in 0..m {
                let row = pidx[el[la]] * m + p;
                for lb in 0..3 {
                    for q in 0..m {
                        k.add_at(row, pidx[el[lb]] * m + q, ke[(la * m + p) * 3 * m + lb * m + q]);
                    }
                }
                // -int grad(lambda_a e^p) : A grad(y_j e^b)
                for j in 0..DIM {
                    for b in 0..m {
                        let s: f64 = (0..DIM).map(|i| a.get(p, i, b, j) * g[la][i]).sum();
                        rhs[j * m + b][row] -= area * s;
                    }
                }
            }
        }
    }

    // pin all components at periodic vertex 0
    let free: Vec<usize> = (m..ndof).collect();
    let kff = k.submatrix(&free, &free);
    let prec = Jacobi::new(&kff);
    let mut chi = Vec::with_capacity(dm);
    let mut residual = 0.0f64;
    let mut iterations = 0;
    for r in &rhs {
        let b: Vec<f64> = free.iter().map(|&i| r[i]).collect();
        let (x, rep) = pcg(&kff, &b, None, &prec, 1e-12, 50 * ndof + 1000)?;
        residual = residual.max(rep.residual);
        iterations += rep.iterations;
        let mut full = vec![0.0; ndof];
        for (&i, &v) in free.iter().zip(&x) {
            full[i] = v;
        }
        // uniform periodic grid: every vertex carries the same mass n^-2
        for g in 0..m {
            let mean = (0..n * n).map(|v| full[v * m + g]).sum::<f64>() / (n * n) as f64;
            for v in 0..n * n {
                full[v * m + g] -= mean;
            }
        }
        chi.push(full);
    }

    let grads = chi
        .iter()
        .map(|c| {
            (0..mesh.n_elements())
                .map(|e| {
                    let el = mesh.elements()[e];
                    let g = barycentric_gradients(&mesh.triangle(e));
                    let mut out = [0.0; DIM * MAX_M];
                    for gm in 0..m {
                        for kk in 0..DIM {
                            out[gm * DIM + kk] = (0..3).map(|a| c[pidx[el[a]] * m + gm] * g[a][kk]).sum();
                        }
                    }
                    out
                })
                .collect()
        })
        .collect();
    Ok(CorrectorSet {
        n_cell: n,
        m,
        descriptor: field.descriptor().clone(),
        chi,
        grads,
        residual,
        iterations,
    })
}

impl CorrectorSet {
    pub fn n_cell(&self) -> usize {
        self.n_cell
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn descriptor(&self) -> &FieldDescriptor {
        &self.descriptor
    }

    /// Periodic nodal values of `chi_j^b` (`j` in 0..2).
    pub fn values(&self, j: usize, b: usize) -> &[f64] {
        &self.chi[j * self.m + b]
    }

    /// Cell element containing `y mod 1`.
    #[inline]
    pub fn element_at(&self, y: Point) -> usize {
        let n = self.n_cell as f64;
        let (s, t) = (frac(y[0]) * n, frac(y[1]) * n);
        let i = (s as usize).min(self.n_cell - 1);
        let j = (t as usize).min(self.n_cell - 1);
        let upper = (t - j as f64) > (s - i as f64);
        2 * (j * self.n_cell + i) + usize::from(upper)
    }

    /// `d chi_j^{gb} / d y_k` at `y`, as `[g*2 + k]`.
    #[inline]
    pub fn gradient(&self, j: usize, b: usize, y: Point) -> [f64; DIM * MAX_M] {
        self.grads[j * self.m + b][self.element_at(y)]
    }

    /// Piecewise-linear interpolation of `chi_j^b(y)`.
    pub fn value(&self, j: usize, b: usize, y: Point) -> [f64; MAX_M] {
        let n = self.n_cell;
        let nf = n as f64;
        let (s, t) = (frac(y[0]) * nf, frac(y[1]) * nf);
        let i0 = (s as usize).min(n - 1);
        let j0 = (t as usize).min(n - 1);
        let (u, w) = (s - i0 as f64, t - j0 as f64);
        let idx = |di: usize, dj: usize| ((j0 + dj) % n) * n + (i0 + di) % n;
        let c = &self.chi[j * self.m + b];
        // lower triangle (00, 10, 11) or upper (00, 11, 01)
        let (verts, lam) = if w <= u {
            ([idx(0, 0), idx(1, 0), idx(1, 1)], [1.0 - u, u - w, w])
        } else {
            ([idx(0, 0), idx(1, 1), idx(0, 1)], [1.0 - w, u, w - u])
        };
        let mut out = [0.0; MAX_M];
        for g in 0..self.m {
            out[g] = (0..3).map(|a| lam[a] * c[verts[a] * self.m + g]).sum();
        }
        out
    }

    /// `int_Y chi_j^b` per component (exact for P1).
    pub fn mean(&self, j: usize, b: usize) -> [f64; MAX_M] {
        let n2 = (self.n_cell * self.n_cell) as f64;
        let c = &self.chi[j * self.m + b];
        let mut out = [0.0; MAX_M];
        for g in 0..self.m {
            out[g] = (0..self.n_cell * self.n_cell).map(|v| c[v * self.m + g]).sum::<f64>() / n2;
        }
        out
    }

    /// `|grad chi_j^b|_{L^2(Y)}`.
    pub fn grad_l2(&self, j: usize, b: usize) -> f64 {
        let area = 0.5 / (self.n_cell * self.n_cell) as f64;
        self.grads[j * self.m + b]
            .iter()
            .map(|g| g[..DIM * self.m].iter().map(|v| v * v).sum::<f64>() * area)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.chi.iter().flatten().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Frobenius norm of the full corrector gradient on cell element `e`.
    fn frobenius(&self, e: usize) -> f64 {
        self.grads
            .iter()
            .map(|g| g[e][..DIM * self.m].iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Corrector `chi_j^b` on the (non-periodic) cell mesh, for export.
    pub fn to_fe_function(&self, j: usize, b: usize) -> Result<FeFunction> {
        let mesh = Arc::new(build_structured_triangulation(Rect::UNIT, self.n_cell)?);
        let c = &self.chi[j * self.m + b];
        let m = self.m;
        let values = (0..mesh.n_vertices())
            .flat_map(|v| {
                let p = periodic_index(self.n_cell, v);
                (0..m).map(move |g| c[p * m + g])
            })
            .collect();
        FeFunction::new(mesh, m, values)
    }

    /// CSV with one row per periodic vertex: `y1,y2,chi_<j>_<b>_<g>...`.
    pub fn to_csv(&self) -> String {
        let n = self.n_cell;
        let mut s = String::from("y1,y2");
        for j in 0..DIM {
            for b in 0..self.m {
                for g in 0..self.m {
                    let _ = write!(s, ",chi_{}_{}_{}", j + 1, b + 1, g + 1);
                }
            }
        }
        s.push('\n');
        for v in 0..n * n {
            let _ = write!(s, "{},{}", (v % n) as f64 / n as f64, (v / n) as f64 / n as f64);
            for c in &self.chi {
                for g in 0..self.m {
                    let _ = write!(s, ",{:.12e}", c[v * self.m + g]);
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Effective tensor together with the cell resolution it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogenizedTensor {
    pub tensor: Tensor,
    pub n_cell: usize,
}

impl HomogenizedTensor {
    /// CSV with one row per `dm x dm` matrix row.
    pub fn to_csv(&self) -> String {
        let dm = self.tensor.dm();
        let mut s = String::new();
        for r in 0..dm {
            let row: Vec<String> = (0..dm).map(|c| format!("{:.12e}", self.tensor.at(r, c))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// `a^_ij^{ab} = mean over Y of (a_ij^{ab} + a_ik^{ag} d chi_j^{gb} / d y_k)`.
pub fn homogenized_tensor(field: &CoefficientField, correctors: &CorrectorSet) -> Result<HomogenizedTensor> {
    if field.descriptor() != correctors.descriptor() || field.m() != correctors.m {
        return Err(MsfemError::invalid("correctors were computed for a different field"));
    }
    let m = field.m();
    let n = correctors.n_cell;
    let mesh = build_structured_triangulation(Rect::UNIT, n)?;
    let mat = Material::Oscillating { field, eps: 1.0 };
    let area = 0.5 / (n * n) as f64;
    let mut hat = Tensor::zeros(m);
    for e in 0..mesh.n_elements() {
        let tri = mesh.triangle(e);
        let a = mat.average(&tri, QuadratureOrder::Midpoint);
        for al in 0..m {
            for i in 0..DIM {
                for b in 0..m {
                    for j in 0..DIM {
                        let g = &correctors.grads[j * m + b][e];
                        let mut v = a.get(al, i, b, j);
                        for gm in 0..m {
                            for k in 0..DIM {
                                v += a.get(al, i, gm, k) * g[gm * DIM + k];
                            }
                        }
                        *hat.at_mut(al * DIM + i, b * DIM + j) += area * v;
                    }
                }
            }
        }
    }
    Ok(HomogenizedTensor { tensor: hat, n_cell: n })
}

/// Analytic gradient of `u0`, as `[b*2 + j]`.
pub type GradientFn<'a> = &'a (dyn Fn(Point) -> [f64; DIM * MAX_M] + Sync);

/// Area-weighted average of the element gradients around each vertex.
pub fn recovered_gradients(u: &FeFunction) -> Vec<[f64; DIM * MAX_M]> {
    let mesh = &u.mesh;
    let mut acc = vec![[0.0; DIM * MAX_M]; mesh.n_vertices()];
    let mut wsum = vec![0.0; mesh.n_vertices()];
    for e in 0..mesh.n_elements() {
        let g = u.gradient(e);
        let w = mesh.area(e);
        for &v in &mesh.elements()[e] {
            for (a, gv) in acc[v].iter_mut().zip(&g) {
                *a += w * gv;
            }
            wsum[v] += w;
        }
    }
    for (a, w) in acc.iter_mut().zip(&wsum) {
        a.iter_mut().for_each(|v| *v /= w);
    }
    acc
}

/// Nodal interpolant on `target` of `u0 + eps chi(x/eps) grad u0`.
///
/// `u0` is evaluated by point location unless it already lives on `target`;
/// its gradient is the recovered nodal gradient unless `grad` is supplied.
pub fn first_order_approx(
    u0: &FeFunction,
    correctors: &CorrectorSet,
    eps: f64,
    target: Arc<Mesh>,
    grad: Option<GradientFn<'_>>,
) -> Result<FeFunction> {
    if !(eps > 0.0) {
        return Err(MsfemError::invalid(format!("eps must be positive, got {eps}")));
    }
    let m = u0.m;
    if m != correctors.m {
        return Err(MsfemError::invalid("u0 and correctors have different m"));
    }
    let same = Arc::ptr_eq(&u0.mesh, &target) || u0.mesh.same_as(&target);
    let (base, nodal_grads): (Vec<f64>, Vec<[f64; DIM * MAX_M]>) = if same {
        (u0.values.clone(), recovered_gradients(u0))
    } else {
        let loc = ElementLocator::new(u0.mesh.clone());
        let mut vals = Vec::with_capacity(target.n_vertices() * m);
        let mut grads = Vec::with_capacity(target.n_vertices());
        for &x in target.vertices() {
            let hits = loc.locate_all(x);
            let (e, lam) = *hits
                .first()
                .ok_or_else(|| MsfemError::invalid(format!("target vertex {x:?} is outside the mesh of u0")))?;
            let ev = u0.element_values(e);
            for p in 0..m {
                vals.push((0..3).map(|a| lam[a] * ev[a][p]).sum());
            }
            // average the element gradients of every element touching x
            let mut g = [0.0; DIM * MAX_M];
            for &(e, _) in &hits {
                let ge = u0.gradient(e);
                for (a, b) in g.iter_mut().zip(&ge) {
                    *a += b / hits.len() as f64;
                }
            }
            grads.push(g);
        }
        (vals, grads)
    };
    let mut values = base;
    for (v, &x) in target.vertices().iter().enumerate() {
        let g = match grad {
            Some(f) => f(x),
            None => nodal_grads[v],
        };
        let y = [x[0] / eps, x[1] / eps];
        for j in 0..DIM {
            for b in 0..m {
                let c = correctors.value(j, b, y);
                for al in 0..m {
                    values[v * m + al] += eps * c[al] * g[b * DIM + j];
                }
            }
        }
    }
    FeFunction::new(target, m, values)
}

/// `(int_Y |grad chi|^p)^(1/p)` with `|.|` the Frobenius norm over all
/// correctors and components.
pub fn corrector_lp_gradient(correctors: &CorrectorSet, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(MsfemError::invalid(format!("p must be at least 1, got {p}")));
    }
    let area = 0.5 / (correctors.n_cell * correctors.n_cell) as f64;
    let ne = 2 * correctors.n_cell * correctors.n_cell;
    let s: f64 = (0..ne).map(|e| area * correctors.frobenius(e).powf(p)).sum();
    Ok(s.powf(1.0 / p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierVariant {
    /// Right side `|D|^(1/2 - 1/d) (|psi|_{L^d} + eps |grad psi|_{L^d})`.
    W1d,
    /// Right side `(1 + |chi|_inf) (|psi|_{L^2} + eps |grad psi|_{L^2})`.
    Linf,
}

/// `eps |grad chi(x/eps) psi|_{L^2(D)}` divided by the right side of the
/// multiplier estimate, with `D` the mesh of `psi` (here `d = 2`).
pub fn multiplier_diagnostic(
    correctors: &CorrectorSet,
    eps: f64,
    psi: &FeFunction,
    variant: MultiplierVariant,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(MsfemError::invalid(format!("eps must be positive, got {eps}")));
    }
    let m = correctors.m;
    if psi.m != m {
        return Err(MsfemError::invalid("psi and correctors have different m"));
    }
    let mesh = &psi.mesh;
    let mut num = 0.0;
    for e in 0..mesh.n_elements() {
        let tri = mesh.triangle(e);
        let vals = psi.element_values(e);
        let area = signed_area(&tri);
        // sub-triangles small enough to sit inside single cell elements
        let s = ((crate::mesh::diameter(&tri) * correctors.n_cell as f64 / eps).ceil() as usize).max(1);
        let sub_area = area / (s * s) as f64;
        let sf = s as f64;
        for a in 0..s {
            for b in 0..(s - a) {
                let mut centers = vec![[(a as f64 + 1.0 / 3.0) / sf, (b as f64 + 1.0 / 3.0) / sf]];
                if a + b + 1 < s {
                    centers.push([(a as f64 + 2.0 / 3.0) / sf, (b as f64 + 2.0 / 3.0) / sf]);
                }
                for [l1, l2] in centers {
                    let lam = [1.0 - l1 - l2, l1, l2];
                    let x = crate::quadrature::map_point(&tri, &lam);
                    let mut pv = [0.0; MAX_M];
                    for (p, out) in pv.iter_mut().enumerate().take(m) {
                        *out = (0..3).map(|k| lam[k] * vals[k][p]).sum();
                    }
                    let y = [x[0] / eps, x[1] / eps];
                    let ce = correctors.element_at(y);
                    // (grad chi psi)_{g,k,j} = sum_b d_k chi_j^{gb} psi_b
                    let mut n2 = 0.0;
                    for j in 0..DIM {
                        for g in 0..m {
                            for k in 0..DIM {
                                let v: f64 = (0..m)
                                    .map(|b| correctors.grads[j * m + b][ce][g * DIM + k] * pv[b])
                                    .sum();
                                n2 += v * v;
                            }
                        }
                    }
                    num += sub_area * n2;
                }
            }
        }
    }
    let num = num.sqrt();
    let d = DIM as f64;
    let grad_norm = |p: f64| -> f64 {
        (0..mesh.n_elements())
            .map(|e| {
                let g = psi.gradient(e);
                mesh.area(e) * g[..DIM * m].iter().map(|v| v * v).sum::<f64>().sqrt().powf(p)
            })
            .sum::<f64>()
            .powf(1.0 / p)
    };
    let denom = match variant {
        MultiplierVariant::W1d => {
            let vol = mesh.total_area();
            vol.powf(0.5 - 1.0 / d) * (psi.lp_norm(d) + eps * grad_norm(d))
        }
        MultiplierVariant::Linf => (1.0 + correctors.max_abs()) * (psi.l2_norm() + eps * grad_norm(2.0)),
    };
    if denom == 0.0 {
        return Err(MsfemError::invalid("psi vanishes identically"));
    }
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laminate() -> CoefficientField {
        CoefficientField::laminate(1.0, 4.0, 1).unwrap()
    }

    /// Three-point finite differences for `(a (1 + chi'))' = 0` on a periodic
    /// 1D grid with `a` sampled at cell midpoints; returns the effective
    /// coefficient (harmonic mean of the flux) and `chi'` per cell.
    fn fd_1d(a: impl Fn(f64) -> f64, n: usize) -> (f64, Vec<f64>) {
        let h = 1.0 / n as f64;
        let am: Vec<f64> = (0..n).map(|i| a((i as f64 + 0.5) * h)).collect();
        // constant flux q = a (1 + chi') with chi' averaging to zero
        let inv: f64 = am.iter().map(|v| 1.0 / v).sum::<f64>() * h;
        let q = 1.0 / inv;
        (q, am.iter().map(|v| q / v - 1.0).collect())
    }

    #[test]
    fn constant_field_has_zero_correctors() {
        let f = CoefficientField::isotropic(2.5);
        let c = solve_corrector(&f, 8).unwrap();
        assert!(c.max_abs() < 1e-10);
        let hat = homogenized_tensor(&f, &c).unwrap();
        assert!(hat.tensor.max_abs_diff(&Tensor::isotropic(1, 2.5)) < 1e-12);
        assert_eq!(corrector_lp_gradient(&c, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn small_cell_rejected() {
        assert!(solve_corrector(&laminate(), 3).is_err());
    }

    #[test]
    fn laminate_correctors_match_one_dimensional_oracle() {
        let f = laminate();
        let c = solve_corrector(&f, 16).unwrap();
        let (q, dchi) = fd_1d(|y| if y < 0.5 { 1.0 } else { 4.0 }, 16);
        assert!((q - 1.6).abs() < 1e-12);
        for e in 0..2 * 16 * 16 {
            let col = (e / 2) % 16;
            let g = c.grads[0][e];
            assert!((g[0] - dchi[col]).abs() < 1e-9, "element {e}: {:?} vs {}", g, dchi[col]);
            assert!(g[1].abs() < 1e-9);
        }
        assert!(c.values(1, 0).iter().all(|v| v.abs() < 1e-10));
        // closed form: chi1 = 0.6 y - 0.15 on [0, 1/2]
        assert!((c.value(0, 0, [0.0, 0.3])[0] + 0.15).abs() < 1e-9);
        assert!((c.value(0, 0, [0.25, 0.7])[0]).abs() < 1e-9);
        let hat = homogenized_tensor(&f, &c).unwrap();
        assert!((hat.tensor.at(0, 0) - 1.6).abs() < 1e-10);
        assert!((hat.tensor.at(1, 1) - 2.5).abs() < 1e-10);
        assert!(hat.tensor.at(0, 1).abs() < 1e-12);
        let lp = corrector_lp_gradient(&c, 2.0).unwrap();
        assert!((lp - 0.6).abs() < 1e-9);
        let lp4 = corrector_lp_gradient(&c, 4.0).unwrap();
        assert!(lp4 >= lp - 1e-12);
    }

    #[test]
    fn mismatched_field_rejected() {
        let c = solve_corrector(&laminate(), 8).unwrap();
        assert!(homogenized_tensor(&CoefficientField::checkerboard(1.0, 4.0), &c).is_err());
    }

    #[test]
    fn corrector_invariants_for_builtin_fields() {
        let fields = vec![
            laminate(),
            CoefficientField::laminate(1.0, 4.0, 2).unwrap(),
            CoefficientField::checkerboard(1.0, 4.0),
            CoefficientField::trigonometric(2.0, 1.0),
            FieldDescriptor::LaminateSystem {
                a1: 1.0,
                a2: 4.0,
                direction: 1,
                fraction: 0.5,
                kappa: 0.5,
            }
            .build()
            .unwrap(),
        ];
        for f in fields {
            let b = check_ellipticity(&f, 4096, 16).unwrap();
            let c = solve_corrector(&f, 32).unwrap();
            assert!(c.residual <= 1e-10);
            for j in 0..2 {
                for beta in 0..f.m() {
                    for g in 0..f.m() {
                        assert!(c.mean(j, beta)[g].abs() <= 1e-10);
                    }
                    assert!(c.grad_l2(j, beta) <= b.big_lambda / b.lambda * 1.1);
                }
            }
            let hat = homogenized_tensor(&f, &c).unwrap();
            assert!(hat.tensor.is_symmetric(1e-10), "{:?}", f.descriptor());
            let hb = check_ellipticity(&CoefficientField::constant(hat.tensor), 1, 64).unwrap();
            assert!(hb.lambda >= b.lambda * (1.0 - 1e-3));
        }
    }

    #[test]
    fn first_order_with_zero_correctors_is_interpolant() {
        let f = CoefficientField::isotropic(1.0);
        let c = solve_corrector(&f, 8).unwrap();
        let mesh = Arc::new(build_structured_triangulation(Rect::UNIT, 10).unwrap());
        let u0 = FeFunction::interpolate(mesh.clone(), 1, |x, _| x[0] * x[1]);
        let u1 = first_order_approx(&u0, &c, 0.1, mesh.clone(), None).unwrap();
        assert_eq!(u1.values, u0.values);
        let fine = Arc::new(build_structured_triangulation(Rect::UNIT, 20).unwrap());
        let u1 = first_order_approx(&u0, &c, 0.1, fine.clone(), None).unwrap();
        for (v, x) in u1.values.iter().zip(fine.vertices()) {
            // bilinear interpolated exactly at nodes of the coarse grid only
            assert!((v - x[0] * x[1]).abs() < 0.01);
        }
        assert!(first_order_approx(&u0, &c, 0.0, mesh, None).is_err());
    }

    #[test]
    fn first_order_linear_laminate_is_exact_profile() {
        let c = solve_corrector(&laminate(), 16).unwrap();
        let mesh = Arc::new(build_structured_triangulation(Rect::UNIT, 32).unwrap());
        let u0 = FeFunction::interpolate(mesh.clone(), 1, |x, _| x[0] + 0.5 * x[1]);
        let eps = 0.125;
        let u1 = first_order_approx(&u0, &c, eps, mesh.clone(), None).unwrap();
        let chi = |t: f64| {
            let t = frac(t);
            if t < 0.5 {
                0.6 * t - 0.15
            } else {
                -0.6 * (t - 0.5) + 0.15
            }
        };
        for (i, x) in mesh.vertices().iter().enumerate() {
            let expected = x[0] + 0.5 * x[1] + eps * chi(x[0] / eps);
            assert!((u1.values[i] - expected).abs() < 1e-9, "{x:?}");
        }
    }

    #[test]
    fn multiplier_ratios_for_laminate() {
        let c = solve_corrector(&laminate(), 16).unwrap();
        let mesh = Arc::new(build_structured_triangulation(Rect::UNIT, 8).unwrap());
        let one = FeFunction::interpolate(mesh.clone(), 1, |_, _| 1.0);
        for eps in [0.125, 0.0625] {
            let r = multiplier_diagnostic(&c, eps, &one, MultiplierVariant::W1d).unwrap();
            assert!((r - 0.6).abs() < 1e-9, "{r}");
            let r = multiplier_diagnostic(&c, eps, &one, MultiplierVariant::Linf).unwrap();
            assert!((r - 0.6 / 1.15).abs() < 1e-9, "{r}");
        }
        let cc = solve_corrector(&CoefficientField::isotropic(1.0), 8).unwrap();
        assert_eq!(multiplier_diagnostic(&cc, 0.1, &one, MultiplierVariant::W1d).unwrap(), 0.0);
    }
}
