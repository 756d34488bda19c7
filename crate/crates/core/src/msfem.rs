//! Multiscale basis functions (plain and oversampled), the MsFEM Galerkin
//! system, and evaluation of MsFEM solutions on fine reference grids.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coeff::{DIM, MAX_M};
use crate::error::{MsfemError, Result};
use crate::fem::{
    assemble_load, assemble_stiffness, dof_mask, DirichletReduction, FeFunction, Material, Source, SpdSolver,
};
use crate::mesh::{
    barycentric, barycentric_gradients, diameter, hex_digest, oversample_patch, patch_mesh, refinement_levels,
    signed_area, sub_triangulate_levels, LocalMesh, Mesh, Patch, Point, Rect, RefinedGrid,
};
use crate::quadrature::QuadratureOrder;
use crate::solver::{solve_sparse, SolveReport, SolverOptions};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Local problems on the element itself with linear boundary data.
    Plain,
    /// Local problems on an enlarged simplex, restricted to the element.
    #[default]
    Oversampled,
    /// Standard hat functions represented on the fine sub-mesh.
    Linear,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Oversampled => "oversampled",
            Mode::Linear => "linear",
        }
    }
}

/// How the oversampled basis is normalized at the element vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `sum_k c_ik Q_k(x_j) = delta_ij` with `Q_k` the barycentric
    /// coordinates of the oversampling simplex.
    #[default]
    Linear,
    /// `sum_k c_ik psi_k(x_j) = delta_ij`, exact nodal duality.
    Nodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisOptions {
    pub mode: Mode,
    pub dilation: f64,
    /// Largest fine element diameter inside each element; `eps / 8` if unset.
    pub fine_target_h: Option<f64>,
    /// Explicit refinement depth of every element, overriding `fine_target_h`.
    pub levels: Option<usize>,
    pub normalization: Normalization,
    /// Relative residual for the local solves.
    pub tol: f64,
}

impl Default for BasisOptions {
    fn default() -> Self {
        BasisOptions {
            mode: Mode::Oversampled,
            dilation: 2.0,
            fine_target_h: None,
            levels: None,
            normalization: Normalization::Linear,
            tol: 1e-10,
        }
    }
}

impl BasisOptions {
    pub fn with_mode(mode: Mode) -> Self {
        BasisOptions {
            mode,
            ..Default::default()
        }
    }

    /// Refinement depth for the elements of `mesh` under `material`.
    pub fn resolve_levels(&self, mesh: &Mesh, material: &Material<'_>) -> Result<usize> {
        if let Some(l) = self.levels {
            return Ok(l);
        }
        let target = match (self.fine_target_h, material) {
            (Some(t), _) => t,
            (None, Material::Oscillating { eps, .. }) => eps / 8.0,
            (None, Material::Constant(_)) => return Ok(0),
        };
        if !(target > 0.0) {
            return Err(MsfemError::invalid("fine_target_h must be positive"));
        }
        if let Material::Oscillating { eps, .. } = material {
            if target > eps / 4.0 {
                return Err(MsfemError::invalid(format!(
                    "fine_target_h {target} does not resolve eps = {eps} (need at most eps/4)"
                )));
            }
        }
        let worst = (0..mesh.n_elements())
            .map(|e| refinement_levels(&mesh.triangle(e), target))
            .max()
            .unwrap_or(0);
        Ok(worst)
    }
}

/// Basis functions of one coarse element, stored on its fine sub-mesh.
#[derive(Debug, Clone)]
pub struct ElementBasis {
    pub local: Arc<LocalMesh>,
    /// `phi[i*m + b]`: values of `phi_i^b` at the sub-mesh vertices (`v*m + g`).
    pub phi: Vec<Vec<f64>>,
    /// `phi_i = sum_k c[i][k] psi_k`.
    pub c: [[f64; 3]; 3],
    pub patch: Option<Patch>,
    pub local_iterations: usize,
}

/// Multiscale basis over a coarse mesh.
#[derive(Debug, Clone)]
pub struct MsBasis {
    pub mode: Mode,
    pub m: usize,
    pub levels: usize,
    pub dilation: f64,
    pub normalization: Normalization,
    pub coarse: Arc<Mesh>,
    pub elements: Vec<ElementBasis>,
    pub key: String,
}

/// Harmonic extensions `L(psi_k^b) = 0` on `lm` with `psi_k^b = lambda_k e^b`
/// on the boundary, `lambda_k` the barycentric coordinates of `parent`.
fn harmonic_extensions(
    lm: &LocalMesh,
    parent: &[Point; 3],
    material: &Material<'_>,
    tol: f64,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let m = material.m();
    let mesh = &lm.mesh;
    let n = mesh.n_vertices() * m;
    let k = assemble_stiffness(mesh, *material, QuadratureOrder::Midpoint)?;
    let red = DirichletReduction::new(&k, &dof_mask(mesh.boundary(), m));
    let solver = SpdSolver::new(&red.k_ff, &lm.hierarchy, &red.free_mask, m, tol)?;
    let lam: Vec<[f64; 3]> = mesh.vertices().iter().map(|&x| barycentric(parent, x)).collect();
    let zero = vec![0.0; n];
    let mut out = Vec::with_capacity(3 * m);
    let mut iterations = 0;
    // the constant e^b is harmonic, so the last family follows from the others
    for kk in 0..2 {
        for b in 0..m {
            let mut g = vec![0.0; n];
            for (v, l) in lam.iter().enumerate() {
                g[v * m + b] = l[kk];
            }
            let rhs = red.reduce_rhs(&zero, &g);
            let guess: Vec<f64> = red.free.iter().map(|&d| g[d]).collect();
            let (x, rep) = solver.solve_from(&red.k_ff, &rhs, Some(&guess))?;
            iterations += rep.iterations;
            out.push(red.expand(&x, &g));
        }
    }
    for b in 0..m {
        let mut last = vec![0.0; n];
        for v in 0..mesh.n_vertices() {
            last[v * m + b] = 1.0;
        }
        for kk in 0..2 {
            for (x, p) in last.iter_mut().zip(&out[kk * m + b]) {
                *x -= p;
            }
        }
        out.push(last);
    }
    Ok((out, iterations))
}

fn hat_functions(lm: &LocalMesh, m: usize) -> Vec<Vec<f64>> {
    let parent = lm.parent_simplex;
    let lam: Vec<[f64; 3]> = lm.mesh.vertices().iter().map(|&x| barycentric(&parent, x)).collect();
    let mut out = Vec::with_capacity(3 * m);
    for i in 0..3 {
        for b in 0..m {
            let mut v = vec![0.0; lam.len() * m];
            for (k, l) in lam.iter().enumerate() {
                v[k * m + b] = l[i];
            }
            out.push(v);
        }
    }
    out
}

const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn build_element(
    e: usize,
    coarse: &Mesh,
    domain: Rect,
    material: &Material<'_>,
    opts: &BasisOptions,
    levels: usize,
) -> Result<ElementBasis> {
    let m = material.m();
    let tau = coarse.triangle(e);
    let local = Arc::new(sub_triangulate_levels(tau, levels)?);
    match opts.mode {
        Mode::Linear => Ok(ElementBasis {
            phi: hat_functions(&local, m),
            local,
            c: IDENTITY3,
            patch: None,
            local_iterations: 0,
        }),
        Mode::Plain => {
            let (phi, it) = harmonic_extensions(&local, &tau, material, opts.tol)?;
            Ok(ElementBasis {
                local,
                phi,
                c: IDENTITY3,
                patch: None,
                local_iterations: it,
            })
        }
        Mode::Oversampled => {
            let patch = oversample_patch(coarse, e, opts.dilation, domain)?;
            let pm = patch_mesh(&patch, &local)?;
            let (psi_patch, it) = harmonic_extensions(&pm.local, &patch.simplex, material, opts.tol)?;
            let psi: Vec<Vec<f64>> = psi_patch
                .iter()
                .map(|p| {
                    pm.tau_vertices
                        .iter()
                        .flat_map(|&pv| (0..m).map(move |g| p[pv * m + g]))
                        .collect()
                })
                .collect();
            // lam[k][j]: k-th sampled function at the j-th vertex of tau
            let mut lam = Matrix3::<f64>::zeros();
            for j in 0..3 {
                match opts.normalization {
                    Normalization::Linear => {
                        let l = barycentric(&patch.simplex, tau[j]);
                        for k in 0..3 {
                            lam[(k, j)] = l[k];
                        }
                    }
                    Normalization::Nodal => {
                        for k in 0..3 {
                            // vertex j of tau is vertex j of its sub-mesh
                            lam[(k, j)] = (0..m).map(|b| psi[k * m + b][j * m + b]).sum::<f64>() / m as f64;
                        }
                    }
                }
            }
            let det = lam.determinant();
            let cinv = lam.try_inverse().filter(|_| det.abs() > 1e-12).ok_or_else(|| MsfemError::Assembly {
                element: e,
                reason: format!("normalization matrix is singular (det {det:e})"),
            })?;
            let mut c = [[0.0; 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    c[i][k] = cinv[(i, k)];
                }
            }
            let nloc = local.mesh.n_vertices() * m;
            let mut phi = Vec::with_capacity(3 * m);
            for ci in &c {
                for b in 0..m {
                    let mut v = vec![0.0; nloc];
                    for k in 0..3 {
                        for (x, p) in v.iter_mut().zip(&psi[k * m + b]) {
                            *x += ci[k] * p;
                        }
                    }
                    phi.push(v);
                }
            }
            Ok(ElementBasis {
                local,
                phi,
                c,
                patch: Some(patch),
                local_iterations: it,
            })
        }
    }
}

/// Key identifying a basis for caching purposes.
pub fn basis_key(coarse: &Mesh, material: &Material<'_>, opts: &BasisOptions, levels: usize) -> String {
    let mat = match material {
        Material::Oscillating { field, eps } => format!(
            "field={};eps={:016x}",
            serde_json::to_string(field.descriptor()).unwrap_or_default(),
            eps.to_bits()
        ),
        Material::Constant(t) => format!("constant={}", serde_json::to_string(t).unwrap_or_default()),
    };
    let desc = format!(
        "MSB1;mesh={};{mat};levels={levels};mode={};dilation={:016x};norm={:?}",
        coarse.fingerprint(),
        opts.mode.as_str(),
        opts.dilation.to_bits(),
        opts.normalization
    );
    hex_digest(&Sha256::digest(desc.as_bytes()))
}

/// Builds the basis on every element of `coarse` (in parallel, order preserved).
pub fn build_basis(coarse: Arc<Mesh>, domain: Rect, material: &Material<'_>, opts: &BasisOptions) -> Result<MsBasis> {
    if opts.mode == Mode::Oversampled && !(opts.dilation >= 1.0) {
        return Err(MsfemError::invalid("dilation must be at least 1"));
    }
    let levels = opts.resolve_levels(&coarse, material)?;
    if let Material::Oscillating { eps, .. } = material {
        let fine_h = coarse.h() / (1u64 << levels) as f64;
        if fine_h > eps / 8.0 {
            log::warn!("fine resolution {fine_h:.3e} is coarser than eps/8 = {:.3e}", eps / 8.0);
        }
    }
    let elements = (0..coarse.n_elements())
        .into_par_iter()
        .map(|e| build_element(e, &coarse, domain, material, opts, levels).map_err(|err| err.on_element(e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MsBasis {
        mode: opts.mode,
        m: material.m(),
        levels,
        dilation: opts.dilation,
        normalization: opts.normalization,
        key: basis_key(&coarse, material, opts, levels),
        coarse,
        elements,
    })
}

pub fn build_basis_plain(coarse: Arc<Mesh>, domain: Rect, material: &Material<'_>, fine_target_h: Option<f64>) -> Result<MsBasis> {
    let opts = BasisOptions {
        mode: Mode::Plain,
        fine_target_h,
        ..Default::default()
    };
    build_basis(coarse, domain, material, &opts)
}

pub fn build_basis_oversampled(
    coarse: Arc<Mesh>,
    domain: Rect,
    material: &Material<'_>,
    dilation: f64,
    fine_target_h: Option<f64>,
) -> Result<MsBasis> {
    let opts = BasisOptions {
        mode: Mode::Oversampled,
        dilation,
        fine_target_h,
        ..Default::default()
    };
    build_basis(coarse, domain, material, &opts)
}

/// Same as [`build_basis`], reading from and writing to `cache_dir`.
pub fn build_basis_cached(
    coarse: Arc<Mesh>,
    domain: Rect,
    material: &Material<'_>,
    opts: &BasisOptions,
    cache_dir: Option<&Path>,
) -> Result<MsBasis> {
    let Some(dir) = cache_dir else {
        return build_basis(coarse, domain, material, opts);
    };
    let levels = opts.resolve_levels(&coarse, material)?;
    let key = basis_key(&coarse, material, opts, levels);
    let path = cache_path(dir, &key);
    if path.exists() {
        match MsBasis::read_cache(&path, coarse.clone()) {
            Ok(b) if b.key == key => return Ok(b),
            Ok(_) => log::warn!("cache entry {} has a mismatched key; rebuilding", path.display()),
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
        }
    }
    let basis = build_basis(coarse, domain, material, opts)?;
    std::fs::create_dir_all(dir)?;
    // write then rename so concurrent readers never see partial files
    let tmp = dir.join(format!("{key}.tmp{}", std::process::id()));
    basis.write_cache(&tmp)?;
    std::fs::rename(&tmp, &path)?;
    Ok(basis)
}

pub fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.msb"))
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    key: String,
    mode: Mode,
    m: usize,
    levels: usize,
    dilation: f64,
    normalization: Normalization,
    n_elements: usize,
    elements: Vec<CacheElement>,
}

#[derive(Serialize, Deserialize)]
struct CacheElement {
    n_values: usize,
    c: [[f64; 3]; 3],
    patch: Option<Patch>,
    local_iterations: usize,
}

const MAGIC: &[u8; 4] = b"MSB1";

impl MsBasis {
    /// Binary layout: `MSB1`, header length (u32 LE), JSON header, then every
    /// basis vector as little-endian f64.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let header = CacheHeader {
            key: self.key.clone(),
            mode: self.mode,
            m: self.m,
            levels: self.levels,
            dilation: self.dilation,
            normalization: self.normalization,
            n_elements: self.elements.len(),
            elements: self
                .elements
                .iter()
                .map(|eb| CacheElement {
                    n_values: eb.phi[0].len(),
                    c: eb.c,
                    patch: eb.patch.clone(),
                    local_iterations: eb.local_iterations,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| MsfemError::Parse(e.to_string()))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for eb in &self.elements {
            for v in &eb.phi {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_cache(path: &Path, coarse: Arc<Mesh>) -> Result<MsBasis> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MsfemError::Parse("not an MSB1 basis file".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CacheHeader = serde_json::from_slice(&json).map_err(|e| MsfemError::Parse(e.to_string()))?;
        if header.n_elements != coarse.n_elements() {
            return Err(MsfemError::Parse("basis file does not match the coarse mesh".into()));
        }
        let mut elements = Vec::with_capacity(header.n_elements);
        let mut buf = [0u8; 8];
        for (e, ce) in header.elements.into_iter().enumerate() {
            let local = Arc::new(sub_triangulate_levels(coarse.triangle(e), header.levels)?);
            if ce.n_values != local.mesh.n_vertices() * header.m {
                return Err(MsfemError::Parse(format!("element {e}: basis length mismatch")));
            }
            let mut phi = Vec::with_capacity(3 * header.m);
            for _ in 0..3 * header.m {
                let mut v = Vec::with_capacity(ce.n_values);
                for _ in 0..ce.n_values {
                    r.read_exact(&mut buf)?;
                    v.push(f64::from_le_bytes(buf));
                }
                phi.push(v);
            }
            elements.push(ElementBasis {
                local,
                phi,
                c: ce.c,
                patch: ce.patch,
                local_iterations: ce.local_iterations,
            });
        }
        Ok(MsBasis {
            mode: header.mode,
            m: header.m,
            levels: header.levels,
            dilation: header.dilation,
            normalization: header.normalization,
            coarse,
            elements,
            key: header.key,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.coarse.n_vertices() * self.m
    }

    /// Value of `phi_i^b` (component `g`) at local sub-mesh vertex `v` of element `e`.
    pub fn phi_at(&self, e: usize, i: usize, b: usize, v: usize, g: usize) -> f64 {
        self.elements[e].phi[i * self.m + b][v * self.m + g]
    }

    /// Largest violation of `phi_i^b(x_j) = delta_ij e^b` at element vertices.
    pub fn nodal_duality_error(&self) -> f64 {
        let m = self.m;
        let mut err = 0.0f64;
        for e in 0..self.elements.len() {
            for i in 0..3 {
                for b in 0..m {
                    for j in 0..3 {
                        for g in 0..m {
                            let target = if i == j && b == g { 1.0 } else { 0.0 };
                            err = err.max((self.phi_at(e, i, b, j, g) - target).abs());
                        }
                    }
                }
            }
        }
        err
    }

    pub fn total_local_iterations(&self) -> usize {
        self.elements.iter().map(|e| e.local_iterations).sum()
    }
}

/// Gradients on one fine triangle of all `3m` basis functions of an element:
/// `out[f][g*2 + k]`.
fn basis_gradients(eb: &ElementBasis, t: usize, m: usize, out: &mut [[f64; DIM * MAX_M]]) {
    let mesh = &eb.local.mesh;
    let el = mesh.elements()[t];
    let g = barycentric_gradients(&mesh.triangle(t));
    for (f, phi) in eb.phi.iter().enumerate() {
        let mut gr = [0.0; DIM * MAX_M];
        for gm in 0..m {
            for k in 0..DIM {
                gr[gm * DIM + k] = (0..3).map(|a| phi[el[a] * m + gm] * g[a][k]).sum();
            }
        }
        out[f] = gr;
    }
}

/// `K[(i,a),(j,b)] = a_tau(phi_j^b, phi_i^a)` by fine-scale quadrature.
pub fn element_matrix(basis: &MsBasis, e: usize, material: &Material<'_>) -> Vec<f64> {
    let m = basis.m;
    let nf = 3 * m;
    let dm = DIM * m;
    let eb = &basis.elements[e];
    let mesh = &eb.local.mesh;
    let mut k = vec![0.0; nf * nf];
    let mut grads = vec![[0.0; DIM * MAX_M]; nf];
    for t in 0..mesh.n_elements() {
        let tri = mesh.triangle(t);
        let area = signed_area(&tri);
        let a = material.average(&tri, QuadratureOrder::Midpoint);
        basis_gradients(eb, t, m, &mut grads);
        for (fj, gj) in grads.iter().enumerate() {
            let agj = a.apply(&gj[..dm]);
            for (fi, gi) in grads.iter().enumerate() {
                let s: f64 = (0..dm).map(|r| gi[r] * agj[r]).sum();
                k[fi * nf + fj] += area * s;
            }
        }
    }
    k
}

/// `F[(i,a)] = <f, phi_i^a>` by degree-4 quadrature on the fine sub-mesh.
pub fn element_load(basis: &MsBasis, e: usize, source: &Source) -> Vec<f64> {
    let m = basis.m;
    let eb = &basis.elements[e];
    let fine = assemble_load(&eb.local.mesh, m, &|x, _| source.eval(x), QuadratureOrder::Four);
    eb.phi.iter().map(|p| p.iter().zip(&fine).map(|(a, b)| a * b).sum()).collect()
}

/// Global MsFEM system before boundary conditions, plus the reduction that
/// imposes zero coarse boundary DOFs.
#[derive(Debug, Clone)]
pub struct MsSystem {
    pub matrix: CsrMatrix,
    pub load: Vec<f64>,
    pub reduction: DirichletReduction,
}

impl MsSystem {
    pub fn reduced_matrix(&self) -> &CsrMatrix {
        &self.reduction.k_ff
    }

    pub fn reduced_rhs(&self) -> Vec<f64> {
        self.reduction.reduce_rhs(&self.load, &vec![0.0; self.load.len()])
    }
}

pub fn assemble_msfem(basis: &MsBasis, material: &Material<'_>, source: &Source) -> Result<MsSystem> {
    if material.m() != basis.m {
        return Err(MsfemError::invalid("material and basis have different m"));
    }
    let m = basis.m;
    let nf = 3 * m;
    let coarse = &basis.coarse;
    let locals: Vec<(Vec<f64>, Vec<f64>)> = (0..coarse.n_elements())
        .into_par_iter()
        .map(|e| (element_matrix(basis, e, material), element_load(basis, e, source)))
        .collect();
    let mut k = CsrMatrix::fem_pattern(coarse, m);
    let mut load = vec![0.0; coarse.n_vertices() * m];
    for (e, (ke, fe)) in locals.iter().enumerate() {
        let el = coarse.elements()[e];
        for i in 0..3 {
            for a in 0..m {
                let row = el[i] * m + a;
                load[row] += fe[i * m + a];
                for j in 0..3 {
                    for b in 0..m {
                        k.add_at(row, el[j] * m + b, ke[(i * m + a) * nf + j * m + b]);
                    }
                }
            }
        }
    }
    let reduction = DirichletReduction::new(&k, &dof_mask(coarse.boundary(), m));
    Ok(MsSystem {
        matrix: k,
        load,
        reduction,
    })
}

/// Coarse coefficients of an MsFEM solution (boundary DOFs zero).
#[derive(Debug, Clone)]
pub struct DiscreteSolution {
    pub coefficients: Vec<f64>,
    pub report: SolveReport,
    pub mode: Mode,
}

impl DiscreteSolution {
    /// Wraps a given coefficient vector, e.g. to inspect single basis functions.
    pub fn from_coefficients(basis: &MsBasis, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != basis.n_dofs() {
            return Err(MsfemError::invalid("coefficient vector has the wrong length"));
        }
        Ok(DiscreteSolution {
            coefficients,
            report: SolveReport {
                iterations: 0,
                residual: 0.0,
                seconds: 0.0,
                method: "given".into(),
            },
            mode: basis.mode,
        })
    }

    /// Fine values of the solution on element `e`'s sub-mesh.
    pub fn element_values(&self, basis: &MsBasis, e: usize) -> Vec<f64> {
        let m = basis.m;
        let eb = &basis.elements[e];
        let el = basis.coarse.elements()[e];
        let mut out = vec![0.0; eb.phi[0].len()];
        for i in 0..3 {
            for b in 0..m {
                let c = self.coefficients[el[i] * m + b];
                if c != 0.0 {
                    for (o, p) in out.iter_mut().zip(&eb.phi[i * m + b]) {
                        *o += c * p;
                    }
                }
            }
        }
        out
    }
}

pub fn solve_msfem(system: &MsSystem, mode: Mode, opts: &SolverOptions) -> Result<DiscreteSolution> {
    let b = system.reduced_rhs();
    let (x, report) = solve_sparse(system.reduced_matrix(), &b, opts)?;
    let coefficients = system.reduction.expand(&x, &vec![0.0; system.load.len()]);
    Ok(DiscreteSolution {
        coefficients,
        report,
        mode,
    })
}

/// Element values carried to the resolution of a reference grid.
struct OnGrid {
    local: Arc<LocalMesh>,
    values: Vec<f64>,
    /// Grid vertex of every vertex of `local`.
    map: Vec<usize>,
}

/// Interpolates `values` (on element `e`'s sub-mesh) to the resolution of
/// `grid`, which may be finer by a power of two.
fn element_on_grid(basis: &MsBasis, e: usize, values: Vec<f64>, grid: &RefinedGrid) -> Result<OnGrid> {
    let m = basis.m;
    let eb = &basis.elements[e];
    let misaligned = || {
        MsfemError::invalid(format!(
            "sub-mesh of element {e} is not aligned with the {}x{} reference grid",
            grid.n, grid.n
        ))
    };
    let ratio = eb.local.mesh.h() / grid.mesh.h();
    let d = ratio.log2().round();
    if !(0.0..=8.0).contains(&d) || (ratio / d.exp2() - 1.0).abs() > 1e-6 {
        return Err(misaligned());
    }
    let (local, values) = if d == 0.0 {
        (eb.local.clone(), values)
    } else {
        let fine = sub_triangulate_levels(eb.local.parent_simplex, basis.levels + d as usize)?;
        let mut v = values;
        for step in &fine.hierarchy.steps[basis.levels..] {
            v.reserve(step.midpoints.len() * m);
            for &[a, b] in &step.midpoints {
                for c in 0..m {
                    v.push(0.5 * (v[a * m + c] + v[b * m + c]));
                }
            }
        }
        (Arc::new(fine), v)
    };
    let map = local
        .mesh
        .vertices()
        .iter()
        .map(|&x| grid.vertex_at(x).ok_or_else(misaligned))
        .collect::<Result<Vec<_>>>()?;
    Ok(OnGrid { local, values, map })
}

/// Interpolates the solution onto `grid`; where elements share vertices the
/// lowest element index wins.
pub fn prolongate(solution: &DiscreteSolution, basis: &MsBasis, grid: &RefinedGrid) -> Result<FeFunction> {
    let m = basis.m;
    let nv = grid.mesh.n_vertices();
    let mut values = vec![0.0; nv * m];
    let mut set = vec![false; nv];
    for e in 0..basis.elements.len() {
        let OnGrid { values: ev, map, .. } = element_on_grid(basis, e, solution.element_values(basis, e), grid)?;
        for (lv, &gv) in map.iter().enumerate() {
            if !set[gv] {
                set[gv] = true;
                values[gv * m..(gv + 1) * m].copy_from_slice(&ev[lv * m..(lv + 1) * m]);
            }
        }
    }
    if set.iter().any(|s| !s) {
        return Err(MsfemError::invalid("the coarse mesh does not cover the reference grid"));
    }
    FeFunction::new(grid.mesh.clone(), m, values)
}

/// Errors of an MsFEM solution against a reference, elementwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    /// `(sum_tau |grad(u_h - u)|^2_tau)^(1/2)`.
    pub energy_broken: f64,
    pub l2: f64,
    pub l3_2: f64,
}

/// Broken H1, L2 and L3/2 errors using each element's own fine values.
pub fn error_suite(solution: &DiscreteSolution, basis: &MsBasis, grid: &RefinedGrid, u_ref: &FeFunction) -> Result<ErrorRecord> {
    let m = basis.m;
    if u_ref.m != m || !(Arc::ptr_eq(&u_ref.mesh, &grid.mesh) || u_ref.mesh.same_as(&grid.mesh)) {
        return Err(MsfemError::invalid("reference function does not live on the reference grid"));
    }
    let rule = QuadratureOrder::Four.rule();
    let per_element = (0..basis.elements.len())
        .into_par_iter()
        .map(|e| -> Result<[f64; 3]> {
            let og = element_on_grid(basis, e, solution.element_values(basis, e), grid)?;
            let (ev, map) = (&og.values, &og.map);
            let diff: Vec<f64> = (0..ev.len()).map(|k| ev[k] - u_ref.values[map[k / m] * m + k % m]).collect();
            let mesh = &og.local.mesh;
            let mut acc = [0.0; 3];
            for t in 0..mesh.n_elements() {
                let tri = mesh.triangle(t);
                let el = mesh.elements()[t];
                let area = signed_area(&tri);
                let g = barycentric_gradients(&tri);
                for c in 0..m {
                    for k in 0..DIM {
                        let d: f64 = (0..3).map(|a| diff[el[a] * m + c] * g[a][k]).sum();
                        acc[0] += area * d * d;
                    }
                }
                for (b, w) in rule.points.iter().zip(rule.weights) {
                    let mut n2 = 0.0;
                    for c in 0..m {
                        let d: f64 = (0..3).map(|a| b[a] * diff[el[a] * m + c]).sum();
                        n2 += d * d;
                    }
                    acc[1] += w * area * n2;
                    acc[2] += w * area * n2.sqrt().powf(1.5);
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tot = [0.0; 3];
    for a in &per_element {
        for k in 0..3 {
            tot[k] += a[k];
        }
    }
    Ok(ErrorRecord {
        energy_broken: tot[0].sqrt(),
        l2: tot[1].sqrt(),
        l3_2: tot[2].powf(2.0 / 3.0),
    })
}

pub fn broken_h1_error(solution: &DiscreteSolution, basis: &MsBasis, grid: &RefinedGrid, u_ref: &FeFunction) -> Result<f64> {
    Ok(error_suite(solution, basis, grid, u_ref)?.energy_broken)
}

/// `(sum_tau |grad u_h|^2_tau)^(1/2)` from the element sub-meshes.
pub fn broken_h1_norm(solution: &DiscreteSolution, basis: &MsBasis) -> f64 {
    let m = basis.m;
    let mut s = 0.0;
    for e in 0..basis.elements.len() {
        let ev = solution.element_values(basis, e);
        let mesh = &basis.elements[e].local.mesh;
        for t in 0..mesh.n_elements() {
            let tri = mesh.triangle(t);
            let el = mesh.elements()[t];
            let g = barycentric_gradients(&tri);
            for c in 0..m {
                for k in 0..DIM {
                    let d: f64 = (0..3).map(|a| ev[el[a] * m + c] * g[a][k]).sum();
                    s += signed_area(&tri) * d * d;
                }
            }
        }
    }
    s.sqrt()
}

/// Points of element `e`'s sub-mesh on its local edge `k` (from vertex `k`
/// to vertex `k+1`), ordered from vertex `k`.
fn edge_points(basis: &MsBasis, e: usize, k: usize) -> Vec<usize> {
    let lm = &basis.elements[e].local;
    let opp = (k + 2) % 3;
    let next = (k + 1) % 3;
    let mut pts: Vec<(f64, usize)> = lm
        .trace_map
        .iter()
        .filter(|(_, lam)| lam[opp].abs() < 1e-9)
        .map(|(v, lam)| (lam[next], *v))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.into_iter().map(|p| p.1).collect()
}

/// `(sum over interior coarse edges of int_e |[u_h]|^2)^(1/2)`.
pub fn jump_seminorm(solution: &DiscreteSolution, basis: &MsBasis) -> Result<f64> {
    let m = basis.m;
    let coarse = &basis.coarse;
    let mut owners: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
    for (e, el) in coarse.elements().iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (el[k], el[(k + 1) % 3]);
            owners.entry((a.min(b), a.max(b))).or_default().push((e, k));
        }
    }
    let mut keys: Vec<_> = owners.keys().copied().collect();
    keys.sort_unstable();
    let mut total = 0.0;
    for key in keys {
        let list = &owners[&key];
        if list.len() != 2 {
            continue;
        }
        let sides: Vec<(Vec<usize>, Vec<f64>, usize)> = list
            .iter()
            .map(|&(e, k)| {
                let mut pts = edge_points(basis, e, k);
                // orient from the lower global vertex
                if coarse.elements()[e][k] != key.0 {
                    pts.reverse();
                }
                (pts, solution.element_values(basis, e), e)
            })
            .collect();
        let (p0, v0, e0) = &sides[0];
        let (p1, v1, e1) = &sides[1];
        if p0.len() != p1.len() {
            return Err(MsfemError::invalid("neighboring sub-meshes do not match on a shared edge"));
        }
        let x0 = basis.elements[*e0].local.mesh.vertices();
        let x1 = basis.elements[*e1].local.mesh.vertices();
        for s in 0..p0.len() - 1 {
            let len = crate::mesh::dist(x0[p0[s]], x0[p0[s + 1]]);
            if crate::mesh::dist(x0[p0[s]], x1[p1[s]]) > 1e-9 * len {
                return Err(MsfemError::invalid("neighboring sub-meshes do not match on a shared edge"));
            }
            for c in 0..m {
                let d0 = v0[p0[s] * m + c] - v1[p1[s] * m + c];
                let d1 = v0[p0[s + 1] * m + c] - v1[p1[s + 1] * m + c];
                total += len / 3.0 * (d0 * d0 + d0 * d1 + d1 * d1);
            }
        }
    }
    Ok(total.sqrt())
}

/// Largest element diameter of the fine sub-meshes.
pub fn fine_h(basis: &MsBasis) -> f64 {
    basis
        .elements
        .iter()
        .map(|eb| diameter(&eb.local.parent_simplex) / (1u64 << basis.levels) as f64)
        .fold(0.0, f64::max)
}
