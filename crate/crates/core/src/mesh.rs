//! Triangulations: structured meshes of rectangles, red refinement with the
//! nested-level bookkeeping used by the multigrid preconditioner, oversampling
//! patches and the fine local meshes on which multiscale basis functions live.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MsfemError, Result};

pub type Point = [f64; 2];

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        let r = Rect { x0, x1, y0, y1 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1 - self.x0 > 0.0 && self.y1 - self.y0 > 0.0) {
            return Err(MsfemError::invalid(format!(
                "domain must have positive side lengths, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Point, tol: f64) -> bool {
        p[0] >= self.x0 - tol && p[0] <= self.x1 + tol && p[1] >= self.y0 - tol && p[1] <= self.y1 + tol
    }
}

impl Default for Rect {
    fn default() -> Self {
        Rect::UNIT
    }
}

#[inline]
pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub(crate) fn dist(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0].hypot(d[1])
}

#[inline]
pub(crate) fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Signed area, positive for counter-clockwise vertex order.
#[inline]
pub fn signed_area(t: &[Point; 3]) -> f64 {
    0.5 * cross(sub(t[1], t[0]), sub(t[2], t[0]))
}

pub fn diameter(t: &[Point; 3]) -> f64 {
    dist(t[0], t[1]).max(dist(t[1], t[2])).max(dist(t[2], t[0]))
}

/// Diameter of the largest inscribed ball.
pub fn inscribed_diameter(t: &[Point; 3]) -> f64 {
    let perim = dist(t[0], t[1]) + dist(t[1], t[2]) + dist(t[2], t[0]);
    4.0 * signed_area(t).abs() / perim
}

pub fn barycenter(t: &[Point; 3]) -> Point {
    [
        (t[0][0] + t[1][0] + t[2][0]) / 3.0,
        (t[0][1] + t[1][1] + t[2][1]) / 3.0,
    ]
}

/// Barycentric coordinates of `p` with respect to `t`.
pub fn barycentric(t: &[Point; 3], p: Point) -> [f64; 3] {
    let a = signed_area(t);
    let l0 = 0.5 * cross(sub(t[1], p), sub(t[2], p)) / a;
    let l1 = 0.5 * cross(sub(t[2], p), sub(t[0], p)) / a;
    [l0, l1, 1.0 - l0 - l1]
}

/// Gradients of the three barycentric coordinates (constant on `t`).
#[inline]
pub fn barycentric_gradients(t: &[Point; 3]) -> [Point; 3] {
    let two_a = 2.0 * signed_area(t);
    [
        [(t[1][1] - t[2][1]) / two_a, (t[2][0] - t[1][0]) / two_a],
        [(t[2][1] - t[0][1]) / two_a, (t[0][0] - t[2][0]) / two_a],
        [(t[0][1] - t[1][1]) / two_a, (t[1][0] - t[0][0]) / two_a],
    ]
}

/// Conforming triangulation with consistently oriented elements.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    elements: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    h: f64,
    h_min: f64,
    sigma0: f64,
    sigma1: f64,
}

impl Mesh {
    /// Builds a mesh and flags as boundary every vertex lying on an edge that
    /// belongs to exactly one element.
    pub fn new(vertices: Vec<Point>, elements: Vec<[usize; 3]>) -> Result<Self> {
        let boundary = topological_boundary(vertices.len(), &elements);
        Self::with_boundary(vertices, elements, boundary)
    }

    pub fn with_boundary(
        vertices: Vec<Point>,
        elements: Vec<[usize; 3]>,
        boundary: Vec<bool>,
    ) -> Result<Self> {
        if boundary.len() != vertices.len() {
            return Err(MsfemError::invalid("boundary flags must match vertex count"));
        }
        if elements.is_empty() {
            return Err(MsfemError::invalid("mesh has no elements"));
        }
        let mut h = 0.0f64;
        let mut h_min = f64::INFINITY;
        let mut sigma0 = 0.0f64;
        for (e, el) in elements.iter().enumerate() {
            if el.iter().any(|&v| v >= vertices.len()) {
                return Err(MsfemError::invalid(format!("element {e} references a missing vertex")));
            }
            let t = [vertices[el[0]], vertices[el[1]], vertices[el[2]]];
            if signed_area(&t) <= 0.0 {
                return Err(MsfemError::invalid(format!(
                    "element {e} is not positively oriented (area {:e})",
                    signed_area(&t)
                )));
            }
            let d = diameter(&t);
            h = h.max(d);
            h_min = h_min.min(d);
            sigma0 = sigma0.max(d / inscribed_diameter(&t));
        }
        Ok(Mesh {
            vertices,
            elements,
            boundary,
            h,
            h_min,
            sigma0,
            sigma1: h / h_min,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn boundary(&self) -> &[bool] {
        &self.boundary
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Largest element diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Smallest element diameter.
    pub fn h_min(&self) -> f64 {
        self.h_min
    }

    /// Chunkiness bound: max over elements of `h_T / rho_T`.
    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    /// Inverse-assumption bound: `h / min h_T`.
    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    #[inline]
    pub fn triangle(&self, e: usize) -> [Point; 3] {
        let el = self.elements[e];
        [self.vertices[el[0]], self.vertices[el[1]], self.vertices[el[2]]]
    }

    pub fn area(&self, e: usize) -> f64 {
        signed_area(&self.triangle(e))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.area(e)).sum()
    }

    /// Returns `(min, max)` of `h_T / rho_T` over all elements.
    pub fn shape_ratio_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for e in 0..self.n_elements() {
            let t = self.triangle(e);
            let r = diameter(&t) / inscribed_diameter(&t);
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (lo, hi)
    }

    /// Structural equality used to check that two functions share a mesh.
    pub fn same_as(&self, other: &Mesh) -> bool {
        std::ptr::eq(self, other)
            || (self.vertices == other.vertices && self.elements == other.elements)
    }

    /// Stable fingerprint of the geometry, used as a cache key.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for v in &self.vertices {
            hasher.update(v[0].to_le_bytes());
            hasher.update(v[1].to_le_bytes());
        }
        for el in &self.elements {
            for &i in el {
                hasher.update((i as u64).to_le_bytes());
            }
        }
        hex_digest(&hasher.finalize())
    }

    /// Line-oriented text form: `MSH2 nv ne`, `v x y`, `e i j k`, `b i`.
    pub fn to_msh2(&self) -> String {
        let mut s = String::new();
        writeln!(s, "MSH2 {} {}", self.n_vertices(), self.n_elements()).unwrap();
        for v in &self.vertices {
            writeln!(s, "v {} {}", v[0], v[1]).unwrap();
        }
        for el in &self.elements {
            writeln!(s, "e {} {} {}", el[0], el[1], el[2]).unwrap();
        }
        for (i, &b) in self.boundary.iter().enumerate() {
            if b {
                writeln!(s, "b {i}").unwrap();
            }
        }
        s
    }

    pub fn from_msh2(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| MsfemError::Parse("empty mesh file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "MSH2" {
            return Err(MsfemError::Parse(format!("bad header `{header}`")));
        }
        let nv: usize = parse_tok(parts[1])?;
        let ne: usize = parse_tok(parts[2])?;
        let mut vertices = Vec::with_capacity(nv);
        let mut elements = Vec::with_capacity(ne);
        let mut boundary = vec![false; nv];
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.first().copied() {
                Some("v") if toks.len() == 3 => {
                    vertices.push([parse_tok(toks[1])?, parse_tok(toks[2])?]);
                }
                Some("e") if toks.len() == 4 => {
                    elements.push([parse_tok(toks[1])?, parse_tok(toks[2])?, parse_tok(toks[3])?]);
                }
                Some("b") if toks.len() == 2 => {
                    let i: usize = parse_tok(toks[1])?;
                    *boundary
                        .get_mut(i)
                        .ok_or_else(|| MsfemError::Parse(format!("boundary index {i} out of range")))? =
                        true;
                }
                _ => return Err(MsfemError::Parse(format!("unrecognized line `{line}`"))),
            }
        }
        if vertices.len() != nv || elements.len() != ne {
            return Err(MsfemError::Parse(format!(
                "header announced {nv} vertices / {ne} elements, found {} / {}",
                vertices.len(),
                elements.len()
            )));
        }
        Mesh::with_boundary(vertices, elements, boundary)
    }
}

fn parse_tok<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| MsfemError::Parse(format!("cannot parse `{s}`")))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn topological_boundary(nv: usize, elements: &[[usize; 3]]) -> Vec<bool> {
    let mut count: HashMap<(usize, usize), u32> = HashMap::with_capacity(elements.len() * 2);
    for el in elements {
        for k in 0..3 {
            *count.entry(edge_key(el[k], el[(k + 1) % 3])).or_default() += 1;
        }
    }
    let mut boundary = vec![false; nv];
    for ((a, b), c) in count {
        if c == 1 {
            boundary[a] = true;
            boundary[b] = true;
        }
    }
    boundary
}

/// `2 n^2` right triangles from an `n x n` grid, each cell split along the
/// diagonal from its lower-left to its upper-right corner. Vertex `(i, j)` has
/// index `j (n + 1) + i`.
pub fn build_structured_triangulation(domain: Rect, n: usize) -> Result<Mesh> {
    domain.validate()?;
    if n == 0 {
        return Err(MsfemError::invalid("need at least one subdivision per side"));
    }
    let dx = domain.width() / n as f64;
    let dy = domain.height() / n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    let mut boundary = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            let x = if i == n { domain.x1 } else { domain.x0 + i as f64 * dx };
            let y = if j == n { domain.y1 } else { domain.y0 + j as f64 * dy };
            vertices.push([x, y]);
            boundary.push(i == 0 || j == 0 || i == n || j == n);
        }
    }
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut elements = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v11, v01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            elements.push([v00, v10, v11]);
            elements.push([v00, v11, v01]);
        }
    }
    Mesh::with_boundary(vertices, elements, boundary)
}

/// One red-refinement step: fine vertices are the coarse vertices (same
/// indices) followed by edge midpoints.
#[derive(Debug, Clone, Default)]
pub struct Refinement {
    pub coarse_vertices: usize,
    pub midpoints: Vec<[usize; 2]>,
}

impl Refinement {
    pub fn fine_vertices(&self) -> usize {
        self.coarse_vertices + self.midpoints.len()
    }
}

/// Sequence of nested refinements, coarsest first.
#[derive(Debug, Clone, Default)]
pub struct Hierarchy {
    pub steps: Vec<Refinement>,
}

impl Hierarchy {
    pub fn depth(&self) -> usize {
        self.steps.len()
    }
}

/// Splits every triangle into four similar children. Children of element `e`
/// are `4e..4e+4`; the last one is the inverted middle triangle.
pub fn red_refine(mesh: &Mesh) -> (Mesh, Refinement) {
    let nv = mesh.n_vertices();
    let mut edge_index: HashMap<(usize, usize), usize> = HashMap::with_capacity(mesh.n_elements() * 2);
    let mut edge_count: Vec<u32> = Vec::with_capacity(mesh.n_elements() * 2);
    let mut midpoints: Vec<[usize; 2]> = Vec::with_capacity(mesh.n_elements() * 2);
    let mut el_mid = Vec::with_capacity(mesh.n_elements());
    for el in mesh.elements() {
        let mut mids = [0usize; 3];
        for k in 0..3 {
            let key = edge_key(el[k], el[(k + 1) % 3]);
            let id = *edge_index.entry(key).or_insert_with(|| {
                midpoints.push([key.0, key.1]);
                edge_count.push(0);
                midpoints.len() - 1
            });
            edge_count[id] += 1;
            mids[k] = nv + id;
        }
        el_mid.push(mids);
    }
    let mut vertices = mesh.vertices().to_vec();
    let mut boundary = mesh.boundary().to_vec();
    vertices.reserve(midpoints.len());
    for (id, &[a, b]) in midpoints.iter().enumerate() {
        let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
        vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
        boundary.push(edge_count[id] == 1);
    }
    let mut elements = Vec::with_capacity(4 * mesh.n_elements());
    for (el, m) in mesh.elements().iter().zip(&el_mid) {
        let [a, b, c] = *el;
        let [mab, mbc, mca] = *m;
        elements.push([a, mab, mca]);
        elements.push([mab, b, mbc]);
        elements.push([mca, mbc, c]);
        elements.push([mab, mbc, mca]);
    }
    let fine = Mesh::with_boundary(vertices, elements, boundary)
        .expect("red refinement preserves orientation");
    (
        fine,
        Refinement {
            coarse_vertices: nv,
            midpoints,
        },
    )
}

/// Refines `base` `levels` times and records the hierarchy.
pub fn refine_levels(base: Mesh, levels: usize) -> (Mesh, Hierarchy) {
    let mut mesh = base;
    let mut hierarchy = Hierarchy::default();
    for _ in 0..levels {
        let (fine, step) = red_refine(&mesh);
        hierarchy.steps.push(step);
        mesh = fine;
    }
    (mesh, hierarchy)
}

/// Uniform structured mesh of a rectangle obtained by red refinement, so that
/// it carries a multigrid hierarchy. `n = n0 * 2^k` with `n0` odd.
#[derive(Debug, Clone)]
pub struct RefinedGrid {
    pub domain: Rect,
    pub n: usize,
    pub mesh: Arc<Mesh>,
    pub hierarchy: Hierarchy,
    /// Vertex index of grid point `(i, j)` at `j (n + 1) + i`.
    grid_index: Vec<usize>,
}

impl RefinedGrid {
    pub fn new(domain: Rect, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(MsfemError::invalid("need at least one subdivision per side"));
        }
        let k = n.trailing_zeros() as usize;
        let base = build_structured_triangulation(domain, n >> k)?;
        let (mesh, hierarchy) = refine_levels(base, k);
        let mut grid_index = vec![usize::MAX; (n + 1) * (n + 1)];
        let (dx, dy) = (domain.width() / n as f64, domain.height() / n as f64);
        for (v, p) in mesh.vertices().iter().enumerate() {
            let i = ((p[0] - domain.x0) / dx).round() as usize;
            let j = ((p[1] - domain.y0) / dy).round() as usize;
            grid_index[j * (n + 1) + i] = v;
        }
        Ok(RefinedGrid {
            domain,
            n,
            mesh: Arc::new(mesh),
            hierarchy,
            grid_index,
        })
    }

    /// Vertex of the grid at the point `p`, if `p` is a grid point.
    pub fn vertex_at(&self, p: Point) -> Option<usize> {
        let dx = self.domain.width() / self.n as f64;
        let dy = self.domain.height() / self.n as f64;
        let s = (p[0] - self.domain.x0) / dx;
        let t = (p[1] - self.domain.y0) / dy;
        let (i, j) = (s.round(), t.round());
        if (s - i).abs() > 1e-6 || (t - j).abs() > 1e-6 || i < 0.0 || j < 0.0 {
            return None;
        }
        let (i, j) = (i as usize, j as usize);
        if i > self.n || j > self.n {
            return None;
        }
        Some(self.grid_index[j * (self.n + 1) + i])
    }

    /// Grid spacing along x.
    pub fn spacing(&self) -> f64 {
        self.domain.width() / self.n as f64
    }
}

/// Fine triangulation of a single simplex, with the map from its boundary
/// vertices to barycentric coordinates in the parent.
#[derive(Debug, Clone)]
pub struct LocalMesh {
    pub mesh: Mesh,
    pub parent_simplex: [Point; 3],
    pub trace_map: Vec<(usize, [f64; 3])>,
    pub hierarchy: Hierarchy,
}

impl LocalMesh {
    fn from_refined(mesh: Mesh, parent: [Point; 3], hierarchy: Hierarchy) -> Self {
        let trace_map = mesh
            .boundary()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i, barycentric(&parent, mesh.vertices()[i])))
            .collect();
        LocalMesh {
            mesh,
            parent_simplex: parent,
            trace_map,
            hierarchy,
        }
    }

    pub fn levels(&self) -> usize {
        self.hierarchy.depth()
    }
}

/// Number of red refinements needed to bring the diameter of `parent` down to
/// `target_h`: `ceil(log2(diam / target_h))`, or 0 if already below.
pub fn refinement_levels(parent: &[Point; 3], target_h: f64) -> usize {
    let d = diameter(parent);
    if target_h >= d {
        0
    } else {
        (d / target_h).log2().ceil().max(0.0) as usize
    }
}

/// Uniform red refinement of `parent` down to `target_h`.
pub fn sub_triangulate(parent: [Point; 3], target_h: f64) -> Result<LocalMesh> {
    if !(target_h > 0.0) {
        return Err(MsfemError::invalid("target_h must be positive"));
    }
    sub_triangulate_levels(parent, refinement_levels(&parent, target_h))
}

pub fn sub_triangulate_levels(parent: [Point; 3], levels: usize) -> Result<LocalMesh> {
    let mut p = parent;
    if signed_area(&p) < 0.0 {
        p.swap(1, 2);
    }
    let base = Mesh::new(p.to_vec(), vec![[0, 1, 2]])?;
    let (mesh, hierarchy) = refine_levels(base, levels);
    Ok(LocalMesh::from_refined(mesh, p, hierarchy))
}

/// Oversampling simplex `S(tau)` with its geometric constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Patch {
    pub element_id: usize,
    pub simplex: [Point; 3],
    /// Homothety center: `S = c + dilation (tau - c)`.
    pub center: Point,
    /// Dilation actually applied (may be below the requested one if clipped).
    pub dilation: f64,
    /// `diam S / h_tau`.
    pub gamma1: f64,
    /// `dist(boundary tau, boundary S) / h_tau`.
    pub gamma2: f64,
    pub clipped: bool,
}

/// `tau` scaled by `dilation` about its barycenter. If that leaves the domain
/// the homothety center is moved inside `tau` (a translation of `S`), and if
/// no center works the dilation is reduced to the largest feasible value.
pub fn oversample_patch(mesh: &Mesh, element_id: usize, dilation: f64, domain: Rect) -> Result<Patch> {
    if element_id >= mesh.n_elements() {
        return Err(MsfemError::invalid(format!(
            "element {element_id} out of range ({} elements)",
            mesh.n_elements()
        )));
    }
    if !(dilation >= 1.0) {
        return Err(MsfemError::invalid(format!("dilation must be >= 1, got {dilation}")));
    }
    let tau = mesh.triangle(element_id);
    let b = barycenter(&tau);
    let scale = domain.width().max(domain.height());
    let tol = 1e-12 * scale;

    let (delta, center) = match feasible_center(&tau, dilation, domain, b, tol) {
        Some(c) => (dilation, c),
        None => {
            // feasibility is monotone in the dilation since c lies in tau
            let (mut lo, mut hi) = (1.0, dilation);
            let mut best = b;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                match feasible_center(&tau, mid, domain, b, tol) {
                    Some(c) => {
                        lo = mid;
                        best = c;
                    }
                    None => hi = mid,
                }
            }
            (lo, best)
        }
    };
    let mut simplex = tau.map(|v| {
        [
            center[0] + delta * (v[0] - center[0]),
            center[1] + delta * (v[1] - center[1]),
        ]
    });
    for p in &mut simplex {
        p[0] = p[0].clamp(domain.x0, domain.x1);
        p[1] = p[1].clamp(domain.y0, domain.y1);
    }
    let h_tau = diameter(&tau);
    let clipped = delta < dilation || dist(center, b) > tol;
    Ok(Patch {
        element_id,
        simplex,
        center,
        dilation: delta,
        gamma1: diameter(&simplex) / h_tau,
        gamma2: boundary_gap(&tau, &simplex) / h_tau,
        clipped,
    })
}

/// Distance between the boundaries of nested triangles `inner` in `outer`:
/// minimum over inner vertices of the distance to the outer edge lines.
fn boundary_gap(inner: &[Point; 3], outer: &[Point; 3]) -> f64 {
    let mut gap = f64::INFINITY;
    for k in 0..3 {
        let (a, b) = (outer[k], outer[(k + 1) % 3]);
        let len = dist(a, b);
        for &v in inner {
            // positive on the interior side of a counter-clockwise edge
            let d = cross(sub(b, a), sub(v, a)) / len;
            gap = gap.min(d);
        }
    }
    gap.max(0.0)
}

/// Centers `c` in `tau` with `c + delta (tau - c)` inside the domain form
/// `tau` intersected with an axis-aligned box; returns the one closest to `target`.
fn feasible_center(tau: &[Point; 3], delta: f64, domain: Rect, target: Point, tol: f64) -> Option<Point> {
    if delta - 1.0 <= 1e-14 {
        return Some(target);
    }
    let dm1 = delta - 1.0;
    let (mut bx0, mut bx1, mut by0, mut by1) = (f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
    for v in tau {
        bx0 = bx0.max((delta * v[0] - domain.x1) / dm1);
        bx1 = bx1.min((delta * v[0] - domain.x0) / dm1);
        by0 = by0.max((delta * v[1] - domain.y1) / dm1);
        by1 = by1.min((delta * v[1] - domain.y0) / dm1);
    }
    let slack = tol / dm1;
    let (bx0, bx1, by0, by1) = (bx0 - slack, bx1 + slack, by0 - slack, by1 + slack);
    if bx0 > bx1 || by0 > by1 {
        return None;
    }
    let mut poly: Vec<Point> = tau.to_vec();
    let planes: [(Point, f64); 4] = [
        ([1.0, 0.0], bx0),
        ([-1.0, 0.0], -bx1),
        ([0.0, 1.0], by0),
        ([0.0, -1.0], -by1),
    ];
    for (n, c) in planes {
        poly = clip_halfplane(&poly, n, c);
        if poly.is_empty() {
            return None;
        }
    }
    Some(closest_in_polygon(&poly, target))
}

/// Keeps the part of `poly` with `n . x >= c`.
fn clip_halfplane(poly: &[Point], n: Point, c: f64) -> Vec<Point> {
    let inside = |p: Point| n[0] * p[0] + n[1] * p[1] - c;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        let (fp, fq) = (inside(p), inside(q));
        if fp >= 0.0 {
            out.push(p);
        }
        if (fp >= 0.0) != (fq >= 0.0) {
            let t = fp / (fp - fq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

fn closest_in_polygon(poly: &[Point], p: Point) -> Point {
    if poly.len() >= 3 {
        let inside = (0..poly.len()).all(|i| cross(sub(poly[(i + 1) % poly.len()], poly[i]), sub(p, poly[i])) >= 0.0);
        if inside {
            return p;
        }
    }
    let mut best = poly[0];
    let mut best_d = f64::INFINITY;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let ab = sub(b, a);
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 > 0.0 {
            (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let d = dist(p, q);
        if d < best_d {
            best_d = d;
            best = q;
        }
    }
    best
}

/// Fine triangulation of an oversampling simplex in which the element's own
/// sub-mesh appears verbatim.
#[derive(Debug, Clone)]
pub struct PatchMesh {
    pub local: LocalMesh,
    /// Patch vertex index of every vertex of the element's sub-mesh.
    pub tau_vertices: Vec<usize>,
    /// The first `tau_elements` patch elements tile the element.
    pub tau_elements: usize,
}

/// Builds the patch mesh at the refinement depth of `tau_mesh`.
///
/// The coarse patch triangulation is `tau` plus, for each edge of `tau`, the
/// trapezoid between it and the parallel edge of `S`, cut into roughly square
/// cells. Red refinement of that triangulation refines `tau` exactly as
/// `tau_mesh` does, and its first `4^levels` elements tile `tau`.
pub fn patch_mesh(patch: &Patch, tau_mesh: &LocalMesh) -> Result<PatchMesh> {
    let tau = tau_mesh.parent_simplex;
    let levels = tau_mesh.levels();
    let s = patch.simplex;
    let ds = diameter(&s);
    let tol = 1e-9 * ds;

    // tau itself is pre-refined `r` times so the collar can be meshed with
    // segments comparable to its thickness instead of long slivers
    let heights: Vec<f64> = (0..3)
        .map(|k| {
            let (a, b) = (tau[k], tau[(k + 1) % 3]);
            let (sa, sb) = (s[k], s[(k + 1) % 3]);
            let len = dist(sa, sb).max(1e-300);
            (cross(sub(sb, sa), sub(a, sa)) / len).abs().max((cross(sub(sb, sa), sub(b, sa)) / len).abs())
        })
        .collect();
    let min_edge = (0..3).map(|k| dist(tau[k], tau[(k + 1) % 3])).fold(f64::INFINITY, f64::min);
    let max_h = heights.iter().cloned().fold(0.0, f64::max);
    let r = if max_h > 0.0 {
        ((min_edge / max_h).log2().round().max(0.0) as usize).min(levels).min(3)
    } else {
        0
    };
    let segs = 1usize << r;
    let seg_len = min_edge / segs as f64;
    let layers = ((max_h / seg_len).round() as usize).max(1);
    if layers >= 64 {
        return Err(MsfemError::invalid("oversampling collar is too thick for the element"));
    }

    let tau_base = sub_triangulate_levels(tau, r)?;
    let mut points: Vec<Point> = tau_base.mesh.vertices().to_vec();
    let mut elements: Vec<[usize; 3]> = tau_base.mesh.elements().to_vec();
    let base_lookup = VertexLookup::new(&points, tau_base.mesh.h_min());
    let mut extra: Vec<Point> = Vec::new();
    let mut add = |p: Point, points: &mut Vec<Point>| -> usize {
        if let Some(i) = base_lookup.find(p) {
            return i;
        }
        if let Some(i) = extra.iter().position(|&q| dist(p, q) < tol) {
            return tau_base.mesh.n_vertices() + i;
        }
        extra.push(p);
        points.push(p);
        points.len() - 1
    };
    let lerp = |a: Point, b: Point, t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    let area_tol = 1e-8 * ds * ds;
    let push_grid = |rows: &[Vec<usize>], points: &[Point], elements: &mut Vec<[usize; 3]>| {
        for l in 0..rows.len() - 1 {
            for i in 0..rows[l].len() - 1 {
                let (a, b, c, d) = (rows[l][i], rows[l][i + 1], rows[l + 1][i + 1], rows[l + 1][i]);
                for tri in [[a, b, c], [a, c, d]] {
                    let t = [points[tri[0]], points[tri[1]], points[tri[2]]];
                    let ar = signed_area(&t);
                    if ar.abs() <= area_tol {
                        continue;
                    }
                    elements.push(if ar > 0.0 { tri } else { [tri[0], tri[2], tri[1]] });
                }
            }
        }
    };

    // Offset layout: a rectangle of thickness h_k over every edge plus a
    // quadrilateral at every vertex. Valid when each corner of S lies beyond
    // the feet of the adjacent vertex (always the case for non-obtuse tau).
    let normals: Vec<Point> = (0..3)
        .map(|k| {
            let d = sub(tau[(k + 1) % 3], tau[k]);
            let len = d[0].hypot(d[1]);
            [d[1] / len, -d[0] / len]
        })
        .collect();
    let offsets: Vec<f64> = (0..3)
        .map(|k| {
            let d = sub(s[k], tau[k]);
            (d[0] * normals[k][0] + d[1] * normals[k][1]).max(0.0)
        })
        .collect();
    let offset_ok = (0..3).all(|k| {
        let p = (k + 2) % 3;
        let ek = sub(tau[(k + 1) % 3], tau[k]);
        let ep = sub(tau[p], tau[k]);
        let cos = (ek[0] * ep[0] + ek[1] * ep[1]) / (ek[0].hypot(ek[1]) * ep[0].hypot(ep[1]));
        offsets[p] + offsets[k] * cos >= -tol && offsets[k] + offsets[p] * cos >= -tol
    });
    if offset_ok {
        let strip_layers: Vec<usize> = (0..3)
            .map(|k| {
                let len = dist(tau[k], tau[(k + 1) % 3]) / segs as f64;
                ((offsets[k] / len).round() as usize).max(1)
            })
            .collect();
        if strip_layers.iter().any(|&l| l >= 64) {
            return Err(MsfemError::invalid("oversampling collar is too thick for the element"));
        }
        let shift = |p: Point, k: usize, t: f64| {
            [p[0] + normals[k][0] * offsets[k] * t, p[1] + normals[k][1] * offsets[k] * t]
        };
        for k in 0..3 {
            let j = (k + 1) % 3;
            let nl = strip_layers[k];
            let rows: Vec<Vec<usize>> = (0..=nl)
                .map(|l| {
                    let t = l as f64 / nl as f64;
                    (0..=segs)
                        .map(|i| add(shift(lerp(tau[k], tau[j], i as f64 / segs as f64), k, t), &mut points))
                        .collect()
                })
                .collect();
            push_grid(&rows, &points, &mut elements);
        }
        for k in 0..3 {
            let p = (k + 2) % 3;
            let v = tau[k];
            let a = shift(v, k, 1.0);
            let b = shift(v, p, 1.0);
            let (na, nb) = (strip_layers[k], strip_layers[p]);
            let rows: Vec<Vec<usize>> = (0..=nb)
                .map(|jb| {
                    let w = jb as f64 / nb as f64;
                    (0..=na)
                        .map(|ia| {
                            let u = ia as f64 / na as f64;
                            let x = (0..2)
                                .map(|c| {
                                    (1.0 - u) * (1.0 - w) * v[c] + u * (1.0 - w) * a[c] + u * w * s[k][c] + (1.0 - u) * w * b[c]
                                })
                                .collect::<Vec<_>>();
                            add([x[0], x[1]], &mut points)
                        })
                        .collect()
                })
                .collect();
            push_grid(&rows, &points, &mut elements);
        }
    } else {
        // spokes from the vertices of tau to those of S
        for k in 0..3 {
            let j = (k + 1) % 3;
            let rows: Vec<Vec<usize>> = (0..=layers)
                .map(|l| {
                    let t = l as f64 / layers as f64;
                    let (pk, pj) = (lerp(tau[k], s[k], t), lerp(tau[j], s[j], t));
                    (0..=segs).map(|i| add(lerp(pk, pj, i as f64 / segs as f64), &mut points)).collect()
                })
                .collect();
            push_grid(&rows, &points, &mut elements);
        }
    }
    // collapsed collar cells can leave unused points behind
    let mut used = vec![false; points.len()];
    elements.iter().flatten().for_each(|&v| used[v] = true);
    if used.iter().any(|u| !u) {
        let mut renum = vec![usize::MAX; points.len()];
        let mut kept = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if used[i] {
                renum[i] = kept.len();
                kept.push(*p);
            }
        }
        points = kept;
        elements.iter_mut().flatten().for_each(|v| *v = renum[*v]);
    }
    let levels = levels - r;
    let base = Mesh::new(points, elements)?;
    let (mesh, hierarchy) = refine_levels(base, levels);
    let tau_elements = 4usize.pow(tau_mesh.levels() as u32);

    let lookup = VertexLookup::new(mesh.vertices(), mesh.h_min());
    let tau_vertices = tau_mesh
        .mesh
        .vertices()
        .iter()
        .map(|&p| {
            lookup
                .find(p)
                .ok_or_else(|| MsfemError::invalid("element sub-mesh does not embed in its patch mesh"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchMesh {
        local: LocalMesh::from_refined(mesh, s, hierarchy),
        tau_vertices,
        tau_elements,
    })
}

/// Hash-grid lookup of mesh vertices by coordinates.
#[derive(Debug, Clone)]
pub struct VertexLookup {
    cell: f64,
    tol: f64,
    points: Vec<Point>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl VertexLookup {
    /// `spacing` should be on the order of the smallest edge length.
    pub fn new(points: &[Point], spacing: f64) -> Self {
        let cell = spacing * 0.5;
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(cell, *p)).or_default().push(i);
        }
        VertexLookup {
            cell,
            tol: spacing * 1e-6,
            points: points.to_vec(),
            buckets,
        }
    }

    fn key(cell: f64, p: Point) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    pub fn find(&self, p: Point) -> Option<usize> {
        let (kx, ky) = Self::key(self.cell, p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = self.buckets.get(&(kx + dx, ky + dy)) {
                    for &i in list {
                        if dist(self.points[i], p) <= self.tol {
                            return Some(i);
                        }
                    }
                }
            }
        }
        None
    }
}

/// Bucket grid for point location in a triangulation.
#[derive(Debug, Clone)]
pub struct ElementLocator {
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
    mesh: Arc<Mesh>,
}

impl ElementLocator {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for v in mesh.vertices() {
            for d in 0..2 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        let cell = mesh.h().max(1e-300);
        let nx = (((hi[0] - lo[0]) / cell).ceil() as usize).max(1);
        let ny = (((hi[1] - lo[1]) / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        for e in 0..mesh.n_elements() {
            let t = mesh.triangle(e);
            let (mut a, mut b) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in &t {
                for d in 0..2 {
                    a[d] = a[d].min(p[d]);
                    b[d] = b[d].max(p[d]);
                }
            }
            let i0 = (((a[0] - lo[0]) / cell).floor() as usize).min(nx - 1);
            let i1 = (((b[0] - lo[0]) / cell).floor() as usize).min(nx - 1);
            let j0 = (((a[1] - lo[1]) / cell).floor() as usize).min(ny - 1);
            let j1 = (((b[1] - lo[1]) / cell).floor() as usize).min(ny - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(e);
                }
            }
        }
        ElementLocator {
            origin: lo,
            cell,
            nx,
            ny,
            buckets,
            mesh,
        }
    }

    /// All elements containing `p` (up to a small tolerance) with the
    /// barycentric coordinates of `p` in each.
    pub fn locate_all(&self, p: Point) -> Vec<(usize, [f64; 3])> {
        let i = ((p[0] - self.origin[0]) / self.cell).floor();
        let j = ((p[1] - self.origin[1]) / self.cell).floor();
        if i < -1.0 || j < -1.0 {
            return Vec::new();
        }
        let i = (i.max(0.0) as usize).min(self.nx - 1);
        let j = (j.max(0.0) as usize).min(self.ny - 1);
        let mut out = Vec::new();
        for &e in &self.buckets[j * self.nx + i] {
            let lam = barycentric(&self.mesh.triangle(e), p);
            if lam.iter().all(|&l| l >= -1e-10) {
                out.push((e, lam));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_grid() {
        let m = build_structured_triangulation(Rect::UNIT, 1).unwrap();
        assert_eq!(m.n_elements(), 2);
        assert_eq!(m.n_vertices(), 4);
        assert!(m.boundary().iter().all(|&b| b));
    }

    #[test]
    fn zero_subdivisions_rejected() {
        assert!(matches!(
            build_structured_triangulation(Rect::UNIT, 0),
            Err(MsfemError::InvalidArgument(_))
        ));
    }

    #[test]
    fn four_by_four_grid_geometry() {
        let m = build_structured_triangulation(Rect::UNIT, 4).unwrap();
        assert_eq!(m.n_elements(), 32);
        assert_eq!(m.n_vertices(), 25);
        assert!((m.total_area() - 1.0).abs() < 1e-12);
        assert!((m.h() - 2f64.sqrt() / 4.0).abs() < 1e-15);
        // brute force over elements: every chunkiness ratio is the same
        let (lo, hi) = m.shape_ratio_range();
        assert!((hi - lo).abs() < 1e-12);
        // isosceles right triangle: h/rho = sqrt2 (2 + sqrt2) / 2 / ... closed form
        let t = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];
        assert!((m.sigma0() - diameter(&t) / inscribed_diameter(&t)).abs() < 1e-12);
        assert!((m.sigma1() - 1.0).abs() < 1e-12);
        let interior = m.boundary().iter().filter(|&&b| !b).count();
        assert_eq!(interior, 9);
    }

    #[test]
    fn red_refinement_counts_and_shape() {
        let parent = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let lm = sub_triangulate_levels(parent, 2).unwrap();
        assert_eq!(lm.mesh.n_elements(), 16);
        assert_eq!(lm.mesh.n_vertices(), 15);
        assert!((lm.mesh.total_area() - 0.5).abs() < 1e-12);
        let r = diameter(&parent) / inscribed_diameter(&parent);
        let (lo, hi) = lm.mesh.shape_ratio_range();
        assert!((lo - r).abs() < 1e-12 && (hi - r).abs() < 1e-12);
        // 4^k elements for several k
        for k in 0..5 {
            let lm = sub_triangulate_levels(parent, k).unwrap();
            assert_eq!(lm.mesh.n_elements(), 4usize.pow(k as u32));
            let side = (1usize << k) + 1;
            assert_eq!(lm.mesh.n_vertices(), side * (side + 1) / 2);
        }
    }

    #[test]
    fn sub_triangulate_target_equal_to_diameter_is_unrefined() {
        let parent = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let lm = sub_triangulate(parent, diameter(&parent)).unwrap();
        assert_eq!(lm.mesh.n_elements(), 1);
        assert_eq!(lm.trace_map.len(), 3);
        let lm = sub_triangulate(parent, 0.3).unwrap();
        assert!(lm.mesh.h() <= 0.3);
    }

    #[test]
    fn trace_map_is_on_parent_boundary() {
        let parent = [[0.2, 0.1], [1.0, 0.3], [0.4, 0.9]];
        let lm = sub_triangulate_levels(parent, 3).unwrap();
        // 3 * 2^k boundary vertices
        assert_eq!(lm.trace_map.len(), 24);
        for (i, lam) in &lm.trace_map {
            assert!(lam.iter().any(|&l| l.abs() < 1e-12), "vertex {i} not on boundary: {lam:?}");
            let p = lm.mesh.vertices()[*i];
            let q = [
                lam[0] * parent[0][0] + lam[1] * parent[1][0] + lam[2] * parent[2][0],
                lam[0] * parent[0][1] + lam[1] * parent[1][1] + lam[2] * parent[2][1],
            ];
            assert!(dist(p, q) < 1e-14);
        }
    }

    #[test]
    fn refined_structured_grid_matches_direct_grid() {
        let g = RefinedGrid::new(Rect::UNIT, 8).unwrap();
        let direct = build_structured_triangulation(Rect::UNIT, 8).unwrap();
        assert_eq!(g.mesh.n_vertices(), direct.n_vertices());
        assert_eq!(g.mesh.n_elements(), direct.n_elements());
        let lookup = VertexLookup::new(direct.vertices(), direct.h_min());
        for (k, v) in direct.vertices().iter().enumerate() {
            assert_eq!(g.mesh.vertices()[g.vertex_at(*v).unwrap()], direct.vertices()[k]);
        }
        assert_eq!(g.vertex_at([0.51, 0.5]), None);
        for (v, &b) in g.mesh.vertices().iter().zip(g.mesh.boundary()) {
            let i = lookup.find(*v).expect("vertex of refined grid on direct grid");
            assert_eq!(direct.boundary()[i], b);
        }
        // every refined triangle is a triangle of the direct grid
        let mut direct_tris: Vec<[usize; 3]> = direct
            .elements()
            .iter()
            .map(|e| {
                let mut e = *e;
                e.sort();
                e
            })
            .collect();
        direct_tris.sort();
        for el in g.mesh.elements() {
            let mut t = el.map(|v| lookup.find(g.mesh.vertices()[v]).unwrap());
            t.sort();
            assert!(direct_tris.binary_search(&t).is_ok());
        }
    }

    fn brute_force_gap(inner: &[Point; 3], outer: &[Point; 3]) -> f64 {
        let sample = |t: &[Point; 3]| -> Vec<Point> {
            let mut pts = Vec::new();
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                for s in 0..=400 {
                    let u = s as f64 / 400.0;
                    pts.push([a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]);
                }
            }
            pts
        };
        let (pi, po) = (sample(inner), sample(outer));
        let mut best = f64::INFINITY;
        for p in &pi {
            for q in &po {
                best = best.min(dist(*p, *q));
            }
        }
        best
    }

    #[test]
    fn interior_patch_dilation_two() {
        let m = build_structured_triangulation(Rect::UNIT, 8).unwrap();
        // element in cell (3, 3): interior, far enough from the boundary
        let e = 2 * (3 * 8 + 3);
        let p = oversample_patch(&m, e, 2.0, Rect::UNIT).unwrap();
        assert!(!p.clipped);
        assert!((p.gamma1 - 2.0).abs() < 1e-12);
        let tau = m.triangle(e);
        let gap = brute_force_gap(&tau, &p.simplex);
        assert!(p.gamma2 > 0.0);
        assert!((p.gamma2 * diameter(&tau) - gap).abs() < 1e-3 * diameter(&tau));
        for v in &tau {
            let lam = barycentric(&p.simplex, *v);
            assert!(lam.iter().all(|&l| l > 0.0));
        }
    }

    #[test]
    fn almost_trivial_dilation() {
        let m = build_structured_triangulation(Rect::UNIT, 4).unwrap();
        let p = oversample_patch(&m, 10, 1.0 + 1e-9, Rect::UNIT).unwrap();
        assert!(p.gamma2 < 1e-8);
        for v in &m.triangle(10) {
            let lam = barycentric(&p.simplex, *v);
            assert!(lam.iter().all(|&l| l > -1e-12));
        }
    }

    #[test]
    fn corner_patch_is_clipped_inside_domain() {
        let m = build_structured_triangulation(Rect::UNIT, 4).unwrap();
        for e in [0, 1] {
            let p = oversample_patch(&m, e, 3.0, Rect::UNIT).unwrap();
            assert!(p.clipped);
            for v in &p.simplex {
                assert!(Rect::UNIT.contains(*v, 0.0), "{v:?}");
            }
            for v in &m.triangle(e) {
                let lam = barycentric(&p.simplex, *v);
                assert!(lam.iter().all(|&l| l > -1e-12));
            }
        }
    }

    #[test]
    fn oversized_dilation_is_reduced() {
        let m = build_structured_triangulation(Rect::UNIT, 2).unwrap();
        let p = oversample_patch(&m, 0, 10.0, Rect::UNIT).unwrap();
        assert!(p.clipped);
        assert!(p.dilation < 10.0 && p.dilation >= 1.0);
        for v in &p.simplex {
            assert!(Rect::UNIT.contains(*v, 1e-12));
        }
    }

    #[test]
    fn patch_element_out_of_range() {
        let m = build_structured_triangulation(Rect::UNIT, 2).unwrap();
        assert!(oversample_patch(&m, 8, 2.0, Rect::UNIT).is_err());
    }

    #[test]
    fn patch_mesh_embeds_element_submesh() {
        let m = build_structured_triangulation(Rect::UNIT, 4).unwrap();
        for e in 0..m.n_elements() {
            let patch = oversample_patch(&m, e, 2.0, Rect::UNIT).unwrap();
            let tau = sub_triangulate_levels(m.triangle(e), 3).unwrap();
            let pm = patch_mesh(&patch, &tau).unwrap();
            let s_area = signed_area(&patch.simplex);
            assert!((pm.local.mesh.total_area() - s_area).abs() < 1e-12 * s_area.max(1.0), "element {e}");
            let inner: f64 = (0..pm.tau_elements).map(|t| pm.local.mesh.area(t)).sum();
            assert!((inner - m.area(e)).abs() < 1e-14);
            assert_eq!(pm.tau_vertices.len(), tau.mesh.n_vertices());
            for (i, &j) in pm.tau_vertices.iter().enumerate() {
                assert!(dist(tau.mesh.vertices()[i], pm.local.mesh.vertices()[j]) < 1e-14);
            }
            // patch boundary vertices lie on the boundary of S
            for (i, lam) in &pm.local.trace_map {
                assert!(lam.iter().any(|l| l.abs() < 1e-9), "vertex {i}: {lam:?}");
            }
        }
    }

    #[test]
    fn msh2_round_trip() {
        let m = build_structured_triangulation(Rect::new(0.0, 2.0, -1.0, 0.5).unwrap(), 3).unwrap();
        let text = m.to_msh2();
        assert!(text.starts_with("MSH2 16 18\n"));
        let back = Mesh::from_msh2(&text).unwrap();
        assert!(back.same_as(&m));
        assert_eq!(back.boundary(), m.boundary());
    }

    #[test]
    fn msh2_golden_single_cell() {
        let m = build_structured_triangulation(Rect::UNIT, 1).unwrap();
        let expected = "MSH2 4 2\nv 0 0\nv 1 0\nv 0 1\nv 1 1\ne 0 1 3\ne 0 3 2\nb 0\nb 1\nb 2\nb 3\n";
        assert_eq!(m.to_msh2(), expected);
    }

    #[test]
    fn msh2_rejects_garbage() {
        assert!(Mesh::from_msh2("MSH3 1 1\n").is_err());
        assert!(Mesh::from_msh2("MSH2 3 1\nv 0 0\nv 1 0\nv 0 1\n").is_err());
    }

    #[test]
    fn locator_finds_points() {
        let m = Arc::new(build_structured_triangulation(Rect::UNIT, 5).unwrap());
        let loc = ElementLocator::new(m.clone());
        let hits = loc.locate_all([0.33, 0.71]);
        assert_eq!(hits.len(), 1);
        let (e, lam) = hits[0];
        let t = m.triangle(e);
        let q = crate::quadrature::map_point(&t, &lam);
        assert!(dist(q, [0.33, 0.71]) < 1e-14);
        // a vertex is shared by up to six elements
        assert_eq!(loc.locate_all([0.4, 0.6]).len(), 6);
    }
}
