//! Kuhn (Freudenthal) triangulations of a box at scale `1/m`.
//!
//! Every lattice cube of side `1/m` is split into `n!` simplices along the
//! monotone lattice paths from one corner to the opposite one. The reference
//! lattice can be rotated before it is clipped to the box; cells that leave
//! the box are dropped, so the effective domain is the union of kept cells.
//!
//! Cell and facet geometry is computed in lattice units from integer index
//! differences, which makes the reported non-degeneracy constants and the
//! facet normal set bitwise independent of `m` for unjittered meshes.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::wellalg::WellSet;

/// Upper bound on candidate simplices before construction is refused.
pub const MAX_CELLS: usize = 20_000_000;
/// Largest allowed jitter, as a fraction of the lattice spacing `1/m`.
pub const MAX_JITTER: f64 = 0.2;
const NORMAL_DEDUP_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn unit(n: usize) -> Self {
        Self {
            lo: vec![0.0; n],
            hi: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&a, &b))| v >= a - tol && v <= b + tol)
    }
}

/// Random vertex displacement of interior vertices, at most `amplitude / m`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Jitter {
    pub amplitude: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub vertices: Vec<usize>,
    pub volume: f64,
    pub barycenter: Vec<f64>,
    pub diameter: f64,
    pub inradius: f64,
    pub facets: Vec<usize>,
    /// Inverse of the physical edge matrix `[x_1 - x_0, ..., x_n - x_0]`.
    pub(crate) edge_inverse: Mat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FacetCells {
    /// Normal points from the first cell into the second.
    Interior(usize, usize),
    /// Normal points out of the domain.
    Boundary(usize),
}

#[derive(Clone, Debug)]
pub struct Facet {
    pub vertices: Vec<usize>,
    pub area: f64,
    pub normal: Vector,
    /// Orthonormal basis of the facet's tangent space, one column per direction.
    pub tangents: Mat,
    pub midpoint: Vec<f64>,
    pub cells: FacetCells,
}

impl Facet {
    pub fn is_interior(&self) -> bool {
        matches!(self.cells, FacetCells::Interior(..))
    }
}

/// Scale-free non-degeneracy constants: `c1T m^-n <= |T| <= c2T m^-n` and
/// `c1 <= m r_in`, `m diam <= c2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshConstants {
    pub c1_t: f64,
    pub c2_t: f64,
    pub c1_t_tilde: f64,
    pub c2_t_tilde: f64,
}

#[derive(Clone, Debug)]
pub struct SimplicialMesh {
    dim: usize,
    scale: usize,
    domain: BoxDomain,
    lattice_rotation: Mat,
    jitter: Option<Jitter>,
    vertices: Vec<Vec<f64>>,
    cells: Vec<Cell>,
    facets: Vec<Facet>,
    adjacency: Vec<Vec<usize>>,
    constants: MeshConstants,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn canonical(mut v: Vector) -> Vector {
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v = -v;
        }
    }
    v
}

/// Unit normal and (n-1)-volume of the facet spanned by `edges` (columns).
fn facet_normal_area(edges: &Mat) -> (Vector, f64) {
    match edges.nrows() {
        2 => {
            let t = edges.column(0);
            let len = t.norm();
            (Vector::from_vec(vec![-t[1] / len, t[0] / len]), len)
        }
        3 => {
            let (a, b) = (edges.column(0), edges.column(1));
            let c = a.cross(&b);
            let len = c.norm();
            (Vector::from_iterator(3, c.iter().map(|x| x / len)), 0.5 * len)
        }
        _ => unreachable!("dimension checked at construction"),
    }
}

fn tangent_basis(normal: &Vector, edges: &Mat) -> Mat {
    match normal.len() {
        2 => Mat::from_column_slice(2, 1, &[-normal[1], normal[0]]),
        _ => {
            let t1 = edges.column(0).normalize();
            let t2 = normal.cross(&t1);
            let mut m = Mat::zeros(3, 2);
            m.set_column(0, &t1);
            m.set_column(1, &t2);
            m
        }
    }
}

impl SimplicialMesh {
    /// Kuhn subdivision of the (rotated) lattice `(1/m) Z^n`, clipped to `domain`.
    pub fn build_kuhn(
        n: usize,
        m: usize,
        domain: &BoxDomain,
        lattice_rotation: &Mat,
        jitter: Option<Jitter>,
    ) -> Result<Self> {
        if !(2..=3).contains(&n) {
            return Err(Error::Unsupported(format!("mesh dimension {n} (need 2 or 3)")));
        }
        if m < 2 {
            return Err(Error::Input(format!("scale m = {m} must be at least 2")));
        }
        if domain.dim() != n || domain.hi.len() != n {
            return Err(Error::Input("domain dimension mismatch".into()));
        }
        if domain.lo.iter().zip(&domain.hi).any(|(a, b)| !(b > a)) {
            return Err(Error::Input("domain is empty".into()));
        }
        if lattice_rotation.nrows() != n || !linalg::is_rotation(lattice_rotation, 1e-10) {
            return Err(Error::Input("lattice rotation is not in SO(n)".into()));
        }
        if let Some(j) = jitter {
            if !(0.0..=MAX_JITTER).contains(&j.amplitude) {
                return Err(Error::Input(format!(
                    "jitter amplitude {} outside [0, {MAX_JITTER}]",
                    j.amplitude
                )));
            }
        }
        let scale = m as f64;
        let center = domain.center();
        let r = lattice_rotation;
        let rt = r.transpose();

        // Lattice-index bounding box covering the rotated domain.
        let mut kmin = vec![f64::INFINITY; n];
        let mut kmax = vec![f64::NEG_INFINITY; n];
        for corner in 0..(1usize << n) {
            let x = Vector::from_iterator(
                n,
                (0..n).map(|d| {
                    if corner >> d & 1 == 1 {
                        domain.hi[d] - center[d]
                    } else {
                        domain.lo[d] - center[d]
                    }
                }),
            );
            let y = &rt * x;
            for d in 0..n {
                let k = (y[d] + center[d] - domain.lo[d]) * scale;
                kmin[d] = kmin[d].min(k);
                kmax[d] = kmax[d].max(k);
            }
        }
        let lo_idx: Vec<i64> = kmin.iter().map(|k| k.floor() as i64 - 1).collect();
        let hi_idx: Vec<i64> = kmax.iter().map(|k| k.ceil() as i64 + 1).collect();
        let candidates = (0..n)
            .map(|d| (hi_idx[d] - lo_idx[d]) as f64)
            .product::<f64>()
            * factorial(n);
        if candidates > MAX_CELLS as f64 {
            return Err(Error::Resource(format!(
                "about {candidates:.0} candidate cells exceed the budget of {MAX_CELLS}"
            )));
        }

        let offset: Vec<f64> = (0..n).map(|d| domain.lo[d] - center[d]).collect();
        let position = |k: &[i64]| -> Vec<f64> {
            let local = Vector::from_iterator(n, (0..n).map(|d| offset[d] + k[d] as f64 / scale));
            let p = r * local;
            (0..n).map(|d| center[d] + p[d]).collect()
        };
        let tol = 1e-12 * domain.hi.iter().chain(&domain.lo).fold(1.0f64, |a, b| a.max(b.abs()));
        let perms = permutations(n);

        let mut vertex_ids: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut lattice_index: Vec<Vec<i64>> = Vec::new();
        let mut vertices: Vec<Vec<f64>> = Vec::new();
        let mut cell_vertices: Vec<Vec<usize>> = Vec::new();

        let mut cube = lo_idx.clone();
        'cubes: loop {
            for perm in &perms {
                let mut path = Vec::with_capacity(n + 1);
                let mut k = cube.clone();
                path.push(k.clone());
                for &axis in perm {
                    k[axis] += 1;
                    path.push(k.clone());
                }
                if path.iter().all(|k| domain.contains(&position(k), tol)) {
                    let ids = path
                        .into_iter()
                        .map(|k| {
                            *vertex_ids.entry(k.clone()).or_insert_with(|| {
                                vertices.push(position(&k));
                                lattice_index.push(k);
                                vertices.len() - 1
                            })
                        })
                        .collect();
                    cell_vertices.push(ids);
                }
            }
            let mut d = 0;
            loop {
                cube[d] += 1;
                if cube[d] < hi_idx[d] {
                    break;
                }
                cube[d] = lo_idx[d];
                d += 1;
                if d == n {
                    break 'cubes;
                }
            }
        }
        if cell_vertices.is_empty() {
            return Err(Error::Input("no lattice cell fits inside the domain".into()));
        }

        // Facet pairing.
        let mut facet_map: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut facet_vertices: Vec<Vec<usize>> = Vec::new();
        let mut facet_cells: Vec<Vec<usize>> = Vec::new();
        let mut cell_facets: Vec<Vec<usize>> = vec![Vec::with_capacity(n + 1); cell_vertices.len()];
        for (c, verts) in cell_vertices.iter().enumerate() {
            for omit in 0..=n {
                let mut key: Vec<usize> = verts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != omit)
                    .map(|(_, &v)| v)
                    .collect();
                key.sort_unstable();
                let id = *facet_map.entry(key.clone()).or_insert_with(|| {
                    facet_vertices.push(key);
                    facet_cells.push(Vec::new());
                    facet_vertices.len() - 1
                });
                facet_cells[id].push(c);
                cell_facets[c].push(id);
            }
        }

        // Jitter interior vertices in lattice units.
        let mut shift = vec![vec![0.0; n]; vertices.len()];
        if let Some(j) = jitter.filter(|j| j.amplitude > 0.0) {
            let mut on_boundary = vec![false; vertices.len()];
            for (fv, fc) in facet_vertices.iter().zip(&facet_cells) {
                if fc.len() == 1 {
                    for &v in fv {
                        on_boundary[v] = true;
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(j.seed);
            for (v, s) in shift.iter_mut().enumerate() {
                // draw for every vertex so the stream does not depend on the boundary
                let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let rad: f64 = rng.random_range(0.0..1.0);
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                if !on_boundary[v] {
                    for d in 0..n {
                        s[d] = j.amplitude * rad * dir[d] / norm;
                    }
                }
            }
            for (v, p) in vertices.iter_mut().enumerate() {
                for d in 0..n {
                    p[d] += shift[v][d] / scale;
                }
            }
        }

        // Edge vector between two vertices in lattice units.
        let lattice_edge = |a: usize, b: usize| -> Vector {
            let dk = Vector::from_iterator(
                n,
                (0..n).map(|d| (lattice_index[b][d] - lattice_index[a][d]) as f64),
            );
            let mut e = r * dk;
            for d in 0..n {
                e[d] += shift[b][d] - shift[a][d];
            }
            e
        };

        let mut cells = Vec::with_capacity(cell_vertices.len());
        let mut lattice_volumes = Vec::with_capacity(cell_vertices.len());
        let nf = factorial(n);
        for (c, verts) in cell_vertices.iter().enumerate() {
            let mut e = Mat::zeros(n, n);
            for i in 0..n {
                e.set_column(i, &lattice_edge(verts[0], verts[i + 1]));
            }
            let det = linalg::det(&e);
            if det.abs() < 1e-12 {
                return Err(Error::Input(format!("cell {c} is degenerate")));
            }
            if jitter.is_some() {
                let mut e0 = Mat::zeros(n, n);
                for i in 0..n {
                    let dk = Vector::from_iterator(
                        n,
                        (0..n).map(|d| (lattice_index[verts[i + 1]][d] - lattice_index[verts[0]][d]) as f64),
                    );
                    e0.set_column(i, &(r * dk));
                }
                if linalg::det(&e0) * det <= 0.0 {
                    return Err(Error::Input(format!("jitter inverted cell {c}")));
                }
            }
            let lattice_volume = det.abs() / nf;
            let mut diameter: f64 = 0.0;
            for a in 0..=n {
                for b in a + 1..=n {
                    diameter = diameter.max(lattice_edge(verts[a], verts[b]).norm());
                }
            }
            let edge_inverse = (&e / scale)
                .try_inverse()
                .ok_or_else(|| Error::Input(format!("cell {c} is singular")))?;
            let barycenter = (0..n)
                .map(|d| verts.iter().map(|&v| vertices[v][d]).sum::<f64>() / (n + 1) as f64)
                .collect();
            cells.push(Cell {
                vertices: verts.clone(),
                volume: lattice_volume / scale.powi(n as i32),
                barycenter,
                diameter: diameter / scale,
                inradius: 0.0,
                facets: cell_facets[c].clone(),
                edge_inverse,
            });
            lattice_volumes.push((lattice_volume, diameter));
        }

        let mut facets = Vec::with_capacity(facet_vertices.len());
        let mut lattice_areas = Vec::with_capacity(facet_vertices.len());
        for (fv, fc) in facet_vertices.iter().zip(&facet_cells) {
            let mut e = Mat::zeros(n, n - 1);
            for i in 0..n - 1 {
                e.set_column(i, &lattice_edge(fv[0], fv[i + 1]));
            }
            let (mut normal, lattice_area) = facet_normal_area(&e);
            let midpoint: Vec<f64> = (0..n)
                .map(|d| fv.iter().map(|&v| vertices[v][d]).sum::<f64>() / n as f64)
                .collect();
            let cells_of = match fc.as_slice() {
                [a] => {
                    let out: f64 = (0..n).map(|d| normal[d] * (midpoint[d] - cells[*a].barycenter[d])).sum();
                    if out < 0.0 {
                        normal = -normal;
                    }
                    FacetCells::Boundary(*a)
                }
                [a, b] => {
                    let (a, b) = ((*a).min(*b), (*a).max(*b));
                    let dir: f64 = (0..n)
                        .map(|d| normal[d] * (cells[b].barycenter[d] - cells[a].barycenter[d]))
                        .sum();
                    if dir < 0.0 {
                        normal = -normal;
                    }
                    FacetCells::Interior(a, b)
                }
                _ => return Err(Error::Input("facet shared by more than two cells".into())),
            };
            let tangents = tangent_basis(&normal, &e);
            facets.push(Facet {
                vertices: fv.clone(),
                area: lattice_area / scale.powi(n as i32 - 1),
                normal,
                tangents,
                midpoint,
                cells: cells_of,
            });
            lattice_areas.push(lattice_area);
        }

        let mut constants = MeshConstants {
            c1_t: f64::INFINITY,
            c2_t: 0.0,
            c1_t_tilde: f64::INFINITY,
            c2_t_tilde: 0.0,
        };
        for (c, cell) in cells.iter_mut().enumerate() {
            let (lv, ld) = lattice_volumes[c];
            let surface: f64 = cell.facets.iter().map(|&f| lattice_areas[f]).sum();
            let lattice_inradius = n as f64 * lv / surface;
            cell.inradius = lattice_inradius / scale;
            constants.c1_t = constants.c1_t.min(lv);
            constants.c2_t = constants.c2_t.max(lv);
            constants.c1_t_tilde = constants.c1_t_tilde.min(lattice_inradius);
            constants.c2_t_tilde = constants.c2_t_tilde.max(ld);
        }

        let mut adjacency = vec![Vec::new(); cells.len()];
        for f in &facets {
            if let FacetCells::Interior(a, b) = f.cells {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }

        Ok(Self {
            dim: n,
            scale: m,
            domain: domain.clone(),
            lattice_rotation: lattice_rotation.clone(),
            jitter,
            vertices,
            cells,
            facets,
            adjacency,
            constants,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn lattice_rotation(&self) -> &Mat {
        &self.lattice_rotation
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    pub fn neighbors(&self, cell: usize) -> &[usize] {
        &self.adjacency[cell]
    }

    pub fn constants(&self) -> MeshConstants {
        self.constants
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Volume of the union of kept cells.
    pub fn effective_volume(&self) -> f64 {
        self.cells.iter().map(|c| c.volume).sum()
    }

    pub fn min_cell_volume(&self) -> f64 {
        self.cells.iter().map(|c| c.volume).fold(f64::INFINITY, f64::min)
    }

    pub fn max_cell_diameter(&self) -> f64 {
        self.cells.iter().map(|c| c.diameter).fold(0.0, f64::max)
    }

    pub fn boundary_area(&self) -> f64 {
        self.facets.iter().filter(|f| !f.is_interior()).map(|f| f.area).sum()
    }

    pub fn interior_facets(&self) -> impl Iterator<Item = (usize, &Facet)> {
        self.facets.iter().enumerate().filter(|(_, f)| f.is_interior())
    }

    /// Distinct facet normals up to sign, with the first nonzero component positive.
    pub fn distinct_normals(&self) -> Vec<Vector> {
        let mut out: Vec<Vector> = Vec::new();
        for f in &self.facets {
            let v = canonical(f.normal.clone());
            if out.iter().all(|u| (u - &v).amax() > NORMAL_DEDUP_TOL) {
                out.push(v);
            }
        }
        out
    }

    pub fn summary(&self) -> MeshSummary {
        let interior = self.facets.iter().filter(|f| f.is_interior()).count();
        MeshSummary {
            dim: self.dim,
            m: self.scale,
            cells: self.cells.len(),
            vertices: self.vertices.len(),
            facets: self.facets.len(),
            interior_facets: interior,
            boundary_facets: self.facets.len() - interior,
            effective_volume: self.effective_volume(),
            constants: self.constants,
            normals: self
                .distinct_normals()
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
            lattice_rotation: linalg::to_row_major(&self.lattice_rotation),
            jitter: self.jitter,
        }
    }

    /// Little-endian dump: magic `WSMESH01`, `u32 dim`, `u32 0`, `u64 vertices`,
    /// `u64 cells`, vertex coordinates as `f64`, cell vertex indices as `u32`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"WSMESH01")?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(&(self.vertices.len() as u64).to_le_bytes())?;
        w.write_all(&(self.cells.len() as u64).to_le_bytes())?;
        for v in &self.vertices {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for c in &self.cells {
            for &v in &c.vertices {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MeshSummary {
    pub dim: usize,
    pub m: usize,
    pub cells: usize,
    pub vertices: usize,
    pub facets: usize,
    pub interior_facets: usize,
    pub boundary_facets: usize,
    pub effective_volume: f64,
    pub constants: MeshConstants,
    pub normals: Vec<Vec<f64>>,
    pub lattice_rotation: Vec<f64>,
    pub jitter: Option<Jitter>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Misalignment {
    pub normal: Vec<f64>,
    pub twin: Vec<f64>,
    pub alignment: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct IncompatibilityReport {
    pub ok: bool,
    pub worst_alignment: f64,
    pub offending: Vec<Misalignment>,
}

/// `ok` iff `|b·b_ij| <= 1 - δ0` for every pair of normal and twin normal.
pub fn check_normals(normals: &[Vector], twins: &[Vector], delta0: f64) -> IncompatibilityReport {
    let mut worst: f64 = 0.0;
    let mut offending = Vec::new();
    for b in normals {
        for t in twins {
            let align = b.dot(t).abs();
            worst = worst.max(align);
            if align > 1.0 - delta0 {
                offending.push(Misalignment {
                    normal: b.iter().copied().collect(),
                    twin: t.iter().copied().collect(),
                    alignment: align,
                });
            }
        }
    }
    IncompatibilityReport {
        ok: offending.is_empty(),
        worst_alignment: worst,
        offending,
    }
}

/// Checks every facet normal, boundary facets included, against the twin normals.
pub fn check_incompatibility(mesh: &SimplicialMesh, wells: &WellSet, delta0: f64) -> IncompatibilityReport {
    check_normals(&mesh.distinct_normals(), &wells.twin_normals(), delta0)
}

/// Facet normals of the unrotated 2D Kuhn lattice.
pub fn kuhn_reference_normals_2d() -> Vec<Vector> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        Vector::from_vec(vec![1.0, 0.0]),
        Vector::from_vec(vec![0.0, 1.0]),
        Vector::from_vec(vec![h, -h]),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct AdmissibleRotation {
    pub angle: f64,
    #[serde(serialize_with = "serialize_mat")]
    pub rotation: Mat,
    /// `min (1 - |b·b_ij|)` over rotated lattice normals and twin normals.
    pub margin: f64,
    /// `margin >= δ0`.
    pub admissible: bool,
}

fn serialize_mat<S: serde::Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
    linalg::to_row_major(m).serialize(s)
}

fn rotation_margin(angle: f64, twins: &[Vector]) -> f64 {
    let r = linalg::rotation2(angle);
    let mut margin: f64 = 1.0;
    for b in kuhn_reference_normals_2d() {
        let rb = &r * b;
        for t in twins {
            margin = margin.min(1.0 - rb.dot(t).abs());
        }
    }
    margin
}

/// Lattice rotation (n = 2) maximising the distance of the Kuhn normals from
/// every twin normal of `wells`.
pub fn find_admissible_rotation(wells: &WellSet, delta0: f64, grid: usize) -> Result<AdmissibleRotation> {
    if wells.dim() != 2 {
        return Err(Error::Unsupported("admissible rotation search needs n = 2".into()));
    }
    best_lattice_rotation(&wells.twin_normals(), delta0, grid)
}

/// Angles are scanned over `[0, π)`, the period of the Kuhn normal set, then
/// refined by golden section around the best grid point.
pub fn best_lattice_rotation(twins: &[Vector], delta0: f64, grid: usize) -> Result<AdmissibleRotation> {
    if twins.is_empty() {
        return Ok(AdmissibleRotation {
            angle: 0.0,
            rotation: Mat::identity(2, 2),
            margin: 1.0,
            admissible: true,
        });
    }
    if twins.iter().any(|t| t.len() != 2) {
        return Err(Error::Input("twin normals must be 2-vectors".into()));
    }
    let grid = grid.max(8);
    let step = std::f64::consts::PI / grid as f64;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..grid {
        let a = k as f64 * step;
        let g = rotation_margin(a, twins);
        if g > best.0 {
            best = (g, a);
        }
    }
    let (a, neg) = linalg::golden_min(|a| -rotation_margin(a, twins), best.1 - step, best.1 + step, 1e-12);
    if -neg > best.0 {
        best = (-neg, a.rem_euclid(std::f64::consts::PI));
    }
    let (margin, angle) = best;
    if margin <= 0.0 {
        return Err(Error::Domain(
            "every lattice rotation aligns a facet with a twin normal".into(),
        ));
    }
    Ok(AdmissibleRotation {
        angle,
        rotation: linalg::rotation2(angle),
        margin,
        admissible: margin >= delta0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wellalg::reference_two_well;

    fn mesh2(m: usize, angle: f64) -> SimplicialMesh {
        SimplicialMesh::build_kuhn(2, m, &BoxDomain::unit(2), &linalg::rotation2(angle), None).unwrap()
    }

    #[test]
    fn small_square_has_eight_triangles() {
        let mesh = mesh2(2, 0.0);
        assert_eq!(mesh.num_cells(), 8);
        for c in mesh.cells() {
            assert!((c.volume - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_square_at_m16() {
        let mesh = mesh2(16, 0.0);
        assert_eq!(mesh.num_cells(), 512);
        let k = mesh.constants();
        assert_eq!(k.c1_t, 0.5);
        assert_eq!(k.c2_t, 0.5);
        assert!((mesh.effective_volume() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cube_at_m2_has_48_tetrahedra() {
        let mesh = SimplicialMesh::build_kuhn(3, 2, &BoxDomain::unit(3), &Mat::identity(3, 3), None).unwrap();
        assert_eq!(mesh.num_cells(), 48);
        assert!((mesh.effective_volume() - 1.0).abs() < 1e-12);
        for f in mesh.facets() {
            assert!((f.normal.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_inputs() {
        let id = Mat::identity(2, 2);
        assert!(SimplicialMesh::build_kuhn(2, 1, &BoxDomain::unit(2), &id, None).is_err());
        let bad_rot = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(SimplicialMesh::build_kuhn(2, 4, &BoxDomain::unit(2), &bad_rot, None).is_err());
        let empty = BoxDomain {
            lo: vec![0.0, 0.0],
            hi: vec![0.0, 1.0],
        };
        assert!(SimplicialMesh::build_kuhn(2, 4, &empty, &id, None).is_err());
        let err = SimplicialMesh::build_kuhn(3, 200_000, &BoxDomain::unit(3), &Mat::identity(3, 3), None);
        assert!(matches!(err, Err(Error::Resource(_))));
    }

    #[test]
    fn facet_structure_is_consistent() {
        for angle in [0.0, std::f64::consts::FRAC_PI_8] {
            let mesh = mesh2(8, angle);
            let slots = mesh.num_cells() * 3;
            let boundary = mesh.facets().iter().filter(|f| !f.is_interior()).count();
            let interior = mesh.facets().len() - boundary;
            assert_eq!(interior, (slots - boundary) / 2);
            for (a, nb) in (0..mesh.num_cells()).map(|a| (a, mesh.neighbors(a))) {
                for &b in nb {
                    assert!(mesh.neighbors(b).contains(&a));
                }
            }
            for f in mesh.facets() {
                assert!((f.normal.norm() - 1.0).abs() < 1e-12);
                assert!((f.normal.dot(&f.tangents.column(0))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normal_set_and_constants_do_not_depend_on_m() {
        let angle = 0.4;
        let base = mesh2(4, angle).distinct_normals();
        assert_eq!(base.len(), 3);
        for m in [8, 16] {
            let other = mesh2(m, angle).distinct_normals();
            assert_eq!(other.len(), base.len());
            for v in &other {
                assert!(base.iter().any(|u| u == v));
            }
        }
        assert_eq!(mesh2(8, angle).constants(), mesh2(64, angle).constants());
        let d8 = mesh2(8, angle).max_cell_diameter() * 8.0;
        let d64 = mesh2(64, angle).max_cell_diameter() * 64.0;
        assert!((d8 - d64).abs() < 1e-12);
    }

    #[test]
    fn identity_normals_match_reference() {
        let got = mesh2(4, 0.0).distinct_normals();
        for r in kuhn_reference_normals_2d() {
            assert!(got.iter().any(|v| (v - &r).amax() < 1e-12));
        }
    }

    #[test]
    fn jitter_keeps_tiling_and_bounds() {
        let id = Mat::identity(2, 2);
        let j = Jitter {
            amplitude: 0.2,
            seed: 7,
        };
        let mesh = SimplicialMesh::build_kuhn(2, 8, &BoxDomain::unit(2), &id, Some(j)).unwrap();
        assert!((mesh.effective_volume() - 1.0).abs() < 1e-12);
        let plain = mesh2(8, 0.0);
        let moved = mesh
            .vertices()
            .iter()
            .zip(plain.vertices())
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert!(moved > 0.0 && moved <= 0.2 / 8.0 + 1e-15);
        assert!(SimplicialMesh::build_kuhn(
            2,
            8,
            &BoxDomain::unit(2),
            &id,
            Some(Jitter {
                amplitude: 0.5,
                seed: 1
            })
        )
        .is_err());
    }

    #[test]
    fn aligned_twin_normal_is_reported() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let normals = vec![
            Vector::from_vec(vec![1.0, 0.0]),
            Vector::from_vec(vec![0.0, 1.0]),
            Vector::from_vec(vec![h, h]),
        ];
        let twin = vec![Vector::from_vec(vec![1.0, 0.0])];
        let rep = check_normals(&normals, &twin, 0.1);
        assert!(!rep.ok);
        assert!((rep.worst_alignment - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotated_lattice_alignment() {
        let angle = 22.5f64.to_radians();
        let r = linalg::rotation2(angle);
        let normals: Vec<Vector> = kuhn_reference_normals_2d().into_iter().map(|b| &r * b).collect();
        let twin = vec![Vector::from_vec(vec![1.0, 0.0])];
        let expected = angle.cos();
        let rep = check_normals(&normals, &twin, 0.07);
        assert!((rep.worst_alignment - expected).abs() < 1e-12);
        assert!(rep.ok);
        assert!(!check_normals(&normals, &twin, 0.08).ok);
    }

    #[test]
    fn no_connections_is_vacuously_ok() {
        let mut ws = WellSet::new(vec![Mat::identity(2, 2)]).unwrap();
        ws.solve_connections().unwrap();
        assert!(check_incompatibility(&mesh2(4, 0.0), &ws, 0.5).ok);
        let rot = find_admissible_rotation(&ws, 0.1, 64).unwrap();
        assert_eq!(rot.angle, 0.0);
        assert_eq!(rot.margin, 1.0);
    }

    #[test]
    fn single_diagonal_twin() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let twins = vec![Vector::from_vec(vec![h, h])];
        let rot = best_lattice_rotation(&twins, 0.01, 1024).unwrap();
        assert!(rot.margin >= rotation_margin(0.0, &twins));
        assert!(linalg::is_rotation(&rot.rotation, 1e-12));
    }

    #[test]
    fn orthogonal_twins_grid_refinement() {
        let twins = vec![Vector::from_vec(vec![1.0, 0.0]), Vector::from_vec(vec![0.0, 1.0])];
        let brute = (0..4096)
            .map(|k| rotation_margin(std::f64::consts::PI * k as f64 / 4096.0, &twins))
            .fold(f64::NEG_INFINITY, f64::max);
        let a = best_lattice_rotation(&twins, 0.05, 4096).unwrap();
        let b = best_lattice_rotation(&twins, 0.05, 16384).unwrap();
        assert!(a.margin >= brute - 1e-15);
        assert!((a.margin - b.margin).abs() < 1e-4);
    }

    #[test]
    fn admissible_rotation_for_reference_pair() {
        let mut ws = reference_two_well();
        ws.solve_connections().unwrap();
        let coarse = find_admissible_rotation(&ws, 0.05, 4096).unwrap();
        let fine = find_admissible_rotation(&ws, 0.05, 16384).unwrap();
        assert!(coarse.admissible);
        assert!((coarse.margin - fine.margin).abs() < 1e-4);
        // twins along the diagonals: best margin is 1 - cos(22.5°)
        assert!((coarse.margin - (1.0 - 22.5f64.to_radians().cos())).abs() < 1e-6);
        let identity = mesh2(4, 0.0);
        assert!(!check_incompatibility(&identity, &ws, 0.05).ok);
        let rotated = mesh2(4, coarse.angle);
        assert!(check_incompatibility(&rotated, &ws, 0.05).ok);
    }
}
