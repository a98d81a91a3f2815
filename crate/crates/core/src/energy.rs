//! Piecewise-affine deformations, the multi-well energy and laminate constructors.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::mesh::{FacetCells, SimplicialMesh};
use crate::wellalg::{nearest_well, RankOneConnection, WellSet};

/// Relative bound on tangential gradient jumps for a continuous field.
pub const CONTINUITY_TOL: f64 = 1e-9;

/// Per-cell gradients of a piecewise-affine map on a mesh.
#[derive(Clone, Debug)]
pub struct PWAffineField {
    mesh: Arc<SimplicialMesh>,
    gradients: Vec<Mat>,
    vertex_values: Option<Vec<Vec<f64>>>,
    continuity_residual: f64,
}

fn tangential_jump(mesh: &SimplicialMesh, gradients: &[Mat]) -> f64 {
    mesh.facets()
        .par_iter()
        .map(|f| match f.cells {
            FacetCells::Interior(a, b) => ((&gradients[a] - &gradients[b]) * &f.tangents)
                .column_iter()
                .map(|c| c.norm())
                .fold(0.0, f64::max),
            FacetCells::Boundary(_) => 0.0,
        })
        .reduce(|| 0.0, f64::max)
}

impl PWAffineField {
    /// Interpolates vertex values and differentiates cellwise.
    pub fn from_vertex_values(mesh: Arc<SimplicialMesh>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = mesh.dim();
        if values.len() != mesh.vertices().len() {
            return Err(Error::Input(format!(
                "{} vertex values for {} vertices",
                values.len(),
                mesh.vertices().len()
            )));
        }
        if values.iter().any(|v| v.len() != n || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Input("vertex values must be finite n-vectors".into()));
        }
        let gradients: Vec<Mat> = mesh
            .cells()
            .par_iter()
            .map(|c| {
                let y0 = &values[c.vertices[0]];
                let mut y = Mat::zeros(n, n);
                for i in 0..n {
                    let yi = &values[c.vertices[i + 1]];
                    for d in 0..n {
                        y[(d, i)] = yi[d] - y0[d];
                    }
                }
                y * &c.edge_inverse
            })
            .collect();
        let continuity_residual = tangential_jump(&mesh, &gradients);
        Ok(Self {
            mesh,
            gradients,
            vertex_values: Some(values),
            continuity_residual,
        })
    }

    /// Samples `map` at the mesh vertices.
    pub fn from_map<F>(mesh: Arc<SimplicialMesh>, map: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        let values = mesh.vertices().par_iter().map(|x| map(x)).collect();
        Self::from_vertex_values(mesh, values)
    }

    /// `u(x) = F x + b`.
    pub fn affine(mesh: Arc<SimplicialMesh>, f: &Mat, b: &[f64]) -> Result<Self> {
        let n = mesh.dim();
        if f.nrows() != n || f.ncols() != n || b.len() != n {
            return Err(Error::Input("affine map dimension mismatch".into()));
        }
        Self::from_map(mesh, |x| {
            let y = f * Vector::from_column_slice(x);
            (0..n).map(|d| y[d] + b[d]).collect()
        })
    }

    /// Arbitrary per-cell gradients. The result need not be a gradient field;
    /// `is_continuous` tells whether it is.
    pub fn from_cell_gradients(mesh: Arc<SimplicialMesh>, gradients: Vec<Mat>) -> Result<Self> {
        let n = mesh.dim();
        if gradients.len() != mesh.num_cells() {
            return Err(Error::Input(format!(
                "{} gradients for {} cells",
                gradients.len(),
                mesh.num_cells()
            )));
        }
        for g in &gradients {
            if g.nrows() != n || g.ncols() != n {
                return Err(Error::Input("gradient dimension mismatch".into()));
            }
            linalg::ensure_finite(g, "cell gradient")?;
        }
        let continuity_residual = tangential_jump(&mesh, &gradients);
        Ok(Self {
            mesh,
            gradients,
            vertex_values: None,
            continuity_residual,
        })
    }

    pub fn mesh(&self) -> &Arc<SimplicialMesh> {
        &self.mesh
    }

    pub fn gradients(&self) -> &[Mat] {
        &self.gradients
    }

    pub fn gradient(&self, cell: usize) -> &Mat {
        &self.gradients[cell]
    }

    pub fn vertex_values(&self) -> Option<&[Vec<f64>]> {
        self.vertex_values.as_deref()
    }

    pub fn continuity_residual(&self) -> f64 {
        self.continuity_residual
    }

    pub fn max_gradient_norm(&self) -> f64 {
        self.gradients.iter().map(linalg::frobenius).fold(0.0, f64::max)
    }

    pub fn is_continuous(&self) -> bool {
        self.continuity_residual <= CONTINUITY_TOL * self.max_gradient_norm().max(1.0)
    }

    /// `x ↦ R u(x) + b`.
    pub fn rigid_image(&self, r: &Mat, b: &[f64]) -> Result<Self> {
        let n = self.mesh.dim();
        if r.nrows() != n || b.len() != n {
            return Err(Error::Input("rigid motion dimension mismatch".into()));
        }
        match &self.vertex_values {
            Some(values) => {
                let moved = values
                    .iter()
                    .map(|y| {
                        let z = r * Vector::from_column_slice(y);
                        (0..n).map(|d| z[d] + b[d]).collect()
                    })
                    .collect();
                Self::from_vertex_values(self.mesh.clone(), moved)
            }
            None => Self::from_cell_gradients(self.mesh.clone(), self.gradients.iter().map(|g| r * g).collect()),
        }
    }

    /// Replaces one cell gradient; the result is generally not continuous.
    pub fn with_cell_gradient(&self, cell: usize, g: Mat) -> Result<Self> {
        if cell >= self.gradients.len() {
            return Err(Error::Input(format!("cell {cell} out of range")));
        }
        let mut grads = self.gradients.clone();
        grads[cell] = g;
        Self::from_cell_gradients(self.mesh.clone(), grads)
    }

    /// Adds `amplitude φ(x)` at the vertices, where `φ` is a fixed smooth
    /// periodic field with `|∇φ| <= 2` (n = 2) or `<= 3` (n = 3).
    pub fn with_smooth_perturbation(&self, amplitude: f64) -> Result<Self> {
        let values = self
            .vertex_values
            .as_ref()
            .ok_or_else(|| Error::Input("perturbation needs vertex values".into()))?;
        let moved = values
            .iter()
            .zip(self.mesh.vertices())
            .map(|(y, x)| {
                let phi = smooth_profile(x);
                y.iter().zip(phi).map(|(a, b)| a + amplitude * b).collect()
            })
            .collect();
        Self::from_vertex_values(self.mesh.clone(), moved)
    }

    pub fn header(&self) -> FieldHeader {
        FieldHeader {
            dim: self.mesh.dim(),
            m: self.mesh.scale(),
            cells: self.gradients.len(),
            layout: "cell-major, row-major n*n f64 little-endian".into(),
            continuity_residual: self.continuity_residual,
        }
    }

    /// Cell-major, row-major gradients as little-endian `f64`.
    pub fn write_gradients<W: Write>(&self, mut w: W) -> Result<()> {
        for g in &self.gradients {
            for x in linalg::to_row_major(g) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

fn smooth_profile(x: &[f64]) -> Vec<f64> {
    let t = std::f64::consts::TAU;
    let n = x.len();
    (0..n)
        .map(|d| {
            let next = x[(d + 1) % n];
            ((t * x[d]).sin() * (t * next).cos() + 0.5 * (2.0 * t * next).cos()) / t
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct FieldHeader {
    pub dim: usize,
    pub m: usize,
    pub cells: usize,
    pub layout: String,
    pub continuity_residual: f64,
}

/// Energy density `h`, bounded below by `c1 dist²(·, K)`.
#[derive(Clone)]
pub enum Density {
    Quadratic { c1: f64 },
    Custom {
        c1: f64,
        h: Arc<dyn Fn(&Mat) -> f64 + Send + Sync>,
    },
}

impl Default for Density {
    fn default() -> Self {
        Density::Quadratic { c1: 1.0 }
    }
}

impl std::fmt::Debug for Density {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Density::Quadratic { c1 } => write!(f, "Quadratic {{ c1: {c1} }}"),
            Density::Custom { c1, .. } => write!(f, "Custom {{ c1: {c1} }}"),
        }
    }
}

impl Density {
    pub fn c1(&self) -> f64 {
        match self {
            Density::Quadratic { c1 } | Density::Custom { c1, .. } => *c1,
        }
    }

    fn value(&self, m: &Mat, dist2: f64) -> f64 {
        match self {
            Density::Quadratic { c1 } => c1 * dist2,
            Density::Custom { h, .. } => h(m),
        }
    }

    /// Samples matrices near and away from the wells and returns the first
    /// one with `h(M) < c1 dist²(M, K)`, if any.
    pub fn find_lower_bound_violation<R: Rng>(&self, wells: &WellSet, samples: usize, rng: &mut R) -> Option<Mat> {
        let n = wells.dim();
        let c1 = self.c1();
        for _ in 0..samples {
            let j = rng.random_range(0..wells.len());
            let q = random_rotation(n, rng);
            let sigma = 10f64.powf(rng.random_range(-3.0..1.0));
            let noise = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let m = q * &wells.wells()[j] + noise * sigma;
            let (d, _) = nearest_well(&m, wells.wells());
            let h = self.value(&m, d * d);
            if !(h >= c1 * d * d * (1.0 - 1e-12)) {
                return Some(m);
            }
        }
        None
    }
}

/// Uniformly distributed rotation (n = 2, 3) or nearest rotation of a random matrix otherwise.
pub fn random_rotation<R: Rng>(n: usize, rng: &mut R) -> Mat {
    if n == 2 {
        return linalg::rotation2(rng.random_range(0.0..std::f64::consts::TAU));
    }
    let g = Mat::from_fn(n, n, |_, _| {
        // Box-Muller
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let v: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        (-2.0 * u.ln()).sqrt() * v.cos()
    });
    linalg::nearest_rotation(&g)
}

#[derive(Clone, Debug, Serialize)]
pub struct CellEnergy {
    pub cell: usize,
    pub dist2: f64,
    pub nearest_well: usize,
    pub density: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyReport {
    pub total: f64,
    pub c1: f64,
    pub per_cell: Vec<CellEnergy>,
}

impl EnergyReport {
    /// CSV with columns `cell_id,dist2,nearest_well`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell_id", "dist2", "nearest_well"])?;
        for c in &self.per_cell {
            out.write_record([c.cell.to_string(), c.dist2.to_string(), c.nearest_well.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `E = Σ_T |T| h(∇u|_T)`, exact for piecewise-constant gradients.
pub fn evaluate_energy(u: &PWAffineField, wells: &WellSet, density: &Density) -> Result<EnergyReport> {
    if u.mesh.dim() != wells.dim() {
        return Err(Error::Input(format!(
            "field dimension {} does not match well dimension {}",
            u.mesh.dim(),
            wells.dim()
        )));
    }
    let per_cell: Vec<CellEnergy> = u
        .gradients
        .par_iter()
        .enumerate()
        .map(|(cell, g)| {
            let (d, j) = nearest_well(g, wells.wells());
            let dist2 = d * d;
            CellEnergy {
                cell,
                dist2,
                nearest_well: j,
                density: density.value(g, dist2),
            }
        })
        .collect();
    let cells = u.mesh.cells();
    let total = per_cell.iter().map(|c| c.density * cells[c.cell].volume).sum();
    Ok(EnergyReport {
        total,
        c1: density.c1(),
        per_cell,
    })
}

/// Layer arrangement of a simple laminate.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LaminateSpec {
    /// Volume fraction of the first well of the connection.
    pub fraction: f64,
    pub period: f64,
    /// Shift of the layer pattern along the normal, measured from the domain center.
    pub offset: f64,
}

fn laminate_profile(s: f64, spec: &LaminateSpec) -> f64 {
    let cells = (s / spec.period).floor();
    let t = s - cells * spec.period;
    let first = spec.fraction * spec.period;
    cells * (spec.period - first) + (t - first).max(0.0)
}

impl LaminateSpec {
    /// Whether the normal coordinate `s` lies in a layer of the first well.
    pub fn in_first_phase(&self, s: f64) -> bool {
        let t = (s / self.period).rem_euclid(1.0);
        t < self.fraction
    }

    /// Distance in `s` to the nearest layer interface.
    pub fn interface_distance(&self, s: f64) -> f64 {
        let t = s.rem_euclid(self.period);
        let first = self.fraction * self.period;
        [t, (t - first).abs(), self.period - t]
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Normal coordinate used by the laminate at point `x`.
    pub fn coordinate(&self, mesh: &SimplicialMesh, normal: &Vector, x: &[f64]) -> f64 {
        let c = mesh.domain().center();
        (0..x.len()).map(|d| (x[d] - c[d]) * normal[d]).sum::<f64>() + self.offset
    }
}

/// Continuous piecewise-affine interpolant of the laminate alternating between
/// `U_i` and `Q U_j` across planes with normal `b`.
pub fn build_laminate(
    mesh: Arc<SimplicialMesh>,
    wells: &WellSet,
    connection: &RankOneConnection,
    spec: &LaminateSpec,
) -> Result<PWAffineField> {
    let n = mesh.dim();
    if wells.dim() != n || connection.a.len() != n || connection.b.len() != n {
        return Err(Error::Input("connection and mesh dimensions differ".into()));
    }
    if connection.i >= wells.len() || connection.j >= wells.len() {
        return Err(Error::Input("connection refers to unknown wells".into()));
    }
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::Input(format!("volume fraction {} outside (0, 1]", spec.fraction)));
    }
    if !(spec.period >= 2.0 / mesh.scale() as f64 - 1e-15) || !spec.period.is_finite() {
        return Err(Error::Input(format!(
            "layer period {} shorter than two cells",
            spec.period
        )));
    }
    let ui = wells.wells()[connection.i].clone();
    let a = connection.a.clone();
    let b = connection.b.clone();
    let center = mesh.domain().center();
    let spec = *spec;
    PWAffineField::from_map(mesh, move |x| {
        let s: f64 = (0..n).map(|d| (x[d] - center[d]) * b[d]).sum::<f64>() + spec.offset;
        let f = laminate_profile(s, &spec);
        let y = &ui * Vector::from_column_slice(x);
        (0..n).map(|d| y[d] - a[d] * f).collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OutlierReport {
    pub count: usize,
    pub mass: f64,
}

/// Cells with `|∇u| > threshold` and their total volume.
pub fn gradient_outlier_report(u: &PWAffineField, threshold: f64) -> OutlierReport {
    let cells = u.mesh.cells();
    let mut report = OutlierReport { count: 0, mass: 0.0 };
    for (c, g) in u.gradients.iter().enumerate() {
        if linalg::frobenius(g) > threshold {
            report.count += 1;
            report.mass += cells[c].volume;
        }
    }
    report
}

/// Outlier report at the default threshold `100 d`.
pub fn default_outlier_report(u: &PWAffineField, wells: &WellSet) -> OutlierReport {
    gradient_outlier_report(u, 100.0 * wells.separation_d())
}
