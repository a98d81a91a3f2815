//! Piecewise-constant matrix fields that need not be gradients: their curl as a
//! facet measure, rigidity ratios against a single rotation and the jump
//! (BV) structure.
//!
//! A field may carry a linear change of coordinates `y = U x`. It then lives on
//! the image domain `U Ω` while keeping the original mesh: facet normals map to
//! `U^{-T} ν / |U^{-T} ν|`, facet areas scale by `det U |U^{-T} ν|` and cell
//! volumes by `det U`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::energy::PWAffineField;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::mesh::{Facet, FacetCells, SimplicialMesh};
use crate::spin::{Label, PhaseLabeling};
use crate::wellalg::WellSet;

/// Ratios where both sides fall below this are reported as 0.
pub const ZERO_TOL: f64 = 1e-24;

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub well: usize,
    pub source: String,
}

#[derive(Clone, Debug)]
pub struct IncompatibleField {
    mesh: Arc<SimplicialMesh>,
    values: Vec<Mat>,
    transform: Option<Mat>,
    provenance: Option<Provenance>,
}

impl IncompatibleField {
    pub fn new(mesh: Arc<SimplicialMesh>, values: Vec<Mat>) -> Result<Self> {
        let n = mesh.dim();
        if values.len() != mesh.num_cells() {
            return Err(Error::Input(format!(
                "{} values for {} cells",
                values.len(),
                mesh.num_cells()
            )));
        }
        for v in &values {
            if v.nrows() != n || v.ncols() != n {
                return Err(Error::Input("field value dimension mismatch".into()));
            }
            linalg::ensure_finite(v, "field value")?;
        }
        Ok(Self {
            mesh,
            values,
            transform: None,
            provenance: None,
        })
    }

    /// `A = ∇u`.
    pub fn from_gradient(u: &PWAffineField) -> Self {
        Self {
            mesh: u.mesh().clone(),
            values: u.gradients().to_vec(),
            transform: None,
            provenance: None,
        }
    }

    /// Samples `f` at cell barycenters.
    pub fn from_fn<F>(mesh: Arc<SimplicialMesh>, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Mat + Sync,
    {
        let values = mesh.cells().par_iter().map(|c| f(&c.barycenter)).collect();
        Self::new(mesh, values)
    }

    pub fn with_transform(mut self, u: Mat) -> Result<Self> {
        let n = self.mesh.dim();
        if u.nrows() != n || u.ncols() != n || !(linalg::det(&u) > 0.0) {
            return Err(Error::Input("coordinate change must have positive determinant".into()));
        }
        self.transform = Some(u);
        Ok(self)
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn mesh(&self) -> &Arc<SimplicialMesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn transform(&self) -> Option<&Mat> {
        self.transform.as_ref()
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn map_values<F: Fn(&Mat) -> Mat>(&self, f: F) -> Self {
        Self {
            values: self.values.iter().map(f).collect(),
            ..self.clone()
        }
    }

    fn volume_scale(&self) -> f64 {
        self.transform.as_ref().map_or(1.0, linalg::det)
    }

    pub fn cell_volume(&self, cell: usize) -> f64 {
        self.mesh.cells()[cell].volume * self.volume_scale()
    }

    pub fn total_volume(&self) -> f64 {
        self.mesh.effective_volume() * self.volume_scale()
    }

    /// Normal and area of a facet in the field's coordinates.
    pub fn facet_geometry(&self, facet: &Facet) -> (Vector, f64) {
        match &self.transform {
            None => (facet.normal.clone(), facet.area),
            Some(u) => {
                let inv_t = u
                    .clone()
                    .try_inverse()
                    .expect("transform checked invertible")
                    .transpose();
                let w = inv_t * &facet.normal;
                let len = w.norm();
                (w / len, facet.area * linalg::det(u) * len)
            }
        }
    }

    fn inverse_transpose(&self) -> Option<Mat> {
        self.transform
            .as_ref()
            .map(|u| u.clone().try_inverse().expect("transform checked invertible").transpose())
    }
}

/// `A = χ_j ∇u U_j^{-1}` with the coordinate change `y = U_j x` attached.
pub fn build_reduced_field(
    u: &PWAffineField,
    labeling: &PhaseLabeling,
    well: usize,
    wells: &WellSet,
) -> Result<IncompatibleField> {
    if well >= wells.len() {
        return Err(Error::Input(format!("unknown well {well}")));
    }
    if labeling.labels().len() != u.gradients().len() {
        return Err(Error::Input("labeling does not match the field".into()));
    }
    let uj = wells.wells()[well].clone();
    let inv = uj
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Domain(format!("well {well} is singular")))?;
    let n = wells.dim();
    let values = u
        .gradients()
        .iter()
        .zip(labeling.labels())
        .map(|(g, l)| if *l == Label::Well(well) { g * &inv } else { Mat::zeros(n, n) })
        .collect();
    IncompatibleField::new(u.mesh().clone(), values)?
        .with_transform(uj)
        .map(|f| {
            f.with_provenance(Provenance {
                well,
                source: format!("m={}", u.mesh().scale()),
            })
        })
}

#[derive(Clone, Debug, Serialize)]
pub struct CurlMeasure {
    /// `(facet id, mass)` for every interior facet.
    pub per_facet: Vec<(usize, f64)>,
    pub total: f64,
}

fn tangential_norm(jump: &Mat, normal: &Vector) -> f64 {
    let n = normal.len();
    let proj = Mat::identity(n, n) - linalg::outer(normal, normal);
    (jump * proj).norm()
}

fn facet_jumps<F>(a: &IncompatibleField, mass: F) -> Vec<(usize, f64)>
where
    F: Fn(&Mat, &Vector) -> f64 + Sync,
{
    let inv_t = a.inverse_transpose();
    let det = a.volume_scale();
    a.mesh
        .facets()
        .par_iter()
        .enumerate()
        .filter_map(|(id, f)| {
            let FacetCells::Interior(lo, hi) = f.cells else { return None };
            let (normal, area) = match &inv_t {
                None => (f.normal.clone(), f.area),
                Some(m) => {
                    let w = m * &f.normal;
                    let len = w.norm();
                    (w / len, f.area * det * len)
                }
            };
            let jump = &a.values[hi] - &a.values[lo];
            Some((id, area * mass(&jump, &normal)))
        })
        .collect()
}

/// `|Curl A|` for piecewise-constant data: tangential jumps integrated over
/// interior facets.
pub fn curl_total_variation(a: &IncompatibleField) -> CurlMeasure {
    let per_facet = facet_jumps(a, tangential_norm);
    let total = per_facet.iter().map(|(_, m)| m).sum();
    CurlMeasure { per_facet, total }
}

/// Discrete `|DA|`: full jumps integrated over interior facets.
pub fn jump_total_variation(a: &IncompatibleField) -> f64 {
    facet_jumps(a, |j, _| j.norm()).iter().map(|(_, m)| m).sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct BoxCurlRatio {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub curl: f64,
    pub perimeter: f64,
}

/// Curl mass against interface area of a cell set, both in the field's
/// coordinates, restricted to dyadic sub-boxes of the domain down to `depth`.
/// Facets are assigned to boxes by midpoint.
pub fn curl_against_perimeter_on_boxes(
    a: &IncompatibleField,
    inside: &[bool],
    depth: usize,
) -> Result<Vec<BoxCurlRatio>> {
    if inside.len() != a.mesh.num_cells() {
        return Err(Error::Input("cell selection does not match the mesh".into()));
    }
    let curl = curl_total_variation(a);
    let facets = a.mesh.facets();
    let n = a.mesh.dim();
    let dom = a.mesh.domain();
    let mut curl_by_facet = vec![0.0; facets.len()];
    for (id, m) in &curl.per_facet {
        curl_by_facet[*id] = *m;
    }
    let perim_by_facet: Vec<f64> = facets
        .iter()
        .map(|f| match f.cells {
            FacetCells::Interior(p, q) if inside[p] != inside[q] => a.facet_geometry(f).1,
            _ => 0.0,
        })
        .collect();
    let mut out = Vec::new();
    for level in 0..=depth {
        let k = 1usize << level;
        let total_boxes = k.pow(n as u32);
        for idx in 0..total_boxes {
            let mut lo = vec![0.0; n];
            let mut hi = vec![0.0; n];
            let mut rem = idx;
            for d in 0..n {
                let i = rem % k;
                rem /= k;
                let w = (dom.hi[d] - dom.lo[d]) / k as f64;
                lo[d] = dom.lo[d] + w * i as f64;
                hi[d] = if i + 1 == k { dom.hi[d] } else { lo[d] + w };
            }
            let mut c = 0.0;
            let mut p = 0.0;
            for (id, f) in facets.iter().enumerate() {
                let mid = &f.midpoint;
                let inside_box = (0..n).all(|d| {
                    mid[d] >= lo[d] && (mid[d] < hi[d] || (hi[d] == dom.hi[d] && mid[d] <= hi[d]))
                });
                if inside_box {
                    c += curl_by_facet[id];
                    p += perim_by_facet[id];
                }
            }
            out.push(BoxCurlRatio {
                lo,
                hi,
                curl: c,
                perimeter: p,
            });
        }
    }
    Ok(out)
}

/// Bound on `|Curl A| / |Dχ_j|` for a reduced field of a deformation with
/// `|∇u| <= gradient_bound`, perimeter measured in original coordinates.
pub fn curl_bound_constant(gradient_bound: f64, well: &Mat) -> f64 {
    let inv = well.clone().try_inverse().expect("wells are invertible");
    gradient_bound * linalg::op_norm(&inv) * linalg::det(well) * linalg::op_norm(&inv)
}

#[derive(Clone, Debug, Serialize)]
pub struct RigidityReport {
    pub rotation: Vec<f64>,
    pub p: f64,
    pub lhs: f64,
    pub dist_term: f64,
    pub curl: f64,
    pub rhs: f64,
    pub ratio: f64,
}

fn ratio_of(lhs: f64, rhs: f64) -> f64 {
    if rhs <= ZERO_TOL {
        if lhs <= ZERO_TOL {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        lhs / rhs
    }
}

/// Volume-weighted mean of the field projected to `SO(n)`.
pub fn fitted_rotation(a: &IncompatibleField) -> Mat {
    let n = a.mesh.dim();
    let mut mean = Mat::zeros(n, n);
    for (c, v) in a.values.iter().enumerate() {
        mean += v * a.cell_volume(c);
    }
    linalg::nearest_rotation(&(mean / a.total_volume()))
}

/// `‖A - R‖_p^p` against `‖dist(A, SO(n))‖_p^p + |Curl A|^{n/(n-1)}`, for `p > n/(n-1)`.
pub fn rigidity_ratio(a: &IncompatibleField, p: f64) -> Result<RigidityReport> {
    rigidity_ratio_with(a, p, false)
}

/// As [`rigidity_ratio`]; `allow_endpoint` also accepts `p = n/(n-1)`.
pub fn rigidity_ratio_with(a: &IncompatibleField, p: f64, allow_endpoint: bool) -> Result<RigidityReport> {
    let n = a.mesh.dim() as f64;
    let critical = n / (n - 1.0);
    let ok = if allow_endpoint { p >= critical } else { p > critical };
    if !ok || !p.is_finite() {
        return Err(Error::Input(format!("exponent p = {p} out of range (critical value {critical})")));
    }
    let r = fitted_rotation(a);
    let (lhs, dist_term) = a
        .values
        .par_iter()
        .enumerate()
        .map(|(c, v)| {
            let vol = a.cell_volume(c);
            (vol * (v - &r).norm().powf(p), vol * linalg::dist_to_son(v).powf(p))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    let curl = curl_total_variation(a).total;
    let rhs = dist_term + curl.powf(critical);
    Ok(RigidityReport {
        rotation: linalg::to_row_major(&r),
        p,
        lhs,
        dist_term,
        curl,
        rhs,
        ratio: ratio_of(lhs, rhs),
    })
}

/// `sup_t t |{g > t}|^{(n-1)/n}` evaluated exactly for cellwise-constant `g`.
pub fn weak_norm_exact(values: &[f64], volumes: &[f64], n: usize) -> f64 {
    let q = (n as f64 - 1.0) / n as f64;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut mass = 0.0;
    let mut best: f64 = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = values[order[i]];
        while i < order.len() && values[order[i]] == v {
            mass += volumes[order[i]];
            i += 1;
        }
        best = best.max(v * f64::powf(mass, q));
    }
    best
}

/// Weak-norm surrogate on `levels` logarithmic thresholds in `[1e-6, max g]`.
pub fn weak_norm_grid(values: &[f64], volumes: &[f64], n: usize, levels: usize) -> f64 {
    let q = (n as f64 - 1.0) / n as f64;
    let max = values.iter().copied().fold(0.0, f64::max);
    let lo: f64 = 1e-6;
    if max <= lo || levels < 2 {
        return 0.0;
    }
    let ratio = (max / lo).ln() / (levels - 1) as f64;
    (0..levels)
        .map(|k| {
            // the top level sits just below the maximum so the set is nonempty
            let t = if k + 1 == levels {
                max * (1.0 - 1e-12)
            } else {
                lo * (ratio * k as f64).exp()
            };
            let m: f64 = values
                .iter()
                .zip(volumes)
                .filter(|(v, _)| **v > t)
                .map(|(_, w)| w)
                .sum();
            t * m.powf(q)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct WeakRigidityReport {
    pub deviation_weak: f64,
    pub deviation_weak_fine: f64,
    pub deviation_weak_exact: f64,
    pub dist_weak: f64,
    pub curl: f64,
    pub ratio: f64,
    /// Relative change of the surrogate from 64 to 256 levels.
    pub refinement_change: f64,
}

/// Weak-`L^{n/(n-1)}` deviation from the fitted rotation against the weak
/// distance to `SO(n)` plus the curl mass.
pub fn weak_rigidity(a: &IncompatibleField) -> WeakRigidityReport {
    let n = a.mesh.dim();
    let r = fitted_rotation(a);
    let vols: Vec<f64> = (0..a.values.len()).map(|c| a.cell_volume(c)).collect();
    let dev: Vec<f64> = a.values.iter().map(|v| (v - &r).norm()).collect();
    let dist: Vec<f64> = a.values.iter().map(linalg::dist_to_son).collect();
    let coarse = weak_norm_grid(&dev, &vols, n, 64);
    let fine = weak_norm_grid(&dev, &vols, n, 256);
    let dist_weak = weak_norm_grid(&dist, &vols, n, 64);
    let curl = curl_total_variation(a).total;
    WeakRigidityReport {
        deviation_weak: coarse,
        deviation_weak_fine: fine,
        deviation_weak_exact: weak_norm_exact(&dev, &vols, n),
        dist_weak,
        curl,
        ratio: ratio_of(coarse, dist_weak + curl),
        refinement_change: if fine > 0.0 { (fine - coarse).abs() / fine } else { 0.0 },
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BvReport {
    pub dv_total: f64,
    pub curl_total: f64,
    pub ratio: f64,
}

/// `|DA|` against `|Curl A|` for a piecewise-constant field.
pub fn bv_structure_check(a: &IncompatibleField) -> BvReport {
    let dv_total = jump_total_variation(a);
    let curl_total = curl_total_variation(a).total;
    BvReport {
        dv_total,
        curl_total,
        ratio: ratio_of(dv_total, curl_total),
    }
}
