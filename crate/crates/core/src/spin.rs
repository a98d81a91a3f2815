//! Cell classification by nearest well, the adjacency check behind it, discrete
//! perimeters and extraction of the limiting partition with fitted rotations.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::energy::PWAffineField;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::mesh::{FacetCells, SimplicialMesh};
use crate::wellalg::{nearest_well, WellSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Well(usize),
    Bad,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Well(j) => write!(f, "{j}"),
            Label::Bad => f.write_str("BAD"),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Well(j) => s.serialize_u64(*j as u64),
            Label::Bad => s.serialize_str("BAD"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhaseLabeling {
    mesh: Arc<SimplicialMesh>,
    labels: Vec<Label>,
    threshold: f64,
    distances: Vec<f64>,
    wells: usize,
}

impl PhaseLabeling {
    pub fn mesh(&self) -> &Arc<SimplicialMesh> {
        &self.mesh
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, cell: usize) -> Label {
        self.labels[cell]
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Distance of each cell gradient to the nearest well.
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn num_wells(&self) -> usize {
        self.wells
    }

    pub fn volume_of(&self, label: Label) -> f64 {
        let cells = self.mesh.cells();
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == label)
            .map(|(c, _)| cells[c].volume)
            .sum()
    }

    pub fn bad_volume(&self) -> f64 {
        self.volume_of(Label::Bad)
    }

    /// CSV with columns `cell_id,label,distance`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell_id", "label", "distance"])?;
        for (c, (l, d)) in self.labels.iter().zip(&self.distances).enumerate() {
            out.write_record([c.to_string(), l.to_string(), d.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Labels each cell with its nearest well if within `c0/100` (inclusive), else BAD.
pub fn classify(u: &PWAffineField, wells: &WellSet) -> Result<PhaseLabeling> {
    let c0 = wells
        .c0()
        .ok_or_else(|| Error::Config("c0 is not computed for this well set".into()))?;
    classify_with_threshold(u, wells, c0 / 100.0)
}

pub fn classify_with_threshold(u: &PWAffineField, wells: &WellSet, threshold: f64) -> Result<PhaseLabeling> {
    if u.mesh().dim() != wells.dim() {
        return Err(Error::Input("field and well set dimensions differ".into()));
    }
    if !(threshold >= 0.0) {
        return Err(Error::Input(format!("threshold {threshold} must be nonnegative")));
    }
    let (labels, distances): (Vec<Label>, Vec<f64>) = u
        .gradients()
        .par_iter()
        .map(|g| {
            let (d, j) = nearest_well(g, wells.wells());
            (if d <= threshold { Label::Well(j) } else { Label::Bad }, d)
        })
        .unzip();
    Ok(PhaseLabeling {
        mesh: u.mesh().clone(),
        labels,
        threshold,
        distances,
        wells: wells.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SpinViolation {
    pub close_cell: usize,
    pub far_cell: usize,
    pub well: usize,
    pub far_label: Label,
    pub far_distance: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SpinCheck {
    /// Ordered adjacent pairs meeting both hypotheses.
    pub pairs_checked: usize,
    pub violations: Vec<SpinViolation>,
}

/// For every ordered adjacent pair `(A, B)` with `A` within the threshold of
/// `SO(n) U_i` and `B` farther than the threshold from that well, checks that
/// `B` is BAD.
pub fn verify_spin_lemma(u: &PWAffineField, labeling: &PhaseLabeling, wells: &WellSet) -> SpinCheck {
    let thr = labeling.threshold;
    let mut check = SpinCheck::default();
    for f in u.mesh().facets() {
        let FacetCells::Interior(a, b) = f.cells else { continue };
        for (p, q) in [(a, b), (b, a)] {
            let Label::Well(i) = labeling.labels[p] else { continue };
            let (_, far) = linalg::procrustes(u.gradient(q), &wells.wells()[i]);
            if far <= thr {
                continue;
            }
            check.pairs_checked += 1;
            if labeling.labels[q] != Label::Bad {
                check.violations.push(SpinViolation {
                    close_cell: p,
                    far_cell: q,
                    well: i,
                    far_label: labeling.labels[q],
                    far_distance: labeling.distances[q],
                });
            }
        }
    }
    check
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Perimeter {
    pub interface: f64,
    pub boundary: f64,
    pub total: f64,
}

fn perimeter_of(mesh: &SimplicialMesh, inside: impl Fn(usize) -> bool) -> Perimeter {
    let mut p = Perimeter::default();
    for f in mesh.facets() {
        match f.cells {
            FacetCells::Interior(a, b) => {
                if inside(a) != inside(b) {
                    p.interface += f.area;
                }
            }
            FacetCells::Boundary(a) => {
                if inside(a) {
                    p.boundary += f.area;
                }
            }
        }
    }
    p.total = p.interface + p.boundary;
    p
}

/// Facet area separating `label` cells from differently labelled cells, plus
/// domain-boundary facets of `label` cells.
pub fn discrete_perimeter(labeling: &PhaseLabeling, label: Label) -> Result<Perimeter> {
    if let Label::Well(j) = label {
        if j >= labeling.wells {
            return Err(Error::Input(format!("unknown well label {j}")));
        }
    }
    Ok(perimeter_of(&labeling.mesh, |c| labeling.labels[c] == label))
}

pub fn count_bad_cells(labeling: &PhaseLabeling) -> usize {
    labeling.labels.iter().filter(|l| **l == Label::Bad).count()
}

/// `count (c0/100)² c1 min|T| <= energy`, the counting bound for cells beyond the threshold.
pub fn counting_bound_holds(bad: usize, threshold: f64, c1: f64, min_volume: f64, energy: f64) -> bool {
    bad as f64 * threshold * threshold * c1 * min_volume <= energy
}

/// Largest energy-consistent number of BAD cells: `E / ((c0/100)² c1 min|T|)`.
pub fn counting_bound(threshold: f64, c1: f64, min_volume: f64, energy: f64) -> f64 {
    energy / (threshold * threshold * c1 * min_volume)
}

fn serialize_opt_mat<S: Serializer>(m: &Option<Mat>, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.as_ref().map(linalg::to_row_major).serialize(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct PartitionComponent {
    pub well: usize,
    pub cells: Vec<usize>,
    #[serde(serialize_with = "serialize_opt_mat")]
    pub rotation: Option<Mat>,
    pub degenerate: bool,
    /// `L²` norm of `∇u - R U_j` over the component.
    pub residual: f64,
    pub volume: f64,
    pub centroid: Vec<f64>,
    pub perimeter: Perimeter,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaccioppoliPartition {
    pub components: Vec<PartitionComponent>,
    pub total_perimeter: f64,
    pub interface_perimeter: f64,
    pub bad_volume: f64,
}

impl CaccioppoliPartition {
    pub fn components_of(&self, well: usize) -> impl Iterator<Item = &PartitionComponent> {
        self.components.iter().filter(move |c| c.well == well)
    }
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Facet-connected components of each well-label set, each with a rotation
/// fitted by polar projection of the volume-weighted mean of `∇u U_j^{-1}`.
pub fn extract_partition(u: &PWAffineField, labeling: &PhaseLabeling, wells: &WellSet) -> Result<CaccioppoliPartition> {
    let mesh = u.mesh();
    if !Arc::ptr_eq(mesh, &labeling.mesh) && mesh.num_cells() != labeling.labels.len() {
        return Err(Error::Input("labeling belongs to a different mesh".into()));
    }
    let n = mesh.dim();
    let mut uf = UnionFind::new(mesh.num_cells());
    for f in mesh.facets() {
        if let FacetCells::Interior(a, b) = f.cells {
            if labeling.labels[a] == labeling.labels[b] && labeling.labels[a] != Label::Bad {
                uf.union(a, b);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for c in 0..mesh.num_cells() {
        if labeling.labels[c] != Label::Bad {
            groups.entry(uf.find(c)).or_default().push(c);
        }
    }
    let inverses: Vec<Mat> = wells
        .wells()
        .iter()
        .map(|w| w.clone().try_inverse().expect("wells are positive definite"))
        .collect();
    let cells = mesh.cells();
    let mut component_of = vec![usize::MAX; mesh.num_cells()];
    let mut components = Vec::with_capacity(groups.len());
    for (k, members) in groups.into_values().enumerate() {
        let Label::Well(j) = labeling.labels[members[0]] else { unreachable!() };
        let mut mean = Mat::zeros(n, n);
        let mut volume = 0.0;
        let mut centroid = vec![0.0; n];
        for &c in &members {
            component_of[c] = k;
            let v = cells[c].volume;
            mean += u.gradient(c) * &inverses[j] * v;
            volume += v;
            for d in 0..n {
                centroid[d] += cells[c].barycenter[d] * v;
            }
        }
        mean /= volume;
        for x in &mut centroid {
            *x /= volume;
        }
        let degenerate = linalg::det(&mean) <= 0.0;
        let (rotation, residual) = if degenerate {
            (None, f64::NAN)
        } else {
            let r = linalg::nearest_rotation(&mean);
            let target = &r * &wells.wells()[j];
            let sq: f64 = members
                .iter()
                .map(|&c| (u.gradient(c) - &target).norm_squared() * cells[c].volume)
                .sum();
            (Some(r), sq.sqrt())
        };
        components.push(PartitionComponent {
            well: j,
            cells: members,
            rotation,
            degenerate,
            residual,
            volume,
            centroid,
            perimeter: Perimeter::default(),
        });
    }
    for (k, comp) in components.iter_mut().enumerate() {
        comp.perimeter = perimeter_of(mesh, |c| component_of[c] == k);
    }
    Ok(CaccioppoliPartition {
        total_perimeter: components.iter().map(|c| c.perimeter.total).sum(),
        interface_perimeter: components.iter().map(|c| c.perimeter.interface).sum(),
        bad_volume: labeling.bad_volume(),
        components,
    })
}
