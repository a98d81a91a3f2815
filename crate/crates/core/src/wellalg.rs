//! Energy wells `SO(n)U_j`: distances, rank-one connections and the
//! separation constants `d`, `dbar` and `c0 = min(d, dbar)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const ROTATION_TOL: f64 = 1e-10;
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Angular grid used to bracket roots of `det(U_i - Q(θ) U_j)`.
pub const RANK_ONE_GRID: usize = 4096;
/// Nearest-well ties closer than this resolve to the lower index.
pub const TIE_TOL: f64 = 1e-12;

/// `U_i - Q U_j = a ⊗ b` with `|b| = 1`.
#[derive(Clone, Debug)]
pub struct RankOneConnection {
    pub i: usize,
    pub j: usize,
    pub theta: f64,
    pub rotation: Mat,
    pub a: Vector,
    pub b: Vector,
    /// Root of `det(U_i - Q(θ)U_j)` was a tangency rather than a sign change.
    pub double_root: bool,
}

impl RankOneConnection {
    pub fn residual(&self, ui: &Mat, uj: &Mat) -> f64 {
        (ui - &self.rotation * uj - linalg::outer(&self.a, &self.b)).norm()
    }
}

/// Result of the rank-one search for one ordered pair of wells.
#[derive(Clone, Debug, Default)]
pub struct RankOneSolve {
    pub connections: Vec<RankOneConnection>,
    /// Rotations with `U_i - Q U_j = 0` (the two matrices share a well).
    pub trivial: Vec<Mat>,
}

fn det_gap(ui: &Mat, uj: &Mat, theta: f64) -> f64 {
    linalg::det(&(ui - linalg::rotation2(theta) * uj))
}

fn bisect_root(ui: &Mat, uj: &Mat, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = det_gap(ui, uj, lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = det_gap(ui, uj, mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn canonical_sign(a: &mut Vector, b: &mut Vector) {
    if let Some(first) = b.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            *a = -a.clone();
            *b = -b.clone();
        }
    }
}

fn angle_dist(a: f64, b: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let d = (a - b).rem_euclid(tau);
    d.min(tau - d)
}

/// All rotations `Q(θ)` for which `U_i - Q(θ)U_j` has rank at most one (n = 2).
pub fn solve_rank_one_pair(ui: &Mat, uj: &Mat, i: usize, j: usize) -> Result<RankOneSolve> {
    if ui.nrows() != 2 || uj.nrows() != 2 {
        return Err(Error::Unsupported(
            "rank-one connections are solved for n = 2 only".into(),
        ));
    }
    linalg::ensure_finite(ui, "U_i")?;
    linalg::ensure_finite(uj, "U_j")?;
    let n = RANK_ONE_GRID;
    let step = std::f64::consts::TAU / n as f64;
    let thetas: Vec<f64> = (0..n).map(|k| k as f64 * step).collect();
    let vals: Vec<f64> = thetas.iter().map(|&t| det_gap(ui, uj, t)).collect();
    let scale = ui.norm() * uj.norm();

    let mut roots: Vec<(f64, bool)> = Vec::new();
    for k in 0..n {
        let (f0, f1) = (vals[k], vals[(k + 1) % n]);
        let (t0, t1) = (thetas[k], thetas[k] + step);
        if f0 == 0.0 {
            let prev = vals[(k + n - 1) % n];
            let simple = prev * f1 < 0.0;
            roots.push((t0, !simple));
        } else if f0 * f1 < 0.0 {
            roots.push((bisect_root(ui, uj, t0, t1), false));
        }
    }
    // Tangential roots: local minima of |f| that never change sign.
    for k in 0..n {
        let prev = vals[(k + n - 1) % n];
        let cur = vals[k];
        let next = vals[(k + 1) % n];
        let same_sign = prev * cur > 0.0 && cur * next > 0.0;
        if same_sign && cur.abs() <= prev.abs() && cur.abs() <= next.abs() {
            let (t, ft) = linalg::golden_min(
                |t| det_gap(ui, uj, t).abs(),
                thetas[k] - step,
                thetas[k] + step,
                1e-13,
            );
            if ft <= 1e-10 * scale {
                roots.push((t.rem_euclid(std::f64::consts::TAU), true));
            }
        }
    }

    let mut unique: Vec<(f64, bool)> = Vec::new();
    for (t, double) in roots {
        if unique.iter().all(|(u, _)| angle_dist(*u, t) > 1e-7) {
            unique.push((t, double));
        }
    }
    unique.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut out = RankOneSolve::default();
    for (theta, double_root) in unique {
        let q = linalg::rotation2(theta);
        let diff = ui - &q * uj;
        if diff.norm() <= RESIDUAL_TOL * ui.norm() {
            out.trivial.push(q);
            continue;
        }
        let svd = diff.clone().svd(true, true);
        let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let sig = &svd.singular_values;
        let top = if sig[0] >= sig[1] { 0 } else { 1 };
        let mut b: Vector = v_t.row(top).transpose();
        let mut a: Vector = u.column(top) * sig[top];
        canonical_sign(&mut a, &mut b);
        out.connections.push(RankOneConnection {
            i,
            j,
            theta,
            rotation: q,
            a,
            b,
            double_root,
        });
    }
    Ok(out)
}

/// `min_j min_R |f - R U_j|` and the minimising well (lowest index on ties).
pub fn dist_to_wellset(f: &Mat, wells: &WellSet) -> Result<(f64, usize)> {
    linalg::ensure_finite(f, "F")?;
    if f.nrows() != wells.dim() || f.ncols() != wells.dim() {
        return Err(Error::Input(format!(
            "matrix is {}x{}, wells are {}x{}",
            f.nrows(),
            f.ncols(),
            wells.dim(),
            wells.dim()
        )));
    }
    Ok(nearest_well(f, wells.wells()))
}

pub(crate) fn nearest_well(f: &Mat, wells: &[Mat]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (j, u) in wells.iter().enumerate() {
        let (_, dist) = linalg::procrustes(f, u);
        if dist < best.0 - TIE_TOL {
            best = (dist, j);
        }
    }
    best
}

/// `min_Q |U_i - Q U_j|` for two arbitrary matrices.
pub fn well_pair_distance(ui: &Mat, uj: &Mat) -> f64 {
    linalg::procrustes(ui, uj).1
}

#[derive(Clone, Copy, Debug)]
pub struct DbarOptions {
    /// Angles in the rotation grid over SO(2).
    pub q_grid: usize,
    /// Samples over the admissible normals (spread over the admissible arcs).
    pub b_grid: usize,
    pub refine_rounds: usize,
}

impl Default for DbarOptions {
    fn default() -> Self {
        Self {
            q_grid: 8192,
            b_grid: 2048,
            refine_rounds: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DbarReport {
    pub value: f64,
    pub delta0: f64,
    pub pair: Option<(usize, usize)>,
    pub theta: f64,
    pub beta: f64,
}

/// Closed arcs of normal angles (mod π) with `|b·b_t| <= 1 - δ0` for every twin normal.
pub fn admissible_arcs(twin_angles: &[f64], delta0: f64) -> Vec<(f64, f64)> {
    let pi = std::f64::consts::PI;
    if twin_angles.is_empty() {
        return vec![(0.0, pi)];
    }
    let half = (1.0 - delta0).acos();
    let mut t: Vec<f64> = twin_angles.iter().map(|a| a.rem_euclid(pi)).collect();
    t.sort_by(f64::total_cmp);
    let mut arcs = Vec::new();
    for k in 0..t.len() {
        let start = t[k] + half;
        let next = if k + 1 < t.len() { t[k + 1] } else { t[0] + pi };
        let end = next - half;
        if end >= start {
            arcs.push((start, end));
        }
    }
    arcs
}

fn tangent_images(ui: &Mat, uj: &Mat, beta: f64) -> ([f64; 2], [f64; 2]) {
    let (s, c) = beta.sin_cos();
    let tau = [-s, c];
    let v = [
        ui[(0, 0)] * tau[0] + ui[(0, 1)] * tau[1],
        ui[(1, 0)] * tau[0] + ui[(1, 1)] * tau[1],
    ];
    let w = [
        uj[(0, 0)] * tau[0] + uj[(0, 1)] * tau[1],
        uj[(1, 0)] * tau[0] + uj[(1, 1)] * tau[1],
    ];
    (v, w)
}

fn tangential_gap(v: [f64; 2], w: [f64; 2], cos: f64, sin: f64) -> f64 {
    let rw = [cos * w[0] - sin * w[1], sin * w[0] + cos * w[1]];
    ((v[0] - rw[0]).powi(2) + (v[1] - rw[1]).powi(2)).sqrt()
}

fn dbar_pair(ui: &Mat, uj: &Mat, arcs: &[(f64, f64)], opts: &DbarOptions) -> (f64, f64, f64) {
    let pi = std::f64::consts::PI;
    let total: f64 = arcs.iter().map(|(a, b)| b - a).sum();
    let mut betas: Vec<(f64, usize)> = Vec::new();
    for (idx, &(a, b)) in arcs.iter().enumerate() {
        let count = ((opts.b_grid as f64 * (b - a) / total.max(1e-300)).round() as usize).max(2);
        for k in 0..count {
            betas.push((a + (b - a) * k as f64 / (count - 1) as f64, idx));
        }
    }
    let q_step = std::f64::consts::TAU / opts.q_grid as f64;
    let trig: Vec<(f64, f64)> = (0..opts.q_grid)
        .map(|k| {
            let (s, c) = (k as f64 * q_step).sin_cos();
            (c, s)
        })
        .collect();

    let best = betas
        .par_iter()
        .enumerate()
        .map(|(bi, &(beta, _))| {
            let (v, w) = tangent_images(ui, uj, beta);
            let mut local = (f64::INFINITY, 0usize);
            for (qi, &(c, s)) in trig.iter().enumerate() {
                let g = tangential_gap(v, w, c, s);
                if g < local.0 {
                    local = (g, qi);
                }
            }
            (local.0, local.1, bi)
        })
        .reduce(
            || (f64::INFINITY, usize::MAX, usize::MAX),
            |x, y| {
                if y.0 < x.0 || (y.0 == x.0 && (y.2, y.1) < (x.2, x.1)) {
                    y
                } else {
                    x
                }
            },
        );

    let (mut value, qi, bi) = best;
    let mut theta = qi as f64 * q_step;
    let (mut beta, arc_idx) = betas[bi];
    let (arc_lo, arc_hi) = arcs[arc_idx];
    let b_step = ((arc_hi - arc_lo) / (opts.b_grid.max(2) as f64)).max(1e-9);
    let eval = |t: f64, b: f64| {
        let (v, w) = tangent_images(ui, uj, b);
        let (s, c) = t.sin_cos();
        tangential_gap(v, w, c, s)
    };
    let mut t_half = q_step;
    let mut b_half = b_step.min(pi);
    for _ in 0..opts.refine_rounds {
        let (t, ft) = linalg::golden_min(|t| eval(t, beta), theta - t_half, theta + t_half, 1e-14);
        if ft < value {
            value = ft;
            theta = t;
        }
        let lo = (beta - b_half).max(arc_lo);
        let hi = (beta + b_half).min(arc_hi);
        if hi > lo {
            let (b, fb) = linalg::golden_min(|b| eval(theta, b), lo, hi, 1e-14);
            if fb < value {
                value = fb;
                beta = b;
            }
        }
        t_half *= 0.5;
        b_half *= 0.5;
    }
    (value, theta.rem_euclid(std::f64::consts::TAU), beta)
}

#[derive(Clone, Debug)]
pub struct WellSet {
    dim: usize,
    wells: Vec<Mat>,
    separation_d: f64,
    incompat_dbar: Option<f64>,
    delta0: Option<f64>,
    connections: Option<Vec<RankOneConnection>>,
}

impl WellSet {
    /// Validates symmetry, positive definiteness and pairwise separation.
    pub fn new(wells: Vec<Mat>) -> Result<Self> {
        let Some(first) = wells.first() else {
            return Err(Error::Input("well set is empty".into()));
        };
        let dim = first.nrows();
        if dim < 2 {
            return Err(Error::Input("wells need dimension n >= 2".into()));
        }
        for (j, u) in wells.iter().enumerate() {
            if u.nrows() != dim || u.ncols() != dim {
                return Err(Error::Input(format!("well {j} is not {dim}x{dim}")));
            }
            linalg::ensure_finite(u, "well")?;
            if !linalg::is_symmetric(u, SYMMETRY_TOL) {
                return Err(Error::Input(format!("well {j} is not symmetric")));
            }
            let eig = u.clone().symmetric_eigen();
            if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
                return Err(Error::Input(format!("well {j} is not positive definite")));
            }
        }
        let mut d = f64::INFINITY;
        for i in 0..wells.len() {
            for j in i + 1..wells.len() {
                if (&wells[i] - &wells[j]).norm() == 0.0 {
                    return Err(Error::Input(format!("wells {i} and {j} coincide")));
                }
                d = d.min(well_pair_distance(&wells[i], &wells[j]));
            }
        }
        if d <= RESIDUAL_TOL {
            return Err(Error::Input(format!(
                "wells are not separated (min distance {d:e})"
            )));
        }
        Ok(Self {
            dim,
            wells,
            separation_d: d,
            incompat_dbar: None,
            delta0: None,
            connections: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn wells(&self) -> &[Mat] {
        &self.wells
    }

    pub fn len(&self) -> usize {
        self.wells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wells.is_empty()
    }

    /// `+∞` when there is a single well.
    pub fn separation_d(&self) -> f64 {
        self.separation_d
    }

    pub fn incompat_dbar(&self) -> Option<f64> {
        self.incompat_dbar
    }

    pub fn delta0(&self) -> Option<f64> {
        self.delta0
    }

    pub fn c0(&self) -> Option<f64> {
        self.incompat_dbar.map(|db| db.min(self.separation_d))
    }

    pub fn connections(&self) -> &[RankOneConnection] {
        self.connections.as_deref().unwrap_or(&[])
    }

    pub fn connections_solved(&self) -> bool {
        self.connections.is_some()
    }

    /// Unit twin normals `b_ij` of every solved connection.
    pub fn twin_normals(&self) -> Vec<Vector> {
        self.connections().iter().map(|c| c.b.clone()).collect()
    }

    pub fn well_distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check_pair(i, j)?;
        Ok(well_pair_distance(&self.wells[i], &self.wells[j]))
    }

    pub fn solve_rank_one(&self, i: usize, j: usize) -> Result<RankOneSolve> {
        self.check_pair(i, j)?;
        solve_rank_one_pair(&self.wells[i], &self.wells[j], i, j)
    }

    /// Solves every pair `i < j` and stores the connections.
    pub fn solve_connections(&mut self) -> Result<&[RankOneConnection]> {
        let mut all = Vec::new();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                all.extend(self.solve_rank_one(i, j)?.connections);
            }
        }
        self.connections = Some(all);
        Ok(self.connections())
    }

    /// Evaluates `dbar` over admissible normals and stores it. Needs solved connections.
    pub fn compute_dbar(&mut self, delta0: f64, opts: &DbarOptions) -> Result<DbarReport> {
        if !(delta0 > 0.0 && delta0 < 1.0) {
            return Err(Error::Config(format!("delta0 = {delta0} is outside (0, 1)")));
        }
        if self.connections.is_none() {
            return Err(Error::Config(
                "rank-one connections must be solved before dbar".into(),
            ));
        }
        if self.len() == 1 {
            self.incompat_dbar = Some(f64::INFINITY);
            self.delta0 = Some(delta0);
            return Ok(DbarReport {
                value: f64::INFINITY,
                delta0,
                pair: None,
                theta: 0.0,
                beta: 0.0,
            });
        }
        if self.dim != 2 {
            return Err(Error::Unsupported("dbar is evaluated for n = 2 only".into()));
        }
        let twin_angles: Vec<f64> = self
            .connections()
            .iter()
            .map(|c| c.b[1].atan2(c.b[0]))
            .collect();
        let arcs = admissible_arcs(&twin_angles, delta0);
        if arcs.is_empty() {
            return Err(Error::Config(format!(
                "no admissible normal satisfies |b·b_ij| <= 1 - {delta0}"
            )));
        }
        let mut report = DbarReport {
            value: f64::INFINITY,
            delta0,
            pair: None,
            theta: 0.0,
            beta: 0.0,
        };
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let (v, t, b) = dbar_pair(&self.wells[i], &self.wells[j], &arcs, opts);
                if v < report.value {
                    report = DbarReport {
                        value: v,
                        delta0,
                        pair: Some((i, j)),
                        theta: t,
                        beta: b,
                    };
                }
            }
        }
        self.incompat_dbar = Some(report.value);
        self.delta0 = Some(delta0);
        Ok(report)
    }

    /// Overrides `dbar` directly (for externally computed constants).
    pub fn set_dbar(&mut self, dbar: f64, delta0: Option<f64>) {
        self.incompat_dbar = Some(dbar);
        self.delta0 = delta0;
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.len() || j >= self.len() {
            return Err(Error::Input(format!("well index out of range ({i}, {j})")));
        }
        if i == j {
            return Err(Error::Domain(format!("well distance needs i != j, got {i}")));
        }
        Ok(())
    }

    pub fn from_doc(doc: &WellSetDoc) -> Result<Self> {
        let wells = doc
            .wells
            .iter()
            .map(|w| linalg::from_row_major(doc.dim, w))
            .collect::<Result<Vec<_>>>()?;
        let mut ws = Self::new(wells)?;
        ws.delta0 = doc.delta0;
        Ok(ws)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(s)?)
    }

    pub fn to_doc(&self) -> WellSetDoc {
        let finite = |x: f64| if x.is_finite() { Some(x) } else { None };
        WellSetDoc {
            dim: self.dim,
            wells: self.wells.iter().map(linalg::to_row_major).collect(),
            delta0: self.delta0,
            derived: Some(DerivedDoc {
                d: finite(self.separation_d),
                dbar: self.incompat_dbar.and_then(finite),
                c0: self.c0().and_then(finite),
                connections: self
                    .connections()
                    .iter()
                    .map(|c| ConnectionDoc {
                        i: c.i,
                        j: c.j,
                        theta: c.theta,
                        rotation: linalg::to_row_major(&c.rotation),
                        a: c.a.iter().copied().collect(),
                        b: c.b.iter().copied().collect(),
                        double_root: c.double_root,
                        residual: c.residual(&self.wells[c.i], &self.wells[c.j]),
                    })
                    .collect(),
            }),
        }
    }
}

/// JSON form: `{ "dim": n, "wells": [[row-major]], "delta0": x, "derived": {...} }`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WellSetDoc {
    pub dim: usize,
    pub wells: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<DerivedDoc>,
}

/// `null` stands for `+∞` (single-well sets).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DerivedDoc {
    pub d: Option<f64>,
    pub dbar: Option<f64>,
    pub c0: Option<f64>,
    pub connections: Vec<ConnectionDoc>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConnectionDoc {
    pub i: usize,
    pub j: usize,
    pub theta: f64,
    pub rotation: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub double_root: bool,
    pub residual: f64,
}

/// The two-variant pair `diag(2, 1/2)`, `diag(1/2, 2)` used throughout the examples.
pub fn reference_two_well() -> WellSet {
    WellSet::new(vec![
        Mat::from_diagonal(&Vector::from_vec(vec![2.0, 0.5])),
        Mat::from_diagonal(&Vector::from_vec(vec![0.5, 2.0])),
    ])
    .expect("reference wells are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    fn diag(a: f64, b: f64) -> Mat {
        Mat::from_diagonal(&Vector::from_vec(vec![a, b]))
    }

    /// Brute force `min_θ |F - Q(θ) G|` over an angle grid.
    fn grid_min(f: &Mat, g: &Mat, n: usize) -> f64 {
        let (f, g) = (
            [f[(0, 0)], f[(0, 1)], f[(1, 0)], f[(1, 1)]],
            [g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)]],
        );
        (0..n)
            .map(|k| {
                let (s, c) = (TAU * k as f64 / n as f64).sin_cos();
                let q = [
                    c * g[0] - s * g[2],
                    c * g[1] - s * g[3],
                    s * g[0] + c * g[2],
                    s * g[1] + c * g[3],
                ];
                (0..4).map(|i| (f[i] - q[i]).powi(2)).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    #[test]
    fn dist_to_son_examples() {
        let id = Mat::identity(2, 2);
        assert!(linalg::dist_to_son(&id) < 1e-14);
        let f = diag(2.0, 0.5);
        assert!((linalg::dist_to_son(&f) - grid_min(&f, &id, 1_000_000)).abs() < 1e-5);
        let neg = -Mat::identity(2, 2);
        let brute = grid_min(&neg, &id, 1_000_000);
        assert!(brute < 1e-9);
        assert!((linalg::dist_to_son(&neg) - brute).abs() < 1e-5);
    }

    #[test]
    fn dist_to_wellset_examples() {
        let ws = reference_two_well();
        let (d, j) = dist_to_wellset(&ws.wells()[0], &ws).unwrap();
        assert!(d < 1e-12 && j == 0);
        let q = linalg::rotation2(1.234);
        let (d, j) = dist_to_wellset(&(&q * &ws.wells()[1]), &ws).unwrap();
        assert!(d < 1e-10 && j == 1);

        let mut ws2 = ws.clone();
        ws2.solve_connections().unwrap();
        let c = &ws2.connections()[0];
        let mid = (&ws.wells()[0] + &c.rotation * &ws.wells()[1]) * 0.5;
        let (d, _) = dist_to_wellset(&mid, &ws).unwrap();
        let brute = ws
            .wells()
            .iter()
            .map(|u| grid_min(&mid, u, 1_000_000))
            .fold(f64::INFINITY, f64::min);
        assert!((d - brute).abs() < 1e-5, "{d} vs {brute}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let ws = reference_two_well();
        let f = Mat::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 1.0]);
        assert!(matches!(dist_to_wellset(&f, &ws), Err(Error::Input(_))));
    }

    #[test]
    fn well_distance_examples() {
        let u1 = diag(2.0, 0.5);
        let rotated = linalg::rotation2(0.4) * &u1;
        assert!(well_pair_distance(&u1, &rotated) < 1e-12);

        let u2 = diag(0.5, 2.0);
        let brute = grid_min(&u1, &u2, 1_000_000);
        assert!((well_pair_distance(&u1, &u2) - brute).abs() < 1e-6);

        let scaled = &u1 * 1.1;
        let brute = grid_min(&u1, &scaled, 1_000_000);
        assert!((well_pair_distance(&u1, &scaled) - brute).abs() < 1e-6);

        let ws = reference_two_well();
        assert!(matches!(ws.well_distance(1, 1), Err(Error::Domain(_))));
        let a = ws.well_distance(0, 1).unwrap();
        let b = ws.well_distance(1, 0).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    /// Sign changes of `det(U_i - Q(θ)U_j)` over a fine grid.
    fn sign_changes(ui: &Mat, uj: &Mat, n: usize) -> usize {
        let vals: Vec<f64> = (0..n)
            .map(|k| det_gap(ui, uj, TAU * k as f64 / n as f64))
            .collect();
        (0..n).filter(|&k| vals[k] * vals[(k + 1) % n] < 0.0).count()
    }

    #[test]
    fn rank_one_two_variant_pair() {
        let (u1, u2) = (diag(2.0, 0.5), diag(0.5, 2.0));
        assert_eq!(sign_changes(&u1, &u2, 100_003), 2);
        let sol = solve_rank_one_pair(&u1, &u2, 0, 1).unwrap();
        assert_eq!(sol.connections.len(), 2);
        assert!(sol.trivial.is_empty());
        for c in &sol.connections {
            assert!(c.residual(&u1, &u2) <= RESIDUAL_TOL * u1.norm());
            assert!(linalg::is_rotation(&c.rotation, ROTATION_TOL));
            assert!((c.b.norm() - 1.0).abs() < 1e-12);
            assert!(c.b[0] > 0.0);
            assert!(!c.double_root);
            // cos θ = 8/17 by direct expansion of the determinant.
            assert!((c.theta.cos() - 8.0 / 17.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_orthogonal_twins() {
        let (u1, u2) = (diag(3.0, 1.0), diag(1.0, 3.0));
        assert_eq!(sign_changes(&u1, &u2, 100_003), 2);
        let sol = solve_rank_one_pair(&u1, &u2, 0, 1).unwrap();
        assert_eq!(sol.connections.len(), 2);
        let (b0, b1) = (&sol.connections[0].b, &sol.connections[1].b);
        assert!(b0.dot(b1).abs() < 1e-6);
    }

    #[test]
    fn rank_one_same_well_is_trivial() {
        let u1 = diag(2.0, 0.5);
        let s = linalg::rotation2(0.9);
        let sol = solve_rank_one_pair(&u1, &(&s * &u1), 0, 1).unwrap();
        assert!(sol.connections.is_empty());
        assert_eq!(sol.trivial.len(), 1);
        assert!((&sol.trivial[0] * &s - Mat::identity(2, 2)).amax() < 1e-7);
    }

    #[test]
    fn rank_one_unconnected_wells() {
        // det(3I - Q) = |3 - e^{iθ}|^2 > 0 for every θ.
        let sol = solve_rank_one_pair(&diag(3.0, 3.0), &diag(1.0, 1.0), 0, 1).unwrap();
        assert!(sol.connections.is_empty() && sol.trivial.is_empty());
    }

    #[test]
    fn wellset_validation() {
        assert!(WellSet::new(vec![]).is_err());
        let nonsym = Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(WellSet::new(vec![nonsym]).is_err());
        assert!(WellSet::new(vec![diag(1.0, -1.0)]).is_err());
        assert!(WellSet::new(vec![diag(1.0, 2.0), diag(1.0, 2.0)]).is_err());
    }

    /// For n = 2 the inner minimum over Q of |(U1 - QU2)τ| is ||U1τ| - |U2τ||.
    fn dbar_closed_form(u1: &Mat, u2: &Mat, twins: &[f64], delta0: f64, n: usize) -> f64 {
        let mut best = f64::INFINITY;
        for k in 0..n {
            let beta = PI * k as f64 / n as f64;
            let b = [beta.cos(), beta.sin()];
            if twins
                .iter()
                .any(|t| (b[0] * t.cos() + b[1] * t.sin()).abs() > 1.0 - delta0)
            {
                continue;
            }
            let tau = Vector::from_vec(vec![-b[1], b[0]]);
            best = best.min(((u1 * &tau).norm() - (u2 * &tau).norm()).abs());
        }
        best
    }

    #[test]
    fn dbar_single_well_is_infinite() {
        let mut ws = WellSet::new(vec![diag(2.0, 0.5)]).unwrap();
        ws.solve_connections().unwrap();
        let rep = ws.compute_dbar(0.1, &DbarOptions::default()).unwrap();
        assert!(rep.value.is_infinite());
        assert!(ws.c0().unwrap().is_infinite());
        assert_eq!(ws.c0(), Some(ws.separation_d()));
    }

    #[test]
    fn dbar_requires_connections_and_valid_delta() {
        let mut ws = reference_two_well();
        assert!(matches!(
            ws.compute_dbar(0.1, &DbarOptions::default()),
            Err(Error::Config(_))
        ));
        ws.solve_connections().unwrap();
        assert!(ws.compute_dbar(1.5, &DbarOptions::default()).is_err());
    }

    #[test]
    fn dbar_two_variant_pair() {
        let mut ws = reference_two_well();
        ws.solve_connections().unwrap();
        let twins: Vec<f64> = ws.twin_normals().iter().map(|b| b[1].atan2(b[0])).collect();
        let coarse = ws.compute_dbar(0.1, &DbarOptions::default()).unwrap().value;
        let fine = ws
            .clone()
            .compute_dbar(
                0.1,
                &DbarOptions {
                    q_grid: 32768,
                    ..DbarOptions::default()
                },
            )
            .unwrap()
            .value;
        assert!(coarse > 0.0);
        assert!((coarse - fine).abs() < 1e-3);
        let oracle = dbar_closed_form(&ws.wells()[0], &ws.wells()[1], &twins, 0.1, 2_000_000);
        assert!((coarse - oracle).abs() < 1e-4, "{coarse} vs {oracle}");
        assert!(coarse <= 2f64.sqrt() * ws.separation_d());
        assert_eq!(ws.c0().unwrap(), coarse.min(ws.separation_d()));
    }

    #[test]
    fn dbar_decreases_as_delta_shrinks() {
        let mut ws = reference_two_well();
        ws.solve_connections().unwrap();
        // twin normals are 90° apart, so δ0 = 0.3 forbids every direction
        assert!(matches!(
            ws.compute_dbar(0.3, &DbarOptions::default()),
            Err(Error::Config(_))
        ));
        let vals: Vec<f64> = [0.25, 0.1, 0.03, 0.01]
            .iter()
            .map(|&d| ws.compute_dbar(d, &DbarOptions::default()).unwrap().value)
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] < w[0], "{vals:?}");
        }
        // dbar vanishes linearly in the excluded half-angle acos(1 - δ0)
        for (&d, &v) in [0.25f64, 0.1, 0.03, 0.01].iter().zip(&vals) {
            let ratio = v / (1.0 - d).acos();
            assert!(ratio > 1.5 && ratio < 3.0, "{d}: {ratio}");
        }
    }

    #[test]
    fn admissible_set_can_be_empty() {
        // eight twin normals spread over the half circle leave nothing at δ0 = 0.5
        let twins: Vec<f64> = (0..8).map(|k| PI * k as f64 / 8.0).collect();
        assert!(admissible_arcs(&twins, 0.5).is_empty());
    }

    #[test]
    fn json_round_trip_keeps_wells() {
        let mut ws = reference_two_well();
        ws.solve_connections().unwrap();
        ws.compute_dbar(0.1, &DbarOptions::default()).unwrap();
        let text = serde_json::to_string(&ws.to_doc()).unwrap();
        let back = WellSet::from_json_str(&text).unwrap();
        assert_eq!(back.wells(), ws.wells());
        assert_eq!(back.delta0(), Some(0.1));
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["derived"]["connections"].as_array().unwrap().len(), 2);
    }
}
