//! Finite-range lattice Hamiltonians with periodic ground states, the
//! antiferromagnetic chain, window classification and sweep diagnostics.
//!
//! Deformations live on the lattice sites of `[0, shape)` at scale `m`; each
//! site carries its forward-difference gradient, stored as a Jacobian
//! (column `d` is `X_{i+e_d} - X_i`). Sites are indexed with the first
//! coordinate varying fastest.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::scaling::loglog_fit;
use crate::spin::UnionFind;

/// Angles sampled before golden-section refinement of a window rotation.
pub const ROTATION_GRID: usize = 1024;
/// Tolerance of the golden-section refinement in radians.
pub const ROTATION_TOL: f64 = 1e-6;
/// Largest residual energy accepted on a ground state at construction.
pub const GROUND_ENERGY_TOL: f64 = 1e-12;
const KAPPA_TOL: f64 = 1e-9;
const ZERO_ENERGY_TOL: f64 = 1e-12;
const MAX_WITNESSES: usize = 16;

fn sites_in(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn coords_of(shape: &[usize], mut idx: usize) -> Vec<usize> {
    let mut c = Vec::with_capacity(shape.len());
    for &s in shape {
        c.push(idx % s);
        idx /= s;
    }
    c
}

fn index_of(shape: &[usize], coords: &[usize]) -> usize {
    let mut idx = 0;
    let mut stride = 1;
    for (c, s) in coords.iter().zip(shape) {
        idx += c * stride;
        stride *= s;
    }
    idx
}

/// Site `base + offset` when it lies in `[0, shape)`.
fn shifted_index(shape: &[usize], base: &[usize], offset: &[i64]) -> Option<usize> {
    let mut idx = 0;
    let mut stride = 1;
    for d in 0..shape.len() {
        let c = base[d] as i64 + offset[d];
        if c < 0 || c >= shape[d] as i64 {
            return None;
        }
        idx += c as usize * stride;
        stride *= shape[d];
    }
    Some(idx)
}

fn box_offsets(lo: &[i64], hi: &[i64]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for d in 0..lo.len() {
        let mut next = Vec::new();
        for c in lo[d]..=hi[d] {
            for prefix in &out {
                let mut p: Vec<i64> = prefix.clone();
                p.push(c);
                next.push(p);
            }
        }
        out = next;
    }
    // first coordinate fastest
    out.sort_by(|a, b| a.iter().rev().cmp(b.iter().rev()));
    out
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A periodic ground state given by its gradient pattern on one period cell.
#[derive(Clone, Debug)]
pub struct GroundState {
    period: Vec<usize>,
    pattern: Vec<Mat>,
    mean: Mat,
}

impl GroundState {
    pub fn new(period: Vec<usize>, pattern: Vec<Mat>) -> Result<Self> {
        let n = period.len();
        if n == 0 || period.contains(&0) {
            return Err(Error::Input("period must have positive entries".into()));
        }
        if pattern.len() != sites_in(&period) {
            return Err(Error::Input(format!(
                "pattern has {} entries for a period cell of {} sites",
                pattern.len(),
                sites_in(&period)
            )));
        }
        if pattern.iter().any(|g| g.nrows() != n || g.ncols() != n) {
            return Err(Error::Input("pattern entries must be n×n".into()));
        }
        for g in &pattern {
            linalg::ensure_finite(g, "ground-state gradient")?;
        }
        let mut mean = Mat::zeros(n, n);
        for g in &pattern {
            mean += g;
        }
        mean /= pattern.len() as f64;
        Ok(Self { period, pattern, mean })
    }

    pub fn dim(&self) -> usize {
        self.period.len()
    }

    pub fn period(&self) -> &[usize] {
        &self.period
    }

    pub fn pattern(&self) -> &[Mat] {
        &self.pattern
    }

    /// Average gradient over one period cell.
    pub fn mean(&self) -> &Mat {
        &self.mean
    }

    /// Gradient of the ground state at an arbitrary lattice site.
    pub fn gradient_at(&self, site: &[i64]) -> &Mat {
        let c: Vec<usize> = site
            .iter()
            .zip(&self.period)
            .map(|(&x, &p)| x.rem_euclid(p as i64) as usize)
            .collect();
        &self.pattern[index_of(&self.period, &c)]
    }

    /// The same pattern read from `site + shift`.
    pub fn shifted(&self, shift: &[i64]) -> GroundState {
        let pattern = (0..self.pattern.len())
            .map(|k| {
                let c: Vec<i64> = coords_of(&self.period, k)
                    .iter()
                    .zip(shift)
                    .map(|(&x, &s)| x as i64 + s)
                    .collect();
                self.gradient_at(&c).clone()
            })
            .collect();
        GroundState { period: self.period.clone(), pattern, mean: self.mean.clone() }
    }

    /// `R Z + b` on `[0, shape)` at scale `m`. Values are integrated along
    /// coordinate paths; a pattern that is not a discrete gradient is rejected.
    pub fn realize(&self, m: usize, shape: &[usize], rotation: &Mat, offset: &[f64]) -> Result<LatticeDeformation> {
        let n = self.dim();
        if shape.len() != n || offset.len() != n || rotation.nrows() != n || rotation.ncols() != n {
            return Err(Error::Input("dimension mismatch in ground-state realization".into()));
        }
        if n == 1 {
            let r = rotation[(0, 0)];
            let g: Vec<f64> = (0..shape[0]).map(|i| r * self.gradient_at(&[i as i64])[(0, 0)]).collect();
            let mut x = LatticeDeformation::chain(m, &g)?;
            if offset[0] != 0.0 {
                x = x.translated(offset)?;
            }
            return Ok(x);
        }
        let vshape: Vec<usize> = shape.iter().map(|s| s + 1).collect();
        let total = sites_in(&vshape);
        let mut y = vec![vec![0.0; n]; total];
        for idx in 0..total {
            let c = coords_of(&vshape, idx);
            let mut acc = vec![0.0; n];
            let mut cur = vec![0i64; n];
            for d in 0..n {
                for _ in 0..c[d] {
                    let g = self.gradient_at(&cur);
                    for a in 0..n {
                        acc[a] += g[(a, d)];
                    }
                    cur[d] += 1;
                }
            }
            y[idx] = acc;
        }
        let values = y
            .into_iter()
            .map(|v| {
                let rv = rotation * linalg::Vector::from_vec(v);
                (0..n).map(|a| rv[a] + offset[a]).collect()
            })
            .collect();
        let x = LatticeDeformation::from_values(m, shape.to_vec(), values)?;
        let scale = self.pattern.iter().map(|g| g.amax()).fold(1.0, f64::max);
        for (i, g) in x.gradients.iter().enumerate() {
            let c: Vec<i64> = coords_of(shape, i).iter().map(|&v| v as i64).collect();
            if (g - rotation * self.gradient_at(&c)).amax() > 1e-9 * scale * (1.0 + shape.iter().sum::<usize>() as f64) {
                return Err(Error::Domain("ground-state pattern is not a discrete gradient".into()));
            }
        }
        Ok(x)
    }
}

/// Site energy `h̃` of a gradient patch over the interaction window.
#[derive(Clone)]
pub enum LatticeDensity {
    /// `g g' + 1` on a two-site chain window.
    AntiferroRaw,
    /// The raw density pulled back through `g ↦ 2g - 3`, so that gradients
    /// `{1, 3/2, 2}` play the role of `{-1, 0, 1}`.
    AntiferroRemapped,
    /// Scalar chains over a finite alphabet; entry `Σ_k a_k |A|^k` holds the
    /// energy of the patch with alphabet indices `a_k`.
    Table { alphabet: Vec<f64>, values: Vec<f64> },
    /// Squared distance of the patch to the nearest rotated ground-state patch.
    PatternDistance,
    Custom(Arc<dyn Fn(&[&Mat]) -> f64 + Send + Sync>),
}

impl fmt::Debug for LatticeDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AntiferroRaw => f.write_str("AntiferroRaw"),
            Self::AntiferroRemapped => f.write_str("AntiferroRemapped"),
            Self::Table { alphabet, values } => {
                write!(f, "Table {{ alphabet: {alphabet:?}, entries: {} }}", values.len())
            }
            Self::PatternDistance => f.write_str("PatternDistance"),
            Self::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl LatticeDensity {
    /// Tabulates `f` over every patch of `len` alphabet letters.
    pub fn tabulate(alphabet: &[f64], len: usize, f: impl Fn(&[f64]) -> f64) -> Self {
        let a = alphabet.len();
        let count = a.pow(len as u32);
        let values = (0..count)
            .map(|mut code| {
                let patch: Vec<f64> = (0..len)
                    .map(|_| {
                        let v = alphabet[code % a];
                        code /= a;
                        v
                    })
                    .collect();
                f(&patch)
            })
            .collect();
        Self::Table { alphabet: alphabet.to_vec(), values }
    }

    /// Finite set of scalar gradient values the density is defined on.
    pub fn alphabet(&self) -> Option<Vec<f64>> {
        match self {
            Self::AntiferroRaw => Some(vec![-1.0, 0.0, 1.0]),
            Self::AntiferroRemapped => Some(vec![1.0, 1.5, 2.0]),
            Self::Table { alphabet, .. } => Some(alphabet.clone()),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::AntiferroRaw => "antiferro-raw",
            Self::AntiferroRemapped => "antiferro-remapped",
            Self::Table { .. } => "table",
            Self::PatternDistance => "pattern-distance",
            Self::Custom(_) => "custom",
        }
    }
}

/// Coefficients of `|g - R(θ) p|² = a - 2(α cos θ + β sin θ)` for 2×2 blocks.
#[derive(Clone, Copy)]
struct AngleTerm {
    a: f64,
    alpha: f64,
    beta: f64,
}

impl AngleTerm {
    fn new(g: &Mat, p: &Mat) -> Self {
        let a = g.norm_squared() + p.norm_squared();
        let alpha = g[(0, 0)] * p[(0, 0)] + g[(0, 1)] * p[(0, 1)] + g[(1, 0)] * p[(1, 0)] + g[(1, 1)] * p[(1, 1)];
        let beta = -g[(0, 0)] * p[(1, 0)] - g[(0, 1)] * p[(1, 1)] + g[(1, 0)] * p[(0, 0)] + g[(1, 1)] * p[(0, 1)];
        Self { a, alpha, beta }
    }

    fn at(&self, c: f64, s: f64) -> f64 {
        (self.a - 2.0 * (self.alpha * c + self.beta * s)).max(0.0)
    }

    /// `min_θ` of this term alone.
    fn floor(&self) -> f64 {
        (self.a - 2.0 * self.alpha.hypot(self.beta)).max(0.0)
    }
}

fn sup_at(terms: &[AngleTerm], theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    terms.iter().map(|t| t.at(c, s)).fold(0.0, f64::max)
}

/// Outcome of a window rotation search over `max_k |g_k - R p_k|_F`.
#[derive(Clone, Copy, Debug)]
enum WindowFit {
    Found { theta: f64, distance: f64 },
    /// Every rotation exceeds the cutoff; `bound` is a lower bound.
    Pruned { bound: f64 },
}

impl WindowFit {
    fn distance(&self) -> f64 {
        match *self {
            WindowFit::Found { distance, .. } => distance,
            WindowFit::Pruned { bound } => bound,
        }
    }
}

/// Minimises `max_k |g_k - R p_k|_F` over `R ∈ SO(n)` for `n ≤ 2`. With a
/// cutoff, returns early once the window is certainly farther or certainly
/// within it.
fn window_fit(g: &[&Mat], p: &[&Mat], cutoff: Option<f64>) -> WindowFit {
    let n = g[0].nrows();
    if n == 1 {
        let d = g.iter().zip(p).map(|(a, b)| (a[(0, 0)] - b[(0, 0)]).abs()).fold(0.0, f64::max);
        return WindowFit::Found { theta: 0.0, distance: d };
    }
    let terms: Vec<AngleTerm> = g.iter().zip(p).map(|(a, b)| AngleTerm::new(a, b)).collect();
    let floor = terms.iter().map(AngleTerm::floor).fold(0.0, f64::max).sqrt();
    let cut2 = cutoff.map(|c| c * c);
    if let Some(c) = cutoff {
        if floor > c {
            return WindowFit::Pruned { bound: floor };
        }
    }
    let sa: f64 = terms.iter().map(|t| t.alpha).sum();
    let sb: f64 = terms.iter().map(|t| t.beta).sum();
    let procrustes = sb.atan2(sa);
    let mut best = (procrustes, sup_at(&terms, procrustes));
    if cut2.is_some_and(|c| best.1 <= c) {
        return WindowFit::Found { theta: best.0, distance: best.1.sqrt() };
    }
    let h = 2.0 * PI / ROTATION_GRID as f64;
    for k in 0..ROTATION_GRID {
        let th = k as f64 * h;
        let v = sup_at(&terms, th);
        if v < best.1 {
            best = (th, v);
        }
    }
    let (th, v) = linalg::golden_min(|t| sup_at(&terms, t), best.0 - h, best.0 + h, ROTATION_TOL);
    if v < best.1 {
        best = (th, v);
    }
    WindowFit::Found { theta: best.0, distance: best.1.sqrt() }
}

fn rotation_of(n: usize, theta: f64) -> Mat {
    if n == 1 {
        Mat::identity(1, 1)
    } else {
        linalg::rotation2(theta)
    }
}

/// A finite-range lattice Hamiltonian with its periodic ground states.
#[derive(Clone, Debug)]
pub struct LatticeSystem {
    name: String,
    dim: usize,
    window: Vec<Vec<i64>>,
    enlarged_lo: Vec<i64>,
    enlarged_hi: Vec<i64>,
    density: LatticeDensity,
    ground_states: Vec<GroundState>,
    exponent: f64,
    separation: f64,
    max_period: usize,
}

impl LatticeSystem {
    pub fn new(
        name: &str,
        dim: usize,
        window: Vec<Vec<i64>>,
        density: LatticeDensity,
        ground_states: Vec<GroundState>,
        exponent: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("lattice dimension must be at least 1".into()));
        }
        if dim > 2 {
            return Err(Error::Unsupported("lattice systems are implemented for n ≤ 2".into()));
        }
        if window.is_empty() || window.iter().any(|o| o.len() != dim) {
            return Err(Error::Input("interaction window must be a nonempty list of n-offsets".into()));
        }
        let mut sorted = window.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != window.len() {
            return Err(Error::Input("interaction window has repeated offsets".into()));
        }
        if ground_states.is_empty() {
            return Err(Error::Input("at least one ground state is required".into()));
        }
        if ground_states.iter().any(|z| z.dim() != dim) {
            return Err(Error::Input("ground-state dimension differs from the system".into()));
        }
        if !(exponent > 1.0 && exponent.is_finite()) {
            return Err(Error::Input(format!("growth exponent {exponent} must lie in (1, ∞)")));
        }
        match &density {
            LatticeDensity::AntiferroRaw | LatticeDensity::AntiferroRemapped => {
                if dim != 1 || window.len() != 2 {
                    return Err(Error::Input("antiferro densities need a two-site chain window".into()));
                }
            }
            LatticeDensity::Table { alphabet, values } => {
                if dim != 1 {
                    return Err(Error::Input("table densities are defined for chains".into()));
                }
                if alphabet.is_empty() || values.len() != alphabet.len().pow(window.len() as u32) {
                    return Err(Error::Input(format!(
                        "table needs {} entries",
                        alphabet.len().pow(window.len() as u32)
                    )));
                }
                if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(Error::Input("table entries must be finite and nonnegative".into()));
                }
            }
            _ => {}
        }
        let max_period = ground_states.iter().flat_map(|z| z.period.iter().copied()).max().unwrap_or(1);
        let mut lo = vec![0i64; dim];
        let mut hi = vec![2 * max_period as i64; dim];
        for o in &window {
            for d in 0..dim {
                lo[d] = lo[d].min(o[d]);
                hi[d] = hi[d].max(o[d]);
            }
        }
        for h in hi.iter_mut() {
            *h += 1;
        }
        let mut sys = Self {
            name: name.to_string(),
            dim,
            window,
            enlarged_lo: lo,
            enlarged_hi: hi,
            density,
            ground_states,
            exponent,
            separation: f64::INFINITY,
            max_period,
        };
        for l in 0..sys.ground_states.len() {
            let z = &sys.ground_states[l];
            for r in 0..sites_in(&z.period) {
                let base: Vec<i64> = coords_of(&z.period, r).iter().map(|&c| c as i64).collect();
                let patch: Vec<&Mat> = sys
                    .window
                    .iter()
                    .map(|o| {
                        let s: Vec<i64> = base.iter().zip(o).map(|(b, o)| b + o).collect();
                        z.gradient_at(&s)
                    })
                    .collect();
                let e = sys.local_energy(&patch)?;
                if e > GROUND_ENERGY_TOL {
                    return Err(Error::Domain(format!(
                        "density does not vanish on ground state {l} (energy {e} at phase {r})"
                    )));
                }
            }
        }
        sys.separation = sys.compute_separation();
        if !(sys.separation > 0.0) {
            return Err(Error::Domain("two ground states coincide up to rotation".into()));
        }
        Ok(sys)
    }

    /// For each pair of ground states, the minimum over one common rotation of
    /// the largest pattern mismatch over a common period; then the minimum
    /// over pairs.
    fn compute_separation(&self) -> f64 {
        let k = self.ground_states.len();
        let common = self.common_period();
        let mut d = f64::INFINITY;
        for a in 0..k {
            for b in (a + 1)..k {
                let (za, zb) = (&self.ground_states[a], &self.ground_states[b]);
                let mut g = Vec::new();
                let mut p = Vec::new();
                for idx in 0..sites_in(&common) {
                    let c: Vec<i64> = coords_of(&common, idx).iter().map(|&v| v as i64).collect();
                    g.push(za.gradient_at(&c));
                    p.push(zb.gradient_at(&c));
                }
                d = d.min(window_fit(&g, &p, None).distance());
            }
        }
        d
    }

    fn common_period(&self) -> Vec<usize> {
        (0..self.dim)
            .map(|d| {
                self.ground_states
                    .iter()
                    .map(|z| z.period[d])
                    .fold(1, |acc, p| acc / gcd(acc, p) * p)
            })
            .collect()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn window(&self) -> &[Vec<i64>] {
        &self.window
    }

    /// `max(#Λ, diam Λ)`.
    pub fn interaction_range(&self) -> f64 {
        let mut diam = 0.0f64;
        for a in &self.window {
            for b in &self.window {
                let d2: i64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                diam = diam.max((d2 as f64).sqrt());
            }
        }
        diam.max(self.window.len() as f64)
    }

    /// Bounds (inclusive) of the enlarged window: the bounding box of the
    /// interaction window and `[0, 2 L₀]^n`, extended by one site upwards.
    pub fn enlarged_window(&self) -> (&[i64], &[i64]) {
        (&self.enlarged_lo, &self.enlarged_hi)
    }

    pub fn enlarged_window_sites(&self) -> usize {
        self.enlarged_lo.iter().zip(&self.enlarged_hi).map(|(l, h)| (h - l + 1) as usize).product()
    }

    pub fn density(&self) -> &LatticeDensity {
        &self.density
    }

    pub fn ground_states(&self) -> &[GroundState] {
        &self.ground_states
    }

    pub fn averaged_gradients(&self) -> Vec<Mat> {
        self.ground_states.iter().map(|z| z.mean.clone()).collect()
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    /// Whether every averaged gradient is invertible. The raw antiferro chain
    /// is the standard example where this fails.
    pub fn averages_invertible(&self) -> bool {
        self.ground_states.iter().all(|z| linalg::det(&z.mean).abs() > 1e-12)
    }

    /// Pairwise separation of the ground states (`+∞` for a single one).
    pub fn separation(&self) -> f64 {
        self.separation
    }

    /// `L₀`, the longest period over all ground states and directions.
    pub fn max_period(&self) -> usize {
        self.max_period
    }

    /// A copy with a different density; ground states must still have zero energy.
    pub fn with_density(&self, density: LatticeDensity) -> Result<Self> {
        Self::new(
            &self.name,
            self.dim,
            self.window.clone(),
            density,
            self.ground_states.clone(),
            self.exponent,
        )
    }

    /// `h̃` of a patch listed in window order.
    pub fn local_energy(&self, patch: &[&Mat]) -> Result<f64> {
        if patch.len() != self.window.len() {
            return Err(Error::Input("patch length differs from the interaction window".into()));
        }
        let scalar = |k: usize| patch[k][(0, 0)];
        Ok(match &self.density {
            LatticeDensity::AntiferroRaw => scalar(0) * scalar(1) + 1.0,
            LatticeDensity::AntiferroRemapped => (2.0 * scalar(0) - 3.0) * (2.0 * scalar(1) - 3.0) + 1.0,
            LatticeDensity::Table { alphabet, values } => {
                let a = alphabet.len();
                let mut code = 0usize;
                let mut weight = 1usize;
                for k in 0..patch.len() {
                    let v = scalar(k);
                    let pos = alphabet
                        .iter()
                        .position(|&x| x == v)
                        .ok_or_else(|| Error::Input(format!("gradient {v} is outside the density alphabet")))?;
                    code += pos * weight;
                    weight *= a;
                }
                values[code]
            }
            LatticeDensity::PatternDistance => self.pattern_distance(patch),
            LatticeDensity::Custom(f) => f(patch),
        })
    }

    fn pattern_distance(&self, patch: &[&Mat]) -> f64 {
        let mut best = f64::INFINITY;
        for z in &self.ground_states {
            for r in 0..sites_in(&z.period) {
                let base: Vec<i64> = coords_of(&z.period, r).iter().map(|&c| c as i64).collect();
                let pats: Vec<&Mat> = self
                    .window
                    .iter()
                    .map(|o| {
                        let s: Vec<i64> = base.iter().zip(o).map(|(b, o)| b + o).collect();
                        z.gradient_at(&s)
                    })
                    .collect();
                let v = if self.dim == 1 {
                    patch.iter().zip(&pats).map(|(g, p)| (g[(0, 0)] - p[(0, 0)]).powi(2)).sum()
                } else {
                    let terms: Vec<AngleTerm> = patch.iter().zip(&pats).map(|(g, p)| AngleTerm::new(g, p)).collect();
                    let sa: f64 = terms.iter().map(|t| t.alpha).sum();
                    let sb: f64 = terms.iter().map(|t| t.beta).sum();
                    let r = linalg::rotation2(sb.atan2(sa));
                    patch.iter().zip(&pats).map(|(g, p)| (*g - &r * *p).norm_squared()).sum()
                };
                best = best.min(v);
            }
        }
        best
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(s)?)
    }

    pub fn from_doc(doc: &LatticeSystemDoc) -> Result<Self> {
        let n = doc.dim;
        let density = match &doc.density {
            DensityDoc::Builtin { builtin } => match builtin.as_str() {
                "antiferro-raw" => LatticeDensity::AntiferroRaw,
                "antiferro-remapped" => LatticeDensity::AntiferroRemapped,
                "pattern-distance" => LatticeDensity::PatternDistance,
                other => return Err(Error::Input(format!("unknown builtin density `{other}`"))),
            },
            DensityDoc::Table { table } => {
                LatticeDensity::Table { alphabet: table.alphabet.clone(), values: table.values.clone() }
            }
        };
        let mut states = Vec::new();
        for z in &doc.ground_states {
            let pattern = z
                .pattern
                .iter()
                .map(|g| linalg::from_row_major(n, g))
                .collect::<Result<Vec<_>>>()?;
            states.push(GroundState::new(z.period.clone(), pattern)?);
        }
        Self::new(&doc.name, n, doc.window.clone(), density, states, doc.exponent)
    }

    pub fn to_doc(&self) -> Result<LatticeSystemDoc> {
        let density = match &self.density {
            LatticeDensity::Table { alphabet, values } => DensityDoc::Table {
                table: TableDoc { alphabet: alphabet.clone(), values: values.clone() },
            },
            LatticeDensity::Custom(_) => {
                return Err(Error::Unsupported("custom densities cannot be serialized".into()))
            }
            d => DensityDoc::Builtin { builtin: d.name().to_string() },
        };
        Ok(LatticeSystemDoc {
            name: self.name.clone(),
            dim: self.dim,
            window: self.window.clone(),
            density,
            ground_states: self
                .ground_states
                .iter()
                .map(|z| GroundStateDoc {
                    period: z.period.clone(),
                    pattern: z.pattern.iter().map(linalg::to_row_major).collect(),
                })
                .collect(),
            exponent: self.exponent,
            separation: self.separation.is_finite().then_some(self.separation),
            averaged: self.ground_states.iter().map(|z| linalg::to_row_major(&z.mean)).collect(),
            max_period: self.max_period,
            enlarged_window: [self.enlarged_lo.clone(), self.enlarged_hi.clone()],
        })
    }
}

/// JSON form of a lattice system. Derived fields are written for reference
/// and ignored on input.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatticeSystemDoc {
    #[serde(default)]
    pub name: String,
    pub dim: usize,
    pub window: Vec<Vec<i64>>,
    pub density: DensityDoc,
    pub ground_states: Vec<GroundStateDoc>,
    pub exponent: f64,
    #[serde(default, skip_deserializing)]
    pub separation: Option<f64>,
    #[serde(default, skip_deserializing)]
    pub averaged: Vec<Vec<f64>>,
    #[serde(default, skip_deserializing)]
    pub max_period: usize,
    #[serde(default, skip_deserializing)]
    pub enlarged_window: [Vec<i64>; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DensityDoc {
    Builtin { builtin: String },
    Table { table: TableDoc },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableDoc {
    pub alphabet: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundStateDoc {
    pub period: Vec<usize>,
    pub pattern: Vec<Vec<f64>>,
}

/// Lattice deformation on the sites `[0, shape)` at scale `m`.
#[derive(Clone, Debug)]
pub struct LatticeDeformation {
    scale: usize,
    shape: Vec<usize>,
    values: Option<Vec<Vec<f64>>>,
    gradients: Vec<Mat>,
}

fn differences(shape: &[usize], values: &[Vec<f64>]) -> Vec<Mat> {
    let n = shape.len();
    let vshape: Vec<usize> = shape.iter().map(|s| s + 1).collect();
    (0..sites_in(shape))
        .into_par_iter()
        .map(|i| {
            let c = coords_of(shape, i);
            let base = &values[index_of(&vshape, &c)];
            let mut g = Mat::zeros(n, n);
            for d in 0..n {
                let mut e = c.clone();
                e[d] += 1;
                let next = &values[index_of(&vshape, &e)];
                for a in 0..n {
                    g[(a, d)] = next[a] - base[a];
                }
            }
            g
        })
        .collect()
}

impl LatticeDeformation {
    /// Values on the `(shape + 1)` vertex grid; gradients are differenced.
    pub fn from_values(m: usize, shape: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self> {
        Self::check_shape(m, &shape)?;
        let n = shape.len();
        let vshape: Vec<usize> = shape.iter().map(|s| s + 1).collect();
        if values.len() != sites_in(&vshape) {
            return Err(Error::Input(format!(
                "{} values for a grid of {} sites",
                values.len(),
                sites_in(&vshape)
            )));
        }
        if values.iter().any(|v| v.len() != n || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Input("lattice values must be finite n-vectors".into()));
        }
        let gradients = differences(&shape, &values);
        Ok(Self { scale: m, shape, values: Some(values), gradients })
    }

    pub fn from_map(m: usize, shape: Vec<usize>, f: impl Fn(&[usize]) -> Vec<f64> + Sync) -> Result<Self> {
        let vshape: Vec<usize> = shape.iter().map(|s| s + 1).collect();
        let values = (0..sites_in(&vshape)).into_par_iter().map(|i| f(&coords_of(&vshape, i))).collect();
        Self::from_values(m, shape, values)
    }

    /// Gradients given directly. Chains also get values by prefix sums from 0.
    pub fn from_gradients(m: usize, shape: Vec<usize>, gradients: Vec<Mat>) -> Result<Self> {
        Self::check_shape(m, &shape)?;
        let n = shape.len();
        if gradients.len() != sites_in(&shape) {
            return Err(Error::Input("gradient count differs from the number of sites".into()));
        }
        if gradients.iter().any(|g| g.nrows() != n || g.ncols() != n) {
            return Err(Error::Input("gradients must be n×n".into()));
        }
        for g in &gradients {
            linalg::ensure_finite(g, "lattice gradient")?;
        }
        let values = (n == 1).then(|| {
            let mut acc = 0.0;
            let mut v = vec![vec![0.0]];
            for g in &gradients {
                acc += g[(0, 0)];
                v.push(vec![acc]);
            }
            v
        });
        Ok(Self { scale: m, shape, values, gradients })
    }

    /// A chain from its gradient sequence.
    pub fn chain(m: usize, gradients: &[f64]) -> Result<Self> {
        let g = gradients.iter().map(|&v| Mat::from_element(1, 1, v)).collect();
        Self::from_gradients(m, vec![gradients.len()], g)
    }

    fn check_shape(m: usize, shape: &[usize]) -> Result<()> {
        if m == 0 {
            return Err(Error::Input("scale m must be positive".into()));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Input("lattice shape must have positive entries".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn num_sites(&self) -> usize {
        self.gradients.len()
    }

    /// `m^{-n}`, the volume carried by one site.
    pub fn site_volume(&self) -> f64 {
        (self.scale as f64).powi(-(self.dim() as i32))
    }

    pub fn site_coords(&self, i: usize) -> Vec<usize> {
        coords_of(&self.shape, i)
    }

    pub fn site_index(&self, coords: &[usize]) -> usize {
        index_of(&self.shape, coords)
    }

    pub fn gradients(&self) -> &[Mat] {
        &self.gradients
    }

    pub fn gradient(&self, i: usize) -> &Mat {
        &self.gradients[i]
    }

    pub fn values(&self) -> Option<&[Vec<f64>]> {
        self.values.as_deref()
    }

    /// Recomputes the gradients from the values and compares bitwise.
    pub fn check_cache(&self) -> Option<bool> {
        let v = self.values.as_ref()?;
        let fresh = differences(&self.shape, v);
        Some(fresh.iter().zip(&self.gradients).all(|(a, b)| a == b))
    }

    /// `X + b`, with gradients recomputed from the shifted values.
    pub fn translated(&self, b: &[f64]) -> Result<Self> {
        let v = self
            .values
            .as_ref()
            .ok_or_else(|| Error::Input("translation needs lattice values".into()))?;
        if b.len() != self.dim() {
            return Err(Error::Input("translation has the wrong dimension".into()));
        }
        let shifted = v.iter().map(|x| x.iter().zip(b).map(|(a, c)| a + c).collect()).collect();
        Self::from_values(self.scale, self.shape.clone(), shifted)
    }

    /// `R X`, gradients recomputed.
    pub fn rotated(&self, r: &Mat) -> Result<Self> {
        let v = self
            .values
            .as_ref()
            .ok_or_else(|| Error::Input("rotation needs lattice values".into()))?;
        let n = self.dim();
        let out = v
            .iter()
            .map(|x| {
                let y = r * linalg::Vector::from_column_slice(x);
                (0..n).map(|a| y[a]).collect()
            })
            .collect();
        Self::from_values(self.scale, self.shape.clone(), out)
    }

    /// Interpolation point and value `(i/m, X_i/m)` for a vertex of the value grid.
    pub fn interpolated(&self) -> Option<Vec<(Vec<f64>, Vec<f64>)>> {
        let v = self.values.as_ref()?;
        let vshape: Vec<usize> = self.shape.iter().map(|s| s + 1).collect();
        let m = self.scale as f64;
        Some(
            v.iter()
                .enumerate()
                .map(|(i, x)| {
                    let p = coords_of(&vshape, i).iter().map(|&c| c as f64 / m).collect();
                    (p, x.iter().map(|a| a / m).collect())
                })
                .collect(),
        )
    }

    /// Columns `site, i0.., g00..` with the gradient in row-major order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.dim();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["site".to_string()];
        header.extend((0..n).map(|d| format!("i{d}")));
        for a in 0..n {
            for b in 0..n {
                header.push(format!("g{a}{b}"));
            }
        }
        out.write_record(&header)?;
        for (i, g) in self.gradients.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.site_coords(i).iter().map(|c| c.to_string()));
            rec.extend(linalg::to_row_major(g).iter().map(|x| x.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the format of [`write_csv`](Self::write_csv); the shape is the
    /// bounding box of the listed sites and every site must be present.
    pub fn read_csv<R: Read>(m: usize, r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let cols = rdr.headers()?.len();
        let n = (1..=3).find(|n| 1 + n + n * n == cols).ok_or_else(|| {
            Error::Input(format!("{cols} columns do not match `site, i.., g..` for any dimension"))
        })?;
        let mut rows: Vec<(Vec<usize>, Mat)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Input(format!("bad number `{}`: {e}", &rec[k])))
            };
            let mut c = Vec::with_capacity(n);
            for d in 0..n {
                let v = field(1 + d)?;
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Input(format!("site coordinate {v} is not a nonnegative integer")));
                }
                c.push(v as usize);
            }
            let g: Vec<f64> = (0..n * n).map(|k| field(1 + n + k)).collect::<Result<_>>()?;
            rows.push((c, linalg::from_row_major(n, &g)?));
        }
        if rows.is_empty() {
            return Err(Error::Input("no lattice sites in CSV".into()));
        }
        let shape: Vec<usize> = (0..n).map(|d| rows.iter().map(|r| r.0[d]).max().unwrap_or(0) + 1).collect();
        let mut grads: Vec<Option<Mat>> = vec![None; sites_in(&shape)];
        for (c, g) in rows {
            let i = index_of(&shape, &c);
            if grads[i].replace(g).is_some() {
                return Err(Error::Input(format!("site {c:?} listed twice")));
            }
        }
        let grads = grads
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Input("CSV does not cover a full box of sites".into()))?;
        Self::from_gradients(m, shape, grads)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HamiltonianReport {
    pub scale: usize,
    /// `m^{-n} Σ h̃`; equal to the sequential sum of `per_site`.
    pub total: f64,
    /// Weighted contribution anchored at each site (0 where the window leaves the domain).
    pub per_site: Vec<f64>,
    /// Unweighted `h̃` per anchor site.
    pub local: Vec<f64>,
    pub windows: usize,
    /// Set when no window fits in the domain.
    pub empty: bool,
}

fn window_sites(shape: &[usize], j: usize, offsets: &[Vec<i64>]) -> Option<Vec<usize>> {
    let c = coords_of(shape, j);
    offsets.iter().map(|o| shifted_index(shape, &c, o)).collect()
}

pub fn evaluate_hamiltonian(x: &LatticeDeformation, sys: &LatticeSystem) -> Result<HamiltonianReport> {
    if x.dim() != sys.dim {
        return Err(Error::Input("deformation and system dimensions differ".into()));
    }
    let local: Vec<Option<f64>> = (0..x.num_sites())
        .into_par_iter()
        .map(|j| match window_sites(&x.shape, j, &sys.window) {
            Some(sites) => {
                let patch: Vec<&Mat> = sites.iter().map(|&s| &x.gradients[s]).collect();
                sys.local_energy(&patch).map(Some)
            }
            None => Ok(None),
        })
        .collect::<Result<_>>()?;
    let w = x.site_volume();
    let windows = local.iter().filter(|v| v.is_some()).count();
    let local: Vec<f64> = local.into_iter().map(|v| v.unwrap_or(0.0)).collect();
    let per_site: Vec<f64> = local.iter().map(|h| h * w).collect();
    let total = per_site.iter().sum();
    Ok(HamiltonianReport { scale: x.scale, total, per_site, local, windows, empty: windows == 0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteLabel {
    Ground(usize),
    Bad,
    Boundary,
}

impl fmt::Display for SiteLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteLabel::Ground(l) => write!(f, "{l}"),
            SiteLabel::Bad => f.write_str("BAD"),
            SiteLabel::Boundary => f.write_str("BD"),
        }
    }
}

impl Serialize for SiteLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SiteLabel::Ground(l) => s.serialize_u64(*l as u64),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LatticeLabeling {
    scale: usize,
    shape: Vec<usize>,
    labels: Vec<SiteLabel>,
    distances: Vec<Option<f64>>,
    rotations: Vec<Option<f64>>,
    threshold: f64,
}

impl LatticeLabeling {
    pub fn labels(&self) -> &[SiteLabel] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> SiteLabel {
        self.labels[i]
    }

    /// Best window distance found per site (`None` in the boundary layer). For
    /// BAD sites in two dimensions this may be a lower bound.
    pub fn distances(&self) -> &[Option<f64>] {
        &self.distances
    }

    /// Certifying rotation on ground-labelled sites.
    pub fn rotation(&self, i: usize) -> Option<Mat> {
        self.rotations[i].map(|t| rotation_of(self.shape.len(), t))
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn count(&self, label: SiteLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn volume_of(&self, label: SiteLabel) -> f64 {
        self.count(label) as f64 * (self.scale as f64).powi(-(self.shape.len() as i32))
    }

    /// Pairs `(i, i + e_d)` of neighbouring sites.
    pub fn neighbour_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.shape.len();
        (0..self.labels.len()).flat_map(move |i| {
            let c = coords_of(&self.shape, i);
            (0..n).filter_map(move |d| {
                let mut e = vec![0i64; n];
                e[d] = 1;
                shifted_index(&self.shape, &c, &e).map(|j| (i, j))
            })
        })
    }

    /// Columns `site, i0.., label, distance`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.shape.len();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["site".to_string()];
        header.extend((0..n).map(|d| format!("i{d}")));
        header.push("label".into());
        header.push("distance".into());
        out.write_record(&header)?;
        for (i, (l, d)) in self.labels.iter().zip(&self.distances).enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(coords_of(&self.shape, i).iter().map(|c| c.to_string()));
            rec.push(l.to_string());
            rec.push(d.map(|v| v.to_string()).unwrap_or_default());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Labels each site by the ground state matching its window `Q₀ + j` within
/// `threshold` (default `d/100`, inclusive) under some rotation; sites whose
/// window leaves the domain form the boundary layer.
pub fn classify_lattice(x: &LatticeDeformation, sys: &LatticeSystem, threshold: Option<f64>) -> Result<LatticeLabeling> {
    if x.dim() != sys.dim {
        return Err(Error::Input("deformation and system dimensions differ".into()));
    }
    let thr = threshold.unwrap_or(sys.separation / 100.0);
    if !(thr >= 0.0) {
        return Err(Error::Input(format!("threshold {thr} must be nonnegative")));
    }
    let l0 = sys.max_period as i64;
    let q0 = box_offsets(&vec![0; sys.dim], &vec![l0; sys.dim]);
    let cutoff = thr.is_finite().then_some(thr);
    let out: Vec<(SiteLabel, Option<f64>, Option<f64>)> = (0..x.num_sites())
        .into_par_iter()
        .map(|j| {
            let Some(sites) = window_sites(&x.shape, j, &q0) else {
                return (SiteLabel::Boundary, None, None);
            };
            let base: Vec<i64> = coords_of(&x.shape, j).iter().map(|&c| c as i64).collect();
            let g: Vec<&Mat> = sites.iter().map(|&s| &x.gradients[s]).collect();
            let mut best: Option<(usize, f64, f64)> = None;
            let mut nearest = f64::INFINITY;
            for (l, z) in sys.ground_states.iter().enumerate() {
                let p: Vec<&Mat> = q0
                    .iter()
                    .map(|o| {
                        let s: Vec<i64> = base.iter().zip(o).map(|(b, o)| b + o).collect();
                        z.gradient_at(&s)
                    })
                    .collect();
                let fit = window_fit(&g, &p, cutoff);
                nearest = nearest.min(fit.distance());
                if let WindowFit::Found { theta, distance } = fit {
                    if distance <= thr && best.is_none_or(|b| distance < b.1) {
                        best = Some((l, distance, theta));
                    }
                }
            }
            match best {
                Some((l, dist, theta)) => (SiteLabel::Ground(l), Some(dist), Some(theta)),
                None => (SiteLabel::Bad, Some(nearest), None),
            }
        })
        .collect();
    let (labels, rest): (Vec<_>, Vec<_>) = out.into_iter().map(|(a, b, c)| (a, (b, c))).unzip();
    let (distances, rotations) = rest.into_iter().unzip();
    Ok(LatticeLabeling { scale: x.scale, shape: x.shape.clone(), labels, distances, rotations, threshold: thr })
}

/// Sliding average of the gradient over the period cell of ground state `l`
/// anchored at each site; `None` where the cell leaves the domain.
pub fn averaged_gradient_field(x: &LatticeDeformation, sys: &LatticeSystem, l: usize) -> Result<Vec<Option<Mat>>> {
    let z = sys
        .ground_states
        .get(l)
        .ok_or_else(|| Error::Input(format!("no ground state {l}")))?;
    if x.dim() != sys.dim {
        return Err(Error::Input("deformation and system dimensions differ".into()));
    }
    Ok(average_over(x, z.period()))
}

fn average_over(x: &LatticeDeformation, period: &[usize]) -> Vec<Option<Mat>> {
    let cell = box_offsets(&vec![0; period.len()], &period.iter().map(|&p| p as i64 - 1).collect::<Vec<_>>());
    let k = cell.len() as f64;
    (0..x.num_sites())
        .into_par_iter()
        .map(|j| {
            let sites = window_sites(&x.shape, j, &cell)?;
            let mut acc = Mat::zeros(x.dim(), x.dim());
            for s in sites {
                acc += &x.gradients[s];
            }
            Some(acc / k)
        })
        .collect()
}

/// Frobenius norm of `m^{-n} Σ_D (∇_d X - ∇_d X̄)` over the sites `D` where
/// the average of ground state `l` is defined. Averaging only moves mass
/// across a band of width `L₀` at the boundary, so this is `O(1/m)`.
pub fn averaging_defect(x: &LatticeDeformation, sys: &LatticeSystem, l: usize) -> Result<f64> {
    let avg = averaged_gradient_field(x, sys, l)?;
    let n = x.dim();
    let mut diff = Mat::zeros(n, n);
    for (g, a) in x.gradients.iter().zip(&avg) {
        if let Some(a) = a {
            diff += g - a;
        }
    }
    Ok(diff.norm() * x.site_volume())
}

#[derive(Clone, Debug, Serialize)]
pub struct H2Witness {
    /// Gradients over the enlarged window, each row-major, first coordinate fastest.
    pub window: Vec<Vec<f64>>,
    /// Phase of the window relative to the ground-state patterns.
    pub anchor: Vec<i64>,
    pub kappa: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct H2Report {
    pub exhaustive: bool,
    pub windows_checked: usize,
    pub window_sites: usize,
    pub exponent: f64,
    /// Largest `c` with `energy ≥ c κ^p` on every checked window with `κ > 0`.
    pub constant: Option<f64>,
    /// Window attaining `constant`.
    pub worst: Option<H2Witness>,
    pub zero_energy_windows: usize,
    /// Windows with `κ > 0` and zero energy.
    pub violation_count: usize,
    pub violations: Vec<H2Witness>,
    pub passed: bool,
}

struct WindowEval {
    kappa: f64,
    energy: f64,
}

fn evaluate_enlarged(sys: &LatticeSystem, shape: &[usize], grads: &[Mat], anchor: &[i64]) -> Result<WindowEval> {
    let mut energy = 0.0;
    for j in 0..grads.len() {
        if let Some(sites) = window_sites(shape, j, &sys.window) {
            let patch: Vec<&Mat> = sites.iter().map(|&s| &grads[s]).collect();
            energy += sys.local_energy(&patch)?;
        }
    }
    let g: Vec<&Mat> = grads.iter().collect();
    let mut kappa = f64::INFINITY;
    for z in &sys.ground_states {
        let p: Vec<&Mat> = (0..grads.len())
            .map(|k| {
                let c: Vec<i64> = coords_of(shape, k)
                    .iter()
                    .zip(anchor)
                    .zip(&sys.enlarged_lo)
                    .map(|((&c, a), lo)| c as i64 + lo + a)
                    .collect();
                z.gradient_at(&c)
            })
            .collect();
        kappa = kappa.min(window_fit(&g, &p, None).distance());
    }
    Ok(WindowEval { kappa, energy })
}

fn sample_window<R: Rng + ?Sized>(sys: &LatticeSystem, shape: &[usize], anchor: &[i64], rng: &mut R) -> Vec<Mat> {
    let n = sys.dim;
    let count = sites_in(shape);
    if let Some(alpha) = sys.density.alphabet() {
        return (0..count)
            .map(|_| Mat::from_element(1, 1, alpha[rng.random_range(0..alpha.len())]))
            .collect();
    }
    let k = sys.ground_states.len();
    let pick = |rng: &mut R| -> (usize, Mat) {
        let l = rng.random_range(0..k);
        let r = if n == 2 { linalg::rotation2(rng.random_range(0.0..2.0 * PI)) } else { Mat::identity(1, 1) };
        (l, r)
    };
    let (l1, r1) = pick(rng);
    let (l2, r2) = pick(rng);
    let axis = rng.random_range(0..n);
    let split = rng.random_range(0..=shape[axis]);
    let mode = rng.random_range(0..3);
    let amp = 10f64.powf(rng.random_range(-4.0..0.0));
    let hit = rng.random_range(0..count);
    (0..count)
        .map(|idx| {
            let c = coords_of(shape, idx);
            let site: Vec<i64> = c
                .iter()
                .zip(anchor)
                .zip(&sys.enlarged_lo)
                .map(|((&c, a), lo)| c as i64 + lo + a)
                .collect();
            let (l, r) = if mode == 2 && c[axis] >= split { (l2, &r2) } else { (l1, &r1) };
            let mut g = r * sys.ground_states[l].gradient_at(&site);
            if mode == 1 || idx == hit {
                g += Mat::from_fn(n, n, |_, _| amp * rng.random_range(-1.0..1.0));
            }
            g
        })
        .collect()
}

/// Checks the lower bound `Σ h̃ ≥ c κ^p` over windows of the enlarged box,
/// where `κ` is the distance to the nearest ground-state orbit over the box.
/// Finite alphabets are enumerated exhaustively when the count fits in the
/// budget; otherwise `budget` windows are sampled.
pub fn verify_h2<R: Rng + ?Sized>(sys: &LatticeSystem, budget: usize, rng: &mut R) -> Result<H2Report> {
    let (lo, hi) = sys.enlarged_window();
    let shape: Vec<usize> = lo.iter().zip(hi).map(|(l, h)| (h - l + 1) as usize).collect();
    let sites = sites_in(&shape);
    let common = sys.common_period();
    let anchors: Vec<Vec<i64>> = (0..sites_in(&common))
        .map(|i| coords_of(&common, i).iter().map(|&c| c as i64).collect())
        .collect();
    let alphabet = sys.density.alphabet();
    let exhaustive_count = alphabet.as_ref().and_then(|a| {
        (a.len() as u128)
            .checked_pow(sites as u32)
            .map(|c| c * anchors.len() as u128)
            .filter(|&c| c <= budget as u128)
    });
    let evals: Vec<(Vec<Mat>, Vec<i64>, WindowEval)> = match (exhaustive_count, &alphabet) {
        (Some(count), Some(alpha)) => (0..count as usize)
            .into_par_iter()
            .map(|code| {
                let anchor = &anchors[code % anchors.len()];
                let mut rest = code / anchors.len();
                let grads: Vec<Mat> = (0..sites)
                    .map(|_| {
                        let v = alpha[rest % alpha.len()];
                        rest /= alpha.len();
                        Mat::from_element(1, 1, v)
                    })
                    .collect();
                let e = evaluate_enlarged(sys, &shape, &grads, anchor)?;
                Ok((grads, anchor.clone(), e))
            })
            .collect::<Result<_>>()?,
        _ => {
            let drawn: Vec<(Vec<Mat>, Vec<i64>)> = (0..budget)
                .map(|_| {
                    let anchor = anchors[rng.random_range(0..anchors.len())].clone();
                    (sample_window(sys, &shape, &anchor, rng), anchor)
                })
                .collect();
            drawn
                .into_par_iter()
                .map(|(g, a)| {
                    let e = evaluate_enlarged(sys, &shape, &g, &a)?;
                    Ok((g, a, e))
                })
                .collect::<Result<_>>()?
        }
    };
    let witness = |g: &[Mat], a: &[i64], e: &WindowEval| H2Witness {
        window: g.iter().map(linalg::to_row_major).collect(),
        anchor: a.to_vec(),
        kappa: e.kappa,
        energy: e.energy,
    };
    let p = sys.exponent;
    let mut constant: Option<(f64, usize)> = None;
    let mut zero = 0;
    let mut violations = Vec::new();
    let mut violation_count = 0;
    for (idx, (g, a, e)) in evals.iter().enumerate() {
        if e.energy <= ZERO_ENERGY_TOL {
            zero += 1;
        }
        if e.kappa > KAPPA_TOL {
            if e.energy <= ZERO_ENERGY_TOL {
                violation_count += 1;
                if violations.len() < MAX_WITNESSES {
                    violations.push(witness(g, a, e));
                }
            }
            let ratio = e.energy / e.kappa.powf(p);
            if constant.is_none_or(|(c, _)| ratio < c) {
                constant = Some((ratio, idx));
            }
        }
    }
    let worst = constant.map(|(_, i)| witness(&evals[i].0, &evals[i].1, &evals[i].2));
    Ok(H2Report {
        exhaustive: exhaustive_count.is_some(),
        windows_checked: evals.len(),
        window_sites: sites,
        exponent: p,
        constant: constant.map(|c| c.0),
        worst,
        zero_energy_windows: zero,
        violation_count,
        violations,
        passed: violation_count == 0 && constant.is_none_or(|c| c.0 > 0.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AntiferroVariant {
    Raw,
    Remapped,
}

impl AntiferroVariant {
    /// Gradient value standing for a raw spin difference in `{-1, 0, 1}`.
    pub fn encode(self, raw: f64) -> f64 {
        match self {
            AntiferroVariant::Raw => raw,
            AntiferroVariant::Remapped => (raw + 3.0) / 2.0,
        }
    }
}

/// The nearest-neighbour antiferromagnetic chain: window `{0, 1}`, ground
/// states alternating with period 2, growth exponent 2.
pub fn antiferro_system(variant: AntiferroVariant) -> LatticeSystem {
    let density = match variant {
        AntiferroVariant::Raw => LatticeDensity::AntiferroRaw,
        AntiferroVariant::Remapped => LatticeDensity::AntiferroRemapped,
    };
    let state = |a: f64, b: f64| {
        GroundState::new(
            vec![2],
            vec![
                Mat::from_element(1, 1, variant.encode(a)),
                Mat::from_element(1, 1, variant.encode(b)),
            ],
        )
    };
    let name = match variant {
        AntiferroVariant::Raw => "antiferro-raw",
        AntiferroVariant::Remapped => "antiferro-remapped",
    };
    let states = vec![state(1.0, -1.0), state(-1.0, 1.0)]
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .expect("antiferro ground states are well formed");
    LatticeSystem::new(name, 1, vec![vec![0], vec![1]], density, states, 2.0)
        .expect("antiferro system is admissible")
}

/// Alternating chain of `m` gradients starting with `+1` (encoded), where the
/// gradient at each listed position repeats its predecessor. Each such
/// parallel pair switches between the two antiphases.
pub fn antiferro_chain(variant: AntiferroVariant, m: usize, defects: &[usize]) -> Result<LatticeDeformation> {
    if defects.iter().any(|&p| p == 0 || p >= m) {
        return Err(Error::Input("defect positions must lie in 1..m".into()));
    }
    let mut raw = Vec::with_capacity(m);
    let mut s = 1.0;
    for i in 0..m {
        if i > 0 && !defects.contains(&i) {
            s = -s;
        }
        raw.push(s);
    }
    let g: Vec<f64> = raw.into_iter().map(|v| variant.encode(v)).collect();
    LatticeDeformation::chain(m, &g)
}

/// Positions `round(t m / (k + 1))`, `t = 1..=k`, of a `k`-interface chain.
pub fn interface_positions(m: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|t| ((t * m) as f64 / (k + 1) as f64).round() as usize).collect()
}

pub fn k_interface_chain(variant: AntiferroVariant, m: usize, k: usize) -> Result<LatticeDeformation> {
    let pos = interface_positions(m, k);
    if pos.windows(2).any(|w| w[1] <= w[0] + 3) || pos.first().is_some_and(|&p| p < 1) {
        return Err(Error::Input(format!("m = {m} is too small for {k} separated interfaces")));
    }
    antiferro_chain(variant, m, &pos)
}

/// Oscillation amplitude of the synthetic planar system.
pub const SYNTHETIC_OSCILLATION: f64 = 0.125;

/// Planar system with two phases `diag(5/4, 1)` and `diag(3/4, 1)`, each
/// carrying a zero-mean oscillation `±w e₁⊗e₁` of period 2 along the first
/// axis, in both shifts. Window: the 2×2 block; density: squared distance
/// to the nearest rotated ground-state patch.
pub fn synthetic_system() -> LatticeSystem {
    let w = SYNTHETIC_OSCILLATION;
    let state = |u: f64, sign: f64| {
        let a = Mat::from_row_slice(2, 2, &[u + sign * w, 0.0, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 2, &[u - sign * w, 0.0, 0.0, 1.0]);
        GroundState::new(vec![2, 1], vec![a, b]).expect("synthetic ground state")
    };
    let states = vec![state(1.25, 1.0), state(1.25, -1.0), state(0.75, 1.0), state(0.75, -1.0)];
    LatticeSystem::new(
        "synthetic-planar",
        2,
        vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]],
        LatticeDensity::PatternDistance,
        states,
        2.0,
    )
    .expect("synthetic system is admissible")
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LatticeDiagnosticsOptions {
    pub threshold: Option<f64>,
    /// Reject the sweep when `m H_m` exceeds this constant at any scale.
    pub energy_constant: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatticeComponent {
    pub ground_state: usize,
    pub sites: usize,
    pub volume: f64,
    pub centroid: Vec<f64>,
    /// Rotation fitted to the averaged field, row-major.
    pub rotation: Vec<f64>,
    /// `L²` distance of the averaged field to `R U_l` over the component.
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatticeSweepRow {
    pub m: usize,
    pub energy: f64,
    /// `m H_m`.
    pub energy_constant: f64,
    pub label_volumes: Vec<f64>,
    pub bad_sites: usize,
    pub bad_volume: f64,
    pub boundary_sites: usize,
    pub boundary_volume: f64,
    /// Per ground state: facets to a differently labelled non-boundary site, times `m^{1-n}`.
    pub label_perimeters: Vec<f64>,
    /// Half the sum of the label perimeters.
    pub interface_perimeter: f64,
    pub components: Vec<LatticeComponent>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatticeSweepReport {
    pub system: String,
    pub rows: Vec<LatticeSweepRow>,
    pub bad_volume_slope: Option<f64>,
    pub boundary_volume_slope: Option<f64>,
    pub energy_slope: Option<f64>,
    pub max_interface_perimeter: f64,
    pub component_counts: Vec<usize>,
}

impl LatticeSweepReport {
    /// Columns `m, energy, energy_constant, bad_sites, bad_volume,
    /// boundary_volume, interface_perimeter, components`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "m",
            "energy",
            "energy_constant",
            "bad_sites",
            "bad_volume",
            "boundary_volume",
            "interface_perimeter",
            "components",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.m.to_string(),
                r.energy.to_string(),
                r.energy_constant.to_string(),
                r.bad_sites.to_string(),
                r.bad_volume.to_string(),
                r.boundary_volume.to_string(),
                r.interface_perimeter.to_string(),
                r.components.len().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn sweep_row(x: &LatticeDeformation, sys: &LatticeSystem, opts: &LatticeDiagnosticsOptions) -> Result<LatticeSweepRow> {
    let n = x.dim();
    let m = x.scale;
    let energy = evaluate_hamiltonian(x, sys)?.total;
    let lab = classify_lattice(x, sys, opts.threshold)?;
    let k = sys.ground_states.len();
    let vol = x.site_volume();
    let facet = (m as f64).powi(1 - n as i32);
    let mut perims = vec![0.0; k];
    let mut uf = UnionFind::new(x.num_sites());
    for (i, j) in lab.neighbour_pairs() {
        let (a, b) = (lab.labels[i], lab.labels[j]);
        if a == b {
            if let SiteLabel::Ground(_) = a {
                uf.union(i, j);
            }
            continue;
        }
        if a == SiteLabel::Boundary || b == SiteLabel::Boundary {
            continue;
        }
        for l in [a, b] {
            if let SiteLabel::Ground(l) = l {
                perims[l] += facet;
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..x.num_sites() {
        if let SiteLabel::Ground(_) = lab.labels[i] {
            groups.entry(uf.find(i)).or_default().push(i);
        }
    }
    let averaged: Vec<Vec<Option<Mat>>> = sys.ground_states.iter().map(|z| average_over(x, z.period())).collect();
    let mut components = Vec::new();
    for sites in groups.values() {
        let SiteLabel::Ground(l) = lab.labels[sites[0]] else { unreachable!() };
        let u = &sys.ground_states[l].mean;
        let avg: Vec<&Mat> = sites.iter().filter_map(|&s| averaged[l][s].as_ref()).collect();
        let mut mean = Mat::zeros(n, n);
        for a in &avg {
            mean += *a;
        }
        if !avg.is_empty() {
            mean /= avg.len() as f64;
        }
        let (r, _) = linalg::procrustes(&mean, u);
        let ru = &r * u;
        let residual = (avg.iter().map(|a| (*a - &ru).norm_squared()).sum::<f64>() * vol).sqrt();
        let mut centroid = vec![0.0; n];
        for &s in sites {
            for (d, c) in coords_of(&x.shape, s).iter().enumerate() {
                centroid[d] += (*c as f64 + 0.5) / m as f64;
            }
        }
        for c in centroid.iter_mut() {
            *c /= sites.len() as f64;
        }
        components.push(LatticeComponent {
            ground_state: l,
            sites: sites.len(),
            volume: sites.len() as f64 * vol,
            centroid,
            rotation: linalg::to_row_major(&r),
            residual,
        });
    }
    let bad_sites = lab.count(SiteLabel::Bad);
    let boundary_sites = lab.count(SiteLabel::Boundary);
    Ok(LatticeSweepRow {
        m,
        energy,
        energy_constant: energy * m as f64,
        label_volumes: (0..k).map(|l| lab.volume_of(SiteLabel::Ground(l))).collect(),
        bad_sites,
        bad_volume: bad_sites as f64 * vol,
        boundary_sites,
        boundary_volume: boundary_sites as f64 * vol,
        interface_perimeter: perims.iter().sum::<f64>() / 2.0,
        label_perimeters: perims,
        components,
    })
}

/// Classification, partition and scaling diagnostics over a sweep in `m`.
pub fn lattice_partition_diagnostics(
    sweep: &[LatticeDeformation],
    sys: &LatticeSystem,
    opts: &LatticeDiagnosticsOptions,
) -> Result<LatticeSweepReport> {
    if sweep.is_empty() {
        return Err(Error::Input("empty sweep".into()));
    }
    if sweep.windows(2).any(|w| w[1].scale <= w[0].scale) {
        return Err(Error::Input("sweep scales must be strictly increasing".into()));
    }
    let rows = sweep.iter().map(|x| sweep_row(x, sys, opts)).collect::<Result<Vec<_>>>()?;
    if let Some(c) = opts.energy_constant {
        if rows.iter().any(|r| r.energy_constant > c) {
            let measured: Vec<String> = rows.iter().map(|r| format!("m={}: {}", r.m, r.energy_constant)).collect();
            return Err(Error::EnergyBound(format!(
                "m·H_m exceeds {c}: {}",
                measured.join(", ")
            )));
        }
    }
    let ms: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let fit = |v: Vec<f64>| loglog_fit(&ms, &v).map(|f| f.0);
    Ok(LatticeSweepReport {
        system: sys.name.clone(),
        bad_volume_slope: fit(rows.iter().map(|r| r.bad_volume).collect()),
        boundary_volume_slope: fit(rows.iter().map(|r| r.boundary_volume).collect()),
        energy_slope: fit(rows.iter().map(|r| r.energy).collect()),
        max_interface_perimeter: rows.iter().map(|r| r.interface_perimeter).fold(0.0, f64::max),
        component_counts: rows.iter().map(|r| r.components.len()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw() -> LatticeSystem {
        antiferro_system(AntiferroVariant::Raw)
    }

    fn remapped() -> LatticeSystem {
        antiferro_system(AntiferroVariant::Remapped)
    }

    #[test]
    fn antiferro_constants() {
        let s = raw();
        assert_eq!(s.separation(), 2.0);
        assert_eq!(s.max_period(), 2);
        assert_eq!(s.enlarged_window_sites(), 6);
        assert_eq!(s.interaction_range(), 2.0);
        let r = remapped();
        assert_eq!(r.separation(), 1.0);
        for u in r.averaged_gradients() {
            assert_eq!(u[(0, 0)], 1.5);
        }
        for u in s.averaged_gradients() {
            assert_eq!(u[(0, 0)], 0.0);
        }
    }

    #[test]
    fn raw_averages_are_singular() {
        assert!(!raw().averages_invertible());
        assert!(remapped().averages_invertible());
        assert!(synthetic_system().averages_invertible());
    }

    #[test]
    fn ground_chains_have_zero_energy() {
        for v in [AntiferroVariant::Raw, AntiferroVariant::Remapped] {
            let s = antiferro_system(v);
            let x = antiferro_chain(v, 20, &[]).unwrap();
            let h = evaluate_hamiltonian(&x, &s).unwrap();
            assert_eq!(h.total, 0.0);
            assert_eq!(h.windows, 19);
            let shifted = antiferro_chain(v, 20, &[1]).unwrap();
            assert_eq!(evaluate_hamiltonian(&shifted, &s).unwrap().total, 2.0 / 20.0);
        }
        let x = antiferro_chain(AntiferroVariant::Remapped, 20, &[]).unwrap();
        let avg = averaged_gradient_field(&x, &remapped(), 0).unwrap();
        assert!(avg.iter().flatten().all(|a| a[(0, 0)] == 1.5));
    }

    #[test]
    fn one_defect_costs_two() {
        // +1 -1 +1 +1 -1 +1 ...
        for v in [AntiferroVariant::Raw, AntiferroVariant::Remapped] {
            let s = antiferro_system(v);
            for m in [10usize, 20, 64] {
                let x = antiferro_chain(v, m, &[3]).unwrap();
                let h = evaluate_hamiltonian(&x, &s).unwrap();
                let oracle: Vec<f64> = (0..m - 1)
                    .map(|j| {
                        let (a, b) = (x.gradient(j)[(0, 0)], x.gradient(j + 1)[(0, 0)]);
                        let (a, b) = match v {
                            AntiferroVariant::Raw => (a, b),
                            AntiferroVariant::Remapped => (2.0 * a - 3.0, 2.0 * b - 3.0),
                        };
                        a * b + 1.0
                    })
                    .collect();
                assert_eq!(&h.local[..m - 1], &oracle[..]);
                assert_eq!(h.local[2], 2.0);
                assert_eq!(h.local.iter().sum::<f64>(), 2.0);
                assert_eq!(h.total, 2.0 / m as f64);
            }
        }
    }

    #[test]
    fn literal_product_form_misses_a_ground_state() {
        let lit = |a: f64, b: f64| (a - 1.0) * (b - 2.0) + 1.0;
        assert_eq!(lit(2.0, 1.0), 0.0);
        assert_eq!(lit(1.0, 2.0), 1.0);
        let r = remapped();
        let one = Mat::from_element(1, 1, 1.0);
        let two = Mat::from_element(1, 1, 2.0);
        assert_eq!(r.local_energy(&[&one, &two]).unwrap(), 0.0);
        assert_eq!(r.local_energy(&[&two, &one]).unwrap(), 0.0);
    }

    #[test]
    fn window_outside_domain_gives_empty_sum() {
        let x = LatticeDeformation::chain(1, &[1.0]).unwrap();
        let h = evaluate_hamiltonian(&x, &raw()).unwrap();
        assert!(h.empty);
        assert_eq!(h.total, 0.0);
    }

    #[test]
    fn table_rejects_unknown_letters() {
        let s = raw().with_density(LatticeDensity::tabulate(&[-1.0, 0.0, 1.0], 2, |p| p[0] * p[1] + 1.0)).unwrap();
        let x = LatticeDeformation::chain(4, &[1.0, 0.5, 1.0, -1.0]).unwrap();
        assert!(matches!(evaluate_hamiltonian(&x, &s), Err(Error::Input(_))));
    }

    #[test]
    fn density_must_vanish_on_ground_states() {
        let bad = LatticeDensity::tabulate(&[-1.0, 0.0, 1.0], 2, |_| 1.0);
        assert!(matches!(raw().with_density(bad), Err(Error::Domain(_))));
        let z = GroundState::new(vec![1], vec![Mat::from_element(1, 1, 1.0)]).unwrap();
        let s = LatticeSystem::new("z", 1, vec![vec![0]], LatticeDensity::Custom(Arc::new(|p| p[0][(0, 0)])), vec![z], 2.0);
        assert!(matches!(s, Err(Error::Domain(_))));
    }

    #[test]
    fn h2_exhaustive_raw() {
        let s = raw();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = verify_h2(&s, 1 << 20, &mut rng).unwrap();
        assert!(rep.exhaustive);
        assert_eq!(rep.windows_checked, 729 * 2);
        assert_eq!(rep.window_sites, 6);
        // Oracle: loops over {-1,0,1}^6 × {0,1} with the density written out.
        let mut c = f64::INFINITY;
        let mut zero = 0;
        for code in 0..729usize {
            let w: Vec<f64> = (0..6).map(|k| (code / 3usize.pow(k)) as f64 % 3.0 - 1.0).collect();
            for a in 0..2 {
                let e: f64 = (0..5).map(|k| w[k] * w[k + 1] + 1.0).sum();
                let kap = [1.0, -1.0]
                    .iter()
                    .map(|s| {
                        (0..6)
                            .map(|k| (w[k] - if (a + k) % 2 == 0 { *s } else { -s }).abs())
                            .fold(0.0, f64::max)
                    })
                    .fold(f64::INFINITY, f64::min);
                if e == 0.0 {
                    zero += 1;
                    assert_eq!(kap, 0.0);
                }
                if kap > 0.0 {
                    c = c.min(e / (kap * kap));
                }
            }
        }
        assert_eq!(c, 0.5);
        assert_eq!(rep.constant, Some(c));
        assert_eq!(rep.zero_energy_windows, zero);
        assert_eq!(zero, 4);
        assert_eq!(rep.violation_count, 0);
        assert!(rep.passed);
        let w = rep.worst.unwrap();
        assert_eq!((w.kappa, w.energy), (2.0, 2.0));
    }

    #[test]
    fn h2_exhaustive_remapped() {
        let rep = verify_h2(&remapped(), 1 << 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(rep.exhaustive && rep.passed);
        assert_eq!(rep.constant, Some(2.0));
    }

    #[test]
    fn h2_planted_violation() {
        let planted = LatticeDensity::tabulate(&[-1.0, 0.0, 1.0], 2, |p| {
            if p[0] == 0.0 && p[1] == 0.0 {
                0.0
            } else {
                p[0] * p[1] + 1.0
            }
        });
        let s = raw().with_density(planted).unwrap();
        let rep = verify_h2(&s, 1 << 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!rep.passed);
        assert!(rep.violation_count >= 2);
        let w = &rep.violations[0];
        assert_eq!(w.energy, 0.0);
        assert!(w.kappa > 0.0);
        assert!(w.window.iter().all(|g| g[0] == 0.0));
    }

    #[test]
    fn h2_sampled_when_over_budget() {
        let rep = verify_h2(&raw(), 500, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(!rep.exhaustive);
        assert_eq!(rep.windows_checked, 500);
        assert!(rep.passed && rep.constant.unwrap() >= 0.5);
    }

    #[test]
    fn classify_ground_state() {
        let s = remapped();
        for m in [16usize, 64] {
            let x = antiferro_chain(AntiferroVariant::Remapped, m, &[]).unwrap();
            let lab = classify_lattice(&x, &s, None).unwrap();
            assert_eq!(lab.threshold(), 0.01);
            assert_eq!(lab.count(SiteLabel::Boundary), s.max_period());
            assert_eq!(lab.count(SiteLabel::Ground(0)), m - s.max_period());
            assert!(lab.volume_of(SiteLabel::Boundary) <= s.max_period() as f64 / m as f64);
        }
    }

    #[test]
    fn classify_defect_enumeration() {
        let s = raw();
        let m = 40;
        for pos in [5usize, 12, 20, 33] {
            let x = antiferro_chain(AntiferroVariant::Raw, m, &[pos]).unwrap();
            let lab = classify_lattice(&x, &s, None).unwrap();
            let g: Vec<f64> = x.gradients().iter().map(|g| g[(0, 0)]).collect();
            for j in 0..m {
                let expect = if j + 2 >= m {
                    SiteLabel::Boundary
                } else if (0..3).all(|k| g[j + k] == if (j + k) % 2 == 0 { 1.0 } else { -1.0 }) {
                    SiteLabel::Ground(0)
                } else if (0..3).all(|k| g[j + k] == if (j + k) % 2 == 0 { -1.0 } else { 1.0 }) {
                    SiteLabel::Ground(1)
                } else {
                    SiteLabel::Bad
                };
                assert_eq!(lab.label(j), expect, "site {j}");
            }
            let bad: Vec<usize> = (0..m).filter(|&j| lab.label(j) == SiteLabel::Bad).collect();
            assert_eq!(bad, vec![pos - 2, pos - 1]);
            assert_eq!(lab.label(0), SiteLabel::Ground(0));
            assert_eq!(lab.label(m - 3), SiteLabel::Ground(1));
        }
    }

    #[test]
    fn averaged_field_near_defect() {
        let s = remapped();
        let x = antiferro_chain(AntiferroVariant::Remapped, 32, &[10]).unwrap();
        let avg = averaged_gradient_field(&x, &s, 0).unwrap();
        assert!(avg[31].is_none());
        for (j, a) in avg.iter().enumerate().take(31) {
            let v = a.as_ref().unwrap()[(0, 0)];
            if j == 9 {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 1.5, "site {j}");
            }
        }
        assert!(matches!(averaged_gradient_field(&x, &s, 7), Err(Error::Input(_))));
    }

    #[test]
    fn averaging_idempotent_on_ground_states() {
        let s = synthetic_system();
        let x = s.ground_states()[2].realize(8, &[8, 8], &Mat::identity(2, 2), &[0.0, 0.0]).unwrap();
        let once = averaged_gradient_field(&x, &s, 2).unwrap();
        let field: Vec<Mat> = once.iter().map(|a| a.clone().unwrap_or_else(|| s.averaged_gradients()[2].clone())).collect();
        let y = LatticeDeformation::from_gradients(8, vec![8, 8], field.clone()).unwrap();
        let twice = averaged_gradient_field(&y, &s, 2).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            if let (Some(a), Some(b)) = (a, b) {
                assert_eq!(a, b);
                assert_eq!(a, &s.averaged_gradients()[2]);
            }
        }
    }

    #[test]
    fn synthetic_system_properties() {
        let s = synthetic_system();
        assert_eq!(s.ground_states().len(), 4);
        assert_eq!(s.max_period(), 2);
        assert_eq!(s.enlarged_window_sites(), 36);
        assert!((s.separation() - 2.0 * SYNTHETIC_OSCILLATION).abs() < 1e-9);
        for (l, z) in s.ground_states().iter().enumerate() {
            let r = linalg::rotation2(0.3 + l as f64);
            let x = z.realize(8, &[8, 8], &r, &[0.25, -1.0]).unwrap();
            let h = evaluate_hamiltonian(&x, &s).unwrap();
            assert!(h.total < 1e-20, "{}", h.total);
            let lab = classify_lattice(&x, &s, None).unwrap();
            let interior = lab.count(SiteLabel::Ground(l));
            assert_eq!(interior, 36);
            assert_eq!(lab.count(SiteLabel::Bad), 0);
            let avg = averaged_gradient_field(&x, &s, l).unwrap();
            let ru = &r * z.mean();
            assert!(avg.iter().flatten().all(|a| (a - &ru).amax() < 1e-12));
            assert!(linalg::is_rotation(&lab.rotation(0).unwrap(), 1e-12));
        }
    }

    #[test]
    fn non_gradient_pattern_rejected() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 2, &[1.0, -0.1, 0.0, 1.0]);
        let z = GroundState::new(vec![2, 1], vec![a, b]).unwrap();
        assert!(matches!(z.realize(4, &[4, 4], &Mat::identity(2, 2), &[0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn h2_sampled_synthetic() {
        let rep = verify_h2(&synthetic_system(), 400, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert!(!rep.exhaustive);
        assert!(rep.passed, "{:?}", rep.constant);
        assert!(rep.constant.unwrap() > 0.0);
    }

    /// Two planar phases glued along `x₀ = m/2`.
    fn glued_planar(m: usize) -> LatticeDeformation {
        let s = synthetic_system();
        let (z1, z3) = (s.ground_states()[0].clone(), s.ground_states()[2].clone());
        LatticeDeformation::from_map(m, vec![m, m], move |c| {
            let mut x0 = 0.0;
            for k in 0..c[0] {
                let z = if k < m / 2 { &z1 } else { &z3 };
                x0 += z.gradient_at(&[k as i64, 0])[(0, 0)];
            }
            vec![x0, c[1] as f64]
        })
        .unwrap()
    }

    #[test]
    fn planar_two_phase_partition() {
        let s = synthetic_system();
        let sweep: Vec<LatticeDeformation> = [8usize, 16, 32].iter().map(|&m| glued_planar(m)).collect();
        let rep = lattice_partition_diagnostics(&sweep, &s, &Default::default()).unwrap();
        for r in &rep.rows {
            assert_eq!(r.components.len(), 2);
            assert!(r.components.iter().all(|c| c.residual < 1e-12));
            assert!((r.interface_perimeter - (r.m - 2) as f64 / r.m as f64).abs() < 1e-12);
            let cx: Vec<f64> = r.components.iter().map(|c| c.centroid[0]).collect();
            assert!(cx[0] < 0.5 && cx[1] > 0.5);
        }
    }

    #[test]
    fn k_interface_sweep() {
        let s = raw();
        for k in 1..=4usize {
            let sweep: Vec<LatticeDeformation> =
                [64usize, 256, 1024].iter().map(|&m| k_interface_chain(AntiferroVariant::Raw, m, k).unwrap()).collect();
            let rep = lattice_partition_diagnostics(&sweep, &s, &Default::default()).unwrap();
            assert_eq!(rep.component_counts, vec![k + 1; 3]);
            for r in &rep.rows {
                assert_eq!(r.interface_perimeter, k as f64);
                assert_eq!(r.bad_sites, 2 * k);
                assert_eq!(r.energy_constant, 2.0 * k as f64);
                assert!(r.components.iter().all(|c| c.residual == 0.0));
                for (t, c) in r.components.iter().enumerate() {
                    assert_eq!(c.ground_state, t % 2);
                }
            }
            assert!((rep.boundary_volume_slope.unwrap() + 1.0).abs() < 1e-12);
            assert!((rep.bad_volume_slope.unwrap() + 1.0).abs() < 1e-12);
            let first: Vec<f64> = rep.rows[0].components.iter().map(|c| c.centroid[0]).collect();
            let last: Vec<f64> = rep.rows[2].components.iter().map(|c| c.centroid[0]).collect();
            for (a, b) in first.iter().zip(&last) {
                assert!((a - b).abs() < 4.0 / 64.0);
            }
        }
    }

    #[test]
    fn ground_sweep_single_component() {
        let s = remapped();
        let sweep: Vec<LatticeDeformation> =
            [32usize, 64, 128].iter().map(|&m| antiferro_chain(AntiferroVariant::Remapped, m, &[]).unwrap()).collect();
        let rep = lattice_partition_diagnostics(&sweep, &s, &Default::default()).unwrap();
        assert_eq!(rep.component_counts, vec![1, 1, 1]);
        assert!(rep.bad_volume_slope.is_none());
        for r in &rep.rows {
            assert_eq!(r.boundary_volume, 2.0 / r.m as f64);
            assert_eq!(r.components[0].residual, 0.0);
            assert_eq!(r.interface_perimeter, 0.0);
        }
    }

    #[test]
    fn energy_bound_rejects_sweep() {
        let s = raw();
        let sweep: Vec<LatticeDeformation> = [16usize, 32, 64]
            .iter()
            .map(|&m| {
                let defects: Vec<usize> = (1..m).step_by(4).collect();
                antiferro_chain(AntiferroVariant::Raw, m, &defects).unwrap()
            })
            .collect();
        let opts = LatticeDiagnosticsOptions { energy_constant: Some(10.0), threshold: None };
        match lattice_partition_diagnostics(&sweep, &s, &opts) {
            Err(Error::EnergyBound(msg)) => assert!(msg.contains("m=64")),
            other => panic!("expected energy-bound error, got {other:?}"),
        }
        let empty: Vec<LatticeDeformation> = vec![];
        assert!(lattice_partition_diagnostics(&empty, &s, &opts).is_err());
    }

    #[test]
    fn json_roundtrip() {
        for s in [raw(), remapped(), synthetic_system()] {
            let text = serde_json::to_string(&s.to_doc().unwrap()).unwrap();
            let back = LatticeSystem::from_json_str(&text).unwrap();
            assert_eq!(back.separation(), s.separation());
            assert_eq!(back.window(), s.window());
            assert_eq!(back.enlarged_window(), s.enlarged_window());
        }
        let table = raw().with_density(LatticeDensity::tabulate(&[-1.0, 0.0, 1.0], 2, |p| p[0] * p[1] + 1.0)).unwrap();
        let back = LatticeSystem::from_json_str(&serde_json::to_string(&table.to_doc().unwrap()).unwrap()).unwrap();
        assert!(matches!(back.density(), LatticeDensity::Table { .. }));
        assert!(LatticeSystem::from_json_str(r#"{"dim":1,"window":[[0],[1]],"density":{"builtin":"nope"},"ground_states":[],"exponent":2}"#).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let x = glued_planar(6);
        let mut buf = Vec::new();
        x.write_csv(&mut buf).unwrap();
        let y = LatticeDeformation::read_csv(6, buf.as_slice()).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.gradients(), x.gradients());
        let c = antiferro_chain(AntiferroVariant::Raw, 9, &[4]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let d = LatticeDeformation::read_csv(9, buf.as_slice()).unwrap();
        assert_eq!(d.values(), c.values());
    }

    #[test]
    fn averaging_defect_is_order_one_over_m() {
        let s = synthetic_system();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in [8usize, 16, 32] {
            let x = LatticeDeformation::from_map(m, vec![m, m], |c| {
                vec![(c[0] as f64 * 1.3).sin() + c[0] as f64, (c[1] as f64 * 0.7).cos() + c[1] as f64]
            })
            .unwrap();
            let gmax = x.gradients().iter().map(|g| g.norm()).fold(0.0, f64::max);
            let defect = averaging_defect(&x, &s, 0).unwrap();
            assert!(defect * m as f64 <= 4.0 * gmax, "m={m}: {defect}");
            let chain: Vec<f64> = (0..m).map(|_| [-1.0, 0.0, 1.0][rng.random_range(0..3)]).collect();
            let c = LatticeDeformation::chain(m, &chain).unwrap();
            assert!(averaging_defect(&c, &raw(), 0).unwrap() * m as f64 <= 2.0);
        }
    }

    fn chain_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 1.0]), 8..80)
    }

    fn no_direct_contact(lab: &LatticeLabeling) -> bool {
        lab.neighbour_pairs().all(|(i, j)| match (lab.label(i), lab.label(j)) {
            (SiteLabel::Ground(a), SiteLabel::Ground(b)) => a == b,
            _ => true,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn window_sum_is_exact(g in chain_strategy()) {
            let x = LatticeDeformation::chain(g.len(), &g).unwrap();
            let h = evaluate_hamiltonian(&x, &raw()).unwrap();
            prop_assert_eq!(h.total, h.per_site.iter().sum::<f64>());
        }

        #[test]
        fn translation_invariance(g in chain_strategy(), b in -64i32..64) {
            let x = LatticeDeformation::chain(g.len(), &g).unwrap();
            prop_assert_eq!(x.check_cache(), Some(true));
            let y = x.translated(&[b as f64 / 8.0]).unwrap();
            prop_assert_eq!(y.check_cache(), Some(true));
            let s = raw();
            prop_assert_eq!(evaluate_hamiltonian(&x, &s).unwrap().total, evaluate_hamiltonian(&y, &s).unwrap().total);
        }

        #[test]
        fn planar_translation_invariance(v in prop::collection::vec(-32i32..32, 50), b0 in -16i32..16, b1 in -16i32..16) {
            let x = LatticeDeformation::from_values(4, vec![4, 4], v.chunks(2).map(|c| vec![c[0] as f64 / 4.0, c[1] as f64 / 4.0]).collect()).unwrap();
            let y = x.translated(&[b0 as f64 / 8.0, b1 as f64 / 8.0]).unwrap();
            prop_assert_eq!(x.gradients(), y.gradients());
            let s = synthetic_system();
            prop_assert_eq!(evaluate_hamiltonian(&x, &s).unwrap().total, evaluate_hamiltonian(&y, &s).unwrap().total);
        }

        #[test]
        fn separated_labels(g in chain_strategy()) {
            let x = LatticeDeformation::chain(g.len(), &g).unwrap();
            let lab = classify_lattice(&x, &raw(), None).unwrap();
            prop_assert!(no_direct_contact(&lab));
        }

        #[test]
        fn zero_energy_windows_are_ground(g in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 1.0]), 6)) {
            let s = raw();
            let x = LatticeDeformation::chain(6, &g).unwrap();
            if evaluate_hamiltonian(&x, &s).unwrap().total == 0.0 {
                let alt = (0..6).all(|k| g[k] == -g[(k + 1) % 6] && g[k] != 0.0);
                prop_assert!(alt);
            }
        }

        #[test]
        fn counting_bound(k in 0usize..12, zeros in prop::collection::vec(1usize..200, 0..6), m in 96usize..200) {
            let s = raw();
            let defects: Vec<usize> = interface_positions(m, k);
            let mut x = antiferro_chain(AntiferroVariant::Raw, m, &defects).unwrap();
            let mut g: Vec<f64> = x.gradients().iter().map(|g| g[(0, 0)]).collect();
            for z in zeros { g[z % m] = 0.0; }
            x = LatticeDeformation::chain(m, &g).unwrap();
            let h = evaluate_hamiltonian(&x, &s).unwrap().total;
            let lab = classify_lattice(&x, &s, None).unwrap();
            let rep = verify_h2(&s, 1 << 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let c = rep.constant.unwrap();
            let t = lab.threshold();
            let span = (s.enlarged_window().1[0] - s.enlarged_window().0[0]) as usize;
            let interior_bad = (0..m).filter(|&j| lab.label(j) == SiteLabel::Bad && j + span < m).count();
            let bound = s.enlarged_window_sites() as f64 * h * m as f64 / (c * t.powf(s.exponent()));
            prop_assert!(interior_bad as f64 <= bound);
            // Every BAD site's box carries energy at least one unit on this alphabet.
            prop_assert!(interior_bad <= s.enlarged_window_sites() * (h * m as f64) as usize);
        }

        #[test]
        fn planar_labels_separated(seed in 0u64..1000) {
            let s = synthetic_system();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 8;
            let base = glued_planar(m);
            let th = rng.random_range(0.0..1.0);
            let x = base.rotated(&linalg::rotation2(th)).unwrap();
            let g: Vec<Mat> = x.gradients().iter().map(|g| {
                if rng.random_bool(0.2) { g + Mat::from_fn(2, 2, |_, _| 0.003 * rng.random_range(-1.0..1.0)) } else { g.clone() }
            }).collect();
            let y = LatticeDeformation::from_gradients(m, vec![m, m], g).unwrap();
            let lab = classify_lattice(&y, &s, None).unwrap();
            prop_assert!(no_direct_contact(&lab));
        }
    }
}
