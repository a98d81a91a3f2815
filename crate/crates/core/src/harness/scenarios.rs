use std::f64::consts::{PI, TAU};
use std::fs;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

use super::config::{LaminateFrame, LatticeSource, WellSource};
use super::{Context, Gate, RunOutcome, Scenario};
use crate::energy::{build_laminate, evaluate_energy, random_rotation, Density, LaminateSpec, PWAffineField};
use crate::error::{Error, Result};
use crate::lattice::{
    antiferro_chain, antiferro_system, classify_lattice, evaluate_hamiltonian, k_interface_chain,
    lattice_partition_diagnostics, synthetic_system, verify_h2, AntiferroVariant, LatticeDeformation,
    LatticeDiagnosticsOptions, LatticeSweepReport, LatticeSystem,
};
use crate::linalg::{self, Mat, Vector};
use crate::mesh::{check_incompatibility, find_admissible_rotation, BoxDomain, SimplicialMesh};
use crate::rigidity::{
    build_reduced_field, bv_structure_check, curl_bound_constant, curl_total_variation, rigidity_ratio_with,
    IncompatibleField,
};
use crate::scaling::{default_tolerance, loglog_fit, ScalingReport};
use crate::spin::{
    classify, classify_with_threshold, count_bad_cells, counting_bound_holds, discrete_perimeter, extract_partition,
    verify_spin_lemma, Label, PhaseLabeling,
};
use crate::wellalg::{reference_two_well, DbarOptions, WellSet};

fn outcome(scenario: Scenario) -> RunOutcome {
    RunOutcome {
        scenario,
        gates: Vec::new(),
        results: json!({}),
        tables: Vec::new(),
        digest: Vec::new(),
        dir: None,
    }
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Resource(e.to_string()))
}

fn scaling_table(reports: &[ScalingReport]) -> Result<Vec<u8>> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut rows = Vec::new();
    for r in reports {
        for (m, v) in r.m.iter().zip(&r.values) {
            rows.push(vec![
                r.quantity.clone(),
                m.to_string(),
                v.to_string(),
                opt(r.slope),
                opt(r.intercept),
                r.expected.to_string(),
                r.tolerance.to_string(),
                r.pass.to_string(),
            ]);
        }
    }
    csv_table(&["quantity", "m", "value", "slope", "intercept", "expected", "tolerance", "pass"], &rows)
}

fn slope_line(r: &ScalingReport) -> String {
    match r.slope {
        Some(s) => format!("{}: slope {s:.4} (expected {} ± {})", r.quantity, r.expected, r.tolerance),
        None => format!("{}: no fit (nonpositive values)", r.quantity),
    }
}

fn slope_gate(r: &ScalingReport) -> Gate {
    Gate::new(&format!("slope:{}", r.quantity), r.pass, slope_line(r))
}

fn spread(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(0.0, f64::max);
    if lo > 0.0 {
        hi / lo
    } else if hi == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

fn load_wells(ctx: &Context) -> Result<WellSet> {
    let mut ws = match &ctx.cfg.wellset {
        WellSource::Named(name) if name == "reference" => reference_two_well(),
        WellSource::Named(path) => WellSet::from_json_str(&fs::read_to_string(ctx.resolve(path))?)?,
        WellSource::Inline(doc) => WellSet::from_doc(doc)?,
    };
    prepare(&mut ws, ctx.cfg.delta0)?;
    Ok(ws)
}

fn prepare(ws: &mut WellSet, delta0: f64) -> Result<()> {
    ws.solve_connections()?;
    ws.compute_dbar(delta0, &DbarOptions::default())?;
    Ok(())
}

fn unit_mesh(m: usize, rotation: &Mat) -> Result<Arc<SimplicialMesh>> {
    Ok(Arc::new(SimplicialMesh::build_kuhn(2, m, &BoxDomain::unit(2), rotation, None)?))
}

fn threshold_for(ctx: &Context, ws: &WellSet) -> Result<f64> {
    match ctx.cfg.thresholds.spin {
        Some(t) => Ok(t),
        None => ws
            .c0()
            .map(|c| c / 100.0)
            .ok_or_else(|| Error::Config("classification threshold needs c0".into())),
    }
}

fn labeling(ctx: &Context, u: &PWAffineField, ws: &WellSet) -> Result<PhaseLabeling> {
    match ctx.cfg.thresholds.spin {
        Some(t) => classify_with_threshold(u, ws, t),
        None => classify(u, ws),
    }
}

fn mesh_gate(mesh: &SimplicialMesh, ws: &WellSet, ctx: &Context) -> Result<Gate> {
    let rep = check_incompatibility(mesh, ws, ctx.cfg.delta0);
    let detail = format!(
        "worst |b·b_ij| = {:.6}, limit {:.6}, {} offending pairs",
        rep.worst_alignment,
        1.0 - ctx.cfg.delta0,
        rep.offending.len()
    );
    if !rep.ok && !ctx.opts.force {
        let report = serde_json::to_string(&rep)?;
        return Err(Error::IncompatibleMesh(format!("{detail}; report {report}")));
    }
    Ok(Gate::new("mesh-incompatibility", rep.ok, detail))
}

pub(crate) fn wellset_analysis(ctx: &Context) -> Result<RunOutcome> {
    let mut out = outcome(Scenario::WellsetAnalysis);
    let ws = load_wells(ctx)?;
    let conns = ws.connections();
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for c in conns {
        let r = c.residual(&ws.wells()[c.i], &ws.wells()[c.j]);
        worst = worst.max(r);
        rows.push(vec![
            c.i.to_string(),
            c.j.to_string(),
            c.theta.to_string(),
            c.a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
            c.b.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
            r.to_string(),
            c.double_root.to_string(),
        ]);
    }
    out.tables.push((
        "connections".into(),
        csv_table(&["i", "j", "theta", "a", "b", "residual", "double_root"], &rows)?,
    ));
    out.gates.push(Gate::new(
        "connection-residuals",
        worst <= crate::wellalg::RESIDUAL_TOL,
        format!("{} connections, max residual {worst:.3e}", conns.len()),
    ));

    // Well distances against a dense rotation grid.
    let grid = 1_000_000usize;
    let mut pairs = Vec::new();
    let mut dist_ok = true;
    for i in 0..ws.len() {
        for j in i + 1..ws.len() {
            let d = ws.well_distance(i, j)?;
            if ws.dim() == 2 {
                let (a, b) = (&ws.wells()[i], &ws.wells()[j]);
                let brute = (0..grid)
                    .into_par_iter()
                    .map(|k| (a - linalg::rotation2(TAU * k as f64 / grid as f64) * b).norm())
                    .reduce(|| f64::INFINITY, f64::min);
                dist_ok &= (d - brute).abs() <= 1e-6;
                pairs.push(json!({"i": i, "j": j, "distance": d, "grid": brute}));
            } else {
                pairs.push(json!({"i": i, "j": j, "distance": d}));
            }
        }
    }
    if ws.dim() == 2 {
        out.gates.push(Gate::new("well-distance-grid", dist_ok, format!("{grid}-point rotation grid, tolerance 1e-6")));
    }

    let normals: Vec<Vec<f64>> = ws.twin_normals().iter().map(|b| b.iter().copied().collect()).collect();
    let rotation = (ws.dim() == 2)
        .then(|| find_admissible_rotation(&ws, ctx.cfg.delta0, ctx.cfg.laminate.rotation_grid))
        .transpose()?;
    let c0 = ws.c0();
    let mut summary = vec![
        vec!["d".to_string(), ws.separation_d().to_string()],
        vec!["dbar".to_string(), ws.incompat_dbar().map(|v| v.to_string()).unwrap_or_default()],
        vec!["c0".to_string(), c0.map(|v| v.to_string()).unwrap_or_default()],
        vec!["connections".to_string(), conns.len().to_string()],
    ];
    if let Some(r) = &rotation {
        summary.push(vec!["admissible_angle".into(), r.angle.to_string()]);
        summary.push(vec!["admissible_margin".into(), r.margin.to_string()]);
    }
    out.tables.push(("wellset".into(), csv_table(&["quantity", "value"], &summary)?));
    out.digest.push(format!("wells: {} (n = {})", ws.len(), ws.dim()));
    out.digest.push(format!("d = {:.6}", ws.separation_d()));
    if let (Some(db), Some(c)) = (ws.incompat_dbar(), c0) {
        out.digest.push(format!("dbar = {db:.6}, c0 = {c:.6}"));
    }
    out.digest.push(format!("rank-one connections: {}", conns.len()));
    if let Some(r) = &rotation {
        out.digest.push(format!("admissible lattice rotation {:.4} rad, margin {:.4}", r.angle, r.margin));
    }
    out.results = json!({
        "d": ws.separation_d(),
        "dbar": ws.incompat_dbar().filter(|v| v.is_finite()),
        "c0": c0.filter(|v| v.is_finite()),
        "delta0": ctx.cfg.delta0,
        "wellset": ws.to_doc(),
        "twin_normals": normals,
        "distances": pairs,
        "admissible_rotation": rotation,
    });
    Ok(out)
}

struct LaminateRow {
    m: usize,
    energy: f64,
    bad_cells: usize,
    bad_volume: f64,
    perimeters: Vec<f64>,
    interface_perimeters: Vec<f64>,
    components: Vec<(usize, Vec<f64>, f64, f64)>,
    counting_ok: bool,
    spin_violations: usize,
    bv_ratios: Vec<f64>,
    dv: Vec<f64>,
    curl: Vec<f64>,
}

/// Wells and mesh rotation for the laminate sweep per the configured frame.
fn laminate_frame(ctx: &Context, base: &WellSet) -> Result<(WellSet, Mat, f64)> {
    let rot = find_admissible_rotation(base, ctx.cfg.delta0, ctx.cfg.laminate.rotation_grid)?;
    match ctx.cfg.laminate.frame {
        LaminateFrame::Conjugate => {
            let r = linalg::rotation2(-rot.angle);
            let wells = base.wells().iter().map(|u| &r * u * r.transpose()).collect();
            let mut ws = WellSet::new(wells)?;
            prepare(&mut ws, ctx.cfg.delta0)?;
            Ok((ws, Mat::identity(2, 2), rot.angle))
        }
        LaminateFrame::RotateMesh => Ok((base.clone(), rot.rotation, rot.angle)),
        LaminateFrame::Identity => Ok((base.clone(), Mat::identity(2, 2), 0.0)),
    }
}

pub(crate) fn laminate_sweep(ctx: &Context) -> Result<RunOutcome> {
    let mut out = outcome(Scenario::LaminateSweep);
    let base = load_wells(ctx)?;
    if base.dim() != 2 {
        return Err(Error::Unsupported("the laminate sweep is two-dimensional".into()));
    }
    let (ws, lattice_rot, angle) = laminate_frame(ctx, &base)?;
    let params = &ctx.cfg.laminate;
    let conn = ws
        .connections()
        .get(params.connection)
        .cloned()
        .ok_or_else(|| Error::Config(format!("laminate.connection {} out of range", params.connection)))?;
    let spec = LaminateSpec { fraction: params.fraction, period: params.period, offset: params.offset };
    let m_list = ctx.cfg.m_list_for(Scenario::LaminateSweep, 2);
    let density = Density::Quadratic { c1: ctx.cfg.c1 };
    let thr = threshold_for(ctx, &ws)?;
    let k = ws.len();
    let mut rows = Vec::new();
    let mut mesh_gates = Vec::new();
    for &m in &m_list {
        let mesh = unit_mesh(m, &lattice_rot)?;
        mesh_gates.push(mesh_gate(&mesh, &ws, ctx)?);
        let u = build_laminate(mesh.clone(), &ws, &conn, &spec)?;
        let u = u.with_smooth_perturbation(params.perturbation / (m as f64).sqrt())?;
        let energy = evaluate_energy(&u, &ws, &density)?.total;
        let lab = labeling(ctx, &u, &ws)?;
        let bad = count_bad_cells(&lab);
        let part = extract_partition(&u, &lab, &ws)?;
        let mut perimeters = Vec::new();
        let mut interface = Vec::new();
        let mut bv_ratios = Vec::new();
        let mut dv = Vec::new();
        let mut curl = Vec::new();
        for j in 0..k {
            let p = discrete_perimeter(&lab, Label::Well(j))?;
            perimeters.push(p.total);
            interface.push(p.interface);
            let a = build_reduced_field(&u, &lab, j, &ws)?;
            let bv = bv_structure_check(&a);
            bv_ratios.push(bv.ratio);
            dv.push(bv.dv_total);
            curl.push(bv.curl_total);
        }
        let mut comps: Vec<(usize, Vec<f64>, f64, f64)> =
            part.components.iter().map(|c| (c.well, c.centroid.clone(), c.volume, c.residual)).collect();
        comps.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        rows.push(LaminateRow {
            m,
            energy,
            bad_cells: bad,
            bad_volume: lab.bad_volume(),
            perimeters,
            interface_perimeters: interface,
            components: comps,
            counting_ok: counting_bound_holds(bad, thr, ctx.cfg.c1, mesh.min_cell_volume(), energy),
            spin_violations: verify_spin_lemma(&u, &lab, &ws).violations.len(),
            bv_ratios,
            dv,
            curl,
        });
    }
    let tol = ctx.cfg.thresholds.slope_tolerance.unwrap_or_else(|| default_tolerance(&m_list));
    let ptol = ctx.cfg.thresholds.perimeter_tolerance;
    let col = |f: &dyn Fn(&LaminateRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let mut reports = vec![
        ScalingReport::new("energy", &m_list, &col(&|r| r.energy), -1.0, tol),
        ScalingReport::new("bad_cells", &m_list, &col(&|r| r.bad_cells as f64), 1.0, tol),
        ScalingReport::new("bad_volume", &m_list, &col(&|r| r.bad_volume), -1.0, tol),
    ];
    for j in 0..k {
        reports.push(ScalingReport::new(&format!("perimeter_{j}"), &m_list, &col(&|r| r.perimeters[j]), 0.0, ptol));
    }
    out.gates.extend(mesh_gates.into_iter().take(1));
    out.gates.extend(reports.iter().map(slope_gate));

    let counts: Vec<usize> = rows.iter().map(|r| r.components.len()).collect();
    let constant = counts.iter().all(|c| *c == counts[0]) && counts[0] > 0;
    out.gates.push(Gate::new("component-count", constant, format!("components per m: {counts:?}")));
    let decreasing = constant
        && (0..counts[0]).all(|c| {
            rows.windows(2).all(|w| {
                let (a, b) = (&w[0].components[c], &w[1].components[c]);
                a.0 == b.0 && b.3 < a.3
            })
        });
    out.gates.push(Gate::new(
        "residuals-decreasing",
        decreasing,
        "per-component fitted-rotation residuals strictly decrease in m",
    ));
    let counting = rows.iter().all(|r| r.counting_ok);
    out.gates.push(Gate::new("counting-bound", counting, "bad·thr²·c1·min|T| ≤ E at every m"));
    let violations: usize = rows.iter().map(|r| r.spin_violations).sum();
    out.gates.push(Gate::new("spin-lemma", violations == 0, format!("{violations} violations")));
    let factor = ctx.cfg.thresholds.stability_factor;
    let mut bv_ok = true;
    let mut bv_detail = Vec::new();
    for j in 0..k {
        let ratios: Vec<f64> = rows.iter().map(|r| r.bv_ratios[j]).collect();
        let s = spread(&ratios);
        bv_ok &= ratios.iter().all(|r| r.is_finite()) && s <= factor;
        bv_detail.push(format!("well {j}: max/min {s:.3}"));
    }
    out.gates.push(Gate::new("bv-kappa-stable", bv_ok, bv_detail.join(", ")));

    let mut lam = Vec::new();
    let mut comp_rows = Vec::new();
    for r in &rows {
        let mut line = vec![
            r.m.to_string(),
            r.energy.to_string(),
            r.bad_cells.to_string(),
            r.bad_volume.to_string(),
            r.components.len().to_string(),
            r.counting_ok.to_string(),
            r.spin_violations.to_string(),
        ];
        for j in 0..k {
            line.extend([
                r.perimeters[j].to_string(),
                r.interface_perimeters[j].to_string(),
                r.dv[j].to_string(),
                r.curl[j].to_string(),
                r.bv_ratios[j].to_string(),
            ]);
        }
        lam.push(line);
        for (c, (well, centroid, volume, residual)) in r.components.iter().enumerate() {
            comp_rows.push(vec![
                r.m.to_string(),
                c.to_string(),
                well.to_string(),
                centroid[0].to_string(),
                centroid[1].to_string(),
                volume.to_string(),
                residual.to_string(),
            ]);
        }
    }
    let mut header: Vec<String> = ["m", "energy", "bad_cells", "bad_volume", "components", "counting_ok", "spin_violations"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for j in 0..k {
        for q in ["perimeter", "interface", "dv", "curl", "bv_ratio"] {
            header.push(format!("{q}_{j}"));
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.tables.push(("laminate".into(), csv_table(&header, &lam)?));
    out.tables.push((
        "components".into(),
        csv_table(&["m", "component", "well", "centroid_x", "centroid_y", "volume", "residual"], &comp_rows)?,
    ));
    out.tables.push(("scaling".into(), scaling_table(&reports)?));
    out.digest.push(format!("frame {:?}, admissible angle {angle:.6} rad", params.frame));
    out.digest.push(format!("m = {m_list:?}, threshold {thr:.6}"));
    out.digest.extend(reports.iter().map(slope_line));
    out.results = json!({
        "m_list": m_list,
        "threshold": thr,
        "admissible_angle": angle,
        "scaling": reports,
        "component_counts": counts,
    });
    Ok(out)
}

#[derive(Clone, Copy)]
enum FieldKind {
    Laminate,
    Affine,
}

struct FieldResult {
    m: usize,
    kind: FieldKind,
    energy: f64,
    bad: usize,
    pairs: usize,
    violations: usize,
    counting_ok: bool,
    continuous: bool,
}

fn random_spin_field<R: Rng>(
    mesh: &Arc<SimplicialMesh>,
    ws: &WellSet,
    rng: &mut R,
) -> Result<(FieldKind, PWAffineField)> {
    let m = mesh.scale() as f64;
    let u = if rng.random_bool(0.7) {
        let conn = ws.connections()[rng.random_range(0..ws.connections().len())].clone();
        let period = rng.random_range(4.0 / m..1.0);
        let spec = LaminateSpec {
            fraction: rng.random_range(0.2..0.8),
            period,
            offset: rng.random_range(0.0..period),
        };
        (FieldKind::Laminate, build_laminate(mesh.clone(), ws, &conn, &spec)?)
    } else {
        let q = random_rotation(2, rng);
        let j = rng.random_range(0..ws.len());
        (FieldKind::Affine, PWAffineField::affine(mesh.clone(), &(q * &ws.wells()[j]), &[0.0, 0.0])?)
    };
    let (kind, u) = u;
    let sigma = 10f64.powf(rng.random_range(-4.0..-1.5)) / m;
    let values = u
        .vertex_values()
        .expect("constructed fields carry vertex values")
        .iter()
        .map(|y| y.iter().map(|v| v + rng.random_range(-sigma..=sigma)).collect())
        .collect();
    let u = PWAffineField::from_vertex_values(mesh.clone(), values)?;
    let q = random_rotation(2, rng);
    let b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    Ok((kind, u.rigid_image(&q, &b)?))
}

pub(crate) fn spin_lemma_suite(ctx: &Context) -> Result<RunOutcome> {
    let mut out = outcome(Scenario::SpinLemmaSuite);
    let ws = load_wells(ctx)?;
    if ws.dim() != 2 {
        return Err(Error::Unsupported("the spin lemma suite is two-dimensional".into()));
    }
    let m_list = ctx.cfg.m_list_for(Scenario::SpinLemmaSuite, 2);
    let rot = find_admissible_rotation(&ws, ctx.cfg.delta0, ctx.cfg.laminate.rotation_grid)?;
    let meshes = m_list.iter().map(|&m| unit_mesh(m, &rot.rotation)).collect::<Result<Vec<_>>>()?;
    let mut mesh_ok = true;
    for mesh in &meshes {
        mesh_ok &= mesh_gate(mesh, &ws, ctx)?.pass;
    }
    let density = Density::Quadratic { c1: ctx.cfg.c1 };
    let thr = threshold_for(ctx, &ws)?;
    let n = ctx.cfg.spin_suite.fields;
    let results: Vec<FieldResult> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ctx.rng(&format!("spin-field-{i}"));
            let mesh = &meshes[i % meshes.len()];
            let (kind, u) = random_spin_field(mesh, &ws, &mut rng)?;
            let energy = evaluate_energy(&u, &ws, &density)?.total;
            let lab = labeling(ctx, &u, &ws)?;
            let check = verify_spin_lemma(&u, &lab, &ws);
            let bad = count_bad_cells(&lab);
            Ok(FieldResult {
                m: mesh.scale(),
                kind,
                energy,
                bad,
                pairs: check.pairs_checked,
                violations: check.violations.len(),
                counting_ok: counting_bound_holds(bad, thr, ctx.cfg.c1, mesh.min_cell_volume(), energy),
                continuous: u.is_continuous(),
            })
        })
        .collect::<Result<_>>()?;

    // Adversarial: lattice aligned with a twin normal and a sharp laminate.
    let am = ctx.cfg.spin_suite.adversarial_m;
    let aligned = unit_mesh(am, &Mat::identity(2, 2))?;
    let aligned_admissible = check_incompatibility(&aligned, &ws, ctx.cfg.delta0).ok;
    let adv = ws
        .connections()
        .iter()
        .filter(|c| c.b[1] < 0.0)
        .map(|c| {
            let spec = LaminateSpec { fraction: 0.5, period: 8.0 / am as f64 / std::f64::consts::SQRT_2, offset: 0.0 };
            let u = build_laminate(aligned.clone(), &ws, c, &spec)?;
            let lab = labeling(ctx, &u, &ws)?;
            let energy = evaluate_energy(&u, &ws, &density)?.total;
            let bad = count_bad_cells(&lab);
            let v = verify_spin_lemma(&u, &lab, &ws).violations.len();
            Ok((v, counting_bound_holds(bad, thr, ctx.cfg.c1, aligned.min_cell_volume(), energy)))
        })
        .collect::<Result<Vec<_>>>()?;
    let adv_violations: usize = adv.iter().map(|a| a.0).sum();

    let violations: usize = results.iter().map(|r| r.violations).sum();
    let pairs: usize = results.iter().map(|r| r.pairs).sum();
    let hypotheses = mesh_ok && results.iter().all(|r| r.continuous);
    let counting = results.iter().all(|r| r.counting_ok) && adv.iter().all(|a| a.1);
    out.gates.push(Gate::new("hypotheses", hypotheses, "continuous fields on incompatible meshes"));
    out.gates.push(Gate::new(
        "spin-lemma",
        violations == 0 && pairs > 0,
        format!("{n} fields, {pairs} qualifying pairs, {violations} violations"),
    ));
    out.gates.push(Gate::new(
        "adversarial-violation",
        !aligned_admissible && adv_violations >= 1,
        format!("aligned mesh m = {am}: {adv_violations} violations"),
    ));
    out.gates.push(Gate::new("counting-bound", counting, "bad·thr²·c1·min|T| ≤ E on every field"));

    let rows: Vec<Vec<String>> = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                i.to_string(),
                r.m.to_string(),
                match r.kind {
                    FieldKind::Laminate => "laminate",
                    FieldKind::Affine => "affine",
                }
                .to_string(),
                r.energy.to_string(),
                r.bad.to_string(),
                r.pairs.to_string(),
                r.violations.to_string(),
                r.counting_ok.to_string(),
            ]
        })
        .collect();
    out.tables.push((
        "fields".into(),
        csv_table(&["field", "m", "kind", "energy", "bad_cells", "pairs", "violations", "counting_ok"], &rows)?,
    ));
    out.digest.push(format!("{n} random fields over m = {m_list:?}, threshold {thr:.6}"));
    out.digest.push(format!("qualifying pairs {pairs}, violations {violations}"));
    out.digest.push(format!("adversarial aligned mesh: {adv_violations} violations"));
    out.results = json!({
        "fields": n,
        "m_list": m_list,
        "threshold": thr,
        "pairs": pairs,
        "violations": violations,
        "adversarial_violations": adv_violations,
        "bad_cells_total": results.iter().map(|r| r.bad).sum::<usize>(),
    });
    Ok(out)
}

/// Piecewise-rotated near-identity field: half-plane cuts split the square into
/// regions, each with its own rotation, times `I + S(x)` with `S` smooth symmetric.
struct RandomRigidField {
    cuts: Vec<(Vector, Vector)>,
    angles: Vec<f64>,
    amplitude: f64,
    wave: [f64; 2],
    phase: [f64; 2],
}

impl RandomRigidField {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let count = rng.random_range(1..=3usize);
        let cuts = (0..count)
            .map(|_| {
                let p = Vector::from_vec(vec![rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)]);
                let phi: f64 = rng.random_range(0.0..PI);
                (p, Vector::from_vec(vec![phi.cos(), phi.sin()]))
            })
            .collect();
        let angles = (0..1usize << count).map(|_| rng.random_range(-0.5..0.5)).collect();
        Self {
            cuts,
            angles,
            amplitude: rng.random_range(0.0..0.05),
            wave: [rng.random_range(-TAU..TAU), rng.random_range(-TAU..TAU)],
            phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
        }
    }

    fn value(&self, x: &[f64]) -> Mat {
        let xv = Vector::from_column_slice(x);
        let region = self
            .cuts
            .iter()
            .enumerate()
            .fold(0usize, |acc, (k, (p, nrm))| if (&xv - p).dot(nrm) > 0.0 { acc | 1 << k } else { acc });
        let s = self.wave[0] * x[0] + self.wave[1] * x[1];
        let (a, b) = (self.amplitude * (s + self.phase[0]).cos(), self.amplitude * (s + self.phase[1]).sin());
        let sym = Mat::from_row_slice(2, 2, &[1.0 + a, b, b, 1.0 - a]);
        linalg::rotation2(self.angles[region]) * sym
    }
}

pub(crate) fn rigidity_family(ctx: &Context) -> Result<RunOutcome> {
    let mut out = outcome(Scenario::RigidityFamily);
    let params = &ctx.cfg.rigidity;
    let m_list = ctx.cfg.m_list_for(Scenario::RigidityFamily, 2);
    let id = Mat::identity(2, 2);
    let meshes = m_list.iter().map(|&m| unit_mesh(m, &id)).collect::<Result<Vec<_>>>()?;
    let fields: Vec<RandomRigidField> =
        (0..params.fields).map(|i| RandomRigidField::draw(&mut ctx.rng(&format!("rigidity-field-{i}")))).collect();

    let factor = ctx.cfg.thresholds.stability_factor;
    let mut rows = Vec::new();
    let mut max_ratios = Vec::new();
    for &p in &params.exponents {
        let endpoint = p <= 2.0;
        let mut per_m = Vec::new();
        for mesh in &meshes {
            let reports = fields
                .par_iter()
                .map(|f| rigidity_ratio_with(&IncompatibleField::from_fn(mesh.clone(), |x| f.value(x))?, p, endpoint))
                .collect::<Result<Vec<_>>>()?;
            for (i, r) in reports.iter().enumerate() {
                rows.push(vec![
                    p.to_string(),
                    mesh.scale().to_string(),
                    i.to_string(),
                    r.lhs.to_string(),
                    r.dist_term.to_string(),
                    r.curl.to_string(),
                    r.rhs.to_string(),
                    r.ratio.to_string(),
                ]);
            }
            per_m.push(reports.iter().map(|r| r.ratio).fold(0.0, f64::max));
        }
        let first = per_m[0];
        let last = *per_m.last().expect("m_list is nonempty");
        let change = last / first;
        let ok = first.is_finite() && last.is_finite() && change <= factor && change >= 1.0 / factor;
        out.gates.push(Gate::new(
            &format!("ratio-stability:p={p}"),
            ok,
            format!("max ratio per m {per_m:?}, last/first {change:.4}"),
        ));
        max_ratios.push(json!({"p": p, "m": m_list, "max_ratio": per_m}));
    }

    // Small perturbations of a rotation: the left side scales like ε^p.
    let p = params.exponents[0];
    let mesh = &meshes[0];
    let mut rng = ctx.rng("rigidity-epsilon");
    let r0 = linalg::rotation2(rng.random_range(-PI..PI));
    let dirs: Vec<Mat> = (0..mesh.num_cells())
        .map(|_| {
            let d = Mat::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let norm = d.norm();
            d / norm
        })
        .collect();
    let eps_reports = params
        .epsilons
        .iter()
        .map(|e| {
            let values = dirs.iter().map(|d| &r0 + d * *e).collect();
            rigidity_ratio_with(&IncompatibleField::new(mesh.clone(), values)?, p, p <= 2.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let lhs: Vec<f64> = eps_reports.iter().map(|r| r.lhs).collect();
    let eps_slope = loglog_fit(&params.epsilons, &lhs).map(|f| f.0);
    let eps_ok = eps_slope.is_some_and(|s| (s - p).abs() <= 0.2);
    out.gates.push(Gate::new(
        "epsilon-scaling",
        eps_ok,
        format!("lhs slope {} in ε (expected {p} ± 0.2)", eps_slope.map_or("undefined".into(), |s| format!("{s:.4}"))),
    ));

    // Curl machinery.
    let mut grad_max: f64 = 0.0;
    for (k, mesh) in meshes.iter().enumerate() {
        let mut rng = ctx.rng(&format!("rigidity-gradient-{k}"));
        for _ in 0..20 {
            let values = mesh
                .vertices()
                .iter()
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let u = PWAffineField::from_vertex_values(mesh.clone(), values)?;
            grad_max = grad_max.max(curl_total_variation(&IncompatibleField::from_gradient(&u)).total);
        }
    }
    out.gates.push(Gate::new("gradient-curl-free", grad_max <= 1e-9, format!("max curl {grad_max:.3e}")));

    let (t1, t2) = (0.3, -0.9);
    let (q1, q2) = (linalg::rotation2(t1), linalg::rotation2(t2));
    let expected = 2.0 * ((t1 - t2) / 2.0f64).sin().abs();
    let mut iface_err: f64 = 0.0;
    for mesh in &meshes {
        let a = IncompatibleField::from_fn(mesh.clone(), |x| if x[0] < 0.5 { q1.clone() } else { q2.clone() })?;
        iface_err = iface_err.max((curl_total_variation(&a).total - expected).abs());
    }
    out.gates.push(Gate::new(
        "single-interface-curl",
        iface_err <= 1e-10,
        format!("expected {expected:.12}, max error {iface_err:.3e}"),
    ));

    let mut ws = reference_two_well();
    prepare(&mut ws, ctx.cfg.delta0)?;
    let rot = find_admissible_rotation(&ws, ctx.cfg.delta0, ctx.cfg.laminate.rotation_grid)?;
    let spec = LaminateSpec { fraction: 0.5, period: 0.5, offset: 0.0 };
    let mut reduced = Vec::new();
    let mut gmax: f64 = 0.0;
    for &m in &m_list {
        let u = build_laminate(unit_mesh(m, &rot.rotation)?, &ws, &ws.connections()[0].clone(), &spec)?;
        gmax = gmax.max(u.max_gradient_norm());
        let lab = classify(&u, &ws)?;
        for j in 0..ws.len() {
            let a = build_reduced_field(&u, &lab, j, &ws)?;
            let curl = curl_total_variation(&a).total;
            let per = discrete_perimeter(&lab, Label::Well(j))?.interface;
            reduced.push((m, j, curl, per));
        }
    }
    let kappa = (0..ws.len()).map(|j| curl_bound_constant(gmax, &ws.wells()[j])).fold(0.0, f64::max);
    let reduced_ok = reduced.iter().all(|(_, _, c, p)| *c <= kappa * p);
    out.gates.push(Gate::new(
        "reduced-curl-bound",
        reduced_ok,
        format!("curl ≤ κ·perimeter with κ = {kappa:.4} on {} reduced fields", reduced.len()),
    ));

    out.tables.push((
        "rigidity".into(),
        csv_table(&["p", "m", "field", "lhs", "dist_term", "curl", "rhs", "ratio"], &rows)?,
    ));
    let eps_rows: Vec<Vec<String>> = params
        .epsilons
        .iter()
        .zip(&eps_reports)
        .map(|(e, r)| vec![e.to_string(), r.lhs.to_string(), r.rhs.to_string(), r.ratio.to_string()])
        .collect();
    out.tables.push(("epsilon".into(), csv_table(&["epsilon", "lhs", "rhs", "ratio"], &eps_rows)?));
    let red_rows: Vec<Vec<String>> = reduced
        .iter()
        .map(|(m, j, c, p)| vec![m.to_string(), j.to_string(), c.to_string(), p.to_string(), kappa.to_string()])
        .collect();
    out.tables.push(("reduced_curl".into(), csv_table(&["m", "well", "curl", "perimeter", "kappa"], &red_rows)?));
    out.digest.push(format!("{} random fields at m = {m_list:?}", params.fields));
    for r in &max_ratios {
        out.digest.push(format!("p = {}: max ratio per m {}", r["p"], r["max_ratio"]));
    }
    out.digest.push(format!("ε-scaling slope {:?}", eps_slope));
    out.results = json!({
        "m_list": m_list,
        "max_ratios": max_ratios,
        "epsilon_slope": eps_slope,
        "gradient_curl_max": grad_max,
        "single_interface_error": iface_err,
        "kappa": kappa,
    });
    Ok(out)
}

fn variant_of(name: &str) -> Result<AntiferroVariant> {
    match name {
        "raw" => Ok(AntiferroVariant::Raw),
        "remapped" => Ok(AntiferroVariant::Remapped),
        other => Err(Error::Config(format!("unknown antiferro variant `{other}`"))),
    }
}

fn lattice_options(ctx: &Context) -> LatticeDiagnosticsOptions {
    LatticeDiagnosticsOptions {
        threshold: ctx.cfg.thresholds.lattice,
        energy_constant: ctx.cfg.lattice_params.energy_constant,
    }
}

fn sweep_tables(out: &mut RunOutcome, rep: &LatticeSweepReport) -> Result<()> {
    let mut buf = Vec::new();
    rep.write_csv(&mut buf)?;
    out.tables.push(("sweep".into(), buf));
    let mut rows = Vec::new();
    for r in &rep.rows {
        for (c, comp) in r.components.iter().enumerate() {
            rows.push(vec![
                r.m.to_string(),
                c.to_string(),
                comp.ground_state.to_string(),
                comp.sites.to_string(),
                comp.volume.to_string(),
                comp.centroid.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
                comp.residual.to_string(),
            ]);
        }
    }
    out.tables.push((
        "components".into(),
        csv_table(&["m", "component", "ground_state", "sites", "volume", "centroid", "residual"], &rows)?,
    ));
    Ok(())
}

fn h2_gate(out: &mut RunOutcome, sys: &LatticeSystem, ctx: &Context) -> Result<serde_json::Value> {
    let mut rng = ctx.rng("h2");
    let h2 = verify_h2(sys, ctx.cfg.lattice_params.h2_budget, &mut rng)?;
    let c = h2.constant.unwrap_or(0.0);
    out.gates.push(Gate::new(
        "h2-lower-bound",
        h2.passed && c > 0.0 && h2.violation_count == 0,
        format!(
            "{} {} windows, c = {c}, {} zero-energy windows, {} violations",
            if h2.exhaustive { "exhaustive" } else { "sampled" },
            h2.windows_checked,
            h2.zero_energy_windows,
            h2.violation_count
        ),
    ));
    Ok(serde_json::to_value(&h2)?)
}

pub(crate) fn antiferro_sweep(ctx: &Context) -> Result<RunOutcome> {
    let mut out = outcome(Scenario::AntiferroSweep);
    let params = &ctx.cfg.lattice_params;
    let variant = variant_of(&params.variant)?;
    let sys = antiferro_system(variant);
    let m_list = ctx.cfg.m_list_for(Scenario::AntiferroSweep, 1);
    let h2 = h2_gate(&mut out, &sys, ctx)?;

    let mut ground = Vec::new();
    for &m in &m_list {
        ground.push(evaluate_hamiltonian(&antiferro_chain(variant, m, &[])?, &sys)?.total);
    }
    out.gates.push(Gate::new(
        "ground-energy-zero",
        ground.iter().all(|e| *e == 0.0),
        format!("ground-state energies {ground:?}"),
    ));
    let m0 = m_list[0];
    let defect = m0 / 2;
    let single: f64 = evaluate_hamiltonian(&antiferro_chain(variant, m0, &[defect])?, &sys)?.local.iter().sum();
    out.gates.push(Gate::new(
        "defect-window-energy",
        single == 2.0,
        format!("one defect at site {defect} of m = {m0}: window energy {single}"),
    ));

    let k = params.interfaces;
    let sweep = m_list.iter().map(|&m| k_interface_chain(variant, m, k)).collect::<Result<Vec<_>>>()?;
    let rep = lattice_partition_diagnostics(&sweep, &sys, &lattice_options(ctx))?;
    let tol = ctx.cfg.thresholds.slope_tolerance.unwrap_or_else(|| default_tolerance(&m_list));
    out.gates.push(Gate::new(
        "component-count",
        rep.component_counts.iter().all(|c| *c == k + 1),
        format!("{k} interfaces, components per m {:?}", rep.component_counts),
    ));
    let reports = vec![
        ScalingReport::new("boundary_volume", &m_list, &rep.rows.iter().map(|r| r.boundary_volume).collect::<Vec<_>>(), -1.0, tol),
        ScalingReport::new("bad_volume", &m_list, &rep.rows.iter().map(|r| r.bad_volume).collect::<Vec<_>>(), -1.0, tol),
        ScalingReport::new("energy", &m_list, &rep.rows.iter().map(|r| r.energy).collect::<Vec<_>>(), -1.0, tol),
    ];
    out.gates.extend(reports.iter().map(slope_gate));
    sweep_tables(&mut out, &rep)?;
    out.tables.push(("scaling".into(), scaling_table(&reports)?));
    out.digest.push(format!("variant {}, {k} interfaces, m = {m_list:?}", params.variant));
    out.digest.push(format!("components per m {:?}", rep.component_counts));
    out.digest.extend(reports.iter().map(slope_line));
    out.results = json!({
        "variant": params.variant,
        "interfaces": k,
        "m_list": m_list,
        "h2": h2,
        "ground_energies": ground,
        "defect_window_energy": single,
        "sweep": rep,
        "scaling": reports,
    });
    Ok(out)
}

fn load_lattice(ctx: &Context) -> Result<LatticeSystem> {
    match ctx.cfg.lattice.as_ref() {
        None => Ok(synthetic_system()),
        Some(LatticeSource::Named(name)) => match name.as_str() {
            "antiferro-raw" => Ok(antiferro_system(AntiferroVariant::Raw)),
            "antiferro-remapped" => Ok(antiferro_system(AntiferroVariant::Remapped)),
            "synthetic-planar" => Ok(synthetic_system()),
            path => LatticeSystem::from_json_str(&fs::read_to_string(ctx.resolve(path))?),
        },
        Some(LatticeSource::Inline(doc)) => LatticeSystem::from_doc(doc),
    }
}

/// Ground states laid out in consecutive slabs along the first axis.
fn striped(sys: &LatticeSystem, m: usize, states: &[usize]) -> Result<LatticeDeformation> {
    let n = sys.dim();
    if let Some(bad) = states.iter().find(|&&s| s >= sys.ground_states().len()) {
        return Err(Error::Config(format!("stripe state {bad} out of range")));
    }
    let parts = states.len();
    let shape = vec![m; n];
    let sites: usize = shape.iter().product();
    let grads = (0..sites)
        .map(|i| {
            let mut c = Vec::with_capacity(n);
            let mut rem = i;
            for _ in 0..n {
                c.push((rem % m) as i64);
                rem /= m;
            }
            let stripe = (c[0] as usize * parts / m).min(parts - 1);
            sys.ground_states()[states[stripe]].gradient_at(&c).clone()
        })
        .collect();
    LatticeDeformation::from_gradients(m, shape, grads)
}

pub(crate) fn lattice_sweep(ctx: &Context) -> Result<RunOutcome> {
    let mut out = outcome(Scenario::LatticeSweep);
    let params = &ctx.cfg.lattice_params;
    let sys = load_lattice(ctx)?;
    let h2 = h2_gate(&mut out, &sys, ctx)?;
    let (m_list, sweep) = if params.deformations.is_empty() {
        let m_list = ctx.cfg.m_list_for(Scenario::LatticeSweep, sys.dim());
        let sweep = m_list.iter().map(|&m| striped(&sys, m, &params.stripe_states)).collect::<Result<Vec<_>>>()?;
        (m_list, sweep)
    } else {
        let mut sweep = Vec::new();
        for d in &params.deformations {
            let x = LatticeDeformation::read_csv(d.m, fs::File::open(ctx.resolve(&d.path))?)?;
            if x.dim() != sys.dim() {
                return Err(Error::Input(format!("{} has dimension {}, system {}", d.path, x.dim(), sys.dim())));
            }
            sweep.push(x);
        }
        (params.deformations.iter().map(|d| d.m).collect(), sweep)
    };
    let rep = lattice_partition_diagnostics(&sweep, &sys, &lattice_options(ctx))?;
    let counts = &rep.component_counts;
    out.gates.push(Gate::new(
        "component-count",
        counts.iter().all(|c| *c == counts[0]) && counts[0] > 0,
        format!("components per m {counts:?}"),
    ));
    let tol = ctx.cfg.thresholds.slope_tolerance.unwrap_or_else(|| default_tolerance(&m_list));
    let col = |f: &dyn Fn(&crate::lattice::LatticeSweepRow) -> f64| rep.rows.iter().map(f).collect::<Vec<f64>>();
    let reports = vec![
        ScalingReport::new("boundary_volume", &m_list, &col(&|r| r.boundary_volume), -1.0, tol),
        ScalingReport::new("bad_volume", &m_list, &col(&|r| r.bad_volume), -1.0, tol),
        ScalingReport::new("energy", &m_list, &col(&|r| r.energy), -1.0, tol),
    ];
    out.gates.push(slope_gate(&reports[0]));
    for r in &reports[1..] {
        // Sweeps of exact ground states have nothing to fit.
        if r.values.iter().any(|v| *v > 0.0) {
            out.gates.push(slope_gate(r));
        }
    }
    let perims = col(&|r| r.interface_perimeter);
    let factor = ctx.cfg.thresholds.stability_factor;
    let s = spread(&perims);
    out.gates.push(Gate::new(
        "perimeter-bounded",
        s <= factor,
        format!("interface perimeter per m {perims:?}, max/min {s:.4}"),
    ));
    if let Some(first) = sweep.first() {
        let lab = classify_lattice(first, &sys, ctx.cfg.thresholds.lattice)?;
        let mut buf = Vec::new();
        lab.write_csv(&mut buf)?;
        out.tables.push(("labels".into(), buf));
    }
    sweep_tables(&mut out, &rep)?;
    out.tables.push(("scaling".into(), scaling_table(&reports)?));
    out.digest.push(format!("system {} (n = {}), m = {m_list:?}", sys.name(), sys.dim()));
    out.digest.push(format!("components per m {counts:?}"));
    out.digest.extend(reports.iter().map(slope_line));
    out.results = json!({
        "system": sys.name(),
        "m_list": m_list,
        "h2": h2,
        "sweep": rep,
        "scaling": reports,
    });
    Ok(out)
}
