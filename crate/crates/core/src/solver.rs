//! Newton-CG minimisation of the scaled objective at fixed `p`, and the
//! warm-started doubling continuation in `p`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boundary::BoundaryData;
use crate::energy::{e_inf_of, e_p_of, objective, EnergyParams, Linearization};
use crate::error::{LabError, Result};
use crate::mesh::{cell_gradient, CellField, NodalField, TriMesh};

/// Newton and line-search controls for one fixed-`p` solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveControls {
    /// Target for the relative stationarity residual.
    pub tol: f64,
    pub max_newton: usize,
    pub backtrack: f64,
    pub armijo: f64,
    /// Upper bound on the CG forcing term.
    pub cg_forcing: f64,
    pub cg_max: usize,
}

impl Default for SolveControls {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_newton: 60,
            backtrack: 0.5,
            armijo: 1e-4,
            cg_forcing: 0.5,
            cg_max: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PSchedule {
    pub p_list: Vec<f64>,
    pub controls: SolveControls,
    /// Run a regularised phase with `eps = max(e / p, eps_floor)` before the
    /// unregularised solve.
    pub regularise: bool,
    pub eps_floor: f64,
    /// Tolerance of the regularised phase.
    pub eps_tol: f64,
}

impl Default for PSchedule {
    fn default() -> Self {
        Self::doubling(1024.0)
    }
}

impl PSchedule {
    /// `2, 4, 8, ...` up to and including `p_max` (if a power of two).
    pub fn doubling(p_max: f64) -> Self {
        let mut p_list = vec![];
        let mut p = 2.0;
        while p <= p_max {
            p_list.push(p);
            p *= 2.0;
        }
        Self {
            p_list,
            controls: SolveControls::default(),
            regularise: true,
            eps_floor: 1e-8,
            eps_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_list.is_empty() || !(self.p_list[0] >= 2.0) {
            return Err(LabError::Parameter {
                name: "p_list",
                reason: "schedule must be non-empty and start at p >= 2".into(),
            });
        }
        if self.p_list.windows(2).any(|w| !(w[1] > w[0])) || self.p_list.iter().any(|p| !p.is_finite()) {
            return Err(LabError::Parameter {
                name: "p_list",
                reason: "schedule must be finite and strictly increasing".into(),
            });
        }
        let c = &self.controls;
        if !(c.tol > 0.0) || c.max_newton == 0 || !(c.backtrack > 0.0 && c.backtrack < 1.0) || !(c.armijo > 0.0 && c.armijo < 0.5) {
            return Err(LabError::Parameter {
                name: "controls",
                reason: "need tol > 0, max_newton > 0, backtrack in (0,1), armijo in (0,1/2)".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub newton_iterations: usize,
    pub cg_iterations: usize,
    pub residual: f64,
}

/// Relative stationarity: largest free gradient entry over the largest
/// per-vertex sum of `area * A_c |Du_c| |grad(lambda_i)|`.
pub fn relative_residual(mesh: &TriMesh, lin: &Linearization, grad: &NodalField) -> f64 {
    let mut den = vec![0.0f64; mesh.n_vertices()];
    for c in 0..mesh.n_cells() {
        let w = mesh.cell_areas[c] * lin.coef[c] * lin.du.norm(c);
        for (i, &v) in mesh.triangles[c].iter().enumerate() {
            let g = mesh.grad_basis[c][i];
            den[v] += w * g[0].hypot(g[1]);
        }
    }
    let (mut num, mut scale) = (0.0f64, 0.0f64);
    for v in 0..mesh.n_vertices() {
        if !mesh.boundary_vertex[v] {
            num = num.max(grad.at(v).iter().fold(0.0, |m, x| m.max(x.abs())));
            scale = scale.max(den[v]);
        }
    }
    if scale > 0.0 {
        num / scale
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_magnitude(du: &CellField, eps: f64) -> f64 {
    (0..du.n_cells())
        .map(|c| (du.matrix(c).iter().map(|v| v * v).sum::<f64>() + eps * eps).sqrt())
        .fold(0.0, f64::max)
}

/// Jacobi-preconditioned CG on the free rows. Returns the step and the number
/// of iterations.
fn newton_direction(
    mesh: &TriMesh,
    lin: &Linearization,
    grad: &NodalField,
    free: &[bool],
    shift: f64,
    forcing: f64,
    cg_max: usize,
) -> (NodalField, usize) {
    let diag = lin.diagonal_shifted(mesh, shift);
    let dmax = diag.as_slice().iter().cloned().fold(0.0, f64::max);
    let active: Vec<bool> = free
        .iter()
        .zip(diag.as_slice())
        .map(|(&f, &d)| f && d > 1e-13 * dmax)
        .collect();
    let n = grad.as_slice().len();
    let mut x = NodalField::zeros(grad.n_vertices(), grad.n_comp());
    let mut r: Vec<f64> = (0..n).map(|i| if active[i] { -grad.as_slice()[i] } else { 0.0 }).collect();
    let r0 = dot(&r, &r).sqrt();
    if r0 == 0.0 {
        return (x, 0);
    }
    let prec = |r: &[f64]| -> Vec<f64> {
        (0..n).map(|i| if active[i] { r[i] / diag.as_slice()[i] } else { 0.0 }).collect()
    };
    let mut z = prec(&r);
    let mut d = NodalField::from_values(grad.n_comp(), z.clone()).expect("shape");
    let mut rz = dot(&r, &z);
    let mut it = 0;
    while it < cg_max {
        it += 1;
        let mut hd = lin.apply_shifted(mesh, &d, shift);
        for (i, v) in hd.as_mut_slice().iter_mut().enumerate() {
            if !active[i] {
                *v = 0.0;
            }
        }
        let curv = dot(d.as_slice(), hd.as_slice());
        if !(curv > 0.0) {
            if it == 1 {
                x = NodalField::from_values(grad.n_comp(), r.clone()).expect("shape");
            }
            break;
        }
        let alpha = rz / curv;
        for i in 0..n {
            x.as_mut_slice()[i] += alpha * d.as_slice()[i];
            r[i] -= alpha * hd.as_slice()[i];
        }
        if dot(&r, &r).sqrt() <= forcing * r0 {
            break;
        }
        z = prec(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            d.as_mut_slice()[i] = z[i] + beta * d.as_slice()[i];
        }
    }
    (x, it)
}

const DAMPING_START: f64 = 1e-6;
const DAMPING_MIN: f64 = 1e-12;
const DAMPING_MAX: f64 = 1e-1;

/// Minimise `F_p` (regularised by `params.eps`) over fields with the boundary
/// values of `init`. `params.scale` is ignored: each Newton step renormalises
/// by the current largest cell magnitude.
pub fn solve_fixed_p(
    mesh: &TriMesh,
    g: &BoundaryData,
    init: &NodalField,
    params: &EnergyParams,
    controls: &SolveControls,
) -> Result<(NodalField, SolveStats)> {
    if init.n_vertices() != mesh.n_vertices() || init.n_comp() != g.n_comp {
        return Err(LabError::Dimension {
            what: "initial field",
            expected: mesh.n_vertices() * g.n_comp,
            got: init.as_slice().len(),
        });
    }
    for v in 0..mesh.n_vertices() {
        if mesh.boundary_vertex[v] {
            let want = g.value(mesh.vertices[v])?;
            if want.iter().zip(init.at(v)).any(|(a, b)| a != b) {
                return Err(LabError::Parameter {
                    name: "init",
                    reason: format!("initial field violates the boundary data at vertex {v}"),
                });
            }
        }
    }
    let free: Vec<bool> = (0..mesh.n_vertices())
        .flat_map(|v| std::iter::repeat(!mesh.boundary_vertex[v]).take(g.n_comp))
        .collect();
    let mut u = init.clone();
    let mut stats = SolveStats::default();
    let (p, eps) = (params.p, params.eps);
    let mut damping = DAMPING_START;
    loop {
        let du = cell_gradient(mesh, &u)?;
        let m = max_magnitude(&du, eps);
        if m == 0.0 {
            stats.residual = 0.0;
            return Ok((u, stats));
        }
        let prm = EnergyParams::new(p, eps, m)?;
        let phi0 = objective(mesh, &du, &prm);
        let lin = Linearization::from_gradient(mesh, du, &prm)?;
        let grad = lin.gradient(mesh);
        let rel = relative_residual(mesh, &lin, &grad);
        stats.residual = rel;
        if rel <= controls.tol {
            return Ok((u, stats));
        }
        if stats.newton_iterations >= controls.max_newton {
            return Err(LabError::NotConverged {
                p,
                iterations: stats.newton_iterations,
                residual: rel,
                best: Box::new(u),
            });
        }
        if !phi0.is_finite() {
            return Err(LabError::NonFinite { what: "objective", p, scale: m });
        }
        stats.newton_iterations += 1;
        let forcing = controls.cg_forcing.min(rel.sqrt()).max(1e-12);
        let cmax = lin.coef.iter().cloned().fold(0.0, f64::max);
        let (step, cg) = newton_direction(mesh, &lin, &grad, &free, damping * cmax, forcing, controls.cg_max);
        stats.cg_iterations += cg;
        let slope = dot(grad.as_slice(), step.as_slice());
        if !(slope < 0.0) {
            return Err(LabError::NotConverged {
                p,
                iterations: stats.newton_iterations,
                residual: rel,
                best: Box::new(u),
            });
        }
        let slack = 1e-14 * phi0.abs();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = u.combine(1.0, &step, t);
            let phi = objective(mesh, &cell_gradient(mesh, &trial)?, &prm);
            if phi.is_finite() && phi <= phi0 + controls.armijo * t * slope + slack {
                accepted = Some(trial);
                break;
            }
            t *= controls.backtrack;
        }
        if t == 1.0 {
            damping = (damping * 0.1).max(DAMPING_MIN);
        } else if t < 0.3 {
            damping = (damping * 10.0).min(DAMPING_MAX);
        }
        match accepted {
            Some(next) => u = next,
            None => {
                return Err(LabError::NotConverged {
                    p,
                    iterations: stats.newton_iterations,
                    residual: rel,
                    best: Box::new(u),
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub p: f64,
    pub e_p: f64,
    pub e_inf: f64,
    /// Relative stationarity of the unregularised problem at the final state.
    pub residual: f64,
    pub newton_iterations: usize,
    pub cg_iterations: usize,
    /// Regularisation of the preliminary phase (0 when skipped).
    pub eps: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationReport {
    pub stages: Vec<StageRecord>,
    pub e_inf_u0: f64,
    pub tol: f64,
    /// `e_p` non-decreasing within `10 tol` along the schedule.
    pub monotone: bool,
    /// `e_p <= E_inf(u0 interpolant)` at every stage.
    pub bounded_by_data: bool,
    /// Largest max-norm change between successive stage fields.
    pub cauchy: Vec<f64>,
}

impl ContinuationReport {
    fn finalise(&mut self, states: &[NodalField]) {
        let slack = 10.0 * self.tol;
        self.monotone = self
            .stages
            .windows(2)
            .all(|w| w[1].e_p >= w[0].e_p * (1.0 - slack) - slack);
        self.bounded_by_data = self
            .stages
            .iter()
            .all(|s| s.e_p <= self.e_inf_u0 * (1.0 + slack) + slack);
        self.cauchy = states
            .windows(2)
            .map(|w| w[1].combine(1.0, &w[0], -1.0).max_abs())
            .collect();
    }
}

#[derive(Clone, Debug)]
pub struct Continuation {
    pub report: ContinuationReport,
    /// Converged field per stage; the last is the limit proxy.
    pub states: Vec<NodalField>,
}

#[derive(Debug)]
pub struct ContinuationFailure {
    pub error: LabError,
    pub partial: Continuation,
}

/// Run the schedule with warm starts. The first stage starts from the data
/// interpolant.
pub fn continuation(
    mesh: &TriMesh,
    g: &BoundaryData,
    schedule: &PSchedule,
) -> std::result::Result<Continuation, Box<ContinuationFailure>> {
    let fail = |error: LabError, partial: Continuation| Box::new(ContinuationFailure { error, partial });
    let empty = Continuation {
        report: ContinuationReport {
            stages: vec![],
            e_inf_u0: 0.0,
            tol: schedule.controls.tol,
            monotone: true,
            bounded_by_data: true,
            cauchy: vec![],
        },
        states: vec![],
    };
    if let Err(e) = schedule.validate() {
        return Err(fail(e, empty));
    }
    let u0 = match g.interpolate(mesh) {
        Ok(u) => u,
        Err(e) => return Err(fail(e, empty)),
    };
    let e_inf_u0 = match cell_gradient(mesh, &u0) {
        Ok(du) => e_inf_of(&du).0,
        Err(e) => return Err(fail(e, empty)),
    };
    let mut out = empty;
    out.report.e_inf_u0 = e_inf_u0;
    let mut u = u0;
    let mut e_guess = e_inf_u0;
    for (stage, &p) in schedule.p_list.iter().enumerate() {
        let start = Instant::now();
        let init = match out.states.len() {
            n if n >= 2 => extrapolate(mesh, &out.states[n - 2], &u, p),
            _ => u.clone(),
        };
        let result = run_stage(mesh, g, &init, p, e_guess, schedule);
        match result {
            Ok((next, mut record)) => {
                record.wall_time_s = start.elapsed().as_secs_f64();
                if record.e_p > 0.0 {
                    e_guess = record.e_p;
                }
                out.report.stages.push(record);
                out.states.push(next.clone());
                u = next;
            }
            Err(e) => {
                out.report.finalise(&out.states);
                return Err(fail(
                    LabError::Stage { stage, p, source: Box::new(e) },
                    out,
                ));
            }
        }
    }
    out.report.finalise(&out.states);
    Ok(out)
}

/// Start for the next stage: `u + (u - prev) / 2` when that lowers the
/// objective at `p`, otherwise `u`.
fn extrapolate(mesh: &TriMesh, prev: &NodalField, u: &NodalField, p: f64) -> NodalField {
    let mut guess = u.combine(1.5, prev, -0.5);
    for v in 0..mesh.n_vertices() {
        if mesh.boundary_vertex[v] {
            guess.at_mut(v).copy_from_slice(u.at(v));
        }
    }
    let score = |w: &NodalField| e_p_of(mesh, &cell_gradient(mesh, w).ok()?, p, 0.0).ok();
    match (score(&guess), score(u)) {
        (Some(a), Some(b)) if a < b => guess,
        _ => u.clone(),
    }
}

fn run_stage(
    mesh: &TriMesh,
    g: &BoundaryData,
    init: &NodalField,
    p: f64,
    e_guess: f64,
    schedule: &PSchedule,
) -> Result<(NodalField, StageRecord)> {
    let controls = schedule.controls;
    let mut u = init.clone();
    let mut newton = 0;
    let mut cg = 0;
    let mut eps_used = 0.0;
    if schedule.regularise && p > 2.0 {
        let eps = (e_guess / p).max(schedule.eps_floor);
        let loose = SolveControls { tol: schedule.eps_tol.max(controls.tol), ..controls };
        let (next, st) = solve_fixed_p(mesh, g, &u, &EnergyParams::new(p, eps, 1.0)?, &loose)?;
        u = next;
        newton += st.newton_iterations;
        cg += st.cg_iterations;
        eps_used = eps;
    }
    let (u, st) = solve_fixed_p(mesh, g, &u, &EnergyParams::new(p, 0.0, 1.0)?, &controls)?;
    newton += st.newton_iterations;
    cg += st.cg_iterations;
    let du = cell_gradient(mesh, &u)?;
    let record = StageRecord {
        p,
        e_p: e_p_of(mesh, &du, p, 0.0)?,
        e_inf: e_inf_of(&du).0,
        residual: st.residual,
        newton_iterations: newton,
        cg_iterations: cg,
        eps: eps_used,
        wall_time_s: 0.0,
    };
    Ok((u, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::grad_e_p;
    use crate::mesh::{build_mesh, DomainSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_interior(mesh: &TriMesh, g: &BoundaryData, seed: u64) -> NodalField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = g.interpolate(mesh).unwrap();
        for v in 0..mesh.n_vertices() {
            if !mesh.boundary_vertex[v] {
                u.at_mut(v).iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            }
        }
        u
    }

    #[test]
    fn schedule_defaults_and_validation() {
        let s = PSchedule::default();
        assert_eq!(s.p_list.first(), Some(&2.0));
        assert_eq!(s.p_list.last(), Some(&1024.0));
        assert_eq!(s.p_list.len(), 10);
        assert!(s.validate().is_ok());
        let bad = PSchedule { p_list: vec![4.0, 2.0], ..PSchedule::default() };
        assert!(bad.validate().is_err());
        let low = PSchedule { p_list: vec![1.5], ..PSchedule::default() };
        assert!(low.validate().is_err());
    }

    #[test]
    fn p2_affine_data_returns_the_interpolant() {
        let m = build_mesh(&DomainSpec::disk([0.0, 0.0], 1.0, 0.1)).unwrap();
        let g = BoundaryData::new("affine", 1, |x| vec![0.3 + x[0] - 2.0 * x[1]]);
        let init = random_interior(&m, &g, 1);
        let (u, st) = solve_fixed_p(&m, &g, &init, &EnergyParams::new(2.0, 0.0, 1.0).unwrap(), &SolveControls::default()).unwrap();
        let exact = g.interpolate(&m).unwrap();
        assert!(u.combine(1.0, &exact, -1.0).max_abs() < 1e-8, "{st:?}");
    }

    #[test]
    fn identity_is_stationary_for_all_p() {
        let m = build_mesh(&DomainSpec::unit_square(0.1)).unwrap();
        let g = BoundaryData::new("id", 2, |x| x.to_vec());
        let u0 = g.interpolate(&m).unwrap();
        for p in [2.0, 16.0, 1024.0] {
            let (u, st) = solve_fixed_p(&m, &g, &u0, &EnergyParams::new(p, 0.0, 1.0).unwrap(), &SolveControls::default()).unwrap();
            assert_eq!(st.newton_iterations, 0);
            assert_eq!(u, u0);
        }
    }

    #[test]
    fn strip_interpolant_has_tiny_residual() {
        let m = build_mesh(&DomainSpec::unit_square(0.05)).unwrap();
        let g = BoundaryData::new("strip", 1, |x| vec![x[0]]);
        let u = g.interpolate(&m).unwrap();
        for p in [2.0, 8.0, 512.0] {
            let grad = grad_e_p(&m, &u, &EnergyParams::new(p, 0.0, 1.0).unwrap()).unwrap();
            assert!(grad.max_abs() < 1e-12);
        }
    }

    #[test]
    fn nonlinear_solve_converges_and_is_unique() {
        let m = build_mesh(&DomainSpec::disk([0.0, 0.0], 1.0, 0.15)).unwrap();
        let g = BoundaryData::new("wave", 1, |x| vec![(2.0 * x[0]).sin() + x[1] * x[1]]);
        let prm = EnergyParams::new(8.0, 0.0, 1.0).unwrap();
        let ctl = SolveControls::default();
        let (a, sa) = solve_fixed_p(&m, &g, &random_interior(&m, &g, 7), &prm, &ctl).unwrap();
        let (b, _) = solve_fixed_p(&m, &g, &random_interior(&m, &g, 8), &prm, &ctl).unwrap();
        assert!(sa.residual <= 1e-9);
        let ea = crate::energy::eval_e_p(&m, &a, &prm).unwrap();
        let eb = crate::energy::eval_e_p(&m, &b, &prm).unwrap();
        assert!((ea - eb).abs() <= 1e-8 * ea);
        assert!(a.combine(1.0, &b, -1.0).max_abs() <= 1e-6);
    }

    #[test]
    fn energy_decreases_from_init() {
        let m = build_mesh(&DomainSpec::unit_square(0.1)).unwrap();
        let g = BoundaryData::new("cubic", 1, |x| vec![x[0].powi(3) - x[1]]);
        let init = random_interior(&m, &g, 3);
        let prm = EnergyParams::new(6.0, 0.0, 1.0).unwrap();
        let (u, _) = solve_fixed_p(&m, &g, &init, &prm, &SolveControls::default()).unwrap();
        let e0 = crate::energy::eval_e_p(&m, &init, &prm).unwrap();
        let e1 = crate::energy::eval_e_p(&m, &u, &prm).unwrap();
        assert!(e1 <= e0);
        for v in 0..m.n_vertices() {
            if m.boundary_vertex[v] {
                assert_eq!(u.at(v), init.at(v));
            }
        }
    }

    #[test]
    fn init_violating_boundary_is_rejected() {
        let m = build_mesh(&DomainSpec::unit_square(0.25)).unwrap();
        let g = BoundaryData::new("x", 1, |x| vec![x[0]]);
        let bad = NodalField::zeros(m.n_vertices(), 1);
        assert!(solve_fixed_p(&m, &g, &bad, &EnergyParams::new(4.0, 0.0, 1.0).unwrap(), &SolveControls::default()).is_err());
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        let m = build_mesh(&DomainSpec::unit_square(0.1)).unwrap();
        let g = BoundaryData::new("wave", 1, |x| vec![(3.0 * x[0]).sin() * x[1]]);
        let init = random_interior(&m, &g, 2);
        let ctl = SolveControls { max_newton: 1, tol: 1e-14, ..SolveControls::default() };
        match solve_fixed_p(&m, &g, &init, &EnergyParams::new(16.0, 0.0, 1.0).unwrap(), &ctl) {
            Err(LabError::NotConverged { best, iterations, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(best.n_vertices(), m.n_vertices());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_continuation_is_monotone() {
        let m = build_mesh(&DomainSpec::disk([0.0, 0.0], 1.0, 0.1)).unwrap();
        let g = BoundaryData::new("saddle", 1, |x| vec![x[0] * x[0] - x[1] * x[1] + 0.5 * x[0]]);
        let run = continuation(&m, &g, &PSchedule::doubling(64.0)).unwrap();
        let r = &run.report;
        assert_eq!(r.stages.len(), 6);
        assert!(r.monotone && r.bounded_by_data, "{r:?}");
        assert!(r.stages.iter().all(|s| s.residual <= 1e-9));
        assert_eq!(run.states.len(), 6);
    }

    #[test]
    fn constant_data_stays_constant() {
        let m = build_mesh(&DomainSpec::unit_square(0.1)).unwrap();
        let g = BoundaryData::new("const", 1, |_| vec![0.7]);
        let run = continuation(&m, &g, &PSchedule::doubling(16.0)).unwrap();
        assert!(run.report.stages.iter().all(|s| s.e_p == 0.0));
    }

    #[test]
    fn report_round_trips_through_json() {
        let m = build_mesh(&DomainSpec::unit_square(0.25)).unwrap();
        let g = BoundaryData::new("x", 1, |x| vec![x[0] * x[1]]);
        let run = continuation(&m, &g, &PSchedule::doubling(8.0)).unwrap();
        let s = serde_json::to_string(&run.report).unwrap();
        let back: ContinuationReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, run.report);
    }
}
