//! Normalised p-Dirichlet energy, the supremal functional, and the first and
//! second variations of the scaled objective
//!
//! ```text
//! Phi(u) = (1/p) * mean_cells ((|Du|^2 + eps^2) / M^2)^(p/2)
//! ```
//!
//! with `M` a fixed reference scale. All powers go through `exp(p * ln(.))`
//! on ratios bounded by one where possible, so exponents in the thousands stay
//! finite. Per-cell work runs in parallel; scatter and reductions are serial in
//! cell order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::mesh::{cell_gradient, pairwise_sum, CellField, NodalField, TriMesh};

const PAR_CELLS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParams {
    pub p: f64,
    pub eps: f64,
    /// Reference scale `M` of the objective.
    pub scale: f64,
}

impl EnergyParams {
    pub fn new(p: f64, eps: f64, scale: f64) -> Result<Self> {
        if !(p >= 2.0) || !p.is_finite() {
            return Err(LabError::Parameter {
                name: "p",
                reason: format!("exponent must be finite and >= 2, got {p}"),
            });
        }
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(LabError::Parameter {
                name: "eps",
                reason: format!("regularisation must be finite and >= 0, got {eps}"),
            });
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(LabError::Parameter {
                name: "scale",
                reason: format!("reference scale must be positive, got {scale}"),
            });
        }
        Ok(Self { p, eps, scale })
    }
}

#[derive(Clone, Debug)]
pub struct EnergyReport {
    pub e_p: f64,
    pub e_inf: f64,
    pub argmax: usize,
    /// Per-cell `w_c * (sqrt(|Du|^2 + eps^2) / E_p)^p`; sums to one.
    pub density: Vec<f64>,
    /// Gradient of the scaled objective, zero at boundary vertices.
    pub gradient: NodalField,
}

fn map_cells<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if n >= PAR_CELLS {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

fn sq_norms(du: &CellField) -> Vec<f64> {
    (0..du.n_cells())
        .map(|c| du.matrix(c).iter().map(|v| v * v).sum())
        .collect()
}

/// Supremal functional: max cell Frobenius norm and the first cell attaining it.
pub fn eval_e_inf(mesh: &TriMesh, u: &NodalField) -> Result<(f64, usize)> {
    let du = cell_gradient(mesh, u)?;
    Ok(e_inf_of(&du))
}

pub fn e_inf_of(du: &CellField) -> (f64, usize) {
    let mut best = (0.0, 0);
    for c in 0..du.n_cells() {
        let n = du.norm(c);
        if n > best.0 {
            best = (n, c);
        }
    }
    best
}

/// `E_p` of a P1 field with the given regularisation. `params.scale` is not
/// used: the max cell magnitude is always the normaliser here.
pub fn eval_e_p(mesh: &TriMesh, u: &NodalField, params: &EnergyParams) -> Result<f64> {
    let du = cell_gradient(mesh, u)?;
    e_p_of(mesh, &du, params.p, params.eps)
}

pub fn e_p_of(mesh: &TriMesh, du: &CellField, p: f64, eps: f64) -> Result<f64> {
    let mags: Vec<f64> = sq_norms(du).into_iter().map(|s| (s + eps * eps).sqrt()).collect();
    let m = mags.iter().cloned().fold(0.0, f64::max);
    if m == 0.0 {
        return Ok(0.0);
    }
    let terms: Vec<f64> = mags
        .iter()
        .zip(&mesh.cell_areas)
        .map(|(&g, &a)| if g == 0.0 { 0.0 } else { a * (p * (g / m).ln()).exp() })
        .collect();
    let mean = pairwise_sum(&terms) / mesh.area;
    let e = m * (mean.ln() / p).exp();
    if !e.is_finite() {
        return Err(LabError::NonFinite { what: "E_p", p, scale: m });
    }
    Ok(e)
}

/// Scaled objective `Phi`. Overflow yields `+inf`, which callers treat as a
/// rejected step.
pub fn objective(mesh: &TriMesh, du: &CellField, params: &EnergyParams) -> f64 {
    let (p, e2, m2) = (params.p, params.eps * params.eps, params.scale * params.scale);
    let s2 = sq_norms(du);
    let terms: Vec<f64> = s2
        .iter()
        .zip(&mesh.cell_areas)
        .map(|(&s, &a)| {
            let q = (s + e2) / m2;
            if q == 0.0 {
                0.0
            } else {
                a * (0.5 * p * q.ln()).exp()
            }
        })
        .collect();
    pairwise_sum(&terms) / (mesh.area * p)
}

/// Assemble `R_i = sum_c area_c * G_c grad(lambda_i)` for a per-cell flux `G`.
pub fn assemble_flux(mesh: &TriMesh, flux: &CellField) -> NodalField {
    let n = flux.n_comp();
    let mut out = NodalField::zeros(mesh.n_vertices(), n);
    let vals = out.as_mut_slice();
    for c in 0..mesh.n_cells() {
        let t = mesh.triangles[c];
        let g = &mesh.grad_basis[c];
        let a = mesh.cell_areas[c];
        let f = flux.matrix(c);
        for i in 0..3 {
            for k in 0..n {
                vals[t[i] * n + k] += a * (f[2 * k] * g[i][0] + f[2 * k + 1] * g[i][1]);
            }
        }
    }
    out
}

pub(crate) fn zero_boundary(mesh: &TriMesh, f: &mut NodalField) {
    for v in 0..mesh.n_vertices() {
        if mesh.boundary_vertex[v] {
            f.at_mut(v).iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Per-cell data of the scaled objective at a fixed state.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub du: CellField,
    /// `A_c = q_c^(p/2 - 1) / (M^2 |Omega|)`, the gradient coefficient per unit area.
    pub coef: Vec<f64>,
    /// `(p - 2) A_c / (|Du_c|^2 + eps^2)`, zero when the denominator vanishes.
    pub rank_one: Vec<f64>,
}

impl Linearization {
    pub fn new(mesh: &TriMesh, u: &NodalField, params: &EnergyParams) -> Result<Self> {
        let du = cell_gradient(mesh, u)?;
        Self::from_gradient(mesh, du, params)
    }

    pub fn from_gradient(mesh: &TriMesh, du: CellField, params: &EnergyParams) -> Result<Self> {
        let (p, e2, m2) = (params.p, params.eps * params.eps, params.scale * params.scale);
        let s2 = sq_norms(&du);
        let pairs = map_cells(mesh.n_cells(), |c| {
            let d = s2[c] + e2;
            let w = 1.0 / mesh.area;
            if d == 0.0 {
                let a = if p == 2.0 { w / m2 } else { 0.0 };
                return (a, 0.0);
            }
            let a = w * ((0.5 * p - 1.0) * (d / m2).ln()).exp() / m2;
            (a, (p - 2.0) * a / d)
        });
        let (coef, rank_one): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if coef.iter().chain(&rank_one).any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite {
                what: "energy variation",
                p,
                scale: params.scale,
            });
        }
        Ok(Self { du, coef, rank_one })
    }

    /// Per-cell flux `A_c Du_c`, whose area-weighted assembly is the gradient.
    pub fn flux(&self) -> CellField {
        let mut f = self.du.clone();
        for c in 0..f.n_cells() {
            let a = self.coef[c];
            f.matrix_mut(c).iter_mut().for_each(|x| *x *= a);
        }
        f
    }

    /// Gradient of the scaled objective including boundary rows.
    pub fn full_gradient(&self, mesh: &TriMesh) -> NodalField {
        assemble_flux(mesh, &self.flux())
    }

    /// Gradient with Dirichlet rows zeroed.
    pub fn gradient(&self, mesh: &TriMesh) -> NodalField {
        let mut g = self.full_gradient(mesh);
        zero_boundary(mesh, &mut g);
        g
    }

    /// Second variation applied to `v` (all rows, no Dirichlet masking).
    pub fn apply(&self, mesh: &TriMesh, v: &NodalField) -> NodalField {
        self.apply_shifted(mesh, v, 0.0)
    }

    /// Second variation plus `shift` times the P1 stiffness, applied to `v`.
    pub fn apply_shifted(&self, mesh: &TriMesh, v: &NodalField, shift: f64) -> NodalField {
        let n = self.du.n_comp();
        let w = 2 * n;
        let cell = |c: usize, dv: &mut [f64]| {
            let t = mesh.triangles[c];
            let g = &mesh.grad_basis[c];
            for k in 0..n {
                let (a, b, d) = (v.at(t[0])[k], v.at(t[1])[k], v.at(t[2])[k]);
                dv[2 * k] = a * g[0][0] + b * g[1][0] + d * g[2][0];
                dv[2 * k + 1] = a * g[0][1] + b * g[1][1] + d * g[2][1];
            }
            let du = self.du.matrix(c);
            let r = self.rank_one[c];
            let inner: f64 = if r != 0.0 { du.iter().zip(dv.iter()).map(|(x, y)| x * y).sum() } else { 0.0 };
            let area = mesh.cell_areas[c];
            for j in 0..w {
                dv[j] = area * ((self.coef[c] + shift) * dv[j] + r * inner * du[j]);
            }
        };
        let mut local = vec![0.0; mesh.n_cells() * w];
        if mesh.n_cells() >= PAR_CELLS {
            local.par_chunks_mut(w).enumerate().for_each(|(c, dv)| cell(c, dv));
        } else {
            local.chunks_mut(w).enumerate().for_each(|(c, dv)| cell(c, dv));
        }
        let mut out = NodalField::zeros(mesh.n_vertices(), n);
        let vals = out.as_mut_slice();
        for (c, f) in local.chunks(w).enumerate() {
            let t = mesh.triangles[c];
            let g = &mesh.grad_basis[c];
            for i in 0..3 {
                for k in 0..n {
                    vals[t[i] * n + k] += f[2 * k] * g[i][0] + f[2 * k + 1] * g[i][1];
                }
            }
        }
        out
    }

    /// Diagonal of the second variation, used as a Jacobi preconditioner.
    pub fn diagonal(&self, mesh: &TriMesh) -> NodalField {
        self.diagonal_shifted(mesh, 0.0)
    }

    pub fn diagonal_shifted(&self, mesh: &TriMesh, shift: f64) -> NodalField {
        let n = self.du.n_comp();
        let mut out = NodalField::zeros(mesh.n_vertices(), n);
        let vals = out.as_mut_slice();
        for c in 0..mesh.n_cells() {
            let t = mesh.triangles[c];
            let g = &mesh.grad_basis[c];
            let du = self.du.matrix(c);
            let area = mesh.cell_areas[c];
            for i in 0..3 {
                let gg = g[i][0] * g[i][0] + g[i][1] * g[i][1];
                for k in 0..n {
                    let proj = du[2 * k] * g[i][0] + du[2 * k + 1] * g[i][1];
                    vals[t[i] * n + k] += area * ((self.coef[c] + shift) * gg + self.rank_one[c] * proj * proj);
                }
            }
        }
        out
    }
}

/// Gradient of the scaled objective with Dirichlet rows zeroed.
pub fn grad_e_p(mesh: &TriMesh, u: &NodalField, params: &EnergyParams) -> Result<NodalField> {
    Ok(Linearization::new(mesh, u, params)?.gradient(mesh))
}

/// Second variation of the scaled objective at `u` applied to `direction`
/// (unmasked, so it is the exact Hessian action on all vertex values).
pub fn hess_action_e_p(
    mesh: &TriMesh,
    u: &NodalField,
    params: &EnergyParams,
    direction: &NodalField,
) -> Result<NodalField> {
    if direction.n_vertices() != mesh.n_vertices() || direction.n_comp() != u.n_comp() {
        return Err(LabError::Dimension {
            what: "direction field",
            expected: mesh.n_vertices() * u.n_comp(),
            got: direction.as_slice().len(),
        });
    }
    Ok(Linearization::new(mesh, u, params)?.apply(mesh, direction))
}

pub fn evaluate(mesh: &TriMesh, u: &NodalField, params: &EnergyParams) -> Result<EnergyReport> {
    let lin = Linearization::new(mesh, u, params)?;
    let (e_inf, argmax) = e_inf_of(&lin.du);
    let e_p = e_p_of(mesh, &lin.du, params.p, params.eps)?;
    let e2 = params.eps * params.eps;
    let density = sq_norms(&lin.du)
        .iter()
        .zip(&mesh.cell_areas)
        .map(|(&s, &a)| {
            let g = (s + e2).sqrt();
            if g == 0.0 || e_p == 0.0 {
                0.0
            } else {
                a / mesh.area * (params.p * (g / e_p).ln()).exp()
            }
        })
        .collect();
    Ok(EnergyReport {
        e_p,
        e_inf,
        argmax,
        density,
        gradient: lin.gradient(mesh),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, DomainSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(h: f64) -> TriMesh {
        build_mesh(&DomainSpec::unit_square(h)).unwrap()
    }

    fn random_field(mesh: &TriMesh, n: usize, rng: &mut ChaCha8Rng) -> NodalField {
        let v = (0..mesh.n_vertices() * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        NodalField::from_values(n, v).unwrap()
    }

    fn dot(a: &NodalField, b: &NodalField) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn params_are_validated() {
        assert!(EnergyParams::new(1.5, 0.0, 1.0).is_err());
        assert!(EnergyParams::new(4.0, -1.0, 1.0).is_err());
        assert!(EnergyParams::new(4.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn supremal_of_constant_and_identity() {
        let m = square(0.1);
        let k = NodalField::from_fn(&m, 2, |_| vec![3.0, -1.0]).unwrap();
        assert_eq!(eval_e_inf(&m, &k).unwrap().0, 0.0);
        let id = NodalField::from_fn(&m, 2, |x| x.to_vec()).unwrap();
        let (e, _) = eval_e_inf(&m, &id).unwrap();
        assert!((e - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn e_p_of_affine_is_constant_in_p() {
        let m = square(0.1);
        let u = NodalField::from_fn(&m, 1, |x| vec![0.6 * x[0] + 0.8 * x[1]]).unwrap();
        for p in [2.0, 7.0, 64.0, 1024.0, 16384.0] {
            let e = eval_e_p(&m, &u, &EnergyParams::new(p, 0.0, 1.0).unwrap()).unwrap();
            assert!((e - 1.0).abs() < 1e-13, "p = {p}: {e}");
        }
    }

    #[test]
    fn e_p_of_two_value_field() {
        // slope 1 on the left half, 0 on the right half (vertex line at x = 0.5)
        let m = square(0.1);
        let u = NodalField::from_fn(&m, 1, |x| vec![x[0].min(0.5)]).unwrap();
        for p in [2.0, 8.0, 100.0, 4096.0] {
            let e = eval_e_p(&m, &u, &EnergyParams::new(p, 0.0, 1.0).unwrap()).unwrap();
            let want = 0.5f64.powf(1.0 / p);
            assert!((e - want).abs() < 1e-13, "p = {p}: {e} vs {want}");
        }
    }

    #[test]
    fn zero_field_has_zero_energy() {
        let m = square(0.25);
        let u = NodalField::zeros(m.n_vertices(), 2);
        assert_eq!(eval_e_p(&m, &u, &EnergyParams::new(8.0, 0.0, 1.0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn large_exponent_stays_finite() {
        let m = square(0.1);
        let u = NodalField::from_fn(&m, 1, |x| vec![1e3 * (x[0] * x[0] + x[1].sin())]).unwrap();
        let e = eval_e_p(&m, &u, &EnergyParams::new(16384.0, 0.0, 1.0).unwrap()).unwrap();
        let (einf, _) = eval_e_inf(&m, &u).unwrap();
        assert!(e.is_finite() && e <= einf * (1.0 + 1e-12) && e > 0.9 * einf);
    }

    #[test]
    fn affine_state_is_stationary() {
        let m = build_mesh(&DomainSpec::disk([0.0, 0.0], 1.0, 0.1)).unwrap();
        let u = NodalField::from_fn(&m, 2, |x| vec![x[0] - 2.0 * x[1], 0.5 * x[0] + x[1]]).unwrap();
        for p in [2.0, 6.0, 64.0] {
            let (e, _) = eval_e_inf(&m, &u).unwrap();
            let g = grad_e_p(&m, &u, &EnergyParams::new(p, 0.0, e).unwrap()).unwrap();
            assert!(g.max_abs() < 1e-13, "p = {p}: {}", g.max_abs());
        }
    }

    #[test]
    fn p2_gradient_is_stiffness_action() {
        // hand-assembled stiffness on the 8-triangle square: the centre row of
        // the P1 Laplacian is 4 on the diagonal and -1 on the four axis neighbours
        let m = square(0.5);
        let mut u = NodalField::zeros(9, 1);
        for (v, val) in [(1, 0.3), (3, -0.7), (4, 1.1), (5, 0.2), (7, 0.9)] {
            u.at_mut(v)[0] = val;
        }
        let g = grad_e_p(&m, &u, &EnergyParams::new(2.0, 0.0, 1.0).unwrap()).unwrap();
        let want = 4.0 * 1.1 - (0.3 - 0.7 + 0.2 + 0.9);
        // objective carries the 1/|Omega| = 1 mean factor
        assert!((g.at(4)[0] - want).abs() < 1e-14);
        assert_eq!(g.at(0)[0], 0.0);
    }

    #[test]
    fn p2_hessian_is_state_independent() {
        let m = square(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (u1, u2, v) = (random_field(&m, 2, &mut rng), random_field(&m, 2, &mut rng), random_field(&m, 2, &mut rng));
        let prm = EnergyParams::new(2.0, 0.0, 1.0).unwrap();
        let (a, b) = (hess_action_e_p(&m, &u1, &prm, &v).unwrap(), hess_action_e_p(&m, &u2, &prm, &v).unwrap());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = square(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let p = [2.0, 6.0, 8.0][trial % 3];
            let u = random_field(&m, 2, &mut rng);
            let mut phi = random_field(&m, 2, &mut rng);
            zero_boundary(&m, &mut phi);
            let (einf, _) = eval_e_inf(&m, &u).unwrap();
            let prm = EnergyParams::new(p, 0.0, einf).unwrap();
            let g = grad_e_p(&m, &u, &prm).unwrap();
            let t = 1e-5;
            let f = |s: f64| objective(&m, &cell_gradient(&m, &u.combine(1.0, &phi, s)).unwrap(), &prm);
            let fd = (f(t) - f(-t)) / (2.0 * t);
            let an = dot(&g, &phi);
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-3), "p = {p}: {fd} vs {an}");
        }
    }

    #[test]
    fn hessian_symmetric_and_matches_differenced_gradient() {
        let m = square(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in [2.0, 6.0, 8.0] {
            let u = random_field(&m, 2, &mut rng);
            let (v, w) = (random_field(&m, 2, &mut rng), random_field(&m, 2, &mut rng));
            let (einf, _) = eval_e_inf(&m, &u).unwrap();
            let prm = EnergyParams::new(p, 0.0, einf).unwrap();
            let hv = hess_action_e_p(&m, &u, &prm, &v).unwrap();
            let hw = hess_action_e_p(&m, &u, &prm, &w).unwrap();
            let (a, b) = (dot(&hv, &w), dot(&hw, &v));
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()), "{a} {b}");
            let t = 1e-5;
            let gp = Linearization::new(&m, &u.combine(1.0, &v, t), &prm).unwrap().full_gradient(&m);
            let gm = Linearization::new(&m, &u.combine(1.0, &v, -t), &prm).unwrap().full_gradient(&m);
            let fd = gp.combine(0.5 / t, &gm, -0.5 / t);
            let err: f64 = fd.as_slice().iter().zip(hv.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = hv.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(err < 1e-5 * norm, "p = {p}: {err} vs {norm}");
        }
    }

    #[test]
    fn diagonal_matches_unit_actions() {
        let m = square(0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_field(&m, 2, &mut rng);
        let prm = EnergyParams::new(5.0, 0.1, 2.0).unwrap();
        let lin = Linearization::new(&m, &u, &prm).unwrap();
        let d = lin.diagonal(&m);
        for i in 0..m.n_vertices() * 2 {
            let mut e = NodalField::zeros(m.n_vertices(), 2);
            e.as_mut_slice()[i] = 1.0;
            let he = lin.apply(&m, &e);
            assert!((he.as_slice()[i] - d.as_slice()[i]).abs() < 1e-12 * d.as_slice()[i].abs().max(1.0));
        }
    }

    #[test]
    fn report_density_sums_to_one() {
        let m = square(0.1);
        let u = NodalField::from_fn(&m, 1, |x| vec![(3.0 * x[0]).sin() * x[1]]).unwrap();
        let r = evaluate(&m, &u, &EnergyParams::new(12.0, 0.0, 1.0).unwrap()).unwrap();
        let s: f64 = r.density.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(r.e_p <= r.e_inf);
        assert!((m.cell_areas.len() > r.argmax) && r.density.iter().all(|&d| d >= 0.0));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::mesh::{build_mesh, DomainSpec};
    use proptest::prelude::*;

    fn field(mesh: &TriMesh, coeffs: &[f64]) -> NodalField {
        NodalField::from_fn(mesh, 1, |x| {
            vec![coeffs[0] * x[0] + coeffs[1] * x[1] * x[1] + coeffs[2] * (3.0 * x[0] * x[1]).sin() + coeffs[3] * (x[0] - x[1]).abs()]
        })
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn holder_chain(c in prop::collection::vec(-2.0f64..2.0, 4), q in 2.0f64..50.0, dp in 0.0f64..500.0) {
            let m = build_mesh(&DomainSpec::unit_square(0.2)).unwrap();
            let u = field(&m, &c);
            let p = q + dp;
            let eq = eval_e_p(&m, &u, &EnergyParams::new(q, 0.0, 1.0).unwrap()).unwrap();
            let ep = eval_e_p(&m, &u, &EnergyParams::new(p, 0.0, 1.0).unwrap()).unwrap();
            let (ei, _) = eval_e_inf(&m, &u).unwrap();
            prop_assert!(eq <= ep * (1.0 + 1e-13));
            prop_assert!(ep <= ei * (1.0 + 1e-13));
        }

        #[test]
        fn scaling_covariance(c in prop::collection::vec(-2.0f64..2.0, 4), s in -5.0f64..5.0, p in 2.0f64..2000.0) {
            let m = build_mesh(&DomainSpec::unit_square(0.25)).unwrap();
            let u = field(&m, &c);
            let su = u.combine(s, &u, 0.0);
            let prm = EnergyParams::new(p, 0.0, 1.0).unwrap();
            let (a, b) = (eval_e_p(&m, &u, &prm).unwrap(), eval_e_p(&m, &su, &prm).unwrap());
            prop_assert!((b - s.abs() * a).abs() <= 1e-12 * (1.0 + b));
            let (ia, ib) = (eval_e_inf(&m, &u).unwrap().0, eval_e_inf(&m, &su).unwrap().0);
            prop_assert!((ib - s.abs() * ia).abs() <= 1e-12 * (1.0 + ib));
        }

        #[test]
        fn hessian_is_positive(c in prop::collection::vec(-2.0f64..2.0, 4), d in prop::collection::vec(-1.0f64..1.0, 4), p in 2.0f64..64.0, eps in 0.0f64..0.5) {
            let m = build_mesh(&DomainSpec::unit_square(0.25)).unwrap();
            let (u, v) = (field(&m, &c), field(&m, &d));
            let scale = eval_e_inf(&m, &u).unwrap().0.max(eps).max(1e-3);
            let hv = hess_action_e_p(&m, &u, &EnergyParams::new(p, eps, scale).unwrap(), &v).unwrap();
            let q: f64 = hv.as_slice().iter().zip(v.as_slice()).map(|(x, y)| x * y).sum();
            prop_assert!(q >= -1e-12 * (1.0 + q.abs()));
        }

        #[test]
        fn eps_consistency(c in prop::collection::vec(-2.0f64..2.0, 4), p in 2.0f64..1000.0, eps in 0.0f64..1.0) {
            let m = build_mesh(&DomainSpec::unit_square(0.25)).unwrap();
            let u = field(&m, &c);
            let a = eval_e_p(&m, &u, &EnergyParams::new(p, eps, 1.0).unwrap()).unwrap();
            let b = eval_e_p(&m, &u, &EnergyParams::new(p, 0.0, 1.0).unwrap()).unwrap();
            prop_assert!(a >= b * (1.0 - 1e-13));
            prop_assert!(a - b <= eps * (1.0 + 1e-12) + 1e-15);
        }
    }
}
