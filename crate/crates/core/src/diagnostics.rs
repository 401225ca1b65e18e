//! Checks of stationarity, density ratios, support, duality, boundary decay
//! and rigidity on computed states.

use std::io::Write;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::current::{pair_with_form, CurrentTuple, MeasureFunctionPair};
use crate::energy::e_inf_of;
use crate::error::{LabError, Result};
use crate::mesh::{balls_and_shells, cell_gradient, pairwise_sum, CellField, NodalField, Point, TriMesh};

const PAR_VERTICES: usize = 4096;

/// Tensor-product bump `b((x - c1)/s) b((y - c2)/s)` with `b(t) = (1 - t^2)^3`
/// on `|t| < 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub centre: Point,
    pub scale: f64,
}

impl Bump {
    pub fn value(&self, x: Point) -> f64 {
        let b = |t: f64| {
            if t.abs() >= 1.0 {
                0.0
            } else {
                (1.0 - t * t).powi(3)
            }
        };
        b((x[0] - self.centre[0]) / self.scale) * b((x[1] - self.centre[1]) / self.scale)
    }

    pub fn interpolate(&self, mesh: &TriMesh) -> NodalField {
        let values = mesh.vertices.iter().map(|&x| self.value(x)).collect();
        NodalField::from_values(1, values).expect("one value per vertex")
    }
}

/// Scalar bumps `chi >= 0` and vector fields `psi = chi (a + B (x - c))`,
/// interpolated as P1 fields. Every field vanishes on the strip of width
/// `margin` along the boundary.
#[derive(Clone, Debug)]
pub struct TestFieldBank {
    pub margin: f64,
    pub bumps: Vec<Bump>,
    /// `(a, B)` of each `psi`.
    pub affine: Vec<([f64; 2], [f64; 4])>,
    pub chi: Vec<NodalField>,
    pub psi: Vec<NodalField>,
}

fn bump_field(mesh: &TriMesh, bump: Bump, a: [f64; 2], b: [f64; 4]) -> Result<NodalField> {
    NodalField::from_fn(mesh, 2, |x| {
        let w = bump.value(x);
        let d = [x[0] - bump.centre[0], x[1] - bump.centre[1]];
        vec![w * (a[0] + b[0] * d[0] + b[1] * d[1]), w * (a[1] + b[2] * d[0] + b[3] * d[1])]
    })
}

impl TestFieldBank {
    pub fn new(mesh: &TriMesh, count: usize, seed: u64, margin: f64) -> Result<Self> {
        if count == 0 {
            return Err(LabError::Parameter {
                name: "count",
                reason: "test bank must hold at least one field".into(),
            });
        }
        let (lo, hi) = mesh.bounding_box();
        let width = (hi[0] - lo[0]).min(hi[1] - lo[1]);
        let scales = [width / 4.0, width / 6.0, width / 10.0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bumps = Vec::with_capacity(count);
        let mut chi = Vec::with_capacity(count);
        let mut psi = Vec::with_capacity(count);
        let mut affine = Vec::with_capacity(count);
        for i in 0..count {
            let mut placed = None;
            for k in 0..scales.len() {
                let s = scales[(i + k) % scales.len()];
                let need = s * 2f64.sqrt() + margin;
                let candidates: Vec<usize> = (0..mesh.n_vertices())
                    .filter(|&v| mesh.vertex_boundary_distance[v] >= need)
                    .collect();
                if let Some(&v) = candidates.choose(&mut rng) {
                    placed = Some(Bump {
                        centre: mesh.vertices[v],
                        scale: s,
                    });
                    break;
                }
            }
            let bump = placed.ok_or_else(|| LabError::Parameter {
                name: "margin",
                reason: format!("no room for a test bump at margin {margin}"),
            })?;
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let b: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0) / bump.scale);
            chi.push(bump.interpolate(mesh));
            psi.push(bump_field(mesh, bump, a, b)?);
            bumps.push(bump);
            affine.push((a, b));
        }
        Ok(Self {
            margin,
            bumps,
            affine,
            chi,
            psi,
        })
    }

    /// The same fields interpolated on another mesh of the same domain, for
    /// refinement studies. Fails if a bump comes closer than `margin` to the
    /// new boundary.
    pub fn transfer(&self, mesh: &TriMesh, margin: f64) -> Result<Self> {
        let mut chi = Vec::with_capacity(self.len());
        let mut psi = Vec::with_capacity(self.len());
        for (bump, &(a, b)) in self.bumps.iter().zip(&self.affine) {
            let c = bump.interpolate(mesh);
            if (0..mesh.n_vertices()).any(|v| mesh.vertex_boundary_distance[v] < margin && c.at(v)[0] != 0.0) {
                return Err(LabError::Parameter {
                    name: "margin",
                    reason: format!("bump at {:?} does not fit the new mesh", bump.centre),
                });
            }
            chi.push(c);
            psi.push(bump_field(mesh, *bump, a, b)?);
        }
        Ok(Self {
            margin,
            bumps: self.bumps.clone(),
            affine: self.affine.clone(),
            chi,
            psi,
        })
    }

    /// 64 fields with margin `2h`.
    pub fn standard(mesh: &TriMesh, seed: u64) -> Result<Self> {
        Self::new(mesh, 64, seed, 2.0 * mesh.h)
    }

    pub fn len(&self) -> usize {
        self.chi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chi.is_empty()
    }

    /// Barycentre values of the first `count` bumps.
    pub fn xi(&self, mesh: &TriMesh, count: usize) -> Vec<Vec<f64>> {
        self.chi
            .iter()
            .take(count)
            .map(|f| (0..mesh.n_cells()).map(|c| f.at_barycentre(mesh, c)[0]).collect())
            .collect()
    }
}

/// Max of a per-field residual over a bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankResidual {
    pub max: f64,
    pub index: usize,
    pub values: Vec<f64>,
}

impl BankResidual {
    fn from_values(values: Vec<f64>) -> Self {
        let (mut max, mut index) = (0.0, 0);
        for (i, &v) in values.iter().enumerate() {
            if v > max {
                max = v;
                index = i;
            }
        }
        Self { max, index, values }
    }
}

fn max_norm(f: &CellField) -> f64 {
    (0..f.n_cells()).fold(0.0, |m, c| m.max(f.norm(c)))
}

/// Inner-variation residual
/// `|int (Du^T Du : D psi - |Du|^2 div psi / p) dmu| / (e^2 max |D psi|)`.
pub fn pohozaev_residual(mesh: &TriMesh, pair: &MeasureFunctionPair, bank: &TestFieldBank) -> Result<BankResidual> {
    let n = pair.n_comp();
    let mut values = Vec::with_capacity(bank.len());
    for psi in &bank.psi {
        let dpsi = cell_gradient(mesh, psi)?;
        let scale = pair.e * pair.e * max_norm(&dpsi);
        if pair.degenerate || scale == 0.0 {
            values.push(0.0);
            continue;
        }
        let terms: Vec<f64> = (0..mesh.n_cells())
            .map(|c| {
                let f = pair.f.matrix(c);
                let j = dpsi.matrix(c);
                let mut ftf = [0.0; 4];
                for k in 0..n {
                    for a in 0..2 {
                        for b in 0..2 {
                            ftf[2 * a + b] += f[2 * k + a] * f[2 * k + b];
                        }
                    }
                }
                let inner: f64 = (0..4).map(|i| ftf[i] * j[i]).sum();
                let div = j[0] + j[3];
                pair.mu[c] * (inner - (ftf[0] + ftf[3]) * div / pair.p)
            })
            .collect();
        values.push(pairwise_sum(&terms).abs() / scale);
    }
    Ok(BankResidual::from_values(values))
}

/// `|sum_c ||T|| sum_k T^_k . (D psi T^_k)| / (M(T) max |D psi|)`.
pub fn geodesic_residual(mesh: &TriMesh, t: &CurrentTuple, bank: &TestFieldBank) -> Result<BankResidual> {
    let n = t.n_comp();
    let mass = t.joint_mass();
    let mut values = Vec::with_capacity(bank.len());
    for psi in &bank.psi {
        let dpsi = cell_gradient(mesh, psi)?;
        let scale = mass * max_norm(&dpsi);
        if scale == 0.0 {
            values.push(0.0);
            continue;
        }
        let terms: Vec<f64> = (0..mesh.n_cells())
            .map(|c| {
                let d = t.direction.matrix(c);
                let j = dpsi.matrix(c);
                let s: f64 = (0..n)
                    .map(|k| {
                        let (x, y) = (d[2 * k], d[2 * k + 1]);
                        x * (j[0] * x + j[1] * y) + y * (j[2] * x + j[3] * y)
                    })
                    .sum();
                t.mass[c] * s
            })
            .collect();
        values.push(pairwise_sum(&terms).abs() / scale);
    }
    Ok(BankResidual::from_values(values))
}

/// Density ratios at one centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSample {
    pub x0: Point,
    pub radii: Vec<f64>,
    /// `||T||(B_r) / r`.
    pub theta: Vec<f64>,
    /// Shell integral of `(1 - |T^ nu|^2) / |x - x0|` over `B_r \ B_s` for
    /// consecutive radii `s < r`.
    pub shell: Vec<f64>,
    /// `|theta_r - theta_s - shell|`.
    pub mismatch: Vec<f64>,
    /// Largest `(theta_s - theta_r)^+ / theta_r` over consecutive radii.
    pub worst_decrease: f64,
    /// Smallest `C` with every relative decrease at most `C h / s`.
    pub required_c: f64,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaReport {
    pub samples: Vec<ThetaSample>,
    pub c: f64,
    pub h: f64,
    pub required_c: f64,
    pub pass: bool,
}

fn alignment_defect(d: &[f64], nu: Point) -> f64 {
    let s: f64 = d
        .chunks(2)
        .map(|row| {
            let v = row[0] * nu[0] + row[1] * nu[1];
            v * v
        })
        .sum();
    1.0 - s
}

pub fn theta_monotonicity(
    mesh: &TriMesh,
    t: &CurrentTuple,
    samples: &[Point],
    radii: &[f64],
    c: f64,
) -> Result<ThetaReport> {
    let mut out = Vec::with_capacity(samples.len());
    for &x0 in samples {
        let cover = balls_and_shells(mesh, x0, radii)?;
        if cover.exceeds_boundary.iter().any(|&b| b) {
            out.push(ThetaSample {
                x0,
                radii: radii.to_vec(),
                theta: vec![],
                shell: vec![],
                mismatch: vec![],
                worst_decrease: 0.0,
                required_c: 0.0,
                skipped: Some(format!(
                    "largest radius exceeds boundary distance {:.4}",
                    mesh.boundary_distance(x0)
                )),
            });
            continue;
        }
        let theta: Vec<f64> = (0..radii.len()).map(|k| t.mass_of(&cover.cells[k]) / radii[k]).collect();
        let mut shell = Vec::with_capacity(radii.len().saturating_sub(1));
        let mut mismatch = Vec::with_capacity(shell.capacity());
        let (mut worst, mut need) = (0.0f64, 0.0f64);
        for k in 1..radii.len() {
            let s = radii[k - 1];
            let terms: Vec<f64> = cover.cells[k]
                .iter()
                .filter_map(|&cc| {
                    let b = mesh.barycentres[cc];
                    let d = [b[0] - x0[0], b[1] - x0[1]];
                    let rho = d[0].hypot(d[1]);
                    (rho >= s).then(|| {
                        t.mass[cc] * alignment_defect(t.direction.matrix(cc), [d[0] / rho, d[1] / rho]) / rho
                    })
                })
                .collect();
            let sh = pairwise_sum(&terms);
            mismatch.push((theta[k] - theta[k - 1] - sh).abs());
            shell.push(sh);
            if theta[k] > 0.0 {
                let dec = (theta[k - 1] - theta[k]).max(0.0) / theta[k];
                worst = worst.max(dec);
                need = need.max(dec * s / mesh.h);
            }
        }
        out.push(ThetaSample {
            x0,
            radii: radii.to_vec(),
            theta,
            shell,
            mismatch,
            worst_decrease: worst,
            required_c: need,
            skipped: None,
        });
    }
    let required_c = out.iter().fold(0.0, |m: f64, s| m.max(s.required_c));
    Ok(ThetaReport {
        samples: out,
        c,
        h: mesh.h,
        required_c,
        pass: required_c <= c,
    })
}

/// Density ratios and shell integral of a continuum current by polar
/// Gauss-Legendre quadrature about `x0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuumTheta {
    pub theta_s: f64,
    pub theta_r: f64,
    pub shell: f64,
}

pub fn continuum_theta(
    density: impl Fn(Point) -> f64,
    direction: impl Fn(Point) -> Vec<f64>,
    x0: Point,
    s: f64,
    r: f64,
    order: usize,
) -> Result<ContinuumTheta> {
    if !(0.0 < s && s < r) {
        return Err(LabError::Parameter {
            name: "radii",
            reason: format!("need 0 < s < r, got s = {s}, r = {r}"),
        });
    }
    let n = NonZeroUsize::new(order.max(2)).expect("order at least two");
    let radial = GaussLegendre::new(n);
    let angular = GaussLegendre::new(n.saturating_mul(NonZeroUsize::new(2).expect("two")));
    let at = |rho: f64, phi: f64| [x0[0] + rho * phi.cos(), x0[1] + rho * phi.sin()];
    let ball = |radius: f64| {
        radial.integrate(0.0, radius, |rho| {
            angular.integrate(0.0, std::f64::consts::TAU, |phi| density(at(rho, phi))) * rho
        })
    };
    let shell = radial.integrate(s, r, |rho| {
        angular.integrate(0.0, std::f64::consts::TAU, |phi| {
            let x = at(rho, phi);
            density(x) * alignment_defect(&direction(x), [phi.cos(), phi.sin()])
        })
    });
    Ok(ContinuumTheta {
        theta_s: ball(s) / s,
        theta_r: ball(r) / r,
        shell,
    })
}

/// Per-vertex max of `|Du|` over cells meeting `B_r(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DuStar {
    pub radius: f64,
    pub values: Vec<f64>,
    pub argmax: usize,
    pub max: f64,
}

impl DuStar {
    pub fn write_csv<W: Write>(&self, mut w: W, mesh: &TriMesh) -> Result<()> {
        writeln!(w, "vertex,x,y,du_star")?;
        for (v, x) in mesh.vertices.iter().enumerate() {
            writeln!(w, "{v},{:.17e},{:.17e},{:.17e}", x[0], x[1], self.values[v])?;
        }
        Ok(())
    }
}

pub fn du_star(mesh: &TriMesh, u: &NodalField, radius: f64) -> Result<DuStar> {
    if !(radius >= 2.0 * mesh.h) {
        return Err(LabError::Parameter {
            name: "radius",
            reason: format!("radius {radius} below 2h = {}", 2.0 * mesh.h),
        });
    }
    let du = cell_gradient(mesh, u)?;
    let norms: Vec<f64> = (0..mesh.n_cells()).map(|c| du.norm(c)).collect();
    let at = |v: usize| {
        mesh.cells_meeting_ball(mesh.vertices[v], radius)
            .into_iter()
            .fold(0.0f64, |m, c| m.max(norms[c]))
    };
    let values: Vec<f64> = if mesh.n_vertices() >= PAR_VERTICES {
        (0..mesh.n_vertices()).into_par_iter().map(at).collect()
    } else {
        (0..mesh.n_vertices()).map(at).collect()
    };
    // Ties are broken by distance to the cell where |Du| peaks.
    let peak = mesh.barycentres[e_inf_of(&du).1];
    let dist = |v: usize| (mesh.vertices[v][0] - peak[0]).hypot(mesh.vertices[v][1] - peak[1]);
    let (mut max, mut argmax) = (f64::NEG_INFINITY, 0);
    for (v, &x) in values.iter().enumerate() {
        if x > max || (x == max && dist(v) < dist(argmax)) {
            max = x;
            argmax = v;
        }
    }
    Ok(DuStar {
        radius,
        values,
        argmax,
        max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub theta: f64,
    pub cells: Vec<usize>,
    pub mass_fraction: f64,
    pub area_fraction: f64,
    /// `M(T) = 0`.
    pub empty: bool,
}

impl Support {
    /// Mean of `du_star` over vertices of support cells.
    pub fn mean_du_star(&self, mesh: &TriMesh, star: &DuStar) -> f64 {
        let mut seen = vec![false; mesh.n_vertices()];
        let mut vals = Vec::new();
        for &c in &self.cells {
            for &v in &mesh.triangles[c] {
                if !seen[v] {
                    seen[v] = true;
                    vals.push(star.values[v]);
                }
            }
        }
        if vals.is_empty() {
            0.0
        } else {
            pairwise_sum(&vals) / vals.len() as f64
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W, mesh: &TriMesh, t: &CurrentTuple) -> Result<()> {
        writeln!(w, "cell,x,y,density")?;
        for &c in &self.cells {
            let b = mesh.barycentres[c];
            writeln!(w, "{c},{:.17e},{:.17e},{:.17e}", b[0], b[1], t.density(mesh, c))?;
        }
        Ok(())
    }
}

/// Cells with `||T||` density at least `theta` times the max density.
pub fn extract_support(mesh: &TriMesh, t: &CurrentTuple, theta: f64) -> Result<Support> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(LabError::Parameter {
            name: "theta",
            reason: format!("threshold {theta} must lie in (0, 1)"),
        });
    }
    let total = t.joint_mass();
    if total == 0.0 {
        return Ok(Support {
            theta,
            cells: vec![],
            mass_fraction: 0.0,
            area_fraction: 0.0,
            empty: true,
        });
    }
    let dens: Vec<f64> = (0..mesh.n_cells()).map(|c| t.density(mesh, c)).collect();
    let top = dens.iter().fold(0.0f64, |m, &d| m.max(d));
    let cells: Vec<usize> = (0..mesh.n_cells()).filter(|&c| dens[c] >= theta * top).collect();
    let area: Vec<f64> = cells.iter().map(|&c| mesh.cell_areas[c]).collect();
    Ok(Support {
        theta,
        mass_fraction: t.mass_of(&cells) / total,
        area_fraction: pairwise_sum(&area) / mesh.area,
        cells,
        empty: false,
    })
}

/// `e int chi d||T|| + T(u d chi)` per bump, with `u` at barycentres.
pub fn duality_gap(
    mesh: &TriMesh,
    t: &CurrentTuple,
    u: &NodalField,
    e: f64,
    bank: &TestFieldBank,
) -> Result<Vec<f64>> {
    let n = t.n_comp();
    if u.n_comp() != n {
        return Err(LabError::Dimension {
            what: "duality field components",
            expected: n,
            got: u.n_comp(),
        });
    }
    let ubar: Vec<Vec<f64>> = (0..mesh.n_cells()).map(|c| u.at_barycentre(mesh, c)).collect();
    let mut gaps = Vec::with_capacity(bank.len());
    for chi in &bank.chi {
        let dchi = cell_gradient(mesh, chi)?;
        let mut form = CellField::zeros(mesh.n_cells(), n);
        let mut weight = Vec::with_capacity(mesh.n_cells());
        for c in 0..mesh.n_cells() {
            let g = dchi.matrix(c);
            let m = form.matrix_mut(c);
            for k in 0..n {
                m[2 * k] = ubar[c][k] * g[0];
                m[2 * k + 1] = ubar[c][k] * g[1];
            }
            weight.push(t.mass[c] * chi.at_barycentre(mesh, c)[0]);
        }
        gaps.push(e * pairwise_sum(&weight) + pair_with_form(t, &form)?);
    }
    Ok(gaps)
}

/// Random smooth field rescaled so that its discrete `E_inf` equals `e`.
pub fn random_lipschitz_field(mesh: &TriMesh, n_comp: usize, e: f64, rng: &mut impl Rng) -> Result<NodalField> {
    let modes: Vec<[f64; 4]> = (0..4 * n_comp)
        .map(|_| {
            [
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let mut u = NodalField::from_fn(mesh, n_comp, |x| {
        (0..n_comp)
            .map(|k| {
                modes[4 * k..4 * k + 4]
                    .iter()
                    .map(|m| m[3] * (m[0] * x[0] + m[1] * x[1] + m[2]).sin())
                    .sum()
            })
            .collect()
    })?;
    let (lip, _) = e_inf_of(&cell_gradient(mesh, &u)?);
    if lip > 0.0 {
        u.as_mut_slice().iter_mut().for_each(|v| *v *= e / lip);
    }
    Ok(u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub radii: Vec<f64>,
    /// `||T||` of the boundary strip of width `r / 2`.
    pub inner: Vec<f64>,
    /// `||T||` of the boundary strip of width `r`.
    pub outer: Vec<f64>,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub beta: f64,
    /// Whether the tangential slope of the data lies strictly below the
    /// energy level; otherwise the report is informational.
    pub applicable: bool,
    pub pass: bool,
}

/// `||T||(Omega_{r/2}) / ||T||(Omega_r)` with boundary strips measured by
/// barycentre distance.
pub fn boundary_decay(mesh: &TriMesh, t: &CurrentTuple, radii: &[f64], beta: f64, applicable: bool) -> DecayReport {
    let strip = |w: f64| -> f64 {
        let cells: Vec<usize> = (0..mesh.n_cells()).filter(|&c| mesh.cell_boundary_distance[c] < w).collect();
        t.mass_of(&cells)
    };
    let inner: Vec<f64> = radii.iter().map(|&r| strip(0.5 * r)).collect();
    let outer: Vec<f64> = radii.iter().map(|&r| strip(r)).collect();
    let ratios: Vec<f64> = inner
        .iter()
        .zip(&outer)
        .map(|(&a, &b)| if b > 0.0 { a / b } else { 0.0 })
        .collect();
    let max_ratio = ratios.iter().fold(0.0f64, |m, &x| m.max(x));
    DecayReport {
        radii: radii.to_vec(),
        inner,
        outer,
        ratios,
        max_ratio,
        beta,
        applicable,
        pass: max_ratio <= beta,
    }
}

/// Perturbations `phi = chi v` with a random unit vector `v` and
/// `max |D phi| = 1`.
pub fn perturbation_bank(mesh: &TriMesh, bumps: &[Bump], n_comp: usize, seed: u64) -> Result<Vec<NodalField>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bumps
        .iter()
        .map(|b| {
            let v: Vec<f64> = (0..n_comp).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let chi = b.interpolate(mesh);
            let mut phi = NodalField::from_fn(mesh, n_comp, |_| vec![0.0; n_comp])?;
            for i in 0..mesh.n_vertices() {
                let w = chi.at(i)[0];
                phi.at_mut(i).iter_mut().zip(&v).for_each(|(o, x)| *o = w * x / nv);
            }
            let (lip, _) = e_inf_of(&cell_gradient(mesh, &phi)?);
            if lip > 0.0 {
                phi.as_mut_slice().iter_mut().for_each(|x| *x /= lip);
            }
            Ok(phi)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidityEntry {
    pub index: usize,
    /// Share of `M(T)` on cells where `phi` is not identically zero.
    pub support_mass_fraction: f64,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// `delta > 0` for every nonzero `t`.
    pub raises: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidityReport {
    pub entries: Vec<RigidityEntry>,
    /// Every entry carrying at least 10% of `M(T)` raises `E_inf`.
    pub rigid: bool,
    /// `(index, t)` with `delta <= 0` and `t != 0`.
    pub slack: Vec<(usize, f64)>,
}

/// `t` values `{+-0.02, +-0.05, +-0.1} e` for unit-Lipschitz perturbations.
pub fn default_t_grid(e: f64) -> Vec<f64> {
    let s = if e > 0.0 { e } else { 1.0 };
    [0.02, 0.05, 0.1].iter().flat_map(|&a| [-a * s, a * s]).collect()
}

/// `E_inf(u + t phi) - E_inf(u)` over perturbations and step sizes.
pub fn rigidity_probe(
    mesh: &TriMesh,
    u: &NodalField,
    t: &CurrentTuple,
    bank: &[NodalField],
    t_grid: &[f64],
) -> Result<RigidityReport> {
    let (base, _) = e_inf_of(&cell_gradient(mesh, u)?);
    let total = t.joint_mass();
    let mut entries = Vec::with_capacity(bank.len());
    let mut slack = Vec::new();
    for (i, phi) in bank.iter().enumerate() {
        let cells: Vec<usize> = (0..mesh.n_cells())
            .filter(|&c| mesh.triangles[c].iter().any(|&v| phi.at(v).iter().any(|&x| x != 0.0)))
            .collect();
        let frac = if total > 0.0 { t.mass_of(&cells) / total } else { 0.0 };
        let mut delta = Vec::with_capacity(t_grid.len());
        for &s in t_grid {
            let (e, _) = e_inf_of(&cell_gradient(mesh, &u.combine(1.0, phi, s))?);
            let d = e - base;
            if s != 0.0 && d <= 0.0 {
                slack.push((i, s));
            }
            delta.push(d);
        }
        let raises = t_grid.iter().zip(&delta).all(|(&s, &d)| s == 0.0 || d > 0.0);
        entries.push(RigidityEntry {
            index: i,
            support_mass_fraction: frac,
            t: t_grid.to_vec(),
            delta,
            raises,
        });
    }
    let rigid = entries.iter().all(|e| e.support_mass_fraction < 0.1 || e.raises);
    Ok(RigidityReport { entries, rigid, slack })
}

/// Nodal fields `sigma` whose exact forms `d sigma` test boundary agreement:
/// quadratic monomials and bank bumps, one component at a time.
pub fn exact_form_bank(mesh: &TriMesh, bank: &TestFieldBank, n_comp: usize, size: usize) -> Result<Vec<NodalField>> {
    let (lo, hi) = mesh.bounding_box();
    let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let half = [0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1])];
    let mut out = Vec::with_capacity(size);
    let monomials = [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];
    'fill: for (a, b) in monomials {
        for k in 0..n_comp {
            if out.len() == size {
                break 'fill;
            }
            out.push(NodalField::from_fn(mesh, n_comp, |x| {
                let v = ((x[0] - c[0]) / half[0]).powi(a) * ((x[1] - c[1]) / half[1]).powi(b);
                (0..n_comp).map(|j| if j == k { v } else { 0.0 }).collect()
            })?);
        }
    }
    let mut i = 0;
    while out.len() < size && !bank.is_empty() {
        let chi = &bank.chi[i % bank.len()];
        let k = (i / bank.len()) % n_comp;
        let mut f = NodalField::zeros(mesh.n_vertices(), n_comp);
        for v in 0..mesh.n_vertices() {
            f.at_mut(v)[k] = chi.at(v)[0];
        }
        out.push(f);
        i += 1;
    }
    Ok(out)
}

/// Competitor `S = T + sum_k rot(psi_k)` with cell fluxes
/// `|c| (d psi_k / dy, -d psi_k / dx)`; `S` has the same boundary as `T`
/// whenever `psi` vanishes on the boundary.
pub fn stream_competitor(mesh: &TriMesh, t: &CurrentTuple, psi: &NodalField) -> Result<CurrentTuple> {
    if psi.n_comp() != t.n_comp() {
        return Err(LabError::Dimension {
            what: "stream function components",
            expected: t.n_comp(),
            got: psi.n_comp(),
        });
    }
    let dpsi = cell_gradient(mesh, psi)?;
    let mut g = t.flux();
    for c in 0..mesh.n_cells() {
        let a = mesh.cell_areas[c];
        let d = dpsi.matrix(c).to_vec();
        let m = g.matrix_mut(c);
        for k in 0..t.n_comp() {
            m[2 * k] += a * d[2 * k + 1];
            m[2 * k + 1] -= a * d[2 * k];
        }
    }
    Ok(CurrentTuple::from_flux(mesh, &g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassComparison {
    pub mass_t: f64,
    pub mass_s: f64,
    pub holds: bool,
    pub bank_size: usize,
    pub max_mismatch: f64,
}

/// `||T||(K) <= ||S||(K) + tol` for a competitor that agrees with `T` off
/// `K` and has the same boundary action on `forms`.
pub fn local_mass_comparison(
    mesh: &TriMesh,
    t: &CurrentTuple,
    k: &[usize],
    s: &CurrentTuple,
    forms: &[NodalField],
    tol: f64,
) -> Result<MassComparison> {
    if s.n_comp() != t.n_comp() || s.mass.len() != t.mass.len() {
        return Err(LabError::Dimension {
            what: "competitor shape",
            expected: t.mass.len() * t.n_comp(),
            got: s.mass.len() * s.n_comp(),
        });
    }
    let mut inside = vec![false; mesh.n_cells()];
    k.iter().for_each(|&c| inside[c] = true);
    let (gt, gs) = (t.flux(), s.flux());
    let scale = (0..mesh.n_cells()).fold(0.0f64, |m, c| m.max(gt.norm(c)));
    for c in (0..mesh.n_cells()).filter(|&c| !inside[c]) {
        let d = gt
            .matrix(c)
            .iter()
            .zip(gs.matrix(c))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if d > 1e-12 * scale {
            return Err(LabError::Competitor {
                reason: "competitor differs outside the comparison set",
                form: c,
                mismatch: d,
            });
        }
    }
    let reference = t.joint_mass().max(f64::MIN_POSITIVE);
    let mut max_mismatch = 0.0f64;
    for (i, sigma) in forms.iter().enumerate() {
        let d = (s.apply_to_gradient(mesh, sigma)? - t.apply_to_gradient(mesh, sigma)?).abs();
        if d > 1e-10 * reference * sigma.max_abs().max(1.0) {
            return Err(LabError::Competitor {
                reason: "boundary actions differ on a test form",
                form: i,
                mismatch: d,
            });
        }
        max_mismatch = max_mismatch.max(d);
    }
    let (mass_t, mass_s) = (t.mass_of(k), s.mass_of(k));
    Ok(MassComparison {
        mass_t,
        mass_s,
        holds: mass_t <= mass_s + tol,
        bank_size: forms.len(),
        max_mismatch,
    })
}

/// Summary of the diagnostics suite on one state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub p: f64,
    pub e_p: f64,
    pub bank_size: usize,
    pub pohozaev_residual: Option<f64>,
    pub geodesic_residual: Option<f64>,
    pub geodesic_trend: Vec<(f64, f64)>,
    pub theta: Option<ThetaReport>,
    pub support: Option<SupportSummary>,
    pub du_star: Option<DuStarSummary>,
    pub duality: Option<DualitySummary>,
    pub decay: Option<DecayReport>,
    pub rigidity: Option<RigidityReport>,
    pub mass_comparisons: Vec<MassComparison>,
    pub mass_estimate_min_slack: Option<f64>,
    pub mollifier_trace: Vec<(f64, f64)>,
    pub commutator: Option<crate::current::Commutator>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub theta: f64,
    pub n_cells: usize,
    pub mass_fraction: f64,
    pub area_fraction: f64,
    pub mean_du_star: f64,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuStarSummary {
    pub radius: f64,
    pub max: f64,
    pub argmax: Point,
    pub min: f64,
}

impl DuStarSummary {
    pub fn new(mesh: &TriMesh, star: &DuStar) -> Self {
        Self {
            radius: star.radius,
            max: star.max,
            argmax: mesh.vertices[star.argmax],
            min: star.values.iter().fold(f64::INFINITY, |m, &x| m.min(x)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualitySummary {
    pub draws: usize,
    /// Smallest gap over the random draws.
    pub min_gap: f64,
    /// Largest `|gap|` for the computed state at its own level `E_inf(u)`,
    /// relative to `E_inf(u) int chi d||T||`.
    pub equality_deficit: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::current::{make_current, make_pair};
    use crate::mesh::{build_mesh, DomainSpec};
    use proptest::prelude::*;

    fn square(h: f64) -> TriMesh {
        build_mesh(&DomainSpec::unit_square(h)).unwrap()
    }

    fn strip_current(m: &TriMesh, p: f64) -> (NodalField, MeasureFunctionPair, CurrentTuple) {
        let u = NodalField::from_fn(m, 1, |x| vec![x[0]]).unwrap();
        let pair = make_pair(m, &u, p, 1.0).unwrap();
        let t = make_current(m, &pair, 1.0).unwrap();
        (u, pair, t)
    }

    #[test]
    fn bank_respects_margin_and_sign() {
        let m = build_mesh(&DomainSpec::disk([0.0, 0.0], 1.0, 0.05)).unwrap();
        let bank = TestFieldBank::standard(&m, 5).unwrap();
        assert_eq!(bank.len(), 64);
        for (chi, psi) in bank.chi.iter().zip(&bank.psi) {
            for v in 0..m.n_vertices() {
                assert!(chi.at(v)[0] >= 0.0);
                if m.vertex_boundary_distance[v] < bank.margin {
                    assert_eq!(chi.at(v)[0], 0.0);
                    assert_eq!(psi.at(v), &[0.0, 0.0]);
                }
            }
        }
        let again = TestFieldBank::standard(&m, 5).unwrap();
        assert_eq!(bank.bumps, again.bumps);
    }

    #[test]
    fn bank_fails_without_room() {
        let m = square(0.25);
        assert!(TestFieldBank::new(&m, 4, 0, 0.6).is_err());
    }

    #[test]
    fn exact_cancellation_on_strip_and_identity() {
        let m = square(0.05);
        let bank = TestFieldBank::standard(&m, 1).unwrap();
        let (_, pair, t) = strip_current(&m, 64.0);
        assert!(pohozaev_residual(&m, &pair, &bank).unwrap().max < 1e-12);
        assert!(geodesic_residual(&m, &t, &bank).unwrap().max < 1e-12);
        let u = NodalField::from_fn(&m, 2, |x| vec![x[0], x[1]]).unwrap();
        let s2 = 2f64.sqrt();
        let pair = make_pair(&m, &u, 64.0, s2).unwrap();
        let t = make_current(&m, &pair, s2).unwrap();
        assert!(pohozaev_residual(&m, &pair, &bank).unwrap().max < 1e-12);
        assert!(geodesic_residual(&m, &t, &bank).unwrap().max < 1e-12);
    }

    #[test]
    fn geodesic_residual_detects_curved_flow() {
        let m = square(0.05);
        let bank = TestFieldBank::standard(&m, 2).unwrap();
        let t = CurrentTuple::from_density(&m, 1, |x| 1.0 + x[0], |x| vec![x[1] - 0.5, 0.5 - x[0]]).unwrap();
        assert!(geodesic_residual(&m, &t, &bank).unwrap().max > 1e-3);
    }

    #[test]
    fn continuum_identity_constant_direction() {
        let c = 0.7;
        let out = continuum_theta(|_| c, |_| vec![1.0, 0.0], [0.1, -0.2], 0.1, 0.4, 32).unwrap();
        let pi = std::f64::consts::PI;
        assert!((out.theta_s - c * pi * 0.1).abs() < 1e-12);
        assert!((out.theta_r - c * pi * 0.4).abs() < 1e-12);
        assert!((out.shell - c * pi * 0.3).abs() < 1e-12);
    }

    #[test]
    fn continuum_identity_radial_field() {
        let x0 = [0.0, 0.0];
        let density = |x: Point| 1.0 / x[0].hypot(x[1]);
        let direction = |x: Point| {
            let r = x[0].hypot(x[1]);
            vec![x[0] / r, x[1] / r]
        };
        let out = continuum_theta(density, direction, x0, 0.2, 0.5, 24).unwrap();
        assert!(out.shell.abs() < 1e-12);
        assert!((out.theta_s - out.theta_r).abs() < 1e-12);
        assert!(continuum_theta(|_| 1.0, |_| vec![1.0, 0.0], x0, 0.5, 0.2, 8).is_err());
    }

    #[test]
    fn strip_theta_is_increasing() {
        let m = square(0.02);
        let (_, _, t) = strip_current(&m, 16.0);
        let h = m.h;
        let rep = theta_monotonicity(&m, &t, &[[0.5, 0.5], [0.45, 0.55], [0.05, 0.5]], &[4.0 * h, 8.0 * h, 12.0 * h], 4.0)
            .unwrap();
        assert!(rep.samples[2].skipped.is_some());
        for s in &rep.samples[..2] {
            assert!(s.skipped.is_none());
            assert!(s.theta.windows(2).all(|w| w[1] > w[0]));
            assert!(s.shell.iter().all(|&x| x > 0.0));
        }
        assert!(rep.pass);
    }

    #[test]
    fn du_star_affine_and_identity() {
        let m = square(0.05);
        let u = NodalField::from_fn(&m, 1, |x| vec![3.0 * x[0] - 4.0 * x[1]]).unwrap();
        let s = du_star(&m, &u, 2.0 * m.h).unwrap();
        assert!(s.values.iter().all(|&v| (v - 5.0).abs() < 1e-12));
        let id = NodalField::from_fn(&m, 2, |x| vec![x[0], x[1]]).unwrap();
        let s = du_star(&m, &id, 3.0 * m.h).unwrap();
        assert!(s.values.iter().all(|&v| (v - 2f64.sqrt()).abs() < 1e-12));
        assert!(du_star(&m, &u, m.h).is_err());
    }

    #[test]
    fn support_of_uniform_current_is_everything() {
        let m = square(0.1);
        let (_, _, t) = strip_current(&m, 8.0);
        for th in [0.1, 0.5, 0.9] {
            let s = extract_support(&m, &t, th).unwrap();
            assert_eq!(s.cells.len(), m.n_cells());
            assert!((s.mass_fraction - 1.0).abs() < 1e-12);
        }
        assert!(extract_support(&m, &t, 1.0).is_err());
        let zero = CurrentTuple::from_flux(&m, &CellField::zeros(m.n_cells(), 1));
        assert!(extract_support(&m, &zero, 0.1).unwrap().empty);
    }

    #[test]
    fn strip_duality_is_tight() {
        let m = square(0.05);
        let bank = TestFieldBank::standard(&m, 4).unwrap();
        let (u, _, t) = strip_current(&m, 32.0);
        let gaps = duality_gap(&m, &t, &u, 1.0, &bank).unwrap();
        assert!(gaps.iter().all(|g| g.abs() < 1e-12), "{gaps:?}");
        let c = NodalField::from_fn(&m, 1, |_| vec![2.0]).unwrap();
        let gaps = duality_gap(&m, &t, &c, 1.0, &bank).unwrap();
        assert!(gaps.iter().all(|&g| g > 0.0));
    }

    #[test]
    fn random_fields_have_requested_lipschitz_level() {
        let m = square(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_lipschitz_field(&m, 2, 0.8, &mut rng).unwrap();
        let (e, _) = e_inf_of(&cell_gradient(&m, &u).unwrap());
        assert!((e - 0.8).abs() < 1e-12);
    }

    #[test]
    fn uniform_strip_decay_halves() {
        let m = square(0.01);
        let (_, _, t) = strip_current(&m, 8.0);
        let rep = boundary_decay(&m, &t, &[0.2, 0.1], 0.95, true);
        for (r, q) in rep.radii.iter().zip(&rep.ratios) {
            let oracle = (1.0 - (1.0 - r).powi(2)) / (1.0 - (1.0 - 2.0 * r).powi(2));
            assert!((q - oracle).abs() < 0.03, "{q} vs {oracle}");
        }
        assert!(rep.pass);
    }

    #[test]
    fn rigidity_on_strip() {
        let m = square(0.05);
        let (u, _, t) = strip_current(&m, 8.0);
        let bump = Bump {
            centre: [0.5, 0.5],
            scale: 0.3,
        };
        let bank = perturbation_bank(&m, &[bump], 1, 0).unwrap();
        let rep = rigidity_probe(&m, &u, &t, &bank, &[-0.01, 0.01]).unwrap();
        assert!(rep.rigid && rep.entries[0].raises && rep.slack.is_empty());
        assert!(rep.entries[0].support_mass_fraction > 0.1);
        let zero = vec![NodalField::zeros(m.n_vertices(), 1)];
        let rep = rigidity_probe(&m, &u, &t, &zero, &[0.01]).unwrap();
        assert_eq!(rep.entries[0].delta, vec![0.0]);
    }

    #[test]
    fn competitor_equal_to_current_is_equal() {
        let m = square(0.1);
        let (_, _, t) = strip_current(&m, 8.0);
        let bank = TestFieldBank::standard(&m, 0).unwrap();
        let forms = exact_form_bank(&m, &bank, 1, 64).unwrap();
        assert_eq!(forms.len(), 64);
        let k: Vec<usize> = (0..m.n_cells()).filter(|&c| m.barycentres[c][0] < 0.5).collect();
        let cmp = local_mass_comparison(&m, &t, &k, &t, &forms, 1e-12).unwrap();
        assert_eq!(cmp.mass_t, cmp.mass_s);
        assert!(cmp.holds);
    }

    #[test]
    fn mismatched_competitor_is_rejected() {
        let m = square(0.1);
        let (_, _, t) = strip_current(&m, 8.0);
        let bank = TestFieldBank::standard(&m, 0).unwrap();
        let forms = exact_form_bank(&m, &bank, 1, 16).unwrap();
        let k: Vec<usize> = (0..m.n_cells()).filter(|&c| m.barycentres[c][0] < 0.5).collect();
        let s = CurrentTuple::from_density(&m, 1, |x| if x[0] < 0.5 { 2.0 } else { 1.0 }, |_| vec![1.0, 0.0]).unwrap();
        match local_mass_comparison(&m, &t, &k, &s, &forms, 1e-12) {
            Err(LabError::Competitor { .. }) => {}
            other => panic!("expected a competitor error, got {other:?}"),
        }
        let s = CurrentTuple::from_density(&m, 1, |x| if x[0] < 0.5 { 1.0 } else { 2.0 }, |_| vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            local_mass_comparison(&m, &t, &k, &s, &forms, 1e-12),
            Err(LabError::Competitor { .. })
        ));
    }

    #[test]
    fn diagnostics_report_round_trips() {
        let rep = DiagnosticsReport {
            p: 8.0,
            e_p: 0.5,
            pohozaev_residual: Some(1e-3),
            geodesic_trend: vec![(16.0, 0.1), (1024.0, 0.01)],
            ..Default::default()
        };
        let s = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<DiagnosticsReport>(&s).unwrap(), rep);
    }

    proptest! {
        #[test]
        fn du_star_dominates_and_shrinks(a in -2.0f64..2.0, b in -2.0f64..2.0, k in 1.0f64..6.0) {
            let m = square(0.1);
            let u = NodalField::from_fn(&m, 1, |x| vec![(k * x[0]).sin() * a + b * x[0] * x[1]]).unwrap();
            let du = cell_gradient(&m, &u).unwrap();
            let small = du_star(&m, &u, 2.0 * m.h).unwrap();
            let large = du_star(&m, &u, 4.0 * m.h).unwrap();
            for c in 0..m.n_cells() {
                for &v in &m.triangles[c] {
                    prop_assert!(small.values[v] >= du.norm(c));
                }
            }
            for v in 0..m.n_vertices() {
                prop_assert!(large.values[v] >= small.values[v]);
            }
        }

        #[test]
        fn stream_competitors_keep_boundary(amp in -0.5f64..0.5, cx in 0.35f64..0.65, cy in 0.35f64..0.65) {
            let m = square(0.05);
            let (_, _, t) = strip_current(&m, 8.0);
            let bump = Bump { centre: [cx, cy], scale: 0.25 };
            let psi = NodalField::from_fn(&m, 1, |x| vec![amp * bump.value(x)]).unwrap();
            let s = stream_competitor(&m, &t, &psi).unwrap();
            let bank = TestFieldBank::standard(&m, 3).unwrap();
            let forms = exact_form_bank(&m, &bank, 1, 64).unwrap();
            let k: Vec<usize> = (0..m.n_cells())
                .filter(|&c| m.triangles[c].iter().any(|&v| psi.at(v)[0] != 0.0))
                .collect();
            let cmp = local_mass_comparison(&m, &t, &k, &s, &forms, 1e-12).unwrap();
            prop_assert!(cmp.holds);
            prop_assert!(cmp.mass_s >= cmp.mass_t - 1e-12);
        }
    }
}
