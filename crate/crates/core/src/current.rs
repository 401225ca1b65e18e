//! Measure-function pairs, 1-currents built from them, and the pairings and
//! comparisons used to inspect a continuation run.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::boundary::{flux_residual, relative_powers, split_boundary_flux};
use crate::error::{LabError, Result};
use crate::mesh::{cell_gradient, pairwise_sum, CellField, NodalField, Point, TriMesh};

/// Per-cell weights `mu` (total cell mass, normalised by `|Omega|`) and a
/// per-cell `N x 2` matrix field `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureFunctionPair {
    pub mu: Vec<f64>,
    pub f: CellField,
    pub p: f64,
    pub e: f64,
    /// Set when `e = 0`: `mu` is normalised Lebesgue measure and `F = 0`.
    pub degenerate: bool,
}

impl MeasureFunctionPair {
    pub fn n_comp(&self) -> usize {
        self.f.n_comp()
    }

    pub fn total_mass(&self) -> f64 {
        pairwise_sum(&self.mu)
    }

    /// `int |F|^2 dmu`.
    pub fn energy(&self) -> f64 {
        let t: Vec<f64> = (0..self.mu.len()).map(|c| self.mu[c] * self.f.norm(c).powi(2)).collect();
        pairwise_sum(&t)
    }

    /// `int xi dmu` for a per-cell function.
    pub fn integrate(&self, xi: &[f64]) -> f64 {
        let t: Vec<f64> = self.mu.iter().zip(xi).map(|(m, x)| m * x).collect();
        pairwise_sum(&t)
    }

    /// Slack in `a^2 e^2 int xi dmu <= int xi |F|^2 dmu + a^p e^2 max xi`;
    /// nonnegative whenever the pair comes from `make_pair`.
    pub fn mass_estimate_slack(&self, xi: &[f64], alpha: f64) -> f64 {
        let e2 = self.e * self.e;
        let weighted: Vec<f64> = (0..self.mu.len())
            .map(|c| xi[c] * self.f.norm(c).powi(2) * self.mu[c])
            .collect();
        let max_xi = xi.iter().fold(0.0f64, |m, &x| m.max(x));
        pairwise_sum(&weighted) + alpha.powf(self.p) * e2 * max_xi - alpha * alpha * e2 * self.integrate(xi)
    }
}

/// `mu_c = |c| (|Du_c| / e_p)^(p - 2) / |Omega|`, `F = Du`.
pub fn make_pair(mesh: &TriMesh, u_p: &NodalField, p: f64, e_p: f64) -> Result<MeasureFunctionPair> {
    if !(p >= 2.0) || !p.is_finite() {
        return Err(LabError::Parameter {
            name: "p",
            reason: format!("exponent {p} must be finite and at least 2"),
        });
    }
    if !(e_p >= 0.0) || !e_p.is_finite() {
        return Err(LabError::Parameter {
            name: "e_p",
            reason: format!("energy level {e_p} must be finite and nonnegative"),
        });
    }
    let du = cell_gradient(mesh, u_p)?;
    if e_p == 0.0 {
        return Ok(MeasureFunctionPair {
            mu: mesh.cell_areas.iter().map(|a| a / mesh.area).collect(),
            f: CellField::zeros(mesh.n_cells(), u_p.n_comp()),
            p,
            e: 0.0,
            degenerate: true,
        });
    }
    let pow = relative_powers(&du, p, e_p);
    let mu = (0..mesh.n_cells()).map(|c| mesh.cell_areas[c] * pow[c] / mesh.area).collect();
    Ok(MeasureFunctionPair {
        mu,
        f: du,
        p,
        e: e_p,
        degenerate: false,
    })
}

/// An N-tuple of 1-currents `[||T||, T^]` on a mesh. `mass[c]` is the total
/// `||T||` weight of cell `c`, `direction` holds unit N x 2 matrices, and
/// `charges[e]` holds the boundary charge vectors at the start and end vertex
/// of boundary edge `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurrentTuple {
    pub mass: Vec<f64>,
    pub direction: CellField,
    pub charges: Vec<[Vec<f64>; 2]>,
    /// Relative interior stationarity of `||T|| T^`.
    pub interior_residual: f64,
    /// Total boundary charge per component before rebalancing.
    pub closure_defect: Vec<f64>,
    pub degenerate: bool,
}

impl CurrentTuple {
    /// Current with `||T|| T^ = G` for a per-cell flux `G` carrying cell
    /// masses. Boundary charges reproduce `sum_c G_c : D sigma` at every
    /// boundary vertex.
    pub fn from_flux(mesh: &TriMesh, g: &CellField) -> Self {
        Self::build(mesh, g, false)
    }

    /// Current with cell densities and directions given pointwise at
    /// barycentres; `direction` is normalised per cell.
    pub fn from_density(
        mesh: &TriMesh,
        n_comp: usize,
        density: impl Fn(Point) -> f64,
        direction: impl Fn(Point) -> Vec<f64>,
    ) -> Result<Self> {
        let mut g = CellField::zeros(mesh.n_cells(), n_comp);
        for c in 0..mesh.n_cells() {
            let x = mesh.barycentres[c];
            let d = direction(x);
            if d.len() != 2 * n_comp {
                return Err(LabError::Dimension {
                    what: "direction matrix",
                    expected: 2 * n_comp,
                    got: d.len(),
                });
            }
            let rho = density(x);
            if !(rho >= 0.0) {
                return Err(LabError::Domain {
                    field: "density",
                    reason: format!("negative or NaN density {rho} at ({}, {})", x[0], x[1]),
                });
            }
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                let w = rho * mesh.cell_areas[c] / n;
                g.matrix_mut(c).iter_mut().zip(&d).for_each(|(o, v)| *o = w * v);
            }
        }
        Ok(Self::from_flux(mesh, &g))
    }

    fn build(mesh: &TriMesh, g: &CellField, rebalance: bool) -> Self {
        let n = g.n_comp();
        let mut mass = vec![0.0; mesh.n_cells()];
        let mut direction = CellField::zeros(mesh.n_cells(), n);
        for c in 0..mesh.n_cells() {
            let m = g.norm(c);
            if m > 0.0 {
                mass[c] = m;
                direction
                    .matrix_mut(c)
                    .iter_mut()
                    .zip(g.matrix(c))
                    .for_each(|(d, x)| *d = x / m);
            }
        }
        let res = flux_residual(mesh, g);
        let share: Vec<f64> = mesh
            .boundary_edges
            .iter()
            .map(|e| mass[e.cell] / mesh.cell_areas[e.cell] * e.length)
            .collect();
        let mut charges = split_boundary_flux(mesh, g, &res.nodal, &share);
        let closure_defect = total_charge(&charges, n);
        if rebalance {
            let total: f64 = share.iter().sum();
            let lengths: f64 = mesh.boundary_edges.iter().map(|e| e.length).sum();
            for (k, e) in mesh.boundary_edges.iter().enumerate() {
                let w = if total > 0.0 { share[k] / total } else { e.length / lengths };
                for end in 0..2 {
                    for j in 0..n {
                        charges[k][end][j] -= 0.5 * w * closure_defect[j];
                    }
                }
            }
        }
        Self {
            mass,
            direction,
            charges,
            interior_residual: res.interior_relative,
            closure_defect,
            degenerate: false,
        }
    }

    pub fn n_comp(&self) -> usize {
        self.direction.n_comp()
    }

    /// Joint mass `M(T)`.
    pub fn joint_mass(&self) -> f64 {
        pairwise_sum(&self.mass)
    }

    /// `||T||` weight per unit area on cell `c`.
    pub fn density(&self, mesh: &TriMesh, c: usize) -> f64 {
        self.mass[c] / mesh.cell_areas[c]
    }

    /// `||T||` of a set of cells.
    pub fn mass_of(&self, cells: &[usize]) -> f64 {
        let t: Vec<f64> = cells.iter().map(|&c| self.mass[c]).collect();
        pairwise_sum(&t)
    }

    /// `||T|| T^` per cell.
    pub fn flux(&self) -> CellField {
        let mut g = self.direction.clone();
        for c in 0..self.mass.len() {
            let m = self.mass[c];
            g.matrix_mut(c).iter_mut().for_each(|x| *x *= m);
        }
        g
    }

    /// `dT(1)` per component.
    pub fn boundary_total(&self) -> Vec<f64> {
        total_charge(&self.charges, self.n_comp())
    }

    /// `T(d sigma) = sum_c ||T|| T^ : D sigma` for a nodal field.
    pub fn apply_to_gradient(&self, mesh: &TriMesh, sigma: &NodalField) -> Result<f64> {
        let ds = cell_gradient(mesh, sigma)?;
        pair_with_form(self, &ds)
    }

    pub fn write_csv<W: Write>(&self, mut w: W, mesh: &TriMesh) -> Result<()> {
        let n = self.n_comp();
        write!(w, "cell,x,y,density")?;
        for k in 0..n {
            write!(w, ",t{k}x,t{k}y")?;
        }
        writeln!(w)?;
        for c in 0..self.mass.len() {
            let b = mesh.barycentres[c];
            write!(w, "{c},{:.17e},{:.17e},{:.17e}", b[0], b[1], self.density(mesh, c))?;
            for v in self.direction.matrix(c) {
                write!(w, ",{v:.17e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Edge id, midpoint and the total charge of each boundary edge.
    pub fn write_boundary_csv<W: Write>(&self, mut w: W, mesh: &TriMesh) -> Result<()> {
        let n = self.n_comp();
        write!(w, "edge,x,y")?;
        for k in 0..n {
            write!(w, ",q{k}")?;
        }
        writeln!(w)?;
        for (k, e) in mesh.boundary_edges.iter().enumerate() {
            let mid = e.midpoint(mesh);
            write!(w, "{k},{:.17e},{:.17e}", mid[0], mid[1])?;
            for j in 0..n {
                write!(w, ",{:.17e}", self.charges[k][0][j] + self.charges[k][1][j])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn total_charge(charges: &[[Vec<f64>; 2]], n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let t: Vec<f64> = charges.iter().map(|q| q[0][j] + q[1][j]).collect();
            pairwise_sum(&t)
        })
        .collect()
}

/// The current of a measure-function pair: `||T|| = mu |F|`, `T^ = F / |F|`,
/// with total boundary charge closed to zero. A degenerate pair yields the
/// uniform current with direction `E_11`.
pub fn make_current(mesh: &TriMesh, pair: &MeasureFunctionPair, e: f64) -> Result<CurrentTuple> {
    if pair.mu.len() != mesh.n_cells() {
        return Err(LabError::Dimension {
            what: "pair cells",
            expected: mesh.n_cells(),
            got: pair.mu.len(),
        });
    }
    let n = pair.n_comp();
    if pair.degenerate {
        let mut g = CellField::zeros(mesh.n_cells(), n);
        for c in 0..mesh.n_cells() {
            g.matrix_mut(c)[0] = mesh.cell_areas[c] / mesh.area;
        }
        let mut t = CurrentTuple::build(mesh, &g, true);
        t.degenerate = true;
        return Ok(t);
    }
    if !(e > 0.0) {
        return Err(LabError::Parameter {
            name: "e",
            reason: format!("energy level {e} must be positive for a non-degenerate pair"),
        });
    }
    let mut g = pair.f.clone();
    for c in 0..mesh.n_cells() {
        let m = pair.mu[c];
        g.matrix_mut(c).iter_mut().for_each(|x| *x *= m);
    }
    Ok(CurrentTuple::build(mesh, &g, true))
}

/// `sum_c ||T||_c sum_k omega_k(T^_k)` for per-cell covector tuples.
pub fn pair_with_form(t: &CurrentTuple, omega: &CellField) -> Result<f64> {
    if omega.n_comp() != t.n_comp() || omega.n_cells() != t.mass.len() {
        return Err(LabError::Dimension {
            what: "form tuple",
            expected: t.mass.len() * t.n_comp(),
            got: omega.n_cells() * omega.n_comp(),
        });
    }
    let terms: Vec<f64> = (0..t.mass.len())
        .map(|c| {
            let d: f64 = t.direction.matrix(c).iter().zip(omega.matrix(c)).map(|(a, b)| a * b).sum();
            t.mass[c] * d
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

/// `dT(v) = sum_k dT_k(v_k)`, evaluated with the endpoint charges.
pub fn boundary_pairing(mesh: &TriMesh, t: &CurrentTuple, v: &NodalField) -> Result<f64> {
    if v.n_comp() != t.n_comp() || v.n_vertices() != mesh.n_vertices() {
        return Err(LabError::Dimension {
            what: "boundary test field",
            expected: mesh.n_vertices() * t.n_comp(),
            got: v.n_vertices() * v.n_comp(),
        });
    }
    let terms: Vec<f64> = mesh
        .boundary_edges
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let dot = |q: &[f64], x: &[f64]| q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            dot(&t.charges[k][0], v.at(e.vertices[0])) + dot(&t.charges[k][1], v.at(e.vertices[1]))
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MollifierMode {
    /// Cells whose ball leaves the domain keep their value.
    InteriorOnly,
    /// Kernel renormalised over the part of the ball inside the domain.
    BoundaryAdapted,
}

/// Radial quartic bump `(1 - (r/eps)^2)^2` on `B_eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub radius: f64,
    pub mode: MollifierMode,
}

impl MollifierSpec {
    pub fn new(radius: f64, mode: MollifierMode) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(LabError::Parameter {
                name: "radius",
                reason: format!("mollifier radius {radius} must be positive"),
            });
        }
        Ok(Self { radius, mode })
    }

    pub fn kernel(&self, r: f64) -> f64 {
        let s = r / self.radius;
        if s >= 1.0 {
            0.0
        } else {
            let t = 1.0 - s * s;
            t * t
        }
    }

    /// Normalised weights over cells with barycentre in `B_eps(x)`, or `None`
    /// when the interior-only mode rejects `x`.
    fn weights(&self, mesh: &TriMesh, x: Point) -> Option<Vec<(usize, f64)>> {
        if self.mode == MollifierMode::InteriorOnly && mesh.boundary_distance(x) < self.radius {
            return None;
        }
        let mut w: Vec<(usize, f64)> = mesh
            .cells_near(x, self.radius)
            .into_iter()
            .map(|c| {
                let b = mesh.barycentres[c];
                (c, self.kernel((b[0] - x[0]).hypot(b[1] - x[1])) * mesh.cell_areas[c])
            })
            .filter(|&(_, k)| k > 0.0)
            .collect();
        let total: f64 = w.iter().map(|&(_, k)| k).sum();
        if total > 0.0 {
            w.iter_mut().for_each(|(_, k)| *k /= total);
            Some(w)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mollified {
    pub field: CellField,
    /// `int |f_eps - f|^2 dmu`.
    pub distance: f64,
    /// Radius below `2h`.
    pub under_resolved: bool,
    /// Cells left unsmoothed.
    pub untouched: usize,
}

/// Kernel average of `f` over `B_eps(barycentre)`, with the `L^2(mu)`
/// distance to `f`.
pub fn mollified_representative(
    mesh: &TriMesh,
    f: &CellField,
    spec: &MollifierSpec,
    mu: &[f64],
) -> Result<Mollified> {
    if f.n_cells() != mesh.n_cells() || mu.len() != mesh.n_cells() {
        return Err(LabError::Dimension {
            what: "mollified field cells",
            expected: mesh.n_cells(),
            got: f.n_cells().min(mu.len()),
        });
    }
    let width = 2 * f.n_comp();
    let mut out = f.clone();
    let mut untouched = 0;
    for c in 0..mesh.n_cells() {
        match spec.weights(mesh, mesh.barycentres[c]) {
            Some(w) => {
                let m = out.matrix_mut(c);
                m.iter_mut().for_each(|x| *x = 0.0);
                for (d, k) in w {
                    for (o, v) in m.iter_mut().zip(f.matrix(d)) {
                        *o += k * v;
                    }
                }
            }
            None => untouched += 1,
        }
    }
    let terms: Vec<f64> = (0..mesh.n_cells())
        .map(|c| {
            let d: f64 = (0..width).map(|i| (out.matrix(c)[i] - f.matrix(c)[i]).powi(2)).sum();
            mu[c] * d
        })
        .collect();
    Ok(Mollified {
        field: out,
        distance: pairwise_sum(&terms),
        under_resolved: spec.radius < 2.0 * mesh.h,
        untouched,
    })
}

/// `int |M_eps f - f|^2 dmu` along a sequence of radii.
pub fn mollification_trace(
    mesh: &TriMesh,
    f: &CellField,
    radii: &[f64],
    mode: MollifierMode,
    mu: &[f64],
) -> Result<Vec<(f64, f64)>> {
    radii
        .iter()
        .map(|&r| {
            let m = mollified_representative(mesh, f, &MollifierSpec::new(r, mode)?, mu)?;
            Ok((r, m.distance))
        })
        .collect()
}

/// Sizes of `M_eps(Du) - D(M_eps u)`, split by distance to the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Commutator {
    /// Max over cells at distance at least `2 eps` from the boundary.
    pub interior: f64,
    /// Max over the remaining cells.
    pub boundary_strip: f64,
}

/// Commutator between mollification and differentiation for a nodal map.
/// Nodal values of `M_eps u` average barycentre values of `u`.
pub fn commutator_norm(mesh: &TriMesh, u: &NodalField, spec: &MollifierSpec) -> Result<Commutator> {
    let n = u.n_comp();
    let bary: Vec<Vec<f64>> = (0..mesh.n_cells()).map(|c| u.at_barycentre(mesh, c)).collect();
    let mut smooth_u = u.clone();
    for v in 0..mesh.n_vertices() {
        if let Some(w) = spec.weights(mesh, mesh.vertices[v]) {
            let out = smooth_u.at_mut(v);
            out.iter_mut().for_each(|x| *x = 0.0);
            for (c, k) in w {
                for j in 0..n {
                    out[j] += k * bary[c][j];
                }
            }
        }
    }
    let du = cell_gradient(mesh, u)?;
    let d_smooth = cell_gradient(mesh, &smooth_u)?;
    let smooth_du = mollified_representative(mesh, &du, spec, &vec![0.0; mesh.n_cells()])?.field;
    let mut out = Commutator {
        interior: 0.0,
        boundary_strip: 0.0,
    };
    for c in 0..mesh.n_cells() {
        let d = smooth_du
            .matrix(c)
            .iter()
            .zip(d_smooth.matrix(c))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if mesh.cell_boundary_distance[c] >= 2.0 * spec.radius {
            out.interior = out.interior.max(d);
        } else {
            out.boundary_strip = out.boundary_strip.max(d);
        }
    }
    Ok(out)
}

/// Polynomial test pairs `(eta, phi)` for weak comparisons: monomials of
/// degree at most two in coordinates rescaled to the bounding box, used once
/// as `eta` and once per matrix entry as `phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialBank {
    centre: Point,
    half: Point,
    n_comp: usize,
}

const MONOMIALS: [(i32, i32); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];

impl PolynomialBank {
    pub fn standard(mesh: &TriMesh, n_comp: usize) -> Self {
        let (lo, hi) = mesh.bounding_box();
        Self {
            centre: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])],
            half: [0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1])],
            n_comp,
        }
    }

    pub fn len(&self) -> usize {
        MONOMIALS.len() * (1 + 2 * self.n_comp)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn monomial(&self, k: usize, x: Point) -> f64 {
        let s = (x[0] - self.centre[0]) / self.half[0];
        let t = (x[1] - self.centre[1]) / self.half[1];
        let (a, b) = MONOMIALS[k];
        s.powi(a) * t.powi(b)
    }

    /// `int (eta + F : phi) dmu` for entry `i` of the bank.
    fn evaluate(&self, mesh: &TriMesh, pair: &MeasureFunctionPair, i: usize) -> f64 {
        let k = i % MONOMIALS.len();
        let slot = i / MONOMIALS.len();
        let terms: Vec<f64> = (0..mesh.n_cells())
            .map(|c| {
                let m = self.monomial(k, mesh.barycentres[c]);
                let v = if slot == 0 { m } else { m * pair.f.matrix(c)[slot - 1] };
                pair.mu[c] * v
            })
            .collect();
        pairwise_sum(&terms)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakDistance {
    pub entries: Vec<f64>,
    pub max: f64,
    /// `|int |F_A|^2 dmu_A - int |F_B|^2 dmu_B|`.
    pub strong: f64,
}

pub fn compare_pairs(
    mesh: &TriMesh,
    a: &MeasureFunctionPair,
    b: &MeasureFunctionPair,
    bank: &PolynomialBank,
) -> Result<WeakDistance> {
    for pair in [a, b] {
        if pair.mu.len() != mesh.n_cells() || pair.n_comp() != bank.n_comp {
            return Err(LabError::Dimension {
                what: "compared pair",
                expected: mesh.n_cells() * bank.n_comp,
                got: pair.mu.len() * pair.n_comp(),
            });
        }
    }
    let entries: Vec<f64> = (0..bank.len())
        .map(|i| (bank.evaluate(mesh, a, i) - bank.evaluate(mesh, b, i)).abs())
        .collect();
    Ok(WeakDistance {
        max: entries.iter().fold(0.0, |m: f64, &x| m.max(x)),
        strong: (a.energy() - b.energy()).abs(),
        entries,
    })
}
