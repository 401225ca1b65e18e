//! Scenario configuration, presets, the end-to-end run and its on-disk
//! outputs, and re-verification of stored runs.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{discrete_flux_pair, trace_tangential, BoundaryData};
use crate::current::{
    commutator_norm, compare_pairs, make_current, make_pair, mollification_trace, CurrentTuple, MeasureFunctionPair,
    MollifierMode, MollifierSpec, PolynomialBank, WeakDistance,
};
use crate::diagnostics::{
    boundary_decay, default_t_grid, du_star, duality_gap, exact_form_bank, extract_support, geodesic_residual,
    local_mass_comparison, perturbation_bank, pohozaev_residual, random_lipschitz_field, rigidity_probe,
    stream_competitor, theta_monotonicity, Bump, DiagnosticsReport, DuStarSummary, DualitySummary, SupportSummary,
    TestFieldBank,
};
use crate::energy::{e_inf_of, e_p_of};
use crate::error::{LabError, Result};
use crate::expr::Expr;
use crate::mesh::{build_mesh, cell_gradient, DomainSpec, NodalField, Point, Shape, TriMesh};
use crate::solver::{continuation, PSchedule, StageRecord};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SUPREMAL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub domain: Shape,
    pub h: f64,
    pub data: DataSpec,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    #[serde(default)]
    pub diagnostics: DiagnosticsToggles,
    #[serde(default)]
    pub expect: Option<Expectation>,
    /// Relative paths resolve against `$SUPREMAL_OUT` (default `out`).
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Write `fields_%04d.csv` for every stage.
    #[serde(default)]
    pub write_fields: bool,
}

/// Boundary data: a named preset or one expression per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub components: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub p_max: Option<f64>,
    pub p_list: Option<Vec<f64>>,
    pub tol: Option<f64>,
    pub max_newton: Option<usize>,
    pub cg_max: Option<usize>,
    pub regularise: Option<bool>,
    pub eps_floor: Option<f64>,
    pub eps_tol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsToggles {
    pub enabled: bool,
    pub bank_size: usize,
    pub support_theta: f64,
    pub theta_c: f64,
    pub theta_samples: usize,
    pub decay_beta: f64,
    pub decay_radii: Vec<f64>,
    pub duality_draws: usize,
    pub rigidity: bool,
    pub competitors: usize,
    pub mollifier: bool,
}

impl Default for DiagnosticsToggles {
    fn default() -> Self {
        Self {
            enabled: true,
            bank_size: 64,
            support_theta: 0.01,
            theta_c: 4.0,
            theta_samples: 10,
            decay_beta: 0.95,
            decay_radii: vec![0.2, 0.1, 0.05],
            duality_draws: 100,
            rigidity: true,
            competitors: 20,
            mollifier: true,
        }
    }
}

/// Known limit values asserted by a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub e_inf: f64,
    pub rel_tol: f64,
    #[serde(default)]
    pub abs_tol: f64,
    #[serde(default)]
    pub e_inf_prime: Option<f64>,
    /// Every stage must reproduce `e_inf` (affine data).
    #[serde(default)]
    pub every_stage: bool,
    /// Pohozaev and geodesic residuals must vanish to roundoff.
    #[serde(default)]
    pub exact_stationarity: bool,
    #[serde(default)]
    pub note: String,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(LabError::Config(format!("mesh size h = {} must be positive", self.h)));
        }
        self.components()?;
        self.schedule()?.validate()
    }

    /// Expression per component, resolving a named preset.
    pub fn components(&self) -> Result<Vec<String>> {
        let comps = match (&self.data.preset, self.data.components.is_empty()) {
            (Some(name), true) => preset_data(name)
                .ok_or_else(|| LabError::Config(format!("unknown data preset '{name}'")))?
                .iter()
                .map(|s| s.to_string())
                .collect(),
            (None, false) => self.data.components.clone(),
            (Some(_), false) => return Err(LabError::Config("give either a data preset or components, not both".into())),
            (None, true) => return Err(LabError::Config("boundary data needs a preset or components".into())),
        };
        for c in &comps {
            Expr::parse(c)?;
        }
        Ok(comps)
    }

    pub fn n_comp(&self) -> Result<usize> {
        Ok(self.components()?.len())
    }

    pub fn boundary_data(&self) -> Result<BoundaryData> {
        let exprs = self
            .components()?
            .iter()
            .map(|s| Expr::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let label = exprs.iter().map(|e| e.source().to_string()).collect::<Vec<_>>().join("; ");
        Ok(BoundaryData::new(label, exprs.len(), move |x| exprs.iter().map(|e| e.eval(x)).collect()))
    }

    pub fn domain_spec(&self) -> DomainSpec {
        DomainSpec {
            shape: self.domain.clone(),
            h: self.h,
        }
    }

    pub fn schedule(&self) -> Result<PSchedule> {
        let o = &self.schedule;
        let mut s = match (&o.p_list, o.p_max) {
            (Some(list), _) => PSchedule {
                p_list: list.clone(),
                ..PSchedule::default()
            },
            (None, Some(p)) => PSchedule::doubling(p),
            (None, None) => PSchedule::default(),
        };
        if let Some(t) = o.tol {
            s.controls.tol = t;
        }
        if let Some(n) = o.max_newton {
            s.controls.max_newton = n;
        }
        if let Some(n) = o.cg_max {
            s.controls.cg_max = n;
        }
        if let Some(r) = o.regularise {
            s.regularise = r;
        }
        if let Some(f) = o.eps_floor {
            s.eps_floor = f;
        }
        if let Some(t) = o.eps_tol {
            s.eps_tol = t;
        }
        Ok(s)
    }

    pub fn resolve_out_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from);
        match &self.out_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.name),
        }
    }
}

fn preset_data(name: &str) -> Option<&'static [&'static str]> {
    Some(match name {
        "identity" => &["x1", "x2"],
        "affine" => &["x1 + 2*x2", "-0.5*x1 + x2"],
        "strip" => &["x1"],
        "aronsson" => &["x1^(4/3) - x2^(4/3)"],
        "two-arc" => &["1 - abs(atan2(x2, x1))/pi"],
        "constant" => &["1"],
        _ => return None,
    })
}

/// Centre and radius of the disk tangent to both axes through `(1, 1)`.
pub fn aronsson_disk() -> (Point, f64) {
    let r = 2.0 - 2f64.sqrt();
    ([r, r], r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetInfo {
    pub name: &'static str,
    pub n: usize,
    pub domain: &'static str,
    pub reproduces: &'static str,
}

pub fn list_presets() -> Vec<PresetInfo> {
    vec![
        PresetInfo {
            name: "identity-square",
            n: 2,
            domain: "unit square",
            reproduces: "identity map; e = sqrt(2)",
        },
        PresetInfo {
            name: "affine-square",
            n: 2,
            domain: "unit square",
            reproduces: "affine data; e = |A|, mu normalised Lebesgue",
        },
        PresetInfo {
            name: "strip",
            n: 1,
            domain: "unit square",
            reproduces: "u0 = x1; uniform current along e1",
        },
        PresetInfo {
            name: "aronsson-disk",
            n: 1,
            domain: "disk through (1,1) tangent to both axes",
            reproduces: "Aronsson function x^(4/3) - y^(4/3); e = e' = 4 sqrt(2)/3",
        },
        PresetInfo {
            name: "two-arc-disk",
            n: 1,
            domain: "unit disk",
            reproduces: "0 -> 1 along each half-circle; e = 1/2 > e' = 1/pi",
        },
        PresetInfo {
            name: "constant",
            n: 1,
            domain: "unit square",
            reproduces: "constant data; e = 0, uniform current",
        },
    ]
}

pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let square = Shape::Rectangle {
        min: [0.0, 0.0],
        max: [1.0, 1.0],
    };
    let base = |name: &str, domain: Shape, h: f64, data: &str, expect: Option<Expectation>| ScenarioConfig {
        name: name.to_string(),
        domain,
        h,
        data: DataSpec {
            preset: Some(data.to_string()),
            components: vec![],
        },
        schedule: ScheduleOverrides::default(),
        diagnostics: DiagnosticsToggles::default(),
        expect,
        out_dir: None,
        seed: 1,
        write_fields: false,
    };
    let exact = |e: f64, note: &str| Expectation {
        e_inf: e,
        rel_tol: 1e-9,
        abs_tol: 0.0,
        e_inf_prime: None,
        every_stage: true,
        exact_stationarity: true,
        note: note.into(),
    };
    let cfg = match name {
        "identity-square" => base(name, square, 0.02, "identity", Some(exact(2f64.sqrt(), "e = sqrt(n)"))),
        "affine-square" => {
            let a: f64 = 1.0 + 4.0 + 0.25 + 1.0;
            let mut e = exact(a.sqrt(), "e = |A|");
            e.exact_stationarity = false;
            base(name, square, 0.02, "affine", Some(e))
        }
        "strip" => base(name, square, 0.02, "strip", Some(exact(1.0, "u = x1"))),
        "aronsson-disk" => {
            let (c, r) = aronsson_disk();
            let v = 4.0 * 2f64.sqrt() / 3.0;
            base(
                name,
                Shape::Disk { center: c, radius: r },
                0.01,
                "aronsson",
                Some(Expectation {
                    e_inf: v,
                    rel_tol: 0.02,
                    abs_tol: 0.0,
                    e_inf_prime: Some(v),
                    every_stage: false,
                    exact_stationarity: false,
                    note: "e = e' = 4 sqrt(2)/3, attained only at (1,1)".into(),
                }),
            )
        }
        "two-arc-disk" => base(
            name,
            Shape::Disk {
                center: [0.0, 0.0],
                radius: 1.0,
            },
            0.01,
            "two-arc",
            Some(Expectation {
                e_inf: 0.5,
                rel_tol: 0.02,
                abs_tol: 0.0,
                e_inf_prime: Some(1.0 / std::f64::consts::PI),
                every_stage: false,
                exact_stationarity: false,
                note: "largest boundary chord quotient, attained by the diameter".into(),
            }),
        ),
        "constant" => {
            let mut e = exact(0.0, "degenerate: e = 0");
            e.abs_tol = 1e-14;
            base(name, square, 0.05, "constant", Some(e))
        }
        _ => return Err(LabError::Config(format!("unknown preset '{name}'"))),
    };
    Ok(cfg)
}

/// Per-stage record with the current and pair identities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub index: usize,
    pub record: StageRecord,
    pub tol: f64,
    /// `mu(Omega)`.
    pub total_mass: f64,
    /// `|int |F|^2 dmu - e_p^2| / e_p^2`.
    pub energy_identity: f64,
    /// Relative defect of the boundary measure-function pair on boundary test fields.
    pub boundary_flux_residual: f64,
    pub interior_residual: f64,
    pub closure_defect: f64,
    /// `max_k |dT_k(1)|`.
    pub boundary_total: f64,
    pub joint_mass: f64,
    /// `dT(u0)`.
    pub boundary_u0: f64,
    /// `(q, E_q(u_p))` for schedule entries `q <= p`.
    pub cross_energies: Vec<(f64, f64)>,
    pub weak_to_previous: Option<WeakDistance>,
    pub mass_estimate_min_slack: f64,
    pub geodesic_residual: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// `None` when the measured value is not finite.
    pub value: Option<f64>,
    pub limit: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, value: f64, limit: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            value: value.is_finite().then_some(value),
            limit,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub mesh: String,
    pub stages: Vec<String>,
    pub fields: Vec<String>,
    pub current: Option<String>,
    pub boundary: Option<String>,
    pub boundary_pair: Option<String>,
    pub diagnostics: Option<String>,
    pub du_star: Option<String>,
    pub support: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ScenarioConfig,
    pub out_dir: PathBuf,
    pub n_vertices: usize,
    pub n_cells: usize,
    pub mesh_h: f64,
    pub e_inf_prime: f64,
    pub e_p_max: Option<f64>,
    /// Calibrated density-ratio constant used by the theta check.
    pub theta_c: f64,
    pub files: ManifestFiles,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub failure: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

fn write_fields(path: &Path, mesh: &TriMesh, u: &NodalField) -> Result<()> {
    use std::io::Write;
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "vertex,x,y")?;
    for k in 0..u.n_comp() {
        write!(w, ",u{k}")?;
    }
    writeln!(w)?;
    for (v, x) in mesh.vertices.iter().enumerate() {
        write!(w, "{v},{:.17e},{:.17e}", x[0], x[1])?;
        for val in u.at(v) {
            write!(w, ",{val:.17e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Nodal copy of `f` that keeps only boundary values.
fn boundary_restriction(mesh: &TriMesh, f: &NodalField) -> NodalField {
    let mut out = f.clone();
    for v in 0..mesh.n_vertices() {
        if !mesh.boundary_vertex[v] {
            out.at_mut(v).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    out
}

fn boundary_flux_residual(
    mesh: &TriMesh,
    u: &NodalField,
    u0: &NodalField,
    pair: &MeasureFunctionPair,
) -> Result<f64> {
    let bp = discrete_flux_pair(mesh, u, pair.p, pair.e, f64::INFINITY)?;
    let n = u.n_comp();
    let mut tests = vec![boundary_restriction(mesh, u0)];
    for k in 0..n {
        for d in 0..2 {
            let f = NodalField::from_fn(mesh, n, |x| (0..n).map(|j| if j == k { x[d] } else { 0.0 }).collect())?;
            tests.push(boundary_restriction(mesh, &f));
        }
    }
    let mut worst = 0.0f64;
    for phi in &tests {
        let dphi = cell_gradient(mesh, phi)?;
        let (mut lhs, mut scale) = (0.0, 0.0);
        for c in 0..mesh.n_cells() {
            let f = pair.f.matrix(c);
            let d = dphi.matrix(c);
            lhs += pair.mu[c] * f.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
            scale += pair.mu[c] * pair.f.norm(c) * dphi.norm(c);
        }
        let rhs = bp.pairing(mesh, phi);
        if scale > 0.0 {
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    Ok(worst)
}

fn mass_estimate_min(pair: &MeasureFunctionPair, xi: &[Vec<f64>]) -> f64 {
    let one = vec![1.0; pair.mu.len()];
    let mut m = f64::INFINITY;
    for alpha in [0.5, 0.9] {
        m = m.min(pair.mass_estimate_slack(&one, alpha));
        for x in xi {
            m = m.min(pair.mass_estimate_slack(x, alpha));
        }
    }
    m
}

fn theta_samples(mesh: &TriMesh, reach: f64, count: usize, seed: u64) -> Vec<Point> {
    let mut cand: Vec<usize> = (0..mesh.n_vertices())
        .filter(|&v| mesh.vertex_boundary_distance[v] > reach)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e7a);
    cand.shuffle(&mut rng);
    cand.truncate(count);
    cand.sort_unstable();
    cand.into_iter().map(|v| mesh.vertices[v]).collect()
}

/// Bump of scale `s` centred as close to `x` as the margin allows.
fn bump_near(mesh: &TriMesh, x: Point, s: f64, margin: f64) -> Option<Bump> {
    let need = s * 2f64.sqrt() + margin;
    (0..mesh.n_vertices())
        .filter(|&v| mesh.vertex_boundary_distance[v] >= need)
        .min_by(|&a, &b| {
            let d = |v: usize| (mesh.vertices[v][0] - x[0]).hypot(mesh.vertices[v][1] - x[1]);
            d(a).total_cmp(&d(b)).then(a.cmp(&b))
        })
        .map(|v| Bump {
            centre: mesh.vertices[v],
            scale: s,
        })
}

/// Everything a run produces in memory.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub mesh: TriMesh,
    pub states: Vec<NodalField>,
    pub stages: Vec<StageSummary>,
    pub diagnostics: Option<DiagnosticsReport>,
    pub current: Option<CurrentTuple>,
}

/// Run a scenario and write its outputs. Returns the in-memory results even
/// when checks fail; solver failures write a failure manifest and return the
/// error.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let out = cfg.resolve_out_dir();
    fs::create_dir_all(&out)?;
    let mesh = build_mesh(&cfg.domain_spec())?;
    mesh.write_csv(BufWriter::new(File::create(out.join("mesh.csv"))?))?;
    let g = cfg.boundary_data()?;
    let trace = trace_tangential(&mesh, &g)?;
    let schedule = cfg.schedule()?;
    let tol = schedule.controls.tol;
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        out_dir: out.clone(),
        n_vertices: mesh.n_vertices(),
        n_cells: mesh.n_cells(),
        mesh_h: mesh.h,
        e_inf_prime: trace.e_inf_prime,
        e_p_max: None,
        theta_c: cfg.diagnostics.theta_c,
        files: ManifestFiles {
            mesh: "mesh.csv".into(),
            stages: vec![],
            fields: vec![],
            current: None,
            boundary: None,
            boundary_pair: None,
            diagnostics: None,
            du_star: None,
            support: None,
        },
        checks: vec![],
        pass: false,
        failure: None,
    };
    let (cont, failure) = match continuation(&mesh, &g, &schedule) {
        Ok(c) => (c, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    let u0 = g.interpolate(&mesh)?;
    let bank = TestFieldBank::new(&mesh, cfg.diagnostics.bank_size.max(16), cfg.seed, 2.0 * mesh.h).ok();
    let xi = bank.as_ref().map(|b| b.xi(&mesh, 16)).unwrap_or_default();
    let poly = PolynomialBank::standard(&mesh, g.n_comp);
    let mut stages = Vec::with_capacity(cont.states.len());
    let mut pairs: Vec<MeasureFunctionPair> = Vec::with_capacity(cont.states.len());
    let mut currents = Vec::with_capacity(cont.states.len());
    for (i, (u, rec)) in cont.states.iter().zip(&cont.report.stages).enumerate() {
        let pair = make_pair(&mesh, u, rec.p, rec.e_p)?;
        let t = make_current(&mesh, &pair, rec.e_p)?;
        let du = cell_gradient(&mesh, u)?;
        let cross = schedule
            .p_list
            .iter()
            .filter(|&&q| q <= rec.p)
            .map(|&q| Ok((q, e_p_of(&mesh, &du, q, 0.0)?)))
            .collect::<Result<Vec<_>>>()?;
        let e2 = rec.e_p * rec.e_p;
        let summary = StageSummary {
            index: i,
            record: rec.clone(),
            tol,
            total_mass: pair.total_mass(),
            energy_identity: if e2 > 0.0 { (pair.energy() - e2).abs() / e2 } else { pair.energy() },
            boundary_flux_residual: boundary_flux_residual(&mesh, u, &u0, &pair)?,
            interior_residual: t.interior_residual,
            closure_defect: t.closure_defect.iter().fold(0.0, |m: f64, x| m.max(x.abs())),
            boundary_total: t.boundary_total().iter().fold(0.0, |m: f64, x| m.max(x.abs())),
            joint_mass: t.joint_mass(),
            boundary_u0: crate::current::boundary_pairing(&mesh, &t, &u0)?,
            cross_energies: cross,
            weak_to_previous: match pairs.last() {
                Some(prev) => Some(compare_pairs(&mesh, prev, &pair, &poly)?),
                None => None,
            },
            mass_estimate_min_slack: mass_estimate_min(&pair, &xi),
            geodesic_residual: match (&bank, cfg.diagnostics.enabled) {
                (Some(b), true) => Some(geodesic_residual(&mesh, &t, b)?.max),
                _ => None,
            },
            degenerate: pair.degenerate,
        };
        let name = format!("stage_{i:04}.json");
        write_json(&out.join(&name), &summary)?;
        manifest.files.stages.push(name);
        if cfg.write_fields {
            let name = format!("fields_{i:04}.csv");
            write_fields(&out.join(&name), &mesh, u)?;
            manifest.files.fields.push(name);
        }
        stages.push(summary);
        pairs.push(pair);
        currents.push(t);
    }
    if let Some(err) = failure {
        manifest.failure = Some(err.to_string());
        manifest.checks = evaluate_checks(cfg, &stages, None, trace.e_inf_prime);
        manifest.pass = false;
        write_json(&out.join("manifest.json"), &manifest)?;
        return Err(err);
    }
    let u = cont.states.last().expect("non-empty schedule").clone();
    let pair = pairs.last().expect("non-empty schedule");
    let t = currents.last().expect("non-empty schedule").clone();
    let e = pair.e;
    manifest.e_p_max = Some(e);
    t.write_csv(BufWriter::new(File::create(out.join("current.csv"))?), &mesh)?;
    t.write_boundary_csv(BufWriter::new(File::create(out.join("boundary.csv"))?), &mesh)?;
    discrete_flux_pair(&mesh, &u, pair.p, e, f64::INFINITY)?.write_csv(
        BufWriter::new(File::create(out.join("boundary_pair.csv"))?),
        &mesh,
        Some(&trace),
    )?;
    manifest.files.current = Some("current.csv".into());
    manifest.files.boundary = Some("boundary.csv".into());
    manifest.files.boundary_pair = Some("boundary_pair.csv".into());

    let diagnostics = match (&bank, cfg.diagnostics.enabled) {
        (Some(bank), true) => {
            let rep = run_diagnostics(cfg, &mesh, &u, pair, &t, bank, &stages, trace.e_inf_prime, &out)?;
            write_json(&out.join("diagnostics.json"), &rep)?;
            manifest.files.diagnostics = Some("diagnostics.json".into());
            manifest.files.du_star = Some("du_star.csv".into());
            manifest.files.support = Some("support.csv".into());
            Some(rep)
        }
        _ => None,
    };
    manifest.checks = evaluate_checks(cfg, &stages, diagnostics.as_ref(), trace.e_inf_prime);
    manifest.pass = manifest.checks.iter().all(|c| c.pass);
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunOutput {
        manifest,
        mesh,
        states: cont.states,
        stages,
        diagnostics,
        current: Some(t),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_diagnostics(
    cfg: &ScenarioConfig,
    mesh: &TriMesh,
    u: &NodalField,
    pair: &MeasureFunctionPair,
    t: &CurrentTuple,
    bank: &TestFieldBank,
    stages: &[StageSummary],
    e_inf_prime: f64,
    out: &Path,
) -> Result<DiagnosticsReport> {
    let d = &cfg.diagnostics;
    let n = u.n_comp();
    let e = pair.e;
    let h = cfg.h;
    let mut rep = DiagnosticsReport {
        p: pair.p,
        e_p: e,
        bank_size: bank.len(),
        ..Default::default()
    };
    rep.pohozaev_residual = Some(pohozaev_residual(mesh, pair, bank)?.max);
    rep.geodesic_residual = Some(geodesic_residual(mesh, t, bank)?.max);
    rep.geodesic_trend = stages
        .iter()
        .filter_map(|s| s.geodesic_residual.map(|g| (s.record.p, g)))
        .collect();

    let inradius = mesh.vertex_boundary_distance.iter().fold(0.0f64, |m, &x| m.max(x));
    let top = (32.0 * h).min(0.5 * inradius);
    let radii = [top / 8.0, top / 4.0, top / 2.0, top];
    let samples = theta_samples(mesh, top + 2.0 * mesh.h, d.theta_samples, cfg.seed);
    if !samples.is_empty() {
        rep.theta = Some(theta_monotonicity(mesh, t, &samples, &radii, d.theta_c)?);
    }

    let star = du_star(mesh, u, 2.0 * mesh.h)?;
    star.write_csv(BufWriter::new(File::create(out.join("du_star.csv"))?), mesh)?;
    rep.du_star = Some(DuStarSummary::new(mesh, &star));
    let support = extract_support(mesh, t, d.support_theta)?;
    support.write_csv(BufWriter::new(File::create(out.join("support.csv"))?), mesh, t)?;
    rep.support = Some(SupportSummary {
        theta: support.theta,
        n_cells: support.cells.len(),
        mass_fraction: support.mass_fraction,
        area_fraction: support.area_fraction,
        mean_du_star: support.mean_du_star(mesh, &star),
        empty: support.empty,
    });

    let level = if e > 0.0 { e } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0a1);
    let mut min_gap = f64::INFINITY;
    for _ in 0..d.duality_draws {
        let w = random_lipschitz_field(mesh, n, level, &mut rng)?;
        for g in duality_gap(mesh, t, &w, level, bank)? {
            min_gap = min_gap.min(g);
        }
    }
    let (e_inf_u, _) = e_inf_of(&cell_gradient(mesh, u)?);
    let own = duality_gap(mesh, t, u, e_inf_u, bank)?;
    let zero = NodalField::zeros(mesh.n_vertices(), n);
    let scale = duality_gap(mesh, t, &zero, e_inf_u, bank)?;
    let deficit = own
        .iter()
        .zip(&scale)
        .filter(|(_, s)| **s > 0.0)
        .fold(0.0f64, |m, (g, s)| m.max(g.abs() / s));
    rep.duality = Some(DualitySummary {
        draws: d.duality_draws,
        min_gap,
        equality_deficit: deficit,
    });

    rep.decay = Some(boundary_decay(mesh, t, &d.decay_radii, d.decay_beta, e_inf_prime < e * (1.0 - 1e-9)));

    if d.rigidity {
        let (lo, hi) = mesh.bounding_box();
        let width = (hi[0] - lo[0]).min(hi[1] - lo[1]);
        let margin = 2.0 * mesh.h;
        let centre = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let top = (0..mesh.n_cells())
            .max_by(|&a, &b| t.density(mesh, a).total_cmp(&t.density(mesh, b)).then(b.cmp(&a)))
            .map_or(centre, |c| mesh.barycentres[c]);
        let mut bumps: Vec<Bump> = [bump_near(mesh, centre, width / 10.0, margin), bump_near(mesh, top, width / 6.0, margin)]
            .into_iter()
            .flatten()
            .collect();
        bumps.extend(bank.bumps.iter().take(14).copied());
        let phis = perturbation_bank(mesh, &bumps, n, cfg.seed)?;
        rep.rigidity = Some(rigidity_probe(mesh, u, t, &phis, &default_t_grid(e))?);
    }

    if d.competitors > 0 && t.joint_mass() > 0.0 {
        let forms = exact_form_bank(mesh, bank, n, bank.len())?;
        let top = (0..mesh.n_cells()).fold(0.0f64, |m, c| m.max(t.density(mesh, c)));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0de);
        for i in 0..d.competitors {
            let b = bank.bumps[i % bank.len()];
            let dirs: Vec<f64> = (0..n).map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 1.0 } else { -1.0 }).collect();
            let chi = b.interpolate(mesh);
            let lip = e_inf_of(&cell_gradient(mesh, &chi)?).0.max(f64::MIN_POSITIVE);
            let amp = 0.5 * top / lip;
            let psi = NodalField::from_fn(mesh, n, |x| dirs.iter().map(|s| s * amp * b.value(x)).collect())?;
            let k: Vec<usize> = (0..mesh.n_cells())
                .filter(|&c| mesh.triangles[c].iter().any(|&v| chi.at(v)[0] != 0.0))
                .collect();
            let s = stream_competitor(mesh, t, &psi)?;
            rep.mass_comparisons
                .push(local_mass_comparison(mesh, t, &k, &s, &forms, 1e-12 * t.joint_mass())?);
        }
    }

    rep.mass_estimate_min_slack = stages.iter().map(|s| s.mass_estimate_min_slack).reduce(f64::min);

    if d.mollifier {
        rep.mollifier_trace = mollification_trace(
            mesh,
            &pair.f,
            &[8.0 * h, 4.0 * h, 2.0 * h],
            MollifierMode::BoundaryAdapted,
            &pair.mu,
        )?;
        rep.commutator = Some(commutator_norm(
            mesh,
            u,
            &MollifierSpec::new(4.0 * h, MollifierMode::BoundaryAdapted)?,
        )?);
    }
    Ok(rep)
}

/// All assertions of a run, computed from stored summaries only.
pub fn evaluate_checks(
    cfg: &ScenarioConfig,
    stages: &[StageSummary],
    diag: Option<&DiagnosticsReport>,
    e_inf_prime: f64,
) -> Vec<Check> {
    let mut checks = Vec::new();
    let worst = |f: &dyn Fn(&StageSummary) -> f64| stages.iter().map(f).fold(0.0f64, f64::max);

    let mass = worst(&|s| s.total_mass - 1.0);
    checks.push(Check::new("mass-bound", mass <= 1e-12, mass, 1e-12, "max_p mu(Omega) - 1"));
    let ident = worst(&|s| s.energy_identity);
    checks.push(Check::new("energy-identity", ident <= 1e-12, ident, 1e-12, "relative |int |F|^2 dmu - e_p^2|"));
    let flux = worst(&|s| s.boundary_flux_residual);
    checks.push(Check::new("boundary-flux-identity", flux <= 1e-10, flux, 1e-10, "boundary pair vs weak form"));
    let interior = worst(&|s| s.interior_residual / s.tol);
    checks.push(Check::new(
        "interior-boundarylessness",
        interior <= 10.0,
        interior,
        10.0,
        "interior dT residual in units of the stage tolerance",
    ));
    let closure = worst(&|s| s.boundary_total / s.joint_mass.max(1.0));
    checks.push(Check::new("boundary-of-constant", closure <= 1e-10, closure, 1e-10, "max_k |dT_k(1)|"));

    let mut mono = 0.0f64;
    for w in stages.windows(2) {
        let slack = 10.0 * w[1].tol;
        let drop = w[0].record.e_p - w[1].record.e_p - slack * (1.0 + w[0].record.e_p);
        mono = mono.max(drop);
    }
    let by_p: Vec<(f64, f64)> = stages.iter().map(|s| (s.record.p, s.record.e_p)).collect();
    for s in stages {
        let slack = 10.0 * s.tol;
        for &(q, eq_up) in &s.cross_energies {
            let eq_uq = by_p.iter().find(|(p, _)| *p == q).map_or(eq_up, |x| x.1);
            mono = mono.max(eq_uq - eq_up - slack * (1.0 + eq_up));
            mono = mono.max(eq_up - s.record.e_p - slack * (1.0 + s.record.e_p));
        }
    }
    checks.push(Check::new("monotonicity", mono <= 0.0, mono, 0.0, "largest violation of E_q(u_q) <= E_q(u_p) <= E_p(u_p)"));
    let slack = stages.iter().map(|s| s.mass_estimate_min_slack).fold(f64::INFINITY, f64::min);
    checks.push(Check::new("mass-estimate", slack >= -1e-10, slack, -1e-10, "min slack over xi, alpha"));

    if let Some(x) = &cfg.expect {
        let last = stages.last().map_or(f64::NAN, |s| s.record.e_p);
        let dev = (last - x.e_inf).abs();
        let lim = x.rel_tol * x.e_inf.abs() + x.abs_tol;
        checks.push(Check::new("expected-e", dev <= lim, dev, lim, x.note.clone()));
        if x.every_stage {
            let dev = worst(&|s| (s.record.e_p - x.e_inf).abs());
            checks.push(Check::new("expected-e-every-stage", dev <= lim.max(1e-12), dev, lim.max(1e-12), "all stages"));
        }
        if let Some(v) = x.e_inf_prime {
            let dev = (e_inf_prime - v).abs();
            let lim = 0.02 * v;
            checks.push(Check::new("tangential-slope", dev <= lim, dev, lim, "e' from the boundary trace"));
        }
        if x.exact_stationarity {
            if let Some(d) = diag {
                let v = d.pohozaev_residual.unwrap_or(0.0).max(d.geodesic_residual.unwrap_or(0.0));
                checks.push(Check::new("exact-stationarity", v <= 1e-12, v, 1e-12, "Pohozaev and geodesic residuals"));
                if let Some(du) = &d.duality {
                    let v = du.equality_deficit;
                    checks.push(Check::new("duality-equality", v <= 1e-8, v, 1e-8, "relative gap of the computed state"));
                }
            }
        }
    }
    let degenerate = stages.last().is_some_and(|s| s.record.e_p == 0.0);
    if degenerate {
        let ok = stages.iter().all(|s| s.degenerate && s.record.e_p == 0.0);
        let m = stages.last().map_or(0.0, |s| (s.joint_mass - 1.0).abs());
        checks.push(Check::new("degenerate-path", ok && m <= 1e-12, m, 1e-12, "e_p = 0, uniform current"));
    }

    if let Some(d) = diag {
        if let Some(du) = &d.duality {
            checks.push(Check::new("duality", du.min_gap >= -1e-10, du.min_gap, -1e-10, "min gap over random fields and bumps"));
        }
        if let Some(th) = &d.theta {
            checks.push(Check::new("theta-monotonicity", th.pass, th.required_c, th.c, "relative decrease <= C h / s"));
        }
        let g16 = d.geodesic_trend.iter().find(|(p, _)| *p == 16.0).map(|x| x.1);
        if let (Some(g16), Some(&(p, gmax))) = (g16, d.geodesic_trend.last()) {
            if p > 16.0 {
                checks.push(Check::new(
                    "geodesic-trend",
                    gmax <= g16 + 1e-12,
                    gmax,
                    g16,
                    "geodesic residual at p_max vs p = 16",
                ));
            }
        }
        if let Some(dec) = &d.decay {
            if dec.applicable {
                checks.push(Check::new("boundary-decay", dec.pass, dec.max_ratio, dec.beta, "max strip-mass ratio"));
            }
        }
        if let (Some(r), Some(s)) = (&d.rigidity, &d.support) {
            if s.mass_fraction >= 0.9 && s.area_fraction <= 0.3 {
                checks.push(Check::new("rigidity", r.rigid, s.mass_fraction, 0.9, "perturbations on the support raise E_inf"));
            }
        }
        if !d.mass_comparisons.is_empty() {
            let bad = d.mass_comparisons.iter().filter(|m| !m.holds).count();
            checks.push(Check::new(
                "local-mass-comparison",
                bad == 0,
                bad as f64,
                0.0,
                "competitors with smaller mass on K",
            ));
        }
    }
    checks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub checks: Vec<Check>,
    pub missing_files: Vec<String>,
    /// Recomputed pass flags equal the stored ones.
    pub consistent: bool,
    pub pass: bool,
}

/// Reload a run from its manifest and re-evaluate every assertion.
pub fn check(manifest_path: &Path) -> Result<CheckOutcome> {
    let manifest: RunManifest = serde_json::from_reader(File::open(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let f = &manifest.files;
    let mut names: Vec<&String> = vec![&f.mesh];
    names.extend(&f.stages);
    names.extend(&f.fields);
    names.extend(
        [&f.current, &f.boundary, &f.boundary_pair, &f.diagnostics, &f.du_star, &f.support]
            .into_iter()
            .flatten(),
    );
    let missing_files: Vec<String> = names.iter().filter(|n| !dir.join(n).exists()).map(|n| n.to_string()).collect();
    let stages = f
        .stages
        .iter()
        .filter(|n| dir.join(n).exists())
        .map(|n| Ok(serde_json::from_reader(File::open(dir.join(n))?)?))
        .collect::<Result<Vec<StageSummary>>>()?;
    let diag: Option<DiagnosticsReport> = match &f.diagnostics {
        Some(n) if dir.join(n).exists() => Some(serde_json::from_reader(File::open(dir.join(n))?)?),
        _ => None,
    };
    let checks = evaluate_checks(&manifest.config, &stages, diag.as_ref(), manifest.e_inf_prime);
    let consistent = checks.len() == manifest.checks.len()
        && checks.iter().zip(&manifest.checks).all(|(a, b)| a.name == b.name && a.pass == b.pass);
    let pass = missing_files.is_empty() && consistent && manifest.failure.is_none() && checks.iter().all(|c| c.pass);
    Ok(CheckOutcome {
        checks,
        missing_files,
        consistent,
        pass,
    })
}
