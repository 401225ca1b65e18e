//! Planar P1 triangulations of the supported domains.
//!
//! A [`TriMesh`] owns all geometry used downstream: per-cell areas, barycentres
//! and barycentric-coordinate gradients, an oriented list of boundary edges with
//! outward normals, and distances to the boundary. Fields live either on
//! vertices ([`NodalField`], the unknowns) or on cells ([`CellField`], the
//! piecewise-constant derivatives).

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Rectangle { min: Point, max: Point },
    Disk { center: Point, radius: f64 },
    Polygon { vertices: Vec<Point> },
}

/// Domain description plus target mesh spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub shape: Shape,
    pub h: f64,
}

impl DomainSpec {
    pub fn unit_square(h: f64) -> Self {
        Self {
            shape: Shape::Rectangle {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            },
            h,
        }
    }

    pub fn disk(center: Point, radius: f64, h: f64) -> Self {
        Self {
            shape: Shape::Disk { center, radius },
            h,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryEdge {
    /// Endpoints, ordered so the domain lies to the left (counter-clockwise
    /// on outer boundaries).
    pub vertices: [usize; 2],
    /// The unique triangle containing this edge.
    pub cell: usize,
    /// Unit outward normal.
    pub normal: Point,
    pub length: f64,
}

impl BoundaryEdge {
    pub fn midpoint(&self, mesh: &TriMesh) -> Point {
        let [a, b] = self.vertices;
        let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
        [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
    }
}

#[derive(Clone, Debug)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub boundary_vertex: Vec<bool>,
    pub cell_areas: Vec<f64>,
    pub barycentres: Vec<Point>,
    /// Gradients of the three barycentric coordinates on each cell.
    pub grad_basis: Vec<[Point; 3]>,
    /// Maximum triangle diameter.
    pub h: f64,
    pub area: f64,
    pub cell_boundary_distance: Vec<f64>,
    pub vertex_boundary_distance: Vec<f64>,
    vertex_cell_offsets: Vec<usize>,
    vertex_cell_list: Vec<usize>,
    grid: CellGrid,
}

#[derive(Clone, Debug)]
struct CellGrid {
    origin: Point,
    size: f64,
    nx: usize,
    ny: usize,
    offsets: Vec<usize>,
    cells: Vec<usize>,
}

impl CellGrid {
    fn build(barycentres: &[Point], size: f64) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for b in barycentres {
            for d in 0..2 {
                lo[d] = lo[d].min(b[d]);
                hi[d] = hi[d].max(b[d]);
            }
        }
        let nx = (((hi[0] - lo[0]) / size).floor() as usize + 1).max(1);
        let ny = (((hi[1] - lo[1]) / size).floor() as usize + 1).max(1);
        let mut counts = vec![0usize; nx * ny + 1];
        let bucket = |b: &Point| -> usize {
            let i = (((b[0] - lo[0]) / size) as usize).min(nx - 1);
            let j = (((b[1] - lo[1]) / size) as usize).min(ny - 1);
            j * nx + i
        };
        for b in barycentres {
            counts[bucket(b) + 1] += 1;
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut fill = counts.clone();
        let mut cells = vec![0usize; barycentres.len()];
        for (c, b) in barycentres.iter().enumerate() {
            let k = bucket(b);
            cells[fill[k]] = c;
            fill[k] += 1;
        }
        Self {
            origin: lo,
            size,
            nx,
            ny,
            offsets: counts,
            cells,
        }
    }

    /// Cells whose barycentre may lie within `radius` of `x`, in index order
    /// within each bucket.
    fn candidates(&self, x: Point, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let span = |v: f64, o: f64, n: usize| -> (usize, usize) {
            let lo = ((v - radius - o) / self.size).floor();
            let hi = ((v + radius - o) / self.size).floor();
            let clamp = |t: f64| t.max(0.0).min((n - 1) as f64) as usize;
            (clamp(lo), clamp(hi))
        };
        let (i0, i1) = span(x[0], self.origin[0], self.nx);
        let (j0, j1) = span(x[1], self.origin[1], self.ny);
        for j in j0..=j1 {
            for i in i0..=i1 {
                let k = j * self.nx + i;
                out.extend_from_slice(&self.cells[self.offsets[k]..self.offsets[k + 1]]);
            }
        }
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub(crate) fn segment_distance(x: Point, a: Point, b: Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(x, [a[0] + t * d[0], a[1] + t * d[1]])
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl TriMesh {
    /// Assemble a mesh from raw vertices and positively oriented triangles,
    /// deriving all geometry and checking the manifold invariants.
    pub fn from_parts(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(LabError::Domain {
                field: "triangles",
                reason: "mesh has no triangles".into(),
            });
        }
        let nv = vertices.len();
        let mut cell_areas = Vec::with_capacity(triangles.len());
        let mut barycentres = Vec::with_capacity(triangles.len());
        let mut grad_basis = Vec::with_capacity(triangles.len());
        let mut h: f64 = 0.0;
        for (c, t) in triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= nv) {
                return Err(LabError::Domain {
                    field: "triangles",
                    reason: format!("triangle {c} references a missing vertex"),
                });
            }
            let [a, b, d] = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
            let area = signed_area(a, b, d);
            if !(area > 0.0) {
                return Err(LabError::Domain {
                    field: "triangles",
                    reason: format!("triangle {c} has non-positive area {area:e}"),
                });
            }
            cell_areas.push(area);
            barycentres.push([(a[0] + b[0] + d[0]) / 3.0, (a[1] + b[1] + d[1]) / 3.0]);
            // grad lambda_i = perp(opposite edge) / (2 area), pointing towards vertex i
            let p = [a, b, d];
            let mut g = [[0.0; 2]; 3];
            for i in 0..3 {
                let (q, r) = (p[(i + 1) % 3], p[(i + 2) % 3]);
                g[i] = [(q[1] - r[1]) / (2.0 * area), (r[0] - q[0]) / (2.0 * area)];
            }
            grad_basis.push(g);
            h = h.max(dist(a, b)).max(dist(b, d)).max(dist(d, a));
        }

        let mut edge_use: HashMap<(usize, usize), (usize, usize, usize)> = HashMap::new();
        for (c, t) in triangles.iter().enumerate() {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let entry = edge_use.entry(key).or_insert((0, c, a));
                entry.0 += 1;
                if entry.0 > 2 {
                    return Err(LabError::Domain {
                        field: "triangles",
                        reason: format!("edge ({a}, {b}) shared by more than two triangles"),
                    });
                }
            }
        }
        let mut boundary_edges = Vec::new();
        // Walk triangles in order so edge ordering is deterministic.
        for (c, t) in triangles.iter().enumerate() {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                if edge_use[&(a.min(b), a.max(b))].0 == 1 {
                    let (pa, pb) = (vertices[a], vertices[b]);
                    let length = dist(pa, pb);
                    let normal = [(pb[1] - pa[1]) / length, -(pb[0] - pa[0]) / length];
                    boundary_edges.push(BoundaryEdge {
                        vertices: [a, b],
                        cell: c,
                        normal,
                        length,
                    });
                }
            }
        }
        let boundary_edges = order_boundary_loops(boundary_edges);
        let mut boundary_vertex = vec![false; nv];
        for e in &boundary_edges {
            boundary_vertex[e.vertices[0]] = true;
            boundary_vertex[e.vertices[1]] = true;
        }

        let mut counts = vec![0usize; nv + 1];
        for t in &triangles {
            for &v in t {
                counts[v + 1] += 1;
            }
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut fill = counts.clone();
        let mut vertex_cell_list = vec![0usize; counts[nv]];
        for (c, t) in triangles.iter().enumerate() {
            for &v in t {
                vertex_cell_list[fill[v]] = c;
                fill[v] += 1;
            }
        }

        let boundary_distance = |x: Point| -> f64 {
            boundary_edges
                .iter()
                .map(|e| segment_distance(x, vertices[e.vertices[0]], vertices[e.vertices[1]]))
                .fold(f64::INFINITY, f64::min)
        };
        let cell_boundary_distance = barycentres.iter().map(|&b| boundary_distance(b)).collect();
        let vertex_boundary_distance = vertices
            .iter()
            .enumerate()
            .map(|(v, &x)| if boundary_vertex[v] { 0.0 } else { boundary_distance(x) })
            .collect();

        let area = pairwise_sum(&cell_areas);
        let grid = CellGrid::build(&barycentres, h);
        Ok(Self {
            vertices,
            triangles,
            boundary_edges,
            boundary_vertex,
            cell_areas,
            barycentres,
            grad_basis,
            h,
            area,
            cell_boundary_distance,
            vertex_boundary_distance,
            vertex_cell_offsets: counts,
            vertex_cell_list,
            grid,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.triangles.len()
    }

    /// Cells incident to vertex `v`, in increasing index order.
    pub fn vertex_cells(&self, v: usize) -> &[usize] {
        &self.vertex_cell_list[self.vertex_cell_offsets[v]..self.vertex_cell_offsets[v + 1]]
    }

    /// Area enclosed by the boundary polygon(s), by the shoelace formula.
    pub fn polygon_area(&self) -> f64 {
        let terms: Vec<f64> = self
            .boundary_edges
            .iter()
            .map(|e| {
                let (a, b) = (self.vertices[e.vertices[0]], self.vertices[e.vertices[1]]);
                0.5 * (a[0] * b[1] - b[0] * a[1])
            })
            .collect();
        pairwise_sum(&terms)
    }

    pub fn boundary_distance(&self, x: Point) -> f64 {
        self.boundary_edges
            .iter()
            .map(|e| {
                segment_distance(x, self.vertices[e.vertices[0]], self.vertices[e.vertices[1]])
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Triangle containing `x` (lowest index when on a shared edge).
    pub fn locate(&self, x: Point) -> Option<usize> {
        let mut cand = Vec::new();
        self.grid.candidates(x, self.h, &mut cand);
        cand.sort_unstable();
        cand.into_iter().find(|&c| {
            let t = self.triangles[c];
            let tol = -1e-12 * self.cell_areas[c];
            let [a, b, d] = [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]];
            signed_area(x, a, b) >= tol && signed_area(x, b, d) >= tol && signed_area(x, d, a) >= tol
        })
    }

    pub fn contains(&self, x: Point) -> bool {
        self.locate(x).is_some()
    }

    /// Cells whose barycentre lies strictly within `radius` of `x`, sorted.
    pub fn cells_near(&self, x: Point, radius: f64) -> Vec<usize> {
        let mut cand = Vec::new();
        self.grid.candidates(x, radius, &mut cand);
        cand.retain(|&c| dist(self.barycentres[c], x) < radius);
        cand.sort_unstable();
        cand
    }

    /// Distance from `x` to the closed triangle `c`.
    pub fn cell_distance(&self, c: usize, x: Point) -> f64 {
        let t = self.triangles[c];
        let [a, b, d] = [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]];
        if signed_area(x, a, b) >= 0.0 && signed_area(x, b, d) >= 0.0 && signed_area(x, d, a) >= 0.0
        {
            return 0.0;
        }
        segment_distance(x, a, b)
            .min(segment_distance(x, b, d))
            .min(segment_distance(x, d, a))
    }

    /// Cells meeting the open ball `B_radius(x)`, sorted.
    pub fn cells_meeting_ball(&self, x: Point, radius: f64) -> Vec<usize> {
        let mut cand = Vec::new();
        self.grid.candidates(x, radius + self.h, &mut cand);
        cand.retain(|&c| self.cell_distance(c, x) < radius);
        cand.sort_unstable();
        cand
    }

    /// Bounding box `(min, max)` of the vertices.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        (lo, hi)
    }

    /// Write the vertex table and the triangle table, separated by a blank line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "id,x,y,boundary")?;
        for (i, v) in self.vertices.iter().enumerate() {
            writeln!(w, "{i},{:.17e},{:.17e},{}", v[0], v[1], u8::from(self.boundary_vertex[i]))?;
        }
        writeln!(w)?;
        writeln!(w, "id,v0,v1,v2,area")?;
        for (c, t) in self.triangles.iter().enumerate() {
            writeln!(w, "{c},{},{},{},{:.17e}", t[0], t[1], t[2], self.cell_areas[c])?;
        }
        Ok(())
    }
}

/// Chain boundary edges into loops: each loop starts at its lowest-indexed
/// unused edge and follows head-to-tail connectivity.
fn order_boundary_loops(edges: Vec<BoundaryEdge>) -> Vec<BoundaryEdge> {
    let mut by_start: HashMap<usize, usize> = HashMap::new();
    for (i, e) in edges.iter().enumerate() {
        by_start.insert(e.vertices[0], i);
    }
    let mut used = vec![false; edges.len()];
    let mut out = Vec::with_capacity(edges.len());
    for start in 0..edges.len() {
        let mut i = start;
        while !used[i] {
            used[i] = true;
            out.push(edges[i].clone());
            match by_start.get(&edges[i].vertices[1]) {
                Some(&next) => i = next,
                None => break,
            }
        }
    }
    out
}

/// Fixed-tree pairwise summation; the result is independent of how callers
/// chunk work, which keeps reductions reproducible.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Build a mesh for `spec`. Identical specs give bit-identical meshes.
pub fn build_mesh(spec: &DomainSpec) -> Result<TriMesh> {
    if !(spec.h > 0.0) || !spec.h.is_finite() {
        return Err(LabError::Domain {
            field: "h",
            reason: format!("mesh size must be positive, got {}", spec.h),
        });
    }
    match &spec.shape {
        Shape::Rectangle { min, max } => rectangle_mesh(*min, *max, spec.h),
        Shape::Disk { center, radius } => disk_mesh(*center, *radius, spec.h),
        Shape::Polygon { vertices } => polygon_mesh(vertices, spec.h),
    }
}

fn cells_for(length: f64, h: f64) -> usize {
    ((length / h) - 1e-9).ceil().max(1.0) as usize
}

fn rectangle_mesh(min: Point, max: Point, h: f64) -> Result<TriMesh> {
    let (lx, ly) = (max[0] - min[0], max[1] - min[1]);
    if !(lx > 0.0) {
        return Err(LabError::Domain {
            field: "rectangle.max[0]",
            reason: format!("zero or negative extent {lx}"),
        });
    }
    if !(ly > 0.0) {
        return Err(LabError::Domain {
            field: "rectangle.max[1]",
            reason: format!("zero or negative extent {ly}"),
        });
    }
    let (nx, ny) = (cells_for(lx, h), cells_for(ly, h));
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = if i == nx { max[0] } else { min[0] + lx * i as f64 / nx as f64 };
            let y = if j == ny { max[1] } else { min[1] + ly * j as f64 / ny as f64 };
            vertices.push([x, y]);
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    TriMesh::from_parts(vertices, triangles)
}

/// Structured square mesh mapped radially onto the disk (concentric squares
/// to concentric circles), followed by one Laplace smoothing pass.
fn disk_mesh(center: Point, radius: f64, h: f64) -> Result<TriMesh> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(LabError::Domain {
            field: "disk.radius",
            reason: format!("radius must be positive, got {radius}"),
        });
    }
    let n = cells_for(2.0 * radius, h);
    let coord = |i: usize| -> f64 {
        if 2 * i == n {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / n as f64
        }
    };
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            let (a, b) = (coord(i), coord(j));
            let rho = a.abs().max(b.abs());
            let norm = a.hypot(b);
            let (x, y) = if norm == 0.0 {
                (0.0, 0.0)
            } else if i == 0 || i == n || j == 0 || j == n {
                // boundary points go exactly onto the circle
                (a / norm, b / norm)
            } else {
                (a * rho / norm, b * rho / norm)
            };
            vertices.push([center[0] + radius * x, center[1] + radius * y]);
        }
    }
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
            let (ac, bc) = (0.5 * (coord(i) + coord(i + 1)), 0.5 * (coord(j) + coord(j + 1)));
            // diagonals run radially so corner cells do not degenerate
            if ac * bc > 0.0 {
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            } else {
                triangles.push([v00, v10, v01]);
                triangles.push([v10, v11, v01]);
            }
        }
    }
    laplace_smooth(&mut vertices, &triangles, n);
    TriMesh::from_parts(vertices, triangles)
}

fn laplace_smooth(vertices: &mut [Point], triangles: &[[usize; 3]], n: usize) {
    let nv = vertices.len();
    let interior = |v: usize| {
        let (i, j) = (v % (n + 1), v / (n + 1));
        i > 0 && i < n && j > 0 && j < n
    };
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); nv];
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nv];
    for (c, t) in triangles.iter().enumerate() {
        for k in 0..3 {
            incident[t[k]].push(c);
            for l in 0..3 {
                if k != l && !nbrs[t[k]].contains(&t[l]) {
                    nbrs[t[k]].push(t[l]);
                }
            }
        }
    }
    let old = vertices.to_vec();
    for v in 0..nv {
        if !interior(v) || nbrs[v].is_empty() {
            continue;
        }
        let m = nbrs[v].len() as f64;
        let target = [
            nbrs[v].iter().map(|&w| old[w][0]).sum::<f64>() / m,
            nbrs[v].iter().map(|&w| old[w][1]).sum::<f64>() / m,
        ];
        // accept the move only if every incident triangle keeps a healthy area
        let ok = incident[v].iter().all(|&c| {
            let t = triangles[c];
            let p = |w: usize| if w == v { target } else { old[w] };
            let before = signed_area(old[t[0]], old[t[1]], old[t[2]]);
            signed_area(p(t[0]), p(t[1]), p(t[2])) > 0.25 * before
        });
        if ok {
            vertices[v] = target;
        }
    }
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o1 = signed_area(a, b, c);
    let o2 = signed_area(a, b, d);
    let o3 = signed_area(c, d, a);
    let o4 = signed_area(c, d, b);
    (o1 > 0.0) != (o2 > 0.0) && (o3 > 0.0) != (o4 > 0.0) && o1 != 0.0 && o2 != 0.0 && o3 != 0.0 && o4 != 0.0
}

/// Ear-clipped polygon, uniformly red-refined until the maximum triangle
/// diameter drops to `h`.
fn polygon_mesh(poly: &[Point], h: f64) -> Result<TriMesh> {
    if poly.len() < 3 {
        return Err(LabError::Domain {
            field: "polygon.vertices",
            reason: format!("need at least 3 vertices, got {}", poly.len()),
        });
    }
    if poly.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(LabError::Domain {
            field: "polygon.vertices",
            reason: "non-finite coordinate".into(),
        });
    }
    let m = poly.len();
    for i in 0..m {
        if dist(poly[i], poly[(i + 1) % m]) == 0.0 {
            return Err(LabError::Domain {
                field: "polygon.vertices",
                reason: format!("repeated vertex at position {i}"),
            });
        }
        for j in (i + 1)..m {
            if j == i + 1 || (i == 0 && j == m - 1) {
                continue;
            }
            if segments_cross(poly[i], poly[(i + 1) % m], poly[j], poly[(j + 1) % m]) {
                return Err(LabError::Domain {
                    field: "polygon.vertices",
                    reason: format!("self-intersection between edges {i} and {j}"),
                });
            }
        }
    }
    let twice_area: f64 = (0..m)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % m]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    if twice_area.abs() < 1e-14 {
        return Err(LabError::Domain {
            field: "polygon.vertices",
            reason: "zero enclosed area".into(),
        });
    }
    let mut vertices: Vec<Point> = poly.to_vec();
    if twice_area < 0.0 {
        vertices.reverse();
    }

    let mut ring: Vec<usize> = (0..m).collect();
    let mut triangles = Vec::with_capacity(m - 2);
    while ring.len() > 3 {
        let k = ring.len();
        let ear = (0..k).find(|&i| {
            let (a, b, c) = (ring[(i + k - 1) % k], ring[i], ring[(i + 1) % k]);
            let (pa, pb, pc) = (vertices[a], vertices[b], vertices[c]);
            if signed_area(pa, pb, pc) <= 0.0 {
                return false;
            }
            ring.iter().all(|&w| {
                if w == a || w == b || w == c {
                    return true;
                }
                let q = vertices[w];
                !(signed_area(pa, pb, q) >= 0.0 && signed_area(pb, pc, q) >= 0.0 && signed_area(pc, pa, q) >= 0.0)
            })
        });
        let Some(i) = ear else {
            return Err(LabError::Domain {
                field: "polygon.vertices",
                reason: "ear clipping failed (degenerate polygon)".into(),
            });
        };
        triangles.push([ring[(i + k - 1) % k], ring[i], ring[(i + 1) % k]]);
        ring.remove(i);
    }
    triangles.push([ring[0], ring[1], ring[2]]);

    let max_edge = |vs: &[Point], ts: &[[usize; 3]]| {
        ts.iter()
            .flat_map(|t| (0..3).map(move |i| (t[i], t[(i + 1) % 3])))
            .map(|(a, b)| dist(vs[a], vs[b]))
            .fold(0.0, f64::max)
    };
    while max_edge(&vertices, &triangles) > h * (1.0 + 1e-9) {
        let mut mids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut refined = Vec::with_capacity(4 * triangles.len());
        for t in &triangles {
            let mut mid = |a: usize, b: usize| -> usize {
                *mids.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let (pa, pb) = (vertices[a], vertices[b]);
                    vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                    vertices.len() - 1
                })
            };
            let (ab, bc, ca) = (mid(t[0], t[1]), mid(t[1], t[2]), mid(t[2], t[0]));
            refined.push([t[0], ab, ca]);
            refined.push([ab, t[1], bc]);
            refined.push([ca, bc, t[2]]);
            refined.push([ab, bc, ca]);
        }
        triangles = refined;
    }
    TriMesh::from_parts(vertices, triangles)
}

/// Vector-valued field on the vertices, vertex-major: `values[v * n_comp + k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodalField {
    n_comp: usize,
    values: Vec<f64>,
}

impl NodalField {
    pub fn zeros(n_vertices: usize, n_comp: usize) -> Self {
        Self {
            n_comp,
            values: vec![0.0; n_vertices * n_comp],
        }
    }

    pub fn from_values(n_comp: usize, values: Vec<f64>) -> Result<Self> {
        if n_comp == 0 || values.len() % n_comp != 0 {
            return Err(LabError::Dimension {
                what: "nodal values length",
                expected: n_comp,
                got: values.len(),
            });
        }
        Ok(Self { n_comp, values })
    }

    /// Sample `f` at every vertex of `mesh`.
    pub fn from_fn(mesh: &TriMesh, n_comp: usize, f: impl Fn(Point) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(mesh.n_vertices() * n_comp);
        for &x in &mesh.vertices {
            let v = f(x);
            if v.len() != n_comp {
                return Err(LabError::Dimension {
                    what: "field components",
                    expected: n_comp,
                    got: v.len(),
                });
            }
            values.extend(v);
        }
        Ok(Self { n_comp, values })
    }

    pub fn n_comp(&self) -> usize {
        self.n_comp
    }

    pub fn n_vertices(&self) -> usize {
        self.values.len() / self.n_comp
    }

    pub fn at(&self, v: usize) -> &[f64] {
        &self.values[v * self.n_comp..(v + 1) * self.n_comp]
    }

    pub fn at_mut(&mut self, v: usize) -> &mut [f64] {
        &mut self.values[v * self.n_comp..(v + 1) * self.n_comp]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &NodalField, b: f64) -> NodalField {
        NodalField {
            n_comp: self.n_comp,
            values: self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    /// Value at a point inside cell `c` by linear interpolation.
    pub fn eval_in_cell(&self, mesh: &TriMesh, c: usize, x: Point) -> Vec<f64> {
        let t = mesh.triangles[c];
        let p0 = mesh.vertices[t[0]];
        let g = &mesh.grad_basis[c];
        let mut lam = [0.0; 3];
        for i in 1..3 {
            let q = mesh.vertices[t[i]];
            // lambda_i(x) = grad lambda_i . (x - vertex opposite side point)
            lam[i] = g[i][0] * (x[0] - p0[0]) + g[i][1] * (x[1] - p0[1]) - (g[i][0] * (q[0] - p0[0]) + g[i][1] * (q[1] - p0[1])) + 1.0;
        }
        lam[0] = 1.0 - lam[1] - lam[2];
        (0..self.n_comp)
            .map(|k| (0..3).map(|i| lam[i] * self.at(t[i])[k]).sum())
            .collect()
    }

    /// Value at the barycentre of cell `c`.
    pub fn at_barycentre(&self, mesh: &TriMesh, c: usize) -> Vec<f64> {
        let t = mesh.triangles[c];
        (0..self.n_comp)
            .map(|k| (self.at(t[0])[k] + self.at(t[1])[k] + self.at(t[2])[k]) / 3.0)
            .collect()
    }
}

/// Per-cell constant `n_comp x 2` matrices, row-major: entry `(k, j)` of cell
/// `c` is `data[c * 2 * n_comp + 2 * k + j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellField {
    n_comp: usize,
    data: Vec<f64>,
}

impl CellField {
    pub fn zeros(n_cells: usize, n_comp: usize) -> Self {
        Self {
            n_comp,
            data: vec![0.0; n_cells * 2 * n_comp],
        }
    }

    pub fn from_data(n_comp: usize, data: Vec<f64>) -> Result<Self> {
        if n_comp == 0 || data.len() % (2 * n_comp) != 0 {
            return Err(LabError::Dimension {
                what: "cell field length",
                expected: 2 * n_comp,
                got: data.len(),
            });
        }
        Ok(Self { n_comp, data })
    }

    pub fn n_comp(&self) -> usize {
        self.n_comp
    }

    pub fn n_cells(&self) -> usize {
        self.data.len() / (2 * self.n_comp)
    }

    pub fn matrix(&self, c: usize) -> &[f64] {
        let s = 2 * self.n_comp;
        &self.data[c * s..(c + 1) * s]
    }

    pub fn matrix_mut(&mut self, c: usize) -> &mut [f64] {
        let s = 2 * self.n_comp;
        &mut self.data[c * s..(c + 1) * s]
    }

    /// Frobenius norm of the matrix on cell `c`.
    pub fn norm(&self, c: usize) -> f64 {
        self.matrix(c).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Exact gradient of the P1 interpolant of `u` on every cell.
pub fn cell_gradient(mesh: &TriMesh, u: &NodalField) -> Result<CellField> {
    if u.n_vertices() != mesh.n_vertices() {
        return Err(LabError::Dimension {
            what: "nodal field vertices",
            expected: mesh.n_vertices(),
            got: u.n_vertices(),
        });
    }
    let n = u.n_comp();
    let mut out = CellField::zeros(mesh.n_cells(), n);
    for c in 0..mesh.n_cells() {
        let t = mesh.triangles[c];
        let g = &mesh.grad_basis[c];
        let m = out.matrix_mut(c);
        for k in 0..n {
            let (a, b, d) = (u.at(t[0])[k], u.at(t[1])[k], u.at(t[2])[k]);
            m[2 * k] = a * g[0][0] + b * g[1][0] + d * g[2][0];
            m[2 * k + 1] = a * g[0][1] + b * g[1][1] + d * g[2][1];
        }
    }
    Ok(out)
}

/// Cells with barycentre inside `B_r(x0)` for each radius.
#[derive(Clone, Debug, PartialEq)]
pub struct BallCover {
    pub radii: Vec<f64>,
    pub cells: Vec<Vec<usize>>,
    /// `true` where the radius exceeds `dist(x0, boundary)`.
    pub exceeds_boundary: Vec<bool>,
}

impl BallCover {
    pub fn covered_area(&self, mesh: &TriMesh, k: usize) -> f64 {
        self.cells[k].iter().map(|&c| mesh.cell_areas[c]).sum()
    }
}

pub fn balls_and_shells(mesh: &TriMesh, x0: Point, radii: &[f64]) -> Result<BallCover> {
    if radii.is_empty() || radii.iter().any(|&r| !(r > 0.0)) {
        return Err(LabError::Parameter {
            name: "radii",
            reason: "radii must be positive and non-empty".into(),
        });
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LabError::Parameter {
            name: "radii",
            reason: "radii must be strictly increasing".into(),
        });
    }
    if !mesh.contains(x0) {
        return Err(LabError::Parameter {
            name: "x0",
            reason: format!("point ({}, {}) lies outside the domain", x0[0], x0[1]),
        });
    }
    let d = mesh.boundary_distance(x0);
    let cells = radii.iter().map(|&r| mesh.cells_near(x0, r)).collect();
    Ok(BallCover {
        radii: radii.to_vec(),
        cells,
        exceeds_boundary: radii.iter().map(|&r| r > d).collect(),
    })
}
