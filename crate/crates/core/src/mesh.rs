//! Delaunay mesh over the image rectangle `[0, W] x [0, H]`.
//!
//! Positions are in pixel units with pixel `(i, j)` centred at `(i + 0.5, j + 0.5)`.
//! Triangles are stored with positive signed area. The four image corners are
//! always vertices, so the convex hull of the vertex set is the image
//! rectangle and the triangulation covers it without holes.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::{tonemap_sample, HdrImage};

/// Minimum signed triangle area, px².
pub const EPS_AREA: f64 = 1e-6;
/// Relative tolerance of the empty-circumcircle test.
pub const EPS_CIRC: f64 = 1e-9;
/// Barycentric slack when testing containment.
pub const EPS_BARY: f64 = 1e-7;
/// Edge length of an acceleration tile, px.
pub const TILE_SIZE: f64 = 16.0;
/// Longest side of the downsampled copy used for edge-aware seeding.
pub const SOBEL_MAX_DIM: usize = 512;

// Triangles are binned with a small bbox margin so containment with
// EPS_BARY slack never misses a tile.
const TILE_MARGIN: f64 = 1e-2;

/// Which degrees of freedom a vertex keeps so the mesh keeps covering the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryKind {
    Interior,
    Corner,
    /// `y = 0`, slides in x.
    Top,
    /// `y = H`, slides in x.
    Bottom,
    /// `x = 0`, slides in y.
    Left,
    /// `x = W`, slides in y.
    Right,
}

impl BoundaryKind {
    pub fn classify(p: [f64; 2], width: f64, height: f64) -> Self {
        let l = p[0] <= 0.0;
        let r = p[0] >= width;
        let t = p[1] <= 0.0;
        let b = p[1] >= height;
        match (l || r, t || b) {
            (true, true) => BoundaryKind::Corner,
            (false, false) => BoundaryKind::Interior,
            (true, false) => {
                if l {
                    BoundaryKind::Left
                } else {
                    BoundaryKind::Right
                }
            }
            (false, true) => {
                if t {
                    BoundaryKind::Top
                } else {
                    BoundaryKind::Bottom
                }
            }
        }
    }

    pub fn is_boundary(self) -> bool {
        self != BoundaryKind::Interior
    }

    /// Removes the gradient components that would move the vertex off its edge.
    pub fn project(self, g: [f64; 2]) -> [f64; 2] {
        match self {
            BoundaryKind::Interior => g,
            BoundaryKind::Corner => [0.0, 0.0],
            BoundaryKind::Top | BoundaryKind::Bottom => [g[0], 0.0],
            BoundaryKind::Left | BoundaryKind::Right => [0.0, g[1]],
        }
    }

    /// Snaps `p` back onto the set this kind allows.
    pub fn constrain(self, p: [f64; 2], width: f64, height: f64) -> [f64; 2] {
        let x = p[0].clamp(0.0, width);
        let y = p[1].clamp(0.0, height);
        match self {
            BoundaryKind::Interior | BoundaryKind::Corner => [x, y],
            BoundaryKind::Top => [x, 0.0],
            BoundaryKind::Bottom => [x, height],
            BoundaryKind::Left => [0.0, y],
            BoundaryKind::Right => [width, y],
        }
    }
}

/// Per-tile candidate triangle lists in CSR layout, ids ascending.
#[derive(Debug, Clone, Default)]
pub struct TileGrid {
    nx: usize,
    ny: usize,
    offsets: Vec<u32>,
    ids: Vec<u32>,
}

impl TileGrid {
    fn build(width: f64, height: f64, positions: &[[f64; 2]], triangles: &[[u32; 3]]) -> Self {
        let nx = ((width / TILE_SIZE).ceil() as usize).max(1);
        let ny = ((height / TILE_SIZE).ceil() as usize).max(1);
        let range = |lo: f64, hi: f64, n: usize| {
            let a = ((lo - TILE_MARGIN) / TILE_SIZE).floor().max(0.0) as usize;
            let b = ((hi + TILE_MARGIN) / TILE_SIZE).floor().max(0.0) as usize;
            (a.min(n - 1), b.min(n - 1))
        };
        let spans: Vec<(usize, usize, usize, usize)> = triangles
            .iter()
            .map(|t| {
                let p = t.map(|i| positions[i as usize]);
                let (x0, x1) = range(
                    p[0][0].min(p[1][0]).min(p[2][0]),
                    p[0][0].max(p[1][0]).max(p[2][0]),
                    nx,
                );
                let (y0, y1) = range(
                    p[0][1].min(p[1][1]).min(p[2][1]),
                    p[0][1].max(p[1][1]).max(p[2][1]),
                    ny,
                );
                (x0, x1, y0, y1)
            })
            .collect();
        let mut counts = vec![0u32; nx * ny + 1];
        for &(x0, x1, y0, y1) in &spans {
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    counts[ty * nx + tx + 1] += 1;
                }
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut ids = vec![0u32; *counts.last().unwrap() as usize];
        for (t, &(x0, x1, y0, y1)) in spans.iter().enumerate() {
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    let slot = &mut fill[ty * nx + tx];
                    ids[*slot as usize] = t as u32;
                    *slot += 1;
                }
            }
        }
        TileGrid {
            nx,
            ny,
            offsets: counts,
            ids,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn candidates(&self, p: [f64; 2]) -> &[u32] {
        let tx = ((p[0] / TILE_SIZE).floor().max(0.0) as usize).min(self.nx - 1);
        let ty = ((p[1] / TILE_SIZE).floor().max(0.0) as usize).min(self.ny - 1);
        let k = ty * self.nx + tx;
        &self.ids[self.offsets[k] as usize..self.offsets[k + 1] as usize]
    }
}

/// An interior edge with its two incident triangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    /// Endpoints, `a < b`.
    pub a: u32,
    pub b: u32,
    /// Apexes opposite the edge in the two incident triangles.
    pub c: u32,
    pub d: u32,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    width: f64,
    height: f64,
    positions: Vec<[f64; 2]>,
    boundary: Vec<BoundaryKind>,
    triangles: Vec<[u32; 3]>,
    one_ring: Vec<Vec<u32>>,
    tiles: TileGrid,
}

#[inline]
fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Signed-area barycentrics of `p`; `None` for a zero-area triangle.
#[inline]
pub fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let d = cross(a, b, c);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let n0 = cross(p, b, c);
    let n1 = cross(p, c, a);
    let n2 = cross(p, a, b);
    Some([n0 / d, n1 / d, n2 / d])
}

/// In-circle determinant of `d` against the positively oriented `a, b, c`,
/// with a magnitude bound for relative comparisons. Positive means inside.
pub fn incircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> (f64, f64) {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let al = adx * adx + ady * ady;
    let bl = bdx * bdx + bdy * bdy;
    let cl = cdx * cdx + cdy * cdy;
    let det = al * (bdx * cdy - bdy * cdx) + bl * (cdx * ady - cdy * adx) + cl * (adx * bdy - ady * bdx);
    let perm = al * ((bdx * cdy).abs() + (bdy * cdx).abs())
        + bl * ((cdx * ady).abs() + (cdy * adx).abs())
        + cl * ((adx * bdy).abs() + (ady * bdx).abs());
    (det, perm)
}

/// Delaunay triangulation with positively oriented triangles.
pub fn triangulate(positions: &[[f64; 2]]) -> Result<Vec<[u32; 3]>> {
    if positions.len() < 3 {
        return Err(Error::Degenerate("fewer than three points"));
    }
    if positions.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidMesh("non-finite vertex position".into()));
    }
    let pts: Vec<delaunator::Point> = positions
        .iter()
        .map(|p| delaunator::Point { x: p[0], y: p[1] })
        .collect();
    let tri = delaunator::triangulate(&pts);
    if tri.triangles.is_empty() {
        return Err(Error::Degenerate("all points are collinear"));
    }
    Ok(tri
        .triangles
        .chunks_exact(3)
        .map(|t| {
            let (a, b, c) = (t[0] as u32, t[1] as u32, t[2] as u32);
            if cross(positions[t[0]], positions[t[1]], positions[t[2]]) < 0.0 {
                [a, c, b]
            } else {
                [a, b, c]
            }
        })
        .collect())
}

impl Mesh {
    /// Triangulates `positions`, which must lie in the image rectangle and
    /// include its four corners.
    pub fn from_points(width: f64, height: f64, positions: Vec<[f64; 2]>) -> Result<Self> {
        check_extent(width, height)?;
        for p in &positions {
            if !(p[0] >= 0.0 && p[0] <= width && p[1] >= 0.0 && p[1] <= height) {
                return Err(Error::InvalidMesh(format!(
                    "vertex ({}, {}) outside the image rectangle",
                    p[0], p[1]
                )));
            }
        }
        let corners = [[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]];
        for c in corners {
            if !positions.contains(&c) {
                return Err(Error::InvalidMesh(format!("missing corner vertex {c:?}")));
            }
        }
        let triangles = triangulate(&positions)?;
        Ok(Self::assemble(width, height, positions, triangles))
    }

    /// Builds a mesh from explicit topology without validating it.
    pub fn from_parts(
        width: f64,
        height: f64,
        positions: Vec<[f64; 2]>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self> {
        check_extent(width, height)?;
        let n = positions.len() as u32;
        if triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::InvalidMesh("triangle index out of range".into()));
        }
        Ok(Self::assemble(width, height, positions, triangles))
    }

    fn assemble(width: f64, height: f64, positions: Vec<[f64; 2]>, triangles: Vec<[u32; 3]>) -> Self {
        let boundary = positions
            .iter()
            .map(|&p| BoundaryKind::classify(p, width, height))
            .collect();
        let mut mesh = Mesh {
            width,
            height,
            positions,
            boundary,
            triangles,
            one_ring: Vec::new(),
            tiles: TileGrid::default(),
        };
        mesh.rebuild_topology_caches();
        mesh
    }

    fn rebuild_topology_caches(&mut self) {
        let mut ring = vec![Vec::new(); self.positions.len()];
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                ring[a as usize].push(b);
                ring[b as usize].push(a);
            }
        }
        for r in &mut ring {
            r.sort_unstable();
            r.dedup();
        }
        self.one_ring = ring;
        self.rebuild_tiles();
    }

    fn rebuild_tiles(&mut self) {
        self.tiles = TileGrid::build(self.width, self.height, &self.positions, &self.triangles);
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn boundary(&self) -> &[BoundaryKind] {
        &self.boundary
    }

    pub fn one_ring(&self, v: usize) -> &[u32] {
        &self.one_ring[v]
    }

    pub fn tiles(&self) -> &TileGrid {
        &self.tiles
    }

    pub fn num_vertices(&self) -> usize {
        self.positions.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_points(&self, t: usize) -> [[f64; 2]; 3] {
        self.triangles[t].map(|i| self.positions[i as usize])
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        0.5 * cross(a, b, c)
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangle_points(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Moves vertices without touching topology; the tile grid is rebuilt.
    pub fn set_positions(&mut self, positions: Vec<[f64; 2]>) -> Result<()> {
        if positions.len() != self.positions.len() {
            return Err(Error::Shape(format!(
                "{} positions for a mesh with {} vertices",
                positions.len(),
                self.positions.len()
            )));
        }
        self.positions = positions;
        self.rebuild_tiles();
        Ok(())
    }

    /// Triangle containing `p` (lowest id on ties) and its barycentrics.
    pub fn locate(&self, p: [f64; 2]) -> Result<(usize, [f64; 3])> {
        self.first_containing(p, self.tiles.candidates(p).iter().map(|&t| t as usize))
    }

    /// Same contract as [`Mesh::locate`] but scans every triangle.
    pub fn locate_exhaustive(&self, p: [f64; 2]) -> Result<(usize, [f64; 3])> {
        self.first_containing(p, 0..self.triangles.len())
    }

    fn first_containing(&self, p: [f64; 2], ids: impl Iterator<Item = usize>) -> Result<(usize, [f64; 3])> {
        if !(p[0] >= 0.0 && p[0] <= self.width && p[1] >= 0.0 && p[1] <= self.height) {
            return Err(Error::NotCovered { x: p[0], y: p[1] });
        }
        for t in ids {
            let [a, b, c] = self.triangle_points(t);
            if let Some(w) = barycentric(p, a, b, c) {
                if w.iter().all(|&v| v >= -EPS_BARY) {
                    return Ok((t, w));
                }
            }
        }
        Err(Error::NotCovered { x: p[0], y: p[1] })
    }

    /// Containing triangle of every pixel centre, row-major.
    pub fn pixel_triangles(&self, width: usize, height: usize) -> Result<Vec<u32>> {
        (0..width * height)
            .into_par_iter()
            .map(|i| {
                let p = [(i % width) as f64 + 0.5, (i / width) as f64 + 0.5];
                self.locate(p).map(|(t, _)| t as u32)
            })
            .collect()
    }

    /// Checks every mesh invariant except the Delaunay property.
    pub fn check(&self) -> Result<()> {
        let n = self.positions.len();
        let mut used = vec![false; n];
        for (i, p) in self.positions.iter().enumerate() {
            if !(p[0] >= 0.0 && p[0] <= self.width && p[1] >= 0.0 && p[1] <= self.height) {
                return Err(Error::InvalidMesh(format!("vertex {i} outside the image")));
            }
        }
        let mut total = 0.0;
        for (t, tri) in self.triangles.iter().enumerate() {
            let area = self.signed_area(t);
            if !(area > EPS_AREA) {
                return Err(Error::InvalidMesh(format!("triangle {t} has area {area}")));
            }
            total += area;
            for &i in tri {
                used[i as usize] = true;
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::InvalidMesh(format!("vertex {i} is not referenced")));
        }
        let expected = self.width * self.height;
        if (total - expected).abs() > 1e-9 * expected {
            return Err(Error::InvalidMesh(format!(
                "triangles cover {total} px², image has {expected}"
            )));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_ok()
    }

    /// Brute-force count of (triangle, vertex) pairs violating the empty-circumcircle rule.
    pub fn circumcircle_violations(&self) -> usize {
        (0..self.triangles.len())
            .into_par_iter()
            .map(|t| {
                let [a, b, c] = self.triangle_points(t);
                let tri = self.triangles[t];
                self.positions
                    .iter()
                    .enumerate()
                    .filter(|&(i, &d)| {
                        if tri.contains(&(i as u32)) {
                            return false;
                        }
                        let (det, perm) = incircle(a, b, c, d);
                        det > EPS_CIRC * perm
                    })
                    .count()
            })
            .sum()
    }

    /// Local Delaunay test over interior edges, equivalent to the global
    /// empty-circumcircle property for a valid triangulation.
    pub fn is_delaunay(&self) -> bool {
        self.interior_edges()
            .iter()
            .all(|e| self.edge_circle_margin(e) <= EPS_CIRC)
    }

    /// Recomputes the Delaunay triangulation of the current positions.
    pub fn retriangulate(&mut self) -> Result<()> {
        self.triangles = triangulate(&self.positions)?;
        self.boundary = self
            .positions
            .iter()
            .map(|&p| BoundaryKind::classify(p, self.width, self.height))
            .collect();
        self.rebuild_topology_caches();
        Ok(())
    }

    /// Appends vertices and re-triangulates; returns the id of the first new vertex.
    pub fn insert_points(&mut self, points: &[[f64; 2]]) -> Result<usize> {
        let first = self.positions.len();
        self.positions.extend_from_slice(points);
        self.retriangulate()?;
        Ok(first)
    }

    /// Interior edges in ascending `(a, b)` order.
    pub fn interior_edges(&self) -> Vec<Edge> {
        let mut half: Vec<(u32, u32, u32)> = Vec::with_capacity(self.triangles.len() * 3);
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b, c) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
                half.push((a.min(b), a.max(b), c));
            }
        }
        half.sort_unstable();
        half.windows(2)
            .filter(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1)
            .map(|w| Edge {
                a: w[0].0,
                b: w[0].1,
                c: w[0].2,
                d: w[1].2,
            })
            .collect()
    }

    pub fn has_edge(&self, a: u32, b: u32) -> bool {
        self.one_ring[a as usize].binary_search(&b).is_ok()
    }

    /// Relative in-circle margin of `e.d` against triangle `(a, b, c)`; near
    /// zero for co-circular quads.
    pub fn edge_circle_margin(&self, e: &Edge) -> f64 {
        let p = |i: u32| self.positions[i as usize];
        let (a, b, c, d) = (p(e.a), p(e.b), p(e.c), p(e.d));
        let (a, b) = if cross(a, b, c) < 0.0 { (b, a) } else { (a, b) };
        let (det, perm) = incircle(a, b, c, d);
        if perm == 0.0 {
            0.0
        } else {
            det / perm
        }
    }

    /// Replaces edge `(a, b)` by `(c, d)` when the quad is strictly convex.
    pub fn flip_edge(&mut self, a: u32, b: u32) -> bool {
        let (a, b) = (a.min(b), a.max(b));
        let mut inc = self
            .triangles
            .iter()
            .enumerate()
            .filter(|(_, t)| t.contains(&a) && t.contains(&b))
            .map(|(i, _)| i);
        let (t0, t1) = match (inc.next(), inc.next(), inc.next()) {
            (Some(x), Some(y), None) => (x, y),
            _ => return false,
        };
        let apex = |t: [u32; 3]| *t.iter().find(|&&v| v != a && v != b).unwrap();
        let c = apex(self.triangles[t0]);
        let d = apex(self.triangles[t1]);
        let p = |i: u32| self.positions[i as usize];
        let mut n0 = [c, d, a];
        let mut n1 = [d, c, b];
        for n in [&mut n0, &mut n1] {
            let area = cross(p(n[0]), p(n[1]), p(n[2]));
            if area.abs() <= 2.0 * EPS_AREA {
                return false;
            }
            if area < 0.0 {
                n.swap(1, 2);
            }
        }
        let old = 0.5 * (cross(p(a), p(b), p(c)).abs() + cross(p(a), p(b), p(d)).abs());
        let new = 0.5 * (cross(p(n0[0]), p(n0[1]), p(n0[2])) + cross(p(n1[0]), p(n1[1]), p(n1[2])));
        if (old - new).abs() > 1e-9 * old.max(1.0) {
            return false;
        }
        self.triangles[t0] = n0;
        self.triangles[t1] = n1;
        self.rebuild_topology_caches();
        true
    }
}

fn check_extent(width: f64, height: f64) -> Result<()> {
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return Err(Error::InvalidMesh(format!("invalid extent {width} x {height}")));
    }
    Ok(())
}

/// Returns `mesh` untouched when it satisfies every invariant; otherwise
/// clamps vertices into their allowed sets, separates coincident vertices and
/// re-triangulates.
pub fn validate_or_remesh(mesh: Mesh) -> Mesh {
    if mesh.is_valid() {
        return mesh;
    }
    let mut mesh = mesh;
    repair(&mut mesh);
    mesh
}

fn repair(mesh: &mut Mesh) {
    let (w, h) = (mesh.width, mesh.height);
    for (p, k) in mesh.positions.iter_mut().zip(&mesh.boundary) {
        if !p[0].is_finite() || !p[1].is_finite() {
            *p = [w * 0.5, h * 0.5];
        }
        *p = k.constrain(*p, w, h);
    }
    let corners = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    for c in corners {
        if !mesh.positions.contains(&c) {
            mesh.positions.push(c);
        }
    }
    for attempt in 0..8 {
        let step = 1e-3 * 4f64.powi(attempt);
        separate_duplicates(mesh, step);
        if mesh.retriangulate().is_ok() && mesh.is_valid() {
            return;
        }
        // Nudge vertices that the triangulation dropped or that touch a
        // sliver, walking them towards the image centre by a small,
        // index-dependent offset.
        let mut bad = vec![false; mesh.positions.len()];
        let mut used = vec![false; mesh.positions.len()];
        for t in 0..mesh.triangles.len() {
            let tri = mesh.triangles[t];
            for &i in &tri {
                used[i as usize] = true;
            }
            if mesh.signed_area(t) <= EPS_AREA {
                for &i in &tri {
                    bad[i as usize] = true;
                }
            }
        }
        for i in 0..mesh.positions.len() {
            if bad[i] || !used[i] {
                nudge(mesh, i, step);
            }
        }
    }
}

fn nudge(mesh: &mut Mesh, i: usize, step: f64) {
    let (w, h) = (mesh.width, mesh.height);
    let kind = BoundaryKind::classify(mesh.positions[i], w, h);
    let angle = i as f64 * 2.399_963_229_728_653;
    let p = mesh.positions[i];
    let q = match kind {
        BoundaryKind::Corner => p,
        BoundaryKind::Top | BoundaryKind::Bottom => {
            let s = if p[0] < w * 0.5 { 1.0 } else { -1.0 };
            [p[0] + s * step, p[1]]
        }
        BoundaryKind::Left | BoundaryKind::Right => {
            let s = if p[1] < h * 0.5 { 1.0 } else { -1.0 };
            [p[0], p[1] + s * step]
        }
        BoundaryKind::Interior => {
            let inward = [w * 0.5 - p[0], h * 0.5 - p[1]];
            let n = (inward[0] * inward[0] + inward[1] * inward[1]).sqrt().max(1e-12);
            [
                p[0] + step * (inward[0] / n + 0.5 * angle.cos()),
                p[1] + step * (inward[1] / n + 0.5 * angle.sin()),
            ]
        }
    };
    mesh.positions[i] = kind.constrain(q, w, h);
}

fn separate_duplicates(mesh: &mut Mesh, step: f64) {
    let mut order: Vec<usize> = (0..mesh.positions.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (mesh.positions[i], mesh.positions[j]);
        a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(i.cmp(&j))
    });
    for k in 1..order.len() {
        let (i, j) = (order[k - 1], order[k]);
        let (a, b) = (mesh.positions[i], mesh.positions[j]);
        if (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9 {
            nudge(mesh, i.max(j), step);
        }
    }
}

/// Vertices per image side (excluding corners) for `n` total vertices.
pub fn border_counts(width: f64, height: f64, n: usize) -> (usize, usize) {
    let density = (n as f64 / (width * height)).sqrt();
    let side = |len: f64| ((0.5 * len * density).round() as i64 - 1).max(0) as usize;
    let (mut kw, mut kh) = (side(width), side(height));
    while 4 + 2 * (kw + kh) > n {
        if kw >= kh {
            kw -= 1;
        } else {
            kh -= 1;
        }
    }
    (kw, kh)
}

/// Sobel magnitude of the tonemapped luminance on a copy whose longest side
/// is at most [`SOBEL_MAX_DIM`]. Returns `(magnitude, cols, rows, factor)`.
pub fn sobel_magnitude(img: &HdrImage) -> (Vec<f64>, usize, usize, usize) {
    let s = img.width.max(img.height).div_ceil(SOBEL_MAX_DIM).max(1);
    let cols = img.width.div_ceil(s);
    let rows = img.height.div_ceil(s);
    let mut lum = vec![0.0; cols * rows];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            let mut n = 0.0;
            for y in r * s..((r + 1) * s).min(img.height) {
                for x in c * s..((c + 1) * s).min(img.width) {
                    let p = img.pixel(x, y);
                    let t = |v: f32| tonemap_sample(v as f64, img.white_level);
                    acc += 0.2126 * t(p[0]) + 0.7152 * t(p[1]) + 0.0722 * t(p[2]);
                    n += 1.0;
                }
            }
            lum[r * cols + c] = acc / n;
        }
    }
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, cols as isize - 1) as usize;
        let y = y.clamp(0, rows as isize - 1) as usize;
        lum[y * cols + x]
    };
    let mut mag = vec![0.0; cols * rows];
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let gx = (at(c + 1, r - 1) + 2.0 * at(c + 1, r) + at(c + 1, r + 1))
                - (at(c - 1, r - 1) + 2.0 * at(c - 1, r) + at(c - 1, r + 1));
            let gy = (at(c - 1, r + 1) + 2.0 * at(c, r + 1) + at(c + 1, r + 1))
                - (at(c - 1, r - 1) + 2.0 * at(c, r - 1) + at(c + 1, r - 1));
            mag[r as usize * cols + c as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    (mag, cols, rows, s)
}

/// Seeds `n_init` vertices: corners and evenly spaced border vertices, then
/// interior points drawn from `floor * uniform + (1 - floor) * |Sobel|`.
pub fn init_edge_aware(img: &HdrImage, n_init: usize, floor: f64, seed: u64) -> Result<Mesh> {
    if n_init < 4 {
        return Err(Error::Config(format!(
            "n_init = {n_init} is smaller than the 4 corner vertices"
        )));
    }
    if !(0.0..=1.0).contains(&floor) {
        return Err(Error::OutOfRange {
            value: floor,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let (kw, kh) = border_counts(w, h, n_init);
    let mut pts = vec![[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    for i in 1..=kw {
        let x = w * i as f64 / (kw + 1) as f64;
        pts.push([x, 0.0]);
        pts.push([x, h]);
    }
    for j in 1..=kh {
        let y = h * j as f64 / (kh + 1) as f64;
        pts.push([0.0, y]);
        pts.push([w, y]);
    }
    let interior = n_init - pts.len();
    if interior > 0 {
        let (mag, cols, rows, s) = sobel_magnitude(img);
        let total: f64 = mag.iter().sum();
        let uniform = 1.0 / mag.len() as f64;
        let weights: Vec<f64> = if total > 0.0 {
            mag.iter()
                .map(|&m| floor * uniform + (1.0 - floor) * m / total)
                .collect()
        } else {
            vec![uniform; mag.len()]
        };
        let dist = WeightedIndex::new(&weights)
            .or_else(|_| WeightedIndex::new(vec![1.0; mag.len()]))
            .map_err(|_| Error::Degenerate("empty sampling distribution"))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let margin = 0.25f64.min(0.25 * w.min(h));
        let _ = (cols, rows);
        while pts.len() < n_init {
            let k = dist.sample(&mut rng);
            let (cx, cy) = (k % cols, k / cols);
            let x0 = (cx * s) as f64;
            let y0 = (cy * s) as f64;
            let x1 = (((cx + 1) * s) as f64).min(w);
            let y1 = (((cy + 1) * s) as f64).min(h);
            let x = rng.random_range(x0..x1).clamp(margin, w - margin);
            let y = rng.random_range(y0..y1).clamp(margin, h - margin);
            pts.push([x, y]);
        }
    }
    let mesh = Mesh::from_points(w, h, pts)?;
    Ok(validate_or_remesh(mesh))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mesh(n_interior: usize, w: f64, h: f64, seed: u64) -> Mesh {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pts = vec![[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
        for _ in 0..n_interior {
            pts.push([rng.random_range(0.5..w - 0.5), rng.random_range(0.5..h - 0.5)]);
        }
        Mesh::from_points(w, h, pts).unwrap()
    }

    #[test]
    fn unit_square_two_triangles() {
        let m = Mesh::from_points(1.0, 1.0, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(m.num_triangles(), 2);
        assert_eq!(m.circumcircle_violations(), 0);
        m.check().unwrap();
    }

    #[test]
    fn random_points_are_delaunay() {
        for seed in 0..5 {
            let m = random_mesh(100, 64.0, 48.0, seed);
            assert_eq!(m.circumcircle_violations(), 0);
            m.check().unwrap();
        }
    }

    #[test]
    fn collinear_rejected() {
        let pts = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(triangulate(&pts).is_err());
        assert!(triangulate(&pts[..2]).is_err());
    }

    #[test]
    fn collinear_border_points_cover() {
        let mut pts = vec![[0.0, 0.0], [32.0, 0.0], [32.0, 32.0], [0.0, 32.0]];
        for i in 1..32 {
            pts.push([i as f64, 0.0]);
            pts.push([i as f64, 32.0]);
            pts.push([0.0, i as f64]);
            pts.push([32.0, i as f64]);
        }
        pts.push([16.3, 15.7]);
        let m = Mesh::from_points(32.0, 32.0, pts).unwrap();
        m.check().unwrap();
    }

    #[test]
    fn locate_centroid_and_vertex() {
        let m = random_mesh(30, 40.0, 40.0, 7);
        for t in 0..m.num_triangles() {
            let (found, w) = m.locate(m.centroid(t)).unwrap();
            assert_eq!(found, t);
            for v in w {
                assert!((v - 1.0 / 3.0).abs() < 1e-9);
            }
        }
        let v = m.triangles()[5][0] as usize;
        let (t, w) = m.locate(m.positions()[v]).unwrap();
        let lowest = (0..m.num_triangles())
            .find(|&t| m.triangles()[t].contains(&(v as u32)))
            .unwrap();
        assert_eq!(t, lowest);
        assert!(w.iter().any(|&x| (x - 1.0).abs() < 1e-12));
        assert!(m.locate([-1.0, 3.0]).is_err());
    }

    #[test]
    fn tile_locate_matches_exhaustive() {
        let m = random_mesh(200, 100.0, 70.0, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let p = [rng.random_range(0.0..=100.0), rng.random_range(0.0..=70.0)];
            assert_eq!(m.locate(p).unwrap().0, m.locate_exhaustive(p).unwrap().0);
        }
        // Exact vertex and tile-boundary positions.
        for &p in m.positions() {
            assert_eq!(m.locate(p).unwrap().0, m.locate_exhaustive(p).unwrap().0);
        }
        for x in 0..=6 {
            let p = [x as f64 * TILE_SIZE, 32.0];
            assert_eq!(m.locate(p).unwrap().0, m.locate_exhaustive(p).unwrap().0);
        }
    }

    #[test]
    fn every_pixel_centre_is_covered() {
        let m = random_mesh(50, 37.0, 23.0, 9);
        let map = m.pixel_triangles(37, 23).unwrap();
        assert_eq!(map.len(), 37 * 23);
    }

    #[test]
    fn valid_mesh_is_returned_unchanged() {
        let m = random_mesh(40, 30.0, 30.0, 1);
        let tris = m.triangles().to_vec();
        let r = validate_or_remesh(m);
        assert_eq!(r.triangles(), &tris[..]);
    }

    #[test]
    fn collinear_interior_vertices_repaired() {
        let (w, h) = (10.0, 10.0);
        let pts = vec![
            [0.0, 0.0],
            [w, 0.0],
            [w, h],
            [0.0, h],
            [3.0, 5.0],
            [5.0, 5.0],
            [7.0, 5.0],
        ];
        // Hand-built topology containing the zero-area triangle (4, 5, 6).
        let tris = vec![
            [0, 1, 4],
            [4, 5, 6],
            [1, 2, 6],
            [2, 3, 6],
            [3, 0, 4],
        ];
        let m = Mesh::from_parts(w, h, pts, tris).unwrap();
        assert!(!m.is_valid());
        let r = validate_or_remesh(m);
        r.check().unwrap();
        assert_eq!(r.num_vertices(), 7);
        assert_eq!(r.circumcircle_violations(), 0);
    }

    #[test]
    fn dragged_vertex_is_clamped() {
        let mut m = random_mesh(20, 20.0, 20.0, 2);
        let mut pos = m.positions().to_vec();
        pos[4] = [25.0, 10.0];
        m.set_positions(pos).unwrap();
        assert!(!m.is_valid());
        let r = validate_or_remesh(m);
        r.check().unwrap();
        assert_eq!(r.positions()[4][0], 20.0);
    }

    #[test]
    fn duplicate_vertices_separated() {
        let mut m = random_mesh(20, 20.0, 20.0, 5);
        let mut pos = m.positions().to_vec();
        pos[6] = pos[5];
        m.set_positions(pos).unwrap();
        let r = validate_or_remesh(m);
        r.check().unwrap();
        assert_eq!(r.num_vertices(), 24);
    }

    #[test]
    fn boundary_projection() {
        assert_eq!(BoundaryKind::Corner.project([1.0, 2.0]), [0.0, 0.0]);
        assert_eq!(BoundaryKind::Top.project([1.0, 2.0]), [1.0, 0.0]);
        assert_eq!(BoundaryKind::Right.project([1.0, 2.0]), [0.0, 2.0]);
        assert_eq!(BoundaryKind::classify([0.0, 5.0], 10.0, 10.0), BoundaryKind::Left);
        assert_eq!(BoundaryKind::classify([10.0, 10.0], 10.0, 10.0), BoundaryKind::Corner);
    }

    #[test]
    fn init_corner_only() {
        let img = HdrImage::filled(16, 16, 100.0, 16383.0);
        let m = init_edge_aware(&img, 4, 1.0, 0).unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_triangles(), 2);
        assert!(init_edge_aware(&img, 3, 1.0, 0).is_err());
    }

    #[test]
    fn init_constant_image_is_uniform() {
        let img = HdrImage::filled(64, 64, 100.0, 16383.0);
        let m = init_edge_aware(&img, 16, 0.05, 1).unwrap();
        assert_eq!(m.num_vertices(), 16);
        m.check().unwrap();
        let b = m.boundary().iter().filter(|k| k.is_boundary()).count();
        assert_eq!(b, 8);
    }

    #[test]
    fn init_concentrates_on_vertical_edge() {
        let img = HdrImage::from_fn(256, 128, 16383.0, |x, _| if x < 100 { [50.0; 3] } else { [8000.0; 3] });
        let m = init_edge_aware(&img, 400, 0.05, 42).unwrap();
        let interior: Vec<_> = m
            .positions()
            .iter()
            .zip(m.boundary())
            .filter(|(_, k)| !k.is_boundary())
            .map(|(p, _)| p)
            .collect();
        let near = interior.iter().filter(|p| (p[0] - 100.0).abs() <= 5.0).count();
        assert!(near as f64 >= 0.6 * interior.len() as f64, "{near}/{}", interior.len());
    }

    #[test]
    fn flip_and_edges() {
        let m0 = Mesh::from_points(1.0, 1.0, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let edges = m0.interior_edges();
        assert_eq!(edges.len(), 1);
        let e = edges[0];
        assert!(m0.edge_circle_margin(&e).abs() < 1e-12);
        let mut m = m0.clone();
        assert!(m.flip_edge(e.a, e.b));
        assert!(m.has_edge(e.c.min(e.d), e.c.max(e.d)));
        assert!(!m.has_edge(e.a, e.b));
        m.check().unwrap();
    }

    #[test]
    fn local_delaunay_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for seed in 0..20 {
            let mut m = random_mesh(40, 30.0, 20.0, seed);
            assert!(m.is_delaunay());
            let pos: Vec<[f64; 2]> = m
                .positions()
                .iter()
                .zip(m.boundary())
                .map(|(&p, k)| {
                    let d = k.project([rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]);
                    k.constrain([p[0] + d[0], p[1] + d[1]], 30.0, 20.0)
                })
                .collect();
            m.set_positions(pos).unwrap();
            if m.is_valid() {
                assert_eq!(m.is_delaunay(), m.circumcircle_violations() == 0);
            }
        }
    }
}
