//! Delaunay triangulation by incremental Bowyer–Watson insertion with exact
//! predicates, plus the anchored edge and triangle sets built on top of it.
//!
//! Cocircular configurations are resolved deterministically: after insertion,
//! any edge whose two triangles are cocircular is flipped while that makes the
//! smaller of the two index-sorted triples lexicographically smaller. Each flip
//! strictly decreases the sorted list of all triples, so the pass terminates.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{circumcircle, Point2};
use crate::pointprocess::{lex_cmp, PointConfiguration, Window};
use crate::predicates::{incircle, orient, strictly_between};

const GHOST: u32 = u32::MAX;

/// Delaunay edge `(i, j)` with `p_i` lexicographically before `p_j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AnchoredEdge {
    pub i: usize,
    pub j: usize,
    pub length: f64,
}

/// Delaunay triangle `(i, j, k)` with vertices in lexicographic order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AnchoredTriple {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub d12: f64,
    pub d13: f64,
    pub d23: f64,
}

#[derive(Clone, Debug)]
pub struct Triangulation {
    config: PointConfiguration,
    triangles: Vec<[usize; 3]>,
    circumcenters: Vec<Point2>,
    circumradii: Vec<f64>,
    neighbors: Vec<[Option<usize>; 3]>,
    edges: Vec<(usize, usize)>,
    on_hull: Vec<bool>,
}

impl Triangulation {
    pub fn config(&self) -> &PointConfiguration {
        &self.config
    }

    pub fn points(&self) -> &[Point2] {
        self.config.points()
    }

    /// Triangles as index triples, vertices in lexicographic point order.
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn circumcenters(&self) -> &[Point2] {
        &self.circumcenters
    }

    pub fn circumradii(&self) -> &[f64] {
        &self.circumradii
    }

    /// `neighbors()[t][k]` is the triangle across the edge opposite vertex
    /// `triangles()[t][k]`, or `None` on the convex hull.
    pub fn neighbors(&self) -> &[[Option<usize>; 3]] {
        &self.neighbors
    }

    /// Undirected edges `(i, j)` with `p_i` lexicographically before `p_j`,
    /// sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_hull_vertex(&self, v: usize) -> bool {
        self.on_hull[v]
    }

    pub fn hull_vertex_count(&self) -> usize {
        self.on_hull.iter().filter(|h| **h).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tri_index", "i", "j", "k", "cx", "cy", "r"])?;
        for (t, tri) in self.triangles.iter().enumerate() {
            let c = self.circumcenters[t];
            w.write_record([
                t.to_string(),
                tri[0].to_string(),
                tri[1].to_string(),
                tri[2].to_string(),
                c.x.to_string(),
                c.y.to_string(),
                self.circumradii[t].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Delaunay triangulation of `config`, inserting points in index order.
pub fn triangulate(config: &PointConfiguration) -> Result<Triangulation> {
    let pts = config.points();
    if pts.len() < 3 {
        return Err(Error::Degenerate(format!(
            "triangulation needs at least 3 points, got {}",
            pts.len()
        )));
    }
    let third = (2..pts.len())
        .find(|&k| orient(pts[0], pts[1], pts[k]) != 0.0)
        .ok_or_else(|| Error::Degenerate("all points are collinear".into()))?;

    let mut mesh = Mesh::new(pts, 0, 1, third);
    for v in (2..pts.len()).filter(|&v| v != third) {
        mesh.insert(v as u32)?;
    }
    mesh.resolve_cocircular();
    Ok(mesh.finish(config.clone()))
}

struct Mesh<'a> {
    pts: &'a [Point2],
    // Counter-clockwise vertices; ghost triangles keep GHOST in slot 2.
    verts: Vec<[u32; 3]>,
    // Neighbour across the edge opposite slot k.
    nbrs: Vec<[u32; 3]>,
    alive: Vec<bool>,
    free: Vec<u32>,
    visit: Vec<u32>,
    stamp: u32,
    last: u32,
}

#[derive(Clone, Copy, PartialEq)]
enum Visit {
    Unseen,
    Cavity,
    Kept,
}

impl<'a> Mesh<'a> {
    fn new(pts: &'a [Point2], a: usize, b: usize, c: usize) -> Self {
        let (a, b, c) = (a as u32, b as u32, c as u32);
        let (b, c) = if orient(pts[a as usize], pts[b as usize], pts[c as usize]) > 0.0 {
            (b, c)
        } else {
            (c, b)
        };
        let mut mesh = Mesh {
            pts,
            verts: Vec::with_capacity(2 * pts.len() + 4),
            nbrs: Vec::with_capacity(2 * pts.len() + 4),
            alive: Vec::with_capacity(2 * pts.len() + 4),
            free: Vec::new(),
            visit: Vec::new(),
            stamp: 0,
            last: 0,
        };
        // Finite triangle 0 = (a, b, c); ghosts across each edge.
        // Ghost across edge b->c (opposite a) is (c, b, G), and so on.
        mesh.push([a, b, c], [1, 2, 3]);
        mesh.push([c, b, GHOST], [3, 2, 0]);
        mesh.push([a, c, GHOST], [1, 3, 0]);
        mesh.push([b, a, GHOST], [2, 1, 0]);
        mesh
    }

    fn push(&mut self, v: [u32; 3], n: [u32; 3]) -> u32 {
        if let Some(id) = self.free.pop() {
            self.verts[id as usize] = v;
            self.nbrs[id as usize] = n;
            self.alive[id as usize] = true;
            id
        } else {
            self.verts.push(v);
            self.nbrs.push(n);
            self.alive.push(true);
            self.visit.push(0);
            (self.verts.len() - 1) as u32
        }
    }

    #[inline]
    fn pt(&self, v: u32) -> Point2 {
        self.pts[v as usize]
    }

    #[inline]
    fn is_ghost(&self, t: u32) -> bool {
        self.verts[t as usize][2] == GHOST
    }

    fn in_conflict(&self, t: u32, p: Point2) -> bool {
        let [a, b, c] = self.verts[t as usize];
        if c == GHOST {
            // Outer side of hull edge b -> a is the left of a -> b.
            let o = orient(self.pt(a), self.pt(b), p);
            o > 0.0 || (o == 0.0 && strictly_between(p, self.pt(a), self.pt(b)))
        } else {
            incircle(self.pt(a), self.pt(b), self.pt(c), p) > 0.0
        }
    }

    fn locate(&self, p: Point2) -> u32 {
        let mut t = self.last;
        if !self.alive[t as usize] {
            t = self.alive.iter().position(|a| *a).unwrap_or(0) as u32;
        }
        if self.is_ghost(t) {
            t = self.nbrs[t as usize][2];
        }
        let limit = 4 * self.verts.len() + 16;
        let mut rot = 0usize;
        for _ in 0..limit {
            let v = self.verts[t as usize];
            let mut moved = false;
            for s in 0..3 {
                let k = (s + rot) % 3;
                let (u, w) = (v[(k + 1) % 3], v[(k + 2) % 3]);
                if orient(self.pt(u), self.pt(w), p) < 0.0 {
                    t = self.nbrs[t as usize][k];
                    moved = true;
                    break;
                }
            }
            if !moved || self.is_ghost(t) {
                return t;
            }
            rot = (rot + 1) % 3;
        }
        // Walk did not settle; fall back to a scan.
        (0..self.verts.len() as u32)
            .find(|&t| self.alive[t as usize] && self.in_conflict(t, p))
            .unwrap_or(t)
    }

    fn insert(&mut self, v: u32) -> Result<()> {
        let p = self.pt(v);
        let mut start = self.locate(p);
        if !self.in_conflict(start, p) {
            start = (0..self.verts.len() as u32)
                .find(|&t| self.alive[t as usize] && self.in_conflict(t, p))
                .ok_or_else(|| {
                    Error::Degenerate(format!("point {v} coincides with an existing vertex"))
                })?;
        }

        self.stamp = self.stamp.wrapping_add(3);
        if self.stamp < 3 {
            self.visit.iter_mut().for_each(|s| *s = 0);
            self.stamp = 3;
        }
        let base = self.stamp;
        let status = |visit: &[u32], t: u32| match visit[t as usize].wrapping_sub(base) {
            0 => Visit::Cavity,
            1 => Visit::Kept,
            _ => Visit::Unseen,
        };

        let mut cavity = vec![start];
        self.visit[start as usize] = base;
        // Boundary edges (u, w) of the cavity with the triangle outside them.
        let mut boundary: Vec<(u32, u32, u32)> = Vec::new();
        let mut head = 0;
        while head < cavity.len() {
            let t = cavity[head];
            head += 1;
            for k in 0..3 {
                let nb = self.nbrs[t as usize][k];
                let mut st = status(&self.visit, nb);
                if st == Visit::Unseen {
                    st = if self.in_conflict(nb, p) {
                        cavity.push(nb);
                        Visit::Cavity
                    } else {
                        Visit::Kept
                    };
                    self.visit[nb as usize] = base + if st == Visit::Cavity { 0 } else { 1 };
                }
                if st == Visit::Kept {
                    let tv = self.verts[t as usize];
                    boundary.push((tv[(k + 1) % 3], tv[(k + 2) % 3], nb));
                }
            }
        }

        for &t in &cavity {
            self.alive[t as usize] = false;
            self.free.push(t);
        }

        let mut created: Vec<u32> = Vec::with_capacity(boundary.len());
        for &(u, w, outside) in &boundary {
            let id = self.push([u, w, v], [GHOST, GHOST, outside]);
            self.replace_neighbor(outside, u, w, id);
            created.push(id);
        }
        // New triangle (u, w, v): across w->v lies the one starting at w,
        // across v->u lies the one ending at u.
        for (n, &(u, w, _)) in boundary.iter().enumerate() {
            let id = created[n];
            let after = boundary.iter().position(|b| b.0 == w).ok_or_else(|| {
                Error::Invariant("cavity boundary is not a closed cycle".into())
            })?;
            let before = boundary.iter().position(|b| b.1 == u).ok_or_else(|| {
                Error::Invariant("cavity boundary is not a closed cycle".into())
            })?;
            self.nbrs[id as usize][0] = created[after];
            self.nbrs[id as usize][1] = created[before];
        }
        for &id in &created {
            self.normalize(id);
        }
        self.last = created
            .iter()
            .copied()
            .find(|&t| !self.is_ghost(t))
            .unwrap_or(created[0]);
        Ok(())
    }

    /// Rotates a triangle so that a ghost vertex sits in slot 2.
    fn normalize(&mut self, t: u32) {
        let v = self.verts[t as usize];
        let n = self.nbrs[t as usize];
        if let Some(g) = v.iter().position(|&x| x == GHOST) {
            let r = (g + 1) % 3;
            self.verts[t as usize] = [v[r], v[(r + 1) % 3], v[(r + 2) % 3]];
            self.nbrs[t as usize] = [n[r], n[(r + 1) % 3], n[(r + 2) % 3]];
        }
    }

    /// In triangle `t`, points the edge `{u, w}` at `new`.
    fn replace_neighbor(&mut self, t: u32, u: u32, w: u32, new: u32) {
        let v = self.verts[t as usize];
        for k in 0..3 {
            let (a, b) = (v[(k + 1) % 3], v[(k + 2) % 3]);
            if (a == u && b == w) || (a == w && b == u) {
                self.nbrs[t as usize][k] = new;
                return;
            }
        }
    }

    fn resolve_cocircular(&mut self) {
        loop {
            let mut flipped = false;
            for t in 0..self.verts.len() as u32 {
                if !self.alive[t as usize] || self.is_ghost(t) {
                    continue;
                }
                for k in 0..3 {
                    let nb = self.nbrs[t as usize][k];
                    if self.is_ghost(nb) {
                        continue;
                    }
                    if self.try_tie_flip(t, k) {
                        flipped = true;
                        break;
                    }
                }
            }
            if !flipped {
                return;
            }
        }
    }

    fn try_tie_flip(&mut self, t: u32, k: usize) -> bool {
        let tv = self.verts[t as usize];
        let tn = self.nbrs[t as usize];
        let (a, b, c) = (tv[k], tv[(k + 1) % 3], tv[(k + 2) % 3]);
        let (n_b, n_c) = (tn[(k + 1) % 3], tn[(k + 2) % 3]);
        let nb = tn[k];
        let nv = self.verts[nb as usize];
        let nn = self.nbrs[nb as usize];
        let Some(m) = nv.iter().position(|&x| x != b && x != c) else {
            return false;
        };
        let d = nv[m];
        if incircle(self.pt(a), self.pt(b), self.pt(c), self.pt(d)) != 0.0 {
            return false;
        }
        if orient(self.pt(a), self.pt(b), self.pt(d)) <= 0.0
            || orient(self.pt(a), self.pt(d), self.pt(c)) <= 0.0
        {
            return false;
        }
        let old = sorted3([a, b, c]).min(sorted3([d, c, b]));
        let new = sorted3([a, b, d]).min(sorted3([a, d, c]));
        if new >= old {
            return false;
        }
        // nb = (d, c, b) after rotation: across b->d is n1, across d->c is n2.
        let n1 = nn[(m + 1) % 3];
        let n2 = nn[(m + 2) % 3];
        debug_assert!(nv[(m + 1) % 3] == c && nv[(m + 2) % 3] == b);
        self.verts[t as usize] = [a, b, d];
        self.nbrs[t as usize] = [n1, nb, n_c];
        self.verts[nb as usize] = [a, d, c];
        self.nbrs[nb as usize] = [n2, n_b, t];
        self.replace_neighbor(n1, b, d, t);
        self.replace_neighbor(n_b, c, a, nb);
        true
    }

    fn finish(self, config: PointConfiguration) -> Triangulation {
        let pts = self.pts;
        let n = pts.len();
        let mut on_hull = vec![false; n];
        let mut internal: Vec<u32> = Vec::new();
        for t in 0..self.verts.len() as u32 {
            if !self.alive[t as usize] {
                continue;
            }
            let v = self.verts[t as usize];
            if v[2] == GHOST {
                on_hull[v[0] as usize] = true;
                on_hull[v[1] as usize] = true;
            } else {
                internal.push(t);
            }
        }

        let lex_sorted = |v: [u32; 3]| {
            let mut s = [v[0] as usize, v[1] as usize, v[2] as usize];
            s.sort_by(|&x, &y| lex_cmp(pts[x], pts[y]));
            s
        };
        let mut order: Vec<(usize, [usize; 3])> = internal
            .iter()
            .enumerate()
            .map(|(i, &t)| (i, lex_sorted(self.verts[t as usize])))
            .collect();
        order.sort_by(|a, b| a.1.cmp(&b.1));
        let mut out_index = vec![usize::MAX; self.verts.len()];
        for (pos, (i, _)) in order.iter().enumerate() {
            out_index[internal[*i] as usize] = pos;
        }

        let mut triangles = Vec::with_capacity(order.len());
        let mut circumcenters = Vec::with_capacity(order.len());
        let mut circumradii = Vec::with_capacity(order.len());
        let mut neighbors = Vec::with_capacity(order.len());
        for (i, tri) in &order {
            let t = internal[*i] as usize;
            let v = self.verts[t];
            let mut nbr = [None; 3];
            for (slot, vertex) in tri.iter().enumerate() {
                let k = v.iter().position(|&x| x as usize == *vertex).unwrap_or(0);
                let nb = self.nbrs[t][k];
                if self.verts[nb as usize][2] != GHOST {
                    nbr[slot] = Some(out_index[nb as usize]);
                }
            }
            let (a, b, c) = (pts[tri[0]], pts[tri[1]], pts[tri[2]]);
            let (cc, r) = circumcircle(a, b, c)
                .unwrap_or_else(|| (Point2::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0), f64::INFINITY));
            triangles.push(*tri);
            circumcenters.push(cc);
            circumradii.push(r);
            neighbors.push(nbr);
        }

        let mut edges: Vec<(usize, usize)> = triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[0], t[2]), (t[1], t[2])])
            .collect();
        edges.sort_unstable();
        edges.dedup();

        Triangulation {
            config,
            triangles,
            circumcenters,
            circumradii,
            neighbors,
            edges,
            on_hull,
        }
    }
}

fn sorted3(v: [u32; 3]) -> [u32; 3] {
    let mut s = v;
    s.sort_unstable();
    s
}

/// Edges whose lexicographically smaller endpoint lies in the anchor region.
pub fn anchored_edges(tri: &Triangulation, anchor: &Window) -> Vec<AnchoredEdge> {
    let pts = tri.points();
    tri.edges()
        .iter()
        .filter(|(i, _)| anchor.analysis_contains(pts[*i]))
        .map(|&(i, j)| AnchoredEdge {
            i,
            j,
            length: pts[i].dist(pts[j]),
        })
        .collect()
}

/// Triangles whose lexicographically smallest vertex lies in the anchor region.
pub fn anchored_triples(tri: &Triangulation, anchor: &Window) -> Vec<AnchoredTriple> {
    let pts = tri.points();
    tri.triangles()
        .iter()
        .filter(|t| anchor.analysis_contains(pts[t[0]]))
        .map(|&[i, j, k]| AnchoredTriple {
            i,
            j,
            k,
            d12: pts[i].dist(pts[j]),
            d13: pts[i].dist(pts[k]),
            d23: pts[j].dist(pts[k]),
        })
        .collect()
}

/// Triangles and hull vertices that could differ from the triangulation of
/// the untruncated process near the anchor region.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StabilityReport {
    /// Triangles with an anchor vertex whose circumdisk leaves the simulation
    /// region.
    pub escaping_triangles: Vec<usize>,
    /// Anchor vertices on the convex hull (their star is open).
    pub hull_anchor_vertices: usize,
}

impl StabilityReport {
    pub fn violations(&self) -> usize {
        self.escaping_triangles.len() + self.hull_anchor_vertices
    }

    pub fn is_stable(&self) -> bool {
        self.violations() == 0
    }
}

pub fn boundary_stability_check(tri: &Triangulation, anchor: &Window) -> StabilityReport {
    let pts = tri.points();
    let sim = tri.config().window();
    let escaping_triangles = tri
        .triangles()
        .iter()
        .enumerate()
        .filter(|(t, v)| {
            v.iter().any(|&i| anchor.analysis_contains(pts[i]))
                && !sim.simulation_contains_disk(tri.circumcenters()[*t], tri.circumradii()[*t])
        })
        .map(|(t, _)| t)
        .collect();
    let hull_anchor_vertices = (0..pts.len())
        .filter(|&i| tri.is_hull_vertex(i) && anchor.analysis_contains(pts[i]))
        .count();
    StabilityReport {
        escaping_triangles,
        hull_anchor_vertices,
    }
}

/// Whether `a` and `b` are adjacent in the Delaunay triangulation of
/// `{a, b} ∪ others`, i.e. some closed disk through both has no point of
/// `others` in its interior.
///
/// Linear in `others` and independent of any triangulation. Points equal to
/// `a` or `b` in `others` are ignored.
pub fn is_delaunay_edge(a: Point2, b: Point2, others: &[Point2]) -> bool {
    let m = (a + b) * 0.5;
    let ab = b - a;
    let normal = Point2::new(-ab.y, ab.x);
    let r_sq = (a - m).norm_sq();
    let near_line = 1e-10 * normal.norm();
    // Along the bisector m + t*normal, a left point p is strictly inside the
    // circle iff t > t_p, a right point iff t < t_p. The edge exists iff
    // max over right <= min over left. Floating t picks the candidates; near
    // ties and the final answer use exact incircle tests.
    let mut left: Option<(f64, Point2)> = None;
    let mut right: Option<(f64, Point2)> = None;
    for &p in others {
        if p == a || p == b {
            continue;
        }
        let mut s = normal.dot(p - m);
        if s.abs() <= near_line * (p - m).norm().max(1.0) {
            let o = orient(a, b, p);
            if o == 0.0 {
                if strictly_between(p, a, b) {
                    return false;
                }
                continue;
            }
            s = o.signum() * s.abs().max(f64::MIN_POSITIVE);
        }
        let t = ((p - m).norm_sq() - r_sq) / (2.0 * s);
        if s > 0.0 {
            left = Some(match left {
                None => (t, p),
                Some((lt, lp)) => {
                    let tol = 1e-9 * (1.0 + lt.abs());
                    if t < lt - tol || (t <= lt + tol && incircle(a, b, lp, p) > 0.0) {
                        (t, p)
                    } else {
                        (lt, lp)
                    }
                }
            });
        } else {
            right = Some(match right {
                None => (t, p),
                Some((rt, rp)) => {
                    let tol = 1e-9 * (1.0 + rt.abs());
                    if t > rt + tol || (t >= rt - tol && incircle(b, a, rp, p) > 0.0) {
                        (t, p)
                    } else {
                        (rt, rp)
                    }
                }
            });
        }
    }
    match (left, right) {
        (Some((_, pl)), Some((_, pr))) => incircle(a, b, pl, pr) <= 0.0,
        _ => true,
    }
}
