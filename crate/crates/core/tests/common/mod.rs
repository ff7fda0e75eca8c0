//! Exact-arithmetic oracles for integration tests.
//!
//! Points are dyadic: integer coordinates divided by `2^SCALE_BITS`, so they
//! are exact in `f64` and every predicate below is evaluated exactly in
//! `i128`.

#![allow(dead_code)]

use std::collections::BTreeSet;

use fbfqv::Point2;
use rand::Rng;

pub const SCALE_BITS: i32 = 12;
/// Integer coordinates lie in `[0, 2^RANGE_BITS)`; the incircle determinant
/// then stays below `2^100`.
pub const RANGE_BITS: u32 = 22;

pub type IPoint = [i64; 2];

pub fn to_point(p: IPoint) -> Point2 {
    let s = 2f64.powi(-SCALE_BITS);
    Point2::new(p[0] as f64 * s, p[1] as f64 * s)
}

/// `n` distinct random dyadic points.
pub fn dyadic_points<R: Rng>(n: usize, rng: &mut R) -> Vec<IPoint> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = [
            rng.random_range(0..1i64 << RANGE_BITS),
            rng.random_range(0..1i64 << RANGE_BITS),
        ];
        if seen.insert(p) {
            out.push(p);
        }
    }
    out
}

/// Twice the signed area of `abc`.
pub fn orient(a: IPoint, b: IPoint, c: IPoint) -> i128 {
    let (abx, aby) = ((b[0] - a[0]) as i128, (b[1] - a[1]) as i128);
    let (acx, acy) = ((c[0] - a[0]) as i128, (c[1] - a[1]) as i128);
    abx * acy - aby * acx
}

/// Positive iff `d` lies strictly inside the circle through `a, b, c`
/// (counter-clockwise), zero iff on it.
pub fn incircle(a: IPoint, b: IPoint, c: IPoint, d: IPoint) -> i128 {
    let row = |p: IPoint| {
        let (x, y) = ((p[0] - d[0]) as i128, (p[1] - d[1]) as i128);
        (x, y, x * x + y * y)
    };
    let (ax, ay, al) = row(a);
    let (bx, by, bl) = row(b);
    let (cx, cy, cl) = row(c);
    ax * (by * cl - bl * cy) - ay * (bx * cl - bl * cx) + al * (bx * cy - by * cx)
}

/// Inside test for an arbitrarily oriented, non-degenerate triangle.
pub fn strictly_inside_circumcircle(a: IPoint, b: IPoint, c: IPoint, d: IPoint) -> bool {
    let o = orient(a, b, c);
    assert!(o != 0, "degenerate triangle");
    incircle(a, b, c, d).signum() == o.signum()
}

/// No three points collinear and no four cocircular.
pub fn in_general_position(pts: &[IPoint]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if orient(pts[i], pts[j], pts[k]) == 0 {
                    return false;
                }
                for l in k + 1..n {
                    if incircle(pts[i], pts[j], pts[k], pts[l]) == 0 {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Delaunay edges as index pairs `(min, max)`: the sides of every triangle
/// whose open circumdisk holds no point. Quartic; for small general-position
/// inputs only.
pub fn brute_force_edges(pts: &[IPoint]) -> BTreeSet<(usize, usize)> {
    let n = pts.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if orient(pts[i], pts[j], pts[k]) == 0 {
                    continue;
                }
                let empty = (0..n)
                    .filter(|&l| l != i && l != j && l != k)
                    .all(|l| !strictly_inside_circumcircle(pts[i], pts[j], pts[k], pts[l]));
                if empty {
                    edges.extend([(i, j), (i, k), (j, k)]);
                }
            }
        }
    }
    edges
}

/// Triangles (as index triples) whose open circumdisk contains some point.
pub fn circumdisk_violations(pts: &[IPoint], triangles: &[[usize; 3]]) -> Vec<usize> {
    triangles
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let [a, b, c] = [pts[t[0]], pts[t[1]], pts[t[2]]];
            orient(a, b, c) == 0
                || (0..pts.len())
                    .filter(|l| !t.contains(l))
                    .any(|l| strictly_inside_circumcircle(a, b, c, pts[l]))
        })
        .map(|(k, _)| k)
        .collect()
}

pub fn normalized_edges(edges: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
    edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect()
}
