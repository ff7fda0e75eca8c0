//! Squared increment statistics V2 and V3, their conditional second moments
//! given the points, and the contraction diagnostic.
//!
//! Second-moment sums over pairs of increments are evaluated through the
//! site-level Gram identity: with `D` the sparse increment design (one row per
//! increment, rows summing to zero) and `K_ab = −|x_a − x_b|^α / 2`, the
//! correlation matrix is `M = D K Dᵀ`, so with `L = DᵀD`
//! `tr(M²) = tr((KL)²)` and `tr(M⁴) = tr((KL)⁴)`. Only site-by-site dense
//! matrices are formed.

use std::collections::HashMap;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delaunay::{AnchoredEdge, AnchoredTriple};
use crate::error::{Error, Result};
use crate::fbf::{increment_corr_unchecked, normalized_increment, pair_corr_r_unchecked, FieldSample};
use crate::geom::{pow_dist, Point2};

/// Default cap on the number of increments in contraction computations.
pub const DEFAULT_MAX_CONTRACTION_EDGES: usize = 20_000;

/// Rows per tile in the direct pair sums.
const TILE_ROWS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatisticKind {
    V2,
    V3,
}

impl StatisticKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StatisticKind::V2 => "V2",
            StatisticKind::V3 => "V3",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticValue {
    pub value: f64,
    pub n_terms: usize,
    pub kind: StatisticKind,
}

/// `|E|^{-1/2} Σ (U² − 1)` over the given edges of the sample.
pub fn compute_v2(sample: &FieldSample, edges: &[AnchoredEdge]) -> Result<StatisticValue> {
    if edges.is_empty() {
        return Err(Error::Degenerate("V2 needs at least one edge".into()));
    }
    let mut terms = edges
        .iter()
        .map(|e| normalized_increment(sample, e.i, e.j).map(|u| ((e.i, e.j), u * u - 1.0)))
        .collect::<Result<Vec<_>>>()?;
    // Canonical summation order makes the value independent of edge order.
    terms.sort_by(|a, b| a.0.cmp(&b.0));
    let sum: f64 = terms.iter().map(|t| t.1).sum();
    Ok(StatisticValue {
        value: sum / (edges.len() as f64).sqrt(),
        n_terms: edges.len(),
        kind: StatisticKind::V2,
    })
}

/// Orthogonalizes `(u12, u13)` against their correlation `r`:
/// `((u12 − r u13)/√(1 − r²), u13)`.
pub fn tilde_increments(u12: f64, u13: f64, r: f64) -> Result<(f64, f64)> {
    if !(r.abs() < 1.0 - 1e-12) {
        return Err(Error::Degenerate(format!("increment correlation {r} too close to ±1")));
    }
    Ok(((u12 - r * u13) / (1.0 - r * r).sqrt(), u13))
}

/// `(u12, u13) [[1, r], [r, 1]]⁻¹ (u12, u13)ᵀ − 2`.
pub fn v3_quadratic_form(u12: f64, u13: f64, r: f64) -> f64 {
    (u12 * u12 - 2.0 * r * u12 * u13 + u13 * u13) / (1.0 - r * r) - 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct V3Outcome {
    pub statistic: StatisticValue,
    /// Triples skipped because their increments were almost collinear.
    pub dropped: usize,
    /// Largest scaled disagreement between the two summand formulas.
    pub max_form_discrepancy: f64,
}

/// `|DT|^{-1/2} Σ [(Ũ₁₂₃² − 1) + (Ũ₁₃² − 1)]` over the given triples.
pub fn compute_v3(sample: &FieldSample, triples: &[AnchoredTriple]) -> Result<V3Outcome> {
    if triples.is_empty() {
        return Err(Error::Degenerate("V3 needs at least one triple".into()));
    }
    let alpha = sample.params().alpha();
    let mut terms = Vec::with_capacity(triples.len());
    let mut dropped = 0usize;
    let mut max_form_discrepancy = 0.0f64;
    for t in triples {
        let r = pair_corr_r_unchecked(t.d12, t.d13, t.d23, alpha);
        let u12 = normalized_increment(sample, t.i, t.j)?;
        let u13 = normalized_increment(sample, t.i, t.k)?;
        let Ok((a, b)) = tilde_increments(u12, u13, r) else {
            dropped += 1;
            log::debug!("dropped near-degenerate triple ({}, {}, {}), r = {r}", t.i, t.j, t.k);
            continue;
        };
        let term = (a * a - 1.0) + (b * b - 1.0);
        let form = v3_quadratic_form(u12, u13, r);
        let scale = 1.0 + (u12 * u12 + u13 * u13) / (1.0 - r * r);
        let gap = (term - form).abs() / scale;
        max_form_discrepancy = max_form_discrepancy.max(gap);
        if gap > 1e-9 {
            return Err(Error::Invariant(format!(
                "V3 summand forms disagree by {gap:e} on triple ({}, {}, {})",
                t.i, t.j, t.k
            )));
        }
        terms.push(((t.i, t.j, t.k), term));
    }
    let kept = terms.len();
    if kept == 0 {
        return Err(Error::Degenerate("every triple was degenerate".into()));
    }
    terms.sort_by(|a, b| a.0.cmp(&b.0));
    let sum: f64 = terms.iter().map(|t| t.1).sum();
    Ok(V3Outcome {
        statistic: StatisticValue {
            value: sum / (kept as f64).sqrt(),
            n_terms: kept,
            kind: StatisticKind::V3,
        },
        dropped,
        max_form_discrepancy,
    })
}

/// Sorted vertex indices used by `edges` and `triples`.
pub fn support(edges: &[AnchoredEdge], triples: &[AnchoredTriple]) -> Vec<usize> {
    let mut s: Vec<usize> = edges
        .iter()
        .flat_map(|e| [e.i, e.j])
        .chain(triples.iter().flat_map(|t| [t.i, t.j, t.k]))
        .collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// Rewrites vertex indices into positions within `support` (which must be
/// sorted and contain every index used).
pub fn reindex(
    support: &[usize],
    edges: &[AnchoredEdge],
    triples: &[AnchoredTriple],
) -> Result<(Vec<AnchoredEdge>, Vec<AnchoredTriple>)> {
    let pos = |v: usize| {
        support
            .binary_search(&v)
            .map_err(|_| Error::Invariant(format!("vertex {v} missing from support")))
    };
    let e = edges
        .iter()
        .map(|e| Ok(AnchoredEdge { i: pos(e.i)?, j: pos(e.j)?, ..*e }))
        .collect::<Result<Vec<_>>>()?;
    let t = triples
        .iter()
        .map(|t| {
            Ok(AnchoredTriple {
                i: pos(t.i)?,
                j: pos(t.j)?,
                k: pos(t.k)?,
                ..*t
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((e, t))
}

/// Dense correlation matrix of the normalized increments over a set of edges.
#[derive(Clone, Debug)]
pub struct CorrelationMatrix {
    entries: Mat<f64>,
    edges: Vec<AnchoredEdge>,
    edge_index: HashMap<(usize, usize), usize>,
}

impl CorrelationMatrix {
    pub fn from_edges(edges: &[AnchoredEdge], points: &[Point2], alpha: f64, max_edges: usize) -> Result<Self> {
        let m = edges.len();
        if m > max_edges {
            return Err(Error::Resource {
                what: "correlation matrix rows",
                requested: m as f64,
                cap: max_edges as f64,
            });
        }
        let mut entries = Mat::<f64>::zeros(m, m);
        for l in 0..m {
            let (x3, x4) = (points[edges[l].i], points[edges[l].j]);
            entries[(l, l)] = 1.0;
            for k in (l + 1)..m {
                let c = increment_corr_unchecked(points[edges[k].i], points[edges[k].j], x3, x4, alpha);
                entries[(k, l)] = c;
                entries[(l, k)] = c;
            }
        }
        let edge_index = edges.iter().enumerate().map(|(r, e)| ((e.i, e.j), r)).collect();
        Ok(Self {
            entries,
            edges: edges.to_vec(),
            edge_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.edges.len()
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.entries[(k, l)]
    }

    pub fn row_of(&self, i: usize, j: usize) -> Option<usize> {
        self.edge_index.get(&(i, j)).copied()
    }

    pub fn edges(&self) -> &[AnchoredEdge] {
        &self.edges
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.entries
    }

    /// `Σ_{k,l} M_kl²`.
    pub fn sum_sq(&self) -> f64 {
        let m = self.dim();
        (0..m).map(|l| (0..m).map(|k| self.entries[(k, l)].powi(2)).sum::<f64>()).sum()
    }

    /// `‖M²‖_F²`, equal to the quadruple sum `Σ M_kl M_ij M_ki M_lj`.
    pub fn square_frobenius_sq(&self) -> f64 {
        let m = self.dim();
        let mut sq = Mat::<f64>::zeros(m, m);
        matmul(sq.as_mut(), Accum::Replace, self.entries.as_ref(), self.entries.as_ref(), 1.0, Par::Seq);
        (0..m).map(|l| (0..m).map(|k| sq[(k, l)].powi(2)).sum::<f64>()).sum()
    }
}

/// Sparse linear map from field values at a set of sites to normalized
/// increments: one row per increment.
#[derive(Clone, Debug)]
pub struct IncrementDesign {
    sites: Vec<Point2>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl IncrementDesign {
    /// Rows `U_e = (W_j − W_i) / ℓ_e^{α/2}` (unit scale).
    pub fn for_edges(edges: &[AnchoredEdge], points: &[Point2], alpha: f64) -> Self {
        let (sites, local) = compress(edges.iter().flat_map(|e| [e.i, e.j]), points);
        let rows = edges
            .iter()
            .map(|e| {
                let w = 1.0 / pow_dist(points[e.i].dist(points[e.j]), 0.5 * alpha);
                vec![(local[&e.i], -w), (local[&e.j], w)]
            })
            .collect();
        Self { sites, rows }
    }

    /// Two rows per non-degenerate triple: `Ũ₁₂₃` and `Ũ₁₃`. Returns the
    /// design and the number of degenerate triples left out.
    pub fn for_triples(triples: &[AnchoredTriple], points: &[Point2], alpha: f64) -> (Self, usize) {
        let (sites, local) = compress(triples.iter().flat_map(|t| [t.i, t.j, t.k]), points);
        let mut rows = Vec::with_capacity(2 * triples.len());
        let mut dropped = 0;
        for t in triples {
            let r = pair_corr_r_unchecked(t.d12, t.d13, t.d23, alpha);
            if !(r.abs() < 1.0 - 1e-12) {
                dropped += 1;
                continue;
            }
            let w12 = 1.0 / pow_dist(t.d12, 0.5 * alpha);
            let w13 = 1.0 / pow_dist(t.d13, 0.5 * alpha);
            let s = 1.0 / (1.0 - r * r).sqrt();
            let (a, b, c) = (local[&t.i], local[&t.j], local[&t.k]);
            rows.push(vec![(a, s * (-w12 + r * w13)), (b, s * w12), (c, -s * r * w13)]);
            rows.push(vec![(a, -w13), (c, w13)]);
        }
        (Self { sites, rows }, dropped)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Columns of `L = DᵀD`, as sparse (row, value) lists.
    fn gram_columns(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols: Vec<HashMap<usize, f64>> = vec![HashMap::new(); self.sites.len()];
        for row in &self.rows {
            for &(a, va) in row {
                for &(b, vb) in row {
                    *cols[b].entry(a).or_insert(0.0) += va * vb;
                }
            }
        }
        cols.into_iter()
            .map(|c| {
                let mut v: Vec<(usize, f64)> = c.into_iter().collect();
                v.sort_by_key(|e| e.0);
                v
            })
            .collect()
    }

    /// `K_ab = −|x_a − x_b|^α / 2`.
    fn kernel(&self, alpha: f64) -> Mat<f64> {
        let n = self.sites.len();
        let mut k = Mat::<f64>::zeros(n, n);
        for b in 0..n {
            let pb = self.sites[b];
            let col = k.col_as_slice_mut(b);
            for (a, v) in col.iter_mut().enumerate() {
                if a != b {
                    *v = -0.5 * pow_dist(self.sites[a].dist(pb), alpha);
                }
            }
        }
        k
    }

    /// Dense `X L` for a dense `X`.
    fn times_gram(x: &Mat<f64>, gram: &[Vec<(usize, f64)>]) -> Mat<f64> {
        let n = x.nrows();
        let mut out = Mat::<f64>::zeros(n, gram.len());
        for (b, col) in gram.iter().enumerate() {
            let dst = out.col_as_slice_mut(b);
            for &(c, l) in col {
                for (d, s) in dst.iter_mut().zip(x.col_as_slice(c)) {
                    *d += s * l;
                }
            }
        }
        out
    }

    /// `tr(A²) = Σ_{b,c} A_bc A_cb`, in cache-sized tiles.
    fn trace_of_square(a: &Mat<f64>) -> f64 {
        const T: usize = 64;
        let n = a.nrows();
        let mut total = 0.0;
        for c0 in (0..n).step_by(T) {
            for b0 in (0..n).step_by(T) {
                let mut s = 0.0;
                for c in c0..(c0 + T).min(n) {
                    let col_c = a.col_as_slice(c);
                    for b in b0..(b0 + T).min(n) {
                        s += col_c[b] * a.col_as_slice(b)[c];
                    }
                }
                total += s;
            }
        }
        total
    }

    /// `tr(M²) = Σ_{e,f} corr(U_e, U_f)²`.
    pub fn sum_sq_corr(&self, alpha: f64) -> f64 {
        let gram = self.gram_columns();
        let kl = Self::times_gram(&self.kernel(alpha), &gram);
        Self::trace_of_square(&kl)
    }

    /// `tr(M⁴) = ‖M²‖_F²`.
    pub fn fourth_moment_trace(&self, alpha: f64) -> f64 {
        let gram = self.gram_columns();
        let k = self.kernel(alpha);
        let kl = Self::times_gram(&k, &gram);
        // K L K = K (K L)ᵀ since both factors are symmetric.
        let n = k.nrows();
        let mut klk = Mat::<f64>::zeros(n, n);
        matmul(klk.as_mut(), Accum::Replace, k.as_ref(), kl.as_ref().transpose(), 1.0, Par::Seq);
        drop(kl);
        drop(k);
        let sq = Self::times_gram(&klk, &gram);
        drop(klk);
        Self::trace_of_square(&sq)
    }

    /// Dense correlation matrix `D K Dᵀ`, for checking.
    pub fn correlation_matrix(&self, alpha: f64) -> Mat<f64> {
        let k = self.kernel(alpha);
        let m = self.rows.len();
        let mut out = Mat::<f64>::zeros(m, m);
        for (e, re) in self.rows.iter().enumerate() {
            for (f, rf) in self.rows.iter().enumerate() {
                let mut s = 0.0;
                for &(a, va) in re {
                    for &(b, vb) in rf {
                        s += va * k[(a, b)] * vb;
                    }
                }
                out[(e, f)] = s;
            }
        }
        out
    }
}

fn compress(indices: impl Iterator<Item = usize>, points: &[Point2]) -> (Vec<Point2>, HashMap<usize, usize>) {
    let mut ids: Vec<usize> = indices.collect();
    ids.sort_unstable();
    ids.dedup();
    let local = ids.iter().enumerate().map(|(p, &v)| (v, p)).collect();
    (ids.iter().map(|&v| points[v]).collect(), local)
}

/// `E[V2² | points] = (2/|E|) Σ_{e,f} corr(U_e, U_f)²`.
pub fn conditional_second_moment_v2(edges: &[AnchoredEdge], alpha: f64, points: &[Point2]) -> Result<f64> {
    if edges.is_empty() {
        return Err(Error::Degenerate("no edges".into()));
    }
    let design = IncrementDesign::for_edges(edges, points, alpha);
    Ok(2.0 * design.sum_sq_corr(alpha) / edges.len() as f64)
}

/// Same quantity by the explicit double sum over edge pairs, tiled over rows.
pub fn conditional_second_moment_v2_direct(edges: &[AnchoredEdge], alpha: f64, points: &[Point2]) -> Result<f64> {
    if edges.is_empty() {
        return Err(Error::Degenerate("no edges".into()));
    }
    let m = edges.len();
    let ends: Vec<(Point2, Point2)> = edges.iter().map(|e| (points[e.i], points[e.j])).collect();
    let tiles: Vec<f64> = (0..m.div_ceil(TILE_ROWS))
        .into_par_iter()
        .map(|tile| {
            let lo = tile * TILE_ROWS;
            let hi = (lo + TILE_ROWS).min(m);
            let mut s = 0.0;
            for k in lo..hi {
                let (x1, x2) = ends[k];
                s += 1.0;
                for &(x3, x4) in &ends[(k + 1)..] {
                    s += 2.0 * increment_corr_unchecked(x1, x2, x3, x4, alpha).powi(2);
                }
            }
            s
        })
        .collect();
    Ok(2.0 * tiles.iter().sum::<f64>() / m as f64)
}

/// `E[V3² | points] = (2/|DT|) Σ corr² over all pairs of the 2|DT|
/// orthogonalized increments`, with `|DT|` counting kept triples.
pub fn conditional_second_moment_v3(triples: &[AnchoredTriple], alpha: f64, points: &[Point2]) -> Result<f64> {
    let (design, dropped) = IncrementDesign::for_triples(triples, points, alpha);
    let kept = triples.len() - dropped;
    if kept == 0 {
        return Err(Error::Degenerate("no non-degenerate triples".into()));
    }
    Ok(2.0 * design.sum_sq_corr(alpha) / kept as f64)
}

/// `‖M²‖_F² / m²` for the edge correlation matrix `M`.
pub fn contraction_norm_v2(edges: &[AnchoredEdge], alpha: f64, points: &[Point2], max_edges: usize) -> Result<f64> {
    let m = check_contraction_input(edges, max_edges)?;
    let design = IncrementDesign::for_edges(edges, points, alpha);
    Ok(design.fourth_moment_trace(alpha) / (m * m) as f64)
}

/// Same quantity from the explicit `m × m` correlation matrix.
pub fn contraction_norm_v2_direct(
    edges: &[AnchoredEdge],
    alpha: f64,
    points: &[Point2],
    max_edges: usize,
) -> Result<f64> {
    let m = check_contraction_input(edges, max_edges)?;
    let corr = CorrelationMatrix::from_edges(edges, points, alpha, max_edges)?;
    Ok(corr.square_frobenius_sq() / (m * m) as f64)
}

fn check_contraction_input(edges: &[AnchoredEdge], max_edges: usize) -> Result<usize> {
    if edges.is_empty() {
        return Err(Error::Degenerate("no edges".into()));
    }
    if edges.len() > max_edges {
        return Err(Error::Resource {
            what: "contraction edges",
            requested: edges.len() as f64,
            cap: max_edges as f64,
        });
    }
    Ok(edges.len())
}
