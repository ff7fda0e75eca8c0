//! Nested Monte Carlo for the integral form of the asymptotic variance of V2.
//!
//! The neighbor probabilities `p_{2,1}` and `q_{2,1}` are estimated by
//! inserting the fixed points into unit-intensity Poisson samples on local
//! boxes and testing each required adjacency directly (empty circle through
//! the two endpoints). Outer draws propose the free points and weight
//! `corr² · p̂ / proposal density`.
//!
//! Each edge gets the box spanned by its endpoints dilated by
//! [`LOCAL_MARGIN`]. Overlapping boxes are merged into their bounding box and
//! share one Poisson sample; disjoint boxes get independent samples, which is
//! exact for a Poisson process.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delaunay::is_delaunay_edge;
use crate::error::{Error, Result};
use crate::fbf::increment_corr_exact;
use crate::geom::Point2;
use crate::pointprocess::{lex_less, poisson_count};
use crate::rng::StreamKey;

/// Dilation of the local boxes around each tested edge.
pub const LOCAL_MARGIN: f64 = 8.0;

/// Axis-aligned box carrying one Poisson sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalBox {
    pub lo: Point2,
    pub hi: Point2,
}

impl LocalBox {
    fn around(points: &[Point2], margin: f64) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points[1..] {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        Self {
            lo: Point2::new(lo.x - margin, lo.y - margin),
            hi: Point2::new(hi.x + margin, hi.y + margin),
        }
    }

    fn intersects(&self, other: &LocalBox) -> bool {
        self.lo.x <= other.hi.x && other.lo.x <= self.hi.x && self.lo.y <= other.hi.y && other.lo.y <= self.hi.y
    }

    fn union(&self, other: &LocalBox) -> Self {
        Self {
            lo: Point2::new(self.lo.x.min(other.lo.x), self.lo.y.min(other.lo.y)),
            hi: Point2::new(self.hi.x.max(other.hi.x), self.hi.y.max(other.hi.y)),
        }
    }

    pub fn area(&self) -> f64 {
        (self.hi.x - self.lo.x) * (self.hi.y - self.lo.y)
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<Point2>) -> Result<()> {
        let count = poisson_count(self.area(), rng)?;
        let w = self.hi.x - self.lo.x;
        let h = self.hi.y - self.lo.y;
        out.extend((0..count).map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            Point2::new(self.lo.x + w * u, self.lo.y + h * v)
        }));
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborProbEstimate {
    pub value: f64,
    pub std_error: f64,
    pub inner_replicates: usize,
    /// Boxes carrying the Poisson samples (empty when the value is 0 by
    /// definition).
    pub local_boxes: Vec<LocalBox>,
}

impl NeighborProbEstimate {
    fn zero() -> Self {
        Self {
            value: 0.0,
            std_error: 0.0,
            inner_replicates: 0,
            local_boxes: Vec::new(),
        }
    }
}

/// The four ways two edges share exactly one endpoint: `x_j = x_i` for
/// `(j, i)` in `{(3,1), (3,2), (4,1), (4,2)}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SharedVertex {
    #[serde(rename = "3<->1")]
    ThreeOne,
    #[serde(rename = "3<->2")]
    ThreeTwo,
    #[serde(rename = "4<->1")]
    FourOne,
    #[serde(rename = "4<->2")]
    FourTwo,
}

impl SharedVertex {
    pub const ALL: [SharedVertex; 4] = [
        SharedVertex::ThreeOne,
        SharedVertex::ThreeTwo,
        SharedVertex::FourOne,
        SharedVertex::FourTwo,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SharedVertex::ThreeOne => "3<->1",
            SharedVertex::ThreeTwo => "3<->2",
            SharedVertex::FourOne => "4<->1",
            SharedVertex::FourTwo => "4<->2",
        }
    }

    /// With the three points named `(x1, x2, y)` (`y` is `x4` for the 3↔·
    /// variants and `x3` for the 4↔·), the second adjacency as indices into
    /// that triple. The first is always `x1 ∼ x2`.
    fn second_edge(&self) -> (usize, usize) {
        match self {
            SharedVertex::ThreeOne | SharedVertex::FourOne => (0, 2),
            SharedVertex::ThreeTwo | SharedVertex::FourTwo => (1, 2),
        }
    }

    /// Lexicographic constraints of the variant on `(x1, x2, y)`.
    fn order_holds(&self, [x1, x2, y]: [Point2; 3]) -> bool {
        lex_less(x1, x2)
            && match self {
                SharedVertex::ThreeOne => lex_less(x1, y),
                SharedVertex::ThreeTwo => lex_less(x2, y),
                SharedVertex::FourOne => lex_less(y, x1),
                SharedVertex::FourTwo => lex_less(y, x2),
            }
    }

    /// The second increment, oriented as in the variance integrand.
    fn second_increment(&self, [x1, x2, y]: [Point2; 3]) -> (Point2, Point2) {
        match self {
            SharedVertex::ThreeOne => (x1, y),
            SharedVertex::ThreeTwo => (x2, y),
            SharedVertex::FourOne => (y, x1),
            SharedVertex::FourTwo => (y, x2),
        }
    }

    /// `R` of the matching neighbor-probability bound.
    pub fn bound_radius(&self, pts: [Point2; 3]) -> f64 {
        let (a, b) = self.second_edge();
        pts[0].dist(pts[1]).max(pts[a].dist(pts[b]))
    }
}

fn all_distinct(points: &[Point2]) -> bool {
    points
        .iter()
        .enumerate()
        .all(|(k, p)| p.is_finite() && points[..k].iter().all(|q| q != p))
}

fn binomial(hits: usize, trials: usize, boxes: Vec<LocalBox>) -> NeighborProbEstimate {
    let p = hits as f64 / trials as f64;
    NeighborProbEstimate {
        value: p,
        std_error: (p * (1.0 - p) / trials as f64).sqrt(),
        inner_replicates: trials,
        local_boxes: boxes,
    }
}

/// Frequency of `x1 ∼ x2` and `x3 ∼ x4` in Del(P₁ ∪ {x1, x2, x3, x4}).
pub fn estimate_p21<R: Rng + ?Sized>(
    x1: Point2,
    x2: Point2,
    x3: Point2,
    x4: Point2,
    inner: usize,
    rng: &mut R,
) -> Result<NeighborProbEstimate> {
    let fixed = [x1, x2, x3, x4];
    if !all_distinct(&fixed) {
        return Err(Error::param("p21 needs four distinct finite points"));
    }
    if inner == 0 {
        return Err(Error::param("inner replicate count must be >= 1"));
    }
    if !(lex_less(x1, x2) && lex_less(x3, x4)) {
        return Ok(NeighborProbEstimate::zero());
    }
    let first = LocalBox::around(&[x1, x2], LOCAL_MARGIN);
    let second = LocalBox::around(&[x3, x4], LOCAL_MARGIN);
    let mut hits = 0usize;
    let mut pool = Vec::new();
    if first.intersects(&second) {
        let merged = first.union(&second);
        for _ in 0..inner {
            pool.clear();
            merged.sample_into(rng, &mut pool)?;
            pool.extend_from_slice(&fixed);
            if is_delaunay_edge(x1, x2, &pool) && is_delaunay_edge(x3, x4, &pool) {
                hits += 1;
            }
        }
        Ok(binomial(hits, inner, vec![merged]))
    } else {
        let mut other = Vec::new();
        for _ in 0..inner {
            pool.clear();
            other.clear();
            // Draw both samples every time so the stream layout does not
            // depend on the outcome of the first test.
            first.sample_into(rng, &mut pool)?;
            second.sample_into(rng, &mut other)?;
            pool.extend_from_slice(&fixed);
            other.extend_from_slice(&fixed);
            if is_delaunay_edge(x1, x2, &pool) && is_delaunay_edge(x3, x4, &other) {
                hits += 1;
            }
        }
        Ok(binomial(hits, inner, vec![first, second]))
    }
}

/// Frequency of the variant's two adjacencies in Del(P₁ ∪ pts), with `pts`
/// read as `(x1, x2, x4)` for the 3↔· variants and `(x1, x2, x3)` for 4↔·.
pub fn estimate_q21<R: Rng + ?Sized>(
    variant: SharedVertex,
    pts: [Point2; 3],
    inner: usize,
    rng: &mut R,
) -> Result<NeighborProbEstimate> {
    if !all_distinct(&pts) {
        return Err(Error::param("q21 needs three distinct finite points"));
    }
    if inner == 0 {
        return Err(Error::param("inner replicate count must be >= 1"));
    }
    if !variant.order_holds(pts) {
        return Ok(NeighborProbEstimate::zero());
    }
    let (a, b) = variant.second_edge();
    let local = LocalBox::around(&pts, LOCAL_MARGIN);
    let mut hits = 0usize;
    let mut pool = Vec::new();
    for _ in 0..inner {
        pool.clear();
        local.sample_into(rng, &mut pool)?;
        pool.extend_from_slice(&pts);
        if is_delaunay_edge(pts[0], pts[1], &pool) && is_delaunay_edge(pts[a], pts[b], &pool) {
            hits += 1;
        }
    }
    Ok(binomial(hits, inner, vec![local]))
}

/// Neighbor-probability bound as displayed in the lemma,
/// `π N (1 + 4/(πN)) R² e^{−πNR²/4}`, at `N = 1`. It drops below the true
/// probability for short edges (see [`neighbor_bound_proof`]).
pub fn neighbor_bound(radius: f64) -> f64 {
    PI * (1.0 + 4.0 / PI) * radius * radius * (-PI * radius * radius / 4.0).exp()
}

/// The bound the lemma's proof establishes at `N = 1`:
/// `πR² e^{−πR²/4} + ∫_{|y|>R} e^{−π|y|²/4} dy = (πR² + 4) e^{−πR²/4}`.
/// It is tighter than [`neighbor_bound`] for `R > 1` and exceeds 1 for short
/// edges.
pub fn neighbor_bound_proof(radius: f64) -> f64 {
    let s = PI * radius * radius;
    (s + 4.0) * (-s / 4.0).exp()
}

/// Proposal densities of the outer importance sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalParams {
    /// Per-coordinate variance of the Gaussian used for `x2` and for edge
    /// offsets. `4/π` gives the radial density `∝ r e^{−πr²/8}`.
    pub offset_variance: f64,
    /// Mixture weight of the power-law part of the far-anchor proposal.
    pub far_weight: f64,
    /// Support of the radial density `∝ r^{α−2}` of the far-anchor part.
    pub far_min: f64,
    pub far_max: f64,
    /// Replace every squared correlation by 1.
    pub unit_correlation: bool,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            offset_variance: 4.0 / PI,
            far_weight: 0.5,
            far_min: 0.05,
            far_max: 1e3,
            unit_correlation: false,
        }
    }
}

impl ProposalParams {
    fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.offset_variance > 0.0 && self.offset_variance.is_finite()) {
            bad.push(format!("offset_variance must be > 0, got {}", self.offset_variance));
        }
        if !(0.0..=1.0).contains(&self.far_weight) {
            bad.push(format!("far_weight must lie in [0, 1], got {}", self.far_weight));
        }
        if !(self.far_min > 0.0 && self.far_max > self.far_min && self.far_max.is_finite()) {
            bad.push(format!("need 0 < far_min < far_max, got {} and {}", self.far_min, self.far_max));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

struct Proposal {
    params: ProposalParams,
    alpha: f64,
}

impl Proposal {
    fn gaussian<R: Rng + ?Sized>(&self, rng: &mut R) -> Point2 {
        let s = self.params.offset_variance.sqrt();
        let z1: f64 = rng.sample(rand_distr::StandardNormal);
        let z2: f64 = rng.sample(rand_distr::StandardNormal);
        Point2::new(s * z1, s * z2)
    }

    fn gaussian_density(&self, v: Point2) -> f64 {
        let var = self.params.offset_variance;
        (-v.norm_sq() / (2.0 * var)).exp() / (2.0 * PI * var)
    }

    /// Exponent `α − 1` of the radial CDF of the far part.
    fn far_exponent(&self) -> f64 {
        self.alpha - 1.0
    }

    fn far_norm(&self) -> f64 {
        let e = self.far_exponent();
        (self.params.far_min.powf(e) - self.params.far_max.powf(e)) / -e
    }

    fn far<R: Rng + ?Sized>(&self, rng: &mut R) -> Point2 {
        // Inverse CDF of the radial density ∝ r^{α−2} on [far_min, far_max].
        let e = self.far_exponent();
        let (lo, hi) = (self.params.far_min.powf(e), self.params.far_max.powf(e));
        let u: f64 = rng.random();
        let r = (lo + u * (hi - lo)).powf(1.0 / e);
        Point2::from_polar(r, rng.random::<f64>() * 2.0 * PI)
    }

    fn far_density(&self, v: Point2) -> f64 {
        let r = v.norm();
        if r < self.params.far_min || r > self.params.far_max {
            return 0.0;
        }
        r.powf(self.alpha - 2.0) / self.far_norm() / (2.0 * PI * r)
    }

    fn anchor<R: Rng + ?Sized>(&self, rng: &mut R) -> Point2 {
        if rng.random::<f64>() < self.params.far_weight {
            self.far(rng)
        } else {
            self.gaussian(rng)
        }
    }

    fn anchor_density(&self, v: Point2) -> f64 {
        let w = self.params.far_weight;
        w * self.far_density(v) + (1.0 - w) * self.gaussian_density(v)
    }
}

/// Mean ± standard error of one integral.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentEstimate {
    pub value: f64,
    pub std_error: f64,
}

impl ComponentEstimate {
    fn from_weights(weights: &[f64]) -> Self {
        let n = weights.len() as f64;
        let mean = weights.iter().sum::<f64>() / n;
        let var = if weights.len() > 1 {
            weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            value: mean,
            std_error: (var / n).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedVertexEstimate {
    pub variant: SharedVertex,
    pub estimate: ComponentEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceBreakdown {
    pub alpha: f64,
    pub outer: usize,
    pub inner: usize,
    pub sigma0: ComponentEstimate,
    pub sigma1: Vec<SharedVertexEstimate>,
    /// `(2/3)(σ₀ + Σ σ₁) + 2`.
    pub total: f64,
    pub total_std_error: f64,
    /// `∫_{|x|>far_max} |x|^{2α−4} dx = 2π far_max^{2α−2} / (2 − 2α)`: the
    /// envelope mass of the far-anchor region the proposal never reaches.
    pub truncation_tail: f64,
}

impl VarianceBreakdown {
    pub fn assemble(sigma0: f64, sigma1: &[f64]) -> f64 {
        2.0 / 3.0 * (sigma0 + sigma1.iter().sum::<f64>()) + 2.0
    }
}

/// One outer draw, as written to the per-draw CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterDraw {
    pub component: String,
    pub draw: usize,
    pub weight: f64,
    pub corr_sq: f64,
    pub p_hat: f64,
    pub p_se: f64,
}

pub fn write_outer_draws_csv<W: Write>(draws: &[OuterDraw], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component", "draw", "weight", "corr_sq", "p_hat", "p_se"])?;
    for d in draws {
        w.write_record([
            d.component.clone(),
            d.draw.to_string(),
            d.weight.to_string(),
            d.corr_sq.to_string(),
            d.p_hat.to_string(),
            d.p_se.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn checked_density(density: f64, what: &str, at: &[Point2]) -> Result<f64> {
    if density > 0.0 && density.is_finite() {
        Ok(density)
    } else {
        Err(Error::Invariant(format!(
            "proposal density of {what} is {density} at {at:?}"
        )))
    }
}

fn corr_sq(x1: Point2, x2: Point2, x3: Point2, x4: Point2, alpha: f64, unit: bool) -> Result<f64> {
    if unit {
        return Ok(1.0);
    }
    Ok(increment_corr_exact(x1, x2, x3, x4, alpha)?.powi(2))
}

fn sigma0_draw(proposal: &Proposal, inner: usize, key: StreamKey, draw: usize) -> Result<OuterDraw> {
    let mut rng = key.child(draw as u64).rng();
    let x1 = Point2::ORIGIN;
    let x2 = proposal.gaussian(&mut rng);
    let x3 = proposal.anchor(&mut rng);
    let x4 = x3 + proposal.gaussian(&mut rng);
    let density = checked_density(
        proposal.gaussian_density(x2) * proposal.anchor_density(x3) * proposal.gaussian_density(x4 - x3),
        "sigma0",
        &[x2, x3, x4],
    )?;
    let record = |weight, corr_sq, p_hat, p_se| OuterDraw {
        component: "sigma0".into(),
        draw,
        weight,
        corr_sq,
        p_hat,
        p_se,
    };
    if !all_distinct(&[x1, x2, x3, x4]) || !(lex_less(x1, x2) && lex_less(x3, x4)) {
        return Ok(record(0.0, 0.0, 0.0, 0.0));
    }
    let c = corr_sq(x1, x2, x3, x4, proposal.alpha, proposal.params.unit_correlation)?;
    let p = estimate_p21(x1, x2, x3, x4, inner, &mut rng)?;
    Ok(record(c * p.value / density, c, p.value, p.std_error))
}

fn sigma1_draw(
    variant: SharedVertex,
    proposal: &Proposal,
    inner: usize,
    key: StreamKey,
    draw: usize,
) -> Result<OuterDraw> {
    let mut rng = key.child(draw as u64).rng();
    let x1 = Point2::ORIGIN;
    let x2 = proposal.gaussian(&mut rng);
    let offset = proposal.gaussian(&mut rng);
    let y = match variant {
        SharedVertex::ThreeOne | SharedVertex::FourOne => x1 + offset,
        SharedVertex::ThreeTwo | SharedVertex::FourTwo => x2 + offset,
    };
    let density = checked_density(
        proposal.gaussian_density(x2) * proposal.gaussian_density(offset),
        variant.as_str(),
        &[x2, y],
    )?;
    let pts = [x1, x2, y];
    let record = |weight, corr_sq, p_hat, p_se| OuterDraw {
        component: format!("sigma1 {}", variant.as_str()),
        draw,
        weight,
        corr_sq,
        p_hat,
        p_se,
    };
    if !all_distinct(&pts) || !variant.order_holds(pts) {
        return Ok(record(0.0, 0.0, 0.0, 0.0));
    }
    let (a, b) = variant.second_increment(pts);
    let c = corr_sq(x1, x2, a, b, proposal.alpha, proposal.params.unit_correlation)?;
    let p = estimate_q21(variant, pts, inner, &mut rng)?;
    Ok(record(c * p.value / density, c, p.value, p.std_error))
}

/// Importance-sampling estimate of σ²_V2 and its five components, together
/// with the per-draw records. Outer draw `k` of each component uses the
/// stream `key.purpose(component).child(k)`.
pub fn estimate_sigma_v2(
    alpha: f64,
    outer: usize,
    inner: usize,
    params: ProposalParams,
    key: StreamKey,
) -> Result<(VarianceBreakdown, Vec<OuterDraw>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if outer == 0 || inner == 0 {
        return Err(Error::param("outer and inner counts must be >= 1"));
    }
    params.validate()?;
    let proposal = Proposal { params, alpha };

    let zero_key = key.purpose("sigma0");
    let zero_draws = (0..outer)
        .into_par_iter()
        .map(|k| sigma0_draw(&proposal, inner, zero_key, k))
        .collect::<Result<Vec<_>>>()?;
    let mut records = zero_draws.clone();
    let sigma0 = ComponentEstimate::from_weights(&zero_draws.iter().map(|d| d.weight).collect::<Vec<_>>());

    let mut sigma1 = Vec::with_capacity(4);
    for variant in SharedVertex::ALL {
        let vkey = key.purpose(variant.as_str());
        let draws = (0..outer)
            .into_par_iter()
            .map(|k| sigma1_draw(variant, &proposal, inner, vkey, k))
            .collect::<Result<Vec<_>>>()?;
        let estimate = ComponentEstimate::from_weights(&draws.iter().map(|d| d.weight).collect::<Vec<_>>());
        sigma1.push(SharedVertexEstimate { variant, estimate });
        records.extend(draws);
    }

    let ones: Vec<f64> = sigma1.iter().map(|s| s.estimate.value).collect();
    let total = VarianceBreakdown::assemble(sigma0.value, &ones);
    let var_sum = sigma0.std_error.powi(2) + sigma1.iter().map(|s| s.estimate.std_error.powi(2)).sum::<f64>();
    let truncation_tail = 2.0 * PI * params.far_max.powf(2.0 * alpha - 2.0) / (2.0 - 2.0 * alpha);
    Ok((
        VarianceBreakdown {
            alpha,
            outer,
            inner,
            sigma0,
            sigma1,
            total,
            total_std_error: 2.0 / 3.0 * var_sum.sqrt(),
            truncation_tail,
        },
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    #[test]
    fn lexicographic_precondition_gives_exact_zero() {
        let mut rng = StreamKey::new(1).rng();
        let e = estimate_p21(p(1.0, 0.0), p(0.0, 0.0), p(5.0, 0.0), p(6.0, 0.0), 10, &mut rng).unwrap();
        assert_eq!((e.value, e.std_error), (0.0, 0.0));
        assert!(estimate_p21(p(0.0, 0.0), p(1.0, 0.0), p(0.0, 0.0), p(6.0, 0.0), 10, &mut rng).is_err());
        let e = estimate_q21(SharedVertex::ThreeTwo, [p(0.0, 0.0), p(0.3, 0.0), p(0.1, 0.0)], 10, &mut rng).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn q21_requires_distinct_points() {
        let mut rng = StreamKey::new(2).rng();
        let x = p(0.0, 0.0);
        let y = p(1.0, 0.0);
        assert!(matches!(
            estimate_q21(SharedVertex::ThreeOne, [x, y, y], 10, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn far_pair_has_no_edge() {
        let mut rng = StreamKey::new(3).rng();
        let e = estimate_p21(p(0.0, 0.0), p(50.0, 0.0), p(0.0, 10.0), p(1.0, 10.0), 20, &mut rng).unwrap();
        assert!(neighbor_bound(50.0) < 1e-300);
        assert_eq!(e.value, 0.0);
        let e = estimate_q21(SharedVertex::ThreeOne, [p(0.0, 0.0), p(31.0, 0.0), p(0.5, 1.0)], 20, &mut rng).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn separated_short_edges() {
        let mut rng = StreamKey::new(4).rng();
        let e = estimate_p21(p(0.0, 0.0), p(0.5, 0.0), p(10.0, 0.0), p(10.5, 0.0), 2000, &mut rng).unwrap();
        assert!(e.value > 0.0 && e.value < 1.0, "{e:?}");
        assert_eq!(e.local_boxes.len(), 1);
        // Translation invariance.
        let mut rng2 = StreamKey::new(5).rng();
        let t = p(123.4, -56.7);
        let f = estimate_p21(p(0.0, 0.0) + t, p(0.5, 0.0) + t, p(10.0, 0.0) + t, p(10.5, 0.0) + t, 2000, &mut rng2)
            .unwrap();
        let joint = (e.std_error.powi(2) + f.std_error.powi(2)).sqrt();
        assert!((e.value - f.value).abs() < 3.0 * joint);
    }

    #[test]
    fn disjoint_boxes_factorize() {
        // Far apart edges: p21 = P[edge]², with P[edge] estimated separately.
        let mut rng = StreamKey::new(6).rng();
        let inner = 4000;
        let a = estimate_p21(p(0.0, 0.0), p(1.0, 0.0), p(40.0, 0.0), p(41.0, 0.0), inner, &mut rng).unwrap();
        assert_eq!(a.local_boxes.len(), 2);
        let (x1, x2) = (p(0.0, 0.0), p(1.0, 0.0));
        let local = LocalBox::around(&[x1, x2], LOCAL_MARGIN);
        let mut pool = Vec::new();
        let mut hits = 0;
        for _ in 0..inner {
            pool.clear();
            local.sample_into(&mut rng, &mut pool).unwrap();
            if is_delaunay_edge(x1, x2, &pool) {
                hits += 1;
            }
        }
        let m = hits as f64 / inner as f64;
        let se = (a.std_error.powi(2) + (2.0 * m).powi(2) * m * (1.0 - m) / inner as f64).sqrt();
        assert!((a.value - m * m).abs() < 4.0 * se, "{} vs {}", a.value, m * m);
    }

    #[test]
    fn shared_vertex_reproducible_across_seeds() {
        let pts = [p(0.0, 0.0), p(0.3, 0.0), p(0.6, 0.0)];
        let a = estimate_q21(SharedVertex::ThreeTwo, pts, 3000, &mut StreamKey::new(8).rng()).unwrap();
        let b = estimate_q21(SharedVertex::ThreeTwo, pts, 3000, &mut StreamKey::new(9).rng()).unwrap();
        assert!(a.value > 0.0);
        let joint = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 3.0 * joint);
    }

    #[test]
    fn estimates_stay_below_their_bounds() {
        let mut rng = StreamKey::new(10).rng();
        let pts = [p(0.0, 0.0), p(2.6, 0.3), p(-0.4, 2.7)];
        for v in SharedVertex::ALL {
            let e = estimate_q21(v, pts, 4000, &mut rng).unwrap();
            let r = v.bound_radius(pts);
            assert!(e.value + 3.0 * e.std_error <= neighbor_bound_proof(r).min(neighbor_bound(r)));
        }
    }

    #[test]
    fn assemble_identity() {
        assert_eq!(VarianceBreakdown::assemble(0.3, &[0.1, 0.2, 0.3, 0.4]), 2.0 / 3.0 * 1.3 + 2.0);
        assert_eq!(VarianceBreakdown::assemble(0.0, &[0.0; 4]), 2.0);
    }

    #[test]
    fn proposal_densities_normalize() {
        let prop = Proposal {
            params: ProposalParams::default(),
            alpha: 0.5,
        };
        // Radial integral of the far part on a log grid.
        let n = 20_000;
        let (lo, hi) = (prop.params.far_min.ln(), prop.params.far_max.ln());
        let h = (hi - lo) / n as f64;
        let mass: f64 = (0..n)
            .map(|k| {
                let r = (lo + (k as f64 + 0.5) * h).exp();
                prop.far_density(Point2::new(r, 0.0)) * 2.0 * PI * r * r * h
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
        let mut rng = StreamKey::new(11).rng();
        let radii: Vec<f64> = (0..20_000).map(|_| prop.far(&mut rng).norm()).collect();
        assert!(radii.iter().all(|r| (0.05..=1e3).contains(r)));
        // Median of the radial law: solve F(r) = 1/2.
        let e = -0.5f64;
        let median = ((0.05f64.powf(e) + 1e3f64.powf(e)) / 2.0).powf(1.0 / e);
        let below = radii.iter().filter(|&&r| r < median).count() as f64 / radii.len() as f64;
        assert!((below - 0.5).abs() < 0.02);
    }

    #[test]
    fn sigma_breakdown_is_consistent_and_reproducible() {
        let run = |seed| estimate_sigma_v2(0.5, 200, 10, ProposalParams::default(), StreamKey::new(seed)).unwrap();
        let (a, rows) = run(12);
        let (b, _) = run(12);
        assert_eq!(a, b);
        assert_eq!(rows.len(), 5 * 200);
        let ones: Vec<f64> = a.sigma1.iter().map(|s| s.estimate.value).collect();
        assert_eq!(a.total, VarianceBreakdown::assemble(a.sigma0.value, &ones));
        assert!(a.sigma0.value >= 0.0 && ones.iter().all(|v| *v >= 0.0));
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.p_hat) && r.weight >= 0.0));
        let mut buf = Vec::new();
        write_outer_draws_csv(&rows[..2], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("component,draw,weight,corr_sq,p_hat,p_se\nsigma0,0,"));
    }

    #[test]
    fn unit_correlation_mode_agrees_across_seeds() {
        let params = ProposalParams {
            unit_correlation: true,
            ..ProposalParams::default()
        };
        let (a, _) = estimate_sigma_v2(0.5, 300, 8, params, StreamKey::new(13)).unwrap();
        let (b, _) = estimate_sigma_v2(0.5, 300, 8, params, StreamKey::new(14)).unwrap();
        let joint = (a.sigma0.std_error.powi(2) + b.sigma0.std_error.powi(2)).sqrt();
        assert!((a.sigma0.value - b.sigma0.value).abs() < 3.0 * joint);
        assert!(a.sigma1.iter().all(|s| s.estimate.value > 0.0));
    }

    #[test]
    fn larger_alpha_gives_larger_disjoint_component() {
        let (small, _) = estimate_sigma_v2(0.1, 400, 10, ProposalParams::default(), StreamKey::new(15)).unwrap();
        let (large, _) = estimate_sigma_v2(0.9, 400, 10, ProposalParams::default(), StreamKey::new(15)).unwrap();
        assert!(small.sigma0.value < large.sigma0.value, "{} vs {}", small.sigma0.value, large.sigma0.value);
    }

    #[test]
    fn more_inner_replicates_shrink_probability_errors() {
        let mut rng = StreamKey::new(16).rng();
        let configs: Vec<[Point2; 4]> = (0..20)
            .map(|k| {
                let s = 0.3 + 0.05 * k as f64;
                [p(0.0, 0.0), p(s, 0.1), p(1.0, 0.8), p(1.2 + s, 1.0)]
            })
            .collect();
        let median_se = |inner: usize, rng: &mut crate::rng::StreamRng| {
            let mut se: Vec<f64> = configs
                .iter()
                .map(|c| estimate_p21(c[0], c[1], c[2], c[3], inner, rng).unwrap().std_error)
                .collect();
            se.sort_by(f64::total_cmp);
            se[10]
        };
        let a = median_se(200, &mut rng);
        let b = median_se(400, &mut rng);
        assert!(b < a, "{b} vs {a}");
    }
}
