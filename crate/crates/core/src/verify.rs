//! Numerical checks of the technical lemmas: far-field correlation
//! asymptotics and envelope, Delaunay-neighbor probability bounds, and the
//! exponential moment bound of a radius uniform on a disc.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use integrate::gauss_kronrod::gauss_kronrod_rule;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbf::{increment_corr_asymptotic, increment_corr_exact};
use crate::geom::{pow_dist, Point2};
use crate::varints::{estimate_p21, estimate_q21, neighbor_bound, neighbor_bound_proof, SharedVertex};

/// Absolute tolerance of the adaptive quadrature.
pub const QUADRATURE_ABS_TOL: f64 = 1e-10;
/// Cases whose leading angular factor is at most this are skipped.
pub const DEGENERATE_FACTOR: f64 = 0.05;
/// Relative error allowed at the largest distance.
pub const ASYMPTOTIC_TOLERANCE: f64 = 0.01;

/// One checked inequality `lhs ≤ rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCase {
    pub inputs: BTreeMap<String, f64>,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub margin: f64,
    /// True when the inequality holds for trivial reasons (e.g. a probability
    /// bound above 1).
    #[serde(default)]
    pub uninformative: bool,
}

impl LemmaCase {
    fn new(inputs: &[(&str, f64)], lhs: f64, rhs: f64) -> Self {
        Self {
            inputs: inputs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            lhs,
            rhs,
            margin: rhs - lhs,
            uninformative: false,
        }
    }

    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma_id: String,
    pub cases: Vec<LemmaCase>,
    pub pass: bool,
    /// Grid points left out, with the reason.
    #[serde(default)]
    pub skipped: usize,
    /// Derived quantities (empirical constants, thresholds).
    #[serde(default)]
    pub summary: BTreeMap<String, f64>,
}

impl LemmaReport {
    fn new(lemma_id: &str, cases: Vec<LemmaCase>, skipped: usize, summary: BTreeMap<String, f64>) -> Self {
        let pass = !cases.is_empty() && cases.iter().all(LemmaCase::holds);
        Self {
            lemma_id: lemma_id.into(),
            cases,
            pass,
            skipped,
            summary,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Configuration of two increments in the frame of the correlation
/// asymptotics: `x3` at the origin, `x1` at distance `d` on the vertical
/// axis, and increment directions `theta`, `beta` measured from the
/// horizontal axis.
pub fn asymptotic_frame(l1: f64, l2: f64, d: f64, theta: f64, beta: f64) -> [Point2; 4] {
    let x1 = Point2::new(0.0, d);
    let x2 = x1 + Point2::from_polar(l1, theta);
    let x3 = Point2::ORIGIN;
    let x4 = Point2::from_polar(l2, beta);
    [x1, x2, x3, x4]
}

/// Relative error of the leading-order correlation at each distance in
/// `d_grid` for every pair of directions from `angle_grid`. Each retained
/// pair yields one case per consecutive distance (error must not grow) and
/// one case at the largest distance (error below 1 %).
pub fn check_corr_asymptotics(
    alpha: f64,
    l1: f64,
    l2: f64,
    angle_grid: &[f64],
    d_grid: &[f64],
) -> Result<LemmaReport> {
    check_alpha(alpha)?;
    if angle_grid.is_empty() || d_grid.is_empty() {
        return Err(Error::param("angle and distance grids must be non-empty"));
    }
    if d_grid.windows(2).any(|w| !(w[0] < w[1])) || !(d_grid[0] > 0.0) {
        return Err(Error::param("distance grid must be positive and increasing"));
    }
    let mut cases = Vec::new();
    let mut skipped = 0usize;
    let mut worst_final = 0.0f64;
    for &theta in angle_grid {
        for &beta in angle_grid {
            let factor = beta.cos() * theta.cos() - (1.0 - alpha) * beta.sin() * theta.sin();
            if factor.abs() <= DEGENERATE_FACTOR {
                skipped += 1;
                continue;
            }
            let errors = d_grid
                .iter()
                .map(|&d| {
                    let [x1, x2, x3, x4] = asymptotic_frame(l1, l2, d, theta, beta);
                    let exact = increment_corr_exact(x1, x2, x3, x4, alpha)?;
                    let approx = increment_corr_asymptotic(l1, l2, d, theta, beta, alpha)?;
                    Ok((approx - exact).abs() / exact.abs())
                })
                .collect::<Result<Vec<f64>>>()?;
            for k in 1..d_grid.len() {
                cases.push(LemmaCase::new(
                    &[("theta", theta), ("beta", beta), ("d", d_grid[k]), ("d_prev", d_grid[k - 1])],
                    errors[k],
                    errors[k - 1],
                ));
            }
            let last = *errors.last().expect("non-empty grid");
            worst_final = worst_final.max(last);
            cases.push(LemmaCase::new(
                &[("theta", theta), ("beta", beta), ("d", *d_grid.last().unwrap())],
                last,
                ASYMPTOTIC_TOLERANCE,
            ));
        }
    }
    let summary = BTreeMap::from([
        ("alpha".to_string(), alpha),
        ("worst_relative_error_at_largest_d".to_string(), worst_final),
    ]);
    Ok(LemmaReport::new("lemma_5_1_i", cases, skipped, summary))
}

/// Largest ratio `|corr| / (l1^{2−α} d^{α−2})` over `sample_count` random
/// configurations with `0 < l2 ≤ l1 ≤ d^ε` and `d ∈ [d0, 10 d0]`.
pub fn envelope_constant<R: Rng + ?Sized>(
    alpha: f64,
    epsilon: f64,
    d0: f64,
    sample_count: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut c_hat = 0.0f64;
    for _ in 0..sample_count {
        let d = d0 * 10f64.powf(rng.random::<f64>());
        let l1 = d.powf(epsilon) * (1.0 - rng.random::<f64>());
        let l2 = l1 * (1.0 - rng.random::<f64>());
        let x1 = Point2::ORIGIN;
        let x2 = Point2::from_polar(l1, rng.random::<f64>() * 2.0 * PI);
        let x3 = Point2::from_polar(d, rng.random::<f64>() * 2.0 * PI);
        let x4 = x3 + Point2::from_polar(l2, rng.random::<f64>() * 2.0 * PI);
        let corr = increment_corr_exact(x1, x2, x3, x4, alpha)?;
        c_hat = c_hat.max(corr.abs() / (pow_dist(l1, 2.0 - alpha) * pow_dist(d, alpha - 2.0)));
    }
    Ok(c_hat)
}

/// Empirical envelope constant at `d0 = 20` and `d0 = 40`; one case
/// `|ĉ(40)/ĉ(20) − 1| ≤ 0.1`.
pub fn check_corr_envelope<R: Rng + ?Sized>(
    alpha: f64,
    epsilon: f64,
    sample_count: usize,
    rng: &mut R,
) -> Result<LemmaReport> {
    check_alpha(alpha)?;
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::param(format!("epsilon must lie in (0, 1/2), got {epsilon}")));
    }
    if sample_count == 0 {
        return Err(Error::param("sample_count must be >= 1"));
    }
    let c20 = envelope_constant(alpha, epsilon, 20.0, sample_count, rng)?;
    let c40 = envelope_constant(alpha, epsilon, 40.0, sample_count, rng)?;
    let ratio = c40 / c20;
    let case = LemmaCase::new(
        &[("alpha", alpha), ("epsilon", epsilon), ("samples", sample_count as f64)],
        if ratio.is_finite() { (ratio - 1.0).abs() } else { f64::INFINITY },
        0.1,
    );
    let summary = BTreeMap::from([("c_hat_d0_20".to_string(), c20), ("c_hat_d0_40".to_string(), c40)]);
    Ok(LemmaReport::new("lemma_5_1_ii", vec![case], 0, summary))
}

/// A configuration for the neighbor-probability bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NeighborCase {
    /// `(x1, x2, x3, x4)` with `‖x4 − x3‖ ≤ ‖x2 − x1‖`.
    Disjoint([Point2; 4]),
    Shared(SharedVertex, [Point2; 3]),
}

/// Monte Carlo estimate plus three standard errors against the neighbor
/// bound, at unit intensity. Cases use the bound established by the proof;
/// the summary counts violations of the displayed form.
pub fn check_p2n_bounds<R: Rng + ?Sized>(samples: &[NeighborCase], inner: usize, rng: &mut R) -> Result<LemmaReport> {
    if samples.is_empty() {
        return Err(Error::param("no configurations given"));
    }
    let mut cases = Vec::with_capacity(samples.len());
    let mut stated_violations = 0usize;
    for (k, sample) in samples.iter().enumerate() {
        let (estimate, radius, kind) = match *sample {
            NeighborCase::Disjoint([x1, x2, x3, x4]) => {
                if x4.dist(x3) > x2.dist(x1) {
                    return Err(Error::param(format!(
                        "configuration {k}: need |x4 - x3| <= |x2 - x1|"
                    )));
                }
                (estimate_p21(x1, x2, x3, x4, inner, rng)?, x2.dist(x1), 0.0)
            }
            NeighborCase::Shared(variant, pts) => (
                estimate_q21(variant, pts, inner, rng)?,
                variant.bound_radius(pts),
                1.0 + SharedVertex::ALL.iter().position(|v| *v == variant).unwrap() as f64,
            ),
        };
        let bound = neighbor_bound_proof(radius);
        let stated = neighbor_bound(radius);
        let upper = estimate.value + 3.0 * estimate.std_error;
        if upper > stated {
            stated_violations += 1;
        }
        let mut case = LemmaCase::new(
            &[
                ("config", k as f64),
                ("variant", kind),
                ("radius", radius),
                ("estimate", estimate.value),
                ("std_error", estimate.std_error),
                ("stated_bound", stated),
            ],
            upper,
            bound,
        );
        case.uninformative = bound >= 1.0;
        cases.push(case);
    }
    let informative = cases.iter().filter(|c| !c.uninformative).count() as f64;
    let summary = BTreeMap::from([
        ("inner".to_string(), inner as f64),
        ("informative_cases".to_string(), informative),
        ("stated_bound_violations".to_string(), stated_violations as f64),
    ]);
    Ok(LemmaReport::new("lemma_5_2", cases, 0, summary))
}

/// `count` configurations cycling through the disjoint case and the four
/// shared-vertex variants, with bound radius log-spaced on `[r_min, r_max]`
/// and every lexicographic constraint satisfied. Directions are random.
pub fn neighbor_sweep<R: Rng + ?Sized>(count: usize, r_min: f64, r_max: f64, rng: &mut R) -> Result<Vec<NeighborCase>> {
    if !(r_min > 0.0 && r_max >= r_min && r_max.is_finite()) {
        return Err(Error::param(format!("need 0 < r_min <= r_max, got {r_min} and {r_max}")));
    }
    // Direction with positive x-component, so that `p ≺ p + v`.
    let forward = |len: f64, rng: &mut R| Point2::from_polar(len, (rng.random::<f64>() - 0.5) * 0.9 * PI);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let t = if count > 1 { k as f64 / (count - 1) as f64 } else { 0.0 };
        let radius = r_min * (r_max / r_min).powf(t);
        let other = radius * (0.3 + 0.7 * rng.random::<f64>());
        let x1 = Point2::ORIGIN;
        let x2 = forward(radius, rng);
        let case = match k % 5 {
            0 => {
                let x3 = Point2::new(-6.0 + 12.0 * rng.random::<f64>(), 12.0 + 6.0 * rng.random::<f64>());
                NeighborCase::Disjoint([x1, x2, x3, x3 + forward(other, rng)])
            }
            1 => NeighborCase::Shared(SharedVertex::ThreeOne, [x1, x2, x1 + forward(other, rng)]),
            2 => NeighborCase::Shared(SharedVertex::ThreeTwo, [x1, x2, x2 + forward(other, rng)]),
            3 => NeighborCase::Shared(SharedVertex::FourOne, [x1, x2, x1 - forward(other, rng)]),
            _ => NeighborCase::Shared(SharedVertex::FourTwo, [x1, x2, x2 - forward(other, rng)]),
        };
        out.push(case);
    }
    Ok(out)
}

/// Adaptive Gauss–Kronrod (7/15) quadrature on `[a, b]` with the given
/// breakpoints, refining the panel of largest error estimate until the total
/// estimate is below `abs_tol`.
pub fn adaptive_quadrature<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    abs_tol: f64,
) -> Result<(f64, f64)> {
    const MAX_PANELS: usize = 4000;
    let rule = |lo: f64, hi: f64| {
        gauss_kronrod_rule(&f, lo, hi, 7).map_err(|e| Error::Numerical {
            message: format!("Gauss–Kronrod nodes: {e:?}"),
            condition_estimate: f64::NAN,
        })
    };
    let mut cuts: Vec<f64> = std::iter::once(a)
        .chain(breakpoints.iter().copied().filter(|&p| p > a && p < b))
        .chain(std::iter::once(b))
        .collect();
    cuts.sort_by(f64::total_cmp);
    let mut panels = Vec::new();
    for w in cuts.windows(2) {
        if w[1] > w[0] {
            let (v, e) = rule(w[0], w[1])?;
            panels.push((w[0], w[1], v, e));
        }
    }
    loop {
        let total_err: f64 = panels.iter().map(|p| p.3).sum();
        if total_err <= abs_tol {
            break;
        }
        if panels.len() >= MAX_PANELS {
            return Err(Error::Numerical {
                message: format!("adaptive quadrature did not reach {abs_tol:e} (error {total_err:e})"),
                condition_estimate: f64::NAN,
            });
        }
        let worst = (0..panels.len())
            .max_by(|&i, &j| panels[i].3.total_cmp(&panels[j].3))
            .expect("at least one panel");
        let (lo, hi, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if !(mid > lo && mid < hi) {
            return Err(Error::Numerical {
                message: "adaptive quadrature panel underflow".into(),
                condition_estimate: f64::NAN,
            });
        }
        let (v1, e1) = rule(lo, mid)?;
        let (v2, e2) = rule(mid, hi)?;
        panels.push((lo, mid, v1, e1));
        panels.push((mid, hi, v2, e2));
    }
    // Sum in position order for reproducibility.
    panels.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok((panels.iter().map(|p| p.2).sum(), panels.iter().map(|p| p.3).sum()))
}

/// `E[exp(R^{α−2} 1[R ≥ d0])]` for `R` with `P[R ≤ r] = r²/N` on `[0, √N]`.
pub fn exp_moment(alpha: f64, d0: f64, n: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(d0 > 0.0 && n > 0.0) {
        return Err(Error::param("d0 and N must be positive"));
    }
    let top = n.sqrt();
    if d0 >= top {
        // The indicator never fires.
        return Ok(1.0);
    }
    let integrand = |r: f64| {
        let bump = if r >= d0 { pow_dist(r, alpha - 2.0).exp() } else { 1.0 };
        bump * 2.0 * r / n
    };
    let (value, _) = adaptive_quadrature(integrand, 0.0, top, &[d0], QUADRATURE_ABS_TOL)?;
    Ok(value)
}

/// Monte Carlo estimate (mean, standard error) of the same expectation.
pub fn exp_moment_monte_carlo<R: Rng + ?Sized>(
    alpha: f64,
    d0: f64,
    n: f64,
    samples: usize,
    rng: &mut R,
) -> (f64, f64) {
    let top = n.sqrt();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        // Inverse CDF: R = √(N U).
        let r = top * rng.random::<f64>().sqrt();
        let v = if r >= d0 { pow_dist(r, alpha - 2.0).exp() } else { 1.0 };
        sum += v;
        sum_sq += v * v;
    }
    let m = samples as f64;
    let mean = sum / m;
    (mean, ((sum_sq / m - mean * mean).max(0.0) / m).sqrt())
}

/// `1 + c1 (√N)^{α−2} + c2 / N` with `c1 = 2/α` and
/// `c2 = e^{d0^{α−2}} d0^{2(α−1)} / (1 − α)`.
pub fn exp_moment_bound(alpha: f64, d0: f64, n: f64) -> f64 {
    let c1 = 2.0 / alpha;
    let c2 = pow_dist(d0, alpha - 2.0).exp() * pow_dist(d0, 2.0 * (alpha - 1.0)) / (1.0 - alpha);
    1.0 + c1 * n.sqrt().powf(alpha - 2.0) + c2 / n
}

/// Quadrature value against the bound for each `N`; records the smallest
/// grid `N` from which every larger grid value passes.
pub fn check_exp_moment_bound(alpha: f64, d0: f64, n_grid: &[f64]) -> Result<LemmaReport> {
    check_alpha(alpha)?;
    if n_grid.is_empty() {
        return Err(Error::param("N grid must be non-empty"));
    }
    let mut grid = n_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut cases = Vec::with_capacity(grid.len());
    for &n in &grid {
        let e = exp_moment(alpha, d0, n)?;
        cases.push(LemmaCase::new(
            &[("alpha", alpha), ("d0", d0), ("N", n)],
            e,
            exp_moment_bound(alpha, d0, n),
        ));
    }
    let mut summary = BTreeMap::new();
    if let Some(k) = (0..cases.len()).find(|&k| cases[k..].iter().all(LemmaCase::holds)) {
        summary.insert("smallest_passing_n".to_string(), grid[k]);
    }
    Ok(LemmaReport::new("lemma_5_3", cases, 0, summary))
}
