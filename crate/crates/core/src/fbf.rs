//! Isotropic fractional Brownian field: covariance, exact joint sampling at
//! arbitrary sites and closed-form increment correlations.

use std::io::Write;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::{llt, llt_pivoting};
use faer::{Mat, Par};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{pow_dist, Point2};
use crate::pointprocess::PointConfiguration;

/// Default cap on the number of sites of a single joint draw.
pub const DEFAULT_MAX_FIELD_POINTS: usize = 4000;

/// Relative diagonal jitter levels tried, in order, when factorization fails.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFieldParams")]
pub struct FieldParams {
    hurst: f64,
    scale_sq: f64,
    alpha: f64,
}

#[derive(Deserialize)]
struct RawFieldParams {
    hurst: f64,
    scale_sq: f64,
}

impl TryFrom<RawFieldParams> for FieldParams {
    type Error = Error;
    fn try_from(raw: RawFieldParams) -> Result<Self> {
        FieldParams::new(raw.hurst, raw.scale_sq)
    }
}

impl FieldParams {
    pub fn new(hurst: f64, scale_sq: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(Error::param(format!("hurst must lie in (0, 1), got {hurst}")));
        }
        if !(scale_sq > 0.0 && scale_sq.is_finite()) {
            return Err(Error::param(format!("scale_sq must be > 0, got {scale_sq}")));
        }
        Ok(Self {
            hurst,
            scale_sq,
            alpha: 2.0 * hurst,
        })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn scale_sq(&self) -> f64 {
        self.scale_sq
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// `(σ²/2)(|x|^α + |y|^α − |y − x|^α)`.
pub fn cov(x: Point2, y: Point2, params: &FieldParams) -> f64 {
    let a = params.alpha;
    0.5 * params.scale_sq * (pow_dist(x.norm(), a) + pow_dist(y.norm(), a) - pow_dist(x.dist(y), a))
}

/// Full symmetric covariance matrix of the field at `points`.
pub fn covariance_matrix(points: &[Point2], params: &FieldParams) -> Mat<f64> {
    let mut k = lower_covariance(points, params);
    let n = points.len();
    for j in 0..n {
        for i in 0..j {
            k[(i, j)] = k[(j, i)];
        }
    }
    k
}

/// Covariance with only the lower triangle (and diagonal) filled in.
fn lower_covariance(points: &[Point2], params: &FieldParams) -> Mat<f64> {
    let n = points.len();
    let half_alpha = 0.5 * params.alpha;
    let half_scale = 0.5 * params.scale_sq;
    // |x|^α via exp((α/2) ln |x|²).
    let radial: Vec<f64> = points.iter().map(|p| pow_sq(p.norm_sq(), half_alpha)).collect();
    let mut k = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let pj = points[j];
        let rj = radial[j];
        k[(j, j)] = params.scale_sq * rj;
        let col = k.col_as_slice_mut(j);
        for i in (j + 1)..n {
            let d_sq = (points[i] - pj).norm_sq();
            col[i] = half_scale * (radial[i] + rj - pow_sq(d_sq, half_alpha));
        }
    }
    k
}

/// `(d²)^e` for a squared distance; zero when `d²` underflows.
#[inline]
fn pow_sq(d_sq: f64, e: f64) -> f64 {
    if d_sq <= 0.0 {
        0.0
    } else {
        (e * d_sq.ln()).exp()
    }
}

/// How the covariance matrix was factored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorDiagnostics {
    pub dim: usize,
    /// Jitter added to the diagonal, relative to its mean.
    pub jitter: f64,
    pub pivoted: bool,
    /// `(max L_ii / min L_ii)²`, a lower bound on the condition number.
    pub condition_estimate: f64,
}

/// Cholesky factor of the field covariance at a fixed set of sites.
/// Can be reused for any number of draws at those sites.
#[derive(Clone, Debug)]
pub struct CovarianceFactor {
    lower: Mat<f64>,
    // Factor row i corresponds to site perm[i] (pivoted path only).
    perm: Option<Vec<usize>>,
    diagnostics: FactorDiagnostics,
}

impl CovarianceFactor {
    pub fn new(points: &[Point2], params: &FieldParams, max_points: usize) -> Result<Self> {
        if points.len() > max_points {
            return Err(Error::Resource {
                what: "field sites",
                requested: points.len() as f64,
                cap: max_points as f64,
            });
        }
        if points.is_empty() {
            return Err(Error::param("no field sites"));
        }
        Self::factor(lower_covariance(points, params), false)
    }

    /// Factors a matrix whose lower triangle holds a covariance.
    pub(crate) fn factor(lower: Mat<f64>, force_pivot: bool) -> Result<Self> {
        let n = lower.nrows();
        let mean_diag = (0..n).map(|i| lower[(i, i)]).sum::<f64>() / n as f64;
        let mut last_condition = f64::INFINITY;
        for &level in &JITTER_LADDER {
            let mut a = lower.clone();
            for i in 0..n {
                a[(i, i)] += level * mean_diag;
            }
            if !force_pivot {
                let mut plain = a.clone();
                if plain_cholesky(&mut plain) {
                    zero_upper(&mut plain);
                    return Ok(Self::finish(plain, None, level, false));
                }
            }
            match pivoted_cholesky(&mut a) {
                Ok(perm) => {
                    zero_upper(&mut a);
                    return Ok(Self::finish(a, Some(perm), level, true));
                }
                Err(cond) => last_condition = cond,
            }
        }
        Err(Error::Numerical {
            message: format!("covariance factorization failed for {n} sites after jitter escalation"),
            condition_estimate: last_condition,
        })
    }

    fn finish(lower: Mat<f64>, perm: Option<Vec<usize>>, jitter: f64, pivoted: bool) -> Self {
        let n = lower.nrows();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = lower[(i, i)].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let diagnostics = FactorDiagnostics {
            dim: n,
            jitter,
            pivoted,
            condition_estimate: (hi / lo).powi(2),
        };
        if jitter > 0.0 {
            log::warn!("covariance of {n} sites needed relative jitter {jitter:e}");
        }
        Self {
            lower,
            perm,
            diagnostics,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn diagnostics(&self) -> FactorDiagnostics {
        self.diagnostics
    }

    /// One centred Gaussian vector with this covariance.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = vec![0.0; n];
        // out = L z, walking columns so the inner loop is contiguous.
        for j in 0..n {
            let zj = z[j];
            if zj == 0.0 {
                continue;
            }
            let col = self.lower.col(j);
            for i in j..n {
                out[i] += col[i] * zj;
            }
        }
        match &self.perm {
            None => out,
            Some(perm) => {
                let mut values = vec![0.0; n];
                for (i, &site) in perm.iter().enumerate() {
                    values[site] = out[i];
                }
                values
            }
        }
    }
}

fn plain_cholesky(a: &mut Mat<f64>) -> bool {
    let n = a.nrows();
    let par = Par::Seq;
    let req = llt::factor::cholesky_in_place_scratch::<f64>(n, par, Default::default());
    let mut buf = MemBuffer::new(req);
    let stack = MemStack::new(&mut buf);
    llt::factor::cholesky_in_place(a.as_mut(), Default::default(), par, stack, Default::default()).is_ok()
}

/// Full-rank pivoted factorization; returns the site permutation or a
/// condition estimate on failure.
fn pivoted_cholesky(a: &mut Mat<f64>) -> std::result::Result<Vec<usize>, f64> {
    let n = a.nrows();
    let par = Par::Seq;
    let req = llt_pivoting::factor::cholesky_in_place_scratch::<usize, f64>(n, par, Default::default());
    let mut buf = MemBuffer::new(req);
    let stack = MemStack::new(&mut buf);
    let mut perm = vec![0usize; n];
    let mut perm_inv = vec![0usize; n];
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
    let result = llt_pivoting::factor::cholesky_in_place(
        a.as_mut(),
        &mut perm,
        &mut perm_inv,
        par,
        stack,
        Default::default(),
    );
    match result {
        Ok((info, _)) if info.rank == n => Ok(perm),
        Ok((info, _)) => {
            let r = info.rank;
            let tail = if r < n { a[(r, r)].abs() } else { 0.0 };
            Err(if tail > 0.0 { max_diag / tail } else { f64::INFINITY })
        }
        Err(_) => Err(f64::INFINITY),
    }
}

fn zero_upper(a: &mut Mat<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
}

/// Field values at the points of a configuration.
#[derive(Clone, Debug)]
pub struct FieldSample {
    config: PointConfiguration,
    values: Vec<f64>,
    params: FieldParams,
    seed: Option<u64>,
    diagnostics: FactorDiagnostics,
}

impl FieldSample {
    /// Draws from a precomputed factor of `config`'s covariance.
    pub fn from_factor<R: Rng + ?Sized>(
        config: &PointConfiguration,
        params: FieldParams,
        factor: &CovarianceFactor,
        rng: &mut R,
    ) -> Result<Self> {
        if factor.dim() != config.len() {
            return Err(Error::param(format!(
                "factor has {} sites but configuration has {}",
                factor.dim(),
                config.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            values: factor.draw(rng),
            params,
            seed: None,
            diagnostics: factor.diagnostics(),
        })
    }

    /// Wraps externally produced values (used by tests and replays).
    pub fn from_values(config: &PointConfiguration, params: FieldParams, values: Vec<f64>) -> Result<Self> {
        if values.len() != config.len() {
            return Err(Error::param("value count does not match point count"));
        }
        Ok(Self {
            config: config.clone(),
            values,
            params,
            seed: None,
            diagnostics: FactorDiagnostics {
                dim: config.len(),
                jitter: 0.0,
                pivoted: false,
                condition_estimate: f64::NAN,
            },
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn config(&self) -> &PointConfiguration {
        &self.config
    }

    pub fn points(&self) -> &[Point2] {
        self.config.points()
    }

    pub fn params(&self) -> &FieldParams {
        &self.params
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn diagnostics(&self) -> FactorDiagnostics {
        self.diagnostics
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "x", "y", "w"])?;
        for (i, (p, v)) in self.points().iter().zip(&self.values).enumerate() {
            w.write_record([i.to_string(), p.x.to_string(), p.y.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One joint draw of the field at every point of `config`.
pub fn sample_field<R: Rng + ?Sized>(
    config: &PointConfiguration,
    params: FieldParams,
    rng: &mut R,
) -> Result<FieldSample> {
    sample_field_capped(config, params, rng, DEFAULT_MAX_FIELD_POINTS)
}

pub fn sample_field_capped<R: Rng + ?Sized>(
    config: &PointConfiguration,
    params: FieldParams,
    rng: &mut R,
    max_points: usize,
) -> Result<FieldSample> {
    let factor = CovarianceFactor::new(config.points(), &params, max_points)?;
    FieldSample::from_factor(config, params, &factor, rng)
}

/// `(W(x_j) − W(x_i)) / (σ d^H)`.
pub fn normalized_increment(sample: &FieldSample, i: usize, j: usize) -> Result<f64> {
    let pts = sample.points();
    if i >= pts.len() || j >= pts.len() {
        return Err(Error::param(format!("increment index out of range ({i}, {j})")));
    }
    let d = pts[i].dist(pts[j]);
    if d <= 0.0 {
        return Err(Error::param(format!("increment endpoints {i} and {j} coincide")));
    }
    let p = sample.params();
    Ok((sample.values[j] - sample.values[i]) / (p.scale_sq.sqrt() * pow_dist(d, p.hurst)))
}

/// Correlation of the normalized increments over `x1→x2` and `x3→x4`, without
/// argument checks.
#[inline]
pub fn increment_corr_unchecked(x1: Point2, x2: Point2, x3: Point2, x4: Point2, alpha: f64) -> f64 {
    let h = 0.5 * alpha;
    // |x1−x4|^α + |x2−x3|^α − |x1−x3|^α − |x2−x4|^α as differences across
    // each increment, evaluated from both sides and averaged so that
    // swapping the increments only commutes an addition.
    let from_second = pow_gap(x1, x4, x3, h) - pow_gap(x2, x4, x3, h);
    let from_first = pow_gap(x3, x2, x1, h) - pow_gap(x4, x2, x1, h);
    let num = 0.5 * (from_second + from_first);
    let den = 2.0 * pow_sq((x1 - x2).norm_sq() * (x3 - x4).norm_sq(), 0.5 * h);
    num / den
}

/// `|x − y|^{2h} − |x − z|^{2h}` without cancellation when `y` and `z` are
/// close compared with their distance to `x`.
#[inline]
fn pow_gap(x: Point2, y: Point2, z: Point2, h: f64) -> f64 {
    let q1 = (x - y).norm_sq();
    let q0 = (x - z).norm_sq();
    if q0 > 0.0 && q1 > 0.0 {
        let rel = (z - y).dot((x - y) + (x - z)) / q0;
        if rel > -0.5 {
            return pow_sq(q0, h) * (h * rel.ln_1p()).exp_m1();
        }
    }
    pow_sq(q1, h) - pow_sq(q0, h)
}

/// Correlation of the normalized increments over `x1→x2` and `x3→x4`.
pub fn increment_corr_exact(x1: Point2, x2: Point2, x3: Point2, x4: Point2, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if x1 == x2 || x3 == x4 {
        return Err(Error::param("increment endpoints coincide"));
    }
    Ok(increment_corr_unchecked(x1, x2, x3, x4, alpha))
}

/// Correlation of the increments `x1→x2` and `x1→x3` sharing their origin.
pub fn pair_corr_r(x1: Point2, x2: Point2, x3: Point2, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if x1 == x2 || x1 == x3 || x2 == x3 {
        return Err(Error::param("pair correlation needs three distinct points"));
    }
    Ok(pair_corr_r_unchecked(x1.dist(x2), x1.dist(x3), x2.dist(x3), alpha))
}

/// `(d12^α + d13^α − d23^α) / (2 (d12 d13)^{α/2})`.
#[inline]
pub fn pair_corr_r_unchecked(d12: f64, d13: f64, d23: f64, alpha: f64) -> f64 {
    (pow_dist(d12, alpha) + pow_dist(d13, alpha) - pow_dist(d23, alpha))
        / (2.0 * pow_dist(d12 * d13, 0.5 * alpha))
}

/// Leading term of the correlation of two increments of lengths `l1`, `l2`
/// at distance `d`, with directions `theta` and `beta` measured against the
/// axis perpendicular to the line joining them.
pub fn increment_corr_asymptotic(l1: f64, l2: f64, d: f64, theta: f64, beta: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(l1 > 0.0 && l2 > 0.0 && d > 0.0) {
        return Err(Error::param("lengths must be positive"));
    }
    let shape = beta.cos() * theta.cos() - (1.0 - alpha) * beta.sin() * theta.sin();
    Ok(0.5 * alpha * pow_dist(l1 * l2, 1.0 - 0.5 * alpha) * pow_dist(d, alpha - 2.0) * shape)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 2.0 {
        Ok(())
    } else {
        Err(Error::param(format!("alpha must lie in (0, 2), got {alpha}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use proptest::prelude::*;
    use rand::Rng;

    fn params(h: f64) -> FieldParams {
        FieldParams::new(h, 1.0).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(FieldParams::new(0.0, 1.0).is_err());
        assert!(FieldParams::new(1.0, 1.0).is_err());
        assert!(FieldParams::new(0.3, 0.0).is_err());
        assert_eq!(FieldParams::new(0.3, 2.0).unwrap().alpha(), 0.6);
        let json = r#"{"hurst": 1.5, "scale_sq": 1.0}"#;
        assert!(serde_json::from_str::<FieldParams>(json).is_err());
    }

    #[test]
    fn covariance_values() {
        let p = params(0.25);
        let x = Point2::new(1.0, 0.0);
        let y = Point2::new(0.0, 1.0);
        // (1/2)(1 + 1 − 2^{0.25})
        assert!((cov(x, y, &p) - 0.5 * (2.0 - 2f64.powf(0.25))).abs() < 1e-15);
        assert!((cov(x, y, &p) - 0.405_396_442_498_639_1).abs() < 1e-12);
        let z = Point2::new(3.0, 4.0);
        assert!((cov(z, z, &p) - 5f64.powf(0.5)).abs() < 1e-14);
        assert_eq!(cov(Point2::ORIGIN, z, &p), 0.0);
        assert_eq!(cov(x, z, &p), cov(z, x, &p));
    }

    #[test]
    fn single_site_variance() {
        let p = FieldParams::new(0.3, 2.0).unwrap();
        let x = Point2::new(2.0, -1.0);
        let cfg = PointConfiguration::from_points(vec![x]).unwrap();
        let factor = CovarianceFactor::new(cfg.points(), &p, 10).unwrap();
        let mut rng = StreamKey::new(1).rng();
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| factor.draw(&mut rng)[0]).collect();
        let var = draws.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let want = cov(x, x, &p);
        let se = want * (2.0 / n as f64).sqrt();
        assert!((var - want).abs() < 3.0 * se, "{var} vs {want}");
    }

    #[test]
    fn cap_exceeded_is_resource_error() {
        let pts: Vec<Point2> = (0..5).map(|i| Point2::new(i as f64 + 1.0, 0.5)).collect();
        assert!(matches!(
            CovarianceFactor::new(&pts, &params(0.3), 4),
            Err(Error::Resource { .. })
        ));
    }

    #[test]
    fn pivoted_path_reproduces_covariance() {
        let pts: Vec<Point2> = (0..8)
            .map(|i| Point2::from_polar(1.0 + i as f64 * 0.7, i as f64 * 1.3))
            .collect();
        let p = params(0.35);
        let factor = CovarianceFactor::factor(lower_covariance(&pts, &p), true).unwrap();
        assert!(factor.diagnostics().pivoted);
        // L L^T, mapped back through the permutation, equals the covariance.
        let perm = factor.perm.as_ref().unwrap();
        let n = pts.len();
        for a in 0..n {
            for b in 0..n {
                let s: f64 = (0..n).map(|k| factor.lower[(a, k)] * factor.lower[(b, k)]).sum();
                let want = cov(pts[perm[a]], pts[perm[b]], &p);
                assert!((s - want).abs() < 1e-12, "{s} vs {want}");
            }
        }
    }

    #[test]
    fn near_singular_matrix_escalates_jitter() {
        // Two almost coincident sites make the covariance nearly singular.
        let pts = vec![Point2::new(1.0, 1.0), Point2::new(1.0, 1.0 + 1e-15), Point2::new(2.0, 0.5)];
        let factor = CovarianceFactor::new(&pts, &params(0.4), 10).unwrap();
        let d = factor.diagnostics();
        assert!(d.condition_estimate > 1e6);
    }

    #[test]
    fn hopeless_matrix_is_numerical_error() {
        let mut m = Mat::<f64>::zeros(2, 2);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = -1.0;
        assert!(matches!(
            CovarianceFactor::factor(m, false),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn origin_value_is_zero() {
        let pts = vec![Point2::ORIGIN, Point2::new(1.0, 0.0)];
        let cfg = PointConfiguration::from_points(pts).unwrap();
        let s = sample_field(&cfg, params(0.3), &mut StreamKey::new(3).rng()).unwrap();
        assert!(s.value(0).abs() < 1e-3);
    }

    #[test]
    fn increment_antisymmetry_and_errors() {
        let pts = vec![Point2::new(1.0, 2.0), Point2::new(0.5, -1.0)];
        let cfg = PointConfiguration::from_points(pts).unwrap();
        let s = sample_field(&cfg, params(0.3), &mut StreamKey::new(3).rng()).unwrap();
        assert_eq!(normalized_increment(&s, 0, 1).unwrap(), -normalized_increment(&s, 1, 0).unwrap());
        assert!(normalized_increment(&s, 0, 0).is_err());
    }

    #[test]
    fn increment_corr_values() {
        let o = Point2::ORIGIN;
        let e1 = Point2::new(1.0, 0.0);
        let e2 = Point2::new(0.0, 1.0);
        assert!((increment_corr_exact(o, e1, o, e1, 0.7).unwrap() - 1.0).abs() < 1e-14);
        let r = increment_corr_exact(o, e1, o, e2, 1.0).unwrap();
        assert!((r - (2.0 - 2f64.sqrt()) / 2.0).abs() < 1e-14);
        assert!((r - 0.292_893_218_813_452_5).abs() < 1e-14);
        assert!(increment_corr_exact(o, o, e1, e2, 1.0).is_err());
    }

    #[test]
    fn pair_corr_values() {
        let o = Point2::ORIGIN;
        let e1 = Point2::new(1.0, 0.0);
        let eq = Point2::from_polar(1.0, std::f64::consts::FRAC_PI_3);
        for a in [0.2, 0.7, 1.3] {
            assert!((pair_corr_r(o, e1, eq, a).unwrap() - 0.5).abs() < 1e-14);
        }
        let r = pair_corr_r(o, e1, Point2::new(2.0, 0.0), 1.0).unwrap();
        assert!((r - 2.0 / (2.0 * 2f64.sqrt())).abs() < 1e-15);
        assert!(pair_corr_r(o, o, e1, 1.0).is_err());
    }

    #[test]
    fn asymptotic_corr_values() {
        let half_pi = std::f64::consts::FRAC_PI_2;
        assert!(increment_corr_asymptotic(1.0, 1.0, 10.0, half_pi, half_pi, 1.0).unwrap().abs() < 1e-16);
        let a = increment_corr_asymptotic(1.3, 0.7, 50.0, 0.3, -0.4, 0.5).unwrap();
        let b = increment_corr_asymptotic(1.3, 0.7, 100.0, 0.3, -0.4, 0.5).unwrap();
        assert!((a / b - 2f64.powf(1.5)).abs() < 1e-12);
        assert!(increment_corr_asymptotic(0.0, 1.0, 1.0, 0.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn corr_matches_direct_formula_and_stays_accurate_far_away() {
        let naive = |x1: Point2, x2: Point2, x3: Point2, x4: Point2, a: f64| {
            let p = |u: Point2, v: Point2| u.dist(v).powf(a);
            (p(x1, x4) + p(x2, x3) - p(x1, x3) - p(x2, x4)) / (2.0 * (x1.dist(x2) * x3.dist(x4)).powf(0.5 * a))
        };
        let mut rng = StreamKey::new(8).rng();
        for _ in 0..500 {
            let mut q = || Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let (x1, x2, x3, x4) = (q(), q(), q(), q());
            let a = 0.7;
            let (s, n) = (increment_corr_exact(x1, x2, x3, x4, a).unwrap(), naive(x1, x2, x3, x4, a));
            assert!((s - n).abs() < 1e-11, "{s} vs {n}");
        }
        // Tiny increments far apart: the naive form has no correct digits.
        let (l, d, alpha) = (1e-4, 400.0, 0.5);
        let x1 = Point2::new(0.0, d);
        let exact = increment_corr_exact(x1, x1 + Point2::new(l, 0.0), Point2::ORIGIN, Point2::new(l, 0.0), alpha).unwrap();
        let approx = increment_corr_asymptotic(l, l, d, 0.0, 0.0, alpha).unwrap();
        assert!((exact / approx - 1.0).abs() < 1e-4, "{exact} vs {approx}");
    }

    #[test]
    fn asymptotic_matches_exact_far_away() {
        let (d, alpha) = (1000.0, 0.5);
        let x1 = Point2::new(0.0, d);
        let x2 = x1 + Point2::new(1.0, 0.0);
        let x3 = Point2::ORIGIN;
        let x4 = Point2::new(1.0, 0.0);
        let exact = increment_corr_exact(x1, x2, x3, x4, alpha).unwrap();
        let approx = increment_corr_asymptotic(1.0, 1.0, d, 0.0, 0.0, alpha).unwrap();
        assert!((approx / exact - 1.0).abs() < 0.01, "{approx} vs {exact}");
    }

    #[test]
    fn covariance_psd_on_random_configurations() {
        let key = StreamKey::new(21);
        for c in 0..100u64 {
            let mut rng = key.child(c).rng();
            let n = rng.random_range(2..=200usize);
            let pts: Vec<Point2> = (0..n)
                .map(|_| Point2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
                .collect();
            let h = rng.random_range(0.05..0.95);
            let k = covariance_matrix(&pts, &params(h));
            let eig = k.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
            let max = eig.iter().cloned().fold(f64::MIN, f64::max);
            let min = eig.iter().cloned().fold(f64::MAX, f64::min);
            assert!(min >= -1e-8 * max, "config {c}: {min} vs {max}");
        }
    }

    #[test]
    fn self_similarity_of_covariance() {
        let p = FieldParams::new(0.3, 1.7).unwrap();
        let n = 400.0f64;
        let s = n.sqrt();
        let mut rng = StreamKey::new(5).rng();
        for _ in 0..200 {
            let x = Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let y = Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let lhs = cov(x, y, &p);
            let rhs = n.powf(p.hurst()) * cov(x * (1.0 / s), y * (1.0 / s), &p);
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    proptest! {
        #[test]
        fn increment_corr_symmetric_and_bounded(
            c in proptest::collection::vec(-20.0f64..20.0, 8),
            alpha in 0.05f64..1.95,
        ) {
            let x1 = Point2::new(c[0], c[1]);
            let x2 = Point2::new(c[2], c[3]);
            let x3 = Point2::new(c[4], c[5]);
            let x4 = Point2::new(c[6], c[7]);
            prop_assume!(x1.dist(x2) > 1e-6 && x3.dist(x4) > 1e-6);
            let a = increment_corr_exact(x1, x2, x3, x4, alpha).unwrap();
            let b = increment_corr_exact(x3, x4, x1, x2, alpha).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn pair_corr_consistent_with_increment_corr(
            c in proptest::collection::vec(-20.0f64..20.0, 6),
            alpha in 0.05f64..1.95,
        ) {
            let x1 = Point2::new(c[0], c[1]);
            let x2 = Point2::new(c[2], c[3]);
            let x3 = Point2::new(c[4], c[5]);
            prop_assume!(x1.dist(x2) > 1e-6 && x1.dist(x3) > 1e-6 && x2.dist(x3) > 1e-6);
            let r = pair_corr_r(x1, x2, x3, alpha).unwrap();
            let q = increment_corr_exact(x1, x2, x1, x3, alpha).unwrap();
            prop_assert!((r - q).abs() < 1e-12);
            prop_assert!(r.abs() <= 1.0 + 1e-12);
        }
    }
}
