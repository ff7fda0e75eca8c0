//! Palm objects of the unit-intensity Poisson–Delaunay triangulation: typical
//! cell, typical edge length, typical couple of edges, and window estimates
//! of the edge and cell intensities.
//!
//! The typical cell is `R·Δ(U₁,U₂,U₃)` where `R` has density
//! `2π²r³e^{−πr²}` and the directions have joint density proportional to the
//! area `a(Δ(u₁,u₂,u₃))` with respect to the uniform law on the circle.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use integrate::gauss_quadrature::legendre_rule;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::delaunay::{anchored_edges, Triangulation};
use crate::error::Result;
use crate::geom::{triangle_area, Point2};
use crate::pointprocess::Window;

/// Largest area of a triangle inscribed in the unit circle. The equilateral
/// triangle maximizes it: three sectors of angle 2π/3 give
/// `3 · ½ sin(2π/3) = 3√3/4`.
pub const MAX_INSCRIBED_AREA: f64 = 1.299_038_105_676_658;

/// Default number of Gauss–Legendre nodes for the edge-length law.
pub const DEFAULT_QUADRATURE_SIZE: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypicalCellDraw {
    pub radius: f64,
    pub directions: [Point2; 3],
    pub triangle: [Point2; 3],
}

impl TypicalCellDraw {
    pub fn area(&self) -> f64 {
        triangle_area(self.triangle[0], self.triangle[1], self.triangle[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypicalCoupleDraw {
    pub d1: f64,
    pub d2: f64,
    /// In `[−π/2, π/2)`.
    pub theta: f64,
}

/// Acceptance probability of a direction triple in the rejection sampler.
pub fn acceptance_weight(u1: Point2, u2: Point2, u3: Point2) -> f64 {
    triangle_area(u1, u2, u3) / MAX_INSCRIBED_AREA
}

/// `P[R ≤ r] = 1 − (1 + πr²) e^{−πr²}`.
pub fn radius_cdf(r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let s = PI * r * r;
    // -expm1 keeps precision for small s.
    -(-s).exp_m1() - s * (-s).exp()
}

/// `E[R^k] = Γ(2 + k/2) / π^{k/2}`.
pub fn radius_moment(k: f64) -> f64 {
    statrs::function::gamma::gamma(2.0 + k / 2.0) / PI.powf(k / 2.0)
}

fn sample_radius<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // πR² ~ Gamma(2, 1).
    let g: f64 = Gamma::new(2.0, 1.0).expect("valid gamma").sample(rng);
    (g / PI).sqrt()
}

fn sample_direction<R: Rng + ?Sized>(rng: &mut R) -> Point2 {
    let angle = rng.random::<f64>() * 2.0 * PI;
    Point2::new(angle.cos(), angle.sin())
}

/// Direction triple drawn by rejection against the triangle area.
pub fn sample_directions<R: Rng + ?Sized>(rng: &mut R) -> [Point2; 3] {
    loop {
        let u = [sample_direction(rng), sample_direction(rng), sample_direction(rng)];
        if rng.random::<f64>() < acceptance_weight(u[0], u[1], u[2]) {
            return u;
        }
    }
}

pub fn sample_typical_cell<R: Rng + ?Sized>(rng: &mut R) -> TypicalCellDraw {
    let radius = sample_radius(rng);
    let directions = sample_directions(rng);
    TypicalCellDraw {
        radius,
        directions,
        triangle: directions.map(|u| u * radius),
    }
}

/// `(R‖U₃ − U₂‖, R‖U₂ − U₁‖, arcsin(cos(θ/2)))`, where `θ ∈ (0, 2π]` is the
/// counter-clockwise angle from `U₁` to `U₂`.
pub fn couple_from_cell(cell: &TypicalCellDraw) -> TypicalCoupleDraw {
    let [u1, u2, u3] = cell.directions;
    let mut angle = u2.y.atan2(u2.x) - u1.y.atan2(u1.x);
    while angle <= 0.0 {
        angle += 2.0 * PI;
    }
    while angle > 2.0 * PI {
        angle -= 2.0 * PI;
    }
    let theta = (angle / 2.0).cos().clamp(-1.0, 1.0).asin();
    TypicalCoupleDraw {
        d1: cell.radius * u3.dist(u2),
        d2: cell.radius * u2.dist(u1),
        // Only θ = 0 reaches π/2; fold it onto the closed end of the range.
        theta: if theta >= FRAC_PI_2 { -FRAC_PI_2 } else { theta },
    }
}

pub fn sample_typical_couple<R: Rng + ?Sized>(rng: &mut R) -> TypicalCoupleDraw {
    couple_from_cell(&sample_typical_cell(rng))
}

/// Angular weight of the typical edge law. With `h` half the central angle
/// between `U₁` and `U₂` (so `‖U₁ − U₂‖ = 2 sin h`), integrating the area
/// weight over `U₃` leaves the density
/// `4 sin h [(π − 2h) cos h + 2 sin h] / (6π)` on `[0, π]`.
fn half_angle_density(h: f64) -> f64 {
    4.0 * h.sin() * ((PI - 2.0 * h) * h.cos() + 2.0 * h.sin()) / (6.0 * PI)
}

/// `P[D ≤ l]` for the typical edge length `D = R‖U₂ − U₁‖`, by
/// Gauss–Legendre quadrature over the half angle.
pub fn typical_edge_cdf(l: f64, quadrature_size: usize) -> f64 {
    if l <= 0.0 {
        return 0.0;
    }
    if !l.is_finite() {
        return 1.0;
    }
    // The integrand is symmetric about h = π/2.
    let value = 2.0
        * legendre_rule(
            |h: f64| half_angle_density(h) * radius_cdf(l / (2.0 * h.sin())),
            0.0,
            FRAC_PI_2,
            quadrature_size.max(1),
        );
    value.clamp(0.0, 1.0)
}

/// `E[D^k]` for the typical edge length.
pub fn typical_edge_moment(k: f64, quadrature_size: usize) -> f64 {
    let angular = 2.0
        * legendre_rule(
            |h: f64| half_angle_density(h) * (2.0 * h.sin()).powf(k),
            0.0,
            FRAC_PI_2,
            quadrature_size.max(1),
        );
    radius_moment(k) * angular
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    /// Anchored edges per unit area.
    pub beta1: f64,
    /// Circumcenters per unit area.
    pub beta2: f64,
}

/// Edge and cell intensity estimates over the anchor's analysis region.
pub fn estimate_intensities(tri: &Triangulation, anchor: &Window) -> Intensities {
    let area = anchor.analysis_area();
    let cells = tri
        .circumcenters()
        .iter()
        .filter(|c| anchor.analysis_contains(**c))
        .count();
    let edges = anchored_edges(tri, anchor).len();
    Intensities {
        beta1: edges as f64 / area,
        beta2: cells as f64 / area,
    }
}

pub fn write_cell_draws_csv<W: Write>(draws: &[TypicalCellDraw], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["draw", "r", "u1x", "u1y", "u2x", "u2y", "u3x", "u3y"])?;
    for (k, d) in draws.iter().enumerate() {
        let [u1, u2, u3] = d.directions;
        w.write_record([
            k.to_string(),
            d.radius.to_string(),
            u1.x.to_string(),
            u1.y.to_string(),
            u2.x.to_string(),
            u2.y.to_string(),
            u3.x.to_string(),
            u3.y.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_couple_draws_csv<W: Write>(draws: &[TypicalCoupleDraw], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["draw", "d1", "d2", "theta"])?;
    for (k, d) in draws.iter().enumerate() {
        w.write_record([k.to_string(), d.d1.to_string(), d.d2.to_string(), d.theta.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delaunay::triangulate;
    use crate::normality::ks_distance_sorted;
    use crate::pointprocess::sample_poisson;
    use crate::rng::StreamKey;

    #[test]
    fn max_area_constant() {
        assert!((MAX_INSCRIBED_AREA - 3.0 * 3f64.sqrt() / 4.0).abs() < 1e-15);
        let eq = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0].map(|a: f64| Point2::new(a.cos(), a.sin()));
        assert!((acceptance_weight(eq[0], eq[1], eq[2]) - 1.0).abs() < 1e-12);
        let u = Point2::new(1.0, 0.0);
        assert_eq!(acceptance_weight(u, u, Point2::new(0.0, 1.0)), 0.0);
    }

    #[test]
    fn radius_cdf_matches_density_by_quadrature() {
        for r in [0.1, 0.5, 1.0, 2.0] {
            let q = legendre_rule(|s: f64| 2.0 * PI * PI * s.powi(3) * (-PI * s * s).exp(), 0.0, r, 64usize);
            assert!((q - radius_cdf(r)).abs() < 1e-13, "r={r}");
        }
        assert!((radius_moment(2.0) - 2.0 / PI).abs() < 1e-13);
    }

    #[test]
    fn radius_sampler_matches_cdf() {
        let mut rng = StreamKey::new(1).rng();
        let mut r: Vec<f64> = (0..200_000).map(|_| sample_radius(&mut rng)).collect();
        let mean_sq = r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64;
        // Var(R²) = 2/π².
        let se = (2.0 / (PI * PI) / r.len() as f64).sqrt();
        assert!((mean_sq - 2.0 / PI).abs() < 3.0 * se);
        r.sort_by(f64::total_cmp);
        assert!(ks_distance_sorted(&r, radius_cdf) < 0.005);
    }

    #[test]
    fn edge_law_normalization_and_known_mean() {
        let total = 2.0 * legendre_rule(half_angle_density, 0.0, FRAC_PI_2, 64usize);
        assert!((total - 1.0).abs() < 1e-13);
        // Mean typical edge length of the unit-intensity Poisson–Delaunay
        // triangulation is 32/(9π).
        assert!((typical_edge_moment(1.0, 96) - 32.0 / (9.0 * PI)).abs() < 1e-12);
        assert_eq!(typical_edge_cdf(0.0, 96), 0.0);
        assert!(typical_edge_cdf(10.0, 96) >= 0.999);
        let grid: Vec<f64> = (0..=400).map(|k| k as f64 * 0.01).collect();
        let vals: Vec<f64> = grid.iter().map(|&l| typical_edge_cdf(l, 96)).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn edge_cdf_matches_direct_double_integral() {
        // Independent evaluation: integrate the area weight over both free
        // angles with u1 fixed at angle 0.
        let l = 1.1;
        let n = 200;
        let step = 2.0 * PI / n as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for a in 0..n {
            let u2 = Point2::from_polar(1.0, (a as f64 + 0.5) * step);
            let dist = Point2::new(1.0, 0.0).dist(u2);
            for b in 0..n {
                let u3 = Point2::from_polar(1.0, (b as f64 + 0.5) * step);
                let w = triangle_area(Point2::new(1.0, 0.0), u2, u3);
                den += w;
                num += w * radius_cdf(l / dist);
            }
        }
        assert!((num / den - typical_edge_cdf(l, 96)).abs() < 2e-4);
    }

    #[test]
    fn mean_cell_area_is_one_half() {
        let mut rng = StreamKey::new(2).rng();
        let n = 200_000;
        let areas: Vec<f64> = (0..n).map(|_| sample_typical_cell(&mut rng).area()).collect();
        let mean = areas.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean area {mean}");
    }

    #[test]
    fn acceptance_rate_is_mean_area_over_max() {
        // E[a(Δ)] for three uniform directions is 3/(2π).
        let expected = 3.0 / (2.0 * PI) / MAX_INSCRIBED_AREA;
        for seed in [3, 4] {
            let mut rng = StreamKey::new(seed).rng();
            let trials = 200_000;
            let accepted = (0..trials)
                .filter(|_| {
                    let u = [sample_direction(&mut rng), sample_direction(&mut rng), sample_direction(&mut rng)];
                    rng.random::<f64>() < acceptance_weight(u[0], u[1], u[2])
                })
                .count();
            let rate = accepted as f64 / trials as f64;
            assert!((rate / expected - 1.0).abs() < 0.01, "rate {rate} vs {expected}");
        }
    }

    #[test]
    fn couple_marginal_and_ranges() {
        let mut rng = StreamKey::new(5).rng();
        let draws: Vec<TypicalCoupleDraw> = (0..200_000).map(|_| sample_typical_couple(&mut rng)).collect();
        assert!(draws.iter().all(|d| d.d1 >= 0.0 && d.d2 >= 0.0));
        assert!(draws.iter().all(|d| (-FRAC_PI_2..FRAC_PI_2).contains(&d.theta)));
        let mut d1: Vec<f64> = draws.iter().map(|d| d.d1).collect();
        d1.sort_by(f64::total_cmp);
        assert!(ks_distance_sorted(&d1, |l| typical_edge_cdf(l, 96)) < 0.01);
    }

    #[test]
    fn intensities_on_one_window() {
        let window = Window::centered(30.0, 8.0).unwrap();
        let mut rng = StreamKey::new(6).rng();
        let tri = triangulate(&sample_poisson(1.0, &window, &mut rng).unwrap()).unwrap();
        let est = estimate_intensities(&tri, &window);
        assert!((est.beta1 - 3.0).abs() < 0.25, "{est:?}");
        assert!((est.beta2 - 2.0).abs() < 0.2, "{est:?}");
        let far = Window::new(Point2::new(500.0, 500.0), 1.0, 0.0).unwrap();
        assert_eq!(estimate_intensities(&tri, &far), Intensities { beta1: 0.0, beta2: 0.0 });
    }

    #[test]
    fn csv_headers() {
        let mut rng = StreamKey::new(7).rng();
        let cell = sample_typical_cell(&mut rng);
        let mut buf = Vec::new();
        write_cell_draws_csv(&[cell], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("draw,r,u1x,u1y,u2x,u2y,u3x,u3y\n0,"));
        let mut buf = Vec::new();
        write_couple_draws_csv(&[couple_from_cell(&cell)], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("draw,d1,d2,theta\n0,"));
    }
}
