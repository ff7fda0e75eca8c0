//! Homogeneous Poisson point processes on square windows.

use std::cmp::Ordering;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point2;

/// Default cap on the expected number of points of a single draw.
pub const DEFAULT_MAX_EXPECTED_POINTS: f64 = 1e7;

/// Square analysis region `(center - half_side, center + half_side]^2`,
/// extended by `margin` on every side for simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub center: Point2,
    pub half_side: f64,
    pub margin: f64,
}

impl Window {
    pub fn new(center: Point2, half_side: f64, margin: f64) -> Result<Self> {
        if !(half_side > 0.0 && half_side.is_finite()) {
            return Err(Error::param(format!("half_side must be > 0, got {half_side}")));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::param(format!("margin must be >= 0, got {margin}")));
        }
        if !center.is_finite() {
            return Err(Error::param("window center must be finite"));
        }
        Ok(Self {
            center,
            half_side,
            margin,
        })
    }

    /// Window centred at the origin with analysis side `side`.
    pub fn centered(side: f64, margin: f64) -> Result<Self> {
        Self::new(Point2::ORIGIN, 0.5 * side, margin)
    }

    pub fn side(&self) -> f64 {
        2.0 * self.half_side
    }

    pub fn simulation_half_side(&self) -> f64 {
        self.half_side + self.margin
    }

    pub fn analysis_area(&self) -> f64 {
        self.side() * self.side()
    }

    pub fn simulation_area(&self) -> f64 {
        let s = 2.0 * self.simulation_half_side();
        s * s
    }

    fn half_open_contains(&self, p: Point2, h: f64) -> bool {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        dx > -h && dx <= h && dy > -h && dy <= h
    }

    pub fn analysis_contains(&self, p: Point2) -> bool {
        self.half_open_contains(p, self.half_side)
    }

    pub fn simulation_contains(&self, p: Point2) -> bool {
        self.half_open_contains(p, self.simulation_half_side())
    }

    /// True when the closed disk lies inside the closed simulation square.
    pub fn simulation_contains_disk(&self, center: Point2, radius: f64) -> bool {
        let h = self.simulation_half_side();
        (center.x - self.center.x).abs() + radius <= h
            && (center.y - self.center.y).abs() + radius <= h
    }

    /// The whole simulation region as an analysis window with no margin.
    pub fn simulation_window(&self) -> Self {
        Self {
            center: self.center,
            half_side: self.simulation_half_side(),
            margin: 0.0,
        }
    }

    /// The same window with every length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            center: self.center * factor,
            half_side: self.half_side * factor,
            margin: self.margin * factor,
        }
    }
}

/// Strict lexicographic order on planar points.
pub fn lex_less(a: Point2, b: Point2) -> bool {
    a.x < b.x || (a.x == b.x && a.y < b.y)
}

pub fn lex_cmp(a: Point2, b: Point2) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// A finite point set with its window. The index of a point is its position
/// in `points()`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointConfiguration {
    points: Vec<Point2>,
    window: Window,
    seed: Option<u64>,
}

impl PointConfiguration {
    /// Validates distinctness and containment in the simulation region.
    pub fn new(points: Vec<Point2>, window: Window) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !window.simulation_contains(**p)) {
            return Err(Error::param(format!(
                "point ({}, {}) lies outside the simulation region",
                p.x, p.y
            )));
        }
        if has_duplicates(&points) {
            return Err(Error::param("duplicate points in configuration"));
        }
        Ok(Self {
            points,
            window,
            seed: None,
        })
    }

    /// Builds a configuration whose window is the smallest centred square
    /// containing `points` (margin 0). Handy for fixed test geometries.
    pub fn from_points(points: Vec<Point2>) -> Result<Self> {
        let h = points
            .iter()
            .map(|p| p.x.abs().max(p.y.abs()))
            .fold(0.0f64, f64::max);
        let window = Window::new(Point2::ORIGIN, (h * (1.0 + 1e-9)).max(1e-9) + 1e-300, 0.0)?;
        Self::new(points, window)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Point2 {
        self.points[index]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Points at the given indices, in that order, under the same window.
    pub fn subset(&self, indices: &[usize]) -> PointConfiguration {
        PointConfiguration {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            window: self.window,
            seed: self.seed,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "x", "y"])?;
        for (i, p) in self.points.iter().enumerate() {
            w.write_record([i.to_string(), p.x.to_string(), p.y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let env = ConfigurationEnvelope {
            window: self.window,
            seed: self.seed,
            points: self.points.iter().map(|p| [p.x, p.y]).collect(),
        };
        Ok(serde_json::to_string(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: ConfigurationEnvelope = serde_json::from_str(text)?;
        let cfg = Self::new(
            env.points.iter().map(|p| Point2::new(p[0], p[1])).collect(),
            env.window,
        )?;
        Ok(Self {
            seed: env.seed,
            ..cfg
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigurationEnvelope {
    window: Window,
    seed: Option<u64>,
    points: Vec<[f64; 2]>,
}

fn has_duplicates(points: &[Point2]) -> bool {
    let mut sorted: Vec<Point2> = points.to_vec();
    sorted.sort_by(|a, b| lex_cmp(*a, *b));
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// Poisson process with the given intensity on the window's simulation region,
/// with the default expected-count cap.
pub fn sample_poisson<R: Rng + ?Sized>(
    intensity: f64,
    window: &Window,
    rng: &mut R,
) -> Result<PointConfiguration> {
    sample_poisson_capped(intensity, window, rng, DEFAULT_MAX_EXPECTED_POINTS)
}

pub fn sample_poisson_capped<R: Rng + ?Sized>(
    intensity: f64,
    window: &Window,
    rng: &mut R,
    max_expected: f64,
) -> Result<PointConfiguration> {
    if !(intensity > 0.0 && intensity.is_finite()) {
        return Err(Error::param(format!("intensity must be > 0, got {intensity}")));
    }
    let area = window.simulation_area();
    let mean = intensity * area;
    if !(mean <= max_expected) {
        return Err(Error::Resource {
            what: "expected point count",
            requested: mean,
            cap: max_expected,
        });
    }
    // Duplicates have probability zero; one full resample, then give up.
    for _ in 0..2 {
        let points = uniform_points(mean, window, rng)?;
        if !has_duplicates(&points) {
            return Ok(PointConfiguration {
                points,
                window: *window,
                seed: None,
            });
        }
    }
    Err(Error::Degenerate(
        "duplicate coordinates in two consecutive Poisson draws".into(),
    ))
}

/// Poisson(mean) count of points, placed uniformly on the half-open simulation
/// square.
fn uniform_points<R: Rng + ?Sized>(mean: f64, window: &Window, rng: &mut R) -> Result<Vec<Point2>> {
    let count = poisson_count(mean, rng)?;
    let h = window.simulation_half_side();
    let c = window.center;
    Ok((0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            // u in [0,1) maps onto (c - h, c + h].
            Point2::new(c.x + h - 2.0 * h * u, c.y + h - 2.0 * h * v)
        })
        .collect())
}

pub(crate) fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<usize> {
    if mean == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(mean).map_err(|e| Error::param(format!("poisson mean {mean}: {e}")))?;
    Ok(dist.sample(rng) as usize)
}

/// Multiplies every coordinate (and the window) by `factor`.
pub fn rescale(config: &PointConfiguration, factor: f64) -> Result<PointConfiguration> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::param(format!("rescale factor must be > 0, got {factor}")));
    }
    Ok(PointConfiguration {
        points: config.points.iter().map(|p| *p * factor).collect(),
        window: config.window.scaled(factor),
        seed: config.seed,
    })
}
