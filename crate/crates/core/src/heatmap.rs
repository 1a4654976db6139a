//! Discrete 2-D distributions on a pixel lattice.
//!
//! Cell `(row r, col c)` sits at coordinate `(x = c, y = r)`; storage is
//! row-major everywhere, including the CSV interchange format.

use std::fmt::Write as _;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of a heatmap.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct Grid {
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    width: usize,
    height: usize,
}

impl TryFrom<RawGrid> for Grid {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        Grid::new(raw.width, raw.height)
    }
}

impl From<Grid> for RawGrid {
    fn from(g: Grid) -> Self {
        RawGrid {
            width: g.width,
            height: g.height,
        }
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl Grid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidGrid { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Pixel coordinate of the cell at flat row-major index `i`.
    #[inline]
    pub fn coord(&self, i: usize) -> Point {
        Point::new((i % self.width) as f64, (i / self.width) as f64)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }

    /// Iterator over `(index, coordinate)` in storage order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, Point)> + '_ {
        (0..self.len()).map(move |i| (i, self.coord(i)))
    }

    fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch {
                left: self.to_string(),
                right: other.to_string(),
            });
        }
        Ok(())
    }
}

/// Unnormalised per-cell scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    grid: Grid,
    values: Vec<f64>,
}

impl Logits {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for a {grid} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("logit at index {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// A probability distribution over the cells of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteHeatmap {
    grid: Grid,
    probs: Vec<f64>,
}

impl DiscreteHeatmap {
    /// Validates non-negativity and unit mass.
    pub fn new(grid: Grid, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for a {grid} grid",
                probs.len()
            )));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFiniteInput(format!("probability at index {i}")));
        }
        if let Some(i) = probs.iter().position(|&p| p < 0.0) {
            return Err(Error::InvalidHeatmap(format!(
                "negative mass {} at index {i}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidHeatmap(format!("total mass {total} != 1")));
        }
        Ok(Self { grid, probs })
    }

    /// All mass on one cell.
    pub fn delta(grid: Grid, row: usize, col: usize) -> Result<Self> {
        if row >= grid.height() || col >= grid.width() {
            return Err(Error::CenterOutOfBounds {
                x: col as f64,
                y: row as f64,
            });
        }
        let mut probs = vec![0.0; grid.len()];
        probs[grid.index(row, col)] = 1.0;
        Ok(Self { grid, probs })
    }

    pub fn uniform(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.probs[self.grid.index(row, col)]
    }

    /// Convex mixture `alpha * self + (1 - alpha) * other`.
    pub fn mix(&self, other: &DiscreteHeatmap, alpha: f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidHeatmap(format!(
                "mixture weight {alpha} outside [0, 1]"
            )));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        Ok(Self {
            grid: self.grid,
            probs,
        })
    }

    pub(crate) fn check_same_grid(&self, other: &DiscreteHeatmap) -> Result<()> {
        self.grid.check_same(&other.grid)
    }

    /// Serialises to the `H,W` header + row-major CSV format.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.probs.len() * 24 + 16);
        let _ = writeln!(out, "{},{}", self.grid.height(), self.grid.width());
        for row in self.probs.chunks(self.grid.width()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidHeatmap("missing header line".into()))?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidHeatmap(format!("bad header {header:?}: {e}")))?;
        let [h, w] = dims[..] else {
            return Err(Error::InvalidHeatmap(format!(
                "header must be `H,W`, got {header:?}"
            )));
        };
        let grid = Grid::new(w, h)?;
        let mut probs = Vec::with_capacity(grid.len());
        let mut rows = 0;
        for (r, line) in lines.enumerate() {
            let before = probs.len();
            for field in line.split(',') {
                let v = field.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidHeatmap(format!("row {r}: bad value {field:?}: {e}"))
                })?;
                probs.push(v);
            }
            if probs.len() - before != w {
                return Err(Error::InvalidHeatmap(format!(
                    "row {r} has {} values, expected {w}",
                    probs.len() - before
                )));
            }
            rows += 1;
        }
        if rows != h {
            return Err(Error::InvalidHeatmap(format!(
                "expected {h} rows, found {rows}"
            )));
        }
        Self::new(grid, probs)
    }
}

/// Temperature-scaled softmax over all cells, with max subtraction.
pub fn softmax_normalize(logits: &Logits, temperature: f64) -> Result<DiscreteHeatmap> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidHeatmap(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if let Some(i) = logits.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("logit at index {i}")));
    }
    let max = logits
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .values
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let inv_total = 1.0 / probs.iter().sum::<f64>();
    probs.iter_mut().for_each(|p| *p *= inv_total);
    Ok(DiscreteHeatmap {
        grid: logits.grid,
        probs,
    })
}

/// Expected cell coordinate under the heatmap.
pub fn soft_argmax(h: &DiscreteHeatmap) -> Point {
    let (mut x, mut y) = (0.0, 0.0);
    for (r, row) in h.probs.chunks_exact(h.grid.width()).enumerate() {
        let mut row_x = 0.0;
        let mut row_mass = 0.0;
        for (c, p) in row.iter().enumerate() {
            row_x += p * c as f64;
            row_mass += p;
        }
        x += row_x;
        y += row_mass * r as f64;
    }
    Point::new(x, y)
}

/// Isotropic Gaussian evaluated on every cell and renormalised.
pub fn render_gaussian(grid: Grid, center: Point, sigma: f64) -> Result<DiscreteHeatmap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidHeatmap(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if !center.is_finite() || !grid.contains(center) {
        return Err(Error::CenterOutOfBounds {
            x: center.x,
            y: center.y,
        });
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    // Shift by the smallest squared distance so the peak evaluates to 1.
    let d2: Vec<f64> = grid
        .cells()
        .map(|(_, c)| {
            let d = c - center;
            d.dot(d)
        })
        .collect();
    let d2_min = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let mut probs: Vec<f64> = d2.iter().map(|d| (-(d - d2_min) * inv).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(DiscreteHeatmap { grid, probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize) -> Grid {
        Grid::new(w, h).unwrap()
    }

    #[test]
    fn grid_rejects_thin_shapes() {
        assert!(matches!(
            Grid::new(1, 5),
            Err(Error::InvalidGrid { width: 1, height: 5 })
        ));
        assert!(Grid::new(2, 2).is_ok());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let h = softmax_normalize(&Logits::zeros(grid(2, 2)), 1.0).unwrap();
        for p in h.probs() {
            assert_eq!(*p, 0.25);
        }
    }

    #[test]
    fn softmax_saturates() {
        let g = grid(4, 4);
        let mut v = vec![0.0; 16];
        v[0] = 1000.0;
        let h = softmax_normalize(&Logits::new(g, v).unwrap(), 1.0).unwrap();
        assert!((h.probs()[0] - 1.0).abs() < 1e-12);
        assert!(h.probs()[1..].iter().all(|p| *p < 1e-12));
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_temperature() {
        let g = grid(2, 2);
        assert!(matches!(
            Logits::new(g, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(softmax_normalize(&Logits::zeros(g), 0.0).is_err());
    }

    #[test]
    fn temperature_flattens() {
        let g = grid(3, 2);
        let l = Logits::new(g, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let hot = softmax_normalize(&l, 10.0).unwrap();
        let cold = softmax_normalize(&l, 0.5).unwrap();
        assert!(hot.probs()[5] < cold.probs()[5]);
    }

    #[test]
    fn soft_argmax_simple_cases() {
        let g = grid(8, 8);
        let d = DiscreteHeatmap::delta(g, 2, 3).unwrap();
        assert_eq!(soft_argmax(&d), Point::new(3.0, 2.0));

        let u = DiscreteHeatmap::uniform(grid(2, 2));
        assert_eq!(soft_argmax(&u), Point::new(0.5, 0.5));

        let mut p = vec![0.0; 16];
        p[0] = 0.5;
        p[3] = 0.5;
        let two = DiscreteHeatmap::new(grid(4, 4), p).unwrap();
        assert_eq!(soft_argmax(&two), Point::new(1.5, 0.0));
    }

    #[test]
    fn gaussian_concentrates_for_small_sigma() {
        let h = render_gaussian(grid(8, 8), Point::new(4.0, 4.0), 0.1).unwrap();
        assert!(h.get(4, 4) > 0.999);
    }

    #[test]
    fn gaussian_symmetric_about_center_of_odd_grid() {
        let g = grid(9, 7);
        let h = render_gaussian(g, Point::new(4.0, 3.0), 1.7).unwrap();
        let n = g.len();
        for i in 0..n {
            assert!((h.probs()[i] - h.probs()[n - 1 - i]).abs() < 1e-15);
        }
        let argmax = (0..n)
            .max_by(|&a, &b| h.probs()[a].total_cmp(&h.probs()[b]))
            .unwrap();
        assert_eq!(argmax, g.index(3, 4));
    }

    #[test]
    fn gaussian_center_must_be_inside() {
        let g = grid(8, 8);
        assert!(matches!(
            render_gaussian(g, Point::new(7.5, 2.0), 1.0),
            Err(Error::CenterOutOfBounds { .. })
        ));
        assert!(render_gaussian(g, Point::new(-0.1, 2.0), 1.0).is_err());
        assert!(render_gaussian(g, Point::new(7.0, 7.0), 1.0).is_ok());
    }

    #[test]
    fn heatmap_validation() {
        let g = grid(2, 2);
        assert!(DiscreteHeatmap::new(g, vec![0.5, 0.5, 0.5, -0.5]).is_err());
        assert!(DiscreteHeatmap::new(g, vec![0.25, 0.25, 0.25, 0.2]).is_err());
        assert!(DiscreteHeatmap::new(g, vec![0.25; 3]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let h = render_gaussian(grid(5, 3), Point::new(1.3, 0.7), 0.9).unwrap();
        let text = h.to_csv();
        assert!(text.starts_with("3,5\n"));
        let back = DiscreteHeatmap::from_csv(&text).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn csv_parse_errors() {
        assert!(DiscreteHeatmap::from_csv("").is_err());
        assert!(DiscreteHeatmap::from_csv("2,2\n0.5,0.5\n").is_err());
        assert!(DiscreteHeatmap::from_csv("2,2\n0.5,0.5\n0,x\n").is_err());
        assert!(DiscreteHeatmap::from_csv("2\n1\n").is_err());
        assert!(DiscreteHeatmap::from_csv("2,2\n0.25,0.25\n0.25,0.25\n").is_ok());
    }
}
