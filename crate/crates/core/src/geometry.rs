//! Star pattern geometry: radial sample lines anchored at an object center,
//! and the conversions between contour indices, polygons and masks.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

/// A 2-D point in pixel coordinates (`x` = column, `y` = row).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// `num_lines` radial lines with `points_per_line` graduated samples each.
///
/// Line `n` points at angle `rotation + 2πn/N`; sample `m` (1-based) sits at
/// radius `m·R/M`, so the center itself is never sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct StarPattern {
    center: Point,
    radius: f64,
    num_lines: usize,
    points_per_line: usize,
    rotation: f64,
    coords: Vec<Point>,
}

impl StarPattern {
    pub fn new(
        center: Point,
        radius: f64,
        num_lines: usize,
        points_per_line: usize,
        rotation: f64,
    ) -> Result<Self> {
        if num_lines < 3 {
            return Err(Error::InvalidArgument(format!("star needs at least 3 lines, got {num_lines}")));
        }
        if points_per_line < 1 {
            return Err(Error::InvalidArgument("star needs at least one point per line".into()));
        }
        if !radius.is_finite() || radius <= 0.0 {
            return Err(Error::InvalidArgument(format!("star radius must be positive, got {radius}")));
        }
        if !center.x.is_finite() || !center.y.is_finite() || !rotation.is_finite() {
            return Err(Error::InvalidArgument("non-finite star center or rotation".into()));
        }
        let mut coords = Vec::with_capacity(num_lines * points_per_line);
        for n in 0..num_lines {
            let theta = rotation + TAU * n as f64 / num_lines as f64;
            let (s, c) = theta.sin_cos();
            for m in 1..=points_per_line {
                let r = m as f64 / points_per_line as f64 * radius;
                coords.push(Point::new(center.x + r * c, center.y + r * s));
            }
        }
        Ok(Self { center, radius, num_lines, points_per_line, rotation, coords })
    }

    pub fn center(&self) -> Point {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn num_lines(&self) -> usize {
        self.num_lines
    }

    pub fn points_per_line(&self) -> usize {
        self.points_per_line
    }

    pub fn rotation(&self) -> f64 {
        self.rotation
    }

    pub fn angle(&self, line: usize) -> f64 {
        self.rotation + TAU * line as f64 / self.num_lines as f64
    }

    /// Position of sample `m` (1-based) on line `n` (0-based).
    #[inline]
    pub fn coord(&self, n: usize, m: usize) -> Point {
        debug_assert!(m >= 1 && m <= self.points_per_line);
        self.coords[n * self.points_per_line + m - 1]
    }

    /// All sample positions, line-major.
    pub fn coords(&self) -> &[Point] {
        &self.coords
    }
}

/// `build_star` as a free function.
pub fn build_star(
    center: Point,
    radius: f64,
    num_lines: usize,
    points_per_line: usize,
    rotation: f64,
) -> Result<StarPattern> {
    StarPattern::new(center, radius, num_lines, points_per_line, rotation)
}

/// One 1-based sample index per radial line.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContourIndices(Vec<usize>);

impl ContourIndices {
    /// Validates that every entry lies in `1..=points_per_line`.
    pub fn new(v: Vec<usize>, points_per_line: usize) -> Result<Self> {
        if let Some((line, &index)) =
            v.iter().enumerate().find(|(_, &i)| i < 1 || i > points_per_line)
        {
            return Err(Error::IndexOutOfRange { line, index, max: points_per_line });
        }
        Ok(Self(v))
    }

    /// Wraps indices already known to be valid.
    pub(crate) fn from_raw(v: Vec<usize>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest index gap between cyclically consecutive lines.
    pub fn max_gap(&self) -> usize {
        let n = self.0.len();
        (0..n).map(|i| self.0[i].abs_diff(self.0[(i + 1) % n])).max().unwrap_or(0)
    }

    pub fn is_feasible(&self, delta: usize) -> bool {
        self.max_gap() <= delta
    }
}

impl std::ops::Index<usize> for ContourIndices {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// Moves `center` by an isotropic normal offset with standard deviation
/// `fraction · object_radius`, redrawn until it lies strictly inside the
/// disk of radius `object_radius`.
pub fn jitter_center<R: Rng + ?Sized>(
    center: Point,
    object_radius: f64,
    fraction: f64,
    rng: &mut R,
) -> Point {
    let sd = fraction * object_radius;
    if sd.is_nan() || sd <= 0.0 || !object_radius.is_finite() {
        return center;
    }
    let normal = Normal::new(0.0, sd).expect("positive finite standard deviation");
    loop {
        let dx = normal.sample(rng);
        let dy = normal.sample(rng);
        if dx.hypot(dy) < object_radius {
            return Point::new(center.x + dx, center.y + dy);
        }
    }
}

/// Maps contour indices back to image space: vertex `n` is the selected
/// sample on line `n`.
pub fn indices_to_polygon(star: &StarPattern, v: &ContourIndices) -> Result<Vec<Point>> {
    if v.len() != star.num_lines() {
        return Err(Error::Shape(format!(
            "{} indices for a star with {} lines",
            v.len(),
            star.num_lines()
        )));
    }
    let v = ContourIndices::new(v.as_slice().to_vec(), star.points_per_line())?;
    Ok(v.as_slice().iter().enumerate().map(|(n, &m)| star.coord(n, m)).collect())
}

fn signed_area(polygon: &[Point]) -> f64 {
    let n = polygon.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (polygon[i], polygon[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

fn on_segment(p: Point, a: Point, b: Point, tol: f64) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let len = a.dist(b);
    if cross.abs() > tol * len.max(1.0) {
        return false;
    }
    p.x >= a.x.min(b.x) - tol
        && p.x <= a.x.max(b.x) + tol
        && p.y >= a.y.min(b.y) - tol
        && p.y <= a.y.max(b.y) + tol
}

/// Boundary-inclusive point-in-polygon test (even-odd rule inside).
pub fn point_in_polygon(p: Point, polygon: &[Point]) -> bool {
    const TOL: f64 = 1e-9;
    let n = polygon.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        if on_segment(p, a, b, TOL) {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Rasterizes a closed polygon: a pixel is set when its center lies inside
/// the polygon or on its boundary.
pub fn polygon_to_mask(polygon: &[Point], shape: (usize, usize)) -> Result<Mask> {
    if polygon.len() < 3 {
        return Err(Error::DegeneratePolygon(format!("{} vertices", polygon.len())));
    }
    if polygon.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::DegeneratePolygon("non-finite vertex".into()));
    }
    if signed_area(polygon).abs() < 1e-12 {
        return Err(Error::DegeneratePolygon("zero area".into()));
    }
    let (h, w) = shape;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in polygon {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let mut mask = Mask::filled(h, w, false);
    let lo = |v: f64| v.floor().max(0.0) as usize;
    let (xs, ys) = (lo(x0), lo(y0));
    let xe = (x1.ceil().max(-1.0) as i64).min(w as i64 - 1);
    let ye = (y1.ceil().max(-1.0) as i64).min(h as i64 - 1);
    for y in ys as i64..=ye {
        for x in xs as i64..=xe {
            if point_in_polygon(Point::new(x as f64, y as f64), polygon) {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
    Ok(mask)
}

/// Ground-truth indices: on each line, the outermost sample such that it and
/// every sample inside it round to foreground pixels. Lines whose first
/// sample is already background get index 1.
pub fn mask_to_indices(star: &StarPattern, mask: &Mask) -> Result<ContourIndices> {
    let c = star.center();
    if !mask.at_point(c.x, c.y) {
        return Err(Error::CenterOutsideMask { x: c.x, y: c.y });
    }
    let m_max = star.points_per_line();
    let v = (0..star.num_lines())
        .map(|n| {
            let run = (1..=m_max)
                .take_while(|&m| {
                    let p = star.coord(n, m);
                    mask.at_point(p.x, p.y)
                })
                .count();
            run.max(1)
        })
        .collect();
    Ok(ContourIndices::from_raw(v))
}

/// Serialized form of a contour on its star pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourRecord {
    pub center: [f64; 2],
    pub radius: f64,
    pub v: Vec<usize>,
    pub polygon: Vec<[f64; 2]>,
}

impl ContourRecord {
    pub fn new(star: &StarPattern, v: &ContourIndices) -> Result<Self> {
        let polygon = indices_to_polygon(star, v)?;
        Ok(Self {
            center: [star.center().x, star.center().y],
            radius: star.radius(),
            v: v.as_slice().to_vec(),
            polygon: polygon.iter().map(|p| [p.x, p.y]).collect(),
        })
    }
}
