use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::screening::DeltaRecord;

pub type Point = (f64, f64);

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn shoelace_area(polygon: &[Point]) -> f64 {
    let n = polygon.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (polygon[i], polygon[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() / 2.0
}

/// Containment for a counter-clockwise convex polygon, boundary inclusive
/// up to `tol`.
pub fn point_in_convex_polygon(p: Point, polygon: &[Point], tol: f64) -> bool {
    match polygon.len() {
        0 => false,
        1 => (p.0 - polygon[0].0).abs() <= tol && (p.1 - polygon[0].1).abs() <= tol,
        2 => {
            let (a, b) = (polygon[0], polygon[1]);
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            let within = (p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1);
            cross(a, b, p).abs() <= tol * len.max(1.0) && within >= -tol && within <= len * len + tol
        }
        n => (0..n).all(|i| cross(polygon[i], polygon[(i + 1) % n], p) >= -tol),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyArea {
    pub points: Vec<Point>,
    pub hull: Vec<Point>,
    pub area: f64,
    pub center: Point,
    /// Hull has no interior (all points collinear or identical).
    pub degenerate: bool,
}

/// Hull of the `(p_plus, p_minus)` points across features.
pub fn strategy_area(records: &[DeltaRecord], baseline: f64) -> Result<StrategyArea> {
    if records.len() < 3 {
        return Err(Error::InvalidInput(format!("strategy area needs at least 3 records, got {}", records.len())));
    }
    let points: Vec<Point> = records.iter().map(|r| (r.p_plus, r.p_minus)).collect();
    let hull = convex_hull(&points);
    let area = shoelace_area(&hull);
    Ok(StrategyArea {
        degenerate: hull.len() < 3 || area == 0.0,
        points,
        hull,
        area,
        center: (baseline, baseline),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
        assert_eq!(shoelace_area(&h), 1.0);
        for p in pts {
            assert!(point_in_convex_polygon(p, &h, 1e-12));
        }
        assert!(!point_in_convex_polygon((1.5, 0.5), &h, 1e-12));
    }

    #[test]
    fn identical_and_collinear_points_have_no_area() {
        assert_eq!(convex_hull(&[(0.2, 0.2); 4]).len(), 1);
        let line = convex_hull(&[(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]);
        assert_eq!(line.len(), 2);
        assert_eq!(shoelace_area(&line), 0.0);
        assert!(point_in_convex_polygon((0.5, 0.5), &line, 1e-12));
    }

    #[test]
    fn area_invariant_under_rotation_of_vertex_order() {
        let h = convex_hull(&[(0.0, 0.0), (2.0, 0.1), (1.5, 1.7), (0.2, 1.0)]);
        let a = shoelace_area(&h);
        for k in 1..h.len() {
            let mut r = h.clone();
            r.rotate_left(k);
            assert!((shoelace_area(&r) - a).abs() < 1e-15);
        }
    }
}
