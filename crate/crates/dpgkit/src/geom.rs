//! Axis-aligned boxes in normalized `[0,1]²` diagram coordinates.

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle `(x0, y0, x1, y1)` with `x0 < x1` and `y0 < y1`.
///
/// All geometry in this crate lives in normalized coordinates: pixel-space
/// annotations are divided by the recorded image width/height at ingest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// `x0 < x1`, `y0 < y1`, and all corners inside the normalized canvas.
    pub fn is_valid(&self) -> bool {
        self.x0.is_finite()
            && self.y0.is_finite()
            && self.x1.is_finite()
            && self.y1.is_finite()
            && self.x0 < self.x1
            && self.y0 < self.y1
            && self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= 1.0
            && self.y1 <= 1.0
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when the union is degenerate.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Smallest box containing both.
    pub fn union_bounds(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }
}

/// Tracks which cells of a fixed grid are covered by at least one box.
///
/// Used for the coverage features consumed by the exit model and the
/// sequential parser; a coarse rasterization keeps updates O(cells) and
/// queries O(1).
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageGrid {
    side: usize,
    covered: Vec<bool>,
    count: usize,
}

impl CoverageGrid {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            covered: vec![false; side * side],
            count: 0,
        }
    }

    /// Marks every cell whose center falls inside `b`.
    pub fn add(&mut self, b: &BBox) {
        let n = self.side;
        for row in 0..n {
            let cy = (row as f64 + 0.5) / n as f64;
            if cy < b.y0 || cy > b.y1 {
                continue;
            }
            for col in 0..n {
                let cx = (col as f64 + 0.5) / n as f64;
                if cx >= b.x0 && cx <= b.x1 {
                    let idx = row * n + col;
                    if !self.covered[idx] {
                        self.covered[idx] = true;
                        self.count += 1;
                    }
                }
            }
        }
    }

    /// Fraction of grid cells covered so far.
    pub fn fraction(&self) -> f64 {
        self.count as f64 / (self.side * self.side) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BBox::new(0.1, 0.2, 0.5, 0.6);
        assert!((b.iou(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_disjoint_boxes_is_zero() {
        let a = BBox::new(0.0, 0.0, 0.2, 0.2);
        let b = BBox::new(0.8, 0.8, 1.0, 1.0);
        assert_eq!(a.iou(&b), 0.0);
        assert!((a.center_distance(&b) - 0.8 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_interval_overlap_oracle() {
        // Independent 1-D interval overlap routine.
        fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
            (a1.min(b1) - a0.max(b0)).max(0.0)
        }
        let a = BBox::new(0.1, 0.1, 0.5, 0.5);
        let b = BBox::new(0.3, 0.2, 0.7, 0.8);
        let inter = overlap(a.x0, a.x1, b.x0, b.x1) * overlap(a.y0, a.y1, b.y0, b.y1);
        let expect = inter / (a.area() + b.area() - inter);
        assert!((a.iou(&b) - expect).abs() < 1e-12);
    }

    #[test]
    fn coverage_full_canvas() {
        let mut g = CoverageGrid::new(32);
        g.add(&BBox::new(0.0, 0.0, 1.0, 1.0));
        assert_eq!(g.fraction(), 1.0);
    }

    #[test]
    fn coverage_half_canvas() {
        let mut g = CoverageGrid::new(32);
        g.add(&BBox::new(0.0, 0.0, 0.5, 1.0));
        assert!((g.fraction() - 0.5).abs() < 1e-9);
    }
}
