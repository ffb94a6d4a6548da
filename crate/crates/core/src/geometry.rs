//! Axis-aligned boxes in integer pixel coordinates.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

/// A heatmap/image cell addressed as (row, col).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Axis-aligned box: top-left corner plus size, in pixels.
///
/// Width and height are always positive. Serializes as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    x: i32,
    y: i32,
    w: i32,
    h: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("box size must be positive, got {w}x{h}")]
pub struct DegenerateBox {
    pub w: i32,
    pub h: i32,
}

impl BoundingBox {
    /// Panics if `w` or `h` is not positive; use [`BoundingBox::try_new`] for
    /// untrusted input.
    pub fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        Self::try_new(x, y, w, h).expect("valid bounding box")
    }

    pub fn try_new(x: i32, y: i32, w: i32, h: i32) -> Result<Self, DegenerateBox> {
        if w <= 0 || h <= 0 {
            return Err(DegenerateBox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Box of size `(w, h)` whose center cell is `center`.
    ///
    /// The center of a box is `(y + h / 2, x + w / 2)` with integer division,
    /// so for odd sizes it is the exact middle pixel.
    pub fn centered_at(center: Cell, size: (u32, u32)) -> Self {
        let (w, h) = (size.0 as i32, size.1 as i32);
        Self::new(center.col as i32 - w / 2, center.row as i32 - h / 2, w, h)
    }

    pub fn x(&self) -> i32 {
        self.x
    }

    pub fn y(&self) -> i32 {
        self.y
    }

    pub fn w(&self) -> i32 {
        self.w
    }

    pub fn h(&self) -> i32 {
        self.h
    }

    pub fn area(&self) -> i64 {
        self.w as i64 * self.h as i64
    }

    /// Center as (row, col) in pixel coordinates; may lie outside a frame
    /// for boxes that do.
    pub fn center(&self) -> (i32, i32) {
        (self.y + self.h / 2, self.x + self.w / 2)
    }

    pub fn center_f64(&self) -> (f64, f64) {
        (
            self.y as f64 + self.h as f64 / 2.0,
            self.x as f64 + self.w as f64 / 2.0,
        )
    }

    pub fn as_array(&self) -> [i32; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        BoundingBox::try_new(x0, y0, x1 - x0, y1 - y0).ok()
    }

    /// Intersects the box with a `width x height` frame. `None` when the box
    /// lies entirely outside.
    pub fn clip_to(&self, width: usize, height: usize) -> Option<BoundingBox> {
        self.intersection(&BoundingBox::new(0, 0, width as i32, height as i32))
    }

    pub fn contains_cell(&self, cell: Cell) -> bool {
        let (r, c) = (cell.row as i32, cell.col as i32);
        r >= self.y && r < self.y + self.h && c >= self.x && c < self.x + self.w
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.as_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x, y, w, h] = <[i32; 4]>::deserialize(deserializer)?;
        BoundingBox::try_new(x, y, w, h).map_err(serde::de::Error::custom)
    }
}

/// Intersection-over-union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Correctness threshold used for rewards and metrics; inclusive.
pub const IOU_CORRECT: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(20, 20, 5, 5)), 0.0);
        // touching edges share no area
        assert_eq!(iou(&a, &BoundingBox::new(10, 0, 10, 10)), 0.0);
        let b = BoundingBox::new(5, 0, 10, 10);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn centered_box_has_requested_center() {
        let b = BoundingBox::centered_at(Cell::new(12, 20), (8, 8));
        assert_eq!(b.center(), (12, 20));
        assert_eq!(b.as_array(), [16, 8, 8, 8]);
        let odd = BoundingBox::centered_at(Cell::new(5, 5), (11, 11));
        assert_eq!(odd.as_array(), [0, 0, 11, 11]);
    }

    #[test]
    fn clip_and_serde() {
        let b = BoundingBox::new(-3, 2, 10, 10);
        assert_eq!(b.clip_to(64, 64).unwrap().as_array(), [0, 2, 7, 10]);
        assert!(BoundingBox::new(70, 0, 5, 5).clip_to(64, 64).is_none());
        let json = serde_json::to_string(&b).unwrap();
        assert_eq!(json, "[-3,2,10,10]");
        assert_eq!(serde_json::from_str::<BoundingBox>(&json).unwrap(), b);
        assert!(serde_json::from_str::<BoundingBox>("[0,0,0,4]").is_err());
        assert!(BoundingBox::try_new(0, 0, 3, -1).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-20i32..40, -20i32..40, 1i32..30, 1i32..30)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }
}
