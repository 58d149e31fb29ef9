//! Axis-aligned box arithmetic.
//!
//! Boxes are stored as `(x, y, w, h)`, the COCO wire layout, and converted to
//! corner form on demand. Every operation here is pure.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in pixel units. Width and height are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

/// Rejected box coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct InvalidBox {
    pub coords: [f64; 4],
}

impl fmt::Display for InvalidBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x, y, w, h] = self.coords;
        write!(
            f,
            "invalid box [{x}, {y}, {w}, {h}]: coordinates must be finite with w > 0 and h > 0"
        )
    }
}

impl std::error::Error for InvalidBox {}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, InvalidBox> {
        let ok = x.is_finite()
            && y.is_finite()
            && w.is_finite()
            && h.is_finite()
            && w > 0.0
            && h > 0.0
            && (x + w).is_finite()
            && (y + h).is_finite();
        if ok {
            Ok(BBox { x, y, w, h })
        } else {
            Err(InvalidBox {
                coords: [x, y, w, h],
            })
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn width(&self) -> f64 {
        self.w
    }

    pub fn height(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Same box shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self, InvalidBox> {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Same box with every coordinate multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self, InvalidBox> {
        BBox::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = InvalidBox;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        BBox::try_from(v).map_err(serde::de::Error::custom)
    }
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

/// Intersection over union. Identical boxes give exactly 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between the closest points of two rectangles.
/// Overlapping or touching boxes are at distance 0.
pub fn min_distance(a: &BBox, b: &BBox) -> f64 {
    let dx = (b.x - a.right()).max(a.x - b.right()).max(0.0);
    let dy = (b.y - a.bottom()).max(a.y - b.bottom()).max(0.0);
    dx.hypot(dy)
}

/// Area of the geometric union of `boxes`, overlaps counted once.
pub fn union_area(boxes: &[BBox]) -> f64 {
    Coverage::new(boxes, &[]).union_area()
}

/// Jaccard index between the region covered by `a` and the region covered by `b`.
///
/// `None` when both sets are empty.
pub fn region_jaccard(a: &[BBox], b: &[BBox]) -> Option<f64> {
    if a.is_empty() && b.is_empty() {
        return None;
    }
    let cov = Coverage::new(a, b);
    let (inter, union) = cov.intersection_and_union();
    if union == 0.0 {
        return None;
    }
    Some((inter / union).clamp(0.0, 1.0))
}

/// Coordinate-compressed occupancy grid for up to two box sets.
struct Coverage {
    xs: Vec<f64>,
    ys: Vec<f64>,
    // counts[i * ny + j] for cell [xs[i], xs[i+1]) x [ys[j], ys[j+1])
    first: Vec<i32>,
    second: Vec<i32>,
}

impl Coverage {
    fn new(first: &[BBox], second: &[BBox]) -> Self {
        let mut xs: Vec<f64> = Vec::with_capacity(2 * (first.len() + second.len()));
        let mut ys: Vec<f64> = Vec::with_capacity(xs.capacity());
        for b in first.iter().chain(second) {
            xs.push(b.x);
            xs.push(b.right());
            ys.push(b.y);
            ys.push(b.bottom());
        }
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        ys.sort_by(f64::total_cmp);
        ys.dedup();

        let nx = xs.len().saturating_sub(1);
        let ny = ys.len().saturating_sub(1);
        let first = Self::rasterize(first, &xs, &ys, nx, ny);
        let second = Self::rasterize(second, &xs, &ys, nx, ny);
        Coverage {
            xs,
            ys,
            first,
            second,
        }
    }

    fn rasterize(boxes: &[BBox], xs: &[f64], ys: &[f64], nx: usize, ny: usize) -> Vec<i32> {
        if nx == 0 || ny == 0 {
            return Vec::new();
        }
        // 2D difference array with one guard row/column.
        let stride = ny + 1;
        let mut diff = vec![0i32; (nx + 1) * stride];
        let index = |edges: &[f64], v: f64| edges.partition_point(|&e| e < v);
        for b in boxes {
            let (x0, x1) = (index(xs, b.x), index(xs, b.right()));
            let (y0, y1) = (index(ys, b.y), index(ys, b.bottom()));
            diff[x0 * stride + y0] += 1;
            diff[x1 * stride + y0] -= 1;
            diff[x0 * stride + y1] -= 1;
            diff[x1 * stride + y1] += 1;
        }
        for i in 0..=nx {
            for j in 1..=ny {
                diff[i * stride + j] += diff[i * stride + j - 1];
            }
        }
        for i in 1..=nx {
            for j in 0..=ny {
                diff[i * stride + j] += diff[(i - 1) * stride + j];
            }
        }
        let mut counts = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            counts.extend_from_slice(&diff[i * stride..i * stride + ny]);
        }
        counts
    }

    fn cells(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let ny = self.ys.len().saturating_sub(1);
        self.xs.windows(2).enumerate().flat_map(move |(i, xw)| {
            self.ys
                .windows(2)
                .enumerate()
                .map(move |(j, yw)| (i * ny + j, (xw[1] - xw[0]) * (yw[1] - yw[0])))
        })
    }

    fn union_area(&self) -> f64 {
        if self.first.is_empty() {
            return 0.0;
        }
        self.cells()
            .filter(|&(k, _)| self.first[k] > 0)
            .map(|(_, a)| a)
            .sum()
    }

    fn intersection_and_union(&self) -> (f64, f64) {
        if self.first.is_empty() {
            return (0.0, 0.0);
        }
        let mut inter = 0.0;
        let mut union = 0.0;
        for (k, a) in self.cells() {
            let (p, q) = (self.first[k] > 0, self.second[k] > 0);
            if p && q {
                inter += a;
            }
            if p || q {
                union += a;
            }
        }
        (inter, union)
    }
}
