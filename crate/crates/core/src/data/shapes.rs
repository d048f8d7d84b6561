use serde::{Deserialize, Serialize};

/// Analytic region in pixel coordinates. `angle` is a rotation in radians
/// about the shape's center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Rect {
        cx: f64,
        cy: f64,
        half_w: f64,
        half_h: f64,
        angle: f64,
    },
}

impl Shape {
    /// Whether the point `(x, y)` lies inside. Pixel `(row, col)` is tested at
    /// its center `(col + 0.5, row + 0.5)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (u, v) = to_local(x - cx, y - cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect {
                cx,
                cy,
                half_w,
                half_h,
                angle,
            } => {
                let (u, v) = to_local(x - cx, y - cy, angle);
                u.abs() <= half_w && v.abs() <= half_h
            }
        }
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        self.contains(col as f64 + 0.5, row as f64 + 0.5)
    }
}

fn to_local(dx: f64, dy: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

/// The shapes painted for one part of a generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartShapes {
    pub part_id: u8,
    pub shapes: Vec<Shape>,
}

impl PartShapes {
    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        self.shapes.iter().any(|s| s.contains_pixel(row, col))
    }
}
