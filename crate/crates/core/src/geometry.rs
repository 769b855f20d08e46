use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box given by center and size, in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Axis-aligned box given by its corners `(x1, y1)`–`(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_corners(self) -> CornerBox {
        CornerBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_well_formed(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn to_center(self) -> CenterBox {
        CenterBox {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.width(),
            h: self.height(),
        }
    }
}

impl From<[f64; 4]> for CornerBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<CornerBox> for [f64; 4] {
    fn from(b: CornerBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection over union with continuous coordinates.
pub fn iou(a: &CornerBox, b: &CornerBox) -> Result<f64> {
    if !a.is_well_formed() || !b.is_well_formed() {
        return Err(Error::DegenerateBox);
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = CornerBox::new(0.0, 0.0, 2.0, 2.0);
        let b = CornerBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = CornerBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        // touching edges share no area
        let touch = CornerBox::new(2.0, 0.0, 3.0, 2.0);
        assert_eq!(iou(&a, &touch).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = CornerBox::new(0.0, 0.0, 0.0, 1.0);
        let b = CornerBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(iou(&a, &b), Err(Error::DegenerateBox)));
    }

    #[test]
    fn center_corner_round_trip() {
        let c = CenterBox::new(0.5, 0.25, 0.2, 0.1);
        let back = c.to_corners().to_center();
        assert!((back.cx - c.cx).abs() < 1e-15 && (back.w - c.w).abs() < 1e-15);
        assert!((back.cy - c.cy).abs() < 1e-15 && (back.h - c.h).abs() < 1e-15);
    }
}
