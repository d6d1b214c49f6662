//! Normalized bounding boxes and the overlap primitives used by matching,
//! the regression losses and evaluation.
//!
//! Boxes are stored center-form ([`BoxN`]) in fractions of the image size.
//! Area arithmetic runs on corner form ([`BoxCorners`]). Corner boxes are not
//! clamped on construction so that overlap math also works for boxes that
//! spill past the image border; call [`BoxCorners::clamp_unit`] when a clamped
//! box is wanted.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{KadError, Result};

/// Side lengths at or below this are rejected as degenerate.
pub const MIN_SIDE: f64 = 1e-8;

/// Center-form normalized box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-form box, `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCorners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxN {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoxN { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let BoxN { cx, cy, w, h } = *self;
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(KadError::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if w <= MIN_SIDE || h <= MIN_SIDE {
            return Err(KadError::InvalidBox(format!(
                "nonpositive size w={w} h={h}"
            )));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) || w > 1.0 || h > 1.0 {
            return Err(KadError::InvalidBox(format!(
                "coordinates outside the unit square: {self:?}"
            )));
        }
        Ok(())
    }

    /// Corner form, without clamping.
    pub fn to_corners(&self) -> BoxCorners {
        BoxCorners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl BoxCorners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoxCorners { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(KadError::InvalidBox(format!("non-finite coordinate in {b:?}")));
        }
        if x2 - x1 <= MIN_SIDE || y2 - y1 <= MIN_SIDE {
            return Err(KadError::InvalidBox(format!("empty or inverted corners {b:?}")));
        }
        Ok(b)
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

    pub fn clamp_unit(&self) -> BoxCorners {
        BoxCorners {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }

    /// Center form. Fails if the result violates the [`BoxN`] invariants.
    pub fn to_center(&self) -> Result<BoxN> {
        BoxN::new(
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.width(),
            self.height(),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoxCorners {
        BoxCorners {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

/// `box_convert`: center form to corner form.
pub fn box_convert(b: &BoxN) -> Result<BoxCorners> {
    b.validate()?;
    Ok(b.to_corners())
}

fn intersection_area(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

pub fn iou(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = cw * ch;
    inter / union - (enclosing - union) / enclosing
}

/// `1 - GIoU`, in `[0, 2]`.
pub fn giou_loss(a: &BoxCorners, b: &BoxCorners) -> f64 {
    if a == b {
        return 0.0;
    }
    (1.0 - giou(a, b)).clamp(0.0, 2.0)
}

/// L1 distance in `(cx, cy, w, h)` space.
pub fn box_l1(a: &BoxN, b: &BoxN) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Differentiable counterparts over tensors whose last dimension holds four
/// box coordinates. Shapes broadcast elementwise, reductions are over the
/// last dimension only.
pub mod tensor {
    use super::*;

    type CResult<T> = candle_core::Result<T>;

    fn coord(t: &Tensor, i: usize) -> CResult<Tensor> {
        t.narrow(D::Minus1, i, 1)?.squeeze(D::Minus1)
    }

    /// `(cx, cy, w, h)` to `(x1, y1, x2, y2)`.
    pub fn center_to_corners(b: &Tensor) -> CResult<Tensor> {
        let (cx, cy, w, h) = (coord(b, 0)?, coord(b, 1)?, coord(b, 2)?, coord(b, 3)?);
        let hw = (w * 0.5)?;
        let hh = (h * 0.5)?;
        Tensor::stack(
            &[(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?],
            D::Minus1,
        )
    }

    /// `1 - GIoU` on corner-form boxes.
    pub fn giou_loss_corners(a: &Tensor, b: &Tensor) -> CResult<Tensor> {
        let (ax1, ay1, ax2, ay2) = (coord(a, 0)?, coord(a, 1)?, coord(a, 2)?, coord(a, 3)?);
        let (bx1, by1, bx2, by2) = (coord(b, 0)?, coord(b, 1)?, coord(b, 2)?, coord(b, 3)?);
        let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
        let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
        let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
        let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
        let inter = (iw * ih)?;
        let union = ((area_a + area_b)? - &inter)?;
        let cw = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
        let ch = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
        let enclosing = (cw * ch)?;
        let iou = (&inter / &union)?;
        let penalty = ((&enclosing - &union)? / &enclosing)?;
        1.0 - (iou - penalty)?
    }

    /// `1 - GIoU` on center-form boxes.
    pub fn giou_loss(a: &Tensor, b: &Tensor) -> CResult<Tensor> {
        giou_loss_corners(&center_to_corners(a)?, &center_to_corners(b)?)
    }

    pub fn box_l1(a: &Tensor, b: &Tensor) -> CResult<Tensor> {
        (a - b)?.abs()?.sum(D::Minus1)
    }
}
