//! Axis-aligned boxes in continuous image coordinates.
//!
//! Boxes are corner-encoded `(x1, y1, x2, y2)` with `x1 <= x2` and
//! `y1 <= y2`, enforced at construction. Zero-width or zero-height boxes
//! are legal values (they arise from clipping) but always score IoU 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validated axis-aligned box. Coordinates are finite and ordered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let reason = if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            Some("coordinates must be finite")
        } else if x2 < x1 {
            Some("x2 < x1")
        } else if y2 < y1 {
            Some("y2 < y1")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x1,
                y1,
                x2,
                y2,
                reason,
            }),
            None => Ok(Self { x1, y1, x2, y2 }),
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// True when the box encloses zero area (a line or a point).
    pub fn is_degenerate(&self) -> bool {
        self.area() == 0.0
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Image extent; the valid coordinate range is `[0, width] x [0, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageBounds {
    pub width: f64,
    pub height: f64,
}

impl ImageBounds {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0 {
            Ok(Self { width, height })
        } else {
            Err(Error::InvalidBounds { width, height })
        }
    }
}

/// Intersection over union. Total on valid boxes: pairs without overlap
/// score 0, and degenerate boxes never contribute intersection, so two
/// zero-area boxes yield 0 rather than 0/0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Scales a box about its own center. The result is not clipped to any
/// image; callers clip when they need pixel-valid regions. Ratios below 1
/// are rejected because every mapping region must contain its source box.
pub fn expand(b: &BBox, ratio: f64) -> Result<BBox> {
    if !ratio.is_finite() || ratio < 1.0 {
        return Err(Error::InvalidRatio(ratio));
    }
    let (cx, cy) = b.center();
    let hw = b.width() / 2.0 * ratio;
    let hh = b.height() / 2.0 * ratio;
    BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
}

/// Clamps a box to `[0, width] x [0, height]`. A box entirely outside the
/// image collapses to a zero-area box on the nearest border.
pub fn clip(b: &BBox, bounds: &ImageBounds) -> BBox {
    BBox {
        x1: b.x1.clamp(0.0, bounds.width),
        y1: b.y1.clamp(0.0, bounds.height),
        x2: b.x2.clamp(0.0, bounds.width),
        y2: b.y2.clamp(0.0, bounds.height),
    }
}
