//! Grid-point heatmap codec.
//!
//! A box is represented by nine points on its 3x3 lattice (corners, edge
//! midpoints, center). Each point gets one heatmap channel over the
//! *mapping region*: the proposal expanded by a stage's mapping ratio.
//! Extending the region beyond the proposal is what lets the decoder place
//! points outside the proposal itself, so a badly localized proposal can
//! still be pulled onto the object.
//!
//! Cell coordinates are continuous; integer cells use the half-open
//! convention `[i, i+1)` with the far image edge folded into the last cell
//! (a point exactly on the region's far border is representable).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{expand, BBox};

/// Number of grid points per box; fixed 3x3.
pub const N_POINTS: usize = 9;

/// Indices of the points on each side of the lattice, in the canonical
/// row-major point order (top row, middle row, bottom row).
pub const GROUP_LEFT: [usize; 3] = [0, 3, 6];
pub const GROUP_RIGHT: [usize; 3] = [2, 5, 8];
pub const GROUP_TOP: [usize; 3] = [0, 1, 2];
pub const GROUP_BOTTOM: [usize; 3] = [6, 7, 8];

/// Heatmap geometry: point count and square side length in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    /// Stored for forward compatibility; only 9 is supported.
    pub n_points: usize,
    /// Cells per heatmap side.
    pub resolution: usize,
}

impl GridLayout {
    pub fn new(n_points: usize, resolution: usize) -> Result<Self> {
        if n_points != N_POINTS {
            return Err(Error::InvalidLayout(format!(
                "n_points must be {N_POINTS}, got {n_points}"
            )));
        }
        if resolution < 4 {
            return Err(Error::InvalidLayout(format!(
                "resolution must be >= 4, got {resolution}"
            )));
        }
        Ok(Self {
            n_points,
            resolution,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.n_points, self.resolution).map(|_| ())
    }
}

impl Default for GridLayout {
    fn default() -> Self {
        Self {
            n_points: N_POINTS,
            resolution: 28,
        }
    }
}

/// The nine lattice points of a box in canonical row-major order.
pub fn grid_points(b: &BBox) -> [(f64, f64); N_POINTS] {
    let (cx, cy) = b.center();
    let xs = [b.x1(), cx, b.x2()];
    let ys = [b.y1(), cy, b.y2()];
    let mut out = [(0.0, 0.0); N_POINTS];
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            out[row * 3 + col] = (x, y);
        }
    }
    out
}

/// Region a heatmap covers: the proposal expanded about its center.
pub fn mapping_region(proposal: &BBox, ratio: f64) -> Result<BBox> {
    if proposal.is_degenerate() {
        return Err(Error::ZeroAreaProposal);
    }
    expand(proposal, ratio)
}

/// Image point to continuous cell coordinates over the mapping region.
pub fn image_to_cell(
    point: (f64, f64),
    proposal: &BBox,
    ratio: f64,
    layout: &GridLayout,
) -> Result<(f64, f64)> {
    let region = mapping_region(proposal, ratio)?;
    let s = layout.resolution as f64;
    Ok((
        (point.0 - region.x1()) / region.width() * s,
        (point.1 - region.y1()) / region.height() * s,
    ))
}

/// Continuous cell coordinates back to image space; exact inverse of
/// `image_to_cell` up to rounding.
pub fn cell_to_image(
    cell: (f64, f64),
    proposal: &BBox,
    ratio: f64,
    layout: &GridLayout,
) -> Result<(f64, f64)> {
    let region = mapping_region(proposal, ratio)?;
    let s = layout.resolution as f64;
    Ok((
        cell.0 / s * region.width() + region.x1(),
        cell.1 / s * region.height() + region.y1(),
    ))
}

/// Integer cell for continuous cell coordinates, or `None` when the point
/// is not representable on the map. The far edge (`cc == S`) belongs to
/// the last cell.
pub fn integer_cell(cc: (f64, f64), resolution: usize) -> Option<(usize, usize)> {
    let s = resolution as f64;
    let fold = |c: f64| -> Option<usize> {
        if c >= 0.0 && c <= s {
            Some((c.floor() as usize).min(resolution - 1))
        } else {
            None
        }
    };
    Some((fold(cc.0)?, fold(cc.1)?))
}

/// One grid point's heatmap. `out_of_region` marks channels whose point
/// was not representable; losses mask them out.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapChannel {
    pub values: Vec<f64>,
    pub out_of_region: bool,
}

/// Nine heatmap channels over one mapping region, together with the
/// proposal and ratio that define the region.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    proposal: BBox,
    ratio: f64,
    resolution: usize,
    channels: Vec<HeatmapChannel>,
}

impl HeatmapSet {
    /// All-zero channels; fails on zero-area proposals and bad ratios.
    pub fn new_zeroed(proposal: &BBox, ratio: f64, layout: &GridLayout) -> Result<Self> {
        layout.validate()?;
        mapping_region(proposal, ratio)?;
        let s = layout.resolution;
        let channels = (0..layout.n_points)
            .map(|_| HeatmapChannel {
                values: vec![0.0; s * s],
                out_of_region: false,
            })
            .collect();
        Ok(Self {
            proposal: *proposal,
            ratio,
            resolution: s,
            channels,
        })
    }

    pub fn proposal(&self) -> &BBox {
        &self.proposal
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn region(&self) -> BBox {
        // Cannot fail: checked at construction.
        mapping_region(&self.proposal, self.ratio).expect("validated at construction")
    }

    pub fn channels(&self) -> &[HeatmapChannel] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [HeatmapChannel] {
        &mut self.channels
    }

    pub fn idx(&self, cx: usize, cy: usize) -> usize {
        debug_assert!(cx < self.resolution && cy < self.resolution);
        cy * self.resolution + cx
    }

    pub fn value(&self, channel: usize, cx: usize, cy: usize) -> f64 {
        self.channels[channel].values[self.idx(cx, cy)]
    }

    /// Producers call this after filling values by hand.
    pub fn validate_values(&self) -> Result<()> {
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.values.len() != self.resolution * self.resolution {
                return Err(Error::InvalidHeatmap(format!(
                    "channel {i} has {} cells, expected {}",
                    ch.values.len(),
                    self.resolution * self.resolution
                )));
            }
            if let Some(v) = ch
                .values
                .iter()
                .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
            {
                return Err(Error::InvalidHeatmap(format!(
                    "channel {i} holds value {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Supervision target: for each grid point of `gt` the containing cell and
/// its Chebyshev-radius-1 neighbors (clipped to the map) are labeled 1.0.
/// Points outside the region produce an all-zero channel flagged
/// `out_of_region`.
pub fn encode_target(
    gt: &BBox,
    proposal: &BBox,
    ratio: f64,
    layout: &GridLayout,
) -> Result<HeatmapSet> {
    if gt.is_degenerate() {
        return Err(Error::InvalidHeatmap(
            "zero-area target box has no grid extent".into(),
        ));
    }
    let mut maps = HeatmapSet::new_zeroed(proposal, ratio, layout)?;
    let s = layout.resolution;
    for (ch_idx, point) in grid_points(gt).iter().enumerate() {
        let cc = image_to_cell(*point, proposal, ratio, layout)?;
        match integer_cell(cc, s) {
            Some((cx, cy)) => {
                let x_lo = cx.saturating_sub(1);
                let y_lo = cy.saturating_sub(1);
                let x_hi = (cx + 1).min(s - 1);
                let y_hi = (cy + 1).min(s - 1);
                for y in y_lo..=y_hi {
                    for x in x_lo..=x_hi {
                        let at = y * s + x;
                        maps.channels[ch_idx].values[at] = 1.0;
                    }
                }
            }
            None => maps.channels[ch_idx].out_of_region = true,
        }
    }
    Ok(maps)
}

/// A decoded grid point in image coordinates with its peak confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedPoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Decoded points in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPoints {
    pub points: Vec<DecodedPoint>,
}

/// Argmax decode. Ties go to the smallest row-major index, so an all-zero
/// or uniform channel decodes to cell (0,0) with that uniform confidence.
pub fn decode_points(maps: &HeatmapSet) -> DecodedPoints {
    let s = maps.resolution();
    let layout = GridLayout {
        n_points: maps.channels().len(),
        resolution: s,
    };
    let points = maps
        .channels()
        .iter()
        .map(|ch| {
            let mut best = 0usize;
            let mut best_v = ch.values[0];
            for (i, &v) in ch.values.iter().enumerate().skip(1) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            let (cx, cy) = (best % s, best / s);
            let (x, y) = cell_to_image(
                (cx as f64 + 0.5, cy as f64 + 0.5),
                &maps.proposal,
                maps.ratio,
                &layout,
            )
            .expect("validated at construction");
            DecodedPoint {
                x,
                y,
                confidence: best_v,
            }
        })
        .collect();
    DecodedPoints { points }
}

/// Fuses nine decoded points into a box: each edge is the
/// confidence-weighted mean of its three points' relevant coordinate.
/// A side whose three confidences sum to zero carries no information and
/// the box is undecodable. Inverted edges (possible with skewed
/// confidences) are swapped rather than rejected.
pub fn points_to_box(decoded: &DecodedPoints) -> Result<BBox> {
    assert_eq!(
        decoded.points.len(),
        N_POINTS,
        "decoded point count must be {N_POINTS}"
    );
    let side = |group: &[usize; 3], horizontal: bool, name: &'static str| -> Result<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in group {
            let p = &decoded.points[i];
            let coord = if horizontal { p.x } else { p.y };
            num += p.confidence * coord;
            den += p.confidence;
        }
        if den <= 0.0 {
            Err(Error::UndecodableBox { side: name })
        } else {
            Ok(num / den)
        }
    };
    let mut x1 = side(&GROUP_LEFT, true, "left")?;
    let mut x2 = side(&GROUP_RIGHT, true, "right")?;
    let mut y1 = side(&GROUP_TOP, false, "top")?;
    let mut y2 = side(&GROUP_BOTTOM, false, "bottom")?;
    if x1 > x2 {
        std::mem::swap(&mut x1, &mut x2);
    }
    if y1 > y2 {
        std::mem::swap(&mut y1, &mut y2);
    }
    BBox::new(x1, y1, x2, y2)
}
