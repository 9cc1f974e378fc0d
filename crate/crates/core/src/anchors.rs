//! Anchor boxes over the response grid and the RPN delta encoding.

use crate::backbone::{ROW_GRID, SEARCH_SIZE, TOTAL_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::AxisBox;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    /// Aspect ratios `w / h`, one anchor each.
    pub ratios: Vec<f64>,
    /// Side of the square anchor of ratio 1, in search-patch pixels.
    pub side: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            ratios: vec![1.0 / 3.0, 0.5, 1.0, 2.0, 3.0],
            side: 64.0,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0)) || !(self.side > 0.0) {
            return Err(Error::Config("anchors need positive ratios and side".into()));
        }
        Ok(())
    }
}

/// Center of grid cell `j` (row or column) in search-patch pixels.
///
/// Continuous coordinates: the center of the RoW window `[8j, 8j+127)`, so
/// cell 8 sits on the patch center 127.5.
pub fn cell_center(j: usize) -> f64 {
    let half = (ROW_GRID / 2) as f64;
    SEARCH_SIZE as f64 / 2.0 + TOTAL_STRIDE as f64 * (j as f64 - half)
}

/// Nearest grid cell to a patch coordinate, clamped to the grid.
pub fn nearest_cell(p: f64) -> usize {
    let half = (ROW_GRID / 2) as f64;
    let j = ((p - SEARCH_SIZE as f64 / 2.0) / TOTAL_STRIDE as f64 + half).round();
    j.clamp(0.0, (ROW_GRID - 1) as f64) as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn to_box(&self) -> AxisBox {
        AxisBox {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
        }
    }
}

/// `k` anchors per cell; anchor `a` of flat cell `n` sits at index `a * 289 + n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub k: usize,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn get(&self, anchor: usize, cell: usize) -> &Anchor {
        &self.anchors[anchor * ROW_GRID * ROW_GRID + cell]
    }
}

pub fn generate_anchors(cfg: &AnchorConfig) -> AnchorSet {
    let cells = ROW_GRID * ROW_GRID;
    let mut anchors = Vec::with_capacity(cfg.ratios.len() * cells);
    for &r in &cfg.ratios {
        let (w, h) = (cfg.side * r.sqrt(), cfg.side / r.sqrt());
        for n in 0..cells {
            anchors.push(Anchor {
                cx: cell_center(n % ROW_GRID),
                cy: cell_center(n / ROW_GRID),
                w,
                h,
            });
        }
    }
    AnchorSet {
        k: cfg.ratios.len(),
        anchors,
    }
}

/// `(dx, dy, dw, dh)`: offsets relative to the anchor size, log size ratios.
pub fn encode(gt: &AxisBox, a: &Anchor) -> [f64; 4] {
    let (cx, cy) = gt.center();
    [
        (cx - a.cx) / a.w,
        (cy - a.cy) / a.h,
        (gt.width() / a.w).ln(),
        (gt.height() / a.h).ln(),
    ]
}

pub fn decode(d: &[f64; 4], a: &Anchor) -> AxisBox {
    let (cx, cy) = (a.cx + d[0] * a.w, a.cy + d[1] * a.h);
    let (w, h) = (a.w * d[2].exp(), a.h * d[3].exp());
    AxisBox {
        x0: cx - w / 2.0,
        y0: cy - h / 2.0,
        x1: cx + w / 2.0,
        y1: cy + h / 2.0,
    }
}
