//! Saliency-mask baselines: threshold the saliency map, add the layout
//! regions, take the tight bounding box and re-frame it to the target ratio.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{AspectRatio, CropBox, Dims};
use crate::scoring::{Heatmap, LayoutConstraint};

/// Saliency threshold used by both baselines.
pub const SALIENCY_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub dims: Dims,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.dims.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight bounding box of the set bits.
    pub fn bounding_box(&self) -> Option<CropBox> {
        let w = self.dims.width as usize;
        let mut bounds: Option<(u32, u32, u32, u32)> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bounds.map(|(x0, y0, x1, y1)| CropBox { x: x0, y: y0, width: x1 - x0 + 1, height: y1 - y0 + 1 })
    }
}

pub fn threshold_mask(h: &Heatmap, tau: f64) -> BinaryMask {
    BinaryMask { dims: h.dims(), bits: h.values().iter().map(|&v| v >= tau).collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Largest box of the target ratio inside the mask box.
    ShortEdge,
    /// Smallest box of the target ratio around the mask box.
    LongEdge,
}

impl FromStr for EdgeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "short_edge" | "short" => Ok(Self::ShortEdge),
            "long_edge" | "long" => Ok(Self::LongEdge),
            other => Err(format!("unknown edge mode {other:?}")),
        }
    }
}

impl fmt::Display for EdgeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ShortEdge => "short_edge",
            Self::LongEdge => "long_edge",
        })
    }
}

const EPS: f64 = 1e-9;

fn floor_eps(v: f64) -> u64 {
    (v + EPS).floor().max(0.0) as u64
}

fn ceil_eps(v: f64) -> u64 {
    (v - EPS).ceil().max(0.0) as u64
}

/// Maps a heatmap-grid box onto the image grid so it covers every image
/// pixel touched by the cells.
fn cells_to_image(b: &CropBox, from: Dims, to: Dims) -> CropBox {
    let sx = to.width as f64 / from.width as f64;
    let sy = to.height as f64 / from.height as f64;
    let x0 = floor_eps(b.x as f64 * sx).min(to.width as u64 - 1);
    let y0 = floor_eps(b.y as f64 * sy).min(to.height as u64 - 1);
    let x1 = ceil_eps(b.right() as f64 * sx).clamp(x0 + 1, to.width as u64);
    let y1 = ceil_eps(b.bottom() as f64 * sy).clamp(y0 + 1, to.height as u64);
    CropBox { x: x0 as u32, y: y0 as u32, width: (x1 - x0) as u32, height: (y1 - y0) as u32 }
}

fn union(a: CropBox, b: CropBox) -> CropBox {
    let x0 = a.x.min(b.x);
    let y0 = a.y.min(b.y);
    let x1 = a.right().max(b.right());
    let y1 = a.bottom().max(b.bottom());
    CropBox { x: x0, y: y0, width: (x1 - x0 as u64) as u32, height: (y1 - y0 as u64) as u32 }
}

/// Tight box of the thresholded saliency and the inclusion regions, in image
/// coordinates. The whole image when both are empty.
pub fn mask_bounding_box(saliency: &Heatmap, layout: Option<&LayoutConstraint>, image_dims: Dims) -> CropBox {
    let sal = threshold_mask(saliency, SALIENCY_THRESHOLD)
        .bounding_box()
        .map(|b| cells_to_image(&b, saliency.dims(), image_dims));
    let regions = layout.into_iter().flat_map(|l| l.inclusion_boxes().copied());
    sal.into_iter().chain(regions).reduce(union).unwrap_or_else(|| image_dims.full_box())
}

/// Box sides of ratio `omega` fitted to a `w x h` reference.
fn reframe_size(w: u32, h: u32, omega: f64, mode: EdgeMode) -> (u64, u64) {
    let (w, h) = (w as f64, h as f64);
    let keep_width = match mode {
        EdgeMode::ShortEdge => w <= h * omega,
        EdgeMode::LongEdge => w >= h * omega,
    };
    let derive = |v: f64| match mode {
        EdgeMode::ShortEdge => floor_eps(v),
        EdgeMode::LongEdge => ceil_eps(v),
    };
    let (cw, ch) = if keep_width { (w as u64, derive(w / omega)) } else { (derive(h * omega), h as u64) };
    // rounding down may empty the derived side
    if cw == 0 {
        (1, ((1.0 / omega).round() as u64).max(1))
    } else if ch == 0 {
        ((omega.round() as u64).max(1), 1)
    } else {
        (cw, ch)
    }
}

/// Largest box of ratio `omega` inside the frame.
fn fit_frame(dims: Dims, omega: f64) -> (u64, u64) {
    let (fw, fh) = (dims.width as f64, dims.height as f64);
    if fw <= fh * omega {
        (dims.width as u64, floor_eps(fw / omega).clamp(1, dims.height as u64))
    } else {
        (floor_eps(fh * omega).clamp(1, dims.width as u64), dims.height as u64)
    }
}

/// Baseline crop: re-frames the mask box to `omega`, centers it on the mask
/// box, shrinks it to the frame if needed and shifts it into bounds.
pub fn baseline_crop(
    saliency: &Heatmap,
    layout: Option<&LayoutConstraint>,
    omega: AspectRatio,
    mode: EdgeMode,
    image_dims: Dims,
) -> CropBox {
    let mask = mask_bounding_box(saliency, layout, image_dims);
    reframe(&mask, omega, mode, image_dims)
}

/// The re-framing step on its own, for a known mask box.
pub fn reframe(mask: &CropBox, omega: AspectRatio, mode: EdgeMode, image_dims: Dims) -> CropBox {
    let w = omega.value();
    let (mut cw, mut ch) = reframe_size(mask.width, mask.height, w, mode);
    if cw > image_dims.width as u64 || ch > image_dims.height as u64 {
        (cw, ch) = fit_frame(image_dims, w);
    }
    let (cx, cy) = mask.center();
    let place = |center: f64, len: u64, limit: u32| -> u32 {
        let start = (center - len as f64 / 2.0 + EPS).floor().max(0.0) as u64;
        start.min(limit as u64 - len) as u32
    };
    CropBox {
        x: place(cx, cw, image_dims.width),
        y: place(cy, ch, image_dims.height),
        width: cw as u32,
        height: ch as u32,
    }
}
