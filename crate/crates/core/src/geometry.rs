//! Box arithmetic, aspect ratios, IoU and the step-to-box conversion that
//! defines the continuous search space.
//!
//! Coordinates use a top-left origin with x to the right and y downward.
//! A box covers the half-open pixel ranges `[x, x + width)` and
//! `[y, y + height)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimensions must be at least 1x1, got {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("box sides must be positive, got {width}x{height}")]
    EmptyBox { width: u32, height: u32 },
    #[error("aspect ratio must be positive and finite, got {0}")]
    InvalidAspect(f64),
    #[error("cannot parse aspect ratio {0:?}")]
    AspectSyntax(String),
    #[error("search position ({x}, {y}) lies outside a {width}x{height} frame")]
    PositionOutOfBounds { x: u32, y: u32, width: u32, height: u32 },
    #[error("step {step} is outside (0, {max}] or rounds to an empty box")]
    StepOutOfRange { step: f64, max: f64 },
}

/// Width and height of an image or heatmap grid, in pixels/cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl Dims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    /// The box covering the whole frame.
    pub fn full_box(&self) -> CropBox {
        CropBox { x: 0, y: 0, width: self.width, height: self.height }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Axis-aligned crop rectangle. Serialized as `{"x","y","w","h"}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    #[serde(rename = "w")]
    pub width: u32,
    #[serde(rename = "h")]
    pub height: u32,
}

impl CropBox {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyBox { width, height });
        }
        Ok(Self { x, y, width, height })
    }

    #[inline]
    pub fn right(&self) -> u64 {
        self.x as u64 + self.width as u64
    }

    #[inline]
    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.height as u64
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0 && self.height > 0
    }

    pub fn fits(&self, dims: Dims) -> bool {
        self.is_valid() && self.right() <= dims.width as u64 && self.bottom() <= dims.height as u64
    }

    /// Overlap area in pixels.
    pub fn intersection_area(&self, other: &CropBox) -> u64 {
        let w = self.right().min(other.right()).saturating_sub(self.x.max(other.x) as u64);
        let h = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y) as u64);
        w * h
    }

    pub fn ratio(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.width as f64 / 2.0,
            self.y as f64 + self.height as f64 / 2.0,
        )
    }
}

impl fmt::Display for CropBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}x{})", self.x, self.y, self.width, self.height)
    }
}

/// Target crop aspect ratio, width divided by height.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AspectRatio(f64);

impl AspectRatio {
    pub fn new(omega: f64) -> Result<Self, GeometryError> {
        if !(omega.is_finite() && omega > 0.0) {
            return Err(GeometryError::InvalidAspect(omega));
        }
        Ok(Self(omega))
    }

    pub fn from_ratio(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::AspectSyntax(format!("{width}:{height}")));
        }
        Self::new(width as f64 / height as f64)
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.0
    }
}

impl FromStr for AspectRatio {
    type Err = GeometryError;

    /// Accepts `"W:H"` or a positive decimal.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || GeometryError::AspectSyntax(s.to_string());
        if let Some((w, h)) = s.split_once(':') {
            let w: f64 = w.trim().parse().map_err(|_| bad())?;
            let h: f64 = h.trim().parse().map_err(|_| bad())?;
            if h.is_nan() || h <= 0.0 {
                return Err(bad());
            }
            Self::new(w / h)
        } else {
            Self::new(s.parse().map_err(|_| bad())?)
        }
    }
}

impl fmt::Display for AspectRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for AspectRatio {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for AspectRatio {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => AspectRatio::new(v),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// A point of the continuous search space: top-left corner plus the free
/// side length. The other side follows from the aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub x: u32,
    pub y: u32,
    pub step: f64,
}

/// Intersection over union computed on rectangle areas.
pub fn iou(a: &CropBox, b: &CropBox) -> f64 {
    let inter = a.intersection_area(b) as f64;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() as f64 + b.area() as f64 - inter;
    inter / union
}

/// True iff every pixel of `inner` lies inside `outer`.
pub fn contains(outer: &CropBox, inner: &CropBox) -> bool {
    inner.x >= outer.x
        && inner.y >= outer.y
        && inner.right() <= outer.right()
        && inner.bottom() <= outer.bottom()
}

fn margins(x: u32, y: u32, dims: Dims) -> Result<(f64, f64), GeometryError> {
    if x >= dims.width || y >= dims.height {
        return Err(GeometryError::PositionOutOfBounds {
            x,
            y,
            width: dims.width,
            height: dims.height,
        });
    }
    Ok(((dims.width - x) as f64, (dims.height - y) as f64))
}

/// Which side the step controls at a given position.
///
/// When the remaining frame is relatively narrower than the target
/// (`margin_x / margin_y <= omega`) the step is the height and the width is
/// `step * omega`; otherwise the step is the width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSide {
    Height,
    Width,
}

pub fn step_side(x: u32, y: u32, dims: Dims, omega: AspectRatio) -> Result<StepSide, GeometryError> {
    let (mx, my) = margins(x, y, dims)?;
    Ok(if mx / my <= omega.value() { StepSide::Height } else { StepSide::Width })
}

/// Largest step for which the converted box still fits the frame.
pub fn step_max(x: u32, y: u32, dims: Dims, omega: AspectRatio) -> Result<f64, GeometryError> {
    let (mx, my) = margins(x, y, dims)?;
    let w = omega.value();
    Ok(if mx / my <= w { mx / w } else { w * my })
}

const STEP_EPS: f64 = 1e-9;

/// Converts a search point into a pixel box of ratio `omega`.
///
/// The step side is rounded half away from zero (at least one pixel); the
/// dependent side is derived from the rounded step side so it stays within
/// one rounding of the exact ratio. If that overshoots the frame by a pixel the step side
/// is reduced by one.
pub fn convert_step(point: SearchPoint, dims: Dims, omega: AspectRatio) -> Result<CropBox, GeometryError> {
    let max = step_max(point.x, point.y, dims, omega)?;
    let out_of_range = || GeometryError::StepOutOfRange { step: point.step, max };
    if point.step.is_nan() || point.step <= 0.0 || point.step > max * (1.0 + STEP_EPS) + STEP_EPS {
        return Err(out_of_range());
    }
    let (mx, my) = margins(point.x, point.y, dims)?;
    let (mx, my) = (mx as u64, my as u64);
    let w = omega.value();
    // sides are at least one pixel; the ratio bracket still holds there
    let side = |v: f64| (v.round() as u64).max(1);

    let (width, height) = match step_side(point.x, point.y, dims, omega)? {
        StepSide::Height => {
            let mut h = side(point.step).min(my);
            let mut width = side(h as f64 * w);
            if width > mx && h > 1 {
                h -= 1;
                width = side(h as f64 * w);
            }
            (width, h)
        }
        StepSide::Width => {
            let mut width = side(point.step).min(mx);
            let mut h = side(width as f64 / w);
            if h > my && width > 1 {
                width -= 1;
                h = side(width as f64 / w);
            }
            (width, h)
        }
    };
    if width > mx || height > my {
        return Err(out_of_range());
    }
    Ok(CropBox { x: point.x, y: point.y, width: width as u32, height: height as u32 })
}

/// True when the box expresses `omega` up to integer rounding: one side lies
/// between the floor and ceiling of the other side scaled by the ratio.
pub fn satisfies_aspect(b: &CropBox, omega: AspectRatio) -> bool {
    const EPS: f64 = 1e-9;
    let w = omega.value();
    let (bw, bh) = (b.width as f64, b.height as f64);
    let brackets = |actual: f64, exact: f64| (exact - EPS).floor() <= actual && actual <= (exact + EPS).ceil();
    brackets(bw, bh * w) || brackets(bh, bw / w)
}

fn round_half_away(v: f64) -> u64 {
    v.round().max(0.0) as u64
}

/// Maps a box between two grids by per-axis scaling, clamped in bounds with
/// sides of at least one cell.
pub fn scale_box(b: &CropBox, from: Dims, to: Dims) -> CropBox {
    if from == to {
        return *b;
    }
    let sx = to.width as f64 / from.width as f64;
    let sy = to.height as f64 / from.height as f64;
    let axis = |pos: u32, len: u32, scale: f64, limit: u32| {
        let limit = limit as u64;
        let p = round_half_away(pos as f64 * scale).min(limit - 1);
        let l = round_half_away(len as f64 * scale).max(1).min(limit - p);
        (p as u32, l as u32)
    };
    let (x, width) = axis(b.x, b.width, sx, to.width);
    let (y, height) = axis(b.y, b.height, sy, to.height);
    CropBox { x, y, width, height }
}

/// Shifts a box so it lies inside `dims`. Sides larger than the frame are
/// truncated.
pub fn shift_into(b: &CropBox, dims: Dims) -> CropBox {
    let width = b.width.min(dims.width);
    let height = b.height.min(dims.height);
    CropBox {
        x: b.x.min(dims.width - width),
        y: b.y.min(dims.height - height),
        width,
        height,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: u32, y: u32, w: u32, h: u32) -> CropBox {
        CropBox::new(x, y, w, h).unwrap()
    }

    fn ar(v: f64) -> AspectRatio {
        AspectRatio::new(v).unwrap()
    }

    fn pixel_iou(a: &CropBox, c: &CropBox, dims: Dims) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..dims.height {
            for x in 0..dims.width {
                let ina = x >= a.x && (x as u64) < a.right() && y >= a.y && (y as u64) < a.bottom();
                let inc = x >= c.x && (x as u64) < c.right() && y >= c.y && (y as u64) < c.bottom();
                inter += (ina && inc) as u64;
                union += (ina || inc) as u64;
            }
        }
        if union == 0 { 0.0 } else { inter as f64 / union as f64 }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0, 0, 10, 10), &b(0, 0, 10, 10)), 1.0);
        assert_eq!(iou(&b(0, 0, 10, 10), &b(100, 100, 5, 5)), 0.0);
        let dims = Dims::new(20, 10).unwrap();
        let expected = pixel_iou(&b(0, 0, 10, 10), &b(5, 0, 10, 10), dims);
        assert!((expected - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&b(0, 0, 10, 10), &b(5, 0, 10, 10)) - expected).abs() < 1e-12);
    }

    #[test]
    fn step_max_examples() {
        let d = Dims::new(100, 100).unwrap();
        assert_eq!(step_max(10, 20, d, ar(2.0)).unwrap(), 45.0);
        assert_eq!(step_max(0, 0, d, ar(1.0)).unwrap(), 100.0);
        assert_eq!(step_max(10, 20, d, ar(1.0)).unwrap(), 80.0);
    }

    #[test]
    fn convert_step_examples() {
        let d = Dims::new(100, 100).unwrap();
        let p = |x, y, step| SearchPoint { x, y, step };
        assert_eq!(convert_step(p(10, 20, 30.0), d, ar(2.0)).unwrap(), b(10, 20, 60, 30));
        assert_eq!(convert_step(p(0, 0, 100.0), d, ar(1.0)).unwrap(), b(0, 0, 100, 100));
        assert_eq!(convert_step(p(10, 20, 40.0), d, ar(0.5)).unwrap(), b(10, 20, 40, 80));
    }

    #[test]
    fn convert_step_rejects_bad_steps() {
        let d = Dims::new(100, 100).unwrap();
        let p = |step| SearchPoint { x: 10, y: 20, step };
        let b = |x, y, w, h| CropBox::new(x, y, w, h).unwrap();
        assert!(matches!(convert_step(p(46.0), d, ar(2.0)), Err(GeometryError::StepOutOfRange { .. })));
        assert!(matches!(convert_step(p(0.0), d, ar(2.0)), Err(GeometryError::StepOutOfRange { .. })));
        // sub-pixel steps still give a one-pixel side
        assert_eq!(convert_step(p(0.3), d, ar(2.0)).unwrap(), b(10, 20, 2, 1));
        assert_eq!(convert_step(p(1.0), d, ar(0.2)).unwrap(), b(10, 20, 1, 5));
        let outside = SearchPoint { x: 100, y: 0, step: 1.0 };
        assert!(matches!(convert_step(outside, d, ar(1.0)), Err(GeometryError::PositionOutOfBounds { .. })));
    }

    #[test]
    fn contains_examples() {
        assert!(contains(&b(0, 0, 10, 10), &b(2, 2, 4, 4)));
        assert!(contains(&b(3, 4, 5, 6), &b(3, 4, 5, 6)));
        assert!(!contains(&b(0, 0, 10, 10), &b(8, 8, 4, 4)));
    }

    #[test]
    fn scale_box_examples() {
        let big = Dims::new(256, 256).unwrap();
        let small = Dims::new(64, 64).unwrap();
        assert_eq!(scale_box(&b(0, 0, 256, 256), big, small), b(0, 0, 64, 64));
        assert_eq!(scale_box(&b(128, 0, 128, 256), big, small), b(32, 0, 32, 64));
        let d = Dims::new(100, 100).unwrap();
        assert_eq!(scale_box(&b(10, 10, 10, 10), d, d), b(10, 10, 10, 10));
        // tiny boxes keep one cell
        assert_eq!(scale_box(&b(255, 255, 1, 1), big, small), b(63, 63, 1, 1));
    }

    #[test]
    fn aspect_parsing() {
        assert_eq!("4:3".parse::<AspectRatio>().unwrap().value(), 4.0 / 3.0);
        assert_eq!("1.5".parse::<AspectRatio>().unwrap().value(), 1.5);
        assert!("0:3".parse::<AspectRatio>().is_err());
        assert!("3:0".parse::<AspectRatio>().is_err());
        assert!("-1".parse::<AspectRatio>().is_err());
        assert!("abc".parse::<AspectRatio>().is_err());
        let from_json: AspectRatio = serde_json::from_str("\"16:9\"").unwrap();
        assert!((from_json.value() - 16.0 / 9.0).abs() < 1e-15);
        let from_num: AspectRatio = serde_json::from_str("2.0").unwrap();
        assert_eq!(from_num.value(), 2.0);
    }

    #[test]
    fn box_json_shape() {
        let s = serde_json::to_string(&b(1, 2, 3, 4)).unwrap();
        assert_eq!(s, r#"{"x":1,"y":2,"w":3,"h":4}"#);
    }

    #[test]
    fn aspect_tolerance() {
        assert!(satisfies_aspect(&b(0, 0, 16, 9), ar(16.0 / 9.0)));
        // 17 / (16/9) = 9.56, so the height brackets the exact value
        assert!(satisfies_aspect(&b(0, 0, 17, 9), ar(16.0 / 9.0)));
        assert!(!satisfies_aspect(&b(0, 0, 20, 9), ar(16.0 / 9.0)));
        assert!(satisfies_aspect(&b(0, 0, 1, 3), ar(1.0 / 3.0)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_box(max: u32) -> impl Strategy<Value = CropBox> {
            (0..max, 0..max, 1..=max, 1..=max).prop_map(|(x, y, w, h)| CropBox { x, y, width: w, height: h })
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_bounded(a in any_box(40), c in any_box(40)) {
                let v = iou(&a, &c);
                prop_assert_eq!(v, iou(&c, &a));
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(v == 1.0, a == c);
            }

            #[test]
            fn iou_matches_pixel_count(a in any_box(32), c in any_box(32)) {
                let dims = Dims::new(64, 64).unwrap();
                prop_assert!((iou(&a, &c) - pixel_iou(&a, &c, dims)).abs() <= 1e-9);
            }

            #[test]
            fn converted_boxes_fit(w in 1u32..400, h in 1u32..400, fx in 0.0f64..1.0, fy in 0.0f64..1.0,
                                   omega in 0.05f64..20.0, fs in 0.0f64..1.0) {
                let dims = Dims::new(w, h).unwrap();
                let omega = AspectRatio::new(omega).unwrap();
                let x = ((w as f64 * fx) as u32).min(w - 1);
                let y = ((h as f64 * fy) as u32).min(h - 1);
                let max = step_max(x, y, dims, omega).unwrap();
                let step = max * fs.max(1e-6);
                if let Ok(bx) = convert_step(SearchPoint { x, y, step }, dims, omega) {
                    prop_assert!(bx.fits(dims));
                    prop_assert!(satisfies_aspect(&bx, omega));
                    // the step-controlled side follows the branch
                    match step_side(x, y, dims, omega).unwrap() {
                        StepSide::Height => prop_assert!((bx.height as f64 - step).abs() <= 1.0),
                        StepSide::Width => prop_assert!((bx.width as f64 - step).abs() <= 1.0),
                    }
                }
            }
        }
    }
}
