//! Benchmark construction from expert crop annotations: pair every ground
//! truth box with each layout template it fully contains.

use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{contains, AspectRatio, CropBox, Dims};
use crate::heatmaps::AnnotationRecord;
use crate::scoring::LayoutConstraint;

/// Thickness of the side strips as a fraction of the perpendicular side.
pub const STRIP_FRACTION: f64 = 0.15;
pub const TEMPLATE_COUNT: usize = 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed benchmark line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("tuple {id} violates an invariant: {msg}")]
    Invariant { id: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One benchmark item. The aspect ratio is kept as the exact reduced
/// fraction of the ground-truth sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkTuple {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub layout: CropBox,
    pub omega_num: u32,
    pub omega_den: u32,
    pub gt: CropBox,
}

impl BenchmarkTuple {
    pub fn dims(&self) -> Dims {
        Dims { width: self.width, height: self.height }
    }

    pub fn omega(&self) -> AspectRatio {
        AspectRatio::from_ratio(self.omega_num, self.omega_den).expect("validated tuple has a positive ratio")
    }

    pub fn layout_constraint(&self) -> LayoutConstraint {
        LayoutConstraint::single(self.layout)
    }

    /// Checks containment, bounds and the exact ratio.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |msg: &str| DatasetError::Invariant { id: self.image_id.clone(), msg: msg.into() };
        let dims = Dims::new(self.width, self.height).map_err(|_| fail("empty image"))?;
        if !self.gt.fits(dims) || !self.layout.fits(dims) {
            return Err(fail("box outside image"));
        }
        if !contains(&self.gt, &self.layout) {
            return Err(fail("ground truth does not contain the layout"));
        }
        if self.omega_den == 0
            || self.gt.width as u64 * self.omega_den as u64 != self.gt.height as u64 * self.omega_num as u64
        {
            return Err(fail("aspect ratio differs from the ground truth"));
        }
        Ok(())
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn reduced_ratio(w: u32, h: u32) -> (u32, u32) {
    let g = gcd(w, h).max(1);
    (w / g, h / g)
}

/// The eight layout templates: top, bottom, left and right strips, then the
/// four quadrants around the center point (top-left, top-right,
/// bottom-left, bottom-right).
pub fn layout_templates(dims: Dims) -> [CropBox; TEMPLATE_COUNT] {
    let Dims { width: w, height: h } = dims;
    let strip = |side: u32| ((STRIP_FRACTION * side as f64).round() as u32).clamp(1, side);
    let (th, tw) = (strip(h), strip(w));
    let (qw, qh) = (w.div_ceil(2), h.div_ceil(2));
    [
        CropBox { x: 0, y: 0, width: w, height: th },
        CropBox { x: 0, y: h - th, width: w, height: th },
        CropBox { x: 0, y: 0, width: tw, height: h },
        CropBox { x: w - tw, y: 0, width: tw, height: h },
        CropBox { x: 0, y: 0, width: qw, height: qh },
        CropBox { x: w - qw, y: 0, width: qw, height: qh },
        CropBox { x: 0, y: h - qh, width: qw, height: qh },
        CropBox { x: w - qw, y: h - qh, width: qw, height: qh },
    ]
}

fn record_tuples(rec: &AnnotationRecord) -> Vec<BenchmarkTuple> {
    let templates = layout_templates(rec.dims());
    let mut out = Vec::new();
    for gt in &rec.gt_boxes {
        let (omega_num, omega_den) = reduced_ratio(gt.width, gt.height);
        for t in templates.iter().filter(|t| contains(gt, t)) {
            out.push(BenchmarkTuple {
                image_id: rec.image_id.clone(),
                width: rec.width,
                height: rec.height,
                layout: *t,
                omega_num,
                omega_den,
                gt: *gt,
            });
        }
    }
    out
}

/// Emits tuples in record order, then box order, then template order.
pub fn build_benchmark(records: &[AnnotationRecord]) -> Vec<BenchmarkTuple> {
    records.par_iter().map(record_tuples).collect::<Vec<_>>().into_iter().flatten().collect()
}

pub fn write_benchmark<W: Write>(tuples: &[BenchmarkTuple], mut out: W) -> Result<(), DatasetError> {
    for t in tuples {
        serde_json::to_writer(&mut out, t).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads benchmark JSONL and validates every tuple.
pub fn read_benchmark<R: Read>(input: R) -> Result<Vec<BenchmarkTuple>, DatasetError> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: BenchmarkTuple =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed { line: n + 1, msg: e.to_string() })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}
