//! Heatmap scores, layout recall and the combined crop objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{scale_box, CropBox, Dims};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("heatmap has {got} values but {dims} needs {expected}")]
    ValueCount { dims: Dims, expected: usize, got: usize },
    #[error("heatmap value {value} at index {index} is outside [0, 1]")]
    ValueRange { index: usize, value: f64 },
    #[error("box {bx} exceeds {dims}")]
    OutOfBounds { bx: CropBox, dims: Dims },
    #[error("layout constraint needs at least one region")]
    EmptyLayout,
    #[error("layout region weight must be finite and non-zero, got {0}")]
    BadWeight(f64),
    #[error("invalid layout region {0}")]
    BadRegion(CropBox),
}

/// Aesthetic field: one value in `[0, 1]` per cell, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    dims: Dims,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self, ScoringError> {
        let expected = dims.area() as usize;
        if values.len() != expected {
            return Err(ScoringError::ValueCount { dims, expected, got: values.len() });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ScoringError::ValueRange { index, value });
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(u32, u32) -> f64) -> Result<Self, ScoringError> {
        let mut values = Vec::with_capacity(dims.area() as usize);
        for y in 0..dims.height {
            for x in 0..dims.width {
                values.push(f(x, y));
            }
        }
        Self::new(dims, values)
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self, ScoringError> {
        Self::new(dims, vec![value; dims.area() as usize])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.dims.width as usize + x as usize]
    }

    /// Area-weighted resampling onto another grid.
    pub fn resample(&self, to: Dims) -> Heatmap {
        if to == self.dims {
            return self.clone();
        }
        let values = resample_area(&self.values, self.dims, to);
        Heatmap { dims: to, values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    /// Downsamples so neither side exceeds `max_side`, keeping the aspect.
    pub fn fit_within(&self, max_side: u32) -> Heatmap {
        let Dims { width, height } = self.dims;
        if width <= max_side && height <= max_side {
            return self.clone();
        }
        let scale = max_side as f64 / width.max(height) as f64;
        let to = Dims {
            width: ((width as f64 * scale).round() as u32).clamp(1, max_side),
            height: ((height as f64 * scale).round() as u32).clamp(1, max_side),
        };
        self.resample(to)
    }
}

/// Averages a row-major grid onto `to`, weighting each source cell by its
/// overlap with the destination cell.
pub(crate) fn resample_area(src: &[f64], from: Dims, to: Dims) -> Vec<f64> {
    let spans = |n_from: u32, n_to: u32| -> Vec<Vec<(usize, f64)>> {
        let scale = n_from as f64 / n_to as f64;
        (0..n_to)
            .map(|i| {
                let lo = i as f64 * scale;
                let hi = (i + 1) as f64 * scale;
                let mut parts = Vec::new();
                let mut s = lo.floor() as usize;
                while (s as f64) < hi && s < n_from as usize {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    if overlap > 0.0 {
                        parts.push((s, overlap));
                    }
                    s += 1;
                }
                parts
            })
            .collect()
    };
    let xs = spans(from.width, to.width);
    let ys = spans(from.height, to.height);
    let fw = from.width as usize;
    let mut out = Vec::with_capacity(to.area() as usize);
    for yparts in &ys {
        for xparts in &xs {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for &(sy, wy) in yparts {
                for &(sx, wx) in xparts {
                    acc += src[sy * fw + sx] * wx * wy;
                    wsum += wx * wy;
                }
            }
            out.push(if wsum > 0.0 { acc / wsum } else { 0.0 });
        }
    }
    out
}

/// Summed-area table over a heatmap for constant-time box sums.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    dims: Dims,
    prefix: Vec<f64>,
    total: f64,
}

impl IntegralImage {
    pub fn new(h: &Heatmap) -> Self {
        Self::from_grid(h.dims(), h.values())
    }

    pub(crate) fn from_grid(dims: Dims, values: &[f64]) -> Self {
        let (w, hgt) = (dims.width as usize, dims.height as usize);
        let stride = w + 1;
        let mut prefix = vec![0.0; stride * (hgt + 1)];
        for y in 0..hgt {
            let mut row = 0.0;
            for x in 0..w {
                row += values[y * w + x];
                prefix[(y + 1) * stride + x + 1] = prefix[y * stride + x + 1] + row;
            }
        }
        let total = prefix[hgt * stride + w];
        Self { dims, prefix, total }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Inclusive prefix sum of the cells strictly above and left of `(x, y)`.
    #[inline]
    pub fn prefix(&self, x: u32, y: u32) -> f64 {
        self.prefix[y as usize * (self.dims.width as usize + 1) + x as usize]
    }

    fn check(&self, b: &CropBox) -> Result<(), ScoringError> {
        if b.fits(self.dims) {
            Ok(())
        } else {
            Err(ScoringError::OutOfBounds { bx: *b, dims: self.dims })
        }
    }

    pub fn region_sum(&self, b: &CropBox) -> Result<f64, ScoringError> {
        self.check(b)?;
        let (x0, y0) = (b.x, b.y);
        let (x1, y1) = (b.right() as u32, b.bottom() as u32);
        Ok(self.prefix(x1, y1) - self.prefix(x0, y1) - self.prefix(x1, y0) + self.prefix(x0, y0))
    }

    /// Heatmap mass inside the box.
    pub fn v_roi(&self, b: &CropBox) -> Result<f64, ScoringError> {
        self.region_sum(b)
    }

    /// Complement mass `sum(1 - z)` over the cells outside the box.
    pub fn v_rod(&self, b: &CropBox) -> Result<f64, ScoringError> {
        let inside = self.region_sum(b)?;
        let outside_cells = (self.dims.area() - b.area()) as f64;
        Ok(outside_cells - (self.total - inside))
    }

    pub fn v_aesth(&self, b: &CropBox) -> Result<f64, ScoringError> {
        Ok(self.v_roi(b)? + self.v_rod(b)?)
    }

    /// `2 S - |B| + (HW - total)`, algebraically equal to [`Self::v_aesth`].
    pub fn v_aesth_closed_form(&self, b: &CropBox) -> Result<f64, ScoringError> {
        let s = self.region_sum(b)?;
        Ok(2.0 * s - b.area() as f64 + (self.dims.area() as f64 - self.total))
    }
}

/// One layout region. Positive weights ask for inclusion, negative weights
/// penalize covering the region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutRegion {
    #[serde(flatten)]
    pub bx: CropBox,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl From<CropBox> for LayoutRegion {
    fn from(bx: CropBox) -> Self {
        Self { bx, weight: 1.0 }
    }
}

/// Disjoint pieces of a region union, each carrying the strongest weight of
/// the regions covering it.
#[derive(Debug, Clone, Default)]
struct Pieces {
    cells: Vec<(CropBox, f64)>,
    mass: f64,
    pixels: u64,
}

impl Pieces {
    fn build(regions: &[(CropBox, f64)]) -> Self {
        if regions.is_empty() {
            return Self::default();
        }
        let mut xs: Vec<u64> = regions.iter().flat_map(|(b, _)| [b.x as u64, b.right()]).collect();
        let mut ys: Vec<u64> = regions.iter().flat_map(|(b, _)| [b.y as u64, b.bottom()]).collect();
        xs.sort_unstable();
        xs.dedup();
        ys.sort_unstable();
        ys.dedup();
        let mut cells = Vec::new();
        let (mut mass, mut pixels) = (0.0, 0u64);
        for yw in ys.windows(2) {
            for xw in xs.windows(2) {
                let cell = CropBox {
                    x: xw[0] as u32,
                    y: yw[0] as u32,
                    width: (xw[1] - xw[0]) as u32,
                    height: (yw[1] - yw[0]) as u32,
                };
                let w = regions
                    .iter()
                    .filter(|(r, _)| crate::geometry::contains(r, &cell))
                    .map(|&(_, w)| w)
                    .fold(0.0f64, f64::max);
                if w > 0.0 {
                    mass += w * cell.area() as f64;
                    pixels += cell.area();
                    cells.push((cell, w));
                }
            }
        }
        Self { cells, mass, pixels }
    }

    /// Weighted fraction of the union covered by `b`.
    fn covered_fraction(&self, b: &CropBox) -> f64 {
        if self.mass == 0.0 {
            return 0.0;
        }
        let covered: f64 = self.cells.iter().map(|(c, w)| w * c.intersection_area(b) as f64).sum();
        covered / self.mass
    }

    fn fully_covered(&self, b: &CropBox) -> bool {
        self.cells.iter().all(|(c, _)| crate::geometry::contains(b, c))
    }
}

/// The set of regions a crop should (or, with negative weight, should not)
/// cover.
#[derive(Debug, Clone)]
pub struct LayoutConstraint {
    regions: Vec<LayoutRegion>,
    include: Pieces,
    exclude: Pieces,
}

impl LayoutConstraint {
    pub fn new(regions: Vec<LayoutRegion>) -> Result<Self, ScoringError> {
        if regions.is_empty() {
            return Err(ScoringError::EmptyLayout);
        }
        for r in &regions {
            if !r.bx.is_valid() {
                return Err(ScoringError::BadRegion(r.bx));
            }
            if !r.weight.is_finite() || r.weight == 0.0 {
                return Err(ScoringError::BadWeight(r.weight));
            }
        }
        let pos: Vec<_> = regions.iter().filter(|r| r.weight > 0.0).map(|r| (r.bx, r.weight)).collect();
        let neg: Vec<_> = regions.iter().filter(|r| r.weight < 0.0).map(|r| (r.bx, -r.weight)).collect();
        Ok(Self { include: Pieces::build(&pos), exclude: Pieces::build(&neg), regions })
    }

    pub fn from_boxes(boxes: impl IntoIterator<Item = CropBox>) -> Result<Self, ScoringError> {
        Self::new(boxes.into_iter().map(LayoutRegion::from).collect())
    }

    pub fn single(bx: CropBox) -> Self {
        Self::from_boxes([bx]).expect("a valid box is a valid constraint")
    }

    pub fn regions(&self) -> &[LayoutRegion] {
        &self.regions
    }

    /// Pixel count of the union of the inclusion regions.
    pub fn area(&self) -> u64 {
        self.include.pixels
    }

    pub fn has_inclusion(&self) -> bool {
        self.include.pixels > 0
    }

    pub fn fits(&self, dims: Dims) -> bool {
        self.regions.iter().all(|r| r.bx.fits(dims))
    }

    /// Fraction of the inclusion union inside the crop. A constraint with
    /// only exclusion regions is trivially satisfied.
    pub fn recall(&self, b: &CropBox) -> f64 {
        if !self.has_inclusion() {
            return 1.0;
        }
        self.include.covered_fraction(b)
    }

    pub fn covers_inclusion(&self, b: &CropBox) -> bool {
        self.include.fully_covered(b)
    }

    /// Layout score: inclusion recall minus the covered share of the
    /// exclusion regions. With only positive unit weights this is the plain
    /// pixel recall `|B_y ∩ B_φ| / |B_φ|`.
    pub fn v_layout(&self, b: &CropBox) -> f64 {
        self.include.covered_fraction(b) - self.exclude.covered_fraction(b)
    }

    /// Inclusion boxes, for mask building.
    pub fn inclusion_boxes(&self) -> impl Iterator<Item = &CropBox> {
        self.regions.iter().filter(|r| r.weight > 0.0).map(|r| &r.bx)
    }
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    /// Layout weight of the hard-aspect objective.
    pub alpha: f64,
    /// Weight of an externally supplied soft-aspect term.
    pub lambda1: f64,
    /// Layout weight used together with `lambda1`.
    pub lambda2: f64,
}

pub const DEFAULT_ALPHA: f64 = 1e4;

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, lambda1: 0.0, lambda2: DEFAULT_ALPHA }
    }
}

impl ScoreWeights {
    pub fn with_alpha(alpha: f64) -> Self {
        Self { alpha, lambda2: alpha, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub v_aesth: f64,
    pub v_layout: f64,
    pub total: f64,
}

/// Combines the terms. Without a soft-aspect value this is
/// `v_aesth + alpha * v_layout`; with one it is
/// `v_aesth + lambda1 * v_aspect + lambda2 * v_layout`.
pub fn total_score(weights: &ScoreWeights, v_aesth: f64, v_layout: f64, v_aspect: Option<f64>) -> f64 {
    match v_aspect {
        None => v_aesth + weights.alpha * v_layout,
        Some(a) => v_aesth + weights.lambda1 * a + weights.lambda2 * v_layout,
    }
}

/// Scores a crop given in image coordinates: the aesthetic term on the
/// heatmap grid, the layout term on the image grid.
pub fn score_crop(
    ii: &IntegralImage,
    layout: Option<&LayoutConstraint>,
    weights: &ScoreWeights,
    bx: &CropBox,
    image_dims: Dims,
) -> Result<ScoreBreakdown, ScoringError> {
    if !bx.fits(image_dims) {
        return Err(ScoringError::OutOfBounds { bx: *bx, dims: image_dims });
    }
    let hb = scale_box(bx, image_dims, ii.dims());
    let v_aesth = ii.v_aesth(&hb)?;
    let v_layout = layout.map_or(0.0, |l| l.v_layout(bx));
    Ok(ScoreBreakdown { v_aesth, v_layout, total: total_score(weights, v_aesth, v_layout, None) })
}

/// Per-candidate scoring used by both search strategies.
pub trait CropScorer: Sync {
    fn score(&self, bx: &CropBox) -> Result<ScoreBreakdown, ScoringError>;
}

impl<F> CropScorer for F
where
    F: Fn(&CropBox) -> Result<ScoreBreakdown, ScoringError> + Sync,
{
    fn score(&self, bx: &CropBox) -> Result<ScoreBreakdown, ScoringError> {
        self(bx)
    }
}

/// The heatmap objective bound to one image.
#[derive(Debug, Clone)]
pub struct HeatmapScorer {
    pub integral: IntegralImage,
    pub layout: Option<LayoutConstraint>,
    pub weights: ScoreWeights,
    pub image_dims: Dims,
}

impl HeatmapScorer {
    pub fn new(heatmap: &Heatmap, layout: Option<LayoutConstraint>, weights: ScoreWeights, image_dims: Dims) -> Self {
        Self { integral: IntegralImage::new(heatmap), layout, weights, image_dims }
    }
}

impl CropScorer for HeatmapScorer {
    fn score(&self, bx: &CropBox) -> Result<ScoreBreakdown, ScoringError> {
        score_crop(&self.integral, self.layout.as_ref(), &self.weights, bx, self.image_dims)
    }
}
