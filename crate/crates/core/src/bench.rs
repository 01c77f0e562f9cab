//! Evaluation harness: runs a cropping method over benchmark tuples and
//! reports IoU, layout recall and per-crop wall time, plus parameter sweeps.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{baseline_crop, EdgeMode};
use crate::dataset::BenchmarkTuple;
use crate::geometry::{convert_step, iou, step_max, CropBox, Dims, SearchPoint};
use crate::heatmaps::{load_heatmap, pseudo_heatmap, AnnotationRecord, HeatmapError, PixelImage};
use crate::optimizer::{optimize, OptimizerConfig, OptimizerError};
use crate::proposals::{exhaustive_search, generate_proposals, ProposalError, DEFAULT_K_END, DEFAULT_K_START};
use crate::scoring::{Heatmap, HeatmapScorer, ScoreWeights};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no heatmap for image {0:?}")]
    MissingHeatmap(String),
    #[error("benchmark is empty")]
    EmptyBenchmark,
    #[error("bad sweep: {0}")]
    BadSweep(String),
    #[error("report is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Supplies the heatmap for an image id.
pub trait HeatmapProvider: Sync {
    fn heatmap(&self, image_id: &str) -> Result<Arc<Heatmap>, BenchError>;
}

impl HeatmapProvider for HashMap<String, Arc<Heatmap>> {
    fn heatmap(&self, image_id: &str) -> Result<Arc<Heatmap>, BenchError> {
        self.get(image_id).cloned().ok_or_else(|| BenchError::MissingHeatmap(image_id.to_string()))
    }
}

/// Flat heatmap for every image, for methods that ignore heatmap content.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformProvider;

impl HeatmapProvider for UniformProvider {
    fn heatmap(&self, _: &str) -> Result<Arc<Heatmap>, BenchError> {
        let one = Dims { width: 1, height: 1 };
        Ok(Arc::new(Heatmap::filled(one, 0.5).expect("0.5 is a valid heatmap value")))
    }
}

/// Loads `<dir>/<image_id>.{png,pgm,csv}` on demand.
#[derive(Debug, Clone)]
pub struct DirectoryProvider {
    pub dir: PathBuf,
}

impl HeatmapProvider for DirectoryProvider {
    fn heatmap(&self, image_id: &str) -> Result<Arc<Heatmap>, BenchError> {
        for ext in ["png", "pgm", "csv"] {
            let p = self.dir.join(format!("{image_id}.{ext}"));
            if p.is_file() {
                return Ok(Arc::new(load_heatmap(&p)?));
            }
        }
        Err(BenchError::MissingHeatmap(image_id.to_string()))
    }
}

/// Grid used for pseudo-heatmaps built from annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoResolution {
    /// The image grid itself, capped at `max_side` per side.
    Native { max_side: u32 },
    Fixed(Dims),
}

impl Default for PseudoResolution {
    fn default() -> Self {
        Self::Fixed(crate::heatmaps::DEFAULT_HEATMAP_DIMS)
    }
}

impl PseudoResolution {
    pub fn grid_for(&self, image: Dims) -> Dims {
        match *self {
            Self::Fixed(d) => d,
            Self::Native { max_side } => {
                let longest = image.width.max(image.height);
                if longest <= max_side {
                    image
                } else {
                    let s = max_side as f64 / longest as f64;
                    Dims {
                        width: ((image.width as f64 * s).round() as u32).clamp(1, max_side),
                        height: ((image.height as f64 * s).round() as u32).clamp(1, max_side),
                    }
                }
            }
        }
    }
}

/// Averaged annotation masks, one per record.
pub fn pseudo_provider(
    records: &[AnnotationRecord],
    res: PseudoResolution,
) -> Result<HashMap<String, Arc<Heatmap>>, BenchError> {
    records
        .iter()
        .map(|r| Ok((r.image_id.clone(), Arc::new(pseudo_heatmap(r, res.grid_for(r.dims()))?))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropOutput {
    pub bx: CropBox,
    /// Candidate boxes scored to produce the crop.
    pub evaluated: usize,
}

/// A cropping method under evaluation.
pub trait CropMethod: Sync {
    fn id(&self) -> String;
    fn crop(&self, item: &BenchmarkTuple, heatmap: &Heatmap) -> Result<CropOutput, BenchError>;
}

/// Returns the ground truth.
pub struct OracleMethod;

impl CropMethod for OracleMethod {
    fn id(&self) -> String {
        "oracle".into()
    }
    fn crop(&self, item: &BenchmarkTuple, _: &Heatmap) -> Result<CropOutput, BenchError> {
        Ok(CropOutput { bx: item.gt, evaluated: 0 })
    }
}

pub struct FullFrameMethod;

impl CropMethod for FullFrameMethod {
    fn id(&self) -> String {
        "full_frame".into()
    }
    fn crop(&self, item: &BenchmarkTuple, _: &Heatmap) -> Result<CropOutput, BenchError> {
        Ok(CropOutput { bx: item.dims().full_box(), evaluated: 0 })
    }
}

/// A uniformly random box of the item's ratio, seeded per item.
pub struct RandomBoxMethod {
    pub seed: u64,
}

fn item_seed(seed: u64, item: &BenchmarkTuple) -> u64 {
    // FNV-1a over the identifying fields
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    let fields = [item.gt.x, item.gt.y, item.gt.width, item.gt.height, item.layout.x, item.layout.y];
    for byte in item.image_id.bytes().chain(fields.iter().flat_map(|v| v.to_le_bytes())) {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl CropMethod for RandomBoxMethod {
    fn id(&self) -> String {
        "random_box".into()
    }
    fn crop(&self, item: &BenchmarkTuple, _: &Heatmap) -> Result<CropOutput, BenchError> {
        let dims = item.dims();
        let omega = item.omega();
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(self.seed, item));
        for _ in 0..256 {
            let x = rng.random_range(0..dims.width);
            let y = rng.random_range(0..dims.height);
            let limit = step_max(x, y, dims, omega).expect("position in frame");
            let step = rng.random_range(0.0..=limit);
            if let Ok(bx) = convert_step(SearchPoint { x, y, step }, dims, omega) {
                return Ok(CropOutput { bx, evaluated: 1 });
            }
        }
        let bx = convert_step(SearchPoint { x: 0, y: 0, step: step_max(0, 0, dims, omega).unwrap() }, dims, omega)
            .map_err(|_| OptimizerError::InfeasibleSearchSpace { dims, omega })?;
        Ok(CropOutput { bx, evaluated: 1 })
    }
}

/// Black-box search on the heatmap objective.
pub struct HeatmapMethod {
    pub config: OptimizerConfig,
    pub weights: ScoreWeights,
}

impl CropMethod for HeatmapMethod {
    fn id(&self) -> String {
        format!("heatmap[{}]", self.config.strategy)
    }
    fn crop(&self, item: &BenchmarkTuple, heatmap: &Heatmap) -> Result<CropOutput, BenchError> {
        let scorer = HeatmapScorer::new(heatmap, Some(item.layout_constraint()), self.weights, item.dims());
        let r = optimize(&scorer, item.dims(), item.omega(), &self.config)?;
        Ok(CropOutput { bx: r.bx, evaluated: r.trace.evaluations.len() })
    }
}

/// Exhaustive search over the ratio-exact proposal grid, scored on the
/// heatmap objective.
pub struct ProposalMethod {
    pub k_start: u32,
    pub k_end: u32,
    pub weights: ScoreWeights,
}

impl CropMethod for ProposalMethod {
    fn id(&self) -> String {
        format!("proposal[{}-{}]", self.k_start, self.k_end)
    }
    fn crop(&self, item: &BenchmarkTuple, heatmap: &Heatmap) -> Result<CropOutput, BenchError> {
        let set = generate_proposals(item.dims(), item.omega(), self.k_start, self.k_end)?;
        let scorer = HeatmapScorer::new(heatmap, Some(item.layout_constraint()), self.weights, item.dims());
        let (bx, _) = exhaustive_search(&scorer, &set)?;
        Ok(CropOutput { bx, evaluated: set.len() })
    }
}

/// Saliency-mask baseline; the provider's heatmap serves as the saliency.
pub struct BaselineMethod {
    pub mode: EdgeMode,
}

impl CropMethod for BaselineMethod {
    fn id(&self) -> String {
        format!("baseline_{}", self.mode)
    }
    fn crop(&self, item: &BenchmarkTuple, heatmap: &Heatmap) -> Result<CropOutput, BenchError> {
        let layout = item.layout_constraint();
        let bx = baseline_crop(heatmap, Some(&layout), item.omega(), self.mode, item.dims());
        Ok(CropOutput { bx, evaluated: 1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Oracle,
    FullFrame,
    RandomBox,
    Heatmap,
    Proposal,
    BaselineShort,
    BaselineLong,
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "oracle" => Self::Oracle,
            "full_frame" | "full" => Self::FullFrame,
            "random" | "random_box" => Self::RandomBox,
            "heatmap" => Self::Heatmap,
            "proposal" => Self::Proposal,
            "baseline_short" => Self::BaselineShort,
            "baseline_long" => Self::BaselineLong,
            other => return Err(format!("unknown method {other:?}")),
        })
    }
}

impl MethodKind {
    /// Whether the method reads the heatmap at all.
    pub fn needs_heatmap(&self) -> bool {
        !matches!(self, Self::Oracle | Self::FullFrame | Self::RandomBox)
    }
}

/// Everything needed to instantiate a method; the unit a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub optimizer: OptimizerConfig,
    pub weights: ScoreWeights,
    pub k_start: u32,
    pub k_end: u32,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            optimizer: OptimizerConfig::default(),
            weights: ScoreWeights::default(),
            k_start: DEFAULT_K_START,
            k_end: DEFAULT_K_END,
        }
    }

    pub fn build(&self) -> Box<dyn CropMethod> {
        match self.kind {
            MethodKind::Oracle => Box::new(OracleMethod),
            MethodKind::FullFrame => Box::new(FullFrameMethod),
            MethodKind::RandomBox => Box::new(RandomBoxMethod { seed: self.optimizer.seed }),
            MethodKind::Heatmap => Box::new(HeatmapMethod { config: self.optimizer, weights: self.weights }),
            MethodKind::Proposal => {
                Box::new(ProposalMethod { k_start: self.k_start, k_end: self.k_end, weights: self.weights })
            }
            MethodKind::BaselineShort => Box::new(BaselineMethod { mode: EdgeMode::ShortEdge }),
            MethodKind::BaselineLong => Box::new(BaselineMethod { mode: EdgeMode::LongEdge }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub iou: f64,
    pub recall: f64,
    pub elapsed_s: f64,
    #[serde(rename = "box")]
    pub bx: CropBox,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_id: String,
    pub mean_iou: f64,
    pub mean_recall: f64,
    pub mean_elapsed: f64,
    pub mean_evaluated: f64,
    pub per_item: Vec<ItemResult>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 { 0.0 } else { sum / n as f64 }
}

impl EvalReport {
    fn from_items(method_id: String, per_item: Vec<ItemResult>) -> Self {
        Self {
            method_id,
            mean_iou: mean(per_item.iter().map(|i| i.iou)),
            mean_recall: mean(per_item.iter().map(|i| i.recall)),
            mean_elapsed: mean(per_item.iter().map(|i| i.elapsed_s)),
            mean_evaluated: mean(per_item.iter().map(|i| i.evaluated as f64)),
            per_item,
        }
    }

    /// Recomputes the aggregates from the item rows.
    pub fn check_consistency(&self) -> Result<(), BenchError> {
        let again = Self::from_items(self.method_id.clone(), self.per_item.clone());
        if (again.mean_iou - self.mean_iou).abs() > 1e-12 || (again.mean_recall - self.mean_recall).abs() > 1e-12 {
            return Err(BenchError::Inconsistent(format!("{} aggregates do not match its rows", self.method_id)));
        }
        Ok(())
    }

    /// CSV rows with header `id,iou,recall,elapsed_s` and a `#` summary
    /// footer.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "id,iou,recall,elapsed_s")?;
        for i in &self.per_item {
            writeln!(out, "{},{},{},{}", i.id, i.iou, i.recall, i.elapsed_s)?;
        }
        writeln!(
            out,
            "# method={} n={} mean_iou={} mean_recall={} mean_elapsed_s={}",
            self.method_id,
            self.per_item.len(),
            self.mean_iou,
            self.mean_recall,
            self.mean_elapsed
        )
    }

    /// Same report without timing, for determinism checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.mean_elapsed = 0.0;
        for i in &mut r.per_item {
            i.elapsed_s = 0.0;
        }
        r
    }
}

/// Runs `method` over every tuple. Items run in parallel; rows keep the
/// benchmark order.
pub fn evaluate(
    method: &dyn CropMethod,
    tuples: &[BenchmarkTuple],
    provider: &dyn HeatmapProvider,
) -> Result<EvalReport, BenchError> {
    if tuples.is_empty() {
        return Err(BenchError::EmptyBenchmark);
    }
    let per_item = tuples
        .par_iter()
        .enumerate()
        .map(|(n, t)| {
            let heatmap = provider.heatmap(&t.image_id)?;
            let start = Instant::now();
            let out = method.crop(t, &heatmap)?;
            let elapsed_s = start.elapsed().as_secs_f64();
            Ok(ItemResult {
                id: format!("{}#{n}", t.image_id),
                iou: iou(&out.bx, &t.gt),
                recall: t.layout_constraint().recall(&out.bx),
                elapsed_s,
                bx: out.bx,
                evaluated: out.evaluated,
            })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    let report = EvalReport::from_items(method.id(), per_item);
    report.check_consistency()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Iterations,
    KRange,
    Alpha,
    StepGranularity,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "iterations" => Self::Iterations,
            "k_range" | "k-range" => Self::KRange,
            "alpha" => Self::Alpha,
            "step_granularity" | "step-granularity" | "step_size" => Self::StepGranularity,
            other => return Err(format!("unknown sweep parameter {other:?}")),
        })
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Iterations => "iterations",
            Self::KRange => "k_range",
            Self::Alpha => "alpha",
            Self::StepGranularity => "step_granularity",
        })
    }
}

impl SweepParam {
    /// Applies one sweep value (`"14-28"` style for k ranges).
    pub fn apply(&self, base: &MethodSpec, value: &str) -> Result<MethodSpec, BenchError> {
        let bad = || BenchError::BadSweep(format!("{self}: cannot use value {value:?}"));
        let mut spec = *base;
        match self {
            Self::Iterations => spec.optimizer.iterations = value.parse().map_err(|_| bad())?,
            Self::Alpha => {
                let a: f64 = value.parse().map_err(|_| bad())?;
                if !(a.is_finite() && a >= 0.0) {
                    return Err(bad());
                }
                spec.weights = ScoreWeights::with_alpha(a);
            }
            Self::StepGranularity => spec.optimizer.step_granularity = value.parse().map_err(|_| bad())?,
            Self::KRange => {
                let (a, b) = value.split_once(['-', ':', '.']).ok_or_else(bad)?;
                spec.k_start = a.trim().parse().map_err(|_| bad())?;
                spec.k_end = b.trim_start_matches('.').trim().parse().map_err(|_| bad())?;
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<(String, EvalReport)>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{},method,mean_iou,mean_recall,mean_evaluated,mean_elapsed_s,n", self.param)?;
        for (v, r) in &self.rows {
            writeln!(
                out,
                "{v},{},{},{},{},{},{}",
                r.method_id,
                r.mean_iou,
                r.mean_recall,
                r.mean_evaluated,
                r.mean_elapsed,
                r.per_item.len()
            )?;
        }
        Ok(())
    }

    /// Plain-text table in the `value | candidates | IoU | time[s]` layout.
    pub fn to_text(&self) -> String {
        let header = [self.param.to_string(), "# cand".into(), "IoU".into(), "recall".into(), "time[s]".into()];
        let rows: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|(v, r)| {
                [
                    v.clone(),
                    format!("{:.2}", r.mean_evaluated),
                    format!("{:.4}", r.mean_iou),
                    format!("{:.4}", r.mean_recall),
                    format!("{:.4}", r.mean_elapsed),
                ]
            })
            .collect();
        let mut widths = header.clone().map(|h| h.len());
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: &[String; 5]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(s, "{}", parts.join("  "));
        };
        line(&mut s, &header);
        let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        for r in &rows {
            line(&mut s, r);
        }
        s
    }
}

/// Evaluates `base` once per value of `param`.
pub fn sweep(
    param: SweepParam,
    values: &[String],
    base: &MethodSpec,
    tuples: &[BenchmarkTuple],
    provider: &dyn HeatmapProvider,
) -> Result<SweepTable, BenchError> {
    if values.is_empty() {
        return Err(BenchError::BadSweep("no values".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let spec = param.apply(base, v)?;
        let report = evaluate(spec.build().as_ref(), tuples, provider)?;
        rows.push((v.clone(), report));
    }
    Ok(SweepTable { param, rows })
}

/// Colors of the overlay boxes.
pub const GT_COLOR: Rgb<u8> = Rgb([40, 90, 255]);
pub const LAYOUT_COLOR: Rgb<u8> = Rgb([230, 30, 30]);
pub const PRED_COLOR: Rgb<u8> = Rgb([30, 200, 60]);

/// Grayscale rendering of a heatmap stretched to the image grid.
pub fn heatmap_backdrop(h: &Heatmap, dims: Dims) -> RgbImage {
    let r = h.resample(dims);
    RgbImage::from_fn(dims.width, dims.height, |x, y| {
        let v = (r.get(x, y) * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

pub fn image_backdrop(img: &PixelImage) -> RgbImage {
    let Dims { width, height } = img.dims;
    let c = img.channels as usize;
    RgbImage::from_fn(width, height, |x, y| {
        let i = (y as usize * width as usize + x as usize) * c;
        if c == 1 {
            let v = img.values[i];
            Rgb([v, v, v])
        } else {
            Rgb([img.values[i], img.values[i + 1], img.values[i + 2]])
        }
    })
}

fn draw_outline(canvas: &mut RgbImage, b: &CropBox, color: Rgb<u8>, thickness: u32) {
    let (w, h) = canvas.dimensions();
    for t in 0..thickness {
        let x0 = b.x + t;
        let y0 = b.y + t;
        let Some(x1) = (b.right() as u32).checked_sub(1 + t) else { return };
        let Some(y1) = (b.bottom() as u32).checked_sub(1 + t) else { return };
        if x0 > x1 || y0 > y1 {
            return;
        }
        for x in x0..=x1.min(w - 1) {
            for y in [y0, y1] {
                if y < h {
                    canvas.put_pixel(x, y, color);
                }
            }
        }
        for y in y0..=y1.min(h - 1) {
            for x in [x0, x1] {
                if x < w {
                    canvas.put_pixel(x, y, color);
                }
            }
        }
    }
}

/// Draws ground truth, layout regions and prediction outlines.
pub fn render_overlay(
    mut canvas: RgbImage,
    gt: Option<&CropBox>,
    layout: &[CropBox],
    pred: Option<&CropBox>,
) -> RgbImage {
    let thickness = (canvas.width().min(canvas.height()) / 150).max(1);
    if let Some(g) = gt {
        draw_outline(&mut canvas, g, GT_COLOR, thickness);
    }
    for l in layout {
        draw_outline(&mut canvas, l, LAYOUT_COLOR, thickness);
    }
    if let Some(p) = pred {
        draw_outline(&mut canvas, p, PRED_COLOR, thickness);
    }
    canvas
}

pub fn save_overlay(canvas: &RgbImage, path: &Path) -> Result<(), BenchError> {
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| BenchError::Io(std::io::Error::other(e)))
}
