//! Single-image crop requests shared by the command line, the HTTP service
//! and the Python bindings.

use std::path::PathBuf;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{baseline_crop, EdgeMode};
use crate::geometry::{satisfies_aspect, AspectRatio, CropBox, Dims};
use crate::heatmaps::{decode_heatmap_image, encode_heatmap_png, heuristic_saliency, load_heatmap, PixelImage};
use crate::optimizer::{optimize, Evaluation, OptimizerConfig, OptimizerError, Strategy};
use crate::proposals::{exhaustive_search, generate_proposals, ProposalError, DEFAULT_K_END, DEFAULT_K_START};
use crate::scoring::{CropScorer, Heatmap, HeatmapScorer, LayoutConstraint, LayoutRegion, ScoreBreakdown, ScoreWeights};

/// Heatmaps larger than this per side are downsampled before scoring.
pub const MAX_HEATMAP_SIDE: u32 = 256;

#[derive(Debug, Error)]
pub enum RequestError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<OptimizerError> for RequestError {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::InfeasibleSearchSpace { .. } => Self::Infeasible(e.to_string()),
            OptimizerError::Io(e) => Self::Io(e.to_string()),
            other => Self::BadRequest(other.to_string()),
        }
    }
}

impl From<ProposalError> for RequestError {
    fn from(e: ProposalError) -> Self {
        match e {
            ProposalError::EmptyProposalSet { .. } => Self::Infeasible(e.to_string()),
            ProposalError::Io(e) => Self::Io(e.to_string()),
            other => Self::BadRequest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapSource {
    /// Row-major values in `[0, 1]`.
    Grid { width: u32, height: u32, values: Vec<f64> },
    Rows(Vec<Vec<f64>>),
    /// Encoded grayscale image.
    PngBase64(String),
    /// Heatmap file on the serving machine.
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// Encoded image bytes (PNG or PNM).
    Base64(String),
    Path(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMethodName {
    #[default]
    Heatmap,
    Proposal,
    BaselineShort,
    BaselineLong,
}

impl std::str::FromStr for CropMethodName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "heatmap" => Self::Heatmap,
            "proposal" => Self::Proposal,
            "baseline_short" => Self::BaselineShort,
            "baseline_long" => Self::BaselineLong,
            other => return Err(format!("unknown method {other:?}")),
        })
    }
}

fn default_k_start() -> u32 {
    DEFAULT_K_START
}

fn default_k_end() -> u32 {
    DEFAULT_K_END
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRequest {
    /// Image size; taken from `image`, else the heatmap, when omitted.
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
    pub aspect: AspectRatio,
    /// Aesthetic heatmap. Exactly one of `heatmap` and `image` is given; an
    /// image is scored through its saliency map.
    #[serde(default)]
    pub heatmap: Option<HeatmapSource>,
    #[serde(default)]
    pub image: Option<ImageSource>,
    #[serde(default)]
    pub layout: Vec<LayoutRegion>,
    #[serde(default)]
    pub method: CropMethodName,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_k_start")]
    pub k_start: u32,
    #[serde(default = "default_k_end")]
    pub k_end: u32,
    /// Include every evaluated candidate in the response.
    #[serde(default)]
    pub trace: bool,
}

impl CropRequest {
    pub fn new(aspect: AspectRatio) -> Self {
        Self {
            width: None,
            height: None,
            aspect,
            heatmap: None,
            image: None,
            layout: Vec::new(),
            method: CropMethodName::default(),
            optimizer: OptimizerConfig::default(),
            alpha: None,
            k_start: DEFAULT_K_START,
            k_end: DEFAULT_K_END,
            trace: false,
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.optimizer.strategy = strategy;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropResponse {
    #[serde(rename = "box")]
    pub bx: CropBox,
    pub breakdown: ScoreBreakdown,
    pub recall: f64,
    pub satisfies_aspect: bool,
    pub method: CropMethodName,
    pub evaluated: usize,
    pub elapsed_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<Evaluation>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Whether `path` sources may be read.
    pub allow_paths: bool,
}

fn bad(msg: impl Into<String>) -> RequestError {
    RequestError::BadRequest(msg.into())
}

fn decode_base64(s: &str) -> Result<Vec<u8>, RequestError> {
    let s = s.split_once("base64,").map_or(s, |(_, rest)| rest);
    BASE64.decode(s.trim()).map_err(|e| bad(format!("invalid base64: {e}")))
}

fn check_path(path: &std::path::Path, opts: RunOptions) -> Result<(), RequestError> {
    if !opts.allow_paths {
        return Err(bad("path sources are disabled"));
    }
    if !path.exists() {
        return Err(RequestError::Io(format!("{} does not exist", path.display())));
    }
    Ok(())
}

pub fn resolve_heatmap(src: &HeatmapSource, opts: RunOptions) -> Result<Heatmap, RequestError> {
    match src {
        HeatmapSource::Grid { width, height, values } => {
            let dims = Dims::new(*width, *height).map_err(|e| bad(e.to_string()))?;
            Heatmap::new(dims, values.clone()).map_err(|e| bad(e.to_string()))
        }
        HeatmapSource::Rows(rows) => {
            let h = rows.len() as u32;
            let w = rows.first().map_or(0, Vec::len) as u32;
            if rows.iter().any(|r| r.len() as u32 != w) {
                return Err(bad("heatmap rows have different lengths"));
            }
            let dims = Dims::new(w, h).map_err(|e| bad(e.to_string()))?;
            Heatmap::new(dims, rows.concat()).map_err(|e| bad(e.to_string()))
        }
        HeatmapSource::PngBase64(s) => decode_heatmap_image(&decode_base64(s)?).map_err(|e| bad(e.to_string())),
        HeatmapSource::Path(p) => {
            check_path(p, opts)?;
            load_heatmap(p).map_err(|e| match e {
                crate::heatmaps::HeatmapError::Io(io) => RequestError::Io(io.to_string()),
                other => bad(other.to_string()),
            })
        }
    }
}

pub fn resolve_image(src: &ImageSource, opts: RunOptions) -> Result<PixelImage, RequestError> {
    match src {
        ImageSource::Base64(s) => PixelImage::decode(&decode_base64(s)?).map_err(|e| bad(e.to_string())),
        ImageSource::Path(p) => {
            check_path(p, opts)?;
            PixelImage::open(p).map_err(|e| RequestError::Io(e.to_string()))
        }
    }
}

/// Saliency grid for an image, at most `max_side` per side.
pub fn saliency_for(img: &PixelImage, max_side: u32) -> Heatmap {
    let Dims { width, height } = img.dims;
    let longest = width.max(height);
    let dims = if longest <= max_side {
        img.dims
    } else {
        let s = max_side as f64 / longest as f64;
        Dims {
            width: ((width as f64 * s).round() as u32).clamp(1, max_side),
            height: ((height as f64 * s).round() as u32).clamp(1, max_side),
        }
    };
    heuristic_saliency(img, dims)
}

/// PNG bytes of the saliency map of an encoded image.
pub fn saliency_png(image_bytes: &[u8], max_side: u32) -> Result<Vec<u8>, RequestError> {
    let img = PixelImage::decode(image_bytes).map_err(|e| bad(e.to_string()))?;
    encode_heatmap_png(&saliency_for(&img, max_side)).map_err(|e| RequestError::Io(e.to_string()))
}

/// Resolves the inputs and runs the requested method.
pub fn run_crop(req: &CropRequest, opts: RunOptions) -> Result<CropResponse, RequestError> {
    if req.heatmap.is_some() && req.image.is_some() {
        return Err(bad("give either a heatmap or an image, not both"));
    }
    let image = req.image.as_ref().map(|s| resolve_image(s, opts)).transpose()?;
    let heatmap = match (&req.heatmap, &image) {
        (Some(src), _) => resolve_heatmap(src, opts)?,
        (None, Some(img)) => saliency_for(img, MAX_HEATMAP_SIDE),
        (None, None) => return Err(bad("request needs a heatmap or an image")),
    };
    // without explicit sizes, the crop lives on the image (or heatmap) grid
    let dims = match (req.width, req.height) {
        (Some(w), Some(h)) => Dims::new(w, h).map_err(|e| bad(e.to_string()))?,
        (None, None) => image.as_ref().map_or(heatmap.dims(), |img| img.dims),
        _ => return Err(bad("give both width and height or neither")),
    };
    let heatmap = heatmap.fit_within(MAX_HEATMAP_SIDE);

    let layout = if req.layout.is_empty() {
        None
    } else {
        let l = LayoutConstraint::new(req.layout.clone()).map_err(|e| bad(e.to_string()))?;
        if !l.fits(dims) {
            return Err(bad(format!("layout region outside the {dims} image")));
        }
        Some(l)
    };
    let weights = match req.alpha {
        Some(a) if !(a.is_finite() && a >= 0.0) => return Err(bad(format!("alpha must be >= 0, got {a}"))),
        Some(a) => ScoreWeights::with_alpha(a),
        None => ScoreWeights::default(),
    };
    let scorer = HeatmapScorer::new(&heatmap, layout.clone(), weights, dims);

    let start = Instant::now();
    let (bx, evaluated, trace) = match req.method {
        CropMethodName::Heatmap => {
            let r = optimize(&scorer, dims, req.aspect, &req.optimizer)?;
            let n = r.trace.evaluations.len();
            (r.bx, n, req.trace.then_some(r.trace.evaluations))
        }
        CropMethodName::Proposal => {
            let set = generate_proposals(dims, req.aspect, req.k_start, req.k_end)?;
            let (bx, _) = exhaustive_search(&scorer, &set)?;
            (bx, set.len(), None)
        }
        CropMethodName::BaselineShort | CropMethodName::BaselineLong => {
            let mode = if req.method == CropMethodName::BaselineShort { EdgeMode::ShortEdge } else { EdgeMode::LongEdge };
            (baseline_crop(&heatmap, layout.as_ref(), req.aspect, mode, dims), 1, None)
        }
    };
    let elapsed_s = start.elapsed().as_secs_f64();
    let breakdown = scorer.score(&bx).map_err(|e| bad(e.to_string()))?;
    Ok(CropResponse {
        bx,
        breakdown,
        recall: layout.as_ref().map_or(1.0, |l| l.recall(&bx)),
        satisfies_aspect: satisfies_aspect(&bx, req.aspect),
        method: req.method,
        evaluated,
        elapsed_s,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_request() -> CropRequest {
        let mut values = vec![0.0; 40 * 30];
        for y in 5..20 {
            for x in 10..30 {
                values[y * 40 + x] = 1.0;
            }
        }
        let mut req = CropRequest::new("4:3".parse().unwrap());
        req.width = Some(80);
        req.height = Some(60);
        req.heatmap = Some(HeatmapSource::Grid { width: 40, height: 30, values });
        req
    }

    #[test]
    fn json_shape() {
        let json = r#"{"width":80,"height":60,"aspect":"4:3",
            "heatmap":{"rows":[[0.0,1.0],[1.0,0.0]]},
            "layout":[{"x":0,"y":0,"w":10,"h":10},{"x":70,"y":50,"w":10,"h":10,"weight":-1}],
            "method":"proposal","k_start":4,"k_end":6}"#;
        let req: CropRequest = serde_json::from_str(json).unwrap();
        assert_eq!(req.layout[0].weight, 1.0);
        assert_eq!(req.layout[1].weight, -1.0);
        assert_eq!(req.method, CropMethodName::Proposal);
        let resp = run_crop(&req, RunOptions::default()).unwrap();
        assert!(resp.satisfies_aspect);
        let v = serde_json::to_value(&resp).unwrap();
        assert!(v.get("box").is_some());
        assert!(v.get("trace").is_none());
    }

    #[test]
    fn every_method_respects_ratio() {
        for method in [
            CropMethodName::Heatmap,
            CropMethodName::Proposal,
            CropMethodName::BaselineShort,
            CropMethodName::BaselineLong,
        ] {
            let mut req = grid_request();
            req.method = method;
            req.k_start = 3;
            req.k_end = 6;
            let r = run_crop(&req, RunOptions::default()).unwrap();
            assert!(r.satisfies_aspect, "{method:?} {}", r.bx);
            assert!(r.bx.fits(Dims::new(80, 60).unwrap()));
        }
    }

    #[test]
    fn layout_is_covered() {
        let mut req = grid_request();
        req.layout = vec![CropBox::new(60, 40, 10, 10).unwrap().into()];
        req.optimizer.step_granularity = 1.0;
        req.optimizer.iterations = 300;
        req.trace = true;
        let r = run_crop(&req, RunOptions::default()).unwrap();
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.trace.unwrap().len(), 300);
    }

    #[test]
    fn rejects_bad_input() {
        let mut req = grid_request();
        req.layout = vec![CropBox::new(75, 0, 10, 10).unwrap().into()];
        assert!(matches!(run_crop(&req, RunOptions::default()), Err(RequestError::BadRequest(_))));

        let mut req = grid_request();
        req.heatmap = Some(HeatmapSource::Path("/nonexistent.png".into()));
        assert!(matches!(run_crop(&req, RunOptions::default()), Err(RequestError::BadRequest(_))));
        assert!(matches!(run_crop(&req, RunOptions { allow_paths: true }), Err(RequestError::Io(_))));

        let mut req = grid_request();
        req.heatmap = Some(HeatmapSource::Rows(vec![vec![0.5, 0.5], vec![0.5]]));
        assert!(run_crop(&req, RunOptions::default()).is_err());

        let mut req = grid_request();
        req.alpha = Some(-1.0);
        assert!(run_crop(&req, RunOptions::default()).is_err());
    }

    #[test]
    fn infeasible_ratio() {
        let mut req = grid_request();
        req.width = Some(2);
        req.height = Some(200);
        req.aspect = AspectRatio::new(50.0).unwrap();
        assert!(matches!(run_crop(&req, RunOptions::default()), Err(RequestError::Infeasible(_))));
        req.method = CropMethodName::Proposal;
        assert!(matches!(run_crop(&req, RunOptions::default()), Err(RequestError::Infeasible(_))));
    }

    #[test]
    fn image_source_uses_saliency() {
        let img = image::GrayImage::from_fn(48, 32, |x, y| image::Luma([if (20..30).contains(&x) && (10..20).contains(&y) { 255 } else { 0 }]));
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
        let mut req = CropRequest::new("1:1".parse().unwrap());
        req.image = Some(ImageSource::Base64(BASE64.encode(&bytes)));
        let r = run_crop(&req, RunOptions::default()).unwrap();
        assert!(r.bx.fits(Dims::new(48, 32).unwrap()));
        let png = saliency_png(&bytes, 16).unwrap();
        let h = decode_heatmap_image(&png).unwrap();
        assert_eq!(h.dims(), Dims::new(16, 11).unwrap());
    }
}
