//! Aspect-ratio and layout constrained cropping.
//!
//! A crop is scored on an aesthetic heatmap (mass inside the box plus empty
//! space outside it) and on how much of the requested layout regions it
//! keeps. Two searches are provided: an exhaustive scan of ratio-exact
//! proposal windows and a sample-efficient black-box search over
//! `(x, y, step)`.

pub mod baselines;
pub mod bench;
pub mod dataset;
pub mod geometry;
pub mod heatmaps;
pub mod optimizer;
pub mod proposals;
pub mod request;
pub mod scoring;

pub use baselines::{baseline_crop, EdgeMode};
pub use dataset::{build_benchmark, layout_templates, BenchmarkTuple};
pub use geometry::{convert_step, iou, AspectRatio, CropBox, Dims, GeometryError, SearchPoint};
pub use heatmaps::{pseudo_heatmap, AnnotationRecord};
pub use optimizer::{optimize, OptimizeResult, OptimizerConfig, Strategy};
pub use proposals::{exhaustive_search, generate_proposals, get_step_size, ProposalSet};
pub use request::{run_crop, CropRequest, CropResponse};
pub use scoring::{
    CropScorer, Heatmap, HeatmapScorer, IntegralImage, LayoutConstraint, LayoutRegion, ScoreBreakdown, ScoreWeights,
};
