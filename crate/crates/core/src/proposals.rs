//! Aspect-ratio-exact sliding-window proposals and exhaustive search over
//! them.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AspectRatio, CropBox, Dims};
use crate::scoring::{CropScorer, ScoreBreakdown, ScoringError};

/// Smallest allowed base step.
pub const MIN_BASE_STEP: u32 = 12;
/// Largest short-side base step considered by the grid search.
pub const MAX_BASE_STEP: u32 = 64;
pub const DEFAULT_K_START: u32 = 14;
pub const DEFAULT_K_END: u32 = 28;
/// Ratios at or beyond `EXTREME_RATIO:1` (either orientation) get doubled
/// window offsets.
pub const EXTREME_RATIO: f64 = 3.0;

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error("no proposal of ratio {omega} fits {dims} for k in {k_start}..={k_end}")]
    EmptyProposalSet { dims: Dims, omega: AspectRatio, k_start: u32, k_end: u32 },
    #[error("invalid k range {k_start}..={k_end}")]
    BadRange { k_start: u32, k_end: u32 },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Base height and width of the proposal grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPair {
    pub step_h: u32,
    pub step_w: u32,
}

/// Finds the base step pair whose ratio is closest to `omega`.
///
/// The shorter side ranges over `[12, 64]` and the longer side is the
/// rounded ratio multiple. The first pair reaching the smallest ratio error
/// wins, so exact ratios come out as the smallest multiple of the reduced
/// fraction with both sides at least 12.
pub fn get_step_size(omega: AspectRatio) -> StepPair {
    let w = omega.value();
    let mut best: Option<(f64, StepPair)> = None;
    for short in MIN_BASE_STEP..=MAX_BASE_STEP {
        let pair = if w >= 1.0 {
            StepPair { step_h: short, step_w: (short as f64 * w).round() as u32 }
        } else {
            StepPair { step_h: (short as f64 / w).round() as u32, step_w: short }
        };
        let err = (pair.step_w as f64 / pair.step_h as f64 - w).abs();
        if best.is_none_or(|(e, _)| err < e - 1e-12) {
            best = Some((err, pair));
        }
    }
    best.expect("non-empty search range").1
}

pub fn is_extreme(omega: AspectRatio) -> bool {
    let w = omega.value();
    w >= EXTREME_RATIO - 1e-9 || w <= 1.0 / EXTREME_RATIO + 1e-9
}

/// Window offsets for a base step pair.
pub fn offsets(steps: StepPair, omega: AspectRatio) -> (u32, u32) {
    let factor = if is_extreme(omega) { 2 } else { 1 };
    (steps.step_h * factor, steps.step_w * factor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<CropBox>,
    pub omega: AspectRatio,
    pub steps: StepPair,
    pub k_start: u32,
    pub k_end: u32,
    pub dims: Dims,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Writes one box per line as JSON.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), ProposalError> {
        for b in &self.boxes {
            serde_json::to_writer(&mut out, b).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn sliding_window(box_h: u32, box_w: u32, off_h: u32, off_w: u32, dims: Dims, out: &mut Vec<CropBox>) {
    if box_h > dims.height || box_w > dims.width {
        return;
    }
    for y in (0..=dims.height - box_h).step_by(off_h as usize) {
        for x in (0..=dims.width - box_w).step_by(off_w as usize) {
            out.push(CropBox { x, y, width: box_w, height: box_h });
        }
    }
}

/// Generates every `k * step` sized window for `k` in `k_start..=k_end`,
/// ordered by `k`, then row, then column.
pub fn generate_proposals(dims: Dims, omega: AspectRatio, k_start: u32, k_end: u32) -> Result<ProposalSet, ProposalError> {
    if k_start == 0 || k_start > k_end {
        return Err(ProposalError::BadRange { k_start, k_end });
    }
    let steps = get_step_size(omega);
    let (off_h, off_w) = offsets(steps, omega);
    let mut boxes = Vec::new();
    for k in k_start..=k_end {
        let (bh, bw) = (k as u64 * steps.step_h as u64, k as u64 * steps.step_w as u64);
        if bh > dims.height as u64 || bw > dims.width as u64 {
            continue;
        }
        sliding_window(bh as u32, bw as u32, off_h, off_w, dims, &mut boxes);
    }
    if boxes.is_empty() {
        return Err(ProposalError::EmptyProposalSet { dims, omega, k_start, k_end });
    }
    Ok(ProposalSet { boxes, omega, steps, k_start, k_end, dims })
}

/// Returns the best-scoring proposal. Candidates are scored in parallel and
/// reduced so that equal totals resolve to the earliest proposal.
pub fn exhaustive_search<S: CropScorer + ?Sized>(
    scorer: &S,
    set: &ProposalSet,
) -> Result<(CropBox, ScoreBreakdown), ProposalError> {
    if set.is_empty() {
        return Err(ProposalError::EmptyProposalSet {
            dims: set.dims,
            omega: set.omega,
            k_start: set.k_start,
            k_end: set.k_end,
        });
    }
    let scored: Vec<ScoreBreakdown> = set
        .boxes
        .par_iter()
        .map(|b| scorer.score(b))
        .collect::<Result<_, _>>()?;
    let mut best = 0;
    for (i, s) in scored.iter().enumerate().skip(1) {
        if s.total > scored[best].total {
            best = i;
        }
    }
    Ok((set.boxes[best], scored[best]))
}
