//! Coarse-to-fine cascade.
//!
//! 1. The coarse detector looks at the whole image for the pose region (hand,
//!    cigarette and head together). Its output goes through NMS, the
//!    `tau_coarse` threshold and the per-image region cap.
//! 2. Each kept region is grown by the context margin, letterboxed to the
//!    fine input size and handed to the fine detector, which looks for the
//!    fingers, mouth and cigarette. Fine detections at or above `tau_fine`
//!    are projected back to the global frame.
//! 3. A region with at least one surviving fine detection is confirmed with
//!    score `coarse_conf * max_fine_conf`. The image is positive iff any
//!    region is confirmed.
//!
//! Stage 2 may run regions in parallel; results are joined in region order
//! before fusion, so the output does not depend on scheduling.

mod temporal;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{DetectError, Detection, Detector, Input, DEFAULT_COARSE_INPUT_SIZE, DEFAULT_FINE_INPUT_SIZE};
use crate::exec::{self, Execution};
use crate::geometry::{expand_with_margin, make_crop_transform, nms_indices, project_to_global, BBox};

pub use temporal::{aggregate_temporal, EventInterval, TemporalAggregator};

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

impl CascadeError {
    pub fn is_transport(&self) -> bool {
        matches!(self, CascadeError::Detect(e) if e.is_transport())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub coarse_input_size: u32,
    pub fine_input_size: u32,
    pub tau_coarse: f64,
    pub tau_fine: f64,
    pub margin_fraction: f64,
    pub nms_iou: f64,
    pub max_coarse_regions_per_image: usize,
    pub temporal_k: usize,
    pub temporal_n: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            coarse_input_size: DEFAULT_COARSE_INPUT_SIZE,
            fine_input_size: DEFAULT_FINE_INPUT_SIZE,
            tau_coarse: 0.25,
            tau_fine: 0.50,
            margin_fraction: 0.15,
            nms_iou: 0.45,
            max_coarse_regions_per_image: 16,
            temporal_k: 3,
            temporal_n: 5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CascadeError> {
        let bad = |m: String| Err(CascadeError::Config(m));
        if self.coarse_input_size == 0 || self.fine_input_size == 0 {
            return bad("input sizes must be positive".into());
        }
        for (name, v) in [
            ("tau_coarse", self.tau_coarse),
            ("tau_fine", self.tau_fine),
            ("nms_iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.margin_fraction >= 0.0 && self.margin_fraction.is_finite()) {
            return bad(format!("margin_fraction = {} must be >= 0", self.margin_fraction));
        }
        if self.max_coarse_regions_per_image == 0 {
            return bad("max_coarse_regions_per_image must be positive".into());
        }
        if !(1 <= self.temporal_k && self.temporal_k <= self.temporal_n) {
            return bad(format!(
                "temporal window needs 1 <= k <= n, got k={} n={}",
                self.temporal_k, self.temporal_n
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmedPair {
    /// Position of the coarse detection in the coarse detector's raw output.
    pub coarse_index: usize,
    pub coarse: Detection,
    /// Margin-expanded region the fine detector saw.
    pub crop_region: BBox,
    /// Highest-confidence surviving fine detection, global frame.
    pub fine: Detection,
    /// Number of fine detections at or above `tau_fine` in this region.
    pub fine_count: usize,
    pub combined_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum RejectReason {
    NoFineDetection,
    DegenerateRegion(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRegion {
    pub coarse_index: usize,
    pub coarse: Detection,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub coarse_raw: usize,
    pub coarse_after_nms: usize,
    pub coarse_kept: usize,
    pub dropped_by_cap: usize,
    pub degenerate_regions: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageTimings {
    pub coarse: Duration,
    pub fine: Duration,
    pub fusion: Duration,
}

/// Equality compares outputs only; timings are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeResult {
    pub image_decision: bool,
    pub confirmed: Vec<ConfirmedPair>,
    pub rejected_coarse: Vec<RejectedRegion>,
    pub diagnostics: Diagnostics,
    /// Wall-clock only; never serialized so outputs stay reproducible.
    #[serde(skip)]
    pub timings: StageTimings,
}

impl PartialEq for CascadeResult {
    fn eq(&self, o: &Self) -> bool {
        self.image_decision == o.image_decision
            && self.confirmed == o.confirmed
            && self.rejected_coarse == o.rejected_coarse
            && self.diagnostics == o.diagnostics
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleResult {
    pub decision: bool,
    pub detections: Vec<Detection>,
}

enum RegionOutcome {
    Confirmed(ConfirmedPair),
    Rejected(RejectedRegion),
}

/// An immutable two-stage pipeline. Shareable across threads; all per-image
/// state is local to [`Cascade::run`].
pub struct Cascade<'d> {
    coarse: &'d dyn Detector,
    fine: &'d dyn Detector,
    cfg: PipelineConfig,
    exec: Execution,
}

impl<'d> Cascade<'d> {
    pub fn new(coarse: &'d dyn Detector, fine: &'d dyn Detector, cfg: PipelineConfig) -> Result<Self, CascadeError> {
        cfg.validate()?;
        if fine.input_size() != cfg.fine_input_size {
            return Err(CascadeError::Config(format!(
                "fine detector {} takes {}px crops but fine_input_size is {}",
                fine.name(),
                fine.input_size(),
                cfg.fine_input_size
            )));
        }
        Ok(Cascade {
            coarse,
            fine,
            cfg,
            exec: Execution::default(),
        })
    }

    /// How stage 2 fans out over regions.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn run(&self, input: Input<'_>) -> Result<CascadeResult, CascadeError> {
        let t0 = Instant::now();
        let raw = self.coarse.detect(input, None)?;
        let mut diagnostics = Diagnostics {
            coarse_raw: raw.len(),
            ..Diagnostics::default()
        };
        let survivors = nms_indices(&raw, self.cfg.nms_iou);
        diagnostics.coarse_after_nms = survivors.len();
        let mut kept: Vec<usize> = survivors
            .into_iter()
            .filter(|&i| raw[i].confidence >= self.cfg.tau_coarse)
            .collect();
        // already in descending confidence order
        if kept.len() > self.cfg.max_coarse_regions_per_image {
            diagnostics.dropped_by_cap = kept.len() - self.cfg.max_coarse_regions_per_image;
            kept.truncate(self.cfg.max_coarse_regions_per_image);
        }
        diagnostics.coarse_kept = kept.len();
        let t1 = Instant::now();

        let outcomes = exec::map_collect(self.exec, &kept, |&i| self.confirm_region(input, i, &raw[i]));
        let t2 = Instant::now();

        let mut confirmed = Vec::new();
        let mut rejected_coarse = Vec::new();
        for outcome in outcomes {
            match outcome? {
                RegionOutcome::Confirmed(p) => confirmed.push(p),
                RegionOutcome::Rejected(r) => {
                    if matches!(r.reason, RejectReason::DegenerateRegion(_)) {
                        diagnostics.degenerate_regions += 1;
                    }
                    rejected_coarse.push(r);
                }
            }
        }
        confirmed.sort_by(|a, b| {
            b.combined_score
                .total_cmp(&a.combined_score)
                .then(a.coarse_index.cmp(&b.coarse_index))
        });
        let t3 = Instant::now();

        Ok(CascadeResult {
            image_decision: !confirmed.is_empty(),
            confirmed,
            rejected_coarse,
            diagnostics,
            timings: StageTimings {
                coarse: t1 - t0,
                fine: t2 - t1,
                fusion: t3 - t2,
            },
        })
    }

    fn confirm_region(&self, input: Input<'_>, index: usize, coarse: &Detection) -> Result<RegionOutcome, CascadeError> {
        let rejected = |reason| {
            Ok(RegionOutcome::Rejected(RejectedRegion {
                coarse_index: index,
                coarse: coarse.clone(),
                reason,
            }))
        };
        let region = match expand_with_margin(&coarse.bbox, self.cfg.margin_fraction, &input.bounds()) {
            Ok(r) => r,
            Err(e) => return rejected(RejectReason::DegenerateRegion(e.to_string())),
        };
        let transform = make_crop_transform(&region, self.cfg.fine_input_size).map_err(DetectError::from)?;

        let mut best: Option<Detection> = None;
        let mut count = 0;
        for d in self.fine.detect(input, Some(&region))? {
            if d.confidence < self.cfg.tau_fine {
                continue;
            }
            let global = project_to_global(&d, &transform).map_err(DetectError::from)?;
            count += 1;
            if best.as_ref().is_none_or(|b| global.confidence > b.confidence) {
                best = Some(global);
            }
        }
        match best {
            Some(fine) => Ok(RegionOutcome::Confirmed(ConfirmedPair {
                coarse_index: index,
                coarse: coarse.clone(),
                crop_region: region,
                combined_score: coarse.confidence * fine.confidence,
                fine,
                fine_count: count,
            })),
            None => rejected(RejectReason::NoFineDetection),
        }
    }
}

pub fn run_cascade(
    coarse: &dyn Detector,
    fine: &dyn Detector,
    input: Input<'_>,
    cfg: &PipelineConfig,
) -> Result<CascadeResult, CascadeError> {
    Cascade::new(coarse, fine, cfg.clone())?.run(input)
}

/// Baseline: one full-image pass, positive iff anything clears `tau`.
pub fn run_single(model: &dyn Detector, input: Input<'_>, tau: f64) -> Result<SingleResult, CascadeError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CascadeError::Config(format!("tau = {tau} outside [0, 1]")));
    }
    let detections = model.detect(input, None)?;
    Ok(SingleResult {
        decision: detections.iter().any(|d| d.confidence >= tau),
        detections,
    })
}
