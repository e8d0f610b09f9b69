//! Annotation manifests and derivation of the fine-stage dataset.
//!
//! Coarse annotations outline the whole pose (hand, cigarette, head); fine
//! annotations outline fingers, mouth and cigarette, in global coordinates.
//! [`derive_fine_dataset`] turns each coarse region into a fine-stage training
//! item: the margin-expanded crop, its letterbox transform, and the fine boxes
//! re-expressed in crop coordinates. Pixel cutting is left to external tools;
//! `crop_region` and `crop_transform` carry everything they need.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::cascade::PipelineConfig;
use crate::detectors::{Detector, Input};
use crate::exec::{self, Execution};
use crate::geometry::{expand_with_margin, make_crop_transform, nms_indices, BBox, CropTransform};
use crate::simulator::Scene;

pub const DEFAULT_MIN_RETAINED_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Manual,
    Derived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub image_ref: String,
    pub image_bounds: BBox,
    pub coarse_boxes: Vec<BBox>,
    pub fine_boxes: Vec<BBox>,
    pub split: Split,
    pub provenance: Provenance,
}

impl AnnotationRecord {
    /// Ground-truth annotation of a symbolic scene. Only class `b` scenes
    /// carry boxes.
    pub fn from_scene(scene: &Scene, split: Split) -> Self {
        AnnotationRecord {
            item_id: format!("scene-{}", scene.scene_id),
            image_ref: scene.image_ref(),
            image_bounds: scene.image_bounds,
            coarse_boxes: scene.gt_coarse_region.into_iter().collect(),
            fine_boxes: scene.gt_fine_region.into_iter().collect(),
            split,
            provenance: Provenance::Manual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionOrigin {
    CoarseAnnotation,
    CoarseDetection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedFineRecord {
    pub parent_item_id: String,
    pub region_index: usize,
    pub split: Split,
    pub crop_region: BBox,
    pub crop_transform: CropTransform,
    pub fine_boxes_in_crop: Vec<BBox>,
    pub source: RegionOrigin,
}

/// Where the coarse regions come from.
#[derive(Clone, Copy)]
pub enum RegionSource<'a> {
    CoarseAnnotation,
    /// Run a coarse detector; records whose `image_ref` is found in `scenes`
    /// are passed as symbolic scenes, the rest as opaque image references.
    CoarseDetection {
        detector: &'a dyn Detector,
        scenes: Option<&'a HashMap<String, Scene>>,
    },
}

impl RegionSource<'_> {
    fn origin(&self) -> RegionOrigin {
        match self {
            RegionSource::CoarseAnnotation => RegionOrigin::CoarseAnnotation,
            RegionSource::CoarseDetection { .. } => RegionOrigin::CoarseDetection,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeriveOptions {
    /// Fine boxes keeping less than this fraction of their area after
    /// clipping to the crop are dropped.
    pub min_retained_fraction: f64,
    pub execution: Execution,
}

impl Default for DeriveOptions {
    fn default() -> Self {
        DeriveOptions {
            min_retained_fraction: DEFAULT_MIN_RETAINED_FRACTION,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeriveOutput {
    pub records: Vec<DerivedFineRecord>,
    pub lint: LintReport,
    pub dropped_fine_boxes: usize,
}

/// Build fine-stage records, one per qualifying coarse region.
///
/// Records that have fine boxes but yield no coarse region are skipped with a
/// lint error; the run continues. Output order is (input order, region index).
pub fn derive_fine_dataset(
    records: &[AnnotationRecord],
    cfg: &PipelineConfig,
    source: RegionSource<'_>,
    opts: &DeriveOptions,
) -> DeriveOutput {
    let per_record = exec::map_collect(opts.execution, records, |r| derive_one(r, cfg, source, opts));
    let mut out = DeriveOutput::default();
    for (recs, entries, dropped) in per_record {
        out.records.extend(recs);
        out.lint.entries.extend(entries);
        out.dropped_fine_boxes += dropped;
    }
    out
}

fn coarse_regions(
    record: &AnnotationRecord,
    cfg: &PipelineConfig,
    source: RegionSource<'_>,
) -> Result<Vec<BBox>, String> {
    match source {
        RegionSource::CoarseAnnotation => Ok(record.coarse_boxes.clone()),
        RegionSource::CoarseDetection { detector, scenes } => {
            let input = match scenes.and_then(|m| m.get(&record.image_ref)) {
                Some(scene) => Input::Scene(scene),
                None => Input::Image {
                    reference: &record.image_ref,
                    bounds: record.image_bounds,
                },
            };
            let dets = detector.detect(input, None).map_err(|e| e.to_string())?;
            Ok(nms_indices(&dets, cfg.nms_iou)
                .into_iter()
                .filter(|&i| dets[i].confidence >= cfg.tau_coarse)
                .map(|i| dets[i].bbox)
                .collect())
        }
    }
}

fn derive_one(
    record: &AnnotationRecord,
    cfg: &PipelineConfig,
    source: RegionSource<'_>,
    opts: &DeriveOptions,
) -> (Vec<DerivedFineRecord>, Vec<LintEntry>, usize) {
    let mut lint = Vec::new();
    let regions = match coarse_regions(record, cfg, source) {
        Ok(r) => r,
        Err(msg) => {
            lint.push(LintEntry::error(LintKind::DetectorFailure, Some(&record.item_id), msg));
            return (Vec::new(), lint, 0);
        }
    };
    if regions.is_empty() && !record.fine_boxes.is_empty() {
        lint.push(LintEntry::error(
            LintKind::MissingCoarseRegion,
            Some(&record.item_id),
            format!("{} fine box(es) but no coarse region; record skipped", record.fine_boxes.len()),
        ));
        return (Vec::new(), lint, 0);
    }

    let side = f64::from(cfg.fine_input_size);
    let mut out = Vec::with_capacity(regions.len());
    let mut dropped = 0;
    for (region_index, region) in regions.iter().enumerate() {
        let crop_region = match expand_with_margin(region, cfg.margin_fraction, &record.image_bounds) {
            Ok(r) => r,
            Err(e) => {
                lint.push(LintEntry::warning(
                    LintKind::DegenerateRegion,
                    Some(&record.item_id),
                    format!("region {region_index}: {e}"),
                ));
                continue;
            }
        };
        let crop_transform = make_crop_transform(&crop_region, cfg.fine_input_size).expect("validated fine input size");
        let mut fine_boxes_in_crop = Vec::new();
        for fine in &record.fine_boxes {
            let Some(clipped) = fine.intersection(&crop_region) else {
                continue;
            };
            if clipped.area() < opts.min_retained_fraction * fine.area() {
                dropped += 1;
                continue;
            }
            let b = crop_transform.box_to_crop(&clipped);
            // clamp float dust so boxes stay inside [0, side]^2
            if let Ok(b) = BBox::new(
                b.x_min().max(0.0),
                b.y_min().max(0.0),
                b.x_max().min(side),
                b.y_max().min(side),
            ) {
                fine_boxes_in_crop.push(b);
            }
        }
        out.push(DerivedFineRecord {
            parent_item_id: record.item_id.clone(),
            region_index,
            split: record.split,
            crop_region,
            crop_transform,
            fine_boxes_in_crop,
            source: source.origin(),
        });
    }
    (out, lint, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LintKind {
    Parse,
    InvalidBox,
    OrphanFineBox,
    DuplicateItemId,
    SplitLeakage,
    MissingCoarseRegion,
    DegenerateRegion,
    DetectorFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintEntry {
    pub severity: Severity,
    pub kind: LintKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub item_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub line: Option<usize>,
    pub message: String,
}

impl LintEntry {
    fn new(severity: Severity, kind: LintKind, item_id: Option<&str>, message: String) -> Self {
        LintEntry {
            severity,
            kind,
            item_id: item_id.map(str::to_owned),
            line: None,
            message,
        }
    }

    pub fn error(kind: LintKind, item_id: Option<&str>, message: String) -> Self {
        Self::new(Severity::Error, kind, item_id, message)
    }

    pub fn warning(kind: LintKind, item_id: Option<&str>, message: String) -> Self {
        Self::new(Severity::Warning, kind, item_id, message)
    }

    fn at_line(mut self, line: usize) -> Self {
        self.line = Some(line);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintReport {
    pub entries: Vec<LintEntry>,
}

impl LintReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, severity: Severity) -> usize {
        self.entries.iter().filter(|e| e.severity == severity).count()
    }

    pub fn to_text(&self) -> String {
        if self.entries.is_empty() {
            return "manifest clean\n".to_string();
        }
        let mut s = String::new();
        for e in &self.entries {
            let sev = match e.severity {
                Severity::Warning => "warning",
                Severity::Error => "error",
            };
            let kind = serde_json::to_value(e.kind).expect("unit enum");
            s.push_str(&format!("{sev}[{}]", kind.as_str().unwrap_or_default()));
            if let Some(line) = e.line {
                s.push_str(&format!(" line {line}"));
            }
            if let Some(id) = &e.item_id {
                s.push_str(&format!(" {id}"));
            }
            s.push_str(&format!(": {}\n", e.message));
        }
        s.push_str(&format!(
            "{} error(s), {} warning(s)\n",
            self.count(Severity::Error),
            self.count(Severity::Warning)
        ));
        s
    }
}

/// Check a parsed manifest for orphan fine boxes, duplicate ids and images
/// appearing in more than one split.
pub fn lint_manifest(records: &[AnnotationRecord]) -> LintReport {
    let mut report = LintReport::default();

    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.item_id.as_str()) {
            report.entries.push(LintEntry::error(
                LintKind::DuplicateItemId,
                Some(&r.item_id),
                "item_id appears more than once".into(),
            ));
        }
    }

    for r in records {
        for (i, fine) in r.fine_boxes.iter().enumerate() {
            if !r.coarse_boxes.iter().any(|c| c.intersection_area(fine) > 0.0) {
                report.entries.push(LintEntry::warning(
                    LintKind::OrphanFineBox,
                    Some(&r.item_id),
                    format!("fine box {i} intersects no coarse box"),
                ));
            }
        }
    }

    let mut splits: HashMap<&str, Vec<Split>> = HashMap::new();
    let mut order = Vec::new();
    for r in records {
        let e = splits.entry(r.image_ref.as_str()).or_insert_with(|| {
            order.push(r.image_ref.as_str());
            Vec::new()
        });
        if !e.contains(&r.split) {
            e.push(r.split);
        }
    }
    for image in order {
        let s = &splits[image];
        if s.len() > 1 {
            report.entries.push(LintEntry::error(
                LintKind::SplitLeakage,
                None,
                format!("image {image} appears in splits {s:?}"),
            ));
        }
    }
    report
}

#[derive(Deserialize)]
struct RawRecord {
    item_id: String,
    #[serde(default)]
    image_bounds: Option<[f64; 4]>,
    #[serde(default)]
    coarse_boxes: Vec<[f64; 4]>,
    #[serde(default)]
    fine_boxes: Vec<[f64; 4]>,
}

/// Parse a JSONL annotation manifest leniently. Lines that fail strict parsing
/// become lint entries (invalid boxes are named individually); the rest are
/// returned and linted with [`lint_manifest`].
pub fn lint_jsonl<R: BufRead>(input: R) -> std::io::Result<(Vec<AnnotationRecord>, LintReport)> {
    let mut records = Vec::new();
    let mut report = LintReport::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AnnotationRecord>(&line) {
            Ok(r) => records.push(r),
            Err(strict) => match serde_json::from_str::<RawRecord>(&line) {
                Ok(raw) => {
                    let boxes = raw
                        .image_bounds
                        .iter()
                        .map(|b| ("image_bounds".to_string(), b))
                        .chain(raw.coarse_boxes.iter().enumerate().map(|(j, b)| (format!("coarse_boxes[{j}]"), b)))
                        .chain(raw.fine_boxes.iter().enumerate().map(|(j, b)| (format!("fine_boxes[{j}]"), b)));
                    let mut found = false;
                    for (field, b) in boxes {
                        if let Err(e) = BBox::try_from(*b) {
                            found = true;
                            report.entries.push(
                                LintEntry::error(LintKind::InvalidBox, Some(&raw.item_id), format!("{field}: {e}"))
                                    .at_line(lineno),
                            );
                        }
                    }
                    if !found {
                        report.entries.push(
                            LintEntry::error(LintKind::Parse, Some(&raw.item_id), strict.to_string()).at_line(lineno),
                        );
                    }
                }
                Err(_) => report
                    .entries
                    .push(LintEntry::error(LintKind::Parse, None, strict.to_string()).at_line(lineno)),
            },
        }
    }
    report.entries.extend(lint_manifest(&records).entries);
    Ok((records, report))
}
