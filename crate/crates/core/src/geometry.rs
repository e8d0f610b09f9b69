//! Axis-aligned box arithmetic: IoU, greedy NMS, context-margin expansion and
//! the letterbox transform between the global image frame and a fine-stage
//! crop frame.
//!
//! Coordinates are `f64` pixels throughout. Nothing here rounds; rasterization
//! is left to whatever cuts pixels at the sidecar boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::Detection;

/// Slack allowed when a crop-frame box pokes into the letterbox padding.
pub const PADDING_TOLERANCE_PX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite box coordinate in [{0}, {1}, {2}, {3}]")]
    NonFinite(f64, f64, f64, f64),
    #[error("box [{0}, {1}, {2}, {3}] has no positive area")]
    Degenerate(f64, f64, f64, f64),
    #[error("region collapsed after clamping to image bounds: {0:?}")]
    OutOfFrame(BBox),
    #[error("negative margin fraction {0}")]
    NegativeMargin(f64),
    #[error("crop target size must be positive")]
    ZeroTargetSize,
    #[error("crop-frame box {bbox:?} leaves the content area of the crop by more than {PADDING_TOLERANCE_PX}px")]
    IntoPadding { bbox: BBox },
}

/// An axis-aligned rectangle with strictly positive area.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`; deserialization goes through
/// the same validation as [`BBox::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::NonFinite(x_min, y_min, x_max, y_max));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::Degenerate(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box anchored at the origin, e.g. the bounds of a `width × height` image.
    pub fn from_size(width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(0.0, 0.0, width, height)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Area of the overlap with `other`, zero when disjoint or touching.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// The overlap with `other` as a box, `None` if it has no area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .ok()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.contains_within(other, 0.0)
    }

    /// `other` lies inside `self` grown by `tolerance` on every side.
    pub fn contains_within(&self, other: &BBox, tolerance: f64) -> bool {
        other.x_min >= self.x_min - tolerance
            && other.y_min >= self.y_min - tolerance
            && other.x_max <= self.x_max + tolerance
            && other.y_max <= self.y_max + tolerance
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending confidence, equal confidences by
/// ascending input index. A candidate survives unless it overlaps an already
/// kept detection with IoU strictly above `iou_threshold`. The result is in
/// visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Same as [`nms`] but returns the surviving input indices.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::with_capacity(order.len());
    for idx in order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&dets[k].bbox, &dets[idx].bbox) > iou_threshold);
        if !suppressed {
            kept.push(idx);
        }
    }
    kept
}

/// Grow every side by `margin_fraction` of the box dimension along that axis,
/// then clamp to `image_bounds`.
pub fn expand_with_margin(
    b: &BBox,
    margin_fraction: f64,
    image_bounds: &BBox,
) -> Result<BBox, GeometryError> {
    if margin_fraction.is_nan() || margin_fraction < 0.0 {
        return Err(GeometryError::NegativeMargin(margin_fraction));
    }
    let dx = margin_fraction * b.width();
    let dy = margin_fraction * b.height();
    let x_min = (b.x_min - dx).max(image_bounds.x_min);
    let y_min = (b.y_min - dy).max(image_bounds.y_min);
    let x_max = (b.x_max + dx).min(image_bounds.x_max);
    let y_max = (b.y_max + dy).min(image_bounds.y_max);
    BBox::new(x_min, y_min, x_max, y_max).map_err(|_| GeometryError::OutOfFrame(*b))
}

/// Aspect-preserving letterbox from a global-frame region into a square
/// `target_size × target_size` detector input, content centered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub source_region: BBox,
    pub target_size: u32,
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl CropTransform {
    /// Global → crop.
    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.source_region.x_min) * self.scale + self.pad_x,
            (y - self.source_region.y_min) * self.scale + self.pad_y,
        )
    }

    /// Crop → global.
    pub fn backward(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.pad_x) / self.scale + self.source_region.x_min,
            (y - self.pad_y) / self.scale + self.source_region.y_min,
        )
    }

    /// The part of the crop covered by image content, i.e. excluding padding.
    pub fn content_area(&self) -> BBox {
        let w = self.source_region.width() * self.scale;
        let h = self.source_region.height() * self.scale;
        BBox {
            x_min: self.pad_x,
            y_min: self.pad_y,
            x_max: self.pad_x + w,
            y_max: self.pad_y + h,
        }
    }

    /// Map a global box into the crop frame. The box is not clipped.
    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.forward(b.x_min, b.y_min);
        let (x1, y1) = self.forward(b.x_max, b.y_max);
        // scale > 0, so ordering survives.
        BBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        }
    }

    /// Map a crop-frame box back to the global frame.
    ///
    /// Fails if the box reaches into the padding by more than
    /// [`PADDING_TOLERANCE_PX`]. Within tolerance the box is clipped to the
    /// content area first, so the result always lies inside `source_region`.
    pub fn box_to_global(&self, b: &BBox) -> Result<BBox, GeometryError> {
        let content = self.content_area();
        if !content.contains_within(b, PADDING_TOLERANCE_PX) {
            return Err(GeometryError::IntoPadding { bbox: *b });
        }
        let clipped = content
            .intersection(b)
            .ok_or(GeometryError::IntoPadding { bbox: *b })?;
        let (x0, y0) = self.backward(clipped.x_min, clipped.y_min);
        let (x1, y1) = self.backward(clipped.x_max, clipped.y_max);
        let r = &self.source_region;
        BBox::new(
            x0.max(r.x_min),
            y0.max(r.y_min),
            x1.min(r.x_max),
            y1.min(r.y_max),
        )
    }
}

pub fn make_crop_transform(region: &BBox, target_size: u32) -> Result<CropTransform, GeometryError> {
    if target_size == 0 {
        return Err(GeometryError::ZeroTargetSize);
    }
    let side = f64::from(target_size);
    let scale = side / region.width().max(region.height());
    Ok(CropTransform {
        source_region: *region,
        target_size,
        scale,
        pad_x: 0.5 * (side - region.width() * scale),
        pad_y: 0.5 * (side - region.height() * scale),
    })
}

/// Re-express a crop-frame detection in the global frame. Label and
/// confidence pass through untouched.
pub fn project_to_global(d: &Detection, t: &CropTransform) -> Result<Detection, GeometryError> {
    Ok(Detection {
        bbox: t.box_to_global(&d.bbox)?,
        frame: crate::detectors::Frame::Global,
        ..d.clone()
    })
}

/// Inverse of [`project_to_global`] for boxes inside the source region.
pub fn project_to_crop(d: &Detection, t: &CropTransform) -> Detection {
    Detection {
        bbox: t.box_to_crop(&d.bbox),
        frame: crate::detectors::Frame::Crop,
        ..d.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{Frame, Label};

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn det(b: BBox, conf: f64) -> Detection {
        Detection {
            label: Label::CoarsePose,
            confidence: conf,
            bbox: b,
            frame: Frame::Global,
        }
    }

    #[test]
    fn rejects_degenerate_and_non_finite() {
        assert!(matches!(
            BBox::new(0.0, 0.0, 0.0, 5.0),
            Err(GeometryError::Degenerate(..))
        ));
        assert!(BBox::new(5.0, 0.0, 1.0, 5.0).is_err());
        assert!(matches!(
            BBox::new(0.0, f64::NAN, 1.0, 1.0),
            Err(GeometryError::NonFinite(..))
        ));
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn serde_validates() {
        let b: BBox = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(b.to_array(), [1.0, 2.0, 3.0, 4.0]);
        assert!(serde_json::from_str::<BBox>("[3,2,1,4]").is_err());
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.0]");
    }

    #[test]
    fn iou_examples() {
        let b = bx(3.0, 4.0, 17.0, 9.5);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(20., 20., 30., 30.)), 0.0);
        // 50 shared over 150 total
        let v = iou(&bx(0., 0., 10., 10.), &bx(5., 0., 15., 10.));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        // touching edges do not overlap
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(10., 0., 20., 10.)), 0.0);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.45).is_empty());

        let b = bx(10., 10., 50., 50.);
        let out = nms(&[det(b, 0.8), det(b, 0.9)], 0.45);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);

        let out = nms(
            &[det(bx(0., 0., 10., 10.), 0.3), det(bx(20., 20., 30., 30.), 0.7)],
            0.45,
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].confidence, 0.7);
    }

    #[test]
    fn nms_tie_keeps_lower_index() {
        let a = det(bx(0., 0., 10., 10.), 0.5);
        let mut b = det(bx(0.5, 0., 10.5, 10.), 0.5);
        b.label = Label::FineCigarette;
        let kept = nms_indices(&[a, b], 0.45);
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn nms_threshold_is_strict() {
        // iou exactly 1/3: kept at threshold 1/3, suppressed just below
        let d = [det(bx(0., 0., 10., 10.), 0.9), det(bx(5., 0., 15., 10.), 0.8)];
        assert_eq!(nms(&d, 1.0 / 3.0).len(), 2);
        assert_eq!(nms(&d, 0.333).len(), 1);
    }

    #[test]
    fn margin_examples() {
        let bounds = bx(0., 0., 1280., 1280.);
        let b = bx(100., 100., 200., 200.);
        assert_eq!(expand_with_margin(&b, 0.0, &bounds).unwrap(), b);
        assert_eq!(
            expand_with_margin(&b, 0.15, &bounds).unwrap(),
            bx(85., 85., 215., 215.)
        );
        assert_eq!(
            expand_with_margin(&bx(0., 0., 100., 100.), 0.15, &bounds).unwrap(),
            bx(0., 0., 115., 115.)
        );
    }

    #[test]
    fn margin_errors() {
        let bounds = bx(0., 0., 100., 100.);
        assert!(matches!(
            expand_with_margin(&bx(200., 200., 300., 300.), 0.1, &bounds),
            Err(GeometryError::OutOfFrame(_))
        ));
        assert!(matches!(
            expand_with_margin(&bx(0., 0., 10., 10.), -0.1, &bounds),
            Err(GeometryError::NegativeMargin(_))
        ));
    }

    #[test]
    fn crop_transform_examples() {
        let t = make_crop_transform(&bx(0., 0., 320., 320.), 320).unwrap();
        assert_eq!((t.scale, t.pad_x, t.pad_y), (1.0, 0.0, 0.0));

        let t = make_crop_transform(&bx(0., 0., 640., 320.), 320).unwrap();
        assert_eq!((t.scale, t.pad_x, t.pad_y), (0.5, 0.0, 80.0));

        let t = make_crop_transform(&bx(0., 0., 100., 400.), 320).unwrap();
        assert_eq!((t.scale, t.pad_x, t.pad_y), (0.8, 120.0, 0.0));

        assert!(make_crop_transform(&bx(0., 0., 1., 1.), 0).is_err());
    }

    #[test]
    fn project_examples() {
        let region = bx(1000., 500., 1320., 820.);
        let t = make_crop_transform(&region, 320).unwrap();
        let d = Detection {
            frame: Frame::Crop,
            ..det(bx(10., 20., 30., 40.), 0.7)
        };
        let g = project_to_global(&d, &t).unwrap();
        assert_eq!(g.bbox, bx(1010., 520., 1030., 540.));
        assert_eq!(g.confidence, 0.7);
        assert_eq!(g.frame, Frame::Global);

        // 640x320 region at (200, 300): crop box (0,80,160,240) is its top-left 320x320
        let region = bx(200., 300., 840., 620.);
        let t = make_crop_transform(&region, 320).unwrap();
        let d = det(bx(0., 80., 160., 240.), 0.5);
        assert_eq!(
            project_to_global(&d, &t).unwrap().bbox,
            bx(200., 300., 520., 620.)
        );
    }

    #[test]
    fn project_rejects_padding() {
        let t = make_crop_transform(&bx(0., 0., 640., 320.), 320).unwrap();
        // content spans y in [80, 240]
        let inside_tol = det(bx(0., 79.5, 10., 100.), 0.5);
        let g = project_to_global(&inside_tol, &t).unwrap();
        assert_eq!(g.bbox.y_min(), 0.0);
        let too_far = det(bx(0., 70., 10., 100.), 0.5);
        assert!(matches!(
            project_to_global(&too_far, &t),
            Err(GeometryError::IntoPadding { .. })
        ));
    }

    #[test]
    fn round_trip_point() {
        let t = make_crop_transform(&bx(13.25, 700.5, 431.0, 901.0), 320).unwrap();
        let (cx, cy) = t.forward(200.125, 800.75);
        let (gx, gy) = t.backward(cx, cy);
        assert!((gx - 200.125).abs() < 1e-9 && (gy - 800.75).abs() < 1e-9);
    }
}
