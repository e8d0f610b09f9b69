use std::collections::HashMap;

use super::{check_region, DetectError, Detection, Detector, Frame, Input, Role};
use crate::geometry::{make_crop_transform, BBox};

/// Replays canned global-frame detections keyed by image reference.
///
/// Full-image calls return every canned detection. Region calls return the
/// ones lying entirely inside the region, re-expressed in the crop frame.
#[derive(Debug, Clone)]
pub struct ReplayDetector {
    name: String,
    role: Role,
    input_size: u32,
    table: HashMap<String, Vec<Detection>>,
}

impl ReplayDetector {
    pub fn new(name: impl Into<String>, role: Role, input_size: u32) -> Self {
        assert!(input_size > 0, "input size must be positive");
        ReplayDetector {
            name: name.into(),
            role,
            input_size,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, dets: Vec<Detection>) {
        self.table.insert(image_ref.into(), dets);
    }
}

impl Detector for ReplayDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn role(&self) -> Role {
        self.role
    }

    fn input_size(&self) -> u32 {
        self.input_size
    }

    fn detect(&self, input: Input<'_>, region: Option<&BBox>) -> Result<Vec<Detection>, DetectError> {
        check_region(&input, region)?;
        let Some(canned) = self.table.get(&input.reference()) else {
            return Ok(Vec::new());
        };
        let Some(region) = region else {
            return Ok(canned.clone());
        };
        let t = make_crop_transform(region, self.input_size)?;
        Ok(canned
            .iter()
            .filter(|d| region.contains(&d.bbox))
            .map(|d| Detection {
                bbox: t.box_to_crop(&d.bbox),
                frame: Frame::Crop,
                ..d.clone()
            })
            .collect())
    }
}
