//! Detector abstraction.
//!
//! Any object detector can sit behind [`Detector`]: the cascade only needs
//! boxes, labels and confidences. Three implementations ship here:
//!
//! * [`OracleDetector`], a seeded synthetic detector over symbolic scenes,
//! * [`ReplayDetector`], canned global-frame detections cut to the request,
//! * [`SidecarClient`], an external process speaking the line protocol in
//!   [`protocol`].

mod oracle;
pub mod protocol;
mod replay;
mod sidecar;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError};
use crate::simulator::Scene;

pub use oracle::{oracle_from_profile, ConfidenceModel, DetectorProfile, OracleDetector};
pub use replay::ReplayDetector;
pub use sidecar::{sidecar_client, Endpoint, SidecarClient, SidecarConfig, SidecarError};

pub const DEFAULT_COARSE_INPUT_SIZE: u32 = 1280;
pub const DEFAULT_FINE_INPUT_SIZE: u32 = 320;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    CoarsePose,
    FineCigarette,
}

/// Which coordinate frame a detection's box is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Global,
    Crop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: Label,
    #[serde(rename = "conf")]
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub frame: Frame,
}

impl Detection {
    pub fn new(label: Label, confidence: f64, bbox: BBox, frame: Frame) -> Result<Self, DetectError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DetectError::InvalidConfidence(confidence));
        }
        Ok(Detection {
            label,
            confidence,
            bbox,
            frame,
        })
    }
}

/// What a detector is trained to find.
///
/// `Coarse` and `SingleI` look for the whole pose region; `Fine` and
/// `SingleII` look for the cigarette-scale region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Coarse,
    Fine,
    #[serde(rename = "single_i")]
    SingleI,
    #[serde(rename = "single_ii")]
    SingleII,
}

impl Role {
    pub fn label(self) -> Label {
        if self.is_pose_scale() {
            Label::CoarsePose
        } else {
            Label::FineCigarette
        }
    }

    pub fn is_pose_scale(self) -> bool {
        matches!(self, Role::Coarse | Role::SingleI)
    }

    pub fn default_input_size(self) -> u32 {
        if self == Role::Fine {
            DEFAULT_FINE_INPUT_SIZE
        } else {
            DEFAULT_COARSE_INPUT_SIZE
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Coarse => "coarse",
            Role::Fine => "fine",
            Role::SingleI => "single_i",
            Role::SingleII => "single_ii",
        }
    }
}

/// An image handed to a detector.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Scene(&'a Scene),
    Image { reference: &'a str, bounds: BBox },
}

impl<'a> Input<'a> {
    pub fn bounds(&self) -> BBox {
        match self {
            Input::Scene(s) => s.image_bounds,
            Input::Image { bounds, .. } => *bounds,
        }
    }

    pub fn reference(&self) -> String {
        match self {
            Input::Scene(s) => s.image_ref(),
            Input::Image { reference, .. } => (*reference).to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detector transport: {0}")]
    Transport(#[from] SidecarError),
    #[error("{detector} cannot run on {input}")]
    UnsupportedInput { detector: String, input: String },
    #[error("region {region:?} is not inside image bounds {bounds:?}")]
    RegionOutOfBounds { region: BBox, bounds: BBox },
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl DetectError {
    /// Errors caused by a failing or misbehaving external detector.
    pub fn is_transport(&self) -> bool {
        matches!(self, DetectError::Transport(_))
    }
}

/// A detector stage.
///
/// With `region = None` the detector looks at the whole image and answers in
/// the global frame. With a region it looks at the letterboxed crop
/// `make_crop_transform(region, self.input_size())` and answers in that crop's
/// frame. Implementations must be deterministic in `(input, region)`.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn role(&self) -> Role;
    fn input_size(&self) -> u32;
    fn detect(&self, input: Input<'_>, region: Option<&BBox>) -> Result<Vec<Detection>, DetectError>;
}

pub(crate) fn check_region(input: &Input<'_>, region: Option<&BBox>) -> Result<(), DetectError> {
    if let Some(r) = region {
        let bounds = input.bounds();
        if !bounds.contains(r) {
            return Err(DetectError::RegionOutOfBounds { region: *r, bounds });
        }
    }
    Ok(())
}
