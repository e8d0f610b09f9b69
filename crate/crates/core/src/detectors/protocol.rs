//! Sidecar wire protocol: newline-delimited JSON, one response per request.
//!
//! ```text
//! request:  {"v":1,"id":7,"role":"fine","image":"scene:3","region":[x0,y0,x1,y1],"input_size":320}
//! response: {"v":1,"id":7,"detections":[{"label":"fine_cigarette","conf":0.91,"box":[x0,y0,x1,y1]}]}
//!       or: {"v":1,"id":7,"error":"region required for fine"}
//! ```
//!
//! Ids are echoed and unknown fields ignored. Boxes in a response use the
//! request's frame: global for `region: null`, crop frame otherwise.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Detection, Frame, Label, SidecarError};
use crate::geometry::BBox;

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireRole {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub v: u64,
    pub id: u64,
    pub role: WireRole,
    pub image: String,
    pub region: Option<[f64; 4]>,
    pub input_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub label: String,
    pub conf: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Detections {
        v: u64,
        id: u64,
        detections: Vec<WireDetection>,
    },
    Error {
        v: u64,
        id: u64,
        error: String,
    },
}

pub fn encode_request(req: &Request) -> String {
    serde_json::to_string(req).expect("request is always serializable")
}

pub fn encode_response(resp: &Response) -> String {
    serde_json::to_string(resp).expect("response is always serializable")
}

/// Parse one response line and check it answers request `expected_id`.
///
/// Every wire detection is converted or the whole response is rejected, so a
/// successful result has exactly as many detections as the response listed.
pub fn decode_response(line: &str, expected_id: u64, frame: Frame) -> Result<Vec<Detection>, SidecarError> {
    let value: Value = serde_json::from_str(line.trim())
        .map_err(|e| SidecarError::Malformed(format!("not JSON ({e}): {line}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| SidecarError::Malformed(format!("not an object: {line}")))?;

    let v = obj
        .get("v")
        .and_then(Value::as_u64)
        .ok_or_else(|| SidecarError::Malformed("missing integer field \"v\"".into()))?;
    if v != PROTOCOL_VERSION {
        return Err(SidecarError::VersionMismatch {
            expected: PROTOCOL_VERSION,
            got: v,
        });
    }
    let id = obj
        .get("id")
        .and_then(Value::as_u64)
        .ok_or_else(|| SidecarError::Malformed("missing integer field \"id\"".into()))?;
    if id != expected_id {
        return Err(SidecarError::IdMismatch {
            expected: expected_id,
            got: id,
        });
    }

    if let Some(err) = obj.get("error") {
        let msg = err.as_str().map(str::to_owned).unwrap_or_else(|| err.to_string());
        return Err(SidecarError::Remote(msg));
    }
    let dets = obj
        .get("detections")
        .ok_or_else(|| SidecarError::Malformed("neither \"detections\" nor \"error\" present".into()))?;
    let wire: Vec<WireDetection> = serde_json::from_value(dets.clone())
        .map_err(|e| SidecarError::Malformed(format!("bad detections array: {e}")))?;

    wire.iter()
        .enumerate()
        .map(|(i, w)| to_detection(w, frame).map_err(|m| SidecarError::Malformed(format!("detection {i}: {m}"))))
        .collect()
}

fn to_detection(w: &WireDetection, frame: Frame) -> Result<Detection, String> {
    let label: Label = serde_json::from_value(Value::String(w.label.clone()))
        .map_err(|_| format!("unknown label {:?}", w.label))?;
    if !(0.0..=1.0).contains(&w.conf) {
        return Err(format!("confidence {} outside [0, 1]", w.conf));
    }
    let bbox = BBox::try_from(w.bbox).map_err(|e| e.to_string())?;
    Ok(Detection {
        label,
        confidence: w.conf,
        bbox,
        frame,
    })
}
