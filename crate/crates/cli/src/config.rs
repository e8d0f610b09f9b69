//! Flat run configuration: defaults, then the config file, then flags.
//!
//! Every key is both a TOML key and a `--kebab-case` flag. The file must
//! carry `version = 1`.

use std::path::Path;

use clap::{Args, ValueEnum};
use handcascade::cascade::PipelineConfig;
use handcascade::detectors::{ConfidenceModel, DetectorProfile, Role};
use handcascade::evaluation::{AccuracyTargets, CalibrationConventions};
use handcascade::exec::Execution;
use handcascade::rng;
use handcascade::simulator::{ClassCounts, CorpusSpec};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::failure::{Code, Failure, ResultExt};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorSet {
    /// Oracles that fire on true targets only.
    Perfect,
    /// Oracles calibrated to the Yolov5 accuracy row.
    Yolov5,
    /// Oracles calibrated to the Faster RCNN accuracy row.
    FasterRcnn,
    /// Oracles calibrated to the `target_*` keys.
    Calibrated,
}

impl DetectorSet {
    pub fn display(self) -> &'static str {
        match self {
            DetectorSet::Perfect => "Perfect oracles",
            DetectorSet::Yolov5 => "Yolov5",
            DetectorSet::FasterRcnn => "Faster RCNN",
            DetectorSet::Calibrated => "Calibrated",
        }
    }
}

/// Unset keys, as given on the command line or in a file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[arg(skip)]
    #[serde(skip_serializing)]
    pub version: Option<u32>,
    /// Root seed for corpus and detectors.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Smoking scenes.
    #[arg(long)]
    pub b: Option<u64>,
    /// Pose without cigarette.
    #[arg(long)]
    pub a: Option<u64>,
    /// Stick without pose.
    #[arg(long)]
    pub c: Option<u64>,
    #[arg(long)]
    pub plain_negative: Option<u64>,
    #[arg(long)]
    pub image_width: Option<f64>,
    #[arg(long)]
    pub image_height: Option<f64>,
    #[arg(long)]
    pub coarse_input_size: Option<u32>,
    #[arg(long)]
    pub fine_input_size: Option<u32>,
    #[arg(long)]
    pub tau_coarse: Option<f64>,
    #[arg(long)]
    pub tau_fine: Option<f64>,
    #[arg(long)]
    pub margin_fraction: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub max_coarse_regions_per_image: Option<usize>,
    #[arg(long)]
    pub temporal_k: Option<usize>,
    #[arg(long)]
    pub temporal_n: Option<usize>,
    #[arg(long, value_enum)]
    pub detectors: Option<DetectorSet>,
    #[arg(long)]
    pub target_single_i: Option<f64>,
    #[arg(long)]
    pub target_single_ii: Option<f64>,
    #[arg(long)]
    pub target_cascade: Option<f64>,
    #[arg(long)]
    pub single_tp: Option<f64>,
    #[arg(long)]
    pub stage_tp: Option<f64>,
    #[arg(long)]
    pub off_axis_ratio: Option<f64>,
    #[arg(long)]
    pub confidence_mean: Option<f64>,
    #[arg(long)]
    pub confidence_width: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub coarse_tp_rate_b: Option<f64>,
    #[arg(long)]
    pub coarse_fp_rate_a: Option<f64>,
    #[arg(long)]
    pub coarse_fp_rate_c: Option<f64>,
    #[arg(long)]
    pub fine_tp_rate_b: Option<f64>,
    #[arg(long)]
    pub fine_fp_rate_a: Option<f64>,
    #[arg(long)]
    pub fine_fp_rate_c: Option<f64>,
    #[arg(long)]
    pub single_i_tp_rate_b: Option<f64>,
    #[arg(long)]
    pub single_i_fp_rate_a: Option<f64>,
    #[arg(long)]
    pub single_i_fp_rate_c: Option<f64>,
    #[arg(long)]
    pub single_ii_tp_rate_b: Option<f64>,
    #[arg(long)]
    pub single_ii_fp_rate_a: Option<f64>,
    #[arg(long)]
    pub single_ii_fp_rate_c: Option<f64>,
    /// Pose-scale sidecar: a command line, or tcp://host:port.
    #[arg(long)]
    pub sidecar_coarse: Option<String>,
    /// Cigarette-scale sidecar.
    #[arg(long)]
    pub sidecar_fine: Option<String>,
    #[arg(long)]
    pub sidecar_timeout_ms: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Largest tolerated share of failed decisions per framework.
    #[arg(long)]
    pub max_error_fraction: Option<f64>,
    /// Model family shown in reports.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub min_retained_fraction: Option<f64>,
}

/// Fully resolved configuration, echoed into outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub seed: u64,
    pub b: u64,
    pub a: u64,
    pub c: u64,
    pub plain_negative: u64,
    pub image_width: f64,
    pub image_height: f64,
    pub coarse_input_size: u32,
    pub fine_input_size: u32,
    pub tau_coarse: f64,
    pub tau_fine: f64,
    pub margin_fraction: f64,
    pub nms_iou: f64,
    pub max_coarse_regions_per_image: usize,
    pub temporal_k: usize,
    pub temporal_n: usize,
    pub detectors: DetectorSet,
    pub target_single_i: f64,
    pub target_single_ii: f64,
    pub target_cascade: f64,
    pub single_tp: f64,
    pub stage_tp: f64,
    pub off_axis_ratio: f64,
    pub confidence_mean: f64,
    pub confidence_width: f64,
    pub jitter: f64,
    pub coarse_tp_rate_b: Option<f64>,
    pub coarse_fp_rate_a: Option<f64>,
    pub coarse_fp_rate_c: Option<f64>,
    pub fine_tp_rate_b: Option<f64>,
    pub fine_fp_rate_a: Option<f64>,
    pub fine_fp_rate_c: Option<f64>,
    pub single_i_tp_rate_b: Option<f64>,
    pub single_i_fp_rate_a: Option<f64>,
    pub single_i_fp_rate_c: Option<f64>,
    pub single_ii_tp_rate_b: Option<f64>,
    pub single_ii_fp_rate_a: Option<f64>,
    pub single_ii_fp_rate_c: Option<f64>,
    pub sidecar_coarse: Option<String>,
    pub sidecar_fine: Option<String>,
    pub sidecar_timeout_ms: u64,
    pub threads: Option<usize>,
    pub max_error_fraction: f64,
    pub model: Option<String>,
    pub min_retained_fraction: f64,
}

impl Default for Resolved {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let p = PipelineConfig::default();
        let conv = CalibrationConventions::default();
        let t = AccuracyTargets::YOLOV5;
        Resolved {
            seed: 0,
            b: corpus.counts.b,
            a: corpus.counts.a,
            c: corpus.counts.c,
            plain_negative: corpus.counts.plain_negative,
            image_width: corpus.image_width,
            image_height: corpus.image_height,
            coarse_input_size: p.coarse_input_size,
            fine_input_size: p.fine_input_size,
            tau_coarse: p.tau_coarse,
            tau_fine: p.tau_fine,
            margin_fraction: p.margin_fraction,
            nms_iou: p.nms_iou,
            max_coarse_regions_per_image: p.max_coarse_regions_per_image,
            temporal_k: p.temporal_k,
            temporal_n: p.temporal_n,
            detectors: DetectorSet::Perfect,
            target_single_i: t.single_i,
            target_single_ii: t.single_ii,
            target_cascade: t.cascade,
            single_tp: conv.single_tp,
            stage_tp: conv.stage_tp,
            off_axis_ratio: conv.off_axis_ratio,
            confidence_mean: conv.confidence.mean,
            confidence_width: conv.confidence.width,
            jitter: conv.jitter,
            coarse_tp_rate_b: None,
            coarse_fp_rate_a: None,
            coarse_fp_rate_c: None,
            fine_tp_rate_b: None,
            fine_fp_rate_a: None,
            fine_fp_rate_c: None,
            single_i_tp_rate_b: None,
            single_i_fp_rate_a: None,
            single_i_fp_rate_c: None,
            single_ii_tp_rate_b: None,
            single_ii_fp_rate_a: None,
            single_ii_fp_rate_c: None,
            sidecar_coarse: None,
            sidecar_fine: None,
            sidecar_timeout_ms: 10_000,
            threads: None,
            max_error_fraction: 0.0,
            model: None,
            min_retained_fraction: handcascade::dataset::DEFAULT_MIN_RETAINED_FRACTION,
        }
    }
}

fn overlay(base: &mut Map<String, Value>, top: &Settings) {
    let Value::Object(top) = serde_json::to_value(top).expect("settings serialize") else {
        unreachable!("settings is a struct")
    };
    for (k, v) in top {
        if !v.is_null() {
            base.insert(k, v);
        }
    }
}

pub fn load_file(path: &Path) -> Result<Settings, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(anyhow::Error::from)
        .with_code(Code::Io, || format!("reading config {}", path.display()))?;
    let s: Settings = toml::from_str(&text)
        .map_err(anyhow::Error::from)
        .with_code(Code::Usage, || format!("parsing config {}", path.display()))?;
    match s.version {
        Some(CONFIG_VERSION) => Ok(s),
        Some(v) => Err(Failure::new(
            Code::Usage,
            anyhow::anyhow!("config {}: version {v} unsupported, expected {CONFIG_VERSION}", path.display()),
        )),
        None => Err(Failure::new(
            Code::Usage,
            anyhow::anyhow!("config {}: missing `version = {CONFIG_VERSION}`", path.display()),
        )),
    }
}

/// Flags override the file, the file overrides defaults.
pub fn resolve(file: Option<&Path>, flags: &Settings) -> Result<Resolved, Failure> {
    let Value::Object(mut merged) = serde_json::to_value(Resolved::default()).expect("defaults serialize") else {
        unreachable!("resolved is a struct")
    };
    if let Some(path) = file {
        overlay(&mut merged, &load_file(path)?);
    }
    overlay(&mut merged, flags);
    let r: Resolved = serde_json::from_value(Value::Object(merged))
        .map_err(anyhow::Error::from)
        .with_code(Code::Usage, || "resolving configuration".to_string())?;
    r.pipeline()?;
    Ok(r)
}

impl Resolved {
    pub fn counts(&self) -> ClassCounts {
        ClassCounts {
            b: self.b,
            a: self.a,
            c: self.c,
            plain_negative: self.plain_negative,
        }
    }

    pub fn corpus(&self) -> CorpusSpec {
        CorpusSpec {
            counts: self.counts(),
            seed: self.seed,
            image_width: self.image_width,
            image_height: self.image_height,
            ..CorpusSpec::default()
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, Failure> {
        let p = PipelineConfig {
            coarse_input_size: self.coarse_input_size,
            fine_input_size: self.fine_input_size,
            tau_coarse: self.tau_coarse,
            tau_fine: self.tau_fine,
            margin_fraction: self.margin_fraction,
            nms_iou: self.nms_iou,
            max_coarse_regions_per_image: self.max_coarse_regions_per_image,
            temporal_k: self.temporal_k,
            temporal_n: self.temporal_n,
        };
        p.validate().map_err(|e| Failure::new(Code::Usage, e.into()))?;
        Ok(p)
    }

    pub fn conventions(&self) -> CalibrationConventions {
        CalibrationConventions {
            single_tp: self.single_tp,
            stage_tp: self.stage_tp,
            off_axis_ratio: self.off_axis_ratio,
            confidence: ConfidenceModel {
                mean: self.confidence_mean,
                width: self.confidence_width,
                ..ConfidenceModel::default()
            },
            jitter: self.jitter,
        }
    }

    pub fn targets(&self) -> Option<AccuracyTargets> {
        match self.detectors {
            DetectorSet::Perfect => None,
            DetectorSet::Yolov5 => Some(AccuracyTargets::YOLOV5),
            DetectorSet::FasterRcnn => Some(AccuracyTargets::FASTER_RCNN),
            DetectorSet::Calibrated => Some(AccuracyTargets {
                single_i: self.target_single_i,
                single_ii: self.target_single_ii,
                cascade: self.target_cascade,
            }),
        }
    }

    pub fn execution(&self) -> Execution {
        if self.threads == Some(1) {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }

    pub fn model_name(&self) -> String {
        self.model.clone().unwrap_or_else(|| self.detectors.display().to_string())
    }

    /// Apply `<role>_<rate>` overrides on top of a computed profile.
    pub fn apply_overrides(&self, p: &mut DetectorProfile) {
        let (tp, fa, fc) = match p.role {
            Role::Coarse => (self.coarse_tp_rate_b, self.coarse_fp_rate_a, self.coarse_fp_rate_c),
            Role::Fine => (self.fine_tp_rate_b, self.fine_fp_rate_a, self.fine_fp_rate_c),
            Role::SingleI => (self.single_i_tp_rate_b, self.single_i_fp_rate_a, self.single_i_fp_rate_c),
            Role::SingleII => (self.single_ii_tp_rate_b, self.single_ii_fp_rate_a, self.single_ii_fp_rate_c),
        };
        if let Some(v) = tp {
            p.tp_rate_b = v;
        }
        if let Some(v) = fa {
            p.fp_rate_a = v;
        }
        if let Some(v) = fc {
            p.fp_rate_c = v;
        }
    }

    pub fn perfect_profile(&self, role: Role) -> DetectorProfile {
        let mut p = DetectorProfile::perfect(role, rng::derive_seed(self.seed, rng::stream_id(role.name())));
        p.jitter = self.jitter;
        p
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("resolved config serializes")
    }
}
