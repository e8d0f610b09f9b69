//! Image-level scoring of detection frameworks over a labeled corpus.
//!
//! Each framework maps a scene to a boolean decision; the report holds the
//! confusion counts and derived rates per framework. Decision errors are
//! counted separately and never scored as negatives.

mod calibration;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{run_single, Cascade};
use crate::detectors::{Detection, Detector, Input};
use crate::exec::{self, Execution};
use crate::geometry::{iou, BBox};
use crate::simulator::{ClassCounts, Scene};

pub use calibration::{
    calibrate_profiles, expected_accuracy_cascade, expected_accuracy_single, AccuracyTargets, CalibratedProfiles,
    CalibrationConventions, CalibrationError, ExpectedAccuracy,
};
pub use report::{display_name, render, ReportError, ReportFormat};

pub const REPORT_VERSION: u32 = 1;

/// Stated in every report: the calibration model treats coarse and fine
/// firings on the same scene as independent events.
pub const INDEPENDENCE_ASSUMPTION: &str = "image-level accuracy; coarse and fine detector firings are modeled as \
independent Bernoulli events per scenario class (a: pose without cigarette, b: smoking, c: stick without pose)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no frameworks to evaluate")]
    NoFrameworks,
}

/// Anything that turns a scene into a yes/no decision.
pub trait Decider: Sync {
    fn decide(&self, scene: &Scene) -> Result<bool, String>;
}

impl<F, E> Decider for F
where
    F: Fn(&Scene) -> Result<bool, E> + Sync,
    E: std::fmt::Display,
{
    fn decide(&self, scene: &Scene) -> Result<bool, String> {
        self(scene).map_err(|e| e.to_string())
    }
}

struct CascadeDecider<'a>(Cascade<'a>);

impl Decider for CascadeDecider<'_> {
    fn decide(&self, scene: &Scene) -> Result<bool, String> {
        self.0
            .run(Input::Scene(scene))
            .map(|r| r.image_decision)
            .map_err(|e| e.to_string())
    }
}

struct SingleDecider<'a> {
    model: &'a dyn Detector,
    tau: f64,
}

impl Decider for SingleDecider<'_> {
    fn decide(&self, scene: &Scene) -> Result<bool, String> {
        run_single(self.model, Input::Scene(scene), self.tau)
            .map(|r| r.decision)
            .map_err(|e| e.to_string())
    }
}

pub struct Framework<'a> {
    pub name: String,
    decider: Box<dyn Decider + 'a>,
}

impl<'a> Framework<'a> {
    pub fn new(name: impl Into<String>, decider: impl Decider + 'a) -> Self {
        Framework {
            name: name.into(),
            decider: Box::new(decider),
        }
    }

    pub fn cascade(name: impl Into<String>, cascade: Cascade<'a>) -> Self {
        Self::new(name, CascadeDecider(cascade))
    }

    pub fn single(name: impl Into<String>, model: &'a dyn Detector, tau: f64) -> Self {
        Self::new(name, SingleDecider { model, tau })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub errors: u64,
}

impl Confusion {
    pub fn record(label: bool, decision: Result<bool, String>) -> Self {
        let mut c = Confusion::default();
        match (decision, label) {
            (Ok(true), true) => c.tp = 1,
            (Ok(true), false) => c.fp = 1,
            (Ok(false), false) => c.tn = 1,
            (Ok(false), true) => c.fn_ = 1,
            (Err(_), _) => c.errors = 1,
        }
        c
    }

    pub fn merge(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
            errors: self.errors + o.errors,
        }
    }

    pub fn scored(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.scored()).unwrap_or(0.0)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameworkScore {
    pub name: String,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl FrameworkScore {
    pub fn from_confusion(name: impl Into<String>, c: Confusion) -> Self {
        FrameworkScore {
            name: name.into(),
            accuracy: c.accuracy(),
            precision: c.precision(),
            recall: c.recall(),
            confusion: c,
        }
    }

    pub fn error_fraction(&self) -> f64 {
        ratio(self.confusion.errors, self.confusion.errors + self.confusion.scored()).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub total: u64,
    pub positives: u64,
    pub negatives: u64,
    pub classes: ClassCounts,
}

impl CorpusSummary {
    pub fn of(scenes: &[Scene]) -> Self {
        let classes = ClassCounts::of(scenes);
        CorpusSummary {
            total: classes.total(),
            positives: classes.positives(),
            negatives: classes.negatives(),
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub v: u32,
    /// Detector family the frameworks were built from, e.g. "Yolov5".
    pub model: String,
    pub assumptions: String,
    pub corpus: CorpusSummary,
    pub frameworks: Vec<FrameworkScore>,
    /// Fully resolved configuration of the run, echoed for provenance.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn framework(&self, name: &str) -> Option<&FrameworkScore> {
        self.frameworks.iter().find(|f| f.name == name)
    }
}

pub fn evaluate(frameworks: &[Framework<'_>], corpus: &[Scene]) -> Result<EvalReport, EvalError> {
    evaluate_with(frameworks, corpus, Execution::default())
}

pub fn evaluate_with(frameworks: &[Framework<'_>], corpus: &[Scene], exec: Execution) -> Result<EvalReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if frameworks.is_empty() {
        return Err(EvalError::NoFrameworks);
    }
    let scores = frameworks
        .iter()
        .map(|fw| {
            let c = exec::map_reduce(
                exec,
                corpus,
                Confusion::default(),
                |s| Confusion::record(s.label, fw.decider.decide(s)),
                Confusion::merge,
            );
            FrameworkScore::from_confusion(fw.name.clone(), c)
        })
        .collect();
    Ok(EvalReport {
        v: REPORT_VERSION,
        model: String::new(),
        assumptions: INDEPENDENCE_ASSUMPTION.to_string(),
        corpus: CorpusSummary::of(corpus),
        frameworks: scores,
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxMatch {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BoxMatch {
    pub fn merge(self, o: BoxMatch) -> BoxMatch {
        BoxMatch {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }
}

/// Box-level matching: predictions by descending confidence each claim the
/// unmatched ground truth with highest IoU, if that IoU is at least
/// `iou_threshold`.
pub fn match_boxes(preds: &[Detection], gts: &[BBox], iou_threshold: f64) -> BoxMatch {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut m = BoxMatch::default();
    for i in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, g)| (j, iou(&preds[i].bbox, g)))
            .filter(|&(_, v)| v >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((j, _)) => {
                taken[j] = true;
                m.tp += 1;
            }
            None => m.fp += 1,
        }
    }
    m.fn_ = taken.iter().filter(|t| !**t).count() as u64;
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::PipelineConfig;
    use crate::detectors::{oracle_from_profile, DetectorProfile, Frame, Label, Role};
    use crate::simulator::{generate_corpus, CorpusSpec};

    fn table_corpus(seed: u64) -> Vec<Scene> {
        generate_corpus(&CorpusSpec {
            seed,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn perfect_cascade_scores_one() {
        let corpus = table_corpus(1);
        let c = oracle_from_profile(DetectorProfile::perfect(Role::Coarse, 1)).unwrap();
        let f = oracle_from_profile(DetectorProfile::perfect(Role::Fine, 2)).unwrap();
        let cascade = Cascade::new(&c, &f, PipelineConfig::default()).unwrap();
        let rep = evaluate(&[Framework::cascade("cascade", cascade)], &corpus).unwrap();
        let s = rep.framework("cascade").unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!((s.confusion.tp, s.confusion.tn), (450, 400));
        assert_eq!(rep.corpus.total, 850);
    }

    #[test]
    fn all_false_decider() {
        let corpus = table_corpus(2);
        let never = |_: &Scene| Ok::<_, String>(false);
        let rep = evaluate(&[Framework::new("never", never)], &corpus).unwrap();
        let s = &rep.frameworks[0];
        assert!((s.accuracy - 400.0 / 850.0).abs() < 1e-15);
        assert!((s.accuracy - 0.4706).abs() < 5e-5);
        assert_eq!(s.precision, None);
        assert_eq!(s.recall, Some(0.0));
    }

    #[test]
    fn errors_are_counted_not_scored() {
        let corpus = table_corpus(3);
        let flaky = |s: &Scene| {
            if s.scene_id.is_multiple_of(10) {
                Err("sidecar down")
            } else {
                Ok(s.label)
            }
        };
        let rep = evaluate(&[Framework::new("flaky", flaky)], &corpus).unwrap();
        let s = &rep.frameworks[0];
        assert_eq!(s.confusion.errors, 85);
        assert_eq!(s.confusion.scored() + s.confusion.errors, 850);
        assert_eq!(s.accuracy, 1.0);
        assert!((s.error_fraction() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs() {
        let never = |_: &Scene| Ok::<_, String>(false);
        assert!(matches!(
            evaluate(&[Framework::new("x", never)], &[]),
            Err(EvalError::EmptyCorpus)
        ));
        assert!(matches!(evaluate(&[], &table_corpus(1)), Err(EvalError::NoFrameworks)));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let corpus = table_corpus(4);
        let m = oracle_from_profile(DetectorProfile::new(Role::SingleI, 0.9, 0.7, 0.2, 5)).unwrap();
        let fw = [Framework::single("single_i", &m, 0.25)];
        assert_eq!(
            evaluate_with(&fw, &corpus, Execution::Sequential).unwrap(),
            evaluate_with(&fw, &corpus, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn box_matching() {
        let b = |a: f64| BBox::new(a, 0.0, a + 10.0, 10.0).unwrap();
        let d = |a: f64, c: f64| Detection::new(Label::FineCigarette, c, b(a), Frame::Global).unwrap();
        // two predictions on the same truth: one tp, one fp; second truth missed
        let m = match_boxes(&[d(0.0, 0.6), d(1.0, 0.9)], &[b(0.0), b(100.0)], 0.5);
        assert_eq!(m, BoxMatch { tp: 1, fp: 1, fn_: 1 });
        // jitter well under the threshold still matches
        let m = match_boxes(&[d(0.5, 0.9)], &[b(0.0)], 0.5);
        assert_eq!(m, BoxMatch { tp: 1, fp: 0, fn_: 0 });
    }
}
