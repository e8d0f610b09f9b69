use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use super::{check_region, DetectError, Detection, Detector, Frame, Input, Role};
use crate::geometry::{expand_with_margin, make_crop_transform, BBox, GeometryError};
use crate::rng;
use crate::simulator::{Scene, SceneClass};

/// Minimum fraction of the target that must be inside a requested region for
/// the oracle to see it at all.
const MIN_VISIBLE_FRACTION: f64 = 0.5;
/// Stick-to-pose envelope growth used when a pose-scale detector mistakes a
/// stick for a smoking pose.
const STICK_ENVELOPE_MARGIN: f64 = 1.0;
/// Side fraction of the pose-like region a cigarette-scale detector fires on
/// when fooled by a class-a pose.
const DECOY_FRACTION: f64 = 0.25;
const MAX_REJECTIONS: usize = 64;

/// Confidence of fired detections: normal(`mean`, `width`) truncated to
/// `[floor, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceModel {
    pub mean: f64,
    pub width: f64,
    pub floor: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            mean: 0.8,
            width: 0.1,
            floor: 0.0,
        }
    }
}

impl ConfidenceModel {
    fn validate(&self) -> Result<(), String> {
        if !self.mean.is_finite() || !(self.width >= 0.0 && self.width.is_finite()) {
            return Err(format!("bad confidence model {self:?}"));
        }
        if !(0.0..1.0).contains(&self.floor) {
            return Err(format!("confidence floor {} outside [0, 1)", self.floor));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let fallback = self.mean.clamp(self.floor, 1.0);
        if self.width == 0.0 {
            return fallback;
        }
        let normal = Normal::new(self.mean, self.width).expect("validated width");
        for _ in 0..MAX_REJECTIONS {
            let x = normal.sample(rng);
            if (self.floor..=1.0).contains(&x) {
                return x;
            }
        }
        fallback
    }

    /// Probability that a sampled confidence is at least `tau`.
    ///
    /// Ignores the rejection-sampling fallback, whose probability is below
    /// `(1 - mass)^64` for the truncated mass.
    pub fn pass_probability(&self, tau: f64) -> f64 {
        if tau <= self.floor {
            return 1.0;
        }
        if tau > 1.0 {
            return 0.0;
        }
        if self.width == 0.0 {
            return if self.mean.clamp(self.floor, 1.0) >= tau { 1.0 } else { 0.0 };
        }
        let n = StatNormal::new(self.mean, self.width).expect("validated width");
        let hi = n.cdf(1.0);
        let mass = hi - n.cdf(self.floor);
        if mass <= 0.0 {
            return if self.mean.clamp(self.floor, 1.0) >= tau { 1.0 } else { 0.0 };
        }
        ((hi - n.cdf(tau)) / mass).clamp(0.0, 1.0)
    }
}

/// Per-class firing behaviour of a synthetic detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorProfile {
    pub role: Role,
    /// Fires on genuine smoking (class b).
    pub tp_rate_b: f64,
    /// Fires on a smoking-like pose without a cigarette (class a).
    pub fp_rate_a: f64,
    /// Fires on a cigarette-like stick without a smoking pose (class c).
    pub fp_rate_c: f64,
    #[serde(default)]
    pub confidence: ConfidenceModel,
    /// Per-edge jitter of fired boxes as a fraction of the box dimension.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    pub rng_seed: u64,
}

fn default_jitter() -> f64 {
    0.05
}

impl DetectorProfile {
    pub fn new(role: Role, tp_rate_b: f64, fp_rate_a: f64, fp_rate_c: f64, rng_seed: u64) -> Self {
        DetectorProfile {
            role,
            tp_rate_b,
            fp_rate_a,
            fp_rate_c,
            confidence: ConfidenceModel::default(),
            jitter: default_jitter(),
            rng_seed,
        }
    }

    /// Fires on class b only.
    /// Always fires on its true target and never elsewhere. Confidences stay
    /// at or above 0.5, so both default thresholds pass.
    pub fn perfect(role: Role, rng_seed: u64) -> Self {
        let mut p = Self::new(role, 1.0, 0.0, 0.0, rng_seed);
        p.confidence.floor = 0.5;
        p
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, r) in [
            ("tp_rate_b", self.tp_rate_b),
            ("fp_rate_a", self.fp_rate_a),
            ("fp_rate_c", self.fp_rate_c),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(format!("{name} = {r} outside [0, 1]"));
            }
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(format!("jitter {} outside [0, 0.5)", self.jitter));
        }
        self.confidence.validate()
    }

    pub fn rate_for(&self, class: SceneClass) -> f64 {
        match class {
            SceneClass::B => self.tp_rate_b,
            SceneClass::A => self.fp_rate_a,
            SceneClass::C => self.fp_rate_c,
            SceneClass::PlainNegative => 0.0,
        }
    }

    /// Probability that a call on a scene of `class` yields a detection with
    /// confidence at least `tau`.
    pub fn effective_rate(&self, class: SceneClass, tau: f64) -> f64 {
        self.rate_for(class) * self.confidence.pass_probability(tau)
    }
}

/// Synthetic detector whose firing is a Bernoulli draw keyed to the scene's
/// latent class.
///
/// Each call derives its RNG from `(rng_seed, scene_id)`, so the handle is
/// shareable across threads and a scene's outcome never depends on call order.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    name: String,
    profile: DetectorProfile,
    input_size: u32,
}

pub fn oracle_from_profile(p: DetectorProfile) -> Result<OracleDetector, String> {
    p.validate()?;
    Ok(OracleDetector {
        name: format!("oracle-{}", p.role.name()),
        input_size: p.role.default_input_size(),
        profile: p,
    })
}

impl OracleDetector {
    pub fn with_input_size(mut self, size: u32) -> Self {
        assert!(size > 0, "input size must be positive");
        self.input_size = size;
        self
    }

    pub fn profile(&self) -> &DetectorProfile {
        &self.profile
    }

    /// Region this detector would fire on in `scene`.
    pub fn target_region(&self, scene: &Scene) -> Option<BBox> {
        let pose_scale = self.profile.role.is_pose_scale();
        match (scene.class, pose_scale) {
            (SceneClass::B, true) => scene.gt_coarse_region,
            (SceneClass::B, false) => scene.gt_fine_region,
            (SceneClass::A, true) => scene.distractor_region,
            (SceneClass::A, false) => scene.distractor_region.and_then(|r| decoy_inside(&r)),
            (SceneClass::C, true) => scene
                .distractor_region
                .and_then(|r| expand_with_margin(&r, STICK_ENVELOPE_MARGIN, &scene.image_bounds).ok()),
            (SceneClass::C, false) => scene.distractor_region,
            (SceneClass::PlainNegative, _) => None,
        }
    }
}

fn decoy_inside(r: &BBox) -> Option<BBox> {
    let (cx, cy) = r.center();
    let hw = 0.5 * DECOY_FRACTION * r.width();
    let hh = 0.5 * DECOY_FRACTION * r.height();
    BBox::new(cx - hw, cy - hh, cx + hw, cy + hh).ok()
}

fn jittered<R: Rng>(b: &BBox, frac: f64, rng: &mut R) -> BBox {
    if frac == 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let mut d = || rng.random_range(-frac..=frac);
    let (dx0, dy0, dx1, dy1) = (d(), d(), d(), d());
    BBox::new(
        b.x_min() + dx0 * w,
        b.y_min() + dy0 * h,
        b.x_max() + dx1 * w,
        b.y_max() + dy1 * h,
    )
    .unwrap_or(*b)
}

impl Detector for OracleDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn role(&self) -> Role {
        self.profile.role
    }

    fn input_size(&self) -> u32 {
        self.input_size
    }

    fn detect(&self, input: Input<'_>, region: Option<&BBox>) -> Result<Vec<Detection>, DetectError> {
        let Input::Scene(scene) = input else {
            return Err(DetectError::UnsupportedInput {
                detector: self.name.clone(),
                input: input.reference(),
            });
        };
        check_region(&input, region)?;

        let mut rng = rng::stream_rng(self.profile.rng_seed, scene.scene_id);
        let fires = rng.random::<f64>() < self.profile.rate_for(scene.class);
        let Some(target) = self.target_region(scene).filter(|_| fires) else {
            return Ok(Vec::new());
        };

        let view = region.copied().unwrap_or(scene.image_bounds);
        if target.intersection_area(&view) < MIN_VISIBLE_FRACTION * target.area() {
            return Ok(Vec::new());
        }

        let fired = jittered(&target, self.profile.jitter, &mut rng);
        let fired = fired
            .intersection(&view)
            .or_else(|| target.intersection(&view))
            .ok_or(GeometryError::OutOfFrame(target))?;
        let confidence = self.profile.confidence.sample(&mut rng);

        let det = match region {
            None => Detection::new(self.profile.role.label(), confidence, fired, Frame::Global)?,
            Some(r) => {
                let t = make_crop_transform(r, self.input_size)?;
                Detection::new(self.profile.role.label(), confidence, t.box_to_crop(&fired), Frame::Crop)?
            }
        };
        Ok(vec![det])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::simulator::{generate_corpus, ClassCounts, CorpusSpec};

    fn corpus(counts: ClassCounts, seed: u64) -> Vec<Scene> {
        generate_corpus(&CorpusSpec {
            counts,
            seed,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn only(class: SceneClass, n: u64) -> ClassCounts {
        let mut c = ClassCounts::default();
        match class {
            SceneClass::A => c.a = n,
            SceneClass::B => c.b = n,
            SceneClass::C => c.c = n,
            SceneClass::PlainNegative => c.plain_negative = n,
        }
        c
    }

    #[test]
    fn perfect_detector_covers_ground_truth() {
        let scenes = corpus(only(SceneClass::B, 20), 3);
        let mut p = DetectorProfile::perfect(Role::Coarse, 9);
        p.jitter = 0.0;
        let det = oracle_from_profile(p).unwrap();
        for s in &scenes {
            let out = det.detect(Input::Scene(s), None).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].bbox, s.gt_coarse_region.unwrap());
            assert_eq!(out[0].frame, Frame::Global);
        }
        // with default jitter the box still overlaps well
        let det = oracle_from_profile(DetectorProfile::perfect(Role::Coarse, 9)).unwrap();
        for s in &scenes {
            let out = det.detect(Input::Scene(s), None).unwrap();
            assert!(iou(&out[0].bbox, &s.gt_coarse_region.unwrap()) > 0.7);
        }
    }

    #[test]
    fn silent_on_negatives_with_zero_fp() {
        let det = oracle_from_profile(DetectorProfile::perfect(Role::SingleI, 1)).unwrap();
        for class in [SceneClass::A, SceneClass::C, SceneClass::PlainNegative] {
            for s in &corpus(only(class, 50), 4) {
                assert!(det.detect(Input::Scene(s), None).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn firing_fraction_matches_rate() {
        let scenes = corpus(only(SceneClass::C, 10_000), 5);
        let det = oracle_from_profile(DetectorProfile::new(Role::SingleII, 1.0, 0.0, 0.5, 77)).unwrap();
        let fired = scenes
            .iter()
            .filter(|s| !det.detect(Input::Scene(s), None).unwrap().is_empty())
            .count();
        let frac = fired as f64 / scenes.len() as f64;
        assert!((frac - 0.5).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn crop_frame_output_when_region_given() {
        let scenes = corpus(only(SceneClass::B, 10), 6);
        let det = oracle_from_profile(DetectorProfile::perfect(Role::Fine, 2)).unwrap();
        for s in &scenes {
            let region = s.gt_coarse_region.unwrap();
            let out = det.detect(Input::Scene(s), Some(&region)).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].frame, Frame::Crop);
            let t = make_crop_transform(&region, 320).unwrap();
            assert!(t.content_area().contains_within(&out[0].bbox, 1e-9));
        }
    }

    #[test]
    fn fine_oracle_blind_outside_region() {
        let s = &corpus(only(SceneClass::B, 1), 8)[0];
        let det = oracle_from_profile(DetectorProfile::perfect(Role::Fine, 2)).unwrap();
        let fine = s.gt_fine_region.unwrap();
        // a region far from the target
        let far = if fine.x_min() > 960.0 {
            BBox::new(0.0, 0.0, 100.0, 100.0)
        } else {
            BBox::new(1800.0, 0.0, 1900.0, 100.0)
        }
        .unwrap();
        assert!(det.detect(Input::Scene(s), Some(&far)).unwrap().is_empty());
    }

    #[test]
    fn deterministic_per_scene() {
        let scenes = corpus(ClassCounts::table_split(), 9);
        let det = oracle_from_profile(DetectorProfile::new(Role::SingleI, 0.9, 0.6, 0.3, 4)).unwrap();
        let a: Vec<_> = scenes.iter().map(|s| det.detect(Input::Scene(s), None).unwrap()).collect();
        let b: Vec<_> = scenes.iter().rev().map(|s| det.detect(Input::Scene(s), None).unwrap()).collect();
        let b: Vec<_> = b.into_iter().rev().collect();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn rejects_image_inputs_and_bad_profiles() {
        let det = oracle_from_profile(DetectorProfile::perfect(Role::Coarse, 0)).unwrap();
        let bounds = BBox::from_size(10.0, 10.0).unwrap();
        let r = det.detect(Input::Image { reference: "x.jpg", bounds }, None);
        assert!(matches!(r, Err(DetectError::UnsupportedInput { .. })));
        assert!(oracle_from_profile(DetectorProfile::new(Role::Coarse, 1.2, 0.0, 0.0, 0)).is_err());
    }

    #[test]
    fn pass_probability_matches_sampling() {
        let m = ConfidenceModel::default();
        let mut rng = rng::stream_rng(1, 1);
        let n = 200_000;
        let hits = (0..n).filter(|_| m.sample(&mut rng) >= 0.75).count();
        let empirical = hits as f64 / n as f64;
        assert!((empirical - m.pass_probability(0.75)).abs() < 0.005);
        let floored = ConfidenceModel { floor: 0.5, ..m };
        assert_eq!(floored.pass_probability(0.5), 1.0);
        assert!((0..1000).all(|_| floored.sample(&mut rng) >= 0.5));
    }
}
