//! Symbolic scene generator.
//!
//! A [`Scene`] carries no pixels, only the latent scenario class and the
//! ground-truth placements an oracle detector keys its behaviour on:
//!
//! * class `b` (genuine smoking): a pose region and a nested fine region,
//! * class `a` (smoking-like pose, nothing held): a pose-sized distractor,
//! * class `c` (cigarette-like stick, no pose): a stick-sized distractor,
//! * `plain_negative`: nothing at all.
//!
//! Scene `i` is drawn from its own `ChaCha8Rng` stream derived from
//! `(seed, i)`, so generation shards across threads without changing output.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::geometry::BBox;
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SceneClass {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
    #[serde(rename = "c")]
    C,
    #[serde(rename = "plain_negative")]
    PlainNegative,
}

impl SceneClass {
    pub const ALL: [SceneClass; 4] = [
        SceneClass::B,
        SceneClass::A,
        SceneClass::C,
        SceneClass::PlainNegative,
    ];

    pub fn is_positive(self) -> bool {
        self == SceneClass::B
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub v: u32,
    pub scene_id: u64,
    pub class: SceneClass,
    pub image_bounds: BBox,
    /// Hand, cigarette and head envelope. Class `b` only.
    pub gt_coarse_region: Option<BBox>,
    /// Fingers, mouth and cigarette. Class `b` only, nested in the coarse region.
    pub gt_fine_region: Option<BBox>,
    /// Pose-like region (class `a`) or stick-like region (class `c`).
    pub distractor_region: Option<BBox>,
    pub label: bool,
}

impl Scene {
    pub fn image_ref(&self) -> String {
        format!("scene:{}", self.scene_id)
    }

    /// Checks the per-class placement rules.
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |why: &str| {
            Err(SimulatorError::InvalidScene {
                scene_id: self.scene_id,
                reason: why.to_string(),
            })
        };
        if self.label != self.class.is_positive() {
            return bad("label disagrees with class");
        }
        for r in [
            self.gt_coarse_region,
            self.gt_fine_region,
            self.distractor_region,
        ]
        .iter()
        .flatten()
        {
            if !self.image_bounds.contains(r) {
                return bad("region outside image bounds");
            }
        }
        match self.class {
            SceneClass::B => match (self.gt_coarse_region, self.gt_fine_region) {
                (Some(c), Some(f)) if c.contains(&f) && self.distractor_region.is_none() => Ok(()),
                _ => bad("class b needs a fine region nested in a coarse region"),
            },
            SceneClass::A | SceneClass::C => {
                if self.gt_coarse_region.is_some()
                    || self.gt_fine_region.is_some()
                    || self.distractor_region.is_none()
                {
                    bad("classes a and c carry exactly one distractor region")
                } else {
                    Ok(())
                }
            }
            SceneClass::PlainNegative => {
                if self.gt_coarse_region.is_some()
                    || self.gt_fine_region.is_some()
                    || self.distractor_region.is_some()
                {
                    bad("plain negatives carry no regions")
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("corpus spec: {0}")]
    Spec(String),
    #[error("scene {scene_id}: {reason}")]
    InvalidScene { scene_id: u64, reason: String },
    #[error("manifest line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest line {line}: unsupported schema version {version}")]
    Version { line: usize, version: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub b: u64,
    pub a: u64,
    pub c: u64,
    pub plain_negative: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.b + self.a + self.c + self.plain_negative
    }

    pub fn get(&self, class: SceneClass) -> u64 {
        match class {
            SceneClass::B => self.b,
            SceneClass::A => self.a,
            SceneClass::C => self.c,
            SceneClass::PlainNegative => self.plain_negative,
        }
    }

    pub fn positives(&self) -> u64 {
        self.b
    }

    pub fn negatives(&self) -> u64 {
        self.a + self.c + self.plain_negative
    }

    /// The 450 positive / 400 negative test split, negatives halved a:c.
    pub fn table_split() -> Self {
        ClassCounts {
            b: 450,
            a: 200,
            c: 200,
            plain_negative: 0,
        }
    }

    pub fn scaled(&self, factor: u64) -> Self {
        ClassCounts {
            b: self.b * factor,
            a: self.a * factor,
            c: self.c * factor,
            plain_negative: self.plain_negative * factor,
        }
    }

    pub fn of(scenes: &[Scene]) -> Self {
        let mut counts = ClassCounts::default();
        for s in scenes {
            match s.class {
                SceneClass::B => counts.b += 1,
                SceneClass::A => counts.a += 1,
                SceneClass::C => counts.c += 1,
                SceneClass::PlainNegative => counts.plain_negative += 1,
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub counts: ClassCounts,
    pub seed: u64,
    pub image_width: f64,
    pub image_height: f64,
    /// Pose-region height as a fraction of image height.
    pub coarse_height_range: (f64, f64),
    /// Width/height ratio of pose regions.
    pub coarse_aspect_range: (f64, f64),
    /// Fine-region side lengths as fractions of the enclosing pose region.
    pub fine_fraction_range: (f64, f64),
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            counts: ClassCounts::table_split(),
            seed: 0,
            image_width: 1920.0,
            image_height: 1080.0,
            coarse_height_range: (0.10, 0.35),
            coarse_aspect_range: (0.8, 1.25),
            fine_fraction_range: (0.15, 0.35),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let err = |m: String| Err(SimulatorError::Spec(m));
        if self.counts.total() == 0 {
            return err("corpus must contain at least one scene".into());
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0)
            || !self.image_width.is_finite()
            || !self.image_height.is_finite()
        {
            return err("image dimensions must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("coarse_height_range", self.coarse_height_range),
            ("coarse_aspect_range", self.coarse_aspect_range),
            ("fine_fraction_range", self.fine_fraction_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return err(format!("{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})"));
            }
        }
        if self.coarse_height_range.1 > 1.0 {
            return err(format!(
                "coarse regions up to {} of the image height do not fit",
                self.coarse_height_range.1
            ));
        }
        let widest = self.coarse_height_range.1 * self.image_height * self.coarse_aspect_range.1;
        if widest > self.image_width {
            return err(format!(
                "coarse regions up to {widest}px wide exceed the {}px image width",
                self.image_width
            ));
        }
        if self.fine_fraction_range.1 > 1.0 {
            return err("fine regions must fit inside their pose region".into());
        }
        Ok(())
    }

    fn class_of(&self, scene_id: u64) -> SceneClass {
        let mut start = 0;
        for class in SceneClass::ALL {
            let n = self.counts.get(class);
            if scene_id < start + n {
                return class;
            }
            start += n;
        }
        unreachable!("scene id beyond corpus size")
    }
}

/// Scenes are laid out by class in the order b, a, c, plain_negative with
/// consecutive ids starting at 0.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Scene>, SimulatorError> {
    generate_corpus_with(spec, Execution::default())
}

pub fn generate_corpus_with(spec: &CorpusSpec, exec: Execution) -> Result<Vec<Scene>, SimulatorError> {
    spec.validate()?;
    Ok(exec::map_range(exec, 0..spec.counts.total(), |id| {
        generate_scene(spec, id)
    }))
}

/// Scene `scene_id` of the corpus described by `spec`. Assumes a validated spec.
pub fn generate_scene(spec: &CorpusSpec, scene_id: u64) -> Scene {
    let class = spec.class_of(scene_id);
    let mut rng = rng::stream_rng(spec.seed, scene_id);
    let bounds = BBox::from_size(spec.image_width, spec.image_height).expect("validated");

    let (gt_coarse, gt_fine, distractor) = match class {
        SceneClass::B => {
            let coarse = place_coarse(spec, &bounds, &mut rng);
            let fine = place_fine(spec, &coarse, &mut rng);
            (Some(coarse), Some(fine), None)
        }
        SceneClass::A => (None, None, Some(place_coarse(spec, &bounds, &mut rng))),
        SceneClass::C => {
            // stick-sized: a fine region of a hypothetical pose region
            let host = place_coarse(spec, &bounds, &mut rng);
            (None, None, Some(place_fine(spec, &host, &mut rng)))
        }
        SceneClass::PlainNegative => (None, None, None),
    };

    Scene {
        v: MANIFEST_VERSION,
        scene_id,
        class,
        image_bounds: bounds,
        gt_coarse_region: gt_coarse,
        gt_fine_region: gt_fine,
        distractor_region: distractor,
        label: class.is_positive(),
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn place_within<R: Rng>(rng: &mut R, outer: &BBox, w: f64, h: f64) -> BBox {
    let w = w.min(outer.width());
    let h = h.min(outer.height());
    let x = outer.x_min() + uniform(rng, (0.0, outer.width() - w));
    let y = outer.y_min() + uniform(rng, (0.0, outer.height() - h));
    // float rounding can push the far edge a hair past the outer box
    BBox::new(x, y, (x + w).min(outer.x_max()), (y + h).min(outer.y_max()))
        .expect("positive size inside outer box")
}

fn place_coarse<R: Rng>(spec: &CorpusSpec, bounds: &BBox, rng: &mut R) -> BBox {
    let h = uniform(rng, spec.coarse_height_range) * bounds.height();
    let w = h * uniform(rng, spec.coarse_aspect_range);
    place_within(rng, bounds, w, h)
}

fn place_fine<R: Rng>(spec: &CorpusSpec, coarse: &BBox, rng: &mut R) -> BBox {
    let h = uniform(rng, spec.fine_fraction_range) * coarse.height();
    let w = uniform(rng, spec.fine_fraction_range) * coarse.width();
    place_within(rng, coarse, w, h)
}

pub fn write_manifest<W: Write>(mut out: W, scenes: &[Scene]) -> Result<(), SimulatorError> {
    for s in scenes {
        serde_json::to_writer(&mut out, s).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest<R: BufRead>(input: R) -> Result<Vec<Scene>, SimulatorError> {
    let mut scenes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene =
            serde_json::from_str(&line).map_err(|source| SimulatorError::Parse { line: i + 1, source })?;
        if scene.v != MANIFEST_VERSION {
            return Err(SimulatorError::Version {
                line: i + 1,
                version: scene.v,
            });
        }
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(b: u64, a: u64, c: u64, p: u64, seed: u64) -> CorpusSpec {
        CorpusSpec {
            counts: ClassCounts {
                b,
                a,
                c,
                plain_negative: p,
            },
            seed,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn table_split_counts() {
        let scenes = generate_corpus(&spec(450, 200, 200, 0, 1)).unwrap();
        assert_eq!(scenes.len(), 850);
        assert_eq!(scenes.iter().filter(|s| s.label).count(), 450);
        assert_eq!(ClassCounts::of(&scenes), ClassCounts::table_split());
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_corpus(&spec(1, 0, 0, 0, 7)).unwrap();
        let b = generate_corpus(&spec(1, 0, 0, 0, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&spec(1, 0, 0, 0, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sequential_matches_parallel() {
        let s = spec(300, 100, 100, 50, 3);
        assert_eq!(
            generate_corpus_with(&s, Execution::Sequential).unwrap(),
            generate_corpus_with(&s, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn every_scene_obeys_class_rules() {
        let scenes = generate_corpus(&spec(500, 500, 500, 100, 11)).unwrap();
        for s in &scenes {
            s.validate().unwrap();
            if s.class == SceneClass::B {
                let (c, f) = (s.gt_coarse_region.unwrap(), s.gt_fine_region.unwrap());
                assert!(crate::geometry::iou(&c, &f) > 0.0);
                let rel = c.height() / s.image_bounds.height();
                assert!((0.10 - 1e-12..=0.35 + 1e-12).contains(&rel));
                let frac = f.height() / c.height();
                assert!((0.15 - 1e-9..=0.35 + 1e-9).contains(&frac));
            }
        }
    }

    #[test]
    fn spec_errors() {
        assert!(matches!(
            generate_corpus(&spec(0, 0, 0, 0, 1)),
            Err(SimulatorError::Spec(_))
        ));
        let mut s = spec(1, 0, 0, 0, 1);
        s.coarse_height_range = (0.5, 1.5);
        assert!(generate_corpus(&s).is_err());
        let mut s = spec(1, 0, 0, 0, 1);
        s.image_width = 100.0;
        assert!(generate_corpus(&s).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let scenes = generate_corpus(&spec(3, 2, 2, 1, 5)).unwrap();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &scenes).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 8);
        let back = read_manifest(buf.as_slice()).unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn manifest_rejects_bad_lines() {
        let line = r#"{"v":2,"scene_id":0,"class":"plain_negative","image_bounds":[0,0,10,10],"gt_coarse_region":null,"gt_fine_region":null,"distractor_region":null,"label":false}"#;
        assert!(matches!(
            read_manifest(line.as_bytes()),
            Err(SimulatorError::Version { line: 1, version: 2 })
        ));
        let line = r#"{"v":1,"scene_id":0,"class":"b","image_bounds":[0,0,10,10],"gt_coarse_region":null,"gt_fine_region":null,"distractor_region":null,"label":true}"#;
        assert!(matches!(
            read_manifest(line.as_bytes()),
            Err(SimulatorError::InvalidScene { .. })
        ));
    }
}
