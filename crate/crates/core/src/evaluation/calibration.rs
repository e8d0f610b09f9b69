//! Solving oracle profiles for target accuracies.
//!
//! Under the independence model, with `e(p, k)` the probability that profile
//! `p` yields a detection above its threshold on a scene of class `k`:
//!
//! ```text
//! E[acc_single]  = (n_b e(p, b) + Σ_{k∈a,c} n_k (1 - e(p, k)) + n_plain) / N
//! E[acc_cascade] = (n_b e(c, b) e(f, b) + Σ_{k∈a,c} n_k (1 - e(c, k) e(f, k)) + n_plain) / N
//! ```
//!
//! Each single model has two free false-positive rates and the cascade four,
//! so [`CalibrationConventions`] pins the rest:
//!
//! * true-positive rates are fixed (0.95 single, 0.97 per cascade stage),
//! * a single model's off-axis false-positive rate is `off_axis_ratio` times
//!   its on-axis one (Single I errs on poses, Single II on sticks),
//! * the coarse stage inherits Single I's false-positive rates and the fine
//!   stage inherits Single II's a:c ratio, leaving one scale to solve.
//!
//! If a target is reachable with zero false positives the pinned true-positive
//! rates are raised instead. Calibrated profiles draw confidences no lower
//! than their operating threshold, so every firing counts and the expectation
//! is exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::PipelineConfig;
use crate::detectors::{ConfidenceModel, DetectorProfile, Role};
use crate::rng;
use crate::simulator::{ClassCounts, SceneClass};

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("infeasible: {constraint} = {value:.6} outside [0, 1]")]
    Infeasible { constraint: String, value: f64 },
    #[error("calibration input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTargets {
    pub single_i: f64,
    pub single_ii: f64,
    pub cascade: f64,
}

impl AccuracyTargets {
    pub const YOLOV5: AccuracyTargets = AccuracyTargets {
        single_i: 0.714,
        single_ii: 0.753,
        cascade: 0.921,
    };

    pub const FASTER_RCNN: AccuracyTargets = AccuracyTargets {
        single_i: 0.704,
        single_ii: 0.734,
        cascade: 0.913,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConventions {
    pub single_tp: f64,
    pub stage_tp: f64,
    pub off_axis_ratio: f64,
    pub confidence: ConfidenceModel,
    pub jitter: f64,
}

impl Default for CalibrationConventions {
    fn default() -> Self {
        CalibrationConventions {
            single_tp: 0.95,
            stage_tp: 0.97,
            off_axis_ratio: 0.25,
            confidence: ConfidenceModel::default(),
            jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedAccuracy {
    pub single_i: f64,
    pub single_ii: f64,
    pub cascade: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedProfiles {
    pub single_i: DetectorProfile,
    pub single_ii: DetectorProfile,
    pub coarse: DetectorProfile,
    pub fine: DetectorProfile,
    /// Analytic accuracies under the independence model.
    pub expected: ExpectedAccuracy,
}

pub fn expected_accuracy_single(p: &DetectorProfile, tau: f64, counts: &ClassCounts) -> f64 {
    let n = counts.total() as f64;
    let correct: f64 = SceneClass::ALL
        .iter()
        .map(|&k| {
            let e = p.effective_rate(k, tau);
            let hit = if k.is_positive() { e } else { 1.0 - e };
            counts.get(k) as f64 * hit
        })
        .sum();
    correct / n
}

pub fn expected_accuracy_cascade(
    coarse: &DetectorProfile,
    fine: &DetectorProfile,
    cfg: &PipelineConfig,
    counts: &ClassCounts,
) -> f64 {
    let n = counts.total() as f64;
    let correct: f64 = SceneClass::ALL
        .iter()
        .map(|&k| {
            let e = coarse.effective_rate(k, cfg.tau_coarse) * fine.effective_rate(k, cfg.tau_fine);
            let hit = if k.is_positive() { e } else { 1.0 - e };
            counts.get(k) as f64 * hit
        })
        .sum();
    correct / n
}

fn check_rate(constraint: &str, value: f64) -> Result<f64, CalibrationError> {
    // absorb rounding at the boundaries
    const EPS: f64 = 1e-12;
    if !(-EPS..=1.0 + EPS).contains(&value) || value.is_nan() {
        return Err(CalibrationError::Infeasible {
            constraint: constraint.to_string(),
            value,
        });
    }
    Ok(value.clamp(0.0, 1.0))
}

struct SingleRates {
    tp: f64,
    fp_a: f64,
    fp_c: f64,
}

/// Solve one single model. `pose_focused` picks which negative class carries
/// the on-axis false-positive rate.
fn solve_single(
    name: &str,
    target: f64,
    counts: &ClassCounts,
    conv: &CalibrationConventions,
    pose_focused: bool,
) -> Result<SingleRates, CalibrationError> {
    let (nb, na, nc, np) = (
        counts.b as f64,
        counts.a as f64,
        counts.c as f64,
        counts.plain_negative as f64,
    );
    let n = counts.total() as f64;
    let rho = conv.off_axis_ratio;
    // false-positive mass the negatives must absorb
    let excess = nb * conv.single_tp + na + nc + np - n * target;
    if excess <= 0.0 {
        let tp = if nb > 0.0 { (n * target - na - nc - np) / nb } else { 1.0 };
        let tp = check_rate(&format!("{name}.tp_rate_b"), tp)?;
        if nb == 0.0 && excess < 0.0 {
            return Err(CalibrationError::Infeasible {
                constraint: format!("{name} accuracy"),
                value: target,
            });
        }
        return Ok(SingleRates {
            tp,
            fp_a: 0.0,
            fp_c: 0.0,
        });
    }
    let (on_axis_n, off_axis_n, on_name) = if pose_focused {
        (na, nc, "fp_rate_a")
    } else {
        (nc, na, "fp_rate_c")
    };
    let weight = on_axis_n + rho * off_axis_n;
    if weight == 0.0 {
        return Err(CalibrationError::Infeasible {
            constraint: format!("{name}.{on_name}"),
            value: f64::INFINITY,
        });
    }
    let on = check_rate(&format!("{name}.{on_name}"), excess / weight)?;
    let off = on * rho;
    let off = check_rate(
        &format!("{name}.{}", if pose_focused { "fp_rate_c" } else { "fp_rate_a" }),
        off,
    )?;
    let (fp_a, fp_c) = if pose_focused { (on, off) } else { (off, on) };
    Ok(SingleRates {
        tp: conv.single_tp,
        fp_a,
        fp_c,
    })
}

fn profile(
    role: Role,
    tp: f64,
    fp_a: f64,
    fp_c: f64,
    tau: f64,
    conv: &CalibrationConventions,
    seed: u64,
) -> DetectorProfile {
    DetectorProfile {
        role,
        tp_rate_b: tp,
        fp_rate_a: fp_a,
        fp_rate_c: fp_c,
        confidence: ConfidenceModel {
            floor: tau.max(conv.confidence.floor),
            ..conv.confidence
        },
        jitter: conv.jitter,
        rng_seed: rng::derive_seed(seed, rng::stream_id(role.name())),
    }
}

/// Solve oracle profiles whose expected accuracies on `counts` equal
/// `targets`. Single I runs at `tau_coarse`, Single II at `tau_fine`.
pub fn calibrate_profiles(
    targets: &AccuracyTargets,
    counts: &ClassCounts,
    conv: &CalibrationConventions,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<CalibratedProfiles, CalibrationError> {
    if counts.total() == 0 {
        return Err(CalibrationError::Input("corpus has no scenes".into()));
    }
    for (name, t) in [
        ("single_i", targets.single_i),
        ("single_ii", targets.single_ii),
        ("cascade", targets.cascade),
    ] {
        if !(0.0..=1.0).contains(&t) {
            return Err(CalibrationError::Input(format!("{name} target {t} outside [0, 1]")));
        }
    }
    for (name, v) in [
        ("single_tp", conv.single_tp),
        ("stage_tp", conv.stage_tp),
        ("off_axis_ratio", conv.off_axis_ratio),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CalibrationError::Input(format!("{name} = {v} outside [0, 1]")));
        }
    }
    for tau in [cfg.tau_coarse, cfg.tau_fine] {
        if !(0.0..1.0).contains(&tau) {
            return Err(CalibrationError::Input(format!(
                "threshold {tau} leaves no room for oracle confidences"
            )));
        }
    }

    let s1 = solve_single("single_i", targets.single_i, counts, conv, true)?;
    let s2 = solve_single("single_ii", targets.single_ii, counts, conv, false)?;

    let (nb, na, nc, np) = (
        counts.b as f64,
        counts.a as f64,
        counts.c as f64,
        counts.plain_negative as f64,
    );
    let n = counts.total() as f64;
    let rho = conv.off_axis_ratio;
    let (coarse_fa, coarse_fc) = (s1.fp_a, s1.fp_c);
    let excess = nb * conv.stage_tp * conv.stage_tp + na + nc + np - n * targets.cascade;

    let (stage_tp, fine_fa, fine_fc) = if excess <= 0.0 {
        let product = if nb > 0.0 { (n * targets.cascade - na - nc - np) / nb } else { 1.0 };
        let product = check_rate("cascade tp_rate_b product", product)?;
        (product.sqrt(), 0.0, 0.0)
    } else {
        let weight = na * coarse_fa * rho + nc * coarse_fc;
        if weight == 0.0 {
            return Err(CalibrationError::Infeasible {
                constraint: "fine.fp_rate_c (coarse stage never fires on negatives)".into(),
                value: f64::INFINITY,
            });
        }
        let x = check_rate("fine.fp_rate_c", excess / weight)?;
        (conv.stage_tp, check_rate("fine.fp_rate_a", rho * x)?, x)
    };

    let single_i = profile(Role::SingleI, s1.tp, s1.fp_a, s1.fp_c, cfg.tau_coarse, conv, seed);
    let single_ii = profile(Role::SingleII, s2.tp, s2.fp_a, s2.fp_c, cfg.tau_fine, conv, seed);
    let coarse = profile(Role::Coarse, stage_tp, coarse_fa, coarse_fc, cfg.tau_coarse, conv, seed);
    let fine = profile(Role::Fine, stage_tp, fine_fa, fine_fc, cfg.tau_fine, conv, seed);

    let expected = ExpectedAccuracy {
        single_i: expected_accuracy_single(&single_i, cfg.tau_coarse, counts),
        single_ii: expected_accuracy_single(&single_ii, cfg.tau_fine, counts),
        cascade: expected_accuracy_cascade(&coarse, &fine, cfg, counts),
    };
    Ok(CalibratedProfiles {
        single_i,
        single_ii,
        coarse,
        fine,
        expected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ClassCounts {
        ClassCounts::table_split()
    }

    fn solve(t: &AccuracyTargets) -> CalibratedProfiles {
        calibrate_profiles(t, &table(), &Default::default(), &PipelineConfig::default(), 1).unwrap()
    }

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    // Frozen from an exact rational solve of the linear system.
    #[test]
    fn yolov5_golden_rates() {
        let p = solve(&AccuracyTargets::YOLOV5);
        close(p.single_i.fp_rate_a, 0.8824);
        close(p.single_i.fp_rate_c, 0.2206);
        close(p.single_ii.fp_rate_a, 0.18745);
        close(p.single_ii.fp_rate_c, 0.7498);
        close(p.coarse.fp_rate_a, 0.8824);
        close(p.coarse.fp_rate_c, 0.2206);
        close(p.fine.fp_rate_a, 0.11489970534904805);
        close(p.fine.fp_rate_c, 0.4595988213961922);
        close(p.single_i.tp_rate_b, 0.95);
        close(p.fine.tp_rate_b, 0.97);
        close(p.expected.single_i, 0.714);
        close(p.expected.single_ii, 0.753);
        close(p.expected.cascade, 0.921);
    }

    #[test]
    fn faster_rcnn_golden_rates() {
        let p = solve(&AccuracyTargets::FASTER_RCNN);
        close(p.single_i.fp_rate_a, 0.9164);
        close(p.single_i.fp_rate_c, 0.2291);
        close(p.single_ii.fp_rate_a, 0.2036);
        close(p.single_ii.fp_rate_c, 0.8144);
        close(p.fine.fp_rate_a, 0.1291875818419904);
        close(p.fine.fp_rate_c, 0.5167503273679616);
        close(p.expected.cascade, 0.913);
    }

    #[test]
    fn cascade_expectation_beats_singles() {
        for t in [AccuracyTargets::YOLOV5, AccuracyTargets::FASTER_RCNN] {
            let e = solve(&t).expected;
            assert!(e.cascade >= e.single_i.max(e.single_ii));
        }
    }

    #[test]
    fn perfect_targets_force_perfect_rates() {
        let p = solve(&AccuracyTargets {
            single_i: 1.0,
            single_ii: 1.0,
            cascade: 1.0,
        });
        for prof in [&p.single_i, &p.single_ii, &p.coarse, &p.fine] {
            close(prof.tp_rate_b, 1.0);
            assert_eq!((prof.fp_rate_a, prof.fp_rate_c), (0.0, 0.0));
        }
        close(p.expected.cascade, 1.0);
    }

    #[test]
    fn infeasible_targets_name_the_constraint() {
        let err = calibrate_profiles(
            &AccuracyTargets {
                single_i: 0.2,
                ..AccuracyTargets::YOLOV5
            },
            &table(),
            &Default::default(),
            &PipelineConfig::default(),
            1,
        )
        .unwrap_err();
        match err {
            CalibrationError::Infeasible { constraint, value } => {
                assert_eq!(constraint, "single_i.fp_rate_a");
                assert!(value > 1.0);
            }
            e => panic!("unexpected {e:?}"),
        }
        let err = calibrate_profiles(
            &AccuracyTargets {
                cascade: 0.5,
                ..AccuracyTargets::YOLOV5
            },
            &table(),
            &Default::default(),
            &PipelineConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, CalibrationError::Infeasible { ref constraint, .. } if constraint == "fine.fp_rate_c"));
        assert!(matches!(
            calibrate_profiles(
                &AccuracyTargets {
                    cascade: 1.2,
                    ..AccuracyTargets::YOLOV5
                },
                &table(),
                &Default::default(),
                &PipelineConfig::default(),
                1
            ),
            Err(CalibrationError::Input(_))
        ));
    }

    #[test]
    fn pass_probability_enters_expectation() {
        let mut p = DetectorProfile::new(Role::SingleI, 1.0, 0.0, 0.0, 0);
        let counts = ClassCounts {
            b: 1,
            ..Default::default()
        };
        // default confidences (floor 0) sometimes land under 0.9
        let acc = expected_accuracy_single(&p, 0.9, &counts);
        assert!((acc - p.confidence.pass_probability(0.9)).abs() < 1e-15);
        assert!(acc < 0.9);
        p.confidence.floor = 0.9;
        assert_eq!(expected_accuracy_single(&p, 0.9, &counts), 1.0);
    }
}
