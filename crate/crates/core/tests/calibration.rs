use handcascade::cascade::{Cascade, PipelineConfig};
use handcascade::detectors::oracle_from_profile;
use handcascade::evaluation::{calibrate_profiles, evaluate, AccuracyTargets, EvalReport, Framework};
use handcascade::simulator::{generate_corpus, ClassCounts, CorpusSpec};

/// 118 copies of the 450/200/200 split: 100 300 scenes, ratio kept exact.
fn monte_carlo(targets: &AccuracyTargets, seed: u64) -> (EvalReport, [f64; 3]) {
    let cfg = PipelineConfig::default();
    let counts = ClassCounts::table_split();
    let p = calibrate_profiles(targets, &counts, &Default::default(), &cfg, seed).unwrap();
    let corpus = generate_corpus(&CorpusSpec {
        counts: counts.scaled(118),
        seed,
        ..CorpusSpec::default()
    })
    .unwrap();
    let (i, ii) = (oracle_from_profile(p.single_i).unwrap(), oracle_from_profile(p.single_ii).unwrap());
    let (c, f) = (oracle_from_profile(p.coarse).unwrap(), oracle_from_profile(p.fine).unwrap());
    let fws = [
        Framework::single("single_i", &i, cfg.tau_coarse),
        Framework::single("single_ii", &ii, cfg.tau_fine),
        Framework::cascade("cascade", Cascade::new(&c, &f, cfg.clone()).unwrap()),
    ];
    let e = p.expected;
    (evaluate(&fws, &corpus).unwrap(), [e.single_i, e.single_ii, e.cascade])
}

#[test]
fn empirical_accuracy_tracks_analytic() {
    for (targets, seed) in [(AccuracyTargets::YOLOV5, 21), (AccuracyTargets::FASTER_RCNN, 22)] {
        let (rep, expected) = monte_carlo(&targets, seed);
        assert_eq!(rep.corpus.total, 100_300);
        for (name, want) in ["single_i", "single_ii", "cascade"].into_iter().zip(expected) {
            let got = rep.framework(name).unwrap().accuracy;
            assert!((got - want).abs() < 0.005, "{name}: {got} vs {want}");
        }
    }
}
