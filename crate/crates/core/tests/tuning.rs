use slipctl::acceptance::{tuner_oracle_score, TUNER_ORACLE_OPTIMUM};
use slipctl::tuner::{Dimension, Outcome, PreferenceRecord, SearchSpace, TunerConfig, TuningSession};

fn answer(s: &TuningSession, score: impl Fn(&[f64]) -> f64) -> PreferenceRecord {
    let (a, b) = s.pending_pair().unwrap();
    let (fa, fb) = (score(&s.points[a].0), score(&s.points[b].0));
    let outcome = if fa > fb {
        Outcome::APreferred
    } else if fb > fa {
        Outcome::BPreferred
    } else {
        Outcome::Tie
    };
    PreferenceRecord { pair: (a, b), outcome, stable_a: true, stable_b: true }
}

#[test]
fn one_dimensional_best_moves_toward_preferred_corner() {
    let space = SearchSpace { dims: vec![Dimension::new("x", 0.0, 1.0, false, false)] };
    let mut s = TuningSession::new(space, TunerConfig { seed: 2, ..TunerConfig::default() }).unwrap();
    let mut last = f64::NEG_INFINITY;
    for _ in 0..12 {
        if s.pending_pair().is_none() {
            break;
        }
        let rec = answer(&s, |x| x[0]);
        s.record_preference(rec).unwrap();
        let best = s.best_so_far().unwrap().unwrap().point.0[0];
        assert!(best >= last, "best moved back from {last} to {best}");
        last = best;
    }
    assert!(last > 0.9, "best after 12 pairs: {last}");
}

#[test]
fn fifty_pairs_reach_the_synthetic_optimum() {
    for seed in [0, 1] {
        let score = tuner_oracle_score(50, seed, &TUNER_ORACLE_OPTIMUM);
        assert!(score >= 0.9, "seed {seed}: {score}");
    }
}

#[test]
fn session_survives_serialization_mid_run() {
    let mut s = TuningSession::new(SearchSpace::default(), TunerConfig::default()).unwrap();
    for _ in 0..3 {
        let rec = answer(&s, |x| -(x[0] - 100.0).abs());
        s.record_preference(rec).unwrap();
    }
    let mut back = TuningSession::from_json(&s.to_json()).unwrap();
    for _ in 0..3 {
        let ra = answer(&s, |x| -(x[0] - 100.0).abs());
        let rb = answer(&back, |x| -(x[0] - 100.0).abs());
        assert_eq!(ra, rb);
        s.record_preference(ra).unwrap();
        back.record_preference(rb).unwrap();
    }
    assert_eq!(s, back);
}
