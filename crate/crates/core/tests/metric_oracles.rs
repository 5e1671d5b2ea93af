//! Metrics against brute-force oracles and their invariants.

use fasvit::label::Label;
use fasvit::metrics::{auc, eer_threshold, evaluate, hter, roc_curve, trapezoid_area, ScoreRecord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(label: Label, p: f64, i: usize) -> ScoreRecord {
    ScoreRecord {
        sample_id: format!("s{i}"),
        domain: "d".into(),
        label,
        p_live: p,
    }
}

/// Random score set of 2..=500 records with both classes and deliberate ties.
fn random_set(rng: &mut ChaCha8Rng) -> Vec<ScoreRecord> {
    let n = rng.gen_range(2..=500);
    let levels = rng.gen_range(1..=40);
    let mut out: Vec<ScoreRecord> = (0..n)
        .map(|i| {
            let label = if rng.gen_bool(0.5) { Label::Live } else { Label::Spoof };
            let p = if rng.gen_bool(0.5) {
                rng.gen_range(0..=levels) as f64 / levels as f64
            } else {
                rng.gen::<f64>()
            };
            record(label, p, i)
        })
        .collect();
    out[0].label = Label::Live;
    out[1].label = Label::Spoof;
    out
}

fn oracle_counts(scores: &[ScoreRecord], tau: f64) -> (usize, usize, usize, usize) {
    let (mut fa, mut fr, mut nl, mut ns) = (0, 0, 0, 0);
    for r in scores {
        match r.label {
            Label::Live => {
                nl += 1;
                if r.p_live <= tau {
                    fr += 1;
                }
            }
            Label::Spoof => {
                ns += 1;
                if r.p_live > tau {
                    fa += 1;
                }
            }
        }
    }
    (fa, fr, nl, ns)
}

fn oracle_eer(scores: &[ScoreRecord]) -> f64 {
    let mut candidates: Vec<f64> = scores.iter().map(|r| r.p_live).collect();
    candidates.push(f64::NEG_INFINITY);
    candidates.push(f64::INFINITY);
    let mut best: Option<(u128, usize, f64)> = None;
    for &tau in &candidates {
        let (fa, fr, nl, ns) = oracle_counts(scores, tau);
        let gap = ((fa * nl) as i128 - (fr * ns) as i128).unsigned_abs();
        let key = (gap, fa, tau);
        best = Some(match best {
            None => key,
            Some(b) if (key.0, key.1) < (b.0, b.1) || ((key.0, key.1) == (b.0, b.1) && key.2 < b.2) => key,
            Some(b) => b,
        });
    }
    best.unwrap().2
}

fn oracle_auc(scores: &[ScoreRecord]) -> f64 {
    let live: Vec<f64> = scores
        .iter()
        .filter(|r| r.label == Label::Live)
        .map(|r| r.p_live)
        .collect();
    let spoof: Vec<f64> = scores
        .iter()
        .filter(|r| r.label == Label::Spoof)
        .map(|r| r.p_live)
        .collect();
    let mut wins = 0.0;
    for &l in &live {
        for &s in &spoof {
            if l > s {
                wins += 1.0;
            } else if l == s {
                wins += 0.5;
            }
        }
    }
    wins / (live.len() * spoof.len()) as f64
}

#[test]
fn eer_example_three_records() {
    let scores = vec![
        record(Label::Live, 0.6, 0),
        record(Label::Live, 0.4, 1),
        record(Label::Spoof, 0.5, 2),
    ];
    assert_eq!(eer_threshold(&scores).unwrap(), oracle_eer(&scores));
}

#[test]
fn thousand_random_sets_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let scores = random_set(&mut rng);
        let tau = eer_threshold(&scores).unwrap();
        assert_eq!(tau, oracle_eer(&scores));

        let probe = rng.gen::<f64>();
        let rates = hter(&scores, probe).unwrap();
        let (fa, fr, nl, ns) = oracle_counts(&scores, probe);
        assert_eq!(rates.far, fa as f64 / ns as f64);
        assert_eq!(rates.frr, fr as f64 / nl as f64);
        assert_eq!(rates.hter, (rates.far + rates.frr) / 2.0);

        let a = auc(&scores).unwrap();
        assert!((a - oracle_auc(&scores)).abs() < 1e-12);
        assert!((trapezoid_area(&roc_curve(&scores).unwrap()) - a).abs() < 1e-12);
    }
}

#[test]
fn separated_scores_auc_one_hter_zero() {
    let scores: Vec<_> = (0..10)
        .map(|i| record(if i < 5 { Label::Spoof } else { Label::Live }, i as f64 / 10.0, i))
        .collect();
    assert_eq!(auc(&scores).unwrap(), 1.0);
    assert_eq!(hter(&scores, 0.45).unwrap().hter, 0.0);
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_transform(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = random_set(&mut rng);
        let cubed: Vec<_> = scores.iter().map(|r| ScoreRecord { p_live: r.p_live.powi(3), ..r.clone() }).collect();
        prop_assert!((auc(&scores).unwrap() - auc(&cubed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn roc_monotone_with_fixed_endpoints(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let roc = roc_curve(&random_set(&mut rng)).unwrap();
        prop_assert_eq!(roc[0], [0.0, 0.0]);
        prop_assert_eq!(*roc.last().unwrap(), [1.0, 1.0]);
        for w in roc.windows(2) {
            prop_assert!(w[1][0] >= w[0][0] && w[1][1] >= w[0][1]);
        }
    }

    // The 1/min(n_live, n_spoof) granularity assumes distinct scores; a tied
    // group moves the staircase by several steps at once.
    #[test]
    fn hter_at_eer_is_within_one_step_of_eer(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scores = random_set(&mut rng);
        for r in &mut scores {
            r.p_live = rng.gen::<f64>();
        }
        let tau = eer_threshold(&scores).unwrap();
        let report = evaluate(&scores, tau).unwrap();
        let step = 1.0 / report.n_live.min(report.n_spoof) as f64;
        prop_assert!((report.far - report.frr).abs() <= step + 1e-12);
        prop_assert_eq!(report.hter, (report.far + report.frr) / 2.0);
    }

    #[test]
    fn metrics_do_not_mutate_inputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = random_set(&mut rng);
        let before = scores.clone();
        let tau = eer_threshold(&scores).unwrap();
        let _ = evaluate(&scores, tau).unwrap();
        prop_assert_eq!(before, scores);
    }
}
