//! Presentation-attack detection metrics.
//!
//! Conventions, with `τ` the decision threshold on `p_live`:
//! - FAR(τ): fraction of spoof samples accepted, `p_live > τ`;
//! - FRR(τ): fraction of live samples rejected, `p_live ≤ τ`;
//! - HTER(τ) = (FAR + FRR) / 2;
//! - AUC is the Mann–Whitney probability that a live sample outscores a
//!   spoof sample, ties counting one half.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub domain: String,
    pub label: Label,
    pub p_live: f64,
}

impl ScoreRecord {
    /// Video a frame record belongs to: the sample id up to its `#` suffix.
    pub fn video_id(&self) -> &str {
        self.sample_id.split('#').next().unwrap_or(&self.sample_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "extended_f64")]
    pub eer_threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub auc: f64,
    pub n_live: usize,
    pub n_spoof: usize,
    /// `(FAR, 1 − FRR)` pairs from the strictest to the loosest threshold.
    pub roc: Vec<[f64; 2]>,
}

/// Live and spoof scores, each sorted ascending.
struct Split {
    live: Vec<f64>,
    spoof: Vec<f64>,
}

fn split(scores: &[ScoreRecord]) -> Result<Split> {
    let mut live = Vec::new();
    let mut spoof = Vec::new();
    for r in scores {
        if !r.p_live.is_finite() {
            return Err(Error::Protocol(format!("non-finite score for {}", r.sample_id)));
        }
        match r.label {
            Label::Live => live.push(r.p_live),
            Label::Spoof => spoof.push(r.p_live),
        }
    }
    if live.is_empty() || spoof.is_empty() {
        return Err(Error::Protocol(format!(
            "metrics need both classes (live {}, spoof {})",
            live.len(),
            spoof.len()
        )));
    }
    live.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    Ok(Split { live, spoof })
}

impl Split {
    /// `(accepted spoof, rejected live)` counts at `tau`.
    fn counts(&self, tau: f64) -> (usize, usize) {
        let fa = self.spoof.len() - self.spoof.partition_point(|&s| s <= tau);
        let fr = self.live.partition_point(|&s| s <= tau);
        (fa, fr)
    }

    fn rates(&self, tau: f64) -> ErrorRates {
        let (fa, fr) = self.counts(tau);
        let far = fa as f64 / self.spoof.len() as f64;
        let frr = fr as f64 / self.live.len() as f64;
        ErrorRates {
            far,
            frr,
            hter: (far + frr) / 2.0,
        }
    }
}

/// Threshold where FAR and FRR are closest.
///
/// Candidates are the observed scores plus `±∞`. Among candidates minimizing
/// `|FAR − FRR|` the one with smaller FAR wins, then the smaller threshold.
/// The comparison is exact (integer cross-multiplication).
pub fn eer_threshold(scores: &[ScoreRecord]) -> Result<f64> {
    let s = split(scores)?;
    let (nl, ns) = (s.live.len() as i128, s.spoof.len() as i128);
    let mut candidates: Vec<f64> = s.live.iter().chain(&s.spoof).copied().collect();
    candidates.push(f64::NEG_INFINITY);
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best: Option<(i128, usize, f64)> = None;
    for tau in candidates {
        let (fa, fr) = s.counts(tau);
        let gap = (fa as i128 * nl - fr as i128 * ns).abs();
        let better = match best {
            None => true,
            Some((bg, bfa, _)) => gap < bg || (gap == bg && fa < bfa),
        };
        if better {
            best = Some((gap, fa, tau));
        }
    }
    Ok(best.expect("at least the sentinels").2)
}

/// FAR, FRR and HTER at a fixed threshold.
pub fn hter(scores: &[ScoreRecord], tau: f64) -> Result<ErrorRates> {
    Ok(split(scores)?.rates(tau))
}

/// Mann–Whitney AUC via mid-ranks.
pub fn auc(scores: &[ScoreRecord]) -> Result<f64> {
    let s = split(scores)?;
    let mut all: Vec<(f64, bool)> = s
        .live
        .iter()
        .map(|&v| (v, true))
        .chain(s.spoof.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut live_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let mid = (i + 1 + j) as f64 / 2.0;
        live_rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (nl, ns) = (s.live.len() as f64, s.spoof.len() as f64);
    Ok((live_rank_sum - nl * (nl + 1.0) / 2.0) / (nl * ns))
}

/// ROC points `(FAR, 1 − FRR)` from threshold +∞ down through every distinct
/// score; starts at `(0, 0)` and ends at `(1, 1)`.
pub fn roc_curve(scores: &[ScoreRecord]) -> Result<Vec<[f64; 2]>> {
    let s = split(scores)?;
    let (nl, ns) = (s.live.len() as f64, s.spoof.len() as f64);
    let mut thresholds: Vec<f64> = s.live.iter().chain(&s.spoof).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![[0.0, 0.0]];
    for t in thresholds {
        // Accept everything scoring >= t.
        let fa = s.spoof.len() - s.spoof.partition_point(|&v| v < t);
        let ta = s.live.len() - s.live.partition_point(|&v| v < t);
        points.push([fa as f64 / ns, ta as f64 / nl]);
    }
    Ok(points)
}

/// Trapezoidal area under a ROC polyline.
pub fn trapezoid_area(roc: &[[f64; 2]]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1][0] - w[0][0]) * (w[1][1] + w[0][1]) / 2.0)
        .sum()
}

/// Full report for `scores` at a threshold fixed elsewhere.
pub fn evaluate(scores: &[ScoreRecord], tau: f64) -> Result<MetricsReport> {
    let s = split(scores)?;
    let rates = s.rates(tau);
    Ok(MetricsReport {
        eer_threshold: tau,
        far: rates.far,
        frr: rates.frr,
        hter: rates.hter,
        auc: auc(scores)?,
        n_live: s.live.len(),
        n_spoof: s.spoof.len(),
        roc: roc_curve(scores)?,
    })
}

/// Mean score per video (records grouped by [`ScoreRecord::video_id`]),
/// in order of first appearance.
pub fn aggregate_by_video(scores: &[ScoreRecord]) -> Result<Vec<ScoreRecord>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, (ScoreRecord, f64, usize)> = Default::default();
    for r in scores {
        let vid = r.video_id().to_string();
        match groups.get_mut(&vid) {
            Some((first, sum, n)) => {
                if first.label != r.label || first.domain != r.domain {
                    return Err(Error::Protocol(format!(
                        "frames of video {vid} disagree on label or domain"
                    )));
                }
                *sum += r.p_live;
                *n += 1;
            }
            None => {
                order.push(vid.clone());
                groups.insert(vid, (r.clone(), r.p_live, 1));
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|vid| {
            let (first, sum, n) = groups.remove(&vid).unwrap();
            ScoreRecord {
                sample_id: vid,
                domain: first.domain,
                label: first.label,
                p_live: sum / n as f64,
            }
        })
        .collect())
}

/// Orders records by `p_live` then id; used for stable output.
pub fn cmp_score(a: &ScoreRecord, b: &ScoreRecord) -> Ordering {
    a.p_live
        .total_cmp(&b.p_live)
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// JSON has no infinities; thresholds at the ±∞ sentinels are written as strings.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad threshold `{s}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(live: &[f64], spoof: &[f64]) -> Vec<ScoreRecord> {
        let mk = |label, p: f64, i: usize| ScoreRecord {
            sample_id: format!("{label}{i}"),
            domain: "d".into(),
            label,
            p_live: p,
        };
        live.iter()
            .enumerate()
            .map(|(i, &p)| mk(Label::Live, p, i))
            .chain(spoof.iter().enumerate().map(|(i, &p)| mk(Label::Spoof, p, i)))
            .collect()
    }

    #[test]
    fn separable_eer_uses_tie_rule() {
        let r = records(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(eer_threshold(&r).unwrap(), 0.2);
        let rates = hter(&r, 0.2).unwrap();
        assert_eq!((rates.far, rates.frr, rates.hter), (0.0, 0.0, 0.0));
    }

    #[test]
    fn inverted_scores_give_hter_one() {
        let r = records(&[0.1, 0.2], &[0.8, 0.9]);
        assert_eq!(hter(&r, 0.5).unwrap().hter, 1.0);
        assert_eq!(auc(&r).unwrap(), 0.0);
    }

    #[test]
    fn all_ties_auc_half() {
        let r = records(&[0.3, 0.3, 0.3], &[0.3, 0.3]);
        assert_eq!(auc(&r).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_protocol_error() {
        let r = records(&[0.3, 0.4], &[]);
        assert!(matches!(eer_threshold(&r), Err(Error::Protocol(_))));
        assert!(matches!(auc(&r), Err(Error::Protocol(_))));
        assert!(matches!(hter(&r, 0.5), Err(Error::Protocol(_))));
    }

    #[test]
    fn roc_endpoints() {
        let r = records(&[0.9, 0.4, 0.4], &[0.1, 0.4, 0.7]);
        let roc = roc_curve(&r).unwrap();
        assert_eq!(roc.first(), Some(&[0.0, 0.0]));
        assert_eq!(roc.last(), Some(&[1.0, 1.0]));
        assert!((trapezoid_area(&roc) - auc(&r).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn video_aggregation_means_frames() {
        let mut r = records(&[0.2, 0.4], &[0.5]);
        r[0].sample_id = "v1#f0".into();
        r[1].sample_id = "v1#f4".into();
        r[2].sample_id = "v2#f0".into();
        let agg = aggregate_by_video(&r).unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].sample_id, "v1");
        assert!((agg[0].p_live - 0.3).abs() < 1e-15);
    }

    #[test]
    fn infinite_threshold_roundtrips_through_json() {
        let report = MetricsReport {
            eer_threshold: f64::NEG_INFINITY,
            far: 1.0,
            frr: 0.0,
            hter: 0.5,
            auc: 0.5,
            n_live: 1,
            n_spoof: 1,
            roc: vec![[0.0, 0.0], [1.0, 1.0]],
        };
        let text = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }
}
