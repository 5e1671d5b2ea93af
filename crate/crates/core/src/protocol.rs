//! Cross-domain protocols: leave-one-out over all domains and limited-source
//! (two training domains), with score files and per-protocol reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, LabeledImage};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::metrics::{aggregate_by_video, eer_threshold, evaluate, MetricsReport, ScoreRecord};
use crate::trainer::{score, train, TrainConfig, TrainOutcome};
use crate::vit::ModelConfig;

/// Score file header.
pub const SCORE_HEADER: &str = "sample_id,domain,true_label,p_live";
/// Decimal places of `p_live` in score files.
pub const SCORE_DECIMALS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolMode {
    LeaveOneOut,
    LimitedSource,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: String,
    pub train_domains: Vec<String>,
    pub test_domain: String,
    pub mode: ProtocolMode,
}

impl ProtocolSpec {
    pub fn new(train_domains: Vec<String>, test_domain: impl Into<String>, mode: ProtocolMode) -> Result<Self> {
        let test_domain = test_domain.into();
        let name = match mode {
            ProtocolMode::LeaveOneOut => test_domain.clone(),
            ProtocolMode::LimitedSource => format!("{}→{}", train_domains.join(""), test_domain),
        };
        let spec = ProtocolSpec {
            name,
            train_domains,
            test_domain,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_domains.is_empty() {
            return Err(Error::Protocol(format!("{}: no training domains", self.name)));
        }
        let unique: BTreeSet<&String> = self.train_domains.iter().collect();
        if unique.len() != self.train_domains.len() {
            return Err(Error::Protocol(format!("{}: duplicate training domain", self.name)));
        }
        if unique.contains(&self.test_domain) {
            return Err(Error::Protocol(format!(
                "{}: test domain {} is also a training domain",
                self.name, self.test_domain
            )));
        }
        if self.mode == ProtocolMode::LimitedSource && self.train_domains.len() != 2 {
            return Err(Error::Protocol(format!(
                "{}: limited-source protocols train on exactly 2 domains, got {}",
                self.name,
                self.train_domains.len()
            )));
        }
        Ok(())
    }

    /// Fails unless every named domain is in `domains`.
    pub fn check_domains(&self, domains: &[String]) -> Result<()> {
        for d in self.train_domains.iter().chain([&self.test_domain]) {
            if !domains.contains(d) {
                return Err(Error::Protocol(format!(
                    "{}: domain {d} not in dataset (has {})",
                    self.name,
                    domains.join(",")
                )));
            }
        }
        Ok(())
    }
}

/// One protocol per domain, training on all the others.
pub fn leave_one_out(domains: &[String]) -> Result<Vec<ProtocolSpec>> {
    if domains.len() < 2 {
        return Err(Error::Protocol("leave-one-out needs at least 2 domains".into()));
    }
    domains
        .iter()
        .map(|test| {
            let train = domains.iter().filter(|d| *d != test).cloned().collect();
            ProtocolSpec::new(train, test.clone(), ProtocolMode::LeaveOneOut)
        })
        .collect()
}

/// Trains on the first two domains and tests on each remaining one.
pub fn limited_source(domains: &[String]) -> Result<Vec<ProtocolSpec>> {
    if domains.len() < 3 {
        return Err(Error::Protocol("limited-source needs at least 3 domains".into()));
    }
    domains[2..]
        .iter()
        .map(|test| ProtocolSpec::new(domains[..2].to_vec(), test.clone(), ProtocolMode::LimitedSource))
        .collect()
}

/// Rounds to the precision written in score files, so metrics computed in a
/// run and from its score file agree exactly.
pub fn quantize_score(p: f64) -> f64 {
    format!("{p:.SCORE_DECIMALS$}").parse().expect("formatted float parses")
}

pub fn format_scores(scores: &[ScoreRecord]) -> String {
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for s in scores {
        writeln!(
            out,
            "{},{},{},{:.SCORE_DECIMALS$}",
            s.sample_id, s.domain, s.label, s.p_live
        )
        .unwrap();
    }
    out
}

pub fn parse_scores(text: &str, origin: &Path) -> Result<Vec<ScoreRecord>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SCORE_HEADER => {}
        _ => return Err(err(1, format!("expected header `{SCORE_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 4 {
            return Err(err(i + 1, format!("expected 4 fields, got {}", cols.len())));
        }
        let label: Label = cols[2].parse().map_err(|e: Error| err(i + 1, e.to_string()))?;
        let p_live: f64 = cols[3]
            .parse()
            .map_err(|_| err(i + 1, format!("bad score `{}`", cols[3])))?;
        if !(0.0..=1.0).contains(&p_live) {
            return Err(err(i + 1, format!("score {p_live} outside [0, 1]")));
        }
        out.push(ScoreRecord {
            sample_id: cols[0].to_string(),
            domain: cols[1].to_string(),
            label,
            p_live,
        });
    }
    Ok(out)
}

pub fn write_scores(path: &Path, scores: &[ScoreRecord]) -> Result<()> {
    std::fs::write(path, format_scores(scores)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// One record per frame.
    #[default]
    Frame,
    /// Mean score per video.
    Video,
}

impl Aggregation {
    pub fn apply(self, scores: Vec<ScoreRecord>) -> Result<Vec<ScoreRecord>> {
        match self {
            Aggregation::Frame => Ok(scores),
            Aggregation::Video => aggregate_by_video(&scores),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: ProtocolSpec,
    pub aggregation: Aggregation,
    /// Number of calibration scores the threshold came from.
    pub n_calibration: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: MetricsReport,
    pub config_fingerprint: String,
}

pub struct ProtocolRun {
    pub report: ProtocolReport,
    /// Test-domain scores as written to the score file.
    pub scores: Vec<ScoreRecord>,
    /// Training-split scores the threshold was calibrated on.
    pub calibration: Vec<ScoreRecord>,
    pub outcome: TrainOutcome,
}

/// Trains on the protocol's source domains, calibrates the EER threshold on
/// their training-split scores and evaluates on the unseen domain.
///
/// `images` may hold every domain of `manifest`; only the named ones are used.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol(
    spec: &ProtocolSpec,
    manifest: &DatasetManifest,
    images: &[LabeledImage],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    aggregation: Aggregation,
    fingerprint: &str,
    log: Option<&mut dyn Write>,
) -> Result<ProtocolRun> {
    spec.validate()?;
    spec.check_domains(&manifest.domains)?;
    let source: Vec<LabeledImage> = images
        .iter()
        .filter(|i| spec.train_domains.contains(&i.record.domain))
        .cloned()
        .collect();
    let target: Vec<LabeledImage> = images
        .iter()
        .filter(|i| i.record.domain == spec.test_domain)
        .cloned()
        .collect();
    if source.is_empty() || target.is_empty() {
        return Err(Error::Protocol(format!(
            "{}: {} source and {} target images",
            spec.name,
            source.len(),
            target.len()
        )));
    }

    let outcome = train(model_cfg, train_cfg, &source, log).map_err(|e| match e {
        Error::Divergence(msg) => Error::Divergence(format!("{}: {msg}", spec.name)),
        other => other,
    })?;
    if outcome.stats.domains.contains(&spec.test_domain) {
        return Err(Error::Protocol(format!(
            "{}: normalization saw the test domain",
            spec.name
        )));
    }

    let calibration: Vec<LabeledImage> = source
        .into_iter()
        .filter(|i| {
            outcome
                .split
                .train_subjects
                .binary_search(&(i.record.domain.clone(), i.record.subject.clone()))
                .is_ok()
        })
        .collect();
    let batch = train_cfg.batch_size.max(64);
    let finalize = |imgs: &[LabeledImage]| -> Result<Vec<ScoreRecord>> {
        let mut s = score(&outcome.model, &outcome.stats, imgs, batch)?;
        s.iter_mut().for_each(|r| r.p_live = quantize_score(r.p_live));
        let mut s = aggregation.apply(s)?;
        s.iter_mut().for_each(|r| r.p_live = quantize_score(r.p_live));
        Ok(s)
    };
    let train_scores = finalize(&calibration)?;
    let tau = eer_threshold(&train_scores)?;
    let scores = finalize(&target)?;
    let metrics = evaluate(&scores, tau)?;

    Ok(ProtocolRun {
        report: ProtocolReport {
            protocol: spec.clone(),
            aggregation,
            n_calibration: train_scores.len(),
            best_epoch: outcome.state.best_epoch,
            epochs_run: outcome.state.epoch,
            metrics,
            config_fingerprint: fingerprint.to_string(),
        },
        scores,
        calibration: train_scores,
        outcome,
    })
}

/// Benchmark table in percent: one row per protocol plus the average.
pub fn summary_table(reports: &[ProtocolReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.protocol.name.chars().count())
        .max()
        .unwrap_or(0)
        .max("Protocol".len());
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>8}  {:>8}", "Protocol", "HTER(%)", "AUC(%)").unwrap();
    for r in reports {
        let pad = width - r.protocol.name.chars().count() + r.protocol.name.len();
        writeln!(
            out,
            "{:<pad$}  {:>8.2}  {:>8.2}",
            r.protocol.name,
            100.0 * r.metrics.hter,
            100.0 * r.metrics.auc
        )
        .unwrap();
    }
    if !reports.is_empty() {
        let n = reports.len() as f64;
        let hter = reports.iter().map(|r| r.metrics.hter).sum::<f64>() / n;
        let auc = reports.iter().map(|r| r.metrics.auc).sum::<f64>() / n;
        writeln!(out, "{:<width$}  {:>8.2}  {:>8.2}", "Avg.", 100.0 * hter, 100.0 * auc).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(ds: &[&str]) -> Vec<String> {
        ds.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn suites_have_expected_shape() {
        let d = names(&["M", "I", "C", "O"]);
        let loo = leave_one_out(&d).unwrap();
        assert_eq!(loo.len(), 4);
        for p in &loo {
            assert_eq!(p.train_domains.len(), 3);
            assert!(!p.train_domains.contains(&p.test_domain));
        }
        let lsd = limited_source(&d).unwrap();
        let lsd_names: Vec<&str> = lsd.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(lsd_names, ["MI→C", "MI→O"]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ProtocolSpec::new(names(&["a", "b"]), "a", ProtocolMode::LeaveOneOut).is_err());
        assert!(ProtocolSpec::new(names(&["a", "b", "c"]), "d", ProtocolMode::LimitedSource).is_err());
        assert!(ProtocolSpec::new(names(&["a", "a"]), "d", ProtocolMode::LeaveOneOut).is_err());
        let p = ProtocolSpec::new(names(&["a"]), "z", ProtocolMode::LeaveOneOut).unwrap();
        assert!(p.check_domains(&names(&["a", "b"])).is_err());
    }

    #[test]
    fn score_file_roundtrip() {
        let scores = vec![
            ScoreRecord {
                sample_id: "d0/s00/live#0".into(),
                domain: "d0".into(),
                label: Label::Live,
                p_live: quantize_score(0.123456789123),
            },
            ScoreRecord {
                sample_id: "d0/s00/spoof#0".into(),
                domain: "d0".into(),
                label: Label::Spoof,
                p_live: 1e-12,
            },
        ];
        let text = format_scores(&scores);
        assert!(text.starts_with("sample_id,domain,true_label,p_live\nd0/s00/live#0,d0,live,0.123456789\n"));
        let back = parse_scores(&text, Path::new("s.csv")).unwrap();
        assert_eq!(back[0], scores[0]);
        assert_eq!(back[1].p_live, 0.0);
        assert_eq!(format_scores(&back), text);
        assert!(parse_scores("nope\n", Path::new("s.csv")).is_err());
        assert!(parse_scores(&format!("{SCORE_HEADER}\na,b,live,1.5\n"), Path::new("s.csv")).is_err());
    }
}
