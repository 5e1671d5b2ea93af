use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fasvit::checkpoint::Checkpoint;
use fasvit::data::synth::{generate, MANIFEST_FILE};
use fasvit::data::{load_images, DatasetManifest, LabeledImage};
use fasvit::label::Label;
use fasvit::metrics::{eer_threshold, evaluate, MetricsReport, ScoreRecord};
use fasvit::protocol::{
    leave_one_out, limited_source, read_scores, run_protocol, summary_table, write_scores, ProtocolMode,
    ProtocolReport, ProtocolSpec,
};
use fasvit::trainer::{score, Trainer};
use fasvit::vit::{Backbone, VitReg};
use fasvit::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const SCORES_FILE: &str = "scores.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SUMMARY_JSON: &str = "summary.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Directory-safe protocol name: `MI→C` becomes `MI-to-C`.
pub fn leg_dir(spec: &ProtocolSpec) -> String {
    spec.name.replace('→', "-to-")
}

/// Reads `dir/manifest.csv` and the frames selected by the configuration.
pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<(DatasetManifest, Vec<LabeledImage>)> {
    let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
    let records = manifest.sample_videos(cfg.train.frames_per_video)?;
    let images = load_images(&manifest, &records, cfg.model.image_size)?;
    Ok((manifest, images))
}

pub fn synth(cfg: &RunConfig, dir: Option<&Path>) -> Result<PathBuf> {
    let dir = dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join(format!("synth-{}", cfg.short_fingerprint())));
    let ds = generate(&cfg.synth)?;
    ds.write(&dir)?;
    cfg.save_into(&dir)?;
    write_json(&dir.join("probe.json"), &ds.probe)?;

    println!("dataset: {}", dir.display());
    println!("fingerprint: {}", cfg.fingerprint());
    println!("{:<8} {:>6} {:>6} {:>9}", "domain", "live", "spoof", "probe_auc");
    for (d, p) in ds.manifest.domains.iter().zip(&ds.probe) {
        let count = |l: Label| {
            ds.manifest
                .records
                .iter()
                .filter(|r| &r.domain == d && r.label == l)
                .count()
        };
        println!(
            "{:<8} {:>6} {:>6} {:>9.3}",
            d,
            count(Label::Live),
            count(Label::Spoof),
            p.auc
        );
    }
    Ok(dir)
}

pub struct TrainArgs<'a> {
    pub data: Option<&'a Path>,
    pub test_domain: Option<&'a str>,
    pub train_domains: &'a [String],
    pub dry_run: bool,
    pub resume: bool,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<Option<PathBuf>> {
    if args.dry_run {
        let n = cfg.model.param_count();
        println!("config ok: {}", cfg.fingerprint());
        println!(
            "model: image {} patch {} dim {} depth {} registers {}",
            cfg.model.image_size, cfg.model.patch_size, cfg.model.embed_dim, cfg.model.depth, cfg.model.num_registers
        );
        println!(
            "tokens: {} patches + 1 class + {} registers",
            cfg.model.num_patches(),
            cfg.model.num_registers
        );
        println!("parameters: {n} ({:.2}M)", n as f64 / 1e6);
        return Ok(None);
    }
    let data = args
        .data
        .ok_or_else(|| Error::Config("train needs --data (or --dry-run)".into()))?;
    let (manifest, images) = load_dataset(data, cfg)?;
    let spec = protocol_from_args(&manifest.domains, args.test_domain, args.train_domains)?;
    spec.check_domains(&manifest.domains)?;
    let source: Vec<LabeledImage> = images
        .into_iter()
        .filter(|i| spec.train_domains.contains(&i.record.domain))
        .collect();

    let dir = cfg
        .out
        .join(format!("train-{}-{}", leg_dir(&spec), cfg.short_fingerprint()));
    mkdir(&dir)?;
    cfg.save_into(&dir)?;
    let (last, best) = (dir.join(LAST_CKPT), dir.join(BEST_CKPT));
    let mut trainer = if args.resume && last.exists() {
        let t = Trainer::resume(
            &cfg.model,
            &cfg.train,
            &source,
            &Checkpoint::load(&last)?,
            &Checkpoint::load(&best)?,
        )?;
        log::info!("resuming after epoch {}", t.state().epoch);
        t
    } else {
        Trainer::new(&cfg.model, &cfg.train, &source)?
    };
    let log_path = dir.join(LOG_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(args.resume)
        .write(true)
        .truncate(!args.resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    while !trainer.finished() {
        let entry = trainer.run_epoch()?;
        writeln!(log, "{}", serde_json::to_string(&entry).unwrap()).map_err(|e| Error::io(&log_path, e))?;
        trainer.checkpoint().save(&last)?;
        trainer.best_checkpoint().save(&best)?;
        println!(
            "epoch {:>3}  l_total {:.4}  val_auc {:.4}{}",
            entry.epoch,
            entry.l_total,
            entry.val_auc,
            if entry.improved { "  *" } else { "" }
        );
    }
    let st = trainer.state();
    println!(
        "best epoch {} (val auc {:.4}); run: {}",
        st.best_epoch,
        st.best_val_auc,
        dir.display()
    );
    let outcome = trainer.finish()?;
    write_json(&dir.join("split.json"), &outcome.split)?;
    Ok(Some(dir))
}

fn protocol_from_args(domains: &[String], test: Option<&str>, train: &[String]) -> Result<ProtocolSpec> {
    let test = test.ok_or_else(|| Error::Config("--test-domain is required".into()))?;
    let train: Vec<String> = if train.is_empty() {
        domains.iter().filter(|d| *d != test).cloned().collect()
    } else {
        train.to_vec()
    };
    let mode = if train.len() == 2 && domains.len() > 3 {
        ProtocolMode::LimitedSource
    } else {
        ProtocolMode::LeaveOneOut
    };
    ProtocolSpec::new(train, test, mode).map_err(|e| Error::Config(e.to_string()))
}

/// Where the decision threshold of an evaluation comes from.
pub enum TauSource {
    Fixed(f64),
    Calibration(PathBuf),
}

pub enum EvalInput<'a> {
    Scores(&'a Path),
    Checkpoint {
        checkpoint: &'a Path,
        data: &'a Path,
        domain: &'a str,
    },
}

pub fn eval(
    cfg: &RunConfig,
    input: EvalInput,
    tau: Option<TauSource>,
    roc: Option<&Path>,
    save: Option<&Path>,
) -> Result<MetricsReport> {
    let (scores, sibling) = match input {
        EvalInput::Scores(path) => (read_scores(path)?, path.parent().map(|p| p.join(CALIBRATION_FILE))),
        EvalInput::Checkpoint {
            checkpoint,
            data,
            domain,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let stats = ck
                .stats
                .clone()
                .ok_or_else(|| Error::Contract(format!("{} has no normalization stats", checkpoint.display())))?;
            let model = VitReg::from_params(ck.model.clone(), ck.params)?;
            let eval_cfg = RunConfig {
                model: ck.model,
                ..cfg.clone()
            };
            let (manifest, images) = load_dataset(data, &eval_cfg)?;
            if !manifest.domains.iter().any(|d| d == domain) {
                return Err(Error::Protocol(format!("domain {domain} not in {}", data.display())));
            }
            let target: Vec<LabeledImage> = images.into_iter().filter(|i| i.record.domain == domain).collect();
            let s = score(&model, &stats, &target, 64)?;
            let s = s
                .into_iter()
                .map(|r| ScoreRecord {
                    p_live: fasvit::protocol::quantize_score(r.p_live),
                    ..r
                })
                .collect();
            let s = cfg.protocol.aggregation.apply(s)?;
            (s, checkpoint.parent().map(|p| p.join(CALIBRATION_FILE)))
        }
    };
    let tau = match tau {
        Some(TauSource::Fixed(t)) => t,
        Some(TauSource::Calibration(path)) => eer_threshold(&read_scores(&path)?)?,
        None => match sibling.filter(|p| p.exists()) {
            Some(path) => eer_threshold(&read_scores(&path)?)?,
            None => {
                return Err(Error::Config(
                    "no threshold source: pass --tau or --calibration, or keep calibration.csv next to the input"
                        .into(),
                ))
            }
        },
    };
    let report = evaluate(&scores, tau)?;
    if let Some(path) = roc {
        write_roc(path, &report)?;
    }
    if let Some(dir) = save {
        mkdir(dir)?;
        write_scores(&dir.join(SCORES_FILE), &scores)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
    }
    Ok(report)
}

/// Plot-ready ROC series: `far,tpr` per line.
pub fn write_roc(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut text = String::from("far,tpr\n");
    for [far, tpr] in &report.roc {
        text.push_str(&format!("{far:.9},{tpr:.9}\n"));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchMode {
    /// Leave one domain out.
    Mico,
    /// Train on two domains, test on each of the others.
    Lsd,
}

pub fn benchmark(cfg: &RunConfig, data: Option<&Path>, mode: BenchMode) -> Result<PathBuf> {
    let started = Instant::now();
    let tag = match mode {
        BenchMode::Mico => "mico",
        BenchMode::Lsd => "lsd",
    };
    let dir = cfg.out.join(format!("benchmark-{tag}-{}", cfg.short_fingerprint()));
    mkdir(&dir)?;
    cfg.save_into(&dir)?;
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = dir.join("data");
            generate(&cfg.synth)?.write(&d)?;
            d
        }
    };
    let (manifest, images) = load_dataset(&data_dir, cfg)?;
    let specs = match mode {
        BenchMode::Mico => leave_one_out(&manifest.domains)?,
        BenchMode::Lsd => limited_source(&manifest.domains)?,
    };
    let fingerprint = cfg.fingerprint();
    let mut reports = Vec::new();
    for spec in &specs {
        let leg = dir.join(leg_dir(spec));
        mkdir(&leg)?;
        let log_path = leg.join(LOG_FILE);
        let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let run = run_protocol(
            spec,
            &manifest,
            &images,
            &cfg.model,
            &cfg.train,
            cfg.protocol.aggregation,
            &fingerprint,
            Some(&mut log),
        )?;
        write_scores(&leg.join(SCORES_FILE), &run.scores)?;
        write_scores(&leg.join(CALIBRATION_FILE), &run.calibration)?;
        write_json(&leg.join(REPORT_FILE), &run.report)?;
        Checkpoint {
            model: cfg.model.clone(),
            params: run.outcome.model.params().clone(),
            stats: Some(run.outcome.stats.clone()),
            state: None,
        }
        .save(&leg.join(BEST_CKPT))?;
        log::info!(
            "{}: auc {:.4} hter {:.4}",
            spec.name,
            run.report.metrics.auc,
            run.report.metrics.hter
        );
        reports.push(run.report);
    }
    let table = summary_table(&reports);
    fs::write(dir.join(SUMMARY_FILE), &table).map_err(|e| Error::io(dir.join(SUMMARY_FILE), e))?;
    write_json(&dir.join(SUMMARY_JSON), &reports)?;
    if !cfg.deterministic {
        write_json(
            &dir.join("timing.json"),
            &serde_json::json!({ "seconds": started.elapsed().as_secs_f64() }),
        )?;
    }
    print!("{table}");
    println!("run: {}", dir.display());
    Ok(dir)
}

/// Re-reads a benchmark directory, prints its table and writes ROC series.
pub fn report(run: &Path) -> Result<String> {
    let path = run.join(SUMMARY_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let reports: Vec<ProtocolReport> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let plots = run.join("plots");
    mkdir(&plots)?;
    for r in &reports {
        write_roc(&plots.join(format!("{}_roc.csv", leg_dir(&r.protocol))), &r.metrics)?;
        let log = run.join(leg_dir(&r.protocol)).join(LOG_FILE);
        if log.exists() {
            let text = fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
            let mut csv = String::from("epoch,l_class,l_apl,l_total,val_auc,val_loss\n");
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let e: fasvit::trainer::EpochLog = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: log.clone(),
                    msg: e.to_string(),
                })?;
                csv.push_str(&format!(
                    "{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                    e.epoch, e.l_class, e.l_apl, e.l_total, e.val_auc, e.val_loss
                ));
            }
            let out = plots.join(format!("{}_curves.csv", leg_dir(&r.protocol)));
            fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
        }
    }
    let table = summary_table(&reports);
    print!("{table}");
    Ok(table)
}
