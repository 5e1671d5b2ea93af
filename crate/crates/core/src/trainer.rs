//! Supervised training with AdamW, subject-disjoint validation and early
//! stopping on validation AUC.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{AugConfig, Augmenter, ImageSample};
use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{ChannelStats, LabeledImage};
use crate::error::{Error, Result};
use crate::label::{Label, PatchLabel};
use crate::losses::{total_loss, LossBreakdown, LossConfig, PatchHead};
use crate::metrics::{auc, ScoreRecord};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::keyed;
use crate::tensor::Tensor;
use crate::vit::{Backbone, ModelConfig, VitReg};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Fraction of each training domain's subjects held out for validation.
    pub val_fraction: f64,
    /// Frames sampled per video at a fixed interval.
    pub frames_per_video: usize,
    pub loss: LossConfig,
    pub aug: AugConfig,
    /// Ablation: no FAS-Aug, no PDA, no APL.
    pub plain: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_head: 5e-5,
            lr_encoder: 5e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            val_fraction: 0.2,
            frames_per_video: 5,
            loss: LossConfig::default(),
            aug: AugConfig::default(),
            plain: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// From-scratch training of the desk-scale model on synthetic data. The
    /// default learning rates suit fine-tuning a pretrained encoder and barely
    /// move a randomly initialized one.
    pub fn desk() -> Self {
        TrainConfig {
            lr_head: 3e-3,
            lr_encoder: 1e-3,
            batch_size: 16,
            max_epochs: 60,
            patience: 10,
            val_fraction: 0.25,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.lr_head) || !finite_pos(self.lr_encoder) {
            return Err(Error::Config("lr_head and lr_encoder must be finite and > 0".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::Config("betas must lie in [0, 1) and eps > 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.frames_per_video == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and frames_per_video must be positive".into(),
            ));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return Err(Error::Config("val_fraction must lie in (0, 0.5]".into()));
        }
        self.aug.validate()
    }

    /// Augmentation and loss settings after applying the ablation switch.
    pub fn effective(&self) -> (AugConfig, LossConfig) {
        let mut aug = self.aug.clone();
        let mut loss = self.loss;
        if self.plain {
            aug.p_fas_aug = 0.0;
            aug.p_pda = 0.0;
            loss.use_apl = false;
        }
        (aug, loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs {
    pub head: f64,
    pub encoder: f64,
}

impl GroupLrs {
    pub fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Head => self.head,
            ParamGroup::Encoder => self.encoder,
        }
    }
}

/// First and second moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`, with bias-corrected moments.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lrs: GroupLrs,
    hp: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.value.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient for {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let lr = lrs.of(p.group);
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            *w -= lr * hp.weight_decay * *w;
            *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + hp.eps);
        }
        if !p.value.is_finite() {
            return Err(Error::Divergence(format!("parameter {} became non-finite", p.name)));
        }
    }
    Ok(())
}

/// Progress of a run; enough to resume the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub best_val_loss: f64,
    pub bad_epochs: usize,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_class: f64,
    pub l_apl: f64,
    pub l_total: f64,
    pub val_auc: f64,
    pub val_loss: f64,
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_subjects: Vec<(String, String)>,
    pub val_subjects: Vec<(String, String)>,
}

pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub model: VitReg,
    pub stats: ChannelStats,
    pub split: Split,
    pub log: Vec<EpochLog>,
    pub state: TrainState,
}

/// Holds out `val_fraction` of each domain's subjects (at least one when the
/// fraction is positive and the domain has two or more subjects).
pub fn subject_split(images: &[LabeledImage], val_fraction: f64, seed: u64) -> Result<Split> {
    let mut by_domain: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for img in images {
        by_domain
            .entry(&img.record.domain)
            .or_default()
            .insert(&img.record.subject);
    }
    let mut split = Split {
        train_subjects: Vec::new(),
        val_subjects: Vec::new(),
    };
    for (domain, subjects) in by_domain {
        let mut subjects: Vec<&str> = subjects.into_iter().collect();
        subjects.shuffle(&mut keyed(seed, &["split", domain]));
        let n = subjects.len();
        let mut n_val = (val_fraction * n as f64).round() as usize;
        if val_fraction > 0.0 && n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        }
        for (i, s) in subjects.into_iter().enumerate() {
            let key = (domain.to_string(), s.to_string());
            if i < n_val {
                split.val_subjects.push(key);
            } else {
                split.train_subjects.push(key);
            }
        }
    }
    split.train_subjects.sort();
    split.val_subjects.sort();
    Ok(split)
}

fn batch_tensor(images: &[Tensor]) -> Result<Tensor> {
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape("batch", img.shape(), &shape));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

/// Live probabilities for `images`, evaluated in chunks of `batch`.
pub fn predict_p_live(model: &VitReg, stats: &ChannelStats, images: &[&Tensor], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let normed: Vec<Tensor> = chunk.iter().map(|t| stats.normalize(t)).collect();
        let mut tape = Tape::new();
        let bound: Vec<_> = model.params().iter().map(|p| tape.constant(p.value.clone())).collect();
        let o = model.forward(&mut tape, &bound, &batch_tensor(&normed)?)?;
        out.extend_from_slice(o.p_live.data());
    }
    Ok(out)
}

/// Score records for labeled images.
pub fn score(model: &VitReg, stats: &ChannelStats, images: &[LabeledImage], batch: usize) -> Result<Vec<ScoreRecord>> {
    let px: Vec<&Tensor> = images.iter().map(|i| &i.pixels).collect();
    let p = predict_p_live(model, stats, &px, batch)?;
    Ok(images
        .iter()
        .zip(p)
        .map(|(img, p_live)| ScoreRecord {
            sample_id: img.record.sample_id.clone(),
            domain: img.record.domain.clone(),
            label: img.record.label,
            p_live,
        })
        .collect())
}

/// Mean negative log-likelihood of the true labels under `p_live`.
pub fn mean_nll(scores: &[ScoreRecord]) -> f64 {
    let floor = 1e-12;
    let total: f64 = scores
        .iter()
        .map(|s| {
            let p = if s.label == Label::Live {
                s.p_live
            } else {
                1.0 - s.p_live
            };
            -p.max(floor).ln()
        })
        .sum();
    total / scores.len().max(1) as f64
}

fn to_sample(img: &LabeledImage) -> ImageSample {
    ImageSample::new(
        img.pixels.clone(),
        img.record.label,
        img.record.domain.clone(),
        img.record.sample_id.clone(),
    )
}

/// Epoch-at-a-time training loop. Every random draw is keyed by
/// `(seed, epoch, sample)`, so a trainer rebuilt from a checkpoint continues
/// exactly as the original would have.
pub struct Trainer {
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    hp: AdamHyper,
    lrs: GroupLrs,
    split: Split,
    stats: ChannelStats,
    samples: Vec<ImageSample>,
    live_pools: BTreeMap<String, Vec<usize>>,
    val: Vec<LabeledImage>,
    augmenter: Augmenter,
    model: VitReg,
    best: ParamStore,
    state: TrainState,
    history: Vec<EpochLog>,
    steps: Vec<LossBreakdown>,
}

impl Trainer {
    /// Prepares a fresh run on `images` (all from training domains).
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, images: &[LabeledImage]) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        let size = model_cfg.image_size;
        if let Some(bad) = images
            .iter()
            .find(|i| i.pixels.shape() != [model_cfg.channels, size, size])
        {
            return Err(Error::shape(
                "train images",
                bad.pixels.shape(),
                &[model_cfg.channels, size, size],
            ));
        }
        let split = subject_split(images, cfg.val_fraction, cfg.seed)?;
        let is_val = |img: &LabeledImage| {
            split
                .val_subjects
                .binary_search(&(img.record.domain.clone(), img.record.subject.clone()))
                .is_ok()
        };
        let (val, train): (Vec<&LabeledImage>, Vec<&LabeledImage>) = images.iter().partition(|i| is_val(i));
        if train.is_empty() {
            return Err(Error::Protocol("empty training split".into()));
        }
        let has_both = |set: &[&LabeledImage]| {
            set.iter().any(|i| i.record.label == Label::Live) && set.iter().any(|i| i.record.label == Label::Spoof)
        };
        if !has_both(&val) {
            return Err(Error::Protocol("validation split needs live and spoof samples".into()));
        }

        let train_domains: Vec<String> = train
            .iter()
            .map(|i| i.record.domain.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let stats = ChannelStats::compute(train.iter().map(|i| &i.pixels), train_domains)?;

        let (aug_cfg, loss_cfg) = cfg.effective();
        let augmenter = Augmenter::new(
            AugConfig {
                seed: cfg.seed,
                ..aug_cfg
            },
            model_cfg.patch_size,
        )?;
        let samples: Vec<ImageSample> = train.iter().map(|i| to_sample(i)).collect();
        let mut live_pools: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.label == Label::Live {
                live_pools.entry(s.domain.clone()).or_default().push(i);
            }
        }

        let model = VitReg::new(model_cfg.clone(), cfg.seed)?;
        let state = TrainState {
            epoch: 0,
            best_epoch: 0,
            best_val_auc: f64::NEG_INFINITY,
            best_val_loss: f64::INFINITY,
            bad_epochs: 0,
            adam: AdamState::new(model.params()),
        };
        Ok(Trainer {
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            loss_cfg,
            hp: AdamHyper {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
                weight_decay: cfg.weight_decay,
            },
            lrs: GroupLrs {
                head: cfg.lr_head,
                encoder: cfg.lr_encoder,
            },
            split,
            stats,
            samples,
            live_pools,
            val: val.into_iter().cloned().collect(),
            augmenter,
            best: model.params().clone(),
            model,
            state,
            history: Vec::new(),
            steps: Vec::new(),
        })
    }

    /// Continues a run from its last checkpoint and the best weights so far.
    pub fn resume(
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        images: &[LabeledImage],
        last: &Checkpoint,
        best: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Trainer::new(model_cfg, cfg, images)?;
        if last.model != *model_cfg || best.model != *model_cfg {
            return Err(Error::Config(
                "checkpoint was written for a different model config".into(),
            ));
        }
        let state = last
            .state
            .clone()
            .ok_or_else(|| Error::Contract("checkpoint has no training state".into()))?;
        if last.stats.as_ref() != Some(&t.stats) {
            return Err(Error::Contract(
                "checkpoint normalization does not match the training data".into(),
            ));
        }
        t.model = VitReg::from_params(model_cfg.clone(), last.params.clone())?;
        VitReg::from_params(model_cfg.clone(), best.params.clone())?;
        t.best = best.params.clone();
        t.state = state;
        Ok(t)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &VitReg {
        &self.model
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    /// Per-batch losses of the most recent epoch.
    pub fn last_steps(&self) -> &[LossBreakdown] {
        &self.steps
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    /// Ids of the samples the optimizer sees.
    pub fn train_ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.sample_id.as_str())
    }

    /// True once the epoch budget is spent or patience has run out.
    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.max_epochs || self.state.bad_epochs > self.cfg.patience
    }

    /// Current weights and optimizer state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model_cfg.clone(),
            params: self.model.params().clone(),
            stats: Some(self.stats.clone()),
            state: Some(self.state.clone()),
        }
    }

    /// Weights of the best validation epoch so far.
    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model_cfg.clone(),
            params: self.best.clone(),
            stats: Some(self.stats.clone()),
            state: None,
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch + 1;
        let n_patches = self.model_cfg.num_patches();
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut keyed(self.cfg.seed, &["order", &epoch.to_string()]));
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        self.steps.clear();
        for idx in order.chunks(self.cfg.batch_size) {
            let mut pixels = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            let mut patch_labels = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &self.samples[i];
                // FAS-Aug can turn a live sample into a spoof, so every
                // sample gets its domain's partner pool.
                let pool: Vec<&ImageSample> = self
                    .live_pools
                    .get(&s.domain)
                    .map(|ix| ix.iter().map(|j| &self.samples[*j]).collect())
                    .unwrap_or_default();
                let a = self.augmenter.augment(s, epoch, &pool)?;
                patch_labels.push(a.resolved_patch_labels(n_patches)?);
                labels.push(a.label);
                pixels.push(self.stats.normalize(&a.pixels));
            }
            let batch = batch_tensor(&pixels)?;
            let b = step(
                &mut self.model,
                &mut self.state.adam,
                &batch,
                &labels,
                &patch_labels,
                &self.loss_cfg,
                self.lrs,
                &self.hp,
            )?;
            sums[0] += b.l_class;
            sums[1] += b.l_apl;
            sums[2] += b.l_total;
            batches += 1;
            self.steps.push(b);
        }

        let val_scores = score(&self.model, &self.stats, &self.val, 64)?;
        let val_auc = auc(&val_scores)?;
        let val_loss = mean_nll(&val_scores);
        // Validation AUC saturates quickly on easy splits; equal AUC with a
        // lower validation cross-entropy still counts as progress.
        let state = &mut self.state;
        let improved =
            val_auc > state.best_val_auc || (val_auc == state.best_val_auc && val_loss < state.best_val_loss);
        state.epoch = epoch;
        if improved {
            state.best_val_auc = val_auc;
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            state.bad_epochs = 0;
            self.best = self.model.params().clone();
        } else {
            state.bad_epochs += 1;
        }
        let entry = EpochLog {
            epoch,
            l_class: sums[0] / batches as f64,
            l_apl: sums[1] / batches as f64,
            l_total: sums[2] / batches as f64,
            val_auc,
            val_loss,
            lr_head: self.lrs.head,
            lr_encoder: self.lrs.encoder,
            improved,
        };
        log::debug!(
            "epoch {epoch}: l_total {:.4} (class {:.4}, apl {:.4}) val_auc {:.4}",
            entry.l_total,
            entry.l_class,
            entry.l_apl,
            val_auc
        );
        self.history.push(entry.clone());
        Ok(entry)
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        Ok(TrainOutcome {
            model: VitReg::from_params(self.model_cfg, self.best)?,
            stats: self.stats,
            split: self.split,
            log: self.history,
            state: self.state,
        })
    }
}

/// Trains a fresh model to completion. `log` receives one JSON line per epoch.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    images: &[LabeledImage],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model_cfg, cfg, images)?;
    while !t.finished() {
        let entry = t.run_epoch()?;
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
    }
    t.finish()
}

/// Forward, loss, backward and one AdamW update on a prepared batch.
#[allow(clippy::too_many_arguments)]
pub fn step(
    model: &mut VitReg,
    adam: &mut AdamState,
    images: &Tensor,
    labels: &[Label],
    patch_labels: &[Vec<PatchLabel>],
    loss_cfg: &LossConfig,
    lrs: GroupLrs,
    hp: &AdamHyper,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let out = model.forward(&mut tape, &bound, images)?;
    let head = PatchHead::new(model.patch_head(&bound), loss_cfg.alpha)?;
    let loss = total_loss(&mut tape, &out, labels, patch_labels, &head, loss_cfg)?;
    let b = loss.breakdown(&tape);
    if !(b.l_total.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite loss (class {}, apl {})",
            b.l_class, b.l_apl
        )));
    }
    tape.backward(loss.l_total)?;
    let grads = model.params().gradients(&tape, &bound);
    adamw_step(model.params_mut(), &grads, adam, lrs, hp)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64], group: ParamGroup) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", group, Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    const HP: AdamHyper = AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[1.0, -2.0], ParamGroup::Head);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::new(vec![2], vec![0.5, -3.0]).unwrap()];
        let lrs = GroupLrs {
            head: 0.1,
            encoder: 0.0,
        };
        adamw_step(&mut p, &g, &mut st, lrs, &HP).unwrap();
        let w = p.get(0).value.data();
        // Bias-corrected first step is lr * g / (|g| + eps).
        assert!((w[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut p = store(&[2.0], ParamGroup::Encoder);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::zeros(&[1])];
        let hp = AdamHyper {
            weight_decay: 0.5,
            ..HP
        };
        adamw_step(
            &mut p,
            &g,
            &mut st,
            GroupLrs {
                head: 0.0,
                encoder: 0.1,
            },
            &hp,
        )
        .unwrap();
        // Zero gradient: only the decay term acts, 2 * (1 - 0.1 * 0.5).
        assert!((p.get(0).value.data()[0] - 1.9).abs() < 1e-15);
        assert_eq!(st.m[0].data()[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[1.0], ParamGroup::Head);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::full(&[1], f64::NAN)];
        let err = adamw_step(
            &mut p,
            &g,
            &mut st,
            GroupLrs {
                head: 0.1,
                encoder: 0.1,
            },
            &HP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence(ref m) if m.contains('w')));
        assert_eq!(p.get(0).value.data()[0], 1.0);
    }

    #[test]
    fn plain_switch_disables_recipe() {
        let cfg = TrainConfig {
            plain: true,
            ..TrainConfig::default()
        };
        let (aug, loss) = cfg.effective();
        assert_eq!((aug.p_fas_aug, aug.p_pda, loss.use_apl), (0.0, 0.0, false));
        assert_eq!(aug.p_flip, cfg.aug.p_flip);
    }
}
