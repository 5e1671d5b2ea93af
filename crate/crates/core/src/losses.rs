//! Dual-level training objective: image-level cross-entropy on the class
//! token plus the attention-weighted patch loss (APL), whose per-patch term is
//! an L2-constrained softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::label::{Label, PatchLabel};
use crate::tensor::Tensor;
use crate::vit::{patch_weights_var, PatchHeadVars, PatchWeightMode, VitOutput};

/// Allowed deviation of a patch-weight row sum from 1.
pub const WEIGHT_SIMPLEX_TOL: f64 = 1e-4;

/// Linear classifier over L2-constrained features.
#[derive(Clone, Copy, Debug)]
pub struct PatchHead {
    /// `[D, C]`; column `y` scores class `y`.
    pub weight: Var,
    /// `[C]`.
    pub bias: Var,
    /// Norm every feature vector is rescaled to.
    pub alpha: f64,
}

impl PatchHead {
    pub fn new(vars: PatchHeadVars, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(PatchHead {
            weight: vars.weight,
            bias: vars.bias,
            alpha,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    /// Disable to train with the image-level loss alone.
    pub use_apl: bool,
    pub weight_mode: PatchWeightMode,
    /// Block whose class-token attention weights the patches; `None` = last.
    pub attention_block: Option<usize>,
    /// Treat the attention weights as constants in the patch loss.
    pub detach_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 10.0,
            use_apl: true,
            weight_mode: PatchWeightMode::default(),
            attention_block: None,
            detach_weights: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_class: f64,
    pub l_apl: f64,
    pub l_total: f64,
}

/// Tape handles for the three loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_class: Var,
    pub l_apl: Var,
    pub l_total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_class: tape.value(self.l_class).item(),
            l_apl: tape.value(self.l_apl).item(),
            l_total: tape.value(self.l_total).item(),
        }
    }
}

/// Mean negative log-likelihood over rows of `[N, C]` logits.
fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits);
    let picked = tape.pick(logp, targets)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// `[N, D]` features → `[N, C]` logits `Wᵀ(α·f/‖f‖) + b`.
fn constrained_logits(tape: &mut Tape, features: Var, head: &PatchHead) -> Result<Var> {
    let f = tape.l2_normalize(features, head.alpha);
    let z = tape.matmul(f, head.weight)?;
    tape.add_bcast(z, head.bias)
}

/// L2-constrained softmax loss averaged over the `N` rows of `features`.
pub fn l2_softmax_loss(tape: &mut Tape, features: Var, labels: &[usize], head: &PatchHead) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || labels.len() != shape[0] {
        return Err(Error::shape("l2_softmax_loss", &shape, &[labels.len()]));
    }
    let logits = constrained_logits(tape, features, head)?;
    cross_entropy(tape, logits, labels)
}

/// Plain softmax cross-entropy on `[batch, 2]` image logits.
pub fn class_loss(tape: &mut Tape, logits: Var, labels: &[Label]) -> Result<Var> {
    let targets: Vec<usize> = labels.iter().map(|l| l.class_index()).collect();
    cross_entropy(tape, logits, &targets)
}

/// Attention-weighted patch loss.
///
/// `patch_features` is `[B, P, D]`, `weights` a `[B, P]` node whose rows lie
/// on the simplex. Per image, the L2-softmax cross-entropies of the labeled
/// patches are combined with the weights renormalized over the labeled
/// positions, then averaged over the batch. Images without labeled patches
/// contribute 0.
pub fn apl_loss(
    tape: &mut Tape,
    patch_features: Var,
    patch_labels: &[Vec<PatchLabel>],
    weights: Var,
    head: &PatchHead,
) -> Result<Var> {
    let shape = tape.shape(patch_features).to_vec();
    let wshape = tape.shape(weights).to_vec();
    if shape.len() != 3 || wshape != [shape[0], shape[1]] || patch_labels.len() != shape[0] {
        return Err(Error::shape("apl_loss", &shape, &wshape));
    }
    let (b, p, d) = (shape[0], shape[1], shape[2]);
    let mut mask = Vec::with_capacity(b * p);
    let mut targets = Vec::with_capacity(b * p);
    for (i, (row, labels)) in tape.value(weights).data().chunks(p).zip(patch_labels).enumerate() {
        if labels.len() != p {
            return Err(Error::Contract(format!(
                "image {i} has {} patch labels, expected {p}",
                labels.len()
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SIMPLEX_TOL || row.iter().any(|w| *w < 0.0) {
            return Err(Error::Contract(format!(
                "patch weights of image {i} are off the simplex (sum {sum})"
            )));
        }
        mask.extend(
            labels
                .iter()
                .map(|l| if *l == PatchLabel::Unlabeled { 0.0 } else { 1.0 }),
        );
        targets.extend(labels.iter().map(|l| l.class_index().unwrap_or(0)));
    }
    let mask = Tensor::new(vec![b, p], mask)?;
    let w = tape.renormalize(weights, &mask)?;
    let w = tape.reshape(w, &[b * p])?;

    let flat = tape.reshape(patch_features, &[b * p, d])?;
    let logits = constrained_logits(tape, flat, head)?;
    let logp = tape.log_softmax(logits);
    let picked = tape.pick(logp, &targets)?;
    let weighted = tape.mul(picked, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// `l_total = l_class + l_apl`, with no balancing coefficient.
///
/// `patch_labels` must hold one fully resolved label vector per image; images
/// whose patches are all [`PatchLabel::Unlabeled`] contribute nothing to APL.
pub fn total_loss(
    tape: &mut Tape,
    out: &VitOutput,
    labels: &[Label],
    patch_labels: &[Vec<PatchLabel>],
    head: &PatchHead,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let l_class = class_loss(tape, out.logits, labels)?;
    let any_labeled = patch_labels.iter().flatten().any(|l| *l != PatchLabel::Unlabeled);
    let l_apl = if cfg.use_apl && any_labeled {
        // APL renormalizes over labeled patches anyway, so the simplex form is
        // always requested here regardless of `weight_mode.renormalize`.
        let mode = PatchWeightMode {
            renormalize: true,
            ..cfg.weight_mode
        };
        let mut weights = patch_weights_var(tape, out, cfg.attention_block, mode)?;
        if cfg.detach_weights {
            weights = tape.constant(tape.value(weights).clone());
        }
        apl_loss(tape, out.patch_features, patch_labels, weights, head)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let l_total = tape.add(l_class, l_apl)?;
    Ok(LossVars {
        l_class,
        l_apl,
        l_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(tape: &mut Tape, w: Tensor, b: Tensor, alpha: f64) -> PatchHead {
        PatchHead {
            weight: tape.param(w),
            bias: tape.param(b),
            alpha,
        }
    }

    #[test]
    fn zero_head_gives_ln2() {
        let mut tape = Tape::new();
        let f = tape.param(Tensor::from_fn(&[3, 4], |i| (i as f64).sin() + 0.1));
        let h = head(&mut tape, Tensor::zeros(&[4, 2]), Tensor::zeros(&[2]), 10.0);
        let loss = l2_softmax_loss(&mut tape, f, &[0, 1, 1], &h).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn analytic_single_row() {
        // f has norm alpha already; W = [[ln 9, 0]] picks logits [ln 9, 0].
        let mut tape = Tape::new();
        let f = tape.param(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let h = head(
            &mut tape,
            Tensor::new(vec![1, 2], vec![9f64.ln(), 0.0]).unwrap(),
            Tensor::zeros(&[2]),
            1.0,
        );
        let loss = l2_softmax_loss(&mut tape, f, &[0], &h).unwrap();
        let expected = (10.0f64 / 9.0).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!((expected - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn class_loss_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap());
        let l = class_loss(&mut tape, z, &[Label::Live, Label::Spoof]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        // Spoof is class 0, so [10, -10] is a confident spoof.
        let z = tape.constant(Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap());
        let l = class_loss(&mut tape, z, &[Label::Spoof]).unwrap();
        assert!(tape.value(l).item() < 1e-8);
    }

    #[test]
    fn off_simplex_weights_rejected() {
        let mut tape = Tape::new();
        let f = tape.param(Tensor::full(&[1, 2, 3], 0.5));
        let h = head(&mut tape, Tensor::zeros(&[3, 2]), Tensor::zeros(&[2]), 10.0);
        let w = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap());
        let labels = vec![vec![PatchLabel::Live; 2]];
        assert!(matches!(
            apl_loss(&mut tape, f, &labels, w, &h),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unlabeled_image_contributes_nothing() {
        let mut tape = Tape::new();
        let f = tape.param(Tensor::from_fn(&[2, 2, 3], |i| i as f64 + 1.0));
        let h = head(
            &mut tape,
            Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3 - 0.5),
            Tensor::zeros(&[2]),
            2.0,
        );
        let w = tape.constant(Tensor::full(&[2, 2], 0.5));
        let both = vec![vec![PatchLabel::Spoof; 2], vec![PatchLabel::Unlabeled; 2]];
        let only_first = apl_loss(&mut tape, f, &both, w, &h).unwrap();
        let full = vec![vec![PatchLabel::Spoof; 2], vec![PatchLabel::Spoof; 2]];
        let with_second = apl_loss(&mut tape, f, &full, w, &h).unwrap();
        // Image 0 alone, divided by the batch of 2.
        assert!(tape.value(only_first).item() < tape.value(with_second).item());
        assert!(tape.value(only_first).item() > 0.0);
    }
}
