//! Training-time augmentation.
//!
//! Three stages, applied in this order by [`Augmenter`]:
//!
//! 1. FAS-Aug: with probability `p_fas_aug` one of eight artifact operators.
//!    Photography-noise operators keep the label; print and display
//!    operators turn the sample into a spoof.
//! 2. PDA: with probability `p_pda` a spoof image gets each patch replaced by
//!    the co-located patch of a live image with probability `p_pda_patch`.
//!    Replaced patches are labeled live; the image stays a spoof.
//! 3. Standard: horizontal flip, small rotation, brightness scaling.
//!
//! Every sample records what was applied in `provenance`.

pub mod ops;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Label, PatchLabel};
use crate::rng::{keyed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: Label,
    pub domain: String,
    /// One entry per model patch in row-major order; `None` means every patch
    /// inherits the image label.
    pub patch_labels: Option<Vec<PatchLabel>>,
    pub sample_id: String,
    pub provenance: Vec<AugEvent>,
}

impl ImageSample {
    pub fn new(pixels: Tensor, label: Label, domain: impl Into<String>, sample_id: impl Into<String>) -> Self {
        ImageSample {
            pixels,
            label,
            domain: domain.into(),
            patch_labels: None,
            sample_id: sample_id.into(),
            provenance: Vec::new(),
        }
    }

    /// Patch labels with the image-label default filled in.
    pub fn resolved_patch_labels(&self, num_patches: usize) -> Result<Vec<PatchLabel>> {
        match &self.patch_labels {
            Some(p) if p.len() == num_patches => Ok(p.clone()),
            Some(p) => Err(Error::Contract(format!(
                "sample {} has {} patch labels, model has {num_patches} patches",
                self.sample_id,
                p.len()
            ))),
            None => Ok(vec![self.label.into(); num_patches]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.rank() != 3 {
            return Err(Error::shape("ImageSample", self.pixels.shape(), &[0, 0, 0]));
        }
        if self.label == Label::Live && self.patch_labels.iter().flatten().any(|p| *p == PatchLabel::Spoof) {
            return Err(Error::Contract(format!(
                "live sample {} carries spoof patch labels",
                self.sample_id
            )));
        }
        Ok(())
    }

    fn geometry(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }
}

/// Closed interval `[lo, hi]` a parameter is drawn from uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        rng.gen_range(self.0..=self.1)
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite() && self.0 < self.1) {
            return Err(Error::Config(format!(
                "range {name} must satisfy lo < hi, got [{}, {}]",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub p_fas_aug: f64,
    pub p_pda: f64,
    pub p_pda_patch: f64,
    pub p_flip: f64,
    /// Cycles per pixel.
    pub moire_frequency: Range,
    /// Degrees.
    pub moire_angle: Range,
    pub moire_amplitude: Range,
    /// Halftone cell size in pixels.
    pub halftone_pitch: Range,
    pub halftone_strength: Range,
    /// Per-channel color cast magnitude; desaturation uses twice this.
    pub color_shift: Range,
    /// Samples along the blur line (rounded).
    pub blur_length: Range,
    pub blur_angle: Range,
    /// Downscale factor (rounded).
    pub downscale: Range,
    pub reflection_gain: Range,
    /// Gaussian glare radius as a fraction of the image size.
    pub reflection_radius: Range,
    pub noise_sigma: Range,
    /// Quantization levels (rounded).
    pub banding_levels: Range,
    /// Multiplicative factor.
    pub brightness: Range,
    /// Degrees, symmetric ranges are typical.
    pub rotation: Range,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            p_fas_aug: 0.2,
            p_pda: 0.2,
            p_pda_patch: 0.5,
            p_flip: 0.5,
            moire_frequency: Range(0.15, 0.45),
            moire_angle: Range(0.0, 180.0),
            moire_amplitude: Range(0.04, 0.12),
            halftone_pitch: Range(2.0, 4.0),
            halftone_strength: Range(0.2, 0.5),
            color_shift: Range(0.03, 0.12),
            blur_length: Range(3.0, 7.0),
            blur_angle: Range(0.0, 180.0),
            downscale: Range(2.0, 4.0),
            reflection_gain: Range(0.15, 0.45),
            reflection_radius: Range(0.1, 0.3),
            noise_sigma: Range(0.01, 0.05),
            banding_levels: Range(6.0, 16.0),
            brightness: Range(0.8, 1.2),
            rotation: Range(-10.0, 10.0),
            seed: 0,
        }
    }
}

impl AugConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        AugConfig {
            p_fas_aug: 0.0,
            p_pda: 0.0,
            p_flip: 0.0,
            brightness: Range(1.0 - 1e-9, 1.0 + 1e-9),
            rotation: Range(-1e-9, 1e-9),
            ..AugConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_fas_aug", self.p_fas_aug),
            ("p_pda", self.p_pda),
            ("p_pda_patch", self.p_pda_patch),
            ("p_flip", self.p_flip),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, r) in [
            ("moire_frequency", self.moire_frequency),
            ("moire_angle", self.moire_angle),
            ("moire_amplitude", self.moire_amplitude),
            ("halftone_pitch", self.halftone_pitch),
            ("halftone_strength", self.halftone_strength),
            ("color_shift", self.color_shift),
            ("blur_length", self.blur_length),
            ("blur_angle", self.blur_angle),
            ("downscale", self.downscale),
            ("reflection_gain", self.reflection_gain),
            ("reflection_radius", self.reflection_radius),
            ("noise_sigma", self.noise_sigma),
            ("banding_levels", self.banding_levels),
            ("brightness", self.brightness),
            ("rotation", self.rotation),
        ] {
            r.check(name)?;
        }
        if self.moire_amplitude.0 <= 0.0 || self.moire_amplitude.1 > 0.5 {
            return Err(Error::Config("moire_amplitude must lie in (0, 0.5]".into()));
        }
        if self.blur_length.0 < 1.0 || self.downscale.0 < 1.0 || self.banding_levels.0 < 2.0 {
            return Err(Error::Config(
                "blur_length and downscale must be >= 1, banding_levels >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactCategory {
    Photography,
    Print,
    Display,
}

impl ArtifactCategory {
    /// Print and display artifacts turn any sample into a spoof.
    pub fn relabels(self) -> bool {
        !matches!(self, ArtifactCategory::Photography)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FasKind {
    MotionBlur,
    LowResolution,
    SensorNoise,
    ColorDistortion,
    Halftone,
    Moire,
    SpecularReflection,
    ColorBanding,
}

impl FasKind {
    pub const ALL: [FasKind; 8] = [
        FasKind::MotionBlur,
        FasKind::LowResolution,
        FasKind::SensorNoise,
        FasKind::ColorDistortion,
        FasKind::Halftone,
        FasKind::Moire,
        FasKind::SpecularReflection,
        FasKind::ColorBanding,
    ];

    pub fn category(self) -> ArtifactCategory {
        use FasKind::*;
        match self {
            MotionBlur | LowResolution | SensorNoise => ArtifactCategory::Photography,
            ColorDistortion | Halftone => ArtifactCategory::Print,
            Moire | SpecularReflection | ColorBanding => ArtifactCategory::Display,
        }
    }

    /// Every operator applies to both labels; relabeling handles the rest.
    pub fn valid_for(self, _label: Label) -> bool {
        true
    }

    /// Draws concrete parameters from the configured ranges.
    pub fn sample(self, cfg: &AugConfig, rng: &mut Rng) -> FasOp {
        match self {
            FasKind::MotionBlur => FasOp::MotionBlur {
                length: cfg.blur_length.sample(rng).round() as usize,
                angle: cfg.blur_angle.sample(rng),
            },
            FasKind::LowResolution => FasOp::LowResolution {
                factor: cfg.downscale.sample(rng).round() as usize,
            },
            FasKind::SensorNoise => FasOp::SensorNoise {
                sigma: cfg.noise_sigma.sample(rng),
                noise_seed: rng.gen(),
            },
            FasKind::ColorDistortion => {
                let m = cfg.color_shift.sample(rng);
                let mut cast = [0.0; 3];
                for c in &mut cast {
                    *c = m * if rng.gen::<bool>() { 1.0 } else { -1.0 } * rng.gen_range(0.5..=1.0);
                }
                FasOp::ColorDistortion {
                    desaturate: (2.0 * m).min(1.0),
                    cast,
                }
            }
            FasKind::Halftone => FasOp::Halftone {
                pitch: cfg.halftone_pitch.sample(rng),
                angle: rng.gen_range(0.0..90.0),
                strength: cfg.halftone_strength.sample(rng),
            },
            FasKind::Moire => FasOp::Moire {
                frequency: cfg.moire_frequency.sample(rng),
                angle: cfg.moire_angle.sample(rng),
                amplitude: cfg.moire_amplitude.sample(rng),
            },
            FasKind::SpecularReflection => FasOp::SpecularReflection {
                gain: cfg.reflection_gain.sample(rng),
                center: (rng.gen_range(0.2..=0.8), rng.gen_range(0.2..=0.8)),
                radius: cfg.reflection_radius.sample(rng),
            },
            FasKind::ColorBanding => FasOp::ColorBanding {
                levels: cfg.banding_levels.sample(rng).round() as usize,
            },
        }
    }
}

/// A fully parameterized artifact operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum FasOp {
    MotionBlur { length: usize, angle: f64 },
    LowResolution { factor: usize },
    SensorNoise { sigma: f64, noise_seed: u64 },
    ColorDistortion { desaturate: f64, cast: [f64; 3] },
    Halftone { pitch: f64, angle: f64, strength: f64 },
    Moire { frequency: f64, angle: f64, amplitude: f64 },
    SpecularReflection { gain: f64, center: (f64, f64), radius: f64 },
    ColorBanding { levels: usize },
}

impl FasOp {
    pub fn kind(&self) -> FasKind {
        match self {
            FasOp::MotionBlur { .. } => FasKind::MotionBlur,
            FasOp::LowResolution { .. } => FasKind::LowResolution,
            FasOp::SensorNoise { .. } => FasKind::SensorNoise,
            FasOp::ColorDistortion { .. } => FasKind::ColorDistortion,
            FasOp::Halftone { .. } => FasKind::Halftone,
            FasOp::Moire { .. } => FasKind::Moire,
            FasOp::SpecularReflection { .. } => FasKind::SpecularReflection,
            FasOp::ColorBanding { .. } => FasKind::ColorBanding,
        }
    }

    pub fn category(&self) -> ArtifactCategory {
        self.kind().category()
    }

    /// Output pixels only; no label handling.
    pub fn render(&self, px: &Tensor) -> Tensor {
        match *self {
            FasOp::MotionBlur { length, angle } => ops::motion_blur(px, length, angle),
            FasOp::LowResolution { factor } => ops::low_resolution(px, factor),
            FasOp::SensorNoise { sigma, noise_seed } => {
                let mut rng = keyed(noise_seed, &["sensor_noise"]);
                ops::sensor_noise(px, sigma, &mut rng)
            }
            FasOp::ColorDistortion { desaturate, cast } => ops::color_distortion(px, desaturate, cast),
            FasOp::Halftone { pitch, angle, strength } => ops::halftone(px, pitch, angle, strength),
            FasOp::Moire {
                frequency,
                angle,
                amplitude,
            } => ops::moire(px, frequency, angle, amplitude),
            FasOp::SpecularReflection { gain, center, radius } => ops::specular_reflection(px, gain, center, radius),
            FasOp::ColorBanding { levels } => ops::color_banding(px, levels),
        }
    }

    /// Renders the artifact and applies the label rule of its category.
    pub fn apply(&self, mut s: ImageSample) -> ImageSample {
        s.pixels = self.render(&s.pixels);
        if self.category().relabels() {
            s.label = Label::Spoof;
            if let Some(p) = s.patch_labels.as_mut() {
                p.iter_mut().for_each(|l| *l = PatchLabel::Spoof);
            }
        }
        s.provenance.push(AugEvent::Fas(self.clone()));
        s
    }
}

/// Moiré display artifact with fixed parameters.
pub fn moire(s: ImageSample, frequency: f64, angle: f64, amplitude: f64) -> ImageSample {
    FasOp::Moire {
        frequency,
        angle,
        amplitude,
    }
    .apply(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AugEvent {
    Fas(FasOp),
    Pda {
        live_source: String,
        replaced: usize,
        total: usize,
    },
    Flip,
    Rotate {
        degrees: f64,
    },
    Brightness {
        factor: f64,
    },
}

/// With probability `p_fas_aug`, one uniformly chosen operator.
pub fn apply_fas_aug(s: ImageSample, cfg: &AugConfig, rng: &mut Rng) -> ImageSample {
    if rng.gen::<f64>() >= cfg.p_fas_aug {
        return s;
    }
    let valid: Vec<FasKind> = FasKind::ALL.into_iter().filter(|k| k.valid_for(s.label)).collect();
    let kind = *valid.choose(rng).expect("at least one operator");
    kind.sample(cfg, rng).apply(s)
}

/// Patch-wise mixing of a spoof with a live image.
///
/// With probability `p_pda` every patch of `spoof` is independently replaced
/// by the co-located patch of `live` with probability `p_pda_patch`. On a
/// miss the spoof is returned unchanged.
pub fn apply_pda(
    spoof: ImageSample,
    live: &ImageSample,
    patch_size: usize,
    cfg: &AugConfig,
    rng: &mut Rng,
) -> Result<ImageSample> {
    check_pda_inputs(&spoof, live, patch_size)?;
    if rng.gen::<f64>() >= cfg.p_pda {
        return Ok(spoof);
    }
    let (_, h, w) = spoof.geometry();
    let n = (h / patch_size) * (w / patch_size);
    let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < cfg.p_pda_patch).collect();
    mix_patches(spoof, live, patch_size, &mask)
}

fn check_pda_inputs(spoof: &ImageSample, live: &ImageSample, patch_size: usize) -> Result<()> {
    if spoof.label != Label::Spoof || live.label != Label::Live {
        return Err(Error::Contract(format!(
            "PDA needs a spoof and a live image, got {} and {}",
            spoof.label, live.label
        )));
    }
    if spoof.pixels.shape() != live.pixels.shape() {
        return Err(Error::Contract(format!(
            "PDA geometry mismatch: {:?} vs {:?}",
            spoof.pixels.shape(),
            live.pixels.shape()
        )));
    }
    let (_, h, w) = spoof.geometry();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Contract(format!(
            "image {h}x{w} is not a whole number of {patch_size}px patches"
        )));
    }
    Ok(())
}

/// Copies the live patches selected by `mask` (row-major patch order).
pub fn mix_patches(
    mut spoof: ImageSample,
    live: &ImageSample,
    patch_size: usize,
    mask: &[bool],
) -> Result<ImageSample> {
    check_pda_inputs(&spoof, live, patch_size)?;
    let (c, h, w) = spoof.geometry();
    let gw = w / patch_size;
    if mask.len() != (h / patch_size) * gw {
        return Err(Error::Contract(format!(
            "mask has {} entries, image has {} patches",
            mask.len(),
            (h / patch_size) * gw
        )));
    }
    let src = live.pixels.data();
    let dst = spoof.pixels.data_mut();
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (py, px) = (i / gw, i % gw);
        for ch in 0..c {
            for y in py * patch_size..(py + 1) * patch_size {
                let row = (ch * h + y) * w;
                let span = row + px * patch_size..row + (px + 1) * patch_size;
                dst[span.clone()].copy_from_slice(&src[span]);
            }
        }
    }
    spoof.patch_labels = Some(
        mask.iter()
            .map(|m| if *m { PatchLabel::Live } else { PatchLabel::Spoof })
            .collect(),
    );
    spoof.provenance.push(AugEvent::Pda {
        live_source: live.sample_id.clone(),
        replaced: mask.iter().filter(|m| **m).count(),
        total: mask.len(),
    });
    Ok(spoof)
}

/// Flip, rotation and brightness. Rotation is skipped for PDA-mixed samples
/// so their patch labels survive.
pub fn standard_augs(mut s: ImageSample, cfg: &AugConfig, rng: &mut Rng) -> ImageSample {
    if rng.gen::<f64>() < cfg.p_flip {
        s = flip(s);
    }
    let angle = cfg.rotation.sample(rng);
    let mixed = s.provenance.iter().any(|e| matches!(e, AugEvent::Pda { .. }));
    if !mixed {
        s = rotate(s, angle);
    }
    let factor = cfg.brightness.sample(rng);
    brightness(s, factor)
}

/// Horizontal flip; the patch-label grid is mirrored with it.
pub fn flip(mut s: ImageSample) -> ImageSample {
    s.pixels = ops::flip_horizontal(&s.pixels);
    if let Some(p) = s.patch_labels.as_mut() {
        let g = (p.len() as f64).sqrt().round() as usize;
        if g * g == p.len() {
            p.chunks_mut(g).for_each(|row| row.reverse());
        }
    }
    s.provenance.push(AugEvent::Flip);
    s
}

/// Rotation by `degrees`; present patch labels become unlabeled.
pub fn rotate(mut s: ImageSample, degrees: f64) -> ImageSample {
    if degrees.abs() < 1e-6 {
        return s;
    }
    s.pixels = ops::rotate(&s.pixels, degrees);
    if let Some(p) = s.patch_labels.as_mut() {
        p.iter_mut().for_each(|l| *l = PatchLabel::Unlabeled);
    }
    s.provenance.push(AugEvent::Rotate { degrees });
    s
}

pub fn brightness(mut s: ImageSample, factor: f64) -> ImageSample {
    if (factor - 1.0).abs() < 1e-9 {
        return s;
    }
    s.pixels = ops::brightness(&s.pixels, factor);
    s.provenance.push(AugEvent::Brightness { factor });
    s
}

/// Runs the three stages with streams keyed by `(seed, sample_id, epoch)`.
#[derive(Clone, Debug)]
pub struct Augmenter {
    pub cfg: AugConfig,
    pub patch_size: usize,
}

impl Augmenter {
    pub fn new(cfg: AugConfig, patch_size: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Augmenter { cfg, patch_size })
    }

    pub fn stream(&self, sample_id: &str, epoch: usize, stage: &str) -> Rng {
        keyed(self.cfg.seed, &[sample_id, &epoch.to_string(), stage])
    }

    /// `live_pool` holds PDA partner candidates, normally the live training
    /// samples of the same domain; one is drawn uniformly.
    pub fn augment(&self, s: &ImageSample, epoch: usize, live_pool: &[&ImageSample]) -> Result<ImageSample> {
        let id = s.sample_id.clone();
        let mut out = apply_fas_aug(s.clone(), &self.cfg, &mut self.stream(&id, epoch, "fas"));
        if out.label == Label::Spoof && !live_pool.is_empty() {
            let mut rng = self.stream(&id, epoch, "pda");
            let partner = live_pool[rng.gen_range(0..live_pool.len())];
            out = apply_pda(out, partner, self.patch_size, &self.cfg, &mut rng)?;
        }
        Ok(standard_augs(out, &self.cfg, &mut self.stream(&id, epoch, "std")))
    }
}
