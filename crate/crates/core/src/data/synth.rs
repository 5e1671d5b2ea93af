//! Procedural multi-domain live/spoof face dataset.
//!
//! Each domain is a "camera": background palette, illumination gain, color
//! response matrix and sensor noise. Spoof videos pass through the domain's
//! attack recipe (artifact operators from [`crate::augment`]) plus a weak
//! recapture cue shared by every domain, before the domain camera is applied.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{save_png, DatasetManifest, ManifestRecord};
use crate::augment::ops;
use crate::augment::{AugConfig, FasKind, FasOp, Range};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::metrics::{auc, ScoreRecord};
use crate::rng::{keyed, Rng};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Brightness lost by recapture, independent of `common_cue`.
const RECAPTURE_DIMMING: f64 = 0.042;

/// Minimum pairwise distance between domain mean colors.
pub const DOMAIN_SEPARATION_FLOOR: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub name: String,
    pub background: [f64; 3],
    pub illumination: f64,
    pub noise_sigma: f64,
    /// Row `c` maps rendered RGB to output channel `c`.
    pub color_matrix: [[f64; 3]; 3],
    /// Artifact operators that simulate this domain's attacks.
    pub spoof_recipe: Vec<FasKind>,
    pub attack: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_domains: usize,
    pub subjects_per_domain: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub live_videos_per_subject: usize,
    pub spoof_videos_per_subject: usize,
    /// Scales the amplitude of the recipe artifacts.
    pub artifact_strength: f64,
    /// Amplitude of the recapture raster shared by all attack media.
    pub common_cue: f64,
    /// Fraction of the spoof media's mean-color shift kept; the rest is
    /// removed so spoofs are not separable by average color alone.
    pub color_leak: f64,
    /// Standard deviation of the per-frame exposure offset.
    pub exposure_jitter: f64,
    /// Explicit domain styles; derived from the seed when empty.
    pub domains: Vec<DomainStyle>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_domains: 4,
            subjects_per_domain: 16,
            frames_per_video: 5,
            image_size: 16,
            live_videos_per_subject: 1,
            spoof_videos_per_subject: 1,
            artifact_strength: 1.0,
            common_cue: 0.05,
            color_leak: 0.0,
            exposure_jitter: 0.03,
            domains: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::Config("at least 2 domains are needed".into()));
        }
        if self.subjects_per_domain == 0 || self.frames_per_video == 0 {
            return Err(Error::Config("subjects and frames must be positive".into()));
        }
        if self.live_videos_per_subject == 0 || self.spoof_videos_per_subject == 0 {
            return Err(Error::Config("each subject needs live and spoof videos".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !self.domains.is_empty() && self.domains.len() != self.num_domains {
            return Err(Error::Config(format!(
                "{} domain styles given for {} domains",
                self.domains.len(),
                self.num_domains
            )));
        }
        if !(0.0..1.0).contains(&self.common_cue)
            || !(0.0..=1.0).contains(&self.color_leak)
            || !(0.0..).contains(&self.artifact_strength)
        {
            return Err(Error::Config(
                "common_cue must lie in [0, 1), color_leak in [0, 1], artifact_strength >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Live fraction implied by the per-subject video counts.
    pub fn live_ratio(&self) -> f64 {
        self.live_videos_per_subject as f64 / (self.live_videos_per_subject + self.spoof_videos_per_subject) as f64
    }

    pub fn styles(&self) -> Vec<DomainStyle> {
        if self.domains.is_empty() {
            (0..self.num_domains).map(|d| default_style(self.seed, d)).collect()
        } else {
            self.domains.clone()
        }
    }
}

const RECIPES: [(&[FasKind], &str); 4] = [
    (&[FasKind::Halftone, FasKind::ColorDistortion], "print"),
    (&[FasKind::Moire], "replay"),
    (&[FasKind::ColorBanding, FasKind::SpecularReflection], "replay"),
    (&[FasKind::Halftone, FasKind::SpecularReflection], "print"),
];

fn default_style(seed: u64, d: usize) -> DomainStyle {
    let mut rng = keyed(seed, &["synth", "domain", &d.to_string()]);
    // Spread background hues around the color wheel.
    let hue = (d as f64 + rng.gen_range(-0.2..0.2)) / 4.0 * std::f64::consts::TAU;
    let background = [0, 1, 2].map(|c| 0.45 + 0.25 * (hue + c as f64 * std::f64::consts::TAU / 3.0).cos());
    let mut color_matrix = [[0.0; 3]; 3];
    for (i, row) in color_matrix.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j {
                rng.gen_range(0.85..1.1)
            } else {
                rng.gen_range(-0.08..0.08)
            };
        }
    }
    let (recipe, attack) = RECIPES[d % RECIPES.len()];
    DomainStyle {
        name: format!("d{d}"),
        background,
        illumination: rng.gen_range(0.8..1.1),
        noise_sigma: rng.gen_range(0.01..0.03),
        color_matrix,
        spoof_recipe: recipe.to_vec(),
        attack: attack.to_string(),
    }
}

/// Identity and appearance of one synthetic person.
struct Subject {
    skin: [f64; 3],
    center: (f64, f64),
    radii: (f64, f64),
    eye_gap: f64,
}

impl Subject {
    fn draw(rng: &mut Rng) -> Self {
        let tone = rng.gen_range(0.55..1.05);
        Subject {
            skin: [0.9 * tone, 0.68 * tone, 0.55 * tone],
            center: (rng.gen_range(0.45..0.55), rng.gen_range(0.47..0.57)),
            radii: (rng.gen_range(0.24..0.32), rng.gen_range(0.32..0.40)),
            eye_gap: rng.gen_range(0.08..0.12),
        }
    }
}

fn smoothstep_inside(d: f64, softness: f64) -> f64 {
    1.0 / (1.0 + ((d - 1.0) / softness).exp())
}

/// Face with eyes and mouth over a shaded background, values in `[0, 1]`.
fn render_face(size: usize, bg: [f64; 3], s: &Subject, rng: &mut Rng) -> Tensor {
    let (jx, jy) = (rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03));
    let light = rng.gen_range(-1.0..1.0);
    let (cx, cy) = (s.center.0 + jx, s.center.1 + jy);
    let n = size as f64;
    let mut px = Tensor::zeros(&[3, size, size]);
    let d = px.data_mut();
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            let face_d = ((u - cx) / s.radii.0).hypot((v - cy) / s.radii.1);
            let face = smoothstep_inside(face_d, 0.06);
            let eye = |ex: f64| ((u - ex) / 0.045).hypot((v - (cy - 0.08)) / 0.03);
            let eyes = smoothstep_inside(eye(cx - s.eye_gap).min(eye(cx + s.eye_gap)), 0.15);
            let mouth = smoothstep_inside(((u - cx) / 0.09).hypot((v - (cy + 0.17)) / 0.025), 0.15);
            let shade = 1.0 + 0.15 * light * (u - cx) / s.radii.0 - 0.1 * (v - cy);
            let gradient = 0.9 + 0.2 * v;
            for c in 0..3 {
                let mut val = bg[c] * gradient;
                let skin = s.skin[c] * shade;
                val = val * (1.0 - face) + skin * face;
                val *= 1.0 - 0.75 * eyes * face;
                let lip = [0.6, 0.2, 0.25][c];
                val = val * (1.0 - 0.6 * mouth * face) + 0.6 * mouth * face * lip * shade;
                d[(c * size + y) * size + x] = val;
            }
        }
    }
    px.map(|v| v.clamp(0.0, 1.0))
}

/// Domain color response and exposure, unclipped and noise free.
fn camera_response(px: &Tensor, style: &DomainStyle, exposure: f64) -> Tensor {
    let s = px.shape();
    let plane = s[1] * s[2];
    let src = px.data();
    let mut out = Tensor::zeros(s);
    let o = out.data_mut();
    for i in 0..plane {
        for c in 0..3 {
            let m = style.color_matrix[c];
            let v = m[0] * src[i] + m[1] * src[plane + i] + m[2] * src[2 * plane + i];
            o[c * plane + i] = style.illumination * v + exposure;
        }
    }
    out
}

/// Artifact parameters scaled by `strength`.
fn recipe_config(strength: f64) -> AugConfig {
    let base = AugConfig::default();
    let scale = |r: Range| Range(r.0 * strength, r.1 * strength + 1e-9);
    AugConfig {
        moire_amplitude: scale(base.moire_amplitude),
        halftone_strength: scale(base.halftone_strength),
        color_shift: scale(base.color_shift),
        reflection_gain: scale(base.reflection_gain),
        ..base
    }
}

/// Spoof artifacts plus the recapture cue shared by every attack medium: a
/// fine raster at the Nyquist frequency (display sub-pixels, print screen)
/// of amplitude `common_cue`, with the phase drawn per video.
fn spoof_medium(px: &Tensor, ops_: &[FasOp], common_cue: f64, phase: bool) -> Tensor {
    let mut out = px.clone();
    for op in ops_ {
        out = op.render(&out);
    }
    let (h, w) = (px.shape()[1], px.shape()[2]);
    let sign = if phase { 1.0 } else { -1.0 };
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / w) % h, i % w);
        let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
        *v += sign * common_cue * checker;
    }
    out
}

/// Shifts each channel of `img` so its mean moves from its own value to
/// `leak * own + (1 - leak) * target`.
fn match_means(img: &mut Tensor, target: [f64; 3], leak: f64) {
    let own = channel_means(img);
    let plane = img.shape()[1] * img.shape()[2];
    for (c, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
        let shift = (1.0 - leak) * (own[c] - target[c]);
        chunk.iter_mut().for_each(|v| *v -= shift);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeResult {
    pub domain: String,
    pub auc: f64,
}

/// Generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// Parallel to `manifest.records`.
    pub images: Vec<Tensor>,
    pub styles: Vec<DomainStyle>,
    pub probe: Vec<ProbeResult>,
}

impl SynthDataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (r, img) in self.manifest.records.iter().zip(&self.images) {
            save_png(&dir.join(&r.path), img)?;
        }
        self.manifest.write(&dir.join(MANIFEST_FILE))
    }

    /// Pairwise minimum distance between per-domain mean colors.
    pub fn domain_separation(&self) -> f64 {
        let means: Vec<[f64; 3]> = self
            .styles
            .iter()
            .map(|st| {
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for (r, img) in self.manifest.records.iter().zip(&self.images) {
                    if r.domain == st.name {
                        let m = channel_means(img);
                        (0..3).for_each(|c| acc[c] += m[c]);
                        n += 1.0;
                    }
                }
                acc.map(|v| v / n)
            })
            .collect();
        let mut best = f64::INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d = (0..3).map(|c| (means[i][c] - means[j][c]).powi(2)).sum::<f64>().sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

pub fn channel_means(img: &Tensor) -> [f64; 3] {
    let plane = img.shape()[1] * img.shape()[2];
    let mut out = [0.0; 3];
    for (c, chunk) in img.data().chunks(plane).take(3).enumerate() {
        out[c] = chunk.iter().sum::<f64>() / plane as f64;
    }
    out
}

/// Least-squares linear probe on channel means; training-set AUC per domain.
pub fn linear_probe(records: &[ManifestRecord], images: &[Tensor], domain: &str) -> Result<f64> {
    let rows: Vec<(usize, [f64; 3])> = records
        .iter()
        .zip(images)
        .enumerate()
        .filter(|(_, (r, _))| r.domain == domain)
        .map(|(i, (_, img))| (i, channel_means(img)))
        .collect();
    let n = rows.len();
    let mut x = DMatrix::<f64>::zeros(n, 4);
    let mut y = DVector::<f64>::zeros(n);
    for (k, (i, m)) in rows.iter().enumerate() {
        x[(k, 0)] = 1.0;
        (0..3).for_each(|c| x[(k, c + 1)] = m[c]);
        y[k] = if records[*i].label == Label::Live { 1.0 } else { -1.0 };
    }
    let ridge = DMatrix::<f64>::identity(4, 4) * 1e-9;
    let w = (x.transpose() * &x + ridge)
        .lu()
        .solve(&(x.transpose() * &y))
        .ok_or_else(|| Error::Protocol(format!("probe for {domain} is singular")))?;
    let scores: Vec<ScoreRecord> = rows
        .iter()
        .enumerate()
        .map(|(k, (i, _))| ScoreRecord {
            sample_id: records[*i].sample_id.clone(),
            domain: domain.to_string(),
            label: records[*i].label,
            p_live: (x.row(k) * &w)[0],
        })
        .collect();
    auc(&scores)
}

/// Renders the whole dataset; deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let styles = cfg.styles();
    let recipe_cfg = recipe_config(cfg.artifact_strength);
    let mut records = Vec::new();
    let mut images = Vec::new();
    for style in &styles {
        for subj in 0..cfg.subjects_per_domain {
            let sid = format!("s{subj:02}");
            let mut srng = keyed(cfg.seed, &["synth", &style.name, &sid]);
            let subject = Subject::draw(&mut srng);
            let videos = (0..cfg.live_videos_per_subject)
                .map(|v| (Label::Live, format!("live{v}")))
                .chain((0..cfg.spoof_videos_per_subject).map(|v| (Label::Spoof, format!("spoof{v}"))));
            for (label, video) in videos {
                let mut vrng = keyed(cfg.seed, &["synth", &style.name, &sid, &video]);
                let phase = vrng.gen::<bool>();
                let recipe: Vec<FasOp> = if label == Label::Spoof {
                    style
                        .spoof_recipe
                        .iter()
                        .map(|k| k.sample(&recipe_cfg, &mut vrng))
                        .collect()
                } else {
                    Vec::new()
                };
                for frame in 0..cfg.frames_per_video {
                    let mut frng = keyed(cfg.seed, &["synth", &style.name, &sid, &video, &frame.to_string()]);
                    let exposure = cfg.exposure_jitter * frng.sample::<f64, _>(rand_distr::StandardNormal);
                    let face = render_face(cfg.image_size, style.background, &subject, &mut frng);
                    let mut px = if label == Label::Spoof {
                        let mut shot =
                            camera_response(&spoof_medium(&face, &recipe, cfg.common_cue, phase), style, exposure);
                        // Recapture dims the scene; other mean-color shifts are
                        // removed except for the configured leak.
                        let dim = RECAPTURE_DIMMING;
                        let target = channel_means(&camera_response(&face, style, exposure)).map(|m| m - dim);
                        match_means(&mut shot, target, cfg.color_leak);
                        shot
                    } else {
                        camera_response(&face, style, exposure)
                    };
                    px = ops::sensor_noise(&px, style.noise_sigma, &mut frng);
                    // Same 8-bit values the PNG files will hold.
                    px = px.map(|v| (v * 255.0).round() / 255.0);
                    let vid = format!("{}/{sid}/{video}", style.name);
                    records.push(ManifestRecord {
                        sample_id: format!("{vid}#{frame}"),
                        path: format!("{vid}/{frame:03}.png"),
                        frame,
                        label,
                        domain: style.name.clone(),
                        subject: sid.clone(),
                        attack: if label == Label::Live {
                            "none".into()
                        } else {
                            style.attack.clone()
                        },
                    });
                    images.push(px);
                }
            }
        }
    }
    let probe = styles
        .iter()
        .map(|s| {
            Ok(ProbeResult {
                domain: s.name.clone(),
                auc: linear_probe(&records, &images, &s.name)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(styles.iter().map(|s| s.name.clone()).collect(), records, "")?;
    Ok(SynthDataset {
        manifest,
        images,
        styles,
        probe,
    })
}
