//! Manifest-driven datasets of pre-cropped face images.
//!
//! A manifest is a UTF-8 file with a `#`-prefixed header block followed by
//! CSV records:
//!
//! ```text
//! # fasvit-manifest v1
//! # labels: live,spoof
//! # domains: d0,d1
//! sample_id,path,frame,label,domain,subject,attack
//! d0/s00/live#0,d0/s00/live/000.png,0,live,d0,s00,none
//! ```
//!
//! Paths are relative to the manifest's directory.

pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::ops::resize_bilinear;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &str = "fasvit-manifest";
const COLUMNS: [&str; 7] = ["sample_id", "path", "frame", "label", "domain", "subject", "attack"];

/// Floor applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub path: String,
    pub frame: usize,
    pub label: Label,
    pub domain: String,
    pub subject: String,
    pub attack: String,
}

impl ManifestRecord {
    /// Frames of one video share everything up to the `#` in their id.
    pub fn video_id(&self) -> &str {
        self.sample_id.split('#').next().unwrap_or(&self.sample_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub domains: Vec<String>,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(domains: Vec<String>, records: Vec<ManifestRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = DatasetManifest {
            domains,
            records,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let vocab: HashSet<&str> = self.domains.iter().map(String::as_str).collect();
        if vocab.len() != self.domains.len() {
            return Err(Error::Config("manifest declares a domain twice".into()));
        }
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.sample_id.as_str()) {
                return Err(Error::Config(format!("duplicate sample_id `{}`", r.sample_id)));
            }
            if !vocab.contains(r.domain.as_str()) {
                return Err(Error::Config(format!(
                    "sample `{}` uses undeclared domain `{}`",
                    r.sample_id, r.domain
                )));
            }
        }
        Ok(())
    }

    pub fn to_string(&self) -> Result<String> {
        let mut out = format!(
            "# {MAGIC} v{MANIFEST_VERSION}\n# labels: live,spoof\n# domains: {}\n",
            self.domains.join(",")
        );
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("manifest encoding: {e}"));
        w.write_record(COLUMNS).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.sample_id.as_str(),
                r.path.as_str(),
                &r.frame.to_string(),
                r.label.as_str(),
                r.domain.as_str(),
                r.subject.as_str(),
                r.attack.as_str(),
            ])
            .map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv of utf-8 fields"));
        Ok(out)
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            msg,
        };
        let mut header = BTreeMap::new();
        let mut lines = text.lines().peekable();
        let first = lines.next().ok_or_else(|| err("empty manifest".into()))?;
        let version = first
            .strip_prefix(&format!("# {MAGIC} v"))
            .ok_or_else(|| err(format!("missing `# {MAGIC} v<N>` header")))?;
        if version.trim() != MANIFEST_VERSION.to_string() {
            return Err(err(format!("unsupported manifest version {version}")));
        }
        let mut header_lines = 1;
        while let Some(line) = lines.peek().and_then(|l| l.strip_prefix('#')) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| err(format!("malformed header line `#{line}`")))?;
            header.insert(k.trim().to_string(), v.trim().to_string());
            lines.next();
            header_lines += 1;
        }
        if header.get("labels").map(String::as_str) != Some("live,spoof") {
            return Err(err("header must declare `labels: live,spoof`".into()));
        }
        let domains: Vec<String> = header
            .get("domains")
            .ok_or_else(|| err("header must declare `domains`".into()))?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();

        let body: String = lines.map(|l| format!("{l}\n")).collect();
        let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let cols = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
        if cols.iter().ne(COLUMNS) {
            return Err(err(format!("expected columns {COLUMNS:?}")));
        }
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let line = header_lines + 2 + i;
            let row = row.map_err(|e| err(format!("line {line}: {e}")))?;
            let field = |j: usize| row.get(j).unwrap_or_default().to_string();
            records.push(ManifestRecord {
                sample_id: field(0),
                path: field(1),
                frame: field(2)
                    .parse()
                    .map_err(|_| err(format!("line {line}: bad frame `{}`", field(2))))?,
                label: field(3)
                    .parse()
                    .map_err(|_| err(format!("line {line}: bad label `{}`", field(3))))?,
                domain: field(4),
                subject: field(5),
                attack: field(6),
            });
        }
        let m = DatasetManifest {
            domains,
            records,
            root: root.into(),
        };
        m.validate().map_err(|e| err(e.to_string()))?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.path)
    }

    /// Records of the given domains, keeping manifest order.
    pub fn filter_domains(&self, domains: &[String]) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| domains.contains(&r.domain)).collect()
    }

    /// Fixed-interval frame selection per video: keeps the records whose
    /// rank within their video (ordered by frame) is a [`sample_frames`] index.
    pub fn sample_videos(&self, k: usize) -> Result<Vec<&ManifestRecord>> {
        let mut videos: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
        for r in &self.records {
            videos.entry(r.video_id()).or_default().push(r);
        }
        let mut keep = HashSet::new();
        for frames in videos.values_mut() {
            frames.sort_by_key(|r| r.frame);
            for i in sample_frames(frames.len(), k)? {
                keep.insert(frames[i].sample_id.as_str());
            }
        }
        Ok(self
            .records
            .iter()
            .filter(|r| keep.contains(r.sample_id.as_str()))
            .collect())
    }
}

/// A decoded image with its manifest record.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub record: ManifestRecord,
    /// `[3, size, size]`, values in `[0, 1]`, not standardized.
    pub pixels: Tensor,
}

/// Loads and resizes the given records.
pub fn load_images(manifest: &DatasetManifest, records: &[&ManifestRecord], size: usize) -> Result<Vec<LabeledImage>> {
    records
        .iter()
        .map(|r| {
            let img = load_image(&manifest.resolve(r))?;
            Ok(LabeledImage {
                record: (*r).clone(),
                pixels: resize_bilinear(&img, size, size),
            })
        })
        .collect()
}

/// Indices `round(i (n-1) / (k-1))` for `i < k`, deduplicated in order and
/// anchored at frame 0.
pub fn sample_frames(n: usize, k: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Contract("cannot sample frames of an empty video".into()));
    }
    if k == 0 {
        return Err(Error::Config("frame count k must be at least 1".into()));
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    let mut out: Vec<usize> = Vec::with_capacity(k);
    for i in 0..k {
        // Exact integer rounding of i(n-1)/(k-1), halves rounded up.
        let num = 2 * i * (n - 1) + (k - 1);
        let idx = num / (2 * (k - 1));
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    Ok(out)
}

/// Decodes an image file into `[3, H, W]` with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes `[3, H, W]` (or `[1, H, W]`) values in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, px: &Tensor) -> Result<()> {
    let s = px.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape("save_png", s, &[3, 0, 0]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = px.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            let v = d[(ch.min(c - 1) * h + y as usize) * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    });
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Per-channel normalization statistics of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Domains the statistics were computed from.
    pub domains: Vec<String>,
    pub n_images: usize,
}

impl ChannelStats {
    /// Population mean and standard deviation over all pixels of `images`.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Tensor>, domains: Vec<String>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let (mut count, mut n_images) = (0usize, 0usize);
        for img in images {
            let s = img.shape();
            if sum.is_empty() {
                sum = vec![0.0; s[0]];
                sq = vec![0.0; s[0]];
            } else if s[0] != sum.len() {
                return Err(Error::shape("ChannelStats", s, &[sum.len()]));
            }
            let plane = s[1] * s[2];
            for (c, chunk) in img.data().chunks(plane).enumerate() {
                sum[c] += chunk.iter().sum::<f64>();
                sq[c] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
            count += plane;
            n_images += 1;
        }
        if n_images == 0 {
            return Err(Error::Protocol("cannot compute statistics of an empty split".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(ChannelStats {
            mean,
            std,
            domains,
            n_images,
        })
    }

    pub fn normalize(&self, img: &Tensor) -> Tensor {
        let s = img.shape();
        let plane = s[1] * s[2];
        let mut out = img.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let (m, sd) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
        out
    }
}

/// Bilinear resize to `size x size` then per-channel standardization.
pub fn preprocess(img: &Tensor, size: usize, stats: &ChannelStats) -> Tensor {
    stats.normalize(&resize_bilinear(img, size, size))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_sampling_examples() {
        assert_eq!(sample_frames(9, 5).unwrap(), vec![0, 2, 4, 6, 8]);
        assert_eq!(sample_frames(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_frames(3, 5).unwrap(), vec![0, 1, 2]);
        assert_eq!(sample_frames(1, 5).unwrap(), vec![0]);
        assert_eq!(sample_frames(10, 1).unwrap(), vec![0]);
        assert!(sample_frames(0, 5).is_err());
    }

    #[test]
    fn constant_image_standardizes_to_zero() {
        let img = Tensor::full(&[3, 4, 4], 0.3);
        let stats = ChannelStats::compute([&img], vec!["d".into()]).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR; 3]);
        let out = preprocess(&img, 8, &stats);
        assert_eq!(out.shape(), &[3, 8, 8]);
        assert!(out.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn manifest_rejects_unknown_domain() {
        let r = ManifestRecord {
            sample_id: "a".into(),
            path: "a.png".into(),
            frame: 0,
            label: Label::Live,
            domain: "x".into(),
            subject: "s".into(),
            attack: "none".into(),
        };
        assert!(DatasetManifest::new(vec!["d".into()], vec![r], ".").is_err());
    }
}
