//! Pixel operators on `[C, H, W]` images with values in `[0, 1]`.
//!
//! Every operator is deterministic given its parameters; randomness (noise
//! fields) comes in through an explicit RNG. Outputs are clipped to `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Rotation between the two gratings of [`moire`], in degrees.
pub const MOIRE_TWIST_DEG: f64 = 15.0;

fn dims(px: &Tensor) -> (usize, usize, usize) {
    let s = px.shape();
    (s[0], s[1], s[2])
}

fn clip(mut px: Tensor) -> Tensor {
    px.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    px
}

/// Rec. 601 luma of pixel `(y, x)`, or the single channel when grayscale.
fn luma(px: &Tensor, y: usize, x: usize) -> f64 {
    let (c, h, w) = dims(px);
    let d = px.data();
    if c >= 3 {
        0.299 * d[y * w + x] + 0.587 * d[(h + y) * w + x] + 0.114 * d[(2 * h + y) * w + x]
    } else {
        d[y * w + x]
    }
}

/// Bilinear sample of channel `ch` at fractional `(y, x)`, reflecting at borders.
pub fn sample_bilinear(px: &Tensor, ch: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = dims(px);
    let d = px.data();
    let y = reflect(y, h);
    let x = reflect(x, w);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Mirror-reflects a coordinate into `[0, n - 1]`.
fn reflect(v: f64, n: usize) -> f64 {
    let max = (n - 1) as f64;
    if max == 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let mut r = v.rem_euclid(period);
    if r > max {
        r = period - r;
    }
    r
}

// ---- photography noise (label preserving) ------------------------------

/// Linear motion blur: average of `length` samples along `angle_deg`.
pub fn motion_blur(px: &Tensor, length: usize, angle_deg: f64) -> Tensor {
    let (c, h, w) = dims(px);
    if length <= 1 {
        return px.clone();
    }
    let (dy, dx) = (angle_deg.to_radians().sin(), angle_deg.to_radians().cos());
    let half = (length - 1) as f64 / 2.0;
    let mut out = px.clone();
    let o = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sum: f64 = (0..length)
                    .map(|i| {
                        let t = i as f64 - half;
                        sample_bilinear(px, ch, y as f64 + t * dy, x as f64 + t * dx)
                    })
                    .sum();
                o[(ch * h + y) * w + x] = sum / length as f64;
            }
        }
    }
    clip(out)
}

/// Box-downscale by `factor`, then bilinear upscale back to full size.
pub fn low_resolution(px: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = dims(px);
    if factor <= 1 {
        return px.clone();
    }
    let (sh, sw) = (h.div_ceil(factor), w.div_ceil(factor));
    let d = px.data();
    let mut small = vec![0.0; c * sh * sw];
    for ch in 0..c {
        for sy in 0..sh {
            for sx in 0..sw {
                let (mut sum, mut n) = (0.0, 0);
                for y in sy * factor..((sy + 1) * factor).min(h) {
                    for x in sx * factor..((sx + 1) * factor).min(w) {
                        sum += d[(ch * h + y) * w + x];
                        n += 1;
                    }
                }
                small[(ch * sh + sy) * sw + sx] = sum / n as f64;
            }
        }
    }
    let small = Tensor::new(vec![c, sh, sw], small).expect("shape");
    clip(resize_bilinear(&small, h, w))
}

/// Additive Gaussian noise of standard deviation `sigma`.
pub fn sensor_noise(px: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    if sigma <= 0.0 {
        return px.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    clip(px.map(|v| v + normal.sample(rng)))
}

// ---- print artifacts (relabel to spoof) --------------------------------

/// Print gamut: pulls colors toward luma by `desaturate` and adds a per-channel cast.
pub fn color_distortion(px: &Tensor, desaturate: f64, cast: [f64; 3]) -> Tensor {
    let (c, h, w) = dims(px);
    let mut out = px.clone();
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let l = luma(px, y, x);
            for ch in 0..c {
                let i = (ch * h + y) * w + x;
                o[i] = (1.0 - desaturate) * o[i] + desaturate * l + cast[ch.min(2)];
            }
        }
    }
    clip(out)
}

/// Amplitude-modulated halftone screen of cell size `pitch` rotated by
/// `angle_deg`, blended with the original by `strength`.
pub fn halftone(px: &Tensor, pitch: f64, angle_deg: f64, strength: f64) -> Tensor {
    let (c, h, w) = dims(px);
    let (s, co) = angle_deg.to_radians().sin_cos();
    let mut out = px.clone();
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 * co + y as f64 * s;
            let v = -(x as f64) * s + y as f64 * co;
            // Screen in [0, 1]: dot centers low, cell corners high.
            let screen =
                0.5 - 0.25 * ((std::f64::consts::TAU * u / pitch).cos() + (std::f64::consts::TAU * v / pitch).cos());
            for ch in 0..c {
                let i = (ch * h + y) * w + x;
                let ink = if o[i] > screen { 1.0 } else { 0.0 };
                o[i] = (1.0 - strength) * o[i] + strength * ink;
            }
        }
    }
    clip(out)
}

// ---- display artifacts (relabel to spoof) ------------------------------

/// Two interfering sinusoidal gratings at `frequency` cycles/px, oriented at
/// `angle_deg` and `angle_deg + MOIRE_TWIST_DEG`, added to every channel.
pub fn moire(px: &Tensor, frequency: f64, angle_deg: f64, amplitude: f64) -> Tensor {
    let (c, h, w) = dims(px);
    let k1 = grating_vector(frequency, angle_deg);
    let k2 = grating_vector(frequency, angle_deg + MOIRE_TWIST_DEG);
    let tau = std::f64::consts::TAU;
    let mut out = px.clone();
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let pattern = 0.5 * ((tau * (k1.0 * xf + k1.1 * yf)).sin() + (tau * (k2.0 * xf + k2.1 * yf)).sin());
            for ch in 0..c {
                o[(ch * h + y) * w + x] += amplitude * pattern;
            }
        }
    }
    clip(out)
}

/// `(fx, fy)` in cycles per pixel.
pub fn grating_vector(frequency: f64, angle_deg: f64) -> (f64, f64) {
    let (s, c) = angle_deg.to_radians().sin_cos();
    (frequency * c, frequency * s)
}

/// Screen glare: a Gaussian highlight at `(cy, cx)` (fractions of the image
/// size) pulling pixels toward white by up to `gain`.
pub fn specular_reflection(px: &Tensor, gain: f64, center: (f64, f64), radius: f64) -> Tensor {
    let (c, h, w) = dims(px);
    let (cy, cx) = (center.0 * h as f64, center.1 * w as f64);
    let sigma = radius.max(1e-3) * h.max(w) as f64;
    let mut out = px.clone();
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            let a = gain * (-r2 / (2.0 * sigma * sigma)).exp();
            for ch in 0..c {
                let i = (ch * h + y) * w + x;
                o[i] += a * (1.0 - o[i]);
            }
        }
    }
    clip(out)
}

/// Display quantization: `levels` intensity steps per channel.
pub fn color_banding(px: &Tensor, levels: usize) -> Tensor {
    let steps = (levels.max(2) - 1) as f64;
    clip(px.map(|v| (v * steps).round() / steps))
}

// ---- geometry -----------------------------------------------------------

pub fn flip_horizontal(px: &Tensor) -> Tensor {
    let (_, _, w) = dims(px);
    let mut out = px.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Rotation about the image center by `angle_deg` (counter-clockwise),
/// bilinear with reflect padding.
pub fn rotate(px: &Tensor, angle_deg: f64) -> Tensor {
    let (c, h, w) = dims(px);
    let (s, co) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let mut out = px.clone();
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = co * dx + s * dy + cx;
            let sy = -s * dx + co * dy + cy;
            for ch in 0..c {
                o[(ch * h + y) * w + x] = sample_bilinear(px, ch, sy, sx);
            }
        }
    }
    clip(out)
}

pub fn brightness(px: &Tensor, factor: f64) -> Tensor {
    if factor == 1.0 {
        return px.clone();
    }
    clip(px.map(|v| v * factor))
}

/// Bilinear resize with align-corners sampling.
pub fn resize_bilinear(px: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = dims(px);
    if h == out_h && w == out_w {
        return px.clone();
    }
    let scale = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(h, out_h), scale(w, out_w));
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            for x in 0..out_w {
                out.push(sample_bilinear(px, ch, y as f64 * sy, x as f64 * sx));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("shape")
}
