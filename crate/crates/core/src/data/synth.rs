//! Procedural multi-domain segmentation corpus.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::{PI, TAU};
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, ChaCha8Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    /// High-contrast ellipses and polygons on smooth gradients.
    Source,
    /// Endoscopy-like: low-contrast soft blobs, specular spots, vignette.
    TargetA,
    /// Dermoscopy-like: irregular mottled lesions under hair strokes.
    TargetB,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Source, Domain::TargetA, Domain::TargetB];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::TargetA => "targetA",
            Domain::TargetB => "targetB",
        }
    }

    fn code(self) -> u64 {
        match self {
            Domain::Source => 11,
            Domain::TargetA => 23,
            Domain::TargetB => 37,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown domain {s:?} (expected source, targetA or targetB)")))
    }
}

impl Serialize for Domain {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One image with its binary mask. Pixels are stored as 8-bit values so a
/// PNG round trip is lossless.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationSample {
    pub id: String,
    pub domain: Domain,
    pub size: usize,
    /// Row-major `[size, size, 3]`.
    pub pixels: Vec<u8>,
    /// Row-major `[size, size]`, values 0 or 1.
    pub mask: Vec<u8>,
}

impl SegmentationSample {
    pub fn new(id: String, domain: Domain, size: usize, pixels: Vec<u8>, mask: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size * 3 || mask.len() != size * size {
            return Err(Error::Input(format!(
                "sample {id}: {} pixel bytes and {} mask bytes for size {size}",
                pixels.len(),
                mask.len()
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Input(format!("sample {id}: mask is not binary")));
        }
        Ok(Self {
            id,
            domain,
            size,
            pixels,
            mask,
        })
    }

    /// Image as `[size, size, 3]` floats in `[0, 1]`.
    pub fn image(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn foreground_fraction(&self) -> f32 {
        self.mask.iter().filter(|&&m| m != 0).count() as f32 / self.mask.len() as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 70/10/20 assignment from a stable hash of the id.
pub fn split_of(id: &str) -> Split {
    match rng::hash_str(id) % 100 {
        0..=69 => Split::Train,
        70..=79 => Split::Val,
        _ => Split::Test,
    }
}

pub fn select_split(samples: &[SegmentationSample], split: Split) -> Vec<SegmentationSample> {
    samples.iter().filter(|s| split_of(&s.id) == split).cloned().collect()
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Bounds on the foreground fraction of every generated mask.
pub const MIN_FOREGROUND: f32 = 0.01;
pub const MAX_FOREGROUND: f32 = 0.60;

/// Deterministically render sample `index` of the `(domain, seed)` corpus.
pub fn generate_sample(domain: Domain, size: usize, seed: u64, index: usize) -> SegmentationSample {
    let mut attempt = 0u64;
    loop {
        let mut r = rng::stream(&[seed, domain.code(), index as u64, attempt]);
        let (img, mask) = match domain {
            Domain::Source => render_source(&mut r, size),
            Domain::TargetA => render_target_a(&mut r, size),
            Domain::TargetB => render_target_b(&mut r, size),
        };
        let fg = mask.iter().filter(|&&m| m != 0).count() as f32 / mask.len() as f32;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg) {
            let pixels = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            return SegmentationSample {
                id: sample_id(index),
                domain,
                size,
                pixels,
                mask,
            };
        }
        attempt += 1;
    }
}

pub fn generate(domain: Domain, count: usize, size: usize, seed: u64) -> Vec<SegmentationSample> {
    (0..count).map(|i| generate_sample(domain, size, seed, i)).collect()
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Star-shaped region with a wobbly radius `r(theta)`; returns a signed
/// distance proxy in pixels (negative inside).
struct Blob {
    cx: f32,
    cy: f32,
    r0: f32,
    aspect: f32,
    rot: f32,
    harmonics: Vec<(f32, f32, f32)>,
}

impl Blob {
    fn random(r: &mut ChaCha8Rng, size: usize, radius: (f32, f32), wobble: f32, n_harm: usize) -> Self {
        let s = size as f32;
        let r0 = r.random_range(radius.0..radius.1) * s;
        let margin = r0 * 0.6;
        Self {
            cx: r.random_range(margin..s - margin),
            cy: r.random_range(margin..s - margin),
            r0,
            aspect: r.random_range(0.6..1.0),
            rot: r.random_range(0.0..PI),
            harmonics: (0..n_harm)
                .map(|k| {
                    (
                        (k + 2) as f32,
                        r.random_range(0.0..wobble) / (k + 1) as f32,
                        r.random_range(0.0..TAU),
                    )
                })
                .collect(),
        }
    }

    fn sdf(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        let u = dx * c + dy * s;
        let v = (-dx * s + dy * c) / self.aspect;
        let rho = (u * u + v * v).sqrt();
        let th = v.atan2(u);
        let mut rad = self.r0;
        for &(k, a, ph) in &self.harmonics {
            rad *= 1.0 + a * (k * th + ph).sin();
        }
        rho - rad
    }
}

/// Convex-ish random polygon as a list of vertices.
fn polygon(r: &mut ChaCha8Rng, size: usize) -> Vec<(f32, f32)> {
    let s = size as f32;
    let n = r.random_range(3..8);
    let rad = r.random_range(0.15..0.3) * s;
    let cx = r.random_range(rad..s - rad);
    let cy = r.random_range(rad..s - rad);
    let start = r.random_range(0.0..TAU);
    (0..n)
        .map(|i| {
            let a = start + TAU * i as f32 / n as f32 + r.random_range(-0.3..0.3);
            let rr = rad * r.random_range(0.7..1.0);
            (cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect()
}

fn inside_polygon(poly: &[(f32, f32)], x: f32, y: f32) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn rgb(r: &mut ChaCha8Rng, base: [f32; 3], jitter: f32) -> [f32; 3] {
    base.map(|c| c + r.random_range(-jitter..=jitter))
}

/// Sum of a few random plane waves, roughly in `[-1, 1]`.
struct Texture(Vec<(f32, f32, f32)>);

impl Texture {
    fn random(r: &mut ChaCha8Rng, n: usize, freq: (f32, f32)) -> Self {
        Self(
            (0..n)
                .map(|_| {
                    let f = r.random_range(freq.0..freq.1);
                    let a = r.random_range(0.0..TAU);
                    (f * a.cos(), f * a.sin(), r.random_range(0.0..TAU))
                })
                .collect(),
        )
    }

    fn at(&self, u: f32, v: f32) -> f32 {
        let n = self.0.len().max(1) as f32;
        self.0.iter().map(|&(fx, fy, ph)| (TAU * (fx * u + fy * v) + ph).sin()).sum::<f32>() / n.sqrt()
    }
}

/// One random ellipse or polygon.
enum Shape {
    Blob(Blob),
    Poly(Vec<(f32, f32)>),
}

impl Shape {
    fn random(r: &mut ChaCha8Rng, size: usize) -> Self {
        if r.random_bool(0.5) {
            Shape::Blob(Blob::random(r, size, (0.1, 0.22), 0.0, 0))
        } else {
            Shape::Poly(polygon(r, size))
        }
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        match self {
            Shape::Blob(b) => b.sdf(x, y) <= 0.0,
            Shape::Poly(p) => inside_polygon(p, x, y),
        }
    }
}

/// Two to four flat shapes of either polarity on a textured gradient; the
/// mask is one of them, drawn last, so only the prompt says which.
fn render_source(r: &mut ChaCha8Rng, size: usize) -> (Vec<f32>, Vec<u8>) {
    let s = size as f32;
    let level = r.random_range(0.15..0.85);
    let bg0 = rgb(r, [level; 3], 0.06);
    let slope = (r.random_range(-0.15..0.15), r.random_range(-0.15..0.15));
    let tex = Texture::random(r, 4, (1.0, 5.0));
    let tex_amp = r.random_range(0.0..0.05);
    let n = r.random_range(2..5);
    let shapes: Vec<(Shape, [f32; 3])> = (0..n)
        .map(|_| {
            let contrast = r.random_range(0.2..0.5);
            let up = if level + contrast > 0.95 {
                false
            } else if level - contrast < 0.05 {
                true
            } else {
                r.random_bool(0.5)
            };
            let l = if up { level + contrast } else { level - contrast };
            (Shape::random(r, size), rgb(r, [l; 3], 0.06))
        })
        .collect();
    let mut img = vec![0.0; size * size * 3];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (u, v) = (px / s - 0.5, py / s - 0.5);
            let i = y * size + x;
            let mut color = [0.0; 3];
            for c in 0..3 {
                color[c] = bg0[c] + slope.0 * u + slope.1 * v + tex_amp * tex.at(u, v);
            }
            for (k, (shape, col)) in shapes.iter().enumerate() {
                if shape.contains(px, py) {
                    color = *col;
                    mask[i] = (k == n - 1) as u8;
                }
            }
            for c in 0..3 {
                img[i * 3 + c] = color[c] + r.random_range(-0.02..0.02);
            }
        }
    }
    (img, mask)
}

fn render_target_a(r: &mut ChaCha8Rng, size: usize) -> (Vec<f32>, Vec<u8>) {
    let s = size as f32;
    let tissue = rgb(r, [0.72, 0.38, 0.36], 0.06);
    let tex = Texture::random(r, 5, (1.0, 4.0));
    let tex_amp = r.random_range(0.03..0.07);
    let blob = Blob::random(r, size, (0.07, 0.22), 0.25, 3);
    let delta = r.random_range(0.1..0.2);
    let tint = [delta * 0.4, -delta, -delta * 0.8];
    let edge = r.random_range(2.0..4.0);
    let vignette = r.random_range(0.35..0.6);
    let spots: Vec<(f32, f32, f32)> = (0..r.random_range(3..9))
        .map(|_| (r.random_range(0.0..s), r.random_range(0.0..s), r.random_range(0.8..2.2)))
        .collect();
    let mut img = vec![0.0; size * size * 3];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (u, v) = (px / s - 0.5, py / s - 0.5);
            let d = blob.sdf(px, py);
            let i = y * size + x;
            mask[i] = (d <= 0.0) as u8;
            let alpha = 1.0 - smoothstep(-edge, edge, d);
            let shade = 1.0 - vignette * (u * u + v * v) * 2.0;
            let t = tex_amp * tex.at(u, v);
            let spec = spots
                .iter()
                .map(|&(sx, sy, sr)| {
                    let dd = ((px - sx).powi(2) + (py - sy).powi(2)).sqrt();
                    1.0 - smoothstep(sr * 0.5, sr, dd)
                })
                .fold(0.0f32, f32::max);
            for c in 0..3 {
                let base = (tissue[c] + alpha * tint[c] + t) * shade;
                img[i * 3 + c] = base + spec * (0.98 - base) + r.random_range(-0.015..0.015);
            }
        }
    }
    (img, mask)
}

fn render_target_b(r: &mut ChaCha8Rng, size: usize) -> (Vec<f32>, Vec<u8>) {
    let s = size as f32;
    let skin = rgb(r, [0.86, 0.66, 0.56], 0.05);
    let lesion = rgb(r, [0.48, 0.32, 0.24], 0.06);
    let mottle = Texture::random(r, 7, (3.0, 9.0));
    let blob = Blob::random(r, size, (0.14, 0.3), 0.35, 4);
    let hairs: Vec<(f32, f32, f32, f32, f32)> = (0..r.random_range(3..11))
        .map(|_| {
            (
                r.random_range(0.0..s),
                r.random_range(0.0..s),
                r.random_range(0.0..PI),
                r.random_range(-0.04..0.04),
                r.random_range(0.5..1.1),
            )
        })
        .collect();
    let mut img = vec![0.0; size * size * 3];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (u, v) = (px / s - 0.5, py / s - 0.5);
            let d = blob.sdf(px, py);
            let i = y * size + x;
            mask[i] = (d <= 0.0) as u8;
            let alpha = 1.0 - smoothstep(-1.5, 1.5, d);
            let m = 0.08 * mottle.at(u, v);
            let hair = hairs
                .iter()
                .map(|&(hx, hy, ang, curve, w)| {
                    let (sn, cs) = ang.sin_cos();
                    let along = (px - hx) * cs + (py - hy) * sn;
                    let across = -(px - hx) * sn + (py - hy) * cs - curve * along * along;
                    if along.abs() > s * 0.45 {
                        0.0
                    } else {
                        1.0 - smoothstep(w * 0.5, w, across.abs())
                    }
                })
                .fold(0.0f32, f32::max);
            for c in 0..3 {
                let base = skin[c] * (1.0 - alpha) + (lesion[c] + m) * alpha;
                img[i * 3 + c] = base * (1.0 - 0.8 * hair) + r.random_range(-0.02..0.02);
            }
        }
    }
    (img, mask)
}
