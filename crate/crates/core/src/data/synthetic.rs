//! Procedural consumer/shop image pairs for desk-scale experiments.
//!
//! Every identity gets a pattern made of a base color, a stripe frequency and
//! orientation, and a shape overlay. Shop renders are clean; consumer renders
//! add background clutter, a brightness shift, a scale/offset change and an
//! occluding patch. Attribute labels are a deterministic function of the
//! pattern parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Domain, ImageRecord, Split};
use super::sampler::derive_seed;
use super::schema::AttributeSchema;
use crate::error::{MmflError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    pub num_pids: usize,
    pub imgs_per_domain: usize,
    /// Image height; width is three quarters of it.
    pub image_size: u32,
    pub seed: u64,
    /// The last `holdout_pids` identities go to query (consumer) / gallery (shop).
    pub holdout_pids: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            num_pids: 20,
            imgs_per_domain: 4,
            image_size: 64,
            seed: 0,
            holdout_pids: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Orientation {
    Horizontal,
    Vertical,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
struct Pattern {
    color: [f64; 3],
    accent: [f64; 3],
    hue_bucket: usize,
    stripe_freq: usize,
    orientation: Orientation,
    shape: Shape,
    shape_scale: usize,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn pattern_for(pid: usize, num_pids: usize, seed: u64) -> Pattern {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xA11CE, pid as u64]));
    let hue = 360.0 * pid as f64 / num_pids as f64 + rng.random_range(0.0..8.0);
    let accent_hue = hue + rng.random_range(120.0..240.0);
    let shapes = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];
    let orients = [
        Orientation::Horizontal,
        Orientation::Vertical,
        Orientation::Diagonal,
    ];
    Pattern {
        color: hsv(hue, 0.75, 0.85),
        accent: hsv(accent_hue, 0.6, rng.random_range(0.3..0.95)),
        hue_bucket: ((hue.rem_euclid(360.0)) / 60.0) as usize % 6,
        stripe_freq: rng.random_range(2..8),
        orientation: orients[rng.random_range(0..3)],
        shape: shapes[pid % 4],
        shape_scale: rng.random_range(0..4),
    }
}

impl Pattern {
    fn attributes(&self, schema: &AttributeSchema) -> BTreeMap<String, usize> {
        let raw = [
            self.shape as usize,
            self.stripe_freq % 4,
            self.hue_bucket,
            self.shape_scale,
        ];
        schema
            .types
            .iter()
            .zip(raw)
            .map(|(t, v)| (t.name.clone(), v % t.values.len()))
            .collect()
    }

    /// Garment color at normalized garment coordinates `(u, v)` in [0, 1).
    fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let t = match self.orientation {
            Orientation::Horizontal => v,
            Orientation::Vertical => u,
            Orientation::Diagonal => (u + v) / 2.0,
        };
        let stripe = ((t * self.stripe_freq as f64 * 2.0).floor() as i64) % 2 == 0;
        let (du, dv) = (u - 0.5, v - 0.45);
        let r = 0.12 + 0.05 * self.shape_scale as f64;
        let inside = match self.shape {
            Shape::Circle => du * du + dv * dv < r * r,
            Shape::Square => du.abs() < r && dv.abs() < r,
            Shape::Diamond => du.abs() + dv.abs() < r * 1.3,
            Shape::Triangle => dv > -r && dv < r && du.abs() < (dv + r) / 2.0,
        };
        if inside {
            self.accent
        } else if stripe {
            self.color
        } else {
            self.color.map(|c| c * 0.6)
        }
    }
}

fn render(pattern: &Pattern, domain: Domain, h: u32, w: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let consumer = domain == Domain::Consumer;
    let (scale, brightness) = if consumer {
        (rng.random_range(0.7..0.9), rng.random_range(0.75..1.25))
    } else {
        (rng.random_range(0.86..0.92), rng.random_range(0.96..1.04))
    };
    let gh = h as f64 * scale;
    let gw = w as f64 * scale;
    let max_off: f64 = if consumer { 0.5 } else { 0.1 };
    let oy = (h as f64 - gh) * rng.random_range((0.5 - max_off).max(0.0)..=(0.5 + max_off).min(1.0));
    let ox = (w as f64 - gw) * rng.random_range((0.5 - max_off).max(0.0)..=(0.5 + max_off).min(1.0));

    let mut img = if consumer {
        let mut bg = RgbImage::from_pixel(w, h, Rgb([90, 90, 90]));
        for _ in 0..6 {
            let c = [
                rng.random_range(40..220u8),
                rng.random_range(40..220u8),
                rng.random_range(40..220u8),
            ];
            let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
            let (bw, bh) = (rng.random_range(2..=w / 3), rng.random_range(2..=h / 3));
            for y in y0..(y0 + bh).min(h) {
                for x in x0..(x0 + bw).min(w) {
                    bg.put_pixel(x, y, Rgb(c));
                }
            }
        }
        bg
    } else {
        RgbImage::from_pixel(w, h, Rgb([245, 245, 245]))
    };

    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5 - ox) / gw;
            let v = (y as f64 + 0.5 - oy) / gh;
            if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                let c = pattern.sample(u, v);
                img.put_pixel(x, y, Rgb(c.map(|ch| (ch * brightness).round().clamp(0.0, 255.0) as u8)));
            }
        }
    }

    if consumer {
        let side = (w.min(h) as f64 * rng.random_range(0.15..0.25)) as u32;
        let side = side.max(1);
        let x0 = rng.random_range(0..=w - side);
        let y0 = rng.random_range(0..=h - side);
        let shade = rng.random_range(30..200u8);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                img.put_pixel(x, y, Rgb([shade, shade, shade]));
            }
        }
        for p in img.pixels_mut() {
            for c in p.0.iter_mut() {
                let n: i32 = rng.random_range(-8..=8);
                *c = (*c as i32 + n).clamp(0, 255) as u8;
            }
        }
    }
    img
}

/// One rendered sample, before being written to disk.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub record: ImageRecord,
    pub image: RgbImage,
}

/// Renders the dataset in memory; paths are relative (`images/...`).
pub fn render_synthetic_dataset(
    opts: &SyntheticOptions,
    schema: &AttributeSchema,
) -> Result<Vec<SyntheticSample>> {
    if opts.num_pids < 2 {
        return Err(MmflError::Config(
            "synthetic dataset needs at least two identities".into(),
        ));
    }
    if opts.imgs_per_domain == 0 || opts.image_size < 8 {
        return Err(MmflError::Config(
            "synthetic dataset needs at least one image per domain and size >= 8".into(),
        ));
    }
    if opts.holdout_pids >= opts.num_pids {
        return Err(MmflError::Config("holdout_pids must leave training identities".into()));
    }
    let h = opts.image_size;
    let w = (opts.image_size * 3 / 4).max(1);
    let first_holdout = opts.num_pids - opts.holdout_pids;
    let mut out = Vec::with_capacity(opts.num_pids * opts.imgs_per_domain * 2);
    for pid in 0..opts.num_pids {
        let pattern = pattern_for(pid, opts.num_pids, opts.seed);
        let attrs = pattern.attributes(schema);
        for domain in [Domain::Consumer, Domain::Shop] {
            for i in 0..opts.imgs_per_domain {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    opts.seed,
                    &[pid as u64, domain as u64, i as u64],
                ));
                let split = match (pid >= first_holdout, domain) {
                    (false, _) => Split::Train,
                    (true, Domain::Consumer) => Split::Query,
                    (true, Domain::Shop) => Split::Gallery,
                };
                out.push(SyntheticSample {
                    record: ImageRecord {
                        image_path: format!("images/{pid:04}_{domain}_{i}.png"),
                        pid: pid as u64,
                        domain,
                        split,
                        attributes: Some(attrs.clone()),
                        bbox: None,
                    },
                    image: render(&pattern, domain, h, w, &mut rng),
                });
            }
        }
    }
    Ok(out)
}

/// Writes PNG images and `manifest.jsonl` under `out_dir`; returns the records.
pub fn generate_synthetic_dataset(
    opts: &SyntheticOptions,
    schema: &AttributeSchema,
    out_dir: &Path,
) -> Result<Vec<ImageRecord>> {
    let samples = render_synthetic_dataset(opts, schema)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| MmflError::io(&img_dir, e))?;
    for s in &samples {
        s.image.save(out_dir.join(&s.record.image_path))?;
    }
    let records: Vec<ImageRecord> = samples.into_iter().map(|s| s.record).collect();
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
