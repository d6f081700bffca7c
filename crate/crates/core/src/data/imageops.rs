//! Image preprocessing and augmentation on 8-bit RGB images.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MmflError, Result};

/// Placement of the scaled content inside the padded square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadGeometry {
    pub content_h: u32,
    pub content_w: u32,
    pub pad_top: u32,
    pub pad_left: u32,
}

/// Scaled size and padding for an `h`×`w` image resized into an `s`×`s` square.
pub fn pad_geometry(h: u32, w: u32, s: u32) -> PadGeometry {
    let long = h.max(w) as f64;
    let scale = s as f64 / long;
    let scaled = |v: u32| ((v as f64 * scale).round() as u32).clamp(1, s);
    let (content_h, content_w) = if h >= w {
        (s, scaled(w))
    } else {
        (scaled(h), s)
    };
    PadGeometry {
        content_h,
        content_w,
        pad_top: (s - content_h) / 2,
        pad_left: (s - content_w) / 2,
    }
}

/// Scales the longest edge to `size` and pads the short edge symmetrically with `fill`.
pub fn pad_resize(image: &RgbImage, size: usize, fill: [u8; 3]) -> Result<RgbImage> {
    if size == 0 {
        return Err(MmflError::Argument("pad_resize target size must be positive".into()));
    }
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(MmflError::Argument("pad_resize input must be non-empty".into()));
    }
    let s = size as u32;
    let geo = pad_geometry(h, w, s);
    let content = if geo.content_h == h && geo.content_w == w {
        image.clone()
    } else {
        imageops::resize(image, geo.content_w, geo.content_h, FilterType::Triangle)
    };
    let mut out = RgbImage::from_pixel(s, s, Rgb(fill));
    imageops::replace(&mut out, &content, geo.pad_left as i64, geo.pad_top as i64);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub rotate_p: f64,
    pub max_degrees: f64,
    pub crop_p: f64,
    /// Smallest retained fraction of each side for the center crop.
    pub crop_min_scale: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            rotate_p: 0.5,
            max_degrees: 10.0,
            crop_p: 0.5,
            crop_min_scale: 0.85,
            jitter_p: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip_p: 0.0,
            rotate_p: 0.0,
            crop_p: 0.0,
            jitter_p: 0.0,
            ..Self::default()
        }
    }
}

pub fn hflip(image: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(image)
}

/// Rotates about the image center with bilinear sampling; uncovered pixels take `fill`.
pub fn rotate(image: &RgbImage, degrees: f64, fill: [u8; 3]) -> RgbImage {
    if degrees == 0.0 {
        return image.clone();
    }
    let (w, h) = image.dimensions();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    RgbImage::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        bilinear(image, sx, sy).unwrap_or(Rgb(fill))
    })
}

fn bilinear(image: &RgbImage, x: f64, y: f64) -> Option<Rgb<u8>> {
    let (w, h) = image.dimensions();
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return None;
    }
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut px = [0u8; 3];
    for (c, out) in px.iter_mut().enumerate() {
        let v = |xx, yy| image.get_pixel(xx, yy)[c] as f64;
        let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
        let bot = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
        *out = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    Some(Rgb(px))
}

/// Keeps the centered `scale` fraction of each side.
pub fn center_crop(image: &RgbImage, scale: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let scale = scale.clamp(0.0, 1.0);
    let cw = ((w as f64 * scale).round() as u32).clamp(1, w);
    let ch = ((h as f64 * scale).round() as u32).clamp(1, h);
    if cw == w && ch == h {
        return image.clone();
    }
    imageops::crop_imm(image, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image()
}

/// Brightness, contrast and saturation factors applied in that order.
pub fn color_jitter(image: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let gray = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let n = (image.width() * image.height()).max(1) as f64;
    let mean_gray = image
        .pixels()
        .map(|p| gray([p[0] as f64, p[1] as f64, p[2] as f64]) * brightness)
        .sum::<f64>()
        / n;
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let mut v = [p[0] as f64, p[1] as f64, p[2] as f64];
        for c in v.iter_mut() {
            *c *= brightness;
        }
        for c in v.iter_mut() {
            *c = (*c - mean_gray) * contrast + mean_gray;
        }
        let g = gray(v);
        for (c, dst) in v.iter().zip(p.0.iter_mut()) {
            *dst = (g + (c - g) * saturation).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Flip, rotation, center crop and color jitter, each gated by its probability.
///
/// The result is a pure function of `(image, config, seed)`.
pub fn augment(image: &RgbImage, config: &AugmentConfig, seed: u64, fill: [u8; 3]) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gate = |p: f64, rng: &mut ChaCha8Rng| rng.random::<f64>() < p;
    let mut out = image.clone();

    if gate(config.flip_p, &mut rng) {
        out = hflip(&out);
    }
    let rotate_on = gate(config.rotate_p, &mut rng);
    let u: f64 = rng.random_range(-1.0..=1.0);
    if rotate_on && config.max_degrees > 0.0 {
        out = rotate(&out, u * config.max_degrees, fill);
    }
    let crop_on = gate(config.crop_p, &mut rng);
    let u: f64 = rng.random();
    let min_scale = config.crop_min_scale.clamp(0.0, 1.0);
    if crop_on && min_scale < 1.0 {
        out = center_crop(&out, min_scale + (1.0 - min_scale) * u);
    }
    let jitter_on = gate(config.jitter_p, &mut rng);
    let factor = |m: f64, rng: &mut ChaCha8Rng| {
        let m = m.clamp(0.0, 1.0);
        1.0 + m * rng.random_range(-1.0..=1.0)
    };
    let (b, c, s) = (
        factor(config.brightness, &mut rng),
        factor(config.contrast, &mut rng),
        factor(config.saturation, &mut rng),
    );
    if jitter_on {
        out = color_jitter(&out, b, c, s);
    }
    out
}

/// Converts a square RGB image to a normalized CHW float buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalizer {
    pub fn to_chw(&self, image: &RgbImage) -> Vec<f32> {
        let (w, h) = image.dimensions();
        let plane = (w * h) as usize;
        let mut out = vec![0f32; 3 * plane];
        for (i, p) in image.pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + i] = (p[c] as f32 / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Per-channel mean over a set of images, rounded to 8-bit.
pub fn channel_mean<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> [u8; 3] {
    let mut sum = [0f64; 3];
    let mut n = 0f64;
    for img in images {
        for p in img.pixels() {
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
            n += 1.0;
        }
    }
    if n == 0.0 {
        return [0, 0, 0];
    }
    sum.map(|s| (s / n).round() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, ((x + y) % 256) as u8])
        })
    }

    #[test]
    fn pad_resize_tall_image() {
        // 640 high, 320 wide.
        let geo = pad_geometry(640, 320, 320);
        assert_eq!((geo.content_h, geo.content_w), (320, 160));
        assert_eq!((geo.pad_top, geo.pad_left), (0, 80));
        let out = pad_resize(&gradient(320, 640), 320, [1, 2, 3]).unwrap();
        assert_eq!(out.dimensions(), (320, 320));
        assert_eq!(out.get_pixel(79, 100).0, [1, 2, 3]);
        assert_eq!(out.get_pixel(240, 100).0, [1, 2, 3]);
    }

    #[test]
    fn pad_resize_wide_image() {
        // 100 high, 400 wide.
        let geo = pad_geometry(100, 400, 320);
        assert_eq!((geo.content_h, geo.content_w), (80, 320));
        assert_eq!((geo.pad_top, geo.pad_left), (120, 0));
        let out = pad_resize(&gradient(400, 100), 320, [9, 9, 9]).unwrap();
        assert_eq!(out.get_pixel(10, 119).0, [9, 9, 9]);
        assert_eq!(out.get_pixel(10, 200).0, [9, 9, 9]);
    }

    #[test]
    fn pad_resize_identity() {
        let img = gradient(32, 32);
        let out = pad_resize(&img, 32, [0, 0, 0]).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn pad_resize_rejects_zero() {
        assert!(pad_resize(&gradient(4, 4), 0, [0, 0, 0]).is_err());
    }

    #[test]
    fn augment_disabled_is_identity() {
        let img = gradient(40, 30);
        let out = augment(&img, &AugmentConfig::disabled(), 17, [0, 0, 0]);
        assert_eq!(out, img);
    }

    #[test]
    fn flip_is_involution() {
        let img = gradient(13, 9);
        let cfg = AugmentConfig {
            flip_p: 1.0,
            ..AugmentConfig::disabled()
        };
        let once = augment(&img, &cfg, 3, [0, 0, 0]);
        assert_ne!(once, img);
        assert_eq!(augment(&once, &cfg, 3, [0, 0, 0]), img);
    }

    #[test]
    fn augment_is_deterministic() {
        let img = gradient(48, 64);
        let cfg = AugmentConfig {
            flip_p: 0.5,
            rotate_p: 1.0,
            crop_p: 1.0,
            jitter_p: 1.0,
            ..AugmentConfig::default()
        };
        assert_eq!(augment(&img, &cfg, 99, [5, 5, 5]), augment(&img, &cfg, 99, [5, 5, 5]));
    }

    #[test]
    fn degenerate_magnitudes_are_noops() {
        let img = gradient(20, 20);
        let cfg = AugmentConfig {
            flip_p: 0.0,
            rotate_p: 1.0,
            max_degrees: 0.0,
            crop_p: 1.0,
            crop_min_scale: 1.0,
            jitter_p: 1.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        };
        assert_eq!(augment(&img, &cfg, 5, [0, 0, 0]), img);
    }

    #[test]
    fn normalizer_layout() {
        let img = RgbImage::from_pixel(2, 2, Rgb([255, 0, 0]));
        let n = Normalizer {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let v = n.to_chw(&img);
        assert_eq!(&v[..4], &[1.0; 4]);
        assert_eq!(&v[4..], &[0.0; 8]);
    }
}
