//! Image augmentation for fundus photographs: flips, rotation with small
//! affine jitter, colour jitter and random erasing. Minority grades get a
//! stronger parameter set.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::Grade;
use crate::parallel::Backend;
use crate::rng;

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image has zero width or height"));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Decode any format the `image` crate understands (PNG and JPEG enabled).
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(img.into())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img: image::RgbImage = self.clone().into();
        img.save(path)?;
        Ok(())
    }

    fn hflip(&mut self) {
        let w = self.width;
        for row in self.pixels.chunks_mut(3 * w) {
            for x in 0..w / 2 {
                for c in 0..3 {
                    row.swap(3 * x + c, 3 * (w - 1 - x) + c);
                }
            }
        }
    }

    fn vflip(&mut self) {
        let stride = 3 * self.width;
        for y in 0..self.height / 2 {
            let (top, bottom) = self.pixels.split_at_mut((self.height - 1 - y) * stride);
            top[y * stride..(y + 1) * stride].swap_with_slice(&mut bottom[..stride]);
        }
    }
}

impl From<image::RgbImage> for RgbImage {
    fn from(img: image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        RgbImage {
            width: w as usize,
            height: h as usize,
            pixels: img.into_raw(),
        }
    }
}

impl From<RgbImage> for image::RgbImage {
    fn from(img: RgbImage) -> Self {
        image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels)
            .expect("buffer length checked at construction")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotation_max_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Max translation as a fraction of width/height.
    pub translate_frac: f64,
    pub scale_range: (f64, f64),
    pub erase_prob: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_max_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            translate_frac: 0.0,
            scale_range: (1.0, 1.0),
            erase_prob: 0.0,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
        }
    }

    /// Augmentations applied to every grade.
    pub fn standard() -> Self {
        AugmentParams {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_max_deg: 30.0,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            translate_frac: 0.05,
            scale_range: (0.95, 1.05),
            ..Self::identity()
        }
    }

    /// Stronger set for Mild, Severe and Proliferative.
    pub fn minority() -> Self {
        AugmentParams {
            hflip_prob: 0.6,
            vflip_prob: 0.6,
            rotation_max_deg: 35.0,
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.3,
            hue: 0.05,
            erase_prob: 0.4,
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
            ("erase_prob", self.erase_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(Error::invalid(format!(
                "rotation_max_deg must be in [0, 180], got {}",
                self.rotation_max_deg
            )));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::invalid(format!("hue must be in [0, 0.5], got {}", self.hue)));
        }
        if !(0.0..1.0).contains(&self.translate_frac) {
            return Err(Error::invalid("translate_frac must be in [0, 1)"));
        }
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::invalid("scale_range must satisfy 0 < min <= max"));
        }
        let (a0, a1) = self.erase_area;
        if !(0.0 < a0 && a0 <= a1 && a1 < 1.0) {
            return Err(Error::invalid("erase_area must satisfy 0 < min <= max < 1"));
        }
        let (r0, r1) = self.erase_aspect;
        if !(0.0 < r0 && r0 <= r1) {
            return Err(Error::invalid("erase_aspect must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub standard: AugmentParams,
    pub minority: AugmentParams,
    pub minority_grades: Vec<Grade>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            standard: AugmentParams::standard(),
            minority: AugmentParams::minority(),
            minority_grades: vec![Grade::MILD, Grade::SEVERE, Grade::PROLIFERATIVE],
        }
    }
}

impl AugmentationConfig {
    /// The same parameters for every grade.
    pub fn uniform(params: AugmentParams) -> Self {
        AugmentationConfig {
            standard: params.clone(),
            minority: params,
            minority_grades: Vec::new(),
        }
    }

    pub fn params_for(&self, grade: Grade) -> &AugmentParams {
        if self.minority_grades.contains(&grade) {
            &self.minority
        } else {
            &self.standard
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.standard.validate()?;
        self.minority.validate()
    }
}

/// Augment one image. The result depends only on `(image, grade, config, seed)`.
pub fn augment(
    image: &RgbImage,
    grade: Grade,
    config: &AugmentationConfig,
    seed: u64,
) -> Result<RgbImage> {
    config.validate()?;
    if image.width == 0 || image.height == 0 {
        return Err(Error::invalid("cannot augment an empty image"));
    }
    let p = config.params_for(grade);
    let mut rng = rng::stream(seed, &[0xa06, grade.index() as u64]);
    let mut img = image.clone();

    if rng.random::<f64>() < p.hflip_prob {
        img.hflip();
    }
    if rng.random::<f64>() < p.vflip_prob {
        img.vflip();
    }

    let angle = symmetric(&mut rng, p.rotation_max_deg).to_radians();
    let tx = symmetric(&mut rng, p.translate_frac) * img.width as f64;
    let ty = symmetric(&mut rng, p.translate_frac) * img.height as f64;
    let scale = uniform(&mut rng, p.scale_range.0, p.scale_range.1);
    if angle != 0.0 || tx != 0.0 || ty != 0.0 || scale != 1.0 {
        img = warp(&img, angle, tx, ty, scale);
    }

    let brightness = 1.0 + symmetric(&mut rng, p.brightness);
    let contrast = 1.0 + symmetric(&mut rng, p.contrast);
    let saturation = 1.0 + symmetric(&mut rng, p.saturation);
    let hue = symmetric(&mut rng, p.hue);
    color_jitter(&mut img, brightness, contrast, saturation, hue);

    if rng.random::<f64>() < p.erase_prob {
        random_erase(&mut img, p, &mut rng);
    }
    Ok(img)
}

/// Augment many images in parallel; item `i` uses `seed` derived with `i`.
pub fn augment_batch(
    backend: Backend,
    items: &[(RgbImage, Grade)],
    config: &AugmentationConfig,
    seed: u64,
) -> Result<Vec<RgbImage>> {
    backend.try_map(items.len(), |i| {
        let (img, grade) = &items[i];
        augment(img, *grade, config, rng::derive_seed(seed, &[i as u64]))
    })
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    let u: f64 = rng.random();
    if max == 0.0 {
        0.0
    } else {
        (2.0 * u - 1.0) * max
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if lo == hi {
        lo
    } else {
        lo + u * (hi - lo)
    }
}

/// Rotate by `angle` about the centre, scale, then translate; bilinear
/// sampling with black outside the source.
fn warp(img: &RgbImage, angle: f64, tx: f64, ty: f64, scale: f64) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            // inverse rotation and scale
            let sx = (cos * dx + sin * dy) / scale + cx;
            let sy = (-sin * dx + cos * dy) / scale + cy;
            let px = bilinear(img, sx, sy);
            out[3 * (y * w + x)..][..3].copy_from_slice(&px);
        }
    }
    RgbImage {
        width: w,
        height: h,
        pixels: out,
    }
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> [u8; 3] {
    let (w, h) = (img.width as f64, img.height as f64);
    if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
        return [0; 3];
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |xi: f64, yi: f64| -> [f64; 3] {
        if xi < 0.0 || yi < 0.0 || xi >= w || yi >= h {
            [0.0; 3]
        } else {
            let p = img.pixel(xi as usize, yi as usize);
            [p[0] as f64, p[1] as f64, p[2] as f64]
        }
    };
    let a = sample(x0, y0);
    let b = sample(x0 + 1.0, y0);
    let c = sample(x0, y0 + 1.0);
    let d = sample(x0 + 1.0, y0 + 1.0);
    let mut out = [0u8; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - fx) + b[k] * fx;
        let bottom = c[k] * (1.0 - fx) + d[k] * fx;
        out[k] = to_u8(top * (1.0 - fy) + bottom * fy);
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn color_jitter(img: &mut RgbImage, brightness: f64, contrast: f64, saturation: f64, hue: f64) {
    if brightness == 1.0 && contrast == 1.0 && saturation == 1.0 && hue == 0.0 {
        return;
    }
    let mut px: Vec<[f64; 3]> = img
        .pixels
        .chunks(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    let clamp = |v: f64| v.clamp(0.0, 255.0);
    if brightness != 1.0 {
        for p in &mut px {
            *p = p.map(|v| clamp(v * brightness));
        }
    }
    if contrast != 1.0 {
        let mean = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len() as f64;
        for p in &mut px {
            *p = p.map(|v| clamp(mean + contrast * (v - mean)));
        }
    }
    if saturation != 1.0 {
        for p in &mut px {
            let g = luma(*p);
            *p = p.map(|v| clamp(g + saturation * (v - g)));
        }
    }
    if hue != 0.0 {
        for p in &mut px {
            let (h, s, v) = rgb_to_hsv(*p);
            *p = hsv_to_rgb((h + hue).rem_euclid(1.0), s, v);
        }
    }
    for (dst, p) in img.pixels.chunks_mut(3).zip(px) {
        for k in 0..3 {
            dst[k] = to_u8(p[k]);
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Replace one axis-aligned rectangle with random pixels. Up to ten
/// rectangle draws are tried; if none fits the image is left unchanged.
fn random_erase(img: &mut RgbImage, p: &AugmentParams, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.width, img.height);
    let total = (w * h) as f64;
    let (log_lo, log_hi) = (p.erase_aspect.0.ln(), p.erase_aspect.1.ln());
    for _ in 0..10 {
        let area = uniform(rng, p.erase_area.0, p.erase_area.1) * total;
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let frac = (eh * ew) as f64 / total;
        if frac < p.erase_area.0 || frac > p.erase_area.1 {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        for y in top..top + eh {
            for x in left..left + ew {
                let i = 3 * (y * w + x);
                for k in 0..3 {
                    img.pixels[i + k] = rng.random();
                }
            }
        }
        return;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> RgbImage {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        RgbImage::new(w, h, px).unwrap()
    }

    #[test]
    fn identity_config_is_byte_exact() {
        let img = gradient_image(17, 11);
        let cfg = AugmentationConfig::uniform(AugmentParams::identity());
        for seed in 0..20 {
            assert_eq!(augment(&img, Grade::SEVERE, &cfg, seed).unwrap(), img);
        }
    }

    #[test]
    fn flip_twice_restores() {
        let img = gradient_image(9, 6);
        let cfg = AugmentationConfig::uniform(AugmentParams {
            hflip_prob: 1.0,
            ..AugmentParams::identity()
        });
        let once = augment(&img, Grade::NO_DR, &cfg, 1).unwrap();
        assert_ne!(once, img);
        assert_eq!(once.pixel(0, 0), img.pixel(8, 0));
        let twice = augment(&once, Grade::NO_DR, &cfg, 1).unwrap();
        assert_eq!(twice, img);

        let mut v = img.clone();
        v.vflip();
        assert_eq!(v.pixel(3, 0), img.pixel(3, 5));
        v.vflip();
        assert_eq!(v, img);
    }

    #[test]
    fn dimensions_preserved_and_seed_deterministic() {
        let img = gradient_image(32, 24);
        let cfg = AugmentationConfig::default();
        for g in Grade::ALL {
            let a = augment(&img, g, &cfg, 42).unwrap();
            let b = augment(&img, g, &cfg, 42).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.width(), a.height()), (32, 24));
            assert_eq!(a.pixels().len(), img.pixels().len());
        }
    }

    #[test]
    fn minority_grades_use_override() {
        let cfg = AugmentationConfig::default();
        assert_eq!(cfg.params_for(Grade::MILD).erase_prob, 0.4);
        assert_eq!(cfg.params_for(Grade::MODERATE).erase_prob, 0.0);
        assert_eq!(cfg.params_for(Grade::PROLIFERATIVE).rotation_max_deg, 35.0);
        assert_eq!(cfg.params_for(Grade::NO_DR).rotation_max_deg, 30.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = AugmentationConfig::default();
        cfg.standard.hflip_prob = 1.5;
        assert!(augment(&gradient_image(4, 4), Grade::NO_DR, &cfg, 0).is_err());
        assert!(RgbImage::new(0, 3, vec![]).is_err());
    }

    #[test]
    fn batch_matches_single_calls() {
        let items: Vec<_> = (0..6)
            .map(|i| (gradient_image(10 + i, 8), Grade::new((i % 5) as u8).unwrap()))
            .collect();
        let cfg = AugmentationConfig::default();
        let seq = augment_batch(Backend::Sequential, &items, &cfg, 3).unwrap();
        let par = augment_batch(Backend::default(), &items, &cfg, 3).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn hsv_round_trip() {
        for p in [[10.0, 200.0, 30.0], [255.0, 0.0, 0.0], [40.0, 40.0, 40.0], [0.0, 10.0, 250.0]] {
            let (h, s, v) = rgb_to_hsv(p);
            let q = hsv_to_rgb(h, s, v);
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-9);
            }
        }
    }
}
