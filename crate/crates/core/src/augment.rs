//! Image views for the two branches: the basic augmentation (flip, pad-crop,
//! random erasing), the grayscale transform, and color jitter.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// RGB image with pixels in `[0, 1]`, stored row-major as height x width x 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Settings for the basic augmentation and the jitter view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Zero padding on each side before the random crop back to the input size.
    pub crop_pad: usize,
    pub erase_prob: f64,
    /// Area fraction range of the erased rectangle.
    pub erase_area: (f64, f64),
    pub jitter_strength: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            crop_pad: 2,
            erase_prob: 0.5,
            erase_area: (0.1, 0.3),
            jitter_strength: 0.4,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which [`apply_basic`] is the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            crop_pad: 0,
            erase_prob: 0.0,
            erase_area: (0.1, 0.3),
            jitter_strength: 0.0,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.flip_prob) || !prob(self.erase_prob) || !prob(self.jitter_strength) {
            return Err(Error::InvalidArgument("augment probabilities must be in [0, 1]".into()));
        }
        let (lo, hi) = self.erase_area;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!("bad erase area range ({lo}, {hi})")));
        }
        if self.crop_pad >= height.min(width) {
            return Err(Error::InvalidArgument(format!(
                "crop_pad {} must be below min(height, width) = {}",
                self.crop_pad,
                height.min(width)
            )));
        }
        Ok(())
    }
}

/// What the second branch sees on top of its basic augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewMode {
    #[default]
    Grayscale,
    Jitter,
    Plain,
}

impl std::str::FromStr for ViewMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" | "grayscale" => Ok(ViewMode::Grayscale),
            "jitter" => Ok(ViewMode::Jitter),
            "plain" => Ok(ViewMode::Plain),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for ViewMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ViewMode::Grayscale => "gray",
            ViewMode::Jitter => "jitter",
            ViewMode::Plain => "plain",
        })
    }
}

/// Flip, then pad-and-crop, then random erasing, each with its own probability.
pub fn apply_basic(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();

    if rng.random::<f64>() < cfg.flip_prob {
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, img.get(y, w - 1 - x));
            }
        }
    }

    if cfg.crop_pad > 0 {
        let pad = cfg.crop_pad as i64;
        let dy = (rng.random_range(0..=2 * pad) - pad) as isize;
        let dx = (rng.random_range(0..=2 * pad) - pad) as isize;
        if dy != 0 || dx != 0 {
            let src = out.clone();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (sy, sx) = (y + dy, x + dx);
                    let v = if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                        src.get(sy as usize, sx as usize)
                    } else {
                        [0.0; 3]
                    };
                    out.set(y as usize, x as usize, v);
                }
            }
        }
    }

    if rng.random::<f64>() < cfg.erase_prob {
        if let Some((y0, x0, eh, ew)) = erase_rect(h, w, cfg.erase_area, rng) {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    out.set(y, x, [rng.random(), rng.random(), rng.random()]);
                }
            }
        }
    }
    out
}

/// Samples an erase rectangle whose pixel-area fraction lies in `area`.
fn erase_rect(h: usize, w: usize, area: (f64, f64), rng: &mut Rng) -> Option<(usize, usize, usize, usize)> {
    let total = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(area.0..=area.1) * total;
        let log_ratio = rng.random_range((0.3f64).ln()..=(1.0f64 / 0.3).ln());
        let ratio = log_ratio.exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let frac = (eh * ew) as f64 / total;
        if frac < area.0 || frac > area.1 {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        return Some((y0, x0, eh, ew));
    }
    None
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luminance(rgb: [f64; 3]) -> f64 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

/// Replaces each pixel by its luminance in all three channels.
pub fn to_grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for px in out.pixels.chunks_exact_mut(3) {
        // Gray pixels pass through exactly; the weights sum to 1 only up to rounding.
        if px[0] != px[1] || px[1] != px[2] {
            let y = luminance([px[0], px[1], px[2]]).clamp(0.0, 1.0);
            px.fill(y);
        }
    }
    out
}

/// Brightness, contrast and saturation perturbations, each an affine map of
/// the pixel with its factor drawn from `[1 - strength, 1 + strength]`, plus a
/// per-channel gain in the same range. Output is clamped to `[0, 1]`.
pub fn color_jitter(img: &Image, strength: f64, rng: &mut Rng) -> Image {
    if strength <= 0.0 {
        return img.clone();
    }
    let mut factor = || rng.random_range(1.0 - strength..=1.0 + strength);
    let brightness = factor();
    let contrast = factor();
    let saturation = factor();
    let gains = [factor(), factor(), factor()];

    let n = (img.height * img.width) as f64;
    let mean_luma = img
        .pixels
        .chunks_exact(3)
        .map(|p| luminance([p[0], p[1], p[2]]))
        .sum::<f64>()
        / n;

    let mut out = img.clone();
    for px in out.pixels.chunks_exact_mut(3) {
        let mut rgb = [px[0], px[1], px[2]];
        for (c, g) in rgb.iter_mut().zip(gains) {
            *c = (*c * g * brightness).clamp(0.0, 1.0);
        }
        for c in rgb.iter_mut() {
            *c = (contrast * *c + (1.0 - contrast) * mean_luma).clamp(0.0, 1.0);
        }
        let gray = luminance(rgb);
        for c in rgb.iter_mut() {
            *c = (saturation * *c + (1.0 - saturation) * gray).clamp(0.0, 1.0);
        }
        px.copy_from_slice(&rgb);
    }
    out
}

/// The two branch inputs for one image: `T(img)` and, by default, `G(T'(img))`.
pub fn make_views(img: &Image, cfg: &AugmentConfig, mode: ViewMode, rng: &mut Rng) -> (Image, Image) {
    let first = apply_basic(img, cfg, rng);
    let second = apply_basic(img, cfg, rng);
    let second = match mode {
        ViewMode::Grayscale => to_grayscale(&second),
        ViewMode::Jitter => color_jitter(&second, cfg.jitter_strength, rng),
        ViewMode::Plain => second,
    };
    (first, second)
}

/// The deterministic (augmentation-free) input of the second branch.
pub fn second_branch_plain(img: &Image, mode: ViewMode) -> Image {
    match mode {
        ViewMode::Grayscale => to_grayscale(img),
        ViewMode::Jitter | ViewMode::Plain => img.clone(),
    }
}
