//! Procedural HDR scenes and simulated single-exposure LDR captures.
//!
//! A scene is a smooth log-normal illumination field multiplied by a
//! reflectance map of random colored shapes, plus a few small emitters. The
//! LDR capture scales by an exposure, clips, adds read and shot noise in the
//! linear domain, applies the sRGB curve and quantizes to 8 bits.

use crate::colorspace::{self, luminance};
use crate::error::{Error, Result};
use crate::expomask::{compute_masks, ExposureMasks, MaskConfig};
use crate::image::{percentile, ImageF};
use crate::rng::SeededRng;

/// Smallest radiance the generator emits; keeps scenes strictly positive.
const RADIANCE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_lights: usize,
    pub max_lights: usize,
    /// Emitter peak intensity range, linear units.
    pub light_intensity: (f64, f64),
    pub octaves: usize,
    /// Standard deviation of the log-illumination field.
    pub illumination_log_std: f64,
    /// Required p99.9 / p0.1 luminance ratio; scenes below it are redrawn.
    pub min_dynamic_range: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_shapes: 2,
            max_shapes: 8,
            min_lights: 1,
            max_lights: 3,
            light_intensity: (2.0, 500.0),
            octaves: 4,
            illumination_log_std: 1.2,
            min_dynamic_range: 100.0,
            max_attempts: 64,
        }
    }
}

impl SceneConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::invalid("scene must be at least 2x2"));
        }
        if self.min_shapes > self.max_shapes || self.min_lights > self.max_lights {
            return Err(Error::invalid("shape/light count range is empty"));
        }
        let (lo, hi) = self.light_intensity;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("light intensity range must be positive"));
        }
        if self.octaves == 0 || self.max_attempts == 0 {
            return Err(Error::invalid("octaves and max_attempts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdrSimConfig {
    /// Log-uniform exposure range applied to the p99-normalized scene.
    pub exposure_range: (f64, f64),
    pub sigma_read: f64,
    pub sigma_shot: f64,
    pub bits: u32,
}

impl Default for LdrSimConfig {
    fn default() -> Self {
        Self {
            exposure_range: (0.125, 8.0),
            sigma_read: 0.01,
            sigma_shot: 0.02,
            bits: 8,
        }
    }
}

impl LdrSimConfig {
    pub fn noiseless() -> Self {
        Self {
            sigma_read: 0.0,
            sigma_shot: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.exposure_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("exposure range must be positive"));
        }
        if self.sigma_read < 0.0 || self.sigma_shot < 0.0 {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        if !(1..=16).contains(&self.bits) {
            return Err(Error::invalid("bit depth must be in 1..=16"));
        }
        Ok(())
    }
}

/// Sum of bilinearly upsampled random lattices, octave `k` having a
/// `2^(k+1)+1` lattice and amplitude `2^-k`. Normalized to zero mean and
/// unit standard deviation.
fn smooth_field(h: usize, w: usize, octaves: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    for k in 0..octaves {
        let n = (1usize << (k + 1)) + 1;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let amp = 0.5f64.powi(k as i32);
        for y in 0..h {
            let fy = y as f64 / (h - 1) as f64 * (n - 1) as f64;
            let y0 = (fy.floor() as usize).min(n - 2);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = x as f64 / (w - 1) as f64 * (n - 1) as f64;
                let x0 = (fx.floor() as usize).min(n - 2);
                let tx = fx - x0 as f64;
                let at = |yy: usize, xx: usize| lattice[yy * n + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                field[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64;
    let sd = var.sqrt().max(1e-12);
    field.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    field
}

fn random_color(rng: &mut SeededRng, lo: f64, hi: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.uniform_range(lo, hi))
}

/// One scene draw, without the dynamic-range check.
fn draw_scene(cfg: &SceneConfig, rng: &mut SeededRng) -> ImageF {
    let (h, w) = (cfg.height, cfg.width);
    let field = smooth_field(h, w, cfg.octaves, rng);
    let base = random_color(rng, 0.3, 0.8);
    let mut refl: Vec<[f64; 3]> = vec![base; h * w];

    let n_shapes = cfg.min_shapes + rng.index(cfg.max_shapes - cfg.min_shapes + 1);
    let scale = h.min(w) as f64;
    for _ in 0..n_shapes {
        let color = random_color(rng, 0.03, 1.0);
        let cy = rng.uniform_range(0.0, h as f64);
        let cx = rng.uniform_range(0.0, w as f64);
        let ry = rng.uniform_range(0.08, 0.3) * scale;
        let rx = rng.uniform_range(0.08, 0.3) * scale;
        let disc = rng.uniform() < 0.5;
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if disc {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    refl[y * w + x] = color;
                }
            }
        }
    }

    let mut data = vec![0.0; h * w * 3];
    for i in 0..h * w {
        let illum = (cfg.illumination_log_std * field[i]).exp();
        for c in 0..3 {
            data[3 * i + c] = illum * refl[i][c];
        }
    }

    let n_lights = cfg.min_lights + rng.index(cfg.max_lights - cfg.min_lights + 1);
    let (lo, hi) = cfg.light_intensity;
    for _ in 0..n_lights {
        let intensity = rng.log_uniform(lo, hi);
        let tint = random_color(rng, 0.7, 1.0);
        let cy = rng.uniform_range(0.0, h as f64);
        let cx = rng.uniform_range(0.0, w as f64);
        let radius = rng.uniform_range(0.01, 0.04) * scale + 0.75;
        let reach = (3.0 * radius).ceil() as isize;
        let (iy, ix) = (cy as isize, cx as isize);
        for y in (iy - reach).max(0)..(iy + reach + 1).min(h as isize) {
            for x in (ix - reach).max(0)..(ix + reach + 1).min(w as isize) {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                let g = intensity * (-d2 / (2.0 * radius * radius)).exp();
                let i = (y as usize * w + x as usize) * 3;
                for c in 0..3 {
                    data[i + c] += g * tint[c];
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.max(RADIANCE_FLOOR));
    ImageF::new(h, w, 3, data).expect("scene buffer matches its shape")
}

/// p99.9 / p0.1 of luminance.
pub fn dynamic_range(hdr: &ImageF) -> Result<f64> {
    let lum = luminance(hdr)?;
    let lo = percentile(lum.data(), 0.1)?;
    let hi = percentile(lum.data(), 99.9)?;
    Ok(hi / lo)
}

/// Draws scenes from `rng` until one reaches the configured dynamic range.
pub fn gen_hdr_scene(cfg: &SceneConfig, rng: &mut SeededRng) -> Result<ImageF> {
    cfg.validate()?;
    for _ in 0..cfg.max_attempts {
        let scene = draw_scene(cfg, rng);
        if dynamic_range(&scene)? >= cfg.min_dynamic_range {
            return Ok(scene);
        }
    }
    Err(Error::invalid(format!(
        "no scene reached dynamic range {} in {} attempts",
        cfg.min_dynamic_range, cfg.max_attempts
    )))
}

/// Captures `hdr` at a fixed `exposure`.
pub fn simulate_ldr_at(
    hdr: &ImageF,
    exposure: f64,
    cfg: &LdrSimConfig,
    rng: &mut SeededRng,
) -> Result<ImageF> {
    cfg.validate()?;
    if !(exposure > 0.0) {
        return Err(Error::invalid("exposure must be positive"));
    }
    if hdr.min() < 0.0 {
        return Err(Error::invalid("HDR input must be non-negative"));
    }
    let levels = f64::from((1u32 << cfg.bits) - 1);
    let noisy = cfg.sigma_read > 0.0 || cfg.sigma_shot > 0.0;
    let data = hdr
        .data()
        .iter()
        .map(|&x| {
            // Noise is added before the sensor clips, so saturated pixels
            // stay saturated.
            let signal = exposure * x;
            let mut v = signal.clamp(0.0, 1.0);
            if noisy {
                let sd = (cfg.sigma_read.powi(2) + cfg.sigma_shot.powi(2) * v).sqrt();
                v = (signal + sd * rng.normal()).clamp(0.0, 1.0);
            }
            let e = colorspace::srgb_encode_px(v).clamp(0.0, 1.0);
            (e * levels).round() / levels
        })
        .collect();
    ImageF::new(hdr.height(), hdr.width(), hdr.channels(), data)
}

/// Captures `hdr` at an exposure drawn log-uniformly from the configured
/// range; returns the LDR image and the exposure.
pub fn simulate_ldr(hdr: &ImageF, cfg: &LdrSimConfig, rng: &mut SeededRng) -> Result<(ImageF, f64)> {
    let (lo, hi) = cfg.exposure_range;
    let exposure = rng.log_uniform(lo, hi);
    Ok((simulate_ldr_at(hdr, exposure, cfg, rng)?, exposure))
}

/// Scales `hdr` so its 99th luminance percentile is 1. Returns the scaled
/// image and the factor to multiply by to undo it.
pub fn normalize_hdr(hdr: &ImageF) -> Result<(ImageF, f64)> {
    let scale = crate::metrics::normalization_scale(hdr)?;
    Ok((hdr.map(|v| v / scale), scale))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairConfig {
    pub scene: SceneConfig,
    pub ldr: LdrSimConfig,
    pub masks: MaskConfig,
    pub mu: f64,
    /// Minimum mean of each of `w_over` and `w_under`; captures below it
    /// are redrawn with a new exposure.
    pub min_tail_coverage: f64,
    pub max_attempts: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            ldr: LdrSimConfig::default(),
            masks: MaskConfig::default(),
            mu: colorspace::MU,
            min_tail_coverage: 0.01,
            max_attempts: 64,
        }
    }
}

/// A training or evaluation sample.
#[derive(Clone, Debug)]
pub struct Pair {
    /// Scene radiance scaled so its p99 luminance is 1.
    pub hdr: ImageF,
    /// μ-law of `hdr`: the network's target domain. Exceeds 1 only above
    /// the 99th percentile.
    pub x0: ImageF,
    /// 8-bit LDR capture in `[0, 1]`.
    pub y0: ImageF,
    pub masks: ExposureMasks,
    /// Multiplier restoring the generator's original radiance scale.
    pub scale: f64,
    pub exposure: f64,
}

/// Builds sample `index` of the stream keyed by `seed`.
pub fn make_pair(cfg: &PairConfig, seed: u64, index: u64) -> Result<Pair> {
    let mut rng = SeededRng::derive(seed, index);
    let mut scene_rng = rng.split();
    let mut ldr_rng = rng.split();
    for _ in 0..cfg.max_attempts {
        let raw = gen_hdr_scene(&cfg.scene, &mut scene_rng)?;
        let (hdr, scale) = normalize_hdr(&raw)?;
        for _ in 0..cfg.max_attempts {
            let (y0, exposure) = simulate_ldr(&hdr, &cfg.ldr, &mut ldr_rng)?;
            let masks = compute_masks(&y0, &cfg.masks)?;
            if masks.w_over.mean() >= cfg.min_tail_coverage
                && masks.w_under.mean() >= cfg.min_tail_coverage
            {
                let x0 = colorspace::mu_law(&hdr, cfg.mu)?;
                return Ok(Pair {
                    hdr,
                    x0,
                    y0,
                    masks,
                    scale,
                    exposure,
                });
            }
        }
    }
    Err(Error::invalid("no capture exercised both exposure tails"))
}

/// Samples `0..n` of the stream keyed by `seed`, built in parallel.
pub fn make_pairs(cfg: &PairConfig, seed: u64, n: usize) -> Result<Vec<Pair>> {
    crate::par::map_range(n, |i| make_pair(cfg, seed, i as u64))
        .into_iter()
        .collect()
}
