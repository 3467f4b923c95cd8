//! Soft exposure partition of an LDR image.
//!
//! Luminance percentiles `q_lo`, `q_hi` define a core range shrunk by a
//! margin `τ` on each side. Pixels are scored by their clipped, normalized
//! distance below/above that core and the scores are combined into three
//! weight maps (over, under, well exposed).

use crate::colorspace::luminance;
use crate::error::{Error, Result};
use crate::image::{percentile_sorted, ImageF};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub p_lo: f64,
    pub p_hi: f64,
    pub tau: f64,
    /// Below this `q_hi - q_lo` the image counts as flat.
    pub eps_q: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            p_lo: 2.0,
            p_hi: 98.0,
            tau: 0.02,
            eps_q: 1e-4,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_lo && self.p_lo < self.p_hi && self.p_hi <= 100.0) {
            return Err(Error::invalid(format!(
                "mask percentiles must satisfy 0 <= p_lo < p_hi <= 100 (got {}, {})",
                self.p_lo, self.p_hi
            )));
        }
        if !(self.tau > 0.0 && self.tau < 0.5) {
            return Err(Error::invalid(format!("mask tau must be in (0, 0.5), got {}", self.tau)));
        }
        if !(self.eps_q >= 0.0) {
            return Err(Error::invalid("mask eps_q must be non-negative"));
        }
        Ok(())
    }
}

/// Luminance statistics behind a mask computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskStats {
    pub q_lo: f64,
    pub q_hi: f64,
    pub l_core: f64,
    pub h_core: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExposureMasks {
    pub w_over: ImageF,
    pub w_under: ImageF,
    pub w_good: ImageF,
    pub stats: MaskStats,
    /// Set when the luminance range was too narrow to partition; all
    /// pixels are then treated as well exposed.
    pub degenerate: bool,
}

impl ExposureMasks {
    /// Masks that mark every pixel as well exposed.
    pub fn all_good(height: usize, width: usize) -> Self {
        Self {
            w_over: ImageF::zeros(height, width, 1),
            w_under: ImageF::zeros(height, width, 1),
            w_good: ImageF::filled(height, width, 1, 1.0),
            stats: MaskStats {
                q_lo: 0.0,
                q_hi: 0.0,
                l_core: 0.0,
                h_core: 0.0,
            },
            degenerate: true,
        }
    }

    pub fn height(&self) -> usize {
        self.w_good.height()
    }

    pub fn width(&self) -> usize {
        self.w_good.width()
    }

    /// Window of all three maps.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            w_over: self.w_over.crop(y0, x0, h, w)?,
            w_under: self.w_under.crop(y0, x0, h, w)?,
            w_good: self.w_good.crop(y0, x0, h, w)?,
            stats: self.stats,
            degenerate: self.degenerate,
        })
    }

    /// Inspection composite: red = over, blue = under, green = well exposed.
    pub fn false_color(&self) -> ImageF {
        ImageF::from_fn(self.height(), self.width(), 3, |y, x, c| match c {
            0 => self.w_over.get(y, x, 0),
            1 => self.w_good.get(y, x, 0),
            _ => self.w_under.get(y, x, 0),
        })
    }
}

/// `(w_over, w_under)` for luminance `y` given the core range and the
/// transition band width `τ(q_hi - q_lo)`.
#[inline]
pub fn pixel_weights(y: f64, l_core: f64, h_core: f64, band: f64) -> (f64, f64) {
    let m_low = ((l_core - y) / band).clamp(0.0, 1.0);
    let m_high = ((y - h_core) / band).clamp(0.0, 1.0);
    (m_high * (1.0 - m_low), m_low * (1.0 - m_high))
}

/// Masks for a 3-channel LDR image in `[0, 1]`.
pub fn compute_masks(y0: &ImageF, cfg: &MaskConfig) -> Result<ExposureMasks> {
    let lum = luminance(y0)?;
    masks_from_luminance(&lum, cfg)
}

/// Masks from a precomputed single-channel luminance map.
pub fn masks_from_luminance(lum: &ImageF, cfg: &MaskConfig) -> Result<ExposureMasks> {
    cfg.validate()?;
    if lum.channels() != 1 {
        return Err(Error::Shape("luminance must be single-channel".into()));
    }
    let mut sorted = lum.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let q_lo = percentile_sorted(&sorted, cfg.p_lo);
    let q_hi = percentile_sorted(&sorted, cfg.p_hi);
    let range = q_hi - q_lo;
    if range < cfg.eps_q {
        let mut m = ExposureMasks::all_good(lum.height(), lum.width());
        m.stats = MaskStats {
            q_lo,
            q_hi,
            l_core: q_lo,
            h_core: q_hi,
        };
        return Ok(m);
    }
    let band = cfg.tau * range;
    let l_core = q_lo + band;
    let h_core = q_hi - band;

    let n = lum.pixels();
    let (mut over, mut under, mut good) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for &y in lum.data() {
        let (w_over, w_under) = pixel_weights(y, l_core, h_core, band);
        over.push(w_over);
        under.push(w_under);
        good.push(1.0 - w_over.max(w_under));
    }
    let (h, w) = (lum.height(), lum.width());
    Ok(ExposureMasks {
        w_over: ImageF::new(h, w, 1, over)?,
        w_under: ImageF::new(h, w, 1, under)?,
        w_good: ImageF::new(h, w, 1, good)?,
        stats: MaskStats {
            q_lo,
            q_hi,
            l_core,
            h_core,
        },
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> ImageF {
        ImageF::new(1, 101, 1, (0..=100).map(|i| i as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn ramp_statistics_and_extremes() {
        let m = masks_from_luminance(&ramp(), &MaskConfig::default()).unwrap();
        assert!((m.stats.q_lo - 0.02).abs() < 1e-12);
        assert!((m.stats.q_hi - 0.98).abs() < 1e-12);
        assert!((m.stats.l_core - 0.0392).abs() < 1e-12);
        assert!((m.stats.h_core - 0.9608).abs() < 1e-12);
        assert_eq!(m.w_under.get(0, 0, 0), 1.0);
        assert_eq!(m.w_good.get(0, 50, 0), 1.0);
        assert_eq!(m.w_over.get(0, 100, 0), 1.0);
        assert!(!m.degenerate);
    }

    #[test]
    fn flat_image_is_all_good() {
        let img = ImageF::filled(8, 8, 3, 0.5);
        let m = compute_masks(&img, &MaskConfig::default()).unwrap();
        assert!(m.degenerate);
        assert!(m.w_good.data().iter().all(|&v| v == 1.0));
        assert!(m.w_over.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let bad = MaskConfig {
            tau: 0.5,
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MaskConfig {
            p_lo: 50.0,
            p_hi: 50.0,
            ..MaskConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn lum_map() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 16..200)
    }

    proptest! {
        #[test]
        fn partition_of_unity(v in lum_map()) {
            let lum = ImageF::new(1, v.len(), 1, v).unwrap();
            let m = masks_from_luminance(&lum, &MaskConfig::default()).unwrap();
            for i in 0..lum.pixels() {
                let (o, u, g) = (m.w_over.data()[i], m.w_under.data()[i], m.w_good.data()[i]);
                prop_assert!((0.0..=1.0).contains(&o) && (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&g));
                prop_assert_eq!(o * u, 0.0);
                prop_assert!((o + u + g - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn affine_invariance(v in lum_map(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let lum = ImageF::new(1, v.len(), 1, v.clone()).unwrap();
            let scaled = lum.map(|y| a * y + b);
            let cfg = MaskConfig::default();
            let m1 = masks_from_luminance(&lum, &cfg).unwrap();
            let m2 = masks_from_luminance(&scaled, &cfg).unwrap();
            prop_assert_eq!(m1.degenerate, m2.degenerate);
            for (x, y) in m1.w_over.data().iter().zip(m2.w_over.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            for (x, y) in m1.w_under.data().iter().zip(m2.w_under.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn monotone_and_lipschitz(v in lum_map(), probe in 0.0f64..1.0, delta in 0.0f64..0.05) {
            let cfg = MaskConfig::default();
            let lum = ImageF::new(1, v.len(), 1, v).unwrap();
            let m = masks_from_luminance(&lum, &cfg).unwrap();
            prop_assume!(!m.degenerate);
            let s = m.stats;
            let band = cfg.tau * (s.q_hi - s.q_lo);
            let weights = |y: f64| pixel_weights(y, s.l_core, s.h_core, band);
            let (o1, u1) = weights(probe);
            let (o2, u2) = weights(probe + delta);
            prop_assert!(o2 >= o1 && u2 <= u1);
            prop_assert!((o2 - o1).abs() <= delta / band + 1e-12);
            prop_assert!((u2 - u1).abs() <= delta / band + 1e-12);
        }
    }
}
