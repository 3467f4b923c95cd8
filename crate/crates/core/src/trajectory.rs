//! Exposure-aware consistency trajectories.
//!
//! Each region follows its own path from the HDR target `x0` at `t ≈ 0` to
//! a region-specific terminal mix at `t = T`:
//!
//! * over-exposed: `(1-α)x0 + σ_o ε` (no LDR guidance),
//! * under-exposed: `(1-α)x0 + α λ_u blur(y0) + σ_u ε`,
//! * well-exposed: `(1-α)x0 + α y0 + σ_g ε`,
//!
//! and the state is the mask-weighted blend of the three. All regions share
//! one noise draw `ε`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::expomask::ExposureMasks;
use crate::image::{gaussian_blur, ImageF};

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub t_max: f64,
    pub eps_t: f64,
    pub n_steps: usize,
    pub sigma_g_scale: f64,
    pub sigma_u_scale: f64,
    pub sigma_o_scale: f64,
    pub lambda_u: f64,
    pub blur_sigma: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            t_max: 1.0,
            eps_t: 0.002,
            n_steps: 40,
            sigma_g_scale: 0.5,
            sigma_u_scale: 0.5,
            sigma_o_scale: 1.0,
            lambda_u: 1.0,
            blur_sigma: 2.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > 0.0 && self.eps_t > 0.0 && self.eps_t < self.t_max) {
            return Err(Error::invalid(format!(
                "schedule needs 0 < eps_t < T (got eps_t={}, T={})",
                self.eps_t, self.t_max
            )));
        }
        if self.n_steps < 1 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if self.sigma_g_scale < 0.0 || self.sigma_u_scale < 0.0 || self.sigma_o_scale < 0.0 {
            return Err(Error::invalid("noise scales must be non-negative"));
        }
        if self.sigma_o_scale < self.sigma_g_scale {
            return Err(Error::invalid("sigma_o must dominate sigma_g"));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(Error::invalid("blur sigma must be positive"));
        }
        Ok(())
    }

    /// Guidance weight `α(t) = t / T`.
    #[inline]
    pub fn alpha(&self, t: f64) -> f64 {
        t / self.t_max
    }

    #[inline]
    pub fn sigma_o(&self, t: f64) -> f64 {
        self.sigma_o_scale * t
    }

    #[inline]
    pub fn sigma_u(&self, t: f64) -> f64 {
        self.sigma_u_scale * t
    }

    #[inline]
    pub fn sigma_g(&self, t: f64) -> f64 {
        self.sigma_g_scale * t
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t.is_finite() && t >= self.eps_t && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "time {t} outside [{}, {}]",
                self.eps_t, self.t_max
            )))
        }
    }
}

/// Uniform grid of `N + 1` times from `eps_t` to `T`.
pub fn time_grid(sched: &Schedule) -> Result<Vec<f64>> {
    if sched.n_steps < 1 {
        return Err(Error::invalid("time grid needs N >= 1"));
    }
    let n = sched.n_steps;
    let step = (sched.t_max - sched.eps_t) / n as f64;
    Ok((0..=n)
        .map(|i| {
            if i == n {
                sched.t_max
            } else {
                sched.eps_t + i as f64 * step
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrajectoryMode {
    /// One trajectory for every pixel.
    Baseline,
    /// Over- and under-exposed pixels share the noise-only trajectory.
    TwoMask,
    /// Separate trajectories for over, under and well exposed pixels.
    ThreeMask,
}

impl TrajectoryMode {
    pub const ALL: [TrajectoryMode; 3] = [Self::Baseline, Self::TwoMask, Self::ThreeMask];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::TwoMask => "two-mask",
            Self::ThreeMask => "three-mask",
        }
    }
}

impl fmt::Display for TrajectoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrajectoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "two-mask" => Ok(Self::TwoMask),
            "three-mask" => Ok(Self::ThreeMask),
            other => Err(Error::invalid(format!("unknown trajectory mode '{other}'"))),
        }
    }
}

/// Per-sample conditioning reused across many trajectory evaluations.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub y0: ImageF,
    pub y0_blur: ImageF,
    pub masks: ExposureMasks,
}

impl Conditioning {
    pub fn new(y0: ImageF, masks: ExposureMasks, sched: &Schedule) -> Result<Self> {
        if y0.channels() != 3 {
            return Err(Error::Shape("LDR conditioning must be 3-channel".into()));
        }
        y0.ensure_same_size(&masks.w_good, "LDR vs masks")?;
        let y0_blur = gaussian_blur(&y0, sched.blur_sigma)?;
        Ok(Self { y0, y0_blur, masks })
    }
}

#[inline]
fn over_state(x0: f64, e: f64, a: f64, s_o: f64) -> f64 {
    (1.0 - a) * x0 + s_o * e
}

#[inline]
fn under_state(x0: f64, blur: f64, e: f64, a: f64, lambda_u: f64, s_u: f64) -> f64 {
    (1.0 - a) * x0 + a * lambda_u * blur + s_u * e
}

#[inline]
fn good_state(x0: f64, y0: f64, e: f64, a: f64, s_g: f64) -> f64 {
    (1.0 - a) * x0 + a * y0 + s_g * e
}

/// State `x_t` of the trajectory selected by `mode`, with precomputed
/// conditioning.
pub fn sample_state_with(
    cond: &Conditioning,
    x0: &ImageF,
    t: f64,
    eps: &ImageF,
    sched: &Schedule,
    mode: TrajectoryMode,
) -> Result<ImageF> {
    sched.check_time(t)?;
    x0.ensure_same_shape(&cond.y0, "x0 vs y0")?;
    x0.ensure_same_shape(eps, "x0 vs noise")?;
    let a = sched.alpha(t);
    let (s_o, s_u, s_g) = (sched.sigma_o(t), sched.sigma_u(t), sched.sigma_g(t));
    let lu = sched.lambda_u;
    let c = x0.channels();
    let m = &cond.masks;
    let (xd, yd, bd, ed) = (x0.data(), cond.y0.data(), cond.y0_blur.data(), eps.data());

    let data = (0..xd.len())
        .map(|i| {
            let p = i / c;
            let (x, y, b, e) = (xd[i], yd[i], bd[i], ed[i]);
            match mode {
                TrajectoryMode::Baseline => good_state(x, y, e, a, s_g),
                TrajectoryMode::TwoMask => {
                    let ill = m.w_over.data()[p] + m.w_under.data()[p];
                    ill * over_state(x, e, a, s_o) + m.w_good.data()[p] * good_state(x, y, e, a, s_g)
                }
                TrajectoryMode::ThreeMask => {
                    m.w_over.data()[p] * over_state(x, e, a, s_o)
                        + m.w_under.data()[p] * under_state(x, b, e, a, lu, s_u)
                        + m.w_good.data()[p] * good_state(x, y, e, a, s_g)
                }
            }
        })
        .collect();
    ImageF::new(x0.height(), x0.width(), c, data)
}

/// State `x_t` on the trajectory of `mode` for target `x0` and LDR `y0`.
pub fn sample_state(
    x0: &ImageF,
    y0: &ImageF,
    masks: &ExposureMasks,
    t: f64,
    eps: &ImageF,
    sched: &Schedule,
    mode: TrajectoryMode,
) -> Result<ImageF> {
    let cond = Conditioning::new(y0.clone(), masks.clone(), sched)?;
    sample_state_with(&cond, x0, t, eps, sched, mode)
}

/// The state at `t = T`, where the `x0` coefficient vanishes. This is the
/// starting point of one-step inference.
pub fn terminal_state_with(
    cond: &Conditioning,
    eps: &ImageF,
    sched: &Schedule,
    mode: TrajectoryMode,
) -> Result<ImageF> {
    let (h, w, c) = cond.y0.shape();
    sample_state_with(cond, &ImageF::zeros(h, w, c), sched.t_max, eps, sched, mode)
}

pub fn terminal_state(
    y0: &ImageF,
    masks: &ExposureMasks,
    eps: &ImageF,
    sched: &Schedule,
    mode: TrajectoryMode,
) -> Result<ImageF> {
    let cond = Conditioning::new(y0.clone(), masks.clone(), sched)?;
    terminal_state_with(&cond, eps, sched, mode)
}
