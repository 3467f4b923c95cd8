//! Consistency-training and exposure-guided luminance/chromaticity losses.

use hdrcm_core::colorspace::{self, luminance, rgb_to_lab_jacobian};
use hdrcm_core::trajectory::{sample_state_with, Conditioning, Schedule, TrajectoryMode};
use hdrcm_core::{ExposureMasks, ImageF};

use crate::error::{NnError, Result};
use crate::net::{c_out, c_skip, ConsistencyNet};
use crate::real::Real;
use crate::tensor::ParamSet;

/// Robust penalty `sqrt(x² + ε²)`.
pub fn charbonnier(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElcConfig {
    pub kappa_l_lo: f64,
    pub kappa_l_hi: f64,
    pub kappa_c_hi: f64,
    pub kappa_c_lo: f64,
    pub tau_s: f64,
    pub tau_h: f64,
    pub delta_s: f64,
    pub delta_h: f64,
    /// Exponent applied to the exposure masks.
    pub alpha_exp: f64,
    /// Chroma scale of the near-white highlight gate, in Lab units.
    pub c0: f64,
    pub lambda_l0: f64,
    pub lambda_c0: f64,
    pub eps_charb: f64,
}

impl Default for ElcConfig {
    fn default() -> Self {
        Self {
            kappa_l_lo: 3.0,
            kappa_l_hi: 1.0,
            kappa_c_hi: 3.0,
            kappa_c_lo: 0.5,
            tau_s: 0.2,
            tau_h: 0.8,
            delta_s: 0.1,
            delta_h: 0.1,
            alpha_exp: 1.0,
            c0: 20.0,
            lambda_l0: 1.0,
            lambda_c0: 1.0,
            eps_charb: 1e-3,
        }
    }
}

impl ElcConfig {
    pub fn validate(&self) -> Result<()> {
        let kappas = [self.kappa_l_lo, self.kappa_l_hi, self.kappa_c_hi, self.kappa_c_lo];
        if kappas.iter().any(|&k| !(k >= 0.0)) {
            return Err(NnError::Config("ELC κ weights must be non-negative".into()));
        }
        if !(self.delta_s > 0.0 && self.delta_h > 0.0 && self.alpha_exp > 0.0 && self.c0 > 0.0) {
            return Err(NnError::Config("ELC δ, alpha_exp and c0 must be positive".into()));
        }
        if !(self.eps_charb > 0.0) || self.lambda_l0 < 0.0 || self.lambda_c0 < 0.0 {
            return Err(NnError::Config("ELC ε must be positive and λ non-negative".into()));
        }
        Ok(())
    }
}

/// Per-pixel luminance and chroma weights (`H×W×1` each).
#[derive(Clone, Debug, PartialEq)]
pub struct ElcWeights {
    pub w_l: ImageF,
    pub w_c: ImageF,
}

/// Gates and weights at one pixel: `(w_L, w_C)`.
pub fn elc_pixel_weights(y: f64, w_over: f64, w_under: f64, gt_chroma: f64, cfg: &ElcConfig) -> (f64, f64) {
    let s_y = sigmoid((cfg.tau_s - y) / cfg.delta_s);
    let h_y = sigmoid((y - cfg.tau_h) / cfg.delta_h);
    let a_spec = 1.0 / (1.0 + gt_chroma / cfg.c0);
    let over = w_over.powf(cfg.alpha_exp);
    let under = w_under.powf(cfg.alpha_exp);
    let w_l = cfg.lambda_l0 * (1.0 + cfg.kappa_l_lo * s_y * under + cfg.kappa_l_hi * a_spec * over);
    let w_c = cfg.lambda_c0 * (cfg.kappa_c_hi * over * (1.0 - a_spec) * h_y + cfg.kappa_c_lo * under * (1.0 - s_y));
    (w_l, w_c)
}

/// ELC weights from the LDR luminance `y_lum` (`H×W×1`), its masks and the
/// ground-truth Lab image.
pub fn elc_weights(y_lum: &ImageF, masks: &ExposureMasks, gt_lab: &ImageF, cfg: &ElcConfig) -> Result<ElcWeights> {
    cfg.validate()?;
    if y_lum.channels() != 1 || gt_lab.channels() != 3 {
        return Err(NnError::Shape("expected 1-channel luminance and 3-channel Lab".into()));
    }
    y_lum.ensure_same_size(gt_lab, "luminance vs Lab")?;
    y_lum.ensure_same_size(&masks.w_over, "luminance vs masks")?;
    let n = y_lum.pixels();
    let mut w_l = Vec::with_capacity(n);
    let mut w_c = Vec::with_capacity(n);
    for i in 0..n {
        let lab = gt_lab.pixel(i);
        let chroma = lab[1].hypot(lab[2]);
        let (l, c) = elc_pixel_weights(
            y_lum.data()[i],
            masks.w_over.data()[i],
            masks.w_under.data()[i],
            chroma,
            cfg,
        );
        w_l.push(l);
        w_c.push(c);
    }
    let (h, w) = (y_lum.height(), y_lum.width());
    Ok(ElcWeights {
        w_l: ImageF::new(h, w, 1, w_l)?,
        w_c: ImageF::new(h, w, 1, w_c)?,
    })
}

/// Constant weights `λ_L⁰`, `λ_C⁰`: the unweighted Lab loss.
pub fn uniform_weights(height: usize, width: usize, cfg: &ElcConfig) -> ElcWeights {
    ElcWeights {
        w_l: ImageF::filled(height, width, 1, cfg.lambda_l0),
        w_c: ImageF::filled(height, width, 1, cfg.lambda_c0),
    }
}

/// Weighted Charbonnier loss between `pred` (display-referred RGB) and a
/// ground-truth Lab image, with its gradient with respect to `pred`.
pub fn elc_loss_display(pred: &ImageF, gt_lab: &ImageF, weights: &ElcWeights, eps: f64) -> Result<(f64, ImageF)> {
    pred.ensure_same_shape(gt_lab, "prediction vs Lab target")?;
    pred.ensure_same_size(&weights.w_l, "prediction vs weights")?;
    let n = pred.pixels();
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(3 * n);
    for i in 0..n {
        let p = pred.pixel(i);
        let g = gt_lab.pixel(i);
        let (lab, jac) = rgb_to_lab_jacobian([p[0], p[1], p[2]]);
        let dl = lab[0] - g[0];
        let (da, db) = (lab[1] - g[1], lab[2] - g[2]);
        let rho_l = charbonnier(dl, eps);
        // ρ(ΔC) with ΔC = |(Δa, Δb)|; written this way it stays smooth at ΔC = 0.
        let rho_c = (da * da + db * db + eps * eps).sqrt();
        let (wl, wc) = (weights.w_l.data()[i], weights.w_c.data()[i]);
        loss += wl * rho_l + wc * rho_c;
        let g_lab = [wl * dl / rho_l * inv, wc * da / rho_c * inv, wc * db / rho_c * inv];
        for j in 0..3 {
            grad.push((0..3).map(|k| jac[k][j] * g_lab[k]).sum());
        }
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("ELC loss".into()));
    }
    Ok((loss, ImageF::new(pred.height(), pred.width(), 3, grad)?))
}

/// ELC loss between linear HDR images, compressed by μ-law and converted to
/// Lab, weighted from the LDR input `y0`. Returns the loss and its gradient
/// with respect to `pred_hdr`.
pub fn elc_loss(
    pred_hdr: &ImageF,
    gt_hdr: &ImageF,
    y0: &ImageF,
    masks: &ExposureMasks,
    cfg: &ElcConfig,
    mu: f64,
) -> Result<(f64, ImageF)> {
    let pred_mu = colorspace::mu_law(pred_hdr, mu)?;
    let gt_lab = colorspace::linear_to_lab(&colorspace::mu_law(gt_hdr, mu)?)?;
    let weights = elc_weights(&luminance(y0)?, masks, &gt_lab, cfg)?;
    let (loss, g) = elc_loss_display(&pred_mu, &gt_lab, &weights, cfg.eps_charb)?;
    let grad = g.zip_map(pred_hdr, |g, x| g * colorspace::mu_law_prime(x, mu))?;
    Ok((loss, grad))
}

/// Supervision for the ELC term of one training sample.
#[derive(Clone, Debug)]
pub struct ElcTarget {
    pub gt_lab: ImageF,
    pub weights: ElcWeights,
    pub eps: f64,
}

impl ElcTarget {
    /// Target for a working-domain ground truth `x0` (already μ-law).
    pub fn new(x0: &ImageF, cond: &Conditioning, cfg: &ElcConfig, uniform: bool) -> Result<Self> {
        let gt_lab = colorspace::linear_to_lab(x0)?;
        let weights = if uniform {
            uniform_weights(x0.height(), x0.width(), cfg)
        } else {
            elc_weights(&luminance(&cond.y0)?, &cond.masks, &gt_lab, cfg)?
        };
        Ok(Self {
            gt_lab,
            weights,
            eps: cfg.eps_charb,
        })
    }
}

/// One training sample: working-domain target, conditioning and optional
/// ELC supervision.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x0: ImageF,
    pub cond: Conditioning,
    pub elc: Option<ElcTarget>,
}

/// Random choices for one sample in one step: the grid interval
/// `(grid[index], grid[index + 1])` and the shared noise.
#[derive(Clone, Debug)]
pub struct Draw {
    pub index: usize,
    pub eps: ImageF,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossMix {
    pub ct: f64,
    pub elc: f64,
}

impl LossMix {
    pub const CT_ONLY: LossMix = LossMix { ct: 1.0, elc: 0.0 };
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// `mix.ct · ct + mix.elc · elc`.
    pub loss: f64,
    pub ct: f64,
    pub elc: f64,
    pub grads: ParamSet<T>,
}

struct SampleOut<T> {
    ct: f64,
    elc: f64,
    grads: ParamSet<T>,
}

fn sample_step<T: Real>(
    net: &ConsistencyNet<T>,
    target: &ParamSet<T>,
    sample: &Sample,
    draw: &Draw,
    grid: &[f64],
    sched: &Schedule,
    mode: TrajectoryMode,
    mix: LossMix,
    batch: usize,
) -> Result<SampleOut<T>> {
    if draw.index + 1 >= grid.len() {
        return Err(NnError::Config(format!("time index {} outside the grid", draw.index)));
    }
    let (t_prev, t) = (grid[draw.index], grid[draw.index + 1]);
    let x_t = sample_state_with(&sample.cond, &sample.x0, t, &draw.eps, sched, mode)?;
    let x_prev = sample_state_with(&sample.cond, &sample.x0, t_prev, &draw.eps, sched, mode)?;
    let eps_t = sched.eps_t;

    // Target branch: evaluated with θ⁻ and never differentiated.
    let y0 = &sample.cond.y0;
    let goal = net.consistency_out_with(target, &x_prev, t_prev, y0, eps_t)?;

    let (raw, tape) = net.raw_forward_tape(&x_t, t, y0)?;
    let (s, o) = (c_skip(t, eps_t), c_out(t, eps_t));
    let pred = x_t.zip_map(&raw, |x, r| s * x + o * r)?;

    let n = pred.data().len() as f64;
    let b = batch as f64;
    let diff = pred.zip_map(&goal, |p, g| p - g)?;
    let ct = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    let mut dpred = diff.map(|d| mix.ct * 2.0 * d / (n * b));

    let mut elc = 0.0;
    if mix.elc != 0.0 {
        let target = sample
            .elc
            .as_ref()
            .ok_or_else(|| NnError::Config("ELC weight set but sample has no ELC target".into()))?;
        let (value, g) = elc_loss_display(&pred, &target.gt_lab, &target.weights, target.eps)?;
        elc = value;
        dpred = dpred.zip_map(&g, |a, g| a + mix.elc * g / b)?;
    }
    if !(ct.is_finite() && elc.is_finite()) {
        return Err(NnError::NonFinite(format!("loss at t = {t}: ct {ct}, elc {elc}")));
    }
    Ok(SampleOut {
        ct,
        elc,
        grads: net.raw_backward(&tape, &dpred.map(|g| o * g)),
    })
}

/// Loss and parameter gradient of one training step, averaged over the
/// batch. Samples are processed in parallel and their gradients summed in
/// batch order, so the result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn consistency_step<T: Real>(
    net: &ConsistencyNet<T>,
    target: &ParamSet<T>,
    samples: &[Sample],
    draws: &[Draw],
    grid: &[f64],
    sched: &Schedule,
    mode: TrajectoryMode,
    mix: LossMix,
) -> Result<StepOutput<T>> {
    if samples.is_empty() || samples.len() != draws.len() {
        return Err(NnError::Shape("need one draw per sample and a non-empty batch".into()));
    }
    let batch = samples.len();
    let outs = hdrcm_core::par::map_range(batch, |i| {
        sample_step(net, target, &samples[i], &draws[i], grid, sched, mode, mix, batch)
    });
    let mut grads = net.params().zeros_like();
    let (mut ct, mut elc) = (0.0, 0.0);
    for out in outs {
        let out = out?;
        ct += out.ct;
        elc += out.elc;
        grads.add_assign(&out.grads);
    }
    ct /= batch as f64;
    elc /= batch as f64;
    Ok(StepOutput {
        loss: mix.ct * ct + mix.elc * elc,
        ct,
        elc,
        grads,
    })
}
