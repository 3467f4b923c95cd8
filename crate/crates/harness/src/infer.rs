//! One-step reconstruction and evaluation on held-out scenes.

use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::train::{Net, TrainState};
use hdrcm_core::colorspace::{mu_law_inv, srgb_decode};
use hdrcm_core::datagen::Pair;
use hdrcm_core::hdrio;
use hdrcm_core::image::sample_normal;
use hdrcm_core::metrics::{evaluate, MetricReport};
use hdrcm_core::trajectory::{terminal_state_with, Conditioning};
use hdrcm_core::{compute_masks, par, ImageF, SeededRng};
use hdrcm_nn::Checkpoint;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

/// Starting state of the one-step sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Terminal {
    /// The terminal state of the configured trajectory: LDR-guided where the
    /// capture is reliable, noise elsewhere.
    #[default]
    Blend,
    /// Noise at the over-exposed trajectory's terminal scale everywhere.
    PureNoise,
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blend => "blend",
            Self::PureNoise => "pure-noise",
        })
    }
}

impl FromStr for Terminal {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "blend" => Ok(Self::Blend),
            "pure-noise" => Ok(Self::PureNoise),
            other => Err(format!("unknown terminal state '{other}'")),
        }
    }
}

/// A trained network bound to its run configuration, evaluated with the
/// EMA weights θ⁻.
pub struct Reconstructor {
    pub cfg: RunConfig,
    net: Net,
}

impl Reconstructor {
    pub fn from_state(cfg: &RunConfig, state: &TrainState) -> Result<Self> {
        let net = Net::with_params(&cfg.net, state.ema.shadow.clone())?;
        log::debug!("inference weights: θ⁻ (EMA, decay {})", state.ema.decay);
        Ok(Self { cfg: cfg.clone(), net })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (cfg, state) = TrainState::from_checkpoint(ck)?;
        Self::from_state(&cfg, &state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn forward_calls(&self) -> u64 {
        self.net.forward_calls()
    }

    /// `f_θ⁻(x_T, T, y0)` in the μ-law working domain.
    pub fn reconstruct_mu(&self, ldr: &ImageF, rng: &mut SeededRng, terminal: Terminal) -> Result<ImageF> {
        let sched = &self.cfg.schedule;
        let masks = compute_masks(ldr, &self.cfg.masks)?;
        let cond = Conditioning::new(ldr.clone(), masks, sched)?;
        let eps = sample_normal(rng, ldr.height(), ldr.width(), 3);
        let x_t = match terminal {
            Terminal::Blend => terminal_state_with(&cond, &eps, sched, self.cfg.train.mode)?,
            Terminal::PureNoise => eps.map(|e| sched.sigma_o(sched.t_max) * e),
        };
        Ok(self.net.consistency_out(&x_t, sched.t_max, ldr, sched.eps_t)?)
    }

    /// Linear radiance in units of the training targets (p99 luminance 1),
    /// clamped at zero.
    pub fn reconstruct(&self, ldr: &ImageF, rng: &mut SeededRng, terminal: Terminal) -> Result<ImageF> {
        let mu = self.reconstruct_mu(ldr, rng, terminal)?;
        Ok(mu_law_inv(&mu, self.cfg.data.mu)?.map(|v| v.max(0.0)))
    }
}

/// Reads an LDR image, reconstructs it with noise keyed by `seed` and writes
/// the result (`.hdr` or `.pfm`).
pub fn infer_file(rec: &Reconstructor, ldr_path: &Path, out_path: &Path, seed: u64, terminal: Terminal) -> Result<()> {
    let ldr = hdrio::read_image(ldr_path)?;
    if ldr.channels() != 3 {
        return Err(HarnessError::Config(format!("{}: expected an RGB image", ldr_path.display())));
    }
    let hdr = rec.reconstruct(&ldr, &mut SeededRng::new(seed), terminal)?;
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    hdrio::write_image(out_path, &hdr)?;
    Ok(())
}

/// The reference that does no reconstruction: the LDR linearized and read
/// as radiance.
pub fn identity_prediction(ldr: &ImageF) -> ImageF {
    srgb_decode(ldr)
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub model: Vec<MetricReport>,
    pub identity: Vec<MetricReport>,
}

impl EvalResult {
    pub fn model_mean(&self) -> MetricReport {
        MetricReport::mean(&self.model)
    }

    pub fn identity_mean(&self) -> MetricReport {
        MetricReport::mean(&self.identity)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("image,method,{}\n", MetricReport::CSV_HEADER);
        for (i, (m, id)) in self.model.iter().zip(&self.identity).enumerate() {
            writeln!(out, "{i},model,{}", m.csv_row()).unwrap();
            writeln!(out, "{i},identity,{}", id.csv_row()).unwrap();
        }
        writeln!(out, "mean,model,{}", self.model_mean().csv_row()).unwrap();
        writeln!(out, "mean,identity,{}", self.identity_mean().csv_row()).unwrap();
        out
    }
}

/// Scores the model and the identity reference on `pairs`. Image `i` uses
/// noise stream `i` of `seeds.infer`.
pub fn evaluate_pairs(rec: &Reconstructor, pairs: &[Pair], terminal: Terminal) -> Result<EvalResult> {
    let cfg = &rec.cfg;
    let rows = par::map_range(pairs.len(), |i| -> Result<(MetricReport, MetricReport)> {
        let p = &pairs[i];
        let mut rng = SeededRng::derive(cfg.seeds.infer, i as u64);
        let pred = rec.reconstruct(&p.y0, &mut rng, terminal)?;
        Ok((
            evaluate(&pred, &p.hdr, &cfg.metrics)?,
            evaluate(&identity_prediction(&p.y0), &p.hdr, &cfg.metrics)?,
        ))
    });
    let (model, identity) = rows.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok(EvalResult { model, identity })
}
