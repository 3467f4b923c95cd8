//! Run configuration and its plain-text form.
//!
//! A config file holds `section.key = value` lines; `#` starts a comment.
//! Every key has a default, so a file only lists what it changes. Unknown
//! sections or keys are errors, as are keys given twice in one file.

use crate::error::{io_err, HarnessError, Result};
use hdrcm_core::datagen::{LdrSimConfig, PairConfig, SceneConfig};
use hdrcm_core::metrics::MetricConfig;
use hdrcm_core::{colorspace, MaskConfig, Schedule, TrajectoryMode};
use hdrcm_nn::{AdamWConfig, ElcConfig, LossMix, NetConfig};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Which ELC weighting stage 2 uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElcVariant {
    /// Stage 2 keeps optimizing the consistency loss alone.
    None,
    /// Constant luminance and chroma weights.
    Uniform,
    /// Exposure-guided weights.
    Full,
}

impl ElcVariant {
    pub const ALL: [ElcVariant; 3] = [Self::None, Self::Uniform, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "no-elc",
            Self::Uniform => "uniform-lab",
            Self::Full => "full-elc",
        }
    }
}

impl fmt::Display for ElcVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElcVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown ELC variant '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub mu: f64,
    pub min_tail_coverage: f64,
    pub max_attempts: usize,
    pub train_size: usize,
    pub eval_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mu: colorspace::MU,
            min_tail_coverage: 0.01,
            max_attempts: 64,
            train_size: 256,
            eval_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrajectoryMode,
    pub elc_variant: ElcVariant,
    pub batch_size: usize,
    pub crop: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Stage-2 peak learning rate as a fraction of `optim.lr`.
    pub stage2_lr_scale: f64,
    /// Weight of the consistency loss next to the ELC loss in stage 2.
    pub stage2_ct_weight: f64,
    pub elc_weight: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    /// Interval between EMA snapshots in the training log.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrajectoryMode::ThreeMask,
            elc_variant: ElcVariant::Full,
            batch_size: 4,
            crop: 64,
            stage1_iters: 10_000,
            stage2_iters: 3_000,
            stage2_lr_scale: 0.1,
            stage2_ct_weight: 0.1,
            elc_weight: 1.0,
            ema_decay: 0.999,
            grad_clip: 1.0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Loss weights of the given stage.
    pub fn loss_mix(&self, stage: u8) -> LossMix {
        if stage == 1 || self.elc_variant == ElcVariant::None {
            LossMix::CT_ONLY
        } else {
            LossMix {
                ct: self.stage2_ct_weight,
                elc: self.elc_weight,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seeds {
    pub data: u64,
    pub eval: u64,
    pub init: u64,
    pub train: u64,
    pub infer: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            eval: 2,
            init: 3,
            train: 4,
            infer: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub masks: MaskConfig,
    pub schedule: Schedule,
    pub net: NetConfig,
    pub elc: ElcConfig,
    pub scene: SceneConfig,
    pub ldr: LdrSimConfig,
    pub data: DataConfig,
    pub optim: AdamWConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
    pub seeds: Seeds,
    pub output: OutputConfig,
}


/// Text form of one config value. `Display` output must parse back to the
/// same value.
trait Value: Sized {
    fn emit(&self) -> String;
    fn parse(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! value_via_fromstr {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn emit(&self) -> String {
                self.to_string()
            }
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
        }
    )*};
}

value_via_fromstr!(f64, usize, u32, u64, bool, TrajectoryMode, ElcVariant);

impl Value for PathBuf {
    fn emit(&self) -> String {
        self.display().to_string()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
}

impl Value for (f64, f64) {
    fn emit(&self) -> String {
        format!("{}, {}", self.0, self.1)
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once(',').ok_or("expected 'lo, hi'")?;
        Ok((f64::parse(a.trim())?, f64::parse(b.trim())?))
    }
}

trait Section {
    fn emit(&self, name: &str, out: &mut String);
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;
}

macro_rules! section {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl Section for $ty {
            fn emit(&self, name: &str, out: &mut String) {
                $( writeln!(out, "{name}.{} = {}", stringify!($field), Value::emit(&self.$field)).unwrap(); )*
            }
            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($field) => self.$field = Value::parse(value)?, )*
                    _ => return Err("unknown key".into()),
                }
                Ok(())
            }
        }
    };
}

section!(MaskConfig { p_lo, p_hi, tau, eps_q });
section!(Schedule { t_max, eps_t, n_steps, sigma_g_scale, sigma_u_scale, sigma_o_scale, lambda_u, blur_sigma });
section!(NetConfig { base_channels, blocks_per_stage, time_embed_dim, in_channels, out_channels });
section!(ElcConfig {
    kappa_l_lo, kappa_l_hi, kappa_c_hi, kappa_c_lo, tau_s, tau_h, delta_s, delta_h, alpha_exp, c0, lambda_l0,
    lambda_c0, eps_charb,
});
section!(SceneConfig {
    height, width, min_shapes, max_shapes, min_lights, max_lights, light_intensity, octaves,
    illumination_log_std, min_dynamic_range, max_attempts,
});
section!(LdrSimConfig { exposure_range, sigma_read, sigma_shot, bits });
section!(DataConfig { mu, min_tail_coverage, max_attempts, train_size, eval_size });
section!(AdamWConfig { lr, lr_min, beta1, beta2, eps, weight_decay });
section!(TrainConfig {
    mode, elc_variant, batch_size, crop, stage1_iters, stage2_iters, stage2_lr_scale, stage2_ct_weight,
    elc_weight, ema_decay, grad_clip, log_every,
});
section!(MetricConfig { mu, peak_nits, ms_ssim_scales });
section!(Seeds { data, eval, init, train, infer });
section!(OutputConfig { dir });

impl RunConfig {
    fn sections(&self) -> [(&'static str, &dyn Section); 12] {
        [
            ("masks", &self.masks),
            ("schedule", &self.schedule),
            ("net", &self.net),
            ("elc", &self.elc),
            ("scene", &self.scene),
            ("ldr", &self.ldr),
            ("data", &self.data),
            ("optim", &self.optim),
            ("train", &self.train),
            ("metrics", &self.metrics),
            ("seeds", &self.seeds),
            ("output", &self.output),
        ]
    }

    fn section_mut(&mut self, name: &str) -> Option<&mut dyn Section> {
        Some(match name {
            "masks" => &mut self.masks,
            "schedule" => &mut self.schedule,
            "net" => &mut self.net,
            "elc" => &mut self.elc,
            "scene" => &mut self.scene,
            "ldr" => &mut self.ldr,
            "data" => &mut self.data,
            "optim" => &mut self.optim,
            "train" => &mut self.train,
            "metrics" => &mut self.metrics,
            "seeds" => &mut self.seeds,
            "output" => &mut self.output,
            _ => return None,
        })
    }

    /// Sets `section.key` from its text form.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| HarnessError::Config(format!("'{path}' is not of the form section.key")))?;
        let target = self
            .section_mut(section)
            .ok_or_else(|| HarnessError::Config(format!("unknown section '{section}' in '{path}'")))?;
        target
            .set(key, value.trim())
            .map_err(|e| HarnessError::Config(format!("{path} = {value}: {e}")))
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override '{assignment}' is not section.key=value")))?;
        self.set(path.trim(), value)
    }

    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    /// Applies config text on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (path, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected 'section.key = value'", n + 1)))?;
            let path = path.trim();
            if !seen.insert(path.to_string()) {
                return Err(HarnessError::Config(format!("line {}: '{path}' given twice", n + 1)));
            }
            self.set(path, value)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, section) in self.sections() {
            section.emit(name, &mut out);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    /// Hex SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig {
            scene: self.scene.clone(),
            ldr: self.ldr.clone(),
            masks: self.masks.clone(),
            mu: self.data.mu,
            min_tail_coverage: self.data.min_tail_coverage,
            max_attempts: self.data.max_attempts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.masks.validate()?;
        self.schedule.validate()?;
        self.net.validate()?;
        self.elc.validate()?;
        self.scene.validate()?;
        self.ldr.validate()?;
        self.optim.validate()?;
        let t = &self.train;
        let bad = |msg: &str| Err(HarnessError::Config(msg.into()));
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if t.crop == 0 || t.crop > self.scene.height || t.crop > self.scene.width {
            return bad("train.crop must be positive and fit inside the scene");
        }
        if !(0.0..=1.0).contains(&t.ema_decay) {
            return bad("train.ema_decay must lie in [0, 1]");
        }
        if !(t.grad_clip > 0.0) {
            return bad("train.grad_clip must be positive");
        }
        if !(t.stage2_lr_scale > 0.0) || t.stage2_ct_weight < 0.0 || t.elc_weight < 0.0 {
            return bad("stage-2 scales must be non-negative and the learning-rate scale positive");
        }
        if t.log_every == 0 {
            return bad("train.log_every must be positive");
        }
        if self.data.train_size == 0 {
            return bad("data.train_size must be positive");
        }
        if !(self.data.mu > 0.0) {
            return bad("data.mu must be positive");
        }
        Ok(())
    }
}
