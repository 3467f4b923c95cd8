//! Two-stage training: consistency training, then ELC finetuning.

use crate::config::RunConfig;
use crate::data::{make_batch, train_set, TrainItem};
use crate::error::{io_err, HarnessError, Result};
use hdrcm_core::trajectory::time_grid;
use hdrcm_core::SeededRng;
use hdrcm_nn::losses::consistency_step;
use hdrcm_nn::optim::{clip_grad_norm, cosine_lr};
use hdrcm_nn::{AdamW, Checkpoint, ConsistencyNet, EmaState, NnError};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Networks train in single precision.
pub type Net = ConsistencyNet<f32>;

#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: Net,
    pub ema: EmaState<f32>,
    pub opt: AdamW<f32>,
    /// Iterations completed in stages 1 and 2.
    pub done: [usize; 2],
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let net = Net::init(&cfg.net, &mut SeededRng::new(cfg.seeds.init))?;
        let ema = EmaState::new(net.params(), cfg.train.ema_decay)?;
        let opt = AdamW::new(net.params(), cfg.optim.clone())?;
        Ok(Self { net, ema, opt, done: [0, 0] })
    }

    /// Everything needed to resume or run inference.
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.push_str(&cfg.to_text());
        ck.push_meta("state.config_hash", cfg.hash());
        ck.push_meta("state.stage1_done", self.done[0]);
        ck.push_meta("state.stage2_done", self.done[1]);
        ck.push_meta("state.adam_step", self.opt.step);
        ck.push_params("theta", self.net.params());
        ck.push_params("ema", &self.ema.shadow);
        ck.push_params("adam_m", &self.opt.m);
        ck.push_params("adam_v", &self.opt.v);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Self)> {
        let cfg = config_from_checkpoint(ck)?;
        let mut state = Self::init(&cfg)?;
        let layout = state.net.params().clone();
        state.net.set_params(ck.params("theta", &layout)?)?;
        state.ema.shadow = ck.params("ema", &layout)?;
        state.opt.m = ck.params("adam_m", &layout)?;
        state.opt.v = ck.params("adam_v", &layout)?;
        let num = |key: &str| -> Result<u64> {
            ck.meta_get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| HarnessError::Config(format!("checkpoint lacks {key}")))
        };
        state.opt.step = num("state.adam_step")?;
        state.done = [num("state.stage1_done")? as usize, num("state.stage2_done")? as usize];
        Ok((cfg, state))
    }
}

/// The run configuration stored in a checkpoint; the stored hash must match.
pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<RunConfig> {
    let text: String = ck
        .meta
        .lines()
        .filter(|l| !l.trim_start().starts_with("state."))
        .fold(String::new(), |mut s, l| {
            writeln!(s, "{l}").unwrap();
            s
        });
    let cfg = RunConfig::from_text(&text)?;
    match ck.meta_get("state.config_hash") {
        Some(h) if h == cfg.hash() => Ok(cfg),
        Some(_) => Err(HarnessError::Config("checkpoint config hash mismatch".into())),
        None => Err(HarnessError::Config("checkpoint lacks state.config_hash".into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub stage: u8,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub ct: f64,
    pub elc: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Norm of θ⁻ after this iteration, recorded every `log_every` steps.
    pub ema_norm: Option<f64>,
    pub wall_s: f64,
}

/// Append-only record of a run. Everything except `wall_s` is a pure
/// function of the configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub config_hash: String,
    pub seeds: String,
    pub records: Vec<LogRecord>,
}

const LOG_HEADER: &str = "stage,iter,lr,loss,ct,elc,grad_norm,ema_norm,wall_s";

impl TrainLog {
    pub fn new(cfg: &RunConfig) -> Self {
        let s = &cfg.seeds;
        Self {
            config_hash: cfg.hash(),
            seeds: format!("data={} eval={} init={} train={} infer={}", s.data, s.eval, s.init, s.train, s.infer),
            records: Vec::new(),
        }
    }

    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# config_hash = {}\n# seeds = {}\n{LOG_HEADER}\n", self.config_hash, self.seeds);
        for r in &self.records {
            let ema = r.ema_norm.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{ema},{:.3}",
                r.stage, r.iter, r.lr, r.loss, r.ct, r.elc, r.grad_norm, r.wall_s
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| HarnessError::Config(format!("training log: {msg}"));
        let mut log = TrainLog::default();
        let mut header = false;
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix("# ") {
                if let Some((k, v)) = meta.split_once(" = ") {
                    match k {
                        "config_hash" => log.config_hash = v.to_string(),
                        "seeds" => log.seeds = v.to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            if !header {
                if line != LOG_HEADER {
                    return Err(bad(format!("unexpected header '{line}'")));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 fields in '{line}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number '{s}'")));
            log.records.push(LogRecord {
                stage: f[0].parse().map_err(|_| bad(format!("bad stage '{}'", f[0])))?,
                iter: f[1].parse().map_err(|_| bad(format!("bad iteration '{}'", f[1])))?,
                lr: num(f[2])?,
                loss: num(f[3])?,
                ct: num(f[4])?,
                elc: num(f[5])?,
                grad_norm: num(f[6])?,
                ema_norm: if f[7].is_empty() { None } else { Some(num(f[7])?) },
                wall_s: num(f[8])?,
            });
        }
        Ok(log)
    }

    /// Compares everything but wall-clock, values within `rel_tol`.
    pub fn replay_matches(&self, other: &TrainLog, rel_tol: f64) -> std::result::Result<(), String> {
        if self.records.len() != other.records.len() {
            return Err(format!("{} vs {} records", self.records.len(), other.records.len()));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs()) || a == b;
        for (a, b) in self.records.iter().zip(&other.records) {
            let same_ema = match (a.ema_norm, b.ema_norm) {
                (Some(x), Some(y)) => close(x, y),
                (None, None) => true,
                _ => false,
            };
            let ok = a.stage == b.stage
                && a.iter == b.iter
                && close(a.lr, b.lr)
                && close(a.loss, b.loss)
                && close(a.ct, b.ct)
                && close(a.elc, b.elc)
                && close(a.grad_norm, b.grad_norm)
                && same_ema;
            if !ok {
                return Err(format!("stage {} iteration {}: {a:?} vs {b:?}", a.stage, a.iter));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Drives the training loop over a fixed training set.
pub struct Trainer {
    pub cfg: RunConfig,
    pub state: TrainState,
    pub log: TrainLog,
    items: Vec<TrainItem>,
    grid: Vec<f64>,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let items = train_set(cfg)?;
        Self::with_items(cfg, items, TrainState::init(cfg)?)
    }

    /// Starts from `state`, reusing an existing training set.
    pub fn with_items(cfg: &RunConfig, items: Vec<TrainItem>, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            grid: time_grid(&cfg.schedule)?,
            cfg: cfg.clone(),
            state,
            log: TrainLog::new(cfg),
            items,
            started: Instant::now(),
        })
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    /// Replaces the configuration between stages, for example to branch an
    /// ablation variant off a shared first stage. The training set and
    /// network shape must not change.
    pub fn reconfigure(&mut self, cfg: &RunConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.net != self.cfg.net || cfg.pair_config() != self.cfg.pair_config() || cfg.seeds.data != self.cfg.seeds.data
        {
            return Err(HarnessError::Config("reconfigure cannot change the network or the data".into()));
        }
        self.grid = time_grid(&cfg.schedule)?;
        self.state.ema.decay = cfg.train.ema_decay;
        self.state.opt.cfg = cfg.optim.clone();
        self.log.config_hash = cfg.hash();
        self.cfg = cfg.clone();
        Ok(())
    }

    fn lr(&self, stage: u8, iter: usize) -> f64 {
        let (o, t) = (&self.cfg.optim, &self.cfg.train);
        match stage {
            1 => cosine_lr(o.lr, o.lr_min, iter, t.stage1_iters),
            _ => cosine_lr(o.lr * t.stage2_lr_scale, o.lr_min, iter, t.stage2_iters),
        }
    }

    /// One optimizer step. On a non-finite loss or gradient the state is
    /// left untouched.
    pub fn step(&mut self, stage: u8) -> Result<LogRecord> {
        let iter = self.state.done[stage as usize - 1];
        let mut rng = SeededRng::derive(self.cfg.seeds.train, (u64::from(stage) << 40) | iter as u64);
        let (samples, draws) = make_batch(&self.items, &self.cfg, stage, &mut rng)?;
        let diverged = |reason: String| HarnessError::Divergence { stage, iter, reason };
        let out = consistency_step(
            &self.state.net,
            &self.state.ema.shadow,
            &samples,
            &draws,
            &self.grid,
            &self.cfg.schedule,
            self.cfg.train.mode,
            self.cfg.train.loss_mix(stage),
        )
        .map_err(|e| match e {
            NnError::NonFinite(msg) => diverged(msg),
            other => other.into(),
        })?;
        let mut grads = out.grads;
        if !out.loss.is_finite() || !grads.all_finite() {
            return Err(diverged(format!("loss {} or gradient not finite", out.loss)));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.train.grad_clip);
        let lr = self.lr(stage, iter);
        let s = &mut self.state;
        s.opt.update(s.net.params_mut(), &grads, lr)?;
        s.ema.update(s.net.params())?;
        s.done[stage as usize - 1] += 1;

        let total = match stage {
            1 => self.cfg.train.stage1_iters,
            _ => self.cfg.train.stage2_iters,
        };
        let snapshot = (iter + 1).is_multiple_of(self.cfg.train.log_every) || iter + 1 == total;
        let record = LogRecord {
            stage,
            iter,
            lr,
            loss: out.loss,
            ct: out.ct,
            elc: out.elc,
            grad_norm,
            ema_norm: snapshot.then(|| s.ema.shadow.norm()),
            wall_s: self.started.elapsed().as_secs_f64(),
        };
        self.log.records.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining iterations of `stage`.
    pub fn run_stage(&mut self, stage: u8) -> Result<()> {
        let total = match stage {
            1 => self.cfg.train.stage1_iters,
            2 => self.cfg.train.stage2_iters,
            _ => return Err(HarnessError::Config(format!("no stage {stage}"))),
        };
        if self.state.done[stage as usize - 1] < total {
            log::info!(
                "stage {stage}: {} iterations, mode {}, loss {:?}; gradients on θ, targets and inference on θ⁻",
                total,
                self.cfg.train.mode,
                self.cfg.train.loss_mix(stage)
            );
        }
        while self.state.done[stage as usize - 1] < total {
            let r = self.step(stage)?;
            if r.ema_norm.is_some() {
                log::info!("stage {stage} iter {:>6}: loss {:.5} ct {:.5} elc {:.5} lr {:.2e}", r.iter + 1, r.loss, r.ct, r.elc, r.lr);
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.state.checkpoint(&self.cfg)
    }

    /// Writes checkpoint, training log and resolved config into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
        self.log.save(&dir.join(LOG_FILE))?;
        self.cfg.save(&dir.join(CONFIG_FILE))
    }
}

/// Runs both stages. With `out` set, the checkpoint, log and config are
/// written there, including after a divergence, when the checkpoint holds
/// the last good state.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg)?;
    let result = trainer.run_stage(1).and_then(|_| trainer.run_stage(2));
    if let Some(dir) = out {
        trainer.save(dir)?;
    }
    result.map(|_| trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.net = hdrcm_nn::NetConfig::tiny();
        cfg.scene.height = 16;
        cfg.scene.width = 16;
        cfg.train.crop = 8;
        cfg.train.batch_size = 2;
        cfg.data.train_size = 2;
        cfg.train.stage1_iters = 3;
        cfg.train.stage2_iters = 2;
        cfg.train.log_every = 2;
        cfg
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let mut cfg = toy();
        cfg.train.stage1_iters = 0;
        cfg.train.stage2_iters = 0;
        let t = train(&cfg, None).unwrap();
        let init = TrainState::init(&cfg).unwrap();
        assert_eq!(t.checkpoint().to_bytes().unwrap(), init.checkpoint(&cfg).to_bytes().unwrap());
        assert!(t.log.records.is_empty());
    }

    #[test]
    fn log_marks_stages_and_snapshots() {
        let t = train(&toy(), None).unwrap();
        let stages: Vec<(u8, usize)> = t.log.records.iter().map(|r| (r.stage, r.iter)).collect();
        assert_eq!(stages, vec![(1, 0), (1, 1), (1, 2), (2, 0), (2, 1)]);
        let snaps: Vec<bool> = t.log.records.iter().map(|r| r.ema_norm.is_some()).collect();
        assert_eq!(snaps, vec![false, true, true, false, true]);
        assert!(t.log.stage(1).all(|r| r.elc == 0.0));
        assert!(t.log.stage(2).all(|r| r.elc > 0.0));
        let back = TrainLog::from_csv(&t.log.to_csv()).unwrap();
        assert_eq!(back.records.len(), 5);
        back.replay_matches(&t.log, 0.0).unwrap();
    }

    #[test]
    fn checkpoint_restores_state() {
        let t = train(&toy(), None).unwrap();
        let ck = Checkpoint::from_bytes(&t.checkpoint().to_bytes().unwrap()).unwrap();
        let (cfg, state) = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(cfg, toy());
        assert_eq!(state.done, [3, 2]);
        assert_eq!(state.opt.step, 5);
        assert!(state.ema.shadow == t.state.ema.shadow);
        assert!(state.net.params() == t.state.net.params());
        assert!(state.opt.v == t.state.opt.v);
    }

    #[test]
    fn tampered_config_is_detected() {
        let t = train(&{
            let mut c = toy();
            c.train.stage1_iters = 1;
            c.train.stage2_iters = 0;
            c
        }, None)
        .unwrap();
        let mut ck = t.checkpoint();
        ck.meta = ck.meta.replace("seeds.infer = 5", "seeds.infer = 6");
        assert!(config_from_checkpoint(&ck).is_err());
    }

    #[test]
    fn divergence_aborts_and_keeps_last_good_state() {
        let mut cfg = toy();
        cfg.optim.lr = 1e30;
        cfg.train.grad_clip = 1e30;
        let dir = tempfile::tempdir().unwrap();
        let err = train(&cfg, Some(dir.path())).err().expect("must diverge");
        let HarnessError::Divergence { stage, iter, .. } = err else {
            panic!("unexpected error {err}");
        };
        let ck = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
        let (_, state) = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(state.done[stage as usize - 1], iter);
        assert!(state.net.params().all_finite());
        let log = TrainLog::load(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.records.len(), iter + if stage == 2 { cfg.train.stage1_iters } else { 0 });
    }
}
