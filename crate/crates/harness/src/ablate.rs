//! Trajectory and loss ablations over shared data and seeds.

use crate::config::{ElcVariant, RunConfig};
use crate::data::{eval_set, train_set};
use crate::error::Result;
use crate::infer::{evaluate_pairs, Reconstructor, Terminal};
use crate::train::{TrainState, Trainer};
use hdrcm_core::metrics::MetricReport;
use hdrcm_core::TrajectoryMode;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub mode: TrajectoryMode,
    pub elc: ElcVariant,
}

impl Variant {
    /// The full grid, trajectory mode major.
    pub fn all() -> Vec<Variant> {
        TrajectoryMode::ALL
            .into_iter()
            .flat_map(|mode| ElcVariant::ALL.into_iter().map(move |elc| Variant { mode, elc }))
            .collect()
    }

    pub fn name(&self) -> String {
        format!("{}/{}", self.mode, self.elc)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// Mean over the evaluation set.
    pub report: MetricReport,
}

/// Runs `cfg` with the model seed set to `seed`: initialization and batch
/// sampling change, the training and evaluation scenes do not.
pub fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seeds.init = cfg.seeds.init.wrapping_add(seed);
    c.seeds.train = cfg.seeds.train.wrapping_add(seed);
    c
}

/// Trains and evaluates each variant for each seed. Variants sharing a
/// trajectory mode share their first stage, which does not depend on the
/// ELC setting.
pub fn ablate(cfg: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let items = train_set(cfg)?;
    let pairs = eval_set(cfg)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for mode in TrajectoryMode::ALL {
            let branch: Vec<&Variant> = variants.iter().filter(|v| v.mode == mode).collect();
            if branch.is_empty() {
                continue;
            }
            let mut base = with_seed(cfg, seed);
            base.train.mode = mode;
            let mut stage1 = Trainer::with_items(&base, items.clone(), TrainState::init(&base)?)?;
            stage1.run_stage(1)?;
            for v in branch {
                let mut vcfg = base.clone();
                vcfg.train.elc_variant = v.elc;
                let mut t = Trainer::with_items(&vcfg, items.clone(), stage1.state.clone())?;
                t.run_stage(2)?;
                let rec = Reconstructor::from_state(&vcfg, &t.state)?;
                let report = evaluate_pairs(&rec, &pairs, Terminal::Blend)?.model_mean();
                log::info!("seed {seed} {}: PSNR-μ {:.3} dB, ΔE2000 {:.3}", v.name(), report.psnr_mu, report.delta_e2000);
                rows.push(AblationRow { variant: *v, seed, report });
            }
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("mode,elc,seed,{}\n", MetricReport::CSV_HEADER);
    for r in rows {
        writeln!(out, "{},{},{},{}", r.variant.mode, r.variant.elc, r.seed, r.report.csv_row()).unwrap();
    }
    out
}

/// Per-variant mean over seeds, in first-seen order.
pub fn mean_over_seeds(rows: &[AblationRow]) -> Vec<(Variant, MetricReport)> {
    let mut order: Vec<Variant> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let reports: Vec<MetricReport> = rows.iter().filter(|r| r.variant == v).map(|r| r.report).collect();
            (v, MetricReport::mean(&reports))
        })
        .collect()
}
