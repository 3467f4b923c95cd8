//! Synthetic train/eval sets and per-iteration batches.

use crate::config::{ElcVariant, RunConfig};
use crate::error::Result;
use hdrcm_core::datagen::{make_pairs, Pair};
use hdrcm_core::image::sample_normal;
use hdrcm_core::trajectory::Conditioning;
use hdrcm_core::SeededRng;
use hdrcm_nn::losses::{Draw, ElcTarget, Sample};

/// One training scene with its conditioning computed on the full frame.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub x0: hdrcm_core::ImageF,
    pub cond: Conditioning,
}

/// Training scenes, keyed by `seeds.data`.
pub fn train_set(cfg: &RunConfig) -> Result<Vec<TrainItem>> {
    let pairs = make_pairs(&cfg.pair_config(), cfg.seeds.data, cfg.data.train_size)?;
    pairs
        .into_iter()
        .map(|p| {
            let cond = Conditioning::new(p.y0, p.masks, &cfg.schedule)?;
            Ok(TrainItem { x0: p.x0, cond })
        })
        .collect()
}

/// Held-out scenes, keyed by `seeds.eval`.
pub fn eval_set(cfg: &RunConfig) -> Result<Vec<Pair>> {
    Ok(make_pairs(&cfg.pair_config(), cfg.seeds.eval, cfg.data.eval_size)?)
}

fn crop_item(item: &TrainItem, y: usize, x: usize, size: usize) -> Result<(hdrcm_core::ImageF, Conditioning)> {
    let c = &item.cond;
    let cond = Conditioning {
        y0: c.y0.crop(y, x, size, size)?,
        y0_blur: c.y0_blur.crop(y, x, size, size)?,
        masks: c.masks.crop(y, x, size, size)?,
    };
    Ok((item.x0.crop(y, x, size, size)?, cond))
}

/// The batch of one iteration: scene choice, crop position, time interval
/// and noise all come from `rng`. ELC targets are attached for stage 2
/// unless the variant disables them.
pub fn make_batch(
    items: &[TrainItem],
    cfg: &RunConfig,
    stage: u8,
    rng: &mut SeededRng,
) -> Result<(Vec<Sample>, Vec<Draw>)> {
    let t = &cfg.train;
    let intervals = cfg.schedule.n_steps - 1;
    let mut samples = Vec::with_capacity(t.batch_size);
    let mut draws = Vec::with_capacity(t.batch_size);
    for _ in 0..t.batch_size {
        let item = &items[rng.index(items.len())];
        let (h, w) = (item.x0.height(), item.x0.width());
        let y = rng.index(h - t.crop + 1);
        let x = rng.index(w - t.crop + 1);
        let (x0, cond) = crop_item(item, y, x, t.crop)?;
        let elc = match (stage, t.elc_variant) {
            (1, _) | (_, ElcVariant::None) => None,
            (_, v) => Some(ElcTarget::new(&x0, &cond, &cfg.elc, v == ElcVariant::Uniform)?),
        };
        draws.push(Draw {
            index: rng.index(intervals),
            eps: sample_normal(rng, t.crop, t.crop, 3),
        });
        samples.push(Sample { x0, cond, elc });
    }
    Ok((samples, draws))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.scene.height = 24;
        cfg.scene.width = 32;
        cfg.train.crop = 16;
        cfg.data.train_size = 3;
        cfg
    }

    #[test]
    fn batches_are_reproducible_and_in_range() {
        let cfg = small();
        let items = train_set(&cfg).unwrap();
        let (a, da) = make_batch(&items, &cfg, 2, &mut SeededRng::new(7)).unwrap();
        let (b, db) = make_batch(&items, &cfg, 2, &mut SeededRng::new(7)).unwrap();
        assert_eq!(a.len(), cfg.train.batch_size);
        for i in 0..a.len() {
            assert_eq!(a[i].x0, b[i].x0);
            assert_eq!(da[i].eps, db[i].eps);
            assert!(da[i].index < cfg.schedule.n_steps - 1);
            assert_eq!(a[i].x0.shape(), (16, 16, 3));
            assert!(a[i].elc.is_some());
        }
        let (s1, _) = make_batch(&items, &cfg, 1, &mut SeededRng::new(7)).unwrap();
        assert!(s1.iter().all(|s| s.elc.is_none()));
    }

    #[test]
    fn crops_match_full_frame_conditioning() {
        let cfg = small();
        let items = train_set(&cfg).unwrap();
        let (x0, cond) = crop_item(&items[0], 3, 5, 16).unwrap();
        assert_eq!(x0.get(0, 0, 1), items[0].x0.get(3, 5, 1));
        assert_eq!(cond.y0_blur.get(2, 4, 0), items[0].cond.y0_blur.get(5, 9, 0));
        assert_eq!(cond.masks.w_over.get(7, 7, 0), items[0].cond.masks.w_over.get(10, 12, 0));
    }
}
