//! Command-line entry points behind the `hdrcm` binary.

use crate::ablate::{ablate, mean_over_seeds, rows_to_csv, Variant};
use crate::config::RunConfig;
use crate::data::eval_set;
use crate::error::{io_err, HarnessError, Result};
use crate::infer::{evaluate_pairs, infer_file, Reconstructor, Terminal};
use crate::train::{train, CONFIG_FILE};
use clap::{Args, CommandFactory, Parser, Subcommand};
use hdrcm_core::colorspace::mu_law;
use hdrcm_core::datagen::make_pair;
use hdrcm_core::hdrio::{read_image, write_pfm, write_ppm};
use hdrcm_core::image::sample_normal;
use hdrcm_core::trajectory::{sample_state_with, Conditioning};
use hdrcm_core::{compute_masks, ImageF, SeededRng};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "hdrcm", version, about = "Exposure-aware one-step HDR reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override one key, e.g. `--set schedule.sigma_o_scale=2.0`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; defaults to `output.dir`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic HDR scenes with their simulated LDR captures.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of scenes; defaults to `data.train_size`.
        #[arg(short = 'n', long)]
        count: Option<usize>,
    },
    /// Write the exposure masks of an LDR image.
    Mask {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        input: PathBuf,
    },
    /// Dump trajectory states of an HDR/LDR pair at chosen times.
    Traj {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Ground-truth radiance, scaled so its p99 luminance is 1.
        #[arg(long)]
        hdr: PathBuf,
        #[arg(long)]
        ldr: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.002,0.25,0.5,0.75,1")]
        times: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run both training stages.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Reconstruct one LDR image with a single network evaluation.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        /// Output radiance file (`.hdr` or `.pfm`).
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Terminal::Blend)]
        terminal: Terminal,
    },
    /// Score a checkpoint on the held-out synthetic set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = Terminal::Blend)]
        terminal: Terminal,
    },
    /// Train and score trajectory/loss variants over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Subset of `mode/elc` variant names; all nine by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

impl ConfigArgs {
    /// The resolved config and output directory. A missing config file is
    /// reported together with the usage text.
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        if !self.config.is_file() {
            let usage = Cli::command().render_usage();
            return Err(HarnessError::Config(format!(
                "config file '{}' not found\n\n{usage}",
                self.config.display()
            )));
        }
        let mut cfg = RunConfig::load(&self.config)?;
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        cfg.validate()?;
        let dir = cfg.output.dir.clone();
        create_dir(&dir)?;
        cfg.save(&dir.join(CONFIG_FILE))?;
        Ok((cfg, dir))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, count } => {
            let (cfg, dir) = cfg.resolve()?;
            let n = count.unwrap_or(cfg.data.train_size);
            let pair_cfg = cfg.pair_config();
            let mut manifest = String::from("index,hdr,ldr,exposure,scale\n");
            for i in 0..n {
                let p = make_pair(&pair_cfg, cfg.seeds.data, i as u64)?;
                let (hdr, ldr) = (format!("scene_{i:04}.pfm"), format!("scene_{i:04}_ldr.ppm"));
                write_pfm(dir.join(&hdr), &p.hdr)?;
                write_ppm(dir.join(&ldr), &p.y0)?;
                writeln!(manifest, "{i},{hdr},{ldr},{},{}", p.exposure, p.scale).unwrap();
            }
            write_text(&dir.join("manifest.csv"), &manifest)?;
            log::info!("wrote {n} scenes to {}", dir.display());
        }
        Command::Mask { cfg, input } => {
            let (cfg, dir) = cfg.resolve()?;
            let m = compute_masks(&read_image(&input)?, &cfg.masks)?;
            write_pfm(dir.join("w_over.pfm"), &m.w_over)?;
            write_pfm(dir.join("w_under.pfm"), &m.w_under)?;
            write_pfm(dir.join("w_good.pfm"), &m.w_good)?;
            write_ppm(dir.join("masks.ppm"), &m.false_color())?;
            let s = &m.stats;
            log::info!("masks: {s:?}, degenerate {}", m.degenerate);
        }
        Command::Traj { cfg, hdr, ldr, times, seed } => {
            let (cfg, dir) = cfg.resolve()?;
            let (hdr, ldr) = (read_image(&hdr)?, read_image(&ldr)?);
            let x0 = mu_law(&hdr, cfg.data.mu)?;
            let masks = compute_masks(&ldr, &cfg.masks)?;
            let cond = Conditioning::new(ldr, masks, &cfg.schedule)?;
            let eps: ImageF = sample_normal(&mut SeededRng::new(seed), x0.height(), x0.width(), 3);
            for t in times {
                let x_t = sample_state_with(&cond, &x0, t, &eps, &cfg.schedule, cfg.train.mode)?;
                write_pfm(dir.join(format!("traj_t{t:.4}.pfm")), &x_t)?;
            }
        }
        Command::Train { cfg } => {
            let (cfg, dir) = cfg.resolve()?;
            let t = train(&cfg, Some(&dir))?;
            log::info!("trained {:?} iterations; checkpoint in {}", t.state.done, dir.display());
        }
        Command::Infer { checkpoint, input, output, seed, terminal } => {
            let rec = Reconstructor::load(&checkpoint)?;
            infer_file(&rec, &input, &output, seed, terminal)?;
            let beside = output.with_file_name(CONFIG_FILE);
            rec.cfg.save(&beside)?;
            log::info!("{} network evaluation(s); wrote {}", rec.forward_calls(), output.display());
        }
        Command::Eval { checkpoint, out, terminal } => {
            let rec = Reconstructor::load(&checkpoint)?;
            create_dir(&out)?;
            rec.cfg.save(&out.join(CONFIG_FILE))?;
            let res = evaluate_pairs(&rec, &eval_set(&rec.cfg)?, terminal)?;
            write_text(&out.join("eval.csv"), &res.to_csv())?;
            let (m, id) = (res.model_mean(), res.identity_mean());
            println!("method,{}", hdrcm_core::metrics::MetricReport::CSV_HEADER);
            println!("model,{}", m.csv_row());
            println!("identity,{}", id.csv_row());
        }
        Command::Ablate { cfg, seeds, variants } => {
            let (cfg, dir) = cfg.resolve()?;
            let all = Variant::all();
            let chosen: Vec<Variant> = if variants.is_empty() {
                all
            } else {
                variants
                    .iter()
                    .map(|name| {
                        all.iter()
                            .find(|v| v.name() == *name)
                            .copied()
                            .ok_or_else(|| HarnessError::Config(format!("unknown variant '{name}'")))
                    })
                    .collect::<Result<_>>()?
            };
            let rows = ablate(&cfg, &chosen, &seeds)?;
            write_text(&dir.join("ablation.csv"), &rows_to_csv(&rows))?;
            let mut summary = format!("variant,{}\n", hdrcm_core::metrics::MetricReport::CSV_HEADER);
            for (v, r) in mean_over_seeds(&rows) {
                writeln!(summary, "{},{}", v.name(), r.csv_row()).unwrap();
            }
            write_text(&dir.join("ablation_summary.csv"), &summary)?;
            print!("{summary}");
        }
    }
    Ok(())
}
