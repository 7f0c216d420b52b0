use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pear::config::RunConfig;
use pear::data::gen_synthetic;
use pear::hpx::GridSpec;
use pear::model::Pear;
use pear::run;
use pear::window::WindowLayout;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "pear", version, about = "Windowed-attention weather forecasting on the HEALPix sphere")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults to <run-dir>/config.toml when it exists.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory for all outputs of a run.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample a lat-lon tensor file onto a HEALPix grid.
    Resample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        nside: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, writing checkpoints and loss.csv under the run directory.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Validation loss and a multi-start rollout report (metrics.csv).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Iterated forecast from one validation step, with rasters.
    Rollout {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Project a HEALPix tensor file to a lat-lon raster (.pgm or .csv).
    Project {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Flattened per-pixel channel (level * 5 + variable for upper files).
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long, requires = "nlon")]
        nlat: Option<usize>,
        #[arg(long, requires = "nlat")]
        nlon: Option<usize>,
    },
    /// Grid geometry.
    Grid {
        #[command(subcommand)]
        command: GridCommand,
    },
    /// Shifted-window masks.
    Mask {
        #[command(subcommand)]
        command: MaskCommand,
    },
    /// Model parameters.
    Params {
        #[command(subcommand)]
        command: ParamsCommand,
    },
}

#[derive(Subcommand)]
enum GridCommand {
    Info {
        #[arg(long)]
        nside: u64,
    },
}

#[derive(Subcommand)]
enum MaskCommand {
    /// Print region labels and the attention mask of shifted windows.
    Dump {
        /// Resolution of the patch grid the windows tile.
        #[arg(long)]
        nside: u64,
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, default_value_t = 4)]
        window_hp: usize,
        #[arg(long, default_value_t = 2)]
        window_d: usize,
        /// Only this window; otherwise every window with more than one region.
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ParamsCommand {
    /// Trainable parameters of the configured model, by component.
    Count,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let snapshot = self.run_dir.join("config.toml");
        let path = self.config.clone().or_else(|| snapshot.exists().then_some(snapshot));
        let cfg = RunConfig::load(path.as_deref(), &self.overrides)?;
        Ok(cfg)
    }

    fn checkpoint(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| run::final_checkpoint(&self.run_dir))
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = &cli.common;
    match &cli.command {
        Command::GenData { out } => {
            let cfg = common.config()?;
            let data = gen_synthetic(cfg.train.seed, &cfg.data.synthetic)?;
            data.save(out)?;
            println!("wrote {} steps at n_side {} to {}", data.len(), data.spec().n_side(), out.display());
        }
        Command::Resample { input, nside, out } => {
            run::resample_file(input, *nside, out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { resume } => {
            let cfg = common.config()?;
            let s = run::train(&cfg, &common.run_dir, resume.as_deref())?;
            println!("trained {} steps; last train loss {:.6}; val loss {:?}", s.steps, s.last_loss, s.val_loss);
            if let Some(p) = s.final_checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval { checkpoint } => {
            let cfg = common.config()?;
            let e = run::eval(&cfg, &common.run_dir, &existing(&common.checkpoint(checkpoint))?)?;
            println!("val loss {:.6} (persistence {:.6})", e.val_loss, e.persistence_loss);
            print_summary(&e.report);
            println!("metrics {}", common.run_dir.join("metrics.csv").display());
        }
        Command::Rollout { checkpoint, start, steps } => {
            let cfg = common.config()?;
            let r = run::rollout(&cfg, &common.run_dir, &existing(&common.checkpoint(checkpoint))?, *start, *steps)?;
            print_summary(&r);
        }
        Command::Project { input, out, step, channel, nlat, nlon } => {
            run::project_file(input, out, *step, *channel, nlat.zip(*nlon))?;
            println!("wrote {}", out.display());
        }
        Command::Grid { command: GridCommand::Info { nside } } => grid_info(*nside)?,
        Command::Mask { command: MaskCommand::Dump { nside, depth, window_hp, window_d, window } } => {
            let layout = WindowLayout::new(GridSpec::from_nside(*nside)?, *depth, *window_hp, *window_d, true)?;
            mask_dump(&layout, *window)?;
        }
        Command::Params { command: ParamsCommand::Count } => {
            let cfg = common.config()?;
            let model = Pear::<f32>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
            let mut groups: Vec<(String, usize)> = Vec::new();
            for (name, t) in model.params().iter() {
                let group = name.split('.').next().unwrap_or(name).to_string();
                match groups.last_mut() {
                    Some((g, n)) if *g == group => *n += t.len(),
                    _ => groups.push((group, t.len())),
                }
            }
            for (g, n) in &groups {
                println!("{g:<16}{n:>12}");
            }
            println!("{:<16}{:>12}", "total", model.parameter_count());
        }
    }
    Ok(())
}

fn existing(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        bail!("checkpoint {} not found; train first or pass --checkpoint", path.display());
    }
    Ok(path.to_path_buf())
}

fn print_summary(r: &pear::rollout::RolloutReport) {
    println!("{:>4} {:>8} {:>8} {:>8} {:>8}", "lead", "z500", "t850", "t2m", "u10");
    for lead in r.lead_times() {
        let acc = |v: &str, l: Option<u32>| r.row(lead, v, l).and_then(|row| row.acc).map_or("-".into(), |a| format!("{a:.3}"));
        println!(
            "{lead:>4} {:>8} {:>8} {:>8} {:>8}",
            acc("z", Some(500)),
            acc("t", Some(850)),
            acc("t2m", None),
            acc("u10", None)
        );
    }
    if r.unstable {
        println!("forecast became non-finite; report truncated");
    }
}

fn grid_info(n_side: u64) -> Result<()> {
    let spec = GridSpec::from_nside(n_side).context("grid info")?;
    println!("n_side      {}", spec.n_side());
    println!("k           {}", spec.k());
    println!("n_pix       {}", spec.n_pix());
    println!("rings       {}", spec.n_rings());
    println!("pixel_area  {:.6e} sr", spec.pixel_area());
    println!("resolution  {:.4} deg", spec.pixel_area().sqrt().to_degrees());
    let sizes = spec.ring_sizes();
    let belt = sizes.iter().filter(|&&s| s == 4 * n_side).count();
    println!("ring sizes  4, 8, .., {} in each cap; {} x {belt} in the belt", 4 * (n_side.max(2) - 1), 4 * n_side);
    Ok(())
}

fn mask_dump(layout: &WindowLayout, only: Option<usize>) -> Result<()> {
    println!(
        "{} windows of {} patches x {} levels, shift ({}, {})",
        layout.n_windows(),
        layout.window_hp(),
        layout.window_d(),
        layout.shift_hp(),
        layout.shift_d()
    );
    let windows: Vec<usize> = match only {
        Some(w) if w >= layout.n_windows() => bail!("window {w} of {}", layout.n_windows()),
        Some(w) => vec![w],
        None => (0..layout.n_windows()).filter(|&w| layout.region_count(w) > 1).collect(),
    };
    for w in windows {
        let regions: String = layout.window_regions(w).iter().map(|r| char::from(b'0' + r)).collect();
        println!("window {w}: {} regions, labels {regions}", layout.region_count(w));
        for row in layout.mask_grid(w) {
            println!("  {}", row.iter().map(|m| if *m != 0 { '#' } else { '.' }).collect::<String>());
        }
    }
    Ok(())
}
