use std::path::PathBuf;

use clap::Args;
use sdstereo_core::bayes::{RewardRamp, StochasticConfig};
use sdstereo_core::datagen::read_manifest;
use sdstereo_core::matcher::MatchConfig;
use sdstereo_core::refiner::ArchDescriptor;
use sdstereo_core::trainer::{self, TrainConfig, TrainSink};

use crate::errors::{CliError, CliResult};
use crate::overlay::Overlay;

const KEYS: &[&str] = &[
    "seed", "epochs", "batch", "patch", "lr", "k", "radius", "levels", "half-range",
    "steps-per-epoch", "sigma-in", "sigma-out", "sigma-prior", "sigma0", "e-t", "e-f",
    "reward", "reward-ramp", "kl-scale", "dropout", "d-norm",
];

/// Train the refinement network on a generated dataset.
#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint path (a .best sibling and a .log.csv are added)
    #[arg(long)]
    pub out: PathBuf,
    /// Config file with `key = value` lines; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train the baseline arm: outlier branch detached, fixed 1px sigma
    #[arg(long)]
    pub ablation: bool,
    /// Master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Patches per optimizer step
    #[arg(long)]
    pub batch: Option<usize>,
    /// Patch edge in pixels
    #[arg(long)]
    pub patch: Option<usize>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cost-volume half-width K
    #[arg(long)]
    pub k: Option<usize>,
    /// Optimizer steps per epoch (default: about three passes over the set)
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Final inlier residual std, in pixels
    #[arg(long)]
    pub sigma_in: Option<f64>,
    /// Final outlier residual std, in pixels
    #[arg(long)]
    pub sigma_out: Option<f64>,
    /// Weight prior std
    #[arg(long)]
    pub sigma_prior: Option<f64>,
    /// Burn-in residual std, in pixels
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// First transition epoch
    #[arg(long)]
    pub e_t: Option<u32>,
    /// First epoch after the transition
    #[arg(long)]
    pub e_f: Option<u32>,
    /// Inlier reward weight
    #[arg(long)]
    pub reward: Option<f64>,
    /// Reward ramp direction over epochs: up (published formula) or down
    #[arg(long, value_parser = ["up", "down"])]
    pub reward_ramp: Option<String>,
    /// Extra multiplier on the prior (ELBO) scaling
    #[arg(long)]
    pub kl_scale: Option<f64>,
    /// Dropout probability in [0, 1)
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Raw-disparity normalizer fed to the network (default: dataset d_max)
    #[arg(long)]
    pub d_norm: Option<f64>,
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    let overlay = Overlay::load(args.config.as_deref(), KEYS)?;
    let manifest = read_manifest(&args.data)?;
    if manifest.entries.is_empty() {
        return Err(CliError::Config("dataset manifest is empty".into()));
    }
    let data_dmax = manifest.entries.iter().map(|e| e.d_max).fold(0.0f64, f64::max);

    let k = overlay.resolve(args.k, "k", 3usize)?;
    let dm = MatchConfig::default();
    let match_cfg = MatchConfig {
        radius: overlay.resolve(None, "radius", dm.radius)?,
        levels: overlay.resolve(None, "levels", dm.levels)?,
        half_range: overlay.resolve(None, "half-range", dm.half_range)?,
        ..dm
    };
    match_cfg.validate().map_err(CliError::from)?;

    let dd = ArchDescriptor::default();
    let desc = ArchDescriptor {
        k,
        dropout_p: overlay.resolve(args.dropout, "dropout", dd.dropout_p)?,
        d_norm: overlay.resolve(args.d_norm, "d-norm", data_dmax)?,
        ..dd
    };
    desc.validate().map_err(CliError::from)?;

    let dt = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: overlay.resolve(args.epochs, "epochs", dt.epochs)?,
        batch_size: overlay.resolve(args.batch, "batch", dt.batch_size)?,
        patch_size: overlay.resolve(args.patch, "patch", dt.patch_size)?,
        learning_rate: overlay.resolve(args.lr, "lr", dt.learning_rate)?,
        seed: overlay.resolve(args.seed, "seed", 0)?,
        ablation: args.ablation,
        steps_per_epoch: match args.steps_per_epoch {
            Some(s) => Some(s),
            None => overlay
                .resolve(None, "steps-per-epoch", 0usize)
                .map(|v| (v > 0).then_some(v))?,
        },
        ..dt
    };
    train_cfg.validate(&desc).map_err(CliError::from)?;

    let stochastic = if args.ablation {
        let base = StochasticConfig::ablation();
        StochasticConfig {
            sigma_prior: overlay.resolve(args.sigma_prior, "sigma-prior", base.sigma_prior)?,
            kl_scale: overlay.resolve(args.kl_scale, "kl-scale", base.kl_scale)?,
            e_t: overlay.resolve(args.e_t, "e-t", base.e_t)?,
            e_f: overlay.resolve(args.e_f, "e-f", base.e_f)?,
            ..base
        }
    } else {
        let base = StochasticConfig::default();
        let ramp_str = overlay.resolve_string(args.reward_ramp.as_deref(), "reward-ramp", "up");
        if ramp_str != "up" && ramp_str != "down" {
            return Err(CliError::Config(format!(
                "reward-ramp must be 'up' or 'down', got '{ramp_str}'"
            )));
        }
        StochasticConfig {
            sigma_in: overlay.resolve(args.sigma_in, "sigma-in", base.sigma_in)?,
            sigma_out: overlay.resolve(args.sigma_out, "sigma-out", base.sigma_out)?,
            sigma_prior: overlay.resolve(args.sigma_prior, "sigma-prior", base.sigma_prior)?,
            sigma0: overlay.resolve(args.sigma0, "sigma0", base.sigma0)?,
            e_t: overlay.resolve(args.e_t, "e-t", base.e_t)?,
            e_f: overlay.resolve(args.e_f, "e-f", base.e_f)?,
            reward_weight: overlay.resolve(args.reward, "reward", base.reward_weight)?,
            kl_scale: overlay.resolve(args.kl_scale, "kl-scale", base.kl_scale)?,
            reward_ramp: if ramp_str == "down" { RewardRamp::Down } else { RewardRamp::Up },
        }
    };
    stochastic.validate().map_err(CliError::from)?;

    eprintln!("preparing dataset ({} samples, K={k})", manifest.entries.len());
    let samples = trainer::prepare_dataset(&manifest, &match_cfg, k)?;
    let sink = TrainSink::from_final(&args.out);
    let epochs = train_cfg.epochs;
    let (_, log) = trainer::train(&samples, &desc, &train_cfg, &stochastic, &sink, |row| {
        match row.mean_p_out {
            Some(p) => eprintln!(
                "epoch {:>3}/{epochs}  nll {:+.4}  total {:+.4}  inliers {:.3}",
                row.epoch,
                row.nll,
                row.total,
                1.0 - p
            ),
            None => eprintln!(
                "epoch {:>3}/{epochs}  nll {:+.4}  total {:+.4}",
                row.epoch, row.nll, row.total
            ),
        }
    })?;
    println!(
        "trained {} epochs; final total {:.4}; wrote {}, {}, {}",
        log.len(),
        log.last().map(|r| r.total).unwrap_or(f64::NAN),
        sink.final_ckpt.display(),
        sink.best_ckpt.display(),
        sink.log_csv.display()
    );
    Ok(())
}
