use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gfn_pathreg::ot::SinkhornConfig;
use gfn_pathreg::path_reg::{OtMethod, RegMode, RegularizerConfig};
use gfn_pathreg::policy::PolicyConfig;
use gfn_pathreg::train::{train_with, write_outputs, GridConfig, TrainConfig};

#[derive(Parser)]
#[command(version, about = "GFlowNet training with optimal-transport path regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sampler and write metrics.csv, config.json and model.ckpt.
    Train(TrainArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Hypergrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reg {
    None,
    MinOt,
    MaxOt,
    UbOt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Closed,
    Sinkhorn,
    Exact,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "hypergrid")]
    env: EnvKind,
    #[arg(long, default_value_t = 4)]
    dims: usize,
    #[arg(long, default_value_t = 8)]
    side: usize,
    #[arg(long, default_value_t = 1e-3)]
    r0: f64,
    #[arg(long, default_value_t = 62_500)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr_policy: f64,
    #[arg(long, default_value_t = 0.1)]
    lr_logz: f64,
    /// Weight of the uniform policy in the sampling mixture.
    #[arg(long, default_value_t = 0.01)]
    explore: f64,
    #[arg(long, value_enum, default_value = "none")]
    reg: Reg,
    #[arg(long, value_enum, default_value = "closed")]
    ot_method: Method,
    #[arg(long, default_value_t = 0.02)]
    lambda: f64,
    /// Keep probability of each edge in the regularizer (1 disables dropout).
    #[arg(long, default_value_t = 1.0)]
    dropout_p: f64,
    #[arg(long, default_value_t = 0.01)]
    sinkhorn_eps: f64,
    #[arg(long, default_value_t = 500)]
    sinkhorn_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    sinkhorn_tol: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    /// Fix the backward policy to uniform over parents.
    #[arg(long)]
    uniform_pb: bool,
    #[arg(long, default_value_t = 500)]
    log_every: usize,
    /// Stop as soon as every mode has been sampled.
    #[arg(long)]
    stop_when_all_modes: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let EnvKind::Hypergrid = self.env;
        TrainConfig {
            env: GridConfig {
                dims: self.dims,
                side: self.side,
                r0: self.r0,
            },
            steps: self.steps,
            batch: self.batch,
            lr_policy: self.lr_policy,
            lr_logz: self.lr_logz,
            explore: self.explore,
            reg: RegularizerConfig {
                mode: match self.reg {
                    Reg::None => RegMode::None,
                    Reg::MinOt => RegMode::Min,
                    Reg::MaxOt => RegMode::Max,
                    Reg::UbOt => RegMode::Ub,
                },
                method: match self.ot_method {
                    Method::Closed => OtMethod::Closed,
                    Method::Sinkhorn => OtMethod::Sinkhorn,
                    Method::Exact => OtMethod::Exact,
                },
                lambda: self.lambda,
                dropout_p: self.dropout_p,
                sinkhorn: SinkhornConfig {
                    epsilon: self.sinkhorn_eps,
                    max_iters: self.sinkhorn_iters,
                    tol: self.sinkhorn_tol,
                },
            },
            policy: PolicyConfig {
                hidden: self.hidden,
                uniform_backward: self.uniform_pb,
                ..Default::default()
            },
            seed: self.seed,
            log_every: self.log_every,
            stop_when_all_modes: self.stop_when_all_modes,
            ..Default::default()
        }
    }
}

fn main() -> Result<()> {
    let Command::Train(args) = Cli::parse().command;
    let config = args.config();
    let start = Instant::now();
    let outcome = train_with(&config, |r| {
        eprintln!(
            "step {:>6}  trajectories {:>8}  modes {:>3}  kl {:.4}  tb {:.4}  ot {:.4}  ({:.0}s)",
            r.step,
            r.trajectories,
            r.modes_found,
            r.kl,
            r.loss_tb,
            r.loss_ot,
            start.elapsed().as_secs_f64()
        );
    })
    .context("training failed")?;
    write_outputs(&args.out, &config, &outcome)
        .with_context(|| format!("writing outputs to {}", args.out.display()))?;
    match outcome.all_modes_at {
        Some(n) => println!("all modes found after {n} trajectories"),
        None => println!("not all modes found"),
    }
    println!("log Z = {:.6}", outcome.model.log_total_flow());
    Ok(())
}
