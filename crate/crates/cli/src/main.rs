//! `sns` - spectral Galerkin diagnostics for the 3D stochastic Navier-Stokes
//! system with mildly degenerate forcing.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 numerical
//! blow-up, 3 failed acceptance check (selftest or control target miss).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sns_core::dynamics::DynamicsError;

use crate::commands::Workspace;
use crate::config::Config;

#[derive(Parser)]
#[command(name = "sns", version, about = "spectral stochastic Navier-Stokes diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON configuration file; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    m: Option<u32>,
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    n0: Option<u32>,
    /// isotropic covariance exponent
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Feynman-Kac coefficient K
    #[arg(long = "fk")]
    fk_coeff: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// time horizon T
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// replica count for ensemble commands
    #[arg(long)]
    ensemble: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// store state snapshots every this many steps
    #[arg(long)]
    snapshot_stride: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<Config, String> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        macro_rules! merge {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        merge!(m, n, n0, r, sigma, fk_coeff, dt, horizon, seed, ensemble, output_dir);
        if let Some(s) = self.snapshot_stride {
            cfg.snapshot_stride = Some(s);
        }
        cfg.validate()?;
        for w in cfg.warnings() {
            eprintln!("warning: {w}");
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the Galerkin SDE and write JSON-lines trajectories
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// initial state as a field JSON file (default: seeded pseudo-random)
        #[arg(long)]
        initial: Option<PathBuf>,
    },
    /// Span certificate for the bracket families of the forcing pattern
    CheckHormander {
        #[command(flatten)]
        common: CommonArgs,
        /// Gaussian sample states probed in addition to y = 0
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Malliavin matrix of a stored run plus ensemble eigenvalue tails
    Malliavin {
        #[command(flatten)]
        common: CommonArgs,
        /// tail thresholds epsilon (repeatable)
        #[arg(long = "epsilon", default_values_t = [0.5, 0.25, 0.125])]
        epsilons: Vec<f64>,
        #[arg(long, default_value_t = 2.0)]
        q_exponent: f64,
    },
    /// Coupling-based mixing curves between two initial states
    Mixing {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        x1: Option<PathBuf>,
        #[arg(long)]
        x2: Option<PathBuf>,
    },
    /// Synthesize and verify a four-phase steering control
    Control {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        x: Option<PathBuf>,
        #[arg(long)]
        y: Option<PathBuf>,
        /// target accuracy in the |A.| norm
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        /// also dump the control path as JSON lines
        #[arg(long, default_value_t = false)]
        dump_control: bool,
    },
    /// Run the built-in invariant suite and print a pass/fail table
    Selftest {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn dispatch(cli: Cli) -> i32 {
    let started = Instant::now();
    let common = match &cli.command {
        Command::Simulate { common, .. }
        | Command::CheckHormander { common, .. }
        | Command::Malliavin { common, .. }
        | Command::Mixing { common, .. }
        | Command::Control { common, .. }
        | Command::Selftest { common } => common.clone(),
    };
    let config = match common.resolve() {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let ws = match Workspace::open(config) {
        Ok(ws) => ws,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let outcome: anyhow::Result<i32> = match cli.command {
        Command::Simulate { initial, .. } => {
            commands::run_simulate(&ws, initial.as_deref()).map(|_| 0)
        }
        Command::CheckHormander { samples, .. } => {
            commands::run_check_hormander(&ws, samples).map(|_| 0)
        }
        Command::Malliavin {
            epsilons,
            q_exponent,
            ..
        } => commands::run_malliavin(&ws, &epsilons, q_exponent).map(|_| 0),
        Command::Mixing { x1, x2, .. } => {
            commands::run_mixing(&ws, x1.as_deref(), x2.as_deref()).map(|_| 0)
        }
        Command::Control {
            x,
            y,
            epsilon,
            dump_control,
            ..
        } => commands::run_control(&ws, x.as_deref(), y.as_deref(), epsilon, dump_control),
        Command::Selftest { .. } => commands::run_selftest(&ws),
    };
    let code = match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<DynamicsError>()
                .map(|d| matches!(d, DynamicsError::BlowUp { .. }))
                .unwrap_or(false)
            {
                2
            } else {
                1
            }
        }
    };
    eprintln!("wall time: {:.3}s", started.elapsed().as_secs_f64());
    code
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(dispatch(cli));
}
