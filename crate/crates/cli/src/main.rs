//! `csi`: batch driver for phantoms, projections, Monte-Carlo runs,
//! reconstructions and exports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csi_core::io::SliceAxis;
use csi_core::pipeline::{self, ExportOptions, Outcome, RunConfig};
use csi_core::spectrum::ChannelSelection;

#[derive(Parser)]
#[command(name = "csi", version, about = "Compton scattering imaging pipeline")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, env = "CSI_WORKERS", global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; the built-in reference setup when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo histories.
    #[arg(long)]
    photons: Option<u64>,
    /// Channels projected and reconstructed: g1, g1g2 or total.
    #[arg(long)]
    channels: Option<ChannelSelection>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> csi_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::reference(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.photons {
            cfg.monte_carlo.n_photons = n;
        }
        if let Some(c) = self.channels {
            cfg.channels = c;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Rasterise the phantom and its prior.
    Phantom(RunArgs),
    /// Analytic spectrum.
    Project(RunArgs),
    /// Monte-Carlo spectrum.
    Mc(RunArgs),
    /// Reconstruction and contour map.
    Recon(RunArgs),
    /// Contour map of an existing reconstruction.
    Contours(RunArgs),
    /// Admissibility report; exits with status 2 when inadmissible.
    CheckGeometry(RunArgs),
    /// CSV/PGM slices of volumes and CSV tables of spectra.
    Export {
        /// Volume or spectrum files (binary paths, sidecars alongside).
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long, default_value = "export")]
        out: PathBuf,
        /// Slice normal for volumes.
        #[arg(long, default_value = "z")]
        axis: SliceAxis,
        /// Slice index; the middle slice by default.
        #[arg(long)]
        index: Option<usize>,
    },
}

fn run(cli: Cli) -> csi_core::Result<(Outcome, bool)> {
    let ok = |o: Outcome| Ok((o, true));
    match cli.command {
        Command::Phantom(a) => ok(pipeline::cmd_phantom(&a.config()?)?),
        Command::Project(a) => ok(pipeline::cmd_project(&a.config()?)?),
        Command::Mc(a) => ok(pipeline::cmd_mc(&a.config()?)?),
        Command::Recon(a) => ok(pipeline::cmd_recon(&a.config()?)?),
        Command::Contours(a) => ok(pipeline::cmd_contours(&a.config()?)?),
        Command::CheckGeometry(a) => {
            let o = pipeline::cmd_check_geometry(&a.config()?)?;
            let admissible = o.summary["admissible"].as_bool().unwrap_or(false);
            Ok((o, admissible))
        }
        Command::Export { paths, out, axis, index } => ok(pipeline::cmd_export(&paths, &out, &ExportOptions { axis, index })?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("csi: cannot size the worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok((outcome, success)) => {
            println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serialises"));
            if success {
                ExitCode::SUCCESS
            } else {
                eprintln!("csi: geometry is not admissible");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("csi: {e}");
            ExitCode::FAILURE
        }
    }
}
