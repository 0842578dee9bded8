use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voxlio_core::config::RunConfig;
use voxlio_core::pipeline::{run_odometry, run_simulate};
use voxlio_core::verify::run_verify;
use voxlio_core::Error;

const EXIT_DATA: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;

/// LiDAR-inertial odometry on a probabilistic voxel map.
#[derive(Parser, Debug)]
#[command(name = "voxlio", version)]
struct Cli {
    /// `section.key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the simulator and the verification suite.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set map.max_depth=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the trajectory from IMU and scan files.
    Odometry {
        /// Directory holding `imu.txt` and `scans.txt`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        imu: Option<PathBuf>,
        #[arg(long)]
        scans: Option<PathBuf>,
    },
    /// Write a synthetic dataset with ground truth.
    Simulate,
    /// Check the analytic Jacobians and covariances against brute-force oracles.
    Verify {
        /// Deliberately break one derivation (negative control).
        #[arg(long)]
        corrupt: Option<String>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &cli.overrides {
        let (k, v) =
            item.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.sim.noise.seed = seed;
        cfg.verify.seed = seed;
    }
    if let Some(dir) = &cli.output {
        cfg.output_dir = dir.clone();
    }
    match &cli.command {
        Command::Odometry { input, imu, scans } => {
            if let Some(dir) = input {
                cfg.imu_path = Some(dir.join("imu.txt"));
                cfg.scan_path = Some(dir.join("scans.txt"));
            }
            if let Some(p) = imu {
                cfg.imu_path = Some(p.clone());
            }
            if let Some(p) = scans {
                cfg.scan_path = Some(p.clone());
            }
        }
        Command::Verify { corrupt: Some(name) } => cfg.set("verify.corrupt", name)?,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NoValidMatches | Error::SingularInformationMatrix | Error::AngleNearPi { .. } => EXIT_ESTIMATION,
        _ => EXIT_DATA,
    }
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Odometry { .. } => {
            let report = run_odometry(&cfg)?;
            println!(
                "scans={} failures={} estimation_failed={} output={}",
                report.scans,
                report.failures,
                report.estimation_failed,
                cfg.output_dir.display()
            );
            Ok(if report.estimation_failed { EXIT_ESTIMATION } else { 0 })
        }
        Command::Simulate => {
            let report = run_simulate(&cfg)?;
            println!(
                "scans={} imu_samples={} mean_hit_ratio={:.6} min_hit_ratio={:.6} output={}",
                report.scans,
                report.imu_samples,
                report.mean_hit_ratio,
                report.min_hit_ratio,
                cfg.output_dir.display()
            );
            Ok(0)
        }
        Command::Verify { .. } => {
            let report = run_verify(&cfg.verify);
            print!("{}", report.render());
            Ok(if report.all_passed() { 0 } else { EXIT_ESTIMATION })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
