// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use imape::bench::{
    align, initial_thetas, parameter_error, plot_script, read_rows, run_sweep, summarize, write_outputs, write_summary,
    Estimator, ExperimentConfig, Observation,
};
use imape::calibrate::{resume_imape, CalibrationData, CalibrationState};
use imape::noise::PriorFamily;
use imape::scene::Scene;
use imape::{Error, Result};

#[derive(Parser)]
#[command(name = "imape", version, about = "Robust interferometer calibration under compound-Gaussian noise")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a scene and one contaminated observation.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Target SNR in dB.
        #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long, default_value = "simulation")]
        out: PathBuf,
    },
    /// Calibrate one observation and print the final state.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "cauchy")]
        prior: PriorFamily,
        /// Scene written by `simulate`; drawn from the configuration when absent.
        #[arg(long, requires = "observation")]
        scene: Option<PathBuf>,
        /// Observation written by `simulate`.
        #[arg(long, requires = "scene")]
        observation: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
        snr: f64,
        /// Write the state after every cycle to this file, and resume from it
        /// if it already exists.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the Monte-Carlo experiment.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Compare only this IMAPE variant with least squares.
        #[arg(long)]
        prior: Option<PriorFamily>,
        /// Comma-separated SNR values in dB.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr_grid: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a results CSV into MSE tables and a plot script.
    Summarize {
        /// `results.csv` written by `sweep`.
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn simulate(common: &Common, snr: f64, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    cfg.validate()?;
    let scene = cfg.base_scene()?;
    let obs = Observation::simulate(&cfg, &scene, snr, cfg.trial_seed(0, 0))?;
    std::fs::create_dir_all(out)?;
    scene.save(&out.join("scene.toml"))?;
    std::fs::write(out.join("observation.json"), obs.to_json()?)?;
    println!(
        "wrote {} ({} antennas, {} calibrators, {} frequencies, SNR {:.2} dB)",
        out.display(),
        scene.n_antennas(),
        scene.calibrators.len(),
        scene.frequencies_hz.len(),
        obs.achieved_snr_db
    );
    Ok(())
}

fn calibrate(
    common: &Common,
    prior: PriorFamily,
    inputs: Option<(&Path, &Path)>,
    snr: f64,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let cfg = common.load()?;
    cfg.validate()?;
    let (scene, obs) = match inputs {
        Some((scene, obs)) => (Scene::load(scene)?, Observation::from_json(&std::fs::read_to_string(obs)?)?),
        None => {
            let scene = cfg.base_scene()?;
            let obs = Observation::simulate(&cfg, &scene, snr, cfg.trial_seed(0, 0))?;
            (scene, obs)
        }
    };
    if obs.frequencies_hz != scene.frequencies_hz {
        return Err(Error::DimensionMismatch("observation and scene list different frequencies".into()));
    }
    let data = CalibrationData::new(&scene, obs.visibilities.clone())?;
    let state = match checkpoint.filter(|p| p.exists()) {
        Some(path) => {
            let state = CalibrationState::load(path)?;
            info!("resuming from {} at cycle {}", path.display(), state.cycle);
            state
        }
        None => {
            let init = initial_thetas(&cfg, &obs.truth, &data, obs.trial_seed)?;
            CalibrationState::initial(prior, init, data.n_baselines())
        }
    };
    let state = resume_imape(&data, state, &cfg.imape, |s| match checkpoint {
        Some(path) => s.save(path),
        None => Ok(()),
    })?;

    println!("family: {}", state.family);
    println!("cycles: {} (converged: {})", state.cycle, state.converged);
    if let Some(l) = state.log_likelihood() {
        println!("log-likelihood: {l:.6e}");
    }
    for (f, (theta, p)) in state.thetas.iter().zip(&state.priors).enumerate() {
        let aligned = align(theta, &obs.truth)?;
        println!(
            "frequency {:.6e} Hz: hyperparameters {:?}, omega condition {:.3e}, aligned error {:.3e}",
            data.frequencies_hz[f],
            p.hyperparameters(),
            state.omega[f].condition_number(),
            parameter_error(&aligned, &obs.truth)
        );
    }
    println!("--- parameters at first frequency ---");
    print!("{}", state.thetas[0].to_text());
    Ok(())
}

fn sweep(
    common: &Common,
    prior: Option<PriorFamily>,
    snr_grid: Option<Vec<f64>>,
    trials: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(p) = prior {
        cfg.estimators = vec![Estimator::Imape(p), Estimator::GaussianLs];
    }
    if let Some(grid) = snr_grid {
        cfg.snr_grid_db = grid;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    let output = run_sweep(&cfg)?;
    write_outputs(&cfg.output_dir, &cfg, &output)?;
    println!("wrote {} rows to {}", output.rows.len(), cfg.output_dir.display());
    Ok(())
}

fn summarize_file(input: &Path, out: Option<PathBuf>) -> Result<()> {
    let (labels, rows) = read_rows(File::open(input)?)?;
    let summary = summarize(&labels, &rows)?;
    write_summary(std::io::stdout(), &summary)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        write_summary(File::create(dir.join("summary.csv"))?, &summary)?;
        std::fs::write(dir.join("mse.gp"), plot_script("summary.csv", &summary))?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            std::process::exit(2);
        }
    }
    let result = match cli.command {
        Command::Simulate { common, snr, out } => simulate(&common, snr, &out),
        Command::Calibrate {
            common,
            prior,
            scene,
            observation,
            snr,
            checkpoint,
        } => calibrate(
            &common,
            prior,
            scene.as_deref().zip(observation.as_deref()),
            snr,
            checkpoint.as_deref(),
        ),
        Command::Sweep {
            common,
            prior,
            snr_grid,
            trials,
            out,
        } => sweep(&common, prior, snr_grid, trials, out),
        Command::Summarize { input, out } => summarize_file(&input, out),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}
