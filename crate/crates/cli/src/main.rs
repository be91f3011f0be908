use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mtfqi::analysis::{evaluate, EvaluateOptions};
use mtfqi::data::{collect_bundle, load_bundle, save_bundle, BehaviorKind};
use mtfqi::ensemble::{generate_ensemble, EnsembleFile, EnsembleSpec};
use mtfqi::features::{build_encoder_class, EncoderClass};
use mtfqi::fqi::{run_mtfqi, EncoderMode, LearnedModel, SolverConfig};
use mtfqi::harness::{emit_plot, run_sweep, slope_from_csv, ExperimentConfig, SweepAxis};
use mtfqi::rng::{derive_seed, stream};

#[derive(Parser)]
#[command(name = "mtfqi", version, about = "Multi-task fitted Q-iteration on low-rank MDP ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task ensemble and its encoder class.
    Generate {
        #[arg(long = "states", short = 'S', default_value_t = 5)]
        num_states: usize,
        #[arg(long = "actions", short = 'K', default_value_t = 3)]
        num_actions: usize,
        #[arg(long = "horizon", short = 'H', default_value_t = 5)]
        horizon: usize,
        #[arg(long = "tasks", short = 'T', default_value_t = 5)]
        num_tasks: usize,
        #[arg(long, short = 'd', default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        w_max: f64,
        /// Class size |Φ|, the truth included.
        #[arg(long, default_value_t = 8)]
        encoders: usize,
        #[arg(long, default_value_t = 1.0)]
        corruption: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect offline data from every task of an ensemble.
    Collect {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        n: usize,
        /// `uniform` or `eps:<float>`.
        #[arg(long, default_value = "uniform")]
        behavior: BehaviorKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset bundle.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Ensemble file carrying the encoder class.
        #[arg(long)]
        encoders: PathBuf,
        #[arg(long, default_value = "per-stage")]
        mode: EncoderMode,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1e-8)]
        ridge: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Errors, concentrability and bounds for a trained model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scaling sweep from a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Plot a sweep CSV as a log-log SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, default_value = "d1_opt")]
        response: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the log-log slope of a response column.
    Slope {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        response: String,
    },
}

fn load_class(file: &EnsembleFile) -> EncoderClass {
    file.encoder_class.clone().unwrap_or_else(|| {
        EncoderClass::new(vec![file.ensemble.features().clone()], true).expect("truth alone is a valid class")
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            num_states,
            num_actions,
            horizon,
            num_tasks,
            d,
            gamma,
            w_max,
            encoders,
            corruption,
            seed,
            out,
        } => {
            if encoders == 0 {
                bail!("--encoders must be ≥ 1");
            }
            let spec = EnsembleSpec::new(num_states, num_actions, horizon, num_tasks, d)
                .with_gamma(gamma)
                .with_w_max(w_max);
            let ensemble = generate_ensemble(spec, seed)?;
            let class = build_encoder_class(
                ensemble.features(),
                encoders - 1,
                corruption,
                derive_seed(seed, stream::ENCODERS),
            )?;
            EnsembleFile {
                ensemble,
                encoder_class: Some(class),
            }
            .save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Collect {
            ensemble,
            n,
            behavior,
            seed,
            out,
        } => {
            let file = EnsembleFile::load(&ensemble)?;
            let bundle = collect_bundle(&file.ensemble, behavior, n, seed)?;
            save_bundle(&bundle, &out)?;
            println!("wrote {} ({} tasks × {} episodes)", out.display(), bundle.num_tasks(), n);
        }
        Command::Train {
            data,
            encoders,
            mode,
            gamma,
            ridge,
            out,
        } => {
            let bundle = load_bundle(&data)?;
            let file = EnsembleFile::load(&encoders)?;
            if bundle.ensemble_hash != file.ensemble.content_hash() {
                eprintln!("warning: dataset was collected from a different ensemble");
            }
            let cfg = SolverConfig {
                ridge,
                gamma,
                mode,
                ..SolverConfig::default()
            };
            let (model, report) = run_mtfqi(&bundle, &load_class(&file), &cfg)?;
            model.save(&out)?;
            println!("chosen encoders per stage: {:?}", model.encoder_labels());
            println!("stage losses: {:?}", report.stage_losses);
        }
        Command::Evaluate {
            model,
            ensemble,
            data,
            delta,
            out,
        } => {
            let model = LearnedModel::load(&model)?;
            let file = EnsembleFile::load(&ensemble)?;
            let bundle = load_bundle(&data)?;
            let opts = EvaluateOptions {
                delta,
                w_max: file.ensemble.spec().w_max,
                ..EvaluateOptions::default()
            };
            let report = evaluate(&model, &file.ensemble, &bundle, &load_class(&file), &opts)?;
            std::fs::write(&out, report.to_json()? + "\n").with_context(|| format!("writing {}", out.display()))?;
            println!("Δ₁ (optimal) = {}", report.error_optimal.delta[0]);
            println!("Δ₁ (behavior) = {}", report.error_behavior.delta[0]);
            println!("λ_max = {}", report.inputs.lambda_max);
            println!("theorem1a = {}, theorem1c = {} (up to constants)", report.bounds.theorem1a, report.bounds.theorem1c);
        }
        Command::Sweep { config, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (rows, outputs) = run_sweep(&cfg, &out_dir)?;
            let failed = rows.iter().filter(|r| !r.is_ok()).count();
            println!("wrote {} ({} rows, {} failed)", outputs.csv.display(), rows.len(), failed);
            if let Some(p) = outputs.plot {
                println!("wrote {}", p.display());
            }
        }
        Command::Plot {
            csv,
            axis,
            response,
            out,
        } => {
            emit_plot(&csv, &axis.to_string(), &response, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Slope { csv, response } => {
            let fit = slope_from_csv(&csv, &response)?;
            println!("slope = {}", fit.slope);
            println!("intercept = {}", fit.intercept);
            println!("r2 = {}", fit.r_squared);
            println!("excluded = {}", fit.excluded);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
