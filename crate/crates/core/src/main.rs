use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use stepwise_sindy::config::RunConfig;
use stepwise_sindy::dataset::{fmt_f64, Dataset};
use stepwise_sindy::experiment;
use stepwise_sindy::pipeline::{
    reconstruct_monolithic, reconstruct_stepwise, PipelineConfig, PredictTorque, StepwiseModel,
};
use stepwise_sindy::regression::SparseModel;
use stepwise_sindy::{Error, Result};

#[derive(Parser)]
#[command(
    name = "stepwise-sindy",
    version,
    about = "Stepwise sparse identification of manipulator dynamics"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the noise seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training suite (clean and per noise case), the test suite
    /// and the clean data of the tracking plant.
    Simulate,
    /// Cluster a dataset and attach cluster/pattern columns.
    Cluster { dataset: PathBuf },
    /// Fit a model to a dataset.
    Reconstruct {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Stepwise)]
        mode: Mode,
        /// Split each joint by motion direction and add friction features
        /// (stepwise only).
        #[arg(long)]
        friction: bool,
    },
    /// Predict joint torques for every sample of a dataset.
    Predict { model: PathBuf, dataset: PathBuf },
    /// Compare both methods over the noise cases and run the tracking study.
    Evaluate {
        /// Directory with `<case>/stepwise.model` and `<case>/monolithic.model`
        /// per noise case plus `plant/direction_split.model` and
        /// `plant/plain.model`; everything is fitted from scratch when omitted.
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Stepwise,
    Monolithic,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output = out;
    }
    cfg.validate()?;
    let out = cfg.output.clone();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.resolved.toml"), cfg.to_toml()?)?;

    match cli.command {
        Command::Simulate => {
            let sim = experiment::simulate(&cfg)?;
            sim.train.save(&out.join("train_clean.csv"))?;
            sim.test.save(&out.join("test.csv"))?;
            for (name, ds) in &sim.cases {
                ds.save(&out.join(format!("train_{name}.csv")))?;
            }
            let plant = experiment::simulate_plant(&cfg)?;
            plant.train.save(&out.join("plant_train.csv"))?;
            plant.test.save(&out.join("plant_test.csv"))?;
            eprintln!(
                "simulated {} training and {} test samples",
                sim.train.len(),
                sim.test.len()
            );
        }
        Command::Cluster { dataset } => {
            let ds = Dataset::load(&dataset)?;
            let res = experiment::cluster(&cfg, &ds)?;
            res.annotate(&ds)?.save(&out.join("clustered.csv"))?;
            let mut elbow = String::from("k,wcss,selected\n");
            for (k, w) in &res.elbow {
                let _ = writeln!(elbow, "{k},{},{}", fmt_f64(*w), u8::from(*k == res.k));
            }
            std::fs::write(out.join("elbow.csv"), elbow)?;
            let mut clusters = String::from(
                "cluster,pattern,centroid_activation_q,centroid_activation_dq,samples\n",
            );
            for (c, (centroid, pattern)) in res.centroids.iter().zip(&res.patterns).enumerate() {
                let count = res.assignment.iter().filter(|&&a| a == c).count();
                let _ = writeln!(
                    clusters,
                    "{c},{pattern},{},{},{count}",
                    fmt_f64(centroid[0]),
                    fmt_f64(centroid[1])
                );
            }
            std::fs::write(out.join("clusters.csv"), clusters)?;
            eprintln!(
                "k* = {}, agreement with recorded phases {:.4}",
                res.k,
                res.agreement(&ds)
            );
        }
        Command::Reconstruct {
            dataset,
            mode,
            friction,
        } => {
            let ds = Dataset::load(&dataset)?;
            match mode {
                Mode::Stepwise => {
                    let pipeline = if friction {
                        PipelineConfig {
                            friction: Some(cfg.control.friction.clone()),
                            ..cfg.pipeline.clone()
                        }
                    } else {
                        cfg.pipeline.clone()
                    };
                    let model = reconstruct_stepwise(&ds, &pipeline)?;
                    std::fs::write(out.join("stepwise.model"), model.export())?;
                }
                Mode::Monolithic if friction => {
                    return Err(Error::Invalid(
                        "--friction applies to stepwise reconstruction only".into(),
                    ));
                }
                Mode::Monolithic => {
                    let model = reconstruct_monolithic(&ds, &cfg.pipeline)?;
                    std::fs::write(out.join("monolithic.model"), model.export())?;
                }
            }
        }
        Command::Predict { model, dataset } => {
            let model = load_model(&model)?;
            let ds = Dataset::load(&dataset)?;
            let mut s = String::from("t");
            for j in 1..=ds.dof {
                let _ = write!(s, ",tau{j}_hat");
            }
            s.push('\n');
            for sample in &ds.samples {
                s.push_str(&fmt_f64(sample.t));
                for v in model.predict_torque(&sample.state())? {
                    s.push(',');
                    s.push_str(&fmt_f64(v));
                }
                s.push('\n');
            }
            std::fs::write(out.join("predictions.csv"), s)?;
        }
        Command::Evaluate { models } => {
            let report = match models {
                None => {
                    let report = experiment::evaluate(&cfg)?;
                    for (case, method, secs) in &report.fit_seconds {
                        eprintln!("{case} {method} fit {secs:.2} s");
                    }
                    report
                }
                Some(dir) => {
                    let sim = experiment::simulate(&cfg)?;
                    let mut fitted = Vec::new();
                    for c in &cfg.noise_cases {
                        let case_dir = dir.join(&c.name);
                        let stepwise =
                            StepwiseModel::import(&read(&case_dir.join("stepwise.model"))?)?;
                        let monolithic =
                            SparseModel::import(&read(&case_dir.join("monolithic.model"))?)?;
                        fitted.push((c.name.clone(), stepwise, monolithic));
                    }
                    let plant_data = experiment::simulate_plant(&cfg)?;
                    let plant_fit = experiment::PlantFit {
                        split: StepwiseModel::import(&read(
                            &dir.join("plant/direction_split.model"),
                        )?)?,
                        plain: StepwiseModel::import(&read(&dir.join("plant/plain.model"))?)?,
                    };
                    experiment::evaluate_models(&cfg, &sim, &fitted, &plant_data, &plant_fit)?
                }
            };
            report.write(&out)?;
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn load_model(path: &Path) -> Result<Box<dyn PredictTorque>> {
    let text = read(path)?;
    match text.lines().next() {
        Some("stepwise-model") => Ok(Box::new(StepwiseModel::import(&text)?)),
        Some("sparse-model") => Ok(Box::new(SparseModel::import(&text)?)),
        _ => Err(Error::Parse(format!(
            "{} is not a model file",
            path.display()
        ))),
    }
}
