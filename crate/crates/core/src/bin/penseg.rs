use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use penseg::config::PipelineConfig;
use penseg::demo::embed_demo;
use penseg::pipeline::{evaluate_dataset, segment_dataset, with_jobs, Mode};
use penseg::scenegen::{generate_suite_with, Manifest, SceneData, SuiteSpec};
use penseg::Error;

const EFFECTIVE_CONFIG: &str = "effective-config.json";

#[derive(Parser, Debug)]
#[command(name = "penseg", version, about = "Instance segmentation of ellipse-annotated animals")]
struct Cli {
    /// Pipeline configuration (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-scene work.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Categorical,
    Combined,
    Bodypart,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Categorical => Mode::Categorical,
            ModeArg::Combined => Mode::Combined,
            ModeArg::Bodypart => Mode::Bodypart,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a suite spec (default output: dataset).
    Generate {
        /// JSON list of scene specs, or {"template", "count", "n_animals"}.
        spec: PathBuf,
    },
    /// Segment every scene of a dataset (default output: predictions).
    Segment {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "combined")]
        mode: ModeArg,
    },
    /// Score predictions against a dataset (default output: reports).
    Evaluate {
        predictions: PathBuf,
        dataset: PathBuf,
    },
    /// Snapshot the embedding during optimization (default output: embed-demo).
    EmbedDemo {
        dataset: PathBuf,
        /// Scene name; defaults to the first scene of the manifest.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,10,80")]
        steps: Vec<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cli: &Cli, default: &str) -> Result<PathBuf, Error> {
    let dir = cli.output.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn read_suite(path: &Path, seed: Option<u64>) -> Result<SuiteSpec, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut suite: SuiteSpec = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    // --seed replaces the template seed, or renumbers listed scenes from it
    if let Some(s) = seed {
        match &mut suite {
            SuiteSpec::Template { template, .. } => template.seed = s,
            SuiteSpec::List(v) => {
                for (k, spec) in v.iter_mut().enumerate() {
                    spec.seed = s.wrapping_add(k as u64);
                }
            }
        }
    }
    Ok(suite)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate { spec } => {
            let specs = read_suite(spec, cli.seed)?.expand()?;
            let out = output_dir(&cli, "dataset")?;
            let m = with_jobs(cli.jobs, || {
                generate_suite_with(&specs, &out, cfg.core_factor, cfg.head_fraction)
            })??;
            cfg.write(out.join(EFFECTIVE_CONFIG))?;
            println!("wrote {} scenes to {}", m.scenes.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Segment { dataset, mode } => {
            let out = output_dir(&cli, "predictions")?;
            cfg.write(out.join(EFFECTIVE_CONFIG))?;
            let pm = with_jobs(cli.jobs, || segment_dataset(dataset, &out, &cfg, (*mode).into()))??;
            let ok = pm.scenes.len() - pm.failures.len();
            println!("segmented {ok}/{} scenes ({}) into {}", pm.scenes.len(), pm.mode, out.display());
            for f in &pm.failures {
                eprintln!("failed: {}: {}", f.name, f.error);
            }
            Ok(if pm.failures.is_empty() {
                ExitCode::SUCCESS
            } else if pm.failures.iter().any(|f| f.numerical) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            })
        }
        Command::Evaluate {
            predictions,
            dataset,
        } => {
            let out = output_dir(&cli, "reports")?;
            cfg.write(out.join(EFFECTIVE_CONFIG))?;
            let ev = with_jobs(cli.jobs, || evaluate_dataset(predictions, dataset, &cfg))??;
            ev.write(&out)?;
            let a = &ev.aggregate.ellipse;
            let f4 = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
            println!(
                "{} scenes: PQ {} F1 {} precision {} recall {} jaccard {} orientation {}",
                ev.aggregate.n_scenes,
                f4(a.pq),
                f4(a.f1),
                f4(a.precision),
                f4(a.recall),
                f4(a.jaccard_accuracy),
                f4(a.orientation_accuracy)
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::EmbedDemo {
            dataset,
            scene,
            steps,
        } => {
            let manifest = Manifest::read(dataset)?;
            let name = match scene {
                Some(s) => s.clone(),
                None => manifest
                    .scenes
                    .first()
                    .map(|e| e.name.clone())
                    .ok_or_else(|| Error::Dataset("manifest lists no scenes".into()))?,
            };
            if !manifest.scenes.iter().any(|e| e.name == name) {
                return Err(Error::Dataset(format!("no scene named '{name}'")));
            }
            let data = SceneData::read(dataset.join(&name), &name)?;
            let out = output_dir(&cli, "embed-demo")?;
            cfg.write(out.join(EFFECTIVE_CONFIG))?;
            let snaps = with_jobs(cli.jobs, || embed_demo(&data, &cfg, steps, Some(&out)))??;
            for s in &snaps {
                println!(
                    "step {:>4}: loss {:.4} spread {:.4} clusters {}",
                    s.step, s.loss, s.spread, s.n_clusters
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
