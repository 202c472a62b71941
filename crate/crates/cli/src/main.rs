use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hoi_core::cvae::LatentMode;
use hoi_core::data::{generate_dataset, Dataset, GeneratorConfig};
use hoi_core::eval::{baselines, evaluate};
use hoi_core::experiments::{infer, run_ablation, run_latent_sweep, run_modification, EvalSettings, ABLATION_ROWS, DEFAULT_SWEEP_DIMS};
use hoi_core::model::ModelConfig;
use hoi_core::train::{fit, Checkpoint, TrainArtifacts, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "hoi", version, about = "Hand-object interaction anticipation: data, training, evaluation and experiments")]
struct Cli {
    /// JSON file with optional `model`, `train`, `generator` and `eval` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and generation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData,
    /// Train a model; writes the log and the best and final checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epochs to reach (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Repeated inference on one sample with spread statistics.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: String,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Train and score every module toggle combination.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Substitute each constraint unit with the alternative strategies.
    Modify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train and score one model per latent dimension.
    SweepLatent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Args)]
struct Sampling {
    /// Inference repeats (defaults to the config's eval section).
    #[arg(long)]
    repeats: Option<usize>,
    /// Use the prior mean instead of sampling latents.
    #[arg(long)]
    deterministic: bool,
}

impl Sampling {
    fn settings(&self, base: &EvalSettings) -> EvalSettings {
        EvalSettings {
            repeats: self.repeats.unwrap_or(base.repeats),
            mode: if self.deterministic { LatentMode::Deterministic } else { base.mode },
            seed: base.seed,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    model: Option<ModelConfig>,
    train: TrainConfig,
    generator: GeneratorConfig,
    eval: EvalSettings,
}

impl Config {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize(de).map_err(|e| anyhow::anyhow!("config {}: at `{}`: {}", p.display(), e.path(), e.inner()))?
            }
            None => Config::default(),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn model(&self) -> ModelConfig {
        self.model.clone().unwrap_or_default()
    }

    fn train_with(&self, epochs: Option<usize>) -> TrainConfig {
        TrainConfig {
            epochs: epochs.unwrap_or(self.train.epochs),
            ..self.train.clone()
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// A checkpoint's model with a consistency check against the explicit config.
fn checkpoint_model(cfg: &Config, path: &Path) -> Result<hoi_core::model::Model> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(m) = &cfg.model {
        if *m != ckpt.model_config {
            bail!("the model section of the config does not match checkpoint {}", path.display());
        }
    }
    Ok(ckpt.model()?)
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [hoi_core::data::InteractionSample]> {
    match name {
        "train" => Ok(&data.train),
        "test" => Ok(&data.test),
        other => bail!("unknown split `{other}` (expected train or test)"),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HOI_NUM_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| format!("HOI_NUM_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = Config::load(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::GenData => {
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let data = generate_dataset(&cfg.generator, seed)?;
            let manifest = data.save(out)?;
            println!("{}", manifest.display());
        }
        Command::Train { data, resume, epochs } => {
            let data = Dataset::load(data)?;
            let mut trainer = match resume {
                Some(path) => {
                    let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
                    if let Some(e) = epochs {
                        t.cfg.epochs = *e;
                    }
                    t
                }
                None => Trainer::new(&cfg.model(), &cfg.train_with(*epochs))?,
            };
            log::info!("{} parameters, sites {:?}", trainer.model.num_params(), trainer.model.cfg.resolve());
            fit(&mut trainer, &data.train, Some(out))?;
            let files = TrainArtifacts::in_dir(out);
            println!("{}", files.last.display());
        }
        Command::Eval { checkpoint, data, split: name, sampling } => {
            let model = checkpoint_model(&cfg, checkpoint)?;
            let data = Dataset::load(data)?;
            let s = sampling.settings(&cfg.eval);
            let report = evaluate(&model, split(&data, name)?, s.repeats, s.mode, s.seed)?;
            let base = baselines(&data.train, &data.test, &model.hand)?;
            write_json(&out.join("eval_report.json"), &serde_json::json!({ "split": name, "report": report, "baselines": base }))?;
            for (n, v) in report.metrics.named() {
                println!("{n:>10} {v:.4}");
            }
        }
        Command::Infer { checkpoint, data, sample, sampling } => {
            let model = checkpoint_model(&cfg, checkpoint)?;
            let data = Dataset::load(data)?;
            let found = data
                .train
                .iter()
                .chain(&data.test)
                .find(|s| s.sample_id == *sample)
                .with_context(|| format!("no sample `{sample}` in the dataset"))?;
            let s = sampling.settings(&cfg.eval);
            let report = infer(&model, found, s.repeats, s.mode, s.seed)?;
            let path = out.join(format!("infer_{sample}.json"));
            write_json(&path, &report)?;
            println!("{}", path.display());
        }
        Command::Ablate { data, seeds, epochs } => {
            let data = Dataset::load(data)?;
            let report = run_ablation(&data, &cfg.model(), &cfg.train_with(*epochs), &cfg.eval, seeds, &ABLATION_ROWS)?;
            write_jsonl(&out.join("ablation.jsonl"), &report.rows)?;
            fs::write(out.join("ablation.md"), report.to_markdown())?;
            print!("{}", report.to_markdown());
        }
        Command::Modify { data, epochs } => {
            let data = Dataset::load(data)?;
            let report = run_modification(&data, &cfg.model(), &cfg.train_with(*epochs), &cfg.eval)?;
            write_jsonl(&out.join("modification.jsonl"), &report.rows)?;
            fs::write(out.join("modification.md"), report.to_markdown())?;
            print!("{}", report.to_markdown());
        }
        Command::SweepLatent { data, dims, epochs } => {
            let data = Dataset::load(data)?;
            let dims = dims.clone().unwrap_or_else(|| DEFAULT_SWEEP_DIMS.to_vec());
            let sweep = run_latent_sweep(&data, &cfg.model(), &cfg.train_with(*epochs), &cfg.eval, &dims)?;
            write_json(&out.join("latent_sweep.json"), &sweep)?;
            for curve in &sweep.curves {
                fs::write(out.join(format!("latent_{}.svg", curve.head)), curve.to_svg())?;
            }
            println!("{}", out.join("latent_sweep.json").display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
