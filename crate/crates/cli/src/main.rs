//! Command-line front end. Each pipeline stage — prepare, train, score,
//! eval, report — runs standalone on the previous stage's artifacts, and
//! `run` chains them all in one process. Logs go to standard error;
//! artifacts go to files under the configured output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use intent_ood::corpus::{load_tsv, TsvSchema, Vocabulary, DEFAULT_OOD_LABEL};
use intent_ood::experiment::{
    assemble_report, eval_stage, keys_for, load_dataset, load_prepared, prepare_seed,
    run_experiment, score_seed, write_prepared, ExperimentConfig, ModelSource, SeedPaths, Trainer,
};
use intent_ood::metrics::SeedMetrics;
use intent_ood::noising::{noise_corpus, NoiseDistribution, NoiseKind};
use intent_ood::synth::{write_synthetic_benchmark, SynthConfig};

#[derive(Parser)]
#[command(
    name = "intent-ood",
    version,
    about = "Out-of-domain detection for intent classifiers: train small sequence models and score test sentences"
)]
struct Cli {
    /// Repeat for more log detail (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed (must appear in the config's seed list).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic disjoint-vocabulary benchmark as TSV files.
    Synth {
        /// Directory for train.tsv / valid.tsv / test.tsv.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3000)]
        n_train: usize,
        #[arg(long, default_value_t = 600)]
        n_valid_id: usize,
        #[arg(long, default_value_t = 600)]
        n_test_id: usize,
        #[arg(long, default_value_t = 300)]
        n_valid_ood: usize,
        #[arg(long, default_value_t = 300)]
        n_test_ood: usize,
    },
    /// Resolve labels and holdout, then write each seed's prepared splits
    /// and vocabulary.
    Prepare(StageArgs),
    /// Train the models the configured methods need; write checkpoints.
    Train(StageArgs),
    /// Score validation and test with every configured method, reading
    /// models back from checkpoints.
    Score(StageArgs),
    /// Compute per-seed metrics from score TSVs.
    Eval(StageArgs),
    /// Aggregate per-seed metrics into report.json and report.tsv.
    Report(ConfigArg),
    /// Run prepare → train → score → eval → report for every seed.
    Run(ConfigArg),
    /// Preview word-substitution noise on a TSV file (debugging aid).
    Noise {
        /// Input TSV of sentences.
        #[arg(long)]
        input: PathBuf,
        /// Column layout, e.g. "label,text".
        #[arg(long, default_value = "label,text")]
        schema: String,
        /// uniform, unigram, or uniroot.
        #[arg(long, default_value = "uniroot")]
        kind: NoiseKind,
        /// Per-word substitution probability.
        #[arg(long, default_value_t = 0.5)]
        p_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How many sentences to preview.
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::from_env(env_logger::Env::default())
        .filter_level(level)
        .format_timestamp(None)
        .init();

    match cli.command {
        Command::Synth {
            dir,
            seed,
            n_train,
            n_valid_id,
            n_test_id,
            n_valid_ood,
            n_test_ood,
        } => {
            let config = SynthConfig {
                seed,
                n_train,
                n_valid_id,
                n_test_id,
                n_valid_ood,
                n_test_ood,
            };
            let bundle = write_synthetic_benchmark(&dir, &config)?;
            log::info!(
                "wrote {} train / {} valid / {} test rows to {}",
                bundle.train_id.len(),
                bundle.valid.len(),
                bundle.test.len(),
                dir.display()
            );
        }
        Command::Prepare(args) => {
            let (config, seeds) = load_config(&args)?;
            let base = load_dataset(&config)?;
            for seed in seeds {
                let prep = prepare_seed(&config, &base, seed)?;
                let paths = SeedPaths::new(&config.out_dir, seed);
                write_prepared(&paths, &prep)?;
                log::info!(
                    "seed {seed}: prepared {} labels, {} vocabulary entries",
                    prep.bundle.labels.len(),
                    prep.vocab.len()
                );
            }
        }
        Command::Train(args) => {
            let (config, seeds) = load_config(&args)?;
            let methods = config.parse_methods()?;
            for seed in seeds {
                let paths = SeedPaths::new(&config.out_dir, seed);
                let prep = load_prepared(&paths)
                    .with_context(|| format!("seed {seed}: run `prepare` first"))?;
                let mut trainer = Trainer::new(&config, &prep, seed, ModelSource::TrainNow);
                for key in keys_for(&methods) {
                    trainer.obtain(key)?;
                }
                let log_path = paths.root.join("training.json");
                fs::write(&log_path, serde_json::to_string_pretty(&trainer.train_logs)?)
                    .with_context(|| log_path.display().to_string())?;
                log::info!("seed {seed}: trained {} models", trainer.train_logs.len());
            }
        }
        Command::Score(args) => {
            let (config, seeds) = load_config(&args)?;
            let methods = config.parse_methods()?;
            for seed in seeds {
                let paths = SeedPaths::new(&config.out_dir, seed);
                let prep = load_prepared(&paths)
                    .with_context(|| format!("seed {seed}: run `prepare` first"))?;
                let mut trainer = Trainer::new(&config, &prep, seed, ModelSource::FromCheckpoints);
                let scores = score_seed(&mut trainer, &prep, &methods, &paths)?;
                log::info!(
                    "seed {seed}: wrote {} validation and {} test scores",
                    scores.valid.len(),
                    scores.test.len()
                );
            }
        }
        Command::Eval(args) => {
            let (config, seeds) = load_config(&args)?;
            for seed in seeds {
                let paths = SeedPaths::new(&config.out_dir, seed);
                let metrics = eval_stage(&paths)
                    .with_context(|| format!("seed {seed}: run `score` first"))?;
                log::info!("seed {seed}: evaluated {} methods", metrics.len());
            }
        }
        Command::Report(args) => {
            let config = ExperimentConfig::from_toml_path(&args.config)?;
            let mut per_seed = BTreeMap::new();
            let mut failed = BTreeMap::new();
            for &seed in &config.seeds {
                let path = SeedPaths::new(&config.out_dir, seed).metrics();
                match fs::read_to_string(&path)
                    .map_err(anyhow::Error::from)
                    .and_then(|text| {
                        Ok(serde_json::from_str::<BTreeMap<String, SeedMetrics>>(&text)?)
                    }) {
                    Ok(metrics) => {
                        per_seed.insert(seed, metrics);
                    }
                    Err(e) => {
                        failed.insert(seed, format!("{}: {e}", path.display()));
                    }
                }
            }
            let report = assemble_report(&config, per_seed, failed)?;
            print!("{}", report.eval.to_table_tsv());
            if !report.failed_seeds.is_empty() {
                log::warn!("incomplete seeds: {:?}", report.failed_seeds);
            }
        }
        Command::Run(args) => {
            let config = ExperimentConfig::from_toml_path(&args.config)?;
            let report = run_experiment(&config)?;
            print!("{}", report.eval.to_table_tsv());
            if !report.failed_seeds.is_empty() {
                bail!(
                    "{} of {} seeds failed: {:?}",
                    report.failed_seeds.len(),
                    report.failed_seeds.len() + report.completed_seeds.len(),
                    report.failed_seeds
                );
            }
        }
        Command::Noise {
            input,
            schema,
            kind,
            p_noise,
            seed,
            samples,
        } => {
            let schema = TsvSchema::parse(&schema)?;
            let mut next_id = 0;
            let rows = load_tsv(&input, &schema, DEFAULT_OOD_LABEL, &mut next_id)?;
            let vocab = Vocabulary::build(&rows, 1)?;
            let dist = NoiseDistribution::from_vocabulary(&vocab, kind)?;
            let take: Vec<_> = rows.into_iter().take(samples).collect();
            let noised = noise_corpus(&take, &dist, p_noise, seed, 0)?;
            for (original, noised) in take.iter().zip(&noised) {
                println!("- {}", original.tokens.join(" "));
                println!("+ {}", noised.tokens.join(" "));
            }
        }
    }
    Ok(())
}

fn load_config(args: &StageArgs) -> Result<(ExperimentConfig, Vec<u64>)> {
    let config = ExperimentConfig::from_toml_path(&args.config)?;
    let seeds = match args.seed {
        None => config.seeds.clone(),
        Some(seed) => {
            if !config.seeds.contains(&seed) {
                bail!("seed {seed} is not in the config's seed list {:?}", config.seeds);
            }
            vec![seed]
        }
    };
    Ok((config, seeds))
}
