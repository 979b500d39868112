//! Command-line interface: corpus generation, training, evaluation,
//! prediction and a gradient self-test.
//!
//! Exit codes: 0 success, 2 configuration/input errors, 3 numeric failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cascade_ee::config::RunConfig;
use cascade_ee::encoder::Vocabulary;
use cascade_ee::error::Error;
use cascade_ee::evaluation::score;
use cascade_ee::inference::{predict_corpus, predictions_as_events, save_predictions};
use cascade_ee::model::CascadeModel;
use cascade_ee::primitives::{grad_check, grad_check_corrupted};
use cascade_ee::schema::{load_corpus, save_corpus, split_corpus, EventSchema};
use cascade_ee::synthetic::{generate, GeneratorConfig};
use cascade_ee::training::{build_instances, instance_loss, train};

#[derive(Parser)]
#[command(name = "cascade-ee", about = "Cascade-decoded overlapping event extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. --set epochs=5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for assignment in &self.sets {
            config.set(assignment)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with controlled overlap patterns.
    Generate {
        /// Output directory for schema.json, corpus.jsonl and the splits.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        sentences: usize,
        #[arg(long, default_value_t = 4)]
        types: usize,
        #[arg(long, default_value_t = 6)]
        roles: usize,
        #[arg(long, default_value_t = 3)]
        roles_per_type: usize,
        #[arg(long, default_value_t = 0.15)]
        p1: f64,
        #[arg(long, default_value_t = 0.15)]
        p2: f64,
        #[arg(long, default_value_t = 0.15)]
        p3: f64,
        #[arg(long, default_value_t = 0.10)]
        negatives: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train/validation/test ratios, comma separated.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        split: String,
    },
    /// Train a model and write the best checkpoint by validation AC F1.
    Train {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a model checkpoint against a gold corpus.
    Eval {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also require the trigger span to match for argument tuples.
        #[arg(long)]
        strict_args: bool,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Extract events from a corpus and write predictions with confidences.
    Predict {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Verify analytic gradients against finite differences on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one gradient entry; the check must then fail.
        #[arg(long)]
        inject_corruption: bool,
    },
}

fn parse_split(s: &str) -> Result<(f64, f64, f64), Error> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad split ratios `{s}`")))?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Error::Config(format!("expected three split ratios, got `{s}`"))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate {
            out_dir,
            sentences,
            types,
            roles,
            roles_per_type,
            p1,
            p2,
            p3,
            negatives,
            seed,
            split,
        } => {
            let ratios = parse_split(&split)?;
            let cfg = GeneratorConfig {
                n_sentences: sentences,
                n_types: types,
                n_roles: roles,
                roles_per_type,
                p1_fraction: p1,
                p2_fraction: p2,
                p3_fraction: p3,
                negative_fraction: negatives,
                seed,
                ..GeneratorConfig::default()
            };
            let corpus = generate(&cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            corpus.schema.save(&out_dir.join("schema.json"))?;
            save_corpus(&corpus, &out_dir.join("corpus.jsonl"))?;
            let (train_part, val_part, test_part) = split_corpus(&corpus, ratios, seed)?;
            save_corpus(&train_part, &out_dir.join("train.jsonl"))?;
            save_corpus(&val_part, &out_dir.join("val.jsonl"))?;
            save_corpus(&test_part, &out_dir.join("test.jsonl"))?;
            println!(
                "generated {} sentences ({} events) into {}",
                corpus.sentences.len(),
                corpus.event_count(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Train { schema, train: train_path, val, out_dir, config } => {
            let config = config.resolve()?;
            let schema = EventSchema::load(&schema)?;
            let train_corpus = load_corpus(&train_path, &schema)?;
            let val_corpus = load_corpus(&val, &schema)?;
            std::fs::create_dir_all(&out_dir)?;
            config.save(&out_dir.join("config.json"))?;

            let vocab = Vocabulary::build(&train_corpus);
            let mut model =
                CascadeModel::new(schema, vocab, config.model_config(), config.seed)?;
            let outcome = train(
                &mut model,
                &train_corpus,
                &val_corpus,
                &config.train_config(),
                Some(&out_dir.join("model.json")),
                Some(&out_dir.join("history.jsonl")),
                config.snapshot(),
            )?;
            for record in &outcome.history {
                println!(
                    "epoch {:>3}  loss {:.4}  val TI {:.4}  TC {:.4}  AI {:.4}  AC {:.4}",
                    record.epoch,
                    record.train_loss.total,
                    record.val_ti_f1,
                    record.val_tc_f1,
                    record.val_ai_f1,
                    record.val_ac_f1
                );
            }
            match outcome.best_epoch {
                Some(e) => println!("best epoch {e} (val AC F1 {:.4})", outcome.best_val_ac_f1),
                None => println!("no training epochs ran; checkpoint holds initial parameters"),
            }
            Ok(())
        }
        Command::Eval { schema, model, data, strict_args, out, config } => {
            let config = config.resolve()?;
            let schema = EventSchema::load(&schema)?;
            let corpus = load_corpus(&data, &schema)?;
            let model = CascadeModel::load_checkpoint(&model, &schema)?;
            let predictions =
                predict_corpus(&model, &corpus, config.thresholds(), config.strict_roles)?;
            let report = score(&corpus, &predictions_as_events(&predictions), strict_args)?;
            print!("{}", report.render_table());
            if let Some(path) = out {
                report.save(&path)?;
                if let Some(parent) = path.parent() {
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
                    config.save(&parent.join(format!("{stem}.config.json")))?;
                }
            }
            Ok(())
        }
        Command::Predict { schema, model, data, out, config } => {
            let config = config.resolve()?;
            let schema = EventSchema::load(&schema)?;
            let corpus = load_corpus(&data, &schema)?;
            let model = CascadeModel::load_checkpoint(&model, &schema)?;
            let predictions =
                predict_corpus(&model, &corpus, config.thresholds(), config.strict_roles)?;
            save_predictions(&predictions, &out)?;
            if let Some(parent) = out.parent() {
                let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
                config.save(&parent.join(format!("{stem}.config.json")))?;
            }
            let total: usize = predictions.iter().map(|p| p.events.len()).sum();
            println!("wrote {total} events for {} sentences", predictions.len());
            Ok(())
        }
        Command::Gradcheck { seed, inject_corruption } => {
            let cfg = GeneratorConfig {
                n_sentences: 3,
                n_types: 2,
                n_roles: 3,
                roles_per_type: 2,
                p1_fraction: 0.0,
                p2_fraction: 0.0,
                p3_fraction: 0.0,
                negative_fraction: 0.0,
                max_fillers: 1,
                seed,
            };
            let corpus = generate(&cfg)?;
            let mut run_config = RunConfig::default();
            for assignment in [
                "hidden_dim=8",
                "encoder_layers=1",
                "encoder_heads=2",
                "decoder_heads=2",
                "position_dim=4",
                "position_clip=4",
                "max_len=32",
                "dropout=0.0",
            ] {
                run_config.set(assignment)?;
            }
            let vocab = Vocabulary::build(&corpus);
            let model =
                CascadeModel::new(corpus.schema.clone(), vocab, run_config.model_config(), seed)?;
            let instances = build_instances(&corpus);
            let mut store = model.store.clone();
            let ids: Vec<_> = store.ids().collect();
            // The checker perturbs its own store copy; each forward pass
            // runs through a model view borrowing those values.
            let check = |tape: &mut cascade_ee::autodiff::Tape,
                         store: &cascade_ee::params::ParameterStore|
             -> cascade_ee::autodiff::Var {
                let shadow = shallow_with_store(&model, store);
                let mut total = None;
                for instance in &instances {
                    let loss = instance_loss(&shadow, tape, &corpus, instance, None)
                        .expect("forward pass");
                    total = Some(match total {
                        Some(t) => tape.add(t, loss),
                        None => loss,
                    });
                }
                total.expect("at least one instance")
            };
            // Step 1e-5 keeps the central difference on one side of the
            // |c - h| and relu kinks while staying above roundoff noise.
            // The tolerance leaves headroom for near-zero gradient entries,
            // whose relative error is dominated by difference cancellation;
            // a genuinely wrong backward pass lands orders of magnitude
            // above it.
            let eps = 1e-5;
            let tolerance = 5e-4;
            let err = if inject_corruption {
                grad_check_corrupted(&mut store, &ids, eps, check)?
            } else {
                grad_check(&mut store, &ids, eps, check)?
            };
            println!("max relative gradient error: {err:.3e}");
            if err > tolerance {
                return Err(Error::Numeric(format!(
                    "gradient check failed: {err:.3e} > {tolerance:.0e}"
                )));
            }
            println!("gradient check passed");
            Ok(())
        }
    }
}

/// A model view whose parameters come from `store` (values only; ids and
/// structure are shared with `model`).
fn shallow_with_store(model: &CascadeModel, store: &cascade_ee::params::ParameterStore) -> CascadeModel {
    CascadeModel {
        store: store.clone(),
        config: model.config.clone(),
        schema: model.schema.clone(),
        vocab: model.vocab.clone(),
        encoder: model.encoder.clone(),
        type_detector: model.type_detector.clone(),
        trigger_extractor: model.trigger_extractor.clone(),
        argument_extractor: model.argument_extractor.clone(),
        arg_type_table: model.arg_type_table,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
