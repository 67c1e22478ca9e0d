//! The four command entry points: train, augment, predict, and eval.
//!
//! Everything here is deterministic given the configuration: random draws
//! flow through labeled forks of the run seed, datasets load in file order,
//! and log and output files contain no timestamps or absolute paths, so a
//! rerun with the same seed reproduces them byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{collapse_whitespace, load_examples, load_squad, save_examples, QaExample};
use crate::encoders::{ModelDims, WordVectorTable};
use crate::eval::{evaluate, exact_match, f1, write_report, ExampleReport, Metrics};
use crate::search::{define_model_params, Model};
use crate::tensor::{checkpoint, ParameterStore, RngStream};
use crate::typeswaps::{build_inventory, sample_augmented};
use crate::{io_error, GnrError, Result};

fn dims(config: &RunConfig) -> ModelDims {
    ModelDims {
        word_dim: config.word_dim,
        hidden: config.hidden,
        depth: config.depth,
    }
}

/// Load a dataset: a ".json" file is treated as a raw corpus, anything else
/// as a JSONL example cache (the augment command's output format).
pub fn load_dataset(path: &Path) -> Result<Vec<QaExample>> {
    if path.extension().is_some_and(|e| e == "json") {
        let (examples, report) = load_squad(path)?;
        if report.total_dropped() > 0 {
            eprintln!(
                "{}: loaded {}, dropped {} ({})",
                path.display(),
                report.loaded,
                report.total_dropped(),
                report
                    .dropped
                    .iter()
                    .map(|(k, v)| format!("{k} {v}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
        Ok(examples)
    } else {
        Ok(load_examples(path)?)
    }
}

/// Deterministic stand-in table when no vector file is configured: every
/// word in the dataset gets a fixed random vector derived from the seed.
fn synthesize_table(examples: &[QaExample], dim: usize, rng: &mut RngStream) -> WordVectorTable {
    let mut vocab = BTreeSet::new();
    for ex in examples {
        vocab.extend(ex.question.iter().cloned());
        for sentence in &ex.document.sentences {
            vocab.extend(sentence.iter().map(|t| t.text.clone()));
        }
    }
    let mut table = WordVectorTable::new(dim);
    let scale = 1.0 / (dim as f64).sqrt();
    for word in vocab {
        let vector: Vec<f64> = (0..dim).map(|_| rng.normal() * scale).collect();
        table.insert(&word, vector);
    }
    table
}

/// The word table for a run: the configured vector file when given, else a
/// synthesized table over the training vocabulary. Both are functions of
/// the configuration alone, so training and later inference agree.
fn model_table(config: &RunConfig, train: Option<&[QaExample]>) -> Result<WordVectorTable> {
    if let Some(path) = &config.vectors {
        let table = WordVectorTable::from_text_file(path)?;
        if table.dim() != config.word_dim {
            return Err(GnrError::Usage(format!(
                "word vectors in {} have dimension {}, but word_dim is {}",
                path.display(),
                table.dim(),
                config.word_dim
            )));
        }
        return Ok(table);
    }
    let owned;
    let train = match train {
        Some(t) => t,
        None => {
            let path = config.train.as_ref().ok_or_else(|| {
                GnrError::Usage(
                    "set vectors = <file> or train = <file> so the word table can be built"
                        .to_string(),
                )
            })?;
            owned = load_dataset(path)?;
            &owned
        }
    };
    let mut rng = RngStream::new(config.seed).fork("vectors");
    Ok(synthesize_table(train, config.word_dim, &mut rng))
}

/// Load a checkpoint into a model, checking that every parameter matches
/// the configured dimensions.
pub fn load_model(config: &RunConfig, checkpoint_path: &Path) -> Result<Model> {
    let store = checkpoint::load(checkpoint_path)?;
    let mut expected = ParameterStore::new();
    define_model_params(&mut expected, &dims(config), &mut RngStream::new(0))?;
    let names = expected.names();
    if store.names() != names {
        return Err(GnrError::Usage(format!(
            "checkpoint {} does not hold the configured model's parameters",
            checkpoint_path.display()
        )));
    }
    for name in &names {
        let want = expected.get(name)?;
        let got = store.get(name)?;
        if (got.rows, got.cols) != (want.rows, want.cols) {
            return Err(GnrError::Usage(format!(
                "checkpoint parameter {name} is {}x{}, but the configuration implies {}x{}",
                got.rows, got.cols, want.rows, want.cols
            )));
        }
    }
    Ok(Model {
        dims: dims(config),
        store,
        table: model_table(config, None)?,
        normalization: config.normalization,
        beam_width: config.beam_width,
        dropout_recurrent: config.dropout_recurrent,
        dropout_fc: config.dropout_fc,
    })
}

/// Append-only run log that mirrors each line to stdout.
struct RunLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl RunLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = std::fs::File::create(&path).map_err(|e| io_error(&path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path,
        })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        println!("{text}");
        writeln!(self.file, "{text}").map_err(|e| io_error(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| io_error(&self.path, e))
    }
}

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_exact_match: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Train a model: epochs over the training data plus freshly sampled
/// augmented examples, transient recurrent-weight noise before each batch,
/// one Adam step per batch, per-epoch dev metrics, best-dev checkpointing,
/// and early stopping on dev exact match.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    let train_path = config.train.as_ref().ok_or_else(|| {
        GnrError::Usage("training needs train = <file> in the configuration".to_string())
    })?;
    let train = load_dataset(train_path)?;
    if train.is_empty() {
        return Err(GnrError::Usage(format!(
            "no usable examples in {}",
            train_path.display()
        )));
    }
    let dev = match &config.dev {
        Some(path) => Some(load_dataset(path)?),
        None => None,
    };
    let inventory = match &config.kb {
        Some(path) if config.augment_count > 0 => {
            let (inventory, report) = build_inventory(path)?;
            for warning in &report.warnings {
                eprintln!("kb warning: {warning}");
            }
            Some(inventory)
        }
        _ => None,
    };

    std::fs::create_dir_all(&config.checkpoint_dir)
        .map_err(|e| io_error(&config.checkpoint_dir, e))?;
    let checkpoint_path = config.checkpoint_dir.join("best.ckpt");
    let config_path = config.checkpoint_dir.join("config.txt");
    std::fs::write(&config_path, config.to_file_string())
        .map_err(|e| io_error(&config_path, e))?;
    let mut log = RunLog::create(config.checkpoint_dir.join("train.log"))?;

    let rng = RngStream::new(config.seed);
    let table = model_table(config, Some(&train))?;
    let mut model = Model::init(
        dims(config),
        table,
        config.normalization,
        config.beam_width,
        &mut rng.fork("init"),
    )?;
    model.dropout_recurrent = config.dropout_recurrent;
    model.dropout_fc = config.dropout_fc;

    log.line(&format!("train examples {}", train.len()))?;
    if let Some(d) = &dev {
        log.line(&format!("dev examples {}", d.len()))?;
    }
    log.line(&format!(
        "vocabulary {} words, {} parameter values",
        model.table.len(),
        model.store.num_values()
    ))?;
    log.line(&match &inventory {
        Some(_) => format!("augmentation {} examples per epoch", config.augment_count),
        None => "augmentation off".to_string(),
    })?;

    let mut best_exact_match = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut patience_left = config.patience;
    let mut epochs_run = 0usize;
    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        let epoch_rng = rng.fork(&format!("epoch-{epoch}"));
        let augmented = match &inventory {
            Some(inventory) => sample_augmented(
                &train,
                inventory,
                config.augment_count,
                &mut epoch_rng.fork("augment"),
            )?,
            None => Vec::new(),
        };
        let mut order: Vec<&QaExample> = train.iter().chain(augmented.iter()).collect();
        epoch_rng.fork("shuffle").shuffle(&mut order);

        let mut step_rng = epoch_rng.fork("steps");
        let mut loss_sum = 0.0;
        let mut early_updates = 0usize;
        for batch in order.chunks(config.batch_size) {
            let noise = model.store.perturb_weights(config.noise_sigma, &mut step_rng)?;
            for example in batch {
                let span = example.to_span_example();
                let outcome = model.train_step(&span, &mut step_rng)?;
                if !outcome.loss.is_finite() {
                    return Err(GnrError::NonFiniteLoss {
                        epoch,
                        example: example.id.clone(),
                    });
                }
                loss_sum += outcome.loss;
                early_updates += usize::from(outcome.early_stage.is_some());
            }
            model.store.restore_weights(noise);
            model.store.adam_step(
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.epsilon,
                1.0 / batch.len() as f64,
            );
        }

        let eval_set: &[QaExample] = dev.as_deref().unwrap_or(&train);
        let (_, metrics) = evaluate(&model, eval_set)?;
        let improved = metrics.exact_match > best_exact_match;
        if improved {
            best_exact_match = metrics.exact_match;
            best_epoch = epoch;
            checkpoint::save(&model.store, &checkpoint_path)?;
            patience_left = config.patience;
        } else {
            patience_left = patience_left.saturating_sub(1);
        }
        log.line(&format!(
            "epoch {epoch} loss {:.6} early_updates {early_updates} dev_em {:.2} dev_f1 {:.2} dev_sentence {:.2}{}",
            loss_sum / order.len() as f64,
            metrics.exact_match,
            metrics.f1,
            metrics.sentence_accuracy,
            if improved { " *" } else { "" }
        ))?;
        if metrics.exact_match >= 100.0 {
            log.line("stopping: perfect exact match")?;
            break;
        }
        if patience_left == 0 {
            log.line(&format!(
                "stopping: no improvement for {} epochs",
                config.patience
            ))?;
            break;
        }
    }
    log.line(&format!(
        "best epoch {best_epoch} dev_em {best_exact_match:.2}"
    ))?;
    let log_path = log.path.clone();
    log.finish()?;
    Ok(TrainOutcome {
        epochs_run,
        best_epoch,
        best_exact_match,
        checkpoint: checkpoint_path,
        log: log_path,
    })
}

/// Sample augmented examples from the training data and write them as a
/// JSONL example cache that the normal loader reads back.
pub fn cmd_augment(config: &RunConfig, output: &Path, count: Option<usize>) -> Result<usize> {
    let train_path = config.train.as_ref().ok_or_else(|| {
        GnrError::Usage("augmentation needs train = <file> in the configuration".to_string())
    })?;
    let kb_path = config.kb.as_ref().ok_or_else(|| {
        GnrError::Usage("augmentation needs kb = <file> in the configuration".to_string())
    })?;
    let (inventory, report) = build_inventory(kb_path)?;
    println!(
        "inventory: {} types, {} surfaces, {:.2} variants per type",
        report.types, report.variants, report.average_variants_per_type
    );
    for warning in &report.warnings {
        eprintln!("kb warning: {warning}");
    }
    let train = load_dataset(train_path)?;
    let t = count.unwrap_or(config.augment_count);
    let mut rng = RngStream::new(config.seed).fork("augment-cmd");
    let augmented = sample_augmented(&train, &inventory, t, &mut rng)?;
    save_examples(output, &augmented)?;
    println!(
        "wrote {} augmented examples to {}",
        augmented.len(),
        output.display()
    );
    Ok(augmented.len())
}

/// One prediction as written to the predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionOut {
    pub text: String,
    pub prob: f64,
}

/// Predict an answer for every question in the input and write a JSON map
/// of id → {text, prob}.
pub fn cmd_predict(
    config: &RunConfig,
    input: &Path,
    checkpoint_path: &Path,
    output: &Path,
) -> Result<usize> {
    let model = load_model(config, checkpoint_path)?;
    let examples = load_dataset(input)?;
    let mut map: BTreeMap<String, PredictionOut> = BTreeMap::new();
    for example in &examples {
        let prediction = model.predict(&example.question, &example.document.token_texts())?;
        let text = example
            .document
            .span_text(prediction.answer)
            .unwrap_or_default()
            .to_string();
        map.insert(
            example.id.clone(),
            PredictionOut {
                text,
                prob: prediction.probability,
            },
        );
    }
    let mut json = serde_json::to_string_pretty(&map).expect("prediction map serializes");
    json.push('\n');
    std::fs::write(output, json).map_err(|e| io_error(output, e))?;
    Ok(map.len())
}

/// Score a checkpoint over a dataset, optionally writing the JSONL report.
pub fn cmd_eval(
    config: &RunConfig,
    input: &Path,
    checkpoint_path: &Path,
    report_path: Option<&Path>,
) -> Result<Metrics> {
    let model = load_model(config, checkpoint_path)?;
    let examples = load_dataset(input)?;
    let (rows, metrics) = evaluate(&model, &examples)?;
    if let Some(path) = report_path {
        write_report(path, &rows, &metrics)?;
    }
    print_metrics(&metrics);
    Ok(metrics)
}

/// Score a predictions file over a dataset. Exact match and F1 compare the
/// stored text against the gold answers; the sentence diagnostic checks
/// whether the predicted text occurs in the gold sentence, since the file
/// carries no span indices.
pub fn cmd_eval_predictions(
    input: &Path,
    predictions_path: &Path,
    report_path: Option<&Path>,
) -> Result<Metrics> {
    let examples = load_dataset(input)?;
    let text = std::fs::read_to_string(predictions_path)
        .map_err(|e| io_error(predictions_path, e))?;
    let map: BTreeMap<String, PredictionOut> =
        serde_json::from_str(&text).map_err(|e| {
            GnrError::Usage(format!(
                "{} is not a predictions map: {e}",
                predictions_path.display()
            ))
        })?;
    let mut rows = Vec::with_capacity(examples.len());
    for example in &examples {
        let prediction = map.get(&example.id).ok_or_else(|| {
            GnrError::Usage(format!(
                "{} holds no prediction for example {:?}",
                predictions_path.display(),
                example.id
            ))
        })?;
        let em = exact_match(&prediction.text, &example.all_answers)?;
        let f1_score = f1(&prediction.text, &example.all_answers)?;
        let sentence_tokens = &example.document.sentences[example.gold.sentence];
        let sentence_text = &example.document.text
            [sentence_tokens[0].start..sentence_tokens[sentence_tokens.len() - 1].end()];
        let sentence = !prediction.text.trim().is_empty()
            && collapse_whitespace(sentence_text).contains(&collapse_whitespace(&prediction.text));
        rows.push(ExampleReport {
            id: example.id.clone(),
            prediction_text: prediction.text.clone(),
            em: f64::from(u8::from(em)),
            f1: f1_score,
            sentence: f64::from(u8::from(sentence)),
        });
    }
    let metrics = crate::eval::aggregate(&rows)?;
    if let Some(path) = report_path {
        write_report(path, &rows, &metrics)?;
    }
    print_metrics(&metrics);
    Ok(metrics)
}

fn print_metrics(metrics: &Metrics) {
    println!(
        "exact_match {:.2} f1 {:.2} sentence {:.2} count {}",
        metrics.exact_match, metrics.f1, metrics.sentence_accuracy, metrics.count
    );
}
