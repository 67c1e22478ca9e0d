//! Answer-string scoring: normalization, Exact-Match, token-bag F1, and a
//! sentence-level diagnostic.
//!
//! Normalization lowercases, strips Unicode punctuation, removes the
//! articles a/an/the, and collapses whitespace. Exact-Match compares
//! normalized strings; F1 compares normalized token bags with multiplicity;
//! both take the maximum over the listed gold answers. The sentence metric
//! only asks whether the predicted span sits in the gold sentence.

use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::dataio::QaExample;
use crate::search::{AnswerTuple, Model, SearchError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no gold answers to score against")]
    EmptyGolds,
    #[error("no examples to evaluate")]
    EmptyDataset,
    #[error("answer tuple ({0}, {1}, {2}) does not fit the document")]
    TupleOutOfRange(usize, usize, usize),
    #[error("failed to write report to {path}: {source}")]
    ReportIo {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Search(#[from] SearchError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("valid punctuation pattern"))
}

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid article pattern"))
}

/// Lowercase, strip punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct = punctuation().replace_all(&lower, "");
    let no_articles = articles().replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalized_tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// 1 iff the normalized prediction equals any normalized gold.
pub fn exact_match(prediction: &str, golds: &[String]) -> Result<bool> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGolds);
    }
    let p = normalize_answer(prediction);
    Ok(golds.iter().any(|g| normalize_answer(g) == p))
}

fn f1_single(prediction: &[String], gold: &[String]) -> f64 {
    if prediction.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if prediction.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for t in gold {
        *counts.entry(t.as_str()).or_insert(0usize) += 1;
    }
    let mut common = 0usize;
    for t in prediction {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / prediction.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Harmonic mean of token-bag precision and recall, maximized over golds.
pub fn f1(prediction: &str, golds: &[String]) -> Result<f64> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGolds);
    }
    let p = normalized_tokens(prediction);
    Ok(golds
        .iter()
        .map(|g| f1_single(&p, &normalized_tokens(g)))
        .fold(0.0, f64::max))
}

/// 1 iff the prediction picked the gold sentence. Both tuples must refer to
/// the document whose sentence lengths are given.
pub fn sentence_score(
    predicted: AnswerTuple,
    gold: AnswerTuple,
    sentence_lens: &[usize],
) -> Result<bool> {
    for t in [predicted, gold] {
        if t.validate(sentence_lens).is_err() {
            return Err(EvalError::TupleOutOfRange(t.sentence, t.start, t.end));
        }
    }
    Ok(predicted.sentence == gold.sentence)
}

/// Dataset-level averages, as percentages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub exact_match: f64,
    pub f1: f64,
    pub sentence_accuracy: f64,
    pub count: usize,
}

/// One scored example, serialized as one report line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleReport {
    pub id: String,
    pub prediction_text: String,
    pub em: f64,
    pub f1: f64,
    pub sentence: f64,
}

/// Run the model over every example and score its predictions.
///
/// Returns one report row per example, in dataset order, together with the
/// aggregate metrics. Exact-Match and F1 compare the predicted span's text
/// against every listed gold answer; the sentence metric compares tuples.
pub fn evaluate(model: &Model, examples: &[QaExample]) -> Result<(Vec<ExampleReport>, Metrics)> {
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let sentences = ex.document.token_texts();
        let pred = model.predict(&ex.question, &sentences)?;
        let text = ex
            .document
            .span_text(pred.answer)
            .ok_or(EvalError::TupleOutOfRange(
                pred.answer.sentence,
                pred.answer.start,
                pred.answer.end,
            ))?
            .to_string();
        let em = exact_match(&text, &ex.all_answers)?;
        let f1_score = f1(&text, &ex.all_answers)?;
        let sentence =
            sentence_score(pred.answer, ex.gold, &ex.document.sentence_lens())?;
        rows.push(ExampleReport {
            id: ex.id.clone(),
            prediction_text: text,
            em: f64::from(u8::from(em)),
            f1: f1_score,
            sentence: f64::from(u8::from(sentence)),
        });
    }
    let metrics = aggregate(&rows)?;
    Ok((rows, metrics))
}

/// Average per-example scores into dataset metrics.
pub fn aggregate(rows: &[ExampleReport]) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n = rows.len() as f64;
    Ok(Metrics {
        exact_match: 100.0 * rows.iter().map(|r| r.em).sum::<f64>() / n,
        f1: 100.0 * rows.iter().map(|r| r.f1).sum::<f64>() / n,
        sentence_accuracy: 100.0 * rows.iter().map(|r| r.sentence).sum::<f64>() / n,
        count: rows.len(),
    })
}

/// Write the JSON-lines report: one line per example, aggregate last.
pub fn write_report(
    path: &std::path::Path,
    rows: &[ExampleReport],
    metrics: &Metrics,
) -> Result<()> {
    use std::io::Write;
    let io_err = |source| EvalError::ReportIo {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("report row serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    let line = serde_json::to_string(metrics).expect("metrics serialize");
    writeln!(out, "{line}").map_err(io_err)?;
    out.flush().map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golds(texts: &[&str]) -> Vec<String> {
        texts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_rules_apply_in_order() {
        assert_eq!(normalize_answer("The Beatles!"), "beatles");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  An   Apple a Day  "), "apple day");
        assert_eq!(normalize_answer("«¿Quién?»"), "quién");
        // articles are whole words only
        assert_eq!(normalize_answer("theater"), "theater");
        assert_eq!(normalize_answer("a theater"), "theater");
    }

    #[test]
    fn normalization_is_idempotent() {
        for s in [
            "The Beatles!",
            "",
            "U.S.-based mother-in-law",
            "  spaced   out  ",
            "An !!! odd ??? case",
            "«¿Quién es?»",
        ] {
            let once = normalize_answer(s);
            assert_eq!(normalize_answer(&once), once, "input {s:?}");
        }
    }

    #[test]
    fn exact_match_follows_normalization() {
        assert!(exact_match("Jeh Johnson", &golds(&["Jeh Johnson"])).unwrap());
        assert!(exact_match("Jeh Johnson", &golds(&["the Jeh Johnson"])).unwrap());
        assert!(!exact_match("apples", &golds(&["oranges"])).unwrap());
        assert!(exact_match("x", &golds(&["y", "X!"])).unwrap(), "max over golds");
        assert!(matches!(exact_match("x", &[]), Err(EvalError::EmptyGolds)));
    }

    #[test]
    fn f1_hand_computations() {
        assert_eq!(f1("same", &golds(&["same"])).unwrap(), 1.0);
        let v = f1("Johnson", &golds(&["Jeh Johnson"])).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12, "precision 1, recall 1/2 → {v}");
        assert_eq!(f1("apples", &golds(&["oranges"])).unwrap(), 0.0);
        assert!(matches!(f1("x", &[]), Err(EvalError::EmptyGolds)));
    }

    #[test]
    fn f1_counts_token_multiplicity() {
        // bags {x:2, y:1} vs {x:1, y:2}: overlap 2, precision = recall = 2/3
        let v = f1("x x y", &golds(&["x y y"])).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn f1_empty_conventions() {
        // normalization erases pure-punctuation strings
        assert_eq!(f1("!!!", &golds(&["???"])).unwrap(), 1.0);
        assert_eq!(f1("word", &golds(&["???"])).unwrap(), 0.0);
        assert_eq!(f1("!!!", &golds(&["word"])).unwrap(), 0.0);
    }

    #[test]
    fn f1_takes_the_best_gold() {
        let v = f1("Jeh Johnson", &golds(&["nothing shared", "Johnson"])).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_match_implies_perfect_f1() {
        let cases = [
            ("The Beatles", vec!["Beatles!"]),
            ("one two three", vec!["zzz", "one two three"]),
            ("An answer", vec!["answer"]),
        ];
        for (pred, gs) in cases {
            let gs = golds(&gs);
            if exact_match(pred, &gs).unwrap() {
                assert_eq!(f1(pred, &gs).unwrap(), 1.0, "pred {pred:?}");
            }
        }
    }

    #[test]
    fn metrics_ignore_articles_and_punctuation() {
        let gs = golds(&["the Eiffel Tower"]);
        for pred in ["Eiffel Tower", "eiffel tower!", "The Eiffel Tower.", "Eiffel, Tower"] {
            assert!(exact_match(pred, &gs).unwrap(), "{pred}");
            assert_eq!(f1(pred, &gs).unwrap(), 1.0, "{pred}");
        }
    }

    #[test]
    fn sentence_metric_compares_sentence_indices() {
        let lens = [3, 4];
        let gold = AnswerTuple::new(1, 0, 2);
        assert!(sentence_score(gold, gold, &lens).unwrap());
        assert!(sentence_score(AnswerTuple::new(1, 3, 3), gold, &lens).unwrap());
        assert!(!sentence_score(AnswerTuple::new(0, 0, 0), gold, &lens).unwrap());
        assert!(matches!(
            sentence_score(AnswerTuple::new(2, 0, 0), gold, &lens),
            Err(EvalError::TupleOutOfRange(..))
        ));
    }

    #[test]
    fn aggregate_averages_per_example_scores() {
        let rows = vec![
            ExampleReport {
                id: "a".into(),
                prediction_text: "x".into(),
                em: 1.0,
                f1: 1.0,
                sentence: 1.0,
            },
            ExampleReport {
                id: "b".into(),
                prediction_text: "y".into(),
                em: 0.0,
                f1: 0.25,
                sentence: 0.0,
            },
        ];
        let m = aggregate(&rows).unwrap();
        assert_eq!(m.exact_match, 50.0);
        assert_eq!(m.f1, 62.5);
        assert_eq!(m.sentence_accuracy, 50.0);
        assert_eq!(m.count, 2);
        assert!(matches!(aggregate(&[]), Err(EvalError::EmptyDataset)));
    }

    #[test]
    fn report_lines_are_deterministic_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        let rows = vec![ExampleReport {
            id: "q1".into(),
            prediction_text: "the answer".into(),
            em: 1.0,
            f1: 1.0,
            sentence: 1.0,
        }];
        let metrics = aggregate(&rows).unwrap();
        write_report(&path, &rows, &metrics).unwrap();
        let first = std::fs::read(&path).unwrap();
        write_report(&path, &rows, &metrics).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);

        let text = String::from_utf8(first).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let row: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(row["id"], "q1");
        assert_eq!(row["em"], 1.0);
        let agg: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(agg["exact_match"], 100.0);
        assert_eq!(agg["count"], 1);
    }

    use crate::dataio::TokenizedDocument;
    use crate::encoders::{ModelDims, WordVectorTable};
    use crate::search::{Model, Normalization};
    use crate::tensor::RngStream;

    /// A tiny untrained model plus a two-sentence document. The gold of the
    /// returned example is set to whatever the model predicts, so the example
    /// scores perfectly by construction.
    fn model_and_perfect_example() -> (Model, QaExample) {
        let text = "Red blue green. Yellow purple orange.";
        let document = TokenizedDocument::from_text(text);
        assert_eq!(document.sentences.len(), 2);
        let words = [
            "Red", "blue", "green", "Yellow", "purple", "orange", ".", "which", "word",
        ];
        let mut table = WordVectorTable::new(4);
        let mut rng = RngStream::new(7);
        for w in words {
            let vec: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            table.insert(w, vec);
        }
        let dims = ModelDims {
            word_dim: 4,
            hidden: 3,
            depth: 1,
        };
        let model = Model::init(dims, table, Normalization::Global, 8, &mut rng).unwrap();
        let question: Vec<String> = ["which", "word"].iter().map(|s| s.to_string()).collect();
        let pred = model
            .predict(&question, &document.token_texts())
            .unwrap();
        let gold_text = document.span_text(pred.answer).unwrap().to_string();
        let example = QaExample {
            id: "perfect".into(),
            document,
            question,
            gold_text: gold_text.clone(),
            gold: pred.answer,
            all_answers: vec![gold_text],
        };
        (model, example)
    }

    /// Variant of the perfect example whose gold lives in the sentence the
    /// model did not pick and names a token outside the predicted span.
    fn disjoint_example(perfect: &QaExample) -> QaExample {
        let document = perfect.document.clone();
        let pred = perfect.gold;
        let other_sentence = 1 - pred.sentence;
        let lens = document.sentence_lens();
        // Pick a single-token gold in the other sentence whose text does not
        // appear in the predicted span.
        let predicted_text = normalize_answer(&perfect.gold_text);
        let gold_word = (0..lens[other_sentence])
            .find(|&j| {
                let t = document.span_text(AnswerTuple {
                    sentence: other_sentence,
                    start: j,
                    end: j,
                });
                t.is_some_and(|t| {
                    let n = normalize_answer(t);
                    !n.is_empty() && !predicted_text.contains(&n)
                })
            })
            .expect("some disjoint word exists");
        let gold = AnswerTuple {
            sentence: other_sentence,
            start: gold_word,
            end: gold_word,
        };
        let gold_text = document.span_text(gold).unwrap().to_string();
        QaExample {
            id: "disjoint".into(),
            document,
            question: perfect.question.clone(),
            gold_text: gold_text.clone(),
            gold,
            all_answers: vec![gold_text],
        }
    }

    #[test]
    fn perfect_prediction_scores_one_hundred_everywhere() {
        let (model, example) = model_and_perfect_example();
        let (rows, metrics) = evaluate(&model, &[example]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(metrics.exact_match, 100.0);
        assert_eq!(metrics.f1, 100.0);
        assert_eq!(metrics.sentence_accuracy, 100.0);
        assert_eq!(metrics.count, 1);
    }

    #[test]
    fn one_perfect_and_one_disjoint_example_average_to_fifty() {
        let (model, perfect) = model_and_perfect_example();
        let wrong = disjoint_example(&perfect);
        let (rows, metrics) = evaluate(&model, &[perfect, wrong]).unwrap();
        assert_eq!(rows[0].em, 1.0);
        assert_eq!(rows[1].em, 0.0);
        assert_eq!(rows[1].f1, 0.0);
        assert_eq!(rows[1].sentence, 0.0);
        assert_eq!(metrics.exact_match, 50.0);
        assert_eq!(metrics.f1, 50.0);
        assert_eq!(metrics.sentence_accuracy, 50.0);
    }

    #[test]
    fn dataset_metrics_are_the_mean_of_single_example_runs() {
        let (model, perfect) = model_and_perfect_example();
        let wrong = disjoint_example(&perfect);
        let (_, alone_a) = evaluate(&model, std::slice::from_ref(&perfect)).unwrap();
        let (_, alone_b) = evaluate(&model, std::slice::from_ref(&wrong)).unwrap();
        let (_, both) = evaluate(&model, &[perfect, wrong]).unwrap();
        assert!((both.exact_match - (alone_a.exact_match + alone_b.exact_match) / 2.0).abs() < 1e-12);
        assert!((both.f1 - (alone_a.f1 + alone_b.f1) / 2.0).abs() < 1e-12);
        assert!(
            (both.sentence_accuracy - (alone_a.sentence_accuracy + alone_b.sentence_accuracy) / 2.0)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (model, perfect) = model_and_perfect_example();
        let wrong = disjoint_example(&perfect);
        let examples = [perfect, wrong];
        let (rows_a, metrics_a) = evaluate(&model, &examples).unwrap();
        let (rows_b, metrics_b) = evaluate(&model, &examples).unwrap();
        assert_eq!(rows_a, rows_b);
        assert_eq!(metrics_a, metrics_b);
    }

    #[test]
    fn evaluating_nothing_is_an_error() {
        let (model, _) = model_and_perfect_example();
        assert!(matches!(
            evaluate(&model, &[]),
            Err(EvalError::EmptyDataset)
        ));
    }
}
