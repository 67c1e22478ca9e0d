//! Answer selection as a three-stage search: pick a sentence, then a start
//! word inside it, then an end word from the start onward.
//!
//! Raw stage scores φ_sent, φ_sw, φ_ew add up to a span score. Local
//! normalization turns each stage into its own softmax; global normalization
//! exponentiates the total span score against a partition function over all
//! spans, approximated during training by the candidates a beam keeps. When
//! the gold path drops off the beam mid-search, the loss is taken over that
//! stage's beam right away (an early update) instead of finishing the
//! decode.
//!
//! End-word scores are the expensive stage — each surviving (sentence,
//! start) pair gets a fresh bidirectional pass over the tail of the
//! sentence — so they are computed only for pairs still on the beam, and an
//! instrumentation counter enforces that.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{
    encode_document, encode_question, DocumentEncoding, DropoutPlan, EncoderError, ModelDims,
    WordVectorTable,
};
use crate::tensor::{
    affine, bi_lstm_stack, define_lstm, log_sum_exp_slice, lstm_params, BiLstmLayer, Graph, Init,
    Parameter, ParameterStore, RngStream, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("sentence index {index} out of range for {count} sentences")]
    SentenceOutOfRange { index: usize, count: usize },
    #[error("word index {index} out of range in sentence {sentence} of length {len}")]
    WordOutOfRange {
        sentence: usize,
        index: usize,
        len: usize,
    },
    #[error("invalid answer tuple ({0}, {1}, {2}): {3}")]
    InvalidTuple(usize, usize, usize, String),
    #[error("empty document")]
    EmptyDocument,
    #[error("beam width must be at least 1")]
    ZeroWidth,
    #[error("candidate ({0}, {1}, {2}) is not on the final beam")]
    NotOnBeam(usize, usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, SearchError>;

/// A complete answer: sentence, start word, end word (inclusive), all
/// 0-based with the words indexed within the sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnswerTuple {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

impl AnswerTuple {
    pub fn new(sentence: usize, start: usize, end: usize) -> Self {
        Self {
            sentence,
            start,
            end,
        }
    }

    /// Check membership in the valid-answer set of a document with the given
    /// sentence lengths.
    pub fn validate(&self, lens: &[usize]) -> Result<()> {
        if self.sentence >= lens.len() {
            return Err(SearchError::InvalidTuple(
                self.sentence,
                self.start,
                self.end,
                format!("document has {} sentences", lens.len()),
            ));
        }
        let m = lens[self.sentence];
        if self.start > self.end || self.end >= m {
            return Err(SearchError::InvalidTuple(
                self.sentence,
                self.start,
                self.end,
                format!("sentence {} has {} words", self.sentence, m),
            ));
        }
        Ok(())
    }
}

/// Every within-sentence span of a document, in (i, j, k) order.
pub fn all_answers(lens: &[usize]) -> Vec<AnswerTuple> {
    let mut out = Vec::new();
    for (i, &m) in lens.iter().enumerate() {
        for j in 0..m {
            for k in j..m {
                out.push(AnswerTuple::new(i, j, k));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SentenceChosen,
    StartChosen,
    Complete,
}

/// A (possibly partial) path through the three decisions, carrying its
/// cumulative raw score both as a float and as a graph node.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub stage: Stage,
    pub sentence: usize,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub score: f64,
    pub var: Var,
    pub gold_prefix: bool,
}

impl Candidate {
    fn key(&self) -> (usize, usize, usize) {
        (
            self.sentence,
            self.start.unwrap_or(0),
            self.end.unwrap_or(0),
        )
    }

    pub fn tuple(&self) -> Option<AnswerTuple> {
        match (self.stage, self.start, self.end) {
            (Stage::Complete, Some(j), Some(k)) => Some(AnswerTuple::new(self.sentence, j, k)),
            _ => None,
        }
    }
}

/// Candidates kept after one pruning step, sorted by score descending with
/// lexicographic (i, j, k) as the deterministic tie-break.
#[derive(Debug, Clone)]
pub struct Beam {
    pub width: usize,
    pub candidates: Vec<Candidate>,
}

impl Beam {
    pub fn from_pool(width: usize, mut pool: Vec<Candidate>) -> Self {
        pool.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.key().cmp(&b.key()))
        });
        pool.truncate(width);
        Self {
            width,
            candidates: pool,
        }
    }

    pub fn top(&self) -> Option<&Candidate> {
        self.candidates.first()
    }

    pub fn holds_gold_prefix(&self) -> bool {
        self.candidates.iter().any(|c| c.gold_prefix)
    }
}

/// Per-stage score provider. Implementations may cache; `end_scores` must
/// only ever be invoked for (sentence, start) pairs the caller still cares
/// about, and `end_invocations` reports how many distinct pairs were
/// actually computed.
pub trait StageScorer {
    fn graph(&self) -> &Graph;
    fn num_sentences(&self) -> usize;
    fn sentence_len(&self, sentence: usize) -> usize;
    /// φ_sent per sentence.
    fn sentence_scores(&mut self) -> Result<Vec<Var>>;
    /// φ_sw per word of one sentence.
    fn start_scores(&mut self, sentence: usize) -> Result<Vec<Var>>;
    /// φ_ew per end word k = start..sentence length.
    fn end_scores(&mut self, sentence: usize, start: usize) -> Result<Vec<Var>>;
    fn end_invocations(&self) -> usize;

    fn sentence_lens(&self) -> Vec<usize> {
        (0..self.num_sentences())
            .map(|i| self.sentence_len(i))
            .collect()
    }

    fn check_sentence(&self, sentence: usize) -> Result<()> {
        if sentence >= self.num_sentences() {
            return Err(SearchError::SentenceOutOfRange {
                index: sentence,
                count: self.num_sentences(),
            });
        }
        Ok(())
    }

    fn check_word(&self, sentence: usize, index: usize) -> Result<()> {
        self.check_sentence(sentence)?;
        let len = self.sentence_len(sentence);
        if index >= len {
            return Err(SearchError::WordOutOfRange {
                sentence,
                index,
                len,
            });
        }
        Ok(())
    }
}

/// Register the scoring-head parameters: one fully connected layer per
/// stage plus the end-stage Bi-LSTM.
pub fn define_scorer_params(
    store: &mut ParameterStore,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> crate::tensor::Result<()> {
    let h = dims.hidden;
    store.define("score_sent/w", 2 * h, 1, Init::Glorot, rng)?;
    store.define("score_sent/b", 1, 1, Init::Zeros, rng)?;
    store.define("score_start/w", 2 * h, 1, Init::Glorot, rng)?;
    store.define("score_start/b", 1, 1, Init::Zeros, rng)?;
    define_lstm(store, "end_lstm/fwd", 2 * h, h, rng)?;
    define_lstm(store, "end_lstm/bwd", 2 * h, h, rng)?;
    store.define("score_end/w", 2 * h, 1, Init::Glorot, rng)?;
    store.define("score_end/b", 1, 1, Init::Zeros, rng)
}

/// Register every parameter of the full model.
pub fn define_model_params(
    store: &mut ParameterStore,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    crate::encoders::define_encoder_params(store, dims, rng)?;
    define_scorer_params(store, dims, rng)?;
    Ok(())
}

/// Scores driven by the document encoder and the scoring heads.
pub struct NeuralScorer<'a> {
    g: &'a Graph,
    store: &'a ParameterStore,
    enc: DocumentEncoding,
    drop: DropoutPlan,
    rng: RngStream,
    hidden: usize,
    sent_cache: Option<Vec<Var>>,
    start_cache: Vec<Option<Vec<Var>>>,
    end_cache: HashMap<(usize, usize), Vec<Var>>,
    end_calls: usize,
}

impl<'a> NeuralScorer<'a> {
    pub fn new(
        g: &'a Graph,
        store: &'a ParameterStore,
        enc: DocumentEncoding,
        drop: DropoutPlan,
        rng: RngStream,
        hidden: usize,
    ) -> Self {
        let n = enc.states.len();
        Self {
            g,
            store,
            enc,
            drop,
            rng,
            hidden,
            sent_cache: None,
            start_cache: vec![None; n],
            end_cache: HashMap::new(),
            end_calls: 0,
        }
    }

    pub fn encoding(&self) -> &DocumentEncoding {
        &self.enc
    }

    fn fc(&mut self, input: Var, w_name: &str, b_name: &str) -> Result<Var> {
        let x = self
            .g
            .dropout(input, self.drop.fully_connected, &mut self.rng, self.drop.training)?;
        let w = self.g.param(self.store, w_name)?;
        let b = self.g.param(self.store, b_name)?;
        Ok(affine(self.g, x, w, b)?)
    }
}

impl StageScorer for NeuralScorer<'_> {
    fn graph(&self) -> &Graph {
        self.g
    }

    fn num_sentences(&self) -> usize {
        self.enc.states.len()
    }

    fn sentence_len(&self, sentence: usize) -> usize {
        self.enc.states[sentence].len()
    }

    fn sentence_scores(&mut self) -> Result<Vec<Var>> {
        if let Some(cached) = &self.sent_cache {
            return Ok(cached.clone());
        }
        let g = self.g;
        let mut scores = Vec::with_capacity(self.num_sentences());
        for i in 0..self.num_sentences() {
            let first_bwd = self.enc.states[i][0].1;
            let last_fwd = self.enc.states[i][self.sentence_len(i) - 1].0;
            let rep = g.concat_cols(&[first_bwd, last_fwd])?;
            scores.push(self.fc(rep, "score_sent/w", "score_sent/b")?);
        }
        self.sent_cache = Some(scores.clone());
        Ok(scores)
    }

    fn start_scores(&mut self, sentence: usize) -> Result<Vec<Var>> {
        self.check_sentence(sentence)?;
        if let Some(cached) = &self.start_cache[sentence] {
            return Ok(cached.clone());
        }
        let g = self.g;
        let mut scores = Vec::with_capacity(self.sentence_len(sentence));
        for j in 0..self.sentence_len(sentence) {
            let (f, b) = self.enc.states[sentence][j];
            let rep = g.concat_cols(&[f, b])?;
            scores.push(self.fc(rep, "score_start/w", "score_start/b")?);
        }
        self.start_cache[sentence] = Some(scores.clone());
        Ok(scores)
    }

    fn end_scores(&mut self, sentence: usize, start: usize) -> Result<Vec<Var>> {
        self.check_word(sentence, start)?;
        if let Some(cached) = self.end_cache.get(&(sentence, start)) {
            return Ok(cached.clone());
        }
        self.end_calls += 1;
        let g = self.g;
        let tail: Vec<Var> = self.enc.states[sentence][start..]
            .iter()
            .map(|&(f, b)| g.concat_cols(&[f, b]))
            .collect::<crate::tensor::Result<_>>()?;
        let layer = BiLstmLayer {
            fwd: lstm_params(g, self.store, "end_lstm/fwd", self.hidden)?,
            bwd: lstm_params(g, self.store, "end_lstm/bwd", self.hidden)?,
        };
        let states = bi_lstm_stack(
            g,
            &tail,
            &[layer],
            self.drop.recurrent,
            &mut self.rng,
            self.drop.training,
        )?;
        let mut scores = Vec::with_capacity(states.len());
        for (f, b) in states {
            let rep = g.concat_cols(&[f, b])?;
            scores.push(self.fc(rep, "score_end/w", "score_end/b")?);
        }
        self.end_cache.insert((sentence, start), scores.clone());
        Ok(scores)
    }

    fn end_invocations(&self) -> usize {
        self.end_calls
    }
}

/// Scores read straight out of parameter tables named `sent`, `start/{i}`,
/// and `end/{i}/{j}`. Gives tests and fixtures exact control over every φ
/// while keeping real gradient flow into the tables.
pub struct TabularScorer<'a> {
    g: &'a Graph,
    store: &'a ParameterStore,
    lens: Vec<usize>,
    end_calls: usize,
}

impl<'a> TabularScorer<'a> {
    pub fn new(g: &'a Graph, store: &'a ParameterStore, lens: Vec<usize>) -> Self {
        Self {
            g,
            store,
            lens,
            end_calls: 0,
        }
    }
}

/// Build the parameter tables a [`TabularScorer`] reads. `ends[i][j]` holds
/// the end scores for spans starting at word j of sentence i.
pub fn tabular_store(
    sent: &[f64],
    starts: &[Vec<f64>],
    ends: &[Vec<Vec<f64>>],
) -> ParameterStore {
    fn raw(values: Vec<f64>) -> Parameter {
        let n = values.len();
        Parameter {
            rows: 1,
            cols: n,
            values,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            recurrent: false,
        }
    }
    let mut store = ParameterStore::new();
    store.insert_raw("sent", raw(sent.to_vec())).unwrap();
    for (i, s) in starts.iter().enumerate() {
        store.insert_raw(&format!("start/{i}"), raw(s.clone())).unwrap();
    }
    for (i, per_start) in ends.iter().enumerate() {
        for (j, e) in per_start.iter().enumerate() {
            store
                .insert_raw(&format!("end/{i}/{j}"), raw(e.clone()))
                .unwrap();
        }
    }
    store
}

impl StageScorer for TabularScorer<'_> {
    fn graph(&self) -> &Graph {
        self.g
    }

    fn num_sentences(&self) -> usize {
        self.lens.len()
    }

    fn sentence_len(&self, sentence: usize) -> usize {
        self.lens[sentence]
    }

    fn sentence_scores(&mut self) -> Result<Vec<Var>> {
        let table = self.g.param(self.store, "sent")?;
        (0..self.lens.len())
            .map(|i| Ok(self.g.slice_cols(table, i, 1)?))
            .collect()
    }

    fn start_scores(&mut self, sentence: usize) -> Result<Vec<Var>> {
        self.check_sentence(sentence)?;
        let table = self.g.param(self.store, &format!("start/{sentence}"))?;
        (0..self.lens[sentence])
            .map(|j| Ok(self.g.slice_cols(table, j, 1)?))
            .collect()
    }

    fn end_scores(&mut self, sentence: usize, start: usize) -> Result<Vec<Var>> {
        self.check_word(sentence, start)?;
        self.end_calls += 1;
        let table = self
            .g
            .param(self.store, &format!("end/{sentence}/{start}"))?;
        (0..self.lens[sentence] - start)
            .map(|o| Ok(self.g.slice_cols(table, o, 1)?))
            .collect()
    }

    fn end_invocations(&self) -> usize {
        self.end_calls
    }
}

/// Everything one staged decode produced: the pruned beam after each stage,
/// the gold path's candidate at each stage it was expanded, and where (if
/// anywhere) the gold dropped out.
pub struct DecodeOutcome {
    pub stage_beams: Vec<Beam>,
    pub gold_at_stage: Vec<Option<Candidate>>,
    /// First stage (0-based) whose beam lost the gold prefix.
    pub fell_at: Option<usize>,
    pub end_calls: usize,
}

impl DecodeOutcome {
    pub fn final_beam(&self) -> &Beam {
        self.stage_beams.last().expect("decode ran at least one stage")
    }

    pub fn top(&self) -> Option<&Candidate> {
        self.final_beam().top()
    }
}

/// Staged beam search. With `gold` given, tracks the gold path and stops at
/// the stage where it falls off the beam (early-update semantics); without
/// it, runs all three stages.
pub fn beam_decode<S: StageScorer>(
    scorer: &mut S,
    width: usize,
    gold: Option<AnswerTuple>,
) -> Result<DecodeOutcome> {
    if width == 0 {
        return Err(SearchError::ZeroWidth);
    }
    if scorer.num_sentences() == 0 {
        return Err(SearchError::EmptyDocument);
    }
    if let Some(a) = gold {
        a.validate(&scorer.sentence_lens())?;
    }

    let mut stage_beams = Vec::with_capacity(3);
    let mut gold_at_stage = Vec::with_capacity(3);
    let mut fell_at = None;

    // stage 1: sentences
    let sent_scores = scorer.sentence_scores()?;
    let mut pool = Vec::with_capacity(sent_scores.len());
    for (i, &var) in sent_scores.iter().enumerate() {
        pool.push(Candidate {
            stage: Stage::SentenceChosen,
            sentence: i,
            start: None,
            end: None,
            score: scorer.graph().scalar_value(var),
            var,
            gold_prefix: gold.map(|a| a.sentence == i).unwrap_or(false),
        });
    }
    gold_at_stage.push(pool.iter().find(|c| c.gold_prefix).copied());
    let beam = Beam::from_pool(width, pool);
    let lost = gold.is_some() && !beam.holds_gold_prefix();
    stage_beams.push(beam);
    if lost {
        fell_at = Some(0);
        return Ok(DecodeOutcome {
            stage_beams,
            gold_at_stage,
            fell_at,
            end_calls: scorer.end_invocations(),
        });
    }

    // stage 2: start words within surviving sentences
    let mut pool = Vec::new();
    for c in stage_beams[0].candidates.clone() {
        let starts = scorer.start_scores(c.sentence)?;
        for (j, &s_var) in starts.iter().enumerate() {
            let var = scorer.graph().add(c.var, s_var)?;
            pool.push(Candidate {
                stage: Stage::StartChosen,
                sentence: c.sentence,
                start: Some(j),
                end: None,
                score: scorer.graph().scalar_value(var),
                var,
                gold_prefix: c.gold_prefix
                    && gold.map(|a| a.start == j).unwrap_or(false),
            });
        }
    }
    gold_at_stage.push(pool.iter().find(|c| c.gold_prefix).copied());
    let beam = Beam::from_pool(width, pool);
    let lost = gold.is_some() && !beam.holds_gold_prefix();
    stage_beams.push(beam);
    if lost {
        fell_at = Some(1);
        return Ok(DecodeOutcome {
            stage_beams,
            gold_at_stage,
            fell_at,
            end_calls: scorer.end_invocations(),
        });
    }

    // stage 3: end words, scored only for surviving (sentence, start) pairs
    let mut pool = Vec::new();
    for c in stage_beams[1].candidates.clone() {
        let start = c.start.expect("stage-2 candidate has a start");
        let ends = scorer.end_scores(c.sentence, start)?;
        for (offset, &e_var) in ends.iter().enumerate() {
            let k = start + offset;
            let var = scorer.graph().add(c.var, e_var)?;
            pool.push(Candidate {
                stage: Stage::Complete,
                sentence: c.sentence,
                start: Some(start),
                end: Some(k),
                score: scorer.graph().scalar_value(var),
                var,
                gold_prefix: c.gold_prefix && gold.map(|a| a.end == k).unwrap_or(false),
            });
        }
    }
    gold_at_stage.push(pool.iter().find(|c| c.gold_prefix).copied());
    let beam = Beam::from_pool(width, pool);
    if gold.is_some() && !beam.holds_gold_prefix() {
        fell_at = Some(2);
    }
    stage_beams.push(beam);

    Ok(DecodeOutcome {
        stage_beams,
        gold_at_stage,
        fell_at,
        end_calls: scorer.end_invocations(),
    })
}

/// Exact per-stage log probability of `a` under local normalization:
/// log P(i) + log P(j|i) + log P(k|i,j), each factor a softmax over its
/// stage. Returns the total as a graph node plus the cumulative log
/// probability after each stage.
pub fn local_log_prob<S: StageScorer>(
    scorer: &mut S,
    a: AnswerTuple,
) -> Result<(Var, Vec<f64>)> {
    a.validate(&scorer.sentence_lens())?;

    fn log_softmax_at(g: &Graph, scores: &[Var], idx: usize) -> Result<Var> {
        let row = g.concat_cols(scores)?;
        let lse = g.log_sum_exp(row)?;
        Ok(g.sub(scores[idx], lse)?)
    }

    let sent = scorer.sentence_scores()?;
    let starts = scorer.start_scores(a.sentence)?;
    let ends = scorer.end_scores(a.sentence, a.start)?;

    let g = scorer.graph();
    let f1 = log_softmax_at(g, &sent, a.sentence)?;
    let f2 = log_softmax_at(g, &starts, a.start)?;
    let f3 = log_softmax_at(g, &ends, a.end - a.start)?;
    let partial12 = g.add(f1, f2)?;
    let total = g.add(partial12, f3)?;
    let cumulative = vec![
        g.scalar_value(f1),
        g.scalar_value(partial12),
        g.scalar_value(total),
    ];
    Ok((total, cumulative))
}

/// Raw span score φ_sent + φ_sw + φ_ew of one tuple, recomputed from the
/// stage scorers.
pub fn span_score<S: StageScorer>(scorer: &mut S, a: AnswerTuple) -> Result<Var> {
    a.validate(&scorer.sentence_lens())?;
    let sent = scorer.sentence_scores()?[a.sentence];
    let start = scorer.start_scores(a.sentence)?[a.start];
    let end = scorer.end_scores(a.sentence, a.start)?[a.end - a.start];
    let g = scorer.graph();
    let partial = g.add(sent, start)?;
    Ok(g.add(partial, end)?)
}

/// Exact globally normalized log probabilities of every span, by full
/// enumeration. The expensive oracle path: ignores the conditional-
/// computation contract by design.
pub fn exact_global_log_probs<S: StageScorer>(
    scorer: &mut S,
) -> Result<Vec<(AnswerTuple, f64)>> {
    let answers = all_answers(&scorer.sentence_lens());
    if answers.is_empty() {
        return Err(SearchError::EmptyDocument);
    }
    let mut scores = Vec::with_capacity(answers.len());
    for &a in &answers {
        let v = span_score(scorer, a)?;
        scores.push(scorer.graph().scalar_value(v));
    }
    let log_z = log_sum_exp_slice(&scores);
    Ok(answers
        .into_iter()
        .zip(scores)
        .map(|(a, s)| (a, s - log_z))
        .collect())
}

/// Globally normalized log probability of `a` against the final beam's
/// partition. Errors if `a` is not on the beam.
pub fn beam_global_log_prob(outcome: &DecodeOutcome, a: AnswerTuple) -> Result<f64> {
    let beam = outcome.final_beam();
    let cand = beam
        .candidates
        .iter()
        .find(|c| c.tuple() == Some(a))
        .ok_or(SearchError::NotOnBeam(a.sentence, a.start, a.end))?;
    let scores: Vec<f64> = beam.candidates.iter().map(|c| c.score).collect();
    Ok(cand.score - log_sum_exp_slice(&scores))
}

/// The training loss for one decoded example under global normalization.
///
/// If the gold fell off at stage t, this is the stage-t partial objective:
/// the gold's cumulative score against the stage-t beam plus the gold
/// itself. If the gold reached the final beam, it is the full objective over
/// the final beam. Either way the gold's score is inside the partition, so
/// the loss is non-negative.
pub fn global_loss(g: &Graph, outcome: &DecodeOutcome) -> Result<Var> {
    let stage = outcome.fell_at.unwrap_or(outcome.stage_beams.len() - 1);
    let beam = &outcome.stage_beams[stage];
    let gold = outcome.gold_at_stage[stage]
        .as_ref()
        .expect("decode with gold tracks the gold candidate at every expanded stage");

    let mut vars: Vec<Var> = beam.candidates.iter().map(|c| c.var).collect();
    if !beam.candidates.iter().any(|c| c.gold_prefix) {
        vars.push(gold.var);
    }
    let row = g.concat_cols(&vars)?;
    let log_z = g.log_sum_exp(row)?;
    Ok(g.sub(log_z, gold.var)?)
}

/// How one example is scored against its competition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Normalization {
    Local,
    Global,
}

impl std::str::FromStr for Normalization {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "local" => Ok(Normalization::Local),
            "global" => Ok(Normalization::Global),
            other => Err(format!("unknown normalization {other:?} (local|global)")),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::Local => "local",
            Normalization::Global => "global",
        })
    }
}

/// One training example: a tokenized document, a question, and the gold
/// span.
#[derive(Debug, Clone)]
pub struct SpanExample {
    pub question: Vec<String>,
    pub sentences: Vec<Vec<String>>,
    pub gold: AnswerTuple,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub answer: AnswerTuple,
    pub probability: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    /// Stage (0-based) at which an early update fired, if any.
    pub early_stage: Option<usize>,
    pub end_calls: usize,
}

/// The full reader: parameters plus the word-vector table and the search
/// configuration.
pub struct Model {
    pub dims: ModelDims,
    pub store: ParameterStore,
    pub table: WordVectorTable,
    pub normalization: Normalization,
    pub beam_width: usize,
    pub dropout_recurrent: f64,
    pub dropout_fc: f64,
}

impl Model {
    pub fn init(
        dims: ModelDims,
        table: WordVectorTable,
        normalization: Normalization,
        beam_width: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut store = ParameterStore::new();
        define_model_params(&mut store, &dims, rng)?;
        Ok(Self {
            dims,
            store,
            table,
            normalization,
            beam_width,
            dropout_recurrent: 0.3,
            dropout_fc: 0.4,
        })
    }

    fn drop_plan(&self, training: bool) -> DropoutPlan {
        if training {
            DropoutPlan::training(self.dropout_recurrent, self.dropout_fc)
        } else {
            DropoutPlan::inference()
        }
    }

    /// Accumulate gradients for one example; the caller applies the
    /// optimizer step per batch.
    pub fn train_step(&mut self, example: &SpanExample, rng: &mut RngStream) -> Result<StepOutcome> {
        let lens: Vec<usize> = example.sentences.iter().map(|s| s.len()).collect();
        example.gold.validate(&lens)?;
        let g = Graph::new();
        let drop = self.drop_plan(true);
        let (loss_var, early_stage, end_calls) = {
            let mut enc_rng = rng.fork("encode");
            let q_enc = encode_question(
                &g,
                &example.question,
                &self.table,
                &self.store,
                &self.dims,
                &drop,
                &mut enc_rng,
            )?;
            let enc = encode_document(
                &g,
                &example.sentences,
                &q_enc,
                &self.table,
                &self.store,
                &self.dims,
                &drop,
                &mut enc_rng,
            )?;
            let mut scorer = NeuralScorer::new(
                &g,
                &self.store,
                enc,
                drop,
                rng.fork("score"),
                self.dims.hidden,
            );
            match self.normalization {
                Normalization::Global => {
                    let outcome = beam_decode(&mut scorer, self.beam_width, Some(example.gold))?;
                    let loss = global_loss(&g, &outcome)?;
                    (loss, outcome.fell_at, outcome.end_calls)
                }
                Normalization::Local => {
                    let (log_p, _) = local_log_prob(&mut scorer, example.gold)?;
                    (g.scale(log_p, -1.0), None, scorer.end_invocations())
                }
            }
        };
        g.backward(loss_var)?;
        g.flush_param_grads(&mut self.store)?;
        Ok(StepOutcome {
            loss: g.scalar_value(loss_var),
            early_stage,
            end_calls,
        })
    }

    /// Run inference decoding at an explicit beam width, returning the full
    /// outcome (stage beams, scores, end-scorer instrumentation).
    pub fn decode(
        &self,
        question: &[String],
        sentences: &[Vec<String>],
        width: usize,
    ) -> Result<DecodeOutcome> {
        let g = Graph::new();
        let drop = self.drop_plan(false);
        let mut rng = RngStream::new(0);
        let q_enc = encode_question(
            &g,
            question,
            &self.table,
            &self.store,
            &self.dims,
            &drop,
            &mut rng,
        )?;
        let enc = encode_document(
            &g,
            sentences,
            &q_enc,
            &self.table,
            &self.store,
            &self.dims,
            &drop,
            &mut rng,
        )?;
        let mut scorer = NeuralScorer::new(
            &g,
            &self.store,
            enc,
            drop,
            RngStream::new(0),
            self.dims.hidden,
        );
        match self.normalization {
            Normalization::Global => beam_decode(&mut scorer, width, None),
            Normalization::Local => locally_normalized_decode(&mut scorer, width),
        }
    }

    /// Decode the best span and its beam-normalized probability.
    pub fn predict(
        &self,
        question: &[String],
        sentences: &[Vec<String>],
    ) -> Result<Prediction> {
        let outcome = self.decode(question, sentences, self.beam_width)?;
        let top = outcome
            .top()
            .copied()
            .ok_or(SearchError::EmptyDocument)?;
        let scores: Vec<f64> = outcome
            .final_beam()
            .candidates
            .iter()
            .map(|c| c.score)
            .collect();
        let probability = (top.score - log_sum_exp_slice(&scores)).exp();
        Ok(Prediction {
            answer: top.tuple().expect("final beam holds complete candidates"),
            probability,
        })
    }
}

/// Beam search over locally normalized scores: each stage's scores are
/// turned into log softmax terms before accumulation, so cumulative scores
/// are genuine log path probabilities.
pub fn locally_normalized_decode<S: StageScorer>(
    scorer: &mut S,
    width: usize,
) -> Result<DecodeOutcome> {
    let mut local = LocalizedScorer {
        inner: scorer,
        cache: HashMap::new(),
    };
    beam_decode(&mut local, width, None)
}

/// Adapter that log-softmaxes each stage's scores in place.
struct LocalizedScorer<'a, S: StageScorer> {
    inner: &'a mut S,
    cache: HashMap<(usize, usize, usize), Vec<Var>>,
}

impl<S: StageScorer> LocalizedScorer<'_, S> {
    fn log_softmax(&self, scores: Vec<Var>) -> Result<Vec<Var>> {
        let g = self.inner.graph();
        let row = g.concat_cols(&scores)?;
        let lse = g.log_sum_exp(row)?;
        scores
            .into_iter()
            .map(|s| Ok(g.sub(s, lse)?))
            .collect()
    }
}

impl<S: StageScorer> StageScorer for LocalizedScorer<'_, S> {
    fn graph(&self) -> &Graph {
        self.inner.graph()
    }

    fn num_sentences(&self) -> usize {
        self.inner.num_sentences()
    }

    fn sentence_len(&self, sentence: usize) -> usize {
        self.inner.sentence_len(sentence)
    }

    fn sentence_scores(&mut self) -> Result<Vec<Var>> {
        if let Some(c) = self.cache.get(&(0, 0, 0)) {
            return Ok(c.clone());
        }
        let raw = self.inner.sentence_scores()?;
        let out = self.log_softmax(raw)?;
        self.cache.insert((0, 0, 0), out.clone());
        Ok(out)
    }

    fn start_scores(&mut self, sentence: usize) -> Result<Vec<Var>> {
        if let Some(c) = self.cache.get(&(1, sentence, 0)) {
            return Ok(c.clone());
        }
        let raw = self.inner.start_scores(sentence)?;
        let out = self.log_softmax(raw)?;
        self.cache.insert((1, sentence, 0), out.clone());
        Ok(out)
    }

    fn end_scores(&mut self, sentence: usize, start: usize) -> Result<Vec<Var>> {
        if let Some(c) = self.cache.get(&(2, sentence, start)) {
            return Ok(c.clone());
        }
        let raw = self.inner.end_scores(sentence, start)?;
        let out = self.log_softmax(raw)?;
        self.cache.insert((2, sentence, start), out.clone());
        Ok(out)
    }

    fn end_invocations(&self) -> usize {
        self.inner.end_invocations()
    }
}
