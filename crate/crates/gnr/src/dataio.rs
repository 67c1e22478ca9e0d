//! Corpus ingestion: tokenization, sentence segmentation, SQuAD-format
//! loading, and alignment of character-offset answers to (sentence, start,
//! end) tuples.
//!
//! The tokenizer is rule-based and deterministic: whitespace splits, then
//! leading and trailing punctuation peel off as single-character tokens
//! while internal hyphens and apostrophes stay attached. Sentences end
//! after `.`, `!`, or `?` unless the next token starts lowercase or the
//! period follows a known abbreviation. Gold answers arrive as character
//! offsets; alignment expands them to covering tokens, rejects spans that
//! cross sentence boundaries, and the loader re-checks every example's
//! invariants instead of trusting the alignment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::normalize_answer;
use crate::search::{AnswerTuple, SpanExample};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: malformed example record: {source}")]
    CacheLine {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("document invariant violated: {0}")]
    BadDocument(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Why one answer could not be aligned to a token span.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlignError {
    #[error("answer start {char_start} outside text of {text_chars} characters")]
    OutOfBounds {
        char_start: usize,
        text_chars: usize,
    },
    #[error("answer span crosses a sentence boundary")]
    CrossSentence,
    #[error("no tokens cover the answer span")]
    NoCoveringTokens,
    #[error("answer text {answer:?} not found in covered span {covered:?}")]
    TextMismatch { answer: String, covered: String },
}

impl AlignError {
    /// Stable slug used as the drop-reason key in ingestion reports.
    pub fn reason(&self) -> &'static str {
        match self {
            AlignError::OutOfBounds { .. } => "out-of-bounds",
            AlignError::CrossSentence => "cross-sentence",
            AlignError::NoCoveringTokens => "no-covering-tokens",
            AlignError::TextMismatch { .. } => "text-mismatch",
        }
    }
}

/// One token and its byte offset into the original text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
}

impl Token {
    pub fn end(&self) -> usize {
        self.start + self.text.len()
    }
}

/// A text split into sentences of offset-carrying tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDocument {
    pub text: String,
    pub sentences: Vec<Vec<Token>>,
}

impl TokenizedDocument {
    /// Tokenize and sentence-split `text` with the default abbreviations.
    pub fn from_text(text: &str) -> Self {
        Self::from_text_with(text, default_abbreviations())
    }

    pub fn from_text_with(text: &str, abbreviations: &BTreeSet<String>) -> Self {
        let tokens = tokenize(text);
        let sentences = split_sentences(tokens, abbreviations);
        Self {
            text: text.to_string(),
            sentences,
        }
    }

    pub fn sentence_lens(&self) -> Vec<usize> {
        self.sentences.iter().map(|s| s.len()).collect()
    }

    /// Token texts per sentence, the shape the encoders consume.
    pub fn token_texts(&self) -> Vec<Vec<String>> {
        self.sentences
            .iter()
            .map(|s| s.iter().map(|t| t.text.clone()).collect())
            .collect()
    }

    /// The original text under a token span, spacing preserved.
    pub fn span_text(&self, a: AnswerTuple) -> Option<&str> {
        let sentence = self.sentences.get(a.sentence)?;
        let first = sentence.get(a.start)?;
        let last = sentence.get(a.end)?;
        self.text.get(first.start..last.end())
    }

    /// Check every structural invariant: in-bounds strictly increasing
    /// offsets, substring equality, no empty tokens or sentences.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::BadDocument(msg));
        let mut prev_end = 0usize;
        for (i, sentence) in self.sentences.iter().enumerate() {
            if sentence.is_empty() {
                return bad(format!("sentence {i} is empty"));
            }
            for (j, tok) in sentence.iter().enumerate() {
                if tok.text.is_empty() {
                    return bad(format!("token {i}/{j} is empty"));
                }
                if tok.start < prev_end && !(i == 0 && j == 0) {
                    return bad(format!("token {i}/{j} offsets not increasing"));
                }
                match self.text.get(tok.start..tok.end()) {
                    Some(slice) if slice == tok.text => {}
                    _ => {
                        return bad(format!(
                            "token {i}/{j} {:?} does not match text at {}",
                            tok.text, tok.start
                        ))
                    }
                }
                prev_end = tok.end();
            }
        }
        Ok(())
    }
}

/// One ready-to-train question/document pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub document: TokenizedDocument,
    pub question: Vec<String>,
    /// The first listed gold answer, used for the training alignment.
    pub gold_text: String,
    pub gold: AnswerTuple,
    /// Every listed gold answer, kept for max-over-gold evaluation.
    pub all_answers: Vec<String>,
}

impl QaExample {
    pub fn to_span_example(&self) -> SpanExample {
        SpanExample {
            question: self.question.clone(),
            sentences: self.document.token_texts(),
            gold: self.gold,
        }
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}'
                | '\u{2026}' | '\u{00A1}' | '\u{00BF}' | '\u{00AB}' | '\u{00BB}'
        )
}

/// Whitespace split, then leading/trailing punctuation peeled into
/// single-character tokens. Internal punctuation stays attached.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut chunk_start = None;
    let mut iter = text.char_indices().peekable();
    while let Some((idx, c)) = iter.next() {
        if c.is_whitespace() {
            if let Some(start) = chunk_start.take() {
                split_chunk(text, start, idx, &mut tokens);
            }
        } else if chunk_start.is_none() {
            chunk_start = Some(idx);
        }
        if iter.peek().is_none() {
            if let Some(start) = chunk_start.take() {
                let end = idx + c.len_utf8();
                if !c.is_whitespace() {
                    split_chunk(text, start, end, &mut tokens);
                }
            }
        }
    }
    tokens
}

fn split_chunk(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let chunk = &text[start..end];
    let mut core_start = 0usize;
    let mut core_end = chunk.len();

    let mut leading = Vec::new();
    for (i, c) in chunk.char_indices() {
        if is_punct(c) {
            leading.push((start + i, c));
            core_start = i + c.len_utf8();
        } else {
            break;
        }
    }

    let mut trailing = Vec::new();
    if core_start < core_end {
        for (i, c) in chunk[core_start..].char_indices().rev() {
            let abs = core_start + i;
            if is_punct(c) && abs + c.len_utf8() == core_end {
                trailing.push((start + abs, c));
                core_end = abs;
            } else {
                break;
            }
        }
    }

    for (offset, c) in leading {
        out.push(Token {
            text: c.to_string(),
            start: offset,
        });
    }
    if core_start < core_end {
        out.push(Token {
            text: chunk[core_start..core_end].to_string(),
            start: start + core_start,
        });
    }
    for (offset, c) in trailing.into_iter().rev() {
        out.push(Token {
            text: c.to_string(),
            start: offset,
        });
    }
}

/// Words a period may follow without ending the sentence.
pub fn default_abbreviations() -> &'static BTreeSet<String> {
    use std::sync::OnceLock;
    static SET: OnceLock<BTreeSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        [
            "Mr", "Mrs", "Ms", "Dr", "Prof", "St", "Jr", "Sr", "Gen", "Rep", "Sen", "Gov",
            "Lt", "Col", "Sgt", "Capt", "Cmdr", "Adm", "Maj", "Rev", "Hon", "Fr", "Msgr",
            "Mt", "Ft", "Co", "Corp", "Inc", "Ltd", "Bros", "No", "Nos", "Vol", "Vols",
            "Fig", "Figs", "Eq", "Eqs", "Ch", "Sec", "Art", "pp", "ca", "cf", "eg", "ie",
            "etc", "vs", "viz", "al", "approx", "est",
        ]
        .into_iter()
        .map(str::to_string)
        .collect()
    })
}

/// Group a token stream into sentences. A boundary falls after `.`, `!`,
/// or `?` unless the next token starts with a lowercase letter or the
/// period belongs to a listed abbreviation.
pub fn split_sentences(tokens: Vec<Token>, abbreviations: &BTreeSet<String>) -> Vec<Vec<Token>> {
    let mut sentences = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    for idx in 0..tokens.len() {
        let is_terminal = matches!(tokens[idx].text.as_str(), "." | "!" | "?");
        let next_lowercase = tokens
            .get(idx + 1)
            .and_then(|t| t.text.chars().next())
            .map(|c| c.is_lowercase())
            .unwrap_or(false);
        let after_abbreviation = tokens[idx].text == "."
            && idx > 0
            && abbreviations.contains(tokens[idx - 1].text.as_str());
        current.push(tokens[idx].clone());
        let more_tokens = idx + 1 < tokens.len();
        if is_terminal && more_tokens && !next_lowercase && !after_abbreviation {
            sentences.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

/// Rejoin a string's whitespace-split words with single spaces.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Map a character-offset gold answer onto covering tokens.
///
/// All tokens overlapping the character range join the span; the span must
/// stay inside one sentence, and the covered text must contain the answer
/// text up to whitespace differences.
pub fn align_answer(
    doc: &TokenizedDocument,
    answer_text: &str,
    answer_char_start: usize,
) -> std::result::Result<AnswerTuple, AlignError> {
    let mut byte_start = None;
    let mut chars = 0usize;
    for (i, (b, _)) in doc.text.char_indices().enumerate() {
        chars = i + 1;
        if i == answer_char_start {
            byte_start = Some(b);
        }
    }
    let byte_start = byte_start.ok_or(AlignError::OutOfBounds {
        char_start: answer_char_start,
        text_chars: chars,
    })?;
    let answer_chars = answer_text.chars().count().max(1);
    let byte_end = doc.text[byte_start..]
        .char_indices()
        .nth(answer_chars)
        .map(|(b, _)| byte_start + b)
        .unwrap_or(doc.text.len());

    let mut first: Option<(usize, usize)> = None;
    let mut last: Option<(usize, usize)> = None;
    for (i, sentence) in doc.sentences.iter().enumerate() {
        for (j, tok) in sentence.iter().enumerate() {
            if tok.start < byte_end && tok.end() > byte_start {
                if first.is_none() {
                    first = Some((i, j));
                }
                last = Some((i, j));
            }
        }
    }
    let (first, last) = match (first, last) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(AlignError::NoCoveringTokens),
    };
    if first.0 != last.0 {
        return Err(AlignError::CrossSentence);
    }
    let tuple = AnswerTuple::new(first.0, first.1, last.1);
    let covered = doc
        .span_text(tuple)
        .expect("covering tokens lie inside the text");
    let covered_ws = collapse_whitespace(covered);
    let answer_ws = collapse_whitespace(answer_text);
    if !covered_ws.contains(&answer_ws) {
        return Err(AlignError::TextMismatch {
            answer: answer_ws,
            covered: covered_ws,
        });
    }
    Ok(tuple)
}

/// What ingestion loaded and what it had to drop, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub loaded: usize,
    pub dropped: BTreeMap<String, usize>,
}

impl IngestReport {
    fn drop_one(&mut self, reason: &str) {
        *self.dropped.entry(reason.to_string()).or_insert(0) += 1;
    }

    pub fn total_dropped(&self) -> usize {
        self.dropped.values().sum()
    }
}

#[derive(Deserialize)]
struct RawSquad {
    data: Vec<RawArticle>,
}

#[derive(Deserialize)]
struct RawArticle {
    #[allow(dead_code)]
    title: Option<String>,
    paragraphs: Vec<RawParagraph>,
}

#[derive(Deserialize)]
struct RawParagraph {
    context: String,
    qas: Vec<RawQa>,
}

#[derive(Deserialize)]
struct RawQa {
    question: String,
    id: String,
    answers: Vec<RawAnswer>,
}

#[derive(Deserialize)]
struct RawAnswer {
    text: String,
    answer_start: usize,
}

/// Load a SQuAD-format JSON file into aligned examples plus a report of
/// everything dropped along the way.
pub fn load_squad(path: &Path) -> Result<(Vec<QaExample>, IngestReport)> {
    let raw = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parsed: RawSquad = serde_json::from_str(&raw).map_err(|source| DataError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let mut examples = Vec::new();
    let mut report = IngestReport::default();
    for article in parsed.data {
        for paragraph in article.paragraphs {
            let document = TokenizedDocument::from_text(&paragraph.context);
            if document.sentences.is_empty() {
                for _ in &paragraph.qas {
                    report.drop_one("empty-context");
                }
                continue;
            }
            document.validate()?;
            for qa in paragraph.qas {
                match ingest_qa(&document, qa) {
                    Ok(example) => {
                        examples.push(example);
                        report.loaded += 1;
                    }
                    Err(reason) => report.drop_one(reason),
                }
            }
        }
    }
    Ok((examples, report))
}

fn ingest_qa(
    document: &TokenizedDocument,
    qa: RawQa,
) -> std::result::Result<QaExample, &'static str> {
    let question: Vec<String> = tokenize(&qa.question)
        .into_iter()
        .map(|t| t.text)
        .collect();
    if question.is_empty() {
        return Err("empty-question");
    }
    let first = qa.answers.first().ok_or("no-answers")?;
    let gold = align_answer(document, &first.text, first.answer_start)
        .map_err(|e| e.reason())?;
    // re-check the stated invariant rather than trusting the aligner: the
    // gold span's surface text must normalize equal to the answer text
    let span = document
        .span_text(gold)
        .expect("aligned tuple lies inside the document");
    if normalize_answer(span) != normalize_answer(&first.text) {
        return Err("gold-mismatch");
    }
    Ok(QaExample {
        id: qa.id,
        document: document.clone(),
        question,
        gold_text: first.text.clone(),
        gold,
        all_answers: qa.answers.into_iter().map(|a| a.text).collect(),
    })
}

/// Write examples as one JSON object per line.
pub fn save_examples(path: &Path, examples: &[QaExample]) -> Result<()> {
    use std::io::Write;
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

/// Read a file written by [`save_examples`], re-validating every document.
pub fn load_examples(path: &Path) -> Result<Vec<QaExample>> {
    let raw = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample = serde_json::from_str(line).map_err(|source| DataError::CacheLine {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        ex.document.validate()?;
        out.push(ex);
    }
    Ok(out)
}
