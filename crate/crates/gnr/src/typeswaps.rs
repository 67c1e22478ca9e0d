//! Training-data augmentation by typed surface swaps.
//!
//! A small knowledge base maps surface strings to type ids. Entities are
//! located by greedy longest-match over token n-grams (case-sensitive), plus
//! pattern rules for numbers (years, integers, decimals, month and weekday
//! names, ordinals, and number-unit quantities). Each distinct surface in an
//! example is rewritten to a uniformly sampled same-type variant; examples
//! whose question and answer both survive unchanged are rejected, and the
//! gold answer is realigned on the rewritten document.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::dataio::{collapse_whitespace, tokenize, QaExample, TokenizedDocument};
use crate::search::AnswerTuple;
use crate::tensor::RngStream;

#[derive(Debug, Error)]
pub enum TypeSwapError {
    #[error("failed to read knowledge base {path}: {source}")]
    KbIo {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed knowledge-base entry (expected \"surface<TAB>type\")")]
    KbMalformed { path: String, line: usize },
    #[error("no augmentable example found after {attempts} attempts")]
    NoMutableExamples { attempts: usize },
}

pub type Result<T> = std::result::Result<T, TypeSwapError>;

/// Why one candidate swap was not accepted. Rejections are expected during
/// sampling and never abort a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    /// Nothing in the example matched the inventory or the number rules.
    NoEntities,
    /// No planned replacement touched the question or the answer span.
    Unchanged,
    /// The gold answer could not be realigned on the rewritten document.
    AnswerLost(String),
}

impl RejectReason {
    pub fn slug(&self) -> &'static str {
        match self {
            RejectReason::NoEntities => "no-entities",
            RejectReason::Unchanged => "unchanged",
            RejectReason::AnswerLost(_) => "answer-lost",
        }
    }
}

/// Closed word lists for the number rules. Matching is case-sensitive; month
/// and weekday names are capitalized as they appear in running text.
const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

const WEEKDAYS: [&str; 7] = [
    "Monday",
    "Tuesday",
    "Wednesday",
    "Thursday",
    "Friday",
    "Saturday",
    "Sunday",
];

const WORD_ORDINALS: [&str; 12] = [
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth",
    "tenth", "eleventh", "twelfth",
];

const UNITS: [&str; 30] = [
    "km",
    "kilometers",
    "kilometres",
    "miles",
    "meters",
    "metres",
    "feet",
    "yards",
    "inches",
    "centimeters",
    "kg",
    "kilograms",
    "grams",
    "pounds",
    "tons",
    "tonnes",
    "percent",
    "acres",
    "hectares",
    "liters",
    "litres",
    "gallons",
    "seconds",
    "minutes",
    "hours",
    "days",
    "weeks",
    "months",
    "years",
    "people",
];

/// The kind of a number-typed span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumberKind {
    Year,
    Integer,
    Decimal,
    MonthName,
    WeekdayName,
    Ordinal,
    Quantity,
}

impl NumberKind {
    pub fn slug(self) -> &'static str {
        match self {
            NumberKind::Year => "year",
            NumberKind::Integer => "integer",
            NumberKind::Decimal => "decimal",
            NumberKind::MonthName => "month-name",
            NumberKind::WeekdayName => "weekday-name",
            NumberKind::Ordinal => "ordinal",
            NumberKind::Quantity => "quantity",
        }
    }
}

/// Payload attached to number-typed occurrences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumberInfo {
    pub kind: NumberKind,
    pub value: f64,
}

/// Where an occurrence sits: a token span in the question or in one
/// sentence of the document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Question { start: usize, len: usize },
    Document { sentence: usize, start: usize, len: usize },
}

/// One located entity: its span, matched surface, and type.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityOccurrence {
    pub location: Location,
    /// The matched text with token texts joined by single spaces.
    pub surface: String,
    pub type_id: String,
    pub number: Option<NumberInfo>,
}

/// Surface-to-type knowledge base with deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct TypeInventory {
    /// Type id → raw surfaces as they appeared in the source file.
    types: BTreeMap<String, BTreeSet<String>>,
    /// Canonical (token-joined) surface → type id; first registration wins.
    by_surface: BTreeMap<String, String>,
    max_surface_tokens: usize,
}

/// Join a surface's tokens with single spaces, the form n-gram matching
/// compares against.
fn canonical_surface(surface: &str) -> String {
    tokenize(surface)
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

impl TypeInventory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a surface under a type. Returns false (and changes nothing)
    /// when the surface is already registered, under any type.
    pub fn insert(&mut self, surface: &str, type_id: &str) -> bool {
        let canonical = canonical_surface(surface);
        if canonical.is_empty() || self.by_surface.contains_key(&canonical) {
            return false;
        }
        self.max_surface_tokens = self
            .max_surface_tokens
            .max(canonical.split(' ').count());
        self.by_surface.insert(canonical, type_id.to_string());
        self.types
            .entry(type_id.to_string())
            .or_default()
            .insert(surface.to_string());
        true
    }

    /// Type of a canonical surface, if registered.
    pub fn type_of(&self, canonical: &str) -> Option<&str> {
        self.by_surface.get(canonical).map(String::as_str)
    }

    /// All raw surfaces of a type.
    pub fn variants(&self, type_id: &str) -> Option<&BTreeSet<String>> {
        self.types.get(type_id)
    }

    pub fn type_count(&self) -> usize {
        self.types.len()
    }

    pub fn surface_count(&self) -> usize {
        self.by_surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_surface.is_empty()
    }
}

/// Inventory-level statistics and any warnings raised while loading.
#[derive(Debug, Clone)]
pub struct InventoryReport {
    pub types: usize,
    pub variants: usize,
    pub average_variants_per_type: f64,
    pub warnings: Vec<String>,
}

/// Load a knowledge base from a UTF-8 file of "surface<TAB>type" lines.
/// Blank lines and lines starting with '#' are skipped. A surface listed
/// under two types keeps its first type and adds a warning to the report.
pub fn build_inventory(path: &Path) -> Result<(TypeInventory, InventoryReport)> {
    let text = std::fs::read_to_string(path).map_err(|source| TypeSwapError::KbIo {
        path: path.display().to_string(),
        source,
    })?;
    let mut inventory = TypeInventory::new();
    let mut warnings = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((surface, type_id)) = trimmed.split_once('\t') else {
            return Err(TypeSwapError::KbMalformed {
                path: path.display().to_string(),
                line,
            });
        };
        let surface = surface.trim();
        let type_id = type_id.trim();
        if surface.is_empty() || type_id.is_empty() {
            return Err(TypeSwapError::KbMalformed {
                path: path.display().to_string(),
                line,
            });
        }
        if !inventory.insert(surface, type_id) {
            warnings.push(format!(
                "line {line}: surface {surface:?} is already registered; keeping its first type"
            ));
        }
    }
    let report = InventoryReport {
        types: inventory.type_count(),
        variants: inventory.surface_count(),
        average_variants_per_type: if inventory.type_count() == 0 {
            0.0
        } else {
            inventory.surface_count() as f64 / inventory.type_count() as f64
        },
        warnings,
    };
    Ok((inventory, report))
}

fn is_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn ordinal_suffix(n: u64) -> &'static str {
    match n % 100 {
        11..=13 => "th",
        _ => match n % 10 {
            1 => "st",
            2 => "nd",
            3 => "rd",
            _ => "th",
        },
    }
}

/// Classify a token span as a number kind, or return None.
///
/// Single tokens: a 4-digit value in 1000–2999 is a year; other digit runs
/// are integers; digits.digits is a decimal; month, weekday, and ordinal
/// words come from closed lists; digit ordinals need their grammatically
/// correct suffix. Two-token spans of a number followed by a known unit word
/// are quantities.
pub fn assign_number_type(span: &[&str]) -> Option<NumberInfo> {
    match span {
        [number, unit] if UNITS.contains(unit) => {
            let info = assign_number_type(&[number])?;
            match info.kind {
                NumberKind::Year | NumberKind::Integer | NumberKind::Decimal => {
                    Some(NumberInfo {
                        kind: NumberKind::Quantity,
                        value: info.value,
                    })
                }
                _ => None,
            }
        }
        [token] => {
            let token = *token;
            if is_digits(token) {
                let value: u64 = token.parse().ok()?;
                let kind = if token.len() == 4 && (1000..=2999).contains(&value) {
                    NumberKind::Year
                } else {
                    NumberKind::Integer
                };
                return Some(NumberInfo {
                    kind,
                    value: value as f64,
                });
            }
            if let Some((int_part, frac_part)) = token.split_once('.') {
                if is_digits(int_part) && is_digits(frac_part) {
                    return Some(NumberInfo {
                        kind: NumberKind::Decimal,
                        value: token.parse().ok()?,
                    });
                }
            }
            if let Some(idx) = MONTHS.iter().position(|m| *m == token) {
                return Some(NumberInfo {
                    kind: NumberKind::MonthName,
                    value: idx as f64,
                });
            }
            if let Some(idx) = WEEKDAYS.iter().position(|w| *w == token) {
                return Some(NumberInfo {
                    kind: NumberKind::WeekdayName,
                    value: idx as f64,
                });
            }
            if let Some(idx) = WORD_ORDINALS.iter().position(|o| *o == token) {
                return Some(NumberInfo {
                    kind: NumberKind::Ordinal,
                    value: idx as f64,
                });
            }
            let digits: String = token.chars().take_while(char::is_ascii_digit).collect();
            if !digits.is_empty() {
                let suffix = &token[digits.len()..];
                let value: u64 = digits.parse().ok()?;
                if suffix == ordinal_suffix(value) {
                    return Some(NumberInfo {
                        kind: NumberKind::Ordinal,
                        value: value as f64,
                    });
                }
            }
            None
        }
        _ => None,
    }
}

/// Scan token texts left to right: longest inventory n-gram first, then the
/// number rules (two-token quantities before single tokens). Matches never
/// overlap; the scan resumes after each match.
fn scan_tokens(
    texts: &[String],
    inv: &TypeInventory,
    mut location: impl FnMut(usize, usize) -> Location,
    out: &mut Vec<EntityOccurrence>,
) {
    let max_n = inv.max_surface_tokens.max(1);
    let mut i = 0;
    while i < texts.len() {
        let mut matched = None;
        for n in (1..=max_n.min(texts.len() - i)).rev() {
            let key = texts[i..i + n].join(" ");
            if let Some(type_id) = inv.type_of(&key) {
                matched = Some(EntityOccurrence {
                    location: location(i, n),
                    surface: key,
                    type_id: type_id.to_string(),
                    number: None,
                });
                break;
            }
        }
        if matched.is_none() && i + 1 < texts.len() {
            let pair = [texts[i].as_str(), texts[i + 1].as_str()];
            if let Some(info) = assign_number_type(&pair) {
                matched = Some(EntityOccurrence {
                    location: location(i, 2),
                    surface: pair.join(" "),
                    type_id: format!("number:{}", info.kind.slug()),
                    number: Some(info),
                });
            }
        }
        if matched.is_none() {
            if let Some(info) = assign_number_type(&[texts[i].as_str()]) {
                matched = Some(EntityOccurrence {
                    location: location(i, 1),
                    surface: texts[i].clone(),
                    type_id: format!("number:{}", info.kind.slug()),
                    number: Some(info),
                });
            }
        }
        match matched {
            Some(occ) => {
                let len = match occ.location {
                    Location::Question { len, .. } | Location::Document { len, .. } => len,
                };
                out.push(occ);
                i += len;
            }
            None => i += 1,
        }
    }
}

/// Locate every typed occurrence in the document and the question.
pub fn extract_entities(example: &QaExample, inv: &TypeInventory) -> Vec<EntityOccurrence> {
    let mut out = Vec::new();
    for (s, sentence) in example.document.sentences.iter().enumerate() {
        let texts: Vec<String> = sentence.iter().map(|t| t.text.clone()).collect();
        scan_tokens(
            &texts,
            inv,
            |start, len| Location::Document {
                sentence: s,
                start,
                len,
            },
            &mut out,
        );
    }
    scan_tokens(
        &example.question,
        inv,
        |start, len| Location::Question { start, len },
        &mut out,
    );
    out
}

/// Uniform integer in [lo, hi] excluding `exclude` when it lies in range.
/// None when the range has no admissible value.
fn sample_int_excluding(lo: u64, hi: u64, exclude: Option<u64>, rng: &mut RngStream) -> Option<u64> {
    debug_assert!(lo <= hi);
    let size = (hi - lo + 1) as usize;
    match exclude {
        Some(v) if (lo..=hi).contains(&v) => {
            if size <= 1 {
                return None;
            }
            let x = lo + rng.below(size - 1) as u64;
            Some(if x >= v { x + 1 } else { x })
        }
        _ => Some(lo + rng.below(size) as u64),
    }
}

/// Uniform integer with exactly `digits` digits (no leading zero beyond one
/// digit), excluding an original value.
fn sample_with_digit_count(
    digits: usize,
    exclude: Option<u64>,
    rng: &mut RngStream,
) -> Option<u64> {
    if digits == 0 || digits > 18 {
        return None;
    }
    let (lo, hi) = if digits == 1 {
        (0, 9)
    } else {
        let lo = 10u64.pow(digits as u32 - 1);
        (lo, lo * 10 - 1)
    };
    sample_int_excluding(lo, hi, exclude, rng)
}

fn sample_from_list(list: &[&str], original: &str, rng: &mut RngStream) -> Option<String> {
    let idx = list.iter().position(|x| *x == original)?;
    if list.len() <= 1 {
        return None;
    }
    let j = rng.below(list.len() - 1);
    let j = if j >= idx { j + 1 } else { j };
    Some(list[j].to_string())
}

/// Sample a fresh value of the same number kind, never equal to the
/// original surface. None when the kind admits no alternative.
fn sample_number_replacement(
    surface: &str,
    info: &NumberInfo,
    rng: &mut RngStream,
) -> Option<String> {
    match info.kind {
        NumberKind::Year => {
            let original: Option<u64> = surface.parse().ok();
            sample_int_excluding(1000, 2999, original, rng).map(|y| y.to_string())
        }
        NumberKind::Integer => {
            let original: Option<u64> = surface.parse().ok();
            sample_with_digit_count(surface.len(), original, rng).map(|n| n.to_string())
        }
        NumberKind::Decimal => {
            let (int_part, frac_part) = surface.split_once('.')?;
            for _ in 0..100 {
                let int_new = sample_with_digit_count(int_part.len(), None, rng)?;
                let frac_new: String = (0..frac_part.len())
                    .map(|_| char::from(b'0' + rng.below(10) as u8))
                    .collect();
                let candidate = format!("{int_new}.{frac_new}");
                if candidate != surface {
                    return Some(candidate);
                }
            }
            None
        }
        NumberKind::MonthName => sample_from_list(&MONTHS, surface, rng),
        NumberKind::WeekdayName => sample_from_list(&WEEKDAYS, surface, rng),
        NumberKind::Ordinal => {
            if WORD_ORDINALS.contains(&surface) {
                sample_from_list(&WORD_ORDINALS, surface, rng)
            } else {
                let digits: String =
                    surface.chars().take_while(char::is_ascii_digit).collect();
                let original: Option<u64> = digits.parse().ok();
                sample_int_excluding(1, 31, original, rng)
                    .map(|n| format!("{n}{}", ordinal_suffix(n)))
            }
        }
        NumberKind::Quantity => {
            let (number, unit) = surface.split_once(' ')?;
            let inner = assign_number_type(&[number])?;
            let fresh = sample_number_replacement(number, &inner, rng)?;
            Some(format!("{fresh} {unit}"))
        }
    }
}

/// Sample a same-type raw surface different from the original canonical
/// form. None when the type has no other variant.
fn sample_kb_replacement(
    inv: &TypeInventory,
    type_id: &str,
    original: &str,
    rng: &mut RngStream,
) -> Option<String> {
    let variants = inv.variants(type_id)?;
    let candidates: Vec<&String> = variants
        .iter()
        .filter(|s| canonical_surface(s) != original)
        .collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.below(candidates.len())].clone())
    }
}

/// Generate one augmented example: every distinct surface receives one
/// same-type replacement, every occurrence is rewritten consistently, and
/// the gold answer is realigned on the rewritten document. Candidates that
/// mutate neither the question nor the answer are rejected.
pub fn generate_swap(
    example: &QaExample,
    inv: &TypeInventory,
    rng: &mut RngStream,
) -> std::result::Result<QaExample, RejectReason> {
    let occurrences = extract_entities(example, inv);
    if occurrences.is_empty() {
        return Err(RejectReason::NoEntities);
    }

    // One replacement per distinct surface, sampled in sorted-surface order
    // so generation is deterministic given the rng seed. Surfaces with no
    // admissible replacement stay unchanged.
    let mut distinct: BTreeMap<&str, &EntityOccurrence> = BTreeMap::new();
    for occ in &occurrences {
        distinct.entry(occ.surface.as_str()).or_insert(occ);
    }
    let mut plan: BTreeMap<&str, String> = BTreeMap::new();
    for (surface, occ) in &distinct {
        let replacement = match &occ.number {
            Some(info) => sample_number_replacement(surface, info, rng),
            None => sample_kb_replacement(inv, &occ.type_id, surface, rng),
        };
        if let Some(r) = replacement {
            plan.insert(surface, r);
        }
    }
    if plan.is_empty() {
        return Err(RejectReason::Unchanged);
    }

    // Splice the document text: replace each planned occurrence's byte range
    // and track how the gold answer's byte range moves.
    let doc = &example.document;
    let mut splices: Vec<(usize, usize, &str)> = occurrences
        .iter()
        .filter_map(|occ| match occ.location {
            Location::Document {
                sentence,
                start,
                len,
            } => plan.get(occ.surface.as_str()).map(|rep| {
                let tokens = &doc.sentences[sentence];
                (tokens[start].start, tokens[start + len - 1].end(), rep.as_str())
            }),
            Location::Question { .. } => None,
        })
        .collect();
    splices.sort_by_key(|(a, _, _)| *a);

    let gold_tokens = &doc.sentences[example.gold.sentence];
    let gold_start = gold_tokens[example.gold.start].start;
    let gold_end = gold_tokens[example.gold.end].end();

    let mut text = String::with_capacity(doc.text.len());
    let mut new_start = gold_start as isize;
    let mut new_end = gold_end as isize;
    let mut prev = 0usize;
    for (a, b, rep) in &splices {
        text.push_str(&doc.text[prev..*a]);
        text.push_str(rep);
        let shift = rep.len() as isize - (*b as isize - *a as isize);
        if *b <= gold_start {
            new_start += shift;
            new_end += shift;
        } else if *a >= gold_end {
            // after the answer: no effect
        } else if *a >= gold_start && *b <= gold_end {
            new_end += shift;
        } else {
            return Err(RejectReason::AnswerLost(
                "an entity straddles the answer boundary".to_string(),
            ));
        }
        prev = *b;
    }
    text.push_str(&doc.text[prev..]);

    let new_doc = TokenizedDocument::from_text(&text);
    let (gs, ge) = (new_start as usize, new_end as usize);
    let new_gold_text = text.get(gs..ge).unwrap_or_default().to_string();

    // Cover the rewritten answer's byte range with tokens.
    let mut first = None;
    let mut last = None;
    for (si, sentence) in new_doc.sentences.iter().enumerate() {
        for (ti, tok) in sentence.iter().enumerate() {
            if tok.start < ge && tok.end() > gs {
                if first.is_none() {
                    first = Some((si, ti));
                }
                last = Some((si, ti));
            }
        }
    }
    let (Some((s0, t0)), Some((s1, t1))) = (first, last) else {
        return Err(RejectReason::AnswerLost(
            "no token covers the rewritten answer".to_string(),
        ));
    };
    if s0 != s1 {
        return Err(RejectReason::AnswerLost(
            "the rewritten answer crosses a sentence boundary".to_string(),
        ));
    }
    let gold = AnswerTuple {
        sentence: s0,
        start: t0,
        end: t1,
    };
    let span = new_doc.span_text(gold).unwrap_or_default().to_string();
    if collapse_whitespace(&span) != collapse_whitespace(&new_gold_text) {
        return Err(RejectReason::AnswerLost(
            "the rewritten answer does not line up with whole tokens".to_string(),
        ));
    }

    // Rewrite the question token list.
    let mut question_splices: Vec<(usize, usize, &str)> = occurrences
        .iter()
        .filter_map(|occ| match occ.location {
            Location::Question { start, len } => plan
                .get(occ.surface.as_str())
                .map(|rep| (start, len, rep.as_str())),
            Location::Document { .. } => None,
        })
        .collect();
    question_splices.sort_by_key(|(a, _, _)| *a);
    let mut question = Vec::with_capacity(example.question.len());
    let mut qi = 0usize;
    for (start, len, rep) in &question_splices {
        question.extend_from_slice(&example.question[qi..*start]);
        question.extend(tokenize(rep).into_iter().map(|t| t.text));
        qi = start + len;
    }
    question.extend_from_slice(&example.question[qi..]);

    let original_answer = doc.span_text(example.gold).unwrap_or_default();
    let answer_changed = collapse_whitespace(&span) != collapse_whitespace(original_answer);
    let question_changed = question != example.question;
    if !answer_changed && !question_changed {
        return Err(RejectReason::Unchanged);
    }

    Ok(QaExample {
        id: format!("{}-swap", example.id),
        document: new_doc,
        question,
        gold_text: span.clone(),
        gold,
        all_answers: vec![span],
    })
}

/// Natural log of the document's swap-assignment space: the product over
/// distinct inventory-typed surfaces in the document of their type's variant
/// count (each slot may also keep its original surface).
pub fn swap_space_log_size(example: &QaExample, inv: &TypeInventory) -> f64 {
    let mut seen = BTreeSet::new();
    let mut log_size = 0.0;
    for occ in extract_entities(example, inv) {
        if matches!(occ.location, Location::Document { .. })
            && occ.number.is_none()
            && seen.insert(occ.surface.clone())
        {
            let count = inv.variants(&occ.type_id).map_or(0, BTreeSet::len);
            log_size += (count as f64).ln();
        }
    }
    log_size
}

/// Rejection-sample `t` augmented examples from uniformly chosen originals.
/// Output ids are made unique with a running suffix. Errors when the retry
/// budget is spent before `t` acceptances.
pub fn sample_augmented(
    dataset: &[QaExample],
    inv: &TypeInventory,
    t: usize,
    rng: &mut RngStream,
) -> Result<Vec<QaExample>> {
    if t == 0 {
        return Ok(Vec::new());
    }
    if dataset.is_empty() {
        return Err(TypeSwapError::NoMutableExamples { attempts: 0 });
    }
    let budget = t.saturating_mul(25).max(500);
    let mut out = Vec::with_capacity(t);
    let mut attempts = 0usize;
    while out.len() < t {
        if attempts >= budget {
            return Err(TypeSwapError::NoMutableExamples { attempts });
        }
        attempts += 1;
        let example = &dataset[rng.below(dataset.len())];
        if let Ok(mut augmented) = generate_swap(example, inv, rng) {
            augmented.id = format!("{}-swap{}", example.id, out.len());
            out.push(augmented);
        }
    }
    Ok(out)
}
