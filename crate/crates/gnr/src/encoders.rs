//! Question and document encoders.
//!
//! A question is summarized two ways: the terminal states of a bidirectional
//! LSTM stack, and a passage-independent embedding built from self-attention
//! over the per-word states. Each document word is then represented by its
//! frozen word vector, the question summary, two boolean match features, and
//! a question-aligned embedding (attention of the word against the raw
//! question word vectors), before a second LSTM stack runs over the whole
//! document as one sequence — sentence boundaries do not reset state.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{
    bi_lstm_stack, define_lstm, define_mlp, lstm_params, mlp2, mlp_params, BiLstmLayer, Graph,
    Init, MlpParams, ParameterStore, RngStream, Var,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{path} line {line}: {message}")]
    WordVectorParse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    WordVectorIo {
        path: String,
        source: std::io::Error,
    },
    #[error("empty question")]
    EmptyQuestion,
    #[error("empty document")]
    EmptyDocument,
    #[error("document has {tokens} tokens, over the cap of {cap}")]
    DocumentTooLong { tokens: usize, cap: usize },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Frozen word vectors. Lookups try the exact token, then its lowercase
/// form; anything else maps to the all-zeros vector.
#[derive(Debug)]
pub struct WordVectorTable {
    dim: usize,
    vocab: HashMap<String, usize>,
    matrix: Vec<f64>,
}

impl WordVectorTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vocab: HashMap::new(),
            matrix: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Insert or overwrite a token's vector (later entries win).
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "vector width mismatch");
        match self.vocab.get(token) {
            Some(&idx) => {
                self.matrix[idx * self.dim..(idx + 1) * self.dim].copy_from_slice(&vector);
            }
            None => {
                self.vocab.insert(token.to_string(), self.vocab.len());
                self.matrix.extend_from_slice(&vector);
            }
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.contains_key(token) || self.vocab.contains_key(&token.to_lowercase())
    }

    pub fn lookup(&self, token: &str) -> Vec<f64> {
        let idx = self
            .vocab
            .get(token)
            .or_else(|| self.vocab.get(&token.to_lowercase()));
        match idx {
            Some(&i) => self.matrix[i * self.dim..(i + 1) * self.dim].to_vec(),
            None => vec![0.0; self.dim],
        }
    }

    /// Parse the text format: one entry per line, token then the vector
    /// components, space-separated. The dimension is inferred from the first
    /// entry and enforced on the rest.
    pub fn from_text_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| EncoderError::WordVectorIo {
            path: path.display().to_string(),
            source: e,
        })?;
        let reader = BufReader::new(file);
        let mut table: Option<WordVectorTable> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| EncoderError::WordVectorIo {
                path: path.display().to_string(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse_err = |message: String| EncoderError::WordVectorParse {
                path: path.display().to_string(),
                line: lineno + 1,
                message,
            };
            let token = parts.next().ok_or_else(|| parse_err("blank entry".into()))?;
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| parse_err(format!("bad float {p:?}")))
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(parse_err("no vector components".into()));
            }
            let table = table.get_or_insert_with(|| WordVectorTable::new(values.len()));
            if values.len() != table.dim {
                return Err(parse_err(format!(
                    "expected {} components, found {}",
                    table.dim,
                    values.len()
                )));
            }
            table.insert(token, values);
        }
        table.ok_or_else(|| EncoderError::WordVectorParse {
            path: path.display().to_string(),
            line: 0,
            message: "file holds no vectors".into(),
        })
    }
}

/// Model widths shared by the encoders and scorers.
#[derive(Debug, Clone, Copy)]
pub struct ModelDims {
    pub word_dim: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl ModelDims {
    /// Width of the question summary q: two terminal states plus the
    /// passage-independent embedding.
    pub fn question_width(&self) -> usize {
        4 * self.hidden
    }

    /// Width of each document word's assembled input row.
    pub fn doc_input_width(&self) -> usize {
        self.word_dim + self.question_width() + 2 + self.word_dim
    }
}

/// Dropout schedule for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DropoutPlan {
    pub training: bool,
    /// Rate on recurrent-layer inputs.
    pub recurrent: f64,
    /// Rate on fully-connected-layer inputs.
    pub fully_connected: f64,
}

impl DropoutPlan {
    pub fn inference() -> Self {
        Self {
            training: false,
            recurrent: 0.0,
            fully_connected: 0.0,
        }
    }

    pub fn training(recurrent: f64, fully_connected: f64) -> Self {
        Self {
            training: true,
            recurrent,
            fully_connected,
        }
    }
}

pub struct QuestionEncoding {
    /// The question's tokens as given.
    pub tokens: Vec<String>,
    /// Top-layer (forward, backward) state per question word.
    pub states: Vec<(Var, Var)>,
    /// Self-attention weights, one row summing to 1.
    pub alpha: Var,
    /// Attention-weighted sum of the per-word states.
    pub q_indep: Var,
    /// [first backward state; last forward state; q_indep].
    pub q: Var,
    /// Frozen word vectors of the question, kept for alignment.
    pub raw: Vec<Var>,
}

pub struct DocumentEncoding {
    /// Top-layer (forward, backward) state per word, indexed [sentence][word].
    pub states: Vec<Vec<(Var, Var)>>,
    /// Question-alignment attention per word, each row summing to 1.
    pub align_alpha: Vec<Vec<Var>>,
    /// (in-question, repeated-earlier) flags per word.
    pub flags: Vec<Vec<(f64, f64)>>,
    pub input_width: usize,
}

impl DocumentEncoding {
    pub fn num_states(&self) -> usize {
        self.states.iter().map(|s| s.len()).sum()
    }
}

/// Register every encoder parameter under `q_enc/`, `q_att/`, `align/` and
/// `d_enc/`.
pub fn define_encoder_params(
    store: &mut ParameterStore,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<()> {
    let h = dims.hidden;
    for l in 0..dims.depth {
        let input = if l == 0 { dims.word_dim } else { 2 * h };
        define_lstm(store, &format!("q_enc/l{l}/fwd"), input, h, rng)?;
        define_lstm(store, &format!("q_enc/l{l}/bwd"), input, h, rng)?;
    }
    define_mlp(store, "q_att/mlp", 2 * h, h, h, rng)?;
    store.define("q_att/w", h, 1, Init::Glorot, rng)?;
    define_mlp(store, "align/doc", dims.word_dim, h, h, rng)?;
    define_mlp(store, "align/q", dims.word_dim, h, h, rng)?;
    for l in 0..dims.depth {
        let input = if l == 0 { dims.doc_input_width() } else { 2 * h };
        define_lstm(store, &format!("d_enc/l{l}/fwd"), input, h, rng)?;
        define_lstm(store, &format!("d_enc/l{l}/bwd"), input, h, rng)?;
    }
    Ok(())
}

fn bind_layers(
    g: &Graph,
    store: &ParameterStore,
    prefix: &str,
    dims: &ModelDims,
) -> Result<Vec<BiLstmLayer>> {
    (0..dims.depth)
        .map(|l| {
            Ok(BiLstmLayer {
                fwd: lstm_params(g, store, &format!("{prefix}/l{l}/fwd"), dims.hidden)?,
                bwd: lstm_params(g, store, &format!("{prefix}/l{l}/bwd"), dims.hidden)?,
            })
        })
        .collect()
}

/// Dropout on a fully-connected block's input, then the block itself.
fn mlp_with_input_dropout(
    g: &Graph,
    x: Var,
    p: &MlpParams,
    drop: &DropoutPlan,
    rng: &mut RngStream,
) -> Result<Var> {
    let x = g.dropout(x, drop.fully_connected, rng, drop.training)?;
    Ok(mlp2(g, x, p)?)
}

pub fn encode_question(
    g: &Graph,
    tokens: &[String],
    table: &WordVectorTable,
    store: &ParameterStore,
    dims: &ModelDims,
    drop: &DropoutPlan,
    rng: &mut RngStream,
) -> Result<QuestionEncoding> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptyQuestion);
    }
    let raw: Vec<Var> = tokens.iter().map(|t| g.row_leaf(table.lookup(t))).collect();
    let layers = bind_layers(g, store, "q_enc", dims)?;
    let states = bi_lstm_stack(g, &raw, &layers, drop.recurrent, rng, drop.training)?;

    let att_mlp = mlp_params(g, store, "q_att/mlp")?;
    let w_q = g.param(store, "q_att/w")?;
    let mut scores = Vec::with_capacity(states.len());
    let mut cat_states = Vec::with_capacity(states.len());
    for &(f, b) in &states {
        let cat = g.concat_cols(&[b, f])?;
        let hidden = mlp_with_input_dropout(g, cat, &att_mlp, drop, rng)?;
        scores.push(g.matmul(hidden, w_q)?);
        cat_states.push(cat);
    }
    let alpha = g.softmax(g.concat_cols(&scores)?)?;
    let state_matrix = g.concat_rows(&cat_states)?;
    let q_indep = g.matmul(alpha, state_matrix)?;

    let first_bwd = states[0].1;
    let last_fwd = states[states.len() - 1].0;
    let q = g.concat_cols(&[first_bwd, last_fwd, q_indep])?;

    Ok(QuestionEncoding {
        tokens: tokens.to_vec(),
        states,
        alpha,
        q_indep,
        q,
        raw,
    })
}

/// Attention of one document word against the question's raw word vectors.
/// Scores come from an inner product of two small perceptrons; the output
/// mixes the raw vectors, not their encodings.
pub struct Aligner {
    q_rows: Var,
    q_proj: Vec<Var>,
    doc_mlp: MlpParams,
}

impl Aligner {
    pub fn new(
        g: &Graph,
        store: &ParameterStore,
        raw_question: &[Var],
        drop: &DropoutPlan,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if raw_question.is_empty() {
            return Err(EncoderError::EmptyQuestion);
        }
        let q_mlp = mlp_params(g, store, "align/q")?;
        let doc_mlp = mlp_params(g, store, "align/doc")?;
        let q_proj = raw_question
            .iter()
            .map(|&qk| mlp_with_input_dropout(g, qk, &q_mlp, drop, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            q_rows: g.concat_rows(raw_question)?,
            q_proj,
            doc_mlp,
        })
    }

    /// Returns the aligned embedding (1 × D) and its attention row.
    pub fn embed(
        &self,
        g: &Graph,
        word_vec: Var,
        drop: &DropoutPlan,
        rng: &mut RngStream,
    ) -> Result<(Var, Var)> {
        let d_proj = mlp_with_input_dropout(g, word_vec, &self.doc_mlp, drop, rng)?;
        let scores = self
            .q_proj
            .iter()
            .map(|&mq| Ok(g.sum_all(g.mul(d_proj, mq)?)))
            .collect::<Result<Vec<_>>>()?;
        let alpha = g.softmax(g.concat_cols(&scores)?)?;
        let aligned = g.matmul(alpha, self.q_rows)?;
        Ok((aligned, alpha))
    }
}

/// Per-word (in-question, repeated) flags. A word is "in question" when its
/// lowercase form appears among the lowercase question tokens, and
/// "repeated" when the same lowercase form occurred strictly earlier in the
/// document.
pub fn boolean_features(
    sentences: &[Vec<String>],
    question: &[String],
) -> Vec<Vec<(f64, f64)>> {
    let q_lower: std::collections::HashSet<String> =
        question.iter().map(|t| t.to_lowercase()).collect();
    let mut seen = std::collections::HashSet::new();
    sentences
        .iter()
        .map(|sentence| {
            sentence
                .iter()
                .map(|tok| {
                    let lower = tok.to_lowercase();
                    let in_q = q_lower.contains(&lower) as u8 as f64;
                    let repeated = !seen.insert(lower) as u8 as f64;
                    (in_q, repeated)
                })
                .collect()
        })
        .collect()
}

pub fn encode_document(
    g: &Graph,
    sentences: &[Vec<String>],
    q_enc: &QuestionEncoding,
    table: &WordVectorTable,
    store: &ParameterStore,
    dims: &ModelDims,
    drop: &DropoutPlan,
    rng: &mut RngStream,
) -> Result<DocumentEncoding> {
    let total: usize = sentences.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(EncoderError::EmptyDocument);
    }
    let flags = boolean_features(sentences, &q_enc.tokens);
    let aligner = Aligner::new(g, store, &q_enc.raw, drop, rng)?;
    let mut inputs = Vec::with_capacity(total);
    let mut align_alpha: Vec<Vec<Var>> = Vec::with_capacity(sentences.len());

    let width = dims.doc_input_width();
    for (sentence, sent_flags) in sentences.iter().zip(&flags) {
        let mut sent_alpha = Vec::with_capacity(sentence.len());
        for (token, &(in_q, repeated)) in sentence.iter().zip(sent_flags) {
            let d = g.row_leaf(table.lookup(token));
            let (aligned, alpha) = aligner.embed(g, d, drop, rng)?;
            sent_alpha.push(alpha);
            let flag_leaf = g.row_leaf(vec![in_q, repeated]);
            let input = g.concat_cols(&[d, q_enc.q, flag_leaf, aligned])?;
            debug_assert_eq!(g.shape(input).1, width);
            inputs.push(input);
        }
        align_alpha.push(sent_alpha);
    }

    let layers = bind_layers(g, store, "d_enc", dims)?;
    let flat_states = bi_lstm_stack(g, &inputs, &layers, drop.recurrent, rng, drop.training)?;

    let mut states = Vec::with_capacity(sentences.len());
    let mut offset = 0;
    for sentence in sentences {
        states.push(flat_states[offset..offset + sentence.len()].to_vec());
        offset += sentence.len();
    }

    Ok(DocumentEncoding {
        states,
        align_alpha,
        flags,
        input_width: width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameter;

    fn toy_table() -> WordVectorTable {
        let mut t = WordVectorTable::new(3);
        t.insert("the", vec![0.1, 0.0, -0.2]);
        t.insert("cat", vec![0.5, 0.3, 0.1]);
        t.insert("dog", vec![-0.4, 0.2, 0.6]);
        t.insert("saw", vec![0.0, -0.7, 0.3]);
        t.insert("who", vec![0.2, 0.2, 0.2]);
        t.insert("won", vec![-0.1, 0.4, -0.5]);
        t
    }

    fn toy_setup(dims: &ModelDims, seed: u64) -> ParameterStore {
        let mut rng = RngStream::new(seed);
        let mut store = ParameterStore::new();
        define_encoder_params(&mut store, dims, &mut rng).unwrap();
        store
    }

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn oov_lookup_is_zero_vector() {
        let t = toy_table();
        assert_eq!(t.lookup("zebra"), vec![0.0, 0.0, 0.0]);
        assert_eq!(t.lookup("cat"), vec![0.5, 0.3, 0.1]);
        // case falls back to the lowercase entry
        assert_eq!(t.lookup("Cat"), vec![0.5, 0.3, 0.1]);
    }

    #[test]
    fn text_file_round_trip_and_dimension_enforcement() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        std::fs::write(&path, "alpha 1.0 2.0\nbeta -0.5 0.25\n").unwrap();
        let t = WordVectorTable::from_text_file(&path).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.lookup("beta"), vec![-0.5, 0.25]);

        std::fs::write(&path, "alpha 1.0 2.0\nbeta 3.0\n").unwrap();
        let err = WordVectorTable::from_text_file(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        std::fs::write(&path, "alpha 1.0 oops\n").unwrap();
        assert!(WordVectorTable::from_text_file(&path).is_err());
    }

    #[test]
    fn question_attention_sums_to_one() {
        let dims = ModelDims { word_dim: 3, hidden: 4, depth: 2 };
        let store = toy_setup(&dims, 31);
        let table = toy_table();
        let g = Graph::new();
        let mut rng = RngStream::new(1);
        let enc = encode_question(
            &g,
            &toks(&["who", "saw", "the", "cat"]),
            &table,
            &store,
            &dims,
            &DropoutPlan::inference(),
            &mut rng,
        )
        .unwrap();
        let total: f64 = g.value(enc.alpha).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(g.value(enc.alpha).iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn single_word_question_attention_is_one() {
        let dims = ModelDims { word_dim: 3, hidden: 4, depth: 1 };
        let store = toy_setup(&dims, 32);
        let g = Graph::new();
        let mut rng = RngStream::new(1);
        let enc = encode_question(
            &g,
            &toks(&["won"]),
            &toy_table(),
            &store,
            &dims,
            &DropoutPlan::inference(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(g.value(enc.alpha), vec![1.0]);
        let (f, b) = enc.states[0];
        let cat = g.concat_cols(&[b, f]).unwrap();
        assert_eq!(g.value(enc.q_indep), g.value(cat));
    }

    #[test]
    fn question_width_is_four_hidden() {
        let dims = ModelDims { word_dim: 3, hidden: 200, depth: 1 };
        let store = toy_setup(&dims, 33);
        let g = Graph::new();
        let mut rng = RngStream::new(1);
        let enc = encode_question(
            &g,
            &toks(&["who", "won"]),
            &toy_table(),
            &store,
            &dims,
            &DropoutPlan::inference(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(g.shape(enc.q), (1, 800));
    }

    #[test]
    fn empty_question_is_an_error() {
        let dims = ModelDims { word_dim: 3, hidden: 4, depth: 1 };
        let store = toy_setup(&dims, 34);
        let g = Graph::new();
        let mut rng = RngStream::new(1);
        let res = encode_question(
            &g,
            &[],
            &toy_table(),
            &store,
            &dims,
            &DropoutPlan::inference(),
            &mut rng,
        );
        assert!(matches!(res, Err(EncoderError::EmptyQuestion)));
    }

    #[test]
    fn word_order_changes_the_summary() {
        // The multiset of embeddings is identical either way; only context
        // distinguishes the two orders, so a bag-of-words shortcut would
        // fail this.
        let dims = ModelDims { word_dim: 3, hidden: 4, depth: 1 };
        let store = toy_setup(&dims, 35);
        let table = toy_table();
        let encode = |words: &[&str]| -> Vec<f64> {
            let g = Graph::new();
            let mut rng = RngStream::new(1);
            let enc = encode_question(
                &g,
                &toks(words),
                &table,
                &store,
                &dims,
                &DropoutPlan::inference(),
                &mut rng,
            )
            .unwrap();
            g.value(enc.q_indep)
        };
        assert_ne!(encode(&["the", "cat", "dog"]), encode(&["the", "dog", "cat"]));
        // identical sequences coincide exactly
        assert_eq!(encode(&["cat", "cat"]), encode(&["cat", "cat"]));
    }

    #[test]
    fn aligner_single_question_word_returns_it() {
        let dims = ModelDims { word_dim: 3, hidden: 4, depth: 1 };
        let store = toy_setup(&dims, 36);
        let g = Graph::new();
        let mut rng = RngStream::new(1);
        let q_raw = vec![g.row_leaf(vec![0.5, 0.3, 0.1])];
        let aligner =
            Aligner::new(&g, &store, &q_raw, &DropoutPlan::inference(), &mut rng).unwrap();
        let d = g.row_leaf(vec![-0.4, 0.2, 0.6]);
        let (aligned, alpha) =
            aligner.embed(&g, d, &DropoutPlan::inference(), &mut rng).unwrap();
        assert_eq!(g.value(alpha), vec![1.0]);
        assert_eq!(g.value(aligned), vec![0.5, 0.3, 0.1]);
    }

    #[test]
    fn aligner_identical_question_words_return_shared_vector() {
        let dims = ModelDims { word_dim: 3, hidden: 4, depth: 1 };
        let store = toy_setup(&dims, 37);
        let g = Graph::new();
        let mut rng = RngStream::new(1);
        let shared = vec![0.2, -0.9, 0.4];
        let q_raw = vec![g.row_leaf(shared.clone()), g.row_leaf(shared.clone())];
        let aligner =
            Aligner::new(&g, &store, &q_raw, &DropoutPlan::inference(), &mut rng).unwrap();
        let d = g.row_leaf(vec![1.0, 1.0, 1.0]);
        let (aligned, alpha) =
            aligner.embed(&g, d, &DropoutPlan::inference(), &mut rng).unwrap();
        let a = g.value(alpha);
        assert!((a[0] + a[1] - 1.0).abs() < 1e-12);
        for (got, want) in g.value(aligned).iter().zip(&shared) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn aligner_matches_direct_formula() {
        // Recompute scores and the mixture with plain float math from the
        // stored parameters.
        let dims = ModelDims { word_dim: 3, hidden: 4, depth: 1 };
        let store = toy_setup(&dims, 38);
        let g = Graph::new();
        let mut rng = RngStream::new(1);
        let q_vecs = [
            vec![0.1, 0.2, 0.3],
            vec![-0.5, 0.4, 0.0],
            vec![0.7, -0.6, 0.2],
        ];
        let q_raw: Vec<Var> = q_vecs.iter().map(|v| g.row_leaf(v.clone())).collect();
        let d_vec = vec![0.3, 0.1, -0.8];
        let aligner =
            Aligner::new(&g, &store, &q_raw, &DropoutPlan::inference(), &mut rng).unwrap();
        let (aligned, _) = aligner
            .embed(&g, g.row_leaf(d_vec.clone()), &DropoutPlan::inference(), &mut rng)
            .unwrap();

        let run_mlp = |prefix: &str, x: &[f64]| -> Vec<f64> {
            let affine = |x: &[f64], w: &Parameter, b: &Parameter| -> Vec<f64> {
                let mut out = b.values.clone();
                for (p, &xv) in x.iter().enumerate() {
                    for c in 0..w.cols {
                        out[c] += xv * w.values[p * w.cols + c];
                    }
                }
                out
            };
            let h = affine(
                x,
                store.get(&format!("{prefix}/w1")).unwrap(),
                store.get(&format!("{prefix}/b1")).unwrap(),
            );
            let h: Vec<f64> = h.iter().map(|&v| v.max(0.0)).collect();
            affine(
                &h,
                store.get(&format!("{prefix}/w2")).unwrap(),
                store.get(&format!("{prefix}/b2")).unwrap(),
            )
        };
        let dp = run_mlp("align/doc", &d_vec);
        let scores: Vec<f64> = q_vecs
            .iter()
            .map(|qv| {
                let qp = run_mlp("align/q", qv);
                dp.iter().zip(&qp).map(|(a, b)| a * b).sum()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut want = vec![0.0; 3];
        for (e, qv) in exps.iter().zip(&q_vecs) {
            for (w, &q) in want.iter_mut().zip(qv) {
                *w += e / z * q;
            }
        }
        for (got, want) in g.value(aligned).iter().zip(&want) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn boolean_feature_examples() {
        // "won" appears in the question
        let flags = boolean_features(&[toks(&["won"])], &toks(&["who", "won"]));
        assert_eq!(flags[0][0], (1.0, 0.0));

        // second "the" and second "cat" are repeats
        let flags = boolean_features(
            &[toks(&["the", "cat", "saw", "the", "cat"])],
            &toks(&["irrelevant"]),
        );
        let repeated: Vec<f64> = flags[0].iter().map(|f| f.1).collect();
        assert_eq!(repeated, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(flags[0].iter().all(|f| f.0 == 0.0));

        // repetition carries across sentence boundaries, case-insensitively
        let flags = boolean_features(
            &[toks(&["The", "cat"]), toks(&["the", "dog"])],
            &toks(&[]),
        );
        assert_eq!(flags[1][0], (0.0, 1.0));
    }

    #[test]
    fn document_encoding_shapes_and_flags() {
        let dims = ModelDims { word_dim: 3, hidden: 4, depth: 2 };
        let store = toy_setup(&dims, 39);
        let table = toy_table();
        let g = Graph::new();
        let mut rng = RngStream::new(1);
        let drop = DropoutPlan::inference();
        let q_enc = encode_question(
            &g,
            &toks(&["who", "saw", "the", "cat"]),
            &table,
            &store,
            &dims,
            &drop,
            &mut rng,
        )
        .unwrap();
        let sentences = vec![toks(&["the", "dog", "saw"]), toks(&["the", "cat"])];
        let doc = encode_document(
            &g, &sentences, &q_enc, &table, &store, &dims, &drop, &mut rng,
        )
        .unwrap();

        assert_eq!(doc.num_states(), 5);
        assert_eq!(doc.states.len(), 2);
        assert_eq!(doc.states[1].len(), 2);
        assert_eq!(doc.input_width, 3 + 16 + 2 + 3);
        for sent in &doc.states {
            for &(f, b) in sent {
                assert_eq!(g.shape(f), (1, 4));
                assert_eq!(g.shape(b), (1, 4));
            }
        }
        for sent in &doc.align_alpha {
            for &alpha in sent {
                let total: f64 = g.value(alpha).iter().sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
        // "the" opens both sentences; the second one is a repeat
        assert_eq!(doc.flags[0][0], (1.0, 0.0));
        assert_eq!(doc.flags[1][0], (1.0, 1.0));
        // "dog" is neither in the question nor repeated
        assert_eq!(doc.flags[0][1], (0.0, 0.0));
    }

    #[test]
    fn reference_widths_at_paper_scale() {
        let dims = ModelDims { word_dim: 300, hidden: 200, depth: 1 };
        assert_eq!(dims.doc_input_width(), 1402);
        let store = toy_setup(&dims, 40);
        let mut table = WordVectorTable::new(300);
        table.insert("a", vec![0.01; 300]);
        let g = Graph::new();
        let mut rng = RngStream::new(1);
        let drop = DropoutPlan::inference();
        let q_enc = encode_question(
            &g, &toks(&["a"]), &table, &store, &dims, &drop, &mut rng,
        )
        .unwrap();
        assert_eq!(g.shape(q_enc.q), (1, 800));
        let doc = encode_document(
            &g,
            &[toks(&["a"])],
            &q_enc,
            &table,
            &store,
            &dims,
            &drop,
            &mut rng,
        )
        .unwrap();
        assert_eq!(doc.num_states(), 1);
        let (f, b) = doc.states[0][0];
        // 200 per direction: 400 per word once concatenated
        assert_eq!(g.shape(f).1 + g.shape(b).1, 400);
    }

    #[test]
    fn inference_encoding_is_deterministic() {
        let dims = ModelDims { word_dim: 3, hidden: 4, depth: 2 };
        let store = toy_setup(&dims, 41);
        let table = toy_table();
        let run = |seed: u64| -> Vec<f64> {
            let g = Graph::new();
            let mut rng = RngStream::new(seed);
            let drop = DropoutPlan::inference();
            let q_enc = encode_question(
                &g,
                &toks(&["who", "won"]),
                &table,
                &store,
                &dims,
                &drop,
                &mut rng,
            )
            .unwrap();
            let doc = encode_document(
                &g,
                &[toks(&["the", "cat", "won"])],
                &q_enc,
                &table,
                &store,
                &dims,
                &drop,
                &mut rng,
            )
            .unwrap();
            doc.states
                .iter()
                .flatten()
                .flat_map(|&(f, b)| {
                    let mut v = g.value(f);
                    v.extend(g.value(b));
                    v
                })
                .collect()
        };
        // different rng seeds must not matter without dropout
        let a = run(1);
        let b = run(999);
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_gradients_pass_finite_difference_check() {
        let dims = ModelDims { word_dim: 5, hidden: 4, depth: 1 };
        let mut rng = RngStream::new(42);
        let mut store = ParameterStore::new();
        define_encoder_params(&mut store, &dims, &mut rng).unwrap();
        let mut table = WordVectorTable::new(5);
        table.insert("q1", vec![0.1, -0.2, 0.3, 0.0, 0.5]);
        table.insert("q2", vec![-0.4, 0.1, 0.0, 0.2, -0.1]);
        table.insert("w1", vec![0.3, 0.3, -0.6, 0.1, 0.0]);
        table.insert("w2", vec![0.0, -0.5, 0.2, 0.4, 0.1]);

        let question = toks(&["q1", "q2"]);
        let sentences = vec![toks(&["w1", "w2"]), toks(&["w2"])];
        let probe = |s: &ParameterStore, g: &Graph| -> Result<Var> {
            let drop = DropoutPlan::inference();
            let mut rng = RngStream::new(7);
            let q_enc = encode_question(g, &question, &table, s, &dims, &drop, &mut rng)?;
            let doc = encode_document(g, &sentences, &q_enc, &table, s, &dims, &drop, &mut rng)?;
            let mut acc = g.scalar_leaf(0.0);
            for sent in &doc.states {
                for &(f, b) in sent {
                    acc = g.add(acc, g.sum_all(f))?;
                    acc = g.add(acc, g.sum_all(b))?;
                }
            }
            Ok(acc)
        };

        let g = Graph::new();
        let loss = probe(&store, &g).unwrap();
        g.backward(loss).unwrap();
        g.flush_param_grads(&mut store).unwrap();

        let names = store.names();
        let report = crate::gradcheck::check_gradients(
            &mut store,
            &names,
            |s| -> Result<f64> {
                let g = Graph::new();
                let loss = probe(s, &g)?;
                Ok(g.scalar_value(loss))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passes(),
            "checked {}, max rel err {}",
            report.checked,
            report.max_rel_err
        );
    }
}
