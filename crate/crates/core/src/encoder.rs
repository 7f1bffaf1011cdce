//! Token representations: trainable static embeddings, or precomputed
//! multi-layer contextual vectors combined by a learned scalar mixture per
//! output task.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::Sentence;
use crate::numeric::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::Vocab;

pub const VECTORS_MAGIC: &[u8; 8] = b"STEPSVEC";
pub const VECTORS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("invalid vector file: {0}")]
    Format(String),

    #[error("sentence has {sentence} tokens but the vectors cover {vectors}")]
    TokenCountMismatch { sentence: usize, vectors: usize },

    #[error("vectors have {layers} layers of size {dim}, model expects {expected_layers} x {expected_dim}")]
    ShapeMismatch {
        layers: usize,
        dim: usize,
        expected_layers: usize,
        expected_dim: usize,
    },

    #[error("contextual encoder needs vectors for every sentence")]
    MissingVectors,

    #[error("unknown token {0:?} and no fallback embedding")]
    UnknownToken(String),
}

/// Output heads that read their own scalar mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Arc,
    Label,
    Upos,
    Ufeats,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Arc => "arc",
            Task::Label => "label",
            Task::Upos => "upos",
            Task::Ufeats => "ufeats",
        }
    }
}

/// Per-sentence stack of layer outputs, each `n x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualVectors {
    pub layers: Arc<Vec<Tensor>>,
    pub model: String,
}

impl ContextualVectors {
    pub fn new(layers: Vec<Tensor>, model: impl Into<String>) -> Self {
        ContextualVectors {
            layers: Arc::new(layers),
            model: model.into(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.rows())
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VectorHeader {
    pub version: u32,
    pub layers: usize,
    pub dim: usize,
    pub model: String,
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads the exchange header followed by per-sentence blocks until EOF.
pub fn read_vectors<R: Read>(mut r: R) -> Result<(VectorHeader, Vec<ContextualVectors>), EncoderError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| EncoderError::Format("file too short for header".into()))?;
    if &magic != VECTORS_MAGIC {
        return Err(EncoderError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VECTORS_VERSION {
        return Err(EncoderError::Format(format!("unsupported version {}", version)));
    }
    let layers = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    if layers == 0 {
        return Err(EncoderError::Format("zero layers".into()));
    }
    let id_len = read_u32(&mut r)? as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let model = String::from_utf8(id).map_err(|e| EncoderError::Format(e.to_string()))?;
    let header = VectorHeader {
        version,
        layers,
        dim,
        model: model.clone(),
    };

    let mut sentences = Vec::new();
    loop {
        let mut nbuf = [0u8; 4];
        match r.read(&mut nbuf[..1])? {
            0 => break,
            _ => r
                .read_exact(&mut nbuf[1..])
                .map_err(|_| EncoderError::Format("truncated sentence header".into()))?,
        }
        let n = u32::from_le_bytes(nbuf) as usize;
        let mut raw = vec![0u8; layers * n * dim * 4];
        r.read_exact(&mut raw).map_err(|_| {
            EncoderError::Format(format!("truncated vectors for sentence {}", sentences.len() + 1))
        })?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let per_layer = n * dim;
        let layer_tensors = (0..layers)
            .map(|l| Tensor::matrix(n, dim, values[l * per_layer..(l + 1) * per_layer].to_vec()))
            .collect();
        sentences.push(ContextualVectors::new(layer_tensors, model.clone()));
    }
    Ok((header, sentences))
}

pub fn read_vectors_file(path: impl AsRef<std::path::Path>) -> Result<(VectorHeader, Vec<ContextualVectors>), EncoderError> {
    read_vectors(io::BufReader::new(std::fs::File::open(path)?))
}

/// Writes vectors in the exchange format (values stored as `f32`).
pub fn write_vectors<W: Write>(
    mut w: W,
    model: &str,
    layers: usize,
    dim: usize,
    sentences: &[ContextualVectors],
) -> Result<(), EncoderError> {
    w.write_all(VECTORS_MAGIC)?;
    w.write_all(&VECTORS_VERSION.to_le_bytes())?;
    w.write_all(&(layers as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(model.len() as u32).to_le_bytes())?;
    w.write_all(model.as_bytes())?;
    for s in sentences {
        if s.num_layers() != layers || s.dim() != dim {
            return Err(EncoderError::ShapeMismatch {
                layers: s.num_layers(),
                dim: s.dim(),
                expected_layers: layers,
                expected_dim: dim,
            });
        }
        w.write_all(&(s.num_tokens() as u32).to_le_bytes())?;
        for layer in s.layers.iter() {
            for v in layer.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Softmax over the active logits; dropped layers get weight zero.
pub fn mixture_weights(logits: &[f64], active: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits
        .iter()
        .zip(active)
        .map(|(&x, &a)| if a { (x - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    w
}

/// Independently keeps each layer with probability `1 - p`. A draw that
/// drops every layer is redrawn.
pub fn draw_layer_mask<R: Rng>(layers: usize, p: f64, rng: &mut R) -> Vec<bool> {
    if p <= 0.0 {
        return vec![true; layers];
    }
    loop {
        let mask: Vec<bool> = (0..layers).map(|_| !rng.gen_bool(p)).collect();
        if mask.iter().any(|&k| k) {
            return mask;
        }
    }
}

/// Inverted dropout: zeroes entries with probability `p` and rescales the rest.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, p: f64, training: bool, rng: &mut R) -> Var {
    if !training || p <= 0.0 {
        return x;
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let len = tape.value(x).len();
    let mask = (0..len).map(|_| if rng.gen_bool(p) { 0.0 } else { keep }).collect();
    tape.mask(x, Tensor::new(shape, mask))
}

/// Replaces each row by `mask_vector` with probability `p` during training.
pub fn mask_tokens<R: Rng>(
    tape: &mut Tape,
    embeddings: Var,
    p: f64,
    mask_vector: Var,
    training: bool,
    rng: &mut R,
) -> Var {
    if !training || p <= 0.0 {
        return embeddings;
    }
    let rows = tape.value(embeddings).rows();
    let flags: Vec<bool> = (0..rows).map(|_| rng.gen_bool(p)).collect();
    if !flags.iter().any(|&f| f) {
        return embeddings;
    }
    tape.replace_rows(embeddings, mask_vector, flags)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceConfig {
    /// Word embeddings of a symmetric context window plus a position
    /// embedding, concatenated.
    Static {
        #[serde(default = "default_word_dim")]
        word_dim: usize,
        #[serde(default = "default_position_dim")]
        position_dim: usize,
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_max_positions")]
        max_positions: usize,
        #[serde(default = "default_min_count")]
        min_count: usize,
    },
    Contextual { layers: usize, dim: usize },
}

fn default_word_dim() -> usize {
    32
}

fn default_position_dim() -> usize {
    16
}

fn default_window() -> usize {
    1
}

fn default_max_positions() -> usize {
    64
}

fn default_min_count() -> usize {
    1
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Static {
            word_dim: default_word_dim(),
            position_dim: default_position_dim(),
            window: default_window(),
            max_positions: default_max_positions(),
            min_count: default_min_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub source: SourceConfig,
    pub layer_dropout: f64,
    pub token_mask_prob: f64,
    pub output_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            source: SourceConfig::default(),
            layer_dropout: 0.1,
            token_mask_prob: 0.15,
            output_dropout: 0.5,
        }
    }
}

impl EncoderConfig {
    /// Width of the representation handed to the output heads.
    pub fn output_dim(&self) -> usize {
        match self.source {
            SourceConfig::Static {
                word_dim,
                position_dim,
                window,
                ..
            } => (2 * window + 1) * word_dim + position_dim,
            SourceConfig::Contextual { dim, .. } => dim,
        }
    }
}

const PAD: usize = 0;
const UNK_WORD: usize = 1;

/// Lowercased word forms; index 0 pads the context window, 1 is unknown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    vocab: Vocab,
}

impl WordVocab {
    pub fn build(sentences: &[Sentence], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in sentences.iter().flat_map(|s| &s.tokens) {
            *counts.entry(t.form.to_lowercase()).or_default() += 1;
        }
        let mut items = vec!["<pad>".to_owned(), "<unk>".to_owned()];
        items.extend(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_count.max(1))
                .map(|(w, _)| w),
        );
        WordVocab { vocab: items.into() }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn lookup(&self, form: &str) -> Option<usize> {
        self.vocab.get(&form.to_lowercase())
    }

    pub fn index(&self, form: &str) -> usize {
        self.lookup(form).unwrap_or(UNK_WORD)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum SourceParams {
    Static { words: ParamId, positions: ParamId },
    Contextual { mixtures: BTreeMap<Task, ParamId> },
}

/// Parameters and configuration of the representation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEncoder {
    config: EncoderConfig,
    words: Option<WordVocab>,
    source: SourceParams,
    mask_vector: ParamId,
}

impl TokenEncoder {
    /// Registers encoder parameters. Static mode embeds `words`, which
    /// defaults to a vocabulary built from `train`. `tasks` lists the heads
    /// that need a mixture in contextual mode.
    pub fn new<R: Rng>(
        config: EncoderConfig,
        train: &[Sentence],
        words: Option<WordVocab>,
        tasks: &[Task],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let (words, source, mask_dim) = match config.source {
            SourceConfig::Static {
                word_dim,
                position_dim,
                max_positions,
                min_count,
                ..
            } => {
                let vocab = words.unwrap_or_else(|| WordVocab::build(train, min_count));
                let bound = (3.0 / word_dim as f64).sqrt();
                let words = store.init("embed.words", &[vocab.len(), word_dim], Init::Uniform(bound), rng);
                let pbound = (3.0 / position_dim.max(1) as f64).sqrt();
                let positions = store.init(
                    "embed.positions",
                    &[max_positions.max(1), position_dim],
                    Init::Uniform(pbound),
                    rng,
                );
                (Some(vocab), SourceParams::Static { words, positions }, word_dim)
            }
            SourceConfig::Contextual { layers, dim } => {
                let mixtures = tasks
                    .iter()
                    .map(|&t| (t, store.init(&format!("mix.{}", t.name()), &[layers], Init::Zeros, rng)))
                    .collect();
                (None, SourceParams::Contextual { mixtures }, dim)
            }
        };
        let bound = (3.0 / mask_dim.max(1) as f64).sqrt();
        let mask_vector = store.init("embed.mask", &[mask_dim], Init::Uniform(bound), rng);
        TokenEncoder {
            config,
            words,
            source,
            mask_vector,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn words(&self) -> Option<&WordVocab> {
        self.words.as_ref()
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn is_contextual(&self) -> bool {
        matches!(self.source, SourceParams::Contextual { .. })
    }

    pub fn mixture_param(&self, task: Task) -> Option<ParamId> {
        match &self.source {
            SourceParams::Contextual { mixtures } => mixtures.get(&task).copied(),
            SourceParams::Static { .. } => None,
        }
    }

    /// Current mixture weights of `task` without layer dropout.
    pub fn mixture(&self, store: &ParamStore, task: Task) -> Option<Vec<f64>> {
        let logits = store.value(self.mixture_param(task)?).data();
        Some(mixture_weights(logits, &vec![true; logits.len()]))
    }

    /// Representations for every requested task, in the order given. In
    /// static mode all tasks share the same matrix before output dropout.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: &Sentence,
        vectors: Option<&ContextualVectors>,
        tasks: &[Task],
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Var>, EncoderError> {
        let n = sentence.len();
        let mask_vector = tape.param(store, self.mask_vector);
        let p_mask = self.config.token_mask_prob;
        let shared = match (&self.source, &self.config.source) {
            (
                SourceParams::Static { words, positions },
                SourceConfig::Static {
                    window,
                    max_positions,
                    ..
                },
            ) => {
                let vocab = self.words.as_ref().expect("static encoder has a vocabulary");
                let mut idx = vec![PAD; *window];
                for t in &sentence.tokens {
                    idx.push(vocab.index(&t.form));
                }
                idx.extend(std::iter::repeat(PAD).take(*window));
                let table = tape.param(store, *words);
                let emb = tape.gather_rows(table, idx);
                // Only real tokens are masked, never the padding.
                let emb = if training && p_mask > 0.0 && n > 0 {
                    let flags: Vec<bool> = (0..n + 2 * window)
                        .map(|i| i >= *window && i < window + n && rng.gen_bool(p_mask))
                        .collect();
                    if flags.iter().any(|&f| f) {
                        tape.replace_rows(emb, mask_vector, flags)
                    } else {
                        emb
                    }
                } else {
                    emb
                };
                let mut parts = Vec::with_capacity(2 * window + 2);
                for offset in 0..=2 * window {
                    parts.push(tape.gather_rows(emb, (offset..offset + n).collect()));
                }
                let pos_table = tape.param(store, *positions);
                let pos_idx = (0..n).map(|i| i.min(max_positions - 1)).collect();
                parts.push(tape.gather_rows(pos_table, pos_idx));
                Some(tape.concat_cols(parts))
            }
            _ => None,
        };

        // Contextual mode masks the same tokens in every task's mixture.
        let token_mask: Option<Vec<bool>> = (training && p_mask > 0.0 && self.is_contextual())
            .then(|| (0..n).map(|_| rng.gen_bool(p_mask)).collect());

        let mut out = Vec::with_capacity(tasks.len());
        for &task in tasks {
            let r = match (&self.source, shared) {
                (SourceParams::Static { .. }, Some(r)) => r,
                (SourceParams::Contextual { mixtures }, _) => {
                    let vectors = vectors.ok_or(EncoderError::MissingVectors)?;
                    if vectors.num_tokens() != n {
                        return Err(EncoderError::TokenCountMismatch {
                            sentence: n,
                            vectors: vectors.num_tokens(),
                        });
                    }
                    let param = *mixtures.get(&task).expect("mixture registered for task");
                    let expected_layers = store.value(param).len();
                    let expected_dim = self.output_dim();
                    if vectors.num_layers() != expected_layers || vectors.dim() != expected_dim {
                        return Err(EncoderError::ShapeMismatch {
                            layers: vectors.num_layers(),
                            dim: vectors.dim(),
                            expected_layers,
                            expected_dim,
                        });
                    }
                    let logits = tape.param(store, param);
                    let active = if training {
                        draw_layer_mask(expected_layers, self.config.layer_dropout, rng)
                    } else {
                        vec![true; expected_layers]
                    };
                    let r = tape.scalar_mix(vectors.layers.clone(), logits, active);
                    match &token_mask {
                        Some(flags) if flags.iter().any(|&f| f) => {
                            tape.replace_rows(r, mask_vector, flags.clone())
                        }
                        _ => r,
                    }
                }
                _ => unreachable!("static source always yields a shared representation"),
            };
            out.push(dropout(tape, r, self.config.output_dropout, training, rng));
        }
        Ok(out)
    }

    /// Checks that every token has an embedding when the vocabulary is
    /// used without the unknown-word fallback.
    pub fn check_known(&self, sentence: &Sentence) -> Result<(), EncoderError> {
        if let Some(vocab) = &self.words {
            if let Some(t) = sentence.tokens.iter().find(|t| vocab.lookup(&t.form).is_none()) {
                return Err(EncoderError::UnknownToken(t.form.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::Token;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sentence(words: &[&str]) -> Sentence {
        Sentence::from_tokens(
            words
                .iter()
                .enumerate()
                .map(|(i, w)| Token::new(i + 1, *w))
                .collect(),
        )
    }

    fn layers(rng: &mut ChaCha8Rng, l: usize, n: usize, d: usize) -> ContextualVectors {
        ContextualVectors::new(
            (0..l)
                .map(|_| Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()))
                .collect(),
            "test",
        )
    }

    fn contextual(l: usize, d: usize, tasks: &[Task], store: &mut ParamStore) -> TokenEncoder {
        let config = EncoderConfig {
            source: SourceConfig::Contextual { layers: l, dim: d },
            output_dropout: 0.0,
            token_mask_prob: 0.0,
            ..Default::default()
        };
        TokenEncoder::new(config, &[], None, tasks, store, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn single_layer_is_returned_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = contextual(1, 3, &[Task::Arc], &mut store);
        let id = enc.mixture_param(Task::Arc).unwrap();
        store.get_mut(id).value = Tensor::vector(vec![5.3]);
        let v = layers(&mut rng, 1, 4, 3);
        let s = sentence(&["a", "b", "c", "d"]);
        let mut tape = Tape::new();
        let r = enc.encode(&mut tape, &store, &s, Some(&v), &[Task::Arc], true, &mut rng).unwrap();
        for (a, b) in tape.value(r[0]).data().iter().zip(v.layers[0].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_average_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = contextual(2, 3, &[Task::Arc], &mut store);
        let v = layers(&mut rng, 2, 2, 3);
        let s = sentence(&["a", "b"]);
        let mut tape = Tape::new();
        let r = enc.encode(&mut tape, &store, &s, Some(&v), &[Task::Arc], false, &mut rng).unwrap();
        let out = tape.value(r[0]).data();
        for i in 0..6 {
            let mean = 0.5 * (v.layers[0].data()[i] + v.layers[1].data()[i]);
            assert!((out[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn token_count_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = contextual(2, 3, &[Task::Arc], &mut store);
        let v = layers(&mut rng, 2, 3, 3);
        let mut tape = Tape::new();
        let err = enc
            .encode(&mut tape, &store, &sentence(&["a"]), Some(&v), &[Task::Arc], false, &mut rng)
            .unwrap_err();
        assert!(matches!(err, EncoderError::TokenCountMismatch { sentence: 1, vectors: 3 }));
    }

    #[test]
    fn mixtures_are_independent_per_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = contextual(3, 2, &[Task::Arc, Task::Label], &mut store);
        let v = layers(&mut rng, 3, 2, 2);
        let s = sentence(&["a", "b"]);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let r = enc
                .encode(&mut tape, store, &s, Some(&v), &[Task::Arc, Task::Label], false, &mut rng)
                .unwrap();
            (tape.value(r[0]).clone(), tape.value(r[1]).clone())
        };
        let (arc0, label0) = run(&store);
        let id = enc.mixture_param(Task::Arc).unwrap();
        store.get_mut(id).value = Tensor::vector(vec![3.0, -1.0, 0.5]);
        let (arc1, label1) = run(&store);
        assert_ne!(arc0, arc1);
        assert_eq!(label0, label1);
    }

    #[test]
    fn static_encoder_shapes_and_unknown_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let train = vec![sentence(&["The", "dog", "barks"])];
        let config = EncoderConfig::default();
        let enc = TokenEncoder::new(config.clone(), &train, None, &[], &mut store, &mut rng);
        let s = sentence(&["the", "cat", "barks"]);
        let mut tape = Tape::new();
        let r = enc.encode(&mut tape, &store, &s, None, &[Task::Arc], false, &mut rng).unwrap();
        assert_eq!(tape.value(r[0]).shape(), &[3, config.output_dim()]);
        assert!(enc.check_known(&train[0]).is_ok());
        assert!(matches!(enc.check_known(&s), Err(EncoderError::UnknownToken(w)) if w == "cat"));
    }

    #[test]
    fn static_empty_sentence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = TokenEncoder::new(EncoderConfig::default(), &[], None, &[], &mut store, &mut rng);
        let mut tape = Tape::new();
        let r = enc
            .encode(&mut tape, &store, &Sentence::default(), None, &[Task::Arc], true, &mut rng)
            .unwrap();
        assert_eq!(tape.value(r[0]).rows(), 0);
    }

    #[test]
    fn mask_tokens_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0; 6]));
        let m = tape.constant(Tensor::vector(vec![9.0, 9.0]));
        assert_eq!(mask_tokens(&mut tape, x, 0.0, m, true, &mut rng), x);
        assert_eq!(mask_tokens(&mut tape, x, 0.15, m, false, &mut rng), x);
        let y = mask_tokens(&mut tape, x, 0.999, m, true, &mut rng);
        assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn table_defaults() {
        let c = EncoderConfig::default();
        assert_eq!((c.layer_dropout, c.token_mask_prob, c.output_dropout), (0.1, 0.15, 0.5));
    }

    #[test]
    fn vector_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sents = vec![layers(&mut rng, 3, 2, 4), layers(&mut rng, 3, 1, 4)];
        let mut buf = Vec::new();
        write_vectors(&mut buf, "tiny-model", 3, 4, &sents).unwrap();
        let (header, back) = read_vectors(&buf[..]).unwrap();
        assert_eq!(header.layers, 3);
        assert_eq!(header.dim, 4);
        assert_eq!(header.model, "tiny-model");
        assert_eq!(back.len(), 2);
        for (a, b) in sents.iter().zip(&back) {
            for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
                for (x, y) in la.data().iter().zip(lb.data()) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
    }

    #[test]
    fn truncated_vector_file() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut buf = Vec::new();
        write_vectors(&mut buf, "m", 2, 2, &[layers(&mut rng, 2, 2, 2)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_vectors(&buf[..]), Err(EncoderError::Format(_))));
        assert!(matches!(read_vectors(&b"NOTVECS!"[..]), Err(EncoderError::Format(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn output_is_convex_combination(seed in 0u64..1000, l in 1usize..5, p in 0.0f64..0.9) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let mut enc = contextual(l, 3, &[Task::Arc], &mut store);
                enc.config.layer_dropout = p;
                let id = enc.mixture_param(Task::Arc).unwrap();
                store.get_mut(id).value =
                    Tensor::vector((0..l).map(|_| rng.gen_range(-3.0..3.0)).collect());
                let v = layers(&mut rng, l, 4, 3);
                let s = sentence(&["a", "b", "c", "d"]);
                let mut tape = Tape::new();
                let r = enc.encode(&mut tape, &store, &s, Some(&v), &[Task::Arc], true, &mut rng).unwrap();
                let out = tape.value(r[0]).data();
                for (i, &x) in out.iter().enumerate() {
                    let lo = v.layers.iter().map(|t| t.data()[i]).fold(f64::INFINITY, f64::min);
                    let hi = v.layers.iter().map(|t| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }

            #[test]
            fn layer_mask_never_empty(seed in 0u64..10_000, l in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask = draw_layer_mask(l, 0.9, &mut rng);
                prop_assert!(mask.iter().any(|&k| k));
            }

            #[test]
            fn permuting_layers_with_equal_logits(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let enc = contextual(3, 2, &[Task::Arc], &mut store);
                let v = layers(&mut rng, 3, 3, 2);
                let rev = ContextualVectors::new(v.layers.iter().rev().cloned().collect(), "rev");
                let s = sentence(&["a", "b", "c"]);
                let mut tape = Tape::new();
                let a = enc.encode(&mut tape, &store, &s, Some(&v), &[Task::Arc], false, &mut rng).unwrap();
                let b = enc.encode(&mut tape, &store, &s, Some(&rev), &[Task::Arc], false, &mut rng).unwrap();
                for (x, y) in tape.value(a[0]).data().iter().zip(tape.value(b[0]).data()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
