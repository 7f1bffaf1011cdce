//! The parser: encoder, scorers, tag heads, vocabularies and decoding
//! configuration, plus checkpoint persistence.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::Sentence;
use crate::decode::{
    decode_graph_factorized, decode_graph_unfactorized, decode_tree_factorized, decode_tree_unfactorized,
    ensure_connected, DecodeError, Edge, RepairScores,
};
use crate::encoder::{ContextualVectors, EncoderConfig, EncoderError, Task, TokenEncoder, WordVocab};
use crate::lexicalize::{delexicalize, relexicalize, LexRuleConfig};
use crate::numeric::{read_container, write_container, Activation, ParamStore, Tape, Var};
use crate::scorer::{BiaffineScorer, ScoreError, ScoreKind, ScoreTensor, ScorerShape};
use crate::tagger::{predict_tags, TagHead};
use crate::vocab::{LabelVocabulary, TagVocabulary};

const MODEL_FORMAT: &str = "udparse-model";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),

    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error(transparent)]
    Score(#[from] ScoreError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("sentence {sentence}: {message}")]
    Gold { sentence: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factorization {
    Factorized,
    Unfactorized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Tree,
    Graph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub factorization: Factorization,
    pub structure: Structure,
    pub encoder: EncoderConfig,
    /// Arc scorer width; defaults to the representation size.
    pub arc_dim: Option<usize>,
    /// Label scorer width; defaults to 256 when factorized and to the
    /// representation size when unfactorized.
    pub label_dim: Option<usize>,
    pub activation: Activation,
    pub scorer_dropout: f64,
    pub single_root: bool,
    /// Adds UPOS and UFeats heads.
    pub tagging: bool,
    pub lexicalization: LexRuleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            factorization: Factorization::Factorized,
            structure: Structure::Tree,
            encoder: EncoderConfig::default(),
            arc_dim: None,
            label_dim: None,
            activation: Activation::default(),
            scorer_dropout: 0.33,
            single_root: true,
            tagging: false,
            lexicalization: LexRuleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn arc_dim(&self) -> usize {
        self.arc_dim.unwrap_or_else(|| self.encoder.output_dim())
    }

    pub fn label_dim(&self) -> usize {
        self.label_dim.unwrap_or(match self.factorization {
            Factorization::Factorized => 256,
            Factorization::Unfactorized => self.encoder.output_dim(),
        })
    }

    fn tasks(&self) -> Vec<Task> {
        let mut tasks = Vec::new();
        if self.factorization == Factorization::Factorized {
            tasks.push(Task::Arc);
        }
        tasks.push(Task::Label);
        if self.tagging {
            tasks.extend([Task::Upos, Task::Ufeats]);
        }
        tasks
    }
}

/// Vocabularies extracted from the training split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVocab {
    pub labels: LabelVocabulary,
    pub upos: TagVocabulary,
    pub ufeats: TagVocabulary,
    pub words: Option<WordVocab>,
}

impl ModelVocab {
    pub fn build(config: &ModelConfig, train: &[Sentence]) -> Self {
        let with_null = config.factorization == Factorization::Unfactorized;
        let labels: Vec<String> = match config.structure {
            Structure::Tree => train
                .iter()
                .flat_map(|s| s.tokens.iter().filter_map(|t| t.deprel.clone()))
                .collect(),
            Structure::Graph => train
                .iter()
                .flat_map(|s| {
                    delexicalize(s, &config.lexicalization)
                        .tokens
                        .into_iter()
                        .flat_map(|t| t.deps.into_iter().map(|(_, l)| l))
                })
                .collect(),
        };
        let upos: Vec<&str> = train.iter().flat_map(|s| s.tokens.iter().map(|t| t.upos.as_str())).collect();
        let feats: Vec<String> = train.iter().flat_map(|s| s.tokens.iter().map(|t| t.feats_string())).collect();
        let words = match config.encoder.source {
            crate::encoder::SourceConfig::Static { min_count, .. } => Some(WordVocab::build(train, min_count)),
            crate::encoder::SourceConfig::Contextual { .. } => None,
        };
        ModelVocab {
            labels: LabelVocabulary::build(labels.iter().map(String::as_str), with_null),
            upos: TagVocabulary::build(upos),
            ufeats: TagVocabulary::build(feats.iter().map(String::as_str)),
            words,
        }
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub arc: Option<Var>,
    pub label: Var,
    pub upos: Option<Var>,
    pub ufeats: Option<Var>,
}

/// Gold targets of one sentence as vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldIndices {
    pub heads: Vec<usize>,
    /// Labelled edges `(head, dependent 1-based, label)`. For trees one per token.
    pub edges: Vec<(usize, usize, usize)>,
    pub upos: Vec<usize>,
    pub ufeats: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    config: ModelConfig,
    vocab: ModelVocab,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParserModel {
    config: ModelConfig,
    vocab: ModelVocab,
    store: ParamStore,
    encoder: TokenEncoder,
    arc: Option<BiaffineScorer>,
    label: BiaffineScorer,
    upos: Option<TagHead>,
    ufeats: Option<TagHead>,
}

impl ParserModel {
    /// Builds vocabularies from `train` and initializes parameters from `seed`.
    pub fn new(config: ModelConfig, train: &[Sentence], seed: u64) -> Self {
        let vocab = ModelVocab::build(&config, train);
        Self::with_vocab(config, vocab, seed)
    }

    pub fn with_vocab(config: ModelConfig, vocab: ModelVocab, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = TokenEncoder::new(
            config.encoder.clone(),
            &[],
            vocab.words.clone(),
            &config.tasks(),
            &mut store,
            &mut rng,
        );
        let d = encoder.output_dim();
        let arc = (config.factorization == Factorization::Factorized).then(|| {
            let shape = ScorerShape {
                input_dim: d,
                hidden_dim: config.arc_dim(),
                channels: 1,
            };
            BiaffineScorer::new("arc", shape, config.activation, &mut store, &mut rng)
        });
        let label_shape = ScorerShape {
            input_dim: d,
            hidden_dim: config.label_dim(),
            channels: vocab.labels.len().max(1),
        };
        let label = BiaffineScorer::new("label", label_shape, config.activation, &mut store, &mut rng);
        let (upos, ufeats) = if config.tagging {
            (
                Some(TagHead::new("upos", d, vocab.upos.len(), &mut store, &mut rng)),
                Some(TagHead::new("ufeats", d, vocab.ufeats.len(), &mut store, &mut rng)),
            )
        } else {
            (None, None)
        };
        ParserModel {
            config,
            vocab,
            store,
            encoder,
            arc,
            label,
            upos,
            ufeats,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &ModelVocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &TokenEncoder {
        &self.encoder
    }

    pub fn arc_kind(&self) -> ScoreKind {
        match self.config.structure {
            Structure::Tree => ScoreKind::ArcTree,
            Structure::Graph => ScoreKind::ArcGraph,
        }
    }

    pub fn label_kind(&self) -> ScoreKind {
        match self.config.factorization {
            Factorization::Factorized => ScoreKind::Label,
            Factorization::Unfactorized => ScoreKind::LabelWithNull,
        }
    }

    /// Gold side of a sentence. Graph labels are delexicalized first;
    /// labels unseen in training are an error.
    pub fn gold_indices(&self, sentence: &Sentence, index: usize) -> Result<GoldIndices, ModelError> {
        let err = |message: String| ModelError::Gold {
            sentence: index + 1,
            message,
        };
        let label_index = |l: &str| {
            self.vocab
                .labels
                .index(l)
                .ok_or_else(|| err(format!("label {:?} not in the vocabulary", l)))
        };
        let (heads, edges) = match self.config.structure {
            Structure::Tree => {
                let heads = sentence.heads().ok_or_else(|| err("missing basic heads".into()))?;
                let mut edges = Vec::with_capacity(heads.len());
                for (t, &h) in sentence.tokens.iter().zip(&heads) {
                    let l = t.deprel.as_deref().ok_or_else(|| err("missing deprel".into()))?;
                    edges.push((h, t.id, label_index(l)?));
                }
                (heads, edges)
            }
            Structure::Graph => {
                if !sentence.tokens.is_empty() && !sentence.has_enhanced() {
                    return Err(err("missing enhanced dependencies".into()));
                }
                let delex = delexicalize(sentence, &self.config.lexicalization);
                let mut edges = Vec::new();
                for (h, d, l) in delex.enhanced_edges() {
                    edges.push((h, d, label_index(&l)?));
                }
                (Vec::new(), edges)
            }
        };
        Ok(GoldIndices {
            heads,
            edges,
            upos: sentence.tokens.iter().map(|t| self.vocab.upos.index(&t.upos)).collect(),
            ufeats: sentence
                .tokens
                .iter()
                .map(|t| self.vocab.ufeats.index(&t.feats_string()))
                .collect(),
        })
    }

    /// Records the full network for one sentence.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        sentence: &Sentence,
        vectors: Option<&ContextualVectors>,
        training: bool,
        rng: &mut R,
    ) -> Result<Forward, ModelError> {
        let tasks = self.config.tasks();
        let reps = self
            .encoder
            .encode(tape, &self.store, sentence, vectors, &tasks, training, rng)?;
        let rep = |task: Task| reps[tasks.iter().position(|&t| t == task).expect("task encoded")];
        let p = self.config.scorer_dropout;
        let arc = match &self.arc {
            Some(s) => Some(s.forward(tape, &self.store, rep(Task::Arc), p, training, rng)),
            None => None,
        };
        let label = self.label.forward(tape, &self.store, rep(Task::Label), p, training, rng);
        let upos = self.upos.as_ref().map(|h| h.forward(tape, &self.store, rep(Task::Upos)));
        let ufeats = self.ufeats.as_ref().map(|h| h.forward(tape, &self.store, rep(Task::Ufeats)));
        Ok(Forward {
            arc,
            label,
            upos,
            ufeats,
        })
    }

    /// Inference-time score tensors: the arc tensor (factorized only)
    /// followed by the label tensor.
    pub fn score(&self, sentence: &Sentence, vectors: Option<&ContextualVectors>) -> Result<Vec<ScoreTensor>, ModelError> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(&mut tape, sentence, vectors, false, &mut rng)?;
        let mut out = Vec::new();
        if let Some(a) = f.arc {
            out.push(ScoreTensor::new(self.arc_kind(), tape.value(a).clone())?);
        }
        out.push(ScoreTensor::new(self.label_kind(), tape.value(f.label).clone())?);
        Ok(out)
    }

    /// Parses one sentence and writes the predictions into a copy of it.
    pub fn predict(&self, sentence: &Sentence, vectors: Option<&ContextualVectors>) -> Result<Sentence, ModelError> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(&mut tape, sentence, vectors, false, &mut rng)?;
        let mut tensors = Vec::new();
        if let Some(a) = f.arc {
            tensors.push(ScoreTensor::new(self.arc_kind(), tape.value(a).clone())?);
        }
        tensors.push(ScoreTensor::new(self.label_kind(), tape.value(f.label).clone())?);
        let mut out = self.apply_scores(sentence, &tensors)?;
        if let (Some(u), Some(x)) = (f.upos, f.ufeats) {
            for (t, i) in out.tokens.iter_mut().zip(predict_tags(tape.value(u))) {
                t.upos = self.vocab.upos.tag(i).to_owned();
            }
            for (t, i) in out.tokens.iter_mut().zip(predict_tags(tape.value(x))) {
                t.set_feats_string(self.vocab.ufeats.tag(i));
            }
        }
        Ok(out)
    }

    /// Copy of `sentence` with every layer this model predicts cleared, so
    /// no gold annotation leaks into the output.
    fn blank(&self, sentence: &Sentence) -> Sentence {
        let mut out = sentence.clone();
        for t in &mut out.tokens {
            t.head = None;
            t.deprel = None;
            t.deps.clear();
            if !self.config.tagging {
                t.upos = "_".into();
                t.feats.clear();
            }
        }
        out
    }

    /// Decodes score tensors (as produced by [`ParserModel::score`]) into
    /// a copy of `sentence`. Layers the model does not predict are blank.
    pub fn apply_scores(&self, sentence: &Sentence, tensors: &[ScoreTensor]) -> Result<Sentence, ModelError> {
        let mut out = self.blank(sentence);
        let n = sentence.len();
        if n == 0 {
            return Ok(out);
        }
        let null = self.vocab.labels.null_index();
        let expected = if self.arc.is_some() { 2 } else { 1 };
        if tensors.len() != expected {
            return Err(ModelError::Checkpoint(format!(
                "expected {} score tensors, found {}",
                expected,
                tensors.len()
            )));
        }
        let label_scores = tensors.last().expect("at least one tensor");
        match self.config.structure {
            Structure::Tree => {
                let tree = match self.config.factorization {
                    Factorization::Factorized => {
                        decode_tree_factorized(&tensors[0], label_scores, self.config.single_root)?
                    }
                    Factorization::Unfactorized => decode_tree_unfactorized(
                        label_scores,
                        null.expect("unfactorized vocabulary has a null label"),
                        self.config.single_root,
                    )?,
                };
                for (t, (&h, &l)) in out.tokens.iter_mut().zip(tree.heads.iter().zip(&tree.labels)) {
                    t.head = Some(h);
                    t.deprel = Some(self.vocab.labels.label(l).to_owned());
                }
            }
            Structure::Graph => {
                let (edges, repair) = match self.config.factorization {
                    Factorization::Factorized => (
                        decode_graph_factorized(&tensors[0], label_scores)?,
                        RepairScores::factorized(&tensors[0], label_scores)?,
                    ),
                    Factorization::Unfactorized => {
                        let null = null.expect("unfactorized vocabulary has a null label");
                        (
                            decode_graph_unfactorized(label_scores, null)?,
                            RepairScores::unfactorized(label_scores, null)?,
                        )
                    }
                };
                let edges = ensure_connected(&edges, &repair);
                self.write_edges(&mut out, &edges);
                out = relexicalize(&out, &self.config.lexicalization);
            }
        }
        Ok(out)
    }

    fn write_edges(&self, sentence: &mut Sentence, edges: &[Edge]) {
        for t in &mut sentence.tokens {
            t.deps.clear();
        }
        for e in edges {
            let label = self.vocab.labels.label(e.label).to_owned();
            sentence.tokens[e.dependent - 1].deps.insert((e.head, label));
        }
    }

    pub fn save<W: Write>(&self, w: W) -> Result<(), ModelError> {
        let meta = Meta {
            format: MODEL_FORMAT.into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        let json = serde_json::to_string(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        write_container(w, &json, &self.store)?;
        Ok(())
    }

    /// Writes the checkpoint through a temporary file in the same directory.
    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        self.save(std::io::BufWriter::new(tmp.as_file_mut()))?;
        tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self, ModelError> {
        let container = read_container(r)?;
        let meta: Meta =
            serde_json::from_str(&container.meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if meta.format != MODEL_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format {:?}", meta.format)));
        }
        let mut model = Self::with_vocab(meta.config, meta.vocab, 0);
        if container.params.len() != model.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} parameters stored, model has {}",
                container.params.len(),
                model.store.len()
            )));
        }
        for p in model.store.iter_mut() {
            let id = container
                .params
                .id(&p.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {}", p.name)))?;
            let stored = &container.params.get(id).value;
            if stored.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    stored.shape(),
                    p.value.shape()
                )));
            }
            p.value = stored.clone();
        }
        Ok(model)
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
