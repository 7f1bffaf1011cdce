//! Mini-batch training with a Noam schedule, AdamW and early stopping on
//! the development set.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::Sentence;
use crate::encoder::ContextualVectors;
use crate::eval::{evaluate, EvalError, EvalReport, Metric};
use crate::loss::{
    loss_graph_factorized, loss_tree_factorized, loss_unfactorized, tag_weight, LossWeights, TaskMode,
};
use crate::model::{Factorization, GoldIndices, ModelError, ParserModel, Structure};
use crate::numeric::{noam_lr, AdamW, NumericError, Tape, Var};
use crate::tagger::tag_loss;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("numeric failure at epoch {epoch}, step {step}: {source}")]
    Numeric {
        epoch: usize,
        step: u64,
        source: NumericError,
    },

    #[error("invalid training configuration: {0}")]
    Config(String),

    #[error("{name} has {sentences} sentences but {vectors} vector blocks")]
    VectorCount {
        name: &'static str,
        sentences: usize,
        vectors: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task_mode: TaskMode,
    pub lambda_edge: f64,
    /// Defaults to 1.0 for trees and 0.05 for graphs.
    pub lambda_label: Option<f64>,
    pub tag_loss_scale: f64,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Warmup steps; defaults to one epoch.
    pub warmup_steps: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: Option<usize>,
    pub max_wallclock_secs: Option<f64>,
    /// Stops as soon as the dev selection metric reaches this value.
    pub target_score: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task_mode: TaskMode::DepOnly,
            lambda_edge: 1.0,
            lambda_label: None,
            tag_loss_scale: 0.05,
            batch_size: 32,
            base_lr: 4e-5,
            warmup_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            patience: 15,
            max_epochs: None,
            max_wallclock_secs: None,
            target_score: None,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn lambda_label(&self, structure: Structure) -> f64 {
        self.lambda_label.unwrap_or(match structure {
            Structure::Tree => 1.0,
            Structure::Graph => 0.05,
        })
    }

    pub fn weights(&self, structure: Structure) -> LossWeights {
        LossWeights {
            edge: self.lambda_edge,
            label: self.lambda_label(structure),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TrainError::Config(format!("{} must be positive, got {}", name, v)))
            }
        };
        positive("lambda_edge", self.lambda_edge)?;
        if let Some(l) = self.lambda_label {
            positive("lambda_label", l)?;
        }
        positive("tag_loss_scale", self.tag_loss_scale)?;
        positive("base_lr", self.base_lr)?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_steps == Some(0) {
            return Err(TrainError::Config("warmup_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sentences with their optional contextual vectors.
#[derive(Clone, Copy, Debug)]
pub struct Corpus<'a> {
    pub sentences: &'a [Sentence],
    pub vectors: Option<&'a [ContextualVectors]>,
}

impl<'a> Corpus<'a> {
    pub fn new(sentences: &'a [Sentence]) -> Self {
        Corpus {
            sentences,
            vectors: None,
        }
    }

    pub fn with_vectors(sentences: &'a [Sentence], vectors: Option<&'a [ContextualVectors]>) -> Self {
        Corpus { sentences, vectors }
    }

    fn check(&self, name: &'static str) -> Result<(), TrainError> {
        match self.vectors {
            Some(v) if v.len() != self.sentences.len() => Err(TrainError::VectorCount {
                name,
                sentences: self.sentences.len(),
                vectors: v.len(),
            }),
            _ => Ok(()),
        }
    }

    pub fn vectors_at(&self, i: usize) -> Option<&'a ContextualVectors> {
        self.vectors.map(|v| &v[i])
    }
}

/// Loss terms of one sentence on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SentenceLoss {
    pub dep: Var,
    pub upos: Option<Var>,
    pub ufeats: Option<Var>,
    pub total: Var,
}

/// Records the forward pass and the combined objective of one sentence.
#[allow(clippy::too_many_arguments)]
pub fn sentence_loss<R: Rng>(
    model: &ParserModel,
    tape: &mut Tape,
    sentence: &Sentence,
    gold: &GoldIndices,
    vectors: Option<&ContextualVectors>,
    config: &TrainConfig,
    training: bool,
    rng: &mut R,
) -> Result<SentenceLoss, ModelError> {
    let f = model.forward(tape, sentence, vectors, training, rng)?;
    let structure = model.config().structure;
    let w = config.weights(structure);
    let dep = match (model.config().factorization, structure) {
        (Factorization::Factorized, Structure::Tree) => {
            loss_tree_factorized(tape, f.arc.expect("factorized"), f.label, &gold.heads, &gold.edges, w)
        }
        (Factorization::Factorized, Structure::Graph) => {
            loss_graph_factorized(tape, f.arc.expect("factorized"), f.label, &gold.edges, w)
        }
        (Factorization::Unfactorized, _) => {
            let null = model.vocab().labels.null_index().expect("null label");
            loss_unfactorized(tape, f.label, &gold.edges, null)
        }
    }
    .total;
    let scale = tag_weight(config.task_mode, config.tag_loss_scale);
    let mut total = dep;
    let mut upos = None;
    let mut ufeats = None;
    if let (Some(u), Some(x)) = (f.upos, f.ufeats) {
        let lu = tag_loss(tape, u, &gold.upos);
        let lx = tag_loss(tape, x, &gold.ufeats);
        upos = Some(lu);
        ufeats = Some(lx);
        if scale > 0.0 {
            let tags = tape.add(lu, lx);
            let tags = tape.scale(tags, scale);
            total = tape.add(dep, tags);
        }
    }
    Ok(SentenceLoss {
        dep,
        upos,
        ufeats,
        total,
    })
}

/// Parses every sentence of `corpus`.
pub fn parse_corpus(model: &ParserModel, corpus: Corpus) -> Result<Vec<Sentence>, ModelError> {
    corpus
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| model.predict(s, corpus.vectors_at(i)))
        .collect()
}

/// Metric used for model selection.
pub fn selection_metric(structure: Structure) -> Metric {
    match structure {
        Structure::Tree => Metric::Las,
        Structure::Graph => Metric::Elas,
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub lr: f64,
    pub selection: f64,
    pub dev: std::collections::BTreeMap<String, f64>,
    pub best_epoch: usize,
    pub wallclock_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ParserModel,
    pub best_epoch: usize,
    pub best_score: f64,
    pub epochs: usize,
    pub log: Vec<EpochLog>,
}

fn report_map(report: &EvalReport) -> std::collections::BTreeMap<String, f64> {
    report.metrics.iter().map(|(m, s)| (m.name().to_owned(), s.f1)).collect()
}

/// Trains `model` in place and returns the best checkpoint on `dev`.
/// Training stops once `max(patience, 1)` epochs pass without a strict
/// improvement, or when an epoch, time or target limit is hit.
pub fn train(
    mut model: ParserModel,
    train_set: Corpus,
    dev: Corpus,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    train_set.check("training set")?;
    dev.check("development set")?;
    if train_set.sentences.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if dev.sentences.is_empty() {
        return Err(TrainError::Config("development set is empty".into()));
    }
    let golds = train_set
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| model.gold_indices(s, i))
        .collect::<Result<Vec<_>, _>>()?;

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new(config.beta1, config.beta2, config.eps, config.weight_decay);
    let batches_per_epoch = train_set.sentences.len().div_ceil(config.batch_size) as u64;
    let warmup = config.warmup_steps.unwrap_or(batches_per_epoch).max(1);
    let metric = selection_metric(model.config().structure);
    let patience = config.patience.max(1);

    let mut order: Vec<usize> = (0..train_set.sentences.len()).collect();
    let mut best: Option<(ParserModel, usize, f64)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut epoch = 0;
    model.store_mut().zero_grad();

    loop {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let sentence = &train_set.sentences[i];
                let l = sentence_loss(
                    &model,
                    &mut tape,
                    sentence,
                    &golds[i],
                    train_set.vectors_at(i),
                    config,
                    true,
                    &mut rng,
                )?;
                let scaled = tape.scale(l.total, inv);
                let numeric = |source| TrainError::Numeric {
                    epoch,
                    step: optimizer.steps_taken() + 1,
                    source,
                };
                tape.backward(scaled, model.store_mut()).map_err(numeric)?;
                loss_sum += tape.value(l.total).item();
            }
            let step = optimizer.steps_taken() + 1;
            lr = noam_lr(step, config.base_lr, warmup);
            optimizer
                .step(model.store_mut(), lr)
                .map_err(|source| TrainError::Numeric { epoch, step, source })?;
        }

        let predicted = parse_corpus(&model, dev)?;
        let report = evaluate(dev.sentences, &predicted)?;
        let score = report.value(metric);
        let improved = best.as_ref().map_or(true, |(_, _, b)| score > *b);
        if improved {
            best = Some((model.clone(), epoch, score));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let entry = EpochLog {
            epoch,
            steps: optimizer.steps_taken(),
            loss: loss_sum / train_set.sentences.len() as f64,
            lr,
            selection: score,
            dev: report_map(&report),
            best_epoch: best.as_ref().map_or(epoch, |b| b.1),
            wallclock_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} dev {} {:.4} (best {})",
            epoch,
            entry.loss,
            metric.name(),
            score,
            entry.best_epoch
        );
        on_epoch(&entry);
        log.push(entry);

        let out_of_patience = since_best >= patience;
        let out_of_epochs = config.max_epochs.is_some_and(|m| epoch >= m);
        let out_of_time = config
            .max_wallclock_secs
            .is_some_and(|s| started.elapsed().as_secs_f64() >= s);
        let reached = config.target_score.is_some_and(|t| score >= t);
        if out_of_patience || out_of_epochs || out_of_time || reached {
            break;
        }
    }

    let (best, best_epoch, best_score) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_score,
        epochs: epoch,
        log,
    })
}
