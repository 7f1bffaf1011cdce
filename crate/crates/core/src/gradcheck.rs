//! Finite-difference check of the analytic gradients of the full training
//! objective on small random models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::{Sentence, Token};
use crate::encoder::{ContextualVectors, EncoderConfig, SourceConfig};
use crate::loss::TaskMode;
use crate::model::{Factorization, ModelConfig, ModelError, ParserModel, Structure};
use crate::numeric::{NumericError, OpKind, Tape, Tensor};
use crate::train::{sentence_loss, TrainConfig};

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Random instances per architecture cell.
    pub instances: usize,
    pub max_tokens: usize,
    /// Representation width handed to the scorers.
    pub dim: usize,
    pub arc_dim: usize,
    pub label_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates sampled per parameter; `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            max_tokens: 5,
            dim: 16,
            arc_dim: 8,
            label_dim: 6,
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellReport {
    pub factorization: Factorization,
    pub structure: Structure,
    pub instances: usize,
    pub checked: usize,
    /// Largest relative error per parameter name.
    pub params: BTreeMap<String, f64>,
}

impl CellReport {
    pub fn name(&self) -> String {
        let f = match self.factorization {
            Factorization::Factorized => "factorized",
            Factorization::Unfactorized => "unfactorized",
        };
        let s = match self.structure {
            Structure::Tree => "tree",
            Structure::Graph => "graph",
        };
        format!("{}-{}", f, s)
    }

    pub fn max_error(&self) -> f64 {
        self.params.values().copied().fold(0.0, f64::max)
    }

    /// Largest error over parameters whose name starts with `prefix`.
    pub fn max_error_for(&self, prefix: &str) -> Option<f64> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, &v)| v)
            .reduce(f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cells: Vec<CellReport>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.cells.iter().map(CellReport::max_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for cell in &self.cells {
            writeln!(
                f,
                "{} ({} instances, {} coordinates)",
                cell.name(),
                cell.instances,
                cell.checked
            )?;
            for (name, err) in &cell.params {
                let mark = if *err < self.tolerance { "ok" } else { "FAIL" };
                writeln!(f, "  {:<24} {:>10.3e}  {}", name, err, mark)?;
            }
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.0e}): {}",
            self.max_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

const LABELS: [&str; 5] = ["nsubj", "obj", "obl", "advmod", "amod"];
const UPOS: [&str; 4] = ["NOUN", "VERB", "ADJ", "ADV"];
const FEATS: [&str; 3] = ["_", "Number=Sing", "Number=Plur"];

/// A random single-rooted tree with random tags, and for graphs a few
/// extra enhanced edges.
pub fn random_sentence<R: Rng>(n: usize, graph: bool, rng: &mut R) -> Sentence {
    let mut order: Vec<usize> = (1..=n).collect();
    order.shuffle(rng);
    let mut heads = vec![0; n + 1];
    for (i, &d) in order.iter().enumerate().skip(1) {
        heads[d] = order[rng.gen_range(0..i)];
    }
    let mut tokens: Vec<Token> = (1..=n)
        .map(|i| {
            let mut t = Token::new(i, format!("w{}", rng.gen_range(0..4)));
            t.upos = UPOS[rng.gen_range(0..UPOS.len())].into();
            t.set_feats_string(FEATS[rng.gen_range(0..FEATS.len())]);
            let label = if heads[i] == 0 {
                "root"
            } else {
                LABELS[rng.gen_range(0..LABELS.len())]
            };
            t.head = Some(heads[i]);
            t.deprel = Some(label.into());
            t.deps.insert((heads[i], label.into()));
            t
        })
        .collect();
    if graph {
        for _ in 0..rng.gen_range(0..=n) {
            let d = rng.gen_range(1..=n);
            let h = rng.gen_range(1..=n);
            if h != d && !tokens[d - 1].deps.iter().any(|(x, _)| *x == h) {
                tokens[d - 1].deps.insert((h, LABELS[rng.gen_range(0..LABELS.len())].into()));
            }
        }
    }
    Sentence::from_tokens(tokens)
}

fn random_vectors<R: Rng>(n: usize, layers: usize, dim: usize, rng: &mut R) -> ContextualVectors {
    let layers = (0..layers)
        .map(|_| Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    ContextualVectors::new(layers, "random")
}

/// Small model config: contextual input on even instances, static on odd.
fn instance_config(cell: (Factorization, Structure), contextual: bool, c: &GradcheckConfig) -> ModelConfig {
    let source = if contextual {
        SourceConfig::Contextual { layers: 3, dim: c.dim }
    } else {
        let word_dim = (c.dim / 4).max(1);
        SourceConfig::Static {
            word_dim,
            position_dim: c.dim.saturating_sub(3 * word_dim).max(1),
            window: 1,
            max_positions: c.max_tokens + 1,
            min_count: 1,
        }
    };
    ModelConfig {
        factorization: cell.0,
        structure: cell.1,
        encoder: EncoderConfig {
            source,
            ..Default::default()
        },
        arc_dim: Some(c.arc_dim),
        label_dim: Some(c.label_dim),
        tagging: true,
        ..Default::default()
    }
}

pub const CELLS: [(Factorization, Structure); 4] = [
    (Factorization::Factorized, Structure::Tree),
    (Factorization::Factorized, Structure::Graph),
    (Factorization::Unfactorized, Structure::Tree),
    (Factorization::Unfactorized, Structure::Graph),
];

/// Checks one architecture cell. Dropout and token masking are active;
/// every loss evaluation reseeds the generator so the same masks are drawn.
pub fn check_cell(
    cell: (Factorization, Structure),
    config: &GradcheckConfig,
    fault: Option<OpKind>,
) -> Result<CellReport, GradcheckError> {
    let cell_seed = config.seed.wrapping_mul(31).wrapping_add(CELLS.iter().position(|c| *c == cell).unwrap_or(0) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
    let train = TrainConfig {
        task_mode: TaskMode::Mtl,
        ..Default::default()
    };
    let mut params: BTreeMap<String, f64> = BTreeMap::new();
    let mut checked = 0;
    for instance in 0..config.instances {
        let n = rng.gen_range(1..=config.max_tokens.max(1));
        let sentence = random_sentence(n, cell.1 == Structure::Graph, &mut rng);
        let contextual = instance % 2 == 0;
        let model_config = instance_config(cell, contextual, config);
        let vectors = contextual.then(|| random_vectors(n, 3, config.dim, &mut rng));
        let mut model = ParserModel::new(model_config, std::slice::from_ref(&sentence), rng.gen());
        // Push SiLU inputs away from zero-gradient plateaus.
        for p in model.store_mut().iter_mut() {
            if p.value.data().iter().all(|&x| x == 0.0) {
                p.value.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
            }
        }
        let gold = model.gold_indices(&sentence, 0)?;
        let mask_seed: u64 = rng.gen();

        let loss_at = |model: &ParserModel| -> Result<f64, ModelError> {
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
            let l = sentence_loss(model, &mut tape, &sentence, &gold, vectors.as_ref(), &train, true, &mut r)?;
            Ok(tape.value(l.total).item())
        };

        model.store_mut().zero_grad();
        {
            let mut tape = match fault {
                Some(kind) => Tape::with_fault(kind),
                None => Tape::new(),
            };
            let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
            let l = sentence_loss(&model, &mut tape, &sentence, &gold, vectors.as_ref(), &train, true, &mut r)?;
            let mut store = model.store().clone();
            tape.backward(l.total, &mut store)?;
            *model.store_mut() = store;
        }

        let ids: Vec<_> = model.store().ids().collect();
        for id in ids {
            let (name, len) = {
                let p = model.store().get(id);
                (p.name.clone(), p.value.len())
            };
            let mut entries: Vec<usize> = (0..len).collect();
            if let Some(m) = config.max_entries {
                entries.shuffle(&mut rng);
                entries.truncate(m);
                entries.sort_unstable();
            }
            let mut worst: f64 = 0.0;
            for j in entries {
                let analytic = model.store().get(id).grad.data()[j];
                let orig = model.store().get(id).value.data()[j];
                model.store_mut().get_mut(id).value.data_mut()[j] = orig + config.step;
                let plus = loss_at(&model)?;
                model.store_mut().get_mut(id).value.data_mut()[j] = orig - config.step;
                let minus = loss_at(&model)?;
                model.store_mut().get_mut(id).value.data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * config.step);
                worst = worst.max(relative_error(analytic, numeric, config.floor));
                checked += 1;
            }
            let slot = params.entry(name).or_insert(0.0);
            *slot = slot.max(worst);
        }
    }
    Ok(CellReport {
        factorization: cell.0,
        structure: cell.1,
        instances: config.instances,
        checked,
        params,
    })
}

/// Runs every architecture cell.
pub fn gradcheck(config: &GradcheckConfig, fault: Option<OpKind>) -> Result<GradcheckReport, GradcheckError> {
    let cells = CELLS
        .iter()
        .map(|&cell| check_cell(cell, config, fault))
        .collect::<Result<_, _>>()?;
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        cells,
    })
}

/// Parameter names seen across all cells.
pub fn parameter_names(report: &GradcheckReport) -> BTreeSet<String> {
    report.cells.iter().flat_map(|c| c.params.keys().cloned()).collect()
}
