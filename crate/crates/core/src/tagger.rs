//! Single-layer UPOS and UFeats classifiers.

use rand::Rng;

use crate::numeric::{Init, ParamId, ParamStore, SoftmaxGroup, Tape, Tensor, Var};
use crate::scorer::argmax;

/// Linear map from token representations to logits over a tag set.
#[derive(Clone, Debug, PartialEq)]
pub struct TagHead {
    w: ParamId,
    b: ParamId,
    tags: usize,
}

impl TagHead {
    pub fn new<R: Rng>(prefix: &str, input_dim: usize, tags: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        TagHead {
            w: store.init(&format!("{}.w", prefix), &[input_dim, tags], Init::FanIn(input_dim), rng),
            b: store.init(&format!("{}.b", prefix), &[tags], Init::Zeros, rng),
            tags,
        }
    }

    pub fn num_tags(&self) -> usize {
        self.tags
    }

    /// Records `r W + b` and returns the `n x tags` logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, r: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(r, w);
        tape.add_row(y, b)
    }

    pub fn params(&self) -> (ParamId, ParamId) {
        (self.w, self.b)
    }
}

/// Logits for every token of a representation matrix.
pub fn tag_scores(head: &TagHead, store: &ParamStore, r: &Tensor) -> Tensor {
    if r.rows() == 0 {
        return Tensor::matrix(0, head.num_tags(), Vec::new());
    }
    let mut tape = Tape::new();
    let rv = tape.constant(r.clone());
    let out = head.forward(&mut tape, store, rv);
    tape.value(out).clone()
}

/// Row-wise argmax, ties to the lowest index.
pub fn predict_tags(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

/// Mean cross-entropy of `logits` (`n x tags`) against gold indices.
pub fn tag_loss(tape: &mut Tape, logits: Var, gold: &[usize]) -> Var {
    let tags = tape.value(logits).cols();
    let groups = gold
        .iter()
        .enumerate()
        .map(|(i, &t)| SoftmaxGroup {
            base: i * tags,
            stride: 1,
            len: tags,
            target: t,
        })
        .collect();
    tape.softmax_xent(logits, groups)
}
