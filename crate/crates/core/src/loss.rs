//! Per-sentence training objectives for the four architecture cells and
//! the multi-task combination.

use serde::{Deserialize, Serialize};

use crate::numeric::{SoftmaxGroup, Tape, Var};

/// Components of a dependency loss, each a scalar on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DepLoss {
    pub edge: Option<Var>,
    pub label: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub edge: f64,
    pub label: f64,
}

fn combine(tape: &mut Tape, edge: Var, label: Var, w: LossWeights) -> DepLoss {
    let e = tape.scale(edge, w.edge);
    let l = tape.scale(label, w.label);
    DepLoss {
        edge: Some(edge),
        label,
        total: tape.add(e, l),
    }
}

fn shape3(tape: &Tape, x: Var) -> (usize, usize) {
    let s = tape.value(x).shape();
    (s[1], s[2])
}

/// Label cross-entropy at the given `(head, dependent 1-based, label)` edges.
fn label_xent(tape: &mut Tape, labels: Var, edges: &[(usize, usize, usize)]) -> Var {
    let (n, k) = shape3(tape, labels);
    let groups = edges
        .iter()
        .map(|&(h, d, l)| SoftmaxGroup {
            base: (h * n + d - 1) * k,
            stride: 1,
            len: k,
            target: l,
        })
        .collect();
    tape.softmax_xent(labels, groups)
}

/// Head cross-entropy over all `n+1` candidates per dependent, plus label
/// cross-entropy at the gold edges.
pub fn loss_tree_factorized(
    tape: &mut Tape,
    arc: Var,
    labels: Var,
    heads: &[usize],
    edges: &[(usize, usize, usize)],
    w: LossWeights,
) -> DepLoss {
    let (n, _) = shape3(tape, arc);
    assert_eq!(heads.len(), n, "one gold head per token");
    let groups = heads
        .iter()
        .enumerate()
        .map(|(d, &h)| SoftmaxGroup {
            base: d,
            stride: n,
            len: n + 1,
            target: h,
        })
        .collect();
    let edge = tape.softmax_xent(arc, groups);
    let label = label_xent(tape, labels, edges);
    combine(tape, edge, label, w)
}

/// Binary cross-entropy over every ordered pair without self loops, plus
/// label cross-entropy at the gold edges.
pub fn loss_graph_factorized(tape: &mut Tape, arc: Var, labels: Var, edges: &[(usize, usize, usize)], w: LossWeights) -> DepLoss {
    let (n, _) = shape3(tape, arc);
    let mut gold = vec![false; (n + 1) * n];
    for &(h, d, _) in edges {
        gold[h * n + d - 1] = true;
    }
    let entries = (0..=n)
        .flat_map(|h| (0..n).filter(move |&d| h != d + 1).map(move |d| h * n + d))
        .map(|i| (i, gold[i]))
        .collect();
    let edge = tape.sigmoid_bce(arc, entries);
    let label = label_xent(tape, labels, edges);
    combine(tape, edge, label, w)
}

/// Cross-entropy over every ordered pair without self loops, the gold
/// class being the edge label or `null`. Only the first gold label of a
/// pair is used.
pub fn loss_unfactorized(tape: &mut Tape, labels: Var, edges: &[(usize, usize, usize)], null: usize) -> DepLoss {
    let (n, k) = shape3(tape, labels);
    let mut gold = vec![null; (n + 1) * n];
    let mut sorted = edges.to_vec();
    sorted.sort();
    for &(h, d, l) in sorted.iter().rev() {
        gold[h * n + d - 1] = l;
    }
    let groups = (0..=n)
        .flat_map(|h| (0..n).filter(move |&d| h != d + 1).map(move |d| h * n + d))
        .map(|i| SoftmaxGroup {
            base: i * k,
            stride: 1,
            len: k,
            target: gold[i],
        })
        .collect();
    let label = tape.softmax_xent(labels, groups);
    DepLoss {
        edge: None,
        label,
        total: label,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    DepOnly,
    Mtl,
    MtlScale,
}

/// Weight on the tag losses for a task mode.
pub fn tag_weight(mode: TaskMode, tag_loss_scale: f64) -> f64 {
    match mode {
        TaskMode::DepOnly => 0.0,
        TaskMode::Mtl => 1.0,
        TaskMode::MtlScale => tag_loss_scale,
    }
}

/// Scalar form of the multi-task combination.
pub fn total_loss(dep: f64, upos: f64, ufeats: f64, mode: TaskMode, tag_loss_scale: f64) -> f64 {
    match mode {
        TaskMode::DepOnly => dep,
        _ => dep + tag_weight(mode, tag_loss_scale) * (upos + ufeats),
    }
}
