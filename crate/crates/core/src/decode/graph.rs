//! Enhanced graph decoding and root-reachability repair.

use std::collections::VecDeque;

use crate::numeric::{sigmoid, Tensor};
use crate::scorer::{softmax, ScoreKind, ScoreTensor};

use super::tree::{best_label, check, same_length};
use super::DecodeError;

/// A labeled edge; `dependent` is 1-based and `head` 0 means the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub head: usize,
    pub dependent: usize,
    pub label: usize,
}

pub fn decode_graph_factorized(arc: &ScoreTensor, labels: &ScoreTensor) -> Result<Vec<Edge>, DecodeError> {
    check(arc, ScoreKind::ArcGraph)?;
    check(labels, ScoreKind::Label)?;
    same_length(arc, labels)?;
    let n = arc.n();
    let mut edges = Vec::new();
    for d in 0..n {
        for h in 0..=n {
            // sigmoid(s) > 0.5 exactly when s > 0.
            if h != d + 1 && arc.at(h, d, 0) > 0.0 {
                edges.push(Edge {
                    head: h,
                    dependent: d + 1,
                    label: best_label(labels, h, d, None),
                });
            }
        }
    }
    Ok(edges)
}

pub fn decode_graph_unfactorized(labels: &ScoreTensor, null: usize) -> Result<Vec<Edge>, DecodeError> {
    check(labels, ScoreKind::LabelWithNull)?;
    let n = labels.n();
    let mut edges = Vec::new();
    for d in 0..n {
        for h in 0..=n {
            if h == d + 1 {
                continue;
            }
            let best = best_label(labels, h, d, None);
            if best != null {
                edges.push(Edge {
                    head: h,
                    dependent: d + 1,
                    label: best,
                });
            }
        }
    }
    Ok(edges)
}

/// Edge-existence belief and best label for every ordered pair, used to
/// pick repair edges.
#[derive(Clone, Debug, PartialEq)]
pub struct RepairScores {
    n: usize,
    scores: Tensor,
    labels: Vec<usize>,
}

impl RepairScores {
    /// Arc-existence probability with the label scorer's argmax.
    pub fn factorized(arc: &ScoreTensor, labels: &ScoreTensor) -> Result<Self, DecodeError> {
        check(arc, ScoreKind::ArcGraph)?;
        same_length(arc, labels)?;
        let n = arc.n();
        Ok(Self::build(n, |h, d| {
            (sigmoid(arc.at(h, d, 0)), best_label(labels, h, d, None))
        }))
    }

    /// `1 - P(∅)` with the best non-∅ label.
    pub fn unfactorized(labels: &ScoreTensor, null: usize) -> Result<Self, DecodeError> {
        check(labels, ScoreKind::LabelWithNull)?;
        if labels.n() > 0 && labels.k() < 2 {
            return Err(DecodeError::NoLabels);
        }
        Ok(Self::build(labels.n(), |h, d| {
            let p = softmax(labels.cell(h, d));
            (1.0 - p[null], best_label(labels, h, d, Some(null)))
        }))
    }

    /// Direct construction from `f(head, dependent0) -> (score, label)`.
    pub fn build(n: usize, f: impl Fn(usize, usize) -> (f64, usize)) -> Self {
        let mut scores = Tensor::zeros(&[n + 1, n]);
        let mut labels = vec![0; (n + 1) * n];
        for h in 0..=n {
            for d in 0..n {
                let (s, l) = f(h, d);
                scores.data_mut()[h * n + d] = s;
                labels[h * n + d] = l;
            }
        }
        RepairScores { n, scores, labels }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Score of `head -> dependent` (1-based dependent).
    pub fn score(&self, head: usize, dependent: usize) -> f64 {
        self.scores.at2(head, dependent - 1)
    }

    pub fn label(&self, head: usize, dependent: usize) -> usize {
        self.labels[head * self.n + dependent - 1]
    }
}

fn reachable_from_root(n: usize, edges: &[Edge]) -> Vec<bool> {
    let mut children = vec![Vec::new(); n + 1];
    for e in edges {
        children[e.head].push(e.dependent);
    }
    let mut seen = vec![false; n + 1];
    seen[0] = true;
    let mut queue = VecDeque::from([0]);
    while let Some(u) = queue.pop_front() {
        for &v in &children[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

/// True when every token is reachable from the root.
pub fn is_root_reachable(n: usize, edges: &[Edge]) -> bool {
    reachable_from_root(n, edges).iter().all(|&r| r)
}

/// Adds, one at a time, the highest-scoring edge from a reachable node to
/// an unreachable one until every token is reachable. Ties prefer the
/// lower head, then the lower dependent. Existing edges are kept and the
/// additions are appended in the order chosen.
pub fn ensure_connected(edges: &[Edge], scores: &RepairScores) -> Vec<Edge> {
    let n = scores.n();
    let mut out = edges.to_vec();
    let mut reach = reachable_from_root(n, &out);
    while reach.iter().any(|&r| !r) {
        let mut best: Option<(f64, usize, usize)> = None;
        for u in (0..=n).filter(|&u| reach[u]) {
            for v in (1..=n).filter(|&v| !reach[v] && v != u) {
                let s = scores.score(u, v);
                if best.map_or(true, |(b, _, _)| s > b) {
                    best = Some((s, u, v));
                }
            }
        }
        let (_, u, v) = best.expect("an unreachable token always has a candidate edge");
        out.push(Edge {
            head: u,
            dependent: v,
            label: scores.label(u, v),
        });
        reach = reachable_from_root(n, &out);
    }
    out
}
