//! Exhaustive reference implementations used by unit and integration tests.

#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

/// True if `heads` (0 = root, tokens 1-based) forms an arborescence rooted
/// at 0, optionally with exactly one root child.
pub fn is_tree(heads: &[usize], single_root: bool) -> bool {
    let n = heads.len();
    if heads.iter().enumerate().any(|(d, &h)| h > n || h == d + 1) {
        return false;
    }
    if single_root && heads.iter().filter(|&&h| h == 0).count() != 1 {
        return false;
    }
    for start in 1..=n {
        let mut v = start;
        let mut steps = 0;
        while v != 0 {
            v = heads[v - 1];
            steps += 1;
            if steps > n {
                return false;
            }
        }
    }
    true
}

/// Best arborescence by enumerating every head assignment; `w(h, d)` scores
/// head `h` for the 0-based dependent `d`. Ties keep the first assignment
/// in lexicographic order.
pub fn brute_force_best(n: usize, w: &dyn Fn(usize, usize) -> f64, single_root: bool) -> Option<(f64, Vec<usize>)> {
    let mut heads = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if is_tree(&heads, single_root) {
            let score: f64 = heads.iter().enumerate().map(|(d, &h)| w(h, d)).sum();
            if score > f64::NEG_INFINITY && best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, heads.clone()));
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            heads[i] += 1;
            if heads[i] <= n {
                break;
            }
            heads[i] = 0;
            i += 1;
        }
    }
}

/// Nodes reachable from the root over `(head, dependent)` edges.
pub fn reachable(n: usize, edges: &[(usize, usize)]) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([0]);
    let mut queue = VecDeque::from([0]);
    while let Some(u) = queue.pop_front() {
        for &(h, d) in edges {
            if h == u && d <= n && seen.insert(d) {
                queue.push_back(d);
            }
        }
    }
    seen
}
