//! Reverse-mode gradient accumulation over a fixed set of primitives.
//!
//! Nodes are appended in evaluation order, so walking the node list
//! backwards is a reverse topological order and visits every node once.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{NumericError, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// `x * sigmoid(x)`
    #[default]
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative with respect to the input `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// One softmax cross-entropy term: the entries `base + t * stride` for
/// `t in 0..len` form the logits, `target` is the gold position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SoftmaxGroup {
    pub base: usize,
    pub stride: usize,
    pub len: usize,
    pub target: usize,
}

/// Primitive kinds, used to address a backward rule in fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    AddRow,
    Activation,
    Mask,
    Gather,
    ConcatCols,
    ConcatRows,
    ReplaceRows,
    ScalarMix,
    Biaffine,
    SoftmaxXent,
    SigmoidBce,
    Add,
    Scale,
    Sum,
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add-row" => OpKind::AddRow,
            "activation" => OpKind::Activation,
            "mask" => OpKind::Mask,
            "gather" => OpKind::Gather,
            "concat-cols" => OpKind::ConcatCols,
            "concat-rows" => OpKind::ConcatRows,
            "replace-rows" => OpKind::ReplaceRows,
            "scalar-mix" => OpKind::ScalarMix,
            "biaffine" => OpKind::Biaffine,
            "softmax-xent" => OpKind::SoftmaxXent,
            "sigmoid-bce" => OpKind::SigmoidBce,
            "add" => OpKind::Add,
            "scale" => OpKind::Scale,
            "sum" => OpKind::Sum,
            other => return Err(format!("unknown op kind {:?}", other)),
        })
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Act(Var, Activation),
    Mask(Var, Tensor),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ReplaceRows {
        x: Var,
        v: Var,
        rows: Vec<bool>,
    },
    ScalarMix {
        layers: Arc<Vec<Tensor>>,
        logits: Var,
        weights: Vec<f64>,
        active: Vec<bool>,
    },
    Biaffine {
        h: Var,
        d: Var,
        u: Var,
        w: Var,
        b: Var,
        hu: Vec<f64>,
    },
    SoftmaxXent {
        x: Var,
        groups: Vec<SoftmaxGroup>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        x: Var,
        entries: Vec<(usize, bool)>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Param(_) => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Act(..) => OpKind::Activation,
            Op::Mask(..) => OpKind::Mask,
            Op::Gather(..) => OpKind::Gather,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ReplaceRows { .. } => OpKind::ReplaceRows,
            Op::ScalarMix { .. } => OpKind::ScalarMix,
            Op::Biaffine { .. } => OpKind::Biaffine,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::SigmoidBce { .. } => OpKind::SigmoidBce,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        s => panic!("expected matrix or vector, got shape {:?}", s),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong. Only
    /// meant to show that gradient checking catches broken rules.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = rows_cols(av);
        let (k2, n) = rows_cols(bv);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += a_ip * bv;
                }
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        let (m, n) = rows_cols(av);
        assert_eq!(bv.len(), n, "bias length differs from column count");
        let mut out = av.data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::AddRow(a, bias))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| act.apply(x)).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Act(a, act))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Tensor) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), mask.shape());
        let out = av.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Mask(a, mask))
    }

    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let sv = self.value(src);
        let (r, c) = rows_cols(sv);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < r, "gather index {} out of {} rows", i, r);
            out.extend_from_slice(&sv.data()[i * c..(i + 1) * c]);
        }
        self.push(Tensor::matrix(idx.len(), c, out), Op::Gather(src, idx))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let m = rows_cols(self.value(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = rows_cols(self.value(p));
                assert_eq!(r, m, "concat_cols row counts differ");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(Tensor::matrix(m, total, out), Op::ConcatCols(parts))
    }

    /// Stacks matrices vertically; a vector counts as a single row.
    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let c = rows_cols(self.value(parts[0])).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let (r, pc) = rows_cols(self.value(p));
            assert_eq!(pc, c, "concat_rows column counts differ");
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        self.push(Tensor::matrix(rows, c, out), Op::ConcatRows(parts))
    }

    /// Replaces the flagged rows of `x` by the vector `v`.
    pub fn replace_rows(&mut self, x: Var, v: Var, rows: Vec<bool>) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        let (m, c) = rows_cols(xv);
        assert_eq!(rows.len(), m);
        assert_eq!(vv.len(), c);
        let mut out = xv.data().to_vec();
        for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
            out[i * c..(i + 1) * c].copy_from_slice(vv.data());
        }
        self.push(Tensor::matrix(m, c, out), Op::ReplaceRows { x, v, rows })
    }

    /// `sum_l softmax(logits over active layers)_l * layers[l]`; inactive
    /// layers get weight zero. At least one layer must be active.
    pub fn scalar_mix(&mut self, layers: Arc<Vec<Tensor>>, logits: Var, active: Vec<bool>) -> Var {
        let lv = self.value(logits).data();
        assert_eq!(lv.len(), layers.len());
        assert_eq!(active.len(), layers.len());
        assert!(active.iter().any(|&a| a), "scalar mix with every layer dropped");
        let max = lv
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = lv
            .iter()
            .zip(&active)
            .map(|(&x, &a)| if a { (x - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        let shape = layers[0].shape().to_vec();
        let mut out = vec![0.0; layers[0].len()];
        for (layer, &w) in layers.iter().zip(&weights) {
            assert_eq!(layer.shape(), &shape[..], "layer shapes differ");
            if w == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(layer.data()) {
                *o += w * x;
            }
        }
        self.push(
            Tensor::new(shape, out),
            Op::ScalarMix {
                layers,
                logits,
                weights,
                active,
            },
        )
    }

    /// Scores every (head row, dependent row) pair:
    /// `out[i, j, c] = h_i' U[:, c, :] d_j + W[c] . (h_i ++ d_j) + b[c]`.
    /// `h` is m x d1, `d` is n x d2, `u` is d1 x k x d2, `w` is k x (d1 + d2).
    pub fn biaffine(&mut self, h: Var, d: Var, u: Var, w: Var, b: Var) -> Var {
        let (hv, dv, uv, wv, bv) = (
            self.value(h),
            self.value(d),
            self.value(u),
            self.value(w),
            self.value(b),
        );
        let (m, d1) = rows_cols(hv);
        let (n, d2) = rows_cols(dv);
        let us = uv.shape();
        assert_eq!(us.len(), 3, "U must be rank 3");
        assert_eq!((us[0], us[2]), (d1, d2), "U dimensions do not conform");
        let k = us[1];
        assert_eq!(wv.shape(), &[k, d1 + d2], "W dimensions do not conform");
        assert_eq!(bv.len(), k, "b length does not conform");
        let (hd, dd, ud, wd, bd) = (hv.data(), dv.data(), uv.data(), wv.data(), bv.data());

        // hu[i, c, :] = h_i' U[:, c, :]
        let mut hu = vec![0.0; m * k * d2];
        for i in 0..m {
            let dst = &mut hu[i * k * d2..(i + 1) * k * d2];
            for a in 0..d1 {
                let ha = hd[i * d1 + a];
                if ha == 0.0 {
                    continue;
                }
                for (o, u) in dst.iter_mut().zip(&ud[a * k * d2..(a + 1) * k * d2]) {
                    *o += ha * u;
                }
            }
        }
        let mut wh = vec![0.0; m * k];
        for i in 0..m {
            for c in 0..k {
                wh[i * k + c] = dot(&wd[c * (d1 + d2)..c * (d1 + d2) + d1], &hd[i * d1..(i + 1) * d1]);
            }
        }
        let mut wdep = vec![0.0; n * k];
        for j in 0..n {
            for c in 0..k {
                wdep[j * k + c] = dot(
                    &wd[c * (d1 + d2) + d1..(c + 1) * (d1 + d2)],
                    &dd[j * d2..(j + 1) * d2],
                );
            }
        }
        let mut out = vec![0.0; m * n * k];
        for i in 0..m {
            for j in 0..n {
                let dj = &dd[j * d2..(j + 1) * d2];
                for c in 0..k {
                    let huc = &hu[(i * k + c) * d2..(i * k + c + 1) * d2];
                    out[(i * n + j) * k + c] = dot(huc, dj) + wh[i * k + c] + wdep[j * k + c] + bd[c];
                }
            }
        }
        self.push(
            Tensor::new(vec![m, n, k], out),
            Op::Biaffine { h, d, u, w, b, hu },
        )
    }

    /// Mean softmax cross-entropy over `groups`. Empty groups give zero.
    pub fn softmax_xent(&mut self, x: Var, groups: Vec<SoftmaxGroup>) -> Var {
        let xd = self.value(x).data();
        let mut probs = Vec::with_capacity(groups.iter().map(|g| g.len).sum());
        let mut total = 0.0;
        for g in &groups {
            assert!(g.target < g.len);
            let vals: Vec<f64> = (0..g.len).map(|t| xd[g.base + t * g.stride]).collect();
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = vals.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - vals[g.target];
            probs.extend(vals.iter().map(|v| (v - log_z).exp()));
        }
        let loss = if groups.is_empty() {
            0.0
        } else {
            total / groups.len() as f64
        };
        self.push(Tensor::scalar(loss), Op::SoftmaxXent { x, groups, probs })
    }

    /// Mean binary cross-entropy with logits over `(flat index, target)`.
    pub fn sigmoid_bce(&mut self, x: Var, entries: Vec<(usize, bool)>) -> Var {
        let xd = self.value(x).data();
        let total: f64 = entries
            .iter()
            .map(|&(i, t)| {
                let z = xd[i];
                if t {
                    -log_sigmoid(z)
                } else {
                    -log_sigmoid(-z)
                }
            })
            .sum();
        let loss = if entries.is_empty() {
            0.0
        } else {
            total / entries.len() as f64
        };
        self.push(Tensor::scalar(loss), Op::SigmoidBce { x, entries })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes differ");
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x * factor).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Propagates d(loss)/d(node) backwards and adds parameter gradients
    /// into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), NumericError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(NumericError::NonFinite("loss".into()));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let bump = if self.fault.is_some() && node.op.kind() == self.fault {
                1.01
            } else {
                1.0
            };
            let send = |grads: &mut Vec<Option<Tensor>>, to: Var, mut delta: Tensor| {
                if bump != 1.0 {
                    delta.data_mut().iter_mut().for_each(|x| *x *= bump);
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };

            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if !g.all_finite() {
                        return Err(NumericError::NonFinite(store.get(*id).name.clone()));
                    }
                    store.get_mut(*id).grad.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = rows_cols(av);
                    let n = rows_cols(bv).1;
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] = dot(grow, brow);
                            let a_ip = ad[i * k + p];
                            if a_ip != 0.0 {
                                for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += a_ip * gv;
                                }
                            }
                        }
                    }
                    send(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga));
                    send(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb));
                }
                Op::AddRow(a, bias) => {
                    let bv = self.value(*bias);
                    let n = bv.len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    send(&mut grads, *bias, Tensor::new(bv.shape().to_vec(), gb));
                    send(&mut grads, *a, g);
                }
                Op::Act(a, act) => {
                    let av = self.value(*a);
                    let ga = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, gv)| gv * act.derivative(x))
                        .collect();
                    send(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga));
                }
                Op::Mask(a, mask) => {
                    let ga = g.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
                    send(&mut grads, *a, Tensor::new(g.shape().to_vec(), ga));
                }
                Op::Gather(src, idx) => {
                    let sv = self.value(*src);
                    let c = rows_cols(sv).1;
                    let mut gs = vec![0.0; sv.len()];
                    for (row, &i) in idx.iter().enumerate() {
                        for (o, v) in gs[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g.data()[row * c..(row + 1) * c])
                        {
                            *o += v;
                        }
                    }
                    send(&mut grads, *src, Tensor::new(sv.shape().to_vec(), gs));
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = rows_cols(&g);
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = rows_cols(pv).1;
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        send(&mut grads, p, Tensor::new(pv.shape().to_vec(), gp));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let len = pv.len();
                        let gp = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        send(&mut grads, p, Tensor::new(pv.shape().to_vec(), gp));
                    }
                }
                Op::ReplaceRows { x, v, rows } => {
                    let vv = self.value(*v);
                    let c = vv.len();
                    let mut gx = g.data().to_vec();
                    let mut gv = vec![0.0; c];
                    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                        for (o, x) in gv.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *o += x;
                        }
                        gx[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                    }
                    send(&mut grads, *x, Tensor::new(g.shape().to_vec(), gx));
                    send(&mut grads, *v, Tensor::new(vv.shape().to_vec(), gv));
                }
                Op::ScalarMix {
                    layers,
                    logits,
                    weights,
                    active,
                } => {
                    // d out / d w_l = layer_l; then through the softmax.
                    let dw: Vec<f64> = layers.iter().map(|l| dot(l.data(), g.data())).collect();
                    let mean: f64 = dw.iter().zip(weights).map(|(d, w)| d * w).sum();
                    let gl = dw
                        .iter()
                        .zip(weights)
                        .zip(active)
                        .map(|((d, w), &a)| if a { w * (d - mean) } else { 0.0 })
                        .collect();
                    let shape = self.value(*logits).shape().to_vec();
                    send(&mut grads, *logits, Tensor::new(shape, gl));
                }
                Op::Biaffine { h, d, u, w, b, hu } => {
                    let (hv, dv, uv, wv) = (self.value(*h), self.value(*d), self.value(*u), self.value(*w));
                    let (m, d1) = rows_cols(hv);
                    let (n, d2) = rows_cols(dv);
                    let k = uv.shape()[1];
                    let (hd, dd, ud, wd, gd) = (hv.data(), dv.data(), uv.data(), wv.data(), g.data());
                    let dw_stride = d1 + d2;

                    let mut ghu = vec![0.0; m * k * d2];
                    let mut gdep = vec![0.0; n * d2];
                    let mut gwh = vec![0.0; m * k];
                    let mut gwd = vec![0.0; n * k];
                    let mut gb = vec![0.0; k];
                    for i in 0..m {
                        for j in 0..n {
                            let dj = &dd[j * d2..(j + 1) * d2];
                            for c in 0..k {
                                let gv = gd[(i * n + j) * k + c];
                                if gv == 0.0 {
                                    continue;
                                }
                                gwh[i * k + c] += gv;
                                gwd[j * k + c] += gv;
                                gb[c] += gv;
                                let base = (i * k + c) * d2;
                                for bi in 0..d2 {
                                    ghu[base + bi] += gv * dj[bi];
                                    gdep[j * d2 + bi] += gv * hu[base + bi];
                                }
                            }
                        }
                    }
                    let mut gu = vec![0.0; d1 * k * d2];
                    let mut gh = vec![0.0; m * d1];
                    for i in 0..m {
                        let ghu_i = &ghu[i * k * d2..(i + 1) * k * d2];
                        for a in 0..d1 {
                            let ha = hd[i * d1 + a];
                            let urow = &ud[a * k * d2..(a + 1) * k * d2];
                            gh[i * d1 + a] += dot(urow, ghu_i);
                            if ha != 0.0 {
                                for (o, x) in gu[a * k * d2..(a + 1) * k * d2].iter_mut().zip(ghu_i) {
                                    *o += ha * x;
                                }
                            }
                        }
                    }
                    let mut gw = vec![0.0; k * dw_stride];
                    for c in 0..k {
                        let wc = &wd[c * dw_stride..(c + 1) * dw_stride];
                        for i in 0..m {
                            let gv = gwh[i * k + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for a in 0..d1 {
                                gw[c * dw_stride + a] += gv * hd[i * d1 + a];
                                gh[i * d1 + a] += gv * wc[a];
                            }
                        }
                        for j in 0..n {
                            let gv = gwd[j * k + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for bi in 0..d2 {
                                gw[c * dw_stride + d1 + bi] += gv * dd[j * d2 + bi];
                                gdep[j * d2 + bi] += gv * wc[d1 + bi];
                            }
                        }
                    }
                    let shapes = (
                        hv.shape().to_vec(),
                        dv.shape().to_vec(),
                        uv.shape().to_vec(),
                        wv.shape().to_vec(),
                        self.value(*b).shape().to_vec(),
                    );
                    send(&mut grads, *h, Tensor::new(shapes.0, gh));
                    send(&mut grads, *d, Tensor::new(shapes.1, gdep));
                    send(&mut grads, *u, Tensor::new(shapes.2, gu));
                    send(&mut grads, *w, Tensor::new(shapes.3, gw));
                    send(&mut grads, *b, Tensor::new(shapes.4, gb));
                }
                Op::SoftmaxXent { x, groups, probs } => {
                    let xv = self.value(*x);
                    let mut gx = vec![0.0; xv.len()];
                    if !groups.is_empty() {
                        let scale = g.item() / groups.len() as f64;
                        let mut offset = 0;
                        for grp in groups {
                            for t in 0..grp.len {
                                let p = probs[offset + t];
                                let y = if t == grp.target { 1.0 } else { 0.0 };
                                gx[grp.base + t * grp.stride] += scale * (p - y);
                            }
                            offset += grp.len;
                        }
                    }
                    send(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
                Op::SigmoidBce { x, entries } => {
                    let xv = self.value(*x);
                    let mut gx = vec![0.0; xv.len()];
                    if !entries.is_empty() {
                        let scale = g.item() / entries.len() as f64;
                        for &(i, t) in entries {
                            let y = if t { 1.0 } else { 0.0 };
                            gx[i] += scale * (sigmoid(xv.data()[i]) - y);
                        }
                    }
                    send(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::Scale(a, factor) => {
                    let ga = g.data().iter().map(|x| x * factor).collect();
                    send(&mut grads, *a, Tensor::new(g.shape().to_vec(), ga));
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    send(&mut grads, *a, Tensor::filled(&shape, g.item()));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
