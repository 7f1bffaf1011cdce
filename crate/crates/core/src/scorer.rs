//! Biaffine arc and label scorers over all ordered (head, dependent) pairs.

use std::io::{self, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::dropout;
use crate::numeric::{Activation, Init, ParamId, ParamStore, Tape, Tensor, Var};

pub const SCORES_MAGIC: &[u8; 8] = b"STEPSSCR";
pub const SCORES_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("invalid score file: {0}")]
    Format(String),

    #[error("score tensor shape {shape:?} does not fit kind {kind:?}")]
    Shape { kind: ScoreKind, shape: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    ArcTree,
    ArcGraph,
    Label,
    LabelWithNull,
}

impl ScoreKind {
    fn code(self) -> u8 {
        match self {
            ScoreKind::ArcTree => 0,
            ScoreKind::ArcGraph => 1,
            ScoreKind::Label => 2,
            ScoreKind::LabelWithNull => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ScoreKind::ArcTree,
            1 => ScoreKind::ArcGraph,
            2 => ScoreKind::Label,
            3 => ScoreKind::LabelWithNull,
            _ => return None,
        })
    }

    pub fn is_arc(self) -> bool {
        matches!(self, ScoreKind::ArcTree | ScoreKind::ArcGraph)
    }
}

/// Scores of shape `(n+1) x n x k`: candidate head (0 = root), dependent
/// (0-based, token `j+1`), channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    kind: ScoreKind,
    scores: Tensor,
}

impl ScoreTensor {
    pub fn new(kind: ScoreKind, scores: Tensor) -> Result<Self, ScoreError> {
        let shape = scores.shape();
        let ok = shape.len() == 3
            && shape[0] == shape[1] + 1
            && (!kind.is_arc() || shape[2] == 1)
            && (shape[2] >= 1 || shape[1] == 0);
        if !ok {
            return Err(ScoreError::Shape {
                kind,
                shape: shape.to_vec(),
            });
        }
        Ok(ScoreTensor { kind, scores })
    }

    /// Builds a tensor from a closure over `(head, dependent, channel)`.
    pub fn from_fn(kind: ScoreKind, n: usize, k: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity((n + 1) * n * k);
        for h in 0..=n {
            for d in 0..n {
                for c in 0..k {
                    data.push(f(h, d, c));
                }
            }
        }
        ScoreTensor::new(kind, Tensor::new(vec![n + 1, n, k], data)).expect("shape built to fit")
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    /// Number of tokens.
    pub fn n(&self) -> usize {
        self.scores.shape()[1]
    }

    /// Number of channels.
    pub fn k(&self) -> usize {
        self.scores.shape()[2]
    }

    /// Score of head `h` (0 = root) for dependent index `d` (0-based).
    pub fn at(&self, h: usize, d: usize, c: usize) -> f64 {
        self.scores.at3(h, d, c)
    }

    /// All channels of one cell.
    pub fn cell(&self, h: usize, d: usize) -> &[f64] {
        let (n, k) = (self.n(), self.k());
        let start = (h * n + d) * k;
        &self.scores.data()[start..start + k]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.scores
    }

    pub fn all_finite(&self) -> bool {
        self.scores.all_finite()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub channels: usize,
}

/// Head and dependent projections, a learned root input and the biaffine
/// form. Head and dependent FNNs are single affine layers.
#[derive(Clone, Debug, PartialEq)]
pub struct BiaffineScorer {
    shape: ScorerShape,
    activation: Activation,
    root: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    dep_w: ParamId,
    dep_b: ParamId,
    u: ParamId,
    w: ParamId,
    b: ParamId,
}

impl BiaffineScorer {
    pub fn new<R: Rng>(prefix: &str, shape: ScorerShape, activation: Activation, store: &mut ParamStore, rng: &mut R) -> Self {
        let ScorerShape {
            input_dim: d,
            hidden_dim: h,
            channels: k,
        } = shape;
        let name = |part: &str| format!("{}.{}", prefix, part);
        BiaffineScorer {
            shape,
            activation,
            root: store.init(&name("root"), &[d], Init::FanIn(d), rng),
            head_w: store.init(&name("head.w"), &[d, h], Init::FanIn(d), rng),
            head_b: store.init(&name("head.b"), &[h], Init::Zeros, rng),
            dep_w: store.init(&name("dep.w"), &[d, h], Init::FanIn(d), rng),
            dep_b: store.init(&name("dep.b"), &[h], Init::Zeros, rng),
            u: store.init(&name("u"), &[h, k, h], Init::FanIn(h * h), rng),
            w: store.init(&name("w"), &[k, 2 * h], Init::FanIn(2 * h), rng),
            b: store.init(&name("b"), &[k], Init::Zeros, rng),
        }
    }

    pub fn shape(&self) -> ScorerShape {
        self.shape
    }

    /// Records the scorer on `tape` and returns the `(n+1) x n x k` scores.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        r: Var,
        dropout_p: f64,
        training: bool,
        rng: &mut R,
    ) -> Var {
        let root = tape.param(store, self.root);
        let heads_in = tape.concat_rows(vec![root, r]);
        let hw = tape.param(store, self.head_w);
        let hb = tape.param(store, self.head_b);
        let h = tape.matmul(heads_in, hw);
        let h = tape.add_row(h, hb);
        let h = tape.activation(h, self.activation);
        let h = dropout(tape, h, dropout_p, training, rng);

        let dw = tape.param(store, self.dep_w);
        let db = tape.param(store, self.dep_b);
        let d = tape.matmul(r, dw);
        let d = tape.add_row(d, db);
        let d = tape.activation(d, self.activation);
        let d = dropout(tape, d, dropout_p, training, rng);

        let u = tape.param(store, self.u);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.biaffine(h, d, u, w, b)
    }

    /// Inference-time scores for a representation matrix.
    pub fn score(&self, store: &ParamStore, r: &Tensor, kind: ScoreKind) -> Result<ScoreTensor, ScoreError> {
        let mut tape = Tape::new();
        let rv = tape.constant(r.clone());
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&mut tape, store, rv, 0.0, false, &mut rng);
        ScoreTensor::new(kind, tape.value(out).clone())
    }

    /// Head and dependent hidden vectors without dropout, root first.
    pub fn hidden(&self, store: &ParamStore, r: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let rv = tape.constant(r.clone());
        let root = tape.param(store, self.root);
        let heads_in = tape.concat_rows(vec![root, rv]);
        let project = |tape: &mut Tape, x: Var, w: ParamId, b: ParamId| {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            let y = tape.matmul(x, w);
            let y = tape.add_row(y, b);
            tape.activation(y, self.activation)
        };
        let h = project(&mut tape, heads_in, self.head_w, self.head_b);
        let d = project(&mut tape, rv, self.dep_w, self.dep_b);
        (tape.value(h).clone(), tape.value(d).clone())
    }

    pub fn biaffine_params<'a>(&self, store: &'a ParamStore) -> (&'a Tensor, &'a Tensor, &'a Tensor) {
        (store.value(self.u), store.value(self.w), store.value(self.b))
    }
}

/// Writes the score-dump header.
pub fn write_scores_header<W: Write>(w: &mut W) -> io::Result<()> {
    w.write_all(SCORES_MAGIC)?;
    w.write_all(&SCORES_VERSION.to_le_bytes())
}

/// Appends one sentence: token count, tensor count, then per tensor its
/// kind code, channel count and `(n+1)*n*k` little-endian `f32` values.
pub fn write_sentence_scores<W: Write>(w: &mut W, tensors: &[ScoreTensor]) -> io::Result<()> {
    let n = tensors.first().map_or(0, ScoreTensor::n);
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        assert_eq!(t.n(), n, "tensors of one sentence share n");
        w.write_all(&[t.kind().code()])?;
        w.write_all(&(t.k() as u32).to_le_bytes())?;
        for v in t.tensor().data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads a score dump into per-sentence tensor lists.
pub fn read_scores<R: Read>(mut r: R) -> Result<Vec<Vec<ScoreTensor>>, ScoreError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ScoreError::Format("file too short for header".into()))?;
    if &magic != SCORES_MAGIC {
        return Err(ScoreError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != SCORES_VERSION {
        return Err(ScoreError::Format(format!("unsupported version {}", version)));
    }
    let mut out = Vec::new();
    loop {
        let mut nbuf = [0u8; 4];
        if r.read(&mut nbuf[..1])? == 0 {
            break;
        }
        let truncated = |_| ScoreError::Format(format!("truncated sentence {}", out.len() + 1));
        r.read_exact(&mut nbuf[1..]).map_err(truncated)?;
        let n = u32::from_le_bytes(nbuf) as usize;
        let count = read_u32(&mut r).map_err(truncated)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut code = [0u8; 1];
            r.read_exact(&mut code).map_err(truncated)?;
            let kind = ScoreKind::from_code(code[0])
                .ok_or_else(|| ScoreError::Format(format!("unknown tensor kind {}", code[0])))?;
            let k = read_u32(&mut r).map_err(truncated)? as usize;
            let mut raw = vec![0u8; (n + 1) * n * k * 4];
            r.read_exact(&mut raw).map_err(truncated)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push(ScoreTensor::new(kind, Tensor::new(vec![n + 1, n, k], data))?);
        }
        out.push(tensors);
    }
    Ok(out)
}
