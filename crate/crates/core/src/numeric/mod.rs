//! Dense `f64` linear algebra with reverse-mode gradients for the fixed
//! computation graph of the parser, plus AdamW and the Noam schedule.

mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_container, write_container, Container};
pub use optim::{noam_lr, AdamW};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tape::{log_sigmoid, sigmoid, Activation, OpKind, SoftmaxGroup, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite values in {0}")]
    NonFinite(String),
}

/// `act(W x + b)` for a `k x d` matrix `W`.
pub fn forward_affine(
    x: &[f64],
    w: &Tensor,
    b: &[f64],
    act: Activation,
) -> Result<Vec<f64>, NumericError> {
    let [k, d] = w.shape() else {
        return Err(NumericError::DimensionMismatch(format!(
            "W must be a matrix, got shape {:?}",
            w.shape()
        )));
    };
    if *d != x.len() || *k != b.len() {
        return Err(NumericError::DimensionMismatch(format!(
            "W is {}x{}, x has {} entries, b has {}",
            k,
            d,
            x.len(),
            b.len()
        )));
    }
    Ok((0..*k)
        .map(|r| act.apply(tape::dot(w.row(r), x) + b[r]))
        .collect())
}

/// `x1' U x2 + W (x1 ++ x2) + b` for `U` of shape `d1 x k x d2` and `W` of
/// shape `k x (d1 + d2)`.
pub fn forward_biaffine(
    x1: &[f64],
    x2: &[f64],
    u: &Tensor,
    w: &Tensor,
    b: &[f64],
) -> Result<Vec<f64>, NumericError> {
    let (d1, d2) = (x1.len(), x2.len());
    let [ud1, k, ud2] = u.shape() else {
        return Err(NumericError::DimensionMismatch(format!(
            "U must be rank 3, got shape {:?}",
            u.shape()
        )));
    };
    let k = *k;
    if (*ud1, *ud2) != (d1, d2) || w.shape() != [k, d1 + d2] || b.len() != k {
        return Err(NumericError::DimensionMismatch(format!(
            "x1: {}, x2: {}, U: {:?}, W: {:?}, b: {}",
            d1,
            d2,
            u.shape(),
            w.shape(),
            b.len()
        )));
    }
    let mut out = b.to_vec();
    for (c, o) in out.iter_mut().enumerate() {
        for (a, &xa) in x1.iter().enumerate() {
            let urow = &u.data()[(a * k + c) * d2..(a * k + c + 1) * d2];
            *o += xa * tape::dot(urow, x2);
        }
        let wc = w.row(c);
        *o += tape::dot(&wc[..d1], x1) + tape::dot(&wc[d1..], x2);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
