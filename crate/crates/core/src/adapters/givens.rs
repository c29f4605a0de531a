//! Givens pairings and single BIG layers.
//!
//! A BIG layer is a product of plane rotations on disjoint adjacent index
//! pairs. Because the blocks are disjoint, applying one layer to a `d×n`
//! matrix costs `O(d·n)` and never materializes a `d×d` matrix.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::rotate_row_pairs;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingKind {
    /// `(2k, 2k+1)` for `k = 0..⌊d/2⌋`
    Even,
    /// `(2k+1, 2k+2)` for `k = 0..⌊(d−1)/2⌋`
    Odd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `[[cos, −sin], [sin, cos]]`
    Ccw,
    /// `[[cos, sin], [−sin, cos]]`
    Cw,
}

impl Direction {
    pub fn sign<T: Scalar>(self) -> T {
        match self {
            Direction::Ccw => T::one(),
            Direction::Cw => -T::one(),
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Direction::Ccw => Direction::Cw,
            Direction::Cw => Direction::Ccw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GivensPairing {
    kind: PairingKind,
    dim: usize,
    pairs: Arc<[(usize, usize)]>,
}

impl GivensPairing {
    pub fn new(kind: PairingKind, dim: usize) -> Self {
        let pairs: Vec<(usize, usize)> = match kind {
            PairingKind::Even => (0..dim / 2).map(|k| (2 * k, 2 * k + 1)).collect(),
            PairingKind::Odd => (0..dim.saturating_sub(1) / 2)
                .map(|k| (2 * k + 1, 2 * k + 2))
                .collect(),
        };
        Self {
            kind,
            dim,
            pairs: pairs.into(),
        }
    }

    pub fn kind(&self) -> PairingKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub(crate) fn shared_pairs(&self) -> Arc<[(usize, usize)]> {
        self.pairs.clone()
    }

    /// Number of angles this pairing consumes.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn check_layer<T: Scalar>(pairing: &GivensPairing, angles: usize, x: &Tensor<T>) -> Result<(usize, usize)> {
    if angles != pairing.len() {
        return Err(Error::Adapter(format!(
            "{} angles for a {:?} pairing of dimension {} ({} pairs)",
            angles,
            pairing.kind(),
            pairing.dim(),
            pairing.len()
        )));
    }
    let (d, n) = x.dims2()?;
    if d != pairing.dim() {
        return Err(Error::InvalidShape {
            op: "big_layer_apply",
            msg: format!("pairing has dimension {}, input has {d} rows", pairing.dim()),
        });
    }
    Ok((d, n))
}

/// Applies one BIG layer to the rows of `x[d×n]`.
pub fn big_layer_apply<T: Scalar>(
    pairing: &GivensPairing,
    angles: &[T],
    direction: Direction,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (d, n) = check_layer(pairing, angles.len(), x)?;
    let y = rotate_row_pairs(x.data(), n, pairing.pairs(), angles, direction.sign());
    Tensor::new(&[d, n], y)
}

/// Differentiable [`big_layer_apply`] recorded on a graph.
pub fn big_layer<T: Scalar>(
    g: &mut Graph<T>,
    pairing: &GivensPairing,
    angles: Var,
    direction: Direction,
    x: Var,
) -> Result<Var> {
    check_layer(pairing, g.value(angles).numel(), g.value(x))?;
    g.rotate_pairs(x, angles, pairing.shared_pairs(), direction.sign())
}

/// Dense `dim×dim` matrix of one Givens block on `(i, j)`.
pub fn givens_matrix<T: Scalar>(dim: usize, i: usize, j: usize, theta: T, direction: Direction) -> Tensor<T> {
    let mut g = Tensor::eye(dim);
    let (c, s) = (theta.cos(), direction.sign::<T>() * theta.sin());
    let data = g.data_mut();
    data[i * dim + i] = c;
    data[j * dim + j] = c;
    data[i * dim + j] = -s;
    data[j * dim + i] = s;
    g
}

/// Dense matrix of a whole layer, built by multiplying its Givens blocks in
/// ascending pair order.
pub fn dense_layer<T: Scalar>(pairing: &GivensPairing, angles: &[T], direction: Direction) -> Result<Tensor<T>> {
    if angles.len() != pairing.len() {
        return Err(Error::Adapter(format!(
            "{} angles for {} pairs",
            angles.len(),
            pairing.len()
        )));
    }
    let dim = pairing.dim();
    let mut acc = Tensor::eye(dim);
    for (&(i, j), &theta) in pairing.pairs().iter().zip(angles) {
        acc = acc.matmul(&givens_matrix(dim, i, j, theta, direction))?;
    }
    Ok(acc)
}
