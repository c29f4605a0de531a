//! Weight adapters for parameter-efficient preference optimization.
//!
//! Two families wrap a frozen weight `W⁰[d×n]` (neurons are columns):
//!
//! * [`RotationAdapter`]: `W = R·W⁰·diag(m)` with `R` a product of four
//!   BIG layers. `2(d−1) + n` trainable scalars for the full variant.
//! * [`LowRankAdapter`]: `W = W⁰ + scale·B·A`, `r(d + n)` scalars.
//!
//! Either can be folded into `W⁰` with [`merge`], after which plain
//! `W·x` reproduces the adapted forward pass.

mod givens;
mod lowrank;
mod rotation;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use givens::{
    big_layer, big_layer_apply, dense_layer, givens_matrix, Direction, GivensPairing, PairingKind,
};
pub use lowrank::{lowrank_param_count, lowrank_weight, BoundLowRank, LowRankAdapter};
pub use rotation::{
    rotate, rotate_transposed, rotation_param_count, rotation_weight, AngleLayer, BoundRotation,
    LayerRole, RotationAdapter, Variant,
};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// How adapters are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum AdapterMethod {
    Rotation { variant: Variant },
    LowRank { rank: usize, scale: f64 },
}

impl fmt::Display for AdapterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterMethod::Rotation { variant } => write!(f, "ropo-{variant}"),
            AdapterMethod::LowRank { rank, .. } => write!(f, "lopo-r{rank}"),
        }
    }
}

impl AdapterMethod {
    /// Trainable scalar count for a `d×n` weight, from the closed form.
    pub fn param_count(&self, d: usize, n: usize) -> usize {
        match *self {
            AdapterMethod::Rotation { variant } => rotation_param_count(variant, d, n),
            AdapterMethod::LowRank { rank, .. } => lowrank_param_count(rank, d, n),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Adapter<T> {
    Rotation(RotationAdapter<T>),
    LowRank(LowRankAdapter<T>),
}

#[derive(Debug, Clone)]
pub enum BoundAdapter {
    Rotation(BoundRotation),
    LowRank(BoundLowRank),
}

impl BoundAdapter {
    pub fn vars(&self) -> Vec<(&'static str, Var)> {
        match self {
            BoundAdapter::Rotation(b) => b.vars(),
            BoundAdapter::LowRank(b) => b.vars(),
        }
    }
}

impl<T: Scalar> Adapter<T> {
    /// Identity-initialized adapter for a `d×n` weight.
    pub fn new(method: AdapterMethod, d: usize, n: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        Ok(match method {
            AdapterMethod::Rotation { variant } => Adapter::Rotation(RotationAdapter::new(variant, d, n)?),
            AdapterMethod::LowRank { rank, scale } => {
                Adapter::LowRank(LowRankAdapter::new(d, n, rank, scale, rng)?)
            }
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Adapter::Rotation(a) => a.dims(),
            Adapter::LowRank(a) => a.dims(),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Adapter::Rotation(a) => a.named_params(),
            Adapter::LowRank(a) => a.named_params(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Adapter::Rotation(a) => a.named_params_mut(),
            Adapter::LowRank(a) => a.named_params_mut(),
        }
    }

    /// Trainable scalars, by enumeration of the adapter's tensors.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .named_params_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Adapter(format!("unknown adapter tensor '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundAdapter {
        match self {
            Adapter::Rotation(a) => BoundAdapter::Rotation(a.bind(g, trainable)),
            Adapter::LowRank(a) => BoundAdapter::LowRank(a.bind(g, trainable)),
        }
    }

    pub fn bind_with(&self, leaf: impl FnMut(&'static str, &Tensor<T>) -> Var) -> BoundAdapter {
        match self {
            Adapter::Rotation(a) => BoundAdapter::Rotation(a.bind_with(leaf)),
            Adapter::LowRank(a) => BoundAdapter::LowRank(a.bind_with(leaf)),
        }
    }
}

/// Adapted weight on a graph.
pub fn adapted_weight<T: Scalar>(g: &mut Graph<T>, bound: &BoundAdapter, w0: Var) -> Result<Var> {
    match bound {
        BoundAdapter::Rotation(b) => rotation_weight(g, b, w0),
        BoundAdapter::LowRank(b) => lowrank_weight(g, b, w0),
    }
}

fn check_dims<T: Scalar>(adapter: &Adapter<T>, w0: &Tensor<T>) -> Result<()> {
    let dims = w0.dims2()?;
    if dims != adapter.dims() {
        let (d, n) = adapter.dims();
        return Err(Error::shape("adapter", w0.shape(), &[d, n]));
    }
    Ok(())
}

/// Effective weight `W_eff` such that `W_eff·x` equals [`adapted_forward`].
pub fn merge<T: Scalar>(adapter: &Adapter<T>, w0: &Tensor<T>) -> Result<Tensor<T>> {
    check_dims(adapter, w0)?;
    let mut g = Graph::new();
    let bound = adapter.bind(&mut g, false);
    let w = g.constant(w0.clone());
    let out = adapted_weight(&mut g, &bound, w)?;
    Ok(g.value(out).clone())
}

/// Adapted layer applied to `x[n]` or `x[n×k]`.
pub fn adapted_forward<T: Scalar>(adapter: &Adapter<T>, w0: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    check_dims(adapter, w0)?;
    if let Adapter::LowRank(a) = adapter {
        return a.forward(w0, x);
    }
    let (x2, is_vec) = lowrank::as_matrix(x)?;
    let w = merge(adapter, w0)?;
    let out = w.matmul(&x2)?;
    if is_vec {
        let d = out.shape()[0];
        out.reshape(&[d])
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
