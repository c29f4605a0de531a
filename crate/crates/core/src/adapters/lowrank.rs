//! Low-rank baseline: `W = W⁰ + scale · B·A`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct LowRankAdapter<T> {
    a: Tensor<T>,
    b: Tensor<T>,
    rank: usize,
    scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLowRank {
    a: Var,
    b: Var,
    scale: f64,
}

impl BoundLowRank {
    pub fn vars(&self) -> Vec<(&'static str, Var)> {
        vec![("lora_a", self.a), ("lora_b", self.b)]
    }
}

pub fn lowrank_param_count(rank: usize, d: usize, n: usize) -> usize {
    rank * (d + n)
}

impl<T: Scalar> LowRankAdapter<T> {
    /// `a ~ N(0, 1/n)`, `b = 0`, so the adapted layer starts equal to the frozen one.
    pub fn new(d: usize, n: usize, rank: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank >= d.min(n) {
            return Err(Error::Adapter(format!(
                "rank {rank} must satisfy 0 < r < min({d}, {n})"
            )));
        }
        let normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("valid std");
        let a = Tensor::from_fn(&[rank, n], |_| T::from_f64(normal.sample(rng)));
        Ok(Self {
            a,
            b: Tensor::zeros(&[d, rank]),
            rank,
            scale,
        })
    }

    pub fn from_parts(a: Tensor<T>, b: Tensor<T>, scale: f64) -> Result<Self> {
        let (r, n) = a.dims2()?;
        let (d, r2) = b.dims2()?;
        if r != r2 {
            return Err(Error::shape("lowrank", a.shape(), b.shape()));
        }
        if r >= d.min(n) {
            return Err(Error::Adapter(format!(
                "rank {r} must satisfy 0 < r < min({d}, {n})"
            )));
        }
        Ok(Self { a, b, rank: r, scale })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.b.shape()[0], self.a.shape()[1])
    }

    pub fn a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("lora_a", &self.a), ("lora_b", &self.b)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("lora_a", &mut self.a), ("lora_b", &mut self.b)]
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundLowRank {
        self.bind_with(|_, t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
    }

    pub fn bind_with(&self, mut leaf: impl FnMut(&'static str, &Tensor<T>) -> Var) -> BoundLowRank {
        let a = leaf("lora_a", &self.a);
        let b = leaf("lora_b", &self.b);
        BoundLowRank {
            a,
            b,
            scale: self.scale,
        }
    }

    /// `w0·x + scale·b·(a·x)` for `x[n]` or `x[n×k]`.
    pub fn forward(&self, w0: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, n) = w0.dims2()?;
        if (d, n) != self.dims() {
            return Err(Error::shape("lowrank_forward", w0.shape(), &[self.dims().0, self.dims().1]));
        }
        let (x2, is_vec) = as_matrix(x)?;
        let base = w0.matmul(&x2)?;
        let low = self.b.matmul(&self.a.matmul(&x2)?)?;
        let k = T::from_f64(self.scale);
        let out: Vec<T> = base
            .data()
            .iter()
            .zip(low.data())
            .map(|(&p, &q)| p + k * q)
            .collect();
        let cols = x2.shape()[1];
        let out = Tensor::new(&[d, cols], out)?;
        if is_vec {
            out.reshape(&[d])
        } else {
            Ok(out)
        }
    }
}

pub(crate) fn as_matrix<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.shape() {
        [n] => Ok((x.clone().reshape(&[*n, 1])?, true)),
        [_, _] => Ok((x.clone(), false)),
        s => Err(Error::InvalidShape {
            op: "adapted_forward",
            msg: format!("expected a vector or matrix input, got {s:?}"),
        }),
    }
}

/// Adapted weight `w0 + scale·b·a`.
pub fn lowrank_weight<T: Scalar>(g: &mut Graph<T>, bound: &BoundLowRank, w0: Var) -> Result<Var> {
    let ba = g.matmul(bound.b, bound.a)?;
    let scaled = g.scale(ba, T::from_f64(bound.scale));
    g.add(w0, scaled)
}
