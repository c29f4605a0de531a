//! Rotation adapter: four interleaved BIG layers and a magnitude vector.
//!
//! The rotation is `R = G̃₁ · G̃₂ · G̃′₁ · G̃′₂` (even ccw, odd ccw, even cw,
//! odd cw) and the adapted weight is `R · W⁰ · diag(m)`. Left rotation
//! preserves every pairwise angle between the columns of `W⁰`, and positive
//! column scaling preserves their directions, so hyperspherical energy is
//! unchanged.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::givens::{big_layer, dense_layer, Direction, GivensPairing, PairingKind};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Ablation variants of the rotation adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Forward and reverse BIG layers plus magnitude.
    Full,
    /// Four counter-clockwise layers with independent angles.
    UniD,
    /// Forward layers only.
    Single,
    /// Full rotation, no magnitude vector.
    NoMagnitude,
    /// Rotates the `n`-dimensional input space: `W⁰ · R′ · diag(m)`.
    RotRight,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::UniD,
        Variant::Single,
        Variant::NoMagnitude,
        Variant::RotRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::UniD => "uni_d",
            Variant::Single => "single",
            Variant::NoMagnitude => "no_magnitude",
            Variant::RotRight => "rot_right",
        }
    }

    /// Whether the adapted weight keeps hyperspherical energy fixed (for positive `m`).
    pub fn preserves_energy(self) -> bool {
        self != Variant::RotRight
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rotation variant '{s}'")))
    }
}

/// Position of a layer in the product `G̃₁ · G̃₂ · G̃′₁ · G̃′₂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    FwdEven,
    FwdOdd,
    RevEven,
    RevOdd,
}

impl LayerRole {
    pub fn name(self) -> &'static str {
        match self {
            LayerRole::FwdEven => "theta_fwd_even",
            LayerRole::FwdOdd => "theta_fwd_odd",
            LayerRole::RevEven => "theta_rev_even",
            LayerRole::RevOdd => "theta_rev_odd",
        }
    }

    fn kind(self) -> PairingKind {
        match self {
            LayerRole::FwdEven | LayerRole::RevEven => PairingKind::Even,
            LayerRole::FwdOdd | LayerRole::RevOdd => PairingKind::Odd,
        }
    }
}

/// Trainable scalar count of a rotation adapter on a `d×n` weight.
pub fn rotation_param_count(variant: Variant, d: usize, n: usize) -> usize {
    match variant {
        Variant::Full | Variant::UniD => 2 * (d - 1) + n,
        Variant::Single => d - 1 + n,
        Variant::NoMagnitude => 2 * (d - 1),
        Variant::RotRight => 2 * (n - 1) + n,
    }
}

#[derive(Debug, Clone)]
pub struct AngleLayer<T> {
    pub role: LayerRole,
    pub pairing: GivensPairing,
    pub direction: Direction,
    pub theta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct RotationAdapter<T> {
    d: usize,
    n: usize,
    variant: Variant,
    /// In product order; layers whose pairing is empty are omitted.
    layers: Vec<AngleLayer<T>>,
    m: Option<Tensor<T>>,
}

/// Graph handles for one adapter's parameters.
#[derive(Debug, Clone)]
pub struct BoundRotation {
    variant: Variant,
    layers: Vec<(LayerRole, GivensPairing, Direction, Var)>,
    m: Option<Var>,
}

impl BoundRotation {
    /// `(name, var)` for every adapter tensor, in storage order.
    pub fn vars(&self) -> Vec<(&'static str, Var)> {
        let mut out: Vec<_> = self.layers.iter().map(|(r, _, _, v)| (r.name(), *v)).collect();
        if let Some(m) = self.m {
            out.push(("m", m));
        }
        out
    }
}

fn layer_plan(variant: Variant) -> Vec<(LayerRole, Direction)> {
    use Direction::{Ccw, Cw};
    use LayerRole::*;
    match variant {
        Variant::Full | Variant::NoMagnitude | Variant::RotRight => {
            vec![(FwdEven, Ccw), (FwdOdd, Ccw), (RevEven, Cw), (RevOdd, Cw)]
        }
        Variant::UniD => vec![(FwdEven, Ccw), (FwdOdd, Ccw), (RevEven, Ccw), (RevOdd, Ccw)],
        Variant::Single => vec![(FwdEven, Ccw), (FwdOdd, Ccw)],
    }
}

impl<T: Scalar> RotationAdapter<T> {
    /// Identity-initialized adapter for a `d×n` weight: all angles 0, `m = 1`.
    pub fn new(variant: Variant, d: usize, n: usize) -> Result<Self> {
        if d < 2 || n < 1 || (variant == Variant::RotRight && n < 2) {
            return Err(Error::Adapter(format!(
                "rotation adapter needs a rotation dimension ≥ 2, got {d}×{n} ({variant})"
            )));
        }
        let rot_dim = if variant == Variant::RotRight { n } else { d };
        let layers = layer_plan(variant)
            .into_iter()
            .filter_map(|(role, direction)| {
                let pairing = GivensPairing::new(role.kind(), rot_dim);
                (!pairing.is_empty()).then(|| AngleLayer {
                    role,
                    theta: Tensor::zeros(&[pairing.len()]),
                    pairing,
                    direction,
                })
            })
            .collect();
        let m = (variant != Variant::NoMagnitude).then(|| Tensor::ones(&[n]));
        Ok(Self {
            d,
            n,
            variant,
            layers,
            m,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Rows and columns of the adapted weight.
    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.n)
    }

    /// Dimension the rotation acts on: `d`, or `n` for [`Variant::RotRight`].
    pub fn rotation_dim(&self) -> usize {
        if self.variant == Variant::RotRight {
            self.n
        } else {
            self.d
        }
    }

    pub fn layers(&self) -> &[AngleLayer<T>] {
        &self.layers
    }

    pub fn magnitude(&self) -> Option<&Tensor<T>> {
        self.m.as_ref()
    }

    /// Adapter tensors by name, in storage order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out: Vec<(&'static str, &Tensor<T>)> =
            self.layers.iter().map(|l| (l.role.name(), &l.theta)).collect();
        if let Some(m) = &self.m {
            out.push(("m", m));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out: Vec<(&'static str, &mut Tensor<T>)> = self
            .layers
            .iter_mut()
            .map(|l| (l.role.name(), &mut l.theta))
            .collect();
        if let Some(m) = &mut self.m {
            out.push(("m", m));
        }
        out
    }

    /// Trainable scalars, counted by enumerating the adapter's tensors.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces a named tensor, checking its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let variant = self.variant;
        let slot = self
            .named_params_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Adapter(format!("no tensor '{name}' in a {variant} adapter")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Fills angles uniformly in `[-π, π)` and magnitudes uniformly in `m_range`.
    pub fn randomize(&mut self, rng: &mut impl Rng, m_range: (f64, f64)) {
        let pi = std::f64::consts::PI;
        for layer in &mut self.layers {
            for v in layer.theta.data_mut() {
                *v = T::from_f64(rng.random_range(-pi..pi));
            }
        }
        if let Some(m) = &mut self.m {
            for v in m.data_mut() {
                *v = T::from_f64(rng.random_range(m_range.0..=m_range.1));
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.theta.data().iter().all(|v| v.is_zero()))
            && self
                .m
                .as_ref()
                .is_none_or(|m| m.data().iter().all(|v| *v == T::one()))
    }

    /// Registers the adapter tensors on `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundRotation {
        self.bind_with(|_, t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
    }

    /// Builds graph handles from `leaf`, called once per tensor in storage order.
    pub fn bind_with(&self, mut leaf: impl FnMut(&'static str, &Tensor<T>) -> Var) -> BoundRotation {
        let layers = self
            .layers
            .iter()
            .map(|l| (l.role, l.pairing.clone(), l.direction, leaf(l.role.name(), &l.theta)))
            .collect();
        let m = self.m.as_ref().map(|m| leaf("m", m));
        BoundRotation {
            variant: self.variant,
            layers,
            m,
        }
    }

    /// Dense rotation matrix (`d×d`, or `n×n` for [`Variant::RotRight`]) built
    /// by multiplying explicit Givens blocks. Test support; quadratic memory.
    pub fn dense_rotation(&self) -> Result<Tensor<T>> {
        let dim = self.rotation_dim();
        let mut r = Tensor::eye(dim);
        for l in &self.layers {
            r = r.matmul(&dense_layer(&l.pairing, l.theta.data(), l.direction)?)?;
        }
        Ok(r)
    }
}

/// `R · x` for `x[dim×k]`: the last layer of the product acts first.
pub fn rotate<T: Scalar>(g: &mut Graph<T>, bound: &BoundRotation, x: Var) -> Result<Var> {
    let mut y = x;
    for (_, pairing, dir, theta) in bound.layers.iter().rev() {
        y = big_layer(g, pairing, *theta, *dir, y)?;
    }
    Ok(y)
}

/// `Rᵀ · x`: each block's transpose is the same block turned the other way.
pub fn rotate_transposed<T: Scalar>(g: &mut Graph<T>, bound: &BoundRotation, x: Var) -> Result<Var> {
    let mut y = x;
    for (_, pairing, dir, theta) in &bound.layers {
        y = big_layer(g, pairing, *theta, dir.flip(), y)?;
    }
    Ok(y)
}

/// Adapted weight `R·W⁰·diag(m)` (or `W⁰·R′·diag(m)` for rot_right).
pub fn rotation_weight<T: Scalar>(g: &mut Graph<T>, bound: &BoundRotation, w0: Var) -> Result<Var> {
    let rotated = if bound.variant == Variant::RotRight {
        // W⁰·R′ = (R′ᵀ·W⁰ᵀ)ᵀ
        let wt = g.transpose(w0)?;
        let r = rotate_transposed(g, bound, wt)?;
        g.transpose(r)?
    } else {
        rotate(g, bound, w0)?
    };
    match bound.m {
        Some(m) => g.scale_cols(rotated, m),
        None => Ok(rotated),
    }
}
