//! Hyperspherical energy of a weight matrix's neurons and its drift between checkpoints.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::lm::{Trainable, TransformerLM};
use crate::store::load_model;
use crate::tensor::{Scalar, Tensor};

const NORM_FLOOR: f64 = 1e-12;

/// Projection matrices the transformer exposes for adapters and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
    Ffn,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 5] = [MatrixKind::Q, MatrixKind::K, MatrixKind::V, MatrixKind::O, MatrixKind::Ffn];

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Q => "q",
            MatrixKind::K => "k",
            MatrixKind::V => "v",
            MatrixKind::O => "o",
            MatrixKind::Ffn => "ffn",
        }
    }

    /// Canonical weight-tensor name for this kind in layer `layer`.
    pub fn weight_name(self, layer: usize) -> String {
        match self {
            MatrixKind::Ffn => format!("layer.{layer}.ffn.up.w"),
            k => format!("layer.{layer}.attn.{}.w", k.name()),
        }
    }

    /// Parses a comma-separated selection such as `q,k,v`.
    pub fn parse_list(s: &str) -> Result<Vec<MatrixKind>> {
        let mut out: Vec<MatrixKind> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatrixKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown matrix kind '{s}' (expected q, k, v, o or ffn)")))
    }
}

/// Sum over ordered pairs `i ≠ j` of `1/‖ŵᵢ − ŵⱼ‖`, neurons being the columns of `w[d×n]`.
///
/// Always accumulated in f64.
pub fn hyperspherical_energy<T: Scalar>(w: &Tensor<T>) -> Result<f64> {
    let (d, n) = w.dims2()?;
    if n < 2 {
        return Err(Error::InvalidShape {
            op: "hyperspherical_energy",
            msg: format!("need at least two neurons, got {n}"),
        });
    }
    // column-major unit vectors
    let mut units = vec![0.0f64; d * n];
    for c in 0..n {
        let norm = (0..d).map(|r| w.at(r, c).as_f64().powi(2)).sum::<f64>().sqrt();
        if !(norm > NORM_FLOOR) {
            return Err(Error::ZeroColumn { column: c });
        }
        for r in 0..d {
            units[c * d + r] = w.at(r, c).as_f64() / norm;
        }
    }
    let mut energy = 0.0;
    for i in 0..n {
        let ui = &units[i * d..(i + 1) * d];
        for j in (i + 1)..n {
            let uj = &units[j * d..(j + 1) * d];
            let dist = ui.iter().zip(uj).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist < NORM_FLOOR {
                return Err(Error::DegeneratePair { i, j });
            }
            // (i, j) and (j, i) contribute equally
            energy += 2.0 / dist;
        }
    }
    Ok(energy)
}

/// `Σ_l |HE(after_l) − HE(before_l)|`.
pub fn sahe<T: Scalar>(before: &[Tensor<T>], after: &[Tensor<T>]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::InvalidShape {
            op: "sahe",
            msg: format!("{} layers before, {} after", before.len(), after.len()),
        });
    }
    let mut total = 0.0;
    for (b, a) in before.iter().zip(after) {
        if b.shape() != a.shape() {
            return Err(Error::shape("sahe", b.shape(), a.shape()));
        }
        total += (hyperspherical_energy(a)? - hyperspherical_energy(b)?).abs();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub layer: usize,
    pub kind: MatrixKind,
    pub he_before: f64,
    pub he_after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub sahe: f64,
}

/// `(layer, kind) → (before, after)` weight matrices.
pub type WeightPairs = BTreeMap<(usize, MatrixKind), (Tensor<f64>, Tensor<f64>)>;

impl EnergyReport {
    pub fn from_weights(weights: &WeightPairs) -> Result<Self> {
        let mut rows = Vec::with_capacity(weights.len());
        for (&(layer, kind), (b, a)) in weights {
            if b.shape() != a.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "{} has shape {:?} before and {:?} after",
                    kind.weight_name(layer),
                    b.shape(),
                    a.shape()
                )));
            }
            let he_before = hyperspherical_energy(b)?;
            let he_after = hyperspherical_energy(a)?;
            rows.push(EnergyRow {
                layer,
                kind,
                he_before,
                he_after,
                delta: he_after - he_before,
            });
        }
        rows.sort_by(|x, y| match x.layer.cmp(&y.layer) {
            Ordering::Equal => x.kind.cmp(&y.kind),
            o => o,
        });
        let sahe = rows.iter().map(|r| r.delta.abs()).sum();
        Ok(Self { rows, sahe })
    }

    /// `layer,kind,he_before,he_after,delta` rows, then a `sahe,,,,<value>` footer.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "kind", "he_before", "he_after", "delta"])?;
        for r in &self.rows {
            w.write_record([
                r.layer.to_string(),
                r.kind.to_string(),
                fmt_f64(r.he_before),
                fmt_f64(r.he_after),
                fmt_f64(r.delta),
            ])?;
        }
        w.write_record(["sahe", "", "", "", &fmt_f64(self.sahe)])?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Effective `(layer, kind)` matrices of `model` in f64, with adapters merged.
pub fn effective_weights<T: Scalar>(
    model: &TransformerLM<T>,
    kinds: &[MatrixKind],
) -> Result<BTreeMap<(usize, MatrixKind), Tensor<f64>>> {
    let mut m: TransformerLM<f64> = TransformerLM::from_weights(
        model.config().clone(),
        model.weights().iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
    )?;
    if let Some(set) = model.adapters() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        m.attach_adapters(set.method, &set.points(), &mut rng)?;
        for ((name, dst), (src_name, src)) in m
            .trainable_mut(Trainable::Adapters)
            .into_iter()
            .zip(set.named_tensors())
        {
            debug_assert_eq!(name, src_name);
            *dst = src.cast();
        }
        m.merge_adapters()?;
    }
    let mut out = BTreeMap::new();
    for layer in 0..m.config().n_layers {
        for &kind in kinds {
            out.insert((layer, kind), m.weight(&kind.weight_name(layer))?.clone());
        }
    }
    Ok(out)
}

/// HE deltas of the selected matrices between two model checkpoints.
pub fn energy_report(before: &Path, after: &Path, kinds: &[MatrixKind]) -> Result<EnergyReport> {
    let (b, _) = load_model::<f64>(before)?;
    let (a, _) = load_model::<f64>(after)?;
    if !b.config().same_architecture(a.config()) {
        return Err(Error::ArchitectureMismatch(format!(
            "{} and {} hold different architectures",
            before.display(),
            after.display()
        )));
    }
    let wb = effective_weights(&b, kinds)?;
    let mut wa = effective_weights(&a, kinds)?;
    let pairs = wb
        .into_iter()
        .map(|(k, w)| {
            let after = wa.remove(&k).expect("same architecture");
            (k, (w, after))
        })
        .collect();
    EnergyReport::from_weights(&pairs)
}

/// Shortest representation that parses back to the same f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::adapters::{merge, Adapter, RotationAdapter, Variant};

    fn random(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Tensor<f64> {
        Tensor::from_fn(&[d, n], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn two_orthogonal_columns() {
        let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let he = hyperspherical_energy(&w).unwrap();
        assert!((he - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_error() {
        let dup = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert!(matches!(hyperspherical_energy(&dup), Err(Error::DegeneratePair { i: 0, j: 1 })));
        let zero = Tensor::new(&[2, 3], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(hyperspherical_energy(&zero), Err(Error::ZeroColumn { column: 1 })));
        let one = Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(hyperspherical_energy(&one).is_err());
    }

    #[test]
    fn sahe_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ws: Vec<_> = (0..3).map(|_| random(&mut rng, 4, 3)).collect();
        assert_eq!(sahe(&ws, &ws).unwrap(), 0.0);
        assert!(sahe(&ws, &ws[..2]).is_err());
        let he: Vec<f64> = ws.iter().map(|w| hyperspherical_energy(w).unwrap()).collect();
        let after = vec![ws[1].clone(), ws[0].clone()];
        let want = (he[1] - he[0]).abs() * 2.0;
        assert!((sahe(&ws[..2], &after).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn rotation_keeps_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 8, 6);
        let mut r = RotationAdapter::<f64>::new(Variant::NoMagnitude, 8, 6).unwrap();
        r.randomize(&mut rng, (1.0, 1.0));
        let rw = merge(&Adapter::Rotation(r), &w).unwrap();
        let d = hyperspherical_energy(&rw).unwrap() - hyperspherical_energy(&w).unwrap();
        assert!(d.abs() < 1e-10);
    }

    #[test]
    fn kinds_parse_and_filter() {
        let ks = MatrixKind::parse_list("v, q,v").unwrap();
        assert_eq!(ks, vec![MatrixKind::Q, MatrixKind::V]);
        assert!(MatrixKind::parse_list("q,x").unwrap_err().is_config());
        assert_eq!(MatrixKind::Ffn.weight_name(1), "layer.1.ffn.up.w");
        assert_eq!(MatrixKind::K.weight_name(0), "layer.0.attn.k.w");
    }

    #[test]
    fn report_csv_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = BTreeMap::new();
        for layer in [1, 0] {
            for kind in [MatrixKind::V, MatrixKind::Q] {
                let w = random(&mut rng, 4, 4);
                m.insert((layer, kind), (w.clone(), w));
            }
        }
        let rep = EnergyReport::from_weights(&m).unwrap();
        assert_eq!(rep.sahe, 0.0);
        let order: Vec<_> = rep.rows.iter().map(|r| (r.layer, r.kind)).collect();
        assert_eq!(
            order,
            vec![(0, MatrixKind::Q), (0, MatrixKind::V), (1, MatrixKind::Q), (1, MatrixKind::V)]
        );
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,kind,he_before,he_after,delta");
        assert!(lines[1].starts_with("0,q,"));
        assert_eq!(*lines.last().unwrap(), "sahe,,,,0.0");
    }
}
