//! Central finite-difference checks for graph-built scalar functions.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Worst disagreement found for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub param: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor so that near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the reverse-mode gradient of `f` with central differences.
///
/// `f` receives a fresh graph and one trainable leaf per entry of `params`
/// and must return a scalar. At most `max_coords` coordinates per tensor are
/// checked, sampled with `seed`.
pub fn check_gradients<F>(params: &[Tensor<f64>], h: f64, max_coords: usize, seed: u64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).expect("param has grad");
        let numel = params[pi].numel();
        let mut coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, max_coords).into_vec()
        };
        coords.sort_unstable();
        let mut worst = GradCheck {
            param: pi,
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[c];
            let e = rel_err(a, numeric);
            if e >= worst.max_rel_err {
                worst.max_rel_err = e;
                worst.worst_coord = c;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        reports.push(worst);
    }
    Ok(reports)
}

/// Gradient checks of one graph operation.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub checks: Vec<GradCheck>,
}

impl OpReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn min_coords(&self) -> usize {
        self.checks.iter().map(|c| c.coords_checked).min().unwrap_or(0)
    }
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// Checks every differentiable graph operation against central differences.
///
/// Each operation's output is contracted with a fixed random probe so the
/// scalar depends on every output entry; every input has at least 64 entries.
pub fn op_gradients(seed: u64, h: f64, max_coords: usize) -> Result<Vec<OpReport>> {
    use rand::Rng;
    use std::sync::Arc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let sq = rand_t(&[8, 8]);
    let sq2 = rand_t(&[8, 8]);
    let a87 = rand_t(&[8, 7]);
    let b78 = rand_t(&[7, 8]);
    let b97 = rand_t(&[9, 7]);
    let wide = rand_t(&[2, 64]);
    let row = rand_t(&[64]);
    let pos = Tensor::from_fn(&[64], |i| 0.5 + (i as f64 * 0.37).sin().abs());
    let table = rand_t(&[16, 4]);
    let tall = rand_t(&[128, 1]);
    let angles = Tensor::from_fn(&[64], |i| ((i * 7 % 13) as f64 - 6.0) * 0.4);
    let angles_odd = Tensor::from_fn(&[63], |i| ((i * 5 % 11) as f64 - 5.0) * 0.5);
    let probes: Vec<Tensor<f64>> = [[8, 8], [8, 7], [7, 8], [8, 9], [2, 64], [128, 1], [8, 15], [8, 4], [12, 4]]
        .iter()
        .map(|s| rand_t(s))
        .collect();
    let probe = move |g: &mut Graph<f64>, y: Var| -> Result<Var> {
        let shape = g.value(y).shape().to_vec();
        let p = probes
            .iter()
            .find(|p| p.shape() == shape.as_slice())
            .cloned()
            .unwrap_or_else(|| Tensor::from_fn(&shape, |i| ((i as f64) * 0.731).cos()));
        let pv = g.constant(p);
        let prod = g.mul(y, pv)?;
        Ok(g.sum(prod))
    };
    let probe = Arc::new(probe);
    macro_rules! case {
        ($name:expr, [$($p:expr),*], |$g:ident, $v:ident| $body:expr) => {{
            let pr = probe.clone();
            let f: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> = Box::new(move |$g, $v| {
                let y = $body;
                pr($g, y)
            });
            ($name, vec![$($p.clone()),*], f) as Case
        }};
    }
    let pairs: Arc<[(usize, usize)]> = (0..64).map(|k| (2 * k, 2 * k + 1)).collect();
    let pairs_odd: Arc<[(usize, usize)]> = (0..63).map(|k| (2 * k + 1, 2 * k + 2)).collect();
    let cases: Vec<Case> = vec![
        case!("matmul", [a87, b78], |g, v| g.matmul(v[0], v[1])?),
        case!("matmul_nt", [a87, b97], |g, v| g.matmul_nt(v[0], v[1])?),
        case!("transpose", [a87], |g, v| g.transpose(v[0])?),
        case!("add", [sq, sq2], |g, v| g.add(v[0], v[1])?),
        case!("sub", [sq, sq2], |g, v| g.sub(v[0], v[1])?),
        case!("mul", [sq, sq2], |g, v| g.mul(v[0], v[1])?),
        case!("scale", [sq], |g, v| g.scale(v[0], 1.7)),
        case!("add_const", [sq], |g, v| {
            let s = g.add_const(v[0], 0.3);
            g.mul(s, s)?
        }),
        case!("add_row", [wide, row], |g, v| g.add_row(v[0], v[1])?),
        case!("scale_cols", [wide, row], |g, v| g.scale_cols(v[0], v[1])?),
        case!("neg", [sq], |g, v| g.neg(v[0])),
        case!("gelu", [sq], |g, v| g.gelu(v[0])),
        case!("sigmoid", [sq], |g, v| g.sigmoid(v[0])),
        case!("log_sigmoid", [sq], |g, v| g.log_sigmoid(v[0])),
        case!("softplus", [sq], |g, v| g.softplus(v[0])),
        case!("sum", [sq], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.sum(sq);
            g.mul(s, s)?
        }),
        case!("mean", [sq], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.mean(sq);
            g.mul(s, s)?
        }),
        case!("softmax_rows", [sq], |g, v| g.softmax_rows(v[0])?),
        case!("causal_softmax_rows", [sq], |g, v| g.causal_softmax_rows(v[0])?),
        case!("log_softmax_rows", [sq], |g, v| g.log_softmax_rows(v[0])?),
        case!("layer_norm", [wide, pos, row], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)?),
        case!("embedding", [table], |g, v| g.embedding(v[0], &[3, 0, 15, 3, 7, 7, 9, 1, 2, 3, 11, 14])?),
        case!("concat_cols", [a87, sq], |g, v| g.concat_cols(&[v[0], v[1]])?),
        case!("slice_cols", [sq], |g, v| g.slice_cols(v[0], 2, 4)?),
        case!("pick", [sq], |g, v| {
            let at: Vec<(usize, usize)> = (0..64).map(|i| (i % 8, (i * 3) % 8)).collect();
            g.pick(v[0], &at)?
        }),
        case!("stack", [sq], |g, v| {
            let mut items = Vec::new();
            for i in 0..64 {
                let p = g.pick(v[0], &[(i / 8, i % 8)])?;
                let s = g.sum(p);
                items.push(g.mul(s, s)?);
            }
            g.stack(&items)?
        }),
        case!("rotate_pairs_ccw", [tall, angles], |g, v| g.rotate_pairs(v[0], v[1], pairs.clone(), 1.0)?),
        case!("rotate_pairs_cw_odd", [tall, angles_odd], |g, v| g.rotate_pairs(
            v[0],
            v[1],
            pairs_odd.clone(),
            -1.0
        )?),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (op, params, f) in cases {
        let checks = check_gradients(&params, h, max_coords, seed, |g, v| f(g, v))?;
        out.push(OpReport { op, checks });
    }
    Ok(out)
}
