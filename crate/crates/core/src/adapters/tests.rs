use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::check_gradients;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[r, c], |_| rng.random_range(-1.0..1.0))
}

fn random_rotation(rng: &mut ChaCha8Rng, variant: Variant, d: usize, n: usize) -> RotationAdapter<f64> {
    let mut a = RotationAdapter::new(variant, d, n).unwrap();
    a.randomize(rng, (0.1, 10.0));
    a
}

fn rotation_fast(a: &RotationAdapter<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = a.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = rotate(&mut g, &b, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn d4_dense_rotation_matches_explicit_block_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_rotation(&mut rng, Variant::Full, 4, 3);
    let th = |i: usize| a.layers()[i].theta.data().to_vec();
    let (fe, fo, re, ro) = (th(0), th(1), th(2), th(3));
    use Direction::{Ccw, Cw};
    let blocks = [
        givens_matrix(4, 0, 1, fe[0], Ccw),
        givens_matrix(4, 2, 3, fe[1], Ccw),
        givens_matrix(4, 1, 2, fo[0], Ccw),
        givens_matrix(4, 0, 1, re[0], Cw),
        givens_matrix(4, 2, 3, re[1], Cw),
        givens_matrix(4, 1, 2, ro[0], Cw),
    ];
    let mut want = Tensor::eye(4);
    for b in &blocks {
        want = want.matmul(b).unwrap();
    }
    let dense = a.dense_rotation().unwrap();
    assert!(dense.max_abs_diff(&want).unwrap() < 1e-12);
    let fast = rotation_fast(&a, &Tensor::eye(4));
    assert!(fast.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn single_layer_matches_dense_product_d8() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in [PairingKind::Even, PairingKind::Odd] {
        for dir in [Direction::Ccw, Direction::Cw] {
            let p = GivensPairing::new(kind, 8);
            let th: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x = random_matrix(&mut rng, 8, 5);
            let fast = big_layer_apply(&p, &th, dir, &x).unwrap();
            let mut dense = Tensor::eye(8);
            for (&(i, j), &t) in p.pairs().iter().zip(&th) {
                dense = dense.matmul(&givens_matrix(8, i, j, t, dir)).unwrap();
            }
            let want = dense.matmul(&x).unwrap();
            assert!(fast.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }
}

#[test]
fn all_variants_identity_at_zero_angles() {
    let x = Tensor::from_fn(&[6, 6], |i| i as f64 / 7.0 - 2.0);
    for v in Variant::ALL {
        let a = RotationAdapter::<f64>::new(v, 6, 6).unwrap();
        assert!(a.is_identity());
        assert!(a.dense_rotation().unwrap().bitwise_eq(&Tensor::eye(6)));
        let w = merge(&Adapter::Rotation(a), &x).unwrap();
        assert!(w.bitwise_eq(&x), "variant {v}");
    }
}

#[test]
fn rev_equal_fwd_is_not_identity() {
    let mut a = RotationAdapter::<f64>::new(Variant::Full, 6, 2).unwrap();
    let fe = Tensor::new(&[3], vec![0.4, -0.7, 1.1]).unwrap();
    let fo = Tensor::new(&[2], vec![0.9, 0.2]).unwrap();
    a.set_param("theta_fwd_even", fe.clone()).unwrap();
    a.set_param("theta_fwd_odd", fo.clone()).unwrap();
    a.set_param("theta_rev_even", fe).unwrap();
    a.set_param("theta_rev_odd", fo).unwrap();
    let r = a.dense_rotation().unwrap();
    assert!(r.max_abs_diff(&Tensor::eye(6)).unwrap() > 1e-3);
}

fn det3(m: &Tensor<f64>) -> f64 {
    let a = |r, c| m.at(r, c);
    a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
        + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
}

#[test]
fn dense_rotation_orthogonal_with_unit_determinant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = random_rotation(&mut rng, Variant::Full, 3, 2);
        let r = a.dense_rotation().unwrap();
        assert!((det3(&r) - 1.0).abs() < 1e-12);
        let a8 = random_rotation(&mut rng, Variant::UniD, 8, 2);
        let r8 = a8.dense_rotation().unwrap();
        let rtr = r8.transpose().unwrap().matmul(&r8).unwrap();
        assert!(rtr.max_abs_diff(&Tensor::eye(8)).unwrap() < 1e-12);
    }
}

#[test]
fn adapted_forward_identity_and_uniform_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w0 = random_matrix(&mut rng, 5, 4);
    let x = random_matrix(&mut rng, 4, 1).reshape(&[4]).unwrap();
    let a = Adapter::Rotation(RotationAdapter::<f64>::new(Variant::Full, 5, 4).unwrap());
    let base = w0.matmul(&x.clone().reshape(&[4, 1]).unwrap()).unwrap().reshape(&[5]).unwrap();
    assert!(adapted_forward(&a, &w0, &x).unwrap().bitwise_eq(&base));

    let mut r = RotationAdapter::<f64>::new(Variant::Full, 5, 4).unwrap();
    r.set_param("m", Tensor::full(&[4], 2.0)).unwrap();
    let y = adapted_forward(&Adapter::Rotation(r), &w0, &x).unwrap();
    let want = base.map(|v| 2.0 * v);
    assert!(y.max_abs_diff(&want).unwrap() < 1e-15);
}

#[test]
fn adapted_forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for v in Variant::ALL {
        let (d, n) = (7, 5);
        let r = random_rotation(&mut rng, v, d, n);
        let w0 = random_matrix(&mut rng, d, n);
        let x = random_matrix(&mut rng, n, 3);
        let dense = r.dense_rotation().unwrap();
        let rotated = if v == Variant::RotRight {
            w0.matmul(&dense).unwrap()
        } else {
            dense.matmul(&w0).unwrap()
        };
        let scaled = match r.magnitude() {
            Some(m) => Tensor::from_fn(&[d, n], |i| rotated.data()[i] * m.data()[i % n]),
            None => rotated,
        };
        let want = scaled.matmul(&x).unwrap();
        let got = adapted_forward(&Adapter::Rotation(r), &w0, &x).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "variant {v}");
    }
}

#[test]
fn merge_matches_forward_on_probes_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut r = RotationAdapter::<f32>::new(Variant::Full, 16, 12).unwrap();
    r.randomize(&mut rng, (0.5, 2.0));
    let w0: Tensor<f32> = random_matrix(&mut rng, 16, 12).cast();
    let a = Adapter::Rotation(r);
    let w = merge(&a, &w0).unwrap();
    for _ in 0..20 {
        let x: Tensor<f32> = random_matrix(&mut rng, 12, 1).cast();
        let want = adapted_forward(&a, &w0, &x).unwrap();
        let got = w.matmul(&x).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
    }
}

#[test]
fn param_counts() {
    let full88 = RotationAdapter::<f64>::new(Variant::Full, 8, 8).unwrap();
    assert_eq!(full88.param_count(), 22);
    assert_eq!(rotation_param_count(Variant::Full, 8, 8), 22);
    let full75 = RotationAdapter::<f64>::new(Variant::Full, 7, 5).unwrap();
    assert_eq!(full75.param_count(), 17);
    assert_eq!(rotation_param_count(Variant::Full, 7, 5), 17);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for d in [8, 16, 33] {
        let lr = LowRankAdapter::<f64>::new(d, d, 4, 1.0, &mut rng).unwrap();
        assert_eq!(lr.param_count(), 8 * d);
        assert_eq!(lowrank_param_count(4, d, d), 8 * d);
    }
    for d in 2..20 {
        for n in 2..9 {
            for v in Variant::ALL {
                let a = RotationAdapter::<f64>::new(v, d, n).unwrap();
                assert_eq!(a.param_count(), rotation_param_count(v, d, n), "{v} {d}×{n}");
            }
        }
    }
}

#[test]
fn lowrank_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w0 = random_matrix(&mut rng, 6, 5);
    let x = random_matrix(&mut rng, 5, 2);
    let lr = LowRankAdapter::<f64>::new(6, 5, 2, 1.5, &mut rng).unwrap();
    let base = w0.matmul(&x).unwrap();
    assert!(lr.forward(&w0, &x).unwrap().bitwise_eq(&base));
    assert!(merge(&Adapter::LowRank(lr), &w0).unwrap().bitwise_eq(&w0));

    let a = random_matrix(&mut rng, 1, 5);
    let b = random_matrix(&mut rng, 6, 1);
    let r1 = LowRankAdapter::from_parts(a.clone(), b.clone(), 0.5).unwrap();
    let dense = Tensor::from_fn(&[6, 5], |i| w0.data()[i] + 0.5 * b.data()[i / 5] * a.data()[i % 5]);
    let want = dense.matmul(&x).unwrap();
    assert!(r1.forward(&w0, &x).unwrap().max_abs_diff(&want).unwrap() < 1e-12);

    assert!(LowRankAdapter::<f64>::new(6, 5, 5, 1.0, &mut rng).is_err());
}

#[test]
fn adapted_weight_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for v in Variant::ALL {
        let (d, n) = (6, 5);
        let r = random_rotation(&mut rng, v, d, n);
        let w0 = random_matrix(&mut rng, d, n);
        let x = random_matrix(&mut rng, n, 2);
        let probe = random_matrix(&mut rng, d, 2);
        let params: Vec<Tensor<f64>> = r.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let reports = check_gradients(&params, 1e-5, 50, 7, |g, vars| {
            let mut it = vars.iter();
            let bound = r.bind_with(|_, _| *it.next().unwrap());
            let w = g.constant(w0.clone());
            let we = rotation_weight(g, &bound, w)?;
            let xv = g.constant(x.clone());
            let y = g.matmul(we, xv)?;
            let p = g.constant(probe.clone());
            let prod = g.mul(y, p)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        for rep in reports {
            assert!(rep.max_rel_err < 1e-4, "{v}: {rep:?}");
        }
    }
}
