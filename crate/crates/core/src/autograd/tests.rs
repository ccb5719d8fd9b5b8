use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn trivial_forward_values() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::scalar(0.0)).unwrap();
    let th = t.tanh(z).unwrap();
    let sg = t.sigmoid(z).unwrap();
    assert_eq!(t.value(th).item(), 0.0);
    assert_eq!(t.value(sg).item(), 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, 3, 4);
    let i = t.constant(Tensor::identity(3)).unwrap();
    let xv = t.constant(x.clone()).unwrap();
    let y = t.matmul(i, xv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn square_and_sigmoid_derivatives() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0)).unwrap();
    let y = t.mul(x, x).unwrap();
    assert_eq!(t.backward(y).unwrap().wrt(x).unwrap().item(), 6.0);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(0.0)).unwrap();
    let y = t.sigmoid(x).unwrap();
    assert_eq!(t.backward(y).unwrap().wrt(x).unwrap().item(), 0.25);
}

#[test]
fn errors_name_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(2, 3)).unwrap();
    let b = t.constant(Tensor::zeros(2, 3)).unwrap();
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutogradError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
    assert!(t.backward(a).is_err());

    let mut other = Tape::new();
    let c = other.constant(Tensor::scalar(1.0)).unwrap();
    assert_eq!(t.tanh(c).unwrap_err(), AutogradError::ForeignTape);
    assert!(t.constant(Tensor::row(vec![f64::NAN])).is_err());
}

#[test]
fn unreachable_param_has_zero_gradient() {
    let p = Param::new("p", Tensor::row(vec![1.0, 2.0]));
    let q = Param::new("q", Tensor::row(vec![1.0, 2.0]));
    let mut t = Tape::new();
    let pv = t.param(&p);
    let qv = t.param(&q);
    let s = t.sum(pv).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(qv).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(g.wrt(pv).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn param_recording_is_memoized_and_clones_do_not_alias() {
    let p = Param::new("p", Tensor::scalar(2.0));
    let c = p.clone();
    assert_ne!(p.key(), c.key());
    let mut t = Tape::new();
    let a = t.param(&p);
    let b = t.param(&p);
    assert_eq!(a, b);
    let y = t.mul(a, b).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.param(p.key()).unwrap(), &[4.0]);
    assert!(g.param(c.key()).is_none());
}

#[test]
fn accumulation_and_zeroing() {
    let mut p = Param::new("p", Tensor::scalar(2.0));
    for _ in 0..2 {
        let mut t = Tape::new();
        let v = t.param(&p);
        let y = t.scale(v, 3.0).unwrap();
        let g = t.backward(y).unwrap();
        p.accumulate(&g);
    }
    assert_eq!(p.grad(), &[6.0]);
    p.zero_grad();
    let mut t = Tape::new();
    let v = t.param(&p);
    let y = t.scale(v, 3.0).unwrap();
    p.accumulate(&t.backward(y).unwrap());
    let once = p.grad().to_vec();
    p.zero_grad();
    p.accumulate(&t.backward(y).unwrap());
    assert_eq!(p.grad(), once.as_slice());
}

#[test]
fn mean_tanh_affine_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, 5, 4);
    let b = rand_tensor(&mut rng, 1, 3);
    let w = rand_tensor(&mut rng, 4, 3);
    let err = grad_check(
        |t, wv| {
            let xv = t.constant(x.clone())?;
            let bv = t.constant(b.clone())?;
            let h = t.matmul(xv, wv)?;
            let h = t.add(h, bv)?;
            let h = t.tanh(h)?;
            t.mean(h)
        },
        &w,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

type Prim = fn(&mut Tape, Var) -> Result<Var, AutogradError>;

fn primitives() -> Vec<(&'static str, Prim)> {
    fn weights(t: &mut Tape, x: Var) -> Result<Var, AutogradError> {
        // A fixed non-uniform weighting so sums do not hide per-element errors.
        let s = t.value(x).shape();
        let w = Tensor::new(s[0], s[1], (0..s[0] * s[1]).map(|i| 0.3 + 0.17 * i as f64).collect())?;
        let w = t.constant(w)?;
        let y = t.mul(x, w)?;
        t.sum(y)
    }
    vec![
        ("matmul", |t, x| {
            let c = t.constant(Tensor::new(4, 2, vec![0.5, -1.0, 0.2, 0.9, -0.4, 1.1, 0.7, 0.3])?)?;
            let y = t.matmul(x, c)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        }),
        ("add", |t, x| {
            let r = t.slice(x, 0, 0, 1)?;
            let y = t.add(x, r)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        }),
        ("sub", |t, x| {
            let a = t.slice(x, 0, 0, 1)?;
            let b = t.slice(x, 0, 1, 1)?;
            let y = t.sub(a, b)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        }),
        ("mul", |t, x| {
            let y = t.mul(x, x)?;
            weights(t, y)
        }),
        ("div", |t, x| {
            let d = t.add_scalar(x, 3.0)?;
            let y = t.div(x, d)?;
            let s = t.sum(d)?;
            let z = t.div(y, s)?;
            weights(t, z)
        }),
        ("tanh", |t, x| {
            let y = t.tanh(x)?;
            weights(t, y)
        }),
        ("sigmoid", |t, x| {
            let y = t.sigmoid(x)?;
            weights(t, y)
        }),
        ("relu", |t, x| {
            let y = t.relu(x)?;
            weights(t, y)
        }),
        ("exp_ln", |t, x| {
            let e = t.exp(x)?;
            let y = t.add_scalar(e, 1.0)?;
            let y = t.ln(y)?;
            weights(t, y)
        }),
        ("softmax", |t, x| {
            let y = t.softmax(x, &[2, 2])?;
            weights(t, y)
        }),
        ("log_softmax", |t, x| {
            let y = t.log_softmax(x, &[1, 3])?;
            weights(t, y)
        }),
        ("mean", |t, x| {
            let y = t.mul(x, x)?;
            t.mean(y)
        }),
        ("sum_rows", |t, x| {
            let y = t.sum_rows(x)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        }),
        ("slice_cols", |t, x| {
            let y = t.slice(x, 1, 1, 2)?;
            weights(t, y)
        }),
        ("concat", |t, x| {
            let a = t.slice(x, 1, 0, 1)?;
            let b = t.tanh(x)?;
            let y = t.concat(&[b, a], 1)?;
            let z = t.concat(&[y, y], 0)?;
            weights(t, z)
        }),
        ("clamp", |t, x| {
            let y = t.clamp(x, -0.8, 0.8)?;
            weights(t, y)
        }),
    ]
}

#[test]
fn every_primitive_passes_grad_check_on_seeded_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, f) in primitives() {
        for _ in 0..20 {
            let mut p = rand_tensor(&mut rng, 3, 4);
            // Keep relu and clamp away from their kinks.
            for v in p.data_mut() {
                if (v.abs() < 1e-2) || ((v.abs() - 0.8).abs() < 1e-2) {
                    *v += 0.05;
                }
            }
            let err = grad_check(f, &p, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Param::new("w", rand_tensor(&mut rng, 4, 8));
    let x = rand_tensor(&mut rng, 3, 4);
    let build = |t: &mut Tape, which: u8| -> Var {
        let wv = t.param(&w);
        let xv = t.constant(x.clone()).unwrap();
        let h = t.matmul(xv, wv).unwrap();
        let a = t.tanh(h).unwrap();
        let l1 = t.mean(a).unwrap();
        let s = t.sigmoid(h).unwrap();
        let l2 = t.sum(s).unwrap();
        match which {
            0 => l1,
            1 => l2,
            _ => t.add(l1, l2).unwrap(),
        }
    };
    let grad = |which| {
        let mut t = Tape::new();
        let l = build(&mut t, which);
        t.backward(l).unwrap().param(w.key()).unwrap().to_vec()
    };
    let (g1, g2, g12) = (grad(0), grad(1), grad(2));
    for i in 0..g1.len() {
        assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-10);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn forward_outputs_stay_finite(v in prop::collection::vec(-50.0f64..50.0, 6)) {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(2, 3, v).unwrap()).unwrap();
            let a = t.tanh(x).unwrap();
            let b = t.sigmoid(x).unwrap();
            let c = t.log_softmax(x, &[3]).unwrap();
            let d = t.softmax(x, &[1, 2]).unwrap();
            for n in [a, b, c, d] {
                prop_assert!(t.value(n).is_finite());
            }
            for r in 0..2 {
                let p: f64 = t.value(d).row_slice(r)[1..].iter().sum();
                prop_assert!((p - 1.0).abs() < 1e-12);
            }
        }
    }
}
