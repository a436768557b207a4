//! Every tape op against central differences in f64, plus layout and
//! determinism properties.

use mcae_core::numerics::{finite_difference_check, Tape, Tensor, Var};
use mcae_core::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

/// Checks d/dθ Σ(r ⊙ build(θ)) for a fixed random projection `r`.
fn check<F>(inputs: &[Tensor<f64>], build: F, tol: f64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.shape(out).to_vec()
    };
    let proj = Tensor::<f64>::randn(&probe, 1.0, &mut rng);
    let objective = |ts: &[Tensor<f64>]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t)).collect();
        let out = build(&mut tape, &vars)?;
        let r = tape.leaf(&proj);
        let prod = tape.mul(out, r)?;
        let loss = tape.sum_all(prod)?;
        let grads = tape.backward(loss)?;
        let gs = vars.iter().map(|&v| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).len()])).collect();
        Ok((tape.value(loss)[0], gs))
    };
    let (_, analytic) = objective(inputs).unwrap();
    for (which, t) in inputs.iter().enumerate() {
        let mut params = t.data().to_vec();
        let rep = finite_difference_check(
            |p| {
                let mut ts = inputs.to_vec();
                ts[which] = Tensor::new(t.shape().to_vec(), p.to_vec())?;
                Ok(objective(&ts)?.0)
            },
            &mut params,
            &analytic[which],
            None,
            H,
            tol,
        )
        .unwrap();
        assert!(rep.passed(), "input {which}: {rep:?}");
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = rnd(shape, seed);
    let data = t.data().iter().map(|x| x.abs() + 0.5).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let a = rnd(&[2, 3], 1);
    let b = rnd(&[2, 3], 2);
    check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 1e-5);
    check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), 1e-5);
    check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), 1e-5);
    check(&[a.clone(), positive(&[2, 3], 3)], |t, v| t.div(v[0], v[1]), 1e-5);
    check(&[a.clone()], |t, v| t.exp(v[0]), 1e-5);
    check(&[positive(&[2, 3], 4)], |t, v| t.log(v[0]), 1e-5);
    check(&[a.clone()], |t, v| t.sigmoid(v[0]), 1e-5);
    check(&[a.clone()], |t, v| t.gelu(v[0]), 1e-5);
    check(&[a.clone()], |t, v| t.relu(v[0]), 1e-5);
    check(&[a], |t, v| t.clamp(v[0], -0.5, 0.5), 1e-5);
}

#[test]
fn broadcasting_ops_reduce_gradients_correctly() {
    let a = rnd(&[2, 3, 4], 5);
    check(&[a.clone(), rnd(&[4], 6)], |t, v| t.add(v[0], v[1]), 1e-5);
    check(&[a.clone(), rnd(&[3, 1], 7)], |t, v| t.mul(v[0], v[1]), 1e-5);
    check(&[a.clone(), positive(&[2, 1, 4], 8)], |t, v| t.div(v[0], v[1]), 1e-5);
    check(&[rnd(&[1, 3, 1], 9), a], |t, v| t.sub(v[0], v[1]), 1e-5);
}

#[test]
fn matmul_plain_and_batched() {
    check(&[rnd(&[3, 4], 10), rnd(&[4, 2], 11)], |t, v| t.matmul(v[0], v[1]), 1e-5);
    check(&[rnd(&[2, 3, 4], 12), rnd(&[4, 5], 13)], |t, v| t.matmul(v[0], v[1]), 1e-5);
    check(&[rnd(&[2, 3, 4], 14), rnd(&[2, 4, 5], 15)], |t, v| t.matmul(v[0], v[1]), 1e-5);
}

#[test]
fn reductions_and_softmax() {
    let a = rnd(&[2, 3, 4], 16);
    check(&[a.clone()], |t, v| t.sum(v[0], &[1]), 1e-5);
    check(&[a.clone()], |t, v| t.mean(v[0], &[0, 2]), 1e-5);
    check(&[a.clone()], |t, v| t.sum_all(v[0]), 1e-5);
    for axis in 0..3 {
        check(&[a.clone()], |t, v| t.softmax(v[0], axis), 1e-5);
    }
}

#[test]
fn layout_ops() {
    let a = rnd(&[2, 3, 4], 17);
    check(&[a.clone()], |t, v| t.reshape(v[0], &[6, 4]), 1e-5);
    check(&[a.clone()], |t, v| t.transpose(v[0], &[2, 0, 1]), 1e-5);
    check(&[a.clone(), rnd(&[2, 1, 4], 18)], |t, v| t.concat(&[v[0], v[1]], 1), 1e-5);
    check(&[a.clone()], |t, v| t.gather(v[0], &[2, 0, 2], 1), 1e-5);
    check(&[a, rnd(&[2, 3, 2], 19)], |t, v| t.scatter(v[0], v[1], &[3, 1], 2), 1e-5);
}

#[test]
fn convolutions() {
    check(&[rnd(&[2, 2, 4, 6], 20), rnd(&[3, 2, 2, 2], 21), rnd(&[3], 22)], |t, v| t.patch_embed(v[0], v[1], v[2], 2), 1e-5);
    check(&[rnd(&[2, 3, 4, 5], 23), rnd(&[5, 3, 3], 24), rnd(&[5], 25)], |t, v| t.depthwise_conv2d(v[0], v[1], v[2]), 1e-5);
}

#[test]
fn normalizations() {
    let x = rnd(&[6, 4], 26);
    let (g, b) = (rnd(&[4], 27), rnd(&[4], 28));
    check(&[x.clone(), g.clone(), b.clone()], |t, v| t.batch_norm(v[0], v[1], v[2], None, 1e-5), 1e-4);
    check(
        &[x.clone(), g.clone(), b.clone()],
        |t, v| t.batch_norm(v[0], v[1], v[2], Some(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]), 1e-5),
        1e-4,
    );
    check(&[x.clone(), g.clone(), b.clone()], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), 1e-4);
    let (m, s) = (vec![0.1, -0.2, 0.3, 0.0], vec![1.5, 0.5, 2.0, 1.0]);
    check(&[x, g, b], |t, v| t.norm_running(v[0], v[1], v[2], &m, &s, 1e-5), 1e-5);
}

#[test]
fn weighted_batch_norm_ignores_zero_weight_rows_in_statistics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&[3, 1], vec![1.0, 100.0, 3.0]).unwrap();
    let g = tape.constant(&[1], vec![1.0]).unwrap();
    let b = tape.constant(&[1], vec![0.0]).unwrap();
    let y = tape.batch_norm(x, g, b, Some(vec![1.0, 0.0, 1.0]), 0.0).unwrap();
    let (mean, var, count) = tape.norm_stats(y).unwrap();
    assert_eq!(mean, &[2.0]);
    assert_eq!(var, &[1.0]);
    assert_eq!(count, 2.0);
    assert_eq!(tape.value(y)[0], -1.0);
    assert_eq!(tape.value(y)[2], 1.0);
}

#[test]
fn trivial_forward_values() {
    let mut tape = Tape::<f32>::new();
    let z = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
    let s = tape.softmax(z, 0).unwrap();
    assert_eq!(tape.value(s), &[0.5, 0.5]);
    let z0 = tape.constant(&[1], vec![0.0]).unwrap();
    let sg = tape.sigmoid(z0).unwrap();
    assert_eq!(tape.value(sg), &[0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f32>::randn(&[3, 3], 1.0, &mut rng);
    let eye = tape.constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let xv = tape.leaf(&x);
    let prod = tape.matmul(eye, xv).unwrap();
    assert_eq!(tape.value(prod), x.data());
}

#[test]
fn trivial_backward_values() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(&Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 5.0]).unwrap());
    let loss = tape.sum_all(x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0; 4]);

    let mut tape = Tape::<f32>::new();
    let x = tape.param(&Tensor::new(vec![1], vec![0.0]).unwrap());
    let s = tape.sigmoid(x).unwrap();
    let loss = tape.sum_all(s).unwrap();
    assert_eq!(tape.backward(loss).unwrap().wrt(x).unwrap(), &[0.25]);
}

#[test]
fn fan_out_accumulates_additively() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let loss = tape.sum_all(z).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[4.0, -3.0]);
}

#[test]
fn backward_errors() {
    let tape = Tape::<f32>::new();
    let mut other = Tape::<f32>::new();
    let foreign = other.scalar(1.0);
    assert!(tape.backward(foreign).is_err(), "backward before any forward");

    let mut tape = Tape::<f32>::new();
    let x = tape.param(&Tensor::zeros(&[3]));
    assert!(tape.backward(x).is_err(), "non-scalar loss");
}

#[test]
fn shape_errors_name_the_operation() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = tape.constant(&[4], vec![0.0; 4]).unwrap();
    let err = tape.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn same_seed_gives_bit_identical_loss_and_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::<f32>::randn(&[5, 3], 1.0, &mut rng);
        let x = Tensor::<f32>::randn(&[4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (wv, xv) = (tape.param(&w), tape.leaf(&x));
        let h = tape.matmul(xv, wv).unwrap();
        let s = tape.softmax(h, 1).unwrap();
        let g = tape.gelu(s).unwrap();
        let loss = tape.mean_all(g).unwrap();
        let grads = tape.backward(loss).unwrap();
        (tape.value(loss)[0].to_bits(), grads.wrt(wv).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_lies_on_the_simplex(data in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[3, 4], data).unwrap();
        let y = tape.softmax(x, axis).unwrap();
        let v = tape.value(y);
        prop_assert!(v.iter().all(|&p| p >= 0.0));
        let sums: Vec<f64> = if axis == 0 {
            (0..4).map(|j| (0..3).map(|i| v[i * 4 + j]).sum()).collect()
        } else {
            (0..3).map(|i| v[i * 4..i * 4 + 4].iter().sum()).collect()
        };
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layout_round_trips_are_bit_exact(data in prop::collection::vec(-1e3f32..1e3, 24)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&[2, 3, 4], data.clone()).unwrap();
        let t = tape.transpose(x, &[1, 2, 0]).unwrap();
        let back = tape.transpose(t, &[2, 0, 1]).unwrap();
        prop_assert_eq!(tape.value(back), &data[..]);
        let r = tape.reshape(x, &[4, 6]).unwrap();
        let r2 = tape.reshape(r, &[2, 3, 4]).unwrap();
        prop_assert_eq!(tape.value(r2), &data[..]);
        let first = tape.gather(x, &[0, 1], 2).unwrap();
        let rest = tape.gather(x, &[2, 3], 2).unwrap();
        let joined = tape.concat(&[first, rest], 2).unwrap();
        prop_assert_eq!(tape.value(joined), &data[..]);
    }
}
