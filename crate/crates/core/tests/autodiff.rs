use maneuver_core::autodiff::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Builds a scalar loss as a random weighted sum of `out` so that every
/// output coordinate contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of `f` against its tape gradient, for every
/// coordinate of every input.
fn check_gradients<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut pd = plus[k].data().to_vec();
            pd[i] += EPS;
            plus[k] = Tensor::new(input.shape().to_vec(), pd).unwrap();
            let mut md = minus[k].data().to_vec();
            md[i] -= EPS;
            minus[k] = Tensor::new(input.shape().to_vec(), md).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

fn assert_op_gradients<F>(name: &str, shapes: &[&[usize]], out_shape: &[usize], op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    for trial in 0..20 {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let weights = random_tensor(&mut rng, out_shape);
        let worst = check_gradients(&inputs, |tape, vars| {
            let out = op(tape, vars);
            weighted_sum(tape, out, &weights)
        });
        assert!(worst < REL_TOL, "{name} trial {trial}: rel err {worst:e}");
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[11.0]);

    assert!(matches!(tape.matmul(a, a), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random_tensor(&mut rng, &[3, 3]), random_tensor(&mut rng, &[3, 3])];
    let worst = check_gradients(&inputs, |tape, v| {
        let p = tape.matmul(v[0], v[1]).unwrap();
        tape.sum(p).unwrap()
    });
    assert!(worst < REL_TOL, "{worst:e}");
}

#[test]
fn relu_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let z = tape.constant(Tensor::zeros(&[4]));
    let rz = tape.relu(z).unwrap();
    assert_eq!(tape.value(rz).data(), &[0.0; 4]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0, 0.0]).unwrap());
    let y = tape.relu(x).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    for (input, expected) in [
        (vec![0.0, 0.0], [0.5, 0.5]),
        (vec![1000.0, 1000.0], [0.5, 0.5]),
        (vec![1f64.ln(), 3f64.ln()], [0.25, 0.75]),
    ] {
        let x = tape.constant(Tensor::vector(input).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    for axis in 0..3 {
        let x = tape.constant(random_tensor(&mut rng, &[3, 4, 5]).clone());
        let scaled = tape.scale(x, 10.0).unwrap();
        let y = tape.softmax(scaled, axis).unwrap();
        let ones = tape.mean_pool(y, axis).unwrap();
        let dim = [3, 4, 5][axis] as f64;
        for v in tape.value(ones).data() {
            assert!((v * dim - 1.0).abs() < 1e-9);
        }
        assert!(tape.value(y).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[1, 2]);
    assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

    let single = tape.concat(&[a], 1).unwrap();
    assert_eq!(tape.value(single), tape.value(a));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[2, 3, 2]);
    let y = random_tensor(&mut rng, &[2, 1, 2]);
    let (vx, vy) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let joined = tape.concat(&[vx, vy], 1).unwrap();
    let out = tape.value(joined);
    assert_eq!(out.slice_axis(1, 0, 3).unwrap(), x);
    assert_eq!(out.slice_axis(1, 3, 1).unwrap(), y);

    let bad = tape.constant(Tensor::zeros(&[3, 1, 2]));
    assert!(tape.concat(&[vx, bad], 1).is_err());
}

#[test]
fn mean_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
    let m = tape.mean_pool(x, 0).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0]);

    let single = tape.constant(Tensor::from_rows(&[vec![5.0, -1.0]]).unwrap());
    let id = tape.mean_pool(single, 0).unwrap();
    assert_eq!(tape.value(id).data(), &[5.0, -1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[4, 3]));
    let m = tape.mean_pool(x, 0).unwrap();
    let loss = tape.sum(m).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 0.25));
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
    let loss = tape.cross_entropy(logits, &[0], &[true]).unwrap();
    assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let confident = tape.leaf(Tensor::from_rows(&[vec![1e9, 0.0, 0.0]]).unwrap());
    let loss = tape.cross_entropy(confident, &[0], &[true]).unwrap();
    assert!(tape.value(loss).item().abs() < 1e-12);

    assert!(matches!(
        tape.cross_entropy(logits, &[0], &[false]),
        Err(TensorError::Domain { .. })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let logits = random_tensor(&mut rng, &[4, 6]);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let mask = [true, false, true, true];
        let worst = check_gradients(&[logits], |tape, v| tape.cross_entropy(v[0], &labels, &mask).unwrap());
        assert!(worst < REL_TOL, "{worst:e}");
    }
}

#[test]
fn masked_rows_do_not_affect_loss() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![5.0, 9.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![-40.0, 2.0]]).unwrap());
    let la = tape.cross_entropy(a, &[1, 0], &[true, false]).unwrap();
    let lb = tape.cross_entropy(b, &[1, 1], &[true, false]).unwrap();
    assert_eq!(tape.value(la).item(), tape.value(lb).item());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);

    assert!(matches!(tape.backward(sq), Err(TensorError::Domain { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0]).unwrap());
    let c = tape.constant(Tensor::vector(vec![2.0]).unwrap());
    let y = tape.mul(x, c).unwrap();
    let grads = tape.backward(y).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1e200]).unwrap());
    let y = tape.mul(x, x);
    assert!(matches!(y, Err(TensorError::NonFinite { op: "mul", .. })));
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (alpha, beta) = (0.7, -1.3);
    for _ in 0..10 {
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let grad_of = |wa: f64, wb: f64| {
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let p = tape.matmul(va, vb).unwrap();
            let t = tape.tanh(p).unwrap();
            let l1 = tape.sum(t).unwrap();
            let s = tape.softmax(p, 1).unwrap();
            let sq = tape.mul(s, p).unwrap();
            let l2 = tape.sum(sq).unwrap();
            let s1 = tape.scale(l1, wa).unwrap();
            let s2 = tape.scale(l2, wb).unwrap();
            let loss = tape.add(s1, s2).unwrap();
            let g = tape.backward(loss).unwrap();
            g.get(va).unwrap().clone()
        };
        let combined = grad_of(alpha, beta);
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            let expect = alpha * g1.data()[i] + beta * g2.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn every_op_passes_finite_difference_check() {
    assert_op_gradients("matmul", &[&[3, 4], &[4, 2]], &[3, 2], |t, v| t.matmul(v[0], v[1]).unwrap());
    assert_op_gradients("batch_matmul", &[&[2, 3, 4], &[2, 4, 2]], &[2, 3, 2], |t, v| {
        t.batch_matmul(v[0], v[1]).unwrap()
    });
    assert_op_gradients("transpose_last", &[&[2, 3, 4]], &[2, 4, 3], |t, v| t.transpose_last(v[0]).unwrap());
    assert_op_gradients("reshape", &[&[2, 6]], &[3, 4], |t, v| t.reshape(v[0], &[3, 4]).unwrap());
    assert_op_gradients("add", &[&[2, 3], &[2, 3]], &[2, 3], |t, v| t.add(v[0], v[1]).unwrap());
    assert_op_gradients("add_row", &[&[4, 3], &[3]], &[4, 3], |t, v| t.add_row(v[0], v[1]).unwrap());
    assert_op_gradients("mul", &[&[2, 3], &[2, 3]], &[2, 3], |t, v| t.mul(v[0], v[1]).unwrap());
    assert_op_gradients("scale", &[&[5]], &[5], |t, v| t.scale(v[0], -0.3).unwrap());
    assert_op_gradients("relu", &[&[3, 4]], &[3, 4], |t, v| t.relu(v[0]).unwrap());
    assert_op_gradients("sigmoid", &[&[3, 4]], &[3, 4], |t, v| t.sigmoid(v[0]).unwrap());
    assert_op_gradients("tanh", &[&[3, 4]], &[3, 4], |t, v| t.tanh(v[0]).unwrap());
    for axis in 0..3 {
        assert_op_gradients("softmax", &[&[2, 3, 4]], &[2, 3, 4], move |t, v| t.softmax(v[0], axis).unwrap());
    }
    assert_op_gradients("concat", &[&[2, 1, 3], &[2, 2, 3]], &[2, 3, 3], |t, v| {
        t.concat(&[v[0], v[1]], 1).unwrap()
    });
    assert_op_gradients("stack", &[&[2, 3], &[2, 3], &[2, 3]], &[2, 3, 3], |t, v| {
        t.stack(&[v[0], v[1], v[2]], 1).unwrap()
    });
    assert_op_gradients("slice", &[&[3, 5]], &[3, 2], |t, v| t.slice(v[0], 1, 2, 2).unwrap());
    assert_op_gradients("mean_pool", &[&[3, 4, 2]], &[3, 2], |t, v| t.mean_pool(v[0], 1).unwrap());
    assert_op_gradients("gather_rows", &[&[2, 3]], &[4, 3], |t, v| t.gather_rows(v[0], &[1, 0, 1, 1]).unwrap());
    assert_op_gradients("sum", &[&[2, 3]], &[1], |t, v| t.sum(v[0]).unwrap());
}
