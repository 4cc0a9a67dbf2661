use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_inputs, check_params};
use super::nn::{Dropout, LstmCell, MultiHeadAttention, TransformerLayer};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights so that every output
/// entry contributes a distinct amount to the loss.
fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let n = tape.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = tape.constant(Tensor::new(tape.shape(x).to_vec(), w)?);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn assert_grad<F>(shapes: &[&[usize]], seed: u64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let report = check_inputs(&inputs, |t, v| {
        let y = f(t, v)?;
        weighted_sum(t, y)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
    assert!(report.checked > 0);
}

#[test]
fn elementwise_and_linear_ops() {
    assert_grad(&[&[3, 4], &[4, 2]], 1, |t, v| t.matmul(v[0], v[1]));
    assert_grad(&[&[3, 4], &[3, 4]], 2, |t, v| t.add(v[0], v[1]));
    assert_grad(&[&[3, 4], &[1, 4]], 3, |t, v| t.add(v[0], v[1]));
    assert_grad(&[&[3, 4], &[1, 4]], 4, |t, v| t.sub(v[0], v[1]));
    assert_grad(&[&[3, 4], &[3, 4]], 5, |t, v| t.mul(v[0], v[1]));
    assert_grad(&[&[3, 4], &[1, 4]], 6, |t, v| t.mul(v[0], v[1]));
    assert_grad(&[&[2, 3]], 7, |t, v| Ok(t.scale(v[0], -2.5)));
    assert_grad(&[&[2, 3]], 8, |t, v| t.transpose(v[0]));
    assert_grad(&[&[2, 6]], 9, |t, v| t.reshape(v[0], &[3, 4]));
}

#[test]
fn nonlinearities() {
    assert_grad(&[&[3, 5]], 10, |t, v| Ok(t.tanh(v[0])));
    assert_grad(&[&[3, 5]], 11, |t, v| Ok(t.sigmoid(v[0])));
    assert_grad(&[&[3, 5]], 12, |t, v| Ok(t.relu(v[0])));
    assert_grad(&[&[3, 5]], 13, |t, v| t.softmax(v[0], 1));
    assert_grad(&[&[3, 5]], 14, |t, v| t.softmax(v[0], 0));
    let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
    assert_grad(&[&[3, 5]], 15, move |t, v| t.masked_softmax(v[0], &mask));
}

#[test]
fn structural_ops() {
    assert_grad(&[&[2, 3], &[2, 4]], 20, |t, v| t.concat(&[v[0], v[1]], 1));
    assert_grad(&[&[2, 3], &[1, 3], &[3, 3]], 21, |t, v| t.concat(&[v[0], v[1], v[2]], 0));
    assert_grad(&[&[4, 5]], 22, |t, v| t.slice(v[0], 1, 1, 3));
    assert_grad(&[&[4, 5]], 23, |t, v| t.slice(v[0], 0, 2, 2));
    assert_grad(&[&[4, 5]], 24, |t, v| t.mean(v[0], 0));
    assert_grad(&[&[4, 5]], 25, |t, v| t.mean(v[0], 1));
    assert_grad(&[&[2, 3, 4]], 26, |t, v| t.mean(v[0], 2));
    assert_grad(&[&[5, 3]], 27, |t, v| t.embedding(v[0], &[4, 0, 4, 2]));
}

#[test]
fn normalisation_loss_and_conv() {
    assert_grad(&[&[3, 6], &[1, 6], &[1, 6]], 30, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let logits = rand_tensor(&mut rng, &[4, 5]);
    let r = check_inputs(&[logits], |t, v| t.cross_entropy(v[0], &[0, 4, 2, 2])).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
    assert_grad(&[&[2, 5, 6], &[3, 2, 3, 3], &[1, 3]], 32, |t, v| t.conv2d(v[0], v[1], v[2], 1, 1));
    assert_grad(&[&[2, 7, 8], &[3, 2, 3, 3], &[1, 3]], 33, |t, v| t.conv2d(v[0], v[1], v[2], 2, 1));
    assert_grad(&[&[1, 5, 5], &[2, 1, 3, 3], &[1, 2]], 34, |t, v| t.conv2d(v[0], v[1], v[2], 2, 0));
}

#[test]
fn forward_values_by_hand() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[17.0, 39.0]);
    let m = t.mean(a, 0).unwrap();
    assert_eq!(t.value(m).data(), &[2.0, 3.0]);
    let s = t.softmax(a, 1).unwrap();
    let e = 1.0f64.exp();
    assert!((t.value(s).data()[1] - e / (1.0 + e)).abs() < 1e-15);
    let ce = t.cross_entropy(a, &[1, 0]).unwrap();
    let want = ((1.0 + e).ln() - 1.0 + (1.0 + e).ln()) / 2.0;
    assert!((t.value(ce).item() - want).abs() < 1e-12);
    // conv with a 1x1 identity kernel and stride 2 subsamples
    let x = t.constant(Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
    let w = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let bias = t.constant(Tensor::row(vec![0.5]));
    let y = t.conv2d(x, w, bias, 2, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 2, 2]);
    assert_eq!(t.value(y).data(), &[0.5, 2.5, 6.5, 8.5]);
}

#[test]
fn masked_entries_are_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..100 {
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, &[3, 6]).reshaped(&[3, 6]).unwrap());
        let mask: Vec<bool> = (0..18).map(|i| i % 6 == 0 || rng.gen_bool(0.5)).collect();
        let y = t.masked_softmax(x, &mask).unwrap();
        for (p, m) in t.value(y).data().iter().zip(&mask) {
            if !m {
                assert_eq!(*p, 0.0);
            }
        }
        for r in 0..3 {
            let s: f64 = t.value(y).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 3]));
    assert!(t.masked_softmax(x, &[false, false, false]).is_err());
}

#[test]
fn shape_errors_name_the_operation() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul") && err.to_string().contains("[2, 3]"), "{err}");
    let c = t.constant(Tensor::zeros(&[3, 3]));
    assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    assert!(t.concat(&[a, c], 1).unwrap_err().to_string().contains("concat"));
    assert!(t.slice(a, 1, 2, 2).is_err());
    assert!(t.embedding(a, &[2]).is_err());
    assert!(matches!(t.cross_entropy(a, &[0, 3]), Err(TensorError::TargetOutOfRange { target: 3, classes: 3 })));
    assert!(t.cross_entropy(a, &[0]).is_err());
    assert!(t.backward(a).is_err());
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn dropout_identity_in_eval_and_scaled_in_train() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::filled(&[4, 50], 1.0));
    let mut off = Dropout::off();
    assert_eq!(off.apply(&mut t, x).unwrap(), x);
    let mut on = Dropout::new(0.5, true, 9);
    let y = on.apply(&mut t, x).unwrap();
    let vals = t.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(vals.iter().any(|&v| v == 0.0) && vals.iter().any(|&v| v == 2.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row(vec![1.0, 2.0]), ParamGroup::Main).unwrap();
    let mut t = Tape::new();
    let w1 = t.param(&store, id);
    let w2 = t.param(&store, id);
    assert_eq!(w1, w2);
    let p = t.mul(w1, w2).unwrap();
    let s = t.sum(p);
    t.backward(s).unwrap().accumulate(&mut store);
    assert_eq!(store.get(id).grad, vec![2.0, 4.0]);
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
    let layer = TransformerLayer::new(&mut store, "tf", 4, 2, 6, &mut rng).unwrap();
    let xs = rand_tensor(&mut rng, &[3, 3]);
    let mask: Vec<bool> = (0..9).map(|i| i % 3 <= i / 3).collect();
    let r = check_params(&store, 1000, &mut rng, |s| -> Result<_, TensorError> {
        let mut t = Tape::new();
        let x = t.constant(xs.clone());
        let mut st = cell.zero_state(&mut t);
        let mut hs = Vec::new();
        for i in 0..3 {
            let xi = t.row(x, i)?;
            st = cell.forward(&mut t, s, xi, st)?;
            hs.push(st.0);
        }
        let h = t.concat(&hs, 0)?;
        let a = mha.forward(&mut t, s, h, Some(&mask))?;
        let y = layer.forward(&mut t, s, a, None, &mut Dropout::off())?;
        let loss = t.cross_entropy(y, &[0, 3, 1])?;
        Ok((t, loss))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
    assert_eq!(r.checked, store.numel());
}
