use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;

#[test]
fn identity_matmul_and_sigmoid() {
    let mut t = Tape::<f64>::new();
    let eye = t.constant(Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let x = Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
    let xv = t.constant(x.clone());
    let y = t.matmul(eye, xv).unwrap();
    assert_eq!(t.value(y), &x);
    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).data[0], 0.5);
}

#[test]
fn unit_kernel_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 1, 5, 7]);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(xv, w, b, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    assert!(matches!(t.backward(a), Err(NnError::NotScalarLoss { .. })));
}

#[test]
fn simple_gradients() {
    let x = Tensor::from_f64(&[4], &[1., -2., 3., 0.5]);
    let mut t = Tape::<f64>::new();
    let xv = t.input(x.clone());
    let s = t.sum(xv);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(xv).unwrap().data, vec![1.0; 4]);

    let mut t = Tape::<f64>::new();
    let xv = t.input(x.clone());
    let sq = t.mul(xv, xv).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    let want: Vec<f64> = x.data.iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get(xv).unwrap().data, want);
}

#[test]
fn accumulation_is_additive() {
    let x = Tensor::from_f64(&[3], &[0.3, -0.7, 1.1]);
    // sum(3x) + sum(3x) versus sum(6x)
    let mut t = Tape::<f64>::new();
    let xv = t.input(x.clone());
    let a = t.affine(xv, 3.0, 0.0);
    let b = t.affine(xv, 3.0, 0.0);
    let c = t.add(a, b).unwrap();
    let s = t.sum(c);
    let twice = t.backward(s).unwrap().get(xv).unwrap().clone();

    let mut t = Tape::<f64>::new();
    let xv = t.input(x);
    let a = t.affine(xv, 6.0, 0.0);
    let s = t.sum(a);
    let once = t.backward(s).unwrap().get(xv).unwrap().clone();
    assert_eq!(twice, once);
}

#[test]
fn sum_gradcheck_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let r = grad_check(|t, x| Ok(t.sum(x)), &x, EPS, TOL).unwrap();
    assert!(r.passed);
    assert!(r.worst_rel_error < 1e-9, "{}", r.worst_rel_error);
    assert_eq!(r.checked, 15);
}

#[test]
fn three_layer_mlp_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let dims = [6, 8, 5, 1];
    for l in 0..3 {
        store.add(format!("w{l}"), rand_tensor(&mut rng, &[dims[l], dims[l + 1]]));
        store.add(format!("b{l}"), rand_tensor(&mut rng, &[dims[l + 1]]));
    }
    let x = rand_tensor(&mut rng, &[4, 6]);
    let report = grad_check_params(
        |t, p| {
            let mut h = t.constant(x.clone());
            for l in 0..3 {
                h = t.dense(h, p[2 * l], p[2 * l + 1])?;
                h = if l < 2 { t.tanh(h) } else { h };
            }
            t.bce_with_logits(h, &[1.0, 0.0, 1.0, 0.0])
        },
        &store,
        EPS,
        TOL,
        7,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked, store.num_elements());
}

#[test]
fn relu_dense_gradcheck_on_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = rand_tensor(&mut rng, &[5, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let r = grad_check(
        |t, x| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.dense(x, w, b)?;
            let y = t.relu(y);
            let y = t.softmax_rows(y);
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        &x,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn conv_maxpool_gradcheck_with_unique_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    // jittered input so every pooling window has a unique maximum
    let mut x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
    for (i, v) in x.data.iter_mut().enumerate() {
        *v += 1e-3 * i as f64;
    }
    let r = grad_check(
        |t, x| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(x, w, b, 1, 1)?;
            let y = t.maxpool2d(y, 2, 2)?;
            let y = t.tanh(y);
            let y = t.global_maxpool(y)?;
            Ok(t.sum(y))
        },
        &x,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");

    let mut store = ParamStore::<f64>::new();
    store.add("w", w.clone());
    store.add("b", b.clone());
    let r = grad_check_params(
        |t, p| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, p[0], p[1], 2, 1)?;
            let y = t.maxpool2d(y, 2, 1)?;
            Ok(t.mean(y))
        },
        &store,
        EPS,
        TOL,
        1,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn graph_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[5, 4]);
    let edges = Arc::new(vec![(0, 1), (1, 2), (2, 0), (3, 3), (4, 1)]);
    let groups = Arc::new(vec![vec![0, 2], vec![], vec![1, 3, 4]]);
    let rows = Arc::new(vec![vec![(0, 0.5), (3, 0.5)], vec![(4, 1.0)], vec![(1, 0.25), (1, 0.75)]]);
    let idx = Arc::new(vec![2, 0, 2]);
    let r = grad_check(
        |t, x| {
            let m = t.edge_sum(x, edges.clone(), 5)?;
            let m = t.tanh(m);
            let g = t.group_mean(m, groups.clone())?;
            let w = t.weighted_gather(x, rows.clone())?;
            let r = t.gather_rows(x, idx.clone())?;
            let c = t.concat_cols(&[g, w, r])?;
            let c = t.sigmoid(c);
            let s = t.concat_rows(&[c, c])?;
            let s = t.sub(s, s)?;
            let s2 = t.mul(c, c)?;
            let a = t.sum(s);
            let b = t.sum(s2);
            let tot = t.concat_rows(&[a, b])?;
            Ok(t.sum(tot))
        },
        &x,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn maxpool_routes_to_argmax_only() {
    let x = Tensor::from_f64(&[1, 1, 2, 4], &[1., 5., 2., 0., 3., 4., 9., 1.]);
    let mut t = Tape::<f64>::new();
    let xv = t.input(x);
    let y = t.maxpool2d(xv, 2, 2).unwrap();
    assert_eq!(t.value(y).data, vec![5.0, 9.0]);
    let y3 = t.affine(y, 3.0, 0.0);
    let s = t.sum(y3);
    let g = t.backward(s).unwrap();
    let gx = &g.get(xv).unwrap().data;
    assert_eq!(gx, &vec![0., 3., 0., 0., 0., 0., 3., 0.]);
    assert_eq!(gx.iter().sum::<f64>(), 6.0);
}

#[test]
fn sgd_and_adam_first_steps() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(0.0));
    store.get_mut(id).grad = Some(Tensor::scalar(1.0));
    Optimizer::sgd(1.0).step(&mut store).unwrap();
    assert_eq!(store.get(id).value.data[0], -1.0);
    assert!(store.get(id).grad.is_none());

    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::from_f64(&[2], &[0.0, 0.0]));
    store.get_mut(id).grad = Some(Tensor::from_f64(&[2], &[0.3, -2.0]));
    let mut adam = Optimizer::adam(0.01);
    adam.step(&mut store).unwrap();
    // m_hat = g and v_hat = g^2 on the first step, so the move is -lr * g/|g|
    let v = &store.get(id).value.data;
    assert!((v[0] + 0.01).abs() < 1e-9 && (v[1] - 0.01).abs() < 1e-9, "{v:?}");

    let err = adam.step(&mut store).unwrap_err();
    assert_eq!(err, NnError::MissingGrad { name: "p".into() });
}

#[test]
fn identical_copies_stay_identical() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::<f32>::new();
        s.add("w", glorot(&mut rng, &[4, 3], 4, 3));
        s.add("b", Tensor::zeros(&[3]));
        s
    };
    let run = |mut store: ParamStore<f32>| {
        let mut opt = Optimizer::adam(1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut t = Tape::new();
            let p = t.bind(&store);
            let xv = t.constant(Tensor::from_f64(&[2, 4], &x));
            let y = t.dense(xv, p[0], p[1]).unwrap();
            let y = t.tanh(y);
            let l = t.mean(y);
            let g = t.backward(l).unwrap();
            store.accumulate(&p, &g);
            opt.step(&mut store).unwrap();
        }
        store
    };
    let a = run(build());
    let b = run(build());
    assert_eq!(a, b);
}

#[test]
fn frozen_params_are_not_updated() {
    let mut store = ParamStore::<f32>::new();
    store.add("emb.table", Tensor::full(&[2], 1.0));
    store.add("w", Tensor::full(&[2], 1.0));
    store.set_trainable("emb.", false);
    let mut t = Tape::new();
    let p = t.bind(&store);
    let s = t.mul(p[0], p[1]).unwrap();
    let l = t.sum(s);
    let g = t.backward(l).unwrap();
    assert!(g.get(p[0]).is_none());
    store.accumulate(&p, &g);
    Optimizer::sgd(0.5).step(&mut store).unwrap();
    assert_eq!(store.get(0).value.data, vec![1.0, 1.0]);
    assert_eq!(store.get(1).value.data, vec![0.5, 0.5]);
}
