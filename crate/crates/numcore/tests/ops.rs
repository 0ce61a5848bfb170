use usst_numcore::{check_gradients, GradCheckConfig, Graph, NumError, Tensor};

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let c = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let e2 = g.constant(t2(&[&[0.0], &[1.0]]));
    let c = g.matmul(m, e2).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_rejects_mismatched_inner_extent() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NumError::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = t2(&[&[0.3, -1.2, 0.5], &[0.9, 0.1, -0.4], &[-0.7, 0.8, 0.2]]);
    let b = t2(&[&[1.1, 0.4, -0.3], &[-0.6, 0.2, 0.9], &[0.5, -1.0, 0.7]]);
    let cfg = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-6,
        max_probes_per_input: None,
    };
    let report = check_gradients(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            Ok(g.sum_all(c))
        },
        &[("a".into(), a), ("b".into(), b)],
        &cfg,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![f64::NEG_INFINITY, 0.0]));
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0]);

    let x = g.constant(Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = g.softmax_lastdim(x).unwrap();
    assert!(close(g.value(y).data(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full([3], 1.0));
    let bias = g.constant(Tensor::zeros([3]));
    let x = g.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let gain = g.constant(Tensor::full([2], 1.0));
    let bias = g.constant(Tensor::zeros([2]));
    let x = g.constant(Tensor::vector(vec![1.0, -1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
    assert!(close(g.value(y).data(), &[1.0, -1.0], 1e-12));

    assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full([4], 1.0));
    let bias = g.constant(Tensor::zeros([4]));
    let x = g.constant(t2(&[&[1.0, 2.0, 7.0, -3.0], &[0.1, 0.2, 0.3, 0.5]]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    for row in g.value(y).data().chunks(4) {
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_gradient_on_random_vector() {
    let x = Tensor::vector(vec![0.4, -1.3, 2.2, 0.05]);
    let gain = Tensor::vector(vec![1.2, 0.7, -0.4, 1.0]);
    let bias = Tensor::vector(vec![0.1, 0.0, -0.2, 0.3]);
    let weights = Tensor::vector(vec![0.5, -1.0, 0.25, 2.0]);
    let report = check_gradients(
        move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = g.constant(weights.clone());
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        },
        &[("x".into(), x), ("gain".into(), gain), ("bias".into(), bias)],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn pointwise_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.0]));
    let sp = g.softplus(x);
    assert!((g.value(sp).data()[0] - 0.693147).abs() < 1e-6);
    let th = g.tanh(x);
    assert_eq!(g.value(th).data()[0], 0.0);
    let loss = g.sum_all(sp);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.5]);

    let big = g.constant(Tensor::vector(vec![800.0, -800.0]));
    let sp = g.softplus(big);
    assert!(g.value(sp).is_finite());
    assert_eq!(g.value(sp).data()[0], 800.0);
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let b = g.param(Tensor::vector(vec![3.0]));
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

    let e = g.constant(Tensor::zeros([0]));
    let c2 = g.concat(&[e, b], 0).unwrap();
    assert_eq!(g.value(c2).data(), &[3.0]);

    let loss = g.sum_all(c);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(grads.get(b).unwrap(), &[1.0]);

    let m = g.constant(Tensor::zeros([2, 2]));
    let n = g.constant(Tensor::zeros([3, 3]));
    assert!(g.concat(&[m, n], 1).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.5, -3.0, 2.0]));
    let sq = g.square(x);
    let loss = g.sum_all(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, -6.0, 4.0]);

    let mut g = Graph::new();
    let p = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::scalar(4.0));
    let grads = g.backward(c).unwrap();
    assert_eq!(grads.get(p).unwrap(), &[0.0, 0.0]);
    assert!(grads.get(c).is_none());

    let v = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(NumError::NonScalarLoss(_))));
}

#[test]
fn gradcheck_on_constant_function_passes() {
    let report = check_gradients(
        |g, _| Ok(g.constant(Tensor::scalar(3.0))),
        &[("x".into(), Tensor::vector(vec![1.0, 2.0]))],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.max_rel_err(), 0.0);
}

#[test]
fn gradcheck_on_matmul_chain_passes_and_zero_tolerance_fails() {
    let a = t2(&[&[0.2, -0.5], &[1.0, 0.3]]);
    let b = t2(&[&[0.7, 0.1], &[-0.2, 0.9]]);
    let c = t2(&[&[0.4], &[-1.1]]);
    let f = |g: &mut Graph, v: &[usst_numcore::Var]| {
        let ab = g.matmul(v[0], v[1])?;
        let abc = g.matmul(ab, v[2])?;
        let t = g.tanh(abc);
        Ok(g.sum_all(t))
    };
    let inputs = [("a".to_string(), a), ("b".to_string(), b), ("c".to_string(), c)];
    let mut cfg = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-6,
        max_probes_per_input: None,
    };
    assert!(check_gradients(f, &inputs, &cfg).unwrap().passed());
    cfg.tolerance = 0.0;
    assert!(!check_gradients(f, &inputs, &cfg).unwrap().passed());
    cfg.step = 0.0;
    assert!(check_gradients(f, &inputs, &cfg).is_err());
}

#[test]
fn conv2d_matches_direct_sum() {
    // single 3x3 image, one 2x2 kernel, stride 1, no padding
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
    let k = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.5]));
    let y = g.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[-3.5, -3.5, -3.5, -3.5]);
}

#[test]
fn permute_and_gather_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let xt = g.permute(x, &[1, 0]).unwrap();
    assert_eq!(g.shape(xt), &[3, 2]);
    assert_eq!(g.value(xt).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    let rows = g.gather_rows(x, &[Some(1), None, Some(0)]).unwrap();
    assert_eq!(g.value(rows).data(), &[3.0, 4.0, 5.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    assert!(g.gather_rows(x, &[Some(2)]).is_err());
    assert!(g.permute(x, &[0, 0]).is_err());
}
