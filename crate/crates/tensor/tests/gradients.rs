use impute_tensor::gradcheck::{check_gradients, op_cases};
use impute_tensor::{Graph, ParamStore, Tensor, TensorError};

#[test]
fn sum_gradient_is_all_ones() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, id).unwrap();
    let loss = g.sum(x).unwrap();
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let values = [0.5, -1.0, 2.0, 3.25];
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::from_f64(&[4], &values).unwrap()).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, id).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let loss = g.scale(s, 0.5).unwrap();
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &values);
}

#[test]
fn gradients_accumulate_across_backward_passes() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let x = g.param(&store, id).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss, &mut store).unwrap();
    }
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("x", Tensor::zeros(&[2])).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, id).unwrap();
    assert!(matches!(g.backward(x, &mut store), Err(TensorError::Usage(_))));
}

#[test]
fn frozen_parameters_pass_gradient_through_without_accumulating() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("G.a", Tensor::from_f64(&[1], &[2.0]).unwrap()).unwrap();
    let b = store.add("D.b", Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    g.freeze_prefix("D.");
    let va = g.param(&store, a).unwrap();
    let vb = g.param(&store, b).unwrap();
    let prod = g.mul(va, vb).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(a).grad.as_ref().unwrap().data(), &[3.0]);
    assert!(store.get(b).grad.is_none());
}

#[test]
fn every_op_matches_central_differences() {
    for case in op_cases(11) {
        let report = check_gradients(&case.inputs, 1e-4, &case.build).unwrap();
        let err = report.max_relative_error();
        assert!(err < 1e-4, "{}: relative error {err:e}", case.name);
        let norm: f64 = report.analytic.iter().flat_map(|t| t.data()).map(|v| v.abs()).sum();
        assert!(norm > 0.0, "{}: gradient vanished", case.name);
    }
}

#[test]
fn composite_network_matches_central_differences() {
    // conv -> highpass -> adain -> lrelu -> upsample -> pool -> dense -> sigmoid -> bce
    let mut rng_state = 7u64;
    let mut next = || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let mut rand_t = |shape: &[usize], s: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| next() * s).collect()).unwrap()
    };
    let inputs = vec![
        rand_t(&[1, 2, 4, 4], 1.0),
        rand_t(&[3, 2, 3, 3], 0.5),
        rand_t(&[1, 3], 1.0),
        rand_t(&[1, 3], 1.0),
        rand_t(&[1, 3], 0.5),
        rand_t(&[1], 0.1),
    ];
    let report = check_gradients(&inputs, 1e-4, |g, v| {
        let h = g.conv2d(v[0], v[1], None, 1, 1)?;
        let h = g.highpass3x3(h)?;
        let h = g.adain(h, v[2], v[3], 1e-5)?;
        let h = g.leaky_relu(h)?;
        let h = g.upsample2x(h)?;
        let h = g.global_avg_pool(h)?;
        let h = g.dense(h, v[4], v[5])?;
        let p = g.sigmoid(h)?;
        g.bce(p, 1.0)
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-4, "{:?}", report.relative_errors);
}
