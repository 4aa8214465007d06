use impute_tensor::{he_init, Adam, AdamConfig, Graph, ParamStore, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap()).unwrap();
    store.get_mut(id).grad = Some(Tensor::from_f64(&[3], &[0.3, -2.0, 1e-3]).unwrap());
    let mut adam = Adam::new(&store, &[(id, 1e-4)], AdamConfig::default());
    adam.step(&mut store).unwrap();
    let got = store.get(id).value.data().to_vec();
    for (w, sign) in got.iter().zip([1.0, -1.0, 1.0]) {
        let delta = 1.0 - w;
        assert!((delta - 1e-4 * sign).abs() < 1e-9, "delta {delta}");
    }
    assert_eq!(adam.steps(), 1);
}

#[test]
fn zero_gradient_leaves_parameters_but_counts_the_step() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", Tensor::full(&[4], 0.25)).unwrap();
    store.get_mut(id).grad = Some(Tensor::zeros(&[4]));
    let mut adam = Adam::new(&store, &[(id, 1e-4)], AdamConfig::default());
    adam.step(&mut store).unwrap();
    assert_eq!(store.get(id).value.data(), &[0.25; 4]);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn missing_gradient_is_a_usage_error() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", Tensor::zeros(&[1])).unwrap();
    let mut adam = Adam::new(&store, &[(id, 1e-4)], AdamConfig::default());
    assert!(matches!(adam.step(&mut store), Err(TensorError::Usage(_))));
    assert_eq!(adam.steps(), 0);
}

/// Scalar Adam reference written out longhand.
fn scalar_adam(w0: f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = vec![w];
    for t in 1..=steps {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        w -= lr * mh / (vh.sqrt() + eps);
        out.push(w);
    }
    out
}

#[test]
fn adam_descends_a_parabola_like_the_scalar_reference() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
    let mut adam = Adam::new(&store, &[(id, 0.1)], AdamConfig::default());
    let reference = scalar_adam(1.0, 0.1, 2);
    let mut trace = vec![1.0];
    for _ in 0..2 {
        store.zero_grad();
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss, &mut store).unwrap();
        adam.step(&mut store).unwrap();
        trace.push(store.get(id).value.data()[0]);
    }
    assert!(trace[0] > trace[1] && trace[1] > trace[2] && trace[2] > 0.0, "{trace:?}");
    for (a, b) in trace.iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn adam_state_round_trips_through_entries() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", Tensor::full(&[2], 1.0)).unwrap();
    store.get_mut(id).grad = Some(Tensor::full(&[2], 0.5));
    let mut adam = Adam::new(&store, &[(id, 1e-3)], AdamConfig::default());
    adam.step(&mut store).unwrap();
    let entries = adam.state_entries(&store, "opt");
    let names: Vec<_> = entries.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["w/adam_m", "w/adam_v", "opt/adam_t"]);
    let mut restored = Adam::new(&store, &[(id, 1e-3)], AdamConfig::default());
    restored
        .load_state(&store, "opt", |k| entries.iter().find(|(n, _)| n == k).map(|(_, t)| t.clone()))
        .unwrap();
    assert_eq!(restored.steps(), 1);
    assert_eq!(restored.state_entries(&store, "opt"), entries);
}

fn moments(t: &Tensor<f64>) -> (f64, f64) {
    let n = t.numel() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn he_init_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t: Tensor<f64> = he_init(&[100_000], 2, &mut rng).unwrap();
    let (_, std) = moments(&t);
    assert!((std - 1.0).abs() < 0.02, "std {std}");

    let t: Tensor<f64> = he_init(&[100_000], 50, &mut rng).unwrap();
    let (mean, std) = moments(&t);
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((std - 0.2).abs() < 0.2 * 0.02, "std {std}");
}

#[test]
fn he_init_is_seeded() {
    let a: Tensor<f32> = he_init(&[64, 3, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b: Tensor<f32> = he_init(&[64, 3, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert!(he_init::<f32, _>(&[2], 0, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
}
