use impute_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn plane_stats(data: &[f32], plane: usize) -> Vec<(f64, f64)> {
    data.chunks_exact(plane)
        .map(|p| {
            let m = p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / plane as f64;
            (m, var)
        })
        .collect()
}

fn is_constant(p: &[f32]) -> bool {
    p.iter().all(|&v| v == p[0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instance_norm_planes_are_standardized(
        data in prop::collection::vec(-50.0f32..50.0, 2 * 16 * 16),
    ) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, 2, 16, 16], data.clone()).unwrap()).unwrap();
        let y = g.instance_norm(x, 1e-5).unwrap();
        for (stats, p) in plane_stats(g.value(y).data(), 256).iter().zip(data.chunks_exact(256)) {
            prop_assume!(!is_constant(p));
            prop_assert!(stats.0.abs() < 1e-5, "mean {}", stats.0);
            prop_assert!((stats.1 - 1.0).abs() < 1e-3, "var {}", stats.1);
        }
    }

    #[test]
    fn instance_norm_is_idempotent(data in prop::collection::vec(-3.0f64..3.0, 64)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 8, 8], data).unwrap()).unwrap();
        let once = g.instance_norm(x, 1e-5).unwrap();
        let twice = g.instance_norm(once, 1e-5).unwrap();
        for (a, b) in g.value(once).data().iter().zip(g.value(twice).data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_planes_take_style_statistics(
        data in prop::collection::vec(-5.0f32..5.0, 16 * 16),
        gamma in -3.0f32..3.0,
        beta in -3.0f32..3.0,
    ) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, 1, 16, 16], data).unwrap()).unwrap();
        let gm = g.constant(Tensor::full(&[1, 1], gamma)).unwrap();
        let bt = g.constant(Tensor::full(&[1, 1], beta)).unwrap();
        let y = g.adain(x, gm, bt, 1e-5).unwrap();
        let (m, var) = plane_stats(g.value(y).data(), 256)[0];
        prop_assert!((m - beta as f64).abs() < 1e-5 * (1.0 + gamma.abs() as f64));
        let target = (gamma as f64).powi(2);
        prop_assert!((var - target).abs() < 1e-3 * target.max(1.0));
    }
}

#[test]
fn adain_statistical_check_on_32x32_planes() {
    let mut state = 99u32;
    let data: Vec<f32> = (0..4 * 32 * 32)
        .map(|_| {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            (state >> 8) as f32 / (1u32 << 24) as f32 * 6.0 - 3.0
        })
        .collect();
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[2, 2, 32, 32], data).unwrap()).unwrap();
    let gamma = g.constant(Tensor::full(&[2, 2], 2.0)).unwrap();
    let beta = g.constant(Tensor::full(&[2, 2], -1.0)).unwrap();
    let y = g.adain(x, gamma, beta, 1e-5).unwrap();
    for (m, var) in plane_stats(g.value(y).data(), 1024) {
        let std = var.sqrt();
        assert!((1.99..=2.01).contains(&std), "std {std}");
        assert!((-1.001..=-0.999).contains(&m), "mean {m}");
    }
}
