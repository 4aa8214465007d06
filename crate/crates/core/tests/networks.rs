use impute_core::networks::{ArchConfig, Content, Model, MODULE_PREFIXES};
use impute_core::DomainLabel;
use impute_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny(size: usize, levels: usize) -> ArchConfig {
    ArchConfig {
        size,
        levels,
        base_ch: 4,
        content_ch: 8,
        style_dim: 6,
        noise_dim: 5,
        map_width: 12,
        domain_emb: 3,
        dsc_blocks: 2,
    }
}

fn random_image(size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (0.5 + 0.2 * z).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(&[1, 1, size, size], data).unwrap()
}

fn random_rows(n: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, dim], (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn l1(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum()
}

fn encode3(model: &Model<f64>, g: &mut Graph<f64>, seed: u64) -> Vec<Content> {
    (0..3)
        .map(|k| {
            let x = g.constant(random_image(model.arch().size, seed + k)).unwrap();
            model.content_encode(g, x).unwrap()
        })
        .collect()
}

#[test]
fn style_codes_have_length_s_and_depend_on_domain() {
    let model = Model::<f64>::new(tiny(32, 2), 1).unwrap();
    let mut g = Graph::no_grad();
    let x = g.constant(random_image(32, 3)).unwrap();
    let a = model.style_encode(&mut g, x, DomainLabel::T1).unwrap();
    let b = model.style_encode(&mut g, x, DomainLabel::T2).unwrap();
    let again = model.style_encode(&mut g, x, DomainLabel::T1).unwrap();
    assert_eq!(g.shape(a), [1, 6]);
    assert!(l1(g.value(a), g.value(b)) > 0.0);
    assert_eq!(g.value(a), g.value(again));
}

#[test]
fn mapping_network_separates_noise_draws() {
    let model = Model::<f64>::new(tiny(32, 2), 2).unwrap();
    let mut g = Graph::no_grad();
    let z1 = g.constant(random_rows(1, 5, 10)).unwrap();
    let z2 = g.constant(random_rows(1, 5, 11)).unwrap();
    let a = model.map_noise(&mut g, z1, DomainLabel::Flair).unwrap();
    let b = model.map_noise(&mut g, z2, DomainLabel::Flair).unwrap();
    let again = model.map_noise(&mut g, z1, DomainLabel::Flair).unwrap();
    assert_eq!(g.shape(a), [1, 6]);
    assert!(l1(g.value(a), g.value(b)) > 0.0);
    assert_eq!(g.value(a), g.value(again));
    let wrong = g.constant(random_rows(1, 4, 0)).unwrap();
    assert!(model.map_noise(&mut g, wrong, DomainLabel::T1).is_err());
}

#[test]
fn content_is_downsampled_and_normalized() {
    let arch = tiny(32, 3);
    let model = Model::<f64>::new(arch, 3).unwrap();
    let mut g = Graph::no_grad();
    let x = g.constant(random_image(32, 4)).unwrap();
    let (c, pre) = model.content_encode_detailed(&mut g, x).unwrap();
    assert_eq!(g.shape(c.map), [1, 8, 4, 4]);
    assert_eq!(c.skips.len(), 3);
    assert_eq!(g.shape(c.skips[0]), [1, 4, 32, 32]);
    assert_eq!(g.shape(c.skips[2]), [1, 8, 8, 8]);
    for plane in g.value(pre).data().chunks(16) {
        let mean = plane.iter().sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-4, "plane mean {mean}");
    }
}

#[test]
fn decoder_outputs_images_that_depend_on_style() {
    let model = Model::<f64>::new(tiny(32, 2), 4).unwrap();
    let mut g = Graph::no_grad();
    let x = g.constant(random_image(32, 5)).unwrap();
    let c = model.content_encode(&mut g, x).unwrap();
    let s1 = g.constant(random_rows(1, 6, 1)).unwrap();
    let s2 = g.constant(random_rows(1, 6, 2)).unwrap();
    let a = model.decode(&mut g, &c, s1).unwrap();
    let b = model.decode(&mut g, &c, s2).unwrap();
    assert_eq!(g.shape(a), [1, 1, 32, 32]);
    assert!(g.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(l1(g.value(a), g.value(b)) > 0.0);
    let bad = g.constant(random_rows(1, 7, 0)).unwrap();
    assert!(model.decode(&mut g, &c, bad).is_err());
}

#[test]
fn combined_content_decodes_to_image_shape() {
    for (size, levels) in [(32, 1), (32, 2), (64, 1), (64, 2), (64, 3)] {
        let model = Model::<f64>::new(tiny(size, levels), 5).unwrap();
        let mut g = Graph::no_grad();
        let cs = encode3(&model, &mut g, 20);
        let cc = model.combine(&mut g, [&cs[0], &cs[1], &cs[2]]).unwrap();
        assert_eq!(g.shape(cc.map), g.shape(cs[0].map));
        assert_eq!(cc.skips.len(), levels);
        let s = g.constant(random_rows(1, 6, 3)).unwrap();
        let out = model.decode(&mut g, &cc, s).unwrap();
        assert_eq!(g.shape(out), [1, 1, size, size], "size {size} levels {levels}");
    }
}

#[test]
fn combiner_is_order_sensitive_and_handles_identical_inputs() {
    let model = Model::<f64>::new(tiny(32, 2), 6).unwrap();
    let mut g = Graph::no_grad();
    let cs = encode3(&model, &mut g, 30);
    let a = model.combine(&mut g, [&cs[0], &cs[1], &cs[2]]).unwrap();
    let b = model.combine(&mut g, [&cs[2], &cs[0], &cs[1]]).unwrap();
    assert!(l1(g.value(a.map), g.value(b.map)) > 0.0);
    let same = model.combine(&mut g, [&cs[0], &cs[0], &cs[0]]).unwrap();
    assert!(g.value(same.map).is_finite());
    // Averaging identical skips returns them unchanged.
    assert!(l1(g.value(same.skips[0]), g.value(cs[0].skips[0])) < 1e-12);
}

#[test]
fn separator_conditions_on_domain() {
    let model = Model::<f64>::new(tiny(32, 2), 7).unwrap();
    let mut g = Graph::no_grad();
    let x = g.constant(random_image(32, 8)).unwrap();
    let c = model.content_encode(&mut g, x).unwrap();
    let a = model.separate(&mut g, &c, DomainLabel::T1).unwrap();
    let b = model.separate(&mut g, &c, DomainLabel::T1c).unwrap();
    let again = model.separate(&mut g, &c, DomainLabel::T1).unwrap();
    assert_eq!(g.shape(a.map), g.shape(c.map));
    assert!(l1(g.value(a.map), g.value(b.map)) > 0.0);
    assert_eq!(g.value(a.map), g.value(again.map));
    assert_eq!(a.skips, c.skips);
}

#[test]
fn discriminator_outputs_probabilities_per_sample() {
    let model = Model::<f64>::new(tiny(32, 2), 8).unwrap();
    let mut g = Graph::no_grad();
    let mut data = random_image(32, 1).into_data();
    data.extend(random_image(32, 2).into_data());
    data.extend(random_image(32, 3).into_data());
    let x = g.constant(Tensor::new(&[3, 1, 32, 32], data).unwrap()).unwrap();
    let p = model.discriminate(&mut g, x, DomainLabel::T2).unwrap();
    assert_eq!(g.shape(p), [3, 1]);
    assert!(g.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn discriminator_gradient_reaches_the_input() {
    let model = Model::<f64>::new(tiny(16, 2), 9).unwrap();
    let img = random_image(16, 4);
    let prob = |x: Tensor<f64>| {
        let mut g = Graph::no_grad();
        let x = g.constant(x).unwrap();
        let p = model.discriminate(&mut g, x, DomainLabel::T1).unwrap();
        g.item(p)
    };
    let mut g = Graph::new();
    let x = g.variable(img.clone()).unwrap();
    let p = model.discriminate(&mut g, x, DomainLabel::T1).unwrap();
    let loss = g.sum(p).unwrap();
    let grad = g.grad_of(loss, &[x]).unwrap().remove(0);
    assert!(grad.data().iter().any(|&v| v != 0.0));
    let h = 1e-5;
    let k = 7 * 16 + 9;
    let (mut up, mut down) = (img.clone(), img);
    up.data_mut()[k] += h;
    down.data_mut()[k] -= h;
    let numeric = (prob(up) - prob(down)) / (2.0 * h);
    assert!((numeric - grad.data()[k]).abs() <= 1e-6 * (1.0 + numeric.abs()), "{numeric} vs {}", grad.data()[k]);
}

#[test]
fn decoder_jacobian_wrt_style_is_nonzero_and_matches_differences() {
    let model = Model::<f64>::new(tiny(16, 2), 10).unwrap();
    let img = random_image(16, 5);
    let s0 = random_rows(1, 6, 6);
    let weights = random_image(16, 99);
    let objective = |g: &mut Graph<f64>, s: Var| {
        let x = g.constant(img.clone()).unwrap();
        let c = model.content_encode(g, x).unwrap();
        let out = model.decode(g, &c, s).unwrap();
        let w = g.constant(weights.clone()).unwrap();
        let weighted = g.mul(out, w).unwrap();
        g.sum(weighted).unwrap()
    };
    let mut g = Graph::new();
    let s = g.variable(s0.clone()).unwrap();
    let loss = objective(&mut g, s);
    let grad = g.grad_of(loss, &[s]).unwrap().remove(0);
    assert!(grad.data().iter().map(|v| v.abs()).sum::<f64>() > 0.0);
    let h = 1e-5;
    for k in 0..6 {
        let eval = |delta: f64| {
            let mut t = s0.clone();
            t.data_mut()[k] += delta;
            let mut g = Graph::no_grad();
            let s = g.constant(t).unwrap();
            let l = objective(&mut g, s);
            g.item(l)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((numeric - grad.data()[k]).abs() <= 1e-5 * (1.0 + numeric.abs()), "dim {k}");
    }
}

#[test]
fn zeroing_a_domain_head_only_affects_that_domain() {
    let mut model = Model::<f64>::new(tiny(32, 2), 11).unwrap();
    let outputs = |m: &Model<f64>| {
        let mut g = Graph::no_grad();
        let x = g.constant(random_image(32, 12)).unwrap();
        let z = g.constant(random_rows(1, 5, 13)).unwrap();
        DomainLabel::ALL
            .iter()
            .map(|&d| {
                let s = m.style_encode(&mut g, x, d).unwrap();
                let mz = m.map_noise(&mut g, z, d).unwrap();
                let p = m.discriminate(&mut g, x, d).unwrap();
                (g.value(s).clone(), g.value(mz).clone(), g.value(p).clone())
            })
            .collect::<Vec<_>>()
    };
    let before = outputs(&model);
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| ["SE.head2.", "M.head2.", "Dsc.head2."].iter().any(|h| p.name.starts_with(h)))
        .map(|(id, _)| id)
        .collect();
    assert_eq!(ids.len(), 6);
    for id in ids {
        model.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let after = outputs(&model);
    for d in DomainLabel::ALL {
        let (b, a) = (&before[d.index()], &after[d.index()]);
        if d == DomainLabel::T2 {
            assert!(l1(&b.0, &a.0) > 0.0 && l1(&b.1, &a.1) > 0.0 && l1(&b.2, &a.2) > 0.0);
        } else {
            assert_eq!(b, a, "{d} changed");
        }
    }
}

/// Closed-form parameter count, written out independently of the model code.
fn expected_params(a: &ArchConfig) -> usize {
    let l = a.levels;
    let f: Vec<usize> = (0..=l)
        .map(|i| if i == l { a.content_ch } else { (a.base_ch * 2usize.pow(i as u32)).min(a.content_ch) })
        .collect();
    let (c, s, z, w, e) = (a.content_ch, a.style_dim, a.noise_dim, a.map_width, a.domain_emb);
    let conv = |cin: usize, cout: usize| 9 * cin * cout;
    let dense = |din: usize, dout: usize| din * dout + dout;

    let se = conv(1, f[0]) + f[0] + (0..l).map(|i| conv(f[i], f[i + 1]) + f[i + 1]).sum::<usize>() + 4 * dense(c, s);
    let m = dense(z, w) + 3 * dense(w, w) + 4 * dense(w, s);
    let ce = conv(1, f[0]) + (0..l).map(|i| conv(f[i], f[i + 1])).sum::<usize>();
    let dec = (0..l)
        .map(|j| conv(f[l - j], f[l - j - 1]) + 2 * dense(s, f[l - j - 1]))
        .sum::<usize>()
        + conv(f[0], 1)
        + 1;
    let comb = conv(3 * c, c) + conv(c, c);
    let sep = 4 * e + conv(c + e, c) + conv(c, c) + 4 * dense(e, c);
    let mut dsc = 0;
    let mut cin = 1;
    let mut side = a.size;
    for i in 0..a.dsc_blocks {
        let cout = (a.base_ch * 2usize.pow(i as u32)).min(c);
        dsc += conv(cin, cout) + cout;
        cin = cout;
        side = side.div_ceil(2);
    }
    dsc += 4 * dense(cin * side * side, 1);
    se + m + ce + dec + comb + sep + dsc
}

#[test]
fn parameter_count_matches_closed_form() {
    for arch in [ArchConfig::default(), tiny(32, 2), tiny(16, 2), tiny(64, 3)] {
        let model = Model::<f32>::new(arch.clone(), 0).unwrap();
        assert_eq!(model.store.num_elements(), expected_params(&arch), "{arch:?}");
    }
}

#[test]
fn parameter_names_carry_module_prefixes() {
    let model = Model::<f32>::new(tiny(32, 2), 0).unwrap();
    for (_, p) in model.store.iter() {
        assert!(MODULE_PREFIXES.iter().any(|m| p.name.starts_with(m)), "{}", p.name);
    }
    for m in MODULE_PREFIXES {
        assert!(!model.param_ids(&[m]).is_empty(), "{m} has no parameters");
    }
    assert!(model.store.by_name("CE.block0.conv.weight").is_some());
}

#[test]
fn initialization_is_seeded() {
    let a = Model::<f32>::new(tiny(32, 2), 3).unwrap();
    let b = Model::<f32>::new(tiny(32, 2), 3).unwrap();
    let c = Model::<f32>::new(tiny(32, 2), 4).unwrap();
    assert_eq!(a.param_entries(), b.param_entries());
    assert_ne!(a.param_entries(), c.param_entries());
}
