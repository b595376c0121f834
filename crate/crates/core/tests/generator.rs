use ndarray::{Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ucapsnet::capsule::{PrimaryCapsDown, RoutingConfig};
use ucapsnet::generator::{DoubleBlockDown, Generator, GeneratorConfig, Variant};
use ucapsnet::nn::{Mode, Parameterized, SlotMut};

fn tiny(variant: Variant) -> GeneratorConfig {
    GeneratorConfig {
        variant,
        input_side: 32,
        base_channels: 2,
        q_bins: 5,
        dropout_p: 0.0,
        seed: 3,
        routing: RoutingConfig {
            n_types_in: 2,
            d_in: 3,
            n_out: 3,
            d_out: 4,
            iterations: 3,
        },
    }
}

fn input(n: usize, side: usize) -> Array4<f64> {
    Array4::from_shape_fn((n, 1, side, side), |(i, _, y, x)| {
        0.5 + 0.4 * ((i * 7 + y * 3) as f64 * 0.37 + x as f64 * 0.21).sin()
    })
}

fn weights(shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(shape, |(a, b, c, d)| ((a * 31 + b * 17 + c * 5 + d) as f64 * 0.73).cos())
}

fn nudge(model: &mut impl Parameterized<f64>, target: &str, flat: usize, delta: f64) {
    model.visit_mut("", &mut |name, slot| {
        if let SlotMut::Param(p) = slot {
            if name == target {
                let v = p.value.as_slice_mut().unwrap();
                v[flat] += delta;
            }
        }
    });
}

fn grads(model: &mut impl Parameterized<f64>) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    model.visit_mut("", &mut |name, slot| {
        if let SlotMut::Param(p) = slot {
            out.push((name.to_string(), p.grad.clone()));
        }
    });
    out
}

fn check_close(analytic: f64, numeric: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    assert!(
        (analytic - numeric).abs() / scale < 1e-3,
        "{what}: analytic {analytic} numeric {numeric}"
    );
}

#[test]
fn reference_configuration_shapes() {
    let mut g = Generator::<f32>::new(GeneratorConfig::default()).unwrap();
    let x = Array4::<f32>::zeros((1, 1, 224, 224));
    let probs = g.forward(&x, Mode::Eval).unwrap();
    assert_eq!(probs.dim(), (1, 313, 56, 56));
    assert!(probs.iter().all(|v| v.is_finite()));
    for y in [0, 17, 55] {
        for xx in [0, 40] {
            let s: f32 = (0..313).map(|k| probs[[0, k, y, xx]]).sum();
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
        }
    }

    let mut g = Generator::<f32>::new(GeneratorConfig {
        variant: Variant::Ab,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let ab = g.forward(&x, Mode::Eval).unwrap();
    assert_eq!(ab.dim(), (1, 2, 56, 56));
    assert!(ab.iter().all(|v| v.is_finite() && v.abs() <= 110.0));
}

#[test]
fn same_seed_same_weights() {
    let cfg = GeneratorConfig {
        base_channels: 8,
        input_side: 64,
        ..GeneratorConfig::default()
    };
    let a = Generator::<f32>::new(cfg).unwrap();
    let b = Generator::<f32>::new(cfg).unwrap();
    let c = Generator::<f32>::new(GeneratorConfig { seed: 1, ..cfg }).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    assert_eq!(a.param_count(), b.param_count());
}

#[test]
fn every_parameter_receives_gradient() {
    for variant in [Variant::Q, Variant::Ab] {
        let mut g = Generator::<f64>::new(tiny(variant)).unwrap();
        let x = input(2, 32);
        let out = g.forward(&x, Mode::Train).unwrap();
        g.backward(&weights(out.dim()));
        for (name, grad) in grads(&mut g) {
            assert!(grad.iter().all(|v| v.is_finite()), "{name} has non-finite gradient");
            assert!(grad.iter().any(|v| *v != 0.0), "{name} received no gradient");
        }
    }
}

#[test]
fn generator_gradients_match_finite_differences() {
    for variant in [Variant::Q, Variant::Ab] {
        let mut g = Generator::<f64>::new(tiny(variant)).unwrap();
        let x = input(2, 32);
        let out = g.forward(&x, Mode::TrainFrozenStats).unwrap();
        let w = weights(out.dim());
        g.backward(&w);
        let analytic = grads(&mut g);
        let h = 1e-6;
        let probes = [
            "pre.stem.conv.weight",
            "dbd1.second.conv.weight",
            "dbd3.first.norm.gamma",
            "caps_down.conv.weight",
            "router.transforms",
            "caps_up.conv.weight",
            "dbu1.first.conv.weight",
            "dbu3.second.norm.beta",
            "head.weight",
            "head.bias",
        ];
        for probe in probes {
            let (_, grad) = analytic
                .iter()
                .find(|(n, _)| n == probe)
                .unwrap_or_else(|| panic!("no parameter named {probe}"));
            let flat = grad.len() / 3;
            let mut loss = |delta: f64| {
                nudge(&mut g, probe, flat, delta);
                let y = g.forward(&x, Mode::TrainFrozenStats).unwrap();
                g.clear_caches();
                nudge(&mut g, probe, flat, -delta);
                (y * &w).sum()
            };
            let numeric = (loss(h) - loss(-h)) / (2.0 * h);
            check_close(grad.as_slice().unwrap()[flat], numeric, probe);
        }
    }
}

#[test]
fn double_block_down_toy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut block = DoubleBlockDown::<f64>::new(4, &mut rng);
    let x = Array4::from_shape_fn((2, 4, 8, 8), |(a, b, c, d)| ((a * 37 + b * 11 + c * 5 + d) as f64 * 0.53).sin());
    let y = block.forward(&x, Mode::TrainFrozenStats).unwrap();
    assert_eq!(y.dim(), (2, 8, 4, 4));
    let w = weights(y.dim());
    let gx = block.backward(&w);
    let h = 1e-6;
    for idx in [[0, 0, 0, 0], [1, 3, 5, 2], [0, 2, 7, 7]] {
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let lp = (block.forward(&xp, Mode::TrainFrozenStats).unwrap() * &w).sum();
        let lm = (block.forward(&xm, Mode::TrainFrozenStats).unwrap() * &w).sum();
        check_close(gx[idx], (lp - lm) / (2.0 * h), "input");
    }
}

#[test]
fn caps_down_gradients_with_coarse_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut caps = PrimaryCapsDown::<f64>::new(6, 2, 4, &mut rng);
    let x = Array4::from_shape_fn((2, 6, 3, 3), |(a, b, c, d)| ((a * 19 + b * 7 + c * 3 + d) as f64 * 0.41).cos());
    let y = caps.forward(&x, Mode::TrainFrozenStats).unwrap();
    let w = ndarray::Array3::from_shape_fn(y.dim(), |(a, b, c)| ((a * 13 + b * 3 + c) as f64 * 0.29).sin());
    let gx = caps.backward(&w, 3);
    let h = 1e-3;
    for idx in [[0, 0, 0, 0], [1, 5, 2, 1], [0, 3, 1, 2]] {
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let lp = (caps.forward(&xp, Mode::TrainFrozenStats).unwrap() * &w).sum();
        let lm = (caps.forward(&xm, Mode::TrainFrozenStats).unwrap() * &w).sum();
        check_close(gx[idx], (lp - lm) / (2.0 * h), "caps input");
    }
}

#[test]
fn eval_is_deterministic_and_train_dropout_varies() {
    let cfg = GeneratorConfig {
        dropout_p: 0.5,
        ..tiny(Variant::Ab)
    };
    let mut g = Generator::<f64>::new(cfg).unwrap();
    let x = input(1, 32);
    let a = g.forward(&x, Mode::Eval).unwrap();
    let b = g.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    let c = g.forward(&x, Mode::TrainFrozenStats).unwrap();
    let d = g.forward(&x, Mode::TrainFrozenStats).unwrap();
    assert_ne!(c, d);
}
