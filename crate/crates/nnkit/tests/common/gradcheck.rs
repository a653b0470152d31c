//! Central finite-difference oracle for analytic gradients.
//!
//! The loss is `L = sum_i c_i * out_i` for a fixed random vector `c`, so
//! `dL/d out = c`. Every parameter and input coordinate is perturbed by
//! `+-h` and the numeric derivative compared to the analytic one.

#![allow(dead_code)]

use nnkit::{LayerSpec, Mode, Network, RandomStream, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PERTURBATION: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

/// Relative error with both-near-zero coordinates treated as agreeing.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn scalar_loss(net: &Network<f64>, input: &Tensor<f64>, c: &[f64], stream: Option<RandomStream>) -> f64 {
    let (out, _) = net.forward(input, stream).expect("forward");
    out.data().iter().zip(c).map(|(o, c)| o * c).sum()
}

/// Maximum per-coordinate relative error over all parameters and inputs.
pub fn max_gradient_error(net: &Network<f64>, input: &Tensor<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let stream = Some(RandomStream::new(seed));
    let n_out: usize = net.output_shape().iter().product();
    let c: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (_, cache) = net.forward(input, stream).expect("forward");
    let upstream = Tensor::new(net.output_shape().to_vec(), c.clone()).unwrap();
    let grads = net.backward(&cache, &upstream, 0.0).expect("backward");

    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for layer in 0..net.layers().len() {
        let Some(g) = grads.layers[layer].clone() else { continue };
        for (which, analytic) in [(0, g.weight.data().to_vec()), (1, g.bias.data().to_vec())] {
            for (k, &a) in analytic.iter().enumerate() {
                let mut eval = |delta: f64| {
                    let p = probe.params_mut()[layer].as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[k] += delta;
                    let l = scalar_loss(&probe, input, &c, stream);
                    let p = probe.params_mut()[layer].as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[k] -= delta;
                    l
                };
                let numeric = (eval(PERTURBATION) - eval(-PERTURBATION)) / (2.0 * PERTURBATION);
                worst = worst.max(relative_error(a, numeric));
            }
        }
    }
    for k in 0..input.len() {
        let mut x = input.clone();
        x.data_mut()[k] += PERTURBATION;
        let plus = scalar_loss(net, &x, &c, stream);
        x.data_mut()[k] -= 2.0 * PERTURBATION;
        let minus = scalar_loss(net, &x, &c, stream);
        let numeric = (plus - minus) / (2.0 * PERTURBATION);
        worst = worst.max(relative_error(grads.input.data()[k], numeric));
    }
    worst
}

/// True when no ReLU input or max-pool candidate lies within `margin` of a
/// kink, so finite differences of width `PERTURBATION` stay on one branch.
pub fn away_from_kinks(net: &Network<f64>, input: &Tensor<f64>, margin: f64) -> bool {
    let stream = Some(RandomStream::new(0));
    let cache = net.forward_prefix(input, net.layers().len(), stream).unwrap();
    for (i, spec) in net.layers().iter().enumerate() {
        let x = if i == 0 { cache.input() } else { cache.layer_output(i - 1).unwrap() };
        match spec {
            LayerSpec::Relu => {
                if x.data().iter().any(|v| v.abs() < margin) {
                    return false;
                }
            }
            LayerSpec::MaxPool2d => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                for ch in 0..c {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let mut v: Vec<f64> = (0..4)
                                .map(|j| x.data()[ch * h * w + (2 * oy + j / 2) * w + 2 * ox + j % 2])
                                .collect();
                            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                            if v[0] - v[1] < margin {
                                return false;
                            }
                        }
                    }
                }
            }
            LayerSpec::GlobalMaxPerMap => {
                let c = x.shape()[0];
                let plane = x.len() / c;
                for ch in 0..c {
                    let mut v = x.data()[ch * plane..(ch + 1) * plane].to_vec();
                    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if v.len() > 1 && v[0] - v[1] < margin {
                        return false;
                    }
                }
            }
            _ => {}
        }
    }
    true
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A random single-layer case for `variant`, with parameters and bias perturbed away from zero.
pub fn random_case(variant: &str, case: u64) -> (Network<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(case * 7919 + variant.len() as u64);
    let (layers, shape): (Vec<LayerSpec>, Vec<usize>) = match variant {
        "dense" => {
            let (i, o) = (rng.random_range(1..7), rng.random_range(1..7));
            (vec![LayerSpec::Dense { in_units: i, out_units: o }], vec![i])
        }
        "conv2d" => {
            let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
            let (h, w) = (rng.random_range(2..7), rng.random_range(2..7));
            (vec![LayerSpec::Conv2d { in_channels: ci, out_channels: co }], vec![ci, h, w])
        }
        "relu" => (vec![LayerSpec::Relu], vec![rng.random_range(1..12)]),
        "sigmoid" => (vec![LayerSpec::Sigmoid], vec![rng.random_range(1..12)]),
        "dropout" => (vec![LayerSpec::Dropout { rate: 0.3 }], vec![rng.random_range(1..12)]),
        "maxpool2d" => (
            vec![LayerSpec::MaxPool2d],
            vec![rng.random_range(1..4), rng.random_range(2..7), rng.random_range(2..7)],
        ),
        "global_max" => (
            vec![LayerSpec::GlobalMaxPerMap],
            vec![rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6)],
        ),
        "flatten" => (
            vec![LayerSpec::Flatten],
            vec![rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)],
        ),
        "composite" => {
            let c = rng.random_range(1..3);
            let f = rng.random_range(1..4);
            (
                vec![
                    LayerSpec::Conv2d { in_channels: c, out_channels: f },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { in_units: f * 4, out_units: 3 },
                    LayerSpec::Relu,
                    LayerSpec::Dropout { rate: 0.3 },
                    LayerSpec::Dense { in_units: 3, out_units: 1 },
                    LayerSpec::Sigmoid,
                ],
                vec![c, 4, 4],
            )
        }
        other => panic!("unknown variant {other}"),
    };
    let mut net = Network::<f64>::new(layers, &shape, case).unwrap();
    for p in net.params_mut().iter_mut().flatten() {
        for b in p.bias.data_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    net.set_mode(Mode::Train);
    let input = random_tensor(&mut rng, &shape);
    (net, input)
}

pub const VARIANTS: &[&str] = &[
    "dense", "conv2d", "relu", "sigmoid", "dropout", "maxpool2d", "global_max", "flatten", "composite",
];

/// Runs `cases` kink-free random cases of `variant`; returns the worst error seen.
pub fn check_variant(variant: &str, cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempt = 0u64;
    while done < cases {
        attempt += 1;
        assert!(attempt < 50 * cases as u64, "could not draw kink-free cases for {variant}");
        let (net, input) = random_case(variant, attempt);
        if !away_from_kinks(&net, &input, 1e-2) {
            continue;
        }
        worst = worst.max(max_gradient_error(&net, &input, attempt));
        done += 1;
    }
    worst
}
