use aqisense::cnn3d::{
    equal_classes, relu, relu_backward, softmax, Architecture, Cnn3dModel, Conv3d, Dense, MaxPool, Tensor4,
    TrainConfig,
};
use aqisense::features::{extract_stack, FeatureConfig};
use aqisense::sim::{base_scene, gen_haze_image, TransmissionMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const H: f64 = 1e-6;

fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    let n = dims.iter().product();
    Tensor4::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        if (analytic - numeric).abs() < 1e-9 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` in coordinate `i` of `v`.
fn central(v: &mut [f64], i: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let keep = v[i];
    v[i] = keep + H;
    let up = f(v);
    v[i] = keep - H;
    let down = f(v);
    v[i] = keep;
    (up - down) / (2.0 * H)
}

fn conv_check(kernel: [usize; 3], cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut conv = Conv3d::zeros(kernel, cin, cout);
    conv.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let x = random_tensor([8, 8, 6, cin], rng);
    let out_dims = conv.output_dims(x.dims()).unwrap();
    let r = random_tensor(out_dims, rng);
    let mut gw = vec![0.0; conv.weights.len()];
    let mut gb = vec![0.0; conv.bias.len()];
    let gx = conv.backward(&x, &r, &mut gw, &mut gb);
    let mut worst: f64 = 0.0;

    let mut xs = x.data().to_vec();
    for i in 0..xs.len() {
        let n = central(&mut xs, i, &mut |v| dot(conv.forward(&Tensor4::new(x.dims(), v.to_vec()).unwrap()).data(), r.data()));
        worst = worst.max(rel_err(gx.data()[i], n));
    }
    let mut ws = conv.weights.clone();
    for i in 0..ws.len() {
        let n = central(&mut ws, i, &mut |v| {
            let mut c = conv.clone();
            c.weights = v.to_vec();
            dot(c.forward(&x).data(), r.data())
        });
        worst = worst.max(rel_err(gw[i], n));
    }
    let mut bs = conv.bias.clone();
    for i in 0..bs.len() {
        let n = central(&mut bs, i, &mut |v| {
            let mut c = conv.clone();
            c.bias = v.to_vec();
            dot(c.forward(&x).data(), r.data())
        });
        worst = worst.max(rel_err(gb[i], n));
    }
    worst
}

fn pool_relu_check(rng: &mut ChaCha8Rng) -> f64 {
    let x = random_tensor([8, 8, 6, 2], rng);
    let mut worst: f64 = 0.0;

    let (out, arg) = MaxPool.forward(&x);
    let r = random_tensor(out.dims(), rng);
    let g = MaxPool.backward(x.dims(), &arg, &r);
    let mut xs = x.data().to_vec();
    for i in 0..xs.len() {
        let n = central(&mut xs, i, &mut |v| dot(MaxPool.forward(&Tensor4::new(x.dims(), v.to_vec()).unwrap()).0.data(), r.data()));
        worst = worst.max(rel_err(g.data()[i], n));
    }

    let r = random_tensor(x.dims(), rng);
    let g = relu_backward(&x, &r);
    for i in 0..xs.len() {
        let n = central(&mut xs, i, &mut |v| dot(relu(&Tensor4::new(x.dims(), v.to_vec()).unwrap()).data(), r.data()));
        worst = worst.max(rel_err(g.data()[i], n));
    }
    worst
}

fn dense_softmax_check(rng: &mut ChaCha8Rng) -> f64 {
    let x = random_tensor([8, 8, 6, 1], rng).data().to_vec();
    let mut dense = Dense::zeros(x.len(), 5);
    dense.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.1..0.1));
    dense.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    let label = 3;
    let loss = |d: &Dense, x: &[f64]| -softmax(&d.forward(x))[label].ln();
    let probs = softmax(&dense.forward(&x));
    let mut g = probs.clone();
    g[label] -= 1.0;
    let mut gw = vec![0.0; dense.weights.len()];
    let mut gb = vec![0.0; dense.bias.len()];
    let gx = dense.backward(&x, &g, &mut gw, &mut gb);
    let mut worst: f64 = 0.0;
    let mut xs = x.clone();
    for i in 0..xs.len() {
        let n = central(&mut xs, i, &mut |v| loss(&dense, v));
        worst = worst.max(rel_err(gx[i], n));
    }
    let mut ws = dense.weights.clone();
    for i in 0..ws.len() {
        let n = central(&mut ws, i, &mut |v| {
            let mut d = dense.clone();
            d.weights = v.to_vec();
            loss(&d, &x)
        });
        worst = worst.max(rel_err(gw[i], n));
    }
    let mut bs = dense.bias.clone();
    for i in 0..bs.len() {
        let n = central(&mut bs, i, &mut |v| {
            let mut d = dense.clone();
            d.bias = v.to_vec();
            loss(&d, &x)
        });
        worst = worst.max(rel_err(gb[i], n));
    }
    worst
}

// the assembled network at its minimum input size
fn model_check(rng: &mut ChaCha8Rng) -> f64 {
    let arch = Architecture {
        c1: 2,
        c2: 2,
        c3: 2,
        classes: equal_classes(4),
        features: FeatureConfig {
            size: 18,
            ..FeatureConfig::default()
        },
    };
    let mut model = Cnn3dModel::init(arch, 5).unwrap();
    let x = random_tensor([18, 18, 6, 1], rng);
    let (_, grad) = model.loss_and_gradient(&x, 2).unwrap();
    let mut params = model.params();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let n = central(&mut params, i, &mut |v| {
            model.set_params(v).unwrap();
            model.loss_and_gradient(&x, 2).unwrap().0
        });
        worst = worst.max(rel_err(grad[i], n));
    }
    worst
}

fn softmax_check(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..20);
        let spread = 10f64.powf(rng.random_range(-2.0..3.0));
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-spread..spread)).collect();
        let p = softmax(&logits);
        assert!(p.iter().all(|&v| v >= 0.0));
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    worst
}

fn toy_training() -> (f64, bool, f64) {
    let start = std::time::Instant::now();
    let size = 24;
    let arch = Architecture {
        features: FeatureConfig {
            size,
            ..FeatureConfig::default()
        },
        ..Architecture::default()
    };
    let mapping = TransmissionMap::default();
    let mut stacks = Vec::new();
    let mut labels = Vec::new();
    for i in 0..20 {
        let class = arch.classes[i % 10];
        let aqi = class.x_min + if i < 10 { 0.3 } else { 0.7 } * class.width();
        let (img, _) = gen_haze_image(&base_scene(size, 900 + i as u64), aqi, &mapping);
        stacks.push(extract_stack(&img, &arch.features).unwrap());
        labels.push(aqi);
    }
    let mut model = Cnn3dModel::init(arch, 11).unwrap();
    let config = TrainConfig {
        epochs: 200,
        seed: 11,
        ..TrainConfig::default()
    };
    model.train(&stacks, &labels, &config).unwrap();
    let correct = stacks
        .iter()
        .zip(&labels)
        .filter(|(s, &aqi)| model.classify_stack(s).unwrap().contains(aqi))
        .count();
    (correct as f64 / 20.0, correct == 20, start.elapsed().as_secs_f64())
}

/// AC3: per-layer gradients, softmax normalisation and the overfit check.
pub fn cnn_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let layers = [
        conv_check([3, 3, 1], 1, 4, &mut rng),
        conv_check([3, 3, 3], 2, 3, &mut rng),
        conv_check([3, 3, 4], 2, 2, &mut rng),
        pool_relu_check(&mut rng),
        dense_softmax_check(&mut rng),
        model_check(&mut rng),
    ];
    let grad = layers.iter().copied().fold(0.0, f64::max);
    let norm = softmax_check(&mut rng);
    let (accuracy, all, secs) = toy_training();
    Outcome::new(
        grad <= 1e-3 && norm <= 1e-9 && all && secs < 300.0,
        format!("max gradient rel. error {grad:.1e}, softmax |sum-1| {norm:.1e}, toy accuracy {accuracy:.2} in {secs:.0} s"),
    )
}
