use aqisense::stgraph::{
    cube_grid, AqiBins, Label, LayerInput, LearnConfig, NodeFeatures, SolveConfig, StGraph, NUM_NODE_FEATURES,
};
use aqisense::AqiScale;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::Runs;
use crate::Outcome;

const TIGHT: SolveConfig = SolveConfig {
    tolerance: 1e-14,
    max_sweeps: 1_000_000,
};

/// A random graph of at most `max_nodes` nodes with random features and
/// labels; at least one node is labelled.
fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> StGraph {
    loop {
        let nx = rng.random_range(1..=4);
        let ny = rng.random_range(1..=3);
        let layers = rng.random_range(1..=3);
        if nx * ny * layers > max_nodes || nx * ny * layers < 3 {
            continue;
        }
        if let Some(g) = shaped_graph(rng, nx, ny, layers) {
            return g;
        }
    }
}

/// Random features, labels, radius and θ on an `nx × ny` grid of cubes
/// over `layers` timestamps; `None` if nothing got labelled.
fn shaped_graph(rng: &mut ChaCha8Rng, nx: usize, ny: usize, layers: usize) -> Option<StGraph> {
    let cubes = cube_grid([nx, ny, 1], [20.0, 20.0, 10.0]);
    let mut inputs = Vec::new();
    let mut any = false;
    for l in 0..layers {
        let mut layer = LayerInput::empty(&cubes, l as f64);
        for (c, f) in layer.features.iter_mut().enumerate() {
            *f = NodeFeatures {
                weather: rng.random_range(0..3),
                wind_speed: rng.random_range(0.0..10.0),
                wind_direction: rng.random_range(0.0..360.0),
                humidity: rng.random_range(0.0..100.0),
                temperature: rng.random_range(-5.0..35.0),
                ..NodeFeatures::at_cube(&cubes[c], l as f64)
            };
            if rng.random_bool(0.35) {
                layer.labels[c] = Some(Label::measured(rng.random_range(0.0..500.0)));
                any = true;
            }
        }
        inputs.push(layer);
    }
    if !any {
        return None;
    }
    let radius = rng.random_range(5.0..45.0);
    let mut g = StGraph::build(cubes, inputs, radius, AqiBins::new(10.0).unwrap()).unwrap();
    let (params, _) = g.fit_correlation_params();
    g.set_params(params);
    g.set_theta(std::array::from_fn(|_| rng.random_range(0.3..1.5)));
    Some(g)
}

/// Solves `(D - W_uu) P_u = W_ul P_l` densely from the graph's edge list.
fn dense_oracle(g: &StGraph) -> Vec<Option<Vec<f64>>> {
    let nodes = g.nodes();
    let free: Vec<usize> = (0..nodes.len()).filter(|&i| !nodes[i].fixed).collect();
    let mut slot = vec![usize::MAX; nodes.len()];
    for (k, &i) in free.iter().enumerate() {
        slot[i] = k;
    }
    let bins = nodes[0].dist.len();
    let n = free.len();
    let mut out = vec![None; nodes.len()];
    if n == 0 {
        return out;
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, bins);
    for (e, edge) in g.edges().iter().enumerate() {
        let w = g.weights()[e];
        for (u, v) in [(edge.a, edge.b), (edge.b, edge.a)] {
            if nodes[u].fixed {
                continue;
            }
            a[(slot[u], slot[u])] += w;
            if nodes[v].fixed {
                for x in 0..bins {
                    b[(slot[u], x)] += w * nodes[v].dist[x];
                }
            } else {
                a[(slot[u], slot[v])] -= w;
            }
        }
    }
    let lu = a.lu();
    let cols: Vec<DVector<f64>> = (0..bins).map(|x| lu.solve(&b.column(x).into_owned()).expect("non-singular")).collect();
    for (k, &i) in free.iter().enumerate() {
        out[i] = Some(cols.iter().map(|c| c[k]).collect());
    }
    out
}

/// AC4: fixed point against the dense linear system, PMFs, and the
/// neighbour-average property.
pub fn harmonic_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let mut pmf: f64 = 0.0;
    let mut average: f64 = 0.0;
    for _ in 0..30 {
        let mut g = random_graph(&mut rng, 12);
        g.harmonic_solve(&TIGHT).unwrap();
        let oracle = dense_oracle(&g);
        for (i, node) in g.nodes().iter().enumerate() {
            pmf = pmf.max((node.dist.iter().sum::<f64>() - 1.0).abs());
            if node.dist.iter().any(|&m| m < 0.0) {
                pmf = f64::INFINITY;
            }
            if let Some(expected) = &oracle[i] {
                for (a, b) in node.dist.iter().zip(expected) {
                    worst = worst.max((a - b).abs());
                }
                let mut acc = vec![0.0; node.dist.len()];
                let mut degree = 0.0;
                for &(v, e) in g.neighbors(i) {
                    let w = g.weights()[e];
                    degree += w;
                    for (s, m) in acc.iter_mut().zip(&g.nodes()[v].dist) {
                        *s += w * m;
                    }
                }
                for (s, m) in acc.iter().zip(&node.dist) {
                    average = average.max((s / degree - m).abs());
                }
            }
        }
    }
    Outcome::new(
        worst <= 1e-6 && pmf <= 1e-9 && average <= 1e-6,
        format!("max |iterative - dense| {worst:.1e}, max |sum p - 1| {pmf:.1e}, max harmonic residual {average:.1e}"),
    )
}

fn gradient_check(rng: &mut ChaCha8Rng, nontrivial: &mut usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 20 {
        let (ny, layers) = if done % 2 == 0 { (2, 1) } else { (1, 2) };
        let Some(mut g) = shaped_graph(rng, 5, ny, layers) else {
            continue;
        };
        if rng.random_bool(0.5) {
            let last = g.num_layers() - 1;
            let scales: Vec<Option<AqiScale>> = (0..g.cubes().len())
                .map(|_| {
                    let lo = rng.random_range(0.0..300.0);
                    Some(AqiScale::new(lo, lo + rng.random_range(50.0..200.0)).unwrap())
                })
                .collect();
            g.set_layer_scales(last, &scales).unwrap();
        }
        g.harmonic_solve(&TIGHT).unwrap();
        let frozen = g.distributions();
        let analytic = g.entropy_gradient();
        let theta = g.theta;
        for m in 0..NUM_NODE_FEATURES {
            let h = 1e-6;
            let mut up = theta;
            up[m] += h;
            let mut down = theta;
            down[m] -= h;
            let numeric = (g.restricted_entropy(&up, &frozen) - g.restricted_entropy(&down, &frozen)) / (2.0 * h);
            // central differences carry ~1e-10 of roundoff; below 1e-5 the
            // comparison is absolute
            let scale = analytic[m].abs().max(numeric.abs());
            worst = worst.max((analytic[m] - numeric).abs() / scale.max(1e-5));
            if scale > 1e-5 {
                *nontrivial += 1;
            }
        }
        done += 1;
    }
    worst
}

fn monotone_traces(rng: &mut ChaCha8Rng) -> (bool, usize) {
    let mut steps = 0;
    for _ in 0..20 {
        let mut g = random_graph(rng, 12);
        let report = g
            .learn_theta(
                &LearnConfig {
                    max_iters: 30,
                    ..LearnConfig::default()
                },
                &SolveConfig {
                    tolerance: 1e-10,
                    max_sweeps: 100_000,
                },
            )
            .unwrap();
        steps += report.entropy.len() - 1;
        if report.entropy.windows(2).any(|w| w[1] > w[0]) {
            return (false, steps);
        }
    }
    (true, steps)
}

const HUMIDITY: usize = 7;
const TEMPERATURE: usize = 8;

/// One seed of the two-feature experiment: humidity predicts AQI,
/// temperature is noise. Returns held-out RMSE at θ = 1 and after learning,
/// plus the learned per-feature weightings θ²·mean(Q).
pub fn two_feature_seed(seed: u64) -> (f64, f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 80;
    let cubes = cube_grid([n, 1, 1], [20.0, 20.0, 10.0]);
    let mut layer = LayerInput::empty(&cubes, 0.0);
    let mut truth = Vec::with_capacity(n);
    for (c, f) in layer.features.iter_mut().enumerate() {
        let humidity = rng.random_range(0.0..100.0);
        *f = NodeFeatures {
            humidity,
            temperature: rng.random_range(0.0..30.0),
            ..NodeFeatures::at_cube(&cubes[c], 0.0)
        };
        truth.push(30.0 + 2.5 * humidity + rng.random_range(-5.0..5.0));
    }
    let labelled: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    for c in 0..n {
        if labelled[c] {
            layer.labels[c] = Some(Label::measured(truth[c]));
        }
    }
    // radius below the cube spacing: only feature-similarity edges
    let mut g = StGraph::build(cubes, vec![layer], 1.0, AqiBins::new(10.0).unwrap()).unwrap();
    let (params, _) = g.fit_correlation_params();
    g.set_params(params);
    let mut theta = [0.0; NUM_NODE_FEATURES];
    theta[HUMIDITY] = 1.0;
    theta[TEMPERATURE] = 1.0;
    g.set_theta(theta);
    let rmse = |g: &StGraph| {
        let est = g.layer_labels(0);
        let held: Vec<f64> = (0..n).filter(|&c| !labelled[c]).map(|c| (est[c] - truth[c]).powi(2)).collect();
        (held.iter().sum::<f64>() / held.len() as f64).sqrt()
    };
    g.harmonic_solve(&TIGHT).unwrap();
    let base = rmse(&g);
    let mut trainable = [false; NUM_NODE_FEATURES];
    trainable[HUMIDITY] = true;
    trainable[TEMPERATURE] = true;
    g.learn_theta(
        &LearnConfig {
            max_iters: 50,
            trainable,
            ..LearnConfig::default()
        },
        &TIGHT,
    )
    .unwrap();
    let learned = rmse(&g);
    let mut q = [0.0; 2];
    for e in 0..g.edges().len() {
        let d = g.edge_excess_q(e);
        q[0] += d[HUMIDITY];
        q[1] += d[TEMPERATURE];
    }
    let m = g.edges().len() as f64;
    (
        base,
        learned,
        g.theta[HUMIDITY].powi(2) * q[0] / m,
        g.theta[TEMPERATURE].powi(2) * q[1] / m,
    )
}

pub fn two_feature_report(seeds: std::ops::Range<u64>) -> Vec<(f64, f64, f64, f64)> {
    seeds.map(two_feature_seed).collect()
}

/// AC5: analytic gradient, monotone traces, and the two-feature experiment.
pub fn entropy_learning(runs: &Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut nontrivial = 0;
    let grad = gradient_check(&mut rng, &mut nontrivial);
    let (monotone, steps) = monotone_traces(&mut rng);
    let results = two_feature_report(0..20);
    runs.record("two-feature experiment", format!("{results:?}"), || format!("{:?}", two_feature_report(0..20)));
    let base: f64 = results.iter().map(|r| r.0).sum::<f64>() / 20.0;
    let learned: f64 = results.iter().map(|r| r.1).sum::<f64>() / 20.0;
    let favoured = results.iter().filter(|r| r.2 > r.3).count();
    let gain = 1.0 - learned / base;
    Outcome::new(
        grad <= 1e-4 && monotone && gain >= 0.10,
        format!(
            "max gradient rel. error {grad:.1e} ({nontrivial}/180 components non-zero), {steps} accepted steps monotone: {monotone}, held-out RMSE {base:.2} -> {learned:.2} ({:.0}% lower, predictive feature favoured in {favoured}/20)",
            100.0 * gain
        ),
    )
}
