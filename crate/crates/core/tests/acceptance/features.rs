use aqisense::features::{
    chroma, dark_channel, hue_disparity, max_local_contrast, max_local_saturation, min_local_color_attenuation,
    raw_features, refined_dark_channel, ColorAttenuationParams, FeatureConfig, GuidedFilterSpec, PatchSpec,
};
use aqisense::imaging::{AtmosphericLight, GrayMap, HazeImage};
use aqisense::sim::{base_scene, haze_with_transmission};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

type Img = Vec<Vec<[f64; 3]>>;

fn to_rows(img: &HazeImage) -> Img {
    (0..img.height()).map(|y| (0..img.width()).map(|x| img.pixel(x, y)).collect()).collect()
}

fn window(x: usize, y: usize, r: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
    (y0..=y1).flat_map(move |yy| (x0..=x1).map(move |xx| (xx, yy)))
}

fn patch_reduce(values: &[Vec<f64>], side: usize, max: bool) -> Vec<Vec<f64>> {
    let (h, w) = (values.len(), values[0].len());
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let it = window(x, y, side / 2, w, h).map(|(xx, yy)| values[yy][xx]);
                    if max {
                        it.fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        it.fold(f64::INFINITY, f64::min)
                    }
                })
                .collect()
        })
        .collect()
}

fn per_pixel(img: &Img, f: impl Fn([f64; 3]) -> f64) -> Vec<Vec<f64>> {
    img.iter().map(|row| row.iter().map(|&p| f(p)).collect()).collect()
}

fn oracle_dark(img: &Img, light: [f64; 3], side: usize) -> Vec<Vec<f64>> {
    let m = per_pixel(img, |p| {
        let mut v = f64::INFINITY;
        for c in 0..3 {
            v = v.min(p[c] / light[c]);
        }
        v
    });
    patch_reduce(&m, side, false)
}

fn window_mean(v: &[Vec<f64>], x: usize, y: usize, r: usize) -> f64 {
    let (h, w) = (v.len(), v[0].len());
    let cells: Vec<f64> = window(x, y, r, w, h).map(|(xx, yy)| v[yy][xx]).collect();
    cells.iter().sum::<f64>() / cells.len() as f64
}

fn oracle_guided(guide: &[Vec<f64>], p: &[Vec<f64>], r: usize, eps: f64) -> Vec<Vec<f64>> {
    let (h, w) = (guide.len(), guide[0].len());
    let mut a = vec![vec![0.0; w]; h];
    let mut b = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let cells: Vec<(usize, usize)> = window(x, y, r, w, h).collect();
            let n = cells.len() as f64;
            let mi = cells.iter().map(|&(i, j)| guide[j][i]).sum::<f64>() / n;
            let mp = cells.iter().map(|&(i, j)| p[j][i]).sum::<f64>() / n;
            let cov = cells.iter().map(|&(i, j)| (guide[j][i] - mi) * (p[j][i] - mp)).sum::<f64>() / n;
            let var = cells.iter().map(|&(i, j)| (guide[j][i] - mi).powi(2)).sum::<f64>() / n;
            a[y][x] = cov / (var + eps);
            b[y][x] = mp - a[y][x] * mi;
        }
    }
    (0..h)
        .map(|y| (0..w).map(|x| window_mean(&a, x, y, r) * guide[y][x] + window_mean(&b, x, y, r)).collect())
        .collect()
}

fn oracle_refined(img: &Img, light: [f64; 3], side: usize, r: usize, eps: f64) -> Vec<Vec<f64>> {
    let t: Vec<Vec<f64>> = oracle_dark(img, light, side).iter().map(|row| row.iter().map(|d| 1.0 - d).collect()).collect();
    let guide = per_pixel(img, |[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b);
    oracle_guided(&guide, &t, r, eps)
        .iter()
        .map(|row| row.iter().map(|v| (1.0 - v).clamp(0.0, 1.0)).collect())
        .collect()
}

fn oracle_contrast(img: &Img, spec: PatchSpec) -> Vec<Vec<f64>> {
    let (h, w) = (img.len(), img[0].len());
    let local: Vec<Vec<f64>> = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let cells: Vec<(usize, usize)> = window(x, y, spec.inner / 2, w, h).collect();
                    let mut s = 0.0;
                    for &(xx, yy) in &cells {
                        for c in 0..3 {
                            s += (img[yy][xx][c] - img[y][x][c]).powi(2);
                        }
                    }
                    (s / (3 * cells.len()) as f64).sqrt()
                })
                .collect()
        })
        .collect();
    patch_reduce(&local, spec.patch, true)
}

fn hsv_sv(p: [f64; 3]) -> (f64, f64) {
    let v = p.iter().copied().fold(0.0, f64::max);
    let lo = p.iter().copied().fold(1.0, f64::min);
    (if v == 0.0 { 0.0 } else { (v - lo) / v }, v)
}

// hue in degrees by the textbook case split
fn hue_degrees(p: [f64; 3]) -> f64 {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max == min {
        return 0.0;
    }
    let d = max - min;
    let h = if max == r {
        60.0 * ((g - b) / d)
    } else if max == g {
        60.0 * ((b - r) / d) + 120.0
    } else {
        60.0 * ((r - g) / d) + 240.0
    };
    if h < 0.0 {
        h + 360.0
    } else {
        h
    }
}

fn oracle_hue_disparity(p: [f64; 3]) -> f64 {
    let si = [p[0].max(1.0 - p[0]), p[1].max(1.0 - p[1]), p[2].max(1.0 - p[2])];
    let d = (hue_degrees(si) - hue_degrees(p)).abs();
    d.min(360.0 - d) / 360.0
}

fn oracle_chroma(p: [f64; 3]) -> f64 {
    let lin = |c: f64| if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) };
    let (r, g, b) = (lin(p[0]), lin(p[1]), lin(p[2]));
    let m = [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ];
    let xyz: Vec<f64> = m.iter().map(|row| row[0] * r + row[1] * g + row[2] * b).collect();
    let white = [0.95047, 1.0, 1.08883];
    let f = |t: f64| {
        let e = (6.0f64 / 29.0).powi(3);
        if t > e {
            t.powf(1.0 / 3.0)
        } else {
            t * (29.0f64 / 6.0).powi(2) / 3.0 + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(xyz[0] / white[0]), f(xyz[1] / white[1]), f(xyz[2] / white[2]));
    let a = 500.0 * (fx - fy);
    let bb = 200.0 * (fy - fz);
    (a * a + bb * bb).sqrt()
}

fn oracle_light(img: &Img, fraction: f64, side: usize) -> [f64; 3] {
    let dark = oracle_dark(img, [1.0; 3], side);
    let w = img[0].len();
    let mut cells: Vec<(f64, usize)> = dark.iter().flatten().copied().zip(0..).collect();
    cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let count = ((fraction * cells.len() as f64).ceil() as usize).max(1).min(cells.len());
    let mut acc = [0.0; 3];
    for &(_, i) in &cells[..count] {
        for c in 0..3 {
            acc[c] += img[i / w][i % w][c] / count as f64;
        }
    }
    acc.map(|v| v.max(1e-6))
}

fn max_diff(a: &GrayMap, b: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (y, row) in b.iter().enumerate() {
        for (x, v) in row.iter().enumerate() {
            worst = worst.max((a.get(x, y) - v).abs());
        }
    }
    worst
}

fn random_odd(rng: &mut ChaCha8Rng, max: usize) -> usize {
    2 * rng.random_range(0..=max / 2) + 1
}

/// AC1: every feature map against explicit-loop oracles.
pub fn feature_oracles() -> Outcome {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut plain: f64 = 0.0;
    let mut guided: f64 = 0.0;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let img = HazeImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]);
        let rows = to_rows(&img);
        let patch = random_odd(&mut rng, 7);
        let inner = random_odd(&mut rng, patch);
        let spec = PatchSpec::new(patch, inner).unwrap();
        let light = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
        let gf = GuidedFilterSpec {
            radius: rng.random_range(1..=3),
            epsilon: 10f64.powf(rng.random_range(-4.0..-1.0)),
        };
        let params = ColorAttenuationParams::default();
        let al = AtmosphericLight::new(light).unwrap();

        plain = plain.max(max_diff(&dark_channel(&img, &al, spec), &oracle_dark(&rows, light, patch)));
        plain = plain.max(max_diff(&max_local_contrast(&img, spec), &oracle_contrast(&rows, spec)));
        let sat = per_pixel(&rows, |p| hsv_sv(p).0);
        plain = plain.max(max_diff(&max_local_saturation(&img, spec), &patch_reduce(&sat, patch, true)));
        let depth = per_pixel(&rows, |p| {
            let (s, v) = hsv_sv(p);
            params.theta0 + params.theta1 * v + params.theta2 * s
        });
        plain = plain.max(max_diff(
            &min_local_color_attenuation(&img, &params, spec),
            &patch_reduce(&depth, patch, false),
        ));
        plain = plain.max(max_diff(&hue_disparity(&img), &per_pixel(&rows, oracle_hue_disparity)));
        plain = plain.max(max_diff(&chroma(&img), &per_pixel(&rows, oracle_chroma)));
        guided = guided.max(max_diff(
            &refined_dark_channel(&img, &al, spec, gf).unwrap(),
            &oracle_refined(&rows, light, patch, gf.radius, gf.epsilon),
        ));

        // full pipeline with the estimated atmospheric light
        let config = FeatureConfig {
            size: 128,
            patches: spec,
            guided: gf,
            light_fraction: rng.random_range(0.05..0.5),
            ..FeatureConfig::default()
        };
        let raw = raw_features(&img, &config).unwrap();
        let est = oracle_light(&rows, config.light_fraction, patch);
        guided = guided.max(max_diff(&raw[0], &oracle_refined(&rows, est, patch, gf.radius, gf.epsilon)));
        plain = plain.max(max_diff(&raw[1], &oracle_contrast(&rows, spec)));
        plain = plain.max(max_diff(&raw[5], &per_pixel(&rows, oracle_chroma)));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        plain <= 1e-9 && guided <= 1e-6 && secs < 10.0,
        format!("max error {plain:.1e} (plain) / {guided:.1e} (guided), {secs:.2} s"),
    )
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// AC2: dark channel tracks haze and contrast falls with it.
pub fn haze_correlation() -> Outcome {
    let start = std::time::Instant::now();
    let size = 64;
    let scenes: Vec<HazeImage> = (0..4).map(|s| base_scene(size, 500 + s)).collect();
    let config = FeatureConfig {
        size,
        ..FeatureConfig::default()
    };
    let mut dark = Vec::new();
    let mut haze = Vec::new();
    let mut contrast_by_scene: Vec<Vec<(f64, f64)>> = vec![Vec::new(); scenes.len()];
    for i in 0..20 {
        let t = 0.3 + 0.6 * i as f64 / 19.0;
        let s = i % scenes.len();
        let img = haze_with_transmission(&scenes[s], t);
        let raw = raw_features(&img, &config).unwrap();
        dark.push(raw[0].mean());
        haze.push(1.0 - t);
        contrast_by_scene[s].push((1.0 - t, raw[1].mean()));
    }
    let r = pearson(&dark, &haze);
    let decreasing = contrast_by_scene.iter().all(|list| {
        let mut list = list.clone();
        list.sort_by(|a, b| a.0.total_cmp(&b.0));
        list.windows(2).all(|w| w[1].1 < w[0].1)
    });
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        r >= 0.95 && decreasing && secs < 30.0,
        format!("pearson {r:.4}, contrast strictly decreasing: {decreasing}, {secs:.2} s"),
    )
}
