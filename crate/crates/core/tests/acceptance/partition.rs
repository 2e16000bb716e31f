use aqisense::regions::{divide, Grid, Poi, RegionMap};
use aqisense::sim::{deploy_devices, FieldParams};
use aqisense::wakeup::{greedy_mids, is_independent_dominating, plan, DevicePriors, WakeConfig};
use aqisense::AqiScale;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::Runs;
use crate::Outcome;

/// Exhaustive recomputation of a division: nearest POI (lowest id on ties),
/// member means, then the per-cell argmin of distance over √count.
fn oracle_division(devices: &[[f64; 2]], pois: &[Poi], grid: &Grid) -> (Vec<(usize, Vec<usize>, [f64; 2])>, Vec<usize>) {
    let mut by_id: Vec<&Poi> = pois.iter().collect();
    by_id.sort_by_key(|p| p.id);
    let owner: Vec<usize> = devices
        .iter()
        .map(|d| {
            let dist: Vec<f64> = by_id
                .iter()
                .map(|p| ((d[0] - p.position[0]).powi(2) + (d[1] - p.position[1]).powi(2)).sqrt())
                .collect();
            let best = dist.iter().cloned().fold(f64::INFINITY, f64::min);
            dist.iter().position(|&x| x == best).unwrap()
        })
        .collect();
    let mut regions = Vec::new();
    for (k, p) in by_id.iter().enumerate() {
        let members: Vec<usize> = (0..devices.len()).filter(|&d| owner[d] == k).collect();
        if members.is_empty() {
            continue;
        }
        let mut sx = 0.0;
        let mut sy = 0.0;
        for &m in &members {
            sx += devices[m][0];
            sy += devices[m][1];
        }
        let n = members.len() as f64;
        regions.push((p.id, members, [sx / n, sy / n]));
    }
    let mut raster = Vec::new();
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let y = [(col as f64 + 0.5) * grid.resolution, (row as f64 + 0.5) * grid.resolution];
            let scores: Vec<f64> = regions
                .iter()
                .map(|(_, m, c)| ((y[0] - c[0]).powi(2) + (y[1] - c[1]).powi(2)).sqrt() / (m.len() as f64).sqrt())
                .collect();
            let best = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            raster.push(scores.iter().position(|&s| s == best).unwrap());
        }
    }
    (regions, raster)
}

fn matches_oracle(map: &RegionMap, devices: &[[f64; 2]], pois: &[Poi], grid: &Grid) -> bool {
    let (regions, raster) = oracle_division(devices, pois, grid);
    map.raster == raster
        && map.regions.len() == regions.len()
        && map.regions.iter().zip(&regions).all(|(r, (id, members, center))| {
            r.poi == *id
                && &r.members == members
                && r.count == members.len()
                && (r.center[0] - center[0]).abs() <= 1e-9
                && (r.center[1] - center[1]).abs() <= 1e-9
        })
}

// centres 20 m apart with 1 and 4 devices: the boundary is the Apollonius
// circle |p - c2| = 2|p - c1|, which crosses the axis at 20/3 m from c1
fn two_center_boundary() -> (f64, usize) {
    let c1 = [40.0, 40.0];
    let devices = [c1, [59.0, 40.0], [61.0, 40.0], [60.0, 39.0], [60.0, 41.0]];
    let pois = [Poi { id: 0, position: c1 }, Poi { id: 1, position: [60.0, 40.0] }];
    let grid = Grid::new(100, 80, 1.0).unwrap();
    let map = divide(&devices, &pois, &grid, 0).unwrap();
    let row = 40;
    let first_far = (40..100).find(|&c| map.raster[row * grid.cols + c] == 1).unwrap();
    let crossing = first_far as f64 - c1[0];
    // every cell more than one cell away from the circle is on its side
    let center = [c1[0] - 20.0 / 3.0, c1[1]];
    let radius = 40.0 / 3.0;
    let mut wrong = 0;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let y = grid.cell_center(c, r);
            let d = (y[0] - center[0]).hypot(y[1] - center[1]) - radius;
            if d.abs() > grid.resolution {
                let expected = if d < 0.0 { 0 } else { 1 };
                if map.raster[r * grid.cols + c] != expected {
                    wrong += 1;
                }
            }
        }
    }
    ((crossing - 20.0 / 3.0).abs(), wrong)
}

/// AC7: rasterised division against the exhaustive oracle.
pub fn voronoi_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut exact = 0;
    for _ in 0..50 {
        let grid = Grid::new(rng.random_range(1..=24), rng.random_range(1..=24), rng.random_range(5.0..50.0)).unwrap();
        let (w, h) = (grid.cols as f64 * grid.resolution, grid.rows as f64 * grid.resolution);
        let devices: Vec<[f64; 2]> = (0..rng.random_range(1..=60))
            .map(|_| [rng.random_range(0.0..w), rng.random_range(0.0..h)])
            .collect();
        let mut ids: Vec<usize> = (0..20).collect();
        ids.shuffle(&mut rng);
        let pois: Vec<Poi> = ids[..rng.random_range(1..=6)]
            .iter()
            .map(|&id| Poi {
                id,
                position: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
            })
            .collect();
        let map = divide(&devices, &pois, &grid, 0).unwrap();
        if matches_oracle(&map, &devices, &pois, &grid) {
            exact += 1;
        }
    }
    let (offset, wrong) = two_center_boundary();
    Outcome::new(
        exact == 50 && offset <= 1.0 && wrong == 0,
        format!("{exact}/50 instances exact; two-centre boundary off by {offset:.2} m on the axis, {wrong} cells on the wrong side"),
    )
}

fn random_graph(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = rng.random_range(1..=20);
    let p = rng.random_range(0.05..0.6);
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

/// Size of a minimum independent dominating set, by enumerating subsets in
/// increasing size.
fn exact_mids(adj: &[Vec<usize>]) -> usize {
    let n = adj.len();
    let all: u32 = if n == 32 { u32::MAX } else { (1 << n) - 1 };
    let closed: Vec<u32> = (0..n)
        .map(|v| adj[v].iter().fold(1u32 << v, |m, &w| m | (1 << w)))
        .collect();
    fn search(closed: &[u32], all: u32, start: usize, left: usize, covered: u32, used: u32) -> bool {
        if left == 0 {
            return covered == all;
        }
        for v in start..closed.len() {
            // independence: v is not adjacent to anything already chosen
            if closed[v] & used != 0 {
                continue;
            }
            if search(closed, all, v + 1, left - 1, covered | closed[v], used | (1 << v)) {
                return true;
            }
        }
        false
    }
    (1..=n).find(|&k| search(&closed, all, 0, k, 0, 0)).unwrap()
}

fn deployment_sizes(seeds: std::ops::Range<u64>, radii: &[f64]) -> Vec<(f64, f64)> {
    let params = FieldParams::default();
    let cubes = params.cubes();
    let [w, h] = params.extent();
    let grid = Grid::new(params.dims[0], params.dims[1], params.cube_size[0]).unwrap();
    let mut totals = vec![(0.0, 0.0); radii.len()];
    let count = seeds.end - seeds.start;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<[f64; 2]> = deploy_devices(&cubes, 100, seed)
            .unwrap()
            .iter()
            .map(|&c| [cubes[c].center[0], cubes[c].center[1]])
            .collect();
        let pois: Vec<Poi> = (0..5)
            .map(|id| Poi {
                id,
                position: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
            })
            .collect();
        let map = divide(&positions, &pois, &grid, 0).unwrap();
        let priors: Vec<DevicePriors> = (0..positions.len())
            .map(|d| {
                let lo = rng.random_range(0.0..300.0);
                let scale = AqiScale::new(lo, lo + 50.0).unwrap();
                DevicePriors::new(d, scale, rng.random_range(scale.x_min..=scale.x_max)).unwrap()
            })
            .collect();
        for (k, &radius) in radii.iter().enumerate() {
            let config = WakeConfig {
                threshold: 0.0,
                sigma: 0.0,
                radius,
            };
            let p = plan(&map, &priors, &positions, &config).unwrap();
            totals[k].0 += p.wake.len() as f64;
            totals[k].1 += p.wake.len() as f64 / positions.len() as f64;
        }
    }
    totals.iter().map(|&(s, f)| (s / count as f64, f / count as f64)).collect()
}

/// AC8: greedy MIDS validity and size, and the radius sweep.
pub fn mids_correctness(runs: &Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut valid = 0;
    let mut bounded = 0;
    let mut optimal = 0;
    for _ in 0..1000 {
        let adj = random_graph(&mut rng);
        let mut steps = 0;
        let s = greedy_mids(&adj, &mut steps);
        let best = exact_mids(&adj);
        valid += usize::from(is_independent_dominating(&adj, &s));
        bounded += usize::from(s.len() >= best);
        optimal += usize::from(s.len() == best);
    }
    let radii = [50.0, 100.0, 200.0, 300.0];
    let sweep = deployment_sizes(0..1000, &radii);
    runs.record("radius sweep", format!("{sweep:?}"), move || format!("{:?}", deployment_sizes(0..1000, &radii)));
    let non_increasing = sweep.windows(2).all(|w| w[1].0 <= w[0].0);
    let fraction = sweep[3].1;
    let sizes: Vec<String> = sweep.iter().map(|s| format!("{:.2}", s.0)).collect();
    Outcome::new(
        valid == 1000 && bounded == 1000 && non_increasing && fraction <= 0.5,
        format!(
            "{valid}/1000 independent dominating, {bounded}/1000 >= exact minimum ({optimal} optimal); mean |S| at r=50/100/200/300: {}; wake fraction at r=300 {fraction:.3}",
            sizes.join("/")
        ),
    )
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let xy: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / xy.len() as f64;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / xy.len() as f64;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// AC9: step counts of division and planning grow linearly in n at fixed k.
pub fn complexity_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let grid = Grid::new(10, 10, 64.0).unwrap();
    let pois: Vec<Poi> = (0..5)
        .map(|id| Poi {
            id,
            position: [rng.random_range(0.0..640.0), rng.random_range(0.0..640.0)],
        })
        .collect();
    let config = WakeConfig {
        threshold: 0.0,
        sigma: 0.0,
        radius: 1e6,
    };
    let mut divide_steps = Vec::new();
    let mut plan_steps = Vec::new();
    for n in [500usize, 1000, 2000, 4000, 8000] {
        let devices: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..640.0), rng.random_range(0.0..640.0)])
            .collect();
        let map = divide(&devices, &pois, &grid, 0).unwrap();
        divide_steps.push((n as f64, map.steps as f64));
        let priors: Vec<DevicePriors> = (0..n)
            .map(|d| DevicePriors::new(d, AqiScale::new(50.0, 150.0).unwrap(), rng.random_range(50.0..150.0)).unwrap())
            .collect();
        let p = plan(&map, &priors, &devices, &config).unwrap();
        plan_steps.push((n as f64, p.steps as f64));
    }
    let (a, b) = (slope(&divide_steps), slope(&plan_steps));
    Outcome::new(
        (a - 1.0).abs() <= 0.2 && (b - 1.0).abs() <= 0.2,
        format!("log-log slope: divide {a:.3}, plan {b:.3} (n = 500..8000, k = 5)"),
    )
}
