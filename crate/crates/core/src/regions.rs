//! Region division: devices cluster around POIs, and the monitoring plane is
//! rasterised into a multiplicatively weighted Voronoi diagram of the
//! cluster centres.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: usize,
    pub position: [f64; 2],
}

/// Raster of `cols × rows` square cells anchored at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub cols: usize,
    pub rows: usize,
    /// Metres per cell side.
    pub resolution: f64,
}

impl Grid {
    pub fn new(cols: usize, rows: usize, resolution: f64) -> Result<Self> {
        if cols == 0 || rows == 0 || !(resolution > 0.0) {
            return Err(Error::input(format!(
                "grid {cols}x{rows} at {resolution} m/cell must be non-empty with positive resolution"
            )));
        }
        Ok(Self { cols, rows, resolution })
    }

    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5) * self.resolution,
            (row as f64 + 0.5) * self.resolution,
        ]
    }

    /// Cell containing a point, clamped to the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let c = ((p[0] / self.resolution).floor().max(0.0) as usize).min(self.cols - 1);
        let r = ((p[1] / self.resolution).floor().max(0.0) as usize).min(self.rows - 1);
        (c, r)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Index (into `pois`) of the nearest POI for every device; equal distances
/// go to the lowest POI id.
pub fn assign_devices(devices: &[[f64; 2]], pois: &[Poi], steps: &mut u64) -> Result<Vec<usize>> {
    if pois.is_empty() {
        return Err(Error::input("region division needs at least one POI"));
    }
    let mut order: Vec<usize> = (0..pois.len()).collect();
    order.sort_by_key(|&i| pois[i].id);
    Ok(devices
        .iter()
        .map(|&d| {
            let mut best = order[0];
            let mut best_d = dist(d, pois[best].position);
            for &j in &order[1..] {
                let dj = dist(d, pois[j].position);
                if dj < best_d {
                    best = j;
                    best_d = dj;
                }
            }
            *steps += pois.len() as u64;
            best
        })
        .collect())
}

/// Mean member position per cluster, or `None` for empty clusters.
pub fn region_centers(
    devices: &[[f64; 2]],
    assignment: &[usize],
    clusters: usize,
    steps: &mut u64,
) -> Vec<Option<[f64; 2]>> {
    let mut sums = vec![[0.0; 2]; clusters];
    let mut counts = vec![0usize; clusters];
    for (d, &c) in devices.iter().zip(assignment) {
        sums[c][0] += d[0];
        sums[c][1] += d[1];
        counts[c] += 1;
        *steps += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64]))
        .collect()
}

/// Weighted distance `‖y − φ‖ / √n`.
pub fn weighted_distance(y: [f64; 2], center: [f64; 2], count: usize) -> f64 {
    dist(y, center) / (count as f64).sqrt()
}

/// Region index per cell (row-major), minimising the weighted distance;
/// ties go to the lower region index.
pub fn weighted_voronoi(centers: &[[f64; 2]], counts: &[usize], grid: &Grid, steps: &mut u64) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(Error::input("weighted Voronoi needs at least one region"));
    }
    if centers.len() != counts.len() || counts.contains(&0) {
        return Err(Error::input("every region needs a center and a device count >= 1"));
    }
    let scale: Vec<f64> = counts.iter().map(|&n| 1.0 / (n as f64).sqrt()).collect();
    let mut raster = Vec::with_capacity(grid.cols * grid.rows);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let y = grid.cell_center(col, row);
            let mut best = 0;
            let mut best_d = dist(y, centers[0]) * scale[0];
            for j in 1..centers.len() {
                let d = dist(y, centers[j]) * scale[j];
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            raster.push(best);
        }
    }
    *steps += (grid.cols * grid.rows * centers.len()) as u64;
    Ok(raster)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Id of the POI the region grew from.
    pub poi: usize,
    pub members: Vec<usize>,
    pub center: [f64; 2],
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub regions: Vec<Region>,
    pub grid: Grid,
    /// Region index per cell, row-major.
    pub raster: Vec<usize>,
    /// POIs that attracted no device and were left out.
    pub dropped: Vec<usize>,
    /// Elementary operations performed (distance evaluations and sums).
    pub steps: u64,
}

impl RegionMap {
    pub fn region_at(&self, p: [f64; 2]) -> usize {
        let (c, r) = self.grid.cell_of(p);
        self.raster[r * self.grid.cols + c]
    }

    /// Region index of every device by cluster membership.
    pub fn device_regions(&self, devices: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; devices];
        for (j, region) in self.regions.iter().enumerate() {
            for &m in &region.members {
                out[m] = j;
            }
        }
        out
    }
}

/// Nearest-POI clustering, cluster centres and the weighted Voronoi raster.
/// `lloyd_iters` extra rounds reassign devices to the nearest centre.
pub fn divide(devices: &[[f64; 2]], pois: &[Poi], grid: &Grid, lloyd_iters: usize) -> Result<RegionMap> {
    if devices.is_empty() {
        return Err(Error::input("region division needs at least one device"));
    }
    let mut steps = 0;
    let mut assignment = assign_devices(devices, pois, &mut steps)?;
    let mut centers = region_centers(devices, &assignment, pois.len(), &mut steps);
    for _ in 0..lloyd_iters {
        let sites: Vec<Poi> = centers
            .iter()
            .zip(pois)
            .filter_map(|(c, p)| c.map(|position| Poi { id: p.id, position }))
            .collect();
        let index_of: Vec<usize> = sites
            .iter()
            .map(|s| pois.iter().position(|p| p.id == s.id).expect("site from poi"))
            .collect();
        assignment = assign_devices(devices, &sites, &mut steps)?
            .into_iter()
            .map(|i| index_of[i])
            .collect();
        centers = region_centers(devices, &assignment, pois.len(), &mut steps);
    }
    let mut regions = Vec::new();
    let mut dropped = Vec::new();
    let mut order: Vec<usize> = (0..pois.len()).collect();
    order.sort_by_key(|&i| pois[i].id);
    for j in order {
        match centers[j] {
            Some(center) => {
                let members: Vec<usize> = (0..devices.len()).filter(|&d| assignment[d] == j).collect();
                regions.push(Region {
                    poi: pois[j].id,
                    count: members.len(),
                    members,
                    center,
                });
            }
            None => {
                log::warn!("POI {} attracted no devices and is dropped", pois[j].id);
                dropped.push(pois[j].id);
            }
        }
    }
    let centers: Vec<[f64; 2]> = regions.iter().map(|r| r.center).collect();
    let counts: Vec<usize> = regions.iter().map(|r| r.count).collect();
    let raster = weighted_voronoi(&centers, &counts, grid, &mut steps)?;
    Ok(RegionMap {
        regions,
        grid: *grid,
        raster,
        dropped,
        steps,
    })
}

/// Run-length encoding of one raster row as `(region, run)` pairs.
pub fn rle_row(row: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &v in row {
        match out.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => out.push((v, 1)),
        }
    }
    out
}

pub fn unrle_row(runs: &[(usize, usize)]) -> Vec<usize> {
    runs.iter().flat_map(|&(v, n)| std::iter::repeat_n(v, n)).collect()
}
