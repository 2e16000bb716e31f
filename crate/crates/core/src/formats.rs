//! On-disk formats: flat tensors, CSV tables, JSON documents and the
//! `[section] key = value` configuration file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cnn3d::TrainConfig;
use crate::features::FeatureConfig;
use crate::regions::{rle_row, unrle_row, Grid, Poi, Region, RegionMap};
use crate::sim::{EnergyModel, GraphConfig, KnnConfig, StampReport, REPORT_HEADER};
use crate::stgraph::{cube_grid, Cube, InferredMap, Label, LayerInput, NodeFeatures, Provenance};
use crate::wakeup::{DevicePriors, WakeConfig};
use crate::{AqiScale, Error, Result};

pub const TENSOR_MAGIC: &[u8; 5] = b"AQTN1";

/// Row-major `f32` tensor with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl FlatTensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(Error::input(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * (self.dims.len() + self.data.len()));
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a tensor; `location` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], location: &str) -> Result<Self> {
        let err = |msg: String| Error::format(location, msg);
        if bytes.len() < 9 {
            return Err(err(format!("header needs at least 9 bytes, found {}", bytes.len())));
        }
        if &bytes[..5] != TENSOR_MAGIC {
            return Err(err(format!("bad magic {:?}, expected \"AQTN1\"", String::from_utf8_lossy(&bytes[..5]))));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let rank = u32_at(5) as usize;
        let header = 9 + 4 * rank;
        if bytes.len() < header {
            return Err(err(format!(
                "truncated header: expected {header} bytes for {rank} dims, found {}",
                bytes.len()
            )));
        }
        let dims: Vec<u32> = (0..rank).map(|i| u32_at(9 + 4 * i)).collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| err(format!("dims {dims:?} overflow")))?;
        let expected = header + 4 * count;
        if bytes.len() != expected {
            return Err(err(format!(
                "payload size mismatch: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn csv_error(location: &str, e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::format(format!("{location} line {}", p.line()), e.to_string()),
        None => Error::format(location, e.to_string()),
    }
}

/// Reads a headed CSV table, checking the header against `header`.
pub fn read_csv<T: DeserializeOwned>(text: &str, location: &str, header: &[&str]) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let found = reader.headers().map_err(|e| csv_error(location, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::format(
            format!("{location} line 1"),
            format!("expected header {}, found {}", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(location, e)))
        .collect()
}

pub fn write_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    writer.write_record(header).map_err(|e| csv_error("output", e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error("output", e))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::format("output", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_csv_file<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    read_csv(&read_text(path)?, &path.display().to_string(), header)
}

pub fn write_csv_file<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    write_text(path, &write_csv(rows, header)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(
            format!("{} line {} column {}", path.display(), e.line(), e.column()),
            e.to_string(),
        )
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub const HISTORY_HEADER: [&str; 10] = [
    "timestamp",
    "i",
    "j",
    "k",
    "aqi",
    "weather",
    "wind_speed",
    "wind_dir",
    "humidity",
    "temperature",
];

/// One cube at one time stamp; `aqi` is empty for unmeasured cubes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub timestamp: f64,
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub aqi: Option<f64>,
    pub weather: u32,
    pub wind_speed: f64,
    pub wind_dir: f64,
    pub humidity: f64,
    pub temperature: f64,
}

fn cube_index(dims: [usize; 3], i: usize, j: usize, k: usize) -> Option<usize> {
    (i < dims[0] && j < dims[1] && k < dims[2]).then(|| (k * dims[1] + j) * dims[0] + i)
}

/// Groups history rows into graph layers, oldest first. Cubes without a row
/// keep default features and no label.
pub fn history_layers(rows: &[HistoryRow], dims: [usize; 3], cube_size: [f64; 3]) -> Result<(Vec<Cube>, Vec<LayerInput>)> {
    let cubes = cube_grid(dims, cube_size);
    let mut by_time: BTreeMap<u64, LayerInput> = BTreeMap::new();
    for (n, row) in rows.iter().enumerate() {
        let c = cube_index(dims, row.i, row.j, row.k).ok_or_else(|| {
            Error::input(format!(
                "history row {} names cube ({}, {}, {}) outside {dims:?}",
                n + 1,
                row.i,
                row.j,
                row.k
            ))
        })?;
        if !row.timestamp.is_finite() {
            return Err(Error::input(format!("history row {} has a non-finite timestamp", n + 1)));
        }
        let layer = by_time
            .entry(row.timestamp.to_bits() ^ if row.timestamp >= 0.0 { 1 << 63 } else { u64::MAX })
            .or_insert_with(|| LayerInput::empty(&cubes, row.timestamp));
        layer.features[c] = NodeFeatures {
            weather: row.weather,
            wind_speed: row.wind_speed,
            wind_direction: row.wind_dir,
            humidity: row.humidity,
            temperature: row.temperature,
            ..NodeFeatures::at_cube(&cubes[c], row.timestamp)
        };
        layer.labels[c] = row.aqi.map(Label::measured);
    }
    Ok((cubes, by_time.into_values().collect()))
}

pub const MAP_HEADER: [&str; 6] = ["timestamp", "i", "j", "k", "aqi", "provenance"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub timestamp: f64,
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub aqi: f64,
    pub provenance: String,
}

pub fn map_rows(map: &InferredMap, cubes: &[Cube]) -> Vec<MapRow> {
    cubes
        .iter()
        .zip(map.aqi.iter().zip(&map.provenance))
        .map(|(c, (&aqi, p))| MapRow {
            timestamp: map.timestamp,
            i: c.index[0],
            j: c.index[1],
            k: c.index[2],
            aqi,
            provenance: p.as_str().to_string(),
        })
        .collect()
}

/// Forecast layers as map rows, all inferred.
pub fn forecast_rows(layers: &[Vec<f64>], cubes: &[Cube], start: f64, interval: f64) -> Vec<MapRow> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(h, values)| {
            let t = start + (h + 1) as f64 * interval;
            cubes.iter().zip(values).map(move |(c, &aqi)| MapRow {
                timestamp: t,
                i: c.index[0],
                j: c.index[1],
                k: c.index[2],
                aqi,
                provenance: Provenance::Inferred.as_str().to_string(),
            })
        })
        .collect()
}

pub const POINT_HEADER: [&str; 3] = ["id", "x", "y"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

/// Device positions indexed by row order; ids must be `0..n` in order.
pub fn device_positions(rows: &[PointRow]) -> Result<Vec<[f64; 2]>> {
    rows.iter()
        .enumerate()
        .map(|(n, r)| {
            if r.id != n {
                return Err(Error::input(format!("device ids must run 0..n in order; row {} has id {}", n + 1, r.id)));
            }
            Ok([r.x, r.y])
        })
        .collect()
}

pub fn pois(rows: &[PointRow]) -> Vec<Poi> {
    rows.iter().map(|r| Poi { id: r.id, position: [r.x, r.y] }).collect()
}

pub const PRIORS_HEADER: [&str; 4] = ["device", "x_min", "x_max", "pre_inferred"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorRow {
    pub device: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub pre_inferred: f64,
}

pub fn device_priors(rows: &[PriorRow]) -> Result<Vec<DevicePriors>> {
    rows.iter()
        .enumerate()
        .map(|(n, r)| {
            if r.device != n {
                return Err(Error::input(format!("prior rows must list devices 0..n in order; row {} has {}", n + 1, r.device)));
            }
            DevicePriors::new(r.device, AqiScale::new(r.x_min, r.x_max)?, r.pre_inferred)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub timestamp: usize,
    pub je: f64,
    pub rmse_now: f64,
    pub rmse_1h: Option<f64>,
    pub rmse_3h: Option<f64>,
    pub rmse_10h: Option<f64>,
    pub wake_fraction: f64,
    pub ground_energy: f64,
    pub aerial_energy: f64,
}

impl From<&StampReport> for ReportRow {
    fn from(s: &StampReport) -> Self {
        Self {
            seed: s.seed,
            timestamp: s.timestamp,
            je: s.je,
            rmse_now: s.rmse_now,
            rmse_1h: s.rmse_at(1),
            rmse_3h: s.rmse_at(3),
            rmse_10h: s.rmse_at(10),
            wake_fraction: s.wake_fraction,
            ground_energy: s.ground_energy,
            aerial_energy: s.aerial_energy,
        }
    }
}

pub fn report_csv(stamps: &[StampReport]) -> Result<String> {
    let rows: Vec<ReportRow> = stamps.iter().map(ReportRow::from).collect();
    write_csv(&rows, &REPORT_HEADER)
}

/// `regions.json`: the region list, the device positions it was built from,
/// and the raster stored as run-length encoded rows of `(region, run)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionsFile {
    pub grid: Grid,
    pub devices: Vec<[f64; 2]>,
    pub regions: Vec<Region>,
    pub dropped: Vec<usize>,
    pub steps: u64,
    pub raster: Vec<Vec<(usize, usize)>>,
}

impl RegionsFile {
    pub fn new(map: &RegionMap, devices: &[[f64; 2]]) -> Self {
        Self {
            grid: map.grid,
            devices: devices.to_vec(),
            regions: map.regions.clone(),
            dropped: map.dropped.clone(),
            steps: map.steps,
            raster: map.raster.chunks(map.grid.cols).map(rle_row).collect(),
        }
    }

    pub fn into_map(self) -> Result<RegionMap> {
        let grid = Grid::new(self.grid.cols, self.grid.rows, self.grid.resolution)?;
        if self.raster.len() != grid.rows {
            return Err(Error::input(format!("raster has {} rows, grid has {}", self.raster.len(), grid.rows)));
        }
        let mut raster = Vec::with_capacity(grid.cols * grid.rows);
        for (r, runs) in self.raster.iter().enumerate() {
            let row = unrle_row(runs);
            if row.len() != grid.cols {
                return Err(Error::input(format!("raster row {r} has {} cells, grid has {}", row.len(), grid.cols)));
            }
            if let Some(&bad) = row.iter().find(|&&v| v >= self.regions.len()) {
                return Err(Error::input(format!("raster row {r} names region {bad} of {}", self.regions.len())));
            }
            raster.extend(row);
        }
        if let Some(&bad) = self.regions.iter().flat_map(|r| &r.members).find(|&&m| m >= self.devices.len()) {
            return Err(Error::input(format!("region member {bad} has no device position")));
        }
        Ok(RegionMap {
            regions: self.regions,
            grid,
            raster,
            dropped: self.dropped,
            steps: self.steps,
        })
    }
}

/// Training manifest for `cnn train`: images with AQI labels, paths
/// relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub aqi: f64,
}

impl Manifest {
    /// Entries with paths resolved against `base`.
    pub fn resolved(&self, base: &Path) -> Vec<(PathBuf, f64)> {
        self.images.iter().map(|e| (base.join(&e.path), e.aqi)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionsConfig {
    /// Raster metres per cell.
    pub resolution: f64,
    pub lloyd_iters: usize,
}

impl Default for RegionsConfig {
    fn default() -> Self {
        Self {
            resolution: 20.0,
            lloyd_iters: 0,
        }
    }
}

/// Defaults for every command, loaded from a `[section] key = value` file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub graph: GraphConfig,
    pub regions: RegionsConfig,
    pub wakeup: WakeConfig,
    pub energy: EnergyModel,
    pub knn: KnnConfig,
    pub seed: u64,
}

pub const CONFIG_ENV: &str = "AQISENSE_CONFIG";

impl Config {
    pub fn parse(text: &str, location: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| {
            let loc = match e.span() {
                Some(span) => format!("{location} line {}", text[..span.start].matches('\n').count() + 1),
                None => location.to_string(),
            };
            Error::format(loc, e.message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.wakeup.validate()?;
        self.energy.validate()?;
        if !(self.graph.radius > 0.0) || self.graph.layers == 0 || !(self.graph.bin_width > 0.0) {
            return Err(Error::input("graph needs radius > 0, layers >= 1 and bin width > 0"));
        }
        if self.train.batch_size == 0 || !(self.train.learning_rate > 0.0) {
            return Err(Error::input("training needs batch size >= 1 and learning rate > 0"));
        }
        if !(self.regions.resolution > 0.0) {
            return Err(Error::input("region raster resolution must be > 0"));
        }
        if self.knn.k == 0 {
            return Err(Error::input("kNN needs k >= 1"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    /// Loads `explicit`, else the file named by `AQISENSE_CONFIG`, else the
    /// defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
