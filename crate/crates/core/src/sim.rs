//! Deterministic simulation: synthetic AQI fields, hazy imagery, device
//! deployments, energy accounting, the S-T kNN baseline and end-to-end runs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cnn3d::{classes_from_bounds, Architecture, Cnn3dModel, TrainConfig, TrainReport};
use crate::features::{extract_stack, FeatureConfig};
use crate::imaging::{hsv_to_rgb, HazeImage};
use crate::regions::{divide, Grid, Poi, RegionMap};
use crate::stgraph::{
    cube_grid, AqiBins, Cube, InferredMap, Label, LayerInput, LearnConfig, NodeFeatures, Provenance, SolveConfig,
    StGraph,
};
use crate::wakeup::{plan, DevicePriors, WakeConfig};
use crate::{AqiScale, Error, Result, AQI_MAX};

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plume {
    /// Metres.
    pub position: [f64; 2],
    /// Peak AQI contribution.
    pub strength: f64,
    /// Gaussian standard deviation in metres.
    pub spread: f64,
}

impl Plume {
    pub fn at(&self, p: [f64; 2]) -> f64 {
        let d2 = (p[0] - self.position[0]).powi(2) + (p[1] - self.position[1]).powi(2);
        self.strength * (-d2 / (2.0 * self.spread * self.spread)).exp()
    }
}

/// How plume sources are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sources {
    Fixed(Vec<Plume>),
    Random {
        count: usize,
        strength: [f64; 2],
        spread: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldParams {
    /// Cubes along x, y, z.
    pub dims: [usize; 3],
    /// Metres per cube along x, y, z.
    pub cube_size: [f64; 3],
    pub sources: Sources,
    /// AR(1) coefficient of plume drift and of the deviation field.
    pub rho: f64,
    /// Innovation std-dev of each plume's multiplicative drift.
    pub drift_std: f64,
    /// Innovation std-dev of the smooth deviation field, in AQI.
    pub noise_std: f64,
    /// Cubes per control point of the deviation field.
    pub noise_cell: usize,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            dims: [32, 32, 1],
            cube_size: [20.0, 20.0, 10.0],
            sources: Sources::Random {
                count: 3,
                strength: [20.0, 120.0],
                spread: [250.0, 600.0],
            },
            rho: 0.9,
            drift_std: 0.1,
            noise_std: 5.0,
            noise_cell: 8,
        }
    }
}

impl FieldParams {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.cube_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::input("field grid must be non-empty with positive cube sizes"));
        }
        if !(0.0..=1.0).contains(&self.rho) || !(self.drift_std >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::input("field needs rho in [0, 1] and non-negative noise"));
        }
        if self.noise_cell == 0 {
            return Err(Error::input("noise cell must be >= 1"));
        }
        if let Sources::Random { strength, spread, .. } = &self.sources {
            if strength[0] > strength[1] || spread[0] > spread[1] || spread[0] <= 0.0 || strength[0] < 0.0 {
                return Err(Error::input("random source ranges must be ordered, spread > 0"));
            }
        }
        Ok(())
    }

    pub fn cubes(&self) -> Vec<Cube> {
        cube_grid(self.dims, self.cube_size)
    }

    pub fn extent(&self) -> [f64; 2] {
        [
            self.dims[0] as f64 * self.cube_size[0],
            self.dims[1] as f64 * self.cube_size[1],
        ]
    }
}

/// Ground-truth AQI per time stamp per cube (cube order of [`cube_grid`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticField {
    pub params: FieldParams,
    pub plumes: Vec<Plume>,
    pub values: Vec<Vec<f64>>,
}

impl SyntheticField {
    pub fn stamps(&self) -> usize {
        self.values.len()
    }

    pub fn at(&self, stamp: usize, cube: usize) -> f64 {
        self.values[stamp][cube]
    }
}

// Smooth zero-mean noise: Gaussian control points every `cell` cubes,
// bilinearly interpolated.
fn smooth_noise(params: &FieldParams, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [nx, ny, nz] = params.dims;
    let cell = params.noise_cell;
    let (cx, cy) = (nx / cell + 2, ny / cell + 2);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let control: Vec<f64> = (0..cx * cy).map(|_| std * normal.sample(rng)).collect();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for _ in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let (fx, fy) = (i as f64 / cell as f64, j as f64 / cell as f64);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                let c = |x: usize, y: usize| control[y * cx + x];
                let top = c(x0, y0) * (1.0 - tx) + c(x0 + 1, y0) * tx;
                let bottom = c(x0, y0 + 1) * (1.0 - tx) + c(x0 + 1, y0 + 1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

/// Plume field with AR(1) plume drift and an AR(1) smooth deviation.
pub fn gen_field(params: &FieldParams, stamps: usize, seed: u64) -> Result<SyntheticField> {
    params.validate()?;
    let mut rng = rng_for(seed, 1);
    let [w, h] = params.extent();
    let plumes = match &params.sources {
        Sources::Fixed(p) => p.clone(),
        Sources::Random { count, strength, spread } => (0..*count)
            .map(|_| Plume {
                position: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
                strength: rng.random_range(strength[0]..=strength[1]),
                spread: rng.random_range(spread[0]..=spread[1]),
            })
            .collect(),
    };
    let cubes = params.cubes();
    let base: Vec<Vec<f64>> = plumes
        .iter()
        .map(|p| cubes.iter().map(|c| p.at([c.center[0], c.center[1]])).collect())
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut drift = vec![1.0; plumes.len()];
    let mut deviation = smooth_noise(params, params.noise_std, &mut rng);
    let mut values = Vec::with_capacity(stamps);
    for t in 0..stamps {
        if t > 0 {
            for m in &mut drift {
                *m = (1.0 + params.rho * (*m - 1.0) + params.drift_std * normal.sample(&mut rng)).max(0.0);
            }
            let innovation = smooth_noise(params, params.noise_std, &mut rng);
            for (d, e) in deviation.iter_mut().zip(innovation) {
                *d = params.rho * *d + e;
            }
        }
        let layer = (0..cubes.len())
            .map(|c| {
                let plume: f64 = base.iter().zip(&drift).map(|(b, m)| b[c] * m).sum();
                (plume + deviation[c]).clamp(0.0, AQI_MAX)
            })
            .collect();
        values.push(layer);
    }
    Ok(SyntheticField {
        params: params.clone(),
        plumes,
        values,
    })
}

/// Monotone decreasing AQI → transmission map `t = exp(-aqi / scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmissionMap {
    pub scale: f64,
}

impl Default for TransmissionMap {
    fn default() -> Self {
        Self { scale: 300.0 }
    }
}

impl TransmissionMap {
    pub fn transmission(&self, aqi: f64) -> f64 {
        (-aqi.max(0.0) / self.scale).exp()
    }
}

/// `I = J t + L (1 - t)` with uniform transmission `t` and white airlight.
pub fn haze_with_transmission(base: &HazeImage, t: f64) -> HazeImage {
    let t = t.clamp(0.0, 1.0);
    HazeImage::from_fn(base.width(), base.height(), |x, y| base.pixel(x, y).map(|j| j * t + (1.0 - t)))
}

/// Hazes `base` according to `aqi`; returns the image and its AQI label.
pub fn gen_haze_image(base: &HazeImage, aqi: f64, mapping: &TransmissionMap) -> (HazeImage, f64) {
    (haze_with_transmission(base, mapping.transmission(aqi)), aqi)
}

/// A procedural clean outdoor scene: bright sky over saturated, shadowed
/// buildings, so the dark-channel prior holds.
pub fn base_scene(size: usize, seed: u64) -> HazeImage {
    let mut rng = rng_for(seed, 2);
    let horizon = rng.random_range(0.2..0.45) * size as f64;
    let sky_top = [
        rng.random_range(0.35..0.55),
        rng.random_range(0.55..0.75),
        rng.random_range(0.85..1.0),
    ];
    let ground = hsv_to_rgb([rng.random_range(0.15..0.4), rng.random_range(0.5..0.9), rng.random_range(0.25..0.5)]);
    struct Block {
        x0: f64,
        x1: f64,
        top: f64,
        color: [f64; 3],
        stripe: f64,
    }
    let blocks: Vec<Block> = (0..rng.random_range(6..12))
        .map(|_| {
            let x0 = rng.random_range(-0.1..0.9) * size as f64;
            Block {
                x0,
                x1: x0 + rng.random_range(0.08..0.3) * size as f64,
                top: horizon - rng.random_range(-0.1..0.3) * size as f64,
                color: hsv_to_rgb([rng.random::<f64>(), rng.random_range(0.55..1.0), rng.random_range(0.3..0.95)]),
                stripe: rng.random_range(3.0..7.0),
            }
        })
        .collect();
    let grain: Vec<f64> = (0..size * size).map(|_| rng.random_range(0.85..1.0)).collect();
    HazeImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut px = if fy < horizon {
            let k = fy / horizon;
            sky_top.map(|c| c + (1.0 - c) * 0.5 * k)
        } else {
            ground
        };
        for b in &blocks {
            if fx >= b.x0 && fx < b.x1 && fy >= b.top {
                px = b.color;
                // window rows in shadow
                if ((fy - b.top) / b.stripe).fract() < 0.3 {
                    px = px.map(|c| c * 0.15);
                }
            }
        }
        let g = grain[y * size + x];
        px.map(|c| c * g)
    })
}

pub fn scene_pool(count: usize, size: usize, seed: u64) -> Vec<HazeImage> {
    (0..count).map(|i| base_scene(size, seed.wrapping_mul(1000).wrapping_add(i as u64))).collect()
}

/// Settings for the camera-side classifier used by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    /// Side of the captured (and feature) images in pixels.
    pub size: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    /// Interior class boundaries over [0, 500].
    pub class_bounds: Vec<f64>,
    pub scenes: usize,
    pub train_images: usize,
    pub train: TrainConfig,
    pub transmission: TransmissionMap,
    pub seed: u64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            size: 24,
            c1: 32,
            c2: 16,
            c3: 16,
            class_bounds: vec![50.0, 100.0, 125.0, 155.0, 185.0],
            scenes: 16,
            train_images: 180,
            train: TrainConfig {
                epochs: 40,
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
            transmission: TransmissionMap::default(),
            seed: 7,
        }
    }
}

impl VisionConfig {
    pub fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture {
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
            classes: classes_from_bounds(&self.class_bounds)?,
            features: FeatureConfig {
                size: self.size,
                ..FeatureConfig::default()
            },
        })
    }

    pub fn scenes(&self) -> Vec<HazeImage> {
        scene_pool(self.scenes, self.size, self.seed)
    }
}

/// Hazy training images with AQI labels, stratified over the classes.
pub fn vision_dataset(config: &VisionConfig, count: usize, seed: u64) -> Result<Vec<(HazeImage, f64)>> {
    let classes = classes_from_bounds(&config.class_bounds)?;
    let scenes = config.scenes();
    let mut rng = rng_for(seed, 3);
    Ok((0..count)
        .map(|i| {
            let class = classes[i % classes.len()];
            let aqi = rng.random_range(class.x_min..class.x_max);
            let scene = &scenes[rng.random_range(0..scenes.len())];
            gen_haze_image(scene, aqi, &config.transmission)
        })
        .collect())
}

pub fn train_vision_model(config: &VisionConfig) -> Result<(Cnn3dModel, TrainReport)> {
    let arch = config.architecture()?;
    let data = vision_dataset(config, config.train_images, config.seed)?;
    let stacks = data
        .iter()
        .map(|(img, _)| extract_stack(img, &arch.features))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = data.iter().map(|d| d.1).collect();
    let mut model = Cnn3dModel::init(arch, config.seed)?;
    let report = model.train(&stacks, &labels, &config.train)?;
    Ok((model, report))
}

/// One labelled sample for the S-T kNN baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StSample {
    pub position: [f64; 3],
    /// Hours.
    pub time: f64,
    pub aqi: f64,
}

/// Inverse-distance-weighted mean of the `k` nearest samples under
/// `sqrt(‖Δx‖² + (c Δt)²)` with `c` metres per hour. Samples at zero
/// distance are averaged exactly.
pub fn st_knn(samples: &[StSample], position: [f64; 3], time: f64, k: usize, meters_per_hour: f64, power: f64) -> Result<f64> {
    if samples.is_empty() || k == 0 {
        return Err(Error::input("S-T kNN needs at least one sample and k >= 1"));
    }
    let mut d: Vec<(f64, usize)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let space: f64 = (0..3).map(|a| (s.position[a] - position[a]).powi(2)).sum();
            ((space + (meters_per_hour * (s.time - time)).powi(2)).sqrt(), i)
        })
        .collect();
    let k = k.min(d.len());
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = &d[..k];
    let exact: Vec<f64> = nearest.iter().filter(|x| x.0 == 0.0).map(|x| samples[x.1].aqi).collect();
    if !exact.is_empty() {
        return Ok(exact.iter().sum::<f64>() / exact.len() as f64);
    }
    let (num, den) = nearest.iter().fold((0.0, 0.0), |(n, w), &(dist, i)| {
        let wt = dist.powf(-power);
        (n + wt * samples[i].aqi, w + wt)
    });
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub meters_per_hour: f64,
    pub power: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 8,
            meters_per_hour: 100.0,
            power: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyModel {
    /// Joules per measurement.
    pub e_sense: f64,
    /// Joules per uploaded report.
    pub e_upload: f64,
    /// Joules per sleeping interval.
    pub e_sleep: f64,
    /// Joules per metre flown.
    pub e_fly: f64,
    /// Joules per second hovering.
    pub e_loiter: f64,
    /// Flight-energy multiplier when carrying sensors.
    pub load_factor: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_sense: 0.5,
            e_upload: 1.5,
            e_sleep: 0.01,
            e_fly: 80.0,
            e_loiter: 50.0,
            load_factor: 1.5,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let values = [self.e_sense, self.e_upload, self.e_sleep, self.e_fly, self.e_loiter];
        if values.iter().any(|v| !(*v >= 0.0)) || !(self.load_factor >= 1.0) {
            return Err(Error::input("energy constants must be >= 0 and load factor >= 1"));
        }
        Ok(())
    }

    pub fn awake_cost(&self) -> f64 {
        self.e_sense + self.e_upload
    }
}

/// How the UAV collects its aerial prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UavMode {
    /// Camera only: fly over the centres, no hovering, no sensor payload.
    Camera,
    /// Sensor payload: hover `loiter_seconds` at every centre, loaded flight.
    Sensor { loiter_seconds: f64 },
}

/// Greedy nearest-neighbour tour from `depot` over `points` and back;
/// returns the visiting order and the leg lengths.
pub fn uav_tour(depot: [f64; 2], points: &[[f64; 2]]) -> (Vec<usize>, Vec<f64>) {
    let mut left: Vec<usize> = (0..points.len()).collect();
    let mut at = depot;
    let mut order = Vec::with_capacity(points.len());
    let mut legs = Vec::with_capacity(points.len() + 1);
    let d = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    while !left.is_empty() {
        let (pos, &next) = left
            .iter()
            .enumerate()
            .min_by(|a, b| d(at, points[*a.1]).total_cmp(&d(at, points[*b.1])).then(a.1.cmp(b.1)))
            .expect("non-empty");
        legs.push(d(at, points[next]));
        at = points[next];
        order.push(next);
        left.remove(pos);
    }
    if !order.is_empty() {
        legs.push(d(at, depot));
    }
    (order, legs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EnergyEvent {
    Sense { device: usize, joules: f64 },
    Upload { device: usize, joules: f64 },
    Sleep { device: usize, joules: f64 },
    Fly { meters: f64, joules: f64 },
    Loiter { seconds: f64, joules: f64 },
}

impl EnergyEvent {
    pub fn joules(&self) -> f64 {
        match *self {
            EnergyEvent::Sense { joules, .. }
            | EnergyEvent::Upload { joules, .. }
            | EnergyEvent::Sleep { joules, .. }
            | EnergyEvent::Fly { joules, .. }
            | EnergyEvent::Loiter { joules, .. } => joules,
        }
    }

    pub fn is_aerial(&self) -> bool {
        matches!(self, EnergyEvent::Fly { .. } | EnergyEvent::Loiter { .. })
    }
}

/// Energy events of one UAV pass over `centers`.
pub fn aerial_events(energy: &EnergyModel, mode: UavMode, depot: [f64; 2], centers: &[[f64; 2]]) -> Vec<EnergyEvent> {
    let (_, legs) = uav_tour(depot, centers);
    let (load, loiter) = match mode {
        UavMode::Camera => (1.0, 0.0),
        UavMode::Sensor { loiter_seconds } => (energy.load_factor, loiter_seconds),
    };
    let mut events: Vec<EnergyEvent> = legs
        .into_iter()
        .map(|meters| EnergyEvent::Fly {
            meters,
            joules: meters * energy.e_fly * load,
        })
        .collect();
    if loiter > 0.0 {
        events.extend(centers.iter().map(|_| EnergyEvent::Loiter {
            seconds: loiter,
            joules: loiter * energy.e_loiter,
        }));
    }
    events
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Layers per graph, the newest included.
    pub layers: usize,
    /// Spatial edge radius in metres.
    pub radius: f64,
    pub bin_width: f64,
    pub learn: LearnConfig,
    pub solve: SolveConfig,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            radius: 10.0,
            bin_width: 10.0,
            learn: LearnConfig {
                max_iters: 3,
                ..LearnConfig::default()
            },
            solve: SolveConfig {
                tolerance: 1e-6,
                max_sweeps: 2_000,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimScenario {
    pub field: FieldParams,
    pub devices: usize,
    pub pois: usize,
    /// Stamps run with every device awake before reporting starts.
    pub warmup: usize,
    /// Reported stamps.
    pub stamps: usize,
    /// Hours between stamps.
    pub interval: f64,
    pub wake: WakeConfig,
    /// Wake every device at every stamp instead of planning.
    pub wake_all: bool,
    /// Condition the newest graph layer on the aerial AQI scales.
    pub condition: bool,
    pub energy: EnergyModel,
    pub uav: UavMode,
    pub graph: GraphConfig,
    pub vision: VisionConfig,
    pub knn: KnnConfig,
    /// Multiplicative sensor noise std-dev.
    pub sensor_noise: f64,
    /// Forecast horizons (in stamps) to score.
    pub horizons: Vec<usize>,
    /// Also score the S-T kNN baseline.
    pub baseline: bool,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            field: FieldParams::default(),
            devices: 100,
            pois: 5,
            warmup: 3,
            stamps: 5,
            interval: 1.0,
            wake: WakeConfig {
                threshold: 0.5,
                sigma: 50.0,
                radius: 60.0,
            },
            wake_all: false,
            condition: true,
            energy: EnergyModel::default(),
            uav: UavMode::Camera,
            graph: GraphConfig::default(),
            vision: VisionConfig::default(),
            knn: KnnConfig::default(),
            sensor_noise: 0.03,
            horizons: vec![1, 3, 10],
            baseline: false,
            seed: 0,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.energy.validate()?;
        self.wake.validate()?;
        let cubes: usize = self.field.dims.iter().product();
        if self.devices == 0 || self.devices > cubes {
            return Err(Error::input(format!("{} devices do not fit {cubes} cubes", self.devices)));
        }
        if self.pois == 0 {
            return Err(Error::input("scenario needs at least one POI"));
        }
        if self.stamps == 0 {
            return Err(Error::input("scenario needs at least one reported stamp"));
        }
        if self.graph.layers == 0 || !(self.graph.radius > 0.0) || !(self.interval > 0.0) {
            return Err(Error::input("graph needs >= 1 layer, positive radius and interval"));
        }
        if !(self.sensor_noise >= 0.0) {
            return Err(Error::input("sensor noise must be >= 0"));
        }
        if self.horizons.contains(&0) {
            return Err(Error::input("forecast horizons must be >= 1"));
        }
        Ok(())
    }

    fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(0).max(1)
    }

    fn total_stamps(&self) -> usize {
        self.warmup + self.stamps
    }
}

/// Metrics of one reported stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampReport {
    pub seed: u64,
    pub timestamp: usize,
    pub je: f64,
    pub rmse_now: f64,
    /// `(horizon, rmse)` for every scored horizon.
    pub rmse_forecast: Vec<(usize, f64)>,
    pub rmse_knn: Option<f64>,
    /// Woken devices over all devices.
    pub wake_fraction: f64,
    /// Candidates before MIDS pruning over all devices.
    pub candidate_fraction: f64,
    /// Candidates over devices whose priors exceed σ.
    pub candidate_fraction_above_sigma: f64,
    pub ground_energy: f64,
    pub aerial_energy: f64,
}

impl StampReport {
    pub fn rmse_at(&self, horizon: usize) -> Option<f64> {
        self.rmse_forecast.iter().find(|(h, _)| *h == horizon).map(|x| x.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stamps: Vec<StampReport>,
    /// Energy events of the reported stamps, `(stamp, event)`.
    pub events: Vec<(usize, EnergyEvent)>,
    /// Ground energy of the same stamps with every device awake.
    pub all_awake_energy: f64,
}

impl RunReport {
    pub fn ground_energy(&self) -> f64 {
        self.stamps.iter().map(|s| s.ground_energy).sum()
    }

    pub fn aerial_energy(&self) -> f64 {
        self.stamps.iter().map(|s| s.aerial_energy).sum()
    }

    /// Ground energy relative to the always-awake deployment.
    pub fn normalized_consumption(&self) -> f64 {
        self.ground_energy() / self.all_awake_energy
    }

    pub fn mean_rmse(&self) -> f64 {
        self.stamps.iter().map(|s| s.rmse_now).sum::<f64>() / self.stamps.len() as f64
    }

    pub fn mean_rmse_at(&self, horizon: usize) -> Option<f64> {
        let v: Option<Vec<f64>> = self.stamps.iter().map(|s| s.rmse_at(horizon)).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_wake_fraction(&self) -> f64 {
        self.stamps.iter().map(|s| s.wake_fraction).sum::<f64>() / self.stamps.len() as f64
    }
}

/// The part of a run that does not depend on the wake-up threshold: the
/// field, deployment, regions, aerial priors and sensor noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub field: SyntheticField,
    pub cubes: Vec<Cube>,
    /// Cube index of every device.
    pub device_cubes: Vec<usize>,
    pub positions: Vec<[f64; 2]>,
    pub pois: Vec<Vec<Poi>>,
    pub regions: Vec<RegionMap>,
    /// AQI scale per region per stamp, from the camera classifier.
    pub scales: Vec<Vec<AqiScale>>,
    /// Aerial energy events per stamp.
    pub aerial: Vec<Vec<EnergyEvent>>,
    /// Multiplicative noise factor per stamp per device.
    pub noise: Vec<Vec<f64>>,
    /// Node features per stamp per cube.
    pub features: Vec<Vec<NodeFeatures>>,
}

/// Distinct ground-level cubes for `n` devices, ascending.
pub fn deploy_devices(cubes: &[Cube], n: usize, seed: u64) -> Result<Vec<usize>> {
    let ground: Vec<usize> = (0..cubes.len()).filter(|&c| cubes[c].index[2] == 0).collect();
    if n > ground.len() {
        return Err(Error::input(format!("{n} devices but only {} ground-level cubes", ground.len())));
    }
    let mut rng = rng_for(seed, 5);
    let mut out: Vec<usize> = sample(&mut rng, ground.len(), n).into_iter().map(|i| ground[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Random-walk weather shared by all cubes of a stamp.
pub fn synthetic_weather(cubes: &[Cube], stamps: usize, interval: f64, seed: u64) -> Vec<Vec<NodeFeatures>> {
    let rng = &mut rng_for(seed, 6);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut weather = 0u32;
    let mut wind_speed: f64 = rng.random_range(1.0..6.0);
    let mut wind_dir: f64 = rng.random_range(0.0..360.0);
    let mut humidity: f64 = rng.random_range(40.0..80.0);
    let mut temperature: f64 = rng.random_range(10.0..25.0);
    (0..stamps)
        .map(|t| {
            if t > 0 {
                if rng.random::<f64>() < 0.15 {
                    weather = rng.random_range(0..4);
                }
                wind_speed = (wind_speed + 0.5 * normal.sample(rng)).clamp(0.0, 15.0);
                wind_dir = (wind_dir + 15.0 * normal.sample(rng)).rem_euclid(360.0);
                humidity = (humidity + 3.0 * normal.sample(rng)).clamp(0.0, 100.0);
                temperature += 0.7 * normal.sample(rng);
            }
            cubes
                .iter()
                .map(|c| NodeFeatures {
                    weather,
                    wind_speed,
                    wind_direction: wind_dir,
                    humidity,
                    temperature,
                    ..NodeFeatures::at_cube(c, t as f64 * interval)
                })
                .collect()
        })
        .collect()
}

/// Mean ground-truth AQI of the cubes whose column falls in each region.
fn region_means(field: &SyntheticField, stamp: usize, cubes: &[Cube], regions: &RegionMap) -> Vec<f64> {
    let mut sum = vec![0.0; regions.regions.len()];
    let mut count = vec![0usize; regions.regions.len()];
    for (c, cube) in cubes.iter().enumerate() {
        let r = regions.region_at([cube.center[0], cube.center[1]]);
        sum[r] += field.at(stamp, c);
        count[r] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect()
}

/// Builds the threshold-independent part of a run.
pub fn prepare_world(scenario: &SimScenario, model: &Cnn3dModel, seed: u64) -> Result<World> {
    scenario.validate()?;
    let total = scenario.total_stamps();
    let field = gen_field(&scenario.field, total + scenario.max_horizon(), seed)?;
    let cubes = scenario.field.cubes();
    let mut rng = rng_for(seed, 4);
    // devices sit on ground-level cubes
    let device_cubes = deploy_devices(&cubes, scenario.devices, seed)?;
    let positions: Vec<[f64; 2]> = device_cubes
        .iter()
        .map(|&c| [cubes[c].center[0], cubes[c].center[1]])
        .collect();
    let [w, h] = scenario.field.extent();
    let grid = Grid::new(scenario.field.dims[0], scenario.field.dims[1], scenario.field.cube_size[0])?;
    let scenes = scenario.vision.scenes();
    let noise_dist = Normal::new(0.0, scenario.sensor_noise.max(0.0)).expect("finite std");
    let mut pois = Vec::with_capacity(total);
    let mut regions = Vec::with_capacity(total);
    let mut scales = Vec::with_capacity(total);
    let mut aerial = Vec::with_capacity(total);
    let mut noise = Vec::with_capacity(total);
    for t in 0..total {
        let stamp_pois: Vec<Poi> = (0..scenario.pois)
            .map(|id| Poi {
                id,
                position: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
            })
            .collect();
        let map = divide(&positions, &stamp_pois, &grid, 0)?;
        let means = region_means(&field, t, &cubes, &map);
        let stamp_scales = means
            .iter()
            .map(|&aqi| {
                let scene = &scenes[rng.random_range(0..scenes.len())];
                let (img, _) = gen_haze_image(scene, aqi, &scenario.vision.transmission);
                model.infer_scale(&img)
            })
            .collect::<Result<Vec<_>>>()?;
        let centers: Vec<[f64; 2]> = map.regions.iter().map(|r| r.center).collect();
        aerial.push(aerial_events(&scenario.energy, scenario.uav, [0.0, 0.0], &centers));
        noise.push((0..scenario.devices).map(|_| 1.0 + noise_dist.sample(&mut rng)).collect());
        pois.push(stamp_pois);
        regions.push(map);
        scales.push(stamp_scales);
    }
    let features = synthetic_weather(&cubes, field.stamps(), scenario.interval, seed);
    Ok(World {
        seed,
        field,
        cubes,
        device_cubes,
        positions,
        pois,
        regions,
        scales,
        aerial,
        noise,
        features,
    })
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Runs the ground side of a scenario over a prepared world with JE
/// threshold `threshold`.
pub fn run_world(scenario: &SimScenario, world: &World, threshold: f64) -> Result<RunReport> {
    let n_dev = scenario.devices;
    let n_cubes = world.cubes.len();
    let bins = AqiBins::new(scenario.graph.bin_width)?;
    let wake = WakeConfig {
        threshold,
        ..scenario.wake
    };
    // persisted layers: labels per cube (measured or inferred)
    let mut history: Vec<(Vec<Option<Label>>, Vec<Option<Vec<f64>>>)> = Vec::new();
    let mut samples: Vec<crate::sim::StSample> = Vec::new();
    let mut next_prediction: Option<Vec<f64>> = None;
    let mut theta = None;
    let mut report = RunReport {
        stamps: Vec::new(),
        events: Vec::new(),
        all_awake_energy: (scenario.stamps * n_dev) as f64 * scenario.energy.awake_cost(),
    };
    for t in 0..scenario.total_stamps() {
        let reported = t >= scenario.warmup;
        let regions = &world.regions[t];
        let scales = &world.scales[t];
        let device_region = regions.device_regions(n_dev);
        let truth = &world.field.values[t];
        // ground pass
        let (woken, candidates, above_sigma) = if reported && !scenario.wake_all {
            let priors = (0..n_dev)
                .map(|d| {
                    let scale = scales[device_region[d]];
                    let pre = next_prediction.as_ref().map_or(scale.midpoint(), |p| p[world.device_cubes[d]]);
                    DevicePriors::new(d, scale, pre.clamp(0.0, AQI_MAX))
                })
                .collect::<Result<Vec<_>>>()?;
            let plan = plan(regions, &priors, &world.positions, &wake)?;
            let candidates: usize = plan.regions.iter().map(|r| r.candidates.len()).sum();
            let above = priors
                .iter()
                .filter(|p| p.pre_inferred.max(p.scale.x_max) > wake.sigma)
                .count();
            (plan.wake, candidates, above)
        } else {
            ((0..n_dev).collect(), n_dev, n_dev)
        };
        let mut awake = vec![false; n_dev];
        for &d in &woken {
            awake[d] = true;
        }
        let mut labels: Vec<Option<Label>> = vec![None; n_cubes];
        for d in 0..n_dev {
            if awake[d] {
                let c = world.device_cubes[d];
                let aqi = (truth[c] * world.noise[t][d]).clamp(0.0, AQI_MAX);
                labels[c] = Some(Label::measured(aqi));
                samples.push(StSample {
                    position: world.cubes[c].center,
                    time: t as f64 * scenario.interval,
                    aqi,
                });
            }
        }
        // graph inference
        let first = (t + 1).saturating_sub(scenario.graph.layers);
        let mut layers: Vec<LayerInput> = (first..t)
            .map(|s| LayerInput {
                timestamp: s as f64 * scenario.interval,
                features: world.features[s].clone(),
                labels: history[s].0.clone(),
                soft: history[s].1.clone(),
            })
            .collect();
        layers.push(LayerInput {
            timestamp: t as f64 * scenario.interval,
            features: world.features[t].clone(),
            labels: labels.clone(),
            soft: Vec::new(),
        });
        let (estimate, soft, forecasts) = match StGraph::build(world.cubes.clone(), layers, scenario.graph.radius, bins) {
            Ok(mut graph) => {
                let cube_scales: Vec<Option<AqiScale>> = world
                    .cubes
                    .iter()
                    .map(|c| Some(scales[regions.region_at([c.center[0], c.center[1]])]))
                    .collect();
                if scenario.condition {
                    graph.set_layer_scales(graph.num_layers() - 1, &cube_scales)?;
                }
                if let Some(theta) = theta {
                    graph.set_theta(theta);
                }
                let map: InferredMap = graph
                    .infer_current(&scenario.graph.learn, &scenario.graph.solve)
                    .map_err(|e| at(t, e))?;
                theta = Some(graph.theta);
                let horizon = if reported { scenario.max_horizon() } else { 1 };
                let forecasts = graph
                    .forecast(horizon, scenario.interval, &scenario.graph.solve)
                    .map_err(|e| at(t, e))?;
                let soft = map.distributions.into_iter().map(Some).collect();
                (map.aqi, soft, forecasts)
            }
            // nothing measured anywhere yet: fall back to the aerial midpoints
            Err(Error::State(_)) => {
                let mid: Vec<f64> = world
                    .cubes
                    .iter()
                    .map(|c| scales[regions.region_at([c.center[0], c.center[1]])].midpoint())
                    .collect();
                (mid.clone(), vec![None; n_cubes], vec![mid; scenario.max_horizon()])
            }
            Err(e) => return Err(at(t, e)),
        };
        let persisted = (0..n_cubes)
            .map(|c| {
                labels[c].or(Some(Label {
                    aqi: estimate[c],
                    provenance: Provenance::Inferred,
                }))
            })
            .collect();
        history.push((persisted, soft));
        next_prediction = forecasts.first().cloned();
        if !reported {
            continue;
        }
        let rmse_forecast = scenario
            .horizons
            .iter()
            .map(|&h| (h, rmse(&forecasts[h - 1], &world.field.values[t + h])))
            .collect();
        let rmse_knn = if scenario.baseline {
            let predicted = (0..n_cubes)
                .map(|c| match labels[c] {
                    Some(l) => Ok(l.aqi),
                    None => st_knn(
                        &samples,
                        world.cubes[c].center,
                        t as f64 * scenario.interval,
                        scenario.knn.k,
                        scenario.knn.meters_per_hour,
                        scenario.knn.power,
                    ),
                })
                .collect::<Result<Vec<_>>>()?;
            Some(rmse(&predicted, truth))
        } else {
            None
        };
        let mut ground = 0.0;
        for d in 0..n_dev {
            let events = if awake[d] {
                vec![
                    EnergyEvent::Sense {
                        device: d,
                        joules: scenario.energy.e_sense,
                    },
                    EnergyEvent::Upload {
                        device: d,
                        joules: scenario.energy.e_upload,
                    },
                ]
            } else {
                vec![EnergyEvent::Sleep {
                    device: d,
                    joules: scenario.energy.e_sleep,
                }]
            };
            for e in events {
                ground += e.joules();
                report.events.push((t, e));
            }
        }
        let mut aerial = 0.0;
        for e in &world.aerial[t] {
            aerial += e.joules();
            report.events.push((t, *e));
        }
        report.stamps.push(StampReport {
            seed: world.seed,
            timestamp: t,
            je: threshold,
            rmse_now: rmse(&estimate, truth),
            rmse_forecast,
            rmse_knn,
            wake_fraction: woken.len() as f64 / n_dev as f64,
            candidate_fraction: candidates as f64 / n_dev as f64,
            candidate_fraction_above_sigma: if above_sigma > 0 {
                candidates as f64 / above_sigma as f64
            } else {
                1.0
            },
            ground_energy: ground,
            aerial_energy: aerial,
        });
    }
    Ok(report)
}

fn at(timestamp: usize, e: Error) -> Error {
    Error::AtTimestamp {
        timestamp,
        source: Box::new(e),
    }
}

/// Full run at the scenario's own seed and threshold.
pub fn run_scenario(scenario: &SimScenario, model: &Cnn3dModel) -> Result<RunReport> {
    let world = prepare_world(scenario, model, scenario.seed)?;
    run_world(scenario, &world, scenario.wake.threshold)
}

/// Runs every threshold on every seed, sharing the threshold-independent
/// world per seed. Result is indexed `[seed][threshold]`.
pub fn run_sweep(scenario: &SimScenario, model: &Cnn3dModel, thresholds: &[f64], seeds: &[u64]) -> Result<Vec<Vec<RunReport>>> {
    seeds
        .iter()
        .map(|&seed| {
            let world = prepare_world(scenario, model, seed)?;
            thresholds.iter().map(|&je| run_world(scenario, &world, je)).collect()
        })
        .collect()
}

/// Report rows in the CSV layout `seed,timestamp,je,rmse_now,rmse_1h,...`.
pub const REPORT_HEADER: [&str; 10] = [
    "seed",
    "timestamp",
    "je",
    "rmse_now",
    "rmse_1h",
    "rmse_3h",
    "rmse_10h",
    "wake_fraction",
    "ground_energy",
    "aerial_energy",
];
