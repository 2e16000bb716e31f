use std::error::Error;
use std::path::Path;

use aqisense::cnn3d::{classes_from_bounds, equal_classes, Architecture, Cnn3dModel};
use aqisense::features::{extract_stack, FeatureConfig};
use aqisense::formats::{
    device_positions, device_priors, forecast_rows, history_layers, map_rows, pois, read_csv_file, read_json,
    report_csv, write_csv_file, write_json, write_text, Config, FlatTensor, HistoryRow, Manifest, ManifestEntry,
    PointRow, PriorRow, RegionsFile, HISTORY_HEADER, MAP_HEADER, POINT_HEADER, PRIORS_HEADER,
};
use aqisense::imaging::HazeImage;
use aqisense::regions::{divide, Grid};
use aqisense::sim::{
    deploy_devices, gen_field, run_sweep, synthetic_weather, train_vision_model, vision_dataset, FieldParams,
    SimScenario, VisionConfig,
};
use aqisense::stgraph::{AqiBins, StGraph};
use aqisense::wakeup::{plan, WakeConfig};

use crate::cli::{CnnCmd, Command, DatasetCmd, FeaturesCmd, FieldArgs, GraphCmd, HazeArgs, RegionsCmd, SimulateCmd, WakeupCmd};

pub type CmdResult = Result<(), Box<dyn Error>>;

pub fn run(command: Command, config: &Config) -> CmdResult {
    match command {
        Command::Features(FeaturesCmd::Extract { image, out, size }) => features_extract(&image, &out, size, config),
        Command::Cnn(CnnCmd::Train {
            manifest,
            out,
            epochs,
            size,
            bounds,
            seed,
        }) => cnn_train(&manifest, &out, epochs, size, bounds, seed, config),
        Command::Cnn(CnnCmd::Infer { model, image }) => cnn_infer(&model, &image),
        Command::Graph(GraphCmd::Infer {
            history,
            dims,
            cube_size,
            out,
            radius,
            horizon,
            forecast_out,
            interval,
        }) => {
            let cube_size = cube_size.unwrap_or([20.0, 20.0, 10.0]);
            let forecast = horizon.zip(forecast_out);
            graph_infer(&history, dims, cube_size, &out, radius, forecast.as_ref().map(|(h, p)| (*h, p.as_path())), interval, config)
        }
        Command::Regions(RegionsCmd::Divide {
            devices,
            pois,
            cols,
            rows,
            resolution,
            lloyd,
            out,
        }) => regions_divide(&devices, &pois, cols, rows, resolution, lloyd, &out, config),
        Command::Wakeup(WakeupCmd::Plan {
            regions,
            priors,
            je,
            sigma,
            r,
            out,
        }) => {
            let wake = WakeConfig {
                threshold: je.unwrap_or(config.wakeup.threshold),
                sigma: sigma.unwrap_or(config.wakeup.sigma),
                radius: r.unwrap_or(config.wakeup.radius),
            };
            wakeup_plan(&regions, &priors, &wake, &out)
        }
        Command::Simulate(SimulateCmd::Run {
            scenario,
            out,
            sweep,
            seeds,
            seed,
            model,
        }) => simulate(scenario.as_deref(), &out, sweep.as_deref(), seeds, seed, model.as_deref()),
        Command::Dataset(DatasetCmd::Haze(args)) => dataset_haze(&args, config),
        Command::Dataset(DatasetCmd::Field(args)) => dataset_field(&args, config),
    }
}

fn features_extract(image: &Path, out: &Path, size: Option<usize>, config: &Config) -> CmdResult {
    let features = FeatureConfig {
        size: size.unwrap_or(config.features.size),
        ..config.features
    };
    features.validate()?;
    let img = HazeImage::load(image)?;
    let stack = extract_stack(&img, &features)?;
    let tensor = FlatTensor::new(
        vec![stack.height() as u32, stack.width() as u32, 6],
        stack.interleaved().into_iter().map(|v| v as f32).collect(),
    )?;
    tensor.write(out)?;
    log::info!("wrote {}x{}x6 feature tensor to {}", stack.height(), stack.width(), out.display());
    Ok(())
}

fn cnn_train(
    manifest: &Path,
    out: &Path,
    epochs: Option<usize>,
    size: Option<usize>,
    bounds: Option<Vec<f64>>,
    seed: Option<u64>,
    config: &Config,
) -> CmdResult {
    let entries: Manifest = read_json(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let features = FeatureConfig {
        size: size.unwrap_or(config.features.size),
        ..config.features
    };
    features.validate()?;
    let arch = Architecture {
        classes: match bounds {
            Some(b) => classes_from_bounds(&b)?,
            None => equal_classes(10),
        },
        features,
        ..Architecture::default()
    };
    let mut stacks = Vec::new();
    let mut labels = Vec::new();
    for (path, aqi) in entries.resolved(base) {
        stacks.push(extract_stack(&HazeImage::load(&path)?, &arch.features)?);
        labels.push(aqi);
    }
    let seed = seed.unwrap_or(config.seed);
    let train = aqisense::cnn3d::TrainConfig {
        epochs: epochs.unwrap_or(config.train.epochs),
        seed,
        ..config.train
    };
    let mut model = Cnn3dModel::init(arch, seed)?;
    let report = model.train(&stacks, &labels, &train)?;
    std::fs::write(out, model.to_bytes()).map_err(|e| format!("{}: {e}", out.display()))?;
    println!(
        "trained on {} images: final loss {:.4}, train accuracy {:.3}",
        labels.len(),
        report.loss.last().copied().unwrap_or(f64::NAN),
        report.accuracy.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Cnn3dModel, Box<dyn Error>> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Cnn3dModel::from_bytes(&bytes).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn cnn_infer(model: &Path, image: &Path) -> CmdResult {
    let model = load_model(model)?;
    let scale = model.infer_scale(&HazeImage::load(image)?)?;
    println!("{}", serde_json::to_string(&scale)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn graph_infer(
    history: &Path,
    dims: [usize; 3],
    cube_size: [f64; 3],
    out: &Path,
    radius: Option<f64>,
    forecast: Option<(usize, &Path)>,
    interval: f64,
    config: &Config,
) -> CmdResult {
    let rows: Vec<HistoryRow> = read_csv_file(history, &HISTORY_HEADER)?;
    let (cubes, mut layers) = history_layers(&rows, dims, cube_size)?;
    if layers.is_empty() {
        return Err(format!("{}: no history rows", history.display()).into());
    }
    let keep = config.graph.layers.min(layers.len());
    layers.drain(..layers.len() - keep);
    let bins = AqiBins::new(config.graph.bin_width)?;
    let mut graph = StGraph::build(cubes.clone(), layers, radius.unwrap_or(config.graph.radius), bins)?;
    let map = graph.infer_current(&config.graph.learn, &config.graph.solve)?;
    write_csv_file(out, &map_rows(&map, &cubes), &MAP_HEADER)?;
    if let Some((horizon, path)) = forecast {
        let layers = graph.forecast(horizon, interval, &config.graph.solve)?;
        write_csv_file(path, &forecast_rows(&layers, &cubes, map.timestamp, interval), &MAP_HEADER)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn regions_divide(
    devices: &Path,
    poi_file: &Path,
    cols: usize,
    rows: usize,
    resolution: Option<f64>,
    lloyd: Option<usize>,
    out: &Path,
    config: &Config,
) -> CmdResult {
    let positions = device_positions(&read_csv_file::<PointRow>(devices, &POINT_HEADER)?)?;
    let sites = pois(&read_csv_file::<PointRow>(poi_file, &POINT_HEADER)?);
    let grid = Grid::new(cols, rows, resolution.unwrap_or(config.regions.resolution))?;
    let map = divide(&positions, &sites, &grid, lloyd.unwrap_or(config.regions.lloyd_iters))?;
    write_json(out, &RegionsFile::new(&map, &positions))?;
    println!("{} regions, {} dropped POIs, {} steps", map.regions.len(), map.dropped.len(), map.steps);
    Ok(())
}

fn wakeup_plan(regions: &Path, priors: &Path, wake: &WakeConfig, out: &Path) -> CmdResult {
    let file: RegionsFile = read_json(regions)?;
    let positions = file.devices.clone();
    let map = file.into_map()?;
    let priors = device_priors(&read_csv_file::<PriorRow>(priors, &PRIORS_HEADER)?)?;
    let result = plan(&map, &priors, &positions, wake)?;
    write_json(out, &result)?;
    println!("wake {} of {} devices", result.wake.len(), priors.len());
    Ok(())
}

/// Parses `je=start:stop:step` into the inclusive list of thresholds.
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>, String> {
    let bad = || format!("sweep '{spec}' must look like je=start:stop:step");
    let range = spec.strip_prefix("je=").ok_or_else(bad)?;
    let parts: Vec<f64> = range
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

fn simulate(
    scenario: Option<&Path>,
    out: &Path,
    sweep: Option<&str>,
    seeds: u64,
    seed: Option<u64>,
    model: Option<&Path>,
) -> CmdResult {
    let mut scenario: SimScenario = match scenario {
        Some(p) => read_json(p)?,
        None => SimScenario::default(),
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    scenario.validate()?;
    if seeds == 0 {
        return Err("--seeds must be >= 1".into());
    }
    let thresholds = match sweep {
        Some(s) => parse_sweep(s)?,
        None => vec![scenario.wake.threshold],
    };
    let model = match model {
        Some(p) => load_model(p)?,
        None => {
            log::info!("training the vision model");
            train_vision_model(&scenario.vision)?.0
        }
    };
    let seed_list: Vec<u64> = (0..seeds).map(|i| scenario.seed + i).collect();
    let runs = run_sweep(&scenario, &model, &thresholds, &seed_list)?;
    let stamps: Vec<_> = runs.iter().flatten().flat_map(|r| r.stamps.iter().cloned()).collect();
    write_text(out, &report_csv(&stamps)?)?;
    println!("je,normalized_consumption,mean_rmse");
    for (i, je) in thresholds.iter().enumerate() {
        let n = runs.len() as f64;
        let consumption: f64 = runs.iter().map(|r| r[i].normalized_consumption()).sum::<f64>() / n;
        let rmse: f64 = runs.iter().map(|r| r[i].mean_rmse()).sum::<f64>() / n;
        println!("{je:.3},{consumption:.4},{rmse:.3}");
    }
    Ok(())
}

fn dataset_haze(args: &HazeArgs, config: &Config) -> CmdResult {
    let seed = args.seed.unwrap_or(config.seed);
    let vision = VisionConfig {
        size: args.size,
        seed,
        ..VisionConfig::default()
    };
    std::fs::create_dir_all(&args.out_dir).map_err(|e| format!("{}: {e}", args.out_dir.display()))?;
    let mut images = Vec::with_capacity(args.count);
    for (i, (img, aqi)) in vision_dataset(&vision, args.count, seed)?.into_iter().enumerate() {
        let name = format!("haze_{i:04}.ppm");
        img.save_ppm(args.out_dir.join(&name))?;
        images.push(ManifestEntry { path: name.into(), aqi });
    }
    write_json(&args.out_dir.join("manifest.json"), &Manifest { images })?;
    Ok(())
}

fn dataset_field(args: &FieldArgs, config: &Config) -> CmdResult {
    let seed = args.seed.unwrap_or(config.seed);
    let params = FieldParams::default();
    let field = gen_field(&params, args.stamps, seed)?;
    let cubes = params.cubes();
    let devices = deploy_devices(&cubes, args.devices, seed)?;
    let mut measured = vec![false; cubes.len()];
    for &c in &devices {
        measured[c] = true;
    }
    let weather = synthetic_weather(&cubes, args.stamps, 1.0, seed);
    let mut rows = Vec::with_capacity(args.stamps * cubes.len());
    for (t, layer) in weather.iter().enumerate() {
        for (c, cube) in cubes.iter().enumerate() {
            let f = layer[c];
            rows.push(HistoryRow {
                timestamp: f.timestamp,
                i: cube.index[0],
                j: cube.index[1],
                k: cube.index[2],
                aqi: measured[c].then(|| field.at(t, c)),
                weather: f.weather,
                wind_speed: f.wind_speed,
                wind_dir: f.wind_direction,
                humidity: f.humidity,
                temperature: f.temperature,
            });
        }
    }
    write_csv_file(&args.out, &rows, &HISTORY_HEADER)?;
    if let Some(path) = &args.devices_out {
        let points: Vec<PointRow> = devices
            .iter()
            .enumerate()
            .map(|(id, &c)| PointRow {
                id,
                x: cubes[c].center[0],
                y: cubes[c].center[1],
            })
            .collect();
        write_csv_file(path, &points, &POINT_HEADER)?;
    }
    let [nx, ny, nz] = params.dims;
    let [sx, sy, sz] = params.cube_size;
    println!("grid {nx},{ny},{nz} cube size {sx},{sy},{sz}");
    Ok(())
}
