use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "aqisense", version, about = "Hybrid aerial/ground air-quality sensing pipeline")]
pub struct Cli {
    /// Config file (`[section] key = value`); defaults to $AQISENSE_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Haze feature extraction.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Train or apply the 3D CNN AQI-scale classifier.
    #[command(subcommand)]
    Cnn(CnnCmd),
    /// Spatio-temporal graph inference and forecasting.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// POI-based region division.
    #[command(subcommand)]
    Regions(RegionsCmd),
    /// Ground-device wake-up planning.
    #[command(subcommand)]
    Wakeup(WakeupCmd),
    /// End-to-end simulation runs.
    #[command(subcommand)]
    Simulate(SimulateCmd),
    /// Synthetic data generation.
    #[command(subcommand)]
    Dataset(DatasetCmd),
}

#[derive(Debug, Subcommand)]
pub enum FeaturesCmd {
    /// Six-feature stack of one image as a flat tensor `[height, width, 6]`.
    Extract {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Working image side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum CnnCmd {
    /// Train from a JSON manifest of labelled images.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        /// Interior class boundaries, comma separated (default: 10 equal classes).
        #[arg(long, value_delimiter = ',')]
        bounds: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the AQI scale of one image as JSON.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, alias = "img")]
        image: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum GraphCmd {
    /// Infer the newest layer of a history CSV and optionally forecast.
    Infer {
        #[arg(long)]
        history: PathBuf,
        /// Cube grid as `nx,ny,nz`.
        #[arg(long, value_parser = triple::<usize>)]
        dims: [usize; 3],
        /// Cube size in metres as `sx,sy,sz`.
        #[arg(long, value_parser = triple::<f64>)]
        cube_size: Option<[f64; 3]>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
        /// Forecast this many stamps ahead into `--forecast-out`.
        #[arg(long, requires = "forecast_out")]
        horizon: Option<usize>,
        #[arg(long)]
        forecast_out: Option<PathBuf>,
        /// Hours between stamps for forecast timestamps.
        #[arg(long, default_value_t = 1.0)]
        interval: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum RegionsCmd {
    Divide {
        #[arg(long)]
        devices: PathBuf,
        #[arg(long)]
        pois: PathBuf,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        resolution: Option<f64>,
        #[arg(long)]
        lloyd: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum WakeupCmd {
    Plan {
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        /// JE threshold.
        #[arg(long)]
        je: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Proximity radius in metres.
        #[arg(long)]
        r: Option<f64>,
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum SimulateCmd {
    Run {
        /// Scenario JSON; missing keys take defaults.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Threshold sweep `je=start:stop:step`.
        #[arg(long)]
        sweep: Option<String>,
        /// Number of consecutive seeds starting at the scenario seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        seed: Option<u64>,
        /// Pre-trained vision model; trained from the scenario otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    /// Hazy scene images with AQI labels plus `manifest.json`.
    Haze(HazeArgs),
    /// Synthetic field history with measurements at random device cubes.
    Field(FieldArgs),
}

#[derive(Debug, Args)]
pub struct HazeArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub stamps: usize,
    #[arg(long, default_value_t = 100)]
    pub devices: usize,
    /// Also write device positions here.
    #[arg(long)]
    pub devices_out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn triple<T: std::str::FromStr + Copy>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("'{p}' is not a number")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected three comma-separated values, got '{s}'"))
}
