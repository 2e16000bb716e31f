//! Hybrid aerial/ground air-quality sensing.
//!
//! The crate is organised along the sensing pipeline:
//!
//! * [`imaging`] – raster types, colour conversions and the guided filter.
//! * [`features`] – the six haze-relevant feature maps and the stacked
//!   feature tensor fed to the classifier.
//! * [`cnn3d`] – a small 3D convolutional classifier mapping a feature stack
//!   to an AQI scale interval.
//! * [`stgraph`] – the multi-layer spatio-temporal graph, harmonic inference
//!   of per-cube AQI distributions, entropy-driven weight learning and
//!   forecasting.
//! * [`regions`] – POI clustering and the weighted Voronoi region raster.
//! * [`wakeup`] – joint-estimation-error scoring and the greedy independent
//!   dominating set that picks which ground devices wake.
//! * [`sim`] – synthetic fields, haze imagery, energy accounting and
//!   end-to-end scenario runs.
//! * [`formats`] – on-disk codecs (flat tensors, CSV, JSON, config files).

pub mod cnn3d;
pub mod error;
pub mod features;
pub mod formats;
pub mod imaging;
pub mod regions;
pub mod sim;
pub mod stgraph;
pub mod wakeup;

pub use error::{Error, Result};

/// Upper end of the AQI index range.
pub const AQI_MAX: f64 = 500.0;

/// A closed interval `[x_min, x_max]` of plausible AQI values.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AqiScale {
    pub x_min: f64,
    pub x_max: f64,
}

impl AqiScale {
    pub fn new(x_min: f64, x_max: f64) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_min < 0.0 || x_max > AQI_MAX || x_min > x_max
        {
            return Err(Error::input(format!(
                "AQI scale [{x_min}, {x_max}] must satisfy 0 <= x_min <= x_max <= {AQI_MAX}"
            )));
        }
        Ok(Self { x_min, x_max })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.x_min + self.x_max)
    }

    pub fn contains(&self, aqi: f64) -> bool {
        aqi >= self.x_min && aqi <= self.x_max
    }
}
