//! The six haze-relevant feature maps and the stacked network input.

use serde::{Deserialize, Serialize};

use crate::imaging::{
    estimate_atmospheric_light, guided_filter, resize_bilinear, rgb_to_hsv, rgb_to_lab, AtmosphericLight, GrayMap,
    HazeImage,
};
use crate::{Error, Result};

/// Number of feature layers in a [`FeatureStack`].
pub const NUM_FEATURES: usize = 6;

/// Largest chroma reachable by an sRGB colour (pure blue).
pub const MAX_SRGB_CHROMA: f64 = 133.81;

/// Side lengths of the feature patch `Ω` and the inner contrast window `Ω_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub patch: usize,
    pub inner: usize,
}

impl PatchSpec {
    pub fn new(patch: usize, inner: usize) -> Result<Self> {
        if patch % 2 == 0 || inner % 2 == 0 || inner == 0 || inner > patch {
            return Err(Error::input(format!(
                "patch sizes must be odd with patch >= inner >= 1, got {patch}/{inner}"
            )));
        }
        Ok(Self { patch, inner })
    }

    /// Scales the sizes from a 128-pixel reference to `side` pixels, keeping
    /// both odd and at least 3.
    pub fn scaled_to(self, side: usize) -> Self {
        let scale = |v: usize| {
            let s = (v as f64 * side as f64 / 128.0).round() as usize;
            let s = s.max(3);
            if s % 2 == 0 {
                s + 1
            } else {
                s
            }
        };
        let patch = scale(self.patch);
        Self {
            patch,
            inner: scale(self.inner).min(patch),
        }
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { patch: 15, inner: 5 }
    }
}

/// Linear depth model `d = θ0 + θ1 v + θ2 s + ε` of the colour attenuation prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorAttenuationParams {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub sigma: f64,
}

impl Default for ColorAttenuationParams {
    fn default() -> Self {
        Self {
            theta0: 0.121779,
            theta1: 0.959710,
            theta2: -0.780245,
            sigma: 0.041337,
        }
    }
}

impl ColorAttenuationParams {
    fn depth(&self, v: f64, s: f64) -> f64 {
        self.theta0 + self.theta1 * v + self.theta2 * s
    }

    /// Range of `d` over `v, s ∈ [0, 1]`.
    pub fn depth_bounds(&self) -> (f64, f64) {
        let lo = self.theta0 + self.theta1.min(0.0) + self.theta2.min(0.0);
        let hi = self.theta0 + self.theta1.max(0.0) + self.theta2.max(0.0);
        (lo, hi)
    }
}

/// Guided-filter settings for dark-channel refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidedFilterSpec {
    pub radius: usize,
    pub epsilon: f64,
}

impl Default for GuidedFilterSpec {
    fn default() -> Self {
        Self { radius: 40, epsilon: 1e-3 }
    }
}

/// How [`extract_stack`] maps raw feature values into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// Divide each layer by its theoretical value range. Keeps absolute haze
    /// levels comparable across images.
    #[default]
    Fixed,
    /// Stretch each layer to span `[0, 1]`; constant layers become 0.
    MinMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Side of the square image the features are computed on.
    pub size: usize,
    /// Patch sizes at the 128-pixel reference; scaled with `size`.
    pub patches: PatchSpec,
    /// Guided filter at the 128-pixel reference; the radius scales with `size`.
    pub guided: GuidedFilterSpec,
    pub light_fraction: f64,
    pub attenuation: ColorAttenuationParams,
    pub rescale: RescaleMode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            size: 128,
            patches: PatchSpec::default(),
            guided: GuidedFilterSpec::default(),
            light_fraction: 0.001,
            attenuation: ColorAttenuationParams::default(),
            rescale: RescaleMode::Fixed,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 3 {
            return Err(Error::input(format!("feature size {} must be >= 3", self.size)));
        }
        PatchSpec::new(self.patches.patch, self.patches.inner)?;
        if self.guided.radius < 1 || !(self.guided.epsilon > 0.0) {
            return Err(Error::input("guided filter needs radius >= 1 and epsilon > 0"));
        }
        if !(self.light_fraction > 0.0 && self.light_fraction <= 1.0) {
            return Err(Error::input(format!("light fraction {} must be in (0, 1]", self.light_fraction)));
        }
        if !(self.attenuation.sigma >= 0.0) {
            return Err(Error::input("color attenuation sigma must be >= 0"));
        }
        Ok(())
    }

    pub fn effective_patches(&self) -> PatchSpec {
        if self.size == 128 {
            self.patches
        } else {
            self.patches.scaled_to(self.size)
        }
    }

    pub fn effective_guided(&self) -> GuidedFilterSpec {
        let radius = ((self.guided.radius as f64 * self.size as f64 / 128.0).round() as usize).max(1);
        GuidedFilterSpec {
            radius,
            epsilon: self.guided.epsilon,
        }
    }
}

/// Six equally sized feature layers, each in `[0, 1]`, ordered
/// dark channel, contrast, saturation, attenuation, hue disparity, chroma.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    layers: Vec<GrayMap>,
}

impl FeatureStack {
    pub fn new(layers: Vec<GrayMap>) -> Result<Self> {
        if layers.len() != NUM_FEATURES {
            return Err(Error::input(format!("a feature stack has 6 layers, got {}", layers.len())));
        }
        if layers.iter().any(|l| !l.same_dims(&layers[0])) {
            return Err(Error::input("feature layers differ in size"));
        }
        if layers.iter().flat_map(|l| l.data()).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("feature values must lie in [0, 1]"));
        }
        Ok(Self { layers })
    }

    /// Builds a stack from `height × width × 6` values, feature index fastest.
    pub fn from_interleaved(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height * NUM_FEATURES {
            return Err(Error::input(format!(
                "{width}x{height} stack needs {} values, got {}",
                width * height * NUM_FEATURES,
                values.len()
            )));
        }
        let layers = (0..NUM_FEATURES)
            .map(|f| GrayMap::from_fn(width, height, |x, y| values[(y * width + x) * NUM_FEATURES + f]))
            .collect();
        Self::new(layers)
    }

    pub fn width(&self) -> usize {
        self.layers[0].width()
    }

    pub fn height(&self) -> usize {
        self.layers[0].height()
    }

    pub fn layer(&self, i: usize) -> &GrayMap {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[GrayMap] {
        &self.layers
    }

    /// Values laid out `height × width × 6`, feature index fastest.
    pub fn interleaved(&self) -> Vec<f64> {
        let n = self.width() * self.height();
        let mut out = Vec::with_capacity(n * NUM_FEATURES);
        for i in 0..n {
            out.extend(self.layers.iter().map(|l| l.data()[i]));
        }
        out
    }
}

/// Dark channel: patch minimum of the per-pixel minimum of `I^c / L^c`.
pub fn dark_channel(img: &HazeImage, light: &AtmosphericLight, spec: PatchSpec) -> GrayMap {
    let l = light.0;
    img.map_pixels(|p| (p[0] / l[0]).min(p[1] / l[1]).min(p[2] / l[2]))
        .min_filter(spec.patch)
}

/// `1 - G(1 - D)` with the luminance as guide, clamped to `[0, 1]`.
pub fn refined_dark_channel(
    img: &HazeImage,
    light: &AtmosphericLight,
    spec: PatchSpec,
    gf: GuidedFilterSpec,
) -> Result<GrayMap> {
    let transmission = dark_channel(img, light, spec).map(|d| 1.0 - d);
    let filtered = guided_filter(&img.luminance(), &transmission, gf.radius, gf.epsilon)?;
    Ok(filtered.map(|t| (1.0 - t).clamp(0.0, 1.0)))
}

/// Patch maximum of the RMS colour deviation within the inner window.
pub fn max_local_contrast(img: &HazeImage, spec: PatchSpec) -> GrayMap {
    let (w, h) = (img.width(), img.height());
    let r = spec.inner / 2;
    let local = GrayMap::from_fn(w, h, |x, y| {
        let p = img.pixel(x, y);
        let mut sum = 0.0;
        let mut count = 0;
        for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                let q = img.pixel(xx, yy);
                sum += (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
                count += 1;
            }
        }
        (sum / (3.0 * count as f64)).sqrt()
    });
    local.max_filter(spec.patch)
}

fn saturation([r, g, b]: [f64; 3]) -> f64 {
    let max = r.max(g).max(b);
    if max > 0.0 {
        1.0 - r.min(g).min(b) / max
    } else {
        0.0
    }
}

pub fn max_local_saturation(img: &HazeImage, spec: PatchSpec) -> GrayMap {
    img.map_pixels(saturation).max_filter(spec.patch)
}

/// Patch minimum of the colour-attenuation depth estimate (noise term zero).
pub fn min_local_color_attenuation(img: &HazeImage, params: &ColorAttenuationParams, spec: PatchSpec) -> GrayMap {
    img.map_pixels(|p| {
        let [_, s, v] = rgb_to_hsv(p);
        params.depth(v, s)
    })
    .min_filter(spec.patch)
}

pub fn semi_inverse(p: [f64; 3]) -> [f64; 3] {
    p.map(|c| c.max(1.0 - c))
}

/// Circular distance between two hues in `[0, 1)`; at most 0.5.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    d.min(1.0 - d)
}

pub fn hue_disparity(img: &HazeImage) -> GrayMap {
    img.map_pixels(|p| hue_distance(rgb_to_hsv(semi_inverse(p))[0], rgb_to_hsv(p)[0]))
}

pub fn chroma(img: &HazeImage) -> GrayMap {
    img.map_pixels(|p| {
        let [_, a, b] = rgb_to_lab(p);
        a.hypot(b)
    })
}

/// Raw feature maps at the image's own resolution, before rescaling.
pub fn raw_features(img: &HazeImage, config: &FeatureConfig) -> Result<[GrayMap; NUM_FEATURES]> {
    let spec = config.effective_patches();
    let gf = config.effective_guided();
    let raw_dark = dark_channel(img, &AtmosphericLight::white(), spec);
    let light = estimate_atmospheric_light(img, &raw_dark, config.light_fraction)?;
    Ok([
        refined_dark_channel(img, &light, spec, gf)?,
        max_local_contrast(img, spec),
        max_local_saturation(img, spec),
        min_local_color_attenuation(img, &config.attenuation, spec),
        hue_disparity(img),
        chroma(img),
    ])
}

fn rescale_fixed(layers: [GrayMap; NUM_FEATURES], params: &ColorAttenuationParams) -> Vec<GrayMap> {
    let (d_lo, d_hi) = params.depth_bounds();
    let ranges = [
        (0.0, 1.0),
        (0.0, 1.0),
        (0.0, 1.0),
        (d_lo, d_hi),
        (0.0, 0.5),
        (0.0, MAX_SRGB_CHROMA),
    ];
    layers
        .into_iter()
        .zip(ranges)
        .map(|(layer, (lo, hi))| {
            let span = hi - lo;
            layer.map(|v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
        })
        .collect()
}

fn rescale_min_max(layers: [GrayMap; NUM_FEATURES]) -> Vec<GrayMap> {
    layers
        .into_iter()
        .map(|layer| {
            let lo = layer.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = layer.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            layer.map(|v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
        })
        .collect()
}

/// Resizes to `config.size` squared, computes the six features and rescales
/// them into `[0, 1]`.
pub fn extract_stack(img: &HazeImage, config: &FeatureConfig) -> Result<FeatureStack> {
    config.validate()?;
    let resized = resize_bilinear(img, config.size, config.size)?;
    let raw = raw_features(&resized, config)?;
    let layers = match config.rescale {
        RescaleMode::Fixed => rescale_fixed(raw, &config.attenuation),
        RescaleMode::MinMax => rescale_min_max(raw),
    };
    FeatureStack::new(layers)
}
