//! Raster images, colour-space conversions and the guided filter.
//!
//! Intensities are `f64` in `[0, 1]`. Colour images are stored row-major with
//! interleaved `r, g, b` samples; single-channel maps use [`GrayMap`].

use std::path::Path;

use crate::{Error, Result};

/// An RGB raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HazeImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl HazeImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::input(format!("image must be at least 1x1, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::input(format!(
                "image {width}x{height} needs {} samples, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image by evaluating `f(x, y)`; results are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(width > 0 && height > 0, "image must be at least 1x1");
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { width, height, data }
    }

    pub fn uniform(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Applies `f` to every pixel, producing a single-channel map.
    pub fn map_pixels(&self, f: impl Fn([f64; 3]) -> f64) -> GrayMap {
        GrayMap {
            width: self.width,
            height: self.height,
            data: self.pixels().map(f).collect(),
        }
    }

    /// Rec. 601 luma, used as the guided-filter guide.
    pub fn luminance(&self) -> GrayMap {
        self.map_pixels(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
    }

    /// Loads a PNG or binary PPM file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Writes an 8-bit binary PPM (P6).
    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round() as u8));
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// A single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::input(format!(
                "map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayMap {
        GrayMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_dims(&self, other: &GrayMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Writes the map as an 8-bit binary PGM (P5), clamping to `[0, 1]`.
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Square-window minimum with the window clipped at the borders.
    pub fn min_filter(&self, side: usize) -> GrayMap {
        self.window_reduce(side, f64::INFINITY, f64::min)
    }

    /// Square-window maximum with the window clipped at the borders.
    pub fn max_filter(&self, side: usize) -> GrayMap {
        self.window_reduce(side, f64::NEG_INFINITY, f64::max)
    }

    // Separable: min/max over a rectangle equals row pass then column pass.
    fn window_reduce(&self, side: usize, init: f64, op: fn(f64, f64) -> f64) -> GrayMap {
        let r = side / 2;
        let (w, h) = (self.width, self.height);
        let mut rows = vec![0.0; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                rows[y * w + x] = row[lo..=hi].iter().copied().fold(init, op);
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                let mut acc = init;
                for yy in lo..=hi {
                    acc = op(acc, rows[yy * w + x]);
                }
                out[y * w + x] = acc;
            }
        }
        GrayMap { width: w, height: h, data: out }
    }

    /// Mean over the `(2 radius + 1)^2` window, clipped to the image.
    pub fn box_mean(&self, radius: usize) -> GrayMap {
        let (w, h) = (self.width, self.height);
        // summed-area table with a zero border row/column
        let sw = w + 1;
        let mut sat = vec![0.0; sw * (h + 1)];
        for y in 0..h {
            let mut run = 0.0;
            for x in 0..w {
                run += self.data[y * w + x];
                sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + run;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let y0 = y.saturating_sub(radius);
            let y1 = (y + radius).min(h - 1) + 1;
            for x in 0..w {
                let x0 = x.saturating_sub(radius);
                let x1 = (x + radius).min(w - 1) + 1;
                let sum = sat[y1 * sw + x1] - sat[y0 * sw + x1] - sat[y1 * sw + x0] + sat[y0 * sw + x0];
                out[y * w + x] = sum / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        GrayMap { width: w, height: h, data: out }
    }
}

/// Global atmospheric light, one strictly positive value per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtmosphericLight(pub [f64; 3]);

impl AtmosphericLight {
    pub fn white() -> Self {
        Self([1.0; 3])
    }

    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::input(format!("atmospheric light {rgb:?} must be strictly positive")));
        }
        Ok(Self(rgb))
    }
}

/// Per-channel mean of `img` over the `fraction` of pixels with the highest
/// dark-channel values.
pub fn estimate_atmospheric_light(img: &HazeImage, dark: &GrayMap, fraction: f64) -> Result<AtmosphericLight> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::input(format!("light fraction {fraction} must be in (0, 1]")));
    }
    if dark.width() != img.width() || dark.height() != img.height() {
        return Err(Error::input(format!(
            "dark channel is {}x{} but image is {}x{}",
            dark.width(),
            dark.height(),
            img.width(),
            img.height()
        )));
    }
    let n = dark.data().len();
    let count = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // brightest first; index order breaks ties
    order.sort_by(|&a, &b| dark.data()[b].total_cmp(&dark.data()[a]).then(a.cmp(&b)));
    let mut acc = [0.0; 3];
    for &i in &order[..count] {
        for c in 0..3 {
            acc[c] += img.data()[i * 3 + c];
        }
    }
    Ok(AtmosphericLight(acc.map(|s| (s / count as f64).max(1e-6))))
}

/// Grey-guide guided filter: per-window linear model `q = a I + b` fitted by
/// ridge regression, then averaged over all windows covering each pixel.
pub fn guided_filter(guide: &GrayMap, input: &GrayMap, radius: usize, epsilon: f64) -> Result<GrayMap> {
    if !guide.same_dims(input) {
        return Err(Error::input(format!(
            "guide is {}x{} but input is {}x{}",
            guide.width(),
            guide.height(),
            input.width(),
            input.height()
        )));
    }
    if radius < 1 {
        return Err(Error::input("guided filter radius must be >= 1"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::input(format!("guided filter epsilon {epsilon} must be > 0")));
    }
    let mean_i = guide.box_mean(radius);
    let mean_p = input.box_mean(radius);
    let ip = GrayMap {
        width: guide.width,
        height: guide.height,
        data: guide.data.iter().zip(&input.data).map(|(a, b)| a * b).collect(),
    };
    let ii = guide.map(|v| v * v);
    let mean_ip = ip.box_mean(radius);
    let mean_ii = ii.box_mean(radius);

    let n = guide.data.len();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for k in 0..n {
        let cov = mean_ip.data[k] - mean_i.data[k] * mean_p.data[k];
        let var = mean_ii.data[k] - mean_i.data[k] * mean_i.data[k];
        a[k] = cov / (var + epsilon);
        b[k] = mean_p.data[k] - a[k] * mean_i.data[k];
    }
    let (w, h) = (guide.width, guide.height);
    let mean_a = GrayMap { width: w, height: h, data: a }.box_mean(radius);
    let mean_b = GrayMap { width: w, height: h, data: b }.box_mean(radius);
    let data = (0..n).map(|k| mean_a.data[k] * guide.data[k] + mean_b.data[k]).collect();
    Ok(GrayMap { width: w, height: h, data })
}

/// RGB to HSV for one pixel; hue is returned in `[0, 1)` and is 0 for
/// achromatic pixels.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let s = if max > 0.0 { chroma / max } else { 0.0 };
    if chroma <= 0.0 {
        return [0.0, s, max];
    }
    let sector = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    let h = (sector / 6.0).rem_euclid(1.0);
    [if h >= 1.0 { 0.0 } else { h }, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(1.0) * 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Splits an image into hue, saturation and value maps.
pub fn to_hsv(img: &HazeImage) -> (GrayMap, GrayMap, GrayMap) {
    let hsv: Vec<[f64; 3]> = img.pixels().map(rgb_to_hsv).collect();
    let (w, h) = (img.width, img.height);
    let channel = |c: usize| GrayMap {
        width: w,
        height: h,
        data: hsv.iter().map(|p| p[c]).collect(),
    };
    (channel(0), channel(1), channel(2))
}

const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB (D65) to CIELab for one pixel.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let fx = lab_f(x / D65_WHITE[0]);
    let fy = lab_f(y / D65_WHITE[1]);
    let fz = lab_f(z / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn to_cielab(img: &HazeImage) -> (GrayMap, GrayMap, GrayMap) {
    let lab: Vec<[f64; 3]> = img.pixels().map(rgb_to_lab).collect();
    let (w, h) = (img.width, img.height);
    let channel = |c: usize| GrayMap {
        width: w,
        height: h,
        data: lab.iter().map(|p| p[c]).collect(),
    };
    (channel(0), channel(1), channel(2))
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(img: &HazeImage, width: usize, height: usize) -> Result<HazeImage> {
    if width == 0 || height == 0 {
        return Err(Error::input(format!("target size {width}x{height} must be at least 1x1")));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sx, img.width);
            let p00 = img.pixel(x0, y0);
            let p10 = img.pixel(x1, y0);
            let p01 = img.pixel(x0, y1);
            let p11 = img.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] * (1.0 - fx) + p10[c] * fx;
                let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(HazeImage { width, height, data })
}
