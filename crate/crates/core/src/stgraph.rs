//! Multi-layer spatio-temporal graph and harmonic AQI inference.
//!
//! Nodes are `(cube, layer)` pairs. A node is *fixed* when its distribution is
//! known (a measurement, a persisted inference, or a frozen forecast input)
//! and *free* otherwise. Free nodes receive the harmonic solution: every free
//! distribution is the weight-averaged distribution of its neighbours.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{AqiScale, Error, Result, AQI_MAX};

pub const NUM_NODE_FEATURES: usize = 9;

/// Feature slots in [`NodeFeatures::as_array`] order.
pub const FEATURE_NAMES: [&str; NUM_NODE_FEATURES] = [
    "x",
    "y",
    "z",
    "timestamp",
    "weather",
    "wind_speed",
    "wind_direction",
    "humidity",
    "temperature",
];

const WEATHER: usize = 4;
const WIND_DIRECTION: usize = 6;

/// Smallest edge weight; keeps weights strictly positive under underflow.
pub const MIN_WEIGHT: f64 = 1e-300;

/// A monitoring cube, identified by grid indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub index: [usize; 3],
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Cube {
    pub fn at(index: [usize; 3], size: [f64; 3]) -> Self {
        Self {
            index,
            center: std::array::from_fn(|a| (index[a] as f64 + 0.5) * size[a]),
            size,
        }
    }

    pub fn distance(&self, other: &Cube) -> f64 {
        (0..3)
            .map(|a| (self.center[a] - other.center[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// All cubes of an `nx × ny × nz` grid in `(k, j, i)` row-major order.
pub fn cube_grid(dims: [usize; 3], size: [f64; 3]) -> Vec<Cube> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.push(Cube::at([i, j, k], size));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Hours.
    pub timestamp: f64,
    pub weather: u32,
    pub wind_speed: f64,
    /// Degrees in `[0, 360)`.
    pub wind_direction: f64,
    /// Percent.
    pub humidity: f64,
    pub temperature: f64,
}

impl NodeFeatures {
    pub fn at_cube(cube: &Cube, timestamp: f64) -> Self {
        Self {
            x: cube.center[0],
            y: cube.center[1],
            z: cube.center[2],
            timestamp,
            weather: 0,
            wind_speed: 0.0,
            wind_direction: 0.0,
            humidity: 50.0,
            temperature: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.humidity) {
            return Err(Error::input(format!("humidity {} outside [0, 100]", self.humidity)));
        }
        if !(0.0..360.0).contains(&self.wind_direction) {
            return Err(Error::input(format!("wind direction {} outside [0, 360)", self.wind_direction)));
        }
        let values = self.as_array();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("node features must be finite"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; NUM_NODE_FEATURES] {
        [
            self.x,
            self.y,
            self.z,
            self.timestamp,
            f64::from(self.weather),
            self.wind_speed,
            self.wind_direction,
            self.humidity,
            self.temperature,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Measured,
    Inferred,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Measured => "measured",
            Provenance::Inferred => "inferred",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(Provenance::Measured),
            "inferred" => Ok(Provenance::Inferred),
            other => Err(Error::input(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub aqi: f64,
    pub provenance: Provenance,
}

impl Label {
    pub fn measured(aqi: f64) -> Self {
        Self {
            aqi,
            provenance: Provenance::Measured,
        }
    }
}

/// Discretisation of `[0, 500]`: bin `i` is centred on `i · width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AqiBins {
    width: f64,
    count: usize,
}

impl Default for AqiBins {
    fn default() -> Self {
        Self::new(10.0).expect("default bin width is valid")
    }
}

impl AqiBins {
    pub fn new(width: f64) -> Result<Self> {
        if !(width > 0.0 && width <= AQI_MAX) {
            return Err(Error::input(format!("bin width {width} must be in (0, 500]")));
        }
        Ok(Self {
            width,
            count: (AQI_MAX / width).floor() as usize + 1,
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn center(&self, i: usize) -> f64 {
        i as f64 * self.width
    }

    pub fn bin_of(&self, aqi: f64) -> usize {
        ((aqi / self.width).round().max(0.0) as usize).min(self.count - 1)
    }

    pub fn point_mass(&self, aqi: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.count];
        p[self.bin_of(aqi)] = 1.0;
        p
    }

    pub fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.count as f64; self.count]
    }

    /// Expectation over bin centres.
    pub fn hard_label(&self, p: &[f64]) -> f64 {
        p.iter().enumerate().map(|(i, m)| self.center(i) * m).sum()
    }

    /// Restricts `p` to the bins centred inside `scale` and renormalises.
    /// Falls back to uniform over those bins when no mass survives, and to
    /// the bin nearest the midpoint when no centre lies inside `scale`.
    pub fn condition(&self, p: &[f64], scale: &AqiScale) -> Vec<f64> {
        let inside: Vec<bool> = (0..self.count).map(|i| scale.contains(self.center(i))).collect();
        let n_inside = inside.iter().filter(|&&b| b).count();
        if n_inside == 0 {
            return self.point_mass(scale.midpoint());
        }
        let total: f64 = p.iter().zip(&inside).filter(|(_, &b)| b).map(|(m, _)| m).sum();
        if total <= 0.0 {
            return inside
                .iter()
                .map(|&b| if b { 1.0 / n_inside as f64 } else { 0.0 })
                .collect();
        }
        p.iter()
            .zip(&inside)
            .map(|(m, &b)| if b { m / total } else { 0.0 })
            .collect()
    }
}

/// Base-2 Shannon entropy with `0 log 0 = 0`.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&m| m > 0.0).map(|m| m * m.log2()).sum::<f64>()
}

/// Per-feature correlation `Q_m = α_m + β_m · dist_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams {
    pub alpha: [f64; NUM_NODE_FEATURES],
    pub beta: [f64; NUM_NODE_FEATURES],
}

impl Default for CorrelationParams {
    fn default() -> Self {
        Self {
            alpha: [0.0; NUM_NODE_FEATURES],
            beta: [1.0; NUM_NODE_FEATURES],
        }
    }
}

pub fn correlation(distance: f64, alpha: f64, beta: f64) -> f64 {
    alpha + beta * distance
}

/// `exp(-Σ θ_m² Q_m)`, floored at [`MIN_WEIGHT`].
pub fn edge_weight(q: &[f64], theta: &[f64]) -> f64 {
    let s: f64 = q.iter().zip(theta).map(|(q, t)| t * t * q).sum();
    (-s).exp().max(MIN_WEIGHT)
}

/// Outcome of a correlation fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Fitted,
    /// Too few pairs or no spread in distance; defaults used.
    Fallback,
}

/// Least-squares line `y ≈ α + β x` with `α, β ≥ 0`.
pub fn fit_line(pairs: &[(f64, f64)]) -> (f64, f64, FitStatus) {
    const FALLBACK: (f64, f64, FitStatus) = (0.0, 1.0, FitStatus::Fallback);
    if pairs.len() < 2 {
        return FALLBACK;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 1e-12 * n * (1.0 + mx * mx) {
        return FALLBACK;
    }
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    if beta >= 0.0 && alpha >= 0.0 {
        return (alpha, beta, FitStatus::Fitted);
    }
    // Constrained optimum lies on a boundary face.
    let sse = |a: f64, b: f64| pairs.iter().map(|p| (p.1 - a - b * p.0).powi(2)).sum::<f64>();
    let through_origin = {
        let sx2: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
        let b = (pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / sx2).max(0.0);
        (0.0, b)
    };
    let flat = (my.max(0.0), 0.0);
    let best = [through_origin, flat]
        .into_iter()
        .min_by(|a, b| sse(a.0, a.1).total_cmp(&sse(b.0, b.1)))
        .expect("two candidates");
    (best.0, best.1, FitStatus::Fitted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub cube: usize,
    pub layer: usize,
    pub features: NodeFeatures,
    pub label: Option<Label>,
    /// Distribution held fixed during solving (labelled or frozen node).
    pub fixed: bool,
    pub dist: Vec<f64>,
    /// Prior AQI scale applied after solving.
    pub scale: Option<AqiScale>,
}

impl Node {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

/// One time stamp of input: features for every cube and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInput {
    pub timestamp: f64,
    pub features: Vec<NodeFeatures>,
    pub labels: Vec<Option<Label>>,
    /// Stored distributions of persisted inferred labels; empty or `None`
    /// entries fall back to a point mass at the label.
    pub soft: Vec<Option<Vec<f64>>>,
}

impl LayerInput {
    /// Default features at each cube centre, no labels.
    pub fn empty(cubes: &[Cube], timestamp: f64) -> Self {
        Self {
            timestamp,
            features: cubes.iter().map(|c| NodeFeatures::at_cube(c, timestamp)).collect(),
            labels: vec![None; cubes.len()],
            soft: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub sweeps: usize,
    pub max_change: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once an accepted step changes H by less than this.
    pub tolerance: f64,
    pub max_halvings: usize,
    /// Step-size multiplier after every accepted step.
    pub growth: f64,
    pub trainable: [bool; NUM_NODE_FEATURES],
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_iters: 50,
            tolerance: 1e-6,
            max_halvings: 20,
            growth: 2.0,
            trainable: [true; NUM_NODE_FEATURES],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnReport {
    pub theta: [f64; NUM_NODE_FEATURES],
    /// Entropy before learning, then after every accepted step.
    pub entropy: Vec<f64>,
    pub rejected_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StGraph {
    bins: AqiBins,
    cubes: Vec<Cube>,
    timestamps: Vec<f64>,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, usize)>>,
    radius: f64,
    /// Per-node features normalised for distances.
    normalized: Vec<[f64; NUM_NODE_FEATURES]>,
    pub params: CorrelationParams,
    pub theta: [f64; NUM_NODE_FEATURES],
    weights: Vec<f64>,
    spatial_pairs: Vec<(usize, usize)>,
}

fn spatial_pairs(cubes: &[Cube], radius: f64) -> Vec<(usize, usize)> {
    let key = |c: &Cube| -> [i64; 3] { std::array::from_fn(|a| (c.center[a] / radius).floor() as i64) };
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, c) in cubes.iter().enumerate() {
        buckets.entry(key(c)).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for (i, c) in cubes.iter().enumerate() {
        let k = key(c);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &j in list {
                            if j > i && c.distance(&cubes[j]) <= radius {
                                pairs.push((i, j));
                            }
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

impl StGraph {
    /// Builds the graph from `layers` (oldest first) using the three edge
    /// rules: free node to every labelled node of its layer, nodes within
    /// `radius` of each other in the same layer, and the same cube at
    /// adjacent layers.
    pub fn build(cubes: Vec<Cube>, layers: Vec<LayerInput>, radius: f64, bins: AqiBins) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::input("a graph needs at least one layer"));
        }
        if !(radius > 0.0) {
            return Err(Error::input(format!("radius {radius} must be positive")));
        }
        if cubes.is_empty() {
            return Err(Error::input("a graph needs at least one cube"));
        }
        let n = cubes.len();
        let mut nodes = Vec::with_capacity(n * layers.len());
        let mut timestamps = Vec::with_capacity(layers.len());
        for (l, layer) in layers.into_iter().enumerate() {
            if layer.features.len() != n || layer.labels.len() != n {
                return Err(Error::input(format!(
                    "layer {l} has {} feature rows and {} labels for {n} cubes",
                    layer.features.len(),
                    layer.labels.len()
                )));
            }
            if !layer.soft.is_empty() && layer.soft.len() != n {
                return Err(Error::input(format!("layer {l} has {} soft labels for {n} cubes", layer.soft.len())));
            }
            timestamps.push(layer.timestamp);
            let mut soft = layer.soft.into_iter();
            for (c, (features, label)) in layer.features.into_iter().zip(layer.labels).enumerate() {
                features.validate()?;
                let stored = soft.next().flatten();
                let dist = match label {
                    Some(label) => {
                        if !(0.0..=AQI_MAX).contains(&label.aqi) {
                            return Err(Error::input(format!("AQI {} outside [0, 500]", label.aqi)));
                        }
                        match stored {
                            Some(p) if label.provenance == Provenance::Inferred => {
                                let total: f64 = p.iter().sum();
                                if p.len() != bins.len() || p.iter().any(|&m| !(m >= 0.0)) || (total - 1.0).abs() > 1e-6 {
                                    return Err(Error::input(format!("soft label for cube {c} at layer {l} is not a PMF")));
                                }
                                p
                            }
                            _ => bins.point_mass(label.aqi),
                        }
                    }
                    None => bins.uniform(),
                };
                nodes.push(Node {
                    cube: c,
                    layer: l,
                    features,
                    label,
                    fixed: label.is_some(),
                    dist,
                    scale: None,
                });
            }
        }
        if !nodes.iter().any(Node::is_labeled) {
            return Err(Error::state("graph has no labelled nodes; inference is undefined"));
        }
        let mut graph = Self {
            bins,
            spatial_pairs: spatial_pairs(&cubes, radius),
            cubes,
            timestamps,
            nodes,
            edges: Vec::new(),
            adjacency: Vec::new(),
            radius,
            normalized: Vec::new(),
            params: CorrelationParams::default(),
            theta: [1.0; NUM_NODE_FEATURES],
            weights: Vec::new(),
        };
        graph.connect_layers(0);
        graph.normalize_features();
        graph.refresh_weights();
        Ok(graph)
    }

    /// Adds rule edges for layers `from..` (temporal edges reach back to
    /// `from - 1`).
    fn connect_layers(&mut self, from: usize) {
        let n = self.cubes.len();
        let mut seen: std::collections::HashSet<(usize, usize)> = self.edges.iter().map(|e| (e.a, e.b)).collect();
        let mut add = |edges: &mut Vec<Edge>, a: usize, b: usize| {
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            if a != b && seen.insert((a, b)) {
                edges.push(Edge { a, b });
            }
        };
        for l in from..self.timestamps.len() {
            let base = l * n;
            let labeled: Vec<usize> = (0..n).filter(|&c| self.nodes[base + c].is_labeled()).collect();
            for u in 0..n {
                if self.nodes[base + u].is_labeled() {
                    continue;
                }
                for &v in &labeled {
                    add(&mut self.edges, base + u, base + v);
                }
            }
            for &(i, j) in &self.spatial_pairs {
                if !self.nodes[base + i].is_labeled() || !self.nodes[base + j].is_labeled() {
                    add(&mut self.edges, base + i, base + j);
                }
            }
            if l > 0 {
                for c in 0..n {
                    let (prev, cur) = (base - n + c, base + c);
                    if !self.nodes[prev].is_labeled() || !self.nodes[cur].is_labeled() {
                        add(&mut self.edges, prev, cur);
                    }
                }
            }
        }
        self.adjacency = vec![Vec::new(); self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            self.adjacency[edge.a].push((edge.b, e));
            self.adjacency[edge.b].push((edge.a, e));
        }
    }

    fn normalize_features(&mut self) {
        let raw: Vec<[f64; NUM_NODE_FEATURES]> = self.nodes.iter().map(|n| n.features.as_array()).collect();
        let mut lo = [f64::INFINITY; NUM_NODE_FEATURES];
        let mut hi = [f64::NEG_INFINITY; NUM_NODE_FEATURES];
        for r in &raw {
            for m in 0..NUM_NODE_FEATURES {
                lo[m] = lo[m].min(r[m]);
                hi[m] = hi[m].max(r[m]);
            }
        }
        self.normalized = raw
            .into_iter()
            .map(|r| {
                std::array::from_fn(|m| match m {
                    WEATHER | WIND_DIRECTION => r[m],
                    _ if hi[m] > lo[m] => (r[m] - lo[m]) / (hi[m] - lo[m]),
                    _ => 0.0,
                })
            })
            .collect();
    }

    /// Per-feature distances between two nodes (normalised scale).
    pub fn distances(&self, a: usize, b: usize) -> [f64; NUM_NODE_FEATURES] {
        let (fa, fb) = (&self.normalized[a], &self.normalized[b]);
        std::array::from_fn(|m| match m {
            WEATHER => f64::from(u8::from(fa[m] != fb[m])),
            WIND_DIRECTION => {
                let d = (fa[m] - fb[m]).abs();
                d.min(360.0 - d) / 180.0
            }
            _ => (fa[m] - fb[m]).abs(),
        })
    }

    /// `Q_m` for every feature of an edge.
    pub fn edge_q(&self, e: usize) -> [f64; NUM_NODE_FEATURES] {
        let d = self.distances(self.edges[e].a, self.edges[e].b);
        std::array::from_fn(|m| correlation(d[m], self.params.alpha[m], self.params.beta[m]))
    }

    /// `Q_m − α_m` for every feature of an edge. The `α` factor is common
    /// to all edges and cancels in every normalised average, so stored
    /// weights leave it out; this keeps large `θ` from underflowing.
    pub fn edge_excess_q(&self, e: usize) -> [f64; NUM_NODE_FEATURES] {
        let d = self.distances(self.edges[e].a, self.edges[e].b);
        std::array::from_fn(|m| correlation(d[m], 0.0, self.params.beta[m]))
    }

    fn weights_for(&self, theta: &[f64; NUM_NODE_FEATURES]) -> Vec<f64> {
        (0..self.edges.len()).map(|e| edge_weight(&self.edge_excess_q(e), theta)).collect()
    }

    /// Recomputes edge weights from the current `params` and `theta`.
    pub fn refresh_weights(&mut self) {
        self.weights = self.weights_for(&self.theta);
    }

    pub fn set_theta(&mut self, theta: [f64; NUM_NODE_FEATURES]) {
        self.theta = theta;
        self.refresh_weights();
    }

    pub fn set_params(&mut self, params: CorrelationParams) {
        self.params = params;
        self.refresh_weights();
    }

    pub fn bins(&self) -> &AqiBins {
        &self.bins
    }

    pub fn cubes(&self) -> &[Cube] {
        &self.cubes
    }

    pub fn num_layers(&self) -> usize {
        self.timestamps.len()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_index(&self, layer: usize, cube: usize) -> usize {
        layer * self.cubes.len() + cube
    }

    pub fn node(&self, layer: usize, cube: usize) -> &Node {
        &self.nodes[self.node_index(layer, cube)]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `(neighbour, edge index)` pairs of a node.
    pub fn neighbors(&self, node: usize) -> &[(usize, usize)] {
        &self.adjacency[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].iter().any(|&(v, _)| v == b)
    }

    pub fn free_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| !self.nodes[i].fixed)
    }

    /// Sets the prior scale of every node of `layer`; `None` clears it.
    pub fn set_layer_scales(&mut self, layer: usize, scales: &[Option<AqiScale>]) -> Result<()> {
        if scales.len() != self.cubes.len() {
            return Err(Error::input(format!(
                "{} scales for {} cubes",
                scales.len(),
                self.cubes.len()
            )));
        }
        let base = layer * self.cubes.len();
        for (c, s) in scales.iter().enumerate() {
            self.nodes[base + c].scale = *s;
        }
        Ok(())
    }

    /// Labelled, measured node pairs used to fit the correlation functions:
    /// same-layer pairs and same-cube pairs at adjacent layers, at most
    /// `max_pairs` of them (taken with a fixed stride).
    fn correlation_pairs(&self, max_pairs: usize) -> Vec<(usize, usize)> {
        let n = self.cubes.len();
        let measured = |i: usize| matches!(self.nodes[i].label, Some(l) if l.provenance == Provenance::Measured);
        let mut pairs = Vec::new();
        for l in 0..self.num_layers() {
            let ids: Vec<usize> = (0..n).map(|c| l * n + c).filter(|&i| measured(i)).collect();
            for (x, &a) in ids.iter().enumerate() {
                for &b in &ids[x + 1..] {
                    pairs.push((a, b));
                }
                if l > 0 && measured(a - n) {
                    pairs.push((a - n, a));
                }
            }
        }
        if pairs.len() > max_pairs {
            let stride = pairs.len().div_ceil(max_pairs);
            pairs = pairs.into_iter().step_by(stride).collect();
        }
        pairs
    }

    /// Fits `α_m, β_m` per feature by constrained least squares of the
    /// normalised label difference against the feature distance. The target
    /// is `|ΔAQI|` divided by its mean over the pairs.
    pub fn fit_correlation_params(&self) -> (CorrelationParams, [FitStatus; NUM_NODE_FEATURES]) {
        let pairs = self.correlation_pairs(20_000);
        let diffs: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| {
                let la = self.nodes[a].label.expect("measured pair").aqi;
                let lb = self.nodes[b].label.expect("measured pair").aqi;
                (la - lb).abs()
            })
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
        let mut params = CorrelationParams::default();
        let mut status = [FitStatus::Fallback; NUM_NODE_FEATURES];
        if mean <= 0.0 {
            return (params, status);
        }
        let dists: Vec<[f64; NUM_NODE_FEATURES]> = pairs.iter().map(|&(a, b)| self.distances(a, b)).collect();
        for m in 0..NUM_NODE_FEATURES {
            let xy: Vec<(f64, f64)> = dists.iter().zip(&diffs).map(|(d, y)| (d[m], y / mean)).collect();
            let (a, b, s) = fit_line(&xy);
            params.alpha[m] = a;
            params.beta[m] = b;
            status[m] = s;
        }
        (params, status)
    }

    /// Sum of fixed-neighbour contributions and free-neighbour links for
    /// every free node, under the given edge weights.
    fn system(&self, weights: &[f64]) -> Result<LinearSystem> {
        let bins = self.bins.len();
        let mut rows = Vec::new();
        let mut row_of = vec![usize::MAX; self.nodes.len()];
        for u in self.free_nodes() {
            row_of[u] = rows.len();
            let mut fixed = vec![0.0; bins];
            let mut free = Vec::new();
            let mut degree = 0.0;
            for &(v, e) in &self.adjacency[u] {
                let w = weights[e];
                degree += w;
                let node = &self.nodes[v];
                if node.fixed {
                    for (f, p) in fixed.iter_mut().zip(&node.dist) {
                        *f += w * p;
                    }
                } else {
                    free.push((v, w));
                }
            }
            if self.adjacency[u].is_empty() {
                return Err(Error::state(format!(
                    "node for cube {} at layer {} has no edges",
                    self.nodes[u].cube, self.nodes[u].layer
                )));
            }
            rows.push(Row {
                node: u,
                fixed,
                free,
                degree,
            });
        }
        for row in &mut rows {
            for (v, _) in &mut row.free {
                *v = row_of[*v];
            }
        }
        Ok(LinearSystem { rows })
    }

    /// Gauss–Seidel iteration to the harmonic fixed point; free nodes start
    /// from their current distributions.
    pub fn harmonic_solve(&mut self, config: &SolveConfig) -> Result<SolveStats> {
        let system = self.system(&self.weights)?;
        let bins = self.bins.len();
        let mut state: Vec<Vec<f64>> = system.rows.iter().map(|r| self.nodes[r.node].dist.clone()).collect();
        let mut stats = SolveStats {
            sweeps: 0,
            max_change: 0.0,
            converged: system.rows.is_empty(),
        };
        let mut next = vec![0.0; bins];
        while !stats.converged && stats.sweeps < config.max_sweeps {
            let mut max_change: f64 = 0.0;
            for (r, row) in system.rows.iter().enumerate() {
                next.copy_from_slice(&row.fixed);
                for &(v, w) in &row.free {
                    for (n, p) in next.iter_mut().zip(&state[v]) {
                        *n += w * p;
                    }
                }
                for (n, old) in next.iter_mut().zip(state[r].iter_mut()) {
                    *n /= row.degree;
                    max_change = max_change.max((*n - *old).abs());
                    *old = *n;
                }
            }
            stats.sweeps += 1;
            stats.max_change = max_change;
            if !max_change.is_finite() {
                return Err(Error::Numeric {
                    iteration: stats.sweeps,
                    message: "harmonic iteration produced a non-finite value".into(),
                });
            }
            stats.converged = max_change < config.tolerance;
        }
        for (row, mut p) in system.rows.iter().zip(state) {
            let total: f64 = p.iter().sum();
            p.iter_mut().for_each(|m| *m /= total);
            self.nodes[row.node].dist = p;
        }
        if !stats.converged {
            log::warn!(
                "harmonic solve stopped after {} sweeps with change {:.3e}",
                stats.sweeps,
                stats.max_change
            );
        }
        Ok(stats)
    }

    /// Distribution of a node after its prior scale is applied.
    pub fn conditioned(&self, node: usize) -> Vec<f64> {
        let n = &self.nodes[node];
        match (&n.scale, n.fixed) {
            (Some(scale), false) => self.bins.condition(&n.dist, scale),
            _ => n.dist.clone(),
        }
    }

    /// Mean base-2 entropy of the conditioned distributions of free nodes.
    pub fn entropy(&self) -> f64 {
        let free: Vec<usize> = self.free_nodes().collect();
        if free.is_empty() {
            return 0.0;
        }
        free.iter().map(|&u| entropy_bits(&self.conditioned(u))).sum::<f64>() / free.len() as f64
    }

    /// One-hop averages of every free node under `theta`, with all
    /// neighbour distributions taken from `frozen`.
    fn one_hop(&self, theta: &[f64; NUM_NODE_FEATURES], frozen: &[Vec<f64>]) -> Vec<(usize, Vec<f64>, f64)> {
        let weights = self.weights_for(theta);
        self.free_nodes()
            .map(|u| {
                let mut p = vec![0.0; self.bins.len()];
                let mut degree = 0.0;
                for &(v, e) in &self.adjacency[u] {
                    let w = weights[e];
                    degree += w;
                    for (a, b) in p.iter_mut().zip(&frozen[v]) {
                        *a += w * b;
                    }
                }
                p.iter_mut().for_each(|m| *m /= degree);
                (u, p, degree)
            })
            .collect()
    }

    /// Current distribution of every node.
    pub fn distributions(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| n.dist.clone()).collect()
    }

    /// Entropy of the one-hop averages under `theta`, neighbours frozen at
    /// `frozen`. Equals [`Self::entropy`] at a harmonic fixed point when
    /// `theta` is the current weight vector.
    pub fn restricted_entropy(&self, theta: &[f64; NUM_NODE_FEATURES], frozen: &[Vec<f64>]) -> f64 {
        let hops = self.one_hop(theta, frozen);
        if hops.is_empty() {
            return 0.0;
        }
        let total: f64 = hops
            .iter()
            .map(|(u, p, _)| match self.nodes[*u].scale {
                Some(scale) => entropy_bits(&self.bins.condition(p, &scale)),
                None => entropy_bits(p),
            })
            .sum();
        total / hops.len() as f64
    }

    /// Analytic gradient of [`Self::restricted_entropy`] at the current
    /// `theta`, neighbours frozen at their current distributions.
    pub fn entropy_gradient(&self) -> [f64; NUM_NODE_FEATURES] {
        let frozen = self.distributions();
        let hops = self.one_hop(&self.theta, &frozen);
        let mut grad = [0.0; NUM_NODE_FEATURES];
        if hops.is_empty() {
            return grad;
        }
        let scale_u = 1.0 / hops.len() as f64;
        let inv_ln2 = std::f64::consts::LOG2_E;
        for (u, p, degree) in &hops {
            // dH/dp for this node, through the conditioning if present
            let g: Vec<f64> = match self.nodes[*u].scale {
                None => p
                    .iter()
                    .map(|&m| if m > 0.0 { -scale_u * (m.log2() + inv_ln2) } else { 0.0 })
                    .collect(),
                Some(scale) => {
                    let mask: Vec<f64> = (0..p.len())
                        .map(|i| f64::from(u8::from(scale.contains(self.bins.center(i)))))
                        .collect();
                    let z: f64 = p.iter().zip(&mask).map(|(a, b)| a * b).sum();
                    if z <= 0.0 {
                        continue;
                    }
                    let c: Vec<f64> = p.iter().zip(&mask).map(|(a, b)| a * b / z).collect();
                    let gc: Vec<f64> = c
                        .iter()
                        .map(|&m| if m > 0.0 { -scale_u * (m.log2() + inv_ln2) } else { 0.0 })
                        .collect();
                    let mean: f64 = gc.iter().zip(&c).map(|(a, b)| a * b).sum();
                    mask.iter().zip(&gc).map(|(m, g)| m / z * (g - mean)).collect()
                }
            };
            let g_self: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
            for &(v, e) in &self.adjacency[*u] {
                let g_v: f64 = g.iter().zip(&frozen[v]).map(|(a, b)| a * b).sum();
                let s = (g_v - g_self) / degree;
                let w = self.weights[e];
                let q = self.edge_excess_q(e);
                for m in 0..NUM_NODE_FEATURES {
                    grad[m] += -2.0 * self.theta[m] * q[m] * w * s;
                }
            }
        }
        grad
    }

    /// Gradient descent on the entropy over `theta`, re-solving after every
    /// step and halving the step whenever the entropy would increase.
    pub fn learn_theta(&mut self, learn: &LearnConfig, solve: &SolveConfig) -> Result<LearnReport> {
        self.harmonic_solve(solve)?;
        let mut h = self.entropy();
        let mut report = LearnReport {
            theta: self.theta,
            entropy: vec![h],
            rejected_steps: 0,
        };
        let mut lr = learn.learning_rate;
        for iteration in 0..learn.max_iters {
            let mut grad = self.entropy_gradient();
            for m in 0..NUM_NODE_FEATURES {
                if !learn.trainable[m] {
                    grad[m] = 0.0;
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric {
                    iteration,
                    message: "entropy gradient is not finite".into(),
                });
            }
            if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-12 {
                break;
            }
            let start_theta = self.theta;
            let start_dists = self.distributions();
            let mut accepted = false;
            for _ in 0..=learn.max_halvings {
                let candidate: [f64; NUM_NODE_FEATURES] = std::array::from_fn(|m| start_theta[m] - lr * grad[m]);
                self.set_theta(candidate);
                self.harmonic_solve(solve)?;
                let h_new = self.entropy();
                if h_new <= h {
                    accepted = true;
                    let delta = h - h_new;
                    h = h_new;
                    report.entropy.push(h);
                    report.theta = candidate;
                    lr *= learn.growth;
                    if delta < learn.tolerance {
                        return Ok(report);
                    }
                    break;
                }
                report.rejected_steps += 1;
                lr *= 0.5;
                self.restore(start_theta, &start_dists);
            }
            if !accepted {
                self.restore(start_theta, &start_dists);
                break;
            }
        }
        Ok(report)
    }

    fn restore(&mut self, theta: [f64; NUM_NODE_FEATURES], dists: &[Vec<f64>]) {
        self.set_theta(theta);
        for (node, d) in self.nodes.iter_mut().zip(dists) {
            node.dist.clone_from(d);
        }
    }

    /// Hard labels of one layer (conditioned where a scale is set, and
    /// clamped into that scale).
    pub fn layer_labels(&self, layer: usize) -> Vec<f64> {
        (0..self.cubes.len())
            .map(|c| {
                let i = self.node_index(layer, c);
                let node = &self.nodes[i];
                if let Some(label) = node.label {
                    return label.aqi;
                }
                let value = self.bins.hard_label(&self.conditioned(i)).clamp(0.0, AQI_MAX);
                match node.scale {
                    Some(s) => value.clamp(s.x_min, s.x_max),
                    None => value,
                }
            })
            .collect()
    }

    /// Fits correlations, learns `theta`, solves and labels the newest layer.
    pub fn infer_current(&mut self, learn: &LearnConfig, solve: &SolveConfig) -> Result<InferredMap> {
        let (params, _) = self.fit_correlation_params();
        self.set_params(params);
        self.learn_theta(learn, solve)?;
        let last = self.num_layers() - 1;
        let aqi = self.layer_labels(last);
        let n = self.cubes.len();
        let provenance = (0..n)
            .map(|c| match self.node(last, c).label {
                Some(l) => l.provenance,
                None => Provenance::Inferred,
            })
            .collect();
        let distributions = (0..n).map(|c| self.conditioned(self.node_index(last, c))).collect();
        Ok(InferredMap {
            timestamp: self.timestamps[last],
            aqi,
            provenance,
            distributions,
        })
    }

    /// Freezes all existing nodes, appends `horizon` unlabelled layers one
    /// `interval` apart (features copied from the newest layer), solves and
    /// returns hard labels per future layer.
    pub fn forecast(&self, horizon: usize, interval: f64, solve: &SolveConfig) -> Result<Vec<Vec<f64>>> {
        if horizon == 0 {
            return Ok(Vec::new());
        }
        let mut g = self.clone();
        for (i, node) in g.nodes.iter_mut().enumerate() {
            if !node.fixed {
                node.dist = self.conditioned(i);
                node.fixed = true;
            }
        }
        let n = g.cubes.len();
        let last = g.num_layers() - 1;
        let first_new = g.num_layers();
        let last_t = g.timestamps[last];
        for h in 1..=horizon {
            let t = last_t + h as f64 * interval;
            g.timestamps.push(t);
            for c in 0..n {
                let mut features = g.nodes[last * n + c].features;
                features.timestamp = t;
                g.nodes.push(Node {
                    cube: c,
                    layer: first_new + h - 1,
                    features,
                    label: None,
                    fixed: false,
                    dist: self.conditioned(last * n + c),
                    scale: None,
                });
            }
        }
        g.connect_layers(first_new);
        g.normalize_features();
        g.refresh_weights();
        g.harmonic_solve(solve)?;
        Ok((first_new..g.num_layers()).map(|l| g.layer_labels(l)).collect())
    }
}

struct Row {
    node: usize,
    fixed: Vec<f64>,
    free: Vec<(usize, f64)>,
    degree: f64,
}

struct LinearSystem {
    rows: Vec<Row>,
}

/// The labelled newest layer of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredMap {
    pub timestamp: f64,
    pub aqi: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub distributions: Vec<Vec<f64>>,
}

impl InferredMap {
    /// Labels for feeding this map back into a later graph.
    pub fn as_labels(&self) -> Vec<Option<Label>> {
        self.aqi
            .iter()
            .zip(&self.provenance)
            .map(|(&aqi, &provenance)| Some(Label { aqi, provenance }))
            .collect()
    }
}
