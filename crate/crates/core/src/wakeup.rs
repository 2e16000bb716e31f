//! Wake-up scheduling from the aerial AQI scale and the pre-inferred value.

use serde::{Deserialize, Serialize};

use crate::regions::RegionMap;
use crate::{AqiScale, Error, Result, AQI_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevicePriors {
    pub device: usize,
    pub scale: AqiScale,
    /// AQI predicted for this time stamp from earlier inference.
    pub pre_inferred: f64,
}

impl DevicePriors {
    pub fn new(device: usize, scale: AqiScale, pre_inferred: f64) -> Result<Self> {
        if !(0.0..=AQI_MAX).contains(&pre_inferred) {
            return Err(Error::input(format!("pre-inferred AQI {pre_inferred} outside [0, 500]")));
        }
        Ok(Self {
            device,
            scale,
            pre_inferred,
        })
    }

    /// Degree of bias: distance of the pre-inferred value from the scale midpoint.
    pub fn bias(&self) -> f64 {
        (self.pre_inferred - self.scale.midpoint()).abs()
    }

    /// Degree of variance: width of the scale.
    pub fn variance(&self) -> f64 {
        self.scale.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JeScore {
    pub bias: f64,
    pub variance: f64,
    pub je: f64,
}

/// Joint estimation error against explicit maxima; a zero maximum drops its term.
pub fn je_score(bias: f64, variance: f64, bias_max: f64, variance_max: f64) -> JeScore {
    let term = |v: f64, m: f64| if m > 0.0 { v / m } else { 0.0 };
    JeScore {
        bias,
        variance,
        je: 0.5 * (term(bias, bias_max) + term(variance, variance_max)),
    }
}

/// Scores every device, normalising by the maxima over all devices.
pub fn je_scores(priors: &[DevicePriors], steps: &mut u64) -> Vec<JeScore> {
    let bias_max = priors.iter().map(DevicePriors::bias).fold(0.0, f64::max);
    let variance_max = priors.iter().map(DevicePriors::variance).fold(0.0, f64::max);
    *steps += priors.len() as u64;
    priors
        .iter()
        .map(|p| je_score(p.bias(), p.variance(), bias_max, variance_max))
        .collect()
}

/// A device is a candidate when its JE reaches `threshold` and at least one
/// of its priors exceeds `sigma`. Returns positions into `priors`.
pub fn candidate_set(priors: &[DevicePriors], scores: &[JeScore], threshold: f64, sigma: f64) -> Vec<usize> {
    priors
        .iter()
        .zip(scores)
        .enumerate()
        .filter(|(_, (p, s))| s.je >= threshold && p.pre_inferred.max(p.scale.x_max) > sigma)
        .map(|(i, _)| i)
        .collect()
}

/// Greedy independent dominating set on a graph given as adjacency lists:
/// repeatedly take the remaining node of largest remaining degree (lowest
/// index on ties) and delete it with its neighbours.
pub fn greedy_mids(adjacency: &[Vec<usize>], steps: &mut u64) -> Vec<usize> {
    let n = adjacency.len();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
    let mut remaining = n;
    let mut chosen = Vec::new();
    while remaining > 0 {
        let mut best = usize::MAX;
        for v in 0..n {
            if alive[v] && (best == usize::MAX || degree[v] > degree[best]) {
                best = v;
            }
        }
        *steps += n as u64;
        chosen.push(best);
        let mut removed = vec![best];
        removed.extend(adjacency[best].iter().copied().filter(|&v| alive[v]));
        for &v in &removed {
            alive[v] = false;
            remaining -= 1;
        }
        for &v in &removed {
            for &w in &adjacency[v] {
                if alive[w] {
                    degree[w] -= 1;
                }
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Adjacency lists of the unit-disk graph of `points` with radius `r`.
pub fn proximity_graph(points: &[[f64; 2]], r: f64) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); points.len()];
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]) <= r {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPlan {
    pub poi: usize,
    /// Candidate device ids.
    pub candidates: Vec<usize>,
    /// Devices to wake.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WakePlan {
    pub regions: Vec<RegionPlan>,
    /// Union of all selected devices, ascending.
    pub wake: Vec<usize>,
    pub scores: Vec<JeScore>,
    /// JE evaluations plus node scans of the greedy selection.
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WakeConfig {
    pub threshold: f64,
    pub sigma: f64,
    /// Proximity radius in metres.
    pub radius: f64,
}

impl Default for WakeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            sigma: 50.0,
            radius: 300.0,
        }
    }
}

impl WakeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::input(format!("JE threshold {} must be >= 0", self.threshold)));
        }
        if !(0.0..=AQI_MAX).contains(&self.sigma) {
            return Err(Error::input(format!("sigma {} outside [0, 500]", self.sigma)));
        }
        if !(self.radius >= 0.0) {
            return Err(Error::input(format!("radius {} must be >= 0", self.radius)));
        }
        Ok(())
    }
}

/// Candidate selection and greedy MIDS in every region independently.
/// `priors[i]` and `positions[i]` describe device `i`.
pub fn plan(regions: &RegionMap, priors: &[DevicePriors], positions: &[[f64; 2]], config: &WakeConfig) -> Result<WakePlan> {
    config.validate()?;
    if priors.len() != positions.len() {
        return Err(Error::input(format!(
            "{} priors for {} device positions",
            priors.len(),
            positions.len()
        )));
    }
    let mut steps = 0;
    let scores = je_scores(priors, &mut steps);
    let candidates = candidate_set(priors, &scores, config.threshold, config.sigma);
    let mut is_candidate = vec![false; priors.len()];
    for &c in &candidates {
        is_candidate[c] = true;
    }
    let mut out = Vec::with_capacity(regions.regions.len());
    let mut wake = Vec::new();
    for region in &regions.regions {
        for &m in &region.members {
            if m >= priors.len() {
                return Err(Error::input(format!("region member {m} has no priors")));
            }
        }
        let cand: Vec<usize> = region.members.iter().copied().filter(|&m| is_candidate[m]).collect();
        steps += region.members.len() as u64;
        let points: Vec<[f64; 2]> = cand.iter().map(|&m| positions[m]).collect();
        let chosen = greedy_mids(&proximity_graph(&points, config.radius), &mut steps);
        let selected: Vec<usize> = chosen.into_iter().map(|i| cand[i]).collect();
        wake.extend_from_slice(&selected);
        out.push(RegionPlan {
            poi: region.poi,
            candidates: cand.iter().map(|&i| priors[i].device).collect(),
            selected: selected.iter().map(|&i| priors[i].device).collect(),
        });
    }
    let mut wake: Vec<usize> = wake.into_iter().map(|i| priors[i].device).collect();
    wake.sort_unstable();
    Ok(WakePlan {
        regions: out,
        wake,
        scores,
        steps,
    })
}

/// Whether `set` is independent and dominates every node of the graph.
pub fn is_independent_dominating(adjacency: &[Vec<usize>], set: &[usize]) -> bool {
    let mut inside = vec![false; adjacency.len()];
    for &s in set {
        inside[s] = true;
    }
    let independent = set.iter().all(|&s| adjacency[s].iter().all(|&v| !inside[v]));
    let dominating = (0..adjacency.len()).all(|v| inside[v] || adjacency[v].iter().any(|&w| inside[w]));
    independent && dominating
}
