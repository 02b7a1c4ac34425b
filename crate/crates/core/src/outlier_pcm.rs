//! PCM-B: bearing outlier rejection by pairwise angle consistency.
//!
//! For one observer, the angle between two of its bearings does not depend on
//! the observer's attitude, so it can be compared with the angle between the
//! matching baselines of the distance-only embedding. Bearings that agree
//! pairwise form a consistency graph whose maximum clique is kept.

use nalgebra::Vector3;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::sfc::Embedding;
use crate::types::{BearingMeasurement, MeasurementFrame, NoiseConfig, RobotId};

const MIN_BASELINE: f64 = 1e-6;
const SIGMA_THETA_FLOOR: f64 = 1e-3;

pub const DEFAULT_PROB_THRESHOLD: f64 = 0.95;

/// Consistency graph over the bearings of one observer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyGraph {
    /// Indices into the frame's bearing list.
    pub vertices: Vec<usize>,
    pub adjacency: Vec<Vec<bool>>,
    /// Normalized gate statistic `|theta_hat - theta| / sigma` per vertex pair.
    pub statistic: Vec<Vec<f64>>,
}

impl ConsistencyGraph {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Builds a graph directly from an adjacency matrix with zero statistics.
    pub fn from_adjacency(adjacency: Vec<Vec<bool>>) -> Self {
        let n = adjacency.len();
        ConsistencyGraph { vertices: (0..n).collect(), adjacency, statistic: vec![vec![0.0; n]; n] }
    }

    pub fn is_clique(&self, set: &[usize]) -> bool {
        set.iter().enumerate().all(|(a, &u)| set[a + 1..].iter().all(|&v| self.adjacency[u][v]))
    }

    fn weight(&self, set: &[usize]) -> f64 {
        let mut w = 0.0;
        for (a, &u) in set.iter().enumerate() {
            for &v in &set[a + 1..] {
                w += self.statistic[u][v];
            }
        }
        w
    }
}

/// Per-bearing weight, aligned with `MeasurementFrame::bearings`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InlierMask {
    pub keep: Vec<bool>,
}

impl InlierMask {
    pub fn all(n: usize) -> Self {
        InlierMask { keep: vec![true; n] }
    }

    pub fn weight(&self, k: usize) -> f64 {
        if self.keep[k] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Angle between two bearing directions of the same observer.
pub fn bearing_pair_angle(b1: &BearingMeasurement, b2: &BearingMeasurement) -> f64 {
    direction_angle(&b1.direction, &b2.direction)
}

fn direction_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

/// Angle at `i` between the baselines to `j` and `k`, with its linearized std
/// under isotropic position noise `sigma_d`.
pub fn position_pair_angle(
    positions: &[Vector3<f64>],
    i: usize,
    j: usize,
    k: usize,
    sigma_d: f64,
) -> Result<(f64, f64)> {
    let a = positions[j] - positions[i];
    let b = positions[k] - positions[i];
    let (la, lb) = (a.norm(), b.norm());
    if la < MIN_BASELINE || lb < MIN_BASELINE {
        return Err(Error::DegenerateGeometry("zero-length baseline".into()));
    }
    let angle = (a.dot(&b) / (la * lb)).clamp(-1.0, 1.0).acos();
    let std = ((sigma_d / la).powi(2) + (sigma_d / lb).powi(2)).sqrt();
    Ok((angle, std))
}

/// Two-sided standard normal quantile: `P(|Z| <= z) = prob`.
pub fn two_sided_quantile(prob: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    n.inverse_cdf(0.5 + 0.5 * prob)
}

/// Consistency graph for the bearings (indices into `frame.bearings`) taken by
/// `observer`.
pub fn build_consistency_graph(
    frame: &MeasurementFrame,
    observer: RobotId,
    embedding: &Embedding,
    noise: &NoiseConfig,
    prob_threshold: f64,
) -> ConsistencyGraph {
    let z = two_sided_quantile(prob_threshold);
    let i = observer.index();
    let vertices: Vec<usize> = frame
        .bearings_of(observer)
        .into_iter()
        .filter(|&k| {
            let t = frame.bearings[k].target.index();
            embedding.contains(i) && embedding.contains(t)
        })
        .collect();
    let n = vertices.len();
    let mut adjacency = vec![vec![false; n]; n];
    let mut statistic = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let (ba, bb) = (&frame.bearings[vertices[a]], &frame.bearings[vertices[b]]);
            if ba.detection == bb.detection {
                // copies of one physical detection never support each other
                continue;
            }
            let measured = bearing_pair_angle(ba, bb);
            let Ok((predicted, s_theta)) = position_pair_angle(
                &embedding.positions,
                i,
                ba.target.index(),
                bb.target.index(),
                noise.sigma_d,
            ) else {
                continue;
            };
            let s_theta = s_theta.max(SIGMA_THETA_FLOOR);
            let sigma = (2.0 * noise.sigma_b * noise.sigma_b + s_theta * s_theta).sqrt();
            let stat = (measured - predicted).abs() / sigma;
            statistic[a][b] = stat;
            statistic[b][a] = stat;
            if stat <= z {
                adjacency[a][b] = true;
                adjacency[b][a] = true;
            }
        }
    }
    ConsistencyGraph { vertices, adjacency, statistic }
}

struct CliqueSearch<'a> {
    g: &'a ConsistencyGraph,
    best: Vec<usize>,
    best_weight: f64,
}

impl CliqueSearch<'_> {
    /// Greedy sequential coloring; returns candidates ordered by color with
    /// the color bound of each position.
    fn color_sort(&self, p: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut classes: Vec<Vec<usize>> = Vec::new();
        for &v in p {
            match classes.iter_mut().find(|c| c.iter().all(|&u| !self.g.adjacency[u][v])) {
                Some(c) => c.push(v),
                None => classes.push(vec![v]),
            }
        }
        let mut order = Vec::with_capacity(p.len());
        let mut colors = Vec::with_capacity(p.len());
        for (c, class) in classes.iter().enumerate() {
            for &v in class {
                order.push(v);
                colors.push(c + 1);
            }
        }
        (order, colors)
    }

    fn consider(&mut self, r: &[usize], w: f64) {
        if r.len() > self.best.len() || (r.len() == self.best.len() && w < self.best_weight) {
            self.best = r.to_vec();
            self.best_weight = w;
        }
    }

    fn expand(&mut self, r: &mut Vec<usize>, w: f64, p: Vec<usize>) {
        let (order, colors) = self.color_sort(&p);
        for idx in (0..order.len()).rev() {
            let bound = r.len() + colors[idx];
            if bound < self.best.len() || (bound == self.best.len() && w >= self.best_weight) {
                return;
            }
            let v = order[idx];
            let dw: f64 = r.iter().map(|&u| self.g.statistic[u][v]).sum();
            let next: Vec<usize> = order[..idx].iter().copied().filter(|&u| self.g.adjacency[u][v]).collect();
            r.push(v);
            self.consider(r, w + dw);
            if !next.is_empty() {
                self.expand(r, w + dw, next);
            }
            r.pop();
        }
    }
}

/// Maximum-cardinality clique (positions into `graph.vertices`, ascending).
/// Among cliques of equal size, the one with the smallest summed gate
/// statistic over its edges wins.
pub fn max_clique(graph: &ConsistencyGraph) -> Vec<usize> {
    let mut search = CliqueSearch { g: graph, best: Vec::new(), best_weight: f64::INFINITY };
    let all: Vec<usize> = (0..graph.len()).collect();
    search.expand(&mut Vec::new(), 0.0, all);
    let mut best = search.best;
    best.sort_unstable();
    debug_assert!(graph.is_clique(&best));
    debug_assert!((graph.weight(&best) - search.best_weight).abs() < 1e-9 || best.is_empty());
    best
}

/// Runs PCM-B for every observer of `frame`.
pub fn reject_outliers(
    frame: &MeasurementFrame,
    embedding: &Embedding,
    noise: &NoiseConfig,
    prob_threshold: f64,
) -> InlierMask {
    let mut keep = vec![false; frame.bearings.len()];
    let mut observers: Vec<RobotId> = frame.bearings.iter().map(|b| b.observer).collect();
    observers.sort_unstable();
    observers.dedup();
    for obs in observers {
        let own = frame.bearings_of(obs);
        if own.len() <= 1 {
            for k in own {
                keep[k] = true;
            }
            continue;
        }
        let graph = build_consistency_graph(frame, obs, embedding, noise, prob_threshold);
        for v in max_clique(&graph) {
            keep[graph.vertices[v]] = true;
        }
    }
    InlierMask { keep }
}
