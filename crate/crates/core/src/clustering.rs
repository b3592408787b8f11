//! k-means over min-max normalized capacity vectors.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resources::ResourceVector;
use crate::rng::{self, tag};

type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent random initializations; the lowest final SSE wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 3, max_iter: 100, tol: 1e-6, restarts: 10 }
    }
}

/// Per-dimension min-max scaling to `[0, 1]`. Constant dimensions map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Point,
    pub range: Point,
}

impl MinMax {
    pub fn fit(points: &[(usize, ResourceVector)]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for (_, p) in points {
            for (d, v) in p.to_array().into_iter().enumerate() {
                min[d] = min[d].min(v);
                max[d] = max[d].max(v);
            }
        }
        let range = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
        Self { min, range }
    }

    pub fn apply(&self, p: &ResourceVector) -> Point {
        let a = p.to_array();
        std::array::from_fn(|d| if self.range[d] > 0.0 { (a[d] - self.min[d]) / self.range[d] } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Centroids in normalized space.
    pub centroids: Vec<Point>,
    pub membership: BTreeMap<usize, usize>,
    /// Cluster indices, most capable first.
    pub order: Vec<usize>,
    pub scaling: MinMax,
    /// SSE after each iteration of the winning initialization.
    pub sse_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.membership
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn inertia(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
}

fn nearest(p: &Point, centroids: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist2(p, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn means(points: &[Point], assign: &[usize], k: usize) -> Vec<Point> {
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        for d in 0..3 {
            sums[c][d] += p[d];
        }
        counts[c] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| s.map(|v| v / n.max(1) as f64))
        .collect()
}

fn sse(points: &[Point], assign: &[usize], centroids: &[Point]) -> f64 {
    points.iter().zip(assign).map(|(p, &c)| dist2(p, &centroids[c])).sum()
}

struct Run {
    assign: Vec<usize>,
    centroids: Vec<Point>,
    history: Vec<f64>,
}

fn lloyd(points: &[Point], init: Vec<Point>, max_iter: usize, tol: f64) -> Run {
    let k = init.len();
    let mut centroids = init;
    let mut assign: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();

    for _ in 0..max_iter {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();

        // Repair empty clusters with the point farthest from its centroid,
        // taken from a cluster that can spare it.
        let mut counts = vec![0usize; k];
        for &c in &next {
            counts[c] += 1;
        }
        let mut repaired = false;
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let donor = (0..points.len())
                .filter(|&i| counts[next[i]] > 1)
                .max_by(|&a, &b| {
                    dist2(&points[a], &centroids[next[a]])
                        .total_cmp(&dist2(&points[b], &centroids[next[b]]))
                        .then(b.cmp(&a))
                });
            if let Some(i) = donor {
                counts[next[i]] -= 1;
                counts[empty] += 1;
                next[i] = empty;
                centroids[empty] = points[i];
                repaired = true;
            }
        }

        let unchanged = next == assign && !repaired;
        assign = next;
        let updated = means(points, &assign, k);
        let movement = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(sse(points, &assign, &centroids));
        if unchanged || movement < tol {
            break;
        }
    }
    Run { assign, centroids, history }
}

/// Fits k-means on the capacity vectors of `points` (device id, capacity).
pub fn kmeans_fit(points: &[(usize, ResourceVector)], config: &KMeansConfig, seed: u64) -> Result<ClusterAssignment> {
    let k = config.k;
    if k == 0 {
        return Err(Error::Clustering("k must be >= 1".into()));
    }
    if config.max_iter == 0 {
        return Err(Error::Clustering("max_iter must be >= 1".into()));
    }
    if k > points.len() {
        return Err(Error::Clustering(format!("k = {k} exceeds {} points", points.len())));
    }

    let scaling = MinMax::fit(points);
    let normalized: Vec<Point> = points.iter().map(|(_, p)| scaling.apply(p)).collect();

    let mut distinct: Vec<Point> = Vec::new();
    for p in &normalized {
        if !distinct.contains(p) {
            distinct.push(*p);
        }
    }
    if k > distinct.len() {
        return Err(Error::Clustering(format!(
            "k = {k} exceeds {} distinct points",
            distinct.len()
        )));
    }

    let mut best: Option<Run> = None;
    for restart in 0..config.restarts.max(1) {
        let mut r = rng::stream(seed, &[tag::KMEANS, restart as u64]);
        let init: Vec<Point> = index::sample(&mut r, distinct.len(), k)
            .into_iter()
            .map(|i| distinct[i])
            .collect();
        let run = lloyd(&normalized, init, config.max_iter, config.tol);
        let better = match &best {
            None => true,
            Some(b) => run.history.last() < b.history.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");

    let membership = points.iter().map(|(id, _)| *id).zip(run.assign.iter().copied()).collect();
    let mut assignment = ClusterAssignment {
        k,
        centroids: run.centroids,
        membership,
        order: Vec::new(),
        scaling,
        sse_history: run.history,
    };
    assignment.order = order_clusters(&assignment, points);
    Ok(assignment)
}

/// Orders clusters by descending mean normalized capacity norm; ties keep
/// the lower cluster index first.
pub fn order_clusters(assignment: &ClusterAssignment, points: &[(usize, ResourceVector)]) -> Vec<usize> {
    let mut sum = vec![0.0; assignment.k];
    let mut count = vec![0usize; assignment.k];
    for (id, p) in points {
        if let Some(&c) = assignment.membership.get(id) {
            let x = assignment.scaling.apply(p);
            sum[c] += x.iter().map(|v| v * v).sum::<f64>().sqrt();
            count[c] += 1;
        }
    }
    let score: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n.max(1) as f64).collect();
    let mut order: Vec<usize> = (0..assignment.k).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order
}
