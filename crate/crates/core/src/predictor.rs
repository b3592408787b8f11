//! Random-forest regression of per-round resource usage, one forest per
//! resource dimension, and the predicted-availability filter.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::Device;
use crate::resources::{realize_usage, sample_availability, ResourceVector, ResourcesConfig, RoundAvailability};
use crate::rng::{self, tag};

pub const N_FEATURES: usize = 5;
pub type Features = [f64; N_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Mem,
    Pro,
    Dis,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Mem, Dimension::Pro, Dimension::Dis];

    pub fn of(self, v: &ResourceVector) -> f64 {
        match self {
            Dimension::Mem => v.mem,
            Dimension::Pro => v.pro,
            Dimension::Dis => v.dis,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Mem => "mem",
            Dimension::Pro => "pro",
            Dimension::Dis => "dis",
        })
    }
}

impl FromStr for Dimension {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mem" => Ok(Dimension::Mem),
            "pro" => Ok(Dimension::Pro),
            "dis" => Ok(Dimension::Dis),
            other => Err(Error::Forest(format!("unknown dimension {other:?}"))),
        }
    }
}

/// Feature vector: available mem, pro, dis, sample count, client parameter count.
pub fn features(avail: &RoundAvailability, client_params: usize) -> Features {
    [
        avail.available.mem,
        avail.available.pro,
        avail.available.dis,
        avail.sample_count as f64,
        client_params as f64,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundHistoryRecord {
    pub device_id: usize,
    pub round: usize,
    pub features: Features,
    pub target: f64,
    pub dimension: Dimension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub bootstrap: bool,
    /// Refit cadence in training rounds.
    pub refit_every: usize,
    /// Profiling rounds used to seed the usage history before training.
    pub profiling_rounds: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 20,
            max_depth: Some(6),
            min_leaf: 2,
            bootstrap: true,
            refit_every: 10,
            profiling_rounds: 5,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err(Error::Config("predictor: n_trees and min_leaf must be >= 1".into()));
        }
        if self.refit_every == 0 {
            return Err(Error::Config("predictor: refit_every must be >= 1".into()));
        }
        if self.profiling_rounds < 2 {
            return Err(Error::Config("predictor: profiling_rounds must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &Features) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Grows a CART regression tree on `rows` (indices into `xs`/`ys`).
    pub fn fit(xs: &[Features], ys: &[f64], rows: Vec<usize>, max_depth: Option<usize>, min_leaf: usize) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        tree.grow(xs, ys, rows, 0, max_depth, min_leaf.max(1));
        tree
    }

    fn grow(
        &mut self,
        xs: &[Features],
        ys: &[f64],
        rows: Vec<usize>,
        depth: usize,
        max_depth: Option<usize>,
        min_leaf: usize,
    ) -> usize {
        let at = self.nodes.len();
        let mean = rows.iter().map(|&i| ys[i]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf(mean));

        if max_depth.is_some_and(|m| depth >= m) || rows.len() < 2 * min_leaf {
            return at;
        }
        let Some((feature, threshold)) = best_split(xs, ys, &rows, min_leaf) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| xs[i][feature] <= threshold);
        let left = self.grow(xs, ys, l, depth + 1, max_depth, min_leaf);
        let right = self.grow(xs, ys, r, depth + 1, max_depth, min_leaf);
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }
}

/// Exhaustive search over midpoints of sorted unique feature values for the
/// largest SSE reduction. Ties go to the lower feature, then lower threshold.
fn best_split(xs: &[Features], ys: &[f64], rows: &[usize], min_leaf: usize) -> Option<(usize, f64)> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&i| ys[i]).sum();
    let total_sq: f64 = rows.iter().map(|&i| ys[i] * ys[i]).sum();
    let parent_sse = total_sq - total * total / n as f64;
    if parent_sse <= 0.0 {
        return None;
    }

    let mut best: Option<(usize, f64, f64)> = None;
    let mut sorted = rows.to_vec();
    for f in 0..N_FEATURES {
        sorted.sort_by(|&a, &b| xs[a][f].total_cmp(&xs[b][f]).then(a.cmp(&b)));
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for pos in 1..n {
            let y = ys[sorted[pos - 1]];
            left_sum += y;
            left_sq += y * y;
            let lo = xs[sorted[pos - 1]][f];
            let hi = xs[sorted[pos]][f];
            if lo == hi || pos < min_leaf || n - pos < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let right_sq = total_sq - left_sq;
            let sse_l = left_sq - left_sum * left_sum / pos as f64;
            let sse_r = right_sq - right_sum * right_sum / (n - pos) as f64;
            let gain = parent_sse - sse_l - sse_r;
            if gain > 1e-12 * parent_sse.max(1e-300) && best.is_none_or(|(_, _, g)| gain > g) {
                best = Some((f, lo + (hi - lo) / 2.0, gain));
            }
        }
    }
    best.map(|(f, t, _)| (f, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub dimension: Dimension,
    pub trees: Vec<RegressionTree>,
}

impl Forest {
    pub fn is_fitted(&self) -> bool {
        !self.trees.is_empty()
    }

    /// Mean of the tree outputs.
    pub fn predict(&self, x: &Features) -> Result<f64> {
        if !self.is_fitted() {
            return Err(Error::Forest(format!("{} forest is not fitted", self.dimension)));
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }
}

/// Fits one forest. Each tree sees a same-size bootstrap resample drawn from
/// its own keyed stream.
pub fn fit_forest(history: &[RoundHistoryRecord], config: &ForestConfig, seed: u64) -> Result<Forest> {
    if history.len() < 2 {
        return Err(Error::Forest(format!("need at least 2 history records, got {}", history.len())));
    }
    if config.n_trees == 0 {
        return Err(Error::Forest("n_trees must be >= 1".into()));
    }
    let dimension = history[0].dimension;
    let xs: Vec<Features> = history.iter().map(|r| r.features).collect();
    let ys: Vec<f64> = history.iter().map(|r| r.target).collect();
    if xs.iter().flatten().chain(&ys).any(|v| !v.is_finite()) {
        return Err(Error::Forest("history contains non-finite values".into()));
    }
    let n = history.len();
    let trees = (0..config.n_trees)
        .map(|t| {
            let rows: Vec<usize> = if config.bootstrap {
                let mut r = rng::stream(seed, &[tag::FOREST, t as u64]);
                (0..n).map(|_| r.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            RegressionTree::fit(&xs, &ys, rows, config.max_depth, config.min_leaf)
        })
        .collect();
    Ok(Forest { dimension, trees })
}

/// The three per-dimension forests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsagePredictor {
    pub mem: Forest,
    pub pro: Forest,
    pub dis: Forest,
}

impl UsagePredictor {
    /// Fits all three forests on a mixed-dimension history.
    pub fn fit(history: &[RoundHistoryRecord], config: &ForestConfig, seed: u64) -> Result<Self> {
        let fit = |dim: Dimension| {
            let rows: Vec<RoundHistoryRecord> = history.iter().filter(|r| r.dimension == dim).cloned().collect();
            fit_forest(&rows, config, rng::derive(seed, &[dim as u64]))
        };
        let (mem, (pro, dis)) = rayon::join(|| fit(Dimension::Mem), || rayon::join(|| fit(Dimension::Pro), || fit(Dimension::Dis)));
        Ok(Self { mem: mem?, pro: pro?, dis: dis? })
    }

    pub fn forest(&self, dim: Dimension) -> &Forest {
        match dim {
            Dimension::Mem => &self.mem,
            Dimension::Pro => &self.pro,
            Dimension::Dis => &self.dis,
        }
    }

    pub fn predict_usage(&self, avail: &RoundAvailability, client_params: usize) -> Result<ResourceVector> {
        let x = features(avail, client_params);
        Ok(ResourceVector::new(self.mem.predict(&x)?, self.pro.predict(&x)?, self.dis.predict(&x)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Screened {
    pub availability: RoundAvailability,
    pub predicted: ResourceVector,
}

/// Keeps candidates whose predicted usage fits their availability in every
/// dimension (set L). Input order is preserved.
pub fn availability_filter(
    candidates: &[RoundAvailability],
    predictor: &UsagePredictor,
    client_params: usize,
) -> Result<Vec<Screened>> {
    let mut kept = Vec::new();
    for a in candidates {
        let predicted = predictor.predict_usage(a, client_params)?;
        if a.available.covers(&predicted) {
            kept.push(Screened { availability: *a, predicted });
        }
    }
    Ok(kept)
}

pub fn screened_ids(screened: &[Screened]) -> BTreeSet<usize> {
    screened.iter().map(|s| s.availability.device_id).collect()
}

/// Expands one observed usage vector into three per-dimension records.
pub fn records_for(avail: &RoundAvailability, client_params: usize, used: &ResourceVector) -> [RoundHistoryRecord; 3] {
    let x = features(avail, client_params);
    Dimension::ALL.map(|dimension| RoundHistoryRecord {
        device_id: avail.device_id,
        round: avail.round,
        features: x,
        target: dimension.of(used),
        dimension,
    })
}

/// Profiling pass: every device trains once per round and its realized usage
/// is recorded. Records come back sorted by (device, round, dimension).
pub fn bootstrap_history(
    devices: &[&Device],
    rounds: usize,
    seed: u64,
    resources: &ResourcesConfig,
    client_params: usize,
) -> Result<Vec<RoundHistoryRecord>> {
    if rounds < 2 {
        return Err(Error::Forest("profiling needs at least 2 rounds".into()));
    }
    let profile_seed = rng::derive(seed, &[tag::PROFILING]);
    let mut records = Vec::with_capacity(devices.len() * rounds * 3);
    for d in devices {
        for round in 0..rounds {
            let avail = sample_availability(d, round, profile_seed, resources.availability_floor);
            let expected = resources.usage.expected(avail.sample_count, client_params);
            let used = realize_usage(expected, round, d.id, profile_seed, resources.noise_sd);
            records.extend(records_for(&avail, client_params, &used));
        }
    }
    sort_history(&mut records);
    Ok(records)
}

pub fn sort_history(records: &mut [RoundHistoryRecord]) {
    records.sort_by(|a, b| (a.device_id, a.round, a.dimension).cmp(&(b.device_id, b.round, b.dimension)));
}

pub fn write_history_csv<W: Write>(mut out: W, records: &[RoundHistoryRecord]) -> Result<()> {
    writeln!(out, "device_id,round,feat1,feat2,feat3,feat4,feat5,target,dimension")?;
    for r in records {
        let f = r.features;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.device_id, r.round, f[0], f[1], f[2], f[3], f[4], r.target, r.dimension
        )?;
    }
    Ok(())
}

pub fn read_history_csv<R: BufRead>(input: R) -> Result<Vec<RoundHistoryRecord>> {
    let bad = |line: usize, what: &str| Error::Forest(format!("history csv line {line}: {what}"));
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if n == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(bad(n + 1, "expected 9 columns"));
        }
        let num = |i: usize| cols[i].parse::<f64>().map_err(|_| bad(n + 1, "bad number"));
        let int = |i: usize| cols[i].parse::<usize>().map_err(|_| bad(n + 1, "bad integer"));
        out.push(RoundHistoryRecord {
            device_id: int(0)?,
            round: int(1)?,
            features: [num(2)?, num(3)?, num(4)?, num(5)?, num(6)?],
            target: num(7)?,
            dimension: cols[8].parse()?,
        });
    }
    Ok(out)
}
