//! Round loop for the four arms: centralized (cen), vanilla split learning
//! (sl), clustered split-federated learning with random selection (csfl) and
//! the resource-aware variant (crsfl).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, ClusterAssignment};
use crate::config::{Arm, CostModel, ExperimentConfig};
use crate::error::{Error, Result};
use crate::population::{generate_population, pooled_dataset, Dataset, Device, Population};
use crate::predictor::{
    availability_filter, bootstrap_history, records_for, RoundHistoryRecord, UsagePredictor,
};
use crate::resources::{
    capacity_filter, drops_out, model_requirements, realize_usage, sample_availability, ResourceVector,
    RoundAvailability, UsageObservation, BYTES_PER_MB,
};
use crate::rng::{self, tag};
use crate::selector::{ga_select, Candidate, SelectionHistory};
use crate::splitnn::{evaluate, fedavg, train_client, LayerStack, MomentumState, SplitModel};

/// Everything the arms share: population, eligible set, clusters and the
/// initial model.
#[derive(Debug, Clone)]
pub struct Environment {
    pub config: ExperimentConfig,
    pub population: Population,
    /// Per-device training data, keyed by device id.
    pub train: BTreeMap<usize, Dataset>,
    pub pooled_train: Dataset,
    /// Held-out samples of every device.
    pub test: Dataset,
    pub requirements: ResourceVector,
    /// Devices passing the capacity filter (set J).
    pub eligible: BTreeSet<usize>,
    pub clusters: ClusterAssignment,
    pub initial: SplitModel,
}

impl Environment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.run.seed;
        let population = generate_population(seed, &config.population)?;
        let dims = config.model.layer_dims(config.population.feature_dim, population.classes());
        let initial = SplitModel::init(&dims, config.model.cut, seed)?;
        Self::with_model(config, population, initial)
    }

    /// Builds the environment around a given initial model, e.g. one loaded
    /// from a checkpoint.
    pub fn with_model(config: &ExperimentConfig, population: Population, initial: SplitModel) -> Result<Self> {
        config.validate()?;
        if initial.layer_dims != config.model.layer_dims(config.population.feature_dim, population.classes())
            || initial.cut != config.model.cut
        {
            return Err(Error::Config("initial model does not match the model section".into()));
        }
        let requirements = model_requirements(initial.client_params());
        let eligible = capacity_filter(&population.devices, &requirements);
        if eligible.is_empty() {
            return Err(Error::Aborted("no device meets the model requirements".into()));
        }
        let points: Vec<(usize, ResourceVector)> =
            eligible.iter().map(|&id| (id, population.device(id).capacity)).collect();
        let clusters = kmeans_fit(&points, &config.clustering, seed_for(config, tag::KMEANS))?;
        let all: Vec<&Device> = population.devices.iter().collect();
        let pooled = pooled_dataset(&all)?;
        let train = population
            .devices
            .iter()
            .map(|d| {
                let n = d.shard.train_len();
                (d.id, Dataset { features: d.shard.train_features(), labels: vec![d.owner_label; n] })
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            population,
            train,
            pooled_train: pooled.train,
            test: pooled.test,
            requirements,
            eligible,
            clusters,
            initial,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.run.seed
    }

    pub fn client_params(&self) -> usize {
        self.initial.client_params()
    }

    fn availability(&self, id: usize, round: usize) -> RoundAvailability {
        let r = &self.config.resources;
        sample_availability(self.population.device(id), round, self.seed(), r.availability_floor)
    }

    fn realized(&self, avail: &RoundAvailability) -> ResourceVector {
        let r = &self.config.resources;
        let expected = r.usage.expected(avail.sample_count, self.client_params());
        realize_usage(expected, avail.round, avail.device_id, self.seed(), r.noise_sd)
    }

    fn span_ms(&self, avail: &RoundAvailability) -> f64 {
        let samples = avail.sample_count * self.config.model.local_epochs;
        train_time_ms(&self.config.costs, samples, self.client_params(), avail.available.pro)
    }

    fn batch_rows(&self, samples: usize) -> Vec<usize> {
        let m = &self.config.model;
        let mut rows = Vec::new();
        for _ in 0..m.local_epochs {
            let mut left = samples;
            while left > 0 {
                let b = left.min(m.batch_size);
                rows.push(b);
                left -= b;
            }
        }
        rows
    }
}

fn seed_for(config: &ExperimentConfig, t: u64) -> u64 {
    rng::derive(config.run.seed, &[t])
}

/// Per-round metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub arm: Arm,
    pub accuracy: f64,
    pub loss: f64,
    pub dropped: usize,
    pub traffic_mb: f64,
    pub train_time_ms: f64,
    pub idle_time_ms: f64,
    pub selected: usize,
}

/// One selected client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub round: usize,
    pub cluster: Option<usize>,
    pub device_id: usize,
    pub available: ResourceVector,
    /// Forest prediction at selection time (crsfl only).
    pub predicted: Option<ResourceVector>,
    pub realized: ResourceVector,
    pub dropped: bool,
    pub train_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: Arm,
    pub metrics: Vec<RoundMetrics>,
    pub clients: Vec<ClientRecord>,
    /// Usage history the forests were trained on (crsfl only).
    pub history: Vec<RoundHistoryRecord>,
    pub usage: Vec<UsageObservation>,
    pub final_model: SplitModel,
}

/// Modelled compute time of one client's local training.
pub fn train_time_ms(costs: &CostModel, samples: usize, client_params: usize, processing_units: f64) -> f64 {
    costs.compute_ms * samples as f64 * client_params as f64 / processing_units.max(f64::MIN_POSITIVE)
}

/// Work done by one selected client of a parallel group.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientWork {
    pub device_id: usize,
    pub train_ms: f64,
    /// Rows of each smashed batch sent to the server.
    pub batch_rows: Vec<usize>,
    /// Whether the client finished and uploaded its weights.
    pub completed: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostSummary {
    pub traffic_bytes: f64,
    /// Sum of per-client training times.
    pub train_ms: f64,
    /// Slowest client.
    pub wall_ms: f64,
    /// Sum over clients of the time spent waiting for the slowest one.
    pub idle_ms: f64,
}

impl std::ops::AddAssign for CostSummary {
    fn add_assign(&mut self, o: Self) {
        self.traffic_bytes += o.traffic_bytes;
        self.train_ms += o.train_ms;
        self.wall_ms += o.wall_ms;
        self.idle_ms += o.idle_ms;
    }
}

/// Smashed activations up and their gradients down, one message each way per
/// batch.
pub fn smashed_bytes(batch_rows: &[usize], cut_width: usize, costs: &CostModel) -> f64 {
    batch_rows
        .iter()
        .map(|&r| 2.0 * (r as f64 * cut_width as f64 * costs.bytes_per_real + costs.message_overhead_bytes))
        .sum()
}

pub fn weights_bytes(client_params: usize, costs: &CostModel) -> f64 {
    client_params as f64 * costs.bytes_per_real + costs.message_overhead_bytes
}

/// Costs of clients that train in parallel and synchronise at the end.
/// Dropped clients still count towards wall-clock, idle time and smashed
/// traffic but upload no weights.
pub fn account_costs(work: &[ClientWork], client_params: usize, cut_width: usize, costs: &CostModel) -> CostSummary {
    let wall = work.iter().map(|w| w.train_ms).fold(0.0, f64::max);
    let mut s = CostSummary { wall_ms: wall, ..Default::default() };
    for w in work {
        s.train_ms += w.train_ms;
        s.idle_ms += wall - w.train_ms;
        s.traffic_bytes += smashed_bytes(&w.batch_rows, cut_width, costs);
        if w.completed {
            s.traffic_bytes += weights_bytes(client_params, costs);
        }
    }
    s
}

struct GroupOutcome {
    client: LayerStack,
    server: LayerStack,
    costs: CostSummary,
    dropped: usize,
}

/// Trains one cluster's selected clients in parallel from the incoming
/// globals and averages the two halves over those that finished.
fn train_group(
    env: &Environment,
    arm: Arm,
    round: usize,
    cluster: usize,
    selected: &[(RoundAvailability, Option<ResourceVector>)],
    client: &LayerStack,
    server: &LayerStack,
    records: &mut Vec<ClientRecord>,
    usage: &mut Vec<UsageObservation>,
) -> Result<GroupOutcome> {
    let training = env.config.model.training();
    let mut work = Vec::with_capacity(selected.len());
    let mut completers = Vec::new();
    for (avail, predicted) in selected {
        let realized = env.realized(avail);
        let dropped = drops_out(&realized, &avail.available);
        let train_ms = env.span_ms(avail);
        records.push(ClientRecord {
            round,
            cluster: Some(cluster),
            device_id: avail.device_id,
            available: avail.available,
            predicted: *predicted,
            realized,
            dropped,
            train_ms,
        });
        usage.push(UsageObservation { device_id: avail.device_id, round, used: realized, completed: !dropped });
        work.push(ClientWork {
            device_id: avail.device_id,
            train_ms,
            batch_rows: env.batch_rows(avail.sample_count),
            completed: !dropped,
        });
        if !dropped {
            completers.push(avail.device_id);
        }
    }
    let results = completers
        .par_iter()
        .map(|&id| {
            let keys = [tag::SHUFFLE, arm as u64, round as u64, id as u64];
            train_client(client, server, &env.train[&id], &training, env.seed(), &keys).map(|r| (id, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let clients: Vec<(usize, &LayerStack)> = results.iter().map(|(id, r)| (*id, &r.client)).collect();
    let servers: Vec<(usize, &LayerStack)> = results.iter().map(|(id, r)| (*id, &r.server)).collect();
    let costs = account_costs(&work, env.client_params(), env.initial.cut_width(), &env.config.costs);
    Ok(GroupOutcome {
        client: fedavg(&clients).unwrap_or_else(|| client.clone()),
        server: fedavg(&servers).unwrap_or_else(|| server.clone()),
        costs,
        dropped: work.len() - completers.len(),
    })
}

fn metrics_row(
    env: &Environment,
    arm: Arm,
    round: usize,
    client: &LayerStack,
    server: &LayerStack,
    costs: CostSummary,
    dropped: usize,
    selected: usize,
) -> Result<RoundMetrics> {
    let (accuracy, loss) = evaluate(client, server, &env.test)?;
    Ok(RoundMetrics {
        round: round + 1,
        arm,
        accuracy,
        loss,
        dropped,
        traffic_mb: costs.traffic_bytes / BYTES_PER_MB,
        train_time_ms: costs.train_ms,
        idle_time_ms: costs.idle_ms,
        selected,
    })
}

/// Resource-aware clustered split-federated learning.
pub fn run_crsfl(env: &Environment) -> Result<ArmRun> {
    let cfg = &env.config;
    let arm = Arm::Crsfl;
    let params = env.client_params();
    let eligible: Vec<&Device> = env.eligible.iter().map(|&id| env.population.device(id)).collect();
    let mut history = bootstrap_history(&eligible, cfg.predictor.profiling_rounds, env.seed(), &cfg.resources, params)?;
    let forest_seed = seed_for(cfg, tag::FOREST);
    let mut predictor = UsagePredictor::fit(&history, &cfg.predictor, forest_seed)?;
    let mut flags = SelectionHistory::default();
    let (mut client, mut server) = (env.initial.client.clone(), env.initial.server.clone());
    let (mut metrics, mut records, mut usage) = (Vec::new(), Vec::new(), Vec::new());

    for round in 0..cfg.run.rounds {
        let mut costs = CostSummary::default();
        let (mut dropped, mut selected_total) = (0, 0);
        for &cluster in &env.clusters.order {
            let avail: Vec<RoundAvailability> =
                env.clusters.members(cluster).into_iter().map(|id| env.availability(id, round)).collect();
            let screened = availability_filter(&avail, &predictor, params)?;
            if screened.is_empty() {
                continue;
            }
            let candidates: Vec<Candidate> = screened
                .iter()
                .map(|s| {
                    let id = s.availability.device_id;
                    Candidate {
                        device_id: id,
                        owner_label: env.population.device(id).owner_label,
                        sample_count: s.availability.sample_count,
                        predicted_pro: s.predicted.pro,
                        hist_flag: flags.flag(cluster, id),
                    }
                })
                .collect();
            let ga_seed = rng::derive(env.seed(), &[tag::GA, round as u64, cluster as u64]);
            let mask = ga_select(&candidates, &cfg.selector.weights, &cfg.selector.ga, ga_seed)?;
            flags.update(cluster, &candidates, &mask)?;
            let chosen: Vec<(RoundAvailability, Option<ResourceVector>)> =
                mask.selected(&screened).map(|s| (s.availability, Some(s.predicted))).collect();
            selected_total += chosen.len();
            let first = records.len();
            let out = train_group(env, arm, round, cluster, &chosen, &client, &server, &mut records, &mut usage)?;
            for rec in &records[first..] {
                let a = chosen.iter().find(|(a, _)| a.device_id == rec.device_id).expect("record of a chosen client");
                history.extend(records_for(&a.0, params, &rec.realized));
            }
            client = out.client;
            server = out.server;
            costs += out.costs;
            dropped += out.dropped;
        }
        metrics.push(metrics_row(env, arm, round, &client, &server, costs, dropped, selected_total)?);
        if (round + 1) % cfg.predictor.refit_every == 0 && round + 1 < cfg.run.rounds {
            let seed = rng::derive(forest_seed, &[round as u64 + 1]);
            predictor = UsagePredictor::fit(&history, &cfg.predictor, seed)?;
        }
    }
    Ok(ArmRun { arm, metrics, clients: records, history, usage, final_model: env.initial.with_halves(client, server) })
}

/// Clustered split-federated learning with a uniformly random subset of
/// each cluster per round.
pub fn run_csfl(env: &Environment) -> Result<ArmRun> {
    let cfg = &env.config;
    let arm = Arm::Csfl;
    let (mut client, mut server) = (env.initial.client.clone(), env.initial.server.clone());
    let (mut metrics, mut records, mut usage) = (Vec::new(), Vec::new(), Vec::new());
    for round in 0..cfg.run.rounds {
        let mut costs = CostSummary::default();
        let (mut dropped, mut selected_total) = (0, 0);
        for &cluster in &env.clusters.order {
            let mut members = env.clusters.members(cluster);
            let take = ((members.len() as f64 * cfg.selector.random_fraction).round() as usize).clamp(1, members.len());
            let mut r = rng::stream(env.seed(), &[tag::CSFL_PICK, round as u64, cluster as u64]);
            members.shuffle(&mut r);
            members.truncate(take);
            members.sort_unstable();
            let chosen: Vec<(RoundAvailability, Option<ResourceVector>)> =
                members.iter().map(|&id| (env.availability(id, round), None)).collect();
            selected_total += chosen.len();
            let out = train_group(env, arm, round, cluster, &chosen, &client, &server, &mut records, &mut usage)?;
            client = out.client;
            server = out.server;
            costs += out.costs;
            dropped += out.dropped;
        }
        metrics.push(metrics_row(env, arm, round, &client, &server, costs, dropped, selected_total)?);
    }
    Ok(ArmRun {
        arm,
        metrics,
        clients: records,
        history: Vec::new(),
        usage,
        final_model: env.initial.with_halves(client, server),
    })
}

/// Vanilla split learning: clients train one after another, handing the
/// client half on through the server, until the round's latency budget is
/// spent.
/// `budgets[round]` is that budget in milliseconds.
pub fn run_sl(env: &Environment, budgets: &[f64]) -> Result<ArmRun> {
    let cfg = &env.config;
    let arm = Arm::Sl;
    if budgets.len() < cfg.run.rounds {
        return Err(Error::Config(format!("sl needs {} round budgets, got {}", cfg.run.rounds, budgets.len())));
    }
    let training = cfg.model.training();
    let params = env.client_params();
    let (mut client, mut server) = (env.initial.client.clone(), env.initial.server.clone());
    let (mut metrics, mut records, mut usage) = (Vec::new(), Vec::new(), Vec::new());
    for (round, &budget) in budgets.iter().enumerate().take(cfg.run.rounds) {
        let mut order: Vec<usize> = env.eligible.iter().copied().collect();
        order.shuffle(&mut rng::stream(env.seed(), &[tag::SL_ORDER, round as u64]));
        let mut costs = CostSummary::default();
        let (mut dropped, mut admitted) = (0, 0);
        for id in order {
            let avail = env.availability(id, round);
            let span = env.span_ms(&avail);
            if admitted > 0 && costs.train_ms + span > budget {
                break;
            }
            admitted += 1;
            let realized = env.realized(&avail);
            let drop = drops_out(&realized, &avail.available);
            costs.train_ms += span;
            costs.idle_ms += (budget - span).max(0.0);
            // The incoming client half arrives through the server; completers
            // send theirs back the same way for the next client.
            costs.traffic_bytes += smashed_bytes(&env.batch_rows(avail.sample_count), env.initial.cut_width(), &cfg.costs);
            costs.traffic_bytes += weights_bytes(params, &cfg.costs);
            records.push(ClientRecord {
                round,
                cluster: None,
                device_id: id,
                available: avail.available,
                predicted: None,
                realized,
                dropped: drop,
                train_ms: span,
            });
            usage.push(UsageObservation { device_id: id, round, used: realized, completed: !drop });
            if drop {
                dropped += 1;
                continue;
            }
            costs.traffic_bytes += weights_bytes(params, &cfg.costs);
            let keys = [tag::SHUFFLE, arm as u64, round as u64, id as u64];
            let r = train_client(&client, &server, &env.train[&id], &training, env.seed(), &keys)?;
            client = r.client;
            server = r.server;
        }
        costs.wall_ms = costs.train_ms;
        metrics.push(metrics_row(env, arm, round, &client, &server, costs, dropped, admitted)?);
    }
    Ok(ArmRun {
        arm,
        metrics,
        clients: records,
        history: Vec::new(),
        usage,
        final_model: env.initial.with_halves(client, server),
    })
}

/// Centralized upper bound: the unsplit network trained on the pooled
/// training data, one epoch per round.
pub fn run_centralized(env: &Environment) -> Result<ArmRun> {
    let cfg = &env.config;
    let arm = Arm::Cen;
    let training = cfg.model.training();
    let mut model = env.initial.monolithic();
    let mut momentum = MomentumState::for_stack(&model);
    let data = &env.pooled_train;
    let mut metrics = Vec::new();
    for round in 0..cfg.run.rounds {
        for epoch in 0..training.epochs {
            let keys = [tag::SHUFFLE, arm as u64, round as u64, epoch as u64];
            for rows in crate::splitnn::batch_order(data.len(), training.batch_size, env.seed(), &keys) {
                let x = data.features.select(ndarray::Axis(0), &rows);
                let y: Vec<usize> = rows.iter().map(|&i| data.labels[i]).collect();
                crate::splitnn::monolithic_step(&mut model, &mut momentum, &x, &y, &training.opt)?;
            }
        }
        let split = SplitModel::from_monolithic(&model, cfg.model.cut);
        let mut row = metrics_row(env, arm, round, &split.client, &split.server, CostSummary::default(), 0, 0)?;
        row.selected = env.population.devices.len();
        metrics.push(row);
    }
    let final_model = SplitModel::from_monolithic(&model, cfg.model.cut);
    Ok(ArmRun { arm, metrics, clients: Vec::new(), history: Vec::new(), usage: Vec::new(), final_model })
}

/// Per-round latency budgets SL runs under: the summed client training time
/// of the matching CRSFL round, or the configured constant.
pub fn sl_budgets(env: &Environment, crsfl: Option<&ArmRun>) -> Result<Vec<f64>> {
    if let Some(b) = env.config.run.sl_budget_ms {
        return Ok(vec![b; env.config.run.rounds]);
    }
    let owned;
    let run = match crsfl {
        Some(r) => r,
        None => {
            owned = run_crsfl(env)?;
            &owned
        }
    };
    Ok(run.metrics.iter().map(|m| m.train_time_ms.max(f64::MIN_POSITIVE)).collect())
}

pub fn run_arm(env: &Environment, arm: Arm) -> Result<ArmRun> {
    match arm {
        Arm::Cen => run_centralized(env),
        Arm::Csfl => run_csfl(env),
        Arm::Crsfl => run_crsfl(env),
        Arm::Sl => run_sl(env, &sl_budgets(env, None)?),
    }
}

/// Runs the requested arms on one environment. SL reuses the CRSFL budgets
/// when CRSFL is among the arms.
pub fn run_arms(env: &Environment, arms: &[Arm]) -> Result<Vec<ArmRun>> {
    let mut runs: Vec<ArmRun> = Vec::new();
    let mut ordered: Vec<Arm> = arms.to_vec();
    ordered.sort_by_key(|a| (*a == Arm::Sl, *a));
    ordered.dedup();
    for arm in ordered {
        let run = if arm == Arm::Sl {
            let crsfl = runs.iter().find(|r| r.arm == Arm::Crsfl);
            run_sl(env, &sl_budgets(env, crsfl)?)?
        } else {
            run_arm(env, arm)?
        };
        runs.push(run);
    }
    runs.sort_by_key(|r| arms.iter().position(|a| *a == r.arm));
    Ok(runs)
}

pub const METRICS_HEADER: &str = "round,arm,accuracy,loss,dropped,traffic_mb,train_time_ms,idle_time_ms,selected";

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[RoundMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.round, m.arm, m.accuracy, m.loss, m.dropped, m.traffic_mb, m.train_time_ms, m.idle_time_ms, m.selected
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<RoundMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config("metrics csv: unexpected header".into()));
    }
    let bad = |line: &str| Error::Config(format!("metrics csv: bad row {line:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
            let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(line));
            Ok(RoundMetrics {
                round: int(0)?,
                arm: f[1].parse()?,
                accuracy: num(2)?,
                loss: num(3)?,
                dropped: int(4)?,
                traffic_mb: num(5)?,
                train_time_ms: num(6)?,
                idle_time_ms: num(7)?,
                selected: int(8)?,
            })
        })
        .collect()
}
