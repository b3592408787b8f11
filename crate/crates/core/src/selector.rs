//! Multi-objective client selection.
//!
//! A selection is a bit mask over a cluster's screened candidates. Five
//! objectives are normalized to comparable scales and combined as a weighted
//! sum `w1*n + w2*u + w3*s - w4*v + w5*h`:
//!
//! * `n`: fraction of candidates selected,
//! * `u`: fraction of the candidates' distinct labels covered,
//! * `s`: fraction of the candidates' training samples covered,
//! * `v`: variance of the selected predicted processing usage, relative to
//!   the variance over all candidates,
//! * `h`: fraction of the set history flags (passed over last time) picked up.
//!
//! [`ga_select`] searches masks with a genetic algorithm; [`brute_force_select`]
//! enumerates every mask and serves as the exact reference for small inputs.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub device_id: usize,
    pub owner_label: usize,
    pub sample_count: usize,
    pub predicted_pro: f64,
    pub hist_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 5]", into = "[f64; 5]")]
pub struct ObjectiveWeights([f64; 5]);

impl ObjectiveWeights {
    pub fn new(w: [f64; 5]) -> Result<Self> {
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Selector(format!("weights must lie in [0, 1]: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Selector(format!("weights must sum to 1, got {sum}")));
        }
        Ok(Self(w))
    }

    pub fn equal() -> Self {
        Self([0.2; 5])
    }

    pub fn values(&self) -> [f64; 5] {
        self.0
    }
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self::equal()
    }
}

impl TryFrom<[f64; 5]> for ObjectiveWeights {
    type Error = Error;
    fn try_from(w: [f64; 5]) -> Result<Self> {
        Self::new(w)
    }
}

impl From<ObjectiveWeights> for [f64; 5] {
    fn from(w: ObjectiveWeights) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SelectionMask(pub Vec<bool>);

impl SelectionMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    /// Bit `i` is set when bit `i` of `bits` is 1.
    pub fn from_bits(bits: u64, n: usize) -> Self {
        Self((0..n).map(|i| bits >> i & 1 == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn selected<'a, T>(&'a self, items: &'a [T]) -> impl Iterator<Item = &'a T> + 'a {
        items.iter().zip(&self.0).filter(|(_, &b)| b).map(|(t, _)| t)
    }
}

/// The five normalized objective values of one mask.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Objectives {
    pub devices: f64,
    pub labels: f64,
    pub samples: f64,
    pub variance: f64,
    pub history: f64,
}

impl Objectives {
    pub fn score(&self, w: &ObjectiveWeights) -> f64 {
        let w = w.0;
        w[0] * self.devices + w[1] * self.labels + w[2] * self.samples - w[3] * self.variance + w[4] * self.history
    }
}

/// Population variance with values summed in sorted order, so the result
/// does not depend on input order.
fn variance(mut values: Vec<f64>) -> f64 {
    if values.len() <= 1 {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Per-instance normalizers, computed once per candidate list.
#[derive(Debug, Clone)]
struct Scales {
    devices: usize,
    labels: usize,
    samples: u64,
    variance: f64,
    flags: usize,
}

impl Scales {
    fn of(candidates: &[Candidate]) -> Self {
        Self {
            devices: candidates.len(),
            labels: candidates.iter().map(|c| c.owner_label).collect::<BTreeSet<_>>().len(),
            samples: candidates.iter().map(|c| c.sample_count as u64).sum(),
            variance: variance(candidates.iter().map(|c| c.predicted_pro).collect()),
            flags: candidates.iter().filter(|c| c.hist_flag).count(),
        }
    }

    fn objectives(&self, mask: &SelectionMask, candidates: &[Candidate]) -> Objectives {
        let chosen: Vec<&Candidate> = mask.selected(candidates).collect();
        if chosen.is_empty() {
            return Objectives::default();
        }
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        let labels = chosen.iter().map(|c| c.owner_label).collect::<BTreeSet<_>>().len();
        let samples: u64 = chosen.iter().map(|c| c.sample_count as u64).sum();
        let flags = chosen.iter().filter(|c| c.hist_flag).count();
        let var = variance(chosen.iter().map(|c| c.predicted_pro).collect());
        Objectives {
            devices: ratio(chosen.len() as f64, self.devices as f64),
            labels: ratio(labels as f64, self.labels as f64),
            samples: ratio(samples as f64, self.samples as f64),
            variance: ratio(var, self.variance),
            history: ratio(flags as f64, self.flags as f64),
        }
    }
}

fn check_len(mask: &SelectionMask, candidates: &[Candidate]) -> Result<()> {
    if mask.len() != candidates.len() {
        return Err(Error::Selector(format!(
            "mask has {} bits for {} candidates",
            mask.len(),
            candidates.len()
        )));
    }
    Ok(())
}

pub fn objectives(mask: &SelectionMask, candidates: &[Candidate]) -> Result<Objectives> {
    check_len(mask, candidates)?;
    Ok(Scales::of(candidates).objectives(mask, candidates))
}

/// Weighted fitness of `mask`. The empty mask scores 0.
pub fn fitness(mask: &SelectionMask, candidates: &[Candidate], weights: &ObjectiveWeights) -> Result<f64> {
    Ok(objectives(mask, candidates)?.score(weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    /// Stop after this many generations without improvement of the best.
    pub patience: usize,
    /// Crossover happens when a uniform draw exceeds this ratio.
    pub crossover_ratio: f64,
    /// Stop as soon as the best fitness reaches this value.
    pub target_fitness: Option<f64>,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 100,
            mutation_rate: 0.05,
            patience: 20,
            crossover_ratio: 0.5,
            target_fitness: None,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config("selector: population must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) || !(0.0..=1.0).contains(&self.crossover_ratio) {
            return Err(Error::Config("selector: mutation_rate and crossover_ratio must be in [0, 1]".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("selector: patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaOutcome {
    pub mask: SelectionMask,
    pub fitness: f64,
    /// Best fitness after initialization and after each generation.
    pub best_history: Vec<f64>,
}

struct Scored {
    mask: SelectionMask,
    fitness: f64,
}

fn rank(pop: &mut [Scored]) {
    // Stable: equal fitness keeps insertion order.
    pop.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
}

/// Runs the genetic search and reports the best mask with its trajectory.
pub fn ga_search(candidates: &[Candidate], weights: &ObjectiveWeights, config: &GaConfig, seed: u64) -> Result<GaOutcome> {
    let n = candidates.len();
    if n == 0 {
        return Err(Error::Selector("no candidates to select from".into()));
    }
    config.validate()?;
    let scales = Scales::of(candidates);
    let score = |mask: SelectionMask| {
        let fitness = scales.objectives(&mask, candidates).score(weights);
        Scored { mask, fitness }
    };

    let mut pop: Vec<Scored> = (0..config.population)
        .map(|i| {
            if i == 0 {
                return score(SelectionMask::all(n));
            }
            let mut r = rng::stream(seed, &[tag::GA, 0, i as u64]);
            score(SelectionMask((0..n).map(|_| r.random_bool(0.5)).collect()))
        })
        .collect();
    rank(&mut pop);

    let mut best = SelectionMask(pop[0].mask.0.clone());
    let mut best_fitness = pop[0].fitness;
    let mut best_history = vec![best_fitness];
    let mut stale = 0;
    let keep = config.population.div_ceil(2);

    for generation in 1..=config.generations {
        if config.target_fitness.is_some_and(|t| best_fitness >= t) {
            break;
        }
        pop.truncate(keep);
        let children: Vec<Scored> = (keep..config.population)
            .map(|i| {
                let mut r = rng::stream(seed, &[tag::GA, generation as u64, i as u64]);
                let a = &pop[r.random_range(0..keep)].mask.0;
                let b = &pop[r.random_range(0..keep)].mask.0;
                let mut child = a.clone();
                if n >= 2 && r.random::<f64>() > config.crossover_ratio {
                    let cut = r.random_range(1..n);
                    child[cut..].copy_from_slice(&b[cut..]);
                }
                for bit in child.iter_mut() {
                    if r.random_bool(config.mutation_rate) {
                        *bit = !*bit;
                    }
                }
                score(SelectionMask(child))
            })
            .collect();
        pop.extend(children);
        rank(&mut pop);

        if pop[0].fitness > best_fitness {
            best_fitness = pop[0].fitness;
            best = SelectionMask(pop[0].mask.0.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        best_history.push(best_fitness);
        if stale >= config.patience {
            break;
        }
    }

    Ok(GaOutcome { mask: best, fitness: best_fitness, best_history })
}

pub fn ga_select(candidates: &[Candidate], weights: &ObjectiveWeights, config: &GaConfig, seed: u64) -> Result<SelectionMask> {
    ga_search(candidates, weights, config, seed).map(|o| o.mask)
}

pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Exact argmax over all `2^n` masks; ties resolve to the lexicographically
/// smallest mask.
pub fn brute_force_select(candidates: &[Candidate], weights: &ObjectiveWeights) -> Result<(SelectionMask, f64)> {
    let n = candidates.len();
    if n == 0 {
        return Err(Error::Selector("no candidates to select from".into()));
    }
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::Selector(format!("refusing to enumerate 2^{n} masks (limit {BRUTE_FORCE_LIMIT})")));
    }
    let scales = Scales::of(candidates);
    let mut best = SelectionMask::none(n);
    let mut best_fitness = scales.objectives(&best, candidates).score(weights);
    for bits in 1..(1u64 << n) {
        let mask = SelectionMask::from_bits(bits, n);
        let f = scales.objectives(&mask, candidates).score(weights);
        if f > best_fitness || (f == best_fitness && mask < best) {
            best = mask;
            best_fitness = f;
        }
    }
    Ok((best, best_fitness))
}

/// Per-cluster "passed over" flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionHistory {
    flags: BTreeMap<(usize, usize), bool>,
}

impl SelectionHistory {
    pub fn flag(&self, cluster: usize, device_id: usize) -> bool {
        self.flags.get(&(cluster, device_id)).copied().unwrap_or(false)
    }

    /// Sets the flag of every unselected candidate and clears it for every
    /// selected one. Devices that were not candidates keep their flag.
    pub fn update(&mut self, cluster: usize, candidates: &[Candidate], mask: &SelectionMask) -> Result<()> {
        check_len(mask, candidates)?;
        for (c, &chosen) in candidates.iter().zip(&mask.0) {
            self.flags.insert((cluster, c.device_id), !chosen);
        }
        Ok(())
    }
}

/// Replayable selection instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionInstance {
    pub candidates: Vec<Candidate>,
    pub weights: ObjectiveWeights,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cand(id: usize, label: usize, samples: usize, pro: f64, flag: bool) -> Candidate {
        Candidate { device_id: id, owner_label: label, sample_count: samples, predicted_pro: pro, hist_flag: flag }
    }

    fn w(v: [f64; 5]) -> ObjectiveWeights {
        ObjectiveWeights::new(v).unwrap()
    }

    fn random_instance(seed: u64, n: usize) -> Vec<Candidate> {
        let mut r = rng::stream(seed, &[99]);
        (0..n)
            .map(|i| {
                cand(
                    i,
                    r.random_range(0..(n / 2).max(1)),
                    r.random_range(80..=120),
                    r.random_range(0.8..1.6),
                    r.random_bool(0.3),
                )
            })
            .collect()
    }

    #[test]
    fn device_count_objective() {
        let c = random_instance(1, 6);
        let only_n = w([1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(fitness(&SelectionMask::all(6), &c, &only_n).unwrap(), 1.0);
        for bits in 0..63u64 {
            assert!(fitness(&SelectionMask::from_bits(bits, 6), &c, &only_n).unwrap() < 1.0);
        }
    }

    #[test]
    fn zero_variance_candidates() {
        let c: Vec<_> = (0..5).map(|i| cand(i, i, 100, 2.0, false)).collect();
        let only_v = w([0.0, 0.0, 0.0, 1.0, 0.0]);
        for bits in 0..32u64 {
            assert_eq!(fitness(&SelectionMask::from_bits(bits, 5), &c, &only_v).unwrap(), 0.0);
        }
    }

    #[test]
    fn hand_computed_objectives() {
        let c = [
            cand(0, 0, 100, 1.0, true),
            cand(1, 0, 150, 2.0, false),
            cand(2, 1, 50, 3.0, true),
            cand(3, 2, 100, 1.0, false),
        ];
        // Select candidates 0 and 2.
        let o = objectives(&SelectionMask(vec![true, false, true, false]), &c).unwrap();
        assert_eq!(o.devices, 0.5);
        assert_eq!(o.labels, 2.0 / 3.0);
        assert_eq!(o.samples, 150.0 / 400.0);
        // Selected {1, 3}: variance 1. All: mean 1.75, variance 0.6875.
        assert_eq!(o.variance, 1.0 / 0.6875);
        assert_eq!(o.history, 1.0);
        let f = fitness(&SelectionMask(vec![true, false, true, false]), &c, &ObjectiveWeights::equal()).unwrap();
        assert!((f - 0.2 * (0.5 + 2.0 / 3.0 + 0.375 - 1.0 / 0.6875 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_and_length_mismatch() {
        let c = random_instance(2, 4);
        assert_eq!(fitness(&SelectionMask::none(4), &c, &ObjectiveWeights::equal()).unwrap(), 0.0);
        assert!(fitness(&SelectionMask::none(3), &c, &ObjectiveWeights::equal()).is_err());
    }

    #[test]
    fn weights_validated() {
        assert!(ObjectiveWeights::new([0.5, 0.5, 0.1, 0.0, 0.0]).is_err());
        assert!(ObjectiveWeights::new([1.5, -0.5, 0.0, 0.0, 0.0]).is_err());
        assert!(serde_json::from_str::<ObjectiveWeights>("[0.2,0.2,0.2,0.2,0.3]").is_err());
        let ok: ObjectiveWeights = serde_json::from_str("[0.1,0.2,0.3,0.2,0.2]").unwrap();
        assert_eq!(ok.values()[2], 0.3);
    }

    #[test]
    fn single_candidate() {
        let c = [cand(0, 0, 10, 1.0, false)];
        let only_n = w([1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(ga_select(&c, &only_n, &GaConfig::default(), 1).unwrap(), SelectionMask(vec![true]));
        let (m, f) = brute_force_select(&c, &only_n).unwrap();
        assert_eq!((m, f), (SelectionMask(vec![true]), 1.0));
        assert!(ga_select(&[], &only_n, &GaConfig::default(), 1).is_err());
    }

    #[test]
    fn sample_objective_prefers_everything() {
        let c = [cand(0, 0, 150, 1.0, false), cand(1, 1, 100, 1.0, false), cand(2, 2, 100, 1.0, false)];
        let only_s = w([0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(brute_force_select(&c, &only_s).unwrap().0, SelectionMask::all(3));
        assert_eq!(ga_select(&c, &only_s, &GaConfig::default(), 3).unwrap(), SelectionMask::all(3));
    }

    #[test]
    fn brute_force_limits() {
        let only_n = w([1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(brute_force_select(&random_instance(3, 3), &only_n).unwrap().0, SelectionMask::all(3));
        assert!(brute_force_select(&random_instance(3, 21), &only_n).is_err());
        assert!(brute_force_select(&[], &only_n).is_err());
    }

    #[test]
    fn variance_objective_drops_outlier() {
        // Masks with variance 0 score 0; ties go to the lexicographically
        // smallest mask, which is the empty one. Any non-empty zero-variance
        // mask avoids the 9.0 outlier unless it stands alone.
        let c = [cand(0, 0, 10, 1.0, false), cand(1, 1, 10, 1.0, false), cand(2, 2, 10, 9.0, false)];
        let only_v = w([0.0, 0.0, 0.0, 1.0, 0.0]);
        let (mask, f) = brute_force_select(&c, &only_v).unwrap();
        assert_eq!(f, 0.0);
        assert_eq!(mask, SelectionMask::none(3));
        let with_outlier_pair = SelectionMask(vec![true, false, true]);
        assert!(fitness(&with_outlier_pair, &c, &only_v).unwrap() < 0.0);
        // Mixing in a little f1 makes the outlier-free pair the unique optimum.
        let mostly_v = w([0.01, 0.0, 0.0, 0.99, 0.0]);
        assert_eq!(brute_force_select(&c, &mostly_v).unwrap().0, SelectionMask(vec![true, true, false]));
    }

    #[test]
    fn history_update_rules() {
        let c: Vec<_> = (0..3).map(|i| cand(i, i, 10, 1.0, false)).collect();
        let mut h = SelectionHistory::default();
        h.update(0, &c, &SelectionMask::none(3)).unwrap();
        assert!((0..3).all(|i| h.flag(0, i)));
        assert!(!h.flag(1, 0));
        h.update(0, &c[..2], &SelectionMask(vec![true, false])).unwrap();
        assert!(!h.flag(0, 0));
        assert!(h.flag(0, 1));
        assert!(h.flag(0, 2), "non-candidates keep their flag");
        h.update(0, &c, &SelectionMask::all(3)).unwrap();
        assert!((0..3).all(|i| !h.flag(0, i)));
        assert!(h.update(0, &c, &SelectionMask::all(2)).is_err());
    }

    #[test]
    fn ga_matches_enumeration_on_small_instance() {
        let c = random_instance(4, 4);
        let (_, opt) = brute_force_select(&c, &ObjectiveWeights::equal()).unwrap();
        let got = ga_search(&c, &ObjectiveWeights::equal(), &GaConfig::default(), 4).unwrap();
        assert_eq!(got.fitness, opt);
    }

    #[test]
    fn target_fitness_stops_early() {
        let c = random_instance(5, 10);
        let only_n = w([1.0, 0.0, 0.0, 0.0, 0.0]);
        let cfg = GaConfig { target_fitness: Some(1.0), ..Default::default() };
        let out = ga_search(&c, &only_n, &cfg, 5).unwrap();
        assert_eq!(out.best_history.len(), 1);
        assert_eq!(out.mask, SelectionMask::all(10));
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in any::<u64>(), n in 1usize..12, bits in any::<u64>(), rot in 0usize..12) {
            let c = random_instance(seed, n);
            let mask = SelectionMask::from_bits(bits, n);
            let k = rot % n;
            let mut c2 = c.clone();
            c2.rotate_left(k);
            let mut m2 = mask.clone();
            m2.0.rotate_left(k);
            let a = fitness(&mask, &c, &ObjectiveWeights::equal()).unwrap();
            let b = fitness(&m2, &c2, &ObjectiveWeights::equal()).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        #[test]
        fn all_ones_uniquely_best_for_device_count(seed in any::<u64>(), n in 1usize..10) {
            let c = random_instance(seed, n);
            let only_n = w([1.0, 0.0, 0.0, 0.0, 0.0]);
            let (m, f) = brute_force_select(&c, &only_n).unwrap();
            prop_assert_eq!(m, SelectionMask::all(n));
            prop_assert_eq!(f, 1.0);
        }

        #[test]
        fn ga_best_never_regresses(seed in any::<u64>(), n in 1usize..25) {
            let c = random_instance(seed, n);
            let out = ga_search(&c, &ObjectiveWeights::equal(), &GaConfig::default(), seed).unwrap();
            for pair in out.best_history.windows(2) {
                prop_assert!(pair[1] >= pair[0]);
            }
            prop_assert_eq!(out.fitness, fitness(&out.mask, &c, &ObjectiveWeights::equal()).unwrap());
        }

        #[test]
        fn duplicate_selected_candidate_grows_sample_sum(seed in any::<u64>(), n in 1usize..10, pick in 0usize..10) {
            let c = random_instance(seed, n);
            let i = pick % n;
            let mask = SelectionMask::all(n);
            let before: usize = mask.selected(&c).map(|x| x.sample_count).sum();
            let mut c2 = c.clone();
            c2.push(Candidate { device_id: 1000, ..c[i] });
            let after: usize = SelectionMask::all(n + 1).selected(&c2).map(|x| x.sample_count).sum();
            prop_assert!(after >= before);
        }

        #[test]
        fn fitness_is_repeatable(seed in any::<u64>(), n in 1usize..15, bits in any::<u64>()) {
            let c = random_instance(seed, n);
            let m = SelectionMask::from_bits(bits, n);
            let a = fitness(&m, &c, &ObjectiveWeights::equal()).unwrap();
            let b = fitness(&m, &c, &ObjectiveWeights::equal()).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
