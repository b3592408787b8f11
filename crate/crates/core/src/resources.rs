//! Device resource model: static capacities, per-round availability, noisy
//! realized usage and the static capacity filter.

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::{Add, Div, Mul};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::Device;
use crate::rng::{self, tag};

pub const BYTES_PER_MB: f64 = 1_048_576.0;

/// Memory (MB), processing units and disk (MB).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceVector {
    pub mem: f64,
    pub pro: f64,
    pub dis: f64,
}

impl ResourceVector {
    pub const ZERO: Self = Self { mem: 0.0, pro: 0.0, dis: 0.0 };

    pub const fn new(mem: f64, pro: f64, dis: f64) -> Self {
        Self { mem, pro, dis }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.mem, self.pro, self.dis]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Componentwise `self >= other`.
    pub fn covers(&self, other: &ResourceVector) -> bool {
        self.mem >= other.mem && self.pro >= other.pro && self.dis >= other.dis
    }

    pub fn is_non_negative(&self) -> bool {
        self.mem >= 0.0 && self.pro >= 0.0 && self.dis >= 0.0
    }

    pub fn zip_map(self, other: Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::new(f(self.mem, other.mem), f(self.pro, other.pro), f(self.dis, other.dis))
    }
}

impl Add for ResourceVector {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Mul<f64> for ResourceVector {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self::new(self.mem * rhs, self.pro * rhs, self.dis * rhs)
    }
}

impl Div<f64> for ResourceVector {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        Self::new(self.mem / rhs, self.pro / rhs, self.dis / rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundAvailability {
    pub device_id: usize,
    pub round: usize,
    pub available: ResourceVector,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageObservation {
    pub device_id: usize,
    pub round: usize,
    pub used: ResourceVector,
    pub completed: bool,
}

/// Ground-truth expected usage of one local training pass. This is the
/// quantity the random forests learn to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UsageLaw {
    pub mem_base_mb: f64,
    pub mem_per_sample_mb: f64,
    /// Processing units per training sample for a client half with
    /// `pro_reference_params` parameters; scales linearly with parameter count.
    pub pro_per_sample: f64,
    pub pro_reference_params: f64,
}

impl Default for UsageLaw {
    fn default() -> Self {
        Self {
            mem_base_mb: 256.0,
            mem_per_sample_mb: 2.0,
            pro_per_sample: 0.015,
            pro_reference_params: 20_736.0,
        }
    }
}

impl UsageLaw {
    pub fn expected(&self, sample_count: usize, client_params: usize) -> ResourceVector {
        let s = sample_count as f64;
        let p = client_params as f64;
        ResourceVector::new(
            self.mem_base_mb + self.mem_per_sample_mb * s + p * 8.0 * 3.0 / BYTES_PER_MB,
            self.pro_per_sample * s * p / self.pro_reference_params,
            p * 8.0 / BYTES_PER_MB,
        )
    }
}

/// Static requirements for hosting the client half of the model: parameters,
/// gradients and momentum in memory, one processing unit, and room for two
/// serialized copies on disk.
pub fn model_requirements(client_params: usize) -> ResourceVector {
    let bytes = client_params as f64 * 8.0;
    ResourceVector::new(bytes * 3.0 / BYTES_PER_MB, 1.0, bytes * 2.0 / BYTES_PER_MB)
}

/// Devices whose capacity meets `requirements` in every dimension (set J).
pub fn capacity_filter(devices: &[Device], requirements: &ResourceVector) -> BTreeSet<usize> {
    devices
        .iter()
        .filter(|d| d.capacity.covers(requirements))
        .map(|d| d.id)
        .collect()
}

/// Availability at `round`: each capacity component scaled by an independent
/// `U[floor, 1]` draw keyed on `(seed, device, round)`.
pub fn sample_availability(device: &Device, round: usize, seed: u64, floor: f64) -> RoundAvailability {
    let mut r = rng::stream(seed, &[tag::AVAILABILITY, device.id as u64, round as u64]);
    let mut draw = || if floor >= 1.0 { 1.0 } else { r.random_range(floor..=1.0) };
    let u = ResourceVector::new(draw(), draw(), draw());
    RoundAvailability {
        device_id: device.id,
        round,
        available: device.capacity.zip_map(u, |c, f| c * f),
        sample_count: device.shard.train_len(),
    }
}

/// Realized usage: each component of `expected` scaled by `max(0, 1 + eps)`,
/// `eps ~ N(0, noise_sd)`, keyed on `(seed, device, round)`.
pub fn realize_usage(
    expected: ResourceVector,
    round: usize,
    device_id: usize,
    seed: u64,
    noise_sd: f64,
) -> ResourceVector {
    if noise_sd <= 0.0 {
        return expected;
    }
    let mut r = rng::stream(seed, &[tag::USAGE, device_id as u64, round as u64]);
    let normal = Normal::new(0.0, noise_sd).expect("noise_sd is finite and positive");
    let mut scale = || (1.0 + normal.sample(&mut r)).max(0.0);
    let f = ResourceVector::new(scale(), scale(), scale());
    expected.zip_map(f, |e, s| e * s)
}

/// A client drops when its realized usage exceeds what it has available.
pub fn drops_out(realized: &ResourceVector, available: &ResourceVector) -> bool {
    !available.covers(realized)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourcesConfig {
    pub availability_floor: f64,
    pub noise_sd: f64,
    pub usage: UsageLaw,
}

impl Default for ResourcesConfig {
    fn default() -> Self {
        Self {
            availability_floor: 0.6,
            noise_sd: 0.1,
            usage: UsageLaw::default(),
        }
    }
}

impl ResourcesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.availability_floor) {
            return Err(Error::Config("resources: availability_floor must be in [0, 1]".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("resources: noise_sd must be >= 0".into()));
        }
        Ok(())
    }
}

/// Writes observations as `device_id,round,mem,pro,dis,completed` rows.
pub fn write_usage_csv<W: Write>(mut out: W, rows: &[UsageObservation]) -> Result<()> {
    writeln!(out, "device_id,round,mem,pro,dis,completed")?;
    for o in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            o.device_id, o.round, o.used.mem, o.used.pro, o.used.dis, o.completed as u8
        )?;
    }
    Ok(())
}
