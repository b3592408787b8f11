//! Synthetic user/device population with non-IID labeled shards.
//!
//! Each user is one class. A user's devices all draw feature vectors from the
//! same isotropic Gaussian blob, so every shard holds exactly one label.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resources::ResourceVector;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub users: usize,
    pub min_devices: usize,
    pub max_devices: usize,
    pub min_samples: usize,
    pub max_samples: usize,
    pub feature_dim: usize,
    /// Per-user means are drawn uniformly from `[-mean_range, mean_range]^dim`.
    pub mean_range: f64,
    pub feature_sd: f64,
    pub train_fraction: f64,
    /// Processing units per device tier.
    pub pro_tiers: Vec<f64>,
    /// Disk MB per device tier, paired index-wise with `pro_tiers`.
    pub disk_tiers: Vec<f64>,
    pub base_memory_mb: f64,
    /// Memory is `base_memory_mb * (1 + u)`, `u ~ U(-jitter, jitter)`.
    pub memory_jitter: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            users: 42,
            min_devices: 2,
            max_devices: 6,
            min_samples: 100,
            max_samples: 150,
            feature_dim: 32,
            mean_range: 1.0,
            feature_sd: 0.3,
            train_fraction: 0.8,
            pro_tiers: vec![1.5, 2.0, 2.5],
            disk_tiers: vec![4096.0, 8192.0, 16384.0],
            base_memory_mb: 2048.0,
            memory_jitter: 0.25,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("population: {msg}")));
        if self.users == 0 {
            return bad("users must be >= 1");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if self.min_devices == 0 || self.min_devices > self.max_devices {
            return bad("device range must satisfy 1 <= min_devices <= max_devices");
        }
        if self.min_samples == 0 || self.min_samples > self.max_samples {
            return bad("sample range must satisfy 1 <= min_samples <= max_samples");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must be in (0, 1]");
        }
        if !(self.feature_sd >= 0.0) || !(self.mean_range >= 0.0) {
            return bad("feature_sd and mean_range must be non-negative");
        }
        if self.pro_tiers.is_empty() || self.pro_tiers.len() != self.disk_tiers.len() {
            return bad("pro_tiers and disk_tiers must be non-empty and of equal length");
        }
        if self.pro_tiers.iter().chain(&self.disk_tiers).any(|&v| !(v > 0.0)) {
            return bad("tier capacities must be strictly positive");
        }
        if !(self.base_memory_mb > 0.0) || !(0.0..1.0).contains(&self.memory_jitter) {
            return bad("base_memory_mb must be > 0 and memory_jitter in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub label: usize,
    pub device_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    pub features: Array2<f64>,
    pub label: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl DataShard {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_len(&self) -> usize {
        self.train_indices.len()
    }

    pub fn train_features(&self) -> Array2<f64> {
        self.features.select(ndarray::Axis(0), &self.train_indices)
    }

    pub fn test_features(&self) -> Array2<f64> {
        self.features.select(ndarray::Axis(0), &self.test_indices)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub id: usize,
    pub owner_label: usize,
    pub capacity: ResourceVector,
    pub shard: DataShard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub seed: u64,
    pub config: PopulationConfig,
    pub users: Vec<User>,
    pub devices: Vec<Device>,
}

impl Population {
    pub fn classes(&self) -> usize {
        self.users.len()
    }

    pub fn device(&self, id: usize) -> &Device {
        &self.devices[id]
    }
}

/// Labeled design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledData {
    pub train: Dataset,
    pub test: Dataset,
}

fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).round().clamp(0.0, n as f64) as usize
}

pub fn generate_population(seed: u64, config: &PopulationConfig) -> Result<Population> {
    config.validate()?;
    let dim = config.feature_dim;
    let noise = Normal::new(0.0, config.feature_sd)
        .map_err(|e| Error::Config(format!("population: feature_sd: {e}")))?;

    let mut users = Vec::with_capacity(config.users);
    let mut devices = Vec::new();
    for label in 0..config.users {
        let mut urng = rng::stream(seed, &[tag::USER, label as u64]);
        let mean: Vec<f64> = (0..dim)
            .map(|_| urng.random_range(-config.mean_range..=config.mean_range))
            .collect();
        let count = urng.random_range(config.min_devices..=config.max_devices);

        let mut device_ids = Vec::with_capacity(count);
        for _ in 0..count {
            let id = devices.len();
            let mut drng = rng::stream(seed, &[tag::DEVICE, id as u64]);

            let tier = drng.random_range(0..config.pro_tiers.len());
            let jitter = if config.memory_jitter > 0.0 {
                drng.random_range(-config.memory_jitter..=config.memory_jitter)
            } else {
                0.0
            };
            let capacity = ResourceVector::new(
                config.base_memory_mb * (1.0 + jitter),
                config.pro_tiers[tier],
                config.disk_tiers[tier],
            );

            let n = drng.random_range(config.min_samples..=config.max_samples);
            let features = Array2::from_shape_fn((n, dim), |(_, j)| mean[j] + noise.sample(&mut drng));
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut drng);
            let n_train = train_count(n, config.train_fraction);
            let test_indices = order.split_off(n_train);

            devices.push(Device {
                id,
                owner_label: label,
                capacity,
                shard: DataShard {
                    features,
                    label,
                    train_indices: order,
                    test_indices,
                },
            });
            device_ids.push(id);
        }
        users.push(User { label, device_ids });
    }

    Ok(Population {
        seed,
        config: config.clone(),
        users,
        devices,
    })
}

/// Concatenates device train and test sets in ascending device-id order.
pub fn pooled_dataset(devices: &[&Device]) -> Result<PooledData> {
    if devices.is_empty() {
        return Err(Error::Empty("pooled_dataset needs at least one device"));
    }
    let mut sorted: Vec<&Device> = devices.to_vec();
    sorted.sort_by_key(|d| d.id);
    let dim = sorted[0].shard.features.ncols();

    let gather = |pick: fn(&DataShard) -> &Vec<usize>| -> Result<Dataset> {
        let total: usize = sorted.iter().map(|d| pick(&d.shard).len()).sum();
        let mut features = Array2::zeros((total, dim));
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for d in &sorted {
            if d.shard.features.ncols() != dim {
                return Err(Error::Shape(format!(
                    "device {} has feature width {}, expected {dim}",
                    d.id,
                    d.shard.features.ncols()
                )));
            }
            for &i in pick(&d.shard) {
                features.row_mut(row).assign(&d.shard.features.row(i));
                labels.push(d.shard.label);
                row += 1;
            }
        }
        Ok(Dataset { features, labels })
    };

    Ok(PooledData {
        train: gather(|s| &s.train_indices)?,
        test: gather(|s| &s.test_indices)?,
    })
}

/// One device entry of a population dump. Features are not stored; they are
/// regenerated from the seed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub id: usize,
    pub owner_label: usize,
    pub capacity: ResourceVector,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationDump {
    pub seed: u64,
    pub config: PopulationConfig,
    pub devices: Vec<DeviceRecord>,
}

impl Population {
    pub fn dump(&self) -> PopulationDump {
        PopulationDump {
            seed: self.seed,
            config: self.config.clone(),
            devices: self
                .devices
                .iter()
                .map(|d| DeviceRecord {
                    id: d.id,
                    owner_label: d.owner_label,
                    capacity: d.capacity,
                    sample_count: d.shard.len(),
                })
                .collect(),
        }
    }

    /// Rebuilds a population from a dump and checks the regenerated devices
    /// agree with the recorded ones.
    pub fn from_dump(dump: &PopulationDump) -> Result<Self> {
        let pop = generate_population(dump.seed, &dump.config)?;
        if pop.dump().devices != dump.devices {
            return Err(Error::Config(
                "population dump does not match its seed and config".into(),
            ));
        }
        Ok(pop)
    }
}
