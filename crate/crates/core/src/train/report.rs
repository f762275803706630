use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::harness::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mdice: f64,
    pub miou: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub mdice: f64,
    pub miou: f64,
    pub mae: f64,
    pub evaluated: usize,
    /// Images skipped because their mask cannot supply the requested points.
    pub skipped: usize,
}

/// Per-seed results with mean and sample standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub per_seed: Vec<SeedMetrics>,
    pub mean: Summary,
    pub std: Summary,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, libm::sqrt(var))
}

impl DatasetMetrics {
    pub fn from_seeds(per_seed: Vec<SeedMetrics>) -> Self {
        let col = |f: fn(&SeedMetrics) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
        let (md, sd) = col(|s| s.mdice);
        let (mi, si) = col(|s| s.miou);
        let (mm, sm) = col(|s| s.mae);
        Self {
            per_seed,
            mean: Summary {
                mdice: md,
                miou: mi,
                mae: mm,
            },
            std: Summary {
                mdice: sd,
                miou: si,
                mae: sm,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mdice: Option<f64>,
}

/// Outcome of one run: the resolved config, the frozen-content hash of the
/// base, trainable-parameter count, per-dataset metrics and training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: RunConfig,
    pub frozen_hash: String,
    pub trainable_params: usize,
    pub metrics: BTreeMap<String, DatasetMetrics>,
    pub history: Vec<EpochRecord>,
}
