//! Attention ablation: the same data and seeds under each attention mode.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::eval::evaluate;
use crate::math;
use crate::model::AttentionMode;
use crate::synth::DatasetManifest;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AttentionMode,
    pub seeds: Vec<u64>,
    pub maps: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// Sorted by variant name.
    pub rows: Vec<AblationRow>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, math::sqrt(var))
}

impl AblationRow {
    pub fn from_maps(variant: AttentionMode, seeds: Vec<u64>, maps: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&maps);
        Self {
            variant,
            seeds,
            maps,
            mean,
            std,
        }
    }
}

/// Trains each variant for each seed and evaluates it on `test`.
/// `on_run` observes every finished run.
pub fn run_ablation(
    base: &TrainConfig,
    train_data: &DatasetManifest,
    test_data: &DatasetManifest,
    variants: &[AttentionMode],
    seeds: &[u64],
    mut on_run: impl FnMut(AttentionMode, u64, f64),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let mut variants = variants.to_vec();
    variants.sort_by_key(|v| v.as_str());
    variants.dedup();
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in &variants {
        let mut maps = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                attention_mode: variant,
                ..base.clone()
            };
            let model = train(&cfg, train_data)?;
            let m = evaluate(&model, test_data)?.map;
            on_run(variant, seed, m);
            maps.push(m);
        }
        rows.push(AblationRow::from_maps(variant, seeds.to_vec(), maps));
    }
    Ok(AblationTable { rows })
}
