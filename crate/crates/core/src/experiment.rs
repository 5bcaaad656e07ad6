//! Seed sweeps over ablation modes and complementary-set sizes.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{param_err, Result};
use crate::trainer::{AblationMode, Trainer};

/// One swept setting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub mode: AblationMode,
    /// `None` keeps the configured default.
    pub k: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub mode: AblationMode,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Best EMA test accuracy of a single run.
pub fn run_once(cfg: &RunConfig) -> Result<f64> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run()?;
    Ok(trainer.best_accuracy().unwrap_or(0.0))
}

/// Trains every variant under every seed. `progress` is called after each run.
pub fn sweep(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(&Variant, u64, f64),
) -> Result<Vec<SummaryRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return param_err("sweep needs at least one variant and one seed");
    }
    let n_classes = base.data.n_classes;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.trainer.ablation_mode = v.mode;
            if v.k.is_some() {
                cfg.loss.k = v.k;
            }
            cfg.validate()?;
            let acc = run_once(&cfg)?;
            progress(v, seed, acc);
            accs.push(acc);
        }
        let (mean, std) = mean_std(&accs);
        let k = v.k.unwrap_or_else(|| base.loss.k_for(n_classes));
        rows.push(SummaryRow {
            mode: v.mode,
            k,
            seeds: seeds.to_vec(),
            accuracies: accs,
            mean,
            std,
        });
    }
    Ok(rows)
}

/// `mode,k,n_seeds,mean_acc,std_acc,accs` with per-seed accuracies joined by `;`.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("mode,k,n_seeds,mean_acc,std_acc,accs\n");
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.mode.name(),
            r.k,
            r.accuracies.len(),
            r.mean,
            r.std,
            accs.join(";")
        );
    }
    out
}

/// `k in {1, ceil(C/2), C-1}`, deduplicated and ascending.
pub fn default_k_grid(n_classes: usize) -> Vec<usize> {
    let mut ks = vec![1, n_classes.div_ceil(2), n_classes.saturating_sub(1).max(1)];
    ks.sort_unstable();
    ks.dedup();
    ks
}
