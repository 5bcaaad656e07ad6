//! Plain-Rust state behind the browser bindings.

use ccl_core::labeling::Tier;
use ccl_core::network::{argmax, forward};
use ccl_core::pairs::{build_pairs, pair_stats};
use ccl_core::trainer::lr_schedule;
use ccl_core::{AblationMode, Result, RunConfig, Trainer};
use ndarray::Array2;
use serde_json::{json, Value};

/// Steps per demo run. Short enough to finish in a few seconds in the browser.
pub const DEMO_STEPS: usize = 2000;

pub struct Session {
    trainer: Trainer,
}

impl Session {
    pub fn new(seed: u64, spread: f64, mode: &str) -> Result<Self> {
        let mode: AblationMode = mode.parse()?;
        let cfg = RunConfig::default().with_overrides(&[
            format!("seed={seed}"),
            format!("data.spread={spread}"),
            format!("trainer.ablation_mode=\"{}\"", mode.name()),
            format!("trainer.total_steps={DEMO_STEPS}"),
            "trainer.eval_every=50".into(),
            "data.test_per_class=100".into(),
            "loss.contrastive_reduction=\"mean\"".into(),
        ])?;
        Ok(Self {
            trainer: Trainer::new(cfg)?,
        })
    }

    /// Runs up to `steps` updates and returns the latest EMA accuracy.
    pub fn train(&mut self, steps: usize) -> Result<f64> {
        for _ in 0..steps {
            if self.trainer.finished() {
                break;
            }
            self.trainer.step()?;
        }
        Ok(self.trainer.evals.last().map_or(f64::NAN, |e| e.accuracy))
    }

    pub fn step(&self) -> usize {
        self.trainer.state.step
    }

    pub fn finished(&self) -> bool {
        self.trainer.finished()
    }

    /// `[x_min, x_max, y_min, y_max]` of the training points plus a margin.
    pub fn bounds(&self) -> [f64; 4] {
        let f = &self.trainer.train.features;
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for row in f.rows() {
            b[0] = b[0].min(row[0]);
            b[1] = b[1].max(row[0]);
            b[2] = b[2].min(row[1]);
            b[3] = b[3].max(row[1]);
        }
        [b[0] - 1.0, b[1] + 1.0, b[2] - 1.0, b[3] + 1.0]
    }

    /// Flattened `x, y, class, labeled` for every training point.
    pub fn points(&self) -> Vec<f64> {
        let t = &self.trainer.train;
        let mut labeled = vec![false; t.len()];
        for &i in &t.labeled_indices {
            labeled[i] = true;
        }
        let mut out = Vec::with_capacity(4 * t.len());
        for (i, row) in t.features.rows().into_iter().enumerate() {
            out.extend([row[0], row[1], t.labels[i] as f64, f64::from(u8::from(labeled[i]))]);
        }
        out
    }

    /// EMA-model class predictions on a `res x res` grid, row-major from the
    /// top-left corner.
    pub fn boundary(&self, res: usize) -> Result<Vec<u8>> {
        let [x0, x1, y0, y1] = self.bounds();
        let res = res.max(2);
        let grid = Array2::from_shape_fn((res * res, 2), |(i, d)| {
            let (r, c) = (i / res, i % res);
            let u = c as f64 / (res - 1) as f64;
            let v = r as f64 / (res - 1) as f64;
            if d == 0 {
                x0 + u * (x1 - x0)
            } else {
                y1 - v * (y1 - y0)
            }
        });
        let rec = forward(&self.trainer.state.ema, &grid)?;
        Ok(rec.logits.rows().into_iter().map(|r| argmax(r) as u8).collect())
    }

    /// Flattened `step, accuracy` pairs for every evaluation so far.
    pub fn trace(&self) -> Vec<f64> {
        self.trainer
            .evals
            .iter()
            .flat_map(|e| [e.step as f64, e.accuracy])
            .collect()
    }

    /// Labels one batch with the current weights at the given threshold and
    /// `k`, and reports tiers, complementary sets and the pair matrix
    /// (0 = unused, 1 = positive, 2 = negative).
    pub fn pairs(&self, tau: f64, k: usize) -> Result<Value> {
        let dump = self.trainer.label_snapshot_with(tau, k)?;
        let s = &dump.state;
        let pairs = build_pairs(s, &dump.psi);
        let n = s.len();
        let mut matrix = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                matrix[i * n + j] = if pairs.pos[[i, j]] {
                    1
                } else if pairs.neg[[i, j]] {
                    2
                } else {
                    0
                };
            }
        }
        let stats = pair_stats(&pairs, s, dump.truth.as_deref());
        Ok(json!({
            "n": n,
            "tier": s.tier.iter().map(|t| if *t == Tier::High { "H" } else { "L" }).collect::<Vec<_>>(),
            "y_hat": s.y_hat.iter().map(|y| y.map_or(-1, |v| v as i64)).collect::<Vec<_>>(),
            "truth": dump.truth,
            "phi": s.phi,
            "kind": dump.origins.iter().map(|o| o.kind).collect::<Vec<_>>(),
            "matrix": matrix,
            "stats": stats,
        }))
    }
}

/// Learning rate at `points` evenly spaced steps of a `total`-step run.
pub fn lr_curve(total: usize, eta0: f64, points: usize) -> Result<Vec<f64>> {
    let points = points.max(2);
    (0..points)
        .map(|i| lr_schedule(i * total / (points - 1), total, eta0))
        .collect()
}
