//! Central finite-difference verification of every hand-derived gradient.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{make_blobs, sample_batch, split_labels, AugmentConfig, ViewBatch};
use crate::error::{param_err, Result};
use crate::labeling::{label_views, LabelState};
use crate::losses::{
    consistency_loss, contrastive_loss, supervised_loss, total_loss, LossConfig, LossInputs,
};
use crate::network::{backward, forward, ModelParams, NetworkConfig};
use crate::pairs::{build_pairs, PairSets};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Scales every analytic gradient by `1 + 1e-3`; the check must then fail.
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100,
            step: 1e-4,
            tolerance: 1e-4,
            inject_fault: false,
        }
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `f` along every entry of `x`.
pub fn numeric_gradient(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.raw_dim());
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        out[idx] = (up - down) / (2.0 * h);
    }
    out
}

fn max_rel(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    /// `(trial, max relative error)` for every trial over tolerance.
    pub failures: Vec<(usize, f64)>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

/// Embedding draws for the contrastive checks. Rows have norm well below 1:
/// unit rows at `T = 0.07` give softmax weights near `e^-28`, and the
/// resulting gradient entries sit below what f64 differencing can resolve.
fn embedding_draw<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    normal_matrix(rng, rows, cols, EMBED_SCALE)
}

const EMBED_SCALE: f64 = 0.1;

/// Random symmetric, diagonal-free, disjoint positive/negative masks.
pub fn random_pairs<R: Rng>(rng: &mut R, n: usize) -> PairSets {
    let mut p = PairSets::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            let u: f64 = rng.random();
            let (pos, neg) = (u < 0.3, (0.3..0.75).contains(&u));
            p.pos[[i, j]] = pos;
            p.pos[[j, i]] = pos;
            p.neg[[i, j]] = neg;
            p.neg[[j, i]] = neg;
        }
    }
    p
}

fn suite(
    name: &'static str,
    cfg: &GradcheckConfig,
    mut trial: impl FnMut(&mut ChaCha8Rng, f64) -> Result<f64>,
) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    let fault = if cfg.inject_fault { 1.0 + 1e-3 } else { 1.0 };
    let mut report = SuiteReport {
        name,
        trials: cfg.trials,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for t in 0..cfg.trials {
        let err = trial(&mut rng, fault)?;
        report.max_rel_error = report.max_rel_error.max(err);
        if !(err < cfg.tolerance) {
            report.failures.push((t, err));
        }
    }
    Ok(report)
}

pub fn check_contrastive(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    suite("contrastive", cfg, |rng, fault| {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(2..=6);
        let t = if rng.random_bool(0.5) { 0.07 } else { rng.random_range(0.07..1.0) };
        let z = embedding_draw(rng, n, d);
        let pairs = random_pairs(rng, n);
        let (_, grad) = contrastive_loss(&z, &pairs, t)?;
        let numeric = numeric_gradient(&z, cfg.step, |zz| {
            contrastive_loss(zz, &pairs, t).map(|r| r.0).unwrap_or(f64::NAN)
        });
        Ok(max_rel(&(grad * fault), &numeric))
    })
}

pub fn check_supervised(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    suite("supervised", cfg, |rng, fault| {
        let b = rng.random_range(1..=8);
        let c = rng.random_range(2..=6);
        let logits = normal_matrix(rng, b, c, 2.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let (_, grad) = supervised_loss(logits.view(), &labels)?;
        let numeric = numeric_gradient(&logits, cfg.step, |l| {
            supervised_loss(l.view(), &labels).map(|r| r.0).unwrap_or(f64::NAN)
        });
        Ok(max_rel(&(grad * fault), &numeric))
    })
}

pub fn check_consistency(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    suite("consistency", cfg, |rng, fault| {
        let m = rng.random_range(1..=8);
        let c = rng.random_range(2..=6);
        let weak_logits = normal_matrix(rng, m, c, 3.0);
        let weak_p = crate::network::softmax_rows(&weak_logits)?;
        let tau = rng.random_range(0.3..0.95);
        let strong = normal_matrix(rng, m, c, 2.0);
        let (_, grad) = consistency_loss(weak_p.view(), strong.view(), tau)?;
        let numeric = numeric_gradient(&strong, cfg.step, |s| {
            consistency_loss(weak_p.view(), s.view(), tau).map(|r| r.0).unwrap_or(f64::NAN)
        });
        Ok(max_rel(&(grad * fault), &numeric))
    })
}

/// A random small batch with labels, tiers and pairs derived from random
/// network outputs, for checking the combined objective.
pub struct TotalInstance {
    pub batch: ViewBatch,
    pub logits: Array2<f64>,
    pub embeddings: Array2<f64>,
    pub state: LabelState,
    pub pairs: PairSets,
    pub loss: LossConfig,
}

pub fn random_total_instance<R: Rng>(rng: &mut R) -> Result<TotalInstance> {
    let c = rng.random_range(2..=5);
    let dim = rng.random_range(2..=4);
    let b = rng.random_range(1..=2);
    let mu = rng.random_range(1..=2);
    let seed: u64 = rng.random();
    let ds = split_labels(&make_blobs(seed, 8, c, dim, 1.0)?, c, seed)?;
    let mut br = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_batch(&ds, b, mu, &AugmentConfig::default(), &mut br.clone(), &mut br)?;
    let net = NetworkConfig {
        hidden: vec![6],
        embed_dim: rng.random_range(2..=6),
    };
    let params = ModelParams::init(dim, c, &net, rng)?;
    let record = forward(&params, &batch.views)?;
    let loss = LossConfig {
        temperature: if rng.random_bool(0.5) { 0.07 } else { rng.random_range(0.07..1.0) },
        tau: rng.random_range(0.34..0.9),
        k: Some(rng.random_range(1..c)),
        ..Default::default()
    };
    let state = label_views(&record, &batch, loss.tau, loss.k_for(c))?;
    let pairs = build_pairs(&state, &batch.psi_map());
    // Free-standing outputs so the check does not depend on the network.
    let n = batch.len();
    let logits = normal_matrix(rng, n, c, 2.0);
    let embeddings = embedding_draw(rng, n, net.embed_dim);
    Ok(TotalInstance {
        batch,
        logits,
        embeddings,
        state,
        pairs,
        loss,
    })
}

pub fn check_total(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    suite("total", cfg, |rng, fault| {
        let inst = random_total_instance(rng)?;
        let eval = |logits: &Array2<f64>, emb: &Array2<f64>| {
            total_loss(
                &LossInputs {
                    logits,
                    embeddings: emb,
                    batch: &inst.batch,
                    state: &inst.state,
                    pairs: &inst.pairs,
                    with_consistency: true,
                },
                &inst.loss,
            )
        };
        let out = eval(&inst.logits, &inst.embeddings)?;
        let num_logits = numeric_gradient(&inst.logits, cfg.step, |l| {
            eval(l, &inst.embeddings).map(|o| o.total).unwrap_or(f64::NAN)
        });
        let num_emb = numeric_gradient(&inst.embeddings, cfg.step, |e| {
            eval(&inst.logits, e).map(|o| o.total).unwrap_or(f64::NAN)
        });
        Ok(max_rel(&(out.d_logits * fault), &num_logits).max(max_rel(&(out.d_embeddings * fault), &num_emb)))
    })
}

/// Network backward pass against finite differences over every parameter.
/// Draws whose rectifier inputs come within `1e-2` of the kink, or whose
/// projector outputs have norm below `0.5`, are redrawn; both points make the
/// central difference at `h = 1e-4` unreliable.
pub fn check_network(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    suite("network", cfg, |rng, fault| {
        let (params, x, record) = loop {
            let input = rng.random_range(1..=8);
            let mut widths = vec![rng.random_range(2..=6), rng.random_range(2..=6)];
            widths.truncate(rng.random_range(1..=2));
            let net = NetworkConfig {
                hidden: widths,
                embed_dim: rng.random_range(2..=4),
            };
            let c = rng.random_range(2..=4);
            let mut params = ModelParams::init(input, c, &net, rng)?;
            params.map_inplace(|v| {
                if *v == 0.0 {
                    *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            });
            let n = rng.random_range(1..=5);
            let x = normal_matrix(rng, n, input, 1.0);
            let record = forward(&params, &x)?;
            let near_kink = record
                .pre_activations()
                .iter()
                .any(|a| a.iter().any(|v| v.abs() < 1e-2));
            let near_origin = record.embedding_norms().iter().any(|&s| s < 0.5);
            if !near_kink && !near_origin {
                break (params, x, record);
            }
        };
        let d_logits = normal_matrix(rng, record.logits.nrows(), record.logits.ncols(), 1.0);
        let d_emb = normal_matrix(rng, record.embeddings.nrows(), record.embeddings.ncols(), 1.0);
        let scalar = |p: &ModelParams| -> f64 {
            let r = forward(p, &x).expect("shapes fixed");
            (&r.logits * &d_logits).sum() + (&r.embeddings * &d_emb).sum()
        };
        let grads = backward(&params, &record, &d_logits, &d_emb)?.scaled(fault);
        let analytic: Vec<f64> = grads.0.values().collect();
        let mut probe = params.clone();
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = *probe.value_mut(i).expect("index in range");
            *probe.value_mut(i).expect("index in range") = orig + cfg.step;
            let up = scalar(&probe);
            *probe.value_mut(i).expect("index in range") = orig - cfg.step;
            let down = scalar(&probe);
            *probe.value_mut(i).expect("index in range") = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * cfg.step)));
        }
        Ok(worst)
    })
}

/// Every suite, in a fixed order.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<SuiteReport>> {
    if cfg.trials == 0 {
        return param_err("gradcheck needs at least one trial");
    }
    Ok(vec![
        check_contrastive(cfg)?,
        check_supervised(cfg)?,
        check_consistency(cfg)?,
        check_total(cfg)?,
        check_network(cfg)?,
    ])
}

/// Shuffled copy of `0..n`; handy for picking random probe coordinates.
pub fn shuffled_indices<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradcheckConfig {
        GradcheckConfig {
            trials: 10,
            ..Default::default()
        }
    }

    #[test]
    fn suites_pass() {
        for r in run_all(&small()).unwrap() {
            assert!(r.passed(), "{} failed: {:?}", r.name, r.failures);
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let cfg = GradcheckConfig {
            inject_fault: true,
            ..small()
        };
        for r in run_all(&cfg).unwrap() {
            assert!(!r.passed(), "{} missed the injected fault", r.name);
        }
    }

    #[test]
    fn unit_embeddings_at_training_temperature() {
        // Outside the element-wise tolerance regime; compare against the
        // largest entry instead.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut z = normal_matrix(&mut rng, 10, 6, 1.0);
            for mut r in z.rows_mut() {
                let n = r.dot(&r).sqrt();
                r /= n;
            }
            let pairs = random_pairs(&mut rng, 10);
            let (_, g) = contrastive_loss(&z, &pairs, 0.07).unwrap();
            let num = numeric_gradient(&z, 1e-4, |zz| contrastive_loss(zz, &pairs, 0.07).unwrap().0);
            let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let worst = g.iter().zip(&num).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(worst < 1e-5 * scale, "{worst} vs {scale}");
        }
    }

    #[test]
    fn zero_trials_is_an_error() {
        let cfg = GradcheckConfig {
            trials: 0,
            ..Default::default()
        };
        assert!(run_all(&cfg).is_err());
    }
}
