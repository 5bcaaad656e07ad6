//! The training loop: labeling, pairing, losses, momentum SGD on a cosine
//! schedule, EMA shadow weights and evaluation.

use std::f64::consts::PI;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{sample_batch, Dataset, ViewBatch};
use crate::error::{param_err, CclError, Result};
use crate::labeling::{label_views, LabelDump, Tier};
use crate::losses::{total_loss, LossInputs, LossOutput};
use crate::network::{argmax, backward, forward, GradState, ModelParams};
use crate::pairs::{check_invariants, pair_stats, pairs_for_strategy, PairStats, PairStrategy};
use crate::rng::{stream, Stream};

/// Which terms and pair strategy a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    /// Supervised + consistency + complementary-label contrastive terms.
    #[serde(rename = "ccl")]
    Ccl,
    /// Supervised + consistency terms only.
    #[serde(rename = "fixmatch_only")]
    FixmatchOnly,
    /// Contrastive pairs among high-confidence views only.
    #[serde(rename = "supcon_H_only")]
    SupconHOnly,
    /// Low-confidence argmax trusted as a label when pairing.
    #[serde(rename = "naive_HL_pairs")]
    NaiveHlPairs,
    /// Cross-entropy on labeled views only.
    #[serde(rename = "supervised")]
    Supervised,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Ccl,
        AblationMode::FixmatchOnly,
        AblationMode::SupconHOnly,
        AblationMode::NaiveHlPairs,
        AblationMode::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Ccl => "ccl",
            AblationMode::FixmatchOnly => "fixmatch_only",
            AblationMode::SupconHOnly => "supcon_H_only",
            AblationMode::NaiveHlPairs => "naive_HL_pairs",
            AblationMode::Supervised => "supervised",
        }
    }

    pub fn pair_strategy(self) -> PairStrategy {
        match self {
            AblationMode::Ccl => PairStrategy::Complementary,
            AblationMode::FixmatchOnly | AblationMode::Supervised => PairStrategy::Disabled,
            AblationMode::SupconHOnly => PairStrategy::HighOnly,
            AblationMode::NaiveHlPairs => PairStrategy::NaiveArgmax,
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self != AblationMode::Supervised
    }
}

impl std::str::FromStr for AblationMode {
    type Err = CclError;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CclError::Parameter(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub eta0: f64,
    pub momentum: f64,
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub mu: usize,
    pub eval_every: usize,
    pub ablation_mode: AblationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            eta0: 0.03,
            momentum: 0.9,
            ema_momentum: 0.999,
            batch_size: 16,
            mu: 3,
            eval_every: 250,
            ablation_mode: AblationMode::Ccl,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return param_err("total_steps must be at least 1");
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return param_err("eta0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return param_err("momentum must lie in [0, 1)");
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return param_err("ema_momentum must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.mu == 0 {
            return param_err("batch_size and mu must be at least 1");
        }
        if self.eval_every == 0 {
            return param_err("eval_every must be at least 1");
        }
        Ok(())
    }
}

/// `eta0 * cos(7πt / 16N)`.
pub fn lr_schedule(t: usize, total: usize, eta0: f64) -> Result<f64> {
    if total == 0 {
        return param_err("total steps must be positive");
    }
    if t > total {
        return param_err(format!("step {t} outside 0..={total}"));
    }
    Ok(eta0 * (7.0 * PI * t as f64 / (16.0 * total as f64)).cos())
}

/// Classic momentum: `v <- momentum v + g`, `p <- p - lr v`.
pub fn sgd_step(
    params: &mut ModelParams,
    velocity: &mut ModelParams,
    grads: &GradState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !params.same_shape(&grads.0) || !params.same_shape(velocity) {
        return Err(CclError::Shape {
            op: "sgd_step",
            expected: "gradients shaped like parameters".into(),
            actual: "mismatched layers".into(),
        });
    }
    if !grads.all_finite() {
        return Err(CclError::Numeric("non-finite gradient".into()));
    }
    velocity.zip_mut_with(&grads.0, |v, g| *v = momentum * *v + g);
    params.zip_mut_with(velocity, |p, v| *p -= lr * v);
    Ok(())
}

/// `ema <- m ema + (1 - m) param`.
pub fn ema_update(ema: &mut ModelParams, params: &ModelParams, m: f64) {
    ema.zip_mut_with(params, |e, p| *e = m * *e + (1.0 - m) * p);
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let c = self.confusion.len();
        let mut out = String::from("true");
        for j in 0..c {
            out.push_str(&format!(",pred_{j}"));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Top-1 accuracy and confusion matrix of `params` on a labeled set.
pub fn evaluate(params: &ModelParams, features: &Array2<f64>, labels: &[usize]) -> Result<Evaluation> {
    if features.nrows() == 0 || features.nrows() != labels.len() {
        return param_err("evaluation set must be non-empty and aligned with its labels");
    }
    let c = params.n_classes();
    let record = forward(params, features)?;
    let mut confusion = vec![vec![0usize; c]; c];
    for (row, &y) in record.logits.rows().into_iter().zip(labels) {
        if y >= c {
            return param_err(format!("label {y} outside 0..{c}"));
        }
        confusion[y][argmax(row)] += 1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
    })
}

/// Mutable training state. The EMA copy starts equal to the initial weights.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: ModelParams,
    pub ema: ModelParams,
    pub step: usize,
    batch_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        Self {
            velocity: params.zeros_like(),
            ema: params.clone(),
            params,
            step: 0,
            batch_rng: stream(seed, Stream::Batch),
            augment_rng: stream(seed, Stream::Augment),
        }
    }
}

/// One row of the per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub l_x: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub total: f64,
    pub lr: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub neg_pair_count: usize,
}

pub struct StepOutput {
    pub log: StepLog,
    pub loss: LossOutput,
    pub stats: PairStats,
}

/// One full update on `batch`. `check_pairs` verifies the pair invariants
/// before the loss is computed.
pub fn train_step(
    state: &mut TrainState,
    batch: &ViewBatch,
    cfg: &RunConfig,
    check_pairs: bool,
) -> Result<StepOutput> {
    let tc = &cfg.trainer;
    if state.step >= tc.total_steps {
        return param_err("training already finished");
    }
    let n_classes = state.params.n_classes();
    let record = forward(&state.params, &batch.views)?;
    let labels = label_views(&record, batch, cfg.loss.tau, cfg.loss.k_for(n_classes))?;
    let psi = batch.psi_map();
    let strategy = tc.ablation_mode.pair_strategy();
    let pairs = pairs_for_strategy(&labels, &psi, strategy);
    if check_pairs && matches!(strategy, PairStrategy::Complementary | PairStrategy::HighOnly) {
        let violations = check_invariants(&pairs, &labels);
        if let Some(v) = violations.first() {
            return Err(CclError::BatchIntegrity(format!(
                "step {}: pair invariant violated: {v}",
                state.step
            )));
        }
    }
    let loss = total_loss(
        &LossInputs {
            logits: &record.logits,
            embeddings: &record.embeddings,
            batch,
            state: &labels,
            pairs: &pairs,
            with_consistency: tc.ablation_mode.uses_unlabeled(),
        },
        &cfg.loss,
    )
    .map_err(|e| match e {
        CclError::Numeric(msg) => CclError::Numeric(format!("step {}: {msg}", state.step)),
        other => other,
    })?;
    let grads = backward(&state.params, &record, &loss.d_logits, &loss.d_embeddings)?;
    let lr = lr_schedule(state.step, tc.total_steps, tc.eta0)?;
    sgd_step(&mut state.params, &mut state.velocity, &grads, lr, tc.momentum).map_err(|e| match e {
        CclError::Numeric(msg) => CclError::Numeric(format!("step {}: {msg}", state.step)),
        other => other,
    })?;
    ema_update(&mut state.ema, &state.params, tc.ema_momentum);
    state.step += 1;

    let stats = pair_stats(&pairs, &labels, Some(&batch.truth));
    let log = StepLog {
        step: state.step,
        l_x: loss.l_x,
        l_u: loss.l_u,
        l_c: loss.l_c,
        total: loss.total,
        lr,
        n_high: labels.count(Tier::High),
        n_low: labels.count(Tier::Low),
        neg_pair_count: stats.neg_total,
    };
    Ok(StepOutput { log, loss, stats })
}

/// Evaluation of the EMA weights after `step` updates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
    pub l_x: f64,
    pub l_u: f64,
    pub l_c: f64,
    pub lr: f64,
}

/// A complete run: datasets, state and the logs accumulated so far.
pub struct Trainer {
    pub config: RunConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub state: TrainState,
    pub log: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    /// Best evaluation so far with the EMA weights that produced it.
    pub best: Option<(EvalPoint, Evaluation, ModelParams)>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.datasets()?;
        config.loss.validate(train.n_classes)?;
        let params = ModelParams::init(
            train.dim(),
            train.n_classes,
            &config.network,
            &mut stream(config.seed, Stream::Init),
        )?;
        let state = TrainState::new(params, config.seed);
        Ok(Self {
            config,
            train,
            test,
            state,
            log: Vec::new(),
            evals: Vec::new(),
            best: None,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.config.trainer.total_steps
    }

    pub fn step(&mut self) -> Result<&StepLog> {
        let tc = &self.config.trainer;
        let batch = sample_batch(
            &self.train,
            tc.batch_size,
            tc.mu,
            &self.config.augment,
            &mut self.state.batch_rng,
            &mut self.state.augment_rng,
        )?;
        let check = self.state.step.is_multiple_of(tc.eval_every);
        let out = train_step(&mut self.state, &batch, &self.config, check)?;
        self.log.push(out.log);
        let step = self.state.step;
        if step.is_multiple_of(self.config.trainer.eval_every) || self.finished() {
            self.evaluate_now()?;
        }
        Ok(self.log.last().expect("just pushed"))
    }

    fn evaluate_now(&mut self) -> Result<()> {
        let eval = evaluate(&self.state.ema, &self.test.features, &self.test.labels)?;
        let last = self.log.last().expect("evaluation follows a step");
        let point = EvalPoint {
            step: self.state.step,
            accuracy: eval.accuracy,
            l_x: last.l_x,
            l_u: last.l_u,
            l_c: last.l_c,
            lr: last.lr,
        };
        let better = self
            .best
            .as_ref()
            .is_none_or(|(b, _, _)| point.accuracy > b.accuracy);
        if better {
            self.best = Some((point.clone(), eval, self.state.ema.clone()));
        }
        self.evals.push(point);
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Labels a fresh batch with the current weights, as the next update
    /// would see it. The batch is drawn from its own stream so the run is
    /// unaffected.
    pub fn label_snapshot(&self) -> Result<LabelDump> {
        let loss = &self.config.loss;
        self.label_snapshot_with(loss.tau, loss.k_for(self.train.n_classes))
    }

    /// [`Trainer::label_snapshot`] with a different threshold and `k`.
    pub fn label_snapshot_with(&self, tau: f64, k: usize) -> Result<LabelDump> {
        let tc = &self.config.trainer;
        let mut batch_rng = stream(self.config.seed, Stream::Batch);
        batch_rng.set_stream(u64::MAX - Stream::Batch as u64);
        let mut augment_rng = stream(self.config.seed, Stream::Augment);
        augment_rng.set_stream(u64::MAX - Stream::Augment as u64);
        let batch = sample_batch(
            &self.train,
            tc.batch_size,
            tc.mu,
            &self.config.augment,
            &mut batch_rng,
            &mut augment_rng,
        )?;
        let record = forward(&self.state.params, &batch.views)?;
        let state = label_views(&record, &batch, tau, k)?;
        Ok(LabelDump::from_batch(state, &batch))
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.best.as_ref().map(|(p, _, _)| p.accuracy)
    }

    /// Metrics at evaluation points: `step,acc,l_x,l_u,l_c,lr`.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,acc,l_x,l_u,l_c,lr\n");
        for e in &self.evals {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.step, e.accuracy, e.l_x, e.l_u, e.l_c, e.lr
            ));
        }
        out
    }

    /// Per-step loss components and pair counts.
    pub fn train_log_csv(&self) -> String {
        let mut out = String::from("step,l_x,l_u,l_c,total,lr,n_high,n_low,neg_pair_count\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step, r.l_x, r.l_u, r.l_c, r.total, r.lr, r.n_high, r.n_low, r.neg_pair_count
            ));
        }
        out
    }

    /// Snapshot of the run for post-mortem inspection after a failure.
    pub fn diagnostic(&self, error: &CclError) -> serde_json::Value {
        let norm = |p: &ModelParams| p.values().map(|v| v * v).sum::<f64>().sqrt();
        let finite = |p: &ModelParams| p.values().all(f64::is_finite);
        serde_json::json!({
            "error": error.to_string(),
            "step": self.state.step,
            "param_norm": norm(&self.state.params),
            "params_finite": finite(&self.state.params),
            "velocity_norm": norm(&self.state.velocity),
            "ema_finite": finite(&self.state.ema),
            "recent_steps": self.log.iter().rev().take(10).collect::<Vec<_>>(),
        })
    }
}
